//! End-to-end conversion and evaluation.

use std::fmt::Write as _;

use crate::balance::{absorb_thresholds, balance_dataset, clipify, BalanceConfig, BalanceReport};
use crate::diagnostics::{
    count_flops, count_sops, energy_report, format_table, EnergyReport, SopCount,
};
use crate::error::{Error, Result};
use crate::forward::{apply_readout_scale, classify, forward_with_mode};
use crate::graph::{ActivationMode, NetworkGraph};
use crate::io::Dataset;
use crate::snn::{
    choose_delay_with_window, estimate_t0, simulate_windows, SimOptions, SpikeTrace, T0Estimate,
    Window, DEFAULT_DELAY_WINDOW,
};
use crate::spectral::NormVariant;
use crate::transform::{fold_batchnorm, rewrite_preneuron_maxpool};

/// Shortest run for which a delay is chosen automatically.
pub const MIN_DELAYED_TIMESTEPS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvertConfig {
    pub balance: BalanceConfig,
    pub absorb: bool,
    /// Recorded in the model for later diagnostics.
    pub norm_variant: NormVariant,
}

impl Default for ConvertConfig {
    fn default() -> Self {
        Self {
            balance: BalanceConfig::default(),
            absorb: false,
            norm_variant: NormVariant::Operator,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversion {
    /// In IF mode, ready for simulation.
    pub graph: NetworkGraph,
    pub report: BalanceReport,
    pub t0: T0Estimate,
}

/// Folds batch norm and moves max pooling ahead of the activations.
pub fn prepare(graph: &NetworkGraph) -> Result<NetworkGraph> {
    let folded = fold_batchnorm(graph).map_err(|e| e.in_stage("fold_batchnorm"))?;
    rewrite_preneuron_maxpool(&folded).map_err(|e| e.in_stage("rewrite_preneuron_maxpool"))
}

/// Converts a ReLU network: prepare, learn thresholds on `data`, estimate
/// the output delay and optionally fold the thresholds into the weights.
///
/// The delay is estimated before absorption. Absorption rescales every
/// channel to threshold 1, which changes the per-slot maximum that the
/// estimate is built on.
pub fn convert(graph: &NetworkGraph, data: &Dataset, config: &ConvertConfig) -> Result<Conversion> {
    config.balance.validate()?;
    let prepared = prepare(graph)?;
    let clipped = clipify(&prepared).map_err(|e| e.in_stage("clipify"))?;
    let (balanced, report) =
        balance_dataset(&clipped, data, &config.balance).map_err(|e| e.in_stage("balance"))?;
    let batches = data
        .batches(config.balance.batch_size, None)?
        .map(|b| b.data);
    let t0 = estimate_t0(&balanced, batches).map_err(|e| e.in_stage("estimate_t0"))?;
    let mut out = if config.absorb {
        absorb_thresholds(&balanced, config.balance.theta_floor)
            .map_err(|e| e.in_stage("absorb_thresholds"))?
    } else {
        balanced
    };
    out.activation_mode = ActivationMode::If;
    out.meta.t0_estimate = Some(t0.value);
    out.meta.norm_variant = Some(config.norm_variant.as_str().to_string());
    Ok(Conversion {
        graph: out,
        report,
        t0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub timesteps: Vec<usize>,
    /// Fixed delay for every run instead of one derived from the model.
    pub delay: Option<usize>,
    pub delay_window: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            timesteps: vec![32, 64, 128],
            delay: None,
            delay_window: DEFAULT_DELAY_WINDOW,
            batch_size: 100,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps.is_empty() {
            return Err(Error::InvalidConfig("no timesteps requested".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        for &t in &self.timesteps {
            match self.delay {
                None if t < MIN_DELAYED_TIMESTEPS => {
                    return Err(Error::InvalidConfig(format!(
                        "T={t}: delayed evaluation needs T >= {MIN_DELAYED_TIMESTEPS}; \
                         pass an explicit delay for shorter runs"
                    )))
                }
                Some(d) => {
                    Window::new(d, t)?;
                }
                None => {}
            }
        }
        Ok(())
    }

    /// Delay used for a run of `timesteps` steps.
    pub fn delay_for(&self, graph: &NetworkGraph, timesteps: usize) -> usize {
        match (self.delay, graph.meta.t0_estimate) {
            (Some(d), _) => d,
            (None, Some(est)) => choose_delay_with_window(est, timesteps, self.delay_window),
            (None, None) => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub timesteps: usize,
    pub t0: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub rows: Vec<EvalRow>,
    pub ann_correct: usize,
    pub ann_accuracy: f64,
    pub samples: usize,
}

impl EvalResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,timesteps,t0,samples,correct,accuracy\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "snn,{},{},{},{},{}",
                r.timesteps, r.t0, self.samples, r.correct, r.accuracy
            );
        }
        let _ = writeln!(
            s,
            "ann,,,{},{},{}",
            self.samples, self.ann_correct, self.ann_accuracy
        );
        s
    }

    pub fn to_table(&self) -> String {
        let mut rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    "snn".into(),
                    r.timesteps.to_string(),
                    r.t0.to_string(),
                    format!("{}/{}", r.correct, self.samples),
                    format!("{:.2}%", 100.0 * r.accuracy),
                ]
            })
            .collect();
        rows.push(vec![
            "ann".into(),
            "-".into(),
            "-".into(),
            format!("{}/{}", self.ann_correct, self.samples),
            format!("{:.2}%", 100.0 * self.ann_accuracy),
        ]);
        format_table(&["model", "T", "t0", "correct", "accuracy"], &rows)
    }
}

/// The graph in a mode the simulator accepts; a ReLU graph must already
/// carry thresholds.
fn spiking_view(graph: &NetworkGraph) -> Result<NetworkGraph> {
    let mut snn = graph.clone();
    if snn.activation_mode == ActivationMode::Relu {
        snn.activation_mode = ActivationMode::If;
    }
    let missing = graph
        .activation_slots()
        .into_iter()
        .any(|i| graph.slot(i).is_none_or(|s| s.theta.is_empty()));
    if missing {
        return Err(Error::WrongMode {
            expected: "a converted model with thresholds".into(),
            found: graph.activation_mode.to_string(),
        });
    }
    Ok(snn)
}

fn accuracy(correct: usize, samples: usize) -> f64 {
    if samples == 0 {
        0.0
    } else {
        correct as f64 / samples as f64
    }
}

/// Top-1 accuracy of the spiking network at every requested `T`, all taken
/// from one simulation per batch, plus the accuracy of the ReLU network
/// with the same weights.
pub fn evaluate(graph: &NetworkGraph, data: &Dataset, config: &EvalConfig) -> Result<EvalResult> {
    config.validate()?;
    let Some(labels) = &data.labels else {
        return Err(Error::InvalidConfig("evaluation needs labels".into()));
    };
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let snn = spiking_view(graph)?;
    let windows: Vec<Window> = config
        .timesteps
        .iter()
        .map(|&t| Window::new(config.delay_for(graph, t), t))
        .collect::<Result<_>>()?;

    let mut correct = vec![0usize; windows.len()];
    let mut ann_correct = 0usize;
    for batch in data.batches(config.batch_size, None)? {
        let truth = batch.labels.as_ref().expect("labelled dataset");
        let hits = |pred: Vec<usize>| {
            pred.iter()
                .zip(truth)
                .filter(|(p, t)| **p == **t as usize)
                .count()
        };
        let mut ann = forward_with_mode(graph, &batch.data, ActivationMode::Relu)?
            .outputs
            .pop()
            .unwrap_or_else(|| batch.data.clone());
        apply_readout_scale(graph, &mut ann);
        ann_correct += hits(classify(&ann));

        let run = simulate_windows(&snn, &batch.data, &windows, SimOptions::default())?;
        for (k, mut out) in run.outputs.into_iter().enumerate() {
            apply_readout_scale(graph, &mut out);
            correct[k] += hits(classify(&out));
        }
    }
    let samples = labels.len();
    Ok(EvalResult {
        rows: windows
            .iter()
            .zip(correct)
            .map(|(w, c)| EvalRow {
                timesteps: w.timesteps,
                t0: w.t0,
                correct: c,
                accuracy: accuracy(c, samples),
            })
            .collect(),
        ann_correct,
        ann_accuracy: accuracy(ann_correct, samples),
        samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyRow {
    pub timesteps: usize,
    pub t0: usize,
    /// Top-1 accuracy of the same runs, when the data has labels.
    pub accuracy: Option<f64>,
    pub sops: SopCount,
    pub report: EnergyReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyResult {
    pub rows: Vec<EnergyRow>,
    /// Spike trace over the whole dataset, one per row.
    pub traces: Vec<SpikeTrace>,
}

impl EnergyResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "timesteps,t0,accuracy,sops,comparator_ops,analog_macs,flops,frames,\
             snn_energy_joules,ann_energy_joules,snn_frames_per_joule,ann_frames_per_joule\n",
        );
        for r in &self.rows {
            let e = &r.report;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{:e},{:e},{:e},{:e}",
                r.timesteps,
                r.t0,
                r.accuracy.map_or(String::new(), |a| a.to_string()),
                r.sops.sops,
                r.sops.comparator_ops,
                r.sops.analog_macs,
                e.flops,
                e.frames,
                e.snn_energy_joules,
                e.ann_energy_joules,
                e.snn_frames_per_joule,
                e.ann_frames_per_joule
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let e = &r.report;
                vec![
                    r.timesteps.to_string(),
                    r.t0.to_string(),
                    r.accuracy
                        .map_or("-".into(), |a| format!("{:.2}%", 100.0 * a)),
                    r.sops.sops.to_string(),
                    r.sops.comparator_ops.to_string(),
                    e.flops.to_string(),
                    format!("{:.3e}", e.snn_energy_joules),
                    format!("{:.3e}", e.ann_energy_joules),
                    format!("{:.2}", e.ann_energy_joules / e.snn_energy_joules),
                ]
            })
            .collect();
        format_table(
            &[
                "T",
                "t0",
                "accuracy",
                "SOPs",
                "comparisons",
                "FLOPs",
                "SNN J",
                "ANN J",
                "ANN/SNN",
            ],
            &rows,
        )
    }
}

/// Simulates the whole dataset once per requested `T`, counting synaptic
/// operations, and prices them against one ANN inference per frame.
pub fn measure_energy(
    graph: &NetworkGraph,
    data: &Dataset,
    config: &EvalConfig,
) -> Result<EnergyResult> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let snn = spiking_view(graph)?;
    let flops_per_frame = count_flops(graph)?;
    let options = SimOptions {
        record_trace: true,
        record_sums: false,
    };
    let mut rows = Vec::with_capacity(config.timesteps.len());
    let mut traces = Vec::with_capacity(config.timesteps.len());
    for &t in &config.timesteps {
        let window = Window::new(config.delay_for(graph, t), t)?;
        let mut trace: Option<SpikeTrace> = None;
        let mut correct = 0usize;
        for batch in data.batches(config.batch_size, None)? {
            let run = simulate_windows(&snn, &batch.data, &[window], options)?;
            if let Some(labels) = &batch.labels {
                let mut out = run.outputs.into_iter().next().expect("one window");
                apply_readout_scale(graph, &mut out);
                correct += classify(&out)
                    .iter()
                    .zip(labels)
                    .filter(|(p, l)| **p == **l as usize)
                    .count();
            }
            let part = run.trace.expect("trace requested");
            match &mut trace {
                Some(acc) => acc.merge(&part)?,
                None => trace = Some(part),
            }
        }
        let trace = trace.expect("non-empty dataset");
        let sops = count_sops(&trace, graph)?;
        let frames = trace.frames as u64;
        let report = energy_report(sops.sops, flops_per_frame * frames, frames)?;
        rows.push(EnergyRow {
            timesteps: t,
            t0: window.t0,
            accuracy: data.labels.as_ref().map(|_| accuracy(correct, data.len())),
            sops,
            report,
        });
        traces.push(trace);
    }
    Ok(EnergyResult { rows, traces })
}
