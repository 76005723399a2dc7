//! Time-stepped integrate-and-fire simulation with reset by subtraction,
//! half-threshold initialization, direct input coding and delayed
//! evaluation of the output.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::forward::{check_batch, forward_with_mode};
use crate::graph::{channels_of, inner_of, ActivationMode, LayerSpec, NetworkGraph};
use crate::ops;
use crate::tensor::Tensor;

/// Steps kept at the end of a run when the estimated delay is too late.
pub const DEFAULT_DELAY_WINDOW: usize = 4;
/// Floor on the activation rate used by [`estimate_t0`].
pub const T0_EPSILON: f64 = 1e-6;
/// Largest contribution a single slot can make to [`estimate_t0`].
pub const T0_CAP: f64 = 1e6;

/// Membrane state of one spiking layer for a whole batch.
#[derive(Debug, Clone, PartialEq)]
pub struct IFLayerState {
    /// Kept in f64 so rounding does not drift the charge ledger over long runs.
    pub v: Vec<f64>,
    /// Threshold per channel.
    pub theta: Vec<f32>,
    /// Spikes emitted by each neuron since the last reset.
    pub spike_count: Vec<u32>,
    /// Threshold of each element of one sample.
    theta_elem: Vec<f32>,
}

impl IFLayerState {
    /// State for `batch` samples of shape `sample_shape`, with `v = θ/2`.
    /// `theta` holds one value or one per channel.
    pub fn new(theta: &[f32], sample_shape: &[usize], batch: usize) -> Result<Self> {
        let channels = channels_of(sample_shape);
        let inner = inner_of(sample_shape).max(1);
        let theta: Vec<f32> = match theta.len() {
            1 => vec![theta[0]; channels],
            n if n == channels => theta.to_vec(),
            n => {
                return Err(Error::ChannelMismatch {
                    slot: 0,
                    expected: channels,
                    found: n,
                })
            }
        };
        if let Some((c, &t)) = theta
            .iter()
            .enumerate()
            .find(|(_, &t)| !(t > 0.0 && t.is_finite()))
        {
            return Err(Error::ThresholdTooSmall {
                slot: 0,
                channel: c,
                value: t,
                floor: 0.0,
            });
        }
        let theta_elem: Vec<f32> = theta
            .iter()
            .flat_map(|&t| std::iter::repeat_n(t, inner))
            .collect();
        let n = batch * theta_elem.len();
        let mut s = Self {
            v: vec![0.0; n],
            theta,
            spike_count: vec![0; n],
            theta_elem,
        };
        s.reset();
        Ok(s)
    }

    /// Back to `v = θ/2` with zeroed spike counts.
    pub fn reset(&mut self) {
        let len = self.theta_elem.len();
        for (k, v) in self.v.iter_mut().enumerate() {
            *v = (self.theta_elem[k % len] * 0.5) as f64;
        }
        self.spike_count.iter_mut().for_each(|c| *c = 0);
    }

    /// One timestep: integrate, fire where `v ≥ θ`, subtract `θ` from the
    /// neurons that fired. Returns the binary spike tensor.
    pub fn step(&mut self, input: &Tensor) -> Result<Tensor> {
        if input.len() != self.v.len() {
            return Err(Error::TensorSize {
                shape: input.shape().to_vec(),
                len: self.v.len(),
            });
        }
        let mut out = vec![0.0f32; self.v.len()];
        self.fire(input.data(), &mut out);
        for o in out.iter_mut().filter(|o| **o != 0.0) {
            *o = 1.0;
        }
        Tensor::new(input.shape().to_vec(), out)
    }

    /// Like [`IFLayerState::step`] but writes the postsynaptic value `θ·s`
    /// and returns the number of spikes.
    pub(crate) fn fire(&mut self, input: &[f32], out: &mut [f32]) -> u64 {
        let len = self.theta_elem.len();
        let mut spikes = 0u64;
        for (b, ((v, o), x)) in self
            .v
            .chunks_mut(len)
            .zip(out.chunks_mut(len))
            .zip(input.chunks(len))
            .enumerate()
        {
            let counts = &mut self.spike_count[b * len..(b + 1) * len];
            for k in 0..len {
                let th = self.theta_elem[k];
                let mut vk = v[k] + x[k] as f64;
                if vk >= th as f64 {
                    vk -= th as f64;
                    o[k] = th;
                    counts[k] += 1;
                    spikes += 1;
                } else {
                    o[k] = 0.0;
                }
                v[k] = vk;
            }
        }
        spikes
    }
}

/// Fresh state for every activation slot, indexed like `graph.activation_slots()`.
pub fn init_membrane(graph: &NetworkGraph, batch: usize) -> Result<Vec<IFLayerState>> {
    let shapes = graph.shapes()?;
    graph
        .activation_slots()
        .into_iter()
        .map(|i| {
            let slot = graph.slot(i).expect("activation slot");
            IFLayerState::new(&slot.theta, &shapes[i], batch).map_err(|e| match e {
                Error::ChannelMismatch {
                    expected, found, ..
                } => Error::ChannelMismatch {
                    slot: i,
                    expected,
                    found,
                },
                Error::ThresholdTooSmall {
                    channel,
                    value,
                    floor,
                    ..
                } => Error::ThresholdTooSmall {
                    slot: i,
                    channel,
                    value,
                    floor,
                },
                e => e,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimConfig {
    pub timesteps: usize,
    /// Output is averaged over steps `t0 + 1 ..= timesteps`.
    pub t0: usize,
    pub record_trace: bool,
}

impl SimConfig {
    pub fn new(timesteps: usize, t0: usize) -> Self {
        Self {
            timesteps,
            t0,
            record_trace: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        Window::new(self.t0, self.timesteps).map(|_| ())
    }
}

/// An averaging window `t0 + 1 ..= timesteps` of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub t0: usize,
    pub timesteps: usize,
}

impl Window {
    pub fn new(t0: usize, timesteps: usize) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::InvalidConfig("timesteps must be at least 1".into()));
        }
        if t0 >= timesteps {
            return Err(Error::InvalidConfig(format!(
                "delay {t0} must be below the {timesteps} timesteps"
            )));
        }
        Ok(Self { t0, timesteps })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimOptions {
    pub record_trace: bool,
    /// Keep per-layer output sums and membrane potentials for ledgers and
    /// diagnostics.
    pub record_sums: bool,
}

/// Spike statistics of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrace {
    pub timesteps: usize,
    pub frames: usize,
    /// Layer index of every activation slot.
    pub slots: Vec<usize>,
    /// Per slot, spikes of each neuron of one sample summed over the batch.
    pub counts: Vec<Vec<u64>>,
    /// Per slot, total spikes at each step (index `t - 1`).
    pub per_step: Vec<Vec<u64>>,
}

impl SpikeTrace {
    pub fn total(&self) -> u64 {
        self.per_step.iter().flatten().sum()
    }

    pub fn slot_total(&self, k: usize) -> u64 {
        self.per_step[k].iter().sum()
    }

    /// Adds the spikes of another run of the same graph and length, e.g.
    /// the next batch.
    pub fn merge(&mut self, other: &SpikeTrace) -> Result<()> {
        let same_shape = self.timesteps == other.timesteps
            && self.slots == other.slots
            && self
                .counts
                .iter()
                .zip(&other.counts)
                .all(|(a, b)| a.len() == b.len());
        if !same_shape {
            return Err(Error::TraceMismatch(
                "cannot merge traces of different graphs or lengths".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.per_step.iter_mut().zip(&other.per_step) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.frames += other.frames;
        Ok(())
    }

    /// `layer,timestep_bucket,count` rows; bucket `b` covers steps
    /// `b·bucket + 1 ..= (b + 1)·bucket`.
    pub fn to_csv(&self, bucket: usize) -> String {
        let bucket = bucket.max(1);
        let mut s = String::from("layer,timestep_bucket,count\n");
        for (k, &layer) in self.slots.iter().enumerate() {
            for (b, chunk) in self.per_step[k].chunks(bucket).enumerate() {
                let _ = writeln!(s, "{},{},{}", layer, b, chunk.iter().sum::<u64>());
            }
        }
        s
    }
}

/// Sums over every step of a run, for conservation checks and averages.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSums {
    pub timesteps: usize,
    pub input: Tensor,
    /// Per layer, the output summed over steps, in f64.
    pub outputs: Vec<Vec<f64>>,
    /// Per layer, membrane potentials before the first and after the last
    /// step (activation slots only).
    pub v_start: Vec<Option<Vec<f64>>>,
    pub v_end: Vec<Option<Vec<f64>>>,
}

impl LayerSums {
    /// Time-averaged output of `layer`.
    pub fn mean_output(&self, layer: usize) -> Vec<f64> {
        let t = self.timesteps as f64;
        self.outputs[layer].iter().map(|s| s / t).collect()
    }

    /// Time-averaged input current of `layer`.
    pub fn mean_input(&self, layer: usize) -> Vec<f64> {
        if layer == 0 {
            self.input.data().iter().map(|&v| v as f64).collect()
        } else {
            self.mean_output(layer - 1)
        }
    }

    /// Summed input current of `layer`.
    pub fn input_sum(&self, layer: usize) -> Vec<f64> {
        if layer == 0 {
            let t = self.timesteps as f64;
            self.input.data().iter().map(|&v| v as f64 * t).collect()
        } else {
            self.outputs[layer - 1].clone()
        }
    }

    /// Per neuron, `Σ input − Σ θ·s − (v(T) − v(0))` for an activation slot.
    pub fn ledger_residual(&self, layer: usize) -> Option<Vec<f64>> {
        let (v0, v1) = (self.v_start[layer].as_ref()?, self.v_end[layer].as_ref()?);
        let inp = self.input_sum(layer);
        Some(
            inp.iter()
                .zip(&self.outputs[layer])
                .zip(v0.iter().zip(v1))
                .map(|((i, o), (a, b))| i - o - (b - a))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRun {
    /// One averaged output per requested window.
    pub outputs: Vec<Tensor>,
    pub trace: Option<SpikeTrace>,
    pub sums: Option<LayerSums>,
}

/// Simulates `graph` on `batch` and averages the output over
/// `config.t0 + 1 ..= config.timesteps`.
pub fn simulate(
    graph: &NetworkGraph,
    batch: &Tensor,
    config: &SimConfig,
) -> Result<(Tensor, Option<SpikeTrace>)> {
    config.validate()?;
    let run = simulate_windows(
        graph,
        batch,
        &[Window::new(config.t0, config.timesteps)?],
        SimOptions {
            record_trace: config.record_trace,
            record_sums: false,
        },
    )?;
    let out = run.outputs.into_iter().next().expect("one window");
    Ok((out, run.trace))
}

/// One run up to the longest window; each window keeps its own accumulator,
/// so every output is bitwise what a separate run would give.
pub fn simulate_windows(
    graph: &NetworkGraph,
    batch: &Tensor,
    windows: &[Window],
    options: SimOptions,
) -> Result<SimRun> {
    if graph.activation_mode == ActivationMode::Relu {
        return Err(Error::WrongMode {
            expected: "clip or if".into(),
            found: graph.activation_mode.to_string(),
        });
    }
    if windows.is_empty() {
        return Err(Error::InvalidConfig(
            "no simulation window requested".into(),
        ));
    }
    for w in windows {
        Window::new(w.t0, w.timesteps)?;
    }
    check_batch(graph, batch)?;
    let shapes = graph.shapes()?;
    let varying = graph.time_varying();
    let n = graph.layers.len();
    let frames = batch.batch();
    let t_max = windows.iter().map(|w| w.timesteps).max().unwrap_or(1);

    let slots = graph.activation_slots();
    let mut states: Vec<Option<IFLayerState>> = vec![None; n];
    for (k, st) in init_membrane(graph, frames)?.into_iter().enumerate() {
        states[slots[k]] = Some(st);
    }
    let v_start: Vec<Option<Vec<f64>>> = if options.record_sums {
        states
            .iter()
            .map(|s| s.as_ref().map(|s| s.v.clone()))
            .collect()
    } else {
        Vec::new()
    };

    let out_len = graph.output_shape()?.iter().product::<usize>() * frames;
    let mut acc = vec![vec![0.0f64; out_len]; windows.len()];
    let mut sums: Vec<Vec<f64>> = if options.record_sums {
        (0..n)
            .map(|i| vec![0.0; frames * shapes[i].iter().product::<usize>()])
            .collect()
    } else {
        Vec::new()
    };
    let mut per_step: Vec<Vec<u64>> = vec![Vec::with_capacity(t_max); slots.len()];

    let mut outs: Vec<Tensor> = Vec::with_capacity(n);
    for t in 1..=t_max {
        for i in 0..n {
            if t == 1 || varying[i] {
                let input = if i == 0 { batch } else { &outs[i - 1] };
                let in_shape = graph.input_shape_of(&shapes, i);
                let out = match &graph.layers[i] {
                    LayerSpec::Activation(_) => {
                        let st = states[i].as_mut().expect("slot state");
                        let mut o = Tensor::zeros(input.shape().to_vec());
                        let spikes = st.fire(input.data(), o.data_mut());
                        let k = slots.binary_search(&i).expect("slot index");
                        per_step[k].push(spikes);
                        o
                    }
                    LayerSpec::ResidualAdd(r) => ops::run_layer(
                        i,
                        &graph.layers[i],
                        input,
                        &in_shape,
                        &shapes[i],
                        Some(&outs[r.source]),
                    )?,
                    layer => ops::run_layer(i, layer, input, &in_shape, &shapes[i], None)?,
                };
                if t == 1 {
                    outs.push(out);
                } else {
                    outs[i] = out;
                }
            }
            if options.record_sums {
                for (s, &v) in sums[i].iter_mut().zip(outs[i].data()) {
                    *s += v as f64;
                }
            }
        }
        let last = outs.last().unwrap_or(batch);
        for (w, a) in windows.iter().zip(acc.iter_mut()) {
            if t > w.t0 && t <= w.timesteps {
                for (s, &v) in a.iter_mut().zip(last.data()) {
                    *s += v as f64;
                }
            }
        }
    }

    let mut out_shape = vec![frames];
    out_shape.extend(graph.output_shape()?);
    let outputs = windows
        .iter()
        .zip(acc)
        .map(|(w, a)| {
            let d = (w.timesteps - w.t0) as f64;
            Tensor::new(
                out_shape.clone(),
                a.into_iter().map(|s| (s / d) as f32).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let trace = options.record_trace.then(|| {
        let counts = slots
            .iter()
            .map(|&i| {
                let st = states[i].as_ref().expect("slot state");
                let len = st.theta_elem.len();
                let mut c = vec![0u64; len];
                for chunk in st.spike_count.chunks(len) {
                    for (a, &b) in c.iter_mut().zip(chunk) {
                        *a += b as u64;
                    }
                }
                c
            })
            .collect();
        SpikeTrace {
            timesteps: t_max,
            frames,
            slots: slots.clone(),
            counts,
            per_step: per_step.clone(),
        }
    });
    let sums = options.record_sums.then(|| LayerSums {
        timesteps: t_max,
        input: batch.clone(),
        outputs: sums,
        v_start,
        v_end: states
            .iter()
            .map(|s| s.as_ref().map(|s| s.v.clone()))
            .collect(),
    });
    Ok(SimRun {
        outputs,
        trace,
        sums,
    })
}

/// Contribution of one activation slot to the delay estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotDelay {
    pub layer: usize,
    /// Largest channel threshold of the slot.
    pub theta_max: f64,
    pub v0: f64,
    /// Largest per-neuron mean of `max(z, 0)` over the data.
    pub max_mean_activation: f64,
    pub contribution: f64,
    /// The slot never activated; its rate was floored and its contribution capped.
    pub dead: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct T0Estimate {
    pub value: f64,
    pub slots: Vec<SlotDelay>,
}

/// Expected arrival time of the first output spike: the time each slot
/// needs to charge from `θ/2` to `θ` at its fastest mean input rate,
/// summed over slots. Rates come from a clipped forward pass; per-channel
/// thresholds are reduced by their maximum.
pub fn estimate_t0<I>(graph: &NetworkGraph, data: I) -> Result<T0Estimate>
where
    I: IntoIterator<Item = Tensor>,
{
    if graph.activation_mode == ActivationMode::Relu {
        return Err(Error::WrongMode {
            expected: "clip or if".into(),
            found: graph.activation_mode.to_string(),
        });
    }
    let slots = graph.activation_slots();
    let shapes = graph.shapes()?;
    let mut sums: Vec<Vec<f64>> = slots
        .iter()
        .map(|&i| vec![0.0; shapes[i].iter().product()])
        .collect();
    let mut samples = 0usize;
    for batch in data {
        let rec = forward_with_mode(graph, &batch, ActivationMode::Clip)?;
        for (k, &i) in slots.iter().enumerate() {
            let z = rec.input_of(i);
            let len = sums[k].len();
            for chunk in z.data().chunks(len) {
                for (s, &v) in sums[k].iter_mut().zip(chunk) {
                    *s += ops::relu(v) as f64;
                }
            }
        }
        samples += batch.batch();
    }
    if samples == 0 {
        return Err(Error::EmptyData);
    }
    let mut value = 0.0;
    let mut out = Vec::with_capacity(slots.len());
    for (k, &i) in slots.iter().enumerate() {
        let theta_max = graph.max_theta(i).unwrap_or(0.0) as f64;
        let v0 = theta_max / 2.0;
        let rate = sums[k]
            .iter()
            .map(|s| s / samples as f64)
            .fold(0.0f64, f64::max);
        let dead = rate < T0_EPSILON;
        let contribution = ((theta_max - v0) / rate.max(T0_EPSILON)).min(T0_CAP);
        if dead {
            log::warn!("slot at layer {i} never activates; delay contribution capped");
        }
        value += contribution;
        out.push(SlotDelay {
            layer: i,
            theta_max,
            v0,
            max_mean_activation: rate,
            contribution,
            dead,
        });
    }
    Ok(T0Estimate { value, slots: out })
}

/// Delay for a run of `timesteps` steps with the default window of 4.
pub fn choose_delay(t0_estimate: f64, timesteps: usize) -> usize {
    choose_delay_with_window(t0_estimate, timesteps, DEFAULT_DELAY_WINDOW)
}

/// `floor(t0_estimate)` if at least `window` steps remain after it,
/// otherwise `timesteps - window`; always below `timesteps`.
pub fn choose_delay_with_window(t0_estimate: f64, timesteps: usize, window: usize) -> usize {
    if timesteps <= window {
        log::warn!(
            "{timesteps} timesteps leave no room for a delay window of {window}; using t0 = 0"
        );
        return 0;
    }
    let fits = t0_estimate.is_finite() && timesteps as f64 >= t0_estimate + window as f64;
    let t0 = if fits {
        t0_estimate.max(0.0).floor() as usize
    } else {
        timesteps - window
    };
    t0.min(timesteps - 1)
}
