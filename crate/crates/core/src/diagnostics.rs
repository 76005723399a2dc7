//! Conversion error, its layer-by-layer bound, and SOP/FLOP energy estimates.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::forward::{forward_with_mode, ForwardRecord};
use crate::graph::{ActivationMode, LayerSpec, NetworkGraph, Pool2d};
use crate::ops;
use crate::snn::{simulate_windows, LayerSums, SimOptions, SpikeTrace, Window};
use crate::spectral::{layer_norm, NormVariant};
use crate::tensor::Tensor;

/// Joules per synaptic operation.
pub const SOP_ENERGY_J: f64 = 77e-15;
/// Joules per floating-point operation.
pub const FLOP_ENERGY_J: f64 = 12.5e-12;

/// Mean over the batch of the per-sample 2-norm of `a - b`.
fn mean_l2(a: &[f64], b: &[f64], batch: usize) -> f64 {
    if batch == 0 {
        return 0.0;
    }
    let n = a.len() / batch;
    let total: f64 = (0..batch)
        .map(|s| {
            a[s * n..(s + 1) * n]
                .iter()
                .zip(&b[s * n..(s + 1) * n])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / batch as f64
}

fn widen(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn sim_sums(graph: &NetworkGraph, batch: &Tensor, timesteps: usize) -> Result<LayerSums> {
    let run = simulate_windows(
        graph,
        batch,
        &[Window::new(0, timesteps)?],
        SimOptions {
            record_trace: false,
            record_sums: true,
        },
    )?;
    Ok(run.sums.expect("sums requested"))
}

/// Gap at layer `layer` between the SNN's average output over `timesteps`
/// steps and the ReLU network's output, as a per-sample 2-norm averaged over
/// the batch. Both graphs must share weights and layer layout.
pub fn conversion_error(
    ann: &NetworkGraph,
    snn: &NetworkGraph,
    batch: &Tensor,
    timesteps: usize,
    layer: usize,
) -> Result<f64> {
    if timesteps == 0 {
        return Err(Error::InvalidConfig("timesteps must be at least 1".into()));
    }
    if ann.layers.len() != snn.layers.len() || layer >= snn.layers.len() {
        return Err(Error::InvalidConfig(format!(
            "layer {layer} is not a layer of both graphs"
        )));
    }
    let reference = forward_with_mode(ann, batch, ActivationMode::Relu)?;
    let sums = sim_sums(snn, batch, timesteps)?;
    Ok(mean_l2(
        &sums.mean_output(layer),
        &widen(&reference.outputs[layer]),
        batch.batch(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerError {
    pub layer: usize,
    pub kind: &'static str,
    /// Weight norm of Dense/Conv2d layers.
    pub norm: Option<f64>,
    /// Intra-layer error of activation slots, `‖S(ẑ) − R(ẑ)‖` with `ẑ` the
    /// simulated average input.
    pub epsilon: Option<f64>,
    /// `‖avg_t max − max avg_t‖` for max pooling on time-varying currents.
    pub pool_gap: Option<f64>,
    /// Measured `‖S − A‖` at this layer.
    pub measured: f64,
    /// Bound on `measured` accumulated from the input up to this layer.
    pub bound: f64,
    /// Same bound with clipped-forward values in place of simulated ones.
    pub proxy_epsilon: Option<f64>,
    pub proxy_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub timesteps: usize,
    pub samples: usize,
    pub norm_variant: NormVariant,
    pub layers: Vec<LayerError>,
    pub e_model: f64,
    pub bound: f64,
    /// Bound computed from the clipped forward pass used while balancing.
    pub proxy_bound: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:e}"))
}

impl ErrorReport {
    pub fn holds(&self) -> bool {
        self.e_model <= self.bound
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "layer,kind,norm,epsilon,pool_gap,measured,bound,proxy_epsilon,proxy_bound\n",
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:e},{:e},{},{:e}",
                l.layer,
                l.kind,
                opt(l.norm),
                opt(l.epsilon),
                opt(l.pool_gap),
                l.measured,
                l.bound,
                opt(l.proxy_epsilon),
                l.proxy_bound
            );
        }
        let _ = writeln!(
            s,
            "model,{},,,,{:e},{:e},,{:e}",
            self.norm_variant.as_str(),
            self.e_model,
            self.bound,
            self.proxy_bound
        );
        s
    }

    pub fn to_table(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.5}"));
        let mut rows: Vec<Vec<String>> = self
            .layers
            .iter()
            .map(|l| {
                vec![
                    l.layer.to_string(),
                    l.kind.to_string(),
                    f(l.norm),
                    f(l.epsilon),
                    f(l.pool_gap),
                    format!("{:.5}", l.measured),
                    format!("{:.5}", l.bound),
                ]
            })
            .collect();
        rows.push(vec![
            "model".into(),
            self.norm_variant.as_str().into(),
            "-".into(),
            "-".into(),
            "-".into(),
            format!("{:.5}", self.e_model),
            format!("{:.5}", self.bound),
        ]);
        format_table(
            &[
                "layer", "kind", "norm", "epsilon", "pool_gap", "measured", "bound",
            ],
            &rows,
        )
    }
}

/// Max pooling in f64 over a `[batch, C, H, W]` buffer.
fn max_pool_f64(p: &Pool2d, x: &[f64], batch: usize, in_shape: &[usize]) -> Vec<f64> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let oh = (h - p.kernel[0]) / p.stride[0] + 1;
    let ow = (w - p.kernel[1]) / p.stride[1] + 1;
    let mut out = Vec::with_capacity(batch * c * oh * ow);
    for plane in x.chunks(h * w).take(batch * c) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..p.kernel[0] {
                    for kx in 0..p.kernel[1] {
                        m = m.max(plane[(oy * p.stride[0] + ky) * w + ox * p.stride[1] + kx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Simulates `graph` for `timesteps` steps and bounds the output error
/// layer by layer. Starting from 0 at the direct-coded input, the bound
/// grows through each layer as
///
/// * Dense/Conv2d: `‖W‖·b`
/// * activation: `b + ε`, ReLU being 1-Lipschitz
/// * average pooling: `sqrt(overlap / window)·b`
/// * max pooling: `pool_gap + sqrt(overlap)·b`
/// * residual join: `b_main + max|k|·b_skip`
/// * batch norm: `max|γ/σ|·b`
///
/// On a plain chain of linear layers and activations this is
/// `Σ_l (Π_{k>l} ‖W^k‖) ε^l`.
pub fn error_bound(
    graph: &NetworkGraph,
    batch: &Tensor,
    timesteps: usize,
    variant: NormVariant,
) -> Result<ErrorReport> {
    let shapes = graph.shapes()?;
    let frames = batch.batch();
    let reference = forward_with_mode(graph, batch, ActivationMode::Relu)?;
    let clipped = forward_with_mode(graph, batch, ActivationMode::Clip)?;
    let sums = sim_sums(graph, batch, timesteps)?;
    let mut bounds: Vec<f64> = Vec::with_capacity(graph.layers.len());
    let mut proxies: Vec<f64> = Vec::with_capacity(graph.layers.len());
    let mut rows = Vec::with_capacity(graph.layers.len());
    for (i, layer) in graph.layers.iter().enumerate() {
        let in_shape = graph.input_shape_of(&shapes, i);
        let (b_in, p_in) = if i == 0 {
            (0.0, 0.0)
        } else {
            (bounds[i - 1], proxies[i - 1])
        };
        let mut row = LayerError {
            layer: i,
            kind: layer.kind(),
            norm: None,
            epsilon: None,
            pool_gap: None,
            measured: mean_l2(&sums.mean_output(i), &widen(&reference.outputs[i]), frames),
            bound: 0.0,
            proxy_epsilon: None,
            proxy_bound: 0.0,
        };
        let (b, p) = match layer {
            LayerSpec::Dense(_) | LayerSpec::Conv2d(_) => {
                let n = layer_norm(layer, &in_shape, variant).expect("weighted layer");
                row.norm = Some(n);
                (n * b_in, n * p_in)
            }
            LayerSpec::AvgPool(pool) => {
                let k = (pool.kernel[0] * pool.kernel[1]) as f64;
                let f = (pool.max_overlap() as f64 / k).sqrt();
                (f * b_in, f * p_in)
            }
            LayerSpec::PreNeuronMaxPool(pool) | LayerSpec::MaxPool(pool) => {
                let pooled_mean = max_pool_f64(pool, &sums.mean_input(i), frames, &in_shape);
                let gap = mean_l2(&sums.mean_output(i), &pooled_mean, frames);
                row.pool_gap = Some(gap);
                let f = (pool.max_overlap() as f64).sqrt();
                (gap + f * b_in, f * p_in)
            }
            LayerSpec::ResidualAdd(r) => {
                let k = r.scale.as_ref().map_or(1.0, |s| {
                    s.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()))
                });
                (b_in + k * bounds[r.source], p_in + k * proxies[r.source])
            }
            LayerSpec::BatchNorm(bn) => {
                let k = bn.affine().iter().fold(0.0f64, |m, &(s, _)| m.max(s.abs()));
                (k * b_in, k * p_in)
            }
            LayerSpec::Flatten => (b_in, p_in),
            LayerSpec::Activation(_) => {
                let zhat = sums.mean_input(i);
                let relu_zhat: Vec<f64> = zhat.iter().map(|&v| v.max(0.0)).collect();
                let eps = mean_l2(&sums.mean_output(i), &relu_zhat, frames);
                let proxy = proxy_epsilon(&clipped, i, frames);
                row.epsilon = Some(eps);
                row.proxy_epsilon = Some(proxy);
                (b_in + eps, p_in + proxy)
            }
        };
        row.bound = b;
        row.proxy_bound = p;
        bounds.push(b);
        proxies.push(p);
        rows.push(row);
    }
    let e_model = rows.last().map_or(0.0, |r| r.measured);
    Ok(ErrorReport {
        timesteps,
        samples: frames,
        norm_variant: variant,
        e_model,
        bound: bounds.last().copied().unwrap_or(0.0),
        proxy_bound: proxies.last().copied().unwrap_or(0.0),
        layers: rows,
    })
}

/// `‖C(z; θ) − R(z)‖` on the clipped forward pass.
fn proxy_epsilon(clipped: &ForwardRecord, layer: usize, frames: usize) -> f64 {
    let z = clipped.input_of(layer);
    let relu: Vec<f64> = z.data().iter().map(|&v| ops::relu(v) as f64).collect();
    mean_l2(&widen(&clipped.outputs[layer]), &relu, frames)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotSops {
    pub layer: usize,
    pub spikes: u64,
    pub sops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SopCount {
    /// Synaptic operations triggered by spikes.
    pub sops: u64,
    /// Max-pooling comparisons on real-valued currents (not SOPs).
    pub comparator_ops: u64,
    /// Multiply-accumulates of layers fed real values, such as the first
    /// layer under direct input coding.
    pub analog_macs: u64,
    pub per_slot: Vec<SlotSops>,
}

/// Number of `(output, kernel offset)` pairs in which each input row
/// appears, for a 1-D sliding window.
fn window_hits(len: usize, kernel: usize, stride: usize, pad: usize, out_len: usize) -> Vec<u64> {
    let mut hits = vec![0u64; len];
    for o in 0..out_len {
        for k in 0..kernel {
            let pos = (o * stride + k) as isize - pad as isize;
            if pos >= 0 && (pos as usize) < len {
                hits[pos as usize] += 1;
            }
        }
    }
    hits
}

/// Synaptic fan-out of every neuron in the output of `layer`: the number of
/// synapses one spike from it reaches. Flatten is looked through.
pub fn fanout(graph: &NetworkGraph, layer: usize) -> Result<Vec<u64>> {
    let shapes = graph.shapes()?;
    let len: usize = shapes[layer].iter().product();
    let mut out = vec![0u64; len];
    let mut stack: Vec<(usize, usize)> = graph
        .consumers(layer)
        .into_iter()
        .map(|c| (c, layer))
        .collect();
    while let Some((c, from)) = stack.pop() {
        let in_shape = &shapes[from];
        match &graph.layers[c] {
            LayerSpec::Dense(d) => out.iter_mut().for_each(|f| *f += d.out_features as u64),
            LayerSpec::Conv2d(conv) => {
                let (h, w) = (in_shape[1], in_shape[2]);
                let (oh, ow) = (shapes[c][1], shapes[c][2]);
                let hy = window_hits(h, conv.kernel[0], conv.stride[0], conv.padding[0], oh);
                let hx = window_hits(w, conv.kernel[1], conv.stride[1], conv.padding[1], ow);
                for (k, f) in out.iter_mut().enumerate() {
                    let (y, x) = ((k / w) % h, k % w);
                    *f += conv.out_channels as u64 * hy[y] * hx[x];
                }
            }
            LayerSpec::AvgPool(p) => {
                let (h, w) = (in_shape[1], in_shape[2]);
                let (oh, ow) = (shapes[c][1], shapes[c][2]);
                let hy = window_hits(h, p.kernel[0], p.stride[0], 0, oh);
                let hx = window_hits(w, p.kernel[1], p.stride[1], 0, ow);
                for (k, f) in out.iter_mut().enumerate() {
                    *f += hy[(k / w) % h] * hx[k % w];
                }
            }
            LayerSpec::Flatten => {
                stack.extend(graph.consumers(c).into_iter().map(|n| (n, c)));
            }
            // comparisons are counted separately
            LayerSpec::PreNeuronMaxPool(_) | LayerSpec::MaxPool(_) => {}
            LayerSpec::ResidualAdd(_) | LayerSpec::BatchNorm(_) | LayerSpec::Activation(_) => {
                out.iter_mut().for_each(|f| *f += 1)
            }
        }
    }
    Ok(out)
}

/// Counts the synaptic operations of a simulated run, plus comparator and
/// analog operations in separate columns.
pub fn count_sops(trace: &SpikeTrace, graph: &NetworkGraph) -> Result<SopCount> {
    let shapes = graph.shapes()?;
    let slots = graph.activation_slots();
    if trace.slots != slots || trace.counts.len() != slots.len() {
        return Err(Error::TraceMismatch(format!(
            "trace has slots {:?}, graph has {:?}",
            trace.slots, slots
        )));
    }
    let mut per_slot = Vec::with_capacity(slots.len());
    let mut sops = 0u64;
    for (k, &i) in slots.iter().enumerate() {
        let fan = fanout(graph, i)?;
        if trace.counts[k].len() != fan.len() {
            return Err(Error::TraceMismatch(format!(
                "slot {i} has {} neurons, trace has {}",
                fan.len(),
                trace.counts[k].len()
            )));
        }
        let limit = (trace.frames * trace.timesteps) as u64;
        if trace.counts[k].iter().any(|&c| c > limit) {
            return Err(Error::TraceMismatch(format!(
                "slot {i} has a neuron with more than {limit} spikes"
            )));
        }
        let s: u64 = trace.counts[k].iter().zip(&fan).map(|(c, f)| c * f).sum();
        per_slot.push(SlotSops {
            layer: i,
            spikes: trace.counts[k].iter().sum(),
            sops: s,
        });
        sops += s;
    }

    let varying = graph.time_varying();
    let steps = |i: usize| {
        if varying[i] {
            trace.timesteps as u64
        } else {
            1
        }
    };
    let frames = trace.frames as u64;
    let mut comparator_ops = 0u64;
    let mut analog_macs = 0u64;
    for (i, layer) in graph.layers.iter().enumerate() {
        match layer {
            LayerSpec::PreNeuronMaxPool(p) | LayerSpec::MaxPool(p) => {
                let outputs: usize = shapes[i].iter().product();
                let per = (outputs * p.kernel[0] * p.kernel[1]) as u64;
                comparator_ops += per * steps(i) * frames;
            }
            LayerSpec::Dense(_) | LayerSpec::Conv2d(_) if !spike_fed(graph, i) => {
                analog_macs += macs(layer, &shapes[i]) * steps(i) * frames;
            }
            _ => {}
        }
    }
    Ok(SopCount {
        sops,
        comparator_ops,
        analog_macs,
        per_slot,
    })
}

/// Whether layer `i` reads spikes (an activation output, possibly flattened).
fn spike_fed(graph: &NetworkGraph, i: usize) -> bool {
    let mut j = i;
    while j > 0 {
        match &graph.layers[j - 1] {
            LayerSpec::Flatten => j -= 1,
            LayerSpec::Activation(_) => return graph.activation_mode != ActivationMode::Relu,
            _ => return false,
        }
    }
    false
}

fn macs(layer: &LayerSpec, out_shape: &[usize]) -> u64 {
    match layer {
        LayerSpec::Dense(d) => (d.in_features * d.out_features) as u64,
        LayerSpec::Conv2d(c) => {
            let positions: usize = out_shape[1..].iter().product();
            (c.in_channels * c.kernel[0] * c.kernel[1] * c.out_channels * positions) as u64
        }
        _ => 0,
    }
}

/// Floating-point operations of one ANN inference: two per
/// multiply-accumulate plus one per bias add, over Dense and Conv2d layers.
pub fn count_flops(graph: &NetworkGraph) -> Result<u64> {
    let shapes = graph.shapes()?;
    let mut total = 0u64;
    for (i, layer) in graph.layers.iter().enumerate() {
        let outputs: usize = shapes[i].iter().product();
        let bias = match layer {
            LayerSpec::Dense(d) => d.bias.is_some(),
            LayerSpec::Conv2d(c) => c.bias.is_some(),
            _ => continue,
        };
        total += 2 * macs(layer, &shapes[i]) + if bias { outputs as u64 } else { 0 };
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub sops: u64,
    pub flops: u64,
    pub frames: u64,
    pub snn_energy_joules: f64,
    pub ann_energy_joules: f64,
    pub snn_frames_per_joule: f64,
    pub ann_frames_per_joule: f64,
}

impl EnergyReport {
    pub fn to_csv(&self) -> String {
        format!(
            "sops,flops,frames,snn_energy_joules,ann_energy_joules,snn_frames_per_joule,ann_frames_per_joule\n{},{},{},{:e},{:e},{:e},{:e}\n",
            self.sops,
            self.flops,
            self.frames,
            self.snn_energy_joules,
            self.ann_energy_joules,
            self.snn_frames_per_joule,
            self.ann_frames_per_joule
        )
    }
}

/// Applies 77 fJ per SOP and 12.5 pJ per FLOP; both counts are totals over
/// `frames` inputs.
pub fn energy_report(sops: u64, flops: u64, frames: u64) -> Result<EnergyReport> {
    if frames == 0 {
        return Err(Error::InvalidConfig(
            "energy report needs at least one frame".into(),
        ));
    }
    let snn = sops as f64 * SOP_ENERGY_J;
    let ann = flops as f64 * FLOP_ENERGY_J;
    let per_joule = |e: f64| {
        if e > 0.0 {
            frames as f64 / e
        } else {
            f64::INFINITY
        }
    };
    Ok(EnergyReport {
        sops,
        flops,
        frames,
        snn_energy_joules: snn,
        ann_energy_joules: ann,
        snn_frames_per_joule: per_joule(snn),
        ann_frames_per_joule: per_joule(ann),
    })
}

/// Left-aligned text table with a header rule.
pub fn format_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut s = line(headers.to_vec());
    s += &line(
        widths
            .iter()
            .map(|&w| "-".repeat(w))
            .collect::<Vec<_>>()
            .iter()
            .map(|s| s.as_str())
            .collect(),
    );
    for r in rows {
        s += &line(r.iter().map(|c| c.as_str()).collect());
    }
    s
}
