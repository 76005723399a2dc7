//! Local threshold balancing: clip substitution, forward-only threshold
//! updates and absorption of the learned thresholds into the weights.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::forward::forward_ann;
use crate::graph::{channels_of, inner_of, ActivationMode, LayerSpec, NetworkGraph};
use crate::io::Dataset;
use crate::tensor::Tensor;

pub const DEFAULT_ETA: f64 = 0.2;
pub const DEFAULT_ITERATIONS: usize = 1000;
pub const DEFAULT_BATCH_SIZE: usize = 100;
pub const DEFAULT_THETA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// One threshold per activation slot.
    LayerWise,
    /// One threshold per channel (conv) or per feature (dense).
    ChannelWise,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::LayerWise => "layer",
            Granularity::ChannelWise => "channel",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceConfig {
    pub eta: f64,
    pub iterations: usize,
    pub granularity: Granularity,
    pub batch_size: usize,
    /// Seeds the batch order in [`balance_dataset`].
    pub seed: u64,
    /// Divide each update by the number of summed elements, so one learning
    /// rate suits layers of any width and any batch size.
    pub normalize_by_count: bool,
    pub theta_floor: f64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            eta: DEFAULT_ETA,
            iterations: DEFAULT_ITERATIONS,
            granularity: Granularity::ChannelWise,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            normalize_by_count: true,
            theta_floor: DEFAULT_THETA_FLOOR,
        }
    }
}

impl BalanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "eta must be > 0, got {}",
                self.eta
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.theta_floor.is_nan() || self.theta_floor <= 0.0 {
            return Err(Error::InvalidConfig("theta floor must be > 0".into()));
        }
        Ok(())
    }
}

/// Thresholds under optimization. Kept in f64; the graph sees f32 copies.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdState {
    /// Layer index of each activation slot.
    pub slots: Vec<usize>,
    pub theta: Vec<Vec<f64>>,
    /// Largest |Δθ| applied to each slot in the latest iteration.
    pub last_delta: Vec<f64>,
    pub iteration: usize,
}

impl ThresholdState {
    /// Reads the graph thresholds, broadcast to the requested granularity.
    pub fn from_graph(graph: &NetworkGraph, granularity: Granularity) -> Result<Self> {
        let shapes = graph.shapes()?;
        let slots = graph.activation_slots();
        let mut theta = Vec::with_capacity(slots.len());
        for &i in &slots {
            let slot = graph.slot(i).expect("activation slot");
            let channels = channels_of(&shapes[i]);
            let t: Vec<f64> = match granularity {
                Granularity::LayerWise => {
                    let max = slot.theta.iter().copied().fold(0.0f32, f32::max);
                    vec![max as f64]
                }
                Granularity::ChannelWise => slot
                    .theta_per_channel(channels)
                    .into_iter()
                    .map(f64::from)
                    .collect(),
            };
            theta.push(t);
        }
        Ok(Self {
            last_delta: vec![0.0; slots.len()],
            slots,
            theta,
            iteration: 0,
        })
    }

    pub fn write_to(&self, graph: &mut NetworkGraph) {
        for (k, &i) in self.slots.iter().enumerate() {
            let slot = graph.slot_mut(i).expect("activation slot");
            slot.theta = self.theta[k].iter().map(|&t| t as f32).collect();
        }
    }

    /// Raises every threshold to at least `floor`.
    pub fn finalize(&mut self, floor: f64) {
        for t in self.theta.iter_mut().flatten() {
            if *t < floor {
                *t = floor;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub iteration: usize,
    /// Layer index of the slot.
    pub slot: usize,
    pub theta_mean: f64,
    pub max_abs_delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceReport {
    pub rows: Vec<ConvergenceRow>,
    /// Final max |Δθ| per slot, in slot order.
    pub final_delta: Vec<f64>,
    pub iterations: usize,
}

impl BalanceReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,slot,theta_mean,max_abs_delta\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e}",
                r.iteration, r.slot, r.theta_mean, r.max_abs_delta
            );
        }
        s
    }
}

/// Replaces every activation with the clip function, thresholds at 0.
pub fn clipify(graph: &NetworkGraph) -> Result<NetworkGraph> {
    if graph.activation_mode != ActivationMode::Relu {
        return Err(Error::WrongMode {
            expected: "relu".into(),
            found: graph.activation_mode.to_string(),
        });
    }
    if let Some(i) = graph
        .layers
        .iter()
        .position(|l| matches!(l, LayerSpec::MaxPool(_)))
    {
        return Err(Error::UnsupportedPlacement {
            layer: i,
            reason: "max pooling must be rewritten to pre-neuron pooling first".into(),
        });
    }
    let mut out = graph.clone();
    out.activation_mode = ActivationMode::Clip;
    for i in out.activation_slots() {
        out.slot_mut(i).expect("activation slot").theta = vec![0.0];
    }
    out.validate()?;
    Ok(out)
}

/// `-Σ 2(ẑ - θ)·H(ẑ - θ)` with `H(0) = 0`, summed in slice order.
pub fn delta_theta(zhat: &[f32], theta: f64) -> f64 {
    let mut acc = 0.0f64;
    for &z in zhat {
        let d = z as f64 - theta;
        if d > 0.0 {
            acc += 2.0 * d;
        }
    }
    -acc
}

/// Per-channel [`delta_theta`] over a `[batch, channels, ..]` tensor; every
/// batch and spatial position of channel `c` contributes to entry `c`.
pub fn delta_theta_channelwise(zhat: &Tensor, theta: &[f64]) -> Result<Vec<f64>> {
    let shape = zhat.sample_shape();
    let channels = channels_of(shape);
    if theta.len() != channels {
        return Err(Error::ChannelMismatch {
            slot: 0,
            expected: channels,
            found: theta.len(),
        });
    }
    let inner = inner_of(shape);
    // same element order as the flat sum, so one channel reproduces it bitwise
    let mut acc = vec![0.0f64; channels];
    for b in 0..zhat.batch() {
        let sample = zhat.sample(b);
        for (c, a) in acc.iter_mut().enumerate() {
            for &z in &sample[c * inner..(c + 1) * inner] {
                let d = z as f64 - theta[c];
                if d > 0.0 {
                    *a += 2.0 * d;
                }
            }
        }
    }
    Ok(acc.into_iter().map(|a| -a).collect())
}

/// Runs `config.iterations` balancing steps over `data`. When the data runs
/// out before that, the batches seen so far are reused in order.
pub fn balance<I>(
    graph: &NetworkGraph,
    data: I,
    config: &BalanceConfig,
) -> Result<(NetworkGraph, BalanceReport)>
where
    I: IntoIterator<Item = Tensor>,
{
    let mut source = data.into_iter();
    let mut cache: Vec<Tensor> = Vec::new();
    let mut exhausted = false;
    balance_with(graph, config, |k| {
        if !exhausted {
            match source.next() {
                Some(t) => {
                    cache.push(t.clone());
                    return Ok(t);
                }
                None => exhausted = true,
            }
        }
        if cache.is_empty() {
            return Err(Error::EmptyData);
        }
        Ok(cache[k % cache.len()].clone())
    })
}

/// [`balance`] over shuffled batches of a dataset; the order is reseeded
/// from `config.seed` and reshuffled every epoch.
pub fn balance_dataset(
    graph: &NetworkGraph,
    data: &Dataset,
    config: &BalanceConfig,
) -> Result<(NetworkGraph, BalanceReport)> {
    config.validate()?;
    let mut batches = data.cycle_batches(config.batch_size, config.seed)?;
    balance_with(graph, config, |_| {
        batches.next().map(|b| b.data).ok_or(Error::EmptyData)
    })
}

fn balance_with<F>(
    graph: &NetworkGraph,
    config: &BalanceConfig,
    mut next_batch: F,
) -> Result<(NetworkGraph, BalanceReport)>
where
    F: FnMut(usize) -> Result<Tensor>,
{
    config.validate()?;
    if graph.activation_mode != ActivationMode::Clip {
        return Err(Error::WrongMode {
            expected: "clip".into(),
            found: graph.activation_mode.to_string(),
        });
    }
    let mut state = ThresholdState::from_graph(graph, config.granularity)?;
    let mut g = graph.clone();
    let mut rows = Vec::with_capacity(config.iterations * state.slots.len());
    for it in 0..config.iterations {
        let batch = next_batch(it)?;
        state.write_to(&mut g);
        // every slot sees the thresholds from before this iteration's updates
        let rec = forward_ann(&g, &batch)?;
        for (k, &layer) in state.slots.iter().enumerate() {
            let zhat = rec.input_of(layer);
            let theta = &mut state.theta[k];
            let (delta, count) = match config.granularity {
                Granularity::LayerWise => (vec![delta_theta(zhat.data(), theta[0])], zhat.len()),
                Granularity::ChannelWise => (
                    delta_theta_channelwise(zhat, theta).map_err(|e| match e {
                        Error::ChannelMismatch {
                            expected, found, ..
                        } => Error::ChannelMismatch {
                            slot: layer,
                            expected,
                            found,
                        },
                        e => e,
                    })?,
                    zhat.batch() * inner_of(zhat.sample_shape()),
                ),
            };
            let norm = if config.normalize_by_count {
                count.max(1) as f64
            } else {
                1.0
            };
            let mut max_abs = 0.0f64;
            for (t, d) in theta.iter_mut().zip(&delta) {
                let d = d / norm;
                max_abs = max_abs.max(d.abs());
                *t = (*t - config.eta * d).max(0.0);
            }
            state.last_delta[k] = max_abs;
            rows.push(ConvergenceRow {
                iteration: it + 1,
                slot: layer,
                theta_mean: theta.iter().sum::<f64>() / theta.len() as f64,
                max_abs_delta: max_abs,
            });
        }
        state.iteration = it + 1;
    }
    state.finalize(config.theta_floor);
    state.write_to(&mut g);
    g.validate()?;
    let report = BalanceReport {
        rows,
        final_delta: state.last_delta.clone(),
        iterations: state.iteration,
    };
    Ok((g, report))
}

/// Rescales weights so every threshold becomes 1 without changing what the
/// network computes. Each linear layer's output channel `c` is divided by
/// the threshold of the activation it feeds (through pooling and residual
/// joins); consumers compensate on their input side. Whatever scale is left
/// on the final output is stored as the readout scale.
pub fn absorb_thresholds(graph: &NetworkGraph, theta_floor: f64) -> Result<NetworkGraph> {
    if graph.activation_mode == ActivationMode::Relu {
        return Err(Error::WrongMode {
            expected: "clip or if".into(),
            found: graph.activation_mode.to_string(),
        });
    }
    let shapes = graph.shapes()?;
    for i in graph.activation_slots() {
        let slot = graph.slot(i).expect("activation slot");
        for (c, &t) in slot.theta.iter().enumerate() {
            if t.is_nan() || t < theta_floor as f32 {
                return Err(Error::ThresholdTooSmall {
                    slot: i,
                    channel: c,
                    value: t,
                    floor: theta_floor as f32,
                });
            }
        }
    }
    let mut out = graph.clone();
    // scales[i][c]: original output of layer i, channel c, divided by the new one
    let mut scales: Vec<Vec<f64>> = Vec::with_capacity(graph.layers.len());
    for i in 0..graph.layers.len() {
        let in_shape = graph.input_shape_of(&shapes, i);
        let s_in = if i == 0 {
            vec![1.0; channels_of(&in_shape)]
        } else {
            scales[i - 1].clone()
        };
        let s_out = match &mut out.layers[i] {
            LayerSpec::Dense(d) => {
                let target = target_scale(graph, &shapes, i, theta_floor as f32);
                rescale(&mut d.weight, &mut d.bias, &s_in, &target, 1);
                target
            }
            LayerSpec::Conv2d(c) => {
                let target = target_scale(graph, &shapes, i, theta_floor as f32);
                let per_in = c.kernel[0] * c.kernel[1];
                rescale(&mut c.weight, &mut c.bias, &s_in, &target, per_in);
                target
            }
            LayerSpec::PreNeuronMaxPool(_) | LayerSpec::MaxPool(_) | LayerSpec::AvgPool(_) => s_in,
            LayerSpec::BatchNorm(_) => {
                return Err(Error::UnsupportedPlacement {
                    layer: i,
                    reason: "fold batch norm before absorbing thresholds".into(),
                })
            }
            LayerSpec::ResidualAdd(r) => {
                let s_src = &scales[r.source];
                let k: Vec<f64> = (0..s_in.len())
                    .map(|c| {
                        let k = r.scale.as_ref().map_or(1.0, |s| s[c] as f64);
                        k * s_src[c] / s_in[c]
                    })
                    .collect();
                r.scale = if k.iter().all(|&v| v == 1.0) {
                    None
                } else {
                    Some(k.iter().map(|&v| v as f32).collect())
                };
                s_in
            }
            LayerSpec::Flatten => {
                let inner = inner_of(&in_shape).max(1);
                s_in.iter()
                    .flat_map(|&s| std::iter::repeat_n(s, inner))
                    .collect()
            }
            LayerSpec::Activation(a) => {
                let channels = channels_of(&shapes[i]);
                let new: Vec<f64> = a
                    .theta_per_channel(channels)
                    .iter()
                    .zip(&s_in)
                    .map(|(&t, &s)| t as f64 / s)
                    .collect();
                a.theta = if a.theta.len() == 1 && new.iter().all(|&v| v == new[0]) {
                    vec![new[0] as f32]
                } else {
                    new.iter().map(|&v| v as f32).collect()
                };
                s_in
            }
        };
        scales.push(s_out);
    }
    let last = scales
        .pop()
        .unwrap_or_else(|| vec![1.0; channels_of(&graph.input_shape)]);
    let out_len: usize = graph.output_shape()?.iter().product();
    let inner = out_len / last.len().max(1);
    let mut readout: Vec<f64> = last
        .iter()
        .flat_map(|&s| std::iter::repeat_n(s, inner))
        .collect();
    if let Some(prev) = &graph.meta.readout_scale {
        for (r, &p) in readout.iter_mut().zip(prev) {
            *r *= p as f64;
        }
    }
    out.meta.readout_scale = if readout.iter().all(|&v| v == 1.0) {
        None
    } else {
        Some(readout.iter().map(|&v| v as f32).collect())
    };
    out.validate()?;
    Ok(out)
}

/// Per-channel threshold of the activation that linear layer `i` feeds, or
/// ones when its output reaches no activation through scale-preserving layers.
/// Channels still at the floor never fired during balancing and keep scale 1
/// rather than having their weights blown up by `1 / floor`.
fn target_scale(graph: &NetworkGraph, shapes: &[Vec<usize>], i: usize, floor: f32) -> Vec<f64> {
    let channels = channels_of(&shapes[i]);
    for j in i + 1..graph.layers.len() {
        match &graph.layers[j] {
            LayerSpec::PreNeuronMaxPool(_)
            | LayerSpec::MaxPool(_)
            | LayerSpec::AvgPool(_)
            | LayerSpec::ResidualAdd(_) => continue,
            LayerSpec::Activation(a) => {
                return a
                    .theta_per_channel(channels)
                    .into_iter()
                    .map(|t| if t <= floor { 1.0 } else { f64::from(t) })
                    .collect()
            }
            _ => break,
        }
    }
    vec![1.0; channels]
}

/// `W[o, i, ..] *= s_in[i] / d[o]`, `b[o] /= d[o]`, computed in f64.
fn rescale(weight: &mut Tensor, bias: &mut Option<Tensor>, s_in: &[f64], d: &[f64], per_in: usize) {
    let fan_in = s_in.len() * per_in;
    for (k, w) in weight.data_mut().iter_mut().enumerate() {
        let (o, i) = (k / fan_in, (k % fan_in) / per_in);
        let f = s_in[i] / d[o];
        if f != 1.0 {
            *w = (*w as f64 * f) as f32;
        }
    }
    if let Some(b) = bias {
        for (o, v) in b.data_mut().iter_mut().enumerate() {
            if d[o] != 1.0 {
                *v = (*v as f64 / d[o]) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{forward_with_mode, predict};
    use crate::graph::{ActivationSlot, Conv2d, Dense, Pool2d, ResidualAdd};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense(w: Vec<f32>, i: usize, o: usize) -> LayerSpec {
        LayerSpec::Dense(Dense {
            in_features: i,
            out_features: o,
            weight: Tensor::new(vec![o, i], w).unwrap(),
            bias: None,
        })
    }

    fn act() -> LayerSpec {
        LayerSpec::Activation(ActivationSlot::default())
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape,
            (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn delta_theta_examples() {
        assert_eq!(delta_theta(&[0.5, 1.5, 2.0], 1.0), -3.0);
        assert_eq!(delta_theta(&[0.2, 0.9], 1.0), 0.0);
        assert_eq!(delta_theta(&[1.0], 1.0), 0.0);
    }

    #[test]
    fn channelwise_examples() {
        let z = Tensor::new(vec![1, 2], vec![2.0, 0.5]).unwrap();
        assert_eq!(
            delta_theta_channelwise(&z, &[1.0, 1.0]).unwrap(),
            vec![-2.0, 0.0]
        );
        let low = Tensor::new(vec![1, 2], vec![0.1, 0.5]).unwrap();
        assert_eq!(
            delta_theta_channelwise(&low, &[1.0, 1.0]).unwrap(),
            vec![0.0, 0.0]
        );
        assert!(matches!(
            delta_theta_channelwise(&z, &[1.0]),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn clipify_sets_zero_thresholds() {
        let g = NetworkGraph::new(
            vec![1],
            vec![
                dense(vec![1.0], 1, 1),
                act(),
                dense(vec![1.0], 1, 1),
                act(),
                dense(vec![1.0], 1, 1),
                act(),
            ],
        );
        let c = clipify(&g).unwrap();
        assert_eq!(c.activation_mode, ActivationMode::Clip);
        for i in c.activation_slots() {
            assert_eq!(c.slot(i).unwrap().theta, vec![0.0]);
        }
        let rec = forward_ann(&c, &Tensor::new(vec![1, 1], vec![5.0]).unwrap()).unwrap();
        assert_eq!(rec.output().data(), &[0.0]);
        assert!(clipify(&c).is_err());
        let empty = clipify(&NetworkGraph::new(vec![3], vec![])).unwrap();
        assert_eq!(empty.layers.len(), 0);
    }

    fn identity_slot() -> NetworkGraph {
        clipify(&NetworkGraph::new(
            vec![1],
            vec![dense(vec![1.0], 1, 1), act()],
        ))
        .unwrap()
    }

    #[test]
    fn scalar_iteration_matches_closed_form() {
        let g = identity_slot();
        let cfg = BalanceConfig {
            eta: 0.25,
            iterations: 1,
            ..Default::default()
        };
        let data = vec![Tensor::new(vec![1, 1], vec![2.0]).unwrap()];
        let (one, _) = balance(&g, data.clone(), &cfg).unwrap();
        assert_eq!(one.slot(1).unwrap().theta, vec![1.0]);
        // θ ← θ + 0.25·2·(2 − θ) halves the gap every step
        let (many, report) = balance(
            &g,
            data,
            &BalanceConfig {
                iterations: 60,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(many.slot(1).unwrap().theta, vec![2.0]);
        assert_eq!(report.final_delta, vec![0.0]);
        assert_eq!(report.rows.len(), 60);
    }

    #[test]
    fn negative_data_leaves_floor() {
        let g = identity_slot();
        let cfg = BalanceConfig {
            iterations: 1,
            ..Default::default()
        };
        let data = vec![Tensor::new(vec![2, 1], vec![-1.0, -0.5]).unwrap()];
        let (out, _) = balance(&g, data, &cfg).unwrap();
        assert_eq!(out.slot(1).unwrap().theta, vec![1e-6f64 as f32]);
        assert!(balance(&g, data_none(), &cfg).is_err());
        let zero_k = BalanceConfig {
            iterations: 0,
            ..Default::default()
        };
        assert!(balance(&g, vec![Tensor::zeros(vec![1, 1])], &zero_k).is_err());
    }

    fn data_none() -> Vec<Tensor> {
        Vec::new()
    }

    #[test]
    fn wrong_mode_is_rejected() {
        let g = NetworkGraph::new(vec![1], vec![dense(vec![1.0], 1, 1), act()]);
        let data = vec![Tensor::zeros(vec![1, 1])];
        assert!(matches!(
            balance(&g, data, &BalanceConfig::default()),
            Err(Error::WrongMode { .. })
        ));
    }

    #[test]
    fn single_channel_granularities_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = LayerSpec::Conv2d(Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: [3, 3],
            stride: [1, 1],
            padding: [1, 1],
            weight: rand_tensor(&mut rng, vec![1, 1, 3, 3], 1.0),
            bias: None,
        });
        let g = clipify(&NetworkGraph::new(vec![1, 5, 5], vec![conv, act()])).unwrap();
        let data: Vec<Tensor> = (0..4)
            .map(|_| rand_tensor(&mut rng, vec![3, 1, 5, 5], 2.0))
            .collect();
        let base = BalanceConfig {
            iterations: 20,
            ..Default::default()
        };
        let (a, ra) = balance(&g, data.clone(), &base).unwrap();
        let layer = BalanceConfig {
            granularity: Granularity::LayerWise,
            ..base
        };
        let (b, rb) = balance(&g, data, &layer).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn balancing_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = clipify(&NetworkGraph::new(
            vec![4],
            vec![
                LayerSpec::Dense(Dense {
                    in_features: 4,
                    out_features: 3,
                    weight: rand_tensor(&mut rng, vec![3, 4], 1.0),
                    bias: None,
                }),
                act(),
            ],
        ))
        .unwrap();
        let samples = rand_tensor(&mut rng, vec![20, 4], 1.0);
        let ds = Dataset::new(samples, None).unwrap();
        let cfg = BalanceConfig {
            iterations: 30,
            batch_size: 7,
            seed: 11,
            ..Default::default()
        };
        let (a, _) = balance_dataset(&g, &ds, &cfg).unwrap();
        let (b, _) = balance_dataset(&g, &ds, &cfg).unwrap();
        let bits = |g: &NetworkGraph| -> Vec<u32> {
            g.slot(1)
                .unwrap()
                .theta
                .iter()
                .map(|t| t.to_bits())
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.slot(1).unwrap().theta.len(), 3);
    }

    #[test]
    fn thresholds_grow_front_to_back() {
        // with all thresholds at 0 the second slot only sees zeros at first
        let g = clipify(&NetworkGraph::new(
            vec![1],
            vec![dense(vec![1.0], 1, 1), act(), dense(vec![1.0], 1, 1), act()],
        ))
        .unwrap();
        let data = vec![Tensor::new(vec![1, 1], vec![1.0]).unwrap()];
        let cfg = BalanceConfig {
            eta: 0.25,
            iterations: 1,
            ..Default::default()
        };
        let (g1, _) = balance(&g, data, &cfg).unwrap();
        assert_eq!(g1.slot(1).unwrap().theta, vec![0.5]);
        assert_eq!(g1.slot(3).unwrap().theta, vec![1e-6f64 as f32]);
    }

    #[test]
    fn scalar_absorption() {
        let mut g = NetworkGraph::new(vec![1], vec![dense(vec![4.0], 1, 1), act()]);
        g.activation_mode = ActivationMode::Clip;
        g.slot_mut(1).unwrap().theta = vec![2.0];
        let a = absorb_thresholds(&g, 1e-6).unwrap();
        match &a.layers[0] {
            LayerSpec::Dense(d) => assert_eq!(d.weight.data(), &[2.0]),
            _ => unreachable!(),
        }
        assert_eq!(a.slot(1).unwrap().theta, vec![1.0]);
        assert_eq!(a.meta.readout_scale, Some(vec![2.0]));
    }

    #[test]
    fn unit_thresholds_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = NetworkGraph::new(
            vec![3],
            vec![
                LayerSpec::Dense(Dense {
                    in_features: 3,
                    out_features: 2,
                    weight: rand_tensor(&mut rng, vec![2, 3], 1.0),
                    bias: Some(rand_tensor(&mut rng, vec![2], 1.0)),
                }),
                act(),
                LayerSpec::Dense(Dense {
                    in_features: 2,
                    out_features: 2,
                    weight: rand_tensor(&mut rng, vec![2, 2], 1.0),
                    bias: None,
                }),
            ],
        );
        g.activation_mode = ActivationMode::If;
        g.slot_mut(1).unwrap().theta = vec![1.0];
        assert_eq!(absorb_thresholds(&g, 1e-6).unwrap(), g);
    }

    #[test]
    fn absorption_rejects_tiny_thresholds() {
        let mut g = NetworkGraph::new(vec![1], vec![dense(vec![1.0], 1, 1), act()]);
        g.activation_mode = ActivationMode::Clip;
        g.slot_mut(1).unwrap().theta = vec![0.0];
        assert!(matches!(
            absorb_thresholds(&g, 1e-6),
            Err(Error::ThresholdTooSmall { .. })
        ));
    }

    #[test]
    fn floor_channels_keep_their_scale() {
        let mut g = NetworkGraph::new(
            vec![2],
            vec![
                dense(vec![1.0, 0.0, 0.0, 1.0], 2, 2),
                act(),
                dense(vec![3.0, 5.0], 2, 1),
            ],
        );
        g.activation_mode = ActivationMode::Clip;
        g.slot_mut(1).unwrap().theta = vec![2.0, 1e-6];
        let a = absorb_thresholds(&g, 1e-6).unwrap();
        assert_eq!(a.slot(1).unwrap().theta, vec![1.0, 1e-6]);
        let LayerSpec::Dense(d) = &a.layers[0] else {
            unreachable!()
        };
        assert_eq!(d.weight.data(), &[0.5, 0.0, 0.0, 1.0]);
        let x = Tensor::new(vec![1, 2], vec![1.5, 0.4]).unwrap();
        assert_eq!(predict(&a, &x).unwrap(), predict(&g, &x).unwrap());
    }

    /// conv → pool → act → conv → residual(act) → act → flatten → dense
    fn residual_net(rng: &mut ChaCha8Rng) -> NetworkGraph {
        let conv = |rng: &mut ChaCha8Rng, i, o| {
            LayerSpec::Conv2d(Conv2d {
                in_channels: i,
                out_channels: o,
                kernel: [3, 3],
                stride: [1, 1],
                padding: [1, 1],
                weight: rand_tensor(rng, vec![o, i, 3, 3], 0.6),
                bias: Some(rand_tensor(rng, vec![o], 0.3)),
            })
        };
        let mut g = NetworkGraph::new(
            vec![2, 6, 6],
            vec![
                conv(rng, 2, 3),
                LayerSpec::PreNeuronMaxPool(Pool2d {
                    kernel: [2, 2],
                    stride: [2, 2],
                }),
                act(),
                conv(rng, 3, 3),
                LayerSpec::ResidualAdd(ResidualAdd {
                    source: 2,
                    scale: None,
                }),
                act(),
                LayerSpec::Flatten,
                LayerSpec::Dense(Dense {
                    in_features: 27,
                    out_features: 4,
                    weight: rand_tensor(rng, vec![4, 27], 0.5),
                    bias: Some(rand_tensor(rng, vec![4], 0.2)),
                }),
                act(),
            ],
        );
        g.activation_mode = ActivationMode::Clip;
        for (i, n) in [(2, 3), (5, 3), (8, 4)] {
            g.slot_mut(i).unwrap().theta = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();
        }
        g
    }

    #[test]
    fn absorption_preserves_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = residual_net(&mut rng);
        let a = absorb_thresholds(&g, 1e-6).unwrap();
        for i in a.activation_slots() {
            assert!(a.slot(i).unwrap().theta.iter().all(|&t| t == 1.0));
        }
        let x = rand_tensor(&mut rng, vec![100, 2, 6, 6], 2.0);
        let before = forward_ann(&g, &x).unwrap();
        let after = predict(&a, &x).unwrap();
        assert!(before.output().max_abs_diff(&after) <= 1e-5);
        // ReLU view of the absorbed graph is the scaled ReLU parent
        let relu_a = forward_with_mode(&a, &x, ActivationMode::Relu).unwrap();
        let relu_g = forward_with_mode(&g, &x, ActivationMode::Relu).unwrap();
        let mut scaled = relu_a.output().clone();
        crate::forward::apply_readout_scale(&a, &mut scaled);
        assert!(relu_g.output().max_abs_diff(&scaled) <= 1e-4);
    }

    proptest! {
        #[test]
        fn delta_is_never_positive(z in proptest::collection::vec(-5.0f32..5.0, 0..40), theta in 0.0f64..4.0) {
            let d = delta_theta(&z, theta);
            prop_assert!(d <= 0.0);
            let exceeds = z.iter().any(|&v| v as f64 > theta);
            prop_assert_eq!(d == 0.0, !exceeds);
        }

        #[test]
        fn matches_finite_difference(z in proptest::collection::vec(-3.0f32..3.0, 1..20), theta in 0.1f64..2.5) {
            // objective Σ (C(z;θ) − R(z))², differentiated centrally away from kinks
            prop_assume!(z.iter().all(|&v| (v as f64 - theta).abs() > 1e-3));
            let f = |t: f64| -> f64 {
                z.iter().map(|&v| {
                    let v = v as f64;
                    (v.max(0.0).min(t) - v.max(0.0)).powi(2)
                }).sum()
            };
            let h = 1e-5;
            let fd = (f(theta + h) - f(theta - h)) / (2.0 * h);
            let analytic = delta_theta(&z, theta);
            let scale = fd.abs().max(1.0);
            prop_assert!((analytic - fd).abs() <= 1e-4 * scale, "{} vs {}", analytic, fd);
        }

        #[test]
        fn theta_never_decreases(vals in proptest::collection::vec(-2.0f32..4.0, 1..16), eta in 0.01f64..0.5) {
            let g = identity_slot();
            let data: Vec<Tensor> = vals.iter().map(|&v| Tensor::new(vec![1, 1], vec![v]).unwrap()).collect();
            let cfg = BalanceConfig { eta, iterations: vals.len(), ..Default::default() };
            let (_, report) = balance(&g, data, &cfg).unwrap();
            for w in report.rows.windows(2) {
                prop_assert!(w[1].theta_mean >= w[0].theta_mean);
            }
        }
    }
}
