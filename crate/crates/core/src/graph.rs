//! Layer graph shared by the ReLU, clipped and spiking execution modes.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How every activation slot in a graph behaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationMode {
    Relu,
    /// `min(max(0, x), theta)`
    Clip,
    /// Integrate-and-fire neurons; only meaningful for the simulator.
    If,
}

impl ActivationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ActivationMode::Relu => "relu",
            ActivationMode::Clip => "clip",
            ActivationMode::If => "if",
        }
    }
}

impl fmt::Display for ActivationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out_features, in_features]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    /// `[out_channels, in_channels, kh, kw]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool2d {
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
}

impl Pool2d {
    /// Upper bound on how many windows can contain one input element.
    pub fn max_overlap(&self) -> usize {
        let oy = self.kernel[0].div_ceil(self.stride[0]);
        let ox = self.kernel[1].div_ceil(self.stride[1]);
        oy * ox
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub eps: f32,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
}

impl BatchNorm {
    /// Per-channel `(scale, shift)` so that `bn(x) = scale * x + shift`.
    pub fn affine(&self) -> Vec<(f64, f64)> {
        (0..self.channels)
            .map(|c| {
                let g = self.gamma.data()[c] as f64;
                let b = self.beta.data()[c] as f64;
                let m = self.mean.data()[c] as f64;
                let v = self.var.data()[c] as f64;
                let scale = g / (v + self.eps as f64).sqrt();
                (scale, b - m * scale)
            })
            .collect()
    }
}

/// Adds the output of an earlier layer to the previous layer's output.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualAdd {
    pub source: usize,
    /// Per-channel factor applied to the skip input; `None` means 1.
    pub scale: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActivationSlot {
    /// Empty in ReLU mode; length 1 (layer-wise) or one entry per channel.
    pub theta: Vec<f32>,
}

impl ActivationSlot {
    /// Threshold broadcast to `channels` entries.
    pub fn theta_per_channel(&self, channels: usize) -> Vec<f32> {
        match self.theta.len() {
            1 => vec![self.theta[0]; channels],
            _ => self.theta.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense(Dense),
    Conv2d(Conv2d),
    /// Max pooling applied to real-valued input currents ahead of the neurons.
    PreNeuronMaxPool(Pool2d),
    MaxPool(Pool2d),
    AvgPool(Pool2d),
    BatchNorm(BatchNorm),
    ResidualAdd(ResidualAdd),
    Flatten,
    Activation(ActivationSlot),
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense(_) => "dense",
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::PreNeuronMaxPool(_) => "pre_neuron_max_pool",
            LayerSpec::MaxPool(_) => "max_pool",
            LayerSpec::AvgPool(_) => "avg_pool",
            LayerSpec::BatchNorm(_) => "batch_norm",
            LayerSpec::ResidualAdd(_) => "residual_add",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Activation(_) => "activation",
        }
    }

    pub fn is_activation(&self) -> bool {
        matches!(self, LayerSpec::Activation(_))
    }
}

/// Conversion metadata carried alongside the layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GraphMeta {
    /// Multiply raw outputs by this (per output element) to recover the
    /// outputs the graph had before threshold absorption.
    pub readout_scale: Option<Vec<f32>>,
    pub t0_estimate: Option<f64>,
    pub norm_variant: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub layers: Vec<LayerSpec>,
    pub activation_mode: ActivationMode,
    /// Per-sample input shape, `[C, H, W]` or `[F]`.
    pub input_shape: Vec<usize>,
    pub meta: GraphMeta,
}

impl NetworkGraph {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        Self {
            layers,
            activation_mode: ActivationMode::Relu,
            input_shape,
            meta: GraphMeta::default(),
        }
    }

    /// Indices of the activation layers, in forward order.
    pub fn activation_slots(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_activation())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn slot(&self, layer: usize) -> Option<&ActivationSlot> {
        match self.layers.get(layer) {
            Some(LayerSpec::Activation(a)) => Some(a),
            _ => None,
        }
    }

    pub fn slot_mut(&mut self, layer: usize) -> Option<&mut ActivationSlot> {
        match self.layers.get_mut(layer) {
            Some(LayerSpec::Activation(a)) => Some(a),
            _ => None,
        }
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self
            .shapes()?
            .pop()
            .unwrap_or_else(|| self.input_shape.clone()))
    }

    /// Input shape seen by layer `index`.
    pub fn input_shape_of(&self, shapes: &[Vec<usize>], index: usize) -> Vec<usize> {
        if index == 0 {
            self.input_shape.clone()
        } else {
            shapes[index - 1].clone()
        }
    }

    /// Per-sample output shape of every layer. Validates parameter shapes,
    /// residual sources and threshold lengths along the way.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let out = match layer {
                LayerSpec::Dense(d) => {
                    if cur != [d.in_features] {
                        return Err(Error::ShapeMismatch {
                            layer: i,
                            expected: vec![d.in_features],
                            found: cur,
                        });
                    }
                    check_param(i, "weight", &d.weight, &[d.out_features, d.in_features])?;
                    if let Some(b) = &d.bias {
                        check_param(i, "bias", b, &[d.out_features])?;
                    }
                    vec![d.out_features]
                }
                LayerSpec::Conv2d(c) => {
                    if cur.len() != 3 || cur[0] != c.in_channels {
                        return Err(Error::ShapeMismatch {
                            layer: i,
                            expected: vec![c.in_channels, 0, 0],
                            found: cur,
                        });
                    }
                    check_param(
                        i,
                        "weight",
                        &c.weight,
                        &[c.out_channels, c.in_channels, c.kernel[0], c.kernel[1]],
                    )?;
                    if let Some(b) = &c.bias {
                        check_param(i, "bias", b, &[c.out_channels])?;
                    }
                    if c.stride.contains(&0) {
                        return Err(Error::layer(i, "zero stride"));
                    }
                    let h = conv_out(cur[1], c.kernel[0], c.stride[0], c.padding[0])
                        .ok_or_else(|| Error::layer(i, "kernel larger than padded input"))?;
                    let w = conv_out(cur[2], c.kernel[1], c.stride[1], c.padding[1])
                        .ok_or_else(|| Error::layer(i, "kernel larger than padded input"))?;
                    vec![c.out_channels, h, w]
                }
                LayerSpec::PreNeuronMaxPool(p) | LayerSpec::MaxPool(p) | LayerSpec::AvgPool(p) => {
                    if cur.len() != 3 {
                        return Err(Error::ShapeMismatch {
                            layer: i,
                            expected: vec![0, 0, 0],
                            found: cur,
                        });
                    }
                    if p.stride.contains(&0) || p.kernel.contains(&0) {
                        return Err(Error::layer(i, "zero pool kernel or stride"));
                    }
                    let h = conv_out(cur[1], p.kernel[0], p.stride[0], 0)
                        .ok_or_else(|| Error::layer(i, "pool window larger than input"))?;
                    let w = conv_out(cur[2], p.kernel[1], p.stride[1], 0)
                        .ok_or_else(|| Error::layer(i, "pool window larger than input"))?;
                    vec![cur[0], h, w]
                }
                LayerSpec::BatchNorm(bn) => {
                    if cur.first() != Some(&bn.channels) {
                        return Err(Error::ShapeMismatch {
                            layer: i,
                            expected: vec![bn.channels],
                            found: cur,
                        });
                    }
                    for (name, t) in [
                        ("gamma", &bn.gamma),
                        ("beta", &bn.beta),
                        ("mean", &bn.mean),
                        ("var", &bn.var),
                    ] {
                        check_param(i, name, t, &[bn.channels])?;
                    }
                    cur.clone()
                }
                LayerSpec::ResidualAdd(r) => {
                    if r.source >= i {
                        return Err(Error::layer(
                            i,
                            format!("residual source {} is not an earlier layer", r.source),
                        ));
                    }
                    if shapes[r.source] != cur {
                        return Err(Error::ShapeMismatch {
                            layer: i,
                            expected: cur,
                            found: shapes[r.source].clone(),
                        });
                    }
                    if let Some(s) = &r.scale {
                        if s.len() != cur[0] {
                            return Err(Error::layer(i, "residual scale length != channels"));
                        }
                    }
                    cur.clone()
                }
                LayerSpec::Flatten => vec![cur.iter().product()],
                LayerSpec::Activation(a) => {
                    let channels = cur.first().copied().unwrap_or(1);
                    let ok = match self.activation_mode {
                        ActivationMode::Relu => true,
                        _ => a.theta.len() == 1 || a.theta.len() == channels,
                    };
                    if !ok {
                        return Err(Error::ChannelMismatch {
                            slot: i,
                            expected: channels,
                            found: a.theta.len(),
                        });
                    }
                    cur.clone()
                }
            };
            shapes.push(out.clone());
            cur = out;
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// For every layer, whether its output changes from one timestep to the
    /// next under constant (direct-coded) input.
    pub fn time_varying(&self) -> Vec<bool> {
        let mut varying = vec![false; self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = i > 0 && varying[i - 1];
            varying[i] = match layer {
                LayerSpec::Activation(_) => true,
                LayerSpec::ResidualAdd(r) => prev || varying[r.source],
                _ => prev,
            };
        }
        varying
    }

    /// Layers that read the output of `index` (the next layer plus any
    /// residual joins that name it as their source).
    pub fn consumers(&self, index: usize) -> Vec<usize> {
        let mut out = Vec::new();
        if index + 1 < self.layers.len() {
            out.push(index + 1);
        }
        for (j, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::ResidualAdd(r) = layer {
                if r.source == index && j != index + 1 {
                    out.push(j);
                }
            }
        }
        out
    }

    pub fn max_theta(&self, layer: usize) -> Option<f32> {
        self.slot(layer)
            .and_then(|a| a.theta.iter().copied().reduce(f32::max))
    }
}

fn conv_out(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

fn check_param(layer: usize, name: &str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::layer(
            layer,
            format!("{name} has shape {:?}, expected {:?}", t.shape(), expected),
        ));
    }
    Ok(())
}

/// Number of channels of a per-sample shape (`[C, ..]` or `[F]`).
pub fn channels_of(shape: &[usize]) -> usize {
    shape.first().copied().unwrap_or(1)
}

/// Elements per channel of a per-sample shape.
pub fn inner_of(shape: &[usize]) -> usize {
    shape.iter().skip(1).product()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(i: usize, o: usize) -> LayerSpec {
        LayerSpec::Dense(Dense {
            in_features: i,
            out_features: o,
            weight: Tensor::zeros(vec![o, i]),
            bias: None,
        })
    }

    #[test]
    fn shapes_follow_layers() {
        let g = NetworkGraph::new(
            vec![1, 4, 4],
            vec![
                LayerSpec::Conv2d(Conv2d {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: [3, 3],
                    stride: [1, 1],
                    padding: [1, 1],
                    weight: Tensor::zeros(vec![2, 1, 3, 3]),
                    bias: None,
                }),
                LayerSpec::Activation(ActivationSlot::default()),
                LayerSpec::MaxPool(Pool2d {
                    kernel: [2, 2],
                    stride: [2, 2],
                }),
                LayerSpec::Flatten,
                dense(8, 3),
            ],
        );
        let s = g.shapes().unwrap();
        assert_eq!(s[0], vec![2, 4, 4]);
        assert_eq!(s[2], vec![2, 2, 2]);
        assert_eq!(s[4], vec![3]);
        assert_eq!(g.activation_slots(), vec![1]);
    }

    #[test]
    fn mismatch_names_layer() {
        let g = NetworkGraph::new(vec![4], vec![dense(4, 3), dense(4, 2)]);
        match g.shapes() {
            Err(Error::ShapeMismatch { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn residual_must_point_backwards() {
        let g = NetworkGraph::new(
            vec![3],
            vec![
                dense(3, 3),
                LayerSpec::ResidualAdd(ResidualAdd {
                    source: 1,
                    scale: None,
                }),
            ],
        );
        assert!(g.validate().is_err());
    }

    #[test]
    fn time_varying_starts_at_first_activation() {
        let g = NetworkGraph::new(
            vec![3],
            vec![
                dense(3, 3),
                LayerSpec::Activation(ActivationSlot::default()),
                dense(3, 3),
            ],
        );
        assert_eq!(g.time_varying(), vec![false, true, true]);
    }
}
