//! JSON model manifest: ordered layer descriptors that reference blob
//! entries by name, plus thresholds and conversion metadata inline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    ActivationMode, ActivationSlot, BatchNorm, Conv2d, Dense, GraphMeta, LayerSpec, NetworkGraph,
    Pool2d, ResidualAdd,
};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeDesc {
    Relu,
    Clip,
    If,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDesc {
    Dense {
        in_features: usize,
        out_features: usize,
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    PreNeuronMaxPool {
        kernel: [usize; 2],
        stride: [usize; 2],
    },
    MaxPool {
        kernel: [usize; 2],
        stride: [usize; 2],
    },
    AvgPool {
        kernel: [usize; 2],
        stride: [usize; 2],
    },
    BatchNorm {
        channels: usize,
        eps: f32,
        gamma: String,
        beta: String,
        mean: String,
        var: String,
    },
    ResidualAdd {
        source: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale: Option<Vec<f32>>,
    },
    Flatten,
    Activation {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        theta: Option<Vec<f32>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub input_shape: Vec<usize>,
    pub activation_mode: ModeDesc,
    pub layers: Vec<LayerDesc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub readout_scale: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t0_estimate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_variant: Option<String>,
}

impl Manifest {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Splits a graph into its manifest and the named blob entries.
pub fn to_manifest(graph: &NetworkGraph) -> (Manifest, Vec<(String, Tensor)>) {
    let mut entries = Vec::new();
    let mut put = |name: String, t: &Tensor| {
        entries.push((name.clone(), t.clone()));
        name
    };
    let layers = graph
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| match layer {
            LayerSpec::Dense(d) => LayerDesc::Dense {
                in_features: d.in_features,
                out_features: d.out_features,
                weight: put(format!("layers.{i}.weight"), &d.weight),
                bias: d.bias.as_ref().map(|b| put(format!("layers.{i}.bias"), b)),
            },
            LayerSpec::Conv2d(c) => LayerDesc::Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
                weight: put(format!("layers.{i}.weight"), &c.weight),
                bias: c.bias.as_ref().map(|b| put(format!("layers.{i}.bias"), b)),
            },
            LayerSpec::PreNeuronMaxPool(p) => LayerDesc::PreNeuronMaxPool {
                kernel: p.kernel,
                stride: p.stride,
            },
            LayerSpec::MaxPool(p) => LayerDesc::MaxPool {
                kernel: p.kernel,
                stride: p.stride,
            },
            LayerSpec::AvgPool(p) => LayerDesc::AvgPool {
                kernel: p.kernel,
                stride: p.stride,
            },
            LayerSpec::BatchNorm(bn) => LayerDesc::BatchNorm {
                channels: bn.channels,
                eps: bn.eps,
                gamma: put(format!("layers.{i}.gamma"), &bn.gamma),
                beta: put(format!("layers.{i}.beta"), &bn.beta),
                mean: put(format!("layers.{i}.mean"), &bn.mean),
                var: put(format!("layers.{i}.var"), &bn.var),
            },
            LayerSpec::ResidualAdd(r) => LayerDesc::ResidualAdd {
                source: r.source,
                scale: r.scale.clone(),
            },
            LayerSpec::Flatten => LayerDesc::Flatten,
            LayerSpec::Activation(a) => LayerDesc::Activation {
                theta: (!a.theta.is_empty()).then(|| a.theta.clone()),
            },
        })
        .collect();
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        input_shape: graph.input_shape.clone(),
        activation_mode: match graph.activation_mode {
            ActivationMode::Relu => ModeDesc::Relu,
            ActivationMode::Clip => ModeDesc::Clip,
            ActivationMode::If => ModeDesc::If,
        },
        layers,
        readout_scale: graph.meta.readout_scale.clone(),
        t0_estimate: graph.meta.t0_estimate,
        norm_variant: graph.meta.norm_variant.clone(),
    };
    (manifest, entries)
}

/// Resolves manifest weight references against blob entries and builds the
/// graph. Fails on the first dangling reference or inconsistent shape.
pub fn from_manifest(manifest: &Manifest, entries: Vec<(String, Tensor)>) -> Result<NetworkGraph> {
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::UnsupportedVersion(manifest.format_version));
    }
    let mut blobs: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in entries {
        if blobs.insert(name.clone(), t).is_some() {
            return Err(Error::DuplicateEntry(name));
        }
    }
    let get = |name: &str| -> Result<Tensor> {
        blobs
            .get(name)
            .cloned()
            .ok_or_else(|| Error::DanglingReference(name.to_string()))
    };
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for desc in &manifest.layers {
        let layer = match desc {
            LayerDesc::Dense {
                in_features,
                out_features,
                weight,
                bias,
            } => LayerSpec::Dense(Dense {
                in_features: *in_features,
                out_features: *out_features,
                weight: get(weight)?,
                bias: bias.as_deref().map(get).transpose()?,
            }),
            LayerDesc::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weight,
                bias,
            } => LayerSpec::Conv2d(Conv2d {
                in_channels: *in_channels,
                out_channels: *out_channels,
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
                weight: get(weight)?,
                bias: bias.as_deref().map(get).transpose()?,
            }),
            LayerDesc::PreNeuronMaxPool { kernel, stride } => LayerSpec::PreNeuronMaxPool(Pool2d {
                kernel: *kernel,
                stride: *stride,
            }),
            LayerDesc::MaxPool { kernel, stride } => LayerSpec::MaxPool(Pool2d {
                kernel: *kernel,
                stride: *stride,
            }),
            LayerDesc::AvgPool { kernel, stride } => LayerSpec::AvgPool(Pool2d {
                kernel: *kernel,
                stride: *stride,
            }),
            LayerDesc::BatchNorm {
                channels,
                eps,
                gamma,
                beta,
                mean,
                var,
            } => LayerSpec::BatchNorm(BatchNorm {
                channels: *channels,
                eps: *eps,
                gamma: get(gamma)?,
                beta: get(beta)?,
                mean: get(mean)?,
                var: get(var)?,
            }),
            LayerDesc::ResidualAdd { source, scale } => LayerSpec::ResidualAdd(ResidualAdd {
                source: *source,
                scale: scale.clone(),
            }),
            LayerDesc::Flatten => LayerSpec::Flatten,
            LayerDesc::Activation { theta } => LayerSpec::Activation(ActivationSlot {
                theta: theta.clone().unwrap_or_default(),
            }),
        };
        layers.push(layer);
    }
    let graph = NetworkGraph {
        layers,
        activation_mode: match manifest.activation_mode {
            ModeDesc::Relu => ActivationMode::Relu,
            ModeDesc::Clip => ActivationMode::Clip,
            ModeDesc::If => ActivationMode::If,
        },
        input_shape: manifest.input_shape.clone(),
        meta: GraphMeta {
            readout_scale: manifest.readout_scale.clone(),
            t0_estimate: manifest.t0_estimate,
            norm_variant: manifest.norm_variant.clone(),
        },
    };
    graph.validate()?;
    Ok(graph)
}
