//! Graph rewrites applied before conversion.

use crate::error::{Error, Result};
use crate::graph::{ActivationMode, LayerSpec, NetworkGraph};
use crate::tensor::Tensor;

/// Folds every BatchNorm into the Dense/Conv2d layer directly before it.
/// Residual sources are remapped to the new layer indices.
pub fn fold_batchnorm(graph: &NetworkGraph) -> Result<NetworkGraph> {
    graph.validate()?;
    let n = graph.layers.len();
    // new_index[i]: index in the folded graph of the layer producing layer i's output
    let mut new_index = vec![0usize; n];
    let mut layers: Vec<LayerSpec> = Vec::with_capacity(n);
    for (i, layer) in graph.layers.iter().enumerate() {
        match layer {
            LayerSpec::BatchNorm(bn) => {
                let Some(prev) = layers.last_mut().filter(|_| i > 0) else {
                    return Err(Error::UnsupportedPlacement {
                        layer: i,
                        reason: "batch norm must follow a dense or conv layer".into(),
                    });
                };
                let aff = bn.affine();
                let (weight, bias, out_ch) = match prev {
                    LayerSpec::Dense(d) => (&mut d.weight, &mut d.bias, d.out_features),
                    LayerSpec::Conv2d(c) => (&mut c.weight, &mut c.bias, c.out_channels),
                    _ => {
                        return Err(Error::UnsupportedPlacement {
                            layer: i,
                            reason: format!(
                                "batch norm must follow a dense or conv layer, found {}",
                                prev.kind()
                            ),
                        })
                    }
                };
                // a residual join may read the un-normalized output
                if graph
                    .layers
                    .iter()
                    .any(|l| matches!(l, LayerSpec::ResidualAdd(r) if r.source == i - 1))
                {
                    return Err(Error::UnsupportedPlacement {
                        layer: i,
                        reason: "pre-normalization output is used by a residual join".into(),
                    });
                }
                let per = weight.len() / out_ch;
                for (k, w) in weight.data_mut().iter_mut().enumerate() {
                    *w = (*w as f64 * aff[k / per].0) as f32;
                }
                let new_bias: Vec<f32> = (0..out_ch)
                    .map(|o| {
                        let b = bias.as_ref().map_or(0.0, |b| b.data()[o] as f64);
                        (b * aff[o].0 + aff[o].1) as f32
                    })
                    .collect();
                *bias = Some(Tensor::from_vec(new_bias));
                new_index[i] = layers.len() - 1;
            }
            other => {
                let mut l = other.clone();
                if let LayerSpec::ResidualAdd(r) = &mut l {
                    r.source = new_index[r.source];
                }
                layers.push(l);
                new_index[i] = layers.len() - 1;
            }
        }
    }
    let out = NetworkGraph {
        layers,
        activation_mode: graph.activation_mode,
        input_shape: graph.input_shape.clone(),
        meta: graph.meta.clone(),
    };
    out.validate()?;
    Ok(out)
}

/// Moves max pooling in front of the activation it follows:
/// `(Activation, MaxPool)` becomes `(PreNeuronMaxPool, Activation)`. Any
/// other MaxPool already sees real-valued input and is relabelled in place.
///
/// With ReLU, `max(relu(z)) == relu(max(z))` for every window, so the ANN
/// output does not change.
pub fn rewrite_preneuron_maxpool(graph: &NetworkGraph) -> Result<NetworkGraph> {
    if graph.activation_mode != ActivationMode::Relu {
        return Err(Error::WrongMode {
            expected: "relu".into(),
            found: graph.activation_mode.to_string(),
        });
    }
    // residual sources keep their indices: the pooled value that used to
    // come out of the MaxPool at `i` now comes out of the activation at `i`
    let mut layers = graph.layers.clone();
    let mut i = 0;
    while i < layers.len() {
        if let LayerSpec::MaxPool(p) = layers[i] {
            if i > 0 && layers[i - 1].is_activation() {
                let act = i - 1;
                if graph
                    .layers
                    .iter()
                    .any(|l| matches!(l, LayerSpec::ResidualAdd(r) if r.source == act))
                {
                    return Err(Error::UnsupportedPlacement {
                        layer: i,
                        reason: "un-pooled activation output is used by a residual join".into(),
                    });
                }
                let slot = layers[act].clone();
                layers[act] = LayerSpec::PreNeuronMaxPool(p);
                layers[i] = slot;
            } else {
                layers[i] = LayerSpec::PreNeuronMaxPool(p);
            }
        }
        i += 1;
    }
    let out = NetworkGraph {
        layers,
        activation_mode: graph.activation_mode,
        input_shape: graph.input_shape.clone(),
        meta: graph.meta.clone(),
    };
    out.validate()?;
    Ok(out)
}
