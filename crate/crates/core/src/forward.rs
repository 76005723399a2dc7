//! Analog (ReLU / clipped) forward execution.

use crate::error::{Error, Result};
use crate::graph::{channels_of, inner_of, ActivationMode, LayerSpec, NetworkGraph};
use crate::ops::{self, clip, relu};
use crate::tensor::{argmax, Tensor};

/// Output of every layer for one batch. For an activation layer at index
/// `i`, the pre-activation is [`ForwardRecord::input_of`]`(i)`.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub input: Tensor,
    pub outputs: Vec<Tensor>,
}

impl ForwardRecord {
    pub fn input_of(&self, layer: usize) -> &Tensor {
        if layer == 0 {
            &self.input
        } else {
            &self.outputs[layer - 1]
        }
    }

    pub fn output(&self) -> &Tensor {
        self.outputs.last().unwrap_or(&self.input)
    }
}

pub(crate) fn check_batch(graph: &NetworkGraph, batch: &Tensor) -> Result<()> {
    if batch.sample_shape() != graph.input_shape.as_slice() || batch.shape().is_empty() {
        return Err(Error::ShapeMismatch {
            layer: 0,
            expected: graph.input_shape.clone(),
            found: batch.sample_shape().to_vec(),
        });
    }
    Ok(())
}

/// Applies the activation of slot `layer` to `pre`, per `mode`.
pub(crate) fn apply_activation(
    graph: &NetworkGraph,
    layer: usize,
    mode: ActivationMode,
    pre: &Tensor,
) -> Result<Tensor> {
    let mut out = pre.clone();
    match mode {
        ActivationMode::Relu => out.data_mut().iter_mut().for_each(|v| *v = relu(*v)),
        ActivationMode::Clip | ActivationMode::If => {
            let slot = graph.slot(layer).expect("activation slot");
            let shape = pre.sample_shape();
            let channels = channels_of(shape);
            let inner = inner_of(shape).max(1);
            if slot.theta.len() != 1 && slot.theta.len() != channels {
                return Err(Error::ChannelMismatch {
                    slot: layer,
                    expected: channels,
                    found: slot.theta.len(),
                });
            }
            let theta = slot.theta_per_channel(channels);
            for (k, v) in out.data_mut().iter_mut().enumerate() {
                *v = clip(*v, theta[(k / inner) % channels]);
            }
        }
    }
    Ok(out)
}

/// Runs the graph on `batch` in its ReLU or Clip mode, keeping every
/// layer output.
pub fn forward_ann(graph: &NetworkGraph, batch: &Tensor) -> Result<ForwardRecord> {
    if graph.activation_mode == ActivationMode::If {
        return Err(Error::WrongMode {
            expected: "relu or clip".into(),
            found: graph.activation_mode.to_string(),
        });
    }
    forward_with_mode(graph, batch, graph.activation_mode)
}

/// Like [`forward_ann`] but with the activation mode overridden, e.g. to
/// run a converted graph as its ReLU parent.
pub fn forward_with_mode(
    graph: &NetworkGraph,
    batch: &Tensor,
    mode: ActivationMode,
) -> Result<ForwardRecord> {
    check_batch(graph, batch)?;
    let shapes = graph.shapes()?;
    let mode = if mode == ActivationMode::If {
        ActivationMode::Clip
    } else {
        mode
    };
    let mut outputs: Vec<Tensor> = Vec::with_capacity(graph.layers.len());
    for (i, layer) in graph.layers.iter().enumerate() {
        let input = if i == 0 { batch } else { &outputs[i - 1] };
        let out = match layer {
            LayerSpec::Activation(_) => apply_activation(graph, i, mode, input)?,
            LayerSpec::ResidualAdd(r) => {
                let in_shape = graph.input_shape_of(&shapes, i);
                ops::run_layer(
                    i,
                    layer,
                    input,
                    &in_shape,
                    &shapes[i],
                    Some(&outputs[r.source]),
                )?
            }
            _ => {
                let in_shape = graph.input_shape_of(&shapes, i);
                ops::run_layer(i, layer, input, &in_shape, &shapes[i], None)?
            }
        };
        outputs.push(out);
    }
    Ok(ForwardRecord {
        input: batch.clone(),
        outputs,
    })
}

/// Final outputs, multiplied by the recorded readout scale if any.
pub fn predict(graph: &NetworkGraph, batch: &Tensor) -> Result<Tensor> {
    let rec = forward_ann(graph, batch)?;
    let mut out = rec.output().clone();
    apply_readout_scale(graph, &mut out);
    Ok(out)
}

pub fn apply_readout_scale(graph: &NetworkGraph, out: &mut Tensor) {
    if let Some(scale) = &graph.meta.readout_scale {
        let n = out.sample_len();
        if scale.len() == n {
            for (k, v) in out.data_mut().iter_mut().enumerate() {
                *v *= scale[k % n];
            }
        }
    }
}

/// Top-1 class per sample; ties resolve to the lowest class index.
pub fn classify(outputs: &Tensor) -> Vec<usize> {
    (0..outputs.batch())
        .map(|b| argmax(outputs.sample(b)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ActivationSlot, Dense};

    fn single(mode: ActivationMode, theta: Vec<f32>) -> NetworkGraph {
        let mut g = NetworkGraph::new(
            vec![1],
            vec![
                LayerSpec::Dense(Dense {
                    in_features: 1,
                    out_features: 1,
                    weight: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
                    bias: Some(Tensor::from_vec(vec![0.0])),
                }),
                LayerSpec::Activation(ActivationSlot { theta }),
            ],
        );
        g.activation_mode = mode;
        g
    }

    fn run(g: &NetworkGraph, x: f32) -> (f32, f32) {
        let rec = forward_ann(g, &Tensor::new(vec![1, 1], vec![x]).unwrap()).unwrap();
        (rec.outputs[0].data()[0], rec.outputs[1].data()[0])
    }

    #[test]
    fn relu_identity_case() {
        assert_eq!(run(&single(ActivationMode::Relu, vec![]), 2.0), (2.0, 2.0));
    }

    #[test]
    fn relu_negative_clamp() {
        assert_eq!(run(&single(ActivationMode::Relu, vec![]), -3.0).1, 0.0);
    }

    #[test]
    fn clip_substitution() {
        assert_eq!(run(&single(ActivationMode::Clip, vec![1.0]), 2.0).1, 1.0);
    }

    #[test]
    fn batch_shape_mismatch_is_reported() {
        let g = single(ActivationMode::Relu, vec![]);
        let err = forward_ann(&g, &Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        assert!(matches!(err, Err(Error::ShapeMismatch { layer: 0, .. })));
    }

    #[test]
    fn if_mode_is_rejected() {
        let g = single(ActivationMode::If, vec![1.0]);
        assert!(forward_ann(&g, &Tensor::new(vec![1, 1], vec![0.0]).unwrap()).is_err());
    }
}
