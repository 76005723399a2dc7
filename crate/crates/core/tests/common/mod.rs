#![allow(dead_code)]

use rand::Rng;
use snnconv::graph::{
    ActivationSlot, BatchNorm, Conv2d, Dense, LayerSpec, NetworkGraph, Pool2d, ResidualAdd,
};
use snnconv::io::{load_model, Dataset};
use snnconv::Tensor;

pub fn fixture(name: &str) -> String {
    format!("{}/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

pub fn load_fixture_model(name: &str) -> NetworkGraph {
    load_model(
        fixture(&format!("{name}.json")),
        fixture(&format!("{name}.snnf")),
    )
    .unwrap()
}

pub fn load_digits(split: &str) -> Dataset {
    let labels = fixture(&format!("digits_{split}.labels"));
    Dataset::load(
        fixture(&format!("digits_{split}.snnd")),
        Some(labels.as_ref()),
    )
    .unwrap()
}

/// Largest singular value by one-sided Jacobi rotations on the columns.
pub fn svd_max(a: &[f64], rows: usize, cols: usize) -> f64 {
    // work on the matrix with more rows than columns
    let (m, n, mut u) = if rows >= cols {
        (rows, cols, a.to_vec())
    } else {
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = a[r * cols + c];
            }
        }
        (cols, rows, t)
    };
    let at = |u: &[f64], r: usize, c: usize| u[r * n + c];
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..m {
                    let (x, y) = (at(&u, r, p), at(&u, r, q));
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma.abs() <= 1e-300 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let (x, y) = (at(&u, r, p), at(&u, r, q));
                    u[r * n + p] = c * x - s * y;
                    u[r * n + q] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    (0..n)
        .map(|c| (0..m).map(|r| at(&u, r, c).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn random_dense<R: Rng>(rng: &mut R, i: usize, o: usize) -> LayerSpec {
    let s = (2.0 / i as f32).sqrt();
    LayerSpec::Dense(Dense {
        in_features: i,
        out_features: o,
        weight: random_tensor(rng, vec![o, i], -s, s),
        bias: Some(random_tensor(rng, vec![o], -0.1, 0.1)),
    })
}

pub fn random_conv<R: Rng>(
    rng: &mut R,
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> LayerSpec {
    let s = (2.0 / (ci * k * k) as f32).sqrt();
    LayerSpec::Conv2d(Conv2d {
        in_channels: ci,
        out_channels: co,
        kernel: [k, k],
        stride: [stride, stride],
        padding: [pad, pad],
        weight: random_tensor(rng, vec![co, ci, k, k], -s, s),
        bias: Some(random_tensor(rng, vec![co], -0.1, 0.1)),
    })
}

pub fn random_bn<R: Rng>(rng: &mut R, c: usize) -> LayerSpec {
    LayerSpec::BatchNorm(BatchNorm {
        channels: c,
        eps: 1e-5,
        gamma: random_tensor(rng, vec![c], 0.5, 1.5),
        beta: random_tensor(rng, vec![c], -0.2, 0.2),
        mean: random_tensor(rng, vec![c], -0.2, 0.2),
        var: random_tensor(rng, vec![c], 0.5, 2.0),
    })
}

pub fn act() -> LayerSpec {
    LayerSpec::Activation(ActivationSlot::default())
}

/// Dense/ReLU stack with the given widths; no activation after the last layer.
pub fn random_mlp<R: Rng>(rng: &mut R, widths: &[usize]) -> NetworkGraph {
    let mut layers = Vec::new();
    for (k, w) in widths.windows(2).enumerate() {
        layers.push(random_dense(rng, w[0], w[1]));
        if k + 2 < widths.len() {
            layers.push(act());
        }
    }
    NetworkGraph::new(vec![widths[0]], layers)
}

/// Small conv net on `[c, 8, 8]` input with batch norm, max pooling, a
/// residual block and a dense head.
pub fn random_convnet<R: Rng>(rng: &mut R, c: usize, classes: usize) -> NetworkGraph {
    let layers = vec![
        random_conv(rng, c, 4, 3, 1, 1),
        random_bn(rng, 4),
        act(),
        LayerSpec::MaxPool(Pool2d {
            kernel: [2, 2],
            stride: [2, 2],
        }),
        random_conv(rng, 4, 4, 3, 1, 1),
        act(),
        random_conv(rng, 4, 4, 3, 1, 1),
        LayerSpec::ResidualAdd(ResidualAdd {
            source: 3,
            scale: None,
        }),
        act(),
        LayerSpec::AvgPool(Pool2d {
            kernel: [2, 2],
            stride: [2, 2],
        }),
        LayerSpec::Flatten,
        random_dense(rng, 16, classes),
    ];
    NetworkGraph::new(vec![c, 8, 8], layers)
}

/// Exhaustive SOP count for a spiking slot feeding one conv layer.
pub fn brute_conv_sops(c: &Conv2d, h: usize, w: usize, counts: &[u64]) -> u64 {
    let oh = (h + 2 * c.padding[0] - c.kernel[0]) / c.stride[0] + 1;
    let ow = (w + 2 * c.padding[1] - c.kernel[1]) / c.stride[1] + 1;
    let mut total = 0;
    for _o in 0..c.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c.in_channels {
                    for ky in 0..c.kernel[0] {
                        for kx in 0..c.kernel[1] {
                            let y = (oy * c.stride[0] + ky) as isize - c.padding[0] as isize;
                            let x = (ox * c.stride[1] + kx) as isize - c.padding[1] as isize;
                            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                total += counts[(ci * h + y as usize) * w + x as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    total
}
