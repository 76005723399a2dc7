//! Largest singular values by power iteration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Conv2d, Dense, LayerSpec};
use crate::ops;

pub const DEFAULT_MAX_ITERS: usize = 20_000;
pub const DEFAULT_TOL: f64 = 1e-13;

/// Which matrix norm stands in for a layer's weight norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormVariant {
    /// Kernel reshaped to `out_channels x (in_channels * kh * kw)`.
    ReshapedKernel,
    /// Norm of the linear map the layer actually applies to its input grid
    /// (padding and stride included). Same as `ReshapedKernel` for dense layers.
    Operator,
}

impl NormVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            NormVariant::ReshapedKernel => "reshaped-kernel",
            NormVariant::Operator => "operator",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "reshaped-kernel" => Some(NormVariant::ReshapedKernel),
            "operator" => Some(NormVariant::Operator),
            _ => None,
        }
    }
}

fn start_vector(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalized(v).0
}

fn normalized(mut v: Vec<f64>) -> (Vec<f64>, f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    (v, n)
}

/// Power iteration on `A^T A` given closures for `A v` and `A^T u`.
/// Stops once the estimate changes by less than `tol` (relative).
pub fn power_iteration<F, G>(cols: usize, apply: F, apply_t: G, max_iters: usize, tol: f64) -> f64
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if cols == 0 {
        return 0.0;
    }
    let mut v = start_vector(cols);
    let mut sigma = 0.0f64;
    for _ in 0..max_iters.max(1) {
        let u = apply(&v);
        let s = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if s == 0.0 {
            return 0.0;
        }
        let (w, _) = normalized(apply_t(&u));
        v = w;
        let done = (s - sigma).abs() <= tol * s;
        sigma = s;
        if done {
            break;
        }
    }
    sigma
}

/// Largest singular value of a row-major `rows x cols` matrix. A zero
/// matrix gives 0.
pub fn spectral_norm(matrix: &[f32], rows: usize, cols: usize, max_iters: usize, tol: f64) -> f64 {
    assert_eq!(matrix.len(), rows * cols);
    let m: Vec<f64> = matrix.iter().map(|&x| x as f64).collect();
    power_iteration(
        cols,
        |v| {
            (0..rows)
                .map(|r| {
                    m[r * cols..(r + 1) * cols]
                        .iter()
                        .zip(v)
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect()
        },
        |u| {
            let mut out = vec![0.0; cols];
            for (r, ur) in u.iter().enumerate() {
                for (o, a) in out.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
                    *o += a * ur;
                }
            }
            out
        },
        max_iters,
        tol,
    )
}

pub fn dense_norm(d: &Dense) -> f64 {
    spectral_norm(
        d.weight.data(),
        d.out_features,
        d.in_features,
        DEFAULT_MAX_ITERS,
        DEFAULT_TOL,
    )
}

/// Spectral norm of the kernel flattened to `out x (in*kh*kw)`.
pub fn conv_reshaped_norm(c: &Conv2d) -> f64 {
    let cols = c.in_channels * c.kernel[0] * c.kernel[1];
    spectral_norm(
        c.weight.data(),
        c.out_channels,
        cols,
        DEFAULT_MAX_ITERS,
        DEFAULT_TOL,
    )
}

/// Operator norm of the convolution acting on inputs of shape `in_shape`.
pub fn conv_operator_norm(c: &Conv2d, in_shape: &[usize]) -> f64 {
    let n_in: usize = in_shape.iter().product();
    let h = in_shape[1];
    let w = in_shape[2];
    let oh = (h + 2 * c.padding[0] - c.kernel[0]) / c.stride[0] + 1;
    let ow = (w + 2 * c.padding[1] - c.kernel[1]) / c.stride[1] + 1;
    let n_out = c.out_channels * oh * ow;
    let unbiased = Conv2d {
        bias: None,
        ..c.clone()
    };
    power_iteration(
        n_in,
        |v| {
            let x: Vec<f32> = v.iter().map(|&a| a as f32).collect();
            let mut y = vec![0.0f32; n_out];
            ops::conv2d(&unbiased, &x, 1, in_shape, &mut y);
            y.into_iter().map(|a| a as f64).collect()
        },
        |u| {
            let y: Vec<f32> = u.iter().map(|&a| a as f32).collect();
            let mut x = vec![0.0f32; n_in];
            ops::conv2d_transpose(&unbiased, &y, 1, in_shape, &mut x);
            x.into_iter().map(|a| a as f64).collect()
        },
        DEFAULT_MAX_ITERS,
        1e-9,
    )
}

/// Weight norm of a Dense or Conv2d layer under `variant`; `None` for
/// layers without weights.
pub fn layer_norm(layer: &LayerSpec, in_shape: &[usize], variant: NormVariant) -> Option<f64> {
    match layer {
        LayerSpec::Dense(d) => Some(dense_norm(d)),
        LayerSpec::Conv2d(c) => Some(match variant {
            NormVariant::ReshapedKernel => conv_reshaped_norm(c),
            NormVariant::Operator => conv_operator_norm(c, in_shape),
        }),
        _ => None,
    }
}
