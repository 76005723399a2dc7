//! Batched forward kernels for the non-activation layers.
//!
//! Summation order is fixed so repeated runs are bitwise identical:
//! dense outputs use an 8-lane dot product (lane `k` sums inputs `k, k+8, ..`,
//! lanes reduced left to right, then bias added); conv outputs start from the
//! bias and accumulate input channels, then kernel rows, then kernel columns
//! in ascending order.

use crate::error::{Error, Result};
use crate::graph::{channels_of, inner_of, Conv2d, Dense, LayerSpec, Pool2d};
use crate::tensor::Tensor;

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let chunks = a.len() / 8;
    for k in 0..chunks {
        let (x, y) = (&a[k * 8..k * 8 + 8], &b[k * 8..k * 8 + 8]);
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    for i in chunks * 8..a.len() {
        lanes[i % 8] += a[i] * b[i];
    }
    lanes.iter().sum()
}

pub fn dense(d: &Dense, x: &[f32], batch: usize, out: &mut [f32]) {
    let (fi, fo) = (d.in_features, d.out_features);
    let w = d.weight.data();
    for b in 0..batch {
        let xs = &x[b * fi..(b + 1) * fi];
        let ys = &mut out[b * fo..(b + 1) * fo];
        for (o, y) in ys.iter_mut().enumerate() {
            let mut acc = dot(&w[o * fi..(o + 1) * fi], xs);
            if let Some(bias) = &d.bias {
                acc += bias.data()[o];
            }
            *y = acc;
        }
    }
}

/// `out[b, i] = sum_o w[o, i] * y[b, o]` (no bias).
pub fn dense_transpose(d: &Dense, y: &[f32], batch: usize, out: &mut [f32]) {
    let (fi, fo) = (d.in_features, d.out_features);
    let w = d.weight.data();
    out[..batch * fi].fill(0.0);
    for b in 0..batch {
        let xs = &mut out[b * fi..(b + 1) * fi];
        for o in 0..fo {
            let g = y[b * fo + o];
            if g == 0.0 {
                continue;
            }
            for (x, wv) in xs.iter_mut().zip(&w[o * fi..(o + 1) * fi]) {
                *x += wv * g;
            }
        }
    }
}

/// Range of output rows/cols that read input offset `k` of the kernel.
fn valid_range(
    k: usize,
    pad: usize,
    stride: usize,
    in_len: usize,
    out_len: usize,
) -> (usize, usize) {
    // input index = o * stride + k - pad must lie in [0, in_len)
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d(c: &Conv2d, x: &[f32], batch: usize, in_shape: &[usize], out: &mut [f32]) {
    let (ci, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let [kh, kw] = c.kernel;
    let [sy, sx] = c.stride;
    let [py, px] = c.padding;
    let oh = (h + 2 * py - kh) / sy + 1;
    let ow = (w + 2 * px - kw) / sx + 1;
    let co = c.out_channels;
    let wt = c.weight.data();
    for b in 0..batch {
        let xin = &x[b * ci * h * w..(b + 1) * ci * h * w];
        for o in 0..co {
            let plane = &mut out[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
            plane.fill(c.bias.as_ref().map_or(0.0, |bias| bias.data()[o]));
            for ch in 0..ci {
                let xplane = &xin[ch * h * w..(ch + 1) * h * w];
                for ky in 0..kh {
                    let (y0, y1) = valid_range(ky, py, sy, h, oh);
                    for kx in 0..kw {
                        let wv = wt[((o * ci + ch) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_range(kx, px, sx, w, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = oy * sy + ky - py;
                            let row = &mut plane[oy * ow..(oy + 1) * ow];
                            let xrow = &xplane[iy * w..(iy + 1) * w];
                            if sx == 1 {
                                let ix0 = x0 + kx - px;
                                let n = x1 - x0;
                                for (r, xv) in row[x0..x1].iter_mut().zip(&xrow[ix0..ix0 + n]) {
                                    *r += wv * xv;
                                }
                            } else {
                                for ox in x0..x1 {
                                    row[ox] += wv * xrow[ox * sx + kx - px];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv2d`] without bias: scatters output gradients back onto
/// the input grid.
pub fn conv2d_transpose(c: &Conv2d, y: &[f32], batch: usize, in_shape: &[usize], out: &mut [f32]) {
    let (ci, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let [kh, kw] = c.kernel;
    let [sy, sx] = c.stride;
    let [py, px] = c.padding;
    let oh = (h + 2 * py - kh) / sy + 1;
    let ow = (w + 2 * px - kw) / sx + 1;
    let co = c.out_channels;
    let wt = c.weight.data();
    out[..batch * ci * h * w].fill(0.0);
    for b in 0..batch {
        for o in 0..co {
            let plane = &y[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
            for ch in 0..ci {
                let xplane = &mut out[(b * ci + ch) * h * w..(b * ci + ch + 1) * h * w];
                for ky in 0..kh {
                    let (y0, y1) = valid_range(ky, py, sy, h, oh);
                    for kx in 0..kw {
                        let wv = wt[((o * ci + ch) * kh + ky) * kw + kx];
                        let (x0, x1) = valid_range(kx, px, sx, w, ow);
                        for oy in y0..y1 {
                            let iy = oy * sy + ky - py;
                            for ox in x0..x1 {
                                let ix = ox * sx + kx - px;
                                xplane[iy * w + ix] += wv * plane[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn pool_dims(p: &Pool2d, in_shape: &[usize]) -> (usize, usize, usize, usize, usize) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let oh = (h - p.kernel[0]) / p.stride[0] + 1;
    let ow = (w - p.kernel[1]) / p.stride[1] + 1;
    (c, h, w, oh, ow)
}

/// Max pooling; ties keep the first maximal element in row-major order.
pub fn max_pool(p: &Pool2d, x: &[f32], batch: usize, in_shape: &[usize], out: &mut [f32]) {
    let (c, h, w, oh, ow) = pool_dims(p, in_shape);
    for bc in 0..batch * c {
        let plane = &x[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut first = true;
                for ky in 0..p.kernel[0] {
                    for kx in 0..p.kernel[1] {
                        let v = plane[(oy * p.stride[0] + ky) * w + ox * p.stride[1] + kx];
                        if first || v > best {
                            best = v;
                            first = false;
                        }
                    }
                }
                out[(bc * oh + oy) * ow + ox] = best;
            }
        }
    }
}

pub fn avg_pool(p: &Pool2d, x: &[f32], batch: usize, in_shape: &[usize], out: &mut [f32]) {
    let (c, h, w, oh, ow) = pool_dims(p, in_shape);
    let inv = 1.0 / (p.kernel[0] * p.kernel[1]) as f32;
    for bc in 0..batch * c {
        let plane = &x[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for ky in 0..p.kernel[0] {
                    for kx in 0..p.kernel[1] {
                        acc += plane[(oy * p.stride[0] + ky) * w + ox * p.stride[1] + kx];
                    }
                }
                out[(bc * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
}

pub fn relu(v: f32) -> f32 {
    v.max(0.0)
}

/// `min(max(0, x), theta)`
pub fn clip(v: f32, theta: f32) -> f32 {
    v.max(0.0).min(theta)
}

/// Runs one non-activation layer on a batch. `skip` is the output of the
/// residual source for [`LayerSpec::ResidualAdd`].
pub fn run_layer(
    index: usize,
    layer: &LayerSpec,
    input: &Tensor,
    in_shape: &[usize],
    out_shape: &[usize],
    skip: Option<&Tensor>,
) -> Result<Tensor> {
    let batch = input.batch();
    if input.sample_shape() != in_shape {
        return Err(Error::ShapeMismatch {
            layer: index,
            expected: in_shape.to_vec(),
            found: input.sample_shape().to_vec(),
        });
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(out_shape);
    let x = input.data();
    let t = match layer {
        LayerSpec::Dense(d) => {
            let mut out = Tensor::zeros(shape);
            dense(d, x, batch, out.data_mut());
            out
        }
        LayerSpec::Conv2d(c) => {
            let mut out = Tensor::zeros(shape);
            conv2d(c, x, batch, in_shape, out.data_mut());
            out
        }
        LayerSpec::MaxPool(p) | LayerSpec::PreNeuronMaxPool(p) => {
            let mut out = Tensor::zeros(shape);
            max_pool(p, x, batch, in_shape, out.data_mut());
            out
        }
        LayerSpec::AvgPool(p) => {
            let mut out = Tensor::zeros(shape);
            avg_pool(p, x, batch, in_shape, out.data_mut());
            out
        }
        LayerSpec::BatchNorm(bn) => {
            let aff: Vec<(f32, f32)> = bn
                .affine()
                .into_iter()
                .map(|(s, b)| (s as f32, b as f32))
                .collect();
            let inner = inner_of(in_shape);
            let mut out = input.clone();
            for (k, v) in out.data_mut().iter_mut().enumerate() {
                let (s, b) = aff[(k / inner.max(1)) % bn.channels];
                *v = *v * s + b;
            }
            out.reshape(shape)?
        }
        LayerSpec::ResidualAdd(r) => {
            let skip = skip.ok_or_else(|| Error::layer(index, "missing residual input"))?;
            let mut out = input.clone();
            let inner = inner_of(in_shape);
            let channels = channels_of(in_shape);
            match &r.scale {
                None => {
                    for (o, s) in out.data_mut().iter_mut().zip(skip.data()) {
                        *o += s;
                    }
                }
                Some(scale) => {
                    for (k, (o, s)) in out.data_mut().iter_mut().zip(skip.data()).enumerate() {
                        *o += scale[(k / inner.max(1)) % channels] * s;
                    }
                }
            }
            out
        }
        LayerSpec::Flatten => input.clone().reshape(shape)?,
        LayerSpec::Activation(_) => {
            return Err(Error::layer(index, "activation is not a linear layer"));
        }
    };
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition of a 2-D cross-correlation, used as the oracle.
    fn conv_naive(c: &Conv2d, x: &[f32], in_shape: &[usize]) -> Vec<f32> {
        let (ci, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        let oh = (h + 2 * c.padding[0] - c.kernel[0]) / c.stride[0] + 1;
        let ow = (w + 2 * c.padding[1] - c.kernel[1]) / c.stride[1] + 1;
        let mut out = vec![0.0f64; c.out_channels * oh * ow];
        for o in 0..c.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = c.bias.as_ref().map_or(0.0, |b| b.data()[o] as f64);
                    for ch in 0..ci {
                        for ky in 0..c.kernel[0] {
                            for kx in 0..c.kernel[1] {
                                let iy = (oy * c.stride[0] + ky) as isize - c.padding[0] as isize;
                                let ix = (ox * c.stride[1] + kx) as isize - c.padding[1] as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let wv = c.weight.data()
                                    [((o * ci + ch) * c.kernel[0] + ky) * c.kernel[1] + kx];
                                acc +=
                                    wv as f64 * x[(ch * h + iy as usize) * w + ix as usize] as f64;
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    fn pseudo(n: usize, seed: u32) -> Vec<f32> {
        let mut s = seed.wrapping_mul(2654435761).wrapping_add(1);
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 17;
                s ^= s << 5;
                (s % 2000) as f32 / 1000.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive_definition() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 2), (2, 0, 1), (3, 2, 3)] {
            let c = Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: [k, k],
                stride: [stride, stride],
                padding: [pad, pad],
                weight: Tensor::new(vec![3, 2, k, k], pseudo(18 * k * k / 3, 7)).unwrap(),
                bias: Some(Tensor::from_vec(vec![0.1, -0.2, 0.3])),
            };
            let in_shape = [2, 5, 6];
            let x = pseudo(60, 3);
            let oh = (5 + 2 * pad - k) / stride + 1;
            let ow = (6 + 2 * pad - k) / stride + 1;
            let mut out = vec![0.0; 3 * oh * ow];
            conv2d(&c, &x, 1, &in_shape, &mut out);
            let want = conv_naive(&c, &x, &in_shape);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_transpose_is_adjoint() {
        let c = Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel: [3, 3],
            stride: [2, 2],
            padding: [1, 1],
            weight: Tensor::new(vec![3, 2, 3, 3], pseudo(54, 11)).unwrap(),
            bias: None,
        };
        let in_shape = [2, 5, 5];
        let x = pseudo(50, 5);
        let y = pseudo(27, 9);
        let mut cx = vec![0.0; 27];
        conv2d(&c, &x, 1, &in_shape, &mut cx);
        let mut cty = vec![0.0; 50];
        conv2d_transpose(&c, &y, 1, &in_shape, &mut cty);
        let lhs: f64 = cx
            .iter()
            .zip(&y)
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        let rhs: f64 = x
            .iter()
            .zip(&cty)
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn max_pool_takes_window_max() {
        let p = Pool2d {
            kernel: [2, 2],
            stride: [2, 2],
        };
        let x = [
            1.0, 2.0, 5.0, 0.0, 3.0, -1.0, 1.0, 1.0, 0.0, 0.0, -2.0, -3.0, 0.0, 0.0, -4.0, -1.0,
        ];
        let mut out = [0.0; 4];
        max_pool(&p, &x, 1, &[1, 4, 4], &mut out);
        assert_eq!(out, [3.0, 5.0, 0.0, -1.0]);
        avg_pool(&p, &x, 1, &[1, 4, 4], &mut out);
        assert_eq!(out, [1.25, 1.75, 0.0, -2.5]);
    }

    #[test]
    fn clip_bounds() {
        assert_eq!(clip(2.0, 1.0), 1.0);
        assert_eq!(clip(-3.0, 1.0), 0.0);
        assert_eq!(clip(0.4, 1.0), 0.4);
        assert_eq!(clip(2.0, 0.0), 0.0);
    }
}
