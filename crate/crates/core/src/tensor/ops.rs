//! Raw forward and backward kernels over row-major slices.
//!
//! Images and feature maps are laid out `H x W x C` (channels fastest),
//! convolution kernels `K x K x C x F` (filters fastest) and dense weights
//! `M x N`.

use super::Real;
use crate::error::{Error, Result};

/// Geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub filters: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [h, w, c] = *input_shape else {
            return Err(Error::Dimension(format!(
                "conv2d input must be H x W x C, got {input_shape:?}"
            )));
        };
        let [k, k2, kc, f] = *kernel_shape else {
            return Err(Error::Dimension(format!(
                "conv2d kernel must be K x K x C x F, got {kernel_shape:?}"
            )));
        };
        if k != k2 || k % 2 == 0 {
            return Err(Error::Dimension(format!(
                "conv2d kernel must be square with odd size, got {k}x{k2}"
            )));
        }
        if kc != c {
            return Err(Error::Dimension(format!(
                "conv2d kernel expects {kc} channels, input has {c}"
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be >= 1".into()));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::Dimension(format!(
                "conv2d kernel {k} larger than padded input {h}x{w} (padding {padding})"
            )));
        }
        Ok(Self {
            height: h,
            width: w,
            in_channels: c,
            kernel: k,
            filters: f,
            stride,
            padding,
        })
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.out_height(), self.out_width(), self.filters]
    }

    /// Input coordinate for an output coordinate and kernel tap, if inside.
    #[inline]
    fn source(&self, out: usize, tap: usize, limit: usize) -> Option<usize> {
        let pos = (out * self.stride + tap) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

pub fn conv2d_forward<F: Real>(input: &[F], kernel: &[F], bias: &[F], g: &ConvGeom) -> Vec<F> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (c, nf, k) = (g.in_channels, g.filters, g.kernel);
    let mut out = vec![F::zero(); oh * ow * nf];
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = &mut out[(oy * ow + ox) * nf..(oy * ow + ox + 1) * nf];
            acc.copy_from_slice(bias);
            for ky in 0..k {
                let Some(iy) = g.source(oy, ky, g.height) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = g.source(ox, kx, g.width) else {
                        continue;
                    };
                    let pixel = &input[(iy * g.width + ix) * c..(iy * g.width + ix + 1) * c];
                    let taps = &kernel[(ky * k + kx) * c * nf..(ky * k + kx + 1) * c * nf];
                    for (ci, &v) in pixel.iter().enumerate() {
                        let row = &taps[ci * nf..(ci + 1) * nf];
                        for (a, &w) in acc.iter_mut().zip(row) {
                            *a += v * w;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns gradients with respect to (input, kernel, bias).
pub fn conv2d_backward<F: Real>(
    input: &[F],
    kernel: &[F],
    g: &ConvGeom,
    grad_out: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (c, nf, k) = (g.in_channels, g.filters, g.kernel);
    let mut d_input = vec![F::zero(); input.len()];
    let mut d_kernel = vec![F::zero(); kernel.len()];
    let mut d_bias = vec![F::zero(); nf];
    for oy in 0..oh {
        for ox in 0..ow {
            let dout = &grad_out[(oy * ow + ox) * nf..(oy * ow + ox + 1) * nf];
            for (db, &d) in d_bias.iter_mut().zip(dout) {
                *db += d;
            }
            for ky in 0..k {
                let Some(iy) = g.source(oy, ky, g.height) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = g.source(ox, kx, g.width) else {
                        continue;
                    };
                    let base = (iy * g.width + ix) * c;
                    let tap = (ky * k + kx) * c * nf;
                    for ci in 0..c {
                        let v = input[base + ci];
                        let row = &kernel[tap + ci * nf..tap + (ci + 1) * nf];
                        let drow = &mut d_kernel[tap + ci * nf..tap + (ci + 1) * nf];
                        let mut dot = F::zero();
                        for ((dk, &w), &d) in drow.iter_mut().zip(row).zip(dout) {
                            *dk += v * d;
                            dot += w * d;
                        }
                        d_input[base + ci] += dot;
                    }
                }
            }
        }
    }
    (d_input, d_kernel, d_bias)
}

pub fn dense_forward<F: Real>(input: &[F], weights: &[F], bias: &[F]) -> Vec<F> {
    let n = input.len();
    bias.iter()
        .enumerate()
        .map(|(i, &b)| {
            weights[i * n..(i + 1) * n]
                .iter()
                .zip(input)
                .fold(b, |acc, (&w, &x)| acc + w * x)
        })
        .collect()
}

/// Returns gradients with respect to (input, weights, bias).
pub fn dense_backward<F: Real>(
    input: &[F],
    weights: &[F],
    grad_out: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let n = input.len();
    let mut d_input = vec![F::zero(); n];
    let mut d_weights = vec![F::zero(); weights.len()];
    for (i, &d) in grad_out.iter().enumerate() {
        let row = &weights[i * n..(i + 1) * n];
        let drow = &mut d_weights[i * n..(i + 1) * n];
        for j in 0..n {
            drow[j] = d * input[j];
            d_input[j] += row[j] * d;
        }
    }
    (d_input, d_weights, grad_out.to_vec())
}

pub fn relu_forward<F: Real>(input: &[F]) -> Vec<F> {
    input
        .iter()
        .map(|&v| if v > F::zero() { v } else { F::zero() })
        .collect()
}

pub fn relu_backward<F: Real>(input: &[F], grad_out: &[F]) -> Vec<F> {
    input
        .iter()
        .zip(grad_out)
        .map(|(&v, &d)| if v > F::zero() { d } else { F::zero() })
        .collect()
}

/// 2x2 non-overlapping max pooling; also returns the winning input offset
/// of every output cell (first maximum in scan order on ties).
pub fn maxpool2_forward<F: Real>(input: &[F], shape: &[usize]) -> Result<(Vec<F>, Vec<usize>)> {
    let [h, w, c] = *shape else {
        return Err(Error::Dimension(format!(
            "maxpool2 input must be H x W x C, got {shape:?}"
        )));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "maxpool2 needs even height and width, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut argmax = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = (2 * oy * w + 2 * ox) * c + ch;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward<F: Real>(input_len: usize, argmax: &[usize], grad_out: &[F]) -> Vec<F> {
    let mut d = vec![F::zero(); input_len];
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        d[idx] += g;
    }
    d
}

pub fn global_avg_pool_forward<F: Real>(input: &[F], channels: usize) -> Vec<F> {
    let pixels = input.len() / channels;
    let mut out = vec![F::zero(); channels];
    for px in input.chunks_exact(channels) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    let scale = F::one() / F::lit(pixels as f64);
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

pub fn global_avg_pool_backward<F: Real>(input_len: usize, grad_out: &[F]) -> Vec<F> {
    let channels = grad_out.len();
    let scale = F::one() / F::lit((input_len / channels) as f64);
    (0..input_len)
        .map(|i| grad_out[i % channels] * scale)
        .collect()
}

pub fn softmax_forward<F: Real>(logits: &[F]) -> Result<Vec<F>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax received non-finite logits".into()));
    }
    let max = logits.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<F> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn softmax_backward<F: Real>(probs: &[F], grad_out: &[F]) -> Vec<F> {
    let dot: F = probs.iter().zip(grad_out).map(|(&p, &g)| p * g).sum();
    probs
        .iter()
        .zip(grad_out)
        .map(|(&p, &g)| p * (g - dot))
        .collect()
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<F: Real>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn one_by_one_kernel_scales() {
        let input: Vec<f64> = (0..12).map(f64::from).collect();
        let g = ConvGeom::new(&[3, 4, 1], &[1, 1, 1, 1], 1, 0).unwrap();
        let out = conv2d_forward(&input, &[2.5], &[1.0], &g);
        for (o, i) in out.iter().zip(&input) {
            assert_eq!(*o, 2.5 * i + 1.0);
        }
    }

    #[test]
    fn all_ones_kernel_on_constant_image() {
        let c: f64 = 0.75;
        let input = vec![c; 25];
        let g = ConvGeom::new(&[5, 5, 1], &[3, 3, 1, 1], 1, 0).unwrap();
        let out = conv2d_forward(&input, &[1.0; 9], &[0.0], &g);
        assert_eq!(out.len(), 9);
        assert!(out.iter().all(|&v| (v - 9.0 * c).abs() < 1e-12));
    }

    #[test]
    fn conv_output_shape_formula() {
        let g = ConvGeom::new(&[5, 5, 1], &[3, 3, 1, 2], 2, 0).unwrap();
        assert_eq!(g.out_shape(), vec![2, 2, 2]);
        let g = ConvGeom::new(&[64, 64, 3], &[3, 3, 3, 8], 1, 1).unwrap();
        assert_eq!(g.out_shape(), vec![64, 64, 8]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        assert!(ConvGeom::new(&[5, 5, 2], &[3, 3, 1, 4], 1, 0).is_err());
        assert!(ConvGeom::new(&[5, 5, 1], &[2, 2, 1, 4], 1, 0).is_err());
        assert!(ConvGeom::new(&[2, 2, 1], &[3, 3, 1, 4], 1, 0).is_err());
        assert!(ConvGeom::new(&[5, 5, 1], &[3, 3, 1, 4], 0, 0).is_err());
    }

    #[test]
    fn dense_examples() {
        let out = dense_forward(&[1.0, 1.0], &[1.0, 2.0, 3.0, 4.0], &[0.0, 0.0]);
        assert_eq!(out, vec![3.0, 7.0]);
        let out = dense_forward(&[0.3, -2.0], &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]);
        assert_eq!(out, vec![0.3, -2.0]);
        let out = dense_forward(&[5.0, 6.0], &[0.0; 4], &[0.5, -0.5]);
        assert_eq!(out, vec![0.5, -0.5]);
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu_forward(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu_forward(&[-1.0, -3.0]), vec![0.0, 0.0]);
        assert_eq!(relu_forward(&[1.0, 3.0]), vec![1.0, 3.0]);
        assert_eq!(relu_backward(&[0.0, 1.0], &[5.0, 5.0]), vec![0.0, 5.0]);
    }

    #[test]
    fn maxpool_examples() {
        let (out, arg) = maxpool2_forward(&[1.0, 2.0, 3.0, 4.0], &[2, 2, 1]).unwrap();
        assert_eq!((out, arg), (vec![4.0], vec![3]));
        let (out, _) = maxpool2_forward(&[-1.0, -2.0, -3.0, -4.0], &[2, 2, 1]).unwrap();
        assert_eq!(out, vec![-1.0]);
        let (out, _) = maxpool2_forward(&[0.5; 16], &[4, 4, 1]).unwrap();
        assert_eq!(out, vec![0.5; 4]);
        assert!(maxpool2_forward(&[0.0; 6], &[3, 2, 1]).is_err());
    }

    #[test]
    fn maxpool_ties_route_to_first_cell() {
        let (_, arg) = maxpool2_forward(&[7.0; 4], &[2, 2, 1]).unwrap();
        assert_eq!(arg, vec![0]);
        let d = maxpool2_backward(4, &arg, &[1.0]);
        assert_eq!(d, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn global_average_examples() {
        assert_eq!(global_avg_pool_forward(&[1.0, 2.0, 3.0, 4.0], 1), vec![2.5]);
        assert_eq!(global_avg_pool_forward(&[0.0, 1.0, 1.0, 0.0], 1), vec![0.5]);
        let two = [3.0, -1.0, 3.0, -1.0, 3.0, -1.0];
        assert_eq!(global_avg_pool_forward(&two, 2), vec![3.0, -1.0]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_forward(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax_forward(&[1.0f64, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert_relative_eq!(p[0], e / (e + 1.0), epsilon = 1e-12);
        assert_relative_eq!(p[0], 0.7311, epsilon = 1e-4);
        assert_relative_eq!(p[1], 0.2689, epsilon = 1e-4);
        let p = softmax_forward(&[100.0f64, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert_relative_eq!(p[0], 1.0, epsilon = 1e-12);
        assert!(softmax_forward(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn stable_logistic_helpers() {
        assert_relative_eq!(softplus(0.0f64), std::f64::consts::LN_2, epsilon = 1e-15);
        assert!(softplus(1000.0f64).is_finite());
        assert_relative_eq!(sigmoid(-3.0f64), 0.04742587317756678, epsilon = 1e-12);
        assert_eq!(sigmoid(0.0f32), 0.5);
    }
}
