//! Conv / dense / pooling primitives with explicit backward passes.

use crate::scalar::Scalar;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::Rng;

/// 3x3-style 2D convolution, stride 1, symmetric zero padding.
///
/// Forward and backward go through im2col + matmul so the hot loops run
/// inside `ndarray::dot`.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    /// `[out_c, in_c, kh, kw]`
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub padding: usize,
}

impl<F: Scalar> Conv2d<F> {
    /// Kaiming-normal init (std = sqrt(2 / fan_in)).
    pub fn init<R: Rng>(out_c: usize, in_c: usize, kernel: usize, padding: usize, rng: &mut R) -> Self {
        let fan_in = in_c * kernel * kernel;
        let std = F::from_f64((2.0 / fan_in as f64).sqrt());
        let weight = Array4::from_shape_simple_fn((out_c, in_c, kernel, kernel), || {
            F::standard_normal(rng) * std
        });
        Conv2d {
            weight,
            bias: Array1::zeros(out_c),
            padding,
        }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.weight.shape()[2];
        (h + 2 * self.padding - k + 1, w + 2 * self.padding - k + 1)
    }

    fn weight_matrix(&self) -> Array2<F> {
        let (oc, ic, kh, kw) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((oc, ic * kh * kw))
            .expect("contiguous conv weight")
            .to_owned()
    }

    /// Forward one image `[in_c, h, w]` -> `[out_c, ho, wo]`.
    pub fn forward_img(&self, x: ArrayView3<F>) -> Array3<F> {
        let (_, ic, kh, kw) = self.weight.dim();
        debug_assert_eq!(ic, x.shape()[0]);
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let (ho, wo) = self.out_spatial(h, w);
        let cols = im2col(x, kh, kw, self.padding);
        let out = self.weight_matrix().dot(&cols); // [oc, ho*wo]
        let oc = out.shape()[0];
        let mut out = out
            .into_shape_with_order((oc, ho, wo))
            .expect("conv output reshape");
        for (mut plane, &b) in out.outer_iter_mut().zip(self.bias.iter()) {
            plane.mapv_inplace(|v| v + b);
        }
        out
    }

    /// Backward one image. Returns `(grad_weight, grad_bias, grad_input)`;
    /// `grad_input` is skipped when `need_grad_input` is false (first layer).
    pub fn backward_img(
        &self,
        x: ArrayView3<F>,
        grad_out: ArrayView3<F>,
        need_grad_input: bool,
    ) -> (Array4<F>, Array1<F>, Option<Array3<F>>) {
        let (oc, ic, kh, kw) = self.weight.dim();
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let (ho, wo) = self.out_spatial(h, w);
        let cols = im2col(x, kh, kw, self.padding);
        let go = grad_out
            .into_shape_with_order((oc, ho * wo))
            .expect("contiguous grad_out");
        let gw = go
            .dot(&cols.t())
            .into_shape_with_order((oc, ic, kh, kw))
            .expect("grad weight reshape");
        let gb = go.sum_axis(Axis(1));
        let gin = if need_grad_input {
            let gcols = self.weight_matrix().t().dot(&go);
            Some(col2im(gcols.view(), ic, h, w, kh, kw, self.padding))
        } else {
            None
        };
        (gw, gb, gin)
    }
}

/// Patch matrix `[in_c*kh*kw, ho*wo]` for stride-1 convolution.
fn im2col<F: Scalar>(x: ArrayView3<F>, kh: usize, kw: usize, pad: usize) -> Array2<F> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = h + 2 * pad - kh + 1;
    let wo = w + 2 * pad - kw + 1;
    let mut cols = Array2::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let mut row_view = cols.row_mut(row);
                for y in 0..ho {
                    let sy = y + ky;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    let iy = sy - pad;
                    // valid x range: pad <= xo + kx < w + pad
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad - kx).min(wo);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let src = x.slice(s![ci, iy, (x_lo + kx - pad)..(x_hi + kx - pad)]);
                    let mut dst = row_view.slice_mut(s![(y * wo + x_lo)..(y * wo + x_hi)]);
                    dst.assign(&src);
                }
            }
        }
    }
    cols
}

/// Scatter-add inverse of [`im2col`].
fn col2im<F: Scalar>(
    cols: ArrayView2<F>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> Array3<F> {
    let ho = h + 2 * pad - kh + 1;
    let wo = w + 2 * pad - kw + 1;
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let row_view = cols.row(row);
                for y in 0..ho {
                    let sy = y + ky;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    let iy = sy - pad;
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad - kx).min(wo);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let src = row_view.slice(s![(y * wo + x_lo)..(y * wo + x_hi)]);
                    let mut dst = out.slice_mut(s![ci, iy, (x_lo + kx - pad)..(x_hi + kx - pad)]);
                    dst += &src;
                }
            }
        }
    }
    out
}

/// 2x2 max pooling, stride 2. Input spatial dims must be even.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaxPool2;

impl MaxPool2 {
    /// Returns pooled output and the winning cell index (0..4) per output
    /// element, for the backward scatter.
    pub fn forward<F: Scalar>(x: ArrayView3<F>) -> (Array3<F>, Array3<u8>) {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        debug_assert!(h % 2 == 0 && w % 2 == 0, "pool input must have even dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array3::zeros((c, ho, wo));
        let mut idx = Array3::zeros((c, ho, wo));
        for ci in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut best = x[[ci, 2 * y, 2 * xo]];
                    let mut best_k = 0u8;
                    for k in 1..4u8 {
                        let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                        let v = x[[ci, 2 * y + dy, 2 * xo + dx]];
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    out[[ci, y, xo]] = best;
                    idx[[ci, y, xo]] = best_k;
                }
            }
        }
        (out, idx)
    }

    pub fn backward<F: Scalar>(idx: &Array3<u8>, grad_out: ArrayView3<F>, h: usize, w: usize) -> Array3<F> {
        let (c, ho, wo) = (idx.shape()[0], idx.shape()[1], idx.shape()[2]);
        let mut gin = Array3::zeros((c, h, w));
        for ci in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    let k = idx[[ci, y, xo]];
                    let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                    gin[[ci, 2 * y + dy, 2 * xo + dx]] = grad_out[[ci, y, xo]];
                }
            }
        }
        gin
    }
}

/// Fully connected layer, `weight: [out, in]`.
#[derive(Debug, Clone)]
pub struct Dense<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Dense<F> {
    pub fn init<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let std = F::from_f64((2.0 / in_dim as f64).sqrt());
        let weight = Array2::from_shape_simple_fn((out_dim, in_dim), || F::standard_normal(rng) * std);
        Dense {
            weight,
            bias: Array1::zeros(out_dim),
        }
    }

    /// `x: [n, in] -> [n, out]`
    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        let mut out = x.dot(&self.weight.t());
        out += &self.bias;
        out
    }

    /// Returns `(grad_weight, grad_bias, grad_input)`.
    pub fn backward(
        &self,
        x: ArrayView2<F>,
        grad_out: ArrayView2<F>,
    ) -> (Array2<F>, Array1<F>, Array2<F>) {
        let gw = grad_out.t().dot(&x);
        let gb = grad_out.sum_axis(Axis(0));
        let gx = grad_out.dot(&self.weight);
        (gw, gb, gx)
    }
}

/// In-place ReLU.
pub fn relu_inplace<F: Scalar, D: ndarray::Dimension>(a: &mut ndarray::Array<F, D>) {
    a.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

/// Mask `grad` by `activation > 0` (activation is the post-ReLU value).
pub fn relu_backward_inplace<F: Scalar, D: ndarray::Dimension>(
    grad: &mut ndarray::Array<F, D>,
    activation: &ndarray::Array<F, D>,
) {
    ndarray::Zip::from(grad).and(activation).for_each(|g, &a| {
        if a <= F::zero() {
            *g = F::zero();
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use ndarray::Array;

    fn finite_diff_conv(conv: &Conv2d<f64>, x: &Array3<f64>, gout: &Array3<f64>) -> Array4<f64> {
        // d(sum(out * gout))/dw via central differences
        let eps = 1e-6;
        let mut g = Array4::zeros(conv.weight.dim());
        let mut c = conv.clone();
        for i in 0..conv.weight.len() {
            let idx = linear_to_idx4(conv.weight.dim(), i);
            let orig = c.weight[idx];
            c.weight[idx] = orig + eps;
            let up = (c.forward_img(x.view()) * gout).sum();
            c.weight[idx] = orig - eps;
            let dn = (c.forward_img(x.view()) * gout).sum();
            c.weight[idx] = orig;
            g[idx] = (up - dn) / (2.0 * eps);
        }
        g
    }

    fn linear_to_idx4(dim: (usize, usize, usize, usize), i: usize) -> (usize, usize, usize, usize) {
        let (_, d1, d2, d3) = dim;
        let mut r = i;
        let i3 = r % d3;
        r /= d3;
        let i2 = r % d2;
        r /= d2;
        let i1 = r % d1;
        r /= d1;
        (r, i1, i2, i3)
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = seeds::stream(11, "test/conv", 0);
        let conv: Conv2d<f64> = Conv2d::init(3, 2, 3, 1, &mut rng);
        let x = Array::from_shape_simple_fn((2, 6, 6), || f64::standard_normal(&mut rng));
        let gout = Array::from_shape_simple_fn((3, 6, 6), || f64::standard_normal(&mut rng));
        let (gw, gb, gin) = conv.backward_img(x.view(), gout.view(), true);
        let gw_fd = finite_diff_conv(&conv, &x, &gout);
        let err = (&gw - &gw_fd).mapv(f64::abs).sum() / gw_fd.mapv(f64::abs).sum();
        assert!(err < 1e-7, "conv grad_w rel err {err}");
        assert!((gb.sum() - gout.sum()).abs() < 1e-9);

        // grad wrt input by finite differences on a few elements
        let eps = 1e-6;
        let gin = gin.unwrap();
        for &i in &[0usize, 17, 40, 71] {
            let idx = {
                let (c, h, w) = (2usize, 6usize, 6usize);
                let _ = c;
                (i / (h * w), (i / w) % h, i % w)
            };
            let mut xp = x.clone();
            xp[idx] += eps;
            let up = (conv.forward_img(xp.view()) * &gout).sum();
            xp[idx] -= 2.0 * eps;
            let dn = (conv.forward_img(xp.view()) * &gout).sum();
            let fd = (up - dn) / (2.0 * eps);
            assert!((gin[idx] - fd).abs() < 1e-6, "grad_in mismatch at {idx:?}");
        }
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = seeds::stream(12, "test/dense", 0);
        let dense: Dense<f64> = Dense::init(4, 5, &mut rng);
        let x = Array::from_shape_simple_fn((3, 5), || f64::standard_normal(&mut rng));
        let gout = Array::from_shape_simple_fn((3, 4), || f64::standard_normal(&mut rng));
        let (gw, _gb, gx) = dense.backward(x.view(), gout.view());
        let eps = 1e-6;
        let mut d = dense.clone();
        for i in 0..4 {
            for j in 0..5 {
                let orig = d.weight[[i, j]];
                d.weight[[i, j]] = orig + eps;
                let up = (d.forward(x.view()) * &gout).sum();
                d.weight[[i, j]] = orig - eps;
                let dn = (d.forward(x.view()) * &gout).sum();
                d.weight[[i, j]] = orig;
                let fd = (up - dn) / (2.0 * eps);
                assert!((gw[[i, j]] - fd).abs() < 1e-6);
            }
        }
        let mut xp = x.clone();
        xp[[1, 2]] += eps;
        let up = (dense.forward(xp.view()) * &gout).sum();
        xp[[1, 2]] -= 2.0 * eps;
        let dn = (dense.forward(xp.view()) * &gout).sum();
        assert!((gx[[1, 2]] - (up - dn) / (2.0 * eps)).abs() < 1e-6);
    }

    #[test]
    fn pool_routes_gradient_to_argmax() {
        let x = ndarray::array![[
            [1.0f64, 2.0, 0.0, 0.0],
            [3.0, 0.5, 0.0, 7.0],
            [0.0, 0.0, 5.0, 1.0],
            [0.0, 4.0, 2.0, 0.0]
        ]];
        let (out, idx) = MaxPool2::forward(x.view());
        assert_eq!(out, ndarray::array![[[3.0, 7.0], [4.0, 5.0]]]);
        let gout = ndarray::array![[[1.0, 10.0], [100.0, 1000.0]]];
        let gin = MaxPool2::backward(&idx, gout.view(), 4, 4);
        assert_eq!(gin[[0, 1, 0]], 1.0);
        assert_eq!(gin[[0, 1, 3]], 10.0);
        assert_eq!(gin[[0, 3, 1]], 100.0);
        assert_eq!(gin[[0, 2, 2]], 1000.0);
        assert_eq!(gin.sum(), 1111.0);
    }
}
