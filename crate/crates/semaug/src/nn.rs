//! Neural-net kernels and parameter containers.
//!
//! Kernels are free functions over flat slices so the plain inference paths
//! and the autodiff tape share the exact same arithmetic (bit-for-bit).

use rand::Rng;

use crate::rng::gaussian;
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Tensor};

/// 2-D convolution, HWC layout, weight layout [kh, kw, cin, cout].
/// Returns (ho, wo) and fills `out` (resized as needed).
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Scalar>(
    input: &[T],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[T],
    bias: &[T],
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    out: &mut Vec<T>,
) -> (usize, usize) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    out.clear();
    out.resize(ho * wo * cout, T::zero());
    let mut acc = vec![T::zero(); cout];
    for oy in 0..ho {
        for ox in 0..wo {
            acc.copy_from_slice(bias);
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let in_base = (iy as usize * w + ix as usize) * cin;
                    let w_base = (ky * kw + kx) * cin * cout;
                    for ic in 0..cin {
                        let xv = input[in_base + ic];
                        let wrow = &weight[w_base + ic * cout..w_base + (ic + 1) * cout];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += xv * wv;
                        }
                    }
                }
            }
            out[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout].copy_from_slice(&acc);
        }
    }
    (ho, wo)
}

/// Gradient of conv2d w.r.t. its input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_input<T: Scalar>(
    grad_out: &[T],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[T],
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    grad_in: &mut [T],
) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    for oy in 0..ho {
        for ox in 0..wo {
            let g = &grad_out[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let in_base = (iy as usize * w + ix as usize) * cin;
                    let w_base = (ky * kw + kx) * cin * cout;
                    for ic in 0..cin {
                        let wrow = &weight[w_base + ic * cout..w_base + (ic + 1) * cout];
                        let mut s = T::zero();
                        for (&gv, &wv) in g.iter().zip(wrow) {
                            s += gv * wv;
                        }
                        grad_in[in_base + ic] += s;
                    }
                }
            }
        }
    }
}

/// Gradients of conv2d w.r.t. weight and bias (accumulated into the buffers).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_params<T: Scalar>(
    input: &[T],
    grad_out: &[T],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    for oy in 0..ho {
        for ox in 0..wo {
            let g = &grad_out[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
            for (b, &gv) in grad_bias.iter_mut().zip(g) {
                *b += gv;
            }
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let in_base = (iy as usize * w + ix as usize) * cin;
                    let w_base = (ky * kw + kx) * cin * cout;
                    for ic in 0..cin {
                        let xv = input[in_base + ic];
                        let wrow =
                            &mut grad_weight[w_base + ic * cout..w_base + (ic + 1) * cout];
                        for (wg, &gv) in wrow.iter_mut().zip(g) {
                            *wg += xv * gv;
                        }
                    }
                }
            }
        }
    }
}

/// Matrix product a [m,k] x b [k,n] -> out [m,n].
pub fn matmul<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize, out: &mut Vec<T>) {
    out.clear();
    out.resize(m * n, T::zero());
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, &av) in arow.iter().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// y = x W^T + b with x [n, din], W [dout, din], b [dout] -> y [n, dout].
pub fn linear<T: Scalar>(
    x: &[T],
    n: usize,
    din: usize,
    w: &[T],
    b: &[T],
    dout: usize,
    out: &mut Vec<T>,
) {
    out.clear();
    out.resize(n * dout, T::zero());
    for i in 0..n {
        let xrow = &x[i * din..(i + 1) * din];
        let orow = &mut out[i * dout..(i + 1) * dout];
        for (o, (wrow, &bv)) in orow.iter_mut().zip(w.chunks_exact(din).zip(b)) {
            let mut s = bv;
            for (&xv, &wv) in xrow.iter().zip(wrow) {
                s += xv * wv;
            }
            *o = s;
        }
    }
}

pub fn relu<T: Scalar>(x: &[T], out: &mut Vec<T>) {
    out.clear();
    out.extend(x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }));
}

/// 2x2 average pooling with stride 2 (trailing odd row/column dropped).
pub fn avgpool2<T: Scalar>(
    input: &[T],
    h: usize,
    w: usize,
    c: usize,
    out: &mut Vec<T>,
) -> (usize, usize) {
    let ho = h / 2;
    let wo = w / 2;
    let quarter = T::of(0.25);
    out.clear();
    out.resize(ho * wo * c, T::zero());
    for oy in 0..ho {
        for ox in 0..wo {
            let o_base = (oy * wo + ox) * c;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let i_base = ((oy * 2 + dy) * w + (ox * 2 + dx)) * c;
                for ch in 0..c {
                    out[o_base + ch] += input[i_base + ch];
                }
            }
            for ch in 0..c {
                out[o_base + ch] *= quarter;
            }
        }
    }
    (ho, wo)
}

pub fn avgpool2_grad<T: Scalar>(
    grad_out: &[T],
    h: usize,
    w: usize,
    c: usize,
    grad_in: &mut [T],
) {
    let ho = h / 2;
    let wo = w / 2;
    let quarter = T::of(0.25);
    for oy in 0..ho {
        for ox in 0..wo {
            let o_base = (oy * wo + ox) * c;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let i_base = ((oy * 2 + dy) * w + (ox * 2 + dx)) * c;
                for ch in 0..c {
                    grad_in[i_base + ch] += grad_out[o_base + ch] * quarter;
                }
            }
        }
    }
}

/// Numerically stable softmax over a flat vector, in place.
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let mut max = v[0];
    for &x in v.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Convolution layer parameters (weight [kh, kw, cin, cout]).
#[derive(Debug, Clone)]
pub struct Conv2dLayer<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // He initialization for relu paths; biases start at zero.
        let std = (2.0 / (k * k * cin) as f64).sqrt();
        let w = Tensor::from_vec(
            &[k, k, cin, cout],
            (0..k * k * cin * cout)
                .map(|_| gaussian::<T>(rng) * T::of(std))
                .collect(),
        )
        .expect("consistent conv shape");
        Conv2dLayer {
            w,
            b: Tensor::zeros(&[cout]),
            kh: k,
            kw: k,
            cin,
            cout,
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let mut out = Vec::new();
        let (ho, wo) = conv2d(
            x.data(),
            x.h(),
            x.w(),
            self.cin,
            self.w.data(),
            self.b.data(),
            self.kh,
            self.kw,
            self.cout,
            self.stride,
            self.pad,
            &mut out,
        );
        FeatureMap::from_vec(ho, wo, self.cout, out).expect("conv output dims")
    }
}

/// Fully connected layer (weight [dout, din]).
#[derive(Debug, Clone)]
pub struct LinearLayer<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub din: usize,
    pub dout: usize,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / din as f64).sqrt();
        let w = Tensor::from_vec(
            &[dout, din],
            (0..din * dout)
                .map(|_| gaussian::<T>(rng) * T::of(std))
                .collect(),
        )
        .expect("consistent linear shape");
        LinearLayer {
            w,
            b: Tensor::zeros(&[dout]),
            din,
            dout,
        }
    }

    pub fn forward_rows(&self, x: &[T], n: usize) -> Vec<T> {
        let mut out = Vec::new();
        linear(x, n, self.din, self.w.data(), self.b.data(), self.dout, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with identity weight passes input through.
        let input: Vec<f64> = (0..12).map(|v| v as f64).collect(); // 2x2x3
        let mut weight = vec![0.0; 3 * 2];
        // cin=3, cout=2: out0 = in0, out1 = in2
        weight[0 * 2 + 0] = 1.0;
        weight[2 * 2 + 1] = 1.0;
        let bias = vec![0.5, -0.5];
        let mut out = Vec::new();
        let (ho, wo) = conv2d(&input, 2, 2, 3, &weight, &bias, 1, 1, 2, 1, 0, &mut out);
        assert_eq!((ho, wo), (2, 2));
        assert_eq!(out[0], 0.0 + 0.5);
        assert_eq!(out[1], 2.0 - 0.5);
        assert_eq!(out[6], 9.0 + 0.5);
    }

    #[test]
    fn conv_stride_and_padding_shapes() {
        let input = vec![1.0f32; 8 * 8 * 3];
        let weight = vec![0.1f32; 3 * 3 * 3 * 4];
        let bias = vec![0.0f32; 4];
        let mut out = Vec::new();
        let (ho, wo) = conv2d(&input, 8, 8, 3, &weight, &bias, 3, 3, 4, 2, 1, &mut out);
        assert_eq!((ho, wo), (4, 4));
    }

    #[test]
    fn avgpool_means_quads() {
        let input = vec![1.0f64, 3.0, 5.0, 7.0]; // 2x2x1
        let mut out = Vec::new();
        let (ho, wo) = avgpool2(&input, 2, 2, 1, &mut out);
        assert_eq!((ho, wo), (1, 1));
        assert_eq!(out[0], 4.0);
    }

    #[test]
    fn linear_matches_manual() {
        let x = vec![1.0f64, 2.0];
        let w = vec![3.0, 4.0, 5.0, 6.0]; // [2,2]
        let b = vec![0.5, -0.5];
        let mut out = Vec::new();
        linear(&x, 1, 2, &w, &b, 2, &mut out);
        assert_eq!(out, vec![1.0 * 3.0 + 2.0 * 4.0 + 0.5, 1.0 * 5.0 + 2.0 * 6.0 - 0.5]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut v = vec![1.0f64, 2.0, 3.0];
        softmax_in_place(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v[2] > v[1] && v[1] > v[0]);
    }
}
