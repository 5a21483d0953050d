//! 2-D cross-correlation through im2col + GEMM.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn geometry<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    let [_, cin, h, w] = x.shape();
    let [cout, wcin, kh, kw] = weight.shape();
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv kernel expects {wcin} input channels, got {cin}"
        )));
    }
    if kh != kw {
        return Err(Error::shape("only square kernels are supported"));
    }
    if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape(format!(
            "kernel {kh} stride {stride} pad {pad} does not fit {h}x{w}"
        )));
    }
    Ok(ConvGeometry {
        in_channels: cin,
        out_channels: cout,
        kernel: kh,
        stride,
        pad,
        in_h: h,
        in_w: w,
    })
}

fn im2col<T: Scalar>(src: &[T], g: &ConvGeometry, col: &mut [T]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let p = oh * ow;
    for ci in 0..g.in_channels {
        let plane = &src[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeometry, dst: &mut [T]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let p = oh * ow;
    for ci in 0..g.in_channels {
        let plane = &mut dst[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out = weight * x + bias` with zero padding. `weight` is
/// `[out, in, k, k]`, `bias` is `[out, 1, 1, 1]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = geometry(x, weight, stride, pad)?;
    if bias.len() != g.out_channels {
        return Err(Error::shape("bias length differs from output channels"));
    }
    let n = x.batch();
    let (kk, p) = (g.patch(), g.pixels());
    let mut out = Tensor::zeros([n, g.out_channels, g.out_h(), g.out_w()]);
    let in_stride = g.in_channels * g.in_h * g.in_w;
    out.data_mut()
        .par_chunks_mut(g.out_channels * p)
        .enumerate()
        .for_each(|(b, dst)| {
            let src = &x.data()[b * in_stride..(b + 1) * in_stride];
            for (co, plane) in dst.chunks_mut(p).enumerate() {
                plane.fill(bias.data()[co]);
            }
            let owned;
            let col: &[T] = if g.is_pointwise() {
                src
            } else {
                let mut buf = vec![T::zero(); kk * p];
                im2col(src, &g, &mut buf);
                owned = buf;
                &owned
            };
            unsafe {
                T::gemm(
                    g.out_channels,
                    kk,
                    p,
                    T::one(),
                    weight.data().as_ptr(),
                    kk as isize,
                    1,
                    col.as_ptr(),
                    p as isize,
                    1,
                    T::one(),
                    dst.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
        });
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = geometry(x, weight, stride, pad)?;
    let n = x.batch();
    let (kk, p) = (g.patch(), g.pixels());
    let in_stride = g.in_channels * g.in_h * g.in_w;
    let out_stride = g.out_channels * p;
    let per_sample: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let src = &x.data()[b * in_stride..(b + 1) * in_stride];
            let gout = &grad_out.data()[b * out_stride..(b + 1) * out_stride];
            let owned;
            let col: &[T] = if g.is_pointwise() {
                src
            } else {
                let mut buf = vec![T::zero(); kk * p];
                im2col(src, &g, &mut buf);
                owned = buf;
                &owned
            };
            let mut dw = vec![T::zero(); g.out_channels * kk];
            unsafe {
                T::gemm(
                    g.out_channels,
                    p,
                    kk,
                    T::one(),
                    gout.as_ptr(),
                    p as isize,
                    1,
                    col.as_ptr(),
                    1,
                    p as isize,
                    T::zero(),
                    dw.as_mut_ptr(),
                    kk as isize,
                    1,
                );
            }
            let db: Vec<T> = gout.chunks(p).map(|c| c.iter().copied().sum()).collect();
            let dx = need_input.then(|| {
                let mut dcol = vec![T::zero(); kk * p];
                unsafe {
                    T::gemm(
                        kk,
                        g.out_channels,
                        p,
                        T::one(),
                        weight.data().as_ptr(),
                        1,
                        kk as isize,
                        gout.as_ptr(),
                        p as isize,
                        1,
                        T::zero(),
                        dcol.as_mut_ptr(),
                        p as isize,
                        1,
                    );
                }
                if g.is_pointwise() {
                    dcol
                } else {
                    let mut dx = vec![T::zero(); in_stride];
                    col2im(&dcol, &g, &mut dx);
                    dx
                }
            });
            (dw, db, dx)
        })
        .collect();

    let mut dweight = Tensor::zeros(weight.shape());
    let mut dbias = Tensor::zeros([g.out_channels, 1, 1, 1]);
    let mut dinput = need_input.then(|| Vec::with_capacity(n * in_stride));
    for (dw, db, dx) in per_sample {
        for (a, b) in dweight.data_mut().iter_mut().zip(dw) {
            *a += b;
        }
        for (a, b) in dbias.data_mut().iter_mut().zip(db) {
            *a += b;
        }
        if let (Some(acc), Some(dx)) = (dinput.as_mut(), dx) {
            acc.extend(dx);
        }
    }
    Ok(ConvGrads {
        input: dinput.map(|d| Tensor::from_vec(x.shape(), d).expect("input shape")),
        weight: dweight,
        bias: dbias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::lit;

    /// Direct nested-loop convolution.
    fn naive<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, s: usize, pad: usize) -> Tensor<T> {
        let g = geometry(x, w, s, pad).unwrap();
        let mut out = Tensor::zeros([x.batch(), g.out_channels, g.out_h(), g.out_w()]);
        for n in 0..x.batch() {
            for co in 0..g.out_channels {
                for oy in 0..g.out_h() {
                    for ox in 0..g.out_w() {
                        let mut acc = b.data()[co];
                        for ci in 0..g.in_channels {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * s + ky) as isize - pad as isize;
                                    let ix = (ox * s + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                                        acc += w.at(co, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        let idx = out.index(n, co, oy, ox);
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let n = shape.iter().product();
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matches_naive_loops() {
        for &(k, s, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (3, 1, 0)] {
            let x = pseudo([2, 3, 7, 6], 1);
            let w = pseudo([4, 3, k, k], 2);
            let b = pseudo([4, 1, 1, 1], 3);
            let fast = conv2d_forward(&x, &w, &b, s, pad).unwrap();
            let slow = naive(&x, &w, &b, s, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_kernel_and_constant_sum() {
        let x = pseudo([1, 1, 5, 5], 4);
        let one = Tensor::full([1, 1, 1, 1], 1.0);
        let zero = Tensor::zeros([1, 1, 1, 1]);
        assert_eq!(conv2d_forward(&x, &one, &zero, 1, 0).unwrap(), x);

        let x = Tensor::full([1, 1, 5, 5], lit::<f32>(2.0));
        let ones = Tensor::full([1, 1, 3, 3], 1.0f32);
        let y = conv2d_forward(&x, &ones, &Tensor::zeros([1, 1, 1, 1]), 1, 1).unwrap();
        assert_eq!(y.at(0, 0, 2, 2), 18.0);
        assert_eq!(y.at(0, 0, 0, 0), 8.0);
    }

    #[test]
    fn output_size_formula() {
        let x = Tensor::<f32>::zeros([1, 1, 4, 4]);
        let w = Tensor::zeros([1, 1, 3, 3]);
        let y = conv2d_forward(&x, &w, &Tensor::zeros([1, 1, 1, 1]), 2, 1).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        let bad = Tensor::<f32>::zeros([1, 2, 3, 3]);
        assert!(conv2d_forward(&x, &bad, &Tensor::zeros([1, 1, 1, 1]), 1, 1).is_err());
    }

    #[test]
    fn linear_in_input_without_bias() {
        let x = pseudo([1, 2, 6, 6], 5);
        let y = pseudo([1, 2, 6, 6], 6);
        let w = pseudo([3, 2, 3, 3], 7);
        let zero = Tensor::zeros([3, 1, 1, 1]);
        let (a, b) = (0.7, -1.3);
        let combo = x.zip_map(&y, |u, v| a * u + b * v);
        let lhs = conv2d_forward(&combo, &w, &zero, 2, 1).unwrap();
        let fx = conv2d_forward(&x, &w, &zero, 2, 1).unwrap();
        let fy = conv2d_forward(&y, &w, &zero, 2, 1).unwrap();
        let rhs = fx.zip_map(&fy, |u, v| a * u + b * v);
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> = <x, conv^T(g)> and <dW, .> checks against naive sums
        for &(k, s, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let x = pseudo([2, 3, 6, 5], 8);
            let w = pseudo([4, 3, k, k], 9);
            let zero = Tensor::zeros([4, 1, 1, 1]);
            let y = conv2d_forward(&x, &w, &zero, s, pad).unwrap();
            let gout = pseudo(y.shape(), 10);
            let grads = conv2d_backward(&x, &w, &gout, s, pad, true).unwrap();
            let lhs: f64 = y.data().iter().zip(gout.data()).map(|(a, b)| a * b).sum();
            let dx = grads.input.unwrap();
            let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
            let rhs_w: f64 = w.data().iter().zip(grads.weight.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_w).abs() < 1e-10);
            assert!((grads.bias.sum() - gout.sum()).abs() < 1e-10);
        }
    }
}
