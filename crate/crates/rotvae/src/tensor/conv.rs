//! Shared convolution kernels.
//!
//! One linear map serves four call sites: `conv2d` forward, `conv2d`
//! backward (data and kernel gradients), `conv2d_transpose` forward (the
//! exact adjoint of the forward map), and `conv2d_transpose` backward.
//! Everything is phrased in terms of the *underlying* strided convolution
//! `x[n,h,w,ci] * k[kh,kw,ci,co] -> y[n,ho,wo,co]`; the transpose op swaps
//! which side of that map it walks.
//!
//! Padding follows the asymmetric "same" convention: `ho = ceil(h/s)`,
//! total padding `max((ho-1)*s + kh - h, 0)`, split low-before/high-after.
//! For 28 -> 14 with a 3x3 stride-2 kernel that is 0 above/left and 1
//! below/right.

use matrixmultiply::dgemm;

/// Spatial padding rule for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output size `ceil(input/stride)`; zero padding split before/after.
    Same,
    /// No padding; output size `(input - kernel)/stride + 1`.
    Valid,
}

/// Output extent along one spatial axis.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Same => input.div_ceil(stride),
        Padding::Valid => (input - kernel) / stride + 1,
    }
}

/// Zero rows/columns added before the first input element.
pub fn pad_before(input: usize, kernel: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Same => {
            let out = conv_output_dim(input, kernel, stride, padding);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            total / 2
        }
        Padding::Valid => 0,
    }
}

/// Geometry of one strided convolution, all sizes resolved.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub ci: usize,
    pub kh: usize,
    pub kw: usize,
    pub co: usize,
    pub stride: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        n: usize,
        h: usize,
        w: usize,
        ci: usize,
        kh: usize,
        kw: usize,
        co: usize,
        stride: usize,
        padding: Padding,
    ) -> Self {
        ConvGeom {
            n,
            h,
            w,
            ci,
            kh,
            kw,
            co,
            stride,
            ph: pad_before(h, kh, stride, padding),
            pw: pad_before(w, kw, stride, padding),
            ho: conv_output_dim(h, kh, stride, padding),
            wo: conv_output_dim(w, kw, stride, padding),
        }
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.ci
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Unfold input patches into a `[rows(n,ho,wo), kh*kw*ci]` matrix.
/// Out-of-bounds samples stay zero.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.patch_len();
    let mut p = vec![0.0; g.rows() * cols];
    for n in 0..g.n {
        for oh in 0..g.ho {
            let ih0 = (oh * g.stride) as isize - g.ph as isize;
            for ow in 0..g.wo {
                let iw0 = (ow * g.stride) as isize - g.pw as isize;
                let row = ((n * g.ho + oh) * g.wo + ow) * cols;
                for ky in 0..g.kh {
                    let ih = ih0 + ky as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let iw = iw0 + kx as isize;
                        if iw < 0 || iw >= g.w as isize {
                            continue;
                        }
                        let src = ((n * g.h + ih as usize) * g.w + iw as usize) * g.ci;
                        let dst = row + (ky * g.kw + kx) * g.ci;
                        p[dst..dst + g.ci].copy_from_slice(&x[src..src + g.ci]);
                    }
                }
            }
        }
    }
    p
}

/// Fold a `[rows, kh*kw*ci]` patch matrix back onto the input plane,
/// accumulating overlaps. Exact transpose of [`im2col`].
fn col2im(p: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.patch_len();
    let mut x = vec![0.0; g.n * g.h * g.w * g.ci];
    for n in 0..g.n {
        for oh in 0..g.ho {
            let ih0 = (oh * g.stride) as isize - g.ph as isize;
            for ow in 0..g.wo {
                let iw0 = (ow * g.stride) as isize - g.pw as isize;
                let row = ((n * g.ho + oh) * g.wo + ow) * cols;
                for ky in 0..g.kh {
                    let ih = ih0 + ky as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let iw = iw0 + kx as isize;
                        if iw < 0 || iw >= g.w as isize {
                            continue;
                        }
                        let dst = ((n * g.h + ih as usize) * g.w + iw as usize) * g.ci;
                        let src = row + (ky * g.kw + kx) * g.ci;
                        for c in 0..g.ci {
                            x[dst + c] += p[src + c];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `y[n,ho,wo,co] = sum_{ky,kx,ci} x[n, oh*s-ph+ky, ow*s-pw+kx, ci] * k[ky,kx,ci,co] (+ bias[co])`.
pub(crate) fn conv_forward(x: &[f64], k: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let p = im2col(x, g);
    let (m, kk, n) = (g.rows(), g.patch_len(), g.co);
    let mut y = match bias {
        Some(b) => {
            debug_assert_eq!(b.len(), g.co);
            let mut y = Vec::with_capacity(m * n);
            for _ in 0..m {
                y.extend_from_slice(b);
            }
            y
        }
        None => vec![0.0; m * n],
    };
    unsafe {
        dgemm(
            m, kk, n, 1.0, p.as_ptr(), kk as isize, 1, k.as_ptr(), n as isize, 1, 1.0,
            y.as_mut_ptr(), n as isize, 1,
        );
    }
    y
}

/// Adjoint of the data side: scatter `v[n,ho,wo,co]` back through the
/// kernels onto the input plane. Satisfies `<conv(x), v> == <x, adjoint(v)>`.
pub(crate) fn conv_adjoint_data(v: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (m, kk, n) = (g.rows(), g.co, g.patch_len());
    let mut p = vec![0.0; m * n];
    // p = v . k^T, reading k [patch_len, co] transposed via strides
    unsafe {
        dgemm(
            m, kk, n, 1.0, v.as_ptr(), kk as isize, 1, k.as_ptr(), 1, g.co as isize, 0.0,
            p.as_mut_ptr(), n as isize, 1,
        );
    }
    col2im(&p, g)
}

/// Kernel gradient: `dk[ky,kx,ci,co] = sum_rows patch[row, ky,kx,ci] * v[row, co]`.
pub(crate) fn conv_grad_kernels(x: &[f64], v: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = im2col(x, g);
    let (m, kk, n) = (g.patch_len(), g.rows(), g.co);
    let mut dk = vec![0.0; m * n];
    // dk = p^T . v, reading p [rows, patch_len] transposed via strides
    unsafe {
        dgemm(
            m, kk, n, 1.0, p.as_ptr(), 1, g.patch_len() as isize, v.as_ptr(), n as isize, 1, 0.0,
            dk.as_mut_ptr(), n as isize, 1,
        );
    }
    dk
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct sliding-window oracle, no im2col, no gemm.
    fn conv_oracle(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut y = vec![0.0; g.rows() * g.co];
        for n in 0..g.n {
            for oh in 0..g.ho {
                for ow in 0..g.wo {
                    for co in 0..g.co {
                        let mut acc = 0.0;
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let ih = (oh * g.stride + ky) as isize - g.ph as isize;
                                let iw = (ow * g.stride + kx) as isize - g.pw as isize;
                                if ih < 0 || ih >= g.h as isize || iw < 0 || iw >= g.w as isize {
                                    continue;
                                }
                                for ci in 0..g.ci {
                                    acc += x[((n * g.h + ih as usize) * g.w + iw as usize) * g.ci
                                        + ci]
                                        * k[((ky * g.kw + kx) * g.ci + ci) * g.co + co];
                                }
                            }
                        }
                        y[((n * g.ho + oh) * g.wo + ow) * g.co + co] = acc;
                    }
                }
            }
        }
        y
    }

    fn lcg(state: &mut u64) -> f64 {
        // Tiny deterministic generator for test fixtures only.
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn same_padding_splits_low_before_high_after() {
        // 28 -> 14 with 3x3 stride 2: total pad 1, all of it after.
        assert_eq!(conv_output_dim(28, 3, 2, Padding::Same), 14);
        assert_eq!(pad_before(28, 3, 2, Padding::Same), 0);
        // 28 -> 28 with 3x3 stride 1: total pad 2, split 1/1.
        assert_eq!(conv_output_dim(28, 3, 1, Padding::Same), 28);
        assert_eq!(pad_before(28, 3, 1, Padding::Same), 1);
        // 7 -> 4 with 3x3 stride 2: total pad 1+3-7 = 0... (4-1)*2+3-7 = 2, split 1/1.
        assert_eq!(conv_output_dim(7, 3, 2, Padding::Same), 4);
        assert_eq!(pad_before(7, 3, 2, Padding::Same), 1);
        assert_eq!(conv_output_dim(6, 3, 1, Padding::Valid), 4);
        assert_eq!(pad_before(6, 3, 1, Padding::Valid), 0);
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        // 4x4 ones, 3x3 ones kernel, stride 1, same: corners 4, edges 6, centre 9.
        let g = ConvGeom::new(1, 4, 4, 1, 3, 3, 1, 1, Padding::Same);
        let y = conv_forward(&[1.0; 16], &[1.0; 9], None, &g);
        let expect = [
            4.0, 6.0, 6.0, 4.0, 6.0, 9.0, 9.0, 6.0, 6.0, 9.0, 9.0, 6.0, 4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(y, expect);
    }

    #[test]
    fn forward_matches_sliding_window_oracle() {
        let mut s = 7u64;
        for &(h, w, ci, co, kh, stride, padding) in &[
            (5, 5, 1, 2, 3, 1, Padding::Same),
            (6, 5, 3, 2, 3, 2, Padding::Same),
            (7, 7, 2, 4, 3, 2, Padding::Same),
            (6, 6, 2, 3, 3, 1, Padding::Valid),
            (5, 7, 1, 1, 2, 2, Padding::Same),
        ] {
            let g = ConvGeom::new(2, h, w, ci, kh, kh, co, stride, padding);
            let x: Vec<f64> = (0..2 * h * w * ci).map(|_| lcg(&mut s)).collect();
            let k: Vec<f64> = (0..kh * kh * ci * co).map(|_| lcg(&mut s)).collect();
            let y = conv_forward(&x, &k, None, &g);
            let y0 = conv_oracle(&x, &k, &g);
            for (a, b) in y.iter().zip(&y0) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn bias_adds_per_channel() {
        let g = ConvGeom::new(1, 2, 2, 1, 1, 1, 2, 1, Padding::Same);
        let y = conv_forward(&[1.0, 2.0, 3.0, 4.0], &[10.0, 100.0], Some(&[0.5, -0.5]), &g);
        assert_eq!(y, vec![10.5, 99.5, 20.5, 199.5, 30.5, 299.5, 40.5, 399.5]);
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let mut s = 99u64;
        for &(h, w, ci, co, stride) in &[(5, 5, 2, 3, 1), (7, 6, 1, 2, 2), (4, 4, 3, 1, 2)] {
            let g = ConvGeom::new(2, h, w, ci, 3, 3, co, stride, Padding::Same);
            let x: Vec<f64> = (0..2 * h * w * ci).map(|_| lcg(&mut s)).collect();
            let k: Vec<f64> = (0..9 * ci * co).map(|_| lcg(&mut s)).collect();
            let v: Vec<f64> = (0..g.rows() * co).map(|_| lcg(&mut s)).collect();
            let y = conv_forward(&x, &k, None, &g);
            let xt = conv_adjoint_data(&v, &k, &g);
            let lhs: f64 = y.iter().zip(&v).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&xt).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn kernel_grad_matches_finite_difference() {
        let mut s = 3u64;
        let g = ConvGeom::new(1, 5, 5, 2, 3, 3, 2, 2, Padding::Same);
        let x: Vec<f64> = (0..25 * 2).map(|_| lcg(&mut s)).collect();
        let mut k: Vec<f64> = (0..9 * 2 * 2).map(|_| lcg(&mut s)).collect();
        let v: Vec<f64> = (0..g.rows() * 2).map(|_| lcg(&mut s)).collect();
        let dk = conv_grad_kernels(&x, &v, &g);
        let loss = |k: &[f64]| -> f64 {
            conv_forward(x.as_slice(), k, None, &g)
                .iter()
                .zip(&v)
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-6;
        for i in 0..k.len() {
            let orig = k[i];
            k[i] = orig + h;
            let up = loss(&k);
            k[i] = orig - h;
            let down = loss(&k);
            k[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - dk[i]).abs() < 1e-6, "kernel {i}: {fd} vs {}", dk[i]);
        }
    }
}
