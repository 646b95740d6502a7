//! Raw numeric kernels over row-major slices.

/// Strided matrix operand: `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }
}

/// `c = a * b + beta * c` where `a` is `m x k`, `b` is `k x n` and `c` is
/// row-major `m x n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let a_last = (m - 1) * a.rs + (k - 1) * a.cs;
    let b_last = (k - 1) * b.rs + (n - 1) * b.cs;
    assert!(a_last < a.data.len() && b_last < b.data.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    pub fn cols_width(&self) -> usize {
        self.batch * self.out_plane()
    }
}

/// Unfolds `x` (N x C x H x W) into a `(C*K*K) x (N*OH*OW)` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let width = g.cols_width();
    let plane = g.out_plane();
    let mut cols = vec![0.0; g.patch() * width];
    for c in 0..g.in_ch {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * width..(row + 1) * width];
                for n in 0..g.batch {
                    let src = &x[(n * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for oh in 0..g.oh {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[ih as usize * g.w..][..g.w];
                        let dst_seg = &mut dst[oh * g.ow..(oh + 1) * g.ow];
                        for (ow, d) in dst_seg.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                *d = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let width = g.cols_width();
    let plane = g.out_plane();
    let mut x = vec![0.0; g.batch * g.in_ch * g.h * g.w];
    for c in 0..g.in_ch {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols[row * width..(row + 1) * width];
                for n in 0..g.batch {
                    let dst = &mut x[(n * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for oh in 0..g.oh {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[ih as usize * g.w..][..g.w];
                        for ow in 0..g.ow {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst_row[iw as usize] += src[oh * g.ow + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[M, N*P]` -> `[N, M, P]`.
pub(crate) fn channels_to_batch(src: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n * p];
    for mi in 0..m {
        for ni in 0..n {
            out[(ni * m + mi) * p..][..p].copy_from_slice(&src[mi * n * p + ni * p..][..p]);
        }
    }
    out
}

/// `[N, M, P]` -> `[M, N*P]`.
pub(crate) fn batch_to_channels(src: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n * p];
    for ni in 0..n {
        for mi in 0..m {
            out[mi * n * p + ni * p..][..p].copy_from_slice(&src[(ni * m + mi) * p..][..p]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_including_transposes() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let expect = naive(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, Mat::row_major(&a, k), Mat::row_major(&b, n), 0.0, &mut c);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
        // b^T stored row-major as n x k, viewed transposed.
        let mut bt = vec![0.0; n * k];
        for l in 0..k {
            for j in 0..n {
                bt[j * k + l] = b[l * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, Mat::row_major(&a, k), Mat::transposed(&bt, k), 0.0, &mut c2);
        assert_eq!(c, c2);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            batch: 2,
            in_ch: 3,
            h: 5,
            w: 4,
            out_ch: 1,
            k: 3,
            stride: 2,
            pad: 1,
            oh: 3,
            ow: 2,
        };
        let x: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| (i as f64 * 0.13).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.29).cos()).collect();
        let back = col2im(&y, &g);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn permutations_invert() {
        let src: Vec<f64> = (0..24).map(f64::from).collect();
        let there = channels_to_batch(&src, 2, 3, 4);
        assert_eq!(batch_to_channels(&there, 2, 3, 4), src);
    }
}
