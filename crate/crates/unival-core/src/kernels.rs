//! Raw numeric kernels behind the tape operations.
//!
//! All matrix products accumulate (`c += a * b` style) so backward passes can
//! reuse them for gradient accumulation. Buffers are flat row-major slices.

use crate::scalar::Scalar;

/// c[m,n] += a[m,k] * b[k,n]
pub fn gemm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + a_ip * b_row[j];
            }
        }
    }
}

/// c[m,k] += a[m,n] * b[k,n]^T
pub fn gemm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for j in 0..n {
                acc = acc + a_row[j] * b_row[j];
            }
            c_row[p] = c_row[p] + acc;
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
pub fn gemm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == S::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + a_ip * b_row[j];
            }
        }
    }
}

/// Output spatial extent of one convolution axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding).saturating_sub(kernel) / stride + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn out_h(&self) -> usize {
        conv_out_len(self.h, self.kh, self.stride, self.padding)
    }
    pub fn out_w(&self) -> usize {
        conv_out_len(self.w, self.kw, self.stride, self.padding)
    }
}

/// Unfolds `x` of shape [cin, h, w] into [cin*kh*kw, out_h*out_w].
pub fn im2col<S: Scalar>(x: &[S], spec: &Conv2dSpec) -> Vec<S> {
    let (oh, ow) = (spec.out_h(), spec.out_w());
    let rows = spec.cin * spec.kh * spec.kw;
    let cols = oh * ow;
    let mut out = vec![S::zero(); rows * cols];
    for c in 0..spec.cin {
        let plane = &x[c * spec.h * spec.w..(c + 1) * spec.h * spec.w];
        for ki in 0..spec.kh {
            for kj in 0..spec.kw {
                let row = (c * spec.kh + ki) * spec.kw + kj;
                let out_row = &mut out[row * cols..(row + 1) * cols];
                for oi in 0..oh {
                    let ii = (oi * spec.stride + ki) as isize - spec.padding as isize;
                    if ii < 0 || ii as usize >= spec.h {
                        continue;
                    }
                    let src = &plane[ii as usize * spec.w..(ii as usize + 1) * spec.w];
                    for oj in 0..ow {
                        let jj = (oj * spec.stride + kj) as isize - spec.padding as isize;
                        if jj < 0 || jj as usize >= spec.w {
                            continue;
                        }
                        out_row[oi * ow + oj] = src[jj as usize];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the image.
pub fn col2im<S: Scalar>(cols: &[S], spec: &Conv2dSpec, dx: &mut [S]) {
    let (oh, ow) = (spec.out_h(), spec.out_w());
    let n = oh * ow;
    for c in 0..spec.cin {
        let plane = &mut dx[c * spec.h * spec.w..(c + 1) * spec.h * spec.w];
        for ki in 0..spec.kh {
            for kj in 0..spec.kw {
                let row = (c * spec.kh + ki) * spec.kw + kj;
                let col_row = &cols[row * n..(row + 1) * n];
                for oi in 0..oh {
                    let ii = (oi * spec.stride + ki) as isize - spec.padding as isize;
                    if ii < 0 || ii as usize >= spec.h {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * spec.stride + kj) as isize - spec.padding as isize;
                        if jj < 0 || jj as usize >= spec.w {
                            continue;
                        }
                        let idx = ii as usize * spec.w + jj as usize;
                        plane[idx] = plane[idx] + col_row[oi * ow + oj];
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub cin: usize,
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride_t: usize,
    pub stride_s: usize,
    pub pad_t: usize,
    pub pad_s: usize,
}

impl Conv3dSpec {
    pub fn out_t(&self) -> usize {
        conv_out_len(self.frames, self.kt, self.stride_t, self.pad_t)
    }
    pub fn out_h(&self) -> usize {
        conv_out_len(self.h, self.kh, self.stride_s, self.pad_s)
    }
    pub fn out_w(&self) -> usize {
        conv_out_len(self.w, self.kw, self.stride_s, self.pad_s)
    }
}

/// Unfolds `x` of shape [cin, frames, h, w] into
/// [cin*kt*kh*kw, out_t*out_h*out_w].
pub fn vol2col<S: Scalar>(x: &[S], spec: &Conv3dSpec) -> Vec<S> {
    let (ot, oh, ow) = (spec.out_t(), spec.out_h(), spec.out_w());
    let rows = spec.cin * spec.kt * spec.kh * spec.kw;
    let n = ot * oh * ow;
    let mut out = vec![S::zero(); rows * n];
    let fhw = spec.h * spec.w;
    for c in 0..spec.cin {
        let vol = &x[c * spec.frames * fhw..(c + 1) * spec.frames * fhw];
        for kt in 0..spec.kt {
            for ki in 0..spec.kh {
                for kj in 0..spec.kw {
                    let row = ((c * spec.kt + kt) * spec.kh + ki) * spec.kw + kj;
                    let out_row = &mut out[row * n..(row + 1) * n];
                    for of in 0..ot {
                        let ff = (of * spec.stride_t + kt) as isize - spec.pad_t as isize;
                        if ff < 0 || ff as usize >= spec.frames {
                            continue;
                        }
                        let frame = &vol[ff as usize * fhw..(ff as usize + 1) * fhw];
                        for oi in 0..oh {
                            let ii = (oi * spec.stride_s + ki) as isize - spec.pad_s as isize;
                            if ii < 0 || ii as usize >= spec.h {
                                continue;
                            }
                            for oj in 0..ow {
                                let jj = (oj * spec.stride_s + kj) as isize - spec.pad_s as isize;
                                if jj < 0 || jj as usize >= spec.w {
                                    continue;
                                }
                                out_row[(of * oh + oi) * ow + oj] =
                                    frame[ii as usize * spec.w + jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`vol2col`].
pub fn col2vol<S: Scalar>(cols: &[S], spec: &Conv3dSpec, dx: &mut [S]) {
    let (ot, oh, ow) = (spec.out_t(), spec.out_h(), spec.out_w());
    let n = ot * oh * ow;
    let fhw = spec.h * spec.w;
    for c in 0..spec.cin {
        let vol = &mut dx[c * spec.frames * fhw..(c + 1) * spec.frames * fhw];
        for kt in 0..spec.kt {
            for ki in 0..spec.kh {
                for kj in 0..spec.kw {
                    let row = ((c * spec.kt + kt) * spec.kh + ki) * spec.kw + kj;
                    let col_row = &cols[row * n..(row + 1) * n];
                    for of in 0..ot {
                        let ff = (of * spec.stride_t + kt) as isize - spec.pad_t as isize;
                        if ff < 0 || ff as usize >= spec.frames {
                            continue;
                        }
                        for oi in 0..oh {
                            let ii = (oi * spec.stride_s + ki) as isize - spec.pad_s as isize;
                            if ii < 0 || ii as usize >= spec.h {
                                continue;
                            }
                            for oj in 0..ow {
                                let jj = (oj * spec.stride_s + kj) as isize - spec.pad_s as isize;
                                if jj < 0 || jj as usize >= spec.w {
                                    continue;
                                }
                                let idx =
                                    ff as usize * fhw + ii as usize * spec.w + jj as usize;
                                vol[idx] = vol[idx] + col_row[(of * oh + oi) * ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_nn_matches_hand_product() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm_nn(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_variants_agree_with_explicit_transposes() {
        let mut rng = crate::rng::CounterRng::new(1, 0);
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|_| rng.next_f64() - 0.5).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.next_f64() - 0.5).collect();

        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);

        // nt: c2[m,k] = c[m,n] * b[k,n]^T should equal a * (b b^T)
        let mut bt = vec![0.0; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let mut via_nt = vec![0.0; m * k];
        gemm_nt(&c, &b, &mut via_nt, m, n, k);
        let mut via_nn = vec![0.0; m * k];
        gemm_nn(&c, &bt, &mut via_nn, m, n, k);
        for (x, y) in via_nt.iter().zip(&via_nn) {
            assert!((x - y).abs() < 1e-12);
        }

        // tn: c3[k,n] = a[m,k]^T * c[m,n]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let mut via_tn = vec![0.0; k * n];
        gemm_tn(&a, &c, &mut via_tn, m, k, n);
        let mut via_nn2 = vec![0.0; k * n];
        gemm_nn(&at, &c, &mut via_nn2, k, m, n);
        for (x, y) in via_tn.iter().zip(&via_nn2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_out_len_halves_with_stride_two() {
        // kernel 3, stride 2, padding 1 maps h to ceil(h / 2)
        for h in [8, 9, 16, 32, 33, 64] {
            assert_eq!(conv_out_len(h, 3, 2, 1), h.div_ceil(2));
        }
    }

    /// Direct convolution used as the oracle for the im2col path.
    fn conv2d_direct(x: &[f64], w: &[f64], spec: &Conv2dSpec) -> Vec<f64> {
        let (oh, ow) = (spec.out_h(), spec.out_w());
        let mut out = vec![0.0; spec.cout * oh * ow];
        for co in 0..spec.cout {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..spec.cin {
                        for ki in 0..spec.kh {
                            for kj in 0..spec.kw {
                                let ii = (oi * spec.stride + ki) as isize - spec.padding as isize;
                                let jj = (oj * spec.stride + kj) as isize - spec.padding as isize;
                                if ii < 0
                                    || jj < 0
                                    || ii as usize >= spec.h
                                    || jj as usize >= spec.w
                                {
                                    continue;
                                }
                                let xv = x[(c * spec.h + ii as usize) * spec.w + jj as usize];
                                let wv = w[((co * spec.cin + c) * spec.kh + ki) * spec.kw + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[(co * oh + oi) * ow + oj] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let spec = Conv2dSpec {
            cin: 2,
            h: 7,
            w: 6,
            cout: 3,
            kh: 3,
            kw: 3,
            stride: 2,
            padding: 1,
        };
        let mut rng = crate::rng::CounterRng::new(2, 0);
        let x: Vec<f64> = (0..spec.cin * spec.h * spec.w)
            .map(|_| rng.next_f64() - 0.5)
            .collect();
        let w: Vec<f64> = (0..spec.cout * spec.cin * spec.kh * spec.kw)
            .map(|_| rng.next_f64() - 0.5)
            .collect();

        let cols = im2col(&x, &spec);
        let n = spec.out_h() * spec.out_w();
        let mut out = vec![0.0; spec.cout * n];
        gemm_nn(&w, &cols, &mut out, spec.cout, spec.cin * spec.kh * spec.kw, n);

        let oracle = conv2d_direct(&x, &w, &spec);
        for (a, b) in out.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y
        let spec = Conv2dSpec {
            cin: 2,
            h: 5,
            w: 5,
            cout: 1,
            kh: 3,
            kw: 3,
            stride: 2,
            padding: 1,
        };
        let mut rng = crate::rng::CounterRng::new(3, 0);
        let x: Vec<f64> = (0..spec.cin * spec.h * spec.w)
            .map(|_| rng.next_f64() - 0.5)
            .collect();
        let rows = spec.cin * spec.kh * spec.kw;
        let n = spec.out_h() * spec.out_w();
        let y: Vec<f64> = (0..rows * n).map(|_| rng.next_f64() - 0.5).collect();

        let cols = im2col(&x, &spec);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();

        let mut back = vec![0.0; x.len()];
        col2im(&y, &spec, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn col2vol_is_adjoint_of_vol2col() {
        let spec = Conv3dSpec {
            cin: 2,
            frames: 4,
            h: 5,
            w: 4,
            cout: 1,
            kt: 2,
            kh: 3,
            kw: 3,
            stride_t: 2,
            stride_s: 2,
            pad_t: 0,
            pad_s: 1,
        };
        let mut rng = crate::rng::CounterRng::new(4, 0);
        let x: Vec<f64> = (0..spec.cin * spec.frames * spec.h * spec.w)
            .map(|_| rng.next_f64() - 0.5)
            .collect();
        let rows = spec.cin * spec.kt * spec.kh * spec.kw;
        let n = spec.out_t() * spec.out_h() * spec.out_w();
        let y: Vec<f64> = (0..rows * n).map(|_| rng.next_f64() - 0.5).collect();

        let cols = vol2col(&x, &spec);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2vol(&y, &spec, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }
}
