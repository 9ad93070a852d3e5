//! Raw dense kernels shared by the forward and backward passes.

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, a, (k, 1), b, (n, 1), c, 1.0);
}

/// `c[m×n] += aᵀ · b` where `a` is stored as `k×m` and `b` as `k×n`.
pub(crate) fn gemm_at_b_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    gemm(m, k, n, a, (1, m), b, (n, 1), c, 1.0);
}

/// `c[m×n] = aᵀ · b`, overwriting `c`.
fn gemm_at_b(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    gemm(m, k, n, a, (1, m), b, (n, 1), c, 0.0);
}

/// `c[m×n] += a · bᵀ` where `a` is `m×k` and `b` is stored as `n×k`.
pub(crate) fn gemm_a_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, a, (k, 1), b, (1, k), c, 1.0);
}

/// Strided `c = a · b + beta·c`; strides are (row, column) in elements.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Output positions `o` along one axis whose input index `o·stride + kk - pad`
/// lies in `0..len`.
fn valid_range(len: usize, out: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kk).div_ceil(stride).min(out);
    let hi = if len + pad > kk { ((len + pad - kk - 1) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold one `cin×h×w` image into a `(cin·k·k) × (oh·ow)` patch matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    for ky in 0..g.k {
        let (y0, y1) = valid_range(g.h, oh, ky, g.stride, g.pad);
        for kx in 0..g.k {
            let (x0, x1) = valid_range(g.w, ow, kx, g.stride, g.pad);
            for c in 0..g.cin {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let img = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
                dst[..y0 * ow].fill(0.0);
                dst[y1 * ow..].fill(0.0);
                for oy in y0..y1 {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    line[..x0].fill(0.0);
                    line[x1..].fill(0.0);
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &img[iy * g.w..(iy + 1) * g.w];
                    if x1 > x0 {
                        let ix0 = x0 * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            line[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for (o, v) in line[x0..x1].iter_mut().enumerate() {
                                *v = src[ix0 + o * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back into an image.
pub(crate) fn col2im_acc(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    for ky in 0..g.k {
        let (y0, y1) = valid_range(g.h, oh, ky, g.stride, g.pad);
        for kx in 0..g.k {
            let (x0, x1) = valid_range(g.w, ow, kx, g.stride, g.pad);
            if x1 == x0 {
                continue;
            }
            for c in 0..g.cin {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let img = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut img[iy * g.w..(iy + 1) * g.w];
                    let line = &src[oy * ow + x0..oy * ow + x1];
                    let ix0 = x0 * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, v) in dst[ix0..ix0 + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (o, v) in line.iter().enumerate() {
                            dst[ix0 + o * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution: `x` is `n×cin×h×w`, `w` is `cout×cin×k×k`.
pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], n: usize, cout: usize, g: &ConvGeom) -> Vec<f64> {
    let hw = g.out_h() * g.out_w();
    let in_size = g.cin * g.h * g.w;
    let rows = g.col_rows();
    let mut out = vec![0.0; n * cout * hw];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * hw] };
    for s in 0..n {
        let xs = &x[s * in_size..(s + 1) * in_size];
        let patches = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        gemm_acc(w, patches, &mut out[s * cout * hw..(s + 1) * cout * hw], cout, rows, hw);
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input and weight.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    n: usize,
    cout: usize,
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let hw = g.out_h() * g.out_w();
    let in_size = g.cin * g.h * g.w;
    let rows = g.col_rows();
    let pointwise = g.is_pointwise();
    let mut gx = vec![0.0; n * in_size];
    let mut gw = vec![0.0; cout * rows];
    let (mut cols, mut gcols) = if pointwise {
        (Vec::new(), Vec::new())
    } else {
        (vec![0.0; rows * hw], vec![0.0; rows * hw])
    };
    for s in 0..n {
        let go = &grad_out[s * cout * hw..(s + 1) * cout * hw];
        let xs = &x[s * in_size..(s + 1) * in_size];
        let gxs = &mut gx[s * in_size..(s + 1) * in_size];
        if pointwise {
            gemm_a_bt_acc(go, xs, &mut gw, cout, hw, rows);
            gemm_at_b(w, go, gxs, cout, rows, hw);
        } else {
            im2col(xs, g, &mut cols);
            gemm_a_bt_acc(go, &cols, &mut gw, cout, hw, rows);
            gemm_at_b(w, go, &mut gcols, cout, rows, hw);
            col2im_acc(&gcols, g, gxs);
        }
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], cout: usize, g: &ConvGeom) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; cout * oh * ow];
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..g.cin {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    acc += x[(c * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((o * g.cin + c) * g.k + ky) * g.k + kx];
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn gemm_two_by_three_ones() {
        let a = vec![1.0; 6];
        let b = vec![1.0; 6];
        let mut c = vec![0.0; 4];
        gemm_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, vec![3.0; 4]);
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (2, 0), (1, 2), (3, 2)] {
            let g = ConvGeom { cin: 2, h: 5, w: 6, k: 3, stride, pad };
            let x: Vec<f64> = (0..60).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
            let w: Vec<f64> = (0..54).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
            let fast = conv2d_forward(&x, &w, 1, 3, &g);
            let slow = naive_conv(&x, &w, 3, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 3, 2), (2, 2, 0)] {
            let g = ConvGeom { cin: 2, h: 5, w: 7, k, stride, pad };
            let n_cols = g.col_rows() * g.out_h() * g.out_w();
            let x: Vec<f64> = (0..70).map(|i| ((i * 29 % 13) as f64 - 6.0) / 4.0).collect();
            let c: Vec<f64> = (0..n_cols).map(|i| ((i * 17 % 9) as f64 - 4.0) / 3.0).collect();
            let mut cols = vec![f64::NAN; n_cols];
            im2col(&x, &g, &mut cols);
            let mut back = vec![0.0; 70];
            col2im_acc(&c, &g, &mut back);
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }
}
