//! Raw buffer kernels shared by forward ops and their backward closures.
//! Everything here is plain math on slices; nothing touches the tape.

use super::Element;

/// `c = op(a) . op(b)` into a fresh buffer. `m, k, n` are the logical
/// (post-transpose) dimensions.
pub fn gemm<E: Element>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    b: &[E],
) -> Vec<E> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![E::zero(); m * n];
    if m * k * n == 0 {
        return c;
    }
    E::gemm(trans_a, trans_b, m, k, n, a, b, &mut c);
    c
}

pub fn transpose<E: Element>(x: &[E], rows: usize, cols: usize) -> Vec<E> {
    debug_assert_eq!(x.len(), rows * cols);
    let mut out = vec![E::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Numerically stable softmax over one contiguous lane, written into `out`.
pub fn softmax_lane<E: Element>(lane: &[E], out: &mut [E]) {
    let mut max = lane[0];
    for &v in &lane[1..] {
        if v > max {
            max = v;
        }
    }
    let mut sum = E::zero();
    for (o, &v) in out.iter_mut().zip(lane) {
        let e = (v - max).exp();
        *o = e;
        sum = sum + e;
    }
    let inv = E::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// dL/dx for y = softmax(x) over one lane: dx = y * (dy - dot(dy, y)).
pub fn softmax_lane_backward<E: Element>(y: &[E], dy: &[E], dx: &mut [E]) {
    let mut dot = E::zero();
    for (&yi, &gi) in y.iter().zip(dy) {
        dot = dot + yi * gi;
    }
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(dy) {
        *d = *d + yi * (gi - dot);
    }
}

#[inline]
pub fn sigmoid<E: Element>(x: E) -> E {
    let one = E::one();
    if x >= E::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// log(1 + e^x), stable for large |x|.
#[inline]
pub fn softplus<E: Element>(x: E) -> E {
    let zero = E::zero();
    let mx = if x > zero { x } else { zero };
    mx + (E::one() + (-x.abs()).exp()).ln()
}

/// Output spatial size of a cross-correlation along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Direct cross-correlation. `x` is `(c_in, h, w)`, `weight` is
/// `(c_out, c_in, k, k)`, result is `(c_out, h_out, w_out)`.
///
/// Accumulation order per output cell is (c_in, ky, kx), matching the
/// textbook nested-loop definition bit for bit.
pub fn conv2d_forward<E: Element>(
    x: &[E],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[E],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    bias: Option<&[E]>,
) -> (Vec<E>, usize, usize) {
    let h_out = conv_out_dim(h, k, stride, pad).expect("caller validates conv dims");
    let w_out = conv_out_dim(w, k, stride, pad).expect("caller validates conv dims");
    let mut y = vec![E::zero(); c_out * h_out * w_out];
    if let Some(b) = bias {
        for co in 0..c_out {
            let base = co * h_out * w_out;
            for v in &mut y[base..base + h_out * w_out] {
                *v = b[co];
            }
        }
    }
    for co in 0..c_out {
        for ci in 0..c_in {
            let x_plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[((co * c_in + ci) * k + ky) * k + kx];
                    for oy in 0..h_out {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x_plane[iy as usize * w..(iy as usize + 1) * w];
                        let y_row = &mut y[(co * h_out + oy) * w_out..(co * h_out + oy + 1) * w_out];
                        for ox in 0..w_out {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            y_row[ox] = y_row[ox] + wv * x_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (y, h_out, w_out)
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weight, and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<E: Element>(
    x: &[E],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[E],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dy: &[E],
    h_out: usize,
    w_out: usize,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>, Vec<E>) {
    let mut dx = if want_dx { Some(vec![E::zero(); c_in * h * w]) } else { None };
    let mut dw = if want_dw { Some(vec![E::zero(); c_out * c_in * k * k]) } else { None };
    let mut db = vec![E::zero(); c_out];

    for co in 0..c_out {
        let dy_plane = &dy[co * h_out * w_out..(co + 1) * h_out * w_out];
        for g in dy_plane {
            db[co] = db[co] + *g;
        }
        for ci in 0..c_in {
            let x_plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((co * c_in + ci) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let mut dw_acc = E::zero();
                    for oy in 0..h_out {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row_off = iy as usize * w;
                        let dy_row = &dy_plane[oy * w_out..(oy + 1) * w_out];
                        for ox in 0..w_out {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let g = dy_row[ox];
                            dw_acc = dw_acc + g * x_plane[row_off + ix as usize];
                            if let Some(dx) = dx.as_mut() {
                                let di = ci * h * w + row_off + ix as usize;
                                dx[di] = dx[di] + g * wv;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[widx] = dw[widx] + dw_acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_triple_loop() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let c = gemm(false, false, 2, 3, 2, &a, &b);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_transposes() {
        // a stored 3x2, used as a^T (2x3)
        let a_t = vec![1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = vec![7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let c = gemm(true, false, 2, 3, 2, &a_t, &b);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);

        // b stored 2x3, used as b^T (3x2)
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b_t = vec![7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0];
        let c = gemm(false, true, 2, 3, 2, &a, &b_t);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!(softplus(1000.0f64).is_finite());
        assert!((softplus(1000.0f64) - 1000.0).abs() < 1e-9);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn conv_output_dims() {
        assert_eq!(conv_out_dim(8, 3, 1, 1), Some(8));
        assert_eq!(conv_out_dim(8, 3, 2, 1), Some(4));
        assert_eq!(conv_out_dim(2, 5, 1, 0), None);
    }
}
