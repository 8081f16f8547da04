//! Differentiable tensor operations.
//!
//! Every op validates shapes, computes its forward result, and (when the
//! tape is recording and a gradient can reach it) pushes a backward closure
//! that reads the output gradient and accumulates into its inputs.

use super::kernels;
use super::{Element, Tape, Tensor};
use crate::error::{Error, Result};

fn shape_err2(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::shape(op, format!("incompatible shapes {a:?} and {b:?}"))
}

fn unary<E, F, D>(tape: &Tape<E>, name: &'static str, x: &Tensor<E>, fwd: F, deriv: D) -> Tensor<E>
where
    E: Element,
    F: Fn(E) -> E,
    D: Fn(E, E) -> E + 'static,
{
    let _ = name;
    let data: Vec<E> = x.data().iter().map(|&v| fwd(v)).collect();
    let out = Tensor::from_op(x.shape().to_vec(), data, x.requires_grad());
    if tape.recording() && out.requires_grad() {
        let xc = x.clone();
        let oc = out.clone();
        tape.push(Box::new(move || {
            let Some(g) = oc.grad_clone() else { return };
            let dx: Vec<E> = xc
                .data()
                .iter()
                .zip(oc.data())
                .zip(&g)
                .map(|((&xi, &yi), &gi)| gi * deriv(xi, yi))
                .collect();
            xc.accumulate_grad(&dx);
        }));
    }
    out
}

fn binary<E, F, Da, Db>(
    tape: &Tape<E>,
    name: &'static str,
    a: &Tensor<E>,
    b: &Tensor<E>,
    fwd: F,
    da: Da,
    db: Db,
) -> Result<Tensor<E>>
where
    E: Element,
    F: Fn(E, E) -> E,
    Da: Fn(E, E) -> E + 'static,
    Db: Fn(E, E) -> E + 'static,
{
    if a.shape() != b.shape() {
        return Err(shape_err2(name, a.shape(), b.shape()));
    }
    let data: Vec<E> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| fwd(x, y))
        .collect();
    let out = Tensor::from_op(
        a.shape().to_vec(),
        data,
        a.requires_grad() || b.requires_grad(),
    );
    if tape.recording() && out.requires_grad() {
        let (ac, bc, oc) = (a.clone(), b.clone(), out.clone());
        tape.push(Box::new(move || {
            let Some(g) = oc.grad_clone() else { return };
            if ac.requires_grad() {
                let dxa: Vec<E> = ac
                    .data()
                    .iter()
                    .zip(bc.data())
                    .zip(&g)
                    .map(|((&x, &y), &gi)| gi * da(x, y))
                    .collect();
                ac.accumulate_grad(&dxa);
            }
            if bc.requires_grad() {
                let dxb: Vec<E> = ac
                    .data()
                    .iter()
                    .zip(bc.data())
                    .zip(&g)
                    .map(|((&x, &y), &gi)| gi * db(x, y))
                    .collect();
                bc.accumulate_grad(&dxb);
            }
        }));
    }
    Ok(out)
}

pub fn add<E: Element>(tape: &Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary(tape, "add", a, b, |x, y| x + y, |_, _| E::one(), |_, _| E::one())
}

pub fn sub<E: Element>(tape: &Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary(tape, "sub", a, b, |x, y| x - y, |_, _| E::one(), |_, _| -E::one())
}

pub fn mul<E: Element>(tape: &Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary(tape, "mul", a, b, |x, y| x * y, |_, y| y, |x, _| x)
}

pub fn div<E: Element>(tape: &Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary(
        tape,
        "div",
        a,
        b,
        |x, y| x / y,
        |_, y| E::one() / y,
        |x, y| -x / (y * y),
    )
}

/// Elementwise minimum; on ties the gradient routes to the first argument.
pub fn minimum<E: Element>(tape: &Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary(
        tape,
        "minimum",
        a,
        b,
        |x, y| if x <= y { x } else { y },
        |x, y| if x <= y { E::one() } else { E::zero() },
        |x, y| if x <= y { E::zero() } else { E::one() },
    )
}

/// Elementwise maximum; on ties the gradient routes to the first argument.
pub fn maximum<E: Element>(tape: &Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary(
        tape,
        "maximum",
        a,
        b,
        |x, y| if x >= y { x } else { y },
        |x, y| if x >= y { E::one() } else { E::zero() },
        |x, y| if x >= y { E::zero() } else { E::one() },
    )
}

/// `y = scale * x + shift`
pub fn affine<E: Element>(tape: &Tape<E>, x: &Tensor<E>, scale: E, shift: E) -> Tensor<E> {
    unary(tape, "affine", x, |v| scale * v + shift, move |_, _| scale)
}

pub fn scale<E: Element>(tape: &Tape<E>, x: &Tensor<E>, factor: E) -> Tensor<E> {
    affine(tape, x, factor, E::zero())
}

pub fn relu<E: Element>(tape: &Tape<E>, x: &Tensor<E>) -> Tensor<E> {
    unary(
        tape,
        "relu",
        x,
        |v| if v > E::zero() { v } else { E::zero() },
        |xi, _| if xi > E::zero() { E::one() } else { E::zero() },
    )
}

pub fn sigmoid<E: Element>(tape: &Tape<E>, x: &Tensor<E>) -> Tensor<E> {
    unary(tape, "sigmoid", x, kernels::sigmoid, |_, yi| yi * (E::one() - yi))
}

/// log(1 + e^x); the stable building block for focal terms.
pub fn softplus<E: Element>(tape: &Tape<E>, x: &Tensor<E>) -> Tensor<E> {
    unary(tape, "softplus", x, kernels::softplus, |xi, _| kernels::sigmoid(xi))
}

pub fn abs<E: Element>(tape: &Tape<E>, x: &Tensor<E>) -> Tensor<E> {
    unary(tape, "abs", x, |v| v.abs(), |xi, _| {
        if xi > E::zero() {
            E::one()
        } else if xi < E::zero() {
            -E::one()
        } else {
            E::zero()
        }
    })
}

/// `y = x^e` for positive `x` (or integral exponents).
pub fn pow_scalar<E: Element>(tape: &Tape<E>, x: &Tensor<E>, exponent: E) -> Tensor<E> {
    unary(
        tape,
        "pow",
        x,
        |v| v.powf(exponent),
        move |xi, _| exponent * xi.powf(exponent - E::one()),
    )
}

/// Matrix product `a[m,k] . b[k,n]`.
pub fn matmul<E: Element>(tape: &Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(shape_err2("matmul", sa, sb));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let data = kernels::gemm(false, false, m, k, n, a.data(), b.data());
    let out = Tensor::from_op(vec![m, n], data, a.requires_grad() || b.requires_grad());
    if tape.recording() && out.requires_grad() {
        let (ac, bc, oc) = (a.clone(), b.clone(), out.clone());
        tape.push(Box::new(move || {
            let Some(g) = oc.grad_clone() else { return };
            if ac.requires_grad() {
                // dA = G . B^T
                let da = kernels::gemm(false, true, m, n, k, &g, bc.data());
                ac.accumulate_grad(&da);
            }
            if bc.requires_grad() {
                // dB = A^T . G
                let db = kernels::gemm(true, false, k, m, n, ac.data(), &g);
                bc.accumulate_grad(&db);
            }
        }));
    }
    Ok(out)
}

/// `a[m,k] . b[n,k]^T -> [m,n]`; the attention-score shape.
pub fn matmul_nt<E: Element>(tape: &Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(shape_err2("matmul_nt", sa, sb));
    }
    let (m, k, n) = (sa[0], sa[1], sb[0]);
    let data = kernels::gemm(false, true, m, k, n, a.data(), b.data());
    let out = Tensor::from_op(vec![m, n], data, a.requires_grad() || b.requires_grad());
    if tape.recording() && out.requires_grad() {
        let (ac, bc, oc) = (a.clone(), b.clone(), out.clone());
        tape.push(Box::new(move || {
            let Some(g) = oc.grad_clone() else { return };
            if ac.requires_grad() {
                // dA = G . B   (G: m x n, B: n x k)
                let da = kernels::gemm(false, false, m, n, k, &g, bc.data());
                ac.accumulate_grad(&da);
            }
            if bc.requires_grad() {
                // dB = G^T . A   (n x m . m x k)
                let db = kernels::gemm(true, false, n, m, k, &g, ac.data());
                bc.accumulate_grad(&db);
            }
        }));
    }
    Ok(out)
}

pub fn transpose2d<E: Element>(tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::shape("transpose2d", format!("need rank 2, got {s:?}")));
    }
    let (r, c) = (s[0], s[1]);
    let data = kernels::transpose(x.data(), r, c);
    let out = Tensor::from_op(vec![c, r], data, x.requires_grad());
    if tape.recording() && out.requires_grad() {
        let (xc, oc) = (x.clone(), out.clone());
        tape.push(Box::new(move || {
            let Some(g) = oc.grad_clone() else { return };
            xc.accumulate_grad(&kernels::transpose(&g, c, r));
        }));
    }
    Ok(out)
}

pub fn reshape<E: Element>(tape: &Tape<E>, x: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() || shape.iter().any(|&d| d == 0) || shape.is_empty() {
        return Err(Error::shape(
            "reshape",
            format!("cannot view {:?} as {shape:?}", x.shape()),
        ));
    }
    let out = Tensor::from_op(shape.to_vec(), x.data().to_vec(), x.requires_grad());
    if tape.recording() && out.requires_grad() {
        let (xc, oc) = (x.clone(), out.clone());
        tape.push(Box::new(move || {
            let Some(g) = oc.grad_clone() else { return };
            xc.accumulate_grad(&g);
        }));
    }
    Ok(out)
}

/// Softmax along `axis`, computed with max-subtraction for stability.
pub fn softmax<E: Element>(tape: &Tape<E>, x: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    let shape = x.shape().to_vec();
    if axis >= shape.len() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    let lane_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();

    let xd = x.data();
    let mut data = vec![E::zero(); xd.len()];
    let mut lane = vec![E::zero(); lane_len];
    let mut lane_out = vec![E::zero(); lane_len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane_len * inner + i;
            for (j, l) in lane.iter_mut().enumerate() {
                *l = xd[base + j * inner];
            }
            kernels::softmax_lane(&lane, &mut lane_out);
            for (j, &v) in lane_out.iter().enumerate() {
                data[base + j * inner] = v;
            }
        }
    }
    let out = Tensor::from_op(shape, data, x.requires_grad());
    if tape.recording() && out.requires_grad() {
        let (xc, oc) = (x.clone(), out.clone());
        tape.push(Box::new(move || {
            let Some(g) = oc.grad_clone() else { return };
            let yd = oc.data();
            let mut dx = vec![E::zero(); yd.len()];
            let mut y_lane = vec![E::zero(); lane_len];
            let mut g_lane = vec![E::zero(); lane_len];
            let mut d_lane = vec![E::zero(); lane_len];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * lane_len * inner + i;
                    for j in 0..lane_len {
                        y_lane[j] = yd[base + j * inner];
                        g_lane[j] = g[base + j * inner];
                        d_lane[j] = E::zero();
                    }
                    kernels::softmax_lane_backward(&y_lane, &g_lane, &mut d_lane);
                    for (j, &v) in d_lane.iter().enumerate() {
                        dx[base + j * inner] = v;
                    }
                }
            }
            xc.accumulate_grad(&dx);
        }));
    }
    Ok(out)
}

/// Per-token normalization over the last dimension followed by an affine map.
pub fn layer_norm<E: Element>(
    tape: &Tape<E>,
    x: &Tensor<E>,
    gain: &Tensor<E>,
    bias: &Tensor<E>,
    eps: E,
) -> Result<Tensor<E>> {
    let d = *x.shape().last().expect("tensor rank >= 1");
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "last dim {d} but gain {:?}, bias {:?}",
                gain.shape(),
                bias.shape()
            ),
        ));
    }
    if !(eps >= E::zero()) {
        return Err(Error::contract("layer_norm", "eps must be non-negative"));
    }
    let rows = x.numel() / d;
    let xd = x.data();
    let gd = gain.data();
    let bd = bias.data();
    let inv_d = E::one() / E::from_f64(d as f64);

    let mut data = vec![E::zero(); xd.len()];
    let mut xhat = vec![E::zero(); xd.len()];
    let mut inv_std = vec![E::zero(); rows];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mut mean = E::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_d;
        let mut var = E::zero();
        for &v in row {
            let c = v - mean;
            var = var + c * c;
        }
        var = var * inv_d;
        let istd = E::one() / (var + eps).sqrt();
        inv_std[r] = istd;
        for j in 0..d {
            let xh = (row[j] - mean) * istd;
            xhat[r * d + j] = xh;
            data[r * d + j] = gd[j] * xh + bd[j];
        }
    }
    let out = Tensor::from_op(
        x.shape().to_vec(),
        data,
        x.requires_grad() || gain.requires_grad() || bias.requires_grad(),
    );
    if tape.recording() && out.requires_grad() {
        let (xc, gc, bc, oc) = (x.clone(), gain.clone(), bias.clone(), out.clone());
        tape.push(Box::new(move || {
            let Some(g) = oc.grad_clone() else { return };
            let gd = gc.data();
            if xc.requires_grad() {
                let mut dx = vec![E::zero(); xc.numel()];
                for r in 0..rows {
                    let istd = inv_std[r];
                    // dxhat = g * gain; dx = istd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    let mut m1 = E::zero();
                    let mut m2 = E::zero();
                    for j in 0..d {
                        let dxh = g[r * d + j] * gd[j];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xhat[r * d + j];
                    }
                    m1 = m1 * inv_d;
                    m2 = m2 * inv_d;
                    for j in 0..d {
                        let dxh = g[r * d + j] * gd[j];
                        dx[r * d + j] = istd * (dxh - m1 - xhat[r * d + j] * m2);
                    }
                }
                xc.accumulate_grad(&dx);
            }
            if gc.requires_grad() {
                let mut dgain = vec![E::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        dgain[j] = dgain[j] + g[r * d + j] * xhat[r * d + j];
                    }
                }
                gc.accumulate_grad(&dgain);
            }
            if bc.requires_grad() {
                let mut dbias = vec![E::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        dbias[j] = dbias[j] + g[r * d + j];
                    }
                }
                bc.accumulate_grad(&dbias);
            }
        }));
    }
    Ok(out)
}

/// Adds a `[d]` bias vector to every row of `x[n,d]`.
pub fn add_row_bias<E: Element>(tape: &Tape<E>, x: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 2 || bias.shape() != [s[1]] {
        return Err(shape_err2("add_row_bias", s, bias.shape()));
    }
    let (n, d) = (s[0], s[1]);
    let bd = bias.data();
    let data: Vec<E> = x
        .data()
        .chunks_exact(d)
        .flat_map(|row| row.iter().zip(bd).map(|(&v, &b)| v + b).collect::<Vec<_>>())
        .collect();
    let out = Tensor::from_op(
        vec![n, d],
        data,
        x.requires_grad() || bias.requires_grad(),
    );
    if tape.recording() && out.requires_grad() {
        let (xc, bc, oc) = (x.clone(), bias.clone(), out.clone());
        tape.push(Box::new(move || {
            let Some(g) = oc.grad_clone() else { return };
            if xc.requires_grad() {
                xc.accumulate_grad(&g);
            }
            if bc.requires_grad() {
                let mut db = vec![E::zero(); d];
                for row in g.chunks_exact(d) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                bc.accumulate_grad(&db);
            }
        }));
    }
    Ok(out)
}

/// Column-wise scaling: `y[r,c] = x[r,c] * s[c]`.
pub fn scale_columns<E: Element>(tape: &Tape<E>, x: &Tensor<E>, s: &Tensor<E>) -> Result<Tensor<E>> {
    let sh = x.shape();
    if sh.len() != 2 || s.shape() != [sh[1]] {
        return Err(shape_err2("scale_columns", sh, s.shape()));
    }
    let (r, c) = (sh[0], sh[1]);
    let sd = s.data();
    let data: Vec<E> = x
        .data()
        .chunks_exact(c)
        .flat_map(|row| row.iter().zip(sd).map(|(&v, &w)| v * w).collect::<Vec<_>>())
        .collect();
    let out = Tensor::from_op(vec![r, c], data, x.requires_grad() || s.requires_grad());
    if tape.recording() && out.requires_grad() {
        let (xc, sc, oc) = (x.clone(), s.clone(), out.clone());
        tape.push(Box::new(move || {
            let Some(g) = oc.grad_clone() else { return };
            if xc.requires_grad() {
                let sd = sc.data();
                let dx: Vec<E> = g
                    .chunks_exact(c)
                    .flat_map(|row| row.iter().zip(sd).map(|(&v, &w)| v * w).collect::<Vec<_>>())
                    .collect();
                xc.accumulate_grad(&dx);
            }
            if sc.requires_grad() {
                let xd = xc.data();
                let mut ds = vec![E::zero(); c];
                for (grow, xrow) in g.chunks_exact(c).zip(xd.chunks_exact(c)) {
                    for j in 0..c {
                        ds[j] = ds[j] + grow[j] * xrow[j];
                    }
                }
                sc.accumulate_grad(&ds);
            }
        }));
    }
    Ok(out)
}

/// Adds a single-element tensor to every element of `x`.
pub fn add_broadcast_scalar<E: Element>(
    tape: &Tape<E>,
    x: &Tensor<E>,
    s: &Tensor<E>,
) -> Result<Tensor<E>> {
    if s.numel() != 1 {
        return Err(Error::shape(
            "add_broadcast_scalar",
            format!("scalar operand has shape {:?}", s.shape()),
        ));
    }
    let sv = s.data()[0];
    let data: Vec<E> = x.data().iter().map(|&v| v + sv).collect();
    let out = Tensor::from_op(
        x.shape().to_vec(),
        data,
        x.requires_grad() || s.requires_grad(),
    );
    if tape.recording() && out.requires_grad() {
        let (xc, sc, oc) = (x.clone(), s.clone(), out.clone());
        tape.push(Box::new(move || {
            let Some(g) = oc.grad_clone() else { return };
            if xc.requires_grad() {
                xc.accumulate_grad(&g);
            }
            if sc.requires_grad() {
                let mut total = E::zero();
                for &v in &g {
                    total = total + v;
                }
                sc.accumulate_grad(&[total]);
            }
        }));
    }
    Ok(out)
}

/// Columns `lo..hi` of `x[n,d]`.
pub fn slice_cols<E: Element>(
    tape: &Tape<E>,
    x: &Tensor<E>,
    lo: usize,
    hi: usize,
) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 2 || lo >= hi || hi > s[1] {
        return Err(Error::shape(
            "slice_cols",
            format!("range {lo}..{hi} on shape {s:?}"),
        ));
    }
    let (n, d) = (s[0], s[1]);
    let w = hi - lo;
    let mut data = Vec::with_capacity(n * w);
    for row in x.data().chunks_exact(d) {
        data.extend_from_slice(&row[lo..hi]);
    }
    let out = Tensor::from_op(vec![n, w], data, x.requires_grad());
    if tape.recording() && out.requires_grad() {
        let (xc, oc) = (x.clone(), out.clone());
        tape.push(Box::new(move || {
            let Some(g) = oc.grad_clone() else { return };
            let mut dx = vec![E::zero(); n * d];
            for (r, grow) in g.chunks_exact(w).enumerate() {
                dx[r * d + lo..r * d + hi].copy_from_slice(grow);
            }
            xc.accumulate_grad(&dx);
        }));
    }
    Ok(out)
}

/// Concatenates `[n, d_i]` parts along the column axis.
pub fn concat_cols<E: Element>(tape: &Tape<E>, parts: &[Tensor<E>]) -> Result<Tensor<E>> {
    if parts.is_empty() {
        return Err(Error::contract("concat_cols", "empty part list"));
    }
    let n = parts[0].shape()[0];
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let s = p.shape();
        if s.len() != 2 || s[0] != n {
            return Err(Error::shape(
                "concat_cols",
                format!("part shapes disagree on rows: {:?}", s),
            ));
        }
        widths.push(s[1]);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(n * total);
    for r in 0..n {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    let any_grad = parts.iter().any(|p| p.requires_grad());
    let out = Tensor::from_op(vec![n, total], data, any_grad);
    if tape.recording() && out.requires_grad() {
        let parts: Vec<Tensor<E>> = parts.to_vec();
        let widths = widths.clone();
        let oc = out.clone();
        tape.push(Box::new(move || {
            let Some(g) = oc.grad_clone() else { return };
            let mut offset = 0usize;
            for (p, &w) in parts.iter().zip(&widths) {
                if p.requires_grad() {
                    let mut dp = vec![E::zero(); n * w];
                    for r in 0..n {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    p.accumulate_grad(&dp);
                }
                offset += w;
            }
        }));
    }
    Ok(out)
}

/// Gathers rows of `x[n,d]` by index; repeated indices scatter-add in backward.
pub fn select_rows<E: Element>(
    tape: &Tape<E>,
    x: &Tensor<E>,
    indices: &[usize],
) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::shape("select_rows", format!("need rank 2, got {s:?}")));
    }
    let (n, d) = (s[0], s[1]);
    if indices.is_empty() {
        return Err(Error::contract("select_rows", "empty index list"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::contract(
            "select_rows",
            format!("index {bad} out of range for {n} rows"),
        ));
    }
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
    }
    let out = Tensor::from_op(vec![indices.len(), d], data, x.requires_grad());
    if tape.recording() && out.requires_grad() {
        let (xc, oc) = (x.clone(), out.clone());
        let idx = indices.to_vec();
        tape.push(Box::new(move || {
            let Some(g) = oc.grad_clone() else { return };
            let mut dx = vec![E::zero(); n * d];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..d {
                    dx[i * d + j] = dx[i * d + j] + g[r * d + j];
                }
            }
            xc.accumulate_grad(&dx);
        }));
    }
    Ok(out)
}

pub fn sum_all<E: Element>(tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    let mut total = E::zero();
    for &v in x.data() {
        total = total + v;
    }
    let out = Tensor::from_op(vec![1], vec![total], x.requires_grad());
    if tape.recording() && out.requires_grad() {
        let (xc, oc) = (x.clone(), out.clone());
        tape.push(Box::new(move || {
            let Some(g) = oc.grad_clone() else { return };
            xc.accumulate_grad(&vec![g[0]; xc.numel()]);
        }));
    }
    Ok(out)
}

pub fn mean_all<E: Element>(tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    let n = E::from_f64(x.numel() as f64);
    let s = sum_all(tape, x)?;
    Ok(scale(tape, &s, E::one() / n))
}

/// Row means of `x[n,d] -> [n]` (global average pooling once the spatial
/// grid is flattened into the second axis).
pub fn mean_axis1<E: Element>(tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::shape("mean_axis1", format!("need rank 2, got {s:?}")));
    }
    let (n, d) = (s[0], s[1]);
    let inv = E::one() / E::from_f64(d as f64);
    let data: Vec<E> = x
        .data()
        .chunks_exact(d)
        .map(|row| {
            let mut acc = E::zero();
            for &v in row {
                acc = acc + v;
            }
            acc * inv
        })
        .collect();
    let out = Tensor::from_op(vec![n], data, x.requires_grad());
    if tape.recording() && out.requires_grad() {
        let (xc, oc) = (x.clone(), out.clone());
        tape.push(Box::new(move || {
            let Some(g) = oc.grad_clone() else { return };
            let mut dx = vec![E::zero(); n * d];
            for (r, &gr) in g.iter().enumerate() {
                let v = gr * inv;
                for j in 0..d {
                    dx[r * d + j] = v;
                }
            }
            xc.accumulate_grad(&dx);
        }));
    }
    Ok(out)
}

/// Direct cross-correlation of `x[c_in,h,w]` with `weight[c_out,c_in,k,k]`.
pub fn conv2d<E: Element>(
    tape: &Tape<E>,
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
        return Err(shape_err2("conv2d", xs, ws));
    }
    let (c_in, h, w) = (xs[0], xs[1], xs[2]);
    let (c_out, k) = (ws[0], ws[2]);
    if k < 1 || stride < 1 {
        return Err(Error::contract("conv2d", "kernel and stride must be >= 1"));
    }
    let (Some(h_out), Some(w_out)) = (
        kernels::conv_out_dim(h, k, stride, pad),
        kernels::conv_out_dim(w, k, stride, pad),
    ) else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {k} larger than padded input {h}x{w} (pad {pad})"),
        ));
    };
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(shape_err2("conv2d", b.shape(), &[c_out]));
        }
    }
    let (data, _, _) = kernels::conv2d_forward(
        x.data(),
        c_in,
        h,
        w,
        weight.data(),
        c_out,
        k,
        stride,
        pad,
        bias.map(|b| b.data()),
    );
    let requires = x.requires_grad()
        || weight.requires_grad()
        || bias.map(|b| b.requires_grad()).unwrap_or(false);
    let out = Tensor::from_op(vec![c_out, h_out, w_out], data, requires);
    if tape.recording() && out.requires_grad() {
        let (xc, wc, oc) = (x.clone(), weight.clone(), out.clone());
        let bc = bias.cloned();
        tape.push(Box::new(move || {
            let Some(g) = oc.grad_clone() else { return };
            let want_dx = xc.requires_grad();
            let want_dw = wc.requires_grad();
            let (dx, dw, db) = kernels::conv2d_backward(
                xc.data(),
                c_in,
                h,
                w,
                wc.data(),
                c_out,
                k,
                stride,
                pad,
                &g,
                h_out,
                w_out,
                want_dx,
                want_dw,
            );
            if let Some(dx) = dx {
                xc.accumulate_grad(&dx);
            }
            if let Some(dw) = dw {
                wc.accumulate_grad(&dw);
            }
            if let Some(b) = &bc {
                if b.requires_grad() {
                    b.accumulate_grad(&db);
                }
            }
        }));
    }
    Ok(out)
}

/// Nearest-neighbour 2x upsampling of `x[c,h,w]`.
pub fn upsample2x<E: Element>(tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::shape("upsample2x", format!("need rank 3, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (h2, w2) = (h * 2, w * 2);
    let xd = x.data();
    let mut data = vec![E::zero(); c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            let src_row = &xd[ch * h * w + (y / 2) * w..ch * h * w + (y / 2) * w + w];
            let dst = &mut data[ch * h2 * w2 + y * w2..ch * h2 * w2 + y * w2 + w2];
            for (xi, d) in dst.iter_mut().enumerate() {
                *d = src_row[xi / 2];
            }
        }
    }
    let out = Tensor::from_op(vec![c, h2, w2], data, x.requires_grad());
    if tape.recording() && out.requires_grad() {
        let (xc, oc) = (x.clone(), out.clone());
        tape.push(Box::new(move || {
            let Some(g) = oc.grad_clone() else { return };
            let mut dx = vec![E::zero(); c * h * w];
            for ch in 0..c {
                for y in 0..h2 {
                    for xi in 0..w2 {
                        let di = ch * h * w + (y / 2) * w + xi / 2;
                        dx[di] = dx[di] + g[ch * h2 * w2 + y * w2 + xi];
                    }
                }
            }
            xc.accumulate_grad(&dx);
        }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::leaf(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let eye = t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let x = t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = matmul(&tape, &eye, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matmul_hand_case() {
        let tape = Tape::new();
        let a = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let y = matmul(&tape, &a, &b).unwrap();
        assert_eq!(y.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[2, 3]).unwrap();
        let err = matmul(&tape, &a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "got: {err}");
    }

    #[test]
    fn matmul_backward_formula() {
        // loss = sum(a.b): dL/da = 1 . b^T, dL/db = a^T . 1
        let tape = Tape::new();
        let a = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let y = matmul(&tape, &a, &b).unwrap();
        let loss = sum_all(&tape, &y).unwrap();
        backward(&tape, &loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_uniform_input() {
        let tape = Tape::new();
        let x = t64(&[3], &[2.5, 2.5, 2.5]);
        let y = softmax(&tape, &x, 0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let tape = Tape::new();
        let x = t64(&[2], &[0.0, 2f64.ln()]);
        let y = softmax(&tape, &x, 0).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_no_overflow() {
        let tape = Tape::new();
        let x = t64(&[2], &[1000.0, 0.0]);
        let y = softmax(&tape, &x, 0).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!(y.data()[1] < 1e-12);
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let tape = Tape::<f64>::new();
        let x = Tensor::zeros(&[2, 2]).unwrap();
        assert!(softmax(&tape, &x, 2).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = t64(&[2, 3], &[1.0, -4.0, 0.5, 300.0, -17.0, 2.0]);
        let y = softmax(&tape, &x, 1).unwrap();
        for row in y.data().chunks_exact(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_token_is_bias() {
        let tape = Tape::new();
        let x = t64(&[1, 4], &[3.0, 3.0, 3.0, 3.0]);
        let gain = t64(&[4], &[2.0, 2.0, 2.0, 2.0]);
        let bias = t64(&[4], &[0.5, -0.5, 1.0, 0.0]);
        let y = layer_norm(&tape, &x, &gain, &bias, 1e-5).unwrap();
        assert_eq!(y.data(), bias.data());
    }

    #[test]
    fn layer_norm_hand_case() {
        let tape = Tape::new();
        let x = t64(&[1, 3], &[1.0, 2.0, 3.0]);
        let gain = t64(&[3], &[1.0, 1.0, 1.0]);
        let bias = t64(&[3], &[0.0, 0.0, 0.0]);
        let y = layer_norm(&tape, &x, &gain, &bias, 0.0).unwrap();
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, e) in y.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        // identity matrix over channels leaves the input unchanged
        let tape = Tape::new();
        let x = t64(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let w = t64(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]);
        let y = conv2d(&tape, &x, &w, None, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_counting_case() {
        let tape = Tape::new();
        let x = Tensor::full(&[1, 3, 3], 1.0f64).unwrap();
        let w = Tensor::full(&[1, 1, 3, 3], 1.0f64).unwrap();
        let y = conv2d(&tape, &x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv2d_kernel_too_large() {
        let tape = Tape::<f64>::new();
        let x = Tensor::zeros(&[1, 2, 2]).unwrap();
        let w = Tensor::zeros(&[1, 1, 5, 5]).unwrap();
        assert!(conv2d(&tape, &x, &w, None, 1, 0).is_err());
    }

    #[test]
    fn conv2d_matches_naive_oracle() {
        // independent nested-loop oracle, same accumulation order
        fn naive(
            x: &[f64],
            (ci, h, w): (usize, usize, usize),
            wt: &[f64],
            (co, k): (usize, usize),
            stride: usize,
            pad: usize,
        ) -> Vec<f64> {
            let ho = (h + 2 * pad - k) / stride + 1;
            let wo = (w + 2 * pad - k) / stride + 1;
            let mut y = vec![0.0; co * ho * wo];
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for i in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[(i * h + iy as usize) * w + ix as usize]
                                        * wt[((o * ci + i) * k + ky) * k + kx];
                                }
                            }
                        }
                        y[(o * ho + oy) * wo + ox] = acc;
                    }
                }
            }
            y
        }

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(ci, h, w, co, k, stride, pad) in &[
            (2usize, 4usize, 4usize, 3usize, 3usize, 1usize, 1usize),
            (4, 8, 8, 2, 3, 2, 1),
            (1, 5, 7, 2, 1, 1, 0),
            (3, 6, 6, 4, 3, 1, 0),
        ] {
            let xd: Vec<f64> = (0..ci * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wd: Vec<f64> = (0..co * ci * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let tape = Tape::new();
            let x = Tensor::from_vec(&[ci, h, w], xd.clone()).unwrap();
            let wt = Tensor::from_vec(&[co, ci, k, k], wd.clone()).unwrap();
            let y = conv2d(&tape, &x, &wt, None, stride, pad).unwrap();
            let oracle = naive(&xd, (ci, h, w), &wd, (co, k), stride, pad);
            assert_eq!(y.data(), &oracle[..], "conv mismatch for {ci}x{h}x{w} k{k} s{stride} p{pad}");
        }
    }

    #[test]
    fn upsample_doubles_each_axis() {
        let tape = Tape::new();
        let x = t64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = upsample2x(&tape, &x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let loss = sum_all(&tape, &y).unwrap();
        backward(&tape, &loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0; 4]);
    }

    #[test]
    fn select_rows_scatter_adds() {
        let tape = Tape::new();
        let x = t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = select_rows(&tape, &x, &[1, 1, 0]).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let loss = sum_all(&tape, &y).unwrap();
        backward(&tape, &loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let tape = Tape::new();
        let a = t64(&[2, 2], &[1.0, 2.0, 5.0, 6.0]);
        let b = t64(&[2, 1], &[3.0, 7.0]);
        let y = concat_cols(&tape, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);
        let back = slice_cols(&tape, &y, 2, 3).unwrap();
        assert_eq!(back.data(), b.data());
    }
}
