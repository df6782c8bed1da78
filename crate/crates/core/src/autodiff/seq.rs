//! Sequence ops: symmetric dilated 1D convolution over time and scaled
//! dot-product attention.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, Ix1, Ix2, Ix3, s};

use super::{Scalar, Tape, Var};

/// Symmetric (non-causal) dilated convolution over a (T, Cin) sequence with
/// filter (k, Cin, Cout) and dilation `d`, zero-padded so the output keeps
/// length T. Tap `i` reads position `s + d*((k-1)/2 - i)`.
pub fn dilated_conv1d_forward<F: Scalar>(
    x: ArrayView2<F>,
    w: ArrayView3<F>,
    b: ArrayView1<F>,
    d: usize,
) -> Array2<F> {
    let (t, cin) = x.dim();
    let (k, cin2, cout) = w.dim();
    debug_assert_eq!(cin, cin2, "dilated conv channel mismatch");
    debug_assert!(k % 2 == 1, "kernel size must be odd");
    let center = (k - 1) / 2;
    let mut out = Array2::<F>::zeros((t, cout));
    for i in 0..k {
        let off = d as isize * (center as isize - i as isize);
        let s_lo = (-off).max(0) as usize;
        let s_hi = ((t as isize - off).min(t as isize)).max(0) as usize;
        if s_lo >= s_hi {
            continue;
        }
        let xs = x.slice(s![
            (s_lo as isize + off) as usize..(s_hi as isize + off) as usize,
            ..
        ]);
        let wi = w.index_axis(Axis(0), i);
        let prod = crate::autodiff::ops::mm(xs, wi);
        let mut dst = out.slice_mut(s![s_lo..s_hi, ..]);
        dst += &prod;
    }
    out += &b;
    out
}

/// Scaled dot-product attention over batched token sets:
/// q (B,N,Dk), k (B,M,Dk), v (B,M,Dv) -> (B,N,Dv).
///
/// Internals accumulate in f64 so the result is insensitive to key order at
/// working precision.
pub fn attention_forward<F: Scalar>(
    q: ArrayView3<F>,
    k: ArrayView3<F>,
    v: ArrayView3<F>,
) -> Array3<F> {
    let (bsz, n, dk) = q.dim();
    let (_, m, dv) = v.dim();
    debug_assert_eq!(k.dim().2, dk);
    debug_assert_eq!(k.dim().1, m);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Array3::<F>::zeros((bsz, n, dv));
    let mut weights = vec![0.0f64; m];
    let mut acc = vec![0.0f64; dv];
    for b in 0..bsz {
        let qb = q.index_axis(Axis(0), b);
        let kb = k.index_axis(Axis(0), b);
        let vb = v.index_axis(Axis(0), b);
        let mut ob = out.index_axis_mut(Axis(0), b);
        for i in 0..n {
            let qi = qb.row(i);
            let mut max_logit = f64::NEG_INFINITY;
            for (j, wj) in weights.iter_mut().enumerate() {
                let dot: f64 = qi
                    .iter()
                    .zip(kb.row(j).iter())
                    .map(|(a, b)| a.as_f64() * b.as_f64())
                    .sum();
                let logit = dot * scale;
                *wj = logit;
                if logit > max_logit {
                    max_logit = logit;
                }
            }
            let mut denom = 0.0f64;
            for wj in weights.iter_mut() {
                *wj = (*wj - max_logit).exp();
                denom += *wj;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (j, wj) in weights.iter().enumerate() {
                for (a, vv) in acc.iter_mut().zip(vb.row(j).iter()) {
                    *a += *wj * vv.as_f64();
                }
            }
            for (o, a) in ob.row_mut(i).iter_mut().zip(acc.iter()) {
                *o = F::of_f64(*a / denom);
            }
        }
    }
    out
}

/// Softmax attention probabilities, (B,N,M), matching [`attention_forward`].
pub fn attention_probs<F: Scalar>(q: ArrayView3<F>, k: ArrayView3<F>) -> Array3<F> {
    let (bsz, n, dk) = q.dim();
    let m = k.dim().1;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut probs = Array3::<F>::zeros((bsz, n, m));
    let mut weights = vec![0.0f64; m];
    for b in 0..bsz {
        let qb = q.index_axis(Axis(0), b);
        let kb = k.index_axis(Axis(0), b);
        let mut pb = probs.index_axis_mut(Axis(0), b);
        for i in 0..n {
            let qi = qb.row(i);
            let mut max_logit = f64::NEG_INFINITY;
            for (j, wj) in weights.iter_mut().enumerate() {
                let dot: f64 = qi
                    .iter()
                    .zip(kb.row(j).iter())
                    .map(|(a, b)| a.as_f64() * b.as_f64())
                    .sum();
                let logit = dot * scale;
                *wj = logit;
                if logit > max_logit {
                    max_logit = logit;
                }
            }
            let mut denom = 0.0f64;
            for wj in weights.iter_mut() {
                *wj = (*wj - max_logit).exp();
                denom += *wj;
            }
            for (p, wj) in pb.row_mut(i).iter_mut().zip(weights.iter()) {
                *p = F::of_f64(*wj / denom);
            }
        }
    }
    probs
}

impl<F: Scalar> Tape<F> {
    /// Tape node for [`dilated_conv1d_forward`]: x (T,Cin), w (k,Cin,Cout), b (Cout,).
    pub fn dilated_conv1d(&self, x: Var, w: Var, b: Var, d: usize) -> Var {
        let value = {
            let inner = self.inner.borrow();
            let xv = inner.values[x.0].view().into_dimensionality::<Ix2>().unwrap();
            let wv = inner.values[w.0].view().into_dimensionality::<Ix3>().unwrap();
            let bv = inner.values[b.0].view().into_dimensionality::<Ix1>().unwrap();
            dilated_conv1d_forward(xv, wv, bv, d).into_dyn()
        };
        self.push(
            value,
            vec![x, w, b],
            Box::new(move |args| {
                let xv = args.inputs[0].view().into_dimensionality::<Ix2>().unwrap();
                let wv = args.inputs[1].view().into_dimensionality::<Ix3>().unwrap();
                let gy = args.grad.view().into_dimensionality::<Ix2>().unwrap();
                let (t, cin) = xv.dim();
                let (k, _, cout) = wv.dim();
                let center = (k - 1) / 2;
                let mut dx = Array2::<F>::zeros((t, cin));
                let mut dw = Array3::<F>::zeros((k, cin, cout));
                for i in 0..k {
                    let off = d as isize * (center as isize - i as isize);
                    let s_lo = (-off).max(0) as usize;
                    let s_hi = ((t as isize - off).min(t as isize)).max(0) as usize;
                    if s_lo >= s_hi {
                        continue;
                    }
                    let x_range = (s_lo as isize + off) as usize..(s_hi as isize + off) as usize;
                    let xs = xv.slice(s![x_range.clone(), ..]);
                    let gys = gy.slice(s![s_lo..s_hi, ..]);
                    let wi = wv.index_axis(Axis(0), i);
                    // dW[i] = xs^T * gys
                    let dwi = crate::autodiff::ops::mm(xs.t(), gys);
                    let mut dst = dw.index_axis_mut(Axis(0), i);
                    dst += &dwi;
                    // dx rows s+off accumulate gy[s] * W[i]^T
                    let gx = crate::autodiff::ops::mm(gys, wi.t());
                    let mut dxs = dx.slice_mut(s![x_range, ..]);
                    dxs += &gx;
                }
                let mut db = Array1::<F>::zeros(cout);
                for (ci, col) in gy.axis_iter(Axis(1)).enumerate() {
                    db[ci] = col.sum();
                }
                vec![
                    Some(dx.into_dyn()),
                    Some(dw.into_dyn()),
                    Some(db.into_dyn()),
                ]
            }),
        )
    }

    /// Tape node for batched scaled dot-product attention.
    pub fn attention(&self, q: Var, k: Var, v: Var) -> Var {
        let value = {
            let inner = self.inner.borrow();
            let qv = inner.values[q.0].view().into_dimensionality::<Ix3>().unwrap();
            let kv = inner.values[k.0].view().into_dimensionality::<Ix3>().unwrap();
            let vv = inner.values[v.0].view().into_dimensionality::<Ix3>().unwrap();
            attention_forward(qv, kv, vv).into_dyn()
        };
        self.push(
            value,
            vec![q, k, v],
            Box::new(|args| {
                let qv = args.inputs[0].view().into_dimensionality::<Ix3>().unwrap();
                let kv = args.inputs[1].view().into_dimensionality::<Ix3>().unwrap();
                let vv = args.inputs[2].view().into_dimensionality::<Ix3>().unwrap();
                let gy = args.grad.view().into_dimensionality::<Ix3>().unwrap();
                let (bsz, n, dk) = qv.dim();
                let (_, m, dv) = vv.dim();
                let scale = F::of_f64(1.0 / (dk as f64).sqrt());
                let probs = attention_probs(qv, kv);
                let mut dq = Array3::<F>::zeros((bsz, n, dk));
                let mut dkk = Array3::<F>::zeros((bsz, m, dk));
                let mut dvv = Array3::<F>::zeros((bsz, m, dv));
                for b in 0..bsz {
                    let p = probs.index_axis(Axis(0), b);
                    let g = gy.index_axis(Axis(0), b);
                    let vb = vv.index_axis(Axis(0), b);
                    let qb = qv.index_axis(Axis(0), b);
                    let kb = kv.index_axis(Axis(0), b);
                    // dV = P^T * dY
                    let dv_b = p.t().dot(&g);
                    dvv.index_axis_mut(Axis(0), b).assign(&dv_b);
                    // dP = dY * V^T, softmax backward rows
                    let dp = g.dot(&vb.t());
                    let mut ds = Array2::<F>::zeros((n, m));
                    for i in 0..n {
                        let mut dot = F::zero();
                        for j in 0..m {
                            dot = dot + dp[[i, j]] * p[[i, j]];
                        }
                        for j in 0..m {
                            ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
                        }
                    }
                    let dq_b = ds.dot(&kb);
                    dq.index_axis_mut(Axis(0), b).assign(&dq_b);
                    let dk_b = ds.t().dot(&qb);
                    dkk.index_axis_mut(Axis(0), b).assign(&dk_b);
                }
                vec![
                    Some(dq.into_dyn()),
                    Some(dkk.into_dyn()),
                    Some(dvv.into_dyn()),
                ]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::{Tape, Var};
    use crate::gradcheck::fd_check;

    #[test]
    fn dilated_conv_grads_match_fd() {
        for d in [1usize, 2, 4] {
            fd_check(
                &[vec![9, 3], vec![3, 3, 2], vec![2]],
                move |tape, vars| {
                    let y = tape.dilated_conv1d(vars[0], vars[1], vars[2], d);
                    let r = tape.tanh(y);
                    tape.mean(r)
                },
                43 + d as u64,
                1e-5,
            );
        }
    }

    #[test]
    fn attention_grads_match_fd() {
        fd_check(
            &[vec![2, 3, 4], vec![2, 5, 4], vec![2, 5, 3]],
            |tape, vars| {
                let y = tape.attention(vars[0], vars[1], vars[2]);
                let sq = tape.mul(y, y);
                tape.mean(sq)
            },
            47,
            1e-5,
        );
    }
}
