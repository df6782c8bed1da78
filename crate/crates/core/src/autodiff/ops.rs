//! Elementwise, linear-algebra, reduction, and shape ops.

use ndarray::{concatenate, Array2, ArrayD, ArrayView2, Axis, Ix1, Ix2, IxDyn, Slice};

use super::{Scalar, Tape, Var};
use crate::threads::maybe_par_map;

/// Column-block size for the parallel GEMM path. The split is a fixed
/// function of the shapes, so results do not depend on the thread count.
const MM_COL_BLOCK: usize = 448;
/// Work threshold (m*k*n) below which the plain single GEMM runs.
const MM_PAR_THRESHOLD: usize = 8_000_000;

/// Matrix product with a deterministic column-blocked parallel path for
/// large shapes.
pub(crate) fn mm<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    let (m, k) = a.dim();
    let n = b.dim().1;
    if m * k * n < MM_PAR_THRESHOLD || n < 2 * MM_COL_BLOCK {
        return a.dot(&b);
    }
    let ranges: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(MM_COL_BLOCK)
        .map(|lo| lo..(lo + MM_COL_BLOCK).min(n))
        .collect();
    let parts = maybe_par_map(ranges.clone(), |r| {
        a.dot(&b.slice(ndarray::s![.., r]))
    });
    let mut out = Array2::<F>::zeros((m, n));
    for (r, part) in ranges.into_iter().zip(parts) {
        out.slice_mut(ndarray::s![.., r]).assign(&part);
    }
    out
}

impl<F: Scalar> Tape<F> {
    /// Elementwise `a + b` (same shape).
    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = {
            let inner = self.inner.borrow();
            &inner.values[a.0] + &inner.values[b.0]
        };
        self.push(
            v,
            vec![a, b],
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.clone())]),
        )
    }

    /// Elementwise `a - b` (same shape).
    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = {
            let inner = self.inner.borrow();
            &inner.values[a.0] - &inner.values[b.0]
        };
        self.push(
            v,
            vec![a, b],
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.mapv(|g| -g))]),
        )
    }

    /// Elementwise `a * b` (same shape).
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = {
            let inner = self.inner.borrow();
            &inner.values[a.0] * &inner.values[b.0]
        };
        self.push(
            v,
            vec![a, b],
            Box::new(|args| {
                vec![
                    Some(args.grad * args.inputs[1]),
                    Some(args.grad * args.inputs[0]),
                ]
            }),
        )
    }

    /// Elementwise `a / b` (same shape). `b` must be nonzero.
    pub fn div(&self, a: Var, b: Var) -> Var {
        let v = {
            let inner = self.inner.borrow();
            &inner.values[a.0] / &inner.values[b.0]
        };
        self.push(
            v,
            vec![a, b],
            Box::new(|args| {
                let ga = args.grad / args.inputs[1];
                let mut gb = args.grad * args.inputs[0];
                gb.zip_mut_with(args.inputs[1], |g, &bv| *g = -*g / (bv * bv));
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// `a * c` for a fixed scalar.
    pub fn scale(&self, a: Var, c: F) -> Var {
        let v = self.inner.borrow().values[a.0].mapv(|x| x * c);
        self.push(
            v,
            vec![a],
            Box::new(move |args| vec![Some(args.grad.mapv(|g| g * c))]),
        )
    }

    /// Row-broadcast bias add: `a` of shape (..., D) plus `b` of shape (D,).
    pub fn add_bias(&self, a: Var, b: Var) -> Var {
        let v = {
            let inner = self.inner.borrow();
            let bv = inner.values[b.0].view().into_dimensionality::<Ix1>().unwrap();
            &inner.values[a.0] + &bv
        };
        self.push(
            v,
            vec![a, b],
            Box::new(|args| {
                let d = args.inputs[1].len();
                let g2 = args
                    .grad
                    .view()
                    .into_shape_with_order((args.grad.len() / d, d))
                    .unwrap();
                let gb = g2.sum_axis(Axis(0));
                vec![Some(args.grad.clone()), Some(gb.into_dyn())]
            }),
        )
    }

    /// Channel-broadcast bias add for image batches: `a` (N,C,H,W) plus `b` (C,).
    pub fn add_bias_channels(&self, a: Var, b: Var) -> Var {
        let v = {
            let inner = self.inner.borrow();
            let av = &inner.values[a.0];
            let bv = &inner.values[b.0];
            let mut out = av.clone();
            let c = bv.len();
            for (ci, mut lane) in out.axis_iter_mut(Axis(1)).enumerate() {
                debug_assert!(ci < c);
                let bc = bv[[ci]];
                lane.mapv_inplace(|x| x + bc);
            }
            out
        };
        self.push(
            v,
            vec![a, b],
            Box::new(|args| {
                let c = args.inputs[1].len();
                let mut gb = ArrayD::zeros(IxDyn(&[c]));
                for (ci, lane) in args.grad.axis_iter(Axis(1)).enumerate() {
                    gb[[ci]] = lane.sum();
                }
                vec![Some(args.grad.clone()), Some(gb)]
            }),
        )
    }

    /// Column-broadcast multiply: `a` of shape (N, D) times `w` of shape (D,).
    pub fn scale_cols(&self, a: Var, w: Var) -> Var {
        let v = {
            let inner = self.inner.borrow();
            let wv = inner.values[w.0].view().into_dimensionality::<Ix1>().unwrap();
            &inner.values[a.0] * &wv
        };
        self.push(
            v,
            vec![a, w],
            Box::new(|args| {
                let wv = args.inputs[1].view().into_dimensionality::<Ix1>().unwrap();
                let ga = args.grad * &wv;
                let d = wv.len();
                let a2 = args.inputs[0]
                    .view()
                    .into_shape_with_order((args.inputs[0].len() / d, d))
                    .unwrap();
                let g2 = args
                    .grad
                    .view()
                    .into_shape_with_order((args.grad.len() / d, d))
                    .unwrap();
                let gw = (&a2 * &g2).sum_axis(Axis(0));
                vec![Some(ga), Some(gw.into_dyn())]
            }),
        )
    }

    /// Matrix product of a (N,K) and b (K,M).
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = {
            let inner = self.inner.borrow();
            let av = inner.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
            let bv = inner.values[b.0].view().into_dimensionality::<Ix2>().unwrap();
            mm(av, bv).into_dyn()
        };
        self.push(
            v,
            vec![a, b],
            Box::new(|args| {
                let g = args.grad.view().into_dimensionality::<Ix2>().unwrap();
                let av = args.inputs[0].view().into_dimensionality::<Ix2>().unwrap();
                let bv = args.inputs[1].view().into_dimensionality::<Ix2>().unwrap();
                let ga = mm(g, bv.t()).into_dyn();
                let gb = mm(av.t(), g).into_dyn();
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.inner.borrow().values[a.0].mapv(|x| x.max(F::zero()));
        self.push(
            v,
            vec![a],
            Box::new(|args| {
                let mut g = args.grad.clone();
                g.zip_mut_with(args.inputs[0], |gv, &x| {
                    if x <= F::zero() {
                        *gv = F::zero();
                    }
                });
                vec![Some(g)]
            }),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.inner.borrow().values[a.0]
            .mapv(|x| F::one() / (F::one() + (-x).exp()));
        self.push(
            v,
            vec![a],
            Box::new(|args| {
                let mut g = args.grad.clone();
                g.zip_mut_with(args.out, |gv, &y| *gv = *gv * y * (F::one() - y));
                vec![Some(g)]
            }),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let v = self.inner.borrow().values[a.0].mapv(|x| x.tanh());
        self.push(
            v,
            vec![a],
            Box::new(|args| {
                let mut g = args.grad.clone();
                g.zip_mut_with(args.out, |gv, &y| *gv = *gv * (F::one() - y * y));
                vec![Some(g)]
            }),
        )
    }

    /// Natural log. Inputs must be strictly positive (use [`Tape::clamp`] first).
    pub fn ln(&self, a: Var) -> Var {
        let v = self.inner.borrow().values[a.0].mapv(|x| x.ln());
        self.push(
            v,
            vec![a],
            Box::new(|args| {
                let mut g = args.grad.clone();
                g.zip_mut_with(args.inputs[0], |gv, &x| *gv = *gv / x);
                vec![Some(g)]
            }),
        )
    }

    pub fn abs(&self, a: Var) -> Var {
        let v = self.inner.borrow().values[a.0].mapv(|x| x.abs());
        self.push(
            v,
            vec![a],
            Box::new(|args| {
                let mut g = args.grad.clone();
                g.zip_mut_with(args.inputs[0], |gv, &x| {
                    *gv = if x > F::zero() {
                        *gv
                    } else if x < F::zero() {
                        -*gv
                    } else {
                        F::zero()
                    }
                });
                vec![Some(g)]
            }),
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes through strictly inside the interval.
    pub fn clamp(&self, a: Var, lo: F, hi: F) -> Var {
        let v = self.inner.borrow().values[a.0].mapv(|x| x.max(lo).min(hi));
        self.push(
            v,
            vec![a],
            Box::new(move |args| {
                let mut g = args.grad.clone();
                g.zip_mut_with(args.inputs[0], |gv, &x| {
                    if x <= lo || x >= hi {
                        *gv = F::zero();
                    }
                });
                vec![Some(g)]
            }),
        )
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.inner.borrow().values[a.0].sum());
        self.push(
            v,
            vec![a],
            Box::new(|args| {
                let g = *args.grad.iter().next().expect("scalar grad");
                vec![Some(ArrayD::from_elem(args.inputs[0].raw_dim(), g))]
            }),
        )
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean(&self, a: Var) -> Var {
        let n = self.inner.borrow().values[a.0].len();
        let s = self.sum(a);
        self.scale(s, F::of_f64(1.0 / n as f64))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let v = {
            let inner = self.inner.borrow();
            inner.values[a.0]
                .clone()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape: element count mismatch")
        };
        self.push(
            v,
            vec![a],
            Box::new(|args| {
                let g = crate::autodiff::standardize(args.grad.clone())
                    .into_shape_with_order(args.inputs[0].raw_dim())
                    .unwrap();
                vec![Some(g)]
            }),
        )
    }

    /// Concatenate along `axis`.
    pub fn concat(&self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let v = {
            let inner = self.inner.borrow();
            let views: Vec<_> = parts.iter().map(|p| inner.values[p.0].view()).collect();
            concatenate(Axis(axis), &views).expect("concat: incompatible shapes")
        };
        self.push(
            v,
            parts.to_vec(),
            Box::new(move |args| {
                let mut out = Vec::with_capacity(args.inputs.len());
                let mut offset = 0;
                for inp in args.inputs {
                    let w = inp.shape()[axis];
                    let g = args
                        .grad
                        .slice_axis(Axis(axis), Slice::from(offset..offset + w))
                        .to_owned();
                    out.push(Some(g));
                    offset += w;
                }
                out
            }),
        )
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.inner.borrow().values[a.0]
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(
            v,
            vec![a],
            Box::new(move |args| {
                let mut g = ArrayD::zeros(args.inputs[0].raw_dim());
                g.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(args.grad);
                vec![Some(g)]
            }),
        )
    }

    /// Tile a tensor with leading axis 1 to `n` along axis 0.
    pub fn repeat_axis0(&self, a: Var, n: usize) -> Var {
        let v = {
            let inner = self.inner.borrow();
            let av = &inner.values[a.0];
            assert_eq!(av.shape()[0], 1, "repeat_axis0 expects leading axis of 1");
            let views: Vec<_> = (0..n).map(|_| av.view()).collect();
            concatenate(Axis(0), &views).unwrap()
        };
        self.push(
            v,
            vec![a],
            Box::new(|args| {
                let g = args.grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![Some(g)]
            }),
        )
    }
}
