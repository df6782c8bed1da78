//! Image-shaped ops: 2D convolution, transposed convolution, max pooling,
//! and batch normalization. All batched over a leading `N` axis with layout
//! (N, C, H, W).
//!
//! Forward and backward GEMMs run per sample (optionally in parallel); all
//! cross-sample accumulation happens sequentially in sample order, so results
//! do not depend on thread scheduling.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis, Ix1, Ix4};

use super::{Scalar, Tape, Var};
use crate::threads::maybe_par_map;

/// Output spatial size of one convolution axis.
fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Valid output-column range for one kernel tap: all `ow` with
/// `0 <= ow*stride + k - pad < size`.
fn tap_range(size: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let k = k as isize;
    let pad = pad as isize;
    let stride = stride as isize;
    let lo = (pad - k + stride - 1).div_euclid(stride).max(0);
    let hi = ((size as isize + pad - k + stride - 1).div_euclid(stride)).clamp(0, out as isize);
    (lo as usize, hi.max(lo) as usize)
}

/// Gather sliding (kh,kw) windows of `x` (C,H,W) into a (C*kh*kw, Ho*Wo) matrix.
pub fn im2col<F: Scalar>(
    x: ArrayView3<F>,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let ho = conv_out(h, kh, sh, ph);
    let wo = conv_out(w, kw, sw, pw);
    let mut cols = Array2::<F>::zeros((c * kh * kw, ho * wo));
    let xs = x.to_slice().expect("im2col expects a contiguous input view");
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..kh {
            let (oh_lo, oh_hi) = tap_range(h, ho, ki, sh, ph);
            for kj in 0..kw {
                let row_base = ((ci * kh + ki) * kw + kj) * (ho * wo);
                let (ow_lo, ow_hi) = tap_range(w, wo, kj, sw, pw);
                if ow_lo >= ow_hi {
                    continue;
                }
                for oh in oh_lo..oh_hi {
                    let ih = (oh * sh + ki) - ph;
                    let src_row = ci * h * w + ih * w;
                    let dst_base = row_base + oh * wo;
                    if sw == 1 {
                        let iw0 = ow_lo + kj - pw;
                        let n = ow_hi - ow_lo;
                        cs[dst_base + ow_lo..dst_base + ow_lo + n]
                            .copy_from_slice(&xs[src_row + iw0..src_row + iw0 + n]);
                    } else {
                        for ow in ow_lo..ow_hi {
                            cs[dst_base + ow] = xs[src_row + ow * sw + kj - pw];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a (C,H,W) image.
fn col2im<F: Scalar>(
    cols: ArrayView2<F>,
    c: usize,
    h: usize,
    w: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Array3<F> {
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let ho = conv_out(h, kh, sh, ph);
    let wo = conv_out(w, kw, sw, pw);
    debug_assert_eq!(cols.dim(), (c * kh * kw, ho * wo));
    let mut img = Array3::<F>::zeros((c, h, w));
    let cv = cols.to_slice().expect("col2im expects a contiguous view");
    let is = img.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..kh {
            let (oh_lo, oh_hi) = tap_range(h, ho, ki, sh, ph);
            for kj in 0..kw {
                let row_base = ((ci * kh + ki) * kw + kj) * (ho * wo);
                let (ow_lo, ow_hi) = tap_range(w, wo, kj, sw, pw);
                if ow_lo >= ow_hi {
                    continue;
                }
                for oh in oh_lo..oh_hi {
                    let ih = (oh * sh + ki) - ph;
                    let dst_row = ci * h * w + ih * w;
                    let src_base = row_base + oh * wo;
                    if sw == 1 {
                        let iw0 = ow_lo + kj - pw;
                        for (d, s) in is[dst_row + iw0..dst_row + iw0 + (ow_hi - ow_lo)]
                            .iter_mut()
                            .zip(&cv[src_base + ow_lo..src_base + ow_hi])
                        {
                            *d = *d + *s;
                        }
                    } else {
                        for ow in ow_lo..ow_hi {
                            let dst = dst_row + ow * sw + kj - pw;
                            is[dst] = is[dst] + cv[src_base + ow];
                        }
                    }
                }
            }
        }
    }
    img
}

fn as4<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView4<'_, F> {
    a.view().into_dimensionality::<Ix4>().unwrap()
}

/// Batch stats emitted by a training-mode batch norm, for running-average updates.
#[derive(Debug, Clone)]
pub struct BnStats<F> {
    pub mean: Array1<F>,
    /// Biased batch variance (as used for normalization).
    pub var: Array1<F>,
    /// Elements averaged per channel.
    pub count: usize,
}

impl<F: Scalar> Tape<F> {
    /// 2D convolution: x (N,Cin,H,W), w (Cout,Cin,kh,kw), b (Cout,).
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Var {
        let value = {
            let inner = self.inner.borrow();
            let xv = as4(&inner.values[x.0]);
            let wv = as4(&inner.values[w.0]);
            let bv = inner.values[b.0].view().into_dimensionality::<Ix1>().unwrap();
            let (n, cin, h, wdt) = xv.dim();
            let (cout, cin2, kh, kw) = wv.dim();
            assert_eq!(cin, cin2, "conv2d channel mismatch");
            let ho = conv_out(h, kh, stride.0, pad.0);
            let wo = conv_out(wdt, kw, stride.1, pad.1);
            let w2 = wv.into_shape_with_order((cout, cin * kh * kw)).unwrap();
            let samples: Vec<Array2<F>> = maybe_par_map((0..n).collect::<Vec<_>>(), |i| {
                let cols = im2col(xv.index_axis(Axis(0), i), (kh, kw), stride, pad);
                w2.dot(&cols)
            });
            let mut out = ndarray::Array4::<F>::zeros((n, cout, ho, wo));
            for (i, y) in samples.into_iter().enumerate() {
                let y3 = y.into_shape_with_order((cout, ho, wo)).unwrap();
                out.index_axis_mut(Axis(0), i).assign(&y3);
            }
            for (ci, mut lane) in out.axis_iter_mut(Axis(1)).enumerate() {
                let bc = bv[ci];
                lane.mapv_inplace(|v| v + bc);
            }
            out.into_dyn()
        };
        self.push(
            value,
            vec![x, w, b],
            Box::new(move |args| {
                let xv = as4(args.inputs[0]);
                let wv = as4(args.inputs[1]);
                let gy = as4(args.grad);
                let (n, cin, h, wdt) = xv.dim();
                let (cout, _, kh, kw) = wv.dim();
                let (_, _, ho, wo) = gy.dim();
                let w2 = wv.into_shape_with_order((cout, cin * kh * kw)).unwrap();

                let per_sample: Vec<(Array3<F>, Array2<F>)> =
                    maybe_par_map((0..n).collect::<Vec<_>>(), |i| {
                        let gy2 = gy
                            .index_axis(Axis(0), i)
                            .into_shape_with_order((cout, ho * wo))
                            .unwrap();
                        let cols = im2col(xv.index_axis(Axis(0), i), (kh, kw), stride, pad);
                        let dw_i = gy2.dot(&cols.t());
                        let dcols = w2.t().dot(&gy2);
                        let dx_i = col2im(dcols.view(), cin, h, wdt, (kh, kw), stride, pad);
                        (dx_i, dw_i)
                    });
                let mut dx = ndarray::Array4::<F>::zeros(xv.raw_dim());
                let mut dw = Array2::<F>::zeros((cout, cin * kh * kw));
                for (i, (dx_i, dw_i)) in per_sample.into_iter().enumerate() {
                    dx.index_axis_mut(Axis(0), i).assign(&dx_i);
                    dw += &dw_i;
                }
                let mut db = Array1::<F>::zeros(cout);
                for (ci, lane) in gy.axis_iter(Axis(1)).enumerate() {
                    db[ci] = lane.sum();
                }
                vec![
                    Some(dx.into_dyn()),
                    Some(
                        dw.into_shape_with_order((cout, cin, kh, kw))
                            .unwrap()
                            .into_dyn(),
                    ),
                    Some(db.into_dyn()),
                ]
            }),
        )
    }

    /// Transposed 2D convolution with square kernel: x (N,Cin,H,W),
    /// w (Cin,Cout,k,k), b (Cout,). Output size is `(H-1)*stride - 2*pad + k`.
    pub fn conv_transpose2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let st = (stride, stride);
        let pd = (pad, pad);
        let value = {
            let inner = self.inner.borrow();
            let xv = as4(&inner.values[x.0]);
            let wv = as4(&inner.values[w.0]);
            let bv = inner.values[b.0].view().into_dimensionality::<Ix1>().unwrap();
            let (n, cin, h, wdt) = xv.dim();
            let (cin2, cout, k, _) = wv.dim();
            assert_eq!(cin, cin2, "conv_transpose2d channel mismatch");
            let ho = (h - 1) * stride + k - 2 * pad;
            let wo = (wdt - 1) * stride + k - 2 * pad;
            let wr = wv.into_shape_with_order((cin, cout * k * k)).unwrap();
            let samples: Vec<Array3<F>> = maybe_par_map((0..n).collect::<Vec<_>>(), |i| {
                let x2 = xv
                    .index_axis(Axis(0), i)
                    .into_shape_with_order((cin, h * wdt))
                    .unwrap();
                let cols = wr.t().dot(&x2);
                col2im(cols.view(), cout, ho, wo, (k, k), st, pd)
            });
            let mut out = ndarray::Array4::<F>::zeros((n, cout, ho, wo));
            for (i, y) in samples.into_iter().enumerate() {
                out.index_axis_mut(Axis(0), i).assign(&y);
            }
            for (ci, mut lane) in out.axis_iter_mut(Axis(1)).enumerate() {
                let bc = bv[ci];
                lane.mapv_inplace(|v| v + bc);
            }
            out.into_dyn()
        };
        self.push(
            value,
            vec![x, w, b],
            Box::new(move |args| {
                let xv = as4(args.inputs[0]);
                let wv = as4(args.inputs[1]);
                let gy = as4(args.grad);
                let (n, cin, h, wdt) = xv.dim();
                let (_, cout, k, _) = wv.dim();
                let wr = wv.into_shape_with_order((cin, cout * k * k)).unwrap();

                let per_sample: Vec<(Array2<F>, Array2<F>)> =
                    maybe_par_map((0..n).collect::<Vec<_>>(), |i| {
                        // dcols shares the im2col geometry over the output grad.
                        let dcols = im2col(gy.index_axis(Axis(0), i), (k, k), st, pd);
                        let x2 = xv
                            .index_axis(Axis(0), i)
                            .into_shape_with_order((cin, h * wdt))
                            .unwrap();
                        let dx_i = wr.dot(&dcols);
                        let dw_i = x2.dot(&dcols.t());
                        (dx_i, dw_i)
                    });
                let mut dx = ndarray::Array4::<F>::zeros(xv.raw_dim());
                let mut dw = Array2::<F>::zeros((cin, cout * k * k));
                for (i, (dx_i, dw_i)) in per_sample.into_iter().enumerate() {
                    let dx3 = dx_i.into_shape_with_order((cin, h, wdt)).unwrap();
                    dx.index_axis_mut(Axis(0), i).assign(&dx3);
                    dw += &dw_i;
                }
                let mut db = Array1::<F>::zeros(cout);
                for (ci, lane) in gy.axis_iter(Axis(1)).enumerate() {
                    db[ci] = lane.sum();
                }
                vec![
                    Some(dx.into_dyn()),
                    Some(
                        dw.into_shape_with_order((cin, cout, k, k))
                            .unwrap()
                            .into_dyn(),
                    ),
                    Some(db.into_dyn()),
                ]
            }),
        )
    }

    /// Max pooling with square window `k` and stride `k`. Ties resolve to the
    /// first maximum in scan order, in forward and backward alike.
    pub fn maxpool2d(&self, x: Var, k: usize) -> Var {
        let value = {
            let inner = self.inner.borrow();
            let xv = as4(&inner.values[x.0]);
            let (n, c, h, w) = xv.dim();
            let (ho, wo) = (h / k, w / k);
            let xs = xv.to_slice().expect("maxpool expects contiguous input");
            let mut out = ndarray::Array4::<F>::zeros((n, c, ho, wo));
            let os = out.as_slice_mut().unwrap();
            for plane in 0..n * c {
                let src = plane * h * w;
                let dst = plane * ho * wo;
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut best = xs[src + oh * k * w + ow * k];
                        for dh in 0..k {
                            let row = src + (oh * k + dh) * w + ow * k;
                            for v in &xs[row..row + k] {
                                if *v > best {
                                    best = *v;
                                }
                            }
                        }
                        os[dst + oh * wo + ow] = best;
                    }
                }
            }
            out.into_dyn()
        };
        self.push(
            value,
            vec![x],
            Box::new(move |args| {
                let xv = as4(args.inputs[0]);
                let gy = as4(args.grad);
                let (n, c, h, w) = xv.dim();
                let (ho, wo) = (h / k, w / k);
                let xs = xv.to_slice().expect("maxpool expects contiguous input");
                let gs = gy.to_slice().expect("maxpool expects contiguous gradient");
                let mut dx = ndarray::Array4::<F>::zeros((n, c, h, w));
                let ds = dx.as_slice_mut().unwrap();
                for plane in 0..n * c {
                    let src = plane * h * w;
                    let gsrc = plane * ho * wo;
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let mut best = xs[src + oh * k * w + ow * k];
                            let mut arg = src + oh * k * w + ow * k;
                            for dh in 0..k {
                                let row = src + (oh * k + dh) * w + ow * k;
                                for (dw, v) in xs[row..row + k].iter().enumerate() {
                                    if *v > best {
                                        best = *v;
                                        arg = row + dw;
                                    }
                                }
                            }
                            ds[arg] = ds[arg] + gs[gsrc + oh * wo + ow];
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Batch normalization over (N,H,W) per channel.
    ///
    /// In training mode normalizes with batch statistics and returns them so
    /// the caller can update running averages; in eval mode uses the provided
    /// running statistics, which are captured as constants (no gradient).
    pub fn batchnorm2d(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array1<F>,
        running_var: &Array1<F>,
        training: bool,
        eps: F,
    ) -> (Var, Option<BnStats<F>>) {
        let (value, stats) = {
            let inner = self.inner.borrow();
            let xv = as4(&inner.values[x.0]);
            let gv = inner.values[gamma.0].view().into_dimensionality::<Ix1>().unwrap();
            let bv = inner.values[beta.0].view().into_dimensionality::<Ix1>().unwrap();
            let (n, c, h, w) = xv.dim();
            let count = n * h * w;
            let (mean, var) = if training {
                let mut mean = Array1::<F>::zeros(c);
                let mut var = Array1::<F>::zeros(c);
                for ci in 0..c {
                    let lane = xv.index_axis(Axis(1), ci);
                    let m = lane.sum() / F::of_f64(count as f64);
                    mean[ci] = m;
                    let mut v = F::zero();
                    for val in lane.iter() {
                        let d = *val - m;
                        v = v + d * d;
                    }
                    var[ci] = v / F::of_f64(count as f64);
                }
                (mean, var)
            } else {
                (running_mean.clone(), running_var.clone())
            };
            let mut out = ndarray::Array4::<F>::zeros((n, c, h, w));
            for ci in 0..c {
                let inv = F::one() / (var[ci] + eps).sqrt();
                let (m, g, b) = (mean[ci], gv[ci], bv[ci]);
                let lane = xv.index_axis(Axis(1), ci);
                let mut out_lane = out.index_axis_mut(Axis(1), ci);
                out_lane.assign(&lane.mapv(|v| (v - m) * inv * g + b));
            }
            let stats = training.then(|| BnStats {
                mean: mean.clone(),
                var: var.clone(),
                count,
            });
            (out.into_dyn(), stats)
        };
        let rm = running_mean.clone();
        let rv = running_var.clone();
        let var = self.push(
            value,
            vec![x, gamma, beta],
            Box::new(move |args| {
                let xv = as4(args.inputs[0]);
                let gv = args.inputs[1]
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                let gy = as4(args.grad);
                let (n, c, h, w) = xv.dim();
                let count = F::of_f64((n * h * w) as f64);
                let mut dx = ndarray::Array4::<F>::zeros((n, c, h, w));
                let mut dgamma = Array1::<F>::zeros(c);
                let mut dbeta = Array1::<F>::zeros(c);
                for ci in 0..c {
                    let lane = xv.index_axis(Axis(1), ci);
                    let glane = gy.index_axis(Axis(1), ci);
                    let (m, v) = if training {
                        let m = lane.sum() / count;
                        let mut vv = F::zero();
                        for val in lane.iter() {
                            let d = *val - m;
                            vv = vv + d * d;
                        }
                        (m, vv / count)
                    } else {
                        (rm[ci], rv[ci])
                    };
                    let inv = F::one() / (v + eps).sqrt();
                    let mut sum_gy = F::zero();
                    let mut sum_gy_xhat = F::zero();
                    for (val, g) in lane.iter().zip(glane.iter()) {
                        let xhat = (*val - m) * inv;
                        sum_gy = sum_gy + *g;
                        sum_gy_xhat = sum_gy_xhat + *g * xhat;
                    }
                    dbeta[ci] = sum_gy;
                    dgamma[ci] = sum_gy_xhat;
                    let gch = gv[ci];
                    let mut out_lane = dx.index_axis_mut(Axis(1), ci);
                    if training {
                        let mean_gy = sum_gy / count;
                        let mean_gy_xhat = sum_gy_xhat / count;
                        for (o, (val, g)) in out_lane
                            .iter_mut()
                            .zip(lane.iter().zip(glane.iter()))
                        {
                            let xhat = (*val - m) * inv;
                            *o = gch * inv * (*g - mean_gy - xhat * mean_gy_xhat);
                        }
                    } else {
                        for (o, g) in out_lane.iter_mut().zip(glane.iter()) {
                            *o = gch * inv * *g;
                        }
                    }
                }
                vec![
                    Some(dx.into_dyn()),
                    Some(dgamma.into_dyn()),
                    Some(dbeta.into_dyn()),
                ]
            }),
        );
        (var, stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_check, fd_check_range};
    use ndarray::{Array4, IxDyn};

    #[test]
    fn conv2d_matches_direct_summation() {
        // 1x1 input channel, known 3x3 kernel, stride 1, pad 1.
        let tape: Tape<f64> = Tape::new();
        let x = Array4::from_shape_fn((1, 1, 3, 3), |(_, _, i, j)| (i * 3 + j) as f64);
        let mut w = Array4::<f64>::zeros((1, 1, 3, 3));
        w[[0, 0, 1, 1]] = 1.0; // identity kernel
        let xv = tape.leaf(x.clone().into_dyn());
        let wv = tape.leaf(w.into_dyn());
        let bv = tape.leaf(ArrayD::zeros(IxDyn(&[1])));
        let y = tape.conv2d(xv, wv, bv, (1, 1), (1, 1));
        assert_eq!(tape.value(y), x.into_dyn());
    }

    #[test]
    fn conv2d_grads_match_fd() {
        fd_check(
            &[vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
            |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], vars[2], (2, 2), (1, 1));
                let r = tape.relu(y);
                tape.mean(r)
            },
            31,
            1e-5,
        );
    }

    #[test]
    fn rectangular_conv2d_grads_match_fd() {
        // Asymmetric kernel, stride, and padding as used by the audio nets.
        fd_check(
            &[vec![2, 1, 6, 7], vec![4, 1, 3, 1], vec![4]],
            |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], vars[2], (2, 1), (1, 0));
                let t = tape.tanh(y);
                tape.mean(t)
            },
            33,
            1e-5,
        );
    }

    #[test]
    fn conv_transpose2d_upsamples_and_matches_fd() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[1, 2, 4, 4])));
        let w = tape.leaf(ArrayD::zeros(IxDyn(&[2, 3, 4, 4])));
        let b = tape.leaf(ArrayD::zeros(IxDyn(&[3])));
        let y = tape.conv_transpose2d(x, w, b, 2, 1);
        assert_eq!(tape.shape(y), vec![1, 3, 8, 8]);

        fd_check(
            &[vec![2, 2, 3, 3], vec![2, 3, 4, 4], vec![3]],
            |tape, vars| {
                let y = tape.conv_transpose2d(vars[0], vars[1], vars[2], 2, 1);
                let s = tape.sigmoid(y);
                tape.mean(s)
            },
            37,
            1e-5,
        );
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let tape: Tape<f64> = Tape::new();
        let mut x = Array4::<f64>::zeros((1, 1, 2, 2));
        x[[0, 0, 1, 0]] = 5.0;
        let xv = tape.leaf(x.into_dyn());
        let y = tape.maxpool2d(xv, 2);
        assert_eq!(tape.value(y)[[0, 0, 0, 0]], 5.0);
        let s = tape.sum(y);
        let grads = tape.backward(s);
        let gx = grads.get(xv).unwrap();
        assert_eq!(gx[[0, 0, 1, 0]], 1.0);
        assert_eq!(gx[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn batchnorm_train_and_eval_grads_match_fd() {
        let rm = Array1::from_vec(vec![0.1, -0.2]);
        let rv = Array1::from_vec(vec![0.9, 1.2]);
        for training in [true, false] {
            let rm = rm.clone();
            let rv = rv.clone();
            fd_check_range(
                &[vec![3, 2, 4, 4], vec![2], vec![2]],
                -1.0,
                1.0,
                move |tape, vars| {
                    let (y, _) = tape.batchnorm2d(
                        vars[0], vars[1], vars[2], &rm, &rv, training, 1e-5,
                    );
                    let t = tape.tanh(y);
                    tape.mean(t)
                },
                41,
                1e-4,
            );
        }
    }

    #[test]
    fn batchnorm_eval_is_per_sample_independent() {
        let tape: Tape<f64> = Tape::new();
        let x = crate::gradcheck::random_tensors(&[vec![4, 2, 3, 3]], -1.0, 1.0, 5)
            .pop()
            .unwrap();
        let gamma = tape.leaf(ArrayD::from_elem(IxDyn(&[2]), 1.3));
        let beta = tape.leaf(ArrayD::from_elem(IxDyn(&[2]), 0.2));
        let rm = Array1::from_vec(vec![0.05, -0.05]);
        let rv = Array1::from_vec(vec![1.1, 0.8]);
        let xv = tape.leaf(x.clone());
        let (y, stats) = tape.batchnorm2d(xv, gamma, beta, &rm, &rv, false, 1e-5);
        assert!(stats.is_none());
        let full = tape.value(y);

        // Row i of the batched result equals the single-sample evaluation.
        for i in 0..4 {
            let tape1: Tape<f64> = Tape::new();
            let xi = x
                .slice_axis(Axis(0), ndarray::Slice::from(i..i + 1))
                .to_owned();
            let g1 = tape1.leaf(ArrayD::from_elem(IxDyn(&[2]), 1.3));
            let b1 = tape1.leaf(ArrayD::from_elem(IxDyn(&[2]), 0.2));
            let x1 = tape1.leaf(xi);
            let (y1, _) = tape1.batchnorm2d(x1, g1, b1, &rm, &rv, false, 1e-5);
            let v1 = tape1.value(y1);
            let fi = full.slice_axis(Axis(0), ndarray::Slice::from(i..i + 1));
            assert_eq!(v1, fi.to_owned());
        }
    }
}
