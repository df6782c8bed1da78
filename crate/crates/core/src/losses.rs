//! Training objectives: class-balanced BCE and Dice losses for AU
//! supervision, perceptual / reconstruction / identity L1 terms, and the
//! weighted total. Every loss exists both as a tape graph (for training) and
//! as a plain function evaluated through the same graph code.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};

use crate::autodiff::{Scalar, Tape, Var};
use crate::data::{AuLabelVector, AuProbVector, VideoFrame, AU_COUNT, HALF_ROW};
use crate::error::{Error, Result};
use crate::networks::PerceptualExtractor;

/// Smoothing term for the Dice loss.
pub const DICE_EPS_DEFAULT: f64 = 1e-7;
/// Probability clamp for the BCE loss.
pub const BCE_CLAMP: f64 = 1e-7;

/// Class-balance weights: w_i = ((1/r_i) * n_au) / sum_j (1/r_j).
/// The weights always sum to n_au.
#[derive(Debug, Clone, PartialEq)]
pub struct AuWeights {
    pub w: [f64; AU_COUNT],
}

impl AuWeights {
    pub fn uniform() -> Self {
        AuWeights { w: [1.0; AU_COUNT] }
    }

    pub fn as_f32(&self) -> [f32; AU_COUNT] {
        let mut out = [0.0f32; AU_COUNT];
        for (o, v) in out.iter_mut().zip(self.w) {
            *o = v as f32;
        }
        out
    }
}

/// Width-generic balance formula: w_i = ((1/r_i) * n) / sum_j (1/r_j).
pub fn balance_weights(rates: &[f64]) -> Result<Vec<f64>> {
    for (i, r) in rates.iter().enumerate() {
        if !(*r > 0.0) || *r > 1.0 {
            return Err(Error::invalid(format!("rate {r} at index {i} outside (0, 1]")));
        }
    }
    let n = rates.len() as f64;
    let inv_sum: f64 = rates.iter().map(|r| 1.0 / r).sum();
    Ok(rates.iter().map(|r| (1.0 / r) * n / inv_sum).collect())
}

/// Compute the class-balance weights from train-split occurrence rates.
pub fn au_weights(rates: &[f64; AU_COUNT]) -> Result<AuWeights> {
    let w = balance_weights(rates)?;
    Ok(AuWeights {
        w: [w[0], w[1], w[2], w[3], w[4]],
    })
}

fn weights_leaf<F: Scalar>(tape: &Tape<F>, w: &[f64]) -> Var {
    tape.leaf(
        Array1::from_iter(w.iter().map(|v| F::of_f64(*v)))
            .into_dyn(),
    )
}

fn ones_like<F: Scalar>(tape: &Tape<F>, shape: &[usize]) -> Var {
    tape.leaf(ArrayD::from_elem(IxDyn(shape), F::one()))
}

/// Weighted binary cross-entropy over (N, n_au) labels and probabilities:
/// -(1/(n_au N)) sum_n sum_i w_i [y log p + (1-y) log(1-p)], probabilities
/// clamped away from {0, 1}.
pub fn bce_graph<F: Scalar>(tape: &Tape<F>, y: Var, p: Var, w: &[f64]) -> Var {
    let shape = tape.shape(p);
    let eps = F::of_f64(BCE_CLAMP);
    let pc = tape.clamp(p, eps, F::one() - eps);
    let ones = ones_like(tape, &shape);
    let pos = tape.mul(y, tape.ln(pc));
    let neg = tape.mul(tape.sub(ones, y), tape.ln(tape.sub(ones, pc)));
    let term = tape.add(pos, neg);
    let weighted = tape.scale_cols(term, weights_leaf(tape, w));
    tape.scale(tape.mean(weighted), -F::one())
}

/// Weighted multi-label Dice loss over (N, n_au):
/// (1/(n_au N)) sum w_i [1 - (2 y p + eps)/(y^2 + p^2 + eps)].
pub fn dice_graph<F: Scalar>(tape: &Tape<F>, y: Var, p: Var, w: &[f64], eps: f64) -> Var {
    let shape = tape.shape(p);
    let ones = ones_like(tape, &shape);
    let eps_t = tape.leaf(ArrayD::from_elem(IxDyn(&shape), F::of_f64(eps)));
    let two_yp = tape.scale(tape.mul(y, p), F::of_f64(2.0));
    let num = tape.add(two_yp, eps_t);
    let den = tape.add(tape.add(tape.mul(y, y), tape.mul(p, p)), eps_t);
    let frac = tape.div(num, den);
    let term = tape.sub(ones, frac);
    let weighted = tape.scale_cols(term, weights_leaf(tape, w));
    tape.mean(weighted)
}

/// AU loss: BCE plus Dice.
pub fn au_loss_graph<F: Scalar>(tape: &Tape<F>, y: Var, p: Var, w: &[f64], eps: f64) -> Var {
    tape.add(bce_graph(tape, y, p, w), dice_graph(tape, y, p, w, eps))
}

/// Mean absolute difference.
pub fn l1_mean_graph<F: Scalar>(tape: &Tape<F>, a: Var, b: Var) -> Var {
    tape.mean(tape.abs(tape.sub(a, b)))
}

/// Perceptual loss: mean of per-layer L1 distances between feature maps.
pub fn perceptual_graph<F: Scalar>(tape: &Tape<F>, gen_maps: &[Var], gt_maps: &[Var]) -> Var {
    assert_eq!(gen_maps.len(), gt_maps.len());
    let mut acc: Option<Var> = None;
    for (g, t) in gen_maps.iter().zip(gt_maps) {
        let l = l1_mean_graph(tape, *g, *t);
        acc = Some(match acc {
            Some(a) => tape.add(a, l),
            None => l,
        });
    }
    tape.scale(acc.expect("at least one layer"), F::of_f64(1.0 / gen_maps.len() as f64))
}

/// Identity loss: mean absolute difference over the upper halves (rows
/// [0, 56)) of generated frames (N,3,112,112) and the identity image
/// (broadcast when needed).
pub fn identity_graph<F: Scalar>(tape: &Tape<F>, gen: Var, id_img: Var) -> Var {
    let n = tape.shape(gen)[0];
    let gen_upper = tape.slice(gen, 2, 0, HALF_ROW);
    let id_n = tape.shape(id_img)[0];
    let id_rep = if id_n == 1 && n > 1 {
        tape.repeat_axis0(id_img, n)
    } else {
        id_img
    };
    let id_upper = tape.slice(id_rep, 2, 0, HALF_ROW);
    l1_mean_graph(tape, gen_upper, id_upper)
}

/// Trade-off weights of the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub id: f64,
    pub per: f64,
    pub au: f64,
    pub dice_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 1.5,
            id: 1.5,
            per: 0.07,
            au: 0.02,
            dice_eps: DICE_EPS_DEFAULT,
        }
    }
}

/// Scalar loss components before weighting.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossComponents {
    pub rec: f64,
    pub id: f64,
    pub per: f64,
    pub au: f64,
}

/// Weighted total of the four components.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.rec * c.rec + w.id * c.id + w.per * c.per + w.au * c.au
}

/// Tape version: optional component nodes combine into one scalar.
pub fn total_graph<F: Scalar>(
    tape: &Tape<F>,
    rec: Option<Var>,
    id: Option<Var>,
    per: Option<Var>,
    au: Option<Var>,
    w: &LossWeights,
) -> Var {
    let mut acc = tape.scalar(F::zero());
    for (v, lambda) in [(rec, w.rec), (id, w.id), (per, w.per), (au, w.au)] {
        if let Some(v) = v {
            if lambda != 0.0 {
                acc = tape.add(acc, tape.scale(v, F::of_f64(lambda)));
            }
        }
    }
    acc
}

// ---------------------------------------------------------------------------
// Plain single-sample wrappers (evaluated through the same graph code).
// ---------------------------------------------------------------------------

fn row_leaf(tape: &Tape<f32>, values: [f32; AU_COUNT]) -> Var {
    tape.leaf(Array2::from_shape_vec((1, AU_COUNT), values.to_vec()).unwrap().into_dyn())
}

/// Weighted BCE for one label/probability pair.
pub fn bce_loss(y: &AuLabelVector, p: &AuProbVector, w: &AuWeights) -> f32 {
    let tape: Tape<f32> = Tape::new();
    let yv = row_leaf(&tape, y.as_f32());
    let pv = row_leaf(&tape, p.as_array());
    tape.scalar_value(bce_graph(&tape, yv, pv, &w.w))
}

/// Weighted Dice for one label/probability pair.
pub fn dice_loss(y: &AuLabelVector, p: &AuProbVector, w: &AuWeights, eps: f64) -> f32 {
    let tape: Tape<f32> = Tape::new();
    let yv = row_leaf(&tape, y.as_f32());
    let pv = row_leaf(&tape, p.as_array());
    tape.scalar_value(dice_graph(&tape, yv, pv, &w.w, eps))
}

/// BCE plus Dice for one pair.
pub fn au_loss(y: &AuLabelVector, p: &AuProbVector, w: &AuWeights, eps: f64) -> f32 {
    bce_loss(y, p, w) + dice_loss(y, p, w, eps)
}

fn frame_leaf(tape: &Tape<f32>, img: &VideoFrame) -> Var {
    let mut b = Array4::<f32>::zeros((1, 3, crate::data::FRAME_SIZE, crate::data::FRAME_SIZE));
    b.index_axis_mut(Axis(0), 0).assign(img.pixels());
    tape.leaf(b.into_dyn())
}

/// Mean absolute pixel difference.
pub fn reconstruction_loss(gen: &VideoFrame, gt: &VideoFrame) -> f32 {
    let tape: Tape<f32> = Tape::new();
    let g = frame_leaf(&tape, gen);
    let t = frame_leaf(&tape, gt);
    tape.scalar_value(l1_mean_graph(&tape, g, t))
}

/// Upper-half mean absolute difference against the identity image.
pub fn identity_loss(gen: &VideoFrame, id_img: &VideoFrame) -> f32 {
    let tape: Tape<f32> = Tape::new();
    let g = frame_leaf(&tape, gen);
    let i = frame_leaf(&tape, id_img);
    tape.scalar_value(identity_graph(&tape, g, i))
}

/// Mean per-layer L1 distance between frozen feature maps of the two frames.
pub fn perceptual_loss<E: PerceptualExtractor + ?Sized>(
    gen: &VideoFrame,
    gt: &VideoFrame,
    extractor: &E,
) -> Result<f32> {
    crate::networks::validate_extractor(extractor)?;
    let tape: Tape<f32> = Tape::new();
    let g = frame_leaf(&tape, gen);
    let t = frame_leaf(&tape, gt);
    let gen_maps = extractor.features_graph(&tape, g);
    let gt_maps = extractor.features_graph(&tape, t);
    Ok(tape.scalar_value(perceptual_graph(&tape, &gen_maps, &gt_maps)))
}
