//! Evaluation metrics: PSNR, single-scale SSIM, per-AU F1/accuracy of
//! generated frames, difference maps, and report aggregation.

use ndarray::{Array2, ArrayView2};

use crate::data::{AuLabelVector, AuProbVector, SampleClip, VideoFrame, AU_COUNT, AU_NAMES, FRAME_SIZE};
use crate::error::{Error, Result};
use crate::networks::{classify_lower_halves, ModelConfig};
use crate::params::ParamMap;

/// PSNR reported for identical frames (zero MSE).
pub const PSNR_CAP_DB: f64 = 100.0;
/// SSIM window edge.
pub const SSIM_WINDOW: usize = 11;
/// SSIM Gaussian sigma.
pub const SSIM_SIGMA: f64 = 1.5;

/// Peak signal-to-noise ratio in dB for MAX = 1.0, clamped to
/// [0, PSNR_CAP_DB].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).clamp(0.0, PSNR_CAP_DB)
}

/// PSNR between two frames.
pub fn psnr(a: &VideoFrame, b: &VideoFrame) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.pixels().iter().zip(b.pixels().iter()) {
        let d = (*x as f64) - (*y as f64);
        acc += d * d;
    }
    psnr_from_mse(acc / a.pixels().len() as f64)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filter.
fn gaussian_filter_valid(img: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = img.dim();
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    let mut tmp = Array2::<f64>::zeros((h, wo));
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * img[[y, x + i]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((ho, wo));
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[[y + i, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn ssim_channel(a: ArrayView2<f32>, b: ArrayView2<f32>) -> f64 {
    let k = gaussian_kernel();
    let a64 = a.mapv(|v| v as f64);
    let b64 = b.mapv(|v| v as f64);
    let mu_a = gaussian_filter_valid(&a64, &k);
    let mu_b = gaussian_filter_valid(&b64, &k);
    let m_aa = gaussian_filter_valid(&(&a64 * &a64), &k);
    let m_bb = gaussian_filter_valid(&(&b64 * &b64), &k);
    let m_ab = gaussian_filter_valid(&(&a64 * &b64), &k);
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let mut acc = 0.0;
    let n = mu_a.len() as f64;
    for ((ma, mb), ((aa, bb), ab)) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(m_aa.iter().zip(m_bb.iter()).zip(m_ab.iter()))
    {
        let va = aa - ma * ma;
        let vb = bb - mb * mb;
        let cov = ab - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    acc / n
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), computed per
/// channel over valid window positions and averaged.
pub fn ssim(a: &VideoFrame, b: &VideoFrame) -> f64 {
    let mut acc = 0.0;
    for c in 0..3 {
        acc += ssim_channel(
            a.pixels().index_axis(ndarray::Axis(0), c),
            b.pixels().index_axis(ndarray::Axis(0), c),
        );
    }
    acc / 3.0
}

/// Per-AU F1 and accuracy plus unweighted averages.
#[derive(Debug, Clone, PartialEq)]
pub struct AuScores {
    /// (f1, accuracy) per AU in canonical order, both in [0, 1].
    pub per_au: [(f64, f64); AU_COUNT],
    pub avg_f1: f64,
    pub avg_accuracy: f64,
}

/// Binarize predictions at `threshold` and score against ground truth.
/// F1 with zero predicted and zero actual positives is 1.0; with zero
/// predicted but nonzero actual (or the reverse) it is 0.0.
pub fn au_scores(
    pred: &[AuProbVector],
    gt: &[AuLabelVector],
    threshold: f32,
) -> Result<AuScores> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "au_scores needs equal nonempty inputs, got {} predictions and {} labels",
            pred.len(),
            gt.len()
        )));
    }
    let mut per_au = [(0.0, 0.0); AU_COUNT];
    for i in 0..AU_COUNT {
        let (mut tp, mut fp, mut fneg, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for (p, y) in pred.iter().zip(gt) {
            let ph = u8::from(p.get(i) >= threshold);
            match (ph, y.get(i)) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fneg += 1,
                _ => tn += 1,
            }
        }
        let f1 = if tp == 0 {
            if fp == 0 && fneg == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            let precision = tp as f64 / (tp + fp) as f64;
            let recall = tp as f64 / (tp + fneg) as f64;
            2.0 * precision * recall / (precision + recall)
        };
        let accuracy = (tp + tn) as f64 / pred.len() as f64;
        per_au[i] = (f1, accuracy);
    }
    let avg_f1 = per_au.iter().map(|(f, _)| f).sum::<f64>() / AU_COUNT as f64;
    let avg_accuracy = per_au.iter().map(|(_, a)| a).sum::<f64>() / AU_COUNT as f64;
    Ok(AuScores {
        per_au,
        avg_f1,
        avg_accuracy,
    })
}

/// Per-pixel mean-over-channels absolute difference, in [0, 1].
pub fn difference_map(gen: &VideoFrame, gt: &VideoFrame) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros((FRAME_SIZE, FRAME_SIZE));
    for y in 0..FRAME_SIZE {
        for x in 0..FRAME_SIZE {
            let mut acc = 0.0f32;
            for c in 0..3 {
                acc += (gen.pixels()[[c, y, x]] - gt.pixels()[[c, y, x]]).abs();
            }
            out[[y, x]] = acc / 3.0;
        }
    }
    out
}

/// Mean temporal pixel variance over a rectangular region.
pub fn temporal_variance(
    frames: &[VideoFrame],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> f64 {
    if frames.len() < 2 {
        return 0.0;
    }
    let t = frames.len() as f64;
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for c in 0..3 {
        for y in rows.clone() {
            for x in cols.clone() {
                let mean: f64 = frames
                    .iter()
                    .map(|f| f.pixels()[[c, y, x]] as f64)
                    .sum::<f64>()
                    / t;
                let var: f64 = frames
                    .iter()
                    .map(|f| {
                        let d = f.pixels()[[c, y, x]] as f64 - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / t;
                acc += var;
                count += 1;
            }
        }
    }
    acc / count as f64
}

/// Aggregated evaluation results for a clip or a split.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub per_au: [(f64, f64); AU_COUNT],
    pub avg_f1: f64,
    pub avg_accuracy: f64,
    pub n_frames: usize,
}

impl EvalReport {
    /// Flat key=value lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("psnr_mean={:.6}\n", self.psnr_mean));
        out.push_str(&format!("ssim_mean={:.6}\n", self.ssim_mean));
        for (i, name) in AU_NAMES.iter().enumerate() {
            out.push_str(&format!("{}_f1={:.6}\n", name.to_ascii_lowercase(), self.per_au[i].0));
            out.push_str(&format!(
                "{}_accuracy={:.6}\n",
                name.to_ascii_lowercase(),
                self.per_au[i].1
            ));
        }
        out.push_str(&format!("avg_f1={:.6}\n", self.avg_f1));
        out.push_str(&format!("avg_accuracy={:.6}\n", self.avg_accuracy));
        out.push_str(&format!("n_frames={}\n", self.n_frames));
        out
    }

    /// Comma-separated table mirroring the evaluation column layout:
    /// PSNR, SSIM, Avg. F1, Avg. Acc. (%), then per-AU F1 / Acc. (%).
    pub fn csv_header() -> String {
        let mut cols = vec![
            "PSNR".to_string(),
            "SSIM".to_string(),
            "Avg_F1".to_string(),
            "Avg_Acc".to_string(),
        ];
        for name in AU_NAMES {
            cols.push(format!("{name}_F1"));
            cols.push(format!("{name}_Acc"));
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            format!("{:.3}", self.psnr_mean),
            format!("{:.3}", self.ssim_mean),
            format!("{:.3}", self.avg_f1),
            format!("{:.2}", self.avg_accuracy * 100.0),
        ];
        for (f1, acc) in self.per_au {
            cols.push(format!("{f1:.3}"));
            cols.push(format!("{:.2}", acc * 100.0));
        }
        cols.join(",")
    }
}

/// Score generated frames against one clip's ground truth: per-frame
/// PSNR/SSIM plus AU classification of the generated lower faces.
pub fn evaluate_clip(
    generated: &[VideoFrame],
    clip: &SampleClip,
    auclf_params: &ParamMap<f32>,
    auclf_prefix: &str,
    cfg: &ModelConfig,
    threshold: f32,
) -> Result<EvalReport> {
    evaluate_many(
        std::slice::from_ref(&generated.to_vec()),
        std::slice::from_ref(clip),
        auclf_params,
        auclf_prefix,
        cfg,
        threshold,
    )
}

/// Aggregate evaluation across several clips (frame-weighted means).
pub fn evaluate_many(
    generated: &[Vec<VideoFrame>],
    clips: &[SampleClip],
    auclf_params: &ParamMap<f32>,
    auclf_prefix: &str,
    cfg: &ModelConfig,
    threshold: f32,
) -> Result<EvalReport> {
    if generated.len() != clips.len() || generated.is_empty() {
        return Err(Error::invalid("evaluate: generated/clip count mismatch"));
    }
    let mut psnr_acc = 0.0;
    let mut ssim_acc = 0.0;
    let mut n = 0usize;
    let mut preds: Vec<AuProbVector> = Vec::new();
    let mut gts: Vec<AuLabelVector> = Vec::new();
    for (gen, clip) in generated.iter().zip(clips) {
        if gen.len() != clip.len() {
            return Err(Error::invalid(format!(
                "evaluate: clip {} has {} frames but {} generated",
                clip.clip_id,
                clip.len(),
                gen.len()
            )));
        }
        for (g, f) in gen.iter().zip(&clip.frames) {
            psnr_acc += psnr(g, &f.frame);
            ssim_acc += ssim(g, &f.frame);
            gts.push(f.labels);
            n += 1;
        }
        preds.extend(classify_lower_halves(gen, auclf_params, auclf_prefix, cfg)?);
    }
    let scores = au_scores(&preds, &gts, threshold)?;
    Ok(EvalReport {
        psnr_mean: psnr_acc / n as f64,
        ssim_mean: ssim_acc / n as f64,
        per_au: scores.per_au,
        avg_f1: scores.avg_f1,
        avg_accuracy: scores.avg_accuracy,
        n_frames: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn random_frame(seed: u64) -> VideoFrame {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        VideoFrame::new(Array3::from_shape_fn((3, FRAME_SIZE, FRAME_SIZE), |_| {
            rng.random_range(0.0..1.0f32)
        }))
        .unwrap()
    }

    #[test]
    fn psnr_formula_values() {
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-6);
        assert!((psnr_from_mse(1e-4) - 40.0).abs() < 1e-6);
        assert_eq!(psnr_from_mse(0.0), 100.0);
    }

    #[test]
    fn psnr_caps_on_identical_frames_and_is_symmetric() {
        let a = random_frame(1);
        let b = random_frame(2);
        assert_eq!(psnr(&a, &a), 100.0);
        assert_eq!(psnr(&a, &b), psnr(&b, &a));
    }

    #[test]
    fn ssim_is_one_on_identical_frames() {
        let a = random_frame(3);
        assert!((ssim(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = random_frame(4);
        let b = random_frame(5);
        let d = (ssim(&a, &b) - ssim(&b, &a)).abs();
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn inverted_high_contrast_image_scores_low() {
        // Checkerboard vs its inverse: strong anticorrelation.
        let mut px = Array3::<f32>::zeros((3, FRAME_SIZE, FRAME_SIZE));
        for c in 0..3 {
            for y in 0..FRAME_SIZE {
                for x in 0..FRAME_SIZE {
                    px[[c, y, x]] = (((y / 4) + (x / 4)) % 2) as f32;
                }
            }
        }
        let a = VideoFrame::new(px.clone()).unwrap();
        let b = VideoFrame::new(px.mapv(|v| 1.0 - v)).unwrap();
        assert!(ssim(&a, &b) < 0.1);
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        let a = random_frame(6);
        let b = random_frame(7);
        let got = ssim(&a, &b);

        // Independent direct evaluation: explicit window loops per channel.
        let k = gaussian_kernel();
        let c1 = 1e-4f64;
        let c2 = 9e-4f64;
        let mut total = 0.0;
        for c in 0..3 {
            let pa = a.pixels().index_axis(ndarray::Axis(0), c);
            let pb = b.pixels().index_axis(ndarray::Axis(0), c);
            let mut acc = 0.0;
            let mut count = 0usize;
            for y0 in 0..=FRAME_SIZE - SSIM_WINDOW {
                for x0 in 0..=FRAME_SIZE - SSIM_WINDOW {
                    let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..SSIM_WINDOW {
                        for dx in 0..SSIM_WINDOW {
                            let w = k[dy] * k[dx];
                            let va = pa[[y0 + dy, x0 + dx]] as f64;
                            let vb = pb[[y0 + dy, x0 + dx]] as f64;
                            ma += w * va;
                            mb += w * vb;
                            maa += w * va * va;
                            mbb += w * vb * vb;
                            mab += w * va * vb;
                        }
                    }
                    let va = maa - ma * ma;
                    let vb = mbb - mb * mb;
                    let cov = mab - ma * mb;
                    acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        let want = total / 3.0;
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn au_scores_match_hand_counted_confusion_matrix() {
        // AU25 over 4 frames: gt (1,1,0,0), probs (0.9,0.4,0.2,0.6).
        let mk_pred = |v: f32| {
            AuProbVector::new([0.0, 0.0, 0.0, v, 0.0]).unwrap()
        };
        let mk_gt = |v: u8| AuLabelVector::new([0, 0, 0, v, 0]).unwrap();
        let pred = vec![mk_pred(0.9), mk_pred(0.4), mk_pred(0.2), mk_pred(0.6)];
        let gt = vec![mk_gt(1), mk_gt(1), mk_gt(0), mk_gt(0)];
        let s = au_scores(&pred, &gt, 0.5).unwrap();
        // TP=1 FP=1 FN=1 TN=1: F1 = 0.5, accuracy = 0.5.
        assert!((s.per_au[3].0 - 0.5).abs() < 1e-12);
        assert!((s.per_au[3].1 - 0.5).abs() < 1e-12);
        // The other AUs have no positives on either side: F1 = 1, acc = 1.
        for i in [0usize, 1, 2, 4] {
            assert_eq!(s.per_au[i], (1.0, 1.0));
        }
    }

    #[test]
    fn au_scores_degenerate_conventions() {
        let all_zero_p = vec![AuProbVector::new([0.0; 5]).unwrap(); 3];
        let gt_with_pos = vec![
            AuLabelVector::new([1, 0, 0, 0, 0]).unwrap(),
            AuLabelVector::new([1, 0, 0, 0, 0]).unwrap(),
            AuLabelVector::new([0, 0, 0, 0, 0]).unwrap(),
        ];
        let s = au_scores(&all_zero_p, &gt_with_pos, 0.5).unwrap();
        assert_eq!(s.per_au[0].0, 0.0); // positives exist but none predicted
        assert_eq!(s.per_au[1].0, 1.0); // no positives anywhere
        assert!(au_scores(&[], &[], 0.5).is_err());
    }

    #[test]
    fn perfect_predictions_score_perfectly() {
        let gt = vec![
            AuLabelVector::new([1, 0, 1, 0, 1]).unwrap(),
            AuLabelVector::new([0, 1, 0, 1, 0]).unwrap(),
        ];
        let pred: Vec<AuProbVector> = gt
            .iter()
            .map(|l| {
                let f = l.as_f32();
                AuProbVector::new(f).unwrap()
            })
            .collect();
        let s = au_scores(&pred, &gt, 0.5).unwrap();
        assert_eq!(s.avg_f1, 1.0);
        assert_eq!(s.avg_accuracy, 1.0);
    }

    #[test]
    fn difference_map_properties() {
        let a = random_frame(8);
        assert!(difference_map(&a, &a).iter().all(|v| *v == 0.0));

        let mut px = a.pixels().clone();
        px[[0, 60, 40]] = 1.0;
        px[[1, 60, 40]] = 1.0;
        px[[2, 60, 40]] = 1.0;
        let mut base = Array3::<f32>::zeros((3, FRAME_SIZE, FRAME_SIZE));
        base.fill(0.0);
        let zero = VideoFrame::new(base).unwrap();
        let one_px = VideoFrame::new({
            let mut p = Array3::<f32>::zeros((3, FRAME_SIZE, FRAME_SIZE));
            p[[0, 60, 40]] = 1.0;
            p[[1, 60, 40]] = 1.0;
            p[[2, 60, 40]] = 1.0;
            p
        })
        .unwrap();
        let map = difference_map(&one_px, &zero);
        assert_eq!(map[[60, 40]], 1.0);
        assert_eq!(map[[0, 0]], 0.0);
        // Support is confined to the changed pixel.
        assert_eq!(map.iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn temporal_variance_is_zero_for_constant_sequences() {
        let a = random_frame(9);
        let frames = vec![a.clone(), a.clone(), a];
        assert_eq!(temporal_variance(&frames, 60..80, 30..80), 0.0);
    }
}
