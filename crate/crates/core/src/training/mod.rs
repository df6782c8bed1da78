//! Staged optimization: pretrain the audio-to-AU module and the AU
//! classifier, then train the full generator with differentiated learning
//! rates, a frozen perceptual extractor, and AU-loss-only fine-tuning of the
//! pretrained parts. Runs are deterministic in the seed; checkpoints resume
//! exactly.

use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, Axis, Ix4, IxDyn};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::mfcc::{extract_mfcc, frame_times, window_mfcc};
use crate::data::{AudioTrack, SampleClip, VideoFrame, FRAME_SIZE, HALF_ROW};
use crate::error::{Error, Result};
use crate::losses::{
    au_loss_graph, au_weights, identity_graph, l1_mean_graph, total_graph, LossWeights,
};
use crate::metrics::{au_scores, AuScores, EvalReport};
use crate::networks::{
    apply_bn_updates, au_classifier_graph, audio2au_graph, audio_encoder_graph, decoder_graph,
    identity_encoder_graph, init_au_classifier, init_audio2au, init_audio_encoder, init_decoder,
    init_identity_encoder, ModelConfig, PerceptualExtractor, AU_FEATURE_WIDTH, FUSED_WIDTH,
};
use crate::params::{uniform_init, zeros_init, BoundParams, ParamMap};
use crate::tcsan::{init_tcsan_params, tcsan_graph, TcsanConfig};

mod adam;
mod checkpoint;

pub use adam::AdamGroup;
pub use checkpoint::{Checkpoint, RngState};

/// Optimization settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Total optimizer steps; 0 derives epochs * train clips.
    pub steps: usize,
    pub batch_clips: usize,
    pub lr_main: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lr_audio2au_ft: f64,
    pub lr_auclf_ft: f64,
    pub lr_pretrain: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub ckpt_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            steps: 0,
            batch_clips: 1,
            lr_main: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            lr_audio2au_ft: 1e-6,
            lr_auclf_ft: 1e-7,
            lr_pretrain: 1e-3,
            loss_weights: LossWeights::default(),
            seed: 7,
            ckpt_every: 0,
            log_every: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_main <= 0.0 || self.lr_audio2au_ft <= 0.0 || self.lr_auclf_ft <= 0.0 {
            return Err(Error::invalid("learning rates must be positive"));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid("Adam betas must lie in (0, 1)"));
            }
        }
        if self.batch_clips == 0 {
            return Err(Error::invalid("batch_clips must be >= 1"));
        }
        Ok(())
    }

    fn total_steps(&self, n_clips: usize) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            self.epochs * n_clips.div_ceil(self.batch_clips)
        }
    }
}

/// Which generator components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorVariant {
    pub use_tcsan: bool,
    pub use_audio2au: bool,
}

/// Named experiment configurations mirroring the ablation axes: incremental
/// losses, the fusion network, and the audio-to-AU module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AblationVariant {
    /// Reconstruction loss only, no fusion network, no audio-to-AU.
    Baseline,
    RecPer,
    RecPerId,
    /// Fusion network on, audio-to-AU off, no AU loss.
    Tcsan,
    /// Fusion network on, AU loss on, audio-to-AU off.
    TcsanAu,
    /// Audio-to-AU on without the fusion network.
    Audio2au,
    #[default]
    Full,
}

impl AblationVariant {
    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Baseline => "baseline",
            AblationVariant::RecPer => "rec-per",
            AblationVariant::RecPerId => "rec-per-id",
            AblationVariant::Tcsan => "tcsan",
            AblationVariant::TcsanAu => "tcsan-au",
            AblationVariant::Audio2au => "audio2au",
            AblationVariant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(AblationVariant::Baseline),
            "rec-per" => Ok(AblationVariant::RecPer),
            "rec-per-id" => Ok(AblationVariant::RecPerId),
            "tcsan" => Ok(AblationVariant::Tcsan),
            "tcsan-au" => Ok(AblationVariant::TcsanAu),
            "audio2au" => Ok(AblationVariant::Audio2au),
            "full" => Ok(AblationVariant::Full),
            other => Err(Error::invalid(format!(
                "unknown variant {other:?}; expected one of baseline, rec-per, rec-per-id, tcsan, tcsan-au, audio2au, full"
            ))),
        }
    }

    pub fn all() -> [AblationVariant; 7] {
        [
            AblationVariant::Baseline,
            AblationVariant::RecPer,
            AblationVariant::RecPerId,
            AblationVariant::Tcsan,
            AblationVariant::TcsanAu,
            AblationVariant::Audio2au,
            AblationVariant::Full,
        ]
    }

    pub fn generator(&self) -> GeneratorVariant {
        match self {
            AblationVariant::Baseline | AblationVariant::RecPer | AblationVariant::RecPerId => {
                GeneratorVariant {
                    use_tcsan: false,
                    use_audio2au: false,
                }
            }
            AblationVariant::Tcsan | AblationVariant::TcsanAu => GeneratorVariant {
                use_tcsan: true,
                use_audio2au: false,
            },
            AblationVariant::Audio2au => GeneratorVariant {
                use_tcsan: false,
                use_audio2au: true,
            },
            AblationVariant::Full => GeneratorVariant {
                use_tcsan: true,
                use_audio2au: true,
            },
        }
    }

    /// Loss weights for the variant, zeroing disabled terms of `base`.
    pub fn loss_weights(&self, base: &LossWeights) -> LossWeights {
        let mut w = *base;
        match self {
            AblationVariant::Baseline => {
                w.id = 0.0;
                w.per = 0.0;
                w.au = 0.0;
            }
            AblationVariant::RecPer => {
                w.id = 0.0;
                w.au = 0.0;
            }
            AblationVariant::RecPerId | AblationVariant::Tcsan => {
                w.au = 0.0;
            }
            AblationVariant::TcsanAu | AblationVariant::Audio2au | AblationVariant::Full => {}
        }
        w
    }
}

/// Deterministic clip order for one epoch.
fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x5851_F42D_4C95_7F2D)
            .wrapping_add(epoch.wrapping_add(1).wrapping_mul(0x14057B7E_F767_814F)),
    );
    order.shuffle(&mut rng);
    order
}

/// Clip indices consumed by one optimizer step.
fn step_clips(cfg: &TrainConfig, step: u64, n: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(cfg.batch_clips) as u64;
    let epoch = step / per_epoch;
    let slot = (step % per_epoch) as usize;
    let order = epoch_order(cfg.seed, epoch, n);
    order
        .into_iter()
        .skip(slot * cfg.batch_clips)
        .take(cfg.batch_clips)
        .collect()
}

fn grads_for<'a>(
    grads: &mut crate::autodiff::Gradients<f32>,
    bound: &BoundParams,
    names: impl Iterator<Item = &'a String>,
) -> IndexMap<String, ArrayD<f32>> {
    let mut out = IndexMap::new();
    for name in names {
        if let Some(g) = grads.take(bound.var(name)) {
            out.insert(name.clone(), g);
        }
    }
    out
}

fn accumulate(into: &mut IndexMap<String, ArrayD<f32>>, part: IndexMap<String, ArrayD<f32>>) {
    for (k, v) in part {
        match into.get_mut(&k) {
            Some(acc) => *acc += &v,
            None => {
                into.insert(k, v);
            }
        }
    }
}

fn scale_grads(grads: &mut IndexMap<String, ArrayD<f32>>, factor: f32) {
    for g in grads.values_mut() {
        g.mapv_inplace(|v| v * factor);
    }
}

/// Per-step loss record.
#[derive(Debug, Clone, Copy)]
pub struct StepLoss {
    pub step: u64,
    pub total: f64,
    pub rec: f64,
    pub id: f64,
    pub per: f64,
    pub au: f64,
}

/// Result of a pretraining stage.
#[derive(Debug)]
pub struct PretrainOutcome {
    pub params: ParamMap<f32>,
    pub groups: Vec<AdamGroup>,
    pub losses: Vec<f64>,
    pub steps: u64,
}

impl PretrainOutcome {
    /// Mean of the first and last `k` recorded losses.
    pub fn smoothed_endpoints(&self, k: usize) -> (f64, f64) {
        let k = k.min(self.losses.len()).max(1);
        let first: f64 = self.losses[..k].iter().sum::<f64>() / k as f64;
        let last: f64 =
            self.losses[self.losses.len() - k..].iter().sum::<f64>() / k as f64;
        (first, last)
    }

    pub fn into_checkpoint(self, config_text: String) -> Checkpoint {
        Checkpoint {
            step: self.steps,
            config_text,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(0)),
            params: self.params,
            groups: self.groups,
        }
    }
}

/// Pretrain the audio-to-AU module on (MFCC window, AU label) pairs with the
/// class-balanced AU loss.
pub fn pretrain_audio2au(
    train: &[SampleClip],
    cfg: &TrainConfig,
    model: &ModelConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("pretrain_audio2au: empty train split"));
    }
    let weights = au_weights(&crate::data::compute_au_rates(train)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamMap::new();
    init_audio2au(model, &mut rng, &mut params, "a2au");
    let mut group = AdamGroup::new(
        "a2au",
        cfg.lr_pretrain,
        cfg.adam_beta1,
        cfg.adam_beta2,
        params.trainable_names(""),
        &params,
    );
    let total = cfg.total_steps(train.len());
    let mut losses = Vec::with_capacity(total);
    for step in 0..total as u64 {
        let mut batch_grads: IndexMap<String, ArrayD<f32>> = IndexMap::new();
        let mut batch_loss = 0.0f64;
        let clip_ids = step_clips(cfg, step, train.len());
        for ci in &clip_ids {
            let clip = &train[*ci];
            let tape: Tape<f32> = Tape::new();
            let bound = params.bind(&tape);
            let x = tape.leaf(clip.mfcc_batch().into_dyn());
            let (_, probs) = audio2au_graph(&tape, &bound, "a2au", model, x);
            let labels = tape.leaf(clip.label_batch().into_dyn());
            let loss = au_loss_graph(&tape, labels, probs, &weights.w, cfg.loss_weights.dice_eps);
            let value = tape.scalar_value(loss) as f64;
            if !value.is_finite() {
                return Err(Error::Train {
                    step,
                    message: format!("non-finite pretraining loss on clip {}", clip.clip_id),
                });
            }
            batch_loss += value;
            let mut grads = tape.backward(loss);
            accumulate(&mut batch_grads, grads_for(&mut grads, &bound, group.param_names().iter()));
        }
        scale_grads(&mut batch_grads, 1.0 / clip_ids.len() as f32);
        group.step(&mut params, &batch_grads);
        losses.push(batch_loss / clip_ids.len() as f64);
        if cfg.log_every > 0 && step % cfg.log_every as u64 == 0 {
            log::info!("pretrain a2au step {step}: loss {:.5}", losses[step as usize]);
        }
    }
    Ok(PretrainOutcome {
        params,
        groups: vec![group],
        losses,
        steps: total as u64,
    })
}

/// Per-AU F1/accuracy of the pretrained classifier on real frames.
pub struct AuClassifierReport {
    pub train: AuScores,
    pub test: Option<AuScores>,
}

impl AuClassifierReport {
    /// Per-AU table: AU, train F1/Acc, test F1/Acc.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("AU,Train_F1,Train_Acc,Test_F1,Test_Acc\n");
        for (i, name) in crate::data::AU_NAMES.iter().enumerate() {
            let (tf1, tacc) = self.train.per_au[i];
            let (ef1, eacc) = self
                .test
                .as_ref()
                .map(|t| t.per_au[i])
                .unwrap_or((f64::NAN, f64::NAN));
            out.push_str(&format!(
                "{name},{tf1:.3},{:.2},{ef1:.3},{:.2}\n",
                tacc * 100.0,
                eacc * 100.0
            ));
        }
        let (ef1, eacc) = self
            .test
            .as_ref()
            .map(|t| (t.avg_f1, t.avg_accuracy))
            .unwrap_or((f64::NAN, f64::NAN));
        out.push_str(&format!(
            "Average,{:.3},{:.2},{ef1:.3},{:.2}\n",
            self.train.avg_f1,
            self.train.avg_accuracy * 100.0,
            eacc * 100.0
        ));
        out
    }
}

fn score_classifier(
    clips: &[SampleClip],
    params: &ParamMap<f32>,
    model: &ModelConfig,
) -> Result<AuScores> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for clip in clips {
        let frames: Vec<VideoFrame> = clip.frames.iter().map(|f| f.frame.clone()).collect();
        preds.extend(crate::networks::classify_lower_halves(
            &frames, params, "auclf", model,
        )?);
        gts.extend(clip.frames.iter().map(|f| f.labels));
    }
    au_scores(&preds, &gts, 0.5)
}

/// Pretrain the AU classifier on real lower-face crops and report per-AU
/// scores on the train and test splits.
pub fn pretrain_au_classifier(
    train: &[SampleClip],
    test: &[SampleClip],
    cfg: &TrainConfig,
    model: &ModelConfig,
) -> Result<(PretrainOutcome, AuClassifierReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("pretrain_au_classifier: empty train split"));
    }
    let weights = au_weights(&crate::data::compute_au_rates(train)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamMap::new();
    init_au_classifier(model, &mut rng, &mut params, "auclf");
    let mut group = AdamGroup::new(
        "auclf",
        cfg.lr_pretrain,
        cfg.adam_beta1,
        cfg.adam_beta2,
        params.trainable_names(""),
        &params,
    );
    let total = cfg.total_steps(train.len());
    let mut losses = Vec::with_capacity(total);
    for step in 0..total as u64 {
        let clip_ids = step_clips(cfg, step, train.len());
        let mut batch_grads: IndexMap<String, ArrayD<f32>> = IndexMap::new();
        let mut batch_loss = 0.0f64;
        for ci in &clip_ids {
            let clip = &train[*ci];
            let tape: Tape<f32> = Tape::new();
            let bound = params.bind(&tape);
            let t = clip.len();
            let mut crops = ndarray::Array4::<f32>::zeros((t, 3, HALF_ROW, FRAME_SIZE));
            for (i, f) in clip.frames.iter().enumerate() {
                crops.index_axis_mut(Axis(0), i).assign(&f.frame.lower_half());
            }
            let x = tape.leaf(crops.into_dyn());
            let probs = au_classifier_graph(&tape, &bound, "auclf", model, x);
            let labels = tape.leaf(clip.label_batch().into_dyn());
            let loss = au_loss_graph(&tape, labels, probs, &weights.w, cfg.loss_weights.dice_eps);
            let value = tape.scalar_value(loss) as f64;
            if !value.is_finite() {
                return Err(Error::Train {
                    step,
                    message: format!("non-finite pretraining loss on clip {}", clip.clip_id),
                });
            }
            batch_loss += value;
            let mut grads = tape.backward(loss);
            accumulate(&mut batch_grads, grads_for(&mut grads, &bound, group.param_names().iter()));
        }
        scale_grads(&mut batch_grads, 1.0 / clip_ids.len() as f32);
        group.step(&mut params, &batch_grads);
        losses.push(batch_loss / clip_ids.len() as f64);
        if cfg.log_every > 0 && step % cfg.log_every as u64 == 0 {
            log::info!("pretrain auclf step {step}: loss {:.5}", losses[step as usize]);
        }
    }
    let report = AuClassifierReport {
        train: score_classifier(train, &params, model)?,
        test: if test.is_empty() {
            None
        } else {
            Some(score_classifier(test, &params, model)?)
        },
    };
    Ok((
        PretrainOutcome {
            params,
            groups: vec![group],
            losses,
            steps: total as u64,
        },
        report,
    ))
}

/// Everything train_full needs besides the data.
pub struct TrainSetup<'a> {
    pub train_cfg: &'a TrainConfig,
    pub tcsan_cfg: &'a TcsanConfig,
    pub model_cfg: &'a ModelConfig,
    pub variant: GeneratorVariant,
    /// Pretrained audio-to-AU parameters (`a2au.` namespace).
    pub a2au: &'a ParamMap<f32>,
    /// Pretrained AU classifier parameters (`auclf.` namespace).
    pub auclf: &'a ParamMap<f32>,
    pub perceptual: &'a dyn PerceptualExtractor,
    /// Resolved config snapshot stored in checkpoints.
    pub config_text: String,
}

/// Outcome of full-model training.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParamMap<f32>,
    pub groups: Vec<AdamGroup>,
    pub losses: Vec<StepLoss>,
    pub step: u64,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config_text: String) -> Checkpoint {
        Checkpoint {
            step: self.step,
            config_text,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(0)),
            params: self.params.clone(),
            groups: self.groups.clone(),
        }
    }
}

/// Assemble the unified parameter map for the full model.
fn build_full_params(setup: &TrainSetup, rng: &mut ChaCha8Rng) -> ParamMap<f32> {
    let mut params = ParamMap::new();
    init_identity_encoder(setup.model_cfg, rng, &mut params, "id_enc");
    init_audio_encoder(setup.model_cfg, rng, &mut params, "audio_enc");
    if setup.variant.use_tcsan {
        init_tcsan_params(setup.tcsan_cfg, rng, &mut params, "tcsan");
    } else {
        // Frame-local projection in place of the temporal fusion network.
        params.insert(
            "fuseproj.w",
            uniform_init(rng, &[FUSED_WIDTH, setup.tcsan_cfg.out_channels], FUSED_WIDTH),
            true,
        );
        params.insert("fuseproj.b", zeros_init(&[setup.tcsan_cfg.out_channels]), true);
    }
    init_decoder(setup.model_cfg, rng, &mut params, "dec");
    for (name, p) in setup.a2au.iter() {
        params.insert(name.clone(), p.value.clone(), p.trainable);
    }
    for (name, p) in setup.auclf.iter() {
        params.insert(name.clone(), p.value.clone(), p.trainable);
    }
    for (name, p) in setup.perceptual.params().iter() {
        params.insert(name.clone(), p.value.clone(), false);
    }
    params
}

/// Names trained at the main learning rate.
fn main_group_names(params: &ParamMap<f32>) -> Vec<String> {
    ["id_enc.", "audio_enc.", "tcsan.", "fuseproj.", "dec."]
        .iter()
        .flat_map(|p| params.trainable_names(p))
        .collect()
}

struct GeneratorNodes {
    gen: Var,
    bn_updates: Vec<crate::networks::BnUpdate<f32>>,
}

/// Forward pass of the generator on one clip (training mode).
fn generator_forward(
    tape: &Tape<f32>,
    bound: &BoundParams,
    params: &ParamMap<f32>,
    setup: &TrainSetup,
    clip: &SampleClip,
    training: bool,
) -> GeneratorNodes {
    let t = clip.len();
    let mut id_batch = ndarray::Array4::<f32>::zeros((1, 3, FRAME_SIZE, FRAME_SIZE));
    id_batch
        .index_axis_mut(Axis(0), 0)
        .assign(clip.identity_frame.pixels());
    let id_img = tape.leaf(id_batch.into_dyn());
    let (id_vec, skips) = identity_encoder_graph(tape, bound, "id_enc", setup.model_cfg, id_img);

    let mfcc = tape.leaf(clip.mfcc_batch().into_dyn());
    let (f_ak, bn_updates) =
        audio_encoder_graph(tape, bound, params, "audio_enc", setup.model_cfg, mfcc, training);

    let f_au = if setup.variant.use_audio2au {
        let (feat, _) = audio2au_graph(tape, bound, "a2au", setup.model_cfg, mfcc);
        feat
    } else {
        tape.leaf(ArrayD::zeros(IxDyn(&[t, AU_FEATURE_WIDTH])))
    };

    let id_rep = if t > 1 {
        tape.repeat_axis0(id_vec, t)
    } else {
        id_vec
    };
    let fused = tape.concat(1, &[id_rep, f_ak, f_au]);
    let f_t = if setup.variant.use_tcsan {
        tcsan_graph(tape, bound, "tcsan", fused, setup.tcsan_cfg)
    } else {
        tape.add_bias(
            tape.matmul(fused, bound.var("fuseproj.w")),
            bound.var("fuseproj.b"),
        )
    };
    let gen = decoder_graph(tape, bound, "dec", setup.model_cfg, f_t, &skips);
    GeneratorNodes { gen, bn_updates }
}

/// Train the full generator. `resume` continues a saved checkpoint exactly;
/// checkpoints are written under `out_dir` as `ckpt_%08d.bin` when given.
pub fn train_full(
    train: &[SampleClip],
    setup: &TrainSetup,
    out_dir: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    let cfg = setup.train_cfg;
    cfg.validate()?;
    setup.tcsan_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("train_full: empty train split"));
    }
    if setup.a2au.is_empty() || setup.auclf.is_empty() {
        return Err(Error::invalid(
            "train_full requires pretrained audio-to-AU and AU classifier parameters",
        ));
    }
    crate::networks::validate_extractor(setup.perceptual)?;
    let weights = au_weights(&crate::data::compute_au_rates(train)?)?;
    let lw = cfg.loss_weights;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut params, mut groups, start_step) = match resume {
        Some(ckpt) => {
            let _ = RngState::capture(&rng);
            (ckpt.params, ckpt.groups, ckpt.step)
        }
        None => {
            let params = build_full_params(setup, &mut rng);
            let mut groups = vec![AdamGroup::new(
                "main",
                cfg.lr_main,
                cfg.adam_beta1,
                cfg.adam_beta2,
                main_group_names(&params),
                &params,
            )];
            if setup.variant.use_audio2au && lw.au > 0.0 {
                groups.push(AdamGroup::new(
                    "a2au",
                    cfg.lr_audio2au_ft,
                    cfg.adam_beta1,
                    cfg.adam_beta2,
                    params.trainable_names("a2au."),
                    &params,
                ));
            }
            if lw.au > 0.0 {
                groups.push(AdamGroup::new(
                    "auclf",
                    cfg.lr_auclf_ft,
                    cfg.adam_beta1,
                    cfg.adam_beta2,
                    params.trainable_names("auclf."),
                    &params,
                ));
            }
            (params, groups, 0)
        }
    };

    let total = cfg.total_steps(train.len()) as u64;
    let mut losses = Vec::new();
    let frozen_hash = setup.perceptual.params().content_hash();

    for step in start_step..total {
        let clip_ids = step_clips(cfg, step, train.len());
        let mut main_grads: IndexMap<String, ArrayD<f32>> = IndexMap::new();
        let mut ft_grads: IndexMap<String, ArrayD<f32>> = IndexMap::new();
        let mut record = StepLoss {
            step,
            total: 0.0,
            rec: 0.0,
            id: 0.0,
            per: 0.0,
            au: 0.0,
        };
        let mut bn_pending = Vec::new();
        for ci in &clip_ids {
            let clip = &train[*ci];
            let tape: Tape<f32> = Tape::new();
            let bound = params.bind(&tape);
            let nodes = generator_forward(&tape, &bound, &params, setup, clip, true);
            let gen = nodes.gen;
            bn_pending.extend(nodes.bn_updates);

            let gt = tape.leaf(clip.frame_batch().into_dyn());
            let rec = l1_mean_graph(&tape, gen, gt);
            let mut id_batch = ndarray::Array4::<f32>::zeros((1, 3, FRAME_SIZE, FRAME_SIZE));
            id_batch
                .index_axis_mut(Axis(0), 0)
                .assign(clip.identity_frame.pixels());
            let id_leaf = tape.leaf(id_batch.into_dyn());
            let id = identity_graph(&tape, gen, id_leaf);
            let per = (lw.per > 0.0).then(|| {
                let gen_maps = setup.perceptual.features_graph(&tape, gen);
                // Target features carry no gradient; detach them as leaves.
                let gt_maps: Vec<crate::autodiff::Var> = setup
                    .perceptual
                    .features_graph(&tape, gt)
                    .into_iter()
                    .map(|m| tape.leaf(tape.value(m)))
                    .collect();
                crate::losses::perceptual_graph(&tape, &gen_maps, &gt_maps)
            });
            let au = (lw.au > 0.0).then(|| {
                let lower = tape.slice(gen, 2, HALF_ROW, HALF_ROW);
                let probs = au_classifier_graph(&tape, &bound, "auclf", setup.model_cfg, lower);
                let labels = tape.leaf(clip.label_batch().into_dyn());
                au_loss_graph(&tape, labels, probs, &weights.w, lw.dice_eps)
            });
            let total_node = total_graph(&tape, Some(rec), Some(id), per, au, &lw);

            let total_value = tape.scalar_value(total_node) as f64;
            if !total_value.is_finite() {
                return Err(Error::Train {
                    step,
                    message: format!(
                        "non-finite total loss on clip {}; aborting",
                        clip.clip_id
                    ),
                });
            }
            record.total += total_value;
            record.rec += tape.scalar_value(rec) as f64;
            record.id += tape.scalar_value(id) as f64;
            if let Some(p) = per {
                record.per += tape.scalar_value(p) as f64;
            }
            if let Some(a) = au {
                record.au += tape.scalar_value(a) as f64;
            }

            let mut grads = tape.backward(total_node);
            accumulate(
                &mut main_grads,
                grads_for(&mut grads, &bound, groups[0].param_names().iter()),
            );
            drop(grads);
            // Pretrained parts fine-tune on the raw AU loss only.
            if let Some(au_node) = au {
                if groups.len() > 1 {
                    let mut au_grads = tape.backward(au_node);
                    let ft_names: Vec<String> = groups[1..]
                        .iter()
                        .flat_map(|g| g.param_names())
                        .collect();
                    accumulate(
                        &mut ft_grads,
                        grads_for(&mut au_grads, &bound, ft_names.iter()),
                    );
                }
            }
        }
        let inv = 1.0 / clip_ids.len() as f32;
        scale_grads(&mut main_grads, inv);
        scale_grads(&mut ft_grads, inv);
        let nb = clip_ids.len() as f64;
        record.total /= nb;
        record.rec /= nb;
        record.id /= nb;
        record.per /= nb;
        record.au /= nb;

        groups[0].step(&mut params, &main_grads);
        for g in groups[1..].iter_mut() {
            g.step(&mut params, &ft_grads);
        }
        apply_bn_updates(&mut params, &bn_pending, 0.1);

        debug_assert_eq!(setup.perceptual.params().content_hash(), frozen_hash);
        losses.push(record);
        if cfg.log_every > 0 && step % cfg.log_every as u64 == 0 {
            log::info!(
                "train step {step}: total {:.5} rec {:.5} id {:.5} per {:.5} au {:.5}",
                record.total,
                record.rec,
                record.id,
                record.per,
                record.au
            );
        }
        let finished = step + 1 == total;
        if let Some(dir) = out_dir {
            let cadence_hit = cfg.ckpt_every > 0 && (step + 1) % cfg.ckpt_every as u64 == 0;
            if cadence_hit || finished {
                let ckpt = Checkpoint {
                    step: step + 1,
                    config_text: setup.config_text.clone(),
                    rng: RngState::capture(&rng),
                    params: params.clone(),
                    groups: groups.clone(),
                };
                ckpt.save(&dir.join(format!("ckpt_{:08}.bin", step + 1)))?;
            }
        }
    }
    Ok(TrainOutcome {
        params,
        groups,
        losses,
        step: total,
    })
}

/// Drive one identity image with audio: window the MFCCs per output frame,
/// encode the identity once, fuse per-frame features, run the fusion network
/// over the whole sequence, and decode every frame with the shared skips.
pub fn generate_video(
    identity: &VideoFrame,
    audio: &AudioTrack,
    params: &ParamMap<f32>,
    variant: GeneratorVariant,
    tcsan_cfg: &TcsanConfig,
    model_cfg: &ModelConfig,
    fps: f64,
) -> Result<Vec<VideoFrame>> {
    let n = (audio.duration() * fps).floor() as usize;
    if n == 0 {
        return Err(Error::Audio(format!(
            "audio too short for one frame at {fps} fps"
        )));
    }
    let coeffs = extract_mfcc(audio)?;
    let windows = window_mfcc(&coeffs, &frame_times(n, fps))?;

    let tape: Tape<f32> = Tape::new();
    let bound = params.bind(&tape);
    let mut id_batch = ndarray::Array4::<f32>::zeros((1, 3, FRAME_SIZE, FRAME_SIZE));
    id_batch.index_axis_mut(Axis(0), 0).assign(identity.pixels());
    let id_img = tape.leaf(id_batch.into_dyn());
    let (id_vec, skips) = identity_encoder_graph(&tape, &bound, "id_enc", model_cfg, id_img);

    let mut mfcc_batch =
        ndarray::Array4::<f32>::zeros((n, 1, crate::data::MFCC_COEFFS, crate::data::MFCC_WINDOW_COLS));
    for (i, w) in windows.iter().enumerate() {
        mfcc_batch
            .index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(w.coeffs());
    }
    let mfcc = tape.leaf(mfcc_batch.into_dyn());
    let (f_ak, _) = audio_encoder_graph(&tape, &bound, params, "audio_enc", model_cfg, mfcc, false);
    let f_au = if variant.use_audio2au {
        audio2au_graph(&tape, &bound, "a2au", model_cfg, mfcc).0
    } else {
        tape.leaf(ArrayD::zeros(IxDyn(&[n, AU_FEATURE_WIDTH])))
    };
    let id_rep = if n > 1 {
        tape.repeat_axis0(id_vec, n)
    } else {
        id_vec
    };
    let fused = tape.concat(1, &[id_rep, f_ak, f_au]);
    let f_t = if variant.use_tcsan {
        tcsan_graph(&tape, &bound, "tcsan", fused, tcsan_cfg)
    } else {
        tape.add_bias(
            tape.matmul(fused, bound.var("fuseproj.w")),
            bound.var("fuseproj.b"),
        )
    };
    let gen = decoder_graph(&tape, &bound, "dec", model_cfg, f_t, &skips);
    let out = tape.value(gen).into_dimensionality::<Ix4>().unwrap();
    (0..n)
        .map(|i| VideoFrame::from_clamped(out.index_axis(Axis(0), i).to_owned()))
        .collect()
}

/// Train one ablation variant and evaluate it on the test split with the
/// fixed pretrained AU classifier as the judge.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    train: &[SampleClip],
    test: &[SampleClip],
    variant: AblationVariant,
    cfg: &TrainConfig,
    tcsan_cfg: &TcsanConfig,
    model_cfg: &ModelConfig,
    a2au: &ParamMap<f32>,
    auclf: &ParamMap<f32>,
    perceptual: &dyn PerceptualExtractor,
    fps: f64,
) -> Result<(EvalReport, TrainOutcome)> {
    if test.is_empty() {
        return Err(Error::invalid("run_ablation: empty test split"));
    }
    let mut variant_cfg = cfg.clone();
    variant_cfg.loss_weights = variant.loss_weights(&cfg.loss_weights);
    let setup = TrainSetup {
        train_cfg: &variant_cfg,
        tcsan_cfg,
        model_cfg,
        variant: variant.generator(),
        a2au,
        auclf,
        perceptual,
        config_text: format!("variant = {}\n", variant.name()),
    };
    let outcome = train_full(train, &setup, None, None)?;
    let mut generated = Vec::with_capacity(test.len());
    for clip in test {
        generated.push(generate_video(
            &clip.identity_frame,
            &clip.audio,
            &outcome.params,
            variant.generator(),
            tcsan_cfg,
            model_cfg,
            fps,
        )?);
    }
    let report = crate::metrics::evaluate_many(
        &generated,
        test,
        auclf,
        "auclf",
        model_cfg,
        0.5,
    )?;
    Ok((report, outcome))
}

/// Mean per-parameter relative update size of a group between two parameter
/// maps; used to verify learning-rate routing.
pub fn mean_relative_delta(
    before: &ParamMap<f32>,
    after: &ParamMap<f32>,
    prefix: &str,
) -> f64 {
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for (name, p) in before.iter() {
        if !name.starts_with(prefix) || !p.trainable {
            continue;
        }
        let q = after.get(name);
        for (a, b) in p.value.iter().zip(q.iter()) {
            acc += (*a as f64 - *b as f64).abs();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_order_is_deterministic_and_covers_all_clips() {
        let a = epoch_order(7, 0, 5);
        let b = epoch_order(7, 0, 5);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        assert_ne!(epoch_order(7, 0, 5), epoch_order(7, 1, 5));
    }

    #[test]
    fn variant_table_is_consistent() {
        assert!(AblationVariant::Full.generator().use_tcsan);
        assert!(AblationVariant::Full.generator().use_audio2au);
        let base = LossWeights::default();
        let b = AblationVariant::Baseline.loss_weights(&base);
        assert_eq!((b.id, b.per, b.au), (0.0, 0.0, 0.0));
        assert!(b.rec > 0.0);
        assert!(AblationVariant::parse("nope").is_err());
        for v in AblationVariant::all() {
            assert_eq!(AblationVariant::parse(v.name()).unwrap(), v);
        }
    }

    #[test]
    fn step_clips_wrap_across_epochs() {
        let cfg = TrainConfig::default();
        for step in 0..12 {
            let ids = step_clips(&cfg, step, 4);
            assert_eq!(ids.len(), 1);
            assert!(ids[0] < 4);
        }
    }
}
