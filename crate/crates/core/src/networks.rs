//! Encoder/decoder/classifier networks around the fusion module: identity
//! encoder, audio encoder, audio-to-AU module, image decoder with skip
//! connections, AU classifier, and the pluggable frozen perceptual extractor.

use ndarray::{Array1, Array2, Array3, Array4, Axis, Ix2, Ix4};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnStats, Scalar, Tape, Var};
use crate::data::{
    AuLabelVector, AuProbVector, MfccFrame, VideoFrame, AU_COUNT, AU_NAMES, FRAME_SIZE, HALF_ROW,
    MFCC_COEFFS, MFCC_WINDOW_COLS,
};
use crate::error::{Error, Result};
use crate::params::{uniform_init, zeros_init, BoundParams, ParamMap};

/// Identity feature width (f_id).
pub const ID_WIDTH: usize = 512;
/// Per-frame audio feature width (f_ak).
pub const AUDIO_WIDTH: usize = 512;
/// Per-AU feature width from the audio-to-AU module.
pub const AU_SUB_WIDTH: usize = 64;
/// Concatenated AU feature width (five sub-vectors).
pub const AU_FEATURE_WIDTH: usize = AU_SUB_WIDTH * AU_COUNT;
/// Fused per-frame feature width: identity + audio + AU segments.
pub const FUSED_WIDTH: usize = ID_WIDTH + AUDIO_WIDTH + AU_FEATURE_WIDTH;

/// Segment boundaries inside a fused frame feature.
pub const ID_SEGMENT: std::ops::Range<usize> = 0..ID_WIDTH;
pub const AUDIO_SEGMENT: std::ops::Range<usize> = ID_WIDTH..ID_WIDTH + AUDIO_WIDTH;
pub const AU_SEGMENT: std::ops::Range<usize> = ID_WIDTH + AUDIO_WIDTH..FUSED_WIDTH;

/// Channel widths and sizes for every network in the generator. The defaults
/// are desk-scale so the full pipeline trains in minutes on a CPU.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Identity encoder stage-1 channels; stages double: b, 2b, 4b, 8b.
    pub id_base: usize,
    /// Audio encoder stage-1 channels; five stages: b..16b.
    pub audio_base: usize,
    /// AU classifier stage-1 channels.
    pub auclf_base: usize,
    /// LSTM hidden width in the audio-to-AU trunk.
    pub a2au_hidden: usize,
    /// Perceptual pyramid stage-1 channels.
    pub perc_base: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            id_base: 8,
            audio_base: 16,
            auclf_base: 8,
            a2au_hidden: 64,
            perc_base: 8,
        }
    }
}

impl ModelConfig {
    pub fn id_channels(&self) -> [usize; 4] {
        [self.id_base, self.id_base * 2, self.id_base * 4, self.id_base * 8]
    }

    pub fn audio_channels(&self) -> [usize; 5] {
        [
            self.audio_base,
            self.audio_base * 2,
            self.audio_base * 4,
            self.audio_base * 8,
            self.audio_base * 16,
        ]
    }

    pub fn auclf_channels(&self) -> [usize; 4] {
        [
            self.auclf_base,
            self.auclf_base * 2,
            self.auclf_base * 2,
            self.auclf_base * 4,
        ]
    }

    pub fn perc_channels(&self) -> [usize; 4] {
        [self.perc_base, self.perc_base * 2, self.perc_base * 4, self.perc_base * 8]
    }

    /// Decoder output channels after each of the six transposed convolutions.
    pub fn dec_channels(&self) -> [usize; 6] {
        [
            self.id_base * 4,
            self.id_base * 2,
            self.id_base,
            self.id_base,
            self.id_base,
            3,
        ]
    }

    /// Channels of the decoder's FC-produced 7x7 seed map.
    pub fn dec_seed_channels(&self) -> usize {
        self.id_base * 4
    }
}

/// 512-dim identity vector plus the four encoder maps kept for decoder skips.
#[derive(Debug, Clone)]
pub struct IdentityFeature {
    pub vector: Array1<f32>,
    /// One per conv stage, spatial sizes 56, 28, 14, 7.
    pub skips: Vec<Array3<f32>>,
}

#[derive(Debug, Clone)]
pub struct AudioFeature {
    pub vector: Array1<f32>,
}

/// 320-dim concatenation of five 64-dim per-AU sub-vectors, canonical order.
#[derive(Debug, Clone)]
pub struct AuFeature {
    pub vector: Array1<f32>,
}

impl AuFeature {
    pub fn sub(&self, i: usize) -> ndarray::ArrayView1<'_, f32> {
        self.vector
            .slice(ndarray::s![i * AU_SUB_WIDTH..(i + 1) * AU_SUB_WIDTH])
    }
}

/// 1344-dim fused per-frame feature f_id ++ f_ak ++ f_au.
#[derive(Debug, Clone)]
pub struct FusedFrameFeature {
    pub vector: Array1<f32>,
}

/// Concatenate the three modality features; segment layout is fixed.
pub fn fuse_features(
    id: &IdentityFeature,
    audio: &AudioFeature,
    au: &AuFeature,
) -> Result<FusedFrameFeature> {
    if id.vector.len() != ID_WIDTH || audio.vector.len() != AUDIO_WIDTH || au.vector.len() != AU_FEATURE_WIDTH
    {
        return Err(Error::shape(
            "fuse_features",
            format!("{ID_WIDTH}/{AUDIO_WIDTH}/{AU_FEATURE_WIDTH}"),
            format!(
                "{}/{}/{}",
                id.vector.len(),
                audio.vector.len(),
                au.vector.len()
            ),
        ));
    }
    let mut vector = Array1::<f32>::zeros(FUSED_WIDTH);
    vector.slice_mut(ndarray::s![ID_SEGMENT]).assign(&id.vector);
    vector
        .slice_mut(ndarray::s![AUDIO_SEGMENT])
        .assign(&audio.vector);
    vector.slice_mut(ndarray::s![AU_SEGMENT]).assign(&au.vector);
    Ok(FusedFrameFeature { vector })
}

// ---------------------------------------------------------------------------
// Identity encoder
// ---------------------------------------------------------------------------

pub fn init_identity_encoder(
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
    params: &mut ParamMap<f32>,
    prefix: &str,
) {
    let chans = cfg.id_channels();
    let mut cin = 3;
    for (i, cout) in chans.into_iter().enumerate() {
        params.insert(
            format!("{prefix}.conv{}.w", i + 1),
            uniform_init(rng, &[cout, cin, 4, 4], cin * 16),
            true,
        );
        params.insert(format!("{prefix}.conv{}.b", i + 1), zeros_init(&[cout]), true);
        cin = cout;
    }
    let flat = chans[3] * 7 * 7;
    params.insert(
        format!("{prefix}.fc.w"),
        uniform_init(rng, &[flat, ID_WIDTH], flat),
        true,
    );
    params.insert(format!("{prefix}.fc.b"), zeros_init(&[ID_WIDTH]), true);
}

/// Identity encoder graph on a (N,3,112,112) batch: four stride-2 4x4 convs
/// with ReLU, then a fully connected layer. Returns the 512 vector and the
/// four post-activation maps for decoder skips.
pub fn identity_encoder_graph<F: Scalar>(
    tape: &Tape<F>,
    bound: &BoundParams,
    prefix: &str,
    cfg: &ModelConfig,
    img: Var,
) -> (Var, Vec<Var>) {
    let n = tape.shape(img)[0];
    let mut h = img;
    let mut skips = Vec::with_capacity(4);
    for i in 1..=4 {
        let c = tape.conv2d(
            h,
            bound.var(&format!("{prefix}.conv{i}.w")),
            bound.var(&format!("{prefix}.conv{i}.b")),
            (2, 2),
            (1, 1),
        );
        h = tape.relu(c);
        skips.push(h);
    }
    let flat_dim = cfg.id_channels()[3] * 7 * 7;
    let flat = tape.reshape(h, &[n, flat_dim]);
    let vec = tape.add_bias(
        tape.matmul(flat, bound.var(&format!("{prefix}.fc.w"))),
        bound.var(&format!("{prefix}.fc.b")),
    );
    (vec, skips)
}

/// Encode one identity frame (evaluation mode).
pub fn encode_identity(
    img: &VideoFrame,
    params: &ParamMap<f32>,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<IdentityFeature> {
    let tape: Tape<f32> = Tape::new();
    let bound = params.bind(&tape);
    let mut batch = Array4::<f32>::zeros((1, 3, FRAME_SIZE, FRAME_SIZE));
    batch.index_axis_mut(Axis(0), 0).assign(img.pixels());
    let x = tape.leaf(batch.into_dyn());
    let (vec, skips) = identity_encoder_graph(&tape, &bound, prefix, cfg, x);
    let vector = tape
        .value(vec)
        .into_shape_with_order(ID_WIDTH)
        .unwrap()
        .into_dimensionality()
        .unwrap();
    let skips = skips
        .into_iter()
        .map(|s| {
            let v = tape.value(s);
            let d = v.shape().to_vec();
            v.into_shape_with_order((d[1], d[2], d[3]))
                .unwrap()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap()
        })
        .collect();
    Ok(IdentityFeature { vector, skips })
}

// ---------------------------------------------------------------------------
// Audio encoder
// ---------------------------------------------------------------------------

pub fn init_audio_encoder(
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
    params: &mut ParamMap<f32>,
    prefix: &str,
) {
    let chans = cfg.audio_channels();
    let mut cin = 1;
    for (i, cout) in chans.into_iter().enumerate() {
        params.insert(
            format!("{prefix}.conv{}.w", i + 1),
            uniform_init(rng, &[cout, cin, 3, 3], cin * 9),
            true,
        );
        params.insert(format!("{prefix}.conv{}.b", i + 1), zeros_init(&[cout]), true);
        params.insert(
            format!("{prefix}.bn{}.gamma", i + 1),
            ndarray::ArrayD::from_elem(ndarray::IxDyn(&[cout]), 1.0f32),
            true,
        );
        params.insert(format!("{prefix}.bn{}.beta", i + 1), zeros_init(&[cout]), true);
        params.insert(
            format!("{prefix}.bn{}.running_mean", i + 1),
            zeros_init(&[cout]),
            false,
        );
        params.insert(
            format!("{prefix}.bn{}.running_var", i + 1),
            ndarray::ArrayD::from_elem(ndarray::IxDyn(&[cout]), 1.0f32),
            false,
        );
        cin = cout;
    }
    let flat = chans[4];
    params.insert(
        format!("{prefix}.fc1.w"),
        uniform_init(rng, &[flat, AUDIO_WIDTH], flat),
        true,
    );
    params.insert(format!("{prefix}.fc1.b"), zeros_init(&[AUDIO_WIDTH]), true);
    params.insert(
        format!("{prefix}.fc2.w"),
        uniform_init(rng, &[AUDIO_WIDTH, AUDIO_WIDTH], AUDIO_WIDTH),
        true,
    );
    params.insert(format!("{prefix}.fc2.b"), zeros_init(&[AUDIO_WIDTH]), true);
}

/// Pending running-statistics update from a training-mode batch norm.
pub struct BnUpdate<F> {
    /// Parameter name prefix, e.g. `audio_enc.bn3`.
    pub bn_prefix: String,
    pub stats: BnStats<F>,
}

/// Apply accumulated batch-norm updates to the running statistics.
pub fn apply_bn_updates<F: Scalar>(params: &mut ParamMap<F>, updates: &[BnUpdate<F>], momentum: f64) {
    let m = F::of_f64(momentum);
    let one_m = F::of_f64(1.0 - momentum);
    for u in updates {
        let n = u.stats.count as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let rm = params.get_mut(&format!("{}.running_mean", u.bn_prefix));
        for (r, b) in rm.iter_mut().zip(u.stats.mean.iter()) {
            *r = one_m * *r + m * *b;
        }
        let rv = params.get_mut(&format!("{}.running_var", u.bn_prefix));
        for (r, b) in rv.iter_mut().zip(u.stats.var.iter()) {
            *r = one_m * *r + m * (*b * F::of_f64(unbias));
        }
    }
}

/// Audio encoder graph on (N,1,12,28) MFCC windows: five 3x3 convs with batch
/// norm and ReLU, pooling the window down to 1x1, then two fully connected
/// layers to the 512 audio feature.
pub fn audio_encoder_graph<F: Scalar>(
    tape: &Tape<F>,
    bound: &BoundParams,
    params: &ParamMap<F>,
    prefix: &str,
    cfg: &ModelConfig,
    x: Var,
    training: bool,
) -> (Var, Vec<BnUpdate<F>>) {
    let n = tape.shape(x)[0];
    let strides: [(usize, usize); 5] = [(2, 2), (2, 2), (2, 2), (2, 2), (1, 2)];
    let mut h = x;
    let mut updates = Vec::new();
    for i in 1..=5 {
        let c = tape.conv2d(
            h,
            bound.var(&format!("{prefix}.conv{i}.w")),
            bound.var(&format!("{prefix}.conv{i}.b")),
            strides[i - 1],
            (1, 1),
        );
        let rm = params
            .get(&format!("{prefix}.bn{i}.running_mean"))
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let rv = params
            .get(&format!("{prefix}.bn{i}.running_var"))
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let (bn, stats) = tape.batchnorm2d(
            c,
            bound.var(&format!("{prefix}.bn{i}.gamma")),
            bound.var(&format!("{prefix}.bn{i}.beta")),
            &rm,
            &rv,
            training,
            F::of_f64(1e-5),
        );
        if let Some(stats) = stats {
            updates.push(BnUpdate {
                bn_prefix: format!("{prefix}.bn{i}"),
                stats,
            });
        }
        h = tape.relu(bn);
    }
    let flat_dim = cfg.audio_channels()[4];
    let flat = tape.reshape(h, &[n, flat_dim]);
    let f1 = tape.relu(tape.add_bias(
        tape.matmul(flat, bound.var(&format!("{prefix}.fc1.w"))),
        bound.var(&format!("{prefix}.fc1.b")),
    ));
    let f2 = tape.add_bias(
        tape.matmul(f1, bound.var(&format!("{prefix}.fc2.w"))),
        bound.var(&format!("{prefix}.fc2.b")),
    );
    (f2, updates)
}

fn mfcc_batch_array(windows: &[&MfccFrame]) -> Array4<f32> {
    let n = windows.len();
    let mut out = Array4::<f32>::zeros((n, 1, MFCC_COEFFS, MFCC_WINDOW_COLS));
    for (i, w) in windows.iter().enumerate() {
        out.index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(w.coeffs());
    }
    out
}

/// Encode one MFCC window in evaluation mode (frozen running statistics).
pub fn encode_audio(
    mfcc: &MfccFrame,
    params: &ParamMap<f32>,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<AudioFeature> {
    let batch = encode_audio_batch(&[mfcc], params, prefix, cfg)?;
    Ok(AudioFeature {
        vector: batch.row(0).to_owned(),
    })
}

/// Evaluation-mode batch encoding; row i equals the single-window encoding of
/// window i.
pub fn encode_audio_batch(
    windows: &[&MfccFrame],
    params: &ParamMap<f32>,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<Array2<f32>> {
    if windows.is_empty() {
        return Err(Error::invalid("no MFCC windows"));
    }
    let tape: Tape<f32> = Tape::new();
    let bound = params.bind(&tape);
    let x = tape.leaf(mfcc_batch_array(windows).into_dyn());
    let (out, _) = audio_encoder_graph(&tape, &bound, params, prefix, cfg, x, false);
    Ok(tape
        .value(out)
        .into_dimensionality::<Ix2>()
        .unwrap())
}

// ---------------------------------------------------------------------------
// Audio-to-AU module
// ---------------------------------------------------------------------------

pub fn init_audio2au(
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
    params: &mut ParamMap<f32>,
    prefix: &str,
) {
    let hidden = cfg.a2au_hidden;
    params.insert(
        format!("{prefix}.convf.w"),
        uniform_init(rng, &[16, 1, 3, 1], 3),
        true,
    );
    params.insert(format!("{prefix}.convf.b"), zeros_init(&[16]), true);
    params.insert(
        format!("{prefix}.convt.w"),
        uniform_init(rng, &[32, 16, 1, 3], 48),
        true,
    );
    params.insert(format!("{prefix}.convt.b"), zeros_init(&[32]), true);
    let step_dim = 32 * 6;
    for (layer, in_dim) in [(1usize, step_dim), (2usize, hidden)] {
        params.insert(
            format!("{prefix}.lstm{layer}.w_ih"),
            uniform_init(rng, &[in_dim, 4 * hidden], in_dim),
            true,
        );
        params.insert(
            format!("{prefix}.lstm{layer}.w_hh"),
            uniform_init(rng, &[hidden, 4 * hidden], hidden),
            true,
        );
        params.insert(format!("{prefix}.lstm{layer}.b"), zeros_init(&[4 * hidden]), true);
    }
    for au in AU_NAMES {
        let au = au.to_ascii_lowercase();
        params.insert(
            format!("{prefix}.{au}.fc1.w"),
            uniform_init(rng, &[hidden, AU_SUB_WIDTH], hidden),
            true,
        );
        params.insert(format!("{prefix}.{au}.fc1.b"), zeros_init(&[AU_SUB_WIDTH]), true);
        params.insert(
            format!("{prefix}.{au}.fc2.w"),
            uniform_init(rng, &[AU_SUB_WIDTH, AU_SUB_WIDTH], AU_SUB_WIDTH),
            true,
        );
        params.insert(format!("{prefix}.{au}.fc2.b"), zeros_init(&[AU_SUB_WIDTH]), true);
        params.insert(
            format!("{prefix}.{au}.fc3.w"),
            uniform_init(rng, &[AU_SUB_WIDTH, 1], AU_SUB_WIDTH),
            true,
        );
        params.insert(format!("{prefix}.{au}.fc3.b"), zeros_init(&[1]), true);
    }
}

/// One LSTM layer over a list of per-step inputs; returns the final hidden
/// state. Gate order: input, forget, cell, output. State starts at zero.
fn lstm_graph<F: Scalar>(
    tape: &Tape<F>,
    steps: &[Var],
    w_ih: Var,
    w_hh: Var,
    b: Var,
    batch: usize,
    hidden: usize,
) -> Var {
    let mut h = tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[batch, hidden])));
    let mut c = tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[batch, hidden])));
    for &x in steps {
        let gates = tape.add_bias(
            tape.add(tape.matmul(x, w_ih), tape.matmul(h, w_hh)),
            b,
        );
        let i = tape.sigmoid(tape.slice(gates, 1, 0, hidden));
        let f = tape.sigmoid(tape.slice(gates, 1, hidden, hidden));
        let g = tape.tanh(tape.slice(gates, 1, 2 * hidden, hidden));
        let o = tape.sigmoid(tape.slice(gates, 1, 3 * hidden, hidden));
        c = tape.add(tape.mul(f, c), tape.mul(i, g));
        h = tape.mul(o, tape.tanh(c));
    }
    h
}

/// Audio-to-AU graph on (N,1,12,28) windows. The trunk convolves across the
/// frequency and time axes and runs two LSTM layers over the 28 time steps;
/// five per-AU heads then emit a 64-dim feature (penultimate layer) and an
/// occurrence probability. Returns (features (N,320), probabilities (N,5)).
pub fn audio2au_graph<F: Scalar>(
    tape: &Tape<F>,
    bound: &BoundParams,
    prefix: &str,
    cfg: &ModelConfig,
    x: Var,
) -> (Var, Var) {
    let n = tape.shape(x)[0];
    let hidden = cfg.a2au_hidden;
    let cf = tape.relu(tape.conv2d(
        x,
        bound.var(&format!("{prefix}.convf.w")),
        bound.var(&format!("{prefix}.convf.b")),
        (2, 1),
        (1, 0),
    ));
    let ct = tape.relu(tape.conv2d(
        cf,
        bound.var(&format!("{prefix}.convt.w")),
        bound.var(&format!("{prefix}.convt.b")),
        (1, 1),
        (0, 1),
    ));
    // (N, 32, 6, 28) -> 28 per-step features of width 192.
    let steps: Vec<Var> = (0..MFCC_WINDOW_COLS)
        .map(|t| {
            let s = tape.slice(ct, 3, t, 1);
            tape.reshape(s, &[n, 32 * 6])
        })
        .collect();
    let h1_steps: Vec<Var> = {
        // First layer produces a hidden state per step for the second layer.
        let w_ih = bound.var(&format!("{prefix}.lstm1.w_ih"));
        let w_hh = bound.var(&format!("{prefix}.lstm1.w_hh"));
        let b = bound.var(&format!("{prefix}.lstm1.b"));
        let mut h = tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[n, hidden])));
        let mut c = tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[n, hidden])));
        let mut outs = Vec::with_capacity(steps.len());
        for &xst in &steps {
            let gates = tape.add_bias(tape.add(tape.matmul(xst, w_ih), tape.matmul(h, w_hh)), b);
            let i = tape.sigmoid(tape.slice(gates, 1, 0, hidden));
            let f = tape.sigmoid(tape.slice(gates, 1, hidden, hidden));
            let g = tape.tanh(tape.slice(gates, 1, 2 * hidden, hidden));
            let o = tape.sigmoid(tape.slice(gates, 1, 3 * hidden, hidden));
            c = tape.add(tape.mul(f, c), tape.mul(i, g));
            h = tape.mul(o, tape.tanh(c));
            outs.push(h);
        }
        outs
    };
    let h2 = lstm_graph(
        tape,
        &h1_steps,
        bound.var(&format!("{prefix}.lstm2.w_ih")),
        bound.var(&format!("{prefix}.lstm2.w_hh")),
        bound.var(&format!("{prefix}.lstm2.b")),
        n,
        hidden,
    );
    let mut feats = Vec::with_capacity(AU_COUNT);
    let mut logits = Vec::with_capacity(AU_COUNT);
    for au in AU_NAMES {
        let au = au.to_ascii_lowercase();
        let f1 = tape.relu(tape.add_bias(
            tape.matmul(h2, bound.var(&format!("{prefix}.{au}.fc1.w"))),
            bound.var(&format!("{prefix}.{au}.fc1.b")),
        ));
        let f2 = tape.relu(tape.add_bias(
            tape.matmul(f1, bound.var(&format!("{prefix}.{au}.fc2.w"))),
            bound.var(&format!("{prefix}.{au}.fc2.b")),
        ));
        feats.push(f2);
        logits.push(tape.add_bias(
            tape.matmul(f2, bound.var(&format!("{prefix}.{au}.fc3.w"))),
            bound.var(&format!("{prefix}.{au}.fc3.b")),
        ));
    }
    let feat = tape.concat(1, &feats);
    let probs = tape.sigmoid(tape.concat(1, &logits));
    (feat, probs)
}

/// Full pretraining forward: AU occurrence probabilities for one window.
pub fn audio2au_pretrain_forward(
    mfcc: &MfccFrame,
    params: &ParamMap<f32>,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<AuProbVector> {
    let (_, probs) = audio2au_batch(&[mfcc], params, prefix, cfg)?;
    let row = probs.row(0);
    AuProbVector::new([row[0], row[1], row[2], row[3], row[4]])
}

/// The 320-dim AU representation (the penultimate layer of each head).
/// Applying the removed final layer plus sigmoid reproduces
/// [`audio2au_pretrain_forward`] exactly.
pub fn audio2au_feature(
    mfcc: &MfccFrame,
    params: &ParamMap<f32>,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<AuFeature> {
    let (feats, _) = audio2au_batch(&[mfcc], params, prefix, cfg)?;
    Ok(AuFeature {
        vector: feats.row(0).to_owned(),
    })
}

/// Batched features and probabilities for a list of windows.
pub fn audio2au_batch(
    windows: &[&MfccFrame],
    params: &ParamMap<f32>,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<(Array2<f32>, Array2<f32>)> {
    if windows.is_empty() {
        return Err(Error::invalid("no MFCC windows"));
    }
    let tape: Tape<f32> = Tape::new();
    let bound = params.bind(&tape);
    let x = tape.leaf(mfcc_batch_array(windows).into_dyn());
    let (feat, probs) = audio2au_graph(&tape, &bound, prefix, cfg, x);
    Ok((
        tape.value(feat).into_dimensionality::<Ix2>().unwrap(),
        tape.value(probs).into_dimensionality::<Ix2>().unwrap(),
    ))
}

// ---------------------------------------------------------------------------
// Image decoder
// ---------------------------------------------------------------------------

pub fn init_decoder(
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
    params: &mut ParamMap<f32>,
    prefix: &str,
) {
    let seed_c = cfg.dec_seed_channels();
    let flat = seed_c * 7 * 7;
    params.insert(
        format!("{prefix}.fc.w"),
        uniform_init(rng, &[512, flat], 512),
        true,
    );
    params.insert(format!("{prefix}.fc.b"), zeros_init(&[flat]), true);
    let id_chans = cfg.id_channels();
    let dec = cfg.dec_channels();
    // Inputs per stage: seed/current channels plus the matching skip.
    let ins = [
        seed_c + id_chans[3],
        dec[0] + id_chans[2],
        dec[1] + id_chans[1],
        dec[2] + id_chans[0],
        dec[3],
        dec[4],
    ];
    let kernels = [4usize, 4, 4, 4, 3, 3];
    for i in 0..6 {
        let k = kernels[i];
        params.insert(
            format!("{prefix}.tconv{}.w", i + 1),
            uniform_init(rng, &[ins[i], dec[i], k, k], ins[i] * k * k),
            true,
        );
        params.insert(format!("{prefix}.tconv{}.b", i + 1), zeros_init(&[dec[i]]), true);
    }
}

/// Decoder graph: fused frame features (N,512) plus the four identity skips
/// (each (1,C,H,W), broadcast over the batch) to frames (N,3,112,112) via a
/// fully connected layer and six transposed convolutions with sigmoid output.
pub fn decoder_graph<F: Scalar>(
    tape: &Tape<F>,
    bound: &BoundParams,
    prefix: &str,
    cfg: &ModelConfig,
    f: Var,
    skips: &[Var],
) -> Var {
    let n = tape.shape(f)[0];
    let seed_c = cfg.dec_seed_channels();
    let fc = tape.relu(tape.add_bias(
        tape.matmul(f, bound.var(&format!("{prefix}.fc.w"))),
        bound.var(&format!("{prefix}.fc.b")),
    ));
    let mut h = tape.reshape(fc, &[n, seed_c, 7, 7]);
    // Skips pair by spatial resolution: 7, 14, 28, 56.
    for (i, &skip) in [skips[3], skips[2], skips[1], skips[0]].iter().enumerate() {
        let rep = if n > 1 { tape.repeat_axis0(skip, n) } else { skip };
        let cat = tape.concat(1, &[h, rep]);
        let t = tape.conv_transpose2d(
            cat,
            bound.var(&format!("{prefix}.tconv{}.w", i + 1)),
            bound.var(&format!("{prefix}.tconv{}.b", i + 1)),
            2,
            1,
        );
        h = tape.relu(t);
    }
    let t5 = tape.relu(tape.conv_transpose2d(
        h,
        bound.var(&format!("{prefix}.tconv5.w")),
        bound.var(&format!("{prefix}.tconv5.b")),
        1,
        1,
    ));
    let t6 = tape.conv_transpose2d(
        t5,
        bound.var(&format!("{prefix}.tconv6.w")),
        bound.var(&format!("{prefix}.tconv6.b")),
        1,
        1,
    );
    tape.sigmoid(t6)
}

/// Expected skip shapes for validation: (C,H,W) per stage.
fn expected_skip_dims(cfg: &ModelConfig) -> [(usize, usize, usize); 4] {
    let c = cfg.id_channels();
    [(c[0], 56, 56), (c[1], 28, 28), (c[2], 14, 14), (c[3], 7, 7)]
}

/// Decode one frame from a 512-dim fused feature and identity skips.
pub fn decode_frame(
    f_tk: &Array1<f32>,
    identity: &IdentityFeature,
    params: &ParamMap<f32>,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<VideoFrame> {
    if f_tk.len() != 512 {
        return Err(Error::shape("decode_frame", "512", format!("{}", f_tk.len())));
    }
    if identity.skips.len() != 4 {
        return Err(Error::shape(
            "decode_frame",
            "4 skip maps",
            format!("{}", identity.skips.len()),
        ));
    }
    for (skip, want) in identity.skips.iter().zip(expected_skip_dims(cfg)) {
        if skip.dim() != want {
            return Err(Error::shape(
                "decode_frame",
                format!("skip {want:?}"),
                format!("{:?}", skip.dim()),
            ));
        }
    }
    let tape: Tape<f32> = Tape::new();
    let bound = params.bind(&tape);
    let f = tape.leaf(
        f_tk.clone()
            .into_shape_with_order((1, 512))
            .unwrap()
            .into_dyn(),
    );
    let skips: Vec<Var> = identity
        .skips
        .iter()
        .map(|s| {
            let d = s.dim();
            tape.leaf(
                s.clone()
                    .into_shape_with_order((1, d.0, d.1, d.2))
                    .unwrap()
                    .into_dyn(),
            )
        })
        .collect();
    let out = decoder_graph(&tape, &bound, prefix, cfg, f, &skips);
    let v = tape.value(out).into_dimensionality::<Ix4>().unwrap();
    let img = v.index_axis(Axis(0), 0).to_owned();
    VideoFrame::from_clamped(img)
}

// ---------------------------------------------------------------------------
// AU classifier
// ---------------------------------------------------------------------------

pub fn init_au_classifier(
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
    params: &mut ParamMap<f32>,
    prefix: &str,
) {
    let chans = cfg.auclf_channels();
    let mut cin = 3;
    for (i, cout) in chans.into_iter().enumerate() {
        params.insert(
            format!("{prefix}.conv{}.w", i + 1),
            uniform_init(rng, &[cout, cin, 3, 3], cin * 9),
            true,
        );
        params.insert(format!("{prefix}.conv{}.b", i + 1), zeros_init(&[cout]), true);
        cin = cout;
    }
    let flat = chans[3] * 14 * 28;
    params.insert(
        format!("{prefix}.fc1.w"),
        uniform_init(rng, &[flat, 128], flat),
        true,
    );
    params.insert(format!("{prefix}.fc1.b"), zeros_init(&[128]), true);
    params.insert(format!("{prefix}.fc2.w"), uniform_init(rng, &[128, 64], 128), true);
    params.insert(format!("{prefix}.fc2.b"), zeros_init(&[64]), true);
    params.insert(
        format!("{prefix}.fc3.w"),
        uniform_init(rng, &[64, AU_COUNT], 64),
        true,
    );
    params.insert(format!("{prefix}.fc3.b"), zeros_init(&[AU_COUNT]), true);
}

/// AU classifier graph on lower-face crops (N,3,56,112): four 3x3 convs with
/// ReLU, max pooling after every second conv, then three fully connected
/// layers with sigmoid probabilities.
pub fn au_classifier_graph<F: Scalar>(
    tape: &Tape<F>,
    bound: &BoundParams,
    prefix: &str,
    cfg: &ModelConfig,
    x: Var,
) -> Var {
    let n = tape.shape(x)[0];
    let mut h = x;
    for i in 1..=4 {
        let c = tape.conv2d(
            h,
            bound.var(&format!("{prefix}.conv{i}.w")),
            bound.var(&format!("{prefix}.conv{i}.b")),
            (1, 1),
            (1, 1),
        );
        h = tape.relu(c);
        if i % 2 == 0 {
            h = tape.maxpool2d(h, 2);
        }
    }
    let flat_dim = cfg.auclf_channels()[3] * 14 * 28;
    let flat = tape.reshape(h, &[n, flat_dim]);
    let f1 = tape.relu(tape.add_bias(
        tape.matmul(flat, bound.var(&format!("{prefix}.fc1.w"))),
        bound.var(&format!("{prefix}.fc1.b")),
    ));
    let f2 = tape.relu(tape.add_bias(
        tape.matmul(f1, bound.var(&format!("{prefix}.fc2.w"))),
        bound.var(&format!("{prefix}.fc2.b")),
    ));
    let logits = tape.add_bias(
        tape.matmul(f2, bound.var(&format!("{prefix}.fc3.w"))),
        bound.var(&format!("{prefix}.fc3.b")),
    );
    tape.sigmoid(logits)
}

/// Classify AU occurrences on one lower-face crop (3,56,112).
pub fn au_classify(
    lower_face: &Array3<f32>,
    params: &ParamMap<f32>,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<AuProbVector> {
    let probs = au_classify_batch(std::slice::from_ref(lower_face), params, prefix, cfg)?;
    let row = probs.row(0);
    AuProbVector::new([row[0], row[1], row[2], row[3], row[4]])
}

/// Batched lower-face classification.
pub fn au_classify_batch(
    crops: &[Array3<f32>],
    params: &ParamMap<f32>,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<Array2<f32>> {
    if crops.is_empty() {
        return Err(Error::invalid("no crops"));
    }
    for c in crops {
        if c.dim() != (3, HALF_ROW, FRAME_SIZE) {
            return Err(Error::shape(
                "au_classify",
                format!("3x{HALF_ROW}x{FRAME_SIZE} lower face"),
                format!("{:?}", c.dim()),
            ));
        }
    }
    let tape: Tape<f32> = Tape::new();
    let bound = params.bind(&tape);
    let mut batch = Array4::<f32>::zeros((crops.len(), 3, HALF_ROW, FRAME_SIZE));
    for (i, c) in crops.iter().enumerate() {
        batch.index_axis_mut(Axis(0), i).assign(c);
    }
    let x = tape.leaf(batch.into_dyn());
    let out = au_classifier_graph(&tape, &bound, prefix, cfg, x);
    Ok(tape.value(out).into_dimensionality::<Ix2>().unwrap())
}

/// Classifier probabilities binarized against ground truth labels.
pub fn classify_lower_halves(
    frames: &[VideoFrame],
    params: &ParamMap<f32>,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<Vec<AuProbVector>> {
    let crops: Vec<Array3<f32>> = frames.iter().map(|f| f.lower_half().to_owned()).collect();
    let probs = au_classify_batch(&crops, params, prefix, cfg)?;
    Ok(probs
        .rows()
        .into_iter()
        .map(|r| AuProbVector::new([r[0], r[1], r[2], r[3], r[4]]).unwrap())
        .collect())
}

// ---------------------------------------------------------------------------
// Perceptual feature extractor
// ---------------------------------------------------------------------------

/// Frozen feature pyramid used by the perceptual loss: ordered named layers,
/// each mapping its predecessor to a spatially smaller feature map.
pub trait PerceptualExtractor {
    fn layer_names(&self) -> Vec<String>;
    /// Feature maps for a batch (N,3,112,112), one Var per layer.
    fn features_graph(&self, tape: &Tape<f32>, img: Var) -> Vec<Var>;
    /// Frozen parameters (hashable, serializable, never updated).
    fn params(&self) -> &ParamMap<f32>;

    /// Evaluate the pyramid on one frame.
    fn features(&self, img: &VideoFrame) -> Vec<Array3<f32>> {
        let tape: Tape<f32> = Tape::new();
        let mut batch = Array4::<f32>::zeros((1, 3, FRAME_SIZE, FRAME_SIZE));
        batch.index_axis_mut(Axis(0), 0).assign(img.pixels());
        let x = tape.leaf(batch.into_dyn());
        self.features_graph(&tape, x)
            .into_iter()
            .map(|v| {
                let a = tape.value(v);
                let d = a.shape().to_vec();
                a.into_shape_with_order((d[1], d[2], d[3]))
                    .unwrap()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
            })
            .collect()
    }
}

/// Check the extractor interface contract: at least two layers with strictly
/// decreasing spatial size.
pub fn validate_extractor<E: PerceptualExtractor + ?Sized>(extractor: &E) -> Result<()> {
    let names = extractor.layer_names();
    if names.len() < 2 {
        return Err(Error::invalid(format!(
            "perceptual extractor needs at least 2 layers, found {}",
            names.len()
        )));
    }
    let zero = VideoFrame::new(Array3::zeros((3, FRAME_SIZE, FRAME_SIZE)))?;
    let maps = extractor.features(&zero);
    if maps.len() != names.len() {
        return Err(Error::invalid("extractor layer list does not match its output"));
    }
    let mut last = usize::MAX;
    for m in &maps {
        let (_, h, w) = m.dim();
        if h.max(w) >= last {
            return Err(Error::invalid(
                "perceptual extractor spatial sizes must strictly decrease",
            ));
        }
        last = h.max(w);
    }
    Ok(())
}

/// Default extractor: a fixed, seeded, randomly initialized four-stage conv
/// pyramid (stride 2, ReLU), kept frozen throughout training. Externally
/// trained weights can be dropped in through [`ConvPyramid::from_params`].
pub struct ConvPyramid {
    params: ParamMap<f32>,
    channels: [usize; 4],
}

impl ConvPyramid {
    pub const PREFIX: &'static str = "perc";

    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamMap::new();
        let chans = cfg.perc_channels();
        let mut cin = 3;
        for (i, cout) in chans.into_iter().enumerate() {
            params.insert(
                format!("{}.conv{}.w", Self::PREFIX, i + 1),
                uniform_init(rng, &[cout, cin, 3, 3], cin * 9),
                false,
            );
            params.insert(
                format!("{}.conv{}.b", Self::PREFIX, i + 1),
                zeros_init(&[cout]),
                false,
            );
            cin = cout;
        }
        ConvPyramid {
            params,
            channels: chans,
        }
    }

    /// Adopt externally supplied weights (must carry the same names/shapes
    /// as [`ConvPyramid::init`] produces).
    pub fn from_params(params: ParamMap<f32>) -> Result<Self> {
        let mut channels = [0usize; 4];
        for i in 0..4 {
            let name = format!("{}.conv{}.w", Self::PREFIX, i + 1);
            if !params.contains(&name) {
                return Err(Error::invalid(format!("perceptual weights missing {name}")));
            }
            channels[i] = params.get(&name).shape()[0];
        }
        Ok(ConvPyramid { params, channels })
    }
}

impl PerceptualExtractor for ConvPyramid {
    fn layer_names(&self) -> Vec<String> {
        (1..=4).map(|i| format!("stage{i}")).collect()
    }

    fn features_graph(&self, tape: &Tape<f32>, img: Var) -> Vec<Var> {
        let bound = self.params.bind(tape);
        let mut h = img;
        let mut maps = Vec::with_capacity(4);
        for i in 1..=4 {
            let c = tape.conv2d(
                h,
                bound.var(&format!("{}.conv{i}.w", Self::PREFIX)),
                bound.var(&format!("{}.conv{i}.b", Self::PREFIX)),
                (2, 2),
                (1, 1),
            );
            h = tape.relu(c);
            maps.push(h);
        }
        let _ = self.channels;
        maps
    }

    fn params(&self) -> &ParamMap<f32> {
        &self.params
    }
}

/// Ordered feature maps of `img` under a validated extractor.
pub fn perceptual_features<E: PerceptualExtractor + ?Sized>(
    img: &VideoFrame,
    extractor: &E,
) -> Result<Vec<Array3<f32>>> {
    validate_extractor(extractor)?;
    Ok(extractor.features(img))
}

/// Evaluation helper shared by metrics and tests: probabilities binarized at
/// `threshold` against labels.
pub fn probs_to_labels(probs: &[AuProbVector], threshold: f32) -> Vec<AuLabelVector> {
    probs.iter().map(|p| p.binarize(threshold)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{random_identity, random_signals, synth_clip};
    use crate::gradcheck::random_tensors;
    use ndarray::Array3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed(params: &mut ParamMap<f32>) {
        let names: Vec<String> = params.names().cloned().collect();
        for n in names {
            // Keep identity batch-norm: unit running variance and gamma.
            if n.ends_with("running_var") || n.ends_with("gamma") {
                params.get_mut(&n).fill(1.0);
            } else {
                params.get_mut(&n).fill(0.0);
            }
        }
    }

    fn zero_frame() -> VideoFrame {
        VideoFrame::new(Array3::zeros((3, FRAME_SIZE, FRAME_SIZE))).unwrap()
    }

    fn random_frame(seed: u64) -> VideoFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoFrame::new(Array3::from_shape_fn((3, FRAME_SIZE, FRAME_SIZE), |_| {
            rng.random_range(0.0..1.0f32)
        }))
        .unwrap()
    }

    fn zero_mfcc() -> MfccFrame {
        MfccFrame::new(ndarray::Array2::zeros((MFCC_COEFFS, MFCC_WINDOW_COLS))).unwrap()
    }

    #[test]
    fn identity_encoder_zero_image_zero_weights_gives_zeros() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamMap::new();
        init_identity_encoder(&cfg, &mut rng, &mut params, "id_enc");
        zeroed(&mut params);
        let f = encode_identity(&zero_frame(), &params, "id_enc", &cfg).unwrap();
        assert!(f.vector.iter().all(|v| *v == 0.0));
        assert_eq!(f.skips.len(), 4);
        assert!(f.skips.iter().all(|s| s.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn identity_encoder_is_stateless_with_halving_skips() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamMap::new();
        init_identity_encoder(&cfg, &mut rng, &mut params, "id_enc");
        let img = random_frame(3);
        let a = encode_identity(&img, &params, "id_enc", &cfg).unwrap();
        let b = encode_identity(&img, &params, "id_enc", &cfg).unwrap();
        assert_eq!(a.vector, b.vector);
        assert_eq!(a.vector.len(), ID_WIDTH);
        assert!(a.vector.iter().all(|v| v.is_finite()));
        let chans = cfg.id_channels();
        let dims: Vec<(usize, usize, usize)> = a.skips.iter().map(|s| s.dim()).collect();
        assert_eq!(
            dims,
            vec![
                (chans[0], 56, 56),
                (chans[1], 28, 28),
                (chans[2], 14, 14),
                (chans[3], 7, 7)
            ]
        );
    }

    #[test]
    fn audio_encoder_zero_window_identity_norm_gives_zero_vector() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParamMap::new();
        init_audio_encoder(&cfg, &mut rng, &mut params, "audio_enc");
        zeroed(&mut params); // zero weights/biases, identity batch norm
        let f = encode_audio(&zero_mfcc(), &params, "audio_enc", &cfg).unwrap();
        assert_eq!(f.vector.len(), AUDIO_WIDTH);
        assert!(f.vector.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn audio_encoder_eval_batch_rows_match_single_windows() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamMap::new();
        init_audio_encoder(&cfg, &mut rng, &mut params, "audio_enc");
        // Distinct running stats so eval mode actually uses them.
        params
            .get_mut("audio_enc.bn1.running_mean")
            .mapv_inplace(|_| 0.05);
        let windows: Vec<MfccFrame> = (0..3)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + i);
                MfccFrame::new(ndarray::Array2::from_shape_fn(
                    (MFCC_COEFFS, MFCC_WINDOW_COLS),
                    |_| rng.random_range(-1.0..1.0f32),
                ))
                .unwrap()
            })
            .collect();
        let refs: Vec<&MfccFrame> = windows.iter().collect();
        let batch = encode_audio_batch(&refs, &params, "audio_enc", &cfg).unwrap();
        for (i, w) in windows.iter().enumerate() {
            let single = encode_audio(w, &params, "audio_enc", &cfg).unwrap();
            assert_eq!(batch.row(i).to_owned(), single.vector, "row {i}");
        }
    }

    #[test]
    fn audio2au_probs_live_strictly_inside_unit_interval() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = ParamMap::new();
        init_audio2au(&cfg, &mut rng, &mut params, "a2au");
        let mut wrng = ChaCha8Rng::seed_from_u64(7);
        let w = MfccFrame::new(ndarray::Array2::from_shape_fn(
            (MFCC_COEFFS, MFCC_WINDOW_COLS),
            |_| wrng.random_range(-2.0..2.0f32),
        ))
        .unwrap();
        let p = audio2au_pretrain_forward(&w, &params, "a2au", &cfg).unwrap();
        for v in p.as_array() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn audio2au_zero_weights_give_half_probs_and_zero_features() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = ParamMap::new();
        init_audio2au(&cfg, &mut rng, &mut params, "a2au");
        zeroed(&mut params);
        let p = audio2au_pretrain_forward(&zero_mfcc(), &params, "a2au", &cfg).unwrap();
        for v in p.as_array() {
            assert_eq!(v, 0.5);
        }
        let f = audio2au_feature(&zero_mfcc(), &params, "a2au", &cfg).unwrap();
        assert_eq!(f.vector.len(), AU_FEATURE_WIDTH);
        assert!(f.vector.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn removed_final_layer_reconstructs_pretrain_probs_exactly() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ParamMap::new();
        init_audio2au(&cfg, &mut rng, &mut params, "a2au");
        let mut wrng = ChaCha8Rng::seed_from_u64(10);
        let w = MfccFrame::new(ndarray::Array2::from_shape_fn(
            (MFCC_COEFFS, MFCC_WINDOW_COLS),
            |_| wrng.random_range(-1.0..1.0f32),
        ))
        .unwrap();
        let feat = audio2au_feature(&w, &params, "a2au", &cfg).unwrap();
        let probs = audio2au_pretrain_forward(&w, &params, "a2au", &cfg).unwrap();
        for (i, au) in AU_NAMES.iter().enumerate() {
            let au = au.to_ascii_lowercase();
            let w3 = params.get(&format!("a2au.{au}.fc3.w"));
            let b3 = params.get(&format!("a2au.{au}.fc3.b"));
            let mut logit = b3[[0]];
            for (j, f) in feat.sub(i).iter().enumerate() {
                logit += f * w3[[j, 0]];
            }
            let p = 1.0 / (1.0 + (-logit).exp());
            assert!(
                (p - probs.get(i)).abs() < 1e-6,
                "AU {au}: {p} vs {}",
                probs.get(i)
            );
        }
    }

    #[test]
    fn fused_feature_preserves_segment_layout() {
        let id = IdentityFeature {
            vector: ndarray::Array1::from_elem(ID_WIDTH, 1.0),
            skips: vec![],
        };
        let audio = AudioFeature {
            vector: ndarray::Array1::from_elem(AUDIO_WIDTH, 2.0),
        };
        let au = AuFeature {
            vector: ndarray::Array1::from_elem(AU_FEATURE_WIDTH, 3.0),
        };
        let fused = fuse_features(&id, &audio, &au).unwrap();
        assert_eq!(fused.vector.len(), FUSED_WIDTH);
        assert!(fused.vector.slice(ndarray::s![ID_SEGMENT]).iter().all(|v| *v == 1.0));
        assert!(fused.vector.slice(ndarray::s![AUDIO_SEGMENT]).iter().all(|v| *v == 2.0));
        assert!(fused.vector.slice(ndarray::s![AU_SEGMENT]).iter().all(|v| *v == 3.0));
        assert_eq!(FUSED_WIDTH, 1344);
    }

    fn decoder_fixture(seed: u64) -> (ModelConfig, ParamMap<f32>, IdentityFeature) {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamMap::new();
        init_identity_encoder(&cfg, &mut rng, &mut params, "id_enc");
        init_decoder(&cfg, &mut rng, &mut params, "dec");
        let identity = encode_identity(&random_frame(seed + 1), &params, "id_enc", &cfg).unwrap();
        (cfg, params, identity)
    }

    #[test]
    fn decoder_output_is_a_valid_frame() {
        let (cfg, params, identity) = decoder_fixture(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f1 = ndarray::Array1::from_shape_fn(512, |_| rng.random_range(-1.0..1.0f32));
        let f2 = ndarray::Array1::from_shape_fn(512, |_| rng.random_range(-1.0..1.0f32));
        let a = decode_frame(&f1, &identity, &params, "dec", &cfg).unwrap();
        let b = decode_frame(&f2, &identity, &params, "dec", &cfg).unwrap();
        assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        // Different fused features must move the output.
        assert_ne!(a.pixels(), b.pixels());
    }

    #[test]
    fn decoder_rejects_mismatched_skips() {
        let (cfg, params, mut identity) = decoder_fixture(13);
        identity.skips[0] = Array3::zeros((1, 56, 56));
        let f = ndarray::Array1::zeros(512);
        assert!(decode_frame(&f, &identity, &params, "dec", &cfg).is_err());
        identity.skips.pop();
        identity.skips.pop();
        assert!(decode_frame(&f, &identity, &params, "dec", &cfg).is_err());
    }

    #[test]
    fn decoder_gradient_wrt_fused_feature_matches_fd() {
        // Double precision, tiny widths, gradients w.r.t. the 512 feature.
        let cfg = ModelConfig {
            id_base: 2,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut params32 = ParamMap::new();
        init_identity_encoder(&cfg, &mut rng, &mut params32, "id_enc");
        init_decoder(&cfg, &mut rng, &mut params32, "dec");
        let params = params32.to_f64();
        let skips: Vec<ndarray::ArrayD<f64>> = {
            let identity =
                encode_identity(&random_frame(15), &params32, "id_enc", &cfg).unwrap();
            identity
                .skips
                .iter()
                .map(|s| {
                    let d = s.dim();
                    s.mapv(|v| v as f64)
                        .into_shape_with_order(ndarray::IxDyn(&[1, d.0, d.1, d.2]))
                        .unwrap()
                })
                .collect()
        };
        let f = random_tensors(&[vec![1, 512]], -0.5, 0.5, 16).pop().unwrap();
        crate::gradcheck::fd_check_tensors(
            &[f],
            move |tape, vars| {
                let bound = params.bind(tape);
                let skip_vars: Vec<crate::autodiff::Var> =
                    skips.iter().map(|s| tape.leaf(s.clone())).collect();
                let gen = decoder_graph(tape, &bound, "dec", &cfg, vars[0], &skip_vars);
                tape.mean(gen)
            },
            1e-4,
        );
    }

    #[test]
    fn au_classifier_enforces_lower_half_shape() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut params = ParamMap::new();
        init_au_classifier(&cfg, &mut rng, &mut params, "auclf");
        let full = Array3::<f32>::zeros((3, FRAME_SIZE, FRAME_SIZE));
        assert!(au_classify(&full, &params, "auclf", &cfg).is_err());

        zeroed(&mut params);
        let lower = Array3::<f32>::zeros((3, HALF_ROW, FRAME_SIZE));
        let p = au_classify(&lower, &params, "auclf", &cfg).unwrap();
        for v in p.as_array() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn perceptual_pyramid_halves_spatial_sizes_and_stays_frozen() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let pyramid = ConvPyramid::init(&cfg, &mut rng);
        let maps = perceptual_features(&random_frame(19), &pyramid).unwrap();
        let dims: Vec<usize> = maps.iter().map(|m| m.dim().1).collect();
        assert_eq!(dims, vec![56, 28, 14, 7]);
        assert_eq!(pyramid.layer_names().len(), 4);
        assert!(pyramid.params().iter().all(|(_, p)| !p.trainable));
        // Identical inputs give identical features.
        let again = perceptual_features(&random_frame(19), &pyramid).unwrap();
        for (a, b) in maps.iter().zip(&again) {
            assert_eq!(a, b);
        }
    }

    struct OneLayer(ParamMap<f32>);
    impl PerceptualExtractor for OneLayer {
        fn layer_names(&self) -> Vec<String> {
            vec!["only".into()]
        }
        fn features_graph(&self, tape: &Tape<f32>, img: Var) -> Vec<Var> {
            vec![tape.relu(img)]
        }
        fn params(&self) -> &ParamMap<f32> {
            &self.0
        }
    }

    #[test]
    fn extractors_with_fewer_than_two_layers_are_rejected() {
        let e = OneLayer(ParamMap::new());
        assert!(perceptual_features(&zero_frame(), &e).is_err());
    }

    #[test]
    fn class_separation_between_silence_and_speech_features() {
        // With random (untrained) weights the audio-to-AU features of silent
        // windows still cluster away from loud-tone windows once the inputs
        // differ; here we just require the map to be input-sensitive.
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut params = ParamMap::new();
        init_audio2au(&cfg, &mut rng, &mut params, "a2au");
        let mut idrng = ChaCha8Rng::seed_from_u64(21);
        let identity = random_identity(&mut idrng);
        let mut open = random_signals(&mut idrng, 8, 25.0);
        for o in open.opening.iter_mut() {
            *o = 0.9;
        }
        let loud = synth_clip(&identity, &open, 25.0, 16000, "loud").unwrap();
        let silent_sig = crate::data::synth::ClipSignals::zeros(8);
        let silent = synth_clip(&identity, &silent_sig, 25.0, 16000, "silent").unwrap();
        let f_loud = audio2au_feature(&loud.frames[4].mfcc, &params, "a2au", &cfg).unwrap();
        let f_silent = audio2au_feature(&silent.frames[4].mfcc, &params, "a2au", &cfg).unwrap();
        let dist: f32 = f_loud
            .vector
            .iter()
            .zip(f_silent.vector.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(dist > 1e-3, "features insensitive to audio content");
    }
}
