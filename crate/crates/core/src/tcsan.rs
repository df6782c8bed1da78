//! Dilated non-causal temporal convolutional self-attention network.
//!
//! Stacked residual blocks fuse per-frame multimodal feature vectors: each
//! block applies a symmetric dilated convolution over time (dilation doubling
//! per block), reshapes each frame's channels into token groups, runs
//! multi-head self-attention over the groups, projects, and adds the result
//! back onto the block input. A final 1x1 projection maps to the decoder
//! width. Sequence length is preserved throughout.

use ndarray::{Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{attention_forward, dilated_conv1d_forward, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{uniform_init, zeros_init, BoundParams, ParamMap};

/// Per-frame feature sequence, time-major (T, C).
pub type FeatureSequence = Array2<f32>;

#[derive(Debug, Clone)]
pub struct TcsanConfig {
    /// Number of residual attention blocks; block n uses dilation 2^(n-1).
    pub layers: usize,
    /// Temporal filter size (odd).
    pub kernel: usize,
    /// Attention heads per block.
    pub heads: usize,
    /// Channels per attention token; frames of C channels become C/group tokens.
    pub group: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for TcsanConfig {
    fn default() -> Self {
        TcsanConfig {
            layers: 4,
            kernel: 3,
            heads: 4,
            group: 64,
            in_channels: crate::networks::FUSED_WIDTH,
            out_channels: 512,
        }
    }
}

impl TcsanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel < 3 {
            return Err(Error::invalid(format!(
                "tcsan kernel must be odd and >= 3, got {}",
                self.kernel
            )));
        }
        if self.heads < 1 {
            return Err(Error::invalid("tcsan heads must be >= 1"));
        }
        if self.layers < 1 {
            return Err(Error::invalid("tcsan layers must be >= 1"));
        }
        if self.in_channels % self.group != 0 {
            return Err(Error::invalid(format!(
                "tcsan in_channels {} not divisible by token group size {}",
                self.in_channels, self.group
            )));
        }
        if self.group % self.heads != 0 {
            return Err(Error::invalid(format!(
                "token size {} not divisible by heads {}",
                self.group, self.heads
            )));
        }
        Ok(())
    }

    /// Dilation of block `n` (1-based): 2^(n-1).
    pub fn dilation(&self, n: usize) -> usize {
        1 << (n - 1)
    }

    /// Temporal receptive field of the stacked blocks:
    /// 1 + (kernel-1) * (2^layers - 1).
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel - 1) * ((1 << self.layers) - 1)
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.in_channels / self.group
    }
}

/// Filter of a dilated temporal convolution: weights (k, Cin, Cout), bias (Cout).
#[derive(Debug, Clone)]
pub struct ConvFilter {
    pub weights: Array3<f32>,
    pub bias: Array1<f32>,
}

impl ConvFilter {
    pub fn new(weights: Array3<f32>, bias: Array1<f32>) -> Result<Self> {
        let (k, _, cout) = weights.dim();
        if k % 2 == 0 {
            return Err(Error::invalid(format!("filter size must be odd, got {k}")));
        }
        if bias.len() != cout {
            return Err(Error::shape(
                "ConvFilter",
                format!("bias of length {cout}"),
                format!("{}", bias.len()),
            ));
        }
        if !weights.iter().chain(bias.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite filter coefficients"));
        }
        Ok(ConvFilter { weights, bias })
    }
}

/// Symmetric dilated convolution over time with zero padding; output length
/// equals input length. Tap `i` of the filter reads `x[s + d*((k-1)/2 - i)]`.
pub fn dilated_noncausal_conv(
    x: &FeatureSequence,
    filter: &ConvFilter,
    d: usize,
) -> Result<FeatureSequence> {
    if d < 1 {
        return Err(Error::invalid(format!("dilation must be >= 1, got {d}")));
    }
    let (k, cin, _) = filter.weights.dim();
    if k % 2 == 0 {
        return Err(Error::invalid(format!("filter size must be odd, got {k}")));
    }
    if x.ncols() != cin {
        return Err(Error::shape(
            "dilated_noncausal_conv",
            format!("{} input channels", cin),
            format!("{}", x.ncols()),
        ));
    }
    Ok(dilated_conv1d_forward(
        x.view(),
        filter.weights.view(),
        filter.bias.view(),
        d,
    ))
}

/// Scaled dot-product attention for token matrices q (N,Dk), k (M,Dk), v (M,Dv).
pub fn scaled_dot_attention(
    q: &Array2<f32>,
    k: &Array2<f32>,
    v: &Array2<f32>,
) -> Result<Array2<f32>> {
    if q.ncols() == 0 {
        return Err(Error::invalid("attention key dimension must be nonzero"));
    }
    if q.ncols() != k.ncols() {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("key dim {}", q.ncols()),
            format!("{}", k.ncols()),
        ));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("{} key rows", k.nrows()),
            format!("{} value rows", v.nrows()),
        ));
    }
    let (n, dk) = q.dim();
    let (m, dv) = v.dim();
    let q3 = q.view().into_shape_with_order((1, n, dk)).unwrap();
    let k3 = k.view().into_shape_with_order((1, m, dk)).unwrap();
    let v3 = v.view().into_shape_with_order((1, m, dv)).unwrap();
    let out = attention_forward(q3, k3, v3);
    Ok(out.into_shape_with_order((n, dv)).unwrap())
}

/// Softmax attention weights for q (N,Dk) against k (M,Dk); each row sums to 1.
pub fn attention_weights(q: &Array2<f32>, k: &Array2<f32>) -> Result<Array2<f32>> {
    if q.ncols() == 0 || q.ncols() != k.ncols() {
        return Err(Error::invalid("attention key dimension mismatch"));
    }
    let (n, dk) = q.dim();
    let m = k.nrows();
    let q3 = q.view().into_shape_with_order((1, n, dk)).unwrap();
    let k3 = k.view().into_shape_with_order((1, m, dk)).unwrap();
    let probs = crate::autodiff::attention_probs(q3, k3);
    Ok(probs.into_shape_with_order((n, m)).unwrap())
}

/// Learned projections of one multi-head self-attention module.
#[derive(Debug, Clone)]
pub struct MhsaParams {
    pub wq: Array2<f32>,
    pub bq: Array1<f32>,
    pub wk: Array2<f32>,
    pub bk: Array1<f32>,
    pub wv: Array2<f32>,
    pub bv: Array1<f32>,
    pub wo: Array2<f32>,
    pub bo: Array1<f32>,
}

impl MhsaParams {
    /// Identity projections with zero bias (reduces the module to plain
    /// self-attention when `heads == 1`).
    pub fn identity(dim: usize) -> Self {
        MhsaParams {
            wq: Array2::eye(dim),
            bq: Array1::zeros(dim),
            wk: Array2::eye(dim),
            bk: Array1::zeros(dim),
            wv: Array2::eye(dim),
            bv: Array1::zeros(dim),
            wo: Array2::eye(dim),
            bo: Array1::zeros(dim),
        }
    }
}

/// Multi-head self-attention over a token matrix z (N, D): h learned
/// projections into (Q,K,V) with Q = K = V source, per-head scaled
/// dot-product attention, concatenation, and a final projection.
pub fn multi_head_self_attention(
    z: &Array2<f32>,
    heads: usize,
    params: &MhsaParams,
) -> Result<Array2<f32>> {
    let (n, d) = z.dim();
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!(
            "token dim {d} not divisible by heads {heads}"
        )));
    }
    let q = z.dot(&params.wq) + &params.bq;
    let k = z.dot(&params.wk) + &params.bk;
    let v = z.dot(&params.wv) + &params.bv;
    let dh = d / heads;
    let mut concat = Array2::<f32>::zeros((n, d));
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(ndarray::s![.., cols.clone()]).to_owned();
        let kh = k.slice(ndarray::s![.., cols.clone()]).to_owned();
        let vh = v.slice(ndarray::s![.., cols.clone()]).to_owned();
        let oh = scaled_dot_attention(&qh, &kh, &vh)?;
        concat.slice_mut(ndarray::s![.., cols]).assign(&oh);
    }
    Ok(concat.dot(&params.wo) + &params.bo)
}

pub(crate) struct MhsaVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl MhsaVars {
    pub(crate) fn from_bound(bound: &BoundParams, prefix: &str) -> Self {
        MhsaVars {
            wq: bound.var(&format!("{prefix}.wq")),
            bq: bound.var(&format!("{prefix}.bq")),
            wk: bound.var(&format!("{prefix}.wk")),
            bk: bound.var(&format!("{prefix}.bk")),
            wv: bound.var(&format!("{prefix}.wv")),
            bv: bound.var(&format!("{prefix}.bv")),
            wo: bound.var(&format!("{prefix}.wo")),
            bo: bound.var(&format!("{prefix}.bo")),
        }
    }
}

/// Multi-head self-attention graph over batched tokens z (B, N, D).
pub(crate) fn mhsa_graph<F: Scalar>(
    tape: &Tape<F>,
    z: Var,
    heads: usize,
    p: &MhsaVars,
) -> Var {
    let shape = tape.shape(z);
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let z2 = tape.reshape(z, &[b * n, d]);
    let q = tape.add_bias(tape.matmul(z2, p.wq), p.bq);
    let k = tape.add_bias(tape.matmul(z2, p.wk), p.bk);
    let v = tape.add_bias(tape.matmul(z2, p.wv), p.bv);
    let q3 = tape.reshape(q, &[b, n, d]);
    let k3 = tape.reshape(k, &[b, n, d]);
    let v3 = tape.reshape(v, &[b, n, d]);
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice(q3, 2, h * dh, dh);
        let kh = tape.slice(k3, 2, h * dh, dh);
        let vh = tape.slice(v3, 2, h * dh, dh);
        head_outs.push(tape.attention(qh, kh, vh));
    }
    let cat = tape.concat(2, &head_outs);
    let cat2 = tape.reshape(cat, &[b * n, d]);
    let out = tape.add_bias(tape.matmul(cat2, p.wo), p.bo);
    tape.reshape(out, &[b, n, d])
}

pub(crate) struct BlockVars {
    pub conv_w: Var,
    pub conv_b: Var,
    pub attn: MhsaVars,
    pub proj_w: Var,
    pub proj_b: Var,
}

impl BlockVars {
    pub(crate) fn from_bound(bound: &BoundParams, prefix: &str) -> Self {
        BlockVars {
            conv_w: bound.var(&format!("{prefix}.conv.w")),
            conv_b: bound.var(&format!("{prefix}.conv.b")),
            attn: MhsaVars::from_bound(bound, &format!("{prefix}.attn")),
            proj_w: bound.var(&format!("{prefix}.proj.w")),
            proj_b: bound.var(&format!("{prefix}.proj.b")),
        }
    }

    /// Order: conv_w, conv_b, wq, bq, wk, bk, wv, bv, wo, bo, proj_w, proj_b.
    #[cfg(test)]
    pub(crate) fn from_slice(vars: &[Var]) -> Self {
        BlockVars {
            conv_w: vars[0],
            conv_b: vars[1],
            attn: MhsaVars {
                wq: vars[2],
                bq: vars[3],
                wk: vars[4],
                bk: vars[5],
                wv: vars[6],
                bv: vars[7],
                wo: vars[8],
                bo: vars[9],
            },
            proj_w: vars[10],
            proj_b: vars[11],
        }
    }
}

/// One residual attention block: y = x + P(A(relu(conv_d(x)))) where A runs
/// per-frame multi-head self-attention over channel-group tokens and P is a
/// 1x1 channel projection.
pub(crate) fn residual_block_core<F: Scalar>(
    tape: &Tape<F>,
    vars: &BlockVars,
    x: Var,
    dilation: usize,
    cfg: &TcsanConfig,
) -> Var {
    let shape = tape.shape(x);
    let (t, c) = (shape[0], shape[1]);
    let conv = tape.dilated_conv1d(x, vars.conv_w, vars.conv_b, dilation);
    let act = tape.relu(conv);
    let tokens = tape.reshape(act, &[t, cfg.tokens_per_frame(), cfg.group]);
    let attn = mhsa_graph(tape, tokens, cfg.heads, &vars.attn);
    let flat = tape.reshape(attn, &[t, c]);
    let proj = tape.add_bias(tape.matmul(flat, vars.proj_w), vars.proj_b);
    tape.add(x, proj)
}

pub(crate) fn residual_block_graph<F: Scalar>(
    tape: &Tape<F>,
    bound: &BoundParams,
    prefix: &str,
    x: Var,
    dilation: usize,
    cfg: &TcsanConfig,
) -> Var {
    residual_block_core(tape, &BlockVars::from_bound(bound, prefix), x, dilation, cfg)
}

/// All residual blocks, before the final output projection.
pub fn tcsan_blocks_graph<F: Scalar>(
    tape: &Tape<F>,
    bound: &BoundParams,
    prefix: &str,
    x: Var,
    cfg: &TcsanConfig,
) -> Var {
    let mut h = x;
    for n in 1..=cfg.layers {
        h = residual_block_graph(
            tape,
            bound,
            &format!("{prefix}.block{n}"),
            h,
            cfg.dilation(n),
            cfg,
        );
    }
    h
}

/// Full network: residual blocks followed by the 1x1 output projection.
pub fn tcsan_graph<F: Scalar>(
    tape: &Tape<F>,
    bound: &BoundParams,
    prefix: &str,
    x: Var,
    cfg: &TcsanConfig,
) -> Var {
    let h = tcsan_blocks_graph(tape, bound, prefix, x, cfg);
    tape.add_bias(
        tape.matmul(h, bound.var(&format!("{prefix}.out.w"))),
        bound.var(&format!("{prefix}.out.b")),
    )
}

/// Initialize all network parameters under `prefix.` into `params`.
pub fn init_tcsan_params(
    cfg: &TcsanConfig,
    rng: &mut ChaCha8Rng,
    params: &mut ParamMap<f32>,
    prefix: &str,
) {
    let c = cfg.in_channels;
    let g = cfg.group;
    for n in 1..=cfg.layers {
        let b = format!("{prefix}.block{n}");
        params.insert(
            format!("{b}.conv.w"),
            uniform_init(rng, &[cfg.kernel, c, c], cfg.kernel * c),
            true,
        );
        params.insert(format!("{b}.conv.b"), zeros_init(&[c]), true);
        for name in ["wq", "wk", "wv", "wo"] {
            params.insert(
                format!("{b}.attn.{name}"),
                uniform_init(rng, &[g, g], g),
                true,
            );
        }
        for name in ["bq", "bk", "bv", "bo"] {
            params.insert(format!("{b}.attn.{name}"), zeros_init(&[g]), true);
        }
        params.insert(
            format!("{b}.proj.w"),
            uniform_init(rng, &[c, c], c),
            true,
        );
        params.insert(format!("{b}.proj.b"), zeros_init(&[c]), true);
    }
    params.insert(
        format!("{prefix}.out.w"),
        uniform_init(rng, &[c, cfg.out_channels], c),
        true,
    );
    params.insert(format!("{prefix}.out.b"), zeros_init(&[cfg.out_channels]), true);
}

fn run_plain(
    x: &FeatureSequence,
    cfg: &TcsanConfig,
    params: &ParamMap<f32>,
    prefix: &str,
    blocks_only: bool,
) -> Result<FeatureSequence> {
    cfg.validate()?;
    if x.nrows() < 1 {
        return Err(Error::invalid("empty feature sequence"));
    }
    if x.ncols() != cfg.in_channels {
        return Err(Error::shape(
            "tcsan_forward",
            format!("{} channels", cfg.in_channels),
            format!("{}", x.ncols()),
        ));
    }
    let tape: Tape<f32> = Tape::new();
    let bound = params.bind(&tape);
    let xv = tape.leaf(x.clone().into_dyn());
    let out = if blocks_only {
        tcsan_blocks_graph(&tape, &bound, prefix, xv, cfg)
    } else {
        tcsan_graph(&tape, &bound, prefix, xv, cfg)
    };
    let v = tape.value(out);
    let shape = (v.shape()[0], v.shape()[1]);
    Ok(v.into_shape_with_order(shape).unwrap())
}

/// Evaluate the full network on a (T, in_channels) sequence.
pub fn tcsan_forward(
    x: &FeatureSequence,
    cfg: &TcsanConfig,
    params: &ParamMap<f32>,
    prefix: &str,
) -> Result<FeatureSequence> {
    run_plain(x, cfg, params, prefix, false)
}

/// Evaluate the residual blocks only (activations before the output
/// projection); used by receptive-field probes.
pub fn tcsan_preprojection(
    x: &FeatureSequence,
    cfg: &TcsanConfig,
    params: &ParamMap<f32>,
    prefix: &str,
) -> Result<FeatureSequence> {
    run_plain(x, cfg, params, prefix, true)
}

/// Evaluate a single residual attention block (1-based `layer_index` selects
/// the dilation 2^(n-1) and the parameter prefix `block{n}`).
pub fn residual_attention_block(
    x: &FeatureSequence,
    layer_index: usize,
    cfg: &TcsanConfig,
    params: &ParamMap<f32>,
    prefix: &str,
) -> Result<FeatureSequence> {
    cfg.validate()?;
    if x.ncols() != cfg.in_channels {
        return Err(Error::shape(
            "residual_attention_block",
            format!("{} channels", cfg.in_channels),
            format!("{}", x.ncols()),
        ));
    }
    let tape: Tape<f32> = Tape::new();
    let bound = params.bind(&tape);
    let xv = tape.leaf(x.clone().into_dyn());
    let out = residual_block_graph(
        &tape,
        &bound,
        &format!("{prefix}.block{layer_index}"),
        xv,
        cfg.dilation(layer_index),
        cfg,
    );
    let v = tape.value(out);
    let shape = (v.shape()[0], v.shape()[1]);
    Ok(v.into_shape_with_order(shape).unwrap())
}

/// Positions of `seq` rows that differ from `base` by more than `tol`
/// anywhere in the row. Used for influence probes.
pub fn changed_rows(seq: &FeatureSequence, base: &FeatureSequence, tol: f32) -> Vec<usize> {
    seq.axis_iter(Axis(0))
        .zip(base.axis_iter(Axis(0)))
        .enumerate()
        .filter_map(|(i, (a, b))| {
            let diff = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            (diff > tol).then_some(i)
        })
        .collect()
}
