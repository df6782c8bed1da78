//! Domain types and the clip data pipeline: aligned (audio, frames, AU
//! labels) clips, MFCC windowing, disk layout, and the procedural synthetic
//! dataset.

use std::path::PathBuf;

use ndarray::{Array2, Array3, ArrayView3, Axis};

use crate::error::{Error, Result};

mod io;
pub mod mfcc;
pub mod synth;

pub use io::{
    load_clip, load_frame_png, load_manifest, load_wav, save_clip, save_frame_png, save_manifest,
    save_wav, write_grayscale_png,
};

/// Canonical speech-related action units, in the fixed order used everywhere.
pub const AU_NAMES: [&str; 5] = ["AU10", "AU14", "AU20", "AU25", "AU26"];
pub const AU_COUNT: usize = 5;

/// Square frame edge in pixels.
pub const FRAME_SIZE: usize = 112;
/// Row splitting the upper and lower face halves.
pub const HALF_ROW: usize = FRAME_SIZE / 2;

/// MFCC coefficients per analysis column.
pub const MFCC_COEFFS: usize = 12;
/// Columns per per-frame MFCC window (280 ms at a 10 ms hop).
pub const MFCC_WINDOW_COLS: usize = 28;

/// Mono audio samples in [-1, 1].
#[derive(Debug, Clone)]
pub struct AudioTrack {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioTrack {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Audio("sample rate must be positive".into()));
        }
        if !samples.iter().all(|s| s.is_finite()) {
            return Err(Error::Audio("non-finite audio samples".into()));
        }
        Ok(AudioTrack {
            samples,
            sample_rate,
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// One 12x28 MFCC window aligned to a video frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccFrame {
    coeffs: Array2<f32>,
}

impl MfccFrame {
    pub fn new(coeffs: Array2<f32>) -> Result<Self> {
        if coeffs.dim() != (MFCC_COEFFS, MFCC_WINDOW_COLS) {
            return Err(Error::shape(
                "MfccFrame",
                format!("{MFCC_COEFFS}x{MFCC_WINDOW_COLS}"),
                format!("{}x{}", coeffs.nrows(), coeffs.ncols()),
            ));
        }
        if !coeffs.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite MFCC coefficients"));
        }
        Ok(MfccFrame { coeffs })
    }

    pub fn coeffs(&self) -> &Array2<f32> {
        &self.coeffs
    }
}

/// One 112x112 RGB frame, channel-first (3, H, W), values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFrame {
    pixels: Array3<f32>,
}

impl VideoFrame {
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        if pixels.dim() != (3, FRAME_SIZE, FRAME_SIZE) {
            return Err(Error::shape(
                "VideoFrame",
                format!("3x{FRAME_SIZE}x{FRAME_SIZE}"),
                format!("{:?}", pixels.dim()),
            ));
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("frame pixels must be finite and in [0,1]"));
        }
        Ok(VideoFrame { pixels })
    }

    /// Clamp out-of-range values instead of rejecting them (decoder outputs
    /// are already sigmoid-bounded; this guards float dust).
    pub fn from_clamped(mut pixels: Array3<f32>) -> Result<Self> {
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self::new(pixels)
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    /// Rows [0, 56): the identity-bearing upper face.
    pub fn upper_half(&self) -> ArrayView3<'_, f32> {
        self.pixels.slice(ndarray::s![.., ..HALF_ROW, ..])
    }

    /// Rows [56, 112): the mouth-bearing lower face.
    pub fn lower_half(&self) -> ArrayView3<'_, f32> {
        self.pixels.slice(ndarray::s![.., HALF_ROW.., ..])
    }
}

/// Ground-truth AU occurrence flags in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuLabelVector {
    occurrences: [u8; AU_COUNT],
}

impl AuLabelVector {
    pub fn new(occurrences: [u8; AU_COUNT]) -> Result<Self> {
        if occurrences.iter().any(|v| *v > 1) {
            return Err(Error::invalid("AU occurrences must be 0 or 1"));
        }
        Ok(AuLabelVector { occurrences })
    }

    /// Binarize continuous detector outputs at 0.5.
    pub fn from_scores(scores: [f32; AU_COUNT]) -> Self {
        let mut occ = [0u8; AU_COUNT];
        for (o, s) in occ.iter_mut().zip(scores) {
            *o = u8::from(s >= 0.5);
        }
        AuLabelVector { occurrences: occ }
    }

    pub fn get(&self, i: usize) -> u8 {
        self.occurrences[i]
    }

    pub fn as_array(&self) -> [u8; AU_COUNT] {
        self.occurrences
    }

    pub fn as_f32(&self) -> [f32; AU_COUNT] {
        let mut out = [0.0; AU_COUNT];
        for (o, v) in out.iter_mut().zip(self.occurrences) {
            *o = v as f32;
        }
        out
    }
}

/// Predicted per-AU occurrence probabilities in canonical order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuProbVector {
    probs: [f32; AU_COUNT],
}

impl AuProbVector {
    pub fn new(probs: [f32; AU_COUNT]) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("AU probabilities must be in [0,1]"));
        }
        Ok(AuProbVector { probs })
    }

    pub fn get(&self, i: usize) -> f32 {
        self.probs[i]
    }

    pub fn as_array(&self) -> [f32; AU_COUNT] {
        self.probs
    }

    /// Threshold into occurrence flags.
    pub fn binarize(&self, threshold: f32) -> AuLabelVector {
        let mut occ = [0u8; AU_COUNT];
        for (o, p) in occ.iter_mut().zip(self.probs) {
            *o = u8::from(p >= threshold);
        }
        AuLabelVector { occurrences: occ }
    }
}

/// One aligned (MFCC window, target frame, AU labels) triple.
#[derive(Debug, Clone)]
pub struct ClipFrame {
    pub mfcc: MfccFrame,
    pub frame: VideoFrame,
    pub labels: AuLabelVector,
}

/// One aligned training unit: an identity frame plus per-frame triples.
/// The source audio rides along so clips can be written back to disk with
/// their MFCC windows recomputable on load.
#[derive(Debug, Clone)]
pub struct SampleClip {
    pub clip_id: String,
    pub fps: f64,
    pub identity_frame: VideoFrame,
    pub frames: Vec<ClipFrame>,
    pub audio: AudioTrack,
}

impl SampleClip {
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::invalid(format!("clip {} has no frames", self.clip_id)));
        }
        if self.fps <= 0.0 {
            return Err(Error::invalid(format!("clip {} has non-positive fps", self.clip_id)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// MFCC windows stacked as (T, 1, 12, 28) for batched encoding.
    pub fn mfcc_batch(&self) -> ndarray::Array4<f32> {
        let t = self.frames.len();
        let mut out = ndarray::Array4::zeros((t, 1, MFCC_COEFFS, MFCC_WINDOW_COLS));
        for (i, f) in self.frames.iter().enumerate() {
            out.index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), 0)
                .assign(f.mfcc.coeffs());
        }
        out
    }

    /// Target frames stacked as (T, 3, 112, 112).
    pub fn frame_batch(&self) -> ndarray::Array4<f32> {
        let t = self.frames.len();
        let mut out = ndarray::Array4::zeros((t, 3, FRAME_SIZE, FRAME_SIZE));
        for (i, f) in self.frames.iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(f.frame.pixels());
        }
        out
    }

    /// Labels stacked as (T, 5).
    pub fn label_batch(&self) -> Array2<f32> {
        let t = self.frames.len();
        let mut out = Array2::zeros((t, AU_COUNT));
        for (i, f) in self.frames.iter().enumerate() {
            for (j, v) in f.labels.as_f32().into_iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        out
    }
}

/// Train/test split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split tag: {other}"))),
        }
    }
}

/// Reference to one clip directory with its split tag.
#[derive(Debug, Clone)]
pub struct ClipRef {
    pub split: Split,
    pub dir: PathBuf,
}

/// A dataset: clip directories with split tags.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub clips: Vec<ClipRef>,
}

impl DatasetManifest {
    pub fn split_dirs(&self, split: Split) -> Vec<PathBuf> {
        self.clips
            .iter()
            .filter(|c| c.split == split)
            .map(|c| c.dir.clone())
            .collect()
    }

    /// Load every clip of a split, concurrently, ordered by clip_id.
    pub fn load_split(&self, split: Split, fps: f64) -> Result<Vec<SampleClip>> {
        let dirs = self.split_dirs(split);
        let results = crate::threads::maybe_par_map(dirs, |dir| load_clip(&dir, fps));
        let mut clips = results.into_iter().collect::<Result<Vec<_>>>()?;
        clips.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        Ok(clips)
    }
}

/// Per-AU occurrence rates over loaded clips:
/// rate_i = (# frames with AU_i = 1) / (total frames).
///
/// Errors if any AU never occurs (the class-balance weights divide by the rate).
pub fn compute_au_rates(clips: &[SampleClip]) -> Result<[f64; AU_COUNT]> {
    let mut counts = [0u64; AU_COUNT];
    let mut total = 0u64;
    for clip in clips {
        for f in &clip.frames {
            total += 1;
            for (i, c) in counts.iter_mut().enumerate() {
                *c += f.labels.get(i) as u64;
            }
        }
    }
    if total == 0 {
        return Err(Error::invalid("cannot compute AU rates on an empty split"));
    }
    let mut rates = [0.0f64; AU_COUNT];
    for i in 0..AU_COUNT {
        rates[i] = counts[i] as f64 / total as f64;
        if rates[i] == 0.0 {
            return Err(Error::invalid(format!(
                "AU occurrence rate for {} is zero over {} frames; rebalance the dataset",
                AU_NAMES[i], total
            )));
        }
    }
    Ok(rates)
}
