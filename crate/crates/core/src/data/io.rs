//! Clip directory layout and file formats.
//!
//! A clip directory holds `frames/%06d.png`, `audio.wav` (16-bit PCM mono),
//! and `aus.csv` (header row with the canonical AU column names, one row per
//! frame). A manifest is a text file with one `<split> <clip-dir>` line per
//! clip, paths relative to the manifest location.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use super::mfcc::{extract_mfcc, frame_times, window_mfcc};
use super::{
    AuLabelVector, AudioTrack, ClipFrame, ClipRef, DatasetManifest, SampleClip, Split, VideoFrame,
    AU_COUNT, AU_NAMES, FRAME_SIZE,
};
use crate::error::{Error, Result};

/// Load a 16-bit PCM WAV as mono samples in [-1, 1).
pub fn load_wav(path: &Path) -> Result<AudioTrack> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Audio(format!(
            "{}: expected 16-bit PCM, got {}-bit {:?}",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let channels = spec.channels as usize;
    let mut samples = Vec::new();
    let mut frame = Vec::with_capacity(channels);
    for s in reader.samples::<i16>() {
        frame.push(s? as f32 / 32768.0);
        if frame.len() == channels {
            samples.push(frame.iter().sum::<f32>() / channels as f32);
            frame.clear();
        }
    }
    AudioTrack::new(samples, spec.sample_rate)
}

/// Write mono samples as 16-bit PCM.
pub fn save_wav(path: &Path, audio: &AudioTrack) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for s in &audio.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Load one frame image; grayscale inputs are channel-replicated with a
/// warning, anything not already 112x112 is resized.
pub fn load_frame_png(path: &Path) -> Result<VideoFrame> {
    let img = image::open(path)?;
    let gray = matches!(
        img.color(),
        image::ColorType::L8 | image::ColorType::La8 | image::ColorType::L16 | image::ColorType::La16
    );
    if gray {
        log::warn!(
            "{}: grayscale frame, replicating to 3 channels",
            path.display()
        );
    }
    let img = if img.width() as usize != FRAME_SIZE || img.height() as usize != FRAME_SIZE {
        img.resize_exact(
            FRAME_SIZE as u32,
            FRAME_SIZE as u32,
            image::imageops::FilterType::Triangle,
        )
    } else {
        img
    };
    let rgb = img.to_rgb8();
    let mut pixels = Array3::<f32>::zeros((3, FRAME_SIZE, FRAME_SIZE));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            pixels[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
        }
    }
    VideoFrame::new(pixels)
}

/// Write a frame as an 8-bit RGB PNG.
pub fn save_frame_png(path: &Path, frame: &VideoFrame) -> Result<()> {
    let mut img = image::RgbImage::new(FRAME_SIZE as u32, FRAME_SIZE as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        for c in 0..3 {
            p.0[c] = (frame.pixels()[[c, y as usize, x as usize]] * 255.0).round() as u8;
        }
    }
    img.save(path)?;
    Ok(())
}

/// Write a single-channel [0,1] map as an 8-bit grayscale PNG.
pub fn write_grayscale_png(path: &Path, map: &Array2<f32>) -> Result<()> {
    let (h, w) = map.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        p.0[0] = (map[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    img.save(path)?;
    Ok(())
}

/// Parse `aus.csv`: a header row naming the five AU columns (extra columns
/// are ignored), then one row per frame. Continuous scores binarize at 0.5.
fn load_au_table(path: &Path) -> Result<Vec<AuLabelVector>> {
    let text = fs::read_to_string(path).map_err(|e| Error::data(path, e.to_string()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::data(path, "empty AU label table"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let mut index = [0usize; AU_COUNT];
    for (i, name) in AU_NAMES.iter().enumerate() {
        index[i] = cols
            .iter()
            .position(|c| c.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::data(path, format!("missing AU column {name}")))?;
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let mut scores = [0.0f32; AU_COUNT];
        for (i, col) in index.iter().enumerate() {
            let field = fields.get(*col).ok_or_else(|| {
                Error::data(path, format!("row {}: missing column {}", lineno + 2, AU_NAMES[i]))
            })?;
            scores[i] = field.parse::<f32>().map_err(|_| {
                Error::data(
                    path,
                    format!("row {}: bad value {:?} for {}", lineno + 2, field, AU_NAMES[i]),
                )
            })?;
        }
        rows.push(AuLabelVector::from_scores(scores));
    }
    Ok(rows)
}

fn save_au_table(path: &Path, labels: &[AuLabelVector]) -> Result<()> {
    let mut out = String::from("frame,AU10,AU14,AU20,AU25,AU26\n");
    for (i, l) in labels.iter().enumerate() {
        let v = l.as_array();
        out.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            v[0], v[1], v[2], v[3], v[4]
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Load one clip directory into an aligned [`SampleClip`].
pub fn load_clip(dir: &Path, fps: f64) -> Result<SampleClip> {
    let clip_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let frames_dir = dir.join("frames");
    let mut frame_paths: Vec<PathBuf> = fs::read_dir(&frames_dir)
        .map_err(|e| Error::data(&frames_dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    frame_paths.sort();
    if frame_paths.is_empty() {
        return Err(Error::data(dir, format!("clip {clip_id}: no frames")));
    }
    let labels = load_au_table(&dir.join("aus.csv"))?;
    if labels.len() != frame_paths.len() {
        return Err(Error::data(
            dir,
            format!(
                "clip {clip_id}: label/frame count mismatch ({} labels, {} frames)",
                labels.len(),
                frame_paths.len()
            ),
        ));
    }
    let frames: Vec<VideoFrame> = frame_paths
        .iter()
        .map(|p| load_frame_png(p))
        .collect::<Result<_>>()?;
    let audio = load_wav(&dir.join("audio.wav"))?;
    let coeffs = extract_mfcc(&audio)?;
    let windows = window_mfcc(&coeffs, &frame_times(frames.len(), fps))?;

    let identity_frame = frames[0].clone();
    let frames = windows
        .into_iter()
        .zip(frames)
        .zip(labels)
        .map(|((mfcc, frame), labels)| ClipFrame {
            mfcc,
            frame,
            labels,
        })
        .collect();
    let clip = SampleClip {
        clip_id,
        fps,
        identity_frame,
        frames,
        audio,
    };
    clip.validate()?;
    Ok(clip)
}

/// Write a clip back using the standard directory layout.
pub fn save_clip(clip: &SampleClip, dir: &Path) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir)?;
    for (i, f) in clip.frames.iter().enumerate() {
        save_frame_png(&frames_dir.join(format!("{i:06}.png")), &f.frame)?;
    }
    save_wav(&dir.join("audio.wav"), &clip.audio)?;
    let labels: Vec<AuLabelVector> = clip.frames.iter().map(|f| f.labels).collect();
    save_au_table(&dir.join("aus.csv"), &labels)?;
    Ok(())
}

/// Read a manifest file: `<split> <clip-dir>` per line, `#` comments allowed.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::data(path, e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut clips = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (split, rel) = line.split_once(char::is_whitespace).ok_or_else(|| {
            Error::data(path, format!("line {}: expected '<split> <dir>'", lineno + 1))
        })?;
        let split = Split::parse(split)?;
        let rel = rel.trim();
        let dir = if Path::new(rel).is_absolute() {
            PathBuf::from(rel)
        } else {
            base.join(rel)
        };
        clips.push(ClipRef { split, dir });
    }
    if clips.is_empty() {
        return Err(Error::data(path, "manifest lists no clips"));
    }
    Ok(DatasetManifest { clips })
}

/// Write a manifest with clip paths relative to the manifest location when
/// possible.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = String::new();
    for c in &manifest.clips {
        let dir = c.dir.strip_prefix(base).unwrap_or(&c.dir);
        out.push_str(&format!("{} {}\n", c.split.as_str(), dir.display()));
    }
    fs::write(path, out)?;
    Ok(())
}
