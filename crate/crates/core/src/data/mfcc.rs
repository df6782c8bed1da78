//! Mel-frequency cepstral coefficient extraction and per-frame windowing.
//!
//! 25 ms Hamming analysis window, 10 ms hop, 26 triangular mel filters over
//! 0..Nyquist, DCT-II coefficients 1..=12 (the energy coefficient c0 is
//! excluded). Internals run in f64; rounding to f32 happens once at the end.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

use super::{AudioTrack, MfccFrame, MFCC_COEFFS, MFCC_WINDOW_COLS};
use crate::error::{Error, Result};

/// Analysis window length in seconds.
pub const WINDOW_S: f64 = 0.025;
/// Hop between successive columns in seconds.
pub const HOP_S: f64 = 0.010;
/// Number of triangular mel filters.
pub const MEL_FILTERS: usize = 26;
/// Floor applied to mel energies before the log.
const POWER_FLOOR: f64 = 1e-12;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filterbank as a (MEL_FILTERS, bins) weight matrix.
fn mel_filterbank(fft_n: usize, sample_rate: u32) -> Array2<f64> {
    let bins = fft_n / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let points: Vec<f64> = (0..MEL_FILTERS + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (MEL_FILTERS + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / fft_n as f64;
    let mut fb = Array2::<f64>::zeros((MEL_FILTERS, bins));
    for m in 0..MEL_FILTERS {
        let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
        for b in 0..bins {
            let f = b as f64 * bin_hz;
            let w = if f >= lo && f <= center && center > lo {
                (f - lo) / (center - lo)
            } else if f > center && f <= hi && hi > center {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            fb[[m, b]] = w;
        }
    }
    fb
}

/// Extract a (12, T_a) MFCC matrix; T_a counts the full 25 ms windows that
/// fit at the 10 ms hop: T_a = (len - window)/hop + 1.
pub fn extract_mfcc(audio: &AudioTrack) -> Result<Array2<f32>> {
    if !audio.samples.iter().all(|s| s.is_finite()) {
        return Err(Error::Audio("non-finite audio samples".into()));
    }
    let sr = audio.sample_rate as f64;
    let win = (WINDOW_S * sr).round() as usize;
    let hop = (HOP_S * sr).round() as usize;
    if win == 0 || hop == 0 {
        return Err(Error::Audio(format!(
            "sample rate {} too low for a {} ms analysis window",
            audio.sample_rate,
            WINDOW_S * 1e3
        )));
    }
    if audio.samples.len() < win {
        return Err(Error::Audio(format!(
            "audio too short: {} samples, need at least one {win}-sample window",
            audio.samples.len()
        )));
    }
    let cols = (audio.samples.len() - win) / hop + 1;
    let fft_n = win.next_power_of_two();
    let fb = mel_filterbank(fft_n, audio.sample_rate);
    let hamming: Vec<f64> = (0..win)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (win - 1) as f64).cos())
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_n);

    let mut out = Array2::<f32>::zeros((MFCC_COEFFS, cols));
    let mut buf = vec![Complex::new(0.0, 0.0); fft_n];
    let bins = fft_n / 2 + 1;
    let m = MEL_FILTERS as f64;
    for col in 0..cols {
        let start = col * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < win {
                Complex::new(audio.samples[start + i] as f64 * hamming[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..bins].iter().map(|c| c.norm_sqr()).collect();
        let mut log_mel = [0.0f64; MEL_FILTERS];
        for (f, lm) in log_mel.iter_mut().enumerate() {
            let mut e = 0.0;
            for (b, p) in power.iter().enumerate() {
                e += fb[[f, b]] * p;
            }
            *lm = e.max(POWER_FLOOR).ln();
        }
        // DCT-II, keeping c1..=c12 (c0 carries energy and is excluded).
        let scale = (2.0 / m).sqrt();
        for n in 1..=MFCC_COEFFS {
            let mut acc = 0.0;
            for (f, lm) in log_mel.iter().enumerate() {
                acc += lm
                    * (std::f64::consts::PI * n as f64 * (f as f64 + 0.5) / m).cos();
            }
            out[[n - 1, col]] = (scale * acc) as f32;
        }
    }
    Ok(out)
}

/// Slice one zero-padded 12x28 window per video frame, centered on the
/// frame's timestamp. Column `c` of the MFCC matrix is taken to sit at time
/// `c * hop`; the window for a frame at time `t` covers the 28 hop-aligned
/// columns spanning `[t - 140 ms, t + 140 ms)`.
pub fn window_mfcc(mfcc: &Array2<f32>, frame_times: &[f64]) -> Result<Vec<MfccFrame>> {
    if frame_times.is_empty() {
        return Err(Error::invalid("window_mfcc requires at least one frame time"));
    }
    if frame_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("frame times must be strictly increasing"));
    }
    if mfcc.nrows() != MFCC_COEFFS {
        return Err(Error::shape(
            "window_mfcc",
            format!("{MFCC_COEFFS} coefficient rows"),
            format!("{}", mfcc.nrows()),
        ));
    }
    let t_a = mfcc.ncols() as isize;
    let half = (MFCC_WINDOW_COLS / 2) as isize;
    let mut windows = Vec::with_capacity(frame_times.len());
    for &t in frame_times {
        let center = (t / HOP_S).round() as isize;
        let start = center - half;
        let mut w = Array2::<f32>::zeros((MFCC_COEFFS, MFCC_WINDOW_COLS));
        for c in 0..MFCC_WINDOW_COLS as isize {
            let src = start + c;
            if src >= 0 && src < t_a {
                w.column_mut(c as usize)
                    .assign(&mfcc.column(src as usize));
            }
        }
        windows.push(MfccFrame::new(w)?);
    }
    Ok(windows)
}

/// Uniform frame timestamps `j / fps` for `count` frames.
pub fn frame_times(count: usize, fps: f64) -> Vec<f64> {
    (0..count).map(|j| j as f64 / fps).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(len_s: f64, sr: u32, freq: f64, amp: f32) -> AudioTrack {
        let n = (len_s * sr as f64).round() as usize;
        let samples: Vec<f32> = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin() as f32)
            .collect();
        AudioTrack::new(samples, sr).unwrap()
    }

    #[test]
    fn one_second_at_16khz_gives_98_columns() {
        let audio = tone(1.0, 16000, 220.0, 0.5);
        let m = extract_mfcc(&audio).unwrap();
        // (16000 - 400)/160 + 1 full 25 ms windows at the 10 ms hop.
        assert_eq!(m.dim(), (12, 98));
        assert!(m.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn silence_gives_identical_columns() {
        let audio = AudioTrack::new(vec![0.0; 16000], 16000).unwrap();
        let m = extract_mfcc(&audio).unwrap();
        let first = m.column(0).to_owned();
        for col in m.columns() {
            assert_eq!(col.to_owned(), first);
        }
    }

    #[test]
    fn too_short_audio_is_rejected() {
        let audio = AudioTrack::new(vec![0.0; 100], 16000).unwrap();
        assert!(extract_mfcc(&audio).is_err());
    }

    #[test]
    fn window_at_half_second_covers_expected_columns() {
        let audio = tone(1.0, 16000, 220.0, 0.5);
        let m = extract_mfcc(&audio).unwrap();
        let w = window_mfcc(&m, &[0.5]).unwrap().pop().unwrap();
        // Columns 36..64 cover [0.36 s, 0.64 s) at the 10 ms hop.
        assert_eq!(w.coeffs().ncols(), 28);
        for c in 0..28 {
            assert_eq!(w.coeffs().column(c), m.column(36 + c));
        }
    }

    #[test]
    fn window_at_time_zero_is_left_padded() {
        let audio = tone(1.0, 16000, 220.0, 0.5);
        let m = extract_mfcc(&audio).unwrap();
        let w = window_mfcc(&m, &[0.0]).unwrap().pop().unwrap();
        for c in 0..14 {
            assert!(w.coeffs().column(c).iter().all(|v| *v == 0.0));
        }
        for c in 14..28 {
            assert_eq!(w.coeffs().column(c), m.column(c - 14));
        }
    }

    #[test]
    fn window_spans_280ms_of_hop_aligned_columns() {
        // A 280 ms stretch of audio corresponds to exactly 28 hop-aligned
        // columns; a window centered inside it never reaches further.
        let audio = tone(0.28, 16000, 220.0, 0.5);
        let m = extract_mfcc(&audio).unwrap();
        let w = window_mfcc(&m, &[0.14]).unwrap().pop().unwrap();
        assert_eq!(w.coeffs().dim(), (12, 28));
        assert_eq!(MFCC_WINDOW_COLS as f64 * HOP_S, 0.28);
        // Real columns land in slots [0, T_a); the hop-aligned tail beyond the
        // last full analysis window is zero-padded.
        let t_a = m.ncols();
        for c in 0..28 {
            if c < t_a {
                assert_eq!(w.coeffs().column(c), m.column(c));
            } else {
                assert!(w.coeffs().column(c).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn windows_slide_synchronously_with_frames() {
        let audio = tone(3.0, 16000, 220.0, 0.5);
        let m = extract_mfcc(&audio).unwrap();
        let times = frame_times(75, 25.0);
        let ws = window_mfcc(&m, &times).unwrap();
        assert_eq!(ws.len(), 75);
        // Consecutive frames at 25 fps shift the window by 4 hop columns.
        for (j, w) in ws.iter().enumerate() {
            let start = (j as isize) * 4 - 14;
            for c in 0..28isize {
                let src = start + c;
                if src >= 0 && (src as usize) < m.ncols() {
                    assert_eq!(w.coeffs().column(c as usize), m.column(src as usize));
                }
            }
        }
    }

    #[test]
    fn empty_frame_times_is_an_error() {
        let audio = tone(1.0, 16000, 220.0, 0.5);
        let m = extract_mfcc(&audio).unwrap();
        assert!(window_mfcc(&m, &[]).is_err());
    }
}
