//! Cross-module checks: synthetic data through encoders and metrics.

use ndarray::Axis;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tcsan_core::data::synth::{
    random_identity, random_signals, synth_dataset, synth_dataset_to_dir, ClipSignals,
    SynthConfig, MOUTH_COLS, MOUTH_ROWS,
};
use tcsan_core::data::{load_manifest, Split};
use tcsan_core::metrics::difference_map;
use tcsan_core::networks::{encode_audio_batch, init_audio_encoder, ModelConfig};
use tcsan_core::params::ParamMap;

#[test]
fn seed7_rates_stay_away_from_the_boundaries() {
    let cfg = SynthConfig::default();
    let clips = synth_dataset(&cfg).unwrap();
    let train: Vec<_> = clips
        .iter()
        .filter(|(s, _)| *s == Split::Train)
        .map(|(_, c)| c.clone())
        .collect();
    let rates = tcsan_core::data::compute_au_rates(&train).unwrap();
    eprintln!("seed-7 train AU rates: {rates:?}");
    for r in rates {
        assert!(r > 0.05 && r < 0.98, "rate {r} too close to a boundary");
    }
}

#[test]
fn distinct_windows_encode_to_distinct_vectors() {
    let cfg = SynthConfig::default();
    let clips = synth_dataset(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let model = ModelConfig::default();
    let mut params = ParamMap::new();
    init_audio_encoder(&model, &mut rng, &mut params, "audio_enc");

    let windows: Vec<_> = clips
        .iter()
        .flat_map(|(_, c)| c.frames.iter().map(|f| &f.mfcc))
        .collect();
    let encoded = encode_audio_batch(&windows, &params, "audio_enc", &model).unwrap();
    let n = encoded.nrows();
    let mut distinct = 0usize;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            pairs += 1;
            let d = encoded
                .index_axis(Axis(0), i)
                .iter()
                .zip(encoded.index_axis(Axis(0), j).iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            if d > 1e-6 {
                distinct += 1;
            }
        }
    }
    assert!(
        distinct as f64 >= 0.99 * pairs as f64,
        "{distinct}/{pairs} window encodings distinct"
    );
}

#[test]
fn mouth_region_bounds_cover_all_mouth_motion() {
    // Two frames differing only in the driving signals: every changed pixel
    // must sit inside the advertised mouth region.
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let identity = random_identity(&mut rng);
    let closed = ClipSignals::zeros(1);
    let mut open = ClipSignals::zeros(1);
    open.opening[0] = 1.0;
    open.width[0] = 1.0;
    open.raise[0] = 1.0;
    open.dimple[0] = 1.0;
    let a = synth_clip_frame(&identity, &closed);
    let b = synth_clip_frame(&identity, &open);
    let map = difference_map(&a, &b);
    for y in 0..112 {
        for x in 0..112 {
            if map[[y, x]] > 0.0 {
                assert!(
                    MOUTH_ROWS.contains(&y) && MOUTH_COLS.contains(&x),
                    "changed pixel ({y},{x}) outside the mouth region"
                );
            }
        }
    }
}

fn synth_clip_frame(
    identity: &tcsan_core::data::synth::FaceIdentity,
    signals: &ClipSignals,
) -> tcsan_core::data::VideoFrame {
    tcsan_core::data::synth::draw_face(identity, signals, 0)
}

#[test]
fn dataset_written_to_disk_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        clips: 2,
        frames_per_clip: 24,
        seed: 11,
        ..SynthConfig::default()
    };
    let (manifest, path) = synth_dataset_to_dir(&cfg, dir.path()).unwrap();
    assert_eq!(manifest.clips.len(), cfg.clips + cfg.test_clips());
    let loaded = load_manifest(&path).unwrap();
    let train = loaded.load_split(Split::Train, cfg.fps).unwrap();
    let in_memory = synth_dataset(&cfg).unwrap();
    for (clip, (split, mem)) in train.iter().zip(in_memory.iter()) {
        assert_eq!(*split, Split::Train);
        assert_eq!(clip.clip_id, mem.clip_id);
        for (a, b) in clip.frames.iter().zip(&mem.frames) {
            assert_eq!(a.frame.pixels(), b.frame.pixels());
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.mfcc.coeffs(), b.mfcc.coeffs());
        }
    }
}
