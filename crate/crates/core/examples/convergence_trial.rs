//! End-to-end convergence trial on the default synthetic set
//! (development aid for picking acceptance step counts).

use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tcsan_core::config::Config;
use tcsan_core::data::synth::{synth_dataset, SynthConfig};
use tcsan_core::data::Split;
use tcsan_core::metrics::au_scores;
use tcsan_core::networks::{ConvPyramid, PerceptualExtractor};
use tcsan_core::training::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let a2au_steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(400);
    let auclf_steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(300);

    let config = Config::default();
    let t0 = Instant::now();
    let clips = synth_dataset(&SynthConfig::default()).unwrap();
    let train: Vec<_> = clips.iter().filter(|(s, _)| *s == Split::Train).map(|(_, c)| c.clone()).collect();
    let test: Vec<_> = clips.iter().filter(|(s, _)| *s == Split::Test).map(|(_, c)| c.clone()).collect();
    println!("data: {:.1}s", t0.elapsed().as_secs_f64());

    let mut cfg = config.train.clone();
    cfg.log_every = 0;

    // Pretrain audio-to-AU
    cfg.steps = a2au_steps;
    let t1 = Instant::now();
    let a2au = pretrain_audio2au(&train, &cfg, &config.model).unwrap();
    let (first, last) = a2au.smoothed_endpoints(20);
    println!(
        "a2au: {} steps in {:.1}s, loss {:.4} -> {:.4} (ratio {:.3})",
        a2au_steps, t1.elapsed().as_secs_f64(), first, last, last / first
    );
    // AU25 F1 on the test split
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for clip in &test {
        let windows: Vec<_> = clip.frames.iter().map(|f| &f.mfcc).collect();
        let (_, probs) = tcsan_core::networks::audio2au_batch(&windows, &a2au.params, "a2au", &config.model).unwrap();
        for (i, f) in clip.frames.iter().enumerate() {
            let r = probs.row(i);
            preds.push(tcsan_core::data::AuProbVector::new([r[0], r[1], r[2], r[3], r[4]]).unwrap());
            gts.push(f.labels);
        }
    }
    let s = au_scores(&preds, &gts, 0.5).unwrap();
    println!(
        "a2au test: AU25 F1 {:.3} acc {:.3} | avg F1 {:.3}",
        s.per_au[3].0, s.per_au[3].1, s.avg_f1
    );

    // Pretrain AU classifier
    cfg.steps = auclf_steps;
    let t2 = Instant::now();
    let (auclf, report) = pretrain_au_classifier(&train, &test, &cfg, &config.model).unwrap();
    println!(
        "auclf: {} steps in {:.1}s, train avg acc {:.3}, test avg acc {:.3}",
        auclf_steps,
        t2.elapsed().as_secs_f64(),
        report.train.avg_accuracy,
        report.test.as_ref().unwrap().avg_accuracy
    );

    // Full training
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA11CE);
    let perceptual = ConvPyramid::init(&config.model, &mut rng);
    let _ = perceptual.params();
    cfg.steps = steps;
    let setup = TrainSetup {
        train_cfg: &cfg,
        tcsan_cfg: &config.tcsan,
        model_cfg: &config.model,
        variant: GeneratorVariant { use_tcsan: true, use_audio2au: true },
        a2au: &a2au.params,
        auclf: &auclf.params,
        perceptual: &perceptual,
        config_text: String::new(),
    };
    let t3 = Instant::now();
    let outcome = train_full(&train, &setup, None, None).unwrap();
    let el = t3.elapsed().as_secs_f64();
    println!("train_full: {} steps in {:.1}s ({:.2}s/step)", steps, el, el / steps as f64);
    let rec0: f64 = outcome.losses[..10.min(steps)].iter().map(|l| l.rec).sum::<f64>() / 10f64.min(steps as f64);
    for chunk in outcome.losses.chunks(25) {
        let mean_rec: f64 = chunk.iter().map(|l| l.rec).sum::<f64>() / chunk.len() as f64;
        let mean_au: f64 = chunk.iter().map(|l| l.au).sum::<f64>() / chunk.len() as f64;
        println!(
            "  steps {:4}..{:4}: rec {:.4} (x{:.2} of initial) au {:.4}",
            chunk[0].step,
            chunk[chunk.len() - 1].step,
            mean_rec,
            mean_rec / rec0,
            mean_au
        );
    }
    println!("initial rec {:.4}, final rec {:.4}, ratio {:.3}",
        outcome.losses[0].rec,
        outcome.losses.last().unwrap().rec,
        outcome.losses.last().unwrap().rec / outcome.losses[0].rec);
    println!("total wall: {:.1}s", t0.elapsed().as_secs_f64());
}
