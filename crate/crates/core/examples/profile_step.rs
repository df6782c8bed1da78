//! Section timings for one optimizer step (development aid).

use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tcsan_core::autodiff::Tape;
use tcsan_core::config::Config;
use tcsan_core::data::synth::{synth_dataset, SynthConfig};
use tcsan_core::data::Split;
use tcsan_core::networks::*;
use tcsan_core::params::ParamMap;
use tcsan_core::tcsan::init_tcsan_params;

fn main() {
    let cfg = Config::default();
    let clips = synth_dataset(&SynthConfig::default()).unwrap();
    let clip = clips
        .iter()
        .find(|(s, _)| *s == Split::Train)
        .map(|(_, c)| c.clone())
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = ParamMap::new();
    init_identity_encoder(&cfg.model, &mut rng, &mut params, "id_enc");
    init_audio_encoder(&cfg.model, &mut rng, &mut params, "audio_enc");
    init_tcsan_params(&cfg.tcsan, &mut rng, &mut params, "tcsan");
    init_decoder(&cfg.model, &mut rng, &mut params, "dec");
    init_audio2au(&cfg.model, &mut rng, &mut params, "a2au");
    init_au_classifier(&cfg.model, &mut rng, &mut params, "auclf");
    println!("params: {} tensors, {} elements", params.len(), params.element_count());

    let time = |label: &str, f: &mut dyn FnMut()| {
        let t0 = Instant::now();
        f();
        println!("{label}: {:.0} ms", t0.elapsed().as_secs_f64() * 1e3);
    };

    let t = clip.len();
    // Bind cost
    time("bind params", &mut || {
        let tape: Tape<f32> = Tape::new();
        let _ = params.bind(&tape);
    });

    // Identity encoder
    time("id_enc fwd+bwd", &mut || {
        let tape: Tape<f32> = Tape::new();
        let bound = params.bind(&tape);
        let mut id_batch = ndarray::Array4::<f32>::zeros((1, 3, 112, 112));
        id_batch.index_axis_mut(ndarray::Axis(0), 0).assign(clip.identity_frame.pixels());
        let img = tape.leaf(id_batch.into_dyn());
        let (v, _) = identity_encoder_graph(&tape, &bound, "id_enc", &cfg.model, img);
        let s = tape.mean(v);
        let _ = tape.backward(s);
    });

    time("audio_enc fwd+bwd (T=30)", &mut || {
        let tape: Tape<f32> = Tape::new();
        let bound = params.bind(&tape);
        let x = tape.leaf(clip.mfcc_batch().into_dyn());
        let (v, _) = audio_encoder_graph(&tape, &bound, &params, "audio_enc", &cfg.model, x, true);
        let s = tape.mean(v);
        let _ = tape.backward(s);
    });

    time("a2au fwd+bwd (T=30)", &mut || {
        let tape: Tape<f32> = Tape::new();
        let bound = params.bind(&tape);
        let x = tape.leaf(clip.mfcc_batch().into_dyn());
        let (f, _) = audio2au_graph(&tape, &bound, "a2au", &cfg.model, x);
        let s = tape.mean(f);
        let _ = tape.backward(s);
    });

    time("tcsan fwd+bwd (T=30)", &mut || {
        let tape: Tape<f32> = Tape::new();
        let bound = params.bind(&tape);
        let x = tape.leaf(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[t, 1344]), 0.1f32));
        let y = tcsan_core::tcsan::tcsan_graph(&tape, &bound, "tcsan", x, &cfg.tcsan);
        let s = tape.mean(y);
        let _ = tape.backward(s);
    });

    time("decoder fwd+bwd (T=30)", &mut || {
        let tape: Tape<f32> = Tape::new();
        let bound = params.bind(&tape);
        let mut id_batch = ndarray::Array4::<f32>::zeros((1, 3, 112, 112));
        id_batch.index_axis_mut(ndarray::Axis(0), 0).assign(clip.identity_frame.pixels());
        let img = tape.leaf(id_batch.into_dyn());
        let (_, skips) = identity_encoder_graph(&tape, &bound, "id_enc", &cfg.model, img);
        let f = tape.leaf(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[t, 512]), 0.1f32));
        let g = decoder_graph(&tape, &bound, "dec", &cfg.model, f, &skips);
        let s = tape.mean(g);
        let _ = tape.backward(s);
    });

    time("auclf fwd+bwd (T=30)", &mut || {
        let tape: Tape<f32> = Tape::new();
        let bound = params.bind(&tape);
        let x = tape.leaf(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[t, 3, 56, 112]), 0.3f32));
        let p = au_classifier_graph(&tape, &bound, "auclf", &cfg.model, x);
        let s = tape.mean(p);
        let _ = tape.backward(s);
    });

    let mut perc_rng = ChaCha8Rng::seed_from_u64(11);
    let pyramid = ConvPyramid::init(&cfg.model, &mut perc_rng);
    time("perceptual 2x fwd+bwd (T=30)", &mut || {
        let tape: Tape<f32> = Tape::new();
        let x = tape.leaf(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[t, 3, 112, 112]), 0.3f32));
        let y = tape.leaf(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[t, 3, 112, 112]), 0.4f32));
        let a = pyramid.features_graph(&tape, x);
        let b = pyramid.features_graph(&tape, y);
        let l = tcsan_core::losses::perceptual_graph(&tape, &a, &b);
        let _ = tape.backward(l);
    });

    // Adam over everything
    let mut group = tcsan_core::training::AdamGroup::new(
        "all", 1e-4, 0.5, 0.999, params.trainable_names(""), &params,
    );
    let grads: indexmap::IndexMap<String, ndarray::ArrayD<f32>> = params
        .iter()
        .map(|(n, p)| (n.clone(), ndarray::ArrayD::from_elem(p.value.raw_dim(), 1e-4f32)))
        .collect();
    let mut pc = params.clone();
    time("adam step (all params)", &mut || {
        group.step(&mut pc, &grads);
    });
}
