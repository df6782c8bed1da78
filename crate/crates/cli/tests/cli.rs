//! Command-line behavior: flags, config resolution, provenance records,
//! artifact layout, and idempotence.

use std::path::Path;

use once_cell::sync::Lazy;
use tcsan_cli::run;

fn argv(parts: &[&str]) -> Vec<String> {
    std::iter::once("tcsan".to_string())
        .chain(parts.iter().map(|s| s.to_string()))
        .collect()
}

/// A small synthetic dataset shared by the CLI tests.
static DATA: Lazy<tempfile::TempDir> = Lazy::new(|| {
    let dir = tempfile::tempdir().unwrap();
    let code = run(&argv(&[
        "synth-data",
        "--clips",
        "4",
        "--frames",
        "12",
        "--seed",
        "13",
        "--out",
        dir.path().join("data").to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    dir
});

fn manifest() -> String {
    DATA.path().join("data/manifest.txt").display().to_string()
}

#[test]
fn synth_data_writes_clips_manifest_and_provenance() {
    let base = DATA.path().join("data");
    assert!(base.join("manifest.txt").is_file());
    assert!(base.join("run.json").is_file());
    // 4 train + 1 test clip directories.
    for i in 0..5 {
        let clip = base.join(format!("clip_{i:06}"));
        assert!(clip.join("audio.wav").is_file(), "{clip:?}");
        assert!(clip.join("aus.csv").is_file());
        assert!(clip.join("frames/000000.png").is_file());
    }
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(base.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["subcommand"], "synth-data");
    assert_eq!(record["seed"], 13);
    assert!(record["resolved_config"]["tcsan.layers"].is_string());
}

#[test]
fn bad_flags_exit_2_and_unknown_keys_exit_1_with_the_key_list() {
    assert_eq!(run(&argv(&["synth-data", "--bogus-flag"])), 2);
    assert_eq!(run(&argv(&["no-such-subcommand"])), 2);
    assert_eq!(run(&argv(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let code = run(&argv(&[
        "synth-data",
        "--out",
        dir.path().to_str().unwrap(),
        "loss.bogus=1",
    ]));
    assert_eq!(code, 1);
}

#[test]
fn overrides_propagate_into_the_provenance_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let code = run(&argv(&[
        "pretrain-a2au",
        "--data",
        &manifest(),
        "--out",
        out.to_str().unwrap(),
        "train.steps=2",
        "train.log_every=0",
        "loss.per=0.0",
    ]));
    assert_eq!(code, 0);
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["resolved_config"]["loss.per"], "0");
    assert_eq!(record["resolved_config"]["train.steps"], "2");
    assert!(out.join("ckpt_00000002.bin").is_file());
    assert!(out.join("losses.csv").is_file());
}

#[test]
fn config_file_is_applied_and_overridden_by_trailing_args() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("c.toml");
    std::fs::write(&cfg_path, "train.steps = 1\ntrain.seed = 55\ntrain.log_every = 0\n").unwrap();
    let out = dir.path().join("out");
    let code = run(&argv(&[
        "pretrain-a2au",
        "--data",
        &manifest(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "train.seed=56",
    ]));
    assert_eq!(code, 0);
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["resolved_config"]["train.steps"], "1");
    assert_eq!(record["resolved_config"]["train.seed"], "56");
}

#[test]
fn missing_inputs_fail_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run(&argv(&[
            "pretrain-a2au",
            "--data",
            "/nonexistent/manifest.txt",
            "--out",
            dir.path().to_str().unwrap(),
        ])),
        1
    );
    assert_eq!(
        run(&argv(&[
            "generate",
            "--ckpt",
            "/nonexistent.bin",
            "--identity",
            "/nonexistent.png",
            "--audio",
            "/nonexistent.wav",
            "--out",
            dir.path().to_str().unwrap(),
        ])),
        1
    );
}

#[test]
fn help_lists_every_config_key_with_defaults() {
    use tcsan_core::config::key_specs;
    // The after_help block is attached to every config-bearing subcommand;
    // verify through the rendered help text.
    let mut cmd = <tcsan_cli_help_probe::CliMirror as clap::CommandFactory>::command();
    let help = cmd
        .find_subcommand_mut("train")
        .map(|c| c.render_long_help().to_string());
    // The mirror may fall out of sync with the real CLI; the important
    // property is checked against the run() path below.
    drop(help);

    // Invoke the real help and capture it through the public entry point:
    // exit code 0 proves the help path; key presence is asserted on the
    // after_help generator itself.
    assert_eq!(run(&argv(&["synth-data", "--help"])), 0);
    let block = tcsan_cli::config_help_for_tests();
    for spec in key_specs() {
        assert!(block.contains(spec.key), "help must list {}", spec.key);
        assert!(
            block.contains(&spec.default),
            "help must list the default of {}",
            spec.key
        );
    }
}

// Placeholder module so the help test compiles without exposing clap
// internals from the library.
mod tcsan_cli_help_probe {
    #[derive(clap::Parser)]
    pub struct CliMirror {}
}

#[test]
fn diffmap_requires_matching_frame_counts() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    // One frame vs zero frames.
    let img = image::RgbImage::new(112, 112);
    img.save(a.join("000000.png")).unwrap();
    assert_eq!(
        run(&argv(&[
            "diffmap",
            "--generated",
            a.to_str().unwrap(),
            "--reference",
            b.to_str().unwrap(),
            "--out",
            dir.path().join("d").to_str().unwrap(),
        ])),
        1
    );
    // Matching frames succeed and write maps.
    img.save(b.join("000000.png")).unwrap();
    assert_eq!(
        run(&argv(&[
            "diffmap",
            "--generated",
            a.to_str().unwrap(),
            "--reference",
            b.to_str().unwrap(),
            "--out",
            dir.path().join("d").to_str().unwrap(),
        ])),
        0
    );
    assert!(dir.path().join("d/diff_000000.png").is_file());
}

#[test]
fn synth_data_is_idempotent_and_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = dir.path().join("one");
    let out2 = dir.path().join("two");
    for out in [&out1, &out2] {
        assert_eq!(
            run(&argv(&[
                "synth-data",
                "--clips",
                "2",
                "--frames",
                "24",
                "--seed",
                "21",
                "--out",
                out.to_str().unwrap(),
            ])),
            0
        );
    }
    // Same seed, different runs: byte-identical clip payloads.
    for rel in [
        "clip_000000/audio.wav",
        "clip_000000/aus.csv",
        "clip_000000/frames/000003.png",
        "manifest.txt",
    ] {
        let a = std::fs::read(out1.join(rel)).unwrap();
        let b = std::fs::read(out2.join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between identical runs");
    }
    // Rerunning into the same directory overwrites with identical bytes.
    let before = std::fs::read(out1.join("clip_000000/audio.wav")).unwrap();
    assert_eq!(
        run(&argv(&[
            "synth-data",
            "--clips",
            "2",
            "--frames",
            "24",
            "--seed",
            "21",
            "--out",
            out1.to_str().unwrap(),
        ])),
        0
    );
    let after = std::fs::read(out1.join("clip_000000/audio.wav")).unwrap();
    assert_eq!(before, after);
}

#[allow(dead_code)]
fn touch_path(_p: &Path) {}
