use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mslm::mask::{retina_masks, verify_mask_causality};

const CONFIG: &str = r#"{
  "model": {"d_model": 16, "d_ff": 32, "num_heads": 2, "context": 16, "vocab_size": 120, "layers": [1]},
  "train": {"steps": 12, "batch_size": 2, "warmup_steps": 2, "eval_every": 6, "checkpoint_every": 6},
  "data": {"train": "train.txt", "valid": "valid.txt", "test": "test.txt"},
  "eval": {"stride": 8},
  "analysis": {"perturb_length": 8, "perturb_windows": 20}
}"#;

fn corpus(root: &Path, name: &str, bytes: usize) {
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/moby-dick/train.txt")).unwrap();
    let cut = text.char_indices().nth(bytes).map(|(i, _)| i).unwrap_or(text.len());
    fs::write(root.join(name), &text[..cut]).unwrap();
}

fn mslm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mslm"))
        .current_dir(dir)
        .env("MSLM_THREADS", "1")
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// A workspace with a small corpus and a trained run in `run/`.
fn trained() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), "train.txt", 12_000);
    corpus(dir.path(), "valid.txt", 3_000);
    corpus(dir.path(), "test.txt", 4_000);
    fs::write(dir.path().join("config.json"), CONFIG).unwrap();
    ok(mslm(dir.path(), &["train", "--config", "config.json", "--out", "run"]));
    let ck = dir.path().join("run/checkpoints/last.mslm");
    (dir, ck)
}

#[test]
fn missing_corpus_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.json"), CONFIG).unwrap();
    let o = mslm(dir.path(), &["train", "--config", "config.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("data.train"));
}

#[test]
fn unknown_override_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = mslm(dir.path(), &["maskshow", "model.no_such_key=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.no_such_key"));
}

#[test]
fn train_writes_the_run_layout_and_analyses_are_reproducible() {
    let (dir, ck) = trained();
    let run = dir.path().join("run");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,lr,train_nll,valid_ppl"));
    assert_eq!(metrics.lines().count(), 13);
    assert!(run.join("config_echo.json").is_file() && run.join("vocab.json").is_file());
    assert!(run.join("checkpoints/step_00000006.mslm").is_file());

    // The echo is canonical: loading and re-echoing changes nothing.
    let echo = fs::read_to_string(run.join("config_echo.json")).unwrap();
    let cfg = mslm::config::RunConfig::from_json(&echo).unwrap();
    assert_eq!(cfg.canonical_json().unwrap() + "\n", echo);

    let ck = ck.to_str().unwrap();
    ok(mslm(dir.path(), &["eval", "--checkpoint", ck]));
    let first = fs::read(run.join("analysis/eval_test.csv")).unwrap();
    ok(mslm(dir.path(), &["eval", "--checkpoint", ck]));
    assert_eq!(first, fs::read(run.join("analysis/eval_test.csv")).unwrap());

    ok(mslm(dir.path(), &["perturb", "--checkpoint", ck, "--identity-permutation"]));
    let mut rdr = csv::Reader::from_path(run.join("analysis/perturbation.csv")).unwrap();
    let col = rdr.headers().unwrap().iter().position(|h| h == "mean_delta_nll").unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert!(!rows.is_empty());
    for r in rows {
        assert_eq!(r[col].parse::<f64>().unwrap(), 0.0);
    }

    ok(mslm(dir.path(), &["freq", "--checkpoint", ck]));
    ok(mslm(dir.path(), &["nn", "--checkpoint", ck, "analysis.nn_chunk=8"]));
    ok(mslm(dir.path(), &["sample", "--checkpoint", ck, "analysis.sample.max_new=6", "analysis.prompt_length=8", "analysis.sample_prompts=2"]));
    let a = fs::read(run.join("analysis/samples.csv")).unwrap();
    ok(mslm(dir.path(), &["sample", "--checkpoint", ck, "analysis.sample.max_new=6", "analysis.prompt_length=8", "analysis.sample_prompts=2"]));
    assert_eq!(a, fs::read(run.join("analysis/samples.csv")).unwrap());
    assert!(run.join("samples/prompt_000.txt").is_file());
}

#[test]
fn seed_changes_batches_but_not_the_rest_of_the_echo() {
    let (dir, _) = trained();
    ok(mslm(dir.path(), &["train", "--config", "config.json", "--out", "other", "--seed", "99"]));
    let a = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    let b = fs::read_to_string(dir.path().join("other/metrics.csv")).unwrap();
    assert_ne!(a, b);
    let load = |p: &str| mslm::config::RunConfig::load(&dir.path().join(p)).unwrap();
    let (x, mut y) = (load("run/config_echo.json"), load("other/config_echo.json"));
    assert_eq!(y.seed, 99);
    y.seed = x.seed;
    assert_eq!(x, y);
}

#[test]
fn version_mismatch_names_both_versions() {
    let (dir, ck) = trained();
    let mut bytes = fs::read(&ck).unwrap();
    bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
    let bad = dir.path().join("run/checkpoints/old.mslm");
    fs::write(&bad, bytes).unwrap();
    let o = mslm(dir.path(), &["eval", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains('7') && err.contains(&mslm::model::CHECKPOINT_VERSION.to_string()), "{err}");
}

#[test]
fn cost_of_a_twelve_layer_vanilla_has_twelve_equal_rows() {
    let dir = tempfile::tempdir().unwrap();
    ok(mslm(dir.path(), &["cost", "--out", ".", "model.layers=12", "model.context=512", "model.d_model=64", "model.d_ff=256"]));
    let mut rdr = csv::Reader::from_path(dir.path().join("analysis/cost_layers.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 13);
    let totals: Vec<f64> = rows.iter().map(|r| r[7].parse().unwrap()).collect();
    for t in &totals[..12] {
        assert_eq!(*t, totals[0]);
    }
    assert_eq!(&rows[12][1], "total");
    assert_eq!(totals[12], 12.0 * totals[0]);
    assert!(dir.path().join("analysis/cost_memory.csv").is_file());
    assert!(dir.path().join("analysis/cost_time.csv").is_file());
}

fn grids(stdout: &str) -> Vec<Vec<String>> {
    stdout
        .split("\n\n")
        .map(|g| g.lines().skip(1).map(str::to_string).collect())
        .collect()
}

#[test]
fn maskshow_causal_and_local() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(mslm(dir.path(), &["maskshow", "model.context=4"]));
    assert_eq!(grids(&out), vec![vec!["#...", "##..", "###.", "####"]]);
    let out = ok(mslm(dir.path(), &["maskshow", "model.context=4", "model.local_window=1"]));
    assert_eq!(grids(&out), vec![vec!["#...", ".#..", "..#.", "...#"]]);
}

#[test]
fn maskshow_retina_matches_brute_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(mslm(
        dir.path(),
        &["maskshow", "model.family=retina", "model.scales=4,1", "model.layers=1", "model.context=16", "model.windows=0:4,4:16"],
    ));
    let got = grids(&out);
    assert_eq!(got.len(), 2);
    for (g, (k, lo, hi)) in got.iter().zip([(1usize, 0usize, 4usize), (4, 4, 16)]) {
        let want: Vec<String> = (0..16)
            .map(|t| {
                (0..16 / k)
                    .map(|j| {
                        let ts = (j + 1) * k - 1;
                        if ts <= t && t - ts >= lo && t - ts < hi { '#' } else { '.' }
                    })
                    .collect()
            })
            .collect();
        assert_eq!(g, &want);
    }
    let masks = retina_masks(16, &[1, 4], &"0:4,4:16".parse().unwrap()).unwrap();
    assert!(masks.iter().zip([1, 4]).all(|(m, k)| verify_mask_causality(m, k)));
    assert_eq!(got[0].join("\n") + "\n", masks[0].render_ascii());
}
