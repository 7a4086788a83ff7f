//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use uiqa_core::checkpoint::Checkpoint;
use uiqa_core::config::{BackboneKind, Mode, TrainConfig};
use uiqa_core::model::Model;
use uiqa_core::synthetic::{base_image, Distortion, FrBenchmark, NrBenchmark};

pub fn tiny_config(mode: Mode) -> TrainConfig {
    let mut c = TrainConfig::for_mode(mode);
    c.backbone = BackboneKind::Tiny;
    c.patch_size = 32;
    c.validation_fraction = 0.0;
    c
}

/// Untrained checkpoint around a fresh model.
pub fn fresh_checkpoint(mode: Mode, seed: u64) -> Checkpoint {
    let config = tiny_config(mode);
    let backbone = Arc::new(config.build_backbone().unwrap());
    let model = Model::new(backbone, config.model(), seed).unwrap();
    Checkpoint {
        mode,
        config,
        model,
        epoch: 0,
        step: 0,
        metrics: BTreeMap::new(),
        nr_affine: None,
    }
}

pub fn write_image(dir: &Path, name: &str, size: usize, seed: u64) -> PathBuf {
    let p = dir.join(name);
    base_image(size, size, seed).save_png(&p).unwrap();
    p
}

/// 4 references x 2 blur levels at 32 px.
pub fn small_fr_set(dir: &Path) -> PathBuf {
    FrBenchmark {
        references: 4,
        size: 32,
        kinds: vec![Distortion::Blur],
        levels: vec![1, 4],
        seed: 3,
    }
    .write(dir, "fr_small")
    .unwrap()
}

/// 4 contents x 3 blur levels at 32 px.
pub fn small_nr_set(dir: &Path) -> PathBuf {
    NrBenchmark {
        contents: 4,
        size: 32,
        kinds: vec![Distortion::Blur],
        levels: vec![0, 2, 4],
        seed: 3,
    }
    .write(dir, "nr_small")
    .unwrap()
}

pub fn uiqa(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_uiqa"));
    cmd.args(args).env_remove("UIQA_CHECKPOINT_DIR");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn uiqa")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One row of the CLI contract: a description and whether it held.
pub struct ContractRow {
    pub case: String,
    pub ok: bool,
    pub detail: String,
}

fn row(case: &str, ok: bool, detail: String) -> ContractRow {
    ContractRow {
        case: case.to_string(),
        ok,
        detail,
    }
}

fn code_row(case: &str, out: &Output, want: i32) -> ContractRow {
    let got = out.status.code();
    row(
        case,
        got == Some(want),
        format!("exit {got:?}, want {want}; stderr: {}", stderr(out).trim()),
    )
}

/// Runs the documented CLI contract inside `dir` and reports every row.
pub fn cli_contract(dir: &Path) -> Vec<ContractRow> {
    let fr_ckpt = dir.join("fr.safetensors");
    let nr_ckpt = dir.join("nr.safetensors");
    fresh_checkpoint(Mode::Fr, 1).save(&fr_ckpt).unwrap();
    fresh_checkpoint(Mode::Nr, 2).save(&nr_ckpt).unwrap();
    let a = write_image(dir, "a.png", 40, 11);
    let b = write_image(dir, "b.png", 40, 12);
    let missing = dir.join("missing.png");
    let garbage = dir.join("garbage.safetensors");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let fr_set = small_fr_set(&dir.join("frset"));
    let nr_set = small_nr_set(&dir.join("nrset"));
    let mut rows = Vec::new();

    let same = uiqa(
        &[
            "score-fr",
            "--ref",
            s(&a),
            "--dist",
            s(&a),
            "--checkpoint",
            s(&fr_ckpt),
        ],
        &[],
    );
    rows.push(row(
        "score-fr x x prints 0.000000",
        same.status.code() == Some(0) && stdout(&same).trim() == "0.000000",
        stdout(&same),
    ));
    let ab = uiqa(
        &[
            "score-fr",
            "--ref",
            s(&a),
            "--dist",
            s(&b),
            "--checkpoint",
            s(&fr_ckpt),
        ],
        &[],
    );
    let ba = uiqa(
        &[
            "score-fr",
            "--ref",
            s(&b),
            "--dist",
            s(&a),
            "--checkpoint",
            s(&fr_ckpt),
        ],
        &[],
    );
    rows.push(row(
        "score-fr swapped inputs print the same score",
        ab.status.code() == Some(0) && stdout(&ab) == stdout(&ba),
        format!("{} vs {}", stdout(&ab).trim(), stdout(&ba).trim()),
    ));
    let o = uiqa(
        &[
            "score-fr",
            "--ref",
            s(&missing),
            "--dist",
            s(&a),
            "--checkpoint",
            s(&fr_ckpt),
        ],
        &[],
    );
    rows.push(code_row("score-fr missing image -> 2", &o, 2));
    let o = uiqa(
        &[
            "score-fr",
            "--ref",
            s(&a),
            "--dist",
            s(&a),
            "--checkpoint",
            s(&dir.join("none.safetensors")),
        ],
        &[],
    );
    rows.push(code_row("score-fr missing checkpoint -> 2", &o, 2));
    let o = uiqa(
        &[
            "score-fr",
            "--ref",
            s(&a),
            "--dist",
            s(&a),
            "--checkpoint",
            s(&garbage),
        ],
        &[],
    );
    rows.push(code_row("score-fr corrupt checkpoint -> 2", &o, 2));
    let o = uiqa(
        &[
            "score-fr",
            "--ref",
            s(&a),
            "--dist",
            s(&a),
            "--checkpoint",
            s(&nr_ckpt),
        ],
        &[],
    );
    rows.push(code_row("score-fr with nr checkpoint -> 3", &o, 3));

    let n1 = uiqa(
        &["score-nr", "--image", s(&a), "--checkpoint", s(&nr_ckpt)],
        &[],
    );
    let n2 = uiqa(
        &["score-nr", "--image", s(&a), "--checkpoint", s(&nr_ckpt)],
        &[],
    );
    let text = stdout(&n1);
    let mut lines = text.lines();
    let score: Option<f64> = lines
        .next()
        .and_then(|l| l.strip_prefix("score\t"))
        .and_then(|v| v.parse().ok());
    let probs: Vec<f64> = lines
        .next()
        .and_then(|l| l.strip_prefix("distribution\t"))
        .map(|l| l.split('\t').filter_map(|v| v.parse().ok()).collect())
        .unwrap_or_default();
    let sum: f64 = probs.iter().sum();
    rows.push(row(
        "score-nr prints a score in [1, 5] and 5 probabilities summing to 1 +- 1e-4",
        n1.status.code() == Some(0)
            && score.is_some_and(|v| (1.0..=5.0).contains(&v))
            && probs.len() == 5
            && (sum - 1.0).abs() <= 1e-4,
        text.clone(),
    ));
    rows.push(row(
        "score-nr is deterministic",
        stdout(&n1) == stdout(&n2),
        stdout(&n2),
    ));
    let o = uiqa(
        &["score-nr", "--image", s(&a), "--checkpoint", s(&fr_ckpt)],
        &[],
    );
    rows.push(code_row("score-nr with fr checkpoint -> 3", &o, 3));
    let o = uiqa(
        &[
            "score-nr",
            "--image",
            s(&missing),
            "--checkpoint",
            s(&nr_ckpt),
        ],
        &[],
    );
    rows.push(code_row("score-nr missing image -> 2", &o, 2));

    let o = uiqa(
        &["train", "--mode", "uni", "--nr-manifest", s(&nr_set)],
        &[],
    );
    rows.push(code_row("train uni without --fr-manifest -> 4", &o, 4));
    let o = uiqa(&["train", "--mode", "fr"], &[]);
    rows.push(code_row("train fr without --fr-manifest -> 4", &o, 4));
    let bad_cfg = dir.join("bad.toml");
    std::fs::write(&bad_cfg, "mode = \"nr\"\nlearning_rat = 0.1\n").unwrap();
    let o = uiqa(
        &[
            "train",
            "--mode",
            "nr",
            "--config",
            s(&bad_cfg),
            "--nr-manifest",
            s(&nr_set),
        ],
        &[],
    );
    let listed = stderr(&o).contains("learning_rate") && stderr(&o).contains("patch_size");
    rows.push(row(
        "train with unknown config key -> 4 listing valid keys",
        o.status.code() == Some(4) && listed,
        stderr(&o),
    ));
    let o = uiqa(
        &[
            "train",
            "--mode",
            "nr",
            "--nr-manifest",
            s(&dir.join("none.csv")),
        ],
        &[],
    );
    rows.push(code_row("train with missing manifest -> 2", &o, 2));
    let o = uiqa(&["score-fr", "--ref", s(&a)], &[]);
    rows.push(code_row("missing required flag -> 4", &o, 4));
    let o = uiqa(&["frobnicate"], &[]);
    rows.push(code_row("unknown verb -> 4", &o, 4));
    let o = uiqa(&[], &[]);
    rows.push(code_row("no verb -> 4", &o, 4));

    // a short real training run through the env override, evaluated twice
    let cfg = dir.join("nr.toml");
    std::fs::write(
        &cfg,
        "mode = \"nr\"\nbackbone = \"tiny\"\npatch_size = 32\nvalidation_fraction = 0.0\nmax_steps = 3\nnr_batch_size = 4\n",
    )
    .unwrap();
    let mut reports = Vec::new();
    for run in 0..2 {
        let ck_dir = dir.join(format!("env_ckpt{run}"));
        let o = uiqa(
            &[
                "train",
                "--mode",
                "nr",
                "--config",
                s(&cfg),
                "--nr-manifest",
                s(&nr_set),
                "--seed",
                "5",
            ],
            &[("UIQA_CHECKPOINT_DIR", &ck_dir)],
        );
        let best = ck_dir.join("best.safetensors");
        let log_ok = stdout(&o).lines().next()
            == Some("step\tepoch\tl_fr\tl_nr\tl_all\tmin_weight")
            && stdout(&o).lines().count() == 4;
        rows.push(row(
            &format!("train run {run} honours the checkpoint-dir env var and logs TSV"),
            o.status.code() == Some(0) && best.exists() && log_ok,
            format!("{}{}", stdout(&o), stderr(&o)),
        ));
        let out_dir = dir.join(format!("report{run}"));
        let e = uiqa(
            &[
                "eval",
                "--checkpoint",
                s(&best),
                "--manifest",
                s(&nr_set),
                "--out",
                s(&out_dir),
            ],
            &[],
        );
        let csv = std::fs::read_to_string(out_dir.join("nr_small.csv")).unwrap_or_default();
        let header = csv.lines().next().unwrap_or("");
        rows.push(row(
            &format!("eval run {run} writes a CSV with plcc/srocc/rmse columns"),
            e.status.code() == Some(0)
                && ["plcc", "srocc", "rmse"]
                    .iter()
                    .all(|c| header.split(',').any(|h| h == *c)),
            format!("{header}; {}", stderr(&e)),
        ));
        reports.push(csv);
    }
    rows.push(row(
        "identical seed and config give identical reports",
        !reports[0].is_empty() && reports[0] == reports[1],
        String::new(),
    ));
    let o = uiqa(
        &[
            "eval",
            "--checkpoint",
            s(&fr_ckpt),
            "--manifest",
            s(&nr_set),
            "--out",
            s(&dir.join("r")),
        ],
        &[],
    );
    rows.push(code_row("eval fr checkpoint on nr manifest -> 3", &o, 3));
    let o = uiqa(
        &[
            "eval",
            "--checkpoint",
            s(&fr_ckpt),
            "--manifest",
            s(&fr_set),
            "--out",
            s(&dir.join("r")),
        ],
        &[],
    );
    rows.push(code_row("eval fr checkpoint on fr manifest -> 0", &o, 0));
    let o = uiqa(&["inspect-checkpoint", "--checkpoint", s(&fr_ckpt)], &[]);
    rows.push(row(
        "inspect-checkpoint prints the mode",
        o.status.code() == Some(0) && stdout(&o).starts_with("mode\tfr"),
        stdout(&o),
    ));
    rows
}
