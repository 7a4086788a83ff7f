use std::path::Path;

use uiqa_core::config::{BackboneKind, Mode, TrainConfig};
use uiqa_core::data::{load_manifest, DatasetKind, DatasetManifest};
use uiqa_core::synthetic::{Distortion, FrBenchmark, NrBenchmark};
use uiqa_core::trainer::{run, train_joint, train_nr, StepLog, TrainOptions};

fn fr_set(dir: &Path, size: usize) -> DatasetManifest {
    let p = FrBenchmark {
        references: 3,
        size,
        kinds: vec![Distortion::Blur, Distortion::Noise],
        levels: vec![1, 3, 5],
        seed: 21,
    }
    .write(dir, "fr")
    .unwrap();
    load_manifest(p, DatasetKind::Fr).unwrap()
}

fn nr_set(dir: &Path, size: usize) -> DatasetManifest {
    let p = NrBenchmark {
        contents: 6,
        size,
        kinds: vec![Distortion::Blur],
        levels: vec![0, 2, 4],
        seed: 21,
    }
    .write(dir, "nr")
    .unwrap();
    load_manifest(p, DatasetKind::Nr).unwrap()
}

fn config(mode: Mode, steps: usize) -> TrainConfig {
    let mut c = TrainConfig::for_mode(mode);
    c.backbone = BackboneKind::Tiny;
    c.patch_size = 32;
    c.validation_fraction = 0.0;
    c.max_steps = Some(steps);
    c.epochs = 1_000_000;
    c.nr_batch_size = 8;
    c.fr_batch_size = 8;
    c.seed = 4;
    c
}

#[test]
fn joint_without_fr_batches_matches_nr_training() {
    let dir = tempfile::tempdir().unwrap();
    let fr = fr_set(&dir.path().join("fr"), 32);
    let nr = nr_set(&dir.path().join("nr"), 32);
    let solo = train_nr(&config(Mode::Nr, 12), &nr).unwrap();
    let opts = TrainOptions {
        fr_enabled: false,
        ..TrainOptions::default()
    };
    let joint = run(&config(Mode::Uni, 12), Some(&fr), Some(&nr), opts).unwrap();
    assert_eq!(solo.history.len(), joint.history.len());
    for (a, b) in solo.history.iter().zip(&joint.history) {
        assert_eq!(
            a.l_nr.map(f64::to_bits),
            b.l_nr.map(f64::to_bits),
            "step {}",
            a.step
        );
        assert_eq!(b.l_fr, None);
    }
    for ((_, name, x), (_, _, y)) in solo
        .final_model
        .store
        .iter()
        .zip(joint.final_model.store.iter())
    {
        assert!(
            x.iter()
                .zip(y.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            "{name}"
        );
    }
}

#[test]
fn joint_loss_decreases_over_first_fifty_steps() {
    let dir = tempfile::tempdir().unwrap();
    let fr = fr_set(&dir.path().join("fr"), 64);
    let nr = nr_set(&dir.path().join("nr"), 64);
    let mut cfg = config(Mode::Uni, 50);
    cfg.patch_size = 64;
    // full-dataset batches: the logged loss is the whole training loss
    cfg.fr_batch_size = fr.len();
    cfg.nr_batch_size = nr.len();
    cfg.patches_per_image = 1;
    cfg.learning_rate = 5e-2;
    cfg.preset_override = true;
    let out = train_joint(&cfg, &fr, &nr).unwrap();
    let l: Vec<f64> = out.history.iter().map(|h: &StepLog| h.l_all).collect();
    assert_eq!(l.len(), 50);
    // means over consecutive windows of 10 steps
    let smooth: Vec<f64> = l
        .chunks(10)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    assert!(smooth.windows(2).all(|w| w[1] < w[0]), "{smooth:?}");
}

#[test]
fn joint_steps_log_both_branches() {
    let dir = tempfile::tempdir().unwrap();
    let fr = fr_set(&dir.path().join("fr"), 32);
    let nr = nr_set(&dir.path().join("nr"), 32);
    let out = train_joint(&config(Mode::Uni, 4), &fr, &nr).unwrap();
    for h in &out.history {
        let (a, b) = (h.l_fr.unwrap(), h.l_nr.unwrap());
        assert_eq!(h.l_all.to_bits(), (a + b).to_bits());
        assert!(h.min_weight >= 0.0);
    }
}

#[test]
fn trainers_reject_the_wrong_mode() {
    let dir = tempfile::tempdir().unwrap();
    let nr = nr_set(dir.path(), 32);
    assert!(train_nr(&config(Mode::Fr, 1), &nr).is_err());
}
