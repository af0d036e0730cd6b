//! Training loop: determinism, resume, step accounting, loss trend and the
//! gradient contract.

use std::fs;
use std::path::Path;

use wch_core::data::{AugmentConfig, DataConfig, Dataset, Image};
use wch_core::encoder::EncoderConfig;
use wch_core::optim::LrSchedule;
use wch_core::trainer::{epoch_batches, fit, read_losses, resume, TrainConfig, Trainer};

fn tiny(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 3,
        encoder: EncoderConfig {
            n_patches: 4,
            patch_dim: 192,
            model_dim: 16,
            n_layers: 1,
            n_heads: 2,
            code_length: 8,
            seed: 0,
            freeze_position: false,
            hash_norm: true,
        },
        data: DataConfig {
            seed: 0,
            train_count: 18,
            query_count: 6,
            classes: 3,
            image_size: 16,
            patch_size: 8,
            channels: 3,
        },
        eval_k: vec![1, 5],
        ..TrainConfig::default()
    }
    .with_seed(seed)
}

fn copy_dir(from: &Path, to: &Path) {
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            fs::create_dir_all(&target).unwrap();
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn identical_configs_give_bitwise_identical_runs() {
    let cfg = tiny(3);
    let data = Dataset::synthesize(&cfg.data).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    fit(&cfg, &data, a.path()).unwrap();
    fit(&cfg, &data, b.path()).unwrap();
    for f in ["losses.jsonl", "eval.json", "config.json"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let cfg = tiny(4);
    let data = Dataset::synthesize(&cfg.data).unwrap();
    let full = tempfile::tempdir().unwrap();
    fit(&cfg, &data, full.path()).unwrap();

    // replay from the first epoch's checkpoint in a copy of the directory
    let part = tempfile::tempdir().unwrap();
    copy_dir(full.path(), part.path());
    for e in [1, 2] {
        fs::remove_dir_all(part.path().join("checkpoints").join(format!("epoch-{e}"))).unwrap();
    }
    fs::remove_file(part.path().join("eval.json")).unwrap();
    let rec = resume(&cfg, &data, part.path(), 0).unwrap();
    assert_eq!(rec.losses, read_losses(full.path().join("losses.jsonl")).unwrap());

    for f in ["losses.jsonl", "eval.json"] {
        assert_eq!(read(&full.path().join(f)), read(&part.path().join(f)), "{f}");
    }
    let last = Path::new("checkpoints").join("epoch-2");
    for entry in fs::read_dir(full.path().join(&last)).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            read(&full.path().join(&last).join(&name)),
            read(&part.path().join(&last).join(&name)),
            "{name:?}"
        );
    }
}

#[test]
fn one_epoch_takes_ceil_n_over_bs_steps() {
    let cfg = TrainConfig { epochs: 1, ..tiny(5) };
    let data = Dataset::synthesize(&cfg.data).unwrap();
    let out = tempfile::tempdir().unwrap();
    let rec = fit(&cfg, &data, out.path()).unwrap();
    let n = data.train.len();
    assert_eq!(rec.losses.len(), n.div_ceil(cfg.batch_size));
    assert_eq!(read_losses(&out.path().join("losses.jsonl")).unwrap(), rec.losses);
    assert!(rec.losses.windows(2).all(|w| w[0].step < w[1].step));
    assert!(rec.final_checkpoint.join("manifest.json").exists());
}

/// Weighted targets are recomputed from the moving features, so the loss is only
/// a fixed objective under identity targets; the threshold comes from a pilot
/// that fell in 50 of 50 pairs for each seed at this learning rate.
#[test]
fn loss_falls_on_a_fixed_tiny_problem() {
    for seed in [6, 7, 8] {
        let cfg = TrainConfig {
            augment: AugmentConfig::identity(),
            lr_schedule: LrSchedule::Constant,
            hard_labels: true,
            learning_rate: 1e-4,
            ..tiny(seed)
        };
        let data = Dataset::synthesize(&cfg.data).unwrap();
        let batch: Vec<&Image> = data.train[..4].iter().map(|s| &s.image).collect();
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        let losses: Vec<f64> = (0..51)
            .map(|_| trainer.train_step(&batch, cfg.learning_rate).unwrap().report.total)
            .collect();
        let falls = losses.windows(2).filter(|w| w[1] < w[0]).count();
        println!("seed {seed}: loss fell in {falls} of 50 step pairs");
        assert!(falls >= 45, "seed {seed}: loss fell in {falls} of 50 step pairs");
    }
}

fn grads(cfg: &TrainConfig) -> Vec<(String, Option<wch_core::Tensor>)> {
    let data = Dataset::synthesize(&cfg.data).unwrap();
    let batch: Vec<&Image> = data.train[..6].iter().map(|s| &s.image).collect();
    let trainer = Trainer::new(cfg.clone()).unwrap();
    let g = trainer.gradients(&batch).unwrap().grads;
    trainer.encoder().params().names().iter().cloned().zip(g).collect()
}

#[test]
fn every_trainable_parameter_receives_a_finite_gradient() {
    // a key bias shifts all logits of a query equally and the hash bias is
    // removed by batch standardization, so both gradients vanish up to rounding
    let invariant = |name: &str| name.ends_with("attn.k.bias") || name == "hash.bias";
    for (name, g) in grads(&tiny(7)) {
        if name.starts_with("hash.norm") {
            assert!(g.is_none(), "{name} is a statistic, not a parameter");
            continue;
        }
        let g = g.unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(g.all_finite(), "{name}");
        let size = g.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if invariant(&name) {
            assert!(size < 1e-12, "{name}: {size}");
        } else {
            assert!(size > 1e-9, "{name}: {size}");
        }
    }
}

#[test]
fn gradient_flow_through_targets_changes_encoder_gradients() {
    let detached = grads(&tiny(8));
    let live = grads(&TrainConfig {
        detach_targets: false,
        ..tiny(8)
    });
    let differs = detached.iter().zip(&live).any(|((_, a), (_, b))| match (a, b) {
        (Some(a), Some(b)) => a.max_abs_diff(b) > 1e-12,
        _ => false,
    });
    assert!(differs);
}

#[test]
fn epoch_batches_depend_on_seed_and_epoch() {
    assert_eq!(epoch_batches(18, 4, 1, 0), epoch_batches(18, 4, 1, 0));
    assert_ne!(epoch_batches(18, 4, 1, 0), epoch_batches(18, 4, 1, 1));
    assert_ne!(epoch_batches(18, 4, 1, 0), epoch_batches(18, 4, 2, 0));
}
