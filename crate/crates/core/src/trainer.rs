//! Training loop: two augmented views, shared encoder, mutual attention,
//! weighted targets, hashing, weighted cross-entropy, Adam.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{augment_image, patch_batch, AugmentConfig, DataConfig, Dataset, Image, SynthImage};
use crate::encoder::{Binarizer, Encoder, EncoderConfig};
use crate::error::{Result, WchError};
use crate::io::{load_tensor, read_tensor, save_tensor, write_tensor};
use crate::losses::{total_loss, LossReport};
use crate::mutual_attention::{ma_ablation_mean, mutual_attend};
use crate::optim::{adam_update, AdamState, LrSchedule};
use crate::params::ParamStore;
use crate::retrieval::{evaluate_codes, CodeSet, Metrics};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::{Real, Tensor};
use crate::weighted_labels::{
    aggregate, detach_targets, normalize, patch_cross_similarity, prepare_features, LabelStage, WeightMatrix,
};

const AUG_SALT: u64 = 0xa0;
const SHUFFLE_SALT: u64 = 0x5f;

fn default_true() -> bool {
    true
}

fn default_eval_k() -> Vec<usize> {
    vec![1, 10, 100]
}

/// Full training configuration; also the JSON accepted by the `train` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: Real,
    pub lr_schedule: LrSchedule,
    pub tau: Real,
    pub tau_w: Real,
    pub lambda_q: Real,
    pub lambda_b: Real,
    pub seed: u64,
    /// Replace mutual attention with per-view patch means.
    #[serde(default)]
    pub ma_mean: bool,
    /// Replace the weighted targets with the identity matrix.
    #[serde(default)]
    pub hard_labels: bool,
    /// Use the raw max-mean matrix as targets, skipping softmax and scaling.
    #[serde(default)]
    pub no_scale: bool,
    /// Drop the quantization and bit-balance terms.
    #[serde(default)]
    pub no_reg: bool,
    /// Stop gradients through the targets.
    #[serde(default = "default_true")]
    pub detach_targets: bool,
    /// Compute mutual-attention similarities on unit-length features.
    #[serde(default)]
    pub ma_unit_normalize: bool,
    /// Compute target patch similarities on unit-length features.
    #[serde(default = "default_true")]
    pub label_unit_normalize: bool,
    /// Subtract the batch mean patch feature before target similarities.
    #[serde(default = "default_true")]
    pub label_center: bool,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Cutoffs for `map_at_k` and `p_at_k`.
    #[serde(default = "default_eval_k")]
    pub eval_k: Vec<usize>,
    /// Number of most recent epoch checkpoints kept on disk; 0 keeps all.
    #[serde(default)]
    pub keep_checkpoints: usize,
    pub encoder: EncoderConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 50,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            tau: 0.5,
            tau_w: 0.2,
            lambda_q: 0.1,
            lambda_b: 0.1,
            seed: 0,
            ma_mean: false,
            hard_labels: false,
            no_scale: false,
            no_reg: false,
            detach_targets: true,
            ma_unit_normalize: false,
            label_unit_normalize: true,
            label_center: true,
            augment: AugmentConfig::default(),
            eval_k: default_eval_k(),
            keep_checkpoints: 0,
            encoder: EncoderConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Use `seed` for training, encoder initialisation and data generation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.encoder.seed = seed;
        self.data.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(WchError::Config(msg));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            ));
        }
        for (name, v) in [("tau", self.tau), ("tau_w", self.tau_w)] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("lambda_q", self.lambda_q), ("lambda_b", self.lambda_b)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        let a = &self.augment;
        if !(0.0 < a.min_scale && a.min_scale <= a.max_scale && a.max_scale <= 1.0) {
            return bad(format!(
                "augment scale range [{}, {}] must lie in (0, 1]",
                a.min_scale, a.max_scale
            ));
        }
        if !(0.0..=1.0).contains(&a.flip_prob) || !(a.noise_std >= 0.0) {
            return bad("augment flip_prob must be in [0, 1] and noise_std >= 0".into());
        }
        self.encoder.validate()?;
        self.data.validate()?;
        if self.encoder.n_patches != self.data.n_patches() || self.encoder.patch_dim != self.data.patch_dim() {
            return bad(format!(
                "encoder expects {} patches of dim {}, data yields {} of dim {}",
                self.encoder.n_patches,
                self.encoder.patch_dim,
                self.data.n_patches(),
                self.data.patch_dim()
            ));
        }
        Ok(())
    }
}

/// Loss record of one optimisation step; one line of `losses.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub wce: Real,
    pub quant: Real,
    pub balance: Real,
    pub total: Real,
}

impl StepLog {
    fn new(step: u64, r: &LossReport) -> Self {
        StepLog {
            step,
            wce: r.wce,
            quant: r.quantization,
            balance: r.bit_balance,
            total: r.total,
        }
    }
}

/// Loss, targets and per-parameter gradients of one step; `None` marks
/// parameters excluded from training.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub report: LossReport,
    pub weights: Tensor,
    pub grads: Vec<Option<Tensor>>,
}

/// Result of one optimisation step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub report: LossReport,
    /// Targets used by the loss, `bs × bs`.
    pub weights: Tensor,
}

/// Encoder parameters with optimiser state and step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    encoder: Encoder,
    adam: AdamState,
    step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(config.encoder.clone())?;
        let adam = AdamState::new(encoder.params().tensors());
        Ok(Trainer {
            config,
            encoder,
            adam,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Two augmented views of every image as patch tensors. Seeds depend on
    /// the step and the position in the batch only.
    fn views(&self, batch: &[&Image]) -> Result<(Tensor, Tensor)> {
        let p = self.config.data.patch_size;
        let aug = |view: u64| -> Vec<Image> {
            batch
                .iter()
                .enumerate()
                .map(|(i, img)| {
                    let seed = derive_seed(self.config.seed, &[AUG_SALT, self.step, i as u64, view]);
                    augment_image(img, seed, &self.config.augment)
                })
                .collect()
        };
        Ok((patch_batch(&aug(0), p)?, patch_batch(&aug(1), p)?))
    }

    /// One update on a batch of unlabeled images at learning rate `lr`.
    pub fn train_step(&mut self, batch: &[&Image], lr: Real) -> Result<StepOutput> {
        let StepGradients { report, weights, grads } = self.gradients(batch)?;
        adam_update(self.encoder.params_mut().tensors_mut(), &grads, &mut self.adam, lr).map_err(|e| match e {
            WchError::Numeric(m) => WchError::Numeric(format!("step {}: {m}", self.step)),
            other => other,
        })?;
        self.step += 1;
        Ok(StepOutput { report, weights })
    }

    /// Loss and parameter gradients of the current step on `batch`, without
    /// updating anything.
    pub fn gradients(&self, batch: &[&Image]) -> Result<StepGradients> {
        let bs = batch.len();
        if bs < 2 {
            return Err(WchError::Config(format!(
                "batch of {bs} images; contrastive training needs >= 2"
            )));
        }
        let (x1, x2) = self.views(batch)?;
        let c = &self.config;
        let tape = Tape::new();
        let bound = self.encoder.bind(&tape, true);
        let f1 = bound.encode(tape.constant(x1))?;
        let f2 = bound.encode(tape.constant(x2))?;
        let refined = if c.ma_mean {
            ma_ablation_mean(f1, f2)?
        } else {
            mutual_attend(f1, f2, c.ma_unit_normalize)?
        };
        let (r1, r2) = (refined.refined_view1, refined.refined_view2);
        let mut targets = if c.hard_labels {
            WeightMatrix {
                w: tape.constant(Tensor::eye(bs)),
                tau_w: None,
                stage: LabelStage::Scaled,
            }
        } else {
            let (g1, g2) = prepare_features(r1, r2, c.label_center, c.label_unit_normalize)?;
            let raw = aggregate(patch_cross_similarity(g1, g2)?)?;
            if c.no_scale {
                raw
            } else {
                normalize(raw, c.tau_w)?
            }
        };
        if c.detach_targets {
            targets = detach_targets(targets);
        }
        let h1 = bound.hash(r1, Binarizer::default())?;
        let h2 = bound.hash(r2, Binarizer::default())?;
        let (lq, lb) = if c.no_reg { (0.0, 0.0) } else { (c.lambda_q, c.lambda_b) };
        let terms = total_loss(
            [(h1.codes, h1.pre_codes), (h2.codes, h2.pre_codes)],
            &targets,
            c.tau,
            lq,
            lb,
        )?;
        let report = terms.report();
        if ![report.total, report.wce, report.quantization, report.bit_balance]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(WchError::Numeric(format!(
                "non-finite loss at step {}: total {}, wce {}, quantization {}, bit_balance {}",
                self.step, report.total, report.wce, report.quantization, report.bit_balance
            )));
        }
        let grads = tape.backward(terms.total)?;
        let grads = bound
            .vars()
            .iter()
            .map(|&v| v.requires_grad().then(|| grads.wrt(v)))
            .collect();
        Ok(StepGradients {
            report,
            weights: (*targets.w.value()).clone(),
            grads,
        })
    }

    /// Codes for a split, `N × l`.
    pub fn encode_images(&self, items: &[SynthImage]) -> Result<CodeSet> {
        encode_images(&self.encoder, items, self.config.data.patch_size)
    }

    /// Query split against the train split as database.
    pub fn evaluate(&self, dataset: &Dataset) -> Result<Metrics> {
        evaluate_split(&self.encoder, dataset, &self.config.eval_k)
    }

    /// Recompute the inference normalization statistics on unaugmented `items`.
    pub fn calibrate(&mut self, items: &[SynthImage]) -> Result<()> {
        let patches = patch_batch(items.iter().map(|s| &s.image), self.config.data.patch_size)?;
        self.encoder.calibrate(&patches)
    }

    /// Write parameters, optimiser state and a manifest to `dir`.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>, epoch: usize) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.encoder.params().len());
        for (name, t) in self.encoder.params().iter() {
            let file = format!("{name}.wtns");
            save_tensor(dir.join(&file), t)?;
            files.push(ParamFile {
                name: name.to_string(),
                file,
            });
        }
        let mut w = BufWriter::new(File::create(dir.join("adam.wtns"))?);
        for t in self.adam.m.iter().chain(&self.adam.v) {
            write_tensor(&mut w, t)?;
        }
        w.flush()?;
        let manifest = Manifest {
            epoch,
            step: self.step,
            adam_step: self.adam.step,
            params: files,
            encoder: self.encoder.config().clone(),
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(())
    }

    /// Restore a trainer from a checkpoint written by [`Trainer::save_checkpoint`].
    /// Returns the trainer and the epoch the checkpoint closed.
    pub fn from_checkpoint(config: TrainConfig, dir: impl AsRef<Path>) -> Result<(Self, usize)> {
        let dir = dir.as_ref();
        let mut trainer = Trainer::new(config)?;
        let (manifest, params) = load_checkpoint_params(dir)?;
        if manifest.encoder != trainer.config.encoder {
            return Err(WchError::Config(
                "checkpoint encoder config differs from the training config".into(),
            ));
        }
        trainer.encoder = Encoder::with_params(manifest.encoder.clone(), &params)?;
        let n = params.len();
        let mut r = BufReader::new(File::open(dir.join("adam.wtns"))?);
        let moments: Vec<Tensor> = (0..2 * n).map(|_| read_tensor(&mut r)).collect::<Result<_>>()?;
        let (m, v) = moments.split_at(n);
        trainer.adam = AdamState {
            step: manifest.adam_step,
            m: m.to_vec(),
            v: v.to_vec(),
        };
        trainer.step = manifest.step;
        Ok((trainer, manifest.epoch))
    }
}

/// One parameter tensor of a checkpoint, stored as `file` inside the directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamFile {
    name: String,
    file: String,
}

/// `manifest.json` of a checkpoint directory; `params` is in parameter order
/// and `adam.wtns` holds every first moment followed by every second moment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    epoch: usize,
    step: u64,
    adam_step: u64,
    params: Vec<ParamFile>,
    encoder: EncoderConfig,
}

fn load_checkpoint_params(dir: &Path) -> Result<(Manifest, ParamStore)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut params = ParamStore::new();
    for p in &manifest.params {
        if p.file.contains(['/', '\\']) || p.file.starts_with('.') {
            return Err(WchError::Format(format!(
                "parameter file {:?} escapes the checkpoint directory",
                p.file
            )));
        }
        params.push(p.name.clone(), load_tensor(dir.join(&p.file))?);
    }
    Ok((manifest, params))
}

/// Encoder restored from a checkpoint directory.
pub fn load_encoder(dir: impl AsRef<Path>) -> Result<Encoder> {
    let (manifest, params) = load_checkpoint_params(dir.as_ref())?;
    Encoder::with_params(manifest.encoder, &params)
}

/// Codes of `items` under `encoder`, ids `0..N`.
pub fn encode_images(encoder: &Encoder, items: &[SynthImage], patch_size: usize) -> Result<CodeSet> {
    if items.is_empty() {
        return CodeSet::pack(&Tensor::zeros(&[0, encoder.config().code_length]));
    }
    let patches = patch_batch(items.iter().map(|s| &s.image), patch_size)?;
    CodeSet::pack(&encoder.codes(&patches)?)
}

/// Query split against the train split as database.
pub fn evaluate_split(encoder: &Encoder, dataset: &Dataset, ks: &[usize]) -> Result<Metrics> {
    let p = dataset.config.patch_size;
    let queries = encode_images(encoder, &dataset.query, p)?;
    let database = encode_images(encoder, &dataset.train, p)?;
    let ql: Vec<_> = dataset.query.iter().map(|s| s.labels.clone()).collect();
    let dl: Vec<_> = dataset.train.iter().map(|s| s.labels.clone()).collect();
    evaluate_codes(&queries, &ql, &database, &dl, ks)
}

/// Artifacts of a finished run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub losses: Vec<StepLog>,
    /// `(epoch, metrics)` after each epoch.
    pub snapshots: Vec<(usize, Metrics)>,
    pub final_checkpoint: PathBuf,
    pub final_metrics: Metrics,
}

/// Mini-batches of one epoch as indices; a trailing singleton joins the previous batch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[SHUFFLE_SALT, epoch as u64]));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap_or_default();
        if let Some(prev) = batches.last_mut() {
            prev.extend(tail);
        }
    }
    batches
}

fn checkpoint_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch-{epoch}"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Train on `dataset.train` and write the run directory `out`:
/// `config.json`, `losses.jsonl`, `checkpoints/epoch-e/` and `eval.json`.
pub fn fit(config: &TrainConfig, dataset: &Dataset, out: impl AsRef<Path>) -> Result<RunRecord> {
    run(config, dataset, out.as_ref(), None)
}

/// Continue a run from `checkpoints/epoch-e` inside `out`, producing the same
/// artifacts as an uninterrupted [`fit`].
pub fn resume(config: &TrainConfig, dataset: &Dataset, out: impl AsRef<Path>, epoch: usize) -> Result<RunRecord> {
    run(config, dataset, out.as_ref(), Some(epoch))
}

fn run(config: &TrainConfig, dataset: &Dataset, out: &Path, resume_epoch: Option<usize>) -> Result<RunRecord> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(WchError::Config("training split is empty".into()));
    }
    if dataset.config.n_patches() != config.encoder.n_patches || dataset.config.patch_dim() != config.encoder.patch_dim
    {
        return Err(WchError::Config(
            "dataset geometry does not match the encoder config".into(),
        ));
    }
    if dataset.train.len() < 2 {
        return Err(WchError::Config("training split needs at least 2 images".into()));
    }
    fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), config)?;
    let losses_path = out.join("losses.jsonl");

    let (mut trainer, start_epoch, mut losses) = match resume_epoch {
        None => {
            File::create(&losses_path)?;
            (Trainer::new(config.clone())?, 0, Vec::new())
        }
        Some(e) => {
            let (trainer, closed) = Trainer::from_checkpoint(config.clone(), checkpoint_dir(out, e))?;
            let kept: Vec<StepLog> = read_losses(&losses_path)?
                .into_iter()
                .filter(|l| l.step < trainer.step)
                .collect();
            let mut w = BufWriter::new(File::create(&losses_path)?);
            for l in &kept {
                writeln!(w, "{}", serde_json::to_string(l)?)?;
            }
            w.flush()?;
            (trainer, closed + 1, kept)
        }
    };

    let n = dataset.train.len();
    let per_epoch = epoch_batches(n, config.batch_size, config.seed, 0).len();
    let total_steps = per_epoch * config.epochs;
    let mut snapshots = Vec::new();
    let mut log = BufWriter::new(OpenOptions::new().append(true).open(&losses_path)?);
    let mut last_ckpt = checkpoint_dir(out, start_epoch.saturating_sub(1));
    for epoch in start_epoch..config.epochs {
        for batch in epoch_batches(n, config.batch_size, config.seed, epoch) {
            let images: Vec<&Image> = batch.iter().map(|&i| &dataset.train[i].image).collect();
            let lr = config
                .lr_schedule
                .rate(config.learning_rate, trainer.step as usize, total_steps);
            let step = trainer.step;
            let outcome = trainer.train_step(&images, lr)?;
            let entry = StepLog::new(step, &outcome.report);
            writeln!(log, "{}", serde_json::to_string(&entry)?)?;
            losses.push(entry);
        }
        log.flush()?;
        trainer.calibrate(&dataset.train)?;
        last_ckpt = checkpoint_dir(out, epoch);
        trainer.save_checkpoint(&last_ckpt, epoch)?;
        let metrics = trainer.evaluate(dataset)?;
        write_json(&last_ckpt.join("eval.json"), &metrics)?;
        snapshots.push((epoch, metrics));
        if config.keep_checkpoints > 0 && epoch >= config.keep_checkpoints {
            let stale = checkpoint_dir(out, epoch - config.keep_checkpoints);
            if stale.exists() {
                fs::remove_dir_all(stale)?;
            }
        }
    }
    let final_metrics = match snapshots.last() {
        Some((_, m)) => m.clone(),
        None => trainer.evaluate(dataset)?,
    };
    write_json(&out.join("eval.json"), &final_metrics)?;
    Ok(RunRecord {
        config: config.clone(),
        losses,
        snapshots,
        final_checkpoint: last_ckpt,
        final_metrics,
    })
}

/// Parse a `losses.jsonl` file.
pub fn read_losses(path: impl AsRef<Path>) -> Result<Vec<StepLog>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 1,
            encoder: EncoderConfig {
                n_patches: 4,
                patch_dim: 192,
                model_dim: 16,
                n_layers: 1,
                n_heads: 2,
                code_length: 8,
                seed: 1,
                freeze_position: false,
                hash_norm: true,
            },
            data: DataConfig {
                seed: 1,
                train_count: 10,
                query_count: 4,
                classes: 3,
                image_size: 16,
                patch_size: 8,
                channels: 3,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_batch_of_one() {
        let cfg = TrainConfig {
            batch_size: 1,
            ..tiny()
        };
        assert!(matches!(cfg.validate(), Err(WchError::Config(_))));
        let mut t = Trainer::new(tiny()).unwrap();
        let ds = Dataset::synthesize(&tiny().data).unwrap();
        assert!(matches!(
            t.train_step(&[&ds.train[0].image], 0.1),
            Err(WchError::Config(_))
        ));
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut t = Trainer::new(tiny()).unwrap();
        let ds = Dataset::synthesize(&tiny().data).unwrap();
        let before = t.encoder().params().clone();
        let imgs: Vec<&Image> = ds.train.iter().take(4).map(|s| &s.image).collect();
        let out = t.train_step(&imgs, 0.0).unwrap();
        let enc = t.encoder();
        for (i, (now, then)) in enc.params().tensors().iter().zip(before.tensors()).enumerate() {
            if enc.is_trainable(i) {
                assert_eq!(now, then, "{}", enc.params().names()[i]);
            }
        }
        assert!(out.report.total.is_finite());
        assert_eq!(t.step(), 1);
    }

    #[test]
    fn batches_cover_every_index_once() {
        let b = epoch_batches(10, 4, 3, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let merged = epoch_batches(9, 4, 3, 0);
        assert_eq!(merged.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        assert_ne!(epoch_batches(10, 4, 3, 0), epoch_batches(10, 4, 3, 1));
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_fields() {
        let cfg = tiny();
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), cfg);
        let mut v: serde_json::Value = serde_json::from_str(&s).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<TrainConfig>(v).is_err());
    }

    #[test]
    fn hard_labels_use_identity_targets() {
        let cfg = TrainConfig {
            hard_labels: true,
            ..tiny()
        };
        let mut t = Trainer::new(cfg).unwrap();
        let ds = Dataset::synthesize(&tiny().data).unwrap();
        let imgs: Vec<&Image> = ds.train.iter().take(4).map(|s| &s.image).collect();
        assert_eq!(t.train_step(&imgs, 1e-3).unwrap().weights, Tensor::eye(4));
    }

    #[test]
    fn scaled_targets_have_unit_diagonal() {
        let mut t = Trainer::new(tiny()).unwrap();
        let ds = Dataset::synthesize(&tiny().data).unwrap();
        let imgs: Vec<&Image> = ds.train.iter().take(4).map(|s| &s.image).collect();
        let w = t.train_step(&imgs, 1e-3).unwrap().weights;
        for i in 0..4 {
            assert_eq!(w.get(&[i, i]), 1.0);
        }
    }
}
