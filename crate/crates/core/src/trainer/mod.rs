//! Multi-task pre-training: patient-grouped batches, two-view forward passes,
//! the conditional loss sum, Adam updates, checkpoints and resume.
//!
//! Every random draw derives from `(seed, epoch)` for the batch plan and from
//! `(seed, epoch, step)` for augmentation, so a run resumed at an epoch
//! boundary replays exactly what an uninterrupted run would have done.

mod adam;
mod sampling;

pub use adam::{Adam, AdamConfig};
pub use sampling::{plan_epoch, sample_batch, Batch};

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::AugmentationPolicy;
use crate::data::{PatientSeries, NUM_TIME_POINTS};
use crate::error::{Error, Result};
use crate::evaluation::{extract_features, roc_auc, Fusion, LogisticProbe, ProbeConfig, Subset};
use crate::losses::{
    alignment_loss, combine_terms, reconstruction_loss, temporal_triplet_loss, LossBundle, LossCounts, LossSwitches,
    LossWeights, MarginSchedule, Outcome,
};
use crate::model::{checkpoint, TrajectoryNet};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Images per batch; must be a multiple of the number of time points.
    pub batch_images: usize,
    pub epochs: usize,
    pub margin_step: f64,
    pub temporal: bool,
    pub align: bool,
    pub align_all_labels: bool,
    pub weights: LossWeights,
    pub seed: u64,
    pub adam: AdamConfig,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    /// Validation probe cadence in epochs; 0 disables it.
    pub val_probe_every: usize,
    /// Keep `epoch-NNNN.safetensors` files besides `last.safetensors`.
    pub keep_epoch_checkpoints: bool,
    pub min_responders_per_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_images: 32,
            epochs: 100,
            margin_step: 0.25,
            temporal: true,
            align: true,
            align_all_labels: false,
            weights: LossWeights::default(),
            seed: 0,
            adam: AdamConfig::default(),
            weight_decay: 0.0,
            grad_clip: None,
            val_probe_every: 10,
            keep_epoch_checkpoints: false,
            min_responders_per_batch: 2,
        }
    }
}

impl TrainConfig {
    pub fn switches(&self) -> LossSwitches {
        LossSwitches {
            temporal: self.temporal,
            align: self.align,
            align_all_labels: self.align_all_labels,
        }
    }

    pub fn patients_per_batch(&self) -> usize {
        self.batch_images / NUM_TIME_POINTS
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_images == 0 || self.batch_images % NUM_TIME_POINTS != 0 {
            return Err(Error::Config(format!(
                "batch_images {} must be a positive multiple of {NUM_TIME_POINTS}",
                self.batch_images
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.weight_decay < 0.0 || self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("weight_decay must be >= 0 and grad_clip > 0".into()));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam parameters {a:?}")));
        }
        MarginSchedule::new(NUM_TIME_POINTS, self.margin_step)?;
        Ok(())
    }
}

/// Progress persisted with each checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub best_val_auroc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub finished: bool,
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub rec: f64,
    pub temp: f64,
    pub align: f64,
    pub total: f64,
    pub triplet_count: usize,
    pub pair_count: usize,
    pub reconstruction_count: usize,
    /// False when the degenerate-batch guard skipped the update.
    pub updated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_rec: f64,
    pub mean_temp: f64,
    pub mean_align: f64,
    pub mean_total: f64,
    pub val_auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitSummary {
    pub records: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    pub final_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub state: TrainState,
}

const PLAN_STREAM: u64 = 0x706c_616e;
const AUG_STREAM: u64 = 0x6175_6720;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for one `(stream, a, b)` coordinate of a seeded run.
pub fn derived_rng(seed: u64, stream: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for x in [stream, a, b] {
        h = splitmix(h ^ x);
    }
    ChaCha8Rng::seed_from_u64(h)
}

pub struct Trainer {
    model: TrajectoryNet,
    config: TrainConfig,
    policy: AugmentationPolicy,
    optimizer: Adam,
    schedule: MarginSchedule,
    state: TrainState,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

impl Trainer {
    pub fn new(model: TrajectoryNet, config: TrainConfig, policy: AugmentationPolicy) -> Result<Self> {
        config.validate()?;
        policy.validate()?;
        let optimizer = Adam::new(model.named_parameters(), config.learning_rate, config.weight_decay, config.adam)?;
        let schedule = MarginSchedule::new(NUM_TIME_POINTS, config.margin_step)?;
        Ok(Self {
            model,
            config,
            policy,
            optimizer,
            schedule,
            state: TrainState::default(),
        })
    }

    pub fn model(&self) -> &TrajectoryNet {
        &self.model
    }

    pub fn into_model(self) -> TrajectoryNet {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    /// Forward pass and loss assembly without an update. Returns the
    /// differentiable total and the scalar bundle.
    pub fn compute_losses(&self, batch: &Batch) -> Result<(Tensor, LossBundle)> {
        let out = self.model.forward_views(&batch.view1, &batch.view2)?;
        let (rec, n_rec) = reconstruction_loss(&batch.clean, &out.reconstruction)?;
        let (temp, n_trip) = temporal_triplet_loss(&out.z1, &out.z2, &batch.keys, &self.schedule)?;
        let switches = self.config.switches();
        let (align, n_pairs) = alignment_loss(&out.z1, &batch.keys, switches.pairing())?;
        let total = combine_terms(&rec, &temp, &align, &switches, &self.config.weights)?;
        let bundle = LossBundle {
            rec: scalar(&rec)?,
            temp: scalar(&temp)?,
            align: scalar(&align)?,
            total: scalar(&total)?,
            counts: LossCounts {
                triplets: if switches.temporal { n_trip } else { 0 },
                pairs: if switches.align { n_pairs } else { 0 },
                reconstructions: n_rec,
            },
        };
        Ok((total, bundle))
    }

    /// One optimization step. A non-finite loss aborts with the batch
    /// composition; a batch with no loss terms at all is not applied.
    pub fn train_step(&mut self, batch: &Batch) -> Result<(LossBundle, bool)> {
        let (total, bundle) = self.compute_losses(batch)?;
        if ![bundle.rec, bundle.temp, bundle.align, bundle.total].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: self.state.global_step,
                detail: format!(
                    "rec={} temp={} align={} total={}; batch: {}",
                    bundle.rec,
                    bundle.temp,
                    bundle.align,
                    bundle.total,
                    batch.describe()
                ),
            });
        }
        let apply = !(bundle.total == 0.0 && bundle.counts.is_empty());
        if apply {
            let grads = total.backward()?;
            self.optimizer.step(&grads, self.config.grad_clip)?;
        }
        self.state.global_step += 1;
        Ok((bundle, apply))
    }

    fn train_labels(train: &[PatientSeries]) -> Vec<Outcome> {
        train.iter().map(|p| p.label).collect()
    }

    /// Runs one epoch (the next one according to the state), calling `on_step`
    /// after each update.
    pub fn run_epoch(&mut self, train: &[PatientSeries], mut on_step: impl FnMut(&StepRecord) -> Result<()>) -> Result<EpochSummary> {
        let epoch = self.state.epoch;
        let seed = self.config.seed;
        let plan = plan_epoch(
            &Self::train_labels(train),
            self.config.patients_per_batch(),
            self.config.min_responders_per_batch,
            &mut derived_rng(seed, PLAN_STREAM, epoch as u64, 0),
        )?;
        let device = self.model.device().clone();
        let mut sums = [0.0f64; 4];
        for (s, members) in plan.iter().enumerate() {
            let mut rng = derived_rng(seed, AUG_STREAM, epoch as u64, s as u64);
            let batch = sample_batch(train, members, &self.policy, &mut rng, &device)?;
            let (b, updated) = self.train_step(&batch)?;
            for (acc, v) in sums.iter_mut().zip([b.rec, b.temp, b.align, b.total]) {
                *acc += v;
            }
            on_step(&StepRecord {
                step: self.state.global_step,
                epoch,
                rec: b.rec,
                temp: b.temp,
                align: b.align,
                total: b.total,
                triplet_count: b.counts.triplets,
                pair_count: b.counts.pairs,
                reconstruction_count: b.counts.reconstructions,
                updated,
            })?;
        }
        self.state.epoch += 1;
        let n = plan.len().max(1) as f64;
        Ok(EpochSummary {
            epoch,
            steps: plan.len(),
            mean_rec: sums[0] / n,
            mean_temp: sums[1] / n,
            mean_align: sums[2] / n,
            mean_total: sums[3] / n,
            val_auroc: None,
        })
    }

    /// Validation AUROC of a single T0->T3 probe fitted on training features.
    /// `None` when either split lacks a class.
    pub fn validation_auroc(&self, train: &[PatientSeries], val: &[PatientSeries]) -> Result<Option<f64>> {
        let has_both = |c: &[PatientSeries]| {
            c.iter().any(|p| p.label.is_responder()) && c.iter().any(|p| !p.label.is_responder())
        };
        if !has_both(train) || !has_both(val) {
            return Ok(None);
        }
        let tr = extract_features(&self.model, train, Subset::T0T3, Fusion::Concat)?;
        let va = extract_features(&self.model, val, Subset::T0T3, Fusion::Concat)?;
        let probe = LogisticProbe::fit(&tr.features, &tr.labels, &ProbeConfig::default(), self.config.seed)?;
        Ok(Some(roc_auc(&probe.predict_proba(&va.features)?, &va.labels)?))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("train_config".into(), serde_json::to_string(&self.config)?);
        meta.insert("augmentation".into(), serde_json::to_string(&self.policy)?);
        meta.insert("train_state".into(), serde_json::to_string(&self.state)?);
        meta.insert("adam_step".into(), self.optimizer.step_count().to_string());
        checkpoint::save(path, &self.model, &self.optimizer.state_tensors(), meta)
    }

    /// Restores model, optimizer moments, configs and progress from a
    /// checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(path: &Path, device: &Device) -> Result<Self> {
        let ck = checkpoint::load(path, device)?;
        let model = ck.build_model(None, device)?;
        let get = |k: &str| {
            ck.metadata
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("{} lacks {k}; not a training checkpoint", path.display())))
        };
        let config: TrainConfig = serde_json::from_str(get("train_config")?)?;
        let policy: AugmentationPolicy = serde_json::from_str(get("augmentation")?)?;
        let state: TrainState = serde_json::from_str(get("train_state")?)?;
        let adam_step: u64 = get("adam_step")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad adam_step".into()))?;
        let mut trainer = Self::new(model, config, policy)?;
        trainer.optimizer.load_state(&ck.extra, adam_step)?;
        trainer.state = state;
        Ok(trainer)
    }

    /// Overrides the epoch budget, e.g. to extend a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    /// Trains until `config.epochs`, starting from the current state.
    ///
    /// With `out_dir`, appends to `train_log.jsonl`, writes `last.safetensors`
    /// after every epoch, `best.safetensors` on validation improvement and
    /// `final.safetensors` at the end. On resume, log rows beyond the restored
    /// step are dropped first.
    pub fn fit(&mut self, train: &[PatientSeries], val: &[PatientSeries], out_dir: Option<&Path>) -> Result<FitSummary> {
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::from(e).at(dir))?;
                let path = dir.join(LOG_FILE);
                truncate_log(&path, self.state.global_step)?;
                let f = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::from(e).at(&path))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        let mut records = Vec::new();
        let mut epochs = Vec::new();
        let mut best_checkpoint = out_dir.map(|d| d.join(BEST_CHECKPOINT)).filter(|p| p.is_file());
        while self.state.epoch < self.config.epochs {
            let mut summary = self.run_epoch(train, |r| {
                records.push(*r);
                if let Some(w) = log.as_mut() {
                    serde_json::to_writer(&mut *w, r)?;
                    w.write_all(b"\n")?;
                }
                Ok(())
            })?;
            if let Some(w) = log.as_mut() {
                w.flush()?;
            }
            let every = self.config.val_probe_every;
            if every > 0 && self.state.epoch % every == 0 && !val.is_empty() {
                summary.val_auroc = self.validation_auroc(train, val)?;
                if let Some(auc) = summary.val_auroc {
                    if self.state.best_val_auroc.is_none_or(|b| auc > b) {
                        self.state.best_val_auroc = Some(auc);
                        self.state.best_epoch = Some(self.state.epoch);
                        if let Some(dir) = out_dir {
                            let p = dir.join(BEST_CHECKPOINT);
                            self.save_checkpoint(&p)?;
                            best_checkpoint = Some(p);
                        }
                    }
                }
            }
            info!(
                "epoch {:>3}  rec {:.5}  temp {:.4}  align {:.4}  total {:.4}{}",
                summary.epoch + 1,
                summary.mean_rec,
                summary.mean_temp,
                summary.mean_align,
                summary.mean_total,
                summary.val_auroc.map(|a| format!("  val_auroc {a:.3}")).unwrap_or_default()
            );
            if let Some(dir) = out_dir {
                self.save_checkpoint(&dir.join(LAST_CHECKPOINT))?;
                if self.config.keep_epoch_checkpoints {
                    self.save_checkpoint(&dir.join(format!("epoch-{:04}.safetensors", self.state.epoch)))?;
                }
            }
            epochs.push(summary);
        }
        self.state.finished = true;
        let final_checkpoint = match out_dir {
            Some(dir) => {
                let p = dir.join(FINAL_CHECKPOINT);
                self.save_checkpoint(&p)?;
                self.save_checkpoint(&dir.join(LAST_CHECKPOINT))?;
                Some(p)
            }
            None => None,
        };
        Ok(FitSummary {
            records,
            epochs,
            final_checkpoint,
            best_checkpoint,
            state: self.state.clone(),
        })
    }
}

/// Keeps only log rows with `step <= keep_through`.
fn truncate_log(path: &Path, keep_through: u64) -> Result<()> {
    if !path.is_file() {
        return Ok(());
    }
    let rows = read_log(path)?;
    let kept: Vec<_> = rows.into_iter().filter(|r| r.step <= keep_through).collect();
    let mut out = Vec::new();
    for r in &kept {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    if keep_through == 0 && !kept.is_empty() {
        warn!("training log {} had step-0 rows", path.display());
    }
    fs::write(path, out).map_err(|e| Error::from(e).at(path))?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::from(e).at(path))?;
    let mut rows = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line)?);
        }
    }
    Ok(rows)
}
