//! Contrastive pre-training and in-domain finetuning.
//!
//! A training step runs `minibatches_per_step` optimizer updates, each on a
//! fresh minibatch of `batch_size` pairs scored against in-batch negatives.
//! Every `val_check_interval` steps a fixed validation pair set is scored
//! and fed to the plateau schedule.

mod loss;
mod optim;

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Partition};
use crate::encoder::{
    backward_encode, backward_project, encode, encode_with_cache, project, project_with_cache,
    Checkpoint, EncoderConfig, ModelState, Real,
};
use crate::error::{Error, Result};
use crate::mel::{MelFrameMatrix, MelFrontend};
use crate::sampler::{
    pair_rng, sample_batch, sample_pair, AnchorKind, ContrastivePair, SamplerConfig, SamplingPool,
    Strategy,
};
use crate::seeding;

pub use loss::{contrastive_loss, cross_entropy_rows, LossOutput};
pub use optim::{Adam, PlateauSchedule};

pub const CONFIG_FILE: &str = "config.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.json";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.json";
pub const STATE_FILE: &str = "train_state.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub minibatches_per_step: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    /// Steps without running-average improvement before the rate halves.
    pub lr_halve_window: usize,
    pub val_check_interval: usize,
    /// Validation checks in the running average.
    pub val_running_checks: usize,
    pub val_pairs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seeds parameter init and the validation pair set.
    pub seed: u64,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            minibatches_per_step: 4,
            batch_size: 32,
            lr_init: 1e-3,
            lr_halve_window: 250,
            val_check_interval: 10,
            val_running_checks: 10,
            val_pairs: 512,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings from the original protocol: 8,000 steps of 64 minibatches of
    /// 128 pairs, halving window 1,000 steps.
    pub fn paper_scale() -> Self {
        Self {
            total_steps: 8000,
            minibatches_per_step: 64,
            batch_size: 128,
            lr_halve_window: 1000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("minibatches_per_step", self.minibatches_per_step),
            ("batch_size", self.batch_size),
            ("lr_halve_window", self.lr_halve_window),
            ("val_check_interval", self.val_check_interval),
            ("val_running_checks", self.val_running_checks),
            ("val_pairs", self.val_pairs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.total_steps % self.val_check_interval != 0 {
            return Err(Error::Config(format!(
                "val_check_interval {} does not divide total_steps {}",
                self.val_check_interval, self.total_steps
            )));
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return Err(Error::Config(format!(
                "lr_init {} must be positive",
                self.lr_init
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return Err(Error::Config(
                "Adam betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        self.encoder.validate()
    }
}

/// Computes log-mels of both sides of each pair.
pub fn pair_mels(pairs: &[ContrastivePair]) -> Result<(Vec<MelFrameMatrix>, Vec<MelFrameMatrix>)> {
    let fe = MelFrontend::shared();
    let mut a = Vec::with_capacity(pairs.len());
    let mut p = Vec::with_capacity(pairs.len());
    for pair in pairs {
        a.push(fe.compute(pair.anchor.samples())?);
        p.push(fe.compute(pair.positive.samples())?);
    }
    Ok((a, p))
}

fn stack<T: Real>(rows: &[ndarray::Array1<T>]) -> Array2<T> {
    let d = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

/// Forward-only loss of one batch.
pub fn batch_loss<T: Real>(
    state: &ModelState<T>,
    anchors: &[MelFrameMatrix],
    positives: &[MelFrameMatrix],
) -> Result<f64> {
    let embed = |m: &MelFrameMatrix| encode(m, state).and_then(|e| project(e.view(), state));
    let y = anchors.iter().map(embed).collect::<Result<Vec<_>>>()?;
    let z = positives.iter().map(embed).collect::<Result<Vec<_>>>()?;
    let out = contrastive_loss(stack(&y).view(), stack(&z).view(), state.bilinear.view())?;
    Ok(out.loss.f64())
}

/// Loss of one batch and its gradient with respect to every parameter.
pub fn batch_loss_and_grads<T: Real>(
    state: &ModelState<T>,
    anchors: &[MelFrameMatrix],
    positives: &[MelFrameMatrix],
) -> Result<(f64, ModelState<T>)> {
    let forward = |m: &MelFrameMatrix| -> Result<_> {
        let (e, ec) = encode_with_cache(m, state)?;
        let (y, pc) = project_with_cache(e.view(), state)?;
        Ok((y, ec, pc))
    };
    let fa = anchors.iter().map(forward).collect::<Result<Vec<_>>>()?;
    let fp = positives.iter().map(forward).collect::<Result<Vec<_>>>()?;
    let y: Vec<_> = fa.iter().map(|f| f.0.clone()).collect();
    let z: Vec<_> = fp.iter().map(|f| f.0.clone()).collect();
    let out = contrastive_loss(stack(&y).view(), stack(&z).view(), state.bilinear.view())?;

    let mut grads = state.zeros_like();
    grads.bilinear += &out.grad_w;
    for (side, g) in [(&fa, &out.grad_anchors), (&fp, &out.grad_positives)] {
        for (i, (_, ec, pc)) in side.iter().enumerate() {
            let ge = backward_project(pc, g.row(i), state, &mut grads);
            backward_encode(ec, ge.view(), state, &mut grads);
        }
    }
    Ok((out.loss.f64(), grads))
}

/// How the fixed validation pair set is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSpec {
    pub sampler: SamplerConfig,
    pub pairs: usize,
    pub seed: u64,
    /// Run length the sampler schedule was planned for.
    pub planned_steps: usize,
}

/// Validation pairs with cached mels.
pub struct ValidationSet {
    pub spec: ValidationSpec,
    anchors: Vec<MelFrameMatrix>,
    positives: Vec<MelFrameMatrix>,
}

impl ValidationSet {
    /// Draws the pairs at step 0 of the run's strategy from the valid
    /// partition, on a seed stream separate from training.
    pub fn build(spec: ValidationSpec, corpus: &Corpus) -> Result<Self> {
        let pool = SamplingPool::new(corpus, Partition::Valid)?;
        let seed = seeding::derive_seed(spec.seed, &[seeding::label("validation")]);
        let pairs = (0..spec.pairs)
            .map(|slot| {
                let mut rng = pair_rng(seed, 0, 0, slot);
                sample_pair(&spec.sampler, &pool, 0, spec.planned_steps, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let (anchors, positives) = pair_mels(&pairs)?;
        Ok(Self {
            spec,
            anchors,
            positives,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Pair-weighted mean loss over consecutive chunks of `chunk` pairs.
    pub fn loss<T: Real>(&self, state: &ModelState<T>, chunk: usize) -> Result<f64> {
        let mut total = 0.0;
        for (a, p) in self.anchors.chunks(chunk).zip(self.positives.chunks(chunk)) {
            total += batch_loss(state, a, p)? * a.len() as f64;
        }
        Ok(total / self.len() as f64)
    }
}

/// One row of the loss curve; `step` counts completed steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Learning rate used during the step.
    pub lr: f64,
    pub artificial_anchors: usize,
    pub anchors: usize,
}

/// Mean train loss over the trailing `window` rows, for every row.
pub fn running_train_loss(curve: &[CurveRow], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..curve.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let s = &curve[lo..=i];
            s.iter().map(|r| r.train_loss).sum::<f64>() / s.len() as f64
        })
        .collect()
}

pub fn curve_csv(curve: &[CurveRow]) -> String {
    let mut out = String::from("step,train_loss,val_loss,lr\n");
    for r in curve {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", r.step, r.train_loss, val, r.lr);
    }
    out
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ModelState<f32>,
    pub adam: Adam<f32>,
    pub lr: f64,
    pub schedule: PlateauSchedule,
    /// Completed steps.
    pub step: usize,
    pub config: TrainConfig,
    pub sampler: SamplerConfig,
    pub validation: ValidationSpec,
    pub best_val: Option<(usize, f64)>,
    pub best_model: ModelState<f32>,
    pub curve: Vec<CurveRow>,
}

#[derive(Serialize, Deserialize)]
struct TrainStateFile {
    model: Checkpoint,
    adam_m: Checkpoint,
    adam_v: Checkpoint,
    adam_t: u64,
    lr: f64,
    schedule: PlateauSchedule,
    step: usize,
    config: TrainConfig,
    sampler: SamplerConfig,
    validation: ValidationSpec,
    best_val: Option<(usize, f64)>,
    best_model: Checkpoint,
    curve: Vec<CurveRow>,
}

impl TrainState {
    /// Fresh state: initialized model, zero moments, `lr_init`.
    pub fn new(config: &TrainConfig, sampler: &SamplerConfig) -> Result<Self> {
        config.validate()?;
        sampler.validate()?;
        let mut rng = seeding::stream(config.seed, &[seeding::label("init")]);
        let model = ModelState::<f32>::init(&config.encoder, &mut rng)?;
        Ok(Self::from_model(model, config, sampler))
    }

    /// Continues from bare weights with a fresh optimizer.
    pub fn from_model(
        model: ModelState<f32>,
        config: &TrainConfig,
        sampler: &SamplerConfig,
    ) -> Self {
        let adam = Adam::new(&model, config.beta1, config.beta2, config.eps);
        Self {
            best_model: model.clone(),
            model,
            adam,
            lr: config.lr_init,
            schedule: PlateauSchedule::new(config.lr_halve_window, config.val_running_checks),
            step: 0,
            config: config.clone(),
            sampler: sampler.clone(),
            validation: ValidationSpec {
                sampler: sampler.clone(),
                pairs: config.val_pairs,
                seed: config.seed,
                planned_steps: config.total_steps,
            },
            best_val: None,
            curve: Vec::new(),
        }
    }

    pub fn final_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_state(&self.model)
    }

    pub fn best_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_state(&self.best_model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let file = TrainStateFile {
            model: Checkpoint::from_state(&self.model),
            adam_m: Checkpoint::from_state(&self.adam.m),
            adam_v: Checkpoint::from_state(&self.adam.v),
            adam_t: self.adam.t,
            lr: self.lr,
            schedule: self.schedule.clone(),
            step: self.step,
            config: self.config.clone(),
            sampler: self.sampler.clone(),
            validation: self.validation.clone(),
            best_val: self.best_val,
            best_model: Checkpoint::from_state(&self.best_model),
            curve: self.curve.clone(),
        };
        Ok(serde_json::to_vec(&file)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let f: TrainStateFile = serde_json::from_slice(bytes)
            .map_err(|e| Error::Checkpoint(format!("unreadable training state: {e}")))?;
        Ok(Self {
            model: f.model.to_state()?,
            adam: Adam {
                beta1: f.config.beta1,
                beta2: f.config.beta2,
                eps: f.config.eps,
                t: f.adam_t,
                m: f.adam_m.to_state()?,
                v: f.adam_v.to_state()?,
            },
            lr: f.lr,
            schedule: f.schedule,
            step: f.step,
            config: f.config,
            sampler: f.sampler,
            validation: f.validation,
            best_val: f.best_val,
            best_model: f.best_model.to_state()?,
            curve: f.curve,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Runs `n_steps` more steps with `sampler`, whose schedule is planned
    /// for `planned_steps` in total.
    fn run(
        &mut self,
        n_steps: usize,
        sampler: &SamplerConfig,
        planned_steps: usize,
        pool: &SamplingPool<'_>,
        validation: &ValidationSet,
    ) -> Result<()> {
        let cfg = self.config.clone();
        for _ in 0..n_steps {
            let s = self.step;
            let at = |e: Error| Error::AtStep {
                step: s,
                source: Box::new(e),
            };
            let lr_used = self.lr;
            let mut loss_sum = 0.0;
            let mut artificial = 0;
            for mb in 0..cfg.minibatches_per_step {
                let pairs = sample_batch(sampler, pool, cfg.batch_size, s, mb, planned_steps)
                    .map_err(at)?;
                artificial += pairs
                    .iter()
                    .filter(|p| p.anchor_kind == AnchorKind::Artificial)
                    .count();
                let (a, p) = pair_mels(&pairs).map_err(at)?;
                let (loss, grads) = batch_loss_and_grads(&self.model, &a, &p).map_err(at)?;
                if !grads.is_finite() {
                    return Err(at(Error::NonFinite("gradients")));
                }
                self.adam.step(&mut self.model, &grads, self.lr);
                loss_sum += loss;
            }
            self.step += 1;
            let train_loss = loss_sum / cfg.minibatches_per_step as f64;
            let mut val_loss = None;
            if self.step % cfg.val_check_interval == 0 {
                let v = validation.loss(&self.model, cfg.batch_size).map_err(at)?;
                self.lr = self.schedule.update(self.step, v, self.lr);
                if self.best_val.is_none_or(|(_, b)| v < b) {
                    self.best_val = Some((self.step, v));
                    self.best_model = self.model.clone();
                }
                log::info!(
                    "step {}: train {train_loss:.4} val {v:.4} lr {lr_used}",
                    self.step
                );
                val_loss = Some(v);
            }
            self.curve.push(CurveRow {
                step: self.step,
                train_loss,
                val_loss,
                lr: lr_used,
                artificial_anchors: artificial,
                anchors: cfg.minibatches_per_step * cfg.batch_size,
            });
        }
        Ok(())
    }

    /// Writes config snapshot, loss curve, checkpoints and resumable state.
    pub fn write_run_dir(&self, dir: &Path, corpus: &Corpus) -> Result<RunFiles> {
        std::fs::create_dir_all(dir)?;
        let snapshot = serde_json::json!({
            "train": self.config,
            "sampler": self.sampler,
            "validation": self.validation,
            "corpus_manifest_hash": corpus.manifest_hash(),
            "corpus_fingerprint": corpus.fingerprint(),
        });
        std::fs::write(dir.join(CONFIG_FILE), serde_json::to_vec_pretty(&snapshot)?)?;
        std::fs::write(dir.join(LOSS_FILE), curve_csv(&self.curve))?;
        let best = self.best_checkpoint().save(&dir.join(BEST_CHECKPOINT))?;
        let last = self.final_checkpoint().save(&dir.join(FINAL_CHECKPOINT))?;
        self.save(&dir.join(STATE_FILE))?;
        Ok(RunFiles {
            best_checkpoint_hash: best,
            final_checkpoint_hash: last,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunFiles {
    pub best_checkpoint_hash: String,
    pub final_checkpoint_hash: String,
}

/// Pre-trains a fresh model for `config.total_steps` steps.
pub fn pretrain(
    config: &TrainConfig,
    sampler: &SamplerConfig,
    corpus: &Corpus,
) -> Result<TrainState> {
    let mut state = TrainState::new(config, sampler)?;
    let pool = SamplingPool::new(corpus, Partition::Train)?;
    let validation = ValidationSet::build(state.validation.clone(), corpus)?;
    log::info!(
        "pre-training {} for {} steps on {} tracks",
        sampler.strategy.name(),
        config.total_steps,
        pool.len()
    );
    state.run(
        config.total_steps,
        sampler,
        config.total_steps,
        &pool,
        &validation,
    )?;
    Ok(state)
}

/// Continues a run on real mixture/vocal pairs only, keeping the optimizer
/// moments, learning rate, schedule and validation set. `config` supplies
/// the number of additional steps and the batch shape.
pub fn finetune_in_domain(
    mut state: TrainState,
    config: &TrainConfig,
    corpus: &Corpus,
) -> Result<TrainState> {
    if config.encoder != state.model.config {
        return Err(Error::Config(format!(
            "finetune encoder config {:?} does not match checkpoint {:?}",
            config.encoder, state.model.config
        )));
    }
    if config.minibatches_per_step == 0 || config.batch_size == 0 || config.val_check_interval == 0
    {
        return Err(Error::Config(
            "finetune batch shape must be positive".into(),
        ));
    }
    let mut sampler = state.sampler.clone();
    sampler.strategy = Strategy::Mscol;
    state.config.minibatches_per_step = config.minibatches_per_step;
    state.config.batch_size = config.batch_size;
    state.config.val_check_interval = config.val_check_interval;
    let pool = SamplingPool::new(corpus, Partition::Train)?;
    let validation = ValidationSet::build(state.validation.clone(), corpus)?;
    let planned = state.step + config.total_steps;
    log::info!(
        "finetuning for {} steps from step {}",
        config.total_steps,
        state.step
    );
    state.run(config.total_steps, &sampler, planned, &pool, &validation)?;
    state.sampler = sampler;
    Ok(state)
}
