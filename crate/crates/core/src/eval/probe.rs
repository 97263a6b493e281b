//! Linear softmax probe on frozen excerpt embeddings.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::aggregate_predictions;
use crate::error::{Error, Result};

/// A labelled clip as seen by a probe: its excerpt embeddings and class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeClip<'a> {
    pub track_id: &'a str,
    pub excerpts: &'a [Vec<f64>],
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            max_epochs: 200,
            patience: 6,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Tracks the best validation score and stops after `patience` epochs
/// without strict improvement or at `max_epochs`. Scores compare
/// lexicographically on (primary, tiebreak).
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub max_epochs: usize,
    pub best: Option<(f64, f64)>,
    /// 1-based epoch of the best score.
    pub best_epoch: usize,
    pub epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, max_epochs: usize) -> Self {
        Self {
            patience,
            max_epochs,
            best: None,
            best_epoch: 0,
            epoch: 0,
        }
    }

    /// Records the score of the epoch just finished. `improved` tells the
    /// caller to keep the current parameters.
    pub fn observe(&mut self, score: f64) -> (bool, StopDecision) {
        self.observe_with_tiebreak(score, 0.0)
    }

    /// Like [`Self::observe`]; equal primary scores are separated by the
    /// larger `tiebreak`.
    pub fn observe_with_tiebreak(&mut self, score: f64, tiebreak: f64) -> (bool, StopDecision) {
        self.epoch += 1;
        let improved = self
            .best
            .is_none_or(|(b, t)| score > b || (score == b && tiebreak > t));
        if improved {
            self.best = Some((score, tiebreak));
            self.best_epoch = self.epoch;
        }
        let stop = self.epoch >= self.max_epochs || self.epoch - self.best_epoch >= self.patience;
        (
            improved,
            if stop {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub n_classes: usize,
    /// Row-major `n_classes × dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Input standardization fitted on the training excerpts.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
}

impl ProbeModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let z: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect();
        (0..self.n_classes)
            .map(|c| {
                self.bias[c]
                    + self.weights[c * d..(c + 1) * d]
                        .iter()
                        .zip(&z)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    /// Clip label from the aggregated excerpt probabilities.
    pub fn predict_clip(&self, excerpts: &[Vec<f64>]) -> Result<usize> {
        let probs: Vec<Vec<f64>> = excerpts.iter().map(|e| self.predict_proba(e)).collect();
        aggregate_predictions(&probs)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Clip-wise accuracy and mean excerpt cross-entropy of `probe` on `clips`.
pub fn clip_accuracy_and_loss(probe: &ProbeModel, clips: &[ProbeClip<'_>]) -> Result<(f64, f64)> {
    if clips.is_empty() {
        return Err(Error::InsufficientData("no clips to score".into()));
    }
    let mut correct = 0;
    let (mut loss, mut n) = (0.0, 0usize);
    for c in clips {
        let probs: Vec<Vec<f64>> = c.excerpts.iter().map(|e| probe.predict_proba(e)).collect();
        for p in &probs {
            loss -= p[c.label].max(1e-300).ln();
            n += 1;
        }
        if aggregate_predictions(&probs)? == c.label {
            correct += 1;
        }
    }
    Ok((correct as f64 / clips.len() as f64, loss / n.max(1) as f64))
}

/// Clip-wise accuracy of `probe` on `clips`.
pub fn clip_accuracy(probe: &ProbeModel, clips: &[ProbeClip<'_>]) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::InsufficientData("no clips to score".into()));
    }
    let mut correct = 0;
    for c in clips {
        if probe.predict_clip(c.excerpts)? == c.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / clips.len() as f64)
}

/// Trains a softmax classifier with Adam on the excerpts of `train`, picking
/// the epoch with the best clip-wise accuracy on `valid` (ties go to the
/// lower validation cross-entropy). With no validation clips the training
/// clips are monitored instead.
pub fn train_probe<R: Rng>(
    train: &[ProbeClip<'_>],
    valid: &[ProbeClip<'_>],
    n_classes: usize,
    config: &ProbeConfig,
    rng: &mut R,
) -> Result<ProbeModel> {
    let mut present: Vec<usize> = train.iter().map(|c| c.label).collect();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "probe needs at least 2 classes in its training split, found {}",
            present.len()
        )));
    }
    if let Some(&bad) = train
        .iter()
        .chain(valid)
        .map(|c| &c.label)
        .find(|&&l| l >= n_classes)
    {
        return Err(Error::Config(format!(
            "label {bad} outside {n_classes} classes"
        )));
    }
    let xs: Vec<(&[f64], usize)> = train
        .iter()
        .flat_map(|c| c.excerpts.iter().map(move |e| (e.as_slice(), c.label)))
        .collect();
    let d = xs.first().map(|x| x.0.len()).unwrap_or(0);
    if d == 0 || xs.iter().any(|x| x.0.len() != d) {
        return Err(Error::Config(
            "probe inputs must share a positive dimension".into(),
        ));
    }
    let n = xs.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|j| xs.iter().map(|x| x.0[j]).sum::<f64>() / n)
        .collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = xs.iter().map(|x| (x.0[j] - mean[j]).powi(2)).sum::<f64>() / n;
            1.0 / (var.sqrt() + 1e-8)
        })
        .collect();

    let mut model = ProbeModel {
        n_classes,
        weights: vec![0.0; n_classes * d],
        bias: vec![0.0; n_classes],
        mean,
        scale,
        epochs_run: 0,
        best_epoch: 0,
        best_valid_accuracy: 0.0,
    };
    let nparams = model.weights.len() + n_classes;
    let (mut m, mut v) = (vec![0.0; nparams], vec![0.0; nparams]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut t = 0i32;
    let monitor = if valid.is_empty() { train } else { valid };
    let mut stopper = EarlyStopping::new(config.patience, config.max_epochs);
    let mut best = model.clone();
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let batch = config.batch_size.max(1);
    let mut grad = vec![0.0; nparams];

    loop {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            grad.fill(0.0);
            for &i in chunk {
                let (x, y) = xs[i];
                let p = model.predict_proba(x);
                for c in 0..n_classes {
                    let g = (p[c] - if c == y { 1.0 } else { 0.0 }) / chunk.len() as f64;
                    for j in 0..d {
                        grad[c * d + j] += g * (x[j] - model.mean[j]) * model.scale[j];
                    }
                    grad[n_classes * d + c] += g;
                }
            }
            t += 1;
            let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            for k in 0..nparams {
                m[k] = b1 * m[k] + (1.0 - b1) * grad[k];
                v[k] = b2 * v[k] + (1.0 - b2) * grad[k] * grad[k];
                let step = config.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                if k < n_classes * d {
                    model.weights[k] -= step;
                } else {
                    model.bias[k - n_classes * d] -= step;
                }
            }
        }
        let (acc, loss) = clip_accuracy_and_loss(&model, monitor)?;
        let (improved, decision) = stopper.observe_with_tiebreak(acc, -loss);
        if improved {
            best = model.clone();
            best.best_valid_accuracy = acc;
            best.best_epoch = stopper.epoch;
        }
        if decision == StopDecision::Stop {
            break;
        }
    }
    best.epochs_run = stopper.epoch;
    if !best.is_finite() {
        return Err(Error::NonFinite("probe parameters"));
    }
    Ok(best)
}
