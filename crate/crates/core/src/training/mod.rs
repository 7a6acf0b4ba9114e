//! Dual-objective training: image-conditioned caption loss, null-conditioned
//! caption loss, their weighted sum, and the Adam loop around it.
//!
//! Gradients are computed per example, each in its own graph, and summed in
//! example order. That keeps results identical for any worker count.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, MultimodalExample};
use crate::error::{Error, Result};
use crate::model::{CaptionerModel, Dropout};
use crate::numerics::{adam_step, AdamState, Grads, Graph, Var};
use crate::par::Parallelism;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    Cosine,
    Linear,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    /// Fraction of `steps` spent in linear warmup.
    pub warmup_frac: f64,
    pub peak_lr: f64,
    pub decay: Decay,
    /// Weight of the image-conditioned loss.
    pub beta: f64,
    /// Weight of the null-conditioned loss.
    pub gamma: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 means only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            steps: 1000,
            warmup_frac: 0.05,
            peak_lr: 3e-4,
            decay: Decay::Cosine,
            beta: 1.5,
            gamma: 0.5,
            clip_norm: 0.0,
            seed: 0,
            eval_every: 0,
        }
    }
}

/// Loss weights `(β, γ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub multimodal: f64,
    pub unimodal: f64,
}

impl LossWeights {
    pub fn new(multimodal: f64, unimodal: f64) -> Result<Self> {
        if !(multimodal.is_finite() && unimodal.is_finite()) || multimodal < 0.0 || unimodal < 0.0 {
            return Err(Error::contract(format!(
                "loss weights must be finite and >= 0, got beta={multimodal}, gamma={unimodal}"
            )));
        }
        if multimodal + unimodal <= 0.0 {
            return Err(Error::contract("at least one loss weight must be positive"));
        }
        Ok(LossWeights { multimodal, unimodal })
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(self.peak_lr > 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::contract("warmup_frac in [0,1], peak_lr > 0 and clip_norm >= 0 are required"));
        }
        LossWeights::new(self.beta, self.gamma).map(|_| ())
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.beta, self.gamma)
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.steps as f64).ceil() as usize
    }

    /// Learning rate for 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if step <= warm {
            return self.peak_lr * step as f64 / warm.max(1) as f64;
        }
        let span = (self.steps - warm).max(1) as f64;
        let progress = ((step - warm) as f64 / span).min(1.0);
        match self.decay {
            Decay::Constant => self.peak_lr,
            Decay::Linear => self.peak_lr * (1.0 - progress),
            Decay::Cosine => self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
        }
    }
}

fn check_batch(batch: &[&MultimodalExample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    Ok(())
}

/// Graph nodes of the three losses over one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub multimodal: Var,
    pub unimodal: Var,
    pub combined: Var,
}

/// `(1/B) Σ_i mean_n −log P(t_n | t_<n, I_i)` inside `g`.
pub fn multimodal_loss_in<'p>(
    g: &mut Graph<'p>,
    model: &'p CaptionerModel,
    batch: &[&MultimodalExample],
) -> Result<Var> {
    check_batch(batch)?;
    let mut terms = Vec::with_capacity(batch.len());
    for ex in batch {
        let mem = model.encode_image_in(g, &ex.image, None)?;
        terms.push(model.caption_nll_in(g, &ex.tokens, Some(mem), None)?);
    }
    Ok(batch_mean(g, &terms))
}

/// As [`multimodal_loss_in`] with null-image conditioning; images are never read.
pub fn unimodal_loss_in<'p>(
    g: &mut Graph<'p>,
    model: &'p CaptionerModel,
    batch: &[&MultimodalExample],
) -> Result<Var> {
    check_batch(batch)?;
    let mut terms = Vec::with_capacity(batch.len());
    for ex in batch {
        terms.push(model.caption_nll_in(g, &ex.tokens, None, None)?);
    }
    Ok(batch_mean(g, &terms))
}

fn batch_mean(g: &mut Graph<'_>, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// `β·multimodal + γ·unimodal` in a single graph.
pub fn combined_loss_in<'p>(
    g: &mut Graph<'p>,
    model: &'p CaptionerModel,
    batch: &[&MultimodalExample],
    weights: LossWeights,
) -> Result<LossVars> {
    let multimodal = multimodal_loss_in(g, model, batch)?;
    let unimodal = unimodal_loss_in(g, model, batch)?;
    let a = g.scale(multimodal, weights.multimodal);
    let b = g.scale(unimodal, weights.unimodal);
    let combined = g.add(a, b);
    Ok(LossVars {
        multimodal,
        unimodal,
        combined,
    })
}

pub fn multimodal_loss(model: &CaptionerModel, batch: &[&MultimodalExample]) -> Result<f64> {
    let mut g = Graph::new();
    let v = multimodal_loss_in(&mut g, model, batch)?;
    Ok(g.value(v).item())
}

pub fn unimodal_loss(model: &CaptionerModel, batch: &[&MultimodalExample]) -> Result<f64> {
    let mut g = Graph::new();
    let v = unimodal_loss_in(&mut g, model, batch)?;
    Ok(g.value(v).item())
}

pub fn combined_loss(model: &CaptionerModel, batch: &[&MultimodalExample], weights: LossWeights) -> Result<f64> {
    let mut g = Graph::new();
    let v = combined_loss_in(&mut g, model, batch, weights)?;
    Ok(g.value(v.combined).item())
}

/// Batch-mean losses of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub multimodal: f64,
    pub unimodal: f64,
    pub combined: f64,
}

/// Losses and parameter gradients of the combined objective over `batch`.
///
/// `dropout_seed` seeds per-example dropout masks; it is ignored when the
/// model's dropout rate is zero.
pub fn loss_and_grads(
    model: &CaptionerModel,
    batch: &[&MultimodalExample],
    weights: LossWeights,
    par: &Parallelism,
    dropout_seed: u64,
) -> Result<(LossParts, Grads)> {
    check_batch(batch)?;
    let rate = model.config().dropout;
    let per_example = par.try_map(batch.len(), |i| -> Result<(f64, f64, Grads)> {
        let ex = batch[i];
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut drop = Dropout { rate, rng: &mut rng };
        let mut g = Graph::new();
        let mem = model.encode_image_in(&mut g, &ex.image, Some(&mut drop))?;
        let mm = model.caption_nll_in(&mut g, &ex.tokens, Some(mem), Some(&mut drop))?;
        let um = model.caption_nll_in(&mut g, &ex.tokens, None, Some(&mut drop))?;
        let a = g.scale(mm, weights.multimodal);
        let b = g.scale(um, weights.unimodal);
        let total = g.add(a, b);
        let grads = g.backward(total)?.param_grads(&g, model.params());
        Ok((g.value(mm).item(), g.value(um).item(), grads))
    })?;

    let inv_b = 1.0 / batch.len() as f64;
    let mut grads = Grads::zeros_like(model.params());
    let (mut mm, mut um) = (0.0, 0.0);
    for (m, u, g) in &per_example {
        mm += m;
        um += u;
        grads.add_scaled(g, inv_b);
    }
    let (mm, um) = (mm * inv_b, um * inv_b);
    Ok((
        LossParts {
            multimodal: mm,
            unimodal: um,
            combined: weights.multimodal * mm + weights.unimodal * um,
        },
        grads,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub step: usize,
    pub l_multimodal: f64,
    pub l_unimodal: f64,
    pub combined: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

pub const TRAIN_LOG_HEADER: &str = "step,l_multi,l_uni,L,grad_norm,seconds";

impl TrainLogRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:.3}",
            self.step, self.l_multimodal, self.l_unimodal, self.combined, self.grad_norm, self.seconds
        )
    }
}

/// Seeded epoch shuffler; a batch may straddle two epochs.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        };
        s.reshuffle_if_done();
        s
    }

    fn reshuffle_if_done(&mut self) {
        if self.pos >= self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
    }

    fn next_batch(&mut self, b: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            self.reshuffle_if_done();
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Runs `config.steps` Adam steps on the combined loss.
///
/// `on_step` sees every log record together with the freshly updated model;
/// callers use it for progress output and periodic checkpoints.
pub fn train<F>(
    model: &mut CaptionerModel,
    data: &Dataset,
    config: &TrainConfig,
    par: &Parallelism,
    mut on_step: F,
) -> Result<Vec<TrainLogRecord>>
where
    F: FnMut(&TrainLogRecord, &CaptionerModel) -> Result<()>,
{
    config.validate()?;
    let weights = config.weights()?;
    if data.is_empty() {
        return Err(Error::contract("training dataset is empty"));
    }
    let mut sampler = BatchSampler::new(data.len(), config.seed);
    let mut adam = AdamState::new(model.params(), config.peak_lr);
    let mut log = Vec::with_capacity(config.steps);
    let start = Instant::now();

    for step in 1..=config.steps {
        let ids = sampler.next_batch(config.batch_size);
        let batch: Vec<&MultimodalExample> = ids.iter().map(|&i| &data.examples()[i]).collect();
        let dropout_seed = config.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ step as u64;
        let (loss, mut grads) = loss_and_grads(model, &batch, weights, par, dropout_seed).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("{msg} at step {step}; batch example ids {ids:?}")),
            other => other,
        })?;
        let grad_norm = grads.l2_norm();
        if !(loss.combined.is_finite() && grad_norm.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step} (multimodal {}, unimodal {}, grad norm {grad_norm}); batch example ids {ids:?}",
                loss.multimodal, loss.unimodal
            )));
        }
        if config.clip_norm > 0.0 && grad_norm > config.clip_norm {
            grads.scale(config.clip_norm / grad_norm);
        }
        adam.lr = config.lr_at(step);
        adam_step(model.params_mut(), &grads, &mut adam)?;

        let rec = TrainLogRecord {
            step,
            l_multimodal: loss.multimodal,
            l_unimodal: loss.unimodal,
            combined: loss.combined,
            grad_norm,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_step(&rec, model)?;
        log.push(rec);
    }
    Ok(log)
}

#[cfg(test)]
mod tests;
