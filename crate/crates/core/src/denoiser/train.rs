//! Denoising score-matching training for the set denoiser.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::nn::Params;
use super::set::SetDenoiser;
use crate::diffusion::{sample_training_noise, DiffusionConfig, Preconditioning};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{ParamId, Tape, Tensor, Var};

/// One clean joint state with its scene context.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    /// `[N_a, feature_dim]`, already scaled so the data std is about `sigma_data`.
    pub clean: Tensor,
    /// `[N_a, context_dim]`.
    pub context: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.03,
            warmup_steps: 200,
            total_steps: 10_000,
            clip_norm: 1.0,
        }
    }
}

/// Adam with decoupled weight decay and linear warmup then linear decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: OptimConfig,
    step: usize,
    m: HashMap<ParamId, Tensor>,
    v: HashMap<ParamId, Tensor>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let c = &self.cfg;
        let warm = if c.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / c.warmup_steps as f64).min(1.0)
        };
        let decay = if c.total_steps > c.warmup_steps && step >= c.warmup_steps {
            let span = (c.total_steps - c.warmup_steps) as f64;
            (1.0 - (step - c.warmup_steps) as f64 / span).max(0.0)
        } else {
            1.0
        };
        c.lr * warm * decay
    }

    pub fn update(&mut self, params: &mut Params, grads: &HashMap<ParamId, Tensor>) {
        let c = self.cfg.clone();
        let lr = self.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut ids: Vec<ParamId> = grads.keys().copied().collect();
        ids.sort();
        let norm = ids
            .iter()
            .map(|id| grads[id].data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        for id in ids {
            let g = &grads[&id];
            let m = self
                .m
                .entry(id)
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .v
                .entry(id)
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let p = params.get_mut(id);
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let gv = gv * clip;
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let upd = (*mv / bc1) / ((*vv / bc2).sqrt() + c.eps);
                *pv -= lr * (upd + c.weight_decay * *pv);
            }
        }
    }
}

/// Weighted denoising loss for a batch, built on `tape`.
///
/// Each example is replicated `copies` times with its own noise level. The
/// per-sample weight `1 / c_out^2` makes the loss equal the raw network's
/// error on the preconditioned target.
pub fn batch_loss<'t>(
    tape: &'t Tape,
    model: &SetDenoiser,
    batch: &[TrainExample],
    cfg: &DiffusionConfig,
    copies: usize,
    rng: &mut Rng,
) -> Result<Var<'t>> {
    if batch.is_empty() || copies == 0 {
        return Err(Error::InvalidArgument(
            "training batch must be nonempty".into(),
        ));
    }
    let mut total: Option<Var<'t>> = None;
    for ex in batch {
        let shape = ex.clean.shape();
        let (na, d) = (shape[0], shape[1]);
        let sigmas: Vec<f64> = (0..copies)
            .map(|_| sample_training_noise(rng, cfg))
            .collect();
        let mut noisy = Vec::with_capacity(copies * na * d);
        for &s in &sigmas {
            for &v in ex.clean.data() {
                noisy.push(v + s * rng::normal(rng));
            }
        }
        let weights: Vec<f64> = sigmas
            .iter()
            .map(|&s| {
                let c_out = Preconditioning::at(s, cfg.sigma_data).map(|p| p.c_out)?;
                Ok(1.0 / (c_out * c_out))
            })
            .collect::<Result<_>>()?;
        let net =
            crate::diffusion::wrap_denoiser(model.bind_context(ex.context.clone(), true), cfg);
        let x = tape.constant(Tensor::new([copies, na, d], noisy)?);
        let den = net.denoise_per_sample(tape, x, &sigmas)?;
        let target = tape.constant(ex.clean.reshape([1, na, d])?);
        let w = tape.constant(Tensor::new([copies, 1, 1], weights)?);
        let loss = den.sub(target)?.square().mul(w)?.mean();
        total = Some(match total {
            None => loss,
            Some(t) => t.add(loss)?,
        });
    }
    Ok(total
        .expect("nonempty batch")
        .scale(1.0 / batch.len() as f64))
}

/// One optimizer step; returns the batch loss before the update.
pub fn train_step(
    model: &mut SetDenoiser,
    batch: &[TrainExample],
    cfg: &DiffusionConfig,
    opt: &mut AdamW,
    copies: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let tape = Tape::new();
    let loss = batch_loss(&tape, model, batch, cfg, copies, rng)?;
    let value = loss.value().item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss {value} at step {}",
            opt.steps_taken()
        )));
    }
    let grads = tape.backward(loss)?.params();
    opt.update(model.params_mut(), &grads);
    Ok(value)
}
