//! Exact sample log-density via the instantaneous change of variables along
//! the probability-flow ODE.
//!
//! Integrating from `sigma_min` up to `sigma_max`,
//! `log p_0(x_0) = log p_T(x_T) + int div f dsigma`. The reported
//! `divergence_integral` is the reverse-time quantity
//! `int_T^0 Tr(df/dx) dt = -int div f dsigma`, so
//! `logp = prior_logp - divergence_integral`.

use serde::{Deserialize, Serialize};

use crate::diffusion::{flow_from_denoiser, step_schedule, Denoiser, DiffusionConfig};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor};

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Exact,
    Hutchinson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogProbResult {
    pub logp: f64,
    pub divergence_integral: f64,
    pub prior_logp: f64,
    pub estimator: Estimator,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probes: Option<usize>,
}

/// `f = -(D(x) - x) / sigma` for a batch (samples on axis 0).
pub fn flow(x: &Tensor, sigma: f64, den: &dyn Denoiser) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::domain(
            "flow",
            format!("sigma must be > 0, got {sigma}"),
        ));
    }
    flow_from_denoiser(&den.denoise(x, sigma)?, x, sigma)
}

fn per_sample(x: &Tensor) -> (usize, usize) {
    let m = x.shape()[0];
    (m, x.len() / m)
}

/// Stacks, for every sample, the unperturbed point followed by the pairs
/// `x + h * dir`, `x - h * dir`. Returns the flow at all of them and the
/// number of rows per sample.
fn perturbed_flows(
    x: &Tensor,
    sigma: f64,
    den: &dyn Denoiser,
    dirs: &[Vec<Vec<f64>>],
) -> Result<(Tensor, usize)> {
    let (m, n) = per_sample(x);
    let k = 2 * dirs[0].len() + 1;
    let mut data = Vec::with_capacity(m * k * n);
    for (s, sample_dirs) in dirs.iter().enumerate() {
        let base = x.row(s);
        data.extend_from_slice(base);
        for d in sample_dirs {
            data.extend(base.iter().zip(d).map(|(b, v)| b + FD_STEP * v));
            data.extend(base.iter().zip(d).map(|(b, v)| b - FD_STEP * v));
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = m * k;
    let stacked = Tensor::new(shape, data)?;
    Ok((flow(&stacked, sigma, den)?, k))
}

/// Exact `Tr(df/dx)` per sample by central differences, one coordinate at a
/// time. Also returns the flow at `x`.
pub fn exact_divergence_batch(
    x: &Tensor,
    sigma: f64,
    den: &dyn Denoiser,
) -> Result<(Vec<f64>, Tensor)> {
    let (m, n) = per_sample(x);
    let basis: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let dirs = vec![basis; m];
    let (f, k) = perturbed_flows(x, sigma, den, &dirs)?;
    let mut div = Vec::with_capacity(m);
    let mut base = Vec::with_capacity(m * n);
    for s in 0..m {
        let f0 = f.row(s * k);
        base.extend_from_slice(f0);
        let tr: f64 = (0..n)
            .map(|j| (f.row(s * k + 1 + 2 * j)[j] - f.row(s * k + 2 + 2 * j)[j]) / (2.0 * FD_STEP))
            .sum();
        div.push(tr);
    }
    Ok((div, Tensor::new(x.shape().to_vec(), base)?))
}

/// Divergence of a single point (no batch axis on `x`).
pub fn exact_divergence(x: &Tensor, sigma: f64, den: &dyn Denoiser) -> Result<f64> {
    let batched = with_batch_axis(x)?;
    Ok(exact_divergence_batch(&batched, sigma, den)?.0[0])
}

/// Reverse-mode trace: one backward pass per coordinate through the tape.
pub fn exact_divergence_reverse(x: &Tensor, sigma: f64, den: &dyn Denoiser) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::domain(
            "divergence",
            format!("sigma must be > 0, got {sigma}"),
        ));
    }
    let batched = with_batch_axis(x)?;
    let n = batched.len();
    let tape = Tape::new();
    let xv = tape.var(batched.clone());
    let f = xv
        .sub(den.denoise_var(&tape, xv, sigma)?)?
        .scale(1.0 / sigma);
    let mut tr = 0.0;
    for j in 0..n {
        let mut e = Tensor::zeros(batched.shape().to_vec());
        e.data_mut()[j] = 1.0;
        let fj = f.mul(tape.constant(e))?.sum();
        tr += tape.backward(fj)?.wrt(xv).data()[j];
    }
    Ok(tr)
}

/// Per-probe values `v^T (df/dx) v` for Rademacher `v`, per sample.
pub fn hutchinson_probes_batch(
    x: &Tensor,
    sigma: f64,
    den: &dyn Denoiser,
    rng: &mut Rng,
    probes: usize,
) -> Result<(Vec<Vec<f64>>, Tensor)> {
    if probes == 0 {
        return Err(Error::InvalidArgument(
            "hutchinson needs at least one probe".into(),
        ));
    }
    let (m, n) = per_sample(x);
    let dirs: Vec<Vec<Vec<f64>>> = (0..m)
        .map(|_| {
            (0..probes)
                .map(|_| rng::rademacher_tensor(rng, &[n]).into_data())
                .collect()
        })
        .collect();
    let (f, k) = perturbed_flows(x, sigma, den, &dirs)?;
    let mut vals = Vec::with_capacity(m);
    let mut base = Vec::with_capacity(m * n);
    for (s, sample_dirs) in dirs.iter().enumerate() {
        let f0 = f.row(s * k);
        base.extend_from_slice(f0);
        vals.push(
            sample_dirs
                .iter()
                .enumerate()
                .map(|(p, v)| {
                    let fp = f.row(s * k + 1 + 2 * p);
                    let fm = f.row(s * k + 2 + 2 * p);
                    v.iter()
                        .zip(fp)
                        .zip(fm)
                        .map(|((vi, a), b)| vi * (a - b) / (2.0 * FD_STEP))
                        .sum()
                })
                .collect(),
        );
    }
    Ok((vals, Tensor::new(x.shape().to_vec(), base)?))
}

/// Hutchinson estimate of the divergence of a single point.
pub fn hutchinson_divergence(
    x: &Tensor,
    sigma: f64,
    den: &dyn Denoiser,
    rng: &mut Rng,
    probes: usize,
) -> Result<f64> {
    let vals = hutchinson_probe_values(x, sigma, den, rng, probes)?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Individual probe values for a single point, e.g. to compute a standard error.
pub fn hutchinson_probe_values(
    x: &Tensor,
    sigma: f64,
    den: &dyn Denoiser,
    rng: &mut Rng,
    probes: usize,
) -> Result<Vec<f64>> {
    let batched = with_batch_axis(x)?;
    Ok(hutchinson_probes_batch(&batched, sigma, den, rng, probes)?
        .0
        .remove(0))
}

fn with_batch_axis(x: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.reshape(shape)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DivergenceMode {
    Exact,
    Hutchinson { probes: usize },
}

/// Log-densities of a batch of samples (samples on axis 0).
pub fn sample_logp_batch(
    x0: &Tensor,
    den: &dyn Denoiser,
    cfg: &DiffusionConfig,
    mode: DivergenceMode,
    rng: &mut Rng,
) -> Result<Vec<LogProbResult>> {
    cfg.validate()?;
    let mut grid = step_schedule(cfg);
    grid.pop();
    grid.reverse();
    let (m, n) = per_sample(x0);
    let mut div_of = |x: &Tensor, s: f64| -> Result<(Vec<f64>, Tensor)> {
        match mode {
            DivergenceMode::Exact => exact_divergence_batch(x, s, den),
            DivergenceMode::Hutchinson { probes } => {
                let (vals, f) = hutchinson_probes_batch(x, s, den, rng, probes)?;
                Ok((
                    vals.iter()
                        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
                        .collect(),
                    f,
                ))
            }
        }
    };
    let mut x = x0.clone();
    let (mut div, mut f) = div_of(&x, grid[0])?;
    let mut integral = vec![0.0; m];
    for (i, w) in grid.windows(2).enumerate() {
        let (s, s_next) = (w[0], w[1]);
        let pred = x.axpy(s_next - s, &f)?;
        let f_pred = flow(&pred, s_next, den)?;
        let next = x.axpy(s_next - s, &f.add(&f_pred)?.scale(0.5))?;
        if !next.is_finite() {
            return Err(Error::NonFinite(format!(
                "log-density step {i} at sigma {s_next}"
            )));
        }
        let (div_next, f_next) = div_of(&next, s_next)?;
        // trapezoid in ln(sigma): div dsigma = sigma div dln(sigma)
        let h = s_next.ln() - s.ln();
        for k in 0..m {
            integral[k] += 0.5 * h * (s * div[k] + s_next * div_next[k]);
        }
        x = next;
        div = div_next;
        f = f_next;
    }
    let sm = cfg.sigma_max;
    let norm = -0.5 * n as f64 * (2.0 * std::f64::consts::PI * sm * sm).ln();
    let (estimator, probes) = match mode {
        DivergenceMode::Exact => (Estimator::Exact, None),
        DivergenceMode::Hutchinson { probes } => (Estimator::Hutchinson, Some(probes)),
    };
    (0..m)
        .map(|k| {
            let prior_logp = norm - 0.5 * x.row(k).iter().map(|v| v * v).sum::<f64>() / (sm * sm);
            let divergence_integral = -integral[k];
            let logp = prior_logp - divergence_integral;
            if !logp.is_finite() {
                return Err(Error::NonFinite(format!("log-density of sample {k}")));
            }
            Ok(LogProbResult {
                logp,
                divergence_integral,
                prior_logp,
                estimator,
                probes,
            })
        })
        .collect()
}

/// Log-density of a single point with the exact trace.
pub fn sample_logp(
    x0: &Tensor,
    den: &dyn Denoiser,
    cfg: &DiffusionConfig,
) -> Result<LogProbResult> {
    let batched = with_batch_axis(x0)?;
    let mut unused = rng::seeded(0);
    Ok(sample_logp_batch(&batched, den, cfg, DivergenceMode::Exact, &mut unused)?.remove(0))
}
