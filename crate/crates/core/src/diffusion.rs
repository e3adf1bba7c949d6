//! Noise schedule, denoiser preconditioning and the deterministic
//! probability-flow sampler.
//!
//! The noise level doubles as time (`sigma(t) = t`), so the probability-flow
//! ODE reads `dx/dsigma = -sigma * score(x; sigma) = (x - D(x; sigma)) / sigma`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub sigma_data: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub num_steps: usize,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            sigma_data: 0.5,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            num_steps: 32,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_min > 0.0
            && self.sigma_min < self.sigma_max
            && self.num_steps >= 2
            && self.sigma_data > 0.0
            && self.p_std > 0.0
            && self.rho > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid diffusion config {self:?}"
            )))
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.num_steps = steps;
        self
    }
}

/// Input, skip and output scalings wrapped around the raw network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preconditioning {
    pub c_skip: f64,
    pub c_in: f64,
    pub c_out: f64,
}

impl Preconditioning {
    pub fn at(sigma: f64, sigma_data: f64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::domain(
                "precondition",
                format!("sigma must be >= 0, got {sigma}"),
            ));
        }
        let total = sigma * sigma + sigma_data * sigma_data;
        Ok(Preconditioning {
            c_skip: sigma_data * sigma_data / total,
            c_in: 1.0 / total.sqrt(),
            c_out: sigma * sigma_data / total.sqrt(),
        })
    }
}

/// Noise-level conditioning input, `ln(sigma) / 4`.
pub fn c_noise(sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::domain(
            "c_noise",
            format!("sigma must be > 0, got {sigma}"),
        ));
    }
    Ok(sigma.ln() / 4.0)
}

/// All four preconditioning coefficients `(c_skip, c_in, c_out, c_noise)`.
pub fn precondition_coeffs(sigma: f64, sigma_data: f64) -> Result<(f64, f64, f64, f64)> {
    let p = Preconditioning::at(sigma, sigma_data)?;
    Ok((p.c_skip, p.c_in, p.c_out, c_noise(sigma)?))
}

/// A denoiser `D(x; sigma)` over a batch of samples stacked on axis 0.
///
/// Conditioning (scene context) is bound into the implementor. Samples in a
/// batch never interact, so gradients of a summed cost give per-sample
/// vector-Jacobian products.
pub trait Denoiser: Sync {
    fn denoise_var<'t>(&self, tape: &'t Tape, x: Var<'t>, sigma: f64) -> Result<Var<'t>>;

    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        let tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let out = self.denoise_var(&tape, xv, sigma)?;
        let value = out.value();
        Ok((*value).clone())
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn denoise_var<'t>(&self, tape: &'t Tape, x: Var<'t>, sigma: f64) -> Result<Var<'t>> {
        (**self).denoise_var(tape, x, sigma)
    }
}

/// The raw network `F` inside a preconditioned denoiser. It receives the
/// scaled input and one `c_noise` value per sample on axis 0.
pub trait RawNetwork: Sync {
    fn forward<'t>(&self, tape: &'t Tape, x_scaled: Var<'t>, c_noise: &[f64]) -> Result<Var<'t>>;
}

/// `D(x; sigma) = c_skip x + c_out F(c_in x; c_noise(sigma))`.
pub struct Preconditioned<F> {
    pub net: F,
    pub sigma_data: f64,
}

pub fn wrap_denoiser<F: RawNetwork>(net: F, cfg: &DiffusionConfig) -> Preconditioned<F> {
    Preconditioned {
        net,
        sigma_data: cfg.sigma_data,
    }
}

impl<F: RawNetwork> Preconditioned<F> {
    /// Denoises with an individual noise level per sample.
    pub fn denoise_per_sample<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        sigmas: &[f64],
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.is_empty() || shape[0] != sigmas.len() {
            return Err(Error::shape("denoise_per_sample", &shape, &[sigmas.len()]));
        }
        let mut bshape = vec![1; shape.len()];
        bshape[0] = sigmas.len();
        let mut skip = Vec::with_capacity(sigmas.len());
        let mut c_in = Vec::with_capacity(sigmas.len());
        let mut c_out = Vec::with_capacity(sigmas.len());
        let mut noise = Vec::with_capacity(sigmas.len());
        for &s in sigmas {
            let p = Preconditioning::at(s, self.sigma_data)?;
            skip.push(p.c_skip);
            c_in.push(p.c_in);
            c_out.push(p.c_out);
            noise.push(c_noise(s)?);
        }
        let col =
            |v: Vec<f64>| tape.constant(Tensor::new(bshape.clone(), v).expect("batch column"));
        let scaled = x.mul(col(c_in))?;
        let f = self.net.forward(tape, scaled, &noise)?;
        if f.shape() != shape {
            return Err(Error::shape("raw network output", &f.shape(), &shape));
        }
        x.mul(col(skip))?.add(f.mul(col(c_out))?)
    }
}

impl<F: RawNetwork> Denoiser for Preconditioned<F> {
    fn denoise_var<'t>(&self, tape: &'t Tape, x: Var<'t>, sigma: f64) -> Result<Var<'t>> {
        let n = x.shape().first().copied().unwrap_or(1);
        self.denoise_per_sample(tape, x, &vec![sigma; n])
    }
}

/// `(D(x) - x) / sigma^2`.
pub fn score_from_denoiser(d_out: &Tensor, x: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::domain(
            "score",
            format!("sigma must be > 0, got {sigma}"),
        ));
    }
    Ok(d_out.sub(x)?.scale(1.0 / (sigma * sigma)))
}

/// Probability-flow velocity `dx/dsigma = -(D(x) - x) / sigma`.
///
/// Shared by the sampler and the log-density integrator so both follow the
/// identical vector field.
pub fn flow_from_denoiser(d_out: &Tensor, x: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::domain(
            "flow",
            format!("sigma must be > 0, got {sigma}"),
        ));
    }
    x.sub(d_out).map(|t| t.scale(1.0 / sigma))
}

/// Log-normal training noise level, clamped to `[sigma_min, sigma_max]`.
pub fn sample_training_noise(rng: &mut Rng, cfg: &DiffusionConfig) -> f64 {
    let ln_sigma = cfg.p_mean + cfg.p_std * rng::normal(rng);
    ln_sigma.exp().clamp(cfg.sigma_min, cfg.sigma_max)
}

/// `T + 1` decreasing noise levels from `sigma_max` down to exactly zero.
pub fn step_schedule(cfg: &DiffusionConfig) -> Vec<f64> {
    let t = cfg.num_steps;
    let inv_rho = 1.0 / cfg.rho;
    let hi = cfg.sigma_max.powf(inv_rho);
    let lo = cfg.sigma_min.powf(inv_rho);
    let mut out: Vec<f64> = (0..t)
        .map(|i| (hi + (i as f64 / (t - 1) as f64) * (lo - hi)).powf(cfg.rho))
        .collect();
    out[0] = cfg.sigma_max;
    out.push(0.0);
    out
}

/// Extra score injected into the sampler at every denoiser evaluation.
pub trait GuidanceFn {
    /// Returns `D(x; sigma)` and the additional score term for `x`.
    fn guided_eval(
        &self,
        denoiser: &dyn Denoiser,
        x: &Tensor,
        sigma: f64,
    ) -> Result<(Tensor, Tensor)>;

    /// False when the guidance contributes nothing (e.g. every weight is zero).
    fn is_active(&self) -> bool {
        true
    }
}

fn drift(
    denoiser: &dyn Denoiser,
    guidance: Option<&dyn GuidanceFn>,
    x: &Tensor,
    sigma: f64,
) -> Result<Tensor> {
    match guidance {
        Some(g) if g.is_active() => {
            let (d_out, extra) = g.guided_eval(denoiser, x, sigma)?;
            flow_from_denoiser(&d_out, x, sigma)?.axpy(-sigma, &extra)
        }
        _ => {
            let d_out = denoiser.denoise(x, sigma)?;
            flow_from_denoiser(&d_out, x, sigma)
        }
    }
}

/// One explicit Euler step along the unguided probability flow.
pub fn euler_step(
    denoiser: &dyn Denoiser,
    x: &Tensor,
    sigma: f64,
    sigma_next: f64,
) -> Result<Tensor> {
    let d = drift(denoiser, None, x, sigma)?;
    x.axpy(sigma_next - sigma, &d)
}

/// Deterministic Heun sampler for the probability-flow ODE.
///
/// Draws `x ~ N(0, sigma_max^2 I)` with `shape` (samples on axis 0) and
/// integrates down the schedule. The final step to `sigma = 0` is plain Euler.
pub fn heun_sample(
    denoiser: &dyn Denoiser,
    shape: &[usize],
    rng: &mut Rng,
    cfg: &DiffusionConfig,
    guidance: Option<&dyn GuidanceFn>,
) -> Result<Tensor> {
    cfg.validate()?;
    let sigmas = step_schedule(cfg);
    let mut x = rng::normal_tensor(rng, shape, cfg.sigma_max);
    for (i, w) in sigmas.windows(2).enumerate() {
        let (s, s_next) = (w[0], w[1]);
        let d = drift(denoiser, guidance, &x, s)?;
        let mut next = x.axpy(s_next - s, &d)?;
        if s_next > 0.0 {
            let d2 = drift(denoiser, guidance, &next, s_next)?;
            let avg = d.add(&d2)?.scale(0.5);
            next = x.axpy(s_next - s, &avg)?;
        }
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("sampler step {i} at sigma {s}")));
        }
        x = next;
    }
    Ok(x)
}
