//! Closed-form Gaussian-mixture denoiser used to verify the sampler and the
//! log-density integrator against analytic answers.

use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, Preconditioning, RawNetwork};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Data density `sum_k w_k N(mu_k, s^2 I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmOracle {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    scale: f64,
}

impl GmmOracle {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, scale: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() {
            return Err(Error::InvalidArgument(
                "gmm: need one weight per mean".into(),
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0))
            || ((weights.iter().sum::<f64>()) - 1.0).abs() > 1e-12
        {
            return Err(Error::InvalidArgument(
                "gmm: weights must be positive and sum to 1".into(),
            ));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(Error::InvalidArgument(
                "gmm: means must share a positive dimension".into(),
            ));
        }
        if !(scale > 0.0) {
            return Err(Error::InvalidArgument("gmm: scale must be positive".into()));
        }
        Ok(GmmOracle {
            weights,
            means,
            scale,
        })
    }

    pub fn gaussian(mean: Vec<f64>, scale: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], scale)
    }

    /// Equal-weight modes at `+mean` and `-mean`.
    pub fn symmetric(mean: Vec<f64>, scale: f64) -> Result<Self> {
        let neg = mean.iter().map(|v| -v).collect();
        Self::new(vec![0.5, 0.5], vec![mean, neg], scale)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }

    /// Component log-weights `ln w_k + ln N(x; mu_k, (s^2+sigma^2) I)`.
    fn log_terms(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let var = self.scale * self.scale + sigma * sigma;
        let d = self.dim() as f64;
        self.weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| {
                let dist2: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                w.ln() - 0.5 * dist2 / var - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln()
            })
            .collect()
    }

    fn responsibilities(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let terms = self.log_terms(x, sigma);
        let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = terms.iter().map(|t| (t - top).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    /// Density of the noised data `p(x; sigma)` in log space.
    pub fn log_density(&self, x: &[f64], sigma: f64) -> f64 {
        let terms = self.log_terms(x, sigma);
        let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
    }

    /// `grad_x log p(x; sigma)`.
    pub fn score(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let var = self.scale * self.scale + sigma * sigma;
        let r = self.responsibilities(x, sigma);
        let mut out = vec![0.0; x.len()];
        for (rk, m) in r.iter().zip(&self.means) {
            for ((o, xv), mv) in out.iter_mut().zip(x).zip(m) {
                *o += rk * (mv - xv) / var;
            }
        }
        out
    }

    /// Posterior mean `E[x0 | x, sigma]` for a single point.
    pub fn denoise_point(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let s2 = self.scale * self.scale;
        let v2 = sigma * sigma;
        let r = self.responsibilities(x, sigma);
        let mut out = vec![0.0; x.len()];
        for (rk, m) in r.iter().zip(&self.means) {
            for ((o, xv), mv) in out.iter_mut().zip(x).zip(m) {
                *o += rk * (s2 * xv + v2 * mv) / (s2 + v2);
            }
        }
        out
    }
}

/// Single-point convenience form.
pub fn gmm_denoise(x: &[f64], sigma: f64, oracle: &GmmOracle) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || x.len() != oracle.dim() {
        return Err(Error::InvalidArgument(format!(
            "gmm_denoise: need sigma >= 0 and {} coordinates",
            oracle.dim()
        )));
    }
    Ok(oracle.denoise_point(x, sigma))
}

impl Denoiser for GmmOracle {
    /// Rows of `x` (axis 0) are independent points of dimension `dim()`.
    fn denoise_var<'t>(&self, tape: &'t Tape, x: Var<'t>, sigma: f64) -> Result<Var<'t>> {
        let shape = x.shape();
        let d = self.dim();
        let n: usize = shape.iter().product();
        if n % d != 0 {
            return Err(Error::shape("gmm denoise", &shape, &[d]));
        }
        let rows = x.reshape([n / d, d])?;
        let k = self.weights.len();
        let s2 = self.scale * self.scale;
        let var = s2 + sigma * sigma;
        let flat: Vec<f64> = self.means.iter().flatten().copied().collect();
        let means = Tensor::new([k, d], flat)?;
        let bias: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| w.ln() - 0.5 * m.iter().map(|v| v * v).sum::<f64>() / var)
            .collect();
        // The |x|^2 term is common to all components and cancels in the softmax.
        let mu_t = tape.constant(means.transpose()?);
        let logits = rows
            .matmul(mu_t)?
            .scale(1.0 / var)
            .add(tape.constant(Tensor::from_vec(bias)))?;
        let resp = logits.softmax();
        let pulled = resp.matmul(tape.constant(means))?;
        let out = rows
            .scale(s2 / var)
            .add(pulled.scale(sigma * sigma / var))?;
        out.reshape(shape)
    }
}

/// The raw network that, once preconditioned, reproduces the oracle exactly:
/// `F = (D - c_skip x) / c_out`.
pub struct OracleNetwork {
    pub oracle: GmmOracle,
    pub sigma_data: f64,
}

impl RawNetwork for OracleNetwork {
    fn forward<'t>(&self, tape: &'t Tape, x_scaled: Var<'t>, c_noise: &[f64]) -> Result<Var<'t>> {
        let shape = x_scaled.shape();
        let per = shape.iter().product::<usize>() / c_noise.len();
        let mut outs = Vec::with_capacity(c_noise.len());
        for (i, &c) in c_noise.iter().enumerate() {
            let sigma = (4.0 * c).exp();
            let p = Preconditioning::at(sigma, self.sigma_data)?;
            let xi = x_scaled
                .reshape([shape.iter().product::<usize>()])?
                .slice(0, i * per, per)?;
            let x = xi.scale(1.0 / p.c_in);
            let d = self.oracle.denoise_var(tape, x, sigma)?;
            outs.push(d.sub(x.scale(p.c_skip))?.scale(1.0 / p.c_out));
        }
        Var::concat(&outs, 0)?.reshape(shape)
    }
}
