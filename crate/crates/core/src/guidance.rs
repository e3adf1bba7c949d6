//! Constraint guidance: differentiable trajectory costs evaluated on the
//! denoised sample and pulled back through the denoiser to the noisy state.

use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, GuidanceFn};
use crate::error::{Error, Result};
use crate::metrics::Target;
use crate::tensor::{Tape, Tensor, Var};

const EPS: f64 = 1e-9;
const DIST_EPS: f64 = 1e-12;

pub const DEFAULT_LAMBDA_ATTRACT: f64 = 20.0;
pub const DEFAULT_LAMBDA_REPEL: f64 = 40.0;

/// Target positions and a 0/1 mask, both `[N_a, N_t, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttractorSpec {
    pub target: Tensor,
    pub mask: Tensor,
    pub lambda: f64,
}

impl AttractorSpec {
    pub fn from_targets(
        targets: &[Target],
        agents: usize,
        steps: usize,
        lambda: f64,
    ) -> Result<Self> {
        let mut target = Tensor::zeros([agents, steps, 2]);
        let mut mask = Tensor::zeros([agents, steps, 2]);
        for t in targets {
            if t.agent >= agents || t.t_index >= steps {
                return Err(Error::InvalidArgument(format!(
                    "attractor (agent {}, t_index {}) outside {agents} agents x {steps} steps",
                    t.agent, t.t_index
                )));
            }
            let i = (t.agent * steps + t.t_index) * 2;
            target.data_mut()[i] = t.x;
            target.data_mut()[i + 1] = t.y;
            mask.data_mut()[i] = 1.0;
            mask.data_mut()[i + 1] = 1.0;
        }
        Ok(AttractorSpec {
            target,
            mask,
            lambda,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepellerSpec {
    pub radius: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub attractor: Option<AttractorSpec>,
    pub repeller: Option<RepellerSpec>,
    pub score_thresholding: bool,
}

impl GuidanceConfig {
    pub fn is_active(&self) -> bool {
        self.attractor.as_ref().is_some_and(|a| a.lambda != 0.0)
            || self.repeller.as_ref().is_some_and(|r| r.lambda != 0.0)
    }
}

/// Mean absolute deviation over masked entries, per sample, summed over the
/// leading sample axis. `d` is `[N_a, N_t, 2]` or `[M, N_a, N_t, 2]`.
pub fn attractor_cost<'t>(d: Var<'t>, spec: &AttractorSpec) -> Result<Var<'t>> {
    let tape = d.tape();
    let denom: f64 = spec.mask.data().iter().map(|m| m.abs()).sum::<f64>() + EPS;
    let diff = d.sub(tape.constant(spec.target.clone()))?;
    Ok(diff
        .mul(tape.constant(spec.mask.clone()))?
        .abs()
        .sum()
        .scale(1.0 / denom))
}

fn with_sample_axis<'t>(d: Var<'t>) -> Result<Var<'t>> {
    let shape = d.shape();
    match shape.len() {
        3 => d.reshape([1, shape[0], shape[1], shape[2]]),
        4 => Ok(d),
        _ => Err(Error::shape("trajectory cost", &shape, &[0, 0, 0, 2])),
    }
}

/// Mean of `max(1 - dist / r, 0)` over the actively violating ordered
/// (pair, step) entries, per sample, summed over samples. The active count is
/// treated as a constant.
pub fn repeller_cost<'t>(d: Var<'t>, spec: &RepellerSpec) -> Result<Var<'t>> {
    if !(spec.radius > 0.0) {
        return Err(Error::InvalidArgument(
            "repeller radius must be positive".into(),
        ));
    }
    let d = with_sample_axis(d)?;
    let shape = d.shape();
    let (m, na, nt) = (shape[0], shape[1], shape[2]);
    let tape = d.tape();
    if na < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut acts = Vec::new();
    let mut counts = vec![0.0; m];
    for i in 0..na {
        for j in i + 1..na {
            let pi = d.slice(1, i, 1)?;
            let pj = d.slice(1, j, 1)?;
            let dist = pi
                .sub(pj)?
                .square()
                .sum_axis(3)?
                .add_scalar(DIST_EPS)
                .sqrt()?
                .reshape([m, nt])?;
            let a = dist.scale(-1.0 / spec.radius).add_scalar(1.0).relu();
            for (k, row) in a.value().data().chunks(nt).enumerate() {
                counts[k] += 2.0 * row.iter().filter(|&&v| v > 0.0).count() as f64;
            }
            acts.push(a);
        }
    }
    // each unordered pair stands for the two symmetric entries of A
    let w: Vec<f64> = counts.iter().map(|c| 2.0 / (c + EPS)).collect();
    let w = tape.constant(Tensor::new([m, 1], w)?);
    let mut total: Option<Var<'t>> = None;
    for a in acts {
        let term = a.mul(w)?.sum();
        total = Some(match total {
            None => term,
            Some(t) => t.add(term)?,
        });
    }
    Ok(total.expect("at least one pair"))
}

/// Score thresholding: `clip(sigma * g, -1, 1) / sigma`.
pub fn threshold_score(g: &Tensor, sigma: f64) -> Tensor {
    g.map(|v| (sigma * v).clamp(-1.0, 1.0) / sigma)
}

/// Maps the model state (samples on axis 0) to scene-frame trajectories
/// `[M, N_a, N_t, 2]` on the tape.
pub trait TrajectoryDecoder {
    fn decode<'t>(&self, x: Var<'t>) -> Result<Var<'t>>;
}

/// For states that already are trajectories.
pub struct IdentityDecoder;

impl TrajectoryDecoder for IdentityDecoder {
    fn decode<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x)
    }
}

fn weighted_cost<'t>(
    traj: Var<'t>,
    cfg: &GuidanceConfig,
    which: Option<&str>,
) -> Result<Option<Var<'t>>> {
    let mut total: Option<Var<'t>> = None;
    let mut push = |v: Var<'t>| -> Result<()> {
        total = Some(match total {
            None => v,
            Some(t) => t.add(v)?,
        });
        Ok(())
    };
    if let Some(a) = cfg.attractor.as_ref().filter(|a| a.lambda != 0.0) {
        if which.is_none_or(|w| w == "attractor") {
            push(attractor_cost(traj, a)?.scale(a.lambda))?;
        }
    }
    if let Some(r) = cfg.repeller.as_ref().filter(|r| r.lambda != 0.0) {
        if which.is_none_or(|w| w == "repeller") {
            push(repeller_cost(traj, r)?.scale(r.lambda))?;
        }
    }
    Ok(total)
}

/// Returns `D(x)` and the constraint score `-grad_x sum(lambda L(decode(D(x))))`,
/// thresholded when configured.
pub fn constraint_score(
    x: &Tensor,
    sigma: f64,
    den: &dyn Denoiser,
    decoder: &dyn TrajectoryDecoder,
    cfg: &GuidanceConfig,
) -> Result<(Tensor, Tensor)> {
    if !(sigma > 0.0) {
        return Err(Error::domain(
            "constraint_score",
            format!("sigma must be > 0, got {sigma}"),
        ));
    }
    let grad_for = |which: Option<&str>| -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let d = den.denoise_var(&tape, xv, sigma)?;
        let traj = decoder.decode(d)?;
        let value = (*d.value()).clone();
        match weighted_cost(traj, cfg, which)? {
            None => Ok((value, Tensor::zeros(x.shape().to_vec()))),
            Some(cost) => Ok((value, tape.backward(cost)?.wrt(xv).scale(-1.0))),
        }
    };
    let (d, g) = grad_for(None)?;
    if !g.is_finite() {
        for name in ["attractor", "repeller"] {
            if !grad_for(Some(name))?.1.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{name} guidance gradient at sigma {sigma}"
                )));
            }
        }
        return Err(Error::NonFinite(format!(
            "guidance gradient at sigma {sigma}"
        )));
    }
    let g = if cfg.score_thresholding {
        threshold_score(&g, sigma)
    } else {
        g
    };
    Ok((d, g))
}

/// Guidance bound to a decoder, usable by the sampler.
pub struct Guidance<'a> {
    pub cfg: &'a GuidanceConfig,
    pub decoder: &'a dyn TrajectoryDecoder,
}

impl GuidanceFn for Guidance<'_> {
    fn guided_eval(
        &self,
        denoiser: &dyn Denoiser,
        x: &Tensor,
        sigma: f64,
    ) -> Result<(Tensor, Tensor)> {
        constraint_score(x, sigma, denoiser, self.decoder, self.cfg)
    }

    fn is_active(&self) -> bool {
        self.cfg.is_active()
    }
}

/// Post-hoc baseline: Adam directly on the trajectories `[M, N_a, N_t, 2]`
/// against the attractor cost, with a linearly decaying step size.
pub fn postprocess_optimize(
    samples: &Tensor,
    spec: &AttractorSpec,
    steps: usize,
    step_size: f64,
) -> Result<Tensor> {
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut x = samples.clone();
    let mut m = Tensor::zeros(x.shape().to_vec());
    let mut v = Tensor::zeros(x.shape().to_vec());
    for t in 0..steps {
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let cost = attractor_cost(xv, spec)?;
        let g = tape.backward(cost)?.wrt(xv);
        let lr = step_size * (1.0 - t as f64 / steps as f64);
        let k = (t + 1) as i32;
        let (bc1, bc2) = (1.0 - b1.powi(k), 1.0 - b2.powi(k));
        for (((xi, mi), vi), gi) in x
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *xi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
        }
    }
    Ok(x)
}

/// Wire format for constraints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSet {
    #[serde(default)]
    pub attractors: Vec<Target>,
    #[serde(default)]
    pub repeller: Option<RepellerJson>,
    #[serde(default = "default_attract")]
    pub lambda_attract: f64,
    #[serde(default = "default_repel")]
    pub lambda_repel: f64,
    #[serde(default = "default_true")]
    pub score_thresholding: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepellerJson {
    pub radius: f64,
}

fn default_attract() -> f64 {
    DEFAULT_LAMBDA_ATTRACT
}

fn default_repel() -> f64 {
    DEFAULT_LAMBDA_REPEL
}

fn default_true() -> bool {
    true
}

impl Default for ConstraintSet {
    fn default() -> Self {
        ConstraintSet {
            attractors: Vec::new(),
            repeller: None,
            lambda_attract: DEFAULT_LAMBDA_ATTRACT,
            lambda_repel: DEFAULT_LAMBDA_REPEL,
            score_thresholding: true,
        }
    }
}

impl ConstraintSet {
    pub fn to_config(&self, agents: usize, steps: usize) -> Result<GuidanceConfig> {
        if !(self.lambda_attract >= 0.0 && self.lambda_repel >= 0.0) {
            return Err(Error::InvalidArgument(
                "guidance weights must be nonnegative".into(),
            ));
        }
        let attractor = if self.attractors.is_empty() {
            None
        } else {
            Some(AttractorSpec::from_targets(
                &self.attractors,
                agents,
                steps,
                self.lambda_attract,
            )?)
        };
        let repeller = match self.repeller {
            Some(r) if !(r.radius > 0.0) => {
                return Err(Error::InvalidArgument(
                    "repeller radius must be positive".into(),
                ))
            }
            Some(r) => Some(RepellerSpec {
                radius: r.radius,
                lambda: self.lambda_repel,
            }),
            None => None,
        };
        Ok(GuidanceConfig {
            attractor,
            repeller,
            score_thresholding: self.score_thresholding,
        })
    }
}
