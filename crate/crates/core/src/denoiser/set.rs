//! Permutation-equivariant transformer denoiser over a set of agents.
//!
//! Each agent is one token. Blocks alternate self-attention across the agents
//! of a joint sample, cross-attention from each agent to its own context
//! tokens, and a feed-forward layer. No parameter is indexed by agent, and
//! there is no positional encoding on the agent axis, so permuting agents
//! (together with their context) permutes the output.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::nn::{Bound, Linear, Params};
use crate::diffusion::{c_noise, DiffusionConfig, Preconditioned, RawNetwork};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{AttentionLayout, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetDenoiserConfig {
    /// Per-agent state width (PCA coefficients or flattened waypoints).
    pub feature_dim: usize,
    /// Per-agent context feature width fed to the encoder.
    pub context_dim: usize,
    /// Trailing context features (the agent pose) appended raw to every token.
    pub pose_features: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub num_freqs: usize,
    pub ff_width: usize,
    pub context_tokens: usize,
    pub token_width: usize,
    pub encoder_width: usize,
    pub self_attention: bool,
}

impl SetDenoiserConfig {
    pub fn new(feature_dim: usize, context_dim: usize, pose_features: usize) -> Self {
        SetDenoiserConfig {
            feature_dim,
            context_dim,
            pose_features,
            width: 64,
            blocks: 2,
            heads: 2,
            num_freqs: 32,
            ff_width: 128,
            context_tokens: 4,
            token_width: 28,
            encoder_width: 64,
            self_attention: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.feature_dim > 0
            && self.pose_features <= self.context_dim
            && self.context_dim > 0
            && self.width > 0
            && self.heads > 0
            && self.width % self.heads == 0
            && self.num_freqs > 0
            && self.ff_width > 0
            && self.context_tokens > 0
            && self.token_width > 0
            && self.encoder_width > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid set denoiser config {self:?}"
            )))
        }
    }

    pub fn token_dim(&self) -> usize {
        self.token_width + self.pose_features
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct AttnIds {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl AttnIds {
    fn new(p: &mut Params, name: &str, width: usize, key_dim: usize, r: &mut rng::Rng) -> Self {
        AttnIds {
            q: Linear::new(p, &format!("{name}.q"), width, width, 1.0, r),
            k: Linear::new(p, &format!("{name}.k"), key_dim, width, 1.0, r),
            v: Linear::new(p, &format!("{name}.v"), key_dim, width, 1.0, r),
            o: Linear::new(p, &format!("{name}.o"), width, width, 0.5, r),
        }
    }

    fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        keys: Var<'t>,
        heads: usize,
        layout: &Rc<AttentionLayout>,
    ) -> Result<Var<'t>> {
        let q = self.q.forward(p, x)?;
        let k = self.k.forward(p, keys)?;
        let v = self.v.forward(p, keys)?;
        self.o
            .forward(p, q.attention(k, v, heads, Rc::clone(layout))?)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BlockIds {
    self_attn: Option<AttnIds>,
    cross_attn: AttnIds,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
struct Layers {
    enc_in: Linear,
    enc_out: Linear,
    input: Linear,
    blocks: Vec<BlockIds>,
    output: Linear,
}

/// Weights plus architecture of the set denoiser and its context encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct SetDenoiser {
    cfg: SetDenoiserConfig,
    params: Params,
    freqs: Vec<f64>,
    layers: Layers,
}

/// `[cos(2 pi f_j c), sin(2 pi f_j c)]` for `c = c_noise(sigma)`.
pub fn noise_embedding(sigma: f64, freqs: &[f64]) -> Result<Vec<f64>> {
    Ok(embed(c_noise(sigma)?, freqs))
}

fn embed(c: f64, freqs: &[f64]) -> Vec<f64> {
    let tau = 2.0 * std::f64::consts::PI;
    let mut out: Vec<f64> = freqs.iter().map(|f| (tau * f * c).cos()).collect();
    out.extend(freqs.iter().map(|f| (tau * f * c).sin()));
    out
}

impl SetDenoiser {
    pub fn new(cfg: SetDenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::seeded(seed);
        let freqs = (0..cfg.num_freqs).map(|_| rng::normal(&mut r)).collect();
        let mut p = Params::default();
        let w = cfg.width;
        let enc_in = Linear::new(
            &mut p,
            "encoder.in",
            cfg.context_dim,
            cfg.encoder_width,
            2f64.sqrt(),
            &mut r,
        );
        let enc_out = Linear::new(
            &mut p,
            "encoder.out",
            cfg.encoder_width,
            cfg.context_tokens * cfg.token_width,
            1.0,
            &mut r,
        );
        let input = Linear::new(
            &mut p,
            "input",
            cfg.feature_dim + 2 * cfg.num_freqs,
            w,
            1.0,
            &mut r,
        );
        let blocks = (0..cfg.blocks)
            .map(|i| BlockIds {
                self_attn: cfg
                    .self_attention
                    .then(|| AttnIds::new(&mut p, &format!("block{i}.self"), w, w, &mut r)),
                cross_attn: AttnIds::new(
                    &mut p,
                    &format!("block{i}.cross"),
                    w,
                    cfg.token_dim(),
                    &mut r,
                ),
                ff_in: Linear::new(
                    &mut p,
                    &format!("block{i}.ff_in"),
                    w,
                    cfg.ff_width,
                    2f64.sqrt(),
                    &mut r,
                ),
                ff_out: Linear::new(
                    &mut p,
                    &format!("block{i}.ff_out"),
                    cfg.ff_width,
                    w,
                    0.5,
                    &mut r,
                ),
            })
            .collect();
        let output = Linear::new(&mut p, "output", w, cfg.feature_dim, 0.1, &mut r);
        Ok(SetDenoiser {
            cfg,
            params: p,
            freqs,
            layers: Layers {
                enc_in,
                enc_out,
                input,
                blocks,
                output,
            },
        })
    }

    /// Rebuilds a model from stored tensors; every parameter must be present.
    pub fn from_tensors(
        cfg: SetDenoiserConfig,
        freqs: Vec<f64>,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        if freqs.len() != model.cfg.num_freqs {
            return Err(Error::InvalidArgument(format!(
                "expected {} noise frequencies, got {}",
                model.cfg.num_freqs,
                freqs.len()
            )));
        }
        if tensors.len() != model.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                model.params.len(),
                tensors.len()
            )));
        }
        model.freqs = freqs;
        for (name, t) in tensors {
            model.params.set(&name, t)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &SetDenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    /// Context tokens `[N_a * N_c, token_dim]` from per-agent features `[N_a, context_dim]`.
    pub fn encode<'t>(&self, p: &Bound<'t>, ctx: Var<'t>) -> Result<Var<'t>> {
        let shape = ctx.shape();
        if shape.len() != 2 || shape[1] != self.cfg.context_dim {
            return Err(Error::shape(
                "context features",
                &shape,
                &[0, self.cfg.context_dim],
            ));
        }
        let (na, nc, tw) = (shape[0], self.cfg.context_tokens, self.cfg.token_width);
        let hidden = self.layers.enc_in.forward(p, ctx)?.relu();
        let tokens = self
            .layers
            .enc_out
            .forward(p, hidden)?
            .reshape([na * nc, tw])?;
        let pf = self.cfg.pose_features;
        if pf == 0 {
            return Ok(tokens);
        }
        let pose = ctx
            .slice(1, self.cfg.context_dim - pf, pf)?
            .reshape([na, 1, pf])?
            .broadcast_to(&[na, nc, pf])?
            .reshape([na * nc, pf])?;
        Var::concat(&[tokens, pose], 1)
    }

    /// Raw network output for `x: [M, N_a, feature_dim]` with one `c_noise`
    /// per joint sample and context features `[N_a, context_dim]`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        c_noise: &[f64],
        ctx: Var<'t>,
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.cfg.feature_dim || shape[0] != c_noise.len() {
            return Err(Error::shape(
                "set denoiser input",
                &shape,
                &[c_noise.len(), 0, self.cfg.feature_dim],
            ));
        }
        let (m, na) = (shape[0], shape[1]);
        if na == 0 || ctx.shape().first() != Some(&na) {
            return Err(Error::shape("set denoiser context", &ctx.shape(), &shape));
        }
        let tape = x.tape();
        let rows = x.reshape([m * na, self.cfg.feature_dim])?;
        let ew = 2 * self.cfg.num_freqs;
        let mut emb = Vec::with_capacity(m * na * ew);
        for &c in c_noise {
            let e = embed(c, &self.freqs);
            for _ in 0..na {
                emb.extend_from_slice(&e);
            }
        }
        let emb = tape.constant(Tensor::new([m * na, ew], emb)?);
        let mut h = self
            .layers
            .input
            .forward(p, Var::concat(&[rows, emb], 1)?)?;

        let tokens = self.encode(p, ctx)?;
        let within_sample = Rc::new(AttentionLayout::blocks(m, na));
        let own_tokens = Rc::new(AttentionLayout::per_agent(m, na, self.cfg.context_tokens));
        let heads = self.cfg.heads;
        for b in &self.layers.blocks {
            if let Some(sa) = &b.self_attn {
                let n = h.layer_norm(LN_EPS);
                h = h.add(sa.forward(p, n, n, heads, &within_sample)?)?;
            }
            let n = h.layer_norm(LN_EPS);
            h = h.add(b.cross_attn.forward(p, n, tokens, heads, &own_tokens)?)?;
            let n = h.layer_norm(LN_EPS);
            let ff = b.ff_out.forward(p, b.ff_in.forward(p, n)?.relu())?;
            h = h.add(ff)?;
        }
        let out = self.layers.output.forward(p, h.layer_norm(LN_EPS))?;
        out.reshape(shape)
    }

    /// Inference-only context tokens shaped `[N_a, N_c, token_dim]`.
    pub fn encode_context(&self, features: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        let p = self.params.bind(&tape, false);
        let tokens = self.encode(&p, tape.constant(features.clone()))?;
        let na = features.shape()[0];
        let out = tokens
            .value()
            .reshape([na, self.cfg.context_tokens, self.cfg.token_dim()])?;
        Ok(out)
    }

    /// Binds one scene's context, giving a raw network for preconditioning.
    pub fn bind_context(&self, context: Tensor, trainable: bool) -> SceneNetwork<'_> {
        SceneNetwork {
            model: self,
            context,
            trainable,
        }
    }

    /// The preconditioned denoiser `D(x; C, sigma)` for one scene.
    pub fn conditioned(
        &self,
        context: Tensor,
        cfg: &DiffusionConfig,
    ) -> Preconditioned<SceneNetwork<'_>> {
        crate::diffusion::wrap_denoiser(self.bind_context(context, false), cfg)
    }
}

/// The set denoiser with one scene's context features bound.
pub struct SceneNetwork<'m> {
    model: &'m SetDenoiser,
    context: Tensor,
    trainable: bool,
}

impl RawNetwork for SceneNetwork<'_> {
    fn forward<'t>(&self, tape: &'t Tape, x_scaled: Var<'t>, c_noise: &[f64]) -> Result<Var<'t>> {
        let p = self.model.params.bind(tape, self.trainable);
        let ctx = tape.constant(self.context.clone());
        self.model.forward(&p, x_scaled, c_noise, ctx)
    }
}
