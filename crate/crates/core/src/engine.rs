//! The trajectory model end to end: latent representation, checkpoints,
//! training over a corpus, scene sampling, log-density and evaluation.

use serde::{Deserialize, Serialize};

use crate::denoiser::{
    train_step, AdamW, OptimConfig, SetDenoiser, SetDenoiserConfig, TrainExample,
};
use crate::diffusion::{heun_sample, DiffusionConfig, GuidanceFn};
use crate::error::{Error, Result};
use crate::geom::{rotate, Pose};
use crate::guidance::{ConstraintSet, Guidance, TrajectoryDecoder};
use crate::logprob::{sample_logp_batch, DivergenceMode, LogProbResult};
use crate::metrics::{cluster_joint, Joint, MetricsAccumulator, MetricsReport, SceneEval};
use crate::pca::{fit_pca, PcaModel};
use crate::rng;
use crate::scenes::{
    canonical_future, constant_velocity_future, context_features, decode_future, Scenario,
    CONTEXT_DIM, N_T, POSE_FEATURES,
};
use crate::tensor::{Tensor, Var};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
/// Unit-variance coordinates are scaled by this to match `sigma_data`.
pub const LATENT_SCALE: f64 = 0.5;
const TRAJ_DIM: usize = 2 * N_T;

/// Canonical futures of every agent in the corpus, flattened.
pub fn trajectory_population(corpus: &[Scenario]) -> Vec<Vec<f64>> {
    corpus
        .iter()
        .flat_map(|s| s.agents.iter().map(canonical_future))
        .collect()
}

/// How a canonical future is mapped to the diffused per-agent state.
#[derive(Clone, Debug, PartialEq)]
pub enum Representation {
    /// Whitened PCA coefficients.
    Pca(PcaModel),
    /// Raw waypoints, centred and divided by one global std.
    Raw { mean: Vec<f64>, std: f64 },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum RepresentationFile {
    Pca { pca: serde_json::Value },
    Raw { mean: Vec<f64>, std: f64 },
}

impl Representation {
    pub fn fit_raw(population: &[Vec<f64>]) -> Result<Self> {
        if population.is_empty() {
            return Err(Error::InvalidArgument("empty trajectory population".into()));
        }
        let n = population.len() as f64;
        let mut mean = vec![0.0; TRAJ_DIM];
        for s in population {
            if s.len() != TRAJ_DIM {
                return Err(Error::shape("fit_raw", &[s.len()], &[TRAJ_DIM]));
            }
            mean.iter_mut().zip(s).for_each(|(m, v)| *m += v / n);
        }
        let var = population
            .iter()
            .flat_map(|s| s.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)))
            .sum::<f64>()
            / (n * TRAJ_DIM as f64);
        if !(var > 0.0) {
            return Err(Error::RankDeficient(
                "trajectory population has zero variance".into(),
            ));
        }
        Ok(Representation::Raw {
            mean,
            std: var.sqrt(),
        })
    }

    pub fn fit_pca(population: &[Vec<f64>], n_p: usize) -> Result<Self> {
        Ok(Representation::Pca(fit_pca(population, n_p)?))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Representation::Pca(_) => "pca",
            Representation::Raw { .. } => "raw",
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Representation::Pca(p) => p.n_p(),
            Representation::Raw { .. } => TRAJ_DIM,
        }
    }

    pub fn encode(&self, flat: &[f64]) -> Result<Vec<f64>> {
        match self {
            Representation::Pca(p) => Ok(p
                .transform(flat)?
                .into_iter()
                .map(|c| c * LATENT_SCALE)
                .collect()),
            Representation::Raw { mean, std } => {
                if flat.len() != TRAJ_DIM {
                    return Err(Error::shape("encode", &[flat.len()], &[TRAJ_DIM]));
                }
                Ok(flat
                    .iter()
                    .zip(mean)
                    .map(|(v, m)| (v - m) / std * LATENT_SCALE)
                    .collect())
            }
        }
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            Representation::Pca(p) => {
                let c: Vec<f64> = z.iter().map(|v| v / LATENT_SCALE).collect();
                p.inverse_transform(&c)
            }
            Representation::Raw { mean, std } => {
                if z.len() != TRAJ_DIM {
                    return Err(Error::shape("decode", &[z.len()], &[TRAJ_DIM]));
                }
                Ok(z.iter()
                    .zip(mean)
                    .map(|(v, m)| m + v / LATENT_SCALE * std)
                    .collect())
            }
        }
    }

    /// `flat = b + z A` with `A` row-major `[feature_dim, 2 N_T]`.
    fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Representation::Pca(p) => {
                let a = p
                    .inverse_matrix()
                    .into_iter()
                    .map(|v| v / LATENT_SCALE)
                    .collect();
                (a, p.mean().to_vec())
            }
            Representation::Raw { mean, std } => {
                let mut a = vec![0.0; TRAJ_DIM * TRAJ_DIM];
                for i in 0..TRAJ_DIM {
                    a[i * TRAJ_DIM + i] = std / LATENT_SCALE;
                }
                (a, mean.clone())
            }
        }
    }

    fn to_value(&self) -> serde_json::Value {
        let file = match self {
            Representation::Pca(p) => RepresentationFile::Pca { pca: p.to_value() },
            Representation::Raw { mean, std } => RepresentationFile::Raw {
                mean: mean.clone(),
                std: *std,
            },
        };
        serde_json::to_value(file).expect("representation serialises")
    }

    fn from_value(v: serde_json::Value) -> Result<Self> {
        match serde_json::from_value(v)? {
            RepresentationFile::Pca { pca } => Ok(Representation::Pca(PcaModel::from_value(pca)?)),
            RepresentationFile::Raw { mean, std } => {
                if mean.len() != TRAJ_DIM || !(std > 0.0) {
                    return Err(Error::InvalidArgument(
                        "raw representation: bad mean or std".into(),
                    ));
                }
                Ok(Representation::Raw { mean, std })
            }
        }
    }
}

/// Latent state `[M, N_a, F]` to scene-frame trajectories `[M, N_a, N_T, 2]`
/// on the tape, for one scene's agent poses.
pub struct SceneDecoder {
    /// Per agent: `[F, 2 N_T]` map and `[2 N_T]` offset, both in scene frame.
    maps: Vec<(Tensor, Tensor)>,
}

impl SceneDecoder {
    pub fn new(repr: &Representation, poses: &[Pose]) -> Result<Self> {
        let (a, b) = repr.affine();
        let f = repr.feature_dim();
        let maps = poses
            .iter()
            .map(|pose| {
                let rot = pose.heading - std::f64::consts::FRAC_PI_2;
                let mut am = Vec::with_capacity(a.len());
                for pair in a.chunks(2) {
                    am.extend(rotate([pair[0], pair[1]], rot));
                }
                let bm: Vec<f64> = b
                    .chunks(2)
                    .flat_map(|p| pose.to_scene([p[0], p[1]]))
                    .collect();
                Ok((
                    Tensor::new([f, TRAJ_DIM], am)?,
                    Tensor::new([TRAJ_DIM], bm)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(SceneDecoder { maps })
    }
}

impl TrajectoryDecoder for SceneDecoder {
    fn decode<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != self.maps.len() {
            return Err(Error::shape(
                "scene decoder",
                &shape,
                &[0, self.maps.len(), 0],
            ));
        }
        let (m, na, f) = (shape[0], shape[1], shape[2]);
        let tape = x.tape();
        let parts = self
            .maps
            .iter()
            .enumerate()
            .map(|(i, (a, b))| {
                x.slice(1, i, 1)?
                    .reshape([m, f])?
                    .matmul(tape.constant(a.clone()))?
                    .add(tape.constant(b.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Var::concat(&parts, 1)?.reshape([m, na, N_T, 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub num_samples: usize,
    pub steps: usize,
    pub seed: u64,
}

/// A trained model ready for inference.
#[derive(Clone, Debug)]
pub struct Engine {
    pub model: SetDenoiser,
    pub repr: Representation,
    pub diffusion: DiffusionConfig,
}

impl Engine {
    pub fn new_untrained(
        repr: Representation,
        model_cfg: SetDenoiserConfig,
        diffusion: DiffusionConfig,
        seed: u64,
    ) -> Result<Self> {
        if model_cfg.feature_dim != repr.feature_dim() || model_cfg.context_dim != CONTEXT_DIM {
            return Err(Error::InvalidArgument(
                "model config does not match the representation".into(),
            ));
        }
        diffusion.validate()?;
        Ok(Engine {
            model: SetDenoiser::new(model_cfg, seed)?,
            repr,
            diffusion,
        })
    }

    pub fn default_model_config(repr: &Representation) -> SetDenoiserConfig {
        SetDenoiserConfig::new(repr.feature_dim(), CONTEXT_DIM, POSE_FEATURES)
    }

    /// Clean latent state and context features of a scene.
    pub fn example(&self, scene: &Scenario) -> Result<TrainExample> {
        let mut data = Vec::with_capacity(scene.num_agents() * self.repr.feature_dim());
        for a in &scene.agents {
            data.extend(self.repr.encode(&canonical_future(a))?);
        }
        Ok(TrainExample {
            clean: Tensor::new([scene.num_agents(), self.repr.feature_dim()], data)?,
            context: context_features(scene)?,
        })
    }

    pub fn decoder(&self, scene: &Scenario) -> Result<SceneDecoder> {
        let poses: Vec<Pose> = scene.agents.iter().map(|a| a.pose).collect();
        SceneDecoder::new(&self.repr, &poses)
    }

    /// Latent samples `[M, N_a, F]`.
    pub fn sample_latent(
        &self,
        scene: &Scenario,
        opts: &SampleOptions,
        constraints: Option<&ConstraintSet>,
    ) -> Result<Tensor> {
        scene.validate()?;
        if opts.num_samples == 0 {
            return Err(Error::InvalidArgument(
                "num_samples must be positive".into(),
            ));
        }
        let cfg = self.diffusion.clone().with_steps(opts.steps);
        let den = self.model.conditioned(context_features(scene)?, &cfg);
        let shape = [
            opts.num_samples,
            scene.num_agents(),
            self.repr.feature_dim(),
        ];
        let mut r = rng::seeded(opts.seed);
        match constraints {
            None => heun_sample(&den, &shape, &mut r, &cfg, None),
            Some(c) => {
                let gcfg = c.to_config(scene.num_agents(), N_T)?;
                let decoder = self.decoder(scene)?;
                let guide = Guidance {
                    cfg: &gcfg,
                    decoder: &decoder,
                };
                heun_sample(&den, &shape, &mut r, &cfg, Some(&guide as &dyn GuidanceFn))
            }
        }
    }

    pub fn decode_latent(&self, scene: &Scenario, z: &Tensor) -> Result<Vec<Joint>> {
        let (na, f) = (scene.num_agents(), self.repr.feature_dim());
        if z.rank() != 3 || z.shape()[1] != na || z.shape()[2] != f {
            return Err(Error::shape("decode_latent", z.shape(), &[0, na, f]));
        }
        z.data()
            .chunks(na * f)
            .map(|sample| {
                sample
                    .chunks(f)
                    .zip(&scene.agents)
                    .map(|(zc, a)| Ok(decode_future(&self.repr.decode(zc)?, &a.pose)))
                    .collect()
            })
            .collect()
    }

    pub fn sample(
        &self,
        scene: &Scenario,
        opts: &SampleOptions,
        constraints: Option<&ConstraintSet>,
    ) -> Result<Vec<Joint>> {
        let z = self.sample_latent(scene, opts, constraints)?;
        self.decode_latent(scene, &z)
    }

    /// Scene-frame joint samples projected into the latent space.
    pub fn encode_joints(&self, scene: &Scenario, joints: &[Joint]) -> Result<Tensor> {
        let (na, f) = (scene.num_agents(), self.repr.feature_dim());
        let mut data = Vec::with_capacity(joints.len() * na * f);
        for j in joints {
            if j.len() != na || j.iter().any(|t| t.len() != N_T) {
                return Err(Error::InvalidArgument(format!(
                    "joint sample must have {na} agents with {N_T} waypoints each"
                )));
            }
            for (traj, a) in j.iter().zip(&scene.agents) {
                let flat: Vec<f64> = traj.iter().flat_map(|p| a.pose.to_local(*p)).collect();
                data.extend(self.repr.encode(&flat)?);
            }
        }
        Tensor::new([joints.len(), na, f], data)
    }

    /// Log-density of joint samples in the model's latent space.
    pub fn logprob(
        &self,
        scene: &Scenario,
        joints: &[Joint],
        steps: usize,
        mode: DivergenceMode,
        seed: u64,
    ) -> Result<Vec<LogProbResult>> {
        scene.validate()?;
        if joints.is_empty() {
            return Ok(Vec::new());
        }
        let x0 = self.encode_joints(scene, joints)?;
        let cfg = self.diffusion.clone().with_steps(steps);
        let den = self.model.conditioned(context_features(scene)?, &cfg);
        sample_logp_batch(&x0, &den, &cfg, mode, &mut rng::seeded(seed))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: SetDenoiserConfig,
    pub diffusion: DiffusionConfig,
    pub representation: serde_json::Value,
    /// Effective run configuration echoed by the caller.
    #[serde(default)]
    pub run: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub build_id: String,
    pub seed: u64,
    pub config: CheckpointConfig,
    pub tensors: Vec<TensorRecord>,
}

const FREQS_NAME: &str = "noise.freqs";

impl Checkpoint {
    pub fn from_engine(engine: &Engine, seed: u64, build_id: &str, run: serde_json::Value) -> Self {
        let mut tensors = vec![TensorRecord {
            name: FREQS_NAME.into(),
            shape: vec![engine.model.freqs().len()],
            data: engine.model.freqs().to_vec(),
        }];
        tensors.extend(
            engine
                .model
                .params()
                .iter()
                .map(|(_, name, t)| TensorRecord {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                }),
        );
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            build_id: build_id.into(),
            seed,
            config: CheckpointConfig {
                model: engine.model.config().clone(),
                diffusion: engine.diffusion.clone(),
                representation: engine.repr.to_value(),
                run,
            },
            tensors,
        }
    }

    pub fn to_engine(&self) -> Result<Engine> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Version {
                found: self.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let repr = Representation::from_value(self.config.representation.clone())?;
        self.config.diffusion.validate()?;
        let mut freqs = None;
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let value = Tensor::new(t.shape.clone(), t.data.clone())?;
            if t.name == FREQS_NAME {
                freqs = Some(value.into_data());
            } else {
                tensors.push((t.name.clone(), value));
            }
        }
        let freqs = freqs
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks {FREQS_NAME}")))?;
        let model = SetDenoiser::from_tensors(self.config.model.clone(), freqs, tensors)?;
        if model.config().feature_dim != repr.feature_dim() {
            return Err(Error::InvalidArgument(
                "checkpoint model and representation disagree".into(),
            ));
        }
        Ok(Engine {
            model,
            repr,
            diffusion: self.config.diffusion.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        if let Some(found) = v.get("format_version").and_then(|f| f.as_u64()) {
            if found != CHECKPOINT_FORMAT_VERSION as u64 {
                return Err(Error::Version {
                    found: found.min(u32::MAX as u64) as u32,
                    expected: CHECKPOINT_FORMAT_VERSION,
                });
            }
        }
        Ok(serde_json::from_value(v)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_scenes: usize,
    pub noise_copies: usize,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl TrainConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        TrainConfig {
            steps,
            batch_scenes: 8,
            noise_copies: 32,
            seed,
            optim: OptimConfig {
                total_steps: steps,
                warmup_steps: 200.min(steps / 10),
                ..OptimConfig::default()
            },
        }
    }
}

/// Trains from scratch. `on_step(step, loss)` is called after every update.
pub fn train(
    corpus: &[Scenario],
    repr: Representation,
    model_cfg: SetDenoiserConfig,
    diffusion: DiffusionConfig,
    tcfg: &TrainConfig,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<Engine> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    if tcfg.batch_scenes == 0 || tcfg.noise_copies == 0 {
        return Err(Error::InvalidArgument(
            "batch size and noise copies must be positive".into(),
        ));
    }
    let mut engine = Engine::new_untrained(repr, model_cfg, diffusion, rng::split(tcfg.seed, 0))?;
    let examples = corpus
        .iter()
        .map(|s| engine.example(s))
        .collect::<Result<Vec<_>>>()?;
    let mut r = rng::seeded(rng::split(tcfg.seed, 1));
    let mut opt = AdamW::new(tcfg.optim.clone());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 0..tcfg.steps {
        let mut batch = Vec::with_capacity(tcfg.batch_scenes);
        while batch.len() < tcfg.batch_scenes {
            if cursor == order.len() {
                order = (0..examples.len()).collect();
                rand::seq::SliceRandom::shuffle(&mut order[..], &mut r);
                cursor = 0;
            }
            batch.push(examples[order[cursor]].clone());
            cursor += 1;
        }
        let loss = train_step(
            &mut engine.model,
            &batch,
            &engine.diffusion,
            &mut opt,
            tcfg.noise_copies,
            &mut r,
        )?;
        on_step(step, loss);
    }
    Ok(engine)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub tau: f64,
    pub num_samples: usize,
    pub steps: usize,
    pub miss_threshold: f64,
    pub overlap_radius: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 6,
            tau: 0.4,
            num_samples: 64,
            steps: 32,
            miss_threshold: 0.4,
            overlap_radius: 0.25,
            seed: 0,
        }
    }
}

/// Clustered joint predictions for one scene, scene `index` seeding its chain.
pub fn predict_scene(
    engine: &Engine,
    scene: &Scenario,
    index: usize,
    cfg: &EvalConfig,
) -> Result<(Vec<Joint>, Vec<Joint>)> {
    let opts = SampleOptions {
        num_samples: cfg.num_samples,
        steps: cfg.steps,
        seed: rng::split(cfg.seed, index as u64),
    };
    let samples = engine.sample(scene, &opts, None)?;
    let clustered = cluster_joint(&samples, cfg.k.min(samples.len()), cfg.tau)?;
    Ok((clustered.trajectories, samples))
}

/// Metrics of model predictions over a corpus.
pub fn evaluate(engine: &Engine, corpus: &[Scenario], cfg: &EvalConfig) -> Result<MetricsReport> {
    evaluate_with(corpus, cfg, |i, s| predict_scene(engine, s, i, cfg))
}

/// Metrics of the single constant-velocity extrapolation.
pub fn evaluate_constant_velocity(corpus: &[Scenario], cfg: &EvalConfig) -> Result<MetricsReport> {
    evaluate_with(corpus, cfg, |_, s| {
        let joint: Joint = s.agents.iter().map(constant_velocity_future).collect();
        Ok((vec![joint.clone()], vec![joint]))
    })
}

/// Metrics for arbitrary per-scene `(clustered, samples)` predictions.
pub fn evaluate_with(
    corpus: &[Scenario],
    cfg: &EvalConfig,
    mut predict: impl FnMut(usize, &Scenario) -> Result<(Vec<Joint>, Vec<Joint>)>,
) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::default();
    for (i, s) in corpus.iter().enumerate() {
        let (clustered, samples) = predict(i, s)?;
        let gt = s.joint_future();
        acc.add(
            &SceneEval {
                clustered: &clustered,
                samples: &samples,
                gt: &gt,
            },
            cfg.miss_threshold,
            cfg.overlap_radius,
        )?;
    }
    Ok(acc.finish())
}
