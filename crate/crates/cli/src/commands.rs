use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use trajdiff_core::diffusion::DiffusionConfig;
use trajdiff_core::engine::{
    evaluate_constant_velocity, evaluate_with, predict_scene, train, trajectory_population,
    Checkpoint, Engine, EvalConfig, Representation, SampleOptions, TrainConfig,
};
use trajdiff_core::guidance::ConstraintSet;
use trajdiff_core::logprob::{DivergenceMode, LogProbResult};
use trajdiff_core::metrics::{cluster_joint, ClusteredPrediction, Joint};
use trajdiff_core::pca::PcaModel;
use trajdiff_core::scenes::{
    generate_corpus, read_corpus_file, write_corpus_file, GeneratorParams, LayoutChoice, Scenario,
};

use crate::BUILD_ID;

/// Version of the JSON artifacts written by the CLI (samples, logp, reports).
pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl From<trajdiff_core::Error> for CliError {
    fn from(e: trajdiff_core::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(format!("json: {e}"))
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "trajdiff", version = BUILD_ID, about = "Guided diffusion over joint multi-agent trajectories")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario corpus (JSONL).
    GenData(GenDataArgs),
    /// Fit the whitened PCA trajectory basis on a corpus.
    FitPca(FitPcaArgs),
    /// Train the set denoiser and write a checkpoint plus a loss curve.
    Train(TrainArgs),
    /// Draw joint samples for one scene, optionally guided by constraints.
    Sample(SampleArgs),
    /// Log-density of the samples in a samples file.
    Logprob(LogprobArgs),
    /// Evaluate clustered predictions on a corpus.
    Eval(EvalArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::FitPca(_) => "fit-pca",
            Command::Train(_) => "train",
            Command::Sample(_) => "sample",
            Command::Logprob(_) => "logprob",
            Command::Eval(_) => "eval",
            Command::Serve(_) => "serve",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// intersection, merge, straight or mixed.
    #[arg(long, default_value = "intersection")]
    layout: String,
    #[arg(long, default_value_t = 2)]
    min_agents: usize,
    #[arg(long, default_value_t = 4)]
    max_agents: usize,
    /// Keep the hidden intent labels in the output.
    #[arg(long)]
    keep_intents: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct FitPcaArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 3)]
    components: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    pca: Option<PathBuf>,
    /// Diffuse raw waypoints instead of PCA coefficients.
    #[arg(long)]
    no_pca: bool,
    #[arg(long)]
    no_self_attention: bool,
    #[arg(long, default_value_t = 10_000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    batch_scenes: usize,
    #[arg(long, default_value_t = 32)]
    noise_copies: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus holding the scene.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    scene_id: String,
    #[arg(long, default_value_t = 64)]
    num_samples: usize,
    #[arg(long, default_value_t = 32)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Constraint JSON, inline or a path to a file.
    #[arg(long)]
    constraints: Option<String>,
    /// Also cluster the samples into this many joint predictions.
    #[arg(long)]
    cluster_k: Option<usize>,
    #[arg(long, default_value_t = 0.4)]
    tau: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct LogprobArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    samples: PathBuf,
    /// Use the Hutchinson estimator with this many probes instead of the exact trace.
    #[arg(long)]
    hutchinson: Option<usize>,
    #[arg(long, default_value_t = 32)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    /// Precomputed per-scene samples instead of a checkpoint.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    k: usize,
    #[arg(long, default_value_t = 0.4)]
    tau: f64,
    #[arg(long, default_value_t = 64)]
    num_samples: usize,
    #[arg(long, default_value_t = 32)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.4)]
    miss_threshold: f64,
    #[arg(long, default_value_t = 0.25)]
    overlap_radius: f64,
    /// Worker threads; 0 uses the machine's parallelism.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Optional PCA file; must match the basis embedded in the checkpoint.
    #[arg(long)]
    pca: Option<PathBuf>,
    /// Corpus exposed under /v1/scenes.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Enable CORS for this origin (`*` for any).
    #[arg(long, num_args = 0..=1, default_missing_value = "*")]
    cors: Option<String>,
}

pub fn run(cli: Cli) -> CliResult<Value> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::FitPca(a) => fit_pca(a),
        Command::Train(a) => train_cmd(a),
        Command::Sample(a) => sample(a),
        Command::Logprob(a) => logprob(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    }
}

/// Common header of every artifact.
fn envelope(kind: &str, config: &impl Serialize, seed: Option<u64>) -> CliResult<Value> {
    Ok(json!({
        "format_version": ARTIFACT_FORMAT_VERSION,
        "kind": kind,
        "build_id": BUILD_ID,
        "seed": seed,
        "config": serde_json::to_value(config)?,
    }))
}

fn merge(mut base: Value, extra: Value) -> Value {
    if let (Some(b), Value::Object(e)) = (base.as_object_mut(), extra) {
        b.extend(e);
    }
    base
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, v: &Value) -> CliResult<()> {
    let mut text = serde_json::to_string(v)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_corpus(path: &Path) -> CliResult<Vec<Scenario>> {
    read_corpus_file(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> CliResult<(Checkpoint, Engine, String)> {
    let text = read_text(path)?;
    let ckpt = Checkpoint::from_json(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let engine = ckpt.to_engine()?;
    let digest = Sha256::digest(text.as_bytes());
    let id: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    Ok((ckpt, engine, format!("sha256:{id}")))
}

fn find_scene<'a>(corpus: &'a [Scenario], id: &str) -> CliResult<&'a Scenario> {
    corpus
        .iter()
        .find(|s| s.scenario_id == id)
        .ok_or_else(|| CliError::Data(format!("scene {id:?} not found in corpus")))
}

fn gen_data(a: GenDataArgs) -> CliResult<Value> {
    let layout = LayoutChoice::parse(&a.layout).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown layout {:?} (intersection, merge, straight, mixed)",
            a.layout
        ))
    })?;
    if a.scenes == 0 {
        return Err(CliError::Usage("--scenes must be positive".into()));
    }
    let params = GeneratorParams {
        layout,
        min_agents: a.min_agents,
        max_agents: a.max_agents,
        ..GeneratorParams::default()
    };
    params
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut corpus = generate_corpus(a.seed, a.scenes, &params)?;
    if !a.keep_intents {
        corpus = corpus.iter().map(Scenario::without_intents).collect();
    }
    write_corpus_file(&a.out, &corpus)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    let agents: usize = corpus.iter().map(Scenario::num_agents).sum();
    let meta = merge(
        envelope(
            "corpus-meta",
            &json!({ "args": &a, "generator": params }),
            Some(a.seed),
        )?,
        json!({ "scenes": corpus.len(), "agents": agents }),
    );
    let meta_path = sidecar(&a.out, "meta.json");
    write_json(&meta_path, &meta)?;
    Ok(
        json!({ "command": "gen-data", "ok": true, "out": a.out, "meta": meta_path, "scenes": corpus.len(), "agents": agents, "build_id": BUILD_ID }),
    )
}

/// `dir/name.ext` -> `dir/name.ext.<suffix>`.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn fit_pca(a: FitPcaArgs) -> CliResult<Value> {
    if a.components == 0 {
        return Err(CliError::Usage("--components must be positive".into()));
    }
    let corpus = read_corpus(&a.corpus)?;
    let repr = Representation::fit_pca(&trajectory_population(&corpus), a.components)?;
    let Representation::Pca(pca) = &repr else {
        unreachable!()
    };
    let evr = pca.explained_variance_ratio().to_vec();
    let cumulative: f64 = evr.iter().sum();
    let file = merge(pca.to_value(), envelope("pca", &a, None)?);
    write_json(&a.out, &file)?;
    Ok(
        json!({ "command": "fit-pca", "ok": true, "out": a.out, "explained_variance_ratio": evr, "cumulative": cumulative, "build_id": BUILD_ID }),
    )
}

fn train_cmd(a: TrainArgs) -> CliResult<Value> {
    match (&a.pca, a.no_pca) {
        (Some(_), true) => {
            return Err(CliError::Usage(
                "--no-pca cannot be combined with --pca".into(),
            ))
        }
        (None, false) => return Err(CliError::Usage("give --pca PATH or --no-pca".into())),
        _ => {}
    }
    if a.steps == 0 || a.batch_scenes == 0 || a.noise_copies == 0 || !(a.lr > 0.0) {
        return Err(CliError::Usage(
            "--steps, --batch-scenes, --noise-copies and --lr must be positive".into(),
        ));
    }
    let corpus = read_corpus(&a.corpus)?;
    let repr = match &a.pca {
        Some(p) => Representation::Pca(
            PcaModel::from_json(&read_text(p)?)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?,
        ),
        None => Representation::fit_raw(&trajectory_population(&corpus))?,
    };
    let mut model_cfg = Engine::default_model_config(&repr);
    model_cfg.self_attention = !a.no_self_attention;
    let mut tcfg = TrainConfig::new(a.steps, a.seed);
    tcfg.batch_scenes = a.batch_scenes;
    tcfg.noise_copies = a.noise_copies;
    tcfg.optim.lr = a.lr;
    let mut losses = Vec::with_capacity(a.steps);
    let engine = train(
        &corpus,
        repr,
        model_cfg,
        DiffusionConfig::default(),
        &tcfg,
        &mut |_, l| losses.push(l),
    )?;
    let run = json!({ "args": &a, "train": &tcfg });
    let ckpt = Checkpoint::from_engine(&engine, a.seed, BUILD_ID, run);
    let mut text = ckpt.to_json()?;
    text.push('\n');
    fs::write(&a.out, text).map_err(|e| io_err(&a.out, e))?;
    let csv_path = a
        .loss_csv
        .clone()
        .unwrap_or_else(|| a.out.with_extension("loss.csv"));
    let mut csv = Vec::new();
    writeln!(
        csv,
        "# format_version={ARTIFACT_FORMAT_VERSION} build_id={BUILD_ID} seed={}",
        a.seed
    )
    .expect("vec write");
    writeln!(csv, "step,loss").expect("vec write");
    for (i, l) in losses.iter().enumerate() {
        writeln!(csv, "{i},{l}").expect("vec write");
    }
    fs::write(&csv_path, csv).map_err(|e| io_err(&csv_path, e))?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    let final_loss = tail.iter().sum::<f64>() / tail.len() as f64;
    Ok(json!({
        "command": "train", "ok": true, "out": a.out, "loss_csv": csv_path,
        "steps": a.steps, "final_loss": final_loss, "representation": engine.repr.kind(),
        "self_attention": !a.no_self_attention, "build_id": BUILD_ID
    }))
}

fn parse_constraints(arg: &str) -> CliResult<ConstraintSet> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        read_text(Path::new(arg))?
    };
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("constraints: {e}")))
}

/// Contents of a samples artifact that later commands rely on.
#[derive(Deserialize)]
struct SamplesFile {
    format_version: u32,
    scene: Scenario,
    samples: Vec<Joint>,
}

fn sample(a: SampleArgs) -> CliResult<Value> {
    if a.num_samples == 0 || a.steps < 2 {
        return Err(CliError::Usage(
            "--num-samples must be positive and --steps at least 2".into(),
        ));
    }
    if let Some(k) = a.cluster_k {
        if k == 0 || k > a.num_samples || !(a.tau > 0.0) {
            return Err(CliError::Usage(
                "--cluster-k must be in 1..=num-samples and --tau positive".into(),
            ));
        }
    }
    let constraints = a
        .constraints
        .as_deref()
        .map(parse_constraints)
        .transpose()?;
    let (_, engine, model_id) = load_checkpoint(&a.ckpt)?;
    let corpus = read_corpus(&a.corpus)?;
    let scene = find_scene(&corpus, &a.scene_id)?.without_intents();
    let opts = SampleOptions {
        num_samples: a.num_samples,
        steps: a.steps,
        seed: a.seed,
    };
    let samples = engine.sample(&scene, &opts, constraints.as_ref())?;
    let clusters: Option<ClusteredPrediction> = a
        .cluster_k
        .map(|k| cluster_joint(&samples, k, a.tau))
        .transpose()?;
    let out = merge(
        envelope(
            "samples",
            &json!({ "args": &a, "constraints": constraints }),
            Some(a.seed),
        )?,
        json!({ "model_id": model_id, "scenario_id": scene.scenario_id, "scene": scene, "samples": samples, "clusters": clusters }),
    );
    write_json(&a.out, &out)?;
    Ok(
        json!({ "command": "sample", "ok": true, "out": a.out, "scenario_id": a.scene_id, "num_samples": a.num_samples, "build_id": BUILD_ID }),
    )
}

fn logprob(a: LogprobArgs) -> CliResult<Value> {
    let mode = match a.hutchinson {
        None => DivergenceMode::Exact,
        Some(0) => {
            return Err(CliError::Usage(
                "--hutchinson needs at least one probe".into(),
            ))
        }
        Some(k) => DivergenceMode::Hutchinson { probes: k },
    };
    if a.steps < 2 {
        return Err(CliError::Usage("--steps must be at least 2".into()));
    }
    let (_, engine, model_id) = load_checkpoint(&a.ckpt)?;
    let file: SamplesFile = serde_json::from_str(&read_text(&a.samples)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.samples.display())))?;
    if file.format_version != ARTIFACT_FORMAT_VERSION {
        return Err(CliError::Data(format!(
            "{}: unsupported format version {} (expected {ARTIFACT_FORMAT_VERSION})",
            a.samples.display(),
            file.format_version
        )));
    }
    let results: Vec<LogProbResult> =
        engine.logprob(&file.scene, &file.samples, a.steps, mode, a.seed)?;
    let logp: Vec<f64> = results.iter().map(|r| r.logp).collect();
    if let Some(out) = &a.out {
        let v = merge(
            envelope("logprob", &a, Some(a.seed))?,
            json!({ "model_id": model_id, "scenario_id": file.scene.scenario_id, "logp": logp, "results": results }),
        );
        write_json(out, &v)?;
    }
    Ok(
        json!({ "command": "logprob", "ok": true, "out": a.out, "scenario_id": file.scene.scenario_id, "logp": logp, "build_id": BUILD_ID }),
    )
}

#[derive(Deserialize)]
struct PredictionEntry {
    scenario_id: String,
    samples: Vec<Joint>,
}

#[derive(Deserialize)]
struct PredictionsFile {
    predictions: Vec<PredictionEntry>,
}

fn eval(a: EvalArgs) -> CliResult<Value> {
    if a.ckpt.is_some() == a.predictions.is_some() {
        return Err(CliError::Usage(
            "give exactly one of --ckpt or --predictions".into(),
        ));
    }
    if a.k == 0 || a.num_samples < a.k || !(a.tau > 0.0) || a.steps < 2 {
        return Err(CliError::Usage(
            "need 1 <= k <= num-samples, tau > 0 and steps >= 2".into(),
        ));
    }
    if !(a.miss_threshold > 0.0 && a.overlap_radius > 0.0) {
        return Err(CliError::Usage(
            "--miss-threshold and --overlap-radius must be positive".into(),
        ));
    }
    let corpus = read_corpus(&a.corpus)?;
    let cfg = EvalConfig {
        k: a.k,
        tau: a.tau,
        num_samples: a.num_samples,
        steps: a.steps,
        miss_threshold: a.miss_threshold,
        overlap_radius: a.overlap_radius,
        seed: a.seed,
    };
    let threads = if a.threads == 0 {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    } else {
        a.threads
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Data(e.to_string()))?;
    let mut model_id = None;
    let predictions: Vec<(Vec<Joint>, Vec<Joint>)> = match (&a.ckpt, &a.predictions) {
        (Some(ck), _) => {
            let (_, engine, id) = load_checkpoint(ck)?;
            model_id = Some(id);
            pool.install(|| {
                corpus
                    .par_iter()
                    .enumerate()
                    .map(|(i, s)| predict_scene(&engine, s, i, &cfg))
                    .collect::<Result<Vec<_>, _>>()
            })?
        }
        (None, Some(p)) => {
            let file: PredictionsFile = serde_json::from_str(&read_text(p)?)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            let mut out = Vec::with_capacity(corpus.len());
            for s in &corpus {
                let entry = file
                    .predictions
                    .iter()
                    .find(|e| e.scenario_id == s.scenario_id)
                    .ok_or_else(|| {
                        CliError::Data(format!("no predictions for scene {}", s.scenario_id))
                    })?;
                if entry.samples.is_empty() {
                    return Err(CliError::Data(format!(
                        "empty predictions for scene {}",
                        s.scenario_id
                    )));
                }
                let clustered = cluster_joint(&entry.samples, a.k.min(entry.samples.len()), a.tau)?;
                out.push((clustered.trajectories, entry.samples.clone()));
            }
            out
        }
        (None, None) => unreachable!(),
    };
    let mut iter = predictions.into_iter();
    let metrics = evaluate_with(&corpus, &cfg, |_, _| {
        Ok(iter.next().expect("one prediction per scene"))
    })?;
    let baseline = evaluate_constant_velocity(&corpus, &cfg)?;
    let improvement = 1.0 - metrics.min_sade / baseline.min_sade;
    let report = merge(
        envelope(
            "eval-report",
            &json!({ "args": &a, "eval": &cfg }),
            Some(a.seed),
        )?,
        json!({ "model_id": model_id, "metrics": metrics, "baseline_constant_velocity": baseline, "minSADE_improvement": improvement }),
    );
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(json!({
        "command": "eval", "ok": true, "out": a.out, "metrics": metrics,
        "baseline_constant_velocity": baseline, "minSADE_improvement": improvement, "build_id": BUILD_ID
    }))
}

fn serve(a: ServeArgs) -> CliResult<Value> {
    let (_, engine, model_id) = load_checkpoint(&a.ckpt)?;
    if let Some(p) = &a.pca {
        let pca = PcaModel::from_json(&read_text(p)?)
            .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        match &engine.repr {
            Representation::Pca(embedded) if *embedded == pca => {}
            _ => {
                return Err(CliError::Data(format!(
                    "{}: PCA basis does not match the one embedded in the checkpoint",
                    p.display()
                )))
            }
        }
    }
    let corpus = match &a.corpus {
        Some(p) => read_corpus(p)?,
        None => Vec::new(),
    };
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad --host/--port: {e}")))?;
    let state = Arc::new(trajdiff_service::AppState {
        engine,
        corpus,
        model_id,
    });
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Data(e.to_string()))?;
    rt.block_on(trajdiff_service::serve(state, addr, a.cors.as_deref()))
        .map_err(|e| CliError::Data(format!("serve: {e}")))?;
    Ok(json!({ "command": "serve", "ok": true }))
}
