//! Acceptance harness: one `PASS`/`FAIL` line per criterion.
//!
//! Runs the end-to-end pipeline through the `trajdiff` binary where the
//! criterion is about the CLI, and the library directly otherwise. Exits 0
//! unless `ACCEPTANCE_STRICT=1` is set, in which case any failure exits 1.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use serde_json::{json, Value};

use trajdiff_core::denoiser::{GmmOracle, SetDenoiser, SetDenoiserConfig};
use trajdiff_core::diffusion::{heun_sample, precondition_coeffs, DiffusionConfig};
use trajdiff_core::engine::{trajectory_population, Checkpoint, Engine, SampleOptions};
use trajdiff_core::guidance::{postprocess_optimize, AttractorSpec, ConstraintSet, RepellerJson};
use trajdiff_core::logprob::{exact_divergence, hutchinson_probe_values, sample_logp};
use trajdiff_core::metrics::{cluster_joint, has_overlap, smoothness, success_rate, Joint, Target};
use trajdiff_core::pca::fit_pca;
use trajdiff_core::scenes::{
    generate_corpus, read_corpus_file, GeneratorParams, CONTEXT_DIM, N_T, POSE_FEATURES,
};
use trajdiff_core::{rng, Tensor};

const BIN: &str = env!("CARGO_BIN_EXE_trajdiff");

/// Guidance weights picked by a sweep on a separate validation corpus
/// (`gen-data --seed 3`), never on the scenes scored here.
const TUNED_LAMBDA_ATTRACT: f64 = 1000.0;
const TUNED_LAMBDA_REPEL: f64 = 1280.0;

type Outcome = Result<(bool, String), String>;

struct Harness {
    results: Vec<(String, bool)>,
}

impl Harness {
    fn check(&mut self, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let out = f();
        let took = start.elapsed();
        let (mut pass, mut detail) = match out {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if let Some(l) = limit {
            if took > l {
                pass = false;
                detail.push_str(&format!("; over the {}s limit", l.as_secs()));
            }
        }
        println!(
            "{} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
        self.results.push((name.to_string(), pass));
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- oracle ---

fn moments(data: &[f64], d: usize, k: usize) -> (f64, f64) {
    let vals: Vec<f64> = data.iter().skip(k).step_by(d).copied().collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn oracle_sampler() -> Outcome {
    let cfg = DiffusionConfig::default().with_steps(32);
    let g = GmmOracle::gaussian(vec![0.7, 0.7], 0.5).map_err(e2s)?;
    let out = heun_sample(&g, &[5000, 2], &mut rng::seeded(1), &cfg, None).map_err(e2s)?;
    let mut pass = true;
    let mut detail = Vec::new();
    for k in 0..2 {
        let (m, s) = moments(out.data(), 2, k);
        pass &= (m - 0.7).abs() <= 0.05 && (s - 0.5).abs() <= 0.05;
        detail.push(format!("dim{k} mean {m:.4} std {s:.4}"));
    }
    let two = GmmOracle::symmetric(vec![1.5, 0.0], 0.3).map_err(e2s)?;
    let out = heun_sample(&two, &[5000, 2], &mut rng::seeded(2), &cfg, None).map_err(e2s)?;
    let plus = out.data().chunks(2).filter(|p| p[0] > 0.0).count() as f64 / 5000.0;
    pass &= (plus - 0.5).abs() <= 0.03;
    detail.push(format!("mode split {plus:.4}"));
    Ok((pass, detail.join(", ")))
}

// --------------------------------------------------------------- logprob ---

fn hutchinson_points(g: &GmmOracle, seed: u64) -> Result<(usize, f64), String> {
    let mut r = rng::seeded(seed);
    let mut ok = 0;
    let mut worst_z: f64 = 0.0;
    for _ in 0..20 {
        let x = Tensor::from_vec(vec![1.5 * rng::normal(&mut r), 1.5 * rng::normal(&mut r)]);
        let sigma = (1.5 * rng::normal(&mut r)).exp();
        let exact = exact_divergence(&x, sigma, g).map_err(e2s)?;
        let vals = hutchinson_probe_values(&x, sigma, g, &mut r, 1000).map_err(e2s)?;
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let se =
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt();
        // finite-difference slack; an isotropic Jacobian gives zero probe variance
        let slack = 1e-6 * (1.0 + exact.abs());
        if (mean - exact).abs() <= 3.0 * se + slack {
            ok += 1;
        }
        if se > 0.0 {
            worst_z = worst_z.max((mean - exact).abs() / se);
        }
    }
    Ok((ok, worst_z))
}

fn logprob() -> Outcome {
    let cfg = DiffusionConfig::default();
    let std2 = GmmOracle::gaussian(vec![0.0, 0.0], 1.0).map_err(e2s)?;
    let r = sample_logp(&Tensor::from_vec(vec![0.0, 0.0]), &std2, &cfg).map_err(e2s)?;
    let want = -(2.0 * std::f64::consts::PI).ln();
    let err = (r.logp - want).abs();
    let (ok_std, _) = hutchinson_points(&std2, 3)?;
    // the same check on an anisotropic mixture, where probes actually vary
    let mix =
        GmmOracle::new(vec![0.3, 0.7], vec![vec![1.0, -0.5], vec![-0.8, 0.6]], 0.4).map_err(e2s)?;
    let (ok_mix, z) = hutchinson_points(&mix, 4)?;
    let pass = err <= 2e-2 && ok_std == 20 && ok_mix == 20;
    Ok((
        pass,
        format!(
            "logp(0) {:.5} vs {want:.5} (err {err:.2e}); hutchinson within 3 SE: standard {ok_std}/20, mixture {ok_mix}/20 (max |z| {z:.2})",
            r.logp
        ),
    ))
}

// -------------------------------------------------------- preconditioning ---

fn preconditioning() -> Outcome {
    let sd: f64 = 0.5;
    let mut worst: f64 = 0.0;
    for sigma in [0.1, 0.5, 2.0, 80.0_f64] {
        let (c_skip, c_in, c_out, c_noise) = precondition_coeffs(sigma, sd).map_err(e2s)?;
        let want = [
            sd.powi(2) / (sigma.powi(2) + sd.powi(2)),
            1.0 / (sigma.powi(2) + sd.powi(2)).sqrt(),
            sigma * sd / (sd.powi(2) + sigma.powi(2)).sqrt(),
            0.25 * sigma.ln(),
        ];
        for (got, w) in [c_skip, c_in, c_out, c_noise].iter().zip(want) {
            worst = worst.max((got - w).abs());
        }
    }
    Ok((worst <= 1e-12, format!("max abs deviation {worst:.1e}")))
}

// ----------------------------------------------------------- equivariance ---

fn permute(t: &Tensor, axis: usize, perm: &[usize]) -> Tensor {
    let parts: Vec<Tensor> = perm.iter().map(|&i| t.slice(axis, i, 1).unwrap()).collect();
    Tensor::concat(&parts.iter().collect::<Vec<_>>(), axis).unwrap()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 1 {
        return vec![vec![0]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn equivariance() -> Outcome {
    let cfg = SetDenoiserConfig::new(3, CONTEXT_DIM, POSE_FEATURES);
    let model = SetDenoiser::new(cfg, 17).map_err(e2s)?;
    let dcfg = DiffusionConfig::default();
    let forward = |x: &Tensor, ctx: &Tensor, sigma: f64| -> Result<Tensor, String> {
        use trajdiff_core::diffusion::Denoiser;
        model
            .conditioned(ctx.clone(), &dcfg)
            .denoise(x, sigma)
            .map_err(e2s)
    };
    let mut r = rng::seeded(21);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for na in 1..=4 {
        let x = rng::normal_tensor(&mut r, &[2, na, 3], 1.0);
        let ctx = rng::normal_tensor(&mut r, &[na, CONTEXT_DIM], 1.0);
        for sigma in [0.05, 0.8, 20.0] {
            let base = forward(&x, &ctx, sigma)?;
            for p in permutations(na) {
                let out = forward(&permute(&x, 1, &p), &permute(&ctx, 0, &p), sigma)?;
                worst = worst.max(out.sub(&permute(&base, 1, &p)).map_err(e2s)?.max_abs());
                checked += 1;
            }
        }
    }
    let x = rng::normal_tensor(&mut r, &[2, 8, 3], 1.0);
    let ctx = rng::normal_tensor(&mut r, &[8, CONTEXT_DIM], 1.0);
    let base = forward(&x, &ctx, 0.8)?;
    for _ in 0..20 {
        let mut p: Vec<usize> = (0..8).collect();
        p.shuffle(&mut r);
        let out = forward(&permute(&x, 1, &p), &permute(&ctx, 0, &p), 0.8)?;
        worst = worst.max(out.sub(&permute(&base, 1, &p)).map_err(e2s)?.max_abs());
        checked += 1;
    }
    Ok((
        worst <= 1e-9,
        format!("{checked} permutations, max deviation {worst:.1e}"),
    ))
}

// -------------------------------------------------------------------- PCA ---

fn pca() -> Outcome {
    let corpus = generate_corpus(0, 2000, &GeneratorParams::default()).map_err(e2s)?;
    let pop = trajectory_population(&corpus);
    // the corpus spans well below 32 dimensions, so the round trip uses a
    // jittered copy of it that is full rank
    let mut r = rng::seeded(5);
    let jittered: Vec<Vec<f64>> = pop
        .iter()
        .map(|s| s.iter().map(|v| v + 1e-3 * rng::normal(&mut r)).collect())
        .collect();
    let full = fit_pca(&jittered, 32).map_err(e2s)?;
    let rt = full.reconstruction_rms(&jittered).map_err(e2s)?;
    let errs: Vec<f64> = (1..=8)
        .map(|k| fit_pca(&pop, k).and_then(|m| m.reconstruction_rms(&pop)))
        .collect::<Result<_, _>>()
        .map_err(e2s)?;
    let monotone = errs.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let evr: f64 = fit_pca(&pop, 3)
        .map_err(e2s)?
        .explained_variance_ratio()
        .iter()
        .sum();
    Ok((
        rt < 1e-9 && monotone && evr >= 0.99,
        format!("round-trip RMS {rt:.1e}; RMS by N_p {errs:.4?}; cumulative EVR at N_p=3 {evr:.4}"),
    ))
}

// -------------------------------------------------------------------- CLI ---

fn cli(dir: &Path, args: &[&str]) -> Result<Value, String> {
    let out = Command::new(BIN)
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(e2s)?;
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    let v: Value = serde_json::from_str(stdout.trim())
        .map_err(|e| format!("{args:?}: bad stdout {stdout:?}: {e}"))?;
    if !out.status.success() {
        return Err(format!("{args:?} exited {:?}: {v}", out.status.code()));
    }
    Ok(v)
}

fn metric(v: &Value, path: &[&str]) -> Result<f64, String> {
    let mut cur = v;
    for p in path {
        cur = &cur[*p];
    }
    cur.as_f64().ok_or_else(|| format!("missing {path:?}"))
}

/// gen-data → fit-pca → train (full and ablation) → eval on held-out scenes.
fn training(dir: &Path) -> Outcome {
    cli(
        dir,
        &[
            "gen-data",
            "--out",
            "train.jsonl",
            "--scenes",
            "2000",
            "--seed",
            "1",
        ],
    )?;
    cli(
        dir,
        &[
            "gen-data",
            "--out",
            "test.jsonl",
            "--scenes",
            "100",
            "--seed",
            "2",
            "--keep-intents",
        ],
    )?;
    cli(
        dir,
        &[
            "fit-pca",
            "--corpus",
            "train.jsonl",
            "--components",
            "3",
            "--out",
            "pca.json",
        ],
    )?;
    let train = |out: &str, extra: &[&str]| -> Result<Value, String> {
        let mut args = vec![
            "train",
            "--corpus",
            "train.jsonl",
            "--pca",
            "pca.json",
            "--steps",
            "10000",
            "--seed",
            "7",
            "--out",
            out,
        ];
        args.extend_from_slice(extra);
        cli(dir, &args)
    };
    train("full.json", &[])?;
    train("nosa.json", &["--no-self-attention"])?;
    let full = cli(
        dir,
        &[
            "eval",
            "--ckpt",
            "full.json",
            "--corpus",
            "test.jsonl",
            "--k",
            "6",
            "--tau",
            "0.4",
            "--out",
            "eval_full.json",
        ],
    )?;
    let nosa = cli(
        dir,
        &[
            "eval",
            "--ckpt",
            "nosa.json",
            "--corpus",
            "test.jsonl",
            "--k",
            "6",
            "--tau",
            "0.4",
            "--out",
            "eval_nosa.json",
        ],
    )?;
    let m_full = metric(&full, &["metrics", "minSADE"])?;
    let m_nosa = metric(&nosa, &["metrics", "minSADE"])?;
    let cv = metric(&full, &["baseline_constant_velocity", "minSADE"])?;
    let gain = 1.0 - m_full / cv;
    Ok((
        gain >= 0.4 && m_nosa > m_full,
        format!(
            "minSADE full {m_full:.4}, -SelfAttention {m_nosa:.4}, constant velocity {cv:.4} ({:.1}% below baseline)",
            100.0 * gain
        ),
    ))
}

fn load_engine(path: &Path) -> Result<Engine, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Checkpoint::from_json(&text)
        .and_then(|c| c.to_engine())
        .map_err(e2s)
}

fn to_joints(t: &Tensor, na: usize) -> Vec<Joint> {
    t.data()
        .chunks(na * N_T * 2)
        .map(|c| {
            c.chunks(N_T * 2)
                .map(|a| a.chunks(2).map(|p| [p[0], p[1]]).collect())
                .collect()
        })
        .collect()
}

struct AttractorStats {
    sr_on: f64,
    sr_off: f64,
    sr_free: f64,
    sr_opt: f64,
    sm_on: f64,
    sm_opt: f64,
}

fn attractor_run(
    engine: &Engine,
    scenes: &[trajdiff_core::scenes::Scenario],
    lambda: f64,
) -> Result<AttractorStats, String> {
    let mut st = AttractorStats {
        sr_on: 0.0,
        sr_off: 0.0,
        sr_free: 0.0,
        sr_opt: 0.0,
        sm_on: 0.0,
        sm_opt: 0.0,
    };
    for (i, s) in scenes.iter().enumerate() {
        let gt = s.joint_future();
        let end = gt[0][N_T - 1];
        let targets = vec![Target {
            agent: 0,
            t_index: N_T - 1,
            x: end[0],
            y: end[1],
        }];
        let opts = SampleOptions {
            num_samples: 64,
            steps: 32,
            seed: 1000 + i as u64,
        };
        let on = ConstraintSet {
            attractors: targets.clone(),
            lambda_attract: lambda,
            ..Default::default()
        };
        let off = ConstraintSet {
            score_thresholding: false,
            ..on.clone()
        };
        let g_on = engine.sample(s, &opts, Some(&on)).map_err(e2s)?;
        let g_off = engine.sample(s, &opts, Some(&off)).map_err(e2s)?;
        let free = engine.sample(s, &opts, None).map_err(e2s)?;
        st.sr_on += success_rate(&g_on, &targets, 0.1).map_err(e2s)?;
        st.sr_off += success_rate(&g_off, &targets, 0.1).map_err(e2s)?;
        st.sr_free += success_rate(&free, &targets, 0.1).map_err(e2s)?;
        st.sm_on += g_on.iter().map(smoothness).sum::<f64>() / 64.0;
        // Optimization baseline: post-hoc gradient steps on unguided samples
        let na = s.num_agents();
        let flat: Vec<f64> = free.iter().flatten().flatten().flatten().copied().collect();
        let x = Tensor::new([64, na, N_T, 2], flat).map_err(e2s)?;
        let spec = AttractorSpec::from_targets(&targets, na, N_T, 1.0).map_err(e2s)?;
        let opt = to_joints(&postprocess_optimize(&x, &spec, 200, 0.5).map_err(e2s)?, na);
        st.sr_opt += success_rate(&opt, &targets, 0.1).map_err(e2s)?;
        st.sm_opt += opt.iter().map(smoothness).sum::<f64>() / 64.0;
    }
    let n = scenes.len() as f64;
    for v in [
        &mut st.sr_on,
        &mut st.sr_off,
        &mut st.sr_free,
        &mut st.sr_opt,
        &mut st.sm_on,
        &mut st.sm_opt,
    ] {
        *v /= n;
    }
    Ok(st)
}

/// Endpoint attractor on agent 0 at its ground-truth final position.
fn attractor(dir: &Path) -> Outcome {
    let engine = load_engine(&dir.join("full.json"))?;
    let scenes = read_corpus_file(&dir.join("test.jsonl")).map_err(e2s)?;
    let t = attractor_run(&engine, &scenes[..30], TUNED_LAMBDA_ATTRACT)?;
    let d = attractor_run(
        &engine,
        &scenes[..30],
        ConstraintSet::default().lambda_attract,
    )?;
    let pass = t.sr_on >= 0.9
        && t.sr_off <= 0.9 * t.sr_on
        && t.sr_opt >= 0.95
        && t.sm_opt >= 2.0 * t.sm_on;
    Ok((
        pass,
        format!(
            "success@0.1 at lambda {TUNED_LAMBDA_ATTRACT}: ST on {:.3} (need >= 0.9), ST off {:.3}; at default lambda {}: ST on {:.3}, ST off {:.3}; \
             unguided {:.3}; optimization {:.3}; smoothness guided {:.4} vs optimization {:.4}",
            t.sr_on,
            t.sr_off,
            ConstraintSet::default().lambda_attract,
            d.sr_on,
            d.sr_off,
            t.sr_free,
            t.sr_opt,
            t.sm_on,
            t.sm_opt
        ),
    ))
}

/// Pairwise repeller; overlap counted per joint sample at radius 0.25.
fn repeller(dir: &Path) -> Outcome {
    let engine = load_engine(&dir.join("full.json"))?;
    let scenes = read_corpus_file(&dir.join("test.jsonl")).map_err(e2s)?;
    let c = ConstraintSet {
        repeller: Some(RepellerJson { radius: 1.0 }),
        lambda_repel: TUNED_LAMBDA_REPEL,
        ..Default::default()
    };
    let (mut free, mut guided, mut n) = (0usize, 0usize, 0usize);
    for (i, s) in scenes[..50].iter().enumerate() {
        let opts = SampleOptions {
            num_samples: 64,
            steps: 32,
            seed: 2000 + i as u64,
        };
        let f = engine.sample(s, &opts, None).map_err(e2s)?;
        let g = engine.sample(s, &opts, Some(&c)).map_err(e2s)?;
        free += f.iter().filter(|j| has_overlap(j, 0.25)).count();
        guided += g.iter().filter(|j| has_overlap(j, 0.25)).count();
        n += 64;
    }
    let (rf, rg) = (free as f64 / n as f64, guided as f64 / n as f64);
    let ratio = if free == 0 { f64::NAN } else { rg / rf };
    Ok((
        ratio <= 0.2,
        format!("lambda {TUNED_LAMBDA_REPEL}, radius 1.0: overlap rate unguided {rf:.4}, guided {rg:.4}, ratio {ratio:.3}"),
    ))
}

// ------------------------------------------------------------- clustering ---

fn brute_force(samples: &[Joint], k: usize, tau: f64) -> (Vec<usize>, Vec<Vec<usize>>, Vec<f64>) {
    let n = samples.len();
    if n == k {
        return (
            (0..n).collect(),
            (0..n).map(|i| vec![i]).collect(),
            vec![1.0 / n as f64; n],
        );
    }
    let close = |a: &Joint, b: &Joint| {
        a.iter().zip(b).all(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                .fold(0.0, f64::max)
                <= tau
        })
    };
    let mut covered = vec![false; n];
    let mut centers = Vec::new();
    let mut members = Vec::new();
    for _ in 0..k {
        let mut cands: Vec<(usize, usize, Vec<usize>)> = (0..n)
            .map(|c| {
                let m: Vec<usize> = (0..n)
                    .filter(|&i| !covered[i] && close(&samples[c], &samples[i]))
                    .collect();
                (m.len(), c, m)
            })
            .collect();
        cands.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let (count, c, m) = cands.swap_remove(0);
        if count == 0 {
            let c = (0..n).find(|i| !centers.contains(i)).unwrap();
            centers.push(c);
            members.push(Vec::new());
            continue;
        }
        for &i in &m {
            covered[i] = true;
        }
        centers.push(c);
        members.push(m);
    }
    let total: usize = members.iter().map(Vec::len).sum();
    let probs = members
        .iter()
        .map(|m| m.len() as f64 / total as f64)
        .collect();
    (centers, members, probs)
}

fn clustering() -> Outcome {
    let mut r = rng::seeded(31);
    let mut matched = 0;
    for trial in 0..200 {
        let n = 1 + trial % 12;
        let k = 1 + (trial / 12) % n;
        let na = 1 + trial % 3;
        let t = 1 + trial % 4;
        // a few coarse clusters so coverage sets overlap nontrivially
        let centers: Vec<f64> = (0..3).map(|_| rng::normal(&mut r)).collect();
        let samples: Vec<Joint> = (0..n)
            .map(|_| {
                let c = centers[(rng::normal(&mut r).abs() * 2.0) as usize % 3];
                (0..na)
                    .map(|_| {
                        (0..t)
                            .map(|_| [c + 0.3 * rng::normal(&mut r), c + 0.3 * rng::normal(&mut r)])
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let tau = 0.2 + 0.6 * rng::normal(&mut r).abs();
        let got = cluster_joint(&samples, k, tau).map_err(e2s)?;
        let (centers, members, probs) = brute_force(&samples, k, tau);
        let same = got.centers == centers
            && got.members == members
            && got
                .probabilities
                .iter()
                .zip(&probs)
                .all(|(a, b)| (a - b).abs() < 1e-12);
        matched += same as usize;
    }
    Ok((
        matched == 200,
        format!("{matched}/200 trials identical to brute force"),
    ))
}

// ------------------------------------------------------------ determinism ---

fn free_port() -> Result<u16, String> {
    Ok(TcpListener::bind("127.0.0.1:0")
        .map_err(e2s)?
        .local_addr()
        .map_err(e2s)?
        .port())
}

fn http(port: u16, method: &str, path: &str, body: &str) -> Result<(u16, String), String> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).map_err(e2s)?;
    s.set_read_timeout(Some(Duration::from_secs(120)))
        .map_err(e2s)?;
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .map_err(e2s)?;
    let mut raw = String::new();
    s.read_to_string(&mut raw).map_err(e2s)?;
    let (head, body) = raw.split_once("\r\n\r\n").ok_or("malformed response")?;
    let status = head
        .split_whitespace()
        .nth(1)
        .and_then(|c| c.parse().ok())
        .ok_or("no status")?;
    Ok((status, body.to_string()))
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn serve_bodies(dir: &Path, scene_id: &str) -> Result<Vec<String>, String> {
    let port = free_port()?;
    let child = Command::new(BIN)
        .current_dir(dir)
        .args([
            "serve",
            "--ckpt",
            "model.json",
            "--pca",
            "pca.json",
            "--corpus",
            "test.jsonl",
            "--port",
            &port.to_string(),
        ])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .map_err(e2s)?;
    let _server = Server(child);
    let deadline = Instant::now() + Duration::from_secs(30);
    while http(port, "GET", "/v1/health", "").is_err() {
        if Instant::now() > deadline {
            return Err("server did not come up".into());
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    let sample = json!({
        "scene_id": scene_id, "num_samples": 16, "steps": 16, "seed": 9, "cluster_k": 3, "with_logp": true,
        "constraints": { "repeller": { "radius": 1.0 } }
    })
    .to_string();
    let (code, sampled) = http(port, "POST", "/v1/sample", &sample)?;
    if code != 200 {
        return Err(format!("/v1/sample returned {code}: {sampled}"));
    }
    let samples = serde_json::from_str::<Value>(&sampled).map_err(e2s)?["samples"].clone();
    let lp = json!({ "scene_id": scene_id, "samples": samples, "steps": 16, "hutchinson": 8, "seed": 4 }).to_string();
    let mut bodies = vec![sampled];
    for (m, p, b) in [
        ("POST", "/v1/logprob", lp.as_str()),
        ("GET", "/v1/scenes", ""),
        ("GET", &format!("/v1/scenes/{scene_id}"), ""),
    ] {
        let (code, body) = http(port, m, p, b)?;
        if code != 200 {
            return Err(format!("{p} returned {code}: {body}"));
        }
        bodies.push(body);
    }
    Ok(bodies)
}

fn pipeline_once(dir: &Path) -> Result<Vec<String>, String> {
    cli(
        dir,
        &[
            "gen-data",
            "--out",
            "train.jsonl",
            "--scenes",
            "100",
            "--seed",
            "3",
            "--layout",
            "mixed",
        ],
    )?;
    cli(
        dir,
        &[
            "gen-data",
            "--out",
            "test.jsonl",
            "--scenes",
            "8",
            "--seed",
            "4",
        ],
    )?;
    cli(
        dir,
        &["fit-pca", "--corpus", "train.jsonl", "--out", "pca.json"],
    )?;
    cli(
        dir,
        &[
            "train",
            "--corpus",
            "train.jsonl",
            "--pca",
            "pca.json",
            "--steps",
            "100",
            "--seed",
            "5",
            "--out",
            "model.json",
        ],
    )?;
    cli(
        dir,
        &[
            "train",
            "--corpus",
            "train.jsonl",
            "--no-pca",
            "--steps",
            "30",
            "--seed",
            "5",
            "--out",
            "raw.json",
        ],
    )?;
    let first = std::fs::read_to_string(dir.join("test.jsonl")).map_err(e2s)?;
    let id = serde_json::from_str::<Value>(first.lines().next().ok_or("empty corpus")?)
        .map_err(e2s)?["scenario_id"]
        .as_str()
        .ok_or("no id")?
        .to_string();
    let c = json!({ "attractors": [{ "agent": 0, "t_index": 15, "x": 1.0, "y": 2.0 }], "repeller": { "radius": 1.0 } }).to_string();
    cli(
        dir,
        &[
            "sample",
            "--ckpt",
            "model.json",
            "--corpus",
            "test.jsonl",
            "--scene-id",
            &id,
            "--num-samples",
            "16",
            "--seed",
            "6",
            "--constraints",
            &c,
            "--cluster-k",
            "4",
            "--out",
            "samples.json",
        ],
    )?;
    cli(
        dir,
        &[
            "logprob",
            "--ckpt",
            "model.json",
            "--samples",
            "samples.json",
            "--steps",
            "16",
            "--out",
            "logp.json",
        ],
    )?;
    cli(
        dir,
        &[
            "logprob",
            "--ckpt",
            "model.json",
            "--samples",
            "samples.json",
            "--steps",
            "16",
            "--hutchinson",
            "16",
            "--out",
            "logp_h.json",
        ],
    )?;
    cli(
        dir,
        &[
            "eval",
            "--ckpt",
            "model.json",
            "--corpus",
            "test.jsonl",
            "--num-samples",
            "16",
            "--steps",
            "16",
            "--out",
            "eval.json",
        ],
    )?;
    serve_bodies(dir, &id)
}

const ARTIFACTS: &[&str] = &[
    "train.jsonl",
    "train.jsonl.meta.json",
    "test.jsonl",
    "pca.json",
    "model.json",
    "model.loss.csv",
    "raw.json",
    "raw.loss.csv",
    "samples.json",
    "logp.json",
    "logp_h.json",
    "eval.json",
];

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(e2s)?;
    let b = tempfile::tempdir().map_err(e2s)?;
    let served_a = pipeline_once(a.path())?;
    let served_b = pipeline_once(b.path())?;
    let mut differing: Vec<String> = ARTIFACTS
        .iter()
        .filter(|f| std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok())
        .map(|f| f.to_string())
        .collect();
    if served_a != served_b {
        differing.push("serve responses".into());
    }
    Ok((
        differing.is_empty(),
        if differing.is_empty() {
            format!(
                "{} artifacts and {} serve responses byte-identical across reruns",
                ARTIFACTS.len(),
                served_a.len()
            )
        } else {
            format!("differs: {differing:?}")
        },
    ))
}

fn main() {
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let wanted = |name: &str| filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str()));
    let work = tempfile::tempdir().expect("temp dir");
    let dir: PathBuf = work.path().to_path_buf();
    let mut h = Harness {
        results: Vec::new(),
    };
    let s = Duration::from_secs;
    if wanted("oracle-sampler") {
        h.check("oracle-sampler", Some(s(30)), oracle_sampler);
    }
    if wanted("logprob") {
        h.check("logprob", Some(s(60)), logprob);
    }
    if wanted("preconditioning") {
        h.check("preconditioning", None, preconditioning);
    }
    if wanted("equivariance") {
        h.check("equivariance", None, equivariance);
    }
    if wanted("pca") {
        h.check("pca", None, pca);
    }
    if wanted("clustering") {
        h.check("clustering", None, clustering);
    }
    if wanted("training") || wanted("attractor") || wanted("repeller") {
        h.check("training", Some(s(30 * 60)), || training(&dir));
    }
    if wanted("attractor") {
        h.check("attractor", None, || attractor(&dir));
    }
    if wanted("repeller") {
        h.check("repeller", None, || repeller(&dir));
    }
    if wanted("determinism") {
        h.check("determinism", None, determinism);
    }
    let passed = h.results.iter().filter(|r| r.1).count();
    println!("acceptance: {passed}/{} criteria passed", h.results.len());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < h.results.len() {
        std::process::exit(1);
    }
}
