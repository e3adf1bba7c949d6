use trajdiff_core::denoiser::{
    batch_loss, gmm_denoise, noise_embedding, train_step, AdamW, GmmOracle, OptimConfig,
    OracleNetwork, SetDenoiser, SetDenoiserConfig, TrainExample,
};
use trajdiff_core::diffusion::{score_from_denoiser, wrap_denoiser, Denoiser, DiffusionConfig};
use trajdiff_core::rng;
use trajdiff_core::{Tape, Tensor};

fn small_cfg(self_attention: bool) -> SetDenoiserConfig {
    let mut c = SetDenoiserConfig::new(3, 5, 2);
    c.width = 16;
    c.ff_width = 24;
    c.num_freqs = 4;
    c.token_width = 6;
    c.encoder_width = 12;
    c.context_tokens = 2;
    c.self_attention = self_attention;
    c
}

fn inputs(m: usize, na: usize, seed: u64) -> (Tensor, Tensor) {
    let mut r = rng::seeded(seed);
    (
        rng::normal_tensor(&mut r, &[m, na, 3], 1.0),
        rng::normal_tensor(&mut r, &[na, 5], 1.0),
    )
}

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

#[test]
fn gmm_examples() {
    let g = GmmOracle::gaussian(vec![0.0], 0.5).unwrap();
    assert!((gmm_denoise(&[1.0], 0.5, &g).unwrap()[0] - 0.5).abs() < 1e-15);
    assert_eq!(gmm_denoise(&[0.3], 0.0, &g).unwrap(), vec![0.3]);
    let two = GmmOracle::symmetric(vec![1.0, -0.5], 0.4).unwrap();
    assert!(gmm_denoise(&[0.0, 0.0], 0.7, &two)
        .unwrap()
        .iter()
        .all(|v| v.abs() < 1e-15));
    assert!(GmmOracle::new(vec![0.5, 0.4], vec![vec![0.0], vec![1.0]], 1.0).is_err());
}

#[test]
fn gmm_denoiser_matches_score_identity() {
    let g = GmmOracle::new(
        vec![0.2, 0.5, 0.3],
        vec![vec![1.0, 0.0], vec![-1.0, 0.5], vec![0.0, -2.0]],
        0.5,
    )
    .unwrap();
    let mut r = rng::seeded(4);
    for _ in 0..100 {
        let x = vec![3.0 * rng::normal(&mut r), 3.0 * rng::normal(&mut r)];
        let sigma = (2.0 * rng::normal(&mut r)).exp();
        let d = g.denoise_point(&x, sigma);
        let s = g.score(&x, sigma);
        for i in 0..2 {
            assert!((d[i] - (x[i] + sigma * sigma * s[i])).abs() < 1e-10);
        }
        // the tape implementation agrees with the closed form
        let t = g
            .denoise(&Tensor::new([1, 2], x.clone()).unwrap(), sigma)
            .unwrap();
        assert!((t.data()[0] - d[0]).abs() < 1e-10 && (t.data()[1] - d[1]).abs() < 1e-10);
    }
}

#[test]
fn gmm_contracts_to_prior_mean() {
    let g = GmmOracle::new(vec![0.3, 0.7], vec![vec![1.0, 1.0], vec![-1.0, 0.0]], 0.5).unwrap();
    let mean = g.mean();
    for x in [[2.0, 0.0], [-1.4, 1.4], [0.0, -2.0]] {
        let d = g.denoise_point(&x, 80.0);
        let err = ((d[0] - mean[0]).powi(2) + (d[1] - mean[1]).powi(2)).sqrt();
        assert!(err < 1e-3, "{err}");
    }
}

#[test]
fn preconditioned_oracle_network_reproduces_posterior_mean() {
    let cfg = DiffusionConfig::default();
    let g = GmmOracle::symmetric(vec![0.8, 0.1], 0.5).unwrap();
    let d = wrap_denoiser(
        OracleNetwork {
            oracle: g.clone(),
            sigma_data: 0.5,
        },
        &cfg,
    );
    let x = Tensor::new([3, 2], vec![0.2, -0.3, 1.5, 0.5, -2.0, 4.0]).unwrap();
    for sigma in [0.01, 0.3, 1.0, 7.0, 80.0] {
        let out = d.denoise(&x, sigma).unwrap();
        for r in 0..3 {
            let want = g.denoise_point(x.row(r), sigma);
            for (a, b) in out.row(r).iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "sigma {sigma}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn gaussian_oracle_score_is_analytic() {
    let g = GmmOracle::gaussian(vec![0.7, -0.2], 0.5).unwrap();
    let x = Tensor::new([1, 2], vec![1.3, 0.4]).unwrap();
    for sigma in [0.1, 0.5, 3.0] {
        let s = score_from_denoiser(&g.denoise(&x, sigma).unwrap(), &x, sigma).unwrap();
        let var = 0.25 + sigma * sigma;
        assert!((s.data()[0] - (0.7 - 1.3) / var).abs() < 1e-8);
        assert!((s.data()[1] - (-0.2 - 0.4) / var).abs() < 1e-8);
    }
}

#[test]
fn noise_embedding_contract() {
    let freqs = [0.3, -1.2, 2.0];
    let e = noise_embedding(0.7, &freqs).unwrap();
    assert_eq!(e.len(), 6);
    assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(e, noise_embedding(0.7, &freqs).unwrap());
    assert!(noise_embedding(0.0, &freqs).is_err());
}

fn raw_forward(model: &SetDenoiser, x: &Tensor, ctx: &Tensor, sigma: f64) -> Tensor {
    let cfg = DiffusionConfig::default();
    model
        .conditioned(ctx.clone(), &cfg)
        .denoise(x, sigma)
        .unwrap()
}

#[test]
fn set_denoiser_is_permutation_equivariant() {
    let model = SetDenoiser::new(small_cfg(true), 9).unwrap();
    let mut worst: f64 = 0.0;
    for na in 1..=4 {
        let (x, ctx) = inputs(2, na, na as u64);
        let base = raw_forward(&model, &x, &ctx, 0.8);
        for p in permutations(na) {
            let out = raw_forward(&model, &permute(&x, 1, &p), &permute(&ctx, 0, &p), 0.8);
            worst = worst.max(out.sub(&permute(&base, 1, &p)).unwrap().max_abs());
        }
    }
    let (x, ctx) = inputs(2, 8, 99);
    let base = raw_forward(&model, &x, &ctx, 0.8);
    let mut r = rng::seeded(5);
    for _ in 0..20 {
        let mut p: Vec<usize> = (0..8).collect();
        rand::seq::SliceRandom::shuffle(p.as_mut_slice(), &mut r);
        let out = raw_forward(&model, &permute(&x, 1, &p), &permute(&ctx, 0, &p), 0.8);
        worst = worst.max(out.sub(&permute(&base, 1, &p)).unwrap().max_abs());
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn single_agent_output_is_finite() {
    let model = SetDenoiser::new(small_cfg(true), 1).unwrap();
    let (x, ctx) = inputs(3, 1, 2);
    let out = raw_forward(&model, &x, &ctx, 2.0);
    assert_eq!(out.shape(), &[3, 1, 3]);
    assert!(out.is_finite());
}

#[test]
fn mismatched_context_is_rejected() {
    let model = SetDenoiser::new(small_cfg(true), 1).unwrap();
    let (x, _) = inputs(1, 3, 2);
    let (_, ctx) = inputs(1, 2, 2);
    let d = model.conditioned(ctx, &DiffusionConfig::default());
    assert!(d.denoise(&x, 1.0).is_err());
}

#[test]
fn without_self_attention_agents_are_independent() {
    let model = SetDenoiser::new(small_cfg(false), 3).unwrap();
    let (x, ctx) = inputs(2, 3, 8);
    let base = raw_forward(&model, &x, &ctx, 0.5);
    let mut x2 = x.clone();
    x2.data_mut()[3 + 1] += 0.7; // sample 0, agent 1
    let mut ctx2 = ctx.clone();
    ctx2.data_mut()[5 + 2] -= 1.1; // agent 1
    let out = raw_forward(&model, &x2, &ctx2, 0.5);
    for m in 0..2 {
        for a in [0, 2] {
            let i = (m * 3 + a) * 3;
            assert_eq!(&base.data()[i..i + 3], &out.data()[i..i + 3]);
        }
    }
    let with = SetDenoiser::new(small_cfg(true), 3).unwrap();
    let b = raw_forward(&with, &x, &ctx, 0.5);
    let o = raw_forward(&with, &x2, &ctx2, 0.5);
    assert_ne!(&b.data()[0..3], &o.data()[0..3]);
}

fn tiny_dataset() -> Vec<TrainExample> {
    let mut r = rng::seeded(77);
    (0..8)
        .map(|i| {
            let na = 2 + i % 2;
            let ctx = rng::normal_tensor(&mut r, &[na, 5], 1.0);
            // clean state is a fixed function of the context, so it is learnable
            let clean: Vec<f64> = (0..na)
                .flat_map(|a| {
                    let c = ctx.row(a);
                    vec![0.5 * c[0], 0.4 * (c[1] - c[2]), 0.3 * c[3]]
                })
                .collect();
            TrainExample {
                clean: Tensor::new([na, 3], clean).unwrap(),
                context: ctx,
            }
        })
        .collect()
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let mut model = SetDenoiser::new(small_cfg(true), 2).unwrap();
    let before = model.clone();
    let mut opt = AdamW::new(OptimConfig {
        lr: 0.0,
        ..OptimConfig::default()
    });
    let mut r = rng::seeded(1);
    train_step(
        &mut model,
        &tiny_dataset(),
        &DiffusionConfig::default(),
        &mut opt,
        4,
        &mut r,
    )
    .unwrap();
    assert_eq!(model, before);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let model = SetDenoiser::new(small_cfg(true), 6).unwrap();
    let data = tiny_dataset();
    let cfg = DiffusionConfig::default();
    let loss_of = |m: &SetDenoiser| {
        let tape = Tape::inference();
        let mut r = rng::seeded(3);
        batch_loss(&tape, m, &data[..3], &cfg, 4, &mut r)
            .unwrap()
            .value()
            .item()
            .unwrap()
    };
    let tape = Tape::new();
    let mut r = rng::seeded(3);
    let loss = batch_loss(&tape, &model, &data[..3], &cfg, 4, &mut r).unwrap();
    let grads = tape.backward(loss).unwrap().params();
    let mut checked = 0;
    for (id, name, t) in model.params().iter() {
        for &k in &[0usize, t.len() / 2, t.len() - 1] {
            let g = grads.get(&id).map(|g| g.data()[k]).unwrap_or(0.0);
            let mut plus = model.clone();
            plus.params_mut().get_mut(id).data_mut()[k] += 1e-5;
            let mut minus = model.clone();
            minus.params_mut().get_mut(id).data_mut()[k] -= 1e-5;
            let fd = (loss_of(&plus) - loss_of(&minus)) / 2e-5;
            let tol = 1e-3 * fd.abs().max(g.abs()).max(1e-4);
            assert!((fd - g).abs() <= tol, "{name}[{k}]: fd {fd} vs {g}");
            checked += 1;
        }
    }
    assert!(checked > 30);
}

#[test]
fn training_reduces_loss_on_tiny_dataset() {
    let mut model = SetDenoiser::new(small_cfg(true), 11).unwrap();
    let data = tiny_dataset();
    let cfg = DiffusionConfig::default();
    let mut opt = AdamW::new(OptimConfig {
        total_steps: 500,
        warmup_steps: 20,
        lr: 3e-3,
        ..OptimConfig::default()
    });
    let eval = |m: &SetDenoiser| {
        let tape = Tape::inference();
        let mut r = rng::seeded(1234);
        batch_loss(&tape, m, &data, &cfg, 64, &mut r)
            .unwrap()
            .value()
            .item()
            .unwrap()
    };
    let initial = eval(&model);
    let mut r = rng::seeded(8);
    for _ in 0..500 {
        let loss = train_step(&mut model, &data, &cfg, &mut opt, 8, &mut r).unwrap();
        assert!(loss >= 0.0);
    }
    let fin = eval(&model);
    assert!(fin <= 0.5 * initial, "initial {initial}, final {fin}");
}
