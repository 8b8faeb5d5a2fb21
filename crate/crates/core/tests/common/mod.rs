//! Independent oracles and shared checks for the integration tests and the
//! acceptance runner.
#![allow(dead_code)]

use latent_its::backbone::{Backbone, BackboneConfig, Op, TaskInstance};
use latent_its::diagnostics::{diversity, js_divergence, pass_at_n, EvalGroup, TrajSummary};
use latent_its::mathkernel::{Params, TwoLayerNet, Vector};
use latent_its::reward::{score, RewardConfig};
use latent_its::rollout::{roll_deterministic, roll_with, Injection};
use latent_its::sampler::{
    kl_step, log_density, Perturbation, SamplerInit, SamplerParams, StepPolicy,
};
use latent_its::trainer::{
    clipped_objective, clipped_objective_dratio, density_ratio, ema_update, loss_and_grad,
    normalize_advantages, pg_loss, train_step, FrozenBatch, SampleRecord, TrainConfig, TrainState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

pub fn rand_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * gauss(r)).collect()
}

pub fn vector(v: Vec<f64>) -> Vector<f64> {
    Vector::new(v).unwrap()
}

/// `|a - b| / max(|a|, |b|, floor)`
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` along coordinate `i` of the flattened parameters.
pub fn central_diff<P: Params<f64> + Clone>(p: &P, i: usize, h: f64, f: impl Fn(&P) -> f64) -> f64 {
    let flat = p.flatten();
    let mut plus = p.clone();
    let mut minus = p.clone();
    let mut fp = flat.clone();
    fp[i] += h;
    plus.assign_flat(&fp).unwrap();
    let mut fm = flat;
    fm[i] -= h;
    minus.assign_flat(&fm).unwrap();
    (f(&plus) - f(&minus)) / (2.0 * h)
}

// ---------------------------------------------------------------- scalar oracles

pub fn silu(t: f64) -> f64 {
    t / (1.0 + (-t).exp())
}

/// Two-layer net forward written from scratch.
pub fn net_oracle(net: &TwoLayerNet<f64>, x: &[f64]) -> Vec<f64> {
    let (h, i) = (net.hidden_dim(), net.input_dim());
    let hidden: Vec<f64> = (0..h)
        .map(|r| silu(net.b1[r] + (0..i).map(|c| net.w1.get(r, c) * x[c]).sum::<f64>()))
        .collect();
    (0..net.output_dim())
        .map(|r| net.b2[r] + (0..h).map(|c| net.w2.get(r, c) * hidden[c]).sum::<f64>())
        .collect()
}

/// Per-dimension average of the diagonal Gaussian log-density.
pub fn log_density_oracle(mu: &[f64], sigma: &[f64], z: &[f64]) -> f64 {
    let d = mu.len() as f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    mu.iter()
        .zip(sigma)
        .zip(z)
        .map(|((&m, &s), &x)| -0.5 * (((x - m) / s).powi(2) + 2.0 * s.ln() + two_pi.ln()))
        .sum::<f64>()
        / d
}

pub fn policy(mu: &[f64], sigma: &[f64]) -> StepPolicy<f64> {
    StepPolicy::new(vector(mu.to_vec()), vector(sigma.to_vec())).unwrap()
}

// ---------------------------------------------------------------- small fixtures

pub fn task(operands: &[u32], ops: &[Op], m: u32) -> TaskInstance {
    TaskInstance::new(operands.to_vec(), ops.to_vec(), m).unwrap()
}

pub fn random_task(r: &mut ChaCha8Rng, m: u32, max_chain: usize) -> TaskInstance {
    let len = r.random_range(2..=max_chain);
    let operands: Vec<u32> = (0..len).map(|_| r.random_range(0..m)).collect();
    let ops: Vec<Op> = (1..len).map(|_| Op::ALL[r.random_range(0..3)]).collect();
    TaskInstance::new(operands, ops, m).unwrap()
}

pub fn small_config() -> BackboneConfig {
    BackboneConfig { latent_dim: 6, steps: 4, vocab: 5, max_chain: 3, transition_hidden: 8 }
}

pub fn frozen_backbone(cfg: BackboneConfig, seed: u64) -> Backbone<f64> {
    let mut bb = Backbone::init(cfg, seed).unwrap();
    bb.freeze();
    bb
}

pub fn small_sampler(dim: usize, seed: u64) -> SamplerParams<f64> {
    SamplerParams::init(dim, seed, &SamplerInit { mu_out_scale: 0.3, logsigma_out_scale: 0.3, logsigma_bias: -0.5 })
}

/// A frozen batch with random contexts, draws and advantages, and reference
/// log-densities near the policy's own so that ratios straddle the clip band.
pub fn random_batch(params: &SamplerParams<f64>, r: &mut ChaCha8Rng, prompts: usize, n: usize, steps: usize) -> FrozenBatch<f64> {
    let d = params.dim();
    let mut groups = Vec::new();
    for _ in 0..prompts {
        let rewards: Vec<f64> = (0..n).map(|_| gauss(r)).collect();
        let adv = normalize_advantages(&rewards).unwrap();
        let mut samples = Vec::new();
        for a in adv {
            let contexts: Vec<Vector<f64>> = (0..steps).map(|_| vector(rand_vec(r, d, 1.0))).collect();
            let zs: Vec<Perturbation<f64>> = (0..steps)
                .map(|k| {
                    let eps = vector(rand_vec(r, d, 1.0));
                    Perturbation { z: eps.clone(), eps, step_index: k + 1 }
                })
                .collect();
            let own: f64 = contexts
                .iter()
                .zip(&zs)
                .map(|(c, p)| log_density(&params.eval(c.as_slice()).unwrap().policy, &p.z).unwrap())
                .sum();
            samples.push(SampleRecord { contexts, zs, advantage: a.advantage, ref_log_q: own + 0.3 * gauss(r) });
        }
        groups.push(samples);
    }
    FrozenBatch { groups }
}

// ---------------------------------------------------------------- numeric suite

/// Analytic backward of the two-layer net vs central differences.
pub fn gradcheck_two_layer(trials: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut compared = 0usize;
    for t in 0..trials {
        let (i, h, o) = (r.random_range(1..6), r.random_range(1..7), r.random_range(1..5));
        let mut net = TwoLayerNet::<f64>::xavier(i, h, o, &mut r);
        for b in net.b1.as_mut_slice().iter_mut().chain(net.b2.as_mut_slice()) {
            *b = 0.5 * gauss(&mut r);
        }
        let x = vector(rand_vec(&mut r, i, 1.0));
        let dy = vector(rand_vec(&mut r, o, 1.0));
        let (_, cache) = net.forward(&x).unwrap();
        let (grads, dx) = net.backward(&cache, &dy).unwrap();
        let loss = |n: &TwoLayerNet<f64>, x: &[f64]| -> f64 {
            net_oracle(n, x).iter().zip(dy.iter()).map(|(a, b)| a * b).sum()
        };
        let g = grads.flatten();
        let step = 1e-5;
        for _ in 0..4 {
            let k = r.random_range(0..g.len());
            let fd = central_diff(&net, k, step, |n| loss(n, x.as_slice()));
            let e = rel_err(g[k], fd, 1e-6);
            worst = worst.max(e);
            compared += 1;
            if e > 1e-4 {
                return Err(format!("trial {t}: param {k} analytic {} vs fd {fd} (rel {e:.2e})", g[k]));
            }
        }
        for k in 0..i {
            let mut xp = x.as_slice().to_vec();
            let mut xm = xp.clone();
            xp[k] += step;
            xm[k] -= step;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * step);
            let e = rel_err(dx[k], fd, 1e-6);
            worst = worst.max(e);
            compared += 1;
            if e > 1e-4 {
                return Err(format!("trial {t}: dx[{k}] analytic {} vs fd {fd} (rel {e:.2e})", dx[k]));
            }
        }
    }
    Ok(format!("{trials} trials, {compared} entries, worst rel {worst:.1e}"))
}

/// Sampler head gradients of the step log-density vs central differences.
pub fn gradcheck_log_density(trials: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let d = r.random_range(1..5);
        let params = small_sampler(d, r.random());
        let c = vector(rand_vec(&mut r, d, 1.0));
        let z = vector(rand_vec(&mut r, d, 1.0));
        let eval = params.eval(c.as_slice()).unwrap();
        let (gm, gl) = latent_its::sampler::log_density_grad(&eval.policy, &z);
        let mut grads = latent_its::sampler::SamplerGrads::zeros_like(&params);
        params.backward_acc(&eval, &gm, &gl, &mut grads).unwrap();
        let g = grads.flatten();
        let f = |p: &SamplerParams<f64>| {
            let pol = p.eval(c.as_slice()).unwrap().policy;
            log_density_oracle(pol.mu.as_slice(), pol.sigma.as_slice(), z.as_slice())
        };
        for _ in 0..3 {
            let k = r.random_range(0..g.len());
            let fd = central_diff(&params, k, 1e-5, f);
            let e = rel_err(g[k], fd, 1e-6);
            worst = worst.max(e);
            if e > 1e-4 {
                return Err(format!("trial {t}: param {k} analytic {} vs fd {fd} (rel {e:.2e})", g[k]));
            }
        }
    }
    Ok(format!("{trials} trials, worst rel {worst:.1e}"))
}

pub fn log_density_examples() -> Check {
    let a = log_density(&policy(&[0.3, -0.2, 1.5], &[1.0; 3]), &vector(vec![0.3, -0.2, 1.5])).unwrap();
    let b = log_density(&policy(&[0.0], &[1.0]), &vector(vec![1.0])).unwrap();
    let steps = 5;
    let at_mean = policy(&[0.1, 0.2], &[1.0, 1.0]);
    let c: f64 = (0..steps).map(|_| log_density(&at_mean, &at_mean.mu).unwrap()).sum();
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let cases = [(a, -0.918939), (b, -1.418939), (c, -(steps as f64) * half_log_2pi)];
    for (got, want) in cases {
        if (got - want).abs() > 1e-6 {
            return Err(format!("log-density {got} vs {want}"));
        }
    }
    Ok(format!("{:.6} {:.6} {:.6}", a, b, c))
}

/// Closed-form KL against a Monte Carlo estimate from an independent sampler.
pub fn kl_monte_carlo(trials: usize, samples: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut worst_z: f64 = 0.0;
    for t in 0..trials {
        let d = 1 + t % 4;
        let mu_p = rand_vec(&mut r, d, 0.7);
        let mu_q = rand_vec(&mut r, d, 0.7);
        let s_p: Vec<f64> = (0..d).map(|_| (0.4 * gauss(&mut r)).exp()).collect();
        let s_q: Vec<f64> = (0..d).map(|_| (0.4 * gauss(&mut r)).exp()).collect();
        let closed = kl_step(&policy(&mu_p, &s_p), &policy(&mu_q, &s_q)).unwrap();
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..samples {
            let z: Vec<f64> = (0..d).map(|k| mu_p[k] + s_p[k] * gauss(&mut r)).collect();
            let v = log_density_oracle(&mu_p, &s_p, &z) - log_density_oracle(&mu_q, &s_q, &z);
            sum += v;
            sum2 += v * v;
        }
        let n = samples as f64;
        let mean = sum / n;
        let se = ((sum2 / n - mean * mean).max(0.0) / n).sqrt();
        let zscore = (closed - mean).abs() / se.max(1e-12);
        worst_z = worst_z.max(zscore);
        if zscore > 3.0 {
            return Err(format!("D={d}: closed {closed:.5} vs MC {mean:.5} ± {se:.5}"));
        }
    }
    Ok(format!("{trials} policy pairs, worst |z| {worst_z:.2}"))
}

/// `exp(D · log_density)` integrates to one over R^D (D = 1, 2).
pub fn quadrature_normalization() -> Check {
    let p1 = policy(&[0.4], &[0.7]);
    let n1 = 4000;
    let (lo, hi) = (0.4 - 10.0 * 0.7, 0.4 + 10.0 * 0.7);
    let h = (hi - lo) / n1 as f64;
    let mut one_d = 0.0;
    for i in 0..=n1 {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == n1 { 0.5 } else { 1.0 };
        one_d += w * log_density(&p1, &vector(vec![x])).unwrap().exp();
    }
    one_d *= h;
    let p2 = policy(&[-0.3, 0.8], &[0.5, 1.3]);
    let n2 = 400;
    let (ax, bx) = (-0.3 - 9.0 * 0.5, -0.3 + 9.0 * 0.5);
    let (ay, by) = (0.8 - 9.0 * 1.3, 0.8 + 9.0 * 1.3);
    let (hx, hy) = ((bx - ax) / n2 as f64, (by - ay) / n2 as f64);
    let mut two_d = 0.0;
    for i in 0..=n2 {
        for j in 0..=n2 {
            let w = if i == 0 || i == n2 { 0.5 } else { 1.0 } * if j == 0 || j == n2 { 0.5 } else { 1.0 };
            let z = vector(vec![ax + i as f64 * hx, ay + j as f64 * hy]);
            two_d += w * (2.0 * log_density(&p2, &z).unwrap()).exp();
        }
    }
    two_d *= hx * hy;
    if (one_d - 1.0).abs() > 1e-3 || (two_d - 1.0).abs() > 1e-3 {
        return Err(format!("integrals {one_d} (D=1), {two_d} (D=2)"));
    }
    Ok(format!("D=1 {one_d:.6}, D=2 {two_d:.6}"))
}

pub fn reward_example() -> Check {
    let cfg = RewardConfig::default();
    let recs = score(&[(true, -1.0), (true, -2.0), (true, -3.0)], &cfg);
    let s: Vec<f64> = recs.iter().map(|r| r.shaping).collect();
    let want = [0.8410, 0.0, -0.8410];
    if s.iter().zip(want).any(|(a, b)| (a - b).abs() > 1e-3) {
        return Err(format!("shaping {s:?}"));
    }
    Ok(format!("{:.4} {:.4} {:.4}", s[0], s[1], s[2]))
}

pub fn pg_examples() -> Check {
    let a = pg_loss(&[2.0], &[1.0], 0.2).map_err(|e| e.to_string())?;
    let b = pg_loss(&[0.5], &[-1.0], 0.2).map_err(|e| e.to_string())?;
    if a != -1.2 || b != 0.8 {
        return Err(format!("pg_loss {a} and {b}"));
    }
    Ok(format!("{a} {b}"))
}

/// Scalar EMA example: ref 0, params 1, decay 0.999.
pub fn ema_example() -> Check {
    let mut reference = small_sampler(1, 0);
    let mut params = reference.clone();
    let n = reference.num_params();
    reference.assign_flat(&vec![0.0; n]).unwrap();
    params.assign_flat(&vec![1.0; n]).unwrap();
    let out = ema_update(&reference, &params, 0.999).unwrap().flatten();
    // 1 - 0.999 is not representable; allow a few ulps around 0.001
    let tol = 8.0 * f64::EPSILON * 0.001;
    if out.iter().any(|v| (v - 0.001).abs() > tol) {
        return Err(format!("ema gave {:?}", &out[..1]));
    }
    Ok(format!("{:e}", out[0]))
}

pub fn js_examples() -> Check {
    let a = js_divergence(&[0.2, 0.8], &[0.2, 0.8]).map_err(|e| e.to_string())?;
    let b = js_divergence(&[1.0, 0.0], &[0.0, 1.0]).map_err(|e| e.to_string())?;
    let c = js_divergence(&[1.0, 0.0], &[0.5, 0.5]).map_err(|e| e.to_string())?;
    // direct oracle for the third case
    let m = [0.75f64, 0.25];
    let oracle = 0.5 * (1.0f64 / m[0]).ln() + 0.5 * (0.5 * (0.5 / m[0]).ln() + 0.5 * (0.5 / m[1]).ln());
    let ok = a.abs() <= 1e-6 && (b - 2f64.ln()).abs() <= 1e-6 && (c - 0.21576).abs() <= 1e-5 && (c - oracle).abs() <= 1e-6;
    if !ok {
        return Err(format!("js {a} {b} {c} (oracle {oracle})"));
    }
    Ok(format!("{a:.6} {b:.6} {c:.6}"))
}

// ---------------------------------------------------------------- invariants

pub fn sigma_floor(params: &SamplerParams<f64>, c: &[f64]) -> Result<(), String> {
    let floor = (-2.0f64).exp();
    let pol = params.eval(c).map_err(|e| e.to_string())?.policy;
    match pol.sigma.iter().find(|&&s| s < floor) {
        Some(s) => Err(format!("sigma {s} below floor")),
        None => Ok(()),
    }
}

/// Zero perturbations reproduce plain `latent_step` iteration bit-exactly.
pub fn zero_perturbation_equivalence(bb: &Backbone<f64>, t: &TaskInstance) -> Result<(), String> {
    let states = bb.deterministic_states(t).map_err(|e| e.to_string())?;
    let reference = bb.answer_dist(states.last().unwrap()).map_err(|e| e.to_string())?;
    let traj = roll_with(bb, t, |k, c| {
        let z = Vector::zeros(c.dim());
        Ok(Injection {
            h_tilde: c.add(&z)?,
            perturbation: Perturbation { eps: z.clone(), z, step_index: k },
            log_density: 0.0,
            snr: None,
        })
    })
    .map_err(|e| e.to_string())?;
    let det = roll_deterministic(bb, None, t).map_err(|e| e.to_string())?;
    let same = |a: &Vector<f64>, b: &Vector<f64>| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    if !same(&traj.answer_dist, &reference) || !same(&det.answer_dist, &reference) {
        return Err("zero-perturbation rollout differs from deterministic inference".into());
    }
    for (c, s) in traj.contexts.iter().zip(&states) {
        if !same(c, &s.h) {
            return Err("visited states differ".into());
        }
    }
    Ok(())
}

pub fn advantage_standardization(rewards: &[f64]) -> Result<(), String> {
    let adv: Vec<f64> = normalize_advantages(rewards).map_err(|e| e.to_string())?.iter().map(|a| a.advantage).collect();
    if adv.iter().all(|&a| a == 0.0) {
        return Ok(());
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    if mean.abs() > 1e-10 || (std - 1.0).abs() > 1e-9 {
        return Err(format!("advantages mean {mean:e}, std {std}"));
    }
    Ok(())
}

pub fn reward_dominance(outcomes: &[(bool, f64)]) -> Result<(), String> {
    let recs = score(outcomes, &RewardConfig::default());
    let min_c = recs.iter().filter(|r| r.correct).map(|r| r.reward).fold(f64::INFINITY, f64::min);
    let max_w = recs.iter().filter(|r| !r.correct).map(|r| r.reward).fold(f64::NEG_INFINITY, f64::max);
    if min_c <= max_w {
        return Err(format!("min correct {min_c} <= max wrong {max_w}"));
    }
    Ok(())
}

/// Derivative of the per-sample clipped objective w.r.t. the ratio, by finite
/// differences, is zero in the clipped region and matches the analytic one.
pub fn clipped_zero_gradient(ratio: f64, adv: f64, eps: f64) -> Result<(), String> {
    let h = 1e-7;
    let fd = (clipped_objective(ratio + h, adv, eps) - clipped_objective(ratio - h, adv, eps)) / (2.0 * h);
    let near_kink = ((ratio - (1.0 + eps)).abs() < 1e-5) || ((ratio - (1.0 - eps)).abs() < 1e-5);
    if near_kink {
        return Ok(());
    }
    let clipped = (adv > 0.0 && ratio > 1.0 + eps) || (adv < 0.0 && ratio < 1.0 - eps);
    if clipped && fd.abs() > 1e-9 {
        return Err(format!("nonzero slope {fd} in clipped region (rho {ratio}, A {adv})"));
    }
    let analytic = clipped_objective_dratio(ratio, adv, eps);
    if (analytic - fd).abs() > 1e-6 * (1.0 + adv.abs()) {
        return Err(format!("slope {analytic} vs fd {fd} (rho {ratio}, A {adv})"));
    }
    Ok(())
}

pub fn ratio_bounded(lp: f64, lr: f64) -> Result<(), String> {
    let r = density_ratio(lp, lr, 20.0);
    if !(r >= (-20.0f64).exp() && r <= 20.0f64.exp()) {
        return Err(format!("ratio {r} out of bounds"));
    }
    Ok(())
}

pub fn budget_monotonicity(groups: &[EvalGroup]) -> Result<(), String> {
    let budgets: Vec<usize> = (1..=groups[0].capacity()).collect();
    let p: Vec<f64> = pass_at_n(groups, &budgets).values().copied().collect();
    let d: Vec<f64> = diversity(groups, &budgets).values().copied().collect();
    for w in p.windows(2) {
        if w[1] < w[0] {
            return Err(format!("pass@N decreased: {p:?}"));
        }
    }
    for w in d.windows(2) {
        if w[1] < w[0] {
            return Err(format!("diversity decreased: {d:?}"));
        }
    }
    Ok(())
}

pub fn random_eval_groups(r: &mut ChaCha8Rng, prompts: usize, n: usize, m: usize) -> Vec<EvalGroup> {
    let summary = |r: &mut ChaCha8Rng| TrajSummary {
        answer: Some(r.random_range(0..m)),
        gt_prob: r.random_range(0.01..0.99),
        dist: vec![1.0 / m as f64; m],
        step_snr: vec![],
    };
    (0..prompts)
        .map(|_| EvalGroup { gt: r.random_range(0..m), det: summary(r), samples: (1..n).map(|_| summary(r)).collect() })
        .collect()
}

pub fn js_symmetric_bounded(p: &[f64], q: &[f64]) -> Result<(), String> {
    let a = js_divergence(p, q).map_err(|e| e.to_string())?;
    let b = js_divergence(q, p).map_err(|e| e.to_string())?;
    if (a - b).abs() > 1e-12 || a > 2f64.ln() + 1e-12 || a < 0.0 {
        return Err(format!("js {a} vs {b}"));
    }
    Ok(())
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

/// Backbone checksum before, during and after `steps` sampler updates.
pub fn checksum_constant(steps: usize) -> Check {
    let bb = frozen_backbone(small_config(), 5);
    let before = bb.checksum();
    let cfg = TrainConfig { group_size: 4, batch_prompts: 2, warmup_steps: 10, lr: 1e-3, ..Default::default() };
    let mut state = TrainState::new(small_sampler(6, 1), &cfg);
    let mut r = rng(9);
    let rc = RewardConfig::default();
    for _ in 0..steps {
        let batch: Vec<TaskInstance> = (0..2).map(|_| random_task(&mut r, 5, 3)).collect();
        train_step(&bb, &mut state, &batch, &cfg, &rc, 3).map_err(|e| e.to_string())?;
        if bb.checksum() != before {
            return Err(format!("checksum changed at step {}", state.step));
        }
    }
    Ok(format!("{steps} steps, checksum {}", &before[..12]))
}

/// Analytic gradient of `L_PG + L_KL` on a frozen batch vs central differences.
pub fn lgts_gradcheck(trials: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for t in 0..trials {
        let d = r.random_range(2..5);
        let params = small_sampler(d, r.random());
        let mut reference = params.clone();
        let flat: Vec<f64> = reference.flatten().iter().map(|v| v + 0.05 * gauss(&mut r)).collect();
        reference.assign_flat(&flat).unwrap();
        let batch = random_batch(&params, &mut r, 2, 4, 3);
        let cfg = TrainConfig { kl_beta: 0.1, ..Default::default() };
        let (_, grads) = loss_and_grad(&params, &reference, &batch, &cfg).map_err(|e| e.to_string())?;
        let g = grads.flatten();
        let f = |p: &SamplerParams<f64>| loss_and_grad(p, &reference, &batch, &cfg).unwrap().0.total;
        for _ in 0..4 {
            let k = r.random_range(0..g.len());
            let fd = central_diff(&params, k, 1e-6, f);
            let e = rel_err(g[k], fd, 1e-5);
            compared += 1;
            worst = worst.max(e);
            if e > 1e-3 {
                return Err(format!("trial {t}: param {k} analytic {} vs fd {fd} (rel {e:.2e})", g[k]));
            }
        }
    }
    Ok(format!("{compared} entries, worst rel {worst:.1e}"))
}
