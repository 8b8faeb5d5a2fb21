//! Group-relative policy optimization of the thought sampler.
//!
//! Each step rolls `N` trajectories per prompt, scores them, standardizes
//! rewards within each prompt group, and minimizes
//! `L = L_PG + L_KL` where `L_PG` is the clipped surrogate on the density ratio
//! against an EMA reference sampler and `L_KL` is the closed-form Gaussian KL
//! to that reference. Gradients flow through the current policy's
//! log-density at the stored `(context, z)` pairs and through the KL term;
//! the backbone, the sampling path and the reference are constants.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, TaskInstance};
use crate::error::{Error, Result};
use crate::mathkernel::{
    accumulate, ema_blend, params_finite, LinearWarmup, Optimizer, OptimizerKind, Vector,
};
use crate::reward::{score_group, RewardConfig};
use crate::rng;
use crate::rollout::{roll_group, RolloutGroup};
use crate::sampler::{
    kl_step, kl_step_grad, log_density, log_density_grad, Perturbation, SamplerGrads, SamplerParams,
};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub group_size: usize,
    pub batch_prompts: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub logratio_clip: f64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub ema_decay: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            group_size: 32,
            batch_prompts: 32,
            clip_eps: 0.2,
            kl_beta: 0.001,
            logratio_clip: 20.0,
            lr: 1e-4,
            warmup_steps: 50,
            total_steps: 10_000,
            ema_decay: 0.999,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config("clip_eps must be in (0, 1)".into()));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(Error::Config("kl_beta must be >= 0".into()));
        }
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be >= 2".into()));
        }
        if self.batch_prompts == 0 {
            return Err(Error::Config("batch_prompts must be > 0".into()));
        }
        if !(self.logratio_clip > 0.0) {
            return Err(Error::Config("logratio_clip must be > 0".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config("lr must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LinearWarmup {
        LinearWarmup { base_lr: self.lr, warmup_steps: self.warmup_steps }
    }
}

/// EMA copy of the policy used as ratio denominator and KL anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSampler<T> {
    pub params: SamplerParams<T>,
    pub decay: f64,
}

impl<T: Real> ReferenceSampler<T> {
    pub fn from_policy(policy: &SamplerParams<T>, decay: f64) -> Self {
        ReferenceSampler { params: policy.clone(), decay }
    }

    pub fn update(&mut self, policy: &SamplerParams<T>) -> Result<()> {
        self.params = ema_update(&self.params, policy, self.decay)?;
        Ok(())
    }
}

/// `ref' = decay · ref + (1 - decay) · params`, elementwise.
pub fn ema_update<T: Real>(reference: &SamplerParams<T>, params: &SamplerParams<T>, decay: f64) -> Result<SamplerParams<T>> {
    let mut out = reference.clone();
    ema_blend(&mut out, params, T::lit(decay))?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvantageRecord<T> {
    pub raw_reward: T,
    pub advantage: T,
}

/// Standardizes rewards within one prompt group (population std). All
/// advantages are zero when the spread is below `1e-8`.
pub fn normalize_advantages<T: Real>(rewards: &[T]) -> Result<Vec<AdvantageRecord<T>>> {
    if rewards.len() < 2 {
        return Err(Error::Input("advantage normalization needs >= 2 rewards".into()));
    }
    let n = T::from_len(rewards.len());
    let mean = rewards.iter().copied().sum::<T>() / n;
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / n;
    let std = var.sqrt();
    let guard = std > T::lit(1e-8);
    Ok(rewards
        .iter()
        .map(|&r| AdvantageRecord {
            raw_reward: r,
            advantage: if guard { (r - mean) / std } else { T::zero() },
        })
        .collect())
}

/// `exp(clamp(policy_logq - ref_logq, -clip, clip))`.
pub fn density_ratio<T: Real>(policy_logq: T, ref_logq: T, clip: T) -> T {
    (policy_logq - ref_logq).max(-clip).min(clip).exp()
}

/// `min(ρA, clip(ρ, 1-ε, 1+ε)A)` for one sample.
pub fn clipped_objective<T: Real>(ratio: T, advantage: T, clip_eps: T) -> T {
    let clipped = ratio.max(T::one() - clip_eps).min(T::one() + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Derivative of [`clipped_objective`] w.r.t. the ratio: `A` where the
/// unclipped branch is active, zero where clipping binds.
pub fn clipped_objective_dratio<T: Real>(ratio: T, advantage: T, clip_eps: T) -> T {
    let hi = T::one() + clip_eps;
    let lo = T::one() - clip_eps;
    if (advantage > T::zero() && ratio > hi) || (advantage < T::zero() && ratio < lo) {
        T::zero()
    } else {
        advantage
    }
}

/// `-mean_i min(ρ_i A_i, clip(ρ_i) A_i)`.
pub fn pg_loss<T: Real>(ratios: &[T], advantages: &[T], clip_eps: T) -> Result<T> {
    if ratios.len() != advantages.len() {
        return Err(Error::shape("ratios and advantages differ in length"));
    }
    if ratios.is_empty() {
        return Ok(T::zero());
    }
    let total: T = ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| clipped_objective(r, a, clip_eps))
        .sum();
    Ok(-total / T::from_len(ratios.len()))
}

/// `beta · mean_c KL(policy(c) ‖ ref(c))`.
pub fn kl_loss<T: Real>(
    params: &SamplerParams<T>,
    reference: &SamplerParams<T>,
    contexts: &[Vector<T>],
    beta: T,
) -> Result<T> {
    if contexts.is_empty() || beta == T::zero() {
        return Ok(T::zero());
    }
    let mut total = T::zero();
    for c in contexts {
        let p = params.eval(c.as_slice())?.policy;
        let q = reference.eval(c.as_slice())?.policy;
        total += kl_step(&p, &q)?;
    }
    Ok(beta * total / T::from_len(contexts.len()))
}

/// One stored trajectory, everything the surrogate loss needs.
#[derive(Clone, Debug)]
pub struct SampleRecord<T> {
    pub contexts: Vec<Vector<T>>,
    pub zs: Vec<Perturbation<T>>,
    pub advantage: T,
    pub ref_log_q: T,
}

/// Trajectories collected for one update, grouped by prompt.
#[derive(Clone, Debug, Default)]
pub struct FrozenBatch<T> {
    pub groups: Vec<Vec<SampleRecord<T>>>,
}

impl<T: Real> FrozenBatch<T> {
    pub fn num_samples(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }

    pub fn num_contexts(&self) -> usize {
        self.groups.iter().flatten().map(|s| s.contexts.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub pg_loss: f64,
    pub kl_loss: f64,
    pub total: f64,
    pub mean_logratio_abs: f64,
    pub mean_sigma: f64,
    pub mean_kl: f64,
}

struct GroupPartial<T> {
    grads: SamplerGrads<T>,
    objective: T,
    kl: T,
    logratio_abs: T,
    sigma_sum: T,
}

fn group_partial<T: Real>(
    params: &SamplerParams<T>,
    reference: &SamplerParams<T>,
    samples: &[SampleRecord<T>],
    pg_weight: T,
    kl_weight: T,
    cfg: &TrainConfig,
) -> Result<GroupPartial<T>> {
    let clip = T::lit(cfg.logratio_clip);
    let eps_c = T::lit(cfg.clip_eps);
    let mut grads = SamplerGrads::zeros_like(params);
    let (mut objective, mut kl, mut lr_abs, mut sigma_sum) = (T::zero(), T::zero(), T::zero(), T::zero());
    let dim = params.dim();
    for s in samples {
        let evals = s
            .contexts
            .iter()
            .map(|c| params.eval(c.as_slice()))
            .collect::<Result<Vec<_>>>()?;
        let mut logq = T::zero();
        for (e, p) in evals.iter().zip(&s.zs) {
            logq += log_density(&e.policy, &p.z)?;
        }
        let log_ratio = logq - s.ref_log_q;
        lr_abs += log_ratio.abs();
        let ratio = density_ratio(logq, s.ref_log_q, clip);
        objective += clipped_objective(ratio, s.advantage, eps_c);
        // d(-w·o)/d logq = -w · do/dρ · ρ, zero where the log-ratio clamp binds
        let inside = log_ratio > -clip && log_ratio < clip;
        let dlogq = if inside {
            -pg_weight * clipped_objective_dratio(ratio, s.advantage, eps_c) * ratio
        } else {
            T::zero()
        };
        for (e, (c, p)) in evals.iter().zip(s.contexts.iter().zip(&s.zs)) {
            sigma_sum += e.policy.sigma.sum() / T::from_len(dim);
            let mut dmu = vec![T::zero(); dim];
            let mut dls = vec![T::zero(); dim];
            if dlogq != T::zero() {
                let (gm, gl) = log_density_grad(&e.policy, &p.z);
                for d in 0..dim {
                    dmu[d] += dlogq * gm[d];
                    dls[d] += dlogq * gl[d];
                }
            }
            if kl_weight != T::zero() {
                let q = reference.eval(c.as_slice())?.policy;
                kl += kl_step(&e.policy, &q)?;
                let (gm, gl) = kl_step_grad(&e.policy, &q);
                for d in 0..dim {
                    dmu[d] += kl_weight * gm[d];
                    dls[d] += kl_weight * gl[d];
                }
            }
            params.backward_acc(e, &dmu, &dls, &mut grads)?;
        }
    }
    Ok(GroupPartial { grads, objective, kl, logratio_abs: lr_abs, sigma_sum })
}

/// Loss `L_PG + L_KL` on a frozen batch and its gradient w.r.t. the policy.
///
/// Per-prompt partial gradients may be computed in parallel; they are summed
/// in prompt order, so the result does not depend on the worker count.
pub fn loss_and_grad<T: Real>(
    params: &SamplerParams<T>,
    reference: &SamplerParams<T>,
    batch: &FrozenBatch<T>,
    cfg: &TrainConfig,
) -> Result<(LossParts, SamplerGrads<T>)> {
    let n_samples = batch.num_samples();
    let n_ctx = batch.num_contexts();
    if n_samples == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let pg_weight = T::one() / T::from_len(n_samples);
    let kl_weight = if n_ctx > 0 { T::lit(cfg.kl_beta) / T::from_len(n_ctx) } else { T::zero() };
    let partials: Vec<Result<GroupPartial<T>>> = batch
        .groups
        .par_iter()
        .map(|g| group_partial(params, reference, g, pg_weight, kl_weight, cfg))
        .collect();
    let mut grads = SamplerGrads::zeros_like(params);
    let (mut objective, mut kl, mut lr_abs, mut sigma) = (T::zero(), T::zero(), T::zero(), T::zero());
    for p in partials {
        let p = p?;
        accumulate(&mut grads, &p.grads)?;
        objective += p.objective;
        kl += p.kl;
        lr_abs += p.logratio_abs;
        sigma += p.sigma_sum;
    }
    let pg = -objective * pg_weight;
    let mean_kl = if n_ctx > 0 { kl / T::from_len(n_ctx) } else { T::zero() };
    let klw = T::lit(cfg.kl_beta) * mean_kl;
    let parts = LossParts {
        pg_loss: pg.as_f64(),
        kl_loss: klw.as_f64(),
        total: (pg + klw).as_f64(),
        mean_logratio_abs: (lr_abs * pg_weight).as_f64(),
        mean_sigma: if n_ctx > 0 { (sigma / T::from_len(n_ctx)).as_f64() } else { 0.0 },
        mean_kl: mean_kl.as_f64(),
    };
    Ok((parts, grads))
}

/// Rolls groups, scores them, standardizes advantages per prompt and stores
/// the reference log-density of every trajectory.
pub fn collect_batch<T: Real>(
    bb: &Backbone<T>,
    params: &SamplerParams<T>,
    reference: &SamplerParams<T>,
    prompts: &[TaskInstance],
    cfg: &TrainConfig,
    reward: &RewardConfig,
    seed: u64,
    step: u64,
) -> Result<(FrozenBatch<T>, Vec<RolloutGroup<T>>, BatchRewards)> {
    let stream = format!("train/rollout/{step}");
    let results: Vec<Result<(Vec<SampleRecord<T>>, RolloutGroup<T>, f64, usize)>> = prompts
        .par_iter()
        .enumerate()
        .map(|(j, task)| {
            let mut rng = rng::stream(seed, &stream, j as u64);
            let group = roll_group(bb, params, task, cfg.group_size, &mut rng)?;
            let gt = task.answer as usize;
            let records = score_group(&group, reward, gt)?;
            let rewards: Vec<T> = records.iter().map(|r| r.reward).collect();
            let adv = normalize_advantages(&rewards)?;
            let mut samples = Vec::with_capacity(group.len());
            for (t, a) in group.trajectories.iter().zip(&adv) {
                if !t.valid {
                    continue;
                }
                let mut ref_log_q = T::zero();
                for (c, p) in t.contexts.iter().zip(&t.zs) {
                    ref_log_q += log_density(&reference.eval(c.as_slice())?.policy, &p.z)?;
                }
                if !ref_log_q.is_finite() {
                    continue;
                }
                samples.push(SampleRecord {
                    contexts: t.contexts.clone(),
                    zs: t.zs.clone(),
                    advantage: a.advantage,
                    ref_log_q,
                });
            }
            let reward_sum: f64 = rewards.iter().map(|r| r.as_f64()).sum();
            let correct = group.trajectories.iter().filter(|t| t.is_correct(gt)).count();
            Ok((samples, group, reward_sum, correct))
        })
        .collect();
    let mut batch = FrozenBatch { groups: Vec::with_capacity(prompts.len()) };
    let mut groups = Vec::with_capacity(prompts.len());
    let mut stats = BatchRewards::default();
    for r in results {
        let (samples, group, reward_sum, correct) = r?;
        stats.trajectories += samples.len();
        stats.reward_sum += reward_sum;
        stats.correct += correct;
        batch.groups.push(samples);
        groups.push(group);
    }
    Ok((batch, groups, stats))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BatchRewards {
    pub trajectories: usize,
    pub correct: usize,
    pub reward_sum: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub mean_reward: f64,
    pub group_accuracy: f64,
    pub pg_loss: f64,
    pub kl_loss: f64,
    pub mean_kl: f64,
    pub mean_sigma: f64,
    pub mean_logratio_abs: f64,
    pub lr: f64,
    pub skipped: bool,
}

/// Mutable state of a sampler training run.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub policy: SamplerParams<T>,
    pub reference: ReferenceSampler<T>,
    pub optimizer: Optimizer<T>,
    pub step: u64,
}

impl<T: Real> TrainState<T> {
    pub fn new(policy: SamplerParams<T>, cfg: &TrainConfig) -> Self {
        TrainState {
            reference: ReferenceSampler::from_policy(&policy, cfg.ema_decay),
            optimizer: Optimizer::new(cfg.optimizer, cfg.schedule()),
            policy,
            step: 0,
        }
    }
}

/// One optimization step on `prompts`.
///
/// A non-finite loss or gradient skips the parameter update (the step
/// counter still advances) and is reported through `StepMetrics::skipped`.
pub fn train_step<T: Real>(
    bb: &Backbone<T>,
    state: &mut TrainState<T>,
    prompts: &[TaskInstance],
    cfg: &TrainConfig,
    reward: &RewardConfig,
    seed: u64,
) -> Result<StepMetrics> {
    if !bb.is_frozen() {
        return Err(Error::Protocol("sampler training requires a frozen backbone".into()));
    }
    let step = state.step;
    let (batch, _, stats) =
        collect_batch(bb, &state.policy, &state.reference.params, prompts, cfg, reward, seed, step)?;
    let lr = state.optimizer.current_lr();
    let (parts, skipped) = if batch.num_samples() == 0 {
        log::warn!("step {step}: no valid trajectories, skipping update");
        state.optimizer.step += 1;
        (LossParts::default(), true)
    } else {
        let (parts, grads) = loss_and_grad(&state.policy, &state.reference.params, &batch, cfg)?;
        let skipped = !parts.total.is_finite() || !params_finite(&grads);
        if skipped {
            log::warn!("step {step}: non-finite loss {:.4e}, skipping update", parts.total);
            state.optimizer.step += 1;
        } else {
            state.optimizer.apply(&mut state.policy, &grads)?;
            state.reference.update(&state.policy)?;
        }
        (parts, skipped)
    };
    state.step += 1;
    Ok(StepMetrics {
        step,
        mean_reward: stats.reward_sum / stats.trajectories.max(1) as f64,
        group_accuracy: stats.correct as f64 / stats.trajectories.max(1) as f64,
        pg_loss: parts.pg_loss,
        kl_loss: parts.kl_loss,
        mean_kl: parts.mean_kl,
        mean_sigma: parts.mean_sigma,
        mean_logratio_abs: parts.mean_logratio_abs,
        lr,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantage_examples() {
        let a = normalize_advantages(&[1.0, -1.0]).unwrap();
        assert_eq!(a[0].advantage, 1.0);
        assert_eq!(a[1].advantage, -1.0);
        let z = normalize_advantages(&[0.3, 0.3, 0.3]).unwrap();
        assert!(z.iter().all(|r| r.advantage == 0.0));
        let v = normalize_advantages(&[1.2, -0.9, 1.0, -1.1, 0.8]).unwrap();
        let mean: f64 = v.iter().map(|r| r.advantage).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12);
        assert!(normalize_advantages(&[1.0]).is_err());
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(density_ratio(-3.2, -3.2, 20.0), 1.0);
        assert_eq!(density_ratio(50.0, 0.0, 20.0), 20.0f64.exp());
        assert_eq!(density_ratio(-50.0, 0.0, 20.0), (-20.0f64).exp());
        assert!((density_ratio(-0.5f64, 0.0, 20.0) - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn pg_examples() {
        assert_eq!(pg_loss(&[2.0], &[1.0], 0.2).unwrap(), -1.2);
        assert_eq!(pg_loss(&[0.5], &[-1.0], 0.2).unwrap(), 0.8);
        let adv = normalize_advantages(&[1.0, -1.0, 0.5, 0.2]).unwrap();
        let a: Vec<f64> = adv.iter().map(|r| r.advantage).collect();
        assert!(pg_loss(&[1.0; 4], &a, 0.2).unwrap().abs() < 1e-12);
        assert!(pg_loss(&[1.0], &[1.0, 2.0], 0.2).is_err());
    }

    #[test]
    fn ema_examples() {
        let p = SamplerParams::<f64>::init(2, 1, &Default::default());
        let mut r = p.clone();
        crate::mathkernel::zero_params(&mut r);
        assert_eq!(ema_update(&r, &p, 1.0).unwrap(), r);
        assert_eq!(ema_update(&r, &p, 0.0).unwrap(), p);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { clip_eps: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { group_size: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { kl_beta: -1.0, ..Default::default() }.validate().is_err());
    }
}
