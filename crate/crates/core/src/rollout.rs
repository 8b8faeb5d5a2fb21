//! Perturbed latent trajectories.
//!
//! For steps `k = 1..K-1` the current state `c_k` is perturbed,
//! `h̃_k = c_k + z_k`, and fed to the backbone transition. Step `K` is never
//! perturbed. The answer is decoded greedily from the final distribution.

use rand::Rng;

use crate::backbone::{Backbone, LatentState, TaskInstance};
use crate::error::{Error, Result};
use crate::mathkernel::Vector;
use crate::sampler::{
    log_density, perturbation_from_eps, PolicyEval, Perturbation, SamplerParams, StepPolicy,
};
use crate::scalar::Real;

#[derive(Clone, Debug)]
pub struct Trajectory<T> {
    /// One perturbation per latent step `1..K-1`.
    pub zs: Vec<Perturbation<T>>,
    /// The states `c_k` the perturbations were added to.
    pub contexts: Vec<Vector<T>>,
    /// Final (unperturbed) state `h_K`.
    pub final_state: Option<LatentState<T>>,
    /// Greedy answer; `None` for an invalid trajectory.
    pub answer: Option<usize>,
    /// `log p(answer)`, the confidence used by reward shaping.
    pub answer_logprob: T,
    /// Probability of the ground-truth answer.
    pub gt_prob: T,
    pub answer_dist: Vector<T>,
    /// Sum of dimension-averaged step log-densities under the sampling policy
    /// (zero for strategies without a density).
    pub log_density: T,
    /// Per-step `RMS(mu) / RMS(sigma)`; empty for strategies without a policy.
    pub step_snr: Vec<T>,
    pub valid: bool,
}

impl<T: Real> Trajectory<T> {
    pub fn is_correct(&self, gt: usize) -> bool {
        self.answer == Some(gt)
    }

    fn invalid(vocab: usize, zs: Vec<Perturbation<T>>, contexts: Vec<Vector<T>>) -> Self {
        Trajectory {
            zs,
            contexts,
            final_state: None,
            answer: None,
            answer_logprob: T::neg_infinity(),
            gt_prob: T::zero(),
            answer_dist: Vector::filled(vocab, T::one() / T::from_len(vocab)),
            log_density: T::zero(),
            step_snr: Vec::new(),
            valid: false,
        }
    }
}

/// What an injector returns for one latent step.
pub struct Injection<T> {
    pub perturbation: Perturbation<T>,
    /// Perturbed state `h̃_k`.
    pub h_tilde: Vector<T>,
    pub log_density: T,
    pub snr: Option<T>,
}

/// Runs one trajectory, asking `inject(k, c_k)` for each perturbed step.
pub fn roll_with<T, F>(bb: &Backbone<T>, task: &TaskInstance, mut inject: F) -> Result<Trajectory<T>>
where
    T: Real,
    F: FnMut(usize, &Vector<T>) -> Result<Injection<T>>,
{
    let k_total = bb.steps();
    let mut state = bb.initial_state(task)?;
    let mut zs = Vec::with_capacity(k_total - 1);
    let mut contexts = Vec::with_capacity(k_total - 1);
    let mut log_q = T::zero();
    let mut snr = Vec::new();
    while state.step_index < k_total {
        let inj = match inject(state.step_index, &state.h) {
            Ok(inj) => inj,
            Err(Error::Input(_)) => return Ok(Trajectory::invalid(bb.vocab(), zs, contexts)),
            Err(e) => return Err(e),
        };
        contexts.push(state.h.clone());
        zs.push(inj.perturbation);
        log_q += inj.log_density;
        snr.extend(inj.snr);
        if !inj.h_tilde.is_finite() {
            return Ok(Trajectory::invalid(bb.vocab(), zs, contexts));
        }
        let perturbed = LatentState { h: inj.h_tilde, step_index: state.step_index };
        state = match bb.latent_step(&perturbed) {
            Ok(s) => s,
            Err(Error::Input(_)) => return Ok(Trajectory::invalid(bb.vocab(), zs, contexts)),
            Err(e) => return Err(e),
        };
    }
    let dist = match bb.answer_dist(&state) {
        Ok(d) => d,
        Err(Error::Input(_)) => return Ok(Trajectory::invalid(bb.vocab(), zs, contexts)),
        Err(e) => return Err(e),
    };
    let answer = dist.argmax();
    let gt = task.answer as usize;
    Ok(Trajectory {
        zs,
        contexts,
        final_state: Some(state),
        answer: Some(answer),
        answer_logprob: dist[answer].ln(),
        gt_prob: dist[gt],
        answer_dist: dist,
        log_density: log_q,
        step_snr: snr,
        valid: true,
    })
}

fn gts_injection<T: Real, R: Rng + ?Sized>(
    params: &SamplerParams<T>,
    k: usize,
    c: &Vector<T>,
    sigma_scale: T,
    rng: &mut R,
) -> Result<Injection<T>> {
    let eval: PolicyEval<T> = params.eval(c.as_slice())?;
    let eps = Vector::from_fn(c.dim(), |_| crate::rng::normal::<T, _>(rng));
    let policy = if sigma_scale == T::one() {
        eval.policy
    } else {
        StepPolicy { sigma: eval.policy.sigma.scale(sigma_scale), mu: eval.policy.mu }
    };
    let perturbation = perturbation_from_eps(&policy, eps, k);
    let lq = log_density(&policy, &perturbation.z)?;
    Ok(Injection {
        h_tilde: c.add(&perturbation.z)?,
        log_density: lq,
        snr: Some(policy.snr()),
        perturbation,
    })
}

/// One trajectory under the Gaussian thought sampler.
pub fn roll_one<T: Real, R: Rng + ?Sized>(
    bb: &Backbone<T>,
    params: &SamplerParams<T>,
    task: &TaskInstance,
    rng: &mut R,
) -> Result<Trajectory<T>> {
    roll_one_scaled(bb, params, task, T::one(), rng)
}

/// As [`roll_one`] with every `sigma` multiplied by `sigma_scale`.
pub fn roll_one_scaled<T: Real, R: Rng + ?Sized>(
    bb: &Backbone<T>,
    params: &SamplerParams<T>,
    task: &TaskInstance,
    sigma_scale: T,
    rng: &mut R,
) -> Result<Trajectory<T>> {
    check_rollout_preconditions(bb, params)?;
    roll_with(bb, task, |k, c| gts_injection(params, k, c, sigma_scale, rng))
}

/// The zero-perturbation trajectory, with its log-density under `params`.
pub fn roll_deterministic<T: Real>(
    bb: &Backbone<T>,
    params: Option<&SamplerParams<T>>,
    task: &TaskInstance,
) -> Result<Trajectory<T>> {
    roll_with(bb, task, |k, c| {
        let z = Vector::zeros(c.dim());
        match params {
            Some(p) => {
                let policy = p.eval(c.as_slice())?.policy;
                let eps = Vector::from_fn(c.dim(), |d| (z[d] - policy.mu[d]) / policy.sigma[d]);
                Ok(Injection {
                    log_density: log_density(&policy, &z)?,
                    snr: Some(policy.snr()),
                    perturbation: Perturbation { z, eps, step_index: k },
                    h_tilde: c.clone(),
                })
            }
            None => Ok(Injection {
                perturbation: Perturbation { z: z.clone(), eps: z, step_index: k },
                h_tilde: c.clone(),
                log_density: T::zero(),
                snr: None,
            }),
        }
    })
}

fn check_rollout_preconditions<T: Real>(bb: &Backbone<T>, params: &SamplerParams<T>) -> Result<()> {
    if !bb.is_frozen() {
        return Err(Error::Protocol("rollouts require a frozen backbone".into()));
    }
    if params.dim() != bb.latent_dim() {
        return Err(Error::shape(format!(
            "sampler dim {} != backbone latent dim {}",
            params.dim(),
            bb.latent_dim()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RolloutGroup<T> {
    pub prompt: TaskInstance,
    pub trajectories: Vec<Trajectory<T>>,
    pub deterministic: Trajectory<T>,
}

impl<T: Real> RolloutGroup<T> {
    pub fn gt(&self) -> usize {
        self.prompt.answer as usize
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// `n` independent sampler trajectories plus the deterministic one.
pub fn roll_group<T: Real, R: Rng + ?Sized>(
    bb: &Backbone<T>,
    params: &SamplerParams<T>,
    task: &TaskInstance,
    n: usize,
    rng: &mut R,
) -> Result<RolloutGroup<T>> {
    if n == 0 {
        return Err(Error::Input("group size must be >= 1".into()));
    }
    check_rollout_preconditions(bb, params)?;
    let deterministic = roll_deterministic(bb, Some(params), task)?;
    let trajectories = (0..n)
        .map(|_| roll_one(bb, params, task, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutGroup { prompt: task.clone(), trajectories, deterministic })
}
