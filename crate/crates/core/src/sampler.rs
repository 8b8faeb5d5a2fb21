//! Gaussian thought sampler: a context-conditioned diagonal Gaussian over
//! additive latent perturbations.
//!
//! Two SiLU heads map the context `c` to a mean and a raw log standard
//! deviation; the log-sigma output is hard-clamped from below before
//! exponentiation. Log-densities and KL terms are averaged over dimensions
//! rather than summed.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointHeader};
use crate::error::{Error, Result};
use crate::mathkernel::{
    all_finite, prefixed, scale_params, ForwardCache, Matrix, Params, TensorView, TwoLayerNet,
    TwoLayerNetGrads, Vector,
};
use crate::rng;
use crate::scalar::Real;

/// Default floor on the emitted log standard deviation.
pub const LOGSIGMA_MIN: f64 = -2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerInit {
    /// Multiplier applied to the Xavier-initialized output layer of the mean head.
    pub mu_out_scale: f64,
    /// Multiplier applied to the Xavier-initialized output layer of the log-sigma head.
    pub logsigma_out_scale: f64,
    /// Initial output bias of the log-sigma head.
    pub logsigma_bias: f64,
}

impl Default for SamplerInit {
    fn default() -> Self {
        SamplerInit { mu_out_scale: 1.0, logsigma_out_scale: 1.0, logsigma_bias: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerParams<T> {
    pub mu_head: TwoLayerNet<T>,
    pub logsigma_head: TwoLayerNet<T>,
    pub logsigma_min: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerGrads<T> {
    pub mu_head: TwoLayerNetGrads<T>,
    pub logsigma_head: TwoLayerNetGrads<T>,
}

macro_rules! sampler_tensors {
    ($ty:ident) => {
        impl<T: Real> Params<T> for $ty<T> {
            fn tensors(&self) -> Vec<TensorView<'_, T>> {
                let mut v = prefixed("mu_head", self.mu_head.tensors());
                v.extend(prefixed("logsigma_head", self.logsigma_head.tensors()));
                v
            }

            fn tensors_mut(&mut self) -> Vec<&mut [T]> {
                let mut v = self.mu_head.tensors_mut();
                v.extend(self.logsigma_head.tensors_mut());
                v
            }
        }
    };
}

sampler_tensors!(SamplerParams);
sampler_tensors!(SamplerGrads);

impl<T: Real> SamplerGrads<T> {
    pub fn zeros_like(p: &SamplerParams<T>) -> Self {
        SamplerGrads {
            mu_head: TwoLayerNetGrads::zeros_like(&p.mu_head),
            logsigma_head: TwoLayerNetGrads::zeros_like(&p.logsigma_head),
        }
    }
}

/// Mean and standard deviation of one step's Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPolicy<T> {
    pub mu: Vector<T>,
    pub sigma: Vector<T>,
}

impl<T: Real> StepPolicy<T> {
    pub fn new(mu: Vector<T>, sigma: Vector<T>) -> Result<Self> {
        if mu.dim() != sigma.dim() {
            return Err(Error::shape("mu and sigma dims differ"));
        }
        if sigma.iter().any(|&s| s <= T::zero()) {
            return Err(Error::Input("sigma must be positive".into()));
        }
        Ok(StepPolicy { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.dim()
    }

    /// `sqrt(mean mu²) / sqrt(mean sigma²)`
    pub fn snr(&self) -> T {
        self.mu.rms() / self.sigma.rms()
    }
}

/// A sampled perturbation with the standard-normal draw that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation<T> {
    pub z: Vector<T>,
    pub eps: Vector<T>,
    pub step_index: usize,
}

/// A policy evaluation that keeps what the backward pass needs.
#[derive(Clone, Debug)]
pub struct PolicyEval<T> {
    pub policy: StepPolicy<T>,
    /// Clamped log-sigma.
    pub log_sigma: Vec<T>,
    /// Entries whose raw log-sigma fell below the floor (zero gradient there).
    pub clamped: Vec<bool>,
    mu_cache: ForwardCache<T>,
    ls_cache: ForwardCache<T>,
}

impl<T: Real> SamplerParams<T> {
    /// Both heads `D -> D -> D`, Xavier weights, zero biases, adjusted by `init`.
    pub fn init(dim: usize, seed: u64, init: &SamplerInit) -> Self {
        let mut rng = rng::stream(seed, "init/sampler", 0);
        let mut mu_head = TwoLayerNet::xavier(dim, dim, dim, &mut rng);
        let mut logsigma_head = TwoLayerNet::xavier(dim, dim, dim, &mut rng);
        scale_matrix(&mut mu_head.w2, T::lit(init.mu_out_scale));
        scale_matrix(&mut logsigma_head.w2, T::lit(init.logsigma_out_scale));
        logsigma_head.b2 = Vector::filled(dim, T::lit(init.logsigma_bias));
        SamplerParams { mu_head, logsigma_head, logsigma_min: T::lit(LOGSIGMA_MIN) }
    }

    pub fn dim(&self) -> usize {
        self.mu_head.input_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for head in [&self.mu_head, &self.logsigma_head] {
            if head.input_dim() != d || head.output_dim() != d {
                return Err(Error::shape("sampler heads must both map R^D -> R^D"));
            }
        }
        Ok(())
    }

    pub fn eval(&self, c: &[T]) -> Result<PolicyEval<T>> {
        if c.len() != self.dim() {
            return Err(Error::shape(format!(
                "context dim {} != sampler dim {}",
                c.len(),
                self.dim()
            )));
        }
        if !all_finite(c) {
            return Err(Error::Input("non-finite sampler context".into()));
        }
        let (mu, mu_cache) = self.mu_head.forward_slice(c)?;
        let (raw, ls_cache) = self.logsigma_head.forward_slice(c)?;
        let clamped: Vec<bool> = raw.iter().map(|&r| r < self.logsigma_min).collect();
        let log_sigma: Vec<T> = raw.iter().map(|&r| r.max(self.logsigma_min)).collect();
        let sigma = Vector::from_vec_unchecked(log_sigma.iter().map(|l| l.exp()).collect());
        Ok(PolicyEval {
            policy: StepPolicy { mu, sigma },
            log_sigma,
            clamped,
            mu_cache,
            ls_cache,
        })
    }

    /// Backpropagates gradients w.r.t. `mu` and the clamped log-sigma into `grads`.
    pub fn backward_acc(
        &self,
        eval: &PolicyEval<T>,
        dmu: &[T],
        dlog_sigma: &[T],
        grads: &mut SamplerGrads<T>,
    ) -> Result<()> {
        self.mu_head.backward_acc(&eval.mu_cache, dmu, &mut grads.mu_head)?;
        if dlog_sigma.len() != eval.clamped.len() {
            return Err(Error::shape("log-sigma gradient has wrong dim"));
        }
        let draw: Vec<T> = dlog_sigma
            .iter()
            .zip(&eval.clamped)
            .map(|(&g, &c)| if c { T::zero() } else { g })
            .collect();
        self.logsigma_head.backward_acc(&eval.ls_cache, &draw, &mut grads.logsigma_head)?;
        Ok(())
    }

    pub fn header_meta(&self, training_step: u64, ema_decay: f64) -> serde_json::Map<String, serde_json::Value> {
        let mut meta = serde_json::Map::new();
        meta.insert("D".into(), self.dim().into());
        meta.insert("logsigma_min".into(), self.logsigma_min.as_f64().into());
        meta.insert("training_step".into(), training_step.into());
        meta.insert("ema_decay".into(), ema_decay.into());
        meta
    }

    pub fn save(&self, stem: &Path, kind: &str, seed: u64, training_step: u64, ema_decay: f64) -> Result<CheckpointHeader> {
        checkpoint::save(stem, kind, seed, self, self.header_meta(training_step, ema_decay))
    }

    pub fn load(stem: &Path, kind: &str) -> Result<(Self, CheckpointHeader)> {
        let header = checkpoint::read_header(stem)?;
        let dim = header.meta_u64("D")? as usize;
        let mut params = SamplerParams::init(dim, 0, &SamplerInit::default());
        params.logsigma_min = T::lit(header.meta_f64("logsigma_min")?);
        let header = checkpoint::load_into(stem, kind, &mut params)?;
        Ok((params, header))
    }
}

fn scale_matrix<T: Real>(m: &mut Matrix<T>, s: T) {
    for v in m.as_mut_slice() {
        *v *= s;
    }
}

/// `mu = mu_head(c)`, `sigma = exp(max(logsigma_head(c), logsigma_min))`.
pub fn policy_at<T: Real>(params: &SamplerParams<T>, c: &Vector<T>) -> Result<StepPolicy<T>> {
    params.eval(c.as_slice()).map(|e| e.policy)
}

/// Reparameterized draw `z = mu + sigma ⊙ eps`, `eps ~ N(0, I)`.
pub fn sample_z<T: Real, R: Rng + ?Sized>(p: &StepPolicy<T>, step_index: usize, rng: &mut R) -> Perturbation<T> {
    let eps = Vector::from_fn(p.dim(), |_| rng::normal::<T, _>(rng));
    perturbation_from_eps(p, eps, step_index)
}

pub fn perturbation_from_eps<T: Real>(p: &StepPolicy<T>, eps: Vector<T>, step_index: usize) -> Perturbation<T> {
    let z = Vector::from_fn(p.dim(), |d| p.mu[d] + p.sigma[d] * eps[d]);
    Perturbation { z, eps, step_index }
}

/// Per-dimension average of the diagonal Gaussian log-density:
/// `(1/D) Σ_d -½[((z_d - μ_d)/σ_d)² + 2 log σ_d + log 2π]`.
pub fn log_density<T: Real>(p: &StepPolicy<T>, z: &Vector<T>) -> Result<T> {
    if z.dim() != p.dim() {
        return Err(Error::shape("perturbation and policy dims differ"));
    }
    Ok(log_density_slices(p.mu.as_slice(), p.sigma.as_slice(), z.as_slice()))
}

fn log_density_slices<T: Real>(mu: &[T], sigma: &[T], z: &[T]) -> T {
    let half = T::lit(0.5);
    let log_2pi = (T::lit(2.0) * T::PI()).ln();
    let mut acc = T::zero();
    for ((&m, &s), &x) in mu.iter().zip(sigma).zip(z) {
        let e = (x - m) / s;
        acc += -half * (e * e + T::lit(2.0) * s.ln() + log_2pi);
    }
    acc / T::from_len(mu.len())
}

/// Gradient of [`log_density`] w.r.t. `mu` and the clamped log-sigma.
pub fn log_density_grad<T: Real>(p: &StepPolicy<T>, z: &Vector<T>) -> (Vec<T>, Vec<T>) {
    let inv_d = T::one() / T::from_len(p.dim());
    let mut dmu = Vec::with_capacity(p.dim());
    let mut dls = Vec::with_capacity(p.dim());
    for d in 0..p.dim() {
        let s = p.sigma[d];
        let diff = z[d] - p.mu[d];
        dmu.push(diff / (s * s) * inv_d);
        dls.push((diff * diff / (s * s) - T::one()) * inv_d);
    }
    (dmu, dls)
}

/// Sum over steps of per-step (dimension-averaged) log-densities, evaluated
/// at the contexts the trajectory actually visited.
pub fn traj_log_density<T: Real>(
    params: &SamplerParams<T>,
    contexts: &[Vector<T>],
    zs: &[Perturbation<T>],
) -> Result<T> {
    if contexts.len() != zs.len() {
        return Err(Error::shape(format!(
            "{} contexts but {} perturbations",
            contexts.len(),
            zs.len()
        )));
    }
    let mut total = T::zero();
    for (c, p) in contexts.iter().zip(zs) {
        total += log_density(&policy_at(params, c)?, &p.z)?;
    }
    Ok(total)
}

/// Dimension-averaged `KL(p ‖ q)` between diagonal Gaussians.
pub fn kl_step<T: Real>(p: &StepPolicy<T>, q: &StepPolicy<T>) -> Result<T> {
    if p.dim() != q.dim() {
        return Err(Error::shape("KL between policies of different dims"));
    }
    let half = T::lit(0.5);
    let mut acc = T::zero();
    for d in 0..p.dim() {
        let (sp, sq) = (p.sigma[d], q.sigma[d]);
        let dm = p.mu[d] - q.mu[d];
        acc += (sq / sp).ln() + (sp * sp + dm * dm) / (T::lit(2.0) * sq * sq) - half;
    }
    Ok(acc / T::from_len(p.dim()))
}

/// Gradient of [`kl_step`] w.r.t. `p`'s mean and log-sigma (q held fixed).
pub fn kl_step_grad<T: Real>(p: &StepPolicy<T>, q: &StepPolicy<T>) -> (Vec<T>, Vec<T>) {
    let inv_d = T::one() / T::from_len(p.dim());
    let mut dmu = Vec::with_capacity(p.dim());
    let mut dls = Vec::with_capacity(p.dim());
    for d in 0..p.dim() {
        let (sp, sq) = (p.sigma[d], q.sigma[d]);
        dmu.push((p.mu[d] - q.mu[d]) / (sq * sq) * inv_d);
        dls.push((sp * sp / (sq * sq) - T::one()) * inv_d);
    }
    (dmu, dls)
}

/// Scales every gradient entry; convenience for mean-reductions.
pub fn scale_grads<T: Real>(g: &mut SamplerGrads<T>, s: T) {
    scale_params(g, s);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(mu: &[f64], sigma: &[f64]) -> StepPolicy<f64> {
        StepPolicy::new(Vector::new(mu.to_vec()).unwrap(), Vector::new(sigma.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn zero_heads_respect_floor() {
        let mut p = SamplerParams::<f64>::init(4, 0, &SamplerInit::default());
        p.mu_head = TwoLayerNet::zeros(4, 4, 4);
        p.logsigma_head = TwoLayerNet::zeros(4, 4, 4);
        p.mu_head.b2 = Vector::from_fn(4, |i| i as f64);
        p.logsigma_head.b2 = Vector::new(vec![-5.0, -2.0, 0.0, 1.0]).unwrap();
        let s = policy_at(&p, &Vector::from_fn(4, |i| i as f64 * 0.3)).unwrap();
        assert_eq!(s.mu, Vector::from_fn(4, |i| i as f64));
        assert!((s.sigma[0] - 0.135335).abs() < 1e-6);
        assert_eq!(s.sigma[0], (-2.0f64).exp());
        assert_eq!(s.sigma[1], (-2.0f64).exp());
        assert_eq!(s.sigma[2], 1.0);
        assert_eq!(s.sigma[3], 1.0f64.exp());
    }

    #[test]
    fn non_finite_context_rejected() {
        let p = SamplerParams::<f64>::init(3, 0, &SamplerInit::default());
        let bad = Vector::from_vec_unchecked(vec![0.0, f64::NAN, 1.0]);
        assert!(matches!(policy_at(&p, &bad), Err(Error::Input(_))));
        assert!(matches!(policy_at(&p, &Vector::zeros(2)), Err(Error::Shape(_))));
    }

    #[test]
    fn reparameterization_identities() {
        let p = policy(&[0.5, -1.0], &[0.2, 2.0]);
        let at_mean = perturbation_from_eps(&p, Vector::zeros(2), 1);
        assert_eq!(at_mean.z, p.mu);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pert = sample_z(&p, 1, &mut rng);
        for d in 0..2 {
            assert_eq!(pert.z[d], p.mu[d] + p.sigma[d] * pert.eps[d]);
        }
    }

    #[test]
    fn log_density_examples() {
        let p = policy(&[0.3, -0.2], &[1.0, 1.0]);
        let v = log_density(&p, &p.mu).unwrap();
        assert!((v + 0.918939).abs() < 1e-6);
        let p1 = policy(&[0.0], &[1.0]);
        let v1 = log_density(&p1, &Vector::new(vec![1.0]).unwrap()).unwrap();
        assert!((v1 + 1.418939).abs() < 1e-6);
    }

    #[test]
    fn kl_examples() {
        let p = policy(&[0.1, 0.4], &[0.7, 1.3]);
        assert_eq!(kl_step(&p, &p).unwrap(), 0.0);
        let v = kl_step(&policy(&[1.0], &[1.0]), &policy(&[0.0], &[1.0])).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        let v = kl_step(&policy(&[0.0], &[1.0]), &policy(&[0.0], &[2.0])).unwrap();
        assert!((v - 0.318147).abs() < 1e-6);
        assert!((v - (2.0f64.ln() + 0.125 - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn traj_density_examples() {
        let mut p = SamplerParams::<f64>::init(3, 0, &SamplerInit::default());
        p.mu_head = TwoLayerNet::zeros(3, 3, 3);
        p.logsigma_head = TwoLayerNet::zeros(3, 3, 3);
        let contexts: Vec<Vector<f64>> = (0..5).map(|k| Vector::filled(3, k as f64)).collect();
        let zs: Vec<Perturbation<f64>> = (0..5)
            .map(|k| Perturbation { z: Vector::zeros(3), eps: Vector::zeros(3), step_index: k + 1 })
            .collect();
        let v = traj_log_density(&p, &contexts, &zs).unwrap();
        assert!((v - 5.0 * -0.918939).abs() < 1e-5);
        let single = traj_log_density(&p, &contexts[..1], &zs[..1]).unwrap();
        let direct = log_density(&policy_at(&p, &contexts[0]).unwrap(), &zs[0].z).unwrap();
        assert_eq!(single, direct);
        assert!(matches!(traj_log_density(&p, &contexts[..2], &zs[..1]), Err(Error::Shape(_))));
    }

    #[test]
    fn unit_jacobian_shift() {
        let p = policy(&[0.1, -0.3, 2.0], &[0.5, 1.5, 0.2]);
        let z = Vector::new(vec![0.4, 0.1, 1.7]).unwrap();
        let shift = Vector::new(vec![3.0, -1.25, 0.5]).unwrap();
        let shifted = StepPolicy::new(p.mu.add(&shift).unwrap(), p.sigma.clone()).unwrap();
        let a = log_density(&p, &z).unwrap();
        let b = log_density(&shifted, &z.add(&shift).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn clamped_entries_get_no_gradient() {
        let mut p = SamplerParams::<f64>::init(2, 0, &SamplerInit::default());
        p.logsigma_head = TwoLayerNet::zeros(2, 2, 2);
        p.logsigma_head.b2 = Vector::new(vec![-3.0, 0.5]).unwrap();
        let e = p.eval(&[0.2, -0.4]).unwrap();
        assert_eq!(e.clamped, vec![true, false]);
        let mut g = SamplerGrads::zeros_like(&p);
        p.backward_acc(&e, &[0.0, 0.0], &[1.0, 1.0], &mut g).unwrap();
        assert_eq!(g.logsigma_head.b2.as_slice(), &[0.0, 1.0]);
    }
}
