//! Perturbation strategies for stochastic latent inference.
//!
//! Every strategy acts on latent steps `1..K-1` only; the final step and the
//! answer readout stay deterministic.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::Rng;

use crate::backbone::{Backbone, TaskInstance};
use crate::error::{Error, Result};
use crate::mathkernel::Vector;
use crate::rollout::{roll_deterministic, roll_one, roll_with, Injection, Trajectory};
use crate::sampler::{Perturbation, SamplerParams};
use crate::scalar::Real;

/// A strategy as named on the command line or in a config file.
#[derive(Clone, Debug, PartialEq)]
pub enum StrategySpec {
    Deterministic,
    Dropout(f64),
    Gaussian(f64),
    /// `gts` alone means "the sampler checkpoint of this run".
    Gts(Option<PathBuf>),
}

fn fmt_num(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{x:.1}")
    } else {
        format!("{x}")
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrategySpec::Deterministic => write!(f, "deterministic"),
            StrategySpec::Dropout(p) => write!(f, "dropout:{}", fmt_num(*p)),
            StrategySpec::Gaussian(s) => write!(f, "gaussian:{}", fmt_num(*s)),
            StrategySpec::Gts(None) => write!(f, "gts"),
            StrategySpec::Gts(Some(p)) => write!(f, "gts:{}", p.display()),
        }
    }
}

impl FromStr for StrategySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>| -> Result<f64> {
            let a = a.ok_or_else(|| Error::UnsupportedStrategy(format!("{s}: missing parameter")))?;
            a.parse::<f64>()
                .map_err(|_| Error::UnsupportedStrategy(format!("{s}: bad number {a:?}")))
        };
        let spec = match kind {
            "deterministic" if arg.is_none() => StrategySpec::Deterministic,
            "dropout" => StrategySpec::Dropout(num(arg)?),
            "gaussian" => StrategySpec::Gaussian(arg.map(|_| num(arg)).transpose()?.unwrap_or(1.0)),
            "gts" => StrategySpec::Gts(arg.filter(|a| !a.is_empty()).map(PathBuf::from)),
            _ => return Err(Error::UnsupportedStrategy(s.to_string())),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl StrategySpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StrategySpec::Dropout(p) if !(0.0..1.0).contains(&p) => {
                Err(Error::UnsupportedStrategy(format!("dropout p must be in [0, 1), got {p}")))
            }
            StrategySpec::Gaussian(s) if !(s > 0.0 && s.is_finite()) => {
                Err(Error::UnsupportedStrategy(format!("gaussian scale must be > 0, got {s}")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_gts(&self) -> bool {
        matches!(self, StrategySpec::Gts(_))
    }
}

/// A ready-to-run strategy.
#[derive(Clone, Debug)]
pub enum PerturbationStrategy<T> {
    Deterministic,
    Dropout(f64),
    StandardGaussian(f64),
    Gts(SamplerParams<T>),
}

impl<T: Real> PerturbationStrategy<T> {
    /// Builds a strategy from its spec; `gts` requires `sampler`.
    pub fn from_spec(spec: &StrategySpec, sampler: Option<&SamplerParams<T>>) -> Result<Self> {
        spec.validate()?;
        Ok(match *spec {
            StrategySpec::Deterministic => PerturbationStrategy::Deterministic,
            StrategySpec::Dropout(p) => PerturbationStrategy::Dropout(p),
            StrategySpec::Gaussian(s) => PerturbationStrategy::StandardGaussian(s),
            StrategySpec::Gts(_) => PerturbationStrategy::Gts(
                sampler
                    .cloned()
                    .ok_or_else(|| Error::Config("gts strategy needs a sampler checkpoint".into()))?,
            ),
        })
    }

    pub fn sampler(&self) -> Option<&SamplerParams<T>> {
        match self {
            PerturbationStrategy::Gts(p) => Some(p),
            _ => None,
        }
    }
}

fn injection<T: Real>(c: &Vector<T>, h: Vector<T>, k: usize) -> Result<Injection<T>> {
    let z = h.sub(c)?;
    Ok(Injection {
        perturbation: Perturbation { eps: z.clone(), z, step_index: k },
        h_tilde: h,
        log_density: T::zero(),
        snr: None,
    })
}

/// Applies a heuristic strategy to one state.
///
/// For GTS this draws at step 0 and records no density; rollouts go through
/// [`roll_strategy`] instead.
pub fn perturb<T: Real, R: Rng + ?Sized>(strategy: &PerturbationStrategy<T>, h: &Vector<T>, rng: &mut R) -> Result<Vector<T>> {
    match strategy {
        PerturbationStrategy::Deterministic => Ok(h.clone()),
        PerturbationStrategy::Dropout(p) => {
            let keep = 1.0 - p;
            let inv = T::lit(1.0 / keep);
            let v = h.iter().map(|&x| if rng.random::<f64>() < keep { x * inv } else { T::zero() }).collect();
            Ok(Vector::from_vec_unchecked(v))
        }
        PerturbationStrategy::StandardGaussian(s) => {
            let s = T::lit(*s);
            let v = h.iter().map(|&x| x + s * crate::rng::normal::<T, _>(rng)).collect();
            Ok(Vector::from_vec_unchecked(v))
        }
        PerturbationStrategy::Gts(params) => {
            let policy = params.eval(h.as_slice())?.policy;
            let z = crate::sampler::sample_z(&policy, 0, rng).z;
            h.add(&z)
        }
    }
}

/// One trajectory under `strategy`.
pub fn roll_strategy<T: Real, R: Rng + ?Sized>(
    bb: &Backbone<T>,
    strategy: &PerturbationStrategy<T>,
    task: &TaskInstance,
    rng: &mut R,
) -> Result<Trajectory<T>> {
    match strategy {
        PerturbationStrategy::Deterministic => roll_deterministic(bb, None, task),
        PerturbationStrategy::Gts(params) => roll_one(bb, params, task, rng),
        _ => roll_with(bb, task, |k, c| {
            let h = perturb(strategy, c, &mut *rng)?;
            injection(c, h, k)
        }),
    }
}
