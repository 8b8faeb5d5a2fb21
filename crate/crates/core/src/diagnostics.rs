//! Sampling-quality metrics over evaluated rollout groups.
//!
//! A group's trajectories are ordered `[τ_det, τ_1, τ_2, ...]`; the budget-`N`
//! prefix is the first `N` of that list, so `N = 1` is deterministic
//! inference. pass@N and diversity use the whole prefix. Sampling gain and JS
//! use its stochastic members and are zero at `N = 1`. All logs are natural.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::Trajectory;
use crate::scalar::Real;

pub const LOG_ODDS_CLAMP: f64 = 1e-9;
pub const DEFAULT_SG_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BUDGETS: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];

pub fn log_odds(p: f64) -> f64 {
    let p = p.clamp(LOG_ODDS_CLAMP, 1.0 - LOG_ODDS_CLAMP);
    (p / (1.0 - p)).ln()
}

/// What the metrics need from one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajSummary {
    pub answer: Option<usize>,
    pub gt_prob: f64,
    pub dist: Vec<f64>,
    pub step_snr: Vec<f64>,
}

impl TrajSummary {
    pub fn from_trajectory<T: Real>(t: &Trajectory<T>) -> Self {
        TrajSummary {
            answer: t.answer,
            gt_prob: t.gt_prob.as_f64(),
            dist: t.answer_dist.iter().map(|p| p.as_f64()).collect(),
            step_snr: t.step_snr.iter().map(|s| s.as_f64()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalGroup {
    pub gt: usize,
    pub det: TrajSummary,
    pub samples: Vec<TrajSummary>,
}

impl EvalGroup {
    /// Largest usable budget: the deterministic trajectory plus all samples.
    pub fn capacity(&self) -> usize {
        self.samples.len() + 1
    }

    fn prefix(&self, n: usize) -> impl Iterator<Item = &TrajSummary> {
        std::iter::once(&self.det).chain(self.samples.iter().take(n.saturating_sub(1)))
    }

    pub fn diagnostic_sample(&self, n: usize) -> DiagnosticSample {
        let k = n.saturating_sub(1).min(self.samples.len());
        DiagnosticSample {
            det_gt_prob: self.det.gt_prob,
            traj_gt_probs: self.samples[..k].iter().map(|t| t.gt_prob).collect(),
            answer_dists: self.samples[..k].iter().map(|t| t.dist.clone()).collect(),
            det_answer_dist: self.det.dist.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticSample {
    pub det_gt_prob: f64,
    pub traj_gt_probs: Vec<f64>,
    pub answer_dists: Vec<Vec<f64>>,
    pub det_answer_dist: Vec<f64>,
}

/// `max_k s(τ_k) - s(τ_det)`; zero without stochastic trajectories.
pub fn sampling_gain(sample: &DiagnosticSample) -> f64 {
    let base = log_odds(sample.det_gt_prob);
    sample
        .traj_gt_probs
        .iter()
        .map(|&p| log_odds(p) - base)
        .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.max(d))))
        .unwrap_or(0.0)
}

pub fn sg_rate(sgs: &[f64], threshold: f64) -> Result<f64> {
    if sgs.is_empty() {
        return Err(Error::Input("sg_rate of an empty set".into()));
    }
    Ok(sgs.iter().filter(|&&s| s > threshold).count() as f64 / sgs.len() as f64)
}

fn kl_term(p: f64, m: f64) -> f64 {
    if p > 0.0 {
        p * (p / m).ln()
    } else {
        0.0
    }
}

pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!("js: {} vs {}", p.len(), q.len())));
    }
    let mut js = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        js += 0.5 * kl_term(a, m) + 0.5 * kl_term(b, m);
    }
    Ok(js.max(0.0))
}

/// Mean JS between each stochastic answer distribution and the deterministic one.
pub fn js_mean(sample: &DiagnosticSample) -> Result<f64> {
    if sample.answer_dists.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for d in &sample.answer_dists {
        total += js_divergence(d, &sample.det_answer_dist)?;
    }
    Ok(total / sample.answer_dists.len() as f64)
}

fn usable_budgets(groups: &[EvalGroup], budgets: &[usize]) -> Vec<usize> {
    let cap = groups.iter().map(|g| g.capacity()).min().unwrap_or(0);
    let mut out = Vec::new();
    for &n in budgets {
        if n == 0 || n > cap {
            log::warn!("budget {n} skipped: groups hold at most {cap} trajectories");
        } else {
            out.push(n);
        }
    }
    out
}

/// Fraction of prompts with a correct answer among the first `N` trajectories.
pub fn pass_at_n(groups: &[EvalGroup], budgets: &[usize]) -> BTreeMap<usize, f64> {
    let mut out = BTreeMap::new();
    if groups.is_empty() {
        return out;
    }
    for n in usable_budgets(groups, budgets) {
        let hits = groups
            .iter()
            .filter(|g| g.prefix(n).any(|t| t.answer == Some(g.gt)))
            .count();
        out.insert(n, hits as f64 / groups.len() as f64);
    }
    out
}

/// Mean number of distinct decoded answers among the first `N` trajectories.
pub fn diversity(groups: &[EvalGroup], budgets: &[usize]) -> BTreeMap<usize, f64> {
    let mut out = BTreeMap::new();
    if groups.is_empty() {
        return out;
    }
    for n in usable_budgets(groups, budgets) {
        let total: usize = groups
            .iter()
            .map(|g| g.prefix(n).filter_map(|t| t.answer).collect::<BTreeSet<_>>().len())
            .sum();
        out.insert(n, total as f64 / groups.len() as f64);
    }
    out
}

/// Per-step SNR, averaged over each prompt's trajectories: `out[step][prompt]`.
pub fn snr_per_step(groups: &[EvalGroup]) -> Result<Vec<Vec<f64>>> {
    let steps = groups
        .first()
        .and_then(|g| g.samples.first())
        .map(|t| t.step_snr.len())
        .unwrap_or(0);
    if steps == 0 {
        return Err(Error::UnsupportedStrategy("SNR needs a strategy with a Gaussian policy".into()));
    }
    let mut out = vec![Vec::with_capacity(groups.len()); steps];
    for g in groups {
        let mut sums = vec![0.0; steps];
        let mut counts = vec![0usize; steps];
        for t in &g.samples {
            for (k, &s) in t.step_snr.iter().enumerate().take(steps) {
                sums[k] += s;
                counts[k] += 1;
            }
        }
        for k in 0..steps {
            if counts[k] > 0 {
                out[k].push(sums[k] / counts[k] as f64);
            }
        }
    }
    Ok(out)
}

/// Linear-interpolation percentile, `q` in `[0, 100]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentileSummary {
    pub p5: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
}

impl PercentileSummary {
    pub fn of(values: &[f64]) -> Self {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        v.sort_by(|a, b| a.total_cmp(b));
        PercentileSummary {
            p5: percentile(&v, 5.0),
            p25: percentile(&v, 25.0),
            p50: percentile(&v, 50.0),
            p75: percentile(&v, 75.0),
            p95: percentile(&v, 95.0),
        }
    }
}

/// Bootstrap standard error of the mean.
pub fn bootstrap_se(values: &[f64], reps: usize, seed: u64) -> f64 {
    if values.len() < 2 || reps < 2 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let means: Vec<f64> = (0..reps)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    let m = means.iter().sum::<f64>() / reps as f64;
    (means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (reps - 1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetMetrics {
    pub budget: usize,
    pub pass_at: f64,
    pub diversity: f64,
    pub sg: f64,
    pub sg_rate: f64,
    pub js_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub strategy: String,
    pub prompts: usize,
    pub budgets: Vec<BudgetMetrics>,
    /// One summary per perturbed step; `None` for strategies without a policy.
    pub snr_per_step: Option<Vec<PercentileSummary>>,
}

impl MetricsRecord {
    pub fn at(&self, budget: usize) -> Option<&BudgetMetrics> {
        self.budgets.iter().find(|b| b.budget == budget)
    }
}

/// Per-prompt SG values at budget `n`.
pub fn prompt_sgs(groups: &[EvalGroup], n: usize) -> Vec<f64> {
    groups.iter().map(|g| sampling_gain(&g.diagnostic_sample(n))).collect()
}

/// Per-prompt mean JS at budget `n`.
pub fn prompt_js(groups: &[EvalGroup], n: usize) -> Result<Vec<f64>> {
    groups.iter().map(|g| js_mean(&g.diagnostic_sample(n))).collect()
}

pub fn compute_metrics(strategy: &str, groups: &[EvalGroup], budgets: &[usize], sg_threshold: f64) -> Result<MetricsRecord> {
    if groups.is_empty() {
        return Err(Error::Input("no evaluation groups".into()));
    }
    let pass = pass_at_n(groups, budgets);
    let div = diversity(groups, budgets);
    let mut rows = Vec::with_capacity(pass.len());
    for (&n, &p) in &pass {
        let sgs = prompt_sgs(groups, n);
        let js = prompt_js(groups, n)?;
        rows.push(BudgetMetrics {
            budget: n,
            pass_at: p,
            diversity: div[&n],
            sg: sgs.iter().sum::<f64>() / sgs.len() as f64,
            sg_rate: sg_rate(&sgs, sg_threshold)?,
            js_mean: js.iter().sum::<f64>() / js.len() as f64,
        });
    }
    let snr = match snr_per_step(groups) {
        Ok(steps) => Some(steps.iter().map(|v| PercentileSummary::of(v)).collect()),
        Err(Error::UnsupportedStrategy(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsRecord { strategy: strategy.to_string(), prompts: groups.len(), budgets: rows, snr_per_step: snr })
}
