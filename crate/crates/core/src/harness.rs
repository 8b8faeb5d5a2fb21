//! Experiment orchestration behind the `latent-its` command line.
//!
//! Every command reads one flat TOML config (with CLI overrides applied on
//! top), validates it, and writes the resolved config into its output
//! directory as `<command>.config.toml`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{gen_dataset, Backbone, BackboneConfig, PretrainConfig, Split, TaskInstance};
use crate::baselines::{roll_strategy, PerturbationStrategy, StrategySpec};
use crate::checkpoint;
use crate::diagnostics::{compute_metrics, EvalGroup, MetricsRecord, PercentileSummary, TrajSummary};
use crate::error::{Error, Result};
use crate::mathkernel::{OptimizerKind, Params, TensorView};
use crate::reward::RewardConfig;
use crate::rng;
use crate::rollout::roll_deterministic;
use crate::sampler::{SamplerInit, SamplerParams};
use crate::trainer::{train_step, StepMetrics, TrainConfig, TrainState};

pub const VERSION: &str = concat!("latent-its ", env!("CARGO_PKG_VERSION"));

/// Output root for relative `out_dir` values.
pub const OUT_ROOT_ENV: &str = "LATENT_ITS_OUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Rollout worker threads; 0 means one per core.
    pub workers: usize,

    pub train_count: usize,
    pub test_count: usize,
    pub dev_count: usize,

    pub latent_dim: usize,
    pub steps: usize,
    pub vocab: u32,
    pub max_chain: usize,
    pub transition_hidden: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub pretrain_warmup: u64,
    pub pretrain_optimizer: OptimizerKind,
    pub backbone_seed: u64,

    pub sampler_mu_scale: f64,
    pub sampler_logsigma_scale: f64,
    pub sampler_logsigma_bias: f64,

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
    pub checkpoint_every: u64,
    pub eval_every: u64,
    pub eval_prompts: usize,
    pub eval_budget: usize,

    pub r0: f64,
    pub alpha: f64,
    pub shaping_temp: f64,
    pub min_group_for_shaping: usize,

    pub strategies: Vec<String>,
    pub budgets: Vec<usize>,
    /// Test prompts used by `evaluate` and `diagnose` (0 = all).
    pub eval_count: usize,
    pub diagnose_budget: usize,
    pub sg_threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        let pre = PretrainConfig::default();
        let tr = TrainConfig::default();
        let rw = RewardConfig::default();
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            workers: 0,
            train_count: 20_000,
            test_count: 2_000,
            dev_count: 200,
            latent_dim: bb.latent_dim,
            steps: bb.steps,
            vocab: bb.vocab,
            max_chain: bb.max_chain,
            transition_hidden: bb.transition_hidden,
            pretrain_epochs: pre.epochs,
            pretrain_lr: pre.lr,
            pretrain_batch: pre.batch_size,
            pretrain_warmup: pre.warmup_steps,
            pretrain_optimizer: pre.optimizer,
            backbone_seed: 0,
            sampler_mu_scale: 0.01,
            sampler_logsigma_scale: 0.01,
            sampler_logsigma_bias: -1.2,
            group_size: tr.group_size,
            batch_prompts: tr.batch_prompts,
            clip_eps: tr.clip_eps,
            kl_beta: tr.kl_beta,
            logratio_clip: tr.logratio_clip,
            lr: tr.lr,
            warmup_steps: tr.warmup_steps,
            total_steps: tr.total_steps,
            ema_decay: tr.ema_decay,
            optimizer: tr.optimizer,
            checkpoint_every: 1000,
            eval_every: 500,
            eval_prompts: 200,
            eval_budget: 8,
            r0: rw.r0,
            alpha: rw.alpha,
            shaping_temp: rw.shaping_temp,
            min_group_for_shaping: rw.min_group_for_shaping,
            strategies: ["deterministic", "dropout:0.1", "dropout:0.5", "gaussian:1.0", "gts"]
                .map(String::from)
                .to_vec(),
            budgets: vec![1, 2, 4, 8, 16, 32],
            eval_count: 0,
            diagnose_budget: 32,
            sg_threshold: crate::diagnostics::DEFAULT_SG_THRESHOLD,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub strategies: Vec<String>,
    pub budgets: Vec<usize>,
    pub alpha: Option<f64>,
    pub total_steps: Option<u64>,
    pub workers: Option<usize>,
    pub count: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
        if !o.strategies.is_empty() {
            self.strategies = o.strategies.clone();
        }
        if !o.budgets.is_empty() {
            self.budgets = o.budgets.clone();
            self.diagnose_budget = *o.budgets.iter().max().unwrap_or(&self.diagnose_budget);
        }
        if let Some(a) = o.alpha {
            self.alpha = a;
        }
        if let Some(t) = o.total_steps {
            self.total_steps = t;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(c) = o.count {
            self.train_count = c;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone_config().validate()?;
        self.train_config().validate()?;
        self.reward_config().validate()?;
        if self.train_count == 0 || self.test_count == 0 {
            return Err(Error::Config("train_count and test_count must be > 0".into()));
        }
        if self.pretrain_batch == 0 {
            return Err(Error::Config("pretrain_batch must be > 0".into()));
        }
        if self.budgets.is_empty() || self.budgets.contains(&0) {
            return Err(Error::Config("budgets must be non-empty and positive".into()));
        }
        if self.diagnose_budget == 0 {
            return Err(Error::Config("diagnose_budget must be > 0".into()));
        }
        if self.eval_budget < 2 {
            return Err(Error::Config("eval_budget must be >= 2".into()));
        }
        if !(self.sampler_mu_scale >= 0.0 && self.sampler_logsigma_scale >= 0.0) {
            return Err(Error::Config("sampler init scales must be >= 0".into()));
        }
        self.strategy_specs()?;
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            latent_dim: self.latent_dim,
            steps: self.steps,
            vocab: self.vocab,
            max_chain: self.max_chain,
            transition_hidden: self.transition_hidden,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            batch_size: self.pretrain_batch,
            warmup_steps: self.pretrain_warmup,
            optimizer: self.pretrain_optimizer,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            group_size: self.group_size,
            batch_prompts: self.batch_prompts,
            clip_eps: self.clip_eps,
            kl_beta: self.kl_beta,
            logratio_clip: self.logratio_clip,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            ema_decay: self.ema_decay,
            optimizer: self.optimizer,
        }
    }

    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            r0: self.r0,
            alpha: self.alpha,
            shaping_temp: self.shaping_temp,
            min_group_for_shaping: self.min_group_for_shaping,
        }
    }

    pub fn sampler_init(&self) -> SamplerInit {
        SamplerInit {
            mu_out_scale: self.sampler_mu_scale,
            logsigma_out_scale: self.sampler_logsigma_scale,
            logsigma_bias: self.sampler_logsigma_bias,
        }
    }

    pub fn strategy_specs(&self) -> Result<Vec<StrategySpec>> {
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategies configured".into()));
        }
        self.strategies.iter().map(|s| s.parse()).collect()
    }

    /// Output directory, resolved against the output-root env var when relative.
    pub fn out(&self) -> PathBuf {
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if self.out_dir.is_relative() => PathBuf::from(root).join(&self.out_dir),
            _ => self.out_dir.clone(),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out().join("data")
    }

    pub fn backbone_stem(&self) -> PathBuf {
        self.out().join("backbone")
    }

    pub fn sampler_stem(&self) -> PathBuf {
        self.out().join("sampler")
    }

    pub fn max_budget(&self) -> usize {
        self.budgets.iter().copied().max().unwrap_or(1)
    }
}

/// Writes the resolved config plus version into `dir`.
pub fn write_provenance(cfg: &ExperimentConfig, command: &str) -> Result<PathBuf> {
    let dir = cfg.out();
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{command}.config.toml"));
    let text = format!("# {VERSION}\n# command: {command}\n{}", cfg.to_toml()?);
    fs::write(&path, text)?;
    Ok(path)
}

/// Runs `f` on a rayon pool with `workers` threads (0 = default).
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn write_jsonl(path: &Path, tasks: &[TaskInstance]) -> Result<()> {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TaskInstance>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let mut out = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TaskInstance = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(t);
    }
    Ok(out)
}

fn load_tasks(cfg: &ExperimentConfig, name: &str) -> Result<Vec<TaskInstance>> {
    let tasks = read_jsonl(&cfg.data_dir().join(format!("{name}.jsonl")))?;
    for t in &tasks {
        t.validate(cfg.vocab, cfg.max_chain)?;
    }
    Ok(tasks)
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, force: bool) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let dir = cfg.data_dir();
    let paths: Vec<PathBuf> = ["train", "test", "dev"].iter().map(|n| dir.join(format!("{n}.jsonl"))).collect();
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Error::Exists(p.clone()));
        }
    }
    let train = gen_dataset(cfg.seed, cfg.train_count, cfg.vocab, cfg.max_chain, Split::Train)?;
    let held_out = gen_dataset(cfg.seed, cfg.test_count + cfg.dev_count, cfg.vocab, cfg.max_chain, Split::Test)?;
    let (test, dev) = held_out.split_at(cfg.test_count);
    write_jsonl(&paths[0], &train)?;
    write_jsonl(&paths[1], test)?;
    write_jsonl(&paths[2], dev)?;
    write_provenance(cfg, "gen-data")?;
    log::info!("wrote {} train, {} test, {} dev prompts to {}", train.len(), test.len(), dev.len(), dir.display());
    Ok(paths)
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, force: bool) -> Result<Backbone<f64>> {
    cfg.validate()?;
    let stem = cfg.backbone_stem();
    if checkpoint::exists(&stem) && !force {
        return Err(Error::Exists(checkpoint::header_path(&stem)));
    }
    let train = load_tasks(cfg, "train")?;
    let test = load_tasks(cfg, "test")?;
    let bb = Backbone::<f64>::init(cfg.backbone_config(), cfg.backbone_seed)?;
    let (bb, history) = bb.pretrain(&train, &test, &cfg.pretrain_config())?;
    let acc = bb.test_accuracy.unwrap_or(0.0);
    if !(0.4..=0.95).contains(&acc) {
        log::warn!("backbone test accuracy {acc:.3} is outside [0.40, 0.95]; sampling headroom may be poor");
    }
    bb.save(&stem)?;
    let mut csv = String::from("epoch,mean_loss\n");
    for h in &history {
        writeln!(csv, "{},{:.6}", h.epoch, h.mean_loss).ok();
    }
    fs::write(cfg.out().join("pretrain_log.csv"), csv)?;
    write_provenance(cfg, "pretrain")?;
    log::info!("backbone test accuracy {acc:.4}");
    Ok(bb)
}

pub fn load_backbone(cfg: &ExperimentConfig) -> Result<Backbone<f64>> {
    let stem = cfg.backbone_stem();
    if !checkpoint::exists(&stem) {
        return Err(Error::Config(format!("missing backbone checkpoint {}", checkpoint::header_path(&stem).display())));
    }
    let bb = Backbone::<f64>::load(&stem)?;
    if !bb.is_frozen() {
        return Err(Error::Protocol("backbone checkpoint is not frozen".into()));
    }
    if bb.config() != &cfg.backbone_config() {
        return Err(Error::Config("backbone checkpoint does not match the configured sizes".into()));
    }
    Ok(bb)
}

/// Adam moments stored alongside a resumable training state.
struct MomentBuffers {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Params<f64> for MomentBuffers {
    fn tensors(&self) -> Vec<TensorView<'_, f64>> {
        vec![
            TensorView { name: "m".into(), shape: vec![self.m.len()], data: &self.m },
            TensorView { name: "v".into(), shape: vec![self.v.len()], data: &self.v },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.m, &mut self.v]
    }
}

fn state_stem(cfg: &ExperimentConfig, part: &str) -> PathBuf {
    cfg.out().join("train_state").join(part)
}

fn save_state(cfg: &ExperimentConfig, state: &TrainState<f64>) -> Result<()> {
    let decay = state.reference.decay;
    state.policy.save(&state_stem(cfg, "policy"), "sampler", cfg.seed, state.step, decay)?;
    state.reference.params.save(&state_stem(cfg, "reference"), "sampler_ref", cfg.seed, state.step, decay)?;
    let (m, v) = state.optimizer.moments();
    let buffers = MomentBuffers { m: m.to_vec(), v: v.to_vec() };
    let mut meta = serde_json::Map::new();
    meta.insert("training_step".into(), state.step.into());
    checkpoint::save(&state_stem(cfg, "optimizer"), "optimizer", cfg.seed, &buffers, meta)?;
    Ok(())
}

fn load_state(cfg: &ExperimentConfig, tc: &TrainConfig) -> Result<TrainState<f64>> {
    let (policy, header) = SamplerParams::load(&state_stem(cfg, "policy"), "sampler")?;
    let (reference, _) = SamplerParams::load(&state_stem(cfg, "reference"), "sampler_ref")?;
    let step = header.meta_u64("training_step")?;
    let mut state = TrainState::new(policy, tc);
    state.reference.params = reference;
    let oh = checkpoint::read_header(&state_stem(cfg, "optimizer"))?;
    let n = oh.tensors.first().map(|t| t.len).unwrap_or(0);
    let mut buffers = MomentBuffers { m: vec![0.0; n], v: vec![0.0; n] };
    checkpoint::load_into(&state_stem(cfg, "optimizer"), "optimizer", &mut buffers)?;
    state.optimizer.restore(step, buffers.m, buffers.v)?;
    state.step = step;
    Ok(state)
}

fn batch_indices(seed: u64, step: u64, pool: usize, count: usize) -> Vec<usize> {
    let mut r = rng::stream(seed, "train/batch", step);
    (0..count).map(|_| r.random_range(0..pool)).collect()
}

const TRAIN_LOG_HEADER: &str = "step,mean_reward,group_accuracy,pg_loss,kl_loss,mean_sigma,mean_logratio_abs,lr";

fn train_log_row(m: &StepMetrics) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.6e},{:.6},{:.6},{:.6e}",
        m.step, m.mean_reward, m.group_accuracy, m.pg_loss, m.kl_loss, m.mean_sigma, m.mean_logratio_abs, m.lr
    )
}

fn append(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    for r in rows {
        writeln!(f, "{r}")?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub start_step: u64,
    pub final_step: u64,
    pub skipped: usize,
    pub last: Option<StepMetrics>,
}

/// Trains the sampler, resuming from `train_state/` unless `force`.
pub fn cmd_train_sampler(cfg: &ExperimentConfig, force: bool) -> Result<TrainReport> {
    cfg.validate()?;
    let bb = load_backbone(cfg)?;
    let checksum = bb.checksum();
    let train = load_tasks(cfg, "train")?;
    let dev: Vec<TaskInstance> = load_tasks(cfg, "dev")?.into_iter().take(cfg.eval_prompts).collect();
    let tc = cfg.train_config();
    let rc = cfg.reward_config();
    let out = cfg.out();
    fs::create_dir_all(&out)?;
    let log_path = out.join("train_log.csv");
    let eval_path = out.join("train_eval.csv");
    let resumable = checkpoint::exists(&state_stem(cfg, "policy"));
    let mut state = if resumable && !force {
        let s = load_state(cfg, &tc)?;
        log::info!("resuming sampler training at step {}", s.step);
        s
    } else {
        for p in [&log_path, &eval_path] {
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        let init = SamplerParams::init(cfg.latent_dim, cfg.seed, &cfg.sampler_init());
        TrainState::new(init, &tc)
    };
    write_provenance(cfg, "train-sampler")?;
    let start = state.step;
    let mut skipped = 0;
    let mut last = None;
    let mut rows = Vec::new();
    with_workers(cfg.workers, || -> Result<()> {
        while state.step < tc.total_steps {
            let idx = batch_indices(cfg.seed, state.step, train.len(), tc.batch_prompts);
            let batch: Vec<TaskInstance> = idx.iter().map(|&i| train[i].clone()).collect();
            let m = train_step(&bb, &mut state, &batch, &tc, &rc, cfg.seed)?;
            skipped += m.skipped as usize;
            rows.push(train_log_row(&m));
            if m.step % 50 == 0 {
                log::info!(
                    "step {} reward {:.4} acc {:.4} sigma {:.4} pg {:.4}",
                    m.step, m.mean_reward, m.group_accuracy, m.mean_sigma, m.pg_loss
                );
            }
            last = Some(m);
            let done = state.step;
            if cfg.eval_every > 0 && done % cfg.eval_every == 0 && !dev.is_empty() {
                let spec = StrategySpec::Gts(None);
                let strat = PerturbationStrategy::Gts(state.policy.clone());
                let groups = eval_groups(&bb, &strat, &spec, &dev, cfg.eval_budget, cfg.seed)?;
                let rec = compute_metrics("gts", &groups, &[1, cfg.eval_budget], cfg.sg_threshold)?;
                let b = rec.at(cfg.eval_budget).cloned().unwrap_or_else(|| rec.budgets[0].clone());
                append(
                    &eval_path,
                    "step,budget,pass_at_1,pass_at_n,sg,js_mean",
                    &[format!("{},{},{:.6},{:.6},{:.6},{:.6}", done, b.budget, rec.budgets[0].pass_at, b.pass_at, b.sg, b.js_mean)],
                )?;
                log::info!("eval at step {done}: pass@{} {:.4}", b.budget, b.pass_at);
            }
            let checkpoint_now = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0;
            if checkpoint_now || done == tc.total_steps {
                if bb.checksum() != checksum {
                    return Err(Error::Protocol("backbone parameters changed during sampler training".into()));
                }
                append(&log_path, TRAIN_LOG_HEADER, &rows)?;
                rows.clear();
                save_state(cfg, &state)?;
                state.policy.save(&cfg.sampler_stem(), "sampler", cfg.seed, done, state.reference.decay)?;
            }
        }
        append(&log_path, TRAIN_LOG_HEADER, &rows)?;
        Ok(())
    })??;
    if !log_path.exists() {
        append(&log_path, TRAIN_LOG_HEADER, &[])?;
    }
    if !checkpoint::exists(&cfg.sampler_stem()) {
        state.policy.save(&cfg.sampler_stem(), "sampler", cfg.seed, state.step, state.reference.decay)?;
    }
    Ok(TrainReport { start_step: start, final_step: state.step, skipped, last })
}

/// Name used for a strategy's random stream; independent of checkpoint paths.
fn stream_label(spec: &StrategySpec) -> String {
    match spec {
        StrategySpec::Gts(_) => "gts".into(),
        s => s.to_string(),
    }
}

/// Rolls the deterministic trajectory plus `budget - 1` samples per prompt.
///
/// Each prompt draws from its own stream keyed by the prompt index, so the
/// result does not depend on how prompts are spread over workers.
pub fn eval_groups(
    bb: &Backbone<f64>,
    strategy: &PerturbationStrategy<f64>,
    spec: &StrategySpec,
    prompts: &[TaskInstance],
    budget: usize,
    seed: u64,
) -> Result<Vec<EvalGroup>> {
    let label = format!("eval/{}", stream_label(spec));
    prompts
        .par_iter()
        .enumerate()
        .map(|(j, task)| {
            let mut r = rng::stream(seed, &label, j as u64);
            let det = roll_deterministic(bb, strategy.sampler(), task)?;
            let samples = (1..budget)
                .map(|_| roll_strategy(bb, strategy, task, &mut r).map(|t| TrajSummary::from_trajectory(&t)))
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalGroup { gt: task.answer as usize, det: TrajSummary::from_trajectory(&det), samples })
        })
        .collect()
}

fn resolve_strategy(cfg: &ExperimentConfig, spec: &StrategySpec) -> Result<PerturbationStrategy<f64>> {
    match spec {
        StrategySpec::Gts(path) => {
            let stem = path.clone().unwrap_or_else(|| cfg.sampler_stem());
            if !checkpoint::exists(&stem) {
                return Err(Error::Config(format!("gts needs a sampler checkpoint at {}", stem.display())));
            }
            let (params, _) = SamplerParams::load(&stem, "sampler")?;
            if params.dim() != cfg.latent_dim {
                return Err(Error::Config("sampler checkpoint does not match latent_dim".into()));
            }
            PerturbationStrategy::from_spec(spec, Some(&params))
        }
        _ => PerturbationStrategy::from_spec(spec, None),
    }
}

fn eval_prompts(cfg: &ExperimentConfig) -> Result<Vec<TaskInstance>> {
    let test = load_tasks(cfg, "test")?;
    Ok(if cfg.eval_count > 0 { test.into_iter().take(cfg.eval_count).collect() } else { test })
}

fn evaluate_all(cfg: &ExperimentConfig, budgets: &[usize]) -> Result<Vec<MetricsRecord>> {
    let specs = cfg.strategy_specs()?;
    let strategies = specs.iter().map(|s| resolve_strategy(cfg, s)).collect::<Result<Vec<_>>>()?;
    let bb = load_backbone(cfg)?;
    let prompts = eval_prompts(cfg)?;
    let max_budget = budgets.iter().copied().max().unwrap_or(1);
    with_workers(cfg.workers, || {
        specs
            .iter()
            .zip(&strategies)
            .map(|(spec, strat)| {
                let groups = eval_groups(&bb, strat, spec, &prompts, max_budget, cfg.seed)?;
                let rec = compute_metrics(&spec.to_string(), &groups, budgets, cfg.sg_threshold)?;
                log::info!("evaluated {spec} on {} prompts", prompts.len());
                Ok(rec)
            })
            .collect::<Result<Vec<_>>>()
    })?
}

/// SNR columns: per-step percentiles averaged over steps, then the per-step medians.
fn snr_columns(snr: &Option<Vec<PercentileSummary>>) -> String {
    match snr {
        Some(steps) if !steps.is_empty() => {
            let med: Vec<String> = steps.iter().map(|s| format!("{:.6}", s.p50)).collect();
            let p = |f: fn(&PercentileSummary) -> f64| {
                steps.iter().map(f).sum::<f64>() / steps.len() as f64
            };
            format!(
                "{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                p(|s| s.p5),
                p(|s| s.p25),
                p(|s| s.p50),
                p(|s| s.p75),
                p(|s| s.p95),
                med.join(";")
            )
        }
        _ => ",,,,,".into(),
    }
}

pub const METRICS_HEADER: &str =
    "strategy,budget,prompts,pass_at,diversity,sg,sg_rate,js_mean,snr_p5,snr_p25,snr_p50,snr_p75,snr_p95,snr_p50_by_step";

pub fn metrics_csv(records: &[MetricsRecord], cfg: &ExperimentConfig) -> String {
    let mut s = format!("# {VERSION} seed={} log=natural sg_threshold={}\n{METRICS_HEADER}\n", cfg.seed, cfg.sg_threshold);
    for r in records {
        let snr = snr_columns(&r.snr_per_step);
        for b in &r.budgets {
            writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                r.strategy, b.budget, r.prompts, b.pass_at, b.diversity, b.sg, b.sg_rate, b.js_mean, snr
            )
            .ok();
        }
    }
    s
}

#[derive(Serialize, Deserialize)]
pub struct MetricsFile {
    pub version: String,
    pub seed: u64,
    pub log_base: String,
    pub sg_threshold: f64,
    pub records: Vec<MetricsRecord>,
}

pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let records = evaluate_all(cfg, &cfg.budgets)?;
    let out = cfg.out();
    fs::create_dir_all(&out)?;
    fs::write(out.join("metrics.csv"), metrics_csv(&records, cfg))?;
    let file = MetricsFile {
        version: VERSION.into(),
        seed: cfg.seed,
        log_base: "e".into(),
        sg_threshold: cfg.sg_threshold,
        records: records.clone(),
    };
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&file)? + "\n")?;
    write_provenance(cfg, "evaluate")?;
    Ok(records)
}

pub fn read_metrics(path: &Path) -> Result<MetricsFile> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseRow {
    pub strategy: String,
    pub budget: usize,
    pub sg: f64,
    pub sg_rate: f64,
    pub js_mean: f64,
    pub pass_at: f64,
}

pub fn format_table(rows: &[DiagnoseRow]) -> String {
    let w = rows.iter().map(|r| r.strategy.len()).max().unwrap_or(8).max(8);
    let mut s = format!("{:<w$}  {:>4}  {:>8}  {:>8}  {:>8}  {:>8}\n", "strategy", "N", "SG", "SG>thr", "JS", "pass@N");
    for r in rows {
        writeln!(
            s,
            "{:<w$}  {:>4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}",
            r.strategy, r.budget, r.sg, r.sg_rate, r.js_mean, r.pass_at
        )
        .ok();
    }
    s
}

pub fn cmd_diagnose(cfg: &ExperimentConfig) -> Result<Vec<DiagnoseRow>> {
    cfg.validate()?;
    let n = cfg.diagnose_budget;
    let records = evaluate_all(cfg, &[n])?;
    let rows: Vec<DiagnoseRow> = records
        .iter()
        .filter_map(|r| {
            r.at(n).map(|b| DiagnoseRow {
                strategy: r.strategy.clone(),
                budget: n,
                sg: b.sg,
                sg_rate: b.sg_rate,
                js_mean: b.js_mean,
                pass_at: b.pass_at,
            })
        })
        .collect();
    let out = cfg.out();
    fs::create_dir_all(&out)?;
    let mut csv = String::from("strategy,budget,sg,sg_rate,js_mean,pass_at\n");
    for r in &rows {
        writeln!(csv, "{},{},{:.6},{:.6},{:.6},{:.6}", r.strategy, r.budget, r.sg, r.sg_rate, r.js_mean, r.pass_at).ok();
    }
    fs::write(out.join("diagnose.csv"), csv)?;
    fs::write(out.join("diagnose.txt"), format_table(&rows))?;
    write_provenance(cfg, "diagnose")?;
    Ok(rows)
}

/// Per-strategy metrics keyed by strategy name, for quick lookups.
pub fn by_strategy(records: &[MetricsRecord]) -> BTreeMap<String, &MetricsRecord> {
    records.iter().map(|r| (r.strategy.clone(), r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, back);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 7\nalpha = 0.0\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.alpha, 0.0);
        assert_eq!(cfg.group_size, 32);
        assert!(ExperimentConfig::from_toml("nonsense = 1\n").is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&Overrides { alpha: Some(0.0), total_steps: Some(3), budgets: vec![4], ..Default::default() });
        assert_eq!((cfg.alpha, cfg.total_steps, cfg.diagnose_budget), (0.0, 3, 4));
    }

    #[test]
    fn bad_strategy_is_config_error() {
        let cfg = ExperimentConfig { strategies: vec!["beam".into()], ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
