//! Frozen toy latent reasoning model.
//!
//! A prompt is a chain of modular arithmetic operations. Its one-hot encoding
//! is projected to the first latent state `h_1`; `K - 1` applications of a
//! recurrent transition network produce `h_K`, and a linear readout followed
//! by a softmax gives the answer distribution over `M` residues.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointHeader};
use crate::error::{Error, Result};
use crate::mathkernel::{
    all_finite, prefixed, softmax, zero_params, LinearWarmup, Matrix, Optimizer, OptimizerKind,
    Params, TensorView, TwoLayerNet, TwoLayerNetGrads, Vector,
};
use crate::rng;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::Add, Op::Sub, Op::Mul];

    pub fn index(self) -> usize {
        match self {
            Op::Add => 0,
            Op::Sub => 1,
            Op::Mul => 2,
        }
    }

    pub fn apply(self, a: u32, b: u32, modulus: u32) -> u32 {
        let (a, b, m) = (a as u64, b as u64, modulus as u64);
        let r = match self {
            Op::Add => (a + b) % m,
            Op::Sub => (a + m - b % m) % m,
            Op::Mul => (a * b) % m,
        };
        r as u32
    }
}

/// One arithmetic chain, evaluated left to right modulo `M`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub operands: Vec<u32>,
    pub ops: Vec<Op>,
    pub answer: u32,
}

impl TaskInstance {
    pub fn new(operands: Vec<u32>, ops: Vec<Op>, modulus: u32) -> Result<Self> {
        if operands.len() < 2 || ops.len() + 1 != operands.len() {
            return Err(Error::Input(format!(
                "chain needs >= 2 operands and one op between each pair (got {} operands, {} ops)",
                operands.len(),
                ops.len()
            )));
        }
        if modulus < 2 {
            return Err(Error::Input("answer vocabulary must have M >= 2".into()));
        }
        if let Some(&bad) = operands.iter().find(|&&a| a >= modulus) {
            return Err(Error::Input(format!("operand {bad} outside [0, {modulus})")));
        }
        let answer = evaluate(&operands, &ops, modulus);
        Ok(TaskInstance { operands, ops, answer })
    }

    pub fn chain_len(&self) -> usize {
        self.operands.len()
    }

    /// Stable hash of the prompt (operands and ops, not the answer).
    pub fn prompt_hash(&self) -> u64 {
        let mut key = String::with_capacity(4 * self.operands.len());
        for (i, a) in self.operands.iter().enumerate() {
            key.push_str(&a.to_string());
            if let Some(op) = self.ops.get(i) {
                key.push(match op {
                    Op::Add => '+',
                    Op::Sub => '-',
                    Op::Mul => '*',
                });
            }
        }
        rng::derive_key(0, &key, 0)
    }

    /// Checks the stored answer against left-to-right evaluation.
    pub fn validate(&self, modulus: u32, max_chain: usize) -> Result<()> {
        let fresh = TaskInstance::new(self.operands.clone(), self.ops.clone(), modulus)?;
        if fresh.answer != self.answer {
            return Err(Error::Input(format!(
                "stored answer {} != evaluated {}",
                self.answer, fresh.answer
            )));
        }
        if self.chain_len() > max_chain {
            return Err(Error::Input(format!("chain length {} > {}", self.chain_len(), max_chain)));
        }
        Ok(())
    }
}

pub fn evaluate(operands: &[u32], ops: &[Op], modulus: u32) -> u32 {
    ops.iter()
        .zip(&operands[1..])
        .fold(operands[0] % modulus, |acc, (op, &b)| op.apply(acc, b, modulus))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One in `TEST_BUCKETS` prompt hashes belongs to the test split.
pub const TEST_BUCKETS: u64 = 10;

impl Split {
    pub fn contains(self, task: &TaskInstance) -> bool {
        let is_test = task.prompt_hash() % TEST_BUCKETS == 0;
        match self {
            Split::Train => !is_test,
            Split::Test => is_test,
        }
    }

    fn stream_name(self) -> &'static str {
        match self {
            Split::Train => "data/train",
            Split::Test => "data/test",
        }
    }
}

/// Draws `count` instances for `split`. Chain lengths are uniform in
/// `[2, max_chain]`; operands and ops are uniform. Train and test prompts
/// are disjoint by prompt hash.
pub fn gen_dataset(
    seed: u64,
    count: usize,
    modulus: u32,
    max_chain: usize,
    split: Split,
) -> Result<Vec<TaskInstance>> {
    if count == 0 {
        return Err(Error::Input("count must be > 0".into()));
    }
    if modulus < 2 {
        return Err(Error::Input("M must be >= 2".into()));
    }
    if max_chain < 2 {
        return Err(Error::Input("max chain length must be >= 2".into()));
    }
    let mut rng = rng::stream(seed, split.stream_name(), 0);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let len = rng.random_range(2..=max_chain);
        let operands: Vec<u32> = (0..len).map(|_| rng.random_range(0..modulus)).collect();
        let ops: Vec<Op> = (1..len).map(|_| Op::ALL[rng.random_range(0..3)]).collect();
        let task = TaskInstance::new(operands, ops, modulus)?;
        if split.contains(&task) {
            out.push(task);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Latent dimension D.
    pub latent_dim: usize,
    /// Number of latent reasoning steps K.
    pub steps: usize,
    /// Answer vocabulary size M (also the modulus).
    pub vocab: u32,
    /// Maximum chain length.
    pub max_chain: usize,
    /// Hidden width of the transition network.
    pub transition_hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { latent_dim: 32, steps: 6, vocab: 16, max_chain: 4, transition_hidden: 256 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.transition_hidden == 0 {
            return Err(Error::Config("latent_dim and transition_hidden must be > 0".into()));
        }
        if self.steps < 2 {
            return Err(Error::Config("K must be >= 2".into()));
        }
        if self.vocab < 2 {
            return Err(Error::Config("M must be >= 2".into()));
        }
        if self.max_chain < 2 {
            return Err(Error::Config("max_chain must be >= 2".into()));
        }
        Ok(())
    }

    /// Width of the one-hot prompt encoding: operand slots then op slots.
    pub fn prompt_dim(&self) -> usize {
        self.max_chain * self.vocab as usize + (self.max_chain - 1) * Op::ALL.len()
    }

    pub fn encode<T: Real>(&self, task: &TaskInstance) -> Result<Vector<T>> {
        task.validate(self.vocab, self.max_chain)?;
        let m = self.vocab as usize;
        let mut x = Vector::zeros(self.prompt_dim());
        for (slot, &a) in task.operands.iter().enumerate() {
            x[slot * m + a as usize] = T::one();
        }
        let base = self.max_chain * m;
        for (slot, op) in task.ops.iter().enumerate() {
            x[base + slot * Op::ALL.len() + op.index()] = T::one();
        }
        Ok(x)
    }
}

/// Trainable weights of the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    pub embed: Matrix<T>,
    pub transition: TwoLayerNet<T>,
    pub readout: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneGrads<T> {
    pub embed: Matrix<T>,
    pub transition: TwoLayerNetGrads<T>,
    pub readout: Matrix<T>,
}

macro_rules! backbone_tensors {
    ($ty:ident) => {
        impl<T: Real> Params<T> for $ty<T> {
            fn tensors(&self) -> Vec<TensorView<'_, T>> {
                let mut v = vec![TensorView {
                    name: "embed".into(),
                    shape: vec![self.embed.rows(), self.embed.cols()],
                    data: self.embed.as_slice(),
                }];
                v.extend(prefixed("transition", self.transition.tensors()));
                v.push(TensorView {
                    name: "readout".into(),
                    shape: vec![self.readout.rows(), self.readout.cols()],
                    data: self.readout.as_slice(),
                });
                v
            }

            fn tensors_mut(&mut self) -> Vec<&mut [T]> {
                let mut v = vec![self.embed.as_mut_slice()];
                v.extend(self.transition.tensors_mut());
                v.push(self.readout.as_mut_slice());
                v
            }
        }
    };
}

backbone_tensors!(BackboneParams);
backbone_tensors!(BackboneGrads);

impl<T: Real> BackboneGrads<T> {
    pub fn zeros_like(p: &BackboneParams<T>) -> Self {
        BackboneGrads {
            embed: Matrix::zeros(p.embed.rows(), p.embed.cols()),
            transition: TwoLayerNetGrads::zeros_like(&p.transition),
            readout: Matrix::zeros(p.readout.rows(), p.readout.cols()),
        }
    }
}

/// A latent state `h_k` with its 1-based step index.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState<T> {
    pub h: Vector<T>,
    pub step_index: usize,
}

#[derive(Clone, Debug)]
pub struct Backbone<T> {
    config: BackboneConfig,
    params: BackboneParams<T>,
    frozen: bool,
    /// Greedy accuracy on the held-out split, recorded at freeze time.
    pub test_accuracy: Option<f64>,
    pub seed: u64,
}

impl<T: Real> Backbone<T> {
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "init/backbone", 0);
        let d = config.latent_dim;
        let params = BackboneParams {
            embed: Matrix::xavier(d, config.prompt_dim(), &mut rng),
            transition: TwoLayerNet::xavier(d, config.transition_hidden, d, &mut rng),
            readout: Matrix::xavier(config.vocab as usize, d, &mut rng),
        };
        Ok(Backbone { config, params, frozen: false, test_accuracy: None, seed })
    }

    pub fn from_params(config: BackboneConfig, params: BackboneParams<T>) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dim;
        if params.embed.rows() != d
            || params.embed.cols() != config.prompt_dim()
            || params.transition.input_dim() != d
            || params.transition.output_dim() != d
            || params.readout.rows() != config.vocab as usize
            || params.readout.cols() != d
        {
            return Err(Error::shape("backbone parameters do not match config"));
        }
        Ok(Backbone { config, params, frozen: false, test_accuracy: None, seed: 0 })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab as usize
    }

    pub fn params(&self) -> &BackboneParams<T> {
        &self.params
    }

    /// Mutable access, rejected once frozen.
    pub fn params_mut(&mut self) -> Result<&mut BackboneParams<T>> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn checksum(&self) -> String {
        checkpoint::params_checksum(&self.params)
    }

    /// `h_1`: the projected prompt encoding.
    pub fn initial_state(&self, task: &TaskInstance) -> Result<LatentState<T>> {
        let x = self.config.encode::<T>(task)?;
        Ok(LatentState { h: self.params.embed.matvec(&x)?, step_index: 1 })
    }

    /// One deterministic transition `h_{k+1} = transition(h_k)`.
    pub fn latent_step(&self, state: &LatentState<T>) -> Result<LatentState<T>> {
        if state.step_index >= self.config.steps {
            return Err(Error::Protocol(format!(
                "latent step {} has no successor (K = {})",
                state.step_index, self.config.steps
            )));
        }
        if state.h.dim() != self.config.latent_dim {
            return Err(Error::shape("latent state has wrong dimension"));
        }
        let h = self.params.transition.apply(state.h.as_slice())?;
        Ok(LatentState { h, step_index: state.step_index + 1 })
    }

    pub fn logits(&self, final_state: &LatentState<T>) -> Result<Vector<T>> {
        if final_state.step_index != self.config.steps {
            return Err(Error::Protocol(format!(
                "answer readout needs step K = {}, got step {}",
                self.config.steps, final_state.step_index
            )));
        }
        let logits = self.params.readout.matvec(&final_state.h)?;
        if !logits.is_finite() {
            return Err(Error::Input("non-finite answer logits".into()));
        }
        Ok(logits)
    }

    /// Softmax answer distribution `p(y | x, h_{1:K})`.
    pub fn answer_dist(&self, final_state: &LatentState<T>) -> Result<Vector<T>> {
        let logits = self.logits(final_state)?;
        Ok(Vector::from_vec_unchecked(softmax(logits.as_slice())))
    }

    /// Deterministic `h_1 .. h_K`.
    pub fn deterministic_states(&self, task: &TaskInstance) -> Result<Vec<LatentState<T>>> {
        let mut states = vec![self.initial_state(task)?];
        while states.last().expect("non-empty").step_index < self.config.steps {
            let next = self.latent_step(states.last().expect("non-empty"))?;
            states.push(next);
        }
        Ok(states)
    }

    pub fn greedy_answer(&self, task: &TaskInstance) -> Result<usize> {
        let states = self.deterministic_states(task)?;
        Ok(self.answer_dist(states.last().expect("K >= 2"))?.argmax())
    }

    pub fn accuracy(&self, tasks: &[TaskInstance]) -> Result<f64> {
        if tasks.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        for t in tasks {
            if self.greedy_answer(t)? == t.answer as usize {
                hits += 1;
            }
        }
        Ok(hits as f64 / tasks.len() as f64)
    }

    /// Cross-entropy loss of one example and its gradient accumulated into `grads`.
    fn example_grad(&self, task: &TaskInstance, grads: &mut BackboneGrads<T>) -> Result<T> {
        let x = self.config.encode::<T>(task)?;
        let h1 = self.params.embed.matvec(&x)?;
        let mut caches = Vec::with_capacity(self.config.steps - 1);
        let mut h = h1;
        for _ in 1..self.config.steps {
            let (next, cache) = self.params.transition.forward(&h)?;
            caches.push(cache);
            h = next;
        }
        let logits = self.params.readout.matvec(&h)?;
        let probs = softmax(logits.as_slice());
        let y = task.answer as usize;
        let loss = -probs[y].max(T::lit(1e-300)).ln();
        let mut dlogits = probs;
        dlogits[y] -= T::one();
        grads.readout.add_outer(T::one(), &dlogits, h.as_slice());
        let mut dh = vec![T::zero(); self.config.latent_dim];
        self.params.readout.matvec_t_acc(&dlogits, &mut dh);
        for cache in caches.iter().rev() {
            dh = self
                .params
                .transition
                .backward_acc(cache, &dh, &mut grads.transition)?
                .into_vec();
        }
        grads.embed.add_outer(T::one(), &dh, x.as_slice());
        Ok(loss)
    }

    /// Mean cross-entropy and its gradient over `batch`.
    pub fn loss_and_grad(&self, batch: &[TaskInstance]) -> Result<(T, BackboneGrads<T>)> {
        let mut grads = BackboneGrads::zeros_like(&self.params);
        let mut total = T::zero();
        for task in batch {
            total += self.example_grad(task, &mut grads)?;
        }
        let inv = T::one() / T::from_len(batch.len().max(1));
        crate::mathkernel::scale_params(&mut grads, inv);
        Ok((total * inv, grads))
    }

    /// Trains all weights by backpropagation through every latent step, then
    /// freezes the model and records its greedy accuracy on `test`.
    pub fn pretrain(
        mut self,
        train: &[TaskInstance],
        test: &[TaskInstance],
        cfg: &PretrainConfig,
    ) -> Result<(Self, Vec<PretrainEpoch>)> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        if train.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        let mut opt = Optimizer::<T>::new(
            cfg.optimizer,
            LinearWarmup { base_lr: cfg.lr, warmup_steps: cfg.warmup_steps },
        );
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        let mut grads = BackboneGrads::zeros_like(&self.params);
        for epoch in 0..cfg.epochs {
            let mut shuffle = rng::stream(self.seed, "pretrain/shuffle", epoch as u64);
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                zero_params(&mut grads);
                let mut loss = T::zero();
                for &i in chunk {
                    loss += self.example_grad(&train[i], &mut grads)?;
                }
                let inv = T::one() / T::from_len(chunk.len());
                crate::mathkernel::scale_params(&mut grads, inv);
                let loss = (loss * inv).as_f64();
                if !loss.is_finite() || !crate::mathkernel::params_finite(&grads) {
                    return Err(Error::Divergence(format!(
                        "non-finite loss at epoch {epoch}, batch {batches}"
                    )));
                }
                opt.apply(&mut self.params, &grads)?;
                epoch_loss += loss;
                batches += 1;
            }
            let record = PretrainEpoch {
                epoch,
                mean_loss: epoch_loss / batches as f64,
                train_accuracy: None,
            };
            log::info!("pretrain epoch {} loss {:.4}", epoch, record.mean_loss);
            history.push(record);
        }
        if !crate::mathkernel::params_finite(&self.params) {
            return Err(Error::Divergence("non-finite backbone weights after pretraining".into()));
        }
        self.test_accuracy = Some(self.accuracy(test)?);
        self.freeze();
        Ok((self, history))
    }

    pub fn header_meta(&self) -> serde_json::Map<String, serde_json::Value> {
        let mut meta = serde_json::Map::new();
        meta.insert("M".into(), self.config.vocab.into());
        meta.insert("K".into(), self.config.steps.into());
        meta.insert("D".into(), self.config.latent_dim.into());
        meta.insert("L_max".into(), self.config.max_chain.into());
        meta.insert("transition_hidden".into(), self.config.transition_hidden.into());
        meta.insert("frozen".into(), self.frozen.into());
        meta.insert(
            "test_accuracy".into(),
            self.test_accuracy.map(serde_json::Value::from).unwrap_or(serde_json::Value::Null),
        );
        meta.insert("seed".into(), self.seed.into());
        meta
    }

    pub fn save(&self, stem: &Path) -> Result<CheckpointHeader> {
        checkpoint::save(stem, "backbone", self.seed, &self.params, self.header_meta())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let header = checkpoint::read_header(stem)?;
        let config = BackboneConfig {
            latent_dim: header.meta_u64("D")? as usize,
            steps: header.meta_u64("K")? as usize,
            vocab: header.meta_u64("M")? as u32,
            max_chain: header.meta_u64("L_max")? as usize,
            transition_hidden: header.meta_u64("transition_hidden")? as usize,
        };
        let mut bb = Backbone::init(config, header.seed)?;
        checkpoint::load_into(stem, "backbone", &mut bb.params)?;
        bb.frozen = header.meta_bool("frozen")?;
        bb.test_accuracy = header.meta.get("test_accuracy").and_then(|v| v.as_f64());
        bb.seed = header.seed;
        Ok(bb)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub optimizer: OptimizerKind,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 60, lr: 2e-3, batch_size: 32, warmup_steps: 100, optimizer: OptimizerKind::Adam }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: Option<f64>,
}

/// True when every entry of a probability vector is in `[0, 1]` and they sum to one within `tol`.
pub fn is_distribution<T: Real>(p: &[T], tol: f64) -> bool {
    all_finite(p)
        && p.iter().all(|&x| x >= T::zero() && x <= T::one())
        && (p.iter().copied().sum::<T>().as_f64() - 1.0).abs() <= tol
}
