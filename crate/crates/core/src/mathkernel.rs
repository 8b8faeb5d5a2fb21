//! Dense vectors, row-major matrices and a two-layer SiLU network with a
//! hand-written backward pass.
//!
//! Everything here is value-semantic: forward and backward are pure
//! functions of their inputs, so a frozen network can be shared freely
//! between rollout workers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Vector<T> {
    data: Vec<T>,
}

impl<T: Real> Vector<T> {
    /// Wraps `data`, rejecting empty or non-finite input.
    pub fn new(data: Vec<T>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::shape("vector must have dim > 0"));
        }
        if !all_finite(&data) {
            return Err(Error::Input("non-finite vector entry".into()));
        }
        Ok(Vector { data })
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "vector must have dim > 0");
        Vector { data: vec![T::zero(); dim] }
    }

    pub fn filled(dim: usize, value: T) -> Self {
        assert!(dim > 0, "vector must have dim > 0");
        Vector { data: vec![value; dim] }
    }

    pub fn from_fn(dim: usize, f: impl FnMut(usize) -> T) -> Self {
        assert!(dim > 0, "vector must have dim > 0");
        Vector { data: (0..dim).map(f).collect() }
    }

    /// Builds a vector without the finiteness check. Callers must validate
    /// before handing it to anything that requires finite input.
    pub(crate) fn from_vec_unchecked(data: Vec<T>) -> Self {
        Vector { data }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }

    pub fn dot(&self, other: &Self) -> T {
        dot(&self.data, &other.data)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|a| a * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Vector { data: self.data.iter().map(|&a| f(a)).collect() }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::shape(format!(
                "vector dims {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(Vector {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Root mean square of the entries.
    pub fn rms(&self) -> T {
        (self.dot(self) / T::from_len(self.dim())).sqrt()
    }
}

impl<T> std::ops::Index<usize> for Vector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}

impl<T> std::ops::IndexMut<usize> for Vector<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.data[i]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("matrix dims must be positive"));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if !all_finite(&data) {
            return Err(Error::Input("non-finite matrix entry".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        Matrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Glorot/Xavier uniform: entries ~ U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
    pub fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| T::lit(rng.random_range(-a..a)))
            .collect();
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = self · x + bias`
    pub fn affine_into(&self, x: &[T], bias: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = bias[r] + dot(self.row(r), x);
        }
    }

    pub fn matvec(&self, x: &Vector<T>) -> Result<Vector<T>> {
        if x.dim() != self.cols {
            return Err(Error::shape(format!(
                "matvec: matrix has {} cols, vector has dim {}",
                self.cols,
                x.dim()
            )));
        }
        let mut out = vec![T::zero(); self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x.as_slice());
        }
        Ok(Vector::from_vec_unchecked(out))
    }

    /// `out += selfᵀ · y`
    pub fn matvec_t_acc(&self, y: &[T], out: &mut [T]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr == T::zero() {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
    }

    /// `self += alpha · a bᵀ`
    pub fn add_outer(&mut self, alpha: T, a: &[T], b: &[T]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        let cols = self.cols;
        for (r, &ar) in a.iter().enumerate() {
            let s = alpha * ar;
            if s == T::zero() {
                continue;
            }
            for (w, &bc) in self.data[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *w += s * bc;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    SiLU,
}

#[inline]
pub fn sigmoid<T: Real>(t: T) -> T {
    T::one() / (T::one() + (-t).exp())
}

#[inline]
pub fn silu<T: Real>(t: T) -> T {
    t * sigmoid(t)
}

/// d/dt [t · sigmoid(t)] = s (1 + t (1 - s))
#[inline]
pub fn silu_grad<T: Real>(t: T) -> T {
    let s = sigmoid(t);
    s * (T::one() + t * (T::one() - s))
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, t: T) -> T {
        match self {
            Activation::SiLU => silu(t),
        }
    }

    #[inline]
    fn derivative<T: Real>(self, t: T) -> T {
        match self {
            Activation::SiLU => silu_grad(t),
        }
    }
}

/// `y = w2 · act(w1 · x + b1) + b2`
#[derive(Clone, Debug, PartialEq)]
pub struct TwoLayerNet<T> {
    pub w1: Matrix<T>,
    pub b1: Vector<T>,
    pub w2: Matrix<T>,
    pub b2: Vector<T>,
    pub activation: Activation,
}

/// Intermediate values kept by [`TwoLayerNet::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    x: Vec<T>,
    pre: Vec<T>,
    hidden: Vec<T>,
}

impl<T> ForwardCache<T> {
    pub fn input(&self) -> &[T] {
        &self.x
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoLayerNetGrads<T> {
    pub w1: Matrix<T>,
    pub b1: Vector<T>,
    pub w2: Matrix<T>,
    pub b2: Vector<T>,
}

impl<T: Real> TwoLayerNetGrads<T> {
    pub fn zeros_like(net: &TwoLayerNet<T>) -> Self {
        TwoLayerNetGrads {
            w1: Matrix::zeros(net.w1.rows, net.w1.cols),
            b1: Vector::zeros(net.b1.dim()),
            w2: Matrix::zeros(net.w2.rows, net.w2.cols),
            b2: Vector::zeros(net.b2.dim()),
        }
    }
}

impl<T: Real> TwoLayerNet<T> {
    pub fn new(w1: Matrix<T>, b1: Vector<T>, w2: Matrix<T>, b2: Vector<T>) -> Result<Self> {
        if w1.rows != b1.dim() || w2.cols != w1.rows || w2.rows != b2.dim() {
            return Err(Error::shape(format!(
                "inconsistent layer shapes: w1 {}x{}, b1 {}, w2 {}x{}, b2 {}",
                w1.rows,
                w1.cols,
                b1.dim(),
                w2.rows,
                w2.cols,
                b2.dim()
            )));
        }
        Ok(TwoLayerNet { w1, b1, w2, b2, activation: Activation::SiLU })
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        TwoLayerNet {
            w1: Matrix::zeros(hidden, input),
            b1: Vector::zeros(hidden),
            w2: Matrix::zeros(output, hidden),
            b2: Vector::zeros(output),
            activation: Activation::SiLU,
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        TwoLayerNet {
            w1: Matrix::xavier(hidden, input, rng),
            b1: Vector::zeros(hidden),
            w2: Matrix::xavier(output, hidden, rng),
            b2: Vector::zeros(output),
            activation: Activation::SiLU,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows
    }

    pub fn forward(&self, x: &Vector<T>) -> Result<(Vector<T>, ForwardCache<T>)> {
        self.forward_slice(x.as_slice())
    }

    pub fn forward_slice(&self, x: &[T]) -> Result<(Vector<T>, ForwardCache<T>)> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "net expects input dim {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        if !all_finite(x) {
            return Err(Error::Input("non-finite network input".into()));
        }
        let mut pre = vec![T::zero(); self.hidden_dim()];
        self.w1.affine_into(x, self.b1.as_slice(), &mut pre);
        let hidden: Vec<T> = pre.iter().map(|&p| self.activation.apply(p)).collect();
        let mut y = vec![T::zero(); self.output_dim()];
        self.w2.affine_into(&hidden, self.b2.as_slice(), &mut y);
        if !all_finite(&y) {
            return Err(Error::Input("network produced a non-finite output".into()));
        }
        Ok((Vector::from_vec_unchecked(y), ForwardCache { x: x.to_vec(), pre, hidden }))
    }

    /// Output only; skips building the cache.
    pub fn apply(&self, x: &[T]) -> Result<Vector<T>> {
        self.forward_slice(x).map(|(y, _)| y)
    }

    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        dy: &Vector<T>,
    ) -> Result<(TwoLayerNetGrads<T>, Vector<T>)> {
        let mut grads = TwoLayerNetGrads::zeros_like(self);
        let dx = self.backward_acc(cache, dy.as_slice(), &mut grads)?;
        Ok((grads, dx))
    }

    /// Adds this sample's parameter gradients into `grads` and returns dL/dx.
    pub fn backward_acc(
        &self,
        cache: &ForwardCache<T>,
        dy: &[T],
        grads: &mut TwoLayerNetGrads<T>,
    ) -> Result<Vector<T>> {
        if cache.x.len() != self.input_dim()
            || cache.pre.len() != self.hidden_dim()
            || cache.hidden.len() != self.hidden_dim()
        {
            return Err(Error::shape("forward cache does not match this network"));
        }
        if dy.len() != self.output_dim() {
            return Err(Error::shape(format!(
                "upstream gradient dim {} != output dim {}",
                dy.len(),
                self.output_dim()
            )));
        }
        if grads.w1.rows != self.w1.rows
            || grads.w1.cols != self.w1.cols
            || grads.w2.rows != self.w2.rows
            || grads.w2.cols != self.w2.cols
        {
            return Err(Error::shape("gradient buffer does not match this network"));
        }
        for (g, &d) in grads.b2.as_mut_slice().iter_mut().zip(dy) {
            *g += d;
        }
        grads.w2.add_outer(T::one(), dy, &cache.hidden);

        let mut dhidden = vec![T::zero(); self.hidden_dim()];
        self.w2.matvec_t_acc(dy, &mut dhidden);
        let dpre: Vec<T> = dhidden
            .iter()
            .zip(&cache.pre)
            .map(|(&dh, &p)| dh * self.activation.derivative(p))
            .collect();
        for (g, &d) in grads.b1.as_mut_slice().iter_mut().zip(&dpre) {
            *g += d;
        }
        grads.w1.add_outer(T::one(), &dpre, &cache.x);

        let mut dx = vec![T::zero(); self.input_dim()];
        self.w1.matvec_t_acc(&dpre, &mut dx);
        Ok(Vector::from_vec_unchecked(dx))
    }
}

/// A named, shaped view of one parameter tensor.
pub struct TensorView<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

/// Uniform flat access to a parameter set, used by the optimizers, the EMA
/// reference, checksums and checkpointing. `tensors` and `tensors_mut` must
/// list tensors in the same order.
pub trait Params<T: Real> {
    fn tensors(&self) -> Vec<TensorView<'_, T>>;
    fn tensors_mut(&mut self) -> Vec<&mut [T]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn flatten(&self) -> Vec<T> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// Overwrites every parameter from a flat buffer produced by [`Params::flatten`].
    fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "flat buffer has {} values, parameters need {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }
}

impl<T: Real> Params<T> for TwoLayerNet<T> {
    fn tensors(&self) -> Vec<TensorView<'_, T>> {
        vec![
            TensorView { name: "w1".into(), shape: vec![self.w1.rows, self.w1.cols], data: &self.w1.data },
            TensorView { name: "b1".into(), shape: vec![self.b1.dim()], data: self.b1.as_slice() },
            TensorView { name: "w2".into(), shape: vec![self.w2.rows, self.w2.cols], data: &self.w2.data },
            TensorView { name: "b2".into(), shape: vec![self.b2.dim()], data: self.b2.as_slice() },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            &mut self.w1.data,
            self.b1.as_mut_slice(),
            &mut self.w2.data,
            self.b2.as_mut_slice(),
        ]
    }
}

impl<T: Real> Params<T> for TwoLayerNetGrads<T> {
    fn tensors(&self) -> Vec<TensorView<'_, T>> {
        vec![
            TensorView { name: "w1".into(), shape: vec![self.w1.rows, self.w1.cols], data: &self.w1.data },
            TensorView { name: "b1".into(), shape: vec![self.b1.dim()], data: self.b1.as_slice() },
            TensorView { name: "w2".into(), shape: vec![self.w2.rows, self.w2.cols], data: &self.w2.data },
            TensorView { name: "b2".into(), shape: vec![self.b2.dim()], data: self.b2.as_slice() },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            &mut self.w1.data,
            self.b1.as_mut_slice(),
            &mut self.w2.data,
            self.b2.as_mut_slice(),
        ]
    }
}

/// Prefixes tensor names, for composite parameter sets.
pub fn prefixed<'a, T>(prefix: &str, views: Vec<TensorView<'a, T>>) -> Vec<TensorView<'a, T>> {
    views
        .into_iter()
        .map(|mut v| {
            v.name = format!("{prefix}.{}", v.name);
            v
        })
        .collect()
}

fn check_same_layout<T: Real>(a: &impl Params<T>, b: &impl Params<T>) -> Result<()> {
    let sa: Vec<usize> = a.tensors().iter().map(|t| t.data.len()).collect();
    let sb: Vec<usize> = b.tensors().iter().map(|t| t.data.len()).collect();
    if sa != sb {
        return Err(Error::shape(format!("parameter layouts differ: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// `params -= lr · grads`, elementwise.
pub fn sgd_step<T: Real>(params: &mut impl Params<T>, grads: &impl Params<T>, lr: T) -> Result<()> {
    if lr < T::zero() {
        return Err(Error::Input("learning rate must be non-negative".into()));
    }
    check_same_layout(params, grads)?;
    let g = grads.tensors();
    for (p, g) in params.tensors_mut().into_iter().zip(g) {
        for (w, &d) in p.iter_mut().zip(g.data) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// `target = decay · target + (1 - decay) · source`, elementwise.
pub fn ema_blend<T: Real>(target: &mut impl Params<T>, source: &impl Params<T>, decay: T) -> Result<()> {
    check_same_layout(target, source)?;
    let s = source.tensors();
    let keep = T::one() - decay;
    for (t, s) in target.tensors_mut().into_iter().zip(s) {
        for (w, &v) in t.iter_mut().zip(s.data) {
            *w = decay * *w + keep * v;
        }
    }
    Ok(())
}

/// Zeroes every entry.
pub fn zero_params<T: Real>(p: &mut impl Params<T>) {
    for t in p.tensors_mut() {
        t.fill(T::zero());
    }
}

/// `acc += other`
pub fn accumulate<T: Real>(acc: &mut impl Params<T>, other: &impl Params<T>) -> Result<()> {
    check_same_layout(acc, other)?;
    let o = other.tensors();
    for (a, o) in acc.tensors_mut().into_iter().zip(o) {
        for (x, &y) in a.iter_mut().zip(o.data) {
            *x += y;
        }
    }
    Ok(())
}

pub fn scale_params<T: Real>(p: &mut impl Params<T>, s: T) {
    for t in p.tensors_mut() {
        for x in t.iter_mut() {
            *x *= s;
        }
    }
}

pub fn params_finite<T: Real>(p: &impl Params<T>) -> bool {
    p.tensors().iter().all(|t| all_finite(t.data))
}

/// Linear warmup: `base · min(1, step / warmup_steps)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearWarmup {
    pub base_lr: f64,
    pub warmup_steps: u64,
}

impl LinearWarmup {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.base_lr;
        }
        self.base_lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// First-order optimizer with a linear-warmup schedule.
///
/// `Sgd` applies [`sgd_step`]. `Adam` keeps flat first/second moment buffers
/// (beta1 = 0.9, beta2 = 0.999, eps = 1e-8) with bias correction.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub schedule: LinearWarmup,
    pub step: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, schedule: LinearWarmup) -> Self {
        Optimizer { kind, schedule, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Adam moment buffers; empty before the first Adam update.
    pub fn moments(&self) -> (&[T], &[T]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<T>, v: Vec<T>) -> Result<()> {
        if m.len() != v.len() {
            return Err(Error::shape("moment buffers differ in length"));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Learning rate that the next call to [`Optimizer::apply`] will use.
    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    /// Applies one update and advances the schedule. Returns the lr used.
    pub fn apply(&mut self, params: &mut impl Params<T>, grads: &impl Params<T>) -> Result<f64> {
        let lr = self.current_lr();
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, grads, T::lit(lr))?,
            OptimizerKind::Adam => self.adam(params, grads, lr)?,
        }
        self.step += 1;
        Ok(lr)
    }

    fn adam(&mut self, params: &mut impl Params<T>, grads: &impl Params<T>, lr: f64) -> Result<()> {
        check_same_layout(params, grads)?;
        let n = params.num_params();
        if self.m.len() != n {
            self.m = vec![T::zero(); n];
            self.v = vec![T::zero(); n];
        }
        let (b1, b2, eps) = (T::lit(0.9), T::lit(0.999), T::lit(1e-8));
        let t = (self.step + 1) as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let lr = T::lit(lr);
        let g = grads.tensors();
        let mut i = 0;
        for (p, g) in params.tensors_mut().into_iter().zip(g) {
            for (w, &d) in p.iter_mut().zip(g.data) {
                self.m[i] = b1 * self.m[i] + (T::one() - b1) * d;
                self.v[i] = b2 * self.v[i] + (T::one() - b2) * d * d;
                let mhat = self.m[i] / c1;
                let vhat = self.v[i] / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
                i += 1;
            }
        }
        Ok(())
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn all_finite<T: Real>(xs: &[T]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

/// Numerically stable softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}
