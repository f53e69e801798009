//! Contrastive training of a projection head over a frozen base embedder.
//!
//! For a pair `(q, q', y)` with cosine distance `d` between the projected,
//! re-normalized embeddings, the batch loss is
//!
//! ```text
//! L(T) = 1/(2|T|) * sum[ y * d^2 + (1 - y) * max(0, m - d)^2 ]
//! ```
//!
//! Gradients are analytic and flow through the re-normalization.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::TrainingDataset;
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::vecmath::{check_dims, cosine_distance, EmbeddingVector};

/// Added to the projection norm during training so a collapsed projection
/// yields a finite (zero) direction instead of an error.
pub const TRAIN_NORM_EPS: f64 = 1e-12;

/// Affine map `x -> W x + b` applied before re-normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead<T: Scalar> {
    weight: Matrix<T>,
    bias: Vec<T>,
}

impl<T: Scalar> ProjectionHead<T> {
    pub fn new(weight: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        check_dims(weight.rows(), bias.len())?;
        if weight.rows() == 0 || weight.cols() == 0 {
            return Err(Error::InvalidVector);
        }
        if !weight.is_finite() || bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVector);
        }
        if weight.rows() < 2 {
            tracing::warn!("projection head with out_dim 1: cosine distance is degenerate");
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(dim: usize) -> Self {
        Self { weight: Matrix::identity(dim), bias: vec![T::zero(); dim] }
    }

    /// Gaussian init with standard deviation `1/sqrt(in_dim)` and zero bias.
    pub fn random<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        let data = (0..out_dim * in_dim)
            .map(|_| T::of(standard_normal(rng) * std))
            .collect();
        Self {
            weight: Matrix::from_vec(out_dim, in_dim, data).expect("sized"),
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &Matrix<T> {
        &self.weight
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    /// `W x + b` without normalization.
    pub fn project(&self, x: &[T]) -> Vec<T> {
        let mut z = self.weight.matvec(x);
        for (zi, &bi) in z.iter_mut().zip(&self.bias) {
            *zi = *zi + bi;
        }
        z
    }

    pub fn cast<U: Scalar>(&self) -> ProjectionHead<U> {
        ProjectionHead { weight: self.weight.cast(), bias: crate::scalar::cast_slice(&self.bias) }
    }

    fn apply_step(&mut self, grad: &HeadGradient<T>, lr: T) {
        for (w, &g) in self.weight.as_mut_slice().iter_mut().zip(grad.weight.as_slice()) {
            *w = *w - lr * g;
        }
        for (b, &g) in self.bias.iter_mut().zip(&grad.bias) {
            *b = *b - lr * g;
        }
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller; rand_distr is not worth a dependency for one call site
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Project and L2-normalize. Errors if the projection is exactly zero.
pub fn embed_with_head<T: Scalar>(
    base: &EmbeddingVector<T>,
    head: &ProjectionHead<T>,
) -> Result<EmbeddingVector<T>> {
    check_dims(head.in_dim(), base.dim())?;
    let z = head.project(base.as_slice());
    let n = crate::vecmath::norm(&z);
    if n == 0.0 {
        return Err(Error::ZeroNormVector);
    }
    EmbeddingVector::new(z.into_iter().map(|v| T::of(v.as_f64() / n)).collect())
}

/// One training example as embeddings: `(a, b, label)`.
#[derive(Debug, Clone)]
pub struct ContrastivePair<T: Scalar> {
    pub a: EmbeddingVector<T>,
    pub b: EmbeddingVector<T>,
    pub label: u8,
}

impl<T: Scalar> ContrastivePair<T> {
    pub fn new(a: EmbeddingVector<T>, b: EmbeddingVector<T>, label: u8) -> Self {
        assert!(label <= 1, "label must be 0 or 1");
        Self { a, b, label }
    }
}

/// Per-pair term `y d^2 + (1-y) max(0, m-d)^2` (before the 1/(2|T|) factor).
#[inline]
pub fn pair_term(distance: f64, label: u8, margin: f64) -> f64 {
    if label == 1 {
        distance * distance
    } else {
        let h = (margin - distance).max(0.0);
        h * h
    }
}

/// Batch contrastive loss over already-embedded pairs.
pub fn contrastive_loss<T: Scalar>(batch: &[ContrastivePair<T>], margin: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let dim = batch[0].a.dim();
    let mut sum = 0.0;
    for p in batch {
        check_dims(dim, p.a.dim())?;
        check_dims(dim, p.b.dim())?;
        sum += pair_term(cosine_distance(&p.a, &p.b)?, p.label, margin);
    }
    Ok(sum / (2.0 * batch.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient<T: Scalar> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> HeadGradient<T> {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self { weight: Matrix::zeros(out_dim, in_dim), bias: vec![T::zero(); out_dim] }
    }

    pub fn is_zero(&self) -> bool {
        self.weight.as_slice().iter().chain(&self.bias).all(|v| *v == T::zero())
    }
}

struct Projected<T> {
    z: Vec<T>,
    raw_norm: T,
    denom: T,
    unit: Vec<T>,
}

fn project_for_training<T: Scalar>(head: &ProjectionHead<T>, x: &[T]) -> Projected<T> {
    let z = head.project(x);
    let raw_norm = z.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
    let denom = raw_norm + T::of(TRAIN_NORM_EPS);
    let unit = z.iter().map(|&v| v / denom).collect();
    Projected { z, raw_norm, denom, unit }
}

fn dot_t<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn validate_batch<T: Scalar>(batch: &[ContrastivePair<T>], head: &ProjectionHead<T>) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for p in batch {
        check_dims(head.in_dim(), p.a.dim())?;
        check_dims(head.in_dim(), p.b.dim())?;
    }
    Ok(())
}

/// Loss of the head on a batch of base embeddings, using the training-time
/// normalization (norm + [`TRAIN_NORM_EPS`]).
pub fn head_loss<T: Scalar>(batch: &[ContrastivePair<T>], head: &ProjectionHead<T>, margin: T) -> Result<T> {
    validate_batch(batch, head)?;
    let mut sum = T::zero();
    for p in batch {
        let ua = project_for_training(head, p.a.as_slice()).unit;
        let ub = project_for_training(head, p.b.as_slice()).unit;
        let d = T::one() - dot_t(&ua, &ub);
        sum = sum + pair_term_t(d, p.label, margin);
    }
    Ok(sum / T::of(2.0 * batch.len() as f64))
}

fn pair_term_t<T: Scalar>(d: T, label: u8, margin: T) -> T {
    if label == 1 {
        d * d
    } else {
        let h = (margin - d).max(T::zero());
        h * h
    }
}

/// Loss and analytic gradient of [`head_loss`] with respect to the head's
/// weight and bias. At the hinge kink (`d == m`) the subgradient 0 is used.
pub fn loss_gradient<T: Scalar>(
    batch: &[ContrastivePair<T>],
    head: &ProjectionHead<T>,
    margin: T,
) -> Result<(T, HeadGradient<T>)> {
    validate_batch(batch, head)?;
    let scale = T::one() / T::of(2.0 * batch.len() as f64);
    let two = T::of(2.0);
    let mut grad = HeadGradient::zeros(head.out_dim(), head.in_dim());
    let mut sum = T::zero();
    for p in batch {
        let pa = project_for_training(head, p.a.as_slice());
        let pb = project_for_training(head, p.b.as_slice());
        let d = T::one() - dot_t(&pa.unit, &pb.unit);
        sum = sum + pair_term_t(d, p.label, margin);

        let dl_dd = if p.label == 1 {
            two * d
        } else if d < margin {
            -two * (margin - d)
        } else {
            T::zero()
        };
        if dl_dd == T::zero() {
            continue;
        }
        // d = 1 - s  =>  dL/ds = -dL/dd
        let g_s = -dl_dd * scale;
        accumulate_side(&mut grad, &pa, &pb.unit, g_s, p.a.as_slice());
        accumulate_side(&mut grad, &pb, &pa.unit, g_s, p.b.as_slice());
    }
    Ok((sum * scale, grad))
}

/// Back-propagate `g_s * other` through `u = z / (|z| + eps)` and `z = W x + b`.
fn accumulate_side<T: Scalar>(grad: &mut HeadGradient<T>, own: &Projected<T>, other: &[T], g_s: T, x: &[T]) {
    let g_u: Vec<T> = other.iter().map(|&o| g_s * o).collect();
    let zg = dot_t(&own.z, &g_u);
    let correction = if own.raw_norm > T::zero() {
        zg / (own.raw_norm * own.denom * own.denom)
    } else {
        T::zero()
    };
    for (i, (&gu, &zi)) in g_u.iter().zip(&own.z).enumerate() {
        let g_z = gu / own.denom - zi * correction;
        grad.bias[i] = grad.bias[i] + g_z;
        for (w, &xj) in grad.weight.row_mut(i).iter_mut().zip(x) {
            *w = *w + g_z * xj;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub shuffle: bool,
    pub rng_seed: u64,
    /// `None` keeps the base dimension and starts from the identity map.
    pub out_dim: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.5,
            learning_rate: 2e-5,
            epochs: 1,
            batch_size: 16,
            warmup_steps: 100,
            shuffle: true,
            rng_seed: 0,
            out_dim: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.margin > 0.0 && self.margin <= 2.0) {
            problems.push(format!("margin {} outside (0, 2]", self.margin));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            problems.push("epochs must be >= 1".into());
        }
        if self.out_dim == Some(0) {
            problems.push("out_dim must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Linear warmup from 0 to `learning_rate` over `warmup_steps`, then constant.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub head: ProjectionHead<f64>,
    /// Minibatch loss before each update.
    pub step_losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.step_losses.first().copied().unwrap_or(0.0)
    }

    /// Mean loss over the final 10% of steps (at least one step).
    pub fn final_window_loss(&self) -> f64 {
        let n = self.step_losses.len();
        if n == 0 {
            return 0.0;
        }
        let w = n.div_ceil(10).max(1);
        self.step_losses[n - w..].iter().sum::<f64>() / w as f64
    }
}

/// Train a projection head on `dataset` with SGD and linear warmup.
/// Deterministic given `config.rng_seed`.
pub fn train(dataset: &TrainingDataset, base: &dyn Embedder, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut cache: HashMap<&str, EmbeddingVector<f64>> = HashMap::new();
    let mut pairs = Vec::with_capacity(dataset.len());
    for p in dataset.pairs() {
        for text in [p.text_a.as_str(), p.text_b.as_str()] {
            if !cache.contains_key(text) {
                let e = base.embed(text)?;
                check_dims(base.dim(), e.dim()).map_err(|e| Error::EmbedderFailure(e.to_string()))?;
                cache.insert(text, e.cast());
            }
        }
        pairs.push(ContrastivePair::new(
            cache[p.text_a.as_str()].clone(),
            cache[p.text_b.as_str()].clone(),
            p.label,
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut head = match config.out_dim {
        None => ProjectionHead::identity(base.dim()),
        Some(out) => ProjectionHead::random(out, base.dim(), &mut rng),
    };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut step_losses = Vec::new();
    let mut step = 0usize;
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| pairs[i].clone()));
            let (loss, grad) = loss_gradient(&batch, &head, config.margin)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("epoch {epoch}, batch of {} pairs, loss {loss}", batch.len()),
                });
            }
            step_losses.push(loss);
            let lr = config.learning_rate_at(step);
            if lr > 0.0 {
                head.apply_step(&grad, lr);
            }
            step += 1;
        }
        tracing::info!(epoch, steps = step, loss = step_losses.last().copied().unwrap_or(0.0), "epoch done");
    }
    let report = TrainReport { head, step_losses };
    tracing::info!(
        initial = report.initial_loss(),
        final_window = report.final_window_loss(),
        "training finished"
    );
    Ok(report)
}
