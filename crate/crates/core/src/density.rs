//! Class-conditional feature queues and the tied-covariance Gaussian fitted
//! over their contents.
//!
//! Each class keeps a FIFO of its most recent feature vectors. Estimation
//! uses the per-class means and one pooled covariance shared by all classes,
//! regularised by `ridge · I` so the Cholesky factor always exists.

use std::collections::VecDeque;

use crate::error::{Result, VosError};
use crate::mathkit::{self, Matrix, RngState, Vector};

pub const DEFAULT_RIDGE: f64 = 1e-4;

/// Fixed-capacity FIFO of feature vectors for one class.
#[derive(Debug, Clone)]
pub struct ClassQueue {
    class_id: usize,
    capacity: usize,
    dim: usize,
    buffer: VecDeque<Vector>,
}

impl ClassQueue {
    pub fn new(class_id: usize, capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(VosError::InvalidArgument("queue capacity must be at least 1".into()));
        }
        Ok(Self { class_id, capacity, dim, buffer: VecDeque::with_capacity(capacity) })
    }

    /// Push `feature`; returns the evicted oldest vector when the queue was full.
    pub fn enqueue(&mut self, feature: Vector) -> Result<Option<Vector>> {
        if feature.len() != self.dim {
            return Err(VosError::DimensionMismatch { expected: self.dim, got: feature.len() });
        }
        let evicted = if self.buffer.len() == self.capacity { self.buffer.pop_front() } else { None };
        self.buffer.push_back(feature);
        Ok(evicted)
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Vector> {
        self.buffer.iter()
    }
}

/// Per-class means with one shared covariance, plus its cached factorisation.
#[derive(Debug, Clone)]
pub struct GaussianModel {
    means: Vec<Vector>,
    class_ids: Vec<usize>,
    tied_cov: Matrix,
    chol: Matrix,
    log_det: f64,
}

impl GaussianModel {
    /// Build from explicit parameters. `cov` must be SPD.
    pub fn from_parameters(means: Vec<Vector>, cov: Matrix) -> Result<Self> {
        let dim = cov.rows();
        if means.is_empty() {
            return Err(VosError::Empty("gaussian means"));
        }
        for m in &means {
            if m.len() != dim {
                return Err(VosError::DimensionMismatch { expected: dim, got: m.len() });
            }
        }
        let chol = mathkit::cholesky(&cov)?;
        let log_det = 2.0 * (0..dim).map(|i| chol.get(i, i).ln()).sum::<f64>();
        let class_ids = (0..means.len()).collect();
        Ok(Self { means, class_ids, tied_cov: cov, chol, log_det })
    }

    pub fn dim(&self) -> usize {
        self.tied_cov.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[Vector] {
        &self.means
    }

    pub fn mean(&self, class: usize) -> Result<&Vector> {
        self.check_class(class)?;
        Ok(&self.means[class])
    }

    /// Class label behind each model index (the queue's `class_id` when built
    /// by [`estimate`], the index itself otherwise).
    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn tied_cov(&self) -> &Matrix {
        &self.tied_cov
    }

    pub fn chol(&self) -> &Matrix {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.means.len() {
            return Err(VosError::ClassOutOfRange { class, num_classes: self.means.len() });
        }
        Ok(())
    }

    /// `log N(v; μ_class, Σ)`, Mahalanobis term via a triangular solve.
    pub fn log_density(&self, class: usize, v: &[f64]) -> Result<f64> {
        self.check_class(class)?;
        let m = self.dim();
        if v.len() != m {
            return Err(VosError::DimensionMismatch { expected: m, got: v.len() });
        }
        let diff: Vector = v.iter().zip(&self.means[class]).map(|(a, b)| a - b).collect();
        let y = mathkit::solve_lower(&self.chol, &diff);
        let maha = mathkit::dot(&y, &y);
        Ok(-0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * self.log_det - 0.5 * maha)
    }

    /// `n` draws `μ_class + L·z`, `z ~ N(0, I)`.
    pub fn sample(&self, class: usize, n: usize, rng: &mut RngState) -> Result<Vec<Vector>> {
        self.check_class(class)?;
        if n == 0 {
            return Err(VosError::Empty("sample count"));
        }
        let m = self.dim();
        let mean = &self.means[class];
        let mut z = vec![0.0; m];
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            z.iter_mut().for_each(|zi| *zi = rng.normal());
            let mut v = mathkit::lower_matvec(&self.chol, &z);
            v.iter_mut().zip(mean).for_each(|(vi, mi)| *vi += mi);
            out.push(v);
        }
        Ok(out)
    }
}

/// Fit means and the pooled covariance over the queues' current contents.
///
/// Model index `i` corresponds to `queues[i]`.
pub fn estimate(queues: &[ClassQueue], ridge: f64) -> Result<GaussianModel> {
    if queues.is_empty() {
        return Err(VosError::Empty("class queues"));
    }
    if !(ridge >= 0.0) {
        return Err(VosError::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
    }
    let dim = queues[0].dim();
    for q in queues {
        if q.dim() != dim {
            return Err(VosError::DimensionMismatch { expected: dim, got: q.dim() });
        }
        if q.len() < 2 {
            return Err(VosError::InsufficientSamples { class: q.class_id(), count: q.len() });
        }
    }

    let means: Vec<Vector> = queues
        .iter()
        .map(|q| {
            let mut mu = vec![0.0; dim];
            for f in q.iter() {
                mathkit::axpy(1.0, f, &mut mu);
            }
            let n = q.len() as f64;
            mu.iter_mut().for_each(|x| *x /= n);
            mu
        })
        .collect();

    // Lower triangle only, mirrored at the end.
    let mut scatter = Matrix::zeros(dim, dim);
    let mut diff = vec![0.0; dim];
    let mut total = 0usize;
    for (q, mu) in queues.iter().zip(&means) {
        for f in q.iter() {
            diff.iter_mut().zip(f.iter().zip(mu)).for_each(|(d, (x, m))| *d = x - m);
            for i in 0..dim {
                let di = diff[i];
                mathkit::axpy(di, &diff[..=i], &mut scatter.row_mut(i)[..=i]);
            }
        }
        total += q.len();
    }
    let n = total as f64;
    for i in 0..dim {
        for j in 0..=i {
            let v = scatter.get(i, j) / n + if i == j { ridge } else { 0.0 };
            scatter.set(i, j, v);
            scatter.set(j, i, v);
        }
    }

    let mut model = GaussianModel::from_parameters(means, scatter)?;
    model.class_ids = queues.iter().map(ClassQueue::class_id).collect();
    Ok(model)
}
