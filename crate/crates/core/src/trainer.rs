//! The training loop: mini-batch SGD with momentum on cross-entropy, with
//! the uncertainty regulariser switched on from iteration `Z`.
//!
//! Each step runs the backbone once, pushes the batch features into the
//! class queues, and (once regularisation is active) refits the tied
//! Gaussian over the queues, draws `t` virtual outliers per class and
//! applies the full objective.
//!
//! Random streams, all on `config.seed`:
//!
//! | stream                          | use                       |
//! |---------------------------------|---------------------------|
//! | 16                              | parameter initialisation  |
//! | 17                              | epoch shuffles            |
//! | 2³² + iteration·K + class       | outlier draws             |

use crate::datagen::LabeledExample;
use crate::density::{self, ClassQueue, DEFAULT_RIDGE};
use crate::error::{Result, VosError};
use crate::losses::{LossMode, LossReport, Objective, DEFAULT_BETA};
use crate::mathkit::{Matrix, RngState, Vector};
use crate::network::{Batch, LossGraph, Model, ModelConfig, ParamGradients};
use crate::synthesis::{self, DEFAULT_POOL_SIZE, DEFAULT_T};

pub const STREAM_INIT: u64 = 16;
pub const STREAM_SHUFFLE: u64 = 17;
pub const STREAM_SYNTHESIS: u64 = 1 << 32;

/// When the regulariser starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartIter {
    Absolute(usize),
    /// `⌈num/den · total_iters⌉`.
    Fraction { num: u64, den: u64 },
}

impl StartIter {
    pub fn resolve(&self, total_iters: usize) -> usize {
        match *self {
            StartIter::Absolute(z) => z,
            StartIter::Fraction { num, den } => {
                let total = total_iters as u128;
                ((num as u128 * total).div_ceil(den as u128)) as usize
            }
        }
    }

    /// `"1200"` (absolute), `"2/3"` or `"0.75"` (fractions).
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || VosError::InvalidArgument(format!("bad start iteration {s:?}"));
        if let Some((a, b)) = s.split_once('/') {
            let num: u64 = a.trim().parse().map_err(|_| bad())?;
            let den: u64 = b.trim().parse().map_err(|_| bad())?;
            if den == 0 || num > den {
                return Err(bad());
            }
            return Ok(StartIter::Fraction { num, den });
        }
        if let Some((int, frac)) = s.split_once('.') {
            if frac.is_empty() || frac.len() > 9 || !frac.bytes().all(|c| c.is_ascii_digit()) {
                return Err(bad());
            }
            let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
            let den = 10u64.pow(frac.len() as u32);
            let num = int * den + frac.parse::<u64>().map_err(|_| bad())?;
            if num > den {
                return Err(bad());
            }
            return Ok(StartIter::Fraction { num, den });
        }
        s.parse().map(StartIter::Absolute).map_err(|_| bad())
    }
}

impl std::fmt::Display for StartIter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StartIter::Absolute(z) => write!(f, "{z}"),
            StartIter::Fraction { num, den } => write!(f, "{num}/{den}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutlierSource {
    /// Low-likelihood samples from the fitted class Gaussians.
    Virtual,
    /// Fixed `N(0, scale²·I)` noise in feature space.
    GaussianNoise { scale: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub total_iters: usize,
    pub start: StartIter,
    pub beta: f64,
    pub t: usize,
    pub pool_size: usize,
    pub queue_capacity: usize,
    pub ridge: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub mode: LossMode,
    pub outliers: OutlierSource,
    pub seed: u64,
    pub model: ModelConfig,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            total_iters: 3000,
            start: StartIter::Fraction { num: 2, den: 3 },
            beta: DEFAULT_BETA,
            t: DEFAULT_T,
            pool_size: DEFAULT_POOL_SIZE,
            queue_capacity: 1000,
            ridge: DEFAULT_RIDGE,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 64,
            mode: LossMode::VosLogistic,
            outliers: OutlierSource::Virtual,
            seed: 0,
            model: ModelConfig::toy(),
            log_every: 50,
        }
    }
}

impl RunConfig {
    pub fn start_iter(&self) -> usize {
        self.start.resolve(self.total_iters)
    }

    pub fn objective(&self) -> Objective {
        Objective::new(self.mode, self.beta)
    }

    /// The model shape implied by the loss mode.
    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().for_mode(&self.mode)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VosError::InvalidArgument(m));
        if self.total_iters == 0 || self.batch_size == 0 || self.queue_capacity == 0 || self.log_every == 0 {
            return bad("iteration, batch, queue and log counts must be >= 1".into());
        }
        if self.start_iter() > self.total_iters {
            return bad(format!("start iteration {} exceeds total {}", self.start_iter(), self.total_iters));
        }
        if self.t == 0 || self.t > self.pool_size {
            return bad(format!("need 1 <= t <= pool size, got t = {} and M = {}", self.t, self.pool_size));
        }
        if !(self.ridge >= 0.0) {
            return bad(format!("ridge must be >= 0, got {}", self.ridge));
        }
        if !(self.learning_rate >= 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate, momentum and weight decay must be >= 0".into());
        }
        if let OutlierSource::GaussianNoise { scale } = self.outliers {
            if !(scale > 0.0) {
                return bad(format!("noise scale must be > 0, got {scale}"));
            }
        }
        self.objective().validate()?;
        self.model.validate()
    }
}

/// Mean losses over one logging window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    /// Steps completed at the end of the window.
    pub iter: usize,
    pub cls: f64,
    pub uncertainty: f64,
    pub total: f64,
}

pub const LOG_HEADER: &str = "iter,cls_loss,unc_loss,total_loss";

pub fn format_log(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.iter, r.cls, r.uncertainty, r.total));
    }
    s
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub report: LossReport,
    /// Number of outlier feature vectors used this step.
    pub outliers: usize,
    /// Classes skipped for lack of queued samples.
    pub skipped_classes: Vec<usize>,
}

/// Everything the loop mutates.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: RunConfig,
    model: Model,
    velocity: Vec<Vector>,
    queues: Vec<ClassQueue>,
    data: Vec<LabeledExample>,
    order: Vec<usize>,
    cursor: usize,
    shuffle_rng: RngState,
    iteration: usize,
    start_iter: usize,
    window: (usize, f64, f64, f64),
    log: Vec<LogRow>,
    step_losses: Vec<LossReport>,
    skipped: usize,
}

impl Trainer {
    pub fn new(config: RunConfig, data: Vec<LabeledExample>) -> Result<Self> {
        config.validate()?;
        let model_config = config.model_config();
        let k = model_config.num_classes;
        let d = model_config.input_dim();
        let mut counts = vec![0usize; k];
        for e in &data {
            if e.y >= k {
                return Err(VosError::ClassOutOfRange { class: e.y, num_classes: k });
            }
            if e.x.len() != d {
                return Err(VosError::DimensionMismatch { expected: d, got: e.x.len() });
            }
            counts[e.y] += 1;
        }
        if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &c)| c < 2) {
            return Err(VosError::InsufficientSamples { class, count });
        }
        let model = Model::init(model_config, &mut RngState::with_stream(config.seed, STREAM_INIT))?;
        Self::with_model(config, data, model)
    }

    /// Start from given parameters instead of a fresh initialisation.
    pub fn with_model(config: RunConfig, data: Vec<LabeledExample>, model: Model) -> Result<Self> {
        config.validate()?;
        if model.config != config.model_config() {
            return Err(VosError::InvalidArgument("model shape does not match the run config".into()));
        }
        let m = model.feature_dim();
        let queues = (0..model.num_classes())
            .map(|k| ClassQueue::new(k, config.queue_capacity, m))
            .collect::<Result<_>>()?;
        let velocity = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let order = (0..data.len()).collect();
        Ok(Self {
            shuffle_rng: RngState::with_stream(config.seed, STREAM_SHUFFLE),
            start_iter: config.start_iter(),
            config,
            model,
            velocity,
            queues,
            data,
            order,
            cursor: usize::MAX,
            iteration: 0,
            window: (0, 0.0, 0.0, 0.0),
            log: Vec::new(),
            step_losses: Vec::new(),
            skipped: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn start_iter(&self) -> usize {
        self.start_iter
    }

    pub fn queues(&self) -> &[ClassQueue] {
        &self.queues
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    /// Loss report of every step taken so far.
    pub fn step_losses(&self) -> &[LossReport] {
        &self.step_losses
    }

    /// Number of (step, class) pairs whose outliers were skipped.
    pub fn skipped_classes(&self) -> usize {
        self.skipped
    }

    /// Next mini-batch of a seeded shuffled epoch; the last batch of an epoch may be short.
    pub fn next_batch(&mut self) -> Result<Batch> {
        if self.cursor >= self.order.len() {
            self.shuffle_rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let end = (self.cursor + self.config.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        let rows: Vec<Vector> = idx.iter().map(|&i| self.data[i].x.clone()).collect();
        let labels = idx.iter().map(|&i| self.data[i].y).collect();
        Batch::new(Matrix::from_rows(&rows)?, labels)
    }

    pub fn regularization_active(&self) -> bool {
        self.iteration >= self.start_iter && (self.config.beta > 0.0 || self.config.mode.is_kplus1())
    }

    /// One optimisation step on `batch`.
    pub fn step(&mut self, batch: &Batch) -> Result<StepOutcome> {
        let active = self.regularization_active();
        let iteration = self.iteration;
        let objective = self.config.objective();
        let config = &self.config;
        let queues = &mut self.queues;
        let mut skipped_classes = Vec::new();
        let mut n_outliers = 0;

        let mut graph = LossGraph::new(&self.model);
        let report = *graph.forward_with(batch, &objective, |features| {
            for (s, &y) in batch.labels.iter().enumerate() {
                queues[y].enqueue(features.row(s).to_vec())?;
            }
            if !active {
                return Ok(None);
            }
            let outliers = synthesize_outliers(config, queues, iteration, features.cols(), &mut skipped_classes)?;
            n_outliers = outliers.len();
            Ok((!outliers.is_empty()).then_some(outliers))
        })?;

        for (term, v) in [("cls", report.cls), ("uncertainty", report.uncertainty), ("total", report.total)] {
            if !v.is_finite() {
                return Err(VosError::NonFiniteLoss { term, iteration });
            }
        }
        let grads = graph.backward()?;
        if !grads.is_finite() {
            return Err(VosError::NonFiniteLoss { term: "gradient", iteration });
        }
        drop(graph);
        self.apply_update(&grads);

        if !skipped_classes.is_empty() {
            log::warn!("iteration {iteration}: no outliers for classes {skipped_classes:?} (fewer than 2 queued features)");
            self.skipped += skipped_classes.len();
        }
        self.record(report);
        Ok(StepOutcome { report, outliers: n_outliers, skipped_classes })
    }

    /// `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
    fn apply_update(&mut self, grads: &ParamGradients) {
        let (lr, mu, wd) = (self.config.learning_rate, self.config.momentum, self.config.weight_decay);
        for ((p, g), v) in self.model.tensors_mut().into_iter().zip(&grads.tensors).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                let g = if wd > 0.0 { gi + wd * *pi } else { *gi };
                *vi = mu * *vi + g;
                *pi -= lr * *vi;
            }
        }
    }

    fn record(&mut self, report: LossReport) {
        self.iteration += 1;
        self.step_losses.push(report);
        let w = &mut self.window;
        w.0 += 1;
        w.1 += report.cls;
        w.2 += report.uncertainty;
        w.3 += report.total;
        if w.0 == self.config.log_every || self.iteration == self.config.total_iters {
            let n = w.0 as f64;
            self.log.push(LogRow { iter: self.iteration, cls: w.1 / n, uncertainty: w.2 / n, total: w.3 / n });
            *w = (0, 0.0, 0.0, 0.0);
        }
    }

    /// Run the remaining iterations.
    pub fn run(&mut self) -> Result<()> {
        while self.iteration < self.config.total_iters {
            let batch = self.next_batch()?;
            self.step(&batch)?;
        }
        Ok(())
    }
}

/// Outlier features for one step, class by class.
fn synthesize_outliers(
    config: &RunConfig,
    queues: &[ClassQueue],
    iteration: usize,
    dim: usize,
    skipped: &mut Vec<usize>,
) -> Result<Vec<Vector>> {
    let k = queues.len() as u64;
    let stream = |class: usize| STREAM_SYNTHESIS + iteration as u64 * k + class as u64;
    let mut out = Vec::new();
    match config.outliers {
        OutlierSource::GaussianNoise { scale } => {
            for class in 0..queues.len() {
                let mut rng = RngState::with_stream(config.seed, stream(class));
                out.extend(synthesis::gaussian_noise_outliers(dim, config.t, scale, &mut rng)?);
            }
        }
        OutlierSource::Virtual => {
            let (ready, missing): (Vec<&ClassQueue>, Vec<&ClassQueue>) = queues.iter().partition(|q| q.len() >= 2);
            skipped.extend(missing.iter().map(|q| q.class_id()));
            if ready.is_empty() {
                return Ok(out);
            }
            let ready: Vec<ClassQueue> = ready.into_iter().cloned().collect();
            let gaussian = density::estimate(&ready, config.ridge)?;
            for (idx, q) in ready.iter().enumerate() {
                let mut rng = RngState::with_stream(config.seed, stream(q.class_id()));
                let batch = synthesis::synthesize(&gaussian, idx, config.pool_size, config.t, &mut rng)?;
                out.extend(batch.outliers);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRow>,
    pub step_losses: Vec<LossReport>,
    pub skipped_classes: usize,
}

/// Train from scratch for `config.total_iters` steps.
pub fn train(config: &RunConfig, data: &[LabeledExample]) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), data.to_vec())?;
    trainer.run()?;
    Ok(TrainOutcome {
        log: trainer.log.clone(),
        step_losses: trainer.step_losses.clone(),
        skipped_classes: trainer.skipped,
        model: trainer.model,
    })
}
