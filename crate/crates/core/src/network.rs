//! MLP backbone, linear classification head, learnable energy weights and
//! the scalar φ head, with a hand-written reverse pass for the fixed loss
//! graph.
//!
//! Dense layers store their weight as `out × in` and compute `x·Wᵀ + b`.
//! The classification weight is kept as `m × C` so that `f = W_clsᵀ h`.
//! `C` is `K`, or `K + 1` when the extra outlier class is enabled.

use crate::error::{Result, VosError};
use crate::losses::{self, LossMode, LossReport, Objective};
use crate::mathkit::{self, Matrix, RngState, Vector};

pub const DEFAULT_PHI_HIDDEN: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `[d, hidden…, m]`; at least two entries.
    pub layer_sizes: Vec<usize>,
    pub num_classes: usize,
    pub phi_hidden: usize,
    pub cls_bias: bool,
    /// Widen the classification head by one outlier class.
    pub extra_class: bool,
    /// Energy weights pinned at 1 instead of `softplus(w_raw)`.
    pub constant_w: bool,
}

impl ModelConfig {
    /// The toy defaults: 2 → 128 → 128 → 64 features, 3 classes.
    pub fn toy() -> Self {
        Self {
            layer_sizes: vec![2, 128, 128, 64],
            num_classes: 3,
            phi_hidden: DEFAULT_PHI_HIDDEN,
            cls_bias: false,
            extra_class: false,
            constant_w: false,
        }
    }

    pub fn for_mode(mut self, mode: &LossMode) -> Self {
        self.extra_class = matches!(mode, LossMode::KPlusOne);
        self.constant_w = matches!(mode, LossMode::ConstantW);
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated layer sizes")
    }

    pub fn num_outputs(&self) -> usize {
        self.num_classes + usize::from(self.extra_class)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(VosError::InvalidArgument("backbone needs at least input and feature sizes".into()));
        }
        if self.layer_sizes.contains(&0) || self.num_classes == 0 || self.phi_hidden == 0 {
            return Err(VosError::InvalidArgument("layer sizes and class count must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vector,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Matrix::zeros(outputs, inputs), bias: vec![0.0; outputs] }
    }

    /// Uniform in `±√(6/(fan_in+fan_out))`, zero bias.
    pub fn glorot(inputs: usize, outputs: usize, rng: &mut RngState) -> Self {
        let mut layer = Self::zeros(inputs, outputs);
        glorot_fill(layer.weight.as_mut_slice(), inputs, outputs, rng);
        layer
    }

    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn fan_in_uniform(inputs: usize, outputs: usize, rng: &mut RngState) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut layer = Self::zeros(inputs, outputs);
        layer.weight.as_mut_slice().iter_mut().for_each(|x| *x = rng.uniform_range(-bound, bound));
        layer.bias.iter_mut().for_each(|x| *x = rng.uniform_range(-bound, bound));
        layer
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vector {
        (0..self.outputs()).map(|o| self.bias[o] + mathkit::dot(self.weight.row(o), x)).collect()
    }

    /// Row-wise forward over a batch.
    pub fn forward_batch(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.outputs());
        for s in 0..x.rows() {
            let xs = x.row(s);
            let ys = out.row_mut(s);
            for (o, y) in ys.iter_mut().enumerate() {
                *y = self.bias[o] + mathkit::dot(self.weight.row(o), xs);
            }
        }
        out
    }
}

fn glorot_fill(w: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut RngState) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    w.iter_mut().for_each(|x| *x = rng.uniform_range(-bound, bound));
}

#[inline]
fn relu_in_place(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub layers: Vec<Dense>,
}

impl Backbone {
    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().expect("non-empty backbone").outputs()
    }

    /// `h(x)`: ReLU after every layer but the last.
    pub fn forward_features(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.input_dim() {
            return Err(VosError::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        let last = self.layers.len() - 1;
        let mut a = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            a = layer.forward(&a);
            if i < last {
                relu_in_place(&mut a);
            }
        }
        Ok(a)
    }

    /// All activations, `[x, a_1, …, h]`.
    fn forward_trace(&self, x: &Matrix) -> Vec<Matrix> {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward_batch(acts.last().expect("seeded"));
            if i < last {
                relu_in_place(z.as_mut_slice());
            }
            acts.push(z);
        }
        acts
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(VosError::DimensionMismatch { expected: self.input_dim(), got: x.cols() });
        }
        Ok(self.forward_trace(x).pop().expect("non-empty trace"))
    }
}

/// Scalar → hidden (ReLU) → scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiHead {
    pub hidden: Dense,
    pub output: Dense,
}

impl PhiHead {
    pub fn eval(&self, e: f64) -> f64 {
        self.eval_traced(e).1
    }

    /// Returns the hidden pre-activation and the output.
    fn eval_traced(&self, e: f64) -> (Vector, f64) {
        let z: Vector = (0..self.hidden.outputs())
            .map(|j| self.hidden.bias[j] + self.hidden.weight.get(j, 0) * e)
            .collect();
        let out = self.output.bias[0]
            + z.iter().zip(self.output.weight.row(0)).map(|(zj, w)| zj.max(0.0) * w).sum::<f64>();
        (z, out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    /// `m × C`.
    pub w_cls: Matrix,
    pub cls_bias: Option<Vector>,
    /// Energy weights before softplus.
    pub w_raw: Vector,
    pub phi: PhiHead,
    pub num_classes: usize,
    pub constant_w: bool,
}

impl Heads {
    pub fn num_outputs(&self) -> usize {
        self.w_cls.cols()
    }

    /// `f = W_clsᵀ h (+ b)`.
    pub fn logits(&self, h: &[f64]) -> Result<Vector> {
        let mut f = self.w_cls.matvec_transposed(h)?;
        if let Some(b) = &self.cls_bias {
            f.iter_mut().zip(b).for_each(|(fi, bi)| *fi += bi);
        }
        Ok(f)
    }

    fn logits_batch(&self, h: &Matrix) -> Result<Matrix> {
        let mut f = h.matmul(&self.w_cls)?;
        if let Some(b) = &self.cls_bias {
            for s in 0..f.rows() {
                f.row_mut(s).iter_mut().zip(b).for_each(|(fi, bi)| *fi += bi);
            }
        }
        Ok(f)
    }

    /// Effective `w_k`: all ones in constant mode, else `softplus(w_raw_k)`.
    pub fn energy_weights(&self) -> Vector {
        if self.constant_w {
            vec![1.0; self.num_classes]
        } else {
            self.w_raw.iter().map(|&r| mathkit::softplus(r)).collect()
        }
    }

    /// `ln w_k`, computed without forming `w_k` so it stays finite when
    /// `softplus(w_raw_k)` underflows.
    pub fn log_energy_weights(&self) -> Vector {
        if self.constant_w {
            vec![0.0; self.num_classes]
        } else {
            self.w_raw.iter().map(|&r| mathkit::log_softplus(r)).collect()
        }
    }

    /// `E = −log Σ_k w_k e^{f_k}` over the first `K` logits.
    pub fn energy(&self, f: &[f64]) -> Result<f64> {
        if f.len() < self.num_classes {
            return Err(VosError::DimensionMismatch { expected: self.num_classes, got: f.len() });
        }
        let shifted: Vector = f[..self.num_classes].iter().zip(self.log_energy_weights()).map(|(fk, lw)| fk + lw).collect();
        Ok(-mathkit::logsumexp(&shifted)?)
    }
}

/// Max-shifted softmax over the logits.
pub fn softmax_posterior(f: &[f64]) -> Vector {
    mathkit::softmax(f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub heads: Heads,
}

impl Model {
    /// Glorot backbone and classification weights with zero biases, fan-in
    /// uniform φ layers, `w_raw = softplus⁻¹(1)`.
    pub fn init(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_sizes
            .windows(2)
            .map(|io| Dense::glorot(io[0], io[1], rng))
            .collect();
        let m = config.feature_dim();
        let c = config.num_outputs();
        let mut w_cls = Matrix::zeros(m, c);
        glorot_fill(w_cls.as_mut_slice(), m, c, rng);
        let phi = PhiHead {
            hidden: Dense::fan_in_uniform(1, config.phi_hidden, rng),
            output: Dense::fan_in_uniform(config.phi_hidden, 1, rng),
        };
        let heads = Heads {
            w_cls,
            cls_bias: config.cls_bias.then(|| vec![0.0; c]),
            w_raw: vec![mathkit::softplus_inv(1.0); config.num_classes],
            phi,
            num_classes: config.num_classes,
            constant_w: config.constant_w,
        };
        Ok(Self { backbone: Backbone { layers }, heads, config })
    }

    /// Every parameter zero; `w_raw` at `softplus⁻¹(1)`.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layers = config.layer_sizes.windows(2).map(|io| Dense::zeros(io[0], io[1])).collect();
        let c = config.num_outputs();
        let heads = Heads {
            w_cls: Matrix::zeros(config.feature_dim(), c),
            cls_bias: config.cls_bias.then(|| vec![0.0; c]),
            w_raw: vec![mathkit::softplus_inv(1.0); config.num_classes],
            phi: PhiHead { hidden: Dense::zeros(1, config.phi_hidden), output: Dense::zeros(config.phi_hidden, 1) },
            num_classes: config.num_classes,
            constant_w: config.constant_w,
        };
        Ok(Self { backbone: Backbone { layers }, heads, config })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn forward_features(&self, x: &[f64]) -> Result<Vector> {
        self.backbone.forward_features(x)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vector> {
        self.heads.logits(&self.forward_features(x)?)
    }

    /// Features and logits for every row of `x`.
    pub fn forward_batch(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let h = self.backbone.forward_batch(x)?;
        let f = self.heads.logits_batch(&h)?;
        Ok((h, f))
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.backbone.layers.len() {
            names.push(format!("backbone.{i}.weight"));
            names.push(format!("backbone.{i}.bias"));
        }
        names.push("heads.w_cls".into());
        if self.heads.cls_bias.is_some() {
            names.push("heads.cls_bias".into());
        }
        names.extend(
            ["heads.w_raw", "phi.0.weight", "phi.0.bias", "phi.1.weight", "phi.1.bias"].map(String::from),
        );
        names
    }

    /// Parameter tensors in declaration order (the checkpoint order).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.backbone.layers {
            out.push(l.weight.as_slice());
            out.push(&l.bias);
        }
        out.push(self.heads.w_cls.as_slice());
        if let Some(b) = &self.heads.cls_bias {
            out.push(b);
        }
        out.push(&self.heads.w_raw);
        let phi = &self.heads.phi;
        out.extend([phi.hidden.weight.as_slice(), &phi.hidden.bias, phi.output.weight.as_slice(), &phi.output.bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.backbone.layers {
            out.push(l.weight.as_mut_slice());
            out.push(&mut l.bias);
        }
        out.push(self.heads.w_cls.as_mut_slice());
        if let Some(b) = &mut self.heads.cls_bias {
            out.push(b);
        }
        out.push(&mut self.heads.w_raw);
        let phi = &mut self.heads.phi;
        out.push(phi.hidden.weight.as_mut_slice());
        out.push(&mut phi.hidden.bias);
        out.push(phi.output.weight.as_mut_slice());
        out.push(&mut phi.output.bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// One gradient buffer per parameter tensor, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub names: Vec<String>,
    pub tensors: Vec<Vector>,
}

impl ParamGradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            names: model.tensor_names(),
            tensors: model.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.tensors[i].as_slice())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|g| g.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().flatten().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// ID mini-batch: one input per row.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(VosError::DimensionMismatch { expected: inputs.rows(), got: labels.len() });
        }
        if labels.is_empty() {
            return Err(VosError::Empty("batch"));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Cached intermediates of one forward pass through the loss graph.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    objective: Objective,
    activations: Vec<Matrix>,
    logits_id: Matrix,
    labels: Vec<usize>,
    outliers: Option<Matrix>,
    logits_out: Option<Matrix>,
    energy_id: Vector,
    energy_out: Vector,
    phi_pre_id: Vec<Vector>,
    phi_pre_out: Vec<Vector>,
    phi_id: Vector,
    phi_out: Vector,
    report: LossReport,
}

impl ForwardPass {
    pub fn report(&self) -> &LossReport {
        &self.report
    }

    /// Backbone features of the ID batch, one row per sample.
    pub fn features(&self) -> &Matrix {
        self.activations.last().expect("non-empty trace")
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits_id
    }

    pub fn energy_id(&self) -> &[f64] {
        &self.energy_id
    }

    pub fn energy_out(&self) -> &[f64] {
        &self.energy_out
    }

    pub fn phi_id(&self) -> &[f64] {
        &self.phi_id
    }

    pub fn phi_out(&self) -> &[f64] {
        &self.phi_out
    }
}

/// The training loss graph over one model. `backward` needs a prior `forward`.
pub struct LossGraph<'m> {
    model: &'m Model,
    pass: Option<ForwardPass>,
}

impl<'m> LossGraph<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self { model, pass: None }
    }

    pub fn pass(&self) -> Option<&ForwardPass> {
        self.pass.as_ref()
    }

    pub fn into_pass(self) -> Option<ForwardPass> {
        self.pass
    }

    /// Evaluate the objective on an ID batch and optional outlier features.
    ///
    /// Outliers are constants: gradients reach them only through the heads.
    /// Passing `None` disables the uncertainty branch.
    pub fn forward(&mut self, batch: &Batch, outliers: Option<&[Vector]>, objective: &Objective) -> Result<&LossReport> {
        self.forward_with(batch, objective, |_| Ok(outliers.map(<[Vector]>::to_vec)))
    }

    /// Like [`forward`](Self::forward), but the outliers are produced from the
    /// batch's backbone features once they are known.
    pub fn forward_with<F>(&mut self, batch: &Batch, objective: &Objective, outliers: F) -> Result<&LossReport>
    where
        F: FnOnce(&Matrix) -> Result<Option<Vec<Vector>>>,
    {
        let pass = forward_pass(self.model, batch, outliers, objective)?;
        Ok(&self.pass.insert(pass).report)
    }

    pub fn backward(&self) -> Result<ParamGradients> {
        let pass = self.pass.as_ref().ok_or(VosError::NoForwardPass)?;
        Ok(backward_pass(self.model, pass))
    }
}

fn forward_pass<F>(model: &Model, batch: &Batch, make_outliers: F, objective: &Objective) -> Result<ForwardPass>
where
    F: FnOnce(&Matrix) -> Result<Option<Vec<Vector>>>,
{
    objective.validate()?;
    let heads = &model.heads;
    let k = heads.num_classes;
    if objective.mode.is_kplus1() != model.config.extra_class {
        return Err(VosError::InvalidArgument("loss mode does not match the model's head width".into()));
    }
    if batch.inputs.cols() != model.backbone.input_dim() {
        return Err(VosError::DimensionMismatch { expected: model.backbone.input_dim(), got: batch.inputs.cols() });
    }
    for &y in &batch.labels {
        if y >= k {
            return Err(VosError::ClassOutOfRange { class: y, num_classes: k });
        }
    }
    let activations = model.backbone.forward_trace(&batch.inputs);
    let outliers = match make_outliers(activations.last().expect("trace"))? {
        Some(v) if v.is_empty() => return Err(VosError::Empty("outlier batch")),
        Some(v) => Some(Matrix::from_rows(&v)?),
        None => None,
    };
    if let Some(v) = &outliers {
        if v.cols() != model.feature_dim() {
            return Err(VosError::DimensionMismatch { expected: model.feature_dim(), got: v.cols() });
        }
    }
    let logits_id = heads.logits_batch(activations.last().expect("trace"))?;
    let logits_out = outliers.as_ref().map(|v| heads.logits_batch(v)).transpose()?;

    let n = batch.len();
    let mut cls_sum: f64 = (0..n)
        .map(|s| losses::cross_entropy(logits_id.row(s), batch.labels[s]))
        .sum::<Result<f64>>()?;
    let mut cls_count = n;

    let mut energy_id = Vec::new();
    let mut energy_out = Vec::new();
    let (mut phi_pre_id, mut phi_pre_out, mut phi_id, mut phi_out) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut uncertainty = 0.0;

    if let Some(f_out) = &logits_out {
        if objective.mode.is_kplus1() {
            for s in 0..f_out.rows() {
                cls_sum += losses::kplus1_cross_entropy(f_out.row(s), k, k)?;
            }
            cls_count += f_out.rows();
        } else {
            energy_id = (0..n).map(|s| heads.energy(logits_id.row(s))).collect::<Result<_>>()?;
            energy_out = (0..f_out.rows()).map(|s| heads.energy(f_out.row(s))).collect::<Result<_>>()?;
            match objective.mode {
                LossMode::SquaredHinge { m_in, m_out } => {
                    uncertainty = losses::hinge_uncertainty_loss(&energy_id, &energy_out, m_in, m_out)?;
                }
                _ => {
                    (phi_pre_id, phi_id) = energy_id.iter().map(|&e| heads.phi.eval_traced(e)).unzip();
                    (phi_pre_out, phi_out) = energy_out.iter().map(|&e| heads.phi.eval_traced(e)).unzip();
                    uncertainty = losses::logistic_uncertainty(&phi_id, &phi_out)?;
                }
            }
        }
    }
    let report = LossReport::new(cls_sum / cls_count as f64, uncertainty, objective.beta);

    Ok(ForwardPass {
        objective: objective.clone(),
        activations,
        logits_id,
        labels: batch.labels.clone(),
        outliers,
        logits_out,
        energy_id,
        energy_out,
        phi_pre_id,
        phi_pre_out,
        phi_id,
        phi_out,
        report,
    })
}

/// Gradient accumulators shaped like the model.
struct GradAccum {
    layers: Vec<(Matrix, Vector)>,
    w_cls: Matrix,
    cls_bias: Option<Vector>,
    w_raw: Vector,
    phi_w1: Vector,
    phi_b1: Vector,
    phi_w2: Vector,
    phi_b2: f64,
}

impl GradAccum {
    fn new(model: &Model) -> Self {
        let h = model.config.phi_hidden;
        Self {
            layers: model
                .backbone
                .layers
                .iter()
                .map(|l| (Matrix::zeros(l.outputs(), l.inputs()), vec![0.0; l.outputs()]))
                .collect(),
            w_cls: Matrix::zeros(model.heads.w_cls.rows(), model.heads.w_cls.cols()),
            cls_bias: model.heads.cls_bias.as_ref().map(|b| vec![0.0; b.len()]),
            w_raw: vec![0.0; model.heads.w_raw.len()],
            phi_w1: vec![0.0; h],
            phi_b1: vec![0.0; h],
            phi_w2: vec![0.0; h],
            phi_b2: 0.0,
        }
    }

    fn into_gradients(self, model: &Model) -> ParamGradients {
        let mut tensors = Vec::new();
        for (w, b) in self.layers {
            tensors.push(w.as_slice().to_vec());
            tensors.push(b);
        }
        tensors.push(self.w_cls.as_slice().to_vec());
        if let Some(b) = self.cls_bias {
            tensors.push(b);
        }
        tensors.extend([self.w_raw, self.phi_w1, self.phi_b1, self.phi_w2, vec![self.phi_b2]]);
        ParamGradients { names: model.tensor_names(), tensors }
    }

    /// Back through φ for one scalar; returns `dφ/dE · upstream`.
    fn phi_backward(&mut self, phi: &PhiHead, e: f64, pre: &[f64], upstream: f64) -> f64 {
        self.phi_b2 += upstream;
        let w2 = phi.output.weight.row(0);
        let mut de = 0.0;
        for j in 0..pre.len() {
            if pre[j] > 0.0 {
                self.phi_w2[j] += upstream * pre[j];
                let dz = upstream * w2[j];
                self.phi_w1[j] += dz * e;
                self.phi_b1[j] += dz;
                de += dz * phi.hidden.weight.get(j, 0);
            }
        }
        de
    }

    /// Back through `E = −log Σ w_k e^{f_k}`; adds into `df` and `w_raw`.
    fn energy_backward(&mut self, heads: &Heads, f: &[f64], upstream: f64, df: &mut [f64]) {
        let k = heads.num_classes;
        let scaled: Vec<f64> = f[..k].iter().zip(heads.log_energy_weights()).map(|(fk, lw)| fk + lw).collect();
        // p_k = w_k e^{f_k} / Σ_j w_j e^{f_j};  ∂E/∂f_k = −p_k;  ∂E/∂ln w_k = −p_k
        let p = mathkit::softmax(&scaled);
        for c in 0..k {
            df[c] -= upstream * p[c];
            if !heads.constant_w {
                self.w_raw[c] -= upstream * p[c] * mathkit::log_softplus_grad(heads.w_raw[c]);
            }
        }
    }
}

fn backward_pass(model: &Model, pass: &ForwardPass) -> ParamGradients {
    let heads = &model.heads;
    let k = heads.num_classes;
    let c = heads.num_outputs();
    let beta = pass.objective.beta;
    let mut acc = GradAccum::new(model);

    let n = pass.labels.len();
    let n_out = pass.outliers.as_ref().map_or(0, Matrix::rows);
    let kplus1 = pass.objective.mode.is_kplus1();
    let cls_count = if kplus1 { n + n_out } else { n } as f64;

    // ∂total/∂f for ID rows and outlier rows.
    let mut df_id = Matrix::zeros(n, c);
    let mut df_out = Matrix::zeros(n_out, c);
    for s in 0..n {
        let g = losses::cross_entropy_grad(pass.logits_id.row(s), pass.labels[s]);
        mathkit::axpy(1.0 / cls_count, &g, df_id.row_mut(s));
    }

    if let Some(f_out) = &pass.logits_out {
        if kplus1 {
            for s in 0..n_out {
                let g = losses::cross_entropy_grad(f_out.row(s), k);
                mathkit::axpy(1.0 / cls_count, &g, df_out.row_mut(s));
            }
        } else {
            let (de_id, de_out): (Vec<f64>, Vec<f64>) = match pass.objective.mode {
                LossMode::SquaredHinge { m_in, m_out } => {
                    let (gi, go) = losses::hinge_uncertainty_grad(&pass.energy_id, &pass.energy_out, m_in, m_out);
                    (gi.iter().map(|g| beta * g).collect(), go.iter().map(|g| beta * g).collect())
                }
                _ => {
                    let (gi, go) = losses::logistic_uncertainty_grad(&pass.phi_id, &pass.phi_out);
                    let de_id = (0..n)
                        .map(|s| acc.phi_backward(&heads.phi, pass.energy_id[s], &pass.phi_pre_id[s], beta * gi[s]))
                        .collect();
                    let de_out = (0..n_out)
                        .map(|s| acc.phi_backward(&heads.phi, pass.energy_out[s], &pass.phi_pre_out[s], beta * go[s]))
                        .collect();
                    (de_id, de_out)
                }
            };
            for s in 0..n {
                acc.energy_backward(heads, pass.logits_id.row(s), de_id[s], df_id.row_mut(s));
            }
            for s in 0..n_out {
                acc.energy_backward(heads, f_out.row(s), de_out[s], df_out.row_mut(s));
            }
        }
    }

    // Classification head: f = W_clsᵀ h + b.
    let h = pass.activations.last().expect("trace");
    let mut dh = Matrix::zeros(n, h.cols());
    for s in 0..n {
        let dfs = df_id.row(s);
        for (j, &hj) in h.row(s).iter().enumerate() {
            mathkit::axpy(hj, dfs, acc.w_cls.row_mut(j));
        }
        for (j, dhj) in dh.row_mut(s).iter_mut().enumerate() {
            *dhj = mathkit::dot(heads.w_cls.row(j), dfs);
        }
        if let Some(b) = &mut acc.cls_bias {
            mathkit::axpy(1.0, dfs, b);
        }
    }
    if let Some(v) = &pass.outliers {
        for s in 0..n_out {
            let dfs = df_out.row(s);
            for (j, &vj) in v.row(s).iter().enumerate() {
                mathkit::axpy(vj, dfs, acc.w_cls.row_mut(j));
            }
            if let Some(b) = &mut acc.cls_bias {
                mathkit::axpy(1.0, dfs, b);
            }
        }
    }

    // Backbone, last layer first. The last layer is linear, the rest ReLU.
    let mut upstream = dh;
    for (li, layer) in model.backbone.layers.iter().enumerate().rev() {
        let input = &pass.activations[li];
        let (gw, gb) = &mut acc.layers[li];
        let mut dx = Matrix::zeros(n, layer.inputs());
        for s in 0..n {
            let dys = upstream.row(s);
            let xs = input.row(s);
            for (o, &dy) in dys.iter().enumerate() {
                if dy == 0.0 {
                    continue;
                }
                gb[o] += dy;
                mathkit::axpy(dy, xs, gw.row_mut(o));
                mathkit::axpy(dy, layer.weight.row(o), dx.row_mut(s));
            }
        }
        if li > 0 {
            // input is the ReLU output of the previous layer
            for (d, a) in dx.as_mut_slice().iter_mut().zip(input.as_slice()) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        upstream = dx;
    }

    acc.into_gradients(model)
}
