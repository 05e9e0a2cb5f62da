//! Central finite differences (step 1e-5) against the analytic reverse pass.
//!
//! The loss used for differencing is rebuilt here from public primitives,
//! so the forward pass is checked against an independent composition too.

use vos_core::losses::{self, LossMode, Objective};
use vos_core::mathkit::{self, Matrix, RngState, Vector};
use vos_core::network::{Batch, LossGraph, Model, ModelConfig, ParamGradients};

const STEP: f64 = 1e-5;
const MAX_REL_ERR: f64 = 1e-4;
const POINTS: u64 = 24;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        (analytic - numeric).abs() / 1e-7
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn central<F: FnMut(f64) -> f64>(x: f64, mut f: F) -> f64 {
    (f(x + STEP) - f(x - STEP)) / (2.0 * STEP)
}

fn small_config(mode: &LossMode, cls_bias: bool) -> ModelConfig {
    ModelConfig { layer_sizes: vec![3, 7, 5], num_classes: 3, phi_hidden: 6, cls_bias, extra_class: false, constant_w: false }
        .for_mode(mode)
}

/// A model with non-zero biases everywhere, so no tensor has a trivially
/// zero gradient, and `w_raw` away from its initial value.
fn random_model(config: ModelConfig, rng: &mut RngState) -> Model {
    let mut model = Model::init(config, rng).unwrap();
    let names = model.tensor_names();
    for (name, t) in names.iter().zip(model.tensors_mut()) {
        if name.ends_with("bias") || name == "heads.w_raw" {
            t.iter_mut().for_each(|v| *v = rng.uniform_range(-0.5, 0.5));
        }
        if name.starts_with("phi.0") {
            t.iter_mut().for_each(|v| *v = rng.uniform_range(-1.5, 1.5));
        }
    }
    model
}

fn random_batch(n: usize, d: usize, k: usize, rng: &mut RngState) -> Batch {
    let rows: Vec<Vector> = (0..n).map(|_| (0..d).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).collect();
    let labels = (0..n).map(|_| rng.below(k)).collect();
    Batch::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
}

fn random_outliers(n: usize, m: usize, rng: &mut RngState) -> Vec<Vector> {
    (0..n).map(|_| (0..m).map(|_| rng.uniform_range(-1.5, 2.5)).collect()).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `(cls, uncertainty)` composed from public pieces.
fn reference_terms(model: &Model, batch: &Batch, outliers: Option<&[Vector]>, mode: &LossMode) -> (f64, f64) {
    let k = model.num_classes();
    let heads = &model.heads;
    let feats: Vec<Vector> =
        (0..batch.len()).map(|s| model.forward_features(batch.inputs.row(s)).unwrap()).collect();
    let logits: Vec<Vector> = feats.iter().map(|h| heads.logits(h).unwrap()).collect();
    let out_logits: Vec<Vector> = outliers.unwrap_or(&[]).iter().map(|v| heads.logits(v).unwrap()).collect();
    if mode.is_kplus1() {
        let mut terms: Vec<f64> =
            logits.iter().zip(&batch.labels).map(|(f, &y)| losses::kplus1_cross_entropy(f, y, k).unwrap()).collect();
        terms.extend(out_logits.iter().map(|f| losses::kplus1_cross_entropy(f, k, k).unwrap()));
        return (mean(&terms), 0.0);
    }
    let ce: Vec<f64> = logits.iter().zip(&batch.labels).map(|(f, &y)| losses::cross_entropy(f, y).unwrap()).collect();
    let cls = mean(&ce);
    if out_logits.is_empty() {
        return (cls, 0.0);
    }
    let e_id: Vec<f64> = logits.iter().map(|f| heads.energy(f).unwrap()).collect();
    let e_out: Vec<f64> = out_logits.iter().map(|f| heads.energy(f).unwrap()).collect();
    let unc = match *mode {
        LossMode::SquaredHinge { m_in, m_out } => losses::hinge_uncertainty_loss(&e_id, &e_out, m_in, m_out).unwrap(),
        _ => {
            let id: Vec<f64> = e_id.iter().map(|&e| heads.phi.eval(e)).collect();
            let out: Vec<f64> = e_out.iter().map(|&e| heads.phi.eval(e)).collect();
            losses::logistic_uncertainty(&id, &out).unwrap()
        }
    };
    (cls, unc)
}

fn reference_loss(model: &Model, batch: &Batch, outliers: Option<&[Vector]>, objective: &Objective) -> f64 {
    let (cls, unc) = reference_terms(model, batch, outliers, &objective.mode);
    cls + objective.beta * unc
}

fn analytic(model: &Model, batch: &Batch, outliers: Option<&[Vector]>, objective: &Objective) -> ParamGradients {
    let mut graph = LossGraph::new(model);
    let report = *graph.forward(batch, outliers, objective).unwrap();
    let reference = reference_loss(model, batch, outliers, objective);
    assert!((report.total - reference).abs() <= 1e-12 * (1.0 + reference.abs()), "{} vs {reference}", report.total);
    graph.backward().unwrap()
}

/// Differences every parameter whose name passes `select` and returns the
/// number of coordinates checked.
fn check_model<L, S>(model: &Model, grads: &ParamGradients, loss: L, select: S, label: &str) -> usize
where
    L: Fn(&Model) -> f64,
    S: Fn(&str) -> bool,
{
    let mut probe = model.clone();
    let names = model.tensor_names();
    let mut checked = 0;
    for (ti, name) in names.iter().enumerate() {
        if !select(name) {
            continue;
        }
        let len = model.tensors()[ti].len();
        for i in 0..len {
            let original = model.tensors()[ti][i];
            let numeric = central(original, |x| {
                probe.tensors_mut()[ti][i] = x;
                loss(&probe)
            });
            probe.tensors_mut()[ti][i] = original;
            let a = grads.tensors[ti][i];
            let err = rel_err(a, numeric);
            assert!(err <= MAX_REL_ERR, "{label}: {name}[{i}] analytic {a} numeric {numeric} rel err {err}");
            checked += 1;
        }
    }
    checked
}

fn objective_check(mode: LossMode, beta: f64, with_outliers: bool, seed: u64, select: impl Fn(&str) -> bool) -> usize {
    let mut rng = RngState::new(seed);
    let model = random_model(small_config(&mode, seed % 2 == 0), &mut rng);
    let batch = random_batch(5, 3, 3, &mut rng);
    let outliers = random_outliers(4, 5, &mut rng);
    let outliers = with_outliers.then_some(outliers.as_slice());
    let objective = Objective::new(mode, beta);
    let grads = analytic(&model, &batch, outliers, &objective);
    check_model(&model, &grads, |m| reference_loss(m, &batch, outliers, &objective), select, mode.name())
}

pub fn cross_entropy_wrt_logits() {
    let mut rng = RngState::new(11);
    for _ in 0..POINTS {
        let c = 2 + rng.below(5);
        let f: Vec<f64> = (0..c).map(|_| rng.uniform_range(-6.0, 6.0)).collect();
        let y = rng.below(c);
        let g = losses::cross_entropy_grad(&f, y);
        for j in 0..c {
            let numeric = central(f[j], |x| {
                let mut p = f.clone();
                p[j] = x;
                losses::cross_entropy(&p, y).unwrap()
            });
            assert!(rel_err(g[j], numeric) <= MAX_REL_ERR, "logit {j}: {} vs {numeric}", g[j]);
        }
    }
}

pub fn cross_entropy_through_the_network() {
    let checked: usize = (0..POINTS)
        .map(|seed| objective_check(LossMode::VosLogistic, 0.1, false, 100 + seed, |_| true))
        .sum();
    assert!(checked > 20 * 50);
}

pub fn logistic_uncertainty_wrt_phi_values() {
    let mut rng = RngState::new(12);
    for _ in 0..POINTS {
        let id: Vec<f64> = (0..1 + rng.below(5)).map(|_| rng.uniform_range(-5.0, 5.0)).collect();
        let out: Vec<f64> = (0..1 + rng.below(5)).map(|_| rng.uniform_range(-5.0, 5.0)).collect();
        let (g_id, g_out) = losses::logistic_uncertainty_grad(&id, &out);
        for (j, &g) in g_id.iter().enumerate() {
            let numeric = central(id[j], |x| {
                let mut p = id.clone();
                p[j] = x;
                losses::logistic_uncertainty(&p, &out).unwrap()
            });
            assert!(rel_err(g, numeric) <= MAX_REL_ERR);
        }
        for (j, &g) in g_out.iter().enumerate() {
            let numeric = central(out[j], |x| {
                let mut p = out.clone();
                p[j] = x;
                losses::logistic_uncertainty(&id, &p).unwrap()
            });
            assert!(rel_err(g, numeric) <= MAX_REL_ERR);
        }
    }
}

/// The regulariser alone: gradient of `loss(β = 1) − loss(β = 0)`.
pub fn uncertainty_loss_through_the_network() {
    for seed in 0..POINTS {
        let mut rng = RngState::new(200 + seed);
        let model = random_model(small_config(&LossMode::VosLogistic, false), &mut rng);
        let batch = random_batch(6, 3, 3, &mut rng);
        let outliers = random_outliers(3, 5, &mut rng);
        let with = Objective::new(LossMode::VosLogistic, 1.0);
        let without = Objective::new(LossMode::VosLogistic, 0.0);
        let g1 = analytic(&model, &batch, Some(&outliers), &with);
        let g0 = analytic(&model, &batch, Some(&outliers), &without);
        let diff = ParamGradients {
            names: g1.names.clone(),
            tensors: g1.tensors.iter().zip(&g0.tensors).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect()).collect(),
        };
        let unc = |m: &Model| reference_terms(m, &batch, Some(&outliers), &LossMode::VosLogistic).1;
        check_model(&model, &diff, unc, |_| true, "uncertainty");
    }
}

pub fn energy_wrt_logits_matches_closed_form() {
    let mut rng = RngState::new(13);
    for _ in 0..POINTS {
        let model = random_model(small_config(&LossMode::VosLogistic, false), &mut rng);
        let heads = &model.heads;
        let f: Vec<f64> = (0..3).map(|_| rng.uniform_range(-4.0, 4.0)).collect();
        let w = heads.energy_weights();
        let shifted: Vec<f64> = f.iter().zip(&w).map(|(fk, wk)| fk + wk.ln()).collect();
        let p = mathkit::softmax(&shifted);
        for k in 0..3 {
            let numeric = central(f[k], |x| {
                let mut g = f.clone();
                g[k] = x;
                heads.energy(&g).unwrap()
            });
            assert!(rel_err(-p[k], numeric) <= MAX_REL_ERR, "dE/df_{k}: {} vs {numeric}", -p[k]);
        }
    }
}

pub fn energy_wrt_w_raw_matches_closed_form() {
    let mut rng = RngState::new(14);
    for _ in 0..POINTS {
        let model = random_model(small_config(&LossMode::VosLogistic, false), &mut rng);
        let f: Vec<f64> = (0..3).map(|_| rng.uniform_range(-4.0, 4.0)).collect();
        let w = model.heads.energy_weights();
        let shifted: Vec<f64> = f.iter().zip(&w).map(|(fk, wk)| fk + wk.ln()).collect();
        let p = mathkit::softmax(&shifted);
        let mut probe = model.heads.clone();
        for k in 0..3 {
            let r = model.heads.w_raw[k];
            let closed = -p[k] / w[k] * mathkit::sigmoid(r);
            let numeric = central(r, |x| {
                probe.w_raw[k] = x;
                probe.energy(&f).unwrap()
            });
            probe.w_raw[k] = r;
            assert!(rel_err(closed, numeric) <= MAX_REL_ERR, "dE/dw_raw_{k}: {closed} vs {numeric}");
        }
    }
}

pub fn energy_weights_through_the_network() {
    let checked: usize = (0..POINTS)
        .map(|seed| objective_check(LossMode::VosLogistic, 0.7, true, 300 + seed, |n| n == "heads.w_raw"))
        .sum();
    assert_eq!(checked, POINTS as usize * 3);
}

pub fn phi_parameters() {
    let checked: usize = (0..POINTS)
        .map(|seed| objective_check(LossMode::VosLogistic, 0.5, true, 400 + seed, |n| n.starts_with("phi.")))
        .sum();
    assert_eq!(checked, POINTS as usize * (6 + 6 + 6 + 1));
}

pub fn joint_objective() {
    for seed in 0..POINTS {
        objective_check(LossMode::VosLogistic, 0.1, true, 500 + seed, |_| true);
        objective_check(LossMode::VosLogistic, 0.05 + 2.0 * (seed as f64 / POINTS as f64), true, 600 + seed, |_| true);
    }
}

pub fn squared_hinge_mode() {
    let (mut active_id, mut active_out) = (0, 0);
    for seed in 0..POINTS {
        // margins straddling the small model's energies keep both branches active
        let (m_in, m_out) = (-2.5, 0.5);
        let mode = LossMode::SquaredHinge { m_in, m_out };
        objective_check(mode, 0.3, true, 700 + seed, |_| true);
        let mut rng = RngState::new(700 + seed);
        let model = random_model(small_config(&mode, seed % 2 == 0), &mut rng);
        let batch = random_batch(5, 3, 3, &mut rng);
        let outliers = random_outliers(4, 5, &mut rng);
        let energy = |h: &[f64]| model.heads.energy(&model.heads.logits(h).unwrap()).unwrap();
        let e_id: Vec<f64> = (0..5).map(|s| energy(&model.forward_features(batch.inputs.row(s)).unwrap())).collect();
        let e_out: Vec<f64> = outliers.iter().map(|v| energy(v)).collect();
        active_id += usize::from(e_id.iter().any(|&e| e > m_in));
        active_out += usize::from(e_out.iter().any(|&e| e < m_out));
    }
    assert!(active_id > POINTS as usize / 2 && active_out > POINTS as usize / 2, "{active_id} {active_out}");
}

pub fn constant_w_mode() {
    for seed in 0..POINTS {
        objective_check(LossMode::ConstantW, 0.3, true, 800 + seed, |_| true);
    }
    let mut rng = RngState::new(1);
    let model = random_model(small_config(&LossMode::ConstantW, false), &mut rng);
    let batch = random_batch(5, 3, 3, &mut rng);
    let outliers = random_outliers(4, 5, &mut rng);
    let g = analytic(&model, &batch, Some(&outliers), &Objective::new(LossMode::ConstantW, 0.3));
    assert!(g.get("heads.w_raw").unwrap().iter().all(|&v| v == 0.0));
}

pub fn kplus1_mode() {
    for seed in 0..POINTS {
        objective_check(LossMode::KPlusOne, 0.1, true, 900 + seed, |_| true);
    }
}

pub fn noise_outliers_share_the_logistic_gradient() {
    for seed in 0..POINTS {
        let mut rng = RngState::new(1000 + seed);
        let model = random_model(small_config(&LossMode::VosLogistic, false), &mut rng);
        let batch = random_batch(4, 3, 3, &mut rng);
        let noise = vos_core::synthesis::gaussian_noise_outliers(5, 3, 1.0, &mut rng).unwrap();
        let objective = Objective::new(LossMode::VosLogistic, 0.4);
        let grads = analytic(&model, &batch, Some(&noise), &objective);
        check_model(&model, &grads, |m| reference_loss(m, &batch, Some(&noise), &objective), |_| true, "noise");
    }
}

macro_rules! run_as_tests {
    ($($name:ident),* $(,)?) => {
        mod run {
            $(#[test]
            fn $name() {
                super::$name()
            })*
        }
    };
}

run_as_tests!(
    cross_entropy_wrt_logits,
    cross_entropy_through_the_network,
    logistic_uncertainty_wrt_phi_values,
    uncertainty_loss_through_the_network,
    energy_wrt_logits_matches_closed_form,
    energy_wrt_w_raw_matches_closed_form,
    energy_weights_through_the_network,
    phi_parameters,
    joint_objective,
    squared_hinge_mode,
    constant_w_mode,
    kplus1_mode,
    noise_outliers_share_the_logistic_gradient,
);
