//! Training objectives: cross-entropy, the logistic uncertainty loss over
//! φ(energy), and the ablation variants (squared hinge on raw energy,
//! constant energy weights, an extra outlier class).
//!
//! Per-batch expectations are arithmetic means over the ID mini-batch and
//! over the outlier batch of the same step.

use crate::error::{Result, VosError};
use crate::mathkit;
use crate::network::{Batch, LossGraph, Model, PhiHead};

pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_HINGE_M_IN: f64 = -25.0;
pub const DEFAULT_HINGE_M_OUT: f64 = -7.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossMode {
    /// Logistic loss on φ(E) with learnable energy weights.
    VosLogistic,
    /// Squared hinge on the energy itself, margins `m_in < m_out`.
    SquaredHinge { m_in: f64, m_out: f64 },
    /// Logistic loss with every energy weight fixed at 1.
    ConstantW,
    /// Outliers become class `K` of a widened head; no separate uncertainty term.
    KPlusOne,
}

impl LossMode {
    pub fn is_kplus1(&self) -> bool {
        matches!(self, LossMode::KPlusOne)
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossMode::VosLogistic => "vos",
            LossMode::SquaredHinge { .. } => "hinge",
            LossMode::ConstantW => "constant_w",
            LossMode::KPlusOne => "kplus1",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LossMode::SquaredHinge { m_in, m_out } = *self {
            check_margins(m_in, m_out)?;
        }
        Ok(())
    }
}

/// Loss mode plus the regulariser weight β.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub mode: LossMode,
    pub beta: f64,
}

impl Objective {
    pub fn new(mode: LossMode, beta: f64) -> Self {
        Self { mode, beta }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(VosError::InvalidArgument(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        self.mode.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub cls: f64,
    pub uncertainty: f64,
    pub beta: f64,
}

impl LossReport {
    pub fn new(cls: f64, uncertainty: f64, beta: f64) -> Self {
        Self { total: cls + beta * uncertainty, cls, uncertainty, beta }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.cls.is_finite() && self.uncertainty.is_finite()
    }
}

/// `−log softmax(f)[y]`.
pub fn cross_entropy(f: &[f64], y: usize) -> Result<f64> {
    if y >= f.len() {
        return Err(VosError::ClassOutOfRange { class: y, num_classes: f.len() });
    }
    Ok(mathkit::logsumexp(f)? - f[y])
}

/// `softmax(f) − onehot(y)`.
pub fn cross_entropy_grad(f: &[f64], y: usize) -> Vec<f64> {
    let mut g = mathkit::softmax(f);
    g[y] -= 1.0;
    g
}

/// Cross-entropy over a head widened to `num_classes + 1` outputs; outliers use label `num_classes`.
pub fn kplus1_cross_entropy(f_ext: &[f64], y_ext: usize, num_classes: usize) -> Result<f64> {
    if f_ext.len() != num_classes + 1 {
        return Err(VosError::DimensionMismatch { expected: num_classes + 1, got: f_ext.len() });
    }
    cross_entropy(f_ext, y_ext)
}

/// Logistic loss over φ values: outliers pushed to φ > 0, ID to φ < 0.
///
/// `mean_out softplus(−φ) + mean_id softplus(φ)`, i.e. `−log σ(φ(E_v))` and
/// `−log σ(−φ(E_x))`.
pub fn logistic_uncertainty(phi_id: &[f64], phi_out: &[f64]) -> Result<f64> {
    if phi_id.is_empty() {
        return Err(VosError::Empty("ID energies"));
    }
    if phi_out.is_empty() {
        return Err(VosError::Empty("outlier energies"));
    }
    let out = phi_out.iter().map(|&p| mathkit::softplus(-p)).sum::<f64>() / phi_out.len() as f64;
    let id = phi_id.iter().map(|&p| mathkit::softplus(p)).sum::<f64>() / phi_id.len() as f64;
    Ok(out + id)
}

/// Derivatives of [`logistic_uncertainty`] w.r.t. each φ value.
pub fn logistic_uncertainty_grad(phi_id: &[f64], phi_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n_id = phi_id.len() as f64;
    let n_out = phi_out.len() as f64;
    (
        phi_id.iter().map(|&p| mathkit::sigmoid(p) / n_id).collect(),
        phi_out.iter().map(|&p| -mathkit::sigmoid(-p) / n_out).collect(),
    )
}

/// Uncertainty loss on raw energies through the φ head.
pub fn uncertainty_loss(e_id: &[f64], e_out: &[f64], phi: &PhiHead) -> Result<f64> {
    let phi_id: Vec<f64> = e_id.iter().map(|&e| phi.eval(e)).collect();
    let phi_out: Vec<f64> = e_out.iter().map(|&e| phi.eval(e)).collect();
    logistic_uncertainty(&phi_id, &phi_out)
}

fn check_margins(m_in: f64, m_out: f64) -> Result<()> {
    if !(m_in < m_out) {
        return Err(VosError::InvalidArgument(format!("hinge margins need m_in < m_out, got {m_in} and {m_out}")));
    }
    Ok(())
}

/// `mean_id max(0, E − m_in)² + mean_out max(0, m_out − E)²`.
pub fn hinge_uncertainty_loss(e_id: &[f64], e_out: &[f64], m_in: f64, m_out: f64) -> Result<f64> {
    check_margins(m_in, m_out)?;
    if e_id.is_empty() {
        return Err(VosError::Empty("ID energies"));
    }
    if e_out.is_empty() {
        return Err(VosError::Empty("outlier energies"));
    }
    let id = e_id.iter().map(|&e| (e - m_in).max(0.0).powi(2)).sum::<f64>() / e_id.len() as f64;
    let out = e_out.iter().map(|&e| (m_out - e).max(0.0).powi(2)).sum::<f64>() / e_out.len() as f64;
    Ok(id + out)
}

pub fn hinge_uncertainty_grad(e_id: &[f64], e_out: &[f64], m_in: f64, m_out: f64) -> (Vec<f64>, Vec<f64>) {
    let n_id = e_id.len() as f64;
    let n_out = e_out.len() as f64;
    (
        e_id.iter().map(|&e| 2.0 * (e - m_in).max(0.0) / n_id).collect(),
        e_out.iter().map(|&e| -2.0 * (m_out - e).max(0.0) / n_out).collect(),
    )
}

/// Full objective on one batch. `outliers = None` means the regulariser is off.
pub fn total_loss(model: &Model, batch: &Batch, outliers: Option<&[Vec<f64>]>, objective: &Objective) -> Result<LossReport> {
    let mut graph = LossGraph::new(model);
    graph.forward(batch, outliers, objective).copied()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&[0.0, 0.0], 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[800.0, 0.0], 0).unwrap() < 1e-300);
        assert!((cross_entropy(&[1.0, 2.0, 3.0], 2).unwrap() - 0.407_605_964_444_380_3).abs() < 1e-12);
        assert!(matches!(cross_entropy(&[0.0, 0.0], 2), Err(VosError::ClassOutOfRange { .. })));
    }

    #[test]
    fn kplus1_examples() {
        assert!((kplus1_cross_entropy(&[0.0; 4], 3, 3).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(kplus1_cross_entropy(&[0.0, 0.0, 0.0, 900.0], 3, 3).unwrap() < 1e-300);
        assert!(kplus1_cross_entropy(&[0.0; 4], 4, 3).is_err());
        assert!(kplus1_cross_entropy(&[0.0; 3], 0, 3).is_err());
    }

    #[test]
    fn logistic_uncertainty_examples() {
        let l = logistic_uncertainty(&[0.0], &[0.0]).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!(logistic_uncertainty(&[-800.0], &[800.0]).unwrap() < 1e-300);
        let l = logistic_uncertainty(&[1.0], &[-1.0]).unwrap();
        assert!((l - 2.0 * 1.313_261_687_518_222_8).abs() < 1e-12);
        assert!(logistic_uncertainty(&[], &[1.0]).is_err());
        assert!(logistic_uncertainty(&[1.0], &[]).is_err());
    }

    #[test]
    fn zero_phi_head_gives_two_ln2() {
        let phi = PhiHead { hidden: crate::network::Dense::zeros(1, 4), output: crate::network::Dense::zeros(4, 1) };
        let l = uncertainty_loss(&[-3.0, 2.0], &[7.0], &phi).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge_uncertainty_loss(&[-30.0, -25.0], &[-7.0, 0.0], -25.0, -7.0).unwrap(), 0.0);
        assert_eq!(hinge_uncertainty_loss(&[-24.0], &[-8.0], -25.0, -7.0).unwrap(), 2.0);
        assert!(hinge_uncertainty_loss(&[0.0], &[0.0], -7.0, -25.0).is_err());
        assert!(hinge_uncertainty_loss(&[0.0], &[0.0], -7.0, -7.0).is_err());

        let mut rng = mathkit::RngState::new(8);
        let e_id: Vec<f64> = (0..13).map(|_| -20.0 + 10.0 * rng.normal()).collect();
        let e_out: Vec<f64> = (0..7).map(|_| -10.0 + 10.0 * rng.normal()).collect();
        let mut id = 0.0;
        for e in &e_id {
            if *e > -25.0 {
                id += (e + 25.0) * (e + 25.0);
            }
        }
        let mut out = 0.0;
        for e in &e_out {
            if *e < -7.0 {
                out += (-7.0 - e) * (-7.0 - e);
            }
        }
        let oracle = id / 13.0 + out / 7.0;
        assert!((hinge_uncertainty_loss(&e_id, &e_out, -25.0, -7.0).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn report_decomposition() {
        let r = LossReport::new(0.7, 1.3, 0.1);
        assert_eq!(r.total, 0.7 + 0.1 * 1.3);
        assert_eq!(LossReport::new(0.7, 1.3, 0.0).total, 0.7);
    }

    proptest! {
        #[test]
        fn logistic_uncertainty_is_monotone(
            id in prop::collection::vec(-20.0f64..20.0, 1..6),
            out in prop::collection::vec(-20.0f64..20.0, 1..6),
            bump in 0.01f64..3.0,
        ) {
            let base = logistic_uncertainty(&id, &out).unwrap();
            prop_assert!(base > 0.0);
            let mut up = out.clone();
            up[0] += bump;
            prop_assert!(logistic_uncertainty(&id, &up).unwrap() < base);
            let mut down = id.clone();
            down[0] -= bump;
            prop_assert!(logistic_uncertainty(&down, &out).unwrap() < base);
        }

        #[test]
        fn hinge_is_zero_exactly_inside_margins(
            e_id in prop::collection::vec(-40.0f64..0.0, 1..6),
            e_out in prop::collection::vec(-40.0f64..0.0, 1..6),
        ) {
            let l = hinge_uncertainty_loss(&e_id, &e_out, -25.0, -7.0).unwrap();
            let inside = e_id.iter().all(|&e| e <= -25.0) && e_out.iter().all(|&e| e >= -7.0);
            prop_assert_eq!(l == 0.0, inside);
        }
    }
}
