//! OOD scores, the ID/OOD threshold, and threshold-free detection metrics.
//!
//! Every score here is "higher means more in-distribution".
//!
//! Threshold convention: γ is the largest ID score such that the fraction
//! of ID scores `>= γ` is at least the target TPR. A score equal to γ is
//! classified as ID. FPR at that TPR is the fraction of OOD scores `>= γ`.

use std::fmt;
use std::path::Path;

use crate::error::{Result, VosError};
use crate::mathkit::{self, Matrix};
use crate::network::{softmax_posterior, Model};

pub const DEFAULT_TPR: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub is_id: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMethod {
    /// Logistic of `−φ(E)`; with the extra outlier class, `1 − p(outlier)`.
    Vos,
    Msp,
    Energy,
}

impl ScoreMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vos" => Ok(Self::Vos),
            "msp" => Ok(Self::Msp),
            "energy" => Ok(Self::Energy),
            other => Err(VosError::InvalidArgument(format!("unknown score method {other:?} (vos|msp|energy)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Vos => "vos",
            Self::Msp => "msp",
            Self::Energy => "energy",
        }
    }
}

/// Score from the logits alone; `f` may include the extra outlier logit.
pub fn score_logits(model: &Model, f: &[f64], method: ScoreMethod) -> Result<f64> {
    let k = model.num_classes();
    match method {
        ScoreMethod::Vos if model.config.extra_class => Ok(1.0 - softmax_posterior(f)[k]),
        ScoreMethod::Vos => Ok(mathkit::sigmoid(-model.heads.phi.eval(model.heads.energy(f)?))),
        ScoreMethod::Msp => Ok(softmax_posterior(&f[..k]).into_iter().fold(0.0, f64::max)),
        ScoreMethod::Energy => mathkit::logsumexp(&f[..k]),
    }
}

/// `σ(−φ(E(x)))`: probability that `x` is in-distribution.
pub fn ood_score(model: &Model, x: &[f64]) -> Result<f64> {
    score_logits(model, &model.logits(x)?, ScoreMethod::Vos)
}

/// Maximum softmax probability over the ID classes.
pub fn msp_score(model: &Model, x: &[f64]) -> Result<f64> {
    score_logits(model, &model.logits(x)?, ScoreMethod::Msp)
}

/// `log Σ_k e^{f_k}`, i.e. the negative energy with unit weights.
pub fn raw_energy_score(model: &Model, x: &[f64]) -> Result<f64> {
    score_logits(model, &model.logits(x)?, ScoreMethod::Energy)
}

/// Scores for every row of `inputs`, in order.
pub fn score_batch(model: &Model, inputs: &Matrix, method: ScoreMethod) -> Result<Vec<f64>> {
    let (_, f) = model.forward_batch(inputs)?;
    (0..f.rows()).map(|s| score_logits(model, f.row(s), method)).collect()
}

pub fn predict_batch(model: &Model, inputs: &Matrix) -> Result<Vec<usize>> {
    let (_, f) = model.forward_batch(inputs)?;
    let k = model.num_classes();
    Ok((0..f.rows())
        .map(|s| {
            let row = &f.row(s)[..k];
            (0..k).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect())
}

fn check_tpr(tpr: f64) -> Result<()> {
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(VosError::InvalidArgument(format!("target TPR must be in (0, 1], got {tpr}")));
    }
    Ok(())
}

fn check_scores(scores: &[f64], what: &'static str) -> Result<()> {
    if scores.is_empty() {
        return Err(VosError::Empty(what));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(VosError::InvalidArgument(format!("non-finite score {s}")));
    }
    Ok(())
}

/// Largest threshold that keeps at least `tpr` of the ID scores.
pub fn choose_gamma(id_scores: &[f64], tpr: f64) -> Result<f64> {
    check_scores(id_scores, "ID scores")?;
    check_tpr(tpr)?;
    let n = id_scores.len();
    let mut sorted = id_scores.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let keep = (1..=n).find(|&c| c as f64 / n as f64 >= tpr).unwrap_or(n);
    Ok(sorted[keep - 1])
}

/// Eq. (9)-style decision: 1 (ID) iff `score >= gamma`.
pub fn classify(score: f64, gamma: f64) -> u8 {
    u8::from(score >= gamma)
}

pub fn classify_all(scores: &[f64], gamma: f64) -> Vec<u8> {
    scores.iter().map(|&s| classify(s, gamma)).collect()
}

/// Fraction of OOD scores accepted at the threshold that keeps `tpr` of ID.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr: f64) -> Result<f64> {
    check_scores(ood_scores, "OOD scores")?;
    let gamma = choose_gamma(id_scores, tpr)?;
    Ok(ood_scores.iter().filter(|&&s| s >= gamma).count() as f64 / ood_scores.len() as f64)
}

/// `P(id > ood) + ½·P(id = ood)` via midrank sums.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores(id_scores, "ID scores")?;
    check_scores(ood_scores, "OOD scores")?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));

    let mut id_rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        id_rank_sum += midrank * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let n_id = id_scores.len() as f64;
    let n_ood = ood_scores.len() as f64;
    Ok((id_rank_sum - n_id * (n_id + 1.0) / 2.0) / (n_id * n_ood))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositiveClass {
    Id,
    Ood,
}

/// Average precision: `Σ (R_i − R_{i−1})·P_i` over thresholds at each
/// distinct score, highest first.
pub fn aupr(id_scores: &[f64], ood_scores: &[f64], positive: PositiveClass) -> Result<f64> {
    check_scores(id_scores, "ID scores")?;
    check_scores(ood_scores, "OOD scores")?;
    let (pos, neg, sign) = match positive {
        PositiveClass::Id => (id_scores, ood_scores, 1.0),
        PositiveClass::Ood => (ood_scores, id_scores, -1.0),
    };
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (sign * s, true))
        .chain(neg.iter().map(|&s| (sign * s, false)))
        .collect();
    all.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));

    let n_pos = pos.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / n_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub fpr95: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub gamma: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

impl MetricsReport {
    pub fn compute(id_scores: &[f64], ood_scores: &[f64], tpr: f64) -> Result<Self> {
        Ok(Self {
            fpr95: fpr_at_tpr(id_scores, ood_scores, tpr)?,
            auroc: auroc(id_scores, ood_scores)?,
            aupr: aupr(id_scores, ood_scores, PositiveClass::Id)?,
            gamma: choose_gamma(id_scores, tpr)?,
            n_id: id_scores.len(),
            n_ood: ood_scores.len(),
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| VosError::Parse { line: i + 1, message: "expected key = value".into() })?;
            fields.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }
        let get = |k: &str| {
            fields.get(k).ok_or_else(|| VosError::Parse { line: 0, message: format!("missing key {k}") })
        };
        let num = |k: &str| -> Result<f64> {
            let (line, v) = get(k)?;
            v.parse().map_err(|_| VosError::Parse { line: *line, message: format!("bad value for {k}") })
        };
        let count = |k: &str| -> Result<usize> {
            let (line, v) = get(k)?;
            v.parse().map_err(|_| VosError::Parse { line: *line, message: format!("bad value for {k}") })
        };
        Ok(Self {
            fpr95: num("fpr95")?,
            auroc: num("auroc")?,
            aupr: num("aupr")?,
            gamma: num("gamma")?,
            n_id: count("n_id")?,
            n_ood: count("n_ood")?,
        })
    }
}

impl fmt::Display for MetricsReport {
    /// Flat `key = value` lines.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "fpr95 = {}", self.fpr95)?;
        writeln!(f, "auroc = {}", self.auroc)?;
        writeln!(f, "aupr = {}", self.aupr)?;
        writeln!(f, "gamma = {}", self.gamma)?;
        writeln!(f, "n_id = {}", self.n_id)?;
        writeln!(f, "n_ood = {}", self.n_ood)
    }
}

/// Score dump: header `score,is_id`, one row per sample.
pub fn format_scores(samples: &[ScoredSample]) -> String {
    let mut s = String::from("score,is_id\n");
    for smp in samples {
        s.push_str(&format!("{:.16e},{}\n", smp.score, u8::from(smp.is_id)));
    }
    s
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoredSample>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines.next().ok_or(VosError::Empty("score file"))?;
    if head.trim() != "score,is_id" {
        return Err(VosError::Parse { line: 1, message: format!("expected header score,is_id, found {:?}", head.trim()) });
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let bad = |m: &str| VosError::Parse { line: lineno, message: m.to_string() };
        let (s, flag) = line.trim().split_once(',').ok_or_else(|| bad("expected two fields"))?;
        let score: f64 = s.trim().parse().map_err(|_| bad("bad score"))?;
        if !score.is_finite() {
            return Err(bad("non-finite score"));
        }
        let is_id = match flag.trim() {
            "1" => true,
            "0" => false,
            _ => return Err(bad("is_id must be 0 or 1")),
        };
        out.push(ScoredSample { score, is_id });
    }
    if out.is_empty() {
        return Err(VosError::Empty("score rows"));
    }
    Ok(out)
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoredSample>> {
    parse_scores(&std::fs::read_to_string(path)?)
}

pub fn write_scores(path: impl AsRef<Path>, samples: &[ScoredSample]) -> Result<()> {
    std::fs::write(path, format_scores(samples))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathkit::RngState;
    use crate::network::ModelConfig;
    use proptest::prelude::*;

    fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
        let mut s = 0.0;
        for &a in id {
            for &b in ood {
                if a > b {
                    s += 1.0;
                } else if a == b {
                    s += 0.5;
                }
            }
        }
        s / (id.len() * ood.len()) as f64
    }

    #[test]
    fn gamma_examples() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(choose_gamma(&scores, 0.95).unwrap(), 6.0);
        assert_eq!(choose_gamma(&[0.3; 7], 0.95).unwrap(), 0.3);
        assert_eq!(choose_gamma(&[0.9, 0.2, 0.5], 1.0).unwrap(), 0.2);
        assert!(choose_gamma(&[], 0.95).is_err());
        assert!(choose_gamma(&[1.0], 0.0).is_err());
    }

    #[test]
    fn classify_boundary_is_inclusive() {
        assert_eq!(classify(0.7, 0.7), 1);
        assert_eq!(classify(0.7f64.next_down(), 0.7), 0);
        let scores = [0.1, 0.7, 0.9, 0.69999];
        let looped: Vec<u8> = scores.iter().map(|&s| if s >= 0.7 { 1 } else { 0 }).collect();
        assert_eq!(classify_all(&scores, 0.7), looped);
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(fpr_at_tpr(&[0.9, 0.95, 0.99], &[0.1, 0.2], 0.95).unwrap(), 0.0);
        assert_eq!(fpr_at_tpr(&[0.9, 0.8], &[0.85, 0.1], 0.95).unwrap(), 0.5);
        assert!(fpr_at_tpr(&[0.9], &[], 0.95).is_err());

        let mut rng = RngState::new(12);
        let id: Vec<f64> = (0..10_000).map(|_| rng.normal()).collect();
        let ood: Vec<f64> = (0..10_000).map(|_| rng.normal()).collect();
        let fpr = fpr_at_tpr(&id, &ood, 0.95).unwrap();
        assert!((fpr - 0.95).abs() < 0.02, "fpr {fpr}");
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap(), 0.5);
        let mut rng = RngState::new(4);
        let id: Vec<f64> = (0..1000).map(|_| 0.5 + rng.normal()).collect();
        let ood: Vec<f64> = (0..1000).map(|_| rng.normal()).collect();
        assert!((auroc(&id, &ood).unwrap() - pairwise_auroc(&id, &ood)).abs() < 1e-9);
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&[3.0, 4.0], &[1.0, 2.0], PositiveClass::Id).unwrap(), 1.0);
        // ID {5, 1, 0}, OOD {2, 3}: sweep 5 → (R 1/3, P 1); 3 → P 1/2; 2 → P 1/3;
        // 1 → (R 2/3, P 2/4); 0 → (R 1, P 3/5)
        let ap = aupr(&[5.0, 1.0, 0.0], &[2.0, 3.0], PositiveClass::Id).unwrap();
        let hand = (1.0 / 3.0) * 1.0 + (1.0 / 3.0) * 0.5 + (1.0 / 3.0) * 0.6;
        assert!((ap - hand).abs() < 1e-15);
        let ties = aupr(&[1.0; 3], &[1.0; 7], PositiveClass::Id).unwrap();
        assert!((ties - 0.3).abs() < 1e-15);
        let flipped = aupr(&[3.0, 4.0], &[1.0, 2.0], PositiveClass::Ood).unwrap();
        assert!((flipped - aupr(&[-1.0, -2.0], &[-3.0, -4.0], PositiveClass::Id).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn score_examples() {
        let cfg = ModelConfig { layer_sizes: vec![2, 3], num_classes: 3, phi_hidden: 4, ..ModelConfig::toy() };
        let mut model = Model::zeros(cfg).unwrap();
        assert_eq!(ood_score(&model, &[1.0, 2.0]).unwrap(), 0.5);
        assert!((msp_score(&model, &[1.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((raw_energy_score(&model, &[1.0, 2.0]).unwrap() - 3f64.ln()).abs() < 1e-15);

        // φ(E) = bias only
        model.heads.phi.output.bias[0] = 2.0;
        assert!((ood_score(&model, &[1.0, 2.0]).unwrap() - 0.119_202_922_022_117_56).abs() < 1e-12);
        model.heads.phi.output.bias[0] = -800.0;
        assert_eq!(ood_score(&model, &[1.0, 2.0]).unwrap(), 1.0);
        model.heads.phi.output.bias[0] = 800.0;
        assert!(ood_score(&model, &[1.0, 2.0]).unwrap() < 1e-300);

        // logits [1, 2, 3] via an identity-like head
        model.backbone.layers[0].weight = Matrix::zeros(3, 2);
        model.backbone.layers[0].bias = vec![1.0, 2.0, 3.0];
        model.heads.w_cls = Matrix::identity(3);
        assert!((msp_score(&model, &[0.0, 0.0]).unwrap() - 0.66524).abs() < 1e-4);
        assert!((raw_energy_score(&model, &[0.0, 0.0]).unwrap() - 3.40761).abs() < 1e-5);
    }

    #[test]
    fn score_dump_roundtrip_and_errors() {
        let s = vec![ScoredSample { score: 0.25, is_id: true }, ScoredSample { score: -3.5e-7, is_id: false }];
        assert_eq!(parse_scores(&format_scores(&s)).unwrap(), s);
        assert!(parse_scores("score,label\n0.1,1\n").is_err());
        assert!(parse_scores("score,is_id\n0.1,2\n").is_err());
        assert!(parse_scores("score,is_id\n").is_err());
    }

    #[test]
    fn report_text_roundtrip() {
        let r = MetricsReport::compute(&[0.9, 0.8, 0.7], &[0.75, 0.1], 0.95).unwrap();
        assert_eq!(MetricsReport::parse(&r.to_string()).unwrap(), r);
    }

    proptest! {
        #[test]
        fn rank_metrics_invariant_under_monotone_maps(
            id in prop::collection::vec(-5.0f64..5.0, 1..40),
            ood in prop::collection::vec(-5.0f64..5.0, 1..40),
        ) {
            let warp = |v: &[f64]| v.iter().map(|x| (x * 0.7).exp() + 3.0).collect::<Vec<_>>();
            prop_assert!((auroc(&id, &ood).unwrap() - auroc(&warp(&id), &warp(&ood)).unwrap()).abs() < 1e-12);
            prop_assert_eq!(
                fpr_at_tpr(&id, &ood, 0.95).unwrap(),
                fpr_at_tpr(&warp(&id), &warp(&ood), 0.95).unwrap()
            );
        }

        #[test]
        fn fpr_monotone_in_tpr(
            id in prop::collection::vec(-5.0f64..5.0, 1..40),
            ood in prop::collection::vec(-5.0f64..5.0, 1..40),
            lo in 0.05f64..1.0,
            hi in 0.05f64..1.0,
        ) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            prop_assert!(fpr_at_tpr(&id, &ood, lo).unwrap() <= fpr_at_tpr(&id, &ood, hi).unwrap());
        }

        #[test]
        fn auroc_antisymmetric_without_ties(
            id in prop::collection::hash_set(-1_000_000i64..1_000_000, 1..30),
            ood in prop::collection::hash_set(-1_000_000i64..1_000_000, 1..30),
        ) {
            prop_assume!(id.is_disjoint(&ood));
            let id: Vec<f64> = id.into_iter().map(|v| v as f64).collect();
            let ood: Vec<f64> = ood.into_iter().map(|v| v as f64).collect();
            let s = auroc(&id, &ood).unwrap() + auroc(&ood, &id).unwrap();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
