//! Synthetic Gaussian-mixture benchmark and its CSV files.
//!
//! The ID data is a `K`-class mixture; OOD points come from an annulus (or a
//! box) around it with anything inside the 6σ ellipsoid of an ID class
//! rejected.
//!
//! Files are comma-separated text. Labeled sets use the header
//! `x0,…,x{d-1},y`; unlabeled point sets drop the `y` column. Values are
//! written with 17 significant digits, so a write/read cycle is exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, VosError};
use crate::mathkit::{self, Matrix, RngState, Vector};

/// Mahalanobis radius that OOD points must clear for every class.
pub const OOD_EXCLUSION_SIGMAS: f64 = 6.0;

const STREAM_TRAIN: u64 = 1;
const STREAM_VAL: u64 = 2;
const STREAM_OOD: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub x: Vector,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Shared(Matrix),
    PerClass(Vec<Matrix>),
}

impl Covariance {
    fn for_class(&self, k: usize) -> &Matrix {
        match self {
            Covariance::Shared(c) => c,
            Covariance::PerClass(cs) => &cs[k],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OodRegion {
    /// Radii uniform in `[r_min, r_max]`, directions uniform.
    Annulus { r_min: f64, r_max: f64 },
    /// Uniform over `[-half_width, half_width]^d`.
    Box { half_width: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub means: Vec<Vector>,
    pub covariance: Covariance,
    pub n_per_class: usize,
    pub n_val_per_class: usize,
    pub ood: OodRegion,
    pub n_ood: usize,
    pub seed: u64,
}

/// `k` points evenly spaced on a circle of the given radius, the first on the +x axis.
pub fn ring_means(k: usize, radius: f64) -> Vec<Vector> {
    (0..k)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

impl DatasetSpec {
    /// Three classes at radius 4, covariance 0.5·I, annulus OOD over [8, 12].
    pub fn toy(seed: u64) -> Self {
        Self {
            means: ring_means(3, 4.0),
            covariance: Covariance::Shared(Matrix::diagonal(&[0.5, 0.5])),
            n_per_class: 500,
            n_val_per_class: 500,
            ood: OodRegion::Annulus { r_min: 8.0, r_max: 12.0 },
            n_ood: 1500,
            seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Upper bound on the standard deviation along any direction, any class.
    fn max_sigma(&self) -> f64 {
        let k = self.num_classes();
        (0..k)
            .map(|c| {
                let cov = self.covariance.for_class(c);
                // Gershgorin bound on the largest eigenvalue
                (0..cov.rows())
                    .map(|i| cov.row(i).iter().map(|v| v.abs()).sum::<f64>())
                    .fold(0.0, f64::max)
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        let d = self.dim();
        if k == 0 || d == 0 {
            return Err(VosError::InvalidArgument("dataset needs at least one class and dimension".into()));
        }
        if self.means.iter().any(|m| m.len() != d) {
            return Err(VosError::InvalidArgument("class means differ in dimension".into()));
        }
        match &self.covariance {
            Covariance::Shared(_) => {}
            Covariance::PerClass(cs) if cs.len() == k => {}
            Covariance::PerClass(cs) => {
                return Err(VosError::DimensionMismatch { expected: k, got: cs.len() });
            }
        }
        for c in 0..k {
            let cov = self.covariance.for_class(c);
            if cov.rows() != d || cov.cols() != d {
                return Err(VosError::DimensionMismatch { expected: d, got: cov.rows() });
            }
        }
        if self.n_per_class == 0 || self.n_val_per_class == 0 || self.n_ood == 0 {
            return Err(VosError::InvalidArgument("sample counts must be >= 1".into()));
        }
        match self.ood {
            OodRegion::Annulus { r_min, r_max } => {
                if !(0.0 <= r_min && r_min <= r_max) {
                    return Err(VosError::InvalidArgument(format!(
                        "annulus needs 0 <= r_min <= r_max, got [{r_min}, {r_max}]"
                    )));
                }
                let reach = self.means.iter().map(|m| mathkit::dot(m, m).sqrt()).fold(0.0, f64::max)
                    + 3.0 * self.max_sigma();
                if r_min <= reach {
                    return Err(VosError::InvalidArgument(format!(
                        "annulus r_min = {r_min} overlaps the ID support (max |mean| + 3 sigma = {reach})"
                    )));
                }
            }
            OodRegion::Box { half_width } => {
                if !(half_width > 0.0) {
                    return Err(VosError::InvalidArgument("box half width must be > 0".into()));
                }
            }
        }
        Ok(())
    }
}

/// `n_per_class` draws from each class, class-major order.
pub fn make_gmm(spec: &DatasetSpec, n_per_class: usize, rng: &mut RngState) -> Result<Vec<LabeledExample>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(n_per_class * spec.num_classes());
    for (k, mean) in spec.means.iter().enumerate() {
        let l = mathkit::cholesky(spec.covariance.for_class(k))?;
        for _ in 0..n_per_class {
            let z = mathkit::standard_normal(mean.len(), rng)?;
            let mut x = mathkit::lower_matvec(&l, &z);
            x.iter_mut().zip(mean).for_each(|(xi, mi)| *xi += mi);
            out.push(LabeledExample { x, y: k });
        }
    }
    Ok(out)
}

/// Factorised class covariances for Mahalanobis checks.
struct Support<'a> {
    means: &'a [Vector],
    chols: Vec<Matrix>,
}

impl<'a> Support<'a> {
    fn new(spec: &'a DatasetSpec) -> Result<Self> {
        let chols = (0..spec.num_classes())
            .map(|k| mathkit::cholesky(spec.covariance.for_class(k)))
            .collect::<Result<_>>()?;
        Ok(Self { means: &spec.means, chols })
    }

    fn min_mahalanobis(&self, x: &[f64]) -> f64 {
        self.means
            .iter()
            .zip(&self.chols)
            .map(|(m, l)| {
                let d: Vector = x.iter().zip(m).map(|(a, b)| a - b).collect();
                let y = mathkit::solve_lower(l, &d);
                mathkit::dot(&y, &y).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Smallest Mahalanobis distance from `x` to any class of `spec`.
pub fn min_mahalanobis(spec: &DatasetSpec, x: &[f64]) -> Result<f64> {
    Ok(Support::new(spec)?.min_mahalanobis(x))
}

fn rejection_sample(
    spec: &DatasetSpec,
    rng: &mut RngState,
    mut draw: impl FnMut(&mut RngState) -> Vector,
) -> Result<Vec<Vector>> {
    let support = Support::new(spec)?;
    let n = spec.n_ood;
    let max_attempts = 1000 * n.max(1000);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(VosError::InvalidArgument(
                "OOD region is (almost) entirely inside the ID support".into(),
            ));
        }
        let x = draw(rng);
        if support.min_mahalanobis(&x) > OOD_EXCLUSION_SIGMAS {
            out.push(x);
        }
    }
    Ok(out)
}

fn random_direction(dim: usize, rng: &mut RngState) -> Vector {
    if dim == 2 {
        let a = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
        return vec![a.cos(), a.sin()];
    }
    loop {
        let z: Vector = (0..dim).map(|_| rng.normal()).collect();
        let norm = mathkit::dot(&z, &z).sqrt();
        if norm > 1e-12 {
            return z.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// `spec.n_ood` points with radius uniform in `[r_min, r_max]`.
pub fn make_ood_annulus(spec: &DatasetSpec, r_min: f64, r_max: f64, rng: &mut RngState) -> Result<Vec<Vector>> {
    if !(r_min <= r_max) {
        return Err(VosError::InvalidArgument(format!("annulus needs r_min <= r_max, got [{r_min}, {r_max}]")));
    }
    let dim = spec.dim();
    rejection_sample(spec, rng, |rng| {
        let r = rng.uniform_range(r_min, r_max);
        random_direction(dim, rng).into_iter().map(|u| r * u).collect()
    })
}

pub fn make_ood_box(spec: &DatasetSpec, half_width: f64, rng: &mut RngState) -> Result<Vec<Vector>> {
    let dim = spec.dim();
    rejection_sample(spec, rng, |rng| (0..dim).map(|_| rng.uniform_range(-half_width, half_width)).collect())
}

pub fn make_ood(spec: &DatasetSpec, rng: &mut RngState) -> Result<Vec<Vector>> {
    spec.validate()?;
    match spec.ood {
        OodRegion::Annulus { r_min, r_max } => make_ood_annulus(spec, r_min, r_max, rng),
        OodRegion::Box { half_width } => make_ood_box(spec, half_width, rng),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub ood: Vec<Vector>,
}

/// Train, validation and OOD sets, each on its own stream of `spec.seed`.
pub fn generate(spec: &DatasetSpec) -> Result<GeneratedData> {
    Ok(GeneratedData {
        train: make_gmm(spec, spec.n_per_class, &mut RngState::with_stream(spec.seed, STREAM_TRAIN))?,
        val: make_gmm(spec, spec.n_val_per_class, &mut RngState::with_stream(spec.seed, STREAM_VAL))?,
        ood: make_ood(spec, &mut RngState::with_stream(spec.seed, STREAM_OOD))?,
    })
}

fn header(dim: usize, labeled: bool) -> String {
    let mut h: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    if labeled {
        h.push("y".into());
    }
    h.join(",")
}

fn push_value(line: &mut String, v: f64) {
    write!(line, "{v:.16e}").expect("write to String");
}

pub fn format_dataset(examples: &[LabeledExample]) -> Result<String> {
    let dim = examples.first().map(|e| e.x.len()).ok_or(VosError::Empty("dataset"))?;
    let mut s = header(dim, true);
    s.push('\n');
    for e in examples {
        if e.x.len() != dim {
            return Err(VosError::DimensionMismatch { expected: dim, got: e.x.len() });
        }
        for &v in &e.x {
            push_value(&mut s, v);
            s.push(',');
        }
        writeln!(s, "{}", e.y).expect("write to String");
    }
    Ok(s)
}

pub fn format_points(points: &[Vector]) -> Result<String> {
    let dim = points.first().map(Vec::len).ok_or(VosError::Empty("point set"))?;
    let mut s = header(dim, false);
    s.push('\n');
    for p in points {
        if p.len() != dim {
            return Err(VosError::DimensionMismatch { expected: dim, got: p.len() });
        }
        for (i, &v) in p.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            push_value(&mut s, v);
        }
        s.push('\n');
    }
    Ok(s)
}

/// Parsed point file; `labels` is present iff the header ends in `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTable {
    pub points: Vec<Vector>,
    pub labels: Option<Vec<usize>>,
}

impl PointTable {
    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn into_examples(self) -> Result<Vec<LabeledExample>> {
        let labels = self.labels.ok_or_else(|| VosError::Parse { line: 1, message: "no y column".into() })?;
        Ok(self.points.into_iter().zip(labels).map(|(x, y)| LabeledExample { x, y }).collect())
    }
}

fn clean_field(f: &str) -> &str {
    let f = f.trim();
    f.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(f).trim()
}

/// Parse either schema. Tolerates a UTF-8 BOM, CRLF endings, quoted fields
/// and blank lines.
pub fn parse_table(text: &str) -> Result<PointTable> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines.next().ok_or(VosError::Empty("dataset file"))?;
    let cols: Vec<&str> = head.split(',').map(clean_field).collect();
    let labeled = cols.last() == Some(&"y");
    let dim = cols.len() - usize::from(labeled);
    if dim == 0 {
        return Err(VosError::Parse { line: 1, message: "no feature columns".into() });
    }
    for (i, c) in cols[..dim].iter().enumerate() {
        if *c != format!("x{i}") {
            return Err(VosError::Parse { line: 1, message: format!("expected column x{i}, found {c:?}") });
        }
    }

    let mut points = Vec::new();
    let mut labels = labeled.then(Vec::new);
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').map(clean_field).collect();
        if fields.len() != cols.len() {
            return Err(VosError::Parse {
                line: lineno,
                message: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        let x = fields[..dim]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| VosError::Parse { line: lineno, message: format!("bad number {f:?}") })
            })
            .collect::<Result<Vector>>()?;
        if let Some(labels) = &mut labels {
            let f = fields[dim];
            let y = f
                .parse::<usize>()
                .map_err(|_| VosError::Parse { line: lineno, message: format!("bad label {f:?}") })?;
            labels.push(y);
        }
        points.push(x);
    }
    if points.is_empty() {
        return Err(VosError::Empty("dataset rows"));
    }
    Ok(PointTable { points, labels })
}

pub fn write_dataset(path: impl AsRef<Path>, examples: &[LabeledExample]) -> Result<()> {
    std::fs::write(path, format_dataset(examples)?)?;
    Ok(())
}

pub fn write_points(path: impl AsRef<Path>, points: &[Vector]) -> Result<()> {
    std::fs::write(path, format_points(points)?)?;
    Ok(())
}

pub fn read_table(path: impl AsRef<Path>) -> Result<PointTable> {
    parse_table(&std::fs::read_to_string(path)?)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<LabeledExample>> {
    read_table(path)?.into_examples()
}
