//! Flat `key = value` configuration with dotted section names.
//!
//! Every key is declared in [`SCHEMA`] together with its default, so a
//! file only needs the keys it changes. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::CliError;

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn key(key: &'static str, default: &'static str, doc: &'static str) -> KeySpec {
    KeySpec { key, default, doc }
}

pub const SCHEMA: &[KeySpec] = &[
    key("data.dir", "data", "directory holding train.csv, val.csv and ood.csv"),
    key("data.seed", "0", "dataset seed"),
    key("data.num_classes", "3", "number of mixture components, means evenly spaced on a circle"),
    key("data.radius", "4.0", "radius of the circle of class means"),
    key("data.variance", "0.5", "isotropic per-class variance"),
    key("data.n_per_class", "500", "training points per class"),
    key("data.n_val_per_class", "500", "validation points per class"),
    key("data.n_ood", "1500", "number of OOD points"),
    key("data.ood_region", "annulus", "annulus | box"),
    key("data.ood_r_min", "8.0", "inner annulus radius"),
    key("data.ood_r_max", "12.0", "outer annulus radius"),
    key("data.ood_half_width", "12.0", "half width of the OOD box"),
    key("model.hidden", "128,128", "hidden layer widths of the backbone"),
    key("model.feature_dim", "64", "penultimate feature dimension"),
    key("model.phi_hidden", "512", "hidden width of the uncertainty head"),
    key("model.cls_bias", "false", "add a bias to the classification head"),
    key("train.iters", "3000", "number of SGD steps"),
    key("train.start", "2/3", "first regularised step: absolute count or fraction of train.iters"),
    key("train.beta", "0.1", "weight of the uncertainty loss"),
    key("train.lr", "0.01", "learning rate"),
    key("train.momentum", "0.9", "SGD momentum"),
    key("train.weight_decay", "0.0", "L2 penalty added to the gradient"),
    key("train.batch_size", "64", "mini-batch size"),
    key("train.seed", "0", "seed for initialisation, shuffling and synthesis"),
    key("train.mode", "vos", "vos | hinge | constant_w | kplus1"),
    key("train.hinge_m_in", "-25.0", "ID energy margin of the hinge loss"),
    key("train.hinge_m_out", "-7.0", "outlier energy margin of the hinge loss"),
    key("train.outliers", "virtual", "virtual | noise"),
    key("train.noise_scale", "1.0", "standard deviation of noise outliers"),
    key("train.log_every", "50", "steps per row of the loss log"),
    key("train.checkpoint", "model.ckpt", "checkpoint written by train"),
    key("train.log", "train_log.csv", "loss log written by train"),
    key("synthesis.t", "1", "outliers kept per class per step"),
    key("synthesis.pool_size", "10000", "samples drawn per class per step"),
    key("synthesis.queue_capacity", "1000", "features kept per class"),
    key("synthesis.ridge", "1e-4", "ridge added to the covariance diagonal"),
    key("score.checkpoint", "model.ckpt", "model to score with"),
    key("score.input", "data/val.csv", "points to score, with or without a y column"),
    key("score.method", "vos", "vos | msp | energy"),
    key("score.is_id", "true", "value of the is_id column in the dump"),
    key("score.output", "scores.csv", "score dump"),
    key("eval.id_scores", "id_scores.csv", "score dump of ID points"),
    key("eval.ood_scores", "ood_scores.csv", "score dump of OOD points"),
    key("eval.tpr", "0.95", "true positive rate fixing the threshold"),
    key("eval.output", "metrics.txt", "metrics report"),
    key("plot.checkpoint", "model.ckpt", "model to render"),
    key("plot.x_min", "-14.0", "left edge of the grid"),
    key("plot.x_max", "14.0", "right edge of the grid"),
    key("plot.y_min", "-14.0", "bottom edge of the grid"),
    key("plot.y_max", "14.0", "top edge of the grid"),
    key("plot.resolution", "200", "grid points per axis"),
    key("plot.output", "uncertainty.pgm", "grayscale heatmap"),
    key("plot.values", "uncertainty.txt", "raw grid scores"),
    key("plot.svg", "", "class boundary drawing; empty to skip"),
];

fn spec(key: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|s| s.key == key)
}

/// Effective configuration: defaults overlaid with a file and overrides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self { values: SCHEMA.iter().map(|s| (s.key, s.default.to_string())).collect() }
    }
}

fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => return &line[..i],
            _ => {}
        }
    }
    line
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut config = Self::default();
        let mut seen = BTreeMap::new();
        let text = text.strip_prefix('\u{feff}').unwrap_or(text);
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {lineno}: expected `key = value`")))?;
            let k = k.trim();
            let spec = spec(k).ok_or_else(|| CliError::Config(format!("line {lineno}: unknown key `{k}`")))?;
            if let Some(prev) = seen.insert(spec.key, lineno) {
                return Err(CliError::Config(format!("line {lineno}: key `{k}` already set on line {prev}")));
            }
            config.values.insert(spec.key, unquote(v.trim()).to_string());
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Full key name for an override. Accepts the dotted key, or any
    /// unambiguous dotted suffix of one; ties go to keys in `section`.
    pub fn resolve_key(name: &str, section: Option<&str>) -> Result<&'static str, CliError> {
        let name = name.replace('-', "_");
        if let Some(s) = spec(&name) {
            return Ok(s.key);
        }
        let suffix = format!(".{name}");
        let matches: Vec<&'static str> = SCHEMA.iter().map(|s| s.key).filter(|k| k.ends_with(&suffix)).collect();
        let pick = |m: &[&'static str]| (m.len() == 1).then(|| m[0]);
        if let Some(k) = pick(&matches) {
            return Ok(k);
        }
        if matches.is_empty() {
            return Err(CliError::Config(format!("unknown key `{name}`")));
        }
        if let Some(section) = section {
            let prefix = format!("{section}.");
            let local: Vec<_> = matches.iter().copied().filter(|k| k.starts_with(&prefix)).collect();
            if let Some(k) = pick(&local) {
                return Ok(k);
            }
        }
        Err(CliError::Config(format!("ambiguous key `{name}`: could be {}", matches.join(", "))))
    }

    pub fn set(&mut self, name: &str, value: &str, section: Option<&str>) -> Result<(), CliError> {
        let key = Self::resolve_key(name, section)?;
        self.values.insert(key, value.to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared config key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.raw(key);
        raw.trim().parse().map_err(|_| CliError::Config(format!("invalid value {raw:?} for `{key}`")))
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.raw(key).trim() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(CliError::Config(format!("invalid boolean {other:?} for `{key}`"))),
        }
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.raw(key))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        let raw = self.raw(key);
        if raw.trim().is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| s.trim().parse().map_err(|_| CliError::Config(format!("invalid list {raw:?} for `{key}`"))))
            .collect()
    }

    /// The effective configuration as a file that parses back to `self`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for s in SCHEMA {
            let this = s.key.split('.').next().unwrap_or("");
            if this != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = this;
            }
            let v = &self.values[s.key];
            let v = if v.is_empty() || v.contains('#') || v != v.trim() { format!("\"{v}\"") } else { v.clone() };
            writeln!(out, "# {}\n{} = {}", s.doc, s.key, v).expect("write to String");
        }
        out
    }
}
