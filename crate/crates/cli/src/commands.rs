//! The five pipeline commands. Each takes the effective [`Config`] and
//! returns the text it prints on success.

use std::fmt::Write as _;
use std::path::Path;

use vos_core::checkpoint;
use vos_core::datagen::{self, Covariance, DatasetSpec, OodRegion};
use vos_core::evalkit::{self, MetricsReport, ScoreMethod, ScoredSample};
use vos_core::losses::LossMode;
use vos_core::mathkit::Matrix;
use vos_core::network::{Model, ModelConfig};
use vos_core::trainer::{self, OutlierSource, RunConfig, StartIter};

use crate::config::Config;
use crate::error::{invalid_config, CliError};
use crate::plot::{self, Grid};

pub fn dataset_spec(cfg: &Config) -> Result<DatasetSpec, CliError> {
    let k: usize = cfg.get("data.num_classes")?;
    let variance: f64 = cfg.get("data.variance")?;
    let ood = match cfg.raw("data.ood_region") {
        "annulus" => OodRegion::Annulus { r_min: cfg.get("data.ood_r_min")?, r_max: cfg.get("data.ood_r_max")? },
        "box" => OodRegion::Box { half_width: cfg.get("data.ood_half_width")? },
        other => return Err(CliError::Config(format!("invalid value {other:?} for `data.ood_region` (annulus|box)"))),
    };
    let spec = DatasetSpec {
        means: datagen::ring_means(k, cfg.get("data.radius")?),
        covariance: Covariance::Shared(Matrix::diagonal(&[variance, variance])),
        n_per_class: cfg.get("data.n_per_class")?,
        n_val_per_class: cfg.get("data.n_val_per_class")?,
        ood,
        n_ood: cfg.get("data.n_ood")?,
        seed: cfg.get("data.seed")?,
    };
    spec.validate().map_err(invalid_config)?;
    Ok(spec)
}

pub fn loss_mode(cfg: &Config) -> Result<LossMode, CliError> {
    match cfg.raw("train.mode") {
        "vos" => Ok(LossMode::VosLogistic),
        "hinge" => Ok(LossMode::SquaredHinge { m_in: cfg.get("train.hinge_m_in")?, m_out: cfg.get("train.hinge_m_out")? }),
        "constant_w" => Ok(LossMode::ConstantW),
        "kplus1" => Ok(LossMode::KPlusOne),
        other => Err(CliError::Config(format!("invalid value {other:?} for `train.mode` (vos|hinge|constant_w|kplus1)"))),
    }
}

/// Training settings for inputs of dimension `input_dim`.
pub fn run_config(cfg: &Config, input_dim: usize) -> Result<RunConfig, CliError> {
    let mut layer_sizes = vec![input_dim];
    layer_sizes.extend(cfg.list::<usize>("model.hidden")?);
    layer_sizes.push(cfg.get("model.feature_dim")?);
    let model = ModelConfig {
        layer_sizes,
        num_classes: cfg.get("data.num_classes")?,
        phi_hidden: cfg.get("model.phi_hidden")?,
        cls_bias: cfg.flag("model.cls_bias")?,
        extra_class: false,
        constant_w: false,
    };
    let outliers = match cfg.raw("train.outliers") {
        "virtual" => OutlierSource::Virtual,
        "noise" => OutlierSource::GaussianNoise { scale: cfg.get("train.noise_scale")? },
        other => return Err(CliError::Config(format!("invalid value {other:?} for `train.outliers` (virtual|noise)"))),
    };
    let run = RunConfig {
        total_iters: cfg.get("train.iters")?,
        start: StartIter::parse(cfg.raw("train.start")).map_err(invalid_config)?,
        beta: cfg.get("train.beta")?,
        t: cfg.get("synthesis.t")?,
        pool_size: cfg.get("synthesis.pool_size")?,
        queue_capacity: cfg.get("synthesis.queue_capacity")?,
        ridge: cfg.get("synthesis.ridge")?,
        learning_rate: cfg.get("train.lr")?,
        momentum: cfg.get("train.momentum")?,
        weight_decay: cfg.get("train.weight_decay")?,
        batch_size: cfg.get("train.batch_size")?,
        mode: loss_mode(cfg)?,
        outliers,
        seed: cfg.get("train.seed")?,
        model,
        log_every: cfg.get("train.log_every")?,
    };
    run.validate().map_err(invalid_config)?;
    Ok(run)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::File { path: path.to_path_buf(), source: e.into() })
}

pub fn generate_data(cfg: &Config) -> Result<String, CliError> {
    let spec = dataset_spec(cfg)?;
    let dir = cfg.path("data.dir");
    if !dir.is_dir() {
        return Err(CliError::File {
            path: dir,
            source: vos_core::VosError::InvalidArgument("output directory does not exist".into()),
        });
    }
    let data = datagen::generate(&spec)?;
    let train = dir.join("train.csv");
    let val = dir.join("val.csv");
    let ood = dir.join("ood.csv");
    datagen::write_dataset(&train, &data.train).map_err(CliError::file(&train))?;
    datagen::write_dataset(&val, &data.val).map_err(CliError::file(&val))?;
    datagen::write_points(&ood, &data.ood).map_err(CliError::file(&ood))?;
    Ok(format!(
        "wrote {} training, {} validation and {} OOD points to {}\n",
        data.train.len(),
        data.val.len(),
        data.ood.len(),
        dir.display()
    ))
}

/// Train on `data.dir/train.csv`; returns the model and the loss log text.
pub fn train_model(cfg: &Config) -> Result<(Model, String), CliError> {
    run_config(cfg, dataset_spec(cfg)?.dim())?;
    let path = cfg.path("data.dir").join("train.csv");
    let data = datagen::read_dataset(&path).map_err(CliError::file(&path))?;
    let dim = data.first().map_or(0, |e| e.x.len());
    let run = run_config(cfg, dim)?;
    let outcome = trainer::train(&run, &data)?;
    Ok((outcome.model, trainer::format_log(&outcome.log)))
}

pub fn train(cfg: &Config) -> Result<String, CliError> {
    let (model, log) = train_model(cfg)?;
    let ckpt = cfg.path("train.checkpoint");
    let log_path = cfg.path("train.log");
    checkpoint::save(&model, &ckpt).map_err(CliError::file(&ckpt))?;
    write_file(&log_path, &log)?;
    let last = log.lines().last().unwrap_or_default();
    Ok(format!("checkpoint {}\nlog {}\nlast window {last}\n", ckpt.display(), log_path.display()))
}

fn load_model(cfg: &Config, key: &str) -> Result<Model, CliError> {
    let path = cfg.path(key);
    checkpoint::load(&path).map_err(CliError::file(&path))
}

pub fn score_samples(model: &Model, points: &[Vec<f64>], method: ScoreMethod, is_id: bool) -> Result<Vec<ScoredSample>, CliError> {
    let scores = evalkit::score_batch(model, &Matrix::from_rows(points)?, method)?;
    Ok(scores.into_iter().map(|score| ScoredSample { score, is_id }).collect())
}

pub fn score(cfg: &Config) -> Result<String, CliError> {
    let method = ScoreMethod::parse(cfg.raw("score.method")).map_err(invalid_config)?;
    let is_id = cfg.flag("score.is_id")?;
    let model = load_model(cfg, "score.checkpoint")?;
    let input = cfg.path("score.input");
    let table = datagen::read_table(&input).map_err(CliError::file(&input))?;
    let samples = score_samples(&model, &table.points, method, is_id)?;
    let out = cfg.path("score.output");
    evalkit::write_scores(&out, &samples).map_err(CliError::file(&out))?;
    Ok(format!("wrote {} {} scores to {}\n", samples.len(), method.name(), out.display()))
}

fn read_role(path: &Path, want_id: bool) -> Result<Vec<f64>, CliError> {
    let samples = evalkit::read_scores(path).map_err(CliError::file(path))?;
    if let Some(pos) = samples.iter().position(|s| s.is_id != want_id) {
        let msg = format!("row {} has is_id = {}; rescore with score.is_id = {want_id}", pos + 1, u8::from(!want_id));
        return Err(CliError::File { path: path.to_path_buf(), source: vos_core::VosError::InvalidArgument(msg) });
    }
    Ok(samples.into_iter().map(|s| s.score).collect())
}

pub fn evaluate(cfg: &Config) -> Result<MetricsReport, CliError> {
    let tpr: f64 = cfg.get("eval.tpr")?;
    let id = read_role(&cfg.path("eval.id_scores"), true)?;
    let ood = read_role(&cfg.path("eval.ood_scores"), false)?;
    Ok(MetricsReport::compute(&id, &ood, tpr)?)
}

pub fn eval(cfg: &Config) -> Result<String, CliError> {
    let report = evaluate(cfg)?.to_string();
    write_file(&cfg.path("eval.output"), &report)?;
    Ok(report)
}

pub fn grid(cfg: &Config) -> Result<Grid, CliError> {
    let grid = Grid {
        x_min: cfg.get("plot.x_min")?,
        x_max: cfg.get("plot.x_max")?,
        y_min: cfg.get("plot.y_min")?,
        y_max: cfg.get("plot.y_max")?,
        resolution: cfg.get("plot.resolution")?,
    };
    grid.validate().map_err(invalid_config)?;
    Ok(grid)
}

pub fn plot_uncertainty(cfg: &Config) -> Result<String, CliError> {
    let grid = grid(cfg)?;
    let model = load_model(cfg, "plot.checkpoint")?;
    let surface = plot::evaluate(&model, &grid)?;
    let pgm = cfg.path("plot.output");
    let values = cfg.path("plot.values");
    write_file(&pgm, &surface.to_pgm())?;
    write_file(&values, &surface.to_text())?;
    let mut msg = format!("wrote {} and {}", pgm.display(), values.display());
    let svg = cfg.raw("plot.svg");
    if !svg.is_empty() {
        write_file(Path::new(svg), &surface.to_svg())?;
        write!(msg, " and {svg}").expect("write to String");
    }
    msg.push('\n');
    Ok(msg)
}
