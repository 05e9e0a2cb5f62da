//! Train a vanilla and a regularised model on the toy mixture and compare
//! their OOD metrics.
//!
//! Usage: `cargo run --release -p vos-core --example toy_compare -- [seed...]`
//! Hyperparameters can be overridden through `TOY_ITERS`, `TOY_LR`,
//! `TOY_PHI`, `TOY_BATCH`, `TOY_QUEUE`, `TOY_BETA`, `TOY_T`, `TOY_POOL`,
//! `TOY_MOM`, `TOY_WD`, `TOY_START`, `TOY_MODE`, `TOY_MIN` and `TOY_MOUT`.

use std::time::Instant;

use vos_core::datagen::{self, DatasetSpec};
use vos_core::evalkit::{self, ScoreMethod};
use vos_core::losses::LossMode;
use vos_core::mathkit::Matrix;
use vos_core::trainer::{self, RunConfig, StartIter};

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> vos_core::Result<()> {
    let seeds: Vec<u64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let seeds = if seeds.is_empty() { vec![0] } else { seeds };
    for seed in seeds {
        let data = datagen::generate(&DatasetSpec::toy(seed))?;
        let mut config = RunConfig {
            total_iters: env("TOY_ITERS", 1500),
            learning_rate: env("TOY_LR", 0.01),
            batch_size: env("TOY_BATCH", 64),
            queue_capacity: env("TOY_QUEUE", 1000),
            beta: env("TOY_BETA", 0.1),
            t: env("TOY_T", 10),
            pool_size: env("TOY_POOL", 10_000),
            momentum: env("TOY_MOM", 0.9),
            weight_decay: env("TOY_WD", 1e-4),
            start: StartIter::parse(&env("TOY_START", "2/3".to_string()))?,
            mode: match env("TOY_MODE", "vos".to_string()).as_str() {
                "hinge" => LossMode::SquaredHinge { m_in: env("TOY_MIN", -25.0), m_out: env("TOY_MOUT", -7.0) },
                "constant_w" => LossMode::ConstantW,
                "kplus1" => LossMode::KPlusOne,
                _ => LossMode::VosLogistic,
            },
            seed,
            ..RunConfig::default()
        };
        config.model.phi_hidden = env("TOY_PHI", 512);

        let val = Matrix::from_rows(&data.val.iter().map(|e| e.x.clone()).collect::<Vec<_>>())?;
        let ood = Matrix::from_rows(&data.ood)?;
        let accuracy = |model: &vos_core::network::Model| -> vos_core::Result<f64> {
            let pred = evalkit::predict_batch(model, &val)?;
            Ok(pred.iter().zip(&data.val).filter(|(p, e)| **p == e.y).count() as f64 / data.val.len() as f64)
        };
        let metrics = |model: &vos_core::network::Model, method| -> vos_core::Result<(f64, f64)> {
            let id = evalkit::score_batch(model, &val, method)?;
            let out = evalkit::score_batch(model, &ood, method)?;
            Ok((evalkit::fpr_at_tpr(&id, &out, 0.95)?, evalkit::auroc(&id, &out)?))
        };

        let t0 = Instant::now();
        let vanilla = trainer::train(&RunConfig { beta: 0.0, ..config.clone() }, &data.train)?;
        let t_vanilla = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let vos = trainer::train(&config, &data.train)?;
        let t_vos = t1.elapsed().as_secs_f64();

        let (msp_fpr, msp_auc) = metrics(&vanilla.model, ScoreMethod::Msp)?;
        let (en_fpr, en_auc) = metrics(&vanilla.model, ScoreMethod::Energy)?;
        let vos_method = if matches!(config.mode, LossMode::SquaredHinge { .. }) { ScoreMethod::Energy } else { ScoreMethod::Vos };
        let (vos_fpr, vos_auc) = metrics(&vos.model, vos_method)?;
        let last = vos.log.last().copied();
        println!(
            "seed {seed}: msp fpr {msp_fpr:.4} auroc {msp_auc:.4} | energy fpr {en_fpr:.4} auroc {en_auc:.4} | \
             vos fpr {vos_fpr:.4} auroc {vos_auc:.4} | acc {:.4} vs {:.4} | {t_vanilla:.1}s + {t_vos:.1}s | last {last:?}",
            accuracy(&vos.model)?,
            accuracy(&vanilla.model)?,
        );
    }
    Ok(())
}
