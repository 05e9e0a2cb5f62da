//! Command-level behaviour: files written, exit codes, and agreement with
//! the in-process library pipeline.

use std::path::{Path, PathBuf};
use std::process::Command;

use vos_core::checkpoint;
use vos_core::datagen;
use vos_core::evalkit::{self, MetricsReport, ScoreMethod};
use vos_core::mathkit::Matrix;
use vos_lab::{commands, Config};

const BIN: &str = env!("CARGO_BIN_EXE_vos-lab");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

/// A quick configuration rooted in `dir`.
fn quick_config(dir: &Path) -> String {
    format!(
        "data.dir = {}\n\
         data.n_per_class = 60\n\
         data.n_val_per_class = 40\n\
         data.n_ood = 80\n\
         model.hidden = 16,16\n\
         model.feature_dim = 8\n\
         model.phi_hidden = 8\n\
         train.iters = 40\n\
         train.start = 25\n\
         train.batch_size = 16\n\
         train.log_every = 10\n\
         train.checkpoint = {}\n\
         train.log = {}\n\
         synthesis.pool_size = 200\n\
         synthesis.queue_capacity = 50\n",
        s(dir),
        s(&dir.join("model.ckpt")),
        s(&dir.join("log.csv")),
    )
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, quick_config(dir.path())).unwrap();
    (dir, conf)
}

fn run(args: &[&str]) -> Result<String, vos_lab::CliError> {
    let mut full = vec!["vos-lab"];
    full.extend_from_slice(args);
    vos_lab::run(full)
}

fn exit_code(args: &[&str]) -> (i32, String) {
    let out = Command::new(BIN).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn generate_data_with_defaults_writes_1500_training_rows() {
    let dir = tempfile::tempdir().unwrap();
    run(&["generate-data", "--data.dir", &s(dir.path())]).unwrap();
    let train = datagen::read_dataset(dir.path().join("train.csv")).unwrap();
    assert_eq!(train.len(), 1500);
    assert_eq!(datagen::read_dataset(dir.path().join("val.csv")).unwrap().len(), 1500);
    let ood = datagen::read_table(dir.path().join("ood.csv")).unwrap();
    assert_eq!(ood.points.len(), 1500);
    assert!(ood.labels.is_none());
}

#[test]
fn generate_data_depends_on_the_seed_only() {
    let read = |seed: &str| {
        let dir = tempfile::tempdir().unwrap();
        run(&["generate-data", "--dir", &s(dir.path()), "--seed", seed, "--n-per-class", "20"]).unwrap();
        std::fs::read_to_string(dir.path().join("train.csv")).unwrap()
    };
    assert_eq!(read("5"), read("5"));
    assert_ne!(read("5"), read("6"));
}

#[test]
fn missing_output_directory_is_a_runtime_error() {
    let (code, err) = exit_code(&["generate-data", "--data.dir", "/nonexistent/vos-lab-out"]);
    assert_eq!(code, 2);
    assert!(err.contains("/nonexistent/vos-lab-out"), "{err}");
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let (code, err) = exit_code(&["train", "--train.betta", "0"]);
    assert_eq!(code, 1);
    assert!(err.contains("train.betta"), "{err}");
    assert_eq!(exit_code(&["frobnicate"]).0, 1);
    assert_eq!(exit_code(&["train", "--beta"]).0, 1);
    assert_eq!(exit_code(&["train", "--beta", "-1"]).0, 1);
    assert_eq!(exit_code(&["score", "--method", "entropy"]).0, 1);
    let (code, err) = exit_code(&["show-config", "--seed", "3"]);
    assert_eq!(code, 1);
    assert!(err.contains("ambiguous"), "{err}");
    assert_eq!(exit_code(&["--help"]).0, 0);

    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "# fine\ntrain.beta = 0.1\nsynthesis.tt = 3\n").unwrap();
    let (code, err) = exit_code(&["train", "--config", &s(&conf)]);
    assert_eq!(code, 1);
    assert!(err.contains("synthesis.tt") && err.contains("line 3"), "{err}");
}

#[test]
fn defaults_honour_the_reference_hyperparameters() {
    let cfg = Config::default();
    let run = commands::run_config(&cfg, 2).unwrap();
    assert_eq!(run.beta, 0.1);
    assert_eq!(run.t, 1);
    assert_eq!(run.pool_size, 10_000);
    assert_eq!(run.model.phi_hidden, 512);
    assert_eq!(run.model.layer_sizes, vec![2, 128, 128, 64]);
}

#[test]
fn zero_beta_override_equals_a_vanilla_run() {
    let (dir, conf) = setup();
    let c = s(&conf);
    run(&["generate-data", "--config", &c]).unwrap();
    run(&["train", "--config", &c, "--beta", "0"]).unwrap();
    let cli_model = std::fs::read(dir.path().join("model.ckpt")).unwrap();

    let cfg = Config::load(&conf).unwrap();
    let data = datagen::read_dataset(dir.path().join("train.csv")).unwrap();
    let mut vanilla = commands::run_config(&cfg, 2).unwrap();
    vanilla.beta = 0.0;
    let never = vos_core::trainer::RunConfig { beta: 0.1, start: vos_core::trainer::StartIter::Absolute(40), ..vanilla.clone() };
    for run in [vanilla, never] {
        let outcome = vos_core::trainer::train(&run, &data).unwrap();
        assert_eq!(checkpoint::to_bytes(&outcome.model), cli_model);
    }
}

#[test]
fn pipeline_matches_the_library_bit_for_bit() {
    let (dir, conf) = setup();
    let c = s(&conf);
    let p = |name: &str| s(&dir.path().join(name));
    run(&["generate-data", "--config", &c]).unwrap();
    run(&["train", "--config", &c]).unwrap();
    run(&["score", "--config", &c, "--checkpoint", &p("model.ckpt"), "--input", &p("val.csv"), "--output", &p("id.csv")]).unwrap();
    run(&["score", "--config", &c, "--input", &p("ood.csv"), "--is-id", "false", "--output", &p("ood_s.csv"), "--checkpoint", &p("model.ckpt")]).unwrap();
    let printed = run(&["eval", "--config", &c, "--id-scores", &p("id.csv"), "--ood-scores", &p("ood_s.csv"), "--eval.output", &p("m.txt")]).unwrap();

    let cfg = Config::load(&conf).unwrap();
    let data = datagen::generate(&commands::dataset_spec(&cfg).unwrap()).unwrap();
    let outcome = vos_core::trainer::train(&commands::run_config(&cfg, 2).unwrap(), &data.train).unwrap();
    assert_eq!(checkpoint::to_bytes(&outcome.model), std::fs::read(p("model.ckpt")).unwrap());
    assert_eq!(vos_core::trainer::format_log(&outcome.log), std::fs::read_to_string(p("log.csv")).unwrap());

    let val: Vec<Vec<f64>> = data.val.iter().map(|e| e.x.clone()).collect();
    let id = evalkit::score_batch(&outcome.model, &Matrix::from_rows(&val).unwrap(), ScoreMethod::Vos).unwrap();
    let ood = evalkit::score_batch(&outcome.model, &Matrix::from_rows(&data.ood).unwrap(), ScoreMethod::Vos).unwrap();
    let report = MetricsReport::compute(&id, &ood, 0.95).unwrap();
    assert_eq!(printed, report.to_string());
    assert_eq!(MetricsReport::parse(&std::fs::read_to_string(p("m.txt")).unwrap()).unwrap(), report);
    let dumped: Vec<f64> = evalkit::read_scores(p("id.csv")).unwrap().iter().map(|s| s.score).collect();
    assert_eq!(dumped, id);
}

#[test]
fn score_ranges_and_order() {
    let (dir, conf) = setup();
    let c = s(&conf);
    let p = |name: &str| s(&dir.path().join(name));
    run(&["generate-data", "--config", &c]).unwrap();
    run(&["train", "--config", &c]).unwrap();
    let n = datagen::read_dataset(p("val.csv")).unwrap().len();
    for method in ["vos", "msp", "energy"] {
        let out = p(&format!("{method}.csv"));
        run(&["score", "--config", &c, "--checkpoint", &p("model.ckpt"), "--input", &p("val.csv"), "--method", method, "--output", &out]).unwrap();
        let first = std::fs::read(&out).unwrap();
        run(&["score", "--config", &c, "--checkpoint", &p("model.ckpt"), "--input", &p("val.csv"), "--method", method, "--output", &out]).unwrap();
        assert_eq!(std::fs::read(&out).unwrap(), first);
        let scores = evalkit::read_scores(&out).unwrap();
        assert_eq!(scores.len(), n);
        assert!(scores.iter().all(|s| s.is_id));
        match method {
            "vos" => assert!(scores.iter().all(|s| s.score > 0.0 && s.score < 1.0)),
            "msp" => assert!(scores.iter().all(|s| s.score > 1.0 / 3.0 && s.score <= 1.0)),
            _ => assert!(scores.iter().all(|s| s.score.is_finite())),
        }
    }
}

#[test]
fn eval_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(&dir.path().join("m.txt"));
    let perfect = run(&[
        "eval",
        "--id-scores",
        &s(&fixture("perfect_id.csv")),
        "--ood-scores",
        &s(&fixture("perfect_ood.csv")),
        "--eval.output",
        &out,
    ])
    .unwrap();
    let report = MetricsReport::parse(&perfect).unwrap();
    assert_eq!(report.fpr95, 0.0);
    assert_eq!(report.auroc, 1.0);

    // ID 0.9 0.8 0.7 0.6 0.5 against OOD 0.65 0.55 0.3 0.7: γ = 0.5 keeps all
    // ID, every OOD score but 0.3 passes, and 14.5 of 20 pairs are won
    let known = run(&[
        "eval",
        "--id-scores",
        &s(&fixture("known_id.csv")),
        "--ood-scores",
        &s(&fixture("known_ood.csv")),
        "--eval.output",
        &out,
    ])
    .unwrap();
    let report = MetricsReport::parse(&known).unwrap();
    assert_eq!(report.gamma, 0.5);
    assert_eq!(report.fpr95, 0.75);
    assert!((report.auroc - 14.5 / 20.0).abs() < 1e-12);

    let err = run(&["eval", "--id-scores", &s(&fixture("bad_header.csv")), "--ood-scores", &s(&fixture("known_ood.csv")), "--eval.output", &out])
        .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("header"), "{err}");
    let err = run(&["eval", "--id-scores", &s(&fixture("known_ood.csv")), "--ood-scores", &s(&fixture("known_ood.csv")), "--eval.output", &out])
        .unwrap_err();
    assert!(err.to_string().contains("is_id"), "{err}");
}

#[test]
fn plot_rejects_coarse_grids() {
    let (code, err) = exit_code(&["plot-uncertainty", "--resolution", "1"]);
    assert_eq!(code, 1);
    assert!(err.contains("resolution"), "{err}");
}

#[test]
fn plot_writes_heatmap_values_and_boundaries() {
    let (dir, conf) = setup();
    let c = s(&conf);
    let p = |name: &str| s(&dir.path().join(name));
    run(&["generate-data", "--config", &c]).unwrap();
    run(&["train", "--config", &c]).unwrap();
    run(&[
        "plot-uncertainty", "--config", &c, "--checkpoint", &p("model.ckpt"), "--resolution", "9",
        "--output", &p("u.pgm"), "--values", &p("u.txt"), "--svg", &p("u.svg"),
    ])
    .unwrap();
    let pgm = std::fs::read_to_string(p("u.pgm")).unwrap();
    let mut tokens = pgm.split_whitespace();
    assert_eq!(tokens.next(), Some("P2"));
    let pixels: Vec<u32> = tokens.skip(3).map(|t| t.parse().unwrap()).collect();
    assert_eq!(pixels.len(), 81);
    assert!(pixels.iter().all(|&v| v <= 255));
    let values: Vec<f64> = std::fs::read_to_string(p("u.txt")).unwrap().split_whitespace().map(|t| t.parse().unwrap()).collect();
    assert_eq!(values.len(), 81);
    for (px, v) in pixels.iter().zip(&values) {
        assert_eq!(*px, (v * 255.0).round() as u32);
    }
    assert!(std::fs::read_to_string(p("u.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn show_config_round_trips() {
    let (dir, conf) = setup();
    let c = s(&conf);
    let dumped = run(&["show-config", "--config", &c, "--beta", "0.2"]).unwrap();
    let again = dir.path().join("again.conf");
    std::fs::write(&again, &dumped).unwrap();
    assert_eq!(run(&["show-config", "--config", &s(&again)]).unwrap(), dumped);

    run(&["generate-data", "--config", &c]).unwrap();
    run(&["train", "--config", &c, "--beta", "0.2"]).unwrap();
    let first = std::fs::read(dir.path().join("model.ckpt")).unwrap();
    run(&["train", "--config", &s(&again)]).unwrap();
    assert_eq!(std::fs::read(dir.path().join("model.ckpt")).unwrap(), first);
}

/// Heatmap of a short fixed training run on a 2×2 grid, compared with the
/// stored reference byte for byte. Set `VOS_UPDATE_GOLDEN=1` to rewrite it.
#[test]
fn heatmap_2x2_matches_golden_files() {
    let (dir, conf) = setup();
    let c = s(&conf);
    let p = |name: &str| s(&dir.path().join(name));
    run(&["generate-data", "--config", &c]).unwrap();
    run(&["train", "--config", &c]).unwrap();
    run(&["plot-uncertainty", "--config", &c, "--checkpoint", &p("model.ckpt"), "--resolution", "2", "--output", &p("g.pgm"), "--values", &p("g.txt")])
        .unwrap();
    for (produced, golden) in [("g.pgm", "heatmap_2x2.pgm"), ("g.txt", "heatmap_2x2.txt")] {
        let bytes = std::fs::read(p(produced)).unwrap();
        if std::env::var_os("VOS_UPDATE_GOLDEN").is_some() {
            std::fs::write(fixture(golden), &bytes).unwrap();
        }
        assert_eq!(bytes, std::fs::read(fixture(golden)).unwrap(), "{golden}");
    }
}
