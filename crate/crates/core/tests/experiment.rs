use std::path::Path;
use std::process::Command;

use viewdiff::experiment::{
    bench_ablate, file_hash, mean_std, run_pipeline, Cell, ExperimentConfig, GridConfig, PROVENANCE, RESOLVED_CONFIG,
};
use viewdiff::refnet::EncoderMode;
use viewdiff::denoiser::Conditioning;
use viewdiff::tsampler::TimestepKind;
use viewdiff::Error;

const TINY: &str = "\
# smallest useful profile
objects = 6
pretrain_steps = 2
max_steps = 2
warmup_steps = 1
batch_size = 4
grad_accum = 2
channels = 8,16
res_blocks = 1
val_every = 1
val_pairs = 4
sample_steps = 3
samples = 2
record_wall_clock = false
";

fn tiny(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::parse(TINY).unwrap();
    c.out_dir = out.to_path_buf();
    c
}

#[test]
fn unknown_keys_are_rejected_with_their_line() {
    let err = ExperimentConfig::parse("objects = 6\n\nmax_step = 10\n").unwrap_err();
    assert!(matches!(err, Error::Config { line: 3, .. }), "{err}");
    assert!(ExperimentConfig::parse("objects = many\n").is_err());
}

#[test]
fn resolved_config_round_trips() {
    let c = tiny(Path::new("/tmp/x"));
    assert_eq!(c.dataset_path(), Path::new("/tmp/x/data.nvds"));
    assert_eq!(c.cache_path(), Path::new("/tmp/x/features_dense.fcch"));
    let text = c.resolved().render();
    let back = ExperimentConfig::parse(&text).unwrap();
    assert_eq!(back.resolved().render(), text);
    assert_eq!(back.train, c.train);
}

#[test]
fn pipeline_is_hash_gated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let first = run_pipeline(&cfg).unwrap();
    assert_eq!(first.ran, ["data", "encoder_dense", "cache_dense", "train", "sample", "report"]);
    let again = run_pipeline(&cfg).unwrap();
    assert!(again.ran.is_empty(), "{:?}", again.ran);
    assert_eq!(again.skipped.len(), 6);

    std::fs::remove_file(cfg.cache_path()).unwrap();
    let third = run_pipeline(&cfg).unwrap();
    assert_eq!(third.ran, ["cache_dense", "train", "sample", "report"]);
    assert_eq!(third.skipped, ["data", "encoder_dense"]);

    let train = dir.path().join("train");
    let prov = std::fs::read_to_string(train.join(PROVENANCE)).unwrap();
    assert!(prov.contains(&format!("input.dataset = {}", file_hash(&cfg.dataset_path()).unwrap())));
    assert!(prov.contains(&format!("input.cache = {}", file_hash(&cfg.cache_path()).unwrap())));
    assert!(prov.contains("seed = 0"));
    let resolved = std::fs::read_to_string(train.join(RESOLVED_CONFIG)).unwrap();
    assert_eq!(resolved, cfg.resolved().render());
    assert!(dir.path().join("samples/samples.csv").exists());
    assert!(dir.path().join("report/summary.csv").exists());
}

#[test]
fn stage_failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.nvds");
    std::fs::write(&bogus, b"not a dataset").unwrap();
    let cfg = ExperimentConfig { dataset: Some(bogus), ..tiny(dir.path()) };
    match run_pipeline(&cfg).unwrap_err() {
        Error::Stage { stage, source } => {
            assert_eq!(stage, "encoder_dense");
            assert_eq!(source.kind(), "format");
        }
        other => panic!("unexpected {other}"),
    }
}

fn one_cell_grid(out: &Path) -> GridConfig {
    GridConfig {
        base: tiny(out),
        seeds: vec![5],
        cells: vec![Cell {
            timesteps: TimestepKind::Gaussian { mean: 1000.0, std: 200.0 },
            encoder: EncoderMode::Dense,
            conditioning: Conditioning::Amalgamation,
        }],
        sweep_means: vec![],
        sweep_stds: vec![],
        ..GridConfig::default()
    }
}

#[test]
fn single_cell_grid_gives_one_stable_row() {
    let dir = tempfile::tempdir().unwrap();
    let grid = one_cell_grid(dir.path());
    let rep = bench_ablate(&grid).unwrap();
    assert_eq!(rep.table.len(), 1);
    assert_eq!(rep.table[0].n_seeds, 1);
    assert_eq!(rep.table[0].mse.1, 0.0);
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("1,1,1,1000,200,1,"));

    // a fresh directory with the same inputs reproduces the table byte for byte
    let other = tempfile::tempdir().unwrap();
    bench_ablate(&one_cell_grid(other.path())).unwrap();
    assert_eq!(std::fs::read_to_string(other.path().join("ablation.csv")).unwrap(), csv);
    let run = "runs/gauss-m1000-s200_dense_amalgamation/seed5/metrics.csv";
    assert_eq!(
        std::fs::read(dir.path().join(run)).unwrap(),
        std::fs::read(other.path().join(run)).unwrap()
    );
}

#[test]
fn failed_runs_are_excluded_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let mut grid = one_cell_grid(dir.path());
    grid.seeds = vec![1, 2];
    // a file where the seed-2 run directory belongs makes that run fail
    let blocked = dir.path().join("runs/gauss-m1000-s200_dense_amalgamation");
    std::fs::create_dir_all(&blocked).unwrap();
    std::fs::write(blocked.join("seed2"), b"").unwrap();
    let rep = bench_ablate(&grid).unwrap();
    assert_eq!(rep.failures.len(), 1);
    assert_eq!(rep.failures[0].1, 2);
    assert_eq!(rep.table[0].n_seeds, 1);
    let warn = std::fs::read_to_string(dir.path().join("failures.txt")).unwrap();
    assert!(warn.starts_with("gauss-m1000-s200_dense_amalgamation seed 2: io"), "{warn}");
}

#[test]
fn grid_config_parses_cells_and_rejects_unknown_keys() {
    let g = GridConfig::parse("cells = uniform/global/cls_only; gaussian/dense/amalgamation\nseeds = 4,5\nt_std = 300\n").unwrap();
    assert_eq!(g.seeds, [4, 5]);
    assert_eq!(g.cells.len(), 2);
    assert_eq!(g.cells[1].timesteps, TimestepKind::Gaussian { mean: 1000.0, std: 300.0 });
    assert_eq!(GridConfig::parse("").unwrap().cells.len(), 8);
    assert!(GridConfig::parse("cells = uniform/dense\n").is_err());
    assert!(matches!(GridConfig::parse("seeds = 1\nparalel = 2\n"), Err(Error::Config { line: 2, .. })));
    let (means, stds) = GridConfig::default().sweep_cells();
    let m: Vec<_> = means.iter().map(|c| c.timesteps).collect();
    assert_eq!(m[0], TimestepKind::Gaussian { mean: 0.0, std: 200.0 });
    assert_eq!(stds.len(), 5);
    assert_eq!(stds[0].timesteps, TimestepKind::Gaussian { mean: 1000.0, std: 100.0 });
}

#[test]
fn mean_std_matches_direct_formula() {
    let v = [0.25, 0.5, 1.0];
    let (m, s) = mean_std(&v);
    let mean = 1.75 / 3.0;
    let var = ((0.25f64 - mean).powi(2) + (0.5f64 - mean).powi(2) + (1.0f64 - mean).powi(2)) / 2.0;
    assert!((m - mean).abs() < 1e-15);
    assert!((s - var.sqrt()).abs() < 1e-15);
    assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
}

#[test]
fn cli_reports_machine_readable_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_viewdiff");
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "objects = 4\nbogus = 1\n").unwrap();
    let out = Command::new(bin).arg("--config").arg(&cfg).arg("train").output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    let line = err.lines().last().unwrap();
    assert!(line.starts_with(r#"{"error":"config","message":"config error at line 2"#), "{line}");

    let data = dir.path().join("d.nvds");
    let out = Command::new(bin).args(["--seed", "3", "gen-data", "--objects", "2", "--out"]).arg(&data).output().unwrap();
    assert!(out.status.success());
    assert_eq!(viewdiff::synthdata::Dataset::load(&data).unwrap().n_objects(), 2);
}
