//! The ablation grid, timestep sweeps and their tables and plots.

use std::path::PathBuf;

use rayon::prelude::*;

use super::pipeline::{prepare_data, prepare_encoder, train_run, Prepared};
use super::report::{cell_label, load_run, plot_runs, summarize, table_csv, table_text, write_text, RunSummary, SummaryRow};
use super::stages::StageRunner;
use super::{sha_hex, ExperimentConfig, EXPERIMENT_KEYS};
use crate::analysis::plot::{render_svg, PlotSpec, Series};
use crate::config::KvConfig;
use crate::denoiser::Conditioning;
use crate::error::{Error, Result};
use crate::refnet::EncoderMode;
use crate::trainer::TRAIN_KEYS;
use crate::tsampler::TimestepKind;

pub const GRID_KEYS: &[&str] = &["seeds", "cells", "sweep_means", "sweep_stds", "sweep_fixed_mean", "sweep_fixed_std", "parallel"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub timesteps: TimestepKind,
    pub encoder: EncoderMode,
    pub conditioning: Conditioning,
}

impl Cell {
    pub fn label(&self) -> String {
        cell_label(self.timesteps, self.encoder, self.conditioning)
    }

    /// The eight combinations of uniform or `gaussian`, global or dense, and
    /// CLS-only or amalgamation, baseline first.
    pub fn full_grid(gaussian: TimestepKind) -> Vec<Cell> {
        let mut cells = Vec::with_capacity(8);
        for timesteps in [TimestepKind::Uniform, gaussian] {
            for encoder in [EncoderMode::Global, EncoderMode::Dense] {
                for conditioning in [Conditioning::ClsOnly, Conditioning::Amalgamation] {
                    cells.push(Cell { timesteps, encoder, conditioning });
                }
            }
        }
        cells
    }

    /// Parses `uniform/global/cls_only`; `gaussian` takes the given kind.
    fn parse(s: &str, gaussian: TimestepKind) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split('/').map(str::trim).collect();
        let [t, e, c] = parts[..] else {
            return Err(Error::invalid(format!("cell {s:?} must read timesteps/encoder/conditioning")));
        };
        let timesteps = match t {
            "uniform" => TimestepKind::Uniform,
            "gaussian" => gaussian,
            _ => return Err(Error::invalid(format!("unknown timesteps {t:?} in cell {s:?}"))),
        };
        Ok(Cell { timesteps, encoder: e.parse()?, conditioning: c.parse()? })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    /// Shared settings; each cell overrides timesteps, encoder and conditioning.
    pub base: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
    pub sweep_means: Vec<f64>,
    pub sweep_stds: Vec<f64>,
    pub sweep_fixed_mean: f64,
    pub sweep_fixed_std: f64,
    /// Cells trained concurrently.
    pub parallel: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        let base = ExperimentConfig::default();
        Self {
            cells: Cell::full_grid(base.train.timesteps),
            base,
            seeds: vec![0, 1, 2],
            sweep_means: vec![0.0, 300.0, 500.0, 700.0, 1000.0],
            sweep_stds: vec![100.0, 200.0, 300.0, 400.0, 500.0],
            sweep_fixed_mean: 1000.0,
            sweep_fixed_std: 200.0,
            parallel: 1,
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::invalid(format!("{key}: cannot parse {s:?}"))))
        .collect()
}

impl GridConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvConfig::parse(text)?;
        let known: Vec<&str> = TRAIN_KEYS.iter().chain(EXPERIMENT_KEYS).chain(GRID_KEYS).copied().collect();
        kv.reject_unknown(&known)?;
        let mut g = Self::default();
        g.base.apply_kv(&kv)?;
        let gaussian = match g.base.train.timesteps {
            k @ TimestepKind::Gaussian { .. } => k,
            TimestepKind::Uniform => TimestepKind::Gaussian { mean: 1000.0, std: 200.0 },
        };
        g.cells = match kv.raw("cells") {
            None | Some("full") => Cell::full_grid(gaussian),
            Some(list) => list.split(';').filter(|s| !s.trim().is_empty()).map(|s| Cell::parse(s, gaussian)).collect::<Result<_>>()?,
        };
        if let Some(v) = kv.raw("seeds") {
            g.seeds = parse_list("seeds", v)?;
        }
        if let Some(v) = kv.raw("sweep_means") {
            g.sweep_means = parse_list("sweep_means", v)?;
        }
        if let Some(v) = kv.raw("sweep_stds") {
            g.sweep_stds = parse_list("sweep_stds", v)?;
        }
        kv.read_into("sweep_fixed_mean", &mut g.sweep_fixed_mean)?;
        kv.read_into("sweep_fixed_std", &mut g.sweep_fixed_std)?;
        kv.read_into("parallel", &mut g.parallel)?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.seeds.is_empty() || self.cells.is_empty() {
            return Err(Error::invalid("the grid needs at least one cell and one seed"));
        }
        Ok(())
    }

    /// Gaussian dense amalgamation cells of the mean and std sweeps.
    pub fn sweep_cells(&self) -> (Vec<Cell>, Vec<Cell>) {
        let cell = |mean, std| Cell {
            timesteps: TimestepKind::Gaussian { mean, std },
            encoder: EncoderMode::Dense,
            conditioning: Conditioning::Amalgamation,
        };
        (
            self.sweep_means.iter().map(|&m| cell(m, self.sweep_fixed_std)).collect(),
            self.sweep_stds.iter().map(|&s| cell(self.sweep_fixed_mean, s)).collect(),
        )
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub seed: u64,
    pub dir: PathBuf,
    pub outcome: std::result::Result<RunSummary, String>,
}

#[derive(Clone, Debug, Default)]
pub struct GridReport {
    pub table: Vec<SummaryRow>,
    pub sweep_mean: Vec<SummaryRow>,
    pub sweep_std: Vec<SummaryRow>,
    pub results: Vec<CellResult>,
    /// `(label, seed, error)` of every failed run.
    pub failures: Vec<(String, u64, String)>,
}

impl GridReport {
    pub fn row(&self, cell: &Cell) -> Option<&SummaryRow> {
        self.table.iter().chain(&self.sweep_mean).chain(&self.sweep_std).find(|r| r.label() == cell.label())
    }
}

fn rows_for(cells: &[Cell], runs: &[RunSummary]) -> Vec<SummaryRow> {
    let all = summarize(runs);
    cells.iter().filter_map(|c| all.iter().find(|r| r.label() == c.label()).cloned()).collect()
}

fn sweep_svg(rows: &[SummaryRow], axis: &str, metric: &str) -> Result<String> {
    let x = |r: &SummaryRow| match r.timesteps {
        TimestepKind::Gaussian { mean, std } => if axis == "mean" { mean } else { std },
        TimestepKind::Uniform => f64::NAN,
    };
    let pick = |r: &SummaryRow| if metric == "val_mse" { r.mse } else { r.feat_dist };
    let points = |f: fn((f64, f64)) -> f64| rows.iter().map(|r| (x(r), f(pick(r)))).filter(|p| p.1.is_finite()).collect();
    let series = [
        Series { label: format!("{metric} mean"), points: points(|m| m.0) },
        Series { label: "mean - std".into(), points: points(|m| m.0 - m.1) },
        Series { label: "mean + std".into(), points: points(|m| m.0 + m.1) },
    ];
    let spec = PlotSpec { title: format!("{metric} vs timestep {axis}"), x_label: format!("t_{axis}"), y_label: metric.into(), log_x: false };
    render_svg(&spec, &series)
}

/// Trains every cell of the grid and both sweeps for every seed, then writes
/// `ablation.csv`/`ablation.txt`, the sweep CSVs and SVGs and per-cell
/// loss-versus-wall-clock SVGs into the base output directory.
///
/// Runs already completed with identical inputs are reused. Failed runs are
/// logged, listed in `failures.txt` and left out of the tables.
pub fn bench_ablate(grid: &GridConfig) -> Result<GridReport> {
    grid.validate()?;
    let out = grid.base.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut runner = StageRunner::open(&out.join("bench.manifest"))?;
    let data = prepare_data(&mut runner, &grid.base)?;
    let (means, stds) = grid.sweep_cells();
    let mut all_cells: Vec<Cell> = Vec::new();
    for c in grid.cells.iter().chain(&means).chain(&stds) {
        if !all_cells.iter().any(|d| d.label() == c.label()) {
            all_cells.push(*c);
        }
    }
    let prep = |runner: &mut StageRunner, mode: EncoderMode| -> Result<Prepared> {
        let enc = out.join(format!("encoder_{mode}.bin"));
        let cache = out.join(format!("features_{mode}.fcch"));
        let base = ExperimentConfig { encoder: None, ..grid.base.clone() };
        prepare_encoder(runner, &base, mode, enc, cache, &data)
    };
    let dense = prep(&mut runner, EncoderMode::Dense)?;
    let global = if all_cells.iter().any(|c| c.encoder == EncoderMode::Global) { Some(prep(&mut runner, EncoderMode::Global)?) } else { None };
    let metric = (dense.encoder.clone(), dense.encoder_hash.clone());

    struct Job {
        cell: Cell,
        seed: u64,
        cfg: ExperimentConfig,
        name: String,
        key: String,
        dir: PathBuf,
        fresh: bool,
    }
    let mut jobs = Vec::new();
    for cell in &all_cells {
        for &seed in &grid.seeds {
            let mut cfg = grid.base.clone();
            cfg.train.timesteps = cell.timesteps;
            cfg.train.encoder_mode = cell.encoder;
            cfg.train.conditioning = cell.conditioning;
            cfg.train.seed = seed;
            let p = if cell.encoder == EncoderMode::Dense { &dense } else { global.as_ref().expect("prepared above") };
            let dir = out.join("runs").join(cell.label()).join(format!("seed{seed}"));
            let mut tkv = KvConfig::default();
            cfg.train.to_kv(&mut tkv);
            let key = sha_hex(&["run", &tkv.render(), &p.dataset_hash, &p.cache_hash, &metric.1]);
            let name = format!("run_{}_seed{seed}", cell.label());
            let deps = ["data".to_string(), format!("encoder_{}", cell.encoder), format!("cache_{}", cell.encoder), "encoder_dense".into()];
            let deps: Vec<&str> = deps.iter().map(String::as_str).collect();
            let fresh = runner.is_fresh(&name, &key, &deps, &[dir.join("metrics.csv")]);
            jobs.push(Job { cell: *cell, seed, cfg, name, key, dir, fresh });
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(grid.parallel.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<()>> = pool.install(|| {
        jobs.par_iter()
            .map(|j| {
                if j.fresh {
                    return Ok(());
                }
                log::info!("training {} seed {}", j.cell.label(), j.seed);
                let p = if j.cell.encoder == EncoderMode::Dense { &dense } else { global.as_ref().expect("prepared above") };
                let cfg = ExperimentConfig { out_dir: j.dir.clone(), ..j.cfg.clone() };
                train_run(&cfg, p, Some(&metric), &j.dir)
            })
            .collect()
    });

    let mut report = GridReport::default();
    let mut warnings = String::new();
    for (j, outcome) in jobs.iter().zip(outcomes) {
        if j.fresh {
            runner.mark_skipped(&j.name);
        }
        let outcome = outcome.and_then(|_| {
            if !j.fresh {
                runner.record(&j.name, &j.key, &[j.dir.join("metrics.csv")])?;
            }
            load_run(&j.dir)
        });
        let outcome = match outcome {
            Ok(s) if s.val_mse.is_finite() => Ok(s),
            Ok(_) => Err("no finite validation metric".to_string()),
            Err(e) => Err(format!("{}: {e}", e.kind())),
        };
        if let Err(e) = &outcome {
            log::warn!("excluding {} seed {}: {e}", j.cell.label(), j.seed);
            warnings.push_str(&format!("{} seed {}: {e}\n", j.cell.label(), j.seed));
            report.failures.push((j.cell.label(), j.seed, e.clone()));
        }
        report.results.push(CellResult { cell: j.cell, seed: j.seed, dir: j.dir.clone(), outcome });
    }
    write_text(&out.join("failures.txt"), &warnings)?;

    let ok: Vec<RunSummary> = report.results.iter().filter_map(|r| r.outcome.as_ref().ok().cloned()).collect();
    report.table = rows_for(&grid.cells, &ok);
    report.sweep_mean = rows_for(&means, &ok);
    report.sweep_std = rows_for(&stds, &ok);
    write_text(&out.join("ablation.csv"), &table_csv(&report.table))?;
    write_text(&out.join("ablation.txt"), &table_text(&report.table))?;
    for (name, rows) in [("mean", &report.sweep_mean), ("std", &report.sweep_std)] {
        if rows.is_empty() {
            continue;
        }
        write_text(&out.join(format!("sweep_{name}.csv")), &table_csv(rows))?;
        for metric in ["val_mse", "val_featdist"] {
            write_text(&out.join(format!("sweep_{name}_{metric}.svg")), &sweep_svg(rows, name, metric)?)?;
        }
    }
    for cell in &all_cells {
        let runs: Vec<RunSummary> = ok.iter().filter(|r| cell_label(r.config.timesteps, r.config.encoder_mode, r.config.conditioning) == cell.label()).cloned().collect();
        if !runs.is_empty() {
            plot_runs(&runs, "wall_clock_s", "train_loss", &out.join(format!("loss_{}.svg", cell.label())))?;
        }
    }
    Ok(report)
}
