//! Summaries of finished training runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::analysis::plot::{render_svg, MetricsTable, PlotSpec, Series};
use crate::config::KvConfig;
use crate::denoiser::Conditioning;
use crate::error::{Error, Result};
use crate::refnet::EncoderMode;
use crate::trainer::TrainConfig;
use crate::tsampler::TimestepKind;

pub const TABLE_HEADER: &str = "gaussian,dense,amalgamation,t_mean,t_std,n_seeds,feat_dist_mean,feat_dist_std,mse_mean,mse_std";

/// The final validation metrics of one run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub config: TrainConfig,
    pub val_mse: f64,
    pub val_featdist: f64,
    pub metrics: MetricsTable,
}

pub fn load_run(dir: &Path) -> Result<RunSummary> {
    let p = dir.join("config.txt");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let mut config = TrainConfig::default();
    config.apply_kv(&KvConfig::parse(&text)?)?;
    let metrics = MetricsTable::load(&dir.join("metrics.csv"))?;
    let last = |c: &str| -> Result<f64> {
        metrics.column(c)?.last().copied().ok_or_else(|| Error::invalid(format!("{} has no rows", dir.display())))
    };
    Ok(RunSummary { dir: dir.to_path_buf(), val_mse: last("val_mse")?, val_featdist: last("val_featdist")?, config, metrics })
}

/// Table-1 style row: one configuration aggregated over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub timesteps: TimestepKind,
    pub encoder: EncoderMode,
    pub conditioning: Conditioning,
    pub n_seeds: usize,
    pub feat_dist: (f64, f64),
    pub mse: (f64, f64),
}

impl SummaryRow {
    pub fn label(&self) -> String {
        cell_label(self.timesteps, self.encoder, self.conditioning)
    }

    pub fn csv(&self) -> String {
        let (m, s) = match self.timesteps {
            TimestepKind::Gaussian { mean, std } => (mean.to_string(), std.to_string()),
            TimestepKind::Uniform => (String::new(), String::new()),
        };
        format!(
            "{},{},{},{m},{s},{},{:.6},{:.6},{:.6},{:.6}",
            u8::from(matches!(self.timesteps, TimestepKind::Gaussian { .. })),
            u8::from(self.encoder == EncoderMode::Dense),
            u8::from(self.conditioning == Conditioning::Amalgamation),
            self.n_seeds,
            self.feat_dist.0,
            self.feat_dist.1,
            self.mse.0,
            self.mse.1
        )
    }
}

pub fn cell_label(t: TimestepKind, e: EncoderMode, c: Conditioning) -> String {
    let ts = match t {
        TimestepKind::Uniform => "uniform".to_string(),
        TimestepKind::Gaussian { mean, std } => format!("gauss-m{mean}-s{std}"),
    };
    format!("{ts}_{e}_{c}")
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups runs by configuration, ordered by label.
pub fn summarize(runs: &[RunSummary]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<String, Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        let c = &r.config;
        groups.entry(cell_label(c.timesteps, c.encoder_mode, c.conditioning)).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let c = &g[0].config;
            let fd: Vec<f64> = g.iter().map(|r| r.val_featdist).collect();
            let mse: Vec<f64> = g.iter().map(|r| r.val_mse).collect();
            SummaryRow {
                timesteps: c.timesteps,
                encoder: c.encoder_mode,
                conditioning: c.conditioning,
                n_seeds: g.len(),
                feat_dist: mean_std(&fd),
                mse: mean_std(&mse),
            }
        })
        .collect()
}

pub fn table_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

pub fn table_text(rows: &[SummaryRow]) -> String {
    let mark = |b: bool| if b { "x" } else { "-" };
    let mut s = String::new();
    let _ = writeln!(s, "{:<40} {:^8} {:^5} {:^12} {:>21} {:>21}", "run", "gaussian", "dense", "amalgamation", "feat_dist", "mse");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<40} {:^8} {:^5} {:^12} {:>10.4} ± {:<8.4} {:>10.4} ± {:<8.4}",
            r.label(),
            mark(matches!(r.timesteps, TimestepKind::Gaussian { .. })),
            mark(r.encoder == EncoderMode::Dense),
            mark(r.conditioning == Conditioning::Amalgamation),
            r.feat_dist.0,
            r.feat_dist.1,
            r.mse.0,
            r.mse.1
        );
    }
    s
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes one SVG of `y` against `x` with a series per run.
pub(crate) fn plot_runs(runs: &[RunSummary], x: &str, y: &str, out: &Path) -> Result<()> {
    let series = runs
        .iter()
        .map(|r| {
            let c = &r.config;
            Ok(Series {
                label: format!("{} s{}", cell_label(c.timesteps, c.encoder_mode, c.conditioning), c.seed),
                points: r.metrics.series(x, y)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = PlotSpec { title: format!("{y} vs {x}"), x_label: x.into(), y_label: y.into(), log_x: false };
    write_text(out, &render_svg(&spec, &series)?)
}

/// Summarizes run directories into `out`: `summary.csv`, `summary.txt` and
/// loss and validation curves.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<SummaryRow>> {
    if run_dirs.is_empty() {
        return Err(Error::invalid("report needs at least one run directory"));
    }
    let runs = run_dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rows = summarize(&runs);
    write_text(&out.join("summary.csv"), &table_csv(&rows))?;
    write_text(&out.join("summary.txt"), &table_text(&rows))?;
    plot_runs(&runs, "wall_clock_s", "train_loss", &out.join("train_loss_vs_wall_clock.svg"))?;
    plot_runs(&runs, "step", "val_mse", &out.join("val_mse_vs_step.svg"))?;
    if runs.iter().any(|r| r.val_featdist.is_finite()) {
        plot_runs(&runs, "step", "val_featdist", &out.join("val_featdist_vs_step.svg"))?;
    }
    Ok(rows)
}
