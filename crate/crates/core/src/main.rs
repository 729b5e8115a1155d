use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use viewdiff::analysis::image::{signed_chw_to_rgb, upscale_rgb, write_rgb_png, write_strip};
use viewdiff::analysis::{patch_mask, pca_visualize};
use viewdiff::experiment::{
    bench_ablate, match_views, report, run_pipeline, sample_pairs, table_text, train_experiment, write_provenance,
    ExperimentConfig, GridConfig,
};
use viewdiff::inference::SamplerConfig;
use viewdiff::refnet::{cache_features, pretrain, EncoderConfig, EncoderMode, PretrainConfig, RefEncoder};
use viewdiff::synthdata::{build_dataset, Dataset, ViewPair, ViewRig};
use viewdiff::trainer::Checkpoint;
use viewdiff::{Error, Result};

/// Upscaling factor of PNG overlays.
const SCALE: usize = 4;

#[derive(Parser, Debug)]
#[command(name = "viewdiff", version, about = "Desk-scale novel view synthesis diffusion lab")]
struct Cli {
    /// Seed override for the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (file or directory depending on the subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic multi-view dataset.
    GenData {
        #[arg(long, default_value_t = 4096)]
        objects: usize,
    },
    /// Pretrain a reference encoder on a dataset's training split.
    PretrainEncoder {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dense")]
        mode: EncoderMode,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
    },
    /// Write the feature cache of a frozen encoder over a dataset.
    CacheFeatures {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Train a denoiser; missing data, encoder and cache are produced first.
    Train,
    /// Sample a target view from a checkpoint.
    Sample(SampleArgs),
    /// Color encoder patch features by their first three principal components.
    AnalyzePca {
        #[command(flatten)]
        view: ViewArgs,
        #[arg(long)]
        view_index: usize,
    },
    /// Match patches between two views and score them against geometry.
    AnalyzeMatch {
        #[command(flatten)]
        view: ViewArgs,
        #[arg(long)]
        view_a: usize,
        #[arg(long)]
        view_b: usize,
        /// Seed the dataset was generated with.
        #[arg(long, default_value_t = 0)]
        dataset_seed: u64,
        #[arg(long, default_value_t = 1)]
        tolerance: usize,
    },
    /// Run the ablation grid and the timestep sweeps.
    BenchAblate {
        /// Grid cells trained concurrently.
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Summarize finished run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Run data, encoder, cache, train, sample and report with hash gating.
    Pipeline,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    object: usize,
    #[arg(long)]
    view: usize,
    #[arg(long)]
    target_view: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    /// Directory for trajectory frames.
    #[arg(long)]
    traj_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ViewArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    object: usize,
    /// Encoder block whose patch grid is analyzed; defaults to the last.
    #[arg(long)]
    layer: Option<usize>,
}

fn required_out(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| Error::InvalidArgument("--out is required".into()))
}

fn experiment_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn load_frozen(path: &Path) -> Result<RefEncoder> {
    let e = RefEncoder::load(path)?;
    Ok(if e.frozen { e } else { e.freeze() })
}

fn view_tile(dataset: &Dataset, object: usize, view: usize) -> Vec<u8> {
    let (h, w) = (dataset.height, dataset.width);
    upscale_rgb(&signed_chw_to_rgb(&dataset.view(object, view).to_signed_chw(), h, w), w, h, SCALE)
}

/// One color per patch, expanded to the image resolution of the views.
fn patch_tile(colors: &[[u8; 3]], grid: usize, size: usize) -> Vec<u8> {
    let side = size * SCALE;
    let cell = side / grid;
    let mut out = vec![0u8; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            let c = colors[(y / cell).min(grid - 1) * grid + (x / cell).min(grid - 1)];
            out[(y * side + x) * 3..][..3].copy_from_slice(&c);
        }
    }
    out
}

/// Colors a patch index by its grid position so matched patches share hues.
fn position_color(index: Option<usize>, grid: usize) -> [u8; 3] {
    match index {
        None => [0, 0, 0],
        Some(i) => {
            let (r, c) = (i / grid, i % grid);
            let scale = |v: usize| (40 + 215 * v / (grid - 1).max(1)) as u8;
            [scale(r), scale(c), 128]
        }
    }
}

fn layer_of(args: &ViewArgs, encoder: &RefEncoder) -> usize {
    args.layer.unwrap_or(encoder.config.depth - 1)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { objects } => {
            let out = required_out(cli)?;
            let hash = build_dataset(*objects, cli.seed.unwrap_or(0), &ViewRig::default(), out)?;
            println!("wrote {} ({objects} objects) sha256={hash}", out.display());
        }
        Command::PretrainEncoder { data, mode, steps } => {
            let out = required_out(cli)?;
            let ds = Dataset::load(data)?;
            let seed = cli.seed.unwrap_or(0);
            let cfg = PretrainConfig { steps: *steps, seed, ..PretrainConfig::new(*mode) };
            let (enc, rep) = pretrain(RefEncoder::new(EncoderConfig::default(), seed)?, &ds, &ds.split().train, &cfg)?;
            enc.save(out)?;
            let last = rep.losses.last().copied().unwrap_or(f64::NAN);
            println!("wrote {} ({mode}, {steps} steps, final loss {last:.5})", out.display());
        }
        Command::CacheFeatures { data, encoder } => {
            let out = required_out(cli)?;
            cache_features(&load_frozen(encoder)?, &Dataset::load(data)?, out)?;
            println!("wrote {}", out.display());
        }
        Command::Train => {
            let cfg = experiment_config(cli)?;
            let rep = train_experiment(&cfg)?;
            println!("trained into {} (ran: {}; skipped: {})", rep.out_dir.join("train").display(), rep.ran.join(","), rep.skipped.join(","));
        }
        Command::Sample(a) => {
            let ds = Dataset::load(&a.data)?;
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let model = ckpt.model::<f32>()?;
            let encoder = load_frozen(&a.encoder)?;
            let v = ds.views_per_object;
            if a.object >= ds.n_objects() || a.view >= v || a.target_view >= v {
                return Err(Error::InvalidArgument(format!("object/view out of range ({} objects, {v} views)", ds.n_objects())));
            }
            let pair = ViewPair::new(&ds, a.object, a.target_view, a.view);
            let sampler = SamplerConfig { steps: a.steps, eta: a.eta, seed: cli.seed.unwrap_or(0) };
            let output = sample_pairs(&model, &encoder, &ds, &[pair], &sampler)?;
            let (h, w) = (ds.height, ds.width);
            let tile = |chw: &[f64]| upscale_rgb(&signed_chw_to_rgb(chw, h, w), w, h, SCALE);
            let dir = a.traj_out.clone().or_else(|| cli.out.clone()).unwrap_or_else(|| PathBuf::from("sample_out"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            if a.traj_out.is_some() {
                for (i, (x0, t)) in output.trajectory.iter().zip(&output.timesteps).enumerate() {
                    write_rgb_png(&dir.join(format!("frame_{i:03}_t{t:04}.png")), w * SCALE, h * SCALE, &tile(x0))?;
                }
            }
            write_rgb_png(&dir.join("final.png"), w * SCALE, h * SCALE, &tile(&output.image))?;
            let reference = view_tile(&ds, a.object, a.view);
            let target = view_tile(&ds, a.object, a.target_view);
            write_strip(&dir.join("comparison.png"), &[reference, target, tile(&output.image)], w * SCALE, h * SCALE)?;
            let mse = viewdiff::analysis::mse(&output.image, &ds.view(a.object, a.target_view).to_signed_chw())?;
            let mut kv = viewdiff::config::KvConfig::default();
            for (k, val) in [("object", a.object), ("view", a.view), ("target_view", a.target_view), ("steps", a.steps)] {
                kv.set(k, val);
            }
            kv.set("eta", a.eta);
            kv.set("checkpoint", a.checkpoint.display());
            write_provenance(&dir, &kv, sampler.seed, &[("checkpoint_config", viewdiff::synthdata::container::hex(&ckpt.config_hash()))])?;
            println!("wrote {} frames and final.png to {} (mse {mse:.5})", output.trajectory.len(), dir.display());
        }
        Command::AnalyzePca { view, view_index } => {
            let out = required_out(cli)?;
            let ds = Dataset::load(&view.data)?;
            let enc = load_frozen(&view.encoder)?;
            let layer = layer_of(view, &enc);
            let rendered = ds.view(view.object, *view_index);
            let f = enc.forward_features(rendered)?;
            let grid = f.grids.get(layer).ok_or_else(|| Error::InvalidArgument(format!("layer {layer} out of range")))?;
            let colors = pca_visualize(grid, enc.config.dim, &patch_mask(rendered, enc.config.patch))?;
            let tiles = [view_tile(&ds, view.object, *view_index), patch_tile(&colors, enc.config.grid(), ds.width)];
            write_strip(out, &tiles, ds.width * SCALE, ds.height * SCALE)?;
            println!("wrote {}", out.display());
        }
        Command::AnalyzeMatch { view, view_a, view_b, dataset_seed, tolerance } => {
            let out = required_out(cli)?;
            let ds = Dataset::load(&view.data)?;
            let enc = load_frozen(&view.encoder)?;
            let layer = layer_of(view, &enc);
            let m = match_views(&enc, &ds, *dataset_seed, view.object, (*view_a, *view_b), layer)?;
            let g = m.grid;
            let pred: Vec<_> = m.predicted.iter().map(|p| position_color(*p, g)).collect();
            let truth: Vec<_> = m.truth.iter().map(|p| position_color(*p, g)).collect();
            let own: Vec<_> = (0..g * g).map(|i| position_color(m.mask_b[i].then_some(i), g)).collect();
            let tiles = [
                view_tile(&ds, view.object, *view_a),
                view_tile(&ds, view.object, *view_b),
                patch_tile(&own, g, ds.width),
                patch_tile(&pred, g, ds.width),
                patch_tile(&truth, g, ds.width),
            ];
            write_strip(out, &tiles, ds.width * SCALE, ds.height * SCALE)?;
            match m.accuracy(*tolerance) {
                Some(acc) => println!("accuracy={acc:.4} tolerance={tolerance} layer={layer} wrote {}", out.display()),
                None => println!("accuracy=nan (no patch with a visible partner) wrote {}", out.display()),
            }
        }
        Command::BenchAblate { parallel } => {
            let mut grid = match &cli.config {
                Some(p) => GridConfig::parse(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
                None => GridConfig::default(),
            };
            if let Some(o) = &cli.out {
                grid.base.out_dir = o.clone();
            }
            if let Some(s) = cli.seed {
                grid.seeds = vec![s];
            }
            if let Some(p) = parallel {
                grid.parallel = *p;
            }
            let rep = bench_ablate(&grid)?;
            print!("{}", table_text(&rep.table));
            for (label, seed, e) in &rep.failures {
                eprintln!("warning: excluded {label} seed {seed}: {e}");
            }
        }
        Command::Report { runs } => {
            let out = required_out(cli)?;
            let rows = report(runs, out)?;
            print!("{}", table_text(&rows));
        }
        Command::Pipeline => {
            let rep = run_pipeline(&experiment_config(cli)?)?;
            println!("pipeline {} (ran: {}; skipped: {})", rep.out_dir.display(), rep.ran.join(","), rep.skipped.join(","));
        }
    }
    Ok(())
}

fn json_escape(s: &str) -> String {
    let mut o = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => o.push_str("\\\""),
            '\\' => o.push_str("\\\\"),
            '\n' => o.push_str("\\n"),
            c if (c as u32) < 0x20 => o.push_str(&format!("\\u{:04x}", c as u32)),
            c => o.push(c),
        }
    }
    o
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = match &e {
                Error::Stage { stage, .. } => format!(",\"stage\":\"{}\"", json_escape(stage)),
                _ => String::new(),
            };
            eprintln!("{{\"error\":\"{}\"{stage},\"message\":\"{}\"}}", e.kind(), json_escape(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
