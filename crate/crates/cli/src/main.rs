use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use stsgt_cli::commands::{self, CHECKPOINT};
use stsgt_cli::config::{preset_split, require_file, LevelKind, RunConfig, Source, Target};
use stsgt_core::data::{NormalizationMode, SplitName};
use stsgt_core::evaluation::format_metrics_table;
use stsgt_core::graph::EdgeWeight;

#[derive(Parser)]
#[command(
    name = "stsgt",
    version,
    about = "Spatial-temporal synchronous graph transformer for COVID-19 case forecasting"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command; flags override the config file.
#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Run directory (default: <output_root>/<config hash>-<timestamp>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    source: Option<Source>,
    #[arg(long, global = true)]
    jhu_confirmed: Option<PathBuf>,
    #[arg(long, global = true)]
    jhu_deaths: Option<PathBuf>,
    #[arg(long, global = true)]
    nyt_states: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    target: Option<Target>,
    #[arg(long, global = true, value_enum)]
    level: Option<LevelKind>,
    /// State whose counties form the vertex set (implies --level state).
    #[arg(long, global = true)]
    state: Option<String>,
    #[arg(long, global = true)]
    start: Option<NaiveDate>,
    #[arg(long, global = true)]
    end: Option<NaiveDate>,
    /// Keep negative daily values instead of clamping them to zero.
    #[arg(long, global = true)]
    no_clamp: bool,
    /// Normalize every split with the train statistics.
    #[arg(long, global = true)]
    train_stats: bool,
    /// Use the published date ranges for the chosen source.
    #[arg(long, global = true)]
    published_dates: bool,
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[arg(long, global = true)]
    weight: Option<EdgeWeight>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    max_epochs: Option<usize>,
    #[arg(long, global = true)]
    patience: Option<usize>,
    #[arg(long, global = true)]
    horizon: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Clean the raw cumulative file into a daily series and split manifest.
    Prepare,
    /// Build the thresholded distance adjacency.
    BuildGraph,
    /// Train and write the best checkpoint with its epoch report.
    Train {
        /// Start from the parameters of an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Add persistence and ARIMA(5,1,0) rows.
        #[arg(long)]
        baselines: bool,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: SplitName,
    },
    /// Forecast the H days following an anchor date.
    Forecast {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Last observed day of the input history.
        #[arg(long)]
        anchor: NaiveDate,
        /// Roll the anchor daily up to this date, keeping one-step forecasts.
        #[arg(long)]
        until: Option<NaiveDate>,
        /// Also write the observed values for the forecast dates.
        #[arg(long)]
        with_truth: bool,
    },
    /// Turn a forecast file into long-format rows for plotting.
    ExportPlot {
        #[arg(long)]
        forecast: PathBuf,
        /// Comma-separated vertex names; empty exports all.
        #[arg(long, value_delimiter = ',')]
        vertices: Vec<String>,
        /// Skip dates whose ground truth is zero.
        #[arg(long)]
        drop_zero_days: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> Result<SplitName, String> {
    match s {
        "train" => Ok(SplitName::Train),
        "val" => Ok(SplitName::Val),
        "test" => Ok(SplitName::Test),
        _ => Err(format!("unknown split '{s}' (expected train|val|test)")),
    }
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let d = &mut cfg.data;
        if let Some(v) = self.source {
            d.source = v;
        }
        if let Some(v) = &self.jhu_confirmed {
            d.jhu_confirmed = Some(v.clone());
        }
        if let Some(v) = &self.jhu_deaths {
            d.jhu_deaths = Some(v.clone());
        }
        if let Some(v) = &self.nyt_states {
            d.nyt_states = Some(v.clone());
        }
        if let Some(v) = self.target {
            d.target = v;
        }
        if let Some(v) = self.level {
            d.level = v;
        }
        if let Some(v) = &self.state {
            d.state = Some(v.clone());
            d.level = LevelKind::State;
        }
        if self.published_dates {
            let (start, end, spec) = preset_split(d.source);
            d.start = Some(start);
            d.end = Some(end);
            cfg.split = spec;
        }
        let d = &mut cfg.data;
        if let Some(v) = self.start {
            d.start = Some(v);
        }
        if let Some(v) = self.end {
            d.end = Some(v);
        }
        if self.no_clamp {
            d.clamp_negative = false;
        }
        if self.train_stats {
            d.normalization = NormalizationMode::TrainStats;
        }
        if let Some(v) = self.threshold {
            cfg.graph.threshold = v;
        }
        if let Some(v) = self.weight {
            cfg.graph.weight = v;
        }
        let t = &mut cfg.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            t.max_epochs = v;
        }
        if let Some(v) = self.patience {
            t.patience = v;
        }
        if let Some(v) = self.horizon {
            cfg.model.h = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.common.resolve()?;
    let out = cli.common.out.as_deref();
    match cli.command {
        Command::Prepare => {
            let dir = commands::resolve_run_dir(&cfg, out, true)?;
            let s = commands::cmd_prepare(&cfg, &dir)?;
            println!("{}", s.describe());
            println!("run directory: {}", dir.display());
        }
        Command::BuildGraph => {
            let dir = commands::resolve_run_dir(&cfg, out, false)?;
            let g = commands::cmd_build_graph(&cfg, &dir)?;
            println!(
                "vertices={} edges={} density={:.4} ({})",
                g.num_vertices(),
                g.edge_count(),
                g.density(),
                commands::level_label(&cfg)
            );
            println!("adjacency: {}", dir.join(commands::ADJACENCY).display());
        }
        Command::Train { resume } => {
            let dir = commands::resolve_run_dir(&cfg, out, false)?;
            let s = commands::cmd_train(&cfg, &dir, resume.as_deref())?;
            println!("epochs={} best epoch={} best val MAE={:.4}", s.epochs, s.best_epoch, s.best_val_mae);
            println!("checkpoint: {}", s.checkpoint.display());
        }
        Command::Evaluate { checkpoint, baselines, split } => {
            let dir = commands::resolve_run_dir(&cfg, out, false)?;
            let ck = checkpoint.unwrap_or_else(|| dir.join(CHECKPOINT));
            require_file(&ck)?;
            let reports = commands::cmd_evaluate(&cfg, &dir, &ck, split, baselines)?;
            print!("{}", format_metrics_table(&reports));
            println!("metrics: {}", dir.join(format!("metrics_{split}.csv")).display());
        }
        Command::Forecast { checkpoint, anchor, until, with_truth } => {
            let dir = commands::resolve_run_dir(&cfg, out, false)?;
            let ck = checkpoint.unwrap_or_else(|| dir.join(CHECKPOINT));
            require_file(&ck)?;
            let f = commands::cmd_forecast(&cfg, &dir, &ck, anchor, until, with_truth)?;
            println!("forecast: {} ({} rows)", f.path.display(), f.rows.len());
            if let Some(p) = f.truth_path {
                println!("truth: {}", p.display());
            }
        }
        Command::ExportPlot { forecast, vertices, drop_zero_days, output } => {
            require_file(&forecast)?;
            let dir = commands::resolve_run_dir(&cfg, out, false)?;
            let vertices: Vec<String> =
                vertices.into_iter().map(|v| v.trim().to_owned()).filter(|v| !v.is_empty()).collect();
            let path = output.unwrap_or_else(|| commands::plot_path(&dir, &forecast));
            let rows = commands::cmd_export_plot(&dir, &forecast, &vertices, drop_zero_days, &path)?;
            println!("plot data: {} ({rows} rows)", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
