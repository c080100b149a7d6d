use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use chrono::{Days, NaiveDate};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stsgt_core::data::{
    ingest_county_cumulative, ingest_state_cumulative, split_lengths, window_count, IngestOptions, Level, NormStats,
    NormalizationMode, SplitName, TimeSeries, WindowedDataset,
};
use stsgt_core::evaluation::{
    evaluate, format_metrics_table, write_metrics_csv, ArBaseline, Forecaster, MetricsReport, ModelForecaster,
    Persistence,
};
use stsgt_core::graph::{build_spatial_adjacency, SpatialGraph};
use stsgt_core::model::{read_checkpoint, write_checkpoint, Checkpoint, StsgtModel};
use stsgt_core::numerics::Tensor;
use stsgt_core::training::train;

use crate::config::{require_file, RunConfig, Source};

/// Lag order of the ARIMA(p,1,0) baseline.
pub const AR_ORDER: usize = 5;
pub const DAILY_SERIES: &str = "daily_series.csv";
pub const SPLIT_MANIFEST: &str = "split_manifest.csv";
pub const ADJACENCY: &str = "adjacency.csv";
pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_REPORT: &str = "train_report.csv";
pub const TRAIN_TIMING: &str = "train_timing.csv";
pub const RESOLVED_CONFIG: &str = "config.toml";

/// Where a command reads and writes.
///
/// An explicit directory wins. Otherwise runs live under
/// `output_root/<hash>-<timestamp>`: `prepare` opens a new one and the other
/// commands reuse the most recent directory with the same hash.
pub fn resolve_run_dir(cfg: &RunConfig, explicit: Option<&Path>, fresh: bool) -> Result<PathBuf> {
    let dir = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let hash = cfg.identity_hash();
            match latest_run(&cfg.output_root, &hash)? {
                Some(d) if !fresh => d,
                _ => {
                    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
                    cfg.output_root.join(format!("{hash}-{stamp}"))
                }
            }
        }
    };
    fs::create_dir_all(&dir).with_context(|| format!("cannot create run directory {}", dir.display()))?;
    Ok(dir)
}

fn latest_run(root: &Path, hash: &str) -> Result<Option<PathBuf>> {
    if !root.is_dir() {
        return Ok(None);
    }
    let prefix = format!("{hash}-");
    let mut found: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with(&prefix) && e.path().is_dir())
        .map(|e| e.path())
        .collect();
    found.sort();
    Ok(found.pop())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn open(path: &Path, hint: &str) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {} ({hint})", path.display()))?;
    Ok(BufReader::new(f))
}

fn write_resolved_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::write(dir.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
    Ok(())
}

fn ingest_options(cfg: &RunConfig) -> IngestOptions {
    IngestOptions { clamp_negative: cfg.data.clamp_negative, start: cfg.data.start, end: cfg.data.end, vertices: None }
}

/// Reads the configured raw file and returns the cleaned daily series.
pub fn load_daily_series(cfg: &RunConfig) -> Result<TimeSeries> {
    let path = cfg.series_file()?;
    let opts = ingest_options(cfg);
    let ts = match cfg.data.source {
        Source::Jhu => ingest_county_cumulative(path, &cfg.data.level()?, &cfg.data.county_columns, &opts)?.series,
        Source::Nyt => ingest_state_cumulative(path, cfg.data.target.field(), &cfg.data.state_columns, &opts)?,
    };
    Ok(ts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareSummary {
    pub days: usize,
    pub vertices: usize,
    pub first: NaiveDate,
    pub last: NaiveDate,
    /// `(split, first date, last date, days, windows)`
    pub splits: Vec<(SplitName, NaiveDate, NaiveDate, usize, usize)>,
}

impl PrepareSummary {
    pub fn describe(&self) -> String {
        let mut s = format!("T={} N={} ({} .. {})", self.days, self.vertices, self.first, self.last);
        for (name, a, b, days, windows) in &self.splits {
            s.push_str(&format!("\n  {name:<5} {a} .. {b}  days={days}  windows={windows}"));
        }
        s
    }
}

pub fn cmd_prepare(cfg: &RunConfig, dir: &Path) -> Result<PrepareSummary> {
    let ts = load_daily_series(cfg)?;
    let (m, h) = (cfg.model.m, cfg.model.h);
    let (a, b, c) = split_lengths(ts.len(), &cfg.split, ts.first_date())?;
    let mut splits = Vec::new();
    let mut start = 0;
    for (name, len) in [(SplitName::Train, a), (SplitName::Val, b), (SplitName::Test, c)] {
        if len == 0 {
            bail!("data: {name} split is empty for T={}", ts.len());
        }
        splits.push((name, ts.dates()[start], ts.dates()[start + len - 1], len, window_count(len, m, h)));
        start += len;
    }
    ts.write_csv(create(&dir.join(DAILY_SERIES))?)?;
    let mut w = csv::Writer::from_writer(create(&dir.join(SPLIT_MANIFEST))?);
    w.write_record(["split", "start", "end", "days", "windows"])?;
    for (name, a, b, days, windows) in &splits {
        w.write_record([name.to_string(), a.to_string(), b.to_string(), days.to_string(), windows.to_string()])?;
    }
    w.flush()?;
    write_resolved_config(cfg, dir)?;
    Ok(PrepareSummary {
        days: ts.len(),
        vertices: ts.num_vertices(),
        first: ts.first_date(),
        last: ts.last_date(),
        splits,
    })
}

fn read_coordinates_csv(path: &Path) -> Result<HashMap<String, (f64, f64)>> {
    let mut r = csv::Reader::from_reader(open(path, "coordinates file")?);
    let mut out = HashMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| anyhow!("data: {} line {}: expected name,lat,lon", path.display(), i + 2))
        };
        out.insert(rec[0].trim().to_owned(), (num(1)?, num(2)?));
    }
    Ok(out)
}

type Located = (Vec<String>, Vec<(f64, f64)>);

/// Vertex names and coordinates in the order of the prepared series when one
/// exists, else in source order.
fn vertex_coordinates(cfg: &RunConfig, dir: &Path) -> Result<Located> {
    let (names, coords): Located = if let Some(p) = &cfg.data.coordinates {
        require_file(p)?;
        let mut v: Vec<_> = read_coordinates_csv(p)?.into_iter().collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v.into_iter().unzip()
    } else {
        let path = cfg.data.county_file().or(cfg.data.jhu_confirmed.as_deref()).ok_or_else(|| {
            anyhow!("config: coordinates need data.coordinates or a county file (data.jhu_confirmed)")
        })?;
        require_file(path)?;
        let data = ingest_county_cumulative(path, &cfg.data.level()?, &cfg.data.county_columns, &ingest_options(cfg))?;
        let coords = data.require_coords()?;
        (data.series.vertex_names().to_vec(), coords)
    };
    let series_path = dir.join(DAILY_SERIES);
    if !series_path.is_file() {
        return Ok((names, coords));
    }
    let wanted = TimeSeries::read_csv(open(&series_path, "prepared series")?)?.vertex_names().to_vec();
    let lookup: HashMap<&str, (f64, f64)> = names.iter().map(String::as_str).zip(coords.iter().copied()).collect();
    let missing: Vec<&str> = wanted.iter().map(String::as_str).filter(|n| !lookup.contains_key(n)).collect();
    if !missing.is_empty() {
        bail!("graph: no coordinates for vertices: {}", missing.join(", "));
    }
    let coords = wanted.iter().map(|n| lookup[n.as_str()]).collect();
    Ok((wanted, coords))
}

pub fn cmd_build_graph(cfg: &RunConfig, dir: &Path) -> Result<SpatialGraph> {
    let (names, coords) = vertex_coordinates(cfg, dir)?;
    let g = build_spatial_adjacency(names, coords, cfg.graph.threshold, cfg.graph.weight)?;
    if g.edge_count() == 0 {
        warn!("graph: threshold {} leaves no edges; the model will see only temporal links", cfg.graph.threshold);
    }
    g.write_csv(create(&dir.join(ADJACENCY))?)?;
    write_resolved_config(cfg, dir)?;
    Ok(g)
}

/// Prepared series and graph of a run directory, with matching vertex order.
fn load_prepared(dir: &Path) -> Result<(TimeSeries, SpatialGraph)> {
    let ts = TimeSeries::read_csv(open(&dir.join(DAILY_SERIES), "run `stsgt prepare` first")?)?;
    let g = SpatialGraph::read_csv(open(&dir.join(ADJACENCY), "run `stsgt build-graph` first")?)?;
    if g.names() != ts.vertex_names() {
        bail!("graph: vertices of {} do not match {}; rebuild the graph", ADJACENCY, DAILY_SERIES);
    }
    Ok((ts, g))
}

fn model_config(cfg: &RunConfig, n: usize) -> Result<stsgt_core::model::StsgtConfig> {
    let mut mc = cfg.model.clone();
    if mc.n != n {
        info!("model: n set to {n} from the prepared series");
        mc.n = n;
    }
    mc.validate()?;
    Ok(mc)
}

fn dataset(cfg: &RunConfig, ts: &TimeSeries) -> Result<WindowedDataset> {
    Ok(WindowedDataset::build(ts, &cfg.split, cfg.model.m, cfg.model.h, cfg.data.normalization)?)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub epochs: usize,
}

pub fn cmd_train(cfg: &RunConfig, dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let (ts, graph) = load_prepared(dir)?;
    let mc = model_config(cfg, ts.num_vertices())?;
    let data = dataset(cfg, &ts)?;
    let mut model = match resume {
        Some(p) => {
            let ck = load_checkpoint(p, &mc)?;
            info!("train: resuming from {}", p.display());
            ck.model
        }
        None => StsgtModel::new(mc, graph, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?,
    };
    let report = train(&mut model, &data, &cfg.train, |e| {
        info!("epoch {:>3}  train MAE {:.4}  val MAE {:.4}  ({:.1}s)", e.epoch, e.train_mae, e.val_mae, e.seconds);
    })?;
    report.write_csv(create(&dir.join(TRAIN_REPORT))?)?;
    report.write_timing_csv(create(&dir.join(TRAIN_TIMING))?)?;
    let stats = [data.train.stats, data.val.stats, data.test.stats];
    let meta = BTreeMap::from([
        ("best_epoch".to_owned(), report.best_epoch.to_string()),
        ("best_val_mae".to_owned(), report.best_val_mae.to_string()),
        ("seed".to_owned(), cfg.train.seed.to_string()),
        ("dataset".to_owned(), cfg.data.dataset_label()),
        ("target".to_owned(), cfg.data.target.as_str().to_owned()),
        ("normalization".to_owned(), format!("{:?}", cfg.data.normalization)),
    ]);
    let path = dir.join(CHECKPOINT);
    let mut w = create(&path)?;
    write_checkpoint(&mut w, &model, &stats, &meta)?;
    w.flush()?;
    write_resolved_config(cfg, dir)?;
    Ok(TrainSummary {
        checkpoint: path,
        best_epoch: report.best_epoch,
        best_val_mae: report.best_val_mae,
        epochs: report.epochs.len(),
    })
}

/// Reads a checkpoint and checks its architecture against `expected`.
pub fn load_checkpoint(path: &Path, expected: &stsgt_core::model::StsgtConfig) -> Result<Checkpoint> {
    let ck =
        read_checkpoint(open(path, "checkpoint")?).with_context(|| format!("model: reading {}", path.display()))?;
    let diffs = ck.compatibility(expected);
    if !diffs.is_empty() {
        return Err(stsgt_core::Error::CheckpointMismatch(diffs))
            .with_context(|| format!("model: {} does not fit the config", path.display()));
    }
    Ok(ck)
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    dir: &Path,
    checkpoint: &Path,
    split: SplitName,
    baselines: bool,
) -> Result<Vec<MetricsReport>> {
    let ts = TimeSeries::read_csv(open(&dir.join(DAILY_SERIES), "run `stsgt prepare` first")?)?;
    let mc = model_config(cfg, ts.num_vertices())?;
    let ck = load_checkpoint(checkpoint, &mc)?;
    if ck.model.graph().names() != ts.vertex_names() {
        bail!("model: checkpoint vertices differ from the prepared series");
    }
    let data = dataset(cfg, &ts)?;
    let part = data.get(split);
    let h = mc.h;
    let model = ModelForecaster {
        model: &ck.model,
        stats: part.stats,
        batch_size: cfg.train.batch_size,
        label: "STSGT".into(),
    };
    let mut forecasters: Vec<Box<dyn Forecaster + '_>> = vec![Box::new(model)];
    if baselines {
        forecasters.push(Box::new(Persistence { h }));
        // the AR recursion reads its lags from the model's input window
        let p = AR_ORDER.min(mc.m.saturating_sub(1));
        if p < AR_ORDER {
            log::warn!("input window of {} days allows AR order {p} instead of {AR_ORDER}", mc.m);
        }
        forecasters.push(Box::new(ArBaseline::fit(&data.train.series, p, h)?));
    }
    let mut reports = Vec::new();
    for f in &forecasters {
        let mut r = evaluate(f.as_ref(), &part.windows, h)?;
        r.dataset = cfg.data.dataset_label();
        r.target = cfg.data.target.as_str().to_owned();
        r.split = split.to_string();
        reports.push(r);
    }
    write_metrics_csv(create(&dir.join(format!("metrics_{split}.csv")))?, &reports)?;
    fs::write(dir.join(format!("metrics_{split}.txt")), format_metrics_table(&reports))?;
    Ok(reports)
}

/// Normalization statistics for inputs ending on `anchor`: the train
/// statistics, or under per-split normalization those of the split holding
/// the anchor.
fn anchor_stats(cfg: &RunConfig, ts: &TimeSeries, ck: &Checkpoint, anchor_pos: usize) -> Result<NormStats> {
    if ck.norm_stats.len() != 3 {
        bail!("model: checkpoint carries {} normalization records, expected 3", ck.norm_stats.len());
    }
    if cfg.data.normalization == NormalizationMode::TrainStats {
        return Ok(ck.norm_stats[0]);
    }
    let (a, b, _) = split_lengths(ts.len(), &cfg.split, ts.first_date())?;
    Ok(if anchor_pos < a {
        ck.norm_stats[0]
    } else if anchor_pos < a + b {
        ck.norm_stats[1]
    } else {
        ck.norm_stats[2]
    })
}

/// Rows of a forecast table: `(date, value per vertex)`.
pub type ForecastRows = Vec<(NaiveDate, Vec<f64>)>;

fn forecast_at(cfg: &RunConfig, ts: &TimeSeries, ck: &Checkpoint, anchor: NaiveDate) -> Result<ForecastRows> {
    let mc = ck.model.config();
    let (m, h, n) = (mc.m, mc.h, mc.n);
    let pos = ts
        .position(anchor)
        .ok_or_else(|| anyhow!("data: anchor {anchor} outside the series {} .. {}", ts.first_date(), ts.last_date()))?;
    if pos + 1 < m {
        return Err(stsgt_core::Error::InsufficientData {
            what: format!("history days before {anchor}"),
            have: pos + 1,
            need: m,
        }
        .into());
    }
    let stats = anchor_stats(cfg, ts, ck, pos)?;
    let hist: Vec<f64> = ts.values()[(pos + 1 - m) * n..(pos + 1) * n].iter().map(|&v| stats.normalize(v)).collect();
    let y = ck.model.predict(&Tensor::new(&[1, m, n, 1], hist)?)?;
    Ok((0..h)
        .map(|s| {
            let row = y.data()[s * n..(s + 1) * n].iter().map(|&z| stats.denormalize(z)).collect();
            (anchor + Days::new(s as u64 + 1), row)
        })
        .collect())
}

fn write_table(path: &Path, names: &[String], rows: &ForecastRows) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["date".to_owned()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (d, vals) in rows {
        let mut rec = vec![d.to_string()];
        rec.extend(vals.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ForecastOutput {
    pub path: PathBuf,
    pub truth_path: Option<PathBuf>,
    pub rows: ForecastRows,
}

/// Forecasts the `H` days after `anchor`. With `until`, instead rolls the
/// anchor day by day to `until` and keeps each one-step-ahead forecast.
pub fn cmd_forecast(
    cfg: &RunConfig,
    dir: &Path,
    checkpoint: &Path,
    anchor: NaiveDate,
    until: Option<NaiveDate>,
    with_truth: bool,
) -> Result<ForecastOutput> {
    let ts = TimeSeries::read_csv(open(&dir.join(DAILY_SERIES), "run `stsgt prepare` first")?)?;
    let mc = model_config(cfg, ts.num_vertices())?;
    let ck = load_checkpoint(checkpoint, &mc)?;
    let names = ck.model.graph().names().to_vec();
    if names != ts.vertex_names() {
        bail!("model: checkpoint vertices differ from the prepared series");
    }
    let (rows, stem) = match until {
        None => (forecast_at(cfg, &ts, &ck, anchor)?, format!("forecast_{anchor}")),
        Some(end) => {
            if end < anchor {
                bail!("forecast: --until {end} precedes --anchor {anchor}");
            }
            let rows = anchor
                .iter_days()
                .take_while(|d| *d <= end)
                .map(|d| forecast_at(cfg, &ts, &ck, d).map(|mut r| r.swap_remove(0)))
                .collect::<Result<Vec<_>>>()?;
            (rows, format!("forecast_{anchor}_{end}"))
        }
    };
    let path = dir.join(format!("{stem}.csv"));
    write_table(&path, &names, &rows)?;
    let mut truth_path = None;
    if with_truth {
        let truth: ForecastRows =
            rows.iter().filter_map(|(d, _)| ts.position(*d).map(|p| (*d, ts.day(p).to_vec()))).collect();
        if truth.len() < rows.len() {
            warn!("forecast: {} of {} forecast dates have no ground truth", rows.len() - truth.len(), rows.len());
        }
        let p = dir.join(format!("{stem}_truth.csv"));
        write_table(&p, &names, &truth)?;
        truth_path = Some(p);
    }
    Ok(ForecastOutput { path, truth_path, rows })
}

fn read_table(path: &Path) -> Result<(Vec<String>, ForecastRows)> {
    let ts =
        TimeSeries::read_csv(open(path, "forecast file")?).with_context(|| format!("reading {}", path.display()))?;
    let rows = (0..ts.len()).map(|t| (ts.dates()[t], ts.day(t).to_vec())).collect();
    Ok((ts.vertex_names().to_vec(), rows))
}

/// Long-format `date,vertex,series,value` rows pairing forecasts with the
/// prepared ground truth.
pub fn cmd_export_plot(
    dir: &Path,
    forecast: &Path,
    vertices: &[String],
    drop_zero_days: bool,
    out: &Path,
) -> Result<usize> {
    let (names, rows) = read_table(forecast)?;
    let ts = TimeSeries::read_csv(open(&dir.join(DAILY_SERIES), "run `stsgt prepare` first")?)?;
    let selected: Vec<usize> = if vertices.is_empty() {
        (0..names.len()).collect()
    } else {
        vertices
            .iter()
            .map(|v| {
                names
                    .iter()
                    .position(|n| n == v)
                    .ok_or_else(|| anyhow!("export-plot: unknown vertex '{v}'; valid names: {}", names.join(", ")))
            })
            .collect::<Result<_>>()?
    };
    let series_col: HashMap<&str, usize> = ts.vertex_names().iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut w = csv::Writer::from_writer(create(out)?);
    w.write_record(["date", "vertex", "series", "value"])?;
    let mut count = 0;
    for &v in &selected {
        let col = series_col.get(names[v].as_str()).copied();
        for (date, vals) in &rows {
            let truth = col.zip(ts.position(*date)).map(|(c, p)| ts.day(p)[c]);
            if drop_zero_days && truth == Some(0.0) {
                continue;
            }
            let d = date.to_string();
            if let Some(t) = truth {
                w.write_record([d.as_str(), &names[v], "truth", &t.to_string()])?;
                count += 1;
            }
            w.write_record([d.as_str(), &names[v], "forecast", &vals[v].to_string()])?;
            count += 1;
        }
    }
    w.flush()?;
    Ok(count)
}

/// Default plot file next to the forecast it was built from.
pub fn plot_path(dir: &Path, forecast: &Path) -> PathBuf {
    let stem = forecast.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "forecast".into());
    dir.join(format!("plot_{stem}.csv"))
}

/// Level of the configured vertex set, for messages.
pub fn level_label(cfg: &RunConfig) -> String {
    match cfg.data.level() {
        Ok(Level::State(s)) => format!("state {s}"),
        _ => "national".into(),
    }
}
