//! Run configuration: one TOML file, overridable from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stsgt_core::data::{CountyColumns, Field, Level, NormalizationMode, SplitSpec, StateColumns};
use stsgt_core::graph::EdgeWeight;
use stsgt_core::model::StsgtConfig;
use stsgt_core::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// County-level wide time series (JHU CSSE layout).
    #[default]
    Jhu,
    /// State-level long file (NYT layout).
    Nyt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    #[default]
    Infected,
    Deaths,
}

impl Target {
    pub fn field(self) -> Field {
        match self {
            Target::Infected => Field::Cases,
            Target::Deaths => Field::Deaths,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Infected => "infected",
            Target::Deaths => "deaths",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LevelKind {
    #[default]
    National,
    State,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: Source,
    /// County-level cumulative confirmed cases.
    pub jhu_confirmed: Option<PathBuf>,
    /// County-level cumulative deaths.
    pub jhu_deaths: Option<PathBuf>,
    /// State-level cumulative cases and deaths.
    pub nyt_states: Option<PathBuf>,
    /// Optional `name,lat,lon` CSV; otherwise coordinates come from the
    /// county file's averaged county centroids.
    pub coordinates: Option<PathBuf>,
    pub target: Target,
    pub level: LevelKind,
    /// Required when `level = "state"`.
    pub state: Option<String>,
    pub start: Option<NaiveDate>,
    pub end: Option<NaiveDate>,
    pub clamp_negative: bool,
    pub normalization: NormalizationMode,
    pub county_columns: CountyColumns,
    pub state_columns: StateColumns,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: Source::Jhu,
            jhu_confirmed: None,
            jhu_deaths: None,
            nyt_states: None,
            coordinates: None,
            target: Target::Infected,
            level: LevelKind::National,
            state: None,
            start: None,
            end: None,
            clamp_negative: true,
            normalization: NormalizationMode::PerSplit,
            county_columns: CountyColumns::default(),
            state_columns: StateColumns::default(),
        }
    }
}

impl DataConfig {
    pub fn level(&self) -> Result<Level> {
        match self.level {
            LevelKind::National => Ok(Level::National),
            LevelKind::State => match &self.state {
                Some(s) if !s.trim().is_empty() => Ok(Level::State(s.trim().to_owned())),
                _ => bail!("config: data.state is required when data.level = \"state\""),
            },
        }
    }

    /// The county file holding the configured target.
    pub fn county_file(&self) -> Option<&Path> {
        match self.target {
            Target::Infected => self.jhu_confirmed.as_deref(),
            Target::Deaths => self.jhu_deaths.as_deref(),
        }
    }

    /// Label used in metrics files, e.g. `JHU` or `JHU/Michigan`.
    pub fn dataset_label(&self) -> String {
        let src = match self.source {
            Source::Jhu => "JHU",
            Source::Nyt => "NYT",
        };
        match (&self.level, &self.state) {
            (LevelKind::State, Some(s)) => format!("{src}/{s}"),
            _ => src.to_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Keep pairs whose max-normalized distance is at most this.
    pub threshold: f64,
    pub weight: EdgeWeight,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { threshold: 0.3, weight: EdgeWeight::Similarity }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Parent of the per-run directories.
    pub output_root: PathBuf,
    pub data: DataConfig,
    pub split: SplitSpec,
    pub graph: GraphConfig,
    pub model: StsgtConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_root: PathBuf::from("runs"),
            data: DataConfig::default(),
            split: SplitSpec::default(),
            graph: GraphConfig::default(),
            model: StsgtConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// The part of the configuration that determines prepared data and graph.
#[derive(Serialize)]
struct Identity<'a> {
    data: &'a DataConfig,
    split: &'a SplitSpec,
    graph: &'a GraphConfig,
    m: usize,
    h: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("config: cannot read {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("config: invalid {}", path.display()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Short hex digest of the data, split and graph settings plus the window
    /// lengths, so every command of one experiment lands in the same place.
    pub fn identity_hash(&self) -> String {
        let id =
            Identity { data: &self.data, split: &self.split, graph: &self.graph, m: self.model.m, h: self.model.h };
        let json = serde_json::to_vec(&id).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.level()?;
        if self.data.source == Source::Nyt && self.data.level != LevelKind::National {
            bail!("config: the state-level file has no counties; use data.level = \"national\" with source \"nyt\"");
        }
        if let (Some(s), Some(e)) = (self.data.start, self.data.end) {
            if e < s {
                bail!("config: data.end {e} precedes data.start {s}");
            }
        }
        if !(0.0..=1.0).contains(&self.graph.threshold) {
            bail!("config: graph.threshold must lie in [0, 1], got {}", self.graph.threshold);
        }
        self.train.validate()?;
        Ok(())
    }

    /// Raw input the configured source and target read from.
    pub fn series_file(&self) -> Result<&Path> {
        let p = match self.data.source {
            Source::Jhu => self.data.county_file(),
            Source::Nyt => self.data.nyt_states.as_deref(),
        };
        let Some(p) = p else {
            let key = match (self.data.source, self.data.target) {
                (Source::Jhu, Target::Infected) => "data.jhu_confirmed",
                (Source::Jhu, Target::Deaths) => "data.jhu_deaths",
                (Source::Nyt, _) => "data.nyt_states",
            };
            bail!("config: {key} is not set");
        };
        require_file(p)?;
        Ok(p)
    }
}

pub fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        bail!("input file not found: {}", p.display());
    }
    Ok(())
}

/// Preset date ranges for the two public datasets: 2020-03-15 (JHU) or
/// 2020-03-18 (NYT) through 2021-11-30, with validation from 2021-07-29 and
/// test from 2021-09-29.
pub fn preset_split(source: Source) -> (NaiveDate, NaiveDate, SplitSpec) {
    let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).expect("valid date");
    let start = match source {
        Source::Jhu => d(2020, 3, 15),
        Source::Nyt => d(2020, 3, 18),
    };
    let end = d(2021, 11, 30);
    let spec = SplitSpec::DateRanges {
        train: (start, d(2021, 7, 28)),
        val: (d(2021, 7, 29), d(2021, 9, 28)),
        test: (d(2021, 9, 29), end),
    };
    (start, end, spec)
}
