//! Loaders for the two public cumulative-count layouts: the county-level wide
//! time series (one row per county, one column per `M/D/YY` date) and the
//! state-level long file (`date,state,fips,cases,deaths`).

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::series::TimeSeries;
use crate::error::{Error, Result};

/// The 50 states plus the District of Columbia.
pub const US_STATES: [&str; 51] = [
    "Alabama",
    "Alaska",
    "Arizona",
    "Arkansas",
    "California",
    "Colorado",
    "Connecticut",
    "Delaware",
    "District of Columbia",
    "Florida",
    "Georgia",
    "Hawaii",
    "Idaho",
    "Illinois",
    "Indiana",
    "Iowa",
    "Kansas",
    "Kentucky",
    "Louisiana",
    "Maine",
    "Maryland",
    "Massachusetts",
    "Michigan",
    "Minnesota",
    "Mississippi",
    "Missouri",
    "Montana",
    "Nebraska",
    "Nevada",
    "New Hampshire",
    "New Jersey",
    "New Mexico",
    "New York",
    "North Carolina",
    "North Dakota",
    "Ohio",
    "Oklahoma",
    "Oregon",
    "Pennsylvania",
    "Rhode Island",
    "South Carolina",
    "South Dakota",
    "Tennessee",
    "Texas",
    "Utah",
    "Vermont",
    "Virginia",
    "Washington",
    "West Virginia",
    "Wisconsin",
    "Wyoming",
];

/// Aggregation level of the vertex set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "state")]
pub enum Level {
    /// One vertex per state (50 states + DC), counties summed.
    National,
    /// One vertex per county of the named state.
    State(String),
}

/// Column names of the county-level wide file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CountyColumns {
    pub county: String,
    pub state: String,
    pub lat: String,
    pub lon: String,
}

impl Default for CountyColumns {
    fn default() -> Self {
        Self { county: "Admin2".into(), state: "Province_State".into(), lat: "Lat".into(), lon: "Long_".into() }
    }
}

/// Column names of the state-level long file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StateColumns {
    pub date: String,
    pub state: String,
    pub cases: String,
    pub deaths: String,
}

impl Default for StateColumns {
    fn default() -> Self {
        Self { date: "date".into(), state: "state".into(), cases: "cases".into(), deaths: "deaths".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    #[default]
    Cases,
    Deaths,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    /// Clamp negative daily values (reporting corrections) to zero.
    pub clamp_negative: bool,
    /// First retained day; `None` keeps the file's first day (county file) or
    /// the first day on which every retained vertex reports (state file).
    pub start: Option<NaiveDate>,
    pub end: Option<NaiveDate>,
    /// Overrides the retained vertex set at national level.
    pub vertices: Option<Vec<String>>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { clamp_negative: true, start: None, end: None, vertices: None }
    }
}

/// Daily series plus per-vertex coordinates derived from county rows.
#[derive(Debug, Clone)]
pub struct CountyData {
    pub series: TimeSeries,
    /// `(lat, lon)` per vertex; `None` when no row carried usable coordinates.
    pub coords: Vec<Option<(f64, f64)>>,
}

impl CountyData {
    pub fn require_coords(&self) -> Result<Vec<(f64, f64)>> {
        let missing: Vec<String> = self
            .coords
            .iter()
            .zip(self.series.vertex_names())
            .filter(|(c, _)| c.is_none())
            .map(|(_, n)| n.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::invalid(format!("no coordinates for vertices: {}", missing.join(", "))));
        }
        Ok(self.coords.iter().map(|c| c.expect("checked")).collect())
    }
}

/// Rows that are not real counties: unassigned cases, out-of-state buckets and
/// correctional facilities.
pub fn is_excluded_county(name: &str) -> bool {
    let lower = name.trim().to_ascii_lowercase();
    lower.is_empty() || lower == "unassigned" || lower.starts_with("out of") || lower.contains("correction")
}

fn parse_header_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%m/%d/%y").ok()
}

/// First differences along time; day 0 keeps its cumulative value.
pub fn cumulative_to_daily(cumulative: &[f64], clamp_negative: bool) -> Vec<f64> {
    let mut prev = 0.0;
    cumulative
        .iter()
        .map(|&c| {
            let d = c - prev;
            prev = c;
            if clamp_negative {
                d.max(0.0)
            } else {
                d
            }
        })
        .collect()
}

fn retained_states(opts: &IngestOptions) -> Vec<String> {
    opts.vertices.clone().unwrap_or_else(|| US_STATES.iter().map(|s| s.to_string()).collect())
}

/// Converts per-vertex cumulative columns (`T×N`, row-major) into the daily
/// series and applies the date window.
fn finish(
    dates: Vec<NaiveDate>,
    names: Vec<String>,
    cumulative: &[f64],
    opts: &IngestOptions,
    start: Option<NaiveDate>,
) -> Result<TimeSeries> {
    let (t, n) = (dates.len(), names.len());
    let mut daily = vec![0.0; t * n];
    for p in 0..n {
        let col: Vec<f64> = (0..t).map(|i| cumulative[i * n + p]).collect();
        for (i, v) in cumulative_to_daily(&col, opts.clamp_negative).into_iter().enumerate() {
            daily[i * n + p] = v;
        }
    }
    let full = TimeSeries::new(dates, names, daily)?;
    let start = start.unwrap_or(full.first_date());
    let end = opts.end.unwrap_or(full.last_date());
    full.slice_dates(start, end)
}

/// Per-vertex cumulative sums per date, coordinate sums and coordinate count.
type Accum = (Vec<f64>, (f64, f64), usize);

/// Loads the county-level wide cumulative file.
pub fn ingest_county_cumulative(
    path: &Path,
    level: &Level,
    columns: &CountyColumns,
    opts: &IngestOptions,
) -> Result<CountyData> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(file);
    let header = reader.headers()?.clone();
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Schema {
            path: path.to_path_buf(),
            detail: format!("missing required column '{name}'"),
        })
    };
    let (ci, si, lai, loi) = (col(&columns.county)?, col(&columns.state)?, col(&columns.lat)?, col(&columns.lon)?);
    let date_cols: Vec<(usize, NaiveDate)> =
        header.iter().enumerate().filter_map(|(i, h)| parse_header_date(h).map(|d| (i, d))).collect();
    if date_cols.is_empty() {
        return Err(Error::Schema { path: path.to_path_buf(), detail: "no M/D/YY date columns".into() });
    }
    if let Some(w) = date_cols.windows(2).find(|w| w[1].1 != w[0].1 + chrono::Days::new(1)) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            line: Some(1),
            detail: format!("date columns not consecutive days: {} then {}", w[0].1, w[1].1),
        });
    }
    let dates: Vec<NaiveDate> = date_cols.iter().map(|&(_, d)| d).collect();
    let t = dates.len();

    let states = retained_states(opts);
    // vertex name -> (cumulative sums per date, coordinate sums, coordinate count)
    let mut order: Vec<String> = Vec::new();
    let mut acc: HashMap<String, Accum> = HashMap::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = row as u64 + 2;
        let state = rec[si].trim();
        let county = rec[ci].trim();
        let key = match level {
            Level::National if states.iter().any(|s| s == state) => state.to_owned(),
            Level::State(name) if name == state => county.to_owned(),
            _ => continue,
        };
        if is_excluded_county(county) {
            continue;
        }
        let entry = acc.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            (vec![0.0; t], (0.0, 0.0), 0)
        });
        for (slot, &(ci, _)) in entry.0.iter_mut().zip(&date_cols) {
            let field = rec[ci].trim();
            let v: f64 = if field.is_empty() {
                0.0
            } else {
                field.parse().map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    line: Some(line),
                    detail: format!("bad count '{field}': {e}"),
                })?
            };
            *slot += v;
        }
        let lat: Option<f64> = rec[lai].trim().parse().ok();
        let lon: Option<f64> = rec[loi].trim().parse().ok();
        if let (Some(lat), Some(lon)) = (lat, lon) {
            if lat != 0.0 && lon != 0.0 && lat.is_finite() && lon.is_finite() {
                entry.1 .0 += lat;
                entry.1 .1 += lon;
                entry.2 += 1;
            }
        }
    }

    let names: Vec<String> = match level {
        Level::National => {
            let missing: Vec<String> = states.iter().filter(|s| !acc.contains_key(*s)).cloned().collect();
            if !missing.is_empty() {
                return Err(Error::Coverage { missing });
            }
            states
        }
        Level::State(name) => {
            if order.is_empty() {
                return Err(Error::Coverage { missing: vec![name.clone()] });
            }
            order
        }
    };
    let n = names.len();
    let mut cumulative = vec![0.0; t * n];
    let mut coords = Vec::with_capacity(n);
    for (p, name) in names.iter().enumerate() {
        let (series, (lat, lon), count) = &acc[name];
        for i in 0..t {
            cumulative[i * n + p] = series[i];
        }
        coords.push((*count > 0).then(|| (lat / *count as f64, lon / *count as f64)));
    }
    let series = finish(dates, names, &cumulative, opts, opts.start)?;
    Ok(CountyData { series, coords })
}

/// Loads the state-level long cumulative file and pivots it to `T×N`.
pub fn ingest_state_cumulative(
    path: &Path,
    field: Field,
    columns: &StateColumns,
    opts: &IngestOptions,
) -> Result<TimeSeries> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header = reader.headers()?.clone();
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Schema {
            path: path.to_path_buf(),
            detail: format!("missing required column '{name}'"),
        })
    };
    let value_col = match field {
        Field::Cases => &columns.cases,
        Field::Deaths => &columns.deaths,
    };
    let (di, si, vi) = (col(&columns.date)?, col(&columns.state)?, col(value_col)?);

    let states = retained_states(opts);
    let mut by_state: HashMap<String, BTreeMap<NaiveDate, f64>> = HashMap::new();
    let mut all_dates: BTreeMap<NaiveDate, ()> = BTreeMap::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = row as u64 + 2;
        let bad = |detail: String| Error::Format { path: path.to_path_buf(), line: Some(line), detail };
        let date = NaiveDate::parse_from_str(rec[di].trim(), "%Y-%m-%d")
            .map_err(|e| bad(format!("bad date '{}': {e}", &rec[di])))?;
        all_dates.insert(date, ());
        let state = rec[si].trim();
        if !states.iter().any(|s| s == state) {
            continue;
        }
        let raw = rec[vi].trim();
        let v: f64 =
            if raw.is_empty() { 0.0 } else { raw.parse().map_err(|e| bad(format!("bad count '{raw}': {e}")))? };
        if by_state.entry(state.to_owned()).or_default().insert(date, v).is_some() {
            return Err(bad(format!("duplicate row for {state} on {date}")));
        }
    }
    let dates: Vec<NaiveDate> = all_dates.into_keys().collect();
    if dates.is_empty() {
        return Err(Error::Format { path: path.to_path_buf(), line: None, detail: "no data rows".into() });
    }
    if let Some(w) = dates.windows(2).find(|w| w[1] != w[0] + chrono::Days::new(1)) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            line: None,
            detail: format!("dates not contiguous: {} then {}", w[0], w[1]),
        });
    }
    let end = opts.end.unwrap_or(dates[dates.len() - 1]);
    let start = match opts.start {
        Some(s) => s,
        None => {
            let first_seen = states.iter().filter_map(|s| by_state.get(s).and_then(|m| m.keys().next().copied())).max();
            first_seen.unwrap_or(dates[0])
        }
    };
    let missing: Vec<String> = states
        .iter()
        .filter(|s| {
            by_state
                .get(*s)
                .is_none_or(|m| dates.iter().filter(|d| **d >= start && **d <= end).any(|d| !m.contains_key(d)))
        })
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Coverage { missing });
    }
    let (t, n) = (dates.len(), states.len());
    let mut cumulative = vec![0.0; t * n];
    for (p, s) in states.iter().enumerate() {
        let m = &by_state[s];
        for (i, d) in dates.iter().enumerate() {
            cumulative[i * n + p] = m.get(d).copied().unwrap_or(0.0);
        }
    }
    finish(dates, states, &cumulative, opts, Some(start))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn differencing_examples() {
        assert_eq!(cumulative_to_daily(&[0.0, 3.0, 3.0, 10.0], true), vec![0.0, 3.0, 0.0, 7.0]);
        assert_eq!(cumulative_to_daily(&[5.0, 4.0], true), vec![5.0, 0.0]);
        assert_eq!(cumulative_to_daily(&[5.0, 4.0], false), vec![5.0, -1.0]);
    }

    #[test]
    fn county_file_national_sums_counties() {
        let csv = "UID,Admin2,Province_State,Lat,Long_,1/1/21,1/2/21\n\
                   1,Alpha,Ohio,40.0,-82.0,1,3\n\
                   2,Beta,Ohio,41.0,-83.0,3,7\n\
                   3,Unassigned,Ohio,0,0,100,200\n\
                   4,Gamma,Guam,13.4,144.8,9,9\n\
                   5,Delta,Texas,31.0,-99.0,2,2\n";
        let f = write(csv);
        let opts = IngestOptions { vertices: Some(vec!["Ohio".into(), "Texas".into()]), ..Default::default() };
        let data = ingest_county_cumulative(f.path(), &Level::National, &CountyColumns::default(), &opts).unwrap();
        assert_eq!(data.series.vertex_names(), &["Ohio".to_string(), "Texas".to_string()]);
        // Ohio dailies [1,2] + [3,4] = [4,6]
        assert_eq!(data.series.vertex(0), vec![4.0, 6.0]);
        assert_eq!(data.series.vertex(1), vec![2.0, 0.0]);
        assert_eq!(data.coords[0], Some((40.5, -82.5)));
    }

    #[test]
    fn county_file_state_level_and_errors() {
        let csv = "Admin2,Province_State,Lat,Long_,3/1/20,3/2/20,3/3/20\n\
                   Wayne,Michigan,42.28,-83.28,1,2,5\n\
                   Out of MI,Michigan,0,0,1,1,1\n\
                   Michigan Department of Corrections (MDOC),Michigan,0,0,4,4,4\n\
                   Oakland,Michigan,42.66,-83.38,0,0,1\n";
        let f = write(csv);
        let opts = IngestOptions { start: Some(d("2020-03-02")), ..Default::default() };
        let data =
            ingest_county_cumulative(f.path(), &Level::State("Michigan".into()), &CountyColumns::default(), &opts)
                .unwrap();
        assert_eq!(data.series.vertex_names(), &["Wayne".to_string(), "Oakland".to_string()]);
        assert_eq!(data.series.len(), 2);
        assert_eq!(data.series.vertex(0), vec![1.0, 3.0]);

        let missing_col = write("Admin2,State,Lat,Long_,3/1/20\nA,Michigan,1,1,1\n");
        let err = ingest_county_cumulative(missing_col.path(), &Level::National, &CountyColumns::default(), &opts);
        assert!(matches!(err, Err(Error::Schema { .. })));

        let gap = write("Admin2,Province_State,Lat,Long_,3/1/20,3/3/20\nA,Michigan,1,1,1,2\n");
        let err = ingest_county_cumulative(gap.path(), &Level::National, &CountyColumns::default(), &opts);
        assert!(matches!(err, Err(Error::Format { .. })));
    }

    #[test]
    fn state_file_pivot_and_coverage() {
        let csv = "date,state,fips,cases,deaths\n\
                   2020-03-01,A,01,2,0\n\
                   2020-03-02,A,01,5,1\n\
                   2020-03-02,B,02,1,0\n";
        let f = write(csv);
        let only_a = IngestOptions { vertices: Some(vec!["A".into()]), ..Default::default() };
        let ts = ingest_state_cumulative(f.path(), Field::Cases, &StateColumns::default(), &only_a).unwrap();
        assert_eq!(ts.vertex(0), vec![2.0, 3.0]);

        // B only appears on day 2: automatic start picks day 2.
        let both = IngestOptions { vertices: Some(vec!["A".into(), "B".into()]), ..Default::default() };
        let ts = ingest_state_cumulative(f.path(), Field::Deaths, &StateColumns::default(), &both).unwrap();
        assert_eq!(ts.first_date(), d("2020-03-02"));
        assert_eq!(ts.values(), &[1.0, 0.0]);

        let strict = IngestOptions { start: Some(d("2020-03-01")), ..both };
        match ingest_state_cumulative(f.path(), Field::Cases, &StateColumns::default(), &strict) {
            Err(Error::Coverage { missing }) => assert_eq!(missing, vec!["B".to_string()]),
            other => panic!("expected coverage error, got {other:?}"),
        }
    }

    #[test]
    fn cumulative_reconstruction_without_clamping() {
        let csv = "Admin2,Province_State,Lat,Long_,1/1/21,1/2/21,1/3/21,1/4/21\n\
                   A,Ohio,40,-82,3,2,10,9\n";
        let f = write(csv);
        let opts = IngestOptions { clamp_negative: false, vertices: Some(vec!["Ohio".into()]), ..Default::default() };
        let data = ingest_county_cumulative(f.path(), &Level::National, &CountyColumns::default(), &opts).unwrap();
        let mut run = 0.0;
        let rebuilt: Vec<f64> = data
            .series
            .vertex(0)
            .iter()
            .map(|d| {
                run += d;
                run
            })
            .collect();
        assert_eq!(rebuilt, vec![3.0, 2.0, 10.0, 9.0]);
    }

    #[test]
    fn excluded_rows() {
        for name in [
            "Unassigned",
            "Out of MI",
            "Federal Correctional Institution (FCI)",
            "Michigan Department of Corrections (MDOC)",
            "",
        ] {
            assert!(is_excluded_county(name), "{name}");
        }
        assert!(!is_excluded_county("Wayne"));
    }
}
