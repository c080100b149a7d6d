//! Synthetic inputs shaped like the two public repositories' files, plus
//! helpers for driving the binary.

#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stsgt_core::data::US_STATES;

#[rustfmt::skip]
pub const MICHIGAN_COUNTIES: [&str; 83] = [
    "Alcona", "Alger", "Allegan", "Alpena", "Antrim", "Arenac", "Baraga", "Barry", "Bay", "Benzie", "Berrien",
    "Branch", "Calhoun", "Cass", "Charlevoix", "Cheboygan", "Chippewa", "Clare", "Clinton", "Crawford", "Delta",
    "Dickinson", "Eaton", "Emmet", "Genesee", "Gladwin", "Gogebic", "Grand Traverse", "Gratiot", "Hillsdale",
    "Houghton", "Huron", "Ingham", "Ionia", "Iosco", "Iron", "Isabella", "Jackson", "Kalamazoo", "Kalkaska", "Kent",
    "Keweenaw", "Lake", "Lapeer", "Leelanau", "Lenawee", "Livingston", "Luce", "Mackinac", "Macomb", "Manistee",
    "Marquette", "Mason", "Mecosta", "Menominee", "Midland", "Missaukee", "Monroe", "Montcalm", "Montmorency",
    "Muskegon", "Newaygo", "Oakland", "Oceana", "Ogemaw", "Ontonagon", "Osceola", "Oscoda", "Otsego", "Ottawa",
    "Presque Isle", "Roscommon", "Saginaw", "St. Clair", "St. Joseph", "Sanilac", "Schoolcraft", "Shiawassee",
    "Tuscola", "Van Buren", "Washtenaw", "Wayne", "Wexford",
];

/// Rows the county loader must drop for Michigan.
pub const MICHIGAN_EXCLUDED: [&str; 4] =
    ["Unassigned", "Out of MI", "Michigan Department of Corrections (MDOC)", "Federal Correctional Institution (FCI)"];

pub const TERRITORIES: [&str; 5] =
    ["American Samoa", "Guam", "Northern Mariana Islands", "Puerto Rico", "Virgin Islands"];

pub fn d(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JhuKind {
    Confirmed,
    Deaths,
}

/// Layout knobs for the county-level fixture.
#[derive(Debug, Clone)]
pub struct JhuFixture {
    pub kind: JhuKind,
    pub first: NaiveDate,
    pub last: NaiveDate,
    /// Counties per state other than Michigan, which always gets its 83.
    pub counties_per_state: usize,
    pub seed: u64,
}

impl Default for JhuFixture {
    fn default() -> Self {
        Self { kind: JhuKind::Confirmed, first: d("2020-01-22"), last: d("2021-11-30"), counties_per_state: 3, seed: 1 }
    }
}

fn state_center(i: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    // scattered over a CONUS-like box, with two outliers playing Alaska and Hawaii
    match US_STATES[i] {
        "Alaska" => (64.0, -150.0),
        "Hawaii" => (20.5, -157.0),
        _ => (rng.random_range(26.0..48.0), rng.random_range(-122.0..-70.0)),
    }
}

/// Cumulative counts from a wavy daily series with occasional downward
/// corrections; zero before `onset`.
fn cumulative(days: usize, onset: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<i64> {
    let phase: f64 = rng.random_range(0.0..6.0);
    let mut total = 0i64;
    (0..days)
        .map(|t| {
            if t >= onset {
                let x = (t - onset) as f64;
                let wave = 1.2 + (x / 45.0 + phase).sin() + 0.4 * (x / 7.0).sin();
                let daily = (scale * wave * rng.random_range(0.7..1.3)).round() as i64;
                total += daily.max(0);
                if rng.random_bool(0.01) {
                    total -= (scale * 0.5) as i64;
                }
                total = total.max(0);
            }
            total
        })
        .collect()
}

impl JhuFixture {
    pub fn days(&self) -> usize {
        (self.last - self.first).num_days() as usize + 1
    }

    pub fn render(&self) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let days = self.days();
        let mut out = String::new();
        let mut header =
            "UID,iso2,iso3,code3,FIPS,Admin2,Province_State,Country_Region,Lat,Long_,Combined_Key".to_string();
        if self.kind == JhuKind::Deaths {
            header.push_str(",Population");
        }
        for t in 0..days {
            header.push(',');
            header.push_str(&(self.first + Days::new(t as u64)).format("%-m/%-d/%y").to_string());
        }
        out.push_str(&header);
        out.push('\n');
        let scale = if self.kind == JhuKind::Deaths { 2.0 } else { 80.0 };
        let mut uid = 84000000u64;
        let mut row = |out: &mut String, county: &str, state: &str, lat: f64, lon: f64, values: &[i64]| {
            uid += 1;
            let quoted = |s: &str| if s.contains(',') { format!("\"{s}\"") } else { s.to_owned() };
            let _ = write!(
                out,
                "{uid},US,USA,840,{},{},{},US,{lat:.8},{lon:.8},{}",
                uid % 100000,
                quoted(county),
                quoted(state),
                quoted(&format!("{county}, {state}, US"))
            );
            if self.kind == JhuKind::Deaths {
                out.push_str(",50000");
            }
            for v in values {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        };
        for (i, state) in US_STATES.iter().enumerate() {
            let (clat, clon) = state_center(i, &mut rng);
            let counties: Vec<String> = if *state == "Michigan" {
                MICHIGAN_COUNTIES.iter().map(|s| s.to_string()).collect()
            } else {
                (0..self.counties_per_state).map(|k| format!("County {k}")).collect()
            };
            for c in &counties {
                let lat = clat + rng.random_range(-1.5..1.5);
                let lon = clon + rng.random_range(-1.5..1.5);
                let onset = rng.random_range(30..50);
                let vals = cumulative(days, onset, scale * rng.random_range(0.3..2.0), &mut rng);
                row(&mut out, c, state, lat, lon, &vals);
            }
            let extra: Vec<&str> = if *state == "Michigan" { MICHIGAN_EXCLUDED.to_vec() } else { vec!["Unassigned"] };
            for c in extra {
                let vals = cumulative(days, 60, scale * 0.05, &mut rng);
                row(&mut out, c, state, 0.0, 0.0, &vals);
            }
        }
        for terr in TERRITORIES {
            let vals = cumulative(days, 50, scale * 0.2, &mut rng);
            row(&mut out, "", terr, 15.0, 145.0, &vals);
        }
        for ship in ["Diamond Princess", "Grand Princess"] {
            let vals = cumulative(days, 20, 0.1, &mut rng);
            row(&mut out, "", ship, 0.0, 0.0, &vals);
        }
        out
    }

    pub fn write(&self, dir: &Path) -> PathBuf {
        let name = match self.kind {
            JhuKind::Confirmed => "time_series_covid19_confirmed_US.csv",
            JhuKind::Deaths => "time_series_covid19_deaths_US.csv",
        };
        let path = dir.join(name);
        fs::write(&path, self.render()).unwrap();
        path
    }
}

/// State-level long file: rows start 2020-01-21, every state appears by
/// 2020-03-10 except West Virginia (2020-03-17); territories included.
pub fn nyt_fixture(last: NaiveDate, seed: u64) -> String {
    let first = d("2020-01-21");
    let days = (last - first).num_days() as usize + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<&str> = US_STATES.iter().copied().chain(TERRITORIES).collect();
    let series: Vec<(usize, Vec<i64>, Vec<i64>)> = names
        .iter()
        .map(|s| {
            let onset = match *s {
                "Washington" => 0,
                "West Virginia" => (d("2020-03-17") - first).num_days() as usize,
                _ => rng.random_range(10..49),
            };
            (onset, cumulative(days, onset, 70.0, &mut rng), cumulative(days, onset, 1.5, &mut rng))
        })
        .collect();
    let mut out = String::from("date,state,fips,cases,deaths\n");
    for t in 0..days {
        let date = first + Days::new(t as u64);
        for (i, name) in names.iter().enumerate() {
            let (onset, cases, deaths) = &series[i];
            if t >= *onset {
                let _ = writeln!(out, "{date},{name},{:02},{},{}", i + 1, cases[t].max(1), deaths[t]);
            }
        }
    }
    out
}

pub fn write_nyt(dir: &Path, last: NaiveDate, seed: u64) -> PathBuf {
    let p = dir.join("us-states.csv");
    fs::write(&p, nyt_fixture(last, seed)).unwrap();
    p
}

/// A small model that trains in seconds.
pub const TINY_MODEL: &str = "[model]\nm = 4\nh = 3\nc_in = 4\nnum_layers = 1\nblocks_per_layer = 1\nheads = 2\nd_qkv = 4\nmlp_hidden = 8\nc_out_hidden = 8\n";

pub fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p
}

pub fn stsgt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stsgt")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[track_caller]
pub fn ok(o: Output) -> Output {
    assert!(o.status.success(), "command failed\nstdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    o
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}
