//! End to end through the public API: county file to metrics.

use std::fmt::Write as _;

use chrono::{Days, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stsgt_core::data::{
    ingest_county_cumulative, CountyColumns, IngestOptions, Level, NormalizationMode, SplitSpec, WindowedDataset,
};
use stsgt_core::evaluation::{evaluate, ArBaseline, Forecaster, ModelForecaster, Persistence};
use stsgt_core::graph::{build_spatial_adjacency, EdgeWeight};
use stsgt_core::model::{read_checkpoint, write_checkpoint, StsgtConfig, StsgtModel};
use stsgt_core::training::{train, TrainConfig};

const DAYS: usize = 90;

/// Five counties of one state plus an unassigned row and a neighbour state.
fn county_file() -> String {
    let first = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
    let mut s = String::from("UID,iso2,iso3,code3,FIPS,Admin2,Province_State,Country_Region,Lat,Long_,Combined_Key");
    for t in 0..DAYS {
        write!(s, ",{}", (first + Days::new(t as u64)).format("%-m/%-d/%y")).unwrap();
    }
    s.push('\n');
    let rows = [
        ("Adams", "Ohio", 39.0, -83.5, 20.0),
        ("Allen", "Ohio", 40.8, -84.1, 45.0),
        ("Butler", "Ohio", 39.4, -84.6, 80.0),
        ("Clark", "Ohio", 39.9, -83.8, 35.0),
        ("Erie", "Ohio", 41.4, -82.6, 25.0),
        ("Unassigned", "Ohio", 0.0, 0.0, 3.0),
        ("Lake", "Indiana", 41.5, -87.4, 60.0),
    ];
    for (i, (county, state, lat, lon, scale)) in rows.iter().enumerate() {
        write!(s, "{i},US,USA,840,{i},{county},{state},US,{lat},{lon},\"{county}, {state}, US\"").unwrap();
        let mut total = 0.0;
        for t in 0..DAYS {
            total += (scale * (1.3 + (t as f64 / 8.0 + i as f64).sin())).round();
            write!(s, ",{total}").unwrap();
        }
        s.push('\n');
    }
    s
}

#[test]
fn county_file_to_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("confirmed.csv");
    std::fs::write(&path, county_file()).unwrap();

    let data = ingest_county_cumulative(
        &path,
        &Level::State("Ohio".into()),
        &CountyColumns::default(),
        &IngestOptions::default(),
    )
    .unwrap();
    assert_eq!(data.series.vertex_names(), ["Adams", "Allen", "Butler", "Clark", "Erie"]);
    assert_eq!(data.series.len(), DAYS);
    assert!(data.series.values().iter().all(|v| *v >= 0.0));

    let names = data.series.vertex_names().to_vec();
    let graph = build_spatial_adjacency(names, data.require_coords().unwrap(), 0.6, EdgeWeight::Similarity).unwrap();
    assert!(graph.edge_count() > 0);

    let cfg = StsgtConfig {
        m: 4,
        h: 3,
        n: 5,
        c_in: 4,
        num_layers: 1,
        blocks_per_layer: 1,
        heads: 2,
        d_qkv: 4,
        mlp_hidden: 8,
        c_out_hidden: 8,
        ..Default::default()
    };
    let spec = SplitSpec::default();
    let ds = WindowedDataset::build(&data.series, &spec, cfg.m, cfg.h, NormalizationMode::PerSplit).unwrap();
    let mut model = StsgtModel::new(cfg.clone(), graph, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let tc = TrainConfig { max_epochs: 4, seed: 5, ..Default::default() };
    let mut seen = 0;
    let report = train(&mut model, &ds, &tc, |_| seen += 1).unwrap();
    assert_eq!(seen, report.epochs.len());
    assert!(report.epochs.iter().all(|e| report.best_val_mae <= e.val_mae));

    let mut buf = Vec::new();
    let stats = [ds.train.stats, ds.val.stats, ds.test.stats];
    write_checkpoint(&mut buf, &model, &stats, &Default::default()).unwrap();
    let back = read_checkpoint(&buf[..]).unwrap();
    assert_eq!(back.norm_stats, stats);

    let forecasters: Vec<Box<dyn Forecaster + '_>> = vec![
        Box::new(ModelForecaster { model: &model, stats: ds.test.stats, batch_size: 4, label: "fresh".into() }),
        Box::new(ModelForecaster { model: &back.model, stats: ds.test.stats, batch_size: 7, label: "loaded".into() }),
        Box::new(Persistence { h: cfg.h }),
        Box::new(ArBaseline::fit(&ds.train.series, 3, cfg.h).unwrap()),
    ];
    let reports: Vec<_> = forecasters.iter().map(|f| evaluate(f.as_ref(), &ds.test.windows, cfg.h).unwrap()).collect();
    // reloading and re-batching leave the numbers bit-identical
    assert_eq!(reports[0].steps, reports[1].steps);
    for r in &reports {
        assert_eq!(r.horizon(), cfg.h);
        assert!(r.steps.iter().all(|s| s.rmse >= s.mae && s.mae.is_finite()));
    }
}
