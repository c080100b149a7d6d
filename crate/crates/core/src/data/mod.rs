//! Ingestion, chronological splitting, normalization and windowing.

pub mod ingest;
pub mod series;
pub mod split;

pub use ingest::{
    cumulative_to_daily, ingest_county_cumulative, ingest_state_cumulative, is_excluded_county, CountyColumns,
    CountyData, Field, IngestOptions, Level, StateColumns, US_STATES,
};
pub use series::TimeSeries;
pub use split::{
    chronological_split, inverse_zscore, make_windows, split_lengths, window_count, zscore, NormStats,
    NormalizationMode, SplitName, SplitSpec, SplitWindows, Splits, WindowSample, WindowedDataset,
};
