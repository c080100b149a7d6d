use std::io::{Read, Write};

use chrono::NaiveDate;

use crate::error::{Error, Result};

/// Daily values for `N` vertices over `T` contiguous calendar days, stored
/// row-major as `T×N` (one feature per vertex).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    dates: Vec<NaiveDate>,
    vertex_names: Vec<String>,
    values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(dates: Vec<NaiveDate>, vertex_names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if dates.is_empty() {
            return Err(Error::EmptyInput("time series dates"));
        }
        if vertex_names.is_empty() {
            return Err(Error::EmptyInput("time series vertices"));
        }
        if values.len() != dates.len() * vertex_names.len() {
            return Err(Error::dim("time series", &[dates.len(), vertex_names.len()], &[values.len()]));
        }
        if let Some(w) = dates.windows(2).find(|w| w[1] != w[0] + chrono::Days::new(1)) {
            return Err(Error::invalid(format!("dates not contiguous: {} followed by {}", w[0], w[1])));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("time series contains non-finite values"));
        }
        Ok(Self { dates, vertex_names, values })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertex_names.len()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn first_date(&self) -> NaiveDate {
        self.dates[0]
    }

    pub fn last_date(&self) -> NaiveDate {
        self.dates[self.dates.len() - 1]
    }

    pub fn vertex_names(&self) -> &[String] {
        &self.vertex_names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Values of day `t` across all vertices.
    pub fn day(&self, t: usize) -> &[f64] {
        let n = self.num_vertices();
        &self.values[t * n..(t + 1) * n]
    }

    /// Series of a single vertex.
    pub fn vertex(&self, p: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.day(t)[p]).collect()
    }

    pub fn position(&self, date: NaiveDate) -> Option<usize> {
        let offset = (date - self.first_date()).num_days();
        (0..self.len() as i64).contains(&offset).then_some(offset as usize)
    }

    /// Days `start..end` (half-open).
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::invalid(format!("bad slice {start}..{end} of {} days", self.len())));
        }
        let n = self.num_vertices();
        Ok(Self {
            dates: self.dates[start..end].to_vec(),
            vertex_names: self.vertex_names.clone(),
            values: self.values[start * n..end * n].to_vec(),
        })
    }

    /// Inclusive date range.
    pub fn slice_dates(&self, start: NaiveDate, end: NaiveDate) -> Result<Self> {
        let s = self.position(start).ok_or_else(|| {
            Error::invalid(format!("start date {start} outside series {}..{}", self.first_date(), self.last_date()))
        })?;
        let e = self.position(end).ok_or_else(|| {
            Error::invalid(format!("end date {end} outside series {}..{}", self.first_date(), self.last_date()))
        })?;
        self.slice(s, e + 1)
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.dates.clone(), self.vertex_names.clone(), values)
    }

    /// Keeps only the listed vertices, in the given order.
    pub fn select_vertices(&self, names: &[String]) -> Result<Self> {
        let idx: Vec<usize> = names
            .iter()
            .map(|name| {
                self.vertex_names
                    .iter()
                    .position(|v| v == name)
                    .ok_or_else(|| Error::invalid(format!("unknown vertex '{name}'")))
            })
            .collect::<Result<_>>()?;
        let values = (0..self.len()).flat_map(|t| idx.iter().map(move |&p| self.day(t)[p])).collect();
        Self::new(self.dates.clone(), names.to_vec(), values)
    }

    /// CSV with an ISO `date` column followed by one column per vertex.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["date".to_owned()];
        header.extend(self.vertex_names.iter().cloned());
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut rec = vec![self.dates[t].format("%Y-%m-%d").to_string()];
            rec.extend(self.day(t).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.get(0) != Some("date") {
            return Err(Error::invalid("daily series CSV must start with a 'date' column"));
        }
        let names: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
        let mut dates = Vec::new();
        let mut values = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |detail: String| Error::invalid(format!("daily series line {}: {detail}", line + 2));
            let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d").map_err(|e| bad(format!("bad date: {e}")))?;
            dates.push(date);
            for field in rec.iter().skip(1) {
                values.push(field.parse::<f64>().map_err(|e| bad(format!("bad value '{field}': {e}")))?);
            }
        }
        Self::new(dates, names, values)
    }
}
