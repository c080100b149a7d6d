//! Spatial graph construction and the spatial-temporal synchronous graph.
//!
//! The synchronous graph stacks `M` copies of the spatial graph. Vertex `p`
//! at step `t` gets index `(t-1)·N + p` (1-based), so the MN×MN adjacency is
//! laid out in N×N blocks: diagonal blocks hold the spatial adjacency, the
//! first off-diagonal blocks hold the identity (each vertex linked to itself
//! at the neighbouring step), every other block is zero.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// How a kept edge with normalized distance `d` is weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EdgeWeight {
    /// `1 - d`
    #[default]
    Similarity,
    /// `d`
    Distance,
    /// `1`
    Binary,
}

impl FromStr for EdgeWeight {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "similarity" => Ok(Self::Similarity),
            "distance" => Ok(Self::Distance),
            "binary" => Ok(Self::Binary),
            other => {
                Err(Error::invalid(format!("unknown edge weight '{other}' (expected similarity|distance|binary)")))
            }
        }
    }
}

impl fmt::Display for EdgeWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Similarity => "similarity",
            Self::Distance => "distance",
            Self::Binary => "binary",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGraph {
    names: Vec<String>,
    coords: Vec<(f64, f64)>,
    adjacency: Tensor,
}

impl SpatialGraph {
    /// Wraps an existing adjacency, checking it is square, symmetric, zero on
    /// the diagonal and within `[0, 1]`.
    pub fn from_adjacency(names: Vec<String>, adjacency: Tensor) -> Result<Self> {
        let n = names.len();
        if n == 0 {
            return Err(Error::EmptyInput("graph vertices"));
        }
        if adjacency.shape() != [n, n] {
            return Err(Error::dim("adjacency", adjacency.shape(), &[n, n]));
        }
        for i in 0..n {
            if adjacency.get(&[i, i]) != 0.0 {
                return Err(Error::invalid(format!("adjacency diagonal entry {i} is non-zero")));
            }
            for j in 0..n {
                let w = adjacency.get(&[i, j]);
                if !(0.0..=1.0).contains(&w) || w != adjacency.get(&[j, i]) {
                    return Err(Error::invalid(format!(
                        "adjacency entry ({i},{j}) = {w} is outside [0,1] or asymmetric"
                    )));
                }
            }
        }
        Ok(Self { names, coords: Vec::new(), adjacency })
    }

    pub fn num_vertices(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// (latitude, longitude) per vertex; empty when loaded from an adjacency file.
    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    /// Number of non-zero adjacency entries, counting both directions.
    pub fn nnz(&self) -> usize {
        self.adjacency.data().iter().filter(|&&w| w != 0.0).count()
    }

    /// Undirected edge count.
    pub fn edge_count(&self) -> usize {
        self.nnz() / 2
    }

    pub fn density(&self) -> f64 {
        let n = self.num_vertices();
        if n < 2 {
            0.0
        } else {
            self.nnz() as f64 / (n * (n - 1)) as f64
        }
    }

    /// Reorders vertices: new vertex `i` is old vertex `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.num_vertices();
        let mut adj = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                adj.set(&[i, j], self.adjacency.get(&[perm[i], perm[j]]));
            }
        }
        Self {
            names: perm.iter().map(|&p| self.names[p].clone()).collect(),
            coords: if self.coords.is_empty() { Vec::new() } else { perm.iter().map(|&p| self.coords[p]).collect() },
            adjacency: adj,
        }
    }

    /// Writes the adjacency as CSV: one header row of vertex labels, then N rows of N weights.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.names)?;
        let n = self.num_vertices();
        for i in 0..n {
            w.write_record(self.adjacency.row(i).iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let names: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        let n = names.len();
        let mut data = Vec::with_capacity(n * n);
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != n {
                return Err(Error::invalid(format!(
                    "adjacency row {} has {} entries, expected {n}",
                    line + 1,
                    rec.len()
                )));
            }
            for field in rec.iter() {
                data.push(
                    field.trim().parse::<f64>().map_err(|e| {
                        Error::invalid(format!("adjacency row {}: bad number '{field}': {e}", line + 1))
                    })?,
                );
            }
        }
        if data.len() != n * n {
            return Err(Error::invalid(format!("adjacency has {} rows, expected {n}", data.len() / n.max(1))));
        }
        Self::from_adjacency(names, Tensor::new(&[n, n], data)?)
    }
}

/// Builds the thresholded, max-normalized Euclidean-distance adjacency over
/// `(latitude, longitude)` degree coordinates.
pub fn build_spatial_adjacency(
    names: Vec<String>,
    coords: Vec<(f64, f64)>,
    threshold: f64,
    weight: EdgeWeight,
) -> Result<SpatialGraph> {
    let n = coords.len();
    if n == 0 {
        return Err(Error::EmptyInput("vertex coordinates"));
    }
    if names.len() != n {
        return Err(Error::invalid(format!("{} names for {n} coordinates", names.len())));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    if coords.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::invalid("non-finite coordinate"));
    }
    let dist = |i: usize, j: usize| {
        let (a, b) = (coords[i], coords[j]);
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
    };
    let mut max_d: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            max_d = max_d.max(dist(i, j));
        }
    }
    let mut adj = Tensor::zeros(&[n, n]);
    if n >= 2 && max_d == 0.0 {
        return Err(Error::DegenerateGeometry);
    }
    for i in 0..n {
        for j in i + 1..n {
            let d = dist(i, j) / max_d;
            if d <= threshold {
                let w = match weight {
                    EdgeWeight::Similarity => 1.0 - d,
                    EdgeWeight::Distance => d,
                    EdgeWeight::Binary => 1.0,
                };
                adj.set(&[i, j], w);
                adj.set(&[j, i], w);
            }
        }
    }
    Ok(SpatialGraph { names, coords, adjacency: adj })
}

/// 1-based synchronous-graph index `(t-1)·N + p` of vertex `p` at step `t`.
pub fn vertex_index(t: usize, p: usize, n: usize, m: usize) -> Result<usize> {
    if t == 0 || t > m {
        return Err(Error::Index { what: "time-step", value: t, max: m });
    }
    if p == 0 || p > n {
        return Err(Error::Index { what: "vertex", value: p, max: n });
    }
    Ok((t - 1) * n + p)
}

/// 0-based variant: step `t` in `0..M`, vertex `p` in `0..N` maps to `t·N + p`,
/// the row-major flattening of an `M×N` grid.
pub fn vertex_index0(t: usize, p: usize, n: usize) -> usize {
    t * n + p
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncGraph {
    window: usize,
    base: SpatialGraph,
    adjacency: Tensor,
}

impl SyncGraph {
    pub fn window(&self) -> usize {
        self.window
    }

    pub fn base(&self) -> &SpatialGraph {
        &self.base
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn size(&self) -> usize {
        self.window * self.base.num_vertices()
    }

    pub fn nnz(&self) -> usize {
        self.adjacency.data().iter().filter(|&&w| w != 0.0).count()
    }
}

/// Assembles the MN×MN block adjacency over `m` time-steps.
pub fn build_sync_adjacency(base: &SpatialGraph, m: usize) -> Result<SyncGraph> {
    if m == 0 {
        return Err(Error::invalid("window length M must be at least 1"));
    }
    let n = base.num_vertices();
    let size = m * n;
    let mut adj = Tensor::zeros(&[size, size]);
    let a = base.adjacency();
    for k in 0..m {
        for i in 0..n {
            for j in 0..n {
                adj.set(&[vertex_index0(k, i, n), vertex_index0(k, j, n)], a.get(&[i, j]));
            }
        }
        if k + 1 < m {
            for p in 0..n {
                let (u, v) = (vertex_index0(k, p, n), vertex_index0(k + 1, p, n));
                adj.set(&[u, v], 1.0);
                adj.set(&[v, u], 1.0);
            }
        }
    }
    Ok(SyncGraph { window: m, base: base.clone(), adjacency: adj })
}

/// Elementwise product of a learnable mask with the synchronous adjacency.
/// Entries where the adjacency is zero stay zero for any mask.
pub fn apply_mask(tape: &mut Tape, sync_adjacency: Var, mask: Var) -> Result<Var> {
    tape.hadamard(mask, sync_adjacency)
}
