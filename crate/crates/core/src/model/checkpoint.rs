//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "STSGTCKP"
//! version   u32      1
//! hdr_len   u64      byte length of the JSON header
//! header    JSON     {config, norm_stats, vertex_names, metadata, tensors: [{name, shape, offset}]}
//! payload   f64 LE   tensor values, row-major, at `offset` (counted in f64 elements)
//! ```
//!
//! `tensors` lists every model parameter in registration order followed by
//! the spatial adjacency under the name `graph.adjacency`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ParamStore, StsgtConfig, StsgtModel};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::graph::SpatialGraph;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"STSGTCKP";
pub const VERSION: u32 = 1;
const ADJACENCY: &str = "graph.adjacency";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: StsgtConfig,
    norm_stats: Vec<NormStats>,
    vertex_names: Vec<String>,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: StsgtModel,
    pub norm_stats: Vec<NormStats>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Differences between the stored architecture and `expected`, one line each.
    pub fn compatibility(&self, expected: &StsgtConfig) -> Vec<String> {
        let stored = serde_json::to_value(self.model.config()).expect("config serializes");
        let want = serde_json::to_value(expected).expect("config serializes");
        let (Some(stored), Some(want)) = (stored.as_object(), want.as_object()) else {
            return vec!["config is not an object".into()];
        };
        want.iter()
            .filter(|(k, v)| stored.get(*k) != Some(*v))
            .map(|(k, v)| {
                format!("model.{k}: checkpoint has {}, config has {v}", stored.get(k).cloned().unwrap_or_default())
            })
            .collect()
    }
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    model: &StsgtModel,
    norm_stats: &[NormStats],
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    let all = || model.params().iter().chain(std::iter::once((ADJACENCY, model.graph().adjacency())));
    for (name, t) in all() {
        tensors.push(TensorEntry { name: name.to_owned(), shape: t.shape().to_vec(), offset });
        offset += t.numel();
    }
    let header = Header {
        config: model.config().clone(),
        norm_stats: norm_stats.to_vec(),
        vertex_names: model.graph().names().to_vec(),
        metadata: metadata.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| Error::Io { path: None, source: e };
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let mut buf = Vec::with_capacity(offset * 8);
    for (_, t) in all() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io)?;
    w.flush().map_err(io)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::Io { path: None, source: e })?;
    let bad = |msg: &str| Error::Checkpoint(msg.to_owned());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    let payload = &body[hlen..];
    if payload.len() % 8 != 0 {
        return Err(bad("payload length is not a multiple of 8"));
    }
    let values: Vec<f64> =
        payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();

    let mut store = ParamStore::new();
    let mut adjacency = None;
    for e in &header.tensors {
        let len: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + len)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} extends past the payload", e.name)))?;
        let t = Tensor::new(&e.shape, data.to_vec())?;
        if e.name == ADJACENCY {
            adjacency = Some(t);
        } else {
            store.add(e.name.clone(), t);
        }
    }
    let adjacency = adjacency.ok_or_else(|| bad("missing graph adjacency"))?;
    let graph = SpatialGraph::from_adjacency(header.vertex_names, adjacency)?;
    let model = StsgtModel::from_params(header.config, graph, store)?;
    Ok(Checkpoint { model, norm_stats: header.norm_stats, metadata: header.metadata })
}
