//! The STSGT network: input projection, encodings, stacked attention + GCN
//! blocks over the synchronous graph, and a one-shot multi-step output head.

pub mod checkpoint;
pub mod layers;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use params::{ParamId, ParamStore};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{apply_mask, build_sync_adjacency, vertex_index0, SpatialGraph};
use crate::numerics::{Tape, Tensor, Var};
use layers::BlockVars;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StsgtConfig {
    /// History length.
    pub m: usize,
    /// Forecast horizon.
    pub h: usize,
    /// Vertices.
    pub n: usize,
    /// Input features per vertex.
    pub f: usize,
    pub c_in: usize,
    pub num_layers: usize,
    pub blocks_per_layer: usize,
    pub heads: usize,
    pub d_qkv: usize,
    pub mlp_hidden: usize,
    /// Hidden width of the output head.
    pub c_out_hidden: usize,
    /// One mask per block instead of a single shared mask.
    pub per_block_mask: bool,
    pub encoding_std: f64,
}

impl Default for StsgtConfig {
    fn default() -> Self {
        Self {
            m: 12,
            h: 12,
            n: 51,
            f: 1,
            c_in: 16,
            num_layers: 2,
            blocks_per_layer: 2,
            heads: 2,
            d_qkv: 16,
            mlp_hidden: 32,
            c_out_hidden: 64,
            per_block_mask: false,
            encoding_std: 0.02,
        }
    }
}

impl StsgtConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("m", self.m),
            ("h", self.h),
            ("n", self.n),
            ("f", self.f),
            ("c_in", self.c_in),
            ("num_layers", self.num_layers),
            ("blocks_per_layer", self.blocks_per_layer),
            ("heads", self.heads),
            ("d_qkv", self.d_qkv),
            ("mlp_hidden", self.mlp_hidden),
            ("c_out_hidden", self.c_out_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model.{name} must be positive")));
        }
        if !(self.encoding_std >= 0.0 && self.encoding_std.is_finite()) {
            return Err(Error::invalid("model.encoding_std must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.num_layers * self.blocks_per_layer
    }

    /// Rows of the synchronous graph.
    pub fn sync_size(&self) -> usize {
        self.m * self.n
    }
}

#[derive(Debug, Clone)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    heads: Vec<(ParamId, ParamId, ParamId)>,
    merge: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    mlp: Vec<(ParamId, ParamId)>,
    gcn: (ParamId, ParamId),
    mask: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    input: (ParamId, ParamId),
    t_enc: ParamId,
    s_enc: ParamId,
    masks: Vec<ParamId>,
    blocks: Vec<BlockIds>,
    head: [ParamId; 4],
}

/// Registers every parameter with zero/placeholder values; [`StsgtModel::new`]
/// fills them in. Names and order are the checkpoint contract.
fn layout(cfg: &StsgtConfig, store: &mut ParamStore) -> Layout {
    let c = cfg.c_in;
    let affine = |store: &mut ParamStore, name: &str, rows: usize, cols: usize| {
        (
            store.add(format!("{name}.weight"), Tensor::zeros(&[rows, cols])),
            store.add(format!("{name}.bias"), Tensor::zeros(&[cols])),
        )
    };
    let input = affine(store, "input_proj", cfg.f, c);
    let t_enc = store.add("t_enc", Tensor::zeros(&[cfg.m, 1, c]));
    let s_enc = store.add("s_enc", Tensor::zeros(&[1, cfg.n, c]));
    let mn = cfg.sync_size();
    let masks: Vec<ParamId> = if cfg.per_block_mask {
        (0..cfg.num_blocks()).map(|b| store.add(format!("mask.{b}"), Tensor::ones(&[mn, mn]))).collect()
    } else {
        vec![store.add("mask", Tensor::ones(&[mn, mn]))]
    };
    let mut blocks = Vec::with_capacity(cfg.num_blocks());
    for l in 0..cfg.num_layers {
        for b in 0..cfg.blocks_per_layer {
            let p = format!("layers.{l}.blocks.{b}");
            let ln = |store: &mut ParamStore, name: &str| {
                (
                    store.add(format!("{p}.{name}.gamma"), Tensor::ones(&[c])),
                    store.add(format!("{p}.{name}.beta"), Tensor::zeros(&[c])),
                )
            };
            let ln1 = ln(store, "ln1");
            let heads = (0..cfg.heads)
                .map(|i| {
                    let w = |store: &mut ParamStore, x: &str| {
                        store.add(format!("{p}.attn.{i}.{x}"), Tensor::zeros(&[c, cfg.d_qkv]))
                    };
                    (w(store, "w_q"), w(store, "w_k"), w(store, "w_v"))
                })
                .collect();
            let merge = affine(store, &format!("{p}.attn.merge"), cfg.heads * cfg.d_qkv, c);
            let ln2 = ln(store, "ln2");
            let mlp = vec![
                affine(store, &format!("{p}.mlp.0"), c, cfg.mlp_hidden),
                affine(store, &format!("{p}.mlp.1"), cfg.mlp_hidden, cfg.mlp_hidden),
                affine(store, &format!("{p}.mlp.2"), cfg.mlp_hidden, c),
            ];
            let gcn = affine(store, &format!("{p}.gcn"), c, c);
            let mask = masks[if cfg.per_block_mask { blocks.len() } else { 0 }];
            blocks.push(BlockIds { ln1, heads, merge, ln2, mlp, gcn, mask });
        }
    }
    let (w1, b1) = affine(store, "head.0", cfg.m * c, cfg.c_out_hidden);
    let (w2, b2) = affine(store, "head.1", cfg.c_out_hidden, cfg.h);
    Layout { input, t_enc, s_enc, masks, blocks, head: [w1, b1, w2, b2] }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[B, H, N]` forecasts in normalized units.
    pub output: Var,
    /// One handle per parameter, aligned with [`ParamStore`] order.
    pub params: Vec<Var>,
    /// Attention nodes (`blocks × heads`); their score matrices are on the tape.
    pub attention: Vec<Var>,
    /// Masked synchronous adjacency per mask.
    pub adjacency: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct StsgtModel {
    config: StsgtConfig,
    graph: SpatialGraph,
    sync: Tensor,
    params: ParamStore,
    layout: Layout,
}

impl StsgtModel {
    /// Fresh model: affine weights uniform in `±1/√fan_in`, zero biases,
    /// encodings `N(0, encoding_std²)`, masks all ones.
    pub fn new<R: Rng + ?Sized>(config: StsgtConfig, graph: SpatialGraph, rng: &mut R) -> Result<Self> {
        let mut model = Self::skeleton(config, graph)?;
        let (t_enc, s_enc) = (model.layout.t_enc, model.layout.s_enc);
        let std = model.config.encoding_std;
        for i in 0..model.params.len() {
            let id = ParamId(i);
            let name = &model.params.names()[i];
            let shape = model.params.get(id).shape().to_vec();
            let value = if id == t_enc || id == s_enc {
                Tensor::normal(&shape, std, rng)
            } else if name.ends_with(".weight")
                || name.ends_with(".w_q")
                || name.ends_with(".w_k")
                || name.ends_with(".w_v")
            {
                Tensor::uniform(&shape, 1.0 / (shape[0] as f64).sqrt(), rng)
            } else {
                continue;
            };
            *model.params.get_mut(id) = value;
        }
        Ok(model)
    }

    /// Architecture with placeholder parameter values.
    fn skeleton(config: StsgtConfig, graph: SpatialGraph) -> Result<Self> {
        config.validate()?;
        if graph.num_vertices() != config.n {
            return Err(Error::invalid(format!(
                "graph has {} vertices but model.n = {}",
                graph.num_vertices(),
                config.n
            )));
        }
        let sync = build_sync_adjacency(&graph, config.m)?.adjacency().clone();
        let mut params = ParamStore::new();
        let layout = layout(&config, &mut params);
        Ok(Self { config, graph, sync, params, layout })
    }

    /// Rebuilds a model from stored parameters, checking every name and shape.
    pub fn from_params(config: StsgtConfig, graph: SpatialGraph, stored: ParamStore) -> Result<Self> {
        let mut model = Self::skeleton(config, graph)?;
        let mut problems = Vec::new();
        for (name, tensor) in model.params.iter() {
            match stored.by_name(name) {
                Ok(t) if t.shape() == tensor.shape() => {}
                Ok(t) => problems.push(format!("{name}: expected shape {:?}, found {:?}", tensor.shape(), t.shape())),
                Err(_) => problems.push(format!("{name}: missing")),
            }
        }
        for name in stored.names() {
            if model.params.id(name).is_none() {
                problems.push(format!("{name}: unexpected parameter"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::CheckpointMismatch(problems));
        }
        for i in 0..model.params.len() {
            let name = model.params.names()[i].clone();
            *model.params.get_mut(ParamId(i)) = stored.by_name(&name)?.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &StsgtConfig {
        &self.config
    }

    pub fn graph(&self) -> &SpatialGraph {
        &self.graph
    }

    /// The unmasked synchronous adjacency.
    pub fn sync_adjacency(&self) -> &Tensor {
        &self.sync
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn mask_ids(&self) -> &[ParamId] {
        &self.layout.masks
    }

    /// Runs the network on `x: [B, M, N, F]` (normalized). With `track`,
    /// parameters are tape params and receive gradients on backward.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, track: bool) -> Result<Forward> {
        let cfg = &self.config;
        let s = x.shape();
        if s.len() != 4 || s[1] != cfg.m || s[2] != cfg.n || s[3] != cfg.f {
            return Err(Error::dim("forward", s, &[0, cfg.m, cfg.n, cfg.f]));
        }
        let batch = s[0];
        let params: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .map(|t| if track { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let v = |id: ParamId| params[id.0];
        let lay = &self.layout;

        let sync = tape.constant(self.sync.clone());
        let adjacency: Vec<Var> = lay.masks.iter().map(|&m| apply_mask(tape, sync, v(m))).collect::<Result<_>>()?;
        let mask_slot = |id: ParamId| lay.masks.iter().position(|&m| m == id).expect("registered mask");

        let xin = tape.constant(x.clone());
        let h = layers::input_projection(tape, xin, v(lay.input.0), v(lay.input.1))?;
        let h = layers::add_encodings(tape, h, v(lay.t_enc), v(lay.s_enc))?;
        let mut h = tape.reshape(h, &[batch, cfg.sync_size(), cfg.c_in])?;

        let mut attention = Vec::with_capacity(lay.blocks.len() * cfg.heads);
        for b in &lay.blocks {
            let vars = BlockVars {
                ln1: (v(b.ln1.0), v(b.ln1.1)),
                heads: b.heads.iter().map(|&(q, k, w)| (v(q), v(k), v(w))).collect(),
                merge: (v(b.merge.0), v(b.merge.1)),
                ln2: (v(b.ln2.0), v(b.ln2.1)),
                mlp: b.mlp.iter().map(|&(w, bb)| (v(w), v(bb))).collect(),
                gcn: (v(b.gcn.0), v(b.gcn.1)),
            };
            let (st, att) = layers::stst_block(tape, h, &vars)?;
            attention.extend(att);
            let g = layers::gcn_layer(tape, st, adjacency[mask_slot(b.mask)], vars.gcn.0, vars.gcn.1)?;
            h = tape.add(h, g)?;
        }

        let h = tape.reshape(h, &[batch, cfg.m, cfg.n, cfg.c_in])?;
        let [w1, b1, w2, b2] = lay.head;
        let output = layers::output_head(tape, h, v(w1), v(b1), v(w2), v(b2))?;
        Ok(Forward { output, params, attention, adjacency })
    }

    /// Untracked forward returning `[B, H, N]` normalized forecasts.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, x, false)?;
        Ok(tape.value(fwd.output).clone())
    }

    /// Same model with vertices reordered: new vertex `i` is old `perm[i]`.
    /// Spatial encodings and masks are permuted consistently.
    pub fn permuted_vertices(&self, perm: &[usize]) -> Result<Self> {
        let (m, n) = (self.config.m, self.config.n);
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..n).collect::<Vec<_>>() {
            return Err(Error::invalid("vertex permutation must be a permutation of 0..N"));
        }
        let mut out = Self::skeleton(self.config.clone(), self.graph.permuted(perm))?;
        out.params = self.params.clone();
        let s_enc = self.params.get(self.layout.s_enc);
        let c = self.config.c_in;
        let mut s_new = Tensor::zeros(s_enc.shape());
        for (i, &p) in perm.iter().enumerate() {
            s_new.data_mut()[i * c..(i + 1) * c].copy_from_slice(&s_enc.data()[p * c..(p + 1) * c]);
        }
        *out.params.get_mut(self.layout.s_enc) = s_new;
        let sync_perm: Vec<usize> = (0..m * n).map(|r| vertex_index0(r / n, perm[r % n], n)).collect();
        for &id in &self.layout.masks {
            let old = self.params.get(id);
            let mn = m * n;
            let mut new = Tensor::zeros(old.shape());
            for i in 0..mn {
                for j in 0..mn {
                    new.data_mut()[i * mn + j] = old.data()[sync_perm[i] * mn + sync_perm[j]];
                }
            }
            *out.params.get_mut(id) = new;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
