//! Fusion baseline: a learned per-layer attention that mixes the outputs of
//! several language adapters. The layer output acts as the query; each
//! adapter's output provides one key and one value. Trained on labeled
//! source data, then frozen at test time (no per-batch adaptation).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

/// Query/key/value projections for one encoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionLayer {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

/// Fusion parameters for every layer, fixed to a specific adapter count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub d_model: usize,
    /// Number of adapters the parameters were trained against.
    pub n_adapters: usize,
    pub layers: Vec<FusionLayer>,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionLayerNodes {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
}

#[derive(Debug, Clone)]
pub struct FusionNodes {
    pub layers: Vec<FusionLayerNodes>,
}

impl FusionParams {
    /// Near-identity start: value projection at the identity so the initial
    /// fusion output is close to an adapter average plus residual.
    pub fn new(cfg: &ModelConfig, n_adapters: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let bound = 1.0 / (d as f32).sqrt();
        let eye = |scale: f32| {
            let mut t = Tensor::zeros(vec![d, d]);
            for i in 0..d {
                t.data[i * d + i] = scale;
            }
            t
        };
        let layers = (0..cfg.n_layers)
            .map(|_| FusionLayer {
                w_q: Tensor::uniform(&mut rng, vec![d, d], bound),
                w_k: Tensor::uniform(&mut rng, vec![d, d], bound),
                w_v: eye(1.0),
            })
            .collect();
        FusionParams {
            d_model: d,
            n_adapters,
            layers,
        }
    }

    pub fn check_compatible(&self, cfg: &ModelConfig, n_adapters: usize) -> Result<()> {
        if self.d_model != cfg.d_model || self.layers.len() != cfg.n_layers {
            return Err(Error::Config(format!(
                "fusion parameters sized for d_model {} x {} layers, model is {} x {}",
                self.d_model,
                self.layers.len(),
                cfg.d_model,
                cfg.n_layers
            )));
        }
        if self.n_adapters != n_adapters {
            return Err(Error::Config(format!(
                "fusion trained against {} adapters, asked to combine {}",
                self.n_adapters, n_adapters
            )));
        }
        Ok(())
    }

    pub fn insert(&self, g: &mut Graph, trainable: bool) -> FusionNodes {
        let layers = self
            .layers
            .iter()
            .map(|l| FusionLayerNodes {
                w_q: g.leaf(l.w_q.clone(), trainable),
                w_k: g.leaf(l.w_k.clone(), trainable),
                w_v: g.leaf(l.w_v.clone(), trainable),
            })
            .collect();
        FusionNodes { layers }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.w_q, &l.w_k, &l.w_v])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w_q, &mut l.w_k, &mut l.w_v])
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("fusion.layer{i}.w_q"), &l.w_q));
            out.push((format!("fusion.layer{i}.w_k"), &l.w_k));
            out.push((format!("fusion.layer{i}.w_v"), &l.w_v));
        }
        out
    }
}

impl FusionNodes {
    pub fn ids(&self) -> Vec<NodeId> {
        self.layers
            .iter()
            .flat_map(|l| [l.w_q, l.w_k, l.w_v])
            .collect()
    }
}

/// Attention-mix the per-adapter outputs at one layer.
///
/// `adapter_outs[i]` is `L_i(h)`, shape `[W, d]`. Per token: query `= h W_q`,
/// key_i `= L_i(h) W_k`, value_i `= L_i(h) W_v`; attention over the adapter
/// axis with `1/sqrt(d)` scaling; output is the attention-weighted value sum
/// plus the residual `h`.
pub fn fuse_layer(
    g: &mut Graph,
    h: NodeId,
    adapter_outs: &[NodeId],
    f: &FusionLayerNodes,
) -> NodeId {
    let d = g.value(h).cols();
    let q = g.matmul(h, f.w_q).expect("fusion query shape");
    let mut scores = Vec::with_capacity(adapter_outs.len());
    let mut values = Vec::with_capacity(adapter_outs.len());
    for &out in adapter_outs {
        let k = g.matmul(out, f.w_k).expect("fusion key shape");
        let v = g.matmul(out, f.w_v).expect("fusion value shape");
        let s = g.row_dot(q, k);
        scores.push(g.scale(s, 1.0 / (d as f32).sqrt()));
        values.push(v);
    }
    let score_mat = g.stack_cols(&scores); // [W, R]
    let attn = g.softmax(score_mat, 1);
    let mut weighted = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        let w_col = g.slice_cols(attn, i, 1); // [W, 1]
        weighted.push(g.col_scale(v, w_col));
    }
    let mixed = g.add_n(&weighted);
    g.add(mixed, h)
}
