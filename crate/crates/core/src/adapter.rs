//! Bottleneck adapters: the small residual modules inserted into a frozen
//! encoder. One parameter set per encoder layer; the transform is
//! `h + up(relu(down(layer_norm(h))))`.
//!
//! The up-projection starts at zero, so a freshly created adapter is exactly
//! the identity — stacking it changes nothing until training moves it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Language,
    Task,
}

/// Parameters of one adapter at one encoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterLayer {
    pub down_w: Tensor,
    pub down_b: Tensor,
    pub up_w: Tensor,
    pub up_b: Tensor,
    pub ln_gain: Tensor,
    pub ln_shift: Tensor,
}

/// A named adapter with one [`AdapterLayer`] per encoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub kind: AdapterKind,
    pub name: String,
    pub d_model: usize,
    pub layers: Vec<AdapterLayer>,
}

/// Graph handles for one inserted adapter layer.
#[derive(Debug, Clone, Copy)]
pub struct AdapterLayerNodes {
    pub down_w: NodeId,
    pub down_b: NodeId,
    pub up_w: NodeId,
    pub up_b: NodeId,
    pub ln_gain: NodeId,
    pub ln_shift: NodeId,
}

#[derive(Debug, Clone)]
pub struct AdapterNodes {
    pub layers: Vec<AdapterLayerNodes>,
}

impl AdapterParams {
    /// Fresh adapter at the residual identity: zero up-projection, small
    /// uniform down-projection, unit layer norm.
    pub fn new(kind: AdapterKind, name: &str, cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (cfg.d_model as f32).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| AdapterLayer {
                down_w: Tensor::uniform(&mut rng, vec![cfg.d_model, cfg.d_adapter], bound),
                down_b: Tensor::zeros(vec![cfg.d_adapter]),
                up_w: Tensor::zeros(vec![cfg.d_adapter, cfg.d_model]),
                up_b: Tensor::zeros(vec![cfg.d_model]),
                ln_gain: Tensor::filled(vec![cfg.d_model], 1.0),
                ln_shift: Tensor::zeros(vec![cfg.d_model]),
            })
            .collect();
        AdapterParams {
            kind,
            name: name.to_string(),
            d_model: cfg.d_model,
            layers,
        }
    }

    /// Reject composition with a model of a different width or depth.
    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        if self.d_model != cfg.d_model {
            return Err(Error::Config(format!(
                "adapter '{}' has d_model {}, model expects {}",
                self.name, self.d_model, cfg.d_model
            )));
        }
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Config(format!(
                "adapter '{}' has {} layer sets, model has {} layers",
                self.name,
                self.layers.len(),
                cfg.n_layers
            )));
        }
        Ok(())
    }

    /// Copy all parameters into `g` as leaves, grad-enabled iff `trainable`.
    pub fn insert(&self, g: &mut Graph, trainable: bool) -> AdapterNodes {
        let layers = self
            .layers
            .iter()
            .map(|l| AdapterLayerNodes {
                down_w: g.leaf(l.down_w.clone(), trainable),
                down_b: g.leaf(l.down_b.clone(), trainable),
                up_w: g.leaf(l.up_w.clone(), trainable),
                up_b: g.leaf(l.up_b.clone(), trainable),
                ln_gain: g.leaf(l.ln_gain.clone(), trainable),
                ln_shift: g.leaf(l.ln_shift.clone(), trainable),
            })
            .collect();
        AdapterNodes { layers }
    }

    /// Flat list of parameter tensors in a fixed order (matches
    /// [`AdapterNodes::ids`]).
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    &l.down_w, &l.down_b, &l.up_w, &l.up_b, &l.ln_gain, &l.ln_shift,
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    &mut l.down_w,
                    &mut l.down_b,
                    &mut l.up_w,
                    &mut l.up_b,
                    &mut l.ln_gain,
                    &mut l.ln_shift,
                ]
            })
            .collect()
    }

    /// Named tensors for checkpointing, in `tensors()` order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (field, t) in [
                ("down_w", &l.down_w),
                ("down_b", &l.down_b),
                ("up_w", &l.up_w),
                ("up_b", &l.up_b),
                ("ln_gain", &l.ln_gain),
                ("ln_shift", &l.ln_shift),
            ] {
                out.push((format!("adapter.{}.layer{}.{}", self.name, i, field), t));
            }
        }
        out
    }
}

impl AdapterNodes {
    /// Leaf ids in the same flat order as [`AdapterParams::tensors`].
    pub fn ids(&self) -> Vec<NodeId> {
        self.layers
            .iter()
            .flat_map(|l| [l.down_w, l.down_b, l.up_w, l.up_b, l.ln_gain, l.ln_shift])
            .collect()
    }
}

/// The adapter transform at one layer: `h + up(relu(down(layer_norm(h))))`.
pub fn apply_adapter(g: &mut Graph, h: NodeId, layer: &AdapterLayerNodes) -> NodeId {
    let normed = g.layer_norm(h, layer.ln_gain, layer.ln_shift);
    let down = g.matmul(normed, layer.down_w).expect("adapter down shape");
    let down = g.add_bias(down, layer.down_b);
    let mid = g.relu(down);
    let up = g.matmul(mid, layer.up_w).expect("adapter up shape");
    let up = g.add_bias(up, layer.up_b);
    g.add(h, up)
}

/// Tensor-in, tensor-out convenience wrapper around [`apply_adapter`] for a
/// single layer, used by tests and hand checks.
pub fn adapter_apply(h: &Tensor, a: &AdapterParams, layer_index: usize) -> Result<Tensor> {
    if h.cols() != a.d_model {
        return Err(Error::Config(format!(
            "input width {} does not match adapter '{}' d_model {}",
            h.cols(),
            a.name,
            a.d_model
        )));
    }
    if layer_index >= a.layers.len() {
        return Err(Error::Config(format!(
            "layer index {layer_index} out of range for adapter '{}' ({} layers)",
            a.name,
            a.layers.len()
        )));
    }
    let mut g = Graph::new();
    let nodes = a.insert(&mut g, false);
    let hn = g.constant(h.clone());
    let out = apply_adapter(&mut g, hn, &nodes.layers[layer_index]);
    Ok(g.value(out).clone())
}
