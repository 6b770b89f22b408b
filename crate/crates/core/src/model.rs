//! Toy transformer encoder with per-layer insertion points for language and
//! task adapters.
//!
//! Layer order: attention block, feed-forward block, language combination
//! (single adapter, weighted mixture, or fusion attention), then the task
//! adapter when present. Heads: a tied-embedding masked-LM head over every
//! position, or a linear tag head over designated word-start positions.
//!
//! The backbone is trained once (masked-LM pretraining), then frozen;
//! everything downstream enters compute graphs as constant leaves unless a
//! forward call explicitly marks its group trainable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{apply_adapter, AdapterNodes, AdapterParams};
use crate::error::{Error, Result};
use crate::fusion::{fuse_layer, FusionNodes, FusionParams};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_adapter: usize,
    pub max_len: usize,
    pub n_tags: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("d_adapter", self.d_adapter),
            ("max_len", self.max_len),
            ("n_tags", self.n_tags),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_adapter >= self.d_model {
            return Err(Error::Config(format!(
                "d_adapter {} must be smaller than d_model {}",
                self.d_adapter, self.d_model
            )));
        }
        Ok(())
    }
}

/// Attention + feed-forward weights of one encoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_shift: Tensor,
    pub ff1_w: Tensor,
    pub ff1_b: Tensor,
    pub ff2_w: Tensor,
    pub ff2_b: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_shift: Tensor,
}

/// The shared encoder: embeddings, layers, and both output heads. Position
/// encodings are sinusoidal and computed on the fly (not parameters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub cfg: ModelConfig,
    pub tok_emb: Tensor,
    pub layers: Vec<EncoderLayer>,
    /// Bias of the tied masked-LM head (weights are `tok_emb` transposed).
    pub mlm_bias: Tensor,
    pub task_w: Tensor,
    pub task_b: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerNodes {
    pub w_q: NodeId,
    pub b_q: NodeId,
    pub w_k: NodeId,
    pub b_k: NodeId,
    pub w_v: NodeId,
    pub b_v: NodeId,
    pub w_o: NodeId,
    pub b_o: NodeId,
    pub ln1_gain: NodeId,
    pub ln1_shift: NodeId,
    pub ff1_w: NodeId,
    pub ff1_b: NodeId,
    pub ff2_w: NodeId,
    pub ff2_b: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_shift: NodeId,
}

#[derive(Debug, Clone)]
pub struct BackboneNodes {
    pub tok_emb: NodeId,
    pub layers: Vec<EncoderLayerNodes>,
    pub mlm_bias: NodeId,
    pub task_w: NodeId,
    pub task_b: NodeId,
}

impl Backbone {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let attn_bound = 1.0 / (d as f32).sqrt();
        let ff2_bound = 1.0 / (cfg.d_ff as f32).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| EncoderLayer {
                w_q: Tensor::uniform(&mut rng, vec![d, d], attn_bound),
                b_q: Tensor::zeros(vec![d]),
                w_k: Tensor::uniform(&mut rng, vec![d, d], attn_bound),
                b_k: Tensor::zeros(vec![d]),
                w_v: Tensor::uniform(&mut rng, vec![d, d], attn_bound),
                b_v: Tensor::zeros(vec![d]),
                w_o: Tensor::uniform(&mut rng, vec![d, d], attn_bound),
                b_o: Tensor::zeros(vec![d]),
                ln1_gain: Tensor::filled(vec![d], 1.0),
                ln1_shift: Tensor::zeros(vec![d]),
                ff1_w: Tensor::uniform(&mut rng, vec![d, cfg.d_ff], attn_bound),
                ff1_b: Tensor::zeros(vec![cfg.d_ff]),
                ff2_w: Tensor::uniform(&mut rng, vec![cfg.d_ff, d], ff2_bound),
                ff2_b: Tensor::zeros(vec![d]),
                ln2_gain: Tensor::filled(vec![d], 1.0),
                ln2_shift: Tensor::zeros(vec![d]),
            })
            .collect();
        Ok(Backbone {
            cfg: *cfg,
            tok_emb: Tensor::uniform(&mut rng, vec![cfg.vocab_size, d], 0.1),
            layers,
            mlm_bias: Tensor::zeros(vec![cfg.vocab_size]),
            task_w: Tensor::uniform(&mut rng, vec![d, cfg.n_tags], attn_bound),
            task_b: Tensor::zeros(vec![cfg.n_tags]),
        })
    }

    /// `head_trainable` additionally grad-enables just the tag head, used
    /// when the task phase trains the head with the backbone body frozen.
    pub fn insert(&self, g: &mut Graph, trainable: bool, head_trainable: bool) -> BackboneNodes {
        BackboneNodes {
            tok_emb: g.leaf(self.tok_emb.clone(), trainable),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayerNodes {
                    w_q: g.leaf(l.w_q.clone(), trainable),
                    b_q: g.leaf(l.b_q.clone(), trainable),
                    w_k: g.leaf(l.w_k.clone(), trainable),
                    b_k: g.leaf(l.b_k.clone(), trainable),
                    w_v: g.leaf(l.w_v.clone(), trainable),
                    b_v: g.leaf(l.b_v.clone(), trainable),
                    w_o: g.leaf(l.w_o.clone(), trainable),
                    b_o: g.leaf(l.b_o.clone(), trainable),
                    ln1_gain: g.leaf(l.ln1_gain.clone(), trainable),
                    ln1_shift: g.leaf(l.ln1_shift.clone(), trainable),
                    ff1_w: g.leaf(l.ff1_w.clone(), trainable),
                    ff1_b: g.leaf(l.ff1_b.clone(), trainable),
                    ff2_w: g.leaf(l.ff2_w.clone(), trainable),
                    ff2_b: g.leaf(l.ff2_b.clone(), trainable),
                    ln2_gain: g.leaf(l.ln2_gain.clone(), trainable),
                    ln2_shift: g.leaf(l.ln2_shift.clone(), trainable),
                })
                .collect(),
            mlm_bias: g.leaf(self.mlm_bias.clone(), trainable),
            task_w: g.leaf(self.task_w.clone(), trainable || head_trainable),
            task_b: g.leaf(self.task_b.clone(), trainable || head_trainable),
        }
    }

    /// Flat parameter list; order matches [`BackboneNodes::ids`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = vec![&self.tok_emb];
        for l in &self.layers {
            out.extend([
                &l.w_q, &l.b_q, &l.w_k, &l.b_k, &l.w_v, &l.b_v, &l.w_o, &l.b_o, &l.ln1_gain,
                &l.ln1_shift, &l.ff1_w, &l.ff1_b, &l.ff2_w, &l.ff2_b, &l.ln2_gain, &l.ln2_shift,
            ]);
        }
        out.extend([&self.mlm_bias, &self.task_w, &self.task_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.tok_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.w_q,
                &mut l.b_q,
                &mut l.w_k,
                &mut l.b_k,
                &mut l.w_v,
                &mut l.b_v,
                &mut l.w_o,
                &mut l.b_o,
                &mut l.ln1_gain,
                &mut l.ln1_shift,
                &mut l.ff1_w,
                &mut l.ff1_b,
                &mut l.ff2_w,
                &mut l.ff2_b,
                &mut l.ln2_gain,
                &mut l.ln2_shift,
            ]);
        }
        out.extend([&mut self.mlm_bias, &mut self.task_w, &mut self.task_b]);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            vec![("backbone.tok_emb".to_string(), &self.tok_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            for (field, t) in [
                ("w_q", &l.w_q),
                ("b_q", &l.b_q),
                ("w_k", &l.w_k),
                ("b_k", &l.b_k),
                ("w_v", &l.w_v),
                ("b_v", &l.b_v),
                ("w_o", &l.w_o),
                ("b_o", &l.b_o),
                ("ln1_gain", &l.ln1_gain),
                ("ln1_shift", &l.ln1_shift),
                ("ff1_w", &l.ff1_w),
                ("ff1_b", &l.ff1_b),
                ("ff2_w", &l.ff2_w),
                ("ff2_b", &l.ff2_b),
                ("ln2_gain", &l.ln2_gain),
                ("ln2_shift", &l.ln2_shift),
            ] {
                out.push((format!("backbone.layer{i}.{field}"), t));
            }
        }
        out.push(("backbone.mlm_bias".to_string(), &self.mlm_bias));
        out.push(("backbone.task_w".to_string(), &self.task_w));
        out.push(("backbone.task_b".to_string(), &self.task_b));
        out
    }
}

impl BackboneNodes {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.tok_emb];
        for l in &self.layers {
            out.extend([
                l.w_q, l.b_q, l.w_k, l.b_k, l.w_v, l.b_v, l.w_o, l.b_o, l.ln1_gain, l.ln1_shift,
                l.ff1_w, l.ff1_b, l.ff2_w, l.ff2_b, l.ln2_gain, l.ln2_shift,
            ]);
        }
        out.extend([self.mlm_bias, self.task_w, self.task_b]);
        out
    }
}

/// Fixed sinusoidal position encodings for a sequence of length `n`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0f32; n * d];
    for p in 0..n {
        for i in 0..d / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = p as f64 * rate;
            data[p * d + 2 * i] = angle.sin() as f32;
            data[p * d + 2 * i + 1] = angle.cos() as f32;
        }
    }
    Tensor::new(vec![n, d], data)
}

/// How language adapters are combined at each layer during one forward pass.
#[derive(Clone, Copy)]
pub enum LangMix<'a> {
    /// No language adaptation (backbone pretraining).
    None,
    /// Exactly one adapter, applied directly.
    Single {
        adapter: &'a AdapterParams,
        trainable: bool,
    },
    /// Softmax-weighted mixture over R adapter outputs. `betas` holds one
    /// logit row shared across layers, or one row per layer.
    Mixed {
        adapters: &'a [AdapterParams],
        betas: &'a [Vec<f32>],
        trainable_beta: bool,
    },
    /// Learned attention over adapter outputs (fusion baseline).
    Fused {
        adapters: &'a [AdapterParams],
        fusion: &'a FusionParams,
        trainable_fusion: bool,
    },
}

/// Which output head to evaluate.
pub enum HeadSel<'a> {
    /// Vocabulary logits at every token position.
    Mlm,
    /// Tag logits at the given word-start token positions.
    Task { word_starts: &'a [usize] },
}

pub struct ForwardOpts<'a> {
    pub mix: LangMix<'a>,
    /// Task adapter and whether it trains in this pass.
    pub task: Option<(&'a AdapterParams, bool)>,
    pub head: HeadSel<'a>,
    pub backbone_trainable: bool,
    /// Grad-enable only the tag head (task-adapter training phase).
    pub task_head_trainable: bool,
}

impl<'a> ForwardOpts<'a> {
    /// Frozen inference with the given mix and task adapter over the tag head.
    pub fn infer(mix: LangMix<'a>, task: &'a AdapterParams, word_starts: &'a [usize]) -> Self {
        ForwardOpts {
            mix,
            task: Some((task, false)),
            head: HeadSel::Task { word_starts },
            backbone_trainable: false,
            task_head_trainable: false,
        }
    }
}

/// Everything a caller needs after one forward pass: the output node plus
/// the leaf ids of each parameter group (for optimizers and grad reads).
#[derive(Debug)]
pub struct ForwardHandles {
    /// `[W, n_tags]` tag logits or `[T, vocab]` masked-LM logits.
    pub logits: NodeId,
    /// One node per beta row inserted (weighted mixing only).
    pub beta_nodes: Vec<NodeId>,
    pub lang_nodes: Vec<AdapterNodes>,
    pub task_nodes: Option<AdapterNodes>,
    pub fusion_nodes: Option<FusionNodes>,
    pub backbone_nodes: BackboneNodes,
}

/// Run the encoder over one sentence and return logit handles.
pub fn forward(
    g: &mut Graph,
    model: &Backbone,
    tokens: &[usize],
    opts: &ForwardOpts,
) -> Result<ForwardHandles> {
    let cfg = &model.cfg;
    if tokens.is_empty() {
        return Err(Error::Data("forward: empty token sequence".to_string()));
    }
    if tokens.len() > cfg.max_len {
        return Err(Error::Data(format!(
            "sentence length {} exceeds max_len {}",
            tokens.len(),
            cfg.max_len
        )));
    }
    for &t in tokens {
        if t >= cfg.vocab_size {
            return Err(Error::Data(format!(
                "token id {t} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }
    }
    if let HeadSel::Task { word_starts } = &opts.head {
        if opts.task.is_none() {
            return Err(Error::Usage(
                "tag head requested without a task adapter".to_string(),
            ));
        }
        if word_starts.is_empty() {
            return Err(Error::Data("forward: no word-start positions".to_string()));
        }
        if let Some(&bad) = word_starts.iter().find(|&&w| w >= tokens.len()) {
            return Err(Error::Data(format!(
                "word start {bad} beyond sentence length {}",
                tokens.len()
            )));
        }
    }

    let bb = model.insert(g, opts.backbone_trainable, opts.task_head_trainable);

    // Language-mix graph state.
    let mut beta_nodes: Vec<NodeId> = Vec::new();
    let mut alpha_nodes: Vec<NodeId> = Vec::new();
    let mut lang_nodes: Vec<AdapterNodes> = Vec::new();
    let mut fusion_nodes: Option<FusionNodes> = None;
    match &opts.mix {
        LangMix::None => {}
        LangMix::Single { adapter, trainable } => {
            adapter.check_compatible(cfg)?;
            lang_nodes.push(adapter.insert(g, *trainable));
        }
        LangMix::Mixed {
            adapters,
            betas,
            trainable_beta,
        } => {
            if adapters.is_empty() {
                return Err(Error::Config("adapter mixture is empty".to_string()));
            }
            if betas.is_empty() || (betas.len() != 1 && betas.len() != cfg.n_layers) {
                return Err(Error::Config(format!(
                    "expected 1 or {} beta rows, got {}",
                    cfg.n_layers,
                    betas.len()
                )));
            }
            for a in *adapters {
                a.check_compatible(cfg)?;
                lang_nodes.push(a.insert(g, false));
            }
            for row in *betas {
                if row.len() != adapters.len() {
                    return Err(Error::Config(format!(
                        "beta row has {} entries for {} adapters",
                        row.len(),
                        adapters.len()
                    )));
                }
                let b = g.leaf(Tensor::new(vec![row.len()], row.clone()), *trainable_beta);
                beta_nodes.push(b);
                alpha_nodes.push(g.softmax(b, 0));
            }
        }
        LangMix::Fused {
            adapters,
            fusion,
            trainable_fusion,
        } => {
            if adapters.len() < 2 {
                return Err(Error::Config(
                    "fusion requires at least 2 adapters".to_string(),
                ));
            }
            fusion.check_compatible(cfg, adapters.len())?;
            for a in *adapters {
                a.check_compatible(cfg)?;
                lang_nodes.push(a.insert(g, false));
            }
            fusion_nodes = Some(fusion.insert(g, *trainable_fusion));
        }
    }

    let task_nodes = match &opts.task {
        Some((task, trainable)) => {
            task.check_compatible(cfg)?;
            Some(task.insert(g, *trainable))
        }
        None => None,
    };

    // Embed: token rows + sinusoidal positions.
    let emb = g.gather(bb.tok_emb, tokens.to_vec());
    let pos = g.constant(sinusoidal_positions(tokens.len(), cfg.d_model));
    let mut h = g.add(emb, pos);

    let d_head = cfg.d_model / cfg.n_heads;
    for (li, layer) in bb.layers.iter().enumerate() {
        // Attention block.
        let q = g.matmul(h, layer.w_q).expect("attention q shape");
        let q = g.add_bias(q, layer.b_q);
        let k = g.matmul(h, layer.w_k).expect("attention k shape");
        let k = g.add_bias(k, layer.b_k);
        let v = g.matmul(h, layer.w_v).expect("attention v shape");
        let v = g.add_bias(v, layer.b_v);
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let qh = g.slice_cols(q, hd * d_head, d_head);
            let kh = g.slice_cols(k, hd * d_head, d_head);
            let vh = g.slice_cols(v, hd * d_head, d_head);
            let scores = g.matmul_trans_b(qh, kh).expect("attention scores");
            let scaled = g.scale(scores, 1.0 / (d_head as f32).sqrt());
            let attn = g.softmax(scaled, 1);
            heads.push(g.matmul(attn, vh).expect("attention mix"));
        }
        let concat = g.concat_cols(&heads);
        let proj = g.matmul(concat, layer.w_o).expect("attention out shape");
        let proj = g.add_bias(proj, layer.b_o);
        let res1 = g.add(h, proj);
        h = g.layer_norm(res1, layer.ln1_gain, layer.ln1_shift);

        // Feed-forward block.
        let ff = g.matmul(h, layer.ff1_w).expect("ffn shape");
        let ff = g.add_bias(ff, layer.ff1_b);
        let ff = g.relu(ff);
        let ff = g.matmul(ff, layer.ff2_w).expect("ffn out shape");
        let ff = g.add_bias(ff, layer.ff2_b);
        let res2 = g.add(h, ff);
        h = g.layer_norm(res2, layer.ln2_gain, layer.ln2_shift);

        // Language combination.
        match &opts.mix {
            LangMix::None => {}
            LangMix::Single { .. } => {
                h = apply_adapter(g, h, &lang_nodes[0].layers[li]);
            }
            LangMix::Mixed { .. } => {
                let outs: Vec<NodeId> = lang_nodes
                    .iter()
                    .map(|a| apply_adapter(g, h, &a.layers[li]))
                    .collect();
                let alpha = alpha_nodes[li.min(alpha_nodes.len() - 1)];
                h = g.weighted_sum(alpha, &outs);
            }
            LangMix::Fused { .. } => {
                let outs: Vec<NodeId> = lang_nodes
                    .iter()
                    .map(|a| apply_adapter(g, h, &a.layers[li]))
                    .collect();
                let fu = fusion_nodes.as_ref().expect("fusion nodes present");
                h = fuse_layer(g, h, &outs, &fu.layers[li]);
            }
        }

        // Task adapter sits above the language combination at every layer.
        if let Some(tn) = &task_nodes {
            h = apply_adapter(g, h, &tn.layers[li]);
        }
    }

    let logits = match &opts.head {
        HeadSel::Mlm => {
            let scores = g.matmul_trans_b(h, bb.tok_emb).expect("tied head shape");
            g.add_bias(scores, bb.mlm_bias)
        }
        HeadSel::Task { word_starts } => {
            let gathered = g.gather(h, word_starts.to_vec());
            let scores = g.matmul(gathered, bb.task_w).expect("tag head shape");
            g.add_bias(scores, bb.task_b)
        }
    };

    Ok(ForwardHandles {
        logits,
        beta_nodes,
        lang_nodes,
        task_nodes,
        fusion_nodes,
        backbone_nodes: bb,
    })
}

/// Forward returning per-position probability rows (softmax over classes).
pub fn forward_probs(
    g: &mut Graph,
    model: &Backbone,
    tokens: &[usize],
    opts: &ForwardOpts,
) -> Result<(NodeId, ForwardHandles)> {
    let handles = forward(g, model, tokens, opts)?;
    let probs = g.softmax(handles.logits, 1);
    Ok((probs, handles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterKind;
    use rand::Rng;

    pub fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 64,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            d_adapter: 4,
            max_len: 16,
            n_tags: 5,
        }
    }

    #[test]
    fn config_validation_catches_bad_dims() {
        let mut c = tiny_cfg();
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c2 = tiny_cfg();
        c2.d_adapter = 16;
        assert!(matches!(c2.validate(), Err(Error::Config(_))));
        let mut c3 = tiny_cfg();
        c3.n_layers = 0;
        assert!(matches!(c3.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn probability_rows_sum_to_one_over_twenty_seeds() {
        let cfg = tiny_cfg();
        for seed in 0..20u64 {
            let model = Backbone::new(&cfg, seed).unwrap();
            let task = AdapterParams::new(AdapterKind::Task, "t", &cfg, seed + 100);
            let lang = AdapterParams::new(AdapterKind::Language, "l", &cfg, seed + 200);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tokens: Vec<usize> =
                (0..6).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
            let starts = [0usize, 2, 4];
            let mut g = Graph::new();
            let opts = ForwardOpts::infer(
                LangMix::Single {
                    adapter: &lang,
                    trainable: false,
                },
                &task,
                &starts,
            );
            let (probs, _) = forward_probs(&mut g, &model, &tokens, &opts).unwrap();
            let t = g.value(probs);
            assert_eq!(t.shape, vec![3, cfg.n_tags]);
            for r in 0..t.rows() {
                let s: f64 = t.row(r).iter().map(|v| *v as f64).sum();
                assert!((s - 1.0).abs() < 1e-5, "row {r} sums to {s}");
            }
        }
    }

    #[test]
    fn single_mix_equals_one_adapter_weighted_mix() {
        let cfg = tiny_cfg();
        let model = Backbone::new(&cfg, 11).unwrap();
        let mut lang = AdapterParams::new(AdapterKind::Language, "l", &cfg, 12);
        // Move the adapter off the identity so the test is non-trivial.
        for l in &mut lang.layers {
            for v in &mut l.up_w.data {
                *v = 0.05;
            }
        }
        let task = AdapterParams::new(AdapterKind::Task, "t", &cfg, 13);
        let tokens = [1usize, 5, 9, 20];
        let starts = [0usize, 2];

        let mut g1 = Graph::new();
        let o1 = ForwardOpts::infer(
            LangMix::Single {
                adapter: &lang,
                trainable: false,
            },
            &task,
            &starts,
        );
        let h1 = forward(&mut g1, &model, &tokens, &o1).unwrap();

        let adapters = [lang.clone()];
        let betas = [vec![0.0f32]];
        let mut g2 = Graph::new();
        let o2 = ForwardOpts::infer(
            LangMix::Mixed {
                adapters: &adapters,
                betas: &betas,
                trainable_beta: false,
            },
            &task,
            &starts,
        );
        let h2 = forward(&mut g2, &model, &tokens, &o2).unwrap();

        // softmax over one logit is exactly 1.0, so the paths agree exactly.
        assert_eq!(g1.value(h1.logits).data, g2.value(h2.logits).data);
    }

    #[test]
    fn forward_is_deterministic_for_fixed_seed() {
        let cfg = ModelConfig {
            vocab_size: 64,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            d_adapter: 4,
            max_len: 16,
            n_tags: 5,
        };
        let run = || {
            let model = Backbone::new(&cfg, 42).unwrap();
            let task = AdapterParams::new(AdapterKind::Task, "t", &cfg, 43);
            let tokens = [3usize, 7, 11];
            let starts = [0usize, 1, 2];
            let mut g = Graph::new();
            let opts = ForwardOpts::infer(LangMix::None, &task, &starts);
            let h = forward(&mut g, &model, &tokens, &opts).unwrap();
            g.value(h.logits).data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn task_head_without_adapter_is_usage_error() {
        let cfg = tiny_cfg();
        let model = Backbone::new(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let opts = ForwardOpts {
            mix: LangMix::None,
            task: None,
            head: HeadSel::Task {
                word_starts: &[0],
            },
            backbone_trainable: false,
            task_head_trainable: false,
        };
        let err = forward(&mut g, &model, &[1, 2], &opts).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn oversized_ids_and_lengths_are_data_errors() {
        let cfg = tiny_cfg();
        let model = Backbone::new(&cfg, 1).unwrap();
        let task = AdapterParams::new(AdapterKind::Task, "t", &cfg, 2);
        let starts = [0usize];
        let opts = ForwardOpts::infer(LangMix::None, &task, &starts);
        let mut g = Graph::new();
        assert!(matches!(
            forward(&mut g, &model, &[999], &opts),
            Err(Error::Data(_))
        ));
        let long: Vec<usize> = vec![1; cfg.max_len + 1];
        assert!(matches!(
            forward(&mut g, &model, &long, &opts),
            Err(Error::Data(_))
        ));
    }
}
