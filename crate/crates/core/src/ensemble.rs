//! Combining several language adapters at inference time, and adapting the
//! combination weights to an unlabeled test batch by minimizing prediction
//! entropy.
//!
//! Combination weights live on the probability simplex by construction: the
//! learnable state is an unconstrained logit vector `beta`, and the applied
//! weights are `alpha = softmax(beta)`, started at `beta = 0` (uniform).
//! The entropy-minimization loop updates only `beta`; the model, the language
//! adapters, and the task adapter are inserted as constants and stay bitwise
//! untouched.

use serde::{Deserialize, Serialize};

use crate::adapter::{apply_adapter, AdapterParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{forward_probs, Backbone, ForwardOpts, HeadSel, LangMix};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// Exactly one adapter, applied directly.
    Single,
    /// Uniform mean over all adapter outputs.
    Average,
    /// Softmax-weighted mixture with learnable logits.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyReduction {
    /// Sum of per-position entropies over the whole batch (default).
    Sum,
    /// Mean per position; decouples the step size from batch size.
    Mean,
}

/// An ordered set of language adapters plus the rule for mixing their
/// per-layer outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageCombiner {
    pub adapters: Vec<AdapterParams>,
    pub mode: CombineMode,
    /// Mixing logits: one row shared across layers, or one row per encoder
    /// layer. Each row has one entry per adapter. Unused in single/average
    /// mode.
    pub beta: Vec<Vec<f32>>,
}

impl LanguageCombiner {
    pub fn single(adapter: AdapterParams) -> Self {
        LanguageCombiner {
            adapters: vec![adapter],
            mode: CombineMode::Single,
            beta: Vec::new(),
        }
    }

    pub fn average(adapters: Vec<AdapterParams>) -> Result<Self> {
        if adapters.is_empty() {
            return Err(Error::Config("combiner needs at least one adapter".to_string()));
        }
        Ok(LanguageCombiner {
            adapters,
            mode: CombineMode::Average,
            beta: Vec::new(),
        })
    }

    /// Weighted mode starting from uniform weights (`beta = 0`).
    pub fn weighted(adapters: Vec<AdapterParams>) -> Result<Self> {
        if adapters.is_empty() {
            return Err(Error::Config("combiner needs at least one adapter".to_string()));
        }
        let r = adapters.len();
        Ok(LanguageCombiner {
            adapters,
            mode: CombineMode::Weighted,
            beta: vec![vec![0.0; r]],
        })
    }

    /// Number of adapters in the ensemble.
    pub fn r(&self) -> usize {
        self.adapters.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.adapters.is_empty() {
            return Err(Error::Config("combiner needs at least one adapter".to_string()));
        }
        if self.mode == CombineMode::Weighted {
            if self.beta.is_empty() {
                return Err(Error::Config(
                    "weighted combiner has no beta rows".to_string(),
                ));
            }
            for row in &self.beta {
                if row.len() != self.adapters.len() {
                    return Err(Error::Config(format!(
                        "beta row has {} entries for {} adapters",
                        row.len(),
                        self.adapters.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// The effective mixing weights: one-hot (single), uniform (average), or
    /// the per-layer mean of `softmax(beta)` rows (weighted).
    pub fn alpha(&self) -> Vec<f32> {
        let r = self.r();
        match self.mode {
            CombineMode::Single => vec![1.0],
            CombineMode::Average => vec![1.0 / r as f32; r],
            CombineMode::Weighted => {
                let mut acc = vec![0.0f64; r];
                for row in &self.beta {
                    for (a, v) in acc.iter_mut().zip(softmax_vec(row)) {
                        *a += v as f64;
                    }
                }
                let n = self.beta.len().max(1) as f64;
                acc.iter().map(|v| (*v / n) as f32).collect()
            }
        }
    }

    /// Logit rows to feed the forward pass; average mode is the zero-logit
    /// (uniform) special case of the weighted path, sharing its code exactly.
    pub fn beta_rows(&self) -> Vec<Vec<f32>> {
        match self.mode {
            CombineMode::Single => Vec::new(),
            CombineMode::Average => vec![vec![0.0; self.r()]],
            CombineMode::Weighted => self.beta.clone(),
        }
    }
}

fn softmax_vec(row: &[f32]) -> Vec<f32> {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = row.iter().map(|v| ((v - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum) as f32).collect()
}

/// Settings of the test-time entropy-minimization loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmeaConfig {
    /// Step size of the plain gradient descent on `beta`.
    pub gamma: f32,
    /// Number of update steps; 0 degenerates to uniform averaging.
    pub steps: usize,
    #[serde(default = "default_reduction")]
    pub entropy_reduction: EntropyReduction,
    /// One `beta` row shared by all layers (true) or one row per layer.
    #[serde(default = "default_true")]
    pub share_alpha_across_layers: bool,
    /// Restart from uniform weights on every batch.
    #[serde(default = "default_true")]
    pub reset_per_batch: bool,
}

fn default_reduction() -> EntropyReduction {
    EntropyReduction::Sum
}
fn default_true() -> bool {
    true
}

impl Default for EmeaConfig {
    fn default() -> Self {
        EmeaConfig {
            gamma: 10.0,
            steps: 1,
            entropy_reduction: EntropyReduction::Sum,
            share_alpha_across_layers: true,
            reset_per_batch: true,
        }
    }
}

impl EmeaConfig {
    /// One-step preset.
    pub fn s1() -> Self {
        EmeaConfig { steps: 1, ..Default::default() }
    }

    /// Ten-step preset.
    pub fn s10() -> Self {
        EmeaConfig { steps: 10, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!(
                "gamma {} must be positive",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Mix the adapters of `c` over activation `h` at one encoder layer, as a
/// standalone graph op. Returns the combined output and, for average or
/// weighted mode, the logit leaf so callers can read its gradient. Pass
/// `beta` to reuse one logit leaf across layers; otherwise a fresh leaf is
/// created from the combiner's first row.
pub fn combine(
    g: &mut Graph,
    h: NodeId,
    c: &LanguageCombiner,
    layer_index: usize,
    beta: Option<NodeId>,
) -> Result<(NodeId, Option<NodeId>)> {
    c.validate()?;
    for a in &c.adapters {
        if layer_index >= a.layers.len() {
            return Err(Error::Config(format!(
                "layer index {layer_index} out of range for adapter '{}' with {} layers",
                a.name,
                a.layers.len()
            )));
        }
    }
    if c.mode == CombineMode::Single {
        let nodes = c.adapters[0].insert(g, false);
        return Ok((apply_adapter(g, h, &nodes.layers[layer_index]), None));
    }
    let beta_node = match beta {
        Some(b) => b,
        None => {
            let row = match c.mode {
                CombineMode::Average => vec![0.0; c.r()],
                _ => c.beta[0].clone(),
            };
            g.leaf(Tensor::new(vec![row.len()], row), true)
        }
    };
    let alpha = g.softmax(beta_node, 0);
    let outs: Vec<NodeId> = c
        .adapters
        .iter()
        .map(|a| {
            let nodes = a.insert(g, false);
            apply_adapter(g, h, &nodes.layers[layer_index])
        })
        .collect();
    Ok((g.weighted_sum(alpha, &outs), Some(beta_node)))
}

/// Result of adapting combination weights to one test batch.
#[derive(Debug, Clone)]
pub struct EmeaOutcome {
    /// Final mixing weights (per-layer mean when layers are not shared).
    pub alpha: Vec<f32>,
    /// Per-sentence argmax tag indices, one per word.
    pub predictions: Vec<Vec<usize>>,
    /// Batch entropy under the initial weights.
    pub entropy_before: f64,
    /// Batch entropy under the final weights.
    pub entropy_after: f64,
}

/// One pass over the batch: total prediction entropy, per-row beta
/// gradients (when `want_grad`), and argmax predictions.
///
/// `betas = None` runs the single-adapter path (first adapter of `c`).
fn entropy_pass(
    model: &Backbone,
    ids: &[Vec<usize>],
    starts: &[Vec<usize>],
    adapters: &[AdapterParams],
    task: &AdapterParams,
    betas: Option<&[Vec<f32>]>,
    reduction: EntropyReduction,
    want_grad: bool,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<usize>>)> {
    let n_rows = betas.map_or(0, <[Vec<f32>]>::len);
    let mut grads: Vec<Vec<f64>> = (0..n_rows)
        .map(|_| vec![0.0; adapters.len()])
        .collect();
    let mut total_h = 0.0f64;
    let mut total_words = 0usize;
    let mut predictions = Vec::with_capacity(ids.len());

    for (sent_ids, sent_starts) in ids.iter().zip(starts) {
        let mut g = Graph::new();
        let opts = ForwardOpts {
            mix: match betas {
                None => LangMix::Single {
                    adapter: &adapters[0],
                    trainable: false,
                },
                Some(b) => LangMix::Mixed {
                    adapters,
                    betas: b,
                    trainable_beta: want_grad,
                },
            },
            task: Some((task, false)),
            head: HeadSel::Task {
                word_starts: sent_starts,
            },
            backbone_trainable: false,
            task_head_trainable: false,
        };
        let (probs, handles) = forward_probs(&mut g, model, sent_ids, &opts)?;
        let ent = g.entropy(probs)?;
        total_h += g.value(ent).data[0] as f64;
        total_words += sent_starts.len();

        if want_grad {
            g.backward(ent)?;
            for (row, &b) in grads.iter_mut().zip(&handles.beta_nodes) {
                if let Some(grad) = g.grad(b) {
                    for (acc, v) in row.iter_mut().zip(grad) {
                        *acc += *v as f64;
                    }
                }
            }
        }

        let p = g.value(probs);
        let mut tags = Vec::with_capacity(p.rows());
        for r in 0..p.rows() {
            let row = p.row(r);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("finite probs"))
                .expect("non-empty tag row");
            tags.push(best);
        }
        predictions.push(tags);
    }

    if reduction == EntropyReduction::Mean && total_words > 0 {
        let scale = 1.0 / total_words as f64;
        total_h *= scale;
        for row in &mut grads {
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
    }
    Ok((total_h, grads, predictions))
}

/// Adapt the mixing weights of `c` to one unlabeled batch by `cfg.steps`
/// entropy-descent updates on `beta`, then predict with the final weights.
///
/// Only `c.beta` changes; the model, every language adapter, and the task
/// adapter are read-only. With `reset_per_batch` the weights restart from
/// uniform, making the call independent of previous batches.
pub fn emea_adapt(
    model: &Backbone,
    ids: &[Vec<usize>],
    starts: &[Vec<usize>],
    c: &mut LanguageCombiner,
    task: &AdapterParams,
    cfg: &EmeaConfig,
) -> Result<EmeaOutcome> {
    cfg.validate()?;
    c.validate()?;
    if ids.len() != starts.len() {
        return Err(Error::Contract(format!(
            "batch has {} id lists but {} word-start lists",
            ids.len(),
            starts.len()
        )));
    }
    if ids.is_empty() {
        return Err(Error::Data("test batch is empty".to_string()));
    }
    if cfg.steps > 0 && c.mode != CombineMode::Weighted {
        return Err(Error::Usage(
            "entropy steps require a weighted combiner; single/average modes have no \
             adjustable weights"
                .to_string(),
        ));
    }

    let r = c.r();
    let n_rows = if cfg.share_alpha_across_layers {
        1
    } else {
        model.cfg.n_layers
    };

    // Working logits for this batch.
    let mut betas: Vec<Vec<f32>> = if c.mode != CombineMode::Weighted {
        c.beta_rows()
    } else if cfg.reset_per_batch {
        vec![vec![0.0; r]; n_rows]
    } else {
        let mut rows = c.beta.clone();
        while rows.len() < n_rows {
            rows.push(rows[0].clone());
        }
        rows.truncate(n_rows);
        rows
    };

    let single = c.mode == CombineMode::Single;

    let (entropy_before, _, _) = entropy_pass(
        model,
        ids,
        starts,
        &c.adapters,
        task,
        if single { None } else { Some(betas.as_slice()) },
        cfg.entropy_reduction,
        false,
    )?;

    for _ in 0..cfg.steps {
        let (_, grads, _) = entropy_pass(
            model,
            ids,
            starts,
            &c.adapters,
            task,
            Some(&betas),
            cfg.entropy_reduction,
            true,
        )?;
        for (row, grow) in betas.iter_mut().zip(&grads) {
            for (b, g) in row.iter_mut().zip(grow) {
                *b -= cfg.gamma * (*g as f32);
            }
        }
    }

    let (entropy_after, _, predictions) = entropy_pass(
        model,
        ids,
        starts,
        &c.adapters,
        task,
        if single { None } else { Some(betas.as_slice()) },
        cfg.entropy_reduction,
        false,
    )?;

    if c.mode == CombineMode::Weighted {
        c.beta = betas.clone();
    }
    let alpha = match c.mode {
        CombineMode::Single => vec![1.0],
        _ => {
            let mut acc = vec![0.0f64; r];
            for row in &betas {
                for (a, v) in acc.iter_mut().zip(softmax_vec(row)) {
                    *a += v as f64;
                }
            }
            acc.iter().map(|v| (*v / betas.len() as f64) as f32).collect()
        }
    };
    Ok(EmeaOutcome {
        alpha,
        predictions,
        entropy_before,
        entropy_after,
    })
}

/// Result of continual-learning test-time adaptation of a single adapter.
#[derive(Debug, Clone)]
pub struct ClOutcome {
    pub predictions: Vec<Vec<usize>>,
    pub entropy_before: f64,
    pub entropy_after: f64,
}

/// Baseline test-time adaptation: gradient-descend the *parameters* of a
/// copy of one language adapter on the batch entropy, then predict. The
/// caller's adapter, the task adapter, and the model stay untouched; each
/// call starts from a fresh copy.
pub fn cl_adapt(
    model: &Backbone,
    ids: &[Vec<usize>],
    starts: &[Vec<usize>],
    adapter: &AdapterParams,
    task: &AdapterParams,
    lr: f32,
    steps: usize,
) -> Result<ClOutcome> {
    if ids.len() != starts.len() {
        return Err(Error::Contract(format!(
            "batch has {} id lists but {} word-start lists",
            ids.len(),
            starts.len()
        )));
    }
    if ids.is_empty() {
        return Err(Error::Data("test batch is empty".to_string()));
    }
    if lr < 0.0 {
        return Err(Error::Config(format!("lr {lr} must be non-negative")));
    }

    let mut tuned = adapter.clone();
    let sizes: Vec<usize> = tuned.tensors().iter().map(|t| t.numel()).collect();

    let mut entropy_before = 0.0f64;
    for step in 0..steps {
        let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        let mut h_total = 0.0f64;
        for (sent_ids, sent_starts) in ids.iter().zip(starts) {
            let mut g = Graph::new();
            let opts = ForwardOpts {
                mix: LangMix::Single {
                    adapter: &tuned,
                    trainable: true,
                },
                task: Some((task, false)),
                head: HeadSel::Task {
                    word_starts: sent_starts,
                },
                backbone_trainable: false,
                task_head_trainable: false,
            };
            let (probs, handles) = forward_probs(&mut g, model, sent_ids, &opts)?;
            let ent = g.entropy(probs)?;
            h_total += g.value(ent).data[0] as f64;
            g.backward(ent)?;
            for (acc, &nid) in grads.iter_mut().zip(&handles.lang_nodes[0].ids()) {
                if let Some(grad) = g.grad(nid) {
                    for (a, v) in acc.iter_mut().zip(grad) {
                        *a += *v as f64;
                    }
                }
            }
        }
        if step == 0 {
            entropy_before = h_total;
        }
        for (t, grow) in tuned.tensors_mut().into_iter().zip(&grads) {
            for (w, g) in t.data.iter_mut().zip(grow) {
                *w -= lr * (*g as f32);
            }
        }
    }

    let (entropy_after, _, predictions) = entropy_pass(
        model,
        ids,
        starts,
        std::slice::from_ref(&tuned),
        task,
        None,
        EntropyReduction::Sum,
        false,
    )?;
    if steps == 0 {
        entropy_before = entropy_after;
    }
    Ok(ClOutcome {
        predictions,
        entropy_before,
        entropy_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterKind;
    use crate::corpus::{generate_unlabeled, make_variety};
    use crate::model::{forward, ModelConfig};
    use crate::tokenizer::Tokenizer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        model: Backbone,
        adapters: Vec<AdapterParams>,
        task: AdapterParams,
        ids: Vec<Vec<usize>>,
        starts: Vec<Vec<usize>>,
    }

    /// Tiny random model with noised adapters over a 4-sentence batch.
    fn fixture(seed: u64, r: usize) -> Fixture {
        let cfg = ModelConfig {
            vocab_size: 64,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            d_adapter: 4,
            max_len: 32,
            n_tags: 5,
        };
        let spec = make_variety("syn", None, 0.0, 40, seed).unwrap();
        let sents = generate_unlabeled(&spec, 4, seed ^ 0xBEEF);
        let tok = Tokenizer::build(&sents, 64);
        let cfg = ModelConfig {
            vocab_size: tok.vocab_size(),
            ..cfg
        };
        let model = Backbone::new(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
        let adapters: Vec<AdapterParams> = (0..r)
            .map(|i| {
                let mut a = AdapterParams::new(
                    AdapterKind::Language,
                    &format!("a{i}"),
                    &cfg,
                    seed + i as u64,
                );
                for l in &mut a.layers {
                    for v in l.up_w.data.iter_mut() {
                        *v = rng.gen_range(-0.5..0.5);
                    }
                }
                a
            })
            .collect();
        let mut task = AdapterParams::new(AdapterKind::Task, "task", &cfg, seed ^ 7);
        for l in &mut task.layers {
            for v in l.up_w.data.iter_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let (ids, starts) = sents
            .iter()
            .map(|s| {
                let e = tok.encode(s);
                (e.ids, e.word_starts)
            })
            .unzip();
        Fixture {
            model,
            adapters,
            task,
            ids,
            starts,
        }
    }

    fn rand_h(seed: u64, rows: usize, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![rows, d],
            (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn combine_r1_weighted_matches_single_exactly() {
        let f = fixture(1, 1);
        let h = rand_h(2, 3, 8);
        let single = LanguageCombiner::single(f.adapters[0].clone());
        let weighted = LanguageCombiner::weighted(f.adapters.clone()).unwrap();

        let mut g1 = Graph::new();
        let hid1 = g1.constant(h.clone());
        let (o1, _) = combine(&mut g1, hid1, &single, 0, None).unwrap();
        let mut g2 = Graph::new();
        let hid2 = g2.constant(h);
        let (o2, beta) = combine(&mut g2, hid2, &weighted, 0, None).unwrap();
        assert!(beta.is_some());
        // softmax of one logit is exactly 1, so the paths agree bitwise.
        assert_eq!(g1.value(o1).data, g2.value(o2).data);
    }

    #[test]
    fn combine_identical_adapters_returns_their_output() {
        let f = fixture(3, 1);
        let twin = vec![f.adapters[0].clone(), f.adapters[0].clone()];
        let h = rand_h(4, 3, 8);

        let mut g = Graph::new();
        let hid = g.constant(h.clone());
        let single = LanguageCombiner::single(f.adapters[0].clone());
        let (oref, _) = combine(&mut g, hid, &single, 1, None).unwrap();
        let reference = g.value(oref).data.clone();

        // Equal logits give each side exactly 1/2, so x/2 + x/2 == x bitwise.
        let even = LanguageCombiner::weighted(twin.clone()).unwrap();
        let mut g_even = Graph::new();
        let hid_even = g_even.constant(h.clone());
        let (o_even, _) = combine(&mut g_even, hid_even, &even, 1, None).unwrap();
        assert_eq!(g_even.value(o_even).data, reference);

        // Arbitrary logits agree within rounding.
        let mut skew = LanguageCombiner::weighted(twin).unwrap();
        skew.beta = vec![vec![0.3, -1.2]];
        let mut g_skew = Graph::new();
        let hid_skew = g_skew.constant(h);
        let (o_skew, _) = combine(&mut g_skew, hid_skew, &skew, 1, None).unwrap();
        for (a, b) in g_skew.value(o_skew).data.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn combine_ln3_logits_give_three_to_one_mixture() {
        let f = fixture(5, 2);
        let h = rand_h(6, 3, 8);
        let mut c = LanguageCombiner::weighted(f.adapters.clone()).unwrap();
        c.beta = vec![vec![3.0f32.ln(), 0.0]];

        let mut g = Graph::new();
        let hid = g.constant(h.clone());
        let (out, _) = combine(&mut g, hid, &c, 0, None).unwrap();

        // Oracle: apply each adapter alone, then mix 0.75 / 0.25 by hand.
        let l1 = crate::adapter::adapter_apply(&h, &f.adapters[0], 0).unwrap();
        let l2 = crate::adapter::adapter_apply(&h, &f.adapters[1], 0).unwrap();
        for i in 0..h.numel() {
            let want = 0.75 * l1.data[i] as f64 + 0.25 * l2.data[i] as f64;
            let got = g.value(out).data[i] as f64;
            assert!((want - got).abs() < 1e-6, "elem {i}: {want} vs {got}");
        }
    }

    #[test]
    fn combine_empty_adapter_list_is_config_error() {
        let c = LanguageCombiner {
            adapters: Vec::new(),
            mode: CombineMode::Average,
            beta: Vec::new(),
        };
        let mut g = Graph::new();
        let h = g.constant(rand_h(1, 2, 8));
        assert!(matches!(
            combine(&mut g, h, &c, 0, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn emea_zero_steps_equals_average_inference_exactly() {
        let f = fixture(7, 3);
        let mut weighted = LanguageCombiner::weighted(f.adapters.clone()).unwrap();
        let cfg = EmeaConfig {
            steps: 0,
            ..Default::default()
        };
        let out = emea_adapt(&f.model, &f.ids, &f.starts, &mut weighted, &f.task, &cfg).unwrap();

        let mut avg = LanguageCombiner::average(f.adapters.clone()).unwrap();
        let avg_out =
            emea_adapt(&f.model, &f.ids, &f.starts, &mut avg, &f.task, &cfg).unwrap();
        assert_eq!(out.predictions, avg_out.predictions);
        assert_eq!(out.entropy_after.to_bits(), avg_out.entropy_after.to_bits());
        let uniform = 1.0 / 3.0f32;
        for a in &out.alpha {
            assert!((a - uniform).abs() < 1e-7);
        }
    }

    #[test]
    fn emea_identical_adapters_keep_exactly_uniform_alpha() {
        let f = fixture(9, 1);
        let twins = vec![f.adapters[0].clone(), f.adapters[0].clone()];
        let mut c = LanguageCombiner::weighted(twins).unwrap();
        let cfg = EmeaConfig {
            steps: 3,
            ..Default::default()
        };
        let out = emea_adapt(&f.model, &f.ids, &f.starts, &mut c, &f.task, &cfg).unwrap();
        assert_eq!(out.alpha, vec![0.5, 0.5]);

        let mut avg = LanguageCombiner::average(vec![f.adapters[0].clone(); 2]).unwrap();
        let avg_out = emea_adapt(
            &f.model,
            &f.ids,
            &f.starts,
            &mut avg,
            &f.task,
            &EmeaConfig { steps: 0, ..Default::default() },
        )
        .unwrap();
        assert_eq!(out.predictions, avg_out.predictions);
    }

    #[test]
    fn emea_steps_on_average_mode_is_usage_error() {
        let f = fixture(11, 2);
        let mut c = LanguageCombiner::average(f.adapters.clone()).unwrap();
        let err = emea_adapt(
            &f.model,
            &f.ids,
            &f.starts,
            &mut c,
            &f.task,
            &EmeaConfig::s1(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn emea_small_step_rarely_increases_entropy_and_alpha_stays_simplex() {
        let mut descended = 0;
        let n = 20;
        for seed in 0..n {
            let f = fixture(100 + seed, 2);
            let mut c = LanguageCombiner::weighted(f.adapters.clone()).unwrap();
            let cfg = EmeaConfig {
                gamma: 0.1,
                steps: 1,
                ..Default::default()
            };
            let out =
                emea_adapt(&f.model, &f.ids, &f.starts, &mut c, &f.task, &cfg).unwrap();
            if out.entropy_after <= out.entropy_before + 1e-12 {
                descended += 1;
            }
            let sum: f32 = out.alpha.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "alpha sums to {sum}");
            assert!(out.alpha.iter().all(|a| *a >= 0.0));
        }
        assert!(
            descended as f64 >= 0.95 * n as f64,
            "entropy descended on only {descended}/{n} batches"
        );
    }

    #[test]
    fn emea_beta_gradient_matches_finite_differences() {
        for seed in 0..10u64 {
            let f = fixture(200 + seed, 2);

            // Analytic gradient at beta = 0 via one instrumented pass.
            let betas = vec![vec![0.0f32, 0.0]];
            let (_, grads, _) = entropy_pass(
                &f.model,
                &f.ids,
                &f.starts,
                &f.adapters,
                &f.task,
                Some(&betas),
                EntropyReduction::Sum,
                true,
            )
            .unwrap();

            // Numeric oracle: central differences of the same objective.
            let eval = |beta: Vec<f32>| -> f64 {
                let rows = vec![beta];
                entropy_pass(
                    &f.model,
                    &f.ids,
                    &f.starts,
                    &f.adapters,
                    &f.task,
                    Some(&rows),
                    EntropyReduction::Sum,
                    false,
                )
                .unwrap()
                .0
            };
            for i in 0..2 {
                let step = 1e-3f32;
                let mut bp = vec![0.0f32, 0.0];
                bp[i] += step;
                let mut bm = vec![0.0f32, 0.0];
                bm[i] -= step;
                let (hp, hm) = (eval(bp.clone()), eval(bm.clone()));
                let realized = (bp[i] - bm[i]) as f64;
                let numeric = (hp - hm) / realized;
                let analytic = grads[0][i];
                let denom = 1.0f64.max(numeric.abs()).max(analytic.abs());
                assert!(
                    (numeric - analytic).abs() / denom < 1e-3,
                    "seed {seed} beta[{i}]: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn emea_touches_no_model_or_adapter_parameter() {
        let f = fixture(31, 3);
        let before = (
            serde_json::to_vec(&f.model).unwrap(),
            serde_json::to_vec(&f.adapters).unwrap(),
            serde_json::to_vec(&f.task).unwrap(),
        );
        let mut c = LanguageCombiner::weighted(f.adapters.clone()).unwrap();
        emea_adapt(
            &f.model,
            &f.ids,
            &f.starts,
            &mut c,
            &f.task,
            &EmeaConfig {
                steps: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(serde_json::to_vec(&f.model).unwrap(), before.0);
        assert_eq!(serde_json::to_vec(&f.adapters).unwrap(), before.1);
        assert_eq!(serde_json::to_vec(&f.task).unwrap(), before.2);
    }

    #[test]
    fn emea_batches_are_independent_under_reset() {
        let f = fixture(33, 2);
        let batch_a: (Vec<_>, Vec<_>) = (f.ids[..2].to_vec(), f.starts[..2].to_vec());
        let batch_b: (Vec<_>, Vec<_>) = (f.ids[2..].to_vec(), f.starts[2..].to_vec());
        let cfg = EmeaConfig::s10();

        let run = |order: [&(Vec<Vec<usize>>, Vec<Vec<usize>>); 2]| {
            let mut c = LanguageCombiner::weighted(f.adapters.clone()).unwrap();
            order
                .iter()
                .map(|(ids, starts)| {
                    emea_adapt(&f.model, ids, starts, &mut c, &f.task, &cfg).unwrap()
                })
                .collect::<Vec<_>>()
        };
        let ab = run([&batch_a, &batch_b]);
        let ba = run([&batch_b, &batch_a]);
        assert_eq!(ab[0].predictions, ba[1].predictions);
        assert_eq!(ab[0].alpha, ba[1].alpha);
        assert_eq!(ab[1].predictions, ba[0].predictions);
        assert_eq!(ab[1].alpha, ba[0].alpha);
    }

    #[test]
    fn emea_per_layer_alpha_runs_and_returns_simplex_mean() {
        let f = fixture(35, 2);
        let mut c = LanguageCombiner::weighted(f.adapters.clone()).unwrap();
        let cfg = EmeaConfig {
            share_alpha_across_layers: false,
            steps: 2,
            ..Default::default()
        };
        let out = emea_adapt(&f.model, &f.ids, &f.starts, &mut c, &f.task, &cfg).unwrap();
        assert_eq!(c.beta.len(), f.model.cfg.n_layers);
        let sum: f32 = out.alpha.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cl_zero_lr_matches_plain_single_inference() {
        let f = fixture(41, 1);
        let out = cl_adapt(
            &f.model,
            &f.ids,
            &f.starts,
            &f.adapters[0],
            &f.task,
            0.0,
            1,
        )
        .unwrap();

        // Plain inference with the unmodified adapter.
        let mut plain = Vec::new();
        for (ids, starts) in f.ids.iter().zip(&f.starts) {
            let mut g = Graph::new();
            let opts = ForwardOpts::infer(
                LangMix::Single {
                    adapter: &f.adapters[0],
                    trainable: false,
                },
                &f.task,
                starts,
            );
            let handles = forward(&mut g, &f.model, ids, &opts).unwrap();
            let logits = g.value(handles.logits);
            let tags: Vec<usize> = (0..logits.rows())
                .map(|r| {
                    let row = logits.row(r);
                    (0..row.len())
                        .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                        .unwrap()
                })
                .collect();
            plain.push(tags);
        }
        assert_eq!(out.predictions, plain);
        assert_eq!(out.entropy_before, out.entropy_after);
    }

    #[test]
    fn cl_small_step_descends_entropy_and_freezes_backbone() {
        let mut descended = 0;
        let n = 20;
        for seed in 0..n {
            let f = fixture(300 + seed, 1);
            let model_bytes = serde_json::to_vec(&f.model).unwrap();
            let adapter_before = f.adapters[0].clone();
            let out = cl_adapt(
                &f.model,
                &f.ids,
                &f.starts,
                &f.adapters[0],
                &f.task,
                2e-5,
                1,
            )
            .unwrap();
            if out.entropy_after <= out.entropy_before + 1e-12 {
                descended += 1;
            }
            assert_eq!(serde_json::to_vec(&f.model).unwrap(), model_bytes);
            assert_eq!(f.adapters[0], adapter_before);
        }
        assert!(
            descended as f64 >= 0.95 * n as f64,
            "entropy descended on only {descended}/{n} batches"
        );
    }
}
