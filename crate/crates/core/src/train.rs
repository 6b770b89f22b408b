//! Training phases: masked-LM pretraining of the backbone, masked-LM
//! training of language adapters, supervised training of the task adapter
//! (plus tag head), fusion-parameter training, and budget-limited adapter
//! training for the data-for-compute comparison.
//!
//! Every phase updates exactly one parameter group; everything else enters
//! the graph as constant leaves, so freezing holds by construction and is
//! additionally audited bitwise in tests. All randomness flows from
//! `TrainConfig::seed` through counter-derived ChaCha streams, making a
//! phase a pure function of (inputs, config).

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterKind, AdapterParams};
use crate::corpus::{TaggedSentence, TaskKind};
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::graph::{Graph, NodeId};
use crate::model::{forward, Backbone, ForwardOpts, HeadSel, LangMix};
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimKind {
    Sgd,
    AdaptiveMoments {
        #[serde(default = "default_beta1")]
        beta1: f32,
        #[serde(default = "default_beta2")]
        beta2: f32,
        #[serde(default = "default_eps")]
        eps: f32,
    },
}

fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_eps() -> f32 {
    1e-8
}

impl Default for OptimKind {
    fn default() -> Self {
        OptimKind::AdaptiveMoments {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    pub mask_rate: f32,
    pub optimizer: OptimKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            mask_rate: 0.15,
            optimizer: OptimKind::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!(
                "mask_rate {} must lie strictly between 0 and 1",
                self.mask_rate
            )));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// One structured log record per epoch and split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<f64>,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Plain SGD or bias-corrected adaptive moments over a fixed parameter list.
pub struct Optimizer {
    kind: OptimKind,
    lr: f32,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimKind, lr: f32, sizes: &[usize]) -> Self {
        let (m, v) = match kind {
            OptimKind::Sgd => (Vec::new(), Vec::new()),
            OptimKind::AdaptiveMoments { .. } => (
                sizes.iter().map(|&n| vec![0.0; n]).collect(),
                sizes.iter().map(|&n| vec![0.0; n]).collect(),
            ),
        };
        Optimizer {
            kind,
            lr,
            t: 0,
            m,
            v,
        }
    }

    /// Apply one update. `grads[i]` is the f64-accumulated gradient for
    /// `params[i]`; the two lists must align with the constructor's sizes.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), grads.len(), "optimizer: param/grad mismatch");
        self.t += 1;
        match self.kind {
            OptimKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, gv) in p.data.iter_mut().zip(g) {
                        *w -= self.lr * (*gv as f32);
                    }
                }
            }
            OptimKind::AdaptiveMoments { beta1, beta2, eps } => {
                let bc1 = 1.0 - (beta1 as f64).powi(self.t as i32);
                let bc2 = 1.0 - (beta2 as f64).powi(self.t as i32);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..p.data.len() {
                        let gv = g[j] as f32;
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                        let mhat = m[j] as f64 / bc1;
                        let vhat = v[j] as f64 / bc2;
                        p.data[j] -= (self.lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
                    }
                }
            }
        }
    }
}

/// f64 gradient accumulator across the sentences of a batch.
pub struct GradAccum {
    sums: Vec<Vec<f64>>,
}

impl GradAccum {
    pub fn new(sizes: &[usize]) -> Self {
        GradAccum {
            sums: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Add `scale * grad(ids[i])` into slot i, skipping absent gradients.
    pub fn add_scaled(&mut self, g: &Graph, ids: &[NodeId], scale: f64) {
        assert_eq!(ids.len(), self.sums.len(), "accumulator arity mismatch");
        for (sum, &id) in self.sums.iter_mut().zip(ids) {
            if let Some(grad) = g.grad(id) {
                for (a, b) in sum.iter_mut().zip(grad) {
                    *a += scale * (*b as f64);
                }
            }
        }
    }

    pub fn take(self) -> Vec<Vec<f64>> {
        self.sums
    }
}

/// Deterministic per-name seed derivation (FNV-1a folded into the base).
pub fn name_seed(base: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    base ^ h
}

/// Masked-LM view of one sentence: corrupted inputs plus (position, gold id)
/// prediction targets. May be empty for short sentences — callers skip those.
#[derive(Debug, Clone)]
pub struct MaskedExample {
    pub input_ids: Vec<usize>,
    pub targets: Vec<(usize, usize)>,
}

/// Standard masking scheme: each position is selected with `mask_rate`;
/// selected positions become the mask token 80% of the time, a random token
/// 10%, and stay unchanged 10%.
pub fn mask_tokens<R: Rng>(
    ids: &[usize],
    mask_rate: f32,
    vocab_size: usize,
    mask_id: usize,
    rng: &mut R,
) -> MaskedExample {
    let mut input_ids = ids.to_vec();
    let mut targets = Vec::new();
    for (i, &gold) in ids.iter().enumerate() {
        if rng.gen::<f32>() < mask_rate {
            targets.push((i, gold));
            let roll = rng.gen::<f32>();
            if roll < 0.8 {
                input_ids[i] = mask_id;
            } else if roll < 0.9 {
                input_ids[i] = rng.gen_range(0..vocab_size);
            }
        }
    }
    MaskedExample { input_ids, targets }
}

fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        out.push(start..end);
        start = end;
    }
    out
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Which parameter group one MLM training run updates.
enum MlmTarget<'a> {
    /// The whole backbone (bootstrap pretraining), no adapter in the stack.
    Backbone(&'a mut Backbone),
    /// One language adapter over a frozen backbone.
    Adapter(&'a Backbone, &'a mut AdapterParams),
}

/// Shared masked-LM loop for pretraining and adapter training.
fn run_mlm_training(
    mut target: MlmTarget,
    tok: &Tokenizer,
    corpus: &[Vec<String>],
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("masked-LM training corpus is empty".to_string()));
    }
    let sizes: Vec<usize> = match &target {
        MlmTarget::Backbone(m) => m.tensors().iter().map(|t| t.numel()).collect(),
        MlmTarget::Adapter(_, a) => a.tensors().iter().map(|t| t.numel()).collect(),
    };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &sizes);
    let mut logs = Vec::new();

    let encoded: Vec<Vec<usize>> = corpus.iter().map(|s| tok.encode(s).ids).collect();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let order = shuffled_indices(encoded.len(), name_seed(cfg.seed, "order") ^ epoch as u64);
        let mut mask_rng =
            ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, "mask") ^ epoch as u64);
        let mut epoch_loss = 0.0f64;
        let mut n_batches = 0usize;

        for range in batch_ranges(order.len(), cfg.batch_size) {
            let mut accum = GradAccum::new(&sizes);
            let mut batch_loss = 0.0f64;
            let mut contributing = 0usize;

            let batch: Vec<usize> = order[range].to_vec();
            for &si in &batch {
                let model: &Backbone = match &target {
                    MlmTarget::Backbone(m) => m,
                    MlmTarget::Adapter(m, _) => m,
                };
                let masked = mask_tokens(
                    &encoded[si],
                    cfg.mask_rate,
                    model.cfg.vocab_size,
                    tok.mask_id(),
                    &mut mask_rng,
                );
                if masked.targets.is_empty() {
                    continue;
                }
                let mut g = Graph::new();
                let opts = ForwardOpts {
                    mix: match &target {
                        MlmTarget::Backbone(_) => LangMix::None,
                        MlmTarget::Adapter(_, a) => LangMix::Single {
                            adapter: a,
                            trainable: true,
                        },
                    },
                    task: None,
                    head: HeadSel::Mlm,
                    backbone_trainable: matches!(target, MlmTarget::Backbone(_)),
                    task_head_trainable: false,
                };
                let handles = forward(&mut g, model, &masked.input_ids, &opts)?;
                let positions: Vec<usize> = masked.targets.iter().map(|t| t.0).collect();
                let golds: Vec<usize> = masked.targets.iter().map(|t| t.1).collect();
                let picked = g.gather(handles.logits, positions);
                let loss = g.cross_entropy(picked, golds);
                g.backward(loss)?;
                batch_loss += g.value(loss).data[0] as f64;
                contributing += 1;
                let ids = match &target {
                    MlmTarget::Backbone(_) => handles.backbone_nodes.ids(),
                    MlmTarget::Adapter(_, _) => handles.lang_nodes[0].ids(),
                };
                accum.add_scaled(&g, &ids, 1.0);
            }

            if contributing == 0 {
                continue;
            }
            let scale = 1.0 / contributing as f64;
            let mut grads = accum.take();
            for g in &mut grads {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            match &mut target {
                MlmTarget::Backbone(m) => opt.step(&mut m.tensors_mut(), &grads),
                MlmTarget::Adapter(_, a) => opt.step(&mut a.tensors_mut(), &grads),
            }
            epoch_loss += batch_loss * scale;
            n_batches += 1;
        }

        logs.push(EpochLog {
            epoch,
            split: "train".to_string(),
            loss: Some(if n_batches == 0 {
                0.0
            } else {
                epoch_loss / n_batches as f64
            }),
            metric: None,
            seconds: start.elapsed().as_secs_f64(),
            note: None,
        });
    }
    Ok(logs)
}

/// Bootstrap phase: masked-LM pretraining of the backbone itself on pooled
/// high-resource text. The result is frozen for every later phase.
pub fn pretrain_backbone(
    model: &mut Backbone,
    tok: &Tokenizer,
    corpus: &[Vec<String>],
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    run_mlm_training(MlmTarget::Backbone(model), tok, corpus, cfg)
}

/// Phase 1: train one language adapter with masked LM on unlabeled variety
/// text; the backbone stays frozen.
pub fn train_language_adapter(
    model: &Backbone,
    tok: &Tokenizer,
    corpus: &[Vec<String>],
    name: &str,
    cfg: &TrainConfig,
) -> Result<(AdapterParams, Vec<EpochLog>)> {
    let mut adapter = AdapterParams::new(
        AdapterKind::Language,
        name,
        &model.cfg,
        name_seed(cfg.seed, name),
    );
    let logs = run_mlm_training(MlmTarget::Adapter(model, &mut adapter), tok, corpus, cfg)?;
    Ok((adapter, logs))
}

/// Budget-limited variant: train on exactly the first `n` sentences of a
/// seeded shuffle, optionally warm-starting from a related adapter.
pub fn train_adapter_budgeted(
    model: &Backbone,
    tok: &Tokenizer,
    corpus: &[Vec<String>],
    name: &str,
    n: usize,
    warm_start: Option<&AdapterParams>,
    cfg: &TrainConfig,
) -> Result<(AdapterParams, Vec<EpochLog>)> {
    if n > corpus.len() {
        return Err(Error::Data(format!(
            "budget {n} exceeds corpus size {}",
            corpus.len()
        )));
    }
    if n == 0 {
        return match warm_start {
            Some(w) => {
                let mut a = w.clone();
                a.name = name.to_string();
                Ok((a, Vec::new()))
            }
            None => {
                let a = AdapterParams::new(
                    AdapterKind::Language,
                    name,
                    &model.cfg,
                    name_seed(cfg.seed, name),
                );
                let warning = EpochLog {
                    epoch: 0,
                    split: "warning".to_string(),
                    loss: None,
                    metric: None,
                    seconds: 0.0,
                    note: Some(
                        "budget 0 without warm start: returning the identity adapter".to_string(),
                    ),
                };
                Ok((a, vec![warning]))
            }
        };
    }
    let order = shuffled_indices(corpus.len(), name_seed(cfg.seed, "budget-slice"));
    let slice: Vec<Vec<String>> = order[..n].iter().map(|&i| corpus[i].clone()).collect();
    let mut adapter = match warm_start {
        Some(w) => {
            let mut a = w.clone();
            a.name = name.to_string();
            a
        }
        None => AdapterParams::new(
            AdapterKind::Language,
            name,
            &model.cfg,
            name_seed(cfg.seed, name),
        ),
    };
    let logs = run_mlm_training(MlmTarget::Adapter(model, &mut adapter), tok, &slice, cfg)?;
    Ok((adapter, logs))
}

/// Map tag strings to indices under a task's tag set.
pub fn tag_ids(task: TaskKind, tags: &[String]) -> Result<Vec<usize>> {
    let names = task.tag_names();
    tags.iter()
        .map(|t| {
            names
                .iter()
                .position(|n| n == t)
                .ok_or_else(|| Error::Data(format!("tag '{t}' not in task tag set")))
        })
        .collect()
}

/// Phase 2: train the task adapter and tag head on labeled source data,
/// stacked above the frozen source language adapter.
pub fn train_task_adapter(
    model: &mut Backbone,
    tok: &Tokenizer,
    corpus: &[TaggedSentence],
    src_adapter: &AdapterParams,
    task_kind: TaskKind,
    cfg: &TrainConfig,
) -> Result<(AdapterParams, Vec<EpochLog>)> {
    train_task_adapter_routed(
        model,
        tok,
        corpus,
        std::slice::from_ref(src_adapter),
        task_kind,
        cfg,
    )
}

/// Like [`train_task_adapter`], but each sentence is routed through either
/// one sampled language adapter or a sampled convex mixture of them (the
/// choice and the weights come from a seeded stream). The task adapter and
/// tag head then stay calibrated both for single-adapter inference and for
/// layer-wise adapter mixtures, so at test time prediction confidence
/// reflects how well the mix fits the input rather than which adapter the
/// head was fitted to.
pub fn train_task_adapter_routed(
    model: &mut Backbone,
    tok: &Tokenizer,
    corpus: &[TaggedSentence],
    lang_adapters: &[AdapterParams],
    task_kind: TaskKind,
    cfg: &TrainConfig,
) -> Result<(AdapterParams, Vec<EpochLog>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("task training corpus is empty".to_string()));
    }
    if lang_adapters.is_empty() {
        return Err(Error::Config(
            "task training needs at least one language adapter".to_string(),
        ));
    }
    let names = task_kind.tag_names();
    if names.len() != model.cfg.n_tags {
        return Err(Error::Config(format!(
            "task has {} tags but model is configured for n_tags {}",
            names.len(),
            model.cfg.n_tags
        )));
    }

    let mut task = AdapterParams::new(
        AdapterKind::Task,
        "task",
        &model.cfg,
        name_seed(cfg.seed, "task-adapter"),
    );
    let mut sizes: Vec<usize> = task.tensors().iter().map(|t| t.numel()).collect();
    sizes.push(model.task_w.numel());
    sizes.push(model.task_b.numel());
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &sizes);
    let mut logs = Vec::new();

    let prepared: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)> = corpus
        .iter()
        .map(|s| {
            let enc = tok.encode(&s.tokens);
            let ids = tag_ids(task_kind, &s.tags)?;
            Ok((enc.ids, enc.word_starts, ids))
        })
        .collect::<Result<_>>()?;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let order = shuffled_indices(prepared.len(), name_seed(cfg.seed, "task-order") ^ epoch as u64);
        let mut route_rng =
            ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, "task-route") ^ epoch as u64);
        let mut epoch_loss = 0.0f64;
        let mut n_batches = 0usize;

        for range in batch_ranges(order.len(), cfg.batch_size) {
            let mut accum = GradAccum::new(&sizes);
            let mut batch_loss = 0.0f64;
            let batch: Vec<usize> = order[range].to_vec();
            for &si in &batch {
                let (ids, starts, golds) = &prepared[si];
                // Half the sentences go through one sampled adapter (the
                // path single-adapter inference uses), half through a
                // Dirichlet(1) mixture (the path ensembled inference uses).
                // softmax(ln w) = w, so the logit row realises the sampled
                // weights exactly.
                let one_hot = lang_adapters.len() == 1 || route_rng.gen_bool(0.5);
                let route = route_rng.gen_range(0..lang_adapters.len());
                let draws: Vec<f32> = (0..lang_adapters.len())
                    .map(|_| -(1.0 - route_rng.gen::<f32>()).ln().max(1e-9))
                    .collect();
                let total: f32 = draws.iter().sum();
                let betas = vec![draws.iter().map(|d| (d / total).ln()).collect::<Vec<f32>>()];
                let mix = if one_hot {
                    LangMix::Single {
                        adapter: &lang_adapters[route],
                        trainable: false,
                    }
                } else {
                    LangMix::Mixed {
                        adapters: lang_adapters,
                        betas: &betas,
                        trainable_beta: false,
                    }
                };
                let mut g = Graph::new();
                let opts = ForwardOpts {
                    mix,
                    task: Some((&task, true)),
                    head: HeadSel::Task {
                        word_starts: starts,
                    },
                    backbone_trainable: false,
                    task_head_trainable: true,
                };
                let handles = forward(&mut g, model, ids, &opts)?;
                let loss = g.cross_entropy(handles.logits, golds.clone());
                g.backward(loss)?;
                batch_loss += g.value(loss).data[0] as f64;
                let mut ids_flat = handles.task_nodes.as_ref().expect("task nodes").ids();
                ids_flat.push(handles.backbone_nodes.task_w);
                ids_flat.push(handles.backbone_nodes.task_b);
                accum.add_scaled(&g, &ids_flat, 1.0);
            }
            let scale = 1.0 / batch.len() as f64;
            let mut grads = accum.take();
            for gv in &mut grads {
                for v in gv.iter_mut() {
                    *v *= scale;
                }
            }
            let mut params = task.tensors_mut();
            params.push(&mut model.task_w);
            params.push(&mut model.task_b);
            opt.step(&mut params, &grads);
            epoch_loss += batch_loss * scale;
            n_batches += 1;
        }

        logs.push(EpochLog {
            epoch,
            split: "train".to_string(),
            loss: Some(epoch_loss / n_batches.max(1) as f64),
            metric: None,
            seconds: start.elapsed().as_secs_f64(),
            note: None,
        });
    }
    Ok((task, logs))
}

/// Train the fusion attention on labeled source data; every adapter, the
/// task adapter, the head, and the backbone stay frozen.
pub fn train_fusion(
    model: &Backbone,
    tok: &Tokenizer,
    corpus: &[TaggedSentence],
    adapters: &[AdapterParams],
    task: &AdapterParams,
    task_kind: TaskKind,
    cfg: &TrainConfig,
) -> Result<(FusionParams, Vec<EpochLog>)> {
    cfg.validate()?;
    if adapters.len() < 2 {
        return Err(Error::Config(format!(
            "fusion needs at least 2 adapters, got {}",
            adapters.len()
        )));
    }
    if corpus.is_empty() {
        return Err(Error::Data("fusion training corpus is empty".to_string()));
    }
    let mut fusion = FusionParams::new(
        &model.cfg,
        adapters.len(),
        name_seed(cfg.seed, "fusion"),
    );
    let sizes: Vec<usize> = fusion.tensors().iter().map(|t| t.numel()).collect();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &sizes);
    let mut logs = Vec::new();

    let prepared: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)> = corpus
        .iter()
        .map(|s| {
            let enc = tok.encode(&s.tokens);
            let ids = tag_ids(task_kind, &s.tags)?;
            Ok((enc.ids, enc.word_starts, ids))
        })
        .collect::<Result<_>>()?;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let order =
            shuffled_indices(prepared.len(), name_seed(cfg.seed, "fusion-order") ^ epoch as u64);
        let mut epoch_loss = 0.0f64;
        let mut n_batches = 0usize;

        for range in batch_ranges(order.len(), cfg.batch_size) {
            let mut accum = GradAccum::new(&sizes);
            let mut batch_loss = 0.0f64;
            let batch: Vec<usize> = order[range].to_vec();
            for &si in &batch {
                let (ids, starts, golds) = &prepared[si];
                let mut g = Graph::new();
                let opts = ForwardOpts {
                    mix: LangMix::Fused {
                        adapters,
                        fusion: &fusion,
                        trainable_fusion: true,
                    },
                    task: Some((task, false)),
                    head: HeadSel::Task {
                        word_starts: starts,
                    },
                    backbone_trainable: false,
                    task_head_trainable: false,
                };
                let handles = forward(&mut g, model, ids, &opts)?;
                let loss = g.cross_entropy(handles.logits, golds.clone());
                g.backward(loss)?;
                batch_loss += g.value(loss).data[0] as f64;
                let fids = handles.fusion_nodes.as_ref().expect("fusion nodes").ids();
                accum.add_scaled(&g, &fids, 1.0);
            }
            let scale = 1.0 / batch.len() as f64;
            let mut grads = accum.take();
            for gv in &mut grads {
                for v in gv.iter_mut() {
                    *v *= scale;
                }
            }
            opt.step(&mut fusion.tensors_mut(), &grads);
            epoch_loss += batch_loss * scale;
            n_batches += 1;
        }

        logs.push(EpochLog {
            epoch,
            split: "train".to_string(),
            loss: Some(epoch_loss / n_batches.max(1) as f64),
            metric: None,
            seconds: start.elapsed().as_secs_f64(),
            note: None,
        });
    }
    Ok((fusion, logs))
}

/// Mean masked-LM cross entropy on a held-out corpus with deterministic
/// masking. Lower is better; used to compare adapters against the
/// adapter-free baseline and across training budgets.
pub fn mlm_loss(
    model: &Backbone,
    tok: &Tokenizer,
    adapter: Option<&AdapterParams>,
    corpus: &[Vec<String>],
    mask_rate: f32,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0f64;
    let mut n = 0usize;
    for sent in corpus {
        let ids = tok.encode(sent).ids;
        let masked = mask_tokens(&ids, mask_rate, model.cfg.vocab_size, tok.mask_id(), &mut rng);
        if masked.targets.is_empty() {
            continue;
        }
        let mut g = Graph::new();
        let opts = ForwardOpts {
            mix: match adapter {
                Some(a) => LangMix::Single {
                    adapter: a,
                    trainable: false,
                },
                None => LangMix::None,
            },
            task: None,
            head: HeadSel::Mlm,
            backbone_trainable: false,
            task_head_trainable: false,
        };
        let handles = forward(&mut g, model, &masked.input_ids, &opts)?;
        let positions: Vec<usize> = masked.targets.iter().map(|t| t.0).collect();
        let golds: Vec<usize> = masked.targets.iter().map(|t| t.1).collect();
        let picked = g.gather(handles.logits, positions);
        let loss = g.cross_entropy(picked, golds);
        total += g.value(loss).data[0] as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data(
            "mlm_loss: no sentence produced any masked position".to_string(),
        ));
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_labeled, generate_unlabeled, make_variety};
    use crate::metrics::token_accuracy;

    fn tiny_model(seed: u64) -> (Backbone, Tokenizer, Vec<Vec<String>>) {
        let spec = make_variety("syn", None, 0.0, 60, 5).unwrap();
        let corpus = generate_unlabeled(&spec, 120, 7);
        let tok = Tokenizer::build(&corpus, 256);
        let cfg = crate::model::ModelConfig {
            vocab_size: tok.vocab_size(),
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            d_adapter: 4,
            max_len: 32,
            n_tags: 8,
        };
        (Backbone::new(&cfg, seed).unwrap(), tok, corpus)
    }

    fn quick_cfg(epochs: usize, lr: f32, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            lr,
            seed,
            mask_rate: 0.15,
            optimizer: OptimKind::default(),
        }
    }

    #[test]
    fn masking_rate_and_split_match_configuration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids: Vec<usize> = (0..50_000).map(|i| 2 + (i % 40)).collect();
        let masked = mask_tokens(&ids, 0.15, 64, 0, &mut rng);
        let frac = masked.targets.len() as f64 / ids.len() as f64;
        assert!((frac - 0.15).abs() < 0.01, "masked fraction {frac}");
        let n_mask_tok = masked
            .targets
            .iter()
            .filter(|(p, _)| masked.input_ids[*p] == 0)
            .count();
        let share = n_mask_tok as f64 / masked.targets.len() as f64;
        assert!((share - 0.8).abs() < 0.02, "mask-token share {share}");
        let kept = masked
            .targets
            .iter()
            .filter(|(p, g)| masked.input_ids[*p] == *g)
            .count();
        let kept_share = kept as f64 / masked.targets.len() as f64;
        // 10% kept plus ~10%/vocab random collisions.
        assert!(kept_share > 0.07 && kept_share < 0.14, "kept share {kept_share}");
    }

    #[test]
    fn zero_epochs_returns_identity_adapter() {
        let (model, tok, corpus) = tiny_model(3);
        let cfg = quick_cfg(0, 1e-3, 11);
        let (adapter, logs) =
            train_language_adapter(&model, &tok, &corpus, "v", &cfg).unwrap();
        assert!(logs.is_empty());
        for l in &adapter.layers {
            assert!(l.up_w.data.iter().all(|v| *v == 0.0));
        }
        // Identity adapter leaves the MLM loss exactly at the baseline.
        let base = mlm_loss(&model, &tok, None, &corpus[..40], 0.15, 9).unwrap();
        let with = mlm_loss(&model, &tok, Some(&adapter), &corpus[..40], 0.15, 9).unwrap();
        assert_eq!(base, with);
    }

    #[test]
    fn adapter_training_reduces_mlm_loss_and_freezes_backbone() {
        let (mut model, tok, corpus) = tiny_model(3);
        let pre_cfg = quick_cfg(2, 3e-3, 5);
        pretrain_backbone(&mut model, &tok, &corpus, &pre_cfg).unwrap();

        let before = serde_json::to_vec(&model).unwrap();
        let cfg = quick_cfg(3, 3e-3, 6);
        let (adapter, logs) =
            train_language_adapter(&model, &tok, &corpus, "v", &cfg).unwrap();
        assert_eq!(serde_json::to_vec(&model).unwrap(), before, "backbone moved");
        assert_eq!(logs.len(), 3);

        let held_out = generate_unlabeled(&make_variety("syn", None, 0.0, 60, 5).unwrap(), 60, 99);
        let base = mlm_loss(&model, &tok, None, &held_out, 0.15, 4).unwrap();
        let tuned = mlm_loss(&model, &tok, Some(&adapter), &held_out, 0.15, 4).unwrap();
        assert!(
            tuned < base,
            "adapter did not improve held-out MLM loss: {tuned} vs {base}"
        );
    }

    #[test]
    fn training_is_deterministic_for_fixed_seed() {
        let (model, tok, corpus) = tiny_model(8);
        let cfg = quick_cfg(2, 1e-3, 21);
        let (a1, l1) = train_language_adapter(&model, &tok, &corpus, "v", &cfg).unwrap();
        let (a2, l2) = train_language_adapter(&model, &tok, &corpus, "v", &cfg).unwrap();
        assert_eq!(a1, a2);
        let losses1: Vec<f64> = l1.iter().filter_map(|l| l.loss).collect();
        let losses2: Vec<f64> = l2.iter().filter_map(|l| l.loss).collect();
        assert_eq!(losses1, losses2);
    }

    #[test]
    fn task_training_beats_majority_class_and_freezes_the_rest() {
        let spec = make_variety("syn", None, 0.0, 60, 5).unwrap();
        let unlabeled = generate_unlabeled(&spec, 150, 7);
        let labeled = generate_labeled(&spec, 150, TaskKind::Token, 8);
        let dev = generate_labeled(&spec, 60, TaskKind::Token, 9);
        let tok = Tokenizer::build(&unlabeled, 256);
        let mcfg = crate::model::ModelConfig {
            vocab_size: tok.vocab_size(),
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            d_adapter: 4,
            max_len: 32,
            n_tags: 8,
        };
        let mut model = Backbone::new(&mcfg, 3).unwrap();
        pretrain_backbone(&mut model, &tok, &unlabeled, &quick_cfg(2, 3e-3, 5)).unwrap();
        let (src, _) =
            train_language_adapter(&model, &tok, &unlabeled, "src", &quick_cfg(2, 3e-3, 6))
                .unwrap();

        let body_before = serde_json::to_vec(&model.layers).unwrap();
        let emb_before = model.tok_emb.clone();
        let src_before = src.clone();
        let (task, _) = train_task_adapter(
            &mut model,
            &tok,
            &labeled,
            &src,
            TaskKind::Token,
            &quick_cfg(8, 3e-3, 7),
        )
        .unwrap();
        assert_eq!(serde_json::to_vec(&model.layers).unwrap(), body_before);
        assert_eq!(model.tok_emb, emb_before);
        assert_eq!(src, src_before);

        // Majority-class baseline on dev.
        let mut counts = std::collections::BTreeMap::new();
        for s in &dev {
            for t in &s.tags {
                *counts.entry(t.clone()).or_insert(0usize) += 1;
            }
        }
        let total: usize = counts.values().sum();
        let majority = *counts.values().max().unwrap() as f64 / total as f64;

        // Greedy predictions.
        let mut preds = Vec::new();
        for s in &dev {
            let enc = tok.encode(&s.tokens);
            let mut g = Graph::new();
            let opts = ForwardOpts::infer(
                LangMix::Single {
                    adapter: &src,
                    trainable: false,
                },
                &task,
                &enc.word_starts,
            );
            let handles = forward(&mut g, &model, &enc.ids, &opts).unwrap();
            let logits = g.value(handles.logits);
            let names = TaskKind::Token.tag_names();
            let tags: Vec<String> = (0..logits.rows())
                .map(|r| {
                    let row = logits.row(r);
                    let best = (0..row.len())
                        .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                        .unwrap();
                    names[best].clone()
                })
                .collect();
            preds.push(TaggedSentence {
                tokens: s.tokens.clone(),
                tags,
            });
        }
        let acc = token_accuracy(&dev, &preds).unwrap();
        assert!(
            acc > majority,
            "dev accuracy {acc:.3} not above majority baseline {majority:.3}"
        );
    }

    #[test]
    fn tag_set_mismatch_is_config_error() {
        let (mut model, tok, _) = tiny_model(2);
        let spec = make_variety("syn", None, 0.0, 60, 5).unwrap();
        let labeled = generate_labeled(&spec, 10, TaskKind::Span, 3);
        let src = AdapterParams::new(AdapterKind::Language, "src", &model.cfg, 1);
        // Model says 8 tags; span task has 5.
        let err = train_task_adapter(
            &mut model,
            &tok,
            &labeled,
            &src,
            TaskKind::Span,
            &quick_cfg(1, 1e-3, 1),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn budgeted_zero_with_warm_start_returns_it_unchanged() {
        let (model, tok, corpus) = tiny_model(4);
        let (warm, _) =
            train_language_adapter(&model, &tok, &corpus, "warm", &quick_cfg(1, 1e-3, 2)).unwrap();
        let (out, logs) =
            train_adapter_budgeted(&model, &tok, &corpus, "w2", 0, Some(&warm), &quick_cfg(1, 1e-3, 2))
                .unwrap();
        assert!(logs.is_empty());
        assert_eq!(out.layers, warm.layers);

        let (_, warn_logs) =
            train_adapter_budgeted(&model, &tok, &corpus, "w3", 0, None, &quick_cfg(1, 1e-3, 2))
                .unwrap();
        assert_eq!(warn_logs.len(), 1);
        assert_eq!(warn_logs[0].split, "warning");

        assert!(matches!(
            train_adapter_budgeted(
                &model,
                &tok,
                &corpus,
                "w4",
                corpus.len() + 1,
                None,
                &quick_cfg(1, 1e-3, 2)
            ),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn budgeted_slice_is_seed_deterministic() {
        let (model, tok, corpus) = tiny_model(4);
        let cfg = quick_cfg(1, 1e-3, 77);
        let (a, _) = train_adapter_budgeted(&model, &tok, &corpus, "b", 30, None, &cfg).unwrap();
        let (b, _) = train_adapter_budgeted(&model, &tok, &corpus, "b", 30, None, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fusion_requires_two_adapters_and_freezes_them() {
        let (mut model, tok, corpus) = tiny_model(5);
        let spec = make_variety("syn", None, 0.0, 60, 5).unwrap();
        let labeled = generate_labeled(&spec, 40, TaskKind::Token, 3);
        pretrain_backbone(&mut model, &tok, &corpus, &quick_cfg(1, 3e-3, 5)).unwrap();
        let (a1, _) =
            train_language_adapter(&model, &tok, &corpus, "a1", &quick_cfg(1, 3e-3, 6)).unwrap();
        let (a2, _) =
            train_language_adapter(&model, &tok, &corpus, "a2", &quick_cfg(1, 3e-3, 7)).unwrap();
        let (task, _) = train_task_adapter(
            &mut model,
            &tok,
            &labeled,
            &a1,
            TaskKind::Token,
            &quick_cfg(2, 3e-3, 8),
        )
        .unwrap();

        let err = train_fusion(
            &model,
            &tok,
            &labeled,
            &[a1.clone()],
            &task,
            TaskKind::Token,
            &quick_cfg(1, 5e-5, 9),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));

        let frozen = (
            serde_json::to_vec(&model).unwrap(),
            a1.clone(),
            a2.clone(),
            task.clone(),
        );
        let adapters = [a1, a2];
        let (fusion, logs) = train_fusion(
            &model,
            &tok,
            &labeled,
            &adapters,
            &task,
            TaskKind::Token,
            &quick_cfg(2, 5e-5, 9),
        )
        .unwrap();
        assert_eq!(serde_json::to_vec(&model).unwrap(), frozen.0);
        assert_eq!(adapters[0], frozen.1);
        assert_eq!(adapters[1], frozen.2);
        assert_eq!(task, frozen.3);
        assert_eq!(fusion.n_adapters, 2);
        assert_eq!(logs.len(), 2);
    }
}
