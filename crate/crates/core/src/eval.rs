//! Experiment harness: evaluates transfer methods over a grid of test
//! varieties × methods × seeds, writes per-seed records to an append-only
//! results file (resumable), and provides throughput benchmarking, mixing-
//! weight statistics, and the batch-size sweep.
//!
//! A grid cell is a pure function of (artifacts, variety, method, seed,
//! options): test data is sampled from the variety spec with a seed-derived
//! stream, so identical inputs reproduce identical records byte-for-byte.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterParams;
use crate::corpus::{generate_labeled, generate_unlabeled, TaggedSentence, TaskKind, VarietySpec};
use crate::ensemble::{cl_adapt, emea_adapt, EmeaConfig, LanguageCombiner};
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::graph::Graph;
use crate::metrics::{span_f1, token_f1};
use crate::model::{forward, Backbone, ForwardOpts, LangMix};
use crate::tokenizer::Tokenizer;
use crate::train::{name_seed, train_adapter_budgeted, TrainConfig};

/// One transfer method of the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Source-language adapter alone.
    En,
    /// Best related-variety adapter, picked by held-out dev score.
    Related,
    /// Entropy fine-tuning of the source adapter's parameters per batch.
    Cl,
    /// Learned attention over adapter outputs.
    Fusion,
    /// Uniform average over the adapter ensemble.
    Ensemble,
    /// Entropy-minimized ensemble, one weight update per batch.
    EmeaS1,
    /// Entropy-minimized ensemble, ten weight updates per batch.
    EmeaS10,
    /// Fresh adapter trained on a budget of N unlabeled sentences.
    NewAdapter(usize),
}

impl Method {
    pub fn key(&self) -> String {
        match self {
            Method::En => "en".to_string(),
            Method::Related => "related".to_string(),
            Method::Cl => "cl".to_string(),
            Method::Fusion => "fusion".to_string(),
            Method::Ensemble => "ensemble".to_string(),
            Method::EmeaS1 => "emea-s1".to_string(),
            Method::EmeaS10 => "emea-s10".to_string(),
            Method::NewAdapter(n) => format!("new-adapter-{n}"),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        match s {
            "en" => Ok(Method::En),
            "related" => Ok(Method::Related),
            "cl" => Ok(Method::Cl),
            "fusion" => Ok(Method::Fusion),
            "ensemble" => Ok(Method::Ensemble),
            "emea-s1" => Ok(Method::EmeaS1),
            "emea-s10" => Ok(Method::EmeaS10),
            other => {
                if let Some(n) = other.strip_prefix("new-adapter-") {
                    let n: usize = n.parse().map_err(|_| {
                        Error::Usage(format!("bad budget in method '{other}'"))
                    })?;
                    return Ok(Method::NewAdapter(n));
                }
                Err(Error::Usage(format!(
                    "unknown method '{other}' (expected en, related, cl, fusion, ensemble, \
                     emea-s1, emea-s10, or new-adapter-N)"
                )))
            }
        }
    }
}

/// One result row: a single (variety, method, seed) cell, or the average
/// over seeds when `seed` is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variety: String,
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub metric_name: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub examples_per_second: Option<f64>,
    pub batch_size: usize,
    /// Per-adapter mean of the final mixing weights over batches
    /// (entropy-adapted ensembles only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_mean: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_std: Option<Vec<f64>>,
}

/// Trained artifacts every evaluation draws on. The adapter ensemble is the
/// source adapter followed by the related adapters, in that order.
pub struct EvalContext<'a> {
    pub model: &'a Backbone,
    pub tokenizer: &'a Tokenizer,
    pub src_adapter: &'a AdapterParams,
    pub related_adapters: &'a [AdapterParams],
    pub task: &'a AdapterParams,
    pub fusion: Option<&'a FusionParams>,
    pub task_kind: TaskKind,
}

impl<'a> EvalContext<'a> {
    /// The ensemble set: source first, then each related adapter.
    pub fn ensemble_set(&self) -> Vec<AdapterParams> {
        let mut set = vec![self.src_adapter.clone()];
        set.extend(self.related_adapters.iter().cloned());
        set
    }
}

/// Knobs of one grid evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridOptions {
    /// Test sentences sampled per (variety, seed) cell.
    pub n_test: usize,
    /// Dev sentences for picking the best related adapter.
    pub n_dev: usize,
    pub batch_size: usize,
    /// Base entropy-minimization settings; presets override `steps`.
    pub emea: EmeaConfig,
    pub cl_lr: f32,
    pub cl_steps: usize,
    /// Unlabeled pool size available to budget-trained adapters.
    pub budget_pool: usize,
    pub budget_train: TrainConfig,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            n_test: 48,
            n_dev: 24,
            batch_size: 4,
            emea: EmeaConfig::default(),
            cl_lr: 2e-5,
            cl_steps: 1,
            budget_pool: 2000,
            budget_train: TrainConfig {
                epochs: 2,
                batch_size: 8,
                lr: 3e-3,
                seed: 0,
                mask_rate: 0.15,
                optimizer: Default::default(),
            },
        }
    }
}

/// Encoded test corpus: gold sentences plus their id/word-start encodings.
/// Sentences longer than the model's window are cut at a word boundary;
/// predictions for the dropped words fall back to the first tag.
struct EncodedSet {
    gold: Vec<TaggedSentence>,
    ids: Vec<Vec<usize>>,
    starts: Vec<Vec<usize>>,
}

fn encode_set(tok: &Tokenizer, gold: Vec<TaggedSentence>, max_len: usize) -> EncodedSet {
    let (ids, starts) = gold
        .iter()
        .map(|s| {
            let e = tok.encode(&s.tokens);
            if e.ids.len() <= max_len {
                return (e.ids, e.word_starts);
            }
            let n = e.word_starts.len();
            let end =
                |i: usize| if i + 1 < n { e.word_starts[i + 1] } else { e.ids.len() };
            let keep = (0..n).take_while(|&i| end(i) <= max_len).count();
            let cut = if keep < n { e.word_starts[keep] } else { e.ids.len() };
            (e.ids[..cut].to_vec(), e.word_starts[..keep].to_vec())
        })
        .unzip();
    EncodedSet { gold, ids, starts }
}

/// Argmax tag predictions with a frozen mix — the plain inference path.
fn predict_plain(
    model: &Backbone,
    task: &AdapterParams,
    ids: &[Vec<usize>],
    starts: &[Vec<usize>],
    spec: &MixSpec<'_>,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(ids.len());
    for (sent_ids, sent_starts) in ids.iter().zip(starts) {
        let mix = match spec {
            MixSpec::Single(a) => LangMix::Single {
                adapter: a,
                trainable: false,
            },
            MixSpec::Uniform { adapters, betas } => LangMix::Mixed {
                adapters,
                betas,
                trainable_beta: false,
            },
            MixSpec::Fused { adapters, fusion } => LangMix::Fused {
                adapters,
                fusion,
                trainable_fusion: false,
            },
        };
        let mut g = Graph::new();
        let opts = ForwardOpts::infer(mix, task, sent_starts);
        let handles = forward(&mut g, model, sent_ids, &opts)?;
        let logits = g.value(handles.logits);
        let tags: Vec<usize> = (0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                (0..row.len())
                    .max_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("finite logits"))
                    .expect("non-empty row")
            })
            .collect();
        out.push(tags);
    }
    Ok(out)
}

/// Borrow bundle for one plain forward pass.
enum MixSpec<'a> {
    Single(&'a AdapterParams),
    Uniform {
        adapters: &'a [AdapterParams],
        betas: &'a [Vec<f32>],
    },
    Fused {
        adapters: &'a [AdapterParams],
        fusion: &'a FusionParams,
    },
}

/// Turn per-word tag indices into sentences for the metric functions.
/// Words lost to window truncation get the first tag (the outside tag).
fn to_tagged(gold: &[TaggedSentence], preds: &[Vec<usize>], kind: TaskKind) -> Vec<TaggedSentence> {
    let names = kind.tag_names();
    gold.iter()
        .zip(preds)
        .map(|(g, p)| TaggedSentence {
            tokens: g.tokens.clone(),
            tags: (0..g.tokens.len())
                .map(|i| names[p.get(i).copied().unwrap_or(0)].clone())
                .collect(),
        })
        .collect()
}

fn metric_name_for(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Span => "span_f1",
        TaskKind::Token => "token_f1",
    }
}

fn score(kind: TaskKind, gold: &[TaggedSentence], pred: &[TaggedSentence]) -> Result<f64> {
    match kind {
        TaskKind::Span => span_f1(gold, pred),
        TaskKind::Token => token_f1(gold, pred),
    }
}

/// Pick the related adapter with the best dev score on this variety.
/// Selection is independent of the evaluation seed (fixed dev sample).
pub fn select_related(
    ctx: &EvalContext,
    variety: &VarietySpec,
    n_dev: usize,
) -> Result<usize> {
    if ctx.related_adapters.is_empty() {
        return Err(Error::MissingArtifact(
            "no related language adapters available for method 'related'".to_string(),
        ));
    }
    let dev = generate_labeled(
        variety,
        n_dev,
        ctx.task_kind,
        name_seed(0x0DE5, &format!("dev:{}", variety.name)),
    );
    let enc = encode_set(ctx.tokenizer, dev, ctx.model.cfg.max_len);
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, adapter) in ctx.related_adapters.iter().enumerate() {
        let preds = predict_plain(ctx.model, ctx.task, &enc.ids, &enc.starts, &MixSpec::Single(adapter))?;
        let v = score(
            ctx.task_kind,
            &enc.gold,
            &to_tagged(&enc.gold, &preds, ctx.task_kind),
        )?;
        if v > best.1 {
            best = (i, v);
        }
    }
    Ok(best.0)
}

/// Per-batch mixing weights collected during an entropy-adapted run.
fn alpha_summary(alphas: &[Vec<f32>]) -> (Vec<f64>, Vec<f64>) {
    if alphas.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let r = alphas[0].len();
    let n = alphas.len() as f64;
    let mut mean = vec![0.0f64; r];
    for a in alphas {
        for (m, v) in mean.iter_mut().zip(a) {
            *m += *v as f64 / n;
        }
    }
    let mut var = vec![0.0f64; r];
    for a in alphas {
        for ((v, m), x) in var.iter_mut().zip(&mean).zip(a) {
            let d = *x as f64 - *m;
            *v += d * d / n;
        }
    }
    (mean, var.iter().map(|v| v.sqrt()).collect())
}

/// Evaluate one method on an encoded test set. Returns the metric value and,
/// for entropy-adapted ensembles, the per-batch final weights.
fn evaluate_method(
    ctx: &EvalContext,
    method: Method,
    variety: &VarietySpec,
    enc: &EncodedSet,
    seed: u64,
    opts: &GridOptions,
) -> Result<(f64, Option<Vec<Vec<f32>>>)> {
    let bs = opts.batch_size.max(1);
    let preds_and_alphas: (Vec<Vec<usize>>, Option<Vec<Vec<f32>>>) = match method {
        Method::En => (
            predict_plain(ctx.model, ctx.task, &enc.ids, &enc.starts, &MixSpec::Single(ctx.src_adapter))?,
            None,
        ),
        Method::Related => {
            let idx = select_related(ctx, variety, opts.n_dev)?;
            let adapter = &ctx.related_adapters[idx];
            (
                predict_plain(ctx.model, ctx.task, &enc.ids, &enc.starts, &MixSpec::Single(adapter))?,
                None,
            )
        }
        Method::NewAdapter(n) => {
            let pool = generate_unlabeled(
                variety,
                opts.budget_pool.max(n),
                name_seed(seed, &format!("budget-pool:{}", variety.name)),
            );
            let cfg = TrainConfig {
                seed: name_seed(seed, "budget-train"),
                ..opts.budget_train
            };
            let (adapter, _) = train_adapter_budgeted(
                ctx.model,
                ctx.tokenizer,
                &pool,
                &format!("budget-{n}"),
                n,
                None,
                &cfg,
            )?;
            (
                predict_plain(ctx.model, ctx.task, &enc.ids, &enc.starts, &MixSpec::Single(&adapter))?,
                None,
            )
        }
        Method::Cl => {
            let mut preds = Vec::new();
            for (ids, starts) in enc.ids.chunks(bs).zip(enc.starts.chunks(bs)) {
                let out = cl_adapt(
                    ctx.model,
                    ids,
                    starts,
                    ctx.src_adapter,
                    ctx.task,
                    opts.cl_lr,
                    opts.cl_steps,
                )?;
                preds.extend(out.predictions);
            }
            (preds, None)
        }
        Method::Fusion => {
            let fusion = ctx.fusion.ok_or_else(|| {
                Error::MissingArtifact(
                    "fusion parameters not loaded (run fusion training first)".to_string(),
                )
            })?;
            let adapters = ctx.ensemble_set();
            (
                predict_plain(
                    ctx.model,
                    ctx.task,
                    &enc.ids,
                    &enc.starts,
                    &MixSpec::Fused {
                        adapters: &adapters,
                        fusion,
                    },
                )?,
                None,
            )
        }
        Method::Ensemble => {
            let adapters = ctx.ensemble_set();
            let betas = vec![vec![0.0f32; adapters.len()]];
            (
                predict_plain(
                    ctx.model,
                    ctx.task,
                    &enc.ids,
                    &enc.starts,
                    &MixSpec::Uniform {
                        adapters: &adapters,
                        betas: &betas,
                    },
                )?,
                None,
            )
        }
        Method::EmeaS1 | Method::EmeaS10 => {
            let cfg = EmeaConfig {
                steps: if method == Method::EmeaS1 { 1 } else { 10 },
                ..opts.emea
            };
            let (preds, alphas) = emea_over_batches(ctx, enc, bs, &cfg)?;
            (preds, Some(alphas))
        }
    };
    let (preds, alphas) = preds_and_alphas;
    let value = score(
        ctx.task_kind,
        &enc.gold,
        &to_tagged(&enc.gold, &preds, ctx.task_kind),
    )?;
    Ok((value, alphas))
}

/// Run entropy-minimized mixing batch by batch; weights reset per batch.
fn emea_over_batches(
    ctx: &EvalContext,
    enc: &EncodedSet,
    batch_size: usize,
    cfg: &EmeaConfig,
) -> Result<(Vec<Vec<usize>>, Vec<Vec<f32>>)> {
    let mut combiner = LanguageCombiner::weighted(ctx.ensemble_set())?;
    let mut preds = Vec::new();
    let mut alphas = Vec::new();
    for (ids, starts) in enc.ids.chunks(batch_size).zip(enc.starts.chunks(batch_size)) {
        let out = emea_adapt(ctx.model, ids, starts, &mut combiner, ctx.task, cfg)?;
        preds.extend(out.predictions);
        alphas.push(out.alpha);
    }
    Ok((preds, alphas))
}

/// Evaluate one grid cell: sample this seed's test set from the variety and
/// score the method on it.
pub fn evaluate_cell(
    ctx: &EvalContext,
    variety: &VarietySpec,
    method: Method,
    seed: u64,
    opts: &GridOptions,
) -> Result<RunRecord> {
    let data_seed = name_seed(seed, &format!("test:{}", variety.name));
    let gold = generate_labeled(variety, opts.n_test, ctx.task_kind, data_seed);
    let enc = encode_set(ctx.tokenizer, gold, ctx.model.cfg.max_len);
    let (value, alphas) = evaluate_method(ctx, method, variety, &enc, seed, opts)?;
    let (alpha_mean, alpha_std) = match &alphas {
        Some(a) => {
            let (m, s) = alpha_summary(a);
            (Some(m), Some(s))
        }
        None => (None, None),
    };
    Ok(RunRecord {
        variety: variety.name.clone(),
        method: method.key(),
        seed: Some(seed),
        metric_name: metric_name_for(ctx.task_kind).to_string(),
        value,
        examples_per_second: None,
        batch_size: opts.batch_size,
        alpha_mean,
        alpha_std,
    })
}

/// Parse a results file: one JSON record per line; `#` lines are headers.
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let rec: RunRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Append records as JSON lines.
pub fn append_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Contract(format!("record serialization failed: {e}")))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Average per-seed rows into one row per (variety, method, metric,
/// batch size) group; mixing-weight statistics are pooled over the group.
pub fn average_records(per_seed: &[RunRecord]) -> Vec<RunRecord> {
    let mut groups: BTreeMap<(String, String, String, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in per_seed.iter().filter(|r| r.seed.is_some()) {
        groups
            .entry((
                r.variety.clone(),
                r.method.clone(),
                r.metric_name.clone(),
                r.batch_size,
            ))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((variety, method, metric_name, batch_size), rows)| {
            let n = rows.len() as f64;
            let value = rows.iter().map(|r| r.value).sum::<f64>() / n;
            let stats = alpha_stats(rows.iter().map(|r| (*r).clone()).collect::<Vec<_>>().as_slice());
            let (alpha_mean, alpha_std) = if stats.n_records > 0 {
                (Some(stats.mean), Some(stats.std))
            } else {
                (None, None)
            };
            RunRecord {
                variety,
                method,
                seed: None,
                metric_name,
                value,
                examples_per_second: None,
                batch_size,
                alpha_mean,
                alpha_std,
            }
        })
        .collect()
}

/// Evaluate every (variety × method × seed) cell, resuming from whatever the
/// results file already holds. Returns all per-seed records plus one average
/// per cell group.
pub fn run_grid(
    ctx: &EvalContext,
    varieties: &[VarietySpec],
    methods: &[Method],
    seeds: &[u64],
    opts: &GridOptions,
    results_path: &Path,
) -> Result<Vec<RunRecord>> {
    let existing = read_records(results_path)?;
    let have: std::collections::HashSet<(String, String, Option<u64>, usize)> = existing
        .iter()
        .map(|r| (r.variety.clone(), r.method.clone(), r.seed, r.batch_size))
        .collect();

    let mut per_seed: Vec<RunRecord> = existing
        .into_iter()
        .filter(|r| r.seed.is_some())
        .collect();
    let mut fresh = Vec::new();
    for variety in varieties {
        for method in methods {
            for &seed in seeds {
                let key = (
                    variety.name.clone(),
                    method.key(),
                    Some(seed),
                    opts.batch_size,
                );
                if have.contains(&key) {
                    continue;
                }
                let rec = evaluate_cell(ctx, variety, *method, seed, opts)?;
                fresh.push(rec.clone());
                per_seed.push(rec);
            }
        }
    }
    append_records(results_path, &fresh)?;

    let mut out = per_seed.clone();
    out.extend(average_records(&per_seed));
    Ok(out)
}

/// Pooled per-adapter mean and standard deviation of the final mixing
/// weights across records (each record summarizes the batches of one seed;
/// batch counts are equal across records of one grid, so pooling group
/// statistics reproduces the all-batch statistics).
pub struct AlphaStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// How many records carried weight statistics; 0 means empty result.
    pub n_records: usize,
}

pub fn alpha_stats(records: &[RunRecord]) -> AlphaStats {
    let with: Vec<&RunRecord> = records
        .iter()
        .filter(|r| r.alpha_mean.is_some() && r.alpha_std.is_some())
        .collect();
    if with.is_empty() {
        return AlphaStats {
            mean: Vec::new(),
            std: Vec::new(),
            n_records: 0,
        };
    }
    let r = with[0].alpha_mean.as_ref().expect("filtered").len();
    let n = with.len() as f64;
    let mut mean = vec![0.0f64; r];
    let mut second = vec![0.0f64; r]; // E[x^2] pooled from group mean/std
    for rec in &with {
        let m = rec.alpha_mean.as_ref().expect("filtered");
        let s = rec.alpha_std.as_ref().expect("filtered");
        for i in 0..r {
            mean[i] += m[i] / n;
            second[i] += (s[i] * s[i] + m[i] * m[i]) / n;
        }
    }
    let std = second
        .iter()
        .zip(&mean)
        .map(|(e2, m)| (e2 - m * m).max(0.0).sqrt())
        .collect();
    AlphaStats {
        mean,
        std,
        n_records: with.len(),
    }
}

/// Wall-clock examples/second of one method, excluding `warmup` batches.
pub fn bench_throughput(
    ctx: &EvalContext,
    variety: &VarietySpec,
    method: Method,
    batch_size: usize,
    n_batches: usize,
    warmup: usize,
    opts: &GridOptions,
) -> Result<f64> {
    if n_batches == 0 {
        return Err(Error::Config("bench needs n_batches >= 1".to_string()));
    }
    if batch_size == 0 {
        return Err(Error::Config("bench needs batch_size >= 1".to_string()));
    }
    let total = (warmup + n_batches) * batch_size;
    let gold = generate_labeled(variety, total, ctx.task_kind, name_seed(7, "bench"));
    let enc = encode_set(ctx.tokenizer, gold, ctx.model.cfg.max_len);

    let run_batch = |lo: usize, hi: usize| -> Result<()> {
        let ids = &enc.ids[lo..hi];
        let starts = &enc.starts[lo..hi];
        match method {
            Method::En => {
                predict_plain(ctx.model, ctx.task, ids, starts, &MixSpec::Single(ctx.src_adapter))?;
            }
            Method::Ensemble => {
                let adapters = ctx.ensemble_set();
                let betas = vec![vec![0.0f32; adapters.len()]];
                predict_plain(
                    ctx.model,
                    ctx.task,
                    ids,
                    starts,
                    &MixSpec::Uniform {
                        adapters: &adapters,
                        betas: &betas,
                    },
                )?;
            }
            Method::EmeaS1 | Method::EmeaS10 => {
                let cfg = EmeaConfig {
                    steps: if method == Method::EmeaS1 { 1 } else { 10 },
                    ..opts.emea
                };
                let mut c = LanguageCombiner::weighted(ctx.ensemble_set())?;
                emea_adapt(ctx.model, ids, starts, &mut c, ctx.task, &cfg)?;
            }
            Method::Cl => {
                cl_adapt(
                    ctx.model,
                    ids,
                    starts,
                    ctx.src_adapter,
                    ctx.task,
                    opts.cl_lr,
                    opts.cl_steps,
                )?;
            }
            Method::Fusion => {
                let fusion = ctx.fusion.ok_or_else(|| {
                    Error::MissingArtifact("fusion parameters not loaded".to_string())
                })?;
                let adapters = ctx.ensemble_set();
                predict_plain(
                    ctx.model,
                    ctx.task,
                    ids,
                    starts,
                    &MixSpec::Fused {
                        adapters: &adapters,
                        fusion,
                    },
                )?;
            }
            Method::Related | Method::NewAdapter(_) => {
                return Err(Error::Usage(format!(
                    "method '{}' has no dedicated inference path to benchmark; \
                     its cost equals 'en'",
                    method.key()
                )));
            }
        }
        Ok(())
    };

    for b in 0..warmup {
        run_batch(b * batch_size, (b + 1) * batch_size)?;
    }
    let start = Instant::now();
    for b in warmup..warmup + n_batches {
        run_batch(b * batch_size, (b + 1) * batch_size)?;
    }
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    Ok((n_batches * batch_size) as f64 / secs)
}

/// Evaluate the ten-step entropy-adapted ensemble at several batch sizes.
/// Returns per-seed rows plus one average per size.
pub fn batch_size_sweep(
    ctx: &EvalContext,
    variety: &VarietySpec,
    seeds: &[u64],
    sizes: &[usize],
    opts: &GridOptions,
) -> Result<Vec<RunRecord>> {
    let mut per_seed = Vec::new();
    for &size in sizes {
        let sized = GridOptions {
            batch_size: size,
            ..opts.clone()
        };
        for &seed in seeds {
            per_seed.push(evaluate_cell(ctx, variety, Method::EmeaS10, seed, &sized)?);
        }
    }
    let mut out = per_seed.clone();
    out.extend(average_records(&per_seed));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterKind;
    use crate::corpus::make_variety;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        model: Backbone,
        tok: Tokenizer,
        src: AdapterParams,
        related: Vec<AdapterParams>,
        task: AdapterParams,
        fusion: FusionParams,
        variety: VarietySpec,
    }

    fn fixture() -> Fixture {
        let variety = make_variety("v", None, 0.2, 50, 3).unwrap();
        let root = make_variety("root", None, 0.0, 50, 3).unwrap();
        let corpus = generate_unlabeled(&root, 80, 5);
        let tok = Tokenizer::build(&corpus, 200);
        let cfg = ModelConfig {
            vocab_size: tok.vocab_size(),
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            d_adapter: 4,
            max_len: 128,
            n_tags: 5,
        };
        let model = Backbone::new(&cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut mk = |name: &str, kind| {
            let mut a = AdapterParams::new(kind, name, &cfg, 1);
            for l in &mut a.layers {
                for v in l.up_w.data.iter_mut() {
                    *v = rng.gen_range(-0.3..0.3);
                }
            }
            a
        };
        Fixture {
            src: mk("src", AdapterKind::Language),
            related: vec![
                mk("r1", AdapterKind::Language),
                mk("r2", AdapterKind::Language),
            ],
            task: mk("task", AdapterKind::Task),
            fusion: FusionParams::new(&cfg, 3, 2),
            model,
            tok,
            variety,
        }
    }

    fn ctx(f: &Fixture) -> EvalContext<'_> {
        EvalContext {
            model: &f.model,
            tokenizer: &f.tok,
            src_adapter: &f.src,
            related_adapters: &f.related,
            task: &f.task,
            fusion: Some(&f.fusion),
            task_kind: TaskKind::Span,
        }
    }

    fn quick_opts() -> GridOptions {
        GridOptions {
            n_test: 8,
            n_dev: 6,
            batch_size: 4,
            ..Default::default()
        }
    }

    #[test]
    fn method_keys_round_trip() {
        for m in [
            Method::En,
            Method::Related,
            Method::Cl,
            Method::Fusion,
            Method::Ensemble,
            Method::EmeaS1,
            Method::EmeaS10,
            Method::NewAdapter(1000),
        ] {
            assert_eq!(m.key().parse::<Method>().unwrap(), m);
        }
        assert!(matches!(
            "bogus".parse::<Method>(),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn cell_is_deterministic_and_value_in_range() {
        let f = fixture();
        let c = ctx(&f);
        let opts = quick_opts();
        let a = evaluate_cell(&c, &f.variety, Method::EmeaS1, 1, &opts).unwrap();
        let b = evaluate_cell(&c, &f.variety, Method::EmeaS1, 1, &opts).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert!((0.0..=1.0).contains(&a.value));
        let mean = a.alpha_mean.unwrap();
        let total: f64 = mean.iter().sum();
        assert!((total - 1.0).abs() < 1e-3, "alpha mean sums to {total}");
    }

    #[test]
    fn ensemble_equals_emea_with_zero_steps() {
        let f = fixture();
        let c = ctx(&f);
        let opts = quick_opts();
        let ens = evaluate_cell(&c, &f.variety, Method::Ensemble, 2, &opts).unwrap();

        // Zero-step entropy adaptation must predict exactly like averaging.
        let gold = generate_labeled(
            &f.variety,
            opts.n_test,
            TaskKind::Span,
            name_seed(2, &format!("test:{}", f.variety.name)),
        );
        let enc = encode_set(&f.tok, gold, f.model.cfg.max_len);
        let cfg = EmeaConfig {
            steps: 0,
            ..opts.emea
        };
        let (preds, _) = emea_over_batches(&c, &enc, opts.batch_size, &cfg).unwrap();
        let value = score(
            TaskKind::Span,
            &enc.gold,
            &to_tagged(&enc.gold, &preds, TaskKind::Span),
        )
        .unwrap();
        assert!((value - ens.value).abs() < 1e-6);
    }

    #[test]
    fn grid_is_resumable_and_counts_match() {
        let f = fixture();
        let c = ctx(&f);
        let opts = quick_opts();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.jsonl");
        let methods = [Method::En, Method::Ensemble];
        let seeds = [1, 2];

        let all = run_grid(&c, &[f.variety.clone()], &methods, &seeds, &opts, &path).unwrap();
        // 1 variety x 2 methods x 2 seeds per-seed rows + 2 averages.
        assert_eq!(all.len(), 4 + 2);
        assert_eq!(all.iter().filter(|r| r.seed.is_none()).count(), 2);
        let bytes = std::fs::read(&path).unwrap();

        // Re-running adds nothing and leaves the file byte-identical.
        let again = run_grid(&c, &[f.variety.clone()], &methods, &seeds, &opts, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        assert_eq!(all.len(), again.len());

        // Dropping the tail and resuming recreates the identical file.
        let text = String::from_utf8(bytes.clone()).unwrap();
        let keep: Vec<&str> = text.lines().take(2).collect();
        std::fs::write(&path, format!("{}\n", keep.join("\n"))).unwrap();
        run_grid(&c, &[f.variety.clone()], &methods, &seeds, &opts, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn averages_are_exact_means_of_per_seed_rows() {
        let mk = |seed: u64, value: f64| RunRecord {
            variety: "v".to_string(),
            method: "en".to_string(),
            seed: Some(seed),
            metric_name: "span_f1".to_string(),
            value,
            examples_per_second: None,
            batch_size: 4,
            alpha_mean: None,
            alpha_std: None,
        };
        let rows = [mk(1, 0.25), mk(2, 0.5), mk(3, 0.75)];
        let avg = average_records(&rows);
        assert_eq!(avg.len(), 1);
        assert!((avg[0].value - 0.5).abs() < 1e-12);
        assert_eq!(avg[0].seed, None);
    }

    #[test]
    fn alpha_stats_uniform_means_and_zero_std() {
        let rec = |m: Vec<f64>, s: Vec<f64>| RunRecord {
            variety: "v".to_string(),
            method: "emea-s1".to_string(),
            seed: Some(1),
            metric_name: "span_f1".to_string(),
            value: 0.5,
            examples_per_second: None,
            batch_size: 4,
            alpha_mean: Some(m),
            alpha_std: Some(s),
        };
        let uniform = vec![rec(vec![0.5, 0.5], vec![0.0, 0.0]); 3];
        let stats = alpha_stats(&uniform);
        assert_eq!(stats.n_records, 3);
        assert_eq!(stats.mean, vec![0.5, 0.5]);
        assert_eq!(stats.std, vec![0.0, 0.0]);
        let sum: f64 = stats.mean.iter().sum();
        assert!((sum - 1.0).abs() < 1e-3);

        let none = alpha_stats(&[]);
        assert_eq!(none.n_records, 0);
        assert!(none.mean.is_empty());
    }

    #[test]
    fn bench_rejects_zero_batches_and_missing_fusion_is_artifact_error() {
        let f = fixture();
        let c = ctx(&f);
        let opts = quick_opts();
        assert!(matches!(
            bench_throughput(&c, &f.variety, Method::En, 2, 0, 0, &opts),
            Err(Error::Config(_))
        ));

        let no_fusion = EvalContext {
            fusion: None,
            ..ctx(&f)
        };
        let err = evaluate_cell(&no_fusion, &f.variety, Method::Fusion, 1, &opts).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)), "{err}");
    }

    #[test]
    fn related_selection_is_deterministic_and_in_range() {
        let f = fixture();
        let c = ctx(&f);
        let i = select_related(&c, &f.variety, 6).unwrap();
        let j = select_related(&c, &f.variety, 6).unwrap();
        assert_eq!(i, j);
        assert!(i < f.related.len());

        let no_related = EvalContext {
            related_adapters: &[],
            ..ctx(&f)
        };
        assert!(matches!(
            select_related(&no_related, &f.variety, 6),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn sweep_produces_one_average_per_size() {
        let f = fixture();
        let c = ctx(&f);
        let opts = GridOptions {
            n_test: 4,
            ..quick_opts()
        };
        let recs = batch_size_sweep(&c, &f.variety, &[1, 2], &[1, 4], &opts).unwrap();
        // 2 sizes x 2 seeds per-seed + 2 averages.
        assert_eq!(recs.len(), 6);
        let averages: Vec<&RunRecord> = recs.iter().filter(|r| r.seed.is_none()).collect();
        assert_eq!(averages.len(), 2);
        let sizes: Vec<usize> = averages.iter().map(|r| r.batch_size).collect();
        assert_eq!(sizes, vec![1, 4]);
    }
}
