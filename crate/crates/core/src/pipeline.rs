//! End-to-end orchestration of one experiment: generate corpora, pretrain
//! the backbone, train the language adapters, the task adapter, and the
//! fusion layer, then evaluate. Each phase reads its prerequisites from the
//! checkpoint directory and writes one artifact, so phases can run as
//! separate processes and a missing prerequisite is reported by file name.

use std::path::PathBuf;

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, VarietyConfig};
use crate::conll::{read_column_file, write_column_file};
use crate::corpus::{generate_labeled, generate_unlabeled, make_variety, VarietySpec};
use crate::ensemble::EmeaConfig;
use crate::error::{Error, Result};
use crate::eval::{
    self, average_records, EvalContext, GridOptions, Method, RunRecord,
};
use crate::metrics::{span_f1, token_f1};
use crate::model::Backbone;
use crate::report::ReportTable;
use crate::tokenizer::Tokenizer;
use crate::train::{
    self, name_seed, pretrain_backbone, train_language_adapter, EpochLog, TrainConfig,
};

pub const BACKBONE_CKPT: &str = "backbone.ckpt";
pub const LM_ADAPTERS_CKPT: &str = "lm-adapters.ckpt";
pub const TASK_CKPT: &str = "task.ckpt";
pub const FUSION_CKPT: &str = "fusion.ckpt";

/// What one phase produced (or found already in place).
#[derive(Debug)]
pub struct PhaseOutcome {
    pub artifact: PathBuf,
    /// True when the artifact existed and the phase was not rerun.
    pub skipped: bool,
    pub logs: Vec<EpochLog>,
}

/// The standard method comparison, in table order.
pub fn standard_methods() -> Vec<Method> {
    vec![
        Method::En,
        Method::Related,
        Method::Cl,
        Method::Fusion,
        Method::Ensemble,
        Method::EmeaS1,
        Method::EmeaS10,
    ]
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Pipeline> {
        cfg.validate()?;
        Ok(Pipeline { cfg })
    }

    /// Realize the generator spec of a configured variety.
    pub fn variety_spec(&self, vc: &VarietyConfig) -> Result<VarietySpec> {
        let c = &self.cfg.continuum;
        let parent = if vc.name == c.source.name {
            None
        } else {
            Some(c.source.name.as_str())
        };
        make_variety(&vc.name, parent, vc.divergence, c.vocab_size, c.root_seed)
    }

    pub fn find_variety(&self, name: &str) -> Result<VarietyConfig> {
        let c = &self.cfg.continuum;
        std::iter::once(&c.source)
            .chain(&c.related)
            .chain(&c.targets)
            .find(|v| v.name == name)
            .cloned()
            .ok_or_else(|| {
                Error::Config(format!("variety '{name}' is not in the continuum config"))
            })
    }

    /// Varieties that get their own language adapter: source then related.
    pub fn adapter_varieties(&self) -> Vec<VarietyConfig> {
        let c = &self.cfg.continuum;
        std::iter::once(c.source.clone()).chain(c.related.iter().cloned()).collect()
    }

    fn unlabeled_path(&self, name: &str) -> PathBuf {
        self.cfg.paths.corpora_dir().join(format!("{name}.txt"))
    }

    fn labeled_path(&self) -> PathBuf {
        self.cfg
            .paths
            .corpora_dir()
            .join(format!("{}-labeled.tsv", self.cfg.continuum.source.name))
    }

    fn ckpt_path(&self, file: &str) -> PathBuf {
        self.cfg.paths.checkpoints_dir().join(file)
    }

    /// Generate and write the training corpora: unlabeled text for the
    /// source and each related variety, labeled text for the source.
    pub fn gen_data(&self, force: bool) -> Result<Vec<(PathBuf, bool)>> {
        let dir = self.cfg.paths.corpora_dir();
        std::fs::create_dir_all(&dir)?;
        let c = &self.cfg.continuum;
        let mut written = Vec::new();

        for vc in self.adapter_varieties() {
            let path = self.unlabeled_path(&vc.name);
            if path.exists() && !force {
                written.push((path, true));
                continue;
            }
            let spec = self.variety_spec(&vc)?;
            let sentences = generate_unlabeled(
                &spec,
                c.unlabeled_sentences,
                name_seed(c.root_seed, &format!("unlabeled:{}", vc.name)),
            );
            let text: String = sentences
                .iter()
                .map(|s| s.join(" "))
                .collect::<Vec<_>>()
                .join("\n");
            std::fs::write(&path, text + "\n")?;
            written.push((path, false));
        }

        let labeled = self.labeled_path();
        if labeled.exists() && !force {
            written.push((labeled, true));
        } else {
            let spec = self.variety_spec(&c.source)?;
            let corpus = generate_labeled(
                &spec,
                c.labeled_sentences,
                self.cfg.task,
                name_seed(c.root_seed, &format!("labeled:{}", c.source.name)),
            );
            write_column_file(&labeled, &corpus)?;
            written.push((labeled, false));
        }
        Ok(written)
    }

    fn read_unlabeled(&self, name: &str) -> Result<Vec<Vec<String>>> {
        let path = self.unlabeled_path(name);
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "corpus file '{}' not found (run data generation first)",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(&path)?;
        Ok(text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect())
    }

    /// Drop sentences whose encoding would overflow the model window.
    fn fits_window(&self, tok: &Tokenizer, words: &[String]) -> bool {
        tok.encode(words).ids.len() <= self.cfg.model.max_len
    }

    fn require_ckpt(&self, file: &str) -> Result<PathBuf> {
        let path = self.ckpt_path(file);
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "checkpoint '{}' not found (run the earlier pipeline phases first)",
                path.display()
            )));
        }
        Ok(path)
    }

    /// Pretrain the backbone with masked-LM on all adapter varieties.
    pub fn pretrain(&self, force: bool) -> Result<PhaseOutcome> {
        std::fs::create_dir_all(self.cfg.paths.checkpoints_dir())?;
        let out = self.ckpt_path(BACKBONE_CKPT);
        if out.exists() && !force {
            return Ok(PhaseOutcome {
                artifact: out,
                skipped: true,
                logs: Vec::new(),
            });
        }
        let mut all: Vec<Vec<String>> = Vec::new();
        for vc in self.adapter_varieties() {
            all.extend(self.read_unlabeled(&vc.name)?);
        }
        // Vocabulary budget: the continuum lexicon plus inflected forms and
        // the character fallback alphabet.
        let tok = Tokenizer::build(&all, self.cfg.continuum.vocab_size * 4);
        let mut cfg = self.cfg.model;
        cfg.vocab_size = tok.vocab_size();
        cfg.validate()?;
        let mut model = Backbone::new(&cfg, name_seed(self.cfg.train.pretrain.seed, "init"))?;
        let corpus: Vec<Vec<String>> = all
            .into_iter()
            .filter(|s| self.fits_window(&tok, s))
            .collect();
        let logs = pretrain_backbone(&mut model, &tok, &corpus, &self.cfg.train.pretrain)?;
        let ckpt = Checkpoint {
            model,
            language_adapters: Vec::new(),
            task_adapter: None,
            fusion: None,
            tokenizer: tok,
            task_kind: None,
        };
        ckpt.save(&out)?;
        Ok(PhaseOutcome {
            artifact: out,
            skipped: false,
            logs,
        })
    }

    /// Train language adapters with masked-LM against the frozen backbone.
    /// `only` restricts to one variety; adapters keep source-first order.
    pub fn train_lm_adapters(&self, only: Option<&str>, force: bool) -> Result<PhaseOutcome> {
        let base = self.require_ckpt(BACKBONE_CKPT)?;
        let out = self.ckpt_path(LM_ADAPTERS_CKPT);
        let mut ckpt = if out.exists() {
            Checkpoint::load(&out)?
        } else {
            Checkpoint::load(&base)?
        };

        let wanted: Vec<VarietyConfig> = match only {
            Some(name) => {
                let vc = self.find_variety(name)?;
                if !self.adapter_varieties().iter().any(|v| v.name == name) {
                    return Err(Error::Config(format!(
                        "variety '{name}' is a test target; only the source and \
                         related varieties get language adapters"
                    )));
                }
                vec![vc]
            }
            None => self.adapter_varieties(),
        };

        let mut logs = Vec::new();
        let mut any_trained = false;
        for vc in wanted {
            let have = ckpt.language_adapters.iter().any(|a| a.name == vc.name);
            if have && !force {
                continue;
            }
            let corpus: Vec<Vec<String>> = self
                .read_unlabeled(&vc.name)?
                .into_iter()
                .filter(|s| self.fits_window(&ckpt.tokenizer, s))
                .collect();
            let cfg = TrainConfig {
                seed: name_seed(self.cfg.train.lm_adapter.seed, &vc.name),
                ..self.cfg.train.lm_adapter
            };
            let (adapter, l) =
                train_language_adapter(&ckpt.model, &ckpt.tokenizer, &corpus, &vc.name, &cfg)?;
            ckpt.language_adapters.retain(|a| a.name != vc.name);
            ckpt.language_adapters.push(adapter);
            logs.extend(l);
            any_trained = true;
        }

        // Keep the canonical order: source first, then related as listed.
        let order: Vec<String> = self
            .adapter_varieties()
            .into_iter()
            .map(|v| v.name)
            .collect();
        ckpt.language_adapters.sort_by_key(|a| {
            order
                .iter()
                .position(|n| *n == a.name)
                .unwrap_or(order.len())
        });

        if any_trained || !out.exists() {
            ckpt.save(&out)?;
        }
        Ok(PhaseOutcome {
            artifact: out,
            skipped: !any_trained,
            logs,
        })
    }

    fn read_labeled(&self) -> Result<Vec<crate::corpus::TaggedSentence>> {
        let path = self.labeled_path();
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "labeled corpus '{}' not found (run data generation first)",
                path.display()
            )));
        }
        let file = read_column_file(&path)?;
        Ok(file.sentences)
    }

    /// Train the task adapter and tag head on labeled source data. Each
    /// sentence is routed through one of the trained language adapters so
    /// the head stays calibrated across all of them: at test time its
    /// confidence then reflects how well an adapter fits the input variety
    /// instead of favouring the one it was fitted on.
    pub fn train_task(&self, force: bool) -> Result<PhaseOutcome> {
        let prev = self.require_ckpt(LM_ADAPTERS_CKPT)?;
        let out = self.ckpt_path(TASK_CKPT);
        if out.exists() && !force {
            return Ok(PhaseOutcome {
                artifact: out,
                skipped: true,
                logs: Vec::new(),
            });
        }
        let mut ckpt = Checkpoint::load(&prev)?;
        let src_name = &self.cfg.continuum.source.name;
        if !ckpt.language_adapters.iter().any(|a| &a.name == src_name) {
            return Err(Error::MissingArtifact(format!(
                "language adapter '{src_name}' not in '{}'",
                prev.display()
            )));
        }
        let corpus: Vec<_> = self
            .read_labeled()?
            .into_iter()
            .filter(|s| self.fits_window(&ckpt.tokenizer, &s.tokens))
            .collect();
        let lang_adapters = ckpt.language_adapters.clone();
        let (task, logs) = train::train_task_adapter_routed(
            &mut ckpt.model,
            &ckpt.tokenizer,
            &corpus,
            &lang_adapters,
            self.cfg.task,
            &self.cfg.train.task_adapter,
        )?;
        ckpt.task_adapter = Some(task);
        ckpt.task_kind = Some(self.cfg.task);
        ckpt.save(&out)?;
        Ok(PhaseOutcome {
            artifact: out,
            skipped: false,
            logs,
        })
    }

    /// Train the fusion combination over all language adapters on the
    /// labeled source data; everything else stays frozen.
    pub fn train_fusion(&self, force: bool) -> Result<PhaseOutcome> {
        let prev = self.require_ckpt(TASK_CKPT)?;
        let out = self.ckpt_path(FUSION_CKPT);
        if out.exists() && !force {
            return Ok(PhaseOutcome {
                artifact: out,
                skipped: true,
                logs: Vec::new(),
            });
        }
        let mut ckpt = Checkpoint::load(&prev)?;
        let task = ckpt.task_adapter.clone().ok_or_else(|| {
            Error::MissingArtifact(format!("no task adapter in '{}'", prev.display()))
        })?;
        let corpus: Vec<_> = self
            .read_labeled()?
            .into_iter()
            .filter(|s| self.fits_window(&ckpt.tokenizer, &s.tokens))
            .collect();
        let (fusion, logs) = train::train_fusion(
            &ckpt.model,
            &ckpt.tokenizer,
            &corpus,
            &ckpt.language_adapters,
            &task,
            self.cfg.task,
            &self.cfg.train.fusion,
        )?;
        ckpt.fusion = Some(fusion);
        ckpt.save(&out)?;
        Ok(PhaseOutcome {
            artifact: out,
            skipped: false,
            logs,
        })
    }

    /// Load the artifacts evaluation needs. Fusion parameters are optional
    /// unless a fusion evaluation is requested later.
    pub fn load_trained(&self) -> Result<LoadedExperiment> {
        let path = self.require_ckpt(TASK_CKPT)?;
        let fusion_path = self.ckpt_path(FUSION_CKPT);
        let ckpt = if fusion_path.exists() {
            Checkpoint::load(&fusion_path)?
        } else {
            Checkpoint::load(&path)?
        };
        let src_name = &self.cfg.continuum.source.name;
        if ckpt.language_adapters.first().map(|a| a.name.as_str()) != Some(src_name) {
            return Err(Error::Checkpoint(format!(
                "expected source adapter '{src_name}' first in the checkpoint"
            )));
        }
        if ckpt.task_adapter.is_none() {
            return Err(Error::MissingArtifact(format!(
                "no task adapter in '{}'",
                path.display()
            )));
        }
        Ok(LoadedExperiment {
            ckpt,
            task_kind: self.cfg.task,
        })
    }

    /// Grid options as configured.
    pub fn grid_options(&self) -> GridOptions {
        GridOptions {
            emea: EmeaConfig {
                // Presets still override the step count per method.
                ..self.cfg.emea
            },
            ..self.cfg.eval.clone()
        }
    }

    /// Target variety specs, in config order.
    pub fn target_specs(&self) -> Result<Vec<VarietySpec>> {
        self.cfg
            .continuum
            .targets
            .iter()
            .map(|vc| self.variety_spec(vc))
            .collect()
    }

    /// Evaluate the grid (resuming from the results file) and return all
    /// per-seed records plus averages.
    pub fn eval_grid(&self, methods: &[Method]) -> Result<Vec<RunRecord>> {
        let loaded = self.load_trained()?;
        if methods.contains(&Method::Fusion) && loaded.ckpt.fusion.is_none() {
            return Err(Error::MissingArtifact(format!(
                "checkpoint '{}' not found (fusion evaluation needs it)",
                self.ckpt_path(FUSION_CKPT).display()
            )));
        }
        let ctx = loaded.context();
        let varieties = self.target_specs()?;
        let results = self.cfg.paths.results_file();
        if let Some(parent) = results.parent() {
            std::fs::create_dir_all(parent)?;
        }
        eval::run_grid(
            &ctx,
            &varieties,
            methods,
            &self.cfg.seeds,
            &self.grid_options(),
            &results,
        )
    }

    /// Score one (variety, method, seed) without touching the results file.
    pub fn eval_cell(&self, variety: &str, method: Method, seed: u64) -> Result<RunRecord> {
        let loaded = self.load_trained()?;
        let ctx = loaded.context();
        let spec = self.variety_spec(&self.find_variety(variety)?)?;
        eval::evaluate_cell(&ctx, &spec, method, seed, &self.grid_options())
    }

    /// Examples/second of one method on a target variety.
    pub fn bench(
        &self,
        variety: &str,
        method: Method,
        batch_size: usize,
        n_batches: usize,
        warmup: usize,
    ) -> Result<f64> {
        let loaded = self.load_trained()?;
        let ctx = loaded.context();
        let spec = self.variety_spec(&self.find_variety(variety)?)?;
        eval::bench_throughput(
            &ctx,
            &spec,
            method,
            batch_size,
            n_batches,
            warmup,
            &self.grid_options(),
        )
    }

    /// Accuracy of the ten-step adapted ensemble across batch sizes.
    pub fn sweep(&self, variety: &str, sizes: &[usize]) -> Result<Vec<RunRecord>> {
        let loaded = self.load_trained()?;
        let ctx = loaded.context();
        let spec = self.variety_spec(&self.find_variety(variety)?)?;
        eval::batch_size_sweep(&ctx, &spec, &self.cfg.seeds, sizes, &self.grid_options())
    }

    /// Summary table built from the results file.
    pub fn report(&self) -> Result<ReportTable> {
        let records = eval::read_records(&self.cfg.paths.results_file())?;
        if records.is_empty() {
            return Err(Error::MissingArtifact(format!(
                "results file '{}' is missing or empty (run eval first)",
                self.cfg.paths.results_file().display()
            )));
        }
        crate::report::build_table(&records)
    }
}

/// Owned trained artifacts, ready to lend out as an evaluation context.
pub struct LoadedExperiment {
    pub ckpt: Checkpoint,
    pub task_kind: crate::corpus::TaskKind,
}

impl LoadedExperiment {
    pub fn context(&self) -> EvalContext<'_> {
        EvalContext {
            model: &self.ckpt.model,
            tokenizer: &self.ckpt.tokenizer,
            src_adapter: &self.ckpt.language_adapters[0],
            related_adapters: &self.ckpt.language_adapters[1..],
            task: self.ckpt.task_adapter.as_ref().expect("checked on load"),
            fusion: self.ckpt.fusion.as_ref(),
            task_kind: self.ckpt.task_kind.unwrap_or(self.task_kind),
        }
    }
}

/// Dev-set scores used by training-time reporting: span or token F1 of
/// gold vs predicted tag sequences.
pub fn dev_score(
    kind: crate::corpus::TaskKind,
    gold: &[crate::corpus::TaggedSentence],
    pred: &[crate::corpus::TaggedSentence],
) -> Result<f64> {
    match kind {
        crate::corpus::TaskKind::Span => span_f1(gold, pred),
        crate::corpus::TaskKind::Token => token_f1(gold, pred),
    }
}

/// Convenience for tests and the acceptance suite: run every phase in
/// order against one workdir, honoring existing artifacts.
pub fn run_all_phases(p: &Pipeline, force: bool) -> Result<()> {
    p.gen_data(force)?;
    p.pretrain(force)?;
    p.train_lm_adapters(None, force)?;
    p.train_task(force)?;
    p.train_fusion(force)?;
    Ok(())
}

/// Group seed-level rows of one method and average over varieties — the
/// single number quoted for cross-variety comparisons.
pub fn continuum_average(records: &[RunRecord], method: &str) -> Option<f64> {
    let avgs: Vec<RunRecord> = average_records(records)
        .into_iter()
        .filter(|r| r.method == method)
        .collect();
    if avgs.is_empty() {
        return None;
    }
    Some(avgs.iter().map(|r| r.value).sum::<f64>() / avgs.len() as f64)
}
