//! Diagnostic: does prediction entropy track prediction quality?
//!
//! For every test variety and every single language adapter, report the
//! mean per-word prediction entropy next to the span F1 of that path, plus
//! each adapter's parameter norm. If entropy ranks adapters differently
//! from F1, weight adaptation will chase the wrong adapter.

use emea_core::adapter::AdapterParams;
use emea_core::corpus::{generate_labeled, TaggedSentence};
use emea_core::fusion::FusionParams;
use emea_core::graph::Graph;
use emea_core::metrics::span_f1;
use emea_core::model::{forward_probs, Backbone, ForwardOpts, LangMix};
use emea_core::pipeline::{run_all_phases, Pipeline};
use emea_core::reference::reference_config;
use emea_core::tokenizer::Tokenizer;
use emea_core::train::name_seed;

enum Path<'a> {
    One(&'a AdapterParams),
    Mix(&'a [AdapterParams], &'a [Vec<f32>]),
    #[allow(dead_code)]
    Fuse(&'a [AdapterParams], &'a FusionParams),
}

fn run_path(
    model: &Backbone,
    tok: &Tokenizer,
    task: &AdapterParams,
    tag_names: &[String],
    gold: &[TaggedSentence],
    path: &Path,
) -> (f64, f64) {
    let mut h_sum = 0.0f64;
    let mut n_words = 0usize;
    let mut preds: Vec<TaggedSentence> = Vec::new();
    for s in gold {
        let enc = tok.encode(&s.tokens);
        if enc.ids.len() > model.cfg.max_len {
            preds.push(s.clone()); // skip overlong: count as perfect to keep sets aligned
            continue;
        }
        let lm = match path {
            Path::One(a) => LangMix::Single {
                adapter: a,
                trainable: false,
            },
            Path::Mix(adapters, betas) => LangMix::Mixed {
                adapters,
                betas,
                trainable_beta: false,
            },
            Path::Fuse(adapters, fusion) => LangMix::Fused {
                adapters,
                fusion,
                trainable_fusion: false,
            },
        };
        let mut g = Graph::new();
        let opts = ForwardOpts::infer(lm, task, &enc.word_starts);
        let (probs, _) = forward_probs(&mut g, model, &enc.ids, &opts).unwrap();
        let p = g.value(probs);
        let mut tags = Vec::with_capacity(p.rows());
        for r in 0..p.rows() {
            let row = p.row(r);
            let mut h = 0.0f64;
            let mut best = 0usize;
            for (i, v) in row.iter().enumerate() {
                let v = *v as f64;
                if v > 1e-12 {
                    h -= v * v.ln();
                }
                if row[i] > row[best] {
                    best = i;
                }
            }
            h_sum += h;
            n_words += 1;
            tags.push(tag_names[best].clone());
        }
        preds.push(TaggedSentence {
            tokens: s.tokens.clone(),
            tags,
        });
    }
    let f1 = span_f1(gold, &preds).unwrap();
    (h_sum / n_words.max(1) as f64, f1)
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = reference_config(dir.path());
    let pipe = Pipeline::new(cfg.clone()).unwrap();
    run_all_phases(&pipe, false).unwrap();
    let exp = pipe.load_trained().unwrap();
    let ckpt = &exp.ckpt;
    let model = &ckpt.model;
    let tok = &ckpt.tokenizer;
    let task = ckpt.task_adapter.as_ref().unwrap();
    let tag_names = exp.task_kind.tag_names();

    for a in &ckpt.language_adapters {
        let norm: f64 = a
            .tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| (*v as f64) * (*v as f64))
            .sum::<f64>()
            .sqrt();
        println!("adapter {:8} weight-norm {:.3}", a.name, norm);
    }

    let all = ckpt.language_adapters.clone();
    let uniform_beta = vec![vec![0.0f32; all.len()]];

    for t in &cfg.continuum.targets {
        let spec = pipe.variety_spec(t).unwrap();
        let gold = generate_labeled(
            &spec,
            cfg.eval.n_test,
            cfg.task,
            name_seed(1, &format!("test:{}", t.name)),
        );
        let mut rows: Vec<(String, f64, f64)> = Vec::new();
        for a in &ckpt.language_adapters {
            let (h, f1) = run_path(model, tok, task, &tag_names, &gold, &Path::One(a));
            rows.push((a.name.clone(), h, f1));
        }
        let (h, f1) = run_path(
            model,
            tok,
            task,
            &tag_names,
            &gold,
            &Path::Mix(&all, &uniform_beta),
        );
        rows.push(("uniform".to_string(), h, f1));
        for (label, h, f1) in rows {
            println!(
                "{:9} {:9} mean-entropy {:.4}  span-f1 {:.4}",
                t.name, label, h, f1
            );
        }
    }
}
