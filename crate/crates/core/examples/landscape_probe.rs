//! Diagnostic: the F1 and entropy landscapes over the mixing simplex.
//!
//! For each test variety, evaluate span F1 and mean prediction entropy at a
//! grid of fixed mixing weights alpha = (src, rel-a, rel-b). Shows whether
//! any mixture beats the best single adapter and whether entropy descent
//! would walk toward it. Knobs come from the same environment variables as
//! the calibrate example.

use emea_core::corpus::{generate_labeled, TaggedSentence};
use emea_core::graph::Graph;
use emea_core::metrics::span_f1;
use emea_core::model::{forward_probs, ForwardOpts, LangMix};
use emea_core::pipeline::{run_all_phases, Pipeline};
use emea_core::reference::reference_config;
use emea_core::train::name_seed;

fn envf(name: &str) -> Option<f32> {
    std::env::var(name).ok().map(|v| v.parse().unwrap())
}
fn envu(name: &str) -> Option<usize> {
    std::env::var(name).ok().map(|v| v.parse().unwrap())
}
fn envlist(name: &str) -> Option<Vec<f32>> {
    std::env::var(name)
        .ok()
        .map(|v| v.split(',').map(|x| x.parse().unwrap()).collect())
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = reference_config(dir.path());
    if let Some(v) = envu("TASK_EPOCHS") {
        cfg.train.task_adapter.epochs = v;
    }
    if let Some(v) = envf("TASK_LR") {
        cfg.train.task_adapter.lr = v;
    }
    if let Some(v) = envu("LM_EPOCHS") {
        cfg.train.lm_adapter.epochs = v;
    }
    if let Some(v) = envlist("REL_DIVS") {
        for (r, d) in cfg.continuum.related.iter_mut().zip(v) {
            r.divergence = d;
        }
    }
    if let Some(v) = envlist("TGT_DIVS") {
        for (t, d) in cfg.continuum.targets.iter_mut().zip(v) {
            t.divergence = d;
        }
    }

    let pipe = Pipeline::new(cfg.clone()).unwrap();
    run_all_phases(&pipe, false).unwrap();
    let exp = pipe.load_trained().unwrap();
    let ckpt = &exp.ckpt;
    let model = &ckpt.model;
    let tok = &ckpt.tokenizer;
    let task = ckpt.task_adapter.as_ref().unwrap();
    let tag_names = exp.task_kind.tag_names();
    let all = ckpt.language_adapters.clone();

    for t in &cfg.continuum.targets {
        let spec = pipe.variety_spec(t).unwrap();
        let gold = generate_labeled(
            &spec,
            cfg.eval.n_test,
            cfg.task,
            name_seed(1, &format!("test:{}", t.name)),
        );
        println!("--- {} (d={}) ---", t.name, t.divergence);
        // alpha grid: src weight in {0, 1/3}, rel split swept in 9 steps;
        // plus the three vertices.
        let mut points: Vec<[f32; 3]> = vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for &s in &[0.0f32, 1.0 / 3.0] {
            for k in 0..=8 {
                let w = k as f32 / 8.0;
                points.push([s, (1.0 - s) * (1.0 - w), (1.0 - s) * w]);
            }
        }
        let mut best: (f64, [f32; 3]) = (-1.0, [0.0; 3]);
        let mut lowest_h: (f64, [f32; 3], f64) = (f64::MAX, [0.0; 3], 0.0);
        for a in points {
            let beta: Vec<f32> = a.iter().map(|w| (w.max(1e-6)).ln()).collect();
            let betas = vec![beta];
            let mut h_sum = 0.0;
            let mut n_words = 0usize;
            let mut preds: Vec<TaggedSentence> = Vec::new();
            for s in &gold {
                let enc = tok.encode(&s.tokens);
                if enc.ids.len() > model.cfg.max_len {
                    preds.push(s.clone());
                    continue;
                }
                let mut g = Graph::new();
                let opts = ForwardOpts::infer(
                    LangMix::Mixed {
                        adapters: &all,
                        betas: &betas,
                        trainable_beta: false,
                    },
                    task,
                    &enc.word_starts,
                );
                let (probs, _) = forward_probs(&mut g, model, &enc.ids, &opts).unwrap();
                let p = g.value(probs);
                let mut tags = Vec::with_capacity(p.rows());
                for r in 0..p.rows() {
                    let row = p.row(r);
                    let mut bi = 0;
                    let mut h = 0.0f64;
                    for (i, v) in row.iter().enumerate() {
                        let vf = *v as f64;
                        if vf > 1e-12 {
                            h -= vf * vf.ln();
                        }
                        if row[i] > row[bi] {
                            bi = i;
                        }
                    }
                    h_sum += h;
                    n_words += 1;
                    tags.push(tag_names[bi].clone());
                }
                preds.push(TaggedSentence {
                    tokens: s.tokens.clone(),
                    tags,
                });
            }
            let f1 = span_f1(&gold, &preds).unwrap();
            let mh = h_sum / n_words.max(1) as f64;
            println!(
                "alpha=({:.2},{:.2},{:.2})  f1={:.4}  H={:.4}",
                a[0], a[1], a[2], f1, mh
            );
            if f1 > best.0 {
                best = (f1, a);
            }
            if mh < lowest_h.0 {
                lowest_h = (mh, a, f1);
            }
        }
        println!(
            "best f1 {:.4} at ({:.2},{:.2},{:.2}); lowest H at ({:.2},{:.2},{:.2}) with f1 {:.4}",
            best.0,
            best.1[0],
            best.1[1],
            best.1[2],
            lowest_h.1[0],
            lowest_h.1[1],
            lowest_h.1[2],
            lowest_h.2
        );
    }
}
