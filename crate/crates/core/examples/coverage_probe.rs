//! Diagnostic: vocabulary geometry of the reference continuum.
//!
//! Prints, for each test variety, how many of its distinct word forms are
//! (a) known to the tokenizer as whole words, and (b) shared with each
//! adapter variety's forms — the raw material the ensemble has to work with.

use std::collections::HashSet;

use emea_core::corpus::generate_unlabeled;
use emea_core::pipeline::Pipeline;
use emea_core::reference::reference_config;
use emea_core::tokenizer::Tokenizer;

fn forms(sentences: &[Vec<String>]) -> HashSet<String> {
    sentences.iter().flatten().cloned().collect()
}

fn main() {
    let cfg = reference_config(std::path::Path::new("/tmp/coverage-probe"));
    let pipe = Pipeline::new(cfg.clone()).unwrap();

    let mut adapter_forms: Vec<(String, HashSet<String>)> = Vec::new();
    let mut all_sentences: Vec<Vec<String>> = Vec::new();
    for v in pipe.adapter_varieties() {
        let spec = pipe.variety_spec(&v).unwrap();
        let sents = generate_unlabeled(
            &spec,
            cfg.continuum.unlabeled_sentences,
            emea_core::train::name_seed(cfg.continuum.root_seed, &format!("unlabeled:{}", v.name)),
        );
        all_sentences.extend(sents.clone());
        adapter_forms.push((v.name.clone(), forms(&sents)));
    }

    let union: HashSet<String> = adapter_forms
        .iter()
        .flat_map(|(_, f)| f.iter().cloned())
        .collect();
    println!(
        "adapter corpus distinct forms: {:?} union={} tokenizer cap={}",
        adapter_forms
            .iter()
            .map(|(n, f)| format!("{n}={}", f.len()))
            .collect::<Vec<_>>(),
        union.len(),
        cfg.continuum.vocab_size * 4
    );

    let tok = Tokenizer::build(all_sentences.iter(), cfg.continuum.vocab_size * 4);
    println!("tokenizer vocab={}", tok.vocab_size());

    for t in &cfg.continuum.targets {
        let spec = pipe.variety_spec(t).unwrap();
        let sents = generate_unlabeled(
            &spec,
            cfg.continuum.unlabeled_sentences,
            emea_core::train::name_seed(cfg.continuum.root_seed, &format!("unlabeled:{}", t.name)),
        );
        let tf = forms(&sents);
        let n = tf.len();
        let known = tf.iter().filter(|w| tok.id_of(w).is_some()).count();
        let mut line = format!(
            "{} (d={}): forms={n} tokenizer-known={known} ({:.0}%)",
            t.name,
            t.divergence,
            100.0 * known as f64 / n as f64
        );
        for (an, af) in &adapter_forms {
            let shared = tf.iter().filter(|w| af.contains(*w)).count();
            line.push_str(&format!(
                "  {an}∩={shared} ({:.0}%)",
                100.0 * shared as f64 / n as f64
            ));
        }
        // complementarity: covered by exactly one related adapter
        let a = &adapter_forms[1].1;
        let b = &adapter_forms[2].1;
        let only_a = tf.iter().filter(|w| a.contains(*w) && !b.contains(*w)).count();
        let only_b = tf.iter().filter(|w| !a.contains(*w) && b.contains(*w)).count();
        let neither = tf.iter().filter(|w| !a.contains(*w) && !b.contains(*w)).count();
        line.push_str(&format!("  onlyA={only_a} onlyB={only_b} neither={neither}"));
        println!("{line}");
    }
}
