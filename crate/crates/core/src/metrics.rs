//! Tagging metrics: exact-match span F1 over BIO sequences and per-token
//! accuracy / macro F1 for category tagging.
//!
//! Conventions (recorded because they matter at edge cases): precision is 0
//! when there are no predicted spans; recall is 0 when there are gold spans
//! and none match; when both corpora contain no spans at all the score is a
//! vacuous 1.0. An `I-X` with no live `X` span opens a new span (the usual
//! lenient BIO decoding).

use crate::corpus::TaggedSentence;
use crate::error::{Error, Result};

/// One decoded span: (label kind, start, end) with an inclusive end.
pub fn spans_of(tags: &[String]) -> Vec<(String, usize, usize)> {
    let mut spans = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, t) in tags.iter().enumerate() {
        let (starts_new, kind) = if let Some(k) = t.strip_prefix("B-") {
            (true, Some(k))
        } else if let Some(k) = t.strip_prefix("I-") {
            let continues = matches!(&open, Some((ok, _)) if ok == k);
            (!continues, Some(k))
        } else {
            (false, None)
        };
        match kind {
            Some(k) => {
                if starts_new {
                    if let Some((ok, os)) = open.take() {
                        spans.push((ok, os, i - 1));
                    }
                    open = Some((k.to_string(), i));
                }
            }
            None => {
                if let Some((ok, os)) = open.take() {
                    spans.push((ok, os, i - 1));
                }
            }
        }
    }
    if let Some((ok, os)) = open {
        spans.push((ok, os, tags.len() - 1));
    }
    spans
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf(tp: usize, n_pred: usize, n_gold: usize) -> PrF1 {
    if n_pred == 0 && n_gold == 0 {
        return PrF1 {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let p = if n_pred == 0 {
        0.0
    } else {
        tp as f64 / n_pred as f64
    };
    let r = if n_gold == 0 {
        0.0
    } else {
        tp as f64 / n_gold as f64
    };
    let f1 = if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    PrF1 {
        precision: p,
        recall: r,
        f1,
    }
}

fn check_aligned(gold: &[TaggedSentence], pred: &[TaggedSentence]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!(
            "metric: {} gold sentences vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.tags.len() != p.tags.len() {
            return Err(Error::Contract(format!(
                "metric: sentence {i} has {} gold tags vs {} predicted",
                g.tags.len(),
                p.tags.len()
            )));
        }
    }
    Ok(())
}

/// Micro-averaged exact-match span precision/recall/F1 over aligned corpora.
pub fn span_prf(gold: &[TaggedSentence], pred: &[TaggedSentence]) -> Result<PrF1> {
    check_aligned(gold, pred)?;
    let (mut tp, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
    for (g, p) in gold.iter().zip(pred) {
        let gs = spans_of(&g.tags);
        let ps = spans_of(&p.tags);
        n_gold += gs.len();
        n_pred += ps.len();
        tp += ps.iter().filter(|s| gs.contains(s)).count();
    }
    Ok(prf(tp, n_pred, n_gold))
}

pub fn span_f1(gold: &[TaggedSentence], pred: &[TaggedSentence]) -> Result<f64> {
    Ok(span_prf(gold, pred)?.f1)
}

/// Fraction of positions tagged identically.
pub fn token_accuracy(gold: &[TaggedSentence], pred: &[TaggedSentence]) -> Result<f64> {
    check_aligned(gold, pred)?;
    let mut total = 0usize;
    let mut correct = 0usize;
    for (g, p) in gold.iter().zip(pred) {
        for (gt, pt) in g.tags.iter().zip(&p.tags) {
            total += 1;
            if gt == pt {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(correct as f64 / total as f64)
}

/// Macro-averaged per-class F1 over all classes appearing in gold or pred.
pub fn token_f1(gold: &[TaggedSentence], pred: &[TaggedSentence]) -> Result<f64> {
    check_aligned(gold, pred)?;
    let mut classes: Vec<&String> = Vec::new();
    for s in gold.iter().chain(pred) {
        for t in &s.tags {
            if !classes.contains(&t) {
                classes.push(t);
            }
        }
    }
    if classes.is_empty() {
        return Ok(1.0);
    }
    classes.sort();
    let mut sum = 0.0f64;
    for c in &classes {
        let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
        for (g, p) in gold.iter().zip(pred) {
            for (gt, pt) in g.tags.iter().zip(&p.tags) {
                let g_is = &gt == c;
                let p_is = &pt == c;
                match (g_is, p_is) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fne += 1,
                    _ => {}
                }
            }
        }
        sum += prf(tp, tp + fp, tp + fne).f1;
    }
    Ok(sum / classes.len() as f64)
}
