//! Column-format labeled corpus files: one `token<TAB>tag` pair per line,
//! blank line between sentences, UTF-8 throughout.

use std::fs;
use std::path::Path;

use crate::corpus::{bio_well_formed, TaggedSentence};
use crate::error::{Error, Result};

/// Parse result: sentences plus non-fatal validation warnings (currently
/// malformed BIO sequences, reported by sentence start line).
#[derive(Debug)]
pub struct ColumnFile {
    pub sentences: Vec<TaggedSentence>,
    pub warnings: Vec<String>,
}

pub fn read_column_file(path: &Path) -> Result<ColumnFile> {
    let text = fs::read_to_string(path)?;
    parse_column_text(&text, &path.display().to_string())
}

pub fn parse_column_text(text: &str, source: &str) -> Result<ColumnFile> {
    let mut sentences = Vec::new();
    let mut warnings = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut sentence_start_line = 1usize;

    let mut flush = |tokens: &mut Vec<String>,
                     tags: &mut Vec<String>,
                     warnings: &mut Vec<String>,
                     start_line: usize| {
        if tokens.is_empty() {
            return;
        }
        if !bio_well_formed(tags) {
            warnings.push(format!(
                "{source}: sentence starting at line {start_line} has a malformed BIO sequence"
            ));
        }
        sentences.push(TaggedSentence {
            tokens: std::mem::take(tokens),
            tags: std::mem::take(tags),
        });
    };

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags, &mut warnings, sentence_start_line);
            sentence_start_line = lineno + 1;
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                path: source.to_string(),
                line: lineno,
                msg: format!("expected 2 tab-separated fields, found {}", fields.len()),
            });
        }
        if tokens.is_empty() {
            sentence_start_line = lineno;
        }
        tokens.push(fields[0].to_string());
        tags.push(fields[1].to_string());
    }
    flush(&mut tokens, &mut tags, &mut warnings, sentence_start_line);

    Ok(ColumnFile {
        sentences,
        warnings,
    })
}

pub fn write_column_file(path: &Path, corpus: &[TaggedSentence]) -> Result<()> {
    let mut out = String::new();
    for (i, s) in corpus.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (tok, tag) in s.tokens.iter().zip(&s.tags) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(tag);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}
