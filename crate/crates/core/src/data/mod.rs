//! Parse trees, tokenization, copy alignment, corpus files and the synthetic
//! corpus generator.

mod align;
mod corpus;
mod tree;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use align::{align_copy_targets, target_to_string, target_to_tree, Example};
pub use corpus::{generate_corpus, CarrierId, Corpus, GeneratedExample, GrammarConfig, LexiconSpec, Split};
pub use tree::{canonicalize, parse_decoupled, serialize_tree, ParseTree, Slot, SlotValue};

use crate::error::{Error, Result};
use crate::vocab::Vocab;

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '¡' | '¿' | '…' | '“' | '”' | '‘' | '’' | '«' | '»')
}

/// Lowercase, split on whitespace and detach punctuation characters.
pub fn tokenize(query: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in query.split_whitespace() {
        let mut cur = String::new();
        for c in word.chars() {
            if is_punct(c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.extend(c.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub query: String,
    pub tree: ParseTree,
}

/// Parse `query<TAB>target` lines. Blank lines are skipped.
pub fn parse_tsv(text: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (query, target) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("line {}: expected `query<TAB>target`", lineno + 1)))?;
        let tree = parse_decoupled(target).map_err(|e| Error::Data(format!("line {}: {}", lineno + 1, e)))?;
        out.push(Record {
            query: query.to_string(),
            tree,
        });
    }
    Ok(out)
}

pub fn read_tsv(path: &Path) -> Result<Vec<Record>> {
    parse_tsv(&fs::read_to_string(path)?)
}

pub fn write_tsv<'a, I>(path: &Path, records: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a ParseTree)>,
{
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for (q, t) in records {
        if q.contains('\t') || q.contains('\n') {
            return Err(Error::Data(format!("query `{}` contains a tab or newline", q)));
        }
        writeln!(f, "{}\t{}", q, t.serialize())?;
    }
    f.flush()?;
    Ok(())
}

/// Vocabulary over every label appearing in `records`.
pub fn vocab_from_records(records: &[Record]) -> Vocab {
    Vocab::from_labels(records.iter().flat_map(|r| r.tree.labels()))
}

/// Tokenize and align records; records that fail alignment are returned as
/// diagnostics instead of aborting the load.
pub fn align_records(records: &[Record], vocab: &Vocab) -> (Vec<Example>, Vec<String>) {
    let mut ok = Vec::with_capacity(records.len());
    let mut dropped = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match Example::new(tokenize(&r.query), r.tree.clone(), vocab) {
            Ok(e) => ok.push(e),
            Err(e) => dropped.push(format!("example {} discarded: {}", i + 1, e)),
        }
    }
    (ok, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_rules() {
        assert_eq!(tokenize("Call Mom!"), ["call", "mom", "!"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("  wake\tme,up at 7:30  "), ["wake", "me", ",", "up", "at", "7", ":", "30"]);
        for q in ["Call Mom!", "what's the WEATHER in São Paulo?", "a...b", "¿qué?"] {
            let once = tokenize(q);
            assert_eq!(tokenize(&once.join(" ")), once, "{}", q);
        }
    }

    #[test]
    fn tsv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        let t = parse_decoupled("[IN:A [SL:B x ] ]").unwrap();
        write_tsv(&path, [("hello x", &t)]).unwrap();
        let recs = read_tsv(&path).unwrap();
        assert_eq!(recs, vec![Record { query: "hello x".into(), tree: t.clone() }]);
        assert!(write_tsv(&path, [("bad\tq", &t)]).is_err());
        match parse_tsv("ok\t[IN:A ]\n\nno tab here\n") {
            Err(Error::Data(m)) => assert!(m.starts_with("line 3"), "{}", m),
            other => panic!("{:?}", other),
        }
        assert!(matches!(parse_tsv("q\t[IN:A"), Err(Error::Data(_))));
    }

    #[test]
    fn misaligned_records_are_reported() {
        let recs = parse_tsv("call bob\t[IN:A [SL:B bob ] ]\ncall bob\t[IN:A [SL:B alice ] ]\n").unwrap();
        let v = vocab_from_records(&recs);
        let (ok, dropped) = align_records(&recs, &v);
        assert_eq!(ok.len(), 1);
        assert_eq!(dropped.len(), 1);
        assert!(dropped[0].contains("example 2"));
    }
}
