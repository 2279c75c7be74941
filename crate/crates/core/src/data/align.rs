//! Copy alignment between source tokens and decoupled parses.

use crate::error::{Error, Result};
use crate::vocab::{TargetToken, Vocab};

use super::tree::{parse_decoupled, ParseTree, SlotValue};

/// One training/evaluation item.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub source: Vec<String>,
    pub target: Vec<TargetToken>,
    pub tree: ParseTree,
}

impl Example {
    pub fn new(source: Vec<String>, tree: ParseTree, vocab: &Vocab) -> Result<Self> {
        let target = align_copy_targets(&source, &tree, vocab)?;
        Ok(Example { source, target, tree })
    }
}

fn find_leftmost(source: &[String], span: &[String]) -> Option<usize> {
    if span.is_empty() || span.len() > source.len() {
        return None;
    }
    source.windows(span.len()).position(|w| w == span)
}

fn label_id(vocab: &Vocab, token: &str) -> Result<usize> {
    vocab
        .id(token)
        .ok_or_else(|| Error::Alignment(format!("label `{}` is not in the vocabulary", token)))
}

fn emit(tree: &ParseTree, source: &[String], vocab: &Vocab, out: &mut Vec<TargetToken>) -> Result<()> {
    out.push(TargetToken::Generate(label_id(vocab, &format!("[IN:{}", tree.intent))?));
    for slot in &tree.slots {
        out.push(TargetToken::Generate(label_id(vocab, &format!("[SL:{}", slot.label))?));
        match &slot.value {
            SlotValue::Text(words) => {
                let start = find_leftmost(source, words).ok_or_else(|| {
                    Error::Alignment(format!(
                        "slot {} text `{}` does not occur contiguously in the source",
                        slot.label,
                        words.join(" ")
                    ))
                })?;
                out.extend((start..start + words.len()).map(TargetToken::Copy));
            }
            SlotValue::Intent(sub) => emit(sub, source, vocab, out)?,
        }
        out.push(TargetToken::Generate(vocab.close_id()));
    }
    out.push(TargetToken::Generate(vocab.close_id()));
    Ok(())
}

/// Labels and brackets become `Generate`, slot words become `Copy` of their
/// leftmost contiguous occurrence, and the sequence ends in `Eos`.
pub fn align_copy_targets(source: &[String], tree: &ParseTree, vocab: &Vocab) -> Result<Vec<TargetToken>> {
    let mut out = Vec::new();
    emit(tree, source, vocab, &mut out)?;
    out.push(TargetToken::Eos);
    Ok(out)
}

/// Render a target sequence as bracketed text, resolving copies through `source`.
/// Rendering stops at the first `Eos`.
pub fn target_to_string(tokens: &[TargetToken], source: &[String], vocab: &Vocab) -> Result<String> {
    let mut parts: Vec<&str> = Vec::with_capacity(tokens.len());
    for &t in tokens {
        match t {
            TargetToken::Eos => break,
            TargetToken::Bos => {}
            TargetToken::Generate(v) => {
                if v >= vocab.len() {
                    return Err(Error::InvalidArgument(format!("vocabulary id {} out of range", v)));
                }
                parts.push(vocab.token(v));
            }
            TargetToken::Copy(i) => parts.push(
                source
                    .get(i)
                    .ok_or_else(|| Error::InvalidArgument(format!("copy index {} out of range", i)))?,
            ),
        }
    }
    Ok(parts.join(" "))
}

/// Decode a target sequence into a tree.
pub fn target_to_tree(tokens: &[TargetToken], source: &[String], vocab: &Vocab) -> Result<ParseTree> {
    parse_decoupled(&target_to_string(tokens, source, vocab)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize;

    fn vocab() -> Vocab {
        Vocab::from_labels(["IN:CREATE_REMINDER", "SL:TODO", "SL:DATE_TIME", "IN:A", "SL:B", "IN:CREATE_CALL", "SL:CONTACT"])
    }

    #[test]
    fn call_mom_alignment() {
        let v = vocab();
        let src = tokenize("remind me to call mom");
        let tree = parse_decoupled("[IN:CREATE_REMINDER [SL:TODO call mom ] ]").unwrap();
        let t = align_copy_targets(&src, &tree, &v).unwrap();
        let g = |s: &str| TargetToken::Generate(v.id(s).unwrap());
        assert_eq!(
            t,
            vec![
                g("[IN:CREATE_REMINDER"),
                g("[SL:TODO"),
                TargetToken::Copy(3),
                TargetToken::Copy(4),
                g("]"),
                g("]"),
                TargetToken::Eos
            ]
        );
        assert_eq!(target_to_string(&t, &src, &v).unwrap(), tree.serialize());
    }

    #[test]
    fn leftmost_match_wins() {
        let v = vocab();
        let src = tokenize("a a");
        let tree = parse_decoupled("[IN:A [SL:B a ] ]").unwrap();
        let t = align_copy_targets(&src, &tree, &v).unwrap();
        assert_eq!(t[2], TargetToken::Copy(0));
        // Contiguity: "a b" must not match a split occurrence.
        let src = tokenize("a x b a b");
        let tree = parse_decoupled("[IN:A [SL:B a b ] ]").unwrap();
        let t = align_copy_targets(&src, &tree, &v).unwrap();
        assert_eq!(&t[2..4], &[TargetToken::Copy(3), TargetToken::Copy(4)]);
    }

    #[test]
    fn no_slots_no_copies() {
        let v = vocab();
        let t = align_copy_targets(&tokenize("hello"), &ParseTree::new("A"), &v).unwrap();
        assert!(!t.iter().any(|x| matches!(x, TargetToken::Copy(_))));
        assert_eq!(t.len(), 3);
    }

    #[test]
    fn rejects_missing_text_and_labels() {
        let v = vocab();
        let tree = parse_decoupled("[IN:A [SL:B zzz ] ]").unwrap();
        assert!(matches!(align_copy_targets(&tokenize("a b"), &tree, &v), Err(Error::Alignment(_))));
        let tree = parse_decoupled("[IN:UNKNOWN ]").unwrap();
        assert!(matches!(align_copy_targets(&tokenize("a"), &tree, &v), Err(Error::Alignment(_))));
    }

    #[test]
    fn nested_tree_round_trips_through_target() {
        let v = vocab();
        let src = tokenize("remind me to call bob at noon");
        let s = "[IN:CREATE_REMINDER [SL:TODO [IN:CREATE_CALL [SL:CONTACT bob ] ] ] [SL:DATE_TIME at noon ] ]";
        let tree = parse_decoupled(s).unwrap();
        let ex = Example::new(src.clone(), tree.clone(), &v).unwrap();
        assert_eq!(target_to_tree(&ex.target, &src, &v).unwrap(), tree);
    }
}
