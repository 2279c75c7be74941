//! Bracketed compositional decoupled parses, e.g.
//! `[IN:CREATE_REMINDER [SL:TODO call mom ] ]`.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParseTree {
    pub intent: String,
    pub slots: Vec<Slot>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Slot {
    pub label: String,
    pub value: SlotValue,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum SlotValue {
    Text(Vec<String>),
    Intent(Box<ParseTree>),
}

impl ParseTree {
    pub fn new(intent: impl Into<String>) -> Self {
        ParseTree {
            intent: intent.into(),
            slots: Vec::new(),
        }
    }

    pub fn with_text_slot(mut self, label: &str, words: &[&str]) -> Self {
        self.slots.push(Slot {
            label: label.to_string(),
            value: SlotValue::Text(words.iter().map(|w| w.to_string()).collect()),
        });
        self
    }

    pub fn with_intent_slot(mut self, label: &str, sub: ParseTree) -> Self {
        self.slots.push(Slot {
            label: label.to_string(),
            value: SlotValue::Intent(Box::new(sub)),
        });
        self
    }

    /// All node labels with their kind prefix (`IN:…`, `SL:…`), depth first.
    pub fn labels(&self) -> Vec<String> {
        let mut out = vec![format!("IN:{}", self.intent)];
        for s in &self.slots {
            out.push(format!("SL:{}", s.label));
            if let SlotValue::Intent(sub) = &s.value {
                out.extend(sub.labels());
            }
        }
        out
    }

    /// Canonical single-space form with a space before every closing bracket.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        self.write_to(&mut out);
        out
    }

    fn write_to(&self, out: &mut String) {
        out.push_str("[IN:");
        out.push_str(&self.intent);
        out.push(' ');
        for s in &self.slots {
            out.push_str("[SL:");
            out.push_str(&s.label);
            out.push(' ');
            match &s.value {
                SlotValue::Text(words) => {
                    for w in words {
                        out.push_str(w);
                        out.push(' ');
                    }
                }
                SlotValue::Intent(sub) => {
                    sub.write_to(out);
                    out.push(' ');
                }
            }
            out.push_str("] ");
        }
        out.push(']');
    }
}

impl fmt::Display for ParseTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

pub fn serialize_tree(t: &ParseTree) -> String {
    t.serialize()
}

/// Canonical form of a bracketed string.
pub fn canonicalize(s: &str) -> Result<String> {
    Ok(parse_decoupled(s)?.serialize())
}

#[derive(Debug, PartialEq)]
enum Lexeme<'a> {
    OpenIntent(&'a str),
    OpenSlot(&'a str),
    Close,
    Word(&'a str),
}

fn lex(s: &str) -> Result<Vec<(usize, Lexeme<'_>)>> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c == b']' {
            out.push((i, Lexeme::Close));
            i += 1;
        } else if c == b'[' {
            let start = i;
            i += 1;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'[' && bytes[i] != b']' {
                i += 1;
            }
            let head = &s[start + 1..i];
            let (kind, label) = head.split_once(':').ok_or_else(|| Error::Parse {
                position: start,
                message: format!("node `{}` lacks a kind prefix", head),
            })?;
            if label.is_empty() {
                return Err(Error::Parse {
                    position: start,
                    message: "empty node label".into(),
                });
            }
            out.push((
                start,
                match kind {
                    "IN" => Lexeme::OpenIntent(label),
                    "SL" => Lexeme::OpenSlot(label),
                    other => {
                        return Err(Error::Parse {
                            position: start,
                            message: format!("unknown node kind `{}`", other),
                        })
                    }
                },
            ));
        } else {
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'[' && bytes[i] != b']' {
                i += 1;
            }
            out.push((start, Lexeme::Word(&s[start..i])));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    lexemes: Vec<(usize, Lexeme<'a>)>,
    pos: usize,
    end: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&(usize, Lexeme<'a>)> {
        self.lexemes.get(self.pos)
    }

    fn here(&self) -> usize {
        self.peek().map_or(self.end, |(p, _)| *p)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            position: self.here(),
            message: message.into(),
        })
    }

    fn intent(&mut self) -> Result<ParseTree> {
        let label = match self.peek() {
            Some((_, Lexeme::OpenIntent(l))) => l.to_string(),
            _ => return self.err("expected `[IN:`"),
        };
        self.pos += 1;
        let mut tree = ParseTree::new(label);
        loop {
            match self.peek() {
                Some((_, Lexeme::Close)) => {
                    self.pos += 1;
                    return Ok(tree);
                }
                Some((_, Lexeme::OpenSlot(l))) => {
                    let label = l.to_string();
                    self.pos += 1;
                    let value = self.slot_value()?;
                    tree.slots.push(Slot { label, value });
                }
                Some((_, Lexeme::OpenIntent(_))) => return self.err("intent nested directly inside an intent"),
                Some((_, Lexeme::Word(w))) => {
                    let w = w.to_string();
                    return self.err(format!("text `{}` outside of a slot", w));
                }
                None => return self.err("unbalanced brackets: missing `]`"),
            }
        }
    }

    fn slot_value(&mut self) -> Result<SlotValue> {
        if let Some((_, Lexeme::OpenIntent(_))) = self.peek() {
            let sub = self.intent()?;
            return match self.peek() {
                Some((_, Lexeme::Close)) => {
                    self.pos += 1;
                    Ok(SlotValue::Intent(Box::new(sub)))
                }
                _ => self.err("slot holding an intent must close right after it"),
            };
        }
        let mut words = Vec::new();
        loop {
            match self.peek() {
                Some((_, Lexeme::Word(w))) => {
                    words.push(w.to_string());
                    self.pos += 1;
                }
                Some((_, Lexeme::Close)) => {
                    if words.is_empty() {
                        return self.err("empty slot");
                    }
                    self.pos += 1;
                    return Ok(SlotValue::Text(words));
                }
                Some(_) => return self.err("slot mixes text and nodes"),
                None => return self.err("unbalanced brackets: missing `]`"),
            }
        }
    }
}

/// Parse `[IN:LABEL [SL:LABEL words… ] … ]`.
pub fn parse_decoupled(s: &str) -> Result<ParseTree> {
    if s.trim().is_empty() {
        return Err(Error::Parse {
            position: 0,
            message: "empty input".into(),
        });
    }
    let mut p = Parser {
        lexemes: lex(s)?,
        pos: 0,
        end: s.len(),
    };
    let tree = p.intent()?;
    if p.pos != p.lexemes.len() {
        return p.err("trailing input after the root intent");
    }
    Ok(tree)
}
