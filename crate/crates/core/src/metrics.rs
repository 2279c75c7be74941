//! Exact match at K, top-level intent accuracy and slot F1.
//!
//! Slots are compared as multisets of `(label, text)` pairs at the top level of
//! the tree; a nested intent's text is its serialization.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{canonicalize, ParseTree, SlotValue};
use crate::error::{Error, Result};

/// 1 iff one of the first `k` hypotheses equals the gold parse after
/// canonicalization. Hypotheses that do not parse are compared verbatim.
pub fn exact_match_topk<S: AsRef<str>>(hypotheses: &[S], gold: &str, k: usize) -> Result<bool> {
    if k < 1 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let gold = canonicalize(gold).unwrap_or_else(|_| gold.to_string());
    Ok(hypotheses.iter().take(k).any(|h| {
        let h = h.as_ref();
        canonicalize(h).map_or(h == gold, |c| c == gold)
    }))
}

pub fn intent_accuracy(pred: &ParseTree, gold: &ParseTree) -> bool {
    pred.intent == gold.intent
}

fn slot_pairs(t: &ParseTree) -> HashMap<(String, String), usize> {
    let mut out = HashMap::new();
    for s in &t.slots {
        let text = match &s.value {
            SlotValue::Text(words) => words.join(" "),
            SlotValue::Intent(sub) => sub.serialize(),
        };
        *out.entry((s.label.clone(), text)).or_insert(0) += 1;
    }
    out
}

/// Micro-aggregation counts for slot F1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCounts {
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SlotCounts {
    /// Counts for one example; an unparseable prediction contributes no slots.
    pub fn of(pred: Option<&ParseTree>, gold: &ParseTree) -> Self {
        let g = slot_pairs(gold);
        let Some(pred) = pred else {
            return SlotCounts {
                matched: 0,
                predicted: 0,
                gold: g.values().sum(),
            };
        };
        let p = slot_pairs(pred);
        let matched = p.iter().map(|(k, &c)| c.min(g.get(k).copied().unwrap_or(0))).sum();
        SlotCounts {
            matched,
            predicted: p.values().sum(),
            gold: g.values().sum(),
        }
    }

    pub fn add(&mut self, o: &SlotCounts) {
        self.matched += o.matched;
        self.predicted += o.predicted;
        self.gold += o.gold;
    }

    /// `(precision, recall, f1)`; each is 0 when its denominator is.
    pub fn prf(&self) -> (f64, f64, f64) {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (p, r) = (ratio(self.matched, self.predicted), ratio(self.matched, self.gold));
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f)
    }
}

pub fn slot_f1(pred: &ParseTree, gold: &ParseTree) -> (f64, f64, f64) {
    SlotCounts::of(Some(pred), gold).prf()
}

/// Running totals over a dataset. Merging is associative, so shards can be
/// scored independently and combined in a fixed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalAccumulator {
    pub max_k: usize,
    pub examples: usize,
    pub exact: Vec<usize>,
    pub intent: usize,
    pub invalid: usize,
    pub slots: SlotCounts,
}

impl EvalAccumulator {
    pub fn new(max_k: usize) -> Result<Self> {
        if max_k < 1 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        Ok(EvalAccumulator {
            max_k,
            examples: 0,
            exact: vec![0; max_k],
            intent: 0,
            invalid: 0,
            slots: SlotCounts::default(),
        })
    }

    /// Score one example from its rendered hypotheses (best first).
    pub fn add<S: AsRef<str>>(&mut self, hypotheses: &[S], gold: &ParseTree) -> Result<()> {
        let gold_text = gold.serialize();
        for k in 1..=self.max_k {
            if exact_match_topk(hypotheses, &gold_text, k)? {
                self.exact[k - 1] += 1;
            }
        }
        let top = hypotheses
            .first()
            .and_then(|h| crate::data::parse_decoupled(h.as_ref()).ok());
        match &top {
            Some(t) => self.intent += intent_accuracy(t, gold) as usize,
            None => self.invalid += 1,
        }
        self.slots.add(&SlotCounts::of(top.as_ref(), gold));
        self.examples += 1;
        Ok(())
    }

    pub fn merge(&mut self, o: &EvalAccumulator) {
        assert_eq!(self.max_k, o.max_k, "merging reports with different K");
        self.examples += o.examples;
        for (a, b) in self.exact.iter_mut().zip(&o.exact) {
            *a += b;
        }
        self.intent += o.intent;
        self.invalid += o.invalid;
        self.slots.add(&o.slots);
    }

    pub fn report(&self) -> Result<EvalReport> {
        if self.examples == 0 {
            return Err(Error::InvalidArgument("cannot report on an empty dataset".into()));
        }
        let n = self.examples as f64;
        let (p, r, f) = self.slots.prf();
        Ok(EvalReport {
            examples: self.examples,
            exact_match: self.exact.iter().map(|&c| c as f64 / n).collect(),
            intent_accuracy: self.intent as f64 / n,
            slot_precision: p,
            slot_recall: r,
            slot_f1: f,
            invalid_predictions: self.invalid,
            slot_counts: self.slots,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    /// `exact_match[k-1]` is TopK exact match.
    pub exact_match: Vec<f64>,
    pub intent_accuracy: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub slot_f1: f64,
    pub invalid_predictions: usize,
    pub slot_counts: SlotCounts,
}

impl EvalReport {
    /// Line-oriented `key=value` block.
    pub fn to_key_value(&self) -> String {
        let mut out = format!("examples={}\n", self.examples);
        for (k, v) in self.exact_match.iter().enumerate() {
            out.push_str(&format!("exact_match_top{}={:.6}\n", k + 1, v));
        }
        out.push_str(&format!("intent_accuracy={:.6}\n", self.intent_accuracy));
        out.push_str(&format!("slot_precision={:.6}\n", self.slot_precision));
        out.push_str(&format!("slot_recall={:.6}\n", self.slot_recall));
        out.push_str(&format!("slot_f1={:.6}\n", self.slot_f1));
        out.push_str(&format!("invalid_predictions={}\n", self.invalid_predictions));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Data(format!("bad report JSON: {}", e)))
    }
}
