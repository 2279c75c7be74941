//! Greedy and beam-search decoding over the combined `(V+n)`-way output.
//!
//! Scores are raw summed log-probabilities (no length normalization), with the
//! same `1e-9` probability floor as the training loss, so a hypothesis's score
//! equals its teacher-forced re-score.

use std::cmp::Ordering;

use crate::data::{target_to_string, target_to_tree, ParseTree};
use crate::engine::{DecoderState, EncodedSource, Engine};
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::pointer_generator::PROB_FLOOR;
use crate::vocab::TargetToken;

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Output tokens, ending in `Eos` when finished.
    pub tokens: Vec<TargetToken>,
    pub log_prob: f64,
    /// `false` when decoding hit `max_target_len` first.
    pub finished: bool,
}

impl Hypothesis {
    /// Bracketed text with copies resolved to source words.
    pub fn render(&self, source: &[String], engine_vocab: &crate::vocab::Vocab) -> Result<String> {
        target_to_string(&self.tokens, source, engine_vocab)
    }

    pub fn tree(&self, source: &[String], engine_vocab: &crate::vocab::Vocab) -> Result<ParseTree> {
        target_to_tree(&self.tokens, source, engine_vocab)
    }
}

#[inline]
fn log_p<T: Real>(p: T) -> f64 {
    p.as_f64().max(PROB_FLOOR).ln()
}

fn indices(tokens: &[TargetToken], v: usize) -> impl Iterator<Item = usize> + '_ {
    tokens.iter().map(move |t| t.combined_index(v).expect("output token"))
}

/// Final ranking: higher score, then earlier finishing, then lexicographic
/// order of combined token indices.
fn rank(a: &Hypothesis, b: &Hypothesis, v: usize) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| indices(&a.tokens, v).cmp(indices(&b.tokens, v)))
}

/// Argmax of the floored log-probabilities; ties go to the lowest index.
fn argmax<T: Real>(p: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate().skip(1) {
        if log_p(x) > log_p(p[best]) {
            best = i;
        }
    }
    best
}

pub fn greedy_decode<T: Real, S: AsRef<str>>(engine: &Engine<T>, source: &[S]) -> Result<Hypothesis> {
    let src = engine.encode(source)?;
    greedy_from(engine, &src)
}

pub fn greedy_from<T: Real>(engine: &Engine<T>, src: &EncodedSource<T>) -> Result<Hypothesis> {
    let v = engine.vocab.len();
    let mut state = engine.start();
    let mut prev = TargetToken::Bos;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while state.step < engine.max_target_len() {
        let out = engine.step(src, &mut state, prev)?;
        let i = argmax(&out.combined);
        hyp.log_prob += log_p(out.combined[i]);
        prev = TargetToken::from_combined_index(i, v);
        hyp.tokens.push(prev);
        if prev == TargetToken::Eos {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

struct Beam<T> {
    hyp: Hypothesis,
    state: DecoderState<T>,
}

/// Beam search of width `k`. A hypothesis that emits `Eos` retires and keeps
/// its slot, so the live beam narrows; search stops once `k` have finished or
/// the live beams reach `max_target_len`. Returns at most `k` hypotheses, best first.
pub fn beam_search<T: Real, S: AsRef<str>>(engine: &Engine<T>, source: &[S], k: usize) -> Result<Vec<Hypothesis>> {
    let src = engine.encode(source)?;
    beam_search_from(engine, &src, k)
}

pub fn beam_search_from<T: Real>(engine: &Engine<T>, src: &EncodedSource<T>, k: usize) -> Result<Vec<Hypothesis>> {
    if k == 0 {
        return Err(Error::InvalidArgument("beam width must be at least 1".into()));
    }
    let v = engine.vocab.len();
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut live = vec![Beam {
        hyp: Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        },
        state: engine.start(),
    }];
    let mut step = 0;
    while !live.is_empty() && step < engine.max_target_len() && finished.len() < k {
        // (score, beam, token index, next state)
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        let mut states = Vec::with_capacity(live.len());
        for (b, beam) in live.iter().enumerate() {
            let mut st = beam.state.clone();
            let prev = beam.hyp.tokens.last().copied().unwrap_or(TargetToken::Bos);
            let out = engine.step(src, &mut st, prev)?;
            for (i, &p) in out.combined.iter().enumerate() {
                cands.push((beam.hyp.log_prob + log_p(p), b, i));
            }
            states.push(st);
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| {
                indices(&live[a.1].hyp.tokens, v)
                    .chain([a.2])
                    .cmp(indices(&live[b.1].hyp.tokens, v).chain([b.2]))
            })
        });
        let slots = k - finished.len();
        let mut next = Vec::with_capacity(slots);
        for &(score, b, i) in cands.iter().take(slots) {
            let tok = TargetToken::from_combined_index(i, v);
            let mut tokens = live[b].hyp.tokens.clone();
            tokens.push(tok);
            let hyp = Hypothesis {
                tokens,
                log_prob: score,
                finished: tok == TargetToken::Eos,
            };
            if hyp.finished {
                finished.push(hyp);
            } else {
                next.push(Beam {
                    hyp,
                    state: states[b].clone(),
                });
            }
        }
        live = next;
        step += 1;
    }
    let mut out = finished;
    out.extend(live.into_iter().map(|b| b.hyp));
    out.sort_by(|a, b| rank(a, b, v));
    out.truncate(k);
    Ok(out)
}

/// All complete outputs of up to `max_len` tokens with their scores, best
/// first — the reference that beam search is checked against on tiny models.
pub fn enumerate_all<T: Real>(engine: &Engine<T>, src: &EncodedSource<T>, max_len: usize) -> Result<Vec<Hypothesis>> {
    let v = engine.vocab.len();
    let mut out = Vec::new();
    let mut stack = vec![(Vec::<TargetToken>::new(), 0.0f64, engine.start())];
    while let Some((tokens, lp, state)) = stack.pop() {
        let mut st = state.clone();
        let prev = tokens.last().copied().unwrap_or(TargetToken::Bos);
        let o = engine.step(src, &mut st, prev)?;
        for (i, &p) in o.combined.iter().enumerate() {
            let tok = TargetToken::from_combined_index(i, v);
            let mut t = tokens.clone();
            t.push(tok);
            let score = lp + log_p(p);
            if tok == TargetToken::Eos {
                out.push(Hypothesis {
                    tokens: t,
                    log_prob: score,
                    finished: true,
                });
            } else if t.len() == max_len {
                out.push(Hypothesis {
                    tokens: t,
                    log_prob: score,
                    finished: false,
                });
            } else {
                stack.push((t, score, st.clone()));
            }
        }
    }
    out.sort_by(|a, b| rank(a, b, v));
    Ok(out)
}
