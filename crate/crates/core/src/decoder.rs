//! Merged-attention decoder with copy-token input embeddings.
//!
//! Each layer is pre-norm: `y += Out(Self(LN(y)) + Cross(LN(y), Ẽ))`, then
//! `y += FFN(LN(y))`; a final layer norm produces `d_t`.

use crate::error::{Error, Result};
use crate::model::{Ctx, MattLayout, Model};
use crate::numerics::{Real, Tape, Tensor, Var};

pub use crate::config::DecoderConfig;
pub use crate::vocab::TargetToken;

pub const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

/// `Ẽ = E·W_bridge`: encoder states mapped to the decoder width.
pub fn bridge_encoder_states<T: Real>(tape: &mut Tape<T>, ctx: &mut Ctx, model: &Model<T>, e: Var) -> Result<Var> {
    ctx.linear(tape, &model.layout.decoder.bridge, e)
}

/// Decoder inputs for a prefix of previous tokens: target embeddings for
/// `Generate`, `Ẽ_i` for `Copy(i)`, a learned vector for `Bos`; plus learned
/// positions.
pub fn decoder_input_embeddings<T: Real>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx,
    model: &Model<T>,
    e_tilde: Var,
    prev: &[TargetToken],
) -> Result<Var> {
    let d = &model.layout.decoder;
    let v = model.vocab.len();
    let n = tape.shape(e_tilde)[0];
    if prev.is_empty() {
        return Err(Error::InvalidArgument("decoder needs at least one input token".into()));
    }
    if prev.len() > model.config.decoder.max_target_len {
        return Err(Error::InvalidArgument(format!(
            "{} decoder steps exceed max_target_len {}",
            prev.len(),
            model.config.decoder.max_target_len
        )));
    }
    let mut idx = Vec::with_capacity(prev.len());
    for &t in prev {
        idx.push(match t {
            TargetToken::Generate(g) if g < v => g,
            TargetToken::Generate(g) => {
                return Err(Error::InvalidArgument(format!("vocabulary id {} out of range {}", g, v)))
            }
            TargetToken::Eos => crate::vocab::EOS_ID,
            TargetToken::Bos => v,
            TargetToken::Copy(i) if i < n => v + 1 + i,
            TargetToken::Copy(i) => {
                return Err(Error::InvalidArgument(format!("copy position {} outside a {}-token source", i, n)))
            }
        });
    }
    let emb = ctx.weight_var(tape, d.embedding);
    let bos = tape.param(d.bos);
    let table = tape.concat_rows(&[emb, bos, e_tilde])?;
    let x = tape.gather(table, &idx)?;
    let pos = tape.param(d.positions);
    let pos = tape.slice_rows(pos, 0..prev.len())?;
    tape.add(x, pos)
}

fn causal_mask<T: Real>(t: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(t, t);
    for i in 0..t {
        for j in i + 1..t {
            m.set(i, j, T::cast_from(MASKED));
        }
    }
    m
}

/// Multi-head scaled dot-product attention; returns the concatenated context
/// and each head's attention weights.
pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    causal: bool,
) -> Result<(Var, Vec<Var>)> {
    let [tq, m] = tape.shape(q);
    let tk = tape.shape(k)[0];
    if m % heads != 0 {
        return Err(Error::shape("attention", format!("width {} not divisible by {} heads", m, heads)));
    }
    if causal && tq != tk {
        return Err(Error::shape("attention", format!("causal mask needs square scores, got {}×{}", tq, tk)));
    }
    let dh = m / heads;
    let scale = T::cast_from(1.0 / (dh as f64).sqrt());
    let mask = causal.then(|| tape.constant(causal_mask(tq)));
    let mut ctxs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        let qh = tape.slice_cols(q, r.clone())?;
        let kh = tape.slice_cols(k, r.clone())?;
        let vh = tape.slice_cols(v, r)?;
        let s = tape.matmul_t(qh, false, kh, true)?;
        let mut s = tape.scale(s, scale)?;
        if let Some(mk) = mask {
            s = tape.add(s, mk)?;
        }
        let p = tape.softmax(s)?;
        ctxs.push(tape.matmul(p, vh)?);
        probs.push(p);
    }
    Ok((tape.concat_cols(&ctxs)?, probs))
}

/// One merged-attention layer over a full prefix `y` (t × model_dim).
pub fn matt_layer<T: Real>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx,
    layer: &MattLayout,
    heads: usize,
    y: Var,
    e_tilde: Var,
) -> Result<Var> {
    let m = tape.shape(y)[1];
    let (g, b) = (tape.param(layer.ln_attn.gain), tape.param(layer.ln_attn.bias));
    let h = tape.layer_norm(y, g, b, T::cast_from(LN_EPS))?;
    let qkv = ctx.linear(tape, &layer.self_qkv, h)?;
    // Fused columns are [k | q | v].
    let (k, q, v) = (
        tape.slice_cols(qkv, 0..m)?,
        tape.slice_cols(qkv, m..2 * m)?,
        tape.slice_cols(qkv, 2 * m..3 * m)?,
    );
    let (self_ctx, _) = multi_head_attention(tape, q, k, v, heads, true)?;
    let cq = ctx.linear(tape, &layer.cross_q, h)?;
    let ckv = ctx.linear(tape, &layer.cross_kv, e_tilde)?;
    let (ck, cv) = (tape.slice_cols(ckv, 0..m)?, tape.slice_cols(ckv, m..2 * m)?);
    let (cross_ctx, _) = multi_head_attention(tape, cq, ck, cv, heads, false)?;
    let merged = tape.add(self_ctx, cross_ctx)?;
    let out = ctx.linear(tape, &layer.attn_out, merged)?;
    let out = ctx.dropout(tape, out)?;
    let y = tape.add(y, out)?;

    let (g, b) = (tape.param(layer.ln_ffn.gain), tape.param(layer.ln_ffn.bias));
    let h = tape.layer_norm(y, g, b, T::cast_from(LN_EPS))?;
    let f = ctx.linear(tape, &layer.ffn_in, h)?;
    let f = tape.relu(f);
    let f = ctx.linear(tape, &layer.ffn_out, f)?;
    let f = ctx.dropout(tape, f)?;
    tape.add(y, f)
}

/// Teacher-forced decoder stack: `d` (t × model_dim) for every prefix position.
pub fn decode_prefix<T: Real>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx,
    model: &Model<T>,
    e_tilde: Var,
    prev: &[TargetToken],
) -> Result<Var> {
    let mut y = decoder_input_embeddings(tape, ctx, model, e_tilde, prev)?;
    for layer in &model.layout.decoder.layers {
        y = matt_layer(tape, ctx, layer, model.config.decoder.heads, y, e_tilde)?;
    }
    let ln = &model.layout.decoder.ln_final;
    let (g, b) = (tape.param(ln.gain), tape.param(ln.bias));
    tape.layer_norm(y, g, b, T::cast_from(LN_EPS))
}

/// Copy attention: `p_c` is the mean of the per-head attention weights over
/// `Ẽ`, `w` the projected concatenation of head contexts.
pub fn copy_attention<T: Real>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx,
    model: &Model<T>,
    d: Var,
    e_tilde: Var,
) -> Result<(Var, Var)> {
    let dl = &model.layout.decoder;
    let m = model.config.decoder.model_dim;
    let heads = model.config.decoder.copy_heads;
    let q = ctx.linear(tape, &dl.copy_q, d)?;
    let kv = ctx.linear(tape, &dl.copy_kv, e_tilde)?;
    let (k, v) = (tape.slice_cols(kv, 0..m)?, tape.slice_cols(kv, m..2 * m)?);
    let (context, probs) = multi_head_attention(tape, q, k, v, heads, false)?;
    let mut pc = probs[0];
    for &p in &probs[1..] {
        pc = tape.add(pc, p)?;
    }
    let pc = tape.scale(pc, T::cast_from(1.0 / heads as f64))?;
    let w = ctx.linear(tape, &dl.copy_out, context)?;
    Ok((pc, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::encoder::encode;
    use crate::vocab::Vocab;

    fn tiny() -> Model<f64> {
        Model::new(ModelConfig::tiny(), Vocab::synthetic(12), 9).unwrap()
    }

    fn e_tilde(tape: &mut Tape<f64>, m: &Model<f64>, src: &[&str]) -> Var {
        let e = encode(tape, &mut Ctx::eval(), m, src).unwrap();
        bridge_encoder_states(tape, &mut Ctx::eval(), m, e).unwrap()
    }

    #[test]
    fn bridge_identity_block_and_oracle() {
        let mut m = tiny();
        let w = m.layout.decoder.bridge.w;
        let mut tape = Tape::new(&m.params);
        let e = encode(&mut tape, &mut Ctx::eval(), &m, &["a", "b", "c"]).unwrap();
        let ev = tape.value(e).clone();
        let et = bridge_encoder_states(&mut tape, &mut Ctx::eval(), &m, e).unwrap();
        let oracle = ev.matmul(m.params.get(w)).unwrap();
        assert!(tape.value(et).max_abs_diff(&oracle) < 1e-12);
        assert_eq!(tape.shape(et), [3, 8]);
        // [I; 0] keeps the first model_dim columns.
        let (rows, cols) = (16, 8);
        let mut ident = Tensor::zeros(rows, cols);
        for i in 0..cols {
            ident.set(i, i, 1.0);
        }
        *m.params.get_mut(w) = ident;
        let mut tape = Tape::new(&m.params);
        let e = tape.constant(ev.clone());
        let et = bridge_encoder_states(&mut tape, &mut Ctx::eval(), &m, e).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(et).row(r), &ev.row(r)[..8]);
        }
    }

    #[test]
    fn input_embedding_cases() {
        let m = tiny();
        let mut tape = Tape::new(&m.params);
        let et = e_tilde(&mut tape, &m, &["call"]);
        let x = decoder_input_embeddings(
            &mut tape,
            &mut Ctx::eval(),
            &m,
            et,
            &[TargetToken::Bos, TargetToken::Copy(0), TargetToken::Generate(3)],
        )
        .unwrap();
        let pos = m.params.get(m.layout.decoder.positions);
        let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
        let xv = tape.value(x);
        let close = |a: Vec<f64>, b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(sub(xv.row(0), pos.row(0)), m.params.get(m.layout.decoder.bos).row(0)));
        assert!(close(sub(xv.row(1), pos.row(1)), tape.value(et).row(0)));
        assert!(close(sub(xv.row(2), pos.row(2)), m.params.get(m.layout.decoder.embedding).row(3)));
        assert!(decoder_input_embeddings(&mut tape, &mut Ctx::eval(), &m, et, &[TargetToken::Copy(1)]).is_err());
    }

    #[test]
    fn copy_input_depends_on_source_generate_does_not() {
        let m = tiny();
        let run = |src: &[&str], prev: &[TargetToken]| {
            let mut tape = Tape::new(&m.params);
            let et = e_tilde(&mut tape, &m, src);
            let x = decoder_input_embeddings(&mut tape, &mut Ctx::eval(), &m, et, prev).unwrap();
            tape.value(x).clone()
        };
        let g = [TargetToken::Generate(4)];
        assert_eq!(run(&["a", "b"], &g), run(&["x", "y"], &g));
        let c = [TargetToken::Copy(1)];
        assert_ne!(run(&["a", "b"], &c), run(&["a", "z"], &c));
        let b = [TargetToken::Bos];
        assert_eq!(run(&["a"], &b), run(&["q", "r", "s"], &b));
    }

    #[test]
    fn single_step_self_attention_is_identity_weighting() {
        let m = tiny();
        let mut tape = Tape::new(&m.params);
        let q = tape.constant(Tensor::from_rows(&[vec![0.3, -0.2, 0.5, 0.1, 0.0, 1.0, 2.0, -1.0]]).unwrap());
        let (c, probs) = multi_head_attention(&mut tape, q, q, q, 4, true).unwrap();
        for p in probs {
            assert_eq!(tape.value(p).data(), &[1.0]);
        }
        assert_eq!(tape.value(c), tape.value(q));
    }

    #[test]
    fn zero_sublayers_reduce_to_layer_norm_of_inputs() {
        let mut m = tiny();
        let layer = m.layout.decoder.layers[0].clone();
        for lin in [&layer.attn_out, &layer.ffn_out] {
            m.params.get_mut(lin.w).data_mut().fill(0.0);
            m.params.get_mut(lin.b.unwrap()).data_mut().fill(0.0);
        }
        let mut tape = Tape::new(&m.params);
        let et = e_tilde(&mut tape, &m, &["a", "b"]);
        let prev = [TargetToken::Bos, TargetToken::Generate(2)];
        let x = decoder_input_embeddings(&mut tape, &mut Ctx::eval(), &m, et, &prev).unwrap();
        let d = decode_prefix(&mut tape, &mut Ctx::eval(), &m, et, &prev).unwrap();
        let ln = &m.layout.decoder.ln_final;
        let (g, b) = (tape.param(ln.gain), tape.param(ln.bias));
        let expect = tape.layer_norm(x, g, b, LN_EPS).unwrap();
        assert!(tape.value(d).max_abs_diff(tape.value(expect)) < 1e-12);
    }

    #[test]
    fn decoder_is_causal() {
        let m = tiny();
        let run = |prev: &[TargetToken]| {
            let mut tape = Tape::new(&m.params);
            let et = e_tilde(&mut tape, &m, &["a", "b", "c"]);
            let d = decode_prefix(&mut tape, &mut Ctx::eval(), &m, et, prev).unwrap();
            tape.value(d).clone()
        };
        let a = run(&[TargetToken::Bos, TargetToken::Generate(2), TargetToken::Copy(1)]);
        let b = run(&[TargetToken::Bos, TargetToken::Generate(2), TargetToken::Copy(2)]);
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn copy_attention_is_mean_of_heads() {
        let m = tiny();
        let mut tape = Tape::new(&m.params);
        let et = e_tilde(&mut tape, &m, &["a", "b", "c", "d"]);
        let prev = [TargetToken::Bos, TargetToken::Generate(5)];
        let d = decode_prefix(&mut tape, &mut Ctx::eval(), &m, et, &prev).unwrap();
        let (pc, _) = copy_attention(&mut tape, &mut Ctx::eval(), &m, d, et).unwrap();
        let pcv = tape.value(pc).clone();
        // Per-head extraction oracle.
        let dl = &m.layout.decoder;
        let (dv, ev) = (tape.value(d).clone(), tape.value(et).clone());
        let lin = |x: &Tensor<f64>, l: &crate::model::Linear| {
            let mut y = x.matmul(m.params.get(l.w)).unwrap();
            let b = m.params.get(l.b.unwrap());
            for r in 0..y.rows() {
                for c in l.bias_offset..y.cols() {
                    y.set(r, c, y.get(r, c) + b.get(0, c - l.bias_offset));
                }
            }
            y
        };
        let (q, kv) = (lin(&dv, &dl.copy_q), lin(&ev, &dl.copy_kv));
        for t in 0..2 {
            let mut mean = vec![0.0; 4];
            for h in 0..4 {
                let dh = 2;
                let mut s: Vec<f64> = (0..4)
                    .map(|i| (0..dh).map(|c| q.get(t, h * dh + c) * kv.get(i, h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                s.iter_mut().for_each(|v| *v = (*v - mx).exp());
                let z: f64 = s.iter().sum();
                for i in 0..4 {
                    mean[i] += s[i] / z / 4.0;
                }
            }
            for i in 0..4 {
                assert!((pcv.get(t, i) - mean[i]).abs() < 1e-12);
            }
            assert!((pcv.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        // n = 1 → p_c = [1].
        let mut tape = Tape::new(&m.params);
        let et = e_tilde(&mut tape, &m, &["solo"]);
        let d = decode_prefix(&mut tape, &mut Ctx::eval(), &m, et, &prev).unwrap();
        let (pc, _) = copy_attention(&mut tape, &mut Ctx::eval(), &m, d, et).unwrap();
        assert!(tape.value(pc).data().iter().all(|&p| (p - 1.0).abs() < 1e-15));
    }
}
