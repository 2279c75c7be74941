//! Tape-free inference over frozen weights.
//!
//! Dense maps run either in float or through the int8 kernels; attention,
//! softmax, sigmoid, tanh and layer norm stay in float. Decoding is stepwise
//! with cached self-attention keys and values.

use crate::config::ModelConfig;
use crate::decoder::LN_EPS;
use crate::error::{Error, Result};
use crate::model::{LayerNormIds, Linear, Model};
use crate::numerics::{sigmoid, ParamStore, Real, Tensor};
use crate::projection::project_sequence;
use crate::quantization::{quantize, IntegerKernel, QuantParams, WeightTensor};
use crate::quantized_model::QuantizedModel;
use crate::vocab::{TargetToken, Vocab, EOS_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Float,
    Int8,
}

#[derive(Clone, Debug)]
enum Dense<T> {
    Float {
        w: Tensor<T>,
        b: Vec<T>,
    },
    Int8 {
        w: WeightTensor,
        bias: Vec<i32>,
        input: QuantParams,
        output: QuantParams,
    },
}

fn full_bias<T: Real>(params: &ParamStore<T>, lin: &Linear, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    if let Some(b) = lin.b {
        out[lin.bias_offset..].copy_from_slice(params.get(b).data());
    }
    out
}

fn transpose_weight(w: &WeightTensor) -> WeightTensor {
    let mut values = vec![0i8; w.values.len()];
    for r in 0..w.rows {
        for c in 0..w.cols {
            values[c * w.rows + r] = w.values[r * w.cols + c];
        }
    }
    WeightTensor {
        rows: w.cols,
        cols: w.rows,
        values,
        params: w.params,
    }
}

impl<T: Real> Dense<T> {
    fn float(params: &ParamStore<T>, lin: &Linear) -> Self {
        let w = params.get(lin.w);
        let w = if lin.transposed { w.transpose() } else { w.clone() };
        let b = full_bias(params, lin, w.cols());
        Dense::Float { w, b }
    }

    fn int8(q: &QuantizedModel, lin: &Linear) -> Result<Self> {
        let w = q.weight(lin.w)?;
        let w = if lin.transposed { transpose_weight(w) } else { w.clone() };
        let input = *q.model.ranges.get(&lin.in_key())?;
        let output = *q.model.ranges.get(&lin.out_key())?;
        let b = full_bias(&q.model.params, lin, w.cols);
        let bias = IntegerKernel::quantize_bias(&b, &input, &w);
        IntegerKernel::new(&input, &w, Some(&bias), &output)?;
        Ok(Dense::Int8 { w, bias, input, output })
    }

    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Dense::Float { w, b } => {
                let mut y = x.matmul(w)?;
                for r in 0..y.rows() {
                    for (v, &bv) in y.row_mut(r).iter_mut().zip(b) {
                        *v += bv;
                    }
                }
                Ok(y)
            }
            Dense::Int8 { w, bias, input, output } => {
                if x.cols() != w.rows {
                    return Err(Error::shape("int8 dense", format!("{:?} · {}×{}", x.shape(), w.rows, w.cols)));
                }
                let kernel = IntegerKernel::new(input, w, Some(bias), output)?;
                Ok(kernel.run(&quantize(x, input)?).dequantize().cast())
            }
        }
    }

    fn apply_row(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.apply(&Tensor::row_vector(x.to_vec()))?.into_data())
    }
}

#[derive(Clone, Debug)]
struct Norm<T> {
    gain: Vec<T>,
    bias: Vec<T>,
}

impl<T: Real> Norm<T> {
    fn new(params: &ParamStore<T>, ids: &LayerNormIds) -> Self {
        Norm {
            gain: params.get(ids.gain).data().to_vec(),
            bias: params.get(ids.bias).data().to_vec(),
        }
    }

    fn apply(&self, row: &[T]) -> Vec<T> {
        let d = T::cast_from(row.len() as f64);
        let mean = row.iter().copied().sum::<T>() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
        let inv = (var + T::cast_from(LN_EPS)).sqrt().recip();
        row.iter()
            .zip(self.gain.iter().zip(&self.bias))
            .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Layer<T> {
    ln_attn: Norm<T>,
    self_qkv: Dense<T>,
    cross_q: Dense<T>,
    cross_kv: Dense<T>,
    attn_out: Dense<T>,
    ln_ffn: Norm<T>,
    ffn_in: Dense<T>,
    ffn_out: Dense<T>,
}

/// Frozen model ready for decoding. Shareable across threads; each decode owns
/// its [`DecoderState`].
#[derive(Clone, Debug)]
pub struct Engine<T: Real> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub precision: Precision,
    bottleneck: Dense<T>,
    qrnn: Vec<Vec<Dense<T>>>,
    bridge: Dense<T>,
    embedding: Tensor<T>,
    bos: Vec<T>,
    positions: Tensor<T>,
    layers: Vec<Layer<T>>,
    ln_final: Norm<T>,
    copy_q: Dense<T>,
    copy_kv: Dense<T>,
    copy_out: Dense<T>,
    generate: Dense<T>,
    gate: Dense<T>,
}

/// Encoder output plus per-source attention keys and values.
#[derive(Clone, Debug)]
pub struct EncodedSource<T> {
    pub e_tilde: Tensor<T>,
    cross: Vec<(Tensor<T>, Tensor<T>)>,
    copy_k: Tensor<T>,
    copy_v: Tensor<T>,
}

impl<T: Real> EncodedSource<T> {
    pub fn len(&self) -> usize {
        self.e_tilde.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.e_tilde.rows() == 0
    }
}

/// Per-hypothesis decoder cache.
#[derive(Clone, Debug)]
pub struct DecoderState<T> {
    pub step: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

/// Everything one decoding step produces.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub d: Vec<T>,
    pub gen_probs: Vec<T>,
    pub copy_probs: Vec<T>,
    pub w: Vec<T>,
    pub gate: T,
    /// `[p_w·p_g, (1−p_w)·p_c]`, length `V + n`.
    pub combined: Vec<T>,
}

fn relu_in_place<T: Real>(x: &mut Tensor<T>) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
}

/// Rows `[x_{t−w+1} … x_t]` side by side, zero before the start.
fn windows<T: Real>(x: &Tensor<T>, width: usize) -> Tensor<T> {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(n, width * d);
    for t in 0..n {
        for j in 0..width {
            let shift = width - 1 - j;
            if t >= shift {
                out.row_mut(t)[j * d..(j + 1) * d].copy_from_slice(x.row(t - shift));
            }
        }
    }
    out
}

fn reverse_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let n = x.rows();
    for r in 0..n {
        out.row_mut(r).copy_from_slice(x.row(n - 1 - r));
    }
    out
}

fn concat_cols<T: Real>(parts: &[Tensor<T>]) -> Tensor<T> {
    let n = parts[0].rows();
    let width: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Tensor::zeros(n, width);
    for r in 0..n {
        let mut c = 0;
        for p in parts {
            out.row_mut(r)[c..c + p.cols()].copy_from_slice(p.row(r));
            c += p.cols();
        }
    }
    out
}

fn split_cols<T: Real>(x: &Tensor<T>, at: usize) -> (Tensor<T>, Tensor<T>) {
    let (n, w) = (x.rows(), x.cols());
    let mut a = Tensor::zeros(n, at);
    let mut b = Tensor::zeros(n, w - at);
    for r in 0..n {
        a.row_mut(r).copy_from_slice(&x.row(r)[..at]);
        b.row_mut(r).copy_from_slice(&x.row(r)[at..]);
    }
    (a, b)
}

/// Single-query multi-head attention over `rows` keys; returns the context and
/// each head's weights.
fn attend<T: Real>(q: &[T], keys: &[T], values: &[T], rows: usize, heads: usize) -> (Vec<T>, Vec<Vec<T>>) {
    let m = q.len();
    let dh = m / heads;
    let scale = T::cast_from(1.0 / (dh as f64).sqrt());
    let mut ctx = vec![T::zero(); m];
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        let mut p: Vec<T> = (0..rows)
            .map(|i| {
                let k = &keys[i * m..(i + 1) * m][r.clone()];
                q[r.clone()].iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale
            })
            .collect();
        crate::numerics::softmax_row(&mut p);
        for (i, &pi) in p.iter().enumerate() {
            let v = &values[i * m..(i + 1) * m][r.clone()];
            for (c, &vv) in ctx[r.clone()].iter_mut().zip(v) {
                *c += pi * vv;
            }
        }
        probs.push(p);
    }
    (ctx, probs)
}

fn add_in_place<T: Real>(a: &mut [T], b: &[T]) {
    a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
}

impl<T: Real> Engine<T> {
    /// Float engine over a model's current parameters.
    pub fn float(model: &Model<T>) -> Result<Self> {
        let params = &model.params;
        Self::build(model, Precision::Float, |l| Ok(Dense::float(params, l)))
    }

    /// Integer engine: int8 dense kernels with frozen activation ranges.
    pub fn int8(q: &QuantizedModel) -> Result<Self> {
        let model: Model<T> = q.model.cast();
        Self::build(&model, Precision::Int8, |l| Dense::int8(q, l))
    }

    fn build(model: &Model<T>, precision: Precision, mut dense: impl FnMut(&Linear) -> Result<Dense<T>>) -> Result<Self> {
        let p = &model.params;
        let enc = &model.layout.encoder;
        let dl = &model.layout.decoder;
        let mut qrnn = Vec::with_capacity(enc.layers.len());
        for layer in &enc.layers {
            qrnn.push(layer.iter().map(&mut dense).collect::<Result<Vec<_>>>()?);
        }
        let mut layers = Vec::with_capacity(dl.layers.len());
        for l in &dl.layers {
            layers.push(Layer {
                ln_attn: Norm::new(p, &l.ln_attn),
                self_qkv: dense(&l.self_qkv)?,
                cross_q: dense(&l.cross_q)?,
                cross_kv: dense(&l.cross_kv)?,
                attn_out: dense(&l.attn_out)?,
                ln_ffn: Norm::new(p, &l.ln_ffn),
                ffn_in: dense(&l.ffn_in)?,
                ffn_out: dense(&l.ffn_out)?,
            });
        }
        Ok(Engine {
            config: model.config,
            vocab: model.vocab.clone(),
            precision,
            bottleneck: dense(&enc.bottleneck)?,
            qrnn,
            bridge: dense(&dl.bridge)?,
            embedding: p.get(dl.embedding).clone(),
            bos: p.get(dl.bos).data().to_vec(),
            positions: p.get(dl.positions).clone(),
            layers,
            ln_final: Norm::new(p, &dl.ln_final),
            copy_q: dense(&dl.copy_q)?,
            copy_kv: dense(&dl.copy_kv)?,
            copy_out: dense(&dl.copy_out)?,
            generate: dense(&dl.generate)?,
            gate: dense(&dl.gate)?,
        })
    }

    pub fn max_target_len(&self) -> usize {
        self.config.decoder.max_target_len
    }

    /// Encoder states `n × output_dim`, before the bridge.
    pub fn encoder_states<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Tensor<T>> {
        let cfg = &self.config.encoder;
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("cannot encode an empty source".into()));
        }
        if tokens.len() > cfg.max_source_len {
            return Err(Error::InvalidArgument(format!(
                "source has {} tokens; the limit is {}",
                tokens.len(),
                cfg.max_source_len
            )));
        }
        let proj = project_sequence(tokens, &self.config.projection)?;
        let mut x = self.bottleneck.apply(&proj.to_tensor())?;
        relu_in_place(&mut x);
        let s = cfg.qrnn_state;
        for (l, layer) in self.qrnn.iter().enumerate() {
            let mut outs = Vec::with_capacity(layer.len());
            for (d, gates) in layer.iter().enumerate() {
                let input = if d == 0 { x.clone() } else { reverse_rows(&x) };
                let g = gates.apply(&windows(&input, cfg.kernel_width))?;
                let n = g.rows();
                let mut h = Tensor::zeros(n, s);
                let mut c = vec![T::zero(); s];
                for t in 0..n {
                    let row = g.row(t);
                    for j in 0..s {
                        let (z, f, o) = (row[j].tanh(), sigmoid(row[s + j]), sigmoid(row[2 * s + j]));
                        c[j] = f * c[j] + (T::one() - f) * z;
                        h.set(t, j, o * c[j]);
                    }
                }
                outs.push(if d == 0 { h } else { reverse_rows(&h) });
            }
            x = if outs.len() == 1 { outs.pop().unwrap() } else { concat_cols(&outs) };
            if !x.all_finite() {
                return Err(Error::NonFinite(format!("QRNN layer {} output", l)));
            }
        }
        Ok(x)
    }

    /// Encode a source and precompute everything decoding steps reuse.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<EncodedSource<T>> {
        let e = self.encoder_states(tokens)?;
        let e_tilde = self.bridge.apply(&e)?;
        let m = self.config.decoder.model_dim;
        let cross = self
            .layers
            .iter()
            .map(|l| Ok(split_cols(&l.cross_kv.apply(&e_tilde)?, m)))
            .collect::<Result<Vec<_>>>()?;
        let (copy_k, copy_v) = split_cols(&self.copy_kv.apply(&e_tilde)?, m);
        Ok(EncodedSource {
            e_tilde,
            cross,
            copy_k,
            copy_v,
        })
    }

    pub fn start(&self) -> DecoderState<T> {
        DecoderState {
            step: 0,
            keys: vec![Vec::new(); self.layers.len()],
            values: vec![Vec::new(); self.layers.len()],
        }
    }

    fn input_embedding(&self, src: &EncodedSource<T>, prev: TargetToken, step: usize) -> Result<Vec<T>> {
        let v = self.vocab.len();
        let mut x = match prev {
            TargetToken::Generate(g) if g < v => self.embedding.row(g).to_vec(),
            TargetToken::Generate(g) => {
                return Err(Error::InvalidArgument(format!("vocabulary id {} out of range {}", g, v)))
            }
            TargetToken::Eos => self.embedding.row(EOS_ID).to_vec(),
            TargetToken::Bos => self.bos.clone(),
            TargetToken::Copy(i) if i < src.len() => src.e_tilde.row(i).to_vec(),
            TargetToken::Copy(i) => {
                return Err(Error::InvalidArgument(format!(
                    "copy position {} outside a {}-token source",
                    i,
                    src.len()
                )))
            }
        };
        add_in_place(&mut x, self.positions.row(step));
        Ok(x)
    }

    /// One decoding step: embed `prev`, run the stack against the cache, and
    /// produce the output mixture.
    pub fn step(&self, src: &EncodedSource<T>, state: &mut DecoderState<T>, prev: TargetToken) -> Result<StepOutput<T>> {
        let dc = &self.config.decoder;
        if state.step >= dc.max_target_len {
            return Err(Error::InvalidArgument(format!("max_target_len {} reached", dc.max_target_len)));
        }
        let m = dc.model_dim;
        let n = src.len();
        let mut y = self.input_embedding(src, prev, state.step)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let h = layer.ln_attn.apply(&y);
            let kqv = layer.self_qkv.apply_row(&h)?;
            state.keys[l].extend_from_slice(&kqv[..m]);
            state.values[l].extend_from_slice(&kqv[2 * m..]);
            let t = state.step + 1;
            let (mut merged, _) = attend(&kqv[m..2 * m], &state.keys[l], &state.values[l], t, dc.heads);
            let cq = layer.cross_q.apply_row(&h)?;
            let (ck, cv) = &src.cross[l];
            let (cross, _) = attend(&cq, ck.data(), cv.data(), n, dc.heads);
            add_in_place(&mut merged, &cross);
            add_in_place(&mut y, &layer.attn_out.apply_row(&merged)?);
            let h = layer.ln_ffn.apply(&y);
            let mut f = layer.ffn_in.apply_row(&h)?;
            f.iter_mut().for_each(|v| *v = v.max(T::zero()));
            add_in_place(&mut y, &layer.ffn_out.apply_row(&f)?);
        }
        state.step += 1;
        let d = self.ln_final.apply(&y);

        let q = self.copy_q.apply_row(&d)?;
        let (ctx, heads) = attend(&q, src.copy_k.data(), src.copy_v.data(), n, dc.copy_heads);
        let inv = T::cast_from(1.0 / dc.copy_heads as f64);
        let copy_probs: Vec<T> = (0..n).map(|i| heads.iter().map(|p| p[i]).sum::<T>() * inv).collect();
        let w = self.copy_out.apply_row(&ctx)?;

        let mut gen_probs = self.generate.apply_row(&d)?;
        crate::numerics::softmax_row(&mut gen_probs);
        let dw: Vec<T> = d.iter().chain(&w).copied().collect();
        let gate = sigmoid(self.gate.apply_row(&dw)?[0]);
        let combined = gen_probs
            .iter()
            .map(|&g| gate * g)
            .chain(copy_probs.iter().map(|&c| (T::one() - gate) * c))
            .collect::<Vec<T>>();
        if combined.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("output distribution at step {}", state.step - 1)));
        }
        Ok(StepOutput {
            d,
            gen_probs,
            copy_probs,
            w,
            gate,
            combined,
        })
    }

    /// Teacher-forced log-probability of a complete token sequence.
    pub fn score(&self, src: &EncodedSource<T>, tokens: &[TargetToken]) -> Result<f64> {
        let mut state = self.start();
        let mut prev = TargetToken::Bos;
        let mut total = 0.0;
        for &t in tokens {
            let out = self.step(src, &mut state, prev)?;
            let idx = t
                .combined_index(self.vocab.len())
                .ok_or_else(|| Error::InvalidArgument("BOS cannot be scored".into()))?;
            let p = *out
                .combined
                .get(idx)
                .ok_or_else(|| Error::InvalidArgument(format!("token index {} outside the output", idx)))?;
            total += p.as_f64().max(crate::pointer_generator::PROB_FLOOR).ln();
            prev = t;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{bridge_encoder_states, copy_attention, decode_prefix};
    use crate::encoder::encode;
    use crate::model::Ctx;
    use crate::numerics::Tape;
    use crate::pointer_generator::{head, teacher_forced};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny<T: Real>(seed: u64) -> Model<T> {
        Model::new(ModelConfig::tiny(), Vocab::synthetic(12), seed).unwrap()
    }

    fn random_prefix(rng: &mut ChaCha8Rng, v: usize, n: usize, len: usize) -> Vec<TargetToken> {
        let mut p = vec![TargetToken::Bos];
        for _ in 1..len {
            p.push(match rng.gen_range(0..3) {
                0 => TargetToken::Generate(rng.gen_range(0..v)),
                1 => TargetToken::Copy(rng.gen_range(0..n)),
                _ => TargetToken::Eos,
            });
        }
        p
    }

    #[test]
    fn window_layout_matches_conv_taps() {
        let x = Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = windows(&x, 2);
        assert_eq!(w.data(), &[0.0, 0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn encoder_matches_tape() {
        let m = tiny::<f64>(2);
        let e = Engine::float(&m).unwrap();
        let toks = ["play", "some", "jazz", "now"];
        let mut tape = Tape::new(&m.params);
        let v = encode(&mut tape, &mut Ctx::eval(), &m, &toks).unwrap();
        assert!(tape.value(v).max_abs_diff(&e.encoder_states(&toks).unwrap()) < 1e-12);
    }

    #[test]
    fn incremental_steps_match_full_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for case in 0..20 {
            let m = tiny::<f64>(case);
            let e = Engine::float(&m).unwrap();
            let n = rng.gen_range(1..6);
            let toks: Vec<String> = (0..n).map(|i| format!("w{}", rng.gen_range(0..50) + i)).collect();
            let prev = random_prefix(&mut rng, 12, n, 5);

            let mut tape = Tape::new(&m.params);
            let mut ctx = Ctx::eval();
            let enc = encode(&mut tape, &mut ctx, &m, &toks).unwrap();
            let et = bridge_encoder_states(&mut tape, &mut ctx, &m, enc).unwrap();
            let d = decode_prefix(&mut tape, &mut ctx, &m, et, &prev).unwrap();
            let (pc, w) = copy_attention(&mut tape, &mut ctx, &m, d, et).unwrap();
            let comb = head(&mut tape, &mut ctx, &m, d, pc, w).unwrap();

            let src = e.encode(&toks).unwrap();
            let mut st = e.start();
            for (t, &p) in prev.iter().enumerate() {
                let out = e.step(&src, &mut st, p).unwrap();
                for (a, b) in out.d.iter().zip(tape.value(d).row(t)) {
                    assert!((a - b).abs() < 1e-9);
                }
                for (a, b) in out.combined.iter().zip(tape.value(comb).row(t)) {
                    assert!((a - b).abs() < 1e-9);
                }
                assert_eq!(out.copy_probs.len(), n);
            }
        }
    }

    #[test]
    fn score_matches_teacher_forced_loss() {
        let m = tiny::<f64>(4);
        let e = Engine::float(&m).unwrap();
        let toks = ["call", "mom"];
        let targets = [TargetToken::Generate(3), TargetToken::Copy(1), TargetToken::Generate(1), TargetToken::Eos];
        let mut tape = Tape::new(&m.params);
        let tf = teacher_forced(&mut tape, &mut Ctx::eval(), &m, &toks, &targets).unwrap();
        let nll = tape.value(tf.loss).data()[0];
        let lp = e.score(&e.encode(&toks).unwrap(), &targets).unwrap();
        assert!((lp + nll * targets.len() as f64).abs() < 1e-10);
    }

    #[test]
    fn step_cap_and_bad_tokens() {
        let m = tiny::<f32>(1);
        let e = Engine::float(&m).unwrap();
        let src = e.encode(&["a"]).unwrap();
        let mut st = e.start();
        assert!(e.step(&src, &mut st.clone(), TargetToken::Copy(1)).is_err());
        assert!(e.step(&src, &mut st.clone(), TargetToken::Generate(12)).is_err());
        for _ in 0..e.max_target_len() {
            e.step(&src, &mut st, TargetToken::Bos).unwrap();
        }
        assert!(e.step(&src, &mut st, TargetToken::Eos).is_err());
        assert!(e.encode::<&str>(&[]).is_err());
    }

    #[test]
    fn single_source_token_copies_with_certainty() {
        let m = tiny::<f32>(3);
        let e = Engine::float(&m).unwrap();
        let src = e.encode(&["hello"]).unwrap();
        let out = e.step(&src, &mut e.start(), TargetToken::Bos).unwrap();
        assert_eq!(out.copy_probs, vec![1.0]);
        assert!((out.combined.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn int8_engine_tracks_float_under_matching_ranges() {
        // Ranges observed on the same inputs keep the integer path close to float.
        let m = tiny::<f32>(6);
        let toks = ["set", "an", "alarm", "for", "six"];
        let prev = [TargetToken::Bos, TargetToken::Generate(4), TargetToken::Copy(2)];
        let mut tape = Tape::new(&m.params);
        let mut ctx = Ctx::train(crate::model::QuantSim::Off, true, 0.0, 0);
        let targets = [TargetToken::Generate(4), TargetToken::Copy(2), TargetToken::Eos];
        teacher_forced(&mut tape, &mut ctx, &m, &toks, &targets).unwrap();
        let mut mm = m.clone();
        mm.ranges.update(ctx.observer.as_ref().unwrap());
        let q = QuantizedModel::from_float(&mm).unwrap();
        let (fe, ie) = (Engine::float(&m).unwrap(), Engine::<f32>::int8(&q).unwrap());
        assert_eq!(ie.precision, Precision::Int8);
        let (fs, is) = (fe.encode(&toks).unwrap(), ie.encode(&toks).unwrap());
        let (mut fst, mut ist) = (fe.start(), ie.start());
        for &p in &prev {
            let a = fe.step(&fs, &mut fst, p).unwrap();
            let b = ie.step(&is, &mut ist, p).unwrap();
            let tv: f32 = a.combined.iter().zip(&b.combined).map(|(x, y)| (x - y).abs()).sum::<f32>() / 2.0;
            assert!(tv < 0.05, "total variation {}", tv);
            assert!((b.combined.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}
