//! Output head: generation softmax, copy gate, mixture, and the sequence loss.

use crate::decoder::{bridge_encoder_states, copy_attention, decode_prefix};
use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::model::{Ctx, Model};
use crate::numerics::{grad_check, sigmoid, GradCheckOptions, GradCheckReport, Gradients, Real, Tape, Tensor, Var};
use crate::vocab::TargetToken;

pub const PROB_FLOOR: f64 = 1e-9;
const NORMALIZATION_TOLERANCE: f64 = 1e-5;

/// Per-step output distribution over `V` vocabulary slots and `n` source slots.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDistribution {
    pub gen_probs: Vec<f64>,
    pub copy_probs: Vec<f64>,
    pub gate: f64,
    pub combined: Vec<f64>,
}

/// `softmax(d·W + b)` for a single decoder output.
pub fn generation_distribution(d: &[f64], w: &Tensor<f64>, b: &[f64]) -> Result<Vec<f64>> {
    if w.rows() != d.len() || b.len() != w.cols() || w.cols() < 2 {
        return Err(Error::shape("generation_distribution", format!("{} · {:?} + {}", d.len(), w.shape(), b.len())));
    }
    let mut logits: Vec<f64> = b.to_vec();
    for (i, &x) in d.iter().enumerate() {
        for (l, &wv) in logits.iter_mut().zip(w.row(i)) {
            *l += x * wv;
        }
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    logits.iter_mut().for_each(|l| *l = (*l - mx).exp());
    let z: f64 = logits.iter().sum();
    logits.iter_mut().for_each(|l| *l /= z);
    Ok(logits)
}

/// `sigmoid(w·[d; w_t] + b)`.
pub fn copy_gate(d: &[f64], w_t: &[f64], weights: &[f64], bias: f64) -> Result<f64> {
    if weights.len() != d.len() + w_t.len() {
        return Err(Error::shape("copy_gate", format!("{} weights for {} inputs", weights.len(), d.len() + w_t.len())));
    }
    let s: f64 = d.iter().chain(w_t).zip(weights).map(|(x, w)| x * w).sum::<f64>() + bias;
    Ok(sigmoid(s))
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.is_empty() || (s - 1.0).abs() > NORMALIZATION_TOLERANCE || p.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::InvalidArgument(format!("{} is not a distribution (sum {})", name, s)));
    }
    Ok(())
}

/// `p = p_w·p_g ⊕ (1 − p_w)·p_c`.
pub fn mixture(p_g: &[f64], p_c: &[f64], p_w: f64) -> Result<MixtureDistribution> {
    check_distribution("generation distribution", p_g)?;
    check_distribution("copy distribution", p_c)?;
    if !(0.0..=1.0).contains(&p_w) {
        return Err(Error::InvalidArgument(format!("gate {} outside [0, 1]", p_w)));
    }
    let combined = p_g.iter().map(|&g| p_w * g).chain(p_c.iter().map(|&c| (1.0 - p_w) * c)).collect();
    Ok(MixtureDistribution {
        gen_probs: p_g.to_vec(),
        copy_probs: p_c.to_vec(),
        gate: p_w,
        combined,
    })
}

/// Mean of `−ln max(p_t[target_t], 1e-9)` over rows of a `T × (V+n)` matrix.
pub fn sequence_nll_values(combined: &Tensor<f64>, targets: &[TargetToken], vocab_size: usize) -> Result<f64> {
    let idx = target_indices(targets, vocab_size, combined.cols() - vocab_size)?;
    if idx.len() != combined.rows() {
        return Err(Error::shape("sequence_nll", format!("{} targets for {} steps", idx.len(), combined.rows())));
    }
    let total: f64 = idx.iter().enumerate().map(|(t, &i)| -combined.get(t, i).max(PROB_FLOOR).ln()).sum();
    Ok(total / idx.len() as f64)
}

fn target_indices(targets: &[TargetToken], vocab_size: usize, n: usize) -> Result<Vec<usize>> {
    targets
        .iter()
        .map(|&t| match t {
            TargetToken::Copy(i) if i >= n => Err(Error::InvalidArgument(format!(
                "copy target {} outside a {}-token source",
                i, n
            ))),
            TargetToken::Generate(v) if v >= vocab_size => {
                Err(Error::InvalidArgument(format!("vocabulary target {} out of range", v)))
            }
            TargetToken::Bos => Err(Error::InvalidArgument("BOS cannot be a target".into())),
            t => Ok(t.combined_index(vocab_size).expect("non-BOS")),
        })
        .collect()
}

/// Differentiable head over decoder outputs `d` (t × m), copy weights `p_c`
/// (t × n) and copy contexts `w` (t × m). Returns the `t × (V+n)` mixture.
pub fn head<T: Real>(tape: &mut Tape<T>, ctx: &mut Ctx, model: &Model<T>, d: Var, pc: Var, w: Var) -> Result<Var> {
    let dl = &model.layout.decoder;
    let logits = ctx.linear(tape, &dl.generate, d)?;
    let pg = tape.softmax(logits)?;
    let dw = tape.concat_cols(&[d, w])?;
    let g = ctx.linear(tape, &dl.gate, dw)?;
    let gate = tape.sigmoid(g);
    let t = tape.shape(d)[0];
    let ones = tape.constant(Tensor::filled(t, 1, T::one()));
    let inv = tape.sub(ones, gate)?;
    let gen = tape.mul(pg, gate)?;
    let copy = tape.mul(pc, inv)?;
    tape.concat_cols(&[gen, copy])
}

/// Differentiable teacher-forced loss over a `t × (V+n)` mixture.
pub fn sequence_nll<T: Real>(tape: &mut Tape<T>, combined: Var, targets: &[TargetToken], vocab_size: usize) -> Result<Var> {
    let [t, width] = tape.shape(combined);
    let idx = target_indices(targets, vocab_size, width - vocab_size)?;
    if idx.len() != t {
        return Err(Error::shape("sequence_nll", format!("{} targets for {} steps", idx.len(), t)));
    }
    let flat = tape.reshape(combined, t * width, 1)?;
    let rows: Vec<usize> = idx.iter().enumerate().map(|(s, &i)| s * width + i).collect();
    let picked = tape.gather(flat, &rows)?;
    let logp = tape.log(picked, T::cast_from(PROB_FLOOR));
    let total = tape.sum(logp);
    tape.scale(total, T::cast_from(-1.0 / t as f64))
}

/// Decoder inputs for teacher forcing: `Bos` followed by all but the last target.
pub fn shifted_inputs(targets: &[TargetToken]) -> Vec<TargetToken> {
    let mut prev = Vec::with_capacity(targets.len());
    prev.push(TargetToken::Bos);
    prev.extend_from_slice(&targets[..targets.len().saturating_sub(1)]);
    prev
}

/// Handles into a teacher-forced forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TeacherForced {
    pub combined: Var,
    pub loss: Var,
}

/// Full model on one example: encode, decode under teacher forcing, mix, and
/// score the targets.
pub fn teacher_forced<T: Real, S: AsRef<str>>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx,
    model: &Model<T>,
    source: &[S],
    targets: &[TargetToken],
) -> Result<TeacherForced> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("empty target sequence".into()));
    }
    let e = encode(tape, ctx, model, source)?;
    let et = bridge_encoder_states(tape, ctx, model, e)?;
    let prev = shifted_inputs(targets);
    let d = decode_prefix(tape, ctx, model, et, &prev)?;
    let (pc, w) = copy_attention(tape, ctx, model, d, et)?;
    let combined = head(tape, ctx, model, d, pc, w)?;
    let loss = sequence_nll(tape, combined, targets, model.vocab.len())?;
    if !tape.value(loss).all_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(TeacherForced { combined, loss })
}

/// Finite-difference check of the full teacher-forced loss in 64-bit mode.
pub fn grad_check_model<S: AsRef<str>>(
    model: &Model<f64>,
    source: &[S],
    targets: &[TargetToken],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut scratch = model.clone();
    grad_check(
        &model.params,
        |params, grads: Option<&mut Gradients<f64>>| {
            scratch.params.clone_from(params);
            let mut tape = Tape::new(&scratch.params);
            let tf = teacher_forced(&mut tape, &mut Ctx::eval(), &scratch, source, targets)?;
            let loss = tape.value(tf.loss).data()[0];
            if let Some(g) = grads {
                tape.backward(tf.loss, g)?;
            }
            Ok(loss)
        },
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::vocab::Vocab;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generation_cases() {
        let w = Tensor::zeros(3, 4);
        let p = generation_distribution(&[1.0, 2.0, 3.0], &w, &[0.0; 4]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::from_vec(3, 5, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d = [0.2, -0.7, 1.1];
        let p = generation_distribution(&d, &w, &b).unwrap();
        let logits: Vec<f64> = (0..5).map(|j| b[j] + (0..3).map(|i| d[i] * w.get(i, j)).sum::<f64>()).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for j in 0..5 {
            assert!((p[j] - logits[j].exp() / z).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gate_cases() {
        assert_eq!(copy_gate(&[1.0, 2.0], &[3.0, 4.0], &[0.0; 4], 0.0).unwrap(), 0.5);
        assert!(copy_gate(&[1.0], &[1.0], &[0.0, 0.0], 20.0).unwrap() > 1.0 - 1e-8);
        let g = copy_gate(&[0.5], &[-1.0], &[2.0, 0.5], 0.1).unwrap();
        assert!((g - 1.0 / (1.0 + (-(1.0 - 0.5 + 0.1f64)).exp())).abs() < 1e-12);
    }

    #[test]
    fn mixture_cases() {
        let m = mixture(&[0.5, 0.5], &[1.0], 0.3).unwrap();
        let expect = [0.15, 0.15, 0.70];
        for (a, b) in m.combined.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(mixture(&[0.5, 0.5], &[0.25, 0.75], 1.0).unwrap().combined, vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(mixture(&[0.5, 0.5], &[0.25, 0.75], 0.0).unwrap().combined, vec![0.0, 0.0, 0.25, 0.75]);
        assert!(mixture(&[0.5, 0.6], &[1.0], 0.5).is_err());
        // Monotone in the gate.
        let (lo, hi) = (mixture(&[0.3, 0.7], &[0.4, 0.6], 0.2).unwrap(), mixture(&[0.3, 0.7], &[0.4, 0.6], 0.6).unwrap());
        assert!(hi.combined[..2].iter().zip(&lo.combined[..2]).all(|(h, l)| h > l));
        assert!(hi.combined[2..].iter().zip(&lo.combined[2..]).all(|(h, l)| h < l));
    }

    #[test]
    fn nll_cases() {
        let uniform = Tensor::filled(1, 4, 0.25);
        let l = sequence_nll_values(&uniform, &[TargetToken::Copy(1)], 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let sure = Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        assert!(sequence_nll_values(&sure, &[TargetToken::Generate(1)], 2).unwrap() <= 1e-6);
        let two = Tensor::from_rows(&[vec![0.5, 0.25, 0.25], vec![0.25, 0.25, 0.5]]).unwrap();
        let l = sequence_nll_values(&two, &[TargetToken::Eos, TargetToken::Generate(1)], 2).unwrap();
        assert!((l - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
        assert!(sequence_nll_values(&two, &[TargetToken::Eos, TargetToken::Copy(1)], 2).is_err());
        // Tape version agrees.
        let store = crate::numerics::ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let c = tape.constant(two.clone());
        let v = sequence_nll(&mut tape, c, &[TargetToken::Eos, TargetToken::Generate(1)], 2).unwrap();
        assert!((tape.value(v).data()[0] - l).abs() < 1e-12);
    }

    fn tiny() -> Model<f64> {
        Model::new(ModelConfig::tiny(), Vocab::synthetic(12), 21).unwrap()
    }

    #[test]
    fn combined_rows_normalize() {
        let m = tiny();
        let mut tape = Tape::new(&m.params);
        let targets = [TargetToken::Generate(3), TargetToken::Copy(1), TargetToken::Generate(1), TargetToken::Eos];
        let tf = teacher_forced(&mut tape, &mut Ctx::eval(), &m, &["a", "b", "c"], &targets).unwrap();
        let c = tape.value(tf.combined);
        assert_eq!(c.shape(), [4, 15]);
        for r in 0..4 {
            assert!((c.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(teacher_forced(&mut tape, &mut Ctx::eval(), &m, &["a"], &[TargetToken::Copy(1)]).is_err());
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let m = tiny();
        let targets = [TargetToken::Generate(2), TargetToken::Copy(0), TargetToken::Copy(1), TargetToken::Generate(1), TargetToken::Eos];
        let report = grad_check_model(&m, &["call", "mom"], &targets, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{:?}", report.worst);
    }
}
