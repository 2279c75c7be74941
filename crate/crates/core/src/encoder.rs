//! Projection → ReLU bottleneck → stacked bidirectional QRNN.

use crate::error::{Error, Result};
use crate::model::{Ctx, Linear, Model};
use crate::numerics::{Real, Tape, Var};
use crate::projection::{project_sequence, TernaryMatrix};

pub use crate::config::EncoderConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// `relu(proj·W_b + b_b)`.
pub fn bottleneck_forward<T: Real>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx,
    model: &Model<T>,
    proj: &TernaryMatrix,
) -> Result<Var> {
    let lin = &model.layout.encoder.bottleneck;
    let expected = model.params.get(lin.w).rows();
    if proj.cols != expected {
        return Err(Error::shape(
            "bottleneck",
            format!("projection width {} but weights expect {}", proj.cols, expected),
        ));
    }
    let x = tape.constant(proj.to_tensor());
    let y = ctx.linear(tape, lin, x)?;
    Ok(tape.relu(y))
}

fn reversed(n: usize) -> Vec<usize> {
    (0..n).rev().collect()
}

/// One QRNN direction with fo-pooling. The gate convolution sees rows
/// `t−width+1 ..= t` of the (possibly reversed) input.
pub fn qrnn_fo_pool<T: Real>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx,
    gates: &Linear,
    x: Var,
    state: usize,
    width: usize,
    direction: Direction,
) -> Result<Var> {
    let n = tape.shape(x)[0];
    if n == 0 {
        return Err(Error::InvalidArgument("QRNN input has no rows".into()));
    }
    let input = match direction {
        Direction::Forward => x,
        Direction::Backward => tape.gather(x, &reversed(n))?,
    };
    let g = ctx.conv(tape, gates, input, width)?;
    let z = tape.slice_cols(g, 0..state)?;
    let f = tape.slice_cols(g, state..2 * state)?;
    let o = tape.slice_cols(g, 2 * state..3 * state)?;
    let (z, f, o) = (tape.tanh(z), tape.sigmoid(f), tape.sigmoid(o));
    let h = tape.fo_pool(z, f, o)?;
    match direction {
        Direction::Forward => Ok(h),
        Direction::Backward => tape.gather(h, &reversed(n)),
    }
}

/// Encoder states `n × output_dim` for a token sequence.
pub fn encode<T: Real, S: AsRef<str>>(tape: &mut Tape<T>, ctx: &mut Ctx, model: &Model<T>, tokens: &[S]) -> Result<Var> {
    let cfg = &model.config.encoder;
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
    let proj = project_sequence(tokens, &model.config.projection)?;
    let mut x = bottleneck_forward(tape, ctx, model, &proj)?;
    for (l, layer) in model.layout.encoder.layers.iter().enumerate() {
        let mut outs = Vec::with_capacity(layer.len());
        for (d, gates) in layer.iter().enumerate() {
            let dir = if d == 0 { Direction::Forward } else { Direction::Backward };
            let h = qrnn_fo_pool(tape, ctx, gates, x, cfg.qrnn_state, cfg.kernel_width, dir)?;
            outs.push(h);
        }
        x = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        if !tape.value(x).all_finite() {
            return Err(Error::NonFinite(format!("QRNN layer {} output", l)));
        }
        x = ctx.dropout(tape, x)?;
    }
    Ok(x)
}
