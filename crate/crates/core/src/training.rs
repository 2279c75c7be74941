//! Teacher-forced training with Adam, gradient clipping, and quantization-aware
//! fine-tuning; corpus evaluation through beam search.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Example;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::inference::beam_search_from;
use crate::metrics::{EvalAccumulator, EvalReport};
use crate::model::{Ctx, Model, QuantSim, RangeObserver};
use crate::numerics::{Gradients, Real, Tape, Tensor};
use crate::parallel;
use crate::pointer_generator::teacher_forced;

/// Examples whose gradients are summed sequentially inside one work item.
/// Fixed so the reduction order never depends on the worker count.
const CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub dropout: f64,
    pub clip_norm: f64,
    /// Learn activation ranges and fake-quantize the second part of training.
    pub quantize: bool,
    /// Fraction of `total_steps` trained in float before fake-quant starts.
    pub qat_start: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Dev evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub eval_topk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 3e-3,
            warmup_steps: 100,
            total_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            dropout: 0.1,
            clip_norm: 1.0,
            quantize: false,
            qat_start: 0.5,
            seed: 1,
            log_every: 50,
            eval_every: 0,
            eval_topk: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.total_steps <= self.warmup_steps {
            return bad("total_steps must exceed warmup_steps");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("learning_rate must be ≥ 0 and moment decays in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.clip_norm > 0.0) || !(self.adam_eps > 0.0) {
            return bad("clip_norm and adam_eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.qat_start) {
            return bad("qat_start must be in [0, 1]");
        }
        if self.eval_topk == 0 {
            return bad("eval_topk must be at least 1");
        }
        Ok(())
    }

    /// First step that trains with fake quantization.
    pub fn qat_first_step(&self) -> usize {
        (self.qat_start * self.total_steps as f64).round() as usize
    }
}

/// Linear warmup to the peak rate, then `lr·√(warmup/step)`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_steps;
    if step < w {
        cfg.learning_rate * step as f64 / w as f64
    } else {
        cfg.learning_rate * (w.max(1) as f64 / step.max(1) as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    pub qat: bool,
}

impl StepStats {
    pub fn log_line(&self) -> String {
        format!(
            "step={} loss={:.6} lr={:.8} grad_norm={:.6} qat={}",
            self.step, self.loss, self.lr, self.grad_norm, self.qat as u8
        )
    }
}

fn example_seed(seed: u64, step: usize, index: usize) -> u64 {
    let mut z = seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct ChunkResult {
    losses: Vec<f64>,
    grads: Gradients<f32>,
    observed: Option<RangeObserver>,
}

/// Model plus optimizer state.
pub struct Trainer {
    pub model: Model<f32>,
    pub cfg: TrainConfig,
    pub step: usize,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let zeros: Vec<Tensor<f32>> = model
            .params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Ok(Trainer {
            model,
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn qat_active(&self) -> bool {
        self.cfg.quantize && self.step >= self.cfg.qat_first_step()
    }

    fn run_chunk(&self, offset: usize, chunk: &[Example], dropout: f64) -> Result<ChunkResult> {
        let model = &self.model;
        let quant = if self.qat_active() {
            QuantSim::Fake(&model.ranges)
        } else {
            QuantSim::Off
        };
        let mut grads = Gradients::for_store(&model.params);
        let mut observed: Option<RangeObserver> = None;
        let mut losses = Vec::with_capacity(chunk.len());
        for (j, ex) in chunk.iter().enumerate() {
            let seed = example_seed(self.cfg.seed, self.step, offset + j);
            let mut ctx = Ctx::train(quant, self.cfg.quantize, dropout, seed);
            let mut tape = Tape::new(&model.params);
            let tf = teacher_forced(&mut tape, &mut ctx, model, &ex.source, &ex.target)?;
            losses.push(tape.value(tf.loss).data()[0] as f64);
            tape.backward(tf.loss, &mut grads)?;
            if let Some(o) = ctx.observer {
                match observed.as_mut() {
                    Some(acc) => acc.merge(&o),
                    None => observed = Some(o),
                }
            }
        }
        Ok(ChunkResult { losses, grads, observed })
    }

    /// Mean teacher-forced loss over a batch without updating anything.
    pub fn batch_loss(&self, batch: &[Example]) -> Result<f64> {
        let chunks: Vec<&[Example]> = batch.chunks(CHUNK).collect();
        let results = parallel::map(&chunks, |i, c| self.run_chunk(i * CHUNK, c, 0.0));
        let mut total = 0.0;
        for r in results {
            total += r?.losses.iter().sum::<f64>();
        }
        Ok(total / batch.len() as f64)
    }

    /// One update: forward/backward over the batch, clip, Adam, range EMA.
    pub fn train_step(&mut self, batch: &[Example]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let qat = self.qat_active();
        if qat {
            self.model.ranges.check_complete(&self.model.layout)?;
        }
        let chunks: Vec<&[Example]> = batch.chunks(CHUNK).collect();
        let dropout = self.cfg.dropout;
        let results = parallel::map(&chunks, |i, c| self.run_chunk(i * CHUNK, c, dropout));

        let mut grads = Gradients::for_store(&self.model.params);
        let mut observed = RangeObserver::default();
        let mut loss = 0.0;
        for r in results {
            let r = r?;
            for (j, &l) in r.losses.iter().enumerate() {
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!("loss at step {} (batch item {})", self.step, j)));
                }
                loss += l;
            }
            grads.merge(&r.grads);
            if let Some(o) = &r.observed {
                observed.merge(o);
            }
        }
        let n = batch.len() as f64;
        loss /= n;
        grads.scale(1.0 / n as f32);
        if !grads.all_finite() {
            return Err(Error::NonFinite(format!("gradients at step {}", self.step)));
        }
        let grad_norm = grads.global_norm() as f64;
        if grad_norm > self.cfg.clip_norm {
            grads.scale((self.cfg.clip_norm / grad_norm) as f32);
        }

        let t = self.step + 1;
        let lr = lr_schedule(t, &self.cfg);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        let ids: Vec<_> = self.model.params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = self.model.params.get_mut(id);
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let gv = gv as f64;
                let mn = b1 * *mv as f64 + (1.0 - b1) * gv;
                let vn = b2 * *vv as f64 + (1.0 - b2) * gv * gv;
                *mv = mn as f32;
                *vv = vn as f32;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + self.cfg.adam_eps);
                *pv -= update as f32;
            }
        }
        if self.cfg.quantize {
            self.model.ranges.update(&observed);
        }
        self.step = t;
        Ok(StepStats {
            step: t,
            loss,
            grad_norm,
            lr,
            qat,
        })
    }
}

/// Something that returns rendered top-K parses for a tokenized query.
pub trait Parser: Sync {
    fn parse_topk(&self, source: &[String], k: usize) -> Result<Vec<String>>;
}

impl<T: Real> Parser for Engine<T> {
    fn parse_topk(&self, source: &[String], k: usize) -> Result<Vec<String>> {
        let src = self.encode(source)?;
        beam_search_from(self, &src, k)?
            .iter()
            .map(|h| h.render(source, &self.vocab))
            .collect()
    }
}

/// Beam-search every example and aggregate exact match at 1..=k, intent
/// accuracy and slot F1.
pub fn evaluate<P: Parser>(parser: &P, examples: &[Example], k: usize) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let mut acc = EvalAccumulator::new(k)?;
    let outputs = parallel::map(examples, |_, ex| parser.parse_topk(&ex.source, k));
    for (ex, hyps) in examples.iter().zip(outputs) {
        acc.add(&hyps?, &ex.tree)?;
    }
    acc.report()
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub history: Vec<StepStats>,
    /// `(step, report)` for each dev evaluation.
    pub reports: Vec<(usize, EvalReport)>,
}

/// Full training run: shuffled batches for `total_steps`, with log lines and
/// optional periodic dev evaluation written to `log`.
pub fn train(
    model: Model<f32>,
    train_set: &[Example],
    dev: Option<&[Example]>,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut history = Vec::with_capacity(cfg.total_steps);
    let mut reports = Vec::new();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    while trainer.step < cfg.total_steps {
        batch.clear();
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train_set[order[cursor]].clone());
            cursor += 1;
        }
        let stats = trainer.train_step(&batch)?;
        if cfg.log_every > 0 && (stats.step % cfg.log_every == 0 || stats.step == 1) {
            writeln!(log, "{}", stats.log_line())?;
        }
        history.push(stats);
        let periodic = cfg.eval_every > 0 && stats.step % cfg.eval_every == 0;
        if let Some(dev) = dev.filter(|d| !d.is_empty()) {
            if periodic || stats.step == cfg.total_steps {
                let r = evaluate(&Engine::float(&trainer.model)?, dev, cfg.eval_topk)?;
                writeln!(log, "eval step={} {}", stats.step, r.to_key_value().trim_end().replace('\n', " "))?;
                reports.push((stats.step, r));
            }
        }
    }
    Ok(TrainOutcome {
        model: trainer.model,
        history,
        reports,
    })
}

/// `key=value` run configuration: training keys plus `model` (a preset name)
/// and individual architecture overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::reduced(),
            train: TrainConfig::default(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{}` for `{}`", value, key)))
}

impl RunConfig {
    /// Apply one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (t, m) = (&mut self.train, &mut self.model);
        match key {
            "model" => {
                *m = match value {
                    "default" | "full" => ModelConfig::default(),
                    "reduced" => ModelConfig::reduced(),
                    "tiny" => ModelConfig::tiny(),
                    _ => return Err(Error::InvalidArgument(format!("unknown model preset `{}`", value))),
                }
            }
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "learning_rate" => t.learning_rate = parse_value(key, value)?,
            "warmup_steps" => t.warmup_steps = parse_value(key, value)?,
            "total_steps" => t.total_steps = parse_value(key, value)?,
            "beta1" => t.beta1 = parse_value(key, value)?,
            "beta2" => t.beta2 = parse_value(key, value)?,
            "adam_eps" => t.adam_eps = parse_value(key, value)?,
            "dropout" => t.dropout = parse_value(key, value)?,
            "clip_norm" => t.clip_norm = parse_value(key, value)?,
            "quantize" => t.quantize = parse_value(key, value)?,
            "qat_start" => t.qat_start = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "log_every" => t.log_every = parse_value(key, value)?,
            "eval_every" => t.eval_every = parse_value(key, value)?,
            "eval_topk" => t.eval_topk = parse_value(key, value)?,
            "projection.feature_dim" => m.projection.feature_dim = parse_value(key, value)?,
            "encoder.bottleneck_dim" => m.encoder.bottleneck_dim = parse_value(key, value)?,
            "encoder.qrnn_layers" => m.encoder.qrnn_layers = parse_value(key, value)?,
            "encoder.qrnn_state" => m.encoder.qrnn_state = parse_value(key, value)?,
            "encoder.kernel_width" => m.encoder.kernel_width = parse_value(key, value)?,
            "encoder.bidirectional" => m.encoder.bidirectional = parse_value(key, value)?,
            "encoder.max_source_len" => m.encoder.max_source_len = parse_value(key, value)?,
            "decoder.layers" => m.decoder.layers = parse_value(key, value)?,
            "decoder.model_dim" => {
                m.decoder.model_dim = parse_value(key, value)?;
                m.decoder.embedding_dim = m.decoder.model_dim;
            }
            "decoder.ffn_dim" => m.decoder.ffn_dim = parse_value(key, value)?,
            "decoder.heads" => m.decoder.heads = parse_value(key, value)?,
            "decoder.copy_heads" => m.decoder.copy_heads = parse_value(key, value)?,
            "decoder.max_target_len" => m.decoder.max_target_len = parse_value(key, value)?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key `{}`", key))),
        }
        Ok(())
    }

    /// Parse a config file: one `key=value` per line, `#` comments. A `model`
    /// preset line is applied before the other keys regardless of position.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected key=value", i + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = RunConfig::default();
        pairs.sort_by_key(|(k, _)| k != "model");
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        format!(
            "batch_size={}\nlearning_rate={}\nwarmup_steps={}\ntotal_steps={}\nbeta1={}\nbeta2={}\nadam_eps={}\n\
             dropout={}\nclip_norm={}\nquantize={}\nqat_start={}\nseed={}\nlog_every={}\neval_every={}\neval_topk={}\n\
             projection.feature_dim={}\nencoder.bottleneck_dim={}\nencoder.qrnn_layers={}\nencoder.qrnn_state={}\n\
             encoder.kernel_width={}\nencoder.bidirectional={}\nencoder.max_source_len={}\ndecoder.layers={}\n\
             decoder.model_dim={}\ndecoder.ffn_dim={}\ndecoder.heads={}\ndecoder.copy_heads={}\ndecoder.max_target_len={}\n",
            t.batch_size,
            t.learning_rate,
            t.warmup_steps,
            t.total_steps,
            t.beta1,
            t.beta2,
            t.adam_eps,
            t.dropout,
            t.clip_norm,
            t.quantize,
            t.qat_start,
            t.seed,
            t.log_every,
            t.eval_every,
            t.eval_topk,
            m.projection.feature_dim,
            m.encoder.bottleneck_dim,
            m.encoder.qrnn_layers,
            m.encoder.qrnn_state,
            m.encoder.kernel_width,
            m.encoder.bidirectional,
            m.encoder.max_source_len,
            m.decoder.layers,
            m.decoder.model_dim,
            m.decoder.ffn_dim,
            m.decoder.heads,
            m.decoder.copy_heads,
            m.decoder.max_target_len,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_decoupled, tokenize};
    use crate::vocab::Vocab;

    fn vocab() -> Vocab {
        Vocab::from_labels(["IN:CREATE_REMINDER", "SL:TODO", "SL:DATE_TIME", "IN:GET_WEATHER", "SL:LOCATION"])
    }

    fn ex(q: &str, t: &str, v: &Vocab) -> Example {
        Example::new(tokenize(q), parse_decoupled(t).unwrap(), v).unwrap()
    }

    fn tiny_model(v: &Vocab, seed: u64) -> Model<f32> {
        Model::new(ModelConfig::tiny(), v.clone(), seed).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            learning_rate: 1e-2,
            warmup_steps: 5,
            total_steps: 200,
            dropout: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_points() {
        let c = TrainConfig {
            learning_rate: 1e-3,
            warmup_steps: 500,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert_eq!(lr_schedule(250, &c), 5e-4);
        assert_eq!(lr_schedule(500, &c), 1e-3);
        assert!((lr_schedule(2000, &c) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.total_steps = c.warmup_steps;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let v = vocab();
        let m = tiny_model(&v, 1);
        let before = m.params.clone();
        let mut t = Trainer::new(m, TrainConfig { learning_rate: 0.0, ..cfg() }).unwrap();
        let batch = [ex("remind me to call mom", "[IN:CREATE_REMINDER [SL:TODO call mom ] ]", &v)];
        let s = t.train_step(&batch).unwrap();
        assert!(s.loss.is_finite());
        assert_eq!(t.model.params, before);
    }

    #[test]
    fn repeated_example_loss_decreases() {
        let v = vocab();
        let mut t = Trainer::new(tiny_model(&v, 2), cfg()).unwrap();
        let batch = [ex("weather in paris", "[IN:GET_WEATHER [SL:LOCATION paris ] ]", &v)];
        let mut last = f64::INFINITY;
        let mut losses = Vec::new();
        for _ in 0..50 {
            let before = t.batch_loss(&batch).unwrap();
            t.train_step(&batch).unwrap();
            losses.push(before);
        }
        let after = t.batch_loss(&batch).unwrap();
        for &l in losses.iter().skip(1) {
            assert!(l < last + 1e-9 || last == f64::INFINITY, "{:?}", losses);
            last = l;
        }
        assert!(after < losses[0] * 0.5, "{} → {}", losses[0], after);
    }

    #[test]
    fn fake_quant_perturbation_is_small_at_init() {
        let v = vocab();
        let batch = [
            ex("remind me to call mom", "[IN:CREATE_REMINDER [SL:TODO call mom ] ]", &v),
            ex("weather in paris", "[IN:GET_WEATHER [SL:LOCATION paris ] ]", &v),
        ];
        let m = tiny_model(&v, 3);
        // Collect ranges with one observing pass, then compare losses.
        let mut t = Trainer::new(m, TrainConfig { quantize: true, learning_rate: 0.0, qat_start: 0.5, ..cfg() }).unwrap();
        t.train_step(&batch).unwrap();
        let float = t.batch_loss(&batch).unwrap();
        t.step = t.cfg.qat_first_step();
        assert!(t.qat_active());
        let fq = t.batch_loss(&batch).unwrap();
        assert!((float - fq).abs() < 0.1, "{} vs {}", float, fq);
        assert!(fq != float);
    }

    #[test]
    fn qat_without_ranges_is_rejected() {
        let v = vocab();
        let mut t = Trainer::new(tiny_model(&v, 4), TrainConfig { quantize: true, qat_start: 0.0, ..cfg() }).unwrap();
        let batch = [ex("weather in paris", "[IN:GET_WEATHER [SL:LOCATION paris ] ]", &v)];
        assert!(matches!(t.train_step(&batch), Err(Error::MissingRange(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let v = vocab();
        let data = vec![
            ex("remind me to call mom", "[IN:CREATE_REMINDER [SL:TODO call mom ] ]", &v),
            ex("weather in paris", "[IN:GET_WEATHER [SL:LOCATION paris ] ]", &v),
            ex("remind me to pay rent tomorrow", "[IN:CREATE_REMINDER [SL:TODO pay rent ] [SL:DATE_TIME tomorrow ] ]", &v),
        ];
        let c = TrainConfig { total_steps: 12, dropout: 0.1, quantize: true, batch_size: 5, ..cfg() };
        let run = || {
            let mut sink = Vec::new();
            let o = train(tiny_model(&v, 5), &data, None, &c, &mut sink).unwrap();
            (o.model.params, o.model.ranges, sink)
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    struct Oracle(Vec<(Vec<String>, String)>);

    impl Parser for Oracle {
        fn parse_topk(&self, source: &[String], _k: usize) -> Result<Vec<String>> {
            Ok(vec![self.0.iter().find(|(s, _)| s == source).unwrap().1.clone()])
        }
    }

    #[test]
    fn evaluate_oracle_and_empty() {
        let v = vocab();
        let data = vec![
            ex("remind me to call mom", "[IN:CREATE_REMINDER [SL:TODO call mom ] ]", &v),
            ex("weather in paris", "[IN:GET_WEATHER [SL:LOCATION paris ] ]", &v),
        ];
        let oracle = Oracle(data.iter().map(|e| (e.source.clone(), e.tree.serialize())).collect());
        let r = evaluate(&oracle, &data, 4).unwrap();
        assert_eq!(r.exact_match, vec![1.0; 4]);
        assert_eq!((r.intent_accuracy, r.slot_precision, r.slot_recall, r.slot_f1), (1.0, 1.0, 1.0, 1.0));
        assert!(evaluate(&oracle, &[], 4).is_err());
    }

    #[test]
    fn run_config_round_trip() {
        let c = RunConfig::parse("# comment\ntotal_steps=900\nwarmup_steps=100\nmodel=tiny\nquantize=true\n").unwrap();
        assert_eq!(c.model, ModelConfig::tiny());
        assert_eq!((c.train.total_steps, c.train.quantize), (900, true));
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert!(RunConfig::parse("bogus=1").is_err());
        assert!(RunConfig::parse("total_steps").is_err());
        assert!(RunConfig::parse("total_steps=10\nwarmup_steps=20").is_err());
    }
}
