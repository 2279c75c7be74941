//! Parameter layout, initialization, activation ranges, and the shared
//! building blocks of the differentiable forward pass.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::quantization::{update_activation_range, QuantParams, DEFAULT_EMA_DECAY};
use crate::vocab::Vocab;

/// Dense map `y = x·W + b` (or `x·Wᵀ + b` when `transposed`). `key` names the
/// pair of activation ranges observed around it (`key:in`, `key:out`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub key: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    /// Leading output columns left without bias; the bias tensor covers the rest.
    pub bias_offset: usize,
    pub transposed: bool,
}

impl Linear {
    pub fn in_key(&self) -> String {
        format!("{}:in", self.key)
    }

    pub fn out_key(&self) -> String {
        format!("{}:out", self.key)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerNormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderLayout {
    pub bottleneck: Linear,
    /// `layers[l][d]`: gate convolution of layer `l`, direction `d` (0 forward, 1 backward).
    /// The kernel stacks the taps vertically, `(width·d_in) × 3·state`, columns `[z | f | o]`.
    pub layers: Vec<Vec<Linear>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MattLayout {
    pub ln_attn: LayerNormIds,
    pub self_qkv: Linear,
    pub cross_q: Linear,
    pub cross_kv: Linear,
    pub attn_out: Linear,
    pub ln_ffn: LayerNormIds,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderLayout {
    pub bridge: Linear,
    pub embedding: ParamId,
    pub bos: ParamId,
    pub positions: ParamId,
    pub layers: Vec<MattLayout>,
    pub ln_final: LayerNormIds,
    pub copy_q: Linear,
    pub copy_kv: Linear,
    pub copy_out: Linear,
    /// Generation head, tied to the target embedding table.
    pub generate: Linear,
    pub gate: Linear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub encoder: EncoderLayout,
    pub decoder: DecoderLayout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Xavier,
    Zeros,
    Ones,
}

/// Name, shape and initializer of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> ParamId {
        self.specs.push(ParamSpec { name, rows, cols, init });
        ParamId(self.specs.len() - 1)
    }

    fn linear(&mut self, key: &str, rows: usize, cols: usize, bias: bool) -> Linear {
        let w = self.add(format!("{}.w", key), rows, cols, Init::Xavier);
        let b = bias.then(|| self.add(format!("{}.b", key), 1, cols, Init::Zeros));
        Linear {
            key: key.to_string(),
            w,
            b,
            bias_offset: 0,
            transposed: false,
        }
    }

    /// Fused projection whose first `key_cols` columns are attention keys. A key
    /// bias only shifts each softmax row by a constant, so those columns get none.
    fn keyed_linear(&mut self, key: &str, rows: usize, cols: usize, key_cols: usize) -> Linear {
        let w = self.add(format!("{}.w", key), rows, cols, Init::Xavier);
        let b = self.add(format!("{}.b", key), 1, cols - key_cols, Init::Zeros);
        Linear {
            key: key.to_string(),
            w,
            b: Some(b),
            bias_offset: key_cols,
            transposed: false,
        }
    }

    fn layer_norm(&mut self, key: &str, dim: usize) -> LayerNormIds {
        LayerNormIds {
            gain: self.add(format!("{}.gain", key), 1, dim, Init::Ones),
            bias: self.add(format!("{}.bias", key), 1, dim, Init::Zeros),
        }
    }
}

impl Layout {
    /// Deterministic layout for a configuration and generation-vocabulary size.
    pub fn new(cfg: &ModelConfig, vocab_size: usize) -> Result<(Layout, Vec<ParamSpec>)> {
        cfg.validate()?;
        if vocab_size < 2 {
            return Err(Error::InvalidArgument("vocabulary needs at least 2 entries".into()));
        }
        let (e, d) = (&cfg.encoder, &cfg.decoder);
        let mut b = Builder { specs: Vec::new() };
        let bottleneck = b.linear("enc.bottleneck", cfg.projection.feature_dim, e.bottleneck_dim, true);
        let directions = if e.bidirectional { 2 } else { 1 };
        let mut layers = Vec::with_capacity(e.qrnn_layers);
        for l in 0..e.qrnn_layers {
            let d_in = if l == 0 { e.bottleneck_dim } else { e.output_dim() };
            layers.push(
                (0..directions)
                    .map(|dir| {
                        let name = format!("enc.qrnn{}.{}", l, if dir == 0 { "fwd" } else { "bwd" });
                        b.linear(&name, e.kernel_width * d_in, 3 * e.qrnn_state, true)
                    })
                    .collect(),
            );
        }
        let m = d.model_dim;
        let bridge = b.linear("dec.bridge", e.output_dim(), m, false);
        let embedding = b.add("dec.embedding".into(), vocab_size, m, Init::Xavier);
        let bos = b.add("dec.bos".into(), 1, m, Init::Xavier);
        let positions = b.add("dec.positions".into(), d.max_target_len, m, Init::Xavier);
        let mut matt = Vec::with_capacity(d.layers);
        for l in 0..d.layers {
            let p = format!("dec.matt{}", l);
            matt.push(MattLayout {
                ln_attn: b.layer_norm(&format!("{}.ln_attn", p), m),
                self_qkv: b.keyed_linear(&format!("{}.self_qkv", p), m, 3 * m, m),
                cross_q: b.linear(&format!("{}.cross_q", p), m, m, true),
                cross_kv: b.keyed_linear(&format!("{}.cross_kv", p), m, 2 * m, m),
                attn_out: b.linear(&format!("{}.attn_out", p), m, m, true),
                ln_ffn: b.layer_norm(&format!("{}.ln_ffn", p), m),
                ffn_in: b.linear(&format!("{}.ffn_in", p), m, d.ffn_dim, true),
                ffn_out: b.linear(&format!("{}.ffn_out", p), d.ffn_dim, m, true),
            });
        }
        let ln_final = b.layer_norm("dec.ln_final", m);
        let copy_q = b.linear("head.copy_q", m, m, true);
        let copy_kv = b.keyed_linear("head.copy_kv", m, 2 * m, m);
        let copy_out = b.linear("head.copy_out", m, m, true);
        let gen_bias = b.add("head.generate.b".into(), 1, vocab_size, Init::Zeros);
        let generate = Linear {
            key: "head.generate".into(),
            w: embedding,
            b: Some(gen_bias),
            bias_offset: 0,
            transposed: true,
        };
        let gate = b.linear("head.gate", 2 * m, 1, true);
        let layout = Layout {
            encoder: EncoderLayout { bottleneck, layers },
            decoder: DecoderLayout {
                bridge,
                embedding,
                bos,
                positions,
                layers: matt,
                ln_final,
                copy_q,
                copy_kv,
                copy_out,
                generate,
                gate,
            },
        };
        Ok((layout, b.specs))
    }

    /// Every dense map, in a fixed order.
    pub fn linears(&self) -> Vec<&Linear> {
        let mut out = vec![&self.encoder.bottleneck];
        for l in &self.encoder.layers {
            out.extend(l.iter());
        }
        let d = &self.decoder;
        out.push(&d.bridge);
        for l in &d.layers {
            out.extend([&l.self_qkv, &l.cross_q, &l.cross_kv, &l.attn_out, &l.ffn_in, &l.ffn_out]);
        }
        out.extend([&d.copy_q, &d.copy_kv, &d.copy_out, &d.generate, &d.gate]);
        out
    }
}

/// Learned activation ranges keyed by `linear_key:in` / `linear_key:out`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationRanges(pub BTreeMap<String, QuantParams>);

impl ActivationRanges {
    pub fn get(&self, key: &str) -> Result<&QuantParams> {
        self.0.get(key).ok_or_else(|| Error::MissingRange(key.to_string()))
    }

    /// EMA update from a batch's observed extremes; the first observation of a
    /// key initializes its range directly.
    pub fn update(&mut self, observed: &RangeObserver) {
        for (k, &(lo, hi)) in &observed.0 {
            let next = match self.0.get(k) {
                Some(p) => update_activation_range(p, lo, hi),
                None => QuantParams::from_range(lo, hi, DEFAULT_EMA_DECAY),
            };
            self.0.insert(k.clone(), next);
        }
    }

    /// Require a range for both sides of every dense map.
    pub fn check_complete(&self, layout: &Layout) -> Result<()> {
        for l in layout.linears() {
            self.get(&l.in_key())?;
            self.get(&l.out_key())?;
        }
        Ok(())
    }
}

/// Running per-key minimum and maximum over one batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RangeObserver(pub BTreeMap<String, (f32, f32)>);

impl RangeObserver {
    pub fn observe<T: Real>(&mut self, key: String, t: &Tensor<T>) {
        let (lo, hi) = t.min_max();
        let (lo, hi) = (lo.as_f64() as f32, hi.as_f64() as f32);
        let e = self.0.entry(key).or_insert((lo, hi));
        e.0 = e.0.min(lo);
        e.1 = e.1.max(hi);
    }

    pub fn merge(&mut self, other: &RangeObserver) {
        for (k, &(lo, hi)) in &other.0 {
            let e = self.0.entry(k.clone()).or_insert((lo, hi));
            e.0 = e.0.min(lo);
            e.1 = e.1.max(hi);
        }
    }
}

/// A model: configuration, vocabulary, parameters and activation ranges.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub layout: Layout,
    pub params: ParamStore<T>,
    pub ranges: ActivationRanges,
}

fn init_tensor<T: Real>(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor<T> {
    match spec.init {
        Init::Zeros => Tensor::zeros(spec.rows, spec.cols),
        Init::Ones => Tensor::filled(spec.rows, spec.cols, T::one()),
        Init::Xavier => {
            let a = (6.0 / (spec.rows + spec.cols) as f64).sqrt();
            let data = (0..spec.rows * spec.cols).map(|_| T::cast_from(rng.gen_range(-a..a))).collect();
            Tensor::from_vec(spec.rows, spec.cols, data).expect("spec shape")
        }
    }
}

impl<T: Real> Model<T> {
    /// Fresh model with fan-based uniform initialization.
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let (layout, specs) = Layout::new(&config, vocab.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for s in &specs {
            params.push(s.name.clone(), init_tensor::<T>(s, &mut rng));
        }
        Ok(Model {
            config,
            vocab,
            layout,
            params,
            ranges: ActivationRanges::default(),
        })
    }

    /// Assemble a model from named tensors (e.g. loaded from disk).
    pub fn from_tensors(
        config: ModelConfig,
        vocab: Vocab,
        mut tensors: HashMap<String, Tensor<T>>,
        ranges: ActivationRanges,
    ) -> Result<Self> {
        let (layout, specs) = Layout::new(&config, vocab.len())?;
        let mut params = ParamStore::new();
        for s in &specs {
            let t = tensors.remove(&s.name).ok_or_else(|| Error::MissingTensor(s.name.clone()))?;
            if t.shape() != [s.rows, s.cols] {
                return Err(Error::ModelFile(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    [s.rows, s.cols]
                )));
            }
            params.push(s.name.clone(), t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::ModelFile(format!("unexpected tensor `{}`", extra)));
        }
        Ok(Model {
            config,
            vocab,
            layout,
            params,
            ranges,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config,
            vocab: self.vocab.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
            ranges: self.ranges.clone(),
        }
    }

    pub fn count_parameters(&self) -> ParameterCount {
        count_parameters(&self.config, self.vocab.len()).expect("valid model")
    }
}

/// Scalar parameter totals, with a per-module breakdown.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterCount {
    pub total: usize,
    pub modules: Vec<(String, usize)>,
}

impl ParameterCount {
    pub fn module(&self, name: &str) -> usize {
        self.modules.iter().find(|(n, _)| n == name).map_or(0, |(_, c)| *c)
    }
}

fn module_of(name: &str) -> &'static str {
    if name.starts_with("enc.bottleneck") {
        "bottleneck"
    } else if name.starts_with("enc.qrnn") {
        "qrnn"
    } else if name.starts_with("dec.matt") {
        "matt"
    } else if name.starts_with("head.") {
        "pointer_generator"
    } else if name.starts_with("dec.bridge") {
        "bridge"
    } else {
        "decoder_embeddings"
    }
}

/// Closed-form parameter count of a configuration (the projection is not
/// trainable and contributes nothing).
pub fn count_parameters(cfg: &ModelConfig, vocab_size: usize) -> Result<ParameterCount> {
    let (_, specs) = Layout::new(cfg, vocab_size)?;
    let mut modules: Vec<(String, usize)> = [
        "projection",
        "bottleneck",
        "qrnn",
        "bridge",
        "decoder_embeddings",
        "matt",
        "pointer_generator",
    ]
    .iter()
    .map(|m| (m.to_string(), 0))
    .collect();
    for s in &specs {
        let m = module_of(&s.name);
        modules.iter_mut().find(|(n, _)| n == m).unwrap().1 += s.rows * s.cols;
    }
    Ok(ParameterCount {
        total: modules.iter().map(|(_, c)| c).sum(),
        modules,
    })
}

/// The bias as a full-width row, zero-padded over `bias_offset` leading columns.
fn bias_var<T: Real>(tape: &mut Tape<T>, lin: &Linear) -> Option<Var> {
    let b = tape.param(lin.b?);
    if lin.bias_offset == 0 {
        return Some(b);
    }
    let pad = tape.constant(Tensor::zeros(1, lin.bias_offset));
    Some(tape.concat_cols(&[pad, b]).expect("bias rows"))
}

/// How dense maps treat quantization in a differentiable forward pass.
#[derive(Clone, Copy, Debug)]
pub enum QuantSim<'a> {
    Off,
    /// Fake-quantize weights symmetrically and activations with these ranges.
    Fake(&'a ActivationRanges),
}

/// Per-forward-pass options and scratch state.
pub struct Ctx<'a> {
    pub quant: QuantSim<'a>,
    pub observer: Option<RangeObserver>,
    pub dropout: f64,
    pub rng: Option<ChaCha8Rng>,
    quantized_weights: HashMap<ParamId, Var>,
}

impl<'a> Ctx<'a> {
    /// Deterministic, dropout-free, unquantized pass.
    pub fn eval() -> Self {
        Ctx {
            quant: QuantSim::Off,
            observer: None,
            dropout: 0.0,
            rng: None,
            quantized_weights: HashMap::new(),
        }
    }

    pub fn train(quant: QuantSim<'a>, observe: bool, dropout: f64, seed: u64) -> Self {
        Ctx {
            quant,
            observer: observe.then(RangeObserver::default),
            dropout,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            quantized_weights: HashMap::new(),
        }
    }

    fn observe<T: Real>(&mut self, tape: &Tape<T>, key: String, v: Var) {
        if let Some(o) = self.observer.as_mut() {
            o.observe(key, tape.value(v));
        }
    }

    fn activation<T: Real>(&mut self, tape: &mut Tape<T>, key: String, v: Var) -> Result<Var> {
        self.observe(tape, key.clone(), v);
        match self.quant {
            QuantSim::Off => Ok(v),
            QuantSim::Fake(r) => {
                let p = r.get(&key)?;
                Ok(tape.fake_quant(v, p.observed_min as f64, p.observed_max as f64))
            }
        }
    }

    pub fn weight_var<T: Real>(&mut self, tape: &mut Tape<T>, id: ParamId) -> Var {
        let w = tape.param(id);
        match self.quant {
            QuantSim::Off => w,
            QuantSim::Fake(_) => *self
                .quantized_weights
                .entry(id)
                .or_insert_with(|| tape.fake_quant_symmetric(w)),
        }
    }

    /// `y = x·W + b` with optional simulated quantization around it.
    pub fn linear<T: Real>(&mut self, tape: &mut Tape<T>, lin: &Linear, x: Var) -> Result<Var> {
        let x = self.activation(tape, lin.in_key(), x)?;
        let w = self.weight_var(tape, lin.w);
        let mut y = tape.matmul_t(x, false, w, lin.transposed)?;
        if let Some(bv) = bias_var(tape, lin) {
            y = tape.add(y, bv)?;
        }
        self.activation(tape, lin.out_key(), y)
    }

    /// Causal convolution variant of [`Ctx::linear`].
    pub fn conv<T: Real>(&mut self, tape: &mut Tape<T>, lin: &Linear, x: Var, width: usize) -> Result<Var> {
        let x = self.activation(tape, lin.in_key(), x)?;
        let w = self.weight_var(tape, lin.w);
        let mut y = tape.conv1d(x, w, width)?;
        if let Some(bv) = bias_var(tape, lin) {
            y = tape.add(y, bv)?;
        }
        self.activation(tape, lin.out_key(), y)
    }

    /// Inverted dropout; identity when the rate is zero or no RNG is attached.
    pub fn dropout<T: Real>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let p = self.dropout;
        let Some(rng) = self.rng.as_mut().filter(|_| p > 0.0) else {
            return Ok(x);
        };
        let [r, c] = tape.shape(x);
        let keep = T::cast_from(1.0 / (1.0 - p));
        let mask = (0..r * c)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let m = tape.constant(Tensor::from_vec(r, c, mask)?);
        tape.mul(x, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bottleneck_size_closed_form() {
        let c = count_parameters(&ModelConfig::default(), 600).unwrap();
        assert_eq!(c.module("bottleneck"), 1024 * 256 + 256);
        assert_eq!(c.module("bottleneck"), 262_400);
        assert_eq!(c.module("projection"), 0);
    }

    #[test]
    fn default_budget_brackets_three_point_three_million() {
        let c = count_parameters(&ModelConfig::default(), 600).unwrap();
        // QRNN: 4 layers × 2 directions × (2·256·384 + 384).
        assert_eq!(c.module("qrnn"), 4 * 2 * (2 * 256 * 384 + 384));
        assert!((3_000_000..=3_600_000).contains(&c.total), "{}", c.total);
    }

    #[test]
    fn model_store_matches_closed_form_count() {
        let vocab = Vocab::synthetic(12);
        let m = Model::<f32>::new(ModelConfig::tiny(), vocab, 1).unwrap();
        assert_eq!(m.params.scalar_count(), m.count_parameters().total);
        let names: std::collections::HashSet<_> = m.params.iter().map(|(_, n, _)| n.to_string()).collect();
        assert_eq!(names.len(), m.params.len());
    }

    #[test]
    fn initialization_is_seeded_and_bounded() {
        let vocab = Vocab::synthetic(12);
        let a = Model::<f32>::new(ModelConfig::tiny(), vocab.clone(), 3).unwrap();
        let b = Model::<f32>::new(ModelConfig::tiny(), vocab.clone(), 3).unwrap();
        let c = Model::<f32>::new(ModelConfig::tiny(), vocab, 4).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        let w = a.params.get(a.layout.encoder.bottleneck.w);
        let bound = (6.0f32 / (64.0 + 16.0)).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(a.params.get(a.layout.encoder.bottleneck.b.unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn from_tensors_reports_missing_and_misshapen() {
        let vocab = Vocab::synthetic(12);
        let m = Model::<f32>::new(ModelConfig::tiny(), vocab.clone(), 3).unwrap();
        let mut tensors: HashMap<String, Tensor<f32>> =
            m.params.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        let back = Model::from_tensors(m.config, vocab.clone(), tensors.clone(), ActivationRanges::default()).unwrap();
        assert_eq!(back.params, m.params);
        tensors.remove("dec.bos");
        assert!(matches!(
            Model::from_tensors(m.config, vocab.clone(), tensors.clone(), ActivationRanges::default()),
            Err(Error::MissingTensor(n)) if n == "dec.bos"
        ));
        tensors.insert("dec.bos".into(), Tensor::zeros(2, 2));
        assert!(Model::from_tensors(m.config, vocab, tensors, ActivationRanges::default()).is_err());
    }

    #[test]
    fn ranges_first_observation_then_ema() {
        let mut r = ActivationRanges::default();
        let mut o = RangeObserver::default();
        o.observe("a:in".into(), &Tensor::<f32>::row_vector(vec![-1.0, 2.0]));
        r.update(&o);
        let p = r.get("a:in").unwrap();
        assert_eq!((p.observed_min, p.observed_max), (-1.0, 2.0));
        let mut o = RangeObserver::default();
        o.observe("a:in".into(), &Tensor::<f32>::row_vector(vec![1.0, 4.0]));
        r.update(&o);
        let p = r.get("a:in").unwrap();
        assert!((p.observed_min - 0.99 * -1.0).abs() < 1e-6);
        assert!((p.observed_max - (0.99 * 2.0 + 0.01 * 4.0)).abs() < 1e-6);
        assert!(matches!(r.get("b:in"), Err(Error::MissingRange(_))));
    }
}
