//! `PQMT` model files.
//!
//! Layout (all integers little-endian, strings as `u32` length + UTF-8):
//!
//! ```text
//! "PQMT" u32:version u8:kind(0 float, 1 quantized)
//! projection: u32 feature_dim, u64 seed, u8 lowercase
//! encoder:    u32 bottleneck, u32 layers, u32 state, u32 kernel, u8 bidirectional, u32 max_source_len
//! decoder:    u32 layers, u32 model_dim, u32 ffn_dim, u32 heads, u32 embedding_dim, u32 copy_heads, u32 max_target_len
//! vocab:      u32 n, n × str
//! ranges:     u32 n, n × (str key, quant params)
//! u32 crc32 of every byte above
//! tensors:    u32 n, n × (str name, u8 dtype, u32 rows, u32 cols, u8 has_params, [quant params],
//!                         u64 byte_len, bytes (row-major), u32 crc32 of bytes)
//! quant params: f32 scale, i32 zero_point, f32 min, f32 max, f32 ema_decay
//! ```
//!
//! Symmetric int8 weights are stored as `uint8` with zero point 128.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::config::{DecoderConfig, EncoderConfig, ModelConfig};
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::model::{ActivationRanges, Model};
use crate::numerics::Tensor;
use crate::projection::ProjectionConfig;
use crate::quantization::{QuantParams, WeightTensor};
use crate::quantized_model::{quantized_param_ids, QuantizedModel};
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 4] = b"PQMT";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;
const U8_ZERO_POINT: i32 = 128;

/// A model as read from disk.
#[derive(Clone, Debug)]
pub enum LoadedModel {
    Float(Model<f32>),
    Quantized(QuantizedModel),
}

impl LoadedModel {
    pub fn is_quantized(&self) -> bool {
        matches!(self, LoadedModel::Quantized(_))
    }

    /// The float view (dequantized weights for an 8-bit model).
    pub fn model(&self) -> &Model<f32> {
        match self {
            LoadedModel::Float(m) => m,
            LoadedModel::Quantized(q) => &q.model,
        }
    }

    /// Inference engine dispatching to float or integer kernels.
    pub fn engine(&self) -> Result<Engine<f32>> {
        match self {
            LoadedModel::Float(m) => Engine::float(m),
            LoadedModel::Quantized(q) => Engine::int8(q),
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::ModelFile(format!("value {} does not fit in u32", v)))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn raw_u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn params(&mut self, p: &QuantParams) {
        self.f32(p.scale);
        self.0.extend_from_slice(&p.zero_point.to_le_bytes());
        self.f32(p.observed_min);
        self.f32(p.observed_max);
        self.f32(p.ema_decay);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::ModelFile(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::ModelFile(format!("invalid boolean byte {}", b))),
        }
    }
    fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::ModelFile("invalid UTF-8 string".into()))
    }
    fn params(&mut self) -> Result<QuantParams> {
        Ok(QuantParams {
            scale: self.f32()?,
            zero_point: i32::from_le_bytes(self.take(4)?.try_into().unwrap()),
            observed_min: self.f32()?,
            observed_max: self.f32()?,
            ema_decay: self.f32()?,
        })
    }
}

fn write_header(w: &mut Writer, model: &Model<f32>, quantized: bool) -> Result<()> {
    w.0.extend_from_slice(MAGIC);
    w.raw_u32(VERSION);
    w.u8(quantized as u8);
    let ModelConfig {
        projection: p,
        encoder: e,
        decoder: d,
    } = &model.config;
    w.u32(p.feature_dim)?;
    w.u64(p.seed);
    w.u8(p.lowercase as u8);
    for v in [e.bottleneck_dim, e.qrnn_layers, e.qrnn_state, e.kernel_width] {
        w.u32(v)?;
    }
    w.u8(e.bidirectional as u8);
    w.u32(e.max_source_len)?;
    for v in [d.layers, d.model_dim, d.ffn_dim, d.heads, d.embedding_dim, d.copy_heads, d.max_target_len] {
        w.u32(v)?;
    }
    w.u32(model.vocab.len())?;
    for t in model.vocab.tokens() {
        w.str(t)?;
    }
    w.u32(model.ranges.0.len())?;
    for (k, p) in &model.ranges.0 {
        w.str(k)?;
        w.params(p);
    }
    let crc = crc32fast::hash(&w.0);
    w.raw_u32(crc);
    Ok(())
}

fn write_tensor(w: &mut Writer, name: &str, dtype: u8, shape: [usize; 2], params: Option<&QuantParams>, bytes: &[u8]) -> Result<()> {
    w.str(name)?;
    w.u8(dtype);
    w.u32(shape[0])?;
    w.u32(shape[1])?;
    w.u8(params.is_some() as u8);
    if let Some(p) = params {
        w.params(p);
    }
    w.u64(bytes.len() as u64);
    w.0.extend_from_slice(bytes);
    w.raw_u32(crc32fast::hash(bytes));
    Ok(())
}

fn f32_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Serialize a float model (with whatever activation ranges it has learned).
pub fn to_bytes(model: &Model<f32>) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    write_header(&mut w, model, false)?;
    w.u32(model.params.len())?;
    for (_, name, t) in model.params.iter() {
        write_tensor(&mut w, name, DTYPE_F32, t.shape(), None, &f32_bytes(t))?;
    }
    Ok(w.0)
}

/// Serialize an 8-bit model: dense weights and the embedding as uint8, the
/// rest (biases, norms, positions) as float32.
pub fn quantized_to_bytes(q: &QuantizedModel) -> Result<Vec<u8>> {
    let model = &q.model;
    model.ranges.check_complete(&model.layout)?;
    let mut w = Writer(Vec::new());
    write_header(&mut w, model, true)?;
    w.u32(model.params.len())?;
    for (id, name, t) in model.params.iter() {
        match q.weights.get(&id) {
            Some(wt) => {
                let params = QuantParams {
                    zero_point: U8_ZERO_POINT,
                    ..wt.params
                };
                let bytes: Vec<u8> = wt.values.iter().map(|&v| (v as i32 + U8_ZERO_POINT) as u8).collect();
                write_tensor(&mut w, name, DTYPE_U8, [wt.rows, wt.cols], Some(&params), &bytes)?;
            }
            None => write_tensor(&mut w, name, DTYPE_F32, t.shape(), None, &f32_bytes(t))?,
        }
    }
    Ok(w.0)
}

enum Stored {
    F32(Tensor<f32>),
    U8(WeightTensor),
}

pub fn from_bytes(buf: &[u8]) -> Result<LoadedModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(|_| Error::ModelFile("not a PQMT file".into()))? != MAGIC {
        return Err(Error::ModelFile("not a PQMT file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let quantized = r.bool()?;
    let projection = ProjectionConfig {
        feature_dim: r.usize()?,
        seed: r.u64()?,
        lowercase: r.bool()?,
    };
    let encoder = EncoderConfig {
        bottleneck_dim: r.usize()?,
        qrnn_layers: r.usize()?,
        qrnn_state: r.usize()?,
        kernel_width: r.usize()?,
        bidirectional: r.bool()?,
        max_source_len: r.usize()?,
    };
    let decoder = DecoderConfig {
        layers: r.usize()?,
        model_dim: r.usize()?,
        ffn_dim: r.usize()?,
        heads: r.usize()?,
        embedding_dim: r.usize()?,
        copy_heads: r.usize()?,
        max_target_len: r.usize()?,
    };
    let n = r.usize()?;
    let tokens = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let n = r.usize()?;
    let mut ranges = BTreeMap::new();
    for _ in 0..n {
        let k = r.str()?;
        ranges.insert(k, r.params()?);
    }
    let header_end = r.pos;
    if r.u32()? != crc32fast::hash(&buf[..header_end]) {
        return Err(Error::Checksum("<header>".into()));
    }
    let config = ModelConfig {
        projection,
        encoder,
        decoder,
    };
    config.validate()?;
    let vocab = Vocab::new(tokens)?;

    let n = r.usize()?;
    let mut stored: HashMap<String, Stored> = HashMap::with_capacity(n);
    for _ in 0..n {
        let name = r.str()?;
        let dtype = r.u8()?;
        let (rows, cols) = (r.usize()?, r.usize()?);
        let params = if r.bool()? { Some(r.params()?) } else { None };
        let len = r.u64()? as usize;
        let bytes = r.take(len)?;
        if r.u32()? != crc32fast::hash(bytes) {
            return Err(Error::Checksum(name));
        }
        let count = rows * cols;
        let t = match (dtype, params) {
            (DTYPE_F32, None) if len == 4 * count => {
                let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Stored::F32(Tensor::from_vec(rows, cols, data)?)
            }
            (DTYPE_U8, Some(p)) if len == count && p.zero_point == U8_ZERO_POINT && p.scale > 0.0 => {
                let values = bytes
                    .iter()
                    .map(|&b| i8::try_from(b as i32 - U8_ZERO_POINT).map_err(|_| Error::ModelFile(format!("tensor `{}` holds level -128", name))))
                    .collect::<Result<_>>()?;
                Stored::U8(WeightTensor {
                    rows,
                    cols,
                    values,
                    params: QuantParams { zero_point: 0, ..p },
                })
            }
            _ => return Err(Error::ModelFile(format!("tensor `{}` has an invalid dtype/params/size record", name))),
        };
        if stored.insert(name.clone(), t).is_some() {
            return Err(Error::ModelFile(format!("tensor `{}` appears twice", name)));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::ModelFile("trailing bytes after tensor table".into()));
    }

    let mut floats = HashMap::with_capacity(stored.len());
    let mut ints = HashMap::new();
    for (name, t) in stored {
        match t {
            Stored::F32(t) => {
                floats.insert(name, t);
            }
            Stored::U8(w) => {
                floats.insert(name.clone(), w.dequantize());
                ints.insert(name, w);
            }
        }
    }
    let model = Model::from_tensors(config, vocab, floats, ActivationRanges(ranges))?;
    if !quantized {
        if let Some(name) = ints.keys().next() {
            return Err(Error::ModelFile(format!("float model file holds uint8 tensor `{}`", name)));
        }
        return Ok(LoadedModel::Float(model));
    }
    let mut weights = BTreeMap::new();
    for id in quantized_param_ids(&model.layout) {
        let name = model.params.name(id);
        let w = ints
            .remove(name)
            .ok_or_else(|| Error::ModelFile(format!("tensor `{}` must be stored as uint8", name)))?;
        weights.insert(id, w);
    }
    if let Some(name) = ints.keys().next() {
        return Err(Error::ModelFile(format!("tensor `{}` must be stored as float32", name)));
    }
    Ok(LoadedModel::Quantized(QuantizedModel::from_parts(model, weights)?))
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn save_quantized(q: &QuantizedModel, path: &Path) -> Result<()> {
    std::fs::write(path, quantized_to_bytes(q)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<LoadedModel> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize;
    use crate::inference::greedy_decode;

    fn with_ranges(mut m: Model<f32>) -> Model<f32> {
        for (i, l) in m.layout.linears().iter().enumerate() {
            let s = 1.0 + i as f32 * 0.25;
            m.ranges.0.insert(l.in_key(), QuantParams::from_range(-s, s, 0.99));
            m.ranges.0.insert(l.out_key(), QuantParams::from_range(-2.0 * s, 3.0 * s, 0.99));
        }
        m
    }

    fn tiny() -> Model<f32> {
        with_ranges(Model::new(ModelConfig::tiny(), Vocab::synthetic(12), 9).unwrap())
    }

    #[test]
    fn float_round_trip_is_exact_and_byte_stable() {
        let m = tiny();
        let bytes = to_bytes(&m).unwrap();
        assert_eq!(&bytes[..4], b"PQMT");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        let LoadedModel::Float(back) = from_bytes(&bytes).unwrap() else { panic!() };
        assert_eq!(back.params, m.params);
        assert_eq!(back.ranges, m.ranges);
        assert_eq!(back.config, m.config);
        assert_eq!(back.vocab.tokens(), m.vocab.tokens());
        assert_eq!(to_bytes(&back).unwrap(), bytes);
        assert_eq!(back.count_parameters(), m.count_parameters());
    }

    #[test]
    fn quantized_round_trip() {
        let q = QuantizedModel::from_float(&tiny()).unwrap();
        let bytes = quantized_to_bytes(&q).unwrap();
        let LoadedModel::Quantized(back) = from_bytes(&bytes).unwrap() else { panic!() };
        assert_eq!(back.weights, q.weights);
        assert_eq!(back.model.params, q.model.params);
        assert_eq!(quantized_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn loaded_model_reproduces_greedy_outputs() {
        let m = tiny();
        let q = QuantizedModel::from_float(&m).unwrap();
        let src = tokenize("set an alarm for seven am");
        for (a, b) in [
            (LoadedModel::Float(m.clone()), from_bytes(&to_bytes(&m).unwrap()).unwrap()),
            (LoadedModel::Quantized(q.clone()), from_bytes(&quantized_to_bytes(&q).unwrap()).unwrap()),
        ] {
            let ha = greedy_decode(&a.engine().unwrap(), &src).unwrap();
            let hb = greedy_decode(&b.engine().unwrap(), &src).unwrap();
            assert_eq!(ha, hb);
        }
    }

    #[test]
    fn quantized_file_is_small_for_default_config() {
        let m = with_ranges(Model::new(ModelConfig::default(), Vocab::synthetic(600), 1).unwrap());
        let float = to_bytes(&m).unwrap().len();
        let quant = quantized_to_bytes(&QuantizedModel::from_float(&m).unwrap()).unwrap().len();
        let ratio = quant as f64 / float as f64;
        assert!(ratio < 0.3, "ratio {}", ratio);
    }

    #[test]
    fn corruption_is_detected() {
        let m = tiny();
        let bytes = to_bytes(&m).unwrap();
        // Last tensor payload byte.
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 5] ^= 0x40;
        assert!(matches!(from_bytes(&bad), Err(Error::Checksum(name)) if name == m.params.name(crate::numerics::ParamId(m.params.len() - 1))));
        // Header field.
        let mut bad = bytes.clone();
        bad[12] ^= 1;
        assert!(matches!(from_bytes(&bad), Err(Error::Checksum(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(from_bytes(&bad), Err(Error::Version { found: 2, expected: 1 })));
        assert!(matches!(from_bytes(b"NOPE"), Err(Error::ModelFile(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(Error::ModelFile(_))));
    }

    #[test]
    fn missing_tensor_is_named() {
        let m = tiny();
        // Re-serialize with the last tensor dropped from the table.
        let last = m.params.name(crate::numerics::ParamId(m.params.len() - 1)).to_string();
        let mut w = Writer(Vec::new());
        write_header(&mut w, &m, false).unwrap();
        w.u32(m.params.len() - 1).unwrap();
        for (_, name, t) in m.params.iter().take(m.params.len() - 1) {
            write_tensor(&mut w, name, DTYPE_F32, t.shape(), None, &f32_bytes(t)).unwrap();
        }
        assert!(matches!(from_bytes(&w.0), Err(Error::MissingTensor(n)) if n == last));
    }

    #[test]
    fn quantized_save_needs_ranges() {
        let m = Model::new(ModelConfig::tiny(), Vocab::synthetic(12), 9).unwrap();
        assert!(matches!(QuantizedModel::from_float(&m), Err(Error::MissingRange(_))));
    }
}
