//! Deterministic ternary token projection, standing in for an embedding table.
//!
//! A token is hashed with FNV-1a, the hash is combined with a per-chunk seed and
//! mixed, and every pair of output bits becomes one ternary feature
//! (`00 → 0`, `01 → +1`, `10 → −1`, `11 → 0`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const SEED_STRIDE: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub feature_dim: usize,
    pub seed: u64,
    pub lowercase: bool,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            feature_dim: 1024,
            seed: 0x5eed_0f_9a77,
            lowercase: true,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.feature_dim % 32 != 0 {
            return Err(Error::InvalidArgument(format!(
                "projection feature_dim must be a positive multiple of 32, got {}",
                self.feature_dim
            )));
        }
        Ok(())
    }
}

/// FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET_BASIS, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// One xorshift-multiply finalization round.
#[inline]
fn mix64(mut h: u64) -> u64 {
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    h
}

/// FNV-1a of the UTF-8 bytes, XOR seed, then mixing.
pub fn hash_token(token: &str, seed: u64) -> u64 {
    mix64(fnv1a64(token.as_bytes()) ^ seed)
}

fn chunk_seed(base: u64, chunk: usize) -> u64 {
    base.wrapping_add((chunk as u64 + 1).wrapping_mul(SEED_STRIDE))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TernaryVector(pub Vec<i8>);

impl TernaryVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn project_token(token: &str, cfg: &ProjectionConfig) -> TernaryVector {
    let mut out = vec![0i8; cfg.feature_dim];
    fill_projection(token, cfg, &mut out);
    TernaryVector(out)
}

fn fill_projection(token: &str, cfg: &ProjectionConfig, out: &mut [i8]) {
    let lowered;
    let token = if cfg.lowercase {
        lowered = token.to_lowercase();
        lowered.as_str()
    } else {
        token
    };
    let base = fnv1a64(token.as_bytes());
    // 32 features per 64-bit word.
    for (chunk, features) in out.chunks_mut(32).enumerate() {
        let word = mix64(base ^ chunk_seed(cfg.seed, chunk));
        for (j, f) in features.iter_mut().enumerate() {
            *f = match (word >> (2 * j)) & 3 {
                0b01 => 1,
                0b10 => -1,
                _ => 0,
            };
        }
    }
}

/// `n × N` matrix of ternary projections, one row per token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TernaryMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<i8>,
}

impl TernaryMatrix {
    pub fn row(&self, i: usize) -> &[i8] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.values.iter().map(|&v| T::cast_from(v as f64)).collect();
        Tensor::from_vec(self.rows, self.cols, data).expect("projection shape")
    }
}

pub fn project_sequence<S: AsRef<str>>(tokens: &[S], cfg: &ProjectionConfig) -> Result<TernaryMatrix> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("cannot project an empty token sequence".into()));
    }
    let n = cfg.feature_dim;
    let mut values = vec![0i8; tokens.len() * n];
    for (row, tok) in values.chunks_mut(n).zip(tokens) {
        fill_projection(tok.as_ref(), cfg, row);
    }
    Ok(TernaryMatrix {
        rows: tokens.len(),
        cols: n,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::distributions::Alphanumeric;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tokens(count: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let len = rng.gen_range(1..12);
                (&mut rng).sample_iter(&Alphanumeric).take(len).map(char::from).collect()
            })
            .collect()
    }

    #[test]
    fn fnv_of_empty_is_offset_basis() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(hash_token("", 0), mix64(0xcbf29ce484222325));
    }

    #[test]
    fn hash_is_deterministic_and_frozen() {
        assert_eq!(hash_token("reminder", 42), hash_token("reminder", 42));
        assert_ne!(hash_token("reminder", 42), hash_token("reminder", 43));
        // Frozen so that a platform or refactoring change cannot silently alter projections.
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn output_bits_are_balanced() {
        let tokens = random_tokens(10_000, 1);
        let mut counts = [0usize; 64];
        for t in &tokens {
            let h = hash_token(t, 7);
            for (b, c) in counts.iter_mut().enumerate() {
                *c += ((h >> b) & 1) as usize;
            }
        }
        for c in counts {
            let f = c as f64 / tokens.len() as f64;
            assert!((f - 0.5).abs() <= 0.02, "bit frequency {}", f);
        }
    }

    #[test]
    fn projection_shape_values_and_frequencies() {
        let cfg = ProjectionConfig::default();
        let v = project_token("alarm", &cfg);
        assert_eq!(v.len(), 1024);
        let tokens = random_tokens(10_000, 2);
        let (mut zero, mut plus, mut minus) = (0usize, 0usize, 0usize);
        for t in &tokens {
            for &x in &project_token(t, &cfg).0 {
                match x {
                    0 => zero += 1,
                    1 => plus += 1,
                    -1 => minus += 1,
                    _ => panic!("non-ternary value {}", x),
                }
            }
        }
        let total = (zero + plus + minus) as f64;
        assert!((zero as f64 / total - 0.5).abs() <= 0.02);
        assert!((plus as f64 / total - 0.25).abs() <= 0.02);
        assert!((minus as f64 / total - 0.25).abs() <= 0.02);
    }

    #[test]
    fn lowercasing_and_seed() {
        let cfg = ProjectionConfig::default();
        assert_eq!(project_token("Alarm", &cfg), project_token("alarm", &cfg));
        let cased = ProjectionConfig { lowercase: false, ..cfg };
        assert_ne!(project_token("Alarm", &cased), project_token("alarm", &cased));
        let other = ProjectionConfig { seed: 1, ..cfg };
        assert_ne!(project_token("alarm", &cfg), project_token("alarm", &other));
    }

    #[test]
    fn sequence_rows_match_token_projections() {
        let cfg = ProjectionConfig::default();
        let m = project_sequence(&["a"], &cfg).unwrap();
        assert_eq!(m.row(0), &project_token("a", &cfg).0[..]);
        let m = project_sequence(&["set", "alarm"], &cfg).unwrap();
        assert_eq!((m.rows, m.cols), (2, 1024));
        assert_eq!(m.row(0), &project_token("set", &cfg).0[..]);
        assert_eq!(m.row(1), &project_token("alarm", &cfg).0[..]);
        let swapped = project_sequence(&["alarm", "set"], &cfg).unwrap();
        assert_eq!(swapped.row(0), m.row(1));
        assert_eq!(swapped.row(1), m.row(0));
        assert!(project_sequence::<&str>(&[], &cfg).is_err());
    }

    #[test]
    fn distinct_tokens_rarely_agree() {
        let cfg = ProjectionConfig::default();
        let tokens = random_tokens(4_000, 3);
        let mut over = 0;
        let mut pairs = 0;
        for pair in tokens.chunks(2) {
            if pair[0] == pair[1] {
                continue;
            }
            let (a, b) = (project_token(&pair[0], &cfg), project_token(&pair[1], &cfg));
            let agree = a.0.iter().zip(&b.0).filter(|(x, y)| x == y).count();
            pairs += 1;
            if agree as f64 > 0.7 * cfg.feature_dim as f64 {
                over += 1;
            }
        }
        assert!((over as f64) / (pairs as f64) < 0.001);
    }

    #[test]
    fn feature_dim_must_pack() {
        assert!(ProjectionConfig { feature_dim: 1000, ..Default::default() }.validate().is_err());
        assert!(ProjectionConfig::default().validate().is_ok());
    }
}
