//! Frozen per-subtoken layer stacks and their trainable weighted sum.
//!
//! The contextual model itself is never run here; its hidden layers arrive as
//! data, either from LEMB files or from a keyed pseudo-random generator that
//! stands in for it at desk scale.
//!
//! LEMB layout (little-endian):
//!
//! ```text
//! "LEMB" | u32 version = 1 | u32 m | u32 D | u32 T
//! T x (u16 byte length, UTF-8 token)
//! m*T*D f32 values in (layer, token, dim) order
//! u32 CRC-32 of the value payload
//! ```

use std::path::Path;

use crate::autodiff::{AutodiffError, Bindings, Graph, NodeId, Tensor};

const MAGIC: &[u8; 4] = b"LEMB";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a LEMB file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported LEMB version {0}")]
    BadVersion(u32),
    #[error("LEMB payload truncated: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("LEMB checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("invalid LEMB content: {0}")]
    Invalid(String),
}

/// `m x T x D` hidden-layer outputs for one token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredEmbeddings {
    layers: usize,
    dim: usize,
    tokens: Vec<String>,
    values: Vec<f32>,
}

impl LayeredEmbeddings {
    pub fn new(layers: usize, dim: usize, tokens: Vec<String>, values: Vec<f32>) -> Result<Self, EmbedError> {
        if layers == 0 || dim == 0 {
            return Err(EmbedError::Invalid("layer count and dimension must be positive".into()));
        }
        if values.len() != layers * tokens.len() * dim {
            return Err(EmbedError::Invalid(format!(
                "{} values for {layers}x{}x{dim}",
                values.len(),
                tokens.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::Invalid(format!("non-finite value at index {i}")));
        }
        Ok(LayeredEmbeddings {
            layers,
            dim,
            tokens,
            values,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, layer: usize, token: usize, d: usize) -> f32 {
        self.values[(layer * self.tokens.len() + token) * self.dim + d]
    }

    /// The `dim`-vector of `token` in `layer`.
    pub fn vector(&self, layer: usize, token: usize) -> &[f32] {
        let start = (layer * self.tokens.len() + token) * self.dim;
        &self.values[start..start + self.dim]
    }

    /// CRC-32 of the value payload.
    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&payload_bytes(&self.values))
    }

    /// Layers flattened to an `m x (T*D)` matrix.
    pub fn as_layer_matrix(&self) -> Tensor {
        Tensor::matrix(
            self.layers,
            self.tokens.len() * self.dim,
            self.values.iter().map(|&v| v as f64).collect(),
        )
        .expect("consistent by construction")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.values.len() * 4 + 4);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.layers as u32, self.dim as u32, self.tokens.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in &self.tokens {
            out.extend_from_slice(&(t.len() as u16).to_le_bytes());
            out.extend_from_slice(t.as_bytes());
        }
        let payload = payload_bytes(&self.values);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbedError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(EmbedError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(EmbedError::BadVersion(version));
        }
        let (m, d, t) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let mut tokens = Vec::with_capacity(t);
        for _ in 0..t {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let raw = r.take(len)?;
            tokens.push(
                String::from_utf8(raw.to_vec())
                    .map_err(|_| EmbedError::Invalid("token is not UTF-8".into()))?,
            );
        }
        let n = m
            .checked_mul(t)
            .and_then(|x| x.checked_mul(d))
            .ok_or_else(|| EmbedError::Invalid("dimensions overflow".into()))?;
        let payload = r.take(n.checked_mul(4).ok_or_else(|| EmbedError::Invalid("dimensions overflow".into()))?)?;
        let stored = r.u32()?;
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(EmbedError::Checksum { stored, computed });
        }
        if r.pos != bytes.len() {
            return Err(EmbedError::Invalid(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(m, d, tokens, values)
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| EmbedError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn payload_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EmbedError> {
        if self.bytes.len() - self.pos < n {
            return Err(EmbedError::Truncated {
                offset: self.pos,
                needed: n,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, EmbedError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_embedding_file(path: &Path) -> Result<LayeredEmbeddings, EmbedError> {
    let bytes = std::fs::read(path).map_err(|source| EmbedError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    LayeredEmbeddings::from_bytes(&bytes)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Value in `[-1, 1)` keyed by `(seed, token hash, layer, dim)`. Uses 24
/// random bits so it is exact in `f32`.
fn keyed_value(seed: u64, token_hash: u64, layer: usize, d: usize) -> f32 {
    let key = splitmix64(seed)
        ^ splitmix64(token_hash)
        ^ splitmix64(((layer as u64) << 32) | d as u64).rotate_left(17);
    let bits = splitmix64(key) >> 40;
    (bits as f32) / (1u32 << 23) as f32 - 1.0
}

/// Deterministic stand-in for a frozen encoder: equal token strings get equal
/// layer stacks wherever they occur.
pub fn synthetic_embeddings<S: AsRef<str>>(tokens: &[S], layers: usize, dim: usize, seed: u64) -> LayeredEmbeddings {
    assert!(layers >= 1 && dim >= 1, "layers and dim must be positive");
    let hashes: Vec<u64> = tokens.iter().map(|t| fnv1a(t.as_ref().as_bytes())).collect();
    let mut values = Vec::with_capacity(layers * tokens.len() * dim);
    for layer in 0..layers {
        for &h in &hashes {
            for d in 0..dim {
                values.push(keyed_value(seed, h, layer, d));
            }
        }
    }
    LayeredEmbeddings {
        layers,
        dim,
        tokens: tokens.iter().map(|t| t.as_ref().to_string()).collect(),
        values,
    }
}

/// Scale `gamma` and per-layer weights `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationParams {
    pub gamma: f64,
    pub weights: Vec<f64>,
}

impl AggregationParams {
    /// `gamma = 1`, every layer weighted `1/m`.
    pub fn uniform(layers: usize) -> Self {
        AggregationParams {
            gamma: 1.0,
            weights: vec![1.0 / layers as f64; layers],
        }
    }

    pub fn bind(&self, prefix: &str, bindings: &mut Bindings) {
        bindings.insert(format!("{prefix}.gamma"), Tensor::scalar(self.gamma));
        bindings.insert(format!("{prefix}.layer_weights"), Tensor::row(self.weights.clone()));
    }
}

/// `out[t] = gamma * sum_i s_i * layer_i[t]` as a `T x D` node. `weights` is a
/// `1 x m` node and `gamma` a one-element node; the layer stack is a constant.
pub fn aggregate(
    g: &mut Graph<'_>,
    emb: &LayeredEmbeddings,
    gamma: NodeId,
    weights: NodeId,
) -> Result<NodeId, AutodiffError> {
    let m = g.value(weights).numel();
    if m != emb.layers() {
        return Err(AutodiffError::Shape {
            node: g.len(),
            op: "aggregate",
            detail: format!("{m} layer weights for {} layers", emb.layers()),
        });
    }
    let stack = g.constant(emb.as_layer_matrix())?;
    let mixed = g.matmul(weights, stack)?;
    let mixed = g.reshape(mixed, &[emb.len(), emb.dim()])?;
    g.scalar_mul(gamma, mixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, evaluate, worst_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_emb(m: usize, t: usize, d: usize, seed: u64) -> LayeredEmbeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..m * t * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        LayeredEmbeddings::new(m, d, (0..t).map(|i| format!("t{i}")).collect(), values).unwrap()
    }

    fn run_aggregate(emb: &LayeredEmbeddings, p: &AggregationParams) -> Tensor {
        let mut b = Bindings::new();
        p.bind("agg", &mut b);
        evaluate(&b, |g| {
            let gamma = g.param("agg.gamma")?;
            let s = g.param("agg.layer_weights")?;
            aggregate(g, emb, gamma, s)
        })
        .unwrap()
    }

    #[test]
    fn lemb_round_trip_is_bit_exact() {
        let emb = random_emb(3, 4, 5, 1);
        let back = LayeredEmbeddings::from_bytes(&emb.to_bytes()).unwrap();
        assert_eq!(back, emb);
        assert!(back.values().iter().zip(emb.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn lemb_file_with_paper_dims() {
        let dir = tempfile::tempdir().unwrap();
        let tokens: Vec<String> = (0..7).map(|i| format!("w{i}")).collect();
        let emb = synthetic_embeddings(&tokens, 12, 768, 3);
        let path = dir.path().join("s.lemb");
        emb.save(&path).unwrap();
        let back = load_embedding_file(&path).unwrap();
        assert_eq!((back.layers(), back.dim(), back.len()), (12, 768, 7));
    }

    #[test]
    fn lemb_detects_corruption() {
        let emb = random_emb(2, 3, 4, 2);
        let mut bytes = emb.to_bytes();
        let n = bytes.len();
        bytes[n - 1] ^= 0x5a;
        assert!(matches!(LayeredEmbeddings::from_bytes(&bytes), Err(EmbedError::Checksum { .. })));
        let mut bytes = emb.to_bytes();
        bytes[n - 10] ^= 0x01;
        assert!(matches!(LayeredEmbeddings::from_bytes(&bytes), Err(EmbedError::Checksum { .. })));
        let bytes = emb.to_bytes();
        assert!(matches!(
            LayeredEmbeddings::from_bytes(&bytes[..n - 8]),
            Err(EmbedError::Truncated { .. })
        ));
        let mut bytes = emb.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(LayeredEmbeddings::from_bytes(&bytes), Err(EmbedError::BadMagic(_))));
        let mut bytes = emb.to_bytes();
        bytes[4] = 9;
        assert!(matches!(LayeredEmbeddings::from_bytes(&bytes), Err(EmbedError::BadVersion(9))));
    }

    #[test]
    fn synthetic_is_keyed_by_token() {
        let e = synthetic_embeddings(&["ab", "cd", "ab"], 4, 6, 9);
        for layer in 0..4 {
            assert_eq!(e.vector(layer, 0), e.vector(layer, 2));
            assert_ne!(e.vector(layer, 0), e.vector(layer, 1));
        }
        assert!(e.values().iter().all(|v| (-1.0..=1.0).contains(v)));
        let again = synthetic_embeddings(&["ab", "cd", "ab"], 4, 6, 9);
        assert_eq!(e, again);
        let other = synthetic_embeddings(&["ab", "cd", "ab"], 4, 6, 10);
        assert!(e.values().iter().zip(other.values()).any(|(a, b)| a != b));
    }

    #[test]
    fn one_hot_weights_select_a_layer() {
        let emb = random_emb(3, 2, 4, 5);
        let out = run_aggregate(
            &emb,
            &AggregationParams {
                gamma: 1.0,
                weights: vec![1.0, 0.0, 0.0],
            },
        );
        let layer0: Vec<f64> = (0..2).flat_map(|t| emb.vector(0, t).iter().map(|&v| v as f64).collect::<Vec<_>>()).collect();
        assert_eq!(out.data(), layer0.as_slice());
    }

    #[test]
    fn uniform_weights_on_equal_layers_scale_by_gamma() {
        let c = [0.5f32, -0.25, 1.0];
        let values: Vec<f32> = (0..4).flat_map(|_| c).collect();
        let emb = LayeredEmbeddings::new(4, 3, vec!["x".into()], values).unwrap();
        let mut p = AggregationParams::uniform(4);
        p.gamma = 2.0;
        let out = run_aggregate(&emb, &p);
        for (o, &v) in out.data().iter().zip(&c) {
            assert!((o - 2.0 * v as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_double_loop() {
        let emb = random_emb(3, 2, 4, 8);
        let p = AggregationParams {
            gamma: 0.7,
            weights: vec![0.3, -1.2, 0.9],
        };
        let out = run_aggregate(&emb, &p);
        for t in 0..2 {
            for d in 0..4 {
                let mut acc = 0.0;
                for i in 0..3 {
                    acc += p.weights[i] * emb.get(i, t, d) as f64;
                }
                assert!((out.at(t, d) - p.gamma * acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_is_linear_in_weights_and_gamma() {
        let emb = random_emb(3, 2, 3, 4);
        let p1 = AggregationParams { gamma: 1.0, weights: vec![0.2, 0.5, -0.1] };
        let p2 = AggregationParams { gamma: 1.0, weights: vec![-0.4, 0.1, 0.3] };
        let sum = AggregationParams { gamma: 1.0, weights: vec![-0.2, 0.6, 0.2] };
        let (a, b, c) = (run_aggregate(&emb, &p1), run_aggregate(&emb, &p2), run_aggregate(&emb, &sum));
        for i in 0..a.numel() {
            assert!((a.data()[i] + b.data()[i] - c.data()[i]).abs() < 1e-12);
        }
        let doubled = run_aggregate(&emb, &AggregationParams { gamma: 2.0, ..p1.clone() });
        for i in 0..a.numel() {
            assert!((2.0 * a.data()[i] - doubled.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_reach_gamma_and_weights() {
        let emb = random_emb(3, 2, 4, 6);
        let mut b = Bindings::new();
        AggregationParams { gamma: 1.3, weights: vec![0.2, -0.5, 0.8] }.bind("agg", &mut b);
        let build = |g: &mut Graph<'_>| {
            let gamma = g.param("agg.gamma")?;
            let s = g.param("agg.layer_weights")?;
            let o = aggregate(g, &emb, gamma, s)?;
            g.sum(o)
        };
        let report = check_gradients(&b, &["agg.gamma", "agg.layer_weights"], 1e-4, build).unwrap();
        assert!(worst_error(&report) < 1e-8, "{report:?}");
        // d(sum)/d(gamma) = sum over layers, tokens, dims of s_i * b_i.
        let (_, grads) = crate::autodiff::gradients(&b, &["agg.gamma"], build).unwrap();
        let weights = [0.2, -0.5, 0.8];
        let expected: f64 = (0..3)
            .map(|i| weights[i] * emb.vector(i, 0).iter().chain(emb.vector(i, 1)).map(|&v| v as f64).sum::<f64>())
            .sum();
        assert!((grads["agg.gamma"].item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn layer_count_mismatch_is_an_error() {
        let emb = random_emb(3, 2, 4, 6);
        let mut b = Bindings::new();
        AggregationParams::uniform(2).bind("agg", &mut b);
        let err = evaluate(&b, |g| {
            let gamma = g.param("agg.gamma")?;
            let s = g.param("agg.layer_weights")?;
            aggregate(g, &emb, gamma, s)
        })
        .unwrap_err();
        assert!(matches!(err, AutodiffError::Shape { op: "aggregate", .. }));
    }
}
