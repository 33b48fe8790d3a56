//! The full tagger: embedding aggregation, encoder, CRF and language head,
//! with its parameter store and checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Bindings, Graph, NodeId, Tensor};
use crate::crf::{self, CrfError, CrfParams, PathResult};
use crate::embedder::{aggregate, AggregationParams, LayeredEmbeddings};
use crate::encoder::{bilstm_forward, emissions, multihead_attention, EncoderConfig};
use crate::labels::{LabelInventory, LanguageInventory};
use crate::lang_clf;

const MAGIC: &[u8; 4] = b"STCK";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("embeddings: {0}")]
    Embeddings(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Number of embedding layers `m`.
    pub layers: usize,
    pub labels: LabelInventory,
    pub languages: LanguageInventory,
    /// Whether the language head exists and is trained.
    pub lang_clf: bool,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, layers: usize, languages: LanguageInventory, lang_clf: bool) -> Self {
        ModelConfig {
            encoder,
            layers,
            labels: LabelInventory::default(),
            languages,
            lang_clf,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate().map_err(ModelError::Config)?;
        if self.layers == 0 {
            return Err(ModelError::Config("embed.layers must be positive".into()));
        }
        if self.encoder.labels != self.labels.len() {
            return Err(ModelError::Config(format!(
                "encoder.labels is {} but the label inventory has {}",
                self.encoder.labels,
                self.labels.len()
            )));
        }
        if self.lang_clf && self.languages.is_empty() {
            return Err(ModelError::Config("language head needs at least one language".into()));
        }
        Ok(())
    }

    /// Flat `key -> value` form stored in checkpoints.
    pub fn to_entries(&self) -> BTreeMap<String, String> {
        let e = &self.encoder;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("encoder.input_dim", e.input_dim.to_string());
        put("encoder.lstm_hidden", e.lstm_hidden.to_string());
        put("encoder.attn_heads", e.attn_heads.to_string());
        put("encoder.key_dim", e.key_dim.to_string());
        put("encoder.value_dim", e.value_dim.to_string());
        put("encoder.labels", e.labels.to_string());
        put("encoder.dropout", e.dropout.to_string());
        put("encoder.residual", e.residual.to_string());
        put("embed.layers", self.layers.to_string());
        put("model.labels", self.labels.names().join(","));
        put("model.languages", self.languages.tags().join(","));
        put("model.lang_clf", self.lang_clf.to_string());
        m
    }

    pub fn from_entries(entries: &BTreeMap<String, String>) -> Result<Self, ModelError> {
        fn get<T: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T, ModelError> {
            let raw = m
                .get(key)
                .ok_or_else(|| ModelError::Config(format!("missing `{key}`")))?;
            raw.parse()
                .map_err(|_| ModelError::Config(format!("bad value `{raw}` for `{key}`")))
        }
        let encoder = EncoderConfig {
            input_dim: get(entries, "encoder.input_dim")?,
            lstm_hidden: get(entries, "encoder.lstm_hidden")?,
            attn_heads: get(entries, "encoder.attn_heads")?,
            key_dim: get(entries, "encoder.key_dim")?,
            value_dim: get(entries, "encoder.value_dim")?,
            labels: get(entries, "encoder.labels")?,
            dropout: get(entries, "encoder.dropout")?,
            residual: get(entries, "encoder.residual")?,
        };
        let split = |s: String| -> Vec<String> {
            s.split(',').filter(|t| !t.is_empty()).map(str::to_string).collect()
        };
        let labels = LabelInventory::from_names(&split(get(entries, "model.labels")?))
            .map_err(|e| ModelError::Config(format!("label inventory {}", e.0)))?;
        let cfg = ModelConfig {
            encoder,
            layers: get(entries, "embed.layers")?,
            labels,
            languages: LanguageInventory::new(split(get(entries, "model.languages")?)),
            lang_clf: get(entries, "model.lang_clf")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameters and configuration. `meta` carries free-form key/value
/// provenance (embedding source, vocabulary checksum) through checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Bindings,
    pub meta: BTreeMap<String, String>,
}

/// One training or evaluation sentence.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub embeddings: &'a LayeredEmbeddings,
    pub mask: &'a [bool],
    /// Gold label index per position (masked positions ignored).
    pub labels: &'a [usize],
    pub language: usize,
}

/// Graph nodes of one sentence's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub emissions: NodeId,
    pub lang_logits: Option<NodeId>,
}

/// Per-sentence loss nodes: `total = sl + clf`.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub sl: NodeId,
    pub clf: Option<NodeId>,
}

fn dropout(g: &mut Graph<'_>, x: NodeId, rate: f64, rng: &mut ChaCha8Rng) -> Result<NodeId, AutodiffError> {
    let shape = g.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mask = g.constant(Tensor::new(shape, mask)?)?;
    g.mul(x, mask)
}

/// Builds the forward pass for one sentence. `rng` enables dropout.
pub fn forward(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    emb: &LayeredEmbeddings,
    mask: &[bool],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardNodes, ModelError> {
    if emb.layers() != cfg.layers || emb.dim() != cfg.encoder.input_dim {
        return Err(ModelError::Embeddings(format!(
            "got {} layers x {} dims, model expects {} x {}",
            emb.layers(),
            emb.dim(),
            cfg.layers,
            cfg.encoder.input_dim
        )));
    }
    if emb.len() != mask.len() {
        return Err(ModelError::Embeddings(format!(
            "{} embedded tokens for {} positions",
            emb.len(),
            mask.len()
        )));
    }
    let rate = cfg.encoder.dropout;
    let gamma = g.param("embed.gamma")?;
    let weights = g.param("embed.layer_weights")?;
    let mut x = aggregate(g, emb, gamma, weights)?;
    if let Some(rng) = rng.as_deref_mut() {
        x = dropout(g, x, rate, rng)?;
    }
    let h = bilstm_forward(g, x, mask, &cfg.encoder)?;
    let mut a = multihead_attention(g, h, mask, &cfg.encoder)?;
    if let Some(rng) = rng.as_deref_mut() {
        a = dropout(g, a, rate, rng)?;
    }
    let e = emissions(g, a, &cfg.encoder)?;
    let lang_logits = if cfg.lang_clf {
        Some(lang_clf::classify(g, a, mask)?)
    } else {
        None
    };
    Ok(ForwardNodes {
        emissions: e,
        lang_logits,
    })
}

/// CRF negative log-likelihood plus, when `lang_logits` is given, language
/// cross-entropy.
pub fn pair_loss(
    g: &mut Graph<'_>,
    emissions: NodeId,
    transitions: NodeId,
    mask: &[bool],
    gold: &[usize],
    lang_logits: Option<NodeId>,
    language: usize,
) -> Result<LossNodes, ModelError> {
    let sl = crf::nll_node(g, emissions, transitions, mask, gold)?;
    let (total, clf) = match lang_logits {
        Some(logits) => {
            let classes = g.value(logits).numel();
            if language >= classes {
                return Err(ModelError::Config(format!("language index {language} outside {classes} classes")));
            }
            let ce = lang_clf::cross_entropy(g, logits, language)?;
            (g.add(sl, ce)?, Some(ce))
        }
        None => (sl, None),
    };
    Ok(LossNodes { total, sl, clf })
}

/// Batch mean of [`pair_loss`] over aligned per-sentence inputs.
pub fn joint_loss(
    g: &mut Graph<'_>,
    emissions: &[NodeId],
    gold: &[&[usize]],
    lang_logits: &[Option<NodeId>],
    lang_gold: &[usize],
    masks: &[&[bool]],
    transitions: NodeId,
) -> Result<NodeId, ModelError> {
    let n = emissions.len();
    if n == 0 || [gold.len(), lang_logits.len(), lang_gold.len(), masks.len()].iter().any(|&l| l != n) {
        return Err(ModelError::Config(format!("batch parts are misaligned or empty ({n} sentences)")));
    }
    let mut total: Option<NodeId> = None;
    for i in 0..n {
        let l = pair_loss(g, emissions[i], transitions, masks[i], gold[i], lang_logits[i], lang_gold[i])?.total;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / n as f64)?)
}

/// Forward pass plus [`pair_loss`] for one sentence.
pub fn sentence_loss(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    ex: &Example<'_>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<LossNodes, ModelError> {
    let nodes = forward(g, cfg, ex.embeddings, ex.mask, rng)?;
    let trans = g.param("crf.transitions")?;
    pair_loss(g, nodes.emissions, trans, ex.mask, ex.labels, nodes.lang_logits, ex.language)
}

/// Joint loss of a batch of sentences built as one graph.
pub fn batch_loss(g: &mut Graph<'_>, cfg: &ModelConfig, batch: &[Example<'_>]) -> Result<NodeId, ModelError> {
    let mut emissions = Vec::new();
    let mut logits = Vec::new();
    for ex in batch {
        let nodes = forward(g, cfg, ex.embeddings, ex.mask, None)?;
        emissions.push(nodes.emissions);
        logits.push(nodes.lang_logits);
    }
    let trans = g.param("crf.transitions")?;
    let gold: Vec<&[usize]> = batch.iter().map(|e| e.labels).collect();
    let langs: Vec<usize> = batch.iter().map(|e| e.language).collect();
    let masks: Vec<&[bool]> = batch.iter().map(|e| e.mask).collect();
    joint_loss(g, &emissions, &gold, &logits, &langs, &masks, trans)
}

/// Decoding output for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct SentencePrediction {
    /// Best path over the unmasked prefix.
    pub best: PathResult,
    /// Up to the requested number of paths, best first.
    pub nbest: Vec<PathResult>,
    /// Language probabilities, when the head exists.
    pub lang_probs: Option<Vec<f64>>,
}

impl Model {
    /// Fresh parameters from `seed`: aggregation uniform, encoder and
    /// language head random, CRF transitions zero apart from the START/STOP
    /// constraints.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Bindings::new();
        AggregationParams::uniform(config.layers).bind("embed", &mut params);
        config.encoder.init_params(&mut rng, &mut params);
        params.insert("crf.transitions".into(), CrfParams::new(config.labels.len()).transitions);
        if config.lang_clf {
            lang_clf::init_params(config.encoder.model_dim(), config.languages.len(), &mut rng, &mut params);
        }
        Ok(Model {
            config,
            params,
            meta: BTreeMap::new(),
        })
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn crf_params(&self) -> CrfParams {
        CrfParams {
            transitions: self.params["crf.transitions"].clone(),
        }
    }

    /// Emission matrix and language logits without dropout.
    pub fn score(&self, emb: &LayeredEmbeddings, mask: &[bool]) -> Result<(Tensor, Option<Vec<f64>>), ModelError> {
        let mut g = Graph::new(&self.params);
        let nodes = forward(&mut g, &self.config, emb, mask, None)?;
        let e = g.value(nodes.emissions).clone();
        let logits = nodes.lang_logits.map(|l| g.value(l).data().to_vec());
        Ok((e, logits))
    }

    /// Viterbi path, `nbest` paths and language probabilities.
    pub fn predict(&self, emb: &LayeredEmbeddings, mask: &[bool], nbest: usize) -> Result<SentencePrediction, ModelError> {
        let (e, logits) = self.score(emb, mask)?;
        let crf = self.crf_params();
        let best = crf::viterbi(&e, mask, &crf)?;
        let nbest = if nbest > 1 {
            crf::nbest(&e, mask, &crf, nbest)?
        } else {
            vec![best.clone()]
        };
        Ok(SentencePrediction {
            best,
            nbest,
            lang_probs: logits.map(|l| lang_clf::probabilities(&l)),
        })
    }

    /// `(total, sl, clf)` loss values of one sentence without dropout.
    pub fn loss(&self, ex: &Example<'_>) -> Result<(f64, f64, f64), ModelError> {
        let mut g = Graph::new(&self.params);
        let nodes = sentence_loss(&mut g, &self.config, ex, None)?;
        let v = |n: NodeId| g.value(n).data()[0];
        Ok((v(nodes.total), v(nodes.sl), nodes.clf.map_or(0.0, v)))
    }

    /// Checkpoint bytes: magic, version, config block, parameter blocks,
    /// CRC-32 of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = self.config.to_entries();
        for (k, v) in &self.meta {
            entries.insert(format!("meta.{k}"), v.clone());
        }
        let config: String = entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(ModelError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(ModelError::Version(version));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(ModelError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 8 };
        let config_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| ModelError::Corrupt("config block is not UTF-8".into()))?;
        let mut entries = BTreeMap::new();
        let mut meta = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Corrupt(format!("config line `{line}`")))?;
            match k.strip_prefix("meta.") {
                Some(m) => meta.insert(m.to_string(), v.to_string()),
                None => entries.insert(k.to_string(), v.to_string()),
            };
        }
        let config = ModelConfig::from_entries(&entries)?;
        let count = r.u32()? as usize;
        let mut params = Bindings::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ModelError::Corrupt("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != body.len() {
            return Err(ModelError::Corrupt("trailing bytes".into()));
        }
        let model = Model { config, params, meta };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<(), ModelError> {
        let mut expected: Vec<(String, Vec<usize>)> = vec![
            ("embed.gamma".into(), vec![]),
            ("embed.layer_weights".into(), vec![1, self.config.layers]),
            (
                "crf.transitions".into(),
                vec![self.config.labels.len() + 2, self.config.labels.len() + 2],
            ),
        ];
        expected.extend(self.config.encoder.parameter_shapes());
        if self.config.lang_clf {
            expected.extend(lang_clf::parameter_shapes(
                self.config.encoder.model_dim(),
                self.config.languages.len(),
            ));
        }
        if expected.len() != self.params.len() {
            return Err(ModelError::Corrupt(format!(
                "{} parameters, expected {}",
                self.params.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
            match self.params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::Corrupt(format!("{name} has shape {:?}, expected {shape:?}", t.shape())))
                }
                None => return Err(ModelError::Corrupt(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ModelError::Corrupt("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
}
