//! Text to fixed-dimension vectors.
//!
//! The default embedder hashes lowercase word unigrams and bigrams into `d`
//! signed buckets and L2-normalizes the result. An external embedder can be
//! plugged in through a newline-delimited byte-stream protocol: one text line
//! out, one line of `d` space-separated decimals back.

use std::io::{BufRead, Write};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{CardError, Result};
use crate::linalg::Mat;

pub const DEFAULT_DIMENSION: usize = 64;
pub const MIN_DIMENSION: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    FeatureHash,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub dimension: usize,
    pub seed: u64,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec { kind: EmbedderKind::FeatureHash, dimension: DEFAULT_DIMENSION, seed: 0 }
    }
}

impl EmbedderSpec {
    pub fn feature_hash(dimension: usize, seed: u64) -> Self {
        EmbedderSpec { kind: EmbedderKind::FeatureHash, dimension, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension < MIN_DIMENSION {
            return Err(CardError::Invalid(format!(
                "embedding dimension {} is below the minimum of {MIN_DIMENSION}",
                self.dimension
            )));
        }
        Ok(())
    }
}

/// Either the zero vector or a unit vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn zeros(d: usize) -> Self {
        Embedding { values: vec![0.0; d] }
    }

    /// Normalizes `values`; an all-zero input stays zero.
    pub fn from_raw(mut values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CardError::Invalid("embedding has non-finite entries".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Embedding { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        let na = self.norm();
        let nb = other.norm();
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        (crate::linalg::dot(&self.values, &other.values) / (na * nb)).clamp(-1.0, 1.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

/// Hashed-feature embedding of `text`. Fails for the external kind, which
/// needs a registered adapter (see [`Embedder::external`]).
pub fn embed(text: &str, spec: &EmbedderSpec) -> Result<Embedding> {
    spec.validate()?;
    match spec.kind {
        EmbedderKind::FeatureHash => Ok(feature_hash(text, spec.dimension, spec.seed)),
        EmbedderKind::External => Err(CardError::ExternalEmbedderUnavailable),
    }
}

pub fn batch_embed<S: AsRef<str>>(texts: &[S], spec: &EmbedderSpec) -> Result<Mat> {
    if texts.is_empty() {
        return Err(CardError::Invalid("cannot embed an empty batch".into()));
    }
    let rows = texts.iter().map(|t| embed(t.as_ref(), spec).map(Embedding::into_vec)).collect::<Result<Vec<_>>>()?;
    Mat::from_rows(&rows)
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_')).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

fn feature_hash(text: &str, d: usize, seed: u64) -> Embedding {
    let tokens = tokenize(text);
    let mut acc = vec![0.0; d];
    let mut add = |h: u64| {
        let bucket = (h % d as u64) as usize;
        acc[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    };
    for t in &tokens {
        add(hash_feature(seed, &[t.as_bytes()]));
    }
    for w in tokens.windows(2) {
        add(hash_feature(seed, &[w[0].as_bytes(), b"\x01", w[1].as_bytes()]));
    }
    // unigrams + bigrams is always an odd count for nonempty input, so the
    // accumulator can never cancel to zero.
    Embedding::from_raw(acc).expect("hash features are finite")
}

fn hash_feature(seed: u64, parts: &[&[u8]]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes().iter().chain(parts.iter().flat_map(|p| p.iter())) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    splitmix64(h)
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Client side of the external embedder protocol.
pub trait ExternalAdapter: Send {
    fn request(&mut self, line: &str) -> Result<Vec<f64>>;
}

/// Adapter speaking the line protocol over any reader/writer pair, e.g. the
/// stdin/stdout of a child process or a Unix socket.
pub struct StreamAdapter<R, W> {
    reader: R,
    writer: W,
}

impl<R: BufRead, W: Write> StreamAdapter<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        StreamAdapter { reader, writer }
    }
}

impl<R: BufRead + Send, W: Write + Send> ExternalAdapter for StreamAdapter<R, W> {
    fn request(&mut self, line: &str) -> Result<Vec<f64>> {
        let flat: String = line.chars().map(|c| if c == '\n' || c == '\r' { ' ' } else { c }).collect();
        let io = |e: std::io::Error| CardError::ExternalEmbedder(e.to_string());
        self.writer.write_all(flat.as_bytes()).map_err(io)?;
        self.writer.write_all(b"\n").map_err(io)?;
        self.writer.flush().map_err(io)?;
        let mut response = String::new();
        if self.reader.read_line(&mut response).map_err(io)? == 0 {
            return Err(CardError::ExternalEmbedder("stream closed".into()));
        }
        response
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().map_err(|_| CardError::ExternalEmbedder(format!("bad decimal `{tok}`"))))
            .collect()
    }
}

/// An embedder bound to its spec, optionally carrying an external adapter.
pub struct Embedder {
    spec: EmbedderSpec,
    adapter: Option<Mutex<Box<dyn ExternalAdapter>>>,
}

impl std::fmt::Debug for Embedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Embedder").field("spec", &self.spec).field("external", &self.adapter.is_some()).finish()
    }
}

impl Embedder {
    pub fn new(spec: EmbedderSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Embedder { spec, adapter: None })
    }

    pub fn external(dimension: usize, adapter: Box<dyn ExternalAdapter>) -> Result<Self> {
        let spec = EmbedderSpec { kind: EmbedderKind::External, dimension, seed: 0 };
        spec.validate()?;
        Ok(Embedder { spec, adapter: Some(Mutex::new(adapter)) })
    }

    pub fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    pub fn dimension(&self) -> usize {
        self.spec.dimension
    }

    pub fn embed(&self, text: &str) -> Result<Embedding> {
        match (&self.spec.kind, &self.adapter) {
            (EmbedderKind::FeatureHash, _) => embed(text, &self.spec),
            (EmbedderKind::External, None) => Err(CardError::ExternalEmbedderUnavailable),
            (EmbedderKind::External, Some(adapter)) => {
                let values = adapter
                    .lock()
                    .map_err(|_| CardError::ExternalEmbedder("adapter lock poisoned".into()))?
                    .request(text)?;
                if values.len() != self.spec.dimension {
                    return Err(CardError::ExternalEmbedder(format!(
                        "expected {} values, got {}",
                        self.spec.dimension,
                        values.len()
                    )));
                }
                Embedding::from_raw(values)
            }
        }
    }

    pub fn batch_embed<S: AsRef<str>>(&self, texts: &[S]) -> Result<Mat> {
        if texts.is_empty() {
            return Err(CardError::Invalid("cannot embed an empty batch".into()));
        }
        let rows = texts.iter().map(|t| self.embed(t.as_ref()).map(Embedding::into_vec)).collect::<Result<Vec<_>>>()?;
        Mat::from_rows(&rows)
    }
}
