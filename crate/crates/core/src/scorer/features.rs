use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Instance, Payload};

/// Maps an instance to a fixed-length real vector.
pub trait FeatureExtractor: Send + Sync {
    fn dim(&self) -> usize;

    fn extract(&self, x: &Instance) -> Result<Vec<f64>>;

    fn config(&self) -> ExtractorConfig;

    /// Digest of the configuration; scorers refuse features from a
    /// differently configured extractor.
    fn config_hash(&self) -> String {
        self.config().hash()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExtractorConfig {
    /// Hashed bag of token n-grams.
    HashedNgram { dim: usize, orders: Vec<usize> },
    /// Feature payloads used as-is.
    Identity { dim: usize },
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig::HashedNgram {
            dim: 256,
            orders: vec![1, 2],
        }
    }
}

impl ExtractorConfig {
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("extractor config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn build(&self) -> Result<Box<dyn FeatureExtractor>> {
        Ok(match self {
            ExtractorConfig::HashedNgram { dim, orders } => Box::new(HashedNgramExtractor::new(*dim, orders.clone())?),
            ExtractorConfig::Identity { dim } => Box::new(IdentityExtractor::new(*dim)?),
        })
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(order: usize, gram: &[u32]) -> u64 {
    let mut h = FNV_OFFSET;
    let mut feed = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    };
    feed(order as u8);
    for t in gram {
        t.to_le_bytes().into_iter().for_each(&mut feed);
    }
    h
}

/// Counts of every n-gram (for each configured order) hashed into `dim`
/// buckets, then scaled to unit L2 norm.
#[derive(Debug, Clone)]
pub struct HashedNgramExtractor {
    dim: usize,
    orders: Vec<usize>,
}

impl HashedNgramExtractor {
    pub fn new(dim: usize, orders: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("feature dimension must be >= 1"));
        }
        if orders.is_empty() || orders.iter().any(|&o| o == 0 || o > 255) {
            return Err(Error::config(format!("n-gram orders must be in 1..=255, got {orders:?}")));
        }
        Ok(HashedNgramExtractor { dim, orders })
    }

    /// Raw hashed counts before normalization.
    pub fn counts(&self, tokens: &[u32]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &n in &self.orders {
            for gram in tokens.windows(n) {
                out[(fnv1a(n, gram) % self.dim as u64) as usize] += 1.0;
            }
        }
        out
    }
}

impl FeatureExtractor for HashedNgramExtractor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, x: &Instance) -> Result<Vec<f64>> {
        let tokens = x
            .payload
            .tokens()
            .ok_or_else(|| Error::config("n-gram features need token instances"))?;
        let mut c = self.counts(tokens);
        let norm = crate::linalg::norm(&c);
        if norm > 0.0 {
            c.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(c)
    }

    fn config(&self) -> ExtractorConfig {
        ExtractorConfig::HashedNgram {
            dim: self.dim,
            orders: self.orders.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IdentityExtractor {
    dim: usize,
}

impl IdentityExtractor {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("feature dimension must be >= 1"));
        }
        Ok(IdentityExtractor { dim })
    }
}

impl FeatureExtractor for IdentityExtractor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, x: &Instance) -> Result<Vec<f64>> {
        match &x.payload {
            Payload::Features(f) if f.len() == self.dim => {
                if f.iter().all(|v| v.is_finite()) {
                    Ok(f.clone())
                } else {
                    Err(Error::Numerical(format!("instance {} has non-finite features", x.id)))
                }
            }
            Payload::Features(f) => Err(Error::DimensionMismatch {
                context: "feature payload",
                expected: self.dim,
                found: f.len(),
            }),
            Payload::Tokens(_) => Err(Error::config("identity features need feature instances")),
        }
    }

    fn config(&self) -> ExtractorConfig {
        ExtractorConfig::Identity { dim: self.dim }
    }
}
