//! Gumbel-Top-K selection over inferred scores.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::corpus::TokenCorpus;
use crate::model::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    /// Fraction of the corpus to keep, in `(0, 1]`.
    pub ratio: f64,
    /// Gumbel noise strength. Also accepted as `delta`.
    #[serde(alias = "delta")]
    pub tau: f64,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            ratio: 0.4,
            tau: 0.1,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::config(format!("selection ratio must be in (0, 1], got {}", self.ratio)));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be >= 0, got {}", self.tau)));
        }
        Ok(())
    }

    /// `max(1, floor(ratio * n))`.
    pub fn k(&self, n: usize) -> usize {
        ((self.ratio * n as f64).floor() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Selected ids, ascending.
    pub selected: Vec<usize>,
    /// Perturbed key of every instance, by id.
    pub keys: Vec<f64>,
    pub k: usize,
    pub config: SelectionConfig,
}

/// Draws from the open interval `(0, 1)`; zero draws are rejected.
fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Keeps the `K` instances with the largest `score - tau * ln(-ln u)`, ties
/// going to the lower id.
pub fn gumbel_topk(scores: &[f64], config: &SelectionConfig) -> Result<SelectionResult> {
    config.validate()?;
    let n = scores.len();
    if n == 0 {
        return Err(Error::Empty("scores"));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("score {i} is not finite")));
    }
    let k = config.k(n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let keys: Vec<f64> = scores
        .iter()
        .map(|&s| {
            let u = open_unit(&mut rng);
            if config.tau == 0.0 {
                s
            } else {
                s - config.tau * (-u.ln()).ln()
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    let mut selected = order[..k].to_vec();
    selected.sort_unstable();
    Ok(SelectionResult {
        selected,
        keys,
        k,
        config: *config,
    })
}

impl SelectionResult {
    pub fn to_tsv(&self, with_keys: bool) -> String {
        let mut out = String::from(if with_keys { "instance_id\tkey\n" } else { "instance_id\n" });
        for &id in &self.selected {
            if with_keys {
                out.push_str(&format!("{id}\t{}\n", self.keys[id]));
            } else {
                out.push_str(&format!("{id}\n"));
            }
        }
        out
    }

    pub fn write_tsv(&self, path: &Path, with_keys: bool) -> Result<()> {
        fs::write(path, self.to_tsv(with_keys)).map_err(|e| Error::io(path, e))
    }

    pub fn manifest(&self) -> SelectionManifest {
        SelectionManifest {
            ratio: self.config.ratio,
            tau: self.config.tau,
            seed: self.config.seed,
            k: self.k,
            corpus_size: self.keys.len(),
        }
    }

    /// Selected instances in id order, renumbered from 0.
    pub fn subset(&self, corpus: &Dataset) -> Result<Dataset> {
        crate::linalg::check_len(corpus.len(), self.keys.len(), "corpus")?;
        corpus.subset(&self.selected, corpus.role())
    }

    /// Writes the selected instances as a binary token file and a
    /// `new_id\toriginal_id` sidecar next to it.
    pub fn materialize(&self, corpus: &Dataset, vocab_size: u32, out: &Path, sidecar: &Path) -> Result<()> {
        let tokens = TokenCorpus::from_dataset(&self.subset(corpus)?, vocab_size)?;
        tokens.write(out)?;
        let mut map = String::from("new_id\toriginal_id\n");
        for (new, old) in self.selected.iter().enumerate() {
            map.push_str(&format!("{new}\t{old}\n"));
        }
        fs::write(sidecar, map).map_err(|e| Error::io(sidecar, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub ratio: f64,
    pub tau: f64,
    pub seed: u64,
    pub k: usize,
    pub corpus_size: usize,
}

pub fn read_selection(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if !lines.next().is_some_and(|h| h.starts_with("instance_id")) {
        return Err(Error::format(path, "expected `instance_id` header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split('\t')
                .next()
                .and_then(|c| c.trim().parse().ok())
                .ok_or_else(|| Error::format(path, format!("bad row `{l}`")))
        })
        .collect()
}
