//! Synthetic corpus with planted quality.
//!
//! Clean text is a Markov chain that mostly steps `x -> x + 1 (mod V)`.
//! Every instance has a corruption level `c`: a random `round(c * L)` of its
//! positions have their tokens shuffled among themselves. Half the corpus is
//! clean (`c` spread over `[0, 0.3]`), half is noise (`c` over `[0.7, 1]`);
//! planted quality is `1 - c`. The downstream set is uncorrupted chain text.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::corpus::TokenCorpus;
use crate::model::{Dataset, DatasetRole, HvpPath};
use crate::pipeline::{PathsConfig, PipelineConfig, ProxyConfig, ScorerSection};
use crate::pmp::SolverConfig;
use crate::select::SelectionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureConfig {
    pub size: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub downstream_size: usize,
    /// Probability the clean chain takes its regular step.
    pub p_next: f64,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            size: 64,
            seq_len: 64,
            vocab: 8,
            downstream_size: 16,
            p_next: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedFixture {
    pub corpus: Dataset,
    pub downstream: Dataset,
    /// Planted quality `1 - c` by corpus id.
    pub quality: Vec<f64>,
    pub clean: Vec<bool>,
    pub vocab: usize,
}

fn chain(rng: &mut ChaCha8Rng, len: usize, vocab: usize, p_next: f64) -> Vec<u32> {
    let mut out = Vec::with_capacity(len);
    let mut x = rng.random_range(0..vocab);
    for _ in 0..len {
        out.push(x as u32);
        x = if rng.random::<f64>() < p_next { (x + 1) % vocab } else { rng.random_range(0..vocab) };
    }
    out
}

fn corrupt(rng: &mut ChaCha8Rng, seq: &mut [u32], level: f64) {
    let k = (level * seq.len() as f64).round() as usize;
    let mut positions: Vec<usize> = (0..seq.len()).collect();
    positions.shuffle(rng);
    positions.truncate(k);
    let mut tokens: Vec<u32> = positions.iter().map(|&p| seq[p]).collect();
    tokens.shuffle(rng);
    for (&p, t) in positions.iter().zip(tokens) {
        seq[p] = t;
    }
}

fn spread(lo: f64, hi: f64, count: usize) -> impl Iterator<Item = f64> {
    (0..count).map(move |i| if count == 1 { lo } else { lo + (hi - lo) * i as f64 / (count - 1) as f64 })
}

pub fn planted_fixture(cfg: &FixtureConfig) -> Result<PlantedFixture> {
    if cfg.size < 2 || cfg.seq_len < 2 || cfg.vocab < 2 || cfg.downstream_size == 0 {
        return Err(Error::config(format!("fixture too small: {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clean_count = cfg.size / 2;
    let levels: Vec<f64> = spread(0.0, 0.3, clean_count)
        .chain(spread(0.7, 1.0, cfg.size - clean_count))
        .collect();
    let mut order: Vec<usize> = (0..cfg.size).collect();
    order.shuffle(&mut rng);
    let mut seqs = Vec::with_capacity(cfg.size);
    let mut quality = Vec::with_capacity(cfg.size);
    let mut clean = Vec::with_capacity(cfg.size);
    for &slot in &order {
        let mut s = chain(&mut rng, cfg.seq_len, cfg.vocab, cfg.p_next);
        corrupt(&mut rng, &mut s, levels[slot]);
        seqs.push(s);
        quality.push(1.0 - levels[slot]);
        clean.push(slot < clean_count);
    }
    let downstream = (0..cfg.downstream_size)
        .map(|_| chain(&mut rng, cfg.seq_len, cfg.vocab, cfg.p_next))
        .collect();
    Ok(PlantedFixture {
        corpus: Dataset::from_sequences(seqs, DatasetRole::Corpus)?,
        downstream: Dataset::from_sequences(downstream, DatasetRole::Downstream)?,
        quality,
        clean,
        vocab: cfg.vocab,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureFiles {
    pub corpus: PathBuf,
    pub downstream: PathBuf,
    /// `instance_id\tquality\tclean` table.
    pub quality: PathBuf,
}

impl PlantedFixture {
    /// Writes `corpus.bin`, `downstream.bin` and `quality.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<FixtureFiles> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = FixtureFiles {
            corpus: dir.join("corpus.bin"),
            downstream: dir.join("downstream.bin"),
            quality: dir.join("quality.tsv"),
        };
        TokenCorpus::from_dataset(&self.corpus, self.vocab as u32)?.write(&files.corpus)?;
        TokenCorpus::from_dataset(&self.downstream, self.vocab as u32)?.write(&files.downstream)?;
        let mut table = String::from("instance_id\tquality\tclean\n");
        for (i, (q, c)) in self.quality.iter().zip(&self.clean).enumerate() {
            table.push_str(&format!("{i}\t{q}\t{}\n", *c as u8));
        }
        fs::write(&files.quality, table).map_err(|e| Error::io(&files.quality, e))?;
        Ok(files)
    }
}

impl FixtureFiles {
    /// Pipeline settings sized for the fixture.
    pub fn pipeline_config(&self, out: &Path, seed: u64) -> PipelineConfig {
        PipelineConfig {
            seed,
            paths: PathsConfig {
                corpus: self.corpus.clone(),
                downstream: self.downstream.clone(),
                vocab: None,
                tokenizer: Default::default(),
                out: out.to_path_buf(),
            },
            proxy: ProxyConfig { size: 48, max_len: None },
            solver: SolverConfig {
                lr: 0.05,
                outer_lr: 2e-7,
                steps: 40,
                outer_epochs: 1,
                checkpoints: 2,
                batch_size: Some(16),
                seed: 0,
                hvp: HvpPath::Exact,
                stride: 1,
                pretrain_steps: 40,
            },
            scorer: ScorerSection::default(),
            select: SelectionConfig {
                ratio: 0.5,
                tau: 0.1,
                seed: 0,
            },
        }
    }
}
