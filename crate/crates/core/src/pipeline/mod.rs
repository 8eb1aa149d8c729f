//! End-to-end orchestration.
//!
//! A run goes through six stages, each reading its inputs from and writing
//! its outputs to the output directory:
//!
//! | stage            | outputs                                                     |
//! |------------------|-------------------------------------------------------------|
//! | `sample-proxy`   | `proxy.bin`, `proxy_ids.tsv`                                |
//! | `pretrain-proxy` | `checkpoints/ckpt_*.bin`                                    |
//! | `solve`          | `gamma.tsv`, `solver.json`                                  |
//! | `scorer`         | `scorer.json`                                               |
//! | `score`          | `scores.tsv`                                                |
//! | `select`         | `selection.tsv`, `selection.json`, `selected.bin`, `selected_ids.tsv` |
//!
//! `manifest.json` records a digest of every stage's inputs and outputs. A
//! stage whose input digest is unchanged and whose outputs are still on disk
//! with the recorded digests is skipped unless forced.

pub mod fixture;
pub mod simulate;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::corpus::{load_corpus, TokenCorpus, Tokenizer, TokenizerScheme, Vocabulary};
use crate::model::{Dataset, DatasetRole, DownstreamLoss, SoftmaxBigram};
use crate::optim::checkpoint::{checkpoint_file_name, read_checkpoint, write_checkpoint};
use crate::pmp::persist::{self, SolverManifest};
use crate::pmp::{self, SolverConfig};
use crate::scorer::{self, ExtractorConfig, ScorerConfig, ScorerModel};
use crate::select::{self, SelectionConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub downstream: PathBuf,
    /// Vocabulary file for text corpora; binary token files carry their own
    /// vocabulary size.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    #[serde(default)]
    pub tokenizer: TokenizerScheme,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyConfig {
    pub size: usize,
    pub max_len: Option<usize>,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig { size: 64, max_len: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSection {
    pub extractor: ExtractorConfig,
    pub fit: ScorerConfig,
}

/// Pipeline configuration, read from TOML.
///
/// Seeds in the `solver` and `select` sections are offsets added to the
/// per-stage seeds derived from the global `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: PathsConfig,
    #[serde(default)]
    pub proxy: ProxyConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub scorer: ScorerSection,
    #[serde(default)]
    pub select: SelectionConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("pipeline config: {e}")))
    }

    /// Reads a config file; relative paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            fix(&mut cfg.paths.corpus);
            fix(&mut cfg.paths.downstream);
            fix(&mut cfg.paths.out);
            if let Some(v) = cfg.paths.vocab.as_mut() {
                fix(v);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("pipeline config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let mut inputs = vec![&self.paths.corpus, &self.paths.downstream];
        inputs.extend(self.paths.vocab.as_ref());
        for p in inputs {
            if !p.is_file() {
                return Err(Error::config(format!("input {} does not exist", p.display())));
            }
        }
        if self.proxy.size == 0 {
            return Err(Error::config("proxy size must be >= 1"));
        }
        self.solver.validate()?;
        self.scorer.fit.validate()?;
        self.select.validate()?;
        let corpus = self.load_tokens(&self.paths.corpus)?;
        if self.proxy.size > corpus.sequences.len() {
            return Err(Error::config(format!(
                "proxy size {} exceeds corpus size {}",
                self.proxy.size,
                corpus.sequences.len()
            )));
        }
        Ok(())
    }

    fn load_tokens(&self, path: &Path) -> Result<TokenCorpus> {
        let tokenizer = match &self.paths.vocab {
            Some(v) => Some(Tokenizer::new(Vocabulary::from_file(v)?, self.paths.tokenizer)),
            None => None,
        };
        load_corpus(path, tokenizer.as_ref())
    }
}

/// Reads any TOML-configured type.
pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

/// Stable per-stage seed: the first 8 bytes of `sha256(stage || 0 || seed)`.
pub fn derive_seed(stage: &str, global: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update([0u8]);
    h.update(global.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Uniform sample of `size` instances without replacement, returned in id
/// order together with the original ids.
pub fn sample_proxy(corpus: &Dataset, size: usize, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    let n = corpus.len();
    if size == 0 || size > n {
        return Err(Error::config(format!("proxy size {size} must be in 1..={n}")));
    }
    let mut ids = rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(seed), n, size).into_vec();
    ids.sort_unstable();
    Ok((corpus.subset(&ids, DatasetRole::Proxy)?, ids))
}

/// Mean-zero, unit-variance copy of `scores` (unchanged when constant), so
/// the Gumbel strength is measured in standard deviations of the scores.
pub fn standardize(scores: &[f64]) -> Vec<f64> {
    let n = scores.len() as f64;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = sorted.iter().map(|s| (s - mean).powi(2)).collect();
    dev.sort_by(f64::total_cmp);
    let std = (dev.iter().sum::<f64>() / n).sqrt();
    if !(std > 0.0) {
        return scores.iter().map(|s| s - mean).collect();
    }
    scores.iter().map(|s| (s - mean) / std).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    SampleProxy,
    PretrainProxy,
    Solve,
    Scorer,
    Score,
    Select,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::SampleProxy,
        Stage::PretrainProxy,
        Stage::Solve,
        Stage::Scorer,
        Stage::Score,
        Stage::Select,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SampleProxy => "sample-proxy",
            Stage::PretrainProxy => "pretrain-proxy",
            Stage::Solve => "solve",
            Stage::Scorer => "scorer",
            Stage::Score => "score",
            Stage::Select => "select",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub input_digest: String,
    /// Output path (relative to the output directory) to sha256.
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
    /// Digests of the headline artifacts.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == name)
    }
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    out: &'a Path,
}

impl Ctx<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn solver(&self) -> SolverConfig {
        SolverConfig {
            seed: derive_seed(Stage::Solve.name(), self.cfg.seed).wrapping_add(self.cfg.solver.seed),
            ..self.cfg.solver.clone()
        }
    }

    fn pretrain_seed(&self) -> u64 {
        derive_seed(Stage::PretrainProxy.name(), self.cfg.seed).wrapping_add(self.cfg.solver.seed)
    }

    fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            seed: derive_seed(Stage::Select.name(), self.cfg.seed).wrapping_add(self.cfg.select.seed),
            ..self.cfg.select
        }
    }

    fn checkpoint_steps(&self) -> Vec<usize> {
        let s = &self.cfg.solver;
        let interval = s.pretrain_steps / s.checkpoints.max(1);
        (1..=s.checkpoints).map(|m| m * interval).collect()
    }

    fn checkpoint_paths(&self) -> Vec<String> {
        self.checkpoint_steps()
            .into_iter()
            .map(|t| format!("checkpoints/{}", checkpoint_file_name(t)))
            .collect()
    }

    fn corpus(&self) -> Result<TokenCorpus> {
        let c = self.cfg.load_tokens(&self.cfg.paths.corpus)?;
        c.validate(self.cfg.proxy.max_len)?;
        Ok(c)
    }

    fn proxy(&self) -> Result<TokenCorpus> {
        TokenCorpus::read(&self.path("proxy.bin"))
    }

    /// Digest of the stage's configuration and every file it reads.
    fn input_digest(&self, stage: Stage) -> Result<String> {
        let cfg = self.cfg;
        let config = match stage {
            Stage::SampleProxy => serde_json::json!({
                "proxy": cfg.proxy,
                "tokenizer": cfg.paths.tokenizer,
                "seed": derive_seed(stage.name(), cfg.seed),
            }),
            Stage::PretrainProxy => serde_json::json!({ "solver": cfg.solver, "seed": self.pretrain_seed() }),
            Stage::Solve => serde_json::json!({ "solver": self.solver(), "pretrain_seed": self.pretrain_seed() }),
            Stage::Scorer => serde_json::json!({ "scorer": cfg.scorer }),
            Stage::Score => serde_json::json!({ "max_len": cfg.proxy.max_len, "tokenizer": cfg.paths.tokenizer }),
            Stage::Select => serde_json::json!({ "select": self.selection() }),
        };
        let mut files: Vec<PathBuf> = Vec::new();
        let corpus_files = || {
            let mut v = vec![cfg.paths.corpus.clone()];
            v.extend(cfg.paths.vocab.clone());
            v
        };
        match stage {
            Stage::SampleProxy => files.extend(corpus_files()),
            Stage::PretrainProxy => files.push(self.path("proxy.bin")),
            Stage::Solve => {
                files.push(self.path("proxy.bin"));
                files.push(cfg.paths.downstream.clone());
                files.extend(self.checkpoint_paths().iter().map(|p| self.path(p)));
            }
            Stage::Scorer => {
                files.push(self.path("proxy.bin"));
                files.push(self.path("gamma.tsv"));
            }
            Stage::Score => {
                files.extend(corpus_files());
                files.push(self.path("scorer.json"));
            }
            Stage::Select => {
                files.extend(corpus_files());
                files.push(self.path("scores.tsv"));
            }
        }
        let mut h = Sha256::new();
        h.update(stage.name().as_bytes());
        h.update(config.to_string().as_bytes());
        for f in &files {
            h.update(file_digest(f)?.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Runs one stage and returns its output paths relative to `out`.
    fn run(&self, stage: Stage) -> Result<Vec<String>> {
        match stage {
            Stage::SampleProxy => {
                let corpus = self.corpus()?;
                let vocab = corpus.vocab_size;
                let data = corpus.into_dataset(DatasetRole::Corpus)?;
                let (proxy, ids) = sample_proxy(&data, self.cfg.proxy.size, derive_seed(stage.name(), self.cfg.seed))?;
                TokenCorpus::from_dataset(&proxy, vocab)?.write(&self.path("proxy.bin"))?;
                let mut map = String::from("proxy_id\toriginal_id\n");
                for (new, old) in ids.iter().enumerate() {
                    map.push_str(&format!("{new}\t{old}\n"));
                }
                let p = self.path("proxy_ids.tsv");
                fs::write(&p, map).map_err(|e| Error::io(&p, e))?;
                Ok(vec!["proxy.bin".into(), "proxy_ids.tsv".into()])
            }
            Stage::PretrainProxy => {
                let proxy = self.proxy()?;
                let model = SoftmaxBigram::new(proxy.vocab_size as usize);
                let data = proxy.into_dataset(DatasetRole::Proxy)?;
                let s = SolverConfig {
                    seed: self.pretrain_seed(),
                    ..self.cfg.solver.clone()
                };
                let theta0 = vec![0.0; crate::model::Model::num_params(&model)];
                let ckpts =
                    pmp::proxy_checkpoints(&model, &data, &theta0, s.pretrain_steps, s.checkpoints, &s.optimizer(), s.batch())?;
                let dir = self.path("checkpoints");
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                }
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let rels = self.checkpoint_paths();
                for (rel, theta) in rels.iter().zip(&ckpts) {
                    write_checkpoint(&self.path(rel), theta.as_slice())?;
                }
                Ok(rels)
            }
            Stage::Solve => {
                let proxy = self.proxy()?;
                let vocab = proxy.vocab_size as usize;
                let model = SoftmaxBigram::new(vocab);
                let data = proxy.into_dataset(DatasetRole::Proxy)?;
                let down = self.cfg.load_tokens(&self.cfg.paths.downstream)?;
                if down.vocab_size as usize != vocab {
                    return Err(Error::config(format!(
                        "downstream vocabulary size {} differs from corpus {vocab}",
                        down.vocab_size
                    )));
                }
                let downstream = DownstreamLoss::new(down.into_dataset(DatasetRole::Downstream)?)?;
                let ckpts = self
                    .checkpoint_paths()
                    .iter()
                    .map(|rel| read_checkpoint(&self.path(rel)))
                    .collect::<Result<Vec<_>>>()?;
                let solver = self.solver();
                let gamma = pmp::multi_checkpoint_scores(&model, &data, &downstream, &ckpts, &solver)?;
                persist::write_scores(&self.path("gamma.tsv"), &gamma)?;
                SolverManifest {
                    solver,
                    proxy_size: data.len(),
                    num_params: crate::model::Model::num_params(&model),
                    pretrain_seed: self.pretrain_seed(),
                    checkpoint_steps: self.checkpoint_steps(),
                    version: VERSION.into(),
                }
                .write(&self.path("solver.json"))?;
                Ok(vec!["gamma.tsv".into(), "solver.json".into()])
            }
            Stage::Scorer => {
                let data = self.proxy()?.into_dataset(DatasetRole::Proxy)?;
                let gamma = persist::read_scores(&self.path("gamma.tsv"))?;
                let extractor = self.cfg.scorer.extractor.build()?;
                let model = scorer::fit_scorer(&data, gamma.as_slice(), extractor.as_ref(), &self.cfg.scorer.fit)?;
                model.write(&self.path("scorer.json"))?;
                Ok(vec!["scorer.json".into()])
            }
            Stage::Score => {
                let data = self.corpus()?.into_dataset(DatasetRole::Corpus)?;
                let model = ScorerModel::read(&self.path("scorer.json"))?;
                let extractor = model.extractor.build()?;
                let scores = scorer::infer_scores(&model, extractor.as_ref(), &data)?;
                scorer::write_scores(&self.path("scores.tsv"), &scores)?;
                Ok(vec!["scores.tsv".into()])
            }
            Stage::Select => {
                let corpus = self.corpus()?;
                let vocab = corpus.vocab_size;
                let data = corpus.into_dataset(DatasetRole::Corpus)?;
                let scores = scorer::read_scores(&self.path("scores.tsv"))?;
                crate::linalg::check_len(scores.len(), data.len(), "inferred scores")?;
                let result = select::gumbel_topk(&standardize(&scores), &self.selection())?;
                result.write_tsv(&self.path("selection.tsv"), true)?;
                let mp = self.path("selection.json");
                let json = serde_json::to_string_pretty(&result.manifest()).map_err(|e| Error::format(&mp, e.to_string()))?;
                fs::write(&mp, json + "\n").map_err(|e| Error::io(&mp, e))?;
                result.materialize(&data, vocab, &self.path("selected.bin"), &self.path("selected_ids.tsv"))?;
                Ok(vec![
                    "selection.tsv".into(),
                    "selection.json".into(),
                    "selected.bin".into(),
                    "selected_ids.tsv".into(),
                ])
            }
        }
    }

    fn outputs_intact(&self, outputs: &BTreeMap<String, String>) -> bool {
        !outputs.is_empty()
            && outputs
                .iter()
                .all(|(rel, digest)| file_digest(&self.path(rel)).is_ok_and(|d| &d == digest))
    }
}

/// Runs every stage.
pub fn run_pipeline(config: &PipelineConfig, force: bool) -> Result<RunManifest> {
    run_through(config, Stage::Select, force)
}

/// Runs the stages up to and including `last`, skipping up-to-date ones.
/// The manifest is rewritten after every stage, so a failure leaves the
/// completed stages recorded.
pub fn run_through(config: &PipelineConfig, last: Stage, force: bool) -> Result<RunManifest> {
    config.validate()?;
    let out = config.paths.out.as_path();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest_path = out.join(MANIFEST_FILE);
    let previous = RunManifest::read(&manifest_path).ok();
    let ctx = Ctx { cfg: config, out };
    let mut manifest = RunManifest {
        version: VERSION.into(),
        config: config.clone(),
        stages: Vec::new(),
        artifacts: BTreeMap::new(),
    };
    for stage in Stage::ALL.into_iter().filter(|s| *s <= last) {
        let name = stage.name();
        let input_digest = ctx.input_digest(stage).map_err(|e| e.in_stage(name))?;
        let up_to_date = previous
            .as_ref()
            .and_then(|m| m.stage(name))
            .filter(|r| r.input_digest == input_digest && ctx.outputs_intact(&r.outputs));
        if let (false, Some(prev)) = (force, up_to_date) {
            manifest.stages.push(StageRecord {
                skipped: true,
                ..prev.clone()
            });
            continue;
        }
        let start = Instant::now();
        let outputs = match ctx.run(stage) {
            Ok(o) => o,
            Err(e) => {
                manifest.write(&manifest_path)?;
                return Err(e.in_stage(name));
            }
        };
        let outputs = outputs
            .into_iter()
            .map(|rel| file_digest(&ctx.path(&rel)).map(|d| (rel, d)))
            .collect::<Result<BTreeMap<_, _>>>()
            .map_err(|e| e.in_stage(name))?;
        manifest.stages.push(StageRecord {
            stage: name.into(),
            input_digest,
            outputs,
            seconds: start.elapsed().as_secs_f64(),
            skipped: false,
        });
        manifest.write(&manifest_path)?;
    }
    for rec in &manifest.stages {
        for key in ["gamma.tsv", "scorer.json", "scores.tsv", "selection.tsv"] {
            if let Some(d) = rec.outputs.get(key) {
                manifest.artifacts.insert(key.into(), d.clone());
            }
        }
    }
    manifest.write(&manifest_path)?;
    Ok(manifest)
}
