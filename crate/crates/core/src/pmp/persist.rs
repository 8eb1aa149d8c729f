//! Score files and solver run manifests.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{QualityScores, SolverConfig};
use crate::error::{Error, Result};

pub const SCORES_HEADER: &str = "instance_id\tgamma";

/// Tab-separated scores, one row per instance in id order.
pub fn scores_to_tsv(gamma: &[f64]) -> String {
    let mut out = String::with_capacity(24 * gamma.len() + 16);
    out.push_str(SCORES_HEADER);
    out.push('\n');
    for (i, g) in gamma.iter().enumerate() {
        out.push_str(&format!("{i}\t{g}\n"));
    }
    out
}

pub fn write_scores(path: &Path, gamma: &QualityScores) -> Result<()> {
    fs::write(path, scores_to_tsv(gamma)).map_err(|e| Error::io(path, e))
}

/// Reads a two-column TSV with a header, checking that ids run `0..n`.
pub(crate) fn read_id_value_tsv(path: &Path, header: &str) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(header) {
        return Err(Error::format(path, format!("expected header `{header}`")));
    }
    let mut out = Vec::new();
    for (row, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let mut cols = line.split('\t');
        let id = cols.next().and_then(|c| c.trim().parse::<usize>().ok());
        let value = cols.next().and_then(|c| c.trim().parse::<f64>().ok());
        match (id, value) {
            (Some(id), Some(v)) if id == row => out.push(v),
            _ => return Err(Error::format(path, format!("bad row {}: `{line}`", row + 2))),
        }
    }
    Ok(out)
}

pub fn read_scores(path: &Path) -> Result<QualityScores> {
    let v = read_id_value_tsv(path, SCORES_HEADER)?;
    QualityScores::new(v).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverManifest {
    pub solver: SolverConfig,
    pub proxy_size: usize,
    pub num_params: usize,
    /// Seed of the proxy pre-training run that produced the checkpoints.
    pub pretrain_seed: u64,
    pub checkpoint_steps: Vec<usize>,
    pub version: String,
}

impl SolverManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_round_trip_is_exact() {
        let g = QualityScores::new(vec![0.1, 0.2, 0.7000000000000001 - 1e-16]).unwrap_or_else(|_| QualityScores::uniform(3));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.tsv");
        write_scores(&p, &g).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("instance_id\tgamma\n0\t"));
        assert_eq!(read_scores(&p).unwrap(), g);
    }

    #[test]
    fn rejects_out_of_order_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tsv");
        fs::write(&p, "instance_id\tgamma\n1\t0.5\n0\t0.5\n").unwrap();
        assert!(read_scores(&p).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let m = SolverManifest {
            solver: SolverConfig::default(),
            proxy_size: 10,
            num_params: 20,
            pretrain_seed: 3,
            checkpoint_steps: vec![100, 200],
            version: "0.1.0".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.write(&p).unwrap();
        assert_eq!(SolverManifest::read(&p).unwrap(), m);
    }
}
