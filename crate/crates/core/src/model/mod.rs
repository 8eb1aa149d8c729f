//! Differentiable model contract and the two reference models.
//!
//! A [`Model`] exposes per-instance loss, gradient and (optionally) an exact
//! Hessian-vector product. Everything the solver needs at the dataset level
//! (weighted loss, weighted gradient, HVP of the weighted loss, downstream
//! loss `J`) is built from those three primitives here.

mod bigram;
pub mod corpus;
mod quadratic;

use serde::{Deserialize, Serialize};

pub use bigram::SoftmaxBigram;
pub use quadratic::QuadraticToy;

use crate::error::{Error, Result};
use crate::linalg::{self, ParamVector};

/// Instance contents: token ids for language models, a real vector for the
/// quadratic toy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Tokens(Vec<u32>),
    Features(Vec<f64>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::Tokens(t) => t.len(),
            Payload::Features(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> Option<&[u32]> {
        match self {
            Payload::Tokens(t) => Some(t),
            Payload::Features(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: usize,
    pub payload: Payload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetRole {
    Corpus,
    Proxy,
    Downstream,
}

/// Non-empty ordered list of instances whose ids are `0..len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    instances: Vec<Instance>,
    role: DatasetRole,
}

impl Dataset {
    pub fn new(instances: Vec<Instance>, role: DatasetRole) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if let Some((pos, inst)) = instances.iter().enumerate().find(|(i, x)| x.id != *i) {
            return Err(Error::config(format!(
                "dataset ids must be 0..n in order: position {pos} has id {}",
                inst.id
            )));
        }
        Ok(Dataset { instances, role })
    }

    /// Builds a dataset assigning ids in order.
    pub fn from_payloads(payloads: Vec<Payload>, role: DatasetRole) -> Result<Self> {
        let instances = payloads
            .into_iter()
            .enumerate()
            .map(|(id, payload)| Instance { id, payload })
            .collect();
        Dataset::new(instances, role)
    }

    pub fn from_features(rows: Vec<Vec<f64>>, role: DatasetRole) -> Result<Self> {
        Dataset::from_payloads(rows.into_iter().map(Payload::Features).collect(), role)
    }

    pub fn from_sequences(seqs: Vec<Vec<u32>>, role: DatasetRole) -> Result<Self> {
        Dataset::from_payloads(seqs.into_iter().map(Payload::Tokens).collect(), role)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn role(&self) -> DatasetRole {
        self.role
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn get(&self, idx: usize) -> &Instance {
        &self.instances[idx]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Instance> {
        self.instances.iter()
    }

    /// New dataset made of the given positions (re-numbered from 0).
    pub fn subset(&self, positions: &[usize], role: DatasetRole) -> Result<Self> {
        let payloads = positions
            .iter()
            .map(|&p| {
                self.instances
                    .get(p)
                    .map(|x| x.payload.clone())
                    .ok_or_else(|| Error::config(format!("subset position {p} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::from_payloads(payloads, role)
    }

    pub fn with_role(mut self, role: DatasetRole) -> Self {
        self.role = role;
        self
    }
}

/// Per-instance loss, gradient and optional exact HVP.
///
/// Implementations are pure functions of `(x, theta)` and may be evaluated
/// concurrently.
pub trait Model: Send + Sync {
    fn num_params(&self) -> usize;

    fn check_instance(&self, x: &Instance) -> Result<()>;

    fn loss(&self, x: &Instance, theta: &[f64]) -> Result<f64>;

    /// `out += weight * grad l(x, theta)`
    fn grad_acc(&self, x: &Instance, theta: &[f64], weight: f64, out: &mut [f64]) -> Result<()>;

    fn grad(&self, x: &Instance, theta: &[f64]) -> Result<ParamVector> {
        let mut out = vec![0.0; self.num_params()];
        self.grad_acc(x, theta, 1.0, &mut out)?;
        Ok(out.into())
    }

    fn has_exact_hvp(&self) -> bool {
        false
    }

    /// `out += weight * hess l(x, theta) * v`. Only called when
    /// [`Model::has_exact_hvp`] is true.
    fn hvp_acc(
        &self,
        _x: &Instance,
        _theta: &[f64],
        _v: &[f64],
        _weight: f64,
        _out: &mut [f64],
    ) -> Result<()> {
        Err(Error::config("model does not provide an exact HVP"))
    }
}

/// Which Hessian-vector product route to take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HvpPath {
    /// Exact rule when the model provides one, otherwise finite differences.
    #[default]
    Exact,
    FiniteDifference,
}

fn check_theta(model: &dyn Model, theta: &[f64]) -> Result<()> {
    linalg::check_len(theta.len(), model.num_params(), "parameter vector")
}

fn check_weights(data: &Dataset, weights: &[f64]) -> Result<()> {
    linalg::check_len(weights.len(), data.len(), "quality scores")
}

pub fn loss(model: &dyn Model, x: &Instance, theta: &[f64]) -> Result<f64> {
    check_theta(model, theta)?;
    model.check_instance(x)?;
    model.loss(x, theta)
}

pub fn grad(model: &dyn Model, x: &Instance, theta: &[f64]) -> Result<ParamVector> {
    check_theta(model, theta)?;
    model.check_instance(x)?;
    model.grad(x, theta)
}

/// `sum_n weights[n] * l(x_n, theta)`; zero-weight instances are skipped.
pub fn weighted_loss(model: &dyn Model, data: &Dataset, weights: &[f64], theta: &[f64]) -> Result<f64> {
    check_weights(data, weights)?;
    check_theta(model, theta)?;
    let mut total = 0.0;
    for (x, &w) in data.iter().zip(weights) {
        if w != 0.0 {
            model.check_instance(x)?;
            total += w * model.loss(x, theta)?;
        }
    }
    Ok(total)
}

/// Gradient of [`weighted_loss`], accumulated in instance order.
pub fn weighted_grad(
    model: &dyn Model,
    data: &Dataset,
    weights: &[f64],
    theta: &[f64],
) -> Result<ParamVector> {
    check_weights(data, weights)?;
    check_theta(model, theta)?;
    let mut out = vec![0.0; model.num_params()];
    for (x, &w) in data.iter().zip(weights) {
        if w != 0.0 {
            model.check_instance(x)?;
            model.grad_acc(x, theta, w, &mut out)?;
        }
    }
    Ok(out.into())
}

/// Hessian of the weighted loss applied to `v`.
pub fn hvp(
    model: &dyn Model,
    data: &Dataset,
    weights: &[f64],
    theta: &[f64],
    v: &[f64],
    path: HvpPath,
) -> Result<ParamVector> {
    check_weights(data, weights)?;
    check_theta(model, theta)?;
    linalg::check_len(v.len(), theta.len(), "hvp direction")?;
    if path == HvpPath::Exact && model.has_exact_hvp() {
        hvp_exact(model, data, weights, theta, v)
    } else {
        hvp_fd(model, data, weights, theta, v)
    }
}

fn hvp_exact(
    model: &dyn Model,
    data: &Dataset,
    weights: &[f64],
    theta: &[f64],
    v: &[f64],
) -> Result<ParamVector> {
    let mut out = vec![0.0; model.num_params()];
    for (x, &w) in data.iter().zip(weights) {
        if w != 0.0 {
            model.check_instance(x)?;
            model.hvp_acc(x, theta, v, w, &mut out)?;
        }
    }
    Ok(out.into())
}

/// Central difference of the weighted gradient along `v` with step
/// `eps = 1e-4 (1 + |theta|) / |v|`.
pub fn hvp_fd(
    model: &dyn Model,
    data: &Dataset,
    weights: &[f64],
    theta: &[f64],
    v: &[f64],
) -> Result<ParamVector> {
    let vnorm = linalg::norm(v);
    if vnorm == 0.0 {
        return Ok(ParamVector::zeros(theta.len()));
    }
    let eps = 1e-4 * (1.0 + linalg::norm(theta)) / vnorm;
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + eps * d).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t - eps * d).collect();
    let gp = weighted_grad(model, data, weights, &plus)?;
    let gm = weighted_grad(model, data, weights, &minus)?;
    Ok(gp
        .iter()
        .zip(gm.iter())
        .map(|(a, b)| (a - b) / (2.0 * eps))
        .collect::<Vec<_>>()
        .into())
}

/// Downstream objective `J(theta)`: mean per-instance loss over a fixed set.
#[derive(Debug, Clone)]
pub struct DownstreamLoss {
    dataset: Dataset,
    weights: Vec<f64>,
}

impl DownstreamLoss {
    pub fn new(dataset: Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Empty("downstream dataset"));
        }
        let n = dataset.len();
        Ok(DownstreamLoss {
            dataset: dataset.with_role(DatasetRole::Downstream),
            weights: vec![1.0 / n as f64; n],
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn loss(&self, model: &dyn Model, theta: &[f64]) -> Result<f64> {
        weighted_loss(model, &self.dataset, &self.weights, theta)
    }

    pub fn grad(&self, model: &dyn Model, theta: &[f64]) -> Result<ParamVector> {
        weighted_grad(model, &self.dataset, &self.weights, theta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(rows: &[f64]) -> Dataset {
        Dataset::from_features(rows.iter().map(|&r| vec![r]).collect(), DatasetRole::Proxy).unwrap()
    }

    #[test]
    fn quadratic_loss_values() {
        let m = QuadraticToy::new(1);
        let d = toy(&[1.0, 0.0]);
        assert_eq!(loss(&m, d.get(0), &[1.0]).unwrap(), 0.0);
        assert_eq!(loss(&m, d.get(1), &[2.0]).unwrap(), 2.0);
    }

    #[test]
    fn quadratic_grad_values() {
        let m = QuadraticToy::new(1);
        let d = toy(&[1.0]);
        assert_eq!(grad(&m, d.get(0), &[3.0]).unwrap().as_slice(), &[2.0]);
        assert_eq!(grad(&m, d.get(0), &[1.0]).unwrap().as_slice(), &[0.0]);
    }

    #[test]
    fn bigram_uniform_loss() {
        let m = SoftmaxBigram::new(4);
        let d = Dataset::from_sequences(vec![vec![0, 1, 2, 3, 1]], DatasetRole::Proxy).unwrap();
        let theta = vec![0.0; m.num_params()];
        let l = loss(&m, d.get(0), &theta).unwrap();
        assert!((l - 5.0 * 4f64.ln()).abs() < 1e-12);
        assert!((l - 6.9315).abs() < 1e-4);
    }

    #[test]
    fn weighted_loss_examples() {
        let m = QuadraticToy::new(1);
        // losses at theta = 0: {0, 2, 4.5} -> use x = {0, 2, sqrt(8)} for {0, 2, 4}
        let d = toy(&[0.0, 2.0, 8f64.sqrt()]);
        let l = weighted_loss(&m, &d, &[0.5, 0.25, 0.25], &[0.0]).unwrap();
        assert!((l - 1.5).abs() < 1e-12);
        let uniform = weighted_loss(&m, &d, &[1.0 / 3.0; 3], &[0.0]).unwrap();
        assert!((uniform - 2.0).abs() < 1e-12);
        let onehot = weighted_loss(&m, &d, &[0.0, 1.0, 0.0], &[0.0]).unwrap();
        assert_eq!(onehot, 2.0);
    }

    #[test]
    fn weighted_loss_length_mismatch() {
        let m = QuadraticToy::new(1);
        let d = toy(&[0.0, 1.0]);
        assert!(matches!(
            weighted_loss(&m, &d, &[1.0], &[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let m = QuadraticToy::new(2);
        let d = toy(&[1.0]);
        assert!(loss(&m, d.get(0), &[0.0, 0.0]).is_err());
        assert!(loss(&m, d.get(0), &[0.0]).is_err());
    }

    #[test]
    fn quadratic_hvp_is_identity_on_simplex() {
        let m = QuadraticToy::new(3);
        let d = Dataset::from_features(vec![vec![1.0, 2.0, 3.0], vec![0.0, -1.0, 4.0]], DatasetRole::Proxy)
            .unwrap();
        let v = [0.5, -2.0, 5.0];
        let h = hvp(&m, &d, &[0.25, 0.75], &[0.0; 3], &v, HvpPath::Exact).unwrap();
        assert_eq!(h.as_slice(), &v);
        let z = hvp(&m, &d, &[0.25, 0.75], &[0.0; 3], &[0.0; 3], HvpPath::Exact).unwrap();
        assert_eq!(z.as_slice(), &[0.0; 3]);
        let zfd = hvp(&m, &d, &[0.25, 0.75], &[0.0; 3], &[0.0; 3], HvpPath::FiniteDifference).unwrap();
        assert_eq!(zfd.as_slice(), &[0.0; 3]);
    }

    #[test]
    fn downstream_examples() {
        let m = QuadraticToy::new(1);
        let j = DownstreamLoss::new(toy(&[1.0])).unwrap();
        assert_eq!(j.loss(&m, &[1.0]).unwrap(), 0.0);
        assert_eq!(j.grad(&m, &[1.0]).unwrap().as_slice(), &[0.0]);
        let j2 = DownstreamLoss::new(toy(&[0.0, 2.0])).unwrap();
        assert!((j2.loss(&m, &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(j2.grad(&m, &[1.0]).unwrap().as_slice(), &[0.0]);
    }

    #[test]
    fn dataset_rejects_bad_ids() {
        let bad = vec![Instance {
            id: 3,
            payload: Payload::Features(vec![0.0]),
        }];
        assert!(Dataset::new(bad, DatasetRole::Corpus).is_err());
        assert!(Dataset::new(vec![], DatasetRole::Corpus).is_err());
    }
}
