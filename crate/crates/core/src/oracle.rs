//! Brute-force references for the solver: the unrolled cumulative downstream
//! loss, its central-difference gradient in the scores, and an active-set
//! enumeration of the simplex projection.
//!
//! Training here is a separate, deliberately plain loop so it does not share
//! code paths with [`crate::optim`].

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Dataset, DownstreamLoss, Model};
use crate::optim::AdamConfig;

/// `A(gamma) = sum_{t=1}^T J(theta_t)` plus a hash of the inputs that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct AucValue {
    pub value: f64,
    pub provenance: String,
}

#[derive(Debug, Clone, Copy)]
enum Dynamics {
    Gd { lr: f64 },
    Adam(AdamConfig),
}

fn provenance(dynamics: Dynamics, steps: usize, gamma: &[f64], theta0: &[f64], n: usize) -> String {
    let mut h = Sha256::new();
    h.update(format!("{dynamics:?}|T={steps}|n={n}|").as_bytes());
    for x in gamma.iter().chain(theta0) {
        h.update(x.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn full_grad(model: &dyn Model, data: &Dataset, gamma: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    let mut g = vec![0.0; theta.len()];
    for (x, &w) in data.iter().zip(gamma) {
        let gi = model.grad(x, theta)?;
        for (a, b) in g.iter_mut().zip(gi.iter()) {
            *a += w * b;
        }
    }
    Ok(g)
}

fn unroll(
    model: &dyn Model,
    data: &Dataset,
    gamma: &[f64],
    theta0: &[f64],
    downstream: &DownstreamLoss,
    steps: usize,
    dynamics: Dynamics,
) -> Result<f64> {
    linalg::check_len(gamma.len(), data.len(), "quality scores")?;
    linalg::check_len(theta0.len(), model.num_params(), "initial parameters")?;
    for x in data.iter() {
        model.check_instance(x)?;
    }
    let n = theta0.len();
    let mut theta = theta0.to_vec();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut total = 0.0;
    for t in 0..steps {
        let g = full_grad(model, data, gamma, &theta)?;
        match dynamics {
            Dynamics::Gd { lr } => {
                for i in 0..n {
                    theta[i] -= lr * g[i];
                }
            }
            Dynamics::Adam(c) => {
                let k = (t + 1) as i32;
                let bc1 = 1.0 - c.beta1.powi(k);
                let bc2 = 1.0 - c.beta2.powi(k);
                for i in 0..n {
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                    theta[i] -= c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                }
            }
        }
        let j = downstream.loss(model, &theta)?;
        if !j.is_finite() {
            return Err(Error::Numerical(format!("unrolled training diverged at step {}", t + 1)));
        }
        total += j;
    }
    Ok(total)
}

/// Cumulative downstream loss over `steps` full-batch GD steps.
pub fn auc_objective(
    model: &dyn Model,
    data: &Dataset,
    gamma: &[f64],
    theta0: &[f64],
    downstream: &DownstreamLoss,
    steps: usize,
    lr: f64,
) -> Result<AucValue> {
    let dynamics = Dynamics::Gd { lr };
    Ok(AucValue {
        value: unroll(model, data, gamma, theta0, downstream, steps, dynamics)?,
        provenance: provenance(dynamics, steps, gamma, theta0, data.len()),
    })
}

/// Same objective under full-batch Adam dynamics.
pub fn auc_objective_adam(
    model: &dyn Model,
    data: &Dataset,
    gamma: &[f64],
    theta0: &[f64],
    downstream: &DownstreamLoss,
    steps: usize,
    adam: &AdamConfig,
) -> Result<AucValue> {
    let dynamics = Dynamics::Adam(*adam);
    Ok(AucValue {
        value: unroll(model, data, gamma, theta0, downstream, steps, dynamics)?,
        provenance: provenance(dynamics, steps, gamma, theta0, data.len()),
    })
}

fn central_differences(
    model: &dyn Model,
    data: &Dataset,
    gamma: &[f64],
    theta0: &[f64],
    downstream: &DownstreamLoss,
    steps: usize,
    dynamics: Dynamics,
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config(format!("finite-difference step must be > 0, got {h}")));
    }
    linalg::check_len(gamma.len(), data.len(), "quality scores")?;
    (0..gamma.len())
        .into_par_iter()
        .map(|n| {
            let mut plus = gamma.to_vec();
            let mut minus = gamma.to_vec();
            plus[n] += h;
            minus[n] -= h;
            let ap = unroll(model, data, &plus, theta0, downstream, steps, dynamics)?;
            let am = unroll(model, data, &minus, theta0, downstream, steps, dynamics)?;
            Ok((ap - am) / (2.0 * h))
        })
        .collect()
}

/// Unprojected central differences of [`auc_objective`] in each score.
#[allow(clippy::too_many_arguments)]
pub fn fd_gamma_gradient(
    model: &dyn Model,
    data: &Dataset,
    gamma: &[f64],
    theta0: &[f64],
    downstream: &DownstreamLoss,
    steps: usize,
    lr: f64,
    h: f64,
) -> Result<Vec<f64>> {
    central_differences(model, data, gamma, theta0, downstream, steps, Dynamics::Gd { lr }, h)
}

#[allow(clippy::too_many_arguments)]
pub fn fd_gamma_gradient_adam(
    model: &dyn Model,
    data: &Dataset,
    gamma: &[f64],
    theta0: &[f64],
    downstream: &DownstreamLoss,
    steps: usize,
    adam: &AdamConfig,
    h: f64,
) -> Result<Vec<f64>> {
    central_differences(model, data, gamma, theta0, downstream, steps, Dynamics::Adam(*adam), h)
}

/// Simplex projection by enumerating every support set and solving its
/// equality-constrained least-squares problem. Only for `len <= 4`.
pub fn brute_simplex_projection(v: &[f64]) -> Result<Vec<f64>> {
    let d = v.len();
    if d == 0 {
        return Err(Error::Empty("projection input"));
    }
    if d > 4 {
        return Err(Error::config(format!("brute-force projection supports dim <= 4, got {d}")));
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << d) {
        let support: Vec<usize> = (0..d).filter(|i| mask & (1 << i) != 0).collect();
        let tau = (support.iter().map(|&i| v[i]).sum::<f64>() - 1.0) / support.len() as f64;
        let mut cand = vec![0.0; d];
        let mut feasible = true;
        for &i in &support {
            cand[i] = v[i] - tau;
            feasible &= cand[i] >= 0.0;
        }
        if !feasible {
            continue;
        }
        let dist: f64 = cand.iter().zip(v).map(|(c, x)| (c - x) * (c - x)).sum();
        if best.as_ref().is_none_or(|(bd, _)| dist < *bd) {
            best = Some((dist, cand));
        }
    }
    Ok(best.expect("the single-coordinate support of the largest entry is always feasible").1)
}
