//! Solver for the data-selection optimality conditions.
//!
//! The forward inner loop trains with the current quality scores, the
//! reverse inner loop propagates the co-state
//!
//! ```text
//! lambda_T = grad J(theta_T)
//! lambda_t = lambda_{t+1} + grad J(theta_t) - lr * H_t lambda_{t+1}
//! ```
//!
//! and the scores move along `s_n = sum_t lambda_{t+1} . grad l(x_n, theta_t)`
//! followed by a Euclidean projection back onto the simplex. Up to the factor
//! `-1/lr`, `s` is the gradient of the cumulative downstream loss with
//! respect to the scores, so each outer epoch is one projected-gradient step.

mod adam;
pub mod persist;
mod simplex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_gamma_gradient, pmp_solve_adam, reverse_inner_adam, AdamCoStates};
pub use simplex::{project_simplex, QualityScores, SIMPLEX_TOL};

use crate::error::{Error, Result};
use crate::linalg::{self, ParamVector};
use crate::model::{self, Dataset, DownstreamLoss, HvpPath, Model};
use crate::optim::{self, BatchConfig, CheckpointPolicy, OptimizerConfig, Trajectory};

/// Co-states beyond this norm abort the reverse loop.
pub const MAX_COSTATE_NORM: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Inner learning rate.
    pub lr: f64,
    /// Outer (score) learning rate.
    pub outer_lr: f64,
    /// Inner steps per outer epoch.
    pub steps: usize,
    pub outer_epochs: usize,
    /// Number of proxy checkpoints averaged over.
    pub checkpoints: usize,
    /// Mini-batch size; `None` trains full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub hvp: HvpPath,
    /// Evaluate the score gradient every `stride` steps, scaled by `stride`.
    pub stride: usize,
    /// Proxy pre-training steps before harvesting checkpoints.
    pub pretrain_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lr: 0.008,
            outer_lr: 1.0,
            steps: 100,
            outer_epochs: 1,
            checkpoints: 5,
            batch_size: Some(256),
            seed: 0,
            hvp: HvpPath::Exact,
            stride: 1,
            pretrain_steps: 500,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::config(format!("solver: {what}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return bad("outer_lr must be > 0");
        }
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if self.checkpoints == 0 {
            return bad("checkpoints must be >= 1");
        }
        if self.stride == 0 {
            return bad("stride must be >= 1");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be >= 1");
        }
        Ok(())
    }

    pub fn batch(&self) -> BatchConfig {
        match self.batch_size {
            None => BatchConfig::Full,
            Some(size) => BatchConfig::MiniBatch { size, seed: self.seed },
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig::Gd { lr: self.lr }
    }
}

/// `lambda_1..lambda_T`; `lambdas[t - 1]` holds `lambda_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoStateTrajectory {
    pub lambdas: Vec<ParamVector>,
}

impl CoStateTrajectory {
    /// `lambda_t` for `1 <= t <= T`.
    pub fn lambda(&self, t: usize) -> &ParamVector {
        &self.lambdas[t - 1]
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }
}

fn guard_costate(lambda: &[f64], step: usize) -> Result<()> {
    let norm = linalg::norm(lambda);
    if !norm.is_finite() || norm > MAX_COSTATE_NORM {
        return Err(Error::UnstableCoState { step, norm });
    }
    Ok(())
}

/// Reverse inner loop. The Hessian at step `t` is that of the loss actually
/// used at step `t` (the recorded batch, rescaled).
pub fn reverse_inner(
    model: &dyn Model,
    data: &Dataset,
    gamma: &[f64],
    traj: &Trajectory,
    downstream: &DownstreamLoss,
    lr: f64,
    hvp: HvpPath,
) -> Result<CoStateTrajectory> {
    let steps = traj.num_steps();
    if steps == 0 {
        return Err(Error::config("reverse loop needs at least one training step"));
    }
    linalg::check_len(gamma.len(), data.len(), "quality scores")?;
    let mut lambdas = vec![ParamVector::zeros(0); steps];
    let last = downstream.grad(model, &traj.checkpoint(steps)?)?;
    guard_costate(&last, steps)?;
    lambdas[steps - 1] = last;
    for t in (1..steps).rev() {
        let theta = traj.checkpoint(t)?;
        let next = &lambdas[t];
        let weights = traj.step_meta(t).weights(gamma);
        let hv = model::hvp(model, data, &weights, &theta, next, hvp)?;
        let mut lam = downstream.grad(model, &theta)?;
        for ((l, n), h) in lam.iter_mut().zip(next.iter()).zip(hv.iter()) {
            *l += n - lr * h;
        }
        guard_costate(&lam, t)?;
        lambdas[t - 1] = lam;
    }
    Ok(CoStateTrajectory { lambdas })
}

/// Per-instance alignment `lambda . grad l(x_n, theta)` for every instance.
pub(crate) fn alignments(model: &dyn Model, data: &Dataset, theta: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
    data.instances()
        .par_iter()
        .map(|x| {
            model.check_instance(x)?;
            Ok(model.grad(x, theta)?.dot(lambda))
        })
        .collect()
}

/// `s_n = sum_{t=0}^{T-1} lambda_{t+1} . grad l(x_n, theta_t)`, evaluated
/// for every instance at every (strided) step regardless of batching.
pub fn gamma_gradient(
    model: &dyn Model,
    data: &Dataset,
    traj: &Trajectory,
    costates: &CoStateTrajectory,
    stride: usize,
) -> Result<Vec<f64>> {
    let steps = traj.num_steps();
    linalg::check_len(costates.len(), steps, "co-state trajectory")?;
    let stride = stride.max(1);
    let scale = stride as f64;
    let mut s = vec![0.0; data.len()];
    for t in (0..steps).step_by(stride) {
        let theta = traj.checkpoint(t)?;
        let a = alignments(model, data, &theta, costates.lambda(t + 1))?;
        for (si, ai) in s.iter_mut().zip(a) {
            *si += scale * ai;
        }
    }
    if let Some(i) = s.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("score gradient non-finite at instance {i}")));
    }
    Ok(s)
}

/// Everything one outer epoch produced.
#[derive(Debug)]
pub struct OuterStep {
    pub trajectory: Trajectory,
    pub costates: CoStateTrajectory,
    pub gradient: Vec<f64>,
    pub scores: QualityScores,
}

/// One outer epoch: forward loop, reverse loop, soft update and projection.
pub fn outer_step(
    model: &dyn Model,
    proxy: &Dataset,
    downstream: &DownstreamLoss,
    theta0: &[f64],
    gamma: &QualityScores,
    config: &SolverConfig,
    policy: &CheckpointPolicy,
) -> Result<OuterStep> {
    let trajectory = optim::train(
        model,
        proxy,
        gamma,
        theta0,
        config.steps,
        &config.optimizer(),
        config.batch(),
        policy,
    )?;
    let costates = reverse_inner(model, proxy, gamma, &trajectory, downstream, config.lr, config.hvp)?;
    let gradient = gamma_gradient(model, proxy, &trajectory, &costates, config.stride)?;
    let moved: Vec<f64> = gamma
        .iter()
        .zip(&gradient)
        .map(|(g, s)| g + config.outer_lr * s)
        .collect();
    let scores = project_simplex(&moved)?;
    Ok(OuterStep {
        trajectory,
        costates,
        gradient,
        scores,
    })
}

/// Runs `outer_epochs` epochs from uniform scores. Zero epochs returns the
/// uniform scores.
pub fn pmp_solve(
    model: &dyn Model,
    proxy: &Dataset,
    downstream: &DownstreamLoss,
    theta0: &[f64],
    config: &SolverConfig,
) -> Result<QualityScores> {
    config.validate()?;
    let policy = CheckpointPolicy::in_memory();
    let mut gamma = QualityScores::uniform(proxy.len());
    for _ in 0..config.outer_epochs {
        gamma = outer_step(model, proxy, downstream, theta0, &gamma, config, &policy)?.scores;
    }
    Ok(gamma)
}

/// Average of single-epoch solves started from each checkpoint.
///
/// Runs are independent and executed in parallel; the mean is accumulated per
/// coordinate in sorted order so it does not depend on checkpoint order.
pub fn multi_checkpoint_scores(
    model: &dyn Model,
    proxy: &Dataset,
    downstream: &DownstreamLoss,
    checkpoints: &[ParamVector],
    config: &SolverConfig,
) -> Result<QualityScores> {
    if checkpoints.is_empty() {
        return Err(Error::Empty("checkpoint list"));
    }
    let single = SolverConfig {
        outer_epochs: 1,
        ..config.clone()
    };
    let runs = checkpoints
        .par_iter()
        .map(|theta0| pmp_solve(model, proxy, downstream, theta0, &single))
        .collect::<Result<Vec<_>>>()?;
    let m = runs.len() as f64;
    let mut column = Vec::with_capacity(runs.len());
    let mean = (0..proxy.len())
        .map(|n| {
            column.clear();
            column.extend(runs.iter().map(|r| r[n]));
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / m
        })
        .collect();
    QualityScores::new(mean)
}

/// Pre-trains with uniform scores and returns `count` checkpoints spaced
/// `floor(pretrain_steps / count)` steps apart (the last one at
/// `count * floor(pretrain_steps / count)`).
pub fn proxy_checkpoints(
    model: &dyn Model,
    data: &Dataset,
    theta0: &[f64],
    pretrain_steps: usize,
    count: usize,
    optimizer: &OptimizerConfig,
    batch: BatchConfig,
) -> Result<Vec<ParamVector>> {
    if count == 0 {
        return Err(Error::config("checkpoint count must be >= 1"));
    }
    let interval = pretrain_steps / count;
    if interval == 0 {
        return Err(Error::config(format!(
            "pretrain_steps ({pretrain_steps}) must be >= checkpoint count ({count})"
        )));
    }
    let gamma = QualityScores::uniform(data.len());
    let traj = optim::train(
        model,
        data,
        &gamma,
        theta0,
        interval * count,
        optimizer,
        batch,
        &CheckpointPolicy::in_memory(),
    )?;
    (1..=count).map(|m| traj.checkpoint(m * interval)).collect()
}
