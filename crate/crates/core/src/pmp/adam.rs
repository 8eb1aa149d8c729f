//! Solver variant for Adam inner loops.
//!
//! The state is `(theta, m, v)` with raw moments. Treating `v` as independent
//! of the gradient, with `c1 = 1 - beta1^{t+1}`, `c2 = 1 - beta2^{t+1}` and
//! `D_t = diag(1 / (sqrt(v_hat_{t+1}) + eps))`, the three co-state blocks obey
//!
//! ```text
//! L1_t = grad J(theta_t) + L1_{t+1} - H_t (lr (1-beta1)/c1 D_t L1_{t+1} - (1-beta1) L2_{t+1})
//! L2_t = beta1 L2_{t+1} - lr beta1/c1 D_t L1_{t+1}
//! L3_t = beta2 (K_t * L1_{t+1} + L3_{t+1})
//! ```
//!
//! with `K_t = lr m_{t+1} / (2 c1 c2 sqrt(v_hat) (sqrt(v_hat) + eps)^2)` and
//! boundary `[grad J(theta_T), 0, 0]`. The score direction is
//! `s_n = sum_t (lr (1-beta1)/c1) L1_{t+1}' D_t g_n - (1-beta1) L2_{t+1}' g_n`,
//! which is minus the gradient of the cumulative downstream loss under the
//! same approximation. `L3` never enters it.

use serde::{Deserialize, Serialize};

use super::{alignments, guard_costate, project_simplex, QualityScores, SolverConfig};
use crate::error::{Error, Result};
use crate::linalg::{self, ParamVector};
use crate::model::{self, Dataset, DownstreamLoss, HvpPath, Model};
use crate::optim::{self, AdamConfig, CheckpointPolicy, OptimizerConfig, Trajectory};

/// Co-state blocks for parameters, first and second moments. Index `t - 1`
/// holds the value at step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamCoStates {
    pub first: Vec<ParamVector>,
    pub second: Vec<ParamVector>,
    pub third: Vec<ParamVector>,
}

impl AdamCoStates {
    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }
}

struct StepCoeffs {
    c1: f64,
    c2: f64,
    /// Diagonal of `D_t`.
    d: Vec<f64>,
    v_hat: Vec<f64>,
}

fn step_coeffs<'a>(traj: &'a Trajectory, cfg: &AdamConfig, t: usize) -> Result<(StepCoeffs, &'a optim::AdamState)> {
    let state = traj
        .adam_state(t)
        .ok_or_else(|| Error::config("trajectory was not produced by the Adam optimizer"))?;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let v_hat = state.v_hat(cfg.beta2);
    let d = v_hat.iter().map(|v| 1.0 / (v.sqrt() + cfg.eps)).collect();
    Ok((StepCoeffs { c1, c2, d, v_hat }, state))
}

/// Reverse loop for Adam trajectories.
pub fn reverse_inner_adam(
    model: &dyn Model,
    data: &Dataset,
    gamma: &[f64],
    traj: &Trajectory,
    downstream: &DownstreamLoss,
    cfg: &AdamConfig,
    hvp: HvpPath,
) -> Result<AdamCoStates> {
    let steps = traj.num_steps();
    if steps == 0 {
        return Err(Error::config("reverse loop needs at least one training step"));
    }
    linalg::check_len(gamma.len(), data.len(), "quality scores")?;
    let n = model.num_params();
    let (b1, b2, lr) = (cfg.beta1, cfg.beta2, cfg.lr);
    let mut first = vec![ParamVector::zeros(0); steps];
    let mut second = vec![ParamVector::zeros(n); steps];
    let mut third = vec![ParamVector::zeros(n); steps];
    let boundary = downstream.grad(model, &traj.checkpoint(steps)?)?;
    guard_costate(&boundary, steps)?;
    first[steps - 1] = boundary;
    for t in (1..steps).rev() {
        let theta = traj.checkpoint(t)?;
        let (k, state) = step_coeffs(traj, cfg, t)?;
        let (l1, l2, l3) = (&first[t], &second[t], &third[t]);
        let a = lr * (1.0 - b1) / k.c1;
        let dir: Vec<f64> = (0..n).map(|i| a * k.d[i] * l1[i] - (1.0 - b1) * l2[i]).collect();
        let weights = traj.step_meta(t).weights(gamma);
        let hv = model::hvp(model, data, &weights, &theta, &dir, hvp)?;
        let mut new1 = downstream.grad(model, &theta)?;
        for i in 0..n {
            new1[i] += l1[i] - hv[i];
        }
        let new2: Vec<f64> = (0..n)
            .map(|i| b1 * l2[i] - lr * b1 / k.c1 * k.d[i] * l1[i])
            .collect();
        let new3: Vec<f64> = (0..n)
            .map(|i| {
                let s = k.v_hat[i].sqrt();
                let kk = if s > 0.0 {
                    lr * state.m[i] / (2.0 * k.c1 * k.c2 * s * (s + cfg.eps).powi(2))
                } else {
                    0.0
                };
                b2 * (kk * l1[i] + l3[i])
            })
            .collect();
        guard_costate(&new1, t)?;
        guard_costate(&new2, t)?;
        first[t - 1] = new1;
        second[t - 1] = new2.into();
        third[t - 1] = new3.into();
    }
    Ok(AdamCoStates { first, second, third })
}

/// Score direction from the first two co-state blocks; the third is unused.
pub fn adam_gamma_gradient(
    model: &dyn Model,
    data: &Dataset,
    traj: &Trajectory,
    costates: &AdamCoStates,
    cfg: &AdamConfig,
) -> Result<Vec<f64>> {
    let steps = traj.num_steps();
    linalg::check_len(costates.len(), steps, "co-state trajectory")?;
    let b1 = cfg.beta1;
    let mut s = vec![0.0; data.len()];
    for t in 0..steps {
        let theta = traj.checkpoint(t)?;
        let (k, _) = step_coeffs(traj, cfg, t)?;
        let a = cfg.lr * (1.0 - b1) / k.c1;
        let l1 = &costates.first[t];
        let l2 = &costates.second[t];
        let dir: Vec<f64> = (0..l1.len()).map(|i| a * k.d[i] * l1[i] - (1.0 - b1) * l2[i]).collect();
        for (si, ai) in s.iter_mut().zip(alignments(model, data, &theta, &dir)?) {
            *si += ai;
        }
    }
    if let Some(i) = s.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("score gradient non-finite at instance {i}")));
    }
    Ok(s)
}

/// Outer loop with Adam inner dynamics. The inner learning rate is `adam.lr`;
/// `config.lr` is not used.
pub fn pmp_solve_adam(
    model: &dyn Model,
    proxy: &Dataset,
    downstream: &DownstreamLoss,
    theta0: &[f64],
    config: &SolverConfig,
    adam: &AdamConfig,
) -> Result<QualityScores> {
    config.validate()?;
    adam.validate()?;
    let policy = CheckpointPolicy::in_memory();
    let mut gamma = QualityScores::uniform(proxy.len());
    for _ in 0..config.outer_epochs {
        let traj = optim::train(
            model,
            proxy,
            &gamma,
            theta0,
            config.steps,
            &OptimizerConfig::Adam(*adam),
            config.batch(),
            &policy,
        )?;
        let cs = reverse_inner_adam(model, proxy, &gamma, &traj, downstream, adam, config.hvp)?;
        let s = adam_gamma_gradient(model, proxy, &traj, &cs, adam)?;
        let moved: Vec<f64> = gamma.iter().zip(&s).map(|(g, s)| g + config.outer_lr * s).collect();
        gamma = project_simplex(&moved)?;
    }
    Ok(gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DatasetRole, QuadraticToy};
    use crate::optim::BatchConfig;

    fn setup() -> (QuadraticToy, Dataset, DownstreamLoss) {
        let rows = vec![vec![0.0, 1.0], vec![1.0, -1.0], vec![2.0, 0.5]];
        let data = Dataset::from_features(rows, DatasetRole::Proxy).unwrap();
        let j = DownstreamLoss::new(Dataset::from_features(vec![vec![1.5, 0.0]], DatasetRole::Downstream).unwrap()).unwrap();
        (QuadraticToy::new(2), data, j)
    }

    #[test]
    fn single_step_uses_boundary_only() {
        let (m, data, j) = setup();
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let gamma = QualityScores::uniform(3);
        let theta0 = [0.3, 0.2];
        let traj = optim::train(&m, &data, &gamma, &theta0, 1, &OptimizerConfig::Adam(cfg), BatchConfig::Full, &CheckpointPolicy::in_memory()).unwrap();
        let cs = reverse_inner_adam(&m, &data, &gamma, &traj, &j, &cfg, HvpPath::Exact).unwrap();
        let gj = j.grad(&m, &traj.checkpoint(1).unwrap()).unwrap();
        assert_eq!(cs.first[0], gj);
        assert!(cs.second[0].iter().all(|x| *x == 0.0));
        let s = adam_gamma_gradient(&m, &data, &traj, &cs, &cfg).unwrap();
        let st = traj.adam_state(0).unwrap();
        let v_hat = st.v_hat(cfg.beta2);
        let c1 = 1.0 - cfg.beta1;
        for (n, x) in data.iter().enumerate() {
            let g = m.grad(x, &theta0).unwrap();
            let expect: f64 = (0..2)
                .map(|i| cfg.lr * (1.0 - cfg.beta1) / c1 * gj[i] / (v_hat[i].sqrt() + cfg.eps) * g[i])
                .sum();
            assert!((s[n] - expect).abs() <= 1e-15 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn third_block_does_not_affect_scores() {
        let (m, data, j) = setup();
        let cfg = AdamConfig { lr: 0.05, beta1: 0.5, beta2: 0.5, eps: 1e-8 };
        let gamma = QualityScores::uniform(3);
        let traj = optim::train(&m, &data, &gamma, &[0.0, 0.0], 8, &OptimizerConfig::Adam(cfg), BatchConfig::Full, &CheckpointPolicy::in_memory()).unwrap();
        let mut cs = reverse_inner_adam(&m, &data, &gamma, &traj, &j, &cfg, HvpPath::Exact).unwrap();
        assert!(cs.third.iter().any(|l| l.iter().any(|x| *x != 0.0)));
        let s = adam_gamma_gradient(&m, &data, &traj, &cs, &cfg).unwrap();
        cs.third.iter_mut().for_each(|l| l.iter_mut().for_each(|x| *x = 0.0));
        assert_eq!(adam_gamma_gradient(&m, &data, &traj, &cs, &cfg).unwrap(), s);
    }

    #[test]
    fn rejects_gd_trajectory() {
        let (m, data, j) = setup();
        let gamma = QualityScores::uniform(3);
        let traj = optim::train(&m, &data, &gamma, &[0.0, 0.0], 3, &OptimizerConfig::Gd { lr: 0.1 }, BatchConfig::Full, &CheckpointPolicy::in_memory()).unwrap();
        let cfg = AdamConfig::default();
        assert!(reverse_inner_adam(&m, &data, &gamma, &traj, &j, &cfg, HvpPath::Exact).is_err());
    }

    #[test]
    fn solve_stays_on_simplex() {
        let (m, data, j) = setup();
        let cfg = SolverConfig {
            steps: 6,
            outer_epochs: 2,
            batch_size: None,
            ..Default::default()
        };
        let g = pmp_solve_adam(&m, &data, &j, &[0.0, 0.0], &cfg, &AdamConfig { lr: 0.05, ..Default::default() }).unwrap();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
