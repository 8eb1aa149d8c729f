//! Training-step primitives (GD, Adam) and the trajectory-recording loop
//! shared by the solver and the oracle.

pub mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::CheckpointPolicy;
use checkpoint::CheckpointStore;

use crate::error::{Error, Result};
use crate::linalg::ParamVector;
use crate::model::{self, Dataset, Model};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps >= 0.0) {
            return Err(Error::config(format!("invalid Adam hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// Adam moments after `t` updates. `m` and `v` are the raw (not
/// bias-corrected) moving averages.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamVector,
    pub v: ParamVector,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: usize) -> Self {
        AdamState {
            m: ParamVector::zeros(params),
            v: ParamVector::zeros(params),
            t: 0,
        }
    }

    /// Bias-corrected second moment `v / (1 - beta2^t)`.
    pub fn v_hat(&self, beta2: f64) -> Vec<f64> {
        let c = 1.0 - beta2.powi(self.t as i32);
        self.v.iter().map(|v| v / c).collect()
    }

    pub fn m_hat(&self, beta1: f64) -> Vec<f64> {
        let c = 1.0 - beta1.powi(self.t as i32);
        self.m.iter().map(|m| m / c).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Gd { lr: f64 },
    Adam(AdamConfig),
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::Gd { lr } => *lr,
            OptimizerConfig::Adam(a) => a.lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            OptimizerConfig::Gd { lr } if !(*lr > 0.0) => Err(Error::config(format!("learning rate must be > 0, got {lr}"))),
            OptimizerConfig::Gd { .. } => Ok(()),
            OptimizerConfig::Adam(a) => a.validate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BatchConfig {
    Full,
    /// Sampling without replacement within each epoch; one seeded
    /// permutation per epoch.
    MiniBatch { size: usize, seed: u64 },
}

/// What a single step used, enough to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMeta {
    /// Instance positions in the batch; `None` for full batch.
    pub batch: Option<Vec<usize>>,
    /// Seed of the permutation the batch was cut from.
    pub seed: u64,
    pub epoch: usize,
}

impl StepMeta {
    fn full() -> Self {
        StepMeta {
            batch: None,
            seed: 0,
            epoch: 0,
        }
    }

    /// Loss weights applied at this step: `gamma` restricted to the batch and
    /// rescaled by `|D| / |batch|`.
    pub fn weights(&self, gamma: &[f64]) -> Vec<f64> {
        match &self.batch {
            None => gamma.to_vec(),
            Some(batch) => {
                let scale = gamma.len() as f64 / batch.len() as f64;
                let mut w = vec![0.0; gamma.len()];
                for &i in batch {
                    w[i] = gamma[i] * scale;
                }
                w
            }
        }
    }
}

/// Checkpoints `theta_0..theta_T` plus the per-step batch record. Adam runs
/// also keep the optimizer state after each step.
#[derive(Debug)]
pub struct Trajectory {
    store: CheckpointStore,
    steps: Vec<StepMeta>,
    adam_states: Vec<AdamState>,
}

impl Trajectory {
    /// Number of training steps `T`.
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn num_checkpoints(&self) -> usize {
        self.store.len()
    }

    pub fn checkpoint(&self, t: usize) -> Result<ParamVector> {
        self.store.get(t)
    }

    pub fn final_params(&self) -> Result<ParamVector> {
        self.store.get(self.store.len() - 1)
    }

    pub fn step_meta(&self, t: usize) -> &StepMeta {
        &self.steps[t]
    }

    pub fn steps(&self) -> &[StepMeta] {
        &self.steps
    }

    /// Adam state after step `t` (moments `m_{t+1}`, `v_{t+1}`).
    pub fn adam_state(&self, t: usize) -> Option<&AdamState> {
        self.adam_states.get(t)
    }

    pub fn is_spilled(&self) -> bool {
        self.store.is_spilled()
    }

    pub fn checkpoints(&self) -> Result<Vec<ParamVector>> {
        (0..self.store.len()).map(|t| self.store.get(t)).collect()
    }
}

/// Locates the first instance whose gradient is non-finite.
fn offending_instance(model: &dyn Model, data: &Dataset, weights: &[f64], theta: &[f64]) -> Option<usize> {
    data.iter().zip(weights).find_map(|(x, &w)| {
        if w == 0.0 {
            return None;
        }
        match model.grad(x, theta) {
            Ok(g) if g.is_finite() => None,
            _ => Some(x.id),
        }
    })
}

fn checked_grad(model: &dyn Model, data: &Dataset, weights: &[f64], theta: &[f64], step: usize) -> Result<ParamVector> {
    let g = model::weighted_grad(model, data, weights, theta)?;
    if !g.is_finite() {
        return Err(Error::NonFiniteGradient {
            step,
            instance: offending_instance(model, data, weights, theta),
        });
    }
    Ok(g)
}

fn gd_step_at(model: &dyn Model, data: &Dataset, weights: &[f64], theta: &[f64], lr: f64, step: usize) -> Result<ParamVector> {
    let g = checked_grad(model, data, weights, theta, step)?;
    Ok(theta.iter().zip(g.iter()).map(|(t, g)| t - lr * g).collect::<Vec<_>>().into())
}

/// `theta - lr * grad L(theta, weights)`.
pub fn gd_step(model: &dyn Model, data: &Dataset, weights: &[f64], theta: &[f64], lr: f64) -> Result<ParamVector> {
    if !(lr > 0.0) {
        return Err(Error::config(format!("learning rate must be > 0, got {lr}")));
    }
    gd_step_at(model, data, weights, theta, lr, 0)
}

fn adam_step_at(
    model: &dyn Model,
    data: &Dataset,
    weights: &[f64],
    theta: &[f64],
    state: &AdamState,
    cfg: &AdamConfig,
    step: usize,
) -> Result<(ParamVector, AdamState)> {
    let g = checked_grad(model, data, weights, theta, step)?;
    let t = state.t + 1;
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let n = theta.len();
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut next = Vec::with_capacity(n);
    for i in 0..n {
        let mi = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
        let vi = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = mi / c1;
        let v_hat = vi / c2;
        next.push(theta[i] - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps));
        m.push(mi);
        v.push(vi);
    }
    Ok((
        next.into(),
        AdamState {
            m: m.into(),
            v: v.into(),
            t,
        },
    ))
}

/// One bias-corrected Adam update.
pub fn adam_step(
    model: &dyn Model,
    data: &Dataset,
    weights: &[f64],
    theta: &[f64],
    state: &AdamState,
    cfg: &AdamConfig,
) -> Result<(ParamVector, AdamState)> {
    cfg.validate()?;
    linalg_len(state, theta.len())?;
    adam_step_at(model, data, weights, theta, state, cfg, state.t as usize)
}

fn linalg_len(state: &AdamState, n: usize) -> Result<()> {
    state.m.check_len(n, "adam first moment")?;
    state.v.check_len(n, "adam second moment")
}

fn derive_epoch_seed(seed: u64, epoch: usize) -> u64 {
    // splitmix64 finalizer over (seed, epoch)
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Batch schedule for `steps` steps over `n` instances.
pub fn batch_schedule(n: usize, steps: usize, batch: BatchConfig) -> Result<Vec<StepMeta>> {
    match batch {
        BatchConfig::Full => Ok(vec![StepMeta::full(); steps]),
        BatchConfig::MiniBatch { size, seed } => {
            if size == 0 {
                return Err(Error::config("batch size must be >= 1"));
            }
            let size = size.min(n);
            let mut out = Vec::with_capacity(steps);
            let mut epoch = 0;
            while out.len() < steps {
                let epoch_seed = derive_epoch_seed(seed, epoch);
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
                for chunk in perm.chunks(size) {
                    if out.len() == steps {
                        break;
                    }
                    out.push(StepMeta {
                        batch: Some(chunk.to_vec()),
                        seed: epoch_seed,
                        epoch,
                    });
                }
                epoch += 1;
            }
            Ok(out)
        }
    }
}

/// Trains `steps` updates from `theta0` with quality weights `gamma`, recording
/// every checkpoint and the batch used at each step.
pub fn train(
    model: &dyn Model,
    data: &Dataset,
    gamma: &[f64],
    theta0: &[f64],
    steps: usize,
    optimizer: &OptimizerConfig,
    batch: BatchConfig,
    policy: &CheckpointPolicy,
) -> Result<Trajectory> {
    optimizer.validate()?;
    crate::linalg::check_len(gamma.len(), data.len(), "quality scores")?;
    crate::linalg::check_len(theta0.len(), model.num_params(), "initial parameters")?;
    let schedule = batch_schedule(data.len(), steps, batch)?;
    let mut store = CheckpointStore::new(policy, steps + 1, theta0.len())?;
    let mut theta = ParamVector::new(theta0.to_vec());
    let mut adam = AdamState::new(theta0.len());
    let mut adam_states = Vec::new();
    for (t, meta) in schedule.iter().enumerate() {
        let w = meta.weights(gamma);
        let next = match optimizer {
            OptimizerConfig::Gd { lr } => gd_step_at(model, data, &w, &theta, *lr, t)?,
            OptimizerConfig::Adam(cfg) => {
                let (next, st) = adam_step_at(model, data, &w, &theta, &adam, cfg, t)?;
                adam = st;
                adam_states.push(adam.clone());
                next
            }
        };
        store.push(std::mem::replace(&mut theta, next))?;
    }
    store.push(theta)?;
    Ok(Trajectory {
        store,
        steps: schedule,
        adam_states,
    })
}
