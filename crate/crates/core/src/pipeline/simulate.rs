//! Exact versus efficient solver on the planted fixture.
//!
//! The exact variant runs several full-batch outer epochs from a fresh
//! model. The efficient variant pre-trains with mini-batch SGD, harvests `M`
//! checkpoints and averages single-epoch mini-batch solves. Each resulting
//! score vector picks a subset, a fresh model is trained on it, and the
//! downstream loss curve is recorded next to a baseline trained on the whole
//! corpus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DatasetRole, DownstreamLoss, HvpPath, Model, SoftmaxBigram};
use crate::optim::{self, BatchConfig, CheckpointPolicy, OptimizerConfig};
use crate::pipeline::fixture::{planted_fixture, FixtureConfig, PlantedFixture};
use crate::pipeline::standardize;
use crate::pmp::{self, QualityScores, SolverConfig};
use crate::scaling::{self, FlopsConfig};
use crate::select::{self, SelectionConfig};

pub const MAX_FIXTURE_SIZE: usize = 256;
pub const MAX_SOLVER_STEPS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub fixture: FixtureConfig,
    /// Inner learning rate, shared by every training run.
    pub lr: f64,
    /// Inner steps of each solver pass.
    pub steps: usize,
    pub exact_epochs: usize,
    pub exact_outer_lr: f64,
    pub efficient_outer_lr: f64,
    pub checkpoints: usize,
    pub pretrain_steps: usize,
    pub batch_size: usize,
    /// Steps of the fresh run trained on each selection.
    pub eval_steps: usize,
    pub select: SelectionConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            fixture: FixtureConfig::default(),
            lr: 0.05,
            steps: 40,
            exact_epochs: 5,
            exact_outer_lr: 4e-8,
            efficient_outer_lr: 2e-7,
            checkpoints: 2,
            pretrain_steps: 40,
            batch_size: 16,
            eval_steps: 40,
            select: SelectionConfig {
                ratio: 0.5,
                tau: 0.0,
                seed: 0,
            },
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fixture.size > MAX_FIXTURE_SIZE || self.steps > MAX_SOLVER_STEPS {
            return Err(Error::config(format!(
                "simulation budget exceeded: fixture size {} (max {MAX_FIXTURE_SIZE}), steps {} (max {MAX_SOLVER_STEPS})",
                self.fixture.size, self.steps
            )));
        }
        if self.eval_steps == 0 || self.batch_size == 0 {
            return Err(Error::config("eval_steps and batch_size must be >= 1"));
        }
        self.exact_solver().validate()?;
        self.efficient_solver().validate()?;
        self.select.validate()
    }

    fn exact_solver(&self) -> SolverConfig {
        SolverConfig {
            lr: self.lr,
            outer_lr: self.exact_outer_lr,
            steps: self.steps,
            outer_epochs: self.exact_epochs,
            checkpoints: 1,
            batch_size: None,
            seed: self.fixture.seed,
            hvp: HvpPath::Exact,
            stride: 1,
            pretrain_steps: 0,
        }
    }

    fn efficient_solver(&self) -> SolverConfig {
        SolverConfig {
            lr: self.lr,
            outer_lr: self.efficient_outer_lr,
            steps: self.steps,
            outer_epochs: 1,
            checkpoints: self.checkpoints,
            batch_size: Some(self.batch_size),
            seed: self.fixture.seed,
            hvp: HvpPath::Exact,
            stride: 1,
            pretrain_steps: self.pretrain_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub gamma: Vec<f64>,
    pub selected: Vec<usize>,
    /// Fraction of the selection that is planted-clean.
    pub clean_fraction: f64,
    /// `J(theta_t)` for `t = 0..=eval_steps` of the fresh run.
    pub curve: Vec<f64>,
    pub auc: f64,
    pub solver_flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub curve: Vec<f64>,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub config: SimulationConfig,
    pub exact: VariantRecord,
    pub efficient: VariantRecord,
    pub baseline: BaselineRecord,
}

fn loss_curve(model: &dyn Model, fixture: &PlantedFixture, ids: &[usize], cfg: &SimulationConfig) -> Result<Vec<f64>> {
    let data = fixture.corpus.subset(ids, DatasetRole::Corpus)?;
    let downstream = DownstreamLoss::new(fixture.downstream.clone())?;
    let traj = optim::train(
        model,
        &data,
        QualityScores::uniform(data.len()).as_slice(),
        &vec![0.0; model.num_params()],
        cfg.eval_steps,
        &OptimizerConfig::Gd { lr: cfg.lr },
        BatchConfig::Full,
        &CheckpointPolicy::in_memory(),
    )?;
    (0..=traj.num_steps())
        .map(|t| downstream.loss(model, traj.checkpoint(t)?.as_slice()))
        .collect()
}

fn evaluate(
    model: &dyn Model,
    fixture: &PlantedFixture,
    gamma: QualityScores,
    cfg: &SimulationConfig,
    solver_flops: f64,
) -> Result<VariantRecord> {
    let sel = select::gumbel_topk(&standardize(gamma.as_slice()), &cfg.select)?;
    let clean = sel.selected.iter().filter(|&&i| fixture.clean[i]).count();
    let curve = loss_curve(model, fixture, &sel.selected, cfg)?;
    Ok(VariantRecord {
        auc: scaling::compute_auc(&curve)?,
        clean_fraction: clean as f64 / sel.k as f64,
        gamma: gamma.into_inner(),
        selected: sel.selected,
        curve,
        solver_flops,
    })
}

/// Runs both solver variants and the baseline on a freshly generated
/// fixture.
pub fn simulate_exact_vs_efficient(cfg: &SimulationConfig) -> Result<SimulationRecord> {
    cfg.validate()?;
    let fixture = planted_fixture(&cfg.fixture)?;
    let model = SoftmaxBigram::new(fixture.vocab);
    let downstream = DownstreamLoss::new(fixture.downstream.clone())?;
    let data = fixture.corpus.clone().with_role(DatasetRole::Proxy);
    let theta0 = vec![0.0; model.num_params()];
    let n_params = model.num_params() as f64;
    let tokens_per_instance =
        data.iter().map(|x| x.payload.len()).sum::<usize>() as f64 / data.len() as f64;

    let exact_cfg = cfg.exact_solver();
    let exact_gamma = pmp::pmp_solve(&model, &data, &downstream, &theta0, &exact_cfg)?;
    let exact_flops = scaling::estimate_flops(&FlopsConfig {
        n: 0.0,
        d: 0.0,
        n_prx: n_params,
        d_prx: (cfg.steps * data.len()) as f64 * tokens_per_instance,
        n_score: 0.0,
        m: cfg.exact_epochs as f64,
    })?
    .solver;

    let eff_cfg = cfg.efficient_solver();
    let ckpts = pmp::proxy_checkpoints(
        &model,
        &data,
        &theta0,
        eff_cfg.pretrain_steps,
        eff_cfg.checkpoints,
        &eff_cfg.optimizer(),
        eff_cfg.batch(),
    )?;
    let eff_gamma = pmp::multi_checkpoint_scores(&model, &data, &downstream, &ckpts, &eff_cfg)?;
    let batch = cfg.batch_size.min(data.len()) as f64;
    let interval = eff_cfg.pretrain_steps / eff_cfg.checkpoints;
    let eff_flops = scaling::estimate_flops(&FlopsConfig {
        n: 0.0,
        d: (interval * eff_cfg.checkpoints) as f64 * batch * tokens_per_instance,
        n_prx: n_params,
        d_prx: cfg.steps as f64 * batch * tokens_per_instance,
        n_score: 0.0,
        m: cfg.checkpoints as f64,
    })?
    .solver;

    let all: Vec<usize> = (0..data.len()).collect();
    let base_curve = loss_curve(&model, &fixture, &all, cfg)?;
    Ok(SimulationRecord {
        config: cfg.clone(),
        exact: evaluate(&model, &fixture, exact_gamma, cfg, exact_flops)?,
        efficient: evaluate(&model, &fixture, eff_gamma, cfg, eff_flops)?,
        baseline: BaselineRecord {
            auc: scaling::compute_auc(&base_curve)?,
            curve: base_curve,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_is_enforced() {
        let mut cfg = SimulationConfig::default();
        cfg.fixture.size = 300;
        assert!(matches!(simulate_exact_vs_efficient(&cfg), Err(Error::Config(_))));
        let cfg = SimulationConfig {
            steps: 201,
            ..SimulationConfig::default()
        };
        assert!(simulate_exact_vs_efficient(&cfg).is_err());
    }

    #[test]
    fn efficient_is_cheaper() {
        let r = simulate_exact_vs_efficient(&SimulationConfig::default()).unwrap();
        assert!(r.efficient.solver_flops < r.exact.solver_flops);
        assert_eq!(r.exact.curve.len(), r.config.eval_steps + 1);
        assert_eq!(r.exact.selected.len(), 32);
    }
}
