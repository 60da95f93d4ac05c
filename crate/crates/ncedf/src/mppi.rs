//! Sampling-based model-predictive path-integral controller.
//!
//! Each control step samples `n_rollouts` Gaussian perturbations of a
//! reference control sequence, propagates them through the arc-length
//! dynamics, scores them with a three-term cost (goal reaching, collision
//! via the learned distance field, actuation-limit violation), and blends
//! them by exponentially weighted averaging. Only the first control of the
//! blended sequence is executed; the rest seeds the next step.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kinematics::{
    end_effector, project_control, step_dynamics, ArcLengths, LinkGeometry, Pose, RobotConfig,
};
use crate::rng::stream;
use crate::{Error, Result};

/// Anything that can score a configuration against the current point-cloud
/// observation. Implemented by the learned field and by the baseline shape
/// representations.
pub trait DistanceModel: Sync {
    /// Minimum estimated distance between the robot body at `q` and the
    /// observed cloud.
    fn min_distance(&self, q: &RobotConfig, cloud: &[Vector3<f64>]) -> f64;

    /// `min(min_distance, cap)`. Implementations may use the cap to prune
    /// aggressively; the collision barrier is flat beyond it, so rollout
    /// scoring only needs distances below the cap exactly.
    fn min_distance_capped(&self, q: &RobotConfig, cloud: &[Vector3<f64>], cap: f64) -> f64 {
        self.min_distance(q, cloud).min(cap)
    }
}

/// Collision distances are saturated here (m). The inverse barrier is
/// essentially flat past this clearance (2.2 vs a near-contact scale of
/// 1000), and the saturation lets shape models skip whole clouds when the
/// robot is provably clear.
pub const COLLISION_SATURATION: f64 = 0.5;

impl DistanceModel for crate::cedf::RobotCedf {
    fn min_distance(&self, q: &RobotConfig, cloud: &[Vector3<f64>]) -> f64 {
        match self.cloud_min_distance(cloud, q) {
            Ok((d, _)) => d,
            Err(_) => f64::INFINITY,
        }
    }

    fn min_distance_capped(&self, q: &RobotConfig, cloud: &[Vector3<f64>], cap: f64) -> f64 {
        if cloud.is_empty() || q.n_links() != self.n_links() {
            return f64::INFINITY.min(cap);
        }
        let fk = crate::kinematics::forward_kinematics(q, &self.geometries());
        self.cloud_min_distance_capped_with_fk(cloud, q, &fk, cap)
    }
}

/// Controller parameters. Serialized with every run manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MppiConfig {
    pub n_rollouts: usize,
    pub horizon: usize,
    /// Per-channel control noise std dev before projection (m/s).
    pub sigma: f64,
    /// Softmax temperature on normalized costs.
    pub lambda: f64,
    /// Blend factor toward the weighted average, in (0,1).
    pub alpha_u: f64,
    pub w_goal: f64,
    pub w_coll: f64,
    pub w_state: f64,
    /// Safety margin subtracted from the learned distance (m).
    pub delta_s: f64,
    /// Clamp floor of the collision denominator.
    pub epsilon: f64,
    /// Control period (s).
    pub tau: f64,
    pub seed: u64,
}

impl Default for MppiConfig {
    fn default() -> Self {
        Self {
            n_rollouts: 800,
            horizon: 20,
            sigma: 0.05f64.sqrt(),
            lambda: 0.02,
            alpha_u: 0.9,
            w_goal: 12.0,
            w_coll: 1.1,
            w_state: 50.0,
            delta_s: 0.05,
            epsilon: 1e-3,
            tau: 0.05,
            seed: 0,
        }
    }
}

impl MppiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rollouts == 0 || self.horizon == 0 {
            return Err(Error::InvalidConfig("n_rollouts and horizon must be >= 1".into()));
        }
        if !(self.lambda > 0.0 && self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("lambda and epsilon must be positive".into()));
        }
        if !(self.alpha_u > 0.0 && self.alpha_u < 1.0) {
            return Err(Error::InvalidConfig("alpha_u must lie in (0,1)".into()));
        }
        if !(self.sigma >= 0.0 && self.tau > 0.0) {
            return Err(Error::InvalidConfig("sigma must be >= 0 and tau > 0".into()));
        }
        Ok(())
    }
}

/// A horizon of per-link zero-mean control vectors, dimension `3M` each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSequence {
    pub steps: Vec<Vec<f64>>,
}

impl ControlSequence {
    pub fn zeros(horizon: usize, dim: usize) -> Self {
        Self { steps: vec![vec![0.0; dim]; horizon] }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn dim(&self) -> usize {
        self.steps.first().map_or(0, Vec::len)
    }

    /// Warm start for the next step: drop the executed control, pad with a
    /// zero control at the tail.
    pub fn shifted(&self) -> Self {
        let mut steps: Vec<Vec<f64>> = self.steps.iter().skip(1).cloned().collect();
        steps.push(vec![0.0; self.dim()]);
        Self { steps }
    }
}

/// One propagated rollout and its cost breakdown.
#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub arcs: Vec<ArcLengths>,
    pub configs: Vec<RobotConfig>,
    pub cost_goal: f64,
    pub cost_coll: f64,
    pub cost_state: f64,
}

impl RolloutResult {
    pub fn total(&self) -> f64 {
        self.cost_goal + self.cost_coll + self.cost_state
    }
}

/// Gaussian perturbations of the reference, projected per link. Rollout
/// `j`, step `t` draws from the stream tagged `(iteration, j, t)`, so any
/// rollout is reproducible in isolation.
pub fn sample_rollouts(
    reference: &ControlSequence,
    cfg: &MppiConfig,
    iteration: u64,
) -> Vec<ControlSequence> {
    (0..cfg.n_rollouts as u64)
        .into_par_iter()
        .map(|j| sample_one_rollout(reference, cfg, iteration, j))
        .collect()
}

fn sample_one_rollout(
    reference: &ControlSequence,
    cfg: &MppiConfig,
    iteration: u64,
    j: u64,
) -> ControlSequence {
    let steps = reference
        .steps
        .iter()
        .enumerate()
        .map(|(t, r)| {
            let mut rng = stream(cfg.seed, &[0x4D50_5049, iteration, j, t as u64]);
            let raw: Vec<f64> = r
                .iter()
                .map(|&v| v + cfg.sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            project_control(&raw)
        })
        .collect();
    ControlSequence { steps }
}

/// Propagate a control sequence from `x0`, returning the `H+1` arc-length
/// states and their configurations.
pub fn rollout_states(
    x0: &ArcLengths,
    u: &ControlSequence,
    tau: f64,
    geoms: &[LinkGeometry],
) -> Result<(Vec<ArcLengths>, Vec<RobotConfig>)> {
    let mut arcs = Vec::with_capacity(u.horizon() + 1);
    arcs.push(x0.clone());
    for step in &u.steps {
        let next = step_dynamics(arcs.last().unwrap(), step, tau)?;
        arcs.push(next);
    }
    let configs = arcs.iter().map(|x| x.to_config(geoms)).collect();
    Ok((arcs, configs))
}

/// Goal-reaching cost: Frobenius distance between the end-effector pose
/// and the goal, summed over the first `H` states of the horizon.
pub fn cost_goal(configs: &[RobotConfig], geoms: &[LinkGeometry], goal: &Pose, w_goal: f64) -> f64 {
    configs[..configs.len() - 1]
        .iter()
        .map(|q| end_effector(q, geoms).frobenius_distance(goal))
        .sum::<f64>()
        * w_goal
}

/// Collision cost: reciprocal of the margin-adjusted minimum distance,
/// clamped at `1/epsilon`, summed over the first `H` states.
pub fn cost_collision(
    configs: &[RobotConfig],
    cloud: &[Vector3<f64>],
    model: &dyn DistanceModel,
    w_coll: f64,
    delta_s: f64,
    epsilon: f64,
) -> Result<f64> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("cost_collision needs a non-empty cloud"));
    }
    let sum: f64 = configs[..configs.len() - 1]
        .iter()
        .map(|q| {
            1.0 / (model.min_distance_capped(q, cloud, COLLISION_SATURATION) - delta_s)
                .max(epsilon)
        })
        .sum();
    Ok(w_coll * sum)
}

/// Actuation-limit cost: hinge penalties on chamber arc lengths outside
/// `[l_min, l_max]`, summed over the first `H` states.
pub fn cost_state(arcs: &[ArcLengths], geoms: &[LinkGeometry], w_state: f64) -> f64 {
    let sum: f64 = arcs[..arcs.len() - 1]
        .iter()
        .map(|x| {
            x.values
                .iter()
                .enumerate()
                .map(|(c, &l)| {
                    let g = &geoms[c / 3];
                    (g.l_min - l).max(0.0) + (l - g.l_max).max(0.0)
                })
                .sum::<f64>()
        })
        .sum();
    w_state * sum
}

/// Exponentially weighted blend of the rollouts around the reference.
///
/// Costs are min-max normalized (a degenerate spread maps every cost to
/// zero, i.e. uniform weights), weighted by `exp(-c/lambda)`, averaged in
/// canonical rollout order, blended with the reference by `alpha_u`, and
/// re-projected per link.
pub fn mppi_update(
    costs: &[f64],
    rollouts: &[ControlSequence],
    reference: &ControlSequence,
    lambda: f64,
    alpha_u: f64,
) -> ControlSequence {
    debug_assert_eq!(costs.len(), rollouts.len());
    debug_assert!(!costs.is_empty());
    let min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = costs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let spread = max - min;
    let weights: Vec<f64> = costs
        .iter()
        .map(|&c| {
            let normalized = if spread > 0.0 { (c - min) / spread } else { 0.0 };
            (-normalized / lambda).exp()
        })
        .collect();
    let total_weight: f64 = weights.iter().sum();

    let steps = reference
        .steps
        .iter()
        .enumerate()
        .map(|(t, r)| {
            let mut mean = vec![0.0; r.len()];
            for (w, rollout) in weights.iter().zip(rollouts) {
                for (m, &u) in mean.iter_mut().zip(&rollout.steps[t]) {
                    *m += w * u;
                }
            }
            let blended: Vec<f64> = r
                .iter()
                .zip(&mean)
                .map(|(&rv, &m)| (1.0 - alpha_u) * rv + alpha_u * m / total_weight)
                .collect();
            project_control(&blended)
        })
        .collect();
    ControlSequence { steps }
}

/// Non-wall-clock diagnostics of one controller step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// Learned min distance at the current configuration.
    pub min_cloud_distance: f64,
    pub best_cost: f64,
    pub mean_cost: f64,
    pub best_cost_goal: f64,
    pub best_cost_coll: f64,
    pub best_cost_state: f64,
}

#[derive(Debug, Clone)]
pub struct MppiStep {
    /// First control of the blended sequence; execute this.
    pub control: Vec<f64>,
    /// Shifted, zero-padded sequence for the next iteration.
    pub warm: ControlSequence,
    pub diagnostics: StepDiagnostics,
    /// Wall-clock solve time. Never part of deterministic outputs.
    pub solve_ms: f64,
}

/// One full receding-horizon step: sample, propagate, score, blend.
pub fn mppi_step(
    x: &ArcLengths,
    cloud: &[Vector3<f64>],
    goal: &Pose,
    model: &dyn DistanceModel,
    geoms: &[LinkGeometry],
    cfg: &MppiConfig,
    warm: &ControlSequence,
    iteration: u64,
) -> Result<MppiStep> {
    let start = std::time::Instant::now();
    cfg.validate()?;
    if warm.horizon() != cfg.horizon || warm.dim() != 3 * geoms.len() {
        return Err(Error::DimensionMismatch {
            expected: cfg.horizon * 3 * geoms.len(),
            got: warm.horizon() * warm.dim(),
        });
    }
    let rollouts = sample_rollouts(warm, cfg, iteration);
    let results: Vec<RolloutResult> = rollouts
        .par_iter()
        .map(|u| {
            let (arcs, configs) = rollout_states(x, u, cfg.tau, geoms)?;
            let goal_c = cost_goal(&configs, geoms, goal, cfg.w_goal);
            let coll_c =
                cost_collision(&configs, cloud, model, cfg.w_coll, cfg.delta_s, cfg.epsilon)?;
            let state_c = cost_state(&arcs, geoms, cfg.w_state);
            Ok(RolloutResult { arcs, configs, cost_goal: goal_c, cost_coll: coll_c, cost_state: state_c })
        })
        .collect::<Result<_>>()?;

    let costs: Vec<f64> = results.iter().map(RolloutResult::total).collect();
    let updated = mppi_update(&costs, &rollouts, warm, cfg.lambda, cfg.alpha_u);

    let best = costs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).expect("costs are finite"))
        .map(|(i, _)| i)
        .unwrap();
    let diagnostics = StepDiagnostics {
        min_cloud_distance: model.min_distance(&x.to_config(geoms), cloud),
        best_cost: costs[best],
        mean_cost: costs.iter().sum::<f64>() / costs.len() as f64,
        best_cost_goal: results[best].cost_goal,
        best_cost_coll: results[best].cost_coll,
        best_cost_state: results[best].cost_state,
    };
    Ok(MppiStep {
        control: updated.steps[0].clone(),
        warm: updated.shifted(),
        diagnostics,
        solve_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
