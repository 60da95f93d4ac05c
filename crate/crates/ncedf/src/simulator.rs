//! Dynamic-sphere environments, observation synthesis, ground-truth
//! clearance, episode execution, and benchmark aggregation.
//!
//! The planner only ever sees point clouds sampled from obstacle surfaces;
//! the analytic clearance oracle is used purely for outcome classification
//! and logging.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::UnitSphere;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cedf::RobotCedf;
use crate::kinematics::{
    backbone_point, end_effector, forward_kinematics, step_dynamics, surface_points, Aabb,
    ArcLengths, LinkGeometry, Pose, RobotConfig,
};
use crate::mppi::{mppi_step, ControlSequence, DistanceModel, MppiConfig};
use crate::rng::stream;
use crate::{Error, Result};

/// Episode ends successfully when the end-effector pose is within this
/// Frobenius distance of the goal.
pub const SUCCESS_FROBENIUS: f64 = 0.3;
/// Backbone samples per link for the ground-truth clearance oracle.
pub const GT_BACKBONE_SAMPLES: usize = 200;
/// Sphere-baseline inflation factor on the link radius.
pub const SPHERE_INFLATION: f64 = 1.2;
/// Spheres per link in the sphere baseline.
pub const SPHERES_PER_LINK: usize = 5;
/// Maximum per-link bending angle of sampled goal configurations (rad).
pub const GOAL_MAX_THETA: f64 = 0.7;
/// Cap on free-space reachability probes per goal resolution; past it the
/// next geometrically valid candidate is accepted unprobed.
pub const MAX_GOAL_PROBES: usize = 64;

/// Distance model for the goal reachability probe: free space everywhere.
/// The saturated constant makes the collision term identical across
/// rollouts, so it cancels under cost normalization.
struct FreeSpaceModel;

impl DistanceModel for FreeSpaceModel {
    fn min_distance(&self, _: &RobotConfig, _: &[Vector3<f64>]) -> f64 {
        crate::mppi::COLLISION_SATURATION
    }
}

const TAG_GOAL: u64 = 0x474F_414C;
const TAG_ENV: u64 = 0x0045_4E56;
const TAG_CLOUD: u64 = 0x434C_4F55;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SphereObstacle {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub velocity: Vector3<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Environment {
    pub obstacles: Vec<SphereObstacle>,
    pub bounds: Aabb,
    pub time: f64,
}

impl Environment {
    /// Order-sensitive hash of the obstacle state, used to assert that
    /// paired benchmark modes saw identical environments.
    pub fn state_hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV-1a
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        for o in &self.obstacles {
            for a in 0..3 {
                eat(o.center[a]);
                eat(o.velocity[a]);
            }
            eat(o.radius);
        }
        h
    }
}

/// How to generate a random environment for a given seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvironmentSpec {
    pub n_obstacles: usize,
    pub radius_range: [f64; 2],
    /// Obstacle speed drawn uniformly from this range (m/s); the upper end
    /// must respect the sqrt(3) bound.
    pub speed_range: [f64; 2],
    pub bounds: Aabb,
    /// Minimum initial clearance between any obstacle and the robot body.
    pub robot_clearance: f64,
    /// Minimum initial clearance between any obstacle surface and the goal
    /// end-effector position.
    pub goal_clearance: f64,
}

impl Default for EnvironmentSpec {
    fn default() -> Self {
        Self {
            n_obstacles: 8,
            radius_range: [0.3, 0.6],
            speed_range: [0.1, 1.0],
            bounds: Aabb { min: [-5.0, -5.0, 0.0], max: [5.0, 5.0, 6.0] },
            robot_clearance: 1.0,
            goal_clearance: 0.8,
        }
    }
}

impl EnvironmentSpec {
    pub fn validate(&self) -> Result<()> {
        let speed_ok = 0.0 <= self.speed_range[0]
            && self.speed_range[0] <= self.speed_range[1]
            && self.speed_range[1] <= 3.0f64.sqrt();
        if !speed_ok {
            return Err(Error::InvalidConfig("obstacle speeds must lie in [0, sqrt(3)]".into()));
        }
        if !(0.0 < self.radius_range[0] && self.radius_range[0] <= self.radius_range[1]) {
            return Err(Error::InvalidConfig("radius range must be positive and ordered".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobotSpec {
    pub links: Vec<LinkGeometry>,
    pub initial_arc_lengths: Vec<f64>,
}

impl RobotSpec {
    pub fn validate(&self) -> Result<()> {
        if self.links.is_empty() {
            return Err(Error::EmptyInput("robot needs at least one link"));
        }
        if self.initial_arc_lengths.len() != 3 * self.links.len() {
            return Err(Error::DimensionMismatch {
                expected: 3 * self.links.len(),
                got: self.initial_arc_lengths.len(),
            });
        }
        for g in &self.links {
            g.validate()?;
        }
        Ok(())
    }

    pub fn initial_state(&self) -> ArcLengths {
        ArcLengths::new(self.initial_arc_lengths.clone())
    }
}

/// Goal pose, either given explicitly or sampled per scenario seed as the
/// end-effector pose of a random reachable configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoalSpec {
    pub pose: [f64; 16],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub robot: RobotSpec,
    #[serde(default)]
    pub environment: EnvironmentSpec,
    #[serde(default)]
    pub goal: Option<GoalSpec>,
    #[serde(default)]
    pub mppi: MppiConfig,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    #[serde(default = "default_cloud_points")]
    pub cloud_points: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_t_max() -> usize {
    300
}

fn default_cloud_points() -> usize {
    500
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.robot.validate()?;
        self.environment.validate()?;
        self.mppi.validate()?;
        if self.t_max == 0 || self.cloud_points == 0 {
            return Err(Error::InvalidConfig("t_max and cloud_points must be >= 1".into()));
        }
        Ok(())
    }

    /// Copy of the scenario with a different seed, for paired benchmarks.
    pub fn with_seed(&self, seed: u64) -> Scenario {
        Scenario { seed, ..self.clone() }
    }

    /// Explicit goal, or a reachable end-effector pose sampled from the
    /// scenario seed well separated from the start pose (1 m, reduced for
    /// short robots) and verified reachable by the scenario's own
    /// controller in free space.
    pub fn resolve_goal(&self) -> Pose {
        self.resolve_goal_state().0
    }

    /// Like [`resolve_goal`](Self::resolve_goal), but also returns the
    /// sampled goal configuration when the goal was not given explicitly.
    /// Environment generation uses it to keep the goal *body* clear.
    pub fn resolve_goal_state(&self) -> (Pose, Option<RobotConfig>) {
        if let Some(g) = &self.goal {
            return (Pose::from_row_major(&g.pose), None);
        }
        let geoms = &self.robot.links;
        let start = end_effector(&self.robot.initial_state().to_config(geoms), geoms);
        let mut rng = stream(self.seed, &[TAG_GOAL]);
        let mut probes = 0;
        // short robots under the bend cap cannot displace the end-effector
        // a full metre; scale the separation requirement with reach
        let total_len: f64 = geoms.iter().map(|g| g.length).sum();
        let min_sep = (0.25 * total_len).min(1.0);
        loop {
            let links: Vec<_> = geoms
                .iter()
                .map(|g| crate::datagen::sample_configurations(g, 1, &mut rng)[0])
                .collect();
            // deeply bent goal poses are rarely trackable; reject them up
            // front so the reachability probe below mostly succeeds
            if links.iter().any(|l| l.theta > GOAL_MAX_THETA) {
                continue;
            }
            let q = RobotConfig { links };
            let ee = end_effector(&q, geoms);
            if (ee.translation() - start.translation()).norm() < min_sep {
                continue;
            }
            // the pose-tracking cost has local minima the receding-horizon
            // controller cannot cross even with no obstacles present; only
            // hand out goals it can demonstrably reach in free space
            probes += 1;
            if probes > MAX_GOAL_PROBES || self.goal_reachable_in_free_space(&ee) {
                return (ee, Some(q));
            }
        }
    }

    /// Deterministic obstacle-free rollout of the scenario's controller from
    /// the initial state toward `goal`. With an empty cloud the collision
    /// term is a constant, so the probe needs no distance model and runs at
    /// a small fraction of a real planning step.
    fn goal_reachable_in_free_space(&self, goal: &Pose) -> bool {
        let geoms = &self.robot.links;
        let mut cfg = self.mppi.clone();
        cfg.seed = self.seed;
        let mut x = self.robot.initial_state();
        let mut warm = ControlSequence::zeros(cfg.horizon, 3 * geoms.len());
        // the cloud must be non-empty; FreeSpaceModel never looks at it
        let cloud = [Vector3::new(0.0, 0.0, -1.0e6)];
        for step in 0..self.t_max {
            let ee = end_effector(&x.to_config(geoms), geoms);
            if ee.frobenius_distance(goal) <= SUCCESS_FROBENIUS {
                return true;
            }
            let Ok(result) =
                mppi_step(&x, &cloud, goal, &FreeSpaceModel, geoms, &cfg, &warm, step as u64)
            else {
                return false;
            };
            let Ok(next) = step_dynamics(&x, &result.control, cfg.tau) else {
                return false;
            };
            x = next;
            warm = result.warm;
        }
        false
    }

    /// Random environment honoring the clearance constraints around the
    /// initial robot body and the goal position.
    pub fn generate_environment(
        &self,
        goal: &Pose,
        goal_config: Option<&RobotConfig>,
    ) -> Result<Environment> {
        let spec = &self.environment;
        let geoms = &self.robot.links;
        let q0 = self.robot.initial_state().to_config(geoms);
        let goal_pos = goal.translation();
        // clearance of one obstacle from the goal: to the whole robot body
        // at the goal configuration when known, else to the goal position
        let goal_clear = |env: &Environment| -> f64 {
            match goal_config {
                Some(q) => ground_truth_robot_distance(q, geoms, env),
                None => (env.obstacles[0].center - goal_pos).norm() - env.obstacles[0].radius,
            }
        };
        let mut rng = stream(self.seed, &[TAG_ENV]);
        let mut obstacles = Vec::with_capacity(spec.n_obstacles);
        for _ in 0..spec.n_obstacles {
            let mut attempts = 0;
            loop {
                attempts += 1;
                if attempts > 10_000 {
                    return Err(Error::InvalidConfig(
                        "could not place obstacles with the requested clearances".into(),
                    ));
                }
                let radius = rng.gen_range(spec.radius_range[0]..=spec.radius_range[1]);
                let center = Vector3::new(
                    rng.gen_range(spec.bounds.min[0]..=spec.bounds.max[0]),
                    rng.gen_range(spec.bounds.min[1]..=spec.bounds.max[1]),
                    rng.gen_range(spec.bounds.min[2]..=spec.bounds.max[2]),
                );
                let speed = rng.gen_range(spec.speed_range[0]..=spec.speed_range[1]);
                let dir: [f64; 3] = rng.sample(UnitSphere);
                let candidate = SphereObstacle {
                    center,
                    radius,
                    velocity: speed * Vector3::new(dir[0], dir[1], dir[2]),
                };
                let probe = Environment {
                    obstacles: vec![candidate.clone()],
                    bounds: spec.bounds,
                    time: 0.0,
                };
                let robot_ok =
                    ground_truth_robot_distance(&q0, geoms, &probe) >= spec.robot_clearance;
                // obstacle motion is autonomous, so the goal-clearance
                // constraint can be enforced over the obstacle's entire
                // deterministic trajectory: an obstacle loitering at (or
                // sweeping through) the goal pose would otherwise block the
                // episode outright
                let goal_ok = robot_ok && {
                    let mut sim = probe;
                    let mut clear = goal_clear(&sim) >= spec.goal_clearance;
                    for _ in 0..self.t_max {
                        if !clear {
                            break;
                        }
                        advance_obstacles(&mut sim, self.mppi.tau);
                        clear = goal_clear(&sim) >= spec.goal_clearance;
                    }
                    clear
                };
                if robot_ok && goal_ok {
                    obstacles.push(candidate);
                    break;
                }
            }
        }
        Ok(Environment { obstacles, bounds: spec.bounds, time: 0.0 })
    }
}

/// Move obstacles one time step, reflecting velocity components off the
/// workspace bounds (elastic bounce, speed-preserving).
pub fn advance_obstacles(env: &mut Environment, dt: f64) {
    for o in &mut env.obstacles {
        for a in 0..3 {
            o.center[a] += o.velocity[a] * dt;
            if o.center[a] < env.bounds.min[a] {
                o.center[a] = 2.0 * env.bounds.min[a] - o.center[a];
                o.velocity[a] = -o.velocity[a];
            } else if o.center[a] > env.bounds.max[a] {
                o.center[a] = 2.0 * env.bounds.max[a] - o.center[a];
                o.velocity[a] = -o.velocity[a];
            }
        }
    }
    env.time += dt;
}

/// `n_points` uniform samples on the obstacle surfaces, allocated
/// proportionally to surface area with round-robin remainders.
pub fn sample_point_cloud<R: Rng>(
    env: &Environment,
    n_points: usize,
    rng: &mut R,
) -> Result<Vec<Vector3<f64>>> {
    if env.obstacles.is_empty() {
        return Err(Error::EmptyInput("sample_point_cloud needs obstacles"));
    }
    let areas: Vec<f64> = env.obstacles.iter().map(|o| o.radius * o.radius).collect();
    let total: f64 = areas.iter().sum();
    let mut counts: Vec<usize> =
        areas.iter().map(|a| (n_points as f64 * a / total).floor() as usize).collect();
    let mut assigned: usize = counts.iter().sum();
    let n_obs = counts.len();
    let mut i = 0;
    while assigned < n_points {
        counts[i % n_obs] += 1;
        assigned += 1;
        i += 1;
    }
    let mut cloud = Vec::with_capacity(n_points);
    for (o, &k) in env.obstacles.iter().zip(&counts) {
        for _ in 0..k {
            let dir: [f64; 3] = rng.sample(UnitSphere);
            cloud.push(o.center + o.radius * Vector3::new(dir[0], dir[1], dir[2]));
        }
    }
    Ok(cloud)
}

/// Signed clearance between the robot body and the closest obstacle,
/// computed from densely sampled backbones. Negative means collision.
pub fn ground_truth_robot_distance(
    q: &RobotConfig,
    geoms: &[LinkGeometry],
    env: &Environment,
) -> f64 {
    let fk = forward_kinematics(q, geoms);
    let mut best = f64::INFINITY;
    for (i, (cfg, geom)) in q.links.iter().zip(geoms).enumerate() {
        for s_idx in 0..GT_BACKBONE_SAMPLES {
            let s = geom.length * s_idx as f64 / (GT_BACKBONE_SAMPLES - 1) as f64;
            let b = fk[i].transform_point(&backbone_point(cfg, geom.length, s));
            for o in &env.obstacles {
                let d = (o.center - b).norm() - geom.radius - o.radius;
                best = best.min(d);
            }
        }
    }
    best
}

/// Sphere abstraction of the robot: `k` inflated spheres per link centered
/// at equally spaced backbone points.
pub fn robot_shape_spheres(
    q: &RobotConfig,
    geoms: &[LinkGeometry],
    k_per_link: usize,
) -> Vec<SphereObstacle> {
    debug_assert!(k_per_link >= 1);
    let fk = forward_kinematics(q, geoms);
    let mut spheres = Vec::with_capacity(k_per_link * geoms.len());
    for (i, (cfg, geom)) in q.links.iter().zip(geoms).enumerate() {
        for j in 0..k_per_link {
            let s = if k_per_link == 1 {
                geom.length / 2.0
            } else {
                geom.length * j as f64 / (k_per_link - 1) as f64
            };
            spheres.push(SphereObstacle {
                center: fk[i].transform_point(&backbone_point(cfg, geom.length, s)),
                radius: SPHERE_INFLATION * geom.radius,
                velocity: Vector3::zeros(),
            });
        }
    }
    spheres
}

/// Exactly `P` world-frame surface points, stratified deterministically
/// from the canonical per-link surface sampling.
pub fn robot_surface_cloud(
    q: &RobotConfig,
    geoms: &[LinkGeometry],
    p: usize,
) -> Result<Vec<Vector3<f64>>> {
    if p < geoms.len() {
        return Err(Error::InvalidConfig(format!(
            "need at least one point per link ({} links, P={p})",
            geoms.len()
        )));
    }
    let fk = forward_kinematics(q, geoms);
    let mut all = Vec::new();
    for (i, (cfg, geom)) in q.links.iter().zip(geoms).enumerate() {
        for pt in surface_points(cfg, geom, 20, 12).points {
            all.push(fk[i].transform_point(&pt));
        }
    }
    let n = all.len();
    let out = if n == p {
        all
    } else if n > p {
        // stride decimation: index floor(i*n/p) is strictly increasing
        (0..p).map(|i| all[i * n / p]).collect()
    } else {
        (0..p).map(|i| all[i % n]).collect()
    };
    Ok(out)
}

/// Bounding ball per link covering all of its surface points; shared by
/// the baselines' pruned minimum searches.
fn link_balls(q: &RobotConfig, geoms: &[LinkGeometry]) -> Vec<(Vector3<f64>, f64)> {
    let fk = forward_kinematics(q, geoms);
    q.links
        .iter()
        .zip(geoms)
        .enumerate()
        .map(|(i, (cfg, geom))| {
            let tip = crate::kinematics::link_transform(cfg, geom.length).translation();
            let arc_radius = if cfg.theta < crate::kinematics::THETA_EPS {
                geom.length / 2.0
            } else {
                geom.length / cfg.theta * (cfg.theta / 2.0).sin()
            };
            (fk[i].transform_point(&(tip / 2.0)), arc_radius + SPHERE_INFLATION * geom.radius)
        })
        .collect()
}

/// Baseline: robot abstracted as inflated spheres; distance to the cloud
/// is the min point-to-sphere-surface distance.
pub struct SpheresModel {
    pub geoms: Vec<LinkGeometry>,
    pub k_per_link: usize,
}

impl DistanceModel for SpheresModel {
    fn min_distance(&self, q: &RobotConfig, cloud: &[Vector3<f64>]) -> f64 {
        let spheres = robot_shape_spheres(q, &self.geoms, self.k_per_link);
        let mut best = f64::INFINITY;
        for p in cloud {
            for s in &spheres {
                best = best.min((p - s.center).norm() - s.radius);
            }
        }
        best
    }
}

/// Baseline: robot represented as a `P`-point surface cloud; distance is
/// the min pairwise Euclidean distance to the obstacle cloud. The pruned
/// search below returns exactly the naive double-loop minimum.
pub struct PcloudModel {
    pub geoms: Vec<LinkGeometry>,
    pub n_points: usize,
}

impl PcloudModel {
    fn min_distance_impl(&self, q: &RobotConfig, cloud: &[Vector3<f64>], cap: f64) -> f64 {
        let robot = match robot_surface_cloud(q, &self.geoms, self.n_points) {
            Ok(r) => r,
            Err(_) => return f64::INFINITY.min(cap),
        };
        let balls = link_balls(q, &self.geoms);
        // visit obstacle points in order of a sound lower bound and stop
        // once the bound can no longer improve on the best exact distance
        let mut order: Vec<(f64, u32)> = cloud
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let lb = balls
                    .iter()
                    .map(|(c, r)| (p - c).norm() - r)
                    .fold(f64::INFINITY, f64::min);
                (lb < cap).then_some((lb, i as u32))
            })
            .collect();
        order.sort_unstable_by(|a, b| a.partial_cmp(b).expect("bounds are finite"));
        let mut best = cap;
        for &(lb, idx) in &order {
            if lb >= best {
                break;
            }
            let p = &cloud[idx as usize];
            for r in &robot {
                best = best.min((p - r).norm());
            }
        }
        best
    }
}

impl DistanceModel for PcloudModel {
    fn min_distance(&self, q: &RobotConfig, cloud: &[Vector3<f64>]) -> f64 {
        self.min_distance_impl(q, cloud, f64::INFINITY)
    }

    fn min_distance_capped(&self, q: &RobotConfig, cloud: &[Vector3<f64>], cap: f64) -> f64 {
        self.min_distance_impl(q, cloud, cap)
    }
}

/// Which robot-shape representation drives the collision cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeMode {
    Ncedf,
    Spheres,
    Pcloud(usize),
}

impl std::str::FromStr for ShapeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ncedf" => Ok(ShapeMode::Ncedf),
            "spheres" => Ok(ShapeMode::Spheres),
            _ => {
                if let Some(p) = s.strip_prefix("pcloud:") {
                    let n: usize = p
                        .parse()
                        .map_err(|_| Error::InvalidConfig(format!("bad pcloud size in {s:?}")))?;
                    Ok(ShapeMode::Pcloud(n))
                } else {
                    Err(Error::InvalidConfig(format!(
                        "unknown shape mode {s:?} (expected ncedf, spheres, or pcloud:P)"
                    )))
                }
            }
        }
    }
}

impl std::fmt::Display for ShapeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ShapeMode::Ncedf => write!(f, "ncedf"),
            ShapeMode::Spheres => write!(f, "spheres"),
            ShapeMode::Pcloud(p) => write!(f, "pcloud:{p}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Collision,
    Stuck,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Outcome::Success => write!(f, "success"),
            Outcome::Collision => write!(f, "collision"),
            Outcome::Stuck => write!(f, "stuck"),
        }
    }
}

/// Everything logged per control step except wall-clock timing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub x: Vec<f64>,
    pub q: Vec<f64>,
    pub ee_pose: [f64; 16],
    pub min_cedf: f64,
    pub gt_clearance: f64,
    pub cost_goal: f64,
    pub cost_coll: f64,
    pub cost_state: f64,
    pub ee_goal_dist: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub outcome: Outcome,
    pub steps: usize,
    pub records: Vec<StepRecord>,
    pub env_hash: u64,
    /// Wall-clock per-step solve times; excluded from deterministic logs.
    pub solve_ms: Vec<f64>,
}

fn shape_model<'a>(
    mode: ShapeMode,
    cedf: &'a RobotCedf,
    geoms: &[LinkGeometry],
) -> Result<Box<dyn DistanceModel + 'a>> {
    match mode {
        ShapeMode::Ncedf => {
            cedf.check_geometry(geoms)?;
            Ok(Box::new(NcedfRef(cedf)))
        }
        ShapeMode::Spheres => Ok(Box::new(SpheresModel {
            geoms: geoms.to_vec(),
            k_per_link: SPHERES_PER_LINK,
        })),
        ShapeMode::Pcloud(p) => Ok(Box::new(PcloudModel { geoms: geoms.to_vec(), n_points: p })),
    }
}

struct NcedfRef<'a>(&'a RobotCedf);

impl DistanceModel for NcedfRef<'_> {
    fn min_distance(&self, q: &RobotConfig, cloud: &[Vector3<f64>]) -> f64 {
        self.0.min_distance(q, cloud)
    }

    fn min_distance_capped(&self, q: &RobotConfig, cloud: &[Vector3<f64>], cap: f64) -> f64 {
        self.0.min_distance_capped(q, cloud, cap)
    }
}

/// Run one closed-loop episode: observe, plan, execute, advance.
///
/// Classification is first-trigger-wins per step: collision (ground-truth
/// clearance < 0), then success (end-effector within `SUCCESS_FROBENIUS`
/// of the goal), then stuck when the step budget runs out.
pub fn run_episode(scenario: &Scenario, cedf: &RobotCedf, mode: ShapeMode) -> Result<EpisodeResult> {
    scenario.validate()?;
    let geoms = &scenario.robot.links;
    let model = shape_model(mode, cedf, geoms)?;
    let (goal, goal_config) = scenario.resolve_goal_state();
    let mut env = scenario.generate_environment(&goal, goal_config.as_ref())?;
    let env_hash = env.state_hash();

    let mut mppi_cfg = scenario.mppi.clone();
    mppi_cfg.seed = scenario.seed;
    let mut x = scenario.robot.initial_state();
    let mut warm = ControlSequence::zeros(mppi_cfg.horizon, 3 * geoms.len());
    let mut records = Vec::new();
    let mut solve_ms = Vec::new();

    let mut outcome = Outcome::Stuck;
    let mut steps = scenario.t_max;
    for step in 0..scenario.t_max {
        let q = x.to_config(geoms);
        let ee = end_effector(&q, geoms);
        let gt = ground_truth_robot_distance(&q, geoms, &env);
        let ee_goal = ee.frobenius_distance(&goal);

        let mut rng = stream(scenario.seed, &[TAG_CLOUD, step as u64]);
        let cloud = sample_point_cloud(&env, scenario.cloud_points, &mut rng)?;
        let result =
            mppi_step(&x, &cloud, &goal, model.as_ref(), geoms, &mppi_cfg, &warm, step as u64)?;

        records.push(StepRecord {
            step,
            x: x.values.clone(),
            q: q.links.iter().flat_map(|l| [l.theta, l.phi]).collect(),
            ee_pose: ee.to_row_major(),
            min_cedf: result.diagnostics.min_cloud_distance,
            gt_clearance: gt,
            cost_goal: result.diagnostics.best_cost_goal,
            cost_coll: result.diagnostics.best_cost_coll,
            cost_state: result.diagnostics.best_cost_state,
            ee_goal_dist: ee_goal,
        });
        solve_ms.push(result.solve_ms);

        if gt < 0.0 {
            outcome = Outcome::Collision;
            steps = step;
            break;
        }
        if ee_goal <= SUCCESS_FROBENIUS {
            outcome = Outcome::Success;
            steps = step;
            break;
        }

        x = step_dynamics(&x, &result.control, mppi_cfg.tau)?;
        warm = result.warm;
        advance_obstacles(&mut env, mppi_cfg.tau);
    }

    Ok(EpisodeResult { outcome, steps, records, env_hash, solve_ms })
}

/// Aggregate row of the benchmark table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: String,
    pub success: f64,
    pub collision: f64,
    pub stuck: f64,
    pub mppi_ms_mean: f64,
    pub mppi_ms_sd: f64,
}

/// Run `n_envs` seeded episodes per shape mode on identical environments
/// and aggregate outcome rates and solve-time statistics.
pub fn run_benchmark(
    template: &Scenario,
    n_envs: usize,
    base_seed: u64,
    modes: &[ShapeMode],
    cedf: &RobotCedf,
) -> Result<Vec<BenchRow>> {
    if n_envs == 0 {
        return Err(Error::EmptyInput("run_benchmark needs n_envs >= 1"));
    }
    let mut rows = Vec::with_capacity(modes.len());
    let mut hashes: Option<Vec<u64>> = None;
    for &mode in modes {
        let episodes: Vec<EpisodeResult> = (0..n_envs as u64)
            .into_par_iter()
            .map(|i| run_episode(&template.with_seed(base_seed + i), cedf, mode))
            .collect::<Result<_>>()?;
        let mode_hashes: Vec<u64> = episodes.iter().map(|e| e.env_hash).collect();
        match &hashes {
            None => hashes = Some(mode_hashes),
            Some(h) => {
                if *h != mode_hashes {
                    return Err(Error::GeometryMismatch(
                        "paired benchmark saw different environments across modes".into(),
                    ));
                }
            }
        }
        let count = |o: Outcome| {
            episodes.iter().filter(|e| e.outcome == o).count() as f64 / n_envs as f64
        };
        let times: Vec<f64> = episodes.iter().flat_map(|e| e.solve_ms.iter().copied()).collect();
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / times.len() as f64;
        rows.push(BenchRow {
            mode: mode.to_string(),
            success: count(Outcome::Success),
            collision: count(Outcome::Collision),
            stuck: count(Outcome::Stuck),
            mppi_ms_mean: mean,
            mppi_ms_sd: var.sqrt(),
        });
    }
    Ok(rows)
}
