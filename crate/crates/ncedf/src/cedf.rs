//! Whole-robot distance queries from per-link learned fields.
//!
//! A world-frame query point is mapped into each link's base frame through
//! the kinematic chain and evaluated by that link's network; the robot
//! value is the minimum over links. Each per-link value is floored by two
//! sound lower bounds on the true distance: the distance to the training
//! box (the link always lies inside it) and the distance to the link's
//! chord circumball. The floors guard against network extrapolation and
//! make exact best-first pruning possible for cloud queries.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::kinematics::{
    forward_kinematics, link_transform, Aabb, LinkGeometry, Pose, RobotConfig, THETA_EPS,
};
use crate::neural::{encode_input, mlp_forward, MlpParams, ModelFile};
use crate::{Error, Result};

/// One link's learned field plus the geometry and domain it was trained on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkModel {
    pub params: MlpParams,
    pub geometry: LinkGeometry,
    pub train_box: Aabb,
}

/// Composed robot distance field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobotCedf {
    pub links: Vec<LinkModel>,
}

/// Result of a single per-link query.
#[derive(Debug, Clone, Copy)]
pub struct LinkQuery {
    pub value: f64,
    /// True when a lower-bound floor overrode the raw network output.
    pub floored: bool,
}

/// Per-link circumball and chord capsule of the current bend, world frame.
/// Floors and pruning bounds derive from these.
#[derive(Debug, Clone, Copy)]
struct LinkBound {
    inv_pose: Pose,
    mid_world: Vector3<f64>,
    ball_radius: f64,
    /// Chord endpoints: the arc stays within `capsule_radius` of this
    /// segment (sagitta plus tube radius), giving a bound tight enough to
    /// skip most network evaluations.
    base_world: Vector3<f64>,
    tip_world: Vector3<f64>,
    capsule_radius: f64,
}

/// Euclidean distance from `p` to the segment `[a, b]`.
fn segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let denom = ab.norm_squared();
    if denom == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / denom).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

impl RobotCedf {
    /// Same network replicated across `m` identical links.
    pub fn from_shared(params: MlpParams, geometry: LinkGeometry, train_box: Aabb, m: usize) -> Self {
        let link = LinkModel { params, geometry, train_box };
        Self { links: vec![link; m] }
    }

    pub fn from_model_file(file: &ModelFile, train_box: Aabb, m: usize) -> Self {
        Self::from_shared(file.params(), file.link_geometry, train_box, m)
    }

    pub fn n_links(&self) -> usize {
        self.links.len()
    }

    pub fn geometries(&self) -> Vec<LinkGeometry> {
        self.links.iter().map(|l| l.geometry).collect()
    }

    /// Exact-equality check of model geometry against scenario geometry.
    pub fn check_geometry(&self, geoms: &[LinkGeometry]) -> Result<()> {
        if geoms.len() != self.links.len() {
            return Err(Error::GeometryMismatch(format!(
                "model has {} links, scenario has {}",
                self.links.len(),
                geoms.len()
            )));
        }
        for (i, (link, geom)) in self.links.iter().zip(geoms).enumerate() {
            if link.geometry != *geom {
                return Err(Error::GeometryMismatch(format!(
                    "link {i}: model {:?} vs scenario {:?}",
                    link.geometry, geom
                )));
            }
        }
        Ok(())
    }

    fn link_bounds(&self, q: &RobotConfig, fk: &[Pose]) -> Vec<LinkBound> {
        self.links
            .iter()
            .zip(&q.links)
            .enumerate()
            .map(|(i, (link, cfg))| {
                let tip = link_transform(cfg, link.geometry.length).translation();
                let mid_link = tip / 2.0;
                // arc circumball: radius rho*sin(theta/2) about the chord
                // midpoint, degenerating to L/2 for a straight link
                let (arc_radius, sagitta) = if cfg.theta < THETA_EPS {
                    (link.geometry.length / 2.0, 0.0)
                } else {
                    let rho = link.geometry.length / cfg.theta;
                    (rho * (cfg.theta / 2.0).sin(), rho * (1.0 - (cfg.theta / 2.0).cos()))
                };
                let mid_world = fk[i].transform_point(&mid_link);
                let base_world = fk[i].translation();
                LinkBound {
                    inv_pose: fk[i].inverse(),
                    mid_world,
                    ball_radius: arc_radius + link.geometry.radius,
                    base_world,
                    tip_world: 2.0 * mid_world - base_world,
                    capsule_radius: sagitta + link.geometry.radius,
                }
            })
            .collect()
    }

    /// Learned distance from a world point to link `i` (0-based), with
    /// flooring diagnostics.
    pub fn link_distance_world_detailed(
        &self,
        i: usize,
        p_world: &Vector3<f64>,
        q: &RobotConfig,
        fk: &[Pose],
    ) -> Result<LinkQuery> {
        if i >= self.links.len() {
            return Err(Error::IndexOutOfRange { index: i, len: self.links.len() });
        }
        let bounds = self.link_bounds(q, fk);
        Ok(self.link_value(i, p_world, &q.links[i], &bounds[i]))
    }

    fn link_value(
        &self,
        i: usize,
        p_world: &Vector3<f64>,
        cfg: &crate::kinematics::LinkConfig,
        bound: &LinkBound,
    ) -> LinkQuery {
        let link = &self.links[i];
        let p_link = bound.inv_pose.transform_point(p_world);
        let raw = mlp_forward(&link.params, &encode_input(&p_link, cfg))
            .expect("encoded input always matches the model input dim");
        let box_floor = link.train_box.distance(&p_link);
        let ball_floor = (p_world - bound.mid_world).norm() - bound.ball_radius;
        let capsule_floor =
            segment_distance(p_world, &bound.base_world, &bound.tip_world) - bound.capsule_radius;
        let value = raw.max(box_floor).max(ball_floor).max(capsule_floor);
        LinkQuery { value, floored: value > raw }
    }

    /// Learned distance from a world point to link `i` (0-based).
    pub fn link_distance_world(
        &self,
        i: usize,
        p_world: &Vector3<f64>,
        q: &RobotConfig,
        fk: &[Pose],
    ) -> Result<f64> {
        Ok(self.link_distance_world_detailed(i, p_world, q, fk)?.value)
    }

    /// Minimum over all link fields: the robot distance estimate.
    pub fn robot_distance(&self, p_world: &Vector3<f64>, q: &RobotConfig, fk: &[Pose]) -> f64 {
        let bounds = self.link_bounds(q, fk);
        self.robot_distance_with_bounds(p_world, q, &bounds)
    }

    fn robot_distance_with_bounds(
        &self,
        p_world: &Vector3<f64>,
        q: &RobotConfig,
        bounds: &[LinkBound],
    ) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.links.len() {
            // the circumball bound already caps this link's value from below
            let b = &bounds[i];
            let lb = (p_world - b.mid_world).norm() - b.ball_radius;
            if lb >= best {
                continue;
            }
            // tighter chord-capsule bound before paying for the network;
            // skipped links cannot beat `best`, so the min is unchanged
            let lb_capsule =
                segment_distance(p_world, &b.base_world, &b.tip_world) - b.capsule_radius;
            if lb_capsule >= best {
                continue;
            }
            best = best.min(self.link_value(i, p_world, &q.links[i], b).value);
        }
        best
    }

    /// Minimum robot distance over a point cloud plus the index of the
    /// first point attaining it. Forward kinematics is evaluated once;
    /// points are visited best-first by a sound lower bound, so the result
    /// is bit-identical to the naive per-point loop.
    pub fn cloud_min_distance(
        &self,
        cloud: &[Vector3<f64>],
        q: &RobotConfig,
    ) -> Result<(f64, usize)> {
        if cloud.is_empty() {
            return Err(Error::EmptyInput("cloud_min_distance needs a non-empty cloud"));
        }
        let fk = forward_kinematics(q, &self.geometries());
        Ok(self.cloud_min_distance_with_fk(cloud, q, &fk))
    }

    pub fn cloud_min_distance_with_fk(
        &self,
        cloud: &[Vector3<f64>],
        q: &RobotConfig,
        fk: &[Pose],
    ) -> (f64, usize) {
        let bounds = self.link_bounds(q, fk);
        let mut order: Vec<(f64, u32)> = cloud
            .iter()
            .enumerate()
            .map(|(idx, p)| {
                let lb = bounds
                    .iter()
                    .map(|b| (p - b.mid_world).norm() - b.ball_radius)
                    .fold(f64::INFINITY, f64::min);
                (lb, idx as u32)
            })
            .collect();
        order.sort_unstable_by(|a, b| a.partial_cmp(b).expect("bounds are finite"));
        let mut best = f64::INFINITY;
        let mut best_idx = 0usize;
        for &(lb, idx) in &order {
            if lb > best {
                break; // every later point is strictly worse
            }
            let value = self.robot_distance_with_bounds(&cloud[idx as usize], q, &bounds);
            if value < best || (value == best && (idx as usize) < best_idx) {
                best = value;
                best_idx = idx as usize;
            }
        }
        (best, best_idx)
    }

    /// Minimum robot distance over a point cloud, saturated at `cap`:
    /// returns `min(true minimum, cap)`. The cap seeds the pruning bound,
    /// so when every point is provably farther than `cap` no network is
    /// evaluated at all; below the cap the value is bit-identical to
    /// [`Self::cloud_min_distance`]. This is the query the controller's
    /// collision cost uses, where the barrier is flat beyond the cap.
    pub fn cloud_min_distance_capped_with_fk(
        &self,
        cloud: &[Vector3<f64>],
        q: &RobotConfig,
        fk: &[Pose],
        cap: f64,
    ) -> f64 {
        let bounds = self.link_bounds(q, fk);
        // whole-robot ball: one norm per point rejects far clouds cheaply
        let center = bounds.iter().map(|b| b.mid_world).sum::<Vector3<f64>>()
            / bounds.len() as f64;
        let radius = bounds
            .iter()
            .map(|b| (b.mid_world - center).norm() + b.ball_radius)
            .fold(0.0, f64::max);
        let mut order: Vec<(f64, u32)> = cloud
            .iter()
            .enumerate()
            .filter_map(|(idx, p)| {
                if (p - center).norm() - radius >= cap {
                    return None;
                }
                let ball = bounds
                    .iter()
                    .map(|b| (p - b.mid_world).norm() - b.ball_radius)
                    .fold(f64::INFINITY, f64::min);
                if ball >= cap {
                    return None;
                }
                // refine surviving candidates with the chord capsules: a
                // tighter sort key means the evaluation loop exits sooner
                let lb = bounds
                    .iter()
                    .map(|b| {
                        let ball_i = (p - b.mid_world).norm() - b.ball_radius;
                        let capsule_i = segment_distance(p, &b.base_world, &b.tip_world)
                            - b.capsule_radius;
                        ball_i.max(capsule_i)
                    })
                    .fold(f64::INFINITY, f64::min);
                (lb < cap).then_some((lb, idx as u32))
            })
            .collect();
        order.sort_unstable_by(|a, b| a.partial_cmp(b).expect("bounds are finite"));
        let mut best = cap;
        for &(lb, idx) in &order {
            if lb >= best {
                break;
            }
            best = best.min(self.robot_distance_with_bounds(&cloud[idx as usize], q, &bounds));
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::default_bounds;
    use crate::kinematics::{LinkConfig, FK_CALLS};
    use crate::neural::MlpParams;
    use crate::rng::stream;
    use rand::Rng;
    use std::f64::consts::PI;
    use std::sync::atomic::Ordering;

    fn geom() -> LinkGeometry {
        LinkGeometry { length: 2.0, radius: 0.2, l_min: 1.6, l_max: 2.4 }
    }

    fn random_cedf(m: usize, seed: u64) -> RobotCedf {
        let mut rng = stream(seed, &[]);
        let params = MlpParams::glorot(&MlpParams::shape(2, 8), &mut rng);
        RobotCedf::from_shared(params, geom(), default_bounds(), m)
    }

    fn random_config<R: Rng>(m: usize, rng: &mut R) -> RobotConfig {
        RobotConfig {
            links: (0..m)
                .map(|_| LinkConfig {
                    theta: rng.gen_range(0.0..PI),
                    phi: rng.gen_range(-PI..PI),
                })
                .collect(),
        }
    }

    #[test]
    fn single_link_matches_link_frame_eval() {
        let cedf = random_cedf(1, 1);
        let q = RobotConfig { links: vec![LinkConfig { theta: 0.9, phi: 0.3 }] };
        let fk = forward_kinematics(&q, &cedf.geometries());
        let p = Vector3::new(0.8, -0.4, 1.1);
        let via_chain = cedf.link_distance_world(0, &p, &q, &fk).unwrap();
        // base frame is identity for link 0, so the link-frame evaluation
        // with the same floors must agree exactly
        let direct = cedf.robot_distance(&p, &q, &fk);
        assert_eq!(via_chain.to_bits(), direct.to_bits());
    }

    #[test]
    fn robot_distance_is_min_of_links() {
        let cedf = random_cedf(3, 2);
        let mut rng = stream(3, &[]);
        for _ in 0..50 {
            let q = random_config(3, &mut rng);
            let fk = forward_kinematics(&q, &cedf.geometries());
            let p = Vector3::new(
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-1.0..7.0),
            );
            let robot = cedf.robot_distance(&p, &q, &fk);
            let per_link: Vec<f64> = (0..3)
                .map(|i| cedf.link_distance_world(i, &p, &q, &fk).unwrap())
                .collect();
            let min = per_link.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(robot.to_bits(), min.to_bits());
            for v in per_link {
                assert!(robot <= v);
            }
        }
    }

    #[test]
    fn index_out_of_range() {
        let cedf = random_cedf(2, 4);
        let q = RobotConfig { links: vec![LinkConfig::straight(); 2] };
        let fk = forward_kinematics(&q, &cedf.geometries());
        assert!(matches!(
            cedf.link_distance_world(2, &Vector3::zeros(), &q, &fk),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn translation_invariance_dyadic_exact() {
        // dyadic offsets keep every float op exact, so the value is
        // bit-identical when base frame and query move together
        let cedf = random_cedf(2, 5);
        let q = RobotConfig {
            links: vec![LinkConfig::straight(), LinkConfig::straight()],
        };
        let fk = forward_kinematics(&q, &cedf.geometries());
        let shift = Vector3::new(0.5, -0.25, 2.0);
        let shifted_fk: Vec<Pose> = fk
            .iter()
            .map(|p| Pose::from_parts(p.rotation(), p.translation() + shift))
            .collect();
        let p = Vector3::new(1.5, 0.75, 0.5);
        let a = cedf.robot_distance(&p, &q, &fk);
        let b = cedf.robot_distance(&(p + shift), &q, &shifted_fk);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn cloud_examples_and_tie_break() {
        let cedf = random_cedf(2, 6);
        let mut rng = stream(7, &[]);
        let q = random_config(2, &mut rng);
        let fk = forward_kinematics(&q, &cedf.geometries());

        let p = Vector3::new(1.0, 1.0, 1.0);
        let (d, idx) = cedf.cloud_min_distance(&[p], &q).unwrap();
        assert_eq!(idx, 0);
        assert_eq!(d.to_bits(), cedf.robot_distance(&p, &q, &fk).to_bits());

        // duplicated cloud: same min, first duplicate wins
        let far = Vector3::new(4.0, 4.0, 6.0);
        let cloud = vec![far, p, p, far];
        let (d2, idx2) = cedf.cloud_min_distance(&cloud, &q).unwrap();
        assert_eq!(d2.to_bits(), d.to_bits());
        assert_eq!(idx2, 1);

        assert!(cedf.cloud_min_distance(&[], &q).is_err());
    }

    #[test]
    fn pruned_cloud_query_matches_naive_loop() {
        let cedf = random_cedf(3, 8);
        let mut rng = stream(9, &[]);
        for _ in 0..20 {
            let q = random_config(3, &mut rng);
            let fk = forward_kinematics(&q, &cedf.geometries());
            let cloud: Vec<Vector3<f64>> = (0..200)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-6.0..6.0),
                        rng.gen_range(-6.0..6.0),
                        rng.gen_range(-2.0..8.0),
                    )
                })
                .collect();
            let (fast, fast_idx) = cedf.cloud_min_distance(&cloud, &q).unwrap();
            let mut naive = f64::INFINITY;
            let mut naive_idx = 0;
            for (i, p) in cloud.iter().enumerate() {
                let v = cedf.robot_distance(p, &q, &fk);
                if v < naive {
                    naive = v;
                    naive_idx = i;
                }
            }
            assert_eq!(fast.to_bits(), naive.to_bits());
            assert_eq!(fast_idx, naive_idx);
        }
    }

    #[test]
    fn capped_cloud_query_saturates_exactly() {
        let cedf = random_cedf(3, 8);
        let mut rng = stream(21, &[]);
        for _ in 0..20 {
            let q = random_config(3, &mut rng);
            let fk = forward_kinematics(&q, &cedf.geometries());
            let cloud: Vec<Vector3<f64>> = (0..200)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-6.0..6.0),
                        rng.gen_range(-6.0..6.0),
                        rng.gen_range(-2.0..8.0),
                    )
                })
                .collect();
            let (exact, _) = cedf.cloud_min_distance(&cloud, &q).unwrap();
            for cap in [0.2, 1.0, 3.0, f64::INFINITY] {
                let capped = cedf.cloud_min_distance_capped_with_fk(&cloud, &q, &fk, cap);
                assert_eq!(
                    capped.to_bits(),
                    exact.min(cap).to_bits(),
                    "cap {cap}: {capped} vs exact {exact}"
                );
            }
        }
    }

    #[test]
    fn cloud_query_runs_forward_kinematics_once() {
        let cedf = random_cedf(2, 10);
        let mut rng = stream(11, &[]);
        let q = random_config(2, &mut rng);
        let cloud: Vec<Vector3<f64>> = (0..64)
            .map(|_| Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(0.0..4.0)))
            .collect();
        let before = FK_CALLS.load(Ordering::Relaxed);
        cedf.cloud_min_distance(&cloud, &q).unwrap();
        let after = FK_CALLS.load(Ordering::Relaxed);
        assert_eq!(after - before, 1);
    }

    #[test]
    fn far_points_are_floored() {
        let cedf = random_cedf(1, 12);
        let q = RobotConfig { links: vec![LinkConfig::straight()] };
        let fk = forward_kinematics(&q, &cedf.geometries());
        let p = Vector3::new(40.0, 0.0, 0.0);
        let query = cedf.link_distance_world_detailed(0, &p, &q, &fk).unwrap();
        assert!(query.floored, "far outside the training box must floor");
        // floor is sound: never exceeds the true distance
        let true_d = crate::datagen::analytic_link_distance(&p, &q.links[0], &geom());
        assert!(query.value <= true_d + 1e-9);
    }

    #[test]
    fn geometry_check() {
        let cedf = random_cedf(2, 13);
        assert!(cedf.check_geometry(&[geom(), geom()]).is_ok());
        let other = LinkGeometry { length: 1.0, ..geom() };
        assert!(cedf.check_geometry(&[geom(), other]).is_err());
        assert!(cedf.check_geometry(&[geom()]).is_err());
    }
}
