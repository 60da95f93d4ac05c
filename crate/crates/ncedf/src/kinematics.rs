//! Piecewise-constant-curvature (PCC) kinematics for multi-link continuum
//! robots.
//!
//! Each link bends as a circular arc parameterized by a bending angle
//! `theta` and a bending-plane angle `phi`, driven by three chamber arc
//! lengths whose per-link mean equals the backbone length. The transform
//! convention is the Webster–Jones form
//! `Rz(phi) * Ry(theta) * Rz(-phi)` with translation
//! `Rz(phi) * (rho (1 - cos theta), 0, rho sin theta)`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Below this bending angle the straight-link series limit is used.
pub const THETA_EPS: f64 = 1e-6;
/// Radicand threshold under which a chamber triple is treated as straight.
pub const RADICAND_EPS: f64 = 1e-15;
/// Absolute tolerance on the per-link mean arc-length constraint.
pub const MEAN_TOL: f64 = 1e-9;

/// Geometry of a single link: backbone length, tube radius, chamber bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkGeometry {
    #[serde(rename = "L")]
    pub length: f64,
    #[serde(rename = "r")]
    pub radius: f64,
    pub l_min: f64,
    pub l_max: f64,
}

impl LinkGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.l_min && self.l_min < self.length && self.length < self.l_max) {
            return Err(Error::InvalidConfig(format!(
                "require 0 < l_min < L < l_max, got l_min={} L={} l_max={}",
                self.l_min, self.length, self.l_max
            )));
        }
        if self.radius <= 0.0 {
            return Err(Error::InvalidConfig(format!("radius {} <= 0", self.radius)));
        }
        Ok(())
    }
}

/// Bending state of one link: `theta` in [0, pi], `phi` in [-pi, pi).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub theta: f64,
    pub phi: f64,
}

impl LinkConfig {
    pub fn straight() -> Self {
        Self { theta: 0.0, phi: 0.0 }
    }
}

/// Whole-robot configuration, one `LinkConfig` per link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotConfig {
    pub links: Vec<LinkConfig>,
}

impl RobotConfig {
    pub fn n_links(&self) -> usize {
        self.links.len()
    }
}

/// Actuation state: 3M chamber arc lengths, link-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArcLengths {
    pub values: Vec<f64>,
}

impl ArcLengths {
    pub fn new(values: Vec<f64>) -> Self {
        debug_assert!(values.len() % 3 == 0);
        Self { values }
    }

    /// All chambers at the backbone length (straight robot).
    pub fn straight(n_links: usize, length: f64) -> Self {
        Self { values: vec![length; 3 * n_links] }
    }

    pub fn n_links(&self) -> usize {
        self.values.len() / 3
    }

    pub fn link(&self, i: usize) -> [f64; 3] {
        [self.values[3 * i], self.values[3 * i + 1], self.values[3 * i + 2]]
    }

    /// Map every chamber triple through the PCC arc-length formula.
    pub fn to_config(&self, geoms: &[LinkGeometry]) -> RobotConfig {
        let links = (0..self.n_links())
            .map(|i| arc_lengths_to_config(self.link(i), &geoms[i]))
            .collect();
        RobotConfig { links }
    }
}

/// Axis-aligned box, used for workspace sampling and training-domain floors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }

    /// Euclidean distance from `p` to the box (zero inside).
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let d = (self.min[a] - p[a]).max(0.0).max(p[a] - self.max[a]);
            d2 += d * d;
        }
        d2.sqrt()
    }

    pub fn edge(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn diameter(&self) -> f64 {
        (0..3).map(|a| self.edge(a).powi(2)).sum::<f64>().sqrt()
    }
}

/// Rigid-body pose as a 4x4 homogeneous transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose(pub Matrix4<f64>);

impl Pose {
    pub fn identity() -> Self {
        Pose(Matrix4::identity())
    }

    pub fn from_parts(rot: Matrix3<f64>, trans: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&trans);
        Pose(m)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into()
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose(self.0 * other.0)
    }

    /// Rigid inverse `(R^T, -R^T t)`.
    pub fn inverse(&self) -> Pose {
        let rt = self.rotation().transpose();
        Pose::from_parts(rt, -(rt * self.translation()))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Frobenius norm of the elementwise difference of the 4x4 matrices.
    pub fn frobenius_distance(&self, other: &Pose) -> f64 {
        (self.0 - other.0).norm()
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[4 * r + c] = self.0[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64; 16]) -> Pose {
        let mut m = Matrix4::zeros();
        for r in 0..4 {
            for c in 0..4 {
                m[(r, c)] = v[4 * r + c];
            }
        }
        Pose(m)
    }
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Chamber arc lengths to bending parameters.
///
/// `theta` is clamped to `[0, pi]`; a near-zero radicand maps to the
/// straight configuration `(0, 0)`; an arctan2 output of exactly `pi` is
/// remapped to `-pi` so `phi` stays in the half-open range.
pub fn arc_lengths_to_config(l: [f64; 3], geom: &LinkGeometry) -> LinkConfig {
    let [l1, l2, l3] = l;
    // difference form of l1^2+l2^2+l3^2-l1*l2-l1*l3-l2*l3: algebraically
    // identical but free of catastrophic cancellation near straight triples
    let radicand =
        ((l1 - l2).powi(2) + (l2 - l3).powi(2) + (l1 - l3).powi(2)) / 2.0;
    if radicand <= RADICAND_EPS {
        return LinkConfig::straight();
    }
    let theta = (2.0 * radicand.sqrt() / (3.0 * geom.radius)).clamp(0.0, std::f64::consts::PI);
    let mut phi = (3.0f64.sqrt() * (l2 - l3)).atan2(l2 + l3 - 2.0 * l1);
    if phi == std::f64::consts::PI {
        phi = -std::f64::consts::PI;
    }
    LinkConfig { theta, phi }
}

/// Analytic inverse of `arc_lengths_to_config`:
/// `l_j = L - r * theta * cos(phi - (j-1) * 2pi/3)`.
pub fn config_to_arc_lengths(cfg: &LinkConfig, geom: &LinkGeometry) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (j, slot) in out.iter_mut().enumerate() {
        let offset = j as f64 * 2.0 * std::f64::consts::PI / 3.0;
        // the +offset orientation is the one that round-trips through the
        // arctan2 in arc_lengths_to_config (the -offset variant negates phi)
        *slot = geom.length - geom.radius * cfg.theta * (cfg.phi + offset).cos();
    }
    out
}

/// Rotation of the backbone frame at arc parameter `s` along the link.
fn frame_rotation(cfg: &LinkConfig, s_frac: f64) -> Matrix3<f64> {
    if cfg.theta * s_frac < THETA_EPS {
        return Matrix3::identity();
    }
    rot_z(cfg.phi) * rot_y(cfg.theta * s_frac) * rot_z(-cfg.phi)
}

/// Backbone position at arc length `s` (in `[0, L]`), link frame.
pub fn backbone_point(cfg: &LinkConfig, length: f64, s: f64) -> Vector3<f64> {
    if cfg.theta < THETA_EPS {
        return Vector3::new(0.0, 0.0, s);
    }
    let rho = length / cfg.theta;
    let a = cfg.theta * s / length;
    rot_z(cfg.phi) * Vector3::new(rho * (1.0 - a.cos()), 0.0, rho * a.sin())
}

/// Pose of the link tip relative to the link base.
pub fn link_transform(cfg: &LinkConfig, length: f64) -> Pose {
    if cfg.theta < THETA_EPS {
        return Pose::from_parts(Matrix3::identity(), Vector3::new(0.0, 0.0, length));
    }
    let rho = length / cfg.theta;
    let trans = rot_z(cfg.phi)
        * Vector3::new(rho * (1.0 - cfg.theta.cos()), 0.0, rho * cfg.theta.sin());
    let rot = rot_z(cfg.phi) * rot_y(cfg.theta) * rot_z(-cfg.phi);
    Pose::from_parts(rot, trans)
}

#[cfg(test)]
pub(crate) static FK_CALLS: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);

/// Cumulative chain transforms: element 0 is the global base (identity),
/// element `i` is the product of the first `i` link transforms, the last
/// element is the end-effector pose.
pub fn forward_kinematics(q: &RobotConfig, geoms: &[LinkGeometry]) -> Vec<Pose> {
    debug_assert_eq!(q.links.len(), geoms.len());
    #[cfg(test)]
    FK_CALLS.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    let mut poses = Vec::with_capacity(q.links.len() + 1);
    poses.push(Pose::identity());
    for (cfg, geom) in q.links.iter().zip(geoms) {
        let next = poses.last().unwrap().compose(&link_transform(cfg, geom.length));
        poses.push(next);
    }
    poses
}

/// End-effector pose for a configuration.
pub fn end_effector(q: &RobotConfig, geoms: &[LinkGeometry]) -> Pose {
    *forward_kinematics(q, geoms).last().unwrap()
}

/// `n` backbone points equally spaced in arc parameter, link frame.
pub fn backbone_points(cfg: &LinkConfig, length: f64, n: usize) -> Vec<Vector3<f64>> {
    debug_assert!(n >= 2);
    (0..n)
        .map(|i| backbone_point(cfg, length, length * i as f64 / (n - 1) as f64))
        .collect()
}

/// Surface samples of a link: lateral tube points plus end-cap disks.
#[derive(Debug, Clone)]
pub struct SurfaceSamples {
    pub points: Vec<Vector3<f64>>,
    pub n_lateral: usize,
    pub n_cap: usize,
}

/// Number of concentric rings per end cap (plus the cap center point).
const CAP_RINGS: usize = 4;

/// Sample the link boundary: `n_axial * n_circ` lateral tube points and two
/// cap disks of `CAP_RINGS` concentric rings plus a center point each.
pub fn surface_points(
    cfg: &LinkConfig,
    geom: &LinkGeometry,
    n_axial: usize,
    n_circ: usize,
) -> SurfaceSamples {
    debug_assert!(n_axial >= 2 && n_circ >= 3);
    let mut points = Vec::with_capacity(n_axial * n_circ + 2 * (CAP_RINGS * n_circ + 1));
    let two_pi = 2.0 * std::f64::consts::PI;
    for ai in 0..n_axial {
        let s = geom.length * ai as f64 / (n_axial - 1) as f64;
        let center = backbone_point(cfg, geom.length, s);
        let rot = frame_rotation(cfg, s / geom.length);
        for ci in 0..n_circ {
            let psi = two_pi * ci as f64 / n_circ as f64;
            let offset = Vector3::new(geom.radius * psi.cos(), geom.radius * psi.sin(), 0.0);
            points.push(center + rot * offset);
        }
    }
    let n_lateral = points.len();
    for s in [0.0, geom.length] {
        let center = backbone_point(cfg, geom.length, s);
        let rot = frame_rotation(cfg, s / geom.length);
        points.push(center);
        for ring in 1..=CAP_RINGS {
            let rad = geom.radius * ring as f64 / CAP_RINGS as f64;
            for ci in 0..n_circ {
                let psi = two_pi * ci as f64 / n_circ as f64;
                let offset = Vector3::new(rad * psi.cos(), rad * psi.sin(), 0.0);
                points.push(center + rot * offset);
            }
        }
    }
    let n_cap = points.len() - n_lateral;
    SurfaceSamples { points, n_lateral, n_cap }
}

/// Per-link zero-mean projection of a 3M control vector.
pub fn project_control(u_raw: &[f64]) -> Vec<f64> {
    debug_assert!(u_raw.len() % 3 == 0);
    let mut out = u_raw.to_vec();
    for link in out.chunks_exact_mut(3) {
        let mean = (link[0] + link[1] + link[2]) / 3.0;
        for v in link {
            *v -= mean;
        }
    }
    out
}

/// Euler step of the arc-length dynamics `x' = x + u * tau`.
///
/// Fails if `u` is not per-link zero-mean to `MEAN_TOL` (programming error
/// signal: controls must pass through [`project_control`] first).
pub fn step_dynamics(x: &ArcLengths, u: &[f64], tau: f64) -> Result<ArcLengths> {
    if u.len() != x.values.len() {
        return Err(Error::DimensionMismatch { expected: x.values.len(), got: u.len() });
    }
    for link in u.chunks_exact(3) {
        let mean = (link[0] + link[1] + link[2]) / 3.0;
        if mean.abs() > MEAN_TOL {
            return Err(Error::UnprojectedControl(mean.abs()));
        }
    }
    let values = x.values.iter().zip(u).map(|(x, u)| x + u * tau).collect();
    Ok(ArcLengths::new(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    pub(crate) fn test_geom() -> LinkGeometry {
        LinkGeometry { length: 2.0, radius: 0.2, l_min: 1.6, l_max: 2.4 }
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn symmetric_chambers_are_straight() {
        let cfg = arc_lengths_to_config([2.0, 2.0, 2.0], &test_geom());
        assert_eq!(cfg.theta, 0.0);
        assert_eq!(cfg.phi, 0.0);
    }

    #[test]
    fn arc_lengths_to_config_worked_examples() {
        // radicand 0.36 -> theta 2.0, phi at the branch cut remapped to -pi
        let cfg = arc_lengths_to_config([2.4, 1.8, 1.8], &test_geom());
        assert_close(cfg.theta, 2.0, 1e-12);
        assert_close(cfg.phi, -PI, 1e-12);

        let cfg = arc_lengths_to_config([1.6, 2.2, 2.2], &test_geom());
        assert_close(cfg.theta, 2.0, 1e-12);
        assert_close(cfg.phi, 0.0, 1e-12);
    }

    #[test]
    fn config_to_arc_lengths_examples() {
        let geom = test_geom();
        let l = config_to_arc_lengths(&LinkConfig::straight(), &geom);
        assert_eq!(l, [2.0, 2.0, 2.0]);

        let l = config_to_arc_lengths(&LinkConfig { theta: 2.0, phi: -PI }, &geom);
        for (got, want) in l.iter().zip([2.4, 1.8, 1.8]) {
            assert_close(*got, want, 1e-12);
        }
        let l = config_to_arc_lengths(&LinkConfig { theta: 2.0, phi: 0.0 }, &geom);
        for (got, want) in l.iter().zip([1.6, 2.2, 2.2]) {
            assert_close(*got, want, 1e-12);
        }
    }

    #[test]
    fn link_transform_straight() {
        let pose = link_transform(&LinkConfig::straight(), 2.0);
        assert_eq!(pose.translation(), Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(pose.rotation(), Matrix3::identity());
    }

    #[test]
    fn link_transform_quarter_circle() {
        let pose = link_transform(&LinkConfig { theta: PI / 2.0, phi: 0.0 }, 2.0);
        let rho = 4.0 / PI;
        let t = pose.translation();
        assert_close(t.x, rho, 1e-12);
        assert_close(t.y, 0.0, 1e-12);
        assert_close(t.z, rho, 1e-12);
    }

    #[test]
    fn link_transform_half_circle() {
        let pose = link_transform(&LinkConfig { theta: PI, phi: 0.0 }, 2.0);
        let t = pose.translation();
        assert_close(t.x, 4.0 / PI, 1e-12);
        assert_close(t.y, 0.0, 1e-12);
        assert_close(t.z, 0.0, 1e-12);
        // tip tangent points back along -z
        let tangent = pose.rotation() * Vector3::z();
        assert_close(tangent.z, -1.0, 1e-12);
    }

    #[test]
    fn forward_kinematics_straight_chains() {
        let geom = test_geom();
        let q1 = RobotConfig { links: vec![LinkConfig::straight()] };
        let poses = forward_kinematics(&q1, &[geom]);
        assert_eq!(poses.len(), 2);
        assert_eq!(poses[0].0, Matrix4::identity());
        assert_eq!(poses[1].translation(), Vector3::new(0.0, 0.0, 2.0));

        let q2 = RobotConfig { links: vec![LinkConfig::straight(); 2] };
        let poses = forward_kinematics(&q2, &[geom, geom]);
        assert_eq!(poses[2].translation(), Vector3::new(0.0, 0.0, 4.0));
    }

    #[test]
    fn forward_kinematics_bent_chain() {
        let geom = test_geom();
        let q = RobotConfig {
            links: vec![LinkConfig { theta: PI / 2.0, phi: 0.0 }, LinkConfig::straight()],
        };
        let poses = forward_kinematics(&q, &[geom, geom]);
        let ee = poses[2].translation();
        let rho = 4.0 / PI;
        // link-1 tip tangent is +x, so the straight link extends 2 m along x
        assert_close(ee.x, rho + 2.0, 1e-12);
        assert_close(ee.y, 0.0, 1e-12);
        assert_close(ee.z, rho, 1e-12);
    }

    #[test]
    fn backbone_points_examples() {
        let pts = backbone_points(&LinkConfig::straight(), 2.0, 3);
        assert_eq!(pts, vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 0.0, 2.0),
        ]);

        let pts = backbone_points(&LinkConfig { theta: PI / 2.0, phi: 0.0 }, 2.0, 2);
        assert_eq!(pts[0], Vector3::zeros());
        let rho = 4.0 / PI;
        assert!((pts[1] - Vector3::new(rho, 0.0, rho)).norm() < 1e-12);
    }

    #[test]
    fn surface_points_straight_lateral_radius() {
        let geom = test_geom();
        let s = surface_points(&LinkConfig::straight(), &geom, 5, 8);
        for p in &s.points[..s.n_lateral] {
            let axis_dist = (p.x * p.x + p.y * p.y).sqrt();
            assert_close(axis_dist, geom.radius, 1e-12);
        }
        // axial fraction 0.5, circ angle 0 with n_axial=5 -> sample at s=1
        assert!((s.points[2 * 8] - Vector3::new(0.2, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn surface_points_lie_on_tube() {
        let geom = test_geom();
        let cfg = LinkConfig { theta: 1.3, phi: 0.7 };
        let s = surface_points(&cfg, &geom, 8, 12);
        let dense = backbone_points(&cfg, geom.length, 4000);
        for p in &s.points[..s.n_lateral] {
            let d = dense.iter().map(|b| (p - b).norm()).fold(f64::INFINITY, f64::min);
            // dense-backbone chord error is O((L/4000)^2)
            assert!((d - geom.radius).abs() < 1e-6, "tube distance {d}");
        }
    }

    #[test]
    fn step_dynamics_examples() {
        let x = ArcLengths::new(vec![2.0, 2.0, 2.0]);
        let same = step_dynamics(&x, &[0.0, 0.0, 0.0], 0.05).unwrap();
        assert_eq!(same, x);

        let x2 = step_dynamics(&x, &[0.2, -0.1, -0.1], 0.05).unwrap();
        assert_eq!(x2.values, vec![2.01, 1.995, 1.995]);

        assert!(matches!(
            step_dynamics(&x, &[0.1, 0.0, 0.0], 0.05),
            Err(Error::UnprojectedControl(_))
        ));
    }

    #[test]
    fn project_control_examples() {
        let p = project_control(&[0.3, 0.0, 0.0]);
        for (got, want) in p.iter().zip([0.2, -0.1, -0.1]) {
            assert_close(*got, want, 1e-15);
        }
        let zero_mean = vec![0.1, -0.05, -0.05];
        assert_eq!(project_control(&zero_mean), zero_mean);
        let constant = project_control(&[0.7, 0.7, 0.7]);
        for v in constant {
            assert!(v.abs() <= 1e-15);
        }
    }

    #[test]
    fn transform_continuous_at_straight_limit() {
        let near = link_transform(&LinkConfig { theta: 1e-7, phi: 0.3 }, 2.0);
        let straight = link_transform(&LinkConfig::straight(), 2.0);
        assert!(near.frobenius_distance(&straight) <= 1e-5);
    }

    proptest! {
        #[test]
        fn round_trip_config(theta in 1e-6..PI, phi in -PI..PI) {
            let geom = test_geom();
            let cfg = LinkConfig { theta, phi };
            let l = config_to_arc_lengths(&cfg, &geom);
            let back = arc_lengths_to_config(l, &geom);
            prop_assert!((back.theta - theta).abs() <= 1e-9);
            let mut dphi = (back.phi - phi).abs() % (2.0 * PI);
            if dphi > PI { dphi = 2.0 * PI - dphi; }
            prop_assert!(dphi <= 1e-9, "phi {} vs {}", back.phi, phi);
        }

        #[test]
        fn shift_invariance(l1 in 1.0..3.0f64, l2 in 1.0..3.0f64, l3 in 1.0..3.0f64,
                            shift in -0.5..0.5f64) {
            let geom = test_geom();
            let a = arc_lengths_to_config([l1, l2, l3], &geom);
            let b = arc_lengths_to_config([l1 + shift, l2 + shift, l3 + shift], &geom);
            prop_assert!((a.theta - b.theta).abs() <= 1e-7);
            prop_assert!((a.phi - b.phi).abs() <= 1e-7);
        }

        #[test]
        fn chained_poses_stay_orthonormal(
            thetas in proptest::collection::vec(0.0..PI, 1..16),
            phis in proptest::collection::vec(-PI..PI, 16),
        ) {
            let geom = test_geom();
            let links: Vec<LinkConfig> = thetas.iter().zip(&phis)
                .map(|(&theta, &phi)| LinkConfig { theta, phi })
                .collect();
            let geoms = vec![geom; links.len()];
            let poses = forward_kinematics(&RobotConfig { links }, &geoms);
            for pose in &poses {
                let r = pose.rotation();
                let err = (r.transpose() * r - Matrix3::identity()).norm();
                prop_assert!(err <= 1e-9, "orthonormality error {err}");
                prop_assert!((r.determinant() - 1.0).abs() <= 1e-9);
                let bottom = pose.0.row(3).transpose();
                prop_assert_eq!(bottom.as_slice(), [0.0, 0.0, 0.0, 1.0]);
            }
        }

        #[test]
        fn projection_is_idempotent_linear(u in proptest::collection::vec(-1.0..1.0f64, 6),
                                           v in proptest::collection::vec(-1.0..1.0f64, 6),
                                           a in -2.0..2.0f64) {
            let pu = project_control(&u);
            let ppu = project_control(&pu);
            for (x, y) in pu.iter().zip(&ppu) {
                prop_assert!((x - y).abs() <= 1e-15);
            }
            // P(a u + v) = a P(u) + P(v)
            let combo: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + y).collect();
            let lhs = project_control(&combo);
            let pv = project_control(&v);
            for i in 0..6 {
                prop_assert!((lhs[i] - (a * pu[i] + pv[i])).abs() <= 1e-12);
            }
        }

        #[test]
        fn projected_step_preserves_mean(raw in proptest::collection::vec(-1.0..1.0f64, 9)) {
            let x = ArcLengths::new(vec![2.0; 9]);
            let u = project_control(&raw);
            let next = step_dynamics(&x, &u, 0.05).unwrap();
            for i in 0..3 {
                let [a, b, c] = next.link(i);
                prop_assert!(((a + b + c) / 3.0 - 2.0).abs() <= 1e-9);
            }
        }
    }
}
