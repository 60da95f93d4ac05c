//! Training-data generation for per-link distance fields.
//!
//! Targets are computed by brute force: the minimum Euclidean distance from
//! a workspace point to a dense sampling of the link surface. A separate
//! high-accuracy analytic oracle (ring/cap distance over a dense backbone
//! discretization) is used for validation and never feeds the datasets.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kinematics::{
    arc_lengths_to_config, backbone_point, surface_points, Aabb, LinkConfig, LinkGeometry,
};
use crate::rng::stream;
use crate::{Error, Result};

/// One supervised triplet: link configuration, query point, target distance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingSample {
    pub theta: f64,
    pub phi: f64,
    pub p: [f64; 3],
    pub d: f64,
}

impl TrainingSample {
    pub fn config(&self) -> LinkConfig {
        LinkConfig { theta: self.theta, phi: self.phi }
    }

    pub fn point(&self) -> Vector3<f64> {
        Vector3::new(self.p[0], self.p[1], self.p[2])
    }
}

/// Default workspace box around a single link: max reach L + r with margin.
pub fn default_bounds() -> Aabb {
    Aabb { min: [-2.4, -2.4, -0.4], max: [2.4, 2.4, 2.8] }
}

/// Dataset recipe: counts, surface sampling density, box, seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_configs: usize,
    pub n_workspace: usize,
    pub n_surface_axial: usize,
    pub n_surface_circ: usize,
    #[serde(default = "default_bounds")]
    pub bounds: Aabb,
    pub seed: u64,
}

impl DatasetSpec {
    /// Paper-scale recipe: N=250, N_w=32^3, N_s=40x40.
    pub fn full_scale(seed: u64) -> Self {
        Self {
            n_configs: 250,
            n_workspace: 32 * 32 * 32,
            n_surface_axial: 40,
            n_surface_circ: 40,
            bounds: default_bounds(),
            seed,
        }
    }

    pub fn n_surface(&self) -> usize {
        self.n_surface_axial * self.n_surface_circ
    }
}

/// Sample `n` link configurations uniformly in arc-length space.
///
/// Three chamber lengths are drawn i.i.d. uniform on `[l_min, l_max]`,
/// shifted to per-link mean `L`, clamped back to bounds, and mapped through
/// the PCC formula. Triples whose mean the clamp re-breaks are resampled.
pub fn sample_configurations<R: Rng>(geom: &LinkGeometry, n: usize, rng: &mut R) -> Vec<LinkConfig> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut l = [0.0; 3];
        for v in &mut l {
            *v = rng.gen_range(geom.l_min..=geom.l_max);
        }
        let mean = (l[0] + l[1] + l[2]) / 3.0;
        for v in &mut l {
            *v = (*v + geom.length - mean).clamp(geom.l_min, geom.l_max);
        }
        let mean = (l[0] + l[1] + l[2]) / 3.0;
        if (mean - geom.length).abs() > 1e-9 {
            continue;
        }
        out.push(arc_lengths_to_config(l, geom));
    }
    out
}

/// Workspace query points: a regular grid of cell centers when `n_workspace`
/// is a perfect cube, uniform random points otherwise.
pub fn sample_workspace_points(spec: &DatasetSpec) -> Vec<Vector3<f64>> {
    let n = spec.n_workspace;
    let k = (n as f64).cbrt().round() as usize;
    if k * k * k == n {
        let mut pts = Vec::with_capacity(n);
        for ix in 0..k {
            for iy in 0..k {
                for iz in 0..k {
                    let frac = |i: usize, axis: usize| {
                        spec.bounds.min[axis]
                            + spec.bounds.edge(axis) * (i as f64 + 0.5) / k as f64
                    };
                    pts.push(Vector3::new(frac(ix, 0), frac(iy, 1), frac(iz, 2)));
                }
            }
        }
        pts
    } else {
        let mut rng = stream(spec.seed, &[0x77]);
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(spec.bounds.min[0]..=spec.bounds.max[0]),
                    rng.gen_range(spec.bounds.min[1]..=spec.bounds.max[1]),
                    rng.gen_range(spec.bounds.min[2]..=spec.bounds.max[2]),
                )
            })
            .collect()
    }
}

/// Minimum distance from `p` to the sampled link surface.
pub fn brute_force_distance(
    p: &Vector3<f64>,
    cfg: &LinkConfig,
    geom: &LinkGeometry,
    n_axial: usize,
    n_circ: usize,
) -> f64 {
    let samples = surface_points(cfg, geom, n_axial, n_circ);
    min_distance_to_points(p, &samples.points)
}

fn min_distance_to_points(p: &Vector3<f64>, pts: &[Vector3<f64>]) -> f64 {
    pts.iter().map(|s| (p - s).norm()).fold(f64::INFINITY, f64::min)
}

/// Backbone discretization for the analytic oracle.
const ORACLE_BACKBONE_SAMPLES: usize = 2000;

/// High-accuracy distance from `p` to the capped constant-curvature tube.
///
/// The lateral surface is the union of radius-`r` rings around dense
/// backbone samples; each flat end cap is handled analytically as a disk.
pub fn analytic_link_distance(p: &Vector3<f64>, cfg: &LinkConfig, geom: &LinkGeometry) -> f64 {
    analytic_link_distance_n(p, cfg, geom, ORACLE_BACKBONE_SAMPLES)
}

pub fn analytic_link_distance_n(
    p: &Vector3<f64>,
    cfg: &LinkConfig,
    geom: &LinkGeometry,
    n_backbone: usize,
) -> f64 {
    let mut best = f64::INFINITY;
    let mut best_s = 0.0;
    // lateral surface: min over rings normal to the local tangent
    for i in 0..n_backbone {
        let s = geom.length * i as f64 / (n_backbone - 1) as f64;
        let d = ring_distance(p, cfg, geom, s, geom.radius);
        if d < best {
            best = d;
            best_s = s;
        }
    }
    // polish the arc parameter around the best grid sample; the ring
    // distance is smooth in s, so a ternary search converges fast
    let step = geom.length / (n_backbone - 1) as f64;
    let mut lo = (best_s - step).max(0.0);
    let mut hi = (best_s + step).min(geom.length);
    for _ in 0..100 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if ring_distance(p, cfg, geom, m1, geom.radius)
            <= ring_distance(p, cfg, geom, m2, geom.radius)
        {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    best = best.min(ring_distance(p, cfg, geom, (lo + hi) / 2.0, geom.radius));
    // end caps: distance to a flat disk of radius r
    for s in [0.0, geom.length] {
        best = best.min(disk_distance(p, cfg, geom, s));
    }
    best
}

/// Distance from `p` to the circle of radius `rad` at arc parameter `s`.
fn ring_distance(p: &Vector3<f64>, cfg: &LinkConfig, geom: &LinkGeometry, s: f64, rad: f64) -> f64 {
    let (z, radial) = axial_coords(p, cfg, geom, s);
    (z * z + (radial - rad) * (radial - rad)).sqrt()
}

/// Distance from `p` to the cap disk at arc parameter `s`.
fn disk_distance(p: &Vector3<f64>, cfg: &LinkConfig, geom: &LinkGeometry, s: f64) -> f64 {
    let (z, radial) = axial_coords(p, cfg, geom, s);
    if radial <= geom.radius {
        z.abs()
    } else {
        let dr = radial - geom.radius;
        (z * z + dr * dr).sqrt()
    }
}

/// Axial offset and radial distance of `p` relative to the backbone frame
/// at arc parameter `s`.
fn axial_coords(p: &Vector3<f64>, cfg: &LinkConfig, geom: &LinkGeometry, s: f64) -> (f64, f64) {
    let center = backbone_point(cfg, geom.length, s);
    let tangent = tangent_at(cfg, geom, s);
    let v = p - center;
    let z = v.dot(&tangent);
    let radial = (v - z * tangent).norm();
    (z, radial)
}

fn tangent_at(cfg: &LinkConfig, geom: &LinkGeometry, s: f64) -> Vector3<f64> {
    if cfg.theta < crate::kinematics::THETA_EPS {
        return Vector3::z();
    }
    let a = cfg.theta * s / geom.length;
    let (sphi, cphi) = cfg.phi.sin_cos();
    // Rz(phi) * (sin a, 0, cos a)
    Vector3::new(cphi * a.sin(), sphi * a.sin(), a.cos())
}

/// Full dataset: cartesian product of sampled configurations and workspace
/// points with brute-force target distances, config-major order.
pub fn generate_dataset(geom: &LinkGeometry, spec: &DatasetSpec) -> Vec<TrainingSample> {
    let mut rng = stream(spec.seed, &[0x11]);
    let configs = sample_configurations(geom, spec.n_configs, &mut rng);
    let points = sample_workspace_points(spec);
    configs
        .par_iter()
        .flat_map_iter(|cfg| {
            let surface = surface_points(cfg, geom, spec.n_surface_axial, spec.n_surface_circ);
            points.iter().map(move |p| TrainingSample {
                theta: cfg.theta,
                phi: cfg.phi,
                p: [p.x, p.y, p.z],
                d: min_distance_to_points(p, &surface.points),
            })
        })
        .collect()
}

/// Error metrics between predicted and target distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub moe: f64,
}

/// MAE, RMSE, and mean overestimation error (mean of `max(0, pred - d)`).
pub fn compute_error_metrics(predictions: &[f64], targets: &[f64]) -> Result<ErrorMetrics> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput("error metrics need at least one pair"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::DimensionMismatch { expected: targets.len(), got: predictions.len() });
    }
    let n = predictions.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut over = 0.0;
    for (pred, target) in predictions.iter().zip(targets) {
        let e = pred - target;
        abs += e.abs();
        sq += e * e;
        over += e.max(0.0);
    }
    Ok(ErrorMetrics { mae: abs / n, rmse: (sq / n).sqrt(), moe: over / n })
}

/// Dataset file header: the spec that produced the samples.
#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub spec: DatasetSpec,
    pub geometry: LinkGeometry,
}

/// Write a dataset as JSON lines: header object first, one sample per line.
pub fn write_dataset<P: AsRef<Path>>(
    path: P,
    header: &DatasetHeader,
    samples: &[TrainingSample],
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a JSONL dataset produced by [`write_dataset`].
pub fn read_dataset<P: AsRef<Path>>(path: P) -> Result<(DatasetHeader, Vec<TrainingSample>)> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or(Error::EmptyInput("dataset file has no header line"))??;
    let header: DatasetHeader = serde_json::from_str(&header_line)?;
    let mut samples = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(serde_json::from_str(&line)?);
    }
    Ok((header, samples))
}

/// Loose upper bound on the surface sample spacing used by the brute-force
/// targets; the brute-force overestimate gap is below this by construction.
pub fn max_sample_spacing(geom: &LinkGeometry, n_axial: usize, n_circ: usize) -> f64 {
    // outermost fiber stretches by at most (1 + r theta / L) <= 1 + pi r / L
    let axial = geom.length / (n_axial - 1) as f64
        * (1.0 + std::f64::consts::PI * geom.radius / geom.length);
    let circ = 2.0 * std::f64::consts::PI * geom.radius / n_circ as f64;
    let cap = geom.radius / 4.0;
    axial.max(circ).max(cap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;
    use std::f64::consts::PI;

    fn geom() -> LinkGeometry {
        LinkGeometry { length: 2.0, radius: 0.2, l_min: 1.6, l_max: 2.4 }
    }

    fn spec(n_configs: usize, n_workspace: usize, seed: u64) -> DatasetSpec {
        DatasetSpec {
            n_configs,
            n_workspace,
            n_surface_axial: 40,
            n_surface_circ: 40,
            bounds: default_bounds(),
            seed,
        }
    }

    /// RngCore stub returning a constant word: all uniform draws coincide.
    struct ConstRng;
    impl RngCore for ConstRng {
        fn next_u32(&mut self) -> u32 {
            0x8000_0000
        }
        fn next_u64(&mut self) -> u64 {
            0x8000_0000_0000_0000
        }
        fn fill_bytes(&mut self, dest: &mut [u8]) {
            dest.fill(0x80);
        }
        fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
            self.fill_bytes(dest);
            Ok(())
        }
    }

    #[test]
    fn identical_chamber_draws_give_straight_config() {
        let cfgs = sample_configurations(&geom(), 1, &mut ConstRng);
        assert_eq!(cfgs[0].theta, 0.0);
        assert_eq!(cfgs[0].phi, 0.0);
    }

    #[test]
    fn sampled_thetas_in_range_and_bounded() {
        let mut rng = stream(3, &[]);
        let cfgs = sample_configurations(&geom(), 10_000, &mut rng);
        // brute-force max of the PCC formula over the box corners: 8/3
        let corner_max: f64 = {
            let mut best: f64 = 0.0;
            for l1 in [1.6, 2.4] {
                for l2 in [1.6, 2.4] {
                    for l3 in [1.6, 2.4] {
                        best = best.max(arc_lengths_to_config([l1, l2, l3], &geom()).theta);
                    }
                }
            }
            best
        };
        assert!((corner_max - 8.0 / 3.0).abs() < 1e-12);
        for c in &cfgs {
            assert!((0.0..=PI).contains(&c.theta));
            assert!(c.theta <= corner_max.min(PI) + 1e-12);
        }
    }

    #[test]
    fn workspace_grid_when_cube() {
        let unit = DatasetSpec {
            n_configs: 1,
            n_workspace: 8,
            n_surface_axial: 2,
            n_surface_circ: 3,
            bounds: Aabb { min: [0.0; 3], max: [1.0; 3] },
            seed: 0,
        };
        let pts = sample_workspace_points(&unit);
        assert_eq!(pts.len(), 8);
        for p in &pts {
            for a in 0..3 {
                assert!(p[a] == 0.25 || p[a] == 0.75);
            }
        }
        // spacing = edge / cbrt(n)
        let xs: Vec<f64> = pts.iter().map(|p| p.x).collect();
        assert!((xs.iter().cloned().fold(f64::INFINITY, f64::min) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn workspace_points_inside_box() {
        let s = spec(1, 100, 5);
        for p in sample_workspace_points(&s) {
            assert!(s.bounds.contains(&p));
        }
    }

    #[test]
    fn brute_force_examples() {
        let geom = geom();
        let straight = LinkConfig::straight();
        let bound = max_sample_spacing(&geom, 40, 40);

        let d = brute_force_distance(&Vector3::new(1.0, 0.0, 1.0), &straight, &geom, 40, 40);
        assert!((d - 0.8).abs() <= bound, "cylinder distance {d}");

        let d = brute_force_distance(&Vector3::new(0.0, 0.0, 3.0), &straight, &geom, 40, 40);
        assert!((d - 1.0).abs() <= bound, "cap distance {d}");

        // point on a surface sample -> zero
        let s = surface_points(&straight, &geom, 40, 40);
        let d = brute_force_distance(&s.points[7], &straight, &geom, 40, 40);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn analytic_examples() {
        let geom = geom();
        let straight = LinkConfig::straight();
        let d = analytic_link_distance(&Vector3::new(1.0, 0.0, 1.0), &straight, &geom);
        assert!((d - 0.8).abs() < 1e-9);
        // on-axis midpoint: lateral region, distance r
        let d = analytic_link_distance(&Vector3::new(0.0, 0.0, 1.0), &straight, &geom);
        assert!((d - geom.radius).abs() < 1e-9);
        let d = analytic_link_distance(&Vector3::new(0.0, 0.0, 3.0), &straight, &geom);
        assert!((d - 1.0).abs() < 1e-9);
    }

    #[test]
    fn oracle_cross_check_quarter_bend() {
        let geom = geom();
        let cfg = LinkConfig { theta: PI / 2.0, phi: 0.4 };
        let mut rng = stream(11, &[]);
        for _ in 0..100 {
            let p = Vector3::new(
                rng.gen_range(-2.4..2.4),
                rng.gen_range(-2.4..2.4),
                rng.gen_range(-0.4..2.8),
            );
            let brute = brute_force_distance(&p, &cfg, &geom, 200, 200);
            let analytic = analytic_link_distance(&p, &cfg, &geom);
            assert!((brute - analytic).abs() <= 2e-3, "brute {brute} analytic {analytic}");
        }
    }

    #[test]
    fn brute_force_never_underestimates() {
        let geom = geom();
        let mut rng = stream(13, &[]);
        let bound = 2.0 * max_sample_spacing(&geom, 40, 40);
        for _ in 0..1000 {
            let cfg = sample_configurations(&geom, 1, &mut rng)[0];
            let p = Vector3::new(
                rng.gen_range(-2.4..2.4),
                rng.gen_range(-2.4..2.4),
                rng.gen_range(-0.4..2.8),
            );
            let brute = brute_force_distance(&p, &cfg, &geom, 40, 40);
            let analytic = analytic_link_distance(&p, &cfg, &geom);
            assert!(brute >= analytic - 1e-9, "brute {brute} < analytic {analytic}");
            assert!(brute - analytic <= bound, "gap {} > {bound}", brute - analytic);
        }
    }

    #[test]
    fn dataset_shape_and_determinism() {
        let geom = geom();
        let s = spec(2, 8, 42);
        let a = generate_dataset(&geom, &s);
        assert_eq!(a.len(), 2 * 8);
        assert!(a.iter().all(|t| t.d >= 0.0));
        let b = generate_dataset(&geom, &s);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.theta.to_bits(), y.theta.to_bits());
            assert_eq!(x.d.to_bits(), y.d.to_bits());
        }
    }

    #[test]
    fn single_sample_dataset_matches_oracle() {
        let geom = geom();
        let s = DatasetSpec {
            n_configs: 1,
            n_workspace: 1,
            n_surface_axial: 40,
            n_surface_circ: 40,
            bounds: Aabb { min: [1.0, 0.0, 1.0], max: [1.0, 0.0, 1.0] },
            seed: 9,
        };
        let data = generate_dataset(&geom, &s);
        assert_eq!(data.len(), 1);
        // the sampled config is near-random but its distance target must be
        // consistent with the analytic oracle at the same config
        let d = analytic_link_distance(&data[0].point(), &data[0].config(), &geom);
        assert!((data[0].d - d).abs() <= 2.0 * max_sample_spacing(&geom, 40, 40));
    }

    #[test]
    fn metrics_examples() {
        let m = compute_error_metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((m.mae, m.rmse, m.moe), (0.0, 0.0, 0.0));

        let m = compute_error_metrics(&[1.1, 0.9], &[1.0, 1.0]).unwrap();
        assert!((m.mae - 0.1).abs() < 1e-12);
        assert!((m.rmse - 0.1).abs() < 1e-12);
        assert!((m.moe - 0.05).abs() < 1e-12);

        let m = compute_error_metrics(&[0.5, 0.8], &[1.0, 1.0]).unwrap();
        assert_eq!(m.moe, 0.0);

        assert!(compute_error_metrics(&[1.0], &[1.0, 2.0]).is_err());
        assert!(compute_error_metrics(&[], &[]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn moe_le_mae_le_rmse(pairs in proptest::collection::vec((0.0..3.0f64, 0.0..3.0f64), 1..50)) {
            let preds: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let targets: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let m = compute_error_metrics(&preds, &targets).unwrap();
            proptest::prop_assert!(m.moe <= m.mae + 1e-15);
            proptest::prop_assert!(m.rmse >= m.mae - 1e-15);
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let geom = geom();
        let s = spec(1, 8, 7);
        let data = generate_dataset(&geom, &s);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let header = DatasetHeader { spec: s, geometry: geom };
        write_dataset(&path, &header, &data).unwrap();
        let (h2, data2) = read_dataset(&path).unwrap();
        assert_eq!(h2.geometry, geom);
        assert_eq!(data.len(), data2.len());
        for (a, b) in data.iter().zip(&data2) {
            assert_eq!(a.d.to_bits(), b.d.to_bits());
            assert_eq!(a.theta.to_bits(), b.theta.to_bits());
        }
    }
}
