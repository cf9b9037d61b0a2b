//! Tooltip extraction from a segmented tool point cloud.
//!
//! PCA gives an initial centerline, a cylinder is fitted by damped
//! Gauss-Newton, points far from the fitted surface (robust MAD rule) are
//! dropped, the cylinder is re-fitted, and the inlier farthest along the axis
//! is projected onto the centerline.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

/// Synthetic cannula description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudSpec {
    pub tip: Vector3<f64>,
    /// Direction from the shaft toward the tip.
    pub axis: Vector3<f64>,
    pub radius: f64,
    pub length: f64,
    pub n_points: usize,
    pub outlier_fraction: f64,
    /// Radial (surface-normal) noise, meters.
    pub noise_sigma: f64,
}

impl Default for CloudSpec {
    /// 300 µm cannula, 2 mm visible, 5 % outliers, 10 µm surface noise.
    fn default() -> Self {
        Self {
            tip: Vector3::zeros(),
            axis: Vector3::z(),
            radius: 150e-6,
            length: 2e-3,
            n_points: 2000,
            outlier_fraction: 0.05,
            noise_sigma: 10e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolPointCloud {
    pub points: Vec<Vector3<f64>>,
    /// True for injected outliers; the extractor never looks at this.
    pub outlier: Vec<bool>,
    pub ground_truth_tip: Vector3<f64>,
    pub ground_truth_axis: Vector3<f64>,
}

impl ToolPointCloud {
    pub fn outlier_count(&self) -> usize {
        self.outlier.iter().filter(|o| **o).count()
    }
}

/// Deterministic unit vectors `(u, v)` completing `axis` to a right-handed frame.
pub(crate) fn orthonormal_basis(axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = axis.normalize();
    let pick = if a.x.abs() <= a.y.abs() && a.x.abs() <= a.z.abs() {
        Vector3::x()
    } else if a.y.abs() <= a.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let u = (pick - a * a.dot(&pick)).normalize();
    let v = a.cross(&u);
    (u, v)
}

/// Samples the lateral surface of a cylinder that ends at `tip` and extends
/// along `-axis`, then appends uniformly placed outliers from the box that
/// bounds the shaft (twice the radius laterally, the shaft length axially).
pub fn generate_tool_cloud(spec: &CloudSpec, seed: u64) -> Result<ToolPointCloud> {
    if !(spec.radius > 0.0) || !(spec.length > 0.0) {
        return Err(Error::invalid("cloud radius and length must be positive"));
    }
    if !(0.0..=0.3).contains(&spec.outlier_fraction) {
        return Err(Error::invalid("outlier fraction must lie in [0, 0.3]"));
    }
    if !(spec.noise_sigma >= 0.0) || spec.axis.norm() < 1e-12 {
        return Err(Error::invalid("noise must be non-negative and axis non-zero"));
    }
    let axis = spec.axis.normalize();
    let (u, v) = orthonormal_basis(&axis);
    let n_out = (spec.n_points as f64 * spec.outlier_fraction).round() as usize;
    let n_surface = spec.n_points - n_out;
    let mut rng = rng::stream(seed);
    let radial = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;

    let mut points = Vec::with_capacity(spec.n_points);
    for _ in 0..n_surface {
        let t = rng.random::<f64>() * spec.length;
        let theta = rng.random::<f64>() * std::f64::consts::TAU;
        let r = spec.radius + radial.sample(&mut rng);
        points.push(spec.tip - axis * t + (u * theta.cos() + v * theta.sin()) * r);
    }
    let half = 2.0 * spec.radius;
    for _ in 0..n_out {
        let t = rng.random::<f64>() * spec.length;
        let x = rng.random_range(-half..half);
        let y = rng.random_range(-half..half);
        points.push(spec.tip - axis * t + u * x + v * y);
    }
    let mut outlier = vec![false; n_surface];
    outlier.resize(spec.n_points, true);
    Ok(ToolPointCloud {
        points,
        outlier,
        ground_truth_tip: spec.tip,
        ground_truth_axis: axis,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    pub min_points: usize,
    pub min_inliers: usize,
    /// Points with `|residual - median| > mad_factor * MAD` are removed.
    pub mad_factor: f64,
    /// Lower bound on the removal threshold, meters.
    pub mad_floor: f64,
    pub max_fit_iterations: usize,
    /// Approximate tool direction (toward the tip); resolves the sign of the
    /// fitted axis. Without it the end farther from the centroid wins.
    pub axis_hint: Option<Vector3<f64>>,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            min_points: 100,
            min_inliers: 50,
            mad_factor: 3.0,
            mad_floor: 1e-7,
            max_fit_iterations: 200,
            axis_hint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolEstimate {
    pub tip: Vector3<f64>,
    /// Unit axis oriented toward the tip.
    pub axis: Vector3<f64>,
    pub radius: f64,
    pub inliers: usize,
}

#[derive(Debug, Clone, Copy)]
struct Cylinder {
    /// A point on the axis.
    center: Vector3<f64>,
    axis: Vector3<f64>,
    radius: f64,
}

impl Cylinder {
    fn residual(&self, p: &Vector3<f64>) -> f64 {
        (p - self.center).cross(&self.axis).norm() - self.radius
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn principal_axis(points: &[Vector3<f64>]) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let cov = points.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p - centroid;
        acc + d * d.transpose()
    }) / n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l1 > 0.0) || l2 <= 1e-12 * l1 {
        return Err(Error::Segmentation(format!(
            "degenerate cloud (principal variances {l1:.3e}, {l2:.3e})"
        )));
    }
    Ok((centroid, eig.eigenvectors.column(order[0]).into_owned()))
}

/// Damped Gauss-Newton over (axis tilt 2, center shift 2, radius). Works in
/// coordinates scaled by the initial radius; the parametrisation is re-based
/// on the current estimate after every accepted step.
fn fit_cylinder(points: &[Vector3<f64>], init: Cylinder, max_iter: usize) -> Cylinder {
    let scale = init.radius.max(1e-12);
    let origin = init.center;
    let scaled: Vec<Vector3<f64>> = points.iter().map(|p| (p - origin) / scale).collect();
    let centroid = scaled.iter().sum::<Vector3<f64>>() / scaled.len() as f64;

    let mut cyl = Cylinder {
        center: Vector3::zeros(),
        axis: init.axis.normalize(),
        radius: 1.0,
    };
    let cost = |c: &Cylinder| scaled.iter().map(|p| c.residual(p).powi(2)).sum::<f64>();
    let apply = |c: &Cylinder, (u, v): (Vector3<f64>, Vector3<f64>), x: &[f64]| Cylinder {
        axis: (c.axis + u * x[0] + v * x[1]).normalize(),
        center: c.center + u * x[2] + v * x[3],
        radius: c.radius + x[4],
    };

    let mut current = cost(&cyl);
    let mut lambda = 1e-3;
    let h = 1e-7;
    for _ in 0..max_iter {
        let basis = orthonormal_basis(&cyl.axis);
        let n = scaled.len();
        let mut jac = DMatrix::<f64>::zeros(n, 5);
        let res = DVector::from_iterator(n, scaled.iter().map(|p| cyl.residual(p)));
        for k in 0..5 {
            let mut dx = [0.0; 5];
            dx[k] = h;
            let plus = apply(&cyl, basis, &dx);
            dx[k] = -h;
            let minus = apply(&cyl, basis, &dx);
            for (i, p) in scaled.iter().enumerate() {
                jac[(i, k)] = (plus.residual(p) - minus.residual(p)) / (2.0 * h);
            }
        }
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &res;
        let mut accepted = false;
        for _ in 0..30 {
            let mut damped = jtj.clone();
            for d in 0..5 {
                damped[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = damped.lu().solve(&(-&grad)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = apply(&cyl, basis, step.as_slice());
            let trial_cost = cost(&trial);
            if trial_cost <= current {
                let converged = step.norm() < 1e-13 || current - trial_cost <= 1e-30;
                cyl = trial;
                current = trial_cost;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if converged {
                    return unscale(cyl, centroid, origin, scale);
                }
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            break;
        }
    }
    unscale(cyl, centroid, origin, scale)
}

fn unscale(cyl: Cylinder, centroid: Vector3<f64>, origin: Vector3<f64>, scale: f64) -> Cylinder {
    // report the axis point closest to the centroid
    let c = cyl.center + cyl.axis * (centroid - cyl.center).dot(&cyl.axis);
    Cylinder {
        center: origin + c * scale,
        axis: cyl.axis,
        radius: cyl.radius * scale,
    }
}

/// Full extraction pipeline; see the module docs.
pub fn extract_tooltip(points: &[Vector3<f64>], config: &SegmentationConfig) -> Result<ToolEstimate> {
    if points.len() < config.min_points.max(5) {
        return Err(Error::Segmentation(format!(
            "{} points, need at least {}",
            points.len(),
            config.min_points
        )));
    }
    if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::Segmentation("cloud contains non-finite points".into()));
    }
    let (centroid, axis) = principal_axis(points)?;
    let radius0 = points.iter().map(|p| (p - centroid).cross(&axis).norm()).sum::<f64>() / points.len() as f64;
    let first = fit_cylinder(
        points,
        Cylinder {
            center: centroid,
            axis,
            radius: radius0,
        },
        config.max_fit_iterations,
    );

    let residuals: Vec<f64> = points.iter().map(|p| first.residual(p)).collect();
    let med = median(&mut residuals.clone());
    let mad = median(&mut residuals.iter().map(|r| (r - med).abs()).collect::<Vec<_>>());
    let threshold = (config.mad_factor * mad).max(config.mad_floor);
    let inliers: Vec<Vector3<f64>> = points
        .iter()
        .zip(&residuals)
        .filter(|(_, r)| (*r - med).abs() <= threshold)
        .map(|(p, _)| *p)
        .collect();
    if inliers.len() < config.min_inliers.max(5) {
        return Err(Error::Segmentation(format!(
            "only {} inliers after outlier removal",
            inliers.len()
        )));
    }
    let fit = fit_cylinder(&inliers, first, config.max_fit_iterations);

    let project = |p: &Vector3<f64>| (p - fit.center).dot(&fit.axis);
    let (lo, hi) = inliers
        .iter()
        .map(project)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s), hi.max(s)));
    let flip = match config.axis_hint {
        Some(hint) => fit.axis.dot(&hint) < 0.0,
        None => -lo > hi,
    };
    let (axis, extent) = if flip { (-fit.axis, -lo) } else { (fit.axis, hi) };
    Ok(ToolEstimate {
        tip: fit.center + axis * extent,
        axis,
        radius: fit.radius,
        inliers: inliers.len(),
    })
}

impl ToolPointCloud {
    pub fn extract(&self, config: &SegmentationConfig) -> Result<ToolEstimate> {
        extract_tooltip(&self.points, config)
    }
}

/// Writes `x,y,z` rows in meters.
pub fn write_cloud_csv<W: Write>(writer: W, points: &[Vector3<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["x", "y", "z"])?;
    for p in points {
        w.serialize((p.x, p.y, p.z))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cloud_csv<R: Read>(reader: R) -> Result<Vec<Vector3<f64>>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize::<(f64, f64, f64)>()
        .map(|row| row.map(|(x, y, z)| Vector3::new(x, y, z)).map_err(Error::from))
        .collect()
}
