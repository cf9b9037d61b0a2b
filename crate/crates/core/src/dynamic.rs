//! Joint-space learning loop: phase-inverting learning filter, zero-phase
//! Q-filter and tracking metrics.
//!
//! Per joint, `u_{i+1} = Q(u_i + F e_i)` where `F` is the time-reversed
//! identified impulse response. Applied offline over the whole trial, `F e`
//! lines up `e` with the plant delay so that `F·H` is real and non-negative.

use nalgebra::SVector;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::plant::{frequency_grid, poly_response, simulate_plant_from_rest, FirModel, JointPlant};
use crate::trajectory::JointTrajectory;
use crate::{rng, Error, Result};

/// `F(z) = H(z^{-1})`, stored as `f[m] = h[N-1-m]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningFilter {
    pub f: Vec<f64>,
    /// Samples by which the reversed filter is advanced when applied (`N - 1`).
    pub acausal_shift: usize,
}

impl LearningFilter {
    pub fn from_impulse_response(h: &[f64]) -> Result<Self> {
        if h.is_empty() || !h.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(
                "learning filter needs a finite, non-empty impulse response",
            ));
        }
        Ok(Self {
            f: h.iter().rev().copied().collect(),
            acausal_shift: h.len() - 1,
        })
    }

    /// The impulse response the filter was built from.
    pub fn impulse_response(&self) -> Vec<f64> {
        self.f.iter().rev().copied().collect()
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            f: self.f.iter().map(|v| v * gain).collect(),
            acausal_shift: self.acausal_shift,
        }
    }

    /// `(F e)[k] = Σ_j h[j] e[k+j]`, treating `e` past the end as zero.
    pub fn apply(&self, e: &[f64]) -> Vec<f64> {
        let h = self.impulse_response();
        (0..e.len())
            .map(|k| h.iter().zip(&e[k..]).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Frequency response including the acausal shift, i.e. `conj(H(e^{jω}))`.
    pub fn response(&self, omega: f64) -> Complex64 {
        poly_response(&self.f, omega) * Complex64::from_polar(1.0, omega * self.acausal_shift as f64)
    }
}

pub fn build_learning_filter(fir: &FirModel) -> Result<LearningFilter> {
    LearningFilter::from_impulse_response(&fir.h)
}

/// Linear-phase FIR low-pass, run forward and backward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QFilter {
    pub taps: Vec<f64>,
    /// Cutoff as a fraction of Nyquist, when designed.
    pub cutoff: Option<f64>,
}

impl Default for QFilter {
    fn default() -> Self {
        Self::lowpass(0.2, Self::nonnegative_taps(0.2)).expect("valid default design")
    }
}

impl QFilter {
    /// Hann-windowed sinc with unit DC gain. `taps` must be odd.
    pub fn lowpass(cutoff: f64, taps: usize) -> Result<Self> {
        if !(cutoff > 0.0 && cutoff <= 1.0) {
            return Err(Error::invalid(format!(
                "Q cutoff {cutoff} must be in (0, 1] of Nyquist"
            )));
        }
        if taps < 3 || taps.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "Q filter length {taps} must be odd and at least 3"
            )));
        }
        let m = (taps - 1) as f64;
        let mut h: Vec<f64> = (0..taps)
            .map(|n| {
                let k = n as f64 - m / 2.0;
                let sinc = if k == 0.0 {
                    cutoff
                } else {
                    (std::f64::consts::PI * cutoff * k).sin() / (std::f64::consts::PI * k)
                };
                let hann = 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / m).cos();
                sinc * hann
            })
            .collect();
        let sum: f64 = h.iter().sum();
        h.iter_mut().for_each(|v| *v /= sum);
        Ok(Self {
            taps: h,
            cutoff: Some(cutoff),
        })
    }

    /// Longest design whose taps all lie inside the sinc main lobe. Non-negative
    /// taps with unit sum keep `|Q(e^{jω})| <= 1` at every frequency; longer
    /// designs ripple above one in the passband.
    pub fn nonnegative_taps(cutoff: f64) -> usize {
        2 * (1.0 / cutoff).floor() as usize + 1
    }

    pub fn identity() -> Self {
        Self {
            taps: vec![1.0],
            cutoff: None,
        }
    }

    pub fn zero() -> Self {
        Self {
            taps: vec![0.0],
            cutoff: None,
        }
    }

    pub fn single_pass_response(&self, omega: f64) -> Complex64 {
        poly_response(&self.taps, omega)
    }

    /// Forward-backward response `|Q(e^{jω})|²`.
    pub fn zero_phase_response(&self, omega: f64) -> f64 {
        self.single_pass_response(omega).norm_sqr()
    }
}

fn fir_filter(taps: &[f64], x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|k| taps.iter().enumerate().take(k + 1).map(|(j, t)| t * x[k - j]).sum())
        .collect()
}

/// Forward-backward filtering with odd reflection padding at both ends.
pub fn apply_zero_phase(q: &QFilter, x: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    let m = q.taps.len();
    if m == 0 {
        return Err(Error::invalid("Q filter has no taps"));
    }
    if n <= m {
        return Err(Error::invalid(format!(
            "sequence of {n} samples is too short for a {m}-tap zero-phase filter"
        )));
    }
    let pad = (3 * (m - 1)).min(n - 1);
    let (first, last) = (x[0], x[n - 1]);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

    let mut y = fir_filter(&q.taps, &ext);
    y.reverse();
    let mut y = fir_filter(&q.taps, &y);
    y.reverse();
    Ok(y[pad..pad + n].to_vec())
}

/// `u_{i+1} = Q(u_i + F e_i)`.
pub fn ilc_update(u: &JointTrajectory, e: &[f64], f: &LearningFilter, q: &QFilter) -> Result<JointTrajectory> {
    if e.len() != u.len() {
        return Err(Error::invalid(format!(
            "error has {} samples, input has {}",
            e.len(),
            u.len()
        )));
    }
    let fe = f.apply(e);
    let raw: Vec<f64> = u.samples.iter().zip(&fe).map(|(a, b)| a + b).collect();
    let samples = apply_zero_phase(q, &raw)?;
    Ok(JointTrajectory::new(u.joint_id, samples, u.sample_time))
}

/// `max_ω |Q(ω)|·|1 - F(ω) H(ω)|` over `n` frequencies in `[0, π]`, with `Q`
/// the forward-backward response. Below one means monotone convergence in the
/// ∞-norm sense.
pub fn convergence_condition(h: &[f64], f: &LearningFilter, q: &QFilter, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid("need at least two frequencies"));
    }
    Ok(frequency_grid(n)
        .map(|w| q.zero_phase_response(w) * (Complex64::new(1.0, 0.0) - f.response(w) * poly_response(h, w)).norm())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    /// `‖reference(k) - actual(k)‖` per sample.
    pub trajectory_error: Vec<f64>,
    /// Distance from `actual(k)` to the reference polyline.
    pub path_error: Vec<f64>,
    pub trajectory_rms: f64,
    pub trajectory_max: f64,
    pub path_rms: f64,
    pub path_max: f64,
    pub saturation_flags: Vec<bool>,
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
    }
}

fn segment_distance<const D: usize>(p: &SVector<f64, D>, a: &SVector<f64, D>, b: &SVector<f64, D>) -> f64 {
    let d = b - a;
    let len2 = d.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&d) / len2).clamp(0.0, 1.0);
    (p - (a + d * t)).norm()
}

fn polyline_distance<const D: usize>(p: &SVector<f64, D>, path: &[SVector<f64, D>]) -> f64 {
    if path.len() == 1 {
        return (p - path[0]).norm();
    }
    path.windows(2)
        .map(|w| segment_distance(p, &w[0], &w[1]))
        .fold(f64::INFINITY, f64::min)
}

const BLOCK: usize = 32;

/// Reference polyline split into runs of segments, each with a bounding sphere.
struct BlockedPath<'a, const D: usize> {
    path: &'a [SVector<f64, D>],
    spheres: Vec<(SVector<f64, D>, f64)>,
}

impl<'a, const D: usize> BlockedPath<'a, D> {
    fn new(path: &'a [SVector<f64, D>]) -> Self {
        let spheres = (0..path.len().saturating_sub(1))
            .step_by(BLOCK)
            .map(|start| {
                let pts = &path[start..(start + BLOCK + 1).min(path.len())];
                let center = pts.iter().sum::<SVector<f64, D>>() / pts.len() as f64;
                let radius = pts.iter().map(|q| (q - center).norm()).fold(0.0, f64::max);
                (center, radius)
            })
            .collect();
        Self { path, spheres }
    }

    fn block(&self, b: usize) -> &'a [SVector<f64, D>] {
        let start = b * BLOCK;
        &self.path[start..(start + BLOCK + 1).min(self.path.len())]
    }

    /// Exact distance; blocks whose sphere cannot beat the best so far are skipped.
    /// `hint` is the block searched first.
    fn distance(&self, p: &SVector<f64, D>, hint: usize) -> f64 {
        if self.path.len() == 1 {
            return (p - self.path[0]).norm();
        }
        let hint = hint.min(self.spheres.len() - 1);
        let mut best = polyline_distance(p, self.block(hint));
        for (b, (center, radius)) in self.spheres.iter().enumerate() {
            if b != hint && (p - center).norm() - radius < best {
                best = best.min(polyline_distance(p, self.block(b)));
            }
        }
        best
    }
}

/// Trajectory and path errors of `actual` against `reference`.
pub fn tracking_metrics<const D: usize>(
    reference: &[SVector<f64, D>],
    actual: &[SVector<f64, D>],
    saturation_flags: Option<&[bool]>,
) -> Result<TrackingReport> {
    if reference.len() != actual.len() || reference.is_empty() {
        return Err(Error::invalid(format!(
            "reference ({}) and actual ({}) must be non-empty and equally long",
            reference.len(),
            actual.len()
        )));
    }
    let flags = match saturation_flags {
        Some(f) if f.len() != actual.len() => return Err(Error::invalid("saturation flags length mismatch")),
        Some(f) => f.to_vec(),
        None => vec![false; actual.len()],
    };
    let trajectory_error: Vec<f64> = reference.iter().zip(actual).map(|(r, a)| (r - a).norm()).collect();
    let path_error: Vec<f64> = if D == 1 {
        // a connected 1-D polyline covers exactly [min, max]
        let lo = reference.iter().map(|r| r[0]).fold(f64::INFINITY, f64::min);
        let hi = reference.iter().map(|r| r[0]).fold(f64::NEG_INFINITY, f64::max);
        actual.iter().map(|a| (lo - a[0]).max(a[0] - hi).max(0.0)).collect()
    } else {
        let blocked = BlockedPath::new(reference);
        actual
            .par_iter()
            .enumerate()
            .map(|(k, a)| blocked.distance(a, k / BLOCK))
            .collect()
    };
    Ok(TrackingReport {
        trajectory_rms: rms(&trajectory_error),
        trajectory_max: trajectory_error.iter().copied().fold(0.0, f64::max),
        path_rms: rms(&path_error),
        path_max: path_error.iter().copied().fold(0.0, f64::max),
        trajectory_error,
        path_error,
        saturation_flags: flags,
    })
}

pub fn joint_tracking_metrics(
    reference: &[f64],
    actual: &[f64],
    saturation_flags: Option<&[bool]>,
) -> Result<TrackingReport> {
    let wrap = |v: &[f64]| v.iter().map(|x| SVector::<f64, 1>::new(*x)).collect::<Vec<_>>();
    tracking_metrics(&wrap(reference), &wrap(actual), saturation_flags)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicConfig {
    pub iteration_cap: usize,
    /// Reduction of the max error that still counts as a success at the cap.
    pub min_improvement: f64,
    /// Fraction of saturated samples at which learning stops.
    pub saturation_limit: f64,
    /// Scale applied to the learning filter.
    pub learning_gain: f64,
    /// Relative rise of the max error that counts toward divergence. Two
    /// such rises in a row stop the loop; smaller wobbles at the error floor
    /// do not.
    pub divergence_tolerance: f64,
    pub seed: u64,
}

impl Default for DynamicConfig {
    fn default() -> Self {
        Self {
            iteration_cap: 6,
            min_improvement: 10.0,
            saturation_limit: 0.2,
            learning_gain: 1.0,
            divergence_tolerance: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointVerdict {
    Converged,
    /// Threshold missed, but the max error fell by at least `min_improvement`.
    Improved,
    NotConverged,
    SaturationLimited,
    Diverged,
}

impl JointVerdict {
    pub fn is_success(self) -> bool {
        matches!(self, Self::Converged | Self::Improved)
    }
}

/// Everything one joint loop needs.
#[derive(Debug, Clone, Copy)]
pub struct JointLoop<'a> {
    pub plant: &'a JointPlant,
    pub reference: &'a JointTrajectory,
    pub filter: &'a LearningFilter,
    pub q: &'a QFilter,
    /// Max |e| that counts as converged, in the joint's units.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointIteration {
    pub iteration: usize,
    pub input: Vec<f64>,
    pub output: Vec<f64>,
    /// Signed `reference - output`.
    pub error: Vec<f64>,
    pub report: TrackingReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointIlcRun {
    pub joint_id: usize,
    pub threshold: f64,
    pub iterations: Vec<JointIteration>,
    pub verdict: JointVerdict,
}

impl JointIlcRun {
    pub fn max_history(&self) -> Vec<f64> {
        self.iterations.iter().map(|i| i.report.trajectory_max).collect()
    }

    pub fn initial_max(&self) -> f64 {
        self.iterations.first().map_or(0.0, |i| i.report.trajectory_max)
    }

    pub fn final_max(&self) -> f64 {
        self.iterations.last().map_or(0.0, |i| i.report.trajectory_max)
    }

    pub fn improvement(&self) -> f64 {
        self.initial_max() / self.final_max()
    }
}

/// Runs the learning loop of one joint, starting from `u = reference`.
pub fn run_joint_ilc(setup: &JointLoop<'_>, cfg: &DynamicConfig) -> Result<JointIlcRun> {
    let reference = setup.reference;
    reference.validate()?;
    if reference.is_empty() {
        return Err(Error::invalid("empty reference"));
    }
    if cfg.iteration_cap == 0 {
        return Err(Error::invalid("iteration cap must be at least 1"));
    }
    if !(cfg.divergence_tolerance >= 0.0 && cfg.divergence_tolerance.is_finite()) {
        return Err(Error::invalid("divergence tolerance must be finite and non-negative"));
    }
    if (setup.plant.sample_time - reference.sample_time).abs() > 1e-12 * reference.sample_time {
        return Err(Error::invalid("plant and reference sample times differ"));
    }
    let filter = setup.filter.scaled(cfg.learning_gain);
    let rest = reference.samples[0];
    let mut u = reference.clone();
    let mut iterations: Vec<JointIteration> = Vec::new();
    let mut rises = 0;

    let verdict = loop {
        let iteration = iterations.len() + 1;
        let seed = rng::derive_seed(cfg.seed, &[reference.joint_id as u64, iteration as u64]);
        let out = simulate_plant_from_rest(setup.plant, &u.samples, rest, seed)?;
        let error: Vec<f64> = reference.samples.iter().zip(&out.y).map(|(r, y)| r - y).collect();
        if !error.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!(
                "joint {} error became non-finite",
                reference.joint_id
            )));
        }
        let report = joint_tracking_metrics(&reference.samples, &out.y, Some(&out.saturated))?;
        let max = report.trajectory_max;
        log::debug!("joint {} iteration {iteration}: max |e| {max:.3e}", reference.joint_id);
        if let Some(prev) = iterations.last() {
            rises = if max > prev.report.trajectory_max * (1.0 + cfg.divergence_tolerance) {
                rises + 1
            } else {
                0
            };
        }
        let saturation = out.saturation_fraction();
        iterations.push(JointIteration {
            iteration,
            input: u.samples.clone(),
            output: out.y,
            error,
            report,
        });

        if max < setup.threshold {
            break JointVerdict::Converged;
        }
        if saturation >= cfg.saturation_limit {
            log::warn!(
                "joint {} saturated on {:.0}% of samples",
                reference.joint_id,
                100.0 * saturation
            );
            break JointVerdict::SaturationLimited;
        }
        if rises >= 2 {
            break JointVerdict::Diverged;
        }
        if iteration >= cfg.iteration_cap {
            let first = iterations[0].report.trajectory_max;
            break if max * cfg.min_improvement <= first {
                JointVerdict::Improved
            } else {
                JointVerdict::NotConverged
            };
        }
        u = ilc_update(&u, &iterations[iteration - 1].error, &filter, setup.q)?;
    };

    Ok(JointIlcRun {
        joint_id: reference.joint_id,
        threshold: setup.threshold,
        iterations,
        verdict,
    })
}

/// Runs every joint loop independently (in parallel).
pub fn run_dynamic_ilc(loops: &[JointLoop<'_>], cfg: &DynamicConfig) -> Result<Vec<JointIlcRun>> {
    loops.par_iter().map(|l| run_joint_ilc(l, cfg)).collect()
}
