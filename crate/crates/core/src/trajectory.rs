//! Continuous joint references from the learned correction grid.

use serde::{Deserialize, Serialize};

use crate::kinematic::{CorrectionGrid, GridSpec};
use crate::robot::JointVector;
use crate::{Error, Result};

/// Uniformly sampled reference or command for one joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTrajectory {
    pub joint_id: usize,
    pub samples: Vec<f64>,
    pub sample_time: f64,
}

impl JointTrajectory {
    pub fn new(joint_id: usize, samples: Vec<f64>, sample_time: f64) -> Self {
        Self {
            joint_id,
            samples,
            sample_time,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_time > 0.0) {
            return Err(Error::invalid("trajectory sample time must be positive"));
        }
        if !self.samples.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!(
                "joint {} trajectory has non-finite samples",
                self.joint_id
            )));
        }
        Ok(())
    }
}

/// q1..q3 at every grid node; q4 follows from the rotation angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationTable {
    pub grid: GridSpec,
    /// Storage order of [`GridSpec::nodes`].
    pub values: Vec<[f64; 3]>,
    /// q4 at rotation zero, radians.
    pub q4_offset: f64,
}

impl InterpolationTable {
    pub fn from_grid(grid: &CorrectionGrid) -> Result<Self> {
        let q4_offset = grid.joints.first().map_or(0.0, |q| q.q4);
        Self::new(
            grid.grid,
            grid.joints.iter().map(|q| [q.q1, q.q2, q.q3]).collect(),
            q4_offset,
        )
    }

    pub fn new(grid: GridSpec, values: Vec<[f64; 3]>, q4_offset: f64) -> Result<Self> {
        if values.len() != grid.node_count()? {
            return Err(Error::invalid(format!(
                "table has {} nodes, grid needs {}",
                values.len(),
                grid.node_count()?
            )));
        }
        if !values.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::invalid("table values must be finite"));
        }
        Ok(Self {
            grid,
            values,
            q4_offset,
        })
    }

    fn value(&self, rotation: usize, insertion: usize) -> [f64; 3] {
        let nr = self.grid.rotation_nodes().unwrap_or(1);
        self.values[insertion * nr + rotation]
    }
}

/// Cell index and fractional position for a coordinate on `n` nodes.
fn locate(x: f64, step: f64, n: usize) -> (usize, f64) {
    if n < 2 {
        return (0, 0.0);
    }
    let r = (x / step).clamp(0.0, (n - 1) as f64);
    let i = (r.floor() as usize).min(n - 2);
    (i, r - i as f64)
}

/// Bilinear blend of the four nodes around (rotation, insertion). No extrapolation.
pub fn interpolate(table: &InterpolationTable, rotation_deg: f64, insertion_mm: f64) -> Result<JointVector> {
    let g = &table.grid;
    let rot_eps = 1e-9 * g.rotation_range_deg.max(1.0);
    let ins_eps = 1e-9 * g.insertion_range_mm.max(1.0);
    if !(rotation_deg >= -rot_eps && rotation_deg <= g.rotation_range_deg + rot_eps)
        || !(insertion_mm >= -ins_eps && insertion_mm <= g.insertion_range_mm + ins_eps)
    {
        return Err(Error::invalid(format!(
            "query ({rotation_deg} deg, {insertion_mm} mm) outside calibrated grid [0, {}] x [0, {}]",
            g.rotation_range_deg, g.insertion_range_mm
        )));
    }
    let (ri, s) = locate(rotation_deg, g.rotation_step_deg, g.rotation_nodes()?);
    let (ii, t) = locate(insertion_mm, g.insertion_step_mm, g.insertion_nodes()?);
    let corner = |dr: usize, di: usize| {
        let nr = g.rotation_nodes().unwrap_or(1);
        let ni = g.insertion_nodes().unwrap_or(1);
        table.value((ri + dr).min(nr - 1), (ii + di).min(ni - 1))
    };
    let (v00, v10, v01, v11) = (corner(0, 0), corner(1, 0), corner(0, 1), corner(1, 1));
    let mut q = [0.0; 3];
    for k in 0..3 {
        q[k] = (1.0 - s) * (1.0 - t) * v00[k] + s * (1.0 - t) * v10[k] + (1.0 - s) * t * v01[k] + s * t * v11[k];
    }
    Ok(JointVector::new(
        q[0],
        q[1],
        q[2],
        table.q4_offset + rotation_deg.to_radians(),
    ))
}

/// Bidirectional tool rotation while inserting.
///
/// `rotation(t) = center - amplitude * cos(2π f t)`: the sweep starts at rest
/// at the low end of its range. `insertion(t)` ramps from `insertion_start_mm`
/// at `insertion_speed_mm_s` and holds at `insertion_depth_mm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionProfile {
    pub rotation_amplitude_deg: f64,
    pub rotation_frequency_hz: f64,
    /// Center of the sweep; mid-range of the grid when absent.
    pub rotation_center_deg: Option<f64>,
    pub insertion_speed_mm_s: f64,
    pub insertion_depth_mm: f64,
    pub insertion_start_mm: f64,
    pub sample_time: f64,
    /// Duration in rotation periods.
    pub cycles: f64,
}

impl Default for MotionProfile {
    fn default() -> Self {
        Self {
            rotation_amplitude_deg: 100.0,
            rotation_frequency_hz: 1.0,
            rotation_center_deg: None,
            insertion_speed_mm_s: 0.5,
            insertion_depth_mm: 2.0,
            insertion_start_mm: 0.0,
            sample_time: 1e-3,
            cycles: 4.0,
        }
    }
}

impl MotionProfile {
    pub fn peak_rotation_rate_deg_s(&self) -> f64 {
        self.rotation_amplitude_deg * std::f64::consts::TAU * self.rotation_frequency_hz
    }

    pub fn duration(&self) -> f64 {
        self.cycles / self.rotation_frequency_hz
    }

    pub fn sample_count(&self) -> usize {
        (self.duration() / self.sample_time).round() as usize + 1
    }

    pub fn rotation_at(&self, center: f64, t: f64) -> f64 {
        center - self.rotation_amplitude_deg * (std::f64::consts::TAU * self.rotation_frequency_hz * t).cos()
    }

    pub fn insertion_at(&self, t: f64) -> f64 {
        (self.insertion_start_mm + self.insertion_speed_mm_s * t).clamp(
            self.insertion_start_mm.min(self.insertion_depth_mm),
            self.insertion_depth_mm.max(self.insertion_start_mm),
        )
    }

    fn validate(&self, grid: &GridSpec) -> Result<f64> {
        if !(self.sample_time > 0.0) || !(self.rotation_frequency_hz > 0.0) || !(self.cycles > 0.0) {
            return Err(Error::invalid(
                "sample time, rotation frequency and cycles must be positive",
            ));
        }
        if !(self.rotation_amplitude_deg >= 0.0) || !(self.insertion_speed_mm_s >= 0.0) {
            return Err(Error::invalid(
                "rotation amplitude and insertion speed must be non-negative",
            ));
        }
        let center = self.rotation_center_deg.unwrap_or(grid.rotation_range_deg / 2.0);
        let (lo, hi) = (
            center - self.rotation_amplitude_deg,
            center + self.rotation_amplitude_deg,
        );
        let eps = 1e-9 * grid.rotation_range_deg.max(1.0);
        if lo < -eps || hi > grid.rotation_range_deg + eps {
            return Err(Error::invalid(format!(
                "rotation sweep [{lo}, {hi}] deg leaves the calibrated range [0, {}]",
                grid.rotation_range_deg
            )));
        }
        let ins = [self.insertion_start_mm, self.insertion_depth_mm];
        if ins.iter().any(|v| *v < 0.0 || *v > grid.insertion_range_mm + 1e-9) {
            return Err(Error::invalid(format!(
                "insertion {ins:?} mm leaves the calibrated range [0, {}]",
                grid.insertion_range_mm
            )));
        }
        Ok(center)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTrajectory {
    pub time: Vec<f64>,
    pub rotation_deg: Vec<f64>,
    pub insertion_mm: Vec<f64>,
    pub joints: [JointTrajectory; 4],
}

impl GeneratedTrajectory {
    pub fn joint_vector(&self, k: usize) -> JointVector {
        JointVector::new(
            self.joints[0].samples[k],
            self.joints[1].samples[k],
            self.joints[2].samples[k],
            self.joints[3].samples[k],
        )
    }

    /// Peak |Δq| / T per joint.
    pub fn peak_rates(&self) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (o, j) in out.iter_mut().zip(&self.joints) {
            *o = j.samples.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max) / j.sample_time;
        }
        out
    }

    /// Joints whose peak rate exceeds the given per-second limits.
    pub fn rate_warnings(&self, limits: &[Option<f64>; 4]) -> Vec<String> {
        self.peak_rates()
            .iter()
            .zip(limits)
            .enumerate()
            .filter_map(|(i, (rate, limit))| {
                limit
                    .filter(|l| rate > l)
                    .map(|l| format!("joint {} peak rate {rate:.4} exceeds limit {l:.4}", i + 1))
            })
            .collect()
    }
}

/// Samples the profile and interpolates joint references at every sample.
pub fn generate_profile(profile: &MotionProfile, table: &InterpolationTable) -> Result<GeneratedTrajectory> {
    let center = profile.validate(&table.grid)?;
    let n = profile.sample_count();
    let time: Vec<f64> = (0..n).map(|k| k as f64 * profile.sample_time).collect();
    let rotation_deg: Vec<f64> = time.iter().map(|t| profile.rotation_at(center, *t)).collect();
    let insertion_mm: Vec<f64> = time.iter().map(|t| profile.insertion_at(*t)).collect();
    let mut samples: [Vec<f64>; 4] = Default::default();
    for (rot, ins) in rotation_deg.iter().zip(&insertion_mm) {
        let q = interpolate(table, *rot, *ins)?.to_array();
        for (s, v) in samples.iter_mut().zip(q) {
            s.push(v);
        }
    }
    let joints = samples.map(|s| JointTrajectory::new(0, s, profile.sample_time));
    let mut joints = joints;
    for (i, j) in joints.iter_mut().enumerate() {
        j.joint_id = i + 1;
    }
    Ok(GeneratedTrajectory {
        time,
        rotation_deg,
        insertion_mm,
        joints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn affine_table(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> InterpolationTable {
        let grid = GridSpec::default();
        let values = grid
            .nodes()
            .unwrap()
            .iter()
            .map(|n| {
                let (r, i) = (grid.rotation_deg(n.rotation), grid.insertion_mm(n.insertion));
                [0, 1, 2].map(|k| a[k] + b[k] * r + c[k] * i)
            })
            .collect();
        InterpolationTable::new(grid, values, 0.0).unwrap()
    }

    fn bumpy_table() -> InterpolationTable {
        let grid = GridSpec::default();
        let values = (0..grid.node_count().unwrap())
            .map(|k| {
                let x = k as f64;
                [(x * 0.7).sin(), (x * 1.3).cos(), x * x * 1e-3]
            })
            .collect();
        InterpolationTable::new(grid, values, 0.25).unwrap()
    }

    #[test]
    fn nodes_are_reproduced_exactly() {
        let table = bumpy_table();
        let g = table.grid;
        for n in g.nodes().unwrap() {
            let q = interpolate(&table, g.rotation_deg(n.rotation), g.insertion_mm(n.insertion)).unwrap();
            assert_eq!([q.q1, q.q2, q.q3], table.value(n.rotation, n.insertion));
            assert_relative_eq!(q.q4, 0.25 + g.rotation_deg(n.rotation).to_radians());
        }
    }

    #[test]
    fn cell_center_is_corner_average() {
        let table = bumpy_table();
        let q = interpolate(&table, 35.0, 1.25).unwrap();
        let corners = [
            table.value(3, 2),
            table.value(4, 2),
            table.value(3, 3),
            table.value(4, 3),
        ];
        for k in 0..3 {
            let avg = corners.iter().map(|c| c[k]).sum::<f64>() / 4.0;
            assert_relative_eq!([q.q1, q.q2, q.q3][k], avg, epsilon = 1e-14);
        }
    }

    #[test]
    fn grid_lines_reduce_to_linear() {
        let table = bumpy_table();
        let q = interpolate(&table, 40.0, 0.8).unwrap();
        let (a, b) = (table.value(4, 1), table.value(4, 2));
        let t = (0.8 - 0.5) / 0.5;
        assert_relative_eq!(q.q1, a[0] + t * (b[0] - a[0]), epsilon = 1e-14);
    }

    #[test]
    fn out_of_bounds_queries_fail() {
        let table = bumpy_table();
        assert!(interpolate(&table, -1.0, 0.0).is_err());
        assert!(interpolate(&table, 201.0, 0.0).is_err());
        assert!(interpolate(&table, 100.0, 2.1).is_err());
        assert!(interpolate(&table, f64::NAN, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn affine_fields_are_reproduced(a0 in -1.0f64..1.0, b0 in -0.01f64..0.01, c0 in -1.0f64..1.0,
                                        rot in 0.0f64..=200.0, ins in 0.0f64..=2.0) {
            let table = affine_table([a0, 0.3, -0.2], [b0, -1e-3, 2e-4], [c0, 0.5, 1e-3]);
            let q = interpolate(&table, rot, ins).unwrap();
            let exact = [a0 + b0 * rot + c0 * ins, 0.3 - 1e-3 * rot + 0.5 * ins, -0.2 + 2e-4 * rot + 1e-3 * ins];
            for (got, want) in [q.q1, q.q2, q.q3].iter().zip(exact) {
                prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_amplitude_keeps_roll_constant() {
        let table = bumpy_table();
        let profile = MotionProfile {
            rotation_amplitude_deg: 0.0,
            ..Default::default()
        };
        let traj = generate_profile(&profile, &table).unwrap();
        let q4 = &traj.joints[3].samples;
        assert!(q4.iter().all(|v| *v == q4[0]));
        // q1 follows the rotation-100 column along insertion
        let k = 1500;
        let expected = interpolate(&table, 100.0, traj.insertion_mm[k]).unwrap();
        assert_eq!(traj.joints[0].samples[k], expected.q1);
    }

    #[test]
    fn fixed_depth_is_periodic() {
        let table = bumpy_table();
        let profile = MotionProfile {
            insertion_speed_mm_s: 0.0,
            insertion_start_mm: 1.0,
            ..Default::default()
        };
        let traj = generate_profile(&profile, &table).unwrap();
        let period = 1000;
        for j in 0..3 {
            let s = &traj.joints[j].samples;
            for k in 0..s.len() - period {
                assert!((s[k] - s[k + period]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn default_profile_is_in_bounds_with_expected_peak_rate() {
        let table = bumpy_table();
        let profile = MotionProfile::default();
        let traj = generate_profile(&profile, &table).unwrap();
        assert_eq!(traj.time.len(), 4001);
        assert!(traj.rotation_deg.iter().all(|r| (-1e-9..=200.0 + 1e-9).contains(r)));
        assert_relative_eq!(traj.rotation_deg[0], 0.0, epsilon = 1e-12);
        let analytic = profile.peak_rotation_rate_deg_s().to_radians();
        assert_relative_eq!(analytic, 100f64.to_radians() * std::f64::consts::TAU);
        let measured = traj.peak_rates()[3];
        assert!(
            (measured - analytic).abs() / analytic < 1e-4,
            "{measured} vs {analytic}"
        );
        // consecutive samples never move faster than the analytic bound
        assert!(measured <= analytic * (1.0 + 1e-12));
        assert!(traj.rate_warnings(&[None, None, None, Some(analytic * 0.5)]).len() == 1);
    }

    #[test]
    fn profiles_outside_the_grid_fail() {
        let table = bumpy_table();
        let wide = MotionProfile {
            rotation_amplitude_deg: 120.0,
            ..Default::default()
        };
        assert!(generate_profile(&wide, &table).is_err());
        let deep = MotionProfile {
            insertion_depth_mm: 3.0,
            ..Default::default()
        };
        assert!(generate_profile(&deep, &table).is_err());
    }
}
