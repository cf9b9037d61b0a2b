//! Scenario files, stage orchestration and on-disk artifacts.
//!
//! Output layout under `out/`:
//!
//! ```text
//! kinematic/{records.csv, grid.json, summary.json}
//! identify/{joint1_step.csv .. joint4_step.csv, fir.json, summary.json}
//! dynamic/{trajectory.csv, joint1.csv .. joint4.csv, summary.json}
//! summary.json
//! plots/*.svg
//! ```
//!
//! Each stage can run alone; downstream stages read upstream JSON artifacts
//! and fail with [`Error::MissingArtifact`] when one is absent.

mod artifacts;
pub mod plot;
mod scenario;

pub use artifacts::OutputFormat;
pub use scenario::{IdentificationConfig, JointThresholds, QFilterSpec, Scenario, TruthSpec};

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamic::{
    build_learning_filter, convergence_condition, run_dynamic_ilc, tracking_metrics, JointIlcRun, JointLoop,
    JointVerdict,
};
use crate::kinematic::{max_contraction, run_kinematic_ilc, CorrectionGrid, KinematicVerdict};
use crate::measurement::SimulatedImaging;
use crate::plant::{default_crop, identify_fir, measure_step_response, FirModel, JointUnits};
use crate::robot::RobotModel;
use crate::trajectory::{generate_profile, InterpolationTable};
use crate::{rng, Error, Result, UM};

use artifacts::{read_json, read_text, write_json, write_rows};

/// Stream indices for [`rng::derive_seed`].
const SEED_TRUTH: u64 = 0;
const SEED_KINEMATIC: u64 = 1;
const SEED_IDENTIFY: u64 = 2;
const SEED_DYNAMIC: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicSummary {
    pub verdict: KinematicVerdict,
    pub iterations: usize,
    pub rms_um: Vec<f64>,
    pub max_um: Vec<f64>,
    /// Worst `‖I - α J_nom⁻¹ J_true‖` over the initial grid.
    pub contraction: f64,
    pub node_count: usize,
    pub true_model: RobotModel,
}

impl KinematicSummary {
    pub fn converged(&self) -> bool {
        self.verdict == KinematicVerdict::Converged
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirSummary {
    pub joint: usize,
    pub crop_length: usize,
    pub settled: bool,
    pub dc_gain: f64,
    pub step_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifySummary {
    pub joints: Vec<FirSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSummary {
    pub joint: usize,
    pub name: String,
    pub units: JointUnits,
    pub verdict: JointVerdict,
    /// Convergence threshold in SI units.
    pub threshold: f64,
    /// Max |e| per iteration, SI units.
    pub max_error: Vec<f64>,
    pub rms_error: Vec<f64>,
    pub path_max_error: Vec<f64>,
    /// Max |e| per iteration in degrees (revolute) or micrometers (prismatic).
    pub max_error_display: Vec<f64>,
    pub display_unit: String,
    pub improvement: f64,
    /// `max_ω |Q|·|1 - F H|` evaluated with the true plant.
    pub convergence_condition: f64,
    pub final_saturation_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TooltipSummary {
    pub trajectory_max_um: [f64; 2],
    pub trajectory_rms_um: [f64; 2],
    pub path_max_um: [f64; 2],
    pub path_rms_um: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicSummary {
    pub joints: Vec<JointSummary>,
    /// First and final iteration, evaluated through the true robot.
    pub tooltip: TooltipSummary,
    pub samples: usize,
    pub warnings: Vec<String>,
}

impl DynamicSummary {
    pub fn succeeded(&self) -> bool {
        self.joints.iter().all(|j| j.verdict.is_success())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub scenario: String,
    pub seed: u64,
    pub kinematic: KinematicSummary,
    pub identify: IdentifySummary,
    pub dynamic: DynamicSummary,
    pub success: bool,
}

/// The robots a scenario describes: nominal (controller's belief) and true.
pub fn build_robots(scenario: &Scenario) -> Result<(RobotModel, RobotModel)> {
    let nominal = scenario.nominal_robot()?;
    let truth = scenario
        .truth
        .build(&nominal, rng::derive_seed(scenario.seed, &[SEED_TRUTH]))?;
    truth.validate()?;
    Ok((nominal, truth))
}

fn stage_dir(out: &Path, stage: &str) -> Result<PathBuf> {
    let dir = out.join(stage);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

#[derive(Serialize)]
struct RecordRow {
    iteration: usize,
    rotation_deg: f64,
    insertion_mm: f64,
    q1: f64,
    q2: f64,
    q3: f64,
    q4: f64,
    x: f64,
    y: f64,
    z: f64,
    ex: f64,
    ey: f64,
    ez: f64,
    error_um: f64,
}

/// Kinematic learning over the calibration grid.
pub fn run_kinematic_stage(scenario: &Scenario, out: &Path, format: OutputFormat) -> Result<KinematicSummary> {
    let inner = || -> Result<KinematicSummary> {
        let (nominal, truth) = build_robots(scenario)?;
        scenario.registration.validate(1e-9)?;
        let source = SimulatedImaging {
            true_model: truth.clone(),
            registration: scenario.registration.clone(),
            noise: scenario.noise,
        };
        let mut cfg = scenario.kinematic.clone();
        cfg.seed = rng::derive_seed(scenario.seed, &[SEED_KINEMATIC]);
        let contraction = max_contraction(&nominal, &truth, &scenario.grid, &cfg)?;
        if contraction >= 1.0 {
            log::warn!("kinematic contraction {contraction:.3} >= 1; learning may not converge");
        }
        let run = run_kinematic_ilc(&nominal, &source, &scenario.grid, &cfg)?;

        let dir = stage_dir(out, "kinematic")?;
        let g = &scenario.grid;
        let rows = run.records.iter().flat_map(|r| {
            r.nodes.iter().map(move |n| RecordRow {
                iteration: r.iteration,
                rotation_deg: g.rotation_deg(n.node.rotation),
                insertion_mm: g.insertion_mm(n.node.insertion),
                q1: n.q.q1,
                q2: n.q.q2,
                q3: n.q.q3,
                q4: n.q.q4,
                x: n.measured.x,
                y: n.measured.y,
                z: n.measured.z,
                ex: n.error.x,
                ey: n.error.y,
                ez: n.error.z,
                error_um: n.error.norm() * UM,
            })
        });
        write_rows(&dir, "records", format, rows)?;
        write_json(&dir.join("grid.json"), &run.grid)?;
        let summary = KinematicSummary {
            verdict: run.verdict,
            iterations: run.records.len(),
            rms_um: run.records.iter().map(|r| r.rms * UM).collect(),
            max_um: run.records.iter().map(|r| r.max * UM).collect(),
            contraction,
            node_count: g.node_count()?,
            true_model: truth,
        };
        write_json(&dir.join("summary.json"), &summary)?;
        Ok(summary)
    };
    inner().map_err(|e| e.in_stage("kinematic"))
}

#[derive(Serialize)]
struct StepRow {
    k: usize,
    t: f64,
    g: f64,
    h: f64,
}

/// Step-response identification of every joint plant.
pub fn run_identify_stage(scenario: &Scenario, out: &Path, format: OutputFormat) -> Result<IdentifySummary> {
    let inner = || -> Result<IdentifySummary> {
        let plants = scenario.plants()?;
        let cfg = &scenario.identification;
        let dir = stage_dir(out, "identify")?;
        let mut firs = Vec::with_capacity(4);
        let mut joints = Vec::with_capacity(4);
        for (i, plant) in plants.iter().enumerate() {
            let seed = rng::derive_seed(scenario.seed, &[SEED_IDENTIFY, i as u64]);
            let step = measure_step_response(plant, cfg.step_amplitude[i], cfg.duration, seed)
                .map_err(|e| Error::IdentificationInvalid(format!("joint {}: {e}", i + 1)))?;
            let crop = cfg.crop.unwrap_or_else(|| default_crop(&step.g));
            let fir = identify_fir(&step, crop, cfg.window)?;
            let rows = step.g.iter().enumerate().map(|(k, g)| StepRow {
                k,
                t: k as f64 * step.sample_time,
                g: *g,
                h: fir.h.get(k).copied().unwrap_or(0.0),
            });
            write_rows(&dir, &format!("joint{}_step", i + 1), format, rows)?;
            joints.push(FirSummary {
                joint: i + 1,
                crop_length: fir.crop_length,
                settled: fir.settled,
                dc_gain: fir.dc_gain(),
                step_amplitude: cfg.step_amplitude[i],
            });
            firs.push(fir);
        }
        write_json(&dir.join("fir.json"), &firs)?;
        let summary = IdentifySummary { joints };
        write_json(&dir.join("summary.json"), &summary)?;
        Ok(summary)
    };
    inner().map_err(|e| e.in_stage("identify"))
}

fn display(units: JointUnits, v: f64) -> f64 {
    match units {
        JointUnits::Radians => v.to_degrees(),
        JointUnits::Meters => v * UM,
    }
}

fn display_unit(units: JointUnits) -> &'static str {
    match units {
        JointUnits::Radians => "deg",
        JointUnits::Meters => "um",
    }
}

/// Dynamic learning along the interpolated rotation profile.
///
/// Reads `kinematic/grid.json` and `identify/fir.json`.
pub fn run_dynamic_stage(scenario: &Scenario, out: &Path, format: OutputFormat) -> Result<DynamicSummary> {
    let inner = || -> Result<DynamicSummary> {
        let grid = CorrectionGrid::from_json(&read_text(&out.join("kinematic").join("grid.json"))?)?;
        let firs: Vec<FirModel> = read_json(&out.join("identify").join("fir.json"))?;
        if firs.len() != 4 {
            return Err(Error::invalid(format!(
                "fir.json holds {} models, expected 4",
                firs.len()
            )));
        }
        let plants = scenario.plants()?;
        let (_, truth) = build_robots(scenario)?;

        let table = InterpolationTable::from_grid(&grid)?;
        let traj = generate_profile(&scenario.profile, &table)?;
        let mut warnings = traj.rate_warnings(&plants.each_ref().map(|p| p.saturation.rate.map(|r| r / p.sample_time)));
        for w in &warnings {
            log::warn!("{w}");
        }

        let filters = firs.iter().map(build_learning_filter).collect::<Result<Vec<_>>>()?;
        let q = scenario.q_filter.build()?;
        let thresholds = scenario.thresholds.to_si();
        let loops: Vec<JointLoop<'_>> = (0..4)
            .map(|i| JointLoop {
                plant: &plants[i],
                reference: &traj.joints[i],
                filter: &filters[i],
                q: &q,
                threshold: thresholds[i],
            })
            .collect();
        let mut cfg = scenario.dynamic.clone();
        cfg.seed = rng::derive_seed(scenario.seed, &[SEED_DYNAMIC]);
        let runs = run_dynamic_ilc(&loops, &cfg)?;

        let dir = stage_dir(out, "dynamic")?;
        write_trajectory(&dir, format, &traj)?;
        for run in &runs {
            write_joint_history(&dir, format, run, &traj.time, &traj.joints[run.joint_id - 1].samples)?;
        }

        let n_check = 2048;
        let mut joints = Vec::with_capacity(4);
        for (i, run) in runs.iter().enumerate() {
            let plant = &plants[i];
            let h_true = plant.impulse_response(firs[i].h.len().max(256) * 4);
            let rho = convergence_condition(&h_true, &filters[i].scaled(cfg.learning_gain), &q, n_check)?;
            let last = run.iterations.last().expect("at least one iteration");
            let final_saturation = last.report.saturation_flags.iter().filter(|s| **s).count() as f64
                / last.report.saturation_flags.len() as f64;
            if run.verdict != JointVerdict::Converged {
                warnings.push(format!("joint {}: {:?}", run.joint_id, run.verdict));
            }
            joints.push(JointSummary {
                joint: run.joint_id,
                name: plant.name.clone(),
                units: plant.units,
                verdict: run.verdict,
                threshold: run.threshold,
                max_error: run.max_history(),
                rms_error: run.iterations.iter().map(|it| it.report.trajectory_rms).collect(),
                path_max_error: run.iterations.iter().map(|it| it.report.path_max).collect(),
                max_error_display: run.max_history().iter().map(|v| display(plant.units, *v)).collect(),
                display_unit: display_unit(plant.units).into(),
                improvement: run.improvement(),
                convergence_condition: rho,
                final_saturation_fraction: final_saturation,
            });
        }

        let tooltip = tooltip_metrics(&truth, &runs, &traj)?;
        let summary = DynamicSummary {
            joints,
            tooltip,
            samples: traj.time.len(),
            warnings,
        };
        write_json(&dir.join("summary.json"), &summary)?;
        Ok(summary)
    };
    inner().map_err(|e| e.in_stage("dynamic"))
}

/// Tooltip errors of the first and final iteration, through the true robot.
fn tooltip_metrics(
    truth: &RobotModel,
    runs: &[JointIlcRun],
    traj: &crate::trajectory::GeneratedTrajectory,
) -> Result<TooltipSummary> {
    let n = traj.time.len();
    let reference: Vec<Vector3<f64>> = (0..n)
        .map(|k| truth.forward_kinematics(&traj.joint_vector(k)))
        .collect::<Result<_>>()?;
    let actual = |pick: fn(&JointIlcRun) -> &crate::dynamic::JointIteration| -> Result<Vec<Vector3<f64>>> {
        (0..n)
            .map(|k| {
                let q = crate::robot::JointVector::from_array([0, 1, 2, 3].map(|j| pick(&runs[j]).output[k]));
                truth.forward_kinematics(&q)
            })
            .collect()
    };
    let first = tracking_metrics(&reference, &actual(|r| r.iterations.first().expect("non-empty"))?, None)?;
    let last = tracking_metrics(&reference, &actual(|r| r.iterations.last().expect("non-empty"))?, None)?;
    Ok(TooltipSummary {
        trajectory_max_um: [first.trajectory_max * UM, last.trajectory_max * UM],
        trajectory_rms_um: [first.trajectory_rms * UM, last.trajectory_rms * UM],
        path_max_um: [first.path_max * UM, last.path_max * UM],
        path_rms_um: [first.path_rms * UM, last.path_rms * UM],
    })
}

#[derive(Serialize)]
struct TrajectoryRow {
    t: f64,
    rotation_deg: f64,
    insertion_mm: f64,
    q1: f64,
    q2: f64,
    q3: f64,
    q4: f64,
}

fn write_trajectory(dir: &Path, format: OutputFormat, traj: &crate::trajectory::GeneratedTrajectory) -> Result<()> {
    let rows = (0..traj.time.len()).map(|k| {
        let q = traj.joint_vector(k);
        TrajectoryRow {
            t: traj.time[k],
            rotation_deg: traj.rotation_deg[k],
            insertion_mm: traj.insertion_mm[k],
            q1: q.q1,
            q2: q.q2,
            q3: q.q3,
            q4: q.q4,
        }
    });
    write_rows(dir, "trajectory", format, rows)
}

#[derive(Serialize)]
struct JointRow {
    iteration: usize,
    k: usize,
    t: f64,
    reference: f64,
    input: f64,
    output: f64,
    error: f64,
    saturated: bool,
}

/// Long format: one row per (iteration, sample).
fn write_joint_history(
    dir: &Path,
    format: OutputFormat,
    run: &JointIlcRun,
    time: &[f64],
    reference: &[f64],
) -> Result<()> {
    let rows = run.iterations.iter().flat_map(|it| {
        (0..time.len()).map(move |k| JointRow {
            iteration: it.iteration,
            k,
            t: time[k],
            reference: reference[k],
            input: it.input[k],
            output: it.output[k],
            error: it.error[k],
            saturated: it.report.saturation_flags[k],
        })
    });
    write_rows(dir, &format!("joint{}", run.joint_id), format, rows)
}

/// Runs all three stages and writes `out/summary.json`.
pub fn run_pipeline(scenario: &Scenario, out: &Path, format: OutputFormat) -> Result<PipelineSummary> {
    std::fs::create_dir_all(out)?;
    let kinematic = run_kinematic_stage(scenario, out, format)?;
    let identify = run_identify_stage(scenario, out, format)?;
    let dynamic = run_dynamic_stage(scenario, out, format)?;
    let summary = PipelineSummary {
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        success: kinematic.converged() && dynamic.succeeded(),
        kinematic,
        identify,
        dynamic,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn load_summary<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    read_json(path)
}
