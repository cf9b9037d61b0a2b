//! Kinematic learning loop.
//!
//! For every node of a (tool rotation × insertion depth) grid the loop
//! measures the tooltip, compares it with the tooltip position at rotation
//! zero for the same depth, and moves q1..q3 so the tip stays put while q4
//! sweeps. Each outer iteration maps the measured error through the nominal
//! kinematics: the nominal tip is displaced by `alpha * e` and the nominal
//! inverse kinematics is solved for the new joint values.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::measurement::TooltipSource;
use crate::robot::{numerical_jacobian, Jacobian, JointVector, RobotModel, TaskPoint};
use crate::{rng, Error, Result};

/// Calibration grid over tool rotation and relative insertion depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rotation_range_deg: f64,
    pub rotation_step_deg: f64,
    pub insertion_range_mm: f64,
    pub insertion_step_mm: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            rotation_range_deg: 200.0,
            rotation_step_deg: 10.0,
            insertion_range_mm: 2.0,
            insertion_step_mm: 0.5,
        }
    }
}

fn whole_divisions(range: f64, step: f64, what: &str) -> Result<usize> {
    if !(range >= 0.0) || !(step > 0.0) {
        return Err(Error::invalid(format!("{what}: range must be >= 0 and step > 0")));
    }
    let n = range / step;
    if (n - n.round()).abs() > 1e-9 * n.max(1.0) {
        return Err(Error::invalid(format!(
            "{what}: step {step} does not divide range {range}"
        )));
    }
    Ok(n.round() as usize)
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        self.rotation_nodes()?;
        self.insertion_nodes()?;
        Ok(())
    }

    pub fn rotation_nodes(&self) -> Result<usize> {
        Ok(whole_divisions(self.rotation_range_deg, self.rotation_step_deg, "rotation grid")? + 1)
    }

    pub fn insertion_nodes(&self) -> Result<usize> {
        Ok(whole_divisions(self.insertion_range_mm, self.insertion_step_mm, "insertion grid")? + 1)
    }

    pub fn node_count(&self) -> Result<usize> {
        Ok(self.rotation_nodes()? * self.insertion_nodes()?)
    }

    pub fn rotation_deg(&self, index: usize) -> f64 {
        index as f64 * self.rotation_step_deg
    }

    pub fn insertion_mm(&self, index: usize) -> f64 {
        index as f64 * self.insertion_step_mm
    }

    /// Nodes in storage order: insertion-major, rotation-minor.
    pub fn nodes(&self) -> Result<Vec<NodeIndex>> {
        let (nr, ni) = (self.rotation_nodes()?, self.insertion_nodes()?);
        Ok((0..ni)
            .flat_map(|insertion| (0..nr).map(move |rotation| NodeIndex { rotation, insertion }))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeIndex {
    pub rotation: usize,
    pub insertion: usize,
}

/// `e = r* - r` at a node for one iteration, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskError {
    pub e: Vector3<f64>,
    pub node: NodeIndex,
    pub iteration: usize,
}

/// Reference minus measured. Errors larger than `sanity_bound` are treated as
/// a failed measurement rather than a real deviation.
pub fn compute_error(reference: &TaskPoint, measured: &TaskPoint, sanity_bound: f64) -> Result<Vector3<f64>> {
    if !reference.iter().chain(measured.iter()).all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite task point"));
    }
    let e = reference - measured;
    if e.norm() > sanity_bound {
        return Err(Error::MeasurementFailure {
            norm: e.norm(),
            bound: sanity_bound,
        });
    }
    Ok(e)
}

pub fn mean_point(points: &[TaskPoint]) -> TaskPoint {
    points.iter().sum::<TaskPoint>() / points.len() as f64
}

/// `L = alpha * pinv(J)` mapping task error to q1..q3 corrections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningGain {
    pub matrix: Matrix3<f64>,
    pub alpha: f64,
}

/// Pseudoinverse that drops singular values below `sigma_max / max_condition`.
/// Returns the inverse and the number of retained directions.
pub fn truncated_pinv(m: &Matrix3<f64>, max_condition: f64) -> (Matrix3<f64>, usize) {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sigma_max = svd.singular_values.max();
    let cutoff = sigma_max / max_condition;
    let mut inv = Matrix3::zeros();
    let mut rank = 0;
    for i in 0..3 {
        let s = svd.singular_values[i];
        if s > cutoff && s > 0.0 {
            rank += 1;
            inv += v_t.row(i).transpose() * u.column(i).transpose() / s;
        }
    }
    (inv, rank)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(())
}

impl LearningGain {
    pub fn from_jacobian(j: &Matrix3<f64>, alpha: f64, max_condition: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let (inv, rank) = truncated_pinv(j, max_condition);
        if rank == 0 {
            return Err(Error::SingularConfiguration("jacobian has no usable direction".into()));
        }
        if rank < 3 {
            log::warn!("jacobian truncated to rank {rank}; uncorrectable directions are ignored");
        }
        Ok(Self {
            matrix: inv * alpha,
            alpha,
        })
    }
}

pub fn build_gain(
    model: &RobotModel,
    q: &JointVector,
    alpha: f64,
    step: &[f64; 3],
    max_condition: f64,
) -> Result<LearningGain> {
    check_alpha(alpha)?;
    let j = numerical_jacobian(model, q, step)?;
    LearningGain::from_jacobian(&j.matrix, alpha, max_condition)
}

/// `δq = L e` for q1..q3.
pub fn joint_correction(gain: &LearningGain, e: &Vector3<f64>) -> Vector3<f64> {
    gain.matrix * e
}

/// `‖I - L J*‖₂`; values below one guarantee the outer loop contracts.
pub fn check_contraction(gain: &LearningGain, true_jacobian: &Jacobian) -> f64 {
    (Matrix3::identity() - gain.matrix * true_jacobian.matrix)
        .singular_values()
        .max()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IkOptions {
    /// Task-space tolerance, meters.
    pub tol: f64,
    pub max_iter: usize,
    pub step: Option<[f64; 3]>,
    pub max_condition: f64,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 50,
            step: None,
            max_condition: 1e6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkSolution {
    pub q: JointVector,
    pub iterations: usize,
    pub residual: f64,
}

/// Newton iteration on q1..q3 (q4 held) against the nominal kinematics.
pub fn solve_nominal_ik(
    model: &RobotModel,
    target: &TaskPoint,
    q_init: &JointVector,
    opts: &IkOptions,
) -> Result<IkSolution> {
    let step = opts.step.unwrap_or_else(|| model.default_jacobian_step());
    let mut q = *q_init;
    let mut residual = (target - model.forward_kinematics(&q)?).norm();
    for iterations in 0..=opts.max_iter {
        if residual <= opts.tol {
            return Ok(IkSolution {
                q,
                iterations,
                residual,
            });
        }
        if iterations == opts.max_iter {
            break;
        }
        let diverged = |_| Error::InnerLoopDivergence {
            iterations: iterations + 1,
            residual,
        };
        let gain = build_gain(model, &q, 1.0, &step, opts.max_condition).map_err(diverged)?;
        let e = target - model.forward_kinematics(&q)?;
        q = q.corrected(&joint_correction(&gain, &e));
        residual = (target - model.forward_kinematics(&q).map_err(diverged)?).norm();
    }
    Err(Error::InnerLoopDivergence {
        iterations: opts.max_iter,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StopCriteria {
    /// RMS error at or below which the loop has converged, meters.
    pub threshold: f64,
    /// RMS change between iterations at or below which the loop has stalled, meters.
    pub stall: f64,
    pub max_iterations: usize,
}

impl Default for StopCriteria {
    fn default() -> Self {
        Self {
            threshold: 30e-6,
            stall: 2e-6,
            max_iterations: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KinematicConfig {
    pub alpha: f64,
    /// Joint values at rotation 0 and relative insertion 0; the grid adds the
    /// node's rotation to q4 and its insertion to q3.
    pub base_pose: JointVector,
    /// Measurements averaged per node and iteration.
    pub averaging: usize,
    pub stop: StopCriteria,
    pub ik: IkOptions,
    /// Largest plausible tooltip error, meters.
    pub sanity_bound: f64,
    pub seed: u64,
}

impl Default for KinematicConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            base_pose: JointVector::new(0.0, 0.0, 0.003, 0.0),
            averaging: 1,
            stop: StopCriteria::default(),
            ik: IkOptions::default(),
            sanity_bound: 5e-3,
            seed: 0,
        }
    }
}

/// Commanded joints per node plus the per-depth reference tooltip positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionGrid {
    pub grid: GridSpec,
    /// Storage order of [`GridSpec::nodes`].
    pub joints: Vec<JointVector>,
    /// r*(depth), one per insertion node.
    pub references: Vec<TaskPoint>,
}

impl CorrectionGrid {
    pub fn initial(grid: GridSpec, base: &JointVector) -> Result<Self> {
        let joints = grid
            .nodes()?
            .into_iter()
            .map(|n| {
                base.with(2, base.q3 + grid.insertion_mm(n.insertion) * 1e-3)
                    .with(3, base.q4 + grid.rotation_deg(n.rotation).to_radians())
            })
            .collect();
        Ok(Self {
            grid,
            joints,
            references: Vec::new(),
        })
    }

    pub fn index(&self, node: NodeIndex) -> usize {
        let nr = self.grid.rotation_nodes().unwrap_or(1);
        node.insertion * nr + node.rotation
    }

    pub fn q(&self, node: NodeIndex) -> JointVector {
        self.joints[self.index(node)]
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: CorrectionGrid = serde_json::from_str(text)?;
        g.grid.validate()?;
        if g.joints.len() != g.grid.node_count()? {
            return Err(Error::invalid("correction grid is incomplete"));
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node: NodeIndex,
    pub q: JointVector,
    pub measured: TaskPoint,
    pub error: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// RMS of ‖e‖ over the non-reference nodes, meters.
    pub rms: f64,
    pub max: f64,
    pub nodes: Vec<NodeRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KinematicVerdict {
    Converged,
    Stalled,
    IterationCap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicRun {
    pub grid: CorrectionGrid,
    pub records: Vec<IterationRecord>,
    pub verdict: KinematicVerdict,
}

impl KinematicRun {
    pub fn rms_history(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.rms).collect()
    }

    pub fn final_rms(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.rms)
    }
}

fn measure(source: &dyn TooltipSource, q: &JointVector, cfg: &KinematicConfig, path: [u64; 2]) -> Result<TaskPoint> {
    let reps = cfg.averaging.max(1);
    let samples = (0..reps)
        .map(|rep| source.observe(q, rng::derive_seed(cfg.seed, &[path[0], path[1], rep as u64])))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_point(&samples))
}

/// Runs the outer learning loop until the stop criteria fire.
pub fn run_kinematic_ilc(
    nominal: &RobotModel,
    source: &dyn TooltipSource,
    grid: &GridSpec,
    cfg: &KinematicConfig,
) -> Result<KinematicRun> {
    grid.validate()?;
    check_alpha(cfg.alpha)?;
    let nodes = grid.nodes()?;
    let mut state = CorrectionGrid::initial(*grid, &cfg.base_pose)?;
    let mut records: Vec<IterationRecord> = Vec::new();

    for iteration in 1..=cfg.stop.max_iterations.max(1) {
        let measured: Vec<TaskPoint> = nodes
            .par_iter()
            .enumerate()
            .map(|(k, node)| measure(source, &state.q(*node), cfg, [iteration as u64, k as u64]))
            .collect::<Result<_>>()?;

        if iteration == 1 {
            state.references = nodes
                .iter()
                .zip(&measured)
                .filter(|(n, _)| n.rotation == 0)
                .map(|(_, p)| *p)
                .collect();
        }

        let mut node_records = Vec::with_capacity(nodes.len());
        let mut sum_sq = 0.0;
        let mut max: f64 = 0.0;
        let mut counted = 0usize;
        for (node, p) in nodes.iter().zip(&measured) {
            let reference = state.references[node.insertion];
            let (e, shown) = if node.rotation == 0 {
                (Vector3::zeros(), reference)
            } else {
                counted += 1;
                (compute_error(&reference, p, cfg.sanity_bound)?, *p)
            };
            sum_sq += e.norm_squared();
            max = max.max(e.norm());
            node_records.push(NodeRecord {
                node: *node,
                q: state.q(*node),
                measured: shown,
                error: e,
            });
        }
        let rms = if counted == 0 {
            0.0
        } else {
            (sum_sq / counted as f64).sqrt()
        };
        log::debug!("kinematic iteration {iteration}: rms {:.2} um", rms * 1e6);
        records.push(IterationRecord {
            iteration,
            rms,
            max,
            nodes: node_records,
        });

        let history: Vec<f64> = records.iter().map(|r| r.rms).collect();
        let verdict = if rms <= cfg.stop.threshold {
            Some(KinematicVerdict::Converged)
        } else if history.len() >= 2 && (history[history.len() - 2] - rms).abs() <= cfg.stop.stall {
            Some(KinematicVerdict::Stalled)
        } else if history.len() >= 3 && history.windows(2).rev().take(2).all(|w| w[1] > w[0]) {
            return Err(Error::KinematicDivergence {
                iteration,
                rms_history: history,
            });
        } else if iteration == cfg.stop.max_iterations.max(1) {
            Some(KinematicVerdict::IterationCap)
        } else {
            None
        };
        if let Some(verdict) = verdict {
            return Ok(KinematicRun {
                grid: state,
                records,
                verdict,
            });
        }

        let last = records.last().expect("just pushed");
        let updated: Vec<JointVector> = last
            .nodes
            .par_iter()
            .map(|rec| {
                if rec.node.rotation == 0 {
                    return Ok(rec.q);
                }
                let target = nominal.forward_kinematics(&rec.q)? + rec.error * cfg.alpha;
                let solved = solve_nominal_ik(nominal, &target, &rec.q, &cfg.ik)?;
                Ok(solved.q.with(3, rec.q.q4))
            })
            .collect::<Result<_>>()?;
        state.joints = updated;
    }
    unreachable!("loop always returns on its final iteration")
}

/// Worst-case `‖I - α J_nom⁻¹ J_true‖` over the grid's initial joint values.
pub fn max_contraction(
    nominal: &RobotModel,
    true_model: &RobotModel,
    grid: &GridSpec,
    cfg: &KinematicConfig,
) -> Result<f64> {
    let state = CorrectionGrid::initial(*grid, &cfg.base_pose)?;
    let step = cfg.ik.step.unwrap_or_else(|| nominal.default_jacobian_step());
    state.joints.iter().try_fold(0.0f64, |worst, q| {
        let gain = build_gain(nominal, q, cfg.alpha, &step, cfg.ik.max_condition)?;
        let j_true = numerical_jacobian(true_model, q, &step)?;
        Ok(worst.max(check_contraction(&gain, &j_true)))
    })
}
