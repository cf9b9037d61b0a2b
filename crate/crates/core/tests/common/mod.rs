//! Closed-form references shared by the oracle tests and the acceptance run.
#![allow(dead_code)]

use ilc_core::kinematic::{joint_correction, GridSpec, LearningGain};
use ilc_core::nalgebra::{Matrix3, Vector3};
use ilc_core::plant::{identify_fir, measure_step_response, JointPlant, TransferFunction, Window};
use ilc_core::robot::{numerical_jacobian, JointKind, JointRow, ToolGeometry};
use ilc_core::trajectory::{interpolate, InterpolationTable};
use ilc_core::{JointVector, RobotModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const L1: f64 = 0.30;
pub const L2: f64 = 0.20;

/// Planar 2R arm in the xy-plane with a prismatic joint along z and a straight
/// tool pointing along z.
pub fn planar_2r() -> RobotModel {
    let free = [-10.0, 10.0];
    let row = |kind, origin: [f64; 3]| JointRow {
        kind,
        origin,
        rpy: [0.0; 3],
        axis: [0.0, 0.0, 1.0],
        offset: 0.0,
        limits: free,
    };
    RobotModel {
        name: "planar-2r".into(),
        rcm_position: [0.0; 3],
        joints: [
            row(JointKind::Revolute, [0.0; 3]),
            row(JointKind::Revolute, [L1, 0.0, 0.0]),
            row(JointKind::Prismatic, [L2, 0.0, 0.0]),
            row(JointKind::Revolute, [0.0; 3]),
        ],
        tool: ToolGeometry::straight(0.05),
        workspace_radius: 1.0,
    }
}

pub fn planar_2r_jacobian(q1: f64, q2: f64) -> Matrix3<f64> {
    let (s1, c1) = q1.sin_cos();
    let (s12, c12) = (q1 + q2).sin_cos();
    Matrix3::new(
        -L1 * s1 - L2 * s12,
        -L2 * s12,
        0.0,
        L1 * c1 + L2 * c12,
        L2 * c12,
        0.0,
        0.0,
        0.0,
        1.0,
    )
}

/// Central differences against the analytic 2R Jacobian: the error must shrink
/// by about four per halving of the step.
pub fn jacobian_order_two() -> Check {
    let model = planar_2r();
    let mut r = rng(21);
    let mut worst_ratio = f64::INFINITY;
    let mut best_ratio = 0.0f64;
    for _ in 0..10 {
        let q = JointVector::new(
            r.random_range(-2.0..2.0),
            r.random_range(-2.0..2.0),
            r.random_range(0.0..0.1),
            0.0,
        );
        let exact = planar_2r_jacobian(q.q1, q.q2);
        let err = |h: f64| -> Result<f64, String> {
            let j = numerical_jacobian(&model, &q, &[h, h, h]).map_err(|e| e.to_string())?;
            Ok((j.matrix - exact).abs().max())
        };
        let errs = [err(0.08)?, err(0.04)?, err(0.02)?];
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            worst_ratio = worst_ratio.min(ratio);
            best_ratio = best_ratio.max(ratio);
        }
        let fine = err(1e-5)?;
        if fine > 1e-9 {
            return Err(format!("error {fine:.2e} at step 1e-5"));
        }
    }
    if (3.8..=4.2).contains(&worst_ratio) && (3.8..=4.2).contains(&best_ratio) {
        Ok(format!("halving ratios {worst_ratio:.3}..{best_ratio:.3}"))
    } else {
        Err(format!(
            "halving ratios {worst_ratio:.3}..{best_ratio:.3}, expected about 4"
        ))
    }
}

/// Noiseless step, no window, full crop: the FIR is the impulse response and
/// its running sum is the step response.
#[allow(clippy::needless_range_loop)]
pub fn fir_reconstruction() -> Check {
    let mut worst = 0.0f64;
    for (k, tf) in [
        TransferFunction::first_order(0.95),
        TransferFunction::critically_damped(10.0, 1e-3),
        TransferFunction {
            num: vec![0.02, 0.01],
            den: vec![1.0, -1.6, 0.67],
        },
    ]
    .into_iter()
    .enumerate()
    {
        let plant = JointPlant::linear(tf, 1e-3, k * 3);
        let step = measure_step_response(&plant, 0.7, 600, 0).map_err(|e| e.to_string())?;
        let fir = identify_fir(&step, 600, Window::None).map_err(|e| e.to_string())?;
        // direct recursion of the difference equation for a unit impulse
        let (b, a) = (&plant.tf.num, &plant.tf.den);
        let mut x = vec![0.0; 600];
        x[plant.delay] = 1.0;
        let mut h = vec![0.0; 600];
        for n in 0..600 {
            let mut acc = 0.0;
            for (i, bi) in b.iter().enumerate() {
                if n >= i {
                    acc += bi * x[n - i];
                }
            }
            for (i, ai) in a.iter().enumerate().skip(1) {
                if n >= i {
                    acc -= ai * h[n - i];
                }
            }
            h[n] = acc / a[0];
        }
        let mut sum = 0.0;
        for n in 0..600 {
            sum += fir.h[n];
            worst = worst.max((fir.h[n] - h[n]).abs()).max((sum - step.g[n]).abs());
        }
    }
    if worst <= 1e-12 {
        Ok(format!("max deviation {worst:.1e}"))
    } else {
        Err(format!("max deviation {worst:.1e} > 1e-12"))
    }
}

/// A table filled from `a + b r + c i + d r i` is reproduced exactly everywhere.
pub fn bilinear_exact() -> Check {
    let grid = GridSpec::default();
    let mut r = rng(3);
    let coef: Vec<[f64; 4]> = (0..3)
        .map(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0)))
        .collect();
    let f = |k: usize, rot: f64, ins: f64| {
        let [a, b, c, d] = coef[k];
        a + b * rot + c * ins + d * rot * ins
    };
    let nodes = grid.nodes().map_err(|e| e.to_string())?;
    let values = nodes
        .iter()
        .map(|n| {
            let (rot, ins) = (grid.rotation_deg(n.rotation), grid.insertion_mm(n.insertion));
            [f(0, rot, ins), f(1, rot, ins), f(2, rot, ins)]
        })
        .collect();
    let table = InterpolationTable::new(grid, values, 0.25).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..2000 {
        let rot = r.random_range(0.0..=grid.rotation_range_deg);
        let ins = r.random_range(0.0..=grid.insertion_range_mm);
        let q = interpolate(&table, rot, ins).map_err(|e| e.to_string())?;
        for (k, v) in [q.q1, q.q2, q.q3].into_iter().enumerate() {
            worst = worst.max((v - f(k, rot, ins)).abs());
        }
        worst = worst.max((q.q4 - 0.25 - rot.to_radians()).abs());
    }
    if worst <= 1e-12 {
        Ok(format!("max deviation {worst:.1e}"))
    } else {
        Err(format!("max deviation {worst:.1e} > 1e-12"))
    }
}

/// For a linear map `y = J q`, one update with the exact inverse and gain α
/// leaves `(1 - α) e`.
pub fn one_step_linear() -> Check {
    let mut r = rng(8);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let j = Matrix3::from_fn(|_, _| r.random_range(-1.0..1.0)) + Matrix3::identity() * 2.0;
        let alpha: f64 = r.random_range(0.1..=1.0);
        let gain = LearningGain::from_jacobian(&j, alpha, 1e8).map_err(|e| e.to_string())?;
        let target = Vector3::from_fn(|_, _| r.random_range(-1e-3..1e-3));
        let q0 = Vector3::from_fn(|_, _| r.random_range(-0.1..0.1));
        let e0 = target - j * q0;
        let q1 = q0 + joint_correction(&gain, &e0);
        let e1 = target - j * q1;
        worst = worst.max((e1 - e0 * (1.0 - alpha)).norm() / e0.norm());
    }
    if worst <= 1e-12 {
        Ok(format!("max relative deviation {worst:.1e}"))
    } else {
        Err(format!("max relative deviation {worst:.1e} > 1e-12"))
    }
}
