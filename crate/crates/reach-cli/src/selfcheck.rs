//! Fast self-contained verification. Each check recomputes a core result
//! through an independent route — finite differences, homogeneous-matrix
//! kinematics, a piecewise reward table, byte-level framing, relabeling
//! algebra — and compares. Everything is seeded, offline, and finishes in
//! well under a minute.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use reach_core::agents::{her_relabel, HerStrategy, Transition};
use reach_core::environment::{compute_reward, Observation, RewardKind};
use reach_core::envservice::{decode_frame, encode_frame};
use reach_core::kinematics::{
    distance_to_target, forward_kinematics, JointVector, KinematicChain, TargetPosition,
    JOINT_COUNT,
};
use reach_core::neuralnet::gradient_check;
use reach_core::ReachError;

/// A check either passes with a detail line or fails with a reason.
type CheckResult = Result<String, String>;

const CHECKS: &[(&str, fn() -> CheckResult)] = &[
    ("analytic gradients vs finite differences", check_gradients),
    ("forward kinematics vs matrix recompute", check_kinematics),
    ("reward shape vs piecewise recompute", check_rewards),
    ("wire framing under random bytes", check_framing),
    ("hindsight relabeling grants unit reward", check_her),
];

pub fn run() -> ExitCode {
    let started = Instant::now();
    let mut failed = 0usize;
    for (name, check) in CHECKS {
        let clock = Instant::now();
        match check() {
            Ok(detail) => {
                println!("ok   {name} ({:.2}s) — {detail}", clock.elapsed().as_secs_f64())
            }
            Err(reason) => {
                failed += 1;
                println!("FAIL {name} — {reason}");
            }
        }
    }
    println!(
        "{} checks, {} failed, {:.2}s total",
        CHECKS.len(),
        failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn fail(e: ReachError) -> String {
    e.to_string()
}

fn check_gradients() -> CheckResult {
    let report = gradient_check(&[11, 12, 13], 1e-4).map_err(fail)?;
    if !report.passed {
        let worst = report
            .cases
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("report has cases");
        return Err(format!(
            "head {} at seed {}: relative error {:.3e} exceeds {:.0e}",
            worst.head, worst.seed, worst.max_rel_error, report.tolerance
        ));
    }
    Ok(format!(
        "{} cases, worst relative error {:.3e}",
        report.cases.len(),
        report.max_rel_error
    ))
}

type Mat4 = [[f64; 4]; 4];

fn mat_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn rotation_about(axis: [f64; 3], angle: f64) -> Mat4 {
    let [x, y, z] = axis;
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y, 0.0],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x, 0.0],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn translation(t: [f64; 3]) -> Mat4 {
    [
        [1.0, 0.0, 0.0, t[0]],
        [0.0, 1.0, 0.0, t[1]],
        [0.0, 0.0, 1.0, t[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

/// End-effector position by plain homogeneous-matrix products — the slow,
/// obviously-correct route the quaternion implementation must agree with.
fn matrix_forward(chain: &KinematicChain, q: &JointVector) -> [f64; 3] {
    let r = &chain.base_pose.rotation;
    let b = &chain.base_pose.translation;
    let mut m: Mat4 = [
        [r[0][0], r[0][1], r[0][2], b[0]],
        [r[1][0], r[1][1], r[1][2], b[1]],
        [r[2][0], r[2][1], r[2][2], b[2]],
        [0.0, 0.0, 0.0, 1.0],
    ];
    for (joint, &angle) in chain.joints.iter().zip(q.0.iter()) {
        m = mat_mul(&m, &rotation_about(joint.axis, angle));
        m = mat_mul(&m, &translation(joint.translation));
    }
    m = mat_mul(&m, &translation(chain.ee_offset));
    [m[0][3], m[1][3], m[2][3]]
}

fn check_kinematics() -> CheckResult {
    let chain = KinematicChain::default_chain();
    let rest = forward_kinematics(&chain, &JointVector::zero()).map_err(fail)?;
    let expected_rest = [0.0, 0.0, 1.23];
    for axis in 0..3 {
        if (rest[axis] - expected_rest[axis]).abs() > 1e-12 {
            return Err(format!("rest pose ended at {rest:?}, expected {expected_rest:?}"));
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let mut q = [0.0; JOINT_COUNT];
        for angle in q.iter_mut() {
            *angle = rng.random_range(-PI..PI);
        }
        let q = JointVector(q);
        let fast = forward_kinematics(&chain, &q).map_err(fail)?;
        let slow = matrix_forward(&chain, &q);
        for axis in 0..3 {
            worst = worst.max((fast[axis] - slow[axis]).abs());
        }
    }
    if worst > 1e-9 {
        return Err(format!("routes disagree by {worst:.3e} m (allowed 1e-9)"));
    }
    Ok(format!("1000 random poses agree within {worst:.3e} m"))
}

fn check_rewards() -> CheckResult {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let cases = 10_000usize;
    for case in 0..cases {
        let tau = rng.random_range(0.001..0.5);
        // Every third case sits exactly on the boundary, which must miss.
        let d = if case % 3 == 0 { tau } else { rng.random_range(0.0..1.2) };
        let sparse = compute_reward(d, tau, RewardKind::Sparse).map_err(fail)?;
        let dense = compute_reward(d, tau, RewardKind::Dense).map_err(fail)?;
        let expected_sparse: f64 = if d < tau { 1.0 } else { 0.0 };
        let expected_dense: f64 = if d < tau { 1.0 } else { -d };
        if sparse.to_bits() != expected_sparse.to_bits()
            || dense.to_bits() != expected_dense.to_bits()
        {
            return Err(format!(
                "d={d}, tau={tau}: got sparse {sparse}, dense {dense}; \
                 expected {expected_sparse} and {expected_dense}"
            ));
        }
    }
    Ok(format!("{cases} cases (boundary included) match bitwise"))
}

fn check_framing() -> CheckResult {
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let len = rng.random_range(0..2048usize);
        let payload: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let frame = encode_frame(&payload).map_err(fail)?;
        let (decoded, used) = decode_frame(&frame).map_err(fail)?;
        if decoded != payload.as_slice() || used != frame.len() {
            return Err("a framed payload did not round-trip".into());
        }
    }
    let fuzz = 20_000usize;
    for _ in 0..fuzz {
        let len = rng.random_range(0..64usize);
        let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        match decode_frame(&bytes) {
            Ok((payload, used)) => {
                let again = encode_frame(payload).map_err(fail)?;
                if again != bytes[..used] {
                    return Err("a decoded frame did not re-encode to its own bytes".into());
                }
            }
            Err(ReachError::Protocol(_)) => {}
            Err(other) => {
                return Err(format!("random bytes raised a non-protocol error: {other}"))
            }
        }
    }
    Ok(format!("1000 round-trips, {fuzz} random buffers classified cleanly"))
}

fn check_her() -> CheckResult {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let tau = 0.05;
    let episodes = 1000usize;
    for _ in 0..episodes {
        let goal = [rng.random_range(-0.8..0.8), rng.random_range(0.15..0.85), 0.10];
        let achieved = [
            rng.random_range(-0.8..0.8),
            rng.random_range(0.15..0.85),
            rng.random_range(0.0..0.6),
        ];
        let d = distance_to_target(&achieved, &TargetPosition { p: goal });
        let reward = compute_reward(d, tau, RewardKind::Sparse).map_err(fail)?;
        let transition = Transition {
            obs: Observation {
                ee_position: [0.0, 0.0, 1.23],
                target_position: goal,
                joint_angles: [0.0; JOINT_COUNT],
            },
            action: JointVector([0.1; JOINT_COUNT]),
            reward,
            next_obs: Observation {
                ee_position: achieved,
                target_position: goal,
                joint_angles: [0.1; JOINT_COUNT],
            },
            done: true,
            desired_goal: goal,
            achieved_goal: achieved,
        };
        let out =
            her_relabel(&[transition], HerStrategy::Final, 1, tau, RewardKind::Sparse)
                .map_err(fail)?;
        if out.len() != 2 {
            return Err(format!("expected 1 original + 1 relabel, got {}", out.len()));
        }
        let relabeled = &out[1];
        if relabeled.reward != 1.0 {
            return Err(format!("relabeled reward {} is not 1", relabeled.reward));
        }
        if relabeled.desired_goal != relabeled.achieved_goal
            || relabeled.obs.target_position != relabeled.achieved_goal
            || relabeled.next_obs.target_position != relabeled.achieved_goal
        {
            return Err("relabeled goals are not the achieved position".into());
        }
    }
    Ok(format!("{episodes} relabeled one-step transitions all carry reward 1"))
}
