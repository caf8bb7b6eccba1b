//! Central finite-difference verification of the analytic gradients, over
//! randomized networks covering every output head.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::mlp::{Mlp, OutputHead};
use crate::error::Result;
use crate::rng::SeedSplitter;

/// Step used for central differences; with f64 this leaves ~1e-10 relative
/// truncation error on O(1) gradients, far inside the 1e-4 gate.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub head: &'static str,
    pub seed: u64,
    /// Worst relative error across all parameters and all input entries.
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub cases: Vec<GradCheckCase>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Relative error with a floor: tiny gradients compare in absolute terms so
/// FD noise on true zeros cannot fail the check.
fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-4)
}

fn head_for(kind: &'static str) -> (Vec<usize>, OutputHead) {
    match kind {
        "linear" => (vec![5, 16, 8, 4], OutputHead::Linear),
        "tanh-scaled" => {
            // Includes frozen dimensions (half-range 0), as staged action
            // spaces produce.
            let low = [-1.57, -1.57, 0.0, 0.0, -0.5, 0.0];
            let high = [1.57, 0.0, 3.14, 0.0, 0.5, 0.0];
            let center = low.iter().zip(&high).map(|(l, h)| 0.5 * (l + h)).collect();
            let half = low.iter().zip(&high).map(|(l, h)| 0.5 * (h - l)).collect();
            (vec![5, 16, 8, 6], OutputHead::TanhScaled { center, half })
        }
        "mean-log-std" => (
            vec![5, 16, 8, 6],
            OutputHead::MeanLogStd { dim: 3, log_std_min: -20.0, log_std_max: 2.0 },
        ),
        other => panic!("unknown head kind {other}"),
    }
}

/// All head kinds the checker covers.
pub const HEAD_KINDS: [&str; 3] = ["linear", "tanh-scaled", "mean-log-std"];

fn loss(net: &Mlp, x: &Array2<f64>, direction: &Array2<f64>) -> f64 {
    let (y, _) = net.forward(x).expect("gradcheck forward");
    (y * direction).sum()
}

fn check_case(kind: &'static str, seed: u64) -> GradCheckCase {
    let mut rng: ChaCha20Rng = SeedSplitter::new(seed).stream("gradient-check");
    let (sizes, head) = head_for(kind);
    let mut net = Mlp::he_init(&sizes, head, &mut rng).expect("gradcheck net");
    if kind == "mean-log-std" {
        // Park two log-std units firmly outside the clamp window so the
        // zero-gradient path is exercised on every case.
        let biases = &mut net.layers.last_mut().unwrap().biases;
        biases[4] = 8.0;
        biases[5] = -28.0;
    }
    let batch = 3;
    let x = Array2::from_shape_fn((batch, sizes[0]), |_| rng.random_range(-2.0..2.0));
    let out_dim = net.output_dim();
    let direction = Array2::from_shape_fn((batch, out_dim), |_| rng.random_range(-1.0..1.0));

    let (analytic, analytic_dx) = {
        let (_, cache) = net.forward(&x).expect("forward");
        net.backward(&cache, &direction).expect("backward")
    };

    let mut worst = 0.0f64;
    // Parameters: perturb each weight and bias entry in place.
    for l in 0..net.layers.len() {
        for idx in 0..net.layers[l].weights.len() {
            let flat = net.layers[l].weights.as_slice_mut().unwrap();
            let orig = flat[idx];
            flat[idx] = orig + FD_STEP;
            let up = loss(&net, &x, &direction);
            net.layers[l].weights.as_slice_mut().unwrap()[idx] = orig - FD_STEP;
            let down = loss(&net, &x, &direction);
            net.layers[l].weights.as_slice_mut().unwrap()[idx] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic.layers[l].0.as_slice().unwrap()[idx], numeric));
        }
        for idx in 0..net.layers[l].biases.len() {
            let orig = net.layers[l].biases[idx];
            net.layers[l].biases[idx] = orig + FD_STEP;
            let up = loss(&net, &x, &direction);
            net.layers[l].biases[idx] = orig - FD_STEP;
            let down = loss(&net, &x, &direction);
            net.layers[l].biases[idx] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic.layers[l].1[idx], numeric));
        }
    }
    // Input gradient: the actor updates differentiate critics wrt their
    // action inputs, so this path matters as much as the parameters.
    let mut x_pert = x.clone();
    for row in 0..batch {
        for col in 0..sizes[0] {
            let orig = x_pert[[row, col]];
            x_pert[[row, col]] = orig + FD_STEP;
            let up = loss(&net, &x_pert, &direction);
            x_pert[[row, col]] = orig - FD_STEP;
            let down = loss(&net, &x_pert, &direction);
            x_pert[[row, col]] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic_dx[[row, col]], numeric));
        }
    }
    GradCheckCase { head: kind, seed, max_rel_error: worst }
}

/// Runs the backward-vs-finite-difference comparison for every head type and
/// each seed; failure is a report outcome, not an error.
pub fn gradient_check(seeds: &[u64], tolerance: f64) -> Result<GradCheckReport> {
    let mut cases = Vec::with_capacity(seeds.len() * HEAD_KINDS.len());
    for &seed in seeds {
        for kind in HEAD_KINDS {
            cases.push(check_case(kind, seed));
        }
    }
    let max_rel_error = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { tolerance, max_rel_error, passed: max_rel_error < tolerance, cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let report = gradient_check(&[0, 1, 2], 1e-4).unwrap();
        assert!(
            report.passed,
            "max relative error {} over cases {:?}",
            report.max_rel_error,
            report.cases
        );
        assert_eq!(report.cases.len(), 9);
    }

    #[test]
    fn identity_like_net_passes_trivially() {
        let case = check_case("linear", 99);
        assert!(case.max_rel_error < 1e-4);
    }

    #[test]
    fn an_injected_gradient_bug_would_be_caught() {
        // Negative control: corrupt the analytic gradient of a case by
        // scaling the direction used for backward only.
        let mut rng: ChaCha20Rng = SeedSplitter::new(7).stream("gradient-check");
        let (sizes, head) = head_for("linear");
        let net = Mlp::he_init(&sizes, head, &mut rng).unwrap();
        let x = Array2::from_shape_fn((2, 5), |_| rng.random_range(-1.0..1.0));
        let dir = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0));
        let (_, cache) = net.forward(&x).unwrap();
        let (grads, _) = net.backward(&cache, &(dir.clone() * 1.01)).unwrap();
        // FD against the uncorrupted loss must disagree beyond tolerance.
        let mut bad = 0.0f64;
        let mut probe = net.clone();
        for idx in 0..probe.layers[0].weights.len() {
            let flat = probe.layers[0].weights.as_slice_mut().unwrap();
            let orig = flat[idx];
            flat[idx] = orig + FD_STEP;
            let up = loss(&probe, &x, &dir);
            probe.layers[0].weights.as_slice_mut().unwrap()[idx] = orig - FD_STEP;
            let down = loss(&probe, &x, &dir);
            probe.layers[0].weights.as_slice_mut().unwrap()[idx] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            bad = bad.max(rel_error(grads.layers[0].0.as_slice().unwrap()[idx], numeric));
        }
        assert!(bad > 1e-4, "corrupted gradients slipped through ({bad})");
    }
}
