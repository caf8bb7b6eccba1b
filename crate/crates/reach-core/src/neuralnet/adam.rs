//! Bias-corrected Adam over `Mlp` parameters.

use ndarray::{Array1, Array2};

use super::mlp::{Gradients, Mlp};
use crate::error::{ReachError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second-moment accumulators shaped like the network, plus the step
/// counter used for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub t: u64,
    pub moments: Vec<(Array2<f64>, Array1<f64>)>,
    pub velocities: Vec<(Array2<f64>, Array1<f64>)>,
}

impl AdamState {
    pub fn new(net: &Mlp, hyper: AdamHyper) -> Self {
        let zeros = |net: &Mlp| -> Vec<(Array2<f64>, Array1<f64>)> {
            net.layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.dim()), Array1::zeros(l.biases.len())))
                .collect()
        };
        Self { hyper, t: 0, moments: zeros(net), velocities: zeros(net) }
    }
}

/// One Adam update of `net` in place. Gradients must be shaped like the
/// network; the state tracks its own step count.
pub fn adam_step(net: &mut Mlp, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if grads.layers.len() != net.layers.len() || state.moments.len() != net.layers.len() {
        return Err(ReachError::Dimension {
            what: "adam layer count",
            expected: net.layers.len(),
            got: grads.layers.len(),
        });
    }
    state.t += 1;
    let AdamHyper { lr, beta1, beta2, eps } = state.hyper;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (((layer, (gw, gb)), (mw, mb)), (vw, vb)) in net
        .layers
        .iter_mut()
        .zip(grads.layers.iter())
        .zip(state.moments.iter_mut())
        .zip(state.velocities.iter_mut())
    {
        if layer.weights.dim() != gw.dim() {
            return Err(ReachError::Dimension {
                what: "adam gradient shape",
                expected: layer.weights.len(),
                got: gw.len(),
            });
        }
        mw.zip_mut_with(gw, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
        vw.zip_mut_with(gw, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
        ndarray::Zip::from(&mut layer.weights)
            .and(&*mw)
            .and(&*vw)
            .for_each(|p, &m, &v| *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps));

        mb.zip_mut_with(gb, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
        vb.zip_mut_with(gb, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
        ndarray::Zip::from(&mut layer.biases)
            .and(&*mb)
            .and(&*vb)
            .for_each(|p, &m, &v| *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::mlp::{DenseLayer, OutputHead};
    use ndarray::array;

    fn scalar_net(v: f64) -> Mlp {
        Mlp {
            layers: vec![DenseLayer {
                weights: Array2::from_elem((1, 1), v),
                biases: Array1::zeros(1),
            }],
            head: OutputHead::Linear,
        }
    }

    fn scalar_grads(g: f64) -> Gradients {
        Gradients { layers: vec![(Array2::from_elem((1, 1), g), Array1::zeros(1))] }
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // With bias correction, the first step moves by lr/(1+ε·scale) ≈ lr
        // regardless of gradient magnitude's first power.
        let mut net = scalar_net(0.0);
        let mut state = AdamState::new(&net, AdamHyper::with_lr(1e-3));
        adam_step(&mut net, &scalar_grads(1.0), &mut state).unwrap();
        let p = net.layers[0].weights[[0, 0]];
        assert!((p + 1e-3).abs() < 1e-10, "got {p}");
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut net = scalar_net(0.7);
        let mut state = AdamState::new(&net, AdamHyper::with_lr(1e-3));
        adam_step(&mut net, &scalar_grads(0.0), &mut state).unwrap();
        assert_eq!(net.layers[0].weights[[0, 0]], 0.7);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn identical_runs_are_identical() {
        let run = || {
            let mut net = scalar_net(0.3);
            let mut state = AdamState::new(&net, AdamHyper::with_lr(1e-2));
            for i in 0..50 {
                adam_step(&mut net, &scalar_grads((i as f64 * 0.37).sin()), &mut state).unwrap();
            }
            net.layers[0].weights[[0, 0]].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut net = scalar_net(0.0);
        let mut state = AdamState::new(&net, AdamHyper::with_lr(1e-3));
        let bad = Gradients { layers: vec![(array![[1.0, 2.0]], Array1::zeros(1))] };
        assert!(adam_step(&mut net, &bad, &mut state).is_err());
    }
}
