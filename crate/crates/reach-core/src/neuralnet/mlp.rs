//! The multilayer perceptron itself: parameters, batched forward with an
//! activation cache, exact reverse-mode backward, He init, soft updates.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ReachError, Result};

/// One affine layer: `z = x · Wᵀ + b` with `W` stored out×in, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl DenseLayer {
    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// What the last layer's raw output means.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputHead {
    /// Raw affine output (critics, value nets).
    Linear,
    /// `a = center + half ⊙ tanh(z)`: squashes into per-dimension bounds.
    /// Dimensions with `half == 0` are constant at `center` (frozen joints).
    TanhScaled {
        center: Array1<f64>,
        half: Array1<f64>,
    },
    /// Splits a 2·dim output into (mean, log_std) with the log-std half
    /// clamped into `[log_std_min, log_std_max]` (stochastic actors).
    MeanLogStd {
        dim: usize,
        log_std_min: f64,
        log_std_max: f64,
    },
}

impl OutputHead {
    /// Raw output width the final layer must produce.
    fn raw_dim(&self) -> Option<usize> {
        match self {
            OutputHead::Linear => None,
            OutputHead::TanhScaled { center, .. } => Some(center.len()),
            OutputHead::MeanLogStd { dim, .. } => Some(2 * dim),
        }
    }
}

/// Activations retained by `forward` for the matching `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer plus the final pre-head output; length = layers+1.
    inputs: Vec<Array2<f64>>,
    /// tanh of the final pre-activation, for the TanhScaled head.
    tanh: Option<Array2<f64>>,
}

/// Per-parameter gradients, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|(w, b)| {
            w.iter().all(|v| v.is_finite()) && b.iter().all(|v| v.is_finite())
        })
    }
}

/// A fully-connected network: ReLU hidden layers, one of the three heads on
/// the last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    pub head: OutputHead,
}

impl Mlp {
    /// He-initialized network: weights ~ Normal(0, sqrt(2/fan_in)), biases 0.
    /// Weights are drawn row-major per layer, layers in order, so the result
    /// is a pure function of the rng state.
    pub fn he_init(sizes: &[usize], head: OutputHead, rng: &mut ChaCha20Rng) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(ReachError::InvalidConfig(
                "network needs at least input and output sizes".into(),
            ));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(ReachError::InvalidConfig("zero-width layer".into()));
        }
        if let Some(want) = head.raw_dim() {
            let got = *sizes.last().unwrap();
            if got != want {
                return Err(ReachError::Dimension {
                    what: "output layer width for head",
                    expected: want,
                    got,
                });
            }
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| ReachError::InvalidConfig(e.to_string()))?;
            let weights =
                Array2::from_shape_fn((fan_out, fan_in), |_| normal.sample(rng));
            layers.push(DenseLayer { weights, biases: Array1::zeros(fan_out) });
        }
        Ok(Self { layers, head })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    /// Width of the head's output (equals the raw width for Linear and
    /// MeanLogStd; the action dimension for TanhScaled).
    pub fn output_dim(&self) -> usize {
        let raw = self.layers.last().unwrap().output_dim();
        match &self.head {
            OutputHead::Linear | OutputHead::MeanLogStd { .. } => raw,
            OutputHead::TanhScaled { center, .. } => center.len(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|v| v.is_finite()) && l.biases.iter().all(|v| v.is_finite())
        })
    }

    /// Re-targets a TanhScaled head to new per-dimension bounds.
    pub fn set_tanh_bounds(&mut self, low: &[f64], high: &[f64]) -> Result<()> {
        match &mut self.head {
            OutputHead::TanhScaled { center, half } => {
                if low.len() != center.len() || high.len() != center.len() {
                    return Err(ReachError::Dimension {
                        what: "tanh head bounds",
                        expected: center.len(),
                        got: low.len(),
                    });
                }
                for i in 0..low.len() {
                    center[i] = 0.5 * (low[i] + high[i]);
                    half[i] = 0.5 * (high[i] - low[i]);
                }
                Ok(())
            }
            _ => Err(ReachError::Usage("set_tanh_bounds on a non-tanh head".into())),
        }
    }

    /// Batched forward pass. `x` is (batch, input_dim); returns the head
    /// output and the cache needed for `backward`.
    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if x.ncols() != self.input_dim() {
            return Err(ReachError::Dimension {
                what: "forward input",
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        if x.nrows() == 0 {
            return Err(ReachError::Dimension { what: "forward batch", expected: 1, got: 0 });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        inputs.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = inputs[i].dot(&layer.weights.t());
            z += &layer.biases;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(z);
        }
        let raw = inputs.last().unwrap();
        let (output, tanh) = match &self.head {
            OutputHead::Linear => (raw.clone(), None),
            OutputHead::TanhScaled { center, half } => {
                let t = raw.mapv(f64::tanh);
                let mut out = t.clone();
                for mut row in out.rows_mut() {
                    for i in 0..row.len() {
                        row[i] = center[i] + half[i] * row[i];
                    }
                }
                (out, Some(t))
            }
            OutputHead::MeanLogStd { dim, log_std_min, log_std_max } => {
                let mut out = raw.clone();
                for mut row in out.rows_mut() {
                    for i in *dim..2 * dim {
                        row[i] = row[i].clamp(*log_std_min, *log_std_max);
                    }
                }
                (out, None)
            }
        };
        Ok((output, ForwardCache { inputs, tanh }))
    }

    /// Exact reverse-mode gradients of `forward` wrt parameters, given the
    /// loss gradient at the head output. Also returns the gradient wrt the
    /// network input (needed to differentiate a critic wrt its action
    /// columns). The cache must come from a forward pass of this network
    /// with the same batch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dy: &Array2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        if cache.inputs.len() != self.layers.len() + 1 {
            return Err(ReachError::Usage(
                "backward cache does not match this network (stale cache?)".into(),
            ));
        }
        let raw = cache.inputs.last().unwrap();
        if dy.nrows() != raw.nrows() {
            return Err(ReachError::Dimension {
                what: "backward batch",
                expected: raw.nrows(),
                got: dy.nrows(),
            });
        }
        // Head backward: gradient wrt the final pre-head output.
        let mut grad = match &self.head {
            OutputHead::Linear => {
                if dy.ncols() != raw.ncols() {
                    return Err(ReachError::Dimension {
                        what: "backward head gradient",
                        expected: raw.ncols(),
                        got: dy.ncols(),
                    });
                }
                dy.clone()
            }
            OutputHead::TanhScaled { half, .. } => {
                let t = cache
                    .tanh
                    .as_ref()
                    .ok_or_else(|| ReachError::Usage("cache missing tanh activations".into()))?;
                if dy.ncols() != half.len() {
                    return Err(ReachError::Dimension {
                        what: "backward head gradient",
                        expected: half.len(),
                        got: dy.ncols(),
                    });
                }
                let mut g = dy.clone();
                for (mut row, trow) in g.rows_mut().into_iter().zip(t.rows()) {
                    for i in 0..row.len() {
                        row[i] *= half[i] * (1.0 - trow[i] * trow[i]);
                    }
                }
                g
            }
            OutputHead::MeanLogStd { dim, log_std_min, log_std_max } => {
                if dy.ncols() != 2 * dim {
                    return Err(ReachError::Dimension {
                        what: "backward head gradient",
                        expected: 2 * dim,
                        got: dy.ncols(),
                    });
                }
                let mut g = dy.clone();
                for (mut row, zrow) in g.rows_mut().into_iter().zip(raw.rows()) {
                    for i in *dim..2 * dim {
                        if zrow[i] < *log_std_min || zrow[i] > *log_std_max {
                            row[i] = 0.0;
                        }
                    }
                }
                g
            }
        };
        // Layer backward, last to first.
        let last = self.layers.len() - 1;
        let mut layer_grads = vec![None; self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            if l < last {
                // Gradient through the ReLU that produced inputs[l+1].
                for (mut row, arow) in grad.rows_mut().into_iter().zip(cache.inputs[l + 1].rows())
                {
                    for i in 0..row.len() {
                        if arow[i] <= 0.0 {
                            row[i] = 0.0;
                        }
                    }
                }
            }
            let dw = grad.t().dot(&cache.inputs[l]);
            let db = grad.sum_axis(Axis(0));
            layer_grads[l] = Some((dw, db));
            grad = grad.dot(&self.layers[l].weights);
        }
        let grads = Gradients { layers: layer_grads.into_iter().map(Option::unwrap).collect() };
        Ok((grads, grad))
    }
}

/// `target ← ρ·online + (1−ρ)·target`, element-wise over all layer
/// parameters. Head configuration is not blended; targets share it.
pub fn soft_update(target: &mut Mlp, online: &Mlp, rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(ReachError::InvalidConfig(format!("soft-update rate {rho} outside [0,1]")));
    }
    if target.layers.len() != online.layers.len() {
        return Err(ReachError::Dimension {
            what: "soft update layer count",
            expected: online.layers.len(),
            got: target.layers.len(),
        });
    }
    for (t, o) in target.layers.iter_mut().zip(online.layers.iter()) {
        if t.weights.dim() != o.weights.dim() {
            return Err(ReachError::Dimension {
                what: "soft update weight shape",
                expected: o.weights.len(),
                got: t.weights.len(),
            });
        }
        t.weights.zip_mut_with(&o.weights, |tv, &ov| *tv = rho * ov + (1.0 - rho) * *tv);
        t.biases.zip_mut_with(&o.biases, |tv, &ov| *tv = rho * ov + (1.0 - rho) * *tv);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedSplitter;
    use ndarray::array;

    fn rng(seed: u64) -> ChaCha20Rng {
        SeedSplitter::new(seed).stream("nn-test")
    }

    #[test]
    fn he_init_statistics() {
        let mut r = rng(1);
        let net = Mlp::he_init(&[256, 256], OutputHead::Linear, &mut r).unwrap();
        let w = &net.layers[0].weights;
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expected_std = (2.0 / 256.0f64).sqrt();
        assert!(mean.abs() < 0.01);
        assert!((var.sqrt() - expected_std).abs() < 0.1 * expected_std);
        assert!(net.layers[0].biases.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn he_init_is_deterministic() {
        let a = Mlp::he_init(&[4, 8, 3], OutputHead::Linear, &mut rng(2)).unwrap();
        let b = Mlp::he_init(&[4, 8, 3], OutputHead::Linear, &mut rng(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_layer_matches_hand_multiply() {
        let net = Mlp {
            layers: vec![DenseLayer {
                weights: array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]],
                biases: array![0.5, -0.5, 0.25],
            }],
            head: OutputHead::Linear,
        };
        let x = array![[1.0, -1.0]];
        let (y, _) = net.forward(&x).unwrap();
        // Hand multiply: [1*1+2*(-1)+0.5, 3-4-0.5, 5-6+0.25]
        assert_eq!(y, array![[-0.5, -1.5, -0.75]]);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let net = Mlp {
            layers: vec![DenseLayer { weights: Array2::zeros((3, 4)), biases: Array1::zeros(3) }],
            head: OutputHead::Linear,
        };
        let x = Array2::from_elem((2, 4), 7.0);
        let (y, _) = net.forward(&x).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tanh_head_respects_bounds_and_slope() {
        let mut r = rng(3);
        let head = OutputHead::TanhScaled {
            center: array![0.0, 0.5, 0.0],
            half: array![1.5, 0.5, 0.0],
        };
        let net = Mlp::he_init(&[4, 16, 3], head, &mut r).unwrap();
        let x = Array2::from_shape_fn((32, 4), |_| {
            use rand::Rng;
            r.random_range(-3.0..3.0)
        });
        let (y, _) = net.forward(&x).unwrap();
        for row in y.rows() {
            assert!(row[0] >= -1.5 && row[0] <= 1.5);
            assert!(row[1] >= 0.0 && row[1] <= 1.0);
            assert_eq!(row[2], 0.0); // frozen dimension
        }

        // Slope at pre-activation 0 equals the half-range scale.
        let zero_net = Mlp {
            layers: vec![DenseLayer { weights: Array2::zeros((2, 1)), biases: Array1::zeros(2) }],
            head: OutputHead::TanhScaled { center: array![0.0, 0.0], half: array![2.0, 0.7] },
        };
        let x = array![[1.0]];
        let (_, cache) = zero_net.forward(&x).unwrap();
        let (grads, _) = zero_net.backward(&cache, &array![[1.0, 1.0]]).unwrap();
        // d out_i / d b_i = half_i * (1 - tanh(0)^2) = half_i.
        assert_eq!(grads.layers[0].1, array![2.0, 0.7]);
    }

    #[test]
    fn mean_log_std_head_clamps() {
        let net = Mlp {
            layers: vec![DenseLayer {
                weights: Array2::zeros((4, 2)),
                biases: array![0.3, -30.0, 5.0, 1.0],
            }],
            head: OutputHead::MeanLogStd { dim: 2, log_std_min: -20.0, log_std_max: 2.0 },
        };
        let (y, cache) = net.forward(&array![[0.0, 0.0]]).unwrap();
        // Means pass through unclamped; log-stds clamp into [-20, 2].
        assert_eq!(y, array![[0.3, -30.0, 2.0, 1.0]]);
        // Clamped coordinate passes zero gradient; interior one passes it.
        let (grads, _) = net.backward(&cache, &array![[0.0, 0.0, 1.0, 1.0]]).unwrap();
        assert_eq!(grads.layers[0].1, array![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradients() {
        let mut r = rng(4);
        let net = Mlp::he_init(&[3, 8, 8, 2], OutputHead::Linear, &mut r).unwrap();
        let x = Array2::from_elem((5, 3), 0.4);
        let (_, cache) = net.forward(&x).unwrap();
        let (grads, dx) = net.backward(&cache, &Array2::zeros((5, 2))).unwrap();
        assert!(grads.layers.iter().all(|(w, b)| {
            w.iter().all(|&v| v == 0.0) && b.iter().all(|&v| v == 0.0)
        }));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let mut r = rng(5);
        let net = Mlp::he_init(&[3, 8, 2], OutputHead::Linear, &mut r).unwrap();
        let other = Mlp::he_init(&[3, 8, 8, 2], OutputHead::Linear, &mut r).unwrap();
        let x = Array2::from_elem((1, 3), 1.0);
        let (_, cache) = net.forward(&x).unwrap();
        assert!(other.backward(&cache, &Array2::zeros((1, 2))).is_err());
        assert!(net.backward(&cache, &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn soft_update_blends_parameters() {
        let make = |v: f64| Mlp {
            layers: vec![DenseLayer {
                weights: Array2::from_elem((1, 1), v),
                biases: Array1::from_elem(1, v),
            }],
            head: OutputHead::Linear,
        };
        let online = make(0.0);

        let mut target = make(1.0);
        soft_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target, online);

        let mut target = make(1.0);
        soft_update(&mut target, &online, 0.0).unwrap();
        assert_eq!(target.layers[0].weights[[0, 0]], 1.0);

        let mut target = make(1.0);
        soft_update(&mut target, &online, 0.005).unwrap();
        assert!((target.layers[0].weights[[0, 0]] - 0.995).abs() < 1e-15);
        assert!((target.layers[0].biases[0] - 0.995).abs() < 1e-15);

        // Contraction property: |target' − online| = (1−ρ)|target − online|.
        let mut target = make(0.4);
        soft_update(&mut target, &online, 0.25).unwrap();
        assert!((target.layers[0].weights[[0, 0]] - 0.3).abs() < 1e-15);

        assert!(soft_update(&mut make(0.0), &online, 1.5).is_err());
    }

    #[test]
    fn set_tanh_bounds_recomputes_center_and_half() {
        let mut net = Mlp {
            layers: vec![DenseLayer { weights: Array2::zeros((2, 1)), biases: Array1::zeros(2) }],
            head: OutputHead::TanhScaled { center: array![0.0, 0.0], half: array![1.0, 1.0] },
        };
        net.set_tanh_bounds(&[-1.0, 0.0], &[3.0, 0.0]).unwrap();
        match &net.head {
            OutputHead::TanhScaled { center, half } => {
                assert_eq!(center, &array![1.0, 0.0]);
                assert_eq!(half, &array![2.0, 0.0]);
            }
            _ => unreachable!(),
        }
        assert!(net.set_tanh_bounds(&[0.0], &[1.0]).is_err());
    }
}
