use serde::{Deserialize, Serialize};

use super::mlp::{MlpGrads, MlpParams};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: MlpGrads,
}

impl OptimizerState {
    pub fn new(params: &MlpParams, learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "optimizer needs learning_rate > 0, momentum in [0,1), weight_decay >= 0; got {learning_rate}, {momentum}, {weight_decay}"
            )));
        }
        Ok(OptimizerState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: MlpGrads::zeros_like(params),
        })
    }
}

/// `v ← μ·v + (g + λ·w)`, `w ← w − η·v`.
///
/// Gradients are validated before anything is written, so a failed step leaves
/// both the parameters and the optimizer state untouched.
pub fn sgd_step(params: &mut MlpParams, grads: &MlpGrads, state: &mut OptimizerState) -> Result<()> {
    let n = params.num_layers();
    if grads.weights.len() != n || state.velocity.weights.len() != n {
        return Err(Error::Dimension(format!(
            "network has {n} layers, gradient {} and velocity {}",
            grads.weights.len(),
            state.velocity.weights.len()
        )));
    }
    for l in 0..n {
        let shape = params.weights[l].shape();
        let blen = params.biases[l].len();
        if grads.weights[l].shape() != shape
            || state.velocity.weights[l].shape() != shape
            || grads.biases[l].len() != blen
            || state.velocity.biases[l].len() != blen
        {
            return Err(Error::Dimension(format!("layer {l} gradient shape mismatch")));
        }
        if !grads.weights[l].is_finite() || grads.biases[l].iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                layer: l,
                what: "gradient".into(),
            });
        }
    }
    let (lr, mu, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    let update = |w: &mut [f64], g: &[f64], v: &mut [f64]| {
        for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = mu * *vi + (gi + wd * *wi);
            *wi -= lr * *vi;
        }
    };
    for l in 0..n {
        update(
            params.weights[l].as_mut_slice(),
            grads.weights[l].as_slice(),
            state.velocity.weights[l].as_mut_slice(),
        );
        update(&mut params.biases[l], &grads.biases[l], &mut state.velocity.biases[l]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Activation, Matrix};

    fn scalar(w: f64) -> MlpParams {
        MlpParams {
            layer_dims: vec![1, 1],
            weights: vec![Matrix::from_rows(&[vec![w]]).unwrap()],
            biases: vec![vec![0.0]],
            norm_state: None,
            activation: Activation::Identity,
        }
    }

    fn grad(g: f64) -> MlpGrads {
        MlpGrads {
            weights: vec![Matrix::from_rows(&[vec![g]]).unwrap()],
            biases: vec![vec![0.0]],
        }
    }

    #[test]
    fn single_step_with_default_hyperparameters() {
        let mut p = scalar(1.0);
        let mut s = OptimizerState::new(&p, 0.001, 0.9, 1e-5).unwrap();
        sgd_step(&mut p, &grad(1.0), &mut s).unwrap();
        assert!((s.velocity.weights[0][(0, 0)] - 1.00001).abs() < 1e-15);
        assert!((p.weights[0][(0, 0)] - 0.99899999).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = scalar(0.37);
        let before = p.clone();
        let mut s = OptimizerState::new(&p, 0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut p, &grad(0.0), &mut s).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn two_steps_follow_momentum_recursion() {
        let (lr, mu, g, w0) = (0.05, 0.9, 0.3, 2.0);
        let mut p = scalar(w0);
        let mut s = OptimizerState::new(&p, lr, mu, 0.0).unwrap();
        sgd_step(&mut p, &grad(g), &mut s).unwrap();
        sgd_step(&mut p, &grad(g), &mut s).unwrap();
        // v1 = g, v2 = μg + g; w2 = w0 − η(g + (1+μ)g)
        let expected = w0 - lr * (g + (1.0 + mu) * g);
        assert!((p.weights[0][(0, 0)] - expected).abs() < 1e-15);
        assert!((s.velocity.weights[0][(0, 0)] - (1.0 + mu) * g).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_the_layer() {
        let mut p = scalar(1.0);
        let before = p.clone();
        let mut s = OptimizerState::new(&p, 0.1, 0.9, 0.0).unwrap();
        let err = sgd_step(&mut p, &grad(f64::NAN), &mut s).unwrap_err();
        assert!(matches!(err, Error::NonFinite { layer: 0, .. }));
        assert_eq!(p, before);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = scalar(0.123456789);
            let mut s = OptimizerState::new(&p, 0.01, 0.9, 1e-4).unwrap();
            for k in 0..5 {
                sgd_step(&mut p, &grad(0.1 * k as f64 - 0.2), &mut s).unwrap();
            }
            p.weights[0][(0, 0)].to_bits()
        };
        assert_eq!(run(), run());
    }
}
