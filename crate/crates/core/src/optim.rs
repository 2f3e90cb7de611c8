//! SGD with momentum over the two parameter groups, and the dedicated
//! clipped center update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::CenterBank;
use crate::model::{NetworkParams, ParamGroup};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    /// Learning rate of the layers before view pooling.
    pub lr_pre_pool: f64,
    /// Learning rate of the embedding head and the classifier.
    pub lr_post_pool: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr_pre_pool: 1e-4,
            lr_post_pool: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_pre_pool", self.lr_pre_pool),
            ("lr_post_pool", self.lr_post_pool),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "optimizer.{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::PrePool => self.lr_pre_pool,
            ParamGroup::PostPool => self.lr_post_pool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CenterUpdateConfig {
    pub lr: f64,
    /// Element-wise clamp applied to the update direction before scaling.
    pub clip: f64,
    /// Standard deviation of the Gaussian center initialisation.
    pub init_std: f64,
}

impl Default for CenterUpdateConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            clip: 0.01,
            init_std: 0.01,
        }
    }
}

impl CenterUpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "centers.lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return Err(Error::Config(format!("centers.clip must be > 0, got {}", self.clip)));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!(
                "centers.init_std must be finite and >= 0, got {}",
                self.init_std
            )));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: NetworkParams<T>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &NetworkParams<T>) -> Self {
        Self {
            velocity: params.zeros_like(),
        }
    }
}

/// One SGD step: `g' = g + wd·θ`, `v ← μ·v + g'`, `θ ← θ − η·v`.
pub fn sgd_step<T: Scalar>(
    params: &mut NetworkParams<T>,
    grads: &NetworkParams<T>,
    state: &mut OptimizerState<T>,
    cfg: &SgdConfig,
) -> Result<()> {
    params.check_shape(grads)?;
    params.check_shape(&state.velocity)?;

    let mut grad_arrays: Vec<&[T]> = Vec::new();
    grads.for_each_array(|_, a| grad_arrays.push(a));
    let mut vel_arrays: Vec<&mut [T]> = Vec::new();
    state.velocity.for_each_array_mut(|_, a| vel_arrays.push(a));

    let momentum = T::of(cfg.momentum);
    let wd = T::of(cfg.weight_decay);
    let mut idx = 0;
    params.for_each_array_mut(|group, theta| {
        let lr = T::of(cfg.lr(group));
        let g = grad_arrays[idx];
        for ((t, &gi), vi) in theta.iter_mut().zip(g).zip(vel_arrays[idx].iter_mut()) {
            let g_decayed = gi + wd * *t;
            *vi = momentum * *vi + g_decayed;
            *t -= lr * *vi;
        }
        idx += 1;
    });
    Ok(())
}

/// `c ← c + lr · clamp(Δc, −clip, clip)`, no momentum or weight decay.
pub fn apply_center_update<T: Scalar>(
    centers: &mut CenterBank<T>,
    delta: &Matrix<T>,
    cfg: &CenterUpdateConfig,
) -> Result<()> {
    if centers.centers().shape() != delta.shape() {
        return Err(Error::DimensionMismatch {
            context: "center update shape",
            expected: centers.centers().as_slice().len(),
            actual: delta.as_slice().len(),
        });
    }
    let lr = T::of(cfg.lr);
    let clip = T::of(cfg.clip);
    for (c, &d) in centers.centers_mut().as_mut_slice().iter_mut().zip(delta.as_slice()) {
        *c += lr * d.max(-clip).min(clip);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Layer, Mlp, NetworkParams};

    fn scalar_net(value: f64) -> NetworkParams<f64> {
        let layer = |v: f64| Layer {
            weight: Matrix::from_vec(1, 1, vec![v]).unwrap(),
            bias: vec![0.0],
        };
        NetworkParams {
            view_encoders: vec![Mlp {
                layers: vec![layer(value)],
            }],
            embed_head: Mlp {
                layers: vec![layer(value)],
            },
            classifier: layer(value),
        }
    }

    fn post_pool_weight(p: &NetworkParams<f64>) -> f64 {
        p.embed_head.layers[0].weight[(0, 0)]
    }

    #[test]
    fn momentum_recurrence_hand_values() {
        let cfg = SgdConfig {
            lr_pre_pool: 0.1,
            lr_post_pool: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut p = scalar_net(1.0);
        let g = scalar_net(1.0);
        let mut state = OptimizerState::new(&p);
        sgd_step(&mut p, &g, &mut state, &cfg).unwrap();
        assert_eq!(post_pool_weight(&p), 0.9);
        assert_eq!(state.velocity.embed_head.layers[0].weight[(0, 0)], 1.0);
        sgd_step(&mut p, &g, &mut state, &cfg).unwrap();
        assert!((post_pool_weight(&p) - 0.71).abs() < 1e-15);
        assert_eq!(state.velocity.embed_head.layers[0].weight[(0, 0)], 1.9);
    }

    #[test]
    fn plain_gradient_descent_without_momentum() {
        let cfg = SgdConfig {
            lr_pre_pool: 0.01,
            lr_post_pool: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut p = scalar_net(1.0);
        let g = scalar_net(2.0);
        let mut state = OptimizerState::new(&p);
        sgd_step(&mut p, &g, &mut state, &cfg).unwrap();
        assert_eq!(post_pool_weight(&p), 0.0);
        assert_eq!(p.view_encoders[0].layers[0].weight[(0, 0)], 0.98);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let cfg = SgdConfig {
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        let mut p = scalar_net(0.3);
        let before = p.clone();
        let mut state = OptimizerState::new(&p);
        sgd_step(&mut p, &scalar_net(0.0), &mut state, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = scalar_net(1.0);
        let mut state = OptimizerState::new(&p);
        let mut g = scalar_net(1.0);
        g.embed_head.layers.push(g.embed_head.layers[0].clone());
        assert!(sgd_step(&mut p, &g, &mut state, &SgdConfig::default()).is_err());
    }

    fn bank(v: f64) -> CenterBank<f64> {
        CenterBank::new(Matrix::from_vec(1, 1, vec![v]).unwrap()).unwrap()
    }

    #[test]
    fn center_update_clamps_then_scales() {
        let cfg = CenterUpdateConfig::default();
        let mut c = bank(0.0);
        apply_center_update(&mut c, &Matrix::from_vec(1, 1, vec![0.75]).unwrap(), &cfg).unwrap();
        assert!((c.center(0)[0] - 0.001).abs() < 1e-18);

        let mut c = bank(0.0);
        apply_center_update(&mut c, &Matrix::from_vec(1, 1, vec![-0.004]).unwrap(), &cfg).unwrap();
        assert!((c.center(0)[0] + 0.0004).abs() < 1e-18);

        let mut c = bank(0.5);
        apply_center_update(&mut c, &Matrix::zeros(1, 1), &cfg).unwrap();
        assert_eq!(c.center(0)[0], 0.5);
    }
}
