use super::{ParamGroup, ParamStore, Real, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

/// Adam hyper-parameters with the customary defaults.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of `group` in place. `step_index` is
/// 1-based.
pub fn adam_step<R: Real>(
    group: &mut ParamGroup<R>,
    grad: &Tensor<R>,
    lr: f64,
    cfg: &AdamConfig,
    step_index: u64,
) -> Result<()> {
    if !group.trainable {
        return Err(Error::Frozen(group.name.clone()));
    }
    if step_index == 0 {
        return Err(invalid!("adam step index is 1-based"));
    }
    if grad.len() != group.tensor.len() {
        return Err(shape_err!(
            "gradient for `{}` has {} values, parameter has {}",
            group.name,
            grad.len(),
            group.tensor.len()
        ));
    }
    let dims = group.tensor.dims().to_vec();
    let (m, v) = group
        .slots
        .get_or_insert_with(|| (Tensor::zeros(&dims), Tensor::zeros(&dims)));
    let (b1, b2) = (R::of(cfg.beta1), R::of(cfg.beta2));
    let bc1 = R::of(1.0 - cfg.beta1.powi(step_index as i32));
    let bc2 = R::of(1.0 - cfg.beta2.powi(step_index as i32));
    let lr = R::of(lr);
    let eps = R::of(cfg.eps);
    let params = group.tensor.data_mut();
    for (((p, mi), vi), &g) in params
        .iter_mut()
        .zip(m.data_mut())
        .zip(v.data_mut())
        .zip(grad.data())
    {
        *mi = b1 * *mi + (R::one() - b1) * g;
        *vi = b2 * *vi + (R::one() - b2) * g * g;
        let mhat = *mi / bc1;
        let vhat = *vi / bc2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Applies one Adam step to every group that has a gradient, indexed by
/// store position. Groups without a gradient are left untouched.
pub fn apply_adam<R: Real>(
    store: &mut ParamStore<R>,
    grads: Vec<Option<Tensor<R>>>,
    lr: f64,
    cfg: &AdamConfig,
    step_index: u64,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(shape_err!("{} gradients for {} parameter groups", grads.len(), store.len()));
    }
    for (i, g) in grads.into_iter().enumerate() {
        if let Some(g) = g {
            adam_step(store.at_mut(i), &g, lr, cfg, step_index)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_group(x: f64) -> ParamGroup<f64> {
        ParamGroup::new("p", Tensor::scalar(x))
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut g = scalar_group(1.25);
        adam_step(&mut g, &Tensor::scalar(0.0), 0.1, &AdamConfig::default(), 1).unwrap();
        assert_eq!(g.tensor.item(), 1.25);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Hand recurrence: m=0.05, v=0.00025, mhat=0.5, vhat=0.25, step=0.1*0.5/0.5.
        let mut g = scalar_group(1.0);
        adam_step(&mut g, &Tensor::scalar(0.5), 0.1, &AdamConfig::default(), 1).unwrap();
        assert!((g.tensor.item() - 0.9).abs() < 1e-6);
        let mut g = scalar_group(0.0);
        adam_step(&mut g, &Tensor::scalar(-3e3), 0.01, &AdamConfig::default(), 1).unwrap();
        assert!((g.tensor.item() - 0.01).abs() < 1e-9);
    }

    #[test]
    fn frozen_group_is_rejected() {
        let mut g = scalar_group(1.0);
        g.trainable = false;
        let err = adam_step(&mut g, &Tensor::scalar(1.0), 0.1, &AdamConfig::default(), 1);
        assert!(matches!(err, Err(Error::Frozen(_))));
        assert_eq!(g.tensor.item(), 1.0);
        assert!(adam_step(&mut scalar_group(1.0), &Tensor::scalar(1.0), 0.1, &AdamConfig::default(), 0).is_err());
    }
}
