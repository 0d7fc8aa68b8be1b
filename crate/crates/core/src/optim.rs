//! Adam with bias correction.
//!
//! Updated weights are rounded onto the `f32` grid so a 4-byte checkpoint
//! holds exactly what the optimizer produced.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::model::to_f32_grid;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            bail!(Config, "adam betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2);
        }
        if !(self.eps > 0.0) {
            bail!(Config, "adam eps must be positive, got {}", self.eps);
        }
        Ok(())
    }
}

/// First and second moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(Tensor::zeros_like).collect();
        Self { v: m.clone(), m, step: 0 }
    }
}

/// One bias-corrected Adam update of every `(name, tensor)` in `params`.
///
/// Nothing is modified when a gradient holds a non-finite value; the error
/// names the offending parameter.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    state: &mut AdamState,
    grads: &[Tensor],
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    if !(lr > 0.0) {
        bail!(Config, "learning rate must be positive, got {lr}");
    }
    let mut params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        bail!(
            Shape,
            "{} parameters, {} gradients, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        );
    }
    for ((name, p), gr) in params.iter().zip(grads) {
        if p.shape() != gr.shape() {
            bail!(Shape, "gradient of {name} has shape {:?}, parameter {:?}", gr.shape(), p.shape());
        }
        if let Some(i) = gr.data().iter().position(|v| !v.is_finite()) {
            bail!(Numeric, "non-finite gradient {} in {name} at index {i}", gr.data()[i]);
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let c2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w = to_f32_grid(*w - lr * m_hat / (libm::sqrt(v_hat) + cfg.eps));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use alloc::vec;

    fn run(values: &mut [Tensor], state: &mut AdamState, grads: &[Tensor], lr: f64) -> Result<()> {
        let names = ["a", "b", "c"];
        adam_step(names.iter().copied().zip(values.iter_mut()), state, grads, lr, &AdamConfig::default())
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_the_step() {
        let mut p = vec![Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(&p);
        run(&mut p, &mut st, &[Tensor::zeros(&[3])], 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_is_a_signed_lr_step() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::new(&p);
        run(&mut p, &mut st, &[Tensor::scalar(1.0)], 1e-3).unwrap();
        // m̂ = 1, v̂ = 1, update = -lr / (1 + eps)
        assert!((p[0].data()[0] + 1e-3).abs() < 1e-9, "{}", p[0].data()[0]);
    }

    #[test]
    fn momentum_makes_two_steps_differ_from_one_double_step() {
        let g = [Tensor::scalar(0.3)];
        let mut two = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(&two);
        run(&mut two, &mut st, &g, 1e-2).unwrap();
        let g2 = [Tensor::scalar(-0.7)];
        run(&mut two, &mut st, &g2, 1e-2).unwrap();

        let mut one = vec![Tensor::scalar(1.0)];
        let mut st1 = AdamState::new(&one);
        run(&mut one, &mut st1, &g, 2e-2).unwrap();
        assert_ne!(two[0].data()[0], one[0].data()[0]);
        // hand-evaluated: m = 0.9·0.03 + 0.1·(-0.7) = -0.043, v = 0.999·9e-5 + 0.001·0.49
        let m: f64 = -0.043 / (1.0 - 0.81);
        let v: f64 = (0.999 * 9e-5 + 0.001 * 0.49) / (1.0 - 0.999f64.powi(2));
        let expect = 1.0 - 1e-2 - 1e-2 * m / (v.sqrt() + 1e-8);
        assert!((two[0].data()[0] - expect).abs() < 1e-6, "{} vs {expect}", two[0].data()[0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_changes_nothing() {
        let mut p = vec![Tensor::scalar(1.0), Tensor::zeros(&[2])];
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let err = run(&mut p, &mut st, &[Tensor::scalar(0.1), Tensor::new(vec![2], vec![0.0, f64::NAN]).unwrap()], 1e-3)
            .unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains(" b "), "{msg}"),
            e => panic!("{e:?}"),
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn shape_and_config_errors() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::new(&p);
        assert!(matches!(run(&mut p, &mut st, &[Tensor::zeros(&[3])], 1e-3), Err(Error::Shape(_))));
        assert!(matches!(run(&mut p, &mut st, &[Tensor::zeros(&[2])], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn updates_stay_on_the_f32_grid() {
        let mut p = vec![Tensor::new(vec![4], vec![0.1f32 as f64, 0.2f32 as f64, -0.3f32 as f64, 0.0]).unwrap()];
        let mut st = AdamState::new(&p);
        for k in 0..5 {
            let g = Tensor::from_fn(&[4], |i| (i as f64 + 1.0) * 0.37 - k as f64 * 0.1);
            run(&mut p, &mut st, &[g], 1e-3).unwrap();
        }
        assert!(p[0].data().iter().all(|&v| v == to_f32_grid(v)));
    }
}
