//! Central-difference verification of reverse-mode gradients.

use alloc::vec::Vec;

use super::{Graph, Tensor, Var};
use crate::error::{bail, Result};

/// `|ad - fd| / max(1e-8, |ad| + |fd|)`.
pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8)
}

/// Max relative error between `backward` and central differences of `f` at `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let per_input = finite_diff_check_many(|g, vars| f(g, vars[0]), core::slice::from_ref(x), h)?;
    Ok(per_input[0])
}

/// Like [`finite_diff_check`] over several inputs at once; returns the max
/// relative error of each input.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        bail!(Config, "finite-difference step must be positive, got {h}");
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t)).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.scalar(root))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for (i, &var) in vars.iter().enumerate() {
        let ad = grads.tensor(var, &inputs[i]);
        let mut worst: f64 = 0.0;
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(ad.data()[j], fd));
        }
        out.push(worst);
    }
    Ok(out)
}
