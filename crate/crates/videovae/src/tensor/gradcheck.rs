//! Finite-difference gradient checking.

use super::{no_grad, Tensor};
use crate::Result;

/// Compare reverse-mode gradients of `f` at `point` against central
/// differences, coordinate by coordinate. Returns the max relative error
/// with denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` must be deterministic (run dropout in eval mode).
pub fn grad_check(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    point: &Tensor,
    eps: f32,
) -> Result<f32> {
    let base = point.to_vec();
    let shape = point.shape().to_vec();

    let x = Tensor::param(base.clone(), &shape)?;
    let loss = f(&x)?;
    loss.backward()?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; base.len()]);

    let eval = |data: Vec<f32>| -> Result<f32> {
        no_grad(|| {
            let t = Tensor::from_vec(data, &shape)?;
            f(&t)?.item()
        })
    };

    let mut max_rel = 0.0f32;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
