//! Timestep-wise variational objective: closed-form diagonal-Gaussian KL
//! plus a pixel-wise L1 reconstruction term.
//!
//! Reduction convention: sum over pixels, latent dims and time; mean over
//! the batch. This keeps the reconstruction/KL balance independent of
//! batch size.

use crate::model::{ClipBatch, GaussianParams, StepRecord};
use crate::tensor::Tensor;
use crate::{Result, VvError};

/// KL(q || p) for diagonal Gaussians, summed over dims, mean over batch.
///
/// Per coordinate:
/// `0.5 * (log var_p - log var_q + (var_q + (mu_q - mu_p)^2) / var_p - 1)`.
/// Differentiable in both arguments; exactly zero when q == p.
pub fn gaussian_kl(q: &GaussianParams, p: &GaussianParams) -> Result<Tensor> {
    if q.mu.shape() != p.mu.shape() {
        return Err(VvError::Dimension(format!(
            "gaussian_kl: shape mismatch {:?} vs {:?}",
            q.mu.shape(),
            p.mu.shape()
        )));
    }
    let n = q.batch() as f32;
    let diff = q.mu.sub(&p.mu)?;
    let var_q = q.log_var.exp();
    let inv_var_p = p.log_var.neg().exp();
    let ratio = var_q.add(&diff.mul(&diff)?)?.mul(&inv_var_p)?;
    let per_coord = p
        .log_var
        .sub(&q.log_var)?
        .add(&ratio)?
        .add_scalar(-1.0)
        .scale(0.5);
    Ok(per_coord.sum_all().scale(1.0 / n))
}

/// Pixel-wise L1: sum of absolute differences over pixels and channels,
/// mean over the batch.
pub fn recon_loss(decoded: &Tensor, target: &Tensor) -> Result<Tensor> {
    if decoded.shape() != target.shape() {
        return Err(VvError::Dimension(format!(
            "recon_loss: geometry mismatch {:?} vs {:?}",
            decoded.shape(),
            target.shape()
        )));
    }
    let n = decoded.shape()[0] as f32;
    Ok(decoded.sub(target)?.abs().sum_all().scale(1.0 / n))
}

/// Per-timestep loss decomposition. `total` stays on the graph for
/// backprop; the per-t vectors are detached snapshots.
pub struct LossReport {
    pub total: Tensor,
    pub recon_per_t: Vec<f32>,
    pub kl_per_t: Vec<f32>,
    pub beta: f32,
}

impl LossReport {
    pub fn recon_sum(&self) -> f32 {
        self.recon_per_t.iter().sum()
    }

    pub fn kl_sum(&self) -> f32 {
        self.kl_per_t.iter().sum()
    }

    /// `total == sum(recon_per_t) + beta * sum(kl_per_t)` holds exactly
    /// (bit-level) because both sides reduce in the same order.
    pub fn check_decomposition(&self) -> Result<()> {
        let mut recon = 0.0f32;
        for r in &self.recon_per_t {
            recon += r;
        }
        let mut kl = 0.0f32;
        for k in &self.kl_per_t {
            kl += k;
        }
        let expected = recon + self.beta * kl;
        let total = self.total.item()?;
        if total.to_bits() != expected.to_bits() {
            return Err(VvError::Numerical(format!(
                "loss decomposition mismatch: total {total} vs per-t sum {expected}"
            )));
        }
        Ok(())
    }
}

/// Assemble the timestep-wise bound from a training forward pass:
/// reconstruction against each target frame plus KL between the dynamic
/// posterior and the step's prior.
pub fn sequence_elbo(records: &[StepRecord], batch: &ClipBatch, beta: f32) -> Result<LossReport> {
    if records.len() != batch.t {
        return Err(VvError::Dimension(format!(
            "sequence_elbo: {} records for a clip of length {}",
            records.len(),
            batch.t
        )));
    }
    let mut recon_per_t = Vec::with_capacity(batch.t);
    let mut kl_per_t = Vec::with_capacity(batch.t);
    let mut recon_total: Option<Tensor> = None;
    let mut kl_total: Option<Tensor> = None;
    for (record, target) in records.iter().zip(&batch.frames) {
        let r = recon_loss(&record.decoded, target)?;
        let k = gaussian_kl(&record.dynamic, &record.prior)?;
        recon_per_t.push(r.item()?);
        kl_per_t.push(k.item()?);
        recon_total = Some(match recon_total {
            Some(acc) => acc.add(&r)?,
            None => r,
        });
        kl_total = Some(match kl_total {
            Some(acc) => acc.add(&k)?,
            None => k,
        });
    }
    let total = recon_total
        .unwrap()
        .add(&kl_total.unwrap().scale(beta))?;
    let report = LossReport {
        total,
        recon_per_t,
        kl_per_t,
        beta,
    };
    report.check_decomposition()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, RngStream};

    fn gaussian(mu: Vec<f32>, log_var: Vec<f32>) -> GaussianParams {
        let d = mu.len();
        GaussianParams {
            mu: Tensor::from_vec(mu, &[1, d]).unwrap(),
            log_var: Tensor::from_vec(log_var, &[1, d]).unwrap(),
        }
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let q = gaussian(vec![0.7, -1.2], vec![0.3, -0.5]);
        let p = gaussian(vec![0.7, -1.2], vec![0.3, -0.5]);
        assert_eq!(gaussian_kl(&q, &p).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn kl_unit_shift_is_half() {
        // KL(N(1,1) || N(0,1)) = 0.5
        let q = gaussian(vec![1.0], vec![0.0]);
        let p = gaussian(vec![0.0], vec![0.0]);
        let kl = gaussian_kl(&q, &p).unwrap().item().unwrap();
        assert!((kl - 0.5).abs() < 1e-7, "kl {kl}");
    }

    #[test]
    fn kl_is_additive_over_dims() {
        let mut rng = RngStream::new(21);
        let draw = |rng: &mut RngStream, d: usize| {
            let mu: Vec<f32> = (0..d).map(|_| rng.normal()).collect();
            let lv: Vec<f32> = (0..d).map(|_| rng.normal() * 0.5).collect();
            (mu, lv)
        };
        let (mu_q, lv_q) = draw(&mut rng, 3);
        let (mu_p, lv_p) = draw(&mut rng, 3);
        let joint = gaussian_kl(
            &gaussian(mu_q.clone(), lv_q.clone()),
            &gaussian(mu_p.clone(), lv_p.clone()),
        )
        .unwrap()
        .item()
        .unwrap();
        let mut split = 0.0;
        for i in 0..3 {
            split += gaussian_kl(
                &gaussian(vec![mu_q[i]], vec![lv_q[i]]),
                &gaussian(vec![mu_p[i]], vec![lv_p[i]]),
            )
            .unwrap()
            .item()
            .unwrap();
        }
        assert!((joint - split).abs() < 1e-5, "{joint} vs {split}");
    }

    #[test]
    fn kl_matches_monte_carlo_oracle() {
        // closed form vs sample mean of log q(z) - log p(z), z ~ q
        let mut rng = RngStream::new(8);
        for _ in 0..5 {
            let d = 1 + (rng.uniform() * 3.0) as usize;
            let mu_q: Vec<f32> = (0..d).map(|_| rng.normal()).collect();
            let lv_q: Vec<f32> = (0..d).map(|_| rng.normal() * 0.6).collect();
            let mu_p: Vec<f32> = (0..d).map(|_| rng.normal()).collect();
            let lv_p: Vec<f32> = (0..d).map(|_| rng.normal() * 0.6).collect();
            let closed = gaussian_kl(
                &gaussian(mu_q.clone(), lv_q.clone()),
                &gaussian(mu_p.clone(), lv_p.clone()),
            )
            .unwrap()
            .item()
            .unwrap() as f64;

            let n = 200_000usize;
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            for _ in 0..n {
                let mut ll = 0.0f64;
                for j in 0..d {
                    let (mq, vq) = (f64::from(mu_q[j]), f64::from(lv_q[j]).exp());
                    let (mp, vp) = (f64::from(mu_p[j]), f64::from(lv_p[j]).exp());
                    let z = mq + vq.sqrt() * f64::from(rng.normal());
                    let log_q = -0.5 * ((2.0 * std::f64::consts::PI * vq).ln() + (z - mq).powi(2) / vq);
                    let log_p = -0.5 * ((2.0 * std::f64::consts::PI * vp).ln() + (z - mp).powi(2) / vp);
                    ll += log_q - log_p;
                }
                sum += ll;
                sum_sq += ll * ll;
            }
            let mean = sum / n as f64;
            let var = (sum_sq / n as f64 - mean * mean).max(0.0);
            let stderr = (var / n as f64).sqrt();
            assert!(
                (closed - mean).abs() <= 3.0 * stderr + 1e-6,
                "closed {closed} vs mc {mean} (stderr {stderr})"
            );
        }
    }

    #[test]
    fn kl_gradient_passes_finite_differences() {
        let mut rng = RngStream::new(31);
        let p = gaussian(
            (0..4).map(|_| rng.normal()).collect(),
            (0..4).map(|_| rng.normal() * 0.5).collect(),
        );
        // gradient w.r.t. (mu_q ++ log_var_q) packed in one tensor
        let pd: Vec<f32> = (0..8).map(|_| rng.normal() * 0.5).collect();
        let point = Tensor::from_vec(pd, &[1, 8]).unwrap();
        let err = grad_check(
            |x| {
                let q = GaussianParams {
                    mu: x.narrow(1, 0, 4)?,
                    log_var: x.narrow(1, 4, 4)?,
                };
                gaussian_kl(&q, &p)
            },
            &point,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-2, "max relative error {err}");
    }

    #[test]
    fn recon_perfect_match_is_zero() {
        let a = Tensor::from_vec(vec![0.2, 0.8], &[1, 1, 1, 2]).unwrap();
        assert_eq!(recon_loss(&a, &a).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn recon_two_half_pixels_sum_to_one() {
        let a = Tensor::from_vec(vec![1.0, 0.0], &[1, 1, 1, 2]).unwrap();
        let b = Tensor::from_vec(vec![0.5, 0.5], &[1, 1, 1, 2]).unwrap();
        assert_eq!(recon_loss(&a, &b).unwrap().item().unwrap(), 1.0);
    }

    #[test]
    fn recon_invariant_under_consistent_permutation() {
        let a = Tensor::from_vec(vec![0.1, 0.5, 0.9, 0.3], &[1, 1, 2, 2]).unwrap();
        let b = Tensor::from_vec(vec![0.2, 0.4, 0.8, 0.1], &[1, 1, 2, 2]).unwrap();
        let ap = Tensor::from_vec(vec![0.3, 0.9, 0.5, 0.1], &[1, 1, 2, 2]).unwrap();
        let bp = Tensor::from_vec(vec![0.1, 0.8, 0.4, 0.2], &[1, 1, 2, 2]).unwrap();
        let l1 = recon_loss(&a, &b).unwrap().item().unwrap();
        let l2 = recon_loss(&ap, &bp).unwrap().item().unwrap();
        assert!((l1 - l2).abs() < 1e-7);
    }

    #[test]
    fn recon_geometry_mismatch_is_dimension_error() {
        let a = Tensor::zeros(&[1, 1, 2, 2]);
        let b = Tensor::zeros(&[1, 1, 2, 3]);
        assert!(matches!(recon_loss(&a, &b), Err(VvError::Dimension(_))));
    }
}
