use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Mean of squared differences over every element, with its gradient
/// `2(pred − target)/N`.
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "mse between {:?} and {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = T::of(pred.len() as f64);
    let two = T::of(2.0);
    let mut sum = T::zero();
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d * d;
            two * d / n
        })
        .collect();
    Ok((sum / n, Tensor::new(pred.shape().to_vec(), grad)?))
}

#[derive(Debug, Clone)]
pub struct KlOutput<T> {
    pub loss: T,
    pub grad_mu: Tensor<T>,
    pub grad_logvar: Tensor<T>,
}

/// KL(N(μ, σ²) ‖ N(0, I)) summed over latent units and averaged over the
/// batch: `−½ Σ (1 + logvar − μ² − exp(logvar)) / batch`.
pub fn kl_gaussian<T: Real>(mu: &Tensor<T>, logvar: &Tensor<T>) -> Result<KlOutput<T>> {
    if mu.shape() != logvar.shape() {
        return Err(Error::shape(format!(
            "kl between mu {:?} and logvar {:?}",
            mu.shape(),
            logvar.shape()
        )));
    }
    if !logvar.all_finite() || !mu.all_finite() {
        return Err(Error::NonFinite("kl inputs".into()));
    }
    let batch = T::of(mu.batch() as f64);
    let half = T::of(0.5);
    let mut sum = T::zero();
    let mut grad_logvar = Vec::with_capacity(mu.len());
    for (&m, &lv) in mu.data().iter().zip(logvar.data()) {
        let e = lv.exp();
        sum += T::one() + lv - m * m - e;
        grad_logvar.push(half * (e - T::one()) / batch);
    }
    let grad_mu = mu.data().iter().map(|&m| m / batch).collect();
    let loss = -half * sum / batch;
    if !loss.is_finite() {
        return Err(Error::NonFinite("kl divergence".into()));
    }
    Ok(KlOutput {
        loss,
        grad_mu: Tensor::new(mu.shape().to_vec(), grad_mu)?,
        grad_logvar: Tensor::new(mu.shape().to_vec(), grad_logvar)?,
    })
}
