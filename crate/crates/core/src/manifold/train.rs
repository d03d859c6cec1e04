use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{batch_tensor, with_condition_planes, with_condition_values, Architecture};
use super::{AeModel, CvaeModel, LATENT_DIM};
use crate::error::{Error, Result};
use crate::neural::{
    kl_gaussian, mse_loss, AdamWConfig, Gradients, Network, OptimizerState, Real, StepLr, Tensor,
};
use crate::patch::{ParamGroupId, Patch, PatchSet};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch: usize,
    /// Moment and decay settings; `lr` is overwritten every epoch by
    /// `schedule`.
    pub adamw: AdamWConfig,
    pub schedule: StepLr,
    pub seed: u64,
    pub kl_weight: f64,
    /// Draw ε for the reparameterisation. With `false` the CVAE decodes its
    /// posterior mean directly.
    pub sample_noise: bool,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 64,
            adamw: AdamWConfig::default(),
            schedule: StepLr::default(),
            seed: 0,
            kl_weight: 1.0,
            sample_noise: true,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    /// The full-length schedule: 2 000 epochs.
    pub fn full_length() -> Self {
        Self {
            epochs: 2000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be positive".to_string());
        }
        if self.batch == 0 {
            problems.push("batch must be positive".to_string());
        }
        if !(self.schedule.initial > 0.0) {
            problems.push(format!(
                "initial learning rate {} must be positive",
                self.schedule.initial
            ));
        }
        if self.schedule.every == 0 || !(self.schedule.factor > 0.0) {
            problems.push("learning-rate decay needs a positive period and factor".to_string());
        }
        if !(self.kl_weight >= 0.0) {
            problems.push(format!("kl_weight {} must be nonnegative", self.kl_weight));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochLoss>,
    /// Epoch whose loss went non-finite. The returned model holds the
    /// parameters from the start of that epoch.
    pub diverged_at: Option<u32>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,total,recon,kl\n");
        for (i, e) in self.history.iter().enumerate() {
            s.push_str(&format!("{},{},{},{}\n", i + 1, e.total, e.recon, e.kl));
        }
        s
    }
}

/// Reconstruction MSE of a batch and its gradients w.r.t. both networks.
pub fn ae_objective<T: Real>(
    encoder: &Network<T>,
    decoder: &Network<T>,
    x: &Tensor<T>,
) -> Result<(T, Gradients<T>, Gradients<T>)> {
    let (z, enc_tape) = encoder.forward(x)?;
    let (y, dec_tape) = decoder.forward(&z)?;
    let (loss, grad) = mse_loss(&y, x)?;
    let (dec_grads, dz) = decoder.backward(&dec_tape, &grad)?;
    let (enc_grads, _) = encoder.backward(&enc_tape, &dz)?;
    Ok((loss, enc_grads, dec_grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvaeLoss<T> {
    pub total: T,
    pub recon: T,
    pub kl: T,
}

/// `MSE + kl_weight·KL` for one batch with `z = μ + exp(logvar/2)⊙ε`.
/// `eps` holds `B·2` values; `None` means ε = 0.
pub fn cvae_objective<T: Real>(
    encoder: &Network<T>,
    decoder: &Network<T>,
    x: &Tensor<T>,
    groups: &[ParamGroupId],
    eps: Option<&[T]>,
    kl_weight: T,
) -> Result<(CvaeLoss<T>, Gradients<T>, Gradients<T>)> {
    let b = x.batch();
    let zeros = vec![T::zero(); b * LATENT_DIM];
    let eps = eps.unwrap_or(&zeros);
    if eps.len() != b * LATENT_DIM {
        return Err(Error::shape(format!(
            "{} noise values for a batch of {b}",
            eps.len()
        )));
    }
    let (stats, enc_tape) = encoder.forward(&with_condition_planes(x, groups)?)?;
    let half = T::of(0.5);
    let mut mu = Vec::with_capacity(b * LATENT_DIM);
    let mut logvar = Vec::with_capacity(b * LATENT_DIM);
    for row in stats.data().chunks(2 * LATENT_DIM) {
        mu.extend_from_slice(&row[..LATENT_DIM]);
        logvar.extend_from_slice(&row[LATENT_DIM..]);
    }
    let sigma: Vec<T> = logvar.iter().map(|&lv| (lv * half).exp()).collect();
    let z: Vec<T> = mu
        .iter()
        .zip(&sigma)
        .zip(eps)
        .map(|((&m, &s), &e)| m + s * e)
        .collect();
    let (y, dec_tape) = decoder.forward(&with_condition_values(&z, groups)?)?;
    let (recon, grad) = mse_loss(&y, x)?;
    let kl = kl_gaussian(
        &Tensor::new(vec![b, LATENT_DIM], mu)?,
        &Tensor::new(vec![b, LATENT_DIM], logvar)?,
    )?;
    let (dec_grads, dinput) = decoder.backward(&dec_tape, &grad)?;
    let width = dinput.item_len();
    let mut dstats = Vec::with_capacity(b * 2 * LATENT_DIM);
    for i in 0..b {
        let dz = &dinput.data()[i * width..i * width + LATENT_DIM];
        for d in 0..LATENT_DIM {
            dstats.push(dz[d] + kl_weight * kl.grad_mu.data()[i * LATENT_DIM + d]);
        }
        for d in 0..LATENT_DIM {
            let j = i * LATENT_DIM + d;
            dstats.push(dz[d] * eps[j] * half * sigma[j] + kl_weight * kl.grad_logvar.data()[j]);
        }
    }
    let (enc_grads, _) =
        encoder.backward(&enc_tape, &Tensor::new(vec![b, 2 * LATENT_DIM], dstats)?)?;
    let loss = CvaeLoss {
        total: recon + kl_weight * kl.loss,
        recon,
        kl: kl.loss,
    };
    Ok((loss, enc_grads, dec_grads))
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_))
}

/// Shared epoch loop. `step` runs one batch, updates the networks and
/// returns its loss; a non-finite loss rolls back to the epoch start.
fn run_epochs<F>(
    n: usize,
    cfg: &TrainConfig,
    nets: &mut (Network<f32>, Network<f32>),
    mut step: F,
) -> Result<TrainReport>
where
    F: FnMut(
        &[usize],
        &mut (Network<f32>, Network<f32>),
        &mut OptimizerState<f32>,
    ) -> Result<EpochLoss>,
{
    cfg.validate()?;
    let sizes: Vec<usize> = nets
        .0
        .params()
        .iter()
        .chain(nets.1.params())
        .flat_map(|p| [p.weight.len(), p.bias.len()])
        .collect();
    let mut opt = OptimizerState::<f32>::new(cfg.adamw, sizes);
    let mut shuffle = rng::derived(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs as usize);
    for epoch in 0..cfg.epochs {
        opt.set_lr(cfg.schedule.lr(epoch));
        let snapshot = nets.clone();
        order.shuffle(&mut shuffle);
        let mut sum = EpochLoss {
            total: 0.0,
            recon: 0.0,
            kl: 0.0,
        };
        let mut diverged = false;
        for batch in order.chunks(cfg.batch) {
            match step(batch, nets, &mut opt) {
                Ok(l) if l.total.is_finite() => {
                    let w = batch.len() as f64;
                    sum.total += w * l.total;
                    sum.recon += w * l.recon;
                    sum.kl += w * l.kl;
                }
                Ok(_) => diverged = true,
                Err(e) if is_divergence(&e) => diverged = true,
                Err(e) => return Err(e),
            }
            if diverged {
                break;
            }
        }
        if diverged {
            *nets = snapshot;
            log::warn!("training diverged in epoch {}", epoch + 1);
            return Ok(TrainReport {
                history,
                diverged_at: Some(epoch + 1),
            });
        }
        let n = n as f64;
        history.push(EpochLoss {
            total: sum.total / n,
            recon: sum.recon / n,
            kl: sum.kl / n,
        });
    }
    Ok(TrainReport {
        history,
        diverged_at: None,
    })
}

fn apply(
    nets: &mut (Network<f32>, Network<f32>),
    opt: &mut OptimizerState<f32>,
    ge: &Gradients<f32>,
    gd: &Gradients<f32>,
) -> Result<()> {
    let mut grads = ge.buffers();
    grads.extend(gd.buffers());
    let (enc, dec) = nets;
    let mut params = enc.buffers_mut();
    params.extend(dec.buffers_mut());
    opt.step(&mut params, &grads)
}

fn gather<'a>(set: &'a PatchSet, idx: &[usize]) -> Vec<&'a Patch> {
    idx.iter().map(|&i| &set.patches()[i]).collect()
}

/// Trains an autoencoder on `set` by minimising reconstruction MSE.
pub fn train_ae(set: &PatchSet, cfg: &TrainConfig) -> Result<(AeModel, TrainReport)> {
    let mut model = AeModel::new(set.shape(), cfg.architecture.clone(), cfg.seed)?;
    let mut nets = (model.encoder.clone(), model.decoder.clone());
    let report = run_epochs(set.len(), cfg, &mut nets, |idx, nets, opt| {
        let x = batch_tensor::<f32>(&gather(set, idx))?;
        let (loss, ge, gd) = ae_objective(&nets.0, &nets.1, &x)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("reconstruction loss".into()));
        }
        apply(nets, opt, &ge, &gd)?;
        let l = f64::from(loss);
        Ok(EpochLoss {
            total: l,
            recon: l,
            kl: 0.0,
        })
    })?;
    (model.encoder, model.decoder) = nets;
    model.epochs_trained = report.history.len() as u32;
    Ok((model, report))
}

/// Trains a conditional VAE on a fully labeled `set`.
pub fn train_cvae(set: &PatchSet, cfg: &TrainConfig) -> Result<(CvaeModel, TrainReport)> {
    let labels = set.require_labels()?;
    let mut model = CvaeModel::new(set.shape(), cfg.architecture.clone(), cfg.seed)?;
    let mut nets = (model.encoder.clone(), model.decoder.clone());
    let mut noise = rng::derived(cfg.seed, "reparameterisation");
    let kl_weight = cfg.kl_weight as f32;
    let report = run_epochs(set.len(), cfg, &mut nets, |idx, nets, opt| {
        let x = batch_tensor::<f32>(&gather(set, idx))?;
        let groups: Vec<ParamGroupId> = idx.iter().map(|&i| labels[i]).collect();
        let eps: Option<Vec<f32>> = cfg.sample_noise.then(|| {
            (0..idx.len() * LATENT_DIM)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut noise);
                    v as f32
                })
                .collect()
        });
        let (loss, ge, gd) =
            cvae_objective(&nets.0, &nets.1, &x, &groups, eps.as_deref(), kl_weight)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite("CVAE loss".into()));
        }
        apply(nets, opt, &ge, &gd)?;
        Ok(EpochLoss {
            total: f64::from(loss.total),
            recon: f64::from(loss.recon),
            kl: f64::from(loss.kl),
        })
    })?;
    (model.encoder, model.decoder) = nets;
    model.epochs_trained = report.history.len() as u32;
    Ok((model, report))
}
