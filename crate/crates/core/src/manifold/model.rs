use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CONDITIONS, LATENT_DIM};
use crate::eigen::EigenBasis;
use crate::error::{Error, Result};
use crate::neural::{load_network, save_network, CheckpointHeader, LayerSpec, Network, Tensor};
use crate::patch::{ParamGroupId, Patch, PatchSet, PatchShape};
use crate::rng;

/// Channel widths of the stride-2 convolution stack. Each stage halves the
/// spatial size, so patch sides must be divisible by `2^channels.len()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub channels: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 128],
        }
    }
}

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PADDING: usize = 1;

impl Architecture {
    fn bottom(&self, shape: PatchShape) -> Result<(usize, usize, usize)> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::invalid(format!(
                "architecture needs nonzero channel widths, got {:?}",
                self.channels
            )));
        }
        let factor = 1usize << self.channels.len();
        if shape.height % factor != 0 || shape.width % factor != 0 {
            return Err(Error::invalid(format!(
                "patch {shape} is not divisible by {factor} in both spatial dims"
            )));
        }
        Ok((
            *self.channels.last().unwrap(),
            shape.height / factor,
            shape.width / factor,
        ))
    }

    /// Convolution stack from `in_channels` planes to a dense head with
    /// `out` outputs.
    pub fn encoder(
        &self,
        shape: PatchShape,
        in_channels: usize,
        out: usize,
    ) -> Result<Vec<LayerSpec>> {
        let (c, h, w) = self.bottom(shape)?;
        let mut specs = Vec::new();
        let mut prev = in_channels;
        for &ch in &self.channels {
            specs.push(LayerSpec::Conv2d {
                in_channels: prev,
                out_channels: ch,
                kernel: KERNEL,
                stride: STRIDE,
                padding: PADDING,
            });
            specs.push(LayerSpec::Relu);
            prev = ch;
        }
        specs.push(LayerSpec::Flatten);
        specs.push(LayerSpec::Dense {
            fan_in: c * h * w,
            fan_out: out,
        });
        Ok(specs)
    }

    /// Mirror of [`Architecture::encoder`] from an `input`-vector to a patch.
    pub fn decoder(&self, shape: PatchShape, input: usize) -> Result<Vec<LayerSpec>> {
        let (c, h, w) = self.bottom(shape)?;
        let mut specs = vec![
            LayerSpec::Dense {
                fan_in: input,
                fan_out: c * h * w,
            },
            LayerSpec::Relu,
            LayerSpec::Reshape {
                shape: vec![c, h, w],
            },
        ];
        let widths: Vec<usize> = self.channels.iter().rev().copied().collect();
        for (i, &ch) in widths.iter().enumerate() {
            let out = widths.get(i + 1).copied().unwrap_or(shape.channels);
            specs.push(LayerSpec::TransposedConv2d {
                in_channels: ch,
                out_channels: out,
                kernel: KERNEL,
                stride: STRIDE,
                padding: PADDING,
                output_padding: 1,
            });
            specs.push(if i + 1 < widths.len() {
                LayerSpec::Relu
            } else {
                LayerSpec::Sigmoid
            });
        }
        Ok(specs)
    }
}

/// Stacks patches into a `[B, C, H, W]` tensor.
pub(crate) fn batch_tensor<T: crate::neural::Real>(patches: &[&Patch]) -> Result<Tensor<T>> {
    let shape = patches
        .first()
        .ok_or_else(|| Error::invalid("empty batch"))?
        .shape();
    let mut data = Vec::with_capacity(patches.len() * shape.len());
    for p in patches {
        if p.shape() != shape {
            return Err(Error::shape(format!(
                "patch {} in a batch of {shape}",
                p.shape()
            )));
        }
        data.extend(p.data().iter().map(|&v| T::of(f64::from(v))));
    }
    Tensor::new(
        vec![patches.len(), shape.channels, shape.height, shape.width],
        data,
    )
}

/// Appends one constant one-hot plane per condition to a `[B, C, H, W]` batch.
pub(crate) fn with_condition_planes<T: crate::neural::Real>(
    x: &Tensor<T>,
    groups: &[ParamGroupId],
) -> Result<Tensor<T>> {
    let s = x.shape();
    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
    if groups.len() != b {
        return Err(Error::shape(format!(
            "{} conditions for a batch of {b}",
            groups.len()
        )));
    }
    let mut data = Vec::with_capacity(b * (c + CONDITIONS) * plane);
    for (item, g) in x.data().chunks(c * plane).zip(groups) {
        data.extend_from_slice(item);
        for k in 0..CONDITIONS {
            let v = if k == g.index() { T::one() } else { T::zero() };
            data.extend(std::iter::repeat_n(v, plane));
        }
    }
    Tensor::new(vec![b, c + CONDITIONS, s[2], s[3]], data)
}

/// Concatenates latent codes `[B, 2]` with one-hot conditions into `[B, 7]`.
pub(crate) fn with_condition_values<T: crate::neural::Real>(
    z: &[T],
    groups: &[ParamGroupId],
) -> Result<Tensor<T>> {
    if z.len() != groups.len() * LATENT_DIM {
        return Err(Error::shape(format!(
            "{} latent values for {} conditions",
            z.len(),
            groups.len()
        )));
    }
    let mut data = Vec::with_capacity(groups.len() * (LATENT_DIM + CONDITIONS));
    for (zi, g) in z.chunks(LATENT_DIM).zip(groups) {
        data.extend_from_slice(zi);
        for k in 0..CONDITIONS {
            data.push(if k == g.index() { T::one() } else { T::zero() });
        }
    }
    Tensor::new(vec![groups.len(), LATENT_DIM + CONDITIONS], data)
}

fn decoded_patches(out: Tensor<f32>, shape: PatchShape) -> Result<Vec<Patch>> {
    out.data()
        .chunks(shape.len())
        .map(|c| Patch::from_clamped(shape, c.iter().map(|&v| f64::from(v))))
        .collect()
}

const INFER_BATCH: usize = 64;

/// Per-dimension bounds of the encoded training patches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentBox {
    pub min: [f64; LATENT_DIM],
    pub max: [f64; LATENT_DIM],
}

impl LatentBox {
    pub fn from_points(points: &[[f64; LATENT_DIM]]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid(format!(
                "latent box needs at least 2 encoded patches, got {}",
                points.len()
            )));
        }
        let mut min = [f64::INFINITY; LATENT_DIM];
        let mut max = [f64::NEG_INFINITY; LATENT_DIM];
        for p in points {
            for d in 0..LATENT_DIM {
                if !p[d].is_finite() {
                    return Err(Error::NonFinite("encoded latent point".into()));
                }
                min[d] = min[d].min(p[d]);
                max[d] = max[d].max(p[d]);
            }
        }
        Ok(Self { min, max })
    }

    pub fn midpoint(&self) -> [f64; LATENT_DIM] {
        std::array::from_fn(|d| 0.5 * (self.min[d] + self.max[d]))
    }

    pub fn contains(&self, z: &[f64; LATENT_DIM]) -> bool {
        (0..LATENT_DIM).all(|d| self.min[d] <= z[d] && z[d] <= self.max[d])
    }

    /// Uniform draw per dimension; a zero-width dimension yields its bound.
    pub fn sample(&self, rng: &mut rng::Rng) -> [f64; LATENT_DIM] {
        std::array::from_fn(|d| {
            if self.max[d] > self.min[d] {
                rng.random_range(self.min[d]..=self.max[d])
            } else {
                self.min[d]
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ae,
    Cvae,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    kind: ModelKind,
    shape: PatchShape,
    architecture: Architecture,
    epochs_trained: u32,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    latent_box: Option<LatentBox>,
}

/// Autoencoder: patch → 2-vector → patch.
#[derive(Debug, Clone)]
pub struct AeModel {
    pub encoder: Network<f32>,
    pub decoder: Network<f32>,
    pub shape: PatchShape,
    pub architecture: Architecture,
    pub epochs_trained: u32,
    pub seed: u64,
}

impl AeModel {
    /// Freshly initialised model; encoder and decoder draw from separate
    /// streams derived from `seed`.
    pub fn new(shape: PatchShape, architecture: Architecture, seed: u64) -> Result<Self> {
        let enc = architecture.encoder(shape, shape.channels, LATENT_DIM)?;
        let dec = architecture.decoder(shape, LATENT_DIM)?;
        let input = vec![shape.channels, shape.height, shape.width];
        Ok(Self {
            encoder: Network::new(enc, input, rng::derive_seed(seed, "ae-encoder"))?,
            decoder: Network::new(dec, vec![LATENT_DIM], rng::derive_seed(seed, "ae-decoder"))?,
            shape,
            architecture,
            epochs_trained: 0,
            seed,
        })
    }

    pub fn encode_all(&self, patches: &[Patch]) -> Result<Vec<[f64; LATENT_DIM]>> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(INFER_BATCH) {
            let refs: Vec<&Patch> = chunk.iter().collect();
            let z = self.encoder.infer(&batch_tensor(&refs)?)?;
            out.extend(
                z.data()
                    .chunks(LATENT_DIM)
                    .map(|c| [f64::from(c[0]), f64::from(c[1])]),
            );
        }
        Ok(out)
    }

    pub fn encode(&self, patch: &Patch) -> Result<[f64; LATENT_DIM]> {
        Ok(self.encode_all(std::slice::from_ref(patch))?[0])
    }

    pub fn decode_all(&self, zs: &[[f64; LATENT_DIM]]) -> Result<Vec<Patch>> {
        let mut out = Vec::with_capacity(zs.len());
        for chunk in zs.chunks(INFER_BATCH) {
            let data = chunk.iter().flatten().map(|&v| v as f32).collect();
            let y = self
                .decoder
                .infer(&Tensor::new(vec![chunk.len(), LATENT_DIM], data)?)?;
            out.extend(decoded_patches(y, self.shape)?);
        }
        Ok(out)
    }

    pub fn decode(&self, z: [f64; LATENT_DIM]) -> Result<Patch> {
        Ok(self.decode_all(&[z])?.remove(0))
    }

    pub fn reconstruct_all(&self, patches: &[Patch]) -> Result<Vec<Patch>> {
        self.decode_all(&self.encode_all(patches)?)
    }

    pub fn latent_box(&self, set: &PatchSet) -> Result<LatentBox> {
        LatentBox::from_points(&self.encode_all(set.patches())?)
    }

    pub fn save(&self, dir: &Path, latent_box: Option<&LatentBox>) -> Result<()> {
        save_pair(
            dir,
            &ModelHeader {
                kind: ModelKind::Ae,
                shape: self.shape,
                architecture: self.architecture.clone(),
                epochs_trained: self.epochs_trained,
                seed: self.seed,
                latent_box: latent_box.copied(),
            },
            &self.encoder,
            &self.decoder,
        )
    }

    pub fn load(dir: &Path) -> Result<(Self, Option<LatentBox>)> {
        let (h, encoder, decoder) = load_pair(dir, ModelKind::Ae)?;
        let model = Self {
            encoder,
            decoder,
            shape: h.shape,
            architecture: h.architecture,
            epochs_trained: h.epochs_trained,
            seed: h.seed,
        };
        model.check_layout(LATENT_DIM, LATENT_DIM, model.shape.channels)?;
        Ok((model, h.latent_box))
    }

    fn check_layout(&self, enc_out: usize, dec_in: usize, in_channels: usize) -> Result<()> {
        check_layout(
            &self.architecture,
            self.shape,
            &self.encoder,
            &self.decoder,
            in_channels,
            enc_out,
            dec_in,
        )
    }
}

/// Draws `z ~ Uniform(box)` and decodes it.
pub fn sample_ae_patch(model: &AeModel, latent_box: &LatentBox, seed: u64) -> Result<Patch> {
    let mut r = rng::seeded(seed);
    model.decode(latent_box.sample(&mut r))
}

/// Conditional VAE: (patch, group) → (μ, log σ²); (z, group) → patch.
#[derive(Debug, Clone)]
pub struct CvaeModel {
    pub encoder: Network<f32>,
    pub decoder: Network<f32>,
    pub shape: PatchShape,
    pub architecture: Architecture,
    pub epochs_trained: u32,
    pub seed: u64,
}

impl CvaeModel {
    pub fn new(shape: PatchShape, architecture: Architecture, seed: u64) -> Result<Self> {
        let enc = architecture.encoder(shape, shape.channels + CONDITIONS, 2 * LATENT_DIM)?;
        let dec = architecture.decoder(shape, LATENT_DIM + CONDITIONS)?;
        let input = vec![shape.channels + CONDITIONS, shape.height, shape.width];
        Ok(Self {
            encoder: Network::new(enc, input, rng::derive_seed(seed, "cvae-encoder"))?,
            decoder: Network::new(
                dec,
                vec![LATENT_DIM + CONDITIONS],
                rng::derive_seed(seed, "cvae-decoder"),
            )?,
            shape,
            architecture,
            epochs_trained: 0,
            seed,
        })
    }

    /// Posterior mean and log-variance per patch.
    #[allow(clippy::type_complexity)]
    pub fn encode_all(
        &self,
        patches: &[Patch],
        groups: &[ParamGroupId],
    ) -> Result<Vec<([f64; LATENT_DIM], [f64; LATENT_DIM])>> {
        if patches.len() != groups.len() {
            return Err(Error::shape(format!(
                "{} patches with {} conditions",
                patches.len(),
                groups.len()
            )));
        }
        let mut out = Vec::with_capacity(patches.len());
        for (chunk, g) in patches.chunks(INFER_BATCH).zip(groups.chunks(INFER_BATCH)) {
            let refs: Vec<&Patch> = chunk.iter().collect();
            let x = with_condition_planes(&batch_tensor::<f32>(&refs)?, g)?;
            let y = self.encoder.infer(&x)?;
            out.extend(y.data().chunks(2 * LATENT_DIM).map(|c| {
                (
                    [f64::from(c[0]), f64::from(c[1])],
                    [f64::from(c[2]), f64::from(c[3])],
                )
            }));
        }
        Ok(out)
    }

    pub fn decode_all(
        &self,
        zs: &[[f64; LATENT_DIM]],
        groups: &[ParamGroupId],
    ) -> Result<Vec<Patch>> {
        if zs.len() != groups.len() {
            return Err(Error::shape(format!(
                "{} codes with {} conditions",
                zs.len(),
                groups.len()
            )));
        }
        let mut out = Vec::with_capacity(zs.len());
        for (chunk, g) in zs.chunks(INFER_BATCH).zip(groups.chunks(INFER_BATCH)) {
            let flat: Vec<f32> = chunk.iter().flatten().map(|&v| v as f32).collect();
            let y = self.decoder.infer(&with_condition_values(&flat, g)?)?;
            out.extend(decoded_patches(y, self.shape)?);
        }
        Ok(out)
    }

    pub fn decode(&self, z: [f64; LATENT_DIM], group: ParamGroupId) -> Result<Patch> {
        Ok(self.decode_all(&[z], &[group])?.remove(0))
    }

    /// Decodes the posterior mean of each patch under its own group.
    pub fn reconstruct_all(
        &self,
        patches: &[Patch],
        groups: &[ParamGroupId],
    ) -> Result<Vec<Patch>> {
        let mus: Vec<_> = self
            .encode_all(patches, groups)?
            .into_iter()
            .map(|(m, _)| m)
            .collect();
        self.decode_all(&mus, groups)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_pair(
            dir,
            &ModelHeader {
                kind: ModelKind::Cvae,
                shape: self.shape,
                architecture: self.architecture.clone(),
                epochs_trained: self.epochs_trained,
                seed: self.seed,
                latent_box: None,
            },
            &self.encoder,
            &self.decoder,
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (h, encoder, decoder) = load_pair(dir, ModelKind::Cvae)?;
        let model = Self {
            encoder,
            decoder,
            shape: h.shape,
            architecture: h.architecture,
            epochs_trained: h.epochs_trained,
            seed: h.seed,
        };
        check_layout(
            &model.architecture,
            model.shape,
            &model.encoder,
            &model.decoder,
            model.shape.channels + CONDITIONS,
            2 * LATENT_DIM,
            LATENT_DIM + CONDITIONS,
        )?;
        Ok(model)
    }
}

/// Draws a group uniformly from A–E and `z ~ N(0, I)`, then decodes.
pub fn sample_cvae_patch(model: &CvaeModel, seed: u64) -> Result<(Patch, ParamGroupId)> {
    let mut r = rng::seeded(seed);
    let group = ParamGroupId::ALL[r.random_range(0..CONDITIONS)];
    let z: [f64; LATENT_DIM] = std::array::from_fn(|_| StandardNormal.sample(&mut r));
    Ok((model.decode(z, group)?, group))
}

fn check_layout(
    arch: &Architecture,
    shape: PatchShape,
    encoder: &Network<f32>,
    decoder: &Network<f32>,
    in_channels: usize,
    enc_out: usize,
    dec_in: usize,
) -> Result<()> {
    if encoder.specs() != arch.encoder(shape, in_channels, enc_out)?.as_slice()
        || decoder.specs() != arch.decoder(shape, dec_in)?.as_slice()
    {
        return Err(Error::Format(
            "stored networks do not match the declared architecture".into(),
        ));
    }
    Ok(())
}

fn save_pair(
    dir: &Path,
    header: &ModelHeader,
    encoder: &Network<f32>,
    decoder: &Network<f32>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::file(dir))?;
    let path = dir.join("model.json");
    let mut w = BufWriter::new(File::create(&path).map_err(Error::file(&path))?);
    serde_json::to_writer_pretty(&mut w, header)?;
    w.write_all(b"\n")?;
    for (name, net) in [("encoder", encoder), ("decoder", decoder)] {
        let h = CheckpointHeader {
            layers: net.specs().to_vec(),
            input_shape: net.input_shape().to_vec(),
            optimizer: None,
            schedule: None,
            epoch: header.epochs_trained,
            seed: header.seed,
        };
        save_network(net, &h, &dir.join(name))?;
    }
    Ok(())
}

fn load_pair(dir: &Path, kind: ModelKind) -> Result<(ModelHeader, Network<f32>, Network<f32>)> {
    let path = dir.join("model.json");
    let header: ModelHeader = serde_json::from_reader(BufReader::new(
        File::open(&path).map_err(Error::file(&path))?,
    ))?;
    if header.kind != kind {
        return Err(Error::Format(format!(
            "{} holds a {:?} model, expected {kind:?}",
            path.display(),
            header.kind
        )));
    }
    let (encoder, _) = load_network(&dir.join("encoder"))?;
    let (decoder, _) = load_network(&dir.join("decoder"))?;
    Ok((header, encoder, decoder))
}

/// Anything that maps a patch (and, when needed, its group) to a
/// reconstruction.
pub trait Reconstructor {
    fn reconstruct_set(&self, set: &PatchSet) -> Result<Vec<Patch>>;
}

impl Reconstructor for EigenBasis {
    fn reconstruct_set(&self, set: &PatchSet) -> Result<Vec<Patch>> {
        set.patches().iter().map(|p| self.reconstruct(p)).collect()
    }
}

impl Reconstructor for AeModel {
    fn reconstruct_set(&self, set: &PatchSet) -> Result<Vec<Patch>> {
        if set.shape() != self.shape {
            return Err(Error::shape(format!(
                "set {} vs model {}",
                set.shape(),
                self.shape
            )));
        }
        self.reconstruct_all(set.patches())
    }
}

impl Reconstructor for CvaeModel {
    fn reconstruct_set(&self, set: &PatchSet) -> Result<Vec<Patch>> {
        if set.shape() != self.shape {
            return Err(Error::shape(format!(
                "set {} vs model {}",
                set.shape(),
                self.shape
            )));
        }
        self.reconstruct_all(set.patches(), &set.require_labels()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructionReport {
    pub per_patch: Vec<f64>,
    /// Mean MSE per group label; unlabeled patches are grouped under `"-"`.
    pub per_group: BTreeMap<String, f64>,
    pub mean: f64,
}

impl ReconstructionReport {
    pub fn to_csv(&self, labels: &[Option<ParamGroupId>]) -> String {
        let mut s = String::from("index,group,mse\n");
        for (i, (mse, g)) in self.per_patch.iter().zip(labels).enumerate() {
            let g = g.map_or("-", ParamGroupId::as_str);
            s.push_str(&format!("{i},{g},{mse}\n"));
        }
        s
    }
}

pub fn reconstruction_report(
    model: &dyn Reconstructor,
    set: &PatchSet,
) -> Result<ReconstructionReport> {
    let recon = model.reconstruct_set(set)?;
    let per_patch = set
        .patches()
        .iter()
        .zip(&recon)
        .map(|(p, r)| p.mse(r))
        .collect::<Result<Vec<_>>>()?;
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (mse, g) in per_patch.iter().zip(set.labels()) {
        let e = sums
            .entry(g.map_or("-", ParamGroupId::as_str).to_string())
            .or_default();
        e.0 += mse;
        e.1 += 1;
    }
    let mean = per_patch.iter().sum::<f64>() / per_patch.len() as f64;
    Ok(ReconstructionReport {
        per_group: sums
            .into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect(),
        per_patch,
        mean,
    })
}
