use rand::Rng as _;

use crate::eigen::{sample_pca_patch, EigenBasis, WeightDistribution};
use crate::error::{Error, Result};
use crate::manifold::{sample_ae_patch, sample_cvae_patch, AeModel, CvaeModel, LatentBox};
use crate::patch::{Patch, PatchSet};
use crate::rng::Rng;

/// A patch together with the id that [`PatchSource::resolve`] maps back to
/// it.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcedPatch {
    pub id: String,
    pub patch: Patch,
}

/// Where placed patches come from.
pub trait PatchSource: Sync {
    fn draw(&self, rng: &mut Rng) -> Result<SourcedPatch>;

    /// Regenerates the patch behind an id produced by `draw`.
    fn resolve(&self, id: &str) -> Result<Patch>;
}

fn unknown(id: &str) -> Error {
    Error::invalid(format!("patch id {id:?} does not belong to this source"))
}

fn parse_tagged(id: &str, tag: &str) -> Result<u64> {
    id.strip_prefix(tag)
        .and_then(|s| s.strip_prefix('/'))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| unknown(id))
}

/// Always the same patch.
pub struct FixedPatch {
    pub id: String,
    pub patch: Patch,
}

impl PatchSource for FixedPatch {
    fn draw(&self, _rng: &mut Rng) -> Result<SourcedPatch> {
        Ok(SourcedPatch {
            id: self.id.clone(),
            patch: self.patch.clone(),
        })
    }

    fn resolve(&self, id: &str) -> Result<Patch> {
        if id == self.id {
            Ok(self.patch.clone())
        } else {
            Err(unknown(id))
        }
    }
}

/// Uniform choice from a patch set; ids are `set/<index>`.
pub struct SetSource {
    pub set: PatchSet,
}

impl PatchSource for SetSource {
    fn draw(&self, rng: &mut Rng) -> Result<SourcedPatch> {
        let i = rng.random_range(0..self.set.len());
        Ok(SourcedPatch {
            id: format!("set/{i}"),
            patch: self.set.patches()[i].clone(),
        })
    }

    fn resolve(&self, id: &str) -> Result<Patch> {
        let i = parse_tagged(id, "set")? as usize;
        self.set.patches().get(i).cloned().ok_or_else(|| unknown(id))
    }
}

/// Eigenpatch combinations with normally distributed weights; ids are
/// `pca/<seed>`.
pub struct PcaSource {
    pub basis: EigenBasis,
    pub distribution: WeightDistribution,
}

impl PatchSource for PcaSource {
    fn draw(&self, rng: &mut Rng) -> Result<SourcedPatch> {
        let seed: u64 = rng.random();
        Ok(SourcedPatch {
            id: format!("pca/{seed}"),
            patch: sample_pca_patch(&self.basis, &self.distribution, seed)?,
        })
    }

    fn resolve(&self, id: &str) -> Result<Patch> {
        sample_pca_patch(&self.basis, &self.distribution, parse_tagged(id, "pca")?)
    }
}

/// Autoencoder decodes of uniform points in the latent box; ids are
/// `ae/<seed>`.
pub struct AeSource {
    pub model: AeModel,
    pub latent_box: LatentBox,
}

impl PatchSource for AeSource {
    fn draw(&self, rng: &mut Rng) -> Result<SourcedPatch> {
        let seed: u64 = rng.random();
        Ok(SourcedPatch {
            id: format!("ae/{seed}"),
            patch: sample_ae_patch(&self.model, &self.latent_box, seed)?,
        })
    }

    fn resolve(&self, id: &str) -> Result<Patch> {
        sample_ae_patch(&self.model, &self.latent_box, parse_tagged(id, "ae")?)
    }
}

/// CVAE decodes of `z ~ N(0, I)` under a random group; ids are
/// `cvae/<seed>`.
pub struct CvaeSource {
    pub model: CvaeModel,
}

impl PatchSource for CvaeSource {
    fn draw(&self, rng: &mut Rng) -> Result<SourcedPatch> {
        let seed: u64 = rng.random();
        Ok(SourcedPatch {
            id: format!("cvae/{seed}"),
            patch: sample_cvae_patch(&self.model, seed)?.0,
        })
    }

    fn resolve(&self, id: &str) -> Result<Patch> {
        Ok(sample_cvae_patch(&self.model, parse_tagged(id, "cvae")?)?.0)
    }
}
