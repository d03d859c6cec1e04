//! Shared run configuration for the command-line tool.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compositor::{PlacementConfig, MIN_BOX_AREA_PX};
use crate::detector::EndpointConfig;
use crate::embedding::TsneConfig;
use crate::error::{Error, Result};
use crate::evaluation::Interpolation;
use crate::manifold::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub patches: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaSection {
    pub k: usize,
}

impl Default for PcaSection {
    fn default() -> Self {
        Self { k: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub interpolation: Interpolation,
    pub min_box_area: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            interpolation: Interpolation::Point101,
            min_box_area: MIN_BOX_AREA_PX,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub pca: PcaSection,
    pub train: TrainConfig,
    pub placement: PlacementConfig,
    pub detector: EndpointConfig,
    pub tsne: TsneConfig,
    pub eval: EvalSection,
}

fn problems_of(r: Result<()>) -> Vec<String> {
    match r {
        Ok(()) => Vec::new(),
        Err(Error::Config(p)) => p,
        Err(e) => vec![e.to_string()],
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))
    }

    /// Checks every section plus the existence of `required` paths and
    /// reports all violations at once.
    pub fn validate(&self, required: &[(&str, Option<&Path>)]) -> Result<()> {
        let mut p = Vec::new();
        if self.pca.k == 0 {
            p.push("pca.k must be at least 1".into());
        }
        p.extend(problems_of(self.train.validate()).into_iter().map(|s| format!("train: {s}")));
        p.extend(problems_of(self.placement.validate()).into_iter().map(|s| format!("placement: {s}")));
        p.extend(self.detector.problems().into_iter().map(|s| format!("detector: {s}")));
        p.extend(self.tsne.problems().into_iter().map(|s| format!("tsne: {s}")));
        if !(self.eval.min_box_area >= 0.0) {
            p.push(format!("eval.min_box_area {} must be nonnegative", self.eval.min_box_area));
        }
        for (name, path) in required {
            match path {
                None => p.push(format!("{name} is required")),
                Some(path) if !path.exists() => p.push(format!("{name} {} does not exist", path.display())),
                Some(_) => {}
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}
