//! Eigenpatches: PCA over flattened patches.
//!
//! The basis is fitted through the n×n Gram matrix of the mean-centred data
//! (n is a few hundred while D = C·H·W is ~12k), then re-orthonormalised in
//! `f64`. Each component is signed so that its largest-magnitude
//! coordinate is positive.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::{Patch, PatchSet, PatchShape};
use crate::rng;
use crate::tensor_file::{self, TensorRecord};

pub const SIGN_CONVENTION: &str = "largest-magnitude-coordinate-positive";

/// Relative threshold below which a singular value counts as zero.
const RANK_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct EigenBasis {
    shape: PatchShape,
    mean: Vec<f64>,
    /// k rows of length D, row-major.
    components: Vec<f64>,
    singular_values: Vec<f64>,
    total_variance: f64,
    rank: usize,
    n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(pub Vec<f64>);

/// Independent per-component normals fitted to encoded patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDistribution {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

fn flatten(p: &Patch) -> impl Iterator<Item = f64> + '_ {
    p.data().iter().map(|&v| f64::from(v))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn fit_pca(set: &PatchSet, k: usize) -> Result<EigenBasis> {
    let n = set.len();
    let shape = set.shape();
    let d = shape.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "PCA needs at least 2 patches, got {n}"
        )));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::invalid(format!(
            "k = {k} outside 1..={} for {n} patches of dimension {d}",
            n.min(d)
        )));
    }

    let mut mean = vec![0.0; d];
    for p in set.patches() {
        for (m, v) in mean.iter_mut().zip(flatten(p)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut x = vec![0.0; n * d];
    for (row, p) in x.chunks_mut(d).zip(set.patches()) {
        for ((dst, v), m) in row.iter_mut().zip(flatten(p)).zip(&mean) {
            *dst = v - m;
        }
    }

    let mut gram = vec![0.0; n * n];
    // SAFETY: x is n×d row-major and gram is n×n, both fully allocated.
    unsafe {
        matrixmultiply::dgemm(
            n,
            d,
            n,
            1.0,
            x.as_ptr(),
            d as isize,
            1,
            x.as_ptr(),
            1,
            d as isize,
            0.0,
            gram.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    let total_variance: f64 = (0..n).map(|i| gram[i * n + i]).sum();
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &gram));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let sigma_max = eig.eigenvalues[order[0]].max(0.0).sqrt();
    let threshold = RANK_TOLERANCE * sigma_max.max(f64::MIN_POSITIVE) * (n as f64).sqrt();
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut singular_values = Vec::with_capacity(k);
    for &j in order.iter().take(k) {
        let sigma = eig.eigenvalues[j].max(0.0).sqrt();
        if sigma <= threshold || sigma_max == 0.0 {
            break;
        }
        let u = eig.eigenvectors.column(j);
        let mut v = vec![0.0; d];
        for (i, row) in x.chunks(d).enumerate() {
            let ui = u[i];
            for (vv, xv) in v.iter_mut().zip(row) {
                *vv += ui * xv;
            }
        }
        v.iter_mut().for_each(|e| *e /= sigma);
        components.push(v);
        singular_values.push(sigma);
    }
    let rank = components.len();

    // Two Gram–Schmidt passes restore orthonormality lost in the Gram route.
    for _ in 0..2 {
        for i in 0..components.len() {
            let (done, rest) = components.split_at_mut(i);
            let v = &mut rest[0];
            for prev in done.iter() {
                let c = dot(v, prev);
                v.iter_mut().zip(prev).for_each(|(a, b)| *a -= c * b);
            }
            let norm = dot(v, v).sqrt();
            v.iter_mut().for_each(|a| *a /= norm);
        }
    }

    // Complete the basis past the data rank with canonical directions.
    let mut axis = 0;
    while components.len() < k {
        let mut v = vec![0.0; d];
        v[axis] = 1.0;
        axis += 1;
        for _ in 0..2 {
            for prev in &components {
                let c = dot(&v, prev);
                v.iter_mut().zip(prev).for_each(|(a, b)| *a -= c * b);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        components.push(v);
        singular_values.push(0.0);
    }

    for v in &mut components {
        apply_sign_convention(v);
    }

    Ok(EigenBasis {
        shape,
        mean,
        components: components.concat(),
        singular_values,
        total_variance,
        rank,
        n_samples: n,
    })
}

fn apply_sign_convention(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

impl EigenBasis {
    pub fn k(&self) -> usize {
        self.singular_values.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn shape(&self) -> PatchShape {
        self.shape
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn component(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.components[j * d..(j + 1) * d]
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Numerical rank of the centred data among the fitted components.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// True when some of the k components carry zero variance.
    pub fn is_rank_deficient(&self) -> bool {
        self.rank < self.k()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Fraction of total variance captured by the first `j` components.
    pub fn explained_variance(&self, j: usize) -> f64 {
        if self.total_variance <= 0.0 {
            return 1.0;
        }
        let captured: f64 = self.singular_values[..j.min(self.k())]
            .iter()
            .map(|s| s * s)
            .sum();
        (captured / self.total_variance).clamp(0.0, 1.0)
    }

    /// Basis restricted to its first `k` components.
    pub fn truncated(&self, k: usize) -> Result<EigenBasis> {
        if k == 0 || k > self.k() {
            return Err(Error::invalid(format!(
                "cannot truncate {} components to {k}",
                self.k()
            )));
        }
        Ok(EigenBasis {
            components: self.components[..k * self.dim()].to_vec(),
            singular_values: self.singular_values[..k].to_vec(),
            rank: self.rank.min(k),
            ..self.clone()
        })
    }

    pub fn encode(&self, patch: &Patch) -> Result<WeightVector> {
        if patch.shape() != self.shape {
            return Err(Error::shape(format!(
                "patch {} vs basis {}",
                patch.shape(),
                self.shape
            )));
        }
        let centred: Vec<f64> = flatten(patch).zip(&self.mean).map(|(v, m)| v - m).collect();
        Ok(WeightVector(
            (0..self.k())
                .map(|j| dot(self.component(j), &centred))
                .collect(),
        ))
    }

    /// `mean + Σ w_j·E_j` before clamping.
    pub fn decode_raw(&self, w: &WeightVector) -> Result<Vec<f64>> {
        if w.0.len() != self.k() {
            return Err(Error::shape(format!(
                "{} weights for a basis of {} components",
                w.0.len(),
                self.k()
            )));
        }
        let mut out = self.mean.clone();
        for (j, &wj) in w.0.iter().enumerate() {
            if wj != 0.0 {
                out.iter_mut()
                    .zip(self.component(j))
                    .for_each(|(o, e)| *o += wj * e);
            }
        }
        Ok(out)
    }

    /// Reconstruction clamped to `[0, 1]`.
    pub fn decode(&self, w: &WeightVector) -> Result<Patch> {
        Patch::from_clamped(self.shape, self.decode_raw(w)?)
    }

    pub fn reconstruct(&self, patch: &Patch) -> Result<Patch> {
        self.decode(&self.encode(patch)?)
    }

    /// Writes `basis.json`, `mean.ptf` and `components.ptf` (one record per
    /// component) into `dir`. Payloads are stored as `f32`.
    pub fn save(&self, dir: &Path, distribution: Option<&WeightDistribution>) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::file(dir))?;
        let header = BasisHeader {
            k: self.k(),
            shape: self.shape,
            sign_convention: SIGN_CONVENTION.into(),
            singular_values: self.singular_values.clone(),
            total_variance: self.total_variance,
            rank: self.rank,
            n_samples: self.n_samples,
            distribution: distribution.cloned(),
        };
        let path = dir.join("basis.json");
        let mut w = BufWriter::new(File::create(&path).map_err(Error::file(&path))?);
        serde_json::to_writer_pretty(&mut w, &header)?;
        w.write_all(b"\n")?;
        let dims = [self.shape.channels, self.shape.height, self.shape.width];
        let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        tensor_file::save_records(
            &dir.join("mean.ptf"),
            &[TensorRecord::new(dims, to32(&self.mean))?],
        )?;
        let comps = (0..self.k())
            .map(|j| TensorRecord::new(dims, to32(self.component(j))))
            .collect::<Result<Vec<_>>>()?;
        tensor_file::save_records(&dir.join("components.ptf"), &comps)
    }

    pub fn load(dir: &Path) -> Result<(EigenBasis, Option<WeightDistribution>)> {
        let path = dir.join("basis.json");
        let header: BasisHeader = serde_json::from_reader(BufReader::new(
            File::open(&path).map_err(Error::file(&path))?,
        ))?;
        if header.sign_convention != SIGN_CONVENTION {
            return Err(Error::Format(format!(
                "unsupported sign convention {:?}",
                header.sign_convention
            )));
        }
        let d = header.shape.len();
        let mean = tensor_file::load_records(&dir.join("mean.ptf"))?;
        let comps = tensor_file::load_records(&dir.join("components.ptf"))?;
        if mean.len() != 1 || mean[0].data.len() != d {
            return Err(Error::Format(
                "mean.ptf must hold one record of the basis shape".into(),
            ));
        }
        if comps.len() != header.k || comps.iter().any(|r| r.data.len() != d) {
            return Err(Error::Format(format!(
                "components.ptf must hold {} records of length {d}",
                header.k
            )));
        }
        if header.singular_values.len() != header.k {
            return Err(Error::Format("singular value count differs from k".into()));
        }
        let to64 = |v: &[f32]| v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>();
        let basis = EigenBasis {
            shape: header.shape,
            mean: to64(&mean[0].data),
            components: comps.iter().flat_map(|r| to64(&r.data)).collect(),
            singular_values: header.singular_values,
            total_variance: header.total_variance,
            rank: header.rank,
            n_samples: header.n_samples,
        };
        Ok((basis, header.distribution))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BasisHeader {
    k: usize,
    shape: PatchShape,
    sign_convention: String,
    singular_values: Vec<f64>,
    total_variance: f64,
    rank: usize,
    n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    distribution: Option<WeightDistribution>,
}

/// Per-component sample mean and standard deviation (n − 1) of the encoded
/// set.
pub fn fit_weight_distribution(basis: &EigenBasis, set: &PatchSet) -> Result<WeightDistribution> {
    let n = set.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "weight distribution needs at least 2 patches, got {n}"
        )));
    }
    let encoded = set
        .patches()
        .iter()
        .map(|p| basis.encode(p))
        .collect::<Result<Vec<_>>>()?;
    let k = basis.k();
    let mut means = vec![0.0; k];
    for w in &encoded {
        means.iter_mut().zip(&w.0).for_each(|(m, v)| *m += v);
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut stds = vec![0.0; k];
    for w in &encoded {
        stds.iter_mut()
            .zip(&w.0)
            .zip(&means)
            .for_each(|((s, v), m)| *s += (v - m) * (v - m));
    }
    stds.iter_mut()
        .for_each(|s| *s = (*s / (n - 1) as f64).sqrt());
    Ok(WeightDistribution { means, stds })
}

impl WeightDistribution {
    pub fn sample(&self, rng: &mut rng::Rng) -> Result<WeightVector> {
        self.means
            .iter()
            .zip(&self.stds)
            .map(|(&m, &s)| {
                let normal =
                    Normal::new(m, s).map_err(|e| Error::invalid(format!("weight normal: {e}")))?;
                Ok(normal.sample(rng))
            })
            .collect::<Result<Vec<_>>>()
            .map(WeightVector)
    }
}

/// Decodes weights drawn independently from `N(means_j, stds_j)`.
pub fn sample_pca_patch(basis: &EigenBasis, dist: &WeightDistribution, seed: u64) -> Result<Patch> {
    if dist.means.len() != basis.k() || dist.stds.len() != basis.k() {
        return Err(Error::shape(format!(
            "distribution over {} components for a basis of {}",
            dist.means.len(),
            basis.k()
        )));
    }
    let mut r = rng::seeded(seed);
    basis.decode(&dist.sample(&mut r)?)
}
