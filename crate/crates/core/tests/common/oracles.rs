//! Independent checks shared by the integration tests and the acceptance
//! harness.

use nalgebra::{DMatrix, Matrix2};
use patchfold::eigen::{fit_pca, EigenBasis, WeightDistribution};
use patchfold::patch::{Patch, PatchSet, PatchShape};
use rand::Rng;
use rand_distr::StandardNormal;

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Two random orthonormal directions in `d` dimensions.
pub fn orthonormal_pair(d: usize, r: &mut impl Rng) -> [Vec<f64>; 2] {
    let mut u: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
    unit(&mut u);
    let mut v: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
    let proj: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(b, a)| *b -= proj * a);
    unit(&mut v);
    [u, v]
}

/// `n` patches on `0.5 + a·u + b·v + noise` with `a, b ~ U(-1, 1)`.
pub fn planted_plane(n: usize, shape: PatchShape, noise: f64, seed: u64) -> (PatchSet, [Vec<f64>; 2]) {
    let mut r = super::rng(seed);
    let dirs = orthonormal_pair(shape.len(), &mut r);
    let patches = (0..n)
        .map(|_| {
            let a: f64 = r.random_range(-1.0..1.0);
            let b: f64 = r.random_range(-1.0..1.0);
            let data = (0..shape.len())
                .map(|i| {
                    let e: f64 = r.sample(StandardNormal);
                    (0.5 + a * dirs[0][i] + b * dirs[1][i] + noise * e) as f32
                })
                .collect();
            Patch::new(shape, data).expect("planted values stay inside [0, 1]")
        })
        .collect();
    (PatchSet::unlabeled(patches).unwrap(), dirs)
}

/// Largest principal angle (radians) between the planted plane and the
/// span of the first two components of `basis`.
pub fn max_principal_angle(basis: &EigenBasis, dirs: &[Vec<f64>; 2]) -> f64 {
    let mut m = Matrix2::<f64>::zeros();
    for (i, u) in dirs.iter().enumerate() {
        for j in 0..2 {
            m[(i, j)] = u.iter().zip(basis.component(j)).map(|(a, b)| a * b).sum();
        }
    }
    let smallest = m.singular_values().min();
    smallest.min(1.0).acos()
}

/// Fits `k = 2` to a planted plane. Returns the worst angle to the planted
/// plane and the worst angle to the top-2 right singular vectors of the
/// centred data.
pub fn subspace_recovery(seed: u64) -> (f64, f64) {
    let (set, dirs) = planted_plane(50, PatchShape::new(16, 16), 1e-3, seed);
    let basis = fit_pca(&set, 2).unwrap();
    let svd = top_singular_vectors(&set, 2);
    let exact = [svd[0].clone(), svd[1].clone()];
    (max_principal_angle(&basis, &dirs), max_principal_angle(&basis, &exact))
}

fn centred_matrix(set: &PatchSet) -> DMatrix<f64> {
    let n = set.len();
    let d = set.shape().len();
    let mut m = DMatrix::<f64>::zeros(n, d);
    for (i, p) in set.patches().iter().enumerate() {
        for (j, &v) in p.data().iter().enumerate() {
            m[(i, j)] = f64::from(v);
        }
    }
    for j in 0..d {
        let mean = m.column(j).mean();
        m.column_mut(j).add_scalar_mut(-mean);
    }
    m
}

/// Leading `k` right singular vectors of the centred data, by nalgebra SVD.
pub fn top_singular_vectors(set: &PatchSet, k: usize) -> Vec<Vec<f64>> {
    let svd = centred_matrix(set).svd(false, true);
    let vt = svd.v_t.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    order[..k].iter().map(|&i| vt.row(i).iter().copied().collect()).collect()
}

fn as_f64(p: &Patch) -> Vec<f64> {
    p.data().iter().map(|&v| f64::from(v)).collect()
}

/// Sum over patches of the per-patch MSE of the unclamped projection.
pub fn total_projection_mse(basis: &EigenBasis, set: &PatchSet) -> f64 {
    set.patches()
        .iter()
        .map(|p| {
            let x = as_f64(p);
            let y = basis.decode_raw(&basis.encode(p).unwrap()).unwrap();
            x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64
        })
        .sum()
}

/// Worst absolute error of the unclamped projection over the whole set.
pub fn max_projection_error(basis: &EigenBasis, set: &PatchSet) -> f64 {
    set.patches()
        .iter()
        .flat_map(|p| {
            let x = as_f64(p);
            let y = basis.decode_raw(&basis.encode(p).unwrap()).unwrap();
            x.into_iter().zip(y).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Rank of the mean-centred data matrix, computed by SVD.
pub fn centred_rank(set: &PatchSet) -> usize {
    let m = centred_matrix(set);
    m.rank(1e-7 * m.singular_values().max())
}

/// Largest `|sample mean − μ| / (σ/√n)` over components, from `n` draws.
pub fn weight_sampling_z(dist: &WeightDistribution, n: usize, seed: u64) -> f64 {
    let mut r = patchfold::rng::seeded(seed);
    let k = dist.means.len();
    let mut sum = vec![0.0; k];
    for _ in 0..n {
        let w = dist.sample(&mut r).unwrap();
        sum.iter_mut().zip(&w.0).for_each(|(s, v)| *s += v);
    }
    (0..k)
        .filter(|&j| dist.stds[j] > 0.0)
        .map(|j| (sum[j] / n as f64 - dist.means[j]).abs() / (dist.stds[j] / (n as f64).sqrt()))
        .fold(0.0, f64::max)
}
