//! Exact t-SNE.
//!
//! Gaussian input affinities are calibrated per point to a target
//! perplexity by bisection on the precision, symmetrised and normalised to
//! sum to one. The 2-D layout minimises KL(P‖Q) under a Student-t kernel by
//! gradient descent with momentum, per-coordinate gains and early
//! exaggeration.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::evaluation::Stat;
use crate::rng;

const ENTROPY_TOL: f64 = 1e-10;
const MAX_BISECTIONS: usize = 200;
const MIN_GAIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Affinities {
    n: usize,
    joint: Vec<f64>,
    conditional: Vec<f64>,
}

impl Affinities {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Symmetric joint probabilities, row-major `n × n`.
    pub fn joint(&self) -> &[f64] {
        &self.joint
    }

    /// Row `i` holds `p(j | i)`.
    pub fn conditional(&self) -> &[f64] {
        &self.conditional
    }
}

fn squared_distances(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len();
    let mut d = vec![0.0; n * n];
    d.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    });
    d
}

/// Breaks exact duplicates with a tiny seeded perturbation so that every
/// row can reach its target entropy.
fn jitter_duplicates(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vectors.to_vec();
    let n = vectors.len();
    let dup: Vec<bool> = (0..n)
        .map(|i| (0..n).any(|j| j != i && vectors[i] == vectors[j]))
        .collect();
    if !dup.iter().any(|&d| d) {
        return out;
    }
    let scale = vectors
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0)
        * 1e-6;
    let mut r = rng::derived(0, "tsne-jitter");
    for (v, _) in out.iter_mut().zip(&dup).filter(|(_, d)| **d) {
        for x in v.iter_mut() {
            *x += scale * (r.random::<f64>() - 0.5);
        }
    }
    out
}

fn calibrate_row(d: &[f64], i: usize, target: f64, row: &mut [f64]) {
    let dmin = d
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .fold(f64::INFINITY, |m, (_, &v)| m.min(v));
    let fill = |beta: f64, row: &mut [f64]| -> f64 {
        let mut sum = 0.0;
        for (j, p) in row.iter_mut().enumerate() {
            *p = if j == i { 0.0 } else { (-(d[j] - dmin) * beta).exp() };
            sum += *p;
        }
        let mut h = 0.0;
        for p in row.iter_mut() {
            *p /= sum;
            if *p > 0.0 {
                h -= *p * p.ln();
            }
        }
        h
    };
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut beta = 1.0;
    for _ in 0..MAX_BISECTIONS {
        let h = fill(beta, row);
        if (h - target).abs() < ENTROPY_TOL {
            return;
        }
        if h > target {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    fill(beta, row);
}

/// Perplexity-calibrated affinities of `vectors`.
pub fn perplexity_affinities(vectors: &[Vec<f64>], perplexity: f64) -> Result<Affinities> {
    let n = vectors.len();
    if n < 3 {
        return Err(Error::invalid(format!("t-SNE needs at least 3 points, got {n}")));
    }
    if !(perplexity > 0.0 && perplexity < n as f64) {
        return Err(Error::invalid(format!("perplexity {perplexity} must lie in (0, {n})")));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::shape("t-SNE input vectors differ in length"));
    }
    if vectors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-SNE input".into()));
    }
    let vectors = jitter_duplicates(vectors);
    let d = squared_distances(&vectors);
    let target = perplexity.ln();
    let mut conditional = vec![0.0; n * n];
    conditional
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| calibrate_row(&d[i * n..(i + 1) * n], i, target, row));
    let mut joint = vec![0.0; n * n];
    let norm = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = (conditional[i * n + j] + conditional[j * n + i]) / norm;
        }
    }
    Ok(Affinities { n, joint, conditional })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    /// Standard deviation of the Gaussian initial layout.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            init_std: 1e-4,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.perplexity > 0.0) {
            p.push(format!("perplexity {} must be positive", self.perplexity));
        }
        if self.iterations == 0 {
            p.push("iterations must be at least 1".into());
        }
        if !(self.early_exaggeration >= 1.0) {
            p.push(format!("early exaggeration {} must be at least 1", self.early_exaggeration));
        }
        if !(self.learning_rate > 0.0) {
            p.push(format!("learning rate {} must be positive", self.learning_rate));
        }
        for (name, m) in [("initial", self.initial_momentum), ("final", self.final_momentum)] {
            if !(0.0..1.0).contains(&m) {
                p.push(format!("{name} momentum {m} outside [0, 1)"));
            }
        }
        if !(self.init_std > 0.0) {
            p.push(format!("init std {} must be positive", self.init_std));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResult {
    pub points: Vec<[f64; 2]>,
    pub kl_history: Vec<f64>,
    pub config: TsneConfig,
    /// 1-based iteration at which the gradient stopped being finite; the
    /// points are those of the last finite iteration.
    pub diverged_at: Option<usize>,
    pub labels: Vec<String>,
    pub groups: Vec<String>,
    pub map: Vec<Option<f64>>,
}

impl EmbeddingResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,label,group,mAP\n");
        for (i, p) in self.points.iter().enumerate() {
            let cell = |v: Option<&String>| v.cloned().unwrap_or_default();
            let map = self.map.get(i).copied().flatten().map(|m| m.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{map}",
                p[0],
                p[1],
                cell(self.labels.get(i)),
                cell(self.groups.get(i))
            )
            .unwrap();
        }
        out
    }
}

/// Student-t numerators `1 / (1 + |yi − yj|²)` (zero on the diagonal) and
/// their sum.
fn student_t(points: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = points.len();
    let mut num = vec![0.0; n * n];
    num.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            if i != j {
                let dx = points[i][0] - points[j][0];
                let dy = points[i][1] - points[j][1];
                *v = 1.0 / (1.0 + dx * dx + dy * dy);
            }
        }
    });
    let z = num.iter().sum();
    (num, z)
}

/// KL(P‖Q) of a layout.
pub fn kl_divergence(p: &Affinities, points: &[[f64; 2]]) -> f64 {
    let (num, z) = student_t(points);
    p.joint
        .iter()
        .zip(&num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &nij)| pij * (pij / (nij / z).max(f64::MIN_POSITIVE)).ln())
        .sum()
}

/// Gradient descent on KL(P‖Q). `kl_history[t]` is the divergence after
/// iteration `t`, measured against the unexaggerated P.
pub fn tsne_optimize(p: &Affinities, cfg: &TsneConfig) -> Result<EmbeddingResult> {
    cfg.validate()?;
    let n = p.n;
    let mut r = rng::derived(cfg.seed, "tsne-init");
    let init = Normal::new(0.0, cfg.init_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut r), init.sample(&mut r)]).collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut diverged_at = None;

    for t in 0..cfg.iterations {
        let exaggeration = if t < cfg.exaggeration_iterations {
            cfg.early_exaggeration
        } else {
            1.0
        };
        let momentum = if t < cfg.momentum_switch {
            cfg.initial_momentum
        } else {
            cfg.final_momentum
        };
        let (num, z) = student_t(&y);
        let grad: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    let nij = num[i * n + j];
                    let m = (exaggeration * p.joint[i * n + j] - nij / z) * nij;
                    g[0] += 4.0 * m * (y[i][0] - y[j][0]);
                    g[1] += 4.0 * m * (y[i][1] - y[j][1]);
                }
                g
            })
            .collect();
        if grad.iter().flatten().any(|g| !g.is_finite()) {
            diverged_at = Some(t + 1);
            log::warn!("t-SNE gradient became non-finite at iteration {}", t + 1);
            break;
        }
        let mut next = y.clone();
        for i in 0..n {
            for k in 0..2 {
                let same_sign = (grad[i][k] > 0.0) == (update[i][k] > 0.0);
                gains[i][k] = if same_sign { gains[i][k] * 0.8 } else { gains[i][k] + 0.2 };
                gains[i][k] = gains[i][k].max(MIN_GAIN);
                update[i][k] = momentum * update[i][k] - cfg.learning_rate * gains[i][k] * grad[i][k];
                next[i][k] += update[i][k];
            }
        }
        let mean = next.iter().fold([0.0; 2], |m, p| [m[0] + p[0], m[1] + p[1]]);
        for q in &mut next {
            q[0] -= mean[0] / n as f64;
            q[1] -= mean[1] / n as f64;
        }
        if next.iter().flatten().any(|v| !v.is_finite()) {
            diverged_at = Some(t + 1);
            break;
        }
        y = next;
        history.push(kl_divergence(p, &y));
    }
    Ok(EmbeddingResult {
        points: y,
        kl_history: history,
        config: cfg.clone(),
        diverged_at,
        labels: Vec::new(),
        groups: Vec::new(),
        map: Vec::new(),
    })
}

/// Mean ± sample std of the 2-D distances between paired points.
pub fn distance_stats(result: &EmbeddingResult, pairs: &[(usize, usize)]) -> Result<Stat> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to measure"));
    }
    let n = result.points.len();
    let d: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| {
            if a >= n || b >= n {
                return Err(Error::invalid(format!("pair ({a}, {b}) out of range for {n} points")));
            }
            let (p, q) = (result.points[a], result.points[b]);
            Ok(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        })
        .collect::<Result<_>>()?;
    Stat::from_values(&d)
}

/// One externally produced vector with optional metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVector {
    pub label: String,
    pub group: String,
    pub map: Option<f64>,
    pub vector: Vec<f64>,
}

/// Reads activation vectors, one per line: either a bare JSON array or an
/// object with `vector` and optional `label`, `group` and `map` fields.
pub fn load_activations(path: &Path) -> Result<Vec<LabeledVector>> {
    let r = BufReader::new(File::open(path).map_err(Error::file(path))?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("{}:{}: {what}", path.display(), n + 1));
        let v: Value = serde_json::from_str(&line).map_err(|e| bad(&e.to_string()))?;
        let (arr, obj) = match &v {
            Value::Array(a) => (a, None),
            Value::Object(o) => match o.get("vector") {
                Some(Value::Array(a)) => (a, Some(o)),
                _ => return Err(bad("object without a `vector` array")),
            },
            _ => return Err(bad("expected an array or an object")),
        };
        let vector: Vec<f64> = arr
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| bad("vector entries must be numbers")))
            .collect::<Result<_>>()?;
        let text = |k: &str| {
            obj.and_then(|o| o.get(k)).map(|v| match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            })
        };
        out.push(LabeledVector {
            label: text("label").unwrap_or_else(|| format!("{}", out.len())),
            group: text("group").unwrap_or_default(),
            map: obj.and_then(|o| o.get("map")).and_then(Value::as_f64),
            vector,
        });
    }
    Ok(out)
}
