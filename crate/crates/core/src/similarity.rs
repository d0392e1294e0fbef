//! Representation similarity between units: gram matrices, the unbiased
//! HSIC estimator, linear CKA and a cosine alternative.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ExampleSource, Mode, ModelGraph, Tensor};
use crate::rng;

/// `b × d` matrix of flattened per-example features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() || cols == 0 {
            return Err(Error::shape("features", format!("{rows}×{cols} from {} values", data.len())));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `K = F Fᵀ`, accumulated in f64.
    pub fn gram(&self) -> GramMatrix {
        let b = self.rows;
        let wide: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        let d = self.cols;
        let upper: Vec<Vec<f64>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let ri = &wide[i * d..(i + 1) * d];
                (i..b)
                    .map(|j| ri.iter().zip(&wide[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect();
        let mut k = vec![0.0; b * b];
        for (i, row) in upper.iter().enumerate() {
            for (off, &v) in row.iter().enumerate() {
                k[i * b + i + off] = v;
                k[(i + off) * b + i] = v;
            }
        }
        GramMatrix { n: b, data: k }
    }
}

/// Flattens everything after the batch dimension.
pub fn flatten_features(feature_map: &Tensor<f32>) -> Result<FeatureMatrix> {
    if feature_map.rank() < 2 {
        return Err(Error::shape(
            "flatten_features",
            format!("need a batch dimension plus features, got {:?}", feature_map.shape()),
        ));
    }
    FeatureMatrix::new(feature_map.batch(), feature_map.item_len(), feature_map.data().to_vec())
}

/// Symmetric `b × b` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    n: usize,
    data: Vec<f64>,
}

impl GramMatrix {
    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self> {
        if n * n != data.len() {
            return Err(Error::shape("gram", format!("{} values for {n}×{n}", data.len())));
        }
        Ok(GramMatrix { n, data })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// How `K̃` is formed from `K` in the unbiased estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TildeReading {
    /// Element-wise `K ∘ (11ᵀ − I)`: `K` with its diagonal zeroed.
    #[default]
    ZeroDiagonal,
    /// Matrix product `K (11ᵀ − I)`.
    MatrixProduct,
}

/// `K̃` in row-major order.
fn tilde(k: &GramMatrix, reading: TildeReading) -> Vec<f64> {
    let n = k.n;
    let mut t = k.data.clone();
    match reading {
        TildeReading::ZeroDiagonal => {
            for i in 0..n {
                t[i * n + i] = 0.0;
            }
        }
        TildeReading::MatrixProduct => {
            // (K 11ᵀ)_ij is the i-th row sum of K
            for i in 0..n {
                let row_sum: f64 = k.data[i * n..(i + 1) * n].iter().sum();
                for j in 0..n {
                    t[i * n + j] = row_sum - k.data[i * n + j];
                }
            }
        }
    }
    t
}

/// Precomputed `K̃` with its row and column sums.
struct Centered {
    n: usize,
    t: Vec<f64>,
    row_sums: Vec<f64>,
    col_sums: Vec<f64>,
    total: f64,
}

impl Centered {
    fn new(k: &GramMatrix, reading: TildeReading) -> Self {
        let n = k.n;
        let t = tilde(k, reading);
        let row_sums: Vec<f64> = t.chunks_exact(n).map(|r| r.iter().sum()).collect();
        let mut col_sums = vec![0.0; n];
        for r in t.chunks_exact(n) {
            for (c, v) in col_sums.iter_mut().zip(r) {
                *c += v;
            }
        }
        let total = row_sums.iter().sum();
        Centered {
            n,
            t,
            row_sums,
            col_sums,
            total,
        }
    }

    fn hsic(&self, other: &Centered) -> f64 {
        let n = self.n;
        let b = n as f64;
        // tr(K̃ L̃) = Σ_ij K̃_ij L̃_ji
        let mut trace = 0.0;
        for i in 0..n {
            for j in 0..n {
                trace += self.t[i * n + j] * other.t[j * n + i];
            }
        }
        // 1ᵀ K̃ L̃ 1 = (1ᵀ K̃) · (L̃ 1)
        let cross: f64 = self.col_sums.iter().zip(&other.row_sums).map(|(a, b)| a * b).sum();
        (trace + self.total * other.total / ((b - 1.0) * (b - 2.0)) - 2.0 / (b - 2.0) * cross) / (b * (b - 3.0))
    }
}

fn check_pair(k: &GramMatrix, l: &GramMatrix) -> Result<()> {
    if k.n != l.n {
        return Err(Error::Precondition(format!("gram sizes differ: {} vs {}", k.n, l.n)));
    }
    if k.n < 4 {
        return Err(Error::Precondition(format!(
            "unbiased HSIC needs at least 4 examples, got {}",
            k.n
        )));
    }
    Ok(())
}

/// Unbiased HSIC estimator with the zero-diagonal `K̃`.
pub fn hsic1(k: &GramMatrix, l: &GramMatrix) -> Result<f64> {
    hsic1_with(k, l, TildeReading::ZeroDiagonal)
}

pub fn hsic1_with(k: &GramMatrix, l: &GramMatrix, reading: TildeReading) -> Result<f64> {
    check_pair(k, l)?;
    Ok(Centered::new(k, reading).hsic(&Centered::new(l, reading)))
}

/// Linear CKA on the unbiased estimator, clamped to `[-1, 1]`.
pub fn cka(k: &GramMatrix, l: &GramMatrix) -> Result<f64> {
    cka_with(k, l, TildeReading::ZeroDiagonal)
}

pub fn cka_with(k: &GramMatrix, l: &GramMatrix, reading: TildeReading) -> Result<f64> {
    check_pair(k, l)?;
    let (ck, cl) = (Centered::new(k, reading), Centered::new(l, reading));
    cka_centered(&ck, &cl, ck.hsic(&ck), cl.hsic(&cl))
}

fn cka_centered(ck: &Centered, cl: &Centered, self_k: f64, self_l: f64) -> Result<f64> {
    if !(self_k > 0.0) || !(self_l > 0.0) {
        return Err(Error::DegenerateFeatures { unit: None });
    }
    let raw = ck.hsic(cl) / (self_k * self_l).sqrt();
    log::debug!("event=cka raw={raw}");
    Ok(raw.clamp(-1.0, 1.0))
}

/// Cosine of the angle between two vectors.
pub fn cosine_vectors(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Precondition(format!("lengths differ: {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity of two units' representations, compared through their
/// vectorised gram matrices (unit widths generally differ).
pub fn cosine_similarity(k: &GramMatrix, l: &GramMatrix) -> Result<f64> {
    cosine_vectors(k.as_slice(), l.as_slice())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cka,
    Cosine,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cka => "cka",
            Metric::Cosine => "cosine",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cka" => Ok(Metric::Cka),
            "cosine" => Ok(Metric::Cosine),
            _ => Err(Error::InvalidConfig {
                key: "metric".into(),
                message: format!("unknown metric {s:?} (expected cka or cosine)"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub samples_per_batch: usize,
    pub num_batches: usize,
    /// Round-robin over classes instead of uniform sampling.
    pub stratified: bool,
    pub tilde: TildeReading,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            samples_per_batch: 500,
            num_batches: 5,
            stratified: false,
            tilde: TildeReading::ZeroDiagonal,
        }
    }
}

/// Unit-by-unit similarity matrix and its row sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub matrix: Vec<Vec<f64>>,
    pub row_sums: Vec<f64>,
    pub metric: Metric,
    pub batches_averaged: usize,
    pub seed: u64,
}

impl SimilarityProfile {
    pub fn from_matrix(matrix: Vec<Vec<f64>>, metric: Metric, batches_averaged: usize, seed: u64) -> Self {
        let row_sums = matrix.iter().map(|r| r.iter().sum()).collect();
        SimilarityProfile {
            matrix,
            row_sums,
            metric,
            batches_averaged,
            seed,
        }
    }

    pub fn num_units(&self) -> usize {
        self.row_sums.len()
    }

    /// `unit,s_0,…,s_{l-1},z`, one row per unit.
    pub fn to_csv(&self) -> String {
        let l = self.num_units();
        let mut out = String::from("unit");
        for j in 0..l {
            out.push_str(&format!(",s_{j}"));
        }
        out.push_str(",z\n");
        for (i, row) in self.matrix.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", self.row_sums[i]));
        }
        out
    }
}

/// Reads the `z` column of a similarity CSV.
pub fn row_sums_from_csv(csv: &str) -> Result<Vec<f64>> {
    let bad = |m: String| Error::Format {
        file: "similarity csv",
        message: m,
    };
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty file".into()))?.split(',').collect();
    let z_col = header
        .iter()
        .position(|h| h.trim() == "z")
        .ok_or_else(|| bad("no `z` column".into()))?;
    lines
        .enumerate()
        .map(|(n, line)| {
            let field = line
                .split(',')
                .nth(z_col)
                .ok_or_else(|| bad(format!("line {}: missing z", n + 2)))?;
            field
                .trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("line {}: {e}", n + 2)))
        })
        .collect()
}

/// Pool indices for `num_batches` batches: without replacement within a
/// batch, independent across batches.
fn sample_batches(data: &dyn LabelledPool, sampling: &SamplingConfig, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = data.pool_len();
    if sampling.samples_per_batch < 4 {
        return Err(Error::Precondition("samples_per_batch must be >= 4".into()));
    }
    if sampling.samples_per_batch > n || sampling.num_batches == 0 {
        return Err(Error::Precondition(format!(
            "cannot draw {} batches of {} from {n} examples",
            sampling.num_batches, sampling.samples_per_batch
        )));
    }
    Ok((0..sampling.num_batches)
        .map(|b| {
            let mut r = rng::derived(seed, &[0xc0a, b as u64]);
            if sampling.stratified {
                let mut by_class: Vec<Vec<usize>> = Vec::new();
                for i in 0..n {
                    let c = data.pool_label(i);
                    if by_class.len() <= c {
                        by_class.resize(c + 1, Vec::new());
                    }
                    by_class[c].push(i);
                }
                for v in by_class.iter_mut() {
                    v.shuffle(&mut r);
                }
                let depth = by_class.iter().map(Vec::len).max().unwrap_or(0);
                (0..depth)
                    .flat_map(|d| by_class.iter().filter_map(move |v| v.get(d).copied()))
                    .take(sampling.samples_per_batch)
                    .collect()
            } else {
                index::sample(&mut r, n, sampling.samples_per_batch).into_vec()
            }
        })
        .collect())
}

/// Example pool with labels visible before gathering (for stratification).
pub trait LabelledPool: ExampleSource {
    fn pool_len(&self) -> usize {
        self.len()
    }

    fn pool_label(&self, i: usize) -> usize;
}

impl LabelledPool for crate::signal::Subset<'_> {
    fn pool_label(&self, i: usize) -> usize {
        self.data.label(self.indices[i])
    }
}

/// Grams of every unit's eval-mode output for one batch.
fn unit_grams(model: &ModelGraph, batch: &Tensor<f32>) -> Result<Vec<GramMatrix>> {
    model
        .forward_features(batch, Mode::Eval)?
        .iter()
        .map(|f| flatten_features(f).map(|m| m.gram()))
        .collect()
}

/// Similarity of one batch's grams for all `l(l+1)/2` unit pairs.
pub fn similarity_from_grams(grams: &[GramMatrix], metric: Metric, reading: TildeReading) -> Result<Vec<Vec<f64>>> {
    let l = grams.len();
    if let Some(g) = grams.first() {
        if g.size() < 4 {
            return Err(Error::Precondition(format!("need at least 4 examples, got {}", g.size())));
        }
    }
    let pairs: Vec<(usize, usize)> = (0..l).flat_map(|i| (i..l).map(move |j| (i, j))).collect();
    let values: Vec<f64> = match metric {
        Metric::Cka => {
            let centered: Vec<Centered> = grams.par_iter().map(|g| Centered::new(g, reading)).collect();
            let self_hsic: Vec<f64> = centered.par_iter().map(|c| c.hsic(c)).collect();
            if let Some(u) = self_hsic.iter().position(|&h| !(h > 0.0)) {
                return Err(Error::DegenerateFeatures { unit: Some(u) });
            }
            pairs
                .par_iter()
                .map(|&(i, j)| cka_centered(&centered[i], &centered[j], self_hsic[i], self_hsic[j]))
                .collect::<Result<_>>()?
        }
        Metric::Cosine => pairs
            .par_iter()
            .map(|&(i, j)| {
                cosine_similarity(&grams[i], &grams[j]).map_err(|e| match e {
                    Error::ZeroNorm => Error::DegenerateFeatures {
                        unit: Some(if grams[i].as_slice().iter().all(|&v| v == 0.0) { i } else { j }),
                    },
                    other => other,
                })
            })
            .collect::<Result<_>>()?,
    };
    let mut s = vec![vec![0.0; l]; l];
    for (&(i, j), &v) in pairs.iter().zip(&values) {
        s[i][j] = v;
        s[j][i] = v;
    }
    Ok(s)
}

/// Similarity between every pair of units, averaged over sampled batches.
pub fn similarity_matrix(
    model: &ModelGraph,
    pool: &dyn LabelledPool,
    sampling: &SamplingConfig,
    metric: Metric,
    seed: u64,
) -> Result<SimilarityProfile> {
    let l = model.num_units();
    let mut acc = vec![vec![0.0; l]; l];
    let batches = sample_batches(pool, sampling, seed)?;
    for idx in &batches {
        let (x, _) = pool.batch(idx);
        let s = similarity_from_grams(&unit_grams(model, &x)?, metric, sampling.tilde)?;
        for (a, r) in acc.iter_mut().zip(&s) {
            for (v, w) in a.iter_mut().zip(r) {
                *v += w;
            }
        }
    }
    let nb = batches.len() as f64;
    for row in acc.iter_mut() {
        for v in row.iter_mut() {
            *v /= nb;
        }
    }
    Ok(SimilarityProfile::from_matrix(acc, metric, batches.len(), seed))
}
