//! Fisher's optimal segmentation of the ordered similarity profile into
//! contiguous blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest profile the exhaustive oracle accepts.
pub const BRUTE_FORCE_MAX_LEN: usize = 16;

/// Within-segment dispersion measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentCriterion {
    /// Sum of squared deviations from the segment mean.
    #[default]
    SumSquares,
    /// Sum of absolute deviations from the segment median.
    AbsoluteDeviation,
}

/// Contiguous blocks `[lo, hi]` (inclusive) covering `0..l` in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub blocks: Vec<(usize, usize)>,
    pub cost: f64,
}

impl BlockPartition {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|&(lo, hi)| hi - lo + 1).collect()
    }

    pub fn num_units(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.1 + 1)
    }

    /// Checks the ranges are ordered, non-empty and cover `0..l`.
    pub fn validate(&self, l: usize) -> Result<()> {
        let mut next = 0;
        for &(lo, hi) in &self.blocks {
            if lo != next || hi < lo {
                return Err(Error::Precondition(format!(
                    "blocks must be contiguous and non-empty, got {:?}",
                    self.blocks
                )));
            }
            next = hi + 1;
        }
        if next != l || self.blocks.is_empty() {
            return Err(Error::Precondition(format!(
                "blocks {:?} do not cover {l} units",
                self.blocks
            )));
        }
        Ok(())
    }

    /// Start index of every block after the first.
    fn starts(&self) -> Vec<usize> {
        self.blocks[1..].iter().map(|b| b.0).collect()
    }
}

pub fn segment_cost(z: &[f64], i: usize, j: usize) -> f64 {
    segment_cost_with(z, i, j, SegmentCriterion::SumSquares)
}

pub fn segment_cost_with(z: &[f64], i: usize, j: usize, criterion: SegmentCriterion) -> f64 {
    assert!(i <= j && j < z.len(), "segment {i}..={j} outside 0..{}", z.len());
    let seg = &z[i..=j];
    match criterion {
        SegmentCriterion::SumSquares => {
            let mean = seg.iter().sum::<f64>() / seg.len() as f64;
            seg.iter().map(|v| (v - mean) * (v - mean)).sum()
        }
        SegmentCriterion::AbsoluteDeviation => {
            let mut sorted = seg.to_vec();
            sorted.sort_by(f64::total_cmp);
            let median = sorted[sorted.len() / 2];
            seg.iter().map(|v| (v - median).abs()).sum()
        }
    }
}

fn check_args(z: &[f64], k: usize) -> Result<()> {
    if k == 0 || k > z.len() {
        return Err(Error::Precondition(format!(
            "cannot split {} units into {k} blocks",
            z.len()
        )));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("profile entry {i}")));
    }
    Ok(())
}

fn cost_table(z: &[f64], criterion: SegmentCriterion) -> Vec<Vec<f64>> {
    let l = z.len();
    (0..l)
        .map(|i| (0..l).map(|j| if j < i { 0.0 } else { segment_cost_with(z, i, j, criterion) }).collect())
        .collect()
}

fn from_starts(l: usize, starts: &[usize], cost: f64) -> BlockPartition {
    let mut bounds = vec![0];
    bounds.extend_from_slice(starts);
    bounds.push(l);
    BlockPartition {
        blocks: bounds.windows(2).map(|w| (w[0], w[1] - 1)).collect(),
        cost,
    }
}

/// Globally optimal contiguous `k`-partition by dynamic programming.
///
/// Ties go to the smallest start for the last segment, applied recursively.
pub fn fisher_segment(z: &[f64], k: usize) -> Result<BlockPartition> {
    fisher_segment_with(z, k, SegmentCriterion::SumSquares)
}

pub fn fisher_segment_with(z: &[f64], k: usize, criterion: SegmentCriterion) -> Result<BlockPartition> {
    check_args(z, k)?;
    let l = z.len();
    let cost = cost_table(z, criterion);
    // e[m][p]: best cost of units 0..=p in m+1 segments; arg[m][p]: start of the last one
    let mut e = vec![vec![f64::INFINITY; l]; k];
    let mut arg = vec![vec![0usize; l]; k];
    e[0] = (0..l).map(|p| cost[0][p]).collect();
    for m in 1..k {
        for p in m..l {
            for j in m..=p {
                let c = e[m - 1][j - 1] + cost[j][p];
                if c < e[m][p] {
                    e[m][p] = c;
                    arg[m][p] = j;
                }
            }
        }
    }
    let mut starts = vec![0; k - 1];
    let mut p = l - 1;
    for m in (1..k).rev() {
        starts[m - 1] = arg[m][p];
        p = arg[m][p] - 1;
    }
    Ok(from_starts(l, &starts, e[k - 1][l - 1]))
}

/// Exhaustive search over all `C(l-1, k-1)` boundary placements.
pub fn brute_force_segment(z: &[f64], k: usize) -> Result<BlockPartition> {
    brute_force_segment_with(z, k, SegmentCriterion::SumSquares)
}

pub fn brute_force_segment_with(z: &[f64], k: usize, criterion: SegmentCriterion) -> Result<BlockPartition> {
    check_args(z, k)?;
    let l = z.len();
    if l > BRUTE_FORCE_MAX_LEN {
        return Err(Error::Precondition(format!(
            "brute force limited to {BRUTE_FORCE_MAX_LEN} units, got {l}"
        )));
    }
    let cost = cost_table(z, criterion);
    let mut best: Option<BlockPartition> = None;
    let mut starts: Vec<usize> = (1..k).collect();
    loop {
        // summed left to right, as the DP does
        let mut bounds = vec![0];
        bounds.extend_from_slice(&starts);
        bounds.push(l);
        let total = bounds.windows(2).fold(0.0, |acc, w| acc + cost[w[0]][w[1] - 1]);
        let better = match &best {
            None => true,
            Some(b) => {
                total < b.cost
                    || (total == b.cost && starts.iter().rev().lt(b.starts().iter().rev()))
            }
        };
        if better {
            best = Some(from_starts(l, &starts, total));
        }
        // next combination of k-1 starts from 1..l
        let mut i = starts.len();
        loop {
            if i == 0 {
                return Ok(best.expect("at least one placement"));
            }
            i -= 1;
            if starts[i] < l - (starts.len() - i) {
                starts[i] += 1;
                for t in i + 1..starts.len() {
                    starts[t] = starts[t - 1] + 1;
                }
                break;
            }
        }
    }
}
