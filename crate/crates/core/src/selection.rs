//! Per-block choice of the units to keep, scored without training.
//!
//! Every candidate is scored on a copy of the network in which the
//! candidate's units keep their trained weights and every other unit is
//! freshly initialised. The score is `ln R`, where `R` is the summed output
//! of the absolute-valued network on an all-ones input (the quantity whose
//! gradient gives SynFlow saliencies).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init, Mode, ModelGraph, PrimitiveLayer, Tensor, INPUT_CHANNELS};
use crate::partition::BlockPartition;
use crate::rng;

/// Largest block the enumerator accepts (`2^m - 1` candidates).
pub const MAX_BLOCK_UNITS: usize = 24;

/// Non-empty subset of one block's units. Bit `t` of `mask` is unit `lo + t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerCombination {
    pub block_id: usize,
    pub lo: usize,
    pub mask: u32,
    pub size: u32,
}

impl LayerCombination {
    /// Global unit indices, ascending.
    pub fn units(&self) -> Vec<usize> {
        (0..32).filter(|t| self.mask >> t & 1 == 1).map(|t| self.lo + t).collect()
    }
}

/// All `2^m - 1` combinations of block `lo..=hi`, by ascending size then
/// ascending mask.
pub fn enumerate_combinations(block_id: usize, lo: usize, hi: usize) -> Result<Vec<LayerCombination>> {
    if hi < lo {
        return Err(Error::Precondition(format!("empty block {lo}..={hi}")));
    }
    let m = hi - lo + 1;
    if m > MAX_BLOCK_UNITS {
        return Err(Error::Precondition(format!(
            "block of {m} units exceeds the enumeration limit of {MAX_BLOCK_UNITS}"
        )));
    }
    let mut all: Vec<LayerCombination> = (1u32..1 << m)
        .map(|mask| LayerCombination {
            block_id,
            lo,
            mask,
            size: mask.count_ones(),
        })
        .collect();
    all.sort_by_key(|c| (c.size, c.mask));
    Ok(all)
}

/// Candidates examined with and without partitioning, for the given block sizes.
pub fn search_space(block_sizes: &[usize]) -> (u64, u64) {
    let partitioned = block_sizes.iter().map(|&m| (1u64 << m) - 1).sum();
    let total: usize = block_sizes.iter().sum();
    (partitioned, (1u64 << total) - 1)
}

/// Copy of `model` whose units outside `retained` are re-initialised.
/// The classifier head keeps its weights.
pub fn simulate_reinit(model: &ModelGraph, retained: &[usize], seed: u64) -> ModelGraph {
    let mut copy = model.clone();
    let mut r = rng::rng(seed);
    for (i, unit) in copy.units.iter_mut().enumerate() {
        if !retained.contains(&i) {
            init::init_unit(unit, &mut r);
        }
    }
    copy
}

/// Re-initialisation seed for one candidate.
pub fn candidate_seed(master: u64, combination: &LayerCombination) -> u64 {
    rng::mix(master, &[combination.block_id as u64, combination.mask as u64])
}

/// f64 copy with every parameter replaced by its magnitude and batch-norm
/// statistics set to mean 0, variance 1.
fn absolute_view(model: &ModelGraph) -> ModelGraph<f64> {
    let mut m: ModelGraph<f64> = model.cast();
    for layer in m.layers_mut() {
        for p in layer.params_mut() {
            for v in p.data_mut() {
                *v = v.abs();
            }
        }
        if let PrimitiveLayer::BatchNorm1d(bn) = layer {
            bn.running_mean.data_mut().fill(0.0);
            bn.running_var.data_mut().fill(1.0);
        }
    }
    m
}

fn ones_input(signal_length: usize) -> Tensor<f64> {
    Tensor::full(&[1, INPUT_CHANNELS, signal_length], 1.0)
}

/// `R`: summed logits of the absolute-valued network on an all-ones input.
pub fn synflow_r(model: &ModelGraph, signal_length: usize) -> Result<f64> {
    let logits = absolute_view(model).forward(&ones_input(signal_length), Mode::Eval)?;
    Ok(logits.data().iter().sum())
}

/// `ln R`; a dead network (`R = 0`) scores negative infinity.
pub fn synflow_score(model: &ModelGraph, signal_length: usize) -> Result<f64> {
    let r = synflow_r(model, signal_length)?;
    if !r.is_finite() || r < 0.0 {
        return Err(Error::NonFinite(format!("synflow output {r}")));
    }
    Ok(if r == 0.0 { f64::NEG_INFINITY } else { r.ln() })
}

/// `R`, its gradient with respect to the original parameters and the
/// per-parameter saliencies `θ · ∂R/∂θ`, in [`ModelGraph::params`] order.
#[derive(Debug, Clone)]
pub struct Synflow {
    pub r: f64,
    pub grads: Vec<Tensor<f64>>,
    pub saliency: Vec<Tensor<f64>>,
}

impl Synflow {
    pub fn total_saliency(&self) -> f64 {
        self.saliency.iter().map(|t| t.sum_f64()).sum()
    }
}

pub fn synflow_saliency(model: &ModelGraph, signal_length: usize) -> Result<Synflow> {
    let abs = absolute_view(model);
    let (logits, trace) = abs.forward_traced(&ones_input(signal_length), Mode::Eval)?;
    let r = logits.data().iter().sum();
    let abs_grads = abs.backward(&trace, &Tensor::full(logits.shape(), 1.0));
    let original: ModelGraph<f64> = model.cast();
    let mut grads = Vec::with_capacity(abs_grads.len());
    let mut saliency = Vec::with_capacity(abs_grads.len());
    for (g, theta) in abs_grads.iter().zip(original.params()) {
        // d|θ|/dθ = sign(θ)
        let d: Vec<f64> = g.data().iter().zip(theta.data()).map(|(g, t)| g * t.signum()).collect();
        let s: Vec<f64> = d.iter().zip(theta.data()).map(|(d, t)| d * t).collect();
        grads.push(Tensor::new(g.shape().to_vec(), d)?);
        saliency.push(Tensor::new(g.shape().to_vec(), s)?);
    }
    Ok(Synflow { r, grads, saliency })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub combination: LayerCombination,
    pub synflow: f64,
    pub rank_index: usize,
}

/// Every candidate of one block with its score, in enumeration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSearch {
    pub block_id: usize,
    pub lo: usize,
    pub hi: usize,
    pub candidates: Vec<CandidateScore>,
}

impl BlockSearch {
    /// Alg. 2 winner: a running maximum updated on `>=`, so the last of
    /// equally scored candidates wins.
    pub fn best(&self) -> &CandidateScore {
        self.best_where(|_| true).expect("a block has at least one candidate")
    }

    /// Same rule restricted to candidates keeping `count` units.
    pub fn best_of_size(&self, count: usize) -> Option<&CandidateScore> {
        self.best_where(|c| c.combination.size as usize == count)
    }

    fn best_where(&self, keep: impl Fn(&CandidateScore) -> bool) -> Option<&CandidateScore> {
        let mut best: Option<&CandidateScore> = None;
        for c in self.candidates.iter().filter(|c| keep(c)) {
            if best.is_none_or(|b| c.synflow >= b.synflow) {
                best = Some(c);
            }
        }
        best
    }
}

/// Runs `f` on a pool of `jobs` threads (0 means rayon's default).
pub fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Precondition(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Scores every combination of one block. Results do not depend on the
/// number of worker threads.
pub fn score_block(model: &ModelGraph, block_id: usize, lo: usize, hi: usize, seed: u64, signal_length: usize) -> Result<BlockSearch> {
    if hi >= model.num_units() {
        return Err(Error::IndexOutOfRange {
            what: "block end",
            index: hi,
            len: model.num_units(),
        });
    }
    let combos = enumerate_combinations(block_id, lo, hi)?;
    let candidates = combos
        .par_iter()
        .enumerate()
        .map(|(rank_index, &combination)| {
            let view = simulate_reinit(model, &combination.units(), candidate_seed(seed, &combination));
            Ok(CandidateScore {
                combination,
                synflow: synflow_score(&view, signal_length)?,
                rank_index,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for c in &candidates {
        log::debug!(
            "event=candidate block={block_id} mask={:#b} size={} score={}",
            c.combination.mask,
            c.combination.size,
            c.synflow
        );
    }
    Ok(BlockSearch {
        block_id,
        lo,
        hi,
        candidates,
    })
}

/// Scores every block of a partition.
pub fn score_partition(model: &ModelGraph, partition: &BlockPartition, seed: u64, signal_length: usize) -> Result<Vec<BlockSearch>> {
    partition.validate(model.num_units())?;
    partition
        .blocks
        .iter()
        .enumerate()
        .map(|(b, &(lo, hi))| score_block(model, b, lo, hi, seed, signal_length))
        .collect()
}

/// Best candidate of one block under the `>=` rule.
pub fn select_best(model: &ModelGraph, block_id: usize, lo: usize, hi: usize, seed: u64, signal_length: usize) -> Result<CandidateScore> {
    Ok(score_block(model, block_id, lo, hi, seed, signal_length)?.best().clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockChoice {
    pub id: usize,
    pub lo: usize,
    pub hi: usize,
    pub combination: LayerCombination,
    pub retained_unit_ids: Vec<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub blocks: Vec<BlockChoice>,
    pub total_retained: usize,
    pub num_units: usize,
    /// Fraction of units removed.
    pub achieved_pr: f64,
}

impl SelectionPlan {
    fn new(choices: Vec<BlockChoice>, num_units: usize) -> Self {
        let total_retained = choices.iter().map(|c| c.retained_unit_ids.len()).sum();
        SelectionPlan {
            blocks: choices,
            total_retained,
            num_units,
            achieved_pr: 1.0 - total_retained as f64 / num_units as f64,
        }
    }

    /// Retained unit indices over the whole model, ascending.
    pub fn retained(&self) -> Vec<usize> {
        self.blocks.iter().flat_map(|b| b.retained_unit_ids.iter().copied()).collect()
    }

    /// Plan keeping every unit.
    pub fn keep_all(num_units: usize) -> Self {
        let combination = LayerCombination {
            block_id: 0,
            lo: 0,
            mask: if num_units >= 32 { u32::MAX } else { (1u32 << num_units) - 1 },
            size: num_units as u32,
        };
        SelectionPlan::new(
            vec![BlockChoice {
                id: 0,
                lo: 0,
                hi: num_units.saturating_sub(1),
                combination,
                retained_unit_ids: (0..num_units).collect(),
                score: f64::NAN,
            }],
            num_units,
        )
    }
}

fn choice(search: &BlockSearch, c: &CandidateScore) -> BlockChoice {
    BlockChoice {
        id: search.block_id,
        lo: search.lo,
        hi: search.hi,
        combination: c.combination,
        retained_unit_ids: c.combination.units(),
        score: c.synflow,
    }
}

/// Unconstrained mode: the best-scoring combination of every block.
pub fn plan_max_score(searches: &[BlockSearch], num_units: usize) -> SelectionPlan {
    SelectionPlan::new(searches.iter().map(|s| choice(s, s.best())).collect(), num_units)
}

/// Number of units kept at pruning rate `pr`.
pub fn retained_budget(num_units: usize, pruning_rate: f64) -> usize {
    ((1.0 - pruning_rate) * num_units as f64).round() as usize
}

/// Budgeted mode: per-block counts summing to `round((1-PR)·l)` that
/// maximise the total score, each block using its best combination of that
/// count. Ties prefer larger counts in later blocks.
pub fn plan_with_budget(searches: &[BlockSearch], num_units: usize, pruning_rate: f64) -> Result<SelectionPlan> {
    if !(pruning_rate > 0.0 && pruning_rate < 1.0) {
        return Err(Error::InvalidConfig {
            key: "prune.pruning_rate".into(),
            message: format!("must lie in (0, 1), got {pruning_rate}"),
        });
    }
    plan_with_count(searches, num_units, retained_budget(num_units, pruning_rate))
}

/// Budgeted mode with the number of retained units given directly.
pub fn plan_with_count(searches: &[BlockSearch], num_units: usize, budget: usize) -> Result<SelectionPlan> {
    let k = searches.len();
    if budget < k || k == 0 {
        return Err(Error::InfeasibleBudget { budget, blocks: k });
    }
    // table[b][t]: best total over blocks 0..=b retaining t units, with the count for block b
    let mut table: Vec<Vec<Option<(f64, usize)>>> = vec![vec![None; budget + 1]; k];
    for (b, search) in searches.iter().enumerate() {
        let m = search.hi - search.lo + 1;
        for t in 1..=budget {
            for c in 1..=m.min(t) {
                let prev = if b == 0 {
                    if c == t {
                        Some(0.0)
                    } else {
                        None
                    }
                } else {
                    table[b - 1][t - c].map(|p| p.0)
                };
                let (Some(prev), Some(best)) = (prev, search.best_of_size(c)) else {
                    continue;
                };
                let total = prev + best.synflow;
                if table[b][t].is_none_or(|(v, _)| total >= v) {
                    table[b][t] = Some((total, c));
                }
            }
        }
    }
    if table[k - 1][budget].is_none() {
        return Err(Error::InfeasibleBudget { budget, blocks: k });
    }
    let mut counts = vec![0; k];
    let mut t = budget;
    for b in (0..k).rev() {
        let (_, c) = table[b][t].expect("reachable state");
        counts[b] = c;
        t -= c;
    }
    let choices = searches
        .iter()
        .zip(&counts)
        .map(|(s, &c)| choice(s, s.best_of_size(c).expect("count has candidates")))
        .collect();
    Ok(SelectionPlan::new(choices, num_units))
}

/// Scores all blocks and applies the budgeted plan.
pub fn select_with_budget(
    model: &ModelGraph,
    partition: &BlockPartition,
    pruning_rate: f64,
    seed: u64,
    signal_length: usize,
) -> Result<SelectionPlan> {
    let searches = score_partition(model, partition, seed, signal_length)?;
    plan_with_budget(&searches, model.num_units(), pruning_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::presets::{build, Preset};
    use crate::nn::{Dense, Skip, Unit};

    fn dense_unit(id: usize, i: usize, o: usize, w: f32) -> Unit {
        let mut d = Dense::new(i, o, false);
        d.weight.data_mut().fill(w);
        Unit {
            id,
            body: vec![PrimitiveLayer::Dense(d), PrimitiveLayer::Relu],
            skip: Skip::None,
            post_relu: false,
        }
    }

    fn toy_2_2_1() -> ModelGraph {
        // flatten 1×2×1 → 2 → 2 → 1
        let mut head = Dense::new(2, 1, false);
        head.weight.data_mut().fill(1.0);
        ModelGraph {
            units: vec![Unit {
                id: 0,
                body: vec![PrimitiveLayer::Flatten],
                skip: Skip::None,
                post_relu: false,
            }, dense_unit(1, 2, 2, 1.0)],
            head: vec![PrimitiveLayer::Dense(head)],
            num_classes: 1,
        }
    }

    #[test]
    fn enumeration_order_and_counts() {
        let c = enumerate_combinations(0, 0, 2).unwrap();
        let masks: Vec<u32> = c.iter().map(|c| c.mask).collect();
        assert_eq!(masks, vec![0b001, 0b010, 0b100, 0b011, 0b101, 0b110, 0b111]);
        assert_eq!(enumerate_combinations(2, 4, 4).unwrap()[0].units(), vec![4]);
        for m in 1..=12 {
            assert_eq!(enumerate_combinations(0, 0, m - 1).unwrap().len(), (1 << m) - 1);
        }
        assert_eq!(search_space(&[5, 7, 8]), (413, 1_048_575));
        assert!(enumerate_combinations(0, 3, 2).is_err());
    }

    #[test]
    fn two_two_one_net() {
        let m = toy_2_2_1();
        assert_eq!(synflow_r(&m, 1).unwrap(), 4.0);
        let s = synflow_saliency(&m, 1).unwrap();
        assert_eq!(s.r, 4.0);
        assert_eq!(s.total_saliency(), 8.0);
    }

    #[test]
    fn negative_weight_uses_magnitude() {
        let mut head = Dense::new(1, 1, false);
        head.weight.data_mut()[0] = -3.0;
        let mut squash = Dense::new(2, 1, false);
        squash.weight.data_mut().copy_from_slice(&[0.5, 0.5]);
        let m = ModelGraph {
            units: vec![Unit {
                id: 0,
                body: vec![PrimitiveLayer::Flatten, PrimitiveLayer::Dense(squash)],
                skip: Skip::None,
                post_relu: false,
            }],
            head: vec![PrimitiveLayer::Dense(head)],
            num_classes: 1,
        };
        assert!((synflow_score(&m, 1).unwrap() - 3f64.ln()).abs() < 1e-12);
        let s = synflow_saliency(&m, 1).unwrap();
        // head gradient w.r.t. θ = -3 is sign(θ)·1 = -1
        assert_eq!(s.grads[1].data(), &[-1.0]);
    }

    #[test]
    fn dead_network_scores_negative_infinity() {
        let mut m = toy_2_2_1();
        if let PrimitiveLayer::Dense(d) = &mut m.head[0] {
            d.weight.data_mut().fill(0.0);
        }
        assert_eq!(synflow_score(&m, 1).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn scaling_a_layer_raises_score() {
        let m = build(Preset::Vgg4, 6, &mut rng::rng(1));
        let base = synflow_score(&m, 64).unwrap();
        let mut scaled = m.clone();
        for p in scaled.units[1].body[0].params_mut() {
            for v in p.data_mut() {
                *v *= 2.0;
            }
        }
        assert!(synflow_score(&scaled, 64).unwrap() > base);
    }

    #[test]
    fn reinit_scope_and_determinism() {
        let m = build(Preset::Vgg8, 6, &mut rng::rng(2));
        let all: Vec<usize> = (0..8).collect();
        assert_eq!(simulate_reinit(&m, &all, 9), m);
        let a = simulate_reinit(&m, &[1, 2], 9);
        assert_eq!(a, simulate_reinit(&m, &[1, 2], 9));
        assert_eq!(a.units[1], m.units[1]);
        assert_eq!(a.units[2], m.units[2]);
        assert_ne!(a.units[0], m.units[0]);
        assert_ne!(a.units[7], m.units[7]);
        assert_eq!(a.head, m.head);
        assert!(a.forward(&Tensor::full(&[1, 2, 32], 1.0), Mode::Eval).is_ok());
    }

    fn fake_search(block_id: usize, lo: usize, hi: usize, score: impl Fn(&LayerCombination) -> f64) -> BlockSearch {
        let candidates = enumerate_combinations(block_id, lo, hi)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(rank_index, combination)| CandidateScore {
                synflow: score(&combination),
                combination,
                rank_index,
            })
            .collect();
        BlockSearch { block_id, lo, hi, candidates }
    }

    #[test]
    fn ties_go_to_the_last_candidate() {
        let s = fake_search(0, 0, 2, |_| 1.0);
        assert_eq!(s.best().combination.mask, 0b111);
        assert_eq!(s.best_of_size(1).unwrap().combination.mask, 0b100);
        let single = fake_search(0, 3, 3, |_| f64::NEG_INFINITY);
        assert_eq!(single.best().combination.units(), vec![3]);
    }

    #[test]
    fn budget_extremes() {
        let s = vec![
            fake_search(0, 0, 1, |c| c.mask as f64),
            fake_search(1, 2, 4, |c| -(c.mask as f64)),
        ];
        let keep = plan_with_budget(&s, 5, 0.01).unwrap();
        assert_eq!(keep.retained(), vec![0, 1, 2, 3, 4]);
        assert_eq!(keep.achieved_pr, 0.0);
        // budget 2 = k: best singleton per block
        let forced = plan_with_budget(&s, 5, 0.6).unwrap();
        assert_eq!(forced.retained(), vec![1, 2]);
        assert!(matches!(plan_with_budget(&s, 5, 0.75), Err(Error::InfeasibleBudget { budget: 1, blocks: 2 })));
        assert!(plan_with_budget(&s, 5, 1.0).is_err());
    }

    #[test]
    fn budget_matches_exhaustive_split() {
        for seed in 0..20u64 {
            let score = |c: &LayerCombination| (rng::mix(seed, &[c.block_id as u64, c.mask as u64]) % 1000) as f64 / 100.0;
            let s = vec![fake_search(0, 0, 1, score), fake_search(1, 2, 4, score)];
            let plan = plan_with_budget(&s, 5, 0.4).unwrap();
            assert_eq!(plan.total_retained, 3);
            // oracle: every pair of combinations with sizes summing to 3
            let mut best = f64::NEG_INFINITY;
            for a in &s[0].candidates {
                for b in &s[1].candidates {
                    if a.combination.size + b.combination.size == 3 {
                        best = best.max(a.synflow + b.synflow);
                    }
                }
            }
            let got: f64 = plan.blocks.iter().map(|b| b.score).sum();
            assert_eq!(got, best, "seed {seed}");
        }
    }

    #[test]
    fn scoring_is_thread_count_independent() {
        let m = build(Preset::Vgg4, 6, &mut rng::rng(5));
        let one = with_jobs(1, || score_block(&m, 0, 0, 3, 11, 64)).unwrap().unwrap();
        let four = with_jobs(4, || score_block(&m, 0, 0, 3, 11, 64)).unwrap().unwrap();
        assert_eq!(one, four);
        assert_eq!(one.candidates.len(), 15);
    }
}
