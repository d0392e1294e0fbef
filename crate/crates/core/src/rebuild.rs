//! Reassembling the retained units into a compact network, recovering its
//! accuracy, and reporting what was saved.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::train::{accuracy, fit, FitOutcome};
use crate::nn::{checkpoint, count_flops, count_params, init, kaiming_init, Conv1d, Dense, ExampleSource};
use crate::nn::{ModelGraph, PrimitiveLayer, Skip, TrainConfig, INPUT_CHANNELS};
use crate::rng;
use crate::selection::SelectionPlan;

/// Which layer of a unit was rebuilt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepairSite {
    /// First parametric layer of the body.
    Body,
    Projection,
    /// Identity shortcut replaced by a 1×1 projection.
    IdentityToProjection,
    /// First parametric layer of the classifier head.
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterRepair {
    /// Source id of the repaired unit; `None` for the head.
    pub unit_id: Option<usize>,
    pub site: RepairSite,
    pub old_in_dim: usize,
    pub new_in_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedModelSpec {
    /// SHA-256 of the source checkpoint bytes.
    pub source_checkpoint: String,
    pub plan: SelectionPlan,
    /// Source unit id of each unit of the pruned model.
    pub source_unit_ids: Vec<usize>,
    pub adapter_log: Vec<AdapterRepair>,
}

pub fn checkpoint_id(model: &ModelGraph) -> String {
    hex::encode(Sha256::digest(checkpoint::to_bytes(model)))
}

fn input_width(layer: &PrimitiveLayer, shape: &[usize]) -> usize {
    match layer {
        PrimitiveLayer::Conv1d(_) => shape[0],
        _ => shape.iter().product(),
    }
}

/// Same layer with a new input width, freshly initialised.
fn rewidth<R: rand::Rng + ?Sized>(layer: &PrimitiveLayer, width: usize, rng: &mut R) -> PrimitiveLayer {
    let mut fresh = match layer {
        PrimitiveLayer::Dense(d) => PrimitiveLayer::Dense(Dense::new(width, d.out_dim, d.bias.is_some())),
        PrimitiveLayer::Conv1d(c) => {
            PrimitiveLayer::Conv1d(Conv1d::new(width, c.out_ch, c.kernel, c.stride, c.padding, c.bias.is_some()))
        }
        other => unreachable!("{} has no input width", other.kind_name()),
    };
    kaiming_init(&mut fresh, rng);
    fresh
}

/// Propagates `shape` through `layers`, rebuilding the first parametric
/// layer if it does not accept its input. Returns the output shape and the
/// old width of a rebuilt layer.
fn fit_layers<R: rand::Rng + ?Sized>(
    layers: &mut [PrimitiveLayer],
    mut shape: Vec<usize>,
    rng: &mut R,
) -> Result<(Vec<usize>, Option<(usize, usize)>)> {
    let mut repaired = None;
    let mut seen_parametric = false;
    for layer in layers.iter_mut() {
        if layer.is_parametric() && !seen_parametric {
            seen_parametric = true;
            if layer.infer_shape(&shape).is_err() && !matches!(layer, PrimitiveLayer::BatchNorm1d(_)) {
                let old = layer.input_width().expect("parametric layer");
                let new = input_width(layer, &shape);
                *layer = rewidth(layer, new, rng);
                repaired = Some((old, new));
            }
        }
        shape = layer.infer_shape(&shape)?;
    }
    Ok((shape, repaired))
}

/// Builds the pruned network from the retained units of `plan`.
///
/// Retained parameters are copied bit for bit. A unit whose input width no
/// longer matches gets its first parametric layer (and projection) rebuilt
/// and freshly initialised; every such repair is logged.
pub fn reassemble(model: &ModelGraph, plan: &SelectionPlan, signal_length: usize, seed: u64) -> Result<(ModelGraph, PrunedModelSpec)> {
    let retained = plan.retained();
    if retained.is_empty() {
        return Err(Error::Precondition("plan retains no units".into()));
    }
    if retained.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Precondition(format!("retained units must be strictly increasing: {retained:?}")));
    }
    if let Some(&bad) = retained.iter().find(|&&u| u >= model.num_units()) {
        return Err(Error::IndexOutOfRange {
            what: "retained unit",
            index: bad,
            len: model.num_units(),
        });
    }
    let mut r = rng::derived(seed, &[0xada]);
    let mut log = Vec::new();
    let mut units = Vec::with_capacity(retained.len());
    let mut shape = vec![INPUT_CHANNELS, signal_length];
    for (new_id, &src) in retained.iter().enumerate() {
        let mut unit = model.units[src].clone();
        unit.id = new_id;
        let input = shape.clone();
        let (out, repaired) = fit_layers(&mut unit.body, input.clone(), &mut r)
            .map_err(|e| Error::Precondition(format!("unit {src} cannot be repaired: {e}")))?;
        if let Some((old, new)) = repaired {
            log.push(AdapterRepair {
                unit_id: Some(src),
                site: RepairSite::Body,
                old_in_dim: old,
                new_in_dim: new,
            });
        }
        match &mut unit.skip {
            Skip::None => {}
            Skip::Projection(p) => {
                if p.infer_shape(&input).is_err() {
                    let old = p.input_width().expect("projection is parametric");
                    *p = rewidth(p, input[0], &mut r);
                    log.push(AdapterRepair {
                        unit_id: Some(src),
                        site: RepairSite::Projection,
                        old_in_dim: old,
                        new_in_dim: input[0],
                    });
                }
            }
            Skip::Identity => {
                if input != out {
                    let proj = identity_replacement(&input, &out, &mut r)
                        .ok_or_else(|| Error::Precondition(format!("unit {src}: no 1×1 projection maps {input:?} to {out:?}")))?;
                    unit.skip = Skip::Projection(proj);
                    log.push(AdapterRepair {
                        unit_id: Some(src),
                        site: RepairSite::IdentityToProjection,
                        old_in_dim: out[0],
                        new_in_dim: input[0],
                    });
                }
            }
        }
        shape = unit.infer_shape(&input)?;
        units.push(unit);
    }
    let mut head = model.head.clone();
    let (_, repaired) = fit_layers(&mut head, shape, &mut r)?;
    if let Some((old, new)) = repaired {
        log.push(AdapterRepair {
            unit_id: None,
            site: RepairSite::Head,
            old_in_dim: old,
            new_in_dim: new,
        });
    }
    let pruned = ModelGraph {
        units,
        head,
        num_classes: model.num_classes,
    };
    pruned.validate(signal_length)?;
    for a in &log {
        log::info!(
            "event=adapter unit={} site={:?} old_in={} new_in={}",
            a.unit_id.map_or("head".to_string(), |u| u.to_string()),
            a.site,
            a.old_in_dim,
            a.new_in_dim
        );
    }
    Ok((
        pruned,
        PrunedModelSpec {
            source_checkpoint: checkpoint_id(model),
            plan: plan.clone(),
            source_unit_ids: retained,
            adapter_log: log,
        },
    ))
}

fn identity_replacement<R: rand::Rng + ?Sized>(input: &[usize], out: &[usize], rng: &mut R) -> Option<PrimitiveLayer> {
    let (&[in_ch, in_len], &[out_ch, out_len]) = (input, out) else {
        return None;
    };
    let stride = (1..=in_len).find(|s| (in_len - 1) / s + 1 == out_len)?;
    let mut p = PrimitiveLayer::Conv1d(Conv1d::new(in_ch, out_ch, 1, stride, 0, true));
    kaiming_init(&mut p, rng);
    Some(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub fit: FitOutcome,
    /// Test accuracy of the weights with the best validation accuracy.
    pub test_acc: f64,
}

impl TrainOutcome {
    /// Test accuracy after each epoch (epoch 0 first).
    pub fn test_curve(&self) -> Vec<f64> {
        self.fit.history.iter().filter_map(|r| r.test_acc).collect()
    }
}

/// Trains from the retained weights; `model` ends holding the best-validation weights.
pub fn finetune(
    model: &mut ModelGraph,
    train: &dyn ExampleSource,
    val: &dyn ExampleSource,
    test: &dyn ExampleSource,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let fit = fit(model, train, val, Some(test), config)?;
    Ok(TrainOutcome {
        fit,
        test_acc: accuracy(model, test)?,
    })
}

/// Same architecture and schedule, all weights freshly initialised from `config.seed`.
pub fn train_from_scratch(
    architecture: &ModelGraph,
    train: &dyn ExampleSource,
    val: &dyn ExampleSource,
    test: &dyn ExampleSource,
    config: &TrainConfig,
) -> Result<(ModelGraph, TrainOutcome)> {
    let mut model = architecture.clone();
    init::init_model(&mut model, &mut rng::derived(config.seed, &[0x5c7a]));
    let out = finetune(&mut model, train, val, test, config)?;
    Ok((model, out))
}

/// One row of the Table-I style report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub model: String,
    pub dataset: String,
    /// Target pruning rate, percent.
    pub pr: f64,
    pub original_acc: f64,
    pub acc: f64,
    pub delta_acc: f64,
    pub original_flops: u64,
    pub pruned_flops: u64,
    pub delta_flops: i64,
    pub original_params: u64,
    pub pruned_params: u64,
    pub delta_params: i64,
    pub flops_pr: f64,
    pub params_pr: f64,
    pub layer_pr: f64,
    pub seed: u64,
}

pub const REPORT_HEADER: &str = "model,dataset,pr,original_acc,acc,delta_acc,delta_flops,delta_params,flops_pr,params_pr";

impl PruneReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.2},{:.4},{:.4},{:.4},{},{},{:.4},{:.4}",
            self.model,
            self.dataset,
            self.pr,
            self.original_acc,
            self.acc,
            self.delta_acc,
            self.delta_flops,
            self.delta_params,
            self.flops_pr,
            self.params_pr
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{REPORT_HEADER}\n{}\n", self.csv_row())
    }
}

pub struct ReportInput<'a> {
    pub model_name: &'a str,
    pub dataset_name: &'a str,
    pub target_pr: f64,
    pub original_acc: f64,
    pub pruned_acc: f64,
    pub seed: u64,
}

fn reduction(original: u64, pruned: u64) -> f64 {
    if original == 0 {
        0.0
    } else {
        (1.0 - pruned as f64 / original as f64) * 100.0
    }
}

pub fn make_report(original: &ModelGraph, pruned: &ModelGraph, input: &ReportInput, signal_length: usize) -> Result<PruneReport> {
    let (of, pf) = (count_flops(original, signal_length)?, count_flops(pruned, signal_length)?);
    let (op, pp) = (count_params(original), count_params(pruned));
    Ok(PruneReport {
        model: input.model_name.to_string(),
        dataset: input.dataset_name.to_string(),
        pr: input.target_pr * 100.0,
        original_acc: input.original_acc,
        acc: input.pruned_acc,
        delta_acc: input.pruned_acc - input.original_acc,
        original_flops: of,
        pruned_flops: pf,
        delta_flops: pf as i64 - of as i64,
        original_params: op,
        pruned_params: pp,
        delta_params: pp as i64 - op as i64,
        flops_pr: reduction(of, pf),
        params_pr: reduction(op, pp),
        layer_pr: reduction(original.num_units() as u64, pruned.num_units() as u64),
        seed: input.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::presets::{build, plain_unit, Preset};
    use crate::nn::{Mode, Tensor};
    use crate::selection::{BlockChoice, LayerCombination};

    fn plan_keeping(retained: &[usize], l: usize) -> SelectionPlan {
        let mask = retained.iter().fold(0u32, |m, &u| m | 1 << u);
        let mut plan = SelectionPlan::keep_all(l);
        plan.blocks = vec![BlockChoice {
            id: 0,
            lo: 0,
            hi: l - 1,
            combination: LayerCombination {
                block_id: 0,
                lo: 0,
                mask,
                size: retained.len() as u32,
            },
            retained_unit_ids: retained.to_vec(),
            score: 0.0,
        }];
        plan.total_retained = retained.len();
        plan.achieved_pr = 1.0 - retained.len() as f64 / l as f64;
        plan
    }

    fn toy() -> ModelGraph {
        // 2→4, 4→8, 8→8, head Dense(8, 3)
        let mut m = ModelGraph {
            units: vec![plain_unit(0, 2, 4, 1), plain_unit(1, 4, 8, 1), plain_unit(2, 8, 8, 1)],
            head: vec![PrimitiveLayer::GlobalAvgPool1d, PrimitiveLayer::Dense(Dense::new(8, 3, true))],
            num_classes: 3,
        };
        init::init_model(&mut m, &mut rng::rng(4));
        m
    }

    #[test]
    fn keep_all_is_identity() {
        for preset in Preset::ALL {
            let m = build(preset, 6, &mut rng::rng(1));
            let (p, spec) = reassemble(&m, &SelectionPlan::keep_all(m.num_units()), 128, 0).unwrap();
            assert_eq!(p, m);
            assert!(spec.adapter_log.is_empty());
        }
    }

    #[test]
    fn dropping_a_widening_unit_repairs_its_successor() {
        let m = toy();
        let (p, spec) = reassemble(&m, &plan_keeping(&[0, 2], 3), 16, 0).unwrap();
        assert_eq!(
            spec.adapter_log,
            vec![AdapterRepair {
                unit_id: Some(2),
                site: RepairSite::Body,
                old_in_dim: 8,
                new_in_dim: 4,
            }]
        );
        assert_eq!(p.units[0], m.units[0]);
        assert_eq!(p.units[1].id, 1);
        // everything after the rebuilt conv is copied
        assert_eq!(p.units[1].body[1..], m.units[2].body[1..]);
        assert_eq!(p.head, m.head);
        assert!(p.forward(&Tensor::full(&[2, 2, 16], 0.5), Mode::Eval).is_ok());
    }

    #[test]
    fn dropping_the_last_wide_unit_repairs_the_head() {
        let m = toy();
        let (p, spec) = reassemble(&m, &plan_keeping(&[0], 3), 16, 0).unwrap();
        assert_eq!(spec.adapter_log.len(), 1);
        assert_eq!(spec.adapter_log[0].site, RepairSite::Head);
        assert_eq!((spec.adapter_log[0].old_in_dim, spec.adapter_log[0].new_in_dim), (8, 4));
        p.validate(16).unwrap();
    }

    #[test]
    fn resnet_repairs_projection_and_identity() {
        let m = build(Preset::Resnet6, 6, &mut rng::rng(2));
        // drop the 16→32 stride-2 unit: unit 4 (identity, 32→32) now sees 16 channels
        let (p, spec) = reassemble(&m, &plan_keeping(&[0, 1, 2, 4, 5], 6), 128, 0).unwrap();
        let sites: Vec<_> = spec.adapter_log.iter().map(|a| (a.unit_id, a.site)).collect();
        assert_eq!(sites, vec![(Some(4), RepairSite::Body), (Some(4), RepairSite::IdentityToProjection)]);
        assert!(matches!(p.units[3].skip, Skip::Projection(_)));
        p.validate(128).unwrap();
        // keeping the projection unit alone: it sees the 2-channel input
        let (_, spec) = reassemble(&m, &plan_keeping(&[3, 5], 6), 128, 0).unwrap();
        assert!(spec.adapter_log.iter().any(|a| a.site == RepairSite::Projection && a.unit_id == Some(3)));
    }

    #[test]
    fn stride_drop_keeps_head() {
        let m = build(Preset::Vgg4, 6, &mut rng::rng(3));
        // unit 1 is 8→16 stride 2; dropping units 1 and 2 leaves 8 channels into a 16→32 conv
        let (p, _) = reassemble(&m, &plan_keeping(&[0, 3], 4), 128, 0).unwrap();
        assert_eq!(p.shapes(128).unwrap()[1], vec![32, 64]);
    }

    #[test]
    fn rejects_bad_plans() {
        let m = toy();
        let mut plan = plan_keeping(&[0, 2], 3);
        plan.blocks[0].retained_unit_ids = vec![2, 0];
        assert!(reassemble(&m, &plan, 16, 0).is_err());
        plan.blocks[0].retained_unit_ids = vec![5];
        assert!(reassemble(&m, &plan, 16, 0).is_err());
    }

    #[test]
    fn report_of_identical_models_is_zero() {
        let m = toy();
        let input = ReportInput {
            model_name: "toy",
            dataset_name: "synthetic",
            target_pr: 0.5,
            original_acc: 91.0,
            pruned_acc: 91.0,
            seed: 0,
        };
        let r = make_report(&m, &m, &input, 16).unwrap();
        assert_eq!((r.delta_flops, r.delta_params, r.flops_pr, r.params_pr, r.layer_pr), (0, 0, 0.0, 0.0, 0.0));
        assert_eq!(r.to_csv().lines().next().unwrap(), REPORT_HEADER);
        assert_eq!(r.csv_row().split(',').count(), 10);
    }

    #[test]
    fn report_of_toy_drop_matches_hand_tally() {
        let m = toy();
        let (p, _) = reassemble(&m, &plan_keeping(&[0, 2], 3), 16, 0).unwrap();
        // params: conv 2·4·3=24 + bn 8; conv 4·8·3=96 + bn 16; conv 8·8·3=192 + bn 16; head 8·3+3=27
        assert_eq!(count_params(&m), 24 + 8 + 96 + 16 + 192 + 16 + 27);
        // pruned: unit 0 (32) + conv 4·8·3=96 + bn 16 + head 27
        assert_eq!(count_params(&p), 32 + 112 + 27);
        // flops per example: 2·L·out·in·k for each conv, 2·in·out for the head
        let of = 2 * 16 * (4 * 2 * 3 + 8 * 4 * 3 + 8 * 8 * 3) + 2 * 24;
        let pf = 2 * 16 * (4 * 2 * 3 + 8 * 4 * 3) + 2 * 24;
        let input = ReportInput {
            model_name: "toy",
            dataset_name: "synthetic",
            target_pr: 1.0 / 3.0,
            original_acc: 90.0,
            pruned_acc: 88.5,
            seed: 0,
        };
        let r = make_report(&m, &p, &input, 16).unwrap();
        assert_eq!((r.original_flops, r.pruned_flops), (of, pf));
        assert!((r.flops_pr - (1.0 - pf as f64 / of as f64) * 100.0).abs() < 1e-12);
        assert!((r.params_pr - (1.0 - 171.0 / 379.0) * 100.0).abs() < 1e-12);
        assert!((r.layer_pr - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.delta_acc, -1.5);
    }
}
