//! Acceptance suite. Runs every criterion in order (timed criteria must not
//! share the CPU with each other) and prints one PASS/FAIL line per
//! criterion. Exits non-zero if any criterion fails.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use layerprune::nn::count::flops_breakdown;
use layerprune::nn::presets::{architecture, plain_unit, residual_unit};
use layerprune::nn::{count_flops, count_params, Dense, ModelGraph, PrimitiveLayer, Preset, Skip, TrainConfig, Unit};
use layerprune::partition::{brute_force_segment, fisher_segment};
use layerprune::pipeline::{artifact, PipelineConfig, Stage, Workspace};
use layerprune::rebuild::{self, PruneReport, PrunedModelSpec};
use layerprune::selection::{self, enumerate_combinations, search_space, synflow_r, synflow_saliency, SelectionPlan};
use layerprune::signal::Subset;
use layerprune::similarity::{cka, hsic1, GramMatrix};
use layerprune::{rng, Result};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gram_of(x: &DMatrix<f64>) -> GramMatrix {
    let k = x * x.transpose();
    let b = k.nrows();
    GramMatrix::from_rows(b, (0..b).flat_map(|i| (0..b).map(move |j| (i, j))).map(|(i, j)| k[(i, j)]).collect()).unwrap()
}

fn random_matrix(rows: usize, cols: usize, r: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

// 1. CKA properties on random features.
fn c1_cka_properties() -> Result<Outcome> {
    let start = Instant::now();
    let mut r = rng::rng(1);
    let (mut sym, mut selfsim, mut scale, mut orth) = (0f64, 0f64, 0f64, 0f64);
    for b in [8, 64, 200] {
        for d in [4, 512] {
            let x = random_matrix(b, d, &mut r);
            // a related representation so CKA is far from 0 and 1
            let y = &x * random_matrix(d, d, &mut r) + random_matrix(b, d, &mut r) * 0.5;
            let (k, l) = (gram_of(&x), gram_of(&y));
            let base = cka(&k, &l)?;
            sym = sym.max((base - cka(&l, &k)?).abs());
            selfsim = selfsim.max((cka(&k, &k)? - 1.0).abs());
            for c in [1e-3, 7.3, 1e3] {
                scale = scale.max((cka(&gram_of(&(&x * c)), &l)? - base).abs());
            }
            let q = random_matrix(d, d, &mut r).qr().q();
            orth = orth.max((cka(&gram_of(&(&x * q)), &l)? - base).abs());
        }
    }
    let t = start.elapsed();
    let pass = sym <= 1e-6 && selfsim <= 1e-6 && scale <= 1e-6 && orth <= 1e-5 && t < Duration::from_secs(10);
    Ok(outcome(
        pass,
        format!("symmetry {sym:.1e}, self {selfsim:.1e}, scaling {scale:.1e}, orthogonal {orth:.1e}, {:.2}s", t.as_secs_f64()),
    ))
}

/// Unbiased HSIC written out term by term with matrix products.
fn hsic1_oracle(k: &DMatrix<f64>, l: &DMatrix<f64>) -> f64 {
    let b = k.nrows();
    let bf = b as f64;
    let off = DMatrix::from_element(b, b, 1.0) - DMatrix::identity(b, b);
    let kt = k.component_mul(&off);
    let lt = l.component_mul(&off);
    let one = DMatrix::from_element(b, 1, 1.0);
    let trace = (&kt * &lt).trace();
    let sk = (one.transpose() * &kt * &one)[(0, 0)];
    let sl = (one.transpose() * &lt * &one)[(0, 0)];
    let cross = (one.transpose() * &kt * &lt * &one)[(0, 0)];
    (trace + sk * sl / ((bf - 1.0) * (bf - 2.0)) - 2.0 / (bf - 2.0) * cross) / (bf * (bf - 3.0))
}

// 2. hsic1 against the transcription.
fn c2_hsic_transcription() -> Result<Outcome> {
    let mut r = rng::rng(2);
    let mut worst = 0f64;
    for i in 0..20 {
        let b = 4 + i % 5;
        let d = r.random_range(1..6);
        let x = random_matrix(b, d, &mut r);
        let y = random_matrix(b, d, &mut r);
        let (kx, ly) = (&x * x.transpose(), &y * y.transpose());
        let got = hsic1(&gram_of(&x), &gram_of(&y))?;
        worst = worst.max((got - hsic1_oracle(&kx, &ly)).abs());
    }
    Ok(outcome(worst <= 1e-10, format!("20 pairs (b = 4..8), max |diff| {worst:.1e}")))
}

// 3. Fisher DP against brute force.
fn c3_fisher_oracle() -> Result<Outcome> {
    let start = Instant::now();
    let mut r = rng::rng(3);
    let (mut worst, mut mismatched) = (0f64, 0);
    for _ in 0..200 {
        let l = r.random_range(1..=10);
        let k = r.random_range(1..=l.min(4));
        let z: Vec<f64> = (0..l).map(|_| r.random_range(-3.0..3.0)).collect();
        let dp = fisher_segment(&z, k)?;
        let bf = brute_force_segment(&z, k)?;
        worst = worst.max((dp.cost - bf.cost).abs());
        mismatched += (dp.blocks != bf.blocks) as usize;
    }
    let t = start.elapsed();
    Ok(outcome(
        worst <= 1e-9 && mismatched == 0 && t < Duration::from_secs(5),
        format!("200 instances, max cost diff {worst:.1e}, boundary mismatches {mismatched}, {:.2}s", t.as_secs_f64()),
    ))
}

/// Small net with every parameter magnitude in [0.05, 1] and random signs,
/// so no finite-difference step crosses |θ| = 0.
fn random_synflow_net(seed: u64) -> ModelGraph {
    let (units, width) = match seed % 3 {
        0 => (vec![plain_unit(0, 2, 3, 1), plain_unit(1, 3, 4, 2)], 4),
        1 => (vec![plain_unit(0, 2, 3, 1), residual_unit(1, 3, 3, 1)], 3),
        _ => (vec![plain_unit(0, 2, 4, 1), residual_unit(1, 4, 3, 2)], 3),
    };
    let mut m = ModelGraph {
        units,
        head: vec![PrimitiveLayer::GlobalAvgPool1d, PrimitiveLayer::Dense(Dense::new(width, 3, true))],
        num_classes: 3,
    };
    let mut r = rng::rng(seed);
    for p in m.params_mut() {
        for v in p.data_mut() {
            let mag: f32 = r.random_range(0.05..1.0);
            *v = if r.random::<bool>() { mag } else { -mag };
        }
    }
    m
}

// 4. SynFlow gradient check and the 2→2→1 oracle.
fn c4_synflow() -> Result<Outcome> {
    const H: f64 = 1e-3;
    let mut worst = 0f64;
    for seed in 0..3 {
        let m = random_synflow_net(seed);
        let s = synflow_saliency(&m, 8)?;
        let base: ModelGraph<f64> = m.cast();
        for (pi, g) in s.grads.iter().enumerate() {
            for i in 0..g.len() {
                let r_at = |delta: f64| -> Result<f64> {
                    let mut p = base.clone();
                    p.params_mut()[pi].data_mut()[i] += delta;
                    synflow_r_f64(&p, 8)
                };
                let fd = (r_at(H)? - r_at(-H)?) / (2.0 * H);
                let a = g.data()[i];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-12));
            }
        }
    }
    let toy = two_two_one();
    let r = synflow_r(&toy, 1)?;
    let total = synflow_saliency(&toy, 1)?.total_saliency();
    Ok(outcome(
        worst <= 1e-3 && r == 4.0 && total == 8.0,
        format!("3 nets, max rel err {worst:.1e}; 2-2-1 net R = {r}, saliency {total}"),
    ))
}

/// `R` of an f64 model, using the same |θ| semantics as the f32 scorer.
fn synflow_r_f64(m: &ModelGraph<f64>, length: usize) -> Result<f64> {
    let mut abs = m.clone();
    for layer in abs.layers_mut() {
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
    let y = abs.forward(&layerprune::nn::Tensor::full(&[1, 2, length], 1.0), layerprune::nn::Mode::Eval)?;
    Ok(y.data().iter().sum())
}

fn two_two_one() -> ModelGraph {
    let mut hidden = Dense::new(2, 2, false);
    hidden.weight.data_mut().fill(1.0);
    let mut out = Dense::new(2, 1, false);
    out.weight.data_mut().fill(1.0);
    ModelGraph {
        units: vec![Unit {
            id: 0,
            body: vec![PrimitiveLayer::Flatten, PrimitiveLayer::Dense(hidden), PrimitiveLayer::Relu],
            skip: Skip::None,
            post_relu: false,
        }],
        head: vec![PrimitiveLayer::Dense(out)],
        num_classes: 1,
    }
}

// 5. Search-space identity.
fn c5_search_space() -> Result<Outcome> {
    let (lo_hi, mut enumerated) = ([(0, 4), (5, 11), (12, 19)], 0);
    for (b, (lo, hi)) in lo_hi.into_iter().enumerate() {
        enumerated += enumerate_combinations(b, lo, hi)?.len() as u64;
    }
    let (partitioned, unpartitioned) = search_space(&[5, 7, 8]);
    Ok(outcome(
        enumerated == 413 && partitioned == 413 && unpartitioned == 1_048_575,
        format!("blocks (5,7,8): {enumerated} candidates enumerated; unpartitioned 2^20 - 1 = {unpartitioned}"),
    ))
}

struct DeskRun {
    ws: Workspace,
    report: PruneReport,
    elapsed: Duration,
}

fn desk_config(dir: &Path) -> Result<PipelineConfig> {
    let demo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.toml");
    let mut config = PipelineConfig::load(&demo)?;
    config.out_dir = dir.to_path_buf();
    Ok(config)
}

// 6. End-to-end desk experiment.
fn c6_desk(dir: &Path) -> Result<(Outcome, DeskRun)> {
    let start = Instant::now();
    let mut ws = Workspace::open(desk_config(dir)?)?;
    for stage in [Stage::GenData, Stage::Train, Stage::Prune] {
        ws.run(stage)?;
    }
    let elapsed = start.elapsed();
    let report: PruneReport = ws.read_json(artifact::REPORT_JSON, Stage::Report)?;
    let pass = report.delta_acc >= -3.0 && report.flops_pr >= 40.0 && report.params_pr >= 30.0 && elapsed <= Duration::from_secs(600);
    let detail = format!(
        "baseline {:.2}% (expected >= 90, not gated), pruned {:.2}%, dAcc {:+.2}, flops_pr {:.1}%, params_pr {:.1}%, {:.0}s",
        report.original_acc,
        report.acc,
        report.delta_acc,
        report.flops_pr,
        report.params_pr,
        elapsed.as_secs_f64()
    );
    Ok((outcome(pass, detail), DeskRun { ws, report, elapsed }))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// 7. Fine-tuning against training from scratch on the pruned architecture.
fn c7_finetune_vs_scratch(run: &DeskRun) -> Result<Outcome> {
    let ws = &run.ws;
    let model = ws.read_model(artifact::MODEL, Stage::Train)?;
    let plan: SelectionPlan = ws.read_json(artifact::SELECTION, Stage::Select)?;
    let spec: PrunedModelSpec = ws.read_json(artifact::PRUNED_SPEC, Stage::Finetune)?;
    let data = ws.load_dataset()?;
    let split = ws.split(&data)?;
    let sub = |indices| Subset { data: &data, indices };
    let (train, val, test) = (sub(&split.train), sub(&split.val), sub(&split.test));
    let base = ws.config.finetune_config();
    let (mut tuned, mut scratch) = (vec![run.report.acc], Vec::new());
    for seed in 0..3u64 {
        let cfg = TrainConfig {
            seed: rng::mix(base.seed, &[seed]),
            ..base.clone()
        };
        if seed > 0 {
            let (mut pruned, _) = rebuild::reassemble(&model, &plan, data.signal_length(), seed)?;
            tuned.push(rebuild::finetune(&mut pruned, &train, &val, &test, &cfg)?.test_acc);
        }
        let arch = ws.read_model(artifact::PRUNED_MODEL, Stage::Finetune)?;
        scratch.push(rebuild::train_from_scratch(&arch, &train, &val, &test, &cfg)?.1.test_acc);
    }
    let (ft, sc) = (median(tuned.clone()), median(scratch.clone()));
    Ok(outcome(
        ft >= sc,
        format!(
            "{} units kept, fine-tune {:?} (median {ft:.2}) vs scratch {:?} (median {sc:.2})",
            spec.source_unit_ids.len(),
            tuned.iter().map(|a| (a * 100.0).round() / 100.0).collect::<Vec<_>>(),
            scratch.iter().map(|a| (a * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    ))
}

// 8. Counters against the tallies in docs/counters.md.
fn c8_counters() -> Result<Outcome> {
    let golden: [(Preset, u64, u64); 3] = [
        (Preset::Vgg4, 3078, 258_432),
        (Preset::Vgg8, 5830, 1_401_024),
        (Preset::Resnet6, 21350, 3_039_616),
    ];
    let mut detail = String::new();
    let mut pass = true;
    for (preset, params, flops) in golden {
        let m = architecture(preset, 6);
        let (p, f) = (count_params(&m), count_flops(&m, 128)?);
        pass &= p == params && f == flops && flops_breakdown(&m, 128)?.iter().sum::<u64>() == flops;
        let _ = write!(detail, "{preset}: {p} params, {f} FLOPs; ");
    }
    Ok(outcome(pass, detail.trim_end_matches("; ")))
}

const SMALL: &str = r#"
seed = 11
jobs = 1
[data.synth]
schemes = ["BPSK", "QPSK", "PAM4", "16QAM"]
snr_grid = [12, 18]
examples_per_class_per_snr = 60
signal_length = 64
[model]
arch = "resnet1d-6"
[train]
epochs = 2
batch_size = 32
[finetune]
epochs = 2
batch_size = 32
[similarity]
samples_per_batch = 64
num_batches = 2
[prune]
k = 3
pruning_rate = 0.5
"#;

// 9. Determinism of the full pipeline and of candidate ranking.
fn c9_determinism(run: &DeskRun, tmp: &Path) -> Result<Outcome> {
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let mut config = PipelineConfig::from_toml_str(SMALL)?;
        config.out_dir = tmp.join(name);
        let mut ws = Workspace::open(config)?;
        for stage in [Stage::GenData, Stage::Train, Stage::Prune] {
            ws.run(stage)?;
        }
        reports.push(std::fs::read(ws.path(artifact::REPORT_CSV)).map_err(|e| layerprune::Error::Io {
            path: ws.path(artifact::REPORT_CSV),
            source: e,
        })?);
    }
    let identical_reports = reports[0] == reports[1];

    let model = run.ws.read_model(artifact::MODEL, Stage::Train)?;
    let partition = run.ws.read_json(artifact::PARTITION, Stage::Partition)?;
    let seed = rng::mix(99, &[1]);
    let ranking = |jobs: usize| -> Result<Vec<Vec<(u32, u64)>>> {
        let searches = selection::with_jobs(jobs, || selection::score_partition(&model, &partition, seed, 128))??;
        Ok(searches
            .iter()
            .map(|s| {
                let mut c: Vec<_> = s.candidates.iter().map(|c| (c.combination.mask, c.synflow.to_bits(), c.rank_index)).collect();
                c.sort_by(|a, b| f64::from_bits(b.1).total_cmp(&f64::from_bits(a.1)).then(b.2.cmp(&a.2)));
                c.into_iter().map(|(m, s, _)| (m, s)).collect()
            })
            .collect())
    };
    let (one, eight) = (ranking(1)?, ranking(8)?);
    let candidates: usize = one.iter().map(Vec::len).sum();
    Ok(outcome(
        identical_reports && one == eight,
        format!(
            "report CSVs identical: {identical_reports}; ranking of {candidates} candidates identical at jobs 1 vs 8: {}",
            one == eight
        ),
    ))
}

// 10. Ablation harness.
fn c10_ablation(run: &mut DeskRun) -> Result<Outcome> {
    run.ws.config.ablation = Default::default();
    run.ws.run(Stage::Ablation)?;
    let csv = std::fs::read_to_string(run.ws.path(artifact::ABLATION)).unwrap_or_default();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    let complete = rows.len() == 10 && rows.iter().all(|r| !r.split(',').nth(4).unwrap_or("").is_empty());
    let mut detail = format!("{} settings written to ablation.csv;", rows.len());
    for r in &rows {
        let f: Vec<&str> = r.split(',').collect();
        let _ = write!(detail, " {}/k{}:[{}]", f[0], f[1], f[4]);
    }
    Ok(outcome(complete, detail))
}

fn report(n: usize, name: &str, result: Result<Outcome>, failures: &mut usize) {
    let o = result.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    if !o.pass {
        *failures += 1;
    }
    println!("criterion {n:>2} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    let mut failures = 0;
    report(1, "CKA properties", c1_cka_properties(), &mut failures);
    report(2, "unbiased HSIC transcription", c2_hsic_transcription(), &mut failures);
    report(3, "Fisher DP vs brute force", c3_fisher_oracle(), &mut failures);
    report(4, "SynFlow gradient check", c4_synflow(), &mut failures);
    report(5, "search-space identity", c5_search_space(), &mut failures);

    let tmp = tempfile::tempdir().expect("temp dir");
    let desk = match c6_desk(&tmp.path().join("desk")) {
        Ok((o, run)) => {
            report(6, "end-to-end desk experiment", Ok(o), &mut failures);
            Some(run)
        }
        Err(e) => {
            report(6, "end-to-end desk experiment", Err(e), &mut failures);
            None
        }
    };
    let skipped = || Err(layerprune::Error::Precondition("criterion 6 run unavailable".into()));
    report(
        7,
        "fine-tune vs scratch",
        desk.as_ref().map_or_else(skipped, c7_finetune_vs_scratch),
        &mut failures,
    );
    report(8, "counters", c8_counters(), &mut failures);
    report(
        9,
        "determinism",
        desk.as_ref().map_or_else(skipped, |d| c9_determinism(d, tmp.path())),
        &mut failures,
    );
    let mut desk = desk;
    report(10, "ablation harness", desk.as_mut().map_or_else(skipped, c10_ablation), &mut failures);
    if let Some(d) = &desk {
        println!("desk pipeline wall time {:.0}s", d.elapsed.as_secs_f64());
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
