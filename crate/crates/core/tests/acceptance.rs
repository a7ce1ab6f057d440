//! Acceptance gate. Everything runs inside one test so that the timing
//! measurements are not disturbed by other tests of this binary. Each
//! criterion writes one `PASS`/`FAIL` line straight to stderr, bypassing the
//! harness capture, and the test fails at the end if any line failed.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use common::cmfi_reference;
use compseg::ablation::{run_arm, Arm};
use compseg::checkpoint::Checkpoint;
use compseg::cmfi::{build_cmfi, cmfi_forward, CmfiParams, CmfiVars, Pooling};
use compseg::compnet::{model_forward, Model, NetConfig};
use compseg::dataset::Dataset;
use compseg::ensemble::ensemble_infer;
use compseg::evaluate::evaluate;
use compseg::feature::FeatureMap;
use compseg::losses::{dice_score, hausdorff_mm, pixel_distance, total_loss, Mask};
use compseg::meta_codec::{MetadataEntitySpec, MetadataRecord, MetadataSchema};
use compseg::nn::Mode;
use compseg::synth::{generate_cases, PhantomSpec, Split, SplitSizes};
use compseg::trainer::{prepare_cases, train, TrainConfig};
use compseg_tensor::gradcheck::check_gradients;
use compseg_tensor::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Gate {
    failed: Vec<u32>,
}

impl Gate {
    fn report(&mut self, id: u32, name: &str, ok: bool, detail: String) {
        let verdict = if ok { "PASS" } else { "FAIL" };
        let line = format!("[acceptance] {verdict} criterion {id} ({name}): {detail}\n");
        let _ = std::io::stderr().write_all(line.as_bytes());
        if !ok {
            self.failed.push(id);
        }
    }
}

/// Least-squares slope of `ln t` against `ln x`.
fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|(x, t)| (x.ln(), t.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Fastest of `reps` runs.
fn best_time(reps: usize, mut f: impl FnMut()) -> Duration {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .min()
        .unwrap()
}

fn random_cmfi(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> (Tensor<f64>, Tensor<f64>, CmfiParams<f64>) {
    let image = Tensor::from_fn(vec![b, c, h, w], |_| rng.random_range(-2.0..2.0));
    let meta = Tensor::from_fn(vec![b, c], |_| rng.random_range(-2.0..2.0));
    let params = CmfiParams::random(c, rng, true);
    (image, meta, params)
}

fn criterion_1(gate: &mut Gate) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let b = rng.random_range(1..=3);
        let c = [2, 4, 8][rng.random_range(0..3)];
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let (image, meta, p) = random_cmfi(&mut rng, b, c, h, w);
        let expect = cmfi_reference(&image, &meta, &p);
        let (out, _) = cmfi_forward(&FeatureMap::unitless(image).unwrap(), &meta, &p).unwrap();
        worst = worst.max(out.data().max_abs_diff(&expect));
    }
    let elapsed = start.elapsed();

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut timings = Vec::new();
    for side in [1usize, 2, 4, 8, 16, 32, 64] {
        let (image, meta, p) = random_cmfi(&mut rng, 1, 8, side, side);
        let fm = FeatureMap::unitless(image).unwrap();
        let t = best_time(5, || {
            cmfi_forward(&fm, &meta, &p).unwrap();
        });
        timings.push(((side * side) as f64, t.as_secs_f64()));
    }
    let slope = log_log_slope(&timings);
    gate.report(
        1,
        "fusion oracle equivalence",
        worst < 1e-6 && elapsed < Duration::from_secs(30) && slope < 1.3,
        format!("max |diff| {worst:.2e} over 100 configs in {elapsed:.2?}; log-time/log-N slope {slope:.2} on N in [1, 4096]"),
    );
}

fn criterion_2(gate: &mut Gate) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (image, meta, p) = random_cmfi(&mut rng, 2, 4, 4, 4);
    let weights = Tensor::from_fn(vec![2, 4, 4, 4], |_| rng.random_range(-1.0..1.0));
    let inputs: Vec<Tensor<f64>> = p.tensors().into_iter().cloned().collect();
    let mut worst = 0.0f64;
    for pooling in [Pooling::Sum, Pooling::Mean] {
        let reports = check_gradients(&inputs, 1e-5, |g, leaves| {
            let vars = CmfiVars::from_slice(leaves).map_err(|e| TensorError::Invalid {
                op: "fusion",
                detail: e.to_string(),
            })?;
            let (i, m) = (g.constant(image.clone()), g.constant(meta.clone()));
            let nodes = build_cmfi(g, i, m, &vars, p.norm_eps, pooling).map_err(|e| TensorError::Invalid {
                op: "fusion",
                detail: e.to_string(),
            })?;
            g.dot_const(nodes.output, weights.clone())
        })
        .unwrap();
        assert_eq!(reports.len(), 20);
        worst = reports.iter().map(|r| r.relative_error()).fold(worst, f64::max);
    }
    let elapsed = start.elapsed();
    gate.report(
        2,
        "fusion gradient check",
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!("worst relative error {worst:.2e} over 20 tensors (C=4, N=16, step 1e-5) in {elapsed:.2?}"),
    );
}

fn criterion_3(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut alpha_ok = true;
    for _ in 0..1000 {
        let (sub, sup, meta) = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), rng.random_range(0.0..5.0));
        let b = total_loss(sub, sup, meta, 0.7).unwrap();
        worst = worst.max((b.l_seg - (sub + sup)).abs());
        worst = worst.max((b.l_total - (0.7 * (sub + sup) + 0.3 * meta)).abs());
        alpha_ok &= b.alpha == 0.7;
    }
    let hand = total_loss(0.3, 0.1, 0.2, 0.7).unwrap().l_total;
    let hand_ok = (hand - 0.34).abs() < 1e-12 && (total_loss(0.6, 0.4, 0.0, 0.7).unwrap().l_total - 0.7).abs() < 1e-12;
    gate.report(
        3,
        "loss identities",
        worst < 1e-12 && alpha_ok && hand_ok,
        format!("max identity error {worst:.2e} over 1000 triples; worked example {hand}"),
    );
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let target = rng.random_range(1..=200);
    let mut data = vec![false; h * w];
    for _ in 0..target {
        data[rng.random_range(0..h * w)] = true;
    }
    Mask::new(h, w, data).unwrap()
}

fn brute_force_hd(a: &Mask, b: &Mask, spacing: (f64, f64)) -> f64 {
    let directed = |p: &Mask, t: &Mask| {
        let mut worst = 0.0f64;
        for y in 0..p.height() {
            for x in 0..p.width() {
                if !p.get(y, x) {
                    continue;
                }
                let mut best = f64::INFINITY;
                for v in 0..t.height() {
                    for u in 0..t.width() {
                        if t.get(v, u) {
                            best = best.min(pixel_distance((y, x), (v, u), spacing));
                        }
                    }
                }
                worst = worst.max(best);
            }
        }
        worst
    };
    directed(a, b).max(directed(b, a))
}

fn criterion_4(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for i in 0..200 {
        let (h, w) = (rng.random_range(4..=24), rng.random_range(4..=24));
        let (a, b) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        let spacing = if i % 2 == 0 { (1.0, 1.0) } else { (1.25, 0.8) };
        if hausdorff_mm(&a, &b, spacing).unwrap() != brute_force_hd(&a, &b, spacing) {
            mismatches += 1;
        }
    }
    let m = |bits: &[bool]| Mask::new(1, 4, bits.to_vec()).unwrap();
    let half = dice_score(&m(&[true, true, false, false]), &m(&[false, true, true, false])).unwrap();
    let same = dice_score(&m(&[true, false, true, false]), &m(&[true, false, true, false])).unwrap();
    let disjoint = dice_score(&m(&[true, false, false, false]), &m(&[false, false, false, true])).unwrap();
    let empty = dice_score(&m(&[false; 4]), &m(&[false; 4])).unwrap();
    gate.report(
        4,
        "metric oracles",
        mismatches == 0 && half == 50.0 && same == 100.0 && disjoint == 0.0 && empty == 100.0,
        format!("{mismatches}/200 Hausdorff mismatches; Dice half overlap {half}, identical {same}, disjoint {disjoint}"),
    );
}

/// The 200-case desk dataset, full arm trained with seed 0, and its timing.
struct DeskRun {
    dataset: Dataset,
    model: Model<f32>,
    report_dice: f64,
}

fn desk_dataset() -> Dataset {
    let spec = PhantomSpec::default();
    let cases = generate_cases(&spec, SplitSizes::proportional(200), 0).unwrap();
    Dataset::from_cases(MetadataSchema::builtin("mms2").unwrap(), &cases, spec.spacing_mm)
}

fn criterion_5(gate: &mut Gate) -> DeskRun {
    let dataset = desk_dataset();
    let start = Instant::now();
    let (report, model) = run_arm(&dataset, Arm::Full, &NetConfig::desk(), &TrainConfig::desk()).unwrap();
    let elapsed = start.elapsed();
    let super_dice = report.super_dice.unwrap_or(0.0);
    let sub = report.mean_foreground_dice();
    gate.report(
        5,
        "desk training",
        super_dice >= 90.0 && sub >= 80.0 && elapsed < Duration::from_secs(15 * 60),
        format!("binary Dice {super_dice:.2}, mean foreground Dice {sub:.2} on the held-out split after 30 epochs in {elapsed:.1?}"),
    );
    DeskRun {
        dataset,
        model,
        report_dice: sub,
    }
}

fn criterion_6(gate: &mut Gate, desk: &DeskRun) {
    let seeds = [0u64, 1, 2];
    let mut means = Vec::new();
    for arm in [Arm::Full, Arm::NoCmfi, Arm::NoSuper] {
        let mut scores = Vec::new();
        for &seed in &seeds {
            let dice = if arm == Arm::Full && seed == 0 {
                desk.report_dice
            } else {
                let cfg = TrainConfig {
                    seed,
                    ..TrainConfig::desk()
                };
                run_arm(&desk.dataset, arm, &NetConfig::desk(), &cfg).unwrap().0.mean_foreground_dice()
            };
            scores.push(dice);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let _ = std::io::stderr().write_all(
            format!("[acceptance]   arm {:<8} per-seed Dice {scores:.2?} mean {mean:.2}\n", arm.as_str()).as_bytes(),
        );
        means.push(mean);
    }
    let (full, no_cmfi, no_super) = (means[0], means[1], means[2]);
    gate.report(
        6,
        "ablation direction",
        full >= no_cmfi - 0.5 && no_cmfi >= no_super - 0.5,
        format!("mean foreground Dice over seeds {seeds:?}: full {full:.2}, no-cmfi {no_cmfi:.2}, no-super {no_super:.2}"),
    );
}

fn site_schema(k: usize) -> MetadataSchema {
    let names: Vec<String> = (0..k).map(|i| format!("site{i}")).collect();
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    MetadataSchema::new(
        "sites",
        vec![
            MetadataEntitySpec::categorical("site", &refs),
            MetadataEntitySpec::continuous("field_strength", 1.0),
        ],
    )
    .unwrap()
}

fn criterion_7(gate: &mut Gate) {
    let net = NetConfig {
        stage_channels: vec![4, 8, 12],
        input_hw: (32, 32),
        meta_head_dim: 8,
        ..NetConfig::desk()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let image = FeatureMap::new(
        Tensor::from_fn(vec![1, 1, 32, 32], |_| rng.random_range(-1.5f32..1.5)),
        (1.25, 1.25),
    )
    .unwrap();
    let partial = MetadataRecord::new().with_number("field_strength", 3.0);

    let mut worst = 0.0f64;
    let mut timings = Vec::new();
    for k in [2usize, 4, 8, 16] {
        let schema = site_schema(k);
        let model = Model::<f32>::new(&net, &schema, 7).unwrap();
        let out = ensemble_infer(&model, &image, &partial, "site").unwrap();
        // independent mean of independent forward passes
        let singles: Vec<Tensor<f32>> = out
            .values
            .iter()
            .map(|v| {
                let rec = partial.clone().with_label("site", v);
                model_forward(&model, &image, &rec, Mode::Eval, 0).unwrap().sub_probs()
            })
            .collect();
        for i in 0..out.averaged.sub.numel() {
            let mean = singles.iter().map(|t| t.data()[i] as f64).sum::<f64>() / k as f64;
            worst = worst.max((out.averaged.sub.data()[i] as f64 - mean).abs());
        }
        let t = best_time(3, || {
            ensemble_infer(&model, &image, &partial, "site").unwrap();
        });
        timings.push((k as f64, t.as_secs_f64()));
    }
    let slope = log_log_slope(&timings);
    gate.report(
        7,
        "ensemble inference",
        worst < 1e-7 && (0.7..1.3).contains(&slope),
        format!("max |ensemble − mean| {worst:.2e}; log-time/log-categories slope {slope:.2} for 2..16 categories"),
    );
}

fn criterion_8(gate: &mut Gate, desk: &DeskRun) {
    let hw = NetConfig::desk().input_hw;
    let train_cases = prepare_cases(&desk.dataset.split(Split::Train), hw).unwrap();
    let test_cases = prepare_cases(&desk.dataset.split(Split::Test), hw).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::desk()
    };
    let epoch_one = || {
        let model = Model::<f32>::new(&NetConfig::desk(), &desk.dataset.schema, cfg.seed).unwrap();
        train(model, &train_cases, &[], &cfg).unwrap().log[0].l_total
    };
    let (a, b) = (epoch_one(), epoch_one());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    Checkpoint::new(desk.model.clone(), &desk.dataset.schema, 30).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let before = evaluate(&desk.model, &test_cases).unwrap();
    let after = evaluate(&loaded.model, &test_cases).unwrap();
    let identical = before.to_csv().unwrap() == after.to_csv().unwrap()
        && before.summary_csv().unwrap() == after.summary_csv().unwrap();
    gate.report(
        8,
        "determinism",
        (a - b).abs() <= 1e-6 && identical,
        format!(
            "epoch-1 losses {a:.9} and {b:.9}; reports before/after checkpoint round trip {}",
            if identical { "byte-identical" } else { "differ" }
        ),
    );
}

#[test]
fn acceptance_criteria() {
    let mut gate = Gate { failed: Vec::new() };
    criterion_1(&mut gate);
    criterion_2(&mut gate);
    criterion_3(&mut gate);
    criterion_4(&mut gate);
    criterion_7(&mut gate);
    let desk = criterion_5(&mut gate);
    criterion_8(&mut gate, &desk);
    criterion_6(&mut gate, &desk);
    assert!(gate.failed.is_empty(), "failed criteria: {:?}", gate.failed);
}
