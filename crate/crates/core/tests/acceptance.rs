//! End-to-end acceptance suite. Each test prints one `ACCEPTANCE` line with
//! its measured values and pinned tolerances before asserting.

mod common;

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng as _;

use radepth::evaluator::{class_weights, weighted_bce_loss};
use radepth::geometry::Pixel;
use radepth::io::{encode_checkpoint, encode_depth};
use radepth::metrics::{evaluate, roc_auc};
use radepth::nn::{seeded, GradCheckConfig, Scalar};
use radepth::pipeline::{
    assemble_em, complete_depth, infer_em, labeled_scores, prepare_scene, train, EpochLog, FusionModel, SceneData,
    TrainConfig,
};
use radepth::sparse_depth::{build_erm, build_rm, select_pcrm, MatchThresholds, SparseDepthMap};
use radepth::synth::{synthesize, SceneRecipe, SensorSuite};

use common::{brute_force_pcrm, composite_trial, layer_trial, random_pcrm_instance, LAYER_KINDS};

const F64_GRAD_TOL: f64 = 1e-6;
const F32_GRAD_TOL: f64 = 1e-3;
const F64_STEP: f64 = 1e-5;
const F32_STEP: f64 = 1e-2;
/// Kink-crossing probes in the composition retry at half the step, down to ~1e-5.
const COMPOSITE_RETRIES: u32 = 10;
const TRIALS_PER_LAYER: u64 = 13;
const COMPOSITE_TRIALS: u64 = 8;
const GRAD_BUDGET: Duration = Duration::from_secs(120);

const PCRM_INSTANCES: u64 = 1000;
const PCRM_BUDGET: Duration = Duration::from_secs(60);

const LN2_TOL: f64 = 1e-12;
const WEIGHT_PAIRS: usize = 50;

const ORDERING_MARGIN: f64 = 1.05;
const MAX_EPOCHS: usize = 50;
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
const AUC_MIN: f64 = 0.90;
const SWEEP_TAUS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

const METRIC_PAIRS: usize = 1000;
const SCALING_TOL: f64 = 1e-6;

/// Standard suite: scenes `seed..seed + 50` train, the next 10 validate, the next 10 test.
const STANDARD_SEED: u64 = 0;
const TRAIN_SCENES: u64 = 50;
const VAL_SCENES: u64 = 10;
const TEST_SCENES: u64 = 10;

/// Schedule used for the ordering and discrimination runs.
const EPOCHS: usize = 10;
const LEARNING_RATE: f64 = 1e-3;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {n} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
}

// ---------------------------------------------------------------------------
// 1

struct GradientSummary {
    shapes: usize,
    skipped: usize,
    worst_layer: f64,
    worst_composite: f64,
    failures: Vec<String>,
}

/// Layers are scored per parameter tensor. The composition is scored on its
/// whole gradient vector: several of its tensors (shift parameters feeding a
/// later normalization) have near-zero gradients whose per-tensor ratio is
/// dominated by single-precision rounding of the loss.
fn gradient_trials<T: Scalar>(step: f64, tol: f64, label: &str) -> GradientSummary {
    let mut shapes = 0;
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    let mut worst_composite: f64 = 0.0;
    let mut skipped = 0;
    for (k, kind) in LAYER_KINDS.iter().enumerate() {
        for t in 0..TRIALS_PER_LAYER {
            let (name, r) = layer_trial::<T>(kind, 1000 * k as u64 + t, step);
            shapes += 1;
            skipped += r.skipped();
            worst = worst.max(r.max_rel_error());
            if !(r.max_rel_error() < tol) || r.checked() == 0 {
                failures.push(format!("{label} {name}: {:?}", r.worst()));
            }
        }
    }
    for t in 0..COMPOSITE_TRIALS {
        let cfg = GradCheckConfig {
            step,
            retries: COMPOSITE_RETRIES,
            shrink: 2.0,
            ..GradCheckConfig::default()
        };
        let (name, r) = composite_trial::<T>(77 + t, &cfg);
        shapes += 1;
        skipped += r.skipped();
        let err = r.overall_rel_error();
        worst_composite = worst_composite.max(err);
        let signal: f64 = r.params.iter().map(|p| p.analytic_norm).sum();
        if !(err < tol) || r.checked() == 0 || signal == 0.0 {
            failures.push(format!("{label} {name}: whole-gradient rel err {err:.2e}, |grad| {signal:.2e}"));
        }
    }
    GradientSummary {
        shapes,
        skipped,
        worst_layer: worst,
        worst_composite,
        failures,
    }
}

#[test]
fn acceptance_1_gradient_integrity() {
    let start = Instant::now();
    let a = gradient_trials::<f64>(F64_STEP, F64_GRAD_TOL, "f64");
    let b = gradient_trials::<f32>(F32_STEP, F32_GRAD_TOL, "f32");
    let failures: Vec<&String> = a.failures.iter().chain(&b.failures).collect();
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && a.shapes >= 100 && b.shapes >= 100 && elapsed < GRAD_BUDGET;
    let line = |s: &GradientSummary, tol: f64| {
        format!(
            "{} shapes, worst layer {:.2e} and composition {:.2e} < {tol:e}, {} kink skips",
            s.shapes, s.worst_layer, s.worst_composite, s.skipped
        )
    };
    report(
        1,
        "gradient integrity",
        pass,
        &format!(
            "f64: {}; f32: {}; {:.1}s < {}s",
            line(&a, F64_GRAD_TOL),
            line(&b, F32_GRAD_TOL),
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    );
    assert!(pass, "{failures:#?}");
}

// ---------------------------------------------------------------------------
// 2

#[test]
fn acceptance_2_pcrm_matches_brute_force() {
    let start = Instant::now();
    let mut mismatches = Vec::new();
    let mut totals = [0usize; 3];
    for seed in 0..PCRM_INSTANCES {
        // every fourth instance uses the default thresholds
        let inst = random_pcrm_instance(seed, seed % 4 == 0);
        let erm = build_erm(&inst.returns, &inst.cam, inst.v).unwrap();
        let th = MatchThresholds::new(inst.t_abs, inst.t_rel).unwrap();
        let sel = select_pcrm(&erm.entries, &inst.lm, &th).unwrap();
        let keyed = |ids: &[usize]| -> BTreeSet<(usize, Pixel)> {
            ids.iter()
                .map(|&i| (erm.entries[i].source, erm.entries[i].pixel))
                .collect()
        };
        let oracle = brute_force_pcrm(&inst.returns, &inst.cam, inst.v, &inst.lm, inst.t_abs, inst.t_rel);
        let pcrm: std::collections::BTreeMap<Pixel, u32> = sel.pcrm.measured().map(|(p, d)| (p, d.to_bits())).collect();
        let same = keyed(&sel.labels.positives) == oracle.positives
            && keyed(&sel.labels.negatives) == oracle.negatives
            && keyed(&sel.labels.unlabeled) == oracle.unlabeled
            && erm.entries.len() == oracle.positives.len() + oracle.negatives.len() + oracle.unlabeled.len()
            && pcrm == oracle.pcrm;
        if !same {
            mismatches.push(seed);
        }
        totals[0] += oracle.positives.len();
        totals[1] += oracle.negatives.len();
        totals[2] += oracle.unlabeled.len();
    }
    let elapsed = start.elapsed();
    let pass = mismatches.is_empty() && totals.iter().all(|&t| t > 0) && elapsed < PCRM_BUDGET;
    report(
        2,
        "PCRM oracle equivalence",
        pass,
        &format!(
            "{PCRM_INSTANCES} instances, {} mismatches, {}/{}/{} pos/neg/unlabeled entries; {:.2}s < {}s",
            mismatches.len(),
            totals[0],
            totals[1],
            totals[2],
            elapsed.as_secs_f64(),
            PCRM_BUDGET.as_secs()
        ),
    );
    assert!(pass, "mismatching seeds: {mismatches:?}");
}

// ---------------------------------------------------------------------------
// 3

#[test]
fn acceptance_3_loss_identities() {
    let half = weighted_bce_loss(&[0.5], &[1.0], &[1.0]).unwrap();
    let ln2_err = (half.loss - std::f64::consts::LN_2).abs();
    let neg_half = weighted_bce_loss(&[0.5], &[0.0], &[1.0]).unwrap();
    let ln2_neg_err = (neg_half.loss - std::f64::consts::LN_2).abs();
    let grads_ok = half.logit_grads == [-0.5] && neg_half.logit_grads == [0.5];

    let mut rng = seeded(3);
    let mut weight_failures = Vec::new();
    for _ in 0..WEIGHT_PAIRS {
        let n_pos = rng.gen_range(0..5000usize);
        let n_neg = rng.gen_range(usize::from(n_pos == 0)..5000usize);
        let total = (n_pos + n_neg) as f64;
        let expected = (n_pos as f64 / total, n_neg as f64 / total);
        let got = class_weights(n_pos, n_neg, false).unwrap();
        let swapped = class_weights(n_pos, n_neg, true).unwrap();
        if got != expected || swapped != (expected.1, expected.0) {
            weight_failures.push((n_pos, n_neg, got));
        }
    }
    let pass = ln2_err < LN2_TOL && ln2_neg_err < LN2_TOL && grads_ok && weight_failures.is_empty();
    report(
        3,
        "loss identities",
        pass,
        &format!(
            "|L - ln2| = {ln2_err:.1e} and {ln2_neg_err:.1e} < {LN2_TOL:e}; \
             {} of {WEIGHT_PAIRS} weight pairs differ from n_pos/(n_pos+n_neg), n_neg/(n_pos+n_neg)",
            weight_failures.len()
        ),
    );
    assert!(pass, "{weight_failures:?}");
}

// ---------------------------------------------------------------------------
// Standard synthetic suite and the two shared training runs

struct StandardSet {
    train: Vec<SceneData>,
    val: Vec<SceneData>,
    test: Vec<SceneData>,
}

fn scenes(range: std::ops::Range<u64>) -> Vec<SceneData> {
    let recipe = SceneRecipe::default();
    let suite = SensorSuite::default();
    range
        .map(|s| SceneData::from_frame(&synthesize(s, &recipe, &suite).unwrap()))
        .collect()
}

fn standard_set() -> &'static StandardSet {
    static SET: OnceLock<StandardSet> = OnceLock::new();
    SET.get_or_init(|| {
        let s = STANDARD_SEED;
        StandardSet {
            train: scenes(s..s + TRAIN_SCENES),
            val: scenes(s + TRAIN_SCENES..s + TRAIN_SCENES + VAL_SCENES),
            test: scenes(s + TRAIN_SCENES + VAL_SCENES..s + TRAIN_SCENES + VAL_SCENES + TEST_SCENES),
        }
    })
}

struct Run {
    cfg: TrainConfig,
    model: FusionModel<f32>,
    history: Vec<EpochLog>,
    elapsed: Duration,
}

fn run_config(invert: bool) -> TrainConfig {
    TrainConfig {
        epochs: EPOCHS,
        lr: LEARNING_RATE,
        invert_class_weights: invert,
        ..TrainConfig::default()
    }
}

fn trained(invert: bool) -> &'static Run {
    static PRINTED: OnceLock<Run> = OnceLock::new();
    static INVERTED: OnceLock<Run> = OnceLock::new();
    let cell = if invert { &INVERTED } else { &PRINTED };
    cell.get_or_init(|| {
        let set = standard_set();
        let cfg = run_config(invert);
        let start = Instant::now();
        let out = train(&set.train, &set.val, &cfg, |log| {
            eprintln!("[invert={invert}] {}", serde_json::to_string(log).unwrap())
        })
        .unwrap();
        Run {
            cfg,
            model: out.model,
            history: out.history,
            elapsed: start.elapsed(),
        }
    })
}

/// Mean completed-map MAE over the test scenes; `None` if some map is empty.
fn mean_mae(test: &[SceneData], mut sparse: impl FnMut(&SceneData) -> SparseDepthMap) -> Option<f64> {
    let mut total = 0.0;
    for s in test {
        let dense = complete_depth(&sparse(s), &s.image).ok()?;
        total += evaluate(&dense, &s.lidar).unwrap().mae;
    }
    Some(total / test.len() as f64)
}

struct Ordering {
    pcrm: f64,
    em: Option<f64>,
    rm: f64,
}

impl Ordering {
    fn holds(&self) -> bool {
        self.em
            .is_some_and(|em| em >= ORDERING_MARGIN * self.pcrm && self.rm >= ORDERING_MARGIN * em)
    }
}

fn ordering(run: &Run) -> Ordering {
    let set = standard_set();
    let cfg = &run.cfg;
    let mut model = run.model.clone();
    let pcrm = mean_mae(&set.test, |s| {
        let erm = build_erm(&s.radar, &s.camera, cfg.expansion_rows).unwrap();
        select_pcrm(&erm.entries, &s.lidar, &cfg.thresholds).unwrap().pcrm
    })
    .expect("every test scene has a non-empty PCRM");
    let em = mean_mae(&set.test, |s| infer_em(&mut model, s, cfg.expansion_rows, cfg.tau).unwrap().map);
    let rm = mean_mae(&set.test, |s| build_rm(&s.radar, &s.camera).unwrap().map).expect("radar maps are non-empty");
    Ordering { pcrm, em, rm }
}

// ---------------------------------------------------------------------------
// 4

#[test]
fn acceptance_4_oracle_evaluator_reproduces_pcrm() {
    let set = standard_set();
    let cfg = TrainConfig::default();
    let mut failures = Vec::new();
    let mut pixels = 0;
    for (i, s) in set.train.iter().chain(&set.val).chain(&set.test).enumerate() {
        let erm = build_erm(&s.radar, &s.camera, cfg.expansion_rows).unwrap();
        let sel = select_pcrm(&erm.entries, &s.lidar, &cfg.thresholds).unwrap();
        let mut probs = vec![0.0; erm.entries.len()];
        for &p in &sel.labels.positives {
            probs[p] = 1.0;
        }
        let em = assemble_em(&erm.entries, &probs, cfg.tau, s.camera.width, s.camera.height).unwrap();
        let em_pixels: BTreeSet<Pixel> = em.map.measured().map(|(p, _)| p).collect();
        let pcrm_pixels: BTreeSet<Pixel> = sel.pcrm.measured().map(|(p, _)| p).collect();
        if em_pixels != pcrm_pixels || em.map != sel.pcrm {
            failures.push(i);
        }
        pixels += pcrm_pixels.len();
    }
    let pass = failures.is_empty() && pixels > 0;
    report(
        4,
        "plug-in oracle EM",
        pass,
        &format!(
            "{} scenes, {} differ, {pixels} PCRM pixels in total",
            TRAIN_SCENES + VAL_SCENES + TEST_SCENES,
            failures.len()
        ),
    );
    assert!(pass, "scenes {failures:?}");
}

// ---------------------------------------------------------------------------
// 5, 6 and the epoch-over-epoch loss check

#[test]
fn acceptance_5_completion_error_ordering() {
    let mut lines = Vec::new();
    let mut any = false;
    for invert in [false, true] {
        let run = trained(invert);
        let o = ordering(run);
        let within_budget = run.cfg.epochs <= MAX_EPOCHS && run.elapsed < TRAIN_BUDGET;
        let ok = o.holds() && within_budget;
        any |= ok;
        lines.push(format!(
            "{} weights: PCRM {:.3} < EM {} < RM {:.3} with x{ORDERING_MARGIN} margins: {}, {} epochs in {:.0}s",
            if invert { "inverted" } else { "printed" },
            o.pcrm,
            o.em.map_or("empty".to_string(), |v| format!("{v:.3}")),
            o.rm,
            if ok { "holds" } else { "fails" },
            run.cfg.epochs,
            run.elapsed.as_secs_f64(),
        ));
    }
    // sensitivity of the EM error to the acceptance threshold
    let mut sweep = Vec::new();
    for invert in [false, true] {
        let run = trained(invert);
        let mut model = run.model.clone();
        let maes: Vec<String> = SWEEP_TAUS
            .iter()
            .map(|&tau| {
                mean_mae(&standard_set().test, |s| {
                    infer_em(&mut model, s, run.cfg.expansion_rows, tau).unwrap().map
                })
                .map_or("empty".into(), |m| format!("{tau}:{m:.3}"))
            })
            .collect();
        sweep.push(format!("{}: {}", if invert { "inverted" } else { "printed" }, maes.join(" ")));
    }
    println!("EM MAE by tau, {}", sweep.join("; "));
    report(5, "completion error ordering", any, &lines.join("; "));
    assert!(any);
}

#[test]
fn acceptance_6_held_out_discrimination() {
    let set = standard_set();
    let mut detail = Vec::new();
    let mut default_auc = None;
    for invert in [false, true] {
        let run = trained(invert);
        let prepared: Vec<_> = set.test.iter().map(|s| prepare_scene(s, &run.cfg).unwrap()).collect();
        let mut model = run.model.clone();
        let (pos, neg) = labeled_scores(&mut model, &prepared).unwrap();
        let auc = roc_auc(&pos, &neg);
        if !invert {
            default_auc = auc;
        }
        detail.push(format!(
            "{} weights AUC {} over {} positives / {} negatives",
            if invert { "inverted" } else { "printed" },
            auc.map_or("undefined".into(), |a| format!("{a:.4}")),
            pos.len(),
            neg.len()
        ));
    }
    let pass = default_auc.is_some_and(|a| a >= AUC_MIN);
    report(
        6,
        "evaluator discrimination",
        pass,
        &format!("{} (default setting needs >= {AUC_MIN})", detail.join("; ")),
    );
    assert!(pass);
}

#[test]
fn training_loss_decreases_over_ten_epochs() {
    let run = trained(false);
    let first = run.history.first().unwrap().loss;
    let tenth = run.history[9].loss;
    println!("epoch 1 loss {first:.3}, epoch 10 loss {tenth:.3}");
    assert!(tenth < first);
}

// ---------------------------------------------------------------------------
// 7

fn small_run(seed: u64) -> (Vec<u8>, Vec<u8>) {
    let recipe = SceneRecipe::default().with_size(96, 48);
    let suite = SensorSuite::default();
    let data: Vec<SceneData> = (0..3)
        .map(|s| SceneData::from_frame(&synthesize(s, &recipe, &suite).unwrap()))
        .collect();
    let cfg = TrainConfig {
        epochs: 2,
        seed,
        lr: LEARNING_RATE,
        expansion_rows: 15,
        ..TrainConfig::default()
    };
    let mut out = train(&data[..2], &data[2..], &cfg, |_| {}).unwrap();
    let em = infer_em(&mut out.model, &data[2], cfg.expansion_rows, 0.0).unwrap();
    (encode_checkpoint(&out.model), encode_depth(&em.map))
}

#[test]
fn acceptance_7_determinism() {
    let (ckpt_a, em_a) = small_run(5);
    let (ckpt_b, em_b) = small_run(5);
    let (ckpt_c, _) = small_run(6);
    let pass = ckpt_a == ckpt_b && em_a == em_b && ckpt_a != ckpt_c;
    report(
        7,
        "determinism",
        pass,
        &format!(
            "checkpoints {} bytes identical: {}, EM files {} bytes identical: {}, other seed differs: {}",
            ckpt_a.len(),
            ckpt_a == ckpt_b,
            em_a.len(),
            em_a == em_b,
            ckpt_a != ckpt_c
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 8

fn random_pair(rng: &mut radepth::nn::Rng) -> (SparseDepthMap, SparseDepthMap) {
    let (w, h) = (rng.gen_range(1..24), rng.gen_range(1..24));
    let lm: Vec<f32> = (0..w * h)
        .map(|i| if i == 0 || rng.gen_bool(0.6) { rng.gen_range(0.5..80.0) } else { 0.0 })
        .collect();
    let pred: Vec<f32> = (0..w * h).map(|_| rng.gen_range(0.5..80.0)).collect();
    (
        SparseDepthMap::from_values(w, h, pred).unwrap(),
        SparseDepthMap::from_values(w, h, lm).unwrap(),
    )
}

fn scaled(map: &SparseDepthMap, lambda: f32) -> SparseDepthMap {
    SparseDepthMap::from_values(map.width(), map.height(), map.values().iter().map(|v| v * lambda).collect())
        .unwrap()
}

#[test]
fn acceptance_8_metric_properties() {
    let mut rng = seeded(8);
    let mut order_violations = 0;
    let mut worst_scaling: f64 = 0.0;
    for _ in 0..METRIC_PAIRS {
        let (pred, lm) = random_pair(&mut rng);
        let r = evaluate(&pred, &lm).unwrap();
        if r.rmse < r.mae {
            order_violations += 1;
        }
        // powers of two scale f32 depths exactly
        let lambda = 2f32.powi(rng.gen_range(-4..=4));
        let s = evaluate(&scaled(&pred, lambda), &scaled(&lm, lambda)).unwrap();
        let l = lambda as f64;
        let rel = |a: f64, b: f64| if b == 0.0 { a.abs() } else { (a - b).abs() / b.abs() };
        worst_scaling = worst_scaling
            .max(rel(s.mae, l * r.mae))
            .max(rel(s.rmse, l * r.rmse))
            .max(rel(s.rel, r.rel));
    }
    // a non-dyadic factor exercises rounding of the scaled depths
    let (pred, lm) = random_pair(&mut rng);
    let r = evaluate(&pred, &lm).unwrap();
    let s = evaluate(&scaled(&pred, 3.7), &scaled(&lm, 3.7)).unwrap();
    let generic = ((s.mae - 3.7 * r.mae) / (3.7 * r.mae)).abs().max(((s.rel - r.rel) / r.rel).abs());
    worst_scaling = worst_scaling.max(generic);

    let pass = order_violations == 0 && worst_scaling < SCALING_TOL;
    report(
        8,
        "metric properties",
        pass,
        &format!(
            "RMSE < MAE on {order_violations} of {METRIC_PAIRS} pairs; worst scaling deviation {worst_scaling:.1e} < {SCALING_TOL:e}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 9

#[test]
fn acceptance_9_em_shrinks_with_tau() {
    let set = standard_set();
    let run = trained(false);
    let mut model = run.model.clone();
    let taus: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let mut violations = Vec::new();
    let mut first_last = Vec::new();
    for (i, s) in set.test.iter().enumerate() {
        let counts: Vec<usize> = taus
            .iter()
            .map(|&t| infer_em(&mut model, s, run.cfg.expansion_rows, t).unwrap().map.measured_count())
            .collect();
        if counts.windows(2).any(|w| w[1] > w[0]) {
            violations.push((i, counts.clone()));
        }
        first_last.push((counts[0], counts[8]));
    }
    let pass = violations.is_empty();
    report(
        9,
        "EM monotone in tau",
        pass,
        &format!(
            "{} test scenes, {} violations; pixels at tau 0.1 -> 0.9: {first_last:?}",
            set.test.len(),
            violations.len()
        ),
    );
    assert!(pass, "{violations:?}");
}
