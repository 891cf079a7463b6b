//! End-to-end checks of the crate's headline guarantees, one test per claim.
//! Each test prints a PASS line with its measured numbers; run
//! `cargo test --test acceptance -- --nocapture` to see them on success.
//!
//! The shared ten-class fixture is deterministic, so every test sees the
//! same weights no matter which test trains it first.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use deepfool::attacks::{
    affine_exact_oracle, deepfool_multiclass, deepfool_step_l2, deepfool_step_lp,
    default_penalty_schedule, AttackConfig, AttackSpec,
};
use deepfool::data::{split, synth_blobs, Dataset};
use deepfool::models::{
    model_from_bytes, model_hash, model_to_bytes, AnyClassifier, AffineClassifier, Classifier,
    MlpClassifier, ModelFile,
};
use deepfool::robustness::{
    compare_attacks, evaluate_robustness, test_error, EvalOptions, RobustnessReport,
};
use deepfool::tensor::forward;
use deepfool::training::{
    accuracy, build_adversarial_set, cross_entropy_loss, finetune, init_model,
    parameter_gradients, softmax_cross_entropy_gradient, train, ArchSpec, FinetuneConfig,
    TrainConfig,
};
use deepfool::{Activation, DenseTensor, Error, GradientTape, Layer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct BlobsFixture {
    model: MlpClassifier,
    hash: String,
    test_set: Dataset,
}

static FIXTURE: OnceLock<BlobsFixture> = OnceLock::new();

/// Ten well-separated Gaussian blobs in 20 dimensions and a two-hidden-layer
/// net trained on 60% of them. The remaining 40% (520 samples) are the
/// evaluation set for the whole-model tests below.
fn fixture() -> &'static BlobsFixture {
    FIXTURE.get_or_init(|| {
        let data = synth_blobs(20, 10, 130, 6.0, 17).unwrap();
        let (train_set, test_set) = split(&data, (0.6, 0.4), 11).unwrap();
        let cfg = TrainConfig {
            epochs: 15,
            learning_rate: 0.02,
            ..TrainConfig::default()
        };
        let arch = ArchSpec {
            sizes: vec![200, 100, 10],
        };
        let (model, _) = train(&arch, &train_set, None, &cfg).unwrap();
        let hash = model_hash(&ModelFile::bare(AnyClassifier::Mlp(model.clone()))).unwrap();
        BlobsFixture {
            model,
            hash,
            test_set,
        }
    })
}

fn eval_500() -> EvalOptions {
    EvalOptions {
        limit: Some(500),
        deterministic_timing: true,
        ..EvalOptions::default()
    }
}

static DF_500: OnceLock<RobustnessReport> = OnceLock::new();

fn df_500() -> &'static RobustnessReport {
    DF_500.get_or_init(|| {
        let f = fixture();
        evaluate_robustness(
            &f.model,
            &f.hash,
            &f.test_set,
            &AttackSpec::deepfool_default(),
            &eval_500(),
        )
        .unwrap()
    })
}

static FGS_500: OnceLock<RobustnessReport> = OnceLock::new();

fn fgs_500() -> &'static RobustnessReport {
    FGS_500.get_or_init(|| {
        let f = fixture();
        let spec = AttackSpec::FastGradientSign {
            epsilon: None,
            target_rate: 0.9,
            epsilon_max: None,
            grid_steps: 100,
        };
        evaluate_robustness(&f.model, &f.hash, &f.test_set, &spec, &eval_500()).unwrap()
    })
}

#[test]
fn a01_affine_attack_takes_one_step_matching_closed_form() {
    let cfg = AttackConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let started = Instant::now();
    let mut worst_gap = 0.0f64;
    for trial in 0..1000 {
        let n = rng.random_range(2..=50);
        let c = rng.random_range(2..=10);
        let w: Vec<f64> = (0..c * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = AffineClassifier::new(
            DenseTensor::new(vec![c, n], w).unwrap(),
            DenseTensor::new(vec![c], b).unwrap(),
        )
        .unwrap();
        let x =
            DenseTensor::from_vec((0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let step = deepfool_multiclass(&f, &x, None, &cfg).unwrap();
        let exact = affine_exact_oracle(&f, &x, &cfg).unwrap();
        assert_eq!(
            step.iterations, 1,
            "trial {trial}: affine attack took {} iterations",
            step.iterations
        );
        assert!(step.fooled, "trial {trial}: overshot point kept its label");
        let gap = (step.norm2_raw - exact.norm2_raw).abs();
        assert!(gap <= 1e-9, "trial {trial}: norm gap {gap:e} exceeds 1e-9");
        worst_gap = worst_gap.max(gap);
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(10),
        "1000 affine attacks took {elapsed:?}"
    );
    println!(
        "PASS affine exactness: 1000 models, 1 iteration each, worst norm gap {worst_gap:.2e}, {elapsed:?} total"
    );
}

#[test]
fn a02_general_norm_step_reduces_to_l2_and_nails_linf_hand_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=30);
        let k = rng.random_range(1..=9);
        let gaps: Vec<f64> = (0..k).map(|_| -rng.random_range(0.01..3.0)).collect();
        let grads: Vec<DenseTensor> = (0..k)
            .map(|_| {
                DenseTensor::from_vec((0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
                    .unwrap()
            })
            .collect();
        let (i2, r2) = deepfool_step_l2(&gaps, &grads, 1e-12).unwrap();
        let (ip, rp) = deepfool_step_lp(&gaps, &grads, 2.0, 1e-12).unwrap();
        assert_eq!(i2, ip, "p=2 picked a different boundary than the l2 step");
        for (a, b) in r2.data().iter().zip(rp.data()) {
            let d = (a - b).abs();
            assert!(d <= 1e-12, "l2 and p=2 steps differ by {d:e}");
            worst = worst.max(d);
        }
    }

    // One candidate boundary with gap -2 and gradient (1, -3): at p = inf
    // the step magnitude is |gap| / ||w||_1 = 0.5 on every coordinate,
    // signed by the gradient. Both coordinates are exact in binary floats.
    let gaps = [-2.0];
    let grads = [DenseTensor::from_vec(vec![1.0, -3.0]).unwrap()];
    let (idx, r) = deepfool_step_lp(&gaps, &grads, f64::INFINITY, 1e-12).unwrap();
    assert_eq!(idx, 0);
    assert_eq!(r.data(), &[0.5, -0.5]);
    assert_eq!(r.norm_linf(), 0.5);
    println!(
        "PASS norm-order reduction: p=2 matches the closed l2 step within {worst:.1e}; linf hand case exact"
    );
}

/// True when any relu pre-activation sits close enough to zero that a 1e-6
/// nudge anywhere could cross it.
fn near_relu_kink(tape: &GradientTape<'_>) -> bool {
    (0..tape.layer_count()).any(|l| {
        matches!(tape.layer_activation(l), Activation::Relu)
            && tape.pre_activation(l).iter().any(|z| z.abs() < 1e-3)
    })
}

fn central_diff(mut f: impl FnMut(f64) -> f64, at: f64, h: f64) -> f64 {
    (f(at + h) - f(at - h)) / (2.0 * h)
}

/// Copy of `model` with one weight or bias entry shifted by `delta`.
fn with_nudged_param(
    model: &MlpClassifier,
    layer: usize,
    in_weight: bool,
    idx: usize,
    delta: f64,
) -> MlpClassifier {
    let layers: Vec<Layer> = model
        .layers()
        .iter()
        .enumerate()
        .map(|(l, lay)| {
            let mut w = lay.weight().data().to_vec();
            let mut b = lay.bias().data().to_vec();
            if l == layer {
                if in_weight {
                    w[idx] += delta;
                } else {
                    b[idx] += delta;
                }
            }
            Layer::new(
                DenseTensor::new(lay.weight().shape().to_vec(), w).unwrap(),
                DenseTensor::new(lay.bias().shape().to_vec(), b).unwrap(),
                lay.activation(),
            )
            .unwrap()
        })
        .collect();
    MlpClassifier::new(layers).unwrap()
}

/// Relative where the gradient is large, absolute below magnitude 1.
/// Central differences at h = 1e-6 leave roughly 1e-10 of noise, far under
/// the 1e-5 bound.
fn check_grad(ad: f64, fd: f64, what: &str, worst: &mut f64) {
    let scale = 1.0f64.max(ad.abs()).max(fd.abs());
    let rel = (ad - fd).abs() / scale;
    assert!(
        rel < 1e-5,
        "{what}: autodiff {ad} vs finite difference {fd} (error {rel:e})"
    );
    *worst = (*worst).max(rel);
}

#[test]
fn a03_gradients_match_central_finite_differences() {
    let h = 1e-6;
    let archs: &[(usize, &[usize], usize, u64)] = &[
        (12, &[], 5, 1),
        (10, &[16], 4, 2),
        (8, &[14, 10], 3, 3),
    ];
    let mut worst = 0.0f64;
    for &(n, hidden, c, seed) in archs {
        let model = init_model(n, hidden, c, seed, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7700));
        let mut checked = 0;
        let mut attempts = 0;
        while checked < 100 {
            attempts += 1;
            assert!(attempts < 10_000, "could not sample enough kink-free points");
            let x = DenseTensor::from_vec((0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
                .unwrap();
            let (logits, tape) = forward(model.layers(), &x).unwrap();
            if near_relu_kink(&tape) {
                continue;
            }

            // Input gradient of one class score against coordinate nudges.
            let k = rng.random_range(0..c);
            let input_grad = tape.input_gradient(k).unwrap();
            for i in 0..n {
                let fd = central_diff(
                    |t| {
                        let mut coords = x.data().to_vec();
                        coords[i] = t;
                        let xp = DenseTensor::from_vec(coords).unwrap();
                        model.logits(&xp).unwrap().data()[k]
                    },
                    x.data()[i],
                    h,
                );
                check_grad(
                    input_grad.data()[i],
                    fd,
                    &format!("input grad, n={n} hidden={hidden:?} coord {i}"),
                    &mut worst,
                );
            }

            // Every weight and bias entry against the cross-entropy loss.
            let y = rng.random_range(0..c);
            let seed_vec = softmax_cross_entropy_gradient(logits.data(), y);
            let grads = parameter_gradients(&tape, &seed_vec).unwrap();
            for (l, (dw, db)) in grads.iter().enumerate() {
                for (idx, &ad) in dw.data().iter().enumerate() {
                    let fd = central_diff(
                        |t| {
                            let m = with_nudged_param(&model, l, true, idx, t);
                            cross_entropy_loss(m.logits(&x).unwrap().data(), y)
                        },
                        0.0,
                        h,
                    );
                    check_grad(
                        ad,
                        fd,
                        &format!("weight grad, layer {l} entry {idx}"),
                        &mut worst,
                    );
                }
                for (idx, &ad) in db.data().iter().enumerate() {
                    let fd = central_diff(
                        |t| {
                            let m = with_nudged_param(&model, l, false, idx, t);
                            cross_entropy_loss(m.logits(&x).unwrap().data(), y)
                        },
                        0.0,
                        h,
                    );
                    check_grad(
                        ad,
                        fd,
                        &format!("bias grad, layer {l} entry {idx}"),
                        &mut worst,
                    );
                }
            }
            checked += 1;
        }
    }
    println!(
        "PASS gradient check: 3 architectures, 100 points each, worst scaled error {worst:.2e}"
    );
}

#[test]
fn a04_attack_fools_nearly_every_correctly_classified_sample() {
    let f = fixture();
    let err = test_error(&f.model, &f.test_set).unwrap();
    assert!(err <= 0.05, "test error {err:.4} above 5%");
    let report = df_500();
    assert!(
        report.aggregates.fooling_rate >= 0.99,
        "fooling rate {:.4}",
        report.aggregates.fooling_rate
    );
    assert!(
        report.aggregates.mean_iterations <= 5.0,
        "mean iterations {:.2}",
        report.aggregates.mean_iterations
    );
    println!(
        "PASS fooling rate: test error {err:.4}, fooled {:.4} of {} samples, mean iterations {:.2}",
        report.aggregates.fooling_rate,
        report.aggregates.samples_evaluated,
        report.aggregates.mean_iterations
    );
}

#[test]
fn a05_attack_norms_at_most_half_of_sign_baseline() {
    let df = df_500();
    let fgs = fgs_500();
    let ratio = df.aggregates.rho_adv_l2 / fgs.aggregates.rho_adv_l2;
    assert!(
        ratio <= 0.5,
        "rho ratio {ratio:.3} (deepfool {:.4} vs sign {:.4})",
        df.aggregates.rho_adv_l2,
        fgs.aggregates.rho_adv_l2
    );
    let AttackSpec::FastGradientSign {
        epsilon: Some(eps), ..
    } = &fgs.metadata.attack_spec
    else {
        panic!("sign-attack report left epsilon unresolved");
    };
    println!(
        "PASS norm gap: deepfool rho {:.4} vs sign rho {:.4} at epsilon {eps:.3}, ratio {ratio:.3}",
        df.aggregates.rho_adv_l2, fgs.aggregates.rho_adv_l2
    );
}

#[test]
fn a06_attack_stays_near_descent_oracle_at_fraction_of_cost() {
    let f = fixture();
    // Wall clocks stay real here; the budget below is a timing claim.
    let opts = EvalOptions {
        limit: Some(100),
        ..EvalOptions::default()
    };
    let df = evaluate_robustness(
        &f.model,
        &f.hash,
        &f.test_set,
        &AttackSpec::deepfool_default(),
        &opts,
    )
    .unwrap();
    let oracle_spec = AttackSpec::PenalizedOracle {
        schedule: default_penalty_schedule(),
        config: AttackConfig::default(),
    };
    let oracle =
        evaluate_robustness(&f.model, &f.hash, &f.test_set, &oracle_spec, &opts).unwrap();
    let cmp = compare_attacks(&df, &oracle).unwrap();
    assert!(!cmp.model_mismatch);
    assert!(
        cmp.paired_samples >= 90,
        "only {} comparable samples",
        cmp.paired_samples
    );
    assert!(
        cmp.median_norm_ratio <= 1.2,
        "median norm ratio {:.3} above 1.2",
        cmp.median_norm_ratio
    );
    let df_ms = df.aggregates.total_wall_ms;
    let oracle_ms = oracle.aggregates.total_wall_ms;
    assert!(df_ms > 0.0);
    assert!(
        oracle_ms <= 100.0 * df_ms,
        "oracle spent {oracle_ms:.0} ms vs deepfool {df_ms:.1} ms, over the 100x budget"
    );
    println!(
        "PASS oracle comparison: median norm ratio {:.3} over {} samples; oracle {oracle_ms:.0} ms vs deepfool {df_ms:.1} ms ({:.0}x)",
        cmp.median_norm_ratio,
        cmp.paired_samples,
        oracle_ms / df_ms
    );
}

#[test]
fn a07_linf_attack_beats_sign_baseline_in_linf_norm() {
    let f = fixture();
    let spec = AttackSpec::Deepfool {
        config: AttackConfig {
            p: f64::INFINITY,
            ..AttackConfig::default()
        },
    };
    let df_inf = evaluate_robustness(&f.model, &f.hash, &f.test_set, &spec, &eval_500()).unwrap();
    let fgs = fgs_500();
    assert!(
        df_inf.aggregates.rho_adv_linf < fgs.aggregates.rho_adv_linf,
        "linf rho {:.4} not below sign baseline {:.4}",
        df_inf.aggregates.rho_adv_linf,
        fgs.aggregates.rho_adv_linf
    );
    println!(
        "PASS linf ordering: deepfool linf rho {:.4} < sign linf rho {:.4}",
        df_inf.aggregates.rho_adv_linf, fgs.aggregates.rho_adv_linf
    );
}

#[test]
fn a08_finetuning_on_own_perturbations_raises_robustness() {
    // A briefly trained model separates the blobs but leaves its boundaries
    // close to the data, so fine-tuning on its own minimal perturbations has
    // headroom to grow the margins.
    let data = synth_blobs(8, 5, 60, 1.5, 31).unwrap();
    let (train_set, test_set) = split(&data, (0.7, 0.3), 2).unwrap();
    let base = TrainConfig {
        epochs: 1,
        learning_rate: 0.02,
        ..TrainConfig::default()
    };
    let arch = ArchSpec { sizes: vec![16, 5] };
    let (model, _) = train(&arch, &train_set, None, &base).unwrap();
    let err_before = 1.0 - accuracy(&model, &test_set).unwrap();
    let rho_eval = test_set.subsample(100, 9);
    let cfg = FinetuneConfig::default();

    let run = |alpha: f64| {
        let (adv, _) = build_adversarial_set(
            &model,
            &train_set,
            &AttackSpec::deepfool_default(),
            alpha,
        )
        .unwrap();
        finetune(&model, &adv, &rho_eval, Some(&test_set), &base, &cfg).unwrap()
    };

    let (tuned, trace) = run(1.0);
    assert_eq!(trace.points.len(), 6, "5 extra epochs plus the baseline row");
    let pre = trace.points[0].rho_adv;
    let post = trace.points.last().unwrap().rho_adv;
    assert!(
        post >= 1.2 * pre,
        "rho {pre:.4} -> {post:.4}, gain {:.3} below 1.2",
        post / pre
    );

    let (_, trace3) = run(3.0);
    let post3 = trace3.points.last().unwrap().rho_adv;
    assert!(
        post3 <= post,
        "tripled perturbations ended at rho {post3:.4}, above the unmagnified {post:.4}"
    );

    let err_after = 1.0 - accuracy(&tuned, &test_set).unwrap();
    assert!(
        err_after <= err_before + 0.01 + 1e-12,
        "test error rose {err_before:.4} -> {err_after:.4}"
    );
    println!(
        "PASS fine-tuning: rho {pre:.4} -> {post:.4} (x{:.2}); tripled run ends at {post3:.4}; test error {err_before:.3} -> {err_after:.3}",
        post / pre
    );
}

#[test]
fn a09_reruns_are_bit_identical_at_any_thread_count() {
    let data = synth_blobs(6, 3, 40, 2.0, 12).unwrap();
    let (train_set, test_set) = split(&data, (0.7, 0.3), 4).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        learning_rate: 0.02,
        ..TrainConfig::default()
    };
    let arch = ArchSpec { sizes: vec![12, 3] };
    let (m1, _) = train(&arch, &train_set, Some(&test_set), &cfg).unwrap();
    let (m2, _) = train(&arch, &train_set, Some(&test_set), &cfg).unwrap();
    let b1 = model_to_bytes(&ModelFile::bare(AnyClassifier::Mlp(m1.clone()))).unwrap();
    let b2 = model_to_bytes(&ModelFile::bare(AnyClassifier::Mlp(m2))).unwrap();
    assert_eq!(b1, b2, "identical training runs serialized differently");

    let hash = model_hash(&ModelFile::bare(AnyClassifier::Mlp(m1.clone()))).unwrap();
    let opts1 = EvalOptions {
        deterministic_timing: true,
        ..EvalOptions::default()
    };
    let spec = AttackSpec::deepfool_default();
    let r1 = evaluate_robustness(&m1, &hash, &test_set, &spec, &opts1).unwrap();
    let r1_again = evaluate_robustness(&m1, &hash, &test_set, &spec, &opts1).unwrap();
    assert_eq!(
        serde_json::to_vec(&r1).unwrap(),
        serde_json::to_vec(&r1_again).unwrap(),
        "rerun with one thread produced different report bytes"
    );

    // The thread fan-out must not change a single result bit. Records and
    // aggregates are compared serialized; the metadata block is excluded
    // only because it records the requested thread count itself.
    let opts4 = EvalOptions {
        threads: 4,
        ..opts1.clone()
    };
    let r4 = evaluate_robustness(&m1, &hash, &test_set, &spec, &opts4).unwrap();
    assert_eq!(
        serde_json::to_vec(&r1.records).unwrap(),
        serde_json::to_vec(&r4.records).unwrap(),
        "per-sample records depend on thread count"
    );
    assert_eq!(
        serde_json::to_vec(&r1.aggregates).unwrap(),
        serde_json::to_vec(&r4.aggregates).unwrap(),
        "aggregates depend on thread count"
    );
    println!(
        "PASS determinism: {} model bytes and {} records identical across reruns and 1 vs 4 threads",
        b1.len(),
        r1.records.len()
    );
}

#[test]
fn a10_model_format_is_closed_over_dense_layers() {
    // The format knows dense affine layers with identity or relu activation
    // and nothing else; any foreign kind must be rejected loudly rather than
    // skipped. Build a valid file, then corrupt one header byte at a time.
    let model = init_model(4, &[6], 3, 9, 1.0).unwrap();
    let bytes = model_to_bytes(&ModelFile::bare(AnyClassifier::Mlp(model))).unwrap();
    model_from_bytes(&bytes).expect("pristine bytes must parse");

    let mut future_version = bytes.clone();
    future_version[8] = 2; // low byte of the little-endian schema version
    match model_from_bytes(&future_version) {
        Err(Error::UnsupportedSchema {
            found: 2,
            supported: 1,
        }) => {}
        other => panic!("future schema version was not rejected: {other:?}"),
    }

    let mut foreign_arch = bytes.clone();
    foreign_arch[12] = 2; // classifier tag, past affine (0) and mlp (1)
    let err = model_from_bytes(&foreign_arch).unwrap_err();
    assert!(
        err.to_string().contains("unknown architecture tag"),
        "unexpected error: {err}"
    );

    let mut foreign_layer = bytes.clone();
    foreign_layer[33] = 2; // first layer's activation tag
    let err = model_from_bytes(&foreign_layer).unwrap_err();
    assert!(
        err.to_string().contains("unknown activation tag"),
        "unexpected error: {err}"
    );

    println!(
        "PASS scope: unknown schema versions, classifier tags, and activation tags are all rejected"
    );
}
