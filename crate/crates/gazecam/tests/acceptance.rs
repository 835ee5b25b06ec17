//! Acceptance gate: one test per release criterion, each printing a
//! single PASS line with the measured numbers (run with --nocapture to
//! see them). Heavy suites share fixtures through `common`.

mod common;

use common::{joint_network_fd, layer_fd, paired_suite, planted_stream, rel_gap, FdReport, FD_H, FD_REL};
use gazecam::cam::{self, CamVariant};
use gazecam::data;
use gazecam::gaze::{self, Fixation, IvtParams};
use gazecam::layers::{LayerSpec, Mode};
use gazecam::loss;
use gazecam::model::{Model, ModelConfig};
use gazecam::rng::derive_seed;
use gazecam::stats::{self, ContingencyTable, McNemarMethod};
use gazecam::tensor::Tensor;
use gazecam::train::{self, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn loss_fd(seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport {
        checks: 0,
        worst_rel: 0.0,
    };

    let logits = common::rand_tensor(&[3, 5], &mut rng).map(|v| v * 4.0);
    let labels = vec![0, 3, 2];
    let (_, grad) = loss::softmax_ce_loss(&logits, &labels).unwrap();
    let mut x = logits.clone();
    for i in 0..x.data().len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_H;
        let plus = loss::softmax_ce_loss(&x, &labels).unwrap().0;
        x.data_mut()[i] = orig - FD_H;
        let minus = loss::softmax_ce_loss(&x, &labels).unwrap().0;
        x.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * FD_H);
        report.checks += 1;
        report.worst_rel = report.worst_rel.max(rel_gap(fd, grad.data()[i]));
    }

    let a = common::rand_tensor(&[4, 4], &mut rng);
    let b = common::rand_tensor(&[4, 4], &mut rng);
    let (_, grad) = loss::mse_loss(&a, &b).unwrap();
    let mut x = a.clone();
    for i in 0..x.data().len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_H;
        let plus = loss::mse_loss(&x, &b).unwrap().0;
        x.data_mut()[i] = orig - FD_H;
        let minus = loss::mse_loss(&x, &b).unwrap().0;
        x.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * FD_H);
        report.checks += 1;
        report.worst_rel = report.worst_rel.max(rel_gap(fd, grad.data()[i]));
    }
    report
}

#[test]
fn a1_finite_difference_gradients() {
    let start = Instant::now();
    let mut groups: Vec<(&str, FdReport)> = vec![
        (
            "conv",
            layer_fd(
                LayerSpec::Conv2d {
                    in_ch: 3,
                    out_ch: 4,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                &[2, 3, 6, 6],
                Mode::Train,
                11,
            ),
        ),
        (
            "batchnorm-train",
            layer_fd(
                LayerSpec::BatchNorm { channels: 3 },
                &[2, 3, 4, 4],
                Mode::Train,
                12,
            ),
        ),
        (
            "batchnorm-eval",
            layer_fd(
                LayerSpec::BatchNorm { channels: 3 },
                &[2, 3, 4, 4],
                Mode::Eval,
                13,
            ),
        ),
        (
            "relu",
            layer_fd(LayerSpec::Relu, &[2, 3, 5, 5], Mode::Train, 14),
        ),
        (
            "dropout-train",
            layer_fd(LayerSpec::Dropout { p: 0.4 }, &[2, 3, 5, 5], Mode::Train, 15),
        ),
        (
            "dropout-eval",
            layer_fd(LayerSpec::Dropout { p: 0.4 }, &[2, 3, 5, 5], Mode::Eval, 16),
        ),
        (
            "flatten",
            layer_fd(LayerSpec::Flatten, &[2, 3, 4, 4], Mode::Train, 17),
        ),
        (
            "dense",
            layer_fd(
                LayerSpec::Dense {
                    in_features: 18,
                    out_features: 5,
                },
                &[2, 18],
                Mode::Train,
                18,
            ),
        ),
        ("losses", loss_fd(19)),
        ("joint-network", joint_network_fd(20, 10)),
    ];

    let mut checks = 0;
    let mut worst = 0.0f64;
    for (name, report) in &groups {
        assert!(
            report.worst_rel < FD_REL,
            "A1 FAIL: {name} worst relative error {:.3e} >= {FD_REL:.0e}",
            report.worst_rel
        );
        checks += report.checks;
        worst = worst.max(report.worst_rel);
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "A1 FAIL: took {elapsed:.1}s >= 60s");
    groups.clear();
    println!(
        "A1 PASS: {checks} central-difference checks (h = 1e-5) across every layer, \
         both losses, and the joint loss; worst relative error {worst:.3e}; {elapsed:.1}s"
    );
}

#[test]
fn a2_dense_weight_gradient_identity() {
    let mut worst_grad = 0.0f64;
    let mut worst_cam = 0.0f64;
    for i in 0..100u64 {
        let (side, classes) = match i % 4 {
            0 => (16, 2),
            1 => (16, 5),
            2 => (32, 3),
            _ => (32, 4),
        };
        let model = Model::new(ModelConfig::preset(side, classes), 1000 + i).unwrap();
        let k = model.penultimate_channels();
        let n = model.penultimate_side();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(31, &[i]));
        let acts = Tensor::from_fn(vec![k, n, n], |_| {
            if rng.gen_bool(0.15) {
                0.0
            } else {
                rng.gen_range(0.0..=1.5)
            }
        });
        for class in [0, classes - 1] {
            let grads = cam::backprop_grad_stack(&model, &acts, class).unwrap();
            let weights = model.dense_weight_maps(class).unwrap();
            for (g, w) in grads.data().iter().zip(weights.data()) {
                worst_grad = worst_grad.max((g - w).abs());
            }
            for variant in [CamVariant::Classical, CamVariant::Modified] {
                let via_backprop = match variant {
                    CamVariant::Classical => cam::grad_cam(&acts, &grads, class).unwrap(),
                    CamVariant::Modified => cam::modified_grad_cam(&acts, &grads, class).unwrap(),
                };
                let via_weights = cam::cam_from_dense_weights(&model, &acts, class, variant).unwrap();
                for (a, b) in via_backprop.values.data().iter().zip(via_weights.values.data()) {
                    worst_cam = worst_cam.max((a - b).abs());
                }
            }
        }
    }
    assert!(
        worst_grad <= 1e-10,
        "A2 FAIL: backprop grads vs dense weights differ by {worst_grad:.3e}"
    );
    assert!(
        worst_cam <= 1e-10,
        "A2 FAIL: weight-route CAM vs backprop CAM differ by {worst_cam:.3e}"
    );
    println!(
        "A2 PASS: 100 random models; backprop dY/dA vs dense weights max diff {worst_grad:.1e}; \
         weight-route vs backprop-route CAM max diff {worst_cam:.1e}"
    );
}

#[test]
fn a3_baseline_learnability() {
    let start = Instant::now();
    let dataset = data::generate_glyphs(10, 250, 64, 640_001).unwrap();
    let (train_set, test_set) = data::split(&dataset, 0.8, derive_seed(3, &[100])).unwrap();
    let config = TrainConfig {
        seed: 3,
        max_epochs: 6,
        patience: 6,
        ..TrainConfig::default()
    };
    let (model, report) = train::train_baseline(&train_set, &config).unwrap();
    let (accuracy, _) = train::evaluate(&model, &test_set).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        accuracy >= 0.90,
        "A3 FAIL: test accuracy {accuracy:.4} < 0.90 after {} epochs",
        report.stopped_epoch
    );
    assert!(elapsed < 900.0, "A3 FAIL: took {elapsed:.0}s >= 900s");
    println!(
        "A3 PASS: 10-class {} train / {} test at 64x64; test accuracy {:.4} \
         (stopped epoch {}, best epoch {}); {:.0}s",
        train_set.samples.len(),
        test_set.samples.len(),
        accuracy,
        report.stopped_epoch,
        report.best_epoch,
        elapsed
    );
}

#[test]
fn a4_supervision_does_not_hurt_accuracy() {
    let runs = paired_suite();
    let mean_baseline: f64 =
        runs.iter().map(|r| r.baseline_accuracy).sum::<f64>() / runs.len() as f64;
    let mean_vegam: f64 = runs.iter().map(|r| r.vegam_accuracy).sum::<f64>() / runs.len() as f64;
    let mut pooled = ContingencyTable::default();
    for run in runs {
        pooled.merge(&run.table);
    }
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: {:.4} vs {:.4}", r.seed, r.baseline_accuracy, r.vegam_accuracy))
        .collect();
    assert!(
        mean_vegam >= mean_baseline - 0.01,
        "A4 FAIL: mean supervised accuracy {mean_vegam:.4} regresses more than 1% below mean \
         baseline {mean_baseline:.4} ({})",
        per_seed.join("; ")
    );
    assert!(
        pooled.b <= pooled.c,
        "A4 FAIL: pooled b {} > c {} (supervision breaks more samples than it fixes)",
        pooled.b,
        pooled.c
    );
    let direction = if mean_vegam > mean_baseline {
        "supervised above baseline"
    } else if mean_vegam == mean_baseline {
        "exact tie"
    } else {
        "within the 1% tolerance"
    };
    println!(
        "A4 PASS: 5 matched seeds; mean accuracy baseline {mean_baseline:.4} vs supervised \
         {mean_vegam:.4} ({direction}); pooled discordants b = {} <= c = {} [{}]",
        pooled.b,
        pooled.c,
        per_seed.join("; ")
    );
}

#[test]
fn a5_confidence_on_jointly_correct_samples() {
    let runs = paired_suite();
    let mut baseline_sum = 0.0;
    let mut vegam_sum = 0.0;
    let mut count = 0usize;
    for run in runs {
        for (b, v) in run.baseline_records.iter().zip(&run.vegam_records) {
            assert_eq!(b.sample_id, v.sample_id);
            if b.predicted == b.true_label && v.predicted == v.true_label {
                baseline_sum += b.confidence_true;
                vegam_sum += v.confidence_true;
                count += 1;
            }
        }
    }
    let mean_baseline = baseline_sum / count as f64;
    let mean_vegam = vegam_sum / count as f64;
    assert!(
        mean_vegam >= mean_baseline - 0.01,
        "A5 FAIL: mean true-class confidence {mean_vegam:.4} < baseline {mean_baseline:.4} - 0.01 \
         over {count} jointly correct samples"
    );
    println!(
        "A5 PASS: {count} jointly correct samples across 5 seeds; mean true-class confidence \
         baseline {mean_baseline:.4} vs supervised {mean_vegam:.4}"
    );
}

#[test]
fn a6_zero_map_theory_matches_monte_carlo() {
    let dataset = data::generate_glyphs(3, 40, 32, 7001).unwrap();
    let (train_set, _) = data::split(&dataset, 0.9, 61).unwrap();
    let config = TrainConfig {
        seed: 7,
        batch_size: 32,
        max_epochs: 6,
        patience: 6,
        ..TrainConfig::default()
    };
    let (trained, _) = train::train_baseline(&train_set, &config).unwrap();
    let fitted = stats::weight_stats(trained.dense_weight().data()).unwrap();
    let sigma = fitted.variance.sqrt();

    let start = Instant::now();
    let probe = data::generate_glyphs(2, 1, 224, 5).unwrap();
    let big = Model::new(ModelConfig::preset(224, 10), 31).unwrap();
    let trace = big.forward(&probe.samples[0].image).unwrap();
    let n = big.penultimate_side();
    assert_eq!(n, 14, "A6 FAIL: 224x224 preset should give a 14x14 map");

    let mu = -1.7e-3;
    let trials = 10_000;
    let analysis = stats::zero_map_probs(&trace.activations, mu, sigma).unwrap();
    let mc = stats::zero_map_monte_carlo(&trace.activations, mu, sigma, trials, 41).unwrap();

    let null_se = |p: f64| (p * (1.0 - p) / trials as f64).sqrt();
    let mut worst_sigmas = 0.0f64;
    let mut compared = 0usize;
    let mut check = |p: &Tensor, frac: &Tensor, variant: &str| {
        for i in 0..n * n {
            if analysis.degenerate[i] {
                continue;
            }
            let (p, frac) = (p.data()[i], frac.data()[i]);
            let se = null_se(p);
            let dev = (frac - p).abs();
            if se == 0.0 {
                assert!(
                    dev == 0.0,
                    "A6 FAIL: {variant} pixel {i}: analytic {p} is exact yet MC found {frac}"
                );
            } else {
                let sigmas = dev / se;
                assert!(
                    sigmas <= 3.0,
                    "A6 FAIL: {variant} pixel {i}: |{frac:.5} - {p:.5}| = {sigmas:.2} \
                     binomial SE > 3"
                );
                worst_sigmas = worst_sigmas.max(sigmas);
            }
            compared += 1;
        }
    };
    check(&analysis.p_modified, &mc.pos_frac_modified, "modified");
    check(&analysis.p_classical, &mc.pos_frac_classical, "classical");

    assert!(
        mc.zero_map_frac_classical >= mc.zero_map_frac_modified,
        "A6 FAIL: classical all-zero fraction {:.4} < modified {:.4}",
        mc.zero_map_frac_classical,
        mc.zero_map_frac_modified
    );
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "A6 FAIL: study took {elapsed:.0}s >= 120s");
    println!(
        "A6 PASS: {compared} pixel probabilities within 3 binomial SE (worst {worst_sigmas:.2}); \
         all-zero fraction classical {:.4} >= modified {:.4}; mu {mu:.1e}, fitted sigma \
         {sigma:.3e}; {elapsed:.0}s",
        mc.zero_map_frac_classical, mc.zero_map_frac_modified
    );
}

#[test]
fn a7_fixation_map_kernel_law() {
    let single = [Fixation {
        x: 200.0,
        y: 150.0,
        duration: 0.37,
    }];
    let map = gaze::fixation_map(&single, 400, 400, 33.0).unwrap();
    let peak = map.values.data()[150 * 400 + 200];
    assert!(peak == 1.0, "A7 FAIL: single-fixation peak {peak} != 1.0");
    let at_sigma = map.values.data()[150 * 400 + 233];
    let expected = (-1.0f64).exp();
    assert!(
        (at_sigma - expected).abs() <= 1e-12,
        "A7 FAIL: value at distance sigma {at_sigma:.15} vs e^-1 {expected:.15}"
    );

    let base: Vec<Fixation> = [(20.3, 41.7, 0.2), (77.1, 12.9, 0.5), (55.5, 60.2, 0.8)]
        .iter()
        .map(|&(x, y, duration)| Fixation { x, y, duration })
        .collect();
    let scaled: Vec<Fixation> = base
        .iter()
        .map(|f| Fixation {
            duration: f.duration * 7.3,
            ..*f
        })
        .collect();
    let map_a = gaze::fixation_map(&base, 120, 80, 9.0).unwrap();
    let map_b = gaze::fixation_map(&scaled, 120, 80, 9.0).unwrap();
    let mut worst = 0.0f64;
    for (a, b) in map_a.values.data().iter().zip(map_b.values.data()) {
        worst = worst.max((a - b).abs());
    }
    assert!(
        worst <= 1e-12,
        "A7 FAIL: duration rescale changed the map by {worst:.3e}"
    );
    println!(
        "A7 PASS: peak exactly 1.0; value at distance sigma within 1e-12 of e^-1; \
         duration-scale invariance max diff {worst:.1e}"
    );
}

#[test]
fn a8_velocity_threshold_recovers_planted_dwells() {
    let params = IvtParams::default();
    let mut clusters = 0usize;
    let mut worst_center = 0.0f64;
    let mut worst_mean = 0.0f64;
    for stream_idx in 0..50u64 {
        let stream = planted_stream(9000 + stream_idx);
        let result = gaze::ivt_extract(&stream.samples, &params).unwrap();
        assert!(!result.too_few_samples);
        assert_eq!(
            result.fixations.len(),
            stream.planted.len(),
            "A8 FAIL: stream {stream_idx} planted {} dwells, extracted {}",
            stream.planted.len(),
            result.fixations.len()
        );
        for (got, want) in result.fixations.iter().zip(&stream.planted) {
            let center_err = ((got.x - want.cx).powi(2) + (got.y - want.cy).powi(2)).sqrt();
            let mean_err = ((got.x - want.mean_x).powi(2) + (got.y - want.mean_y).powi(2)).sqrt();
            assert!(
                center_err <= 1.0,
                "A8 FAIL: stream {stream_idx} centroid off by {center_err:.3} px"
            );
            assert!(
                mean_err <= 1e-9,
                "A8 FAIL: stream {stream_idx} centroid differs from the planted sample mean \
                 by {mean_err:.3e} px"
            );
            worst_center = worst_center.max(center_err);
            worst_mean = worst_mean.max(mean_err);
            clusters += 1;
        }
    }
    println!(
        "A8 PASS: 50 streams, {clusters} planted dwells all recovered; worst centroid error \
         {worst_center:.3} px from the true center ({worst_mean:.1e} px from the sample mean)"
    );
}

#[test]
fn a9_mcnemar_reference_values() {
    let exact = stats::mcnemar(&ContingencyTable {
        a: 10,
        b: 5,
        c: 15,
        d: 10,
    });
    assert_eq!(exact.method, McNemarMethod::ExactBinomial);
    let binomial = |n: u64, k: u64| -> f64 {
        let mut v = 1.0f64;
        for i in 0..k {
            v = v * (n - i) as f64 / (i + 1) as f64;
        }
        v
    };
    let tail: f64 = (0..=5).map(|k| binomial(20, k)).sum::<f64>() / (1u64 << 20) as f64;
    let reference = 2.0 * tail;
    assert!(
        (exact.p_value - reference).abs() <= 1e-10,
        "A9 FAIL: exact p {:.12} vs independent summation {reference:.12}",
        exact.p_value
    );

    let chi = stats::mcnemar(&ContingencyTable {
        a: 0,
        b: 15,
        c: 45,
        d: 0,
    });
    assert_eq!(chi.method, McNemarMethod::ChiSquare);
    let statistic = chi.statistic.unwrap();
    assert!(
        (statistic - 14.0167).abs() <= 1e-4,
        "A9 FAIL: chi-square statistic {statistic:.5} vs 14.0167"
    );
    println!(
        "A9 PASS: exact p {:.12} matches the binomial summation {reference:.12}; \
         chi-square statistic {statistic:.4} = 14.0167 +/- 1e-4 (p {:.3e})",
        exact.p_value, chi.p_value
    );
}

#[test]
fn a10_pipeline_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = |tail: &str| dir.path().join(tail).to_string_lossy().into_owned();
    let run = |args: &[&str]| {
        let owned: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        assert_eq!(gazecam::cli::run(&owned), 0, "command failed: {args:?}");
    };

    for base in ["base1", "base2"] {
        run(&[
            "gen-data",
            "--out",
            &path(base),
            "--classes",
            "2",
            "--per-class",
            "12",
            "--side",
            "32",
            "--seed",
            "9",
        ]);
        let data_dir = path(&format!("{base}/data"));
        run(&[
            "oracle-fixmaps",
            "--data",
            &data_dir,
            "--out",
            &path(&format!("{base}/oracle")),
            "--side",
            "32",
            "--sigma",
            "2.5",
        ]);
    }
    let manifest_1 = std::fs::read(dir.path().join("base1/data/manifest.csv")).unwrap();
    let manifest_2 = std::fs::read(dir.path().join("base2/data/manifest.csv")).unwrap();
    assert_eq!(manifest_1, manifest_2, "A10 FAIL: dataset manifests differ between reruns");

    for out in ["run1", "run2"] {
        run(&[
            "train",
            "--mode",
            "vegam",
            "--data",
            &path("base1/data"),
            "--out",
            &path(out),
            "--side",
            "32",
            "--seed",
            "5",
            "--max-epochs",
            "2",
            "--batch-size",
            "8",
        ]);
    }
    for file in ["metrics.csv", "eval.csv", "model.gzcm"] {
        let one = std::fs::read(dir.path().join("run1").join(file)).unwrap();
        let two = std::fs::read(dir.path().join("run2").join(file)).unwrap();
        assert_eq!(one, two, "A10 FAIL: {file} differs between identical reruns");
    }
    println!(
        "A10 PASS: identical seeds reproduce manifest.csv, metrics.csv, eval.csv, and the \
         model checkpoint byte for byte"
    );
}
