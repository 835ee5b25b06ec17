//! Shared fixtures for the integration suites: finite-difference probes,
//! planted gaze streams, and the multi-seed paired training runs.

#![allow(dead_code)]

use gazecam::data;
use gazecam::gaze::GazeSample;
use gazecam::layers::{Layer, LayerSpec, Mode};
use gazecam::model::{Model, ModelConfig};
use gazecam::rng::derive_seed;
use gazecam::stats::ContingencyTable;
use gazecam::tensor::Tensor;
use gazecam::train::{self, SampleRecord, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

pub const FD_H: f64 = 1e-5;
pub const FD_REL: f64 = 1e-4;
const PROBE_SEED: u64 = 77;

/// Relative gap between a finite-difference estimate and an analytic value,
/// floored so near-zero gradients are judged on absolute error.
pub fn rel_gap(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3)
}

/// Uniform values in [-1, 1].
pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..=1.0))
}

/// Uniform magnitudes in [0.3, 1.3] with random signs; keeps central
/// differences away from the relu kink at zero.
pub fn rand_tensor_off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let magnitude = rng.gen_range(0.3..=1.3);
        if rng.gen_bool(0.5) {
            magnitude
        } else {
            -magnitude
        }
    })
}

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub checks: usize,
    pub worst_rel: f64,
}

impl FdReport {
    fn fold(&mut self, fd: f64, analytic: f64) {
        self.checks += 1;
        self.worst_rel = self.worst_rel.max(rel_gap(fd, analytic));
    }
}

fn layer_objective(layer: &Layer, input: &Tensor, probe: &Tensor, mode: Mode) -> f64 {
    let (out, _) = layer.forward(input, mode, PROBE_SEED).unwrap();
    out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
}

fn param_by_name<'a>(layer: &'a mut Layer, want: &str) -> &'a mut Tensor {
    for (name, tensor) in layer.named_params_mut() {
        if name == want {
            return tensor;
        }
    }
    panic!("layer has no parameter named {want}");
}

/// Central finite differences for one layer: every input element and every
/// parameter element against the analytic backward pass.
pub fn layer_fd(spec: LayerSpec, in_shape: &[usize], mode: Mode, seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = Layer::new(spec, &mut rng).unwrap();
    let input = rand_tensor_off_kink(in_shape, &mut rng);
    let (out, ctx) = layer.forward(&input, mode, PROBE_SEED).unwrap();
    let probe = rand_tensor(out.shape(), &mut rng);
    let d_input = layer.backward(&ctx, &probe).unwrap();

    let mut report = FdReport {
        checks: 0,
        worst_rel: 0.0,
    };

    let mut x = input.clone();
    for i in 0..x.data().len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_H;
        let plus = layer_objective(&layer, &x, &probe, mode);
        x.data_mut()[i] = orig - FD_H;
        let minus = layer_objective(&layer, &x, &probe, mode);
        x.data_mut()[i] = orig;
        report.fold((plus - minus) / (2.0 * FD_H), d_input.data()[i]);
    }

    let names: Vec<String> = layer
        .named_params_mut()
        .iter()
        .map(|(name, _)| name.to_string())
        .collect();
    for name in names {
        let analytic: Vec<f64> = {
            let tensor = param_by_name(&mut layer, &name);
            match tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; tensor.data().len()],
            }
        };
        for (i, &an) in analytic.iter().enumerate() {
            param_by_name(&mut layer, &name).data_mut()[i] += FD_H;
            let plus = layer_objective(&layer, &input, &probe, mode);
            param_by_name(&mut layer, &name).data_mut()[i] -= 2.0 * FD_H;
            let minus = layer_objective(&layer, &input, &probe, mode);
            param_by_name(&mut layer, &name).data_mut()[i] += FD_H;
            report.fold((plus - minus) / (2.0 * FD_H), an);
        }
    }
    report
}

fn bump_param(model: &mut Model, name: &str, idx: usize, delta: f64) {
    for (n, tensor) in model.named_params_mut() {
        if n == name {
            tensor.data_mut()[idx] += delta;
            return;
        }
    }
    panic!("model has no parameter named {name}");
}

/// Central finite differences through the whole network for the joint
/// cross-entropy + fixation-map loss, sampling indices from every
/// parameter tensor.
pub fn joint_network_fd(seed: u64, probes_per_tensor: usize) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(ModelConfig::preset(32, 3), derive_seed(seed, &[1])).unwrap();
    let images = Tensor::from_fn(vec![2, 1, 32, 32], |_| rng.gen_range(0.0..=1.0));
    let labels = vec![0, 2];
    let maps: Vec<Tensor> = (0..2)
        .map(|_| Tensor::from_fn(vec![4, 4], |_| rng.gen_range(0.0..=1.0)))
        .collect();
    let map_refs: Vec<&Tensor> = maps.iter().collect();
    let config = TrainConfig {
        lambda: 0.7,
        ..TrainConfig::default()
    };
    let dropout_seed = 55;

    let loss_of = |m: &Model| {
        let (ce, mse) =
            train::batch_loss(m, &images, &labels, Some(&map_refs), &config, dropout_seed)
                .unwrap();
        ce + config.lambda * mse
    };

    let mut stepped = model.clone();
    train::batch_step(
        &mut stepped,
        &images,
        &labels,
        Some(&map_refs),
        &config,
        dropout_seed,
    )
    .unwrap();
    let grads: Vec<(String, Vec<f64>)> = stepped
        .named_params_mut()
        .into_iter()
        .map(|(name, tensor)| {
            let g = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; tensor.data().len()],
            };
            (name, g)
        })
        .collect();

    let mut report = FdReport {
        checks: 0,
        worst_rel: 0.0,
    };
    let mut probe_model = model.clone();
    for (name, analytic) in &grads {
        for _ in 0..probes_per_tensor.min(analytic.len()) {
            let i = rng.gen_range(0..analytic.len());
            bump_param(&mut probe_model, name, i, FD_H);
            let plus = loss_of(&probe_model);
            bump_param(&mut probe_model, name, i, -2.0 * FD_H);
            let minus = loss_of(&probe_model);
            bump_param(&mut probe_model, name, i, FD_H);
            report.fold((plus - minus) / (2.0 * FD_H), analytic[i]);
        }
    }
    report
}

// ── planted gaze streams ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct PlantedFixation {
    /// True cluster center.
    pub cx: f64,
    pub cy: f64,
    /// Exact mean of the valid samples the extractor should group.
    pub mean_x: f64,
    pub mean_y: f64,
    pub duration_ms: f64,
}

#[derive(Debug, Clone)]
pub struct PlantedStream {
    pub samples: Vec<GazeSample>,
    pub planted: Vec<PlantedFixation>,
}

/// Synthesizes a 200 Hz gaze stream with 2..=6 dwell clusters separated by
/// fast saccades. Cluster jitter stays within 1 px so in-cluster velocities
/// sit far below the default threshold, while saccade hops exceed it.
pub fn planted_stream(seed: u64) -> PlantedStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 5.0;
    let n_clusters = rng.gen_range(2..=6);

    let mut cells: Vec<(usize, usize)> = (0..4).flat_map(|r| (0..4).map(move |c| (r, c))).collect();
    for i in (1..cells.len()).rev() {
        cells.swap(i, rng.gen_range(0..=i));
    }
    let centers: Vec<(f64, f64)> = cells[..n_clusters]
        .iter()
        .map(|&(r, c)| {
            (
                c as f64 * 100.0 + 50.0 + rng.gen_range(-20.0..=20.0),
                r as f64 * 100.0 + 50.0 + rng.gen_range(-20.0..=20.0),
            )
        })
        .collect();

    let mut samples = Vec::new();
    let mut planted = Vec::new();
    let mut t = 0.0;
    let push = |t: &mut f64, x: f64, y: f64, valid: bool, samples: &mut Vec<GazeSample>| {
        samples.push(GazeSample {
            t_ms: *t,
            x,
            y,
            valid,
        });
        *t += dt;
    };

    for (ci, &(cx, cy)) in centers.iter().enumerate() {
        let count = rng.gen_range(14..=28);
        let invalid_at = if count >= 20 && rng.gen_bool(0.5) {
            Some(rng.gen_range(2..count - 2))
        } else {
            None
        };
        let first_t = t;
        let mut sum_x = 0.0;
        let mut sum_y = 0.0;
        let mut valid_count = 0usize;
        for j in 0..count {
            let x = cx + rng.gen_range(-1.0..=1.0);
            let y = cy + rng.gen_range(-1.0..=1.0);
            let valid = Some(j) != invalid_at;
            if valid {
                sum_x += x;
                sum_y += y;
                valid_count += 1;
            }
            push(&mut t, x, y, valid, &mut samples);
        }
        planted.push(PlantedFixation {
            cx,
            cy,
            mean_x: sum_x / valid_count as f64,
            mean_y: sum_y / valid_count as f64,
            duration_ms: t - dt - first_t,
        });

        if ci + 1 < centers.len() {
            let (nx, ny) = centers[ci + 1];
            for frac in [0.25, 0.5, 0.75] {
                let x = cx + (nx - cx) * frac + rng.gen_range(-3.0..=3.0);
                let y = cy + (ny - cy) * frac + rng.gen_range(-3.0..=3.0);
                push(&mut t, x, y, true, &mut samples);
            }
        }
    }
    PlantedStream { samples, planted }
}

// ── paired multi-seed training suite ──────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub baseline_accuracy: f64,
    pub vegam_accuracy: f64,
    /// b = baseline-only correct, c = supervised-only correct.
    pub table: ContingencyTable,
    pub baseline_records: Vec<SampleRecord>,
    pub vegam_records: Vec<SampleRecord>,
}

/// Five matched-seed baseline/supervised training pairs on a fixed glyph
/// set, shared across the acceptance tests that compare the two arms.
pub fn paired_suite() -> &'static [SeedRun] {
    static SUITE: OnceLock<Vec<SeedRun>> = OnceLock::new();
    SUITE.get_or_init(build_paired_suite)
}

const SUITE_SIDE: usize = 32;
const SUITE_ORACLE_SIGMA: f64 = 2.5;
const SUITE_ORACLE_TOP_Q: f64 = 0.05;

/// Paints short random ink strokes so classification cannot rely on ink
/// presence alone; the class core stays centered, so per-class oracle maps
/// remain aligned with the discriminative pixels.
fn add_distractor_strokes(image: &mut Tensor, rng: &mut ChaCha8Rng) {
    let side = image.shape()[0];
    for _ in 0..rng.gen_range(2..=4usize) {
        let x0 = rng.gen_range(2.0..side as f64 - 2.0);
        let y0 = rng.gen_range(2.0..side as f64 - 2.0);
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let length = rng.gen_range(4.0..10.0);
        let ink = rng.gen_range(0.5..0.9);
        let steps = (length * 2.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64 - 0.5;
            let x = (x0 + t * length * angle.cos()).round();
            let y = (y0 + t * length * angle.sin()).round();
            if x >= 0.0 && y >= 0.0 && (x as usize) < side && (y as usize) < side {
                let idx = y as usize * side + x as usize;
                let v = &mut image.data_mut()[idx];
                *v = v.max(ink);
            }
        }
    }
}

fn build_paired_suite() -> Vec<SeedRun> {
    let mut dataset = data::generate_glyphs(16, 25, SUITE_SIDE, 4242).unwrap();
    for (i, sample) in dataset.samples.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(4242, &[7, i as u64]));
        add_distractor_strokes(&mut sample.image, &mut rng);
    }
    (0..5)
        .map(|seed| {
            let (train_set, test_set) =
                data::split(&dataset, 0.5, derive_seed(seed, &[100])).unwrap();
            let config = TrainConfig {
                seed,
                batch_size: 32,
                max_epochs: 12,
                patience: 12,
                ..TrainConfig::default()
            };
            let (baseline, _) = train::train_baseline(&train_set, &config).unwrap();
            let maps =
                data::oracle_fixmaps(&train_set, SUITE_ORACLE_SIGMA, SUITE_ORACLE_TOP_Q).unwrap();
            let mut supervised_set = train_set.clone();
            data::attach_fixmaps(&mut supervised_set, &maps).unwrap();
            let fixmaps = data::fixmap_tensors(&supervised_set).unwrap();
            let (vegam, _) = train::train_vegam(&train_set, &fixmaps, &config).unwrap();

            let (baseline_accuracy, baseline_records) =
                train::evaluate(&baseline, &test_set).unwrap();
            let (vegam_accuracy, vegam_records) = train::evaluate(&vegam, &test_set).unwrap();
            let truth: Vec<usize> = baseline_records.iter().map(|r| r.true_label).collect();
            let first: Vec<usize> = baseline_records.iter().map(|r| r.predicted).collect();
            let second: Vec<usize> = vegam_records.iter().map(|r| r.predicted).collect();
            let table = ContingencyTable::from_paired(&truth, &first, &second).unwrap();
            SeedRun {
                seed,
                baseline_accuracy,
                vegam_accuracy,
                table,
                baseline_records,
                vegam_records,
            }
        })
        .collect()
}
