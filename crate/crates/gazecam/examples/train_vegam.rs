//! Fixation-supervised training vs the baseline under a matched seed,
//! with a McNemar comparison and the true-class confidence shift.

use gazecam::data::{fixmap_tensors, generate_glyphs, oracle_fixmaps, split};
use gazecam::stats::{mcnemar, ContingencyTable};
use gazecam::train::{evaluate, train_baseline, train_vegam, TrainConfig};

fn main() -> gazecam::Result<()> {
    let dataset = generate_glyphs(4, 30, 32, 23)?;
    let (mut train_set, test_set) = split(&dataset, 0.8, 31)?;
    let maps = oracle_fixmaps(&train_set, 2.5, 0.05)?;
    gazecam::data::attach_fixmaps(&mut train_set, &maps)?;
    let fixmaps = fixmap_tensors(&train_set)?;

    let config = TrainConfig {
        batch_size: 16,
        max_epochs: 8,
        patience: 8,
        seed: 6,
        lambda: 1.0,
        ..TrainConfig::default()
    };
    let (base_model, _) = train_baseline(&train_set, &config)?;
    let (veg_model, veg_report) = train_vegam(&train_set, &fixmaps, &config)?;
    println!(
        "vegam ran {} epochs; final epoch MSE {:.5}",
        veg_report.stopped_epoch,
        veg_report.epochs.last().unwrap().train_mse
    );

    let (base_acc, base_records) = evaluate(&base_model, &test_set)?;
    let (veg_acc, veg_records) = evaluate(&veg_model, &test_set)?;
    println!("test accuracy: baseline {base_acc:.3}, fixation-supervised {veg_acc:.3}");

    let truth: Vec<usize> = base_records.iter().map(|r| r.true_label).collect();
    let base_pred: Vec<usize> = base_records.iter().map(|r| r.predicted).collect();
    let veg_pred: Vec<usize> = veg_records.iter().map(|r| r.predicted).collect();
    let table = ContingencyTable::from_paired(&truth, &base_pred, &veg_pred)?;
    let result = mcnemar(&table);
    println!(
        "McNemar: a={} b={} c={} d={}, p = {:.4} ({:?})",
        table.a, table.b, table.c, table.d, result.p_value, result.method
    );

    // confidence in the true class over samples both models got right
    let (mut base_conf, mut veg_conf, mut both) = (0.0, 0.0, 0usize);
    for (b, v) in base_records.iter().zip(&veg_records) {
        if b.predicted == b.true_label && v.predicted == v.true_label {
            base_conf += b.confidence_true;
            veg_conf += v.confidence_true;
            both += 1;
        }
    }
    if both > 0 {
        println!(
            "mean true-class confidence over {both} both-correct samples: baseline {:.4}, fixation-supervised {:.4}",
            base_conf / both as f64,
            veg_conf / both as f64
        );
    }
    Ok(())
}
