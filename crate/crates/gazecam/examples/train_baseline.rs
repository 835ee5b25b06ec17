//! Cross-entropy baseline training on a small glyph set.

use gazecam::data::{generate_glyphs, split};
use gazecam::train::{evaluate, train_baseline, TrainConfig};

fn main() -> gazecam::Result<()> {
    let dataset = generate_glyphs(4, 30, 32, 9)?;
    let (train_set, test_set) = split(&dataset, 0.8, 17)?;
    println!(
        "{} train / {} test samples, {} classes",
        train_set.samples.len(),
        test_set.samples.len(),
        dataset.num_classes
    );

    let config = TrainConfig {
        batch_size: 16,
        max_epochs: 8,
        patience: 8,
        seed: 4,
        ..TrainConfig::default()
    };
    let (model, report) = train_baseline(&train_set, &config)?;
    println!("epoch  train_ce  train_acc  val_ce   val_acc");
    for e in &report.epochs {
        println!(
            "{:5}  {:8.4}  {:9.3}  {:7.4}  {:7.3}",
            e.epoch, e.train_ce, e.train_accuracy, e.val_ce, e.val_accuracy
        );
    }
    println!(
        "stopped after epoch {}, best validation CE at epoch {}",
        report.stopped_epoch, report.best_epoch
    );

    let (accuracy, _) = evaluate(&model, &test_set)?;
    println!("held-out test accuracy {accuracy:.3}");
    Ok(())
}
