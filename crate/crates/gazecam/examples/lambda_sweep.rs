//! Test accuracy as the fixation-map MSE weight varies.

use gazecam::data::{attach_fixmaps, fixmap_tensors, generate_glyphs, oracle_fixmaps, split};
use gazecam::train::{evaluate, train_vegam, TrainConfig};

fn main() -> gazecam::Result<()> {
    let dataset = generate_glyphs(3, 30, 32, 15)?;
    let (mut train_set, test_set) = split(&dataset, 0.8, 8)?;
    let maps = oracle_fixmaps(&train_set, 2.5, 0.05)?;
    attach_fixmaps(&mut train_set, &maps)?;
    let fixmaps = fixmap_tensors(&train_set)?;

    println!("lambda  test_acc  best_epoch  final_mse");
    for lambda in [0.0, 0.25, 1.0, 4.0] {
        let config = TrainConfig {
            lambda,
            batch_size: 12,
            max_epochs: 6,
            patience: 6,
            seed: 3,
            ..TrainConfig::default()
        };
        let (model, report) = train_vegam(&train_set, &fixmaps, &config)?;
        let (accuracy, _) = evaluate(&model, &test_set)?;
        println!(
            "{lambda:6}  {accuracy:8.3}  {:10}  {:9.5}",
            report.best_epoch,
            report.epochs.last().unwrap().train_mse
        );
    }
    println!("(lambda 0 is exactly the cross-entropy baseline)");
    Ok(())
}
