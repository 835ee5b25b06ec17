//! Dense-weight distribution diagnostics before and after training.

use gazecam::data::generate_glyphs;
use gazecam::model::{Model, ModelConfig};
use gazecam::stats::weight_stats;
use gazecam::train::{train_baseline, TrainConfig};

fn report(label: &str, weights: &[f64]) -> gazecam::Result<()> {
    let stats = weight_stats(weights)?;
    println!("{label}:");
    println!("  count {}  mean {:+.4e}  sd {:.4e}", stats.count, stats.mean, stats.variance.sqrt());
    println!(
        "  skewness {:+.3}  excess kurtosis {:+.3}",
        stats.skewness, stats.excess_kurtosis
    );
    println!(
        "  KS distance {:.4} vs critical {:.4} -> normal plausible: {}",
        stats.ks_distance, stats.ks_critical, stats.normal_plausible
    );
    let total: u64 = stats.histogram.counts.iter().sum();
    let peak = stats.histogram.counts.iter().copied().max().unwrap_or(0);
    for (i, &count) in stats.histogram.counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let bar = "#".repeat((count * 40 / peak.max(1)) as usize);
        println!(
            "  [{:+.3}, {:+.3})  {:5.1}%  {bar}",
            stats.histogram.edges[i],
            stats.histogram.edges[i + 1],
            100.0 * count as f64 / total as f64
        );
    }
    Ok(())
}

fn main() -> gazecam::Result<()> {
    let untrained = Model::new(ModelConfig::preset(32, 4), 1)?;
    report("untrained dense weights (uniform init)", untrained.dense_weight().data())?;

    let dataset = generate_glyphs(4, 30, 32, 9)?;
    let config = TrainConfig {
        batch_size: 16,
        max_epochs: 6,
        patience: 6,
        seed: 4,
        ..TrainConfig::default()
    };
    let (model, _) = train_baseline(&dataset, &config)?;
    println!();
    report("trained dense weights", model.dense_weight().data())?;
    Ok(())
}
