//! Generates a synthetic glyph dataset, saves it, and reloads it.

use gazecam::data::{generate_glyphs, load_images, save_dataset};

fn main() -> gazecam::Result<()> {
    let dataset = generate_glyphs(10, 20, 64, 7)?;
    println!(
        "generated {} samples, {} classes, {}x{} px",
        dataset.samples.len(),
        dataset.num_classes,
        64,
        64
    );
    for class in 0..dataset.num_classes {
        let n = dataset
            .samples
            .iter()
            .filter(|s| s.label == class)
            .count();
        let ink: f64 = dataset
            .samples
            .iter()
            .filter(|s| s.label == class)
            .map(|s| s.image.data().iter().filter(|&&v| v < 0.5).count() as f64)
            .sum::<f64>()
            / n as f64;
        println!("  class {class:2}: {n} samples, mean ink {ink:6.1} px");
    }

    let dir = std::env::temp_dir().join("gazecam-examples/generate_dataset");
    save_dataset(&dataset, &dir)?;
    let reloaded = load_images(&dir, 64)?;
    assert_eq!(reloaded.samples.len(), dataset.samples.len());
    println!("saved and reloaded {} samples at {}", reloaded.samples.len(), dir.display());
    Ok(())
}
