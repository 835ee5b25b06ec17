//! Raw gaze samples to a fixation heat map: velocity-threshold extraction,
//! duration normalization, Gaussian map construction.

use gazecam::cam::{heatmap_render, ColorRamp};
use gazecam::gaze::{fixation_map, ivt_extract, normalize_durations, GazeSample, IvtParams};
use gazecam::pfm::write_pfm;

/// A dwell of `n` samples around (x, y) at 120 Hz with slight drift.
fn dwell(t0: f64, n: usize, x: f64, y: f64) -> Vec<GazeSample> {
    (0..n)
        .map(|i| GazeSample {
            t_ms: t0 + i as f64 * 8.33,
            x: x + ((i * 7) % 5) as f64 - 2.0,
            y: y + ((i * 3) % 5) as f64 - 2.0,
            valid: true,
        })
        .collect()
}

fn main() -> gazecam::Result<()> {
    let mut samples = Vec::new();
    samples.extend(dwell(0.0, 30, 120.0, 140.0));
    samples.extend(dwell(260.0, 18, 300.0, 110.0));
    samples.extend(dwell(420.0, 24, 210.0, 290.0));
    // a blink: a couple of invalid samples are dropped, not interpolated
    samples[40].valid = false;
    samples[41].valid = false;

    let params = IvtParams::default();
    let result = ivt_extract(&samples, &params)?;
    println!(
        "{} fixations from {} raw samples (threshold {} px/s):",
        result.fixations.len(),
        samples.len(),
        params.velocity_threshold
    );
    let mut fixations = result.fixations.clone();
    let span = samples.last().unwrap().t_ms - samples[0].t_ms;
    normalize_durations(&mut fixations, span)?;
    for (raw, norm) in result.fixations.iter().zip(&fixations) {
        println!(
            "  centroid ({:6.1}, {:6.1})  duration {:5.1} ms  weight {:.3}",
            raw.x, raw.y, raw.duration, norm.duration
        );
    }

    let map = fixation_map(&fixations, 400, 400, 40.0)?;
    let peak = map.values.data().iter().cloned().fold(0.0f64, f64::max);
    println!("map peak {peak:.4} (1.0 only when a lone fixation sits on a grid point)");

    let dir = std::env::temp_dir().join("gazecam-examples/fixation_pipeline");
    std::fs::create_dir_all(&dir).map_err(|e| gazecam::Error::io(&dir, e))?;
    write_pfm(&dir.join("map.pfm"), &map.values)?;
    let img = heatmap_render(&map.values, ColorRamp::Hot)?;
    let png = dir.join("map.png");
    img.save(&png)
        .map_err(|e| gazecam::Error::Data(format!("{}: {e}", png.display())))?;
    println!("wrote {}", png.display());
    Ok(())
}
