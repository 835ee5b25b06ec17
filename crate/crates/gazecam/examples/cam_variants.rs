//! Classical vs modified class activation maps, computed along both routes:
//! explicit backpropagation and the dense-weight identity.

use gazecam::cam::{
    backprop_grad_stack, cam_from_dense_weights, grad_cam, heatmap_render, modified_grad_cam,
    CamVariant, ColorRamp,
};
use gazecam::data::generate_glyphs;
use gazecam::train::{train_baseline, TrainConfig};

fn main() -> gazecam::Result<()> {
    let dataset = generate_glyphs(3, 24, 32, 5)?;
    let config = TrainConfig {
        batch_size: 12,
        max_epochs: 6,
        patience: 6,
        seed: 2,
        ..TrainConfig::default()
    };
    let (model, report) = train_baseline(&dataset, &config)?;
    println!(
        "trained {} epochs, final train accuracy {:.3}",
        report.stopped_epoch,
        report.epochs.last().unwrap().train_accuracy
    );

    let sample = &dataset.samples[0];
    let trace = model.forward(&sample.image)?;
    let class = trace.predicted;
    println!(
        "sample {} -> predicted class {class} (confidence {:.3})",
        sample.id, trace.confidence[class]
    );

    // route 1: gradients of the class score w.r.t. the activation stack
    let grads = backprop_grad_stack(&model, &trace.activations, class)?;
    let classical = grad_cam(&trace.activations, &grads, class)?;
    let modified = modified_grad_cam(&trace.activations, &grads, class)?;
    // route 2: the gradients ARE the dense weights under a single linear head
    let classical_w = cam_from_dense_weights(&model, &trace.activations, class, CamVariant::Classical)?;
    let modified_w = cam_from_dense_weights(&model, &trace.activations, class, CamVariant::Modified)?;

    let max_diff = |a: &gazecam::tensor::Tensor, b: &gazecam::tensor::Tensor| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max)
    };
    println!(
        "route agreement: classical {:.2e}, modified {:.2e}",
        max_diff(&classical.values, &classical_w.values),
        max_diff(&modified.values, &modified_w.values)
    );
    println!(
        "classical all-zero: {}, modified all-zero: {}",
        classical.all_zero, modified.all_zero
    );

    let dir = std::env::temp_dir().join("gazecam-examples/cam_variants");
    std::fs::create_dir_all(&dir).map_err(|e| gazecam::Error::io(&dir, e))?;
    for (name, map) in [("classical", &classical), ("modified", &modified)] {
        let big = gazecam::cam::bilinear_resize(&map.values, 128, 128)?;
        let img = heatmap_render(&big, ColorRamp::Hot)?;
        let path = dir.join(format!("{name}.png"));
        img.save(&path)
            .map_err(|e| gazecam::Error::Data(format!("{}: {e}", path.display())))?;
    }
    println!("renders in {}", dir.display());
    Ok(())
}
