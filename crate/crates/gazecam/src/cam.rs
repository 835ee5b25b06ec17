//! Class activation maps over the penultimate activation stack.
//!
//! Two variants are supported. The classical map weights each activation map
//! by its globally averaged gradient and sums: `relu(sum_k alpha_k A^k)`. The
//! modified map keeps gradients per pixel and takes the elementwise product
//! before summing: `relu(sum_k G^k .* A^k)`. With a single dense layer on
//! top of the stack, the gradient of a logit w.r.t. an activation is exactly
//! the connecting dense weight, so both maps can be built straight from the
//! weight matrix without a backward pass ([`cam_from_dense_weights`]).

use crate::error::{Error, Result};
use crate::layers::LayerCtx;
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamVariant {
    Classical,
    Modified,
}

impl std::fmt::Display for CamVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CamVariant::Classical => write!(f, "classical"),
            CamVariant::Modified => write!(f, "modified"),
        }
    }
}

/// A non-negative activation map explaining one class.
#[derive(Debug, Clone)]
pub struct CamMap {
    /// Map values, shape [h, w]; non-negative.
    pub values: Tensor,
    /// The class the map explains.
    pub class: usize,
    pub variant: CamVariant,
    /// True when every value is exactly zero (the ReLU collapsed the map).
    pub all_zero: bool,
}

impl CamMap {
    fn new(values: Tensor, class: usize, variant: CamVariant) -> Self {
        let all_zero = values.data().iter().all(|&v| v == 0.0);
        Self {
            values,
            class,
            variant,
            all_zero,
        }
    }
}

fn check_stack(t: &Tensor, what: &str) -> Result<()> {
    if t.ndim() != 3 {
        return Err(Error::Dimension(format!(
            "{what} must have shape [maps, n, n], got {:?}",
            t.shape()
        )));
    }
    if t.numel() == 0 {
        return Err(Error::Dimension(format!("{what} is empty")));
    }
    Ok(())
}

/// Global-average-pools each gradient map: `alpha_k = mean_ij G^k_ij`.
pub fn neuron_importance(grads: &Tensor) -> Result<Vec<f64>> {
    check_stack(grads, "gradient stack")?;
    let k = grads.shape()[0];
    let plane = grads.shape()[1] * grads.shape()[2];
    let inv = 1.0 / plane as f64;
    Ok((0..k)
        .map(|i| grads.data()[i * plane..(i + 1) * plane].iter().sum::<f64>() * inv)
        .collect())
}

/// Classical map: `relu(sum_k alpha_k A^k)`.
pub fn grad_cam(activations: &Tensor, grads: &Tensor, class: usize) -> Result<CamMap> {
    check_stack(activations, "activation stack")?;
    activations.check_same_shape(grads, "activation/gradient stacks")?;
    let alpha = neuron_importance(grads)?;
    let (h, w) = (activations.shape()[1], activations.shape()[2]);
    let plane = h * w;
    let mut values = vec![0.0; plane];
    for (k, &a) in alpha.iter().enumerate() {
        let src = &activations.data()[k * plane..(k + 1) * plane];
        for (v, &x) in values.iter_mut().zip(src) {
            *v += a * x;
        }
    }
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(CamMap::new(
        Tensor::new(vec![h, w], values)?,
        class,
        CamVariant::Classical,
    ))
}

/// Modified map: `relu(sum_k G^k .* A^k)` (elementwise product, no pooling).
pub fn modified_grad_cam(activations: &Tensor, grads: &Tensor, class: usize) -> Result<CamMap> {
    check_stack(activations, "activation stack")?;
    activations.check_same_shape(grads, "activation/gradient stacks")?;
    let k = activations.shape()[0];
    let (h, w) = (activations.shape()[1], activations.shape()[2]);
    let plane = h * w;
    let mut values = vec![0.0; plane];
    for i in 0..k {
        let a = &activations.data()[i * plane..(i + 1) * plane];
        let g = &grads.data()[i * plane..(i + 1) * plane];
        for ((v, &x), &gx) in values.iter_mut().zip(a).zip(g) {
            *v += gx * x;
        }
    }
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(CamMap::new(
        Tensor::new(vec![h, w], values)?,
        class,
        CamVariant::Modified,
    ))
}

/// Gradient of logit `class` w.r.t. the penultimate stack, computed by an
/// actual backward pass through the dense layer. Exists as the slow,
/// independent route that [`cam_from_dense_weights`] is checked against.
pub fn backprop_grad_stack(model: &Model, activations: &Tensor, class: usize) -> Result<Tensor> {
    check_stack(activations, "activation stack")?;
    let classes = model.config().num_classes;
    if class >= classes {
        return Err(Error::Index(format!(
            "class {class} out of range for {classes} classes"
        )));
    }
    let k = model.penultimate_channels();
    let n = model.penultimate_side();
    if activations.shape() != [k, n, n] {
        return Err(Error::Dimension(format!(
            "activation stack {:?} does not match the model's [{k}, {n}, {n}] penultimate shape",
            activations.shape()
        )));
    }
    let flat = activations.clone().reshape(vec![1, k * n * n])?;
    let mut one_hot = Tensor::zeros(vec![1, classes]);
    one_hot.data_mut()[class] = 1.0;
    let mut dense = model.dense_layer().clone();
    let ctx = LayerCtx::Dense { input: flat };
    let grad = dense.backward(&ctx, &one_hot)?;
    grad.reshape(vec![k, n, n])
}

/// Builds a map for `class` directly from the dense weight row, skipping the
/// backward pass. Valid because the head is a single linear layer: the
/// gradient stack equals the reshaped weight row exactly.
pub fn cam_from_dense_weights(
    model: &Model,
    activations: &Tensor,
    class: usize,
    variant: CamVariant,
) -> Result<CamMap> {
    check_stack(activations, "activation stack")?;
    let k = model.penultimate_channels();
    let n = model.penultimate_side();
    if activations.shape() != [k, n, n] {
        return Err(Error::Unsupported(format!(
            "activation stack {:?} does not match the model's [{k}, {n}, {n}] penultimate shape",
            activations.shape()
        )));
    }
    let weights = model.dense_weight_maps(class)?;
    match variant {
        CamVariant::Classical => grad_cam(activations, &weights, class),
        CamVariant::Modified => modified_grad_cam(activations, &weights, class),
    }
}

/// Pixel-center-aligned bilinear resampling. Identity when sizes match;
/// constant maps stay constant.
pub fn bilinear_resize(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if map.ndim() != 2 {
        return Err(Error::Dimension(format!(
            "resize expects a [h, w] map, got {:?}",
            map.shape()
        )));
    }
    if out_h < 1 || out_w < 1 {
        return Err(Error::Argument("resize target must be at least 1x1".into()));
    }
    let (in_h, in_w) = (map.shape()[0], map.shape()[1]);
    if in_h == out_h && in_w == out_w {
        return Ok(map.clone());
    }
    let mut out = Tensor::zeros(vec![out_h, out_w]);
    let scale_y = in_h as f64 / out_h as f64;
    let scale_x = in_w as f64 / out_w as f64;
    let src = map.data();
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (in_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (in_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let fx = sx - x0 as f64;
            let top = src[y0 * in_w + x0] * (1.0 - fx) + src[y0 * in_w + x1] * fx;
            let bot = src[y1 * in_w + x0] * (1.0 - fx) + src[y1 * in_w + x1] * fx;
            out.data_mut()[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_resize`]: routes an output-sized gradient back to
/// the input grid with the same interpolation weights.
pub fn bilinear_resize_backward(
    grad_out: &Tensor,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor> {
    if grad_out.ndim() != 2 {
        return Err(Error::Dimension(format!(
            "resize gradient expects a [h, w] map, got {:?}",
            grad_out.shape()
        )));
    }
    if in_h < 1 || in_w < 1 {
        return Err(Error::Argument("resize source must be at least 1x1".into()));
    }
    let (out_h, out_w) = (grad_out.shape()[0], grad_out.shape()[1]);
    if in_h == out_h && in_w == out_w {
        return Ok(grad_out.clone());
    }
    let mut grad_in = Tensor::zeros(vec![in_h, in_w]);
    let scale_y = in_h as f64 / out_h as f64;
    let scale_x = in_w as f64 / out_w as f64;
    let g = grad_out.data();
    let acc = grad_in.data_mut();
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (in_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (in_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let fx = sx - x0 as f64;
            let v = g[oy * out_w + ox];
            acc[y0 * in_w + x0] += v * (1.0 - fy) * (1.0 - fx);
            acc[y0 * in_w + x1] += v * (1.0 - fy) * fx;
            acc[y1 * in_w + x0] += v * fy * (1.0 - fx);
            acc[y1 * in_w + x1] += v * fy * fx;
        }
    }
    Ok(grad_in)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorRamp {
    /// value 0 -> black, value 1 -> white, linear in between.
    Gray,
    /// black -> red -> yellow -> white: r saturates first, then g, then b.
    Hot,
}

fn ramp_rgb(t: f64, ramp: ColorRamp) -> [u8; 3] {
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match ramp {
        ColorRamp::Gray => {
            let g = to_u8(t);
            [g, g, g]
        }
        ColorRamp::Hot => [
            to_u8(3.0 * t),
            to_u8(3.0 * t - 1.0),
            to_u8(3.0 * t - 2.0),
        ],
    }
}

/// Renders a map as an 8-bit image, min-max normalized per map. Constant
/// maps (including the all-zero case) render all black.
pub fn heatmap_render(map: &Tensor, ramp: ColorRamp) -> Result<image::RgbImage> {
    if map.ndim() != 2 {
        return Err(Error::Dimension(format!(
            "render expects a [h, w] map, got {:?}",
            map.shape()
        )));
    }
    if !map.all_finite() {
        return Err(Error::Numeric("map contains non-finite values".into()));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let min = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let t = if span > 0.0 {
            (map.data()[i] - min) / span
        } else {
            0.0
        };
        *px = image::Rgb(ramp_rgb(t, ramp));
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn stack(k: usize, n: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::from_fn(vec![k, n, n], f)
    }

    #[test]
    fn neuron_importance_is_the_plane_mean() {
        let grads = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(neuron_importance(&grads).unwrap(), vec![2.5]);
        let ones = Tensor::full(vec![1, 2, 2], 1.0);
        assert_eq!(neuron_importance(&ones).unwrap(), vec![1.0]);
    }

    #[test]
    fn classical_map_matches_hand_computation() {
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, -1.0, 0.0, 2.0]).unwrap();
        let ones = Tensor::full(vec![1, 2, 2], 1.0);
        let map = grad_cam(&a, &ones, 0).unwrap();
        assert_eq!(map.values.data(), &[1.0, 0.0, 0.0, 2.0]);
        assert!(!map.all_zero);

        let neg = Tensor::full(vec![1, 2, 2], -1.0);
        let map = grad_cam(&a, &neg, 0).unwrap();
        assert_eq!(map.values.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn negative_gradients_on_positive_maps_zero_out_and_flag() {
        let a = Tensor::full(vec![2, 2, 2], 1.5);
        let neg = Tensor::full(vec![2, 2, 2], -1.0);
        let map = grad_cam(&a, &neg, 0).unwrap();
        assert!(map.all_zero);
        let map = modified_grad_cam(&a, &neg, 0).unwrap();
        assert!(map.all_zero);
    }

    #[test]
    fn modified_map_matches_hand_computation() {
        let g = Tensor::new(vec![1, 2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let a = Tensor::full(vec![1, 2, 2], 2.0);
        let map = modified_grad_cam(&a, &g, 0).unwrap();
        assert_eq!(map.values.data(), &[2.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn uniform_gradients_make_both_variants_identical() {
        let a = stack(3, 4, |i| ((i * 13 % 7) as f64) - 3.0);
        let g = Tensor::from_fn(vec![3, 4, 4], |i| 0.5 - (i / 16) as f64);
        let classical = grad_cam(&a, &g, 1).unwrap();
        let modified = modified_grad_cam(&a, &g, 1).unwrap();
        assert_eq!(classical.values.data(), modified.values.data());
    }

    #[test]
    fn dense_weight_route_matches_backprop_route() {
        let model = crate::model::Model::new(ModelConfig::preset(32, 4), 17).unwrap();
        let image = Tensor::from_fn(vec![32, 32], |i| ((i * 31 % 23) as f64) / 23.0);
        let trace = model.forward(&image).unwrap();
        for class in 0..4 {
            let grads = backprop_grad_stack(&model, &trace.activations, class).unwrap();
            let weights = model.dense_weight_maps(class).unwrap();
            for (g, w) in grads.data().iter().zip(weights.data()) {
                assert!((g - w).abs() <= 1e-12);
            }
            for variant in [CamVariant::Classical, CamVariant::Modified] {
                let fast = cam_from_dense_weights(&model, &trace.activations, class, variant)
                    .unwrap();
                let slow = match variant {
                    CamVariant::Classical => grad_cam(&trace.activations, &grads, class),
                    CamVariant::Modified => modified_grad_cam(&trace.activations, &grads, class),
                }
                .unwrap();
                for (a, b) in fast.values.data().iter().zip(slow.values.data()) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn resize_is_identity_at_same_size_and_keeps_constants() {
        let map = Tensor::from_fn(vec![3, 5], |i| i as f64);
        let same = bilinear_resize(&map, 3, 5).unwrap();
        assert_eq!(same.data(), map.data());

        let constant = Tensor::full(vec![4, 4], 0.7);
        let up = bilinear_resize(&constant, 9, 13).unwrap();
        for &v in up.data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_2x2_to_2x4_interpolates_columns() {
        let map = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let out = bilinear_resize(&map, 2, 4).unwrap();
        let expect = [0.0, 0.25, 0.75, 1.0];
        for row in 0..2 {
            for col in 0..4 {
                assert!((out.data()[row * 4 + col] - expect[col]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn render_all_zero_is_black_and_max_is_hottest() {
        let zero = Tensor::zeros(vec![2, 2]);
        let img = heatmap_render(&zero, ColorRamp::Hot).unwrap();
        assert!(img.pixels().all(|p| p.0 == [0, 0, 0]));

        let map = Tensor::new(vec![1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        let img = heatmap_render(&map, ColorRamp::Hot).unwrap();
        assert_eq!(img.get_pixel(2, 0).0, [255, 255, 255]);
        let img = heatmap_render(&map, ColorRamp::Gray).unwrap();
        assert_eq!(img.get_pixel(0, 0).0, [0, 0, 0]);
        assert_eq!(img.get_pixel(2, 0).0, [255, 255, 255]);
    }

    #[test]
    fn gray_ramp_is_monotone_in_map_value() {
        let map = Tensor::from_fn(vec![1, 16], |i| ((i * 7) % 16) as f64);
        let img = heatmap_render(&map, ColorRamp::Gray).unwrap();
        let mut pairs: Vec<(f64, u8)> = map
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, img.get_pixel(i as u32, 0).0[0]))
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            assert!(w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn resize_backward_is_the_exact_adjoint_of_resize() {
        // <resize(x), y> must equal <x, resize_backward(y)> for any x, y
        let x = Tensor::from_fn(vec![3, 5], |i| ((i * 13 % 17) as f64) - 8.0);
        let y = Tensor::from_fn(vec![7, 4], |i| ((i * 11 % 23) as f64) * 0.5 - 5.0);
        let fwd = bilinear_resize(&x, 7, 4).unwrap();
        let bwd = bilinear_resize_backward(&y, 3, 5).unwrap();
        let lhs: f64 = fwd.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(bwd.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");

        let same = bilinear_resize_backward(&y, 7, 4).unwrap();
        assert_eq!(same.data(), y.data());
    }
}
