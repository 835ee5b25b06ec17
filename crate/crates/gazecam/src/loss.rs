//! Loss heads: softmax cross-entropy over logits and mean squared error
//! between equally shaped maps. Both return the scalar loss together with
//! the gradient w.r.t. their first argument.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Cross-entropy over a batch of logit rows `[batch, classes]`, averaged
/// over the batch. Gradient per row is `softmax - one_hot(label)` divided
/// by the batch size.
pub fn softmax_ce_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.ndim() != 2 {
        return Err(Error::Dimension(format!(
            "cross-entropy expects [batch, classes] logits, got {:?}",
            logits.shape()
        )));
    }
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != batch {
        return Err(Error::Dimension(format!(
            "cross-entropy got {} labels for a batch of {batch}",
            labels.len()
        )));
    }
    let mut grad = Tensor::zeros(vec![batch, classes]);
    let mut loss = 0.0;
    let scale = 1.0 / batch as f64;
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Index(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let probs = softmax(row);
        loss -= probs[label].ln() * scale;
        let g = &mut grad.data_mut()[b * classes..(b + 1) * classes];
        for (gi, &pi) in g.iter_mut().zip(&probs) {
            *gi = pi * scale;
        }
        g[label] -= scale;
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("cross-entropy loss is not finite".into()));
    }
    Ok((loss, grad))
}

/// Mean squared error between two same-shape tensors; gradient w.r.t. the
/// first argument is `2 (a - b) / numel`.
pub fn mse_loss(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor)> {
    a.check_same_shape(b, "mse")?;
    let n = a.numel() as f64;
    let mut grad = Tensor::zeros(a.shape().to_vec());
    let mut loss = 0.0;
    for ((g, &x), &y) in grad.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        let d = x - y;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}
