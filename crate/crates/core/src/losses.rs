//! Loss functions in two forms: `f64` reference versions over plain slices
//! (used for oracles and finite-difference checks) and tape ops for training.

use std::sync::Arc;

use vton_tensor::{Tensor, Var};

use crate::error::{invalid, Result};

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(invalid(format!("{name} is empty")));
    }
    if let Some(bad) = scores.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
        return Err(invalid(format!("{name} score {bad} outside (0, 1)")));
    }
    Ok(())
}

/// Two-term GAN losses from discriminator probabilities:
/// `d = -mean[log d_real] - mean[log(1 - d_fake)]`,
/// `g = -mean[log d_fake]` (non-saturating). Returns `(g, d)`.
pub fn gan_loss(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    check_scores("d_real", d_real)?;
    check_scores("d_fake", d_fake)?;
    let mean = |v: &[f64], f: fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64;
    let d = -mean(d_real, f64::ln) - mean(d_fake, |x| (1.0 - x).ln());
    let g = -mean(d_fake, f64::ln);
    Ok((g, d))
}

/// Minimax value `mean[log d_real] + mean[log(1 - d_fake)]`, for logging.
pub fn gan_value(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    Ok(-gan_loss(d_real, d_fake)?.1)
}

/// Shape `[N, L, H, W]` of a logit tensor.
pub type Dims4 = (usize, usize, usize, usize);

/// Mean per-pixel cross-entropy of `softmax(logits)` against `labels`
/// (`[N, H, W]`), with the gradient with respect to `logits`.
pub fn cross_entropy_with_grad(logits: &[f64], dims: Dims4, labels: &[u8]) -> Result<(f64, Vec<f64>)> {
    let (n, l, h, w) = dims;
    let hw = h * w;
    if logits.len() != n * l * hw || labels.len() != n * hw || labels.is_empty() || l == 0 {
        return Err(invalid(format!(
            "logits {dims:?} ({} values) do not match {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&lab| lab as usize >= l) {
        return Err(invalid(format!("label {bad} outside the {l} classes")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(invalid("logits contain non-finite values"));
    }
    let total = labels.len() as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (p, &lab) in labels.iter().enumerate() {
        let (s, i) = (p / hw, p % hw);
        let at = |c: usize| (s * l + c) * hw + i;
        let max = (0..l).map(|c| logits[at(c)]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..l).map(|c| (logits[at(c)] - max).exp()).sum::<f64>().ln();
        loss += lse - logits[at(lab as usize)];
        for c in 0..l {
            let target = if c == lab as usize { 1.0 } else { 0.0 };
            grad[at(c)] = ((logits[at(c)] - lse).exp() - target) / total;
        }
    }
    Ok((loss / total, grad))
}

pub fn cross_entropy(logits: &[f64], dims: Dims4, labels: &[u8]) -> Result<f64> {
    cross_entropy_with_grad(logits, dims, labels).map(|(v, _)| v)
}

/// `Σ 0.5 (μ² + σ² − 1 − ln σ²)` with `σ² = exp(logvar)`.
pub fn kl_loss(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Gradients of [`kl_loss`] with respect to `mu` and `logvar`.
pub fn kl_loss_grad(mu: &[f64], logvar: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (
        mu.to_vec(),
        logvar.iter().map(|&lv| 0.5 * (lv.exp() - 1.0)).collect(),
    )
}

/// Mean absolute difference.
pub fn l1_mean(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid(format!("l1 needs equal non-empty inputs, got {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(invalid("l1 inputs contain NaN"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Texel reconstruction loss: mean over samples and valid texels of the
/// channel-summed absolute difference. `pred` and `target` are `[N, C, T]`,
/// `valid` is `[N, T]`. Returns the loss and its gradient w.r.t. `pred`.
pub fn recon_loss_with_grad(
    pred: &[f64],
    target: &[f64],
    valid: &[bool],
    samples: usize,
    channels: usize,
) -> Result<(f64, Vec<f64>)> {
    if samples == 0 || channels == 0 || valid.len() % samples != 0 {
        return Err(invalid("recon needs at least one sample and channel"));
    }
    let texels = valid.len() / samples;
    if pred.len() != target.len() || pred.len() != samples * channels * texels {
        return Err(invalid(format!(
            "recon shapes disagree: pred {}, target {}, {samples} samples x {channels} channels x {texels} texels",
            pred.len(),
            target.len()
        )));
    }
    if pred.iter().chain(target).any(|v| v.is_nan()) {
        return Err(invalid("recon inputs contain NaN"));
    }
    let count = valid.iter().filter(|&&v| v).count();
    let mut grad = vec![0.0; pred.len()];
    if count == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for s in 0..samples {
        for t in 0..texels {
            if !valid[s * texels + t] {
                continue;
            }
            for c in 0..channels {
                let i = (s * channels + c) * texels + t;
                let d = pred[i] - target[i];
                loss += d.abs();
                grad[i] = d.signum() * (d != 0.0) as u8 as f64 / count as f64;
            }
        }
    }
    Ok((loss / count as f64, grad))
}

pub fn recon_loss(pred: &[f64], target: &[f64], valid: &[bool], samples: usize, channels: usize) -> Result<f64> {
    recon_loss_with_grad(pred, target, valid, samples, channels).map(|(v, _)| v)
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Tape op: mean cross-entropy of `[N, L, H, W]` logits against fixed labels.
pub fn cross_entropy_var<'t>(logits: Var<'t>, labels: Arc<Vec<u8>>) -> Result<Var<'t>> {
    let x = logits.value();
    let (loss, grad) = cross_entropy_with_grad(&to_f64(&x), x.dims4(), &labels)?;
    let shape = x.shape().to_vec();
    let grad = to_f32(&grad);
    Ok(logits.tape().push(Tensor::scalar(loss as f32), &[logits], move |g| {
        let gv = g.item();
        vec![Some(Tensor::new(&shape, grad.iter().map(|v| v * gv).collect()))]
    }))
}

/// Tape op for [`recon_loss_with_grad`]; `pred` is `[N, C, T]`.
pub fn recon_loss_var<'t>(pred: Var<'t>, target: &[f64], valid: &[bool]) -> Result<Var<'t>> {
    let x = pred.value();
    let shape = x.shape().to_vec();
    if shape.len() != 3 {
        return Err(invalid(format!("recon prediction must be [N, C, T], got {shape:?}")));
    }
    let (loss, grad) = recon_loss_with_grad(&to_f64(&x), target, valid, shape[0], shape[1])?;
    let grad = to_f32(&grad);
    Ok(pred.tape().push(Tensor::scalar(loss as f32), &[pred], move |g| {
        let gv = g.item();
        vec![Some(Tensor::new(&shape, grad.iter().map(|v| v * gv).collect()))]
    }))
}

/// Sum of KL terms over every element of `mu` / `logvar`, divided by `batch`.
pub fn kl_var<'t>(mu: Var<'t>, logvar: Var<'t>, batch: usize) -> Var<'t> {
    mu.square()
        .add(logvar.exp())
        .sub(logvar)
        .add_scalar(-1.0)
        .sum()
        .scale(0.5 / batch as f32)
}
