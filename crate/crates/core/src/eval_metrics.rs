//! SSIM, Inception Score over a pluggable classifier, and A/B vote
//! aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::ImageTensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim_mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub is_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub is_std: Option<f64>,
    pub n_images: usize,
    /// Which classifier produced the IS numbers. Scores from different
    /// classifiers are not comparable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classifier_id: Option<String>,
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM over Gaussian windows of side `window` (shrunk to the
/// largest odd size that fits small images). RGB inputs are compared on luma.
pub fn ssim(a: &ImageTensor, b: &ImageTensor, window: usize, c1: f64, c2: f64) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(invalid(format!(
            "ssim needs equal shapes, got {}x{}x{} and {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    if window == 0 {
        return Err(invalid("ssim window must be positive"));
    }
    let (h, w) = (a.height(), a.width());
    let mut n = window.min(h).min(w);
    if n % 2 == 0 {
        n -= 1;
    }
    let k = gaussian_window(n, SSIM_SIGMA * n as f64 / SSIM_WINDOW as f64);
    let (x, y) = (a.luma(), b.luma());
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let mxx = filter_valid(&prod(&x, &x), h, w, &k);
    let myy = filter_valid(&prod(&y, &y), h, w, &k);
    let mxy = filter_valid(&prod(&x, &y), h, w, &k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// [`ssim`] with the standard window and constants.
pub fn ssim_default(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    ssim(a, b, SSIM_WINDOW, SSIM_C1, SSIM_C2)
}

/// Anything that maps an image to a class distribution.
pub trait ImageClassifier {
    fn id(&self) -> String;
    fn class_probabilities(&self, image: &ImageTensor) -> Result<Vec<f64>>;
}

/// `exp(mean_x KL(p(y|x) || p(y)))` per split; returns mean and population
/// standard deviation over splits.
pub fn inception_score_from_probs(probs: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    if splits == 0 || probs.len() < splits {
        return Err(invalid(format!(
            "need at least {splits} images for {splits} splits, got {}",
            probs.len()
        )));
    }
    let k = probs[0].len();
    for (i, p) in probs.iter().enumerate() {
        let s: f64 = p.iter().sum();
        if p.len() != k || p.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("row {i} is not a probability vector over {k} classes")));
        }
    }
    let n = probs.len();
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let part = &probs[s * n / splits..(s + 1) * n / splits];
        let mut marginal = vec![0.0; k];
        for p in part {
            for (m, v) in marginal.iter_mut().zip(p) {
                *m += v / part.len() as f64;
            }
        }
        let mut kl = 0.0;
        for p in part {
            for (v, m) in p.iter().zip(&marginal) {
                if *v > 0.0 {
                    kl += v * (v / m).ln();
                }
            }
        }
        scores.push((kl / part.len() as f64).exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

pub fn inception_score(images: &[ImageTensor], classifier: &dyn ImageClassifier, splits: usize) -> Result<(f64, f64)> {
    if images.len() < splits || splits == 0 {
        return Err(invalid(format!(
            "need at least {splits} images for {splits} splits, got {}",
            images.len()
        )));
    }
    let probs = images
        .iter()
        .map(|im| classifier.class_probabilities(im))
        .collect::<Result<Vec<_>>>()?;
    inception_score_from_probs(&probs, splits)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ABVote {
    pub pair_id: String,
    pub method_a: String,
    pub method_b: String,
    pub vote: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ABStudy {
    /// Registered method ids; votes naming anything else are rejected.
    pub methods: Vec<String>,
    pub sessions: Vec<ABVote>,
}

impl ABStudy {
    /// Parses `pair_id,method_a,method_b,vote` lines; a header line is optional.
    pub fn from_csv(text: &str, methods: Vec<String>) -> Result<Self> {
        let mut sessions = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (n == 0 && line.starts_with("pair_id")) {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 4 {
                return Err(invalid(format!("line {}: expected 4 columns, got {}", n + 1, cols.len())));
            }
            sessions.push(ABVote {
                pair_id: cols[0].to_string(),
                method_a: cols[1].to_string(),
                method_b: cols[2].to_string(),
                vote: cols[3].to_string(),
            });
        }
        Ok(Self { methods, sessions })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ABComparison {
    pub method_a: String,
    pub method_b: String,
    pub votes_a: usize,
    pub votes_b: usize,
    pub percent_a: f64,
    pub percent_b: f64,
}

/// Vote shares per method pair, in order of first appearance. `(a, b)` and
/// `(b, a)` sessions count toward the same comparison.
pub fn ab_aggregate(study: &ABStudy) -> Result<Vec<ABComparison>> {
    let known = |m: &str| study.methods.iter().any(|k| k == m);
    let mut out: Vec<ABComparison> = Vec::new();
    for (i, s) in study.sessions.iter().enumerate() {
        for m in [&s.method_a, &s.method_b, &s.vote] {
            if !known(m) {
                return Err(invalid(format!("session {i} ({}): unknown method id '{m}'", s.pair_id)));
            }
        }
        if s.method_a == s.method_b || (s.vote != s.method_a && s.vote != s.method_b) {
            return Err(invalid(format!(
                "session {i} ({}): vote '{}' is not one of '{}' / '{}'",
                s.pair_id, s.vote, s.method_a, s.method_b
            )));
        }
        let idx = match out.iter().position(|c| {
            (c.method_a == s.method_a && c.method_b == s.method_b)
                || (c.method_a == s.method_b && c.method_b == s.method_a)
        }) {
            Some(idx) => idx,
            None => {
                out.push(ABComparison {
                    method_a: s.method_a.clone(),
                    method_b: s.method_b.clone(),
                    votes_a: 0,
                    votes_b: 0,
                    percent_a: 0.0,
                    percent_b: 0.0,
                });
                out.len() - 1
            }
        };
        let c = &mut out[idx];
        if s.vote == c.method_a {
            c.votes_a += 1;
        } else {
            c.votes_b += 1;
        }
    }
    for c in &mut out {
        let total = (c.votes_a + c.votes_b) as f64;
        c.percent_a = 100.0 * c.votes_a as f64 / total;
        c.percent_b = 100.0 * c.votes_b as f64 / total;
    }
    Ok(out)
}

/// Lays comparisons out side by side: one `Method | Proportion` column pair
/// per comparison, the opponent on the first row and `reference` below.
pub fn format_ab_table(comparisons: &[ABComparison], reference: &str) -> Result<String> {
    let mut header = Vec::new();
    let mut top = Vec::new();
    let mut bottom = Vec::new();
    for c in comparisons {
        let (other, p_other, p_ref) = if c.method_a == reference {
            (&c.method_b, c.percent_b, c.percent_a)
        } else if c.method_b == reference {
            (&c.method_a, c.percent_a, c.percent_b)
        } else {
            return Err(invalid(format!(
                "comparison {} vs {} does not involve '{reference}'",
                c.method_a, c.method_b
            )));
        };
        header.extend(["Method".to_string(), "Proportion".to_string()]);
        top.extend([other.clone(), format!("{p_other:.2}%")]);
        bottom.extend([reference.to_string(), format!("{p_ref:.2}%")]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|i| header[i].len().max(top[i].len()).max(bottom[i].len()))
        .collect();
    let render = |row: &[String]| {
        row.iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let rule = "-".repeat(render(&header).len());
    Ok([render(&header), rule, render(&top), render(&bottom)].join("\n") + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> ImageTensor {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        ImageTensor::new(h, w, 1, data).unwrap()
    }

    #[test]
    fn ssim_constant_images() {
        let a = gray(16, 16, |_, _| 0.0);
        let b = gray(16, 16, |_, _| 1.0);
        let s = ssim_default(&a, &b).unwrap();
        assert!((s - SSIM_C1 / (1.0 + SSIM_C1)).abs() < 1e-9, "{s}");
        let c = gray(16, 16, |_, _| 0.5);
        assert!((ssim_default(&c, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_symmetric_and_penalizes_noise() {
        let a = gray(20, 14, |y, x| ((x * 7 + y * 3) % 11) as f32 / 10.0);
        let b = gray(20, 14, |y, x| ((x * 5 + y * 2) % 9) as f32 / 8.0);
        assert_eq!(ssim_default(&a, &b).unwrap(), ssim_default(&b, &a).unwrap());
        assert!(ssim_default(&a, &b).unwrap() < 0.5);
    }

    #[test]
    fn ssim_shape_mismatch() {
        assert!(ssim_default(&gray(12, 12, |_, _| 0.0), &gray(12, 13, |_, _| 0.0)).is_err());
    }

    #[test]
    fn ssim_tiny_image_shrinks_window() {
        let a = gray(4, 6, |y, x| (y * x) as f32 / 20.0);
        assert!((ssim_default(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn is_closed_forms() {
        let uniform = vec![vec![0.25; 4]; 8];
        assert!((inception_score_from_probs(&uniform, 2).unwrap().0 - 1.0).abs() < 1e-12);
        let onehot: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..4).map(|k| if k == i % 4 { 1.0 } else { 0.0 }).collect())
            .collect();
        let (m, s) = inception_score_from_probs(&onehot, 2).unwrap();
        assert!((m - 4.0).abs() < 1e-9 && s.abs() < 1e-12);
        assert!(inception_score_from_probs(&onehot, 9).is_err());
    }

    #[test]
    fn ab_counts() {
        let csv = "pair_id,method_a,method_b,vote\n1,ours,viton,ours\n2,ours,viton,ours\n3,viton,ours,ours\n4,ours,viton,viton\n";
        let study = ABStudy::from_csv(csv, vec!["ours".into(), "viton".into()]).unwrap();
        let t = ab_aggregate(&study).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!((t[0].percent_a, t[0].percent_b), (75.0, 25.0));
        let bad = ABStudy::from_csv("1,ours,tps,ours\n", vec!["ours".into(), "viton".into()]).unwrap();
        assert!(ab_aggregate(&bad).is_err());
    }
}
