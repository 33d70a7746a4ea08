//! Shared training plumbing: optimiser steps, loss curves, divergence checks
//! and learning-rate schedules.

use std::fmt::Write as _;

use vton_tensor::nn::{Bound, ParamStore};
use vton_tensor::optim::Adam;
use vton_tensor::{Gradients, Tensor};

use crate::error::{Result, VtonError};

/// Apply one Adam update from the gradients of a bound store, then fold in
/// any running statistics gathered during the forward pass.
pub fn apply_step(store: &mut ParamStore, opt: &mut Adam, bound: &Bound<'_>, grads: &Gradients) {
    let g = bound.grads(grads);
    opt.step(store, &g);
    store.apply_updates(bound.take_updates());
}

/// Loss curves in `step,loss_name,value` form.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Curves {
    rows: Vec<(usize, String, f64)>,
}

impl Curves {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, step: usize, name: &str, value: f64) {
        self.rows.push((step, name.to_string(), value));
    }

    pub fn extend(&mut self, other: Curves) {
        self.rows.extend(other.rows);
    }

    pub fn rows(&self) -> &[(usize, String, f64)] {
        &self.rows
    }

    /// Values logged under `name`, in order.
    pub fn series(&self, name: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.1 == name).map(|r| r.2).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss_name,value\n");
        for (step, name, value) in &self.rows {
            writeln!(out, "{step},{name},{value}").unwrap();
        }
        out
    }
}

/// Error out on a non-finite loss.
pub fn check_finite(phase: &str, step: usize, name: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(VtonError::Diverged {
            phase: phase.to_string(),
            step,
            loss_name: name.to_string(),
            value,
        })
    }
}

/// Constant for `constant_epochs`, then linear decay reaching zero after
/// `decay_epochs` more.
pub fn linear_decay_lr(base: f32, epoch: f64, constant_epochs: f64, decay_epochs: f64) -> f32 {
    if epoch <= constant_epochs || decay_epochs <= 0.0 {
        return base;
    }
    let t = ((epoch - constant_epochs) / decay_epochs).clamp(0.0, 1.0);
    (base as f64 * (1.0 - t)) as f32
}

/// Deterministic epoch order: a seeded Fisher–Yates shuffle of `0..n`.
pub fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Contiguous batches of at most `size` indices.
pub fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    order.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Stack selected `[1, ...]` tensors into one batch.
pub fn gather(items: &[Tensor], idx: &[usize]) -> Tensor {
    let picked: Vec<Tensor> = idx.iter().map(|&i| items[i].clone()).collect();
    Tensor::stack(&picked)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_midpoint_is_half() {
        assert_eq!(linear_decay_lr(2e-4, 5.0, 10.0, 20.0), 2e-4);
        assert!((linear_decay_lr(2e-4, 20.0, 10.0, 20.0) - 1e-4).abs() < 1e-10);
        assert_eq!(linear_decay_lr(2e-4, 30.0, 10.0, 20.0), 0.0);
    }

    #[test]
    fn csv_format() {
        let mut c = Curves::new();
        c.push(0, "l1", 0.5);
        c.push(1, "l1", 0.25);
        assert_eq!(c.to_csv(), "step,loss_name,value\n0,l1,0.5\n1,l1,0.25\n");
        assert_eq!(c.series("l1"), vec![0.5, 0.25]);
    }

    #[test]
    fn shuffle_is_deterministic_permutation() {
        let a = shuffled(10, 3);
        assert_eq!(a, shuffled(10, 3));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn divergence_is_reported() {
        let err = check_finite("stage1", 7, "ce", f64::NAN).unwrap_err();
        assert!(err.to_string().contains("step 7"));
    }
}
