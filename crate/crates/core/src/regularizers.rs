//! The Fisher-weighted anchor to `θ₀` and the ensemble barrier `Ω`, with
//! closed-form gradients in each adapter's own parameter space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::FisherDiagonal;
use crate::params::{ParamLayout, ParamVector};
use crate::pool::validate_weights;
use crate::task_vector::TaskVector;

/// Regularization strengths. Head entries use the `_cls` strengths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    pub alpha: f64,
    pub alpha_cls: f64,
    pub beta: f64,
    pub beta_cls: f64,
    /// Apply regularizer gradients directly to the parameters (outside the
    /// optimizer moments) for LoRA / (IA)³.
    pub decoupled_peft: bool,
    /// Same switch for full fine-tuning.
    pub decoupled_fft: bool,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            alpha_cls: 0.0,
            beta: 0.0,
            beta_cls: 0.0,
            decoupled_peft: true,
            decoupled_fft: false,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("alpha_cls", self.alpha_cls),
            ("beta", self.beta),
            ("beta_cls", self.beta_cls),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn decoupled(&self, peft: bool) -> bool {
        if peft {
            self.decoupled_peft
        } else {
            self.decoupled_fft
        }
    }
}

/// Per-scalar strength: `base` on backbone entries, `cls` on head entries.
pub fn strength_mask(layout: &ParamLayout, base: f64, cls: f64) -> Vec<f64> {
    layout
        .head_mask()
        .into_iter()
        .map(|h| if h { cls } else { base })
        .collect()
}

/// `Σ_i F_i τ_i²` over a dense displacement (shorter Fisher is zero-padded).
pub fn ewc_dense(tau: &[f64], fisher: &[f64]) -> f64 {
    tau.iter()
        .zip(fisher.iter().chain(std::iter::repeat(&0.0)))
        .map(|(t, f)| f * t * t)
        .sum()
}

fn fisher_for(fisher: &FisherDiagonal, theta0: &ParamVector) -> Result<Vec<f64>> {
    if !fisher.layout().is_prefix_of(theta0.layout()) {
        return Err(Error::layout("Fisher layout is not a prefix of θ₀'s layout"));
    }
    Ok(fisher.padded_values(theta0.len()))
}

/// `EWC_θ₀(θ₀ + τ) = Σ_i F_i τ_i²` over the materialized displacement.
pub fn ewc_penalty(tv: &TaskVector, fisher: &FisherDiagonal, theta0: &ParamVector) -> Result<f64> {
    let f = fisher_for(fisher, theta0)?;
    let tau = tv.materialize(theta0)?;
    Ok(ewc_dense(tau.values(), &f))
}

/// Gradient of `½ EWC_θ₀` w.r.t. the adapter parameters.
pub fn ewc_grad(tv: &TaskVector, fisher: &FisherDiagonal, theta0: &ParamVector) -> Result<Vec<f64>> {
    let f = fisher_for(fisher, theta0)?;
    let tau = tv.materialize(theta0)?;
    let dense: Vec<f64> = tau.values().iter().zip(&f).map(|(t, fi)| fi * t).collect();
    tv.pullback(&dense, theta0)
}

/// `Ω_F = ½ Σ_t w_t(1−w_t) EWC(θ_t) − Σ_t Σ_{t'<t} w_t w_t' τ_tᵀ F τ_t'`.
pub fn omega_value(taus: &[&[f64]], weights: &[f64], fisher: &[f64]) -> Result<f64> {
    validate_weights(weights, taus.len())?;
    check_lengths(taus, fisher)?;
    let mut own = 0.0;
    let mut cross = 0.0;
    for (t, tau_t) in taus.iter().enumerate() {
        let w = weights[t];
        own += w * (1.0 - w) * ewc_dense(tau_t, fisher);
        for (tp, tau_p) in taus[..t].iter().enumerate() {
            let c: f64 = tau_t.iter().zip(*tau_p).zip(fisher).map(|((a, b), f)| a * f * b).sum();
            cross += w * weights[tp] * c;
        }
    }
    Ok(0.5 * own - cross)
}

/// `½ Σ_t Σ_{t'<t} w_t w_t' (τ_t − τ_t')ᵀ F (τ_t − τ_t')`.
pub fn omega_pairwise(taus: &[&[f64]], weights: &[f64], fisher: &[f64]) -> Result<f64> {
    validate_weights(weights, taus.len())?;
    check_lengths(taus, fisher)?;
    let mut total = 0.0;
    for (t, tau_t) in taus.iter().enumerate() {
        for (tp, tau_p) in taus[..t].iter().enumerate() {
            let d: f64 = tau_t
                .iter()
                .zip(*tau_p)
                .zip(fisher)
                .map(|((a, b), f)| f * (a - b) * (a - b))
                .sum();
            total += weights[t] * weights[tp] * d;
        }
    }
    Ok(0.5 * total)
}

fn check_lengths(taus: &[&[f64]], fisher: &[f64]) -> Result<()> {
    if taus.iter().any(|t| t.len() != fisher.len()) {
        return Err(Error::layout("task vectors and Fisher differ in length"));
    }
    Ok(())
}

/// Dense `∂Ω/∂τ_k = (1/k) F ⊙ ((1 − 1/k) τ_k − (1/k) Σ_{t<k} τ_t)` under
/// uniform weights `1/k`, scaled elementwise by `mask` when given.
pub fn omega_grad_dense(tau_k: &[f64], sum_prev: &[f64], k: usize, fisher: &[f64], mask: Option<&[f64]>, out: &mut [f64]) {
    let kf = k as f64;
    let inv = 1.0 / kf;
    let keep = 1.0 - inv;
    for i in 0..out.len() {
        let g = inv * fisher[i] * (keep * tau_k[i] - inv * sum_prev[i]);
        out[i] = match mask {
            Some(m) => m[i] * g,
            None => g,
        };
    }
}

/// `∂Ω/∂(adapter of τ_k)` for the `k`-th (1-based) vector of a uniform
/// pool, given the cached `Σ_{t<k} materialize(τ_t)`.
pub fn omega_grad_current(
    tau_k: &TaskVector,
    sum_prev: &[f64],
    k: usize,
    fisher: &FisherDiagonal,
    theta0: &ParamVector,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::validation("task index k is 1-based"));
    }
    if sum_prev.len() != theta0.len() {
        return Err(Error::layout("cached sum does not match θ₀'s layout"));
    }
    let f = fisher_for(fisher, theta0)?;
    let tau = tau_k.materialize(theta0)?;
    let mut dense = vec![0.0; theta0.len()];
    omega_grad_dense(tau.values(), sum_prev, k, &f, None, &mut dense);
    tau_k.pullback(&dense, theta0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{EntryKind, LayoutEntry};
    use std::sync::Arc;

    fn flat(n: usize) -> Arc<ParamLayout> {
        Arc::new(ParamLayout::new(vec![LayoutEntry::new("w", vec![n], EntryKind::BackboneBias)]).unwrap())
    }

    fn setup(fisher: &[f64], tau: &[f64]) -> (TaskVector, FisherDiagonal, ParamVector) {
        let l = flat(tau.len());
        let t0 = ParamVector::zeros(l.clone());
        let tv = TaskVector::dense(&ParamVector::new(l.clone(), tau.to_vec()).unwrap());
        (tv, FisherDiagonal::new(l, fisher.to_vec(), 1).unwrap(), t0)
    }

    #[test]
    fn ewc_examples() {
        let (tv, f, t0) = setup(&[0.5, 0.25], &[1.0, 2.0]);
        assert_eq!(ewc_penalty(&tv, &f, &t0).unwrap(), 1.5);
        let (tv, f, t0) = setup(&[0.5, 0.25], &[0.0, 0.0]);
        assert_eq!(ewc_penalty(&tv, &f, &t0).unwrap(), 0.0);
        let (tv, f, t0) = setup(&[0.0, 0.0], &[3.0, -7.0]);
        assert_eq!(ewc_penalty(&tv, &f, &t0).unwrap(), 0.0);
    }

    #[test]
    fn ewc_grad_identity_fisher() {
        let (tv, f, t0) = setup(&[1.0], &[3.0]);
        assert_eq!(ewc_grad(&tv, &f, &t0).unwrap(), vec![3.0]);
    }

    #[test]
    fn omega_examples() {
        let f = [1.0];
        let t1 = [1.0];
        let t2 = [-1.0];
        let v = omega_value(&[&t1, &t2], &[0.5, 0.5], &f).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        let same = [0.3];
        let v = omega_value(&[&same, &same, &same], &[0.2, 0.3, 0.5], &f).unwrap();
        assert!(v.abs() < 1e-15);
        assert!(omega_value(&[&t1, &t2], &[0.5, 0.6], &f).is_err());
    }

    #[test]
    fn omega_grad_examples() {
        let (tv, f, t0) = setup(&[1.0], &[4.0]);
        let g = omega_grad_current(&tv, &[2.0], 2, &f, &t0).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-15);
        let g1 = omega_grad_current(&tv, &[0.0], 1, &f, &t0).unwrap();
        assert_eq!(g1, vec![0.0]);
    }

    #[test]
    fn negative_strengths_rejected() {
        let r = RegConfig {
            alpha: -1.0,
            ..RegConfig::default()
        };
        assert!(r.validate().is_err());
    }
}
