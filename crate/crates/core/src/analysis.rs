//! Second-order proxies around `θ₀`, the composition identities they
//! satisfy, and the evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{bilinear, cosine, dot, log_sum_exp, Matrix};
use crate::nn::{Batch, ClassRange, Network};
use crate::params::ParamVector;
use crate::pool::{validate_weights, PoolState};

/// Curvature of a [`QuadraticProxy`].
#[derive(Clone, Debug, PartialEq)]
pub enum Curvature {
    /// Exact Hessian (small networks only).
    Dense(Matrix),
    /// Diagonal surrogate, typically the Fisher diagonal.
    Diagonal(Vec<f64>),
}

impl Curvature {
    pub fn dim(&self) -> usize {
        match self {
            Curvature::Dense(m) => m.rows,
            Curvature::Diagonal(d) => d.len(),
        }
    }

    /// `uᵀ H v`.
    pub fn form(&self, u: &[f64], v: &[f64]) -> f64 {
        match self {
            Curvature::Dense(m) => bilinear(u, m, v),
            Curvature::Diagonal(d) => u.iter().zip(v).zip(d).map(|((a, b), h)| a * h * b).sum(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Curvature::Dense(_) => "exact-hessian",
            Curvature::Diagonal(_) => "diagonal-fisher",
        }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        match self {
            Curvature::Dense(m) => m.min_eigenvalue(),
            Curvature::Diagonal(d) => d.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }
}

/// `ℓ_cur(θ₀ + τ) = ℓ₀ + τᵀg + ½ τᵀHτ`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticProxy {
    pub loss0: f64,
    pub grad0: Vec<f64>,
    pub hess0: Curvature,
}

impl QuadraticProxy {
    pub fn new(loss0: f64, grad0: Vec<f64>, hess0: Curvature) -> Result<Self> {
        if grad0.len() != hess0.dim() {
            return Err(Error::layout("gradient and curvature dimensions differ"));
        }
        if let Curvature::Dense(m) = &hess0 {
            if m.rows != m.cols {
                return Err(Error::layout("Hessian must be square"));
            }
        }
        Ok(Self { loss0, grad0, hess0 })
    }

    /// Proxy built from a network's loss, gradient and exact Hessian at
    /// `theta0`.
    pub fn exact(net: &Network, theta0: &ParamVector, batch: &Batch, range: ClassRange) -> Result<Self> {
        let (loss0, grad0) = net.loss_and_grad(theta0, batch, range)?;
        let h = net.exact_hessian(theta0, batch, range)?;
        Self::new(loss0, grad0, Curvature::Dense(h))
    }

    pub fn dim(&self) -> usize {
        self.grad0.len()
    }

    pub fn is_psd(&self, tol: f64) -> bool {
        self.hess0.min_eigenvalue() >= -tol
    }
}

pub fn proxy_eval(q: &QuadraticProxy, tau: &[f64]) -> Result<f64> {
    if tau.len() != q.dim() {
        return Err(Error::layout("displacement does not match the proxy"));
    }
    Ok(q.loss0 + dot(tau, &q.grad0) + 0.5 * q.hess0.form(tau, tau))
}

fn check_taus(q: &QuadraticProxy, taus: &[&[f64]], weights: &[f64]) -> Result<()> {
    validate_weights(weights, taus.len())?;
    if taus.iter().any(|t| t.len() != q.dim()) {
        return Err(Error::layout("displacement does not match the proxy"));
    }
    Ok(())
}

fn combine(taus: &[&[f64]], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; taus.first().map_or(0, |t| t.len())];
    for (t, w) in taus.iter().zip(weights) {
        crate::linalg::axpy(*w, t, &mut out);
    }
    out
}

/// `Ω = ½ Σ_t Σ_{t'<t} w_t w_t' (τ_t − τ_t')ᵀ H (τ_t − τ_t')` with the
/// proxy's curvature.
pub fn omega_pairwise_h(q: &QuadraticProxy, taus: &[&[f64]], weights: &[f64]) -> Result<f64> {
    check_taus(q, taus, weights)?;
    let mut total = 0.0;
    let mut d = vec![0.0; q.dim()];
    for t in 0..taus.len() {
        for tp in 0..t {
            for (i, di) in d.iter_mut().enumerate() {
                *di = taus[t][i] - taus[tp][i];
            }
            total += weights[t] * weights[tp] * q.hess0.form(&d, &d);
        }
    }
    Ok(0.5 * total)
}

/// Proxy values at the composition and at each individual model.
pub struct Composition {
    pub composed: f64,
    pub individual: Vec<f64>,
    pub mean_individual: f64,
    pub omega: f64,
}

pub fn composition(q: &QuadraticProxy, taus: &[&[f64]], weights: &[f64]) -> Result<Composition> {
    check_taus(q, taus, weights)?;
    let composed = proxy_eval(q, &combine(taus, weights))?;
    let individual = taus.iter().map(|t| proxy_eval(q, t)).collect::<Result<Vec<_>>>()?;
    let mean_individual = individual.iter().zip(weights).map(|(l, w)| l * w).sum();
    Ok(Composition {
        composed,
        individual,
        mean_individual,
        omega: omega_pairwise_h(q, taus, weights)?,
    })
}

/// `|ℓ_cur(θ_P) + Ω − Σ w_t ℓ_cur(θ_t)|`.
pub fn theorem1_residual(q: &QuadraticProxy, taus: &[&[f64]], weights: &[f64]) -> Result<f64> {
    let c = composition(q, taus, weights)?;
    Ok((c.composed + c.omega - c.mean_individual).abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "gap", rename_all = "lowercase")]
pub enum JensenGap {
    Value(f64),
    /// The curvature is not PSD, so the bound does not apply.
    Inapplicable,
}

/// PSD tolerance used by [`jensen_gap`].
pub const PSD_TOL: f64 = 1e-8;

/// `Σ w_t ℓ_cur(θ_t) − ℓ_cur(θ_P)`.
pub fn jensen_gap(q: &QuadraticProxy, taus: &[&[f64]], weights: &[f64]) -> Result<JensenGap> {
    check_taus(q, taus, weights)?;
    if !q.is_psd(PSD_TOL) {
        return Ok(JensenGap::Inapplicable);
    }
    let c = composition(q, taus, weights)?;
    Ok(JensenGap::Value(c.mean_individual - c.composed))
}

/// `|(1−β)ℓ_cur(θ_P) + βΣw_tℓ_cur(θ_t) − (ℓ_cur(θ_P) + βΩ)|`.
pub fn eq14_residual(q: &QuadraticProxy, taus: &[&[f64]], weights: &[f64], beta: f64) -> Result<f64> {
    let c = composition(q, taus, weights)?;
    let lhs = (1.0 - beta) * c.composed + beta * c.mean_individual;
    let rhs = c.composed + beta * c.omega;
    Ok((lhs - rhs).abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlRow {
    pub eps: f64,
    pub kl: f64,
    pub quad: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlTable {
    pub rows: Vec<KlRow>,
    /// Least-squares slope of `log|KL − quad|` against `log ε` over the
    /// rows with `ε > 0`.
    pub remainder_slope: f64,
}

fn range_log_probs(logits: &Matrix, range: ClassRange) -> Vec<Vec<f64>> {
    (0..logits.rows)
        .map(|i| {
            let s = &logits.row(i)[range.start..range.end];
            let lse = log_sum_exp(s);
            s.iter().map(|z| z - lse).collect()
        })
        .collect()
}

/// Mean `KL(p_θ₀ ‖ p_{θ₀+ετ})` over the batch against `½(ετ)ᵀF(ετ)` with
/// the full Fisher matrix at `θ₀`.
pub fn kl_quadratic_check(
    net: &Network,
    theta0: &ParamVector,
    tau: &[f64],
    data: &Batch,
    range: ClassRange,
    epsilons: &[f64],
) -> Result<KlTable> {
    if tau.len() != theta0.len() {
        return Err(Error::layout("displacement does not match θ₀"));
    }
    if data.is_empty() {
        return Err(Error::validation("KL check needs data"));
    }
    let fim = crate::fisher::full_fisher(net, theta0, data, range)?;
    let tft = bilinear(tau, &fim, tau);
    let lp0 = range_log_probs(&net.forward(theta0, &data.inputs)?, range);
    let mut rows = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let th = ParamVector::new(
            theta0.layout().clone(),
            theta0.values().iter().zip(tau).map(|(a, t)| a + eps * t).collect(),
        )?;
        let lp1 = range_log_probs(&net.forward(&th, &data.inputs)?, range);
        let mut kl = 0.0;
        for (a, b) in lp0.iter().zip(&lp1) {
            for (la, lb) in a.iter().zip(b) {
                kl += la.exp() * (la - lb);
            }
        }
        kl /= data.len() as f64;
        let quad = 0.5 * eps * eps * tft;
        let ratio = if quad == 0.0 { f64::NAN } else { kl / quad };
        rows.push(KlRow { eps, kl, quad, ratio });
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.eps > 0.0 && (r.kl - r.quad).abs() > 0.0)
        .map(|r| (r.eps.ln(), (r.kl - r.quad).abs().ln()))
        .collect();
    Ok(KlTable {
        rows,
        remainder_slope: fit_slope(&pts),
    })
}

/// Least-squares slope through `(x, y)` points (NaN with fewer than two).
pub fn fit_slope(pts: &[(f64, f64)]) -> f64 {
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Lower-triangular accuracy matrix: row `k` (0-based) holds the accuracy on
/// tasks `0..=k` after training task `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct AccMatrix {
    rows: Vec<Vec<f64>>,
}

impl TryFrom<Vec<Vec<f64>>> for AccMatrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(rows)
    }
}

impl From<AccMatrix> for Vec<Vec<f64>> {
    fn from(m: AccMatrix) -> Self {
        m.rows
    }
}

impl AccMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (k, r) in rows.iter().enumerate() {
            if r.len() != k + 1 {
                return Err(Error::validation(format!("accuracy row {} has {} entries", k + 1, r.len())));
            }
            if r.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::validation(format!("accuracy row {} leaves [0, 1]", k + 1)));
            }
        }
        Ok(Self { rows })
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    /// `a[k][t]`, both 0-based, `t ≤ k`.
    pub fn get(&self, k: usize, t: usize) -> f64 {
        self.rows[k][t]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn last_row(&self) -> &[f64] {
        self.rows.last().map_or(&[], |r| r.as_slice())
    }
}

/// Weighted mean of the last row (weights are task sizes; uniform when
/// omitted).
pub fn final_accuracy(m: &AccMatrix, sizes: Option<&[f64]>) -> f64 {
    let last = m.last_row();
    match sizes {
        Some(w) => {
            let total: f64 = w.iter().sum();
            last.iter().zip(w).map(|(a, w)| a * w).sum::<f64>() / total
        }
        None => last.iter().sum::<f64>() / last.len() as f64,
    }
}

/// `1/(T−1) Σ_{t<T} [max_{k∈[t,T−1]} a[k][t] − a[T][t]]`; zero for one task.
pub fn final_forgetting(m: &AccMatrix) -> f64 {
    let big_t = m.tasks();
    if big_t < 2 {
        return 0.0;
    }
    let last = big_t - 1;
    let mut total = 0.0;
    for t in 0..last {
        let best = (t..last).map(|k| m.get(k, t)).fold(f64::NEG_INFINITY, f64::max);
        total += best - m.get(last, t);
    }
    total / last as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub per_task: Vec<f64>,
    pub mean: f64,
    pub composed: f64,
}

/// Cosine similarity between corresponding task vectors of two pools and
/// between their composed displacements. Zero vectors give NaN.
pub fn alignment(a: &PoolState, b: &PoolState) -> Result<Alignment> {
    if a.theta0().layout() != b.theta0().layout() {
        return Err(Error::layout("pools have different layouts"));
    }
    if a.count() != b.count() {
        return Err(Error::validation("pools hold different numbers of vectors"));
    }
    let per_task = (1..=a.count())
        .map(|t| Ok(cosine(a.materialized(t)?, b.materialized(t)?)))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_task.iter().sum::<f64>() / per_task.len() as f64;
    let disp = |p: &PoolState| -> Result<Vec<f64>> {
        let c = p.compose(None)?;
        Ok(c.values().iter().zip(p.theta0().values()).map(|(x, y)| x - y).collect())
    };
    Ok(Alignment {
        per_task,
        mean,
        composed: cosine(&disp(a)?, &disp(b)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(h: f64) -> QuadraticProxy {
        QuadraticProxy::new(0.0, vec![0.0], Curvature::Dense(Matrix::from_rows(&[vec![h]]))).unwrap()
    }

    #[test]
    fn proxy_examples() {
        let q = QuadraticProxy::new(1.5, vec![0.0, 0.0], Curvature::Dense(Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]))).unwrap();
        assert_eq!(proxy_eval(&q, &[0.0, 0.0]).unwrap(), 1.5);
        assert_eq!(proxy_eval(&q, &[1.0, 0.0]).unwrap(), 2.5);
    }

    #[test]
    fn two_learner_hand_example() {
        let q = scalar(2.0);
        let (a, b) = ([1.0], [-1.0]);
        let taus: [&[f64]; 2] = [&a, &b];
        let c = composition(&q, &taus, &[0.5, 0.5]).unwrap();
        assert_eq!(c.composed, 0.0);
        assert_eq!(c.mean_individual, 1.0);
        assert_eq!(c.omega, 1.0);
        assert_eq!(theorem1_residual(&q, &taus, &[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(jensen_gap(&q, &taus, &[0.5, 0.5]).unwrap(), JensenGap::Value(1.0));
        let same: [&[f64]; 2] = [&a, &a];
        assert_eq!(jensen_gap(&q, &same, &[0.5, 0.5]).unwrap(), JensenGap::Value(0.0));
        assert_eq!(jensen_gap(&scalar(-1.0), &taus, &[0.5, 0.5]).unwrap(), JensenGap::Inapplicable);
    }

    #[test]
    fn metrics_examples() {
        let ones = AccMatrix::new(vec![vec![1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(final_accuracy(&ones, None), 1.0);
        assert_eq!(final_forgetting(&ones), 0.0);
        let m = AccMatrix::new(vec![vec![0.9], vec![0.7, 0.6]]).unwrap();
        assert!((final_accuracy(&AccMatrix::new(vec![vec![0.8], vec![0.8, 0.6]]).unwrap(), None) - 0.7).abs() < 1e-15);
        assert!((final_accuracy(&AccMatrix::new(vec![vec![0.8], vec![0.8, 0.6]]).unwrap(), Some(&[100.0, 300.0])) - 0.65).abs() < 1e-15);
        assert!((final_forgetting(&m) - 0.2).abs() < 1e-15);
        // max(0.9, 0.8) - 0.5 = 0.4 and 0.7 - 0.6 = 0.1, averaged.
        let m3 = AccMatrix::new(vec![vec![0.9], vec![0.8, 0.7], vec![0.5, 0.6, 0.9]]).unwrap();
        assert!((final_forgetting(&m3) - 0.25).abs() < 1e-15);
        assert_eq!(final_forgetting(&AccMatrix::new(vec![vec![0.3]]).unwrap()), 0.0);
        assert!(AccMatrix::new(vec![vec![1.2]]).is_err());
        assert!(AccMatrix::new(vec![vec![0.2, 0.3]]).is_err());
    }

    #[test]
    fn fit_slope_of_a_line() {
        let pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 3.0 * i as f64 - 1.0)).collect();
        assert!((fit_slope(&pts) - 3.0).abs() < 1e-12);
    }
}
