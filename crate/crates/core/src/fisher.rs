//! Diagonal true-Fisher estimation at `θ₀` and its running accumulation
//! across tasks.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Batch, ClassRange, Network, HESSIAN_MAX_PARAMS};
use crate::params::{ParamLayout, ParamVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccumulateMode {
    /// Sample-weighted running mean.
    #[default]
    WeightedMean,
    /// Plain sum of the local estimates.
    Sum,
}

/// Per-parameter nonnegative importance laid out like `θ₀`.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherDiagonal {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
    sample_count: u64,
}

impl FisherDiagonal {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let n = layout.total_len();
        Self {
            layout,
            values: vec![0.0; n],
            sample_count: 0,
        }
    }

    pub fn new(layout: Arc<ParamLayout>, values: Vec<f64>, sample_count: u64) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::layout("Fisher values do not match the layout"));
        }
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::validation(format!(
                "Fisher entry {i} is negative or non-finite"
            )));
        }
        Ok(Self {
            layout,
            values,
            sample_count,
        })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    /// Values zero-padded to `len` scalars (heads added after estimation).
    pub fn padded_values(&self, len: usize) -> Vec<f64> {
        crate::params::padded(&self.values, len)
    }

    /// The same estimate on a layout that extends this one.
    pub fn extended_to(&self, layout: &Arc<ParamLayout>) -> Result<Self> {
        if !self.layout.is_prefix_of(layout) {
            return Err(Error::layout("Fisher layout is not a prefix of the target layout"));
        }
        Ok(Self {
            layout: layout.clone(),
            values: self.padded_values(layout.total_len()),
            sample_count: self.sample_count,
        })
    }
}

/// `E_x E_{y∼p_θ₀(y|x)} [(∇ log p_θ₀(y|x))²]`, enumerating every class in
/// `range` and averaging over the dataset.
pub fn local_fisher(net: &Network, theta0: &ParamVector, data: &Batch, range: ClassRange) -> Result<FisherDiagonal> {
    if data.is_empty() {
        return Err(Error::validation("local Fisher needs a nonempty dataset"));
    }
    let mut acc = vec![0.0; theta0.len()];
    net.for_each_label_grad(theta0, data, range, |_, p, g| {
        for (a, gi) in acc.iter_mut().zip(g) {
            *a += p * gi * gi;
        }
    })?;
    let inv = 1.0 / data.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    FisherDiagonal::new(theta0.layout().clone(), acc, data.len() as u64)
}

/// Full Fisher matrix `E_x Σ_y p_y ∇log p_y ∇log p_yᵀ` (small networks
/// only).
pub fn full_fisher(net: &Network, theta0: &ParamVector, data: &Batch, range: ClassRange) -> Result<Matrix> {
    let n = theta0.len();
    if n > HESSIAN_MAX_PARAMS {
        return Err(Error::Capacity {
            len: n,
            limit: HESSIAN_MAX_PARAMS,
        });
    }
    if data.is_empty() {
        return Err(Error::validation("Fisher matrix needs a nonempty dataset"));
    }
    let mut m = Matrix::zeros(n, n);
    net.for_each_label_grad(theta0, data, range, |_, p, g| {
        for i in 0..n {
            let pgi = p * g[i];
            if pgi == 0.0 {
                continue;
            }
            let row = m.row_mut(i);
            for j in 0..n {
                row[j] += pgi * g[j];
            }
        }
    })?;
    let inv = 1.0 / data.len() as f64;
    m.data.iter_mut().for_each(|v| *v *= inv);
    Ok(m)
}

/// Folds a task's local estimate (from `n_t` samples) into the global one.
///
/// The global layout may be a prefix of the local one; entries present only
/// in the local estimate take the local value.
pub fn accumulate(global: &FisherDiagonal, local: &FisherDiagonal, n_t: u64, mode: AccumulateMode) -> Result<FisherDiagonal> {
    if !global.layout.is_prefix_of(&local.layout) {
        return Err(Error::layout("global Fisher layout conflicts with the local one"));
    }
    let shared = global.values.len();
    let big_n = global.sample_count as f64;
    let n = n_t as f64;
    let mut values = local.values.clone();
    match mode {
        AccumulateMode::WeightedMean => {
            if global.sample_count > 0 {
                let denom = big_n + n;
                for (v, g) in values[..shared].iter_mut().zip(&global.values) {
                    *v = (big_n * g + n * *v) / denom;
                }
            }
        }
        AccumulateMode::Sum => {
            for (v, g) in values[..shared].iter_mut().zip(&global.values) {
                *v += g;
            }
        }
    }
    Ok(FisherDiagonal {
        layout: local.layout.clone(),
        values,
        sample_count: global.sample_count + n_t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, NetSpec};
    use crate::params::{EntryKind, LayoutEntry};

    fn flat(n: usize) -> Arc<ParamLayout> {
        Arc::new(ParamLayout::new(vec![LayoutEntry::new("w", vec![n], EntryKind::BackboneBias)]).unwrap())
    }

    fn fd(v: &[f64], n: u64) -> FisherDiagonal {
        FisherDiagonal::new(flat(v.len()), v.to_vec(), n).unwrap()
    }

    #[test]
    fn accumulate_into_empty_returns_local() {
        let g = FisherDiagonal::zeros(flat(2));
        let l = fd(&[0.5, 2.0], 10);
        let out = accumulate(&g, &l, 10, AccumulateMode::WeightedMean).unwrap();
        assert_eq!(out, l);
    }

    #[test]
    fn accumulating_identical_locals_keeps_values() {
        let l = fd(&[0.5, 2.0], 7);
        let g = accumulate(&FisherDiagonal::zeros(flat(2)), &l, 7, AccumulateMode::WeightedMean).unwrap();
        let g2 = accumulate(&g, &l, 7, AccumulateMode::WeightedMean).unwrap();
        assert_eq!(g2.values(), l.values());
        assert_eq!(g2.sample_count(), 14);
    }

    #[test]
    fn weighted_mean_by_hand() {
        let a = fd(&[1.0], 100);
        let b = fd(&[3.0], 300);
        let g = accumulate(&FisherDiagonal::zeros(flat(1)), &a, 100, AccumulateMode::WeightedMean).unwrap();
        let g = accumulate(&g, &b, 300, AccumulateMode::WeightedMean).unwrap();
        assert!((g.values()[0] - 2.5).abs() < 1e-15);
        let s = accumulate(&a, &b, 300, AccumulateMode::Sum).unwrap();
        assert_eq!(s.values(), &[4.0]);
    }

    #[test]
    fn new_head_entries_take_local_values() {
        let short = flat(2);
        let mut long = (*short).clone();
        long.push(LayoutEntry::new("head1.bias", vec![1], EntryKind::HeadBias(1))).unwrap();
        let g = FisherDiagonal::new(short, vec![1.0, 1.0], 10).unwrap();
        let l = FisherDiagonal::new(Arc::new(long), vec![3.0, 3.0, 5.0], 10).unwrap();
        let out = accumulate(&g, &l, 10, AccumulateMode::WeightedMean).unwrap();
        assert_eq!(out.values(), &[2.0, 2.0, 5.0]);
        assert!(accumulate(&l, &g, 10, AccumulateMode::WeightedMean).is_err());
    }

    #[test]
    fn negative_entries_rejected() {
        assert!(FisherDiagonal::new(flat(1), vec![-1e-3], 1).is_err());
    }

    #[test]
    fn symmetric_logistic_fisher_at_zero() {
        // Two classes, linear model at θ = 0: p = ½ and the head-weight
        // Fisher is p(1-p) x² = ¼ x² per coordinate, averaged over samples.
        let spec = NetSpec {
            input_dim: 2,
            hidden: vec![],
            activation: Activation::Tanh,
            head_dims: vec![2],
        };
        let (net, theta) = spec.init(0).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]);
        let data = Batch::new(x, vec![0, 1]).unwrap();
        let f = local_fisher(&net, &theta, &data, ClassRange::new(0, 2).unwrap()).unwrap();
        let mean_sq = [(1.0 + 9.0) / 2.0, (4.0 + 0.25) / 2.0];
        let w = f.values();
        for c in 0..2 {
            for j in 0..2 {
                assert!((w[c * 2 + j] - 0.25 * mean_sq[j]).abs() < 1e-15);
            }
            assert!((w[4 + c] - 0.25).abs() < 1e-15);
        }
        assert!(local_fisher(&net, &theta, &Batch::new(Matrix::zeros(0, 2), vec![]).unwrap(), ClassRange::new(0, 2).unwrap()).is_err());
    }
}
