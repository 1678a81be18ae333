//! The pool of task vectors around a shared base `θ₀`, weight-space
//! composition, and zero-shot edits (specialization, unlearning).
//!
//! The pool keeps a running sum of the materialized displacements so the
//! uniform composition and the per-task training base are available without
//! touching every stored vector.

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::task_vector::TaskVector;

/// Tolerance on `Σ w = 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum UnlearnMode {
    /// Recompose the remaining vectors with uniform weights `1/(T-1)`.
    #[default]
    Renormalize,
    /// `θ_P − τ_target / T`, leaving the remaining weights at `1/T`.
    Subtract,
}

#[derive(Clone, Debug)]
pub struct PoolState {
    theta0: ParamVector,
    vectors: Vec<TaskVector>,
    materialized: Vec<Vec<f64>>,
    weights: Option<Vec<f64>>,
    cum_sum: Vec<f64>,
}

pub(crate) fn validate_weights(w: &[f64], count: usize) -> Result<()> {
    if w.len() != count {
        return Err(Error::validation(format!(
            "{} weights given for {count} task vectors",
            w.len()
        )));
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation("composition weights must be finite"));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::validation(format!(
            "composition weights sum to {s}, expected 1"
        )));
    }
    Ok(())
}

impl PoolState {
    pub fn new(theta0: ParamVector) -> Self {
        let n = theta0.len();
        Self {
            theta0,
            vectors: Vec::new(),
            materialized: Vec::new(),
            weights: None,
            cum_sum: vec![0.0; n],
        }
    }

    /// Rebuilds a pool from stored parts, replaying the cumulative sum in
    /// insertion order.
    pub fn from_parts(theta0: ParamVector, vectors: Vec<TaskVector>, weights: Option<Vec<f64>>) -> Result<Self> {
        let mut pool = Self::new(theta0);
        for v in vectors {
            pool.push(v)?;
        }
        pool.set_weights(weights)?;
        Ok(pool)
    }

    pub fn theta0(&self) -> &ParamVector {
        &self.theta0
    }

    pub fn vectors(&self) -> &[TaskVector] {
        &self.vectors
    }

    pub fn count(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Cached `Σ_t materialize(τ_t)`, laid out like `θ₀`.
    pub fn cum_sum(&self) -> &[f64] {
        &self.cum_sum
    }

    /// Dense displacement of task `task` (1-based).
    pub fn materialized(&self, task: usize) -> Result<&[f64]> {
        self.check_id(task)?;
        Ok(&self.materialized[task - 1])
    }

    pub fn stored_weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Effective composition weights (uniform unless overridden).
    pub fn weights(&self) -> Vec<f64> {
        match &self.weights {
            Some(w) => w.clone(),
            None => vec![1.0 / self.count() as f64; self.count()],
        }
    }

    pub fn set_weights(&mut self, weights: Option<Vec<f64>>) -> Result<()> {
        if let Some(w) = &weights {
            validate_weights(w, self.count())?;
        }
        self.weights = weights;
        Ok(())
    }

    /// Replaces `θ₀` with a value whose layout extends the current one (new
    /// heads, re-tuned head values). Stored displacements are zero-padded and
    /// rematerialized.
    pub fn set_theta0(&mut self, theta0: ParamVector) -> Result<()> {
        if !self.theta0.layout().is_prefix_of(theta0.layout()) {
            return Err(Error::layout("new base layout must extend the current one"));
        }
        self.theta0 = theta0;
        let n = self.theta0.len();
        self.cum_sum = vec![0.0; n];
        for (i, tv) in self.vectors.iter().enumerate() {
            let mut m = vec![0.0; n];
            tv.materialize_into(self.theta0.values(), &mut m);
            for (c, x) in self.cum_sum.iter_mut().zip(&m) {
                *c += x;
            }
            self.materialized[i] = m;
        }
        Ok(())
    }

    /// Appends a frozen task vector. Any custom weights are dropped.
    pub fn push(&mut self, tv: TaskVector) -> Result<()> {
        let m = tv.materialize(&self.theta0)?.into_values();
        for (c, x) in self.cum_sum.iter_mut().zip(&m) {
            *c += x;
        }
        self.materialized.push(m);
        self.vectors.push(tv);
        self.weights = None;
        Ok(())
    }

    fn check_id(&self, task: usize) -> Result<()> {
        if task == 0 || task > self.count() {
            return Err(Error::validation(format!(
                "task id {task} not in pool of {} vectors",
                self.count()
            )));
        }
        Ok(())
    }

    fn with_values(&self, values: Vec<f64>) -> ParamVector {
        ParamVector::from_raw(self.theta0.layout().clone(), values)
    }

    /// `θ₀ + Σ w_t τ_t`. With no weights given, the pool's own weights are
    /// used; uniform weights go through the cached sum.
    pub fn compose(&self, weights: Option<&[f64]>) -> Result<ParamVector> {
        if self.is_empty() {
            return Ok(self.theta0.clone());
        }
        let w = match weights.or(self.weights.as_deref()) {
            None => {
                let inv_t = self.count() as f64;
                let out = self
                    .theta0
                    .values()
                    .iter()
                    .zip(&self.cum_sum)
                    .map(|(a, s)| a + s / inv_t)
                    .collect();
                return Ok(self.with_values(out));
            }
            Some(w) => w,
        };
        validate_weights(w, self.count())?;
        let mut out = self.theta0.values().to_vec();
        for (wt, m) in w.iter().zip(&self.materialized) {
            crate::linalg::axpy(*wt, m, &mut out);
        }
        Ok(self.with_values(out))
    }

    /// Base for training task `t = count + 1`: `θ₀ + (1/t) Σ_{t'<t} τ_{t'}`.
    pub fn cumulative_base(&self, t: usize) -> Result<ParamVector> {
        if t != self.count() + 1 {
            return Err(Error::validation(format!(
                "cumulative base requested for task {t} with {} frozen vectors",
                self.count()
            )));
        }
        let tf = t as f64;
        let out = self
            .theta0
            .values()
            .iter()
            .zip(&self.cum_sum)
            .map(|(a, s)| a + s / tf)
            .collect();
        Ok(self.with_values(out))
    }

    /// Same quantity as [`Self::cumulative_base`], summed from the stored
    /// vectors instead of the cache (same summation order).
    pub fn cumulative_base_explicit(&self, t: usize) -> Result<ParamVector> {
        if t != self.count() + 1 {
            return Err(Error::validation("explicit base must target the next task"));
        }
        let sum = self.explicit_sum();
        let tf = t as f64;
        let out = self
            .theta0
            .values()
            .iter()
            .zip(&sum)
            .map(|(a, s)| a + s / tf)
            .collect();
        Ok(self.with_values(out))
    }

    /// `Σ_t materialize(τ_t)` recomputed from the stored vectors.
    pub fn explicit_sum(&self) -> Vec<f64> {
        let n = self.theta0.len();
        let mut sum = vec![0.0; n];
        let mut m = vec![0.0; n];
        for tv in &self.vectors {
            m.iter_mut().for_each(|x| *x = 0.0);
            tv.materialize_into(self.theta0.values(), &mut m);
            for (s, x) in sum.iter_mut().zip(&m) {
                *s += x;
            }
        }
        sum
    }

    /// Uniform composition over a subset of task ids (1-based).
    pub fn edit_specialize(&self, subset: &[usize]) -> Result<ParamVector> {
        let mut ids = subset.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            return Err(Error::validation("specialization subset is empty"));
        }
        for &t in &ids {
            self.check_id(t)?;
        }
        let inv = 1.0 / ids.len() as f64;
        let mut out = self.theta0.values().to_vec();
        for &t in &ids {
            crate::linalg::axpy(inv, &self.materialized[t - 1], &mut out);
        }
        Ok(self.with_values(out))
    }

    /// Removes task `target` from the composition.
    pub fn edit_unlearn(&self, target: usize, mode: UnlearnMode) -> Result<ParamVector> {
        self.check_id(target)?;
        if self.count() < 2 {
            return Err(Error::validation("cannot unlearn from a pool with a single vector"));
        }
        match mode {
            UnlearnMode::Renormalize => {
                let rest: Vec<usize> = (1..=self.count()).filter(|&t| t != target).collect();
                self.edit_specialize(&rest)
            }
            UnlearnMode::Subtract => {
                let mut out = self.compose(None)?.into_values();
                let w = self.weights()[target - 1];
                crate::linalg::axpy(-w, &self.materialized[target - 1], &mut out);
                Ok(self.with_values(out))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{EntryKind, LayoutEntry, ParamLayout};
    use std::sync::Arc;

    fn layout(n: usize) -> Arc<ParamLayout> {
        Arc::new(
            ParamLayout::new(vec![LayoutEntry::new("w", vec![n], EntryKind::BackboneBias)]).unwrap(),
        )
    }

    fn pv(l: &Arc<ParamLayout>, v: &[f64]) -> ParamVector {
        ParamVector::new(l.clone(), v.to_vec()).unwrap()
    }

    fn pool(theta0: &[f64], taus: &[&[f64]]) -> PoolState {
        let l = layout(theta0.len());
        let mut p = PoolState::new(pv(&l, theta0));
        for t in taus {
            p.push(TaskVector::dense(&pv(&l, t))).unwrap();
        }
        p
    }

    #[test]
    fn symmetric_average() {
        let p = pool(&[0.0, 0.0], &[&[2.0, 0.0], &[0.0, 2.0]]);
        assert_eq!(p.compose(None).unwrap().values(), &[1.0, 1.0]);
    }

    #[test]
    fn single_vector_identity() {
        let p = pool(&[1.0, -1.0], &[&[0.5, 0.25]]);
        assert_eq!(p.compose(Some(&[1.0])).unwrap().values(), &[1.5, -0.75]);
    }

    #[test]
    fn weighted_sum_by_hand() {
        let p = pool(&[1.0], &[&[3.0], &[1.0]]);
        let c = p.compose(Some(&[0.25, 0.75])).unwrap();
        assert!((c.values()[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn empty_pool_composes_to_theta0() {
        let p = pool(&[4.0, 5.0], &[]);
        assert_eq!(p.compose(None).unwrap().values(), &[4.0, 5.0]);
    }

    #[test]
    fn weights_must_sum_to_one() {
        let p = pool(&[0.0], &[&[1.0], &[2.0]]);
        assert!(matches!(p.compose(Some(&[0.5, 0.6])), Err(Error::Validation(_))));
        assert!(p.compose(Some(&[1.0])).is_err());
    }

    #[test]
    fn cumulative_base_cases() {
        let p = pool(&[0.0], &[]);
        assert_eq!(p.cumulative_base(1).unwrap().values(), &[0.0]);
        let p = pool(&[1.0], &[&[4.0]]);
        assert_eq!(p.cumulative_base(2).unwrap().values(), &[3.0]);
        let p = pool(&[0.0], &[&[2.0], &[4.0]]);
        assert!((p.cumulative_base(3).unwrap().values()[0] - 2.0).abs() < 1e-15);
        assert!(p.cumulative_base(2).is_err());
    }

    #[test]
    fn specialize_cases() {
        let p = pool(&[0.0], &[&[2.0], &[10.0], &[4.0]]);
        assert_eq!(p.edit_specialize(&[1]).unwrap().values(), &[2.0]);
        assert_eq!(p.edit_specialize(&[1, 3]).unwrap().values(), &[3.0]);
        let all = p.edit_specialize(&[1, 2, 3]).unwrap();
        let c = p.compose(None).unwrap();
        assert!((all.values()[0] - c.values()[0]).abs() < 1e-14);
        assert!(p.edit_specialize(&[]).is_err());
        assert!(p.edit_specialize(&[4]).is_err());
    }

    #[test]
    fn unlearn_cases() {
        let p = pool(&[0.0, 0.0], &[&[2.0, 0.0], &[5.0, 5.0], &[0.0, 2.0]]);
        assert_eq!(p.edit_unlearn(2, UnlearnMode::Renormalize).unwrap().values(), &[1.0, 1.0]);
        let raw = p.edit_unlearn(2, UnlearnMode::Subtract).unwrap();
        assert!((raw.values()[0] - 2.0 / 3.0).abs() < 1e-15);
        let p2 = pool(&[1.0], &[&[3.0], &[3.0]]);
        assert_eq!(p2.edit_unlearn(2, UnlearnMode::Renormalize).unwrap().values(), &[4.0]);
        let p1 = pool(&[0.0], &[&[1.0]]);
        assert!(p1.edit_unlearn(1, UnlearnMode::Renormalize).is_err());
        assert!(p.edit_unlearn(0, UnlearnMode::Renormalize).is_err());
    }

    #[test]
    fn push_resets_custom_weights() {
        let mut p = pool(&[0.0], &[&[1.0], &[3.0]]);
        p.set_weights(Some(vec![0.25, 0.75])).unwrap();
        p.push(TaskVector::dense(&pv(&layout(1), &[5.0]))).unwrap();
        assert!(p.stored_weights().is_none());
        assert!(p.set_weights(Some(vec![0.5, 0.5])).is_err());
    }
}
