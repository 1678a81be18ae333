//! Per-class diagonal Gaussian mixtures over backbone features, used to
//! synthesize features of past classes for classifier alignment.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, Matrix};

pub const EM_ITERS: usize = 25;
pub const VAR_FLOOR: f64 = 1e-6;

/// A diagonal-covariance mixture for one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mog {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
}

/// Result of [`fit_mog`]: the mixture and the mean log-likelihood after
/// each EM iteration.
#[derive(Clone, Debug)]
pub struct MogFit {
    pub mog: Mog,
    pub log_likelihood: Vec<f64>,
}

impl Mog {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    fn component_log_density(&self, k: usize, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((xi, m), v) in x.iter().zip(&self.means[k]).zip(&self.vars[k]) {
            let d = xi - m;
            s += d * d / v + v.ln();
        }
        -0.5 * (s + x.len() as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.components())
            .map(|k| self.weights[k].ln() + self.component_log_density(k, x))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn mean_log_likelihood(&self, x: &Matrix) -> f64 {
        (0..x.rows).map(|i| self.log_density(x.row(i))).sum::<f64>() / x.rows as f64
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Matrix {
        let d = self.dim();
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            let u: f64 = rng.random();
            let mut k = 0;
            let mut acc = self.weights[0];
            while u >= acc && k + 1 < self.components() {
                k += 1;
                acc += self.weights[k];
            }
            let row = out.row_mut(i);
            for j in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                row[j] = self.means[k][j] + self.vars[k][j].sqrt() * z;
            }
        }
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first center uniform, the rest proportional to the
/// squared distance to the nearest chosen center.
fn seed_centers<R: Rng + ?Sized>(x: &Matrix, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = x.rows;
    let mut centers = vec![x.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = x.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), &c));
        }
        centers.push(c);
    }
    centers
}

/// Diagonal EM for a fixed number of iterations. `k` is clamped to the
/// number of samples.
pub fn fit_mog<R: Rng + ?Sized>(x: &Matrix, k: usize, iters: usize, rng: &mut R) -> Result<MogFit> {
    if x.rows == 0 || x.cols == 0 {
        return Err(Error::validation("cannot fit a mixture to an empty sample"));
    }
    if k == 0 {
        return Err(Error::validation("a mixture needs at least one component"));
    }
    let k = k.min(x.rows);
    let (n, d) = (x.rows, x.cols);
    let mut global_var = vec![0.0; d];
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64).collect();
    for i in 0..n {
        for j in 0..d {
            let e = x.get(i, j) - mean[j];
            global_var[j] += e * e / n as f64;
        }
    }
    let init_var: Vec<f64> = global_var.iter().map(|v| v.max(VAR_FLOOR)).collect();
    let mut mog = Mog {
        weights: vec![1.0 / k as f64; k],
        means: seed_centers(x, k, rng),
        vars: vec![init_var; k],
    };
    let mut resp = Matrix::zeros(n, k);
    let mut lls = Vec::with_capacity(iters);
    let mut terms = vec![0.0; k];
    for _ in 0..iters {
        for i in 0..n {
            let xi = x.row(i);
            for (c, t) in terms.iter_mut().enumerate() {
                *t = mog.weights[c].ln() + mog.component_log_density(c, xi);
            }
            let lse = log_sum_exp(&terms);
            for c in 0..k {
                resp.set(i, c, (terms[c] - lse).exp());
            }
        }
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp.get(i, c)).sum();
            if nk <= 1e-12 {
                // Dead component: keep its parameters, drop its weight.
                mog.weights[c] = 1e-300;
                continue;
            }
            mog.weights[c] = nk / n as f64;
            for j in 0..d {
                let mu = (0..n).map(|i| resp.get(i, c) * x.get(i, j)).sum::<f64>() / nk;
                let var = (0..n)
                    .map(|i| {
                        let e = x.get(i, j) - mu;
                        resp.get(i, c) * e * e
                    })
                    .sum::<f64>()
                    / nk;
                mog.means[c][j] = mu;
                mog.vars[c][j] = var.max(VAR_FLOOR);
            }
        }
        let s: f64 = mog.weights.iter().sum();
        mog.weights.iter_mut().for_each(|w| *w /= s);
        lls.push(mog.mean_log_likelihood(x));
    }
    Ok(MogFit {
        mog,
        log_likelihood: lls,
    })
}

/// Mixtures indexed by global class id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MogStore {
    classes: Vec<Option<Mog>>,
}

impl MogStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, class: usize, mog: Mog) {
        if self.classes.len() <= class {
            self.classes.resize(class + 1, None);
        }
        self.classes[class] = Some(mog);
    }

    pub fn get(&self, class: usize) -> Option<&Mog> {
        self.classes.get(class).and_then(Option::as_ref)
    }

    /// Classes with a fitted mixture, ascending.
    pub fn classes(&self) -> Vec<usize> {
        (0..self.classes.len()).filter(|&c| self.classes[c].is_some()).collect()
    }

    /// `n` synthetic features per stored class, rows grouped by class.
    pub fn sample_all<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Matrix, Vec<usize>) {
        let classes = self.classes();
        let d = classes.first().map_or(0, |&c| self.get(c).expect("present").dim());
        let mut data = Vec::with_capacity(classes.len() * n * d);
        let mut labels = Vec::with_capacity(classes.len() * n);
        for c in classes {
            let s = self.get(c).expect("present").sample(n, rng);
            data.extend_from_slice(&s.data);
            labels.extend(std::iter::repeat_n(c, n));
        }
        (Matrix::from_vec(labels.len(), d, data), labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_component_is_the_mle() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 2.0], vec![2.0, 7.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fit = fit_mog(&x, 1, EM_ITERS, &mut rng).unwrap();
        let m = &fit.mog;
        assert!((m.means[0][0] - 2.0).abs() < 1e-12);
        assert!((m.means[0][1] - 3.0).abs() < 1e-12);
        assert!((m.vars[0][0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.vars[0][1] - 26.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.weights, vec![1.0]);
    }

    #[test]
    fn k_clamped_to_sample_count() {
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fit = fit_mog(&x, 5, 3, &mut rng).unwrap();
        assert_eq!(fit.mog.components(), 2);
        assert!(fit.mog.vars.iter().flatten().all(|&v| v >= VAR_FLOOR));
    }

    #[test]
    fn sample_store_groups_by_class() {
        let mut store = MogStore::new();
        let m = Mog {
            weights: vec![1.0],
            means: vec![vec![5.0]],
            vars: vec![vec![1e-6]],
        };
        store.insert(3, m.clone());
        store.insert(1, m);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, y) = store.sample_all(4, &mut rng);
        assert_eq!(y, vec![1, 1, 1, 1, 3, 3, 3, 3]);
        assert!((0..x.rows).all(|i| (x.get(i, 0) - 5.0).abs() < 0.01));
    }
}
