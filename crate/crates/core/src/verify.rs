//! Randomized property suites for the second-order identities, gradients,
//! Fisher estimates and pool arithmetic. Every instance draws from its own
//! derived seed, so reports are reproducible regardless of thread count.

use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    composition, eq14_residual, jensen_gap, kl_quadratic_check, theorem1_residual, Curvature, JensenGap,
    QuadraticProxy,
};
use crate::data::{derive_seed, gen_blobs, BlobSpec};
use crate::error::{Error, Result};
use crate::fisher::{accumulate, full_fisher, local_fisher, AccumulateMode, FisherDiagonal};
use crate::linalg::{norm_inf, rel_err, Matrix};
use crate::nn::{local_cross_entropy, Activation, Batch, ClassRange, NetSpec, Network};
use crate::params::{ParamLayout, ParamVector};
use crate::pool::{PoolState, UnlearnMode};
use crate::regularizers::{ewc_grad, ewc_penalty, omega_grad_current, omega_pairwise, omega_value};
use crate::task_vector::{TaskVector, Variant};
use crate::trainer::{run_sequence, train_task_iel, Algo, BaseMode, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Theorem1,
    Jensen,
    Gradients,
    Fisher,
    Kl,
    O1,
    OmegaForms,
    Masking,
    Determinism,
    Linearity,
    Accumulation,
    All,
}

impl Suite {
    pub const EACH: [Suite; 11] = [
        Suite::Theorem1,
        Suite::Jensen,
        Suite::Gradients,
        Suite::Fisher,
        Suite::Kl,
        Suite::O1,
        Suite::OmegaForms,
        Suite::Masking,
        Suite::Determinism,
        Suite::Linearity,
        Suite::Accumulation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Theorem1 => "theorem1",
            Suite::Jensen => "jensen",
            Suite::Gradients => "gradients",
            Suite::Fisher => "fisher",
            Suite::Kl => "kl",
            Suite::O1 => "o1",
            Suite::OmegaForms => "omega-forms",
            Suite::Masking => "masking",
            Suite::Determinism => "determinism",
            Suite::Linearity => "linearity",
            Suite::Accumulation => "accumulation",
            Suite::All => "all",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::EACH
            .iter()
            .chain(std::iter::once(&Suite::All))
            .copied()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown suite {s:?}")))
    }
}

/// Whether `max_residual` must stay below or above `tolerance`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    Upper,
    Lower,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub instances: usize,
    /// Worst value over the instances (largest for an upper bound, smallest
    /// for a lower bound).
    pub max_residual: f64,
    pub tolerance: f64,
    pub bound: Bound,
    pub pass: bool,
    pub worst_seed: u64,
    /// Per-instance values, in instance order.
    pub residuals: Vec<f64>,
    /// Per-instance seeds, aligned with `residuals`.
    pub seeds: Vec<u64>,
}

fn report(check: &str, seeds: &[u64], values: Vec<f64>, tol: f64, bound: Bound) -> CheckReport {
    let badness = |v: f64| -> f64 {
        if v.is_nan() {
            f64::INFINITY
        } else {
            match bound {
                Bound::Upper => v,
                Bound::Lower => -v,
            }
        }
    };
    let worst = (0..values.len())
        .max_by(|&a, &b| badness(values[a]).total_cmp(&badness(values[b])))
        .unwrap_or(0);
    let worst_v = values.get(worst).copied().unwrap_or(f64::NAN);
    let pass = !values.is_empty()
        && values.iter().all(|&v| match bound {
            Bound::Upper => v <= tol,
            Bound::Lower => v >= tol,
        });
    CheckReport {
        check: check.to_string(),
        instances: values.len(),
        max_residual: worst_v,
        tolerance: tol,
        bound,
        pass,
        worst_seed: seeds.get(worst).copied().unwrap_or(0),
        residuals: values,
        seeds: seeds.to_vec(),
    }
}

/// Runs `f` on `n` derived seeds in parallel and collects results in order.
fn instances<F>(seed: u64, tag: u64, n: usize, f: F) -> Result<(Vec<u64>, Vec<f64>)>
where
    F: Fn(u64) -> Result<f64> + Sync,
{
    let base = derive_seed(seed, tag);
    let seeds: Vec<u64> = (0..n as u64).map(|i| derive_seed(base, i)).collect();
    let values = seeds.par_iter().map(|&s| f(s)).collect::<Result<Vec<_>>>()?;
    Ok((seeds, values))
}

fn check<F>(name: &str, seed: u64, tag: u64, n: usize, tol: f64, bound: Bound, f: F) -> Result<CheckReport>
where
    F: Fn(u64) -> Result<f64> + Sync,
{
    let (seeds, values) = instances(seed, tag, n, f)?;
    Ok(report(name, &seeds, values, tol, bound))
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| { let z: f64 = StandardNormal.sample(rng); std * z }).collect()
}

fn random_symmetric<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Matrix {
    let mut m = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let v: f64 = StandardNormal.sample(rng);
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    m
}

fn random_psd<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Matrix {
    let b = Matrix::from_vec(d, d, normal_vec(rng, d * d, 1.0));
    let mut m = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            m.set(i, j, crate::linalg::dot(b.row(i), b.row(j)) / d as f64);
        }
    }
    m
}

fn random_weights<R: Rng + ?Sized>(rng: &mut R, t: usize) -> Vec<f64> {
    if rng.random_bool(0.5) {
        return vec![1.0 / t as f64; t];
    }
    let raw: Vec<f64> = (0..t).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|x| x / s).collect();
    // Put the rounding slack on the last weight.
    let head: f64 = w[..t - 1].iter().sum();
    w[t - 1] = 1.0 - head;
    w
}

struct QuadInstance {
    q: QuadraticProxy,
    taus: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl QuadInstance {
    fn refs(&self) -> Vec<&[f64]> {
        self.taus.iter().map(Vec::as_slice).collect()
    }
}

fn quad_instance(seed: u64, psd: bool) -> QuadInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=50);
    let t = [2, 3, 5][rng.random_range(0..3)];
    let h = if psd { random_psd(&mut rng, d) } else { random_symmetric(&mut rng, d) };
    let q = QuadraticProxy::new(rng.random_range(0.0..3.0), normal_vec(&mut rng, d, 1.0), Curvature::Dense(h))
        .expect("square");
    let taus = (0..t).map(|_| normal_vec(&mut rng, d, 1.0)).collect();
    let weights = random_weights(&mut rng, t);
    QuadInstance { q, taus, weights }
}

fn theorem1_checks(seed: u64) -> Result<Vec<CheckReport>> {
    let exact = check("theorem1-residual", seed, 11, 100, 1e-9, Bound::Upper, |s| {
        let inst = quad_instance(s, false);
        let c = composition(&inst.q, &inst.refs(), &inst.weights)?;
        Ok(theorem1_residual(&inst.q, &inst.refs(), &inst.weights)? / c.mean_individual.abs().max(1.0))
    })?;
    let eq14 = check("eq14-identity", seed, 12, 100, 1e-10, Bound::Upper, |s| {
        let inst = quad_instance(s, false);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, 1));
        let d = inst.q.dim();
        let diag: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..2.0)).collect();
        let q = QuadraticProxy::new(inst.q.loss0, inst.q.grad0.clone(), Curvature::Diagonal(diag))?;
        let beta = rng.random_range(0.0..1.0);
        let c = composition(&q, &inst.refs(), &inst.weights)?;
        Ok(eq14_residual(&q, &inst.refs(), &inst.weights, beta)? / (c.composed + beta * c.omega).abs().max(1.0))
    })?;
    Ok(vec![exact, eq14])
}

/// Linear-softmax network on overlapping blobs, trained by full-batch
/// gradient descent to (numerical) convergence.
pub fn toy_softmax(seed: u64) -> Result<(Network, ParamVector, Batch, ClassRange)> {
    let stream = gen_blobs(&BlobSpec {
        tasks: 1,
        classes_per_task: 3,
        dim: 4,
        samples_per_class: 20,
        spread: 1.2,
        mean_scale: 1.0,
        seed,
    })?;
    let task = &stream.tasks()[0];
    let spec = NetSpec {
        input_dim: 4,
        hidden: vec![],
        activation: Activation::Tanh,
        head_dims: vec![3],
    };
    let (net, mut theta) = spec.init(seed)?;
    for _ in 0..4000 {
        let (_, g) = net.loss_and_grad(&theta, &task.train, task.range)?;
        crate::linalg::axpy(-0.5, &g, theta.values_mut());
    }
    Ok((net, theta, task.train.clone(), task.range))
}

fn tiny_stream(seed: u64, tasks: usize) -> Result<crate::data::TaskStream> {
    gen_blobs(&BlobSpec {
        tasks,
        classes_per_task: 2,
        dim: 4,
        samples_per_class: 15,
        spread: 0.8,
        mean_scale: 1.0,
        seed,
    })
}

fn tiny_config(algo: Algo, variant: Variant, hidden: Vec<usize>, seed: u64) -> TrainConfig {
    TrainConfig {
        algo,
        variant,
        lr: 1e-2,
        epochs: 3,
        batch_size: 8,
        pre_epochs: 3,
        align_epochs: 2,
        mog_components: 2,
        mog_samples: 16,
        hidden,
        seed,
        ..TrainConfig::desk(algo, variant)
    }
}

fn jensen_checks(seed: u64) -> Result<Vec<CheckReport>> {
    let random = check("jensen-gap-psd", seed, 21, 100, -1e-10, Bound::Lower, |s| {
        let inst = quad_instance(s, true);
        match jensen_gap(&inst.q, &inst.refs(), &inst.weights)? {
            JensenGap::Value(g) => Ok(g),
            JensenGap::Inapplicable => Ok(f64::NAN),
        }
    })?;
    // Online bound along an actual ITA run on a convex (linear-softmax)
    // network, proxies from the exact Hessian at each pre-consolidated base.
    let online = check("jensen-online", seed, 22, 3, -1e-8, Bound::Lower, |s| {
        let stream = tiny_stream(s, 3)?;
        let cfg = tiny_config(Algo::Ita, Variant::Fft, vec![], s);
        let mut runner = crate::trainer::Runner::new(cfg, stream.input_dim())?;
        let mut worst = f64::INFINITY;
        for (t, task) in stream.tasks().iter().enumerate() {
            runner.step(task)?;
            let pool = runner.pool();
            if pool.count() < 2 {
                continue;
            }
            let seen: Vec<&Batch> = stream.tasks()[..=t].iter().map(|x| &x.train).collect();
            let data = Batch::concat(&seen);
            let all = ClassRange::new(0, stream.tasks()[t].range.end)?;
            let q = QuadraticProxy::exact(runner.network(), pool.theta0(), &data, all)?;
            let taus: Vec<&[f64]> = (1..=pool.count()).map(|i| pool.materialized(i)).collect::<Result<_>>()?;
            match jensen_gap(&q, &taus, &pool.weights())? {
                JensenGap::Value(g) => worst = worst.min(g),
                JensenGap::Inapplicable => return Ok(f64::NAN),
            }
        }
        Ok(worst)
    })?;
    Ok(vec![random, online])
}

fn omega_checks(seed: u64) -> Result<Vec<CheckReport>> {
    let forms = check("omega-two-forms", seed, 31, 100, 1e-10, Bound::Upper, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let d = rng.random_range(1..=50);
        let t = [2, 3, 5][rng.random_range(0..3)];
        let taus: Vec<Vec<f64>> = (0..t).map(|_| normal_vec(&mut rng, d, 1.0)).collect();
        let f: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..2.0)).collect();
        let w = random_weights(&mut rng, t);
        let refs: Vec<&[f64]> = taus.iter().map(Vec::as_slice).collect();
        let a = omega_value(&refs, &w, &f)?;
        let b = omega_pairwise(&refs, &w, &f)?;
        Ok(rel_err(a, b, 1e-300))
    })?;
    let aligned = check("omega-vanishes-when-aligned", seed, 32, 100, 1e-12, Bound::Upper, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let d = rng.random_range(1..=50);
        let t = [2, 3, 5][rng.random_range(0..3)];
        let taus: Vec<Vec<f64>> = (0..t).map(|_| normal_vec(&mut rng, d, 1.0)).collect();
        let f: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..2.0)).collect();
        let w = random_weights(&mut rng, t);
        let mut mean = vec![0.0; d];
        for tau in &taus {
            crate::linalg::axpy(1.0 / t as f64, tau, &mut mean);
        }
        let refs: Vec<&[f64]> = vec![mean.as_slice(); t];
        let before = omega_pairwise(&taus.iter().map(Vec::as_slice).collect::<Vec<_>>(), &w, &f)?;
        Ok(omega_value(&refs, &w, &f)?.abs() / before.max(1.0))
    })?;
    let nonneg = check("omega-nonnegative", seed, 33, 100, 0.0, Bound::Lower, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let d = rng.random_range(1..=50);
        let t = [2, 3, 5][rng.random_range(0..3)];
        let taus: Vec<Vec<f64>> = (0..t).map(|_| normal_vec(&mut rng, d, 1.0)).collect();
        let f: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..2.0)).collect();
        let w = random_weights(&mut rng, t);
        omega_pairwise(&taus.iter().map(Vec::as_slice).collect::<Vec<_>>(), &w, &f)
    })?;
    Ok(vec![forms, aligned, nonneg])
}

/// Small network with every parameter (heads included) random.
fn random_net(seed: u64) -> Result<(Network, ParamVector)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = NetSpec {
        input_dim: 3,
        hidden: vec![4, 3],
        activation: if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Gelu },
        head_dims: vec![2, 3],
    };
    let (net, theta) = spec.init(seed)?;
    let values = normal_vec(&mut rng, theta.len(), 0.7);
    Ok((net, ParamVector::new(theta.layout().clone(), values)?))
}

fn random_vector<R: Rng + ?Sized>(variant: Variant, layout: &Arc<ParamLayout>, rng: &mut R) -> Result<TaskVector> {
    let mut tv = TaskVector::new(variant, layout.clone(), rng)?;
    let noise = normal_vec(rng, tv.num_params(), 0.5);
    for (p, n) in tv.params_mut().iter_mut().zip(noise) {
        *p += n;
    }
    Ok(tv)
}

fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Central differences of `f` over every adapter parameter of `tv`.
fn fd_adapter<F>(tv: &TaskVector, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&TaskVector) -> Result<f64>,
{
    let mut probe = tv.clone();
    let mut g = vec![0.0; tv.num_params()];
    for i in 0..tv.num_params() {
        let x = tv.params()[i];
        let h = fd_step(x);
        probe.params_mut()[i] = x + h;
        let fp = f(&probe)?;
        probe.params_mut()[i] = x - h;
        let fm = f(&probe)?;
        probe.params_mut()[i] = x;
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm_inf(&diff) / norm_inf(a).max(norm_inf(b)).max(1e-8)
}

const GRAD_VARIANTS: [Variant; 5] = [
    Variant::Fft,
    Variant::Lora { rank: 1 },
    Variant::Lora { rank: 2 },
    Variant::Lora { rank: 4 },
    Variant::Ia3,
];

fn variant_label(v: Variant) -> String {
    match v {
        Variant::Lora { rank } => format!("lora{rank}"),
        other => other.name().to_string(),
    }
}

fn gradient_checks(seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for (vi, &variant) in GRAD_VARIANTS.iter().enumerate() {
        let ewc = check(
            &format!("ewc-grad-{}", variant_label(variant)),
            seed,
            400 + vi as u64,
            50,
            1e-5,
            Bound::Upper,
            |s| {
                let (_, theta0) = random_net(s)?;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, 1));
                let tv = random_vector(variant, theta0.layout(), &mut rng)?;
                let f: Vec<f64> = (0..theta0.len()).map(|_| rng.random_range(0.0..1.0)).collect();
                let fisher = FisherDiagonal::new(theta0.layout().clone(), f, 1)?;
                let analytic = ewc_grad(&tv, &fisher, &theta0)?;
                let numeric = fd_adapter(&tv, |p| Ok(0.5 * ewc_penalty(p, &fisher, &theta0)?))?;
                Ok(vec_rel_err(&analytic, &numeric))
            },
        )?;
        out.push(ewc);
        for (ki, k) in [1usize, 2, 3, 5].into_iter().enumerate() {
            let omega = check(
                &format!("omega-grad-{}-k{k}", variant_label(variant)),
                seed,
                500 + 10 * vi as u64 + ki as u64,
                50,
                1e-5,
                Bound::Upper,
                |s| {
                    let (_, theta0) = random_net(s)?;
                    let n = theta0.len();
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, 2));
                    let prev: Vec<Vec<f64>> = (1..k).map(|_| normal_vec(&mut rng, n, 0.5)).collect();
                    let mut sum_prev = vec![0.0; n];
                    for p in &prev {
                        crate::linalg::axpy(1.0, p, &mut sum_prev);
                    }
                    let tv = random_vector(variant, theta0.layout(), &mut rng)?;
                    let f: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
                    let fisher = FisherDiagonal::new(theta0.layout().clone(), f.clone(), 1)?;
                    let w = vec![1.0 / k as f64; k];
                    let analytic = omega_grad_current(&tv, &sum_prev, k, &fisher, &theta0)?;
                    let numeric = fd_adapter(&tv, |p| {
                        let m = p.materialize(&theta0)?;
                        let mut refs: Vec<&[f64]> = prev.iter().map(Vec::as_slice).collect();
                        refs.push(m.values());
                        omega_value(&refs, &w, &f)
                    })?;
                    Ok(vec_rel_err(&analytic, &numeric))
                },
            )?;
            out.push(omega);
        }
    }

    out.push(check("network-gradient", seed, 600, 20, 1e-6, Bound::Upper, |s| {
        let (net, theta) = random_net(s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, 3));
        let x = Matrix::from_vec(6, 3, normal_vec(&mut rng, 18, 1.0));
        let range = if rng.random_bool(0.5) { ClassRange::new(0, 2)? } else { ClassRange::new(2, 5)? };
        let labels = (0..6).map(|_| rng.random_range(range.start..range.end)).collect();
        let batch = Batch::new(x, labels)?;
        let (_, g) = net.loss_and_grad(&theta, &batch, range)?;
        let mut worst = 0.0f64;
        let mut probe = theta.clone();
        for _ in 0..20 {
            let i = rng.random_range(0..theta.len());
            let x0 = theta.values()[i];
            let h = fd_step(x0);
            probe.values_mut()[i] = x0 + h;
            let lp = net.loss(&probe, &batch, range)?;
            probe.values_mut()[i] = x0 - h;
            let lm = net.loss(&probe, &batch, range)?;
            probe.values_mut()[i] = x0;
            worst = worst.max(rel_err(g[i], (lp - lm) / (2.0 * h), 1e-3));
        }
        Ok(worst)
    })?);

    out.push(check("composed-loss-gradient", seed, 601, 20, 1e-6, Bound::Upper, |s| {
        // d/dτ ℓ(base + τ/t) equals (1/t)∇ℓ at the composed point.
        let (net, theta0) = random_net(s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, 4));
        let t = rng.random_range(1..=5) as f64;
        let n = theta0.len();
        let base: Vec<f64> = theta0.values().iter().zip(normal_vec(&mut rng, n, 0.1)).map(|(a, b)| a + b).collect();
        let tau = normal_vec(&mut rng, n, 0.3);
        let x = Matrix::from_vec(5, 3, normal_vec(&mut rng, 15, 1.0));
        let labels = (0..5).map(|_| rng.random_range(0..2)).collect();
        let batch = Batch::new(x, labels)?;
        let range = ClassRange::new(0, 2)?;
        let at = |tv: &[f64]| -> Result<ParamVector> {
            ParamVector::new(theta0.layout().clone(), base.iter().zip(tv).map(|(b, v)| b + v / t).collect())
        };
        let (_, g) = net.loss_and_grad(&at(&tau)?, &batch, range)?;
        let mut worst = 0.0f64;
        let mut probe = tau.clone();
        for _ in 0..20 {
            let i = rng.random_range(0..n);
            let h = fd_step(tau[i]);
            probe[i] = tau[i] + h;
            let lp = net.loss(&at(&probe)?, &batch, range)?;
            probe[i] = tau[i] - h;
            let lm = net.loss(&at(&probe)?, &batch, range)?;
            probe[i] = tau[i];
            worst = worst.max(rel_err(g[i] / t, (lp - lm) / (2.0 * h), 1e-3));
        }
        Ok(worst)
    })?);

    out.push(check("softmax-hessian-closed-form", seed, 602, 10, 1e-6, Bound::Upper, |s| {
        // One sample, linear softmax: H = (diag p − ppᵀ) ⊗ [x; 1][x; 1]ᵀ.
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (d, c) = (3, 3);
        let spec = NetSpec {
            input_dim: d,
            hidden: vec![],
            activation: Activation::Tanh,
            head_dims: vec![c],
        };
        let (net, theta) = spec.init(s)?;
        let theta = ParamVector::new(theta.layout().clone(), normal_vec(&mut rng, theta.len(), 1.0))?;
        let x = normal_vec(&mut rng, d, 1.0);
        let batch = Batch::new(Matrix::from_vec(1, d, x.clone()), vec![0])?;
        let range = ClassRange::new(0, c)?;
        let h = net.exact_hessian(&theta, &batch, range)?;
        let mut p = net.forward(&theta, &batch.inputs)?.row(0).to_vec();
        crate::linalg::softmax_in_place(&mut p);
        // Weight index (k, j) -> k*d + j, bias k -> c*d + k.
        let feat = |i: usize| -> (usize, f64) {
            if i < c * d {
                (i / d, x[i % d])
            } else {
                (i - c * d, 1.0)
            }
        };
        let mut worst = 0.0f64;
        for a in 0..theta.len() {
            for b in 0..theta.len() {
                let (ka, xa) = feat(a);
                let (kb, xb) = feat(b);
                let cov = if ka == kb { p[ka] * (1.0 - p[ka]) } else { -p[ka] * p[kb] };
                worst = worst.max(rel_err(h.get(a, b), cov * xa * xb, 1e-3));
            }
        }
        Ok(worst.max(h.asymmetry()))
    })?);
    Ok(out)
}

fn fisher_checks(seed: u64) -> Result<Vec<CheckReport>> {
    let diag = check("fisher-diagonal-vs-full", seed, 71, 5, 1e-8, Bound::Upper, |s| {
        let (net, theta) = random_net(s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, 5));
        let x = Matrix::from_vec(8, 3, normal_vec(&mut rng, 24, 1.0));
        let range = ClassRange::new(2, 5)?;
        let labels = (0..8).map(|_| rng.random_range(2..5)).collect();
        let batch = Batch::new(x, labels)?;
        let local = local_fisher(&net, &theta, &batch, range)?;
        let full = full_fisher(&net, &theta, &batch, range)?;
        Ok(vec_rel_err(local.values(), &full.diagonal()))
    })?;
    let hess = check("fisher-vs-hessian-at-minimum", seed, 72, 3, 1e-6, Bound::Upper, |s| {
        let (net, theta, data, range) = toy_softmax(s)?;
        let f = local_fisher(&net, &theta, &data, range)?;
        let h = net.exact_hessian(&theta, &data, range)?;
        Ok(vec_rel_err(f.values(), &h.diagonal()))
    })?;
    let mc = check("fisher-exact-vs-monte-carlo-sigma", seed, 73, 3, 3.0, Bound::Upper, |s| {
        // 10⁴ label draws. Reports the larger of the trace z-score and the
        // root-mean-square of the per-coordinate z-scores.
        let (net, theta, data, range) = toy_softmax(s)?;
        let exact = local_fisher(&net, &theta, &data, range)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, 6));
        let draws = 10_000usize;
        let n = theta.len();
        let mut per_sample: Vec<Vec<(f64, Vec<f64>)>> = vec![Vec::new(); data.len()];
        net.for_each_label_grad(&theta, &data, range, |i, p, g| {
            per_sample[i].push((p, g.iter().map(|v| v * v).collect()));
        })?;
        let mut sum = vec![0.0; n];
        let mut sum_sq = vec![0.0; n];
        let (mut tr, mut tr_sq) = (0.0, 0.0);
        for _ in 0..draws {
            let i = rng.random_range(0..data.len());
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = per_sample[i].len() - 1;
            for (y, (p, _)) in per_sample[i].iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = y;
                    break;
                }
            }
            let v = &per_sample[i][pick].1;
            let t: f64 = v.iter().sum();
            tr += t;
            tr_sq += t * t;
            for (j, x) in v.iter().enumerate() {
                sum[j] += x;
                sum_sq[j] += x * x;
            }
        }
        let nd = draws as f64;
        let z = |s: f64, sq: f64, truth: f64| -> Option<f64> {
            let mean = s / nd;
            let se = ((sq / nd - mean * mean).max(0.0) / nd).sqrt();
            (se > 0.0).then(|| (mean - truth).abs() / se)
        };
        let zs: Vec<f64> = (0..n).filter_map(|j| z(sum[j], sum_sq[j], exact.values()[j])).collect();
        let rms = (zs.iter().map(|v| v * v).sum::<f64>() / zs.len().max(1) as f64).sqrt();
        let trace_z = z(tr, tr_sq, exact.values().iter().sum()).unwrap_or(0.0);
        Ok(rms.max(trace_z))
    })?;
    let nonneg = check("fisher-nonnegative", seed, 74, 5, 0.0, Bound::Lower, |s| {
        let (net, theta) = random_net(s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, 7));
        let x = Matrix::from_vec(8, 3, normal_vec(&mut rng, 24, 1.0));
        let batch = Batch::new(x, vec![0; 8])?;
        let f = local_fisher(&net, &theta, &batch, ClassRange::new(0, 2)?)?;
        Ok(f.values().iter().copied().fold(f64::INFINITY, f64::min))
    })?;
    Ok(vec![diag, hess, mc, nonneg])
}

const KL_EPS: [f64; 5] = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3];

fn kl_checks(seed: u64) -> Result<Vec<CheckReport>> {
    let run = |s: u64| -> Result<crate::analysis::KlTable> {
        let (net, theta, data, range) = toy_softmax(s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, 8));
        let tau = normal_vec(&mut rng, theta.len(), 1.0);
        kl_quadratic_check(&net, &theta, &tau, &data, range, &KL_EPS)
    };
    let slope = check("kl-remainder-slope", seed, 81, 3, 2.7, Bound::Lower, |s| Ok(run(s)?.remainder_slope))?;
    let ratio = check("kl-ratio-at-smallest-eps", seed, 81, 3, 0.1, Bound::Upper, |s| {
        let t = run(s)?;
        Ok((t.rows.last().expect("epsilons").ratio - 1.0).abs())
    })?;
    let zero = check("kl-zero-at-zero-eps", seed, 82, 3, 0.0, Bound::Upper, |s| {
        let (net, theta, data, range) = toy_softmax(s)?;
        let tau = vec![1.0; theta.len()];
        let t = kl_quadratic_check(&net, &theta, &tau, &data, range, &[0.0])?;
        Ok(t.rows[0].kl.abs().max(t.rows[0].quad.abs()))
    })?;
    Ok(vec![slope, ratio, zero])
}

fn random_pool(seed: u64) -> Result<PoolState> {
    let (_, theta0) = random_net(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 9));
    let mut pool = PoolState::new(theta0.clone());
    let t = rng.random_range(2..=6);
    for i in 0..t {
        let v = GRAD_VARIANTS[(i + seed as usize) % GRAD_VARIANTS.len()];
        pool.push(random_vector(v, theta0.layout(), &mut rng)?)?;
    }
    Ok(pool)
}

fn o1_checks(seed: u64) -> Result<Vec<CheckReport>> {
    let equiv = check("cumulative-base-equals-compose", seed, 91, 50, 1e-10, Bound::Upper, |s| {
        let full = random_pool(s)?;
        let mut pool = PoolState::new(full.theta0().clone());
        let mut worst = 0.0f64;
        for tv in full.vectors() {
            let t = pool.count() + 1;
            let base = pool.cumulative_base(t)?;
            let m = tv.materialize(pool.theta0())?;
            pool.push(tv.clone())?;
            let composed = pool.compose(None)?;
            let scale = norm_inf(composed.values()).max(1.0);
            for ((b, mi), c) in base.values().iter().zip(m.values()).zip(composed.values()) {
                worst = worst.max((b + mi / t as f64 - c).abs() / scale);
            }
        }
        Ok(worst)
    })?;
    let training = check("iel-cached-vs-explicit-bitwise", seed, 92, 2, 0.0, Bound::Upper, |s| {
        let stream = tiny_stream(s, 5)?;
        let variant = if s % 2 == 0 { Variant::Fft } else { Variant::Lora { rank: 2 } };
        let mut cached_cfg = tiny_config(Algo::Iel, variant, vec![6], s);
        cached_cfg.base_mode = BaseMode::Cached;
        let mut explicit_cfg = cached_cfg.clone();
        explicit_cfg.base_mode = BaseMode::Explicit;
        let (a, ra) = run_sequence(&stream, &cached_cfg)?;
        let (b, rb) = run_sequence(&stream, &explicit_cfg)?;
        let same_vectors = a.pool().vectors() == b.pool().vectors();
        Ok(if same_vectors && ra == rb { 0.0 } else { 1.0 })
    })?;
    let one_step = check("iel-single-task-bitwise", seed, 93, 5, 0.0, Bound::Upper, |s| {
        // One task of training from a populated pool with either base.
        let stream = tiny_stream(s, 3)?;
        let cfg = tiny_config(Algo::Iel, Variant::Ia3, vec![5], s);
        let mut runner = crate::trainer::Runner::new(cfg.clone(), stream.input_dim())?;
        runner.step(&stream.tasks()[0])?;
        runner.step(&stream.tasks()[1])?;
        runner.pre_consolidate(&stream.tasks()[2])?;
        let task = &stream.tasks()[2];
        let run = |mode| {
            train_task_iel(runner.network(), runner.pool(), runner.fisher(), &task.train, task.range, &cfg, mode, s)
        };
        let (a, la) = run(BaseMode::Cached)?;
        let (b, lb) = run(BaseMode::Explicit)?;
        Ok(if a == b && la.to_bits() == lb.to_bits() { 0.0 } else { 1.0 })
    })?;
    Ok(vec![equiv, training, one_step])
}

fn masking_checks(seed: u64) -> Result<Vec<CheckReport>> {
    let net_check = check("local-ce-head-masking", seed, 101, 20, 0.0, Bound::Upper, |s| {
        let (net, theta) = random_net(s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, 10));
        let x = Matrix::from_vec(6, 3, normal_vec(&mut rng, 18, 1.0));
        let range = ClassRange::new(0, 2)?;
        let labels = (0..6).map(|_| rng.random_range(0..2)).collect();
        let batch = Batch::new(x, labels)?;
        let mut perturbed = theta.clone();
        let arch = net.arch(theta.layout())?;
        for r in arch.head_param_ranges(1) {
            for i in r {
                perturbed.values_mut()[i] += 100.0 * rng.random_range(-1.0..1.0);
            }
        }
        let (la, ga) = net.loss_and_grad(&theta, &batch, range)?;
        let (lb, gb) = net.loss_and_grad(&perturbed, &batch, range)?;
        let dg = ga.iter().zip(&gb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        Ok((la - lb).abs().max(dg))
    })?;
    let logits = check("local-ce-logit-masking", seed, 102, 50, 0.0, Bound::Upper, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let logits = normal_vec(&mut rng, 6, 2.0);
        let range = ClassRange::new(2, 4)?;
        let y = rng.random_range(2..4);
        let mut shifted = logits.clone();
        for i in (0..2).chain(4..6) {
            shifted[i] += 100.0;
        }
        Ok((local_cross_entropy(&logits, y, range)? - local_cross_entropy(&shifted, y, range)?).abs())
    })?;
    Ok(vec![net_check, logits])
}

fn determinism_checks(seed: u64) -> Result<Vec<CheckReport>> {
    let runs = check("run-sequence-repeatable", seed, 111, 3, 0.0, Bound::Upper, |s| {
        let stream = tiny_stream(s, 3)?;
        let (algo, variant) = match s % 3 {
            0 => (Algo::Ita, Variant::Lora { rank: 2 }),
            1 => (Algo::Iel, Variant::Ia3),
            _ => (Algo::Finetune, Variant::Fft),
        };
        let cfg = tiny_config(algo, variant, vec![5], s);
        let (a, ra) = run_sequence(&stream, &cfg)?;
        let (b, rb) = run_sequence(&stream, &cfg)?;
        let same = ra == rb && a.pool().compose(None)? == b.pool().compose(None)? && a.fisher() == b.fisher();
        Ok(if same { 0.0 } else { 1.0 })
    })?;
    let data = check("blob-streams-repeatable", seed, 112, 10, 0.0, Bound::Upper, |s| {
        Ok(if tiny_stream(s, 3)? == tiny_stream(s, 3)? { 0.0 } else { 1.0 })
    })?;
    let frozen = check("past-vectors-frozen", seed, 113, 3, 0.0, Bound::Upper, |s| {
        let stream = tiny_stream(s, 3)?;
        let cfg = tiny_config(Algo::Iel, Variant::Lora { rank: 1 }, vec![5], s);
        let mut runner = crate::trainer::Runner::new(cfg, stream.input_dim())?;
        let mut snapshots: Vec<Vec<f64>> = Vec::new();
        for task in stream.tasks() {
            runner.step(task)?;
            let pool = runner.pool();
            for (i, snap) in snapshots.iter().enumerate() {
                let now = pool.materialized(i + 1)?;
                if now[..snap.len()].iter().zip(snap).any(|(a, b)| a.to_bits() != b.to_bits())
                    || now[snap.len()..].iter().any(|&v| v != 0.0)
                {
                    return Ok(1.0);
                }
            }
            snapshots.push(pool.materialized(pool.count())?.to_vec());
        }
        Ok(0.0)
    })?;
    Ok(vec![runs, data, frozen])
}

fn linearity_checks(seed: u64) -> Result<Vec<CheckReport>> {
    let lin = check("composition-linearity", seed, 121, 50, 1e-12, Bound::Upper, |s| {
        let pool = random_pool(s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, 11));
        let w = random_weights(&mut rng, pool.count());
        let composed = pool.compose(Some(&w))?;
        let theta0 = pool.theta0();
        let mut worst = 0.0f64;
        for i in 0..theta0.len() {
            let mut expect = 0.0;
            for (t, tv) in pool.vectors().iter().enumerate() {
                expect += w[t] * tv.materialize(theta0)?.values()[i];
            }
            worst = worst.max(rel_err(composed.values()[i] - theta0.values()[i], expect, 1.0));
        }
        Ok(worst)
    })?;
    let edits = check("unlearn-equals-specialize-rest", seed, 122, 50, 0.0, Bound::Upper, |s| {
        let pool = random_pool(s)?;
        let mut worst = 0.0f64;
        for t in 1..=pool.count() {
            let rest: Vec<usize> = (1..=pool.count()).filter(|&x| x != t).collect();
            let a = pool.edit_unlearn(t, UnlearnMode::Renormalize)?;
            let b = pool.edit_specialize(&rest)?;
            worst = worst.max(norm_inf(&a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect::<Vec<_>>()));
        }
        let all: Vec<usize> = (1..=pool.count()).collect();
        let spec_all = pool.edit_specialize(&all)?;
        let comp = pool.compose(None)?;
        let scale = norm_inf(comp.values()).max(1.0);
        let d = norm_inf(&spec_all.values().iter().zip(comp.values()).map(|(x, y)| x - y).collect::<Vec<_>>());
        // Subset and cached paths sum in the same order only up to rounding.
        Ok(worst.max(if d / scale <= 1e-14 { 0.0 } else { d / scale }))
    })?;
    let idem = check("materialize-idempotent", seed, 123, 50, 0.0, Bound::Upper, |s| {
        let pool = random_pool(s)?;
        for tv in pool.vectors() {
            let a = tv.materialize(pool.theta0())?;
            let b = tv.materialize(pool.theta0())?;
            if a.values().iter().zip(b.values()).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(1.0);
            }
        }
        Ok(0.0)
    })?;
    Ok(vec![lin, edits, idem])
}

fn accumulation_checks(seed: u64) -> Result<Vec<CheckReport>> {
    let order = check("fisher-accumulation-order", seed, 131, 50, 1e-12, Bound::Upper, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let n = rng.random_range(1..40);
        let layout = Arc::new(ParamLayout::new(vec![crate::params::LayoutEntry::new(
            "w",
            vec![n],
            crate::params::EntryKind::BackboneBias,
        )])?);
        let t = rng.random_range(2..6);
        let locals: Vec<(FisherDiagonal, u64)> = (0..t)
            .map(|_| {
                let count = rng.random_range(1..500u64);
                let v = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
                Ok((FisherDiagonal::new(layout.clone(), v, count)?, count))
            })
            .collect::<Result<_>>()?;
        let fold = |idx: &[usize]| -> Result<FisherDiagonal> {
            let mut g = FisherDiagonal::zeros(layout.clone());
            for &i in idx {
                g = accumulate(&g, &locals[i].0, locals[i].1, AccumulateMode::WeightedMean)?;
            }
            Ok(g)
        };
        let fwd: Vec<usize> = (0..t).collect();
        let mut perm = fwd.clone();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let a = fold(&fwd)?;
        let b = fold(&perm)?;
        if a.sample_count() != b.sample_count() || a.values().iter().any(|&v| v < 0.0) {
            return Ok(f64::INFINITY);
        }
        Ok(a.values().iter().zip(b.values()).map(|(x, y)| rel_err(*x, *y, 1e-300)).fold(0.0, f64::max))
    })?;
    Ok(vec![order])
}

/// Runs one suite (or every suite for [`Suite::All`]).
pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<CheckReport>> {
    match suite {
        Suite::Theorem1 => theorem1_checks(seed),
        Suite::Jensen => jensen_checks(seed),
        Suite::Gradients => gradient_checks(seed),
        Suite::Fisher => fisher_checks(seed),
        Suite::Kl => kl_checks(seed),
        Suite::O1 => o1_checks(seed),
        Suite::OmegaForms => omega_checks(seed),
        Suite::Masking => masking_checks(seed),
        Suite::Determinism => determinism_checks(seed),
        Suite::Linearity => linearity_checks(seed),
        Suite::Accumulation => accumulation_checks(seed),
        Suite::All => {
            let mut out = Vec::new();
            for s in Suite::EACH {
                out.extend(run_suite(s, seed)?);
            }
            Ok(out)
        }
    }
}

/// Like [`run_suite`] but inside a thread pool capped by `TASKVEC_THREADS`
/// (unset or 0 means the rayon default).
pub fn run_suite_capped(suite: Suite, seed: u64) -> Result<Vec<CheckReport>> {
    let threads = std::env::var("TASKVEC_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::validation(format!("thread pool: {e}")))?;
    pool.install(|| run_suite(suite, seed))
}
