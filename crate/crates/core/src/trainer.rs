//! The incremental training loop: per-task pre-consolidation of `θ₀`
//! (probe, mixture alignment, Fisher update) followed by individual (ITA)
//! or ensemble (IEL) fine-tuning of a new task vector.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{final_accuracy, final_forgetting, AccMatrix};
use crate::data::{derive_seed, Task, TaskStream};
use crate::error::{Error, Result};
use crate::fisher::{accumulate, local_fisher, AccumulateMode, FisherDiagonal};
use crate::mog::{fit_mog, MogStore, EM_ITERS};
use crate::nn::{Activation, Batch, ClassRange, NetSpec, Network};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{ParamLayout, ParamVector};
use crate::pool::PoolState;
use crate::regularizers::{omega_grad_dense, strength_mask, RegConfig};
use crate::task_vector::{TaskVector, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    /// Individual training with the Fisher anchor to `θ₀`.
    #[default]
    Ita,
    /// Ensemble training through the composed model with the `Ω` barrier.
    Iel,
    /// ITA with every regularization strength forced to zero.
    Finetune,
}

/// How IEL obtains `Σ_{t'<t} τ_{t'}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseMode {
    /// The pool's running sum.
    #[default]
    Cached,
    /// Re-summed from every stored vector each task.
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub algo: Algo,
    pub variant: Variant,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub pre_epochs: usize,
    pub pre_lr: f64,
    /// Epochs of head alignment on synthetic features.
    pub align_epochs: usize,
    /// Re-tune every head during alignment (otherwise only the new one).
    pub align_all_heads: bool,
    pub reg: RegConfig,
    pub mog_components: usize,
    pub mog_samples: usize,
    pub fisher_mode: AccumulateMode,
    pub base_mode: BaseMode,
    pub optimizer: AdamWConfig,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Ita,
            variant: Variant::Fft,
            lr: 1e-4,
            epochs: 5,
            batch_size: 32,
            pre_epochs: 8,
            pre_lr: 1e-2,
            align_epochs: 8,
            align_all_heads: true,
            reg: RegConfig::default(),
            mog_components: 5,
            mog_samples: 256,
            fisher_mode: AccumulateMode::WeightedMean,
            base_mode: BaseMode::Cached,
            optimizer: AdamWConfig::default(),
            hidden: vec![64],
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings tuned for the built-in blob benchmark. The paper's learning
    /// rates assume a large pre-trained backbone and barely move a small
    /// random-feature network in a handful of epochs. Strengths are large
    /// because the Fisher at an aligned base is small.
    pub fn desk(algo: Algo, variant: Variant) -> Self {
        let peft = variant.is_peft();
        let reg = match (algo, peft) {
            (Algo::Ita, false) => RegConfig {
                alpha: 1000.0,
                alpha_cls: 10000.0,
                ..RegConfig::default()
            },
            (Algo::Ita, true) => RegConfig {
                alpha: 100.0,
                alpha_cls: 1000.0,
                ..RegConfig::default()
            },
            (Algo::Iel, false) => RegConfig {
                beta: 1.0,
                beta_cls: 10.0,
                ..RegConfig::default()
            },
            (Algo::Iel, true) => RegConfig {
                beta: 10.0,
                beta_cls: 100.0,
                ..RegConfig::default()
            },
            (Algo::Finetune, _) => RegConfig::default(),
        };
        let lr = match (algo, peft) {
            (Algo::Ita | Algo::Finetune, false) => 0.3,
            _ => 0.01,
        };
        Self {
            algo,
            variant,
            lr,
            epochs: 20,
            reg,
            hidden: vec![64, 64],
            activation: Activation::Gelu,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite() && self.pre_lr > 0.0 && self.pre_lr.is_finite()) {
            return Err(Error::validation("learning rates must be positive"));
        }
        if self.mog_components == 0 || self.mog_samples == 0 {
            return Err(Error::validation("mixture components and samples must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be at least 1"));
        }
        if let Variant::Lora { rank: 0 } = self.variant {
            return Err(Error::validation("LoRA rank must be at least 1"));
        }
        self.reg.validate()
    }

    /// Regularization actually applied (zero for the finetune baseline).
    pub fn effective_reg(&self) -> RegConfig {
        match self.algo {
            Algo::Finetune => RegConfig {
                alpha: 0.0,
                alpha_cls: 0.0,
                beta: 0.0,
                beta_cls: 0.0,
                ..self.reg
            },
            _ => self.reg,
        }
    }
}

/// Risk samples at a task boundary, on the validation union of seen tasks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskSample {
    pub after_task: usize,
    /// `ℓ̂(θ_P)`.
    pub composed: f64,
    /// `Σ_t w_t ℓ̂(θ_t)`.
    pub upper_bound: f64,
    /// `ℓ̂(θ₀)`.
    pub base: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub acc: AccMatrix,
    pub fa: f64,
    pub ff: f64,
    pub risk: Vec<RiskSample>,
    /// Accuracy of `θ₀ + τ_t` on task `t` right after training it.
    pub individual_acc: Vec<f64>,
    /// Accuracy of the probed and aligned `θ₀` on task `t` before its
    /// fine-tuning.
    pub probe_acc: Vec<f64>,
    /// Mean training loss of the last epoch of each task.
    pub train_loss: Vec<f64>,
    pub test_sizes: Vec<usize>,
}

/// Mutable state of an incremental run.
#[derive(Clone, Debug)]
pub struct Runner {
    cfg: TrainConfig,
    net: Network,
    pool: PoolState,
    fisher: FisherDiagonal,
    mogs: MogStore,
    seen: Vec<Task>,
    acc: Vec<Vec<f64>>,
    risk: Vec<RiskSample>,
    individual_acc: Vec<f64>,
    probe_acc: Vec<f64>,
    train_loss: Vec<f64>,
}

const STREAM_INIT: u64 = 1;

fn task_seed(seed: u64, t: usize, part: u64) -> u64 {
    derive_seed(seed, 100 + 10 * t as u64 + part)
}

impl Runner {
    pub fn new(cfg: TrainConfig, input_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let spec = NetSpec {
            input_dim,
            hidden: cfg.hidden.clone(),
            activation: cfg.activation,
            head_dims: vec![],
        };
        let (net, theta0) = spec.init(derive_seed(cfg.seed, STREAM_INIT))?;
        Ok(Self::from_backbone(cfg, net, theta0))
    }

    /// Starts from an existing backbone (no heads).
    pub fn from_backbone(cfg: TrainConfig, net: Network, theta0: ParamVector) -> Self {
        let fisher = FisherDiagonal::zeros(theta0.layout().clone());
        Self {
            cfg,
            net,
            pool: PoolState::new(theta0),
            fisher,
            mogs: MogStore::new(),
            seen: Vec::new(),
            acc: Vec::new(),
            risk: Vec::new(),
            individual_acc: Vec::new(),
            probe_acc: Vec::new(),
            train_loss: Vec::new(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn pool(&self) -> &PoolState {
        &self.pool
    }

    pub fn fisher(&self) -> &FisherDiagonal {
        &self.fisher
    }

    pub fn mogs(&self) -> &MogStore {
        &self.mogs
    }

    pub fn tasks_done(&self) -> usize {
        self.pool.count()
    }

    /// Pre-consolidates `θ₀` on `task`: adds its head, fits the class
    /// generators, aligns the heads and folds in the local Fisher.
    pub fn pre_consolidate(&mut self, task: &Task) -> Result<()> {
        let t = self.pool.count() + 1;
        let cfg = &self.cfg;
        if task.train.is_empty() {
            return Err(Error::validation("pre-consolidation needs training data"));
        }
        let theta0 = self.pool.theta0();
        let arch = self.net.arch(theta0.layout())?;
        if task.range.start != arch.total_classes() {
            return Err(Error::validation(format!(
                "task {t} classes start at {}, the network has {}",
                task.range.start,
                arch.total_classes()
            )));
        }
        let with_head = self.net.add_head(theta0, task.range.len())?;
        let head_task = *with_head.layout().head_tasks().last().expect("head just added");
        let mut probed = self.net.linear_probe(
            &with_head,
            &task.train,
            head_task,
            cfg.pre_epochs,
            cfg.pre_lr,
            cfg.batch_size,
            task_seed(cfg.seed, t, 1),
        )?;

        let feats = self.net.features(&probed, &task.train.inputs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(task_seed(cfg.seed, t, 2));
        for c in task.range.start..task.range.end {
            let rows: Vec<usize> = (0..task.train.len()).filter(|&i| task.train.labels[i] == c).collect();
            if rows.is_empty() {
                continue;
            }
            let fit = fit_mog(&feats.select_rows(&rows), cfg.mog_components, EM_ITERS, &mut rng)?;
            self.mogs.insert(c, fit.mog);
        }

        if cfg.align_epochs > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(task_seed(cfg.seed, t, 3));
            let (synth, labels) = self.mogs.sample_all(cfg.mog_samples, &mut rng);
            let arch = self.net.arch(probed.layout())?;
            let heads: Vec<usize> = if cfg.align_all_heads {
                (0..arch.num_heads()).collect()
            } else {
                vec![arch.num_heads() - 1]
            };
            let all = ClassRange::new(0, arch.total_classes())?;
            self.net.train_heads_on_features(
                &mut probed,
                &synth,
                &labels,
                &heads,
                all,
                cfg.align_epochs,
                cfg.pre_lr,
                cfg.batch_size,
                &mut rng,
            )?;
        }

        let local = local_fisher(&self.net, &probed, &task.train, task.range)?;
        self.fisher = accumulate(&self.fisher, &local, task.train.len() as u64, cfg.fisher_mode)?;
        self.pool.set_theta0(probed)?;
        Ok(())
    }

    /// Trains the vector for the next task against the current base.
    pub fn fine_tune(&self, task: &Task) -> Result<(TaskVector, f64)> {
        let t = self.pool.count() + 1;
        let seed = task_seed(self.cfg.seed, t, 4);
        match self.cfg.algo {
            Algo::Ita | Algo::Finetune => {
                let reg = self.cfg.effective_reg();
                train_task_ita(&self.net, self.pool.theta0(), &self.fisher, &task.train, task.range, &self.cfg, &reg, seed)
            }
            Algo::Iel => train_task_iel(
                &self.net,
                &self.pool,
                &self.fisher,
                &task.train,
                task.range,
                &self.cfg,
                self.cfg.base_mode,
                seed,
            ),
        }
    }

    /// Full step for one task: pre-consolidation, fine-tuning, pool growth
    /// and evaluation on every seen task.
    pub fn step(&mut self, task: &Task) -> Result<()> {
        self.pre_consolidate(task)?;
        let theta0 = self.pool.theta0().clone();
        self.probe_acc.push(self.net.accuracy(&theta0, &task.test)?);
        let (tv, loss) = self.fine_tune(task)?;
        self.train_loss.push(loss);
        let theta_t = add(&theta0, &tv.materialize(&theta0)?);
        self.individual_acc.push(self.net.accuracy(&theta_t, &task.test)?);
        self.pool.push(tv)?;
        self.seen.push(task.clone());
        self.evaluate()
    }

    fn evaluate(&mut self) -> Result<()> {
        let composed = self.pool.compose(None)?;
        if !composed.is_finite() {
            return Err(Error::Numeric {
                msg: "composed weights are not finite".into(),
                param_norm: composed.norm(),
            });
        }
        let row = self
            .seen
            .iter()
            .map(|s| self.net.accuracy(&composed, &s.test))
            .collect::<Result<Vec<_>>>()?;
        self.acc.push(row);

        let val: Vec<&Batch> = self.seen.iter().map(|s| if s.val.is_empty() { &s.train } else { &s.val }).collect();
        let val = Batch::concat(&val);
        let theta0 = self.pool.theta0();
        let w = self.pool.weights();
        let mut upper = 0.0;
        for (i, wt) in w.iter().enumerate() {
            let m = self.pool.materialized(i + 1)?;
            let th = ParamVector::from_raw(theta0.layout().clone(), theta0.values().iter().zip(m).map(|(a, b)| a + b).collect());
            upper += wt * self.net.global_risk(&th, &val)?;
        }
        self.risk.push(RiskSample {
            after_task: self.pool.count(),
            composed: self.net.global_risk(&composed, &val)?,
            upper_bound: upper,
            base: self.net.global_risk(theta0, &val)?,
        });
        Ok(())
    }

    pub fn result(&self) -> RunResult {
        let acc = AccMatrix::new(self.acc.clone()).expect("rows grow by one per task");
        let test_sizes: Vec<usize> = self.seen.iter().map(|s| s.test.len()).collect();
        let weights: Vec<f64> = test_sizes.iter().map(|&n| n as f64).collect();
        RunResult {
            fa: if acc.tasks() == 0 { f64::NAN } else { final_accuracy(&acc, Some(&weights)) },
            ff: if acc.tasks() == 0 { f64::NAN } else { final_forgetting(&acc) },
            acc,
            risk: self.risk.clone(),
            individual_acc: self.individual_acc.clone(),
            probe_acc: self.probe_acc.clone(),
            train_loss: self.train_loss.clone(),
            test_sizes,
        }
    }

    pub fn into_parts(self) -> (PoolState, FisherDiagonal, Network) {
        (self.pool, self.fisher, self.net)
    }
}

fn add(theta0: &ParamVector, tau: &ParamVector) -> ParamVector {
    ParamVector::from_raw(
        theta0.layout().clone(),
        theta0.values().iter().zip(tau.values()).map(|(a, b)| a + b).collect(),
    )
}

/// Runs every task of `stream` in order.
pub fn run_sequence(stream: &TaskStream, cfg: &TrainConfig) -> Result<(Runner, RunResult)> {
    let mut runner = Runner::new(cfg.clone(), stream.input_dim())?;
    for task in stream.tasks() {
        runner.step(task)?;
    }
    let result = runner.result();
    Ok((runner, result))
}

/// Regularizer acting on the dense displacement.
enum DenseReg<'a> {
    /// `∇ (½ Σ s_i F_i τ_i²) = s ⊙ F ⊙ τ`.
    Anchor { sf: Vec<f64> },
    /// `s ⊙ ∂Ω/∂τ_k` with uniform weights `1/k`.
    Omega { fisher: Vec<f64>, mask: Vec<f64>, sum_prev: &'a [f64], k: usize },
}

impl DenseReg<'_> {
    fn is_none(&self) -> bool {
        match self {
            DenseReg::Anchor { sf } => sf.iter().all(|&v| v == 0.0),
            DenseReg::Omega { mask, k, .. } => *k <= 1 || mask.iter().all(|&v| v == 0.0),
        }
    }

    fn grad(&self, tau: &[f64], out: &mut [f64]) {
        match self {
            DenseReg::Anchor { sf } => {
                for ((o, s), t) in out.iter_mut().zip(sf).zip(tau) {
                    *o = s * t;
                }
            }
            DenseReg::Omega { fisher, mask, sum_prev, k } => {
                omega_grad_dense(tau, sum_prev, *k, fisher, Some(mask), out);
            }
        }
    }
}

/// Trains a fresh task vector where the network runs at
/// `base + scale · materialize(τ)`.
#[allow(clippy::too_many_arguments)]
fn fit_vector(
    net: &Network,
    theta0: &ParamVector,
    base: &[f64],
    scale: f64,
    reg: &DenseReg<'_>,
    decoupled: bool,
    data: &Batch,
    range: ClassRange,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(TaskVector, f64)> {
    let layout: &Arc<ParamLayout> = theta0.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tv = TaskVector::new(cfg.variant, layout.clone(), &mut rng)?;
    let n = theta0.len();
    let mut opt = AdamW::new(tv.num_params(), cfg.optimizer);
    let mut tau = vec![0.0; n];
    let mut dense = vec![0.0; n];
    let mut reg_dense = vec![0.0; n];
    let mut g_data = vec![0.0; tv.num_params()];
    let mut g_reg = vec![0.0; tv.num_params()];
    let has_reg = !reg.is_none();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            tau.iter_mut().for_each(|x| *x = 0.0);
            tv.materialize_into(theta0.values(), &mut tau);
            let theta = ParamVector::from_raw(
                layout.clone(),
                base.iter().zip(&tau).map(|(b, t)| b + scale * t).collect(),
            );
            let batch = data.select(chunk);
            let (loss, g) = net.loss_and_grad(&theta, &batch, range)?;
            total += loss * chunk.len() as f64;
            for (d, gi) in dense.iter_mut().zip(&g) {
                *d = scale * gi;
            }
            tv.pullback_into(&dense, theta0.values(), &mut g_data);
            if has_reg {
                reg.grad(&tau, &mut reg_dense);
                tv.pullback_into(&reg_dense, theta0.values(), &mut g_reg);
                if decoupled {
                    for (p, r) in tv.params_mut().iter_mut().zip(&g_reg) {
                        *p -= cfg.lr * r;
                    }
                } else {
                    for (d, r) in g_data.iter_mut().zip(&g_reg) {
                        *d += r;
                    }
                }
            }
            opt.step(tv.params_mut(), &g_data, cfg.lr);
        }
        last_loss = total / data.len() as f64;
        if tv.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric {
                msg: "task vector diverged".into(),
                param_norm: crate::linalg::norm2(tv.params()),
            });
        }
    }
    Ok((tv, last_loss))
}

/// Individual training: local cross-entropy at `θ₀ + τ` plus
/// `(α/2)·EWC_θ₀(τ)` with `α_cls` on head entries.
#[allow(clippy::too_many_arguments)]
pub fn train_task_ita(
    net: &Network,
    theta0: &ParamVector,
    fisher: &FisherDiagonal,
    data: &Batch,
    range: ClassRange,
    cfg: &TrainConfig,
    reg: &RegConfig,
    seed: u64,
) -> Result<(TaskVector, f64)> {
    if !fisher.layout().is_prefix_of(theta0.layout()) {
        return Err(Error::layout("Fisher layout is not a prefix of θ₀'s layout"));
    }
    let mask = strength_mask(theta0.layout(), reg.alpha, reg.alpha_cls);
    let f = fisher.padded_values(theta0.len());
    let sf: Vec<f64> = mask.iter().zip(&f).map(|(m, f)| m * f).collect();
    let dreg = DenseReg::Anchor { sf };
    fit_vector(
        net,
        theta0,
        theta0.values(),
        1.0,
        &dreg,
        reg.decoupled(cfg.variant.is_peft()),
        data,
        range,
        cfg,
        seed,
    )
}

/// Ensemble training: local cross-entropy at
/// `θ_P = θ₀^(t) + τ_t / t` plus `β·Ω` with `β_cls` on head entries. Only
/// the new vector is trained.
#[allow(clippy::too_many_arguments)]
pub fn train_task_iel(
    net: &Network,
    pool: &PoolState,
    fisher: &FisherDiagonal,
    data: &Batch,
    range: ClassRange,
    cfg: &TrainConfig,
    base_mode: BaseMode,
    seed: u64,
) -> Result<(TaskVector, f64)> {
    let theta0 = pool.theta0();
    if !fisher.layout().is_prefix_of(theta0.layout()) {
        return Err(Error::layout("Fisher layout is not a prefix of θ₀'s layout"));
    }
    let t = pool.count() + 1;
    let reg = cfg.effective_reg();
    let explicit;
    let (base, sum_prev): (ParamVector, &[f64]) = match base_mode {
        BaseMode::Cached => (pool.cumulative_base(t)?, pool.cum_sum()),
        BaseMode::Explicit => {
            explicit = pool.explicit_sum();
            (pool.cumulative_base_explicit(t)?, &explicit)
        }
    };
    let dreg = DenseReg::Omega {
        fisher: fisher.padded_values(theta0.len()),
        mask: strength_mask(theta0.layout(), reg.beta, reg.beta_cls),
        sum_prev,
        k: t,
    };
    fit_vector(
        net,
        theta0,
        base.values(),
        1.0 / t as f64,
        &dreg,
        reg.decoupled(cfg.variant.is_peft()),
        data,
        range,
        cfg,
        seed,
    )
}

