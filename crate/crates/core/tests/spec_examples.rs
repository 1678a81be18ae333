//! Worked examples for the trainers, probing, mixtures and loaders.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use taskvec::analysis::alignment;
use taskvec::data::{gen_blobs, load_csv, BlobSpec, TaskStream};
use taskvec::linalg::Matrix;
use taskvec::mog::fit_mog;
use taskvec::nn::{Activation, NetSpec};
use taskvec::params::{EntryKind, LayoutEntry};
use taskvec::regularizers::ewc_penalty;
use taskvec::trainer::{run_sequence, Algo, Runner, TrainConfig};
use taskvec::{Batch, ClassRange, ParamLayout, ParamVector, PoolState, TaskVector, UnlearnMode, Variant};

fn small_stream(tasks: usize) -> TaskStream {
    gen_blobs(&BlobSpec {
        tasks,
        samples_per_class: 60,
        ..BlobSpec::default()
    })
    .unwrap()
}

fn quick(algo: Algo) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        ..TrainConfig::desk(algo, Variant::Fft)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn train_accuracy(net: &taskvec::Network, theta: &ParamVector, batch: &Batch, range: ClassRange) -> f64 {
    let logits = net.forward(theta, &batch.inputs).unwrap();
    let hits = (0..batch.len())
        .filter(|&i| {
            let r = &logits.row(i)[range.start..range.end];
            let best = (0..r.len()).fold(0, |b, j| if r[j] > r[b] { j } else { b });
            best + range.start == batch.labels[i]
        })
        .count();
    hits as f64 / batch.len() as f64
}

#[test]
fn huge_alpha_pins_the_vector_to_zero() {
    let stream = small_stream(2);
    let cfg = TrainConfig {
        reg: taskvec::regularizers::RegConfig {
            alpha: 1e9,
            alpha_cls: 1e9,
            ..Default::default()
        },
        hidden: vec![16],
        ..TrainConfig::default()
    };
    let mut runner = Runner::new(cfg, stream.input_dim()).unwrap();
    runner.step(&stream.tasks()[0]).unwrap();
    runner.pre_consolidate(&stream.tasks()[1]).unwrap();
    let (tv, _) = runner.fine_tune(&stream.tasks()[1]).unwrap();
    let theta0 = runner.pool().theta0();
    let tau = tv.materialize(theta0).unwrap();
    assert!(norm(tau.values()) <= 1e-3 * norm(theta0.values()), "{} vs {}", norm(tau.values()), norm(theta0.values()));
}

#[test]
fn zero_alpha_is_plain_fine_tuning() {
    let stream = small_stream(3);
    let mut ita = quick(Algo::Ita);
    ita.reg.alpha = 0.0;
    ita.reg.alpha_cls = 0.0;
    let (_, a) = run_sequence(&stream, &ita).unwrap();
    let (_, b) = run_sequence(&stream, &TrainConfig { algo: Algo::Finetune, ..ita }).unwrap();
    assert_eq!(a.train_loss, b.train_loss);
    assert_eq!(a, b);
}

#[test]
fn default_alpha_shrinks_the_anchor_penalty() {
    let stream = gen_blobs(&BlobSpec::default()).unwrap();
    let penalty = |alpha: f64| {
        let mut cfg = TrainConfig::desk(Algo::Ita, Variant::Fft);
        if alpha == 0.0 {
            cfg.reg.alpha = 0.0;
            cfg.reg.alpha_cls = 0.0;
        }
        let (runner, _) = run_sequence(&stream, &cfg).unwrap();
        let pool = runner.pool();
        pool.vectors()
            .iter()
            .map(|tv| ewc_penalty(tv, runner.fisher(), pool.theta0()).unwrap())
            .sum::<f64>()
    };
    let (reg, plain) = (penalty(1.0), penalty(0.0));
    assert!(2.0 * reg <= plain, "{reg} vs {plain}");
}

#[test]
fn first_iel_task_matches_unregularized_ita() {
    let stream = small_stream(1);
    let mut ita = quick(Algo::Ita);
    ita.reg.alpha = 0.0;
    ita.reg.alpha_cls = 0.0;
    let iel = TrainConfig {
        algo: Algo::Iel,
        reg: taskvec::regularizers::RegConfig {
            beta: 5.0,
            beta_cls: 5.0,
            ..Default::default()
        },
        ..ita.clone()
    };
    let (ra, _) = run_sequence(&stream, &ita).unwrap();
    let (rb, _) = run_sequence(&stream, &iel).unwrap();
    let (a, b) = (ra.pool().vectors()[0].params(), rb.pool().vectors()[0].params());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{x} vs {y}");
    }
}

#[test]
fn single_task_fa_is_individual_accuracy() {
    let stream = small_stream(1);
    let (_, r) = run_sequence(&stream, &quick(Algo::Ita)).unwrap();
    assert_eq!(r.fa, r.individual_acc[0]);
    assert_eq!(r.ff, 0.0);
}

#[test]
fn finetune_forgets_on_the_default_benchmark() {
    let stream = gen_blobs(&BlobSpec::default()).unwrap();
    let (_, r) = run_sequence(&stream, &TrainConfig::desk(Algo::Finetune, Variant::Fft)).unwrap();
    let mean_individual = r.individual_acc.iter().sum::<f64>() / r.individual_acc.len() as f64;
    assert!(r.fa + 0.2 < mean_individual, "fa {} vs individual {mean_individual}", r.fa);
}

#[test]
fn runs_are_bitwise_repeatable() {
    let stream = small_stream(2);
    for algo in [Algo::Ita, Algo::Iel] {
        let (ra, a) = run_sequence(&stream, &quick(algo)).unwrap();
        let (rb, b) = run_sequence(&stream, &quick(algo)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.pool().cum_sum(), rb.pool().cum_sum());
    }
}

#[test]
fn pre_consolidation_contracts() {
    let stream = small_stream(2);
    let task = &stream.tasks()[0];
    let mut runner = Runner::new(quick(Algo::Ita), stream.input_dim()).unwrap();
    let before = runner.pool().theta0().clone();
    runner.pre_consolidate(task).unwrap();
    let after = runner.pool().theta0();
    for (i, e) in before.layout().entries().iter().enumerate() {
        assert!(!e.kind.is_head());
        assert_eq!(&after.values()[after.layout().range(i)], &before.values()[before.layout().range(i)]);
    }
    assert_eq!(runner.fisher().sample_count(), task.train.len() as u64);

    // Alignment on task 1 only sees its own class generators.
    let net = runner.network();
    let aligned = train_accuracy(net, after, &task.train, task.range);
    let mut plain = Runner::new(
        TrainConfig {
            align_epochs: 0,
            ..quick(Algo::Ita)
        },
        stream.input_dim(),
    )
    .unwrap();
    plain.pre_consolidate(task).unwrap();
    let probed = train_accuracy(plain.network(), plain.pool().theta0(), &task.train, task.range);
    assert!(aligned >= probed - 0.02, "{aligned} vs {probed}");
}

#[test]
fn linear_probe_examples() {
    let stream = small_stream(1);
    let task = &stream.tasks()[0];
    let spec = NetSpec {
        input_dim: stream.input_dim(),
        hidden: vec![32],
        activation: Activation::Tanh,
        head_dims: vec![2],
    };
    let (net, theta) = spec.init(4).unwrap();
    assert_eq!(net.linear_probe(&theta, &task.train, 1, 0, 0.1, 16, 0).unwrap(), theta);
    let cfg = TrainConfig::default();
    let probed = net
        .linear_probe(&theta, &task.train, 1, cfg.pre_epochs, cfg.pre_lr, cfg.batch_size, 0)
        .unwrap();
    let arch = net.arch(theta.layout()).unwrap();
    let head: Vec<usize> = arch.head_param_ranges(0).into_iter().flatten().collect();
    for i in 0..theta.len() {
        if !head.contains(&i) {
            assert_eq!(probed.values()[i].to_bits(), theta.values()[i].to_bits());
        }
    }
    assert!(train_accuracy(&net, &probed, &task.train, task.range) >= 0.95);

    let tight = gen_blobs(&BlobSpec {
        tasks: 3,
        spread: 1e-6,
        samples_per_class: 20,
        ..BlobSpec::default()
    })
    .unwrap();
    let spec = NetSpec {
        head_dims: vec![2, 2, 2],
        ..spec
    };
    let (net, theta) = spec.init(5).unwrap();
    for (t, task) in tight.tasks().iter().enumerate() {
        let p = net.linear_probe(&theta, &task.train, t + 1, 50, 0.1, 8, 1).unwrap();
        assert_eq!(train_accuracy(&net, &p, &task.train, task.range), 1.0);
    }
}

#[test]
fn mixture_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let centers = [[-4.0, 0.0], [4.0, 1.0]];
    let mut rows = Vec::new();
    for c in &centers {
        for _ in 0..200 {
            rows.push(
                c.iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + 0.3 * z
                    })
                    .collect::<Vec<_>>(),
            );
        }
    }
    let x = Matrix::from_rows(&rows);
    let fit = fit_mog(&x, 2, 50, &mut rng).unwrap();
    for c in &centers {
        let near = fit
            .mog
            .means
            .iter()
            .any(|m| m.iter().zip(c).all(|(a, b)| (a - b).abs() <= 0.1));
        assert!(near, "{:?} has no mean near {c:?}", fit.mog.means);
    }
    for w in fit.log_likelihood.windows(2) {
        assert!(w[1] >= w[0] - 1e-9);
    }
}

#[test]
fn alignment_examples() {
    let layout = Arc::new(ParamLayout::new(vec![LayoutEntry::new("w", vec![3], EntryKind::BackboneBias)]).unwrap());
    let theta0 = ParamVector::zeros(layout.clone());
    let pool = |sign: f64| {
        let mut p = PoolState::new(theta0.clone());
        for v in [[1.0, 2.0, 0.5], [-1.0, 0.0, 3.0]] {
            let d = ParamVector::new(layout.clone(), v.iter().map(|x| sign * x).collect()).unwrap();
            p.push(TaskVector::dense(&d)).unwrap();
        }
        p
    };
    let same = alignment(&pool(1.0), &pool(1.0)).unwrap();
    assert!(same.per_task.iter().all(|c| (c - 1.0).abs() < 1e-12));
    let flipped = alignment(&pool(1.0), &pool(-1.0)).unwrap();
    assert!(flipped.per_task.iter().all(|c| (c + 1.0).abs() < 1e-12));
    // Independent dot product.
    let (a, b) = ([1.0, 2.0, 0.5], [-1.0, 0.0, 3.0]);
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let mut other = PoolState::new(theta0.clone());
    for v in [b, a] {
        other.push(TaskVector::dense(&ParamVector::new(layout.clone(), v.to_vec()).unwrap())).unwrap();
    }
    let cross = alignment(&pool(1.0), &other).unwrap();
    assert!((cross.per_task[0] - dot / (norm(&a) * norm(&b))).abs() < 1e-12);
}

#[test]
fn unlearning_orthogonal_vectors_is_symmetric() {
    let layout = Arc::new(ParamLayout::new(vec![LayoutEntry::new("w", vec![3], EntryKind::BackboneBias)]).unwrap());
    let theta0 = ParamVector::new(layout.clone(), vec![0.3, -1.0, 2.0]).unwrap();
    let mut pool = PoolState::new(theta0.clone());
    for i in 0..3 {
        let mut v = vec![0.0; 3];
        v[i] = 2.0;
        pool.push(TaskVector::dense(&ParamVector::new(layout.clone(), v).unwrap())).unwrap();
    }
    let dist: Vec<f64> = (1..=3)
        .map(|t| {
            let th = pool.edit_unlearn(t, UnlearnMode::Renormalize).unwrap();
            norm(&th.values().iter().zip(theta0.values()).map(|(a, b)| a - b).collect::<Vec<_>>())
        })
        .collect();
    // Each result is the mean of two orthogonal vectors of norm 2: √2.
    for d in dist {
        assert!((d - 2f64.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn duplicated_rows_and_separated_logits() {
    let spec = NetSpec {
        input_dim: 2,
        hidden: vec![3],
        activation: Activation::Tanh,
        head_dims: vec![2],
    };
    let (net, theta) = spec.init(2).unwrap();
    let range = ClassRange::new(0, 2).unwrap();
    let one = Batch::new(Matrix::from_rows(&[vec![0.5, -0.2]]), vec![1]).unwrap();
    let two = Batch::new(Matrix::from_rows(&[vec![0.5, -0.2], vec![0.5, -0.2]]), vec![1, 1]).unwrap();
    let (l1, g1) = net.loss_and_grad(&theta, &one, range).unwrap();
    let (l2, g2) = net.loss_and_grad(&theta, &two, range).unwrap();
    assert!((l1 - l2).abs() < 1e-15);
    assert!(g1.iter().zip(&g2).all(|(a, b)| (a - b).abs() < 1e-15));

    // Scale a head that already ranks class 1 first.
    let arch = net.arch(theta.layout()).unwrap();
    let [w, b] = arch.head_param_ranges(0);
    let mut base = theta.values().to_vec();
    for v in &mut base[w.clone()] {
        *v = 0.0;
    }
    base[b.start] = -1.0;
    base[b.start + 1] = 1.0;
    let mut prev = f64::INFINITY;
    for scale in [1.0, 2.0, 4.0, 8.0, 16.0] {
        let mut v = base.clone();
        v[b.start] *= scale;
        v[b.start + 1] *= scale;
        let l = net.loss(&ParamVector::new(theta.layout().clone(), v).unwrap(), &one, range).unwrap();
        assert!(l < prev);
        prev = l;
    }
    assert!(prev < 1e-12);
}

#[test]
fn csv_split_membership_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let mut text = String::new();
    for i in [7, 3, 11, 0, 5, 9, 1, 10, 2, 8, 4, 6, 13, 12, 15, 14, 17, 16, 19, 18] {
        text += &format!("{i},{},{}\n", i * i, i % 4);
    }
    std::fs::write(&path, text).unwrap();
    let members = |seed: u64| {
        let s = load_csv(&path, 2, false, 2, seed).unwrap();
        s.tasks()
            .iter()
            .map(|t| {
                let mut v: Vec<i64> = (0..t.val.len()).map(|i| t.val.inputs.row(i)[0] as i64).collect();
                v.sort();
                v
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(members(3), members(3));
}
