//! End-to-end protocol runs on small synthetic tasks.

use graft::datagen::{gen_task_pair, gen_task_triple, standardize, Dataset, PairMode, Split, SplitSizes, TaskPairParams};
use graft::protocol::{cross_matrix, evaluate, gradual_transfer, gradual_transfer_observed, sweep, train_primary, TrainConfig, TransferPhase};
use graft::surgery::{transplant, FreezeSelector};
use graft::zoo::{block_boundaries, Preset};

fn params(seed: u64, train: usize) -> TaskPairParams {
    TaskPairParams {
        seed,
        samples: SplitSizes {
            train,
            val: train / 4,
            test: train / 2,
        },
        ..TaskPairParams::default()
    }
}

fn pair(p: &TaskPairParams) -> (Dataset, Dataset) {
    let (a, b) = gen_task_pair(p).unwrap();
    (standardize(&a).unwrap(), standardize(&b).unwrap())
}

fn cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    }
}

/// Solves `a x = b` for several right-hand sides by Gaussian elimination
/// with partial pivoting. `a` is n x n row-major, `b` is n x m.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize, m: usize) -> Vec<f64> {
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs())).unwrap();
        for k in 0..n {
            a.swap(col * n + k, pivot * n + k);
        }
        for k in 0..m {
            b.swap(col * m + k, pivot * m + k);
        }
        let d = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            for k in 0..m {
                b[row * m + k] -= f * b[col * m + k];
            }
        }
    }
    for col in (0..n).rev() {
        for k in 0..m {
            let mut s = b[col * m + k];
            for j in col + 1..n {
                s -= a[col * n + j] * b[j * m + k];
            }
            b[col * m + k] = s / a[col * n + col];
        }
    }
    b
}

/// Ridge least-squares fit of one-hot targets on the raw features plus a
/// bias, scored by argmax on `eval`.
fn least_squares_accuracy(ds: &Dataset, fit: Split, eval: Split) -> f64 {
    let (x, y) = ds.split_batch(fit);
    let d = x.row_len() + 1;
    let k = ds.classes;
    let row = |x: &graft::tensor::Tensor, i: usize| -> Vec<f64> {
        let r = x.row_len();
        x.data()[i * r..(i + 1) * r].iter().map(|&v| v as f64).chain([1.0]).collect()
    };
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d * k];
    for i in 0..y.len() {
        let v = row(&x, i);
        for p in 0..d {
            for q in 0..d {
                gram[p * d + q] += v[p] * v[q];
            }
            rhs[p * k + y[i]] += v[p];
        }
    }
    for p in 0..d {
        gram[p * d + p] += 1e-6;
    }
    let w = solve(gram, rhs, d, k);
    let (x, y) = ds.split_batch(eval);
    let hits = (0..y.len())
        .filter(|&i| {
            let v = row(&x, i);
            let score = |c: usize| (0..d).map(|p| v[p] * w[p * k + c]).sum::<f64>();
            (0..k).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap() == y[i]
        })
        .count();
    hits as f64 / y.len() as f64
}

#[test]
fn synthetic_task_is_learnable() {
    let (a, _) = pair(&params(0, 1200));
    let ls = least_squares_accuracy(&a, Split::Train, Split::Test);
    assert!(ls > 0.95, "least squares test accuracy {ls}");
    let (ckpt, _) = train_primary(&Preset::ModelAMicro.spec(a.classes), &a, &cfg(20, 0)).unwrap();
    let acc = ckpt.provenance.metrics["test_accuracy"];
    assert!(acc > 0.95, "model-a-micro test accuracy {acc}");
}

#[test]
fn feature_extractor_transfer_reproduces_the_primary() {
    let (a, _) = pair(&params(1, 1200));
    let (ckpt, _) = train_primary(&Preset::ModelAMicro.spec(a.classes), &a, &cfg(20, 1)).unwrap();
    let primary = ckpt.provenance.metrics["test_accuracy"];
    let l_h = ckpt.spec.hidden_stages();
    let r = gradual_transfer(&ckpt, &a, l_h, &cfg(20, 2)).unwrap();
    assert!(r.phase1_metric_history.is_empty());
    assert!((r.final_metric - primary).abs() <= 0.02, "primary {primary}, transfer {}", r.final_metric);
}

#[test]
fn feature_extractor_changes_only_the_output_layer() {
    let (a, b) = pair(&params(2, 200));
    let (ckpt, _) = train_primary(&Preset::ModelBMicro.spec(a.classes), &a, &cfg(1, 0)).unwrap();
    let spec = ckpt.spec.with_classes(b.classes);
    let out = spec.output_index();
    let reference = transplant(&ckpt, &spec, 4).unwrap().checksum_excluding(Some(out));
    let mut steps = 0;
    gradual_transfer_observed(&ckpt, &b, &FreezeSelector::Stages(spec.hidden_stages()), &cfg(2, 4), &mut |phase, _, m, _| {
        assert_eq!(phase, TransferPhase::Finetune);
        assert_eq!(m.checksum_excluding(Some(out)), reference);
        steps += 1;
    })
    .unwrap();
    assert!(steps > 0);
}

#[test]
fn transfer_is_deterministic() {
    let (a, b) = pair(&params(3, 200));
    let (ckpt, _) = train_primary(&Preset::ModelAMicro.spec(a.classes), &a, &cfg(1, 0)).unwrap();
    let x = gradual_transfer(&ckpt, &b, 1, &cfg(2, 5)).unwrap();
    let y = gradual_transfer(&ckpt, &b, 1, &cfg(2, 5)).unwrap();
    assert_eq!(x, y);
    let z = gradual_transfer(&ckpt, &b, 1, &cfg(2, 6)).unwrap();
    assert_ne!(x.seeds, z.seeds);
}

#[test]
fn densenet_micro_sweep_has_one_point_per_block_group() {
    let p = TaskPairParams {
        input_shape: vec![3, 8, 8],
        ..params(4, 120)
    };
    let (a, b) = pair(&p);
    let (ckpt, _) = train_primary(&Preset::DensenetMicro.spec_with_input(a.classes, vec![3, 8, 8]), &a, &cfg(1, 0)).unwrap();
    let cuts = block_boundaries(&ckpt.spec);
    let curve = sweep(&ckpt, &b, &cuts, &cfg(1, 0), 1).unwrap();
    let ls: Vec<usize> = curve.points.iter().map(|p| p.l_c).collect();
    assert_eq!(ls.len(), 5);
    assert_eq!(ls[0], 0);
    assert_eq!(*ls.last().unwrap(), ckpt.spec.hidden_stages());
    assert!(curve.points.iter().all(|p| (0.0..=1.0).contains(&p.final_metric)));
    assert!((0.0..=1.0).contains(&curve.baseline.metric));
}

#[test]
fn cross_matrix_covers_every_ordered_pair() {
    let p = params(5, 80);
    let tasks: Vec<Dataset> = gen_task_triple(&p).unwrap().iter().map(|d| standardize(d).unwrap()).collect();
    let m = cross_matrix(&tasks, &[Preset::ModelAMicro.spec(2)], &cfg(1, 0), 1).unwrap();
    assert_eq!(m.primaries.len(), 3);
    assert_eq!(m.curves.len(), 6);
    let mut pairs: Vec<(String, String)> = m.curves.iter().map(|c| (c.primary_task_id.clone(), c.secondary_task_id.clone())).collect();
    pairs.sort();
    pairs.dedup();
    assert_eq!(pairs.len(), 6);
    assert!(pairs.iter().all(|(a, b)| a != b));
    for c in &m.curves {
        let twin = m
            .curves
            .iter()
            .find(|d| d.secondary_task_id == c.secondary_task_id && d.primary_task_id != c.primary_task_id)
            .unwrap();
        assert_eq!(c.baseline, twin.baseline);
    }

    let (a, b) = pair(&TaskPairParams {
        mode: PairMode::GeneralSpecific,
        classes_a: 4,
        classes_b: 2,
        ..params(6, 80)
    });
    let specs = [Preset::ModelAMicro.spec(2), Preset::ModelBMicro.spec(2)];
    let m = cross_matrix(&[a, b], &specs, &cfg(1, 0), 1).unwrap();
    assert_eq!(m.primaries.len(), 4);
    assert_eq!(m.curves.len(), 4);
}

#[test]
fn evaluation_matches_primary_provenance() {
    let (a, _) = pair(&params(7, 200));
    let (ckpt, _) = train_primary(&Preset::ModelAMicro.spec(a.classes), &a, &cfg(2, 0)).unwrap();
    let model = ckpt.model().unwrap();
    let acc = evaluate(&model, &a, Split::Test, graft::metrics::Metric::Accuracy).unwrap();
    assert_eq!(acc, ckpt.provenance.metrics["test_accuracy"]);
}
