mod common;

use common::{random_matrix, random_model, sinusoid_frame, TRAINABLE};
use evoforecast::gradient::{cosine_sim, norm_ratio, DynamicsMetric, GradientAnalyzer};
use evoforecast::model::RowBatch;
use evoforecast::{
    analyze_training, default_partition, train, Forecaster, ForecasterSpec, ModelKind, SegmentPartition, SegmentSpec,
    TrainConfig, WindowSample,
};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_run(kind: ModelKind, partition: &SegmentPartition) -> evoforecast::GradStats {
    let frame = sinusoid_frame(260, 2, 0.4, 3);
    let (tr, va) = (frame.slice_rows(0, 200), frame.slice_rows(200, 260));
    let l = partition.output_len();
    let spec = ForecasterSpec::new(kind, l, l, 2).with_kernel(3).with_hidden(5).with_seed(8);
    let cfg = TrainConfig { max_epochs: 5, patience: 5, batch_size: 16, ..TrainConfig::default() };
    analyze_training(&spec, &tr, &va, &cfg, partition).unwrap()
}

#[test]
fn decomposition_holds_at_every_snapshot() {
    for kind in TRAINABLE {
        let stats = toy_run(kind, &default_partition(8));
        assert_eq!(stats.history.epochs.len(), 5);
        assert!(!stats.snapshots.is_empty());
        assert!(stats.max_decomposition_residual() <= 1e-10, "{kind:?}");
    }
}

#[test]
fn similarity_matrices_obey_cosine_laws() {
    let stats = toy_run(ModelKind::Mlp, &default_partition(8));
    for snap in &stats.snapshots {
        let n = snap.sim.size();
        for i in 0..n {
            assert_eq!(snap.sim.get(i, i), Some(1.0));
            for j in 0..n {
                let v = snap.sim.get(i, j).unwrap();
                assert!((-1.0..=1.0).contains(&v));
                assert!((v - snap.sim.get(j, i).unwrap()).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn single_segment_partition_is_all_ones() {
    let partition = SegmentPartition::from_boundaries(&[0, 6], true).unwrap();
    let stats = toy_run(ModelKind::LinearDirect, &partition);
    for snap in &stats.snapshots {
        for i in 0..2 {
            for j in 0..2 {
                assert!((snap.sim.get(i, j).unwrap() - 1.0).abs() <= 1e-12);
            }
        }
        assert!((snap.norm_ratio[0].unwrap() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn analyzer_does_not_perturb_training() {
    let frame = sinusoid_frame(260, 2, 0.4, 3);
    let (tr, va) = (frame.slice_rows(0, 200), frame.slice_rows(200, 260));
    let spec = ForecasterSpec::new(ModelKind::Mlp, 8, 8, 2).with_hidden(5).with_seed(8);
    let cfg = TrainConfig { max_epochs: 4, patience: 4, batch_size: 16, ..TrainConfig::default() };
    let stats = analyze_training(&spec, &tr, &va, &cfg, &default_partition(8)).unwrap();
    let (_, plain) = train(Forecaster::build(spec).unwrap(), &tr, &va, &cfg).unwrap();
    for (a, b) in stats.history.epochs.iter().zip(&plain.epochs) {
        assert_eq!(a.val_mse.to_bits(), b.val_mse.to_bits());
        assert_eq!(a.train_mse.to_bits(), b.train_mse.to_bits());
    }
}

#[test]
fn per_epoch_means_reweight_to_global_means() {
    let stats = toy_run(ModelKind::DecompLinear, &default_partition(8));
    let all = stats.labels.len() - 1;
    for s in 0..stats.partition.segments().len() {
        for metric in [DynamicsMetric::SimVsAll, DynamicsMetric::NormRatio] {
            let (mut sum, mut n) = (0.0, 0usize);
            for e in stats.per_epoch.iter().filter(|e| e.segment == s && e.metric == metric) {
                sum += e.stat.mean.unwrap() * e.stat.n as f64;
                n += e.stat.n;
            }
            let global = match metric {
                DynamicsMetric::SimVsAll => stats.global_sim[s][all].mean.unwrap(),
                DynamicsMetric::NormRatio => stats.norm_ratio_global[s].mean.unwrap(),
            };
            assert!((sum / n as f64 - global).abs() <= 1e-10);
        }
    }
}

/// Per-step linear heads own disjoint parameter rows, so identical targets give
/// identical per-row gradient blocks in orthogonal coordinates.
#[test]
fn identical_step_targets_give_matching_orthogonal_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let t = 5;
    let mut model = Forecaster::build(ForecasterSpec::new(ModelKind::LinearDirect, t, 2, 1)).unwrap();
    let row: Vec<f64> = (0..t).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let mut params = model.get_params();
    let w = params.block_mut("weight").unwrap();
    w[..t].copy_from_slice(&row);
    w[t..].copy_from_slice(&row);
    model.set_params(&params).unwrap();

    let xs: Vec<Array2<f64>> = (0..8).map(|_| random_matrix(t, 1, &mut rng)).collect();
    let ys: Vec<Array2<f64>> = xs
        .iter()
        .map(|x| {
            let v = x.column(0).iter().enumerate().map(|(i, a)| a * (i as f64 - 1.0)).sum::<f64>();
            Array2::from_elem((2, 1), v)
        })
        .collect();
    let samples: Vec<_> = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| WindowSample { x: x.view(), y: y.view(), origin_index: 0 })
        .collect();
    let batch = RowBatch::from_samples(&samples).unwrap();
    let g = model.batch_loss_and_grads(&batch, &[SegmentSpec::new(0, 1), SegmentSpec::new(1, 2)]).unwrap();
    let (g0, g1) = (g[0].1.block("weight").unwrap(), g[1].1.block("weight").unwrap());
    for i in 0..t {
        assert!((g0[i] - g1[t + i]).abs() <= 1e-12);
        assert_eq!(g0[t + i], 0.0);
        assert_eq!(g1[i], 0.0);
    }
    assert_eq!(cosine_sim(g[0].1.values(), g[1].1.values()).unwrap(), 0.0);
}

#[test]
fn half_horizon_norm_ratio_matches_hand_gradients() {
    // T=1, L=2: prediction w_j·x + b_j, residuals r_j
    let mut model = Forecaster::build(ForecasterSpec::new(ModelKind::LinearDirect, 1, 2, 1)).unwrap();
    model.set_param_values(&[0.5, -1.0, 0.25, 0.0]).unwrap();
    let x = array![[2.0]];
    let y = array![[3.0], [1.0]];
    let (r1, r2) = (0.5 * 2.0 + 0.25 - 3.0, -2.0 - 1.0);
    let batch = RowBatch::from_samples(&[WindowSample { x: x.view(), y: y.view(), origin_index: 0 }]).unwrap();
    let g = model.batch_loss_and_grads(&batch, &[SegmentSpec::new(0, 1), SegmentSpec::full(2)]).unwrap();
    assert_eq!(g[0].1.values(), &[2.0 * r1 * 2.0, 0.0, 2.0 * r1, 0.0]);
    assert_eq!(g[1].1.values(), &[r1 * 2.0, r2 * 2.0, r1, r2]);
    let want = 2.0 * r1.abs() / (r1 * r1 + r2 * r2).sqrt();
    assert!((norm_ratio(g[0].1.values(), g[1].1.values()).unwrap() - want).abs() <= 1e-15);
}

#[test]
fn similarities_ignore_the_error_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let partition = default_partition(6);
    for case in 0..30 {
        let kind = TRAINABLE[case % 3];
        let model = random_model(kind, 5, 6, 2, &mut rng);
        let xs: Vec<Array2<f64>> = (0..4).map(|_| random_matrix(5, 2, &mut rng)).collect();
        let ys: Vec<Array2<f64>> = (0..4).map(|_| random_matrix(6, 2, &mut rng)).collect();
        let c = rng.gen_range(0.1..10.0);
        // same predictions, residuals scaled by c
        let scaled: Vec<Array2<f64>> = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| {
                let p = model.predict(x.view()).unwrap();
                &p + &((y - &p) * c)
            })
            .collect();
        let snap = |targets: &[Array2<f64>]| {
            let samples: Vec<_> = xs
                .iter()
                .zip(targets)
                .map(|(x, y)| WindowSample { x: x.view(), y: y.view(), origin_index: 0 })
                .collect();
            let batch = RowBatch::from_samples(&samples).unwrap();
            let full = model.batch_loss_and_grads(&batch, &[SegmentSpec::full(6)]).unwrap().pop().unwrap().1;
            GradientAnalyzer::new(partition.clone()).snapshot(1, 0, &model, &batch, &full).unwrap()
        };
        let (a, b) = (snap(&ys), snap(&scaled));
        for i in 0..a.sim.size() {
            for j in 0..a.sim.size() {
                assert!((a.sim.get(i, j).unwrap() - b.sim.get(i, j).unwrap()).abs() <= 1e-12);
            }
        }
        for (p, q) in a.norm_ratio.iter().zip(&b.norm_ratio) {
            assert!((p.unwrap() - q.unwrap()).abs() <= 1e-12);
        }
    }
}

#[test]
fn csv_exports_have_fixed_headers() {
    let stats = toy_run(ModelKind::LinearDirect, &default_partition(8));
    let sim = stats.similarity_csv();
    assert!(sim.starts_with("row_segment,col_segment,mean_cosine,n_included,n_excluded\n"));
    assert_eq!(sim.lines().count(), 1 + 25);
    let dyn_csv = stats.dynamics_csv();
    assert!(dyn_csv.starts_with("epoch,segment,metric,mean,std,n_batches\n"));
    assert_eq!(dyn_csv.lines().count(), 1 + 5 * 4 * 2);
}
