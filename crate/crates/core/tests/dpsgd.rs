use dfu_core::data::{make_request, partition, synth_blobs, Dataset, Partition, PartitionMode, RequestSpec, Samples};
use dfu_core::dpsgd::{
    average_model, collect_statistics, consensus_residual, init_clients, round_metrics, train, train_rounds, ClientState,
    StatMode, Statistic, TrainConfig,
};
use dfu_core::models::{LossKind, LossModel};
use dfu_core::topology::{build_erdos_renyi, build_ring};
use dfu_core::unlearn::PrivacyBudget;
use dfu_core::Execution;
use nalgebra::{DMatrix, DVector};

fn scalar_data(values: &[f64]) -> Dataset {
    Dataset::new(vec![1.0; values.len()], 1, values.to_vec()).unwrap()
}

fn config(rounds: usize, lr: f64, batch_size: usize) -> TrainConfig {
    TrainConfig { rounds, lr, batch_size, seed: 5, ..TrainConfig::default() }
}

#[test]
fn single_client_recovers_the_mean() {
    let data = scalar_data(&[1.0, 2.0, 3.0]);
    let model = LossModel::new(LossKind::LeastSquares, 1, 0.0).unwrap();
    let p = Partition { shards: vec![vec![0, 1, 2]] };
    let mut clients = init_clients(&p, 1, &config(200, 0.5, 3));
    train(&mut clients, &build_ring(1).unwrap(), &data, &model, &config(200, 0.5, 3), Execution::Sequential).unwrap();
    assert!((clients[0].model[0] - 2.0).abs() < 1e-6);
}

#[test]
fn identical_clients_stay_identical() {
    let base = synth_blobs(30, 3, 2, 4).unwrap();
    let twice: Vec<usize> = (0..30).chain(0..30).collect();
    let data = base.subset(&twice).unwrap();
    let model = LossModel::new(LossKind::Logistic, 3, 0.1).unwrap();
    let p = Partition { shards: vec![(0..30).collect(), (30..60).collect()] };
    let cfg = config(1, 0.1, 30);
    let q = build_erdos_renyi(2, 1.0, 0).unwrap();
    let mut clients = init_clients(&p, 3, &cfg);
    for round in 0..50 {
        train_rounds(&mut clients, &q, &data, &model, &cfg, round, 1, Execution::Parallel, &mut |_, _| Ok(true)).unwrap();
        assert_eq!(clients[0].model, clients[1].model);
    }
}

fn ring_setup(rounds: usize) -> (Vec<ClientState>, Dataset, LossModel) {
    let data = synth_blobs(1000, 5, 2, 21).unwrap();
    let model = LossModel::new(LossKind::Logistic, 5, 0.1).unwrap();
    let p = partition(&data, 10, PartitionMode::Dirichlet { alpha: 0.3 }, 2).unwrap();
    let cfg = TrainConfig { init_std: 0.5, ..config(rounds, 0.05, 20) };
    let mut clients = init_clients(&p, 5, &cfg);
    // distinct starting points, so consensus has work to do
    for c in clients.iter_mut() {
        c.model[c.id % 5] += 2.0;
    }
    train(&mut clients, &build_ring(10).unwrap(), &data, &model, &cfg, Execution::Parallel).unwrap();
    (clients, data, model)
}

#[test]
fn consensus_residual_shrinks_with_rounds() {
    let (short, _, _) = ring_setup(20);
    let (long, _, _) = ring_setup(200);
    assert!(consensus_residual(&long).unwrap() < consensus_residual(&short).unwrap());
}

#[test]
fn retained_hessian_of_quadratic_is_one() {
    let data = scalar_data(&[1.0, 2.0, 3.0]);
    let model = LossModel::new(LossKind::LeastSquares, 1, 0.0).unwrap();
    let p = Partition { shards: vec![vec![0, 1, 2]] };
    let mut clients = init_clients(&p, 1, &config(1, 0.1, 3));
    let req = make_request(&p, &data, &RequestSpec::Samples { client: 0, indices: vec![2] }, PrivacyBudget::new(1.0, 0.05).unwrap(), 0).unwrap();
    collect_statistics(&mut clients, &data, &model, StatMode::ExactHessian, Some(&req), Execution::Sequential).unwrap();
    match clients[0].statistic.as_ref().unwrap() {
        Statistic::Hessian { matrix, samples } => {
            assert_eq!(matrix, &DMatrix::from_element(1, 1, 1.0));
            assert_eq!(*samples, 2);
        }
        other => panic!("unexpected {other:?}"),
    }
    let all = make_request(&p, &data, &RequestSpec::Samples { client: 0, indices: vec![0, 1, 2] }, PrivacyBudget::new(1.0, 0.05).unwrap(), 0).unwrap();
    assert!(collect_statistics(&mut clients, &data, &model, StatMode::ExactHessian, Some(&all), Execution::Sequential).is_err());
}

#[test]
fn fisher_single_sample_is_outer_product() {
    let data = Dataset::new(vec![0.5, -1.0], 2, vec![1.0]).unwrap();
    let model = LossModel::new(LossKind::Logistic, 2, 0.0).unwrap();
    let p = Partition { shards: vec![vec![0]] };
    let mut clients = init_clients(&p, 2, &config(1, 0.1, 1));
    clients[0].model = DVector::from_vec(vec![0.3, 0.2]);
    collect_statistics(&mut clients, &data, &model, StatMode::Fisher, None, Execution::Sequential).unwrap();
    let g = model.grad(&clients[0].model, data.features(0), 1.0).unwrap();
    let stat = clients[0].statistic.as_ref().unwrap();
    match stat {
        Statistic::Fisher { gradients, ridge } => {
            assert_eq!(gradients.column(0).into_owned(), g);
            assert_eq!(*ridge, 1e-6);
        }
        other => panic!("unexpected {other:?}"),
    }
    let outer = &g * g.transpose();
    let dense = stat.dense();
    assert!((dense - outer - DMatrix::identity(2, 2) * 1e-6).norm() < 1e-15);
}

#[test]
fn shard_hessian_matches_finite_differences() {
    let data = synth_blobs(50, 4, 2, 8).unwrap();
    let model = LossModel::new(LossKind::Logistic, 4, 0.2).unwrap();
    let p = Partition { shards: vec![(0..50).collect()] };
    let mut clients = init_clients(&p, 4, &config(1, 0.1, 50));
    clients[0].model = DVector::from_vec(vec![0.4, -0.3, 0.2, 0.1]);
    collect_statistics(&mut clients, &data, &model, StatMode::ExactHessian, None, Execution::Sequential).unwrap();
    let h = clients[0].statistic.as_ref().unwrap().dense();
    let x = clients[0].model.clone();
    let shard = &clients[0].shard;
    let step = 1e-5;
    let mut fd = DMatrix::zeros(4, 4);
    for k in 0..4 {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[k] += step;
        minus[k] -= step;
        let col = (model.mean_grad(&plus, &data, shard) - model.mean_grad(&minus, &data, shard)) / (2.0 * step);
        fd.set_column(k, &col);
    }
    assert!((&h - &fd).norm() / h.norm() <= 1e-4);
}

#[test]
fn averaging_examples() {
    let mk = |id, v: Vec<f64>| ClientState { id, model: DVector::from_vec(v), shard: vec![], statistic: None };
    assert_eq!(average_model(&[mk(0, vec![1.0, 2.0])]).unwrap(), DVector::from_vec(vec![1.0, 2.0]));
    let avg = average_model(&[mk(0, vec![1.5, -2.0]), mk(1, vec![-1.5, 2.0])]).unwrap();
    assert!(avg.iter().all(|&v| v == 0.0));
    let vectors: Vec<Vec<f64>> = (0..10).map(|i| (0..4).map(|j| ((i * 31 + j * 7) % 13) as f64 / 7.0 - 0.9).collect()).collect();
    let clients: Vec<ClientState> = vectors.iter().cloned().enumerate().map(|(i, v)| mk(i, v)).collect();
    let avg = average_model(&clients).unwrap();
    for j in 0..4 {
        let oracle = vectors.iter().map(|v| v[j]).sum::<f64>() / 10.0;
        assert!((avg[j] - oracle).abs() <= 1e-12);
    }
    assert!(average_model(&[]).is_err());
}

#[test]
fn mixing_conserves_the_sum() {
    let q = build_erdos_renyi(9, 0.4, 3).unwrap();
    let xs: Vec<DVector<f64>> = (0..9).map(|i| DVector::from_fn(3, |j, _| ((i * 5 + j * 3) % 11) as f64 - 4.0)).collect();
    let before: DVector<f64> = xs.iter().fold(DVector::zeros(3), |a, x| a + x);
    let mixed: DVector<f64> = (0..9)
        .map(|i| (0..9).fold(DVector::zeros(3), |a: DVector<f64>, j| a + &xs[j] * q.weights()[(i, j)]))
        .fold(DVector::zeros(3), |a, x| a + x);
    let scale: f64 = xs.iter().map(|x| x.norm()).sum();
    assert!((before - mixed).norm() <= 1e-9 * scale);
}

#[test]
fn runs_are_bit_identical_across_execution_modes() {
    let data = synth_blobs(400, 4, 2, 3).unwrap();
    let model = LossModel::new(LossKind::Logistic, 4, 0.1).unwrap();
    let p = partition(&data, 8, PartitionMode::Iid, 1).unwrap();
    let q = build_ring(8).unwrap();
    let cfg = TrainConfig { init_std: 0.1, ..config(60, 0.05, 10) };
    let run = |mode| {
        let mut clients = init_clients(&p, 4, &cfg);
        train(&mut clients, &q, &data, &model, &cfg, mode).unwrap();
        clients.into_iter().map(|c| c.model).collect::<Vec<_>>()
    };
    let a = run(Execution::Parallel);
    assert_eq!(a, run(Execution::Parallel));
    assert_eq!(a, run(Execution::Sequential));
}

#[test]
fn global_loss_settles_monotonically() {
    let data = synth_blobs(600, 4, 2, 6).unwrap();
    let model = LossModel::new(LossKind::Logistic, 4, 0.5).unwrap();
    let p = partition(&data, 6, PartitionMode::Iid, 1).unwrap();
    let q = build_ring(6).unwrap();
    let cfg = config(400, 0.005, 50);
    let mut clients = init_clients(&p, 4, &cfg);
    let all = data.all_indices();
    let mut losses = Vec::new();
    train_rounds(&mut clients, &q, &data, &model, &cfg, 0, cfg.rounds, Execution::Parallel, &mut |_, cs| {
        losses.push(model.mean_loss(&average_model(cs)?, &data, &all));
        Ok(true)
    })
    .unwrap();
    let smooth: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for w in smooth[smooth.len() / 2..].windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn divergence_guard_trips() {
    let data = Dataset::new(vec![100.0, 100.0], 1, vec![1.0, -1.0]).unwrap();
    let model = LossModel::new(LossKind::LeastSquares, 1, 0.0).unwrap();
    let p = Partition { shards: vec![vec![0, 1]] };
    let cfg = config(100, 1.0, 2);
    let mut clients = init_clients(&p, 1, &cfg);
    clients[0].model[0] = 1.0;
    let err = train(&mut clients, &build_ring(1).unwrap(), &data, &model, &cfg, Execution::Sequential).unwrap_err();
    assert!(matches!(err, dfu_core::Error::Diverged { .. }));
}

#[test]
fn metrics_report_sane_values() {
    let (clients, data, model) = ring_setup(50);
    let m = round_metrics(49, &clients, &data, &data, &data.all_indices(), &model).unwrap();
    assert!(m.mean_train_loss.is_finite() && (0.0..=1.0).contains(&m.test_acc) && m.consensus_residual >= 0.0);
}
