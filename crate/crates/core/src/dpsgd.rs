//! Synchronous decentralized SGD over a mixing matrix.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DeletionRequest, Granularity, Partition, Samples};
use crate::error::{invalid, Error, Result};
use crate::exec::Execution;
use crate::linalg;
use crate::models::LossModel;
use crate::rng::{self, Domain};
use crate::topology::MixingMatrix;

pub const DIVERGENCE_LIMIT: f64 = 1e6;
pub const FISHER_RIDGE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatMode {
    #[default]
    ExactHessian,
    Fisher,
}

/// Curvature summary stored on a client at request time.
#[derive(Clone, Debug, PartialEq)]
pub enum Statistic {
    /// Mean Hessian of the regularized loss over `samples` rows.
    Hessian { matrix: DMatrix<f64>, samples: usize },
    /// Data-term gradients as columns; the surrogate is `G G^T / k + ridge I`.
    Fisher { gradients: DMatrix<f64>, ridge: f64 },
}

impl Statistic {
    pub fn samples(&self) -> usize {
        match self {
            Statistic::Hessian { samples, .. } => *samples,
            Statistic::Fisher { gradients, .. } => gradients.ncols(),
        }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        match self {
            Statistic::Hessian { matrix, .. } => matrix.clone(),
            Statistic::Fisher { gradients, ridge } => {
                let k = gradients.ncols().max(1) as f64;
                let mut m = gradients * gradients.transpose() / k;
                for i in 0..m.nrows() {
                    m[(i, i)] += ridge;
                }
                m
            }
        }
    }

    /// Solves `stat * z = b` without forming an inverse.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Statistic::Hessian { matrix, .. } => linalg::spd_solve(matrix, b),
            Statistic::Fisher { gradients, ridge } => {
                if gradients.ncols() == 0 {
                    return Ok(b / *ridge);
                }
                linalg::low_rank_solve(gradients, 1.0 / gradients.ncols() as f64, *ridge, b)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    /// Original client id; keys the random streams and survives client removal.
    pub id: usize,
    pub model: DVector<f64>,
    pub shard: Vec<usize>,
    pub statistic: Option<Statistic>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rounds: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub stat_mode: StatMode,
    #[serde(default)]
    pub init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { rounds: 1000, lr: 0.001, batch_size: 100, seed: 0, stat_mode: StatMode::ExactHessian, init_std: 0.0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if !(self.init_std >= 0.0) {
            return Err(invalid("init_std must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub mean_train_loss: f64,
    pub test_acc: f64,
    pub consensus_residual: f64,
}

/// Every client starts from the same seeded vector.
pub fn init_clients(partition: &Partition, dim: usize, config: &TrainConfig) -> Vec<ClientState> {
    init_clients_with_ids(partition.shards.iter().cloned().enumerate(), dim, config)
}

/// As [`init_clients`] for an explicit `(id, shard)` list, e.g. the survivors of a removal.
pub fn init_clients_with_ids(
    shards: impl IntoIterator<Item = (usize, Vec<usize>)>,
    dim: usize,
    config: &TrainConfig,
) -> Vec<ClientState> {
    let mut rng = rng::stream(config.seed, Domain::Init, 0, 0);
    let init = match Normal::new(0.0, config.init_std) {
        Ok(normal) if config.init_std > 0.0 => DVector::from_fn(dim, |_, _| normal.sample(&mut rng)),
        _ => DVector::zeros(dim),
    };
    shards
        .into_iter()
        .map(|(id, shard)| ClientState { id, model: init.clone(), shard, statistic: None })
        .collect()
}

fn minibatch_grad<S: Samples + ?Sized>(
    client: &ClientState,
    data: &S,
    model: &LossModel,
    config: &TrainConfig,
    round: usize,
) -> DVector<f64> {
    let mut g = DVector::zeros(model.dim());
    let len = client.shard.len();
    let x = client.model.as_slice();
    if len == 0 {
        g.axpy(model.lambda, &client.model, 0.0);
        return g;
    }
    let b = config.batch_size.min(len);
    let w = 1.0 / b as f64;
    let push = |i: usize, g: &mut DVector<f64>| {
        model.add_grad(x, data.features(i), data.label(i), w, true, g.as_mut_slice());
    };
    if b == len {
        for &i in &client.shard {
            push(i, &mut g);
        }
    } else {
        let mut rng = rng::stream(config.seed, Domain::Minibatch, client.id as u64, round as u64);
        for k in rand::seq::index::sample(&mut rng, len, b) {
            push(client.shard[k], &mut g);
        }
    }
    g
}

/// Runs rounds `start..start + count`, calling `observer` after each one.
#[allow(clippy::too_many_arguments)]
pub fn train_rounds<S: Samples + ?Sized>(
    clients: &mut [ClientState],
    mixing: &MixingMatrix,
    data: &S,
    model: &LossModel,
    config: &TrainConfig,
    start: usize,
    count: usize,
    execution: Execution,
    observer: &mut dyn FnMut(usize, &[ClientState]) -> Result<bool>,
) -> Result<usize> {
    config.validate()?;
    let n = clients.len();
    if mixing.n_nodes() != n {
        return Err(Error::DimensionMismatch { expected: mixing.n_nodes(), got: n });
    }
    let d = model.dim();
    if let Some(bad) = clients.iter().find(|c| c.model.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: bad.model.len() });
    }
    let q = mixing.weights();
    for round in start..start + count {
        let grads = execution.map(clients, |c| minibatch_grad(c, data, model, config, round));
        let snapshot: &[ClientState] = clients;
        let next = execution.map_range(n, |i| {
            let mut acc = DVector::zeros(d);
            for (j, other) in snapshot.iter().enumerate() {
                let w = q[(i, j)];
                if w != 0.0 {
                    acc.axpy(w, &other.model, 1.0);
                }
            }
            acc.axpy(-config.lr, &grads[i], 1.0);
            acc
        });
        for (c, x) in clients.iter_mut().zip(next) {
            c.model = x;
        }
        if let Some(norm) = clients.iter().map(|c| c.model.norm()).find(|v| !(v <= &DIVERGENCE_LIMIT)) {
            return Err(Error::Diverged { round, norm });
        }
        if !observer(round, clients)? {
            return Ok(round + 1 - start);
        }
    }
    Ok(count)
}

pub fn train<S: Samples + ?Sized>(
    clients: &mut [ClientState],
    mixing: &MixingMatrix,
    data: &S,
    model: &LossModel,
    config: &TrainConfig,
    execution: Execution,
) -> Result<()> {
    train_rounds(clients, mixing, data, model, config, 0, config.rounds, execution, &mut |_, _| Ok(true)).map(|_| ())
}

/// Trains until the average-model loss changes by less than `tol` over `window` rounds.
///
/// Returns the number of rounds run.
#[allow(clippy::too_many_arguments)]
pub fn train_until_converged<S: Samples + ?Sized>(
    clients: &mut [ClientState],
    mixing: &MixingMatrix,
    data: &S,
    model: &LossModel,
    config: &TrainConfig,
    tol: f64,
    window: usize,
    max_rounds: usize,
    execution: Execution,
) -> Result<usize> {
    let all: Vec<usize> = clients.iter().flat_map(|c| c.shard.iter().copied()).collect();
    let window = window.max(1);
    let mut last = model.mean_loss(&average_model(clients)?, data, &all);
    train_rounds(clients, mixing, data, model, config, 0, max_rounds, execution, &mut |round, cs| {
        if (round + 1) % window != 0 {
            return Ok(true);
        }
        let now = model.mean_loss(&average_model(cs)?, data, &all);
        let keep_going = (last - now).abs() >= tol;
        last = now;
        Ok(keep_going)
    })
}

/// Stores the curvature statistic on every client.
///
/// Clients named in a sample or class request use their retained rows; everyone
/// else, including a client being removed, uses the full shard.
pub fn collect_statistics<S: Samples + ?Sized>(
    clients: &mut [ClientState],
    data: &S,
    model: &LossModel,
    mode: StatMode,
    request: Option<&DeletionRequest>,
    execution: Execution,
) -> Result<()> {
    let retained: Vec<Vec<usize>> = clients
        .iter()
        .map(|c| match request.and_then(|r| (r.granularity != Granularity::Client).then(|| r.target(c.id)).flatten()) {
            Some(t) => {
                let gone: std::collections::HashSet<usize> = t.indices.iter().copied().collect();
                let keep: Vec<usize> = c.shard.iter().copied().filter(|i| !gone.contains(i)).collect();
                if keep.is_empty() {
                    Err(Error::EmptyRetained { client: c.id })
                } else {
                    Ok(keep)
                }
            }
            None => Ok(c.shard.clone()),
        })
        .collect::<Result<_>>()?;
    let stats = execution.map_range(clients.len(), |k| statistic_for(&clients[k].model, &retained[k], data, model, mode));
    for (c, s) in clients.iter_mut().zip(stats) {
        c.statistic = Some(s);
    }
    Ok(())
}

pub fn statistic_for<S: Samples + ?Sized>(
    x: &DVector<f64>,
    rows: &[usize],
    data: &S,
    model: &LossModel,
    mode: StatMode,
) -> Statistic {
    match mode {
        StatMode::ExactHessian => Statistic::Hessian { matrix: model.mean_hessian(x, data, rows), samples: rows.len() },
        StatMode::Fisher => {
            let d = model.dim();
            let mut g = DMatrix::zeros(d, rows.len());
            let mut buf = vec![0.0; d];
            for (col, &i) in rows.iter().enumerate() {
                buf.iter_mut().for_each(|v| *v = 0.0);
                model.add_grad(x.as_slice(), data.features(i), data.label(i), 1.0, false, &mut buf);
                g.column_mut(col).copy_from_slice(&buf);
            }
            Statistic::Fisher { gradients: g, ridge: model.lambda.max(FISHER_RIDGE_FLOOR) }
        }
    }
}

/// Uniform mean, summed in client order.
pub fn average_model(clients: &[ClientState]) -> Result<DVector<f64>> {
    let first = clients.first().ok_or_else(|| invalid("no clients to average"))?;
    let mut acc = DVector::zeros(first.model.len());
    for c in clients {
        if c.model.len() != acc.len() {
            return Err(Error::DimensionMismatch { expected: acc.len(), got: c.model.len() });
        }
        acc += &c.model;
    }
    Ok(acc / clients.len() as f64)
}

/// `max_i |x_i - mean|`.
pub fn consensus_residual(clients: &[ClientState]) -> Result<f64> {
    let mean = average_model(clients)?;
    Ok(clients.iter().map(|c| (&c.model - &mean).norm()).fold(0.0, f64::max))
}

pub fn round_metrics<S: Samples + ?Sized, T: Samples + ?Sized>(
    round: usize,
    clients: &[ClientState],
    train: &S,
    test: &T,
    test_indices: &[usize],
    model: &LossModel,
) -> Result<RoundMetrics> {
    let mean_train_loss =
        clients.iter().map(|c| model.mean_loss(&c.model, train, &c.shard)).sum::<f64>() / clients.len().max(1) as f64;
    let avg = average_model(clients)?;
    Ok(RoundMetrics {
        round,
        mean_train_loss,
        test_acc: model.accuracy(&avg, test, test_indices),
        consensus_residual: consensus_residual(clients)?,
    })
}
