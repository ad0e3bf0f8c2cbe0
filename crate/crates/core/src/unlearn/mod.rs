//! Certified unlearning: correction, calibrated noise, flooding, application.

mod correction;
mod flood;
mod noise;

use std::collections::HashSet;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

pub use correction::{newton_correction_client, newton_correction_samples};
pub use flood::{flood_broadcast, DeliveryReport};
pub use noise::{noise_scale, perturb, sensitivity, PrivacyBudget};

use crate::data::{DeletionRequest, Granularity, Samples};
use crate::dpsgd::{self, ClientState, TrainConfig};
use crate::error::{invalid, Error, Result};
use crate::exec::Execution;
use crate::models::{LossModel, SmoothnessConstants};
use crate::rng;
use crate::topology::MixingMatrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    Calibrated,
    /// Skips the Gaussian draw; only for exactness tests.
    Disabled,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UnlearnOptions {
    pub noise: NoiseMode,
    pub noise_seed: u64,
    /// Defaults to a quarter of all samples held by the clients.
    pub capacity: Option<usize>,
    pub execution: Execution,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectiveUpdate {
    pub origin_client: usize,
    pub delta: DVector<f64>,
    pub sigma: f64,
    pub sequence_no: usize,
    /// Weight each receiver applies.
    pub weight: f64,
    /// Norms before noise, for audit replay.
    pub correction_norm: f64,
    pub noise_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub client: usize,
    pub granularity: Granularity,
    pub m: usize,
    pub n: usize,
    pub lambda: f64,
    #[serde(rename = "L")]
    pub lipschitz: f64,
    #[serde(rename = "M")]
    pub hessian_lipschitz: f64,
    #[serde(rename = "deltaF")]
    pub delta_f: f64,
    pub sigma: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub noise_seed: u64,
    pub noise_enabled: bool,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct UnlearnOutcome {
    pub records: Vec<AuditRecord>,
    pub updates: Vec<CorrectiveUpdate>,
    pub deliveries: Vec<DeliveryReport>,
    /// Mixing for the surviving clients.
    pub mixing: MixingMatrix,
}

pub fn default_capacity(total_samples: usize) -> usize {
    total_samples / 4
}

struct Pending {
    record: AuditRecord,
    update: CorrectiveUpdate,
}

/// Applies `request` to `clients`, which must hold statistics collected for it.
///
/// All validation and every correction happen before any client is mutated.
pub fn unlearn<S: Samples + ?Sized>(
    clients: &mut Vec<ClientState>,
    mixing: &MixingMatrix,
    data: &S,
    model: &LossModel,
    constants: &SmoothnessConstants,
    request: &DeletionRequest,
    options: &UnlearnOptions,
) -> Result<UnlearnOutcome> {
    request.budget.validate()?;
    let total: usize = clients.iter().map(|c| c.shard.len()).sum();
    let capacity = options.capacity.unwrap_or_else(|| default_capacity(total));
    if request.total_deleted() > capacity {
        return Err(Error::CapacityExceeded { requested: request.total_deleted(), capacity });
    }
    if mixing.n_nodes() != clients.len() {
        return Err(Error::DimensionMismatch { expected: mixing.n_nodes(), got: clients.len() });
    }
    let ids: Vec<usize> = clients.iter().map(|c| c.id).collect();
    let position = |id: usize| ids.iter().position(|&c| c == id).ok_or_else(|| invalid(format!("unknown client {id}")));
    for t in &request.targets {
        let c = &clients[position(t.client)?];
        let held: HashSet<usize> = c.shard.iter().copied().collect();
        if let Some(bad) = t.indices.iter().find(|i| !held.contains(i)) {
            return Err(invalid(format!("index {bad} is not held by client {}", t.client)));
        }
    }
    let n_clients = clients.len();
    let pending: Vec<Pending> = match request.granularity {
        Granularity::Samples | Granularity::Class => {
            let work: Vec<(usize, &[usize])> =
                request.targets.iter().map(|t| Ok((position(t.client)?, t.indices.as_slice()))).collect::<Result<_>>()?;
            let snapshot: &[ClientState] = clients;
            options
                .execution
                .map(&work, |&(pos, deleted)| {
                    let started = Instant::now();
                    let client = &snapshot[pos];
                    let correction = newton_correction_samples(client, deleted, data, model)?;
                    finish(client.id, request, constants, options, correction, deleted.len(), client.shard.len(), 1.0 / n_clients as f64, started)
                })
                .into_iter()
                .collect::<Result<_>>()?
        }
        Granularity::Client => {
            let target = request.targets.first().ok_or_else(|| Error::EmptyTarget("client removal names no client".into()))?;
            let started = Instant::now();
            let correction = newton_correction_client(clients, target.client, data, model)?;
            vec![finish(target.client, request, constants, options, correction, target.indices.len(), total, 1.0, started)?]
        }
    };
    let next_mixing = match request.granularity {
        Granularity::Client => mixing.without_node(position(request.targets[0].client)?)?,
        _ => mixing.clone(),
    };

    let mut records = Vec::new();
    let mut updates = Vec::new();
    let mut deliveries = Vec::new();
    for (seq, mut p) in pending.into_iter().enumerate() {
        p.update.sequence_no = seq;
        let origin = position(p.update.origin_client)?;
        let report = flood_broadcast(mixing.graph(), origin, |i| {
            clients[i].model.axpy(p.update.weight, &p.update.delta, 1.0);
        })?;
        deliveries.push(report);
        records.push(p.record);
        updates.push(p.update);
    }

    for t in &request.targets {
        let pos = position(t.client)?;
        let gone: HashSet<usize> = t.indices.iter().copied().collect();
        clients[pos].shard.retain(|i| !gone.contains(i));
    }
    if request.granularity == Granularity::Client {
        let pos = position(request.targets[0].client)?;
        clients.remove(pos);
    }
    for c in clients.iter_mut() {
        c.statistic = None;
    }
    Ok(UnlearnOutcome { records, updates, deliveries, mixing: next_mixing })
}

#[allow(clippy::too_many_arguments)]
fn finish(
    client: usize,
    request: &DeletionRequest,
    constants: &SmoothnessConstants,
    options: &UnlearnOptions,
    correction: DVector<f64>,
    m: usize,
    n: usize,
    weight: f64,
    started: Instant,
) -> Result<Pending> {
    let delta_f = sensitivity(constants, m, n)?;
    let enabled = options.noise == NoiseMode::Calibrated;
    let sigma = if enabled { noise_scale(delta_f, &request.budget) } else { 0.0 };
    let noise_seed = rng::derive_seed(options.noise_seed, client as u64);
    let delta = perturb(&correction, sigma, noise_seed);
    let update = CorrectiveUpdate {
        origin_client: client,
        correction_norm: correction.norm(),
        noise_norm: (&delta - &correction).norm(),
        delta,
        sigma,
        sequence_no: 0,
        weight,
    };
    let record = AuditRecord {
        client,
        granularity: request.granularity,
        m,
        n,
        lambda: constants.lambda,
        lipschitz: constants.lipschitz,
        hessian_lipschitz: constants.hessian_lipschitz,
        delta_f,
        sigma,
        epsilon: request.budget.epsilon,
        delta: request.budget.delta,
        noise_seed,
        noise_enabled: enabled,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    Ok(Pending { record, update })
}

/// Continues D-PSGD on the retained shards for `rounds` rounds starting at `start_round`.
#[allow(clippy::too_many_arguments)]
pub fn finetune<S: Samples + ?Sized>(
    clients: &mut [ClientState],
    mixing: &MixingMatrix,
    data: &S,
    model: &LossModel,
    config: &TrainConfig,
    start_round: usize,
    rounds: usize,
    execution: Execution,
) -> Result<()> {
    if rounds == 0 {
        return Ok(());
    }
    dpsgd::train_rounds(clients, mixing, data, model, config, start_round, rounds, execution, &mut |_, _| Ok(true)).map(|_| ())
}
