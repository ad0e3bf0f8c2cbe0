//! Retrain oracle, bound checks, membership inference and curvature diagnostics.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{synth_blobs, Samples};
use crate::dpsgd::{self, ClientState, StatMode, TrainConfig};
use crate::error::{invalid, Error, Result};
use crate::exec::Execution;
use crate::linalg;
use crate::models::{LossKind, LossModel, SmoothnessConstants};
use crate::rng::{self, Domain};
use crate::topology::MixingMatrix;
use crate::unlearn::{self, PrivacyBudget};

pub const BOUND_TOLERANCE: f64 = 1e-9;

/// Fresh D-PSGD run on the retained shards with the original seeds.
pub fn retrain_oracle<S: Samples + ?Sized>(
    retained: &[(usize, Vec<usize>)],
    mixing: &MixingMatrix,
    data: &S,
    model: &LossModel,
    config: &TrainConfig,
    execution: Execution,
) -> Result<Vec<ClientState>> {
    let mut clients = dpsgd::init_clients_with_ids(retained.iter().cloned(), model.dim(), config);
    dpsgd::train(&mut clients, mixing, data, model, config, execution)?;
    Ok(clients)
}

/// Minimizer of the mean regularized loss over `rows` by damped Newton.
pub fn minimize<S: Samples + ?Sized>(model: &LossModel, data: &S, rows: &[usize], grad_tol: f64) -> Result<DVector<f64>> {
    let mut x = DVector::zeros(model.dim());
    let mut grad_norm = f64::INFINITY;
    for _ in 0..200 {
        let g = model.mean_grad(&x, data, rows);
        grad_norm = g.norm();
        if grad_norm <= grad_tol * 1e-2 {
            break;
        }
        let h = model.mean_hessian(&x, data, rows);
        let step = linalg::spd_solve(&h, &g)?;
        let f0 = model.mean_loss(&x, data, rows);
        let slope = g.dot(&step);
        if slope < 1e-10 * (1.0 + f0.abs()) {
            // loss differences are below rounding here; full steps while the gradient shrinks
            let cand = &x - &step;
            if model.mean_grad(&cand, data, rows).norm() < grad_norm {
                x = cand;
                continue;
            }
            break;
        }
        let mut t = 1.0;
        while model.mean_loss(&(&x - &step * t), data, rows) > f0 - 1e-4 * t * slope {
            t *= 0.5;
            if t < 1e-12 {
                return Err(Error::NonConvergent { grad_norm });
            }
        }
        x -= &step * t;
    }
    grad_norm = model.mean_grad(&x, data, rows).norm().min(grad_norm);
    if grad_norm > grad_tol {
        return Err(Error::NonConvergent { grad_norm });
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_name: String,
    pub client: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub tolerance: f64,
    pub satisfied: bool,
    pub instance: String,
}

impl BoundReport {
    fn new(bound_name: &str, client: usize, lhs: f64, rhs: f64, instance: &str) -> Self {
        Self {
            bound_name: bound_name.into(),
            client,
            lhs,
            rhs,
            tolerance: BOUND_TOLERANCE,
            satisfied: lhs <= rhs + BOUND_TOLERANCE,
            instance: instance.into(),
        }
    }
}

/// `2 L m / (lambda n)`.
pub fn retrain_distance_bound(c: &SmoothnessConstants, m: usize, n: usize) -> f64 {
    2.0 * c.lipschitz * m as f64 / (c.lambda * n as f64)
}

/// Per-client reports for the retrain-vs-train and unlearned-vs-retrain distance bounds.
pub fn check_distance_bounds(
    train: &[DVector<f64>],
    retrain: &[DVector<f64>],
    unlearned: &[DVector<f64>],
    constants: &SmoothnessConstants,
    m: usize,
    n: usize,
    instance: &str,
) -> Result<Vec<BoundReport>> {
    if train.len() != retrain.len() || train.len() != unlearned.len() {
        return Err(Error::DimensionMismatch { expected: train.len(), got: retrain.len().min(unlearned.len()) });
    }
    let shift_bound = retrain_distance_bound(constants, m, n);
    let newton_bound = unlearn::sensitivity(constants, m, n)?;
    let mut out = Vec::with_capacity(2 * train.len());
    for (client, ((x, xr), xu)) in train.iter().zip(retrain).zip(unlearned).enumerate() {
        if x.len() != xr.len() || x.len() != xu.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), got: xr.len().min(xu.len()) });
        }
        out.push(BoundReport::new("retrain_shift", client, (xr - x).norm(), shift_bound, instance));
        out.push(BoundReport::new("newton_residual", client, (xu - xr).norm(), newton_bound, instance));
    }
    Ok(out)
}

/// `f(x) - min f` over `rows`, the minimum found to gradient norm 1e-8.
pub fn utility_gap<S: Samples + ?Sized>(x: &DVector<f64>, data: &S, rows: &[usize], model: &LossModel) -> Result<f64> {
    let best = minimize(model, data, rows, 1e-8)?;
    Ok(model.mean_loss(x, data, rows) - model.mean_loss(&best, data, rows))
}

/// Order-of-magnitude scale of the excess-risk bound, without its unknown constant.
pub fn utility_bound_scale(c: &SmoothnessConstants, m: usize, n: usize, d: usize, budget: &PrivacyBudget) -> f64 {
    let (m, n, d) = (m as f64, n as f64, d as f64);
    m * c.lipschitz.powi(2) / ((n - m) * c.lambda)
        + (d * (1.0 / budget.delta).ln()).sqrt() * c.hessian_lipschitz * c.lipschitz.powi(3) * m * m
            / (c.lambda.powi(3) * n * n * budget.epsilon)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaReport {
    pub attack_acc: f64,
    pub n_members: usize,
    pub n_nonmembers: usize,
    /// One threshold per cross-fitting fold.
    pub thresholds: Vec<f64>,
    pub fold_accs: Vec<f64>,
}

/// Threshold maximizing balanced accuracy of "member iff loss < tau".
fn fit_threshold(members: &[f64], nonmembers: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = members.iter().map(|&l| (l, true)).chain(nonmembers.iter().map(|&l| (l, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (pm, pn) = (members.len() as f64, nonmembers.len() as f64);
    // tau below everything: no one predicted member
    let mut best_tau = f64::NEG_INFINITY;
    let mut best = 0.5;
    let (mut tp, mut fp) = (0.0, 0.0);
    for k in 0..all.len() {
        if all[k].1 {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        if k + 1 < all.len() && all[k + 1].0 == all[k].0 {
            continue;
        }
        let acc = 0.5 * (tp / pm + (pn - fp) / pn);
        if acc > best {
            best = acc;
            best_tau = if k + 1 < all.len() { 0.5 * (all[k].0 + all[k + 1].0) } else { f64::INFINITY };
        }
    }
    best_tau
}

fn balanced_accuracy(tau: f64, members: &[f64], nonmembers: &[f64]) -> f64 {
    let tpr = members.iter().filter(|&&l| l < tau).count() as f64 / members.len() as f64;
    let tnr = nonmembers.iter().filter(|&&l| l >= tau).count() as f64 / nonmembers.len() as f64;
    0.5 * (tpr + tnr)
}

/// Loss-threshold membership inference with two-fold cross-fitting.
///
/// The larger set is subsampled to the size of the smaller; each half picks a
/// threshold that is scored on the other half.
#[allow(clippy::too_many_arguments)]
pub fn mia<A: Samples + ?Sized, B: Samples + ?Sized>(
    model: &LossModel,
    x: &DVector<f64>,
    member_data: &A,
    members: &[usize],
    nonmember_data: &B,
    nonmembers: &[usize],
    seed: u64,
) -> Result<MiaReport> {
    let k = members.len().min(nonmembers.len());
    if k < 2 {
        return Err(invalid(format!("membership attack needs at least two members and non-members, got {} and {}", members.len(), nonmembers.len())));
    }
    let mut rng = rng::stream(seed, Domain::Attack, 0, 0);
    let mut pick = |rows: &[usize]| {
        let mut v = rows.to_vec();
        v.shuffle(&mut rng);
        v.truncate(k);
        v
    };
    let mem = pick(members);
    let non = pick(nonmembers);
    let loss_m: Vec<f64> = mem.iter().map(|&i| model.data_loss(x.as_slice(), member_data.features(i), member_data.label(i))).collect();
    let loss_n: Vec<f64> = non.iter().map(|&i| model.data_loss(x.as_slice(), nonmember_data.features(i), nonmember_data.label(i))).collect();
    let half = k / 2;
    let folds = [(0..half, half..k), (half..k, 0..half)];
    let mut thresholds = Vec::new();
    let mut fold_accs = Vec::new();
    for (cal, eval) in folds {
        let tau = fit_threshold(&loss_m[cal.clone()], &loss_n[cal]);
        fold_accs.push(balanced_accuracy(tau, &loss_m[eval.clone()], &loss_n[eval]));
        thresholds.push(tau);
    }
    let attack_acc = fold_accs.iter().sum::<f64>() / fold_accs.len() as f64;
    Ok(MiaReport { attack_acc, n_members: k, n_nonmembers: k, thresholds, fold_accs })
}

/// `|Psi - H|_F / |H|_F` at `x` over `rows`.
pub fn fisher_hessian_gap<S: Samples + ?Sized>(x: &DVector<f64>, rows: &[usize], data: &S, model: &LossModel) -> f64 {
    let h = dpsgd::statistic_for(x, rows, data, model, StatMode::ExactHessian).dense();
    let psi = dpsgd::statistic_for(x, rows, data, model, StatMode::Fisher).dense();
    (&psi - &h).norm() / h.norm()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub index: usize,
    pub d: usize,
    pub n: usize,
    pub m: usize,
    pub lambda: f64,
    pub data_seed: u64,
    pub deleted: Vec<usize>,
    pub reports: Vec<BoundReport>,
    /// Excess retained loss of the noise-free unlearned model.
    pub utility_gap: f64,
}

impl SweepOutcome {
    pub fn satisfied(&self) -> bool {
        self.reports.iter().all(|r| r.satisfied)
    }
}

/// Exact single-client instance: train, retrain and Newton-unlearned minimizers.
pub fn sweep_instance(index: usize, seed: u64) -> Result<SweepOutcome> {
    let mut rng = rng::stream(seed, Domain::Sweep, index as u64, 0);
    let d = rng.random_range(2..=20);
    let n = rng.random_range(20..=200);
    let m = rng.random_range(1..=n / 5);
    let lambda = rng.random_range(0.1..=1.0);
    let data_seed = rng.random::<u64>();
    let data = synth_blobs(n, d, 2, data_seed)?;
    let mut deleted: Vec<usize> = rand::seq::index::sample(&mut rng, n, m).into_vec();
    deleted.sort_unstable();
    let instance = format!("sweep seed={seed} index={index} d={d} n={n} m={m} lambda={lambda} data_seed={data_seed}");
    run_instance(index, &data, &deleted, lambda, data_seed, &instance)
}

fn run_instance<S: Samples + ?Sized>(
    index: usize,
    data: &S,
    deleted: &[usize],
    lambda: f64,
    data_seed: u64,
    instance: &str,
) -> Result<SweepOutcome> {
    let (n, d) = (data.n_samples(), data.n_features());
    let model = LossModel::new(LossKind::Logistic, d, lambda)?;
    let all: Vec<usize> = (0..n).collect();
    let constants = model.derive_constants(data, &all)?;
    let (reports, utility_gap) = exact_bound_check(0, data, &all, deleted, &model, &constants, instance)?;
    Ok(SweepOutcome { index, d, n: all.len(), m: deleted.len(), lambda, data_seed, deleted: deleted.to_vec(), reports, utility_gap })
}

/// Bound reports for one client's exact minimizers, plus the utility gap of its
/// noise-free Newton-unlearned model.
pub fn exact_bound_check<S: Samples + ?Sized>(
    client: usize,
    data: &S,
    shard: &[usize],
    deleted: &[usize],
    model: &LossModel,
    constants: &SmoothnessConstants,
    instance: &str,
) -> Result<(Vec<BoundReport>, f64)> {
    let gone: std::collections::HashSet<usize> = deleted.iter().copied().collect();
    let retained: Vec<usize> = shard.iter().copied().filter(|i| !gone.contains(i)).collect();
    if retained.len() + deleted.len() != shard.len() {
        return Err(invalid(format!("deleted rows of client {client} are not all in its shard")));
    }
    let trained = minimize(model, data, shard, 1e-12)?;
    let retrained = minimize(model, data, &retained, 1e-12)?;
    let state = ClientState {
        id: client,
        model: trained.clone(),
        shard: shard.to_vec(),
        statistic: Some(dpsgd::statistic_for(&trained, &retained, data, model, StatMode::ExactHessian)),
    };
    let unlearned = &trained + unlearn::newton_correction_samples(&state, deleted, data, model)?;
    let mut reports =
        check_distance_bounds(&[trained], &[retrained], std::slice::from_ref(&unlearned), constants, deleted.len(), shard.len(), instance)?;
    for r in &mut reports {
        r.client = client;
    }
    Ok((reports, utility_gap(&unlearned, data, &retained, model)?))
}

/// Runs `size` random instances in parallel; order follows the index.
pub fn bound_sweep(size: usize, seed: u64, execution: Execution) -> Result<Vec<SweepOutcome>> {
    execution.map_range(size, |i| sweep_instance(i, seed)).into_iter().collect()
}
