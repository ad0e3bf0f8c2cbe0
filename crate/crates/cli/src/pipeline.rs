//! Stage implementations behind the subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use dfu_core::data::{self, load_csv, load_idx, synth_blobs, Dataset, DeletionRequest, FeatureScaler, Granularity, Partition};
use dfu_core::dpsgd::{self, ClientState, RoundMetrics, StatMode, TrainConfig};
use dfu_core::exec::{pin_threads, worker_count};
use dfu_core::models::{LossModel, SmoothnessConstants};
use dfu_core::topology::MixingMatrix;
use dfu_core::unlearn::{self, AuditRecord, NoiseMode, UnlearnOptions};
use dfu_core::verify::{self, BoundReport, MiaReport, SweepOutcome};
use dfu_core::Execution;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifacts::{write_table, RunDir};
use crate::config::{DataKind, RunConfig, Task, SEED_ATTACK, SEED_NOISE, SEED_PARTITION, SEED_REQUEST, SEED_SYNTHETIC, SEED_TRAIN};
use crate::{CliError, Result};

/// Standardization floor added to each feature's spread.
pub const STANDARDIZE_EPS: f64 = 1e-2;

/// Everything a stage rebuilds deterministically from the config.
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub model: LossModel,
    pub constants: SmoothnessConstants,
    pub mixing: MixingMatrix,
    pub partition: Partition,
    pub execution: Execution,
}

pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let ds = &cfg.dataset;
    let path = |p: &Option<PathBuf>| p.clone().expect("validated config");
    let head = |d: Dataset, k: Option<usize>| -> Result<Dataset> {
        match k {
            Some(k) if k < d.len() => Ok(d.subset(&(0..k).collect::<Vec<_>>())?),
            _ => Ok(d),
        }
    };
    let (mut train, mut test) = match ds.kind {
        DataKind::MnistIdx => (
            load_idx(&path(&ds.train_images), &path(&ds.train_labels))?,
            load_idx(&path(&ds.test_images), &path(&ds.test_labels))?,
        ),
        DataKind::Csv => (load_csv(&path(&ds.train_csv), ds.has_header)?, load_csv(&path(&ds.test_csv), ds.has_header)?),
        DataKind::Synthetic => {
            let (n, t) = (ds.n_train.unwrap_or(0), ds.n_test.unwrap_or(0));
            let all = synth_blobs(n + t, ds.dim.unwrap_or(0), ds.classes.unwrap_or(0), cfg.child_seed(SEED_SYNTHETIC))?;
            (all.subset(&(0..n).collect::<Vec<_>>())?, all.subset(&(n..n + t).collect::<Vec<_>>())?)
        }
    };
    train = head(train, ds.limit)?;
    test = head(test, ds.test_limit)?;
    if ds.task == Task::Parity {
        for d in [&mut train, &mut test] {
            d.relabel("parity", |c| (c % 2) as f64)?;
        }
    }
    if ds.pool > 1 {
        train.avg_pool(ds.pool)?;
        test.avg_pool(ds.pool)?;
    }
    if ds.standardize {
        let scaler = FeatureScaler::fit(&train, STANDARDIZE_EPS);
        scaler.apply(&mut train)?;
        scaler.apply(&mut test)?;
    }
    if ds.bias {
        train.append_bias();
        test.append_bias();
    }
    if ds.row_normalize {
        train.normalize_rows();
        test.normalize_rows();
    }
    Ok((train, test))
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (train, test) = load_datasets(cfg)?;
    let classes = train.n_classes().max(test.n_classes());
    let model = LossModel::new(cfg.loss_kind(classes), train.dim(), cfg.model.lambda)?;
    let constants = model.derive_constants(&train, &train.all_indices())?;
    let mixing = cfg.topology_spec().build()?;
    let partition = data::partition(&train, cfg.topology.clients, cfg.partition_mode(), cfg.child_seed(SEED_PARTITION))?;
    let execution = match cfg.threads {
        Some(t) => {
            pin_threads(t)?;
            if t == 1 {
                Execution::Sequential
            } else {
                Execution::Parallel
            }
        }
        None => Execution::Parallel,
    };
    Ok(Prepared { train, test, model, constants, mixing, partition, execution })
}

pub fn train_config(cfg: &RunConfig, rounds: usize) -> TrainConfig {
    TrainConfig {
        rounds,
        lr: cfg.train.lr,
        batch_size: cfg.train.batch_size,
        seed: cfg.child_seed(SEED_TRAIN),
        stat_mode: cfg.unlearn.stat_mode,
        init_std: cfg.train.init_std,
    }
}

fn millis(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn metrics(p: &Prepared, round: usize, clients: &[ClientState]) -> Result<RoundMetrics> {
    Ok(dpsgd::round_metrics(round, clients, &p.train, &p.test, &p.test.all_indices(), &p.model)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricLine {
    pub stage: String,
    #[serde(flatten)]
    pub metrics: RoundMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Rounds actually run; retraining reuses this count.
    pub rounds: usize,
    /// True when the round count came from the convergence rule.
    pub rounds_from_heuristic: bool,
    pub shards: Vec<Vec<usize>>,
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    pub preprocessing: Vec<String>,
    pub constants: SmoothnessConstants,
    pub rho: f64,
    pub final_metrics: RoundMetrics,
    pub wall_ms: f64,
    pub threads: usize,
}

/// Writes the config next to the manifest, refusing a directory owned by another config.
fn claim(cfg: &RunConfig) -> Result<RunDir> {
    let run = RunDir::new(&cfg.output_dir, cfg.hash());
    if cfg.output_dir.join("manifest.json").exists() {
        let existing = RunDir::open(&cfg.output_dir)?;
        if existing.hash != run.hash {
            return Err(CliError::Protocol(format!(
                "{} belongs to config {}; use a fresh output directory",
                cfg.output_dir.display(),
                existing.hash
            )));
        }
    }
    std::fs::create_dir_all(&run.root).map_err(|source| CliError::Io { path: run.root.display().to_string(), source })?;
    let path = run.root.join("config.json");
    run.write_json(&path, cfg)?;
    run.register("config", &[path])?;
    Ok(run)
}

fn open_matching(cfg: &RunConfig) -> Result<RunDir> {
    let run = RunDir::open(&cfg.output_dir)?;
    if run.hash != cfg.hash() {
        return Err(CliError::Protocol(format!(
            "{} was produced by config {}, not {}",
            cfg.output_dir.display(),
            run.hash,
            cfg.hash()
        )));
    }
    Ok(run)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainState> {
    let p = prepare(cfg)?;
    let run = claim(cfg)?;
    let dir = run.stage("train")?;
    let fixed = cfg.train.rounds;
    let tc = train_config(cfg, fixed.unwrap_or(cfg.train.max_rounds));
    let mut clients = dpsgd::init_clients(&p.partition, p.model.dim(), &tc);
    let all = p.train.all_indices();
    let mut log = Vec::new();
    let mut last_loss = p.model.mean_loss(&dpsgd::average_model(&clients)?, &p.train, &all);
    let t = &cfg.train;
    let start = Instant::now();
    let rounds = dpsgd::train_rounds(&mut clients, &p.mixing, &p.train, &p.model, &tc, 0, tc.rounds, p.execution, &mut |round, cs| {
        if (round + 1) % t.log_every == 0 {
            log.push(MetricLine { stage: "train".into(), metrics: metrics(&p, round, cs).map_err(core_of)? });
        }
        if fixed.is_some() || (round + 1) % t.window != 0 {
            return Ok(true);
        }
        let now = p.model.mean_loss(&dpsgd::average_model(cs)?, &p.train, &all);
        let moving = (last_loss - now).abs() >= t.tol;
        last_loss = now;
        Ok(moving)
    })?;
    let wall_ms = millis(start);
    let final_metrics = metrics(&p, rounds - 1, &clients)?;
    if log.last().map(|l| l.metrics.round) != Some(rounds - 1) {
        log.push(MetricLine { stage: "train".into(), metrics: final_metrics.clone() });
    }
    let state = TrainState {
        rounds,
        rounds_from_heuristic: fixed.is_none(),
        shards: p.partition.shards.clone(),
        n_train: p.train.len(),
        n_test: p.test.len(),
        dim: p.model.dim(),
        preprocessing: p.train.normalization().to_vec(),
        constants: p.constants,
        rho: p.mixing.rho(),
        final_metrics,
        wall_ms,
        threads: worker_count(),
    };
    let mut files = run.save_clients(&dir, &clients)?;
    let metrics_path = dir.join("metrics.jsonl");
    run.write_jsonl(&metrics_path, &log)?;
    let state_path = dir.join("state.json");
    run.write_json(&state_path, &state)?;
    files.extend([metrics_path, state_path]);
    run.register("train", &files)?;
    Ok(state)
}

fn core_of(e: CliError) -> dfu_core::Error {
    match e {
        CliError::Core(e) => e,
        other => dfu_core::Error::Protocol(other.to_string()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherGap {
    pub client: usize,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnState {
    pub granularity: Granularity,
    pub total_deleted: usize,
    pub removed_client: Option<usize>,
    /// Surviving clients and their retained shards.
    pub survivors: Vec<(usize, Vec<usize>)>,
    pub noise_enabled: bool,
    pub stat_mode: StatMode,
    /// Statistic collection plus correction and flooding.
    pub unlearn_ms: f64,
    pub finetune_ms: f64,
    pub finetune_rounds: usize,
    pub flood_messages: usize,
    pub flood_max_hops: usize,
    pub fisher_gaps: Vec<FisherGap>,
    pub final_metrics: RoundMetrics,
    pub threads: usize,
}

/// Mixing for the clients left after `removed` (an original id) leaves.
fn surviving_mixing(mixing: &MixingMatrix, removed: Option<usize>) -> Result<MixingMatrix> {
    Ok(match removed {
        Some(id) => mixing.without_node(id)?,
        None => mixing.clone(),
    })
}

pub fn cmd_unlearn(cfg: &RunConfig) -> Result<UnlearnState> {
    let p = prepare(cfg)?;
    let run = open_matching(cfg)?;
    let train_dir = run.require_stage("train")?;
    let ts: TrainState = run.read_json(&train_dir.join("state.json"))?;
    let partition = Partition { shards: ts.shards.clone() };
    if partition != p.partition {
        return Err(CliError::Protocol("stored partition differs from the one the config produces".into()));
    }
    let shards: Vec<(usize, Vec<usize>)> = partition.shards.iter().cloned().enumerate().collect();
    let mut clients = run.load_clients(&train_dir, &shards)?;
    let request = data::make_request(&partition, &p.train, &cfg.request_spec()?, cfg.budget()?, cfg.child_seed(SEED_REQUEST))?;
    request.validate(&partition)?;
    let stat_mode = cfg.unlearn.stat_mode;
    let noise = cfg.unlearn.noise;
    if noise == NoiseMode::Disabled {
        eprintln!("warning: noise disabled (--no-noise); corrective updates carry no privacy guarantee");
    }
    let fisher_gaps = if stat_mode == StatMode::Fisher { fisher_gaps(&p, &clients, &request) } else { Vec::new() };
    let tc = train_config(cfg, ts.rounds);
    let options = UnlearnOptions { noise, noise_seed: cfg.child_seed(SEED_NOISE), capacity: cfg.unlearn.capacity, execution: p.execution };

    let start = Instant::now();
    dpsgd::collect_statistics(&mut clients, &p.train, &p.model, stat_mode, Some(&request), p.execution)?;
    let outcome = unlearn::unlearn(&mut clients, &p.mixing, &p.train, &p.model, &p.constants, &request, &options)?;
    let unlearn_ms = millis(start);
    let start = Instant::now();
    let rounds = cfg.unlearn.finetune_rounds;
    unlearn::finetune(&mut clients, &outcome.mixing, &p.train, &p.model, &tc, ts.rounds, rounds, p.execution)?;
    let finetune_ms = millis(start);

    let removed_client = (request.granularity == Granularity::Client).then(|| request.targets[0].client);
    let final_metrics = metrics(&p, ts.rounds + rounds.max(1) - 1, &clients)?;
    let state = UnlearnState {
        granularity: request.granularity,
        total_deleted: request.total_deleted(),
        removed_client,
        survivors: clients.iter().map(|c| (c.id, c.shard.clone())).collect(),
        noise_enabled: noise == NoiseMode::Calibrated,
        stat_mode,
        unlearn_ms,
        finetune_ms,
        finetune_rounds: rounds,
        flood_messages: outcome.deliveries.iter().map(|d| d.messages).sum(),
        flood_max_hops: outcome.deliveries.iter().flat_map(|d| d.hops.iter().copied()).max().unwrap_or(0),
        fisher_gaps,
        final_metrics: final_metrics.clone(),
        threads: worker_count(),
    };
    let dir = run.stage("unlearn")?;
    let mut files = run.save_clients(&dir, &clients)?;
    for (name, write) in [
        ("request.json", Box::new(|p: &Path| run.write_json(p, &request)) as Box<dyn Fn(&Path) -> Result<()>>),
        ("audit.jsonl", Box::new(|p: &Path| run.write_jsonl(p, &outcome.records))),
        ("metrics.jsonl", Box::new(|p: &Path| run.write_jsonl(p, &[MetricLine { stage: "unlearn".into(), metrics: final_metrics.clone() }]))),
        ("state.json", Box::new(|p: &Path| run.write_json(p, &state))),
    ] {
        let path = dir.join(name);
        write(&path)?;
        files.push(path);
    }
    run.register("unlearn", &files)?;
    Ok(state)
}

/// Surrogate-vs-Hessian gap of every client at its trained model on the rows it keeps.
fn fisher_gaps(p: &Prepared, clients: &[ClientState], request: &DeletionRequest) -> Vec<FisherGap> {
    clients
        .iter()
        .filter_map(|c| {
            let rows: Vec<usize> = match request.target(c.id) {
                Some(t) if request.granularity != Granularity::Client => {
                    c.shard.iter().copied().filter(|i| !t.indices.contains(i)).collect()
                }
                _ => c.shard.clone(),
            };
            (!rows.is_empty()).then(|| FisherGap { client: c.id, gap: verify::fisher_hessian_gap(&c.model, &rows, &p.train, &p.model) })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainState {
    pub rounds: usize,
    pub retrain_ms: f64,
    pub final_metrics: RoundMetrics,
    pub threads: usize,
}

pub fn cmd_retrain(cfg: &RunConfig) -> Result<RetrainState> {
    let p = prepare(cfg)?;
    let run = open_matching(cfg)?;
    let ts: TrainState = run.read_json(&run.require_stage("train")?.join("state.json"))?;
    let us: UnlearnState = run.read_json(&run.require_stage("unlearn")?.join("state.json"))?;
    let mixing = surviving_mixing(&p.mixing, us.removed_client)?;
    let tc = train_config(cfg, ts.rounds);
    let start = Instant::now();
    let clients = verify::retrain_oracle(&us.survivors, &mixing, &p.train, &p.model, &tc, p.execution)?;
    let retrain_ms = millis(start);
    let final_metrics = metrics(&p, ts.rounds - 1, &clients)?;
    let state = RetrainState { rounds: ts.rounds, retrain_ms, final_metrics: final_metrics.clone(), threads: worker_count() };
    let dir = run.stage("retrain")?;
    let mut files = run.save_clients(&dir, &clients)?;
    let metrics_path = dir.join("metrics.jsonl");
    run.write_jsonl(&metrics_path, &[MetricLine { stage: "retrain".into(), metrics: final_metrics }])?;
    let state_path = dir.join("state.json");
    run.write_json(&state_path, &state)?;
    files.extend([metrics_path, state_path]);
    run.register("retrain", &files)?;
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub test_acc: f64,
    pub mia_acc: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaLine {
    pub model: String,
    #[serde(flatten)]
    pub report: MiaReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub kind: String,
    pub rows: Vec<MethodRow>,
    /// `retrain_ms / (unlearn_ms + finetune_ms)`.
    pub speedup: Option<f64>,
    /// Attack against the deleted rows before unlearning.
    pub mia_before: Option<f64>,
    pub bounds_checked: usize,
    pub bounds_satisfied: usize,
    pub fisher_gaps: Vec<FisherGap>,
}

impl VerifyReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Verifies one run spread over `dirs` (all sharing a config hash), or a sweep directory.
pub fn cmd_verify(dirs: &[PathBuf]) -> Result<VerifyReport> {
    if dirs.is_empty() {
        return Err(CliError::Config("verify needs at least one run directory".into()));
    }
    let runs: Vec<RunDir> = dirs.iter().map(RunDir::open).collect::<Result<_>>()?;
    if let Some(other) = runs.iter().find(|r| r.hash != runs[0].hash) {
        return Err(CliError::Protocol(format!(
            "mixed config hashes: {} has {}, {} has {}",
            runs[0].root.display(),
            runs[0].hash,
            other.root.display(),
            other.hash
        )));
    }
    let with = |stage: &str| -> Result<Option<&RunDir>> {
        for r in &runs {
            if r.has_stage(stage)? {
                return Ok(Some(r));
            }
        }
        Ok(None)
    };
    if let Some(run) = with("sweep")? {
        return verify_sweep(run);
    }
    let home = &runs[0];
    let cfg_run = with("config")?.ok_or_else(|| CliError::Protocol("no run directory carries config.json".into()))?;
    let cfg: RunConfig = cfg_run.read_json(&cfg_run.root.join("config.json"))?;
    let p = prepare(&cfg)?;
    let train_run = with("train")?.ok_or_else(|| CliError::Protocol("no train artifacts among the inputs".into()))?;
    let unlearn_run = with("unlearn")?.ok_or_else(|| CliError::Protocol("no unlearn artifacts among the inputs".into()))?;
    let ts: TrainState = train_run.read_json(&train_run.root.join("train/state.json"))?;
    let us: UnlearnState = unlearn_run.read_json(&unlearn_run.root.join("unlearn/state.json"))?;
    let request: DeletionRequest = unlearn_run.read_json(&unlearn_run.root.join("unlearn/request.json"))?;
    let deleted = request.deleted_indices();
    let test_rows = p.test.all_indices();
    let attack_seed = cfg.child_seed(SEED_ATTACK);

    let original: Vec<(usize, Vec<usize>)> = ts.shards.iter().cloned().enumerate().collect();
    let trained = dpsgd::average_model(&train_run.load_clients(&train_run.root.join("train"), &original)?)?;
    let unlearned = dpsgd::average_model(&unlearn_run.load_clients(&unlearn_run.root.join("unlearn"), &us.survivors)?)?;
    let attack = |name: &str, x| -> Result<MiaLine> {
        Ok(MiaLine { model: name.into(), report: verify::mia(&p.model, x, &p.train, &deleted, &p.test, &test_rows, attack_seed)? })
    };
    let mut mia_lines = vec![attack("original", &trained)?, attack("DU", &unlearned)?];
    let mut rows = Vec::new();
    let mut speedup = None;
    if let Some(rt_run) = with("retrain")? {
        let rs: RetrainState = rt_run.read_json(&rt_run.root.join("retrain/state.json"))?;
        let retrained = dpsgd::average_model(&rt_run.load_clients(&rt_run.root.join("retrain"), &us.survivors)?)?;
        mia_lines.push(attack("RT", &retrained)?);
        rows.push(MethodRow {
            method: "RT".into(),
            test_acc: p.model.accuracy(&retrained, &p.test, &test_rows),
            mia_acc: mia_lines[2].report.attack_acc,
            wall_ms: rs.retrain_ms,
        });
        speedup = Some(rs.retrain_ms / (us.unlearn_ms + us.finetune_ms));
    }
    rows.push(MethodRow {
        method: "DU".into(),
        test_acc: p.model.accuracy(&unlearned, &p.test, &test_rows),
        mia_acc: mia_lines[1].report.attack_acc,
        wall_ms: us.unlearn_ms + us.finetune_ms,
    });

    let bounds: Vec<BoundReport> = if request.granularity == Granularity::Client {
        Vec::new()
    } else {
        let lists: Vec<Result<Vec<BoundReport>>> = p.execution.map(&request.targets, |t| {
            let instance = format!("config={} client={} m={}", home.hash, t.client, t.indices.len());
            let (reports, _) = verify::exact_bound_check(t.client, &p.train, &ts.shards[t.client], &t.indices, &p.model, &p.constants, &instance)?;
            Ok(reports)
        });
        lists.into_iter().collect::<Result<Vec<_>>>()?.concat()
    };
    let report = VerifyReport {
        kind: "run".into(),
        rows,
        speedup,
        mia_before: Some(mia_lines[0].report.attack_acc),
        bounds_checked: bounds.len(),
        bounds_satisfied: bounds.iter().filter(|b| b.satisfied).count(),
        fisher_gaps: us.fisher_gaps.clone(),
    };

    let dir = home.stage("verify")?;
    let mut files = Vec::new();
    for (name, write) in [
        ("bounds.jsonl", Box::new(|p: &Path| home.write_jsonl(p, &bounds)) as Box<dyn Fn(&Path) -> Result<()>>),
        ("mia.jsonl", Box::new(|p: &Path| home.write_jsonl(p, &mia_lines))),
        ("report.json", Box::new(|p: &Path| home.write_json(p, &report))),
    ] {
        let path = dir.join(name);
        write(&path)?;
        files.push(path);
    }
    let table = home.root.join("table.csv");
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    let table_rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            let sp = match (r.method.as_str(), report.speedup) {
                ("DU", Some(s)) => format!("{s:.1}"),
                _ => "1.0".into(),
            };
            vec![r.method.clone(), pct(r.test_acc), pct(r.mia_acc), format!("{:.3}", r.wall_ms), sp]
        })
        .collect();
    write_table(home, &table, &["Method", "Test Acc", "MIA Acc", "Wall ms", "Speedup"], &table_rows)?;
    files.push(table);
    home.register("verify", &files)?;
    if report.bounds_satisfied < report.bounds_checked {
        let first = bounds.iter().find(|b| !b.satisfied).expect("a violation exists");
        return Err(CliError::BoundViolation(format!(
            "{} of {} bound checks failed; first: {} lhs={} rhs={} ({})",
            report.bounds_checked - report.bounds_satisfied,
            report.bounds_checked,
            first.bound_name,
            first.lhs,
            first.rhs,
            first.instance
        )));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepState {
    pub size: usize,
    pub seed: u64,
    pub instances_satisfied: usize,
    pub wall_ms: f64,
}

pub fn sweep_hash(size: usize, seed: u64) -> String {
    let key = serde_json::json!({ "sweep_size": size, "sweep_seed": seed });
    Sha256::digest(key.to_string().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Bound sweep over random single-client instances, written to `out`.
pub fn cmd_sweep(size: usize, seed: u64, out: &Path, threads: Option<usize>) -> Result<SweepState> {
    let execution = match threads {
        Some(t) => {
            pin_threads(t)?;
            if t == 1 {
                Execution::Sequential
            } else {
                Execution::Parallel
            }
        }
        None => Execution::Parallel,
    };
    let run = RunDir::new(out, sweep_hash(size, seed));
    if out.join("manifest.json").exists() && RunDir::open(out)?.hash != run.hash {
        return Err(CliError::Protocol(format!("{} holds a different run", out.display())));
    }
    let start = Instant::now();
    let outcomes = verify::bound_sweep(size, seed, execution)?;
    let wall_ms = millis(start);
    let dir = run.stage("sweep")?;
    let lines = dir.join("bounds.jsonl");
    run.write_jsonl(&lines, &outcomes)?;
    let state = SweepState { size, seed, instances_satisfied: outcomes.iter().filter(|o| o.satisfied()).count(), wall_ms };
    let state_path = dir.join("state.json");
    run.write_json(&state_path, &state)?;
    run.register("sweep", &[lines, state_path])?;
    if let Some(bad) = outcomes.iter().find(|o| !o.satisfied()) {
        return Err(CliError::BoundViolation(format!(
            "{} of {size} instances violate a bound; replay with index {} ({})",
            size - state.instances_satisfied,
            bad.index,
            bad.reports[0].instance
        )));
    }
    Ok(state)
}

fn verify_sweep(run: &RunDir) -> Result<VerifyReport> {
    let outcomes: Vec<SweepOutcome> = run.read_jsonl(&run.root.join("sweep/bounds.jsonl"))?;
    let reports: Vec<&BoundReport> = outcomes.iter().flat_map(|o| &o.reports).collect();
    let report = VerifyReport {
        kind: "sweep".into(),
        rows: Vec::new(),
        speedup: None,
        mia_before: None,
        bounds_checked: reports.len(),
        bounds_satisfied: reports.iter().filter(|r| r.satisfied).count(),
        fisher_gaps: Vec::new(),
    };
    let path = run.stage("verify")?.join("report.json");
    run.write_json(&path, &report)?;
    run.register("verify", &[path])?;
    if report.bounds_satisfied < report.bounds_checked {
        return Err(CliError::BoundViolation(format!(
            "{} of {} sweep bound checks failed",
            report.bounds_checked - report.bounds_satisfied,
            report.bounds_checked
        )));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub train: TrainState,
    pub unlearn: UnlearnState,
    pub retrain: RetrainState,
    pub verify: VerifyReport,
}

/// Train, unlearn, retrain and verify in one directory.
pub fn cmd_experiment(cfg: &RunConfig) -> Result<ExperimentReport> {
    let train = cmd_train(cfg)?;
    let unlearn = cmd_unlearn(cfg)?;
    let retrain = cmd_retrain(cfg)?;
    let verify = cmd_verify(std::slice::from_ref(&cfg.output_dir))?;
    Ok(ExperimentReport { train, unlearn, retrain, verify })
}

/// Audit records of a finished unlearn stage.
pub fn read_audit(dir: &Path) -> Result<Vec<AuditRecord>> {
    let run = RunDir::open(dir)?;
    run.read_jsonl(&run.require_stage("unlearn")?.join("audit.jsonl"))
}
