//! Datasets, partitions and deletion requests.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{self, Domain};
use crate::unlearn::PrivacyBudget;

/// Read access to labelled rows.
pub trait Samples: Sync {
    fn n_samples(&self) -> usize;
    fn n_features(&self) -> usize;
    fn features(&self, i: usize) -> &[f64];
    fn label(&self, i: usize) -> f64;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    n: usize,
    d: usize,
    labels: Vec<f64>,
    /// Original class ids, kept when labels are remapped (e.g. parity).
    classes: Option<Vec<usize>>,
    image_shape: Option<(usize, usize)>,
    normalization: Vec<String>,
    feature_bound: f64,
}

impl Samples for Dataset {
    fn n_samples(&self) -> usize {
        self.n
    }
    fn n_features(&self) -> usize {
        self.d
    }
    fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }
    fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }
}

fn integral_classes(labels: &[f64]) -> Option<Vec<usize>> {
    labels
        .iter()
        .map(|&y| (y >= 0.0 && y.fract() == 0.0 && y < 1e9).then_some(y as usize))
        .collect()
}

impl Dataset {
    /// Row-major features; labels that are all nonnegative integers double as classes.
    pub fn new(features: Vec<f64>, d: usize, labels: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(invalid("dataset needs at least one feature"));
        }
        if features.len() != labels.len() * d {
            return Err(Error::DimensionMismatch { expected: labels.len() * d, got: features.len() });
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse { location: format!("row {}", pos / d), message: "non-finite feature".into() });
        }
        if let Some(pos) = labels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse { location: format!("row {pos}"), message: "non-finite label".into() });
        }
        let classes = integral_classes(&labels);
        let mut ds = Self {
            n: labels.len(),
            d,
            features,
            labels,
            classes,
            image_shape: None,
            normalization: Vec::new(),
            feature_bound: 0.0,
        };
        ds.refresh_bound();
        Ok(ds)
    }

    fn refresh_bound(&mut self) {
        self.feature_bound = (0..self.n)
            .map(|i| self.features(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Largest row norm.
    pub fn feature_bound(&self) -> f64 {
        self.feature_bound
    }

    pub fn label_bound(&self) -> f64 {
        self.labels.iter().fold(0.0, |m, y| m.max(y.abs()))
    }

    pub fn normalization(&self) -> &[String] {
        &self.normalization
    }

    pub fn class_of(&self, i: usize) -> Option<usize> {
        self.classes.as_ref().map(|c| c[i])
    }

    pub fn n_classes(&self) -> usize {
        self.classes.as_ref().map(|c| c.iter().max().map_or(0, |m| m + 1)).unwrap_or(0)
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.n).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n {
                return Err(invalid(format!("index {i} out of range for {} rows", self.n)));
            }
            features.extend_from_slice(self.features(i));
            labels.push(self.labels[i]);
        }
        let mut ds = Self::new(features, self.d, labels)?;
        ds.classes = self.classes.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect());
        ds.image_shape = self.image_shape;
        ds.normalization = self.normalization.clone();
        Ok(ds)
    }

    /// Replaces training labels by a function of the class id, keeping class ids.
    pub fn relabel(&mut self, name: &str, f: impl Fn(usize) -> f64) -> Result<()> {
        let classes = self.classes.as_ref().ok_or_else(|| invalid("relabel needs integer class labels"))?;
        self.labels = classes.iter().map(|&c| f(c)).collect();
        self.normalization.push(format!("relabel:{name}"));
        Ok(())
    }

    /// Average pooling over `factor x factor` blocks of an image dataset.
    pub fn avg_pool(&mut self, factor: usize) -> Result<()> {
        let (rows, cols) = self.image_shape.ok_or_else(|| invalid("pooling needs image-shaped features"))?;
        if factor == 0 || rows % factor != 0 || cols % factor != 0 {
            return Err(invalid(format!("pool factor {factor} does not divide {rows}x{cols}")));
        }
        let (pr, pc) = (rows / factor, cols / factor);
        let area = (factor * factor) as f64;
        let mut out = vec![0.0; self.n * pr * pc];
        for i in 0..self.n {
            let row = self.features(i);
            for r in 0..rows {
                for c in 0..cols {
                    out[i * pr * pc + (r / factor) * pc + c / factor] += row[r * cols + c] / area;
                }
            }
        }
        self.features = out;
        self.d = pr * pc;
        self.image_shape = Some((pr, pc));
        self.normalization.push(format!("avg_pool:{factor}"));
        self.refresh_bound();
        Ok(())
    }

    pub fn append_bias(&mut self) {
        let mut out = Vec::with_capacity(self.n * (self.d + 1));
        for i in 0..self.n {
            out.extend_from_slice(self.features(i));
            out.push(1.0);
        }
        self.features = out;
        self.d += 1;
        self.image_shape = None;
        self.normalization.push("bias".into());
        self.refresh_bound();
    }

    /// Scales every nonzero row to unit norm.
    pub fn normalize_rows(&mut self) {
        let d = self.d;
        for row in self.features.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        self.normalization.push("row_l2".into());
        self.refresh_bound();
    }

    /// Rescales rows so none exceeds `bound` in norm.
    pub fn clip_rows(&mut self, bound: f64) {
        let d = self.d;
        for row in self.features.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > bound {
                row.iter_mut().for_each(|v| *v *= bound / norm);
            }
        }
        self.normalization.push(format!("clip:{bound}"));
        self.refresh_bound();
    }
}

/// Per-feature standardization fitted on one dataset and applied to others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureScaler {
    /// `eps` is added to each standard deviation so constant features stay finite.
    pub fn fit(data: &Dataset, eps: f64) -> Self {
        let (n, d) = (data.len().max(1) as f64, data.dim());
        let mut mean = vec![0.0; d];
        for i in 0..data.len() {
            for (m, v) in mean.iter_mut().zip(data.features(i)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for i in 0..data.len() {
            for ((s, v), m) in var.iter_mut().zip(data.features(i)).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        Self { mean, scale: var.into_iter().map(|v| v.sqrt() + eps).collect() }
    }

    pub fn apply(&self, data: &mut Dataset) -> Result<()> {
        if data.d != self.mean.len() {
            return Err(Error::DimensionMismatch { expected: self.mean.len(), got: data.d });
        }
        let d = data.d;
        for row in data.features.chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        data.normalization.push("standardize".into());
        data.refresh_bound();
        Ok(())
    }
}

/// Records which rows are read, to prove a stage never touched some indices.
pub struct AccessRecorder<'a> {
    inner: &'a Dataset,
    seen: Mutex<BTreeSet<usize>>,
}

impl<'a> AccessRecorder<'a> {
    pub fn new(inner: &'a Dataset) -> Self {
        Self { inner, seen: Mutex::new(BTreeSet::new()) }
    }

    pub fn accessed(&self) -> BTreeSet<usize> {
        self.seen.lock().map(|s| s.clone()).unwrap_or_default()
    }
}

impl Samples for AccessRecorder<'_> {
    fn n_samples(&self) -> usize {
        self.inner.n_samples()
    }
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }
    fn features(&self, i: usize) -> &[f64] {
        if let Ok(mut s) = self.seen.lock() {
            s.insert(i);
        }
        self.inner.features(i)
    }
    fn label(&self, i: usize) -> f64 {
        if let Ok(mut s) = self.seen.lock() {
            s.insert(i);
        }
        self.inner.label(i)
    }
}

/// Parses CSV text whose last column is the label.
pub fn parse_csv(text: &str, has_header: bool) -> Result<Dataset> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (line_no, line) in text.lines().enumerate().skip(usize::from(has_header)) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let location = format!("row {}", line_no + 1);
        match width {
            None if cells.len() < 2 => {
                return Err(Error::Parse { location, message: "need at least one feature and a label".into() })
            }
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(Error::Parse { location, message: format!("expected {w} columns, found {}", cells.len()) })
            }
            _ => {}
        }
        for (col, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                location: format!("row {}, column {}", line_no + 1, col + 1),
                message: format!("not a number: {cell:?}"),
            })?;
            if col + 1 == cells.len() {
                labels.push(v);
            } else {
                features.push(v);
            }
        }
    }
    let d = width.ok_or_else(|| Error::Parse { location: "file".into(), message: "no data rows".into() })? - 1;
    let mut ds = Dataset::new(features, d, labels)?;
    ds.normalization.push("none".into());
    Ok(ds)
}

pub fn load_csv(path: &Path, has_header: bool) -> Result<Dataset> {
    parse_csv(&std::fs::read_to_string(path)?, has_header)
}

fn idx_header(bytes: &[u8], magic: u32, what: &str) -> Result<Vec<usize>> {
    if bytes.len() < 4 {
        return Err(Error::Parse { location: format!("{what} offset 0"), message: "truncated magic".into() });
    }
    let found = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if found != magic {
        return Err(Error::Parse {
            location: format!("{what} offset 0"),
            message: format!("magic 0x{found:08x}, expected 0x{magic:08x}"),
        });
    }
    let ndim = (magic & 0xff) as usize;
    if bytes.len() < 4 + 4 * ndim {
        return Err(Error::Parse { location: format!("{what} offset 4"), message: "truncated dimensions".into() });
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap_or([0; 4])) as usize)
        .collect();
    let expected = 4 + 4 * ndim + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::Parse {
            location: format!("{what} offset {}", bytes.len().min(expected)),
            message: format!("payload size {} does not match header ({expected})", bytes.len()),
        });
    }
    Ok(dims)
}

/// Parses IDX image (0x00000803) and label (0x00000801) buffers; pixels scaled to [0, 1].
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let dims = idx_header(images, 0x0000_0803, "images")?;
    let ldims = idx_header(labels, 0x0000_0801, "labels")?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    if ldims[0] != n {
        return Err(Error::Parse {
            location: "labels offset 4".into(),
            message: format!("{} labels for {n} images", ldims[0]),
        });
    }
    let features: Vec<f64> = images[16..].iter().map(|&p| p as f64 / 255.0).collect();
    let label_values: Vec<f64> = labels[8..].iter().map(|&l| l as f64).collect();
    let mut ds = Dataset::new(features, rows * cols, label_values)?;
    ds.image_shape = Some((rows, cols));
    ds.normalization.push("pixels/255".into());
    Ok(ds)
}

pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    parse_idx(&std::fs::read(image_path)?, &std::fs::read(label_path)?)
}

/// Unit-variance Gaussian blobs with means on the radius-3 sphere, rows clipped to norm 4.
pub fn synth_blobs(n: usize, d: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 || classes == 0 {
        return Err(invalid("synthetic data needs n, d, classes >= 1"));
    }
    let mut rng = rng::stream(seed, Domain::Synthetic, 0, 0);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| 3.0 * x / norm).collect()
        })
        .collect();
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..classes);
        let mut row: Vec<f64> = means[c].iter().map(|m| m + Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 4.0 {
            row.iter_mut().for_each(|x| *x *= 4.0 / norm);
        }
        features.extend(row);
        labels.push(c as f64);
    }
    let mut ds = Dataset::new(features, d, labels)?;
    ds.classes = Some((0..n).map(|i| ds.labels[i] as usize).collect());
    ds.normalization.push("synthetic:clip4".into());
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn n_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn total(&self) -> usize {
        self.shards.iter().map(Vec::len).sum()
    }

    /// Disjoint, in range, nonempty.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = HashSet::new();
        for (c, shard) in self.shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(invalid(format!("client {c} has an empty shard")));
            }
            for &i in shard {
                if i >= n {
                    return Err(invalid(format!("client {c} holds index {i} outside 0..{n}")));
                }
                if !seen.insert(i) {
                    return Err(invalid(format!("index {i} assigned twice")));
                }
            }
        }
        Ok(())
    }
}

pub fn partition(data: &Dataset, n_clients: usize, mode: PartitionMode, seed: u64) -> Result<Partition> {
    let n = data.len();
    if n_clients == 0 || n < n_clients {
        return Err(invalid(format!("cannot split {n} samples over {n_clients} clients")));
    }
    let mut rng = rng::stream(seed, Domain::Partition, 0, 0);
    let mut shards: Vec<Vec<usize>> = match mode {
        PartitionMode::Iid => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let (base, extra) = (n / n_clients, n % n_clients);
            let mut start = 0;
            (0..n_clients)
                .map(|c| {
                    let len = base + usize::from(c < extra);
                    let s = idx[start..start + len].to_vec();
                    start += len;
                    s
                })
                .collect()
        }
        PartitionMode::Dirichlet { alpha } => {
            if !(alpha > 0.0) || !alpha.is_finite() {
                return Err(invalid(format!("dirichlet concentration must be positive, got {alpha}")));
            }
            let gamma = Gamma::new(alpha, 1.0).map_err(|e| invalid(e.to_string()))?;
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.n_classes().max(1)];
            for i in 0..n {
                by_class[data.class_of(i).unwrap_or(0)].push(i);
            }
            let mut shards = vec![Vec::new(); n_clients];
            for mut members in by_class {
                if members.is_empty() {
                    continue;
                }
                members.shuffle(&mut rng);
                let draws: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = draws.iter().sum();
                let mut cum = 0.0;
                let mut start = 0;
                for (c, g) in draws.iter().enumerate() {
                    cum += if total > 0.0 { g / total } else { 1.0 / n_clients as f64 };
                    let end = if c + 1 == n_clients { members.len() } else { ((cum * members.len() as f64).floor() as usize).min(members.len()) };
                    let end = end.max(start);
                    shards[c].extend_from_slice(&members[start..end]);
                    start = end;
                }
            }
            let floor = (n / (4 * n_clients)).max(1);
            loop {
                let (small, _) = shards.iter().enumerate().min_by_key(|(c, s)| (s.len(), *c)).map(|(c, s)| (c, s.len())).unwrap_or((0, 0));
                if shards[small].len() >= floor {
                    break;
                }
                let donor = (0..n_clients).max_by_key(|&c| (shards[c].len(), std::cmp::Reverse(c))).unwrap_or(0);
                let pos = rng.random_range(0..shards[donor].len());
                let moved = shards[donor].swap_remove(pos);
                shards[small].push(moved);
            }
            shards
        }
    };
    for s in &mut shards {
        s.sort_unstable();
    }
    let p = Partition { shards };
    p.validate(n)?;
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Samples,
    Class,
    Client,
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Granularity::Samples => "samples",
            Granularity::Class => "class",
            Granularity::Client => "client",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientDeletion {
    pub client: usize,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeletionRequest {
    pub granularity: Granularity,
    pub targets: Vec<ClientDeletion>,
    pub class_label: Option<usize>,
    pub budget: PrivacyBudget,
}

impl DeletionRequest {
    pub fn total_deleted(&self) -> usize {
        self.targets.iter().map(|t| t.indices.len()).sum()
    }

    pub fn target(&self, client: usize) -> Option<&ClientDeletion> {
        self.targets.iter().find(|t| t.client == client)
    }

    pub fn deleted_indices(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.targets.iter().flat_map(|t| t.indices.iter().copied()).collect();
        all.sort_unstable();
        all
    }

    /// Every index belongs to its client's shard; client removal names the whole shard.
    pub fn validate(&self, partition: &Partition) -> Result<()> {
        let mut clients = HashSet::new();
        for t in &self.targets {
            let shard = partition
                .shards
                .get(t.client)
                .ok_or_else(|| invalid(format!("request names unknown client {}", t.client)))?;
            if !clients.insert(t.client) {
                return Err(invalid(format!("client {} appears twice in the request", t.client)));
            }
            if t.indices.is_empty() {
                return Err(Error::EmptyTarget(format!("client {} has no indices to delete", t.client)));
            }
            let held: HashSet<usize> = shard.iter().copied().collect();
            if let Some(bad) = t.indices.iter().find(|i| !held.contains(i)) {
                return Err(invalid(format!("index {bad} is not in client {}'s shard", t.client)));
            }
            if self.granularity == Granularity::Client && t.indices.len() != shard.len() {
                return Err(invalid(format!("client removal must name the full shard of client {}", t.client)));
            }
        }
        if self.granularity == Granularity::Client && self.targets.len() != 1 {
            return Err(invalid("client removal handles exactly one client"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "granularity", rename_all = "snake_case")]
pub enum RequestSpec {
    /// `round(fraction * n_c)` random samples from each listed client (all when `None`).
    Fraction { fraction: f64, clients: Option<Vec<usize>> },
    Samples { client: usize, indices: Vec<usize> },
    Class { label: usize },
    Client { client: usize },
}

pub fn make_request(
    partition: &Partition,
    data: &Dataset,
    spec: &RequestSpec,
    budget: PrivacyBudget,
    seed: u64,
) -> Result<DeletionRequest> {
    let (granularity, targets, class_label) = match spec {
        RequestSpec::Fraction { fraction, clients } => {
            if !(*fraction > 0.0 && *fraction < 1.0) {
                return Err(invalid(format!("deletion fraction must lie in (0, 1), got {fraction}")));
            }
            let chosen: Vec<usize> = clients.clone().unwrap_or_else(|| (0..partition.n_clients()).collect());
            let mut targets = Vec::new();
            for c in chosen {
                let shard = partition.shards.get(c).ok_or_else(|| invalid(format!("unknown client {c}")))?;
                let m = (fraction * shard.len() as f64).round() as usize;
                if m == 0 {
                    return Err(Error::EmptyTarget(format!("fraction {fraction} of client {c}'s {} samples rounds to zero", shard.len())));
                }
                let mut rng = rng::stream(seed, Domain::Request, c as u64, 0);
                let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, shard.len(), m).into_iter().map(|k| shard[k]).collect();
                picked.sort_unstable();
                targets.push(ClientDeletion { client: c, indices: picked });
            }
            (Granularity::Samples, targets, None)
        }
        RequestSpec::Samples { client, indices } => {
            let mut idx = indices.clone();
            idx.sort_unstable();
            idx.dedup();
            (Granularity::Samples, vec![ClientDeletion { client: *client, indices: idx }], None)
        }
        RequestSpec::Class { label } => {
            let targets: Vec<ClientDeletion> = partition
                .shards
                .iter()
                .enumerate()
                .filter_map(|(c, shard)| {
                    let idx: Vec<usize> = shard.iter().copied().filter(|&i| data.class_of(i) == Some(*label)).collect();
                    (!idx.is_empty()).then_some(ClientDeletion { client: c, indices: idx })
                })
                .collect();
            if targets.is_empty() {
                return Err(Error::EmptyTarget(format!("no client holds class {label}")));
            }
            (Granularity::Class, targets, Some(*label))
        }
        RequestSpec::Client { client } => {
            let shard = partition.shards.get(*client).ok_or_else(|| invalid(format!("unknown client {client}")))?;
            (Granularity::Client, vec![ClientDeletion { client: *client, indices: shard.clone() }], None)
        }
    };
    let req = DeletionRequest { granularity, targets, class_label, budget };
    req.validate(partition)?;
    Ok(req)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn budget() -> PrivacyBudget {
        PrivacyBudget::new(1.0, 0.05).unwrap()
    }

    #[test]
    fn csv_three_rows() {
        let ds = parse_csv("1,0,1\n0,1,0\n1,1,1", false).unwrap();
        assert_eq!((ds.len(), ds.dim()), (3, 2));
        assert_eq!(ds.labels(), &[1.0, 0.0, 1.0]);
        assert_eq!(ds.features(1), &[0.0, 1.0]);
    }

    #[test]
    fn csv_errors_name_the_row() {
        let err = parse_csv("1,2,3\n4,5\n", false).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
        let err = parse_csv("a,b,c\n1,x,0\n", true).unwrap_err().to_string();
        assert!(err.contains("row 2, column 2"), "{err}");
    }

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend(d.to_be_bytes());
        }
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn idx_two_images() {
        let images = idx_bytes(0x803, &[2, 2, 2], &[0, 255, 51, 0, 255, 255, 255, 255]);
        let labels = idx_bytes(0x801, &[2], &[7, 3]);
        let ds = parse_idx(&images, &labels).unwrap();
        assert_eq!((ds.len(), ds.dim()), (2, 4));
        assert_eq!(ds.features(0), &[0.0, 1.0, 0.2, 0.0]);
        assert_eq!(ds.labels(), &[7.0, 3.0]);
        assert_eq!(ds.feature_bound(), 2.0);
    }

    #[test]
    fn idx_bad_magic_and_shape() {
        let images = idx_bytes(0x802, &[1, 1], &[0]);
        let labels = idx_bytes(0x801, &[1], &[0]);
        assert!(parse_idx(&images, &labels).unwrap_err().to_string().contains("magic"));
        let images = idx_bytes(0x803, &[1, 2, 2], &[0, 0, 0]);
        assert!(parse_idx(&images, &labels).is_err());
    }

    #[test]
    fn pooling_averages_blocks() {
        let images = idx_bytes(0x803, &[1, 2, 2], &[0, 255, 255, 255]);
        let labels = idx_bytes(0x801, &[1], &[1]);
        let mut ds = parse_idx(&images, &labels).unwrap();
        ds.avg_pool(2).unwrap();
        assert_eq!(ds.dim(), 1);
        assert!((ds.features(0)[0] - 0.75).abs() < 1e-15);
        ds.append_bias();
        ds.normalize_rows();
        assert!((ds.feature_bound() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn blobs_shape_and_determinism() {
        let a = synth_blobs(10, 2, 2, 1).unwrap();
        assert_eq!((a.len(), a.dim()), (10, 2));
        assert!(a.labels().iter().all(|&y| y == 0.0 || y == 1.0));
        assert_eq!(a, synth_blobs(10, 2, 2, 1).unwrap());
        let big = synth_blobs(500, 3, 3, 2).unwrap();
        assert!(big.feature_bound() <= 4.0 + 1e-12);
    }

    #[test]
    fn iid_split_sizes() {
        let ds = synth_blobs(10, 2, 2, 1).unwrap();
        let p = partition(&ds, 5, PartitionMode::Iid, 3).unwrap();
        assert!(p.shards.iter().all(|s| s.len() == 2));
        assert_eq!(p.total(), 10);
        let p = partition(&ds, 3, PartitionMode::Iid, 3).unwrap();
        assert_eq!(p.shards.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 3, 3]);
        assert!(partition(&ds, 11, PartitionMode::Iid, 3).is_err());
    }

    #[test]
    fn fraction_rounds_per_client() {
        let ds = synth_blobs(400, 2, 2, 1).unwrap();
        let p = partition(&ds, 10, PartitionMode::Iid, 3).unwrap();
        let r = make_request(&p, &ds, &RequestSpec::Fraction { fraction: 0.1, clients: None }, budget(), 9).unwrap();
        assert!(r.targets.iter().all(|t| t.indices.len() == 4));
        assert_eq!(r.total_deleted(), 40);
    }

    #[test]
    fn client_request_is_full_shard() {
        let ds = synth_blobs(100, 2, 2, 1).unwrap();
        let p = partition(&ds, 10, PartitionMode::Iid, 3).unwrap();
        let r = make_request(&p, &ds, &RequestSpec::Client { client: 3 }, budget(), 0).unwrap();
        assert_eq!(r.targets[0].indices, p.shards[3]);
    }

    #[test]
    fn class_request_counts_match() {
        let ds = synth_blobs(300, 2, 3, 4).unwrap();
        let p = partition(&ds, 10, PartitionMode::Dirichlet { alpha: 0.3 }, 1).unwrap();
        let r = make_request(&p, &ds, &RequestSpec::Class { label: 0 }, budget(), 0).unwrap();
        let global = (0..ds.len()).filter(|&i| ds.class_of(i) == Some(0)).count();
        assert_eq!(r.total_deleted(), global);
        assert!(make_request(&p, &ds, &RequestSpec::Class { label: 7 }, budget(), 0).is_err());
    }

    #[test]
    fn foreign_indices_rejected() {
        let ds = synth_blobs(20, 2, 2, 1).unwrap();
        let p = partition(&ds, 2, PartitionMode::Iid, 3).unwrap();
        let foreign = p.shards[1][0];
        let spec = RequestSpec::Samples { client: 0, indices: vec![foreign] };
        assert!(make_request(&p, &ds, &spec, budget(), 0).is_err());
    }

    #[test]
    fn access_recorder_tracks_rows() {
        let ds = synth_blobs(5, 2, 2, 1).unwrap();
        let rec = AccessRecorder::new(&ds);
        let _ = rec.features(3);
        let _ = rec.label(1);
        assert_eq!(rec.accessed().into_iter().collect::<Vec<_>>(), vec![1, 3]);
    }
}
