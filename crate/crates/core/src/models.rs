//! Convex per-sample losses with analytic derivatives and smoothness constants.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Samples;
use crate::error::{invalid, Error, Result};
use crate::rng::{self, Domain};

/// Floor for the Hessian Lipschitz constant of quadratic losses.
pub const HESSIAN_LIPSCHITZ_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    LeastSquares,
    /// Binary cross-entropy on labels {0, 1}.
    Logistic,
    /// Softmax cross-entropy; parameters are `classes` stacked weight blocks.
    Multinomial { classes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessConstants {
    pub lambda: f64,
    pub mu: f64,
    pub lipschitz: f64,
    pub hessian_lipschitz: f64,
    pub feature_bound: f64,
    pub domain_radius: f64,
}

/// Per-sample loss `F(x, (a, y)) + (lambda/2)|x|^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    pub kind: LossKind,
    pub features: usize,
    pub lambda: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LossModel {
    pub fn new(kind: LossKind, features: usize, lambda: f64) -> Result<Self> {
        if features == 0 {
            return Err(invalid("model needs at least one feature"));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(invalid(format!("regularizer must be finite and nonnegative, got {lambda}")));
        }
        if let LossKind::Multinomial { classes } = kind {
            if classes < 2 {
                return Err(invalid("multinomial model needs at least two classes"));
            }
        }
        Ok(Self { kind, features, lambda })
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            LossKind::Multinomial { classes } => classes * self.features,
            _ => self.features,
        }
    }

    fn check(&self, x: &[f64], a: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        if a.len() != self.features {
            return Err(Error::DimensionMismatch { expected: self.features, got: a.len() });
        }
        Ok(())
    }

    fn softmax(&self, x: &[f64], a: &[f64], classes: usize) -> Vec<f64> {
        let f = self.features;
        let z: Vec<f64> = (0..classes).map(|c| dot(&x[c * f..(c + 1) * f], a)).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Data term only, without the regularizer.
    pub fn data_loss(&self, x: &[f64], a: &[f64], y: f64) -> f64 {
        match self.kind {
            LossKind::LeastSquares => 0.5 * (dot(x, a) - y).powi(2),
            LossKind::Logistic => {
                let z = dot(x, a);
                softplus(z) - y * z
            }
            LossKind::Multinomial { classes } => {
                let f = self.features;
                let z: Vec<f64> = (0..classes).map(|c| dot(&x[c * f..(c + 1) * f], a)).collect();
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - z[y as usize]
            }
        }
    }

    pub fn loss(&self, x: &DVector<f64>, a: &[f64], y: f64) -> Result<f64> {
        self.check(x.as_slice(), a)?;
        Ok(self.data_loss(x.as_slice(), a, y) + 0.5 * self.lambda * x.norm_squared())
    }

    /// `out += weight * grad`; the regularizer is included when `regularized`.
    pub fn add_grad(&self, x: &[f64], a: &[f64], y: f64, weight: f64, regularized: bool, out: &mut [f64]) {
        match self.kind {
            LossKind::LeastSquares | LossKind::Logistic => {
                let z = dot(x, a);
                let r = if self.kind == LossKind::LeastSquares { z - y } else { sigmoid(z) - y };
                for (o, ai) in out.iter_mut().zip(a) {
                    *o += weight * r * ai;
                }
            }
            LossKind::Multinomial { classes } => {
                let p = self.softmax(x, a, classes);
                let f = self.features;
                for c in 0..classes {
                    let r = p[c] - if c == y as usize { 1.0 } else { 0.0 };
                    for (o, ai) in out[c * f..(c + 1) * f].iter_mut().zip(a) {
                        *o += weight * r * ai;
                    }
                }
            }
        }
        if regularized && self.lambda != 0.0 {
            for (o, xi) in out.iter_mut().zip(x) {
                *o += weight * self.lambda * xi;
            }
        }
    }

    pub fn grad(&self, x: &DVector<f64>, a: &[f64], y: f64) -> Result<DVector<f64>> {
        self.check(x.as_slice(), a)?;
        let mut out = DVector::zeros(self.dim());
        self.add_grad(x.as_slice(), a, y, 1.0, true, out.as_mut_slice());
        Ok(out)
    }

    /// `out += weight * hessian`; symmetric by construction.
    pub fn add_hessian(&self, x: &[f64], a: &[f64], y: f64, weight: f64, regularized: bool, out: &mut DMatrix<f64>) {
        let _ = y;
        let f = self.features;
        let outer = |scale: f64, row0: usize, col0: usize, out: &mut DMatrix<f64>| {
            // a_i * a_j is commutative in floating point, so mirrored entries match exactly
            for i in 0..f {
                for j in 0..f {
                    out[(row0 + i, col0 + j)] += scale * (a[i] * a[j]);
                }
            }
        };
        match self.kind {
            LossKind::LeastSquares => outer(weight, 0, 0, out),
            LossKind::Logistic => {
                let s = sigmoid(dot(x, a));
                outer(weight * s * (1.0 - s), 0, 0, out);
            }
            LossKind::Multinomial { classes } => {
                let p = self.softmax(x, a, classes);
                for c in 0..classes {
                    for k in 0..classes {
                        let s = if c == k { p[c] - p[c] * p[c] } else { -p[c] * p[k] };
                        outer(weight * s, c * f, k * f, out);
                    }
                }
            }
        }
        if regularized && self.lambda != 0.0 {
            for i in 0..self.dim() {
                out[(i, i)] += weight * self.lambda;
            }
        }
    }

    pub fn hessian(&self, x: &DVector<f64>, a: &[f64], y: f64) -> Result<DMatrix<f64>> {
        self.check(x.as_slice(), a)?;
        let d = self.dim();
        let mut out = DMatrix::zeros(d, d);
        self.add_hessian(x.as_slice(), a, y, 1.0, true, &mut out);
        Ok(out)
    }

    /// Class label for classifiers, raw prediction for least squares.
    pub fn predict(&self, x: &[f64], a: &[f64]) -> f64 {
        match self.kind {
            LossKind::LeastSquares => dot(x, a),
            LossKind::Logistic => {
                if dot(x, a) > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            LossKind::Multinomial { classes } => {
                let f = self.features;
                let mut best = 0;
                let mut best_z = f64::NEG_INFINITY;
                for c in 0..classes {
                    let z = dot(&x[c * f..(c + 1) * f], a);
                    if z > best_z {
                        best_z = z;
                        best = c;
                    }
                }
                best as f64
            }
        }
    }

    /// Mean regularized loss over `indices`.
    pub fn mean_loss<S: Samples + ?Sized>(&self, x: &DVector<f64>, data: &S, indices: &[usize]) -> f64 {
        if indices.is_empty() {
            return 0.0;
        }
        let s: f64 = indices.iter().map(|&i| self.data_loss(x.as_slice(), data.features(i), data.label(i))).sum();
        s / indices.len() as f64 + 0.5 * self.lambda * x.norm_squared()
    }

    pub fn mean_grad<S: Samples + ?Sized>(&self, x: &DVector<f64>, data: &S, indices: &[usize]) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        if indices.is_empty() {
            return g;
        }
        let w = 1.0 / indices.len() as f64;
        for &i in indices {
            self.add_grad(x.as_slice(), data.features(i), data.label(i), w, true, g.as_mut_slice());
        }
        g
    }

    pub fn mean_hessian<S: Samples + ?Sized>(&self, x: &DVector<f64>, data: &S, indices: &[usize]) -> DMatrix<f64> {
        let d = self.dim();
        let mut h = DMatrix::zeros(d, d);
        if indices.is_empty() {
            for i in 0..d {
                h[(i, i)] = self.lambda;
            }
            return h;
        }
        let w = 1.0 / indices.len() as f64;
        for &i in indices {
            self.add_hessian(x.as_slice(), data.features(i), data.label(i), w, false, &mut h);
        }
        for i in 0..d {
            h[(i, i)] += self.lambda;
        }
        h
    }

    /// Classification accuracy; least squares counts rounded predictions that hit the label.
    pub fn accuracy<S: Samples + ?Sized>(&self, x: &DVector<f64>, data: &S, indices: &[usize]) -> f64 {
        if indices.is_empty() {
            return 0.0;
        }
        let hits = indices
            .iter()
            .filter(|&&i| {
                let p = self.predict(x.as_slice(), data.features(i));
                let y = data.label(i);
                match self.kind {
                    LossKind::LeastSquares => p.round() == y.round(),
                    _ => p == y,
                }
            })
            .count();
        hits as f64 / indices.len() as f64
    }

    /// Analytic constants over the ball of radius `domain_radius`.
    ///
    /// `label_bound` is only used by least squares.
    pub fn constants(&self, feature_bound: f64, label_bound: f64) -> Result<SmoothnessConstants> {
        let lambda = self.lambda;
        if !(lambda > 0.0) {
            return Err(invalid(format!("constants need lambda > 0, got {lambda}")));
        }
        if !(feature_bound > 0.0) || !feature_bound.is_finite() {
            return Err(invalid(format!("feature bound must be positive and finite, got {feature_bound}")));
        }
        let b = feature_bound;
        let c = match self.kind {
            LossKind::LeastSquares => {
                // F(x*) <= F(0) gives lambda/2 |x*|^2 <= y_max^2 / 2
                let radius = label_bound.abs() / lambda.sqrt();
                SmoothnessConstants {
                    lambda,
                    mu: b * b + lambda,
                    lipschitz: b * (b * radius + label_bound.abs()) + lambda * radius,
                    hessian_lipschitz: HESSIAN_LIPSCHITZ_FLOOR,
                    feature_bound: b,
                    domain_radius: radius,
                }
            }
            LossKind::Logistic => {
                let radius = b / lambda;
                SmoothnessConstants {
                    lambda,
                    mu: b * b / 4.0 + lambda,
                    lipschitz: b + lambda * radius,
                    hessian_lipschitz: b.powi(3) / (6.0 * 3f64.sqrt()),
                    feature_bound: b,
                    domain_radius: radius,
                }
            }
            LossKind::Multinomial { classes } => {
                let unreg = (classes as f64).sqrt() * b;
                let radius = unreg / lambda;
                SmoothnessConstants {
                    lambda,
                    mu: b * b / 2.0 + lambda,
                    lipschitz: unreg + lambda * radius,
                    hessian_lipschitz: b.powi(3) / 2f64.sqrt(),
                    feature_bound: b,
                    domain_radius: radius,
                }
            }
        };
        Ok(c)
    }

    /// Constants from data, probing per-sample gradient norms on the domain ball.
    pub fn derive_constants<S: Samples + ?Sized>(&self, data: &S, indices: &[usize]) -> Result<SmoothnessConstants> {
        let mut feature_bound = 0.0_f64;
        let mut label_bound = 0.0_f64;
        for &i in indices {
            let a = data.features(i);
            if a.len() != self.features {
                return Err(Error::DimensionMismatch { expected: self.features, got: a.len() });
            }
            let y = data.label(i);
            let label_ok = match self.kind {
                LossKind::LeastSquares => true,
                LossKind::Logistic => y == 0.0 || y == 1.0,
                LossKind::Multinomial { classes } => y >= 0.0 && y.fract() == 0.0 && (y as usize) < classes,
            };
            if !label_ok {
                return Err(invalid(format!("sample {i} has label {y}, which the {:?} loss does not accept", self.kind)));
            }
            feature_bound = feature_bound.max(dot(a, a).sqrt());
            label_bound = label_bound.max(data.label(i).abs());
        }
        let c = self.constants(feature_bound, label_bound)?;
        let d = self.dim();
        let mut rng = rng::stream(indices.len() as u64, Domain::Init, 0, 0);
        let mut probes = vec![DVector::zeros(d)];
        for _ in 0..4 {
            let v: DVector<f64> = DVector::from_fn(d, |_, _| Distribution::<f64>::sample(&StandardNormal, &mut rng));
            probes.push(&v * (c.domain_radius / v.norm()));
        }
        let mut g = vec![0.0; d];
        for x in &probes {
            for &i in indices {
                g.iter_mut().for_each(|v| *v = 0.0);
                self.add_grad(x.as_slice(), data.features(i), data.label(i), 1.0, true, &mut g);
                let norm = dot(&g, &g).sqrt();
                if norm > c.lipschitz * (1.0 + 1e-12) {
                    return Err(invalid(format!(
                        "sample {i} has gradient norm {norm} above the Lipschitz bound {}",
                        c.lipschitz
                    )));
                }
            }
        }
        Ok(c)
    }
}

pub const CHECKPOINT_MAGIC: &str = "dfu-model v1";

/// A model vector plus the `key=value` tags from its header line.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DVector<f64>,
    pub tags: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: DVector<f64>) -> Self {
        Self { model, tags: BTreeMap::new() }
    }

    pub fn with_tag(mut self, key: &str, value: &str) -> Self {
        self.tags.insert(key.into(), value.into());
        self
    }

    pub fn tag(&self, key: &str) -> Option<&str> {
        self.tags.get(key).map(String::as_str)
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    write!(w, "{CHECKPOINT_MAGIC} dim={}", ckpt.model.len())?;
    for (k, v) in &ckpt.tags {
        if k == "dim" || k.is_empty() || [k, v].iter().any(|s| s.contains(|c: char| c.is_whitespace() || c == '=')) {
            return Err(invalid(format!("checkpoint tag {k:?}={v:?} is not a plain token")));
        }
        write!(w, " {k}={v}")?;
    }
    writeln!(w)?;
    for v in ckpt.model.iter() {
        writeln!(w, "{v:?}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Checkpoint> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let bad = || Error::Parse { location: "line 1".into(), message: format!("bad checkpoint header {header:?}") };
    let rest = header.strip_prefix(CHECKPOINT_MAGIC).ok_or_else(bad)?;
    let mut tags = BTreeMap::new();
    let mut dim = None;
    for token in rest.split_whitespace() {
        let (k, v) = token.split_once('=').ok_or_else(bad)?;
        if k == "dim" {
            dim = Some(v.parse::<usize>().map_err(|_| bad())?);
        } else {
            tags.insert(k.to_string(), v.to_string());
        }
    }
    let dim = dim.ok_or_else(bad)?;
    let mut values = Vec::with_capacity(dim);
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: f64 = line.trim().parse().map_err(|_| Error::Parse {
            location: format!("line {}", idx + 2),
            message: format!("not a number: {line:?}"),
        })?;
        values.push(v);
    }
    if values.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: values.len() });
    }
    Ok(Checkpoint { model: DVector::from_vec(values), tags })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(file), ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}
