//! Spectral filters and the hand-crafted target transformations.
//!
//! A filter is a scalar map applied to the singular values of a batch,
//! `W = V g(S) Vᵀ`. Online filters multiply the batch from the right,
//! target filters rebuild the batch as `U (S h(S)) Vᵀ`. Both act only on
//! the right-singular span of the batch; on its orthogonal complement the
//! filter matrix is the identity.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{RdmError, Result};
use crate::spectral::{self, FeatureBatch, Spectrum, CLAMP_TOL};

/// Singular values below this are floored before a filter is evaluated.
pub const FLOOR_SIGMA: f64 = 1e-6;

/// Consecutive grid differences within this band count as flat.
pub const MONO_TOL: f64 = 1e-9;

/// Spearman correlation beyond ±this reports a monotone trend.
pub const TREND_THRESHOLD: f64 = 0.5;

type ScalarMap = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
enum Map {
    Constant(f64),
    DirectPred,
    Log,
    Log1p,
    Log1pSq,
    Power(f64),
    Custom(ScalarMap),
}

/// A named scalar map on singular values.
#[derive(Clone)]
pub struct SpectralFilter {
    name: String,
    map: Map,
}

impl fmt::Debug for SpectralFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralFilter")
            .field("name", &self.name)
            .field("params", &self.params())
            .finish()
    }
}

impl SpectralFilter {
    /// `g(σ) = 1`.
    pub fn identity() -> Self {
        Self::constant(1.0).named("id")
    }

    pub fn constant(c: f64) -> Self {
        Self {
            name: format!("const:{c}"),
            map: Map::Constant(c),
        }
    }

    /// DirectPred, `g₀(σ) = σ`.
    pub fn direct_pred() -> Self {
        Self {
            name: "directpred".into(),
            map: Map::DirectPred,
        }
    }

    /// `g₁(σ) = log σ`.
    pub fn log() -> Self {
        Self {
            name: "log".into(),
            map: Map::Log,
        }
    }

    /// `g₂(σ) = log(1 + σ)`.
    pub fn log1p() -> Self {
        Self {
            name: "log1p".into(),
            map: Map::Log1p,
        }
    }

    /// `g₃(σ) = log(1 + σ²)`.
    pub fn log1p_sq() -> Self {
        Self {
            name: "log1psq".into(),
            map: Map::Log1pSq,
        }
    }

    /// `h(σ) = σ^p`; high-pass for `p < 0`.
    pub fn power(p: f64) -> Self {
        Self {
            name: format!("pow:{p}"),
            map: Map::Power(p),
        }
    }

    pub fn custom(name: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            map: Map::Custom(Arc::new(f)),
        }
    }

    fn named(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn params(&self) -> Vec<f64> {
        match self.map {
            Map::Constant(c) => vec![c],
            Map::Power(p) => vec![p],
            _ => Vec::new(),
        }
    }

    pub fn eval(&self, sigma: f64) -> f64 {
        match &self.map {
            Map::Constant(c) => *c,
            Map::DirectPred => sigma,
            Map::Log => sigma.ln(),
            Map::Log1p => sigma.ln_1p(),
            Map::Log1pSq => (sigma * sigma).ln_1p(),
            Map::Power(p) => sigma.powf(*p),
            Map::Custom(f) => f(sigma),
        }
    }

    /// Evaluates at `max(sigma, FLOOR_SIGMA)`, failing on non-finite output.
    pub fn eval_floored(&self, sigma: f64) -> Result<f64> {
        let s = sigma.max(FLOOR_SIGMA);
        let v = self.eval(s);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(RdmError::FilterDomain {
                filter: self.name.clone(),
                sigma: s,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Monotonicity {
    LowPass,
    HighPass,
    Constant,
    NonMonotone,
}

impl fmt::Display for Monotonicity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Monotonicity::LowPass => "LowPass",
            Monotonicity::HighPass => "HighPass",
            Monotonicity::Constant => "Constant",
            Monotonicity::NonMonotone => "NonMonotone",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FilterClass {
    pub kind: Monotonicity,
    pub grid: Vec<f64>,
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && lo > 0.0 && hi > lo);
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Grid used when a filter has to be classified without a caller-supplied grid.
pub fn default_grid() -> Vec<f64> {
    log_grid(0.05, 20.0, 64)
}

pub fn classify(filter: &SpectralFilter, grid: &[f64]) -> Result<FilterClass> {
    if grid.len() < 3 {
        return Err(RdmError::invalid(format!(
            "classification grid needs at least 3 points, got {}",
            grid.len()
        )));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(RdmError::invalid("classification grid must be strictly ascending"));
    }
    if grid[0] <= FLOOR_SIGMA {
        return Err(RdmError::invalid(format!(
            "classification grid must lie above {FLOOR_SIGMA:e}"
        )));
    }
    let values = grid
        .iter()
        .map(|s| {
            let v = filter.eval(*s);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(RdmError::FilterDomain {
                    filter: filter.name.clone(),
                    sigma: *s,
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FilterClass {
        kind: monotonicity(&values),
        grid: grid.to_vec(),
    })
}

fn monotonicity(values: &[f64]) -> Monotonicity {
    let diffs: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
    if diffs.iter().all(|d| d.abs() <= MONO_TOL) {
        Monotonicity::Constant
    } else if diffs.iter().all(|d| *d > MONO_TOL) {
        Monotonicity::LowPass
    } else if diffs.iter().all(|d| *d < -MONO_TOL) {
        Monotonicity::HighPass
    } else {
        Monotonicity::NonMonotone
    }
}

/// Thin SVD with singular values sorted descending.
pub struct BatchSvd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    /// Right singular vectors as columns (k × r).
    pub v: DMatrix<f64>,
}

pub fn batch_svd(batch: &FeatureBatch) -> BatchSvd {
    let svd = batch.data().clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let r = svd.singular_values.len();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
    BatchSvd {
        u: DMatrix::from_fn(u.nrows(), r, |i, j| u[(i, order[j])]),
        singular_values: order.iter().map(|&j| svd.singular_values[j]).collect(),
        v: DMatrix::from_fn(v_t.ncols(), r, |i, j| v_t[(order[j], i)]),
    }
}

/// `V g(S) Vᵀ` built from a batch SVD, identity on the complement of its span.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterMatrix {
    pub matrix: DMatrix<f64>,
    /// Singular values of the batch that produced the matrix.
    pub source_singular_values: Vec<f64>,
    pub source_shape: (usize, usize),
}

fn filter_matrix_from_svd(svd: &BatchSvd, filter: &SpectralFilter, k: usize) -> Result<DMatrix<f64>> {
    let gains = svd
        .singular_values
        .iter()
        .map(|s| filter.eval_floored(*s))
        .collect::<Result<Vec<_>>>()?;
    let v = &svd.v;
    let vg = DMatrix::from_fn(k, v.ncols(), |i, j| v[(i, j)] * gains[j]);
    let mut w = DMatrix::identity(k, k) - v * v.transpose();
    w += vg * v.transpose();
    Ok((&w + w.transpose()) * 0.5)
}

pub fn filter_matrix(batch: &FeatureBatch, filter: &SpectralFilter) -> Result<FilterMatrix> {
    let svd = batch_svd(batch);
    if svd.singular_values.first().copied().unwrap_or(0.0) <= FLOOR_SIGMA {
        return Err(RdmError::invalid("filter matrix of a rank-zero batch"));
    }
    Ok(FilterMatrix {
        matrix: filter_matrix_from_svd(&svd, filter, batch.cols())?,
        source_singular_values: svd.singular_values,
        source_shape: batch.shape(),
    })
}

/// A filtered batch plus any misuse warning.
#[derive(Clone, Debug)]
pub struct Filtered {
    pub batch: FeatureBatch,
    pub warning: Option<String>,
}

fn role_warning(filter: &SpectralFilter, expected: Monotonicity, role: &str) -> Option<String> {
    match classify(filter, &default_grid()) {
        Ok(c) if c.kind == expected || c.kind == Monotonicity::Constant => None,
        Ok(c) => Some(format!(
            "{role} filter `{}` classifies {}, expected {expected}",
            filter.name, c.kind
        )),
        Err(e) => Some(format!("{role} filter `{}` could not be classified: {e}", filter.name)),
    }
}

/// `batch · W_g` with `W_g` built from the batch itself and held constant.
pub fn apply_online_filter(batch: &FeatureBatch, filter: &SpectralFilter) -> Result<Filtered> {
    let w = filter_matrix(batch, filter)?;
    let out = FeatureBatch::new(batch.data() * &w.matrix)?;
    Ok(Filtered {
        batch: out,
        warning: role_warning(filter, Monotonicity::LowPass, "online"),
    })
}

/// `U diag(σ h(σ)) Vᵀ` from the batch's thin SVD.
pub fn apply_target_filter(batch: &FeatureBatch, filter: &SpectralFilter) -> Result<Filtered> {
    let svd = batch_svd(batch);
    if svd.singular_values.first().copied().unwrap_or(0.0) <= FLOOR_SIGMA {
        return Err(RdmError::invalid("target filter of a rank-zero batch"));
    }
    let scaled = svd
        .singular_values
        .iter()
        .map(|s| Ok(s * filter.eval_floored(*s)?))
        .collect::<Result<Vec<_>>>()?;
    let us = DMatrix::from_fn(svd.u.nrows(), svd.u.ncols(), |i, j| svd.u[(i, j)] * scaled[j]);
    let out = FeatureBatch::new(us * svd.v.transpose())?;
    Ok(Filtered {
        batch: out,
        warning: role_warning(filter, Monotonicity::HighPass, "target"),
    })
}

fn normalize_columns(q: &mut DMatrix<f64>, target: f64) -> Result<()> {
    for mut col in q.column_iter_mut() {
        let s: f64 = col.sum();
        if !(s > 0.0 && s.is_finite()) {
            return Err(underflow());
        }
        col *= target / s;
    }
    Ok(())
}

fn normalize_rows(q: &mut DMatrix<f64>, target: f64) -> Result<()> {
    for mut row in q.row_iter_mut() {
        let s: f64 = row.sum();
        if !(s > 0.0 && s.is_finite()) {
            return Err(underflow());
        }
        row *= target / s;
    }
    Ok(())
}

fn underflow() -> RdmError {
    RdmError::invalid("sinkhorn exp(scores/eps) lost all mass in a row or column; use a larger eps")
}

fn sinkhorn_kernel(scores: &FeatureBatch, eps: f64) -> Result<DMatrix<f64>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(RdmError::invalid(format!("sinkhorn eps must be positive, got {eps}")));
    }
    // A global shift only rescales Q, which every normalization undoes.
    let shift = scores.data().max() / eps;
    let q = scores.data().map(|s| (s / eps - shift).exp());
    let dead_row = q.row_iter().any(|r| r.iter().all(|v| *v == 0.0));
    let dead_col = q.column_iter().any(|c| c.iter().all(|v| *v == 0.0));
    if dead_row || dead_col {
        return Err(RdmError::invalid(format!(
            "exp(scores/eps) underflows to an all-zero row or column at eps = {eps}; use a larger eps"
        )));
    }
    Ok(q)
}

/// SwAV-style equipartition: `iters` rounds of column (to 1/k) then row
/// (to 1/n) normalization of `exp(scores/eps)`, rows finally rescaled to sum 1.
pub fn sinkhorn_knopp(scores: &FeatureBatch, iters: usize, eps: f64) -> Result<FeatureBatch> {
    let (n, k) = scores.shape();
    let mut q = sinkhorn_kernel(scores, eps)?;
    for _ in 0..iters {
        normalize_columns(&mut q, 1.0 / k as f64)?;
        normalize_rows(&mut q, 1.0 / n as f64)?;
    }
    normalize_rows(&mut q, 1.0)?;
    FeatureBatch::new(q)
}

/// Row-wise `softmax((z - center) / temperature)`.
pub fn center_sharpen(batch: &FeatureBatch, center: &[f64], temperature: f64) -> Result<FeatureBatch> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(RdmError::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if center.len() != batch.cols() {
        return Err(RdmError::invalid(format!(
            "center has length {}, batch has {} columns",
            center.len(),
            batch.cols()
        )));
    }
    let c = DVector::from_column_slice(center);
    let mut out = batch.data().clone();
    for mut row in out.row_iter_mut() {
        let logits: Vec<f64> = row
            .iter()
            .zip(c.iter())
            .map(|(z, m)| (z - m) / temperature)
            .collect();
        let probs = softmax(&logits);
        for (x, p) in row.iter_mut().zip(probs) {
            *x = p;
        }
    }
    FeatureBatch::new(out)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Row-wise softmax of a batch.
pub fn softmax_rows(batch: &FeatureBatch) -> FeatureBatch {
    let mut out = batch.data().clone();
    for mut row in out.row_iter_mut() {
        let probs = softmax(&row.iter().copied().collect::<Vec<_>>());
        for (x, p) in row.iter_mut().zip(probs) {
            *x = p;
        }
    }
    FeatureBatch::new(out).expect("softmax of a finite batch is finite")
}

/// Target filter `h(λᵖ_i) = sqrt(λᶻ_i / λᵖ_i)` recovered from two branch outputs.
#[derive(Clone, Debug, Serialize)]
pub struct TransformationFilter {
    pub class: FilterClass,
    /// `(λᵖ_i, h_i)` sorted by λᵖ ascending.
    pub pairs: Vec<(f64, f64)>,
    pub spearman: f64,
}

pub fn extract_transformation_filter(
    online: &FeatureBatch,
    target: &FeatureBatch,
) -> Result<TransformationFilter> {
    if online.shape() != target.shape() {
        return Err(RdmError::invalid(format!(
            "branch outputs differ in shape: {:?} vs {:?}",
            online.shape(),
            target.shape()
        )));
    }
    let sp = spectral::spectrum(&spectral::correlation(online))?;
    let sz = spectral::spectrum(&spectral::correlation(target))?;
    transformation_filter_from_spectra(&sp, &sz)
}

pub fn transformation_filter_from_spectra(sp: &Spectrum, sz: &Spectrum) -> Result<TransformationFilter> {
    if sp.sum() <= 0.0 || sz.sum() <= 0.0 {
        return Err(RdmError::DegenerateSpectrum("branch correlation is zero".into()));
    }
    let mut pairs: Vec<(f64, f64)> = sp
        .values()
        .iter()
        .zip(sz.values())
        .filter(|(p, _)| **p > CLAMP_TOL)
        .map(|(p, z)| (*p, (z / p).sqrt()))
        .collect();
    if pairs.len() < 2 {
        return Err(RdmError::DegenerateSpectrum(format!(
            "only {} usable eigen-indices",
            pairs.len()
        )));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (lo, hi) = pairs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let rho = spearman(&xs, &ys);
    let kind = if hi - lo <= MONO_TOL {
        Monotonicity::Constant
    } else if rho < -TREND_THRESHOLD {
        Monotonicity::HighPass
    } else if rho > TREND_THRESHOLD {
        Monotonicity::LowPass
    } else {
        Monotonicity::NonMonotone
    };
    Ok(TransformationFilter {
        class: FilterClass { kind, grid: xs },
        pairs,
        spearman: rho,
    })
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|a, b| xs[*a].total_cmp(&xs[*b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && xs[idx[j]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j - 1) as f64 / 2.0 + 1.0;
        for t in &idx[i..j] {
            r[*t] = avg;
        }
        i = j;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. Zero when either side is flat.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// A parsed filter specification string.
#[derive(Clone, Debug)]
pub enum FilterSpec {
    Online(SpectralFilter),
    Target(SpectralFilter),
    Sinkhorn { iters: usize, eps: f64 },
    CenterSharpen { temperature: f64 },
}

impl FromStr for FilterSpec {
    type Err = RdmError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let mut parts = lower.split(':');
        let head = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let num = |i: usize| -> Result<f64> {
            args.get(i)
                .ok_or_else(|| RdmError::Config(format!("filter `{s}` is missing argument {}", i + 1)))?
                .parse::<f64>()
                .map_err(|e| RdmError::Config(format!("filter `{s}`: {e}")))
        };
        let arity = |n: usize| -> Result<()> {
            if args.len() == n {
                Ok(())
            } else {
                Err(RdmError::Config(format!(
                    "filter `{s}` takes {n} argument(s), got {}",
                    args.len()
                )))
            }
        };
        match head {
            "id" => arity(0).map(|_| FilterSpec::Online(SpectralFilter::identity())),
            "directpred" => arity(0).map(|_| FilterSpec::Online(SpectralFilter::direct_pred())),
            "log" => arity(0).map(|_| FilterSpec::Online(SpectralFilter::log())),
            "log1p" => arity(0).map(|_| FilterSpec::Online(SpectralFilter::log1p())),
            "log1psq" => arity(0).map(|_| FilterSpec::Online(SpectralFilter::log1p_sq())),
            "pow" => {
                arity(1)?;
                Ok(FilterSpec::Target(SpectralFilter::power(num(0)?)))
            }
            "sinkhorn" => {
                arity(2)?;
                let iters = args[0]
                    .parse::<usize>()
                    .map_err(|e| RdmError::Config(format!("filter `{s}`: {e}")))?;
                let eps = num(1)?;
                if eps <= 0.0 {
                    return Err(RdmError::Config(format!("filter `{s}`: eps must be positive")));
                }
                Ok(FilterSpec::Sinkhorn { iters, eps })
            }
            "centersharp" => {
                arity(1)?;
                let temperature = num(0)?;
                if temperature <= 0.0 {
                    return Err(RdmError::Config(format!(
                        "filter `{s}`: temperature must be positive"
                    )));
                }
                Ok(FilterSpec::CenterSharpen { temperature })
            }
            _ => Err(RdmError::Config(format!("unknown filter `{s}`"))),
        }
    }
}
