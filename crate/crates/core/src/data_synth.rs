//! Synthetic positive pairs and their exact or estimated correlations.
//!
//! Two data settings are supported: an isotropic Gaussian model pushed
//! through a linear encoder, and a finite sample space given as a table
//! of natural points, their augmentations and the augmentation features.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RdmError, Result};
use crate::rng::{self, gaussian};
use crate::spectral::{CorrelationEstimate, FeatureBatch};

/// Tolerance on probability normalization in finite populations.
pub const PROB_TOL: f64 = 1e-12;

/// Natural data `x̄ ~ N(0, I_d)`, augmentations `x = x̄ + σξ`, encoder `z = W_f x`.
#[derive(Clone, Debug, PartialEq)]
pub struct IsotropicAugModel {
    aug_std: f64,
    encoder: DMatrix<f64>,
    seed: u64,
}

impl IsotropicAugModel {
    /// `encoder` is k × d.
    pub fn new(encoder: DMatrix<f64>, aug_std: f64, seed: u64) -> Result<Self> {
        if encoder.iter().any(|v| !v.is_finite()) || encoder.is_empty() {
            return Err(RdmError::invalid("encoder must be non-empty and finite"));
        }
        if !(aug_std >= 0.0 && aug_std.is_finite()) {
            return Err(RdmError::invalid(format!("augmentation std must be >= 0, got {aug_std}")));
        }
        Ok(Self {
            aug_std,
            encoder,
            seed,
        })
    }

    /// Encoder with i.i.d. `N(0, 1/d)` entries drawn from the `encoder` stream of `seed`.
    pub fn random(d: usize, k: usize, aug_std: f64, seed: u64) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(RdmError::invalid("d and k must be positive"));
        }
        let mut rng = rng::stream(seed, "encoder");
        let w = rng::gaussian_matrix(&mut rng, k, d, 1.0 / (d as f64).sqrt());
        Self::new(w, aug_std, seed)
    }

    pub fn d(&self) -> usize {
        self.encoder.ncols()
    }

    pub fn k(&self) -> usize {
        self.encoder.nrows()
    }

    pub fn aug_std(&self) -> f64 {
        self.aug_std
    }

    pub fn encoder(&self) -> &DMatrix<f64> {
        &self.encoder
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `W_f W_fᵀ`.
    pub fn gram(&self) -> DMatrix<f64> {
        &self.encoder * self.encoder.transpose()
    }

    fn sample_triple<R: Rng + ?Sized>(&self, rng: &mut R) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let d = self.d();
        let natural = DVector::from_fn(d, |_, _| gaussian(rng));
        let x = DVector::from_fn(d, |i, _| natural[i] + self.aug_std * gaussian(rng));
        let x_plus = DVector::from_fn(d, |i, _| natural[i] + self.aug_std * gaussian(rng));
        (natural, x, x_plus)
    }

    /// Encoded positive-pair batches `(z, z⁺)` with `n` rows each.
    pub fn sample_feature_batches<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(FeatureBatch, FeatureBatch)> {
        let k = self.k();
        let mut z = DMatrix::zeros(n, k);
        let mut zp = DMatrix::zeros(n, k);
        for i in 0..n {
            let (_, x, xp) = self.sample_triple(rng);
            z.set_row(i, &(&self.encoder * x).transpose());
            zp.set_row(i, &(&self.encoder * xp).transpose());
        }
        Ok((FeatureBatch::new(z)?, FeatureBatch::new(zp)?))
    }
}

/// One positive pair `(x, x⁺)` drawn around a common natural point.
pub fn sample_pair<R: Rng + ?Sized>(model: &IsotropicAugModel, rng: &mut R) -> (DVector<f64>, DVector<f64>) {
    let (_, x, x_plus) = model.sample_triple(rng);
    (x, x_plus)
}

/// The four correlations of the two-view setting.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationBundle {
    /// `𝔼 z_x z_xᵀ`.
    pub c_z: CorrelationEstimate,
    /// `𝔼 z_x z_{x⁺}ᵀ` over positive pairs.
    pub c_plus: CorrelationEstimate,
    /// `𝔼 z_x̄ z_x̄ᵀ` with `z_x̄ = 𝔼[z_x | x̄]`.
    pub c_bar: CorrelationEstimate,
    /// Conditional covariance `𝔼_x̄ 𝔼_{x|x̄} (z_x - z_x̄)(z_x - z_x̄)ᵀ`.
    pub v_cond: CorrelationEstimate,
}

impl CorrelationBundle {
    /// `(max|C₊ - C̄|, max|C_z - C̄ - V|)`.
    pub fn identity_residuals(&self) -> (f64, f64) {
        let a = (self.c_plus.matrix() - self.c_bar.matrix()).amax();
        let b = (self.c_z.matrix() - self.c_bar.matrix() - self.v_cond.matrix()).amax();
        (a, b)
    }
}

/// Closed-form bundle of the isotropic linear model.
pub fn exact_correlations_linear(model: &IsotropicAugModel) -> CorrelationBundle {
    let gram = model.gram();
    let s2 = model.aug_std * model.aug_std;
    let exact = |m: DMatrix<f64>| CorrelationEstimate::exact(m).expect("finite encoder");
    CorrelationBundle {
        c_z: exact(&gram * (1.0 + s2)),
        c_plus: exact(gram.clone()),
        c_bar: exact(gram.clone()),
        v_cond: exact(gram * s2),
    }
}

/// Monte-Carlo bundle with per-entry standard errors from batch means.
#[derive(Clone, Debug)]
pub struct MonteCarloBundle {
    pub bundle: CorrelationBundle,
    pub std_error_z: DMatrix<f64>,
    pub std_error_plus: DMatrix<f64>,
    pub samples: usize,
}

const MC_BATCHES: usize = 10;

/// Estimates the bundle from `samples` positive pairs. Both views feed `C_z`
/// and `V`; `C̄` uses `z_x̄ = W_f x̄`, which is the exact conditional mean here.
pub fn monte_carlo_correlations<R: Rng + ?Sized>(
    model: &IsotropicAugModel,
    samples: usize,
    rng: &mut R,
) -> Result<MonteCarloBundle> {
    if samples == 0 {
        return Err(RdmError::invalid("monte carlo needs at least one sample"));
    }
    let k = model.k();
    let batches = MC_BATCHES.min(samples);
    let mut cz_parts = vec![DMatrix::zeros(k, k); batches];
    let mut cp_parts = vec![DMatrix::zeros(k, k); batches];
    let mut cbar = DMatrix::zeros(k, k);
    let mut vcond = DMatrix::zeros(k, k);
    let mut counts = vec![0usize; batches];

    for s in 0..samples {
        let (natural, x, xp) = model.sample_triple(rng);
        let z = &model.encoder * x;
        let zp = &model.encoder * xp;
        let zbar = &model.encoder * natural;
        let b = s * batches / samples;
        counts[b] += 1;
        cz_parts[b] += (&z * z.transpose() + &zp * zp.transpose()) * 0.5;
        cp_parts[b] += (&z * zp.transpose() + &zp * z.transpose()) * 0.5;
        cbar += &zbar * zbar.transpose();
        let (dz, dp) = (&z - &zbar, &zp - &zbar);
        vcond += (&dz * dz.transpose() + &dp * dp.transpose()) * 0.5;
    }

    let n = samples as f64;
    let total = |parts: &[DMatrix<f64>]| parts.iter().fold(DMatrix::zeros(k, k), |a, p| a + p) / n;
    let c_z = total(&cz_parts);
    let c_plus = total(&cp_parts);

    let std_err = |parts: &[DMatrix<f64>], mean: &DMatrix<f64>| {
        if batches < 2 {
            return DMatrix::from_element(k, k, f64::INFINITY);
        }
        let b = batches as f64;
        DMatrix::from_fn(k, k, |i, j| {
            let var = parts
                .iter()
                .zip(&counts)
                .map(|(p, c)| (p[(i, j)] / *c as f64 - mean[(i, j)]).powi(2))
                .sum::<f64>()
                / (b - 1.0);
            (var / b).sqrt()
        })
    };
    let std_error_z = std_err(&cz_parts, &c_z);
    let std_error_plus = std_err(&cp_parts, &c_plus);

    Ok(MonteCarloBundle {
        bundle: CorrelationBundle {
            c_z: CorrelationEstimate::new(c_z, samples)?,
            c_plus: CorrelationEstimate::new(c_plus, samples)?,
            c_bar: CorrelationEstimate::new(cbar / n, samples)?,
            v_cond: CorrelationEstimate::new(vcond / n, samples)?,
        },
        std_error_z,
        std_error_plus,
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prob: Option<f64>,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Natural {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prob: Option<f64>,
    pub augmentations: Vec<Augmentation>,
}

/// Finite sample space: natural points, their augmentation distributions
/// and the feature of every augmented sample. Missing probabilities are
/// uniform within their level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinitePopulation {
    pub naturals: Vec<Natural>,
}

struct Resolved {
    natural_probs: Vec<f64>,
    aug_probs: Vec<Vec<f64>>,
    features: Vec<Vec<DVector<f64>>>,
    k: usize,
}

fn resolve_probs(given: &[Option<f64>], what: &str) -> Result<Vec<f64>> {
    let n = given.len();
    if n == 0 {
        return Err(RdmError::invalid(format!("{what}: empty distribution")));
    }
    let probs: Vec<f64> = if given.iter().all(Option::is_none) {
        vec![1.0 / n as f64; n]
    } else if given.iter().all(Option::is_some) {
        given.iter().map(|p| p.unwrap()).collect()
    } else {
        return Err(RdmError::invalid(format!(
            "{what}: probabilities must be given for all entries or none"
        )));
    };
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(RdmError::invalid(format!("{what}: negative or non-finite probability")));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > PROB_TOL {
        return Err(RdmError::invalid(format!("{what}: probabilities sum to {s}, not 1")));
    }
    Ok(probs)
}

impl FinitePopulation {
    pub fn from_json(text: &str) -> Result<Self> {
        let pop: Self = serde_json::from_str(text)?;
        pop.validate()?;
        Ok(pop)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    /// Feature dimension.
    pub fn k(&self) -> usize {
        self.naturals
            .first()
            .and_then(|n| n.augmentations.first())
            .map_or(0, |a| a.feature.len())
    }

    fn resolve(&self) -> Result<Resolved> {
        let natural_probs = resolve_probs(
            &self.naturals.iter().map(|n| n.prob).collect::<Vec<_>>(),
            "naturals",
        )?;
        let k = self.k();
        if k == 0 {
            return Err(RdmError::invalid("features must be non-empty"));
        }
        let mut aug_probs = Vec::with_capacity(self.naturals.len());
        let mut features = Vec::with_capacity(self.naturals.len());
        for (i, nat) in self.naturals.iter().enumerate() {
            let what = format!("natural {i}");
            aug_probs.push(resolve_probs(
                &nat.augmentations.iter().map(|a| a.prob).collect::<Vec<_>>(),
                &what,
            )?);
            let mut fs = Vec::with_capacity(nat.augmentations.len());
            for a in &nat.augmentations {
                if a.feature.len() != k || a.feature.iter().any(|v| !v.is_finite()) {
                    return Err(RdmError::invalid(format!(
                        "{what}: features must be finite with length {k}"
                    )));
                }
                fs.push(DVector::from_column_slice(&a.feature));
            }
            features.push(fs);
        }
        Ok(Resolved {
            natural_probs,
            aug_probs,
            features,
            k,
        })
    }

    /// `n` positive pairs: a natural point is drawn, then two augmentations
    /// of it independently.
    pub fn sample_feature_batches<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(FeatureBatch, FeatureBatch)> {
        if n == 0 {
            return Err(RdmError::invalid("sample count must be >= 1"));
        }
        let r = self.resolve()?;
        let pick = |probs: &[f64], rng: &mut R| -> Result<usize> {
            let dist = WeightedIndex::new(probs)
                .map_err(|e| RdmError::invalid(format!("population weights: {e}")))?;
            Ok(dist.sample(rng))
        };
        let mut z = DMatrix::zeros(n, r.k);
        let mut zp = DMatrix::zeros(n, r.k);
        for i in 0..n {
            let x = pick(&r.natural_probs, rng)?;
            let a = pick(&r.aug_probs[x], rng)?;
            let b = pick(&r.aug_probs[x], rng)?;
            z.set_row(i, &r.features[x][a].transpose());
            zp.set_row(i, &r.features[x][b].transpose());
        }
        Ok((FeatureBatch::new(z)?, FeatureBatch::new(zp)?))
    }

    /// Random population with uniform probabilities and Gaussian features
    /// scattered around a per-natural centre.
    pub fn random<R: Rng + ?Sized>(naturals: usize, augs: usize, k: usize, rng: &mut R) -> Self {
        let naturals = (0..naturals)
            .map(|_| {
                let centre: Vec<f64> = (0..k).map(|_| gaussian(rng)).collect();
                let spread = 0.1 + rng.random::<f64>();
                let weights: Vec<f64> = (0..augs).map(|_| 0.05 + rng.random::<f64>()).collect();
                let total: f64 = weights.iter().sum();
                let mut probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
                // Absorb rounding so the conditional sums to 1 within PROB_TOL.
                let rest: f64 = probs[1..].iter().sum();
                probs[0] = 1.0 - rest;
                Natural {
                    prob: None,
                    augmentations: probs
                        .into_iter()
                        .map(|p| Augmentation {
                            prob: Some(p),
                            feature: centre.iter().map(|c| c + spread * gaussian(rng)).collect(),
                        })
                        .collect(),
                }
            })
            .collect();
        Self { naturals }
    }
}

/// Exact correlations by enumeration of the finite joint distribution.
pub fn empirical_correlations(pop: &FinitePopulation) -> Result<CorrelationBundle> {
    let r = pop.resolve()?;
    let k = r.k;
    let mut c_z = DMatrix::zeros(k, k);
    let mut c_plus = DMatrix::zeros(k, k);
    let mut c_bar = DMatrix::zeros(k, k);
    let mut v_cond = DMatrix::zeros(k, k);

    for ((pn, probs), feats) in r.natural_probs.iter().zip(&r.aug_probs).zip(&r.features) {
        let zbar = probs
            .iter()
            .zip(feats)
            .fold(DVector::zeros(k), |acc, (p, z)| acc + z * *p);
        c_bar += &zbar * zbar.transpose() * *pn;
        for (pa, za) in probs.iter().zip(feats) {
            c_z += za * za.transpose() * (pn * pa);
            let dz = za - &zbar;
            v_cond += &dz * dz.transpose() * (pn * pa);
            for (pb, zb) in probs.iter().zip(feats) {
                c_plus += za * zb.transpose() * (pn * pa * pb);
            }
        }
    }

    let bundle = CorrelationBundle {
        c_z: CorrelationEstimate::exact(c_z)?,
        c_plus: CorrelationEstimate::exact(c_plus)?,
        c_bar: CorrelationEstimate::exact(c_bar)?,
        v_cond: CorrelationEstimate::exact(v_cond)?,
    };
    let scale = bundle.c_z.matrix().amax().max(1.0);
    let (r1, r2) = bundle.identity_residuals();
    if r1 > 1e-10 * scale || r2 > 1e-10 * scale {
        return Err(RdmError::invalid(format!(
            "population correlations violate the positive-pair identities ({r1:e}, {r2:e})"
        )));
    }
    Ok(bundle)
}

/// Pair batches whose correlations are exactly `V diag(lam_z) Vᵀ` (both views)
/// and whose positive-pair correlation is exactly `V diag(lam_plus) Vᵀ`.
/// Needs `n >= 2k` and `0 <= lam_plus <= lam_z`.
pub fn aligned_pair_batches<R: Rng + ?Sized>(
    lam_z: &[f64],
    lam_plus: &[f64],
    basis: &DMatrix<f64>,
    n: usize,
    rng: &mut R,
) -> Result<(FeatureBatch, FeatureBatch)> {
    let k = lam_z.len();
    if lam_plus.len() != k || basis.shape() != (k, k) {
        return Err(RdmError::invalid("spectra and basis sizes disagree"));
    }
    if n < 2 * k {
        return Err(RdmError::invalid(format!("need n >= 2k = {}, got {n}", 2 * k)));
    }
    let mut ratio = Vec::with_capacity(k);
    for (z, p) in lam_z.iter().zip(lam_plus) {
        if !(*z > 0.0 && *p >= 0.0 && *p <= *z) {
            return Err(RdmError::invalid(format!(
                "need 0 <= lam_plus <= lam_z with lam_z > 0, got ({p}, {z})"
            )));
        }
        ratio.push(p / z);
    }
    let q = rng::random_orthonormal_columns(rng, n, 2 * k);
    let root_n = (n as f64).sqrt();
    let mut u1 = DMatrix::zeros(n, k);
    let mut u2 = DMatrix::zeros(n, k);
    for i in 0..k {
        let c = ratio[i];
        let s = (1.0 - c * c).max(0.0).sqrt();
        let scale = root_n * lam_z[i].sqrt();
        u1.set_column(i, &(q.column(i) * scale));
        u2.set_column(i, &((q.column(i) * c + q.column(k + i) * s) * scale));
    }
    Ok((
        FeatureBatch::new(u1 * basis.transpose())?,
        FeatureBatch::new(u2 * basis.transpose())?,
    ))
}

/// `n × k` batch `√n · U diag(s) Vᵀ` with random orthonormal `U`, `V` and
/// singular values `s_i = scale · decay^i`, so its correlation spectrum is
/// `scale² · decay^{2i}`.
pub fn rank_skewed_batch<R: Rng + ?Sized>(n: usize, k: usize, scale: f64, decay: f64, rng: &mut R) -> Result<FeatureBatch> {
    if n < k || k == 0 {
        return Err(RdmError::invalid(format!("need n >= k >= 1, got n = {n}, k = {k}")));
    }
    if !(scale > 0.0 && decay > 0.0 && decay <= 1.0) {
        return Err(RdmError::invalid(format!(
            "need scale > 0 and decay in (0, 1], got {scale}, {decay}"
        )));
    }
    let u = rng::random_orthonormal_columns(rng, n, k);
    let v = rng::random_orthogonal(rng, k);
    let root_n = (n as f64).sqrt();
    let mut us = u;
    for j in 0..k {
        let s = root_n * scale * decay.powi(j as i32);
        us.column_mut(j).scale_mut(s);
    }
    FeatureBatch::new(us * v.transpose())
}
