//! Randomized property suite behind `rdm verify`.
//!
//! Every property draws its instances from its own named stream, so the
//! report depends only on `(seed, instances)`. Instances run in parallel
//! and are merged by index.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_synth::{aligned_pair_batches, empirical_correlations, FinitePopulation, IsotropicAugModel};
use crate::dynamics::{
    isotropic_optimal_predictor, optimal_predictor, pooled_mean, predictor_gradient, predictor_loss,
    simulate_feature_gd, unconstrained_step, centering_identity_residual, FeatureGdConfig, LinearModel, PredictorMode,
    RecordSettings, UnconstrainedState,
};
use crate::error::{RdmError, Result};
use crate::filters::{apply_online_filter, batch_svd, SpectralFilter};
use crate::rng::{self, StreamRng};
use crate::spectral::{self, correlation, effective_rank, entropy, CorrelationEstimate, FeatureBatch, Spectrum, CLAMP_TOL};

/// Required gap `erank(λᶻ) - erank(λᵖ)` for a non-constant increasing filter.
pub const RANK_GAP: f64 = 1e-9;
/// Allowed `|erank(c²λ) - erank(λ)|` for a constant filter.
pub const CONSTANT_TOL: f64 = 1e-12;
/// Relative tolerance between the eigenvalue recursion and simulated descent.
pub const RECURSION_TOL: f64 = 1e-8;
pub const CENTERING_TOL: f64 = 1e-10;
pub const FILTERED_CORRELATION_TOL: f64 = 1e-8;
pub const PAIR_IDENTITY_TOL: f64 = 1e-12;
pub const STATIONARITY_TOL: f64 = 1e-10;
pub const FINITE_DIFF_TOL: f64 = 1e-6;
/// Horizon of the multi-step growth trajectories.
pub const GROWTH_STEPS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub instances: usize,
    pub failures: usize,
    /// Smallest distance to the property's threshold; negative on violation.
    /// Absent when every instance errored.
    pub worst_margin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub version: String,
    pub generator: String,
    pub seed: u64,
    pub instances: usize,
    pub properties: Vec<PropertyResult>,
    pub pass: bool,
}

impl VerifyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn property(&self, name: &str) -> Option<&PropertyResult> {
        self.properties.iter().find(|p| p.name == name)
    }
}

/// Test hooks for negative controls.
#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    /// Replaces the random increasing filters of the rank-difference property.
    pub rank_filter_override: Option<SpectralFilter>,
}

type Check = fn(&mut StreamRng, &VerifyOptions) -> Result<f64>;

const PROPERTIES: &[(&str, Check)] = &[
    ("centering_identity", check_centering),
    ("rank_difference", check_rank_difference),
    ("constant_filter_rank", check_constant_filter),
    ("predictor_spectrum_bounds", check_predictor_spectrum),
    ("recursion_one_step", check_one_step),
    ("recursion_multi_step", check_multi_step),
    ("erank_growth_identical_views", check_growth),
    ("erank_growth_optimal_predictor", check_optimal_predictor_growth),
    ("filtered_correlation", check_filtered_correlation),
    ("positive_pair_identities", check_pair_identities),
    ("entropy_transport", check_entropy_transport),
    ("gradient_stationarity", check_stationarity),
    ("gradient_finite_difference", check_finite_difference),
];

pub fn property_names() -> Vec<&'static str> {
    PROPERTIES.iter().map(|(n, _)| *n).collect()
}

pub fn verify_all(seed: u64, instances: usize) -> VerifyReport {
    verify_all_with(seed, instances, &VerifyOptions::default())
}

pub fn verify_all_with(seed: u64, instances: usize, opts: &VerifyOptions) -> VerifyReport {
    let properties: Vec<PropertyResult> = PROPERTIES
        .iter()
        .map(|(name, check)| run_property(name, *check, seed, instances, opts))
        .collect();
    let pass = properties.iter().all(|p| p.failures == 0);
    VerifyReport {
        version: env!("CARGO_PKG_VERSION").into(),
        generator: rng::GENERATOR.into(),
        seed,
        instances,
        properties,
        pass,
    }
}

/// Runs one named property only.
pub fn verify_property(name: &str, seed: u64, instances: usize, opts: &VerifyOptions) -> Result<PropertyResult> {
    let (_, check) = PROPERTIES
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| RdmError::invalid(format!("unknown property `{name}`")))?;
    Ok(run_property(name, *check, seed, instances, opts))
}

fn run_property(name: &str, check: Check, seed: u64, instances: usize, opts: &VerifyOptions) -> PropertyResult {
    let outcomes: Vec<Result<f64>> = (0..instances)
        .into_par_iter()
        .map(|i| check(&mut rng::instance(seed, name, i as u64), opts))
        .collect();
    let mut failures = 0;
    let mut worst: Option<f64> = None;
    let mut first_failure = None;
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(m) => {
                worst = Some(worst.map_or(m, |w| w.min(m)));
                if !(m > 0.0) {
                    failures += 1;
                    first_failure.get_or_insert_with(|| format!("instance {i}: margin {m:e}"));
                }
            }
            Err(e) => {
                failures += 1;
                first_failure.get_or_insert_with(|| format!("instance {i}: {e}"));
            }
        }
    }
    PropertyResult {
        name: name.into(),
        instances,
        failures,
        worst_margin: worst,
        first_failure,
    }
}

fn uniform(rng: &mut StreamRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn normalized_rows(rng: &mut StreamRng, n: usize, k: usize) -> Result<FeatureBatch> {
    let mut m = rng::gaussian_matrix(rng, n, k, 1.0);
    for mut row in m.row_iter_mut() {
        let norm = row.norm();
        row /= norm;
    }
    FeatureBatch::new(m)
}

fn check_centering(rng: &mut StreamRng, _: &VerifyOptions) -> Result<f64> {
    let n = rng.random_range(1..=64);
    let k = rng.random_range(2..=32);
    let a = normalized_rows(rng, n, k)?;
    let b = normalized_rows(rng, n, k)?;
    let mu = pooled_mean(&a, &b);
    Ok(CENTERING_TOL - centering_identity_residual(&a, &b, &mu)?)
}

/// Spectrum with log-values spread over at least one unit, so that any
/// strictly increasing filter separates the ranks by a visible margin.
fn spread_spectrum(rng: &mut StreamRng, k: usize) -> Vec<f64> {
    let mut logs: Vec<f64> = (0..k).map(|_| uniform(rng, -3.0, 3.0)).collect();
    logs[0] = uniform(rng, 0.5, 3.0);
    logs[1] = uniform(rng, -3.0, -0.5);
    logs.into_iter().map(f64::exp).collect()
}

/// `c₀ + Σ_j c_j x^{p_j}` with positive coefficients and exponents.
fn random_increasing_filter(rng: &mut StreamRng) -> SpectralFilter {
    match rng.random_range(0..4) {
        0 => SpectralFilter::direct_pred(),
        1 => SpectralFilter::log1p(),
        2 => SpectralFilter::log1p_sq(),
        _ => {
            let c0 = uniform(rng, 0.0, 1.0);
            let terms: Vec<(f64, f64)> = (0..3)
                .map(|_| (uniform(rng, 0.1, 1.0), uniform(rng, 0.2, 2.0)))
                .collect();
            SpectralFilter::custom("power-sum", move |x| {
                c0 + terms.iter().map(|(c, p)| c * x.powf(*p)).sum::<f64>()
            })
        }
    }
}

fn filtered_spectrum(lam_z: &[f64], g: &SpectralFilter) -> Result<Spectrum> {
    let vals = lam_z
        .iter()
        .map(|l| g.eval_floored(*l).map(|v| v * v * l))
        .collect::<Result<Vec<_>>>()?;
    Spectrum::new(vals)
}

fn check_rank_difference(rng: &mut StreamRng, opts: &VerifyOptions) -> Result<f64> {
    let k = rng.random_range(2..=64);
    let lam_z = spread_spectrum(rng, k);
    let g = match &opts.rank_filter_override {
        Some(f) => f.clone(),
        None => random_increasing_filter(rng),
    };
    let ez = effective_rank(&Spectrum::new(lam_z.clone())?)?;
    let ep = effective_rank(&filtered_spectrum(&lam_z, &g)?)?;
    Ok(ez - ep - RANK_GAP)
}

fn check_constant_filter(rng: &mut StreamRng, _: &VerifyOptions) -> Result<f64> {
    let k = rng.random_range(2..=64);
    let lam_z = spread_spectrum(rng, k);
    let g = SpectralFilter::constant(uniform(rng, 0.05, 20.0));
    let ez = effective_rank(&Spectrum::new(lam_z.clone())?)?;
    let ep = effective_rank(&filtered_spectrum(&lam_z, &g)?)?;
    Ok(CONSTANT_TOL - (ez - ep).abs())
}

fn check_predictor_spectrum(rng: &mut StreamRng, _: &VerifyOptions) -> Result<f64> {
    let k = rng.random_range(2..=10);
    let pop = FinitePopulation::random(k + 2, 3, k, rng);
    let b = empirical_correlations(&pop)?;
    let w = optimal_predictor(&b.c_plus, &b.c_z)?;
    // L⁻¹ W L is symmetric for W = C₊ C_z⁻¹ and C_z = L Lᵀ.
    let l = b
        .c_z
        .matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| RdmError::Singular("C_z is not positive definite".into()))?
        .l();
    let inner = l
        .clone()
        .solve_lower_triangular(&(&w * &l))
        .ok_or_else(|| RdmError::Singular("triangular solve failed".into()))?;
    let (vals, _) = spectral::eigh_signed(&CorrelationEstimate::exact(inner)?)?;
    let hi = vals[0];
    let lo = *vals.last().expect("non-empty");
    Ok((lo + 1e-9).min(1.0 + 1e-9 - hi))
}

fn max_relative(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Aligned batches `(p0, z, z⁺)` with `C_p = V diag(w² λᶻ) Vᵀ`, `C_z = V diag(λᶻ) Vᵀ`
/// and `C₊ = V diag(λ⁺) Vᵀ`, with `p0 = z V diag(w) Vᵀ`.
struct AlignedSetup {
    p0: FeatureBatch,
    z: FeatureBatch,
    z_pair: FeatureBatch,
    state: UnconstrainedState,
}

fn aligned_setup(rng: &mut StreamRng, lam_z: Vec<f64>, lam_plus: Vec<f64>, w: Vec<f64>) -> Result<AlignedSetup> {
    let k = lam_z.len();
    let n = 2 * k + rng.random_range(0..=k);
    let basis = rng::random_orthogonal(rng, k);
    let (z, z_pair) = aligned_pair_batches(&lam_z, &lam_plus, &basis, n, rng)?;
    let wm = DMatrix::from_fn(k, k, |i, j| (0..k).map(|t| basis[(i, t)] * w[t] * basis[(j, t)]).sum());
    let p0 = FeatureBatch::new(z.data() * wm)?;
    let lam_p = w.iter().zip(&lam_z).map(|(w, l)| w * w * l).collect();
    Ok(AlignedSetup {
        p0,
        z,
        z_pair,
        state: UnconstrainedState::new(lam_p, lam_z, lam_plus)?,
    })
}

fn fixed_gd(alpha: f64, steps: usize) -> FeatureGdConfig {
    FeatureGdConfig {
        alpha,
        steps,
        stop_gradient: true,
        predictor_mode: PredictorMode::Fixed,
        record: RecordSettings {
            top_r: usize::MAX,
            coverage: 1.0,
            stride: 1,
        },
    }
}

fn check_one_step(rng: &mut StreamRng, _: &VerifyOptions) -> Result<f64> {
    let k = rng.random_range(2..=16);
    let lam_z: Vec<f64> = (0..k).map(|_| uniform(rng, -2.0, 2.0).exp()).collect();
    let lam_plus: Vec<f64> = lam_z.iter().map(|l| l * rng.random::<f64>()).collect();
    let w: Vec<f64> = (0..k).map(|_| uniform(rng, 0.2, 2.0)).collect();
    let alpha = uniform(rng, 0.01, 0.99);
    let setup = aligned_setup(rng, lam_z, lam_plus, w)?;
    let run = simulate_feature_gd(&setup.p0, &setup.z, &setup.z_pair, &fixed_gd(alpha, 1))?;
    let simulated = spectral::spectrum(&correlation(&run.online))?;
    let predicted = sorted_desc(unconstrained_step(&setup.state, alpha)?.lam_p);
    Ok(RECURSION_TOL - max_relative(simulated.values(), &predicted))
}

/// Identical views (`z⁺ = z`) with a strictly low-pass initial predictor.
fn growth_setup(rng: &mut StreamRng) -> Result<(AlignedSetup, f64)> {
    let k = rng.random_range(2..=16);
    let lam_z = spread_spectrum(rng, k);
    let q = uniform(rng, 0.25, 1.0);
    let w: Vec<f64> = lam_z.iter().map(|l| l.powf(q)).collect();
    let alpha = uniform(rng, 0.02, 0.05);
    Ok((aligned_setup(rng, lam_z.clone(), lam_z, w)?, alpha))
}

fn check_multi_step(rng: &mut StreamRng, _: &VerifyOptions) -> Result<f64> {
    let (setup, alpha) = growth_setup(rng)?;
    let run = simulate_feature_gd(&setup.p0, &setup.z, &setup.z_pair, &fixed_gd(alpha, GROWTH_STEPS))?;
    let mut state = setup.state;
    let mut worst: f64 = 0.0;
    for row in &run.record.rows[1..] {
        state = unconstrained_step(&state, alpha)?;
        worst = worst.max(max_relative(&row.ev_online, &sorted_desc(state.lam_p.clone())));
    }
    Ok(RECURSION_TOL - worst)
}

fn check_growth(rng: &mut StreamRng, _: &VerifyOptions) -> Result<f64> {
    let (setup, alpha) = growth_setup(rng)?;
    let run = simulate_feature_gd(&setup.p0, &setup.z, &setup.z_pair, &fixed_gd(alpha, GROWTH_STEPS))?;
    Ok(run
        .record
        .rows
        .windows(2)
        .map(|w| w[1].erank_online - w[0].erank_online)
        .fold(f64::INFINITY, f64::min))
}

/// Predictor at its optimum, `λᵖ = (λ⁺)²/λᶻ`, with `ω = λ⁺/λᶻ` increasing in `λᶻ`. The
/// update factor must then fall strictly with `λᵖ` and erank must rise.
fn check_optimal_predictor_growth(rng: &mut StreamRng, _: &VerifyOptions) -> Result<f64> {
    let k = rng.random_range(2..=64);
    let lam_z = sorted_desc(spread_spectrum(rng, k));
    let mut omega: Vec<f64> = (0..k).map(|_| uniform(rng, 0.05, 1.0)).collect();
    omega.sort_by(|a, b| b.total_cmp(a));
    omega[0] = omega[0].max(omega[k - 1] + 0.05).min(1.0);
    let lam_plus: Vec<f64> = lam_z.iter().zip(&omega).map(|(l, o)| l * o).collect();
    let lam_p: Vec<f64> = lam_plus.iter().zip(&lam_z).map(|(c, z)| c * c / z).collect();
    let state = UnconstrainedState::new(lam_p.clone(), lam_z, lam_plus)?;
    let alpha = uniform(rng, 0.01, 0.99);

    let factors = state.update_factors(alpha);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|a, b| lam_p[*a].total_cmp(&lam_p[*b]));
    let falling = order
        .windows(2)
        .filter(|w| lam_p[w[0]] < lam_p[w[1]])
        .map(|w| factors[w[0]] - factors[w[1]])
        .fold(f64::INFINITY, f64::min);
    if !(falling > 0.0) {
        return Ok(falling);
    }
    let before = effective_rank(&Spectrum::new(lam_p)?)?;
    let after = effective_rank(&Spectrum::new(unconstrained_step(&state, alpha)?.lam_p)?)?;
    Ok(after - before)
}

fn random_low_pass(rng: &mut StreamRng) -> SpectralFilter {
    match rng.random_range(0..4) {
        0 => SpectralFilter::direct_pred(),
        1 => SpectralFilter::log1p(),
        2 => SpectralFilter::log1p_sq(),
        _ => SpectralFilter::power(uniform(rng, 0.2, 1.5)),
    }
}

fn check_filtered_correlation(rng: &mut StreamRng, _: &VerifyOptions) -> Result<f64> {
    let k = rng.random_range(2..=16);
    let n = rng.random_range(k..=3 * k);
    let scales: Vec<f64> = (0..k).map(|_| uniform(rng, 0.1, 2.0)).collect();
    let raw = rng::gaussian_matrix(rng, n, k, 1.0);
    let z = FeatureBatch::new(DMatrix::from_fn(n, k, |i, j| raw[(i, j)] * scales[j]))?;
    let g = random_low_pass(rng);
    let out = apply_online_filter(&z, &g)?;
    let svd = batch_svd(&z);
    let gains = svd
        .singular_values
        .iter()
        .map(|s| g.eval_floored(*s).map(|v| v * v * s * s / n as f64))
        .collect::<Result<Vec<_>>>()?;
    let v = &svd.v;
    let expected = DMatrix::from_fn(k, k, |i, j| (0..v.ncols()).map(|t| v[(i, t)] * gains[t] * v[(j, t)]).sum());
    let got = correlation(&out.batch);
    Ok(FILTERED_CORRELATION_TOL - (got.matrix() - expected).amax())
}

fn check_pair_identities(rng: &mut StreamRng, _: &VerifyOptions) -> Result<f64> {
    let naturals = rng.random_range(1..=8);
    let augs = rng.random_range(1..=5);
    let k = rng.random_range(1..=8);
    let pop = FinitePopulation::random(naturals, augs, k, rng);
    let b = empirical_correlations(&pop)?;
    let (r1, r2) = b.identity_residuals();
    let (vals, _) = spectral::eigh_signed(&b.v_cond)?;
    let psd = vals.last().expect("non-empty") + CLAMP_TOL;
    Ok((PAIR_IDENTITY_TOL - r1.max(r2)).min(psd))
}

fn check_entropy_transport(rng: &mut StreamRng, _: &VerifyOptions) -> Result<f64> {
    let k = rng.random_range(2..=64);
    let raw: Vec<f64> = (0..k).map(|_| uniform(rng, 0.01, 1.0)).collect();
    let total: f64 = raw.iter().sum();
    let q = sorted_desc(raw.into_iter().map(|v| v / total).collect());
    let i = rng.random_range(0..k - 1);
    let j = rng.random_range(i + 1..k);
    let delta = q[j] * uniform(rng, 0.05, 1.0);
    let mut moved = q.clone();
    moved[i] += delta;
    moved[j] -= delta;
    Ok(entropy(&q) - entropy(&moved))
}

fn random_linear_model(rng: &mut StreamRng, eta: f64) -> Result<LinearModel> {
    let k = rng.random_range(2..=12);
    let d = rng.random_range(k..=2 * k + 4);
    let aug_std = uniform(rng, 0.0, 1.0);
    let encoder = rng::gaussian_matrix(rng, k, d, 1.0 / (d as f64).sqrt());
    let data = IsotropicAugModel::new(encoder, aug_std, 0)?;
    let w = rng::gaussian_matrix(rng, k, k, 0.5);
    LinearModel::new(data, w, eta, 0.1)
}

fn check_stationarity(rng: &mut StreamRng, _: &VerifyOptions) -> Result<f64> {
    let eta = uniform(rng, 1e-3, 0.1);
    let mut model = random_linear_model(rng, eta)?;
    model.predictor = isotropic_optimal_predictor(&model)?;
    let scale = model.data.gram().amax().max(1.0);
    Ok(STATIONARITY_TOL - predictor_gradient(&model).amax() / scale)
}

/// Central differences of the loss against the closed-form gradient,
/// relative in Frobenius norm.
pub fn finite_difference_error(model: &LinearModel, step: f64) -> f64 {
    let k = model.predictor.nrows();
    let mut fd = DMatrix::zeros(k, k);
    let mut probe = model.clone();
    for i in 0..k {
        for j in 0..k {
            let w0 = model.predictor[(i, j)];
            probe.predictor[(i, j)] = w0 + step;
            let up = predictor_loss(&probe);
            probe.predictor[(i, j)] = w0 - step;
            let down = predictor_loss(&probe);
            probe.predictor[(i, j)] = w0;
            fd[(i, j)] = (up - down) / (2.0 * step);
        }
    }
    let g = predictor_gradient(model);
    (g.clone() - fd).norm() / g.norm().max(f64::MIN_POSITIVE)
}

fn check_finite_difference(rng: &mut StreamRng, _: &VerifyOptions) -> Result<f64> {
    let eta = uniform(rng, 0.0, 0.1);
    let model = random_linear_model(rng, eta)?;
    Ok(FINITE_DIFF_TOL - finite_difference_error(&model, 1e-5))
}
