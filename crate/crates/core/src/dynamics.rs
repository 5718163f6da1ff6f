//! Training dynamics of the two-branch setting.
//!
//! Covers the linear predictor in the isotropic model (closed-form
//! gradient and optimum), the per-eigenvalue recursion of gradient descent
//! in feature space, direct simulation of that descent with and without
//! stop-gradient, and the centred symmetric objective.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data_synth::{exact_correlations_linear, IsotropicAugModel};
use crate::error::{RdmError, Result};
use crate::filters::FLOOR_SIGMA;
use crate::spectral::{
    self, correlation, eigenspace_alignment, fmt_f64, CorrelationEstimate, FeatureBatch, Spectrum,
};

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_ETA: f64 = 0.01;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_STEPS: usize = 500;
pub const DEFAULT_TOP_R: usize = 8;

/// Smallest eigenvalue of `C_z` accepted by [`optimal_predictor`].
pub const INVERTIBILITY_TOL: f64 = 1e-10;

/// Tolerance on `‖row‖ = 1` for inputs that must be ℓ2-normalized.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// `(1/n) Σ_x ½‖p_x - z_x‖²`; the target is a constant.
pub fn alignment_loss_mse(p: &FeatureBatch, z_target: &FeatureBatch) -> Result<f64> {
    if p.shape() != z_target.shape() {
        return Err(RdmError::invalid(format!(
            "loss operands differ in shape: {:?} vs {:?}",
            p.shape(),
            z_target.shape()
        )));
    }
    Ok(0.5 * (p.data() - z_target.data()).norm_squared() / p.rows() as f64)
}

/// Linear predictor `p = W z` on top of the isotropic linear encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub data: IsotropicAugModel,
    pub predictor: DMatrix<f64>,
    pub eta: f64,
    pub alpha: f64,
}

impl LinearModel {
    pub fn new(data: IsotropicAugModel, predictor: DMatrix<f64>, eta: f64, alpha: f64) -> Result<Self> {
        let k = data.k();
        if predictor.shape() != (k, k) {
            return Err(RdmError::invalid(format!(
                "predictor must be {k}x{k}, got {:?}",
                predictor.shape()
            )));
        }
        if predictor.iter().any(|v| !v.is_finite()) {
            return Err(RdmError::invalid("predictor has non-finite entries"));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(RdmError::invalid(format!("weight decay must be >= 0, got {eta}")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(RdmError::invalid(format!("step size must be in (0, 1), got {alpha}")));
        }
        Ok(Self {
            data,
            predictor,
            eta,
            alpha,
        })
    }

    fn noise_gain(&self) -> f64 {
        1.0 + self.data.aug_std() * self.data.aug_std()
    }
}

/// Population MSE alignment loss of the linear predictor plus `η/2 ‖W‖²`.
pub fn predictor_loss(model: &LinearModel) -> f64 {
    let a = model.data.gram();
    let w = &model.predictor;
    let gain = model.noise_gain();
    let quad = (w.transpose() * w * &a).trace();
    0.5 * (gain * quad - 2.0 * (w * &a).trace() + gain * a.trace())
        + 0.5 * model.eta * w.norm_squared()
}

/// `(1+σ²) W W_f W_fᵀ - W_f W_fᵀ + η W`.
pub fn predictor_gradient(model: &LinearModel) -> DMatrix<f64> {
    let a = model.data.gram();
    &model.predictor * &a * model.noise_gain() - &a + &model.predictor * model.eta
}

fn min_eigenvalue(c: &CorrelationEstimate) -> Result<f64> {
    let (values, _) = spectral::eigh_signed(c)?;
    Ok(*values.last().expect("non-empty"))
}

/// `W* = C₊ C_z⁻¹`. Fails on a (near) singular `C_z`; use
/// [`regularized_optimal_predictor`] with `η > 0` there.
pub fn optimal_predictor(c_plus: &CorrelationEstimate, c_z: &CorrelationEstimate) -> Result<DMatrix<f64>> {
    if c_plus.dim() != c_z.dim() {
        return Err(RdmError::invalid("correlations differ in size"));
    }
    let min = min_eigenvalue(c_z)?;
    if min <= INVERTIBILITY_TOL {
        return Err(RdmError::Singular(format!(
            "C_z has smallest eigenvalue {min:e}; pass eta > 0 for the regularized optimum"
        )));
    }
    solve_right(c_plus.matrix(), c_z.matrix())
}

/// `W* = C₊ (C_z + ηI)⁻¹`, the stationary point with weight decay.
pub fn regularized_optimal_predictor(
    c_plus: &CorrelationEstimate,
    c_z: &CorrelationEstimate,
    eta: f64,
) -> Result<DMatrix<f64>> {
    if eta == 0.0 {
        return optimal_predictor(c_plus, c_z);
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(RdmError::invalid(format!("weight decay must be positive, got {eta}")));
    }
    let k = c_z.dim();
    let shifted = c_z.matrix() + DMatrix::identity(k, k) * eta;
    if min_eigenvalue(&CorrelationEstimate::exact(shifted.clone())?)? <= INVERTIBILITY_TOL {
        return Err(RdmError::Singular("C_z + eta I is not positive definite".into()));
    }
    solve_right(c_plus.matrix(), &shifted)
}

/// `B A⁻¹` for symmetric positive definite `A`.
fn solve_right(b: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| RdmError::Singular("Cholesky factorization failed".into()))?;
    Ok(chol.solve(&b.transpose()).transpose())
}

/// Optimal predictor of the isotropic model, `W_fW_fᵀ((1+σ²)W_fW_fᵀ + ηI)⁻¹`.
pub fn isotropic_optimal_predictor(model: &LinearModel) -> Result<DMatrix<f64>> {
    let b = exact_correlations_linear(&model.data);
    regularized_optimal_predictor(&b.c_plus, &b.c_z, model.eta)
}

/// Per-index eigenvalues of the online, target and positive-pair correlations
/// in a shared eigenbasis.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnconstrainedState {
    pub lam_p: Vec<f64>,
    pub lam_z: Vec<f64>,
    pub lam_plus: Vec<f64>,
}

impl UnconstrainedState {
    pub fn new(lam_p: Vec<f64>, lam_z: Vec<f64>, lam_plus: Vec<f64>) -> Result<Self> {
        let k = lam_p.len();
        if k == 0 || lam_z.len() != k || lam_plus.len() != k {
            return Err(RdmError::invalid("eigenvalue lists must be non-empty and equal length"));
        }
        for i in 0..k {
            let (p, z, c) = (lam_p[i], lam_z[i], lam_plus[i]);
            if !(p.is_finite() && z.is_finite() && c.is_finite()) {
                return Err(RdmError::invalid("non-finite eigenvalue"));
            }
            if !(p > 0.0 && z > 0.0 && c >= 0.0 && c <= z * (1.0 + 1e-12)) {
                return Err(RdmError::invalid(format!(
                    "index {i}: need lam_p > 0 and lam_z >= lam_plus >= 0, got ({p}, {z}, {c})"
                )));
            }
        }
        Ok(Self {
            lam_p,
            lam_z,
            lam_plus,
        })
    }

    /// Current high-pass target filter `h_i = sqrt(λᶻ_i / λᵖ_i)`.
    pub fn high_pass(&self) -> Vec<f64> {
        self.lam_z
            .iter()
            .zip(&self.lam_p)
            .map(|(z, p)| (z / p.max(FLOOR_SIGMA)).sqrt())
            .collect()
    }

    /// `λᵖ_{t+1} / λᵖ_t` per index.
    pub fn update_factors(&self, alpha: f64) -> Vec<f64> {
        let b = 1.0 - alpha;
        self.high_pass()
            .iter()
            .zip(self.lam_plus.iter().zip(&self.lam_z))
            .map(|(h, (c, z))| b * b + alpha * alpha * h * h + 2.0 * alpha * b * h * c / z)
            .collect()
    }
}

pub fn unconstrained_step(state: &UnconstrainedState, alpha: f64) -> Result<UnconstrainedState> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(RdmError::invalid(format!("step size must be in (0, 1), got {alpha}")));
    }
    let lam_p = state
        .lam_p
        .iter()
        .zip(state.update_factors(alpha))
        .map(|(p, f)| p * f)
        .collect();
    Ok(UnconstrainedState {
        lam_p,
        lam_z: state.lam_z.clone(),
        lam_plus: state.lam_plus.clone(),
    })
}

/// One recorded step of a trajectory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub loss: f64,
    pub erank_online: f64,
    pub erank_target: f64,
    pub alignment: f64,
    pub ev_online: Vec<f64>,
    pub ev_target: Vec<f64>,
}

/// Per-step measurements; row 0 is the state before any update.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub top_r: usize,
    pub rows: Vec<TrajectoryRow>,
}

impl TrajectoryRecord {
    pub fn new(top_r: usize) -> Self {
        Self {
            top_r,
            rows: Vec::new(),
        }
    }

    pub fn first(&self) -> &TrajectoryRow {
        &self.rows[0]
    }

    pub fn last(&self) -> &TrajectoryRow {
        self.rows.last().expect("trajectory has a step-0 row")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,erank_online,erank_target,alignment");
        for i in 1..=self.top_r {
            let _ = write!(out, ",ev_online_{i}");
        }
        for i in 1..=self.top_r {
            let _ = write!(out, ",ev_target_{i}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{}",
                row.step,
                fmt_f64(row.loss),
                fmt_f64(row.erank_online),
                fmt_f64(row.erank_target),
                fmt_f64(row.alignment)
            );
            for v in pad(&row.ev_online, self.top_r).iter().chain(pad(&row.ev_target, self.top_r).iter()) {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }
}

fn pad(v: &[f64], r: usize) -> Vec<f64> {
    let mut out = v.to_vec();
    out.resize(r, 0.0);
    out
}

/// Measurement settings shared by the trajectory runners.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecordSettings {
    pub top_r: usize,
    pub coverage: f64,
    /// Record every `stride` steps; step 0 and the last step are always kept.
    pub stride: usize,
}

impl Default for RecordSettings {
    fn default() -> Self {
        Self {
            top_r: DEFAULT_TOP_R,
            coverage: spectral::DEFAULT_COVERAGE,
            stride: 1,
        }
    }
}

impl RecordSettings {
    fn keep(&self, step: usize, last: usize) -> bool {
        step == 0 || step == last || step % self.stride.max(1) == 0
    }
}

fn measure(
    step: usize,
    loss: f64,
    c_online: &CorrelationEstimate,
    c_target: &CorrelationEstimate,
    settings: &RecordSettings,
) -> Result<TrajectoryRow> {
    let diverged = |what: &str| RdmError::Divergence {
        step,
        what: what.into(),
    };
    if !loss.is_finite() {
        return Err(diverged("loss is not finite"));
    }
    let so: Spectrum = spectral::spectrum(c_online).map_err(|_| diverged("online spectrum"))?;
    let st: Spectrum = spectral::spectrum(c_target).map_err(|_| diverged("target spectrum"))?;
    let row = TrajectoryRow {
        step,
        loss,
        erank_online: spectral::effective_rank(&so)?,
        erank_target: spectral::effective_rank(&st)?,
        alignment: eigenspace_alignment(c_online, c_target, settings.coverage)?.value,
        ev_online: so.top(settings.top_r).to_vec(),
        ev_target: st.top(settings.top_r).to_vec(),
    };
    Ok(row)
}

fn check_finite(m: &DMatrix<f64>, step: usize, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(RdmError::Divergence {
            step,
            what: format!("{what} has non-finite entries"),
        })
    }
}

/// How the linear predictor `p = W z` is treated between feature steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorMode {
    /// `p` moves freely after initialization; no predictor is re-fit.
    Fixed,
    /// After each step `W` is re-fit to the new `p` by least squares on `z`,
    /// which projects `p` onto the column span of `z`. The fixed point is
    /// the sample optimum `W*`.
    #[default]
    Refit,
}

impl std::str::FromStr for PredictorMode {
    type Err = RdmError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fixed" => Ok(Self::Fixed),
            "refit" => Ok(Self::Refit),
            other => Err(RdmError::Config(format!(
                "unknown predictor mode `{other}` (expected fixed or refit)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureGdConfig {
    pub alpha: f64,
    pub steps: usize,
    pub stop_gradient: bool,
    pub predictor_mode: PredictorMode,
    pub record: RecordSettings,
}

/// Final state of a feature-space descent together with its record.
#[derive(Clone, Debug)]
pub struct FeatureGdRun {
    pub record: TrajectoryRecord,
    pub online: FeatureBatch,
    pub target: FeatureBatch,
}

/// Orthonormal basis of the column span of `z`, or an error when `z` is
/// rank deficient.
fn column_span(z: &FeatureBatch) -> Result<DMatrix<f64>> {
    let (n, k) = z.shape();
    if n < k {
        return Err(RdmError::invalid(format!(
            "refit needs at least as many samples as features, got {n} < {k}"
        )));
    }
    let qr = z.data().clone().qr();
    let r = qr.r();
    let scale = r.diagonal().amax();
    if r.diagonal().iter().any(|d| d.abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        return Err(RdmError::Singular("online input batch is rank deficient".into()));
    }
    Ok(qr.q())
}

/// Full-batch gradient descent on the online features `p` against the
/// positive-pair targets `z_pair` under `½‖p_x - z_{x⁺}‖²`. `z` is the
/// online branch input that the predictor maps from.
///
/// With stop-gradient the targets stay fixed and `p ← (1-α)p + α z⁺`.
/// Without it the same loss also moves the targets, `z⁺ ← z⁺ + α(p - z⁺)`.
/// `erank_target` and `alignment` are measured on the current targets.
pub fn simulate_feature_gd(
    p0: &FeatureBatch,
    z: &FeatureBatch,
    z_pair: &FeatureBatch,
    cfg: &FeatureGdConfig,
) -> Result<FeatureGdRun> {
    if p0.shape() != z_pair.shape() || z.shape() != z_pair.shape() {
        return Err(RdmError::invalid(format!(
            "batches differ in shape: p0 {:?}, z {:?}, z_pair {:?}",
            p0.shape(),
            z.shape(),
            z_pair.shape()
        )));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(RdmError::invalid(format!("step size must be in (0, 1), got {}", cfg.alpha)));
    }
    let span = match cfg.predictor_mode {
        PredictorMode::Refit => Some(column_span(z)?),
        PredictorMode::Fixed => None,
    };
    let top_r = cfg.record.top_r.min(p0.cols());
    let settings = RecordSettings { top_r, ..cfg.record };
    let mut record = TrajectoryRecord::new(top_r);
    let mut p = p0.data().clone();
    let mut target = z_pair.data().clone();
    let n = p.nrows() as f64;

    let mut c_target = correlation(z_pair);
    for step in 0..=cfg.steps {
        if settings.keep(step, cfg.steps) {
            let pb = FeatureBatch::new(p.clone()).map_err(|_| RdmError::Divergence {
                step,
                what: "online features".into(),
            })?;
            let loss = 0.5 * (&p - &target).norm_squared() / n;
            record.rows.push(measure(step, loss, &correlation(&pb), &c_target, &settings)?);
        }
        if step == cfg.steps {
            break;
        }
        let residual = &p - &target;
        p -= &residual * cfg.alpha;
        if let Some(q) = &span {
            p = q * (q.transpose() * &p);
        }
        check_finite(&p, step + 1, "online features")?;
        if !cfg.stop_gradient {
            target += &residual * cfg.alpha;
            check_finite(&target, step + 1, "target features")?;
            c_target = correlation(&FeatureBatch::new(target.clone())?);
        }
    }
    Ok(FeatureGdRun {
        record,
        online: FeatureBatch::new(p)?,
        target: FeatureBatch::new(target)?,
    })
}

/// Feature centre tracked by an exponential moving average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterState {
    pub center: Vec<f64>,
    pub momentum: f64,
}

impl CenterState {
    pub fn zeros(k: usize, momentum: f64) -> Result<Self> {
        Self::new(vec![0.0; k], momentum)
    }

    pub fn new(center: Vec<f64>, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(RdmError::invalid(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if center.iter().any(|v| !v.is_finite()) {
            return Err(RdmError::invalid("center has non-finite entries"));
        }
        Ok(Self { center, momentum })
    }
}

fn normalize_rows(b: &FeatureBatch) -> Result<DMatrix<f64>> {
    let mut m = b.data().clone();
    for mut row in m.row_iter_mut() {
        let norm = row.norm();
        if norm == 0.0 {
            return Err(RdmError::invalid("cannot normalize a zero feature row"));
        }
        row /= norm;
    }
    Ok(m)
}

fn column_mean(m: &DMatrix<f64>) -> DVector<f64> {
    m.row_mean().transpose()
}

/// One step of the centred symmetric objective: the centre moves to
/// `m c + (1-m) mean(cat(z1, z2))`, then `loss = -(1/n) Σ (z1_x - c)ᵀ(z2_x - c)`.
/// Rows are ℓ2-normalized first.
pub fn symsimsiam_step(batch1: &FeatureBatch, batch2: &FeatureBatch, cs: &CenterState) -> Result<(f64, CenterState)> {
    if batch1.shape() != batch2.shape() {
        return Err(RdmError::invalid("views differ in shape"));
    }
    if cs.center.len() != batch1.cols() {
        return Err(RdmError::invalid("center length does not match feature dimension"));
    }
    let z1 = normalize_rows(batch1)?;
    let z2 = normalize_rows(batch2)?;
    let pooled = (column_mean(&z1) + column_mean(&z2)) * 0.5;
    let m = cs.momentum;
    let center: Vec<f64> = cs
        .center
        .iter()
        .zip(pooled.iter())
        .map(|(c, mu)| m * c + (1.0 - m) * mu)
        .collect();
    let loss = centred_loss(&z1, &z2, &center);
    Ok((
        loss,
        CenterState {
            center,
            momentum: m,
        },
    ))
}

fn centred_loss(z1: &DMatrix<f64>, z2: &DMatrix<f64>, center: &[f64]) -> f64 {
    let c = DVector::from_column_slice(center).transpose();
    let n = z1.nrows();
    let mut total = 0.0;
    for i in 0..n {
        total += (z1.row(i) - &c).dot(&(z2.row(i) - &c));
    }
    -total / n as f64
}

/// Mean of the two views pooled together.
pub fn pooled_mean(batch1: &FeatureBatch, batch2: &FeatureBatch) -> Vec<f64> {
    ((column_mean(batch1.data()) + column_mean(batch2.data())) * 0.5)
        .iter()
        .copied()
        .collect()
}

fn check_unit_rows(b: &FeatureBatch) -> Result<()> {
    for i in 0..b.rows() {
        let norm = b.data().row(i).norm();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(RdmError::invalid(format!("row {i} has norm {norm}, expected 1")));
        }
    }
    Ok(())
}

/// `|LHS - RHS|` of the centring identity
/// `-𝔼(f-μ)ᵀ(f⁺-μ) = -𝔼 fᵀf⁺ - (1 - ‖μ‖²) + 1`, exact when `mu` is the pooled mean.
pub fn centering_identity_residual(batch1: &FeatureBatch, batch2: &FeatureBatch, mu: &[f64]) -> Result<f64> {
    if batch1.shape() != batch2.shape() || mu.len() != batch1.cols() {
        return Err(RdmError::invalid("shape mismatch"));
    }
    check_unit_rows(batch1)?;
    check_unit_rows(batch2)?;
    let lhs = centred_loss(batch1.data(), batch2.data(), mu);
    let rhs = centred_loss(batch1.data(), batch2.data(), &vec![0.0; mu.len()])
        - (1.0 - mu.iter().map(|v| v * v).sum::<f64>())
        + 1.0;
    Ok((lhs - rhs).abs())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymSimSiamConfig {
    pub alpha: f64,
    pub steps: usize,
    pub momentum: f64,
    pub record: RecordSettings,
}

/// Free-feature descent on the centred symmetric loss. Each view moves
/// along the tangent part of `(z_other - c)` and is renormalized; the
/// centre is a constant for differentiation. The record's online/target
/// columns are the two views.
pub fn simulate_symsimsiam(view1: &FeatureBatch, view2: &FeatureBatch, cfg: &SymSimSiamConfig) -> Result<TrajectoryRecord> {
    if view1.shape() != view2.shape() {
        return Err(RdmError::invalid("views differ in shape"));
    }
    let top_r = cfg.record.top_r.min(view1.cols());
    let settings = RecordSettings { top_r, ..cfg.record };
    let mut record = TrajectoryRecord::new(top_r);
    let mut z1 = normalize_rows(view1)?;
    let mut z2 = normalize_rows(view2)?;
    let mut cs = CenterState::zeros(view1.cols(), cfg.momentum)?;
    for step in 0..=cfg.steps {
        let b1 = FeatureBatch::new(z1.clone())?;
        let b2 = FeatureBatch::new(z2.clone())?;
        let (loss, next) = symsimsiam_step(&b1, &b2, &cs)?;
        if settings.keep(step, cfg.steps) {
            record.rows.push(measure(step, loss, &correlation(&b1), &correlation(&b2), &settings)?);
        }
        if step == cfg.steps {
            break;
        }
        cs = next;
        let c = DVector::from_column_slice(&cs.center).transpose();
        let mut g1 = z1.clone();
        let mut g2 = z2.clone();
        for i in 0..z1.nrows() {
            // descent direction of -(z1-c)ᵀ(z2-c) is +(z2 - c) for z1 and vice versa
            g1.set_row(i, &tangent(&z1.row(i).into_owned(), &(z2.row(i) - &c)));
            g2.set_row(i, &tangent(&z2.row(i).into_owned(), &(z1.row(i) - &c)));
        }
        z1 += g1 * cfg.alpha;
        z2 += g2 * cfg.alpha;
        check_finite(&z1, step + 1, "view 1")?;
        check_finite(&z2, step + 1, "view 2")?;
        z1 = normalize_rows(&FeatureBatch::new(z1)?)?;
        z2 = normalize_rows(&FeatureBatch::new(z2)?)?;
    }
    Ok(record)
}

fn tangent(
    at: &nalgebra::RowDVector<f64>,
    dir: &nalgebra::RowDVector<f64>,
) -> nalgebra::RowDVector<f64> {
    dir - at * at.dot(dir)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearRunConfig {
    pub steps: usize,
    pub record: RecordSettings,
}

#[derive(Clone, Debug)]
pub struct LinearRun {
    pub record: TrajectoryRecord,
    pub predictor: DMatrix<f64>,
    pub optimum: DMatrix<f64>,
    /// `‖W - W*‖_F / ‖W*‖_F` at the end of the run.
    pub relative_error: f64,
}

/// Gradient descent on the linear predictor with exact population
/// correlations, recording `C_p = W C_z Wᵀ` against `C_z` each step.
pub fn linear_training_run(model: &LinearModel, cfg: &LinearRunConfig) -> Result<LinearRun> {
    let bundle = exact_correlations_linear(&model.data);
    let optimum = regularized_optimal_predictor(&bundle.c_plus, &bundle.c_z, model.eta)?;
    let top_r = cfg.record.top_r.min(model.data.k());
    let settings = RecordSettings { top_r, ..cfg.record };
    let mut record = TrajectoryRecord::new(top_r);
    let mut current = model.clone();
    for step in 0..=cfg.steps {
        if settings.keep(step, cfg.steps) {
            let w = &current.predictor;
            let c_p = CorrelationEstimate::exact(w * bundle.c_z.matrix() * w.transpose()).map_err(|_| {
                RdmError::Divergence {
                    step,
                    what: "online correlation".into(),
                }
            })?;
            record
                .rows
                .push(measure(step, predictor_loss(&current), &c_p, &bundle.c_z, &settings)?);
        }
        if step == cfg.steps {
            break;
        }
        let grad = predictor_gradient(&current);
        current.predictor -= grad * current.alpha;
        check_finite(&current.predictor, step + 1, "predictor")?;
    }
    let relative_error = (&current.predictor - &optimum).norm() / optimum.norm();
    Ok(LinearRun {
        record,
        predictor: current.predictor,
        optimum,
        relative_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn batch(rows: &[Vec<f64>]) -> FeatureBatch {
        FeatureBatch::from_rows(rows).unwrap()
    }

    #[test]
    fn loss_examples() {
        let z = batch(&[vec![1.0, 2.0], vec![-3.0, 0.5]]);
        assert_eq!(alignment_loss_mse(&z, &z).unwrap(), 0.0);
        let zero = batch(&[vec![0.0, 0.0]]);
        let t = batch(&[vec![3.0, 4.0]]);
        assert_eq!(alignment_loss_mse(&zero, &t).unwrap(), 12.5);
        assert!(alignment_loss_mse(&zero, &z).is_err());

        let mut rng = rng::stream(1, "loss");
        let p = FeatureBatch::new(rng::gaussian_matrix(&mut rng, 5, 3, 1.0)).unwrap();
        let q = FeatureBatch::new(rng::gaussian_matrix(&mut rng, 5, 3, 1.0)).unwrap();
        let mut brute = 0.0;
        for i in 0..5 {
            for j in 0..3 {
                brute += 0.5 * (p.data()[(i, j)] - q.data()[(i, j)]).powi(2);
            }
        }
        assert!((alignment_loss_mse(&p, &q).unwrap() - brute / 5.0).abs() < 1e-14);
    }

    fn model(eta: f64) -> LinearModel {
        let data = IsotropicAugModel::random(6, 4, 0.5, 11).unwrap();
        let w = rng::gaussian_matrix(&mut rng::stream(11, "init"), 4, 4, 0.3);
        LinearModel::new(data, w, eta, 0.1).unwrap()
    }

    #[test]
    fn gradient_vanishes_at_optimum() {
        let mut m = model(0.01);
        m.predictor = isotropic_optimal_predictor(&m).unwrap();
        assert!(predictor_gradient(&m).amax() < 1e-10);
    }

    #[test]
    fn gradient_at_zero_predictor() {
        let mut m = model(0.0);
        m.predictor = DMatrix::zeros(4, 4);
        assert!((predictor_gradient(&m) + m.data.gram()).amax() < 1e-15);
    }

    #[test]
    fn model_rejects_bad_step_size() {
        let m = model(0.0);
        assert!(LinearModel::new(m.data.clone(), m.predictor.clone(), 0.0, 1.0).is_err());
        assert!(LinearModel::new(m.data.clone(), m.predictor.clone(), -1.0, 0.5).is_err());
    }

    #[test]
    fn optimal_predictor_examples() {
        let cz = CorrelationEstimate::exact(DMatrix::identity(3, 3) * 2.0).unwrap();
        let cp = CorrelationEstimate::exact(DMatrix::identity(3, 3)).unwrap();
        let w = optimal_predictor(&cp, &cz).unwrap();
        assert!((w - DMatrix::identity(3, 3) * 0.5).amax() < 1e-15);

        let singular = CorrelationEstimate::exact(DMatrix::from_row_slice(2, 2, &[1., 1., 1., 1.])).unwrap();
        let cp2 = CorrelationEstimate::exact(DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(optimal_predictor(&cp2, &singular), Err(RdmError::Singular(_))));
        assert!(regularized_optimal_predictor(&cp2, &singular, 0.1).is_ok());
    }

    #[test]
    fn isotropic_optimum_eigenvalues() {
        let m = model(0.05);
        let w = isotropic_optimal_predictor(&m).unwrap();
        let gram = CorrelationEstimate::exact(m.data.gram()).unwrap();
        let (lam, basis) = spectral::eigh(&gram).unwrap();
        let expected: Vec<f64> = lam.values().iter().map(|l| l / (1.25 * l + 0.05)).collect();
        assert!((basis.compose(&expected) - w).amax() < 1e-12);
    }

    #[test]
    fn unconstrained_step_examples() {
        let s = UnconstrainedState::new(vec![1.0], vec![4.0], vec![4.0]).unwrap();
        let next = unconstrained_step(&s, 0.5).unwrap();
        assert!((next.lam_p[0] - 2.25).abs() < 1e-15);

        let s = UnconstrainedState::new(vec![0.7, 0.2], vec![0.7, 0.2], vec![0.7, 0.2]).unwrap();
        let next = unconstrained_step(&s, 0.3).unwrap();
        for (a, b) in next.lam_p.iter().zip(&s.lam_p) {
            assert!((a - b).abs() < 1e-15);
        }

        let s = UnconstrainedState::new(vec![1.0], vec![1.0], vec![0.5]).unwrap();
        let next = unconstrained_step(&s, 0.1).unwrap();
        assert!((next.lam_p[0] - 0.91).abs() < 1e-15);

        assert!(unconstrained_step(&s, 1.0).is_err());
        assert!(UnconstrainedState::new(vec![1.0], vec![1.0], vec![2.0]).is_err());
    }

    #[test]
    fn feature_gd_with_p_equal_z_is_stationary() {
        let mut rng = rng::stream(2, "gd");
        let z = FeatureBatch::new(rng::gaussian_matrix(&mut rng, 10, 3, 1.0)).unwrap();
        let cfg = FeatureGdConfig {
            alpha: 0.2,
            steps: 5,
            stop_gradient: true,
            predictor_mode: PredictorMode::Fixed,
            record: RecordSettings::default(),
        };
        let run = simulate_feature_gd(&z, &z, &z, &cfg).unwrap();
        assert_eq!(run.record.rows.len(), 6);
        for row in &run.record.rows {
            assert_eq!(row, &TrajectoryRow { step: row.step, ..run.record.first().clone() });
        }

        let refit = FeatureGdConfig {
            predictor_mode: PredictorMode::Refit,
            ..cfg
        };
        let run = simulate_feature_gd(&z, &z, &z, &refit).unwrap();
        let first = run.record.first();
        for row in &run.record.rows {
            assert!(row.loss < 1e-28);
            assert!((row.erank_online - first.erank_online).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_steps_gives_one_row() {
        let m = model(0.01);
        let run = linear_training_run(
            &m,
            &LinearRunConfig {
                steps: 0,
                record: RecordSettings::default(),
            },
        )
        .unwrap();
        assert_eq!(run.record.rows.len(), 1);
        assert_eq!(run.record.rows[0].step, 0);
    }

    #[test]
    fn symsimsiam_collapsed_features() {
        let u = vec![0.6, 0.8];
        let b = batch(&[u.clone(), u.clone(), u.clone()]);
        let cs = CenterState::zeros(2, 0.9).unwrap();
        let (loss, next) = symsimsiam_step(&b, &b, &cs).unwrap();
        // centre lags at 0.1 u, so the centred inner product is 0.9²
        assert!((loss + 0.81).abs() < 1e-12);
        assert!((next.center[0] - 0.06).abs() < 1e-15);

        let at_mean = CenterState::new(u.clone(), 0.9).unwrap();
        let (loss, _) = symsimsiam_step(&b, &b, &at_mean).unwrap();
        assert!(loss.abs() < 1e-15);
    }

    #[test]
    fn symsimsiam_antipodal() {
        let b = batch(&[vec![0.6, 0.8], vec![-0.6, -0.8]]);
        let cs = CenterState::zeros(2, 0.9).unwrap();
        let (loss, next) = symsimsiam_step(&b, &b, &cs).unwrap();
        assert!((loss + 1.0).abs() < 1e-15);
        assert!(next.center.iter().all(|c| c.abs() < 1e-15));
    }

    #[test]
    fn symsimsiam_matches_brute_force() {
        let mut rng = rng::stream(5, "sym");
        let a = FeatureBatch::new(rng::gaussian_matrix(&mut rng, 7, 4, 1.0)).unwrap();
        let b = FeatureBatch::new(rng::gaussian_matrix(&mut rng, 7, 4, 1.0)).unwrap();
        let cs = CenterState::new(vec![0.1, -0.2, 0.05, 0.0], 0.5).unwrap();
        let (loss, next) = symsimsiam_step(&a, &b, &cs).unwrap();
        let mut brute = 0.0;
        for i in 0..7 {
            let (ra, rb) = (a.row(i), b.row(i));
            let (ra, rb) = (&ra / ra.norm(), &rb / rb.norm());
            let mut dot = 0.0;
            for j in 0..4 {
                dot += (ra[j] - next.center[j]) * (rb[j] - next.center[j]);
            }
            brute -= dot;
        }
        assert!((loss - brute / 7.0).abs() < 1e-14);
    }

    #[test]
    fn centering_identity() {
        let mut rng = rng::stream(6, "t1");
        let a = FeatureBatch::new(normalize_rows(&FeatureBatch::new(rng::gaussian_matrix(&mut rng, 9, 5, 1.0)).unwrap()).unwrap()).unwrap();
        let b = FeatureBatch::new(normalize_rows(&FeatureBatch::new(rng::gaussian_matrix(&mut rng, 9, 5, 1.0)).unwrap()).unwrap()).unwrap();
        let mu = pooled_mean(&a, &b);
        assert!(centering_identity_residual(&a, &b, &mu).unwrap() <= 1e-10);
        assert!(centering_identity_residual(&a, &b, &[0.0; 5]).unwrap() <= 1e-15);
        let lagged: Vec<f64> = mu.iter().map(|m| 0.1 * m).collect();
        assert!(centering_identity_residual(&a, &b, &lagged).unwrap() > 1e-6);

        let raw = FeatureBatch::new(rng::gaussian_matrix(&mut rng, 9, 5, 1.0)).unwrap();
        assert!(matches!(centering_identity_residual(&raw, &b, &mu), Err(RdmError::InvalidInput(_))));
    }

    #[test]
    fn trajectory_csv_header_and_padding() {
        let mut rec = TrajectoryRecord::new(3);
        rec.rows.push(TrajectoryRow {
            step: 0,
            loss: 0.5,
            erank_online: 1.0,
            erank_target: 2.0,
            alignment: 1.0,
            ev_online: vec![1.0, 0.5],
            ev_target: vec![1.0, 0.5],
        });
        let csv = rec.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,loss,erank_online,erank_target,alignment,ev_online_1,ev_online_2,ev_online_3,ev_target_1,ev_target_2,ev_target_3"
        );
        assert_eq!(lines.next().unwrap().split(',').count(), 11);
    }

    #[test]
    fn divergence_names_the_step() {
        // step size far above 2 / L, so the iterates blow up geometrically
        let data = IsotropicAugModel::random(6, 4, 2.0, 3).unwrap();
        let m = LinearModel::new(data, DMatrix::identity(4, 4), 0.0, 0.9).unwrap();
        let cfg = LinearRunConfig {
            steps: 5000,
            record: RecordSettings::default(),
        };
        match linear_training_run(&m, &cfg) {
            Err(RdmError::Divergence { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.relative_error)),
        }
    }
}
