use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use super::config::{ExperimentConfig, ExperimentKind};
use super::verify::{verify_all, VerifyReport};
use crate::data_synth::{rank_skewed_batch, FinitePopulation, IsotropicAugModel};
use crate::dynamics::{
    linear_training_run, simulate_feature_gd, simulate_symsimsiam, FeatureGdConfig, LinearModel, LinearRunConfig,
    RecordSettings, SymSimSiamConfig, TrajectoryRecord,
};
use crate::error::{RdmError, Result};
use crate::filters::{
    apply_online_filter, apply_target_filter, center_sharpen, extract_transformation_filter, sinkhorn_knopp,
    softmax_rows, FilterSpec, SpectralFilter, TransformationFilter,
};
use crate::rng;
use crate::spectral::{fmt_f64, FeatureBatch};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Logit batch used by the `filters` experiment: singular values decay
/// geometrically, so the softmax outputs are rank-skewed.
pub const LOGIT_SCALE: f64 = 4.0;
pub const LOGIT_DECAY: f64 = 0.8;

/// Initial predictor entries for `align` are `N(0, INIT_STD²)`.
pub const INIT_STD: f64 = 0.01;

/// What a finished experiment produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub summary: Value,
    /// False when a property check failed; the CLI exits 1.
    pub passed: bool,
}

#[derive(Serialize)]
struct Summary<'a> {
    tool: &'static str,
    version: &'static str,
    generator: &'static str,
    kind: ExperimentKind,
    final_erank_online: f64,
    final_erank_target: f64,
    final_alignment: f64,
    details: Value,
    warnings: Vec<String>,
    config: &'a ExperimentConfig,
}

struct Emitted {
    record: Option<TrajectoryRecord>,
    extra_files: Vec<(&'static str, String)>,
    final_erank_online: f64,
    final_erank_target: f64,
    final_alignment: f64,
    details: Value,
    warnings: Vec<String>,
}

impl Emitted {
    fn from_record(record: TrajectoryRecord, details: Value, warnings: Vec<String>) -> Self {
        let last = record.last().clone();
        Self {
            record: Some(record),
            extra_files: Vec::new(),
            final_erank_online: last.erank_online,
            final_erank_target: last.erank_target,
            final_alignment: last.alignment,
            details,
            warnings,
        }
    }
}

/// Runs the configured experiment and writes its files under the resolved
/// output directory. Outputs depend only on the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let out_dir = cfg.resolved_out_dir();
    if cfg.kind == ExperimentKind::Verify {
        let report = verify_all(cfg.seed, cfg.instances);
        let path = write(&out_dir, "verify_report.json", &report.to_json())?;
        return Ok(RunOutcome {
            out_dir,
            files: vec![path],
            passed: report.pass,
            summary: serde_json::to_value(&report).expect("report serializes"),
        });
    }
    let emitted = match cfg.kind {
        ExperimentKind::Dynamics => run_dynamics(cfg)?,
        ExperimentKind::Filters => run_filters(cfg)?,
        ExperimentKind::Symsimsiam => run_symsimsiam(cfg)?,
        ExperimentKind::Align => run_align(cfg)?,
        ExperimentKind::Verify => unreachable!("handled above"),
    };
    let mut files = Vec::new();
    if let Some(record) = &emitted.record {
        files.push(write(&out_dir, "trajectory.csv", &record.to_csv())?);
    }
    for (name, body) in &emitted.extra_files {
        files.push(write(&out_dir, name, body)?);
    }
    let summary = Summary {
        tool: "rdm",
        version: VERSION,
        generator: rng::GENERATOR,
        kind: cfg.kind,
        final_erank_online: emitted.final_erank_online,
        final_erank_target: emitted.final_erank_target,
        final_alignment: emitted.final_alignment,
        details: emitted.details,
        warnings: emitted.warnings,
        config: cfg,
    };
    let text = serde_json::to_string_pretty(&summary)?;
    files.push(write(&out_dir, "summary.json", &text)?);
    Ok(RunOutcome {
        out_dir,
        files,
        summary: serde_json::from_str(&text)?,
        passed: true,
    })
}

fn write(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut text = body.to_string();
    if !text.ends_with('\n') {
        text.push('\n');
    }
    fs::write(&path, text)?;
    Ok(path)
}

fn record_settings(cfg: &ExperimentConfig) -> RecordSettings {
    RecordSettings {
        top_r: cfg.top_r,
        coverage: cfg.coverage,
        stride: cfg.stride,
    }
}

/// Positive-pair batches `(z, z⁺)` from the population file when given,
/// otherwise from the isotropic model.
pub fn pair_batches(cfg: &ExperimentConfig) -> Result<(FeatureBatch, FeatureBatch)> {
    let mut data_rng = rng::stream(cfg.seed, "data");
    match &cfg.population {
        Some(path) => {
            let pop = FinitePopulation::load(path)
                .map_err(|e| RdmError::Config(format!("population {}: {e}", path.display())))?;
            pop.sample_feature_batches(cfg.samples, &mut data_rng)
        }
        None => {
            let model = IsotropicAugModel::random(cfg.d, cfg.k, cfg.aug_std, cfg.seed)?;
            model.sample_feature_batches(cfg.samples, &mut data_rng)
        }
    }
}

fn column_means(b: &FeatureBatch) -> Vec<f64> {
    b.data().row_mean().iter().copied().collect()
}

/// Online and target branch outputs produced by a filter spec from the
/// online input `z` and target input `z_pair`.
pub fn branch_outputs(spec: &FilterSpec, z: &FeatureBatch, z_pair: &FeatureBatch) -> Result<(FeatureBatch, FeatureBatch, Vec<String>)> {
    let mut warnings = Vec::new();
    let (online, target) = match spec {
        FilterSpec::Online(g) => {
            let f = apply_online_filter(z, g)?;
            warnings.extend(f.warning);
            (f.batch, z_pair.clone())
        }
        FilterSpec::Target(h) => {
            let f = apply_target_filter(z_pair, h)?;
            warnings.extend(f.warning);
            (z.clone(), f.batch)
        }
        FilterSpec::Sinkhorn { iters, eps } => (softmax_rows(z), sinkhorn_knopp(z_pair, *iters, *eps)?),
        FilterSpec::CenterSharpen { temperature } => (
            softmax_rows(z),
            center_sharpen(z_pair, &column_means(z_pair), *temperature)?,
        ),
    };
    Ok((online, target, warnings))
}

fn run_dynamics(cfg: &ExperimentConfig) -> Result<Emitted> {
    let spec = cfg.filter_spec()?;
    let (z, z_pair) = pair_batches(cfg)?;
    let (p0, target, warnings) = branch_outputs(&spec, &z, &z_pair)?;
    let gd = FeatureGdConfig {
        alpha: cfg.alpha,
        steps: cfg.steps,
        stop_gradient: cfg.stop_gradient,
        predictor_mode: cfg.predictor_mode,
        record: record_settings(cfg),
    };
    let run = simulate_feature_gd(&p0, &z, &target, &gd)?;
    let first = run.record.first();
    let details = json!({
        "samples": z.rows(),
        "features": z.cols(),
        "initial_erank_online": first.erank_online,
        "initial_erank_target": first.erank_target,
        "final_loss": run.record.last().loss,
    });
    Ok(Emitted::from_record(run.record, details, warnings))
}

fn run_symsimsiam(cfg: &ExperimentConfig) -> Result<Emitted> {
    let (z, z_pair) = pair_batches(cfg)?;
    let sym = SymSimSiamConfig {
        alpha: cfg.alpha,
        steps: cfg.steps,
        momentum: cfg.momentum,
        record: record_settings(cfg),
    };
    let record = simulate_symsimsiam(&z, &z_pair, &sym)?;
    let details = json!({
        "initial_loss": record.first().loss,
        "final_loss": record.last().loss,
    });
    Ok(Emitted::from_record(record, details, Vec::new()))
}

fn run_align(cfg: &ExperimentConfig) -> Result<Emitted> {
    if cfg.population.is_some() {
        return Err(RdmError::Config("align runs on the isotropic model; remove `population`".into()));
    }
    let data = IsotropicAugModel::random(cfg.d, cfg.k, cfg.aug_std, cfg.seed)?;
    let init = rng::gaussian_matrix(&mut rng::stream(cfg.seed, "init"), cfg.k, cfg.k, INIT_STD);
    let model = LinearModel::new(data, init, cfg.eta, cfg.alpha)?;
    let run = linear_training_run(
        &model,
        &LinearRunConfig {
            steps: cfg.steps,
            record: record_settings(cfg),
        },
    )?;
    let details = json!({
        "relative_error_to_optimum": run.relative_error,
        "final_loss": run.record.last().loss,
    });
    Ok(Emitted::from_record(run.record, details, Vec::new()))
}

/// Result of the `filters` experiment.
#[derive(Clone, Debug)]
pub struct FilterProbe {
    pub online: FeatureBatch,
    pub target: FeatureBatch,
    pub extracted: TransformationFilter,
    /// `max_i |h_i - h(σ_i)|` when a target filter `h` was applied directly.
    pub round_trip_error: Option<f64>,
    pub warnings: Vec<String>,
}

/// Seeded rank-skewed logit batch, transformed by `spec`, with the
/// transformation filter read back from the two branch correlations.
pub fn probe_filter(spec: &FilterSpec, n: usize, k: usize, seed: u64) -> Result<FilterProbe> {
    let logits = rank_skewed_batch(n, k, LOGIT_SCALE, LOGIT_DECAY, &mut rng::stream(seed, "batch"))?;
    let (online, target, warnings) = branch_outputs(spec, &logits, &logits)?;
    let extracted = extract_transformation_filter(&online, &target)?;
    let round_trip_error = match spec {
        FilterSpec::Target(h) => Some(round_trip_error(&extracted, h, n)?),
        _ => None,
    };
    Ok(FilterProbe {
        online,
        target,
        extracted,
        round_trip_error,
        warnings,
    })
}

/// Compares an extracted filter with the applied `h`. The online batch
/// has singular values `σ_i = sqrt(n λᵖ_i)`.
pub fn round_trip_error(extracted: &TransformationFilter, h: &SpectralFilter, n: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (lam, got) in &extracted.pairs {
        let want = h.eval_floored((n as f64 * lam).sqrt())?;
        worst = worst.max((got - want).abs());
    }
    Ok(worst)
}

fn run_filters(cfg: &ExperimentConfig) -> Result<Emitted> {
    let spec = cfg.filter_spec()?;
    let probe = probe_filter(&spec, cfg.samples, cfg.k, cfg.seed)?;
    let mut csv = String::from("lambda_online,h\n");
    for (lam, h) in &probe.extracted.pairs {
        csv.push_str(&format!("{},{}\n", fmt_f64(*lam), fmt_f64(*h)));
    }
    let c_on = crate::spectral::correlation(&probe.online);
    let c_tg = crate::spectral::correlation(&probe.target);
    let details = json!({
        "verdict": probe.extracted.class.kind.to_string(),
        "spearman": probe.extracted.spearman,
        "round_trip_error": probe.round_trip_error,
    });
    Ok(Emitted {
        record: None,
        extra_files: vec![("filter.csv", csv)],
        final_erank_online: crate::spectral::effective_rank_of(&c_on)?,
        final_erank_target: crate::spectral::effective_rank_of(&c_tg)?,
        final_alignment: crate::spectral::eigenspace_alignment(&c_on, &c_tg, cfg.coverage)?.value,
        details,
        warnings: probe.warnings,
    })
}

/// Writes a report produced outside [`run_experiment`].
pub fn write_report(dir: &Path, report: &VerifyReport) -> Result<PathBuf> {
    write(dir, "verify_report.json", &report.to_json())
}
