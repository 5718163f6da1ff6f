//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for
//! each and exits non-zero if any failed.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use rdm_core::data_synth::IsotropicAugModel;
use rdm_core::dynamics::{linear_training_run, LinearModel, LinearRunConfig, RecordSettings};
use rdm_core::filters::{classify, default_grid, FilterSpec, Monotonicity, SpectralFilter};
use rdm_core::harness::run::probe_filter;
use rdm_core::harness::verify::{finite_difference_error, verify_property, PropertyResult, VerifyOptions};
use rdm_core::harness::{run_experiment, ExperimentConfig, ExperimentKind};
use rdm_core::rng;

const SEED: u64 = 2024;

struct Verdict {
    ok: bool,
    detail: String,
}

impl Verdict {
    fn new(ok: bool, detail: impl Into<String>) -> Self {
        Self {
            ok,
            detail: detail.into(),
        }
    }
}

fn clean(p: &PropertyResult) -> bool {
    p.failures == 0
}

fn describe(p: &PropertyResult) -> String {
    format!(
        "{} {}/{} failed, worst margin {:.3e}{}",
        p.name,
        p.failures,
        p.instances,
        p.worst_margin.unwrap_or(f64::NAN),
        p.first_failure.as_deref().map(|f| format!(" ({f})")).unwrap_or_default()
    )
}

fn property(name: &str, instances: usize) -> PropertyResult {
    verify_property(name, SEED, instances, &VerifyOptions::default()).expect("known property")
}

fn within(elapsed: Duration, budget_secs: u64) -> (bool, String) {
    (elapsed.as_secs_f64() < budget_secs as f64, format!("{:.2}s of {budget_secs}s", elapsed.as_secs_f64()))
}

fn rank_difference() -> Verdict {
    let t = Instant::now();
    let strict = property("rank_difference", 1000);
    let constant = property("constant_filter_rank", 1000);
    let (fast, time) = within(t.elapsed(), 10);
    Verdict::new(
        clean(&strict) && clean(&constant) && fast,
        format!("{}; {}; {time}", describe(&strict), describe(&constant)),
    )
}

fn recursion() -> Verdict {
    let t = Instant::now();
    let one = property("recursion_one_step", 250);
    let growth = property("erank_growth_identical_views", 250);
    let (fast, time) = within(t.elapsed(), 30);
    Verdict::new(
        clean(&one) && clean(&growth) && fast,
        format!("{}; {}; {time}", describe(&one), describe(&growth)),
    )
}

/// `W_fW_fᵀ((1+σ²)W_fW_fᵀ + ηI)⁻¹` by explicit inversion.
fn closed_form_optimum(model: &LinearModel) -> DMatrix<f64> {
    let a = model.data.gram();
    let k = a.nrows();
    let s2 = model.data.aug_std() * model.data.aug_std();
    let m = &a * (1.0 + s2) + DMatrix::identity(k, k) * model.eta;
    &a * m.try_inverse().expect("invertible")
}

fn predictor_optimality() -> Verdict {
    let t = Instant::now();
    let data = IsotropicAugModel::random(16, 8, 0.5, SEED).unwrap();
    let init = rng::gaussian_matrix(&mut rng::stream(SEED, "init"), 8, 8, 0.01);
    let model = LinearModel::new(data, init, 0.01, 0.25).unwrap();
    let run = linear_training_run(
        &model,
        &LinearRunConfig {
            steps: 5000,
            record: RecordSettings {
                stride: 500,
                ..RecordSettings::default()
            },
        },
    )
    .unwrap();
    let oracle = closed_form_optimum(&model);
    let err = (&run.predictor - &oracle).norm() / oracle.norm();

    let mut probe = model.clone();
    probe.predictor = rng::gaussian_matrix(&mut rng::stream(SEED, "probe"), 8, 8, 1.0);
    let fd = finite_difference_error(&probe, 1e-5);
    let (fast, time) = within(t.elapsed(), 10);
    Verdict::new(
        err <= 1e-4 && fd <= 1e-6 && fast,
        format!("relative error to optimum {err:.3e}, finite-difference mismatch {fd:.3e}; {time}"),
    )
}

fn pair_identities() -> Verdict {
    let t = Instant::now();
    let p = property("positive_pair_identities", 500);
    let (fast, time) = within(t.elapsed(), 5);
    Verdict::new(clean(&p) && fast, format!("{}; {time}", describe(&p)))
}

fn centering() -> Verdict {
    let t = Instant::now();
    let p = property("centering_identity", 500);
    let (fast, time) = within(t.elapsed(), 2);
    Verdict::new(clean(&p) && fast, format!("{}; {time}", describe(&p)))
}

/// `(erank_online, erank_target)` per row of a trajectory CSV.
fn read_eranks(path: &Path) -> Vec<(f64, f64)> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let on = header.iter().position(|h| *h == "erank_online").unwrap();
    let tg = header.iter().position(|h| *h == "erank_target").unwrap();
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[on].parse().unwrap(), f[tg].parse().unwrap())
        })
        .collect()
}

fn dynamics_config(dir: &Path, stop_gradient: bool) -> ExperimentConfig {
    ExperimentConfig::new(ExperimentKind::Dynamics)
        .with_overrides(&[
            "d=32".to_string(),
            "k=16".into(),
            "aug_std=0.5".into(),
            "filter=directpred".into(),
            "steps=500".into(),
            format!("seed={SEED}"),
            format!("stop_gradient={stop_gradient}"),
            format!("out_dir={}", serde_json::Value::String(dir.display().to_string())),
        ])
        .unwrap()
}

fn run_dynamics(stop_gradient: bool) -> (tempfile::TempDir, Vec<(f64, f64)>) {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&dynamics_config(dir.path(), stop_gradient)).unwrap();
    let rows = read_eranks(&out.out_dir.join("trajectory.csv"));
    (dir, rows)
}

fn rank_gap_shape() -> Verdict {
    let t = Instant::now();
    let (_dir, rows) = run_dynamics(true);
    let gap_everywhere = rows.iter().all(|(on, tg)| tg >= on);
    let min_gap = rows.iter().map(|(on, tg)| tg - on).fold(f64::INFINITY, f64::min);
    let (first, last) = (rows[0].0, rows[rows.len() - 1].0);
    let growth = last / first - 1.0;
    let (fast, time) = within(t.elapsed(), 60);
    Verdict::new(
        rows.len() == 501 && gap_everywhere && growth >= 0.10 && fast,
        format!(
            "{} rows, min target-online gap {min_gap:.3e}, online erank {first:.4} -> {last:.4} (+{:.1}%); {time}",
            rows.len(),
            100.0 * growth
        ),
    )
}

fn stop_gradient_ablation() -> Verdict {
    let t = Instant::now();
    let (_a, on) = run_dynamics(true);
    let (_b, off) = run_dynamics(false);
    let frozen = on.iter().all(|r| r.1 == on[0].1);
    let (start, end) = (off[0].1, off[off.len() - 1].1);
    let (fast, time) = within(t.elapsed(), 60);
    Verdict::new(
        frozen && end < start && fast,
        format!(
            "target erank with stop-gradient constant at {:.4}: {frozen}; without: {start:.4} -> {end:.4}; {time}",
            on[0].1
        ),
    )
}

fn filter_zoo() -> Verdict {
    let t = Instant::now();
    let grid = default_grid();
    let mut wrong = Vec::new();
    let low = [
        SpectralFilter::direct_pred(),
        SpectralFilter::log(),
        SpectralFilter::log1p(),
        SpectralFilter::log1p_sq(),
    ];
    for g in &low {
        let kind = classify(g, &grid).unwrap().kind;
        if kind != Monotonicity::LowPass {
            wrong.push(format!("{} -> {kind}", g.name()));
        }
    }
    let mut worst_round_trip: f64 = 0.0;
    for p in [-0.3, -0.5, -0.7, -1.0] {
        let h = SpectralFilter::power(p);
        let kind = classify(&h, &grid).unwrap().kind;
        if kind != Monotonicity::HighPass {
            wrong.push(format!("{} -> {kind}", h.name()));
        }
        let probe = probe_filter(&FilterSpec::Target(h), 256, 16, SEED).unwrap();
        worst_round_trip = worst_round_trip.max(probe.round_trip_error.unwrap());
    }
    let (fast, time) = within(t.elapsed(), 5);
    Verdict::new(
        wrong.is_empty() && worst_round_trip <= 1e-6 && fast,
        format!("misclassified {wrong:?}, worst round-trip error {worst_round_trip:.3e}; {time}"),
    )
}

fn sinkhorn_trend() -> Verdict {
    let t = Instant::now();
    let mut ok = true;
    let mut seen = Vec::new();
    for seed in 0..4 {
        for iters in [1, 3, 5] {
            let probe = probe_filter(&FilterSpec::Sinkhorn { iters, eps: 1.0 }, 256, 16, seed).unwrap();
            let rho = probe.extracted.spearman;
            ok &= rho < -0.5 && probe.extracted.class.kind == Monotonicity::HighPass;
            seen.push(format!("{rho:.2}"));
        }
    }
    let (fast, time) = within(t.elapsed(), 10);
    Verdict::new(ok && fast, format!("spearman over seeds x iters(1,3,5): [{}]; {time}", seen.join(" ")))
}

fn digest_dir(dir: &Path) -> Vec<(String, String)> {
    let mut names: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let bytes = std::fs::read(dir.join(&n)).unwrap();
            let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
            (n, hex)
        })
        .collect()
}

fn reproducibility() -> Verdict {
    let bin = env!("CARGO_BIN_EXE_rdm");
    let cfg_dir = tempfile::tempdir().unwrap();
    let cfg_path = cfg_dir.path().join("run.json");
    std::fs::write(
        &cfg_path,
        format!(r#"{{"kind": "dynamics", "seed": {SEED}, "steps": 200, "stride": 5}}"#),
    )
    .unwrap();
    let invocations: Vec<Vec<String>> = vec![
        vec!["simulate".into(), "--config".into(), cfg_path.display().to_string()],
        vec!["simulate".into(), "--config".into(), cfg_path.display().to_string(), "--set".into(), "kind=symsimsiam".into()],
        vec!["filters".into(), "--filter".into(), "pow:-0.5".into(), "--seed".into(), "3".into()],
        vec!["align".into(), "--set".into(), "steps=300".into()],
        vec!["verify".into(), "--seed".into(), "7".into(), "--instances".into(), "5".into()],
    ];
    let mut ok = true;
    let mut hashed = 0;
    for args in &invocations {
        let mut digests = Vec::new();
        for _ in 0..2 {
            let out = tempfile::tempdir().unwrap();
            let status = Command::new(bin)
                .args(args)
                .env("RDM_OUT_DIR", out.path())
                .output()
                .unwrap()
                .status;
            ok &= status.success();
            digests.push(digest_dir(out.path()));
        }
        hashed += digests[0].len();
        ok &= !digests[0].is_empty() && digests[0] == digests[1];
    }
    Verdict::new(ok, format!("{hashed} files across {} commands, SHA-256 equal between runs", invocations.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("strict rank difference under increasing filters", rank_difference),
        ("eigenvalue recursion matches simulated descent", recursion),
        ("linear predictor converges to the closed-form optimum", predictor_optimality),
        ("positive-pair correlation identities", pair_identities),
        ("centering identity", centering),
        ("rank gap and online erank growth with stop-gradient", rank_gap_shape),
        ("stop-gradient ablation lowers target erank", stop_gradient_ablation),
        ("filter family classification and round trip", filter_zoo),
        ("Sinkhorn-Knopp acts as a high-pass target filter", sinkhorn_trend),
        ("byte-identical outputs for identical config and seed", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        if !v.ok {
            failed += 1;
        }
        println!(
            "criterion {:>2} {}: {} ({})",
            i + 1,
            if v.ok { "PASS" } else { "FAIL" },
            name,
            v.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
