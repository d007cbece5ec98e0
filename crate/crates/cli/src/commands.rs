//! Command implementations.
//!
//! All commands are non-interactive: progress and human-readable summaries go
//! to stderr; stdout carries machine-readable output only when `--stdout` is
//! set. Output files are written atomically after aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use owra_core::dist_stats::{CalibrationStats, FitMethod};
use owra_core::evm::{self, EvmHyper};
use owra_core::policy::{calibrate, PolicyConfig, PolicyVariant};
use owra_core::score_stream::{read_score_file, write_scores, ScoreRecord};
use owra_core::testbed::{
    calibrate_from_pools, default_grid, evaluate, generate_test, metrics_csv, parse_metrics_csv,
    select_threshold, sweep_csv, synth_pools, threshold_sweep, MetricsRow, ScorePools,
    SelectionRegime, TestConfig,
};

use crate::config::RunSettings;
use crate::manifest::{write_atomic, RunManifest};

/// Command-level error carrying its exit code: usage/input errors exit 2,
/// internal errors exit 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Internal(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        CliError::Internal(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Internal(msg) => f.write_str(msg),
        }
    }
}

impl From<owra_core::Error> for CliError {
    fn from(e: owra_core::Error) -> Self {
        use owra_core::Error;
        let is_usage = match &e {
            Error::Parse { .. } | Error::InvalidArgument(_) => true,
            Error::Io(io) => io.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        };
        if is_usage {
            CliError::Usage(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

pub type CmdResult = Result<(), CliError>;

fn regime(settings: &RunSettings) -> Result<SelectionRegime, CliError> {
    settings
        .regime
        .parse::<SelectionRegime>()
        .map_err(|e| CliError::usage(e.to_string()))
}

/// Load score pools from the configured file or generate them synthetically.
fn load_pools(settings: &RunSettings) -> Result<ScorePools, CliError> {
    match &settings.pools_file {
        Some(path) => {
            let records = read_score_file(path)?;
            Ok(ScorePools::from_records(records)?)
        }
        None => Ok(synth_pools(&settings.synth, settings.seed)?),
    }
}

/// Input files whose digests belong in the manifest.
fn manifest_inputs<'a>(
    settings: &'a RunSettings,
    config_path: Option<&'a Path>,
) -> Vec<&'a Path> {
    let mut inputs = Vec::new();
    if let Some(p) = config_path {
        inputs.push(p);
    }
    if let Some(p) = &settings.pools_file {
        inputs.push(p.as_path());
    }
    inputs
}

/// Calibration stats under the run settings (root-seeded sample from pools).
fn fit_calibration(
    settings: &RunSettings,
    pools: &ScorePools,
) -> Result<CalibrationStats, CliError> {
    let base = settings.test_config(settings.validation_pct);
    Ok(calibrate_from_pools(
        pools,
        &base,
        settings.fit_method,
        settings.calibration_sample,
    )?)
}

/// Resolve one policy's tolerance: explicit from config, else selected on the
/// validation sweep.
fn resolve_tolerance(
    settings: &RunSettings,
    pools: &ScorePools,
    cal: &CalibrationStats,
    variant: PolicyVariant,
) -> Result<f64, CliError> {
    if let Some(tol) = settings.tolerances.get(variant.name()) {
        return Ok(*tol);
    }
    let template = policy_template(variant, cal, settings);
    let grid = default_grid(variant, Some(cal));
    let table = threshold_sweep(pools, &template, &settings.validation_config(), &grid)?;
    Ok(select_threshold(&table, regime(settings)?)?)
}

fn policy_template(
    variant: PolicyVariant,
    cal: &CalibrationStats,
    settings: &RunSettings,
) -> PolicyConfig {
    PolicyConfig {
        variant,
        tolerance: f64::NAN,
        calibration: Some(cal.clone()),
        ond: Some(settings.ond),
    }
}

// ---------------------------------------------------------------------------
// calibrate

pub fn cmd_calibrate(
    input: &Path,
    fit: FitMethod,
    output: &Path,
    stdout: bool,
) -> CmdResult {
    let records = read_score_file(input)?;
    let stats = calibrate(&records, fit)?;
    let mut json = serde_json::to_string_pretty(&stats)
        .map_err(|e| CliError::internal(e.to_string()))?;
    json.push('\n');
    write_atomic(output, json.as_bytes())?;
    eprintln!(
        "calibrated {} records: softmax=({:.6},{:.6}) evm=({:.6},{:.6}) r={:.6}",
        records.len(),
        stats.softmax.mu,
        stats.softmax.sigma,
        stats.evm.mu,
        stats.evm.sigma,
        stats.corr_r
    );
    if stdout {
        print!("{json}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evm train / evm score

pub fn cmd_evm_train(features: &Path, hyper: EvmHyper, output: &Path) -> CmdResult {
    let fs = owra_core::score_stream::read_feature_file(features)?;
    let model = evm::evm_train(&fs, hyper)?;
    let mut json = serde_json::to_string_pretty(&model)
        .map_err(|e| CliError::internal(e.to_string()))?;
    json.push('\n');
    write_atomic(output, json.as_bytes())?;
    let evs: usize = model.classes.values().map(Vec::len).sum();
    eprintln!(
        "trained EVM: {} classes, {} extreme vectors, dim {}",
        model.classes.len(),
        evs,
        model.feature_dim
    );
    Ok(())
}

/// Optional SoftMax companion file: CSV with header `sample_id,max_softmax`.
fn read_softmax_file(path: &Path) -> Result<BTreeMap<String, f64>, CliError> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::usage(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers != ["sample_id", "max_softmax"] {
        return Err(CliError::usage(format!(
            "{}: expected header sample_id,max_softmax, got {}",
            path.display(),
            headers.join(",")
        )));
    }
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::usage(e.to_string()))?;
        let value: f64 = rec[1]
            .parse()
            .map_err(|_| CliError::usage(format!("non-numeric max_softmax {:?}", &rec[1])))?;
        out.insert(rec[0].to_string(), value);
    }
    Ok(out)
}

pub fn cmd_evm_score(
    features: &Path,
    model_path: &Path,
    softmax: Option<&Path>,
    tau: f64,
    output: &Path,
) -> CmdResult {
    let fs = owra_core::score_stream::read_feature_file(features)?;
    let model = evm::read_model(model_path)?;
    let probs = evm::evm_score_stream(&model, &fs)?;
    let bytes = match softmax {
        Some(path) => {
            // Merge into the canonical score-stream CSV.
            let softmax = read_softmax_file(path)?;
            let mut records = Vec::with_capacity(fs.samples.len());
            for (s, &p) in fs.samples.iter().zip(&probs) {
                let sm = *softmax.get(&s.sample_id).ok_or_else(|| {
                    CliError::usage(format!(
                        "sample {:?} missing from {}",
                        s.sample_id,
                        path.display()
                    ))
                })?;
                records.push(ScoreRecord::new(s.sample_id.clone(), sm, p, None)?);
            }
            let mut buf = Vec::new();
            write_scores(&mut buf, &records)?;
            buf
        }
        None => {
            let mut out = String::from("sample_id,max_evm,label\n");
            for (s, &p) in fs.samples.iter().zip(&probs) {
                let decision = evm::classify(&model, &s.values, tau)?;
                writeln!(out, "{},{p},{}", s.sample_id, decision.label)
                    .map_err(|e| CliError::internal(e.to_string()))?;
            }
            out.into_bytes()
        }
    };
    write_atomic(output, &bytes)?;
    eprintln!("scored {} samples -> {}", fs.samples.len(), output.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-tests

pub fn cmd_gen_tests(
    settings: &RunSettings,
    config_path: Option<&Path>,
    pct: u32,
    out_dir: &Path,
) -> CmdResult {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::internal(e.to_string()))?;
    let pools = load_pools(settings)?;
    let config = settings.test_config(pct);
    config.validate()?;
    let mut manifest = RunManifest::new("gen-tests", settings, &manifest_inputs(settings, config_path))?;
    for trial in 0..settings.trials {
        let sequence = generate_test(&config, &pools, trial)?;
        let mut buf = Vec::new();
        write_scores(&mut buf, &sequence)?;
        let name = format!("trial_{trial:05}.csv");
        write_atomic(&out_dir.join(&name), &buf)?;
        manifest.outputs.push(name);
    }
    manifest.write(out_dir)?;
    eprintln!(
        "wrote {} test sequences at {pct}% unknowns -> {}",
        settings.trials,
        out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// run

pub fn cmd_run(
    settings: &RunSettings,
    config_path: Option<&Path>,
    out_dir: &Path,
    stdout: bool,
) -> CmdResult {
    for &pct in &settings.unknown_pcts {
        TestConfig {
            trials: settings.trials,
            ..settings.test_config(pct)
        }
        .validate()?;
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::internal(e.to_string()))?;
    let pools = load_pools(settings)?;
    let cal = fit_calibration(settings, &pools)?;
    eprintln!(
        "calibration: softmax=({:.4},{:.4}) evm=({:.4},{:.4}) r={:.4}",
        cal.softmax.mu, cal.softmax.sigma, cal.evm.mu, cal.evm.sigma, cal.corr_r
    );

    let mut policies = Vec::with_capacity(settings.policies.len());
    for &variant in &settings.policies {
        let tolerance = resolve_tolerance(settings, &pools, &cal, variant)?;
        eprintln!("{variant}: tolerance {tolerance:.6}");
        policies.push(PolicyConfig {
            tolerance,
            ..policy_template(variant, &cal, settings)
        });
    }

    let mut trials_jsonl = String::new();
    let mut trial_error: Option<CliError> = None;
    let mut on_trial = |t: &owra_core::testbed::TrialRecord| {
        match serde_json::to_string(t) {
            Ok(line) => {
                trials_jsonl.push_str(&line);
                trials_jsonl.push('\n');
            }
            Err(e) => trial_error = Some(CliError::internal(e.to_string())),
        }
    };
    let rows = evaluate(
        &pools,
        &policies,
        &settings.unknown_pcts,
        settings.trials,
        settings.batch_size,
        settings.seed,
        Some(&mut on_trial),
    )?;
    if let Some(e) = trial_error {
        return Err(e);
    }

    let csv = metrics_csv(&rows, settings.seed);
    write_atomic(&out_dir.join("metrics.csv"), csv.as_bytes())?;
    write_atomic(&out_dir.join("trials.jsonl"), trials_jsonl.as_bytes())?;
    let mut manifest = RunManifest::new("run", settings, &manifest_inputs(settings, config_path))?;
    manifest.outputs = vec!["metrics.csv".into(), "trials.jsonl".into()];
    manifest.write(out_dir)?;

    for r in &rows {
        eprintln!(
            "{:>13} pct={:>2} det={:>6.1} false={:>5.1} ontime={:>5.1} acc={:.3}",
            r.policy.to_string(),
            r.unknown_pct,
            r.metrics.total_detection_pct,
            r.metrics.false_detection_pct,
            r.metrics.on_time_pct,
            r.metrics.total_accuracy
        );
    }
    eprintln!("wrote metrics for {} rows -> {}", rows.len(), out_dir.display());
    if stdout {
        print!("{csv}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep

pub fn cmd_sweep(
    settings: &RunSettings,
    config_path: Option<&Path>,
    variant: PolicyVariant,
    pct: Option<u32>,
    out_dir: &Path,
    stdout: bool,
) -> CmdResult {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::internal(e.to_string()))?;
    let pools = load_pools(settings)?;
    let cal = fit_calibration(settings, &pools)?;
    let pct = pct.unwrap_or(settings.validation_pct);
    let config = TestConfig {
        phase2_unknown_pct: pct,
        ..settings.validation_config()
    };
    config.validate()?;
    let template = policy_template(variant, &cal, settings);
    let grid = default_grid(variant, Some(&cal));
    let table = threshold_sweep(&pools, &template, &config, &grid)?;
    let selected = select_threshold(&table, regime(settings)?)?;
    let score = owra_core::testbed::reliability_score(&table);

    let csv = sweep_csv(variant, pct, &table, settings.seed);
    let name = format!("sweep_{variant}.csv");
    write_atomic(&out_dir.join(&name), csv.as_bytes())?;
    let mut manifest = RunManifest::new("sweep", settings, &manifest_inputs(settings, config_path))?;
    // Sweeps of several policies into one directory share a manifest.
    if let Ok(prev) = RunManifest::read(out_dir) {
        if prev.command == manifest.command && prev.config_sha256 == manifest.config_sha256 {
            manifest.outputs = prev.outputs;
        }
    }
    if !manifest.outputs.iter().any(|o| *o == name) {
        manifest.outputs.push(name.clone());
    }
    manifest.write(out_dir)?;

    eprintln!(
        "{variant} at {pct}%: {} grid points, selected tolerance {selected:.6}, \
         reliability score {score:.4} -> {}",
        table.len(),
        out_dir.join(&name).display()
    );
    if stdout {
        println!(
            "{}",
            serde_json::json!({
                "policy": variant.name(),
                "unknown_pct": pct,
                "selected_tolerance": selected,
                "reliability_score": score,
            })
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report

struct PolicyReport {
    variant: PolicyVariant,
    reliability_score: f64,
    best_tolerance: f64,
}

fn report_from_rows(rows: &[MetricsRow]) -> Vec<PolicyReport> {
    let mut by_policy: BTreeMap<&'static str, Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        by_policy.entry(r.policy.name()).or_default().push(r);
    }
    let mut out: Vec<PolicyReport> = by_policy
        .values()
        .map(|rows| {
            let mut best = (f64::NAN, 0.0f64);
            for r in rows {
                let s = (r.metrics.on_time_pct / 100.0) * (r.metrics.total_detection_pct / 100.0);
                if best.0.is_nan() || s > best.1 {
                    best = (r.tolerance, s);
                }
            }
            PolicyReport {
                variant: rows[0].policy,
                reliability_score: best.1,
                best_tolerance: best.0,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.reliability_score
            .partial_cmp(&a.reliability_score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    out
}

pub fn cmd_report(dir: &Path, stdout: bool) -> CmdResult {
    let mut sweep_files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("sweep_") && n.ends_with(".csv"))
                .unwrap_or(false)
        })
        .collect();
    sweep_files.sort();
    if sweep_files.is_empty() {
        return Err(CliError::usage(format!(
            "no sweep outputs in {}; expected files like {}",
            dir.display(),
            PolicyVariant::ALL
                .iter()
                .map(|v| format!("sweep_{v}.csv"))
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    let mut rows = Vec::new();
    for path in &sweep_files {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        rows.extend(parse_metrics_csv(&text)?);
    }
    let reports = report_from_rows(&rows);

    let mut csv = String::from("rank,policy,reliability_score,best_tolerance\n");
    for (i, r) in reports.iter().enumerate() {
        writeln!(
            csv,
            "{},{},{:.6},{:.9}",
            i + 1,
            r.variant,
            r.reliability_score,
            r.best_tolerance
        )
        .map_err(|e| CliError::internal(e.to_string()))?;
    }
    write_atomic(&dir.join("report.csv"), csv.as_bytes())?;
    // Record the report in the directory's manifest when one exists.
    if let Ok(mut manifest) = RunManifest::read(dir) {
        if !manifest.outputs.iter().any(|o| o == "report.csv") {
            manifest.outputs.push("report.csv".into());
        }
        manifest.write(dir)?;
    }

    for (i, r) in reports.iter().enumerate() {
        eprintln!(
            "#{} {:>13}  reliability {:.4}  (tolerance {:.6})",
            i + 1,
            r.variant.to_string(),
            r.reliability_score,
            r.best_tolerance
        );
    }
    if stdout {
        print!("{csv}");
    }
    Ok(())
}
