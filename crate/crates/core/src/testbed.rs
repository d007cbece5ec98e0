//! Evaluation harness: synthetic score pools, test-sequence construction,
//! trial execution, detection metrics, threshold sweeps and selection.
//!
//! A test is a 4000-image score sequence whose first half carries 1% unknowns
//! and whose second half carries an elevated unknown percentage; the harness
//! measures where each policy first reports Unreliable relative to the
//! ground-truth change batch. All randomness flows from a single root seed
//! through per-trial derived seeds, so trials are independent and the runner
//! may execute them in parallel without changing any result.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta as StatBeta, ContinuousCDF};

use crate::dist_stats::{std_normal_cdf, CalibrationStats, FitMethod};
use crate::error::{Error, Result};
use crate::policy::{
    self, calibrate, run_policy, PolicyConfig, PolicyVariant, Verdict,
};
use crate::score_stream::{batch_stream, ScoreRecord};

/// Geometry and scale of one test configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    pub total_images: usize,
    pub phase1_len: usize,
    pub phase1_unknowns: usize,
    /// Unknown percentage in the second phase, integer in [2, 25].
    pub phase2_unknown_pct: u32,
    pub batch_size: usize,
    pub trials: usize,
    pub seed: u64,
}

impl TestConfig {
    pub fn with_pct(pct: u32, trials: usize, seed: u64) -> Self {
        TestConfig {
            total_images: 4000,
            phase1_len: 2000,
            phase1_unknowns: 20,
            phase2_unknown_pct: pct,
            batch_size: 100,
            trials,
            seed,
        }
    }

    pub fn phase2_len(&self) -> usize {
        self.total_images - self.phase1_len
    }

    /// Exact unknown count in the second phase.
    pub fn phase2_unknowns(&self) -> usize {
        self.phase2_len() * self.phase2_unknown_pct as usize / 100
    }

    /// 1-based index of the first batch containing a phase-2 image.
    pub fn ground_truth_batch(&self) -> usize {
        self.phase1_len / self.batch_size + 1
    }

    pub fn num_batches(&self) -> usize {
        self.total_images / self.batch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.trials == 0 {
            return Err(Error::InvalidArgument("batch_size and trials must be >= 1".into()));
        }
        if self.phase1_len >= self.total_images {
            return Err(Error::InvalidArgument(
                "phase1_len must be smaller than total_images".into(),
            ));
        }
        if self.phase1_unknowns > self.phase1_len {
            return Err(Error::InvalidArgument(
                "phase1_unknowns must not exceed phase1_len".into(),
            ));
        }
        if !(2..=25).contains(&self.phase2_unknown_pct) {
            return Err(Error::InvalidArgument(format!(
                "phase2_unknown_pct must be in [2,25], got {}",
                self.phase2_unknown_pct
            )));
        }
        if self.phase2_len() * self.phase2_unknown_pct as usize % 100 != 0 {
            return Err(Error::InvalidArgument(
                "phase2 unknown count must be an exact percentage of the phase length".into(),
            ));
        }
        Ok(())
    }
}

/// Known and unknown score pools a test samples from, with replacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePools {
    pub known: Vec<ScoreRecord>,
    pub unknown: Vec<ScoreRecord>,
    pub source: PoolSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSource {
    Synthetic,
    File,
}

impl ScorePools {
    pub fn validate(&self) -> Result<()> {
        if self.known.is_empty() || self.unknown.is_empty() {
            return Err(Error::InvalidArgument("both score pools must be nonempty".into()));
        }
        if self.known.iter().any(|r| r.is_unknown == Some(true)) {
            return Err(Error::InvalidArgument("known pool contains is_unknown=1 records".into()));
        }
        if self.unknown.iter().any(|r| r.is_unknown != Some(true)) {
            return Err(Error::InvalidArgument(
                "unknown pool must carry is_unknown=1 on every record".into(),
            ));
        }
        Ok(())
    }

    /// Build pools from a flagged score-record list.
    pub fn from_records(records: Vec<ScoreRecord>) -> Result<Self> {
        let mut known = Vec::new();
        let mut unknown = Vec::new();
        for mut r in records {
            match r.is_unknown {
                Some(true) => unknown.push(r),
                _ => {
                    r.is_unknown = Some(false);
                    known.push(r);
                }
            }
        }
        let pools = ScorePools {
            known,
            unknown,
            source: PoolSource::File,
        };
        pools.validate()?;
        Ok(pools)
    }
}

/// One component of a Beta mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaComponent {
    pub weight: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Beta mixture over (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaMixture {
    pub components: Vec<BetaComponent>,
}

impl BetaMixture {
    pub fn single(alpha: f64, beta: f64) -> Self {
        BetaMixture {
            components: vec![BetaComponent { weight: 1.0, alpha, beta }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidArgument("mixture needs at least one component".into()));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if !(total > 0.0) {
            return Err(Error::InvalidArgument("mixture weights must sum to > 0".into()));
        }
        for c in &self.components {
            if !(c.weight >= 0.0 && c.alpha > 0.0 && c.beta > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "invalid mixture component ({}, {}, {})",
                    c.weight, c.alpha, c.beta
                )));
            }
        }
        Ok(())
    }

    /// Quantile of the mixture with the component picked by weight; the
    /// uniform `u` drives the chosen component's inverse CDF so that copula
    /// draws carry through to the score scale.
    fn quantile(&self, rng: &mut impl Rng, u: f64) -> f64 {
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        let mut pick = rng.gen::<f64>() * total;
        let mut chosen = &self.components[self.components.len() - 1];
        for c in &self.components {
            if pick < c.weight {
                chosen = c;
                break;
            }
            pick -= c.weight;
        }
        let dist = StatBeta::new(chosen.alpha, chosen.beta).expect("validated component");
        let u = u.clamp(1e-12, 1.0 - 1e-12);
        // Keep SoftMax scores strictly positive.
        dist.inverse_cdf(u).clamp(1e-9, 1.0)
    }
}

/// Shape of the synthetic pools. The defaults are synthetic stand-ins shaped
/// like operational score histograms (knowns concentrated toward 1 with a
/// low-score tail; unknowns broader, with substantial low-score mass and,
/// for SoftMax, a confidently-wrong high mode). They are not measured data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub pool_size: usize,
    pub known_softmax: BetaMixture,
    pub known_evm: BetaMixture,
    pub unknown_softmax: BetaMixture,
    pub unknown_evm: BetaMixture,
    /// Gaussian-copula correlation between the two score columns within each
    /// pool. Knowns co-vary strongly (a confidently classified image also
    /// sits well inside its class's extreme vectors); unknowns do not.
    pub known_corr: f64,
    pub unknown_corr: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            pool_size: 20_000,
            known_softmax: BetaMixture::single(24.0, 6.0),
            known_evm: BetaMixture::single(5.0, 2.0),
            unknown_softmax: BetaMixture::single(24.0, 1.1),
            unknown_evm: BetaMixture::single(0.8, 3.5),
            known_corr: 0.7,
            unknown_corr: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 {
            return Err(Error::InvalidArgument("pool_size must be >= 1".into()));
        }
        self.known_softmax.validate()?;
        self.known_evm.validate()?;
        self.unknown_softmax.validate()?;
        self.unknown_evm.validate()?;
        for corr in [self.known_corr, self.unknown_corr] {
            if !(corr.abs() < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "pool correlation must be in (-1, 1), got {corr}"
                )));
            }
        }
        Ok(())
    }
}

/// SplitMix64-style seed derivation; deterministic and stream-separating.
pub fn derive_seed(root: u64, a: u64, b: u64) -> u64 {
    let mut z = root ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    for _ in 0..3 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut x = z;
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z = x ^ (x >> 31);
    }
    z
}

/// Draw correlated (softmax, evm) uniforms through a Gaussian copula.
fn copula_uniforms(rng: &mut impl Rng, corr: f64) -> (f64, f64) {
    let z1: f64 = rng.sample(rand_distr::StandardNormal);
    let w: f64 = rng.sample(rand_distr::StandardNormal);
    let z2 = corr * z1 + (1.0 - corr * corr).sqrt() * w;
    (std_normal_cdf(z1), std_normal_cdf(z2))
}

/// Generate deterministic synthetic score pools.
pub fn synth_pools(spec: &SynthSpec, seed: u64) -> Result<ScorePools> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0x706f_6f6c, 0));
    let mut known = Vec::with_capacity(spec.pool_size);
    for i in 0..spec.pool_size {
        let (u1, u2) = copula_uniforms(&mut rng, spec.known_corr);
        known.push(ScoreRecord {
            sample_id: format!("k{i}"),
            max_softmax: spec.known_softmax.quantile(&mut rng, u1),
            max_evm: spec.known_evm.quantile(&mut rng, u2),
            is_unknown: Some(false),
        });
    }
    let mut unknown = Vec::with_capacity(spec.pool_size);
    for i in 0..spec.pool_size {
        let (u1, u2) = copula_uniforms(&mut rng, spec.unknown_corr);
        unknown.push(ScoreRecord {
            sample_id: format!("u{i}"),
            max_softmax: spec.unknown_softmax.quantile(&mut rng, u1),
            max_evm: spec.unknown_evm.quantile(&mut rng, u2),
            is_unknown: Some(true),
        });
    }
    Ok(ScorePools {
        known,
        unknown,
        source: PoolSource::Synthetic,
    })
}

/// Draw a calibration sample from the pools at the reliable-regime mixing
/// ratio (the phase-1 unknown fraction).
pub fn calibration_sample(pools: &ScorePools, config: &TestConfig, size: usize) -> Vec<ScoreRecord> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, 0x6361_6c69, 0));
    let unknown_frac = config.phase1_unknowns as f64 / config.phase1_len as f64;
    let n_unknown = (size as f64 * unknown_frac).round() as usize;
    let mut out = Vec::with_capacity(size);
    for _ in 0..size - n_unknown {
        out.push(pools.known[rng.gen_range(0..pools.known.len())].clone());
    }
    for _ in 0..n_unknown {
        out.push(pools.unknown[rng.gen_range(0..pools.unknown.len())].clone());
    }
    out.shuffle(&mut rng);
    out
}

/// Generate one test sequence: phase 1 with its fixed unknown count, phase 2
/// with the configured unknown percentage, unknown positions uniform within
/// each phase, sampling with replacement. Deterministic per
/// (seed, phase2_unknown_pct, trial_index).
pub fn generate_test(
    config: &TestConfig,
    pools: &ScorePools,
    trial_index: usize,
) -> Result<Vec<ScoreRecord>> {
    config.validate()?;
    pools.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
        config.seed,
        config.phase2_unknown_pct as u64,
        trial_index as u64,
    ));
    let mut out = Vec::with_capacity(config.total_images);
    fill_phase(
        &mut out,
        pools,
        config.phase1_len,
        config.phase1_unknowns,
        &mut rng,
    );
    fill_phase(
        &mut out,
        pools,
        config.phase2_len(),
        config.phase2_unknowns(),
        &mut rng,
    );
    Ok(out)
}

fn fill_phase(
    out: &mut Vec<ScoreRecord>,
    pools: &ScorePools,
    len: usize,
    unknowns: usize,
    rng: &mut ChaCha12Rng,
) {
    let positions = rand::seq::index::sample(rng, len, unknowns);
    let mut is_unknown = vec![false; len];
    for p in positions {
        is_unknown[p] = true;
    }
    for unknown in is_unknown {
        let pool = if unknown { &pools.unknown } else { &pools.known };
        out.push(pool[rng.gen_range(0..pool.len())].clone());
    }
}

/// Detection-vs-ground-truth classification of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialClass {
    FalseOrEarly,
    OnTime,
    Late,
    Missed,
}

/// Outcome of one test under one policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub detection_batch: Option<usize>,
    pub ground_truth_batch: usize,
    pub classification: TrialClass,
    pub abs_error: Option<usize>,
}

/// Classify a detection batch against the ground-truth change batch.
pub fn classify_detection(detection_batch: Option<usize>, ground_truth_batch: usize) -> TrialOutcome {
    let (classification, abs_error) = match detection_batch {
        None => (TrialClass::Missed, None),
        Some(d) => {
            let err = d.abs_diff(ground_truth_batch);
            let class = if d < ground_truth_batch {
                TrialClass::FalseOrEarly
            } else if d == ground_truth_batch {
                TrialClass::OnTime
            } else {
                TrialClass::Late
            };
            (class, Some(err))
        }
    };
    TrialOutcome {
        detection_batch,
        ground_truth_batch,
        classification,
        abs_error,
    }
}

/// Fraction of batches whose verdict matches ground truth: Reliable before
/// the change batch, Unreliable from it onwards.
pub fn total_accuracy(verdicts: &[Verdict], ground_truth_batch: usize) -> f64 {
    assert!(!verdicts.is_empty(), "total_accuracy needs verdicts");
    let correct = verdicts
        .iter()
        .enumerate()
        .filter(|(i, v)| {
            let batch = i + 1;
            if batch < ground_truth_batch {
                **v == Verdict::Reliable
            } else {
                **v == Verdict::Unreliable
            }
        })
        .count();
    correct as f64 / verdicts.len() as f64
}

/// For a latched (monotone) policy, total accuracy is a pure function of the
/// detection batch, the change batch, and the batch count.
pub fn accuracy_from_detection(
    detection_batch: Option<usize>,
    ground_truth_batch: usize,
    num_batches: usize,
) -> f64 {
    let wrong = match detection_batch {
        None => num_batches + 1 - ground_truth_batch,
        Some(d) => d.abs_diff(ground_truth_batch),
    };
    1.0 - wrong as f64 / num_batches as f64
}

/// Detection metrics aggregated over trials. Percentages are in [0, 100];
/// total accuracy is a fraction in [0, 1]. The mean absolute error averages
/// over detected trials only and is NaN when nothing was detected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub false_detection_pct: f64,
    pub total_detection_pct: f64,
    pub on_time_pct: f64,
    pub late_pct: f64,
    pub mean_abs_error: f64,
    pub total_accuracy: f64,
}

/// Aggregate per-trial outcomes and accuracies.
pub fn aggregate(outcomes: &[TrialOutcome], accuracies: &[f64]) -> MetricsSummary {
    assert!(!outcomes.is_empty(), "aggregate needs outcomes");
    assert_eq!(outcomes.len(), accuracies.len());
    let n = outcomes.len() as f64;
    let count = |class: TrialClass| outcomes.iter().filter(|o| o.classification == class).count() as f64;
    let on_time = count(TrialClass::OnTime);
    let late = count(TrialClass::Late);
    let false_or_early = count(TrialClass::FalseOrEarly);
    let errors: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| o.abs_error.map(|e| e as f64))
        .collect();
    let mean_abs_error = if errors.is_empty() {
        f64::NAN
    } else {
        errors.iter().sum::<f64>() / errors.len() as f64
    };
    MetricsSummary {
        false_detection_pct: 100.0 * false_or_early / n,
        total_detection_pct: 100.0 * (on_time + late) / n,
        on_time_pct: 100.0 * on_time / n,
        late_pct: 100.0 * late / n,
        mean_abs_error,
        total_accuracy: accuracies.iter().sum::<f64>() / n,
    }
}

/// Run one test sequence under one policy.
pub fn run_trial(
    config: &TestConfig,
    policy_config: &PolicyConfig,
    sequence: Vec<ScoreRecord>,
) -> Result<(TrialOutcome, f64)> {
    let batches = batch_stream(sequence, config.batch_size)?;
    let run = run_policy(policy_config, &batches)?;
    let n_g = config.ground_truth_batch();
    let outcome = classify_detection(run.detection_index, n_g);
    let acc = total_accuracy(&run.verdicts, n_g);
    Ok((outcome, acc))
}

/// One emitted metrics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub policy: PolicyVariant,
    pub unknown_pct: u32,
    pub tolerance: f64,
    pub metrics: MetricsSummary,
}

/// Detailed record of one trial, as emitted in per-trial output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub variant: PolicyVariant,
    pub tolerance: f64,
    pub unknown_pct: u32,
    pub trial: usize,
    pub detection_batch: Option<usize>,
    pub classification: TrialClass,
    pub abs_error: Option<usize>,
    pub total_accuracy: f64,
    pub verdicts: Vec<Verdict>,
    pub state_trace: Vec<f64>,
}

/// Evaluate a set of policies over a grid of unknown percentages.
///
/// Sequences are generated once per (percentage, trial) and shared across
/// policies. Trials run in parallel; per-trial seeding makes the result
/// independent of execution order.
pub fn evaluate(
    pools: &ScorePools,
    policies: &[PolicyConfig],
    pcts: &[u32],
    trials: usize,
    batch_size: usize,
    seed: u64,
    mut on_trial: Option<&mut dyn FnMut(&TrialRecord)>,
) -> Result<Vec<MetricsRow>> {
    pools.validate()?;
    for p in policies {
        p.validate()?;
    }
    let mut rows = Vec::new();
    for &pct in pcts {
        let config = TestConfig {
            batch_size,
            ..TestConfig::with_pct(pct, trials, seed)
        };
        config.validate()?;
        let per_trial: Vec<Vec<TrialRecord>> = (0..trials)
            .into_par_iter()
            .map(|trial| -> Result<Vec<TrialRecord>> {
                let sequence = generate_test(&config, pools, trial)?;
                let batches = batch_stream(sequence, config.batch_size)?;
                let n_g = config.ground_truth_batch();
                policies
                    .iter()
                    .map(|policy_config| {
                        let run = run_policy(policy_config, &batches)?;
                        let outcome = classify_detection(run.detection_index, n_g);
                        Ok(TrialRecord {
                            variant: policy_config.variant,
                            tolerance: policy_config.tolerance,
                            unknown_pct: pct,
                            trial,
                            detection_batch: run.detection_index,
                            classification: outcome.classification,
                            abs_error: outcome.abs_error,
                            total_accuracy: total_accuracy(&run.verdicts, n_g),
                            verdicts: run.verdicts,
                            state_trace: run.state_trace,
                        })
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        for (pi, policy_config) in policies.iter().enumerate() {
            let outcomes: Vec<TrialOutcome> = per_trial
                .iter()
                .map(|t| classify_detection(t[pi].detection_batch, config.ground_truth_batch()))
                .collect();
            let accs: Vec<f64> = per_trial.iter().map(|t| t[pi].total_accuracy).collect();
            rows.push(MetricsRow {
                policy: policy_config.variant,
                unknown_pct: pct,
                tolerance: policy_config.tolerance,
                metrics: aggregate(&outcomes, &accs),
            });
        }
        if let Some(cb) = on_trial.as_deref_mut() {
            for t in per_trial.iter().flatten() {
                cb(t);
            }
        }
    }
    Ok(rows)
}

/// Sweep a tolerance grid for one policy variant at a fixed validation
/// unknown percentage.
///
/// The state evolution of every variant is tolerance-independent, so the
/// sweep computes one state trace per trial and derives per-tolerance
/// outcomes from it; rows equal independent single runs at the same seeds.
pub fn threshold_sweep(
    pools: &ScorePools,
    template: &PolicyConfig,
    config: &TestConfig,
    grid: &[f64],
) -> Result<Vec<(f64, MetricsSummary)>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("sweep grid must be nonempty".into()));
    }
    pools.validate()?;
    config.validate()?;
    template.validate()?;
    let kind = template.variant.state_kind();
    let n_g = config.ground_truth_batch();
    let num_batches = config.num_batches();
    let traces: Vec<Vec<f64>> = (0..config.trials)
        .into_par_iter()
        .map(|trial| -> Result<Vec<f64>> {
            let sequence = generate_test(config, pools, trial)?;
            let batches = batch_stream(sequence, config.batch_size)?;
            Ok(run_policy(template, &batches)?.state_trace)
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(grid.len());
    for &tolerance in grid {
        let mut outcomes = Vec::with_capacity(traces.len());
        let mut accs = Vec::with_capacity(traces.len());
        for trace in &traces {
            let detection = policy::detection_from_trace(kind, trace, tolerance);
            outcomes.push(classify_detection(detection, n_g));
            accs.push(accuracy_from_detection(detection, n_g, num_batches));
        }
        out.push((tolerance, aggregate(&outcomes, &accs)));
    }
    Ok(out)
}

/// Threshold-selection regime over a sweep table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SelectionRegime {
    /// Maximize on-time + late detection.
    MaxTrueDetection,
    /// Maximize total accuracy.
    MaxTotalAccuracy,
    /// Among rows with false detection at most the cap (percent), maximize
    /// true detection.
    FalseCap(f64),
}

impl std::str::FromStr for SelectionRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "max-true-detection" {
            return Ok(SelectionRegime::MaxTrueDetection);
        }
        if s == "max-total-accuracy" {
            return Ok(SelectionRegime::MaxTotalAccuracy);
        }
        if let Some(cap) = s.strip_prefix("false-cap:") {
            let cap: f64 = cap
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad false-cap value in {s:?}")))?;
            return Ok(SelectionRegime::FalseCap(cap));
        }
        Err(Error::InvalidArgument(format!(
            "unknown regime {s:?}; expected max-true-detection, max-total-accuracy, or false-cap:<pct>"
        )))
    }
}

/// Pick a tolerance from a sweep table. Ties break toward the larger
/// tolerance (the more conservative setting).
pub fn select_threshold(
    table: &[(f64, MetricsSummary)],
    regime: SelectionRegime,
) -> Result<f64> {
    if table.is_empty() {
        return Err(Error::InvalidArgument("sweep table must be nonempty".into()));
    }
    let objective = |m: &MetricsSummary| match regime {
        SelectionRegime::MaxTrueDetection | SelectionRegime::FalseCap(_) => {
            m.on_time_pct + m.late_pct
        }
        SelectionRegime::MaxTotalAccuracy => m.total_accuracy,
    };
    let mut best: Option<(f64, f64)> = None;
    for (tol, m) in table {
        if let SelectionRegime::FalseCap(cap) = regime {
            if m.false_detection_pct > cap {
                continue;
            }
        }
        let score = objective(m);
        let better = match best {
            None => true,
            Some((bt, bs)) => score > bs || (score == bs && *tol > bt),
        };
        if better {
            best = Some((*tol, score));
        }
    }
    match best {
        Some((tol, _)) => Ok(tol),
        None => Err(Error::InvalidArgument(
            "no threshold satisfies the false-detection cap".into(),
        )),
    }
}

/// Reliability score: max over the sweep of on-time rate times total
/// detection rate, both as fractions.
pub fn reliability_score(table: &[(f64, MetricsSummary)]) -> f64 {
    table
        .iter()
        .map(|(_, m)| (m.on_time_pct / 100.0) * (m.total_detection_pct / 100.0))
        .fold(0.0, f64::max)
}

/// Fit calibration statistics from pools at the reliable-regime mixture.
pub fn calibrate_from_pools(
    pools: &ScorePools,
    config: &TestConfig,
    fit_method: FitMethod,
    sample_size: usize,
) -> Result<CalibrationStats> {
    let sample = calibration_sample(pools, config, sample_size);
    calibrate(&sample, fit_method)
}

/// Render metrics rows as the plot-ready CSV, with the root seed recorded in
/// the header. Formatting is fixed so identical runs are byte-identical.
pub fn metrics_csv(rows: &[MetricsRow], root_seed: u64) -> String {
    let mut out = String::new();
    out.push_str(&format!("# root_seed={root_seed}\n"));
    out.push_str("policy,unknown_pct,tolerance,false_pct,total_detection_pct,on_time_pct,late_pct,mae,total_accuracy\n");
    for r in rows {
        let m = &r.metrics;
        out.push_str(&format!(
            "{},{},{:.9},{:.4},{:.4},{:.4},{:.4},{},{:.6}\n",
            r.policy,
            r.unknown_pct,
            r.tolerance,
            m.false_detection_pct,
            m.total_detection_pct,
            m.on_time_pct,
            m.late_pct,
            format_mae(m.mean_abs_error),
            m.total_accuracy,
        ));
    }
    out
}

/// Render a sweep table as CSV with a tolerance axis.
pub fn sweep_csv(
    policy: PolicyVariant,
    unknown_pct: u32,
    table: &[(f64, MetricsSummary)],
    root_seed: u64,
) -> String {
    let rows: Vec<MetricsRow> = table
        .iter()
        .map(|(tol, m)| MetricsRow {
            policy,
            unknown_pct,
            tolerance: *tol,
            metrics: *m,
        })
        .collect();
    metrics_csv(&rows, root_seed)
}

fn format_mae(mae: f64) -> String {
    if mae.is_nan() {
        "nan".to_string()
    } else {
        format!("{mae:.4}")
    }
}

/// Parse a metrics/sweep CSV produced by [`metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.starts_with("policy,") || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::parse(i + 1, format!("expected 9 fields, got {}", fields.len())));
        }
        let parse_f = |s: &str| -> Result<f64> {
            if s == "nan" {
                return Ok(f64::NAN);
            }
            s.parse::<f64>()
                .map_err(|_| Error::parse(i + 1, format!("non-numeric field {s:?}")))
        };
        rows.push(MetricsRow {
            policy: fields[0].parse()?,
            unknown_pct: fields[1]
                .parse()
                .map_err(|_| Error::parse(i + 1, "bad unknown_pct".to_string()))?,
            tolerance: parse_f(fields[2])?,
            metrics: MetricsSummary {
                false_detection_pct: parse_f(fields[3])?,
                total_detection_pct: parse_f(fields[4])?,
                on_time_pct: parse_f(fields[5])?,
                late_pct: parse_f(fields[6])?,
                mean_abs_error: parse_f(fields[7])?,
                total_accuracy: parse_f(fields[8])?,
            },
        });
    }
    Ok(rows)
}

/// Default tolerance sweep grid for a variant, anchored at the calibration
/// where the variant needs one.
pub fn default_grid(variant: PolicyVariant, calibration: Option<&CalibrationStats>) -> Vec<f64> {
    match variant {
        PolicyVariant::MeanSoftmax => {
            // Absolute thresholds on the running batch mean. The calibration
            // mean under a truncated fit is a latent quantity that can exceed
            // 1, so the grid covers the observable range instead.
            let _ = calibration;
            (0..=100).map(|i| 0.5 + 0.005 * i as f64).collect()
        }
        PolicyVariant::KlSoftmax | PolicyVariant::KlEvm | PolicyVariant::BivariateKl => {
            // Log-spaced from 1e-4 to 100.
            (0..=80)
                .map(|i| 10f64.powf(-4.0 + 6.0 * i as f64 / 80.0))
                .collect()
        }
        PolicyVariant::Ond => (1..=60).map(|i| 0.0005 * i as f64).collect(),
    }
}
