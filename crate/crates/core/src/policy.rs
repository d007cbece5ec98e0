//! Stateful batch reliability policies behind a single contract.
//!
//! Every policy carries one monotone scalar across batches: a running
//! minimum of batch means, a running maximum of KL divergences, or a running
//! maximum of the Bernoulli-bound violation. Once a policy reports
//! Unreliable it reports Unreliable forever; the state makes that structural
//! rather than a side flag.

use serde::{Deserialize, Serialize};

use crate::dist_stats::{
    bivariate_kl, fit_truncated_from_moments, gaussian_kl, pearson_correlation, sample_moments,
    BivariateGaussianParams, CalibrationStats, FitMethod, GaussianParams,
};
use crate::error::{Error, Result};
use crate::score_stream::{Batch, ScoreRecord};

/// Batch-level reliability verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Reliable,
    Unreliable,
}

/// Which monotone scalar a policy threads across batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyStateKind {
    /// Running minimum of batch mean SoftMax (non-increasing).
    MeanMu,
    /// Running maximum of batch KL divergence (non-decreasing).
    KlD,
    /// Running maximum of the Bernoulli-bound violation (non-decreasing).
    OndEps,
}

/// The scalar state a policy carries across batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub kind: PolicyStateKind,
    pub value: f64,
}

impl PolicyState {
    /// Initial state for a state kind: 1.0 for the mean tracker, 0.0 for the
    /// divergence and violation trackers.
    pub fn initial(kind: PolicyStateKind) -> Self {
        let value = match kind {
            PolicyStateKind::MeanMu => 1.0,
            PolicyStateKind::KlD | PolicyStateKind::OndEps => 0.0,
        };
        PolicyState { kind, value }
    }
}

/// Which score column a KL policy reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreColumn {
    Softmax,
    Evm,
}

/// The five policy variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyVariant {
    MeanSoftmax,
    KlSoftmax,
    KlEvm,
    BivariateKl,
    Ond,
}

impl PolicyVariant {
    pub const ALL: [PolicyVariant; 5] = [
        PolicyVariant::MeanSoftmax,
        PolicyVariant::KlSoftmax,
        PolicyVariant::KlEvm,
        PolicyVariant::BivariateKl,
        PolicyVariant::Ond,
    ];

    pub fn state_kind(&self) -> PolicyStateKind {
        match self {
            PolicyVariant::MeanSoftmax => PolicyStateKind::MeanMu,
            PolicyVariant::KlSoftmax | PolicyVariant::KlEvm | PolicyVariant::BivariateKl => {
                PolicyStateKind::KlD
            }
            PolicyVariant::Ond => PolicyStateKind::OndEps,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PolicyVariant::MeanSoftmax => "mean-softmax",
            PolicyVariant::KlSoftmax => "kl-softmax",
            PolicyVariant::KlEvm => "kl-evm",
            PolicyVariant::BivariateKl => "bikl",
            PolicyVariant::Ond => "ond",
        }
    }
}

impl std::fmt::Display for PolicyVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PolicyVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-softmax" => Ok(PolicyVariant::MeanSoftmax),
            "kl-softmax" => Ok(PolicyVariant::KlSoftmax),
            "kl-evm" => Ok(PolicyVariant::KlEvm),
            "bikl" | "bivariate-kl" => Ok(PolicyVariant::BivariateKl),
            "ond" => Ok(PolicyVariant::Ond),
            other => Err(Error::InvalidArgument(format!("unknown policy {other:?}"))),
        }
    }
}

/// OND policy parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OndParams {
    /// Lower bound on the EVM probability of a known-class image.
    pub delta: f64,
    /// Estimated OOD ratio in the reliable regime.
    pub rho_hat: f64,
}

impl Default for OndParams {
    fn default() -> Self {
        OndParams {
            delta: 0.5,
            rho_hat: 0.01,
        }
    }
}

/// A fully specified policy: variant, tolerance, and whatever reference data
/// the variant needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub variant: PolicyVariant,
    /// M, kappa, or Xi depending on the variant.
    pub tolerance: f64,
    pub calibration: Option<CalibrationStats>,
    pub ond: Option<OndParams>,
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        match self.variant {
            PolicyVariant::KlSoftmax | PolicyVariant::KlEvm | PolicyVariant::BivariateKl => {
                if self.calibration.is_none() {
                    return Err(Error::InvalidArgument(format!(
                        "policy {} requires calibration",
                        self.variant
                    )));
                }
            }
            PolicyVariant::Ond => {
                let ond = self.ond.ok_or_else(|| {
                    Error::InvalidArgument("policy ond requires delta and rho_hat".into())
                })?;
                if !(ond.delta > 0.0 && ond.delta < 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "ond delta must be in (0,1), got {}",
                        ond.delta
                    )));
                }
                if !(0.0..=1.0).contains(&ond.rho_hat) {
                    return Err(Error::InvalidArgument(format!(
                        "ond rho_hat must be in [0,1], got {}",
                        ond.rho_hat
                    )));
                }
            }
            PolicyVariant::MeanSoftmax => {}
        }
        Ok(())
    }
}

/// Floor applied to batch sigma in the KL policies when a batch column is
/// (nearly) constant. An all-identical batch is a legitimate, suspicious,
/// runtime input; the floor keeps the divergence finite.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Fit reference Gaussian parameters and the reference correlation from
/// validation scores.
pub fn calibrate(validation_scores: &[ScoreRecord], fit_method: FitMethod) -> Result<CalibrationStats> {
    if validation_scores.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "calibration needs >= 2 records, got {}",
            validation_scores.len()
        )));
    }
    let softmax_col: Vec<f64> = validation_scores.iter().map(|r| r.max_softmax).collect();
    let evm_col: Vec<f64> = validation_scores.iter().map(|r| r.max_evm).collect();
    let softmax = fit_column(&softmax_col, fit_method, false)?;
    let evm = fit_column(&evm_col, fit_method, false)?;
    let corr_r = pearson_correlation(&softmax_col, &evm_col)?;
    if corr_r.abs() >= 1.0 {
        return Err(Error::Degenerate(format!(
            "reference correlation |r| must be < 1, got {corr_r}"
        )));
    }
    Ok(CalibrationStats {
        softmax,
        evm,
        corr_r,
        fit_method,
    })
}

/// Fit one score column per the configured method. With `floor_degenerate`
/// a zero-variance column yields sigma = [`SIGMA_FLOOR`] instead of an error.
fn fit_column(values: &[f64], fit_method: FitMethod, floor_degenerate: bool) -> Result<GaussianParams> {
    let (mean, std) = sample_moments(values)?;
    if std < SIGMA_FLOOR {
        if floor_degenerate {
            return GaussianParams::new(mean, SIGMA_FLOOR);
        }
        return Err(Error::Degenerate("zero variance in calibration column".into()));
    }
    match fit_method {
        FitMethod::RawMoments => GaussianParams::new(mean, std),
        FitMethod::TruncatedMomentMatch => {
            // The moment match has no solution when the standardized bound
            // (1 - mean)/std is <= 1, and the latent parameters blow up as it
            // approaches 1. Below the guard the raw moments are the
            // documented fallback.
            if (1.0 - mean) / std < TRUNCATION_FEASIBILITY_GUARD {
                return GaussianParams::new(mean, std);
            }
            match fit_truncated_from_moments(mean, std, 1.0) {
                Ok(p) => Ok(p),
                Err(Error::NoConvergence { .. }) | Err(Error::InvalidArgument(_)) => {
                    GaussianParams::new(mean, std)
                }
                Err(e) => Err(e),
            }
        }
    }
}

/// Minimum standardized distance of the bound from the sample mean for the
/// truncated moment match to be attempted.
pub const TRUNCATION_FEASIBILITY_GUARD: f64 = 1.2;

/// One step of the mean-of-SoftMax baseline: thread the running minimum of
/// batch mean SoftMax and compare against the tolerance `m`.
pub fn mean_softmax_step(state: PolicyState, batch: &Batch, m: f64) -> Result<(Verdict, PolicyState)> {
    expect_kind(state, PolicyStateKind::MeanMu)?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mean =
        batch.records.iter().map(|r| r.max_softmax).sum::<f64>() / batch.len() as f64;
    let value = state.value.min(mean);
    let verdict = if value > m {
        Verdict::Reliable
    } else {
        Verdict::Unreliable
    };
    Ok((verdict, PolicyState { kind: state.kind, value }))
}

/// One step of the univariate KL policy over the chosen score column: fit the
/// batch column with the calibration's fit method, take the divergence
/// against the reference, thread the running maximum, threshold at `kappa`.
pub fn kl_step(
    state: PolicyState,
    batch: &Batch,
    which: ScoreColumn,
    cal: &CalibrationStats,
    kappa: f64,
) -> Result<(Verdict, PolicyState)> {
    expect_kind(state, PolicyStateKind::KlD)?;
    if batch.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "kl step needs batch length >= 2, got {}",
            batch.len()
        )));
    }
    let (column, reference) = match which {
        ScoreColumn::Softmax => (batch.softmax_column(), cal.softmax),
        ScoreColumn::Evm => (batch.evm_column(), cal.evm),
    };
    let batch_params = fit_column(&column, cal.fit_method, true)?;
    let d_batch = gaussian_kl(batch_params, reference);
    let value = state.value.max(d_batch);
    Ok((kl_verdict(value, kappa), PolicyState { kind: state.kind, value }))
}

/// One step of the bivariate KL fusion policy over both score columns.
pub fn bivariate_kl_step(
    state: PolicyState,
    batch: &Batch,
    cal: &CalibrationStats,
    kappa: f64,
) -> Result<(Verdict, PolicyState)> {
    expect_kind(state, PolicyStateKind::KlD)?;
    if batch.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "bivariate kl step needs batch length >= 3, got {}",
            batch.len()
        )));
    }
    let p1 = batch.softmax_column();
    let p2 = batch.evm_column();
    let g1 = fit_column(&p1, cal.fit_method, true)?;
    let g2 = fit_column(&p2, cal.fit_method, true)?;
    let rho = match pearson_correlation(&p1, &p2) {
        Ok(r) => r.clamp(-(1.0 - 1e-9), 1.0 - 1e-9),
        Err(Error::Degenerate(_)) => 0.0,
        Err(e) => return Err(e),
    };
    let batch_params = BivariateGaussianParams::new(g1.mu, g2.mu, g1.sigma, g2.sigma, rho)?;
    let ref_params = BivariateGaussianParams::new(
        cal.softmax.mu,
        cal.evm.mu,
        cal.softmax.sigma,
        cal.evm.sigma,
        cal.corr_r,
    )?;
    let d_batch = bivariate_kl(batch_params, ref_params);
    let value = state.value.max(d_batch);
    Ok((kl_verdict(value, kappa), PolicyState { kind: state.kind, value }))
}

/// One step of the OND policy: mean of the per-sample violations of the
/// known-class probability bound, corrected by the expected OOD ratio,
/// threaded as a running maximum and thresholded at `xi`.
pub fn ond_step(
    state: PolicyState,
    batch: &Batch,
    delta: f64,
    rho_hat: f64,
    xi: f64,
) -> Result<(Verdict, PolicyState)> {
    expect_kind(state, PolicyStateKind::OndEps)?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must be in (0,1), got {delta}")));
    }
    if !(0.0..=1.0).contains(&rho_hat) {
        return Err(Error::InvalidArgument(format!(
            "rho_hat must be in [0,1], got {rho_hat}"
        )));
    }
    let mean_violation = batch
        .records
        .iter()
        .map(|r| (1.0 - delta - r.max_evm).max(0.0))
        .sum::<f64>()
        / batch.len() as f64;
    let eta = (mean_violation - rho_hat * (1.0 - delta)).max(0.0);
    let value = state.value.max(eta);
    let verdict = if value < xi {
        Verdict::Reliable
    } else {
        Verdict::Unreliable
    };
    Ok((verdict, PolicyState { kind: state.kind, value }))
}

fn kl_verdict(value: f64, kappa: f64) -> Verdict {
    if value < kappa {
        Verdict::Reliable
    } else {
        Verdict::Unreliable
    }
}

fn expect_kind(state: PolicyState, kind: PolicyStateKind) -> Result<()> {
    if state.kind != kind {
        return Err(Error::InvalidArgument(format!(
            "state kind {:?} does not match expected {:?}",
            state.kind, kind
        )));
    }
    Ok(())
}

/// Output of a full policy run over a batch stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRun {
    pub verdicts: Vec<Verdict>,
    /// 1-based index of the first Unreliable batch, if any.
    pub detection_index: Option<usize>,
    pub state_trace: Vec<f64>,
}

/// Apply a policy's step sequentially across batches with threaded state.
pub fn run_policy(config: &PolicyConfig, batches: &[Batch]) -> Result<PolicyRun> {
    config.validate()?;
    if batches.is_empty() {
        return Err(Error::InvalidArgument("policy run needs at least one batch".into()));
    }
    let mut state = PolicyState::initial(config.variant.state_kind());
    let mut verdicts = Vec::with_capacity(batches.len());
    let mut state_trace = Vec::with_capacity(batches.len());
    let mut detection_index = None;
    for batch in batches {
        let (verdict, next) = policy_step(config, state, batch)?;
        state = next;
        state_trace.push(state.value);
        if verdict == Verdict::Unreliable && detection_index.is_none() {
            detection_index = Some(batch.index);
        }
        verdicts.push(verdict);
    }
    Ok(PolicyRun {
        verdicts,
        detection_index,
        state_trace,
    })
}

/// Dispatch one batch step for a configured policy.
pub fn policy_step(
    config: &PolicyConfig,
    state: PolicyState,
    batch: &Batch,
) -> Result<(Verdict, PolicyState)> {
    match config.variant {
        PolicyVariant::MeanSoftmax => mean_softmax_step(state, batch, config.tolerance),
        PolicyVariant::KlSoftmax => kl_step(
            state,
            batch,
            ScoreColumn::Softmax,
            config.calibration.as_ref().unwrap(),
            config.tolerance,
        ),
        PolicyVariant::KlEvm => kl_step(
            state,
            batch,
            ScoreColumn::Evm,
            config.calibration.as_ref().unwrap(),
            config.tolerance,
        ),
        PolicyVariant::BivariateKl => bivariate_kl_step(
            state,
            batch,
            config.calibration.as_ref().unwrap(),
            config.tolerance,
        ),
        PolicyVariant::Ond => {
            let ond = config.ond.unwrap();
            ond_step(state, batch, ond.delta, ond.rho_hat, config.tolerance)
        }
    }
}

/// Derive the detection batch for a tolerance from a threshold-independent
/// state trace. The state evolution of every variant is independent of its
/// tolerance, so a sweep can reuse one trace per trial.
pub fn detection_from_trace(kind: PolicyStateKind, trace: &[f64], tolerance: f64) -> Option<usize> {
    let hit = |v: f64| match kind {
        PolicyStateKind::MeanMu => v <= tolerance,
        PolicyStateKind::KlD | PolicyStateKind::OndEps => v >= tolerance,
    };
    trace.iter().position(|&v| hit(v)).map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score_stream::batch_stream;
    use approx::assert_abs_diff_eq;

    fn batch(index: usize, softmax: &[f64], evm: &[f64]) -> Batch {
        let records = softmax
            .iter()
            .zip(evm)
            .enumerate()
            .map(|(i, (&s, &e))| ScoreRecord::new(format!("s{i}"), s, e, None).unwrap())
            .collect();
        Batch { index, records }
    }

    fn raw_cal(sm: (f64, f64), ev: (f64, f64), r: f64) -> CalibrationStats {
        CalibrationStats {
            softmax: GaussianParams::new(sm.0, sm.1).unwrap(),
            evm: GaussianParams::new(ev.0, ev.1).unwrap(),
            corr_r: r,
            fit_method: FitMethod::RawMoments,
        }
    }

    #[test]
    fn mean_softmax_hand_trace() {
        let state = PolicyState::initial(PolicyStateKind::MeanMu);
        let b1 = batch(1, &[0.8, 0.6, 0.7, 0.9], &[0.5; 4]);
        let (v1, s1) = mean_softmax_step(state, &b1, 0.7).unwrap();
        assert_eq!(v1, Verdict::Reliable);
        assert_abs_diff_eq!(s1.value, 0.75, epsilon = 1e-12);

        let b2 = batch(2, &[0.65; 4], &[0.5; 4]);
        let (v2, s2) = mean_softmax_step(s1, &b2, 0.7).unwrap();
        assert_eq!(v2, Verdict::Unreliable);
        assert_abs_diff_eq!(s2.value, 0.65, epsilon = 1e-12);

        // Recovery batch does not restore the state (min rule).
        let b3 = batch(3, &[0.9; 4], &[0.5; 4]);
        let (v3, s3) = mean_softmax_step(s2, &b3, 0.7).unwrap();
        assert_eq!(v3, Verdict::Unreliable);
        assert_abs_diff_eq!(s3.value, 0.65, epsilon = 1e-12);
    }

    #[test]
    fn kl_zero_when_batch_matches_calibration() {
        let cal = raw_cal((0.5, 0.05f64.sqrt()), (0.5, 0.1), 0.0);
        let b = batch(1, &[0.2, 0.4, 0.6, 0.8], &[0.5; 4]);
        let state = PolicyState::initial(PolicyStateKind::KlD);
        let (v, s) = kl_step(state, &b, ScoreColumn::Softmax, &cal, 1e-9).unwrap();
        assert!(s.value.abs() < 1e-12);
        assert_eq!(v, Verdict::Reliable);
    }

    #[test]
    fn kl_reference_divergence_and_latch() {
        // Batch with raw moments (0.9, 0.1) vs calibration (0.8, 0.2).
        let cal = raw_cal((0.8, 0.2), (0.5, 0.1), 0.0);
        let b = batch(1, &[0.8, 1.0, 0.8, 1.0], &[0.5; 4]);
        let state = PolicyState::initial(PolicyStateKind::KlD);
        let (v, s) = kl_step(state, &b, ScoreColumn::Softmax, &cal, 0.443147).unwrap();
        assert_abs_diff_eq!(s.value, 0.443147, epsilon = 1e-6);
        assert_eq!(v, Verdict::Unreliable);

        // An in-distribution batch afterwards cannot restore Reliable.
        let b2 = batch(2, &[0.6, 1.0, 0.6, 1.0], &[0.5; 4]);
        let (v2, s2) = kl_step(s, &b2, ScoreColumn::Softmax, &cal, 0.443147).unwrap();
        assert_eq!(v2, Verdict::Unreliable);
        assert!(s2.value >= s.value);
    }

    #[test]
    fn kl_softmax_and_evm_share_computation() {
        let cal = raw_cal((0.7, 0.1), (0.7, 0.1), 0.0);
        let vals = [0.55, 0.6, 0.7, 0.8, 0.9];
        let b_s = batch(1, &vals, &[0.1, 0.2, 0.3, 0.4, 0.5]);
        let b_e = batch(1, &[0.1, 0.2, 0.3, 0.4, 0.5], &vals);
        let st = PolicyState::initial(PolicyStateKind::KlD);
        let (_, a) = kl_step(st, &b_s, ScoreColumn::Softmax, &cal, 1.0).unwrap();
        let (_, b) = kl_step(st, &b_e, ScoreColumn::Evm, &cal, 1.0).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn kl_degenerate_batch_uses_sigma_floor() {
        let cal = raw_cal((0.8, 0.2), (0.5, 0.1), 0.0);
        let b = batch(1, &[0.5; 5], &[0.5; 5]);
        let st = PolicyState::initial(PolicyStateKind::KlD);
        let (_, s) = kl_step(st, &b, ScoreColumn::Softmax, &cal, 1.0).unwrap();
        let expected = gaussian_kl(
            GaussianParams::new(0.5, SIGMA_FLOOR).unwrap(),
            cal.softmax,
        );
        assert_abs_diff_eq!(s.value, expected, epsilon = 1e-9);
    }

    #[test]
    fn bivariate_zero_at_calibration_and_reference_value() {
        let cal = raw_cal((0.9, 0.1), (0.8, 0.2), 0.3);
        // Construct a batch whose raw moments and correlation match another
        // parameter set exactly is fiddly; check the step against the formula
        // by feeding the formula the batch's fitted params.
        let b = batch(1, &[0.7, 0.8, 0.9, 0.85, 0.75], &[0.5, 0.7, 0.9, 0.6, 0.8]);
        let st = PolicyState::initial(PolicyStateKind::KlD);
        let (_, s) = bivariate_kl_step(st, &b, &cal, 1.0).unwrap();
        let (m1, s1) = sample_moments(&b.softmax_column()).unwrap();
        let (m2, s2) = sample_moments(&b.evm_column()).unwrap();
        let rho = pearson_correlation(&b.softmax_column(), &b.evm_column()).unwrap();
        let expected = bivariate_kl(
            BivariateGaussianParams::new(m1, m2, s1, s2, rho).unwrap(),
            BivariateGaussianParams::new(0.9, 0.8, 0.1, 0.2, 0.3).unwrap(),
        );
        assert_abs_diff_eq!(s.value, expected, epsilon = 1e-12);
    }

    #[test]
    fn ond_hand_trace() {
        let b = batch(1, &[0.5; 4], &[0.9, 0.2, 0.1, 0.95]);
        let st = PolicyState::initial(PolicyStateKind::OndEps);
        let (v, s) = ond_step(st, &b, 0.5, 0.05, 0.1).unwrap();
        assert_abs_diff_eq!(s.value, 0.15, epsilon = 1e-12);
        assert_eq!(v, Verdict::Unreliable);
    }

    #[test]
    fn ond_all_confident_keeps_state() {
        let b = batch(1, &[0.5; 4], &[0.6, 0.9, 0.55, 1.0]);
        let st = PolicyState::initial(PolicyStateKind::OndEps);
        let (v, s) = ond_step(st, &b, 0.5, 0.05, 0.1).unwrap();
        assert_eq!(s.value, 0.0);
        assert_eq!(v, Verdict::Reliable);
    }

    #[test]
    fn ond_all_zero_extreme() {
        let b = batch(1, &[0.5; 4], &[0.0; 4]);
        let st = PolicyState::initial(PolicyStateKind::OndEps);
        let (_, s) = ond_step(st, &b, 0.5, 0.0, 0.1).unwrap();
        assert_abs_diff_eq!(s.value, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn ond_rho_hat_monotone() {
        let b = batch(1, &[0.5; 4], &[0.9, 0.2, 0.1, 0.95]);
        let st = PolicyState::initial(PolicyStateKind::OndEps);
        let (v_low, _) = ond_step(st, &b, 0.5, 0.0, 0.2).unwrap();
        let (v_high, _) = ond_step(st, &b, 0.5, 0.5, 0.2).unwrap();
        // Increasing rho_hat can only move toward Reliable.
        assert!(!(v_low == Verdict::Reliable && v_high == Verdict::Unreliable));
    }

    #[test]
    fn run_policy_detects_collapsed_second_half() {
        let mut records = Vec::new();
        for i in 0..200 {
            let evm = if i < 100 { 0.95 } else { 0.0 };
            records.push(ScoreRecord::new(format!("s{i}"), 0.9, evm, None).unwrap());
        }
        let batches = batch_stream(records, 20).unwrap();
        let config = PolicyConfig {
            variant: PolicyVariant::Ond,
            tolerance: 0.1,
            calibration: None,
            ond: Some(OndParams { delta: 0.5, rho_hat: 0.0 }),
        };
        let run = run_policy(&config, &batches).unwrap();
        assert_eq!(run.detection_index, Some(6));
        // Reliable prefix then Unreliable suffix.
        let first_bad = run.verdicts.iter().position(|v| *v == Verdict::Unreliable).unwrap();
        assert!(run.verdicts[..first_bad].iter().all(|v| *v == Verdict::Reliable));
        assert!(run.verdicts[first_bad..].iter().all(|v| *v == Verdict::Unreliable));
    }

    #[test]
    fn trace_detection_matches_step_detection() {
        let mut records = Vec::new();
        for i in 0..200 {
            let evm = if i < 120 { 0.95 } else { 0.2 };
            records.push(ScoreRecord::new(format!("s{i}"), 0.9, evm, None).unwrap());
        }
        let batches = batch_stream(records, 20).unwrap();
        let config = PolicyConfig {
            variant: PolicyVariant::Ond,
            tolerance: 0.05,
            calibration: None,
            ond: Some(OndParams { delta: 0.5, rho_hat: 0.0 }),
        };
        let run = run_policy(&config, &batches).unwrap();
        assert_eq!(
            detection_from_trace(PolicyStateKind::OndEps, &run.state_trace, config.tolerance),
            run.detection_index
        );
    }

    #[test]
    fn calibrate_rejects_degenerate_inputs() {
        let same: Vec<ScoreRecord> = (0..10)
            .map(|i| ScoreRecord::new(format!("s{i}"), 0.5, 0.5, None).unwrap())
            .collect();
        assert!(calibrate(&same, FitMethod::RawMoments).is_err());

        // Perfectly correlated columns violate |corr| < 1.
        let corr: Vec<ScoreRecord> = (1..=10)
            .map(|i| {
                let v = i as f64 / 20.0;
                ScoreRecord::new(format!("s{i}"), v, v, None).unwrap()
            })
            .collect();
        assert!(calibrate(&corr, FitMethod::RawMoments).is_err());
    }

    #[test]
    fn calibrate_recovers_simple_moments() {
        let records: Vec<ScoreRecord> = [(0.2, 0.9), (0.4, 0.5), (0.6, 0.8), (0.8, 0.2)]
            .iter()
            .enumerate()
            .map(|(i, &(s, e))| ScoreRecord::new(format!("s{i}"), s, e, None).unwrap())
            .collect();
        let cal = calibrate(&records, FitMethod::RawMoments).unwrap();
        assert_abs_diff_eq!(cal.softmax.mu, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(cal.softmax.sigma, 0.05f64.sqrt(), epsilon = 1e-12);
        assert!(cal.corr_r.abs() < 1.0);
    }

    #[test]
    fn kl_policy_requires_calibration() {
        let config = PolicyConfig {
            variant: PolicyVariant::KlSoftmax,
            tolerance: 0.1,
            calibration: None,
            ond: None,
        };
        assert!(config.validate().is_err());
    }
}
