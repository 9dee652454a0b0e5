//! Marginal and conditional calibration, dispersion, and the binomial
//! aggregation rule that yields the final uncertainty-quantification verdict.
//!
//! The safety-critical calibration requirement is one-sided: the observed
//! coverage of the central `p`-interval must reach `p * (1 - eps)` on every
//! grid point. Dispersion is checked through the probability integral
//! transform, whose variance must not exceed the uniform variance 1/12 by
//! more than the tolerated margin: overdispersion is acceptable,
//! underdispersion is not.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CertDataset;
use crate::dist::{binomial_pmf, invcdf_interval, PredictiveDistribution};
use crate::error::{Error, Result};
use crate::report::{FeatureRef, SubgroupRef, TestOutcome};

/// The probability grid 0.05, 0.10, ..., 1.00. The final point trivially
/// passes and is kept for curve plotting.
pub fn probability_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 * 0.05).collect()
}

/// Observed coverage frequencies over the probability grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub ps: Vec<f64>,
    pub observed_frequencies: Vec<f64>,
    pub n: usize,
}

impl CalibrationCurve {
    /// CSV with columns p,observed_frequency.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("p,observed_frequency\n");
        for (p, f) in self.ps.iter().zip(&self.observed_frequencies) {
            out.push_str(&format!("{p},{f}\n"));
        }
        out
    }
}

/// Coverage of the central intervals at every grid probability.
pub fn compute_calibration_curve(
    preds: &[PredictiveDistribution],
    obs: &[f64],
) -> Result<CalibrationCurve> {
    if preds.is_empty() {
        return Err(Error::invalid("calibration requires at least one sample"));
    }
    if preds.len() != obs.len() {
        return Err(Error::shape(format!(
            "predictions ({}) and observations ({}) disagree",
            preds.len(),
            obs.len()
        )));
    }
    let ps = probability_grid();
    let counts = preds
        .par_iter()
        .zip(obs.par_iter())
        .map(|(pred, &y)| {
            let mut mask = 0u32;
            for (idx, &p) in ps.iter().enumerate() {
                let inside = if p >= 1.0 {
                    true
                } else {
                    invcdf_interval(pred, p).map(|iv| iv.contains(y)).unwrap_or(false)
                };
                if inside {
                    mask |= 1 << idx;
                }
            }
            mask
        })
        .fold(
            || vec![0u64; ps.len()],
            |mut acc, mask| {
                for (idx, slot) in acc.iter_mut().enumerate() {
                    *slot += u64::from(mask >> idx & 1);
                }
                acc
            },
        )
        .reduce(
            || vec![0u64; ps.len()],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
    let n = obs.len();
    let observed_frequencies = counts.iter().map(|&c| c as f64 / n as f64).collect();
    Ok(CalibrationCurve { ps, observed_frequencies, n })
}

/// Marginal calibration test: every observed frequency must reach
/// `p * (1 - eps)`.
pub fn test_calibration_curve(
    preds: &[PredictiveDistribution],
    obs: &[f64],
    eps: f64,
) -> Result<TestOutcome> {
    let curve = compute_calibration_curve(preds, obs)?;
    Ok(test_calibration_curve_from(&curve, eps))
}

/// Same test evaluated on an already computed curve.
pub fn test_calibration_curve_from(curve: &CalibrationCurve, eps: f64) -> TestOutcome {
    let mut passed = true;
    let mut min_margin = f64::INFINITY;
    let mut worst_p = f64::NAN;
    for (&p, &f) in curve.ps.iter().zip(&curve.observed_frequencies) {
        let margin = f - p * (1.0 - eps);
        if margin < min_margin {
            min_margin = margin;
            worst_p = p;
        }
        if f < p * (1.0 - eps) {
            passed = false;
        }
    }
    TestOutcome::new("calibration_curve", passed)
        .with_stat("eps", eps)
        .with_stat("n", curve.n as f64)
        .with_stat("min_margin", min_margin)
        .with_stat("worst_p", worst_p)
}

/// Probability integral transform: `cdf(pred_i, obs_i)` element-wise.
pub fn pit_values(preds: &[PredictiveDistribution], obs: &[f64]) -> Result<Vec<f64>> {
    if preds.len() != obs.len() {
        return Err(Error::shape(format!(
            "predictions ({}) and observations ({}) disagree",
            preds.len(),
            obs.len()
        )));
    }
    Ok(preds.iter().zip(obs).map(|(p, &y)| p.cdf(y)).collect())
}

/// Sample variance (n - 1 denominator).
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0)
}

/// Dispersion test: PIT variance must not exceed `(1/12) * (1 + eps)`.
pub fn test_dispersion(
    preds: &[PredictiveDistribution],
    obs: &[f64],
    eps: f64,
) -> Result<TestOutcome> {
    if preds.len() < 2 {
        return Err(Error::invalid("dispersion test requires at least two samples"));
    }
    let pits = pit_values(preds, obs)?;
    let variance = sample_variance(&pits);
    let threshold = (1.0 / 12.0) * (1.0 + eps);
    Ok(TestOutcome::new("dispersion", variance <= threshold)
        .with_stat("pit_variance", variance)
        .with_stat("threshold", threshold)
        .with_stat("eps", eps)
        .with_stat("n", preds.len() as f64))
}

/// Equal-width PIT histogram over [0, 1]: (bin_lo, bin_hi, count).
pub fn pit_histogram(pits: &[f64], n_bins: usize) -> Vec<(f64, f64, u64)> {
    let mut counts = vec![0u64; n_bins.max(1)];
    let n_bins = counts.len();
    for &u in pits {
        let b = ((u * n_bins as f64) as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(b, &c)| (b as f64 / n_bins as f64, (b + 1) as f64 / n_bins as f64, c))
        .collect()
}

/// One subgroup: record indices plus the covered feature value range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Subgroup {
    pub indices: Vec<usize>,
    pub value_lo: f64,
    pub value_hi: f64,
}

/// Consecutive subgroups of at least `n_min` records after sorting by one
/// semantic feature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubgroupPartition {
    pub feature: FeatureRef,
    pub groups: Vec<Subgroup>,
    /// True when the dataset was smaller than `n_min` and a single
    /// undersized group was returned.
    pub undersized: bool,
}

fn feature_value(dataset: &CertDataset, feature: FeatureRef, record: usize) -> Result<f64> {
    let r = &dataset.records[record];
    match feature {
        FeatureRef::Content(i) => r
            .v_content
            .get(i)
            .copied()
            .ok_or_else(|| Error::shape(format!("content feature {i} out of range"))),
        FeatureRef::Style(j) => r
            .v_style
            .get(j)
            .ok_or_else(|| Error::shape(format!("style feature {j} out of range")))?
            .ok_or_else(|| Error::invalid(format!("style feature {j} unlabeled in record {}", r.id))),
    }
}

/// Sorts records by one semantic feature and chunks them into consecutive
/// groups of `n_min`; a short remainder is merged into the last full group.
/// Datasets smaller than `n_min` yield a single group flagged as undersized.
pub fn partition_subgroups(
    dataset: &CertDataset,
    feature: FeatureRef,
    n_min: usize,
) -> Result<SubgroupPartition> {
    if n_min < 1 {
        return Err(Error::invalid("n_min must be >= 1"));
    }
    let n = dataset.len();
    let values: Vec<f64> = (0..n)
        .map(|i| feature_value(dataset, feature, i))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ties deterministic.
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));

    let n_groups = (n / n_min).max(1);
    let undersized = n < n_min;
    let mut groups = Vec::with_capacity(n_groups);
    for g in 0..n_groups {
        let start = g * n_min;
        let end = if g + 1 == n_groups { n } else { start + n_min };
        let indices: Vec<usize> = order[start..end].to_vec();
        let value_lo = values[indices[0]];
        let value_hi = values[*indices.last().expect("non-empty group")];
        groups.push(Subgroup { indices, value_lo, value_hi });
    }
    Ok(SubgroupPartition { feature, groups, undersized })
}

/// Counts from conditional calibration: total subgroup tests executed and
/// failures per family.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionalCounts {
    pub n_tests: u64,
    pub n_fail_calibration: u64,
    pub n_fail_dispersion: u64,
}

/// Conditional calibration result for one output dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionalResult {
    pub output_index: usize,
    pub counts: ConditionalCounts,
    /// Per-subgroup outcomes, ordered by (feature, subgroup index).
    pub outcomes: Vec<(TestOutcome, TestOutcome)>,
}

/// Runs calibration and dispersion per subgroup per semantic feature
/// (content and fully labeled style) for one output dimension.
pub fn test_conditional_calibration(
    dataset: &CertDataset,
    output_index: usize,
    n_min: usize,
    eps: f64,
) -> Result<ConditionalResult> {
    let preds = dataset.predictions(output_index)?;
    let obs = dataset.observations(output_index)?;

    let mut features: Vec<FeatureRef> =
        (0..dataset.schema.content_dims).map(FeatureRef::Content).collect();
    features.extend(dataset.fully_labeled_style_features().into_iter().map(FeatureRef::Style));

    let mut jobs = Vec::new();
    for feature in features {
        let partition = partition_subgroups(dataset, feature, n_min)?;
        for (g, group) in partition.groups.into_iter().enumerate() {
            jobs.push((feature, g, group));
        }
    }

    let outcomes: Vec<(TestOutcome, TestOutcome)> = jobs
        .par_iter()
        .map(|(feature, g, group)| {
            let sub_preds: Vec<PredictiveDistribution> =
                group.indices.iter().map(|&i| preds[i].clone()).collect();
            let sub_obs: Vec<f64> = group.indices.iter().map(|&i| obs[i]).collect();
            let subgroup = SubgroupRef {
                feature: *feature,
                subgroup_index: *g,
                value_lo: group.value_lo,
                value_hi: group.value_hi,
                size: group.indices.len(),
            };
            let calib = test_calibration_curve(&sub_preds, &sub_obs, eps)
                .map(|o| o.with_subgroup(subgroup.clone()))?;
            let disp = test_dispersion(&sub_preds, &sub_obs, eps)
                .map(|o| o.with_subgroup(subgroup))?;
            Ok((calib, disp))
        })
        .collect::<Result<_>>()?;

    let mut counts = ConditionalCounts::default();
    for (calib, disp) in &outcomes {
        counts.n_tests += 1;
        if !calib.passed {
            counts.n_fail_calibration += 1;
        }
        if !disp.passed {
            counts.n_fail_dispersion += 1;
        }
    }

    Ok(ConditionalResult { output_index, counts, outcomes })
}

/// Binomial acceptance rule: with per-test failure probability `p_fail`,
/// `n_fail` failures out of `n_tests` are tolerable when either the failure
/// fraction stays at or below `p_fail` or the binomial pmf of the observed
/// count is still at least `thresh`.
pub fn test_probability_n_fails(
    n_tests: u64,
    n_fail: u64,
    p_fail: f64,
    thresh: f64,
) -> Result<TestOutcome> {
    if n_fail > n_tests {
        return Err(Error::invalid(format!(
            "n_fail ({n_fail}) must be <= n_tests ({n_tests})"
        )));
    }
    let pmf = binomial_pmf(n_tests, p_fail, n_fail)?;
    let within_rate = n_fail as f64 <= n_tests as f64 * p_fail;
    let passed = within_rate || pmf >= thresh;
    Ok(TestOutcome::new("probability_n_fails", passed)
        .with_stat("n_tests", n_tests as f64)
        .with_stat("n_fail", n_fail as f64)
        .with_stat("p_fail", p_fail)
        .with_stat("thresh", thresh)
        .with_stat("pmf", pmf))
}

/// Tunable parameters of the certification run. Defaults mirror the
/// recommended settings: 10% margin, subgroups of 10'000, 1% per-test
/// failure probability, 0.1% pmf threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UqParams {
    pub eps: f64,
    pub n_min: usize,
    pub p_fail: f64,
    pub thresh: f64,
    /// Also condition on pairs of semantic features (needs large samples).
    pub pairwise_conditioning: bool,
}

impl Default for UqParams {
    fn default() -> Self {
        UqParams {
            eps: 0.10,
            n_min: 10_000,
            p_fail: 0.01,
            thresh: 0.001,
            pairwise_conditioning: false,
        }
    }
}

impl UqParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.eps) {
            return Err(Error::invalid("eps must be in [0,1)"));
        }
        if self.n_min < 1 {
            return Err(Error::invalid("n_min must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.p_fail) || !(0.0..=1.0).contains(&self.thresh) {
            return Err(Error::invalid("p_fail and thresh must be probabilities"));
        }
        Ok(())
    }
}

/// Diagnostics for one output dimension of the marginal stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginalDiagnostics {
    pub output_index: usize,
    pub calibration: TestOutcome,
    pub dispersion: TestOutcome,
    pub curve: CalibrationCurve,
    pub pit_variance: f64,
    pub pit_histogram: Vec<(f64, f64, u64)>,
}

/// The complete uncertainty-quantification certification verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UqCertification {
    pub certified: bool,
    /// True when no predictions were present and nothing ran.
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip_reason: Option<String>,
    pub marginal: Vec<MarginalDiagnostics>,
    pub conditional: Vec<ConditionalResult>,
    pub aggregate_calibration: Option<TestOutcome>,
    pub aggregate_dispersion: Option<TestOutcome>,
    /// Subgroups whose calibration or dispersion test failed.
    pub failing_subgroups: Vec<SubgroupRef>,
}

/// Runs the full verdict: marginal calibration and dispersion must pass for
/// every output dimension, and the conditional failure counts (aggregated
/// over output dimensions) must satisfy the binomial acceptance rule for
/// both families.
pub fn certify_uncertainty_quantification(
    dataset: &CertDataset,
    params: &UqParams,
) -> Result<UqCertification> {
    params.validate()?;
    if !dataset.has_predictions() {
        return Ok(UqCertification {
            certified: false,
            skipped: true,
            skip_reason: Some("skipped: no predictions".into()),
            marginal: Vec::new(),
            conditional: Vec::new(),
            aggregate_calibration: None,
            aggregate_dispersion: None,
            failing_subgroups: Vec::new(),
        });
    }

    let mut marginal = Vec::new();
    let mut all_marginal_pass = true;
    for output_index in 0..dataset.schema.output_dims {
        let preds = dataset.predictions(output_index)?;
        let obs = dataset.observations(output_index)?;
        let curve = compute_calibration_curve(&preds, &obs)?;
        let calibration = test_calibration_curve_from(&curve, params.eps);
        let dispersion = test_dispersion(&preds, &obs, params.eps)?;
        let pits = pit_values(&preds, &obs)?;
        let pit_variance = sample_variance(&pits);
        all_marginal_pass &= calibration.passed && dispersion.passed;
        marginal.push(MarginalDiagnostics {
            output_index,
            calibration,
            dispersion,
            curve,
            pit_variance,
            pit_histogram: pit_histogram(&pits, 20),
        });
    }

    let mut conditional = Vec::new();
    let mut totals = ConditionalCounts::default();
    for output_index in 0..dataset.schema.output_dims {
        let result = test_conditional_calibration(dataset, output_index, params.n_min, params.eps)?;
        totals.n_tests += result.counts.n_tests;
        totals.n_fail_calibration += result.counts.n_fail_calibration;
        totals.n_fail_dispersion += result.counts.n_fail_dispersion;
        conditional.push(result);
    }
    if params.pairwise_conditioning {
        for output_index in 0..dataset.schema.output_dims {
            let result = conditional_pairwise(dataset, output_index, params.n_min, params.eps)?;
            totals.n_tests += result.counts.n_tests;
            totals.n_fail_calibration += result.counts.n_fail_calibration;
            totals.n_fail_dispersion += result.counts.n_fail_dispersion;
            conditional.push(result);
        }
    }

    let aggregate_calibration =
        test_probability_n_fails(totals.n_tests, totals.n_fail_calibration, params.p_fail, params.thresh)?;
    let aggregate_dispersion =
        test_probability_n_fails(totals.n_tests, totals.n_fail_dispersion, params.p_fail, params.thresh)?;

    let mut failing_subgroups = Vec::new();
    for result in &conditional {
        for (calib, disp) in &result.outcomes {
            if !calib.passed {
                if let Some(sg) = &calib.subgroup {
                    failing_subgroups.push(sg.clone());
                }
            }
            if !disp.passed {
                if let Some(sg) = &disp.subgroup {
                    failing_subgroups.push(sg.clone());
                }
            }
        }
    }

    let certified =
        all_marginal_pass && aggregate_calibration.passed && aggregate_dispersion.passed;

    Ok(UqCertification {
        certified,
        skipped: false,
        skip_reason: None,
        marginal,
        conditional,
        aggregate_calibration: Some(aggregate_calibration),
        aggregate_dispersion: Some(aggregate_dispersion),
        failing_subgroups,
    })
}

// Pairwise conditioning: sort by the first feature into coarse blocks, then
// partition each block by the second feature. Only runs when the sample
// budget allows at least two blocks of two subgroups each.
fn conditional_pairwise(
    dataset: &CertDataset,
    output_index: usize,
    n_min: usize,
    eps: f64,
) -> Result<ConditionalResult> {
    let preds = dataset.predictions(output_index)?;
    let obs = dataset.observations(output_index)?;
    let mut features: Vec<FeatureRef> =
        (0..dataset.schema.content_dims).map(FeatureRef::Content).collect();
    features.extend(dataset.fully_labeled_style_features().into_iter().map(FeatureRef::Style));

    let mut outcomes = Vec::new();
    let mut counts = ConditionalCounts::default();
    let n = dataset.len();
    let blocks = ((n / n_min) as f64).sqrt().floor() as usize;
    if blocks >= 2 {
        for a in 0..features.len() {
            for b in (a + 1)..features.len() {
                let outer = partition_subgroups(dataset, features[a], n / blocks)?;
                for (g_outer, outer_group) in outer.groups.iter().enumerate() {
                    let sub = dataset.subset(&outer_group.indices)?;
                    let inner = partition_subgroups(&sub, features[b], n_min)?;
                    for (g_inner, inner_group) in inner.groups.iter().enumerate() {
                        if inner_group.indices.len() < n_min {
                            continue;
                        }
                        let idx: Vec<usize> =
                            inner_group.indices.iter().map(|&i| outer_group.indices[i]).collect();
                        let sub_preds: Vec<PredictiveDistribution> =
                            idx.iter().map(|&i| preds[i].clone()).collect();
                        let sub_obs: Vec<f64> = idx.iter().map(|&i| obs[i]).collect();
                        let subgroup = SubgroupRef {
                            feature: features[b],
                            subgroup_index: g_outer * inner.groups.len() + g_inner,
                            value_lo: inner_group.value_lo,
                            value_hi: inner_group.value_hi,
                            size: idx.len(),
                        };
                        let calib = test_calibration_curve(&sub_preds, &sub_obs, eps)?
                            .with_subgroup(subgroup.clone());
                        let disp =
                            test_dispersion(&sub_preds, &sub_obs, eps)?.with_subgroup(subgroup);
                        counts.n_tests += 1;
                        if !calib.passed {
                            counts.n_fail_calibration += 1;
                        }
                        if !disp.passed {
                            counts.n_fail_dispersion += 1;
                        }
                        outcomes.push((calib, disp));
                    }
                }
            }
        }
    }
    Ok(ConditionalResult { output_index, counts, outcomes })
}
