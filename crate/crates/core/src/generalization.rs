//! Feature-combination holdout testing, feature-collapse testing, and
//! ensemble-disagreement reporting.
//!
//! The holdout test withholds records that match a randomly chosen anchor in
//! two randomly chosen semantic features, retrains, and compares holdout
//! error against a plain random-split baseline. The collapse test removes
//! the extremes of one content feature, retrains, and checks that the
//! held-out extremes do not map into the bulk of the training embeddings.

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::model::{train_eval, ModelBackend};
use crate::data::{eval_model_performance, CertDataset};
use crate::error::{Error, Result};
use crate::report::TestOutcome;
use crate::seeds::{child_seed, rng_from_seed};

/// Semantic feature matrix used for holdout filtering: content features plus
/// every style feature labeled in all records.
pub fn feature_matrix(dataset: &CertDataset) -> Vec<Vec<f64>> {
    let style_cols = dataset.fully_labeled_style_features();
    dataset
        .records
        .iter()
        .map(|r| {
            let mut row = r.v_content.clone();
            row.extend(style_cols.iter().map(|&j| r.v_style[j].expect("labeled column")));
            row
        })
        .collect()
}

/// Describes one holdout split: the anchor record and feature pair whose
/// delta-neighbourhood was withheld from training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HoldoutDescriptor {
    pub anchor_record: usize,
    pub feature_i: usize,
    pub feature_j: usize,
    pub anchor_value_i: f64,
    pub anchor_value_j: f64,
    pub delta: f64,
    pub n_test: usize,
}

/// Picks a random anchor and two distinct features; the training set keeps
/// every record that differs from the anchor by more than `delta` in at
/// least one of the two features. Resamples (bounded) when a degenerate
/// split leaves the train or test side empty.
pub fn samples_without_holdout_feature(
    features: &[Vec<f64>],
    delta: f64,
    seed: u64,
) -> Result<(Vec<usize>, HoldoutDescriptor)> {
    if features.is_empty() {
        return Err(Error::invalid("holdout split requires records"));
    }
    let n_features = features[0].len();
    if n_features < 2 {
        return Err(Error::invalid("holdout split requires at least 2 semantic features"));
    }
    if !(delta > 0.0) {
        return Err(Error::invalid("delta must be > 0"));
    }
    let mut rng = rng_from_seed(seed);
    const MAX_RETRIES: usize = 32;
    for _ in 0..MAX_RETRIES {
        let anchor = rng.random_range(0..features.len());
        let i = rng.random_range(0..n_features);
        let mut j = rng.random_range(0..n_features - 1);
        if j >= i {
            j += 1;
        }
        let vi = features[anchor][i];
        let vj = features[anchor][j];
        let train: Vec<usize> = (0..features.len())
            .filter(|&r| {
                !((features[r][i] - vi).abs() <= delta && (features[r][j] - vj).abs() <= delta)
            })
            .collect();
        let n_test = features.len() - train.len();
        if !train.is_empty() && n_test > 0 {
            return Ok((
                train,
                HoldoutDescriptor {
                    anchor_record: anchor,
                    feature_i: i,
                    feature_j: j,
                    anchor_value_i: vi,
                    anchor_value_j: vj,
                    delta,
                    n_test,
                },
            ));
        }
    }
    Err(Error::invalid(format!(
        "could not find a non-degenerate holdout split after {MAX_RETRIES} attempts \
         (delta = {delta} may cover the whole feature range)"
    )))
}

/// Parameters of the feature-combination test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureCombinationParams {
    pub delta: f64,
    pub n_repeat: usize,
    pub margin: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for FeatureCombinationParams {
    fn default() -> Self {
        FeatureCombinationParams {
            delta: 0.2,
            n_repeat: 20,
            margin: 0.1,
            train_fraction: 0.80,
            seed: 0,
        }
    }
}

/// Full result of the feature-combination test, including per-repeat data
/// for the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureCombinationResult {
    pub outcome: TestOutcome,
    pub baseline_mse: f64,
    /// Holdout MSE / baseline MSE per repeat; must not exceed 1 + margin.
    pub repeat_ratios: Vec<f64>,
    pub holdouts: Vec<HoldoutDescriptor>,
}

/// Tests generalization to unseen feature combinations.
///
/// A baseline model is trained on a random `train_fraction` split. Each
/// repeat withholds one delta-neighbourhood of a random feature pair,
/// retrains, and evaluates on the withheld records. The test passes when
/// every holdout MSE stays within `(1 + margin)` of the baseline MSE
/// (performance scores are negative MSE, so this is the "not much worse
/// than baseline" direction).
pub fn test_new_feature_combinations(
    dataset: &CertDataset,
    backend: &dyn ModelBackend,
    params: &FeatureCombinationParams,
) -> Result<FeatureCombinationResult> {
    if !(params.train_fraction > 0.0 && params.train_fraction < 1.0) {
        return Err(Error::invalid("train_fraction must be in (0,1)"));
    }
    if !(params.margin >= 0.0) {
        return Err(Error::invalid("margin must be >= 0"));
    }
    let n = dataset.len();
    let n_train = ((n as f64 * params.train_fraction).round() as usize).clamp(1, n - 1);

    // Baseline: random split without replacement.
    let mut rng = rng_from_seed(child_seed(params.seed, 0xBA5E));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (train_idx, test_idx) = order.split_at(n_train);
    let baseline_perf = split_performance(dataset, backend, train_idx, test_idx)
        .map_err(|e| Error::adapter(format!("baseline split: {e}")))?;
    let baseline_mse = -baseline_perf;

    let features = feature_matrix(dataset);
    let mut repeat_ratios = Vec::with_capacity(params.n_repeat);
    let mut holdouts = Vec::with_capacity(params.n_repeat);
    let mut passed = true;
    for repeat in 0..params.n_repeat {
        let split_seed = child_seed(params.seed, 1 + repeat as u64);
        let (train, descriptor) = samples_without_holdout_feature(&features, params.delta, split_seed)
            .map_err(|e| Error::adapter(format!("repeat {repeat}: {e}")))?;
        let test: Vec<usize> = {
            let train_set: std::collections::BTreeSet<usize> = train.iter().copied().collect();
            (0..n).filter(|i| !train_set.contains(i)).collect()
        };
        let perf = split_performance(dataset, backend, &train, &test)
            .map_err(|e| Error::adapter(format!("repeat {repeat}: {e}")))?;
        let holdout_mse = -perf;
        // Guard against a numerically perfect baseline.
        let ratio = holdout_mse / baseline_mse.max(1e-300);
        if holdout_mse > baseline_mse * (1.0 + params.margin) + 1e-12 {
            passed = false;
        }
        repeat_ratios.push(ratio);
        holdouts.push(descriptor);
    }

    let mut outcome = TestOutcome::new("new_feature_combinations", passed)
        .with_stat("baseline_mse", baseline_mse)
        .with_stat("n_repeat", params.n_repeat as f64)
        .with_stat("margin", params.margin)
        .with_stat("delta", params.delta);
    if let Some(worst) = repeat_ratios.iter().copied().fold(None::<f64>, |acc, r| {
        Some(acc.map_or(r, |a| a.max(r)))
    }) {
        outcome.statistics.insert("worst_ratio".into(), worst);
    }
    if params.n_repeat == 0 {
        outcome = outcome.with_detail("no repeats executed");
    }

    Ok(FeatureCombinationResult { outcome, baseline_mse, repeat_ratios, holdouts })
}

fn split_performance(
    dataset: &CertDataset,
    backend: &dyn ModelBackend,
    train_idx: &[usize],
    test_idx: &[usize],
) -> Result<f64> {
    let train = dataset.subset(train_idx)?;
    let test = dataset.subset(test_idx)?;
    let evaluated = train_eval(backend, &train, &test)?;
    let mut perf_sum = 0.0;
    let mut count = 0usize;
    for j in 0..evaluated.schema.output_dims {
        let preds = evaluated.predictions(j)?;
        let obs = evaluated.observations(j)?;
        perf_sum += eval_model_performance(&preds, &obs)?;
        count += 1;
    }
    Ok(perf_sum / count as f64)
}

/// Linear-interpolation quantile of already sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Feature-collapse test for one content dimension.
///
/// The lowest and highest 10% of records by `v_content[content_index]` are
/// withheld; the backend retrains on the middle 80%. The test passes when
/// fewer than 2% of the held-out embeddings fall inside the [1%, 99%]
/// quantile interval of the training embeddings for that dimension: a
/// faithful encoder maps the extremes outside, a collapsing one folds them
/// in.
pub fn test_no_feature_collapse(
    dataset: &CertDataset,
    backend: &dyn ModelBackend,
    content_index: usize,
) -> Result<TestOutcome> {
    if content_index >= dataset.schema.content_dims {
        return Err(Error::shape(format!(
            "content index {content_index} out of range (k = {})",
            dataset.schema.content_dims
        )));
    }
    let n = dataset.len();
    let cut = n / 10;
    if cut == 0 || n - 2 * cut == 0 {
        return Err(Error::invalid(format!("dataset too small for a 10% trim, n = {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        dataset.records[a].v_content[content_index]
            .total_cmp(&dataset.records[b].v_content[content_index])
    });
    let train_idx: Vec<usize> = order[cut..n - cut].to_vec();
    let eval_idx: Vec<usize> =
        order[..cut].iter().chain(order[n - cut..].iter()).copied().collect();

    let train = dataset.subset(&train_idx)?;
    let eval = dataset.subset(&eval_idx)?;
    let model = backend.train(&train)?;
    let train_embed = model.encode(&train)?;
    let eval_embed = model.encode(&eval)?;

    let mut train_vals: Vec<f64> = train_embed
        .iter()
        .map(|row| {
            row.get(content_index)
                .copied()
                .ok_or_else(|| Error::shape(format!("embedding lacks dimension {content_index}")))
        })
        .collect::<Result<_>>()?;
    train_vals.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&train_vals, 0.01);
    let hi = quantile_sorted(&train_vals, 0.99);

    let inside = eval_embed
        .iter()
        .filter(|row| {
            let v = row[content_index];
            lo <= v && v <= hi
        })
        .count();
    let fraction = inside as f64 / eval_embed.len() as f64;

    Ok(TestOutcome::new("no_feature_collapse", fraction < 0.02)
        .with_stat("fraction_inside", fraction)
        .with_stat("interval_lo", lo)
        .with_stat("interval_hi", hi)
        .with_stat("n_train", train_idx.len() as f64)
        .with_stat("n_eval", eval_idx.len() as f64)
        .with_stat("content_index", content_index as f64))
}

/// Parameters for the ensemble-disagreement report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DisagreementParams {
    /// Variance threshold; choosing it is the caller's duty and must not be
    /// tuned on labeled OOD data.
    pub tau: f64,
    pub expected_fp_rate: f64,
    pub expected_fn_rate: f64,
}

/// Ensemble-disagreement report over a dataset with E-member latents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DisagreementReport {
    pub outcome: TestOutcome,
    /// Maximum across latent dimensions of the variance of member means.
    pub max_variance: Vec<f64>,
    /// Ids whose variance exceeded tau.
    pub flagged_ids: Vec<String>,
    pub n_rejected: usize,
    pub rejection_rate: f64,
    /// Rejections within the "easy" subset, when one was given.
    pub easy_rejections: Option<usize>,
    /// Detections within the labeled OOD subset, when one was given.
    pub ood_detections: Option<usize>,
    pub ood_detection_rate: Option<f64>,
    /// Flagged records outside the labeled OOD subset: the manual
    /// inspection list.
    pub inspection_ids: Vec<String>,
}

/// Per record and latent dimension, computes the variance of member means
/// and compares rejection/detection counts against the configured rates.
///
/// Checks, in order: (a) rejection rate on the full dataset against
/// `expected_fp_rate`; (b) rejections on the easy subset, which must also
/// stay within the false-positive budget; (c) detection rate on the labeled
/// OOD subset against `1 - expected_fn_rate`; (d) the flagged
/// in-distribution records are listed for manual inspection.
pub fn ensemble_disagreement_report(
    dataset: &CertDataset,
    params: &DisagreementParams,
    easy_subset: Option<&[usize]>,
    ood_labeled_subset: Option<&[usize]>,
) -> Result<DisagreementReport> {
    if dataset.schema.ensemble_size < 2 {
        return Err(Error::invalid("disagreement report requires E >= 2 ensemble members"));
    }
    if !(params.tau > 0.0) {
        return Err(Error::invalid("tau must be > 0"));
    }
    let n = dataset.len();
    let mut max_variance = Vec::with_capacity(n);
    let mut flagged = vec![false; n];
    for (i, r) in dataset.records.iter().enumerate() {
        let members = r.latents.as_ref().expect("validated ensemble");
        let dims = members[0].len();
        let e = members.len() as f64;
        let mut worst = 0.0f64;
        for d in 0..dims {
            let mean = members.iter().map(|m| m[d].mu).sum::<f64>() / e;
            let var = members.iter().map(|m| (m[d].mu - mean).powi(2)).sum::<f64>() / e;
            worst = worst.max(var);
        }
        max_variance.push(worst);
        flagged[i] = worst > params.tau;
    }

    let n_rejected = flagged.iter().filter(|&&f| f).count();
    let rejection_rate = n_rejected as f64 / n as f64;
    let fp_ok = rejection_rate <= params.expected_fp_rate;

    let easy_rejections = easy_subset.map(|idx| idx.iter().filter(|&&i| flagged[i]).count());
    let easy_ok = match (easy_subset, easy_rejections) {
        (Some(idx), Some(rej)) if !idx.is_empty() => {
            rej as f64 / idx.len() as f64 <= params.expected_fp_rate
        }
        _ => true,
    };

    let ood_set: Option<std::collections::BTreeSet<usize>> =
        ood_labeled_subset.map(|idx| idx.iter().copied().collect());
    let ood_detections =
        ood_set.as_ref().map(|set| set.iter().filter(|&&i| flagged[i]).count());
    let ood_detection_rate = match (&ood_set, ood_detections) {
        (Some(set), Some(det)) if !set.is_empty() => Some(det as f64 / set.len() as f64),
        _ => None,
    };
    let fn_ok = ood_detection_rate.map_or(true, |rate| 1.0 - rate <= params.expected_fn_rate);

    let mut flagged_ids = Vec::new();
    let mut inspection_ids = Vec::new();
    for (i, r) in dataset.records.iter().enumerate() {
        if flagged[i] {
            flagged_ids.push(r.id.clone());
            if ood_set.as_ref().map_or(true, |set| !set.contains(&i)) {
                inspection_ids.push(r.id.clone());
            }
        }
    }

    let passed = fp_ok && easy_ok && fn_ok;
    let mut outcome = TestOutcome::new("ensemble_disagreement", passed)
        .with_stat("tau", params.tau)
        .with_stat("rejection_rate", rejection_rate)
        .with_stat("expected_fp_rate", params.expected_fp_rate)
        .with_stat("expected_fn_rate", params.expected_fn_rate)
        .with_stat("n_rejected", n_rejected as f64);
    if let Some(rate) = ood_detection_rate {
        outcome.statistics.insert("ood_detection_rate".into(), rate);
    }
    if let Some(rej) = easy_rejections {
        outcome.statistics.insert("easy_rejections".into(), rej as f64);
    }

    Ok(DisagreementReport {
        outcome,
        max_variance,
        flagged_ids,
        n_rejected,
        rejection_rate,
        easy_rejections,
        ood_detections,
        ood_detection_rate,
        inspection_ids,
    })
}
