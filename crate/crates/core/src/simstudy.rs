//! Seeded synthetic scenario generators and the Monte Carlo minimum
//! sample-size study.
//!
//! All generators are deterministic given (parameters, seed). The
//! conditional-failure scenario uses binomial feature weights (1,4,6,4,1)/16
//! because they reproduce the marginal observation variance of 2 exactly:
//! `1 + sum w_x (x-3)^2 = 2`, so the constant prediction with variance 2 is
//! perfectly marginally matched while being wrong for every single x.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::test_calibration_curve;
use crate::data::{CertDataset, CertRecord, OperatingRange};
use crate::dist::PredictiveDistribution;
use crate::elbo::PairBatch;
use crate::error::{Error, Result};
use crate::seeds::{child_seed, rng_from_seed};

/// Observations N(0,1) with perfect predictions N(0,1); no semantic
/// features.
pub fn gen_perfect_calibration(n: usize, seed: u64) -> Result<CertDataset> {
    if n < 1 {
        return Err(Error::invalid("n must be >= 1"));
    }
    let mut rng = rng_from_seed(seed);
    let pred = PredictiveDistribution::normal(0.0, 1.0)?;
    let records = (0..n)
        .map(|i| CertRecord {
            id: format!("r{i}"),
            v_content: vec![],
            v_style: vec![],
            y_obs: vec![rng.sample::<f64, _>(StandardNormal)],
            y_pred: Some(vec![pred.clone()]),
            latents: None,
        })
        .collect();
    CertDataset::from_records(records)
}

/// The marginal-versus-conditional failure scenario. The semantic feature x
/// takes values 1..5 with weights (1,4,6,4,1)/16; observations follow
/// N(x-3, 1) while the model constantly predicts N(0, variance 2). Marginal
/// calibration is perfect; conditioning on x = 1 (or 5) exposes the failure.
pub fn gen_conditional_failure(n: usize, seed: u64) -> Result<CertDataset> {
    if n < 1 {
        return Err(Error::invalid("n must be >= 1"));
    }
    let mut rng = rng_from_seed(seed);
    // Variance 2 -> sigma = sqrt(2).
    let pred = PredictiveDistribution::normal(0.0, 2.0f64.sqrt())?;
    let cumulative = [1.0, 5.0, 11.0, 15.0, 16.0]; // weights (1,4,6,4,1)
    let records = (0..n)
        .map(|i| {
            let u: f64 = rng.random_range(0.0..16.0);
            let x = 1 + cumulative.iter().take_while(|&&c| u >= c).count();
            let y = (x as f64 - 3.0) + rng.sample::<f64, _>(StandardNormal);
            CertRecord {
                id: format!("r{i}"),
                v_content: vec![x as f64],
                v_style: vec![],
                y_obs: vec![y],
                y_pred: Some(vec![pred.clone()]),
                latents: None,
            }
        })
        .collect();
    CertDataset::from_records(records)
}

/// Time-varying forecast scenario: per step, mu_t ~ N(0, variance 2),
/// observation ~ N(mu_t, 1), prediction always N(0, variance 3).
pub fn gen_time_varying_forecast(t_steps: usize, seed: u64) -> Result<CertDataset> {
    if t_steps < 1 {
        return Err(Error::invalid("T must be >= 1"));
    }
    let mut rng = rng_from_seed(seed);
    let pred = PredictiveDistribution::normal(0.0, 3.0f64.sqrt())?;
    let sd_mu = 2.0f64.sqrt();
    let records = (0..t_steps)
        .map(|i| {
            let mu_t = sd_mu * rng.sample::<f64, _>(StandardNormal);
            let y = mu_t + rng.sample::<f64, _>(StandardNormal);
            CertRecord {
                id: format!("t{i}"),
                v_content: vec![],
                v_style: vec![],
                y_obs: vec![y],
                y_pred: Some(vec![pred.clone()]),
                latents: None,
            }
        })
        .collect();
    CertDataset::from_records(records)
}

/// Configuration of the toy disentangled-data generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyGenConfig {
    pub n_pairs: usize,
    pub content_dims: usize,
    pub style_dims: usize,
    /// Content priors Uniform[a_i, b_i]; defaults to [-1, 1] per dimension.
    pub ranges: Option<OperatingRange>,
    /// Observation dimension; defaults to content + style + 2.
    pub input_dim: Option<usize>,
    /// Additive observation noise.
    pub noise_sd: f64,
    pub seed: u64,
}

impl ToyGenConfig {
    pub fn new(n_pairs: usize, content_dims: usize, style_dims: usize, seed: u64) -> Self {
        ToyGenConfig {
            n_pairs,
            content_dims,
            style_dims,
            ranges: None,
            input_dim: None,
            noise_sd: 0.05,
            seed,
        }
    }
}

/// A generated weakly-supervised toy problem with known ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyProblem {
    pub batch: PairBatch,
    /// Ground-truth factors per pair side, content first then style.
    pub factors_lhs: Vec<Vec<f64>>,
    pub factors_rhs: Vec<Vec<f64>>,
    pub ranges: OperatingRange,
    /// Observation mixing matrix, row-major input_dim x (k + l).
    pub mixing: Vec<Vec<f64>>,
    pub content_dims: usize,
    pub style_dims: usize,
}

/// Generates pairs that share exactly one content factor: v_c ~ Uniform over
/// the operating range, v_s ~ N(0,1); observations are `A v + noise` for a
/// fixed random full-rank mixing matrix A.
pub fn gen_toy_disentangled(cfg: &ToyGenConfig) -> Result<ToyProblem> {
    if cfg.content_dims < 1 {
        return Err(Error::invalid("need at least one content dimension"));
    }
    if cfg.n_pairs < 1 {
        return Err(Error::invalid("need at least one pair"));
    }
    let k = cfg.content_dims;
    let l = cfg.style_dims;
    let ranges = match &cfg.ranges {
        Some(r) => {
            if r.dims() != k {
                return Err(Error::shape(format!(
                    "operating range has {} dims for k = {k}",
                    r.dims()
                )));
            }
            r.clone()
        }
        None => OperatingRange::new(vec![-1.0; k], vec![1.0; k])?,
    };
    let input_dim = cfg.input_dim.unwrap_or(k + l + 2);
    if input_dim < k + l {
        return Err(Error::invalid(format!(
            "input_dim {input_dim} cannot be below factor count {}",
            k + l
        )));
    }

    let mut rng = rng_from_seed(child_seed(cfg.seed, 0xA));
    // Full-rank mixing matrix: resample until comfortably conditioned.
    let mixing = loop {
        let m = nalgebra::DMatrix::from_fn(input_dim, k + l, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let (lo, _) = crate::lipschitz::singular_value_bounds(&m)?;
        if lo > 0.2 {
            break m;
        }
    };

    let mut data_rng = rng_from_seed(child_seed(cfg.seed, 0xB));
    let draw_factors = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let mut v = Vec::with_capacity(k + l);
        for i in 0..k {
            let (a, b) = ranges.bounds(i);
            v.push(rng.random_range(a..b));
        }
        for _ in 0..l {
            v.push(rng.sample::<f64, _>(StandardNormal));
        }
        v
    };

    let observe = |v: &[f64], rng: &mut rand_chacha::ChaCha8Rng, noise: f64| -> Vec<f64> {
        let vv = nalgebra::DVector::from_column_slice(v);
        let x = &mixing * vv;
        x.iter()
            .map(|&xi| xi + noise * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };

    let mut lhs = Vec::with_capacity(cfg.n_pairs);
    let mut rhs = Vec::with_capacity(cfg.n_pairs);
    let mut shared = Vec::with_capacity(cfg.n_pairs);
    let mut factors_lhs = Vec::with_capacity(cfg.n_pairs);
    let mut factors_rhs = Vec::with_capacity(cfg.n_pairs);
    for p in 0..cfg.n_pairs {
        let shared_content = p % k; // cycle so every factor gets equal coverage
        let v_l = draw_factors(&mut data_rng);
        let mut v_r = draw_factors(&mut data_rng);
        v_r[shared_content] = v_l[shared_content];
        lhs.push(observe(&v_l, &mut data_rng, cfg.noise_sd));
        rhs.push(observe(&v_r, &mut data_rng, cfg.noise_sd));
        shared.push(vec![shared_content]);
        factors_lhs.push(v_l);
        factors_rhs.push(v_r);
    }

    Ok(ToyProblem {
        batch: PairBatch { lhs, rhs, shared },
        factors_lhs,
        factors_rhs,
        ranges,
        mixing: (0..input_dim)
            .map(|i| (0..k + l).map(|j| mixing[(i, j)]).collect())
            .collect(),
        content_dims: k,
        style_dims: l,
    })
}

/// One trial of the sample-size study: generate perfectly calibrated data
/// and report whether the calibration test fails.
pub fn run_failure_trial(n_samples: usize, eps: f64, seed: u64) -> Result<bool> {
    let dataset = gen_perfect_calibration(n_samples, seed)?;
    let preds = dataset.predictions(0)?;
    let obs = dataset.observations(0)?;
    let outcome = test_calibration_curve(&preds, &obs, eps)?;
    Ok(!outcome.passed)
}

/// Failure frequencies over an (eps x n) grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureTable {
    pub n_grid: Vec<usize>,
    pub eps_grid: Vec<f64>,
    /// `frequencies[e][n]` = failure frequency at eps_grid[e], n_grid[n].
    pub frequencies: Vec<Vec<f64>>,
    pub n_trials: usize,
}

impl FailureTable {
    /// CSV table: rows = eps, columns = n.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("eps");
        for n in &self.n_grid {
            out.push_str(&format!(",n={n}"));
        }
        out.push('\n');
        for (e, eps) in self.eps_grid.iter().enumerate() {
            out.push_str(&format!("{eps}"));
            for f in &self.frequencies[e] {
                out.push_str(&format!(",{f}"));
            }
            out.push('\n');
        }
        out
    }

    /// Smallest n whose failure frequency is at or below `target` for the
    /// given eps, if any.
    pub fn recommend_n(&self, eps: f64, target: f64) -> Option<usize> {
        let e = self.eps_grid.iter().position(|&x| (x - eps).abs() < 1e-12)?;
        self.n_grid
            .iter()
            .zip(&self.frequencies[e])
            .find(|(_, &f)| f <= target)
            .map(|(&n, _)| n)
    }
}

/// Monte Carlo failure-frequency table. Trials run in parallel with
/// per-trial seeds split from the master seed, so the result does not depend
/// on scheduling.
pub fn compute_failure_table(
    n_grid: &[usize],
    eps_grid: &[f64],
    n_trials: usize,
    seed: u64,
) -> Result<FailureTable> {
    if n_grid.is_empty() || eps_grid.is_empty() {
        return Err(Error::invalid("grids must be non-empty"));
    }
    if n_trials < 1 {
        return Err(Error::invalid("n_trials must be >= 1"));
    }
    let mut frequencies = Vec::with_capacity(eps_grid.len());
    for (e_idx, &eps) in eps_grid.iter().enumerate() {
        let mut row = Vec::with_capacity(n_grid.len());
        for (n_idx, &n) in n_grid.iter().enumerate() {
            let cell_tag = (e_idx as u64) << 32 | n_idx as u64;
            let failures: u64 = (0..n_trials)
                .into_par_iter()
                .map(|trial| {
                    let trial_seed =
                        child_seed(seed, cell_tag.wrapping_mul(1_000_003) ^ trial as u64);
                    run_failure_trial(n, eps, trial_seed).map(u64::from)
                })
                .try_reduce(|| 0, |a, b| Ok(a + b))?;
            row.push(failures as f64 / n_trials as f64);
        }
        frequencies.push(row);
    }
    Ok(FailureTable {
        n_grid: n_grid.to_vec(),
        eps_grid: eps_grid.to_vec(),
        frequencies,
        n_trials,
    })
}

/// The published study grid: n = 10^1..10^5, eps in {5%, 10%, 20%}.
pub fn default_study_grid() -> (Vec<usize>, Vec<f64>) {
    (vec![10, 100, 1_000, 10_000, 100_000], vec![0.05, 0.10, 0.20])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{
        compute_calibration_curve, pit_values, sample_variance, test_dispersion,
    };

    #[test]
    fn generators_are_deterministic() {
        let a = gen_perfect_calibration(5, 42).unwrap();
        let b = gen_perfect_calibration(5, 42).unwrap();
        assert_eq!(a, b);
        let c = gen_conditional_failure(50, 7).unwrap();
        let d = gen_conditional_failure(50, 7).unwrap();
        assert_eq!(c, d);
        let e = gen_time_varying_forecast(50, 9).unwrap();
        let f = gen_time_varying_forecast(50, 9).unwrap();
        assert_eq!(e, f);
    }

    #[test]
    fn perfect_calibration_statistics() {
        let ds = gen_perfect_calibration(100_000, 1).unwrap();
        let preds = ds.predictions(0).unwrap();
        let obs = ds.observations(0).unwrap();
        let pits = pit_values(&preds, &obs).unwrap();
        let v = sample_variance(&pits);
        assert!((v - 1.0 / 12.0).abs() < 0.002, "PIT variance {v}");
        let curve = compute_calibration_curve(&preds, &obs).unwrap();
        for (p, f) in curve.ps.iter().zip(&curve.observed_frequencies) {
            assert!((p - f).abs() < 0.01, "p={p} f={f}");
        }
    }

    #[test]
    fn conditional_failure_weights_and_marginal_variance() {
        let ds = gen_conditional_failure(200_000, 3).unwrap();
        let mut counts = [0usize; 5];
        for r in &ds.records {
            counts[r.v_content[0] as usize - 1] += 1;
        }
        let expect = [1.0, 4.0, 6.0, 4.0, 1.0];
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / ds.len() as f64;
            assert!((freq - expect[i] / 16.0).abs() < 0.01, "x={} freq {freq}", i + 1);
        }
        // Analytic identity: total variance 1 + sum w (x-3)^2 = 2.
        let analytic: f64 =
            1.0 + expect.iter().enumerate().map(|(i, w)| w / 16.0 * ((i as f64 + 1.0) - 3.0).powi(2)).sum::<f64>();
        assert_eq!(analytic, 2.0);
        let obs = ds.observations(0).unwrap();
        assert!((sample_variance(&obs) - 2.0).abs() < 0.03);
    }

    #[test]
    fn time_varying_forecast_is_marginally_calibrated() {
        let ds = gen_time_varying_forecast(100_000, 5).unwrap();
        let preds = ds.predictions(0).unwrap();
        let obs = ds.observations(0).unwrap();
        let pits = pit_values(&preds, &obs).unwrap();
        assert!((sample_variance(&pits) - 1.0 / 12.0).abs() < 0.003);
        assert!(test_dispersion(&preds, &obs, 0.10).unwrap().passed);
    }

    #[test]
    fn toy_pairs_share_exactly_their_annotated_factor() {
        let problem = gen_toy_disentangled(&ToyGenConfig::new(200, 2, 1, 11)).unwrap();
        for p in 0..problem.batch.len() {
            let s = problem.batch.shared[p][0];
            assert_eq!(problem.factors_lhs[p][s], problem.factors_rhs[p][s]);
            for d in 0..problem.content_dims + problem.style_dims {
                if d != s {
                    assert_ne!(problem.factors_lhs[p][d], problem.factors_rhs[p][d]);
                }
            }
        }
    }

    #[test]
    fn toy_factor_recovery_by_ols() {
        // OLS from x back to each factor is essentially exact at low noise.
        let mut cfg = ToyGenConfig::new(400, 2, 1, 13);
        cfg.noise_sd = 0.01;
        let problem = gen_toy_disentangled(&cfg).unwrap();
        let n = problem.batch.len();
        let d = problem.batch.lhs[0].len();
        let design = nalgebra::DMatrix::from_fn(n, d, |i, j| problem.batch.lhs[i][j]);
        for factor in 0..3 {
            let target = nalgebra::DVector::from_fn(n, |i, _| problem.factors_lhs[i][factor]);
            let fit = crate::linear::fit_ols(&design, &target).unwrap();
            let fitted = &design * nalgebra::DVector::from_column_slice(&fit.betas[..d])
                + nalgebra::DVector::from_element(n, fit.betas[d]);
            let mse: f64 =
                (&fitted - &target).iter().map(|e| e * e).sum::<f64>() / n as f64;
            assert!(mse < 1e-3, "factor {factor} recovery mse {mse}");
        }
    }

    #[test]
    fn toy_content_marginals_are_uniform() {
        let mut cfg = ToyGenConfig::new(10_000, 1, 0, 17);
        cfg.ranges = Some(OperatingRange::new(vec![-10.0], vec![10.0]).unwrap());
        let problem = gen_toy_disentangled(&cfg).unwrap();
        // KS distance of scaled content values against U(0,1).
        let mut u: Vec<f64> = problem
            .factors_lhs
            .iter()
            .map(|v| (v[0] + 10.0) / 20.0)
            .collect();
        u.sort_by(f64::total_cmp);
        let n = u.len() as f64;
        let ks = u
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                ((i + 1) as f64 / n - x).abs().max((x - i as f64 / n).abs())
            })
            .fold(0.0f64, f64::max);
        assert!(ks < 0.02, "KS distance {ks}");
    }

    #[test]
    fn failure_trial_deterministic_and_extremes_behave() {
        let a = run_failure_trial(100, 0.10, 3).unwrap();
        let b = run_failure_trial(100, 0.10, 3).unwrap();
        assert_eq!(a, b);
        // Huge n, generous eps: essentially never fails.
        let fails: usize = (0..5)
            .filter(|&s| run_failure_trial(100_000, 0.10, s).unwrap())
            .count();
        assert_eq!(fails, 0);
        // Tiny n, tight eps: fails nearly always.
        let fails: usize = (0..20)
            .filter(|&s| run_failure_trial(10, 0.05, s).unwrap())
            .count();
        assert!(fails >= 15, "only {fails}/20 failed");
    }

    #[test]
    fn failure_table_monotone_in_n_and_eps() {
        let table =
            compute_failure_table(&[10, 100, 1_000], &[0.05, 0.10, 0.20], 60, 19).unwrap();
        let tol = 0.15; // Monte Carlo noise at 60 trials
        for row in &table.frequencies {
            for w in row.windows(2) {
                assert!(w[1] <= w[0] + tol, "failure rate should fall with n: {row:?}");
            }
        }
        for n_idx in 0..3 {
            for e in 0..2 {
                assert!(
                    table.frequencies[e + 1][n_idx] <= table.frequencies[e][n_idx] + tol,
                    "failure rate should fall with eps"
                );
            }
        }
        assert_eq!(table.to_csv().lines().count(), 4);
    }
}
