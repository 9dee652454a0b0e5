//! Ordinary least squares with t-statistics and p-values, plus the
//! disentanglement verification tests built on it.
//!
//! `fit_ols` appends an intercept column internally and solves via QR with
//! column scaling. The 1-to-1 test asserts that each content factor is
//! explained by exactly one latent dimension (intercept excluded) and that
//! no latent explains two factors; the separation test asserts that content
//! latents carry no predictive power for labeled style features.

use nalgebra::{DMatrix, DVector};

use crate::dist::student_t_p_value;
use crate::error::{Error, Result};
use crate::report::TestOutcome;

/// Result of one least-squares fit. Coefficients carry the intercept last.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub betas: Vec<f64>,
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    pub sigma2_hat: f64,
    pub dof: usize,
}

/// Fits `target ~ design + 1` by least squares.
///
/// `design` is n x p without the intercept; it is appended internally, so
/// the returned vectors have length p + 1 with the intercept last.
pub fn fit_ols(design: &DMatrix<f64>, target: &DVector<f64>) -> Result<OlsFit> {
    let n = design.nrows();
    let p = design.ncols();
    if target.len() != n {
        return Err(Error::shape(format!(
            "design has {n} rows but target has {} entries",
            target.len()
        )));
    }
    if n <= p + 1 {
        return Err(Error::invalid(format!(
            "need n > p + 1 observations, got n = {n}, p = {p}"
        )));
    }

    // Intercept last, then scale every column to unit max-abs so the rank
    // test threshold is meaningful.
    let mut x = DMatrix::zeros(n, p + 1);
    x.view_mut((0, 0), (n, p)).copy_from(design);
    for i in 0..n {
        x[(i, p)] = 1.0;
    }
    let mut scales = vec![0.0f64; p + 1];
    for j in 0..=p {
        let s = x.column(j).amax();
        if s == 0.0 || !s.is_finite() {
            return Err(Error::SingularDesign(format!("column {j} is zero or non-finite")));
        }
        scales[j] = s;
        for i in 0..n {
            x[(i, j)] /= s;
        }
    }

    let qr = x.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let pivot_floor = 1e-10 * (n as f64).sqrt();
    for j in 0..=p {
        if r[(j, j)].abs() < pivot_floor {
            return Err(Error::SingularDesign(format!(
                "pivot {j} below threshold ({:.3e})",
                r[(j, j)].abs()
            )));
        }
    }

    let qty = q.transpose() * target;
    let beta_scaled = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::SingularDesign("triangular solve failed".into()))?;

    let residuals = target - &x * &beta_scaled;
    let dof = n - (p + 1);
    let rss: f64 = residuals.iter().map(|e| e * e).sum();
    let sigma2_hat = rss / dof as f64;

    // (X'X)^-1 = R^-1 R^-T in the scaled basis.
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p + 1, p + 1))
        .ok_or_else(|| Error::SingularDesign("triangular inversion failed".into()))?;

    let mut betas = vec![0.0; p + 1];
    let mut t_stats = vec![0.0; p + 1];
    let mut p_values = vec![0.0; p + 1];
    for j in 0..=p {
        let gjj: f64 = (0..=p).map(|c| r_inv[(j, c)] * r_inv[(j, c)]).sum();
        let beta = beta_scaled[j] / scales[j];
        let se_scaled = (sigma2_hat * gjj).sqrt();
        let t = if se_scaled > 0.0 {
            beta_scaled[j] / se_scaled
        } else if beta_scaled[j] == 0.0 {
            0.0
        } else {
            f64::INFINITY * beta_scaled[j].signum()
        };
        betas[j] = beta;
        t_stats[j] = t;
        p_values[j] = student_t_p_value(t, dof as u64)?;
    }

    Ok(OlsFit { betas, t_stats, p_values, sigma2_hat, dof })
}

/// Regression of one content factor on all latent means.
#[derive(Debug, Clone)]
pub struct FactorRegression {
    pub factor_index: usize,
    pub fit: OlsFit,
    /// Latent columns significant at the chosen level (intercept excluded).
    pub significant_latents: Vec<usize>,
}

/// Full result of the 1-to-1 mapping test.
#[derive(Debug, Clone)]
pub struct OneToOneResult {
    pub outcome: TestOutcome,
    pub regressions: Vec<FactorRegression>,
    /// Latent index recovered for each factor when unique.
    pub assignment: Vec<Option<usize>>,
}

/// Verifies a 1-to-1 linear mapping between latent means and content factors.
///
/// For each content factor, fits OLS from all latent means and requires
/// exactly one significant latent coefficient; the recovered indices must be
/// distinct across factors. Intercept significance is ignored: it depends on
/// data centering and is not evidence of entanglement.
pub fn test_1_to_1_mapping(
    latents: &DMatrix<f64>,
    v_content: &DMatrix<f64>,
    significance_level: f64,
) -> Result<OneToOneResult> {
    if latents.nrows() != v_content.nrows() {
        return Err(Error::shape(format!(
            "latents ({}) and factors ({}) disagree in rows",
            latents.nrows(),
            v_content.nrows()
        )));
    }
    if !(significance_level > 0.0 && significance_level < 1.0) {
        return Err(Error::invalid("significance level must be in (0,1)"));
    }
    let n_latents = latents.ncols();
    let k = v_content.ncols();

    let mut regressions = Vec::with_capacity(k);
    let mut assignment = Vec::with_capacity(k);
    let mut all_single = true;
    for factor in 0..k {
        let target = DVector::from_column_slice(v_content.column(factor).as_slice());
        let fit = fit_ols(latents, &target)?;
        let significant: Vec<usize> = (0..n_latents)
            .filter(|&j| fit.p_values[j] < significance_level)
            .collect();
        if significant.len() != 1 {
            all_single = false;
            assignment.push(None);
        } else {
            assignment.push(Some(significant[0]));
        }
        regressions.push(FactorRegression { factor_index: factor, fit, significant_latents: significant });
    }

    let mut seen = std::collections::BTreeSet::new();
    let mut all_distinct = true;
    for a in assignment.iter().flatten() {
        if !seen.insert(*a) {
            all_distinct = false;
        }
    }

    let passed = all_single && all_distinct;
    let mut outcome = TestOutcome::new("disentanglement_1_to_1", passed)
        .with_stat("n_factors", k as f64)
        .with_stat("n_latents", n_latents as f64)
        .with_stat("significance_level", significance_level);
    for (factor, a) in assignment.iter().enumerate() {
        outcome
            .statistics
            .insert(format!("factor_{factor}_latent"), a.map_or(-1.0, |v| v as f64));
        outcome.statistics.insert(
            format!("factor_{factor}_n_significant"),
            regressions[factor].significant_latents.len() as f64,
        );
    }
    if !all_single {
        outcome = outcome.with_detail("a factor is not explained by exactly one latent");
    } else if !all_distinct {
        outcome = outcome.with_detail("two factors share an explanatory latent");
    }

    Ok(OneToOneResult { outcome, regressions, assignment })
}

/// Regression of one labeled style feature on content + style latents.
#[derive(Debug, Clone)]
pub struct StyleRegression {
    pub style_index: usize,
    pub fit: OlsFit,
    /// Content latent columns that turned out significant (should be empty).
    pub offending_content: Vec<usize>,
}

/// Result of the content/style separation test.
#[derive(Debug, Clone)]
pub struct SeparationResult {
    pub outcome: TestOutcome,
    pub regressions: Vec<StyleRegression>,
}

/// Verifies that content latents have no predictive power for labeled style
/// features: every content coefficient must accept the null hypothesis.
pub fn test_content_style_separation(
    latents_content: &DMatrix<f64>,
    latents_style: &DMatrix<f64>,
    v_style: &DMatrix<f64>,
    significance_level: f64,
) -> Result<SeparationResult> {
    let n = latents_content.nrows();
    if latents_style.nrows() != n || v_style.nrows() != n {
        return Err(Error::shape("row counts disagree"));
    }
    if v_style.ncols() == 0 {
        return Ok(SeparationResult {
            outcome: TestOutcome::skipped(
                "content_style_separation",
                "no labeled style features",
            ),
            regressions: Vec::new(),
        });
    }
    let k = latents_content.ncols();
    let mut design = DMatrix::zeros(n, k + latents_style.ncols());
    design.view_mut((0, 0), (n, k)).copy_from(latents_content);
    design
        .view_mut((0, k), (n, latents_style.ncols()))
        .copy_from(latents_style);

    let mut regressions = Vec::new();
    let mut passed = true;
    for s in 0..v_style.ncols() {
        let target = DVector::from_column_slice(v_style.column(s).as_slice());
        let fit = fit_ols(&design, &target)?;
        let offending: Vec<usize> = (0..k).filter(|&j| fit.p_values[j] < significance_level).collect();
        if !offending.is_empty() {
            passed = false;
        }
        regressions.push(StyleRegression { style_index: s, fit, offending_content: offending });
    }

    let mut outcome = TestOutcome::new("content_style_separation", passed)
        .with_stat("n_style_features", v_style.ncols() as f64)
        .with_stat("significance_level", significance_level);
    for r in &regressions {
        outcome.statistics.insert(
            format!("style_{}_n_offending", r.style_index),
            r.offending_content.len() as f64,
        );
    }
    if !passed {
        let what: Vec<String> = regressions
            .iter()
            .filter(|r| !r.offending_content.is_empty())
            .map(|r| format!("style {} explained by content latents {:?}", r.style_index, r.offending_content))
            .collect();
        outcome = outcome.with_detail(what.join("; "));
    }

    Ok(SeparationResult { outcome, regressions })
}

/// Renders per-factor p-value tables as CSV: factor,latent_index,beta,p_value.
pub fn pvalue_table_csv(regressions: &[FactorRegression]) -> String {
    let mut out = String::from("factor,latent_index,beta,p_value\n");
    for r in regressions {
        let latents = r.fit.betas.len() - 1;
        for j in 0..latents {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.factor_index, j, r.fit.betas[j], r.fit.p_values[j]
            ));
        }
    }
    out
}
