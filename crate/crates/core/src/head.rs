//! The parameter-free model head, median-ensemble selection, and the
//! Gaussian-mixture OOD rule.
//!
//! The head maps a latent Gaussian to a calibrated output distribution: the
//! latent mean goes through the standard normal cdf and is rescaled to the
//! operating range; the latent sigma is scaled by the local functional
//! determinant of that transform. OOD detection mixes the per-member output
//! distributions and rejects the input when too much mixture mass falls
//! outside two standard deviations of the median member's prediction.

use serde::{Deserialize, Serialize};

use crate::data::{CertDataset, LatentGaussian, OperatingRange};
use crate::dist::special::{norm_cdf_std, norm_pdf_std};
use crate::dist::{mixture_cdf, Normal};
use crate::error::{Error, Result};

/// Head configuration: the operating range plus per-dimension orientation
/// flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadConfig {
    pub range: OperatingRange,
    /// Orientation correction per content dimension; `true` reassigns
    /// `u <- 1 - u`.
    pub flip: Vec<bool>,
}

impl HeadConfig {
    pub fn new(range: OperatingRange, flip: Vec<bool>) -> Result<Self> {
        if flip.len() != range.dims() {
            return Err(Error::shape(format!(
                "flip has {} entries for {} content dims",
                flip.len(),
                range.dims()
            )));
        }
        Ok(HeadConfig { range, flip })
    }

    /// Default orientation (no flips). Run [`calibrate_orientation`] to set
    /// the flags from annotated pairs; until then directions are assumed.
    pub fn unoriented(range: OperatingRange) -> Self {
        let flip = vec![false; range.dims()];
        HeadConfig { range, flip }
    }
}

/// Transforms one latent Gaussian into the output distribution
/// `Normal(u * (b - a) + a, sigma * pdf(mu) * (b - a))` with
/// `u = cdf(N(0,1), mu)`, flipped to `1 - u` when requested.
pub fn head_transform(latent: LatentGaussian, a: f64, b: f64, flip: bool) -> Result<Normal> {
    if !(b > a) {
        return Err(Error::invalid(format!("operating range requires b > a, got [{a}, {b}]")));
    }
    LatentGaussian::new(latent.mu, latent.sigma)?;
    let mut u = norm_cdf_std(latent.mu);
    if flip {
        u = 1.0 - u;
    }
    let y = u * (b - a) + a;
    // Deep in the latent tails the Jacobian underflows; keep the output a
    // valid distribution.
    let sigma_y = (latent.sigma * norm_pdf_std(latent.mu) * (b - a)).max(f64::MIN_POSITIVE);
    Normal::new(y, sigma_y)
}

/// One orientation annotation: a pair of latent mean vectors from inputs
/// known to satisfy `v_dim << v'_dim`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrientationPair {
    pub dim: usize,
    pub mu: Vec<f64>,
    pub mu_prime: Vec<f64>,
}

/// Derives flip flags from annotated pairs: dimension `i` flips when the
/// majority of its pairs has `mu_i > mu'_i` (the representation runs against
/// the content direction).
pub fn calibrate_orientation(pairs: &[OrientationPair], content_dims: usize) -> Result<Vec<bool>> {
    let mut votes_flip = vec![0usize; content_dims];
    let mut votes_keep = vec![0usize; content_dims];
    for p in pairs {
        if p.dim >= content_dims {
            return Err(Error::shape(format!("annotation dimension {} out of range", p.dim)));
        }
        if p.mu.len() <= p.dim || p.mu_prime.len() <= p.dim {
            return Err(Error::shape(format!(
                "latent vectors too short for dimension {}",
                p.dim
            )));
        }
        if p.mu[p.dim] > p.mu_prime[p.dim] {
            votes_flip[p.dim] += 1;
        } else {
            votes_keep[p.dim] += 1;
        }
    }
    let mut flips = Vec::with_capacity(content_dims);
    for dim in 0..content_dims {
        if votes_flip[dim] + votes_keep[dim] == 0 {
            return Err(Error::invalid(format!(
                "no orientation annotation for content dimension {dim}"
            )));
        }
        flips.push(votes_flip[dim] > votes_keep[dim]);
    }
    Ok(flips)
}

/// Index of the lower median of `values` (ties broken by index).
pub fn lower_median_index(values: &[f64]) -> usize {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    order[(values.len() - 1) / 2]
}

/// Selects the ensemble member whose latent mean is the median for the given
/// dimension; even ensembles use the lower median.
pub fn ensemble_median_select(
    members: &[Vec<LatentGaussian>],
    dim: usize,
) -> Result<(usize, LatentGaussian)> {
    if members.is_empty() {
        return Err(Error::invalid("ensemble must have at least one member"));
    }
    let mus: Vec<f64> = members
        .iter()
        .map(|m| {
            m.get(dim)
                .map(|lg| lg.mu)
                .ok_or_else(|| Error::shape(format!("latent dimension {dim} out of range")))
        })
        .collect::<Result<_>>()?;
    let idx = lower_median_index(&mus);
    Ok((idx, members[idx][dim]))
}

/// Probability mass of the equal-weight mixture of `transformed` that lies
/// outside two standard deviations of the selected member.
pub fn ood_outside_mass(transformed: &[Normal], selected: usize) -> Result<f64> {
    let sel = transformed
        .get(selected)
        .ok_or_else(|| Error::shape(format!("selected member {selected} out of range")))?;
    let lo = sel.mu - 2.0 * sel.sigma;
    let hi = sel.mu + 2.0 * sel.sigma;
    Ok(mixture_cdf(transformed, lo)? + (1.0 - mixture_cdf(transformed, hi)?))
}

/// Per-record OOD decision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OodDecision {
    /// Mixture mass outside two standard deviations, per content dimension.
    pub outside_mass: Vec<f64>,
    pub flagged_dims: Vec<bool>,
    pub is_ood: bool,
    /// Median-selected output distribution per content dimension.
    pub selected: Vec<Normal>,
}

/// Gaussian-mixture OOD rule over a latent ensemble.
///
/// Per content dimension, every member's latent is pushed through the head;
/// the mixture mass outside two standard deviations of the median member's
/// output must stay at or below `tau_ood`, otherwise the dimension flags and
/// the record is rejected.
pub fn ood_detect(
    members: &[Vec<LatentGaussian>],
    config: &HeadConfig,
    tau_ood: f64,
) -> Result<OodDecision> {
    if members.len() < 2 {
        return Err(Error::invalid("OOD detection requires an ensemble of at least 2 members"));
    }
    if !(tau_ood > 0.0 && tau_ood < 1.0) {
        return Err(Error::invalid("tau_ood must be in (0,1)"));
    }
    let dims = config.range.dims();
    let mut outside_mass = Vec::with_capacity(dims);
    let mut flagged_dims = Vec::with_capacity(dims);
    let mut selected = Vec::with_capacity(dims);
    for dim in 0..dims {
        let (a, b) = config.range.bounds(dim);
        let transformed: Vec<Normal> = members
            .iter()
            .map(|m| {
                let lg = m.get(dim).ok_or_else(|| {
                    Error::shape(format!("latent dimension {dim} out of range"))
                })?;
                head_transform(*lg, a, b, config.flip[dim])
            })
            .collect::<Result<_>>()?;
        let means: Vec<f64> = transformed.iter().map(|n| n.mu).collect();
        let sel_idx = lower_median_index(&means);
        let mass = ood_outside_mass(&transformed, sel_idx)?;
        flagged_dims.push(mass > tau_ood);
        outside_mass.push(mass);
        selected.push(transformed[sel_idx]);
    }
    let is_ood = flagged_dims.iter().any(|&f| f);
    Ok(OodDecision { outside_mass, flagged_dims, is_ood, selected })
}

/// Batch output row: prediction and OOD verdict for one record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadBatchRow {
    pub id: String,
    pub y: Vec<f64>,
    pub sigma_y: Vec<f64>,
    pub ood_flags: Vec<bool>,
    pub outside_mass: Vec<f64>,
    pub is_ood: bool,
}

/// Runs the head and the OOD rule over every record of a dataset carrying
/// latent ensembles.
pub fn head_batch(
    dataset: &CertDataset,
    config: &HeadConfig,
    tau_ood: f64,
) -> Result<Vec<HeadBatchRow>> {
    if config.range.dims() > dataset.schema.content_dims {
        return Err(Error::shape(format!(
            "operating range has {} dims but dataset has k = {}",
            config.range.dims(),
            dataset.schema.content_dims
        )));
    }
    dataset
        .records
        .iter()
        .map(|r| {
            let members = r.latents.as_ref().ok_or_else(|| {
                Error::invalid(format!("record {} carries no latents", r.id))
            })?;
            let decision = ood_detect(members, config, tau_ood)?;
            Ok(HeadBatchRow {
                id: r.id.clone(),
                y: decision.selected.iter().map(|n| n.mu).collect(),
                sigma_y: decision.selected.iter().map(|n| n.sigma).collect(),
                ood_flags: decision.flagged_dims.clone(),
                outside_mass: decision.outside_mass.clone(),
                is_ood: decision.is_ood,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_from_seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn lg(mu: f64, sigma: f64) -> LatentGaussian {
        LatentGaussian { mu, sigma }
    }

    #[test]
    fn head_transform_spec_examples() {
        let n = head_transform(lg(0.0, 1.0), -10.0, 10.0, false).unwrap();
        assert_eq!(n.mu, 0.0);
        // 1 * phi(0) * 20 with phi(0) = 0.3989422804.
        assert!((n.sigma - 7.978_845_608_028_654).abs() < 1e-10);
        assert!((n.sigma - 7.9788).abs() < 1e-4);

        // mu at the 0.75 latent quantile of N(0,1).
        let n = head_transform(lg(0.674_489_750_196_081_7, 0.1), 0.0, 1.0, false).unwrap();
        assert!((n.mu - 0.75).abs() < 1e-9);
        assert!((n.sigma - 0.1 * norm_pdf_std(0.674_489_750_196_081_7)).abs() < 1e-12);
        assert!((n.sigma - 0.0318).abs() < 1e-4);

        let n = head_transform(lg(0.0, 1.0), -15.0, 15.0, true).unwrap();
        assert_eq!(n.mu, 0.0);
    }

    #[test]
    fn head_transform_monotone_in_mu() {
        let mut last = f64::NEG_INFINITY;
        let mut last_flipped = f64::INFINITY;
        for i in -40..=40 {
            let mu = i as f64 / 10.0;
            let y = head_transform(lg(mu, 1.0), -3.0, 5.0, false).unwrap().mu;
            assert!(y > last);
            last = y;
            let yf = head_transform(lg(mu, 1.0), -3.0, 5.0, true).unwrap().mu;
            assert!(yf < last_flipped);
            last_flipped = yf;
        }
    }

    #[test]
    fn head_sigma_vanishes_in_the_tails() {
        let s1 = head_transform(lg(2.0, 1.0), 0.0, 1.0, false).unwrap().sigma;
        let s2 = head_transform(lg(6.0, 1.0), 0.0, 1.0, false).unwrap().sigma;
        let s3 = head_transform(lg(12.0, 1.0), 0.0, 1.0, false).unwrap().sigma;
        assert!(s1 > s2 && s2 > s3);
        // Extreme latents still produce a valid distribution.
        let s4 = head_transform(lg(45.0, 1.0), 0.0, 1.0, false).unwrap().sigma;
        assert!(s4 > 0.0);
    }

    #[test]
    fn orientation_spec_examples() {
        let pair = |dim, a: f64, b: f64| OrientationPair {
            dim,
            mu: vec![a],
            mu_prime: vec![b],
        };
        assert_eq!(calibrate_orientation(&[pair(0, -1.0, 1.0)], 1).unwrap(), vec![false]);
        assert_eq!(calibrate_orientation(&[pair(0, 1.0, -1.0)], 1).unwrap(), vec![true]);
        // Majority {keep, keep, flip} -> keep.
        let flips = calibrate_orientation(
            &[pair(0, -1.0, 1.0), pair(0, -2.0, 0.0), pair(0, 3.0, 1.0)],
            1,
        )
        .unwrap();
        assert_eq!(flips, vec![false]);
        // Missing annotation names the dimension.
        let err = calibrate_orientation(&[pair(0, -1.0, 1.0)], 2).unwrap_err();
        assert!(err.to_string().contains("dimension 1"));
    }

    #[test]
    fn median_selection_spec_examples() {
        let members: Vec<Vec<LatentGaussian>> =
            [1.0, 2.0, 3.0, 4.0, 5.0].iter().map(|&m| vec![lg(m, 1.0)]).collect();
        let (idx, sel) = ensemble_median_select(&members, 0).unwrap();
        assert_eq!(idx, 2);
        assert_eq!(sel.mu, 3.0);

        let members: Vec<Vec<LatentGaussian>> =
            [1.0, 2.0, 3.0, 4.0].iter().map(|&m| vec![lg(m, 1.0)]).collect();
        let (idx, sel) = ensemble_median_select(&members, 0).unwrap();
        assert_eq!(idx, 1, "even ensembles take the lower median");
        assert_eq!(sel.mu, 2.0);

        let members = vec![vec![lg(7.0, 1.0)]];
        let (idx, _) = ensemble_median_select(&members, 0).unwrap();
        assert_eq!(idx, 0);
    }

    #[test]
    fn median_selection_unordered_input() {
        let members: Vec<Vec<LatentGaussian>> =
            [5.0, 1.0, 3.0, 2.0, 4.0].iter().map(|&m| vec![lg(m, 1.0)]).collect();
        let (idx, sel) = ensemble_median_select(&members, 0).unwrap();
        assert_eq!(sel.mu, 3.0);
        assert_eq!(idx, 2);
    }

    fn config_1d() -> HeadConfig {
        HeadConfig::unoriented(OperatingRange::new(vec![-10.0], vec![10.0]).unwrap())
    }

    #[test]
    fn identical_members_mass_is_two_sided_2sigma_tail() {
        let members = vec![vec![lg(0.3, 0.8)]; 5];
        let d = ood_detect(&members, &config_1d(), 0.15).unwrap();
        assert!((d.outside_mass[0] - 0.045_500_263_896_358_39).abs() < 1e-9);
        assert!(!d.is_ood);
    }

    #[test]
    fn shifted_member_mass_via_mixture_arithmetic() {
        // Work on the transformed scale directly: 4 members at y, one at
        // y + 6 sigma. Expected mass = 0.8 * 2Phi(-2) + 0.2 * (Phi(-8) + 1 - Phi(-4)).
        let base = Normal { mu: 2.0, sigma: 0.5 };
        let shifted = Normal { mu: 2.0 + 6.0 * 0.5, sigma: 0.5 };
        let members = vec![base, base, base, base, shifted];
        let mass = ood_outside_mass(&members, 2).unwrap();
        let expected = 0.8 * 0.045_500_263_896_358_39
            + 0.2 * (norm_cdf_std(-8.0) + 1.0 - norm_cdf_std(-4.0));
        assert!((mass - expected).abs() < 1e-12);
        assert!((mass - 0.2364).abs() < 1e-3);
        assert!(mass > 0.15, "shifted member must flag OOD at tau = 0.15");
    }

    #[test]
    fn two_clusters_flag_ood() {
        // Two clusters 4 sigma apart, E = 4: about half the mass is outside
        // either cluster's two-sigma window.
        let a = Normal { mu: 0.0, sigma: 1.0 };
        let b = Normal { mu: 4.0, sigma: 1.0 };
        let members = vec![a, a, b, b];
        let mass = ood_outside_mass(&members, 1).unwrap();
        assert!((mass - 0.5).abs() < 0.05, "mass {mass}");
        assert!(mass > 0.15);
    }

    #[test]
    fn ood_invariant_under_member_permutation_and_monotone_flags() {
        let mut rng = rng_from_seed(40);
        let members: Vec<Vec<LatentGaussian>> = (0..5)
            .map(|_| {
                vec![
                    lg(rng.sample::<f64, _>(StandardNormal), 0.5),
                    lg(rng.sample::<f64, _>(StandardNormal), 0.5),
                ]
            })
            .collect();
        let config = HeadConfig::unoriented(
            OperatingRange::new(vec![-10.0, -15.0], vec![10.0, 15.0]).unwrap(),
        );
        let d1 = ood_detect(&members, &config, 0.15).unwrap();
        let mut reversed = members.clone();
        reversed.reverse();
        let d2 = ood_detect(&reversed, &config, 0.15).unwrap();
        for (a, b) in d1.outside_mass.iter().zip(&d2.outside_mass) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(d1.is_ood, d2.is_ood);
        // Outside mass can never drop below the selected member's own
        // two-sigma tail mass.
        for &m in &d1.outside_mass {
            assert!(m >= 0.045_500_263_896_358_39 / 5.0 - 1e-9);
        }
        // The overall flag is an OR over dimensions.
        assert_eq!(d1.is_ood, d1.flagged_dims.iter().any(|&f| f));
    }

    #[test]
    fn outside_mass_floor_with_identical_members() {
        // With all members identical the floor is the full 4.55%.
        for e in 2..8 {
            let members = vec![vec![lg(-0.7, 1.3)]; e];
            let d = ood_detect(&members, &config_1d(), 0.15).unwrap();
            assert!(d.outside_mass[0] >= 0.045_500_263_896_358_39 - 1e-9);
        }
    }

    #[test]
    fn ood_requires_ensemble() {
        let members = vec![vec![lg(0.0, 1.0)]];
        assert!(ood_detect(&members, &config_1d(), 0.15).is_err());
    }
}
