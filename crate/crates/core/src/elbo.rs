//! The weakly-supervised pairwise ELBO loss, its building blocks, a
//! desk-scale affine trainer, and the encoder-decoder roundtrip check.
//!
//! Training data comes as input pairs that agree in a known subset S of
//! latent indices. Posterior statistics of the dimensions in S are averaged
//! across the pair before sampling, which prevents the model from using
//! those dimensions to explain the difference between the two inputs and
//! thereby pins each shared factor to its own latent dimension.
//!
//! The toy model is a pair of affine maps with hand-derived gradients; the
//! loss is the contribution here, so no autodiff framework is pulled in.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dist::Normal;
use crate::error::{Error, Result};
use crate::seeds::{child_seed, rng_from_seed};

/// A batch of weakly annotated input pairs. `shared[p]` holds the latent
/// indices in which pair `p` agrees (non-empty, within `0..latent_dim`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairBatch {
    pub lhs: Vec<Vec<f64>>,
    pub rhs: Vec<Vec<f64>>,
    pub shared: Vec<Vec<usize>>,
}

impl PairBatch {
    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        if self.lhs.len() != self.rhs.len() || self.lhs.len() != self.shared.len() {
            return Err(Error::shape(format!(
                "pair batch sides disagree: lhs {}, rhs {}, shared {}",
                self.lhs.len(),
                self.rhs.len(),
                self.shared.len()
            )));
        }
        if self.lhs.is_empty() {
            return Err(Error::invalid("pair batch must be non-empty"));
        }
        for (p, s) in self.shared.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::invalid(format!("pair {p}: shared index set must be non-empty")));
            }
            for &i in s {
                if i >= latent_dim {
                    return Err(Error::invalid(format!(
                        "pair {p}: shared index {i} outside 0..{latent_dim}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.lhs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lhs.is_empty()
    }
}

/// The averaging function for two normal posteriors:
/// `avg(N(m, s), N(m', s')) = N((m + m')/2, ((s + s')/2)^2)` (variance form),
/// i.e. means and standard deviations are both averaged.
pub fn average_normals(d1: Normal, d2: Normal) -> Normal {
    Normal {
        mu: 0.5 * (d1.mu + d2.mu),
        sigma: 0.5 * (d1.sigma + d2.sigma),
    }
}

/// Masked pair statistics: dimensions in S carry the averaged mean and
/// standard deviation on both sides, all others pass through unchanged.
/// Inputs are encoder outputs (mu, logvar); outputs are (mu_hat, sigma_hat).
#[allow(clippy::type_complexity)]
pub fn masked_pair_statistics(
    mu_lhs: &[f64],
    logvar_lhs: &[f64],
    mu_rhs: &[f64],
    logvar_rhs: &[f64],
    shared: &[usize],
) -> Result<((Vec<f64>, Vec<f64>), (Vec<f64>, Vec<f64>))> {
    let d = mu_lhs.len();
    if logvar_lhs.len() != d || mu_rhs.len() != d || logvar_rhs.len() != d {
        return Err(Error::shape("pair statistics dimensions disagree"));
    }
    if shared.is_empty() {
        return Err(Error::invalid("shared index set must be non-empty"));
    }
    let mut in_s = vec![false; d];
    for &i in shared {
        if i >= d {
            return Err(Error::invalid(format!("shared index {i} outside 0..{d}")));
        }
        in_s[i] = true;
    }
    let sig_l: Vec<f64> = logvar_lhs.iter().map(|lv| (0.5 * lv).exp()).collect();
    let sig_r: Vec<f64> = logvar_rhs.iter().map(|lv| (0.5 * lv).exp()).collect();
    let mut mu_hat_l = mu_lhs.to_vec();
    let mut mu_hat_r = mu_rhs.to_vec();
    let mut sig_hat_l = sig_l.clone();
    let mut sig_hat_r = sig_r;
    for i in 0..d {
        if in_s[i] {
            let m = 0.5 * (mu_lhs[i] + mu_rhs[i]);
            let s = 0.5 * (sig_l[i] + sig_hat_r[i]);
            mu_hat_l[i] = m;
            mu_hat_r[i] = m;
            sig_hat_l[i] = s;
            sig_hat_r[i] = s;
        }
    }
    Ok(((mu_hat_l, sig_hat_l), (mu_hat_r, sig_hat_r)))
}

/// KL divergence of `N(mu, diag(sigma^2))` from the prior `N(0, lambda I)`:
/// `0.5 * sum(1/lambda * (mu^2 + sigma^2) - 2 log sigma - 1 + log lambda)`.
pub fn gaussian_kl(mu: &[f64], sigma: &[f64], lambda: f64) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| 0.5 * ((m * m + s * s) / lambda - 2.0 * s.ln() - 1.0 + lambda.ln()))
        .sum()
}

/// Stable sum of element-wise binary cross entropy with logits:
/// `sum(softplus(l) - t * l)`.
pub fn bernoulli_recon_loss(logits: &[f64], target: &[f64]) -> Result<f64> {
    if logits.len() != target.len() {
        return Err(Error::shape(format!(
            "logits ({}) and targets ({}) disagree",
            logits.len(),
            target.len()
        )));
    }
    let mut sum = 0.0;
    for (&l, &t) in logits.iter().zip(target) {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("target {t} outside [0,1]")));
        }
        sum += softplus(l) - t * l;
    }
    Ok(sum)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Affine variational autoencoder: encoder produces per-dimension mean and
/// log-variance, the decoder produces reconstruction logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyVae {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub enc_mu_w: DMatrix<f64>,
    pub enc_mu_b: DVector<f64>,
    pub enc_lv_w: DMatrix<f64>,
    pub enc_lv_b: DVector<f64>,
    pub dec_w: DMatrix<f64>,
    pub dec_b: DVector<f64>,
}

impl ToyVae {
    /// Random small-weight initialization.
    pub fn new(input_dim: usize, latent_dim: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(child_seed(seed, 0x1217));
        let mut init =
            |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
        let enc_mu_w = init(latent_dim, input_dim);
        let enc_lv_w = init(latent_dim, input_dim);
        let dec_w = init(input_dim, latent_dim);
        ToyVae {
            input_dim,
            latent_dim,
            enc_mu_w,
            enc_mu_b: DVector::zeros(latent_dim),
            enc_lv_w,
            enc_lv_b: DVector::zeros(latent_dim),
            dec_w,
            dec_b: DVector::zeros(input_dim),
        }
    }

    /// Identity-style model for tests: requires input_dim == latent_dim.
    pub fn identity(dim: usize) -> Self {
        ToyVae {
            input_dim: dim,
            latent_dim: dim,
            enc_mu_w: DMatrix::identity(dim, dim),
            enc_mu_b: DVector::zeros(dim),
            enc_lv_w: DMatrix::zeros(dim, dim),
            enc_lv_b: DVector::zeros(dim),
            dec_w: DMatrix::identity(dim, dim),
            dec_b: DVector::zeros(dim),
        }
    }

    pub fn encode(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let x = DVector::from_column_slice(x);
        let mu = &self.enc_mu_w * &x + &self.enc_mu_b;
        let lv = &self.enc_lv_w * &x + &self.enc_lv_b;
        (mu.iter().copied().collect(), lv.iter().copied().collect())
    }

    /// Decoder output (logits / reconstruction, affine).
    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        let z = DVector::from_column_slice(z);
        let out = &self.dec_w * &z + &self.dec_b;
        out.iter().copied().collect()
    }

    pub fn n_params(&self) -> usize {
        self.latent_dim * self.input_dim * 2
            + self.latent_dim * 2
            + self.input_dim * self.latent_dim
            + self.input_dim
    }

    pub fn get_param(&self, idx: usize) -> f64 {
        self.param_slices()[idx]
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        let (li, ii) = (self.latent_dim, self.input_dim);
        // Flat layout: enc_mu_w, enc_mu_b, enc_lv_w, enc_lv_b, dec_w, dec_b.
        let sizes = [li * ii, li, li * ii, li, ii * li, ii];
        let mut idx = idx;
        for (s, size) in sizes.iter().enumerate() {
            if idx < *size {
                match s {
                    0 => self.enc_mu_w[idx] = value,
                    1 => self.enc_mu_b[idx] = value,
                    2 => self.enc_lv_w[idx] = value,
                    3 => self.enc_lv_b[idx] = value,
                    4 => self.dec_w[idx] = value,
                    _ => self.dec_b[idx] = value,
                }
                return;
            }
            idx -= size;
        }
        panic!("parameter index out of range");
    }

    fn param_slices(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend(self.enc_mu_w.iter());
        out.extend(self.enc_mu_b.iter());
        out.extend(self.enc_lv_w.iter());
        out.extend(self.enc_lv_b.iter());
        out.extend(self.dec_w.iter());
        out.extend(self.dec_b.iter());
        out
    }
}

/// Gradient with the same shapes as the model parameters.
#[derive(Debug, Clone)]
pub struct ToyVaeGrad {
    pub enc_mu_w: DMatrix<f64>,
    pub enc_mu_b: DVector<f64>,
    pub enc_lv_w: DMatrix<f64>,
    pub enc_lv_b: DVector<f64>,
    pub dec_w: DMatrix<f64>,
    pub dec_b: DVector<f64>,
}

impl ToyVaeGrad {
    fn zeros(input_dim: usize, latent_dim: usize) -> Self {
        ToyVaeGrad {
            enc_mu_w: DMatrix::zeros(latent_dim, input_dim),
            enc_mu_b: DVector::zeros(latent_dim),
            enc_lv_w: DMatrix::zeros(latent_dim, input_dim),
            enc_lv_b: DVector::zeros(latent_dim),
            dec_w: DMatrix::zeros(input_dim, latent_dim),
            dec_b: DVector::zeros(input_dim),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.enc_mu_w.iter());
        out.extend(self.enc_mu_b.iter());
        out.extend(self.enc_lv_w.iter());
        out.extend(self.enc_lv_b.iter());
        out.extend(self.dec_w.iter());
        out.extend(self.dec_b.iter());
        out
    }
}

/// Mean over pairs of the negated pairwise ELBO (the loss to minimize), with
/// one reparameterization sample per pair side. Identical seeds give
/// bit-identical losses.
pub fn pairwise_elbo_loss(model: &ToyVae, batch: &PairBatch, seed: u64) -> Result<f64> {
    Ok(loss_and_grad(model, batch, seed, false)?.0)
}

/// Loss together with the analytic parameter gradient (when requested).
pub fn loss_and_grad(
    model: &ToyVae,
    batch: &PairBatch,
    seed: u64,
    with_grad: bool,
) -> Result<(f64, Option<ToyVaeGrad>)> {
    batch.validate(model.latent_dim)?;
    let d_lat = model.latent_dim;
    let n_pairs = batch.len() as f64;
    let mut rng = rng_from_seed(seed);
    let mut total = 0.0;
    let mut grad = with_grad.then(|| ToyVaeGrad::zeros(model.input_dim, d_lat));

    for p in 0..batch.len() {
        let x_l = &batch.lhs[p];
        let x_r = &batch.rhs[p];
        if x_l.len() != model.input_dim || x_r.len() != model.input_dim {
            return Err(Error::shape(format!(
                "pair {p}: input dims disagree with model ({})",
                model.input_dim
            )));
        }
        let (mu_l, lv_l) = model.encode(x_l);
        let (mu_r, lv_r) = model.encode(x_r);
        let ((mu_hat_l, sig_hat_l), (mu_hat_r, sig_hat_r)) =
            masked_pair_statistics(&mu_l, &lv_l, &mu_r, &lv_r, &batch.shared[p])?;

        let eps_l: Vec<f64> = (0..d_lat).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let eps_r: Vec<f64> = (0..d_lat).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();

        let z_l: Vec<f64> = (0..d_lat).map(|i| mu_hat_l[i] + sig_hat_l[i] * eps_l[i]).collect();
        let z_r: Vec<f64> = (0..d_lat).map(|i| mu_hat_r[i] + sig_hat_r[i] * eps_r[i]).collect();

        let logits_l = model.decode(&z_l);
        let logits_r = model.decode(&z_r);

        let recon_l = bernoulli_recon_loss(&logits_l, x_l)?;
        let recon_r = bernoulli_recon_loss(&logits_r, x_r)?;
        let kl_l = gaussian_kl(&mu_hat_l, &sig_hat_l, 1.0);
        let kl_r = gaussian_kl(&mu_hat_r, &sig_hat_r, 1.0);
        total += recon_l + recon_r + kl_l + kl_r;

        if let Some(g) = grad.as_mut() {
            let w = 1.0 / n_pairs;
            let xl = DVector::from_column_slice(x_l);
            let xr = DVector::from_column_slice(x_r);
            let zl = DVector::from_column_slice(&z_l);
            let zr = DVector::from_column_slice(&z_r);

            // d recon / d logits = sigmoid(logits) - target.
            let dlog_l = DVector::from_iterator(
                model.input_dim,
                logits_l.iter().zip(x_l).map(|(&l, &t)| sigmoid(l) - t),
            );
            let dlog_r = DVector::from_iterator(
                model.input_dim,
                logits_r.iter().zip(x_r).map(|(&l, &t)| sigmoid(l) - t),
            );
            g.dec_w += w * (&dlog_l * zl.transpose() + &dlog_r * zr.transpose());
            g.dec_b += w * (&dlog_l + &dlog_r);

            let dz_l = model.dec_w.transpose() * &dlog_l;
            let dz_r = model.dec_w.transpose() * &dlog_r;

            // Into the hat statistics: z = mu_hat + sig_hat .* eps, plus the
            // KL terms d/dmu = mu, d/dsigma = sigma - 1/sigma.
            let mut dmu_hat_l = vec![0.0; d_lat];
            let mut dmu_hat_r = vec![0.0; d_lat];
            let mut dsig_hat_l = vec![0.0; d_lat];
            let mut dsig_hat_r = vec![0.0; d_lat];
            for i in 0..d_lat {
                dmu_hat_l[i] = dz_l[i] + mu_hat_l[i];
                dmu_hat_r[i] = dz_r[i] + mu_hat_r[i];
                dsig_hat_l[i] = dz_l[i] * eps_l[i] + (sig_hat_l[i] - 1.0 / sig_hat_l[i]);
                dsig_hat_r[i] = dz_r[i] * eps_r[i] + (sig_hat_r[i] - 1.0 / sig_hat_r[i]);
            }

            // Through the averaging mask back to the per-side statistics.
            let mut in_s = vec![false; d_lat];
            for &i in &batch.shared[p] {
                in_s[i] = true;
            }
            let sig_l: Vec<f64> = lv_l.iter().map(|lv| (0.5 * lv).exp()).collect();
            let sig_r: Vec<f64> = lv_r.iter().map(|lv| (0.5 * lv).exp()).collect();
            let mut dmu_l = vec![0.0; d_lat];
            let mut dmu_r = vec![0.0; d_lat];
            let mut dlv_l = vec![0.0; d_lat];
            let mut dlv_r = vec![0.0; d_lat];
            for i in 0..d_lat {
                let (dm_l, dm_r, ds_l, ds_r) = if in_s[i] {
                    let dm = 0.5 * (dmu_hat_l[i] + dmu_hat_r[i]);
                    let ds = 0.5 * (dsig_hat_l[i] + dsig_hat_r[i]);
                    (dm, dm, ds, ds)
                } else {
                    (dmu_hat_l[i], dmu_hat_r[i], dsig_hat_l[i], dsig_hat_r[i])
                };
                dmu_l[i] = dm_l;
                dmu_r[i] = dm_r;
                // d sigma / d logvar = sigma / 2 on the own side.
                dlv_l[i] = ds_l * sig_l[i] * 0.5;
                dlv_r[i] = ds_r * sig_r[i] * 0.5;
            }

            let dmu_l = DVector::from_column_slice(&dmu_l);
            let dmu_r = DVector::from_column_slice(&dmu_r);
            let dlv_l = DVector::from_column_slice(&dlv_l);
            let dlv_r = DVector::from_column_slice(&dlv_r);
            g.enc_mu_w += w * (&dmu_l * xl.transpose() + &dmu_r * xr.transpose());
            g.enc_mu_b += w * (&dmu_l + &dmu_r);
            g.enc_lv_w += w * (&dlv_l * xl.transpose() + &dlv_r * xr.transpose());
            g.enc_lv_b += w * (&dlv_l + &dlv_r);
        }
    }

    Ok((total / n_pairs, grad))
}

/// Affine rescaling of raw inputs into a sub-interval of [0, 1] so they can
/// serve as Bernoulli targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InputScaler {
    /// Fits per-dimension bounds over both sides of a batch.
    pub fn fit(batch: &PairBatch) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::invalid("cannot fit a scaler on an empty batch"));
        }
        let d = batch.lhs[0].len();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for row in batch.lhs.iter().chain(&batch.rhs) {
            for i in 0..d {
                lo[i] = lo[i].min(row[i]);
                hi[i] = hi[i].max(row[i]);
            }
        }
        Ok(InputScaler { lo, hi })
    }

    /// Maps into [0.05, 0.95]; constant dimensions land on 0.5.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let span = self.hi[i] - self.lo[i];
                if span <= 0.0 {
                    0.5
                } else {
                    (0.05 + 0.9 * (v - self.lo[i]) / span).clamp(0.0, 1.0)
                }
            })
            .collect()
    }

    pub fn apply_batch(&self, batch: &PairBatch) -> PairBatch {
        PairBatch {
            lhs: batch.lhs.iter().map(|x| self.apply(x)).collect(),
            rhs: batch.rhs.iter().map(|x| self.apply(x)).collect(),
            shared: batch.shared.clone(),
        }
    }
}

/// Training configuration for the toy model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig { epochs: 500, learning_rate: 1e-2, seed: 0 }
    }
}

/// A trained toy model plus the input scaler it was trained with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyTrainResult {
    pub model: ToyVae,
    pub scaler: InputScaler,
    pub trace: Vec<f64>,
}

impl ToyTrainResult {
    /// Encodes a raw (unscaled) input to latent (mu, sigma) vectors.
    pub fn encode_raw(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let scaled = self.scaler.apply(x);
        let (mu, lv) = self.model.encode(&scaled);
        let sigma = lv.iter().map(|v| (0.5 * v).exp()).collect();
        (mu, sigma)
    }
}

/// Plain gradient descent on the pairwise ELBO loss. Raw inputs are rescaled
/// into the unit interval first; fresh reparameterization noise is drawn each
/// epoch from the run seed.
pub fn toy_train(batch: &PairBatch, latent_dim: usize, cfg: &ToyTrainConfig) -> Result<ToyTrainResult> {
    if batch.is_empty() {
        return Err(Error::invalid("training requires a non-empty pair batch"));
    }
    let input_dim = batch.lhs[0].len();
    let scaler = InputScaler::fit(batch)?;
    let scaled = scaler.apply_batch(batch);
    scaled.validate(latent_dim)?;

    let mut model = ToyVae::new(input_dim, latent_dim, cfg.seed);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, grad) = loss_and_grad(&model, &scaled, child_seed(cfg.seed, epoch as u64), true)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        trace.push(loss);
        let g = grad.expect("gradient requested");
        let lr = cfg.learning_rate;
        model.enc_mu_w -= lr * &g.enc_mu_w;
        model.enc_mu_b -= lr * &g.enc_mu_b;
        model.enc_lv_w -= lr * &g.enc_lv_w;
        model.enc_lv_b -= lr * &g.enc_lv_b;
        model.dec_w -= lr * &g.dec_w;
        model.dec_b -= lr * &g.dec_b;
    }
    Ok(ToyTrainResult { model, scaler, trace })
}

/// Loss trace as CSV with columns epoch,loss.
pub fn loss_trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in trace.iter().enumerate() {
        out.push_str(&format!("{e},{l}\n"));
    }
    out
}

/// Roundtrip deviation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundtripReport {
    pub max_deviation: f64,
    pub mean_deviation: f64,
    pub n_points: usize,
}

/// Maximum and mean of the infinity-norm deviation between grid points `z`
/// and their re-encoding `encoder(decoder(z))`.
pub fn roundtrip_consistency(model: &ToyVae, z_grid: &[Vec<f64>]) -> Result<RoundtripReport> {
    if z_grid.is_empty() {
        return Err(Error::invalid("roundtrip check requires grid points"));
    }
    let mut max_dev = 0.0f64;
    let mut sum_dev = 0.0f64;
    for z in z_grid {
        if z.len() != model.latent_dim {
            return Err(Error::shape(format!(
                "grid point has {} dims, model latent_dim is {}",
                z.len(),
                model.latent_dim
            )));
        }
        let x = model.decode(z);
        let (mu, _) = model.encode(&x);
        let dev = z
            .iter()
            .zip(&mu)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        max_dev = max_dev.max(dev);
        sum_dev += dev;
    }
    Ok(RoundtripReport {
        max_deviation: max_dev,
        mean_deviation: sum_dev / z_grid.len() as f64,
        n_points: z_grid.len(),
    })
}

/// Latent grid within the prior's +/- 2 sigma box, `points_per_dim` per axis.
pub fn prior_box_grid(latent_dim: usize, points_per_dim: usize) -> Vec<Vec<f64>> {
    let axis: Vec<f64> = (0..points_per_dim)
        .map(|i| -2.0 + 4.0 * i as f64 / (points_per_dim - 1).max(1) as f64)
        .collect();
    let mut grid = vec![vec![]];
    for _ in 0..latent_dim {
        let mut next = Vec::with_capacity(grid.len() * axis.len());
        for g in &grid {
            for &a in &axis {
                let mut h = g.clone();
                h.push(a);
                next.push(h);
            }
        }
        grid = next;
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_normals_spec_examples() {
        let a = Normal { mu: 0.0, sigma: 1.0 };
        let b = Normal { mu: 2.0, sigma: 3.0 };
        let avg = average_normals(a, b);
        assert_eq!(avg.mu, 1.0);
        assert_eq!(avg.sigma, 2.0);
        // Idempotent and commutative.
        assert_eq!(average_normals(a, a), a);
        let c = Normal { mu: 1.0, sigma: 1.0 };
        let d = Normal { mu: -1.0, sigma: 1.0 };
        assert_eq!(average_normals(c, d), Normal { mu: 0.0, sigma: 1.0 });
        assert_eq!(average_normals(c, d), average_normals(d, c));
    }

    #[test]
    fn masked_statistics_spec_examples() {
        let mu_l = vec![1.0, 2.0, 3.0];
        let mu_r = vec![3.0, 4.0, 7.0];
        let lv = vec![0.0, 0.0, 0.0]; // sigma = 1 everywhere

        // S = all indices: both sides equal the average.
        let ((ml, _), (mr, _)) =
            masked_pair_statistics(&mu_l, &lv, &mu_r, &lv, &[0, 1, 2]).unwrap();
        assert_eq!(ml, vec![2.0, 3.0, 5.0]);
        assert_eq!(mr, ml);

        // S = {2}: only dimension 2 is averaged.
        let ((ml, _), (mr, _)) = masked_pair_statistics(&mu_l, &lv, &mu_r, &lv, &[2]).unwrap();
        assert_eq!(ml, vec![1.0, 2.0, 5.0]);
        assert_eq!(mr, vec![3.0, 4.0, 5.0]);

        // Identical inputs: output equals input regardless of S.
        let ((ml, sl), (mr, _)) = masked_pair_statistics(&mu_l, &lv, &mu_l, &lv, &[1]).unwrap();
        assert_eq!(ml, mu_l);
        assert_eq!(mr, mu_l);
        assert_eq!(sl, vec![1.0, 1.0, 1.0]);

        assert!(masked_pair_statistics(&mu_l, &lv, &mu_r, &lv, &[]).is_err());
        assert!(masked_pair_statistics(&mu_l, &lv, &mu_r, &lv, &[3]).is_err());
    }

    #[test]
    fn gaussian_kl_spec_examples() {
        assert_eq!(gaussian_kl(&[0.0], &[1.0], 1.0), 0.0);
        assert_eq!(gaussian_kl(&[1.0], &[1.0], 1.0), 0.5);
        let v = gaussian_kl(&[0.0], &[2.0], 1.0);
        assert!((v - 0.5 * (4.0 - 2.0 * 2.0f64.ln() - 1.0)).abs() < 1e-14);
        assert!((v - 0.806_852_819_440_054_7).abs() < 1e-12);
    }

    #[test]
    fn gaussian_kl_nonnegative_at_unit_lambda() {
        for &(m, s) in &[(0.0, 0.5), (0.3, 1.7), (-2.0, 0.1), (0.0, 1.0)] {
            let v = gaussian_kl(&[m], &[s], 1.0);
            assert!(v >= -1e-12, "kl({m},{s}) = {v}");
        }
    }

    #[test]
    fn bernoulli_loss_spec_examples() {
        let v = bernoulli_recon_loss(&[0.0; 4], &[0.5; 4]).unwrap();
        assert!((v - 4.0 * 2.0f64.ln()).abs() < 1e-12);
        let v = bernoulli_recon_loss(&[50.0; 3], &[1.0; 3]).unwrap();
        assert!(v.abs() < 1e-12);
        assert!(bernoulli_recon_loss(&[0.0], &[1.5]).is_err());

        // High-precision oracle on a fixed 4-vector: direct evaluation with
        // explicit logs.
        let logits = [0.3, -1.2, 2.0, -0.5];
        let targets = [0.1, 0.9, 0.5, 0.0];
        let oracle: f64 = logits
            .iter()
            .zip(&targets)
            .map(|(&l, &t)| {
                let p = 1.0 / (1.0 + (-l as f64).exp());
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let ours = bernoulli_recon_loss(&logits, &targets).unwrap();
        assert!((ours - oracle).abs() < 1e-10);
    }

    fn small_batch() -> PairBatch {
        PairBatch {
            lhs: vec![vec![0.2, 0.7, 0.4], vec![0.9, 0.1, 0.5]],
            rhs: vec![vec![0.3, 0.6, 0.4], vec![0.8, 0.2, 0.5]],
            shared: vec![vec![0], vec![1]],
        }
    }

    #[test]
    fn loss_deterministic_given_seed() {
        let model = ToyVae::new(3, 2, 7);
        let batch = small_batch();
        let a = pairwise_elbo_loss(&model, &batch, 99).unwrap();
        let b = pairwise_elbo_loss(&model, &batch, 99).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let c = pairwise_elbo_loss(&model, &batch, 100).unwrap();
        assert_ne!(a.to_bits(), c.to_bits());
    }

    #[test]
    fn loss_symmetric_under_side_swap() {
        let model = ToyVae::new(3, 2, 7);
        let batch = small_batch();
        let swapped = PairBatch {
            lhs: batch.rhs.clone(),
            rhs: batch.lhs.clone(),
            shared: batch.shared.clone(),
        };
        // Compare expectations over many noise draws: the loss is symmetric
        // as a function, individual draws pair the noise differently.
        let mut a = 0.0;
        let mut b = 0.0;
        for seed in 0..200 {
            a += pairwise_elbo_loss(&model, &batch, seed).unwrap();
            b += pairwise_elbo_loss(&model, &swapped, seed).unwrap();
        }
        assert!((a - b).abs() / a.abs() < 0.02, "{a} vs {b}");
    }

    #[test]
    fn perfect_autoencoder_with_prior_posterior_has_zero_kl() {
        // Posterior equal to the prior on identical pairs: KL term vanishes,
        // only reconstruction remains.
        let dim = 2;
        let mut model = ToyVae::identity(dim);
        model.enc_mu_w = DMatrix::zeros(dim, dim); // mu = 0
        model.dec_w = DMatrix::zeros(dim, dim);
        model.dec_b = DVector::from_element(dim, 0.0); // logits 0 -> p = 0.5
        let batch = PairBatch {
            lhs: vec![vec![0.5, 0.5]],
            rhs: vec![vec![0.5, 0.5]],
            shared: vec![vec![0]],
        };
        let loss = pairwise_elbo_loss(&model, &batch, 5).unwrap();
        // Only the two reconstruction terms remain: 2 * 2 * ln 2.
        assert!((loss - 4.0 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let model = ToyVae::new(4, 3, 21);
        let batch = PairBatch {
            lhs: vec![
                vec![0.2, 0.7, 0.4, 0.9],
                vec![0.9, 0.1, 0.5, 0.3],
                vec![0.4, 0.4, 0.6, 0.5],
            ],
            rhs: vec![
                vec![0.3, 0.6, 0.4, 0.8],
                vec![0.8, 0.2, 0.5, 0.2],
                vec![0.5, 0.3, 0.6, 0.4],
            ],
            shared: vec![vec![0], vec![1], vec![2]],
        };
        let seed = 31;
        let (_, grad) = loss_and_grad(&model, &batch, seed, true).unwrap();
        let grad = grad.unwrap().flat();
        let h = 1e-5;
        for idx in 0..model.n_params() {
            let mut plus = model.clone();
            plus.set_param(idx, model.get_param(idx) + h);
            let mut minus = model.clone();
            minus.set_param(idx, model.get_param(idx) - h);
            let fd = (pairwise_elbo_loss(&plus, &batch, seed).unwrap()
                - pairwise_elbo_loss(&minus, &batch, seed).unwrap())
                / (2.0 * h);
            let denom = fd.abs().max(grad[idx].abs()).max(1e-8);
            assert!(
                (fd - grad[idx]).abs() / denom < 1e-4,
                "param {idx}: analytic {} vs fd {fd}",
                grad[idx]
            );
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let batch = small_batch();
        let cfg = ToyTrainConfig { epochs: 0, ..Default::default() };
        let res = toy_train(&batch, 2, &cfg).unwrap();
        let fresh = ToyVae::new(3, 2, cfg.seed);
        assert_eq!(res.model, fresh);
        assert!(res.trace.is_empty());
    }

    #[test]
    fn training_reduces_smoothed_loss() {
        // A small separable problem: inputs already in (0,1).
        let mut rng = rng_from_seed(3);
        let n = 200;
        let mut lhs = Vec::new();
        let mut rhs = Vec::new();
        let mut shared = Vec::new();
        for p in 0..n {
            let c: f64 = rng.random_range(0.1..0.9);
            let s1: f64 = rng.random_range(0.1..0.9);
            let s2: f64 = rng.random_range(0.1..0.9);
            lhs.push(vec![c, s1]);
            rhs.push(vec![c, s2]);
            shared.push(vec![0]);
            let _ = p;
        }
        let batch = PairBatch { lhs, rhs, shared };
        let res = toy_train(&batch, 2, &ToyTrainConfig { epochs: 300, ..Default::default() }).unwrap();
        let head: f64 = res.trace[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = res.trace[res.trace.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "loss should decrease: {head} -> {tail}");
    }

    #[test]
    fn roundtrip_spec_examples() {
        let model = ToyVae::identity(2);
        let grid = prior_box_grid(2, 5);
        let rep = roundtrip_consistency(&model, &grid).unwrap();
        assert_eq!(rep.max_deviation, 0.0);

        // Exact affine inverse pair: decoder undoes the encoder.
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 3.0]);
        let b = DVector::from_column_slice(&[0.5, -1.0]);
        let w_inv = w.clone().try_inverse().unwrap();
        let model = ToyVae {
            input_dim: 2,
            latent_dim: 2,
            enc_mu_w: w.clone(),
            enc_mu_b: b.clone(),
            enc_lv_w: DMatrix::zeros(2, 2),
            enc_lv_b: DVector::zeros(2),
            dec_w: w_inv.clone(),
            dec_b: -&w_inv * b,
        };
        let rep = roundtrip_consistency(&model, &grid).unwrap();
        assert!(rep.max_deviation <= 1e-8, "{}", rep.max_deviation);
    }
}
