//! Model adapters: how (re)trainable models participate in holdout tests.
//!
//! A [`ModelBackend`] can be trained on a dataset and returns a
//! [`TrainedModel`] that predicts distributions (and, when available, latent
//! embeddings). Two families exist:
//!
//! - in-process stub backends used by the test suites, and
//! - [`SubprocessAdapter`], which drives an external executable through the
//!   wire protocol `train --data <jsonl> --out <dir>` /
//!   `predict --model <dir> --data <jsonl> --out <jsonl>`.
//!
//! Prediction files are JSON Lines of `{"id": ..., "y_pred": [...]}`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{dataset_to_jsonl, CertDataset};
use crate::dist::PredictiveDistribution;
use crate::error::{Error, Result};
use crate::linear::fit_ols;

/// Declarative adapter description (what a run config carries).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ModelAdapter {
    /// Predictions and latents are read from the dataset itself.
    Precomputed,
    /// An external executable speaking the train/predict protocol.
    Subprocess {
        /// Program followed by fixed leading arguments.
        command: Vec<String>,
        #[serde(default)]
        workdir: Option<PathBuf>,
        timeout_secs: f64,
    },
}

impl ModelAdapter {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelAdapter::Precomputed => Ok(()),
            ModelAdapter::Subprocess { command, timeout_secs, .. } => {
                if command.is_empty() {
                    return Err(Error::invalid("subprocess adapter command must be non-empty"));
                }
                if !(*timeout_secs > 0.0) {
                    return Err(Error::invalid("subprocess adapter timeout must be > 0"));
                }
                Ok(())
            }
        }
    }
}

/// A trainable model participating in holdout tests.
pub trait ModelBackend {
    fn train(&self, data: &CertDataset) -> Result<Box<dyn TrainedModel>>;
}

/// A trained model: predicts distributions per record; encoders additionally
/// expose latent embeddings.
pub trait TrainedModel {
    /// One vector of predictive distributions (length m) per record.
    fn predict(&self, data: &CertDataset) -> Result<Vec<Vec<PredictiveDistribution>>>;

    /// Latent embedding per record; only encoder-style models support this.
    fn encode(&self, _data: &CertDataset) -> Result<Vec<Vec<f64>>> {
        Err(Error::adapter("this adapter does not expose an encoder"))
    }
}

/// Trains on `train`, predicts on `eval`, and returns `eval` with `y_pred`
/// filled in. Input datasets are never mutated; record order is preserved.
pub fn train_eval(
    backend: &dyn ModelBackend,
    train: &CertDataset,
    eval: &CertDataset,
) -> Result<CertDataset> {
    let model = backend.train(train)?;
    let preds = model.predict(eval)?;
    if preds.len() != eval.len() {
        return Err(Error::adapter(format!(
            "model returned {} prediction rows for {} records",
            preds.len(),
            eval.len()
        )));
    }
    let mut out = eval.clone();
    for (r, p) in out.records.iter_mut().zip(preds) {
        if p.len() != out.schema.output_dims {
            return Err(Error::adapter(format!(
                "record {}: {} predictions for {} outputs",
                r.id,
                p.len(),
                out.schema.output_dims
            )));
        }
        r.y_pred = Some(p);
    }
    Ok(out)
}

/// Subprocess form of [`train_eval`] for adapters in subprocess mode.
pub fn adapter_train_eval(
    adapter: &ModelAdapter,
    train: &CertDataset,
    eval: &CertDataset,
) -> Result<CertDataset> {
    adapter.validate()?;
    match adapter {
        ModelAdapter::Subprocess { command, workdir, timeout_secs } => {
            let backend = SubprocessAdapter {
                command: command.clone(),
                workdir: workdir.clone(),
                timeout: Duration::from_secs_f64(*timeout_secs),
            };
            train_eval(&backend, train, eval)
        }
        ModelAdapter::Precomputed => {
            Err(Error::adapter("adapter_train_eval requires an adapter in subprocess mode"))
        }
    }
}

/// Drives an external executable through the train/predict protocol. Every
/// invocation runs in its own scratch directory, so adapters may be used
/// concurrently.
pub struct SubprocessAdapter {
    pub command: Vec<String>,
    pub workdir: Option<PathBuf>,
    pub timeout: Duration,
}

impl SubprocessAdapter {
    pub fn new(command: Vec<String>, timeout: Duration) -> Self {
        SubprocessAdapter { command, workdir: None, timeout }
    }

    fn run(&self, args: &[&str], cwd: &Path) -> Result<()> {
        let (program, prefix) = self
            .command
            .split_first()
            .ok_or_else(|| Error::adapter("subprocess adapter command must be non-empty"))?;
        let mut cmd = Command::new(program);
        cmd.args(prefix)
            .args(args)
            .current_dir(self.workdir.as_deref().unwrap_or(cwd))
            .stdout(Stdio::null())
            .stderr(Stdio::piped());
        let mut child = cmd
            .spawn()
            .map_err(|e| Error::adapter(format!("cannot spawn {program}: {e}")))?;
        let deadline = Instant::now() + self.timeout;
        loop {
            match child.try_wait() {
                Ok(Some(status)) => {
                    if status.success() {
                        return Ok(());
                    }
                    let stderr = read_stderr(&mut child);
                    return Err(Error::adapter(format!(
                        "{program} {} exited with {status}: {stderr}",
                        args.join(" ")
                    )));
                }
                Ok(None) => {
                    if Instant::now() >= deadline {
                        let _ = child.kill();
                        let _ = child.wait();
                        return Err(Error::adapter(format!(
                            "{program} {} timed out after {:.1}s",
                            args.join(" "),
                            self.timeout.as_secs_f64()
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(Error::adapter(format!("wait failed: {e}"))),
            }
        }
    }
}

fn read_stderr(child: &mut std::process::Child) -> String {
    use std::io::Read;
    let mut buf = String::new();
    if let Some(mut err) = child.stderr.take() {
        let _ = err.read_to_string(&mut buf);
    }
    buf.trim().to_string()
}

/// One line of a predictions file.
#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub y_pred: Vec<PredictiveDistribution>,
}

/// Scratch directories default to the system temp dir; the
/// `CERTKIT_SCRATCH` environment variable overrides the location.
fn scratch_dir() -> std::io::Result<tempfile::TempDir> {
    let builder = {
        let mut b = tempfile::Builder::new();
        b.prefix("certkit-adapter-");
        b
    };
    match std::env::var_os("CERTKIT_SCRATCH") {
        Some(dir) => builder.tempdir_in(dir),
        None => builder.tempdir(),
    }
}

impl ModelBackend for SubprocessAdapter {
    fn train(&self, data: &CertDataset) -> Result<Box<dyn TrainedModel>> {
        let scratch = scratch_dir()
            .map_err(|e| Error::adapter(format!("cannot create scratch dir: {e}")))?;
        let train_path = scratch.path().join("train.jsonl");
        std::fs::write(&train_path, dataset_to_jsonl(data)?)?;
        let model_dir = scratch.path().join("model");
        std::fs::create_dir_all(&model_dir)?;
        self.run(
            &[
                "train",
                "--data",
                train_path.to_str().expect("utf-8 path"),
                "--out",
                model_dir.to_str().expect("utf-8 path"),
            ],
            scratch.path(),
        )?;
        Ok(Box::new(TrainedSubprocessModel {
            adapter: SubprocessAdapter {
                command: self.command.clone(),
                workdir: self.workdir.clone(),
                timeout: self.timeout,
            },
            scratch,
            model_dir,
        }))
    }
}

struct TrainedSubprocessModel {
    adapter: SubprocessAdapter,
    // Holds the scratch directory alive for the lifetime of the model.
    scratch: tempfile::TempDir,
    model_dir: PathBuf,
}

impl TrainedModel for TrainedSubprocessModel {
    fn predict(&self, data: &CertDataset) -> Result<Vec<Vec<PredictiveDistribution>>> {
        let eval_path = self.scratch.path().join("eval.jsonl");
        std::fs::write(&eval_path, dataset_to_jsonl(data)?)?;
        let preds_path = self.scratch.path().join("preds.jsonl");
        self.adapter.run(
            &[
                "predict",
                "--model",
                self.model_dir.to_str().expect("utf-8 path"),
                "--data",
                eval_path.to_str().expect("utf-8 path"),
                "--out",
                preds_path.to_str().expect("utf-8 path"),
            ],
            self.scratch.path(),
        )?;
        let text = std::fs::read_to_string(&preds_path)
            .map_err(|e| Error::adapter(format!("cannot read predictions: {e}")))?;
        let mut by_id: HashMap<String, Vec<PredictiveDistribution>> = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: PredictionRow = serde_json::from_str(line).map_err(|e| {
                Error::adapter(format!("malformed prediction line {}: {e}", idx + 1))
            })?;
            for (i, p) in row.y_pred.iter().enumerate() {
                p.validate()
                    .map_err(|e| Error::adapter(format!("prediction {}[{i}]: {e}", row.id)))?;
            }
            by_id.insert(row.id, row.y_pred);
        }
        let mut missing = Vec::new();
        let mut out = Vec::with_capacity(data.len());
        for r in &data.records {
            match by_id.get(&r.id) {
                Some(p) => out.push(p.clone()),
                None => missing.push(r.id.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::adapter(format!(
                "adapter omitted predictions for ids: {}",
                missing.join(", ")
            )));
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// In-repo stub backends. These keep the holdout and collapse suites runnable
// without any external model.
// ---------------------------------------------------------------------------

/// Predicts `Normal(mean of training y, sigma)` for every record.
pub struct MeanStub {
    pub sigma: f64,
}

impl ModelBackend for MeanStub {
    fn train(&self, data: &CertDataset) -> Result<Box<dyn TrainedModel>> {
        let m = data.schema.output_dims;
        let mut means = vec![0.0; m];
        for r in &data.records {
            for (j, y) in r.y_obs.iter().enumerate() {
                means[j] += y;
            }
        }
        for v in &mut means {
            *v /= data.len() as f64;
        }
        Ok(Box::new(TrainedMeanStub { means, sigma: self.sigma }))
    }
}

struct TrainedMeanStub {
    means: Vec<f64>,
    sigma: f64,
}

impl TrainedModel for TrainedMeanStub {
    fn predict(&self, data: &CertDataset) -> Result<Vec<Vec<PredictiveDistribution>>> {
        data.records
            .iter()
            .map(|_| {
                self.means
                    .iter()
                    .map(|&m| PredictiveDistribution::normal(m, self.sigma))
                    .collect()
            })
            .collect()
    }
}

/// Ordinary least squares from the content features to each output; the
/// faithful baseline for linear ground truths.
pub struct LinearStub {
    /// Predictive sigma floor so outputs stay valid distributions.
    pub min_sigma: f64,
}

impl Default for LinearStub {
    fn default() -> Self {
        LinearStub { min_sigma: 1e-6 }
    }
}

impl ModelBackend for LinearStub {
    fn train(&self, data: &CertDataset) -> Result<Box<dyn TrainedModel>> {
        let n = data.len();
        let k = data.schema.content_dims;
        let design = nalgebra::DMatrix::from_fn(n, k, |i, j| data.records[i].v_content[j]);
        let mut fits = Vec::new();
        for j in 0..data.schema.output_dims {
            let target = nalgebra::DVector::from_fn(n, |i, _| data.records[i].y_obs[j]);
            let fit = fit_ols(&design, &target)?;
            let sigma = fit.sigma2_hat.sqrt().max(self.min_sigma);
            fits.push((fit.betas, sigma));
        }
        Ok(Box::new(TrainedLinearStub { fits }))
    }
}

struct TrainedLinearStub {
    /// Per output: (coefficients with intercept last, residual sigma).
    fits: Vec<(Vec<f64>, f64)>,
}

impl TrainedModel for TrainedLinearStub {
    fn predict(&self, data: &CertDataset) -> Result<Vec<Vec<PredictiveDistribution>>> {
        data.records
            .iter()
            .map(|r| {
                self.fits
                    .iter()
                    .map(|(betas, sigma)| {
                        let (coef, intercept) = betas.split_at(betas.len() - 1);
                        let mut y = intercept[0];
                        for (b, v) in coef.iter().zip(&r.v_content) {
                            y += b * v;
                        }
                        PredictiveDistribution::normal(y, *sigma)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Memorizes training rows and predicts the nearest neighbour's observation;
/// deliberately does not generalize to unseen feature combinations.
pub struct NearestNeighborStub {
    pub sigma: f64,
}

impl ModelBackend for NearestNeighborStub {
    fn train(&self, data: &CertDataset) -> Result<Box<dyn TrainedModel>> {
        Ok(Box::new(TrainedNearestNeighbor {
            features: data.records.iter().map(|r| r.v_content.clone()).collect(),
            targets: data.records.iter().map(|r| r.y_obs.clone()).collect(),
            sigma: self.sigma,
        }))
    }
}

struct TrainedNearestNeighbor {
    features: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    sigma: f64,
}

impl TrainedModel for TrainedNearestNeighbor {
    fn predict(&self, data: &CertDataset) -> Result<Vec<Vec<PredictiveDistribution>>> {
        data.records
            .iter()
            .map(|r| {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (i, f) in self.features.iter().enumerate() {
                    let d: f64 = f
                        .iter()
                        .zip(&r.v_content)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                self.targets[best]
                    .iter()
                    .map(|&y| PredictiveDistribution::normal(y, self.sigma))
                    .collect()
            })
            .collect()
    }
}

/// How a stub encoder maps a content feature to an embedding coordinate.
#[derive(Debug, Clone, Copy)]
pub enum EncoderKind {
    /// Faithful monotone map `z_i = v_i`.
    Monotone,
    /// `z_i = tanh(gain * v_i)`: collapses extreme inputs onto the training
    /// range in floating point.
    Saturating { gain: f64 },
    /// Maps everything to the same point.
    Constant { value: f64 },
}

/// Stub encoder backend for the feature-collapse test. Training is a no-op;
/// the map itself is fixed.
pub struct EncoderStub {
    pub kind: EncoderKind,
    pub sigma: f64,
}

impl EncoderStub {
    pub fn monotone() -> Self {
        EncoderStub { kind: EncoderKind::Monotone, sigma: 1.0 }
    }

    pub fn saturating(gain: f64) -> Self {
        EncoderStub { kind: EncoderKind::Saturating { gain }, sigma: 1.0 }
    }

    pub fn constant(value: f64) -> Self {
        EncoderStub { kind: EncoderKind::Constant { value }, sigma: 1.0 }
    }
}

impl ModelBackend for EncoderStub {
    fn train(&self, _data: &CertDataset) -> Result<Box<dyn TrainedModel>> {
        Ok(Box::new(TrainedEncoderStub {
            kind: self.kind,
            sigma: self.sigma,
        }))
    }
}

struct TrainedEncoderStub {
    kind: EncoderKind,
    sigma: f64,
}

impl TrainedEncoderStub {
    fn map(&self, v: f64) -> f64 {
        match self.kind {
            EncoderKind::Monotone => v,
            EncoderKind::Saturating { gain } => (gain * v).tanh(),
            EncoderKind::Constant { value } => value,
        }
    }
}

impl TrainedModel for TrainedEncoderStub {
    fn predict(&self, data: &CertDataset) -> Result<Vec<Vec<PredictiveDistribution>>> {
        data.records
            .iter()
            .map(|r| {
                (0..data.schema.output_dims)
                    .map(|j| {
                        let v = r.v_content.get(j).copied().unwrap_or(0.0);
                        PredictiveDistribution::normal(self.map(v), self.sigma)
                    })
                    .collect()
            })
            .collect()
    }

    fn encode(&self, data: &CertDataset) -> Result<Vec<Vec<f64>>> {
        Ok(data
            .records
            .iter()
            .map(|r| r.v_content.iter().map(|&v| self.map(v)).collect())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CertRecord;

    fn toy_dataset(ys: &[f64]) -> CertDataset {
        let records = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| CertRecord {
                id: format!("r{i}"),
                v_content: vec![i as f64],
                v_style: vec![],
                y_obs: vec![y],
                y_pred: None,
                latents: None,
            })
            .collect();
        CertDataset::from_records(records).unwrap()
    }

    #[test]
    fn mean_stub_contract() {
        let train = toy_dataset(&[1.0, 2.0, 3.0]);
        let eval = toy_dataset(&[0.0, 0.0]);
        let backend = MeanStub { sigma: 1.0 };
        let out = train_eval(&backend, &train, &eval).unwrap();
        for r in &out.records {
            let p = &r.y_pred.as_ref().unwrap()[0];
            assert!((p.mean() - 2.0).abs() < 1e-12);
        }
        // Inputs untouched.
        assert!(eval.records.iter().all(|r| r.y_pred.is_none()));
    }

    #[test]
    fn precomputed_mode_rejected_for_train_eval() {
        let ds = toy_dataset(&[1.0]);
        let err = adapter_train_eval(&ModelAdapter::Precomputed, &ds, &ds).unwrap_err();
        assert!(err.to_string().contains("subprocess mode"));
    }

    #[test]
    fn adapter_invariants() {
        assert!(ModelAdapter::Subprocess {
            command: vec![],
            workdir: None,
            timeout_secs: 5.0
        }
        .validate()
        .is_err());
        assert!(ModelAdapter::Subprocess {
            command: vec!["x".into()],
            workdir: None,
            timeout_secs: 0.0
        }
        .validate()
        .is_err());
    }
}
