//! Dataset schema, JSON Lines ingestion/validation, and model adapters.
//!
//! One evaluation sample is a [`CertRecord`]: an id, its semantic feature
//! vector (content + style), the observed outputs, optional predictive
//! distributions and optional per-ensemble-member latent Gaussians. Records
//! reference model inputs by id only; image payloads never enter the harness.

pub mod model;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dist::PredictiveDistribution;
use crate::error::{Error, Result};

/// Mean and standard deviation of one latent dimension as emitted by an
/// encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    pub mu: f64,
    pub sigma: f64,
}

impl LatentGaussian {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() {
            return Err(Error::invalid("latent parameters must be finite"));
        }
        if sigma <= 0.0 {
            return Err(Error::invalid(format!("latent sigma must be > 0, got {sigma}")));
        }
        Ok(LatentGaussian { mu, sigma })
    }
}

/// Per-content-dimension interval `[a_i, b_i]` defining the certified
/// operating envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingRange {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl OperatingRange {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::shape(format!(
                "operating range bounds disagree: {} vs {}",
                lo.len(),
                hi.len()
            )));
        }
        for (i, (a, b)) in lo.iter().zip(&hi).enumerate() {
            if !a.is_finite() || !b.is_finite() || b <= a {
                return Err(Error::invalid(format!(
                    "operating range dim {i} requires finite b > a, got [{a}, {b}]"
                )));
            }
        }
        Ok(OperatingRange { lo, hi })
    }

    pub fn dims(&self) -> usize {
        self.lo.len()
    }

    pub fn bounds(&self, i: usize) -> (f64, f64) {
        (self.lo[i], self.hi[i])
    }
}

/// One evaluation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertRecord {
    pub id: String,
    pub v_content: Vec<f64>,
    /// Style labels; `null` marks a missing label.
    pub v_style: Vec<Option<f64>>,
    pub y_obs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_pred: Option<Vec<PredictiveDistribution>>,
    /// Per ensemble member, one latent Gaussian per latent dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latents: Option<Vec<Vec<LatentGaussian>>>,
}

/// Dimensions every record of a dataset must agree on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    /// Content feature count (k).
    pub content_dims: usize,
    /// Style feature count (l).
    pub style_dims: usize,
    /// Observed output count (m).
    pub output_dims: usize,
    /// Ensemble member count (E); 0 when no latents are stored.
    pub ensemble_size: usize,
}

/// An immutable, validated collection of records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertDataset {
    pub schema: DatasetSchema,
    pub records: Vec<CertRecord>,
}

impl CertDataset {
    /// Builds a dataset from records, inferring and enforcing the schema.
    pub fn from_records(records: Vec<CertRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("dataset must contain at least one record"));
        }
        let schema = schema_of(&records[0]);
        for (i, r) in records.iter().enumerate() {
            validate_record(r, &schema).map_err(|msg| Error::DataLoad {
                line: i + 1,
                message: msg,
            })?;
        }
        Ok(CertDataset { schema, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Observed values of one output dimension across all records.
    pub fn observations(&self, output_index: usize) -> Result<Vec<f64>> {
        if output_index >= self.schema.output_dims {
            return Err(Error::shape(format!(
                "output index {output_index} out of range (m = {})",
                self.schema.output_dims
            )));
        }
        Ok(self.records.iter().map(|r| r.y_obs[output_index]).collect())
    }

    /// Predictive distributions of one output dimension, if present.
    pub fn predictions(&self, output_index: usize) -> Result<Vec<PredictiveDistribution>> {
        if output_index >= self.schema.output_dims {
            return Err(Error::shape(format!(
                "output index {output_index} out of range (m = {})",
                self.schema.output_dims
            )));
        }
        self.records
            .iter()
            .map(|r| {
                r.y_pred
                    .as_ref()
                    .map(|p| p[output_index].clone())
                    .ok_or_else(|| Error::invalid(format!("record {} has no predictions", r.id)))
            })
            .collect()
    }

    pub fn has_predictions(&self) -> bool {
        self.records.iter().all(|r| r.y_pred.is_some())
    }

    /// Style feature indices that carry a label in every record.
    pub fn fully_labeled_style_features(&self) -> Vec<usize> {
        (0..self.schema.style_dims)
            .filter(|&j| self.records.iter().all(|r| r.v_style[j].is_some()))
            .collect()
    }

    /// Restricts the dataset to the given record indices (order preserved).
    pub fn subset(&self, indices: &[usize]) -> Result<CertDataset> {
        let mut records = Vec::with_capacity(indices.len());
        for &i in indices {
            let r = self
                .records
                .get(i)
                .ok_or_else(|| Error::shape(format!("record index {i} out of range")))?;
            records.push(r.clone());
        }
        CertDataset::from_records(records)
    }
}

fn schema_of(r: &CertRecord) -> DatasetSchema {
    DatasetSchema {
        content_dims: r.v_content.len(),
        style_dims: r.v_style.len(),
        output_dims: r.y_obs.len(),
        ensemble_size: r.latents.as_ref().map_or(0, |l| l.len()),
    }
}

fn validate_record(r: &CertRecord, schema: &DatasetSchema) -> std::result::Result<(), String> {
    if r.id.is_empty() {
        return Err("id must be non-empty".into());
    }
    if r.v_content.len() != schema.content_dims {
        return Err(format!(
            "v_content has {} entries, expected k = {}",
            r.v_content.len(),
            schema.content_dims
        ));
    }
    if r.v_style.len() != schema.style_dims {
        return Err(format!(
            "v_style has {} entries, expected l = {}",
            r.v_style.len(),
            schema.style_dims
        ));
    }
    if r.y_obs.len() != schema.output_dims {
        return Err(format!(
            "y_obs has {} entries, expected m = {}",
            r.y_obs.len(),
            schema.output_dims
        ));
    }
    for (i, v) in r.v_content.iter().enumerate() {
        if !v.is_finite() {
            return Err(format!("v_content[{i}] must be finite"));
        }
    }
    for (i, v) in r.v_style.iter().enumerate() {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(format!("v_style[{i}] must be finite"));
            }
        }
    }
    for (i, v) in r.y_obs.iter().enumerate() {
        if !v.is_finite() {
            return Err(format!("y_obs[{i}] must be finite"));
        }
    }
    if let Some(preds) = &r.y_pred {
        if preds.len() != schema.output_dims {
            return Err(format!(
                "y_pred has {} entries, expected m = {}",
                preds.len(),
                schema.output_dims
            ));
        }
        for (i, p) in preds.iter().enumerate() {
            p.validate().map_err(|e| format!("y_pred[{i}]: {e}"))?;
        }
    }
    if let Some(latents) = &r.latents {
        if latents.len() != schema.ensemble_size {
            return Err(format!(
                "latents has {} members, expected E = {}",
                latents.len(),
                schema.ensemble_size
            ));
        }
        let latent_dims = schema.content_dims + schema.style_dims;
        for (e, member) in latents.iter().enumerate() {
            if member.len() != latent_dims {
                return Err(format!(
                    "latents[{e}] has {} dims, expected k + l = {latent_dims}",
                    member.len()
                ));
            }
            for (i, lg) in member.iter().enumerate() {
                if !lg.mu.is_finite() || !lg.sigma.is_finite() {
                    return Err(format!("latents[{e}][{i}] must be finite"));
                }
                if lg.sigma <= 0.0 {
                    return Err(format!("latents[{e}][{i}].sigma must be > 0"));
                }
            }
        }
    } else if schema.ensemble_size != 0 {
        return Err(format!(
            "latents missing, expected E = {} members",
            schema.ensemble_size
        ));
    }
    Ok(())
}

/// Loads a JSON Lines dataset, validating every record.
///
/// When `expected` is given, the inferred schema must match it exactly.
/// Errors name the offending 1-based line and field.
pub fn load_dataset(path: impl AsRef<Path>, expected: Option<DatasetSchema>) -> Result<CertDataset> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| {
        Error::adapter(format!("cannot read dataset {}: {e}", path.as_ref().display()))
    })?;
    load_dataset_str(&text, expected)
}

/// Same as [`load_dataset`] but from an in-memory string.
pub fn load_dataset_str(text: &str, expected: Option<DatasetSchema>) -> Result<CertDataset> {
    let mut records = Vec::new();
    let mut schema: Option<DatasetSchema> = expected;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: CertRecord = serde_json::from_str(line).map_err(|e| Error::DataLoad {
            line: line_no,
            message: format!("malformed record: {e}"),
        })?;
        let s = schema.get_or_insert_with(|| schema_of(&record));
        validate_record(&record, s).map_err(|message| Error::DataLoad {
            line: line_no,
            message,
        })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::invalid("dataset contains no records"));
    }
    Ok(CertDataset {
        schema: schema.expect("schema set with first record"),
        records,
    })
}

/// Canonical JSON Lines serialization of a dataset.
pub fn dataset_to_jsonl(dataset: &CertDataset) -> Result<String> {
    let mut out = String::new();
    for r in &dataset.records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes a dataset as UTF-8 JSON Lines with `\n` termination.
pub fn write_dataset(dataset: &CertDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(dataset_to_jsonl(dataset)?.as_bytes())?;
    Ok(())
}

/// Performance score for holdout comparisons: negative mean squared error of
/// the distribution means against the observations (larger is better).
pub fn eval_model_performance(preds: &[PredictiveDistribution], obs: &[f64]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::invalid("performance evaluation requires at least one sample"));
    }
    if preds.len() != obs.len() {
        return Err(Error::shape(format!(
            "predictions ({}) and observations ({}) disagree",
            preds.len(),
            obs.len()
        )));
    }
    let mse = preds
        .iter()
        .zip(obs)
        .map(|(p, y)| {
            let d = p.mean() - y;
            d * d
        })
        .sum::<f64>()
        / obs.len() as f64;
    Ok(-mse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::Normal;

    fn record(id: &str) -> CertRecord {
        CertRecord {
            id: id.into(),
            v_content: vec![1.0, 2.0],
            v_style: vec![Some(0.5), None],
            y_obs: vec![3.0],
            y_pred: Some(vec![PredictiveDistribution::normal(3.0, 1.0).unwrap()]),
            latents: None,
        }
    }

    #[test]
    fn loads_well_formed_lines() {
        let ds = CertDataset::from_records(vec![record("a"), record("b"), record("c")]).unwrap();
        let text = dataset_to_jsonl(&ds).unwrap();
        let loaded = load_dataset_str(&text, None).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded.schema.content_dims, 2);
        assert_eq!(loaded.schema.style_dims, 2);
        assert_eq!(loaded.schema.output_dims, 1);
        assert_eq!(loaded.schema.ensemble_size, 0);
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let ds = CertDataset::from_records(vec![record("a"), record("b")]).unwrap();
        let text = dataset_to_jsonl(&ds).unwrap();
        let loaded = load_dataset_str(&text, None).unwrap();
        let text2 = dataset_to_jsonl(&loaded).unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn rejects_zero_sigma_latent_naming_line_and_field() {
        let mut bad = record("bad");
        bad.latents = Some(vec![
            vec![
                LatentGaussian { mu: 0.0, sigma: 1.0 },
                LatentGaussian { mu: 0.0, sigma: 1.0 },
                LatentGaussian { mu: 0.0, sigma: 1.0 },
                LatentGaussian { mu: 0.0, sigma: 1.0 },
            ];
            3
        ]);
        bad.latents.as_mut().unwrap()[2][0].sigma = 0.0;
        let mut lines = Vec::new();
        let mut good = record("g");
        good.latents = Some(vec![
            vec![LatentGaussian { mu: 0.0, sigma: 1.0 }; 4];
            3
        ]);
        for _ in 0..16 {
            lines.push(serde_json::to_string(&good).unwrap());
        }
        lines.push(serde_json::to_string(&bad).unwrap());
        let text = lines.join("\n");
        let err = load_dataset_str(&text, None).unwrap_err();
        let msg = err.to_string();
        assert_eq!(msg, "latents[2][0].sigma must be > 0 (line 17)");
    }

    #[test]
    fn rejects_dimension_mismatch_against_expected_schema() {
        let text = dataset_to_jsonl(
            &CertDataset::from_records(vec![record("a")]).unwrap(),
        )
        .unwrap();
        // Header says k = 3, record carries a 2-element v_content.
        let expected = DatasetSchema {
            content_dims: 3,
            style_dims: 2,
            output_dims: 1,
            ensemble_size: 0,
        };
        let err = load_dataset_str(&text, Some(expected)).unwrap_err();
        assert!(err.to_string().contains("v_content has 2 entries, expected k = 3"));
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn rejects_non_finite_values() {
        let mut bad = record("a");
        bad.y_obs = vec![f64::NAN];
        // NaN does not survive JSON; emulate a hand-written file instead.
        let line = r#"{"id":"a","v_content":[1.0,2.0],"v_style":[0.5,null],"y_obs":["nope"]}"#;
        assert!(load_dataset_str(line, None).is_err());
        assert!(CertDataset::from_records(vec![bad]).is_err());
    }

    #[test]
    fn performance_spec_examples() {
        let obs = vec![1.0, 2.0, 3.0];
        let exact: Vec<_> = obs
            .iter()
            .map(|&y| PredictiveDistribution::normal(y, 1.0).unwrap())
            .collect();
        assert_eq!(eval_model_performance(&exact, &obs).unwrap(), 0.0);

        let off: Vec<_> = obs
            .iter()
            .map(|&y| PredictiveDistribution::normal(y + 1.0, 1.0).unwrap())
            .collect();
        assert_eq!(eval_model_performance(&off, &obs).unwrap(), -1.0);

        // Errors {0, 2} -> mean of {0, 4} = 2.
        let mixed = vec![
            PredictiveDistribution::normal(1.0, 1.0).unwrap(),
            PredictiveDistribution::normal(4.0, 1.0).unwrap(),
        ];
        assert_eq!(eval_model_performance(&mixed, &obs[..2]).unwrap(), -2.0);

        assert!(eval_model_performance(&[], &[]).is_err());
    }

    #[test]
    fn mixture_prediction_serializes_with_type_and_params() {
        let r = CertRecord {
            id: "m".into(),
            v_content: vec![],
            v_style: vec![],
            y_obs: vec![0.0],
            y_pred: Some(vec![PredictiveDistribution::mixture(vec![
                Normal { mu: 0.0, sigma: 1.0 },
                Normal { mu: 1.0, sigma: 2.0 },
            ])
            .unwrap()]),
            latents: None,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains(r#""type":"mixture""#));
        assert!(s.contains(r#""params":{"members""#));
        let back: CertRecord = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }
}
