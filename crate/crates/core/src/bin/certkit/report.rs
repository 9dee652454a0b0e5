//! The report document: report.json is authoritative, report.md mirrors it.
//! Timestamps live in a separate metadata block so reports from identical
//! (config, seed, dataset) runs are byte-identical outside `meta`.

use serde::{Deserialize, Serialize};

use certkit::calibration::UqCertification;
use certkit::generalization::{DisagreementReport, FeatureCombinationResult};
use certkit::lipschitz::{BiLipschitzBounds, LayerSpec};
use certkit::report::TestOutcome;
use certkit::simstudy::FailureTable;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportDoc {
    pub version: u32,
    pub meta: ReportMeta,
    pub seed: u64,
    pub certified: bool,
    pub suites: SuitesReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportMeta {
    pub created_unix: u64,
    pub config: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SuitesReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<UqCertification>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disentanglement: Option<DisentanglementSuite>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generalization: Option<GeneralizationSuite>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ood: Option<OodSuite>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<LipschitzSuite>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simstudy: Option<SimstudySuite>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PvalueRow {
    pub factor: usize,
    pub latent_index: usize,
    pub beta: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DisentanglementSuite {
    pub passed: bool,
    pub one_to_one: TestOutcome,
    pub separation: TestOutcome,
    pub pvalues: Vec<PvalueRow>,
    /// Present when the suite trained the desk-scale toy model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_trace: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneralizationSuite {
    pub passed: bool,
    pub feature_combinations: FeatureCombinationResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_collapse: Option<TestOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disagreement: Option<DisagreementReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OodSuite {
    pub passed: bool,
    pub n_records: usize,
    pub n_flagged: usize,
    pub flagged_fraction: f64,
    pub max_flagged_fraction: f64,
    pub tau_ood: f64,
    pub flagged_ids: Vec<String>,
    /// Orientation flags were defaulted, not calibrated from annotations.
    pub orientation_assumed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LipschitzSuite {
    pub passed: bool,
    pub layers: Vec<LayerSpec>,
    pub bounds: BiLipschitzBounds,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_lower: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_upper: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimstudySuite {
    pub passed: bool,
    pub table: FailureTable,
    pub recommend_eps: f64,
    pub target_failure: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recommended_n: Option<usize>,
}

fn fmt_outcome(md: &mut String, o: &TestOutcome) {
    let verdict = if o.skipped {
        "SKIPPED"
    } else if o.passed {
        "PASS"
    } else {
        "FAIL"
    };
    md.push_str(&format!("- `{}`: **{verdict}**", o.name));
    if let Some(d) = &o.detail {
        md.push_str(&format!(" ({d})"));
    }
    md.push('\n');
    for (k, v) in &o.statistics {
        md.push_str(&format!("  - {k} = {v}\n"));
    }
    if let Some(sg) = &o.subgroup {
        md.push_str(&format!(
            "  - subgroup: {} #{} values [{}, {}] ({} records)\n",
            sg.feature, sg.subgroup_index, sg.value_lo, sg.value_hi, sg.size
        ));
    }
}

/// Markdown mirror of the report document.
pub fn render_markdown(doc: &ReportDoc) -> String {
    let mut md = String::new();
    md.push_str("# Certification report\n\n");
    md.push_str(&format!(
        "- overall: **{}**\n- seed: {}\n- report version: {}\n\n",
        if doc.certified { "CERTIFIED" } else { "NOT CERTIFIED" },
        doc.seed,
        doc.version
    ));

    if let Some(c) = &doc.suites.calibration {
        md.push_str("## Calibration and dispersion\n\n");
        if c.skipped {
            md.push_str(&format!(
                "- {}\n\n",
                c.skip_reason.as_deref().unwrap_or("skipped")
            ));
        } else {
            for m in &c.marginal {
                md.push_str(&format!("### Output {}\n\n", m.output_index));
                fmt_outcome(&mut md, &m.calibration);
                fmt_outcome(&mut md, &m.dispersion);
            }
            if let (Some(a), Some(d)) = (&c.aggregate_calibration, &c.aggregate_dispersion) {
                md.push_str("\n### Conditional aggregation\n\n");
                fmt_outcome(&mut md, a);
                fmt_outcome(&mut md, d);
            }
            if !c.failing_subgroups.is_empty() {
                md.push_str("\n### Failing subgroups\n\n");
                for sg in &c.failing_subgroups {
                    md.push_str(&format!(
                        "- {} #{} values [{}, {}] ({} records)\n",
                        sg.feature, sg.subgroup_index, sg.value_lo, sg.value_hi, sg.size
                    ));
                }
            }
            md.push('\n');
        }
    }

    if let Some(d) = &doc.suites.disentanglement {
        md.push_str("## Disentanglement\n\n");
        fmt_outcome(&mut md, &d.one_to_one);
        fmt_outcome(&mut md, &d.separation);
        md.push('\n');
    }

    if let Some(g) = &doc.suites.generalization {
        md.push_str("## Generalization\n\n");
        fmt_outcome(&mut md, &g.feature_combinations.outcome);
        if let Some(c) = &g.feature_collapse {
            fmt_outcome(&mut md, c);
        }
        if let Some(da) = &g.disagreement {
            fmt_outcome(&mut md, &da.outcome);
        }
        md.push('\n');
    }

    if let Some(o) = &doc.suites.ood {
        md.push_str("## Out-of-distribution screening\n\n");
        md.push_str(&format!(
            "- flagged {} of {} records ({:.4}) at tau = {}{}\n\n",
            o.n_flagged,
            o.n_records,
            o.flagged_fraction,
            o.tau_ood,
            if o.orientation_assumed {
                " — warning: orientation flags assumed (no calibration annotations)"
            } else {
                ""
            }
        ));
    }

    if let Some(l) = &doc.suites.lipschitz {
        md.push_str("## Lipschitz bounds\n\n");
        md.push_str(&format!(
            "- bounds: [{}, {}]{}\n\n",
            l.bounds.lower,
            l.bounds.upper,
            if l.bounds.vacuous_lower {
                " — warning: lower bound vacuous (residual alpha >= 1)"
            } else {
                ""
            }
        ));
    }

    if let Some(s) = &doc.suites.simstudy {
        md.push_str("## Sample-size study\n\n");
        md.push_str("```\n");
        md.push_str(&s.table.to_csv());
        md.push_str("```\n");
        match s.recommended_n {
            Some(n) => md.push_str(&format!(
                "- recommended N = {n} (smallest n with failure <= {} at eps = {})\n\n",
                s.target_failure, s.recommend_eps
            )),
            None => md.push_str("- no n in the grid met the failure target\n\n"),
        }
    }

    md
}
