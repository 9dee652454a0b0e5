//! Shared result types: per-test outcomes and subgroup references.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Which semantic feature a subgroup was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum FeatureRef {
    Content(usize),
    Style(usize),
}

impl std::fmt::Display for FeatureRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureRef::Content(i) => write!(f, "content[{i}]"),
            FeatureRef::Style(i) => write!(f, "style[{i}]"),
        }
    }
}

/// A subgroup of records: consecutive slice of the dataset after sorting by
/// one semantic feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRef {
    pub feature: FeatureRef,
    pub subgroup_index: usize,
    /// Smallest feature value in the subgroup.
    pub value_lo: f64,
    /// Largest feature value in the subgroup.
    pub value_hi: f64,
    pub size: usize,
}

/// Pass/fail plus named statistics for one executed test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub name: String,
    pub passed: bool,
    /// True when the test could not run (for instance, no labels available).
    /// A skipped test never counts as passed.
    #[serde(default)]
    pub skipped: bool,
    pub statistics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgroup: Option<SubgroupRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl TestOutcome {
    pub fn new(name: impl Into<String>, passed: bool) -> Self {
        TestOutcome {
            name: name.into(),
            passed,
            skipped: false,
            statistics: BTreeMap::new(),
            subgroup: None,
            detail: None,
        }
    }

    pub fn skipped(name: impl Into<String>, reason: impl Into<String>) -> Self {
        let mut o = TestOutcome::new(name, false);
        o.skipped = true;
        o.detail = Some(reason.into());
        o.statistics.insert("skipped".into(), 1.0);
        o
    }

    pub fn with_stat(mut self, key: impl Into<String>, value: f64) -> Self {
        self.statistics.insert(key.into(), value);
        self
    }

    pub fn with_subgroup(mut self, subgroup: SubgroupRef) -> Self {
        self.subgroup = Some(subgroup);
        self
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}
