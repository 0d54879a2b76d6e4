// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluation reports with JSON and CSV renderings of the same values.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::ModelHandle;
use crate::steering::{PlanEntrySummary, SteeringPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
}

/// Provenance attached to every written artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub tool_version: String,
    pub model_id: String,
    /// `"vanilla"` or the list of plan entries.
    pub plan: Value,
    pub created_unix: u64,
}

impl ReportMeta {
    pub fn new(handle: &ModelHandle, plan: &SteeringPlan) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            model_id: handle.model_id().to_hex(),
            plan: plan_descriptor(plan),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }
}

/// JSON description of a plan: `"vanilla"` or `[{trait, layers, gamma}, ...]`.
pub fn plan_descriptor(plan: &SteeringPlan) -> Value {
    if plan.is_vanilla() {
        Value::String("vanilla".into())
    } else {
        serde_json::to_value(plan.summary()).expect("summaries serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metrics: Vec<Metric>,
    pub records: Vec<Value>,
    pub meta: ReportMeta,
}

impl EvalReport {
    pub fn new(task: &str, handle: &ModelHandle, plan: &SteeringPlan) -> Self {
        Self {
            task: task.to_string(),
            metrics: Vec::new(),
            records: Vec::new(),
            meta: ReportMeta::new(handle, plan),
        }
    }

    pub fn metric(mut self, name: &str, value: f64) -> Self {
        self.metrics.push(Metric {
            name: name.to_string(),
            value,
        });
        self
    }

    pub fn with_records(mut self, records: Vec<Value>) -> Self {
        self.records = records;
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.name == name)
            .map(|m| m.value)
    }

    pub fn plan_entries(&self) -> Vec<PlanEntrySummary> {
        serde_json::from_value(self.meta.plan.clone()).unwrap_or_default()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `metric,value` rows, followed by the meta block as `meta.*` rows.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut rows: Vec<(String, String)> = self
            .metrics
            .iter()
            .map(|m| (m.name.clone(), m.value.to_string()))
            .collect();
        rows.push(("meta.task".into(), self.task.clone()));
        rows.push(("meta.tool_version".into(), self.meta.tool_version.clone()));
        rows.push(("meta.model_id".into(), self.meta.model_id.clone()));
        let plan = match &self.meta.plan {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        rows.push(("meta.plan".into(), plan));
        rows.push((
            "meta.created_unix".into(),
            self.meta.created_unix.to_string(),
        ));
        w.write_record(["metric", "value"])
            .expect("in-memory write");
        for (k, v) in rows {
            w.write_record([k, v]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }

    /// Write `<task>.json` and `<task>.csv` into `dir`, creating it if needed.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{}.json", self.task));
        let csv = dir.join(format!("{}.csv", self.task));
        std::fs::write(&json, self.to_json() + "\n").map_err(|e| Error::io(&json, e))?;
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok((json, csv))
    }
}
