use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

/// Ordered metrics of one run, written as `metrics.txt` (one `key = value`
/// per line) and `summary.json`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub run: String,
    entries: Vec<(String, f64)>,
    extra: Map<String, Value>,
}

impl MetricReport {
    pub fn new(run: impl Into<String>) -> Self {
        Self {
            run: run.into(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, key: impl Into<String>, value: f64) {
        self.entries.push((key.into(), value));
    }

    /// Attaches non-metric detail to the summary only.
    pub fn attach(&mut self, key: impl Into<String>, value: Value) {
        self.extra.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn summary(&self) -> Value {
        let metrics: Map<String, Value> = self.entries.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
        json!({ "run": self.run, "metrics": metrics, "details": self.extra })
    }

    /// Writes both files into `dir/<run>/` and returns that directory.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let out = dir.join(&self.run);
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let txt = out.join("metrics.txt");
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))?;
        let js = out.join("summary.json");
        std::fs::write(&js, serde_json::to_string_pretty(&self.summary())?).map_err(|e| Error::io(&js, e))?;
        Ok(out)
    }
}
