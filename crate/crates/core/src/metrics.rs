use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

/// One scalar observation, serialized as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub step: Option<u64>,
    pub phase: String,
    pub metric: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub layer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub head: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub subset: Option<String>,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(phase: &str, metric: &str, value: f64) -> Self {
        Self {
            step: None,
            phase: phase.into(),
            metric: metric.into(),
            layer: None,
            head: None,
            subset: None,
            value,
        }
    }

    pub fn step(mut self, step: u64) -> Self {
        self.step = Some(step);
        self
    }

    pub fn layer(mut self, layer: usize) -> Self {
        self.layer = Some(layer);
        self
    }

    pub fn head(mut self, head: usize) -> Self {
        self.head = Some(head);
        self
    }

    pub fn subset(mut self, subset: impl Into<String>) -> Self {
        self.subset = Some(subset.into());
        self
    }
}

/// Appends records to a JSONL file and flushes once per call. An empty
/// slice leaves the file untouched.
pub fn append_jsonl(path: &Path, records: &[MetricRecord]) -> Result<()> {
    if records.is_empty() {
        return Ok(());
    }
    let mut buf = Vec::new();
    for r in records {
        if !r.value.is_finite() {
            return Err(input_err(format!(
                "metric {} has non-finite value {}",
                r.metric, r.value
            )));
        }
        serde_json::to_writer(&mut buf, r).map_err(|e| input_err(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| input_err(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optional_keys_are_omitted() {
        let r = MetricRecord::new("eval", "ppl", 3.5).layer(1);
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, r#"{"phase":"eval","metric":"ppl","layer":1,"value":3.5}"#);
    }

    #[test]
    fn nonfinite_rejected_and_empty_is_noop() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        append_jsonl(&p, &[]).unwrap();
        assert!(!p.exists());
        assert!(append_jsonl(&p, &[MetricRecord::new("a", "b", f64::NAN)]).is_err());
    }
}
