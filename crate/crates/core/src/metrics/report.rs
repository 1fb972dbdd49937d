//! Evaluation report: machine-readable JSON plus a plain-text table.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CategoryRow {
    pub index: usize,
    pub name: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub overall: BTreeMap<String, f64>,
    pub per_category: Vec<CategoryRow>,
}

impl MetricReport {
    pub fn new(task: impl Into<String>) -> Self {
        MetricReport {
            task: task.into(),
            overall: BTreeMap::new(),
            per_category: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: f64) -> &mut Self {
        self.overall.insert(key.to_string(), value);
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.overall.get(key).copied()
    }

    pub fn push_category(&mut self, index: usize, name: &str, metrics: &[(&str, f64)]) {
        self.per_category.push(CategoryRow {
            index,
            name: name.to_string(),
            metrics: metrics
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
        });
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serialization")
    }

    /// Fixed-width table: one category per row, metric columns, overall
    /// summary last.
    pub fn to_text_table(&self) -> String {
        let mut cols: Vec<String> = Vec::new();
        for row in &self.per_category {
            for k in row.metrics.keys() {
                if !cols.contains(k) {
                    cols.push(k.clone());
                }
            }
        }
        let mut out = String::new();
        out.push_str(&format!("task: {}\n", self.task));
        if !self.per_category.is_empty() {
            out.push_str(&format!("{:<20}", "category"));
            for c in &cols {
                out.push_str(&format!("{c:>10}"));
            }
            out.push('\n');
            for row in &self.per_category {
                out.push_str(&format!("{:<20}", row.name));
                for c in &cols {
                    match row.metrics.get(c) {
                        Some(v) => out.push_str(&format!("{v:>10.3}")),
                        None => out.push_str(&format!("{:>10}", "-")),
                    }
                }
                out.push('\n');
            }
        }
        out.push_str("overall:");
        for (k, v) in &self.overall {
            out.push_str(&format!(" {k}={v:.3}"));
        }
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trips_through_json() {
        let mut r = MetricReport::new("panoptic");
        r.set("pq", 42.5);
        r.push_category(0, "square", &[("pq", 50.0), ("sq", 75.0)]);
        let json = r.to_json();
        let back: MetricReport = serde_json::from_value(json).unwrap();
        assert_eq!(back.task, "panoptic");
        assert_eq!(back.get("pq"), Some(42.5));
        assert_eq!(back.per_category.len(), 1);
        let table = r.to_text_table();
        assert!(table.contains("square"));
        assert!(table.contains("pq=42.500"));
    }
}
