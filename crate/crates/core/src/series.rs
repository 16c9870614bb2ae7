//! Named scalar time series recorded during runs.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A set of named scalar columns sharing one time axis.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DiagnosticSeries {
    times: Vec<f64>,
    columns: Vec<(String, Vec<f64>)>,
}

impl DiagnosticSeries {
    pub fn new(names: &[&str]) -> Self {
        DiagnosticSeries {
            times: Vec::new(),
            columns: names.iter().map(|n| (n.to_string(), Vec::new())).collect(),
        }
    }

    /// Append one sample row; `values` must match the column count.
    pub fn push(&mut self, t: f64, values: &[f64]) {
        assert_eq!(values.len(), self.columns.len(), "column count mismatch");
        self.times.push(t);
        for (col, &v) in self.columns.iter_mut().zip(values) {
            col.1.push(v);
        }
    }

    /// Append a column computed elsewhere on the same time axis.
    pub fn add_column(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.times.len() {
            return Err(Error::mismatch(format!(
                "column `{name}` has {} samples, series has {}",
                values.len(),
                self.times.len()
            )));
        }
        self.columns.push((name.to_string(), values));
        Ok(())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn columns(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.columns.iter().map(|(n, v)| (n.as_str(), v.as_slice()))
    }

    /// Merge columns of another series recorded on the same time axis.
    pub fn merge(&mut self, other: DiagnosticSeries) -> Result<()> {
        if other.times.len() != self.times.len()
            || other
                .times
                .iter()
                .zip(&self.times)
                .any(|(a, b)| (a - b).abs() > 1e-12)
        {
            return Err(Error::mismatch("series recorded on different time axes"));
        }
        self.columns.extend(other.columns);
        Ok(())
    }
}
