//! Per-image and aggregate evaluation reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use locate_core::MetricTriple;
use serde::Serialize;

use crate::error::{LocateError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub image: String,
    pub affordance: String,
    pub kld: f64,
    pub sim: f64,
    pub nss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub kld: f64,
    pub sim: f64,
    pub nss: f64,
}

impl From<MetricTriple> for Aggregate {
    fn from(m: MetricTriple) -> Self {
        Self { kld: m.kld, sim: m.sim, nss: m.nss }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Images without usable ground truth.
    pub skipped: Vec<String>,
    /// Mean over images.
    pub mean: Aggregate,
    pub per_affordance: BTreeMap<String, Aggregate>,
    /// Mean over affordances of the per-affordance means.
    pub affordance_mean: Aggregate,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, skipped: Vec<String>) -> Option<Self> {
        let triple = |r: &EvalRow| MetricTriple { kld: r.kld, sim: r.sim, nss: r.nss };
        let mean = MetricTriple::mean(&rows.iter().map(triple).collect::<Vec<_>>())?;
        let mut groups: BTreeMap<String, Vec<MetricTriple>> = BTreeMap::new();
        for r in &rows {
            groups.entry(r.affordance.clone()).or_default().push(triple(r));
        }
        let per: BTreeMap<String, MetricTriple> =
            groups.into_iter().map(|(k, v)| (k, MetricTriple::mean(&v).expect("non-empty group"))).collect();
        let affordance_mean = MetricTriple::mean(&per.values().copied().collect::<Vec<_>>())?;
        Some(Self {
            rows,
            skipped,
            mean: mean.into(),
            per_affordance: per.into_iter().map(|(k, v)| (k, v.into())).collect(),
            affordance_mean: affordance_mean.into(),
        })
    }

    pub fn per_image_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| LocateError::Runtime(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| LocateError::Runtime(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// `scope,kld,sim,nss` with the overall means followed by one row per
    /// affordance.
    pub fn summary_csv(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            scope: &'a str,
            kld: f64,
            sim: f64,
            nss: f64,
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut put = |scope: &str, a: &Aggregate| {
            w.serialize(Line { scope, kld: a.kld, sim: a.sim, nss: a.nss }).map_err(|e| LocateError::Runtime(e.to_string()))
        };
        put("mean_over_images", &self.mean)?;
        put("mean_over_affordances", &self.affordance_mean)?;
        for (name, a) in &self.per_affordance {
            put(&format!("affordance:{name}"), a)?;
        }
        let bytes = w.into_inner().map_err(|e| LocateError::Runtime(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Writes `metrics.csv`, `summary.csv` and `metrics.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| LocateError::io(dir, e))?;
        let files = [
            (dir.join("metrics.csv"), self.per_image_csv()?),
            (dir.join("summary.csv"), self.summary_csv()?),
            (dir.join("metrics.json"), serde_json::to_string_pretty(self).expect("report serialises") + "\n"),
        ];
        for (path, text) in &files {
            fs::write(path, text).map_err(|e| LocateError::io(path, e))?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(image: &str, affordance: &str, kld: f64) -> EvalRow {
        EvalRow { image: image.into(), affordance: affordance.into(), kld, sim: 0.5, nss: 1.0 }
    }

    #[test]
    fn both_aggregations() {
        let r = EvalReport::from_rows(vec![row("a", "x", 1.0), row("b", "x", 3.0), row("c", "y", 5.0)], vec![]).unwrap();
        assert_eq!(r.mean.kld, 3.0);
        assert_eq!(r.per_affordance["x"].kld, 2.0);
        assert_eq!(r.affordance_mean.kld, 3.5);
        assert!(EvalReport::from_rows(vec![], vec![]).is_none());
    }

    #[test]
    fn csv_columns() {
        let r = EvalReport::from_rows(vec![row("a,1", "x", 1.0)], vec![]).unwrap();
        let csv = r.per_image_csv().unwrap();
        assert!(csv.starts_with("image,affordance,kld,sim,nss\n\"a,1\",x,1.0,0.5,1.0\n"), "{csv}");
    }
}
