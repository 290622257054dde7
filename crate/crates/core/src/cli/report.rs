//! Evaluation reports: per-example rows, aggregates and the split table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::trainer::EvalRow;

/// Version of the JSON report layout.
pub const SCHEMA_VERSION: u32 = 1;

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let count = values.len();
        if count == 0 {
            return Self {
                count,
                mean: 0.0,
                std: 0.0,
            };
        }
        let mean = values.iter().sum::<f64>() / count as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
        Self {
            count,
            mean,
            std: var.sqrt(),
        }
    }
}

/// One row of a split table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub split: usize,
    pub train_families: Vec<String>,
    pub eval_families: Vec<String>,
    pub sisdri: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub rows: Vec<EvalRow>,
    pub sisdri: Summary,
    pub si_sdr_in: Summary,
    pub si_sdr_out: Summary,
    /// SI-SDRi per target family.
    pub per_family: BTreeMap<String, Summary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub splits: Vec<SplitRow>,
    /// Mean of the per-split means.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grand_average_db: Option<f64>,
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let pick = |f: fn(&EvalRow) -> f64| Summary::of(&rows.iter().map(f).collect::<Vec<_>>());
        let mut by_family: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &rows {
            by_family.entry(r.target_family.clone()).or_default().push(r.si_sdri);
        }
        Self {
            schema_version: SCHEMA_VERSION,
            sisdri: pick(|r| r.si_sdri),
            si_sdr_in: pick(|r| r.si_sdr_in),
            si_sdr_out: pick(|r| r.si_sdr_out),
            per_family: by_family.into_iter().map(|(k, v)| (k, Summary::of(&v))).collect(),
            rows,
            splits: Vec::new(),
            grand_average_db: None,
        }
    }

    /// Report over the rows of every split, with the split table attached.
    pub fn from_splits(splits: Vec<(SplitRow, Vec<EvalRow>)>) -> Self {
        let mut rows = Vec::new();
        let mut table = Vec::new();
        for (s, r) in splits {
            rows.extend(r);
            table.push(s);
        }
        let mut report = Self::from_rows(rows);
        report.grand_average_db = Some(Summary::of(&table.iter().map(|s| s.sisdri.mean).collect::<Vec<_>>()).mean);
        report.splits = table;
        report
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-example CSV.
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("example_id,target_family,noise_family,snr_db,si_sdr_in,si_sdr_out,si_sdri,energy_ratio_db\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.example_id, r.target_family, r.noise_family, r.snr_db, r.si_sdr_in, r.si_sdr_out, r.si_sdri, r.energy_ratio_db
            );
        }
        out
    }

    /// Plain-text split table: one line per split and the grand average.
    pub fn split_table(&self) -> String {
        let mut out = String::from("split  eval families                 SI-SDRi (dB)\n");
        for s in &self.splits {
            let _ = writeln!(
                out,
                "{:<6} {:<29} {:.1} ± {:.1}",
                s.split,
                s.eval_families.join(","),
                s.sisdri.mean,
                s.sisdri.std
            );
        }
        if let Some(g) = self.grand_average_db {
            let _ = writeln!(out, "{:<6} {:<29} {g:.1}", "avg", "");
        }
        out
    }

    /// Writes `path` (JSON) and the per-example CSV next to it.
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json())?;
        std::fs::write(path.with_extension("csv"), self.rows_csv())
    }
}

/// Mean silhouette coefficient of `points` under Euclidean distance, grouped
/// by `labels`. Points in singleton clusters score 0. `None` with fewer than
/// two clusters.
pub fn silhouette(points: &[Vec<f64>], labels: &[String]) -> Option<f64> {
    assert_eq!(points.len(), labels.len());
    let mut ids: Vec<&String> = labels.iter().collect();
    ids.sort();
    ids.dedup();
    if ids.len() < 2 {
        return None;
    }
    let cluster: Vec<usize> = labels.iter().map(|l| ids.binary_search(&l).expect("label present")).collect();
    let mut sizes = vec![0usize; ids.len()];
    for &c in &cluster {
        sizes[c] += 1;
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let own = cluster[i];
        if sizes[own] < 2 {
            continue;
        }
        let mut sums = vec![0.0f64; ids.len()];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[cluster[j]] += dist(p, q);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..ids.len())
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Some(total / points.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: u64, fam: &str, sisdri: f64) -> EvalRow {
        EvalRow {
            example_id: id,
            target_family: fam.into(),
            noise_family: "n".into(),
            snr_db: 0.0,
            si_sdr_in: 0.0,
            si_sdr_out: sisdri,
            si_sdri: sisdri,
            energy_ratio_db: 0.0,
        }
    }

    #[test]
    fn single_row_has_zero_std() {
        let r = MetricsReport::from_rows(vec![row(0, "a", 3.5)]);
        assert_eq!(r.sisdri.mean, 3.5);
        assert_eq!(r.sisdri.std, 0.0);
    }

    #[test]
    fn aggregates_recompute_from_rows() {
        let rows: Vec<EvalRow> = (0..10).map(|i| row(i, if i % 3 == 0 { "a" } else { "b" }, i as f64 * 0.7 - 2.0)).collect();
        let r = MetricsReport::from_rows(rows.clone());
        let mean = rows.iter().map(|r| r.si_sdri).sum::<f64>() / 10.0;
        assert!((r.sisdri.mean - mean).abs() < 1e-9);
        let a: Vec<f64> = rows.iter().filter(|r| r.target_family == "a").map(|r| r.si_sdri).collect();
        assert!((r.per_family["a"].mean - a.iter().sum::<f64>() / a.len() as f64).abs() < 1e-9);
        assert_eq!(r.per_family["b"].count, 6);
    }

    #[test]
    fn grand_average_is_mean_of_split_means() {
        let split = |i: usize, vals: &[f64]| {
            let rows: Vec<EvalRow> = vals.iter().enumerate().map(|(j, &v)| row(j as u64, "x", v)).collect();
            (
                SplitRow {
                    split: i,
                    train_families: vec![],
                    eval_families: vec![],
                    sisdri: Summary::of(vals),
                },
                rows,
            )
        };
        let r = MetricsReport::from_splits(vec![split(0, &[1.0, 2.0, 3.0]), split(1, &[10.0])]);
        assert_eq!(r.grand_average_db, Some(6.0));
        assert_eq!(r.rows.len(), 4);
    }

    #[test]
    fn report_json_round_trips() {
        let r = MetricsReport::from_rows(vec![row(0, "a", 1.25), row(1, "b", -0.5)]);
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.rows_csv().lines().count(), 3);
    }

    #[test]
    fn silhouette_separates_clusters() {
        let pts = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![5.0, 5.0], vec![5.1, 5.0]];
        let labels: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let s = silhouette(&pts, &labels).unwrap();
        assert!(s > 0.95, "{s}");
        let mixed: Vec<String> = ["a", "b", "a", "b"].iter().map(|s| s.to_string()).collect();
        assert!(silhouette(&pts, &mixed).unwrap() < 0.0);
        assert!(silhouette(&pts, &vec!["a".to_string(); 4]).is_none());
    }

    #[test]
    fn silhouette_matches_hand_computation() {
        // Points on a line: a = {0, 1}, b = {3}.
        let pts = vec![vec![0.0], vec![1.0], vec![3.0]];
        let labels: Vec<String> = ["a", "a", "b"].iter().map(|s| s.to_string()).collect();
        // s0 = (3 - 1) / 3, s1 = (2 - 1) / 2, s2 = 0 (singleton).
        let expect = (2.0 / 3.0 + 0.5 + 0.0) / 3.0;
        assert!((silhouette(&pts, &labels).unwrap() - expect).abs() < 1e-12);
    }
}
