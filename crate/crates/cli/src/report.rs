//! Comparison table: one row per method, four metric columns per dataset.
//! Repeated (method, dataset) pairs, e.g. several seeds, are averaged.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use duq_core::metrics::{self, Aggregate, CalibrationReport};
use duq_core::{DuqError, Result};

pub const METRICS: [&str; 4] = ["mae", "f_beta", "ece_d", "pavpu"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Cell {
    pub values: [f64; 4],
    pub runs: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub methods: Vec<String>,
    pub datasets: Vec<String>,
    pub cells: BTreeMap<(String, String), Cell>,
}

fn load(path: &Path) -> Result<(String, String, Aggregate)> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            let r = CalibrationReport::read_json(path)?;
            Ok((r.method, r.dataset, r.aggregate))
        }
        Some("csv") => {
            let agg = metrics::aggregate(&metrics::read_csv(path)?)?;
            let json: PathBuf = path.with_extension("json");
            if json.exists() {
                let r = CalibrationReport::read_json(&json)?;
                return Ok((r.method, r.dataset, agg));
            }
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((stem, "-".into(), agg))
        }
        _ => Err(DuqError::Usage(format!(
            "{}: expected a .json or .csv report",
            path.display()
        ))),
    }
}

pub fn merge(inputs: &[PathBuf]) -> Result<Table> {
    let mut t = Table::default();
    for p in inputs {
        let (method, dataset, a) = load(p)?;
        if !t.methods.contains(&method) {
            t.methods.push(method.clone());
        }
        if !t.datasets.contains(&dataset) {
            t.datasets.push(dataset.clone());
        }
        let c = t.cells.entry((method, dataset)).or_default();
        for (v, x) in c.values.iter_mut().zip([a.mae, a.f_beta, a.ece_d, a.pavpu]) {
            *v += x;
        }
        c.runs += 1;
    }
    for c in t.cells.values_mut() {
        for v in &mut c.values {
            *v /= c.runs as f64;
        }
    }
    Ok(t)
}

fn header(t: &Table) -> Vec<String> {
    let mut h = vec!["method".to_string()];
    for d in &t.datasets {
        h.extend(METRICS.iter().map(|m| format!("{d}:{m}")));
    }
    h
}

fn rows(t: &Table, fmt: impl Fn(f64) -> String) -> Vec<Vec<String>> {
    t.methods
        .iter()
        .map(|m| {
            let mut row = vec![m.clone()];
            for d in &t.datasets {
                match t.cells.get(&(m.clone(), d.clone())) {
                    Some(c) => row.extend(c.values.iter().map(|&v| fmt(v))),
                    None => row.extend(std::iter::repeat(String::new()).take(METRICS.len())),
                }
            }
            row
        })
        .collect()
}

pub fn write_csv(t: &Table, path: &Path) -> Result<()> {
    let err = |e: csv::Error| DuqError::Validation(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| DuqError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header(t)).map_err(err)?;
    for r in rows(t, |v| v.to_string()) {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|e| DuqError::io(path, e))
}

/// Fixed-width text rendering for the terminal.
pub fn render(t: &Table) -> String {
    let mut all = vec![header(t)];
    all.extend(rows(t, |v| format!("{v:.3}")));
    let cols = all[0].len();
    let width: Vec<usize> = (0..cols)
        .map(|j| all.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &all {
        let line: Vec<String> = r
            .iter()
            .zip(&width)
            .enumerate()
            .map(|(j, (c, w))| {
                if j == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use duq_core::metrics::ImageMetrics;

    fn report(dir: &Path, name: &str, method: &str, dataset: &str, mae: f64) -> PathBuf {
        let img = ImageMetrics {
            file: "x".into(),
            mae,
            f_beta: Some(0.5),
            ece_d: 0.1,
            pavpu: 0.8,
        };
        let r = CalibrationReport::new(dataset, method, vec![img]).unwrap();
        let p = dir.join(name);
        r.write_json(&p).unwrap();
        p
    }

    #[test]
    fn averages_repeats_and_leaves_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let a = report(dir.path(), "a.json", "full", "test_id", 0.1);
        let b = report(dir.path(), "b.json", "full", "test_id", 0.3);
        let c = report(dir.path(), "c.json", "base", "test_ood", 0.2);
        let t = merge(&[a, b, c]).unwrap();
        assert_eq!(t.methods, ["full", "base"]);
        assert_eq!(t.datasets, ["test_id", "test_ood"]);
        let cell = &t.cells[&("full".to_string(), "test_id".to_string())];
        assert_eq!(cell.runs, 2);
        assert!((cell.values[0] - 0.2).abs() < 1e-12);
        let text = render(&t);
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().starts_with("full"));
        let r = rows(&t, |v| v.to_string());
        assert_eq!(r[1][1], "");
    }
}
