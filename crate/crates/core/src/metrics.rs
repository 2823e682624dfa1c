//! Segmentation and calibration metrics: MAE, mean F-measure, dense ECE and
//! binned PAvPU, plus per-dataset aggregation and report files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::TensorMap;
use crate::error::{DuqError, Result};

pub const ECE_BINS: usize = 12;
pub const THRESHOLDS: usize = 256;
pub const PAVPU_BINS: usize = 10;
pub const DEFAULT_BETA_SQ: f64 = 0.3;
pub const DEFAULT_PATCH: usize = 4;

fn check_pair(s: &TensorMap, y: &TensorMap) -> Result<()> {
    s.ensure_same_shape(y)?;
    if let Some(v) = y.values().iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(DuqError::Domain(format!(
            "ground truth must be binary, found {v}"
        )));
    }
    Ok(())
}

fn check_unit(name: &str, m: &TensorMap) -> Result<()> {
    if let Some(v) = m.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(DuqError::Domain(format!(
            "{name} must lie in [0,1], found {v}"
        )));
    }
    Ok(())
}

pub fn mae(s: &TensorMap, y: &TensorMap) -> Result<f64> {
    check_pair(s, y)?;
    let sum: f64 = s
        .values()
        .iter()
        .zip(y.values())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / s.len() as f64)
}

/// Mean F-measure over thresholds `t = i/255`, `i = 0..=255`, with
/// `s > t` counted as foreground. Returns `None` when `y` has no
/// foreground, in which case the image is left out of aggregates.
pub fn f_measure(s: &TensorMap, y: &TensorMap, beta_sq: f64) -> Result<Option<f64>> {
    check_pair(s, y)?;
    let positives = y.values().iter().filter(|v| **v == 1.0).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut total = 0.0;
    for i in 0..THRESHOLDS {
        let t = i as f64 / 255.0;
        let (mut tp, mut fp) = (0usize, 0usize);
        for (&p, &g) in s.values().iter().zip(y.values()) {
            if p > t {
                if g == 1.0 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        if tp + fp == 0 || tp == 0 {
            continue;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / positives as f64;
        total += (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall);
    }
    Ok(Some(total / THRESHOLDS as f64))
}

/// Bin of a score: 0 holds exactly 0, 11 exactly 1, 1..=10 split (0,1) evenly.
pub fn ece_bin(s: f64) -> usize {
    if s <= 0.0 {
        0
    } else if s >= 1.0 {
        ECE_BINS - 1
    } else {
        1 + ((s * 10.0) as usize).min(9)
    }
}

/// Thresholds used by the dense ECE accuracy vector: the midpoints
/// `(i + 0.5)/256`, so binary scores never sit on a threshold.
pub fn ece_threshold(i: usize) -> f64 {
    (i as f64 + 0.5) / THRESHOLDS as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EceBin {
    pub count: usize,
    /// Per-threshold accuracy; empty when the bin is empty.
    pub acc: Vec<f64>,
    pub macc: f64,
    pub conf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EceBins {
    pub bins: Vec<EceBin>,
    pub ece: f64,
}

pub fn ece_bins(s: &TensorMap, y: &TensorMap) -> Result<EceBins> {
    check_pair(s, y)?;
    check_unit("prediction", s)?;
    let mut members: Vec<Vec<(f64, f64)>> = vec![Vec::new(); ECE_BINS];
    for (&p, &g) in s.values().iter().zip(y.values()) {
        members[ece_bin(p)].push((p, g));
    }
    let total = s.len() as f64;
    let mut ece = 0.0;
    let bins = members
        .into_iter()
        .map(|m| {
            if m.is_empty() {
                return EceBin {
                    count: 0,
                    acc: Vec::new(),
                    macc: 0.0,
                    conf: 0.0,
                };
            }
            let n = m.len() as f64;
            let acc: Vec<f64> = (0..THRESHOLDS)
                .map(|i| {
                    let t = ece_threshold(i);
                    let hits = m
                        .iter()
                        .filter(|(p, g)| (if *p >= t { 1.0 } else { 0.0 }) == *g)
                        .count();
                    hits as f64 / n
                })
                .collect();
            let macc = acc.iter().sum::<f64>() / THRESHOLDS as f64;
            let conf = m.iter().map(|(p, _)| p.max(1.0 - p)).sum::<f64>() / n;
            ece += n / total * (macc - conf).abs();
            EceBin {
                count: m.len(),
                acc,
                macc,
                conf,
            }
        })
        .collect();
    Ok(EceBins { bins, ece })
}

pub fn ece_dense(s: &TensorMap, y: &TensorMap) -> Result<f64> {
    Ok(ece_bins(s, y)?.ece)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PavpuTable {
    pub patch_size: usize,
    pub patches: usize,
    pub n_ac: [usize; PAVPU_BINS],
    pub n_au: [usize; PAVPU_BINS],
    pub n_ic: [usize; PAVPU_BINS],
    pub n_iu: [usize; PAVPU_BINS],
    pub per_bin: [f64; PAVPU_BINS],
    pub mean: f64,
}

/// Accuracy and uncertainty thresholds of bin `k` (0-based): both `(k+1)/10`.
pub fn pavpu_thresholds(k: usize) -> (f64, f64) {
    let t = (k + 1) as f64 / PAVPU_BINS as f64;
    (t, t)
}

fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        // Mirror without repeating the edge pixel.
        let period = 2 * (n - 1).max(1);
        let j = i % period;
        if j < n {
            j
        } else {
            period - j
        }
    }
}

/// Per-patch `(accuracy, uncertainty)` over a `g×g` grid; maps whose sides
/// are not multiples of `g` are reflection-padded.
pub fn patch_stats(
    s: &TensorMap,
    y: &TensorMap,
    u: &TensorMap,
    g: usize,
) -> Result<Vec<(f64, f64)>> {
    check_pair(s, y)?;
    s.ensure_same_shape(u)?;
    if g == 0 {
        return Err(DuqError::Usage("patch size must be positive".into()));
    }
    let (h, w) = (s.height(), s.width());
    let (ph, pw) = (h.div_ceil(g), w.div_ceil(g));
    if h % g != 0 || w % g != 0 {
        log::info!(
            "reflection-padding {h}x{w} map to {}x{} for {g}x{g} patches",
            ph * g,
            pw * g
        );
    }
    let mut out = Vec::with_capacity(s.channels() * ph * pw);
    for c in 0..s.channels() {
        for py in 0..ph {
            for px in 0..pw {
                let (mut correct, mut unc) = (0usize, 0.0);
                for dy in 0..g {
                    for dx in 0..g {
                        let yy = reflect(py * g + dy, h);
                        let xx = reflect(px * g + dx, w);
                        let pred = if s.get(c, yy, xx) >= 0.5 { 1.0 } else { 0.0 };
                        if pred == y.get(c, yy, xx) {
                            correct += 1;
                        }
                        unc += u.get(c, yy, xx);
                    }
                }
                let n = (g * g) as f64;
                out.push((correct as f64 / n, unc / n));
            }
        }
    }
    Ok(out)
}

pub fn pavpu(s: &TensorMap, y: &TensorMap, u: &TensorMap, g: usize) -> Result<PavpuTable> {
    check_unit("uncertainty", u)?;
    let stats = patch_stats(s, y, u, g)?;
    let mut t = PavpuTable {
        patch_size: g,
        patches: stats.len(),
        n_ac: [0; PAVPU_BINS],
        n_au: [0; PAVPU_BINS],
        n_ic: [0; PAVPU_BINS],
        n_iu: [0; PAVPU_BINS],
        per_bin: [0.0; PAVPU_BINS],
        mean: 0.0,
    };
    for k in 0..PAVPU_BINS {
        let (ha, hu) = pavpu_thresholds(k);
        for &(acc, unc) in &stats {
            match (acc >= ha, unc >= hu) {
                (true, false) => t.n_ac[k] += 1,
                (true, true) => t.n_au[k] += 1,
                (false, false) => t.n_ic[k] += 1,
                (false, true) => t.n_iu[k] += 1,
            }
        }
        t.per_bin[k] = (t.n_ac[k] + t.n_iu[k]) as f64 / stats.len() as f64;
    }
    t.mean = t.per_bin.iter().sum::<f64>() / PAVPU_BINS as f64;
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub file: String,
    pub mae: f64,
    /// `None` when the ground truth has no foreground.
    pub f_beta: Option<f64>,
    pub ece_d: f64,
    pub pavpu: f64,
}

/// All per-image metrics of one prediction and its uncertainty map.
pub fn evaluate_image(
    file: impl Into<String>,
    s: &TensorMap,
    y: &TensorMap,
    u: &TensorMap,
    patch: usize,
) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        file: file.into(),
        mae: mae(s, y)?,
        f_beta: f_measure(s, y, DEFAULT_BETA_SQ)?,
        ece_d: ece_dense(s, y)?,
        pavpu: pavpu(s, y, u, patch)?.mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mae: f64,
    pub f_beta: f64,
    pub ece_d: f64,
    pub pavpu: f64,
    pub images: usize,
    /// Images left out of the F-measure mean for lack of foreground.
    pub f_beta_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub dataset: String,
    pub method: String,
    pub aggregate: Aggregate,
    pub images: Vec<ImageMetrics>,
}

pub fn aggregate(images: &[ImageMetrics]) -> Result<Aggregate> {
    if images.is_empty() {
        return Err(DuqError::Usage(
            "cannot aggregate an empty set of images".into(),
        ));
    }
    let n = images.len() as f64;
    let f: Vec<f64> = images.iter().filter_map(|m| m.f_beta).collect();
    let excluded = images.len() - f.len();
    if excluded > 0 {
        log::warn!("{excluded} image(s) without foreground excluded from the F-measure mean");
    }
    Ok(Aggregate {
        mae: images.iter().map(|m| m.mae).sum::<f64>() / n,
        f_beta: if f.is_empty() {
            0.0
        } else {
            f.iter().sum::<f64>() / f.len() as f64
        },
        ece_d: images.iter().map(|m| m.ece_d).sum::<f64>() / n,
        pavpu: images.iter().map(|m| m.pavpu).sum::<f64>() / n,
        images: images.len(),
        f_beta_excluded: excluded,
    })
}

impl CalibrationReport {
    pub fn new(
        dataset: impl Into<String>,
        method: impl Into<String>,
        images: Vec<ImageMetrics>,
    ) -> Result<Self> {
        Ok(CalibrationReport {
            dataset: dataset.into(),
            method: method.into(),
            aggregate: aggregate(&images)?,
            images,
        })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| DuqError::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DuqError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Per-image rows: `file,mae,f_beta,ece_d,pavpu` (empty `f_beta` when excluded).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["file", "mae", "f_beta", "ece_d", "pavpu"])
            .map_err(|e| csv_err(path, e))?;
        for m in &self.images {
            w.write_record([
                m.file.clone(),
                m.mae.to_string(),
                m.f_beta.map(|v| v.to_string()).unwrap_or_default(),
                m.ece_d.to_string(),
                m.pavpu.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| DuqError::io(path, e))
    }
}

/// Reads rows written by [`CalibrationReport::write_csv`].
pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<ImageMetrics>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| {
                DuqError::Validation(format!("{}: bad value in column {i}", path.display()))
            })
        };
        out.push(ImageMetrics {
            file: rec.get(0).unwrap_or_default().to_string(),
            mae: num(1)?,
            f_beta: match rec.get(2) {
                Some("") | None => None,
                Some(_) => Some(num(2)?),
            },
            ece_d: num(3)?,
            pavpu: num(4)?,
        });
    }
    Ok(out)
}

fn csv_err(path: &Path, e: csv::Error) -> DuqError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DuqError::io(path, io),
        other => DuqError::Validation(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m22(v: [f64; 4]) -> TensorMap {
        TensorMap::new(1, 2, 2, v.to_vec()).unwrap()
    }

    #[test]
    fn mae_hand_case() {
        let s = m22([0.2, 0.8, 0.5, 0.0]);
        let y = m22([0.0, 1.0, 1.0, 0.0]);
        assert!((mae(&s, &y).unwrap() - 0.225).abs() < 1e-12);
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        let inv = y.map(|v| 1.0 - v).unwrap();
        assert_eq!(mae(&inv, &y).unwrap(), 1.0);
    }

    #[test]
    fn f_measure_extremes() {
        let y = m22([0.0, 1.0, 1.0, 0.0]);
        let inv = y.map(|v| 1.0 - v).unwrap();
        assert_eq!(f_measure(&inv, &y, 0.3).unwrap(), Some(0.0));
        // Only t = 1 rejects every pixel.
        let f = f_measure(&y, &y, 0.3).unwrap().unwrap();
        assert!((f - 255.0 / 256.0).abs() < 1e-12);
        assert_eq!(
            f_measure(&y, &TensorMap::zeros(1, 2, 2), 0.3).unwrap(),
            None
        );
    }

    #[test]
    fn ece_bin_edges() {
        assert_eq!(ece_bin(0.0), 0);
        assert_eq!(ece_bin(1e-12), 1);
        assert_eq!(ece_bin(0.1), 2);
        assert_eq!(ece_bin(0.999), 10);
        assert_eq!(ece_bin(1.0), 11);
    }

    #[test]
    fn perfect_prediction_is_calibrated() {
        let y = m22([0.0, 1.0, 1.0, 0.0]);
        assert_eq!(ece_dense(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn pavpu_oracle_uncertainty() {
        let y = TensorMap::zeros(1, 8, 8);
        // Top-left patch entirely wrong.
        let s = TensorMap::from_fn(1, 8, 8, |_, r, c| if r < 4 && c < 4 { 1.0 } else { 0.0 });
        let u = s.clone();
        let t = pavpu(&s, &y, &u, 4).unwrap();
        assert_eq!(t.per_bin[4], 1.0);
        assert_eq!(t.patches, 4);
    }

    #[test]
    fn reflection_padding() {
        assert_eq!(
            (0..7).map(|i| reflect(i, 4)).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 2, 1, 0]
        );
        let y = TensorMap::zeros(1, 5, 5);
        let t = pavpu(&y, &y, &y, 4).unwrap();
        assert_eq!(t.patches, 4);
        assert_eq!(t.mean, 1.0);
    }

    #[test]
    fn aggregate_means_and_csv_roundtrip() {
        let a = ImageMetrics {
            file: "a".into(),
            mae: 0.1,
            f_beta: Some(0.5),
            ece_d: 0.0,
            pavpu: 0.9,
        };
        let b = ImageMetrics {
            file: "b".into(),
            mae: 0.3,
            f_beta: None,
            ece_d: 0.1,
            pavpu: 0.7,
        };
        let agg = aggregate(&[a.clone(), b.clone()]).unwrap();
        assert!((agg.ece_d - 0.05).abs() < 1e-15);
        assert_eq!(agg.f_beta, 0.5);
        assert_eq!(agg.f_beta_excluded, 1);
        assert!(aggregate(&[]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let r = CalibrationReport::new("d", "m", vec![a, b]).unwrap();
        let p = dir.path().join("r.csv");
        r.write_csv(&p).unwrap();
        assert_eq!(read_csv(&p).unwrap(), r.images);
    }
}
