//! Per-map losses and normalizations with their gradients. All functions
//! work on flat single-image maps; wrappers over [`TensorMap`] check shapes.

use serde::{Deserialize, Serialize};

use crate::diff::TensorMap;
use crate::error::{DuqError, Result};

/// Logs are clamped at this value.
pub const LOG_CLAMP: f64 = 1e-7;
const DOMAIN_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    #[default]
    Regression,
    Classification,
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    for (i, &p) in v.iter().enumerate() {
        if !(p >= -DOMAIN_TOL && p <= 1.0 + DOMAIN_TOL) {
            return Err(DuqError::Domain(format!(
                "{what}[{i}] = {p} is outside [0, 1]"
            )));
        }
    }
    Ok(())
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(DuqError::Usage(format!("{what}: {a} vs {b} values")));
    }
    Ok(())
}

fn clamp_ln(v: f64) -> f64 {
    v.max(LOG_CLAMP).ln()
}

/// Base-2 binary entropy, `0·log 0 = 0`.
pub fn entropy2(p: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    let h = |q: f64| if q > 0.0 { -q * q.log2() } else { 0.0 };
    h(p) + h(1.0 - p)
}

pub fn binary_entropy_slice(p: &[f64]) -> Result<Vec<f64>> {
    check_unit(p, "entropy input")?;
    Ok(p.iter().map(|&v| entropy2(v)).collect())
}

pub fn binary_entropy(p: &TensorMap) -> Result<TensorMap> {
    let v = binary_entropy_slice(p.values())?;
    TensorMap::new(p.channels(), p.height(), p.width(), v)
}

/// `CE(a, b) = −[b·ln a + (1−b)·ln(1−a)]` with clamped logs.
pub fn cross_entropy(a: f64, b: f64) -> f64 {
    -(b * clamp_ln(a) + (1.0 - b) * clamp_ln(1.0 - a))
}

/// `∂CE(a, b)/∂a`; zero on a clamped log.
pub fn cross_entropy_grad(a: f64, b: f64) -> f64 {
    let mut g = 0.0;
    if a > LOG_CLAMP {
        g -= b / a;
    }
    if 1.0 - a > LOG_CLAMP {
        g += (1.0 - b) / (1.0 - a);
    }
    g
}

/// Mean of `CE(u, t)` and its gradient with respect to `u`.
pub fn mean_cross_entropy(u: &[f64], t: &[f64]) -> Result<(f64, Vec<f64>)> {
    same_len(u.len(), t.len(), "cross entropy")?;
    check_unit(u, "prediction")?;
    check_unit(t, "target")?;
    let n = u.len() as f64;
    let loss = u
        .iter()
        .zip(t)
        .map(|(&a, &b)| cross_entropy(a, b))
        .sum::<f64>()
        / n;
    let grad = u
        .iter()
        .zip(t)
        .map(|(&a, &b)| cross_entropy_grad(a, b) / n)
        .collect();
    Ok((loss, grad))
}

/// Per-pixel binary cross-entropy of a prediction against a label.
pub fn bce_map(pred: &[f64], target: &[f64]) -> Vec<f64> {
    pred.iter()
        .zip(target)
        .map(|(&p, &y)| cross_entropy(p, y))
        .collect()
}

/// Bi-directional cross-entropy `mean[CE(u,t) + CE(t,u)]`. The returned
/// gradient flows through the `u`-as-prediction term only.
pub fn bice(u: &[f64], t: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (fwd, grad) = mean_cross_entropy(u, t)?;
    let n = u.len() as f64;
    let back = u
        .iter()
        .zip(t)
        .map(|(&a, &b)| cross_entropy(b, a))
        .sum::<f64>()
        / n;
    Ok((fwd + back, grad))
}

pub fn bice_loss(u: &TensorMap, t: &TensorMap) -> Result<f64> {
    u.ensure_same_shape(t)?;
    bice(u.values(), t.values()).map(|(l, _)| l)
}

/// Min-max normalization to `[0, 1]`; a constant map becomes zeros.
pub fn minmax(v: &[f64]) -> Vec<f64> {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    let r = hi - lo;
    if !(r > 0.0) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| ((x - lo) / r).clamp(0.0, 1.0)).collect()
}

pub fn minmax_norm(m: &TensorMap) -> TensorMap {
    TensorMap::new(m.channels(), m.height(), m.width(), minmax(m.values())).expect("same length")
}

/// Adjoint of [`minmax`] at `v` for upstream gradient `g`, routing the
/// extreme terms to the first minimum and first maximum.
pub fn minmax_backward(v: &[f64], g: &[f64]) -> Vec<f64> {
    let mut imin = 0;
    let mut imax = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[imin] {
            imin = i;
        }
        if x > v[imax] {
            imax = i;
        }
    }
    let r = v[imax] - v[imin];
    let mut d = vec![0.0; v.len()];
    if !(r > 0.0) {
        return d;
    }
    let lo = v[imin];
    let mut sum_g = 0.0;
    let mut sum_gu = 0.0;
    for (i, (&x, &gi)) in v.iter().zip(g).enumerate() {
        d[i] = gi / r;
        sum_g += gi;
        sum_gu += gi * (x - lo) / r;
    }
    d[imin] += (sum_gu - sum_g) / r;
    d[imax] -= sum_gu / r;
    d
}

/// Value and gradients of an uncertainty-attenuated BCE task loss.
#[derive(Clone, Debug)]
pub struct Attenuated {
    pub value: f64,
    pub d_pred: Vec<f64>,
    pub d_s: Vec<f64>,
}

/// Mean over pixels of `L/(2e^s) + s/2` (regression) or `L/T + ln T` with
/// `T = exp(e^s)` (classification), `L` the per-pixel BCE.
pub fn attenuated(pred: &[f64], target: &[f64], s: &[f64], mode: LossMode) -> Result<Attenuated> {
    same_len(pred.len(), target.len(), "attenuated loss target")?;
    same_len(pred.len(), s.len(), "attenuated loss log-variance")?;
    check_unit(pred, "prediction")?;
    let n = pred.len() as f64;
    let mut out = Attenuated {
        value: 0.0,
        d_pred: Vec::with_capacity(pred.len()),
        d_s: Vec::with_capacity(pred.len()),
    };
    for ((&p, &y), &s) in pred.iter().zip(target).zip(s) {
        let l = cross_entropy(p, y);
        let dl = cross_entropy_grad(p, y);
        let (v, w, ds) = match mode {
            LossMode::Regression => {
                let w = 0.5 * (-s).exp();
                (w * l + 0.5 * s, w, -w * l + 0.5)
            }
            LossMode::Classification => {
                let var = s.exp();
                let w = (-var).exp();
                (w * l + var, w, var * (1.0 - w * l))
            }
        };
        out.value += v / n;
        out.d_pred.push(w * dl / n);
        out.d_s.push(ds / n);
    }
    if !out.value.is_finite() {
        return Err(DuqError::non_finite("attenuated loss"));
    }
    Ok(out)
}

pub fn attenuated_loss(
    pred: &TensorMap,
    target: &TensorMap,
    s: &TensorMap,
    mode: LossMode,
) -> Result<f64> {
    pred.ensure_same_shape(target)?;
    pred.ensure_same_shape(s)?;
    attenuated(pred.values(), target.values(), s.values(), mode).map(|a| a.value)
}

fn check_set(preds: &[&[f64]], y: &[f64]) -> Result<()> {
    if preds.is_empty() {
        return Err(DuqError::Usage("empty prediction set".into()));
    }
    for p in preds {
        same_len(p.len(), y.len(), "prediction set")?;
    }
    Ok(())
}

/// Per-pixel member with the least BCE against `y`; ties go to the lowest index.
pub fn optimal_slice(preds: &[&[f64]], y: &[f64]) -> Result<Vec<f64>> {
    check_set(preds, y)?;
    Ok((0..y.len())
        .map(|i| {
            let mut best = preds[0][i];
            let mut best_loss = cross_entropy(best, y[i]);
            for p in &preds[1..] {
                let l = cross_entropy(p[i], y[i]);
                if l < best_loss {
                    best = p[i];
                    best_loss = l;
                }
            }
            best
        })
        .collect())
}

pub fn optimal_prediction(preds: &[TensorMap], y: &TensorMap) -> Result<TensorMap> {
    for p in preds {
        p.ensure_same_shape(y)?;
    }
    let slices: Vec<&[f64]> = preds.iter().map(|p| p.values()).collect();
    TensorMap::new(
        y.channels(),
        y.height(),
        y.width(),
        optimal_slice(&slices, y.values())?,
    )
}

pub fn mean_slice(preds: &[&[f64]]) -> Vec<f64> {
    let m = preds.len() as f64;
    let mut acc = vec![0.0; preds[0].len()];
    for p in preds {
        for (a, v) in acc.iter_mut().zip(p.iter()) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= m);
    acc
}

/// `(mean_m preds_m − y)²` per pixel.
pub fn mean_error_slice(preds: &[&[f64]], y: &[f64]) -> Result<Vec<f64>> {
    check_set(preds, y)?;
    Ok(mean_slice(preds)
        .iter()
        .zip(y)
        .map(|(m, t)| (m - t) * (m - t))
        .collect())
}

pub fn mean_error(preds: &[TensorMap], y: &TensorMap) -> Result<TensorMap> {
    for p in preds {
        p.ensure_same_shape(y)?;
    }
    let slices: Vec<&[f64]> = preds.iter().map(|p| p.values()).collect();
    TensorMap::new(
        y.channels(),
        y.height(),
        y.width(),
        mean_error_slice(&slices, y.values())?,
    )
}

/// `minmax(exp(s))` and the adjoint that maps its upstream gradient back to `s`.
pub fn normalized_exp(s: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
    if e.iter().any(|v| !v.is_finite()) {
        return Err(DuqError::non_finite("exponentiated log-variance"));
    }
    Ok((minmax(&e), e))
}

fn through_exp(e: &[f64], g: &[f64]) -> Vec<f64> {
    minmax_backward(e, g)
        .iter()
        .zip(e)
        .map(|(d, e)| d * e)
        .collect()
}

/// Aleatoric consistency loss `bice(minmax(e^{s_a}), minmax(H(f*)))` and
/// its gradient with respect to `s_a`.
pub fn aleatoric_consistency(s_a: &[f64], f_star: &[f64]) -> Result<(f64, Vec<f64>)> {
    same_len(s_a.len(), f_star.len(), "aleatoric consistency")?;
    let target = minmax(&binary_entropy_slice(f_star)?);
    let (u, e) = normalized_exp(s_a)?;
    let (loss, du) = bice(&u, &target)?;
    Ok((loss, through_exp(&e, &du)))
}

/// Targets of the predictive consistency loss: normalized entropy of the
/// mean prediction and normalized mean error.
pub fn predictive_targets(preds: &[&[f64]], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_set(preds, y)?;
    let h = minmax(&binary_entropy_slice(&mean_slice(preds))?);
    let err = minmax(&mean_error_slice(preds, y)?);
    Ok((h, err))
}

/// `bice(U_p, h) + CE(U_p, err)` with `U_p = minmax(e^{s})`, `s` the
/// predictive log-variance already at input resolution; returns the
/// gradient with respect to `s`.
pub fn predictive_consistency(
    s_up: &[f64],
    preds: &[&[f64]],
    y: &[f64],
) -> Result<(f64, Vec<f64>)> {
    same_len(s_up.len(), y.len(), "predictive consistency")?;
    let (h, err) = predictive_targets(preds, y)?;
    let (u, e) = normalized_exp(s_up)?;
    let (l1, g1) = bice(&u, &h)?;
    let (l2, g2) = mean_cross_entropy(&u, &err)?;
    let du: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
    Ok((l1 + l2, through_exp(&e, &du)))
}
