//! Brute-force reference computations for the metrics.

#![allow(dead_code)]

use duq_core::diff::RngStream;
use duq_core::metrics::PAVPU_BINS;
use duq_core::TensorMap;

/// Scores drawn from bin edges, exact extremes and the open interval.
pub fn score(rng: &mut RngStream) -> f64 {
    match (rng.uniform() * 6.0) as usize {
        0 => 0.0,
        1 => 1.0,
        2 => 0.5,
        3 => (rng.uniform() * 11.0).floor() / 10.0,
        _ => rng.uniform(),
    }
}

pub fn binary(rng: &mut RngStream) -> f64 {
    if rng.uniform() < 0.5 {
        0.0
    } else {
        1.0
    }
}

pub fn map(h: usize, w: usize, mut f: impl FnMut() -> f64) -> TensorMap {
    TensorMap::new(1, h, w, (0..h * w).map(|_| f()).collect()).unwrap()
}

/// Every map size from 2x2 to 8x8, three draws each.
pub fn hand_cases() -> Vec<(TensorMap, TensorMap, TensorMap)> {
    let mut rng = RngStream::new(2024, 0);
    let mut out = Vec::new();
    for h in 2..=8 {
        for w in 2..=8 {
            for _ in 0..3 {
                let s = map(h, w, || score(&mut rng));
                let y = map(h, w, || binary(&mut rng));
                let u = map(h, w, || score(&mut rng));
                out.push((s, y, u));
            }
        }
    }
    out
}

/// Reference ECE: bins by explicit interval tests, accuracy from integer
/// hit counts over all 256 thresholds at once.
pub fn ece_reference(s: &[f64], y: &[f64]) -> f64 {
    let mut total = 0.0;
    for m in 0..12 {
        let inside = |p: f64| match m {
            0 => p == 0.0,
            11 => p == 1.0,
            k => {
                let lo = (k - 1) as f64 / 10.0;
                let hi = k as f64 / 10.0;
                p > 0.0 && p < 1.0 && p >= lo && (p < hi || k == 10)
            }
        };
        let members: Vec<usize> = (0..s.len()).filter(|&i| inside(s[i])).collect();
        if members.is_empty() {
            continue;
        }
        let mut hits = 0usize;
        for t in 0..256 {
            let thr = (2 * t + 1) as f64 / 512.0;
            hits += members
                .iter()
                .filter(|&&i| (s[i] >= thr) == (y[i] == 1.0))
                .count();
        }
        let n = members.len() as f64;
        let macc = hits as f64 / (256.0 * n);
        let conf = members.iter().map(|&i| s[i].max(1.0 - s[i])).sum::<f64>() / n;
        total += n / s.len() as f64 * (macc - conf).abs();
    }
    total
}

pub fn mirror(mut i: isize, n: isize) -> usize {
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Reference patch counts: explicit padded copy, then per-bin tallies.
pub fn pavpu_reference(
    s: &TensorMap,
    y: &TensorMap,
    u: &TensorMap,
    g: usize,
) -> ([[usize; 4]; PAVPU_BINS], [f64; PAVPU_BINS]) {
    let (h, w) = (s.height(), s.width());
    let ph = h.div_ceil(g) * g;
    let pw = w.div_ceil(g) * g;
    let pad = |m: &TensorMap| -> Vec<Vec<f64>> {
        (0..ph)
            .map(|r| {
                (0..pw)
                    .map(|c| {
                        m.get(
                            0,
                            mirror(r as isize, h as isize),
                            mirror(c as isize, w as isize),
                        )
                    })
                    .collect()
            })
            .collect()
    };
    let (s, y, u) = (pad(s), pad(y), pad(u));
    let mut patches = Vec::new();
    for pr in (0..ph).step_by(g) {
        for pc in (0..pw).step_by(g) {
            let mut right = 0;
            let mut unc = 0.0;
            for r in pr..pr + g {
                for c in pc..pc + g {
                    let pred = if s[r][c] >= 0.5 { 1.0 } else { 0.0 };
                    right += usize::from(pred == y[r][c]);
                    unc += u[r][c];
                }
            }
            patches.push((right as f64 / (g * g) as f64, unc / (g * g) as f64));
        }
    }
    let mut counts = [[0usize; 4]; PAVPU_BINS];
    let mut score = [0.0; PAVPU_BINS];
    for k in 0..PAVPU_BINS {
        let t = (k + 1) as f64 / 10.0;
        for &(a, v) in &patches {
            let slot = match (a >= t, v >= t) {
                (true, false) => 0,
                (true, true) => 1,
                (false, false) => 2,
                (false, true) => 3,
            };
            counts[k][slot] += 1;
        }
        score[k] = (counts[k][0] + counts[k][3]) as f64 / patches.len() as f64;
    }
    (counts, score)
}
