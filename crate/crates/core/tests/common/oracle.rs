//! Independent reference solvers used only by tests.
//!
//! Nothing here calls into the library's projection code: nearest levels,
//! scale refinement and objectives are recomputed from scratch.

/// Brute-force nearest entry of `alphabet`, smaller magnitude on ties.
pub fn nearest(x: f64, alphabet: &[i8]) -> i8 {
    let mut best = alphabet[0];
    for &a in alphabet {
        let (da, db) = ((x - a as f64).abs(), (x - best as f64).abs());
        if da < db || (da == db && a.unsigned_abs() < best.unsigned_abs()) {
            best = a;
        }
    }
    best
}

pub fn residual(v: &[f64], q: &[i8], alpha: f64) -> f64 {
    v.iter().zip(q).map(|(x, &c)| (x - alpha * c as f64).powi(2)).sum()
}

/// Best `(objective, alpha, codes)` over a uniform grid of scales in
/// `(0, 2 max|v|]`, each refined by one closed-form least-squares scale for
/// the codes it induces.
pub fn grid_refine(v: &[f64], alphabet: &[i8], points: usize) -> (f64, f64, Vec<i8>) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut best = (v.iter().map(|x| x * x).sum::<f64>(), f64::NAN, vec![0; v.len()]);
    let mut q = vec![0i8; v.len()];
    for i in 1..=points {
        let alpha = 2.0 * max * i as f64 / points as f64;
        for (c, &x) in q.iter_mut().zip(v) {
            *c = nearest(x / alpha, alphabet);
        }
        let qq: f64 = q.iter().map(|&c| (c as f64).powi(2)).sum();
        if qq == 0.0 {
            continue;
        }
        let refined = v.iter().zip(&q).map(|(x, &c)| x * c as f64).sum::<f64>() / qq;
        if refined <= 0.0 {
            continue;
        }
        let obj = residual(v, &q, refined);
        if obj < best.0 {
            best = (obj, refined, q.clone());
        }
    }
    best
}

/// Exhaustive search over all `2^d` sign patterns for the binary codebook.
pub fn binary_enumeration(v: &[f64]) -> (f64, Vec<i8>) {
    let d = v.len();
    let mut best = (f64::INFINITY, Vec::new());
    for mask in 0..(1u64 << d) {
        let q: Vec<i8> = (0..d).map(|j| if mask >> j & 1 == 1 { 1 } else { -1 }).collect();
        let alpha = v.iter().zip(&q).map(|(x, &c)| x * c as f64).sum::<f64>() / d as f64;
        if alpha <= 0.0 {
            continue;
        }
        let obj = residual(v, &q, alpha);
        if obj < best.0 {
            best = (obj, q);
        }
    }
    best
}
