//! Low-bit codebooks and the Euclidean projection onto them.
//!
//! A layer's codebook is `{alpha * a : a in A}` for an integer alphabet `A`
//! and a free scale `alpha > 0`. Projecting a vector `V` onto it means
//! minimizing `||V - alpha * Q||^2` jointly over the scale and the integer
//! codes `Q`. The joint problem is solved by alternating the two closed-form
//! partial minimizations (scale for fixed codes, codes for fixed scale) until
//! the codes stop changing.

mod policy;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use policy::{apply_layer_policy, project_state, Int8Layer, LayerPolicy, LayerTarget, INT8_MAX_CODE};

/// Largest supported shift: codes are stored as `i8`, so `2^6 = 64` is the
/// largest power of two that fits.
pub const MAX_SHIFT: u32 = 6;

/// Default cap on scale/code alternations.
pub const DEFAULT_MAX_ITERS: usize = 20;

/// Halvings of the scale tried before all-zero codes become an error.
pub const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantizationSet {
    /// `{-1, +1}`
    Binary,
    /// `{-1, 0, +1}`
    Ternary,
    /// `{0, ±1, ±2, ..., ±2^N}`
    Pow2Shift(u32),
}

impl QuantizationSet {
    pub fn pow2_shift(n: u32) -> Result<Self> {
        if n > MAX_SHIFT {
            return Err(Error::InvalidArgument(format!("pow2 shift {n} exceeds maximum {MAX_SHIFT}")));
        }
        Ok(Self::Pow2Shift(n))
    }

    /// Integer alphabet in ascending order.
    pub fn alphabet(&self) -> Vec<i8> {
        match *self {
            Self::Binary => vec![-1, 1],
            Self::Ternary => vec![-1, 0, 1],
            Self::Pow2Shift(n) => {
                let pos: Vec<i8> = (0..=n).map(|k| 1i8 << k).collect();
                pos.iter().rev().map(|&a| -a).chain(std::iter::once(0)).chain(pos.iter().copied()).collect()
            }
        }
    }

    pub fn contains(&self, code: i8) -> bool {
        match *self {
            Self::Binary => code == 1 || code == -1,
            Self::Ternary => (-1..=1).contains(&code),
            Self::Pow2Shift(n) => {
                let m = code.unsigned_abs();
                code == 0 || (m.is_power_of_two() && m.trailing_zeros() <= n)
            }
        }
    }

    pub fn has_zero(&self) -> bool {
        !matches!(self, Self::Binary)
    }

    /// Bits needed to index the alphabet: 1 for binary, 2 for ternary,
    /// 3 for shifts up to `2^2`.
    pub fn bits_per_weight(&self) -> u32 {
        let n = self.alphabet().len() as u32;
        u32::BITS - (n - 1).leading_zeros()
    }

    /// Render the alphabet as `{0,±1,±2,±4}`.
    pub fn alphabet_label(&self) -> String {
        let mut parts = Vec::new();
        let mut positives: Vec<i8> = self.alphabet().into_iter().filter(|&a| a > 0).collect();
        positives.sort_unstable();
        if self.has_zero() {
            parts.push("0".to_string());
        }
        parts.extend(positives.iter().map(|a| format!("±{a}")));
        format!("{{{}}}", parts.join(","))
    }
}

impl fmt::Display for QuantizationSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Binary => f.write_str("binary"),
            Self::Ternary => f.write_str("ternary"),
            Self::Pow2Shift(n) => write!(f, "pow2:{n}"),
        }
    }
}

impl FromStr for QuantizationSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "binary" => Ok(Self::Binary),
            "ternary" => Ok(Self::Ternary),
            other => {
                let n = other
                    .strip_prefix("pow2:")
                    .and_then(|n| n.parse::<u32>().ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown quantization set `{other}`")))?;
                Self::pow2_shift(n)
            }
        }
    }
}

impl Serialize for QuantizationSet {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for QuantizationSet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Closest alphabet entry to `x`. Ties go to the entry of smaller magnitude,
/// and between `a` and `-a` to the positive one.
pub fn nearest_level<T: Scalar>(x: T, alphabet: &[i8]) -> i8 {
    assert!(!alphabet.is_empty(), "nearest_level: empty alphabet");
    let mut best = alphabet[0];
    let mut best_dist = (x - T::of(best as f64)).abs();
    for &a in &alphabet[1..] {
        let dist = (x - T::of(a as f64)).abs();
        let better = dist < best_dist
            || (dist == best_dist
                && (a.unsigned_abs() < best.unsigned_abs() || (a.unsigned_abs() == best.unsigned_abs() && a > best)));
        if better {
            best = a;
            best_dist = dist;
        }
    }
    best
}

/// Least-squares scale for fixed codes: `<V, Q> / <Q, Q>`.
///
/// When `V` is exactly `c * Q` the ratio `c` is returned bit-exactly, so
/// realized weights round-trip through a projection unchanged.
pub fn alpha_update<T: Scalar>(v: &[T], codes: &[i8]) -> Result<T> {
    if v.len() != codes.len() {
        return Err(Error::ShapeMismatch {
            op: "alpha_update",
            left: vec![v.len()],
            right: vec![codes.len()],
        });
    }
    if let Some(c) = exact_ratio(v, codes) {
        return Ok(c);
    }
    let mut num = T::zero();
    let mut den = T::zero();
    for (&x, &q) in v.iter().zip(codes) {
        let q = T::of(q as f64);
        num += x * q;
        den += q * q;
    }
    if den == T::zero() {
        return Err(Error::DegenerateCodes("all codes are zero, the scale is undefined".into()));
    }
    Ok(num / den)
}

/// `Some(c)` when every nonzero code satisfies `v = c * q` and every zero code
/// has `v = 0`. Division by a power of two is exact, so this detects exactly
/// representable vectors without rounding.
fn exact_ratio<T: Scalar>(v: &[T], codes: &[i8]) -> Option<T> {
    let mut ratio: Option<T> = None;
    for (&x, &q) in v.iter().zip(codes) {
        if q == 0 {
            if x != T::zero() {
                return None;
            }
            continue;
        }
        let r = x / T::of(q as f64);
        match ratio {
            None => ratio = Some(r),
            Some(c) if c == r => {}
            Some(_) => return None,
        }
    }
    ratio.filter(|&c| c > T::zero() && c.is_finite())
}

/// `||V - alpha * Q||^2`
pub fn objective<T: Scalar>(v: &[T], codes: &[i8], alpha: T) -> T {
    v.iter()
        .zip(codes)
        .map(|(&x, &q)| {
            let r = x - alpha * T::of(q as f64);
            r * r
        })
        .sum()
}

fn quantize_codes<T: Scalar>(v: &[T], alpha: T, alphabet: &[i8], out: &mut [i8]) {
    for (c, &x) in out.iter_mut().zip(v) {
        *c = nearest_level(x / alpha, alphabet);
    }
}

/// Scale used to start the alternation when none is given.
///
/// As the scale shrinks, each entry's code magnitude steps up one level at a
/// time, at `|v_j| / t` for every midpoint `t` between adjacent levels. The
/// codes are therefore piecewise constant in the scale. Sweeping these
/// breakpoints in decreasing order while maintaining `<V, Q>` and `<Q, Q>`
/// gives the least-squares residual `||V||^2 - <V, Q>^2 / <Q, Q>` of every
/// code pattern the scale can induce, and the scale of the best one is
/// returned. Returns `None` for an all-zero input.
pub fn default_init_alpha<T: Scalar>(v: &[T], set: QuantizationSet) -> Option<T> {
    let mut levels: Vec<T> = vec![T::zero()];
    levels.extend(set.alphabet().into_iter().filter(|&a| a > 0).map(|a| T::of(a as f64)));
    // binary: every entry sits on level 1 for any scale
    let start_level = if set.has_zero() { 0 } else { 1 };
    let two = T::of(2.0);

    let mags: Vec<T> = v.iter().map(|x| x.abs()).collect();
    let mut num = T::zero();
    let mut den = T::zero();
    if start_level == 1 {
        num = mags.iter().copied().sum();
        den = T::of(mags.len() as f64);
    }
    let total: T = mags.iter().map(|&x| x * x).sum();
    if total == T::zero() {
        return None;
    }

    // (breakpoint scale, entry, level reached)
    let mut events: Vec<(T, usize, usize)> = Vec::with_capacity(mags.len() * (levels.len() - start_level));
    for (j, &x) in mags.iter().enumerate() {
        if x == T::zero() {
            continue;
        }
        for k in start_level..levels.len() - 1 {
            let threshold = (levels[k] + levels[k + 1]) / two;
            events.push((x / threshold, j, k + 1));
        }
    }
    events.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).expect("finite breakpoints"));

    let mut best: Option<(T, T)> = None;
    let consider = |num: T, den: T, best: &mut Option<(T, T)>| {
        if den > T::zero() && num > T::zero() {
            let obj = total - num * num / den;
            if best.is_none_or(|(b, _)| obj < b) {
                *best = Some((obj, num / den));
            }
        }
    };
    consider(num, den, &mut best);
    let mut i = 0;
    while i < events.len() {
        let scale = events[i].0;
        while i < events.len() && events[i].0 == scale {
            let (_, j, k) = events[i];
            let (lo, hi) = (levels[k - 1], levels[k]);
            num += mags[j] * (hi - lo);
            den += hi * hi - lo * lo;
            i += 1;
        }
        consider(num, den, &mut best);
    }
    best.map(|(_, alpha)| alpha)
}

/// Smallest positive scale handed out for an all-zero input.
pub fn alpha_floor<T: Scalar>() -> T {
    T::min_positive_value()
}

/// Integer codes plus their shared scale: the realized weights are
/// `alpha * codes`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer<T> {
    pub set: QuantizationSet,
    pub shape: Vec<usize>,
    pub codes: Vec<i8>,
    pub alpha: T,
}

impl<T: Scalar> QuantizedLayer<T> {
    pub fn realize(&self) -> Tensor<T> {
        let data = self.codes.iter().map(|&q| self.alpha * T::of(q as f64)).collect();
        Tensor::new(self.shape.clone(), data).expect("codes match shape")
    }

    pub fn objective(&self, v: &[T]) -> T {
        objective(v, &self.codes, self.alpha)
    }

    /// Every code in the alphabet, positive finite scale, consistent shape.
    pub fn check_feasible(&self) -> Result<()> {
        if !(self.alpha > T::zero() && self.alpha.is_finite()) {
            return Err(Error::Validation(format!("scale {} is not strictly positive", self.alpha)));
        }
        if self.shape.iter().product::<usize>() != self.codes.len() {
            return Err(Error::Validation("code count does not match shape".into()));
        }
        if let Some(bad) = self.codes.iter().find(|&&q| !self.set.contains(q)) {
            return Err(Error::Validation(format!("code {bad} outside alphabet {}", self.set.alphabet_label())));
        }
        Ok(())
    }

    pub fn zero_fraction(&self) -> f64 {
        if self.codes.is_empty() {
            return 0.0;
        }
        self.codes.iter().filter(|&&q| q == 0).count() as f64 / self.codes.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionOptions {
    pub max_iters: usize,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

/// `(alpha, 2Q)` and `(2 alpha, Q)` realize the same weights. Halve the codes
/// while every nonzero code is even so each realized tensor has exactly one
/// representation. Scaling by two is exact in floating point.
fn canonicalize<T: Scalar>(codes: &mut [i8], alpha: &mut T) {
    while codes.iter().any(|&q| q != 0) && codes.iter().all(|&q| q % 2 == 0) {
        codes.iter_mut().for_each(|q| *q /= 2);
        *alpha = *alpha * T::of(2.0);
    }
}

/// Result of one projection with its convergence record.
#[derive(Debug, Clone)]
pub struct Projection<T> {
    pub layer: QuantizedLayer<T>,
    /// Scale/code alternations performed; the last one is the one that
    /// observed unchanged codes when `converged` is set.
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every half-step (scale update or code update).
    pub objective_trace: Vec<T>,
}

/// Project `v` onto the codebook of `set` by alternating minimization.
///
/// `init_alpha` warm-starts the scale (for example with the layer's scale
/// from the previous round); otherwise [`default_init_alpha`] is used.
pub fn project_quantize<T: Scalar>(
    v: &Tensor<T>,
    set: QuantizationSet,
    init_alpha: Option<T>,
    options: ProjectionOptions,
) -> Result<Projection<T>> {
    let data = v.data();
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot project an empty tensor".into()));
    }
    if !v.is_finite() {
        return Err(Error::NonFinite("projection input".into()));
    }
    let init_alpha = init_alpha.filter(|a| *a > T::zero() && a.is_finite());
    let alphabet = set.alphabet();
    let shape = v.shape().to_vec();

    if v.max_abs() == T::zero() {
        let (code, alpha) = if set.has_zero() {
            (0, init_alpha.unwrap_or_else(alpha_floor))
        } else {
            (nearest_level(T::zero(), &alphabet), alpha_floor())
        };
        let layer = QuantizedLayer {
            set,
            shape,
            codes: vec![code; data.len()],
            alpha,
        };
        let trace = vec![layer.objective(data)];
        return Ok(Projection {
            layer,
            iterations: 0,
            converged: true,
            objective_trace: trace,
        });
    }

    let cold = default_init_alpha(data, set).unwrap_or_else(alpha_floor);
    let mut best = alternate(data, &alphabet, init_alpha.unwrap_or(cold), options)?;
    // A warm start can settle in a worse local minimum than the cold start;
    // keep whichever fits better, preferring the warm one on ties.
    if init_alpha.is_some() {
        let fresh = alternate(data, &alphabet, cold, options)?;
        if fresh.objective_trace.last() < best.objective_trace.last() {
            best = fresh;
        }
    }
    let (mut codes, mut alpha) = (best.codes, best.alpha);
    canonicalize(&mut codes, &mut alpha);

    Ok(Projection {
        layer: QuantizedLayer { set, shape, codes, alpha },
        iterations: best.iterations,
        converged: best.converged,
        objective_trace: best.objective_trace,
    })
}

struct Alternation<T> {
    codes: Vec<i8>,
    alpha: T,
    iterations: usize,
    converged: bool,
    objective_trace: Vec<T>,
}

/// Scale/code alternation from the scale `alpha`.
fn alternate<T: Scalar>(data: &[T], alphabet: &[i8], mut alpha: T, options: ProjectionOptions) -> Result<Alternation<T>> {
    let mut codes = vec![0i8; data.len()];
    quantize_codes(data, alpha, alphabet, &mut codes);
    let mut halvings = 0;
    while codes.iter().all(|&q| q == 0) {
        if halvings == MAX_HALVINGS {
            return Err(Error::DegenerateCodes(format!(
                "all codes zero after {MAX_HALVINGS} halvings of the scale"
            )));
        }
        alpha = alpha / T::of(2.0);
        halvings += 1;
        quantize_codes(data, alpha, alphabet, &mut codes);
    }

    let mut trace = vec![objective(data, &codes, alpha)];
    let mut next = vec![0i8; data.len()];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < options.max_iters {
        alpha = alpha_update(data, &codes)?;
        trace.push(objective(data, &codes, alpha));
        quantize_codes(data, alpha, alphabet, &mut next);
        iterations += 1;
        if next == codes {
            converged = true;
            break;
        }
        std::mem::swap(&mut codes, &mut next);
        trace.push(objective(data, &codes, alpha));
    }
    if !converged {
        alpha = alpha_update(data, &codes)?;
        trace.push(objective(data, &codes, alpha));
    }
    Ok(Alternation {
        codes,
        alpha,
        iterations,
        converged,
        objective_trace: trace,
    })
}
