//! Per-layer treatment: low-bit codebook, INT8, or left in full precision.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{project_quantize, ProjectionOptions, QuantizationSet, QuantizedLayer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INT8_MAX_CODE: i8 = 127;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerPolicy {
    Codebook(QuantizationSet),
    /// Symmetric uniform quantization to 255 levels.
    Int8,
    FullPrecision,
}

impl fmt::Display for LayerPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Codebook(set) => set.fmt(f),
            Self::Int8 => f.write_str("int8"),
            Self::FullPrecision => f.write_str("full_precision"),
        }
    }
}

impl FromStr for LayerPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "int8" => Ok(Self::Int8),
            "full_precision" | "fp" => Ok(Self::FullPrecision),
            other => other.parse().map(Self::Codebook),
        }
    }
}

impl Serialize for LayerPolicy {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// INT8 weights: `scale * codes` with `codes` in `[-127, 127]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Int8Layer<T> {
    pub shape: Vec<usize>,
    pub codes: Vec<i8>,
    pub scale: T,
}

impl<T: Scalar> Int8Layer<T> {
    /// `scale = max|w| / 127`, `codes = round(w / scale)`. An all-zero
    /// tensor gets scale 1 and zero codes.
    pub fn quantize(w: &Tensor<T>) -> Self {
        let max = w.max_abs();
        let scale = if max > T::zero() { max / T::of(INT8_MAX_CODE as f64) } else { T::one() };
        let limit = T::of(INT8_MAX_CODE as f64);
        let codes = w
            .data()
            .iter()
            .map(|&x| (x / scale).round().max(-limit).min(limit).to_i8().expect("clamped to i8"))
            .collect();
        Self {
            shape: w.shape().to_vec(),
            codes,
            scale,
        }
    }

    pub fn realize(&self) -> Tensor<T> {
        let data = self.codes.iter().map(|&q| self.scale * T::of(q as f64)).collect();
        Tensor::new(self.shape.clone(), data).expect("codes match shape")
    }

    pub fn check_valid(&self) -> Result<()> {
        if !(self.scale > T::zero() && self.scale.is_finite()) {
            return Err(Error::Validation(format!("int8 scale {} is not strictly positive", self.scale)));
        }
        if self.codes.iter().any(|&q| q < -INT8_MAX_CODE) {
            return Err(Error::Validation("int8 code -128 is outside the symmetric range".into()));
        }
        if self.shape.iter().product::<usize>() != self.codes.len() {
            return Err(Error::Validation("code count does not match shape".into()));
        }
        Ok(())
    }
}

/// The auxiliary (projected) variable of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerTarget<T> {
    Codebook(QuantizedLayer<T>),
    Int8(Int8Layer<T>),
    FullPrecision(Tensor<T>),
}

impl<T: Scalar> LayerTarget<T> {
    pub fn realize(&self) -> Tensor<T> {
        match self {
            Self::Codebook(q) => q.realize(),
            Self::Int8(q) => q.realize(),
            Self::FullPrecision(w) => w.clone(),
        }
    }

    /// Codebook scale or INT8 step, if any.
    pub fn scale(&self) -> Option<T> {
        match self {
            Self::Codebook(q) => Some(q.alpha),
            Self::Int8(q) => Some(q.scale),
            Self::FullPrecision(_) => None,
        }
    }

    pub fn policy(&self) -> LayerPolicy {
        match self {
            Self::Codebook(q) => LayerPolicy::Codebook(q.set),
            Self::Int8(_) => LayerPolicy::Int8,
            Self::FullPrecision(_) => LayerPolicy::FullPrecision,
        }
    }
}

/// Map one layer's weights onto its policy's feasible set. `init_alpha`
/// warm-starts codebook projections and is ignored otherwise.
pub fn apply_layer_policy<T: Scalar>(w: &Tensor<T>, policy: LayerPolicy, init_alpha: Option<T>) -> Result<LayerTarget<T>> {
    Ok(match policy {
        LayerPolicy::Codebook(set) => {
            LayerTarget::Codebook(project_quantize(w, set, init_alpha, ProjectionOptions::default())?.layer)
        }
        LayerPolicy::Int8 => LayerTarget::Int8(Int8Layer::quantize(w)),
        LayerPolicy::FullPrecision => LayerTarget::FullPrecision(w.clone()),
    })
}

/// Project every layer independently. `warm` holds an optional starting
/// scale per layer.
pub fn project_state<T: Scalar>(
    values: &[Tensor<T>],
    policies: &[LayerPolicy],
    warm: &[Option<T>],
) -> Result<Vec<LayerTarget<T>>> {
    if values.len() != policies.len() || values.len() != warm.len() {
        return Err(Error::InvalidArgument(format!(
            "project_state: {} tensors, {} policies, {} warm starts",
            values.len(),
            policies.len(),
            warm.len()
        )));
    }
    values
        .iter()
        .zip(policies)
        .zip(warm)
        .enumerate()
        .map(|(i, ((v, &policy), &init))| {
            apply_layer_policy(v, policy, init).map_err(|e| match e {
                Error::DegenerateCodes(msg) => Error::DegenerateCodes(format!("layer {i}: {msg}")),
                Error::NonFinite(msg) => Error::NonFinite(format!("layer {i}: {msg}")),
                other => other,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tv(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("int8".parse::<LayerPolicy>().unwrap(), LayerPolicy::Int8);
        assert_eq!("full_precision".parse::<LayerPolicy>().unwrap(), LayerPolicy::FullPrecision);
        assert_eq!("pow2:2".parse::<LayerPolicy>().unwrap(), LayerPolicy::Codebook(QuantizationSet::Pow2Shift(2)));
        assert!("int4".parse::<LayerPolicy>().is_err());
    }

    #[test]
    fn full_precision_is_identity() {
        let w = tv(&[0.123, -4.5, 1e-7]);
        let out = apply_layer_policy(&w, LayerPolicy::FullPrecision, None).unwrap();
        assert_eq!(out.realize(), w);
        assert_eq!(out.scale(), None);
    }

    #[test]
    fn int8_example() {
        let q = Int8Layer::quantize(&tv(&[0.127, -1.27]));
        assert!((q.scale - 0.01).abs() < 1e-17);
        assert_eq!(q.codes, vec![13, -127]);
        let w = q.realize();
        assert!((w.data()[0] - 0.13).abs() < 1e-15);
        assert!((w.data()[1] + 1.27).abs() < 1e-15);
    }

    #[test]
    fn int8_is_idempotent() {
        let w = tv(&[0.31, -0.002, 0.77, -1.9, 0.0, 1.2]);
        let once = Int8Layer::quantize(&w);
        let twice = Int8Layer::quantize(&once.realize());
        assert_eq!(twice.codes, once.codes);
        for (a, b) in twice.realize().data().iter().zip(once.realize().data()) {
            assert!((a - b).abs() <= 1e-15 * b.abs());
        }
    }

    #[test]
    fn int8_zero_tensor() {
        let q = Int8Layer::quantize(&Tensor::<f64>::zeros(&[3]));
        assert_eq!(q.codes, vec![0; 3]);
        q.check_valid().unwrap();
    }

    #[test]
    fn project_state_per_layer() {
        let a = tv(&[0.5, -0.5, 0.0]);
        let b = tv(&[0.25, 0.5, -1.0, 0.0]);
        let policies = [LayerPolicy::Codebook(QuantizationSet::Ternary), LayerPolicy::Codebook(QuantizationSet::Pow2Shift(2))];
        let out = project_state(&[a.clone(), b.clone()], &policies, &[None, Some(0.25)]).unwrap();
        assert_eq!(out[0].realize(), a);
        assert_eq!(out[1].realize(), b);

        let swapped = project_state(&[b.clone(), a.clone()], &[policies[1], policies[0]], &[Some(0.25), None]).unwrap();
        assert_eq!(swapped[0], out[1]);
        assert_eq!(swapped[1], out[0]);

        let single = project_state(&[a.clone()], &policies[..1], &[None]).unwrap();
        let direct = project_quantize(&a, QuantizationSet::Ternary, None, ProjectionOptions::default()).unwrap();
        assert_eq!(single[0], LayerTarget::Codebook(direct.layer));
    }

    #[test]
    fn project_state_reports_layer() {
        let tiny = tv(&[1e-30]);
        let err = project_state(&[tv(&[1.0]), tiny], &[LayerPolicy::Int8, LayerPolicy::Codebook(QuantizationSet::Ternary)], &[None, Some(1e30)])
            .unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
    }
}
