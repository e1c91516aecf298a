//! Model container and quantized inference.
//!
//! File layout:
//!
//! ```text
//! "LBADMM01"                 8-byte magic
//! u32 LE                     header length in bytes
//! header                     canonical JSON (see `Header`)
//! per weight layer, in order:
//!   codebook:        f64 alpha, then codes (i8 each, or bit-packed)
//!   int8:            f64 scale, then i8 codes
//!   full_precision:  f64 weights
//! per bias, in layer order:  f64 values
//! ```
//!
//! All numbers are little-endian. Packed codes store each weight's index in
//! the ascending alphabet using `bits_per_weight` bits, least significant
//! bit first, padded to a whole byte per layer.

mod shift;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use shift::{quantized_forward, quantized_forward_counted, OpCounts, ShiftAddKernel};

use crate::error::{Error, Result};
use crate::network::{Architecture, Network, Params};
use crate::quantset::{Int8Layer, LayerPolicy, LayerTarget, QuantizationSet, QuantizedLayer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LBADMM01";
const MAGIC_STEM: &[u8; 6] = b"LBADMM";
pub const FORMAT_VERSION: u32 = 1;

/// Bytes of the per-layer scale stored next to codebook codes.
pub const ALPHA_BYTES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeEncoding {
    Int8,
    Packed,
}

/// Free-form provenance carried in the header.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Learning rate in effect when training ended.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_lr: Option<f64>,
    /// Test accuracy measured when the model was produced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerHeader {
    name: String,
    policy: LayerPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    encoding: Option<CodeEncoding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    architecture: Architecture,
    layers: Vec<LayerHeader>,
    meta: ModelMeta,
}

/// A network whose weight layers are codebook, INT8, or full precision.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub arch: Architecture,
    pub layers: Vec<LayerTarget<f64>>,
    pub biases: Vec<Option<Tensor<f64>>>,
    pub meta: ModelMeta,
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Tensor<f64> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.as_f64()).collect()).expect("same shape")
}

fn target_to_f64<T: Scalar>(t: &LayerTarget<T>) -> LayerTarget<f64> {
    match t {
        LayerTarget::Codebook(q) => LayerTarget::Codebook(QuantizedLayer {
            set: q.set,
            shape: q.shape.clone(),
            codes: q.codes.clone(),
            alpha: q.alpha.as_f64(),
        }),
        LayerTarget::Int8(q) => LayerTarget::Int8(Int8Layer {
            shape: q.shape.clone(),
            codes: q.codes.clone(),
            scale: q.scale.as_f64(),
        }),
        LayerTarget::FullPrecision(w) => LayerTarget::FullPrecision(to_f64(w)),
    }
}

impl QuantizedModel {
    /// Every weight layer in full precision.
    pub fn full_precision<T: Scalar>(arch: Architecture, params: &Params<T>) -> Result<Self> {
        arch.check_params(params)?;
        let layers = params.weights.iter().map(|w| LayerTarget::FullPrecision(to_f64(w))).collect();
        Self::assemble(arch, layers, params)
    }

    /// Projected weight layers with the biases of `params`.
    pub fn from_targets<T: Scalar>(arch: Architecture, targets: &[LayerTarget<T>], params: &Params<T>) -> Result<Self> {
        Self::assemble(arch, targets.iter().map(target_to_f64).collect(), params)
    }

    fn assemble<T: Scalar>(arch: Architecture, layers: Vec<LayerTarget<f64>>, params: &Params<T>) -> Result<Self> {
        let model = Self {
            arch,
            layers,
            biases: params.biases.iter().map(|b| b.as_ref().map(to_f64)).collect(),
            meta: ModelMeta::default(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_meta(mut self, meta: ModelMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn policies(&self) -> Vec<LayerPolicy> {
        self.layers.iter().map(LayerTarget::policy).collect()
    }

    /// Realized dense parameters.
    pub fn params(&self) -> Params<f64> {
        Params {
            weights: self.layers.iter().map(LayerTarget::realize).collect(),
            biases: self.biases.clone(),
        }
    }

    pub fn network(&self) -> Network<f64> {
        Network {
            arch: self.arch.clone(),
            params: self.params(),
        }
    }

    /// Shapes agree with the architecture, every codebook layer is exactly
    /// feasible, every stored float is finite.
    pub fn validate(&self) -> Result<()> {
        let n = self.arch.num_param_layers();
        if self.layers.len() != n || self.biases.len() != n {
            return Err(Error::Consistency(format!(
                "architecture has {n} weight layers, model has {} layers and {} biases",
                self.layers.len(),
                self.biases.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let annotate = |e: Error| match e {
                Error::Validation(msg) => Error::Validation(format!("layer {i}: {msg}")),
                other => other,
            };
            match layer {
                LayerTarget::Codebook(q) => q.check_feasible().map_err(annotate)?,
                LayerTarget::Int8(q) => q.check_valid().map_err(annotate)?,
                LayerTarget::FullPrecision(w) => {
                    if !w.is_finite() {
                        return Err(Error::Validation(format!("layer {i}: non-finite weight")));
                    }
                }
            }
        }
        if self.biases.iter().flatten().any(|b| !b.is_finite()) {
            return Err(Error::Validation("non-finite bias".into()));
        }
        self.arch.check_params(&self.params()).map_err(|e| Error::Consistency(e.to_string()))
    }

    pub fn encode(&self, encoding: CodeEncoding) -> Result<Vec<u8>> {
        self.validate()?;
        let names = self.arch.layer_names();
        let header = Header {
            format_version: FORMAT_VERSION,
            architecture: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .zip(&names)
                .map(|(l, name)| LayerHeader {
                    name: name.clone(),
                    policy: l.policy(),
                    encoding: matches!(l, LayerTarget::Codebook(_)).then_some(encoding),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for layer in &self.layers {
            match layer {
                LayerTarget::Codebook(q) => {
                    out.extend_from_slice(&q.alpha.to_le_bytes());
                    match encoding {
                        CodeEncoding::Int8 => out.extend(q.codes.iter().map(|&c| c as u8)),
                        CodeEncoding::Packed => out.extend(pack_codes(q.set, &q.codes)),
                    }
                }
                LayerTarget::Int8(q) => {
                    out.extend_from_slice(&q.scale.to_le_bytes());
                    out.extend(q.codes.iter().map(|&c| c as u8));
                }
                LayerTarget::FullPrecision(w) => w.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        for b in self.biases.iter().flatten() {
            b.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut reader = Reader { bytes, pos: 0 };
        let magic = reader.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(if magic.starts_with(MAGIC_STEM) {
                Error::VersionMismatch {
                    expected: String::from_utf8_lossy(MAGIC).into_owned(),
                    found: String::from_utf8_lossy(magic).into_owned(),
                }
            } else {
                Error::Format("not a model file (bad magic)".into())
            });
        }
        let header_len = u32::from_le_bytes(reader.take(4, "header length")?.try_into().expect("4 bytes")) as usize;
        let header: Header = serde_json::from_slice(reader.take(header_len, "header")?).map_err(|e| Error::Format(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION.to_string(),
                found: header.format_version.to_string(),
            });
        }
        let arch = header.architecture;
        if header.layers.len() != arch.num_param_layers() {
            return Err(Error::Consistency(format!(
                "header lists {} weight layers, architecture has {}",
                header.layers.len(),
                arch.num_param_layers()
            )));
        }
        let mut layers = Vec::with_capacity(header.layers.len());
        for (spec, lh) in arch.param_layers().zip(&header.layers) {
            let shape = spec.weight_shape().expect("parameterized");
            let d: usize = shape.iter().product();
            let layer = match lh.policy {
                LayerPolicy::Codebook(set) => {
                    let alpha = reader.f64("codebook scale")?;
                    let codes = match lh.encoding {
                        Some(CodeEncoding::Int8) => reader.take(d, "codes")?.iter().map(|&b| b as i8).collect(),
                        Some(CodeEncoding::Packed) => unpack_codes(set, reader.take(packed_len(set, d), "packed codes")?, d)?,
                        None => return Err(Error::Format(format!("layer {}: codebook layer without encoding", lh.name))),
                    };
                    LayerTarget::Codebook(QuantizedLayer { set, shape, codes, alpha })
                }
                LayerPolicy::Int8 => {
                    let scale = reader.f64("int8 scale")?;
                    let codes = reader.take(d, "int8 codes")?.iter().map(|&b| b as i8).collect();
                    LayerTarget::Int8(Int8Layer { shape, codes, scale })
                }
                LayerPolicy::FullPrecision => LayerTarget::FullPrecision(Tensor::new(shape, reader.f64s(d, "weights")?)?),
            };
            layers.push(layer);
        }
        let mut biases = Vec::new();
        for spec in arch.param_layers() {
            biases.push(match spec.bias_len() {
                Some(n) => Some(Tensor::new(vec![n], reader.f64s(n, "bias")?)?),
                None => None,
            });
        }
        if reader.pos != bytes.len() {
            return Err(Error::Length(format!("{} trailing bytes after payload", bytes.len() - reader.pos)));
        }
        let model = Self {
            arch,
            layers,
            biases,
            meta: header.meta,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path, encoding: CodeEncoding) -> Result<()> {
        fs::write(path, self.encode(encoding)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::decode(&bytes)
    }

    /// Per-layer storage report.
    pub fn inspect(&self) -> Vec<LayerInfo> {
        self.arch
            .layer_names()
            .into_iter()
            .zip(&self.layers)
            .map(|(name, layer)| {
                let weights = layer.realize().len();
                match layer {
                    LayerTarget::Codebook(q) => LayerInfo {
                        name,
                        kind: q.set.to_string(),
                        alphabet: q.set.alphabet_label(),
                        alpha: Some(q.alpha),
                        zero_fraction: q.zero_fraction(),
                        weights,
                        bits_per_weight: q.set.bits_per_weight(),
                        packed_bytes: packed_len(q.set, weights) + ALPHA_BYTES,
                    },
                    LayerTarget::Int8(q) => LayerInfo {
                        name,
                        kind: "int8".into(),
                        alphabet: "[-127,127]".into(),
                        alpha: Some(q.scale),
                        zero_fraction: q.codes.iter().filter(|&&c| c == 0).count() as f64 / weights.max(1) as f64,
                        weights,
                        bits_per_weight: 8,
                        packed_bytes: weights + ALPHA_BYTES,
                    },
                    LayerTarget::FullPrecision(w) => LayerInfo {
                        name,
                        kind: "full_precision".into(),
                        alphabet: "-".into(),
                        alpha: None,
                        zero_fraction: w.data().iter().filter(|&&x| x == 0.0).count() as f64 / weights.max(1) as f64,
                        weights,
                        bits_per_weight: 64,
                        packed_bytes: 8 * weights,
                    },
                }
            })
            .collect()
    }
}

/// Storage summary of one weight layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: String,
    pub alphabet: String,
    pub alpha: Option<f64>,
    pub zero_fraction: f64,
    pub weights: usize,
    pub bits_per_weight: u32,
    /// Size with bit-packed codes, including the 8-byte scale.
    pub packed_bytes: usize,
}

/// Bytes of `d` packed codes.
pub fn packed_len(set: QuantizationSet, d: usize) -> usize {
    (set.bits_per_weight() as usize * d).div_ceil(8)
}

pub fn pack_codes(set: QuantizationSet, codes: &[i8]) -> Vec<u8> {
    let alphabet = set.alphabet();
    let bits = set.bits_per_weight() as usize;
    let mut out = vec![0u8; packed_len(set, codes.len())];
    for (i, &c) in codes.iter().enumerate() {
        let index = alphabet.iter().position(|&a| a == c).expect("code in alphabet");
        for b in 0..bits {
            if index >> b & 1 == 1 {
                let bit = i * bits + b;
                out[bit / 8] |= 1 << (bit % 8);
            }
        }
    }
    out
}

pub fn unpack_codes(set: QuantizationSet, packed: &[u8], d: usize) -> Result<Vec<i8>> {
    let alphabet = set.alphabet();
    let bits = set.bits_per_weight() as usize;
    (0..d)
        .map(|i| {
            let index = (0..bits).fold(0usize, |acc, b| {
                let bit = i * bits + b;
                acc | (((packed[bit / 8] >> (bit % 8)) & 1) as usize) << b
            });
            alphabet
                .get(index)
                .copied()
                .ok_or_else(|| Error::Validation(format!("packed index {index} outside alphabet {}", set.alphabet_label())))
        })
        .collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Length(format!("file ends inside {what}: need {n} bytes at offset {}, have {}", self.pos, self.bytes.len() - self.pos))
        })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        Ok(self.take(8 * n, what)?.chunks(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}
