//! Instance-level compression of cut-layer activations and their gradients.
//!
//! Every scheme maps one `d`-dimensional activation to a payload and back.
//! Sparsifying schemes also hand back a [`SelectionRecord`] that the feature
//! owner keeps until the matching gradient arrives, so backward payloads
//! carry values only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DecodeError, Error, Result};

/// Compression scheme and its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Codec {
    None,
    /// Keep the first `k` entries.
    SizeReduction { k: usize },
    /// Uniform `bits`-bit quantization over the per-instance range.
    Quantization { bits: u32 },
    /// Keep the `k` largest-magnitude entries.
    TopK { k: usize },
    /// Randomized top-k during training, plain top-k at inference.
    RandTopK { k: usize, alpha: f64 },
    /// L1 penalty on the activation; entries with `|o| > zero_epsilon` are sent.
    L1 { lambda: f64, zero_epsilon: f64 },
}

impl Codec {
    pub const DEFAULT_ZERO_EPSILON: f64 = 1e-8;

    /// Codec identifier used in wire headers.
    pub fn id(&self) -> u8 {
        match self {
            Codec::None => 0,
            Codec::SizeReduction { .. } => 1,
            Codec::Quantization { .. } => 2,
            Codec::TopK { .. } => 3,
            Codec::RandTopK { .. } => 4,
            Codec::L1 { .. } => 5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Codec::None => "none",
            Codec::SizeReduction { .. } => "size-reduction",
            Codec::Quantization { .. } => "quantization",
            Codec::TopK { .. } => "topk",
            Codec::RandTopK { .. } => "randtopk",
            Codec::L1 { .. } => "l1",
        }
    }

    /// Fixed number of kept entries, for the schemes that have one.
    pub fn kept(&self) -> Option<usize> {
        match *self {
            Codec::SizeReduction { k } | Codec::TopK { k } | Codec::RandTopK { k, .. } => Some(k),
            _ => None,
        }
    }

    /// Whether the backward pass only carries gradients at selected indices.
    pub fn sparse_backward(&self) -> bool {
        self.kept().is_some()
    }
}

/// A codec together with the bit width `N` of transmitted real values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub codec: Codec,
    /// 32 (IEEE single) or 64 (IEEE double).
    pub value_bits: u32,
}

impl CodecConfig {
    pub fn new(codec: Codec) -> Self {
        Self {
            codec,
            value_bits: 32,
        }
    }

    pub fn with_value_bits(mut self, value_bits: u32) -> Self {
        self.value_bits = value_bits;
        self
    }

    /// Checks the parameters against a cut dimension `d`.
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.value_bits != 32 && self.value_bits != 64 {
            return Err(Error::Config(format!(
                "value bit width must be 32 or 64, got {}",
                self.value_bits
            )));
        }
        if d == 0 {
            return Err(Error::Config("cut dimension must be > 0".into()));
        }
        match self.codec {
            Codec::None => {}
            Codec::SizeReduction { k } | Codec::TopK { k } => check_k(k, d)?,
            Codec::RandTopK { k, alpha } => {
                check_k(k, d)?;
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::Config(format!("alpha must be in [0, 1], got {alpha}")));
                }
            }
            Codec::Quantization { bits } => {
                if bits == 0 || bits > self.value_bits.min(32) {
                    return Err(Error::Config(format!(
                        "quantization bits must be in 1..={}, got {bits}",
                        self.value_bits.min(32)
                    )));
                }
            }
            Codec::L1 {
                lambda,
                zero_epsilon,
            } => {
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
                }
                if !(zero_epsilon >= 0.0 && zero_epsilon.is_finite()) {
                    return Err(Error::Config(format!(
                        "zero epsilon must be >= 0, got {zero_epsilon}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rounds a value to what survives transmission.
    #[inline]
    pub fn narrow(&self, v: f64) -> f64 {
        if self.value_bits == 32 {
            v as f32 as f64
        } else {
            v
        }
    }

    fn narrow_all(&self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|&x| self.narrow(x)).collect()
    }
}

fn check_k(k: usize, d: usize) -> Result<()> {
    if k == 0 || k > d {
        return Err(Error::Config(format!("k must be in 1..={d}, got {k}")));
    }
    Ok(())
}

/// Bits per transmitted index, `ceil(log2 d)`.
pub fn index_bits(d: usize) -> u32 {
    if d <= 1 {
        0
    } else {
        usize::BITS - (d - 1).leading_zeros()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Indices retained by a forward compression, in increasing order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionRecord(pub Vec<usize>);

impl SelectionRecord {
    pub fn indices(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsePayload {
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparsePayload {
    pub fn new(indices: Vec<usize>, values: Vec<f64>, d: usize) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(DecodeError::Malformed(format!(
                "{} indices but {} values",
                indices.len(),
                values.len()
            ))
            .into());
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DecodeError::Malformed("indices not strictly increasing".into()).into());
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= d) {
            return Err(DecodeError::Malformed(format!("index {bad} >= d = {d}")).into());
        }
        Ok(Self { indices, values })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantPayload {
    pub codes: Vec<u32>,
    pub o_min: f64,
    pub o_max: f64,
    pub bits: u32,
}

impl QuantPayload {
    fn bin_width(&self) -> f64 {
        (self.o_max - self.o_min) / (1u64 << self.bits) as f64
    }
}

/// One instance's compressed activation.
#[derive(Debug, Clone, PartialEq)]
pub enum ForwardPayload {
    Dense(Vec<f64>),
    Truncated(Vec<f64>),
    Sparse(SparsePayload),
    Quantized(QuantPayload),
}

/// Indices of the `k` largest magnitudes, returned in increasing order.
/// Equal magnitudes go to the lower index.
pub fn select_topk(values: &[f64], k: usize) -> Result<Vec<usize>> {
    check_k(k, values.len())?;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Randomized top-k selection.
///
/// Makes `k` draws without replacement. Each draw picks a remaining top-k
/// index with total probability `1 - alpha` and a remaining non-top-k index
/// with total probability `alpha`, uniformly within the pool. When one pool
/// is empty the draw comes from the other. `alpha == 0` is exactly
/// [`select_topk`] and consumes no randomness.
pub fn select_randtopk<R: Rng + ?Sized>(
    values: &[f64],
    k: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let mut top = select_topk(values, k)?;
    if alpha == 0.0 {
        return Ok(top);
    }
    let mut rest: Vec<usize> = {
        let mut is_top = vec![false; values.len()];
        for &i in &top {
            is_top[i] = true;
        }
        (0..values.len()).filter(|&i| !is_top[i]).collect()
    };
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let from_rest = if top.is_empty() {
            true
        } else if rest.is_empty() {
            false
        } else {
            rng.gen::<f64>() < alpha
        };
        let pool = if from_rest { &mut rest } else { &mut top };
        let pick = rng.gen_range(0..pool.len());
        chosen.push(pool.swap_remove(pick));
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Compresses one activation. Returns the payload and, for sparsifying
/// schemes, the selection the backward pass must reuse.
pub fn compress_forward<R: Rng + ?Sized>(
    config: &CodecConfig,
    activation: &[f64],
    mode: Mode,
    rng: &mut R,
) -> Result<(ForwardPayload, Option<SelectionRecord>)> {
    let d = activation.len();
    config.validate(d)?;
    if activation.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite activation".into()));
    }
    let sparse = |indices: Vec<usize>| -> Result<(ForwardPayload, Option<SelectionRecord>)> {
        let values = indices.iter().map(|&i| config.narrow(activation[i])).collect();
        let payload = SparsePayload::new(indices.clone(), values, d)?;
        Ok((ForwardPayload::Sparse(payload), Some(SelectionRecord(indices))))
    };
    match config.codec {
        Codec::None => Ok((ForwardPayload::Dense(config.narrow_all(activation)), None)),
        Codec::SizeReduction { k } => Ok((
            ForwardPayload::Truncated(config.narrow_all(&activation[..k])),
            Some(SelectionRecord((0..k).collect())),
        )),
        Codec::Quantization { bits } => Ok((
            ForwardPayload::Quantized(quantize(config, activation, bits)),
            None,
        )),
        Codec::TopK { k } => sparse(select_topk(activation, k)?),
        Codec::RandTopK { k, alpha } => match mode {
            Mode::Train => sparse(select_randtopk(activation, k, alpha, rng)?),
            Mode::Inference => sparse(select_topk(activation, k)?),
        },
        Codec::L1 { zero_epsilon, .. } => {
            let indices: Vec<usize> = (0..d).filter(|&i| activation[i].abs() > zero_epsilon).collect();
            let values = indices.iter().map(|&i| config.narrow(activation[i])).collect();
            Ok((ForwardPayload::Sparse(SparsePayload::new(indices, values, d)?), None))
        }
    }
}

fn quantize(config: &CodecConfig, activation: &[f64], bits: u32) -> QuantPayload {
    // The range is transmitted, so codes are computed against the narrowed bounds.
    let lo = activation.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = activation.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (o_min, o_max) = (config.narrow(lo), config.narrow(hi));
    let levels = 1u64 << bits;
    let width = (o_max - o_min) / levels as f64;
    let max_code = (levels - 1) as f64;
    let codes = activation
        .iter()
        .map(|&o| {
            if width > 0.0 {
                ((o - o_min) / width).floor().clamp(0.0, max_code) as u32
            } else {
                0
            }
        })
        .collect();
    QuantPayload {
        codes,
        o_min,
        o_max,
        bits,
    }
}

pub fn decompress_forward(config: &CodecConfig, payload: &ForwardPayload, d: usize) -> Result<Vec<f64>> {
    config.validate(d)?;
    let mismatch = || {
        Error::from(DecodeError::Malformed(format!(
            "payload kind does not match codec {}",
            config.codec.name()
        )))
    };
    match (&config.codec, payload) {
        (Codec::None, ForwardPayload::Dense(v)) => {
            expect_len(v.len(), d)?;
            Ok(v.clone())
        }
        (Codec::SizeReduction { k }, ForwardPayload::Truncated(v)) => {
            expect_len(v.len(), *k)?;
            let mut out = vec![0.0; d];
            out[..*k].copy_from_slice(v);
            Ok(out)
        }
        (Codec::Quantization { bits }, ForwardPayload::Quantized(q)) => {
            expect_len(q.codes.len(), d)?;
            if q.bits != *bits || !(q.o_min <= q.o_max) {
                return Err(DecodeError::Malformed("inconsistent quantization header".into()).into());
            }
            let limit = 1u64 << q.bits;
            if q.codes.iter().any(|&c| c as u64 >= limit) {
                return Err(DecodeError::Malformed("quantization code out of range".into()).into());
            }
            let width = q.bin_width();
            Ok(q.codes.iter().map(|&c| q.o_min + (c as f64 + 0.5) * width).collect())
        }
        (Codec::TopK { .. } | Codec::RandTopK { .. } | Codec::L1 { .. }, ForwardPayload::Sparse(s)) => {
            if let Some(k) = config.codec.kept() {
                expect_len(s.len(), k)?;
            }
            if let Some(&bad) = s.indices.iter().find(|&&i| i >= d) {
                return Err(DecodeError::Malformed(format!("index {bad} >= d = {d}")).into());
            }
            let mut out = vec![0.0; d];
            for (&i, &v) in s.indices.iter().zip(&s.values) {
                out[i] = v;
            }
            Ok(out)
        }
        _ => Err(mismatch()),
    }
}

fn expect_len(actual: usize, expected: usize) -> Result<()> {
    if actual != expected {
        return Err(DecodeError::Malformed(format!("expected {expected} entries, got {actual}")).into());
    }
    Ok(())
}

/// Gradient values to send back for one instance. Sparsifying schemes send
/// only the entries at the forward selection; the others send all `d`.
pub fn compress_backward(
    config: &CodecConfig,
    grad: &[f64],
    selection: Option<&SelectionRecord>,
) -> Result<Vec<f64>> {
    config.validate(grad.len())?;
    if !config.codec.sparse_backward() {
        return Ok(config.narrow_all(grad));
    }
    let selection = selection.ok_or_else(|| {
        Error::ProtocolState(format!(
            "{} backward needs the forward selection",
            config.codec.name()
        ))
    })?;
    selection
        .0
        .iter()
        .map(|&i| {
            grad.get(i)
                .map(|&g| config.narrow(g))
                .ok_or_else(|| Error::ProtocolState(format!("selected index {i} out of range")))
        })
        .collect()
}

/// Expands received gradient values into a dense `d`-vector, zero off the
/// selection.
pub fn decompress_backward(
    config: &CodecConfig,
    values: &[f64],
    selection: Option<&SelectionRecord>,
    d: usize,
) -> Result<Vec<f64>> {
    config.validate(d)?;
    if !config.codec.sparse_backward() {
        expect_len(values.len(), d)?;
        return Ok(values.to_vec());
    }
    let selection = selection.ok_or_else(|| {
        Error::ProtocolState(format!(
            "{} backward needs the forward selection",
            config.codec.name()
        ))
    })?;
    expect_len(values.len(), selection.0.len())?;
    let mut out = vec![0.0; d];
    for (&i, &v) in selection.0.iter().zip(values) {
        if i >= d {
            return Err(Error::ProtocolState(format!("selected index {i} out of range")));
        }
        out[i] = v;
    }
    Ok(out)
}

/// `lambda * sum |o_i|` and its gradient `lambda * sign(o_i)`, with `sign(0) = 0`.
pub fn l1_penalty(activation: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let penalty = lambda * activation.iter().map(|o| o.abs()).sum::<f64>();
    let grad = activation
        .iter()
        .map(|&o| {
            if o > 0.0 {
                lambda
            } else if o < 0.0 {
                -lambda
            } else {
                0.0
            }
        })
        .collect();
    (penalty, grad)
}

/// Transmitted size relative to sending all `d` values uncompressed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressedSize {
    pub forward: f64,
    pub backward: f64,
}

/// Nominal compressed size of a scheme. Quantization ranges and L1 counts
/// are per-message constants and not included.
///
/// L1 keeps a data-dependent number of entries, so it needs the measured
/// mean `l1_kept`; the other schemes ignore it.
pub fn compressed_size(config: &CodecConfig, d: usize, l1_kept: Option<f64>) -> Result<CompressedSize> {
    config.validate(d)?;
    let n = config.value_bits as f64;
    let df = d as f64;
    let sparse_forward = |k: f64| k / df * (1.0 + index_bits(d) as f64 / n);
    Ok(match config.codec {
        Codec::None => CompressedSize {
            forward: 1.0,
            backward: 1.0,
        },
        Codec::SizeReduction { k } => CompressedSize {
            forward: k as f64 / df,
            backward: k as f64 / df,
        },
        Codec::Quantization { bits } => CompressedSize {
            forward: bits as f64 / n,
            backward: 1.0,
        },
        Codec::TopK { k } | Codec::RandTopK { k, .. } => CompressedSize {
            forward: sparse_forward(k as f64),
            backward: k as f64 / df,
        },
        Codec::L1 { .. } => {
            let kept = l1_kept.ok_or_else(|| {
                Error::Usage("L1 compressed size needs the measured number of kept entries".into())
            })?;
            CompressedSize {
                forward: sparse_forward(kept),
                backward: 1.0,
            }
        }
    })
}
