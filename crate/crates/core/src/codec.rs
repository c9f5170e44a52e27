//! 16-bit quantization of tensors and the round-update wire format.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PRFE" | version u8 = 1 | msg_type u8 = 0 | algorithm u8 | sender u16 | round u32
//!        | n_tensors u16 | n_prototypes u16
//! tensor    := mode u8 | ndim u8 | dims u32 × ndim | [scale f32 if INT16_AFFINE] | payload
//! prototype := class u16 | count u64 | tensor
//! ```
//!
//! Payload is 2 bytes per element for the 16-bit modes and 4 for `FLOAT32`.

use half::f16;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::federation::Algorithm;
use crate::nn::Tensor;

pub const MAGIC: [u8; 4] = *b"PRFE";
pub const VERSION: u8 = 1;
pub const MSG_ROUND_UPDATE: u8 = 0;
/// magic + version + msg_type + algorithm + sender + round + n_tensors + n_prototypes
pub const MESSAGE_HEADER_LEN: usize = 4 + 1 + 1 + 1 + 2 + 4 + 2 + 2;
pub const INT16_MAX_CODE: i16 = 32767;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Per-tensor scale `Δ = max|x| / 32767`, codes `⌊x/Δ + 0.5⌋`.
    Int16Affine,
    /// IEEE binary16, round to nearest even.
    Float16,
    /// Unquantized 32-bit floats.
    Float32,
}

impl QuantMode {
    pub fn wire_tag(self) -> u8 {
        match self {
            QuantMode::Int16Affine => 0,
            QuantMode::Float16 => 1,
            QuantMode::Float32 => 2,
        }
    }

    fn from_wire(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(QuantMode::Int16Affine),
            1 => Some(QuantMode::Float16),
            2 => Some(QuantMode::Float32),
            _ => None,
        }
    }

    pub fn bytes_per_element(self) -> usize {
        match self {
            QuantMode::Int16Affine | QuantMode::Float16 => 2,
            QuantMode::Float32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Int16 { scale: f32, codes: Vec<i16> },
    Float16(Vec<f16>),
    Float32(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl QuantizedTensor {
    pub fn mode(&self) -> QuantMode {
        match self.payload {
            Payload::Int16 { .. } => QuantMode::Int16Affine,
            Payload::Float16(_) => QuantMode::Float16,
            Payload::Float32(_) => QuantMode::Float32,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn scale(&self) -> Option<f32> {
        match self.payload {
            Payload::Int16 { scale, .. } => Some(scale),
            _ => None,
        }
    }

    pub fn payload_len(&self) -> usize {
        self.numel() * self.mode().bytes_per_element()
    }

    /// Encoded size of this tensor record, header included.
    pub fn encoded_len(&self) -> usize {
        let scale = if self.mode() == QuantMode::Int16Affine { 4 } else { 0 };
        2 + 4 * self.shape.len() + scale + self.payload_len()
    }
}

fn check_finite(t: &Tensor) -> Result<()> {
    match t.values().iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Data(format!(
            "cannot quantize non-finite value {} at element {i}",
            t.values()[i]
        ))),
        None => Ok(()),
    }
}

/// `⌊x/Δ + 0.5⌋`, clamped to the symmetric 16-bit range.
fn int16_code(x: f32, scale: f32) -> i16 {
    let code = (x as f64 / scale as f64 + 0.5).floor();
    code.clamp(-(INT16_MAX_CODE as f64), INT16_MAX_CODE as f64) as i16
}

pub fn quantize(t: &Tensor, mode: QuantMode) -> Result<QuantizedTensor> {
    check_finite(t)?;
    let payload = match mode {
        QuantMode::Int16Affine => {
            let max = t.values().iter().fold(0.0f32, |m, v| m.max(v.abs()));
            if max == 0.0 {
                Payload::Int16 {
                    scale: 1.0,
                    codes: vec![0; t.numel()],
                }
            } else {
                return quantize_with_scale(t, max / INT16_MAX_CODE as f32);
            }
        }
        QuantMode::Float16 => {
            if let Some(v) = t.values().iter().find(|v| v.abs() > f16::MAX.to_f32()) {
                return Err(Error::Data(format!("value {v} exceeds the binary16 range")));
            }
            Payload::Float16(t.values().iter().map(|&v| f16::from_f32(v)).collect())
        }
        QuantMode::Float32 => Payload::Float32(t.values().to_vec()),
    };
    Ok(QuantizedTensor {
        shape: t.shape().to_vec(),
        payload,
    })
}

/// INT16_AFFINE quantization with a caller-chosen step.
pub fn quantize_with_scale(t: &Tensor, scale: f32) -> Result<QuantizedTensor> {
    check_finite(t)?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Parameter {
            name: "scale",
            reason: format!("quantization step must be positive, got {scale}"),
        });
    }
    Ok(QuantizedTensor {
        shape: t.shape().to_vec(),
        payload: Payload::Int16 {
            scale,
            codes: t.values().iter().map(|&v| int16_code(v, scale)).collect(),
        },
    })
}

/// Reconstructs 32-bit values: `code·Δ` (rounded once to `f32`) or the exact
/// widening of a binary16 value.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let values = match &q.payload {
        Payload::Int16 { scale, codes } => codes
            .iter()
            .map(|&c| (c as f64 * *scale as f64) as f32)
            .collect(),
        Payload::Float16(v) => v.iter().map(|h| h.to_f32()).collect(),
        Payload::Float32(v) => v.clone(),
    };
    Tensor::new(q.shape.clone(), values).expect("quantized tensor shape is valid")
}

#[derive(Clone, Debug, PartialEq)]
pub struct WirePrototype {
    pub class_id: usize,
    pub count: u64,
    pub vector: QuantizedTensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMessage {
    pub sender: usize,
    pub round: u32,
    pub algorithm: Algorithm,
    pub params: Vec<QuantizedTensor>,
    pub prototypes: Vec<WirePrototype>,
}

impl RoundMessage {
    pub fn encoded_len(&self) -> usize {
        MESSAGE_HEADER_LEN
            + self.params.iter().map(QuantizedTensor::encoded_len).sum::<usize>()
            + self
                .prototypes
                .iter()
                .map(|p| 2 + 8 + p.vector.encoded_len())
                .sum::<usize>()
    }

    pub fn param_payload_len(&self) -> usize {
        self.params.iter().map(QuantizedTensor::payload_len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("truncated message at byte {offset}: need {needed} more bytes, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("bad magic at byte 0: {found:02x?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {found} at byte {offset}")]
    BadVersion { offset: usize, found: u8 },
    #[error("unknown message type {found} at byte {offset}")]
    BadMessageType { offset: usize, found: u8 },
    #[error("unknown algorithm tag {found} at byte {offset}")]
    UnknownAlgorithm { offset: usize, found: u8 },
    #[error("unknown tensor mode {found} at byte {offset}")]
    UnknownMode { offset: usize, found: u8 },
    #[error("invalid tensor shape at byte {offset}: {reason}")]
    InvalidShape { offset: usize, reason: String },
    #[error("invalid value at byte {offset}: {reason}")]
    InvalidValue { offset: usize, reason: String },
    #[error("{count} trailing bytes after message end at byte {offset}")]
    TrailingBytes { offset: usize, count: usize },
    #[error("field `{field}` value {value} does not fit the wire format")]
    Oversize { field: &'static str, value: u64 },
}

fn fit<T: TryFrom<u64>>(field: &'static str, value: u64) -> Result<T, WireError> {
    T::try_from(value).map_err(|_| WireError::Oversize { field, value })
}

fn encode_tensor(out: &mut Vec<u8>, t: &QuantizedTensor) -> Result<(), WireError> {
    out.push(t.mode().wire_tag());
    out.push(fit::<u8>("ndim", t.shape.len() as u64)?);
    for &d in &t.shape {
        out.extend_from_slice(&fit::<u32>("dim", d as u64)?.to_le_bytes());
    }
    match &t.payload {
        Payload::Int16 { scale, codes } => {
            out.extend_from_slice(&scale.to_le_bytes());
            for c in codes {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        Payload::Float16(v) => {
            for h in v {
                out.extend_from_slice(&h.to_bits().to_le_bytes());
            }
        }
        Payload::Float32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(())
}

pub fn encode_message(m: &RoundMessage) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(m.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(MSG_ROUND_UPDATE);
    out.push(m.algorithm.wire_tag());
    out.extend_from_slice(&fit::<u16>("sender", m.sender as u64)?.to_le_bytes());
    out.extend_from_slice(&m.round.to_le_bytes());
    out.extend_from_slice(&fit::<u16>("n_tensors", m.params.len() as u64)?.to_le_bytes());
    out.extend_from_slice(&fit::<u16>("n_prototypes", m.prototypes.len() as u64)?.to_le_bytes());
    for t in &m.params {
        encode_tensor(&mut out, t)?;
    }
    for p in &m.prototypes {
        out.extend_from_slice(&fit::<u16>("class", p.class_id as u64)?.to_le_bytes());
        out.extend_from_slice(&p.count.to_le_bytes());
        encode_tensor(&mut out, &p.vector)?;
    }
    debug_assert_eq!(out.len(), m.encoded_len());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(WireError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn decode_tensor(r: &mut Reader<'_>) -> Result<QuantizedTensor, WireError> {
    let mode_at = r.pos;
    let mode = r.u8()?;
    let mode = QuantMode::from_wire(mode).ok_or(WireError::UnknownMode {
        offset: mode_at,
        found: mode,
    })?;
    let shape_at = r.pos;
    let ndim = r.u8()? as usize;
    if ndim == 0 {
        return Err(WireError::InvalidShape {
            offset: shape_at,
            reason: "zero dimensions".into(),
        });
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for _ in 0..ndim {
        let at = r.pos;
        let d = r.u32()? as usize;
        if d == 0 {
            return Err(WireError::InvalidShape {
                offset: at,
                reason: "zero-sized dimension".into(),
            });
        }
        numel = numel.checked_mul(d).ok_or_else(|| WireError::InvalidShape {
            offset: at,
            reason: "element count overflows".into(),
        })?;
        shape.push(d);
    }
    let scale = if mode == QuantMode::Int16Affine {
        let at = r.pos;
        let s = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if !(s > 0.0 && s.is_finite()) {
            return Err(WireError::InvalidValue {
                offset: at,
                reason: format!("quantization step {s} is not positive and finite"),
            });
        }
        Some(s)
    } else {
        None
    };
    // bound the allocation by what is actually present
    let bytes = numel
        .checked_mul(mode.bytes_per_element())
        .filter(|&b| b <= r.remaining())
        .ok_or(WireError::Truncated {
            offset: r.pos,
            needed: numel.saturating_mul(mode.bytes_per_element()),
            available: r.remaining(),
        })?;
    let start = r.pos;
    let raw = r.take(bytes)?;
    let bad = |i: usize, reason: String| WireError::InvalidValue {
        offset: start + i * mode.bytes_per_element(),
        reason,
    };
    let payload = match mode {
        QuantMode::Int16Affine => {
            let codes: Vec<i16> = raw
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]))
                .collect();
            if let Some(i) = codes.iter().position(|&c| c == i16::MIN) {
                return Err(bad(i, "code -32768 is outside the symmetric range".into()));
            }
            Payload::Int16 {
                scale: scale.unwrap(),
                codes,
            }
        }
        QuantMode::Float16 => {
            let v: Vec<f16> = raw
                .chunks_exact(2)
                .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])))
                .collect();
            if let Some(i) = v.iter().position(|h| !h.is_finite()) {
                return Err(bad(i, "non-finite binary16 value".into()));
            }
            Payload::Float16(v)
        }
        QuantMode::Float32 => {
            let v: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(bad(i, "non-finite float32 value".into()));
            }
            Payload::Float32(v)
        }
    };
    Ok(QuantizedTensor { shape, payload })
}

/// Parses one message; never returns a partial message.
pub fn decode_message(bytes: &[u8]) -> Result<RoundMessage, WireError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(WireError::BadMagic { found: magic });
    }
    let at = r.pos;
    let version = r.u8()?;
    if version != VERSION {
        return Err(WireError::BadVersion { offset: at, found: version });
    }
    let at = r.pos;
    let kind = r.u8()?;
    if kind != MSG_ROUND_UPDATE {
        return Err(WireError::BadMessageType { offset: at, found: kind });
    }
    let at = r.pos;
    let algo = r.u8()?;
    let algorithm = Algorithm::from_wire(algo).ok_or(WireError::UnknownAlgorithm {
        offset: at,
        found: algo,
    })?;
    let sender = r.u16()? as usize;
    let round = r.u32()?;
    let n_tensors = r.u16()? as usize;
    let n_protos = r.u16()? as usize;

    let mut params = Vec::with_capacity(n_tensors.min(r.remaining() / 6));
    for _ in 0..n_tensors {
        params.push(decode_tensor(&mut r)?);
    }
    let mut prototypes = Vec::with_capacity(n_protos.min(r.remaining() / 16));
    for _ in 0..n_protos {
        let class_id = r.u16()? as usize;
        let at = r.pos;
        let count = r.u64()?;
        if count == 0 {
            return Err(WireError::InvalidValue {
                offset: at,
                reason: "prototype with zero support".into(),
            });
        }
        let vec_at = r.pos;
        let vector = decode_tensor(&mut r)?;
        if vector.shape.len() != 1 {
            return Err(WireError::InvalidShape {
                offset: vec_at,
                reason: format!("prototype vector must be 1-D, got {:?}", vector.shape),
            });
        }
        prototypes.push(WirePrototype {
            class_id,
            count,
            vector,
        });
    }
    if r.remaining() != 0 {
        return Err(WireError::TrailingBytes {
            offset: r.pos,
            count: r.remaining(),
        });
    }
    Ok(RoundMessage {
        sender,
        round,
        algorithm,
        params,
        prototypes,
    })
}

/// Cumulative per-node wire traffic.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ByteLedger {
    sent: Vec<u64>,
    received: Vec<u64>,
}

impl ByteLedger {
    pub fn new(nodes: usize) -> Self {
        ByteLedger {
            sent: vec![0; nodes],
            received: vec![0; nodes],
        }
    }

    pub fn record_send(&mut self, node: usize, bytes: usize) {
        self.sent[node] += bytes as u64;
    }

    pub fn record_receive(&mut self, node: usize, bytes: usize) {
        self.received[node] += bytes as u64;
    }

    pub fn sent(&self, node: usize) -> u64 {
        self.sent[node]
    }

    pub fn received(&self, node: usize) -> u64 {
        self.received[node]
    }

    pub fn total_sent(&self) -> u64 {
        self.sent.iter().sum()
    }

    pub fn total_received(&self) -> u64 {
        self.received.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(values: Vec<f32>) -> Tensor {
        Tensor::vector(values)
    }

    #[test]
    fn int16_hand_example() {
        let q = quantize(&t(vec![-1.0, 0.0, 1.0]), QuantMode::Int16Affine).unwrap();
        assert_eq!(q.scale(), Some(1.0 / 32767.0));
        match &q.payload {
            Payload::Int16 { codes, .. } => assert_eq!(codes, &vec![-32767, 0, 32767]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn all_zero_roundtrips_exactly() {
        let z = Tensor::zeros(vec![2, 3]);
        for mode in [QuantMode::Int16Affine, QuantMode::Float16, QuantMode::Float32] {
            let q = quantize(&z, mode).unwrap();
            assert_eq!(dequantize(&q), z);
        }
        let q = quantize(&z, QuantMode::Int16Affine).unwrap();
        assert_eq!(q.scale(), Some(1.0));
    }

    #[test]
    fn non_finite_rejected() {
        for mode in [QuantMode::Int16Affine, QuantMode::Float16, QuantMode::Float32] {
            assert!(matches!(quantize(&t(vec![1.0, f32::NAN]), mode), Err(Error::Data(_))));
            assert!(quantize(&t(vec![f32::INFINITY]), mode).is_err());
        }
        assert!(quantize(&t(vec![1e6]), QuantMode::Float16).is_err());
    }

    #[test]
    fn lattice_points_roundtrip_exactly() {
        let scale = 0.25f32;
        let v = t(vec![-3.0, -0.25, 0.0, 0.5, 7.75]);
        let q = quantize_with_scale(&v, scale).unwrap();
        assert_eq!(dequantize(&q), v);
        let one = quantize(&t(vec![1.0]), QuantMode::Float16).unwrap();
        assert_eq!(dequantize(&one).values(), &[1.0]);
    }

    #[test]
    fn round_half_up() {
        let q = quantize_with_scale(&t(vec![0.5, -0.5, 1.5, -1.5]), 1.0).unwrap();
        match q.payload {
            Payload::Int16 { codes, .. } => assert_eq!(codes, vec![1, 0, 2, -1]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn requantization_is_idempotent() {
        let v = t((0..50).map(|i| ((i as f32) * 0.713).sin() * 3.0).collect());
        let q = quantize(&v, QuantMode::Int16Affine).unwrap();
        let again = quantize_with_scale(&dequantize(&q), q.scale().unwrap()).unwrap();
        assert_eq!(again, q);
    }

    fn sample_message(n_params: usize, protos: usize, mode: QuantMode) -> RoundMessage {
        let params = vec![quantize(
            &Tensor::new(vec![n_params], (0..n_params).map(|i| i as f32 * 0.1 - 0.3).collect()).unwrap(),
            mode,
        )
        .unwrap()];
        let prototypes = (0..protos)
            .map(|c| WirePrototype {
                class_id: c * 3,
                count: 10 + c as u64,
                vector: quantize(&t(vec![c as f32, 0.5, -0.25]), mode).unwrap(),
            })
            .collect();
        RoundMessage {
            sender: 7,
            round: 3,
            algorithm: Algorithm::ProFe,
            params,
            prototypes,
        }
    }

    #[test]
    fn encoded_length_by_hand() {
        let m = sample_message(10, 0, QuantMode::Float16);
        let bytes = encode_message(&m).unwrap();
        // 17 header + (mode 1 + ndim 1 + one dim 4) + 20 payload
        assert_eq!(MESSAGE_HEADER_LEN, 17);
        assert_eq!(bytes.len(), 17 + 6 + 20);

        let m = sample_message(10, 0, QuantMode::Int16Affine);
        assert_eq!(encode_message(&m).unwrap().len(), 17 + 6 + 4 + 20);

        let m = sample_message(10, 2, QuantMode::Float32);
        let proto_len = 2 + 8 + 6 + 12;
        assert_eq!(encode_message(&m).unwrap().len(), 17 + 6 + 40 + 2 * proto_len);
    }

    #[test]
    fn header_layout() {
        let m = sample_message(4, 1, QuantMode::Float16);
        let b = encode_message(&m).unwrap();
        assert_eq!(&b[0..4], b"PRFE");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 0);
        assert_eq!(b[6], 0);
        assert_eq!(u16::from_le_bytes([b[7], b[8]]), 7);
        assert_eq!(u32::from_le_bytes([b[9], b[10], b[11], b[12]]), 3);
        assert_eq!(u16::from_le_bytes([b[13], b[14]]), 1);
        assert_eq!(u16::from_le_bytes([b[15], b[16]]), 1);
        assert_eq!(b[17], QuantMode::Float16.wire_tag());
    }

    #[test]
    fn roundtrip_and_determinism() {
        for mode in [QuantMode::Int16Affine, QuantMode::Float16, QuantMode::Float32] {
            let m = sample_message(33, 3, mode);
            let a = encode_message(&m).unwrap();
            assert_eq!(a, encode_message(&m).unwrap());
            assert_eq!(decode_message(&a).unwrap(), m);
        }
    }

    #[test]
    fn decode_failures_are_distinct() {
        let good = encode_message(&sample_message(8, 1, QuantMode::Int16Affine)).unwrap();
        for cut in [0, 3, 10, 17, 20, good.len() - 1] {
            assert!(
                matches!(decode_message(&good[..cut]), Err(WireError::Truncated { .. })),
                "cut {cut}"
            );
        }
        let mut bad = good.clone();
        bad[0] ^= 0xff;
        assert!(matches!(decode_message(&bad), Err(WireError::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 9;
        assert_eq!(
            decode_message(&bad),
            Err(WireError::BadVersion { offset: 4, found: 9 })
        );
        let mut bad = good.clone();
        bad[6] = 42;
        assert!(matches!(decode_message(&bad), Err(WireError::UnknownAlgorithm { offset: 6, .. })));
        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(decode_message(&bad), Err(WireError::TrailingBytes { .. })));
    }

    #[test]
    fn oversize_fields_rejected_on_encode() {
        let mut m = sample_message(2, 1, QuantMode::Float16);
        m.sender = 70_000;
        assert!(matches!(encode_message(&m), Err(WireError::Oversize { field: "sender", .. })));
        let mut m = sample_message(2, 1, QuantMode::Float16);
        m.prototypes[0].class_id = 1 << 20;
        assert!(matches!(encode_message(&m), Err(WireError::Oversize { field: "class", .. })));
    }

    #[test]
    fn ledger_totals() {
        let mut l = ByteLedger::new(3);
        l.record_send(0, 10);
        l.record_receive(1, 10);
        l.record_send(2, 5);
        l.record_receive(0, 5);
        assert_eq!(l.total_sent(), l.total_received());
        assert_eq!(l.sent(0), 10);
        assert_eq!(l.received(0), 5);
    }
}
