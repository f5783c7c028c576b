//! Byte layout of the messages exchanged between the two parties.
//!
//! Every message is a 15-byte header followed by `payload_len` payload bytes.
//! All multi-byte integers and floats are big-endian; bit-packed fields are
//! written MSB-first and each instance record is padded to a whole byte.
//! See `docs/wire-format.md` for the full layout with hex examples.

use crate::codec::{
    index_bits, Codec, CodecConfig, ForwardPayload, QuantPayload, SparsePayload,
};
use crate::error::{DecodeError, Error, Result};

pub const MAGIC: [u8; 2] = [0x53, 0x4C];
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Handshake = 0,
    Forward = 1,
    Backward = 2,
}

impl TryFrom<u8> for MessageType {
    type Error = DecodeError;

    fn try_from(v: u8) -> std::result::Result<Self, DecodeError> {
        match v {
            0 => Ok(MessageType::Handshake),
            1 => Ok(MessageType::Forward),
            2 => Ok(MessageType::Backward),
            other => Err(DecodeError::UnknownMessageType(other)),
        }
    }
}

const MAX_CODEC_ID: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageHeader {
    pub msg_type: MessageType,
    pub codec_id: u8,
    pub batch_size: u16,
    pub cut_dim: u32,
    pub payload_len: u32,
}

impl MessageHeader {
    pub fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.msg_type as u8);
        out.push(self.codec_id);
        out.extend_from_slice(&self.batch_size.to_be_bytes());
        out.extend_from_slice(&self.cut_dim.to_be_bytes());
        out.extend_from_slice(&self.payload_len.to_be_bytes());
    }

    /// Parses the first [`HEADER_LEN`] bytes of `bytes`.
    pub fn parse(bytes: &[u8]) -> std::result::Result<Self, DecodeError> {
        if bytes.len() < HEADER_LEN {
            return Err(DecodeError::Truncated {
                needed: HEADER_LEN,
                available: bytes.len(),
            });
        }
        let magic = u16::from_be_bytes([bytes[0], bytes[1]]);
        if bytes[..2] != MAGIC {
            return Err(DecodeError::BadMagic(magic));
        }
        if bytes[2] != VERSION {
            return Err(DecodeError::VersionMismatch(bytes[2]));
        }
        let msg_type = MessageType::try_from(bytes[3])?;
        let codec_id = bytes[4];
        if codec_id > MAX_CODEC_ID {
            return Err(DecodeError::UnknownCodec(codec_id));
        }
        Ok(Self {
            msg_type,
            codec_id,
            batch_size: u16::from_be_bytes([bytes[5], bytes[6]]),
            cut_dim: u32::from_be_bytes([bytes[7], bytes[8], bytes[9], bytes[10]]),
            payload_len: u32::from_be_bytes([bytes[11], bytes[12], bytes[13], bytes[14]]),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub header: MessageHeader,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn new(
        msg_type: MessageType,
        codec_id: u8,
        batch_size: usize,
        cut_dim: usize,
        payload: Vec<u8>,
    ) -> Result<Self> {
        let batch_size = u16::try_from(batch_size)
            .map_err(|_| Error::Encoding(format!("batch size {batch_size} exceeds 65535")))?;
        let cut_dim = u32::try_from(cut_dim)
            .map_err(|_| Error::Encoding(format!("cut dimension {cut_dim} exceeds u32")))?;
        let payload_len = u32::try_from(payload.len())
            .map_err(|_| Error::Encoding("payload exceeds 4 GiB".into()))?;
        Ok(Self {
            header: MessageHeader {
                msg_type,
                codec_id,
                batch_size,
                cut_dim,
                payload_len,
            },
            payload,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        self.header.write(&mut out);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, DecodeError> {
        let header = MessageHeader::parse(bytes)?;
        let declared = header.payload_len as usize;
        let actual = bytes.len() - HEADER_LEN;
        if actual < declared {
            return Err(DecodeError::Truncated {
                needed: HEADER_LEN + declared,
                available: bytes.len(),
            });
        }
        if actual > declared {
            return Err(DecodeError::LengthMismatch { declared, actual });
        }
        Ok(Self {
            header,
            payload: bytes[HEADER_LEN..].to_vec(),
        })
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

/// MSB-first bit packer.
#[derive(Debug, Default)]
struct BitWriter {
    bytes: Vec<u8>,
    used: u32,
}

impl BitWriter {
    fn push(&mut self, value: u64, width: u32) {
        for shift in (0..width).rev() {
            if self.used % 8 == 0 {
                self.bytes.push(0);
            }
            let bit = ((value >> shift) & 1) as u8;
            let last = self.bytes.len() - 1;
            self.bytes[last] |= bit << (7 - self.used % 8);
            self.used += 1;
        }
    }

    fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn read(&mut self, width: u32) -> u64 {
        let mut v = 0u64;
        for _ in 0..width {
            let bit = (self.bytes[self.pos / 8] >> (7 - self.pos % 8)) & 1;
            v = (v << 1) | bit as u64;
            self.pos += 1;
        }
        v
    }
}

fn packed_len(count: usize, width: u32) -> usize {
    (count * width as usize).div_ceil(8)
}

/// Packs strictly increasing indices below `d` into `ceil(log2 d)`-bit fields.
pub fn pack_indices(indices: &[usize], d: usize) -> Result<Vec<u8>> {
    if indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Encoding("indices must be strictly increasing".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= d) {
        return Err(Error::Encoding(format!("index {bad} >= d = {d}")));
    }
    let r = index_bits(d);
    let mut w = BitWriter::default();
    for &i in indices {
        w.push(i as u64, r);
    }
    Ok(w.finish())
}

pub fn unpack_indices(bytes: &[u8], k: usize, d: usize) -> std::result::Result<Vec<usize>, DecodeError> {
    let r = index_bits(d);
    let needed = packed_len(k, r);
    if bytes.len() != needed {
        return Err(DecodeError::Malformed(format!(
            "{k} indices need {needed} bytes, got {}",
            bytes.len()
        )));
    }
    let mut reader = BitReader::new(bytes);
    let indices: Vec<usize> = (0..k).map(|_| reader.read(r) as usize).collect();
    if let Some(&bad) = indices.iter().find(|&&i| i >= d) {
        return Err(DecodeError::Malformed(format!("index {bad} >= d = {d}")));
    }
    Ok(indices)
}

/// Packs `bits`-bit codes MSB-first.
pub fn pack_codes(codes: &[u32], bits: u32) -> Result<Vec<u8>> {
    if bits == 0 || bits > 32 {
        return Err(Error::Encoding(format!("code width {bits} not in 1..=32")));
    }
    let limit = 1u64 << bits;
    let mut w = BitWriter::default();
    for &c in codes {
        if c as u64 >= limit {
            return Err(Error::Encoding(format!("code {c} does not fit in {bits} bits")));
        }
        w.push(c as u64, bits);
    }
    Ok(w.finish())
}

pub fn unpack_codes(bytes: &[u8], count: usize, bits: u32) -> std::result::Result<Vec<u32>, DecodeError> {
    if bits == 0 || bits > 32 {
        return Err(DecodeError::Malformed(format!("code width {bits} not in 1..=32")));
    }
    let needed = packed_len(count, bits);
    if bytes.len() != needed {
        return Err(DecodeError::Malformed(format!(
            "{count} codes need {needed} bytes, got {}",
            bytes.len()
        )));
    }
    let mut reader = BitReader::new(bytes);
    Ok((0..count).map(|_| reader.read(bits) as u32).collect())
}

/// Writes values as big-endian IEEE-754 of `value_bits` (32 or 64) bits.
pub fn pack_values(values: &[f64], value_bits: u32, out: &mut Vec<u8>) {
    for &v in values {
        if value_bits == 32 {
            out.extend_from_slice(&(v as f32).to_be_bytes());
        } else {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
}

pub fn unpack_values(
    bytes: &[u8],
    count: usize,
    value_bits: u32,
) -> std::result::Result<Vec<f64>, DecodeError> {
    let width = value_bits as usize / 8;
    if bytes.len() != count * width {
        return Err(DecodeError::Malformed(format!(
            "{count} values need {} bytes, got {}",
            count * width,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(width)
        .map(|c| {
            if width == 4 {
                f32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64
            } else {
                f64::from_be_bytes(c.try_into().expect("8-byte chunk"))
            }
        })
        .collect())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            DecodeError::Malformed(format!(
                "record needs {n} more bytes at offset {}, payload has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, DecodeError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> std::result::Result<f64, DecodeError> {
        let b = self.take(8)?;
        Ok(f64::from_be_bytes(b.try_into().expect("8 bytes")))
    }

    fn finish(&self) -> std::result::Result<(), DecodeError> {
        if self.pos != self.bytes.len() {
            return Err(DecodeError::LengthMismatch {
                declared: self.bytes.len(),
                actual: self.pos,
            });
        }
        Ok(())
    }
}

/// Byte length of one forward record. `kept` is the number of transmitted
/// entries for L1 and ignored otherwise.
pub fn forward_record_len(config: &CodecConfig, d: usize, kept: usize) -> usize {
    let vb = config.value_bits as usize / 8;
    let r = index_bits(d);
    match config.codec {
        Codec::None => d * vb,
        Codec::SizeReduction { k } => k * vb,
        Codec::Quantization { bits } => 2 * vb + packed_len(d, bits),
        Codec::TopK { k } | Codec::RandTopK { k, .. } => k * vb + packed_len(k, r),
        Codec::L1 { .. } => 4 + kept * vb + packed_len(kept, r),
    }
}

/// Byte length of one backward record.
pub fn backward_record_len(config: &CodecConfig, d: usize) -> usize {
    config.codec.kept().unwrap_or(d) * (config.value_bits as usize / 8)
}

fn check_header(config: &CodecConfig, d: usize, msg: &WireMessage, want: MessageType) -> Result<()> {
    let h = &msg.header;
    if h.msg_type != want {
        return Err(Error::ProtocolState(format!(
            "expected {want:?} message, got {:?}",
            h.msg_type
        )));
    }
    if h.codec_id != config.codec.id() {
        return Err(DecodeError::Malformed(format!(
            "codec id {} does not match negotiated {}",
            h.codec_id,
            config.codec.id()
        ))
        .into());
    }
    if h.cut_dim as usize != d {
        return Err(DecodeError::Malformed(format!(
            "cut dimension {} does not match negotiated {d}",
            h.cut_dim
        ))
        .into());
    }
    if h.payload_len as usize != msg.payload.len() {
        return Err(DecodeError::LengthMismatch {
            declared: h.payload_len as usize,
            actual: msg.payload.len(),
        }
        .into());
    }
    Ok(())
}

/// Serializes a batch of compressed activations, records in batch order.
pub fn encode_forward(config: &CodecConfig, d: usize, records: &[ForwardPayload]) -> Result<WireMessage> {
    config.validate(d)?;
    let vb = config.value_bits;
    let mut out = Vec::new();
    for rec in records {
        match (&config.codec, rec) {
            (Codec::None, ForwardPayload::Dense(v)) if v.len() == d => pack_values(v, vb, &mut out),
            (Codec::SizeReduction { k }, ForwardPayload::Truncated(v)) if v.len() == *k => {
                pack_values(v, vb, &mut out)
            }
            (Codec::Quantization { bits }, ForwardPayload::Quantized(q))
                if q.codes.len() == d && q.bits == *bits =>
            {
                pack_values(&[q.o_min, q.o_max], vb, &mut out);
                out.extend(pack_codes(&q.codes, *bits)?);
            }
            (Codec::TopK { k } | Codec::RandTopK { k, .. }, ForwardPayload::Sparse(s))
                if s.len() == *k =>
            {
                pack_values(s.values(), vb, &mut out);
                out.extend(pack_indices(s.indices(), d)?);
            }
            (Codec::L1 { .. }, ForwardPayload::Sparse(s)) => {
                out.extend_from_slice(&(s.len() as u32).to_be_bytes());
                pack_values(s.values(), vb, &mut out);
                out.extend(pack_indices(s.indices(), d)?);
            }
            _ => {
                return Err(Error::Encoding(format!(
                    "record does not match codec {}",
                    config.codec.name()
                )))
            }
        }
    }
    WireMessage::new(MessageType::Forward, config.codec.id(), records.len(), d, out)
}

pub fn decode_forward(config: &CodecConfig, d: usize, msg: &WireMessage) -> Result<Vec<ForwardPayload>> {
    config.validate(d)?;
    check_header(config, d, msg, MessageType::Forward)?;
    let vb = config.value_bits;
    let width = vb as usize / 8;
    let r = index_bits(d);
    let mut cur = Cursor {
        bytes: &msg.payload,
        pos: 0,
    };
    let mut records = Vec::with_capacity(msg.header.batch_size as usize);
    for _ in 0..msg.header.batch_size {
        let rec = match config.codec {
            Codec::None => ForwardPayload::Dense(unpack_values(cur.take(d * width)?, d, vb)?),
            Codec::SizeReduction { k } => {
                ForwardPayload::Truncated(unpack_values(cur.take(k * width)?, k, vb)?)
            }
            Codec::Quantization { bits } => {
                let range = unpack_values(cur.take(2 * width)?, 2, vb)?;
                let codes = unpack_codes(cur.take(packed_len(d, bits))?, d, bits)?;
                if !(range[0] <= range[1]) {
                    return Err(DecodeError::Malformed("quantization range inverted".into()).into());
                }
                ForwardPayload::Quantized(QuantPayload {
                    codes,
                    o_min: range[0],
                    o_max: range[1],
                    bits,
                })
            }
            Codec::TopK { k } | Codec::RandTopK { k, .. } => {
                let values = unpack_values(cur.take(k * width)?, k, vb)?;
                let indices = unpack_indices(cur.take(packed_len(k, r))?, k, d)?;
                ForwardPayload::Sparse(SparsePayload::new(indices, values, d)?)
            }
            Codec::L1 { .. } => {
                let kept = cur.u32()? as usize;
                if kept > d {
                    return Err(DecodeError::Malformed(format!("{kept} kept entries > d = {d}")).into());
                }
                let values = unpack_values(cur.take(kept * width)?, kept, vb)?;
                let indices = unpack_indices(cur.take(packed_len(kept, r))?, kept, d)?;
                ForwardPayload::Sparse(SparsePayload::new(indices, values, d)?)
            }
        };
        records.push(rec);
    }
    cur.finish()?;
    Ok(records)
}

/// Serializes per-instance gradient values (already gathered by
/// [`crate::codec::compress_backward`]).
pub fn encode_backward(config: &CodecConfig, d: usize, records: &[Vec<f64>]) -> Result<WireMessage> {
    config.validate(d)?;
    let count = config.codec.kept().unwrap_or(d);
    let mut out = Vec::with_capacity(records.len() * backward_record_len(config, d));
    for rec in records {
        if rec.len() != count {
            return Err(Error::Encoding(format!(
                "backward record has {} values, expected {count}",
                rec.len()
            )));
        }
        pack_values(rec, config.value_bits, &mut out);
    }
    WireMessage::new(MessageType::Backward, config.codec.id(), records.len(), d, out)
}

pub fn decode_backward(config: &CodecConfig, d: usize, msg: &WireMessage) -> Result<Vec<Vec<f64>>> {
    config.validate(d)?;
    check_header(config, d, msg, MessageType::Backward)?;
    let count = config.codec.kept().unwrap_or(d);
    let width = config.value_bits as usize / 8;
    let mut cur = Cursor {
        bytes: &msg.payload,
        pos: 0,
    };
    let records = (0..msg.header.batch_size)
        .map(|_| Ok(unpack_values(cur.take(count * width)?, count, config.value_bits)?))
        .collect::<Result<Vec<_>>>()?;
    cur.finish()?;
    Ok(records)
}

/// Handshake: value bit width, then the codec parameters.
pub fn encode_handshake(config: &CodecConfig, d: usize) -> Result<WireMessage> {
    config.validate(d)?;
    let mut out = vec![config.value_bits as u8];
    match config.codec {
        Codec::None => {}
        Codec::SizeReduction { k } | Codec::TopK { k } => out.extend_from_slice(&(k as u32).to_be_bytes()),
        Codec::Quantization { bits } => out.push(bits as u8),
        Codec::RandTopK { k, alpha } => {
            out.extend_from_slice(&(k as u32).to_be_bytes());
            out.extend_from_slice(&alpha.to_be_bytes());
        }
        Codec::L1 {
            lambda,
            zero_epsilon,
        } => {
            out.extend_from_slice(&lambda.to_be_bytes());
            out.extend_from_slice(&zero_epsilon.to_be_bytes());
        }
    }
    WireMessage::new(MessageType::Handshake, config.codec.id(), 0, d, out)
}

pub fn decode_handshake(msg: &WireMessage) -> Result<(CodecConfig, usize)> {
    if msg.header.msg_type != MessageType::Handshake {
        return Err(Error::ProtocolState(format!(
            "expected handshake, got {:?}",
            msg.header.msg_type
        )));
    }
    let mut cur = Cursor {
        bytes: &msg.payload,
        pos: 0,
    };
    let value_bits = cur.take(1)?[0] as u32;
    let codec = match msg.header.codec_id {
        0 => Codec::None,
        1 => Codec::SizeReduction {
            k: cur.u32()? as usize,
        },
        2 => Codec::Quantization {
            bits: cur.take(1)?[0] as u32,
        },
        3 => Codec::TopK {
            k: cur.u32()? as usize,
        },
        4 => Codec::RandTopK {
            k: cur.u32()? as usize,
            alpha: cur.f64()?,
        },
        5 => Codec::L1 {
            lambda: cur.f64()?,
            zero_epsilon: cur.f64()?,
        },
        other => return Err(DecodeError::UnknownCodec(other).into()),
    };
    cur.finish()?;
    let config = CodecConfig { codec, value_bits };
    let d = msg.header.cut_dim as usize;
    config
        .validate(d)
        .map_err(|e| DecodeError::Malformed(format!("invalid handshake parameters: {e}")))?;
    Ok((config, d))
}
