//! Bit-exact frame layout. All integers are little-endian.
//!
//! ```text
//! "SPLW" | version u8 | variant u8 | batch_id u64 | body
//! tensor  = dtype u8 | ndim u8 | dims u32 * ndim | scalars
//! labels  = count u32 | u16 * count
//! control = code u8
//! handoff = len u64 | tensors (bottom) | len u64 | tensors (aux)
//! ```

use thiserror::Error;

use crate::tensor::{DType, Tensor};

pub const MAGIC: [u8; 4] = *b"SPLW";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Variant {
    Activation = 0,
    Gradient = 1,
    Handoff = 2,
    Control = 3,
}

impl Variant {
    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Variant::Activation,
            1 => Variant::Gradient,
            2 => Variant::Handoff,
            3 => Variant::Control,
            _ => return None,
        })
    }
}

/// Control codes. `Hello` carries the sender's architecture hash in the
/// batch-id slot, `Reject` the receiver's, and `EvalResult` the number of
/// correctly classified test samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ControlCode {
    StartEpoch = 0,
    EndEpoch = 1,
    Shutdown = 2,
    Ack = 3,
    Hello = 4,
    Reject = 5,
    EvalBegin = 6,
    EvalEnd = 7,
    EvalResult = 8,
}

impl ControlCode {
    pub fn from_code(code: u8) -> Option<Self> {
        use ControlCode::*;
        Some(match code {
            0 => StartEpoch,
            1 => EndEpoch,
            2 => Shutdown,
            3 => Ack,
            4 => Hello,
            5 => Reject,
            6 => EvalBegin,
            7 => EvalEnd,
            8 => EvalResult,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Activation { batch_id: u64, z: Tensor, labels: Vec<u16> },
    Gradient { batch_id: u64, dz: Tensor },
    /// Client parameters passed to the next client in the relay. `batch_id`
    /// carries the relay's batch counter so ids keep increasing.
    Handoff { batch_id: u64, bottom: Vec<Tensor>, aux: Vec<Tensor> },
    Control { batch_id: u64, code: ControlCode },
}

impl Message {
    pub fn control(code: ControlCode, batch_id: u64) -> Self {
        Message::Control { batch_id, code }
    }

    pub fn variant(&self) -> Variant {
        match self {
            Message::Activation { .. } => Variant::Activation,
            Message::Gradient { .. } => Variant::Gradient,
            Message::Handoff { .. } => Variant::Handoff,
            Message::Control { .. } => Variant::Control,
        }
    }

    pub fn batch_id(&self) -> u64 {
        match self {
            Message::Activation { batch_id, .. }
            | Message::Gradient { batch_id, .. }
            | Message::Handoff { batch_id, .. }
            | Message::Control { batch_id, .. } => *batch_id,
        }
    }

    /// Short human-readable name for errors and logs.
    pub fn describe(&self) -> String {
        match self {
            Message::Activation { batch_id, .. } => format!("ActivationBatch#{batch_id}"),
            Message::Gradient { batch_id, .. } => format!("GradientBatch#{batch_id}"),
            Message::Handoff { .. } => "ClientModelHandoff".into(),
            Message::Control { code, .. } => format!("Control::{code:?}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported protocol version {found} at offset {offset} (expected {VERSION})")]
    Version { offset: usize, found: u8 },
    #[error("unknown variant tag {found} at offset {offset}")]
    Variant { offset: usize, found: u8 },
    #[error("unknown dtype code {found} at offset {offset}")]
    DType { offset: usize, found: u8 },
    #[error("unknown control code {found} at offset {offset}")]
    Control { offset: usize, found: u8 },
    #[error("truncated frame at offset {offset}: need {needed} more bytes, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("{extra} trailing bytes after message at offset {offset}")]
    Trailing { offset: usize, extra: usize },
    #[error("invalid field at offset {offset}: {detail}")]
    Invalid { offset: usize, detail: String },
}

impl DecodeError {
    pub fn offset(&self) -> usize {
        match self {
            DecodeError::BadMagic { offset }
            | DecodeError::Version { offset, .. }
            | DecodeError::Variant { offset, .. }
            | DecodeError::DType { offset, .. }
            | DecodeError::Control { offset, .. }
            | DecodeError::Truncated { offset, .. }
            | DecodeError::Trailing { offset, .. }
            | DecodeError::Invalid { offset, .. } => *offset,
        }
    }
}

/// Byte composition of one encoded frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FrameStats {
    pub frame_bytes: u64,
    /// Raw tensor scalars only (no dtype/dims prefix).
    pub tensor_bytes: u64,
    /// The whole label section, count prefix included.
    pub label_bytes: u64,
}

pub fn tensor_encoded_len(t: &Tensor) -> usize {
    2 + 4 * t.dims().len() + t.byte_len()
}

pub fn frame_stats(msg: &Message) -> FrameStats {
    let (body, tensor, labels) = match msg {
        Message::Activation { z, labels, .. } => {
            let l = 4 + 2 * labels.len();
            (tensor_encoded_len(z) + l, z.byte_len(), l)
        }
        Message::Gradient { dz, .. } => (tensor_encoded_len(dz), dz.byte_len(), 0),
        Message::Handoff { bottom, aux, .. } => {
            let enc: usize = bottom.iter().chain(aux).map(tensor_encoded_len).sum();
            let raw: usize = bottom.iter().chain(aux).map(Tensor::byte_len).sum();
            (16 + enc, raw, 0)
        }
        Message::Control { .. } => (1, 0, 0),
    };
    FrameStats {
        frame_bytes: (HEADER_LEN + body) as u64,
        tensor_bytes: tensor as u64,
        label_bytes: labels as u64,
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.push(t.dtype().code());
    out.push(t.dims().len() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    t.write_le(out);
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut out = Vec::with_capacity(frame_stats(msg).frame_bytes as usize);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.variant() as u8);
    out.extend_from_slice(&msg.batch_id().to_le_bytes());
    match msg {
        Message::Activation { z, labels, .. } => {
            put_tensor(&mut out, z);
            out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
            for l in labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        Message::Gradient { dz, .. } => put_tensor(&mut out, dz),
        Message::Handoff { bottom, aux, .. } => {
            for section in [bottom, aux] {
                let len: usize = section.iter().map(tensor_encoded_len).sum();
                out.extend_from_slice(&(len as u64).to_le_bytes());
                for t in section {
                    put_tensor(&mut out, t);
                }
            }
        }
        Message::Control { code, .. } => out.push(*code as u8),
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(DecodeError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor, DecodeError> {
        let at = self.pos;
        let code = self.u8()?;
        let dtype = DType::from_code(code).ok_or(DecodeError::DType { offset: at, found: code })?;
        let ndim_at = self.pos;
        let ndim = self.u8()? as usize;
        if ndim == 0 {
            return Err(DecodeError::Invalid {
                offset: ndim_at,
                detail: "tensor with zero dims".into(),
            });
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut count: usize = 1;
        for _ in 0..ndim {
            let dim_at = self.pos;
            let d = self.u32()? as usize;
            count = count.checked_mul(d).filter(|_| d > 0).ok_or_else(|| DecodeError::Invalid {
                offset: dim_at,
                detail: format!("extent {d} is zero or overflows"),
            })?;
            dims.push(d);
        }
        let payload_at = self.pos;
        let len = count.checked_mul(dtype.size_of()).ok_or_else(|| DecodeError::Invalid {
            offset: payload_at,
            detail: "payload length overflows".into(),
        })?;
        // length is checked by `take` before anything is allocated
        let raw = self.take(len)?;
        Tensor::read_le(&dims, dtype, raw).map_err(|e| DecodeError::Invalid {
            offset: payload_at,
            detail: e.to_string(),
        })
    }

    fn section(&mut self) -> Result<Vec<Tensor>, DecodeError> {
        let at = self.pos;
        let len = self.u64()?;
        let available = (self.bytes.len() - self.pos) as u64;
        if len > available {
            return Err(DecodeError::Truncated {
                offset: self.pos,
                needed: len as usize,
                available: available as usize,
            });
        }
        let end = self.pos + len as usize;
        let mut out = Vec::new();
        while self.pos < end {
            let before = self.pos;
            let t = self.tensor()?;
            if self.pos > end {
                return Err(DecodeError::Invalid {
                    offset: before,
                    detail: format!("tensor overruns section declared at offset {at}"),
                });
            }
            out.push(t);
        }
        Ok(out)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Message, DecodeError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(DecodeError::BadMagic { offset: 0 });
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(DecodeError::Version { offset: 4, found: version });
    }
    let tag = r.u8()?;
    let variant = Variant::from_code(tag).ok_or(DecodeError::Variant { offset: 5, found: tag })?;
    let batch_id = r.u64()?;
    let msg = match variant {
        Variant::Activation => {
            let z = r.tensor()?;
            let count_at = r.pos;
            let count = r.u32()? as usize;
            let batch = z.dims()[0];
            if count != batch {
                return Err(DecodeError::Invalid {
                    offset: count_at,
                    detail: format!("{count} labels for a batch of {batch}"),
                });
            }
            // bounds-check the whole label block before allocating
            let available = bytes.len() - r.pos;
            if count.saturating_mul(2) > available {
                return Err(DecodeError::Truncated {
                    offset: r.pos,
                    needed: count * 2,
                    available,
                });
            }
            let labels = (0..count).map(|_| r.u16()).collect::<Result<_, _>>()?;
            Message::Activation { batch_id, z, labels }
        }
        Variant::Gradient => Message::Gradient {
            batch_id,
            dz: r.tensor()?,
        },
        Variant::Handoff => {
            let bottom = r.section()?;
            let aux = r.section()?;
            Message::Handoff { batch_id, bottom, aux }
        }
        Variant::Control => {
            let at = r.pos;
            let c = r.u8()?;
            let code = ControlCode::from_code(c).ok_or(DecodeError::Control { offset: at, found: c })?;
            Message::Control { batch_id, code }
        }
    };
    if r.pos != bytes.len() {
        return Err(DecodeError::Trailing {
            offset: r.pos,
            extra: bytes.len() - r.pos,
        });
    }
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn activation() -> Message {
        Message::Activation {
            batch_id: 7,
            z: Tensor::from_f32(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 1e-3, 9.0]).unwrap(),
            labels: vec![1, 0],
        }
    }

    #[test]
    fn activation_frame_layout() {
        let bytes = encode(&activation());
        // 14 header + (1 + 1 + 2*4 + 24) tensor + (4 + 2*2) labels
        assert_eq!(bytes.len(), 56);
        assert_eq!(&bytes[..4], b"SPLW");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 0);
        assert_eq!(&bytes[6..14], &7u64.to_le_bytes());
        assert_eq!(bytes[14], 0);
        assert_eq!(bytes[15], 2);
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &3u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[48..52], &2u32.to_le_bytes());
        assert_eq!(&bytes[52..], &[1, 0, 0, 0]);
        let s = frame_stats(&activation());
        assert_eq!((s.frame_bytes, s.tensor_bytes, s.label_bytes), (56, 24, 8));
    }

    #[test]
    fn round_trips() {
        let msgs = [
            activation(),
            Message::Gradient {
                batch_id: 3,
                dz: Tensor::from_f64(&[1, 2, 1, 1], &[0.25, -0.5]).unwrap(),
            },
            Message::Handoff {
                batch_id: 40,
                bottom: vec![Tensor::from_f32(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap(), Tensor::from_f32(&[2], &[0.0, 1.0]).unwrap()],
                aux: vec![Tensor::from_f32(&[1], &[5.0]).unwrap()],
            },
            Message::control(ControlCode::Ack, 0),
            Message::control(ControlCode::Hello, u64::MAX),
        ];
        for m in msgs {
            let bytes = encode(&m);
            assert_eq!(bytes.len() as u64, frame_stats(&m).frame_bytes);
            assert_eq!(decode(&bytes).unwrap(), m);
        }
    }

    #[test]
    fn control_frame_is_fifteen_bytes() {
        assert_eq!(encode(&Message::control(ControlCode::Shutdown, 0)).len(), 15);
    }

    #[test]
    fn errors_carry_offsets() {
        let good = encode(&activation());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(decode(&bad), Err(DecodeError::BadMagic { offset: 0 }));
        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(decode(&bad), Err(DecodeError::Version { offset: 4, found: 2 }));
        let mut bad = good.clone();
        bad[5] = 9;
        assert_eq!(decode(&bad), Err(DecodeError::Variant { offset: 5, found: 9 }));
        let err = decode(&good[..40]).unwrap_err();
        assert!(matches!(err, DecodeError::Truncated { offset: 24, .. }), "{err:?}");
        let mut long = good.clone();
        long.push(0);
        assert_eq!(decode(&long), Err(DecodeError::Trailing { offset: 56, extra: 1 }));
    }

    #[test]
    fn huge_declared_dims_do_not_allocate() {
        let mut bytes = encode(&Message::Gradient {
            batch_id: 0,
            dz: Tensor::from_f32(&[1], &[1.0]).unwrap(),
        });
        bytes[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(DecodeError::Truncated { .. })));
    }
}
