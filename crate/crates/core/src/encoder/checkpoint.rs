//! Binary model checkpoint.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "ADSEAL01"
//! u32 d_model, d_k, layers, max_len, vocab_size, flags, ffn_mult, d_user
//! f64 matrices, row-major, in this order:
//!   token table (vocab_size × d_model), position table (max_len × d_model),
//!   per layer: w_q, w_k, w_v (d_model × d_k), ln1 scale, ln1 shift,
//!              ln2 scale, ln2 shift (1 × d_model), ffn_w1 (d_model × ffn),
//!              ffn_w2 (ffn × d_model),
//!   head weights ((d_model + d_user) × 1), head bias (1 × 1)
//! ```
//!
//! Flags: bit 0 scaled attention, bit 1 minimal blocks, bit 2 ad-only head.

use std::io::{Read, Write};

use super::{EncoderConfig, EncoderError};
use crate::numerics::{Matrix, Scalar};

pub const MAGIC: &[u8; 8] = b"ADSEAL01";

const FLAG_SCALED: u32 = 1;
const FLAG_MINIMAL: u32 = 1 << 1;
const FLAG_AD_ONLY: u32 = 1 << 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
    pub d_user: usize,
    pub ad_only: bool,
}

impl CheckpointHeader {
    /// Shapes of the stored matrices, in file order.
    pub fn layout(&self) -> Vec<(usize, usize)> {
        let c = &self.encoder;
        let (d, ffn) = (c.d_model, c.ffn_width());
        let mut shapes = vec![(self.vocab_size, d), (c.max_len, d)];
        for _ in 0..c.layers {
            shapes.extend([(d, c.d_k), (d, c.d_k), (d, c.d_k), (1, d), (1, d), (1, d), (1, d), (d, ffn), (ffn, d)]);
        }
        shapes.extend([(d + self.d_user, 1), (1, 1)]);
        shapes
    }

    fn flags(&self) -> u32 {
        let mut f = 0;
        if self.encoder.scaled {
            f |= FLAG_SCALED;
        }
        if self.encoder.minimal {
            f |= FLAG_MINIMAL;
        }
        if self.ad_only {
            f |= FLAG_AD_ONLY;
        }
        f
    }
}

fn bad(msg: impl Into<String>) -> EncoderError {
    EncoderError::Checkpoint(msg.into())
}

fn to_u32(v: usize) -> Result<u32, EncoderError> {
    u32::try_from(v).map_err(|_| bad(format!("{v} does not fit in 32 bits")))
}

pub fn write_checkpoint<T: Scalar, W: Write>(
    mut out: W,
    header: &CheckpointHeader,
    params: &[&Matrix<T>],
) -> Result<(), EncoderError> {
    let layout = header.layout();
    if layout.len() != params.len() {
        return Err(bad(format!("expected {} matrices, got {}", layout.len(), params.len())));
    }
    for (i, (shape, m)) in layout.iter().zip(params).enumerate() {
        if m.shape() != *shape {
            return Err(bad(format!("matrix {i} has shape {:?}, layout wants {shape:?}", m.shape())));
        }
    }
    let c = &header.encoder;
    let mut buf = Vec::with_capacity(8 + 32 + 8 * layout.iter().map(|(r, c)| r * c).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    for v in [c.d_model, c.d_k, c.layers, c.max_len, header.vocab_size] {
        buf.extend_from_slice(&to_u32(v)?.to_le_bytes());
    }
    buf.extend_from_slice(&header.flags().to_le_bytes());
    for v in [c.ffn_mult, header.d_user] {
        buf.extend_from_slice(&to_u32(v)?.to_le_bytes());
    }
    for m in params {
        for x in m.data() {
            buf.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut input: R) -> Result<(CheckpointHeader, Vec<Matrix<T>>), EncoderError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 8 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("missing ADSEAL01 magic"));
    }
    let word = |i: usize| {
        let at = 8 + 4 * i;
        u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
    };
    let flags = word(5) as u32;
    if flags & !(FLAG_SCALED | FLAG_MINIMAL | FLAG_AD_ONLY) != 0 {
        return Err(bad(format!("unknown flag bits {flags:#x}")));
    }
    let encoder = EncoderConfig {
        d_model: word(0),
        d_k: word(1),
        layers: word(2),
        max_len: word(3),
        ffn_mult: word(6),
        scaled: flags & FLAG_SCALED != 0,
        minimal: flags & FLAG_MINIMAL != 0,
    };
    encoder.validate()?;
    let header = CheckpointHeader { encoder, vocab_size: word(4), d_user: word(7), ad_only: flags & FLAG_AD_ONLY != 0 };
    let layout = header.layout();
    let expected = 40 + 8 * layout.iter().map(|(r, c)| r * c).sum::<usize>();
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut at = 40;
    let mut mats = Vec::with_capacity(layout.len());
    for (r, c) in layout {
        let data = (0..r * c)
            .map(|_| {
                let x = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
                at += 8;
                T::lit(x)
            })
            .collect();
        mats.push(Matrix::from_vec(r, c, data)?);
    }
    Ok((header, mats))
}
