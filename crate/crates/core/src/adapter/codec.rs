//! Adapter checkpoint codec.
//!
//! The wire format ships only what a peer cannot reproduce: the masked
//! expansion values and the mask itself. The projection is regenerated from
//! its seed on decode, which is what makes "send A once, then never again"
//! literal in the accounting. All integers and floats are little-endian.
//!
//! Layout, field by field:
//!
//! | offset | size            | field                                        |
//! |--------|-----------------|----------------------------------------------|
//! | 0      | 4               | magic `"SOAD"`                               |
//! | 4      | 2               | format version, `u16`, currently 1           |
//! | 6      | 2               | reserved, must be 0                          |
//! | 8      | 4               | layer index, `u32`                           |
//! | 12     | 4               | `d` (expansion rows), `u32`                  |
//! | 16     | 4               | `k` (projection columns), `u32`              |
//! | 20     | 4               | `r` (rank), `u32`                            |
//! | 24     | 8               | projection seed, `u64`                       |
//! | 32     | 8               | active mask count, `u64`                     |
//! | 40     | `ceil(d*r/8)`   | mask bitmap; bit `p = row*r + col` stored in |
//! |        |                 | byte `p/8`, bit `p%8` (LSB first); padding   |
//! |        |                 | bits in the last byte must be 0              |
//! | ...    | `8*active`      | masked expansion values, `f64`, ascending    |
//! |        |                 | row-major index                              |
//!
//! Refined projections are deliberately not serialized: they are a pure
//! function of the projection and the receiver's (or origin's) probe mean.

use crate::adapter::AdapterPair;
use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, Matrix};

const MAGIC: [u8; 4] = *b"SOAD";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 40;

/// Serializes an adapter to the documented layout.
pub fn encode_adapter(pair: &AdapterPair) -> Vec<u8> {
    let d = pair.output_dim();
    let r = pair.rank();
    let total = d * r;
    let bitmap_len = total.div_ceil(8);
    let active = pair.active_count();

    let mut out = Vec::with_capacity(HEADER_LEN + bitmap_len + 8 * active);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(pair.layer_index() as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(pair.input_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(r as u32).to_le_bytes());
    out.extend_from_slice(&pair.seed().to_le_bytes());
    out.extend_from_slice(&(active as u64).to_le_bytes());

    let mut bitmap = vec![0u8; bitmap_len];
    for (p, &m) in pair.mask().iter().enumerate() {
        if m {
            bitmap[p / 8] |= 1 << (p % 8);
        }
    }
    out.extend_from_slice(&bitmap);

    for (p, &m) in pair.mask().iter().enumerate() {
        if m {
            out.extend_from_slice(&pair.expansion().data()[p].to_le_bytes());
        }
    }
    out
}

/// Parses the documented layout back into an adapter, regenerating the
/// projection from its seed. Every structural inconsistency (bad magic,
/// size mismatch, count mismatch, set padding bits) is an [`Error::Codec`].
pub fn decode_adapter(bytes: &[u8]) -> Result<AdapterPair> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Codec(format!(
            "checkpoint needs at least {HEADER_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Codec("bad magic".into()));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Codec(format!("unsupported version {version}")));
    }
    if bytes[6..8] != [0, 0] {
        return Err(Error::Codec("reserved field must be zero".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let layer_index = u32_at(8);
    let d = u32_at(12);
    let k = u32_at(16);
    let r = u32_at(20);
    let seed = u64::from_le_bytes(bytes[24..32].try_into().unwrap());
    let active = u64::from_le_bytes(bytes[32..40].try_into().unwrap()) as usize;

    if d == 0 || k == 0 || r == 0 || r > d.min(k) {
        return Err(Error::Codec(format!("inconsistent dimensions d={d} k={k} r={r}")));
    }
    let total = d * r;
    if active > total {
        return Err(Error::Codec(format!("active count {active} exceeds d*r = {total}")));
    }
    let bitmap_len = total.div_ceil(8);
    let expect = HEADER_LEN + bitmap_len + 8 * active;
    if bytes.len() != expect {
        return Err(Error::Codec(format!(
            "expected {expect} bytes for d={d} r={r} active={active}, got {}",
            bytes.len()
        )));
    }

    let bitmap = &bytes[HEADER_LEN..HEADER_LEN + bitmap_len];
    let mut mask = vec![false; total];
    let mut popcount = 0usize;
    for (p, m) in mask.iter_mut().enumerate() {
        if bitmap[p / 8] & (1 << (p % 8)) != 0 {
            *m = true;
            popcount += 1;
        }
    }
    if total % 8 != 0 {
        let padding = bitmap[bitmap_len - 1] >> (total % 8);
        if padding != 0 {
            return Err(Error::Codec("padding bits in mask bitmap must be zero".into()));
        }
    }
    if popcount != active {
        return Err(Error::Codec(format!(
            "bitmap popcount {popcount} disagrees with header count {active}"
        )));
    }

    let mut expansion = Matrix::zeros(d, r);
    let mut offset = HEADER_LEN + bitmap_len;
    for (p, &m) in mask.iter().enumerate() {
        if m {
            let v = f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
            expansion.data_mut()[p] = v;
            offset += 8;
        }
    }

    Ok(AdapterPair {
        layer_index,
        projection: gaussian_matrix(r, k, seed),
        refined_projection: None,
        expansion,
        mask,
        seed,
    })
}
