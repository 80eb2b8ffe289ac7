//! Binary mask files.
//!
//! Layout: `MEM1MASK`, version (u16 LE), header length (u32 LE), JSON header,
//! payload. The payload holds, in order: tokens (i32), positions (i32), loss
//! flags (u8), segment codes (u8), turn indices (u16) and the mask rows. All
//! integers are little-endian.
//!
//! `dense_bitpack` rows are `ceil(n / 64)` u64 words each, bit `i` of word
//! `w` standing for token `64w + i`. `index_list` rows are a u32 count followed
//! by that many ascending u32 indices.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Mask1D, Mask2D, MaskError, Segment, StitchedTrajectory};

pub const MAGIC: &[u8; 8] = b"MEM1MASK";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskFormat {
    #[default]
    DenseBitpack,
    IndexList,
}

impl std::str::FromStr for MaskFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dense_bitpack" | "dense-bitpack" => Ok(Self::DenseBitpack),
            "index_list" | "index-list" => Ok(Self::IndexList),
            other => Err(format!("unknown mask format `{other}`")),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    n: usize,
    counter_id: String,
    format: MaskFormat,
    sha256: String,
}

/// Everything a mask file carries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskExport {
    pub counter_id: String,
    pub tokens: Vec<u32>,
    pub positions: Vec<u32>,
    pub segments: Vec<Segment>,
    pub turn_of: Vec<u16>,
    pub loss: Mask1D,
    pub mask: Mask2D,
}

impl MaskExport {
    pub fn new(st: &StitchedTrajectory, mask: &Mask2D, loss: &Mask1D) -> Self {
        Self {
            counter_id: st.counter_id.clone(),
            tokens: st.tokens.clone(),
            positions: st.positions.clone(),
            segments: st.segments.clone(),
            turn_of: st.turn_of.clone(),
            loss: loss.clone(),
            mask: mask.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn as_i32(v: u32, what: &str) -> Result<i32, MaskError> {
    i32::try_from(v).map_err(|_| MaskError::Corrupt(format!("{what} {v} does not fit in i32")))
}

/// Serializes to the file layout.
pub fn write_export(data: &MaskExport, format: MaskFormat) -> Result<Vec<u8>, MaskError> {
    let n = data.len();
    if [data.positions.len(), data.segments.len(), data.turn_of.len(), data.loss.loss.len(), data.mask.n()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(MaskError::Corrupt("per-token arrays differ in length".into()));
    }
    let mut payload = Vec::with_capacity(n * 12 + n * n.div_ceil(64) * 8);
    for &t in &data.tokens {
        payload.extend_from_slice(&as_i32(t, "token id")?.to_le_bytes());
    }
    for &p in &data.positions {
        payload.extend_from_slice(&as_i32(p, "position")?.to_le_bytes());
    }
    payload.extend(data.loss.loss.iter().map(|&b| b as u8));
    payload.extend(data.segments.iter().map(|s| s.code()));
    for &t in &data.turn_of {
        payload.extend_from_slice(&t.to_le_bytes());
    }
    for k in 0..n {
        match format {
            MaskFormat::DenseBitpack => {
                for w in data.mask.row_words(k) {
                    payload.extend_from_slice(&w.to_le_bytes());
                }
            }
            MaskFormat::IndexList => {
                payload.extend_from_slice(&(data.mask.row_count(k) as u32).to_le_bytes());
                for j in data.mask.row(k) {
                    payload.extend_from_slice(&(j as u32).to_le_bytes());
                }
            }
        }
    }
    let header = serde_json::to_vec(&Header {
        n,
        counter_id: data.counter_id.clone(),
        format,
        sha256: hex::encode(Sha256::digest(&payload)),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(14 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], MaskError> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| MaskError::Corrupt("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, MaskError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, MaskError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn i32_as_u32(&mut self, what: &str) -> Result<u32, MaskError> {
        let v = i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes"));
        u32::try_from(v).map_err(|_| MaskError::Corrupt(format!("negative {what}")))
    }

    fn u64(&mut self) -> Result<u64, MaskError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses and validates a mask file. The payload hash is checked before
/// anything else in the payload is trusted.
pub fn read_export(bytes: &[u8]) -> Result<(MaskExport, MaskFormat), MaskError> {
    let corrupt = |m: &str| MaskError::Corrupt(m.to_owned());
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(MaskError::Corrupt(format!("unsupported version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| MaskError::Corrupt(format!("header: {e}")))?;
    let payload = &bytes[r.pos..];
    if hex::encode(Sha256::digest(payload)) != header.sha256 {
        return Err(corrupt("payload hash mismatch"));
    }
    let n = header.n;
    if n.checked_mul(12).is_none_or(|min| min > payload.len()) {
        return Err(corrupt("payload shorter than declared token count"));
    }
    let tokens = (0..n).map(|_| r.i32_as_u32("token id")).collect::<Result<Vec<_>, _>>()?;
    let positions = (0..n).map(|_| r.i32_as_u32("position")).collect::<Result<Vec<_>, _>>()?;
    let loss = r
        .take(n)?
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(corrupt("loss flag out of range")),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let segments = r
        .take(n)?
        .iter()
        .map(|&b| Segment::from_code(b).ok_or_else(|| corrupt("segment code out of range")))
        .collect::<Result<Vec<_>, _>>()?;
    let turn_of = (0..n).map(|_| r.u16()).collect::<Result<Vec<_>, _>>()?;
    let mut mask = Mask2D::new(n);
    for k in 0..n {
        match header.format {
            MaskFormat::DenseBitpack => {
                for w in 0..mask.words_per_row() {
                    mask.row_words_mut(k)[w] = r.u64()?;
                }
            }
            MaskFormat::IndexList => {
                let count = r.u32()? as usize;
                let mut last = None;
                for _ in 0..count {
                    let j = r.u32()? as usize;
                    if j >= n || last.is_some_and(|l| l >= j) {
                        return Err(corrupt("index list out of order or range"));
                    }
                    mask.set(k, j);
                    last = Some(j);
                }
            }
        }
        if mask.row(k).any(|j| j >= k) {
            return Err(corrupt("mask row is not strictly causal"));
        }
    }
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes after mask rows"));
    }
    Ok((
        MaskExport {
            counter_id: header.counter_id,
            tokens,
            positions,
            segments,
            turn_of,
            loss: Mask1D { loss },
            mask,
        },
        header.format,
    ))
}

pub fn export(
    st: &StitchedTrajectory,
    masks: (&Mask2D, &Mask1D),
    path: &Path,
    format: MaskFormat,
) -> Result<(), MaskError> {
    let bytes = write_export(&MaskExport::new(st, masks.0, masks.1), format)?;
    std::fs::write(path, bytes).map_err(|source| MaskError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn import(path: &Path) -> Result<(MaskExport, MaskFormat), MaskError> {
    let bytes = std::fs::read(path).map_err(|source| MaskError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_export(&bytes)
}
