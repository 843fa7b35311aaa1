//! Conversion between row format `(position, value)` and BSI format.
//!
//! Two encoders and two decoders produce identical results and differ only
//! in memory access pattern:
//!
//! * [`encode_straightforward`] sets each row's bits into the slice bitmaps
//!   one insert at a time, in input order.
//! * [`encode_presorted`] takes rows sorted by position and builds one
//!   container per slice per 16-bit key, so all writes for a key land
//!   together.
//! * [`decode_straightforward`] probes every slice for every masked position.
//! * [`decode_per_bitmap`] walks container by container, ORs each slice's
//!   masked bits into a per-container value buffer, then emits the buffer in
//!   position order.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::bitmap::{Bitmap, Container};
use crate::bsi::{Bsi, BsiError, MAX_SLICES};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("row {index} at position {position} has value 0")]
    ZeroValue { index: usize, position: u32 },
    #[error("position {0} appears more than once")]
    DuplicatePosition(u32),
    #[error("rows are not strictly ascending at row {index}")]
    NotSorted { index: usize },
    #[error("rows are not flagged as sorted")]
    SortedFlagMissing,
    #[error("bad header line, expected `sorted=0` or `sorted=1`")]
    BadHeader,
    #[error("record section is {0} bytes, not a multiple of 12")]
    TruncatedRecord(usize),
    #[error(transparent)]
    Bsi(#[from] BsiError),
}

/// Rows in normal format. Values are never zero.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NormalRows {
    pub rows: Vec<(u32, u64)>,
    /// Positions are strictly increasing.
    pub sorted: bool,
}

impl NormalRows {
    pub fn new(rows: Vec<(u32, u64)>) -> Self {
        let sorted = rows.windows(2).all(|w| w[0].0 < w[1].0);
        NormalRows { rows, sorted }
    }

    pub fn unsorted(rows: Vec<(u32, u64)>) -> Self {
        NormalRows {
            rows,
            sorted: false,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Bytes of the record section: 12 per row.
    pub fn raw_len(&self) -> usize {
        12 * self.rows.len()
    }

    /// `sorted=0|1\n` then little-endian `(u32 position, u64 value)` records.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + self.raw_len());
        out.extend_from_slice(if self.sorted { b"sorted=1\n" } else { b"sorted=0\n" });
        for &(p, v) in &self.rows {
            out.extend_from_slice(&p.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<NormalRows, CodecError> {
        let sorted = match bytes.get(..9) {
            Some(b"sorted=1\n") => true,
            Some(b"sorted=0\n") => false,
            _ => return Err(CodecError::BadHeader),
        };
        let body = &bytes[9..];
        if body.len() % 12 != 0 {
            return Err(CodecError::TruncatedRecord(body.len()));
        }
        let rows: Vec<(u32, u64)> = body
            .chunks_exact(12)
            .map(|c| {
                (
                    u32::from_le_bytes(c[..4].try_into().unwrap()),
                    u64::from_le_bytes(c[4..].try_into().unwrap()),
                )
            })
            .collect();
        if sorted {
            if let Some(index) = first_unsorted(&rows) {
                return Err(CodecError::NotSorted { index });
            }
        }
        Ok(NormalRows { rows, sorted })
    }
}

fn first_unsorted(rows: &[(u32, u64)]) -> Option<usize> {
    rows.windows(2)
        .position(|w| w[0].0 >= w[1].0)
        .map(|i| i + 1)
}

fn check_value(index: usize, position: u32, value: u64) -> Result<(), CodecError> {
    if value == 0 {
        Err(CodecError::ZeroValue { index, position })
    } else {
        Ok(())
    }
}

/// Inserts every set bit of every row into its slice, in input order.
pub fn encode_straightforward(rows: &NormalRows) -> Result<Bsi, CodecError> {
    let mut slices: Vec<Bitmap> = Vec::new();
    let mut seen = Bitmap::new();
    for (index, &(p, v)) in rows.rows.iter().enumerate() {
        check_value(index, p, v)?;
        if !seen.insert(p) {
            return Err(CodecError::DuplicatePosition(p));
        }
        let mut bits = v;
        while bits != 0 {
            let i = bits.trailing_zeros() as usize;
            if slices.len() <= i {
                slices.resize_with(i + 1, Bitmap::new);
            }
            slices[i].insert(p);
            bits &= bits - 1;
        }
    }
    Ok(Bsi::from_slices(slices)?)
}

/// Encodes sorted rows one 16-bit key block at a time.
pub fn encode_presorted(rows: &NormalRows) -> Result<Bsi, CodecError> {
    if !rows.sorted {
        return Err(CodecError::SortedFlagMissing);
    }
    let mut slices: Vec<Bitmap> = Vec::new();
    let mut pending: Vec<Vec<u16>> = vec![Vec::new(); MAX_SLICES];
    let mut block_key: Option<u16> = None;
    let mut previous: Option<u32> = None;

    let flush = |key: u16, pending: &mut Vec<Vec<u16>>, slices: &mut Vec<Bitmap>| {
        for (i, lows) in pending.iter_mut().enumerate() {
            if lows.is_empty() {
                continue;
            }
            if slices.len() <= i {
                slices.resize_with(i + 1, Bitmap::new);
            }
            let container = Container::from_sorted(core::mem::take(lows)).expect("non-empty");
            slices[i].push_container(key, container);
        }
    };

    for (index, &(p, v)) in rows.rows.iter().enumerate() {
        check_value(index, p, v)?;
        if previous.is_some_and(|q| q >= p) {
            return Err(CodecError::NotSorted { index });
        }
        previous = Some(p);
        let key = (p >> 16) as u16;
        if block_key != Some(key) {
            if let Some(k) = block_key {
                flush(k, &mut pending, &mut slices);
            }
            block_key = Some(key);
        }
        let low = p as u16;
        let mut bits = v;
        while bits != 0 {
            pending[bits.trailing_zeros() as usize].push(low);
            bits &= bits - 1;
        }
    }
    if let Some(k) = block_key {
        flush(k, &mut pending, &mut slices);
    }
    Ok(Bsi::from_slices(slices)?)
}

/// Assembles each masked position's value by probing every slice.
pub fn decode_straightforward(x: &Bsi, mask: &Bitmap) -> NormalRows {
    let rows = mask
        .iter()
        .filter_map(|p| {
            let v = x.get(p);
            (v != 0).then_some((p, v))
        })
        .collect();
    NormalRows { rows, sorted: true }
}

/// Extracts masked bits slice by slice within each container.
pub fn decode_per_bitmap(x: &Bsi, mask: &Bitmap) -> NormalRows {
    let mut rows = Vec::new();
    let mut values = vec![0u64; 1 << 16];
    for (key, mask_container) in mask.containers() {
        let mut any = false;
        for (i, slice) in x.slices().iter().enumerate() {
            let Some(c) = slice.container(key) else {
                continue;
            };
            let bit = 1u64 << i;
            c.for_each_common(mask_container, |low| values[low as usize] |= bit);
            any = true;
        }
        if !any {
            continue;
        }
        let high = u32::from(key) << 16;
        mask_container.for_each(|low| {
            let v = core::mem::take(&mut values[low as usize]);
            if v != 0 {
                rows.push((high | u32::from(low), v));
            }
        });
    }
    NormalRows { rows, sorted: true }
}
