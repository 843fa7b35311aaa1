//! Bit-sliced index: a column of non-negative integers stored as one bitmap
//! per binary digit.
//!
//! Slice `i` holds the positions whose value has bit `i` set. A position that
//! appears in no slice has value zero, and zero means "absent": comparison
//! and scalar operations never turn an absent position into a present one
//! unless the operation is explicitly defined over absence (see
//! [`CmpMode::Total`]).
//!
//! Every operation works on whole slices with bitmap AND/OR/XOR/ANDNOT; no
//! kernel walks individual rows.

use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::bitmap::{Bitmap, BitmapBuilder, Reader};
use crate::error::FormatError;

/// Widest supported value, in bits.
pub const MAX_SLICES: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum BsiError {
    #[error("position {0} appears more than once")]
    DuplicatePosition(u32),
    #[error("result exceeds 64 bits")]
    Overflow,
    #[error("subtraction underflows at {positions} positions")]
    Underflow { positions: u64 },
    #[error("operand has {slices} slices, expected a binary BSI")]
    NotBinary { slices: usize },
    #[error("min/max of an empty BSI")]
    EmptyInput,
    #[error("aggregate needs at least one input")]
    NoInputs,
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Row-wise relation for [`Bsi::compare`] and [`Bsi::compare_scalar`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Lt,
    Gt,
    Le,
    Ge,
    Eq,
    Ne,
}

impl CmpOp {
    pub const ALL: [CmpOp; 6] = [CmpOp::Lt, CmpOp::Gt, CmpOp::Le, CmpOp::Ge, CmpOp::Eq, CmpOp::Ne];

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Gt => ">",
            CmpOp::Le => "<=",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
        }
    }

    pub fn holds<T: Ord>(self, a: T, b: T) -> bool {
        match self {
            CmpOp::Lt => a < b,
            CmpOp::Gt => a > b,
            CmpOp::Le => a <= b,
            CmpOp::Ge => a >= b,
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
        }
    }
}

impl fmt::Display for CmpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// How [`Bsi::compare`] treats absent (zero) rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum CmpMode {
    /// A row matches only if it is present in both operands.
    #[default]
    Strict,
    /// Absent rows compare as the value 0; rows absent from both never match.
    Total,
}

/// Aggregates that fold several BSIs into one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AggFn {
    Sum,
    Max,
    Mul,
    DistinctPos,
}

impl AggFn {
    pub fn name(self) -> &'static str {
        match self {
            AggFn::Sum => "sumBSI",
            AggFn::Max => "maxBSI",
            AggFn::Mul => "mulBSI",
            AggFn::DistinctPos => "distinctPos",
        }
    }
}

/// Bit-sliced index. The highest slice is never empty.
#[derive(Clone, Default, PartialEq, Eq)]
pub struct Bsi {
    slices: Vec<Bitmap>,
}

impl fmt::Debug for Bsi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = self.nonzero();
        if rows.len() <= 16 {
            f.debug_map()
                .entries(rows.iter().map(|p| (p, self.get(p))))
                .finish()
        } else {
            write!(f, "Bsi({} slices, {} rows)", self.slices.len(), rows.len())
        }
    }
}

/// A BSI with at most one slice: every present row has value 1.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BinaryBsi(Bitmap);

impl BinaryBsi {
    pub fn empty() -> Self {
        BinaryBsi(Bitmap::new())
    }

    pub fn from_bitmap(bitmap: Bitmap) -> Self {
        BinaryBsi(bitmap)
    }

    pub fn as_bitmap(&self) -> &Bitmap {
        &self.0
    }

    pub fn into_bitmap(self) -> Bitmap {
        self.0
    }

    pub fn count(&self) -> u64 {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, p: u32) -> bool {
        self.0.contains(p)
    }

    /// Product of two binary BSIs.
    pub fn and(&self, other: &BinaryBsi) -> BinaryBsi {
        BinaryBsi(self.0.and(&other.0))
    }

    pub fn or(&self, other: &BinaryBsi) -> BinaryBsi {
        BinaryBsi(self.0.or(&other.0))
    }

    pub fn to_bsi(&self) -> Bsi {
        Bsi::from(self.clone())
    }
}

impl From<BinaryBsi> for Bsi {
    fn from(b: BinaryBsi) -> Bsi {
        if b.0.is_empty() {
            Bsi::empty()
        } else {
            Bsi {
                slices: alloc::vec![b.0],
            }
        }
    }
}

impl TryFrom<Bsi> for BinaryBsi {
    type Error = BsiError;

    fn try_from(mut x: Bsi) -> Result<BinaryBsi, BsiError> {
        match x.slices.len() {
            0 => Ok(BinaryBsi::empty()),
            1 => Ok(BinaryBsi(x.slices.pop().unwrap())),
            slices => Err(BsiError::NotBinary { slices }),
        }
    }
}

static EMPTY: Bitmap = Bitmap::EMPTY;

impl Bsi {
    pub fn empty() -> Bsi {
        Bsi::default()
    }

    /// Wraps raw slices, trimming empty high slices.
    pub fn from_slices(mut slices: Vec<Bitmap>) -> Result<Bsi, BsiError> {
        trim(&mut slices);
        if slices.len() > MAX_SLICES {
            return Err(BsiError::Overflow);
        }
        Ok(Bsi { slices })
    }

    /// Builds from `(position, value)` pairs in any order. Zero values are
    /// allowed and leave the position absent.
    pub fn from_pairs<I: IntoIterator<Item = (u32, u64)>>(pairs: I) -> Result<Bsi, BsiError> {
        let mut rows: Vec<(u32, u64)> = pairs.into_iter().collect();
        rows.sort_unstable_by_key(|r| r.0);
        if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(BsiError::DuplicatePosition(w[0].0));
        }
        let width = rows
            .iter()
            .map(|r| 64 - r.1.leading_zeros() as usize)
            .max()
            .unwrap_or(0);
        let mut builders: Vec<BitmapBuilder> = (0..width).map(|_| BitmapBuilder::new()).collect();
        for (p, v) in rows {
            let mut bits = v;
            while bits != 0 {
                let i = bits.trailing_zeros() as usize;
                builders[i].push(p).expect("rows sorted and deduplicated");
                bits &= bits - 1;
            }
        }
        Bsi::from_slices(builders.into_iter().map(BitmapBuilder::finish).collect())
    }

    pub fn slice_count(&self) -> usize {
        self.slices.len()
    }

    pub fn slices(&self) -> &[Bitmap] {
        &self.slices
    }

    fn slice_or_empty(&self, i: usize) -> &Bitmap {
        self.slices.get(i).unwrap_or(&EMPTY)
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn get(&self, p: u32) -> u64 {
        self.slices
            .iter()
            .enumerate()
            .filter(|(_, s)| s.contains(p))
            .fold(0, |acc, (i, _)| acc | 1u64 << i)
    }

    /// Positions holding a nonzero value: the OR of all slices.
    pub fn nonzero(&self) -> Bitmap {
        let mut it = self.slices.iter();
        let Some(first) = it.next() else {
            return Bitmap::new();
        };
        it.fold(first.clone(), |acc, s| acc.or(s))
    }

    pub fn nonzero_binary(&self) -> BinaryBsi {
        BinaryBsi(self.nonzero())
    }

    pub fn add(&self, other: &Bsi) -> Result<Bsi, BsiError> {
        let width = self.slices.len().max(other.slices.len());
        let mut out = Vec::with_capacity(width + 1);
        let mut carry = Bitmap::new();
        for i in 0..width {
            let (x, y) = (self.slices.get(i), other.slices.get(i));
            match (x, y) {
                (Some(x), Some(y)) => {
                    let half = x.xor(y);
                    if carry.is_empty() {
                        carry = x.and(y);
                        out.push(half);
                    } else {
                        out.push(half.xor(&carry));
                        carry = x.and(y).or(&half.and(&carry));
                    }
                }
                (Some(z), None) | (None, Some(z)) => {
                    if carry.is_empty() {
                        out.push(z.clone());
                    } else {
                        out.push(z.xor(&carry));
                        carry = z.and(&carry);
                    }
                }
                (None, None) => unreachable!(),
            }
        }
        if !carry.is_empty() {
            if width == MAX_SLICES {
                return Err(BsiError::Overflow);
            }
            out.push(carry);
        }
        Bsi::from_slices(out)
    }

    /// Requires `self(j) >= other(j)` at every row; equal rows become absent.
    pub fn subtract(&self, other: &Bsi) -> Result<Bsi, BsiError> {
        let width = self.slices.len().max(other.slices.len());
        let mut out = Vec::with_capacity(width);
        let mut borrow = Bitmap::new();
        for i in 0..width {
            let x = self.slice_or_empty(i);
            let y = other.slice_or_empty(i);
            let diff = x.xor(y);
            if borrow.is_empty() {
                out.push(diff);
                borrow = y.andnot(x);
            } else {
                out.push(diff.xor(&borrow));
                borrow = y.andnot(x).or(&borrow.andnot(&diff));
            }
        }
        if !borrow.is_empty() {
            return Err(BsiError::Underflow {
                positions: borrow.len(),
            });
        }
        Bsi::from_slices(out)
    }

    /// Masks every slice with the binary operand; linear in slice count.
    pub fn multiply_binary(&self, mask: &BinaryBsi) -> Bsi {
        let slices = self.slices.iter().map(|s| s.and(&mask.0)).collect();
        Bsi::from_slices(slices).expect("masking never widens")
    }

    /// General product by shift-and-add over `other`'s slices.
    pub fn multiply(&self, other: &Bsi) -> Result<Bsi, BsiError> {
        let mut acc = Bsi::empty();
        for (shift, y) in other.slices.iter().enumerate() {
            if y.is_empty() {
                continue;
            }
            let mut partial = Vec::with_capacity(shift + self.slices.len());
            partial.resize_with(shift, Bitmap::new);
            for x in &self.slices {
                partial.push(x.and(y));
            }
            trim(&mut partial);
            if partial.len() > MAX_SLICES {
                return Err(BsiError::Overflow);
            }
            acc = acc.add(&Bsi { slices: partial })?;
        }
        Ok(acc)
    }

    pub fn compare(&self, other: &Bsi, op: CmpOp, mode: CmpMode) -> BinaryBsi {
        let bitmap = match mode {
            CmpMode::Strict => match op {
                CmpOp::Lt => self.strict_lt(other),
                CmpOp::Gt => other.strict_lt(self),
                CmpOp::Eq => self.strict_eq(other),
                CmpOp::Ne => self.strict_ne(other),
                CmpOp::Le => self.strict_eq(other).or(&self.strict_lt(other)),
                CmpOp::Ge => self.strict_eq(other).or(&other.strict_lt(self)),
            },
            CmpMode::Total => match op {
                CmpOp::Lt => self.less_than_scan(other),
                CmpOp::Gt => other.less_than_scan(self),
                CmpOp::Eq => self.total_eq(other),
                CmpOp::Ne => self.differing_rows(other),
                CmpOp::Le => self.total_eq(other).or(&self.less_than_scan(other)),
                CmpOp::Ge => self.total_eq(other).or(&other.less_than_scan(self)),
            },
        };
        BinaryBsi(bitmap)
    }

    /// Slice recurrence for `<` from the low slice up. Absent rows take part
    /// as zeros, so the result is `x < y` over all rows.
    fn less_than_scan(&self, other: &Bsi) -> Bitmap {
        let width = self.slices.len().max(other.slices.len());
        let mut lt = Bitmap::new();
        for i in 0..width {
            let x = self.slice_or_empty(i);
            let y = other.slice_or_empty(i);
            lt = y.or(&lt).andnot(x).or(&y.and(&lt));
        }
        lt
    }

    /// Rows where any slice differs.
    fn differing_rows(&self, other: &Bsi) -> Bitmap {
        let width = self.slices.len().max(other.slices.len());
        (0..width).fold(Bitmap::new(), |acc, i| {
            acc.or(&self.slice_or_empty(i).xor(other.slice_or_empty(i)))
        })
    }

    fn strict_lt(&self, other: &Bsi) -> Bitmap {
        // x < y with x present implies y present
        self.less_than_scan(other).and(&self.nonzero())
    }

    /// Starts from the rows present in `self` and clears every row where a
    /// slice differs.
    fn strict_eq(&self, other: &Bsi) -> Bitmap {
        let width = self.slices.len().max(other.slices.len());
        let mut eq = self.nonzero();
        for i in 0..width {
            eq = eq.andnot(&self.slice_or_empty(i).xor(other.slice_or_empty(i)));
        }
        eq
    }

    fn strict_ne(&self, other: &Bsi) -> Bitmap {
        self.differing_rows(other)
            .and(&self.nonzero())
            .and(&other.nonzero())
    }

    fn total_eq(&self, other: &Bsi) -> Bitmap {
        self.nonzero()
            .or(&other.nonzero())
            .andnot(&self.differing_rows(other))
    }

    /// Range search against a constant, scanning from the high bit down.
    /// Absent rows never match, for any operator.
    pub fn compare_scalar(&self, op: CmpOp, k: u64) -> BinaryBsi {
        let present = self.nonzero();
        let width = self.slices.len().max(64 - k.leading_zeros() as usize);
        let mut gt = Bitmap::new();
        let mut lt = Bitmap::new();
        let mut eq = present.clone();
        for i in (0..width).rev() {
            if eq.is_empty() {
                break;
            }
            let s = self.slice_or_empty(i);
            if k >> i & 1 == 1 {
                lt = lt.or(&eq.andnot(s));
                eq = eq.and(s);
            } else {
                gt = gt.or(&eq.and(s));
                eq = eq.andnot(s);
            }
        }
        BinaryBsi(match op {
            CmpOp::Lt => lt,
            CmpOp::Gt => gt,
            CmpOp::Eq => eq,
            CmpOp::Le => lt.or(&eq),
            CmpOp::Ge => gt.or(&eq),
            CmpOp::Ne => present.andnot(&eq),
        })
    }

    /// Adds `k` to every present row; absent rows stay absent.
    pub fn add_scalar(&self, k: u64) -> Result<Bsi, BsiError> {
        if k == 0 || self.is_empty() {
            return Ok(self.clone());
        }
        let present = self.nonzero();
        let width = 64 - k.leading_zeros() as usize;
        let constant = (0..width)
            .map(|i| {
                if k >> i & 1 == 1 {
                    present.clone()
                } else {
                    Bitmap::new()
                }
            })
            .collect();
        self.add(&Bsi { slices: constant })
    }

    pub fn sum(&self) -> u128 {
        self.slices
            .iter()
            .enumerate()
            .map(|(i, s)| u128::from(s.len()) << i)
            .sum()
    }

    /// Sum of the rows inside `mask`, without materializing the product.
    pub fn sum_masked(&self, mask: &Bitmap) -> u128 {
        self.slices
            .iter()
            .enumerate()
            .map(|(i, s)| u128::from(s.and_len(mask)) << i)
            .sum()
    }

    pub fn count(&self) -> u64 {
        self.nonzero().len()
    }

    pub fn max(&self) -> Result<u64, BsiError> {
        let mut candidates = self.nonzero();
        if candidates.is_empty() {
            return Err(BsiError::EmptyInput);
        }
        let mut value = 0u64;
        for (i, s) in self.slices.iter().enumerate().rev() {
            let keep = candidates.and(s);
            if !keep.is_empty() {
                candidates = keep;
                value |= 1 << i;
            }
        }
        Ok(value)
    }

    pub fn min(&self) -> Result<u64, BsiError> {
        let mut candidates = self.nonzero();
        if candidates.is_empty() {
            return Err(BsiError::EmptyInput);
        }
        let mut value = 0u64;
        for (i, s) in self.slices.iter().enumerate().rev() {
            let keep = candidates.andnot(s);
            if keep.is_empty() {
                value |= 1 << i;
            } else {
                candidates = keep;
            }
        }
        Ok(value)
    }

    /// Element-wise maximum with absent rows read as zero.
    pub fn max_with(&self, other: &Bsi) -> Result<Bsi, BsiError> {
        let take_self = self.compare(other, CmpOp::Gt, CmpMode::Total);
        let take_other = self.compare(other, CmpOp::Le, CmpMode::Total);
        self.multiply_binary(&take_self)
            .add(&other.multiply_binary(&take_other))
    }

    /// Left fold of the pairwise aggregate over `inputs`.
    pub fn aggregate(kind: AggFn, inputs: &[Bsi]) -> Result<Bsi, BsiError> {
        let refs: Vec<&Bsi> = inputs.iter().collect();
        Bsi::aggregate_refs(kind, &refs)
    }

    pub fn aggregate_refs(kind: AggFn, inputs: &[&Bsi]) -> Result<Bsi, BsiError> {
        let (first, rest) = inputs.split_first().ok_or(BsiError::NoInputs)?;
        match kind {
            AggFn::DistinctPos => {
                let support = rest
                    .iter()
                    .fold(first.nonzero(), |acc, x| acc.or(&x.nonzero()));
                Ok(BinaryBsi(support).into())
            }
            AggFn::Sum => rest.iter().try_fold((*first).clone(), |acc, x| acc.add(x)),
            AggFn::Mul => rest
                .iter()
                .try_fold((*first).clone(), |acc, x| acc.multiply(x)),
            AggFn::Max => rest
                .iter()
                .try_fold((*first).clone(), |acc, x| acc.max_with(x)),
        }
    }

    pub fn serialized_len(&self) -> usize {
        1 + self
            .slices
            .iter()
            .map(|s| 4 + s.serialized_len())
            .sum::<usize>()
    }

    pub fn serialize(&self) -> Result<Vec<u8>, FormatError> {
        let mut out = Vec::with_capacity(self.serialized_len());
        self.serialize_into(&mut out)?;
        Ok(out)
    }

    /// `u8` slice count, then each slice low-first as a `u32` byte length
    /// followed by the bitmap bytes.
    pub fn serialize_into(&self, out: &mut Vec<u8>) -> Result<(), FormatError> {
        out.push(self.slices.len() as u8);
        for s in &self.slices {
            out.extend_from_slice(&(s.serialized_len() as u32).to_le_bytes());
            s.serialize_into(out)?;
        }
        Ok(())
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Bsi, FormatError> {
        let mut r = Reader::new(bytes);
        let bsi = Bsi::read_from(&mut r)?;
        if r.remaining() != 0 {
            return Err(FormatError::TrailingBytes(r.remaining()));
        }
        Ok(bsi)
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Bsi, FormatError> {
        let count = r.u8()? as usize;
        if count > MAX_SLICES {
            return Err(FormatError::TooManySlices(count));
        }
        let mut slices = Vec::with_capacity(count);
        for i in 0..count {
            let len = r.u32()? as usize;
            let payload = r.take(len)?;
            let mut inner = Reader::new(payload);
            let bm = Bitmap::read_from(&mut inner)?;
            if inner.remaining() != 0 {
                return Err(FormatError::SliceLength(i));
            }
            slices.push(bm);
        }
        if slices.last().is_some_and(Bitmap::is_empty) {
            return Err(FormatError::UntrimmedSlices);
        }
        Ok(Bsi { slices })
    }
}

fn trim(slices: &mut Vec<Bitmap>) {
    while slices.last().is_some_and(Bitmap::is_empty) {
        slices.pop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeMap;
    use alloc::vec;

    fn bsi(pairs: &[(u32, u64)]) -> Bsi {
        Bsi::from_pairs(pairs.iter().copied()).unwrap()
    }

    fn rows(x: &Bsi) -> BTreeMap<u32, u64> {
        x.nonzero().iter().map(|p| (p, x.get(p))).collect()
    }

    fn ones(b: &BinaryBsi) -> Vec<u32> {
        b.as_bitmap().iter().collect()
    }

    #[test]
    fn from_pairs_and_get() {
        let x = bsi(&[(0, 3), (2, 2)]);
        assert_eq!(x.slice_count(), 2);
        assert_eq!(x.get(0), 3);
        assert_eq!(x.get(1), 0);
        assert_eq!(x.get(2), 2);
        assert!(Bsi::empty().nonzero().is_empty());
        assert_eq!(
            Bsi::from_pairs([(4, 1), (4, 2)]),
            Err(BsiError::DuplicatePosition(4))
        );
    }

    #[test]
    fn add_examples() {
        let x = bsi(&[(0, 3), (2, 2)]);
        let y = bsi(&[(0, 1), (1, 1)]);
        assert_eq!(rows(&x.add(&y).unwrap()), BTreeMap::from([(0, 4), (1, 1), (2, 2)]));
        assert_eq!(x.add(&Bsi::empty()).unwrap(), x);
        let carry = bsi(&[(0, 3)]).add(&bsi(&[(0, 1)])).unwrap();
        assert_eq!(rows(&carry), BTreeMap::from([(0, 4)]));
        assert_eq!(carry.slice_count(), 3);
    }

    #[test]
    fn add_overflow() {
        let big = bsi(&[(0, u64::MAX)]);
        assert_eq!(big.add(&bsi(&[(0, 1)])), Err(BsiError::Overflow));
        assert_eq!(big.add_scalar(1), Err(BsiError::Overflow));
        assert!(big.add(&bsi(&[(1, 1)])).is_ok());
    }

    #[test]
    fn subtract_examples() {
        let x = bsi(&[(0, 4)]);
        assert_eq!(rows(&x.subtract(&bsi(&[(0, 1)])).unwrap()), BTreeMap::from([(0, 3)]));
        assert!(x.subtract(&x).unwrap().is_empty());
        let y = bsi(&[(0, 5), (1, 1), (2, 1)]);
        assert_eq!(x.subtract(&y), Err(BsiError::Underflow { positions: 3 }));
    }

    #[test]
    fn multiply_binary_examples() {
        let x = bsi(&[(0, 5), (1, 7)]);
        let m = BinaryBsi::try_from(bsi(&[(1, 1), (2, 1)])).unwrap();
        assert_eq!(rows(&x.multiply_binary(&m)), BTreeMap::from([(1, 7)]));
        assert_eq!(x.multiply_binary(&x.nonzero_binary()), x);
        assert!(x.multiply_binary(&BinaryBsi::empty()).is_empty());
        assert_eq!(
            BinaryBsi::try_from(x),
            Err(BsiError::NotBinary { slices: 3 })
        );
    }

    #[test]
    fn multiply_examples() {
        assert_eq!(rows(&bsi(&[(0, 3)]).multiply(&bsi(&[(0, 4)])).unwrap()), BTreeMap::from([(0, 12)]));
        let v = bsi(&[(0, 2), (1, 3)]);
        assert_eq!(rows(&v.multiply(&v).unwrap()), BTreeMap::from([(0, 4), (1, 9)]));
        let wide = bsi(&[(0, 1 << 40)]);
        assert_eq!(wide.multiply(&wide), Err(BsiError::Overflow));
    }

    #[test]
    fn strict_lt_excludes_absent_and_equal() {
        let x = bsi(&[(0, 2), (2, 5)]);
        let y = bsi(&[(0, 3), (1, 4), (2, 5)]);
        assert_eq!(ones(&x.compare(&y, CmpOp::Lt, CmpMode::Strict)), vec![0]);
        assert_eq!(
            x.compare(&x, CmpOp::Eq, CmpMode::Strict).into_bitmap(),
            x.nonzero()
        );
    }

    #[test]
    fn total_ge_reads_absent_as_zero() {
        let x = bsi(&[(0, 5)]);
        let y = bsi(&[(0, 5), (1, 2)]);
        assert_eq!(ones(&x.compare(&y, CmpOp::Ge, CmpMode::Total)), vec![0]);
        assert_eq!(ones(&x.compare(&y, CmpOp::Lt, CmpMode::Total)), vec![1]);
    }

    #[test]
    fn compare_scalar_examples() {
        let x = bsi(&[(0, 2), (1, 4), (2, 5)]);
        assert_eq!(ones(&x.compare_scalar(CmpOp::Ge, 4)), vec![1, 2]);
        assert_eq!(x.compare_scalar(CmpOp::Gt, 0).into_bitmap(), x.nonzero());
        assert_eq!(ones(&x.compare_scalar(CmpOp::Ne, 100)), vec![0, 1, 2]);
        assert_eq!(ones(&x.compare_scalar(CmpOp::Lt, 1 << 40)), vec![0, 1, 2]);
        assert!(x.compare_scalar(CmpOp::Eq, 0).is_empty());
    }

    #[test]
    fn offset_window_filter() {
        let offset = bsi(&[(0, 1), (1, 3), (2, 6)]);
        let bucket = bsi(&[(0, 9), (1, 10), (2, 11)]);
        let window = offset
            .compare_scalar(CmpOp::Ge, 2)
            .and(&offset.compare_scalar(CmpOp::Le, 5));
        assert_eq!(rows(&bucket.multiply_binary(&window)), BTreeMap::from([(1, 10)]));
    }

    #[test]
    fn add_scalar_examples() {
        assert_eq!(rows(&bsi(&[(0, 2)]).add_scalar(3).unwrap()), BTreeMap::from([(0, 5)]));
        assert!(Bsi::empty().add_scalar(7).unwrap().is_empty());
        let offset = bsi(&[(0, 1), (1, 3)]);
        assert_eq!(
            rows(&offset.add_scalar(99).unwrap()),
            BTreeMap::from([(0, 100), (1, 102)])
        );
    }

    #[test]
    fn aggregates() {
        let x = bsi(&[(0, 3), (1, 1), (2, 2)]);
        assert_eq!(x.sum(), 6);
        assert_eq!(x.count(), 3);
        assert_eq!(x.min(), Ok(1));
        assert_eq!(x.max(), Ok(3));
        assert_eq!(Bsi::empty().sum(), 0);
        assert_eq!(Bsi::empty().count(), 0);
        assert_eq!(Bsi::empty().max(), Err(BsiError::EmptyInput));
        assert_eq!(Bsi::empty().min(), Err(BsiError::EmptyInput));
    }

    #[test]
    fn aggregate_functions() {
        let a = bsi(&[(0, 2)]);
        let b = bsi(&[(1, 3)]);
        assert_eq!(
            rows(&Bsi::aggregate(AggFn::DistinctPos, &[a, b]).unwrap()),
            BTreeMap::from([(0, 1), (1, 1)])
        );
        let max = Bsi::aggregate(AggFn::Max, &[bsi(&[(0, 5)]), bsi(&[(0, 3), (1, 2)])]).unwrap();
        assert_eq!(rows(&max), BTreeMap::from([(0, 5), (1, 2)]));
        assert_eq!(Bsi::aggregate(AggFn::Sum, &[]), Err(BsiError::NoInputs));
    }

    #[test]
    fn serialization_round_trip() {
        let x = bsi(&[(0, 3), (70_000, 9), (5, 1 << 33)]);
        let bytes = x.serialize().unwrap();
        assert_eq!(bytes.len(), x.serialized_len());
        assert_eq!(Bsi::deserialize(&bytes).unwrap(), x);
        assert_eq!(Bsi::empty().serialize().unwrap(), vec![0]);
        assert_eq!(Bsi::deserialize(&[65]), Err(FormatError::TooManySlices(65)));
    }
}
