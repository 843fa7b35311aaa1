//! Two-level compressed bitmap over 32-bit positions.
//!
//! Positions are split into a 16-bit key (high half) and a 16-bit low half.
//! Each key owns a container holding the low halves: a sorted array while the
//! container has at most [`ARRAY_MAX`] members, a 65536-bit bitset otherwise.
//! Every public operation leaves containers in the kind that matches their
//! cardinality, so two bitmaps with the same members have the same layout and
//! serialize to the same bytes.

use alloc::boxed::Box;
use alloc::vec::Vec;
use core::fmt;
use core::ops::{BitAnd, BitOr, BitXor, Sub};

use crate::error::FormatError;

/// Largest cardinality stored as a sorted array.
pub const ARRAY_MAX: usize = 4096;

const WORDS: usize = 1024;

/// Serialization magic, `BSM1` read as a little-endian u32.
pub const BITMAP_MAGIC: u32 = 0x4253_4D31;
pub const BITMAP_VERSION: u8 = 1;

type Words = Box<[u64; WORDS]>;

fn zeroed_words() -> Words {
    Box::new([0u64; WORDS])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContainerKind {
    Array = 0,
    Bitset = 1,
}

#[derive(Clone, PartialEq, Eq)]
enum Repr {
    Array(Vec<u16>),
    Bitset { words: Words, len: u32 },
}

/// Set of low halves sharing one key. Never empty.
#[derive(Clone, PartialEq, Eq)]
pub struct Container {
    repr: Repr,
}

impl fmt::Debug for Container {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Container")
            .field("kind", &self.kind())
            .field("len", &self.len())
            .finish()
    }
}

impl Container {
    /// Builds a container from strictly increasing values. Returns `None` when empty.
    pub(crate) fn from_sorted(values: Vec<u16>) -> Option<Container> {
        debug_assert!(values.windows(2).all(|w| w[0] < w[1]));
        if values.is_empty() {
            None
        } else if values.len() <= ARRAY_MAX {
            Some(Container {
                repr: Repr::Array(values),
            })
        } else {
            let mut words = zeroed_words();
            for &v in &values {
                words[(v >> 6) as usize] |= 1u64 << (v & 63);
            }
            Some(Container {
                repr: Repr::Bitset {
                    words,
                    len: values.len() as u32,
                },
            })
        }
    }

    fn from_words(words: Words) -> Option<Container> {
        let len: u32 = words.iter().map(|w| w.count_ones()).sum();
        Self::from_words_with_len(words, len)
    }

    fn from_words_with_len(words: Words, len: u32) -> Option<Container> {
        if len == 0 {
            None
        } else if len as usize <= ARRAY_MAX {
            let mut values = Vec::with_capacity(len as usize);
            for_each_word_bit(&words[..], |v| values.push(v));
            Some(Container {
                repr: Repr::Array(values),
            })
        } else {
            Some(Container {
                repr: Repr::Bitset { words, len },
            })
        }
    }

    fn full() -> Container {
        Container {
            repr: Repr::Bitset {
                words: Box::new([u64::MAX; WORDS]),
                len: 1 << 16,
            },
        }
    }

    pub fn kind(&self) -> ContainerKind {
        match self.repr {
            Repr::Array(_) => ContainerKind::Array,
            Repr::Bitset { .. } => ContainerKind::Bitset,
        }
    }

    pub fn len(&self) -> u32 {
        match &self.repr {
            Repr::Array(v) => v.len() as u32,
            Repr::Bitset { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sorted low halves when this is an array container.
    pub fn as_array(&self) -> Option<&[u16]> {
        match &self.repr {
            Repr::Array(v) => Some(v),
            Repr::Bitset { .. } => None,
        }
    }

    /// The 1024 little-endian words when this is a bitset container.
    pub fn as_bitset(&self) -> Option<&[u64; WORDS]> {
        match &self.repr {
            Repr::Array(_) => None,
            Repr::Bitset { words, .. } => Some(words),
        }
    }

    pub fn contains(&self, low: u16) -> bool {
        match &self.repr {
            Repr::Array(v) => v.binary_search(&low).is_ok(),
            Repr::Bitset { words, .. } => words[(low >> 6) as usize] & (1u64 << (low & 63)) != 0,
        }
    }

    /// Calls `f` for every member in ascending order.
    pub fn for_each(&self, mut f: impl FnMut(u16)) {
        match &self.repr {
            Repr::Array(v) => v.iter().for_each(|&x| f(x)),
            Repr::Bitset { words, .. } => for_each_word_bit(&words[..], f),
        }
    }

    /// Calls `f` for every member of `self ∩ other` in ascending order, without
    /// materializing the intersection.
    pub fn for_each_common(&self, other: &Container, mut f: impl FnMut(u16)) {
        match (&self.repr, &other.repr) {
            (Repr::Array(a), Repr::Array(b)) => {
                let (mut i, mut j) = (0, 0);
                while i < a.len() && j < b.len() {
                    match a[i].cmp(&b[j]) {
                        core::cmp::Ordering::Less => i += 1,
                        core::cmp::Ordering::Greater => j += 1,
                        core::cmp::Ordering::Equal => {
                            f(a[i]);
                            i += 1;
                            j += 1;
                        }
                    }
                }
            }
            (Repr::Array(a), Repr::Bitset { words, .. })
            | (Repr::Bitset { words, .. }, Repr::Array(a)) => {
                for &v in a {
                    if words[(v >> 6) as usize] & (1u64 << (v & 63)) != 0 {
                        f(v);
                    }
                }
            }
            (Repr::Bitset { words: a, .. }, Repr::Bitset { words: b, .. }) => {
                for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
                    let mut w = x & y;
                    while w != 0 {
                        f(((i as u32) << 6 | w.trailing_zeros()) as u16);
                        w &= w - 1;
                    }
                }
            }
        }
    }

    fn to_words(&self) -> Words {
        match &self.repr {
            Repr::Array(v) => {
                let mut words = zeroed_words();
                for &x in v {
                    words[(x >> 6) as usize] |= 1u64 << (x & 63);
                }
                words
            }
            Repr::Bitset { words, .. } => words.clone(),
        }
    }

    /// Returns true when `low` was newly inserted.
    fn insert(&mut self, low: u16) -> bool {
        match &mut self.repr {
            Repr::Array(v) => match v.binary_search(&low) {
                Ok(_) => false,
                Err(idx) => {
                    v.insert(idx, low);
                    if v.len() > ARRAY_MAX {
                        let words = self.to_words();
                        let len = ARRAY_MAX as u32 + 1;
                        self.repr = Repr::Bitset { words, len };
                    }
                    true
                }
            },
            Repr::Bitset { words, len } => {
                let w = &mut words[(low >> 6) as usize];
                let bit = 1u64 << (low & 63);
                if *w & bit != 0 {
                    false
                } else {
                    *w |= bit;
                    *len += 1;
                    true
                }
            }
        }
    }

    fn and(&self, other: &Container) -> Option<Container> {
        match (&self.repr, &other.repr) {
            (Repr::Bitset { words: a, .. }, Repr::Bitset { words: b, .. }) => {
                let mut out = zeroed_words();
                for i in 0..WORDS {
                    out[i] = a[i] & b[i];
                }
                Container::from_words(out)
            }
            _ => {
                let mut values = Vec::with_capacity(self.len().min(other.len()) as usize);
                self.for_each_common(other, |v| values.push(v));
                Container::from_sorted(values)
            }
        }
    }

    fn or(&self, other: &Container) -> Option<Container> {
        match (&self.repr, &other.repr) {
            (Repr::Array(a), Repr::Array(b)) => Container::from_sorted(merge_union(a, b)),
            (Repr::Array(a), Repr::Bitset { words, len })
            | (Repr::Bitset { words, len }, Repr::Array(a)) => {
                let mut out = words.clone();
                let mut len = *len;
                for &v in a {
                    let w = &mut out[(v >> 6) as usize];
                    let bit = 1u64 << (v & 63);
                    len += u32::from(*w & bit == 0);
                    *w |= bit;
                }
                Container::from_words_with_len(out, len)
            }
            (Repr::Bitset { words: a, .. }, Repr::Bitset { words: b, .. }) => {
                let mut out = zeroed_words();
                for i in 0..WORDS {
                    out[i] = a[i] | b[i];
                }
                Container::from_words(out)
            }
        }
    }

    fn xor(&self, other: &Container) -> Option<Container> {
        match (&self.repr, &other.repr) {
            (Repr::Array(a), Repr::Array(b)) => Container::from_sorted(merge_xor(a, b)),
            (Repr::Array(a), Repr::Bitset { words, len })
            | (Repr::Bitset { words, len }, Repr::Array(a)) => {
                let mut out = words.clone();
                let mut len = *len;
                for &v in a {
                    let w = &mut out[(v >> 6) as usize];
                    let bit = 1u64 << (v & 63);
                    if *w & bit == 0 {
                        len += 1;
                    } else {
                        len -= 1;
                    }
                    *w ^= bit;
                }
                Container::from_words_with_len(out, len)
            }
            (Repr::Bitset { words: a, .. }, Repr::Bitset { words: b, .. }) => {
                let mut out = zeroed_words();
                for i in 0..WORDS {
                    out[i] = a[i] ^ b[i];
                }
                Container::from_words(out)
            }
        }
    }

    fn andnot(&self, other: &Container) -> Option<Container> {
        match (&self.repr, &other.repr) {
            (Repr::Array(a), Repr::Array(b)) => Container::from_sorted(merge_difference(a, b)),
            (Repr::Array(a), Repr::Bitset { words, .. }) => Container::from_sorted(
                a.iter()
                    .copied()
                    .filter(|&v| words[(v >> 6) as usize] & (1u64 << (v & 63)) == 0)
                    .collect(),
            ),
            (Repr::Bitset { words, len }, Repr::Array(b)) => {
                let mut out = words.clone();
                let mut len = *len;
                for &v in b {
                    let w = &mut out[(v >> 6) as usize];
                    let bit = 1u64 << (v & 63);
                    len -= u32::from(*w & bit != 0);
                    *w &= !bit;
                }
                Container::from_words_with_len(out, len)
            }
            (Repr::Bitset { words: a, .. }, Repr::Bitset { words: b, .. }) => {
                let mut out = zeroed_words();
                for i in 0..WORDS {
                    out[i] = a[i] & !b[i];
                }
                Container::from_words(out)
            }
        }
    }

    fn intersects(&self, other: &Container) -> bool {
        match (&self.repr, &other.repr) {
            (Repr::Bitset { words: a, .. }, Repr::Bitset { words: b, .. }) => {
                a.iter().zip(b.iter()).any(|(x, y)| x & y != 0)
            }
            (Repr::Array(a), _) => a.iter().any(|&v| other.contains(v)),
            (_, Repr::Array(b)) => b.iter().any(|&v| self.contains(v)),
        }
    }

    fn and_len(&self, other: &Container) -> u32 {
        match (&self.repr, &other.repr) {
            (Repr::Bitset { words: a, .. }, Repr::Bitset { words: b, .. }) => {
                a.iter().zip(b.iter()).map(|(x, y)| (x & y).count_ones()).sum()
            }
            _ => {
                let mut n = 0;
                self.for_each_common(other, |_| n += 1);
                n
            }
        }
    }

    fn serialized_len(&self) -> usize {
        5 + match &self.repr {
            Repr::Array(v) => 2 * v.len(),
            Repr::Bitset { .. } => 8 * WORDS,
        }
    }
}

fn for_each_word_bit(words: &[u64], mut f: impl FnMut(u16)) {
    for (i, &word) in words.iter().enumerate() {
        let mut w = word;
        while w != 0 {
            f(((i as u32) << 6 | w.trailing_zeros()) as u16);
            w &= w - 1;
        }
    }
}

fn merge_union(a: &[u16], b: &[u16]) -> Vec<u16> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            core::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            core::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            core::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

fn merge_xor(a: &[u16], b: &[u16]) -> Vec<u16> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            core::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            core::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            core::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

fn merge_difference(a: &[u16], b: &[u16]) -> Vec<u16> {
    let mut out = Vec::with_capacity(a.len());
    let mut j = 0;
    for &v in a {
        while j < b.len() && b[j] < v {
            j += 1;
        }
        if j >= b.len() || b[j] != v {
            out.push(v);
        }
    }
    out
}

/// Compressed set of `u32` positions.
#[derive(Clone, Default, PartialEq, Eq)]
pub struct Bitmap {
    keys: Vec<u16>,
    containers: Vec<Container>,
}

impl fmt::Debug for Bitmap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len() <= 16 {
            f.debug_set().entries(self.iter()).finish()
        } else {
            write!(f, "Bitmap({} positions in {} containers)", self.len(), self.keys.len())
        }
    }
}

impl Bitmap {
    pub(crate) const EMPTY: Bitmap = Bitmap {
        keys: Vec::new(),
        containers: Vec::new(),
    };

    pub fn new() -> Bitmap {
        Bitmap::default()
    }

    /// All positions in `0..n`.
    pub fn full(n: u64) -> Bitmap {
        assert!(n <= 1 << 32, "position space is 32 bits");
        let mut bm = Bitmap::new();
        let full_keys = (n >> 16) as u32;
        for key in 0..full_keys {
            bm.keys.push(key as u16);
            bm.containers.push(Container::full());
        }
        let rest = (n & 0xFFFF) as u32;
        if rest > 0 {
            let values = (0..rest).map(|v| v as u16).collect();
            bm.keys.push(full_keys as u16);
            bm.containers.extend(Container::from_sorted(values));
        }
        bm
    }

    /// Builds from positions in strictly ascending order.
    pub fn from_sorted_iter<I: IntoIterator<Item = u32>>(iter: I) -> Result<Bitmap, Unsorted> {
        let mut builder = BitmapBuilder::new();
        for p in iter {
            builder.push(p)?;
        }
        Ok(builder.finish())
    }

    pub(crate) fn push_container(&mut self, key: u16, container: Container) {
        debug_assert!(self.keys.last().is_none_or(|&k| k < key));
        debug_assert!(!container.is_empty());
        self.keys.push(key);
        self.containers.push(container);
    }

    pub fn insert(&mut self, p: u32) -> bool {
        let key = (p >> 16) as u16;
        let low = p as u16;
        match self.keys.binary_search(&key) {
            Ok(i) => self.containers[i].insert(low),
            Err(i) => {
                self.keys.insert(i, key);
                self.containers.insert(
                    i,
                    Container {
                        repr: Repr::Array(alloc::vec![low]),
                    },
                );
                true
            }
        }
    }

    pub fn contains(&self, p: u32) -> bool {
        match self.keys.binary_search(&((p >> 16) as u16)) {
            Ok(i) => self.containers[i].contains(p as u16),
            Err(_) => false,
        }
    }

    pub fn len(&self) -> u64 {
        self.containers.iter().map(|c| u64::from(c.len())).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn container_count(&self) -> usize {
        self.keys.len()
    }

    pub fn container(&self, key: u16) -> Option<&Container> {
        self.keys
            .binary_search(&key)
            .ok()
            .map(|i| &self.containers[i])
    }

    /// `(key, container)` pairs in ascending key order.
    pub fn containers(&self) -> impl ExactSizeIterator<Item = (u16, &Container)> + '_ {
        self.keys.iter().copied().zip(self.containers.iter())
    }

    pub fn iter(&self) -> Iter<'_> {
        Iter {
            bitmap: self,
            index: 0,
            state: IterState::Start,
        }
    }

    pub fn min(&self) -> Option<u32> {
        self.iter().next()
    }

    pub fn max(&self) -> Option<u32> {
        let (key, c) = self.containers().last()?;
        let low = match &c.repr {
            Repr::Array(v) => *v.last()?,
            Repr::Bitset { words, .. } => {
                let (i, w) = words.iter().enumerate().rev().find(|(_, w)| **w != 0)?;
                ((i as u32) << 6 | (63 - w.leading_zeros())) as u16
            }
        };
        Some(u32::from(key) << 16 | u32::from(low))
    }

    pub fn and(&self, other: &Bitmap) -> Bitmap {
        let mut out = Bitmap::new();
        let (mut i, mut j) = (0, 0);
        while i < self.keys.len() && j < other.keys.len() {
            match self.keys[i].cmp(&other.keys[j]) {
                core::cmp::Ordering::Less => i += 1,
                core::cmp::Ordering::Greater => j += 1,
                core::cmp::Ordering::Equal => {
                    if let Some(c) = self.containers[i].and(&other.containers[j]) {
                        out.push_container(self.keys[i], c);
                    }
                    i += 1;
                    j += 1;
                }
            }
        }
        out
    }

    pub fn or(&self, other: &Bitmap) -> Bitmap {
        self.merge_with(other, true, Container::or)
    }

    pub fn xor(&self, other: &Bitmap) -> Bitmap {
        self.merge_with(other, true, Container::xor)
    }

    /// Members of `self` not in `other`.
    pub fn andnot(&self, other: &Bitmap) -> Bitmap {
        self.merge_with(other, false, Container::andnot)
    }

    fn merge_with(
        &self,
        other: &Bitmap,
        keep_right: bool,
        op: fn(&Container, &Container) -> Option<Container>,
    ) -> Bitmap {
        let mut out = Bitmap {
            keys: Vec::with_capacity(self.keys.len().max(other.keys.len())),
            containers: Vec::with_capacity(self.keys.len().max(other.keys.len())),
        };
        let (mut i, mut j) = (0, 0);
        while i < self.keys.len() || j < other.keys.len() {
            let left = self.keys.get(i);
            let right = other.keys.get(j);
            match (left, right) {
                (Some(&l), Some(&r)) if l == r => {
                    if let Some(c) = op(&self.containers[i], &other.containers[j]) {
                        out.push_container(l, c);
                    }
                    i += 1;
                    j += 1;
                }
                (Some(&l), Some(&r)) if l < r => {
                    out.push_container(l, self.containers[i].clone());
                    i += 1;
                }
                (Some(&l), None) => {
                    out.push_container(l, self.containers[i].clone());
                    i += 1;
                }
                (_, Some(&r)) => {
                    if !keep_right && i >= self.keys.len() {
                        break;
                    }
                    if keep_right {
                        out.push_container(r, other.containers[j].clone());
                    }
                    j += 1;
                }
                (None, None) => unreachable!(),
            }
        }
        out
    }

    pub fn intersects(&self, other: &Bitmap) -> bool {
        let (mut i, mut j) = (0, 0);
        while i < self.keys.len() && j < other.keys.len() {
            match self.keys[i].cmp(&other.keys[j]) {
                core::cmp::Ordering::Less => i += 1,
                core::cmp::Ordering::Greater => j += 1,
                core::cmp::Ordering::Equal => {
                    if self.containers[i].intersects(&other.containers[j]) {
                        return true;
                    }
                    i += 1;
                    j += 1;
                }
            }
        }
        false
    }

    /// `|self ∩ other|` without materializing the intersection.
    pub fn and_len(&self, other: &Bitmap) -> u64 {
        let (mut i, mut j) = (0, 0);
        let mut n = 0u64;
        while i < self.keys.len() && j < other.keys.len() {
            match self.keys[i].cmp(&other.keys[j]) {
                core::cmp::Ordering::Less => i += 1,
                core::cmp::Ordering::Greater => j += 1,
                core::cmp::Ordering::Equal => {
                    n += u64::from(self.containers[i].and_len(&other.containers[j]));
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn is_subset(&self, other: &Bitmap) -> bool {
        self.and_len(other) == self.len()
    }

    /// Exact length of [`Bitmap::serialize`] output.
    pub fn serialized_len(&self) -> usize {
        7 + self.containers.iter().map(Container::serialized_len).sum::<usize>()
    }

    /// Fails only when all 65536 keys are populated, which the u16 entry
    /// count cannot represent.
    pub fn serialize(&self) -> Result<Vec<u8>, FormatError> {
        let mut out = Vec::with_capacity(self.serialized_len());
        self.serialize_into(&mut out)?;
        Ok(out)
    }

    pub fn serialize_into(&self, out: &mut Vec<u8>) -> Result<(), FormatError> {
        let count = u16::try_from(self.keys.len()).map_err(|_| FormatError::TooManyContainers)?;
        out.extend_from_slice(&BITMAP_MAGIC.to_le_bytes());
        out.push(BITMAP_VERSION);
        out.extend_from_slice(&count.to_le_bytes());
        for (key, c) in self.containers() {
            out.extend_from_slice(&key.to_le_bytes());
            out.push(c.kind() as u8);
            out.extend_from_slice(&((c.len() - 1) as u16).to_le_bytes());
            match &c.repr {
                Repr::Array(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Repr::Bitset { words, .. } => {
                    words.iter().for_each(|w| out.extend_from_slice(&w.to_le_bytes()))
                }
            }
        }
        Ok(())
    }

    /// Parses exactly one bitmap; trailing bytes are an error.
    pub fn deserialize(bytes: &[u8]) -> Result<Bitmap, FormatError> {
        let mut reader = Reader::new(bytes);
        let bm = Bitmap::read_from(&mut reader)?;
        if reader.remaining() != 0 {
            return Err(FormatError::TrailingBytes(reader.remaining()));
        }
        Ok(bm)
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Bitmap, FormatError> {
        let magic = r.u32()?;
        if magic != BITMAP_MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let version = r.u8()?;
        if version != BITMAP_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let count = r.u16()? as usize;
        let mut bm = Bitmap {
            keys: Vec::with_capacity(count),
            containers: Vec::with_capacity(count),
        };
        for _ in 0..count {
            let key = r.u16()?;
            if bm.keys.last().is_some_and(|&k| k >= key) {
                return Err(FormatError::UnsortedKeys { key });
            }
            let kind = r.u8()?;
            let len = r.u16()? as usize + 1;
            let container = match kind {
                0 => {
                    if len > ARRAY_MAX {
                        return Err(FormatError::NonCanonicalContainer { key });
                    }
                    let raw = r.take(2 * len)?;
                    let values: Vec<u16> = raw
                        .chunks_exact(2)
                        .map(|c| u16::from_le_bytes([c[0], c[1]]))
                        .collect();
                    if values.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(FormatError::UnsortedArray { key });
                    }
                    Container {
                        repr: Repr::Array(values),
                    }
                }
                1 => {
                    if len <= ARRAY_MAX {
                        return Err(FormatError::NonCanonicalContainer { key });
                    }
                    let raw = r.take(8 * WORDS)?;
                    let mut words = zeroed_words();
                    for (w, c) in words.iter_mut().zip(raw.chunks_exact(8)) {
                        *w = u64::from_le_bytes(c.try_into().unwrap());
                    }
                    let actual: u32 = words.iter().map(|w| w.count_ones()).sum();
                    if actual as usize != len {
                        return Err(FormatError::CardinalityMismatch {
                            key,
                            declared: len as u32,
                            actual,
                        });
                    }
                    Container {
                        repr: Repr::Bitset {
                            words,
                            len: actual,
                        },
                    }
                }
                other => return Err(FormatError::UnknownContainerKind(other)),
            };
            bm.push_container(key, container);
        }
        Ok(bm)
    }
}

/// Little-endian cursor shared by the binary formats in this crate.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl FromIterator<u32> for Bitmap {
    fn from_iter<I: IntoIterator<Item = u32>>(iter: I) -> Self {
        let mut positions: Vec<u32> = iter.into_iter().collect();
        positions.sort_unstable();
        positions.dedup();
        let mut builder = BitmapBuilder::new();
        for p in positions {
            builder.push_unchecked(p);
        }
        builder.finish()
    }
}

impl Extend<u32> for Bitmap {
    fn extend<I: IntoIterator<Item = u32>>(&mut self, iter: I) {
        for p in iter {
            self.insert(p);
        }
    }
}

impl<'a> IntoIterator for &'a Bitmap {
    type Item = u32;
    type IntoIter = Iter<'a>;

    fn into_iter(self) -> Iter<'a> {
        self.iter()
    }
}

macro_rules! bitmap_binop {
    ($trait:ident, $method:ident, $call:ident) => {
        impl $trait<&Bitmap> for &Bitmap {
            type Output = Bitmap;

            fn $method(self, rhs: &Bitmap) -> Bitmap {
                self.$call(rhs)
            }
        }
    };
}

bitmap_binop!(BitAnd, bitand, and);
bitmap_binop!(BitOr, bitor, or);
bitmap_binop!(BitXor, bitxor, xor);
bitmap_binop!(Sub, sub, andnot);

/// Positions pushed out of ascending order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("position {position} pushed after {previous}")]
pub struct Unsorted {
    pub previous: u32,
    pub position: u32,
}

/// Single-threaded builder for strictly ascending position streams. Each
/// container is normalized once, when its key is complete.
#[derive(Debug, Default)]
pub struct BitmapBuilder {
    bitmap: Bitmap,
    key: Option<u16>,
    pending: Vec<u16>,
    last: Option<u32>,
}

impl BitmapBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: u32) -> Result<(), Unsorted> {
        if let Some(previous) = self.last {
            if p <= previous {
                return Err(Unsorted {
                    previous,
                    position: p,
                });
            }
        }
        self.push_unchecked(p);
        Ok(())
    }

    fn push_unchecked(&mut self, p: u32) {
        let key = (p >> 16) as u16;
        if self.key != Some(key) {
            self.flush();
            self.key = Some(key);
        }
        self.pending.push(p as u16);
        self.last = Some(p);
    }

    fn flush(&mut self) {
        if let Some(key) = self.key.take() {
            let values = core::mem::take(&mut self.pending);
            if let Some(c) = Container::from_sorted(values) {
                self.bitmap.push_container(key, c);
            }
        }
    }

    pub fn finish(mut self) -> Bitmap {
        self.flush();
        self.bitmap
    }
}

enum IterState {
    Start,
    Array(usize),
    Bitset { word: usize, bits: u64 },
}

/// Ascending iterator over a [`Bitmap`].
pub struct Iter<'a> {
    bitmap: &'a Bitmap,
    index: usize,
    state: IterState,
}

impl Iterator for Iter<'_> {
    type Item = u32;

    fn next(&mut self) -> Option<u32> {
        loop {
            let c = self.bitmap.containers.get(self.index)?;
            let high = u32::from(self.bitmap.keys[self.index]) << 16;
            match (&c.repr, &mut self.state) {
                (_, IterState::Start) => {
                    self.state = match &c.repr {
                        Repr::Array(_) => IterState::Array(0),
                        Repr::Bitset { words, .. } => IterState::Bitset {
                            word: 0,
                            bits: words[0],
                        },
                    };
                }
                (Repr::Array(v), IterState::Array(i)) => {
                    if let Some(&low) = v.get(*i) {
                        *i += 1;
                        return Some(high | u32::from(low));
                    }
                    self.index += 1;
                    self.state = IterState::Start;
                }
                (Repr::Bitset { words, .. }, IterState::Bitset { word, bits }) => {
                    while *bits == 0 {
                        *word += 1;
                        if *word == WORDS {
                            break;
                        }
                        *bits = words[*word];
                    }
                    if *word == WORDS {
                        self.index += 1;
                        self.state = IterState::Start;
                        continue;
                    }
                    let low = (*word as u32) << 6 | bits.trailing_zeros();
                    *bits &= *bits - 1;
                    return Some(high | low);
                }
                _ => unreachable!("iterator state matches container kind"),
            }
        }
    }
}
