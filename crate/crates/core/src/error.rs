use thiserror::Error;

/// Errors from parsing the binary bitmap and BSI formats.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated input at byte {offset}: need {needed}, have {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("container keys not strictly increasing at key {key}")]
    UnsortedKeys { key: u16 },
    #[error("array container {key} is not strictly increasing")]
    UnsortedArray { key: u16 },
    #[error("container {key} has the wrong kind for its cardinality")]
    NonCanonicalContainer { key: u16 },
    #[error("container {key} declares {declared} members but holds {actual}")]
    CardinalityMismatch { key: u16, declared: u32, actual: u32 },
    #[error("unknown container kind {0}")]
    UnknownContainerKind(u8),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("bitmap has 65536 containers; the entry count field holds at most 65535")]
    TooManyContainers,
    #[error("slice count {0} exceeds 64")]
    TooManySlices(usize),
    #[error("slice {0} length prefix does not match its payload")]
    SliceLength(usize),
    #[error("highest slice is empty")]
    UntrimmedSlices,
}
