//! On-disk tables.
//!
//! ```text
//! root/manifest.tsv                      catalog + partition list + checksum
//! root/{expose|metric|dimension}/<key>/index.tsv
//! root/{expose|metric|dimension}/<key>/seg<NNNN>.bsi
//! root/dict/index.tsv, root/dict/seg<NNNN>.ids
//! ```
//!
//! Every file is written to a temporary name and renamed into place, so
//! readers see either the old or the new version. Each segment block has a
//! CRC32 in its partition index and is checked on every read.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use bsimetrics_core::engine::{EngineError, TableSource};
use bsimetrics_core::model::{
    check_scale, Catalog, Date, DimensionSpec, ExposeSegment, HashConfig, MetricId, MetricSpec, PartitionKey,
    PositionEncoder, StrategyId,
};
use bsimetrics_core::{Bsi, FormatError};
use thiserror::Error;

pub const STORE_VERSION: u32 = 1;
const DICT_MAGIC: &[u8; 4] = b"BSID";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("no manifest at {0}; run `bsimetrics init` first")]
    MissingManifest(PathBuf),
    #[error("a catalog already exists at {0}")]
    AlreadyInitialized(PathBuf),
    #[error("{path}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    ChecksumMismatch { path: PathBuf, stored: u32, computed: u32 },
    #[error("{path}: format version {found}, this build reads {expected}")]
    VersionSkew { path: PathBuf, found: u32, expected: u32 },
    #[error("partition {key} has no segment {segment}")]
    MissingSegment { key: PartitionKey, segment: u32 },
    #[error("no partition {0}")]
    UnknownPartition(PartitionKey),
    #[error("{path}:{line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("invalid catalog: {0}")]
    Catalog(String),
}

impl From<StoreError> for EngineError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownPartition(key) => EngineError::MissingPartitions(vec![key]),
            other => EngineError::Storage(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(path: &Path, line: usize, reason: impl Into<String>) -> StoreError {
    StoreError::Corrupt {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// One segment's stored columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SegmentBlock {
    Expose(ExposeSegment),
    Value(Bsi),
}

impl SegmentBlock {
    pub fn encode(&self) -> Result<Vec<u8>, FormatError> {
        let mut out = Vec::new();
        match self {
            SegmentBlock::Expose(e) => {
                match e.min_expose_date {
                    Some(d) => {
                        out.push(1);
                        out.extend_from_slice(&d.0.to_le_bytes());
                    }
                    None => {
                        out.push(0);
                        out.extend_from_slice(&0u32.to_le_bytes());
                    }
                }
                for bsi in [&e.offset, &e.bucket] {
                    out.extend_from_slice(&(bsi.serialized_len() as u32).to_le_bytes());
                    bsi.serialize_into(&mut out)?;
                }
            }
            SegmentBlock::Value(bsi) => bsi.serialize_into(&mut out)?,
        }
        Ok(out)
    }

    pub fn decode(kind: &str, bytes: &[u8]) -> Result<SegmentBlock, FormatError> {
        if kind != "expose" {
            return Ok(SegmentBlock::Value(Bsi::deserialize(bytes)?));
        }
        let truncated = |offset: usize, needed: usize| FormatError::Truncated {
            offset,
            needed,
            available: bytes.len().saturating_sub(offset),
        };
        if bytes.len() < 5 {
            return Err(truncated(0, 5));
        }
        let date = u32::from_le_bytes(bytes[1..5].try_into().unwrap());
        let min_expose_date = (bytes[0] == 1).then_some(Date(date));
        let mut at = 5;
        let mut cols = Vec::with_capacity(2);
        for _ in 0..2 {
            if bytes.len() < at + 4 {
                return Err(truncated(at, 4));
            }
            let len = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
            at += 4;
            if bytes.len() < at + len {
                return Err(truncated(at, len));
            }
            cols.push(Bsi::deserialize(&bytes[at..at + len])?);
            at += len;
        }
        if at != bytes.len() {
            return Err(FormatError::TrailingBytes(bytes.len() - at));
        }
        let bucket = cols.pop().unwrap();
        let offset = cols.pop().unwrap();
        Ok(SegmentBlock::Expose(ExposeSegment {
            min_expose_date,
            offset,
            bucket,
        }))
    }
}

/// A partition's segment blocks, possibly a subset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub key: PartitionKey,
    pub segments: BTreeMap<u32, SegmentBlock>,
}

impl Partition {
    pub fn expose(strategy: StrategyId, segs: &[ExposeSegment]) -> Self {
        Partition {
            key: PartitionKey::Expose(strategy),
            segments: segs
                .iter()
                .enumerate()
                .map(|(i, s)| (i as u32, SegmentBlock::Expose(s.clone())))
                .collect(),
        }
    }

    pub fn values(key: PartitionKey, bsis: &[Bsi]) -> Self {
        Partition {
            key,
            segments: bsis
                .iter()
                .enumerate()
                .map(|(i, b)| (i as u32, SegmentBlock::Value(b.clone())))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub segments: u32,
    pub index_crc: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct IndexEntry {
    bytes: u64,
    crc: u32,
}

#[derive(Clone, Debug)]
struct PartitionIndex {
    segments: BTreeMap<u32, IndexEntry>,
}

/// Catalog plus the list of stored partitions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub catalog: Catalog,
    pub partitions: BTreeMap<PartitionKey, ManifestEntry>,
}

fn valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

pub fn check_dimension_name(name: &str) -> Result<(), StoreError> {
    if valid_name(name) {
        Ok(())
    } else {
        Err(StoreError::Catalog(format!(
            "dimension name `{name}` must start with a letter or `_` and contain only letters, digits, `_`, `-`, `.`"
        )))
    }
}

fn parse_key(path: &Path, line: usize, kind: &str, dir: &str) -> Result<PartitionKey, StoreError> {
    let bad = || corrupt(path, line, format!("bad partition key `{kind}/{dir}`"));
    match kind {
        "expose" => dir.parse().map(|s| PartitionKey::Expose(StrategyId(s))).map_err(|_| bad()),
        "metric" => {
            let (m, d) = dir.split_once('_').ok_or_else(bad)?;
            let m = m.parse().map_err(|_| bad())?;
            let d = Date::parse(d).map_err(|_| bad())?;
            Ok(PartitionKey::Metric(MetricId(m), d))
        }
        "dimension" => {
            let (n, d) = dir.rsplit_once('_').ok_or_else(bad)?;
            let d = Date::parse(d).map_err(|_| bad())?;
            Ok(PartitionKey::Dimension(n.into(), d))
        }
        _ => Err(bad()),
    }
}

fn parse_hex(s: &str) -> Option<u32> {
    u32::from_str_radix(s, 16).ok()
}

fn check_version(path: &Path, first: Option<&str>) -> Result<(), StoreError> {
    let fields: Vec<&str> = first.unwrap_or("").split('\t').collect();
    if fields.len() != 2 || fields[0] != "version" {
        return Err(corrupt(path, 1, "expected `version\\t<n>` header"));
    }
    let found: u32 = fields[1].parse().map_err(|_| corrupt(path, 1, "bad version"))?;
    if found != STORE_VERSION {
        return Err(StoreError::VersionSkew {
            path: path.to_path_buf(),
            found,
            expected: STORE_VERSION,
        });
    }
    Ok(())
}

/// Splits off and verifies the trailing `checksum\t<crc>` line.
fn verify_checksum<'a>(path: &Path, text: &'a str) -> Result<&'a str, StoreError> {
    let body_end = text.trim_end_matches('\n').rfind('\n').map_or(0, |i| i + 1);
    let (body, last) = text.split_at(body_end);
    let stored = last
        .trim_end()
        .strip_prefix("checksum\t")
        .and_then(parse_hex)
        .ok_or_else(|| corrupt(path, body.lines().count() + 1, "missing checksum line"))?;
    let computed = crc32fast::hash(body.as_bytes());
    if stored != computed {
        return Err(StoreError::ChecksumMismatch {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    Ok(body)
}

fn seal(mut body: String) -> String {
    let crc = crc32fast::hash(body.as_bytes());
    let _ = writeln!(body, "checksum\t{crc:08x}");
    body
}

impl Manifest {
    pub fn new(catalog: Catalog) -> Self {
        Manifest {
            catalog,
            partitions: BTreeMap::new(),
        }
    }

    pub fn path(root: &Path) -> PathBuf {
        root.join("manifest.tsv")
    }

    pub fn to_text(&self) -> String {
        let c = &self.catalog;
        let h = &c.hash;
        let mut s = String::new();
        let _ = writeln!(s, "version\t{STORE_VERSION}");
        let _ = writeln!(s, "segments\t{}", h.segment_count);
        let _ = writeln!(s, "buckets\t{}", h.bucket_count);
        let _ = writeln!(s, "bucket_salt\t{}", h.bucket_salt);
        let _ = writeln!(s, "shared\t{}", u8::from(h.shared));
        for (id, m) in &c.metrics {
            let _ = writeln!(s, "metric\t{id}\t{}", m.scale);
        }
        for (name, d) in &c.dimensions {
            match &d.categories {
                None => {
                    let _ = writeln!(s, "dimension\t{name}\tnumeric\t{}", d.scale);
                }
                Some(cats) => {
                    let _ = write!(s, "dimension\t{name}\tcategorical\t{}", d.scale);
                    for cat in cats {
                        let _ = write!(s, "\t{cat}");
                    }
                    s.push('\n');
                }
            }
        }
        for (key, e) in &self.partitions {
            let _ = writeln!(
                s,
                "partition\t{}\t{}\t{}\t{:08x}",
                key.kind(),
                key.dir_name(),
                e.segments,
                e.index_crc
            );
        }
        seal(s)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Manifest, StoreError> {
        check_version(path, text.lines().next())?;
        let body = verify_checksum(path, text)?;
        let mut hash = HashConfig::default();
        let mut catalog = Catalog::new(hash);
        let mut partitions = BTreeMap::new();
        for (i, line) in body.lines().enumerate().skip(1) {
            let n = i + 1;
            let f: Vec<&str> = line.split('\t').collect();
            let num = |s: &str| -> Result<u64, StoreError> {
                s.parse().map_err(|_| corrupt(path, n, format!("bad number `{s}`")))
            };
            match (f[0], f.len()) {
                ("segments", 2) => hash.segment_count = num(f[1])? as u32,
                ("buckets", 2) => hash.bucket_count = num(f[1])? as u32,
                ("bucket_salt", 2) => hash.bucket_salt = num(f[1])? as u8,
                ("shared", 2) => hash.shared = num(f[1])? != 0,
                ("metric", 3) => {
                    catalog.metrics.insert(MetricId(num(f[1])?), MetricSpec { scale: num(f[2])? });
                }
                ("dimension", k) if k >= 4 => {
                    let scale = num(f[3])?;
                    let categories = match f[2] {
                        "numeric" if k == 4 => None,
                        "categorical" => Some(f[4..].iter().map(|s| s.to_string()).collect()),
                        _ => return Err(corrupt(path, n, "bad dimension line")),
                    };
                    catalog
                        .dimensions
                        .insert(f[1].to_string(), DimensionSpec { scale, categories });
                }
                ("partition", 5) => {
                    let key = parse_key(path, n, f[1], f[2])?;
                    let index_crc = parse_hex(f[4]).ok_or_else(|| corrupt(path, n, "bad index checksum"))?;
                    partitions.insert(
                        key,
                        ManifestEntry {
                            segments: num(f[3])? as u32,
                            index_crc,
                        },
                    );
                }
                _ => return Err(corrupt(path, n, format!("unrecognized line `{line}`"))),
            }
        }
        hash.validate().map_err(|e| StoreError::Catalog(e.to_string()))?;
        catalog.hash = hash;
        Ok(Manifest { catalog, partitions })
    }

    pub fn load(root: &Path) -> Result<Manifest, StoreError> {
        let path = Manifest::path(root);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::MissingManifest(path)),
            Err(e) => return Err(io_err(&path)(e)),
        };
        Manifest::parse(&path, &text)
    }

    pub fn save(&self, root: &Path) -> Result<(), StoreError> {
        write_atomic(&Manifest::path(root), self.to_text().as_bytes())
    }
}

pub fn catalog_load(root: &Path) -> Result<Catalog, StoreError> {
    Ok(Manifest::load(root)?.catalog)
}

/// Replaces the catalog, keeping the partition list.
pub fn catalog_save(root: &Path, catalog: &Catalog) -> Result<(), StoreError> {
    let mut manifest = match Manifest::load(root) {
        Ok(m) => m,
        Err(StoreError::MissingManifest(_)) => Manifest::default(),
        Err(e) => return Err(e),
    };
    manifest.catalog = catalog.clone();
    manifest.save(root)
}

fn validate_catalog(c: &Catalog) -> Result<(), StoreError> {
    c.hash.validate().map_err(|e| StoreError::Catalog(e.to_string()))?;
    for m in c.metrics.values() {
        check_scale(m.scale).map_err(|e| StoreError::Catalog(e.to_string()))?;
    }
    for (name, d) in &c.dimensions {
        check_dimension_name(name)?;
        check_scale(d.scale).map_err(|e| StoreError::Catalog(e.to_string()))?;
        for cat in d.categories.iter().flatten() {
            if cat.contains(['\t', '\n', '\r']) {
                return Err(StoreError::Catalog(format!("category `{cat}` contains a tab or newline")));
            }
        }
    }
    Ok(())
}

pub struct Store {
    root: PathBuf,
    manifest: Manifest,
    indexes: RwLock<HashMap<PartitionKey, Arc<PartitionIndex>>>,
}

impl Store {
    pub fn init(root: &Path, catalog: Catalog) -> Result<Store, StoreError> {
        validate_catalog(&catalog)?;
        let path = Manifest::path(root);
        if path.exists() {
            return Err(StoreError::AlreadyInitialized(root.to_path_buf()));
        }
        let manifest = Manifest::new(catalog);
        manifest.save(root)?;
        Ok(Store {
            root: root.to_path_buf(),
            manifest,
            indexes: RwLock::default(),
        })
    }

    pub fn open(root: &Path) -> Result<Store, StoreError> {
        Ok(Store {
            root: root.to_path_buf(),
            manifest: Manifest::load(root)?,
            indexes: RwLock::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn catalog(&self) -> &Catalog {
        &self.manifest.catalog
    }

    pub fn set_catalog(&mut self, catalog: Catalog) -> Result<(), StoreError> {
        validate_catalog(&catalog)?;
        if catalog.hash != self.manifest.catalog.hash {
            return Err(StoreError::Catalog("hash configuration is fixed at init".into()));
        }
        self.manifest.catalog = catalog;
        self.manifest.save(&self.root)
    }

    pub fn partition_dir(&self, key: &PartitionKey) -> PathBuf {
        self.root.join(key.kind()).join(key.dir_name())
    }

    pub fn segment_path(&self, key: &PartitionKey, segment: u32) -> PathBuf {
        self.partition_dir(key).join(format!("seg{segment:04}.bsi"))
    }

    /// Writes every block of `p`, then its index, then the manifest.
    pub fn write_partition(&mut self, p: &Partition) -> Result<ManifestEntry, StoreError> {
        let segments = self.catalog().hash.segment_count;
        if let Some(&s) = p.segments.keys().find(|&&s| s >= segments) {
            return Err(StoreError::MissingSegment {
                key: p.key.clone(),
                segment: s,
            });
        }
        let dir = self.partition_dir(&p.key);
        let mut index = String::new();
        let _ = writeln!(index, "version\t{STORE_VERSION}");
        let _ = writeln!(index, "partition\t{}\t{}", p.key.kind(), p.key.dir_name());
        for (&seg, block) in &p.segments {
            let path = self.segment_path(&p.key, seg);
            let bytes = block.encode().map_err(|source| StoreError::Format {
                path: path.clone(),
                source,
            })?;
            write_atomic(&path, &bytes)?;
            let _ = writeln!(index, "segment\t{seg}\t{}\t{:08x}", bytes.len(), crc32fast::hash(&bytes));
        }
        let index = seal(index);
        write_atomic(&dir.join("index.tsv"), index.as_bytes())?;
        let entry = ManifestEntry {
            segments: p.segments.len() as u32,
            index_crc: crc32fast::hash(index.as_bytes()),
        };
        self.manifest.partitions.insert(p.key.clone(), entry);
        self.indexes.write().unwrap().remove(&p.key);
        self.manifest.save(&self.root)?;
        Ok(entry)
    }

    fn index(&self, key: &PartitionKey) -> Result<Arc<PartitionIndex>, StoreError> {
        if let Some(ix) = self.indexes.read().unwrap().get(key) {
            return Ok(ix.clone());
        }
        let entry = self
            .manifest
            .partitions
            .get(key)
            .ok_or_else(|| StoreError::UnknownPartition(key.clone()))?;
        let path = self.partition_dir(key).join("index.tsv");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let computed = crc32fast::hash(text.as_bytes());
        if computed != entry.index_crc {
            return Err(StoreError::ChecksumMismatch {
                path,
                stored: entry.index_crc,
                computed,
            });
        }
        check_version(&path, text.lines().next())?;
        let body = verify_checksum(&path, &text)?;
        let mut segments = BTreeMap::new();
        for (i, line) in body.lines().enumerate().skip(2) {
            let f: Vec<&str> = line.split('\t').collect();
            let parsed = match f.as_slice() {
                ["segment", s, b, c] => s.parse().ok().zip(b.parse().ok()).zip(parse_hex(c)),
                _ => None,
            };
            let ((seg, bytes), crc) = parsed.ok_or_else(|| corrupt(&path, i + 1, "bad segment line"))?;
            segments.insert(seg, IndexEntry { bytes, crc });
        }
        let ix = Arc::new(PartitionIndex { segments });
        self.indexes.write().unwrap().insert(key.clone(), ix.clone());
        Ok(ix)
    }

    /// Reads and verifies one segment block.
    pub fn read_block(&self, key: &PartitionKey, segment: u32) -> Result<SegmentBlock, StoreError> {
        let ix = self.index(key)?;
        let entry = ix.segments.get(&segment).ok_or_else(|| StoreError::MissingSegment {
            key: key.clone(),
            segment,
        })?;
        let path = self.segment_path(key, segment);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::MissingSegment {
                    key: key.clone(),
                    segment,
                })
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        let computed = crc32fast::hash(&bytes);
        if computed != entry.crc || bytes.len() as u64 != entry.bytes {
            return Err(StoreError::ChecksumMismatch {
                path,
                stored: entry.crc,
                computed,
            });
        }
        SegmentBlock::decode(key.kind(), &bytes).map_err(|source| StoreError::Format { path, source })
    }

    /// Reads the given segments, or all of them. Only those block files are
    /// opened.
    pub fn read_partition(&self, key: &PartitionKey, segments: Option<&[u32]>) -> Result<Partition, StoreError> {
        let wanted: Vec<u32> = match segments {
            Some(s) => s.to_vec(),
            None => self.index(key)?.segments.keys().copied().collect(),
        };
        let mut out = BTreeMap::new();
        for s in wanted {
            out.insert(s, self.read_block(key, s)?);
        }
        Ok(Partition {
            key: key.clone(),
            segments: out,
        })
    }

    fn dict_path(&self, segment: u32) -> PathBuf {
        self.root.join("dict").join(format!("seg{segment:04}.ids"))
    }

    pub fn save_encoder(&self, enc: &PositionEncoder) -> Result<(), StoreError> {
        let mut index = String::new();
        let _ = writeln!(index, "version\t{STORE_VERSION}");
        let _ = writeln!(index, "dictionary\t{}", enc.config().segment_count);
        for seg in enc.config().segments() {
            let ids = enc.segment_ids(seg);
            if ids.is_empty() {
                continue;
            }
            let mut bytes = Vec::new();
            bytes.extend_from_slice(DICT_MAGIC);
            bytes.extend_from_slice(&(ids.len() as u32).to_le_bytes());
            for id in ids {
                bytes.extend_from_slice(&(id.len() as u32).to_le_bytes());
                bytes.extend_from_slice(id);
            }
            write_atomic(&self.dict_path(seg), &bytes)?;
            let _ = writeln!(index, "segment\t{seg}\t{}\t{:08x}", bytes.len(), crc32fast::hash(&bytes));
        }
        write_atomic(&self.root.join("dict").join("index.tsv"), seal(index).as_bytes())
    }

    /// Loads the position dictionaries; a fresh encoder when none exist.
    pub fn load_encoder(&self) -> Result<PositionEncoder, StoreError> {
        let config = self.catalog().hash;
        let path = self.root.join("dict").join("index.tsv");
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(PositionEncoder::new(config)),
            Err(e) => return Err(io_err(&path)(e)),
        };
        check_version(&path, text.lines().next())?;
        let body = verify_checksum(&path, &text)?;
        let mut segments: Vec<Vec<Vec<u8>>> = vec![Vec::new(); config.segment_count as usize];
        for (i, line) in body.lines().enumerate().skip(2) {
            let f: Vec<&str> = line.split('\t').collect();
            let parsed = match f.as_slice() {
                ["segment", s, b, c] => s.parse::<u32>().ok().zip(b.parse::<usize>().ok()).zip(parse_hex(c)),
                _ => None,
            };
            let ((seg, len), crc) = parsed.ok_or_else(|| corrupt(&path, i + 1, "bad segment line"))?;
            if seg >= config.segment_count {
                return Err(corrupt(&path, i + 1, "segment beyond segment count"));
            }
            let file = self.dict_path(seg);
            let bytes = fs::read(&file).map_err(io_err(&file))?;
            let computed = crc32fast::hash(&bytes);
            if computed != crc || bytes.len() != len {
                return Err(StoreError::ChecksumMismatch {
                    path: file,
                    stored: crc,
                    computed,
                });
            }
            segments[seg as usize] = decode_dict(&file, &bytes)?;
        }
        PositionEncoder::from_ids(config, segments).map_err(|e| StoreError::Catalog(e.to_string()))
    }
}

fn decode_dict(path: &Path, bytes: &[u8]) -> Result<Vec<Vec<u8>>, StoreError> {
    let bad = || corrupt(path, 0, "malformed dictionary");
    if bytes.len() < 8 || &bytes[..4] != DICT_MAGIC {
        return Err(bad());
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut at = 8;
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        let len_bytes = bytes.get(at..at + 4).ok_or_else(bad)?;
        let len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        at += 4;
        ids.push(bytes.get(at..at + len).ok_or_else(bad)?.to_vec());
        at += len;
    }
    if at != bytes.len() {
        return Err(bad());
    }
    Ok(ids)
}

impl TableSource for Store {
    fn catalog(&self) -> &Catalog {
        &self.manifest.catalog
    }

    fn expose(&self, strategy: StrategyId, segment: u32) -> Result<Cow<'_, ExposeSegment>, EngineError> {
        let key = PartitionKey::Expose(strategy);
        if !self.manifest.partitions.contains_key(&key) {
            return Err(EngineError::UnknownStrategy(strategy));
        }
        match self.read_block(&key, segment)? {
            SegmentBlock::Expose(e) => Ok(Cow::Owned(e)),
            SegmentBlock::Value(_) => Err(EngineError::Storage(format!("{key} holds values"))),
        }
    }

    fn has_metric(&self, metric: MetricId, date: Date) -> bool {
        self.manifest
            .partitions
            .contains_key(&PartitionKey::Metric(metric, date))
    }

    fn metric(&self, metric: MetricId, date: Date, segment: u32) -> Result<Cow<'_, Bsi>, EngineError> {
        self.value(PartitionKey::Metric(metric, date), segment)
    }

    fn has_dimension(&self, name: &str, date: Date) -> bool {
        self.manifest
            .partitions
            .contains_key(&PartitionKey::Dimension(name.into(), date))
    }

    fn dimension(&self, name: &str, date: Date, segment: u32) -> Result<Cow<'_, Bsi>, EngineError> {
        self.value(PartitionKey::Dimension(name.into(), date), segment)
    }
}

impl Store {
    fn value(&self, key: PartitionKey, segment: u32) -> Result<Cow<'_, Bsi>, EngineError> {
        match self.read_block(&key, segment)? {
            SegmentBlock::Value(b) => Ok(Cow::Owned(b)),
            SegmentBlock::Expose(_) => Err(EngineError::Storage(format!("{key} holds exposure"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog() -> Catalog {
        let mut c = Catalog::new(HashConfig::new(3, 16).unwrap());
        c.metrics.insert(MetricId(1), MetricSpec { scale: 10 });
        c.metrics.insert(MetricId(2), MetricSpec { scale: 1 });
        let mut os = DimensionSpec::categorical();
        os.categories = Some(vec!["ios".into(), "android os".into()]);
        c.dimensions.insert("os".into(), os);
        c
    }

    fn metric_partition() -> Partition {
        Partition::values(
            PartitionKey::Metric(MetricId(1), Date(19_000)),
            &[
                Bsi::from_pairs([(0, 5), (3, 70_000)]).unwrap(),
                Bsi::empty(),
                Bsi::from_pairs((0..10_000).map(|p| (p, u64::from(p % 7)))).unwrap(),
            ],
        )
    }

    #[test]
    fn catalog_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        catalog_save(dir.path(), &Catalog::default()).unwrap();
        assert_eq!(catalog_load(dir.path()).unwrap(), Catalog::default());
        catalog_save(dir.path(), &catalog()).unwrap();
        assert_eq!(catalog_load(dir.path()).unwrap(), catalog());
    }

    #[test]
    fn tampered_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        Store::init(dir.path(), catalog()).unwrap();
        let path = Manifest::path(dir.path());
        let text = fs::read_to_string(&path).unwrap().replace("metric\t2\t1", "metric\t2\t10");
        fs::write(&path, text).unwrap();
        assert!(matches!(Store::open(dir.path()), Err(StoreError::ChecksumMismatch { .. })));
    }

    #[test]
    fn version_skew_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        Store::init(dir.path(), catalog()).unwrap();
        let path = Manifest::path(dir.path());
        let text = fs::read_to_string(&path).unwrap().replacen("version\t1", "version\t2", 1);
        fs::write(&path, text).unwrap();
        assert!(matches!(
            Store::open(dir.path()),
            Err(StoreError::VersionSkew { found: 2, expected: 1, .. })
        ));
    }

    #[test]
    fn partition_round_trip_and_subset_read() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::init(dir.path(), catalog()).unwrap();
        let p = metric_partition();
        store.write_partition(&p).unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.read_partition(&p.key, None).unwrap(), p);

        // Delete segment 0; reading only segment 2 must not notice.
        fs::remove_file(store.segment_path(&p.key, 0)).unwrap();
        let sub = store.read_partition(&p.key, Some(&[2])).unwrap();
        assert_eq!(sub.segments[&2], p.segments[&2]);
        assert!(matches!(
            store.read_block(&p.key, 0),
            Err(StoreError::MissingSegment { segment: 0, .. })
        ));
        assert!(matches!(
            store.read_block(&p.key, 7),
            Err(StoreError::MissingSegment { segment: 7, .. })
        ));
    }

    #[test]
    fn corrupted_block_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::init(dir.path(), catalog()).unwrap();
        let p = metric_partition();
        store.write_partition(&p).unwrap();
        let path = store.segment_path(&p.key, 2);
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x10;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(store.read_block(&p.key, 2), Err(StoreError::ChecksumMismatch { .. })));
    }

    #[test]
    fn rewrites_are_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for dir in [&a, &b] {
            let mut store = Store::init(dir.path(), catalog()).unwrap();
            store.write_partition(&metric_partition()).unwrap();
            store.write_partition(&metric_partition()).unwrap();
        }
        let files = ["manifest.tsv", "metric/1_19700101/index.tsv", "metric/1_19700101/seg0002.bsi"];
        let key_dir = PartitionKey::Metric(MetricId(1), Date(19_000)).dir_name();
        for f in files {
            let f = f.replace("1_19700101", &key_dir);
            assert_eq!(
                fs::read(a.path().join(&f)).unwrap(),
                fs::read(b.path().join(&f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn expose_blocks_round_trip() {
        let seg = ExposeSegment {
            min_expose_date: Some(Date(19_001)),
            offset: Bsi::from_pairs([(0, 1), (1, 3)]).unwrap(),
            bucket: Bsi::from_pairs([(0, 16), (1, 2)]).unwrap(),
        };
        for block in [SegmentBlock::Expose(seg), SegmentBlock::Expose(ExposeSegment::default())] {
            let bytes = block.encode().unwrap();
            assert_eq!(SegmentBlock::decode("expose", &bytes).unwrap(), block);
            assert!(SegmentBlock::decode("expose", &bytes[..bytes.len() - 1]).is_err());
        }
    }

    #[test]
    fn encoder_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::init(dir.path(), catalog()).unwrap();
        let mut enc = store.load_encoder().unwrap();
        for i in 0..500 {
            enc.encode_unit(format!("id{i}").as_bytes()).unwrap();
        }
        store.save_encoder(&enc).unwrap();
        let back = store.load_encoder().unwrap();
        for s in 0..3 {
            assert_eq!(back.segment_ids(s), enc.segment_ids(s));
        }
    }

    #[test]
    fn table_source_reports_missing_partitions() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::init(dir.path(), catalog()).unwrap();
        assert_eq!(
            store.metric(MetricId(1), Date(5), 0).unwrap_err(),
            EngineError::MissingPartitions(vec![PartitionKey::Metric(MetricId(1), Date(5))])
        );
        assert_eq!(
            store.expose(StrategyId(4), 0).unwrap_err(),
            EngineError::UnknownStrategy(StrategyId(4))
        );
    }
}
