//! Read-only statistics for stored BSIs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use bsimetrics_core::bitmap::ContainerKind;
use bsimetrics_core::Bsi;

use crate::store::{Manifest, SegmentBlock, StoreError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SliceStats {
    pub cardinality: u64,
    pub array_containers: u32,
    pub bitset_containers: u32,
    pub bytes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BsiStats {
    pub slices: Vec<SliceStats>,
    pub count: u64,
    pub sum: u128,
    pub bytes: usize,
}

impl BsiStats {
    pub fn of(b: &Bsi) -> BsiStats {
        let slices = b
            .slices()
            .iter()
            .map(|s| {
                let mut st = SliceStats {
                    cardinality: s.len(),
                    bytes: s.serialized_len(),
                    ..SliceStats::default()
                };
                for (_, c) in s.containers() {
                    match c.kind() {
                        ContainerKind::Array => st.array_containers += 1,
                        ContainerKind::Bitset => st.bitset_containers += 1,
                    }
                }
                st
            })
            .collect();
        BsiStats {
            slices,
            count: b.count(),
            sum: b.sum(),
            bytes: b.serialized_len(),
        }
    }

    /// `sum(2^i * |slice_i|)`, which must equal the BSI's sum.
    pub fn weighted_cardinality(&self) -> u128 {
        self.slices
            .iter()
            .enumerate()
            .map(|(i, s)| u128::from(s.cardinality) << i)
            .sum()
    }
}

fn render(out: &mut String, label: &str, st: &BsiStats) {
    let _ = writeln!(
        out,
        "{label}\tslices={}\tcount={}\tsum={}\tbytes={}",
        st.slices.len(),
        st.count,
        st.sum,
        st.bytes
    );
    for (i, s) in st.slices.iter().enumerate() {
        let _ = writeln!(
            out,
            "  slice {i}\tcard={}\tarray={}\tbitset={}\tbytes={}",
            s.cardinality, s.array_containers, s.bitset_containers, s.bytes
        );
    }
}

fn render_block(out: &mut String, label: &str, block: &SegmentBlock) {
    match block {
        SegmentBlock::Value(b) => render(out, label, &BsiStats::of(b)),
        SegmentBlock::Expose(e) => {
            let min = e.min_expose_date.map_or("-".to_string(), |d| d.to_string());
            let _ = writeln!(out, "{label}\tmin_expose_date={min}");
            render(out, &format!("{label} offset"), &BsiStats::of(&e.offset));
            render(out, &format!("{label} bucket"), &BsiStats::of(&e.bucket));
        }
    }
}

fn read_crc_checked(file: &Path) -> Result<(String, SegmentBlock), StoreError> {
    let io = |e| StoreError::Io {
        path: file.to_path_buf(),
        source: e,
    };
    let dir = file.parent().unwrap_or(Path::new("."));
    let name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let kind = dir
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_string();
    let segment: u32 = name
        .strip_prefix("seg")
        .and_then(|n| n.strip_suffix(".bsi"))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| StoreError::Corrupt {
            path: file.to_path_buf(),
            line: 0,
            reason: "expected a seg<NNNN>.bsi file".into(),
        })?;
    let bytes = fs::read(file).map_err(io)?;
    let index_path = dir.join("index.tsv");
    let index = fs::read_to_string(&index_path).map_err(|e| StoreError::Io {
        path: index_path.clone(),
        source: e,
    })?;
    let stored = index
        .lines()
        .filter_map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f.len() == 4 && f[0] == "segment" && f[1].parse() == Ok(segment))
                .then(|| u32::from_str_radix(f[3], 16).ok())
                .flatten()
        })
        .next()
        .ok_or_else(|| StoreError::Corrupt {
            path: index_path,
            line: 0,
            reason: format!("no entry for segment {segment}"),
        })?;
    let computed = crc32fast::hash(&bytes);
    if stored != computed {
        return Err(StoreError::ChecksumMismatch {
            path: file.to_path_buf(),
            stored,
            computed,
        });
    }
    let block = SegmentBlock::decode(&kind, &bytes).map_err(|source| StoreError::Format {
        path: file.to_path_buf(),
        source,
    })?;
    Ok((format!("segment {segment}"), block))
}

/// Describes a store root, a partition directory or one segment file.
pub fn inspect(path: &Path) -> Result<String, StoreError> {
    let mut out = String::new();
    if path.is_file() {
        let (label, block) = read_crc_checked(path)?;
        render_block(&mut out, &label, &block);
        return Ok(out);
    }
    if path.join("manifest.tsv").is_file() {
        let m = Manifest::load(path)?;
        let h = m.catalog.hash;
        let _ = writeln!(
            out,
            "segments={}\tbuckets={}\tbucket_salt={}\tshared={}",
            h.segment_count, h.bucket_count, h.bucket_salt, h.shared
        );
        for (id, spec) in &m.catalog.metrics {
            let _ = writeln!(out, "metric {id}\tscale={}", spec.scale);
        }
        for (name, spec) in &m.catalog.dimensions {
            match &spec.categories {
                Some(c) => {
                    let _ = writeln!(out, "dimension {name}\tcategorical\tcategories={}", c.len());
                }
                None => {
                    let _ = writeln!(out, "dimension {name}\tnumeric\tscale={}", spec.scale);
                }
            }
        }
        for (key, e) in &m.partitions {
            let _ = writeln!(out, "partition {key}\tsegments={}", e.segments);
        }
        return Ok(out);
    }
    let mut files: Vec<_> = fs::read_dir(path)
        .map_err(|e| StoreError::Io {
            path: path.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bsi"))
        .collect();
    files.sort();
    for f in files {
        let (label, block) = read_crc_checked(&f)?;
        render_block(&mut out, &label, &block);
    }
    Ok(out)
}
