//! Feature-set file formats.
//!
//! FSLE binary layout, all integers and floats little-endian:
//!
//! ```text
//! offset  size      field
//! 0       4         magic "FSLE" (0x46 0x53 0x4C 0x45)
//! 4       2         u16 version = 1
//! 6       4         u32 n (rows)
//! 10      4         u32 d (columns)
//! 14      1         u8 has_labels (0 or 1)
//! 15      4n        i32 labels, present only if has_labels = 1
//! ...     8nd       f64 features, row-major
//! ```
//!
//! CSV layout: header `label,f0,...,f{d-1}`, one row per example.

use std::fs;
use std::path::Path;

use crate::episodes::FeatureSet;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const FSLE_MAGIC: [u8; 4] = *b"FSLE";
pub const FSLE_VERSION: u16 = 1;
const HEADER_LEN: usize = 15;

/// Raw contents of an FSLE file.
#[derive(Debug, Clone, PartialEq)]
pub struct FsleFile {
    pub features: Matrix,
    pub labels: Option<Vec<i32>>,
}

pub fn write_fsle(file: &FsleFile) -> Result<Vec<u8>> {
    let n = u32::try_from(file.features.nrows())
        .map_err(|_| Error::InvalidInput("too many rows for FSLE".into()))?;
    let d = u32::try_from(file.features.ncols())
        .map_err(|_| Error::InvalidInput("too many columns for FSLE".into()))?;
    if let Some(labels) = &file.labels {
        if labels.len() != n as usize {
            return Err(Error::ShapeError(format!("{} labels for {n} rows", labels.len())));
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n as usize + 8 * (n as usize) * (d as usize));
    out.extend_from_slice(&FSLE_MAGIC);
    out.extend_from_slice(&FSLE_VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    out.push(u8::from(file.labels.is_some()));
    if let Some(labels) = &file.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    for v in file.features.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::FormatError {
                offset: self.bytes.len() as u64,
                message: format!(
                    "truncated while reading {what}: need {len} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            }),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("slice length checked"))
    }
}

pub fn read_fsle(bytes: &[u8]) -> Result<FsleFile> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.array("magic")?;
    if magic != FSLE_MAGIC {
        return Err(Error::FormatError {
            offset: 0,
            message: format!("bad magic {magic:02x?}"),
        });
    }
    let version = u16::from_le_bytes(cur.array("version")?);
    if version != FSLE_VERSION {
        return Err(Error::FormatError {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let n = u32::from_le_bytes(cur.array("row count")?) as usize;
    let d = u32::from_le_bytes(cur.array("column count")?) as usize;
    let has_labels = match cur.array::<1>("label flag")?[0] {
        0 => false,
        1 => true,
        other => {
            return Err(Error::FormatError {
                offset: 14,
                message: format!("label flag must be 0 or 1, got {other}"),
            })
        }
    };
    let labels = if has_labels {
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| overflow(10))?, "labels")?;
        Some(
            raw.chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    } else {
        None
    };
    let count = n.checked_mul(d).and_then(|c| c.checked_mul(8)).ok_or_else(|| overflow(6))?;
    let raw = cur.take(count, "features")?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if cur.pos != bytes.len() {
        return Err(Error::FormatError {
            offset: cur.pos as u64,
            message: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    Ok(FsleFile {
        features: Matrix::from_vec(n, d, data)?,
        labels,
    })
}

fn overflow(offset: u64) -> Error {
    Error::FormatError {
        offset,
        message: "declared size overflows".into(),
    }
}

pub fn write_csv<W: std::io::Write>(set: &FeatureSet, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["label".to_string()];
    header.extend((0..set.dim()).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for (i, row) in set.features.iter_rows().enumerate() {
        let label = match &set.class_names {
            Some(names) => names[set.labels[i]].clone(),
            None => set.labels[i].to_string(),
        };
        let mut record = Vec::with_capacity(row.len() + 1);
        record.push(label);
        // `{:?}` prints the shortest representation that parses back exactly.
        record.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(reader: R, source: &str) -> Result<FeatureSet> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    if header.get(0) != Some("label") {
        return Err(Error::InvalidInput(format!(
            "{source}: first CSV column must be `label`"
        )));
    }
    let d = header.len() - 1;
    let mut raw_labels = Vec::new();
    let mut data = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record?;
        if record.len() != d + 1 {
            return Err(Error::ShapeError(format!(
                "{source}: row {} has {} fields, expected {}",
                line + 1,
                record.len(),
                d + 1
            )));
        }
        raw_labels.push(record[0].to_string());
        for field in record.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::InvalidInput(format!("{source}: row {}: bad number `{field}`", line + 1))
            })?;
            data.push(v);
        }
    }
    let features = Matrix::from_vec(raw_labels.len(), d, data)?;
    let ints: Option<Vec<i64>> = raw_labels.iter().map(|l| l.trim().parse().ok()).collect();
    match ints {
        Some(ints) => FeatureSet::from_raw_labels(features, &ints, source),
        None => {
            let mut names: Vec<String> = raw_labels.clone();
            names.sort();
            names.dedup();
            let labels = raw_labels
                .iter()
                .map(|l| names.binary_search(l).unwrap())
                .collect();
            let mut set = FeatureSet::new(features, labels, source)?;
            set.class_names = Some(names);
            Ok(set)
        }
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Load a labeled feature set; `.csv` files are read as CSV, anything else as FSLE.
pub fn load_feature_set(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let source = path.display().to_string();
    if is_csv(path) {
        return read_csv(fs::File::open(path)?, &source);
    }
    let file = read_fsle(&fs::read(path)?)?;
    let labels = file.labels.ok_or_else(|| Error::FormatError {
        offset: 14,
        message: "file carries no labels".into(),
    })?;
    let raw: Vec<i64> = labels.iter().map(|&l| i64::from(l)).collect();
    FeatureSet::from_raw_labels(file.features, &raw, source)
}

pub fn save_feature_set(set: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_csv(path) {
        return write_csv(set, fs::File::create(path)?);
    }
    let labels = set
        .labels
        .iter()
        .map(|&l| {
            i32::try_from(l).map_err(|_| Error::InvalidLabel(format!("class id {l} exceeds i32")))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = write_fsle(&FsleFile {
        features: set.features.clone(),
        labels: Some(labels),
    })?;
    fs::write(path, bytes)?;
    Ok(())
}
