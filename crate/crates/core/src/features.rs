//! Image records, dense feature banks and convolutional feature-map banks.
//!
//! On-disk layout (all integers little-endian):
//!
//! ```text
//! "POLY1"            5 bytes magic
//! version            u8   (1 = feature vectors, 2 = feature maps)
//! record count       u64
//! dim                u64  (U for vectors, U*H*W for maps)
//! [v2 only] U, H, W  3 x u64
//! per record:
//!   id length        u32
//!   id               UTF-8 bytes
//!   values           dim x f32, row-major (channel, row, column for maps)
//! ```
//!
//! Values are held as `f64` in memory and narrowed to `f32` on write.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 5] = b"POLY1";
pub const VERSION_VECTORS: u8 = 1;
pub const VERSION_MAPS: u8 = 2;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("bad magic: expected POLY1")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("expected a version {expected} bank, found version {found}")]
    WrongKind { expected: u8, found: u8 },
    #[error("stream truncated in header")]
    TruncatedHeader,
    #[error("stream truncated in record {record}")]
    Truncated { record: usize },
    #[error("non-finite value at record {record}, index {index}")]
    NonFinite { record: usize, index: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("record {record} id is not valid UTF-8")]
    InvalidId { record: usize },
    #[error("duplicate image id {0:?}")]
    DuplicateId(String),
    #[error("image id {0:?} not found in bank")]
    MissingId(String),
    #[error("value for {0:?} does not fit in a 32-bit float")]
    ValueOverflow(String),
    #[error("unexpected bytes after the last record")]
    TrailingData,
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("malformed manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("duplicate image id {0:?} in manifest")]
    DuplicateId(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_query: Option<String>,
    /// Ground-truth sense, used for evaluation only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            source_query: None,
            label: None,
        }
    }
}

pub fn load_manifest<R: Read>(source: R) -> Result<Vec<ImageRecord>, ManifestError> {
    let records: Vec<ImageRecord> = serde_json::from_reader(source)?;
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.image_id.as_str()) {
            return Err(ManifestError::DuplicateId(r.image_id.clone()));
        }
    }
    Ok(records)
}

pub fn load_manifest_file(path: &Path) -> Result<Vec<ImageRecord>, ManifestError> {
    load_manifest(BufReader::new(File::open(path)?))
}

pub fn write_manifest<W: Write>(records: &[ImageRecord], sink: W) -> Result<(), ManifestError> {
    serde_json::to_writer_pretty(sink, records)?;
    Ok(())
}

/// Dense feature vectors keyed by image id, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    dim: usize,
    rows: IndexMap<String, Vec<f64>>,
}

impl FeatureBank {
    pub fn new(dim: usize) -> Result<Self, BankError> {
        if dim == 0 {
            return Err(BankError::ZeroDimension);
        }
        Ok(Self {
            dim,
            rows: IndexMap::new(),
        })
    }

    pub fn insert(&mut self, id: impl Into<String>, row: Vec<f64>) -> Result<(), BankError> {
        let id = id.into();
        if row.len() != self.dim {
            return Err(BankError::DimensionMismatch {
                expected: self.dim,
                found: row.len(),
            });
        }
        if let Some(index) = row.iter().position(|v| !v.is_finite()) {
            return Err(BankError::NonFinite {
                record: self.rows.len(),
                index,
            });
        }
        if self.rows.contains_key(&id) {
            return Err(BankError::DuplicateId(id));
        }
        self.rows.insert(id, row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.rows.get(id).map(Vec::as_slice)
    }

    /// Like [`get`](Self::get) but a missing id is an error.
    pub fn resolve(&self, id: &str) -> Result<&[f64], BankError> {
        self.get(id).ok_or_else(|| BankError::MissingId(id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.rows.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }
}

/// One U x H x W activation tensor, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self, BankError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(BankError::ZeroDimension);
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(BankError::DimensionMismatch {
                expected,
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(BankError::NonFinite { record: 0, index });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn at(&self, u: usize, y: usize, x: usize) -> f64 {
        self.data[(u * self.height + y) * self.width + x]
    }

    /// The H x W plane of channel `u`, row-major.
    pub fn channel(&self, u: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[u * plane..(u + 1) * plane]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapBank {
    channels: usize,
    height: usize,
    width: usize,
    maps: IndexMap<String, FeatureMap>,
}

impl FeatureMapBank {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self, BankError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(BankError::ZeroDimension);
        }
        Ok(Self {
            channels,
            height,
            width,
            maps: IndexMap::new(),
        })
    }

    pub fn insert(&mut self, id: impl Into<String>, map: FeatureMap) -> Result<(), BankError> {
        let id = id.into();
        if (map.channels, map.height, map.width) != (self.channels, self.height, self.width) {
            return Err(BankError::DimensionMismatch {
                expected: self.dim(),
                found: map.data.len(),
            });
        }
        if self.maps.contains_key(&id) {
            return Err(BankError::DuplicateId(id));
        }
        self.maps.insert(id, map);
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&FeatureMap> {
        self.maps.get(id)
    }

    pub fn resolve(&self, id: &str) -> Result<&FeatureMap, BankError> {
        self.get(id).ok_or_else(|| BankError::MissingId(id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &FeatureMap)> {
        self.maps.iter().map(|(k, v)| (k.as_str(), v))
    }
}

fn write_header<W: Write>(sink: &mut W, version: u8, count: usize, dim: usize) -> io::Result<usize> {
    sink.write_all(MAGIC)?;
    sink.write_all(&[version])?;
    sink.write_all(&(count as u64).to_le_bytes())?;
    sink.write_all(&(dim as u64).to_le_bytes())?;
    Ok(MAGIC.len() + 1 + 16)
}

fn write_record<W: Write>(sink: &mut W, id: &str, values: &[f64]) -> Result<usize, BankError> {
    let id_bytes = id.as_bytes();
    let id_len = u32::try_from(id_bytes.len()).map_err(|_| BankError::InvalidId { record: 0 })?;
    sink.write_all(&id_len.to_le_bytes())?;
    sink.write_all(id_bytes)?;
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(BankError::ValueOverflow(id.to_string()));
        }
        buf.extend_from_slice(&narrow.to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(4 + id_bytes.len() + buf.len())
}

/// Writes a version-1 bank and returns the number of bytes written.
pub fn write_feature_bank<W: Write>(bank: &FeatureBank, sink: &mut W) -> Result<usize, BankError> {
    let mut written = write_header(sink, VERSION_VECTORS, bank.len(), bank.dim)?;
    for (id, row) in bank.iter() {
        written += write_record(sink, id, row)?;
    }
    sink.flush()?;
    Ok(written)
}

pub fn write_feature_map_bank<W: Write>(bank: &FeatureMapBank, sink: &mut W) -> Result<usize, BankError> {
    let mut written = write_header(sink, VERSION_MAPS, bank.len(), bank.dim())?;
    for extent in [bank.channels, bank.height, bank.width] {
        sink.write_all(&(extent as u64).to_le_bytes())?;
        written += 8;
    }
    for (id, map) in bank.iter() {
        written += write_record(sink, id, map.as_slice())?;
    }
    sink.flush()?;
    Ok(written)
}

struct Header {
    version: u8,
    count: usize,
    dim: usize,
    extents: Option<(usize, usize, usize)>,
}

fn read_exact_or<R: Read>(source: &mut R, buf: &mut [u8], err: impl FnOnce() -> BankError) -> Result<(), BankError> {
    match source.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(err()),
        Err(e) => Err(e.into()),
    }
}

fn read_u64<R: Read>(source: &mut R, err: impl FnOnce() -> BankError) -> Result<u64, BankError> {
    let mut b = [0u8; 8];
    read_exact_or(source, &mut b, err)?;
    Ok(u64::from_le_bytes(b))
}

fn to_usize(v: u64) -> Result<usize, BankError> {
    usize::try_from(v).map_err(|_| BankError::TruncatedHeader)
}

fn read_header<R: Read>(source: &mut R) -> Result<Header, BankError> {
    let mut magic = [0u8; 5];
    match source.read_exact(&mut magic) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(BankError::BadMagic),
        Err(e) => return Err(e.into()),
    }
    if &magic != MAGIC {
        return Err(BankError::BadMagic);
    }
    let mut version = [0u8; 1];
    read_exact_or(source, &mut version, || BankError::TruncatedHeader)?;
    let version = version[0];
    if version != VERSION_VECTORS && version != VERSION_MAPS {
        return Err(BankError::UnsupportedVersion(version));
    }
    let count = to_usize(read_u64(source, || BankError::TruncatedHeader)?)?;
    let dim = to_usize(read_u64(source, || BankError::TruncatedHeader)?)?;
    if dim == 0 {
        return Err(BankError::ZeroDimension);
    }
    let extents = if version == VERSION_MAPS {
        let u = to_usize(read_u64(source, || BankError::TruncatedHeader)?)?;
        let h = to_usize(read_u64(source, || BankError::TruncatedHeader)?)?;
        let w = to_usize(read_u64(source, || BankError::TruncatedHeader)?)?;
        let product = u.checked_mul(h).and_then(|p| p.checked_mul(w)).unwrap_or(0);
        if product != dim {
            return Err(BankError::DimensionMismatch {
                expected: dim,
                found: product,
            });
        }
        Some((u, h, w))
    } else {
        None
    };
    Ok(Header {
        version,
        count,
        dim,
        extents,
    })
}

fn read_records<R: Read>(
    source: &mut R,
    header: &Header,
    mut sink: impl FnMut(String, Vec<f64>) -> Result<(), BankError>,
) -> Result<(), BankError> {
    let mut value_buf = vec![0u8; header.dim * 4];
    for record in 0..header.count {
        let mut len = [0u8; 4];
        read_exact_or(source, &mut len, || BankError::Truncated { record })?;
        let mut id = vec![0u8; u32::from_le_bytes(len) as usize];
        read_exact_or(source, &mut id, || BankError::Truncated { record })?;
        let id = String::from_utf8(id).map_err(|_| BankError::InvalidId { record })?;
        read_exact_or(source, &mut value_buf, || BankError::Truncated { record })?;
        let mut values = Vec::with_capacity(header.dim);
        for (index, chunk) in value_buf.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(BankError::NonFinite { record, index });
            }
            values.push(f64::from(v));
        }
        sink(id, values)?;
    }
    let mut probe = [0u8; 1];
    match source.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(BankError::TrailingData),
    }
}

pub fn read_feature_bank<R: Read>(source: &mut R) -> Result<FeatureBank, BankError> {
    let header = read_header(source)?;
    if header.version != VERSION_VECTORS {
        return Err(BankError::WrongKind {
            expected: VERSION_VECTORS,
            found: header.version,
        });
    }
    let mut bank = FeatureBank::new(header.dim)?;
    read_records(source, &header, |id, values| bank.insert(id, values))?;
    Ok(bank)
}

pub fn read_feature_map_bank<R: Read>(source: &mut R) -> Result<FeatureMapBank, BankError> {
    let header = read_header(source)?;
    let Some((u, h, w)) = header.extents else {
        return Err(BankError::WrongKind {
            expected: VERSION_MAPS,
            found: header.version,
        });
    };
    let mut bank = FeatureMapBank::new(u, h, w)?;
    read_records(source, &header, |id, values| {
        let map = FeatureMap::new(u, h, w, values)?;
        bank.insert(id, map)
    })?;
    Ok(bank)
}

pub fn save_feature_bank(bank: &FeatureBank, path: &Path) -> Result<usize, BankError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_feature_bank(bank, &mut w)
}

pub fn load_feature_bank(path: &Path) -> Result<FeatureBank, BankError> {
    read_feature_bank(&mut BufReader::new(File::open(path)?))
}

pub fn save_feature_map_bank(bank: &FeatureMapBank, path: &Path) -> Result<usize, BankError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_feature_map_bank(bank, &mut w)
}

pub fn load_feature_map_bank(path: &Path) -> Result<FeatureMapBank, BankError> {
    read_feature_map_bank(&mut BufReader::new(File::open(path)?))
}

/// Summary produced by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationSummary {
    pub records: usize,
    pub dim: usize,
    pub manifest_records: usize,
}

/// Checks that every manifest id resolves in the bank.
pub fn validate(bank: &FeatureBank, manifest: &[ImageRecord]) -> Result<ValidationSummary, BankError> {
    for r in manifest {
        bank.resolve(&r.image_id)?;
    }
    Ok(ValidationSummary {
        records: bank.len(),
        dim: bank.dim(),
        manifest_records: manifest.len(),
    })
}
