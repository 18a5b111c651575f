//! Binary dataset container for quantized triangle soups.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "PDDS" (4 bytes)
//! u16     version = 1
//! u8      bits
//! u16     max_faces
//! u16     class count
//! per class: u16 name length, UTF-8 name bytes
//! u32     record count
//! per record:
//!   u16   class id
//!   u16   face count m
//!   m × 9 categories, one byte each when bits <= 8, else u16 words
//! ```

use crate::mesh::MeshError;
use crate::soup::{QuantFace, QuantizedTriangleSoup};
use thiserror::Error;

pub const DATASET_MAGIC: &[u8; 4] = b"PDDS";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("bad dataset file at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid record: {0}")]
    Record(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub bits: u8,
    pub max_faces: u16,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub class_id: u16,
    pub faces: Vec<QuantFace>,
}

impl DatasetRecord {
    /// Expands the record into a padded soup.
    pub fn to_soup(&self, header: &DatasetHeader) -> Result<QuantizedTriangleSoup, MeshError> {
        QuantizedTriangleSoup::new(
            self.faces.clone(),
            header.bits,
            self.class_id as u32,
            header.max_faces as usize,
        )
    }

    pub fn from_soup(soup: &QuantizedTriangleSoup) -> Self {
        DatasetRecord {
            class_id: soup.class_label as u16,
            faces: soup.real_faces().copied().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    pub records: Vec<DatasetRecord>,
}

impl DatasetFile {
    pub fn new(header: DatasetHeader, records: Vec<DatasetRecord>) -> Result<Self, DatasetError> {
        let file = DatasetFile { header, records };
        file.validate()?;
        Ok(file)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let limit = 1u32 << self.header.bits;
        for (i, r) in self.records.iter().enumerate() {
            if r.faces.len() > self.header.max_faces as usize {
                return Err(DatasetError::Record(format!(
                    "record {i}: {} faces exceed max_faces {}",
                    r.faces.len(),
                    self.header.max_faces
                )));
            }
            if (r.class_id as usize) >= self.header.class_names.len() {
                return Err(DatasetError::Record(format!(
                    "record {i}: class id {} out of range",
                    r.class_id
                )));
            }
            for f in &r.faces {
                for v in f {
                    for &c in v {
                        if (c as u32) >= limit {
                            return Err(DatasetError::Record(format!(
                                "record {i}: category {c} out of range for {} bits",
                                self.header.bits
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.push(self.header.bits);
        out.extend_from_slice(&self.header.max_faces.to_le_bytes());
        out.extend_from_slice(&(self.header.class_names.len() as u16).to_le_bytes());
        for name in &self.header.class_names {
            let bytes = name.as_bytes();
            out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(bytes);
        }
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        let wide = self.header.bits > 8;
        for r in &self.records {
            out.extend_from_slice(&r.class_id.to_le_bytes());
            out.extend_from_slice(&(r.faces.len() as u16).to_le_bytes());
            for f in &r.faces {
                for v in f {
                    for &c in v {
                        if wide {
                            out.extend_from_slice(&c.to_le_bytes());
                        } else {
                            out.push(c as u8);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let mut r = Reader { bytes, offset: 0 };
        let magic = r.take(4, "magic")?;
        if magic != DATASET_MAGIC {
            return Err(DatasetError::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected {DATASET_MAGIC:?}"),
            });
        }
        let version = r.u16("version")?;
        if version != DATASET_VERSION {
            return Err(DatasetError::Format {
                offset: r.offset - 2,
                message: format!("unsupported version {version}"),
            });
        }
        let bits = r.u8("bits")?;
        if bits == 0 || bits > 16 {
            return Err(DatasetError::Format {
                offset: r.offset - 1,
                message: format!("invalid bit depth {bits}"),
            });
        }
        let max_faces = r.u16("max_faces")?;
        let class_count = r.u16("class count")?;
        let mut class_names = Vec::with_capacity(class_count as usize);
        for _ in 0..class_count {
            let len = r.u16("class name length")? as usize;
            let raw = r.take(len, "class name")?;
            let name = std::str::from_utf8(raw)
                .map_err(|_| DatasetError::Format {
                    offset: r.offset - len,
                    message: "class name is not UTF-8".into(),
                })?
                .to_string();
            class_names.push(name);
        }
        let record_count = r.u32("record count")?;
        let wide = bits > 8;
        let mut records = Vec::with_capacity(record_count as usize);
        for _ in 0..record_count {
            let class_id = r.u16("record class id")?;
            let m = r.u16("record face count")? as usize;
            let mut faces = Vec::with_capacity(m);
            for _ in 0..m {
                let mut face: QuantFace = [[0; 3]; 3];
                for v in &mut face {
                    for c in v.iter_mut() {
                        *c = if wide {
                            r.u16("category")?
                        } else {
                            r.u8("category")? as u16
                        };
                    }
                }
                faces.push(face);
            }
            records.push(DatasetRecord { class_id, faces });
        }
        if r.offset != bytes.len() {
            return Err(DatasetError::Format {
                offset: r.offset,
                message: format!("{} trailing bytes", bytes.len() - r.offset),
            });
        }
        let file = DatasetFile {
            header: DatasetHeader {
                bits,
                max_faces,
                class_names,
            },
            records,
        };
        file.validate()?;
        Ok(file)
    }

    pub fn write_to(&self, path: &std::path::Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: &std::path::Path) -> Result<Self, DatasetError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Records per class, indexed by class id.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.header.class_names.len()];
        for r in &self.records {
            counts[r.class_id as usize] += 1;
        }
        counts
    }

    /// Face-count frequencies per class: `hist[class][face_count] = freq`.
    pub fn face_count_histogram(&self) -> Vec<std::collections::BTreeMap<u16, u32>> {
        let mut hist = vec![std::collections::BTreeMap::new(); self.header.class_names.len()];
        for r in &self.records {
            *hist[r.class_id as usize].entry(r.faces.len() as u16).or_insert(0) += 1;
        }
        hist
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DatasetError> {
        if self.offset + n > self.bytes.len() {
            return Err(DatasetError::Format {
                offset: self.offset,
                message: format!("truncated while reading {what}"),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8, DatasetError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, DatasetError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, DatasetError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
