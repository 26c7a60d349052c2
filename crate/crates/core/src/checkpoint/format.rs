//! The `SMRG` container.
//!
//! ```text
//! offset 0   magic  "SMRG"
//! offset 4   u32 LE version (= 1)
//! offset 8   u32 LE header length H
//! offset 12  H bytes of UTF-8 JSON header
//! offset 12+H tensor payloads in header order, row-major, little-endian
//! ```
//!
//! The header always carries `kind` and the ordered `tensors` table
//! (`name`, `dtype`, `rows`, `cols`); other keys depend on the kind.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::checkpoint::{ArchSpec, Dataset, Meta, ModelCheckpoint, Param};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"SMRG";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    U32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::U32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: Dtype,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    tensors: Vec<TensorEntry>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SectionData {
    F64(Matrix),
    U32 { rows: usize, cols: usize, values: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub data: SectionData,
}

/// A decoded file: its kind, kind-specific header fields and sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub extra: Map<String, Value>,
    pub sections: Vec<Section>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            extra: Map::new(),
            sections: Vec::new(),
        }
    }

    pub fn with_field(mut self, key: &str, value: impl Serialize) -> Self {
        self.extra.insert(
            key.to_string(),
            serde_json::to_value(value).expect("header fields serialize to JSON"),
        );
        self
    }

    pub fn push_f64(&mut self, name: impl Into<String>, m: Matrix) {
        self.sections.push(Section {
            name: name.into(),
            data: SectionData::F64(m),
        });
    }

    pub fn push_u32(&mut self, name: impl Into<String>, values: Vec<u32>) {
        self.sections.push(Section {
            name: name.into(),
            data: SectionData::U32 {
                rows: 1,
                cols: values.len(),
                values,
            },
        });
    }

    /// Checks the kind, or fails pointing at the header.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::format(
                PREAMBLE,
                format!("expected kind `{kind}`, found `{}`", self.kind),
            ));
        }
        Ok(())
    }

    pub fn field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .extra
            .get(key)
            .ok_or_else(|| Error::format(PREAMBLE, format!("header lacks `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::format(PREAMBLE, format!("header field `{key}`: {e}")))
    }

    fn section(&self, name: &str) -> Result<&SectionData> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .map(|s| &s.data)
            .ok_or_else(|| Error::format(PREAMBLE, format!("missing tensor `{name}`")))
    }

    pub fn f64_section(&self, name: &str) -> Result<&Matrix> {
        match self.section(name)? {
            SectionData::F64(m) => Ok(m),
            SectionData::U32 { .. } => Err(Error::format(PREAMBLE, format!("`{name}` is not f64"))),
        }
    }

    pub fn u32_section(&self, name: &str) -> Result<&[u32]> {
        match self.section(name)? {
            SectionData::U32 { values, .. } => Ok(values),
            SectionData::F64(_) => Err(Error::format(PREAMBLE, format!("`{name}` is not u32"))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let tensors = self
            .sections
            .iter()
            .map(|s| {
                let (dtype, rows, cols) = match &s.data {
                    SectionData::F64(m) => (Dtype::F64, m.rows(), m.cols()),
                    SectionData::U32 { rows, cols, .. } => (Dtype::U32, *rows, *cols),
                };
                TensorEntry {
                    name: s.name.clone(),
                    dtype,
                    rows,
                    cols,
                }
            })
            .collect();
        let header = Header {
            kind: self.kind.clone(),
            tensors,
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for s in &self.sections {
            match &s.data {
                SectionData::F64(m) => {
                    for v in m.values() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                SectionData::U32 { values, .. } => {
                    for v in values {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::format(0, "bad magic, expected `SMRG`"));
        }
        if bytes.len() < PREAMBLE {
            return Err(Error::format(bytes.len(), "truncated preamble"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let payload_start = PREAMBLE
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                Error::format(
                    8,
                    format!(
                        "header length {header_len} exceeds the {} bytes after the preamble",
                        bytes.len() - PREAMBLE
                    ),
                )
            })?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..payload_start])
            .map_err(|e| Error::format(PREAMBLE, format!("invalid header JSON: {e}")))?;

        let mut declared = 0usize;
        for t in &header.tensors {
            if t.rows == 0 || t.cols == 0 {
                return Err(Error::format(
                    PREAMBLE,
                    format!("tensor `{}` has an empty shape", t.name),
                ));
            }
            declared = t
                .rows
                .checked_mul(t.cols)
                .and_then(|n| n.checked_mul(t.dtype.width()))
                .and_then(|n| n.checked_add(declared))
                .ok_or_else(|| Error::format(PREAMBLE, "tensor sizes overflow"))?;
        }
        let remaining = bytes.len() - payload_start;
        if declared != remaining {
            return Err(Error::format(
                payload_start,
                format!("header declares {declared} payload bytes, file has {remaining}"),
            ));
        }

        let mut offset = payload_start;
        let mut sections = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n = t.rows * t.cols;
            let data = match t.dtype {
                Dtype::F64 => {
                    let mut values = Vec::with_capacity(n);
                    for i in 0..n {
                        let at = offset + 8 * i;
                        let v = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
                        if !v.is_finite() {
                            return Err(Error::format(at, format!("non-finite value in `{}`", t.name)));
                        }
                        values.push(v);
                    }
                    SectionData::F64(Matrix::new(t.rows, t.cols, values).expect("validated shape"))
                }
                Dtype::U32 => {
                    let values = bytes[offset..offset + 4 * n]
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    SectionData::U32 {
                        rows: t.rows,
                        cols: t.cols,
                        values,
                    }
                }
            };
            offset += n * t.dtype.width();
            sections.push(Section { name: t.name, data });
        }
        Ok(Self {
            kind: header.kind,
            extra: header.extra,
            sections,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

pub fn checkpoint_to_container(ckpt: &ModelCheckpoint) -> Container {
    let mut c = Container::new("checkpoint")
        .with_field("arch", ckpt.arch())
        .with_field("meta", &ckpt.meta);
    for p in ckpt.params() {
        c.push_f64(p.name.clone(), p.tensor.clone());
    }
    c
}

pub fn checkpoint_from_container(c: &Container) -> Result<ModelCheckpoint> {
    c.expect_kind("checkpoint")?;
    let arch: ArchSpec = c.field("arch")?;
    let meta: Meta = c.field("meta")?;
    let params = c
        .sections
        .iter()
        .map(|s| match &s.data {
            SectionData::F64(m) => Ok(Param {
                name: s.name.clone(),
                tensor: m.clone(),
            }),
            SectionData::U32 { .. } => Err(Error::format(PREAMBLE, format!("`{}` is not f64", s.name))),
        })
        .collect::<Result<Vec<_>>>()?;
    ModelCheckpoint::new(arch, params, meta)
        .map_err(|e| Error::format(PREAMBLE, format!("header does not describe a valid checkpoint: {e}")))
}

pub fn dataset_to_container(ds: &Dataset) -> Container {
    let mut c = Container::new("dataset").with_field("num_classes", ds.num_classes());
    c.push_f64("inputs", ds.inputs().clone());
    c.push_u32("labels", ds.labels().iter().map(|&y| y as u32).collect());
    c
}

pub fn dataset_from_container(c: &Container) -> Result<Dataset> {
    c.expect_kind("dataset")?;
    let num_classes: usize = c.field("num_classes")?;
    let inputs = c.f64_section("inputs")?.clone();
    let labels = c.u32_section("labels")?.iter().map(|&y| y as usize).collect();
    Dataset::new(inputs, labels, num_classes).map_err(|e| Error::format(PREAMBLE, e.to_string()))
}

pub fn save(ckpt: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    checkpoint_to_container(ckpt).write(path.as_ref())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    checkpoint_from_container(&Container::read(path.as_ref())?)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    dataset_to_container(ds).write(path.as_ref())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    dataset_from_container(&Container::read(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Role;
    use crate::numerics::seeded;

    fn sample() -> ModelCheckpoint {
        ModelCheckpoint::init("4x6x3".parse().unwrap(), 42)
            .with_role(Role::Task)
            .with_task_id("task2")
    }

    #[test]
    fn roundtrip_bit_exact() {
        let c = sample();
        let bytes = checkpoint_to_container(&c).encode();
        let back = checkpoint_from_container(&Container::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, c);
        let x = Matrix::random_uniform(5, 4, 1.0, &mut seeded(1));
        let a = c.forward(&x).unwrap();
        let b = back.forward(&x).unwrap();
        assert!(a
            .values()
            .iter()
            .zip(b.values())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!(checkpoint_to_container(&back).encode(), bytes);
    }

    #[test]
    fn layout_is_as_documented() {
        let bytes = checkpoint_to_container(&sample()).encode();
        assert_eq!(&bytes[..4], b"SMRG");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: Value = serde_json::from_slice(&bytes[12..12 + h]).unwrap();
        assert_eq!(header["kind"], "checkpoint");
        assert_eq!(header["tensors"][0]["name"], "layer0.weight");
        assert_eq!(header["tensors"][0]["rows"], 6);
        assert_eq!(header["meta"]["role"], "task");
        let first = f64::from_le_bytes(bytes[12 + h..20 + h].try_into().unwrap());
        assert_eq!(first, sample().weight(0)[(0, 0)]);
    }

    #[test]
    fn bad_magic_at_offset_zero() {
        let mut bytes = checkpoint_to_container(&sample()).encode();
        bytes[0] = b'X';
        match Container::decode(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_version() {
        let mut bytes = checkpoint_to_container(&sample()).encode();
        bytes[4] = 2;
        assert!(matches!(
            Container::decode(&bytes),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn payload_length_mismatch() {
        let bytes = checkpoint_to_container(&sample()).encode();
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        for cut in [bytes.len() - 1, bytes.len() - 8] {
            match Container::decode(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert_eq!(offset, 12 + h),
                other => panic!("{other:?}"),
            }
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Container::decode(&longer).is_err());
        assert!(Container::decode(&bytes[..20]).is_err());
    }

    #[test]
    fn wrong_kind() {
        let ds = Dataset::new(Matrix::zeros(2, 2), vec![0, 1], 2).unwrap();
        let c = dataset_to_container(&ds);
        assert!(matches!(checkpoint_from_container(&c), Err(Error::Format { .. })));
        assert_eq!(dataset_from_container(&c).unwrap(), ds);
    }
}
