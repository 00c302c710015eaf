//! RTFD dataset files and their JSON split manifest.
//!
//! ```text
//! "RTFD" | version u16 | count u32 | slice H,W u32 | volume D,H,W u32 | flags u8
//! per record: patient_id (u16 len + UTF-8) | label u8 | 9 x f64 | slice f32s | volume f32s
//! crc32 of all record bytes
//! ```
//!
//! Flag bit 0 marks slices present, bit 1 volumes. Absent modalities are
//! written with zero dims.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use fedrt_core::data::{CentreShard, Partition, StructureRecord, TABULAR_FEATURES};
use fedrt_core::{Tensor, NUM_CLASSES};
use serde::{Deserialize, Serialize};

pub const MAGIC: [u8; 4] = *b"RTFD";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 4 + 5 * 4 + 1;
pub const FLAG_SLICE: u8 = 1;
pub const FLAG_VOLUME: u8 = 2;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("not an RTFD file (magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported RTFD version {0}")]
    Version(u16),
    #[error("file truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type DatasetResult<T> = Result<T, DatasetError>;

/// Header fields shared by every record in a file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub slice_hw: Option<[usize; 2]>,
    pub volume_dhw: Option<[usize; 3]>,
}

impl Layout {
    fn of(records: &[StructureRecord]) -> DatasetResult<Self> {
        let Some(first) = records.first() else {
            return Ok(Layout {
                slice_hw: None,
                volume_dhw: None,
            });
        };
        let layout = Layout {
            slice_hw: first.slice.as_ref().map(|t| dims_of(t.dims())),
            volume_dhw: first.volume.as_ref().map(|t| dims_of(t.dims())),
        };
        for r in records {
            let got = (
                r.slice.as_ref().map(|t| t.dims().to_vec()),
                r.volume.as_ref().map(|t| t.dims().to_vec()),
            );
            let want = (
                layout.slice_hw.map(|d| d.to_vec()),
                layout.volume_dhw.map(|d| d.to_vec()),
            );
            if got != want {
                return Err(DatasetError::Invalid(format!(
                    "record for {} has modality shapes {got:?}, expected {want:?}",
                    r.patient_id
                )));
            }
        }
        Ok(layout)
    }

    fn flags(&self) -> u8 {
        self.slice_hw.map_or(0, |_| FLAG_SLICE) | self.volume_dhw.map_or(0, |_| FLAG_VOLUME)
    }
}

fn dims_of<const N: usize>(d: &[usize]) -> [usize; N] {
    let mut a = [0; N];
    a.copy_from_slice(&d[..N]);
    a
}

pub fn encode_records(records: &[StructureRecord]) -> DatasetResult<Vec<u8>> {
    let layout = Layout::of(records)?;
    let count = u32::try_from(records.len()).map_err(|_| DatasetError::Invalid("too many records".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    let [sh, sw] = layout.slice_hw.unwrap_or([0; 2]);
    let [vd, vh, vw] = layout.volume_dhw.unwrap_or([0; 3]);
    for d in [sh, sw, vd, vh, vw] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(layout.flags());
    let body_start = out.len();
    for r in records {
        if r.label >= NUM_CLASSES || r.label > u8::MAX as usize {
            return Err(DatasetError::Invalid(format!("label {} for {}", r.label, r.patient_id)));
        }
        let id = r.patient_id.as_bytes();
        let len = u16::try_from(id.len()).map_err(|_| DatasetError::Invalid("patient id too long".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id);
        out.push(r.label as u8);
        for v in r.tabular {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in r.slice.iter().chain(&r.volume) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out[body_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_records(bytes: &[u8]) -> DatasetResult<Vec<StructureRecord>> {
    if bytes.len() < 4 {
        return Err(DatasetError::Truncated);
    }
    let magic: [u8; 4] = dims_u8(&bytes[..4]);
    if magic != MAGIC {
        return Err(DatasetError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(DatasetError::Truncated);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(DatasetError::Version(version));
    }
    let u32_at = |i: usize| u32::from_le_bytes(dims_u8(&bytes[i..i + 4])) as usize;
    let count = u32_at(6);
    let d: Vec<usize> = (0..5).map(|k| u32_at(10 + 4 * k)).collect();
    let flags = bytes[30];
    if flags & !(FLAG_SLICE | FLAG_VOLUME) != 0 {
        return Err(DatasetError::Invalid(format!("unknown flag bits {flags:#04x}")));
    }
    let slice_hw = (flags & FLAG_SLICE != 0).then(|| [d[0], d[1]]);
    let volume_dhw = (flags & FLAG_VOLUME != 0).then(|| [d[2], d[3], d[4]]);

    let (body, trailer) = bytes[HEADER_LEN..].split_at(bytes.len() - HEADER_LEN - 4);
    let stored = u32::from_le_bytes(dims_u8(trailer));
    let mut records = Vec::with_capacity(count.min(1 << 16));
    let mut pos = 0usize;
    let mut take = |n: usize| -> DatasetResult<&[u8]> {
        let s = body.get(pos..pos + n).ok_or(DatasetError::Truncated)?;
        pos += n;
        Ok(s)
    };
    let read_f32s = |raw: &[u8]| -> Vec<f32> {
        raw.chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect()
    };
    for _ in 0..count {
        let n = u16::from_le_bytes(dims_u8(take(2)?)) as usize;
        let patient_id = String::from_utf8(take(n)?.to_vec())
            .map_err(|_| DatasetError::Invalid("patient id is not UTF-8".into()))?;
        let label = take(1)?[0] as usize;
        let mut tabular = [0.0; TABULAR_FEATURES];
        for v in &mut tabular {
            *v = f64::from_le_bytes(dims_u8(take(8)?));
        }
        let slice = match slice_hw {
            Some([h, w]) => Some(tensor(vec![h, w], read_f32s(take(4 * h * w)?))?),
            None => None,
        };
        let volume = match volume_dhw {
            Some([dd, h, w]) => Some(tensor(vec![dd, h, w], read_f32s(take(4 * dd * h * w)?))?),
            None => None,
        };
        records.push(StructureRecord {
            patient_id,
            label,
            tabular,
            slice,
            volume,
        });
    }
    let computed = crc32fast::hash(body);
    if pos != body.len() {
        // A bad count or dims can leave bytes over; the checksum tells which.
        if stored != computed {
            return Err(DatasetError::Checksum { stored, computed });
        }
        return Err(DatasetError::Invalid(format!(
            "{} bytes after the last record",
            body.len() - pos
        )));
    }
    if stored != computed {
        return Err(DatasetError::Checksum { stored, computed });
    }
    for r in &records {
        if r.label >= NUM_CLASSES {
            return Err(DatasetError::Invalid(format!("label {} for {}", r.label, r.patient_id)));
        }
    }
    Ok(records)
}

fn dims_u8<const N: usize>(b: &[u8]) -> [u8; N] {
    let mut a = [0u8; N];
    a.copy_from_slice(&b[..N]);
    a
}

fn tensor(dims: Vec<usize>, data: Vec<f32>) -> DatasetResult<Tensor<f32>> {
    Tensor::new(dims, data).map_err(|e| DatasetError::Invalid(e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub centre: Option<String>,
    pub role: Role,
}

/// `patient_id → {centre, role}`.
pub type Manifest = BTreeMap<String, Assignment>;

pub fn manifest_of(p: &Partition) -> Manifest {
    let mut m = Manifest::new();
    for s in &p.shards {
        for (records, role) in [(&s.train, Role::Train), (&s.validation, Role::Validation)] {
            for r in records {
                m.insert(
                    r.patient_id.clone(),
                    Assignment {
                        centre: Some(s.centre_id.clone()),
                        role,
                    },
                );
            }
        }
    }
    for r in &p.test {
        m.insert(
            r.patient_id.clone(),
            Assignment {
                centre: None,
                role: Role::Test,
            },
        );
    }
    m
}

/// Rebuild a partition from records and their manifest. Centres appear in
/// id order; records keep their file order within each group.
pub fn apply_manifest(records: Vec<StructureRecord>, manifest: &Manifest) -> DatasetResult<Partition> {
    let mut shards: BTreeMap<String, CentreShard> = BTreeMap::new();
    let mut test = Vec::new();
    for r in records {
        let a = manifest
            .get(&r.patient_id)
            .ok_or_else(|| DatasetError::Invalid(format!("patient {} missing from manifest", r.patient_id)))?;
        match (a.role, &a.centre) {
            (Role::Test, _) => test.push(r),
            (role, Some(c)) => {
                let shard = shards.entry(c.clone()).or_insert_with(|| CentreShard {
                    centre_id: c.clone(),
                    train: Vec::new(),
                    validation: Vec::new(),
                });
                if role == Role::Train {
                    shard.train.push(r);
                } else {
                    shard.validation.push(r);
                }
            }
            (_, None) => {
                return Err(DatasetError::Invalid(format!(
                    "patient {} has a training role but no centre",
                    r.patient_id
                )))
            }
        }
    }
    Ok(Partition {
        shards: shards.into_values().collect(),
        test,
    })
}

/// Sidecar manifest path: `cohort.rtfd` → `cohort.rtfd.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_dataset(path: &Path, records: &[StructureRecord]) -> DatasetResult<()> {
    fs::write(path, encode_records(records)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> DatasetResult<Vec<StructureRecord>> {
    decode_records(&fs::read(path)?)
}

/// Records grouped by centre (validation then train) followed by the test
/// set, plus the sidecar manifest.
pub fn write_partition(path: &Path, p: &Partition) -> DatasetResult<()> {
    let records: Vec<StructureRecord> = p
        .shards
        .iter()
        .flat_map(|s| s.validation.iter().chain(&s.train))
        .chain(&p.test)
        .cloned()
        .collect();
    write_dataset(path, &records)?;
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest_of(p))?)?;
    Ok(())
}

pub fn read_partition(path: &Path) -> DatasetResult<Partition> {
    let records = read_dataset(path)?;
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
    apply_manifest(records, &manifest)
}
