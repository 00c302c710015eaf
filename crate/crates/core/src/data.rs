//! Structure records, patient-level partitioning into centres, per-class
//! ablation and tabular feature standardisation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::NUM_CLASSES;

pub const TABULAR_FEATURES: usize = 9;

/// One contoured structure: its class label and three feature modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureRecord {
    pub patient_id: String,
    pub label: usize,
    /// Centroid x/y/z (mm), bounding-box extents x/y/z (mm), voxel count,
    /// physical volume (mm³), mean HU.
    pub tabular: [f64; TABULAR_FEATURES],
    /// Central axial slice, `H×W`, values in `[0, 1]`.
    pub slice: Option<Tensor<f32>>,
    /// Masked volume, `D×H×W`, values in `[0, 1]`.
    pub volume: Option<Tensor<f32>>,
}

impl StructureRecord {
    pub fn validate(&self) -> Result<()> {
        if self.label >= NUM_CLASSES {
            return Err(Error::Label {
                label: self.label,
                classes: NUM_CLASSES,
            });
        }
        if self.tabular.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "non-finite tabular feature for patient {}",
                self.patient_id
            )));
        }
        for t in self.slice.iter().chain(self.volume.iter()) {
            if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config(format!(
                    "image values outside [0,1] for patient {}",
                    self.patient_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CentreShard {
    pub centre_id: String,
    pub train: Vec<StructureRecord>,
    pub validation: Vec<StructureRecord>,
}

impl CentreShard {
    pub fn patients(&self) -> BTreeSet<&str> {
        self.train
            .iter()
            .chain(&self.validation)
            .map(|r| r.patient_id.as_str())
            .collect()
    }
}

pub fn centre_id(index: usize) -> String {
    format!("centre-{index:02}")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionConfig {
    pub n_centres: usize,
    pub holdout_patients: usize,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            n_centres: 3,
            holdout_patients: 50,
            val_frac: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub shards: Vec<CentreShard>,
    pub test: Vec<StructureRecord>,
}

/// Split records by patient: the last `holdout_patients` ids (sorted order)
/// form the test set; the rest are shuffled and dealt round-robin to centres,
/// and within each centre the first `ceil(val_frac·patients)` become
/// validation patients.
pub fn partition(records: &[StructureRecord], cfg: &PartitionConfig) -> Result<Partition> {
    if cfg.n_centres == 0 {
        return Err(Error::Config("at least one centre is required".into()));
    }
    if !(0.0..1.0).contains(&cfg.val_frac) {
        return Err(Error::Config(format!(
            "val_frac must lie in [0,1), got {}",
            cfg.val_frac
        )));
    }
    let mut by_patient: BTreeMap<&str, Vec<&StructureRecord>> = BTreeMap::new();
    for r in records {
        by_patient.entry(r.patient_id.as_str()).or_default().push(r);
    }
    let ids: Vec<&str> = by_patient.keys().copied().collect();
    if ids.len() < cfg.holdout_patients + cfg.n_centres {
        return Err(Error::Config(format!(
            "{} patients cannot cover {} hold-out patients and {} centres",
            ids.len(),
            cfg.holdout_patients,
            cfg.n_centres
        )));
    }
    let (dev, test_ids) = ids.split_at(ids.len() - cfg.holdout_patients);
    let mut dev = dev.to_vec();
    dev.shuffle(&mut rng::rng(rng::derive(cfg.seed, 0x7061_7274)));

    let mut dealt: Vec<Vec<&str>> = (0..cfg.n_centres).map(|_| Vec::new()).collect();
    for (i, id) in dev.into_iter().enumerate() {
        dealt[i % cfg.n_centres].push(id);
    }
    let gather = |ids: &[&str]| -> Vec<StructureRecord> {
        ids.iter()
            .flat_map(|id| by_patient[id].iter().map(|&r| r.clone()))
            .collect()
    };
    let shards = dealt
        .iter()
        .enumerate()
        .map(|(c, patients)| {
            let n_val = ceil_frac(cfg.val_frac, patients.len());
            CentreShard {
                centre_id: centre_id(c),
                validation: gather(&patients[..n_val]),
                train: gather(&patients[n_val..]),
            }
        })
        .collect();
    Ok(Partition {
        shards,
        test: gather(test_ids),
    })
}

/// `ceil(frac·n)` with a guard against representation error (0.1·30 must be 3).
fn ceil_frac(frac: f64, n: usize) -> usize {
    let x = frac * n as f64;
    let r = num_traits::Float::round(x);
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        num_traits::Float::ceil(x) as usize
    }
}

/// Keep `ceil(fraction·count)` seed-chosen training records per class;
/// validation is untouched and original record order is preserved.
pub fn ablate(shard: &CentreShard, fraction: f64, seed: u64) -> Result<CentreShard> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "ablation fraction must lie in (0,1], got {fraction}"
        )));
    }
    if fraction == 1.0 {
        return Ok(shard.clone());
    }
    let mut keep = alloc::vec![false; shard.train.len()];
    for class in 0..NUM_CLASSES {
        let mut idx: Vec<usize> = shard
            .train
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == class)
            .map(|(i, _)| i)
            .collect();
        let n = ceil_frac(fraction, idx.len());
        idx.shuffle(&mut rng::rng(rng::derive(seed, class as u64)));
        for &i in &idx[..n] {
            keep[i] = true;
        }
    }
    Ok(CentreShard {
        centre_id: shard.centre_id.clone(),
        train: shard
            .train
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(r, _)| r.clone())
            .collect(),
        validation: shard.validation.clone(),
    })
}

/// Per-feature z-scoring of tabular features.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: [f64; TABULAR_FEATURES],
    pub std: [f64; TABULAR_FEATURES],
}

impl Standardizer {
    pub fn fit<'a>(records: impl IntoIterator<Item = &'a StructureRecord>) -> Result<Self> {
        let rows: Vec<&[f64; TABULAR_FEATURES]> = records.into_iter().map(|r| &r.tabular).collect();
        if rows.is_empty() {
            return Err(Error::Empty("standardizer fit"));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; TABULAR_FEATURES];
        let mut std = [0.0; TABULAR_FEATURES];
        for f in 0..TABULAR_FEATURES {
            mean[f] = rows.iter().map(|r| r[f]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[f] - mean[f]) * (r[f] - mean[f])).sum::<f64>() / n;
            let s = num_traits::Float::sqrt(var);
            std[f] = if s > 1e-12 { s } else { 1.0 };
        }
        Ok(Standardizer { mean, std })
    }

    /// Fit on every centre's training and validation records, never the test set.
    pub fn fit_partition(p: &Partition) -> Result<Self> {
        Self::fit(p.shards.iter().flat_map(|s| s.train.iter().chain(&s.validation)))
    }

    pub fn apply(&self, r: &mut StructureRecord) {
        for f in 0..TABULAR_FEATURES {
            r.tabular[f] = (r.tabular[f] - self.mean[f]) / self.std[f];
        }
    }

    pub fn apply_partition(&self, p: &mut Partition) {
        for s in &mut p.shards {
            for r in s.train.iter_mut().chain(s.validation.iter_mut()) {
                self.apply(r);
            }
        }
        for r in &mut p.test {
            self.apply(r);
        }
    }
}

/// Per-class record counts.
pub fn class_counts(records: &[StructureRecord]) -> [usize; NUM_CLASSES] {
    let mut c = [0; NUM_CLASSES];
    for r in records {
        c[r.label] += 1;
    }
    c
}
