//! Synthetic thoracic CT phantoms, feature extraction and resampling.
//!
//! Axes are `z` (slice, cranio-caudal), `y` (row, anterior at low y) and `x`
//! (column). The patient's left lies at low x, so the left lung's centroid
//! sits left of the midline in x.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::data::{StructureRecord, TABULAR_FEATURES};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::NUM_CLASSES;

pub const HU_MIN: f32 = -1000.0;
pub const HU_MAX: f32 = 1000.0;

pub const GTV: usize = 0;
pub const SPINAL_CORD: usize = 1;
pub const ESOPHAGUS: usize = 2;
pub const LUNG_LEFT: usize = 3;
pub const LUNG_RIGHT: usize = 4;
pub const HEART: usize = 5;
pub const LUNGS_TOTAL: usize = 6;

/// Probability that a phantom carries each class's contour, from the
/// per-class sample counts over 422 patients.
pub const INCLUSION: [f64; NUM_CLASSES] = [
    421.0 / 422.0,
    411.0 / 422.0,
    355.0 / 422.0,
    312.0 / 422.0,
    312.0 / 422.0,
    127.0 / 422.0,
    97.0 / 422.0,
];

/// Binary voxel mask on a `D×H×W` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(dims: [usize; 3]) -> Self {
        Mask {
            dims,
            data: vec![false; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize) {
        let [_, h, w] = self.dims;
        self.data[(z * h + y) * w + x] = true;
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        let [_, h, w] = self.dims;
        self.data[(z * h + y) * w + x]
    }

    fn voxels(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let [_, h, w] = self.dims;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / (h * w), (i / w) % h, i % w))
    }
}

/// Physical placement of a voxel grid: `origin` is the position (mm) of
/// voxel `(0,0,0)`, `spacing` the voxel size; both in `(x, y, z)` order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            origin: [0.0; 3],
            spacing: [1.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub patient_id: String,
    /// `D×H×W` Hounsfield-unit-like values.
    pub ct: Tensor<f32>,
    pub geometry: Geometry,
    /// Contours present for this patient, keyed by class index.
    pub masks: Vec<(usize, Mask)>,
}

impl Phantom {
    pub fn mask(&self, class: usize) -> Option<&Mask> {
        self.masks.iter().find(|(c, _)| *c == class).map(|(_, m)| m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomConfig {
    /// Grid `D×H×W`.
    pub dims: [usize; 3],
    /// Voxel size `(x, y, z)` in mm.
    pub spacing: [f64; 3],
    /// Relative jitter applied to sizes and positions.
    pub jitter: f64,
    /// Standard deviation of additive HU noise.
    pub noise_hu: f64,
    /// Maximum per-patient shift of the image origin (mm, each axis).
    pub origin_shift_mm: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [32, 48, 48],
            spacing: [8.0, 8.0, 8.0],
            jitter: 0.15,
            noise_hu: 15.0,
            origin_shift_mm: 20.0,
        }
    }
}

struct Ellipsoid {
    c: [f64; 3],
    r: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let dz = (z - self.c[0]) / self.r[0];
        let dy = (y - self.c[1]) / self.r[1];
        let dx = (x - self.c[2]) / self.r[2];
        dz * dz + dy * dy + dx * dx <= 1.0
    }
}

/// Axial tube: elliptical cross-section around `(y, x)` spanning `z0..=z1`.
struct Tube {
    y: f64,
    x: f64,
    ry: f64,
    rx: f64,
    z0: f64,
    z1: f64,
}

impl Tube {
    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let dy = (y - self.y) / self.ry;
        let dx = (x - self.x) / self.rx;
        z >= self.z0 && z <= self.z1 && dy * dy + dx * dx <= 1.0
    }
}

const BODY: u8 = 1;
const BONE: u8 = 2;
const STRUCT_BASE: u8 = 10;

/// Deterministic phantom for `patient_seed`.
pub fn generate_phantom(patient_id: &str, patient_seed: u64, cfg: &PhantomConfig) -> Phantom {
    let mut r = rng::rng(patient_seed);
    let [d, h, w] = cfg.dims;
    let (df, hf, wf) = (d as f64, h as f64, w as f64);
    let j = cfg.jitter;
    let jit = |r: &mut rng::Rng| 1.0 + r.random_range(-j..=j);
    let (cz, cy, cx) = (df / 2.0 - 0.5, hf / 2.0 - 0.5, wf / 2.0 - 0.5);

    let body = Tube {
        y: cy,
        x: cx,
        ry: 0.34 * hf * jit(&mut r),
        rx: 0.44 * wf * jit(&mut r),
        z0: -1.0,
        z1: df,
    };
    let lung_dx = 0.2 * wf * jit(&mut r);
    let lung_c = |r: &mut rng::Rng, side: f64| Ellipsoid {
        c: [cz + 0.06 * df * jit(r), cy - 0.04 * hf * jit(r), cx + side * lung_dx],
        r: [0.36 * df * jit(r), 0.2 * hf * jit(r), 0.13 * wf * jit(r)],
    };
    let lung_left = lung_c(&mut r, -1.0);
    let lung_right = lung_c(&mut r, 1.0);
    let heart = Ellipsoid {
        c: [
            cz - 0.22 * df * jit(&mut r),
            cy - 0.12 * hf * jit(&mut r),
            cx + 0.05 * wf * jit(&mut r),
        ],
        r: [
            0.17 * df * jit(&mut r),
            0.11 * hf * jit(&mut r),
            0.12 * wf * jit(&mut r),
        ],
    };
    let cord_r = 0.025 * wf * jit(&mut r);
    let cord = Tube {
        y: cy + 0.22 * hf * jit(&mut r),
        x: cx,
        ry: cord_r,
        rx: cord_r,
        z0: -1.0,
        z1: df,
    };
    let vertebra = Tube {
        y: cord.y,
        x: cx,
        ry: 2.6 * cord_r,
        rx: 2.6 * cord_r,
        z0: -1.0,
        z1: df,
    };
    let eso_r = 0.03 * wf * jit(&mut r);
    let esophagus = Tube {
        y: cy + 0.1 * hf * jit(&mut r),
        x: cx - 0.02 * wf * jit(&mut r),
        ry: eso_r,
        rx: eso_r,
        z0: 0.1 * df * jit(&mut r),
        z1: 0.9 * df,
    };
    let host = if r.random_bool(0.5) { &lung_left } else { &lung_right };
    let gtv_r = r.random_range(0.05..0.09) * wf;
    let off = |r: &mut rng::Rng, k: usize| r.random_range(-0.35..0.35) * host.r[k];
    let gtv = Ellipsoid {
        c: [
            host.c[0] + off(&mut r, 0),
            host.c[1] + off(&mut r, 1),
            host.c[2] + off(&mut r, 2),
        ],
        r: [gtv_r, gtv_r, gtv_r],
    };

    // Paint order decides ownership of overlapping voxels.
    let n = d * h * w;
    let mut labels = vec![0u8; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (zf, yf, xf) = (z as f64, y as f64, x as f64);
                let mut l = 0u8;
                if body.contains(zf, yf, xf) {
                    l = BODY;
                }
                if lung_left.contains(zf, yf, xf) {
                    l = STRUCT_BASE + LUNG_LEFT as u8;
                }
                if lung_right.contains(zf, yf, xf) {
                    l = STRUCT_BASE + LUNG_RIGHT as u8;
                }
                if heart.contains(zf, yf, xf) {
                    l = STRUCT_BASE + HEART as u8;
                }
                if vertebra.contains(zf, yf, xf) {
                    l = BONE;
                }
                if cord.contains(zf, yf, xf) {
                    l = STRUCT_BASE + SPINAL_CORD as u8;
                }
                if esophagus.contains(zf, yf, xf) {
                    l = STRUCT_BASE + ESOPHAGUS as u8;
                }
                if gtv.contains(zf, yf, xf) {
                    l = STRUCT_BASE + GTV as u8;
                }
                labels[(z * h + y) * w + x] = l;
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise_hu.max(0.0)).expect("finite noise sd");
    let hu = |l: u8| -> f64 {
        match l {
            0 => -1000.0,
            BODY => 40.0,
            BONE => 700.0,
            _ => match (l - STRUCT_BASE) as usize {
                GTV => 50.0,
                SPINAL_CORD => 35.0,
                ESOPHAGUS => 10.0,
                LUNG_LEFT | LUNG_RIGHT => -700.0,
                HEART => 45.0,
                _ => 0.0,
            },
        }
    };
    let ct_data: Vec<f32> = labels.iter().map(|&l| (hu(l) + noise.sample(&mut r)) as f32).collect();
    let ct = Tensor::new(vec![d, h, w], ct_data).expect("grid dims are positive");

    let shift = cfg.origin_shift_mm;
    let mut origin = [0.0; 3];
    for (a, o) in origin.iter_mut().enumerate() {
        let extent = cfg.dims[2 - a] as f64 * cfg.spacing[a];
        *o = -extent / 2.0
            + if shift > 0.0 {
                r.random_range(-shift..=shift)
            } else {
                0.0
            };
    }

    let mut masks = Vec::new();
    for class in 0..NUM_CLASSES {
        let present = r.random_bool(INCLUSION[class]);
        if !present {
            continue;
        }
        let mut m = Mask::empty(cfg.dims);
        for (i, &l) in labels.iter().enumerate() {
            let hit = if class == LUNGS_TOTAL {
                l == STRUCT_BASE + LUNG_LEFT as u8 || l == STRUCT_BASE + LUNG_RIGHT as u8
            } else {
                l == STRUCT_BASE + class as u8
            };
            m.data[i] = hit;
        }
        if !m.is_empty() {
            masks.push((class, m));
        }
    }

    Phantom {
        patient_id: patient_id.into(),
        ct,
        geometry: Geometry {
            origin,
            spacing: cfg.spacing,
        },
        masks,
    }
}

/// Clip to `[HU_MIN, HU_MAX]` and map linearly onto `[0, 1]`.
pub fn window_hu(v: f32) -> f32 {
    (v.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)
}

fn check_mask(mask: &Mask, ct: &Tensor<f32>) -> Result<()> {
    if ct.dims() != mask.dims {
        return Err(Error::shape("mask vs ct", &mask.dims, ct.dims()));
    }
    if mask.is_empty() {
        return Err(Error::Empty("mask"));
    }
    Ok(())
}

/// Nine position/size features: centroid x,y,z (mm), extents x,y,z (mm),
/// voxel count, physical volume (mm³), mean HU inside the mask.
pub fn extract_tabular(mask: &Mask, ct: &Tensor<f32>, geom: &Geometry) -> Result<[f64; TABULAR_FEATURES]> {
    check_mask(mask, ct)?;
    let mut sum = [0.0f64; 3];
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut hu = 0.0f64;
    let mut count = 0usize;
    let [_, h, w] = mask.dims;
    for (z, y, x) in mask.voxels() {
        let idx = [x, y, z];
        for a in 0..3 {
            sum[a] += idx[a] as f64;
            lo[a] = lo[a].min(idx[a]);
            hi[a] = hi[a].max(idx[a]);
        }
        hu += ct.data()[(z * h + y) * w + x] as f64;
        count += 1;
    }
    let n = count as f64;
    let s = geom.spacing;
    let mut f = [0.0; TABULAR_FEATURES];
    for a in 0..3 {
        f[a] = geom.origin[a] + sum[a] / n * s[a];
        f[3 + a] = (hi[a] - lo[a] + 1) as f64 * s[a];
    }
    f[6] = n;
    f[7] = n * s[0] * s[1] * s[2];
    f[8] = hu / n;
    Ok(f)
}

/// Index of the axial slice with the most contoured voxels (ties: lowest).
pub fn central_slice_index(mask: &Mask) -> usize {
    let [d, h, w] = mask.dims;
    let mut best = (0, 0);
    for z in 0..d {
        let c = mask.data[z * h * w..(z + 1) * h * w].iter().filter(|&&b| b).count();
        if c > best.1 {
            best = (z, c);
        }
    }
    best.0
}

/// CT masked to the contour: outside voxels set to the lower clip bound,
/// then windowed onto `[0, 1]`.
fn masked_windowed(mask: &Mask, ct: &Tensor<f32>) -> Vec<f32> {
    ct.data()
        .iter()
        .zip(&mask.data)
        .map(|(&v, &m)| window_hu(if m { v } else { HU_MIN }))
        .collect()
}

pub fn extract_central_slice(mask: &Mask, ct: &Tensor<f32>, out_hw: [usize; 2]) -> Result<Tensor<f32>> {
    check_mask(mask, ct)?;
    let [_, h, w] = mask.dims;
    let z = central_slice_index(mask);
    let plane = h * w;
    let vals = masked_windowed(mask, ct);
    let slice = Tensor::new(vec![1, h, w], vals[z * plane..(z + 1) * plane].to_vec())?;
    let out = resize_trilinear(&slice, [1, out_hw[0], out_hw[1]])?;
    out.reshape(&out_hw)
}

pub fn extract_volume(mask: &Mask, ct: &Tensor<f32>, out_dhw: [usize; 3]) -> Result<Tensor<f32>> {
    check_mask(mask, ct)?;
    let vol = Tensor::new(ct.dims().to_vec(), masked_windowed(mask, ct))?;
    resize_trilinear(&vol, out_dhw)
}

/// Source coordinate and blend weight along one axis (half-pixel centres).
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Trilinear resampling of a `D×H×W` tensor; identical dims pass through exactly.
pub fn resize_trilinear(t: &Tensor<f32>, out: [usize; 3]) -> Result<Tensor<f32>> {
    let &[d, h, w] = t.dims() else {
        return Err(Error::Config(format!("expected D×H×W, got {:?}", t.dims())));
    };
    if out.contains(&0) {
        return Err(Error::Config(format!("invalid resize target {out:?}")));
    }
    if [d, h, w] == out {
        return Ok(t.clone());
    }
    let (tz, ty, tx) = (taps(d, out[0]), taps(h, out[1]), taps(w, out[2]));
    let src = t.data();
    let at = |z: usize, y: usize, x: usize| src[(z * h + y) * w + x];
    let lerp = |a: f32, b: f32, f: f32| a + f * (b - a);
    let mut data = Vec::with_capacity(out.iter().product());
    for &(z0, z1, fz) in &tz {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                data.push(lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz));
            }
        }
    }
    Tensor::new(out.to_vec(), data)
}

/// Output shapes of the image modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtractConfig {
    pub slice_hw: [usize; 2],
    pub volume_dhw: [usize; 3],
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            slice_hw: [64, 64],
            volume_dhw: [32, 64, 64],
        }
    }
}

impl ExtractConfig {
    /// Reduced shapes used by the quick benchmark profile.
    pub fn desk() -> Self {
        ExtractConfig {
            slice_hw: [16, 16],
            volume_dhw: [8, 16, 16],
        }
    }
}

/// One record per contour present in the phantom, in class order.
pub fn phantom_records(p: &Phantom, cfg: &ExtractConfig) -> Result<Vec<StructureRecord>> {
    p.masks
        .iter()
        .map(|(class, mask)| {
            Ok(StructureRecord {
                patient_id: p.patient_id.clone(),
                label: *class,
                tabular: extract_tabular(mask, &p.ct, &p.geometry)?,
                slice: Some(extract_central_slice(mask, &p.ct, cfg.slice_hw)?),
                volume: Some(extract_volume(mask, &p.ct, cfg.volume_dhw)?),
            })
        })
        .collect()
}

pub fn patient_id(index: usize) -> String {
    format!("P{index:04}")
}

/// Records for `n_patients` phantoms; patient `i` is seeded by `derive(seed, i)`.
pub fn generate_cohort(
    n_patients: usize,
    seed: u64,
    phantom: &PhantomConfig,
    extract: &ExtractConfig,
) -> Result<Vec<StructureRecord>> {
    let mut out = Vec::new();
    for i in 0..n_patients {
        let p = generate_phantom(&patient_id(i), rng::derive(seed, i as u64), phantom);
        out.extend(phantom_records(&p, extract)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(dims: [usize; 3], at: usize, side: usize) -> Mask {
        let mut m = Mask::empty(dims);
        for z in at..at + side {
            for y in at..at + side {
                for x in at..at + side {
                    m.set(z, y, x);
                }
            }
        }
        m
    }

    #[test]
    fn cube_features_by_hand() {
        let dims = [20, 20, 20];
        let ct = Tensor::full(&dims, 30.0f32);
        let f = extract_tabular(&cube(dims, 10, 4), &ct, &Geometry::default()).unwrap();
        assert_eq!(&f[..], &[11.5, 11.5, 11.5, 4.0, 4.0, 4.0, 64.0, 64.0, 30.0]);
    }

    #[test]
    fn single_voxel_and_translation() {
        let dims = [12, 12, 12];
        let ct = Tensor::full(&dims, 0.0f32);
        let g = Geometry::default();
        let f = extract_tabular(&cube(dims, 3, 1), &ct, &g).unwrap();
        assert_eq!(&f[3..7], &[1.0, 1.0, 1.0, 1.0]);
        let a = extract_tabular(&cube(dims, 1, 3), &ct, &g).unwrap();
        let b = extract_tabular(&cube(dims, 6, 3), &ct, &g).unwrap();
        assert_eq!(&a[3..8], &b[3..8]);
        assert_ne!(a[0], b[0]);
    }

    #[test]
    fn empty_mask_rejected() {
        let ct = Tensor::full(&[2, 2, 2], 0.0f32);
        let m = Mask::empty([2, 2, 2]);
        assert!(extract_tabular(&m, &ct, &Geometry::default()).is_err());
        assert!(extract_central_slice(&m, &ct, [2, 2]).is_err());
        assert!(extract_volume(&m, &ct, [2, 2, 2]).is_err());
    }

    #[test]
    fn single_slice_mask_selects_that_slice() {
        let mut m = Mask::empty([6, 4, 4]);
        m.set(4, 1, 1);
        m.set(4, 2, 2);
        assert_eq!(central_slice_index(&m), 4);
    }

    #[test]
    fn air_slice_is_all_zero() {
        let ct = Tensor::full(&[4, 8, 8], -1000.0f32);
        let m = cube([4, 8, 8], 1, 3);
        let s = extract_central_slice(&m, &ct, [5, 5]).unwrap();
        assert_eq!(s.dims(), &[5, 5]);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_region_and_passthrough() {
        let ct = Tensor::full(&[6, 6, 6], 200.0f32);
        let m = cube([6, 6, 6], 1, 4);
        let v = extract_volume(&m, &ct, [6, 6, 6]).unwrap();
        let inside = window_hu(200.0);
        for (val, &on) in v.data().iter().zip(&m.data) {
            assert_eq!(*val, if on { inside } else { 0.0 });
        }
    }

    #[test]
    fn phantom_is_deterministic() {
        let cfg = PhantomConfig::default();
        let a = generate_phantom("P0000", 7, &cfg);
        let b = generate_phantom("P0000", 7, &cfg);
        assert_eq!(a, b);
        let c = generate_phantom("P0000", 8, &cfg);
        assert_ne!(a.ct, c.ct);
    }
}
