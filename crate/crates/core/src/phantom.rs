//! Parametric "developing brain" phantoms.
//!
//! Geometry is defined in millimetres around the centre of the field of
//! view, so the same phantom can be rasterized at any grid size and spacing.
//! Tissue layers from the outside in: a CSF shell, a folded cortical ribbon,
//! white matter, and two mirrored lateral ventricles. A midline CSF slab
//! separates the hemispheres except for a white-matter bridge when the
//! callosum analog is present.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti;
use crate::rng::{self, derive_seed};
use crate::so3;
use crate::volume::{unravel, voxel_count, LabelMap, Mask, Volume};

pub const BACKGROUND: u8 = 0;
pub const CSF: u8 = 1;
pub const CORTEX: u8 = 2;
pub const WHITE_MATTER: u8 = 3;
pub const VENTRICLE: u8 = 4;
pub const TISSUE_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; TISSUE_CLASSES] = ["background", "csf", "cortex", "white_matter", "ventricle"];

pub const MIN_AGE: f64 = 21.0;
pub const MAX_AGE: f64 = 38.0;
pub const MIN_LV_FRACTION: f64 = 0.01;
pub const MAX_LV_FRACTION: f64 = 0.12;

/// Brain semi-axes (mm) at the oldest age.
const ADULT_RADII: [f64; 3] = [21.0, 17.0, 19.0];
const CSF_SHELL_MM: f64 = 1.5;
const RIBBON_MM: f64 = 2.5;
const FISSURE_HALF_WIDTH_MM: f64 = 2.5;
const BRIDGE_CORE_MARGIN_MM: f64 = 1.0;
const FOV_MARGIN_MM: f64 = 2.0;
/// Fixed fold directions; the same pattern is shared by every subject.
const FOLD_DIRECTIONS: [[f64; 3]; 4] = [
    [0.577, 0.577, 0.577],
    [-0.577, 0.577, 0.577],
    [0.577, -0.577, 0.577],
    [0.0, 0.6, -0.8],
];
const FOLD_PHASES: [f64; 4] = [0.3, 1.7, 2.9, 4.1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub id: String,
    pub grid: usize,
    pub spacing: f64,
    pub age_weeks: f64,
    pub lv_fraction: f64,
    pub cc_present: bool,
    pub birth_age_weeks: Option<f64>,
    /// Axis-angle rotation (radians) applied to the anatomy.
    pub rotation: [f64; 3],
    pub noise_sigma: f64,
    pub modality_count: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            id: "phantom".into(),
            grid: 48,
            spacing: 1.0,
            age_weeks: 30.0,
            lv_fraction: 0.05,
            cc_present: true,
            birth_age_weeks: None,
            rotation: [0.0; 3],
            noise_sigma: 0.02,
            modality_count: 2,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(MIN_AGE..=MAX_AGE).contains(&self.age_weeks) {
            return bad(format!("age_weeks {} outside [{MIN_AGE}, {MAX_AGE}]", self.age_weeks));
        }
        if !(MIN_LV_FRACTION..=MAX_LV_FRACTION).contains(&self.lv_fraction) {
            return bad(format!(
                "lv_fraction {} outside [{MIN_LV_FRACTION}, {MAX_LV_FRACTION}]",
                self.lv_fraction
            ));
        }
        if self.grid < 4 || !(self.spacing.is_finite() && self.spacing > 0.0) {
            return bad("grid must be >= 4 and spacing positive".into());
        }
        if !(1..=2).contains(&self.modality_count) {
            return bad(format!("modality_count {} must be 1 or 2", self.modality_count));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative".into());
        }
        if let Some(b) = self.birth_age_weeks {
            if !(b.is_finite() && b <= self.age_weeks) {
                return bad(format!("birth age {b} must not exceed scan age {}", self.age_weeks));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conditions {
    pub lv_fraction: f64,
    pub cc_present: bool,
    pub birth_age_weeks: Option<f64>,
}

impl Conditions {
    /// Value of a named condition variable. `cc_absent` is 1 for a missing
    /// callosum bridge.
    pub fn value(&self, name: &str) -> Option<f64> {
        match name {
            "lv_fraction" => Some(self.lv_fraction),
            "cc_absent" => Some(if self.cc_present { 0.0 } else { 1.0 }),
            "cc_present" => Some(if self.cc_present { 1.0 } else { 0.0 }),
            "birth_age_weeks" => self.birth_age_weeks,
            _ => None,
        }
    }
}

pub const CONDITION_NAMES: [&str; 4] = ["lv_fraction", "cc_absent", "cc_present", "birth_age_weeks"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub volumes: Volume,
    pub labels: LabelMap,
    pub mask: Mask,
    pub scan_age_weeks: f64,
    pub conditions: Conditions,
    /// Axis-angle rotation applied to the anatomy (zero for loaded data).
    pub rotation: [f64; 3],
}

/// Tissue levels per modality: CSF, cortex, WM (young, old), ventricle.
fn tissue_level(modality: usize, label: u8, s: f64, prematurity: f64) -> f64 {
    match (modality, label) {
        (_, BACKGROUND) => 0.0,
        (0, CSF) | (0, VENTRICLE) => 0.95,
        (0, CORTEX) => 0.45,
        (0, _) => 0.75 - 0.15 * s + 0.1 * prematurity,
        (_, CSF) | (_, VENTRICLE) => 0.1,
        (_, CORTEX) => 0.5,
        (_, _) => 0.3 + 0.2 * s - 0.1 * prematurity,
    }
}

/// Normalized maturity in [0, 1].
pub fn maturity(age_weeks: f64) -> f64 {
    (age_weeks - MIN_AGE) / (MAX_AGE - MIN_AGE)
}

/// Prematurity in [0, 1]: 0 for birth at or after 37 weeks.
pub fn prematurity(birth_age_weeks: Option<f64>) -> f64 {
    birth_age_weeks.map_or(0.0, |b| ((37.0 - b) / 12.0).clamp(0.0, 1.0))
}

/// Brain semi-axes (mm) at the given age before per-subject jitter.
pub fn brain_radii(age_weeks: f64) -> [f64; 3] {
    let f = 0.6 + 0.4 * maturity(age_weeks);
    ADULT_RADII.map(|r| r * f)
}

/// Axis-aligned bounds (mm, relative to the brain centre) of the region the
/// callosum bridge occupies at this age.
pub fn bridge_box(age_weeks: f64) -> ([f64; 3], [f64; 3]) {
    let r = brain_radii(age_weeks);
    (
        [-FISSURE_HALF_WIDTH_MM, -0.4 * r[1], 0.05 * r[2]],
        [FISSURE_HALF_WIDTH_MM, 0.4 * r[1], 0.4 * r[2]],
    )
}

fn in_box(p: [f64; 3], (lo, hi): ([f64; 3], [f64; 3])) -> bool {
    (0..3).all(|d| p[d] > lo[d] && p[d] < hi[d])
}

/// Whether a canonical position (mm from the brain centre) is in the core of
/// the bridge box, at least `BRIDGE_CORE_MARGIN_MM` from either hemisphere.
/// The hemispheres' white matter starts right at the box walls.
pub fn in_bridge_core(q_mm: [f64; 3], age_weeks: f64) -> bool {
    let (mut lo, mut hi) = bridge_box(age_weeks);
    lo[0] += BRIDGE_CORE_MARGIN_MM;
    hi[0] -= BRIDGE_CORE_MARGIN_MM;
    in_box(q_mm, (lo, hi))
}

/// Voxels of a `dims`/`spacing` grid centred on the brain whose centres fall
/// inside the bridge box for `age_weeks`.
pub fn bridge_region(dims: [usize; 3], spacing: [f64; 3], age_weeks: f64) -> Mask {
    let bx = bridge_box(age_weeks);
    let data = (0..voxel_count(dims))
        .map(|i| {
            let v = unravel(dims, i);
            let p: [f64; 3] = std::array::from_fn(|d| (v[d] as f64 - 0.5 * (dims[d] as f64 - 1.0)) * spacing[d]);
            in_box(p, bx)
        })
        .collect();
    Mask {
        dims,
        spacing,
        data,
    }
}

/// Semi-axes of the field-of-view ellipsoid used as the sampling mask. It
/// is identical for every subject so all subjects share one normalization.
pub fn fov_radii() -> [f64; 3] {
    ADULT_RADII.map(|r| r * 1.03 + FOV_MARGIN_MM)
}

struct Geometry {
    radii: [f64; 3],
    mean_radius: f64,
    fold_amplitude: f64,
    fold_frequency: f64,
    ribbon: f64,
    cc_present: bool,
    bridge: ([f64; 3], [f64; 3]),
}

impl Geometry {
    fn new(spec: &PhantomSpec, jitter: f64) -> Self {
        let s = maturity(spec.age_weeks);
        let p = prematurity(spec.birth_age_weeks);
        let radii = brain_radii(spec.age_weeks).map(|r| r * jitter);
        Geometry {
            radii,
            mean_radius: (radii[0] * radii[1] * radii[2]).cbrt(),
            fold_amplitude: (0.5 + 2.0 * s) * (1.0 - 0.5 * p),
            fold_frequency: 2.0 + 4.0 * s,
            ribbon: RIBBON_MM * (1.0 - 0.35 * p),
            cc_present: spec.cc_present,
            bridge: bridge_box(spec.age_weeks),
        }
    }

    /// Depth below the outer brain surface (mm, positive inside).
    fn depth(&self, q: [f64; 3]) -> f64 {
        let n = (0..3).map(|d| (q[d] / self.radii[d]).powi(2)).sum::<f64>().sqrt();
        (1.0 - n) * self.mean_radius
    }

    /// Fold offset in [0, 1] as a function of direction only.
    fn fold(&self, q: [f64; 3]) -> f64 {
        let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt().max(1e-9);
        let u = q.map(|v| v / norm);
        let f: f64 = FOLD_DIRECTIONS
            .iter()
            .zip(FOLD_PHASES)
            .map(|(d, ph)| (PI * self.fold_frequency * (u[0] * d[0] + u[1] * d[1] + u[2] * d[2]) + ph).sin())
            .sum::<f64>()
            / FOLD_DIRECTIONS.len() as f64;
        0.5 * (1.0 + f)
    }

    /// Label of the canonical (unrotated) position `q`, ventricles excluded.
    fn tissue(&self, q: [f64; 3]) -> u8 {
        let depth = self.depth(q);
        if depth < 0.0 {
            return BACKGROUND;
        }
        let csf = CSF_SHELL_MM + self.fold_amplitude * self.fold(q);
        if depth < csf {
            return CSF;
        }
        if q[0].abs() < FISSURE_HALF_WIDTH_MM {
            return if self.cc_present && in_box(q, self.bridge) {
                WHITE_MATTER
            } else {
                CSF
            };
        }
        if depth < csf + self.ribbon {
            CORTEX
        } else {
            WHITE_MATTER
        }
    }

    /// Whether `q` lies in a ventricle ellipsoid grown by factor `k`.
    fn in_ventricle(&self, q: [f64; 3], k: f64) -> bool {
        let r = self.radii;
        let centre = [0.3 * r[0], -0.05 * r[1], -0.15 * r[2]];
        let axes = [0.12 * r[0] * k, 0.4 * r[1] * k, 0.18 * r[2] * k];
        let x = q[0].abs();
        let v = ((x - centre[0]) / axes[0]).powi(2)
            + ((q[1] - centre[1]) / axes[1]).powi(2)
            + ((q[2] - centre[2]) / axes[2]).powi(2);
        v <= 1.0
    }
}

/// Largest ventricle growth factor tried when matching `lv_fraction`.
const MAX_VENTRICLE_SCALE: f64 = 3.0;

pub fn generate_subject(spec: &PhantomSpec) -> Result<Subject> {
    spec.validate()?;
    let n = spec.grid;
    let dims = [n; 3];
    let spacing = [spec.spacing; 3];
    let mut rng = rng::stream(spec.seed, "phantom");
    let jitter = 1.0 + 0.03 * rng.random_range(-1.0..1.0);
    let geo = Geometry::new(spec, jitter);
    let rot_t = so3::transpose(&so3::exp(spec.rotation));
    let half = 0.5 * (n as f64 - 1.0);
    let total = voxel_count(dims);

    // canonical position of every voxel centre
    let canonical: Vec<[f64; 3]> = (0..total)
        .map(|i| {
            let v = unravel(dims, i);
            let p: [f64; 3] = std::array::from_fn(|d| (v[d] as f64 - half) * spec.spacing);
            so3::mat_vec(&rot_t, p)
        })
        .collect();
    let mut labels: Vec<u8> = canonical.par_iter().map(|&q| geo.tissue(q)).collect();
    let brain = labels.iter().filter(|&&l| l != BACKGROUND).count();
    let wm: Vec<usize> = (0..total).filter(|&i| labels[i] == WHITE_MATTER).collect();
    let lv_count = |k: f64| wm.iter().filter(|&&i| geo.in_ventricle(canonical[i], k)).count();

    let target = spec.lv_fraction * brain as f64;
    let (mut lo, mut hi) = (0.0, MAX_VENTRICLE_SCALE);
    let unattainable = Error::UnattainableFraction {
        fraction: spec.lv_fraction,
        grid: n,
        spacing: spec.spacing,
    };
    if (lv_count(hi) as f64) < target {
        return Err(unattainable);
    }
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if (lv_count(mid) as f64) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let best = [lo, hi]
        .into_iter()
        .min_by(|&a, &b| {
            let ea = (lv_count(a) as f64 - target).abs();
            let eb = (lv_count(b) as f64 - target).abs();
            ea.total_cmp(&eb)
        })
        .unwrap_or(hi);
    let achieved = lv_count(best) as f64 / brain as f64;
    if (achieved - spec.lv_fraction).abs() > 0.1 * spec.lv_fraction {
        return Err(unattainable);
    }
    for &i in &wm {
        if geo.in_ventricle(canonical[i], best) {
            labels[i] = VENTRICLE;
        }
    }

    let s = maturity(spec.age_weeks);
    let p = prematurity(spec.birth_age_weeks);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut data = Vec::with_capacity(spec.modality_count * total);
    for m in 0..spec.modality_count {
        let mut nrng = rng::stream(spec.seed, &format!("noise-{m}"));
        data.extend(labels.iter().map(|&l| {
            let e = if spec.noise_sigma > 0.0 { noise.sample(&mut nrng) } else { 0.0 };
            (tissue_level(m, l, s, p) + e).clamp(0.0, 1.0) as f32
        }));
    }

    let fov = fov_radii();
    let mask_data = (0..total)
        .map(|i| {
            let v = unravel(dims, i);
            (0..3)
                .map(|d| ((v[d] as f64 - half) * spec.spacing / fov[d]).powi(2))
                .sum::<f64>()
                <= 1.0
        })
        .collect();

    Ok(Subject {
        id: spec.id.clone(),
        volumes: Volume::new(dims, spacing, spec.modality_count, data)?,
        labels: LabelMap::new(dims, spacing, labels, TISSUE_CLASSES)?,
        mask: Mask::new(dims, spacing, mask_data)?,
        scan_age_weeks: spec.age_weeks,
        conditions: Conditions {
            lv_fraction: spec.lv_fraction,
            cc_present: spec.cc_present,
            birth_age_weeks: spec.birth_age_weeks,
        },
        rotation: spec.rotation,
    })
}

/// How cohort conditions are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionDistribution {
    pub lv_fraction: (f64, f64),
    pub cc_present_probability: f64,
    /// Birth ages are drawn uniformly in this range, capped at the scan age.
    pub birth_age_weeks: Option<(f64, f64)>,
    /// Maximum rotation (degrees) about `rotation_axis`; zero disables.
    pub max_rotation_deg: f64,
    pub rotation_axis: [f64; 3],
}

impl Default for ConditionDistribution {
    fn default() -> Self {
        ConditionDistribution {
            lv_fraction: (0.01, 0.08),
            cc_present_probability: 1.0,
            birth_age_weeks: None,
            max_rotation_deg: 0.0,
            rotation_axis: [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    pub count: usize,
    pub age_range: (f64, f64),
    pub conditions: ConditionDistribution,
    pub grid: usize,
    pub spacing: f64,
    pub noise_sigma: f64,
    pub id_prefix: String,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            count: 24,
            age_range: (MIN_AGE, MAX_AGE),
            conditions: ConditionDistribution::default(),
            grid: 48,
            spacing: 1.0,
            noise_sigma: 0.02,
            id_prefix: "sub".into(),
        }
    }
}

/// Per-subject specs of a cohort, in id order.
pub fn cohort_specs(c: &CohortSpec, seed: u64) -> Result<Vec<PhantomSpec>> {
    if c.count < 2 {
        return Err(Error::Config(format!("cohort needs at least 2 subjects, got {}", c.count)));
    }
    let (a0, a1) = c.age_range;
    if !(a0 <= a1) {
        return Err(Error::Config("age_range must be ordered".into()));
    }
    let mut rng = rng::stream(seed, "cohort");
    let dist = &c.conditions;
    let axis_norm = dist.rotation_axis.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((0..c.count)
        .map(|i| {
            let age = rng.random_range(a0..=a1);
            let (l0, l1) = dist.lv_fraction;
            let lv = if l0 < l1 { rng.random_range(l0..=l1) } else { l0 };
            let cc_present = rng.random_bool(dist.cc_present_probability.clamp(0.0, 1.0));
            let birth = dist.birth_age_weeks.map(|(b0, b1)| {
                let b = if b0 < b1 { rng.random_range(b0..=b1) } else { b0 };
                b.min(age)
            });
            let angle = if dist.max_rotation_deg > 0.0 {
                rng.random_range(-dist.max_rotation_deg..=dist.max_rotation_deg).to_radians()
            } else {
                0.0
            };
            let rotation = if angle != 0.0 && axis_norm > 0.0 {
                dist.rotation_axis.map(|v| v / axis_norm * angle)
            } else {
                [0.0; 3]
            };
            let id = format!("{}-{i:03}", c.id_prefix);
            PhantomSpec {
                seed: derive_seed(seed, &id),
                id,
                grid: c.grid,
                spacing: c.spacing,
                age_weeks: age,
                lv_fraction: lv,
                cc_present,
                birth_age_weeks: birth,
                rotation,
                noise_sigma: c.noise_sigma,
                modality_count: 2,
            }
        })
        .collect())
}

/// Draws that coarse grids cannot represent are redrawn from a per-subject stream.
const LV_REDRAWS: usize = 20;

pub fn generate_cohort(c: &CohortSpec, seed: u64) -> Result<Vec<Subject>> {
    let (l0, l1) = c.conditions.lv_fraction;
    cohort_specs(c, seed)?
        .into_iter()
        .map(|mut spec| {
            let mut rng = rng::stream(spec.seed, "lv-redraw");
            let mut tries = 0;
            loop {
                match generate_subject(&spec) {
                    Err(Error::UnattainableFraction { .. }) if l0 < l1 && tries < LV_REDRAWS => {
                        spec.lv_fraction = rng.random_range(l0..=l1);
                        tries += 1;
                    }
                    r => return r,
                }
            }
        })
        .collect()
}

/// Voxel count of `label` times the voxel volume.
pub fn measure_tissue_volume(labels: &LabelMap, label: u8) -> Result<f64> {
    if usize::from(label) >= labels.classes {
        return Err(Error::Config(format!("label {label} >= {} classes", labels.classes)));
    }
    Ok(labels.count(label) as f64 * labels.spacing.iter().product::<f64>())
}

/// Brain (non-background) volume in mm^3.
pub fn brain_volume(labels: &LabelMap) -> f64 {
    labels.labels.iter().filter(|&&l| l != BACKGROUND).count() as f64 * labels.spacing.iter().product::<f64>()
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub volume: String,
    pub labels: String,
    pub mask: String,
    pub scan_age_weeks: f64,
    pub lv_fraction: f64,
    pub cc_present: bool,
    pub birth_age_weeks: Option<f64>,
}

pub fn manifest_to_string(records: &[ManifestRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Per-class voxel counts keyed by class name.
pub fn tissue_histogram(labels: &LabelMap) -> BTreeMap<&'static str, usize> {
    labels
        .histogram()
        .into_iter()
        .enumerate()
        .filter_map(|(k, c)| CLASS_NAMES.get(k).map(|&n| (n, c)))
        .collect()
}

/// Writes each subject as `<id>_image.nii`, `<id>_labels.nii` and
/// `<id>_mask.nii` plus `manifest.jsonl`; paths in the manifest are relative
/// to `dir`.
pub fn write_cohort(subjects: &[Subject], dir: &Path) -> Result<Vec<ManifestRecord>> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(subjects.len());
    for s in subjects {
        let r = ManifestRecord {
            id: s.id.clone(),
            volume: format!("{}_image.nii", s.id),
            labels: format!("{}_labels.nii", s.id),
            mask: format!("{}_mask.nii", s.id),
            scan_age_weeks: s.scan_age_weeks,
            lv_fraction: s.conditions.lv_fraction,
            cc_present: s.conditions.cc_present,
            birth_age_weeks: s.conditions.birth_age_weeks,
        };
        nifti::write_volume(&s.volumes, dir.join(&r.volume))?;
        nifti::write_labels(&s.labels, dir.join(&r.labels))?;
        nifti::write_mask(&s.mask, dir.join(&r.mask))?;
        records.push(r);
    }
    fs::write(dir.join("manifest.jsonl"), manifest_to_string(&records)?)?;
    Ok(records)
}

/// Loads the subjects of a manifest; relative paths resolve against the
/// manifest's directory.
pub fn read_cohort(manifest: &Path) -> Result<Vec<Subject>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let records = parse_manifest(&fs::read_to_string(manifest)?)?;
    if records.is_empty() {
        return Err(Error::DegenerateInput(format!("{} lists no subjects", manifest.display())));
    }
    records
        .into_iter()
        .map(|r| {
            let volumes = nifti::read_nifti(base.join(&r.volume))?.into_volume()?;
            let labels = nifti::read_nifti(base.join(&r.labels))?.into_labels()?;
            let mask = nifti::read_nifti(base.join(&r.mask))?.into_mask()?;
            if volumes.dims != labels.dims || volumes.dims != mask.dims {
                return Err(Error::Shape(format!("subject {}: image, labels and mask grids differ", r.id)));
            }
            Ok(Subject {
                id: r.id,
                volumes,
                labels,
                mask,
                scan_age_weeks: r.scan_age_weeks,
                conditions: Conditions {
                    lv_fraction: r.lv_fraction,
                    cc_present: r.cc_present,
                    birth_age_weeks: r.birth_age_weeks,
                },
                rotation: [0.0; 3],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(age: f64, lv: f64) -> PhantomSpec {
        PhantomSpec {
            age_weeks: age,
            lv_fraction: lv,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn lv_fraction_is_hit_by_voxel_count() {
        for (age, lv) in [(21.0, 0.05), (30.0, 0.01), (38.0, 0.12), (25.0, 0.08)] {
            let s = generate_subject(&spec(age, lv)).unwrap();
            let brain = s.labels.labels.iter().filter(|&&l| l != 0).count() as f64;
            let got = s.labels.count(VENTRICLE) as f64 / brain;
            assert!((got - lv).abs() < 0.1 * lv, "age {age}: {got} vs {lv}");
        }
    }

    #[test]
    fn brain_grows_with_age_and_ventricles_with_fraction() {
        let young = generate_subject(&spec(21.0, 0.05)).unwrap();
        let old = generate_subject(&spec(38.0, 0.05)).unwrap();
        assert!(brain_volume(&old.labels) > brain_volume(&young.labels));
        let small = generate_subject(&spec(30.0, 0.03)).unwrap();
        let large = generate_subject(&spec(30.0, 0.08)).unwrap();
        assert!(
            measure_tissue_volume(&large.labels, VENTRICLE).unwrap()
                > measure_tissue_volume(&small.labels, VENTRICLE).unwrap()
        );
    }

    #[test]
    fn missing_callosum_leaves_bridge_without_white_matter() {
        let mut sp = spec(34.0, 0.04);
        let region = bridge_region([48; 3], [1.0; 3], sp.age_weeks);
        let with = generate_subject(&sp).unwrap();
        sp.cc_present = false;
        let without = generate_subject(&sp).unwrap();
        let wm_in = |s: &Subject| {
            region
                .indices()
                .into_iter()
                .filter(|&i| s.labels.labels[i] == WHITE_MATTER)
                .count()
        };
        assert!(wm_in(&with) > 20, "{}", wm_in(&with));
        assert_eq!(wm_in(&without), 0);
    }

    #[test]
    fn bridge_core_is_white_matter_only_with_a_callosum() {
        let mut sp = spec(30.0, 0.04);
        let with = generate_subject(&sp).unwrap();
        sp.cc_present = false;
        let without = generate_subject(&sp).unwrap();
        let n = sp.grid as f64;
        let core: Vec<usize> = (0..with.labels.labels.len())
            .filter(|&i| {
                let v = unravel(with.labels.dims, i);
                in_bridge_core(std::array::from_fn(|d| (v[d] as f64 - 0.5 * (n - 1.0)) * sp.spacing), sp.age_weeks)
            })
            .collect();
        assert!(core.len() > 20);
        assert!(core.iter().all(|&i| with.labels.labels[i] == WHITE_MATTER));
        assert!(core.iter().all(|&i| without.labels.labels[i] == CSF));
    }

    #[test]
    fn every_class_present_and_mask_covers_brain() {
        let s = generate_subject(&spec(21.0, 0.02)).unwrap();
        let h = s.labels.histogram();
        assert!(h.iter().all(|&c| c > 0), "{h:?}");
        assert!(s
            .labels
            .labels
            .iter()
            .zip(&s.mask.data)
            .all(|(&l, &m)| l == BACKGROUND || m));
    }

    #[test]
    fn tissue_means_match_levels() {
        let s = generate_subject(&spec(29.5, 0.05)).unwrap();
        let m1 = s.volumes.channel(0);
        for (label, level) in [(CSF, 0.95), (CORTEX, 0.45), (WHITE_MATTER, 0.75 - 0.15 * 0.5), (VENTRICLE, 0.95)] {
            let vals: Vec<f64> = (0..m1.len())
                .filter(|&i| s.labels.labels[i] == label)
                .map(|i| f64::from(m1[i]))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((mean - level).abs() < 0.01, "class {label}: {mean} vs {level}");
        }
    }

    #[test]
    fn deterministic_and_rotation_moves_anatomy() {
        let a = generate_subject(&spec(30.0, 0.05)).unwrap();
        let b = generate_subject(&spec(30.0, 0.05)).unwrap();
        assert_eq!(a, b);
        let mut r = spec(30.0, 0.05);
        r.rotation = [0.0, 0.0, 8f64.to_radians()];
        let c = generate_subject(&r).unwrap();
        assert_ne!(a.labels, c.labels);
        let rel = (brain_volume(&a.labels) - brain_volume(&c.labels)).abs() / brain_volume(&a.labels);
        assert!(rel < 0.02);
    }

    #[test]
    fn unattainable_fraction_is_rejected() {
        let sp = PhantomSpec {
            grid: 8,
            spacing: 6.0,
            lv_fraction: 0.011,
            age_weeks: 21.0,
            ..Default::default()
        };
        assert!(matches!(generate_subject(&sp), Err(Error::UnattainableFraction { .. })));
    }

    #[test]
    fn coarse_cohorts_redraw_unattainable_fractions() {
        let c = CohortSpec { count: 4, grid: 16, spacing: 3.0, ..Default::default() };
        let specs = cohort_specs(&c, 7).unwrap();
        assert!(specs.iter().any(|s| generate_subject(s).is_err()));
        let cohort = generate_cohort(&c, 7).unwrap();
        for (s, sp) in cohort.iter().zip(&specs) {
            assert_eq!(s.id, sp.id);
            assert_eq!(s.scan_age_weeks, sp.age_weeks);
            let brain = s.labels.labels.iter().filter(|&&l| l != 0).count() as f64;
            let got = s.labels.count(VENTRICLE) as f64 / brain;
            let lv = s.conditions.lv_fraction;
            assert!((0.01..=0.08).contains(&lv));
            assert!((got - lv).abs() <= 0.1 * lv, "{}: {got} vs {lv}", s.id);
        }
        assert_eq!(cohort, generate_cohort(&c, 7).unwrap());
    }

    #[test]
    fn cohort_ages_ids_and_conditions() {
        let c = CohortSpec {
            count: 24,
            grid: 16,
            spacing: 3.0,
            ..Default::default()
        };
        let specs = cohort_specs(&c, 11).unwrap();
        assert_eq!(specs.len(), 24);
        assert!(specs.iter().all(|s| (21.0..=38.0).contains(&s.age_weeks) && s.cc_present));
        let ids: std::collections::BTreeSet<_> = specs.iter().map(|s| s.id.clone()).collect();
        assert_eq!(ids.len(), 24);
        assert_eq!(specs, cohort_specs(&c, 11).unwrap());
        assert!(cohort_specs(&CohortSpec { count: 1, ..c }, 1).is_err());
    }

    #[test]
    fn measure_volume_arithmetic() {
        let l = LabelMap::new([2, 2, 2], [1.0; 3], vec![1; 8], 5).unwrap();
        assert_eq!(measure_tissue_volume(&l, 1).unwrap(), 8.0);
        assert_eq!(measure_tissue_volume(&l, 3).unwrap(), 0.0);
        assert!(measure_tissue_volume(&l, 5).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let r = ManifestRecord {
            id: "a".into(),
            volume: "a_img.nii".into(),
            labels: "a_seg.nii".into(),
            mask: "a_mask.nii".into(),
            scan_age_weeks: 30.5,
            lv_fraction: 0.04,
            cc_present: false,
            birth_age_weeks: Some(29.0),
        };
        let text = manifest_to_string(&[r.clone(), r.clone()]).unwrap();
        assert_eq!(parse_manifest(&text).unwrap(), vec![r.clone(), r]);
        let err = parse_manifest("{\"id\":1}\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}
