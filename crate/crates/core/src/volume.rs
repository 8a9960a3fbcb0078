//! Image, label and mask carriers, intensity normalization and coordinate
//! sampling.
//!
//! All voxel buffers use NIfTI order: `x` varies fastest, then `y`, `z` and
//! finally the channel.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

#[inline]
pub fn unravel(dims: Dims, idx: usize) -> [usize; 3] {
    let x = idx % dims[0];
    let y = (idx / dims[0]) % dims[1];
    let z = idx / (dims[0] * dims[1]);
    [x, y, z]
}

fn check_dims(dims: Dims, spacing: Spacing) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("dims must be positive, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Shape(format!(
            "spacing must be positive, got {spacing:?}"
        )));
    }
    Ok(())
}

/// Multi-channel scalar volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub channels: usize,
    pub data: Vec<f32>,
    /// Declared (min, max) of the stored intensities.
    pub intensity_range: (f32, f32),
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, channels: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(dims, spacing)?;
        if channels == 0 {
            return Err(Error::Shape("volume needs at least one channel".into()));
        }
        if data.len() != channels * voxel_count(dims) {
            return Err(Error::Shape(format!(
                "data length {} != {} channels x {:?}",
                data.len(),
                channels,
                dims
            )));
        }
        let range = min_max(&data);
        Ok(Volume {
            dims,
            spacing,
            channels,
            data,
            intensity_range: range,
        })
    }

    pub fn zeros(dims: Dims, spacing: Spacing, channels: usize) -> Result<Self> {
        Volume::new(dims, spacing, channels, vec![0.0; channels * voxel_count(dims)])
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Value at channel `c`, voxel `(x, y, z)`.
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[c * self.voxels() + linear_index(self.dims, x, y, z)]
    }

    /// New volume holding only the listed channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Volume> {
        let mut data = Vec::with_capacity(channels.len() * self.voxels());
        for &c in channels {
            if c >= self.channels {
                return Err(Error::Config(format!(
                    "channel {c} out of range for a {}-channel volume",
                    self.channels
                )));
            }
            data.extend_from_slice(self.channel(c));
        }
        Volume::new(self.dims, self.spacing, channels.len(), data)
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }
}

fn min_max(data: &[f32]) -> (f32, f32) {
    if data.is_empty() {
        return (0.0, 0.0);
    }
    data.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Integer tissue labels, one per voxel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    pub dims: Dims,
    pub spacing: Spacing,
    pub labels: Vec<u8>,
    pub classes: usize,
}

impl LabelMap {
    pub fn new(dims: Dims, spacing: Spacing, labels: Vec<u8>, classes: usize) -> Result<Self> {
        check_dims(dims, spacing)?;
        if labels.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "label length {} != voxel count of {:?}",
                labels.len(),
                dims
            )));
        }
        if classes == 0 || classes > 256 {
            return Err(Error::Shape(format!("invalid class count {classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= classes) {
            return Err(Error::Shape(format!(
                "label {bad} exceeds class count {classes}"
            )));
        }
        Ok(LabelMap {
            dims,
            spacing,
            labels,
            classes,
        })
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[usize::from(l)] += 1;
        }
        h
    }
}

/// Boolean brain mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<bool>) -> Result<Self> {
        check_dims(dims, spacing)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "mask length {} != voxel count of {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Mask {
            dims,
            spacing,
            data,
        })
    }

    pub fn full(dims: Dims, spacing: Spacing) -> Result<Self> {
        Mask::new(dims, spacing, vec![true; voxel_count(dims)])
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn to_labels(&self) -> LabelMap {
        LabelMap {
            dims: self.dims,
            spacing: self.spacing,
            labels: self.data.iter().map(|&b| u8::from(b)).collect(),
            classes: 2,
        }
    }

    pub fn from_labels(labels: &LabelMap) -> Result<Self> {
        Mask::new(
            labels.dims,
            labels.spacing,
            labels.labels.iter().map(|&l| l != 0).collect(),
        )
    }
}

/// Per-channel min-max normalization inside the mask; zero outside.
pub fn normalize_intensities(v: &Volume, m: &Mask) -> Result<Volume> {
    if v.dims != m.dims {
        return Err(Error::Shape(format!(
            "volume dims {:?} != mask dims {:?}",
            v.dims, m.dims
        )));
    }
    if m.count() == 0 {
        return Err(Error::DegenerateInput("empty mask".into()));
    }
    let n = v.voxels();
    let mut out = vec![0.0f32; v.data.len()];
    for c in 0..v.channels {
        let src = v.channel(c);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (i, &inside) in m.data.iter().enumerate() {
            if inside {
                lo = lo.min(f64::from(src[i]));
                hi = hi.max(f64::from(src[i]));
            }
        }
        if !(hi > lo) {
            return Err(Error::DegenerateInput(format!(
                "channel {c} is constant inside the mask"
            )));
        }
        let dst = &mut out[c * n..(c + 1) * n];
        for (i, &inside) in m.data.iter().enumerate() {
            if inside {
                let t = (f64::from(src[i]) - lo) / (hi - lo);
                dst[i] = (t as f32).clamp(0.0, 1.0);
            }
        }
    }
    let mut res = Volume::new(v.dims, v.spacing, v.channels, out)?;
    res.intensity_range = (0.0, 1.0);
    Ok(res)
}

/// Isotropic affine map from world millimetres to the normalized cube.
///
/// The mask's bounding box (over voxel centres) is centred on the origin and
/// its longest edge is mapped to length 2.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateTransform {
    pub spacing: Spacing,
    pub center_mm: [f64; 3],
    pub half_extent_mm: f64,
}

impl CoordinateTransform {
    pub fn to_normalized(&self, world: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|d| (world[d] - self.center_mm[d]) / self.half_extent_mm)
    }

    pub fn to_world(&self, norm: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|d| norm[d] * self.half_extent_mm + self.center_mm[d])
    }

    pub fn voxel_to_world(&self, voxel: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|d| voxel[d] as f64 * self.spacing[d])
    }

    pub fn voxel_to_normalized(&self, voxel: [usize; 3]) -> [f64; 3] {
        self.to_normalized(self.voxel_to_world(voxel))
    }
}

pub fn normalize_coordinates(m: &Mask, spacing: Spacing) -> Result<CoordinateTransform> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, &inside) in m.data.iter().enumerate() {
        if inside {
            any = true;
            let v = unravel(m.dims, i);
            for d in 0..3 {
                lo[d] = lo[d].min(v[d]);
                hi[d] = hi[d].max(v[d]);
            }
        }
    }
    if !any {
        return Err(Error::DegenerateInput("empty mask".into()));
    }
    let center_mm = std::array::from_fn(|d| 0.5 * (lo[d] + hi[d]) as f64 * spacing[d]);
    let longest = (0..3)
        .map(|d| (hi[d] - lo[d]) as f64 * spacing[d])
        .fold(0.0, f64::max);
    // a single voxel (or a single line of them) has no extent along the box
    let half_extent_mm = if longest > 0.0 {
        0.5 * longest
    } else {
        0.5 * spacing.iter().cloned().fold(0.0, f64::max)
    };
    Ok(CoordinateTransform {
        spacing,
        center_mm,
        half_extent_mm,
    })
}

/// One sampled coordinate: voxel linear index and its normalized position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordinateEntry {
    pub voxel: usize,
    pub coord: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateBatch {
    pub entries: Vec<CoordinateEntry>,
    pub source_subject: String,
}

/// Masked voxels with their normalized coordinates, precomputed once per
/// subject so that batches can be drawn cheaply.
#[derive(Clone, Debug)]
pub struct SamplingDomain {
    pub transform: CoordinateTransform,
    pub voxels: Vec<usize>,
    pub coords: Vec<[f64; 3]>,
}

impl SamplingDomain {
    pub fn new(m: &Mask) -> Result<Self> {
        let transform = normalize_coordinates(m, m.spacing)?;
        let voxels = m.indices();
        let coords = voxels
            .iter()
            .map(|&i| transform.voxel_to_normalized(unravel(m.dims, i)))
            .collect();
        Ok(SamplingDomain {
            transform,
            voxels,
            coords,
        })
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Uniform draw with replacement of `n` positions into `voxels`.
    pub fn draw(&self, n: usize, rng: &mut Rng) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.voxels.len())).collect()
    }

    pub fn batch(&self, positions: &[usize], source: &str) -> CoordinateBatch {
        CoordinateBatch {
            entries: positions
                .iter()
                .map(|&p| CoordinateEntry {
                    voxel: self.voxels[p],
                    coord: self.coords[p],
                })
                .collect(),
            source_subject: source.to_string(),
        }
    }
}

/// Draw `n` masked voxels uniformly with replacement.
pub fn sample_coordinates(m: &Mask, n: usize, rng: &mut Rng) -> Result<CoordinateBatch> {
    if n == 0 {
        return Err(Error::DegenerateInput("sample count must be >= 1".into()));
    }
    let domain = SamplingDomain::new(m)?;
    let positions = domain.draw(n, rng);
    Ok(domain.batch(&positions, ""))
}
