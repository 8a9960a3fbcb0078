//! Kernel-regressed latent codes and atlas evaluation on arbitrary grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inr::{self, LatentGrid};
use crate::so3::RigidParams;
use crate::training::{argmax_labels, scatter, TrainedModel};
use crate::volume::{unravel, voxel_count, LabelMap, Mask, Volume};

/// Maps ages in weeks to [-1, 1] over the training cohort's age span.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeNormalization {
    pub min: f64,
    pub max: f64,
}

impl AgeNormalization {
    pub fn from_ages(ages: &[f64]) -> Self {
        AgeNormalization {
            min: ages.iter().cloned().fold(f64::INFINITY, f64::min),
            max: ages.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    fn span(&self) -> f64 {
        if self.max > self.min {
            self.max - self.min
        } else {
            2.0
        }
    }

    pub fn age(&self, weeks: f64) -> f64 {
        2.0 * (weeks - self.min) / self.span() - 1.0
    }

    pub fn sigma(&self, weeks: f64) -> f64 {
        weeks * 2.0 / self.span()
    }
}

/// Normalized Gaussian weights `w_i ~ exp(-(t - t_i)^2 / (2 sigma^2))`, all
/// quantities in normalized age units.
pub fn kernel_weights(t: f64, ages: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if ages.is_empty() {
        return Err(Error::DegenerateInput("no subjects to weight".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let raw: Vec<f64> = ages
        .iter()
        .map(|&a| (-(t - a).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::DegenerateKernel { target: t, sigma });
    }
    Ok(raw.into_iter().map(|w| w / sum).collect())
}

/// Kernel-regressed latent grid at normalized age `t`; the condition vector
/// is the same weighted mean of the training condition vectors.
pub fn regress_latent_normalized(model: &TrainedModel, t: f64, sigma: f64) -> Result<(LatentGrid<f32>, Vec<f64>)> {
    let norm = AgeNormalization::from_ages(&model.ages());
    let ages: Vec<f64> = model.ages().iter().map(|&a| norm.age(a)).collect();
    let w = kernel_weights(t, &ages, sigma)?;
    let grids: Vec<&LatentGrid<f32>> = model.subjects.iter().map(|s| &s.latent).collect();
    Ok((LatentGrid::weighted_sum(&grids, &w)?, w))
}

pub fn regress_latent(model: &TrainedModel, t_weeks: f64, sigma_weeks: f64) -> Result<LatentGrid<f32>> {
    let norm = AgeNormalization::from_ages(&model.ages());
    Ok(regress_latent_normalized(model, norm.age(t_weeks), norm.sigma(sigma_weeks))?.0)
}

/// Cubic evaluation grid centred on the shared frame's origin. Normalized
/// coordinates are millimetres divided by the model's reference half extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtlasGrid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub half_extent_mm: f64,
}

impl AtlasGrid {
    /// Grid covering the normalized cube at `resolution_mm`.
    pub fn covering(model: &TrainedModel, resolution_mm: f64) -> Result<Self> {
        if !(resolution_mm > 0.0) {
            return Err(Error::Config(format!("resolution must be positive, got {resolution_mm}")));
        }
        let h = model.reference_half_extent_mm();
        let n = ((2.0 * h / resolution_mm).round() as usize).max(1);
        Ok(AtlasGrid {
            dims: [n; 3],
            spacing: [resolution_mm; 3],
            half_extent_mm: h,
        })
    }

    pub fn with_dims(model: &TrainedModel, dims: [usize; 3], spacing_mm: f64) -> Self {
        AtlasGrid {
            dims,
            spacing: [spacing_mm; 3],
            half_extent_mm: model.reference_half_extent_mm(),
        }
    }

    /// Millimetre position of a voxel centre relative to the grid centre.
    pub fn voxel_mm(&self, v: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|d| (v[d] as f64 + 0.5 - 0.5 * self.dims[d] as f64) * self.spacing[d])
    }

    pub fn coords(&self) -> Vec<[f64; 3]> {
        (0..voxel_count(self.dims))
            .map(|i| self.voxel_mm(unravel(self.dims, i)).map(|x| x / self.half_extent_mm))
            .collect()
    }

    pub fn full_mask(&self) -> Result<Mask> {
        Mask::full(self.dims, self.spacing)
    }
}

/// Intensities, probabilities and labels of a latent grid on `grid`, with an
/// identity rigid transform.
pub fn evaluate_latent(model: &TrainedModel, latent: &LatentGrid<f32>, grid: &AtlasGrid) -> Result<(Volume, Volume, LabelMap)> {
    let coords = grid.coords();
    let (img, probs) = inr::predict(&model.params, &model.config, latent, &RigidParams::identity(), &coords)?;
    let mask = grid.full_mask()?;
    let voxels: Vec<usize> = (0..coords.len()).collect();
    let img = scatter(&img, &voxels, &mask)?;
    let probs = scatter(&probs, &voxels, &mask)?;
    let labels = argmax_labels(&probs, &mask)?;
    Ok((img, probs, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtlasRequest {
    pub t_weeks: f64,
    pub sigma_weeks: f64,
    /// Normalized condition values replacing the regressed ones.
    pub condition_override: Vec<(String, f64)>,
    pub grid: AtlasGrid,
    /// Intensity channels to emit; all when empty.
    pub modalities: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtlasMetadata {
    pub t_weeks: f64,
    pub sigma_weeks: f64,
    pub sigma_normalized: f64,
    pub condition_names: Vec<String>,
    pub xi: Vec<f64>,
    /// Per condition: "override" or "weighted-mean".
    pub xi_source: Vec<String>,
    pub weights: Vec<(String, f64)>,
    pub grid: AtlasGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Atlas {
    pub intensities: Volume,
    pub probabilities: Volume,
    pub labels: LabelMap,
    pub metadata: AtlasMetadata,
}

pub fn generate_atlas(model: &TrainedModel, req: &AtlasRequest) -> Result<Atlas> {
    if !(req.sigma_weeks > 0.0) {
        return Err(Error::Config(format!("sigma_weeks must be positive, got {}", req.sigma_weeks)));
    }
    if voxel_count(req.grid.dims) == 0 {
        return Err(Error::Config("atlas grid is empty".into()));
    }
    let norm = AgeNormalization::from_ages(&model.ages());
    let sigma = norm.sigma(req.sigma_weeks);
    let (mut latent, w) = regress_latent_normalized(model, norm.age(req.t_weeks), sigma)?;
    let names: Vec<String> = model.conditions.iter().map(|c| c.name.clone()).collect();
    let mut source = vec!["weighted-mean".to_string(); names.len()];
    for (name, value) in &req.condition_override {
        let q = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("model has no condition `{name}` (has {names:?})")))?;
        latent.xi.data[q] = *value as f32;
        source[q] = "override".into();
    }
    let (img, probs, labels) = evaluate_latent(model, &latent, &req.grid)?;
    let intensities = if req.modalities.is_empty() {
        img
    } else {
        img.select_channels(&req.modalities)?
    };
    Ok(Atlas {
        intensities,
        probabilities: probs,
        labels,
        metadata: AtlasMetadata {
            t_weeks: req.t_weeks,
            sigma_weeks: req.sigma_weeks,
            sigma_normalized: sigma,
            condition_names: names,
            xi: latent.xi.data.iter().map(|&v| f64::from(v)).collect(),
            xi_source: source,
            weights: model.subjects.iter().map(|s| s.id.clone()).zip(w).collect(),
            grid: req.grid.clone(),
        },
    })
}

/// Average-pools a volume by an integer factor per axis.
pub fn average_pool(v: &Volume, factor: usize) -> Result<Volume> {
    if factor == 0 || v.dims.iter().any(|&d| d % factor != 0) {
        return Err(Error::Shape(format!("dims {:?} not divisible by {factor}", v.dims)));
    }
    let dims = v.dims.map(|d| d / factor);
    let n_out = voxel_count(dims);
    let n_in = v.voxels();
    let mut data = vec![0.0f32; v.channels * n_out];
    let scale = 1.0 / (factor * factor * factor) as f32;
    for c in 0..v.channels {
        for i in 0..n_in {
            let p = unravel(v.dims, i);
            let o = crate::volume::linear_index(dims, p[0] / factor, p[1] / factor, p[2] / factor);
            data[c * n_out + o] += v.data[c * n_in + i] * scale;
        }
    }
    Volume::new(dims, v.spacing.map(|s| s * factor as f64), v.channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_and_symmetric_weights() {
        assert_eq!(kernel_weights(0.3, &[0.1], 0.2).unwrap(), vec![1.0]);
        let w = kernel_weights(0.0, &[-0.5, 0.5], 0.3).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn three_week_example() {
        // ages and sigma in weeks; the normalization cancels in the ratio
        let w = kernel_weights(31.0, &[30.0, 31.0, 32.0], 0.5).unwrap();
        let side = (-2f64).exp() / (1.0 + 2.0 * (-2f64).exp());
        assert!((w[0] - side).abs() < 1e-12 && (w[2] - side).abs() < 1e-12);
        assert!((w[0] - 0.1065).abs() < 1e-4 && (w[1] - 0.7870).abs() < 1e-4);
    }

    #[test]
    fn weights_sum_to_one_and_shift_invariant() {
        let ages: Vec<f64> = (0..17).map(|i| -1.0 + 0.125 * i as f64).collect();
        let w = kernel_weights(0.1, &ages, 0.2).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| x >= 0.0));
        let shifted: Vec<f64> = ages.iter().map(|a| a + 3.0).collect();
        let w2 = kernel_weights(3.1, &shifted, 0.2).unwrap();
        for (a, b) in w.iter().zip(&w2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn far_target_with_tiny_sigma_is_degenerate() {
        let err = kernel_weights(50.0, &[0.0, 0.1], 1e-3).unwrap_err();
        assert!(matches!(err, Error::DegenerateKernel { .. }));
    }

    #[test]
    fn dense_uniform_ages_put_95_percent_within_two_sigma() {
        let ages: Vec<f64> = (0..=17_000).map(|i| 21.0 + i as f64 * 1e-3).collect();
        let w = kernel_weights(29.5, &ages, 0.5).unwrap();
        let mass: f64 = ages.iter().zip(&w).filter(|(a, _)| (*a - 29.5).abs() <= 1.0).map(|(_, w)| w).sum();
        assert!((mass - 0.9545).abs() < 0.005, "{mass}");
    }

    #[test]
    fn pooling_averages_blocks() {
        let v = Volume::new([2, 2, 2], [0.5; 3], 1, (0..8).map(|i| i as f32).collect()).unwrap();
        let p = average_pool(&v, 2).unwrap();
        assert_eq!(p.dims, [1, 1, 1]);
        assert_eq!(p.data, vec![3.5]);
        assert_eq!(p.spacing, [1.0; 3]);
    }
}
