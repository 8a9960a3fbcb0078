//! Test-time adaptation of a frozen model to an unseen subject.

use std::sync::Arc;

use rand::seq::SliceRandom as _;
use rand::Rng as _;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::analysis::{psnr, ssim3d};
use crate::engine::{adam_step, AdamConfig, AdamState, Group, Matrix, ParamGroup, Update};
use crate::error::{Error, Result};
use crate::inr::{self, LatentGrid, ParamLayout};
use crate::rng;
use crate::so3::RigidParams;
use crate::training::{argmax_labels, batch_gradients, predict_volume, Batch, LossSpec, TrainedModel};
use crate::volume::{CoordinateTransform, LabelMap, Mask, SamplingDomain, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub holdout_fraction: f64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub eval_every: usize,
    /// `None` takes the model's training rate.
    pub lr_latent: Option<f64>,
    pub lr_rigid: Option<f64>,
    /// `None` takes the latent rate.
    pub lr_condition: Option<f64>,
    /// `None` takes the model's training batch size.
    pub batch_coords: Option<usize>,
    /// Model channels fitted; all when empty.
    pub observed_channels: Vec<usize>,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epochs: 10,
            holdout_fraction: 0.1,
            patience: 3,
            eval_every: 1,
            lr_latent: None,
            lr_rigid: None,
            lr_condition: None,
            batch_coords: None,
            observed_channels: Vec::new(),
            seed: 0,
        }
    }
}

impl AdaptConfig {
    /// Longer patience and a faster condition rate: with 256-coordinate
    /// batches the condition keeps drifting after the image loss flattens.
    pub fn desk() -> Self {
        AdaptConfig {
            epochs: 20,
            patience: 5,
            lr_condition: Some(3e-2),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 0.5) {
            return Err(Error::Config(format!(
                "holdout_fraction must lie in (0, 0.5), got {}",
                self.holdout_fraction
            )));
        }
        if self.epochs == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(Error::Config("epochs, eval_every and patience must be positive".into()));
        }
        for r in [self.lr_latent, self.lr_rigid, self.lr_condition].into_iter().flatten() {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::Config(format!("learning rates must be positive, got {r}")));
            }
        }
        if self.batch_coords == Some(0) {
            return Err(Error::Config("batch_coords must be positive".into()));
        }
        Ok(())
    }

    fn observed(&self, channels: usize) -> Result<Vec<usize>> {
        let obs = if self.observed_channels.is_empty() {
            (0..channels).collect()
        } else {
            self.observed_channels.clone()
        };
        let mut sorted = obs.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != obs.len() || obs.iter().any(|&c| c >= channels) {
            return Err(Error::Config(format!("observed channels {obs:?} invalid for {channels} model channels")));
        }
        Ok(obs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptResult {
    pub latent: LatentGrid<f32>,
    pub rigid: RigidParams,
    /// Holdout MSE per evaluation.
    pub holdout_trace: Vec<f64>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub observed_channels: Vec<usize>,
    pub fit_psnr: f64,
    pub fit_ssim: f64,
    pub holdout_psnr: f64,
    pub mask: Mask,
    pub transform: CoordinateTransform,
}

/// Disjoint fitting and holdout positions into a sampling domain.
pub fn split_holdout(len: usize, fraction: f64, rng: &mut rng::Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    let h = ((len as f64 * fraction).round() as usize).clamp(1, len.saturating_sub(1).max(1));
    let mut holdout = idx[..h].to_vec();
    let mut fit = idx[h..].to_vec();
    holdout.sort_unstable();
    fit.sort_unstable();
    (fit, holdout)
}

/// Widens the observed channels of `image` to the model's channel layout.
fn model_targets(image: &Volume, observed: &[usize], channels: usize) -> Result<Volume> {
    if image.channels == channels {
        return Ok(image.clone());
    }
    if image.channels != observed.len() {
        return Err(Error::Shape(format!(
            "image has {} channels; expected {} or the {} observed",
            image.channels,
            channels,
            observed.len()
        )));
    }
    let n = image.voxels();
    let mut data = vec![0.0f32; channels * n];
    for (i, &c) in observed.iter().enumerate() {
        data[c * n..(c + 1) * n].copy_from_slice(image.channel(i));
    }
    Volume::new(image.dims, image.spacing, channels, data)
}

struct State {
    z: Matrix<f32>,
    xi: Matrix<f32>,
    rot: Matrix<f32>,
    trans: Matrix<f32>,
}

impl State {
    fn rigid(&self) -> RigidParams {
        RigidParams {
            axis_angle: std::array::from_fn(|i| f64::from(self.rot.data[i])),
            translation: std::array::from_fn(|i| f64::from(self.trans.data[i])),
        }
    }

    fn latent(&self, grid: [usize; 3]) -> LatentGrid<f32> {
        LatentGrid {
            grid,
            z: self.z.clone(),
            xi: self.xi.clone(),
        }
    }
}

/// Fits a fresh latent grid, condition vector and rigid transform to the
/// observed channels of `image` with the network frozen.
pub fn adapt(model: &TrainedModel, image: &Volume, mask: &Mask, cfg: &AdaptConfig) -> Result<AdaptResult> {
    cfg.validate()?;
    let mcfg = &model.config;
    let observed = cfg.observed(mcfg.image_channels)?;
    if image.dims != mask.dims {
        return Err(Error::Shape(format!("image {:?} vs mask {:?}", image.dims, mask.dims)));
    }
    let targets = model_targets(image, &observed, mcfg.image_channels)?;
    let domain = SamplingDomain::new(mask)?;
    if domain.len() < 2 {
        return Err(Error::DegenerateInput("mask needs at least 2 voxels to hold out".into()));
    }
    let lr_latent = cfg.lr_latent.unwrap_or(model.train.lr_latent);
    let lr_rigid = cfg.lr_rigid.unwrap_or(model.train.lr_rigid);
    let lr_condition = cfg.lr_condition.unwrap_or(lr_latent);
    let batch_size = cfg.batch_coords.unwrap_or(model.train.batch_coords);

    let (fit, holdout) = split_holdout(domain.len(), cfg.holdout_fraction, &mut rng::stream(cfg.seed, "adapt/split"));
    let mut init_rng = rng::stream(cfg.seed, "adapt/init");
    let normal = Normal::new(0.0f64, 0.01).expect("valid std");
    let init = LatentGrid::<f32>::random(mcfg, &mut init_rng);
    let mut xi = Matrix::zeros(1, mcfg.condition_dims);
    xi.data.iter_mut().for_each(|v| *v = normal.sample(&mut init_rng) as f32);
    let mut st = State {
        z: init.z,
        xi,
        rot: Matrix::zeros(1, 3),
        trans: Matrix::zeros(1, 3),
    };
    let mut states = [
        AdamState::for_param(&st.z),
        AdamState::for_param(&st.xi),
        AdamState::new(3),
        AdamState::new(3),
    ];
    let grid = init.grid;
    let layout = ParamLayout::new(mcfg);
    let spec = LossSpec {
        channels: Arc::new(observed.clone()),
        seg_weight: 0.0,
        freeze_network: true,
    };
    let hold_batch = Batch::gather(&domain.batch(&holdout, "holdout"), &targets, None);
    let holdout_loss = |st: &State| -> Result<f64> {
        let (img, _) = inr::predict(&model.params, mcfg, &st.latent(grid), &st.rigid(), &hold_batch.coords)?;
        let mut se = 0.0;
        for r in 0..hold_batch.len() {
            for &c in &observed {
                let d = f64::from(img.at(r, c)) - f64::from(hold_batch.targets[r * hold_batch.channels + c]);
                se += d * d;
            }
        }
        Ok(se / hold_batch.len() as f64)
    };

    let adam = AdamConfig::default();
    let mut sample_rng = rng::stream(cfg.seed, "adapt/sample");
    let steps = fit.len().div_ceil(batch_size);
    let mut trace = Vec::new();
    let mut best = (f64::INFINITY, 0usize, st.z.clone(), st.xi.clone(), st.rot.clone(), st.trans.clone());
    let mut since_best = 0;
    let mut stopped = cfg.epochs;
    for epoch in 1..=cfg.epochs {
        for _ in 0..steps {
            let positions: Vec<usize> = (0..batch_size).map(|_| fit[sample_rng.random_range(0..fit.len())]).collect();
            let batch = Batch::gather(&domain.batch(&positions, "adapt"), &targets, None);
            let subject = [st.z.clone(), st.xi.clone(), st.rot.clone(), st.trans.clone()];
            let (loss, grads) = batch_gradients(&model.params, mcfg, &subject, grid, &batch, &spec)?;
            if !loss.total.is_finite() {
                return Err(Error::numeric(format!("adaptation loss in epoch {epoch}")));
            }
            let [sz, sxi, sr, stt] = &mut states;
            let mut groups = vec![
                ParamGroup {
                    group: Group::Latent,
                    lr: lr_latent,
                    updates: vec![Update {
                        param: &mut st.z,
                        grad: &grads[layout.latent],
                        state: sz,
                    }],
                },
                ParamGroup {
                    group: Group::Rigid,
                    lr: lr_rigid,
                    updates: vec![
                        Update {
                            param: &mut st.rot,
                            grad: &grads[layout.rotation],
                            state: sr,
                        },
                        Update {
                            param: &mut st.trans,
                            grad: &grads[layout.translation],
                            state: stt,
                        },
                    ],
                },
            ];
            if mcfg.condition_dims > 0 {
                groups.push(ParamGroup {
                    group: Group::Condition,
                    lr: lr_condition,
                    updates: vec![Update {
                        param: &mut st.xi,
                        grad: &grads[layout.condition],
                        state: sxi,
                    }],
                });
            }
            adam_step(&mut groups, &adam)?;
        }
        if epoch % cfg.eval_every != 0 && epoch != cfg.epochs {
            continue;
        }
        let h = holdout_loss(&st)?;
        if !h.is_finite() {
            return Err(Error::numeric(format!("holdout loss in epoch {epoch}")));
        }
        trace.push(h);
        if h < best.0 {
            best = (h, epoch, st.z.clone(), st.xi.clone(), st.rot.clone(), st.trans.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped = epoch;
                break;
            }
        }
    }
    let (best_loss, best_epoch, z, xi, rot, trans) = best;
    let st = State { z, xi, rot, trans };
    let latent = st.latent(grid);
    let rigid = st.rigid();
    let (img, _) = predict_volume(&model.params, mcfg, &latent, &rigid, mask, &domain.transform)?;
    let fit_img = img.select_channels(&observed)?;
    let truth = targets.select_channels(&observed)?;
    Ok(AdaptResult {
        latent,
        rigid,
        holdout_trace: trace,
        stopped_epoch: stopped,
        best_epoch,
        fit_psnr: psnr(&fit_img, &truth, mask)?,
        fit_ssim: ssim3d(&fit_img, &truth, mask)?,
        holdout_psnr: if best_loss > 0.0 {
            -10.0 * (best_loss / observed.len() as f64).log10()
        } else {
            f64::INFINITY
        },
        observed_channels: observed,
        mask: mask.clone(),
        transform: domain.transform,
    })
}

/// Tissue probabilities and argmax labels on the adapted subject's grid.
pub fn predict_segmentation(model: &TrainedModel, result: &AdaptResult) -> Result<(Volume, LabelMap)> {
    let (_, probs) = predict_volume(
        &model.params,
        &model.config,
        &result.latent,
        &result.rigid,
        &result.mask,
        &result.transform,
    )?;
    let labels = argmax_labels(&probs, &result.mask)?;
    Ok((probs, labels))
}

/// One intensity channel of the adapted subject, including channels that
/// were not observed.
pub fn translate_modality(model: &TrainedModel, result: &AdaptResult, target_channel: usize) -> Result<Volume> {
    if target_channel >= model.config.image_channels {
        return Err(Error::Config(format!(
            "target channel {target_channel} but the model has {} channels",
            model.config.image_channels
        )));
    }
    let (img, _) = predict_volume(
        &model.params,
        &model.config,
        &result.latent,
        &result.rigid,
        &result.mask,
        &result.transform,
    )?;
    img.select_channels(&[target_channel])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionEstimate {
    pub name: String,
    pub normalized: f64,
    pub physical: f64,
}

/// Optimized condition values in normalized and physical units.
pub fn estimate_conditions(model: &TrainedModel, result: &AdaptResult) -> Result<Vec<ConditionEstimate>> {
    if model.conditions.is_empty() {
        return Err(Error::Config("model was trained without explicit conditions".into()));
    }
    Ok(model
        .conditions
        .iter()
        .zip(&result.latent.xi.data)
        .map(|(c, &v)| ConditionEstimate {
            name: c.name.clone(),
            normalized: f64::from(v),
            physical: c.to_physical(f64::from(v)),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_split_is_disjoint_and_sized() {
        let (fit, hold) = split_holdout(1000, 0.1, &mut rng::stream(3, "s"));
        assert_eq!(hold.len(), 100);
        assert_eq!(fit.len(), 900);
        let mut all: Vec<usize> = fit.iter().chain(&hold).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        assert!(AdaptConfig::default().validate().is_ok());
        for f in [0.0, 0.5, 0.7] {
            let c = AdaptConfig {
                holdout_fraction: f,
                ..Default::default()
            };
            assert!(c.validate().is_err());
        }
        let c = AdaptConfig {
            observed_channels: vec![2],
            ..Default::default()
        };
        assert!(c.observed(2).is_err());
        let c = AdaptConfig {
            observed_channels: vec![1, 1],
            ..Default::default()
        };
        assert!(c.observed(2).is_err());
    }

    #[test]
    fn observed_subset_is_widened() {
        let v = Volume::new([2, 1, 1], [1.0; 3], 1, vec![0.25, 0.5]).unwrap();
        let w = model_targets(&v, &[1], 2).unwrap();
        assert_eq!(w.channels, 2);
        assert_eq!(w.channel(1), &[0.25, 0.5]);
        assert_eq!(w.channel(0), &[0.0, 0.0]);
        assert!(model_targets(&v, &[0, 1], 3).is_err());
    }
}
