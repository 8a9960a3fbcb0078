//! Joint optimization of the shared network, per-subject latent grids and
//! per-subject rigid transforms.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{adam_step, tree_reduce, AdamConfig, AdamState, Group, Matrix, ParamGroup, Real, Tape, Update};
use crate::error::{Error, Result};
use crate::inr::{self, init_model, record_network, LatentGrid, ModelConfig, ModelParams, ParamLayout, CHUNK};
use crate::phantom::Subject;
use crate::rng::{self, derive_seed};
use crate::so3::RigidParams;
use crate::volume::{CoordinateBatch, CoordinateTransform, LabelMap, Mask, SamplingDomain, Volume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_network: f64,
    pub lr_latent: f64,
    pub lr_rigid: f64,
    pub batch_coords: usize,
    pub epochs: usize,
    pub seg_loss_weight: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Learn per-subject rigid transforms (disable for the ablation).
    pub learn_rigid: bool,
    /// Subject condition variables fed as the explicit condition vector.
    pub conditions: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            lr_network: 1e-4,
            lr_latent: 5e-4,
            lr_rigid: 7.5e-3,
            batch_coords: 25_000,
            epochs: 1,
            seg_loss_weight: 1.0,
            seed: 0,
            precision: Precision::Single,
            learn_rigid: true,
            conditions: Vec::new(),
        }
    }

    /// Small batches, a faster latent rate and more epochs: on phantoms the
    /// number of optimizer steps, not the batch size, limits the fit.
    pub fn desk() -> Self {
        TrainConfig {
            batch_coords: 256,
            epochs: 30,
            lr_latent: 3e-3,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_network, self.lr_latent, self.lr_rigid];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config(format!("learning rates must be positive, got {rates:?}")));
        }
        if self.batch_coords == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_coords and epochs must be positive".into()));
        }
        if !(self.seg_loss_weight >= 0.0) {
            return Err(Error::Config("seg_loss_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Affine map of one condition variable between physical units and [-1, 1],
/// fixed by the training cohort's range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionScale {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

impl ConditionScale {
    pub fn to_normalized(&self, v: f64) -> f64 {
        if self.max > self.min {
            2.0 * (v - self.min) / (self.max - self.min) - 1.0
        } else {
            0.0
        }
    }

    pub fn to_physical(&self, xi: f64) -> f64 {
        self.min + 0.5 * (xi + 1.0) * (self.max - self.min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectState {
    pub id: String,
    pub scan_age_weeks: f64,
    /// Physical condition values.
    pub conditions: BTreeMap<String, f64>,
    pub latent: LatentGrid<f32>,
    pub rigid: RigidParams,
    pub transform: CoordinateTransform,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub subject: String,
    pub mse: f64,
    pub ce: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub train: TrainConfig,
    pub params: ModelParams<f32>,
    pub subjects: Vec<SubjectState>,
    pub conditions: Vec<ConditionScale>,
    pub log: Vec<LogRecord>,
}

impl TrainedModel {
    pub fn subject(&self, id: &str) -> Result<&SubjectState> {
        self.subjects
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::UnknownSubject(id.to_string()))
    }

    pub fn ages(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.scan_age_weeks).collect()
    }

    /// Mean half extent of the subjects' normalization boxes (mm); the atlas
    /// frame uses it to map normalized coordinates to millimetres.
    pub fn reference_half_extent_mm(&self) -> f64 {
        let n = self.subjects.len().max(1) as f64;
        self.subjects.iter().map(|s| s.transform.half_extent_mm).sum::<f64>() / n
    }

    /// Moving average of the total loss over `window` iterations at the start
    /// and at the end of the log.
    pub fn smoothed_loss(&self, window: usize) -> Option<(f64, f64)> {
        let w = window.min(self.log.len());
        if w == 0 {
            return None;
        }
        let mean = |r: &[LogRecord]| r.iter().map(|l| l.total).sum::<f64>() / r.len() as f64;
        Some((mean(&self.log[..w]), mean(&self.log[self.log.len() - w..])))
    }

    pub fn log_csv(&self) -> String {
        let mut out = String::from("iteration,subject,mse,ce,total\n");
        for r in &self.log {
            let _ = writeln!(out, "{},{},{:.8},{:.8},{:.8}", r.iteration, r.subject, r.mse, r.ce, r.total);
        }
        out
    }
}

/// Sampled coordinates with their intensity targets and labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub coords: Vec<[f64; 3]>,
    /// Row-major `len x channels`.
    pub targets: Vec<f32>,
    pub channels: usize,
    pub labels: Option<Vec<u8>>,
}

impl Batch {
    pub fn gather(batch: &CoordinateBatch, image: &Volume, labels: Option<&LabelMap>) -> Self {
        let n = image.voxels();
        let c = image.channels;
        let mut targets = Vec::with_capacity(batch.entries.len() * c);
        for e in &batch.entries {
            targets.extend((0..c).map(|ch| image.data[ch * n + e.voxel]));
        }
        Batch {
            coords: batch.entries.iter().map(|e| e.coord).collect(),
            targets,
            channels: c,
            labels: labels.map(|l| batch.entries.iter().map(|e| l.labels[e.voxel]).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub mse: f64,
    pub ce: f64,
    pub total: f64,
}

/// What a loss evaluation fits.
#[derive(Clone, Debug)]
pub struct LossSpec {
    /// Intensity channels entering the squared error.
    pub channels: Arc<Vec<usize>>,
    /// Weight of the cross-entropy term; ignored when the batch has no labels.
    pub seg_weight: f64,
    /// Skip gradients of the shared network.
    pub freeze_network: bool,
}

/// Loss and gradients of one batch. Gradients follow [`ParamLayout`]: the
/// network tensors, then latent, condition, rotation, translation.
pub fn batch_gradients<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    subject: &[Matrix<T>; 4],
    grid: [usize; 3],
    batch: &Batch,
    spec: &LossSpec,
) -> Result<(LossParts, Vec<Matrix<T>>)> {
    if batch.is_empty() {
        return Err(Error::DegenerateInput("empty batch".into()));
    }
    let layout = ParamLayout::new(cfg);
    let mut refs = params.tensors();
    refs.extend(subject.iter());
    let total = batch.len();
    let inv = 1.0 / total as f64;
    let with_ce = batch.labels.is_some() && spec.seg_weight > 0.0;
    let parts: Vec<Result<(f64, f64, Vec<Matrix<T>>)>> = (0..total.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(total);
            let coords = &batch.coords[lo..hi];
            let mut tape = Tape::new(&refs);
            if spec.freeze_network {
                for id in 0..layout.network_len {
                    tape.freeze(id);
                }
            }
            let x = tape.input(Matrix::from_vec(
                coords.len(),
                3,
                coords.iter().flat_map(|p| p.map(T::of)).collect(),
            ));
            let st = Arc::new(inr::stencil(grid, coords));
            let heads = record_network(&mut tape, &layout, cfg, x, st, true)?;
            let target = tape.input(Matrix::from_vec(
                coords.len(),
                batch.channels,
                batch.targets[lo * batch.channels..hi * batch.channels]
                    .iter()
                    .map(|&v| T::of(f64::from(v)))
                    .collect(),
            ));
            let mse = tape.squared_error(heads.img, target, spec.channels.clone(), T::of(inv))?;
            let (out, ce_val) = match (&batch.labels, with_ce) {
                (Some(labels), true) => {
                    let l = Arc::new(labels[lo..hi].to_vec());
                    let ce = tape.cross_entropy(heads.logits, l, T::of(spec.seg_weight * inv))?;
                    let ce_val = tape.value(ce).data[0].f64();
                    (tape.sum(mse, ce, T::one(), T::one())?, ce_val)
                }
                _ => (mse, 0.0),
            };
            let mse_val = tape.value(mse).data[0].f64();
            let grads = tape.backward(out, T::one())?;
            Ok((mse_val, ce_val, grads.params))
        })
        .collect();
    let mut loss = LossParts::default();
    let mut grads = Vec::with_capacity(parts.len());
    for p in parts {
        let (m, c, g) = p?;
        loss.mse += m;
        loss.ce += c;
        grads.push(g);
    }
    if with_ce && spec.seg_weight > 0.0 {
        loss.ce /= spec.seg_weight;
    }
    loss.total = loss.mse + spec.seg_weight * loss.ce;
    let grads = tree_reduce(grads).expect("at least one chunk");
    Ok((loss, grads))
}

/// One subject's training inputs.
pub struct TrainingData<'a> {
    pub subject: &'a Subject,
    pub domain: SamplingDomain,
}

impl<'a> TrainingData<'a> {
    pub fn new(subject: &'a Subject) -> Result<Self> {
        Ok(TrainingData {
            subject,
            domain: SamplingDomain::new(&subject.mask)?,
        })
    }

    pub fn batch(&self, positions: &[usize]) -> Batch {
        let cb = self.domain.batch(positions, &self.subject.id);
        Batch::gather(&cb, &self.subject.volumes, Some(&self.subject.labels))
    }
}

/// Loss and gradients of the full training objective for one batch.
pub fn loss_step<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    latent: &LatentGrid<T>,
    rigid: &RigidParams,
    batch: &Batch,
    seg_weight: f64,
) -> Result<(LossParts, Vec<Matrix<T>>)> {
    let spec = LossSpec {
        channels: Arc::new((0..batch.channels).collect()),
        seg_weight,
        freeze_network: false,
    };
    batch_gradients(params, cfg, &inr::subject_tensors(latent, rigid), latent.grid, batch, &spec)
}

pub fn condition_scales(cohort: &[Subject], names: &[String]) -> Result<Vec<ConditionScale>> {
    names
        .iter()
        .map(|name| {
            let vals: Vec<f64> = cohort
                .iter()
                .map(|s| {
                    s.conditions.value(name).ok_or_else(|| {
                        Error::Config(format!("subject {} has no condition `{name}`", s.id))
                    })
                })
                .collect::<Result<_>>()?;
            Ok(ConditionScale {
                name: name.clone(),
                min: vals.iter().cloned().fold(f64::INFINITY, f64::min),
                max: vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            })
        })
        .collect()
}

fn check_cohort(cohort: &[Subject], mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<()> {
    let first = cohort
        .first()
        .ok_or_else(|| Error::Config("training cohort is empty".into()))?;
    for s in cohort {
        if s.volumes.channels != first.volumes.channels || s.labels.classes != first.labels.classes {
            return Err(Error::Config(format!(
                "subject {} has {} channels / {} classes, expected {} / {}",
                s.id, s.volumes.channels, s.labels.classes, first.volumes.channels, first.labels.classes
            )));
        }
    }
    if mcfg.image_channels != first.volumes.channels || mcfg.tissue_classes != first.labels.classes {
        return Err(Error::Config(format!(
            "model expects {} channels / {} classes but the cohort has {} / {}",
            mcfg.image_channels, mcfg.tissue_classes, first.volumes.channels, first.labels.classes
        )));
    }
    if mcfg.condition_dims != tcfg.conditions.len() {
        return Err(Error::Config(format!(
            "condition_dims {} but {} condition names",
            mcfg.condition_dims,
            tcfg.conditions.len()
        )));
    }
    Ok(())
}

pub fn train(cohort: &[Subject], mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<TrainedModel> {
    mcfg.validate()?;
    tcfg.validate()?;
    check_cohort(cohort, mcfg, tcfg)?;
    match tcfg.precision {
        Precision::Single => train_impl::<f32>(cohort, mcfg, tcfg),
        Precision::Double => train_impl::<f64>(cohort, mcfg, tcfg),
    }
}

struct SubjectOpt<T> {
    latent: LatentGrid<T>,
    rotation: Matrix<T>,
    translation: Matrix<T>,
    latent_state: AdamState<T>,
    rotation_state: AdamState<T>,
    translation_state: AdamState<T>,
}

fn rigid_from<T: Real>(r: &Matrix<T>, t: &Matrix<T>) -> RigidParams {
    RigidParams {
        axis_angle: std::array::from_fn(|i| r.data[i].f64()),
        translation: std::array::from_fn(|i| t.data[i].f64()),
    }
}

fn train_impl<T: Real>(cohort: &[Subject], mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<TrainedModel> {
    let seed = tcfg.seed;
    let mut params: ModelParams<T> = init_model(mcfg, derive_seed(seed, "model"))?;
    let scales = condition_scales(cohort, &tcfg.conditions)?;
    let data: Vec<TrainingData> = cohort.iter().map(TrainingData::new).collect::<Result<_>>()?;
    let mut opts: Vec<SubjectOpt<T>> = cohort
        .iter()
        .map(|s| {
            let mut latent = LatentGrid::random(mcfg, &mut rng::stream(seed, &format!("latent/{}", s.id)));
            for (q, sc) in scales.iter().enumerate() {
                let v = s.conditions.value(&sc.name).unwrap_or(0.0);
                latent.xi.data[q] = T::of(sc.to_normalized(v));
            }
            let latent_state = AdamState::for_param(&latent.z);
            SubjectOpt {
                latent,
                rotation: Matrix::zeros(1, 3),
                translation: Matrix::zeros(1, 3),
                latent_state,
                rotation_state: AdamState::new(3),
                translation_state: AdamState::new(3),
            }
        })
        .collect();
    let mut net_states: Vec<AdamState<T>> = params.tensors().into_iter().map(AdamState::for_param).collect();
    let layout = ParamLayout::new(mcfg);
    let adam = AdamConfig::default();
    let mut order_rng = rng::stream(seed, "order");
    let mut sample_rng = rng::stream(seed, "sample");
    let mut log = Vec::new();
    let spec = LossSpec {
        channels: Arc::new((0..mcfg.image_channels).collect()),
        seg_weight: tcfg.seg_loss_weight,
        freeze_network: false,
    };
    let mut iteration = 0;
    for _ in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..cohort.len()).collect();
        order.shuffle(&mut order_rng);
        for &si in &order {
            let d = &data[si];
            let batches = d.domain.len().div_ceil(tcfg.batch_coords);
            for _ in 0..batches {
                let positions = d.domain.draw(tcfg.batch_coords, &mut sample_rng);
                let batch = d.batch(&positions);
                let o = &mut opts[si];
                let subject = [
                    o.latent.z.clone(),
                    o.latent.xi.clone(),
                    o.rotation.clone(),
                    o.translation.clone(),
                ];
                let (loss, grads) = batch_gradients(&params, mcfg, &subject, o.latent.grid, &batch, &spec)?;
                if !loss.total.is_finite() {
                    return Err(Error::numeric(format!("training loss at iteration {iteration}")));
                }
                let net_updates = params
                    .tensors_mut()
                    .into_iter()
                    .zip(&grads[..layout.network_len])
                    .zip(net_states.iter_mut())
                    .map(|((param, grad), state)| Update { param, grad, state })
                    .collect();
                let mut groups = vec![
                    ParamGroup {
                        group: Group::Network,
                        lr: tcfg.lr_network,
                        updates: net_updates,
                    },
                    ParamGroup {
                        group: Group::Latent,
                        lr: tcfg.lr_latent,
                        updates: vec![Update {
                            param: &mut o.latent.z,
                            grad: &grads[layout.latent],
                            state: &mut o.latent_state,
                        }],
                    },
                ];
                if tcfg.learn_rigid {
                    groups.push(ParamGroup {
                        group: Group::Rigid,
                        lr: tcfg.lr_rigid,
                        updates: vec![
                            Update {
                                param: &mut o.rotation,
                                grad: &grads[layout.rotation],
                                state: &mut o.rotation_state,
                            },
                            Update {
                                param: &mut o.translation,
                                grad: &grads[layout.translation],
                                state: &mut o.translation_state,
                            },
                        ],
                    });
                }
                adam_step(&mut groups, &adam)?;
                log.push(LogRecord {
                    iteration,
                    subject: cohort[si].id.clone(),
                    mse: loss.mse,
                    ce: loss.ce,
                    total: loss.total,
                });
                iteration += 1;
            }
        }
    }
    let subjects = cohort
        .iter()
        .zip(opts)
        .zip(&data)
        .map(|((s, o), d)| SubjectState {
            id: s.id.clone(),
            scan_age_weeks: s.scan_age_weeks,
            conditions: crate::phantom::CONDITION_NAMES
                .iter()
                .filter_map(|&n| s.conditions.value(n).map(|v| (n.to_string(), v)))
                .collect(),
            latent: o.latent.cast(),
            rigid: rigid_from(&o.rotation, &o.translation),
            transform: d.domain.transform,
            mask: s.mask.clone(),
        })
        .collect();
    Ok(TrainedModel {
        config: mcfg.clone(),
        train: tcfg.clone(),
        params: params.cast(),
        subjects,
        conditions: scales,
        log,
    })
}

/// Dense per-voxel predictions inside `mask`: intensities (C channels) and
/// tissue probabilities (K channels), zero outside the mask.
pub fn predict_volume(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    latent: &LatentGrid<f32>,
    rigid: &RigidParams,
    mask: &Mask,
    transform: &CoordinateTransform,
) -> Result<(Volume, Volume)> {
    let voxels = mask.indices();
    let coords: Vec<[f64; 3]> = voxels
        .iter()
        .map(|&i| transform.voxel_to_normalized(crate::volume::unravel(mask.dims, i)))
        .collect();
    let (img, probs) = inr::predict(params, cfg, latent, rigid, &coords)?;
    Ok((
        scatter(&img, &voxels, mask)?,
        scatter(&probs, &voxels, mask)?,
    ))
}

/// Writes rows of `values` to the listed voxels of a fresh volume.
pub fn scatter(values: &Matrix<f32>, voxels: &[usize], mask: &Mask) -> Result<Volume> {
    let n = mask.data.len();
    let mut data = vec![0.0f32; values.cols * n];
    for (r, &v) in voxels.iter().enumerate() {
        for c in 0..values.cols {
            data[c * n + v] = values.at(r, c);
        }
    }
    Volume::new(mask.dims, mask.spacing, values.cols, data)
}

/// Label map by per-voxel argmax of a probability volume (ties to the lowest
/// class), background outside `mask`.
pub fn argmax_labels(probs: &Volume, mask: &Mask) -> Result<LabelMap> {
    let n = probs.voxels();
    let labels = (0..n)
        .map(|v| {
            if !mask.data[v] {
                return 0;
            }
            let mut best = 0;
            for k in 1..probs.channels {
                if probs.data[k * n + v] > probs.data[best * n + v] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(probs.dims, probs.spacing, labels, probs.channels)
}

/// Forward pass over a training subject's masked grid with its own latent
/// grid and rigid transform.
pub fn reconstruct_subject(model: &TrainedModel, id: &str) -> Result<(Volume, LabelMap)> {
    let s = model.subject(id)?;
    let (img, probs) = predict_volume(&model.params, &model.config, &s.latent, &s.rigid, &s.mask, &s.transform)?;
    let labels = argmax_labels(&probs, &s.mask)?;
    Ok((img, labels))
}
