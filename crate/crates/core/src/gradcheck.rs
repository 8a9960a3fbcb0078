//! Central-difference verification of the analytic gradients.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng as _;

use crate::engine::{Group, Matrix, Tape};
use crate::error::Result;
use crate::inr::{init_model, subject_tensors, LatentGrid, ModelConfig, ModelParams, ParamLayout};
use crate::rng::{self, Rng};
use crate::so3::RigidParams;
use crate::training::{batch_gradients, Batch, LossSpec};

pub const STEP: f64 = 1e-4;
/// Entries probed per tensor.
const PROBES: usize = 6;
const POINTS: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst error over all groups.
    pub max_rel_error: f64,
    pub per_group: BTreeMap<Group, f64>,
    pub entries_checked: usize,
}

/// Scale of rotation parameters used by [`grad_check_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RotationScale {
    Generic,
    /// `|r|` well below the series switch of the exponential map.
    NearZero,
}

pub fn grad_check(cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    grad_check_with(cfg, seed, RotationScale::Generic)
}

fn fill(m: &mut Matrix<f64>, lo: f64, hi: f64, rng: &mut Rng) {
    m.data.iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
}

/// Full training loss (squared error plus cross-entropy) on a random batch
/// in double precision, with random modulation, latent, condition and rigid
/// values. The error of a tensor is `max |fd - analytic| / max(|fd|, |analytic|)`
/// over its probed entries, the denominator being the tensor-wide maximum.
pub fn grad_check_with(cfg: &ModelConfig, seed: u64, rotation: RotationScale) -> Result<GradCheckReport> {
    let mut cfg = cfg.clone();
    if cfg.condition_dims == 0 {
        cfg.condition_dims = 1;
    }
    cfg.validate()?;
    let mut rng = rng::stream(seed, "gradcheck");
    let mut params: ModelParams<f64> = init_model(&cfg, seed)?;
    for l in &mut params.layers {
        fill(&mut l.b, -0.05, 0.05, &mut rng);
        if let Some(m) = &mut l.modulation {
            fill(&mut m.m, -0.1, 0.1, &mut rng);
            for v in m.mu.data.iter_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
    }
    fill(&mut params.img_b, -0.1, 0.1, &mut rng);
    fill(&mut params.seg_b, -0.1, 0.1, &mut rng);
    let mut latent: LatentGrid<f64> = LatentGrid::zeros(&cfg);
    fill(&mut latent.z, -0.5, 0.5, &mut rng);
    fill(&mut latent.xi, -1.0, 1.0, &mut rng);
    let axis_scale = match rotation {
        RotationScale::Generic => 0.3,
        RotationScale::NearZero => 1e-8,
    };
    let rigid = RigidParams {
        axis_angle: std::array::from_fn(|_| rng.random_range(-1.0..1.0) * axis_scale),
        translation: std::array::from_fn(|_| rng.random_range(-0.1..0.1)),
    };
    let c = cfg.image_channels;
    let batch = Batch {
        coords: (0..POINTS)
            .map(|_| std::array::from_fn(|_| rng.random_range(-0.9..0.9)))
            .collect(),
        targets: (0..POINTS * c).map(|_| rng.random_range(0.0..1.0)).collect(),
        channels: c,
        labels: Some((0..POINTS).map(|_| rng.random_range(0..cfg.tissue_classes as u8)).collect()),
    };
    let spec = LossSpec {
        channels: Arc::new((0..c).collect()),
        seg_weight: 1.0,
        freeze_network: false,
    };
    let layout = ParamLayout::new(&cfg);
    let subject = subject_tensors(&latent, &rigid);
    let (_, analytic) = batch_gradients(&params, &cfg, &subject, latent.grid, &batch, &spec)?;

    let mut all: Vec<Matrix<f64>> = params.tensors().into_iter().cloned().collect();
    all.extend(subject);
    let group_of = |id: usize| {
        if id < layout.network_len {
            Group::Network
        } else if id == layout.latent {
            Group::Latent
        } else if id == layout.condition {
            Group::Condition
        } else {
            Group::Rigid
        }
    };
    let mut per_group: BTreeMap<Group, f64> = BTreeMap::new();
    let mut entries = 0;
    for id in 0..all.len() {
        let len = all[id].len();
        if len == 0 {
            continue;
        }
        let picks: Vec<usize> = if len <= PROBES {
            (0..len).collect()
        } else {
            (0..PROBES).map(|_| rng.random_range(0..len)).collect()
        };
        let mut worst_abs: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for &i in &picks {
            let orig = all[id].data[i];
            all[id].data[i] = orig + STEP;
            let fp = eval_loss(&cfg, &layout, &all, latent.grid, &batch, &spec)?;
            all[id].data[i] = orig - STEP;
            let fm = eval_loss(&cfg, &layout, &all, latent.grid, &batch, &spec)?;
            all[id].data[i] = orig;
            let fd = (fp - fm) / (2.0 * STEP);
            let a = analytic[id].data[i];
            worst_abs = worst_abs.max((fd - a).abs());
            scale = scale.max(fd.abs()).max(a.abs());
            entries += 1;
        }
        let tensor_scale = analytic[id].data.iter().fold(scale, |m, v| m.max(v.abs()));
        let rel = if tensor_scale > 0.0 { worst_abs / tensor_scale } else { worst_abs };
        let e = per_group.entry(group_of(id)).or_insert(0.0);
        *e = e.max(rel);
    }
    let max_rel_error = per_group.values().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_group,
        entries_checked: entries,
    })
}

fn eval_loss(
    cfg: &ModelConfig,
    layout: &ParamLayout,
    all: &[Matrix<f64>],
    grid: [usize; 3],
    batch: &Batch,
    spec: &LossSpec,
) -> Result<f64> {
    let params = unflatten(cfg, layout, all);
    let subject = [
        all[layout.latent].clone(),
        all[layout.condition].clone(),
        all[layout.rotation].clone(),
        all[layout.translation].clone(),
    ];
    Ok(batch_gradients(&params, cfg, &subject, grid, batch, spec)?.0.total)
}

fn unflatten(cfg: &ModelConfig, layout: &ParamLayout, all: &[Matrix<f64>]) -> ModelParams<f64> {
    let mut p: ModelParams<f64> = init_model(cfg, 0).expect("validated config");
    for (t, src) in p.tensors_mut().into_iter().zip(&all[..layout.network_len]) {
        t.data.copy_from_slice(&src.data);
    }
    p
}

/// Checks an affine graph `W2 (W1 x + b1) + b2` under a squared error. The
/// loss is quadratic in every single entry, so central differences are exact
/// up to rounding.
pub fn linear_grad_check(seed: u64) -> Result<f64> {
    let mut rng = rng::stream(seed, "linear");
    let mut mats = vec![
        Matrix::zeros(4, 3),
        Matrix::zeros(1, 4),
        Matrix::zeros(2, 4),
        Matrix::zeros(1, 2),
    ];
    for m in &mut mats {
        fill(m, -1.0, 1.0, &mut rng);
    }
    let mut x = Matrix::zeros(5, 3);
    fill(&mut x, -1.0, 1.0, &mut rng);
    let mut t = Matrix::zeros(5, 2);
    fill(&mut t, -1.0, 1.0, &mut rng);
    let run = |mats: &[Matrix<f64>], grad: bool| -> Result<(f64, Vec<Matrix<f64>>)> {
        let refs: Vec<&Matrix<f64>> = mats.iter().collect();
        let mut tape = Tape::new(&refs);
        let xi = tape.input(x.clone());
        let h = tape.dense(xi, 0, 1)?;
        let y = tape.dense(h, 2, 3)?;
        let ti = tape.input(t.clone());
        let l = tape.squared_error(y, ti, Arc::new(vec![0, 1]), 0.5)?;
        let v = tape.value(l).data[0];
        let g = if grad { tape.backward(l, 1.0)?.params } else { Vec::new() };
        Ok((v, g))
    };
    let (_, analytic) = run(&mats, true)?;
    let mut worst: f64 = 0.0;
    for p in 0..mats.len() {
        let scale = analytic[p].data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..mats[p].len() {
            let orig = mats[p].data[i];
            mats[p].data[i] = orig + STEP;
            let fp = run(&mats, false)?.0;
            mats[p].data[i] = orig - STEP;
            let fm = run(&mats, false)?.0;
            mats[p].data[i] = orig;
            let fd = (fp - fm) / (2.0 * STEP);
            let a = analytic[p].data[i];
            worst = worst.max((fd - a).abs() / scale.max(f64::MIN_POSITIVE));
        }
    }
    Ok(worst)
}
