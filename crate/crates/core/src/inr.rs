//! Modulated sinusoidal coordinate network.
//!
//! Hidden layer `h` computes `u = W a + b`. Modulated layers emit
//! `sin(omega0 * alpha * u + beta)` where `(alpha; beta) = M z_local + mu`;
//! the shift is deliberately not multiplied by `omega0`. Other layers emit
//! `sin(omega0 * u)`. The image head is linear, the segmentation head is a
//! linear map followed by a softmax.
//!
//! `z_local` is the trilinear interpolation of the subject's latent grid at
//! the (untransformed) subject coordinate, with the condition vector
//! appended. The network itself sees the rigidly transformed coordinate.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{softmax_rows, Matrix, Real, Slot, Stencil, Tape};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::so3::RigidParams;

/// Points per independently evaluated chunk.
pub const CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// 1-based indices of the modulated hidden layers.
    pub modulated_layer_indices: Vec<usize>,
    pub omega0: f64,
    pub latent_channels: usize,
    pub latent_grid: [usize; 3],
    pub condition_dims: usize,
    pub image_channels: usize,
    pub tissue_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    /// Full-size network.
    pub fn paper() -> Self {
        ModelConfig {
            hidden_layers: 5,
            hidden_width: 1024,
            modulated_layer_indices: vec![1, 3, 5],
            omega0: 30.0,
            latent_channels: 256,
            latent_grid: [3, 3, 3],
            condition_dims: 0,
            image_channels: 2,
            tissue_classes: 5,
        }
    }

    /// Small network for CPU runs.
    pub fn desk() -> Self {
        ModelConfig {
            hidden_layers: 3,
            hidden_width: 128,
            modulated_layer_indices: vec![1, 2, 3],
            latent_channels: 32,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_layers == 0 || self.hidden_width == 0 || self.latent_channels == 0 {
            return bad("hidden_layers, hidden_width and latent_channels must be positive".into());
        }
        if self.latent_grid.iter().any(|&x| x == 0) {
            return bad(format!("latent_grid {:?} must be positive", self.latent_grid));
        }
        if let Some(&h) = self
            .modulated_layer_indices
            .iter()
            .find(|&&h| h == 0 || h > self.hidden_layers)
        {
            return bad(format!(
                "modulated layer {h} outside 1..={}",
                self.hidden_layers
            ));
        }
        if self.image_channels == 0 || self.tissue_classes < 2 {
            return bad("need at least one image channel and two tissue classes".into());
        }
        if !(self.omega0.is_finite() && self.omega0 > 0.0) {
            return bad("omega0 must be positive".into());
        }
        Ok(())
    }

    pub fn is_modulated(&self, layer: usize) -> bool {
        self.modulated_layer_indices.contains(&(layer + 1))
    }

    pub fn latent_nodes(&self) -> usize {
        self.latent_grid.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Modulation<T> {
    /// `2H x (D + Q)`.
    pub m: Matrix<T>,
    /// `1 x 2H`, scale half first.
    pub mu: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer<T> {
    pub w: Matrix<T>,
    pub b: Matrix<T>,
    pub modulation: Option<Modulation<T>>,
}

/// Shared network weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub layers: Vec<Layer<T>>,
    pub img_w: Matrix<T>,
    pub img_b: Matrix<T>,
    pub seg_w: Matrix<T>,
    pub seg_b: Matrix<T>,
}

impl<T: Real> ModelParams<T> {
    /// All tensors in a fixed order (see [`ParamLayout`]).
    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.push(&l.w);
            v.push(&l.b);
            if let Some(m) = &l.modulation {
                v.push(&m.m);
                v.push(&m.mu);
            }
        }
        v.extend([&self.img_w, &self.img_b, &self.seg_w, &self.seg_b]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.push(&mut l.w);
            v.push(&mut l.b);
            if let Some(m) = &mut l.modulation {
                v.push(&mut m.m);
                v.push(&mut m.mu);
            }
        }
        v.push(&mut self.img_w);
        v.push(&mut self.img_b);
        v.push(&mut self.seg_w);
        v.push(&mut self.seg_b);
        v
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: l.w.cast(),
                    b: l.b.cast(),
                    modulation: l.modulation.as_ref().map(|m| Modulation {
                        m: m.m.cast(),
                        mu: m.mu.cast(),
                    }),
                })
                .collect(),
            img_w: self.img_w.cast(),
            img_b: self.img_b.cast(),
            seg_w: self.seg_w.cast(),
            seg_b: self.seg_b.cast(),
        }
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let h = cfg.hidden_width;
        let zq = cfg.latent_channels + cfg.condition_dims;
        let ok = self.layers.len() == cfg.hidden_layers
            && self.layers.iter().enumerate().all(|(i, l)| {
                let fan_in = if i == 0 { 3 } else { h };
                l.w.shape() == (h, fan_in)
                    && l.b.shape() == (1, h)
                    && match &l.modulation {
                        Some(m) => cfg.is_modulated(i) && m.m.shape() == (2 * h, zq) && m.mu.shape() == (1, 2 * h),
                        None => !cfg.is_modulated(i),
                    }
            })
            && self.img_w.shape() == (cfg.image_channels, h)
            && self.seg_w.shape() == (cfg.tissue_classes, h);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("model parameters disagree with the configuration".into()))
        }
    }
}

/// Index of every tensor in the flat list handed to a [`Tape`].
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub layers: Vec<(usize, usize, Option<(usize, usize)>)>,
    pub img: (usize, usize),
    pub seg: (usize, usize),
    pub network_len: usize,
    pub latent: usize,
    pub condition: usize,
    pub rotation: usize,
    pub translation: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut next = 0;
        let mut take = || {
            next += 1;
            next - 1
        };
        let layers = (0..cfg.hidden_layers)
            .map(|i| {
                let w = take();
                let b = take();
                let m = cfg.is_modulated(i).then(|| (take(), take()));
                (w, b, m)
            })
            .collect();
        let img = (take(), take());
        let seg = (take(), take());
        let network_len = next;
        ParamLayout {
            layers,
            img,
            seg,
            network_len,
            latent: network_len,
            condition: network_len + 1,
            rotation: network_len + 2,
            translation: network_len + 3,
        }
    }
}

/// Per-subject spatial latent code and explicit condition vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid<T> {
    pub grid: [usize; 3],
    /// One row per grid node (x fastest), `D` columns.
    pub z: Matrix<T>,
    /// `1 x Q`.
    pub xi: Matrix<T>,
}

impl<T: Real> LatentGrid<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        LatentGrid {
            grid: cfg.latent_grid,
            z: Matrix::zeros(cfg.latent_nodes(), cfg.latent_channels),
            xi: Matrix::zeros(1, cfg.condition_dims),
        }
    }

    /// Zero-mean normal draws with standard deviation 0.01 for `z`; `xi` is
    /// left at zero.
    pub fn random(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let mut g = Self::zeros(cfg);
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        for v in g.z.data.iter_mut() {
            *v = T::of(normal.sample(rng));
        }
        g
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.grid[0] * (j + self.grid[1] * k)
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> &[T] {
        self.z.row(self.node_index(i, j, k))
    }

    pub fn cast<U: Real>(&self) -> LatentGrid<U> {
        LatentGrid {
            grid: self.grid,
            z: self.z.cast(),
            xi: self.xi.cast(),
        }
    }

    /// Elementwise `sum_i w_i g_i` over grids of equal shape.
    pub fn weighted_sum(grids: &[&LatentGrid<T>], weights: &[f64]) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| Error::DegenerateInput("no latent grids to combine".into()))?;
        let mut out = LatentGrid {
            grid: first.grid,
            z: Matrix::zeros(first.z.rows, first.z.cols),
            xi: Matrix::zeros(first.xi.rows, first.xi.cols),
        };
        for (g, &w) in grids.iter().zip(weights) {
            if g.z.shape() != out.z.shape() || g.xi.shape() != out.xi.shape() {
                return Err(Error::Shape("latent grids differ in shape".into()));
            }
            let w = T::of(w);
            for (a, &b) in out.z.data.iter_mut().zip(&g.z.data) {
                *a = *a + w * b;
            }
            for (a, &b) in out.xi.data.iter_mut().zip(&g.xi.data) {
                *a = *a + w * b;
            }
        }
        Ok(out)
    }

    /// `(1 - f) a + f b`.
    pub fn lerp(a: &Self, b: &Self, f: f64) -> Result<Self> {
        Self::weighted_sum(&[a, b], &[1.0 - f, f])
    }
}

/// Eight `(node, weight)` pairs for a normalized coordinate. Nodes sit at
/// evenly spaced positions spanning [-1, 1]; coordinates are clamped first.
pub fn trilinear_corners(grid: [usize; 3], x: [f64; 3]) -> [(usize, f64); 8] {
    let axis = |d: usize| -> (usize, usize, f64) {
        let n = grid[d];
        if n == 1 {
            return (0, 0, 0.0);
        }
        let c = if x[d].is_nan() { 0.0 } else { x[d].clamp(-1.0, 1.0) };
        let u = (c + 1.0) * 0.5 * (n - 1) as f64;
        let lo = (u.floor() as usize).min(n - 2);
        (lo, lo + 1, u - lo as f64)
    };
    let ax = [axis(0), axis(1), axis(2)];
    std::array::from_fn(|c| {
        let (bx, by, bz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        let pick = |d: usize, bit: usize| {
            let (lo, hi, f) = ax[d];
            if bit == 0 {
                (lo, 1.0 - f)
            } else {
                (hi, f)
            }
        };
        let (i, wx) = pick(0, bx);
        let (j, wy) = pick(1, by);
        let (k, wz) = pick(2, bz);
        (i + grid[0] * (j + grid[1] * k), wx * wy * wz)
    })
}

/// Local latent vector `[Interp(z, x) ; xi]` of length `D + Q`.
pub fn interp_latent<T: Real>(g: &LatentGrid<T>, x: [f64; 3]) -> Vec<T> {
    let d = g.z.cols;
    let mut out = vec![T::zero(); d + g.xi.len()];
    for (n, w) in trilinear_corners(g.grid, x) {
        let w = T::of(w);
        for (o, &v) in out.iter_mut().zip(g.z.row(n)) {
            *o = *o + w * v;
        }
    }
    out[d..].copy_from_slice(&g.xi.data);
    out
}

pub fn stencil<T: Real>(grid: [usize; 3], coords: &[[f64; 3]]) -> Stencil<T> {
    Stencil {
        nodes: grid.iter().product(),
        corners: coords
            .iter()
            .map(|&x| trilinear_corners(grid, x).map(|(n, w)| (n as u32, T::of(w))))
            .collect(),
    }
}

/// `(alpha, beta) = M z_local + mu`, split in halves.
pub fn modulate<T: Real>(m: &Modulation<T>, z_local: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    if z_local.len() != m.m.cols {
        return Err(Error::Shape(format!(
            "local latent has length {}, modulation expects {}",
            z_local.len(),
            m.m.cols
        )));
    }
    let two_h = m.m.rows;
    let v: Vec<T> = (0..two_h)
        .map(|r| m.m.row(r).iter().zip(z_local).fold(m.mu.data[r], |acc, (&a, &b)| acc + a * b))
        .collect();
    let (a, b) = v.split_at(two_h / 2);
    Ok((a.to_vec(), b.to_vec()))
}

/// Straight-line evaluation of one point: `(intensities, tissue_probs)`.
pub fn forward_point<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    x: [f64; 3],
    z_local: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    if z_local.len() != cfg.latent_channels + cfg.condition_dims {
        return Err(Error::Shape(format!(
            "local latent has length {}, expected {}",
            z_local.len(),
            cfg.latent_channels + cfg.condition_dims
        )));
    }
    let omega = T::of(cfg.omega0);
    let mut a: Vec<T> = x.iter().map(|&v| T::of(v)).collect();
    for (h, layer) in params.layers.iter().enumerate() {
        let u: Vec<T> = (0..layer.w.rows)
            .map(|r| layer.w.row(r).iter().zip(&a).fold(layer.b.data[r], |acc, (&w, &v)| acc + w * v))
            .collect();
        a = match &layer.modulation {
            Some(m) => {
                let (alpha, beta) = modulate(m, z_local)?;
                (0..u.len()).map(|j| (omega * alpha[j] * u[j] + beta[j]).sin()).collect()
            }
            None => u.iter().map(|&v| (omega * v).sin()).collect(),
        };
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("hidden layer {}", h + 1)));
        }
    }
    let head = |w: &Matrix<T>, b: &Matrix<T>| -> Vec<T> {
        (0..w.rows)
            .map(|r| w.row(r).iter().zip(&a).fold(b.data[r], |acc, (&w, &v)| acc + w * v))
            .collect()
    };
    let img = head(&params.img_w, &params.img_b);
    let logits = Matrix::from_vec(1, cfg.tissue_classes, head(&params.seg_w, &params.seg_b));
    let probs = softmax_rows(&logits).data;
    if img.iter().chain(&probs).any(|v| !v.is_finite()) {
        return Err(Error::numeric("output heads"));
    }
    Ok((img, probs))
}

fn uniform_matrix<T: Real>(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Matrix<T> {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| T::of(rng.random_range(-bound..=bound))).collect(),
    )
}

/// Sinusoidal-network initialization with identity modulation
/// (`M = 0`, `mu = (1; 0)`).
pub fn init_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "init_model");
    let h = cfg.hidden_width;
    let deep = |fan_in: usize| (6.0 / fan_in as f64).sqrt() / cfg.omega0;
    let zq = cfg.latent_channels + cfg.condition_dims;
    let layers = (0..cfg.hidden_layers)
        .map(|i| {
            let (fan_in, bound) = if i == 0 { (3, 1.0 / 3.0) } else { (h, deep(h)) };
            let w = uniform_matrix(h, fan_in, bound, &mut rng);
            let modulation = cfg.is_modulated(i).then(|| {
                let mut mu = Matrix::zeros(1, 2 * h);
                mu.data[..h].iter_mut().for_each(|v| *v = T::one());
                Modulation {
                    m: Matrix::zeros(2 * h, zq),
                    mu,
                }
            });
            Layer {
                w,
                b: Matrix::zeros(1, h),
                modulation,
            }
        })
        .collect();
    Ok(ModelParams {
        layers,
        img_w: uniform_matrix(cfg.image_channels, h, deep(h), &mut rng),
        img_b: Matrix::zeros(1, cfg.image_channels),
        seg_w: uniform_matrix(cfg.tissue_classes, h, deep(h), &mut rng),
        seg_b: Matrix::zeros(1, cfg.tissue_classes),
    })
}

/// Slots of the two heads.
pub struct HeadSlots {
    pub img: Slot,
    pub logits: Slot,
}

/// Records the network on `tape`. Parameter indices follow `layout`; the
/// latent/condition/rigid tensors are expected at their layout positions.
pub fn record_network<T: Real>(
    tape: &mut Tape<'_, T>,
    layout: &ParamLayout,
    cfg: &ModelConfig,
    coords: Slot,
    stencil: Arc<Stencil<T>>,
    apply_rigid: bool,
) -> Result<HeadSlots> {
    let omega = T::of(cfg.omega0);
    let mut a = if apply_rigid {
        tape.rigid(coords, layout.rotation, layout.translation)?
    } else {
        coords
    };
    for &(w, b, m) in &layout.layers {
        let u = tape.dense(a, w, b)?;
        a = match m {
            Some((mm, mu)) => {
                let table = tape.mod_table(layout.latent, Some(layout.condition), mm, mu)?;
                let mods = tape.gather(table, stencil.clone())?;
                tape.mod_sine(u, mods, omega)?
            }
            None => tape.sine(u, omega),
        };
    }
    let img = tape.dense(a, layout.img.0, layout.img.1)?;
    let logits = tape.dense(a, layout.seg.0, layout.seg.1)?;
    Ok(HeadSlots { img, logits })
}

/// Subject tensors in tape form: latent, condition, rotation, translation.
pub fn subject_tensors<T: Real>(latent: &LatentGrid<T>, rigid: &RigidParams) -> [Matrix<T>; 4] {
    [
        latent.z.clone(),
        latent.xi.clone(),
        Matrix::from_vec(1, 3, rigid.axis_angle.iter().map(|&v| T::of(v)).collect()),
        Matrix::from_vec(1, 3, rigid.translation.iter().map(|&v| T::of(v)).collect()),
    ]
}

/// Batched prediction at `coords`: the latent is sampled at each coordinate,
/// the network sees `rigid(coords)`. Returns `(intensities B x C,
/// probabilities B x K)`.
pub fn predict<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    latent: &LatentGrid<T>,
    rigid: &RigidParams,
    coords: &[[f64; 3]],
) -> Result<(Matrix<T>, Matrix<T>)> {
    let layout = ParamLayout::new(cfg);
    let subject = subject_tensors(latent, rigid);
    let mut refs = params.tensors();
    refs.extend(subject.iter());
    let chunks: Vec<Result<(Matrix<T>, Matrix<T>)>> = coords
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut tape = Tape::new(&refs);
            let x = tape.input(Matrix::from_vec(
                chunk.len(),
                3,
                chunk.iter().flat_map(|c| c.map(T::of)).collect(),
            ));
            let st = Arc::new(stencil(latent.grid, chunk));
            let heads = record_network(&mut tape, &layout, cfg, x, st, true)?;
            let probs = tape.softmax(heads.logits);
            let img = tape.take_value(heads.img);
            let probs = tape.take_value(probs);
            if !img.all_finite() || !probs.all_finite() {
                return Err(Error::numeric("batched forward pass"));
            }
            Ok((img, probs))
        })
        .collect();
    let mut img = Vec::with_capacity(coords.len() * cfg.image_channels);
    let mut probs = Vec::with_capacity(coords.len() * cfg.tissue_classes);
    for c in chunks {
        let (i, p) = c?;
        img.extend(i.data);
        probs.extend(p.data);
    }
    Ok((
        Matrix::from_vec(coords.len(), cfg.image_channels, img),
        Matrix::from_vec(coords.len(), cfg.tissue_classes, probs),
    ))
}

/// Argmax per row, ties to the lowest index.
pub fn argmax_rows<T: Real>(probs: &Matrix<T>) -> Vec<u8> {
    (0..probs.rows)
        .map(|r| {
            let row = probs.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}
