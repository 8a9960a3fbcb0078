//! Image metrics, latent-space analysis and slice export.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::atlas::{evaluate_latent, AtlasGrid};
use crate::error::{Error, Result};
use crate::inr::LatentGrid;
use crate::training::TrainedModel;
use crate::volume::{linear_index, LabelMap, Mask, Volume};

fn check_same(a: [usize; 3], b: [usize; 3], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: dims {a:?} vs {b:?}")));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over masked voxels of every channel; `+inf` for
/// identical inputs.
pub fn psnr(a: &Volume, b: &Volume, m: &Mask) -> Result<f64> {
    check_same(a.dims, b.dims, "psnr")?;
    check_same(a.dims, m.dims, "psnr mask")?;
    if a.channels != b.channels {
        return Err(Error::Shape("psnr: channel counts differ".into()));
    }
    let idx = m.indices();
    if idx.is_empty() {
        return Err(Error::DegenerateInput("psnr over an empty mask".into()));
    }
    let mut se = 0.0;
    for c in 0..a.channels {
        let (x, y) = (a.channel(c), b.channel(c));
        se += idx.iter().map(|&i| (f64::from(x[i]) - f64::from(y[i])).powi(2)).sum::<f64>();
    }
    let mse = se / (idx.len() * a.channels) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as i64;
    (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect()
}

/// Separable Gaussian smoothing; the window is truncated at the borders and
/// renormalized over the voxels it still covers.
fn smooth(data: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let taps = gaussian_taps();
    let r = (taps.len() / 2) as i64;
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let p = [x, y, z];
                    let (mut acc, mut wsum) = (0.0, 0.0);
                    for (k, &w) in taps.iter().enumerate() {
                        let q = p[axis] as i64 + k as i64 - r;
                        if q < 0 || q >= dims[axis] as i64 {
                            continue;
                        }
                        let mut s = p;
                        s[axis] = q as usize;
                        acc += w * cur[linear_index(dims, s[0], s[1], s[2])];
                        wsum += w;
                    }
                    next[linear_index(dims, x, y, z)] = acc / wsum;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Structural similarity with an 11-voxel Gaussian window (std 1.5),
/// averaged over masked voxels and then over channels.
pub fn ssim3d(a: &Volume, b: &Volume, m: &Mask) -> Result<f64> {
    check_same(a.dims, b.dims, "ssim")?;
    check_same(a.dims, m.dims, "ssim mask")?;
    if a.channels != b.channels {
        return Err(Error::Shape("ssim: channel counts differ".into()));
    }
    let idx = m.indices();
    if idx.is_empty() {
        return Err(Error::DegenerateInput("ssim over an empty mask".into()));
    }
    let mut total = 0.0;
    for c in 0..a.channels {
        let x: Vec<f64> = a.channel(c).iter().map(|&v| f64::from(v)).collect();
        let y: Vec<f64> = b.channel(c).iter().map(|&v| f64::from(v)).collect();
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
        let mx = smooth(&x, a.dims);
        let my = smooth(&y, a.dims);
        let mxx = smooth(&prod(&x, &x), a.dims);
        let myy = smooth(&prod(&y, &y), a.dims);
        let mxy = smooth(&prod(&x, &y), a.dims);
        let s: f64 = idx
            .iter()
            .map(|&i| ssim_formula(mx[i], my[i], mxx[i] - mx[i] * mx[i], myy[i] - my[i] * my[i], mxy[i] - mx[i] * my[i]))
            .sum();
        total += s / idx.len() as f64;
    }
    Ok(total / a.channels as f64)
}

pub(crate) fn ssim_formula(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// `2|A n B| / (|A| + |B|)` for class `k`; 1 when both are empty.
pub fn dice(a: &LabelMap, b: &LabelMap, k: u8) -> Result<f64> {
    check_same(a.dims, b.dims, "dice")?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        let (ia, ib) = (x == k, y == k);
        na += usize::from(ia);
        nb += usize::from(ib);
        both += usize::from(ia && ib);
    }
    Ok(if na + nb == 0 { 1.0 } else { 2.0 * both as f64 / (na + nb) as f64 })
}

/// Dice of every class except background, and their mean.
pub fn foreground_dice(a: &LabelMap, b: &LabelMap) -> Result<(Vec<f64>, f64)> {
    let k = a.classes.max(b.classes);
    let per: Vec<f64> = (1..k as u8).map(|c| dice(a, b, c)).collect::<Result<_>>()?;
    let mean = per.iter().sum::<f64>() / per.len().max(1) as f64;
    Ok((per, mean))
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One evaluated subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub subject: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub dice: Vec<f64>,
    pub mean_dice: f64,
    pub age_error_weeks: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    /// `(mean, population std)` of a per-row quantity.
    pub fn aggregate(&self, f: impl Fn(&MetricRow) -> Option<f64>) -> (f64, f64) {
        let v: Vec<f64> = self.rows.iter().filter_map(f).collect();
        mean_std(&v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject,psnr_db,ssim,dice_csf,dice_cortex,dice_wm,dice_lv,mean_dice,age_error_weeks\n");
        for r in &self.rows {
            let d: Vec<String> = (0..4).map(|k| r.dice.get(k).map_or(String::new(), |v| format!("{v:.6}"))).collect();
            out.push_str(&format!(
                "{},{:.4},{:.6},{},{:.6},{}\n",
                r.subject,
                r.psnr_db,
                r.ssim,
                d.join(","),
                r.mean_dice,
                r.age_error_weeks.map_or(String::new(), |e| format!("{e:.4}"))
            ));
        }
        let (p, ps) = self.aggregate(|r| Some(r.psnr_db).filter(|v| v.is_finite()));
        let (s, ss) = self.aggregate(|r| Some(r.ssim));
        let (d, ds) = self.aggregate(|r| Some(r.mean_dice));
        out.push_str(&format!("mean,{p:.4},{s:.6},,,,,{d:.6},\nstd,{ps:.4},{ss:.6},,,,,{ds:.6},\n"));
        out
    }
}

/// Principal components of flattened latent grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentEmbedding {
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// One row per component.
    pub components: Vec<Vec<f64>>,
    /// One row per subject, one column per component.
    pub scores: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
}

pub fn flatten_latent(g: &LatentGrid<f32>) -> Vec<f64> {
    g.z.data.iter().map(|&v| f64::from(v)).collect()
}

pub fn pca_latents(model: &TrainedModel) -> Result<LatentEmbedding> {
    let ids = model.subjects.iter().map(|s| s.id.clone()).collect();
    let vectors = model.subjects.iter().map(|s| flatten_latent(&s.latent)).collect();
    pca(ids, vectors)
}

/// PCA by singular value decomposition of the centred data matrix. Each
/// component's largest-magnitude loading is made positive.
pub fn pca(ids: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<LatentEmbedding> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::DegenerateInput(format!("PCA needs at least 2 subjects, got {n}")));
    }
    let p = vectors[0].len();
    if vectors.iter().any(|v| v.len() != p) {
        return Err(Error::Shape("latent vectors differ in length".into()));
    }
    let mean: Vec<f64> = (0..p).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, p, |i, j| vectors[i][j] - mean[j]);
    let svd = x.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::numeric("PCA decomposition"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let keep = order.len().min(n - 1).max(1);
    let mut components = Vec::with_capacity(keep);
    let mut ratios = Vec::with_capacity(keep);
    for &k in order.iter().take(keep) {
        let mut comp: Vec<f64> = v_t.row(k).iter().cloned().collect();
        let lead = comp.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            comp.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(comp);
        let s = svd.singular_values[k];
        ratios.push(if total > 0.0 { s * s / total } else { 0.0 });
    }
    let scores = vectors
        .iter()
        .map(|v| {
            components
                .iter()
                .map(|c| c.iter().zip(v).zip(&mean).map(|((a, b), m)| a * (b - m)).sum())
                .collect()
        })
        .collect();
    Ok(LatentEmbedding {
        ids,
        vectors,
        mean,
        components,
        scores,
        explained_variance_ratio: ratios,
    })
}

impl LatentEmbedding {
    pub fn pc_scores(&self, k: usize) -> Vec<f64> {
        self.scores.iter().map(|s| s.get(k).copied().unwrap_or(0.0)).collect()
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(v).zip(&self.mean).map(|((a, b), m)| a * (b - m)).sum())
            .collect()
    }
}

/// Bandwidth multipliers of the median pairwise distance tried by
/// leave-one-out selection.
pub const BANDWIDTH_SCALES: [f64; 6] = [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125];

/// Soft-neighbour regression of a scalar target over reference latents:
/// weights `exp(-|z_q - z_i|^2 / h^2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftNeighborRegressor {
    pub references: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub bandwidth: f64,
    pub median_distance: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

impl SoftNeighborRegressor {
    /// The bandwidth is the median pairwise distance times the scale from
    /// [`BANDWIDTH_SCALES`] with the lowest leave-one-out absolute error.
    pub fn fit(references: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        let n = references.len();
        if n < 2 || targets.len() != n {
            return Err(Error::DegenerateInput("soft-neighbour regression needs >= 2 references".into()));
        }
        let mut d: Vec<f64> = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                d.push(sq_dist(&references[i], &references[j]).sqrt());
            }
        }
        d.sort_by(f64::total_cmp);
        let median = if d.len() % 2 == 1 {
            d[d.len() / 2]
        } else {
            0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2])
        };
        let median = if median > 0.0 { median } else { 1.0 };
        let mut best = (f64::INFINITY, median);
        for &s in &BANDWIDTH_SCALES {
            let h = median * s;
            let mut err = 0.0;
            for i in 0..n {
                let pred = weighted_mean(&references, &targets, &references[i], h, Some(i));
                err += (pred - targets[i]).abs();
            }
            if err < best.0 {
                best = (err, h);
            }
        }
        Ok(SoftNeighborRegressor {
            references,
            targets,
            bandwidth: best.1,
            median_distance: median,
        })
    }

    pub fn predict(&self, query: &[f64]) -> f64 {
        weighted_mean(&self.references, &self.targets, query, self.bandwidth, None)
    }
}

/// Weighted mean with weights computed relative to the nearest reference so
/// that far queries do not underflow.
fn weighted_mean(refs: &[Vec<f64>], targets: &[f64], q: &[f64], h: f64, skip: Option<usize>) -> f64 {
    let d2: Vec<(usize, f64)> = refs
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(i, r)| (i, sq_dist(q, r)))
        .collect();
    let min = d2.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    let (mut num, mut den) = (0.0, 0.0);
    for (i, d) in d2 {
        let w = (-(d - min) / (h * h)).exp();
        num += w * targets[i];
        den += w;
    }
    num / den
}

/// Scan-age regressor over the training latents of `model`.
pub fn age_regressor(model: &TrainedModel) -> Result<SoftNeighborRegressor> {
    SoftNeighborRegressor::fit(
        model.subjects.iter().map(|s| flatten_latent(&s.latent)).collect(),
        model.ages(),
    )
}

pub fn predict_scan_age(model: &TrainedModel, query: &LatentGrid<f32>) -> Result<f64> {
    Ok(age_regressor(model)?.predict(&flatten_latent(query)))
}

/// Intensity volumes along the straight line between two subjects' latent
/// grids (and condition vectors), evaluated in the shared frame.
pub fn interpolate_latents(
    model: &TrainedModel,
    id_a: &str,
    id_b: &str,
    steps: usize,
    grid: &AtlasGrid,
) -> Result<Vec<Volume>> {
    if steps < 2 {
        return Err(Error::Config("interpolation needs at least 2 steps".into()));
    }
    let a = &model.subject(id_a)?.latent;
    let b = &model.subject(id_b)?.latent;
    (0..steps)
        .map(|i| {
            let f = i as f64 / (steps - 1) as f64;
            let g = LatentGrid::lerp(a, b, f)?;
            Ok(evaluate_latent(model, &g, grid)?.0)
        })
        .collect()
}

pub fn mean_abs_difference(a: &Volume, b: &Volume) -> Result<f64> {
    check_same(a.dims, b.dims, "difference")?;
    if a.data.len() != b.data.len() || a.data.is_empty() {
        return Err(Error::Shape("volumes differ in size".into()));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| f64::from((x - y).abs())).sum::<f64>() / a.data.len() as f64)
}

/// Axial, coronal and sagittal mid-slices of one channel as binary PGM (P5)
/// images, intensities mapped from [0, 1] to [0, 255].
pub fn mid_slices_pgm(v: &Volume, channel: usize) -> Result<[Vec<u8>; 3]> {
    if channel >= v.channels {
        return Err(Error::Config(format!("channel {channel} >= {}", v.channels)));
    }
    let d = v.dims;
    let px = |x: usize, y: usize, z: usize| (v.get(channel, x, y, z).clamp(0.0, 1.0) * 255.0).round() as u8;
    let encode = |w: usize, h: usize, f: &dyn Fn(usize, usize) -> u8| {
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        // top row first: flip the second axis
        for r in (0..h).rev() {
            for c in 0..w {
                out.push(f(c, r));
            }
        }
        out
    };
    Ok([
        encode(d[0], d[1], &|c, r| px(c, r, d[2] / 2)),
        encode(d[0], d[2], &|c, r| px(c, d[1] / 2, r)),
        encode(d[1], d[2], &|c, r| px(d[0] / 2, c, r)),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng as _;

    fn vol(dims: [usize; 3], data: Vec<f32>) -> Volume {
        Volume::new(dims, [1.0; 3], 1, data).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let m = Mask::full([4, 4, 4], [1.0; 3]).unwrap();
        let a = vol([4; 3], (0..64).map(|i| (i as f32) / 100.0).collect());
        assert_eq!(psnr(&a, &a, &m).unwrap(), f64::INFINITY);
        let b = vol([4; 3], a.data.iter().map(|v| v + 0.1).collect());
        assert!((psnr(&a, &b, &m).unwrap() - 20.0).abs() < 1e-4);
        assert_eq!(psnr(&a, &b, &m).unwrap(), psnr(&b, &a, &m).unwrap());
        let c = vol([2, 2, 2], vec![0.0; 8]);
        assert!(matches!(psnr(&a, &c, &m), Err(Error::Shape(_))));
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let m = Mask::full([8; 3], [1.0; 3]).unwrap();
        let mut rng = stream(1, "n");
        let a = vol([8; 3], (0..512).map(|_| rng.random_range(0.2..0.8)).collect());
        let mut last = f64::INFINITY;
        for s in [0.01f32, 0.05, 0.1] {
            let b = vol([8; 3], a.data.iter().map(|v| v + s * rng.random_range(-1.0f32..1.0)).collect());
            let p = psnr(&a, &b, &m).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    /// Independent straight-line SSIM: explicit 3D window sums per voxel.
    fn ssim_reference(a: &Volume, b: &Volume, m: &Mask) -> f64 {
        let d = a.dims;
        let r = 5i64;
        let mut total = 0.0;
        let mut count = 0;
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    if !m.data[linear_index(d, x, y, z)] {
                        continue;
                    }
                    let (mut w, mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                    for dz in -r..=r {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let (qx, qy, qz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                                if qx < 0 || qy < 0 || qz < 0 || qx >= d[0] as i64 || qy >= d[1] as i64 || qz >= d[2] as i64 {
                                    continue;
                                }
                                let g = (-((dx * dx + dy * dy + dz * dz) as f64) / (2.0 * 1.5 * 1.5)).exp();
                                let va = f64::from(a.get(0, qx as usize, qy as usize, qz as usize));
                                let vb = f64::from(b.get(0, qx as usize, qy as usize, qz as usize));
                                w += g;
                                sx += g * va;
                                sy += g * vb;
                                sxx += g * va * va;
                                syy += g * vb * vb;
                                sxy += g * va * vb;
                            }
                        }
                    }
                    let (mx, my) = (sx / w, sy / w);
                    let s = ((2.0 * mx * my + 1e-4) * (2.0 * (sxy / w - mx * my) + 9e-4))
                        / ((mx * mx + my * my + 1e-4) * (sxx / w - mx * mx + syy / w - my * my + 9e-4));
                    total += s;
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_reference_and_limits() {
        let mut rng = stream(2, "s");
        let d = [16; 3];
        let a = vol(d, (0..4096).map(|_| rng.random_range(0.0..1.0)).collect());
        let b = vol(d, a.data.iter().map(|v| (v + rng.random_range(-0.2f32..0.2)).clamp(0.0, 1.0)).collect());
        let m = Mask::new(d, [1.0; 3], (0..4096).map(|i| i % 3 != 0).collect()).unwrap();
        let got = ssim3d(&a, &b, &m).unwrap();
        assert!((got - ssim_reference(&a, &b, &m)).abs() < 1e-6);
        assert!((ssim3d(&a, &a, &m).unwrap() - 1.0).abs() < 1e-12);
        let inv = vol(d, a.data.iter().map(|v| 1.0 - v).collect());
        assert!(ssim3d(&a, &inv, &m).unwrap() < 0.2);
        assert!((-1.0..=1.0).contains(&got));
    }

    #[test]
    fn dice_cases() {
        let d = [10, 10, 2];
        let mk = |f: &dyn Fn(usize) -> bool| LabelMap::new(d, [1.0; 3], (0..200).map(|i| u8::from(f(i))).collect(), 2).unwrap();
        let a = mk(&|i| i < 100);
        let b = mk(&|i| (50..150).contains(&i));
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert!((dice(&a, &b, 1).unwrap() - 0.5).abs() < 1e-12);
        let c = mk(&|i| i >= 100);
        assert_eq!(dice(&a, &c, 1).unwrap(), 0.0);
        let empty = mk(&|_| false);
        assert_eq!(dice(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &empty, 1).unwrap(), 0.0);
    }

    #[test]
    fn pca_rank_one_and_sign() {
        let dir = [0.6, -0.8, 0.0];
        let vectors: Vec<Vec<f64>> = (0..6).map(|i| dir.iter().map(|d| d * i as f64 + 1.0).collect()).collect();
        let e = pca((0..6).map(|i| i.to_string()).collect(), vectors.clone()).unwrap();
        assert!(e.explained_variance_ratio[0] > 0.999);
        assert!(e.explained_variance_ratio.iter().sum::<f64>() <= 1.0 + 1e-9);
        // largest-magnitude loading (-0.8) flipped positive
        assert!(e.components[0][1] > 0.0);
        let mut rev = vectors.clone();
        rev.reverse();
        let e2 = pca((0..6).map(|i| i.to_string()).collect(), rev).unwrap();
        let mut s1 = e.pc_scores(0);
        let mut s2 = e2.pc_scores(0);
        s2.reverse();
        for (a, b) in s1.iter_mut().zip(&s2) {
            assert!((*a - b).abs() < 1e-9);
        }
        assert!(pca(vec!["a".into()], vec![vec![1.0]]).is_err());
    }

    #[test]
    fn soft_neighbor_regression() {
        let refs = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![5.0, 5.0]];
        let ages = vec![22.0, 30.0, 36.0];
        let r = SoftNeighborRegressor::fit(refs.clone(), ages.clone()).unwrap();
        for (q, a) in refs.iter().zip(&ages) {
            assert!((r.predict(q) - a).abs() < 0.5);
        }
        let two = SoftNeighborRegressor::fit(vec![vec![0.0], vec![2.0]], vec![20.0, 30.0]).unwrap();
        assert!((two.predict(&[1.0]) - 25.0).abs() < 1e-12);
        // reordering the references does not change predictions
        let r2 = SoftNeighborRegressor::fit(refs.iter().rev().cloned().collect(), ages.iter().rev().cloned().collect()).unwrap();
        assert!((r.predict(&[0.4, 0.3]) - r2.predict(&[0.4, 0.3])).abs() < 1e-12);
    }

    #[test]
    fn pgm_header_and_size() {
        let v = vol([4, 3, 2], (0..24).map(|i| i as f32 / 23.0).collect());
        let [ax, co, sa] = mid_slices_pgm(&v, 0).unwrap();
        assert!(ax.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(ax.len(), b"P5\n4 3\n255\n".len() + 12);
        assert_eq!(co.len(), b"P5\n4 2\n255\n".len() + 8);
        assert_eq!(sa.len(), b"P5\n3 2\n255\n".len() + 6);
    }
}
