//! Named experiment pipelines and their building blocks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::adaptation::{adapt, estimate_conditions, predict_segmentation, translate_modality, AdaptConfig, AdaptResult};
use crate::analysis::{
    age_regressor, flatten_latent, foreground_dice, mean_std, psnr, ssim3d, MetricReport, MetricRow,
    SoftNeighborRegressor,
};
use crate::atlas::{generate_atlas, AtlasGrid, AtlasRequest};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::inr::ModelConfig;
use crate::phantom::{
    generate_cohort, generate_subject, in_bridge_core, CohortSpec, PhantomSpec, Subject, VENTRICLE, WHITE_MATTER,
};
use crate::rng::derive_seed;
use crate::so3;
use crate::training::{train, TrainConfig, TrainedModel};
use crate::volume::{unravel, voxel_count};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recipe {
    SegEval,
    BirthAge,
    LvConditioning,
    AccConditioning,
    ModalityTranslation,
    AblationLatentShape,
    AblationRigid,
    AblationConditioning,
}

impl Recipe {
    pub const ALL: [Recipe; 8] = [
        Recipe::SegEval,
        Recipe::BirthAge,
        Recipe::LvConditioning,
        Recipe::AccConditioning,
        Recipe::ModalityTranslation,
        Recipe::AblationLatentShape,
        Recipe::AblationRigid,
        Recipe::AblationConditioning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::SegEval => "seg-eval",
            Recipe::BirthAge => "birth-age",
            Recipe::LvConditioning => "lv-conditioning",
            Recipe::AccConditioning => "acc-conditioning",
            Recipe::ModalityTranslation => "modality-translation",
            Recipe::AblationLatentShape => "ablation-latent-shape",
            Recipe::AblationRigid => "ablation-rigid",
            Recipe::AblationConditioning => "ablation-conditioning",
        }
    }

    /// The experiment a recipe reproduces on phantoms.
    pub fn description(self) -> &'static str {
        match self {
            Recipe::SegEval => "atlas-based segmentation and scan-age prediction of unseen subjects",
            Recipe::BirthAge => "birth-age conditioning and its estimation at adaptation",
            Recipe::LvConditioning => "ventricular-volume conditioning of the atlas",
            Recipe::AccConditioning => "callosal agenesis conditioning of the atlas",
            Recipe::ModalityTranslation => "translation from one observed modality to the other",
            Recipe::AblationLatentShape => "spatial latent grid versus a single latent vector",
            Recipe::AblationRigid => "recovery of injected rotations by rigid alignment",
            Recipe::AblationConditioning => "explicit versus implicit estimation of a condition",
        }
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown recipe `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// Human-readable bound, e.g. `> 0.85`.
    pub bound: String,
    pub passed: bool,
}

impl Check {
    pub fn above(name: &str, value: f64, threshold: f64) -> Self {
        Check {
            name: name.into(),
            value,
            bound: format!("> {threshold}"),
            passed: value > threshold,
        }
    }

    pub fn below(name: &str, value: f64, threshold: f64) -> Self {
        Check {
            name: name.into(),
            value,
            bound: format!("< {threshold}"),
            passed: value < threshold,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RecipeReport {
    pub recipe: String,
    pub metrics: Vec<(String, f64)>,
    pub checks: Vec<Check>,
    pub files: Vec<PathBuf>,
}

impl RecipeReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("kind,name,value,bound,passed\n");
        for (k, v) in &self.metrics {
            let _ = writeln!(out, "metric,{k},{v:.6},,");
        }
        for c in &self.checks {
            let _ = writeln!(out, "check,{},{:.6},{},{}", c.name, c.value, c.bound, c.passed);
        }
        out
    }
}

/// Output directory that records every file written into it.
pub struct Outputs {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(p, contents)?;
        Ok(())
    }
}

/// Held-out subjects drawn from the same distribution as the training cohort
/// with an independent seed.
pub fn held_out_cohort(cohort: &CohortSpec, count: usize, seed: u64) -> Result<Vec<Subject>> {
    generate_cohort(
        &CohortSpec {
            count,
            id_prefix: "held".into(),
            ..cohort.clone()
        },
        derive_seed(seed, "held-out"),
    )
}

pub fn train_on(cohort: &[Subject], model: &ModelConfig, train_cfg: &TrainConfig) -> Result<TrainedModel> {
    let model = ModelConfig {
        condition_dims: train_cfg.conditions.len(),
        ..model.clone()
    };
    train(cohort, &model, train_cfg)
}

/// Adapts to every held-out subject using all modalities and scores the
/// derived segmentation and scan age.
pub fn evaluate_held_out(model: &TrainedModel, held: &[Subject], cfg: &AdaptConfig) -> Result<(MetricReport, Vec<AdaptResult>)> {
    let regressor = age_regressor(model)?;
    let mut report = MetricReport::default();
    let mut results = Vec::new();
    for s in held {
        let res = adapt(model, &s.volumes, &s.mask, cfg)?;
        report.rows.push(score_subject(model, s, &res, Some(&regressor))?);
        results.push(res);
    }
    Ok((report, results))
}

pub fn score_subject(
    model: &TrainedModel,
    s: &Subject,
    res: &AdaptResult,
    ages: Option<&SoftNeighborRegressor>,
) -> Result<MetricRow> {
    let (_, labels) = predict_segmentation(model, res)?;
    let (dice, mean_dice) = foreground_dice(&labels, &s.labels)?;
    Ok(MetricRow {
        subject: s.id.clone(),
        psnr_db: res.fit_psnr,
        ssim: res.fit_ssim,
        dice,
        mean_dice,
        age_error_weeks: ages.map(|r| r.predict(&flatten_latent(&res.latent)) - s.scan_age_weeks),
    })
}

pub fn mean_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().map(f64::abs).collect();
    mean_std(&v).0
}

fn condition_index(model: &TrainedModel, name: &str) -> Result<usize> {
    model
        .conditions
        .iter()
        .position(|c| c.name == name)
        .ok_or_else(|| Error::Config(format!("model was not trained with condition `{name}`")))
}

/// Atlas LV volume (mm^3) per age (rows) and normalized LV condition value
/// (columns), all other conditions at their regressed values.
pub fn lv_volume_table(model: &TrainedModel, ages: &[f64], xis: &[f64], sigma_weeks: f64, grid: &AtlasGrid) -> Result<Vec<Vec<f64>>> {
    condition_index(model, "lv_fraction")?;
    let voxel_mm3: f64 = grid.spacing.iter().product();
    ages.iter()
        .map(|&t| {
            xis.iter()
                .map(|&xi| {
                    let atlas = generate_atlas(
                        model,
                        &AtlasRequest {
                            t_weeks: t,
                            sigma_weeks,
                            condition_override: vec![("lv_fraction".into(), xi)],
                            grid: grid.clone(),
                            modalities: Vec::new(),
                        },
                    )?;
                    Ok(atlas.labels.count(VENTRICLE) as f64 * voxel_mm3)
                })
                .collect()
        })
        .collect()
}

/// WM voxels of the atlas inside the callosal bridge region with the
/// `cc_absent` condition at +1 and at -1.
/// Map from canonical phantom positions into a model's shared frame, read
/// off the learned transforms: `exp(r_i) exp(inj_i) q + t_i` for every
/// training subject, averaged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SharedFrame {
    pub rotation: so3::Mat3,
    pub translation_mm: [f64; 3],
}

impl SharedFrame {
    pub fn estimate(model: &TrainedModel, cohort: &[Subject]) -> Result<Self> {
        let mut rots = Vec::new();
        let mut t = [0.0; 3];
        for s in &model.subjects {
            let c = cohort
                .iter()
                .find(|c| c.id == s.id)
                .ok_or_else(|| Error::UnknownSubject(s.id.clone()))?;
            rots.push(so3::mat_mul(&so3::exp(s.rigid.axis_angle), &so3::exp(c.rotation)));
            (0..3).for_each(|d| t[d] += s.rigid.translation[d]);
        }
        if rots.is_empty() {
            return Err(Error::DegenerateInput("model has no subjects".into()));
        }
        let h = model.reference_half_extent_mm();
        Ok(SharedFrame {
            rotation: chordal_mean(&rots),
            translation_mm: t.map(|v| v / rots.len() as f64 * h),
        })
    }

    /// Canonical position of a shared-frame position, both in mm.
    pub fn to_canonical(&self, y_mm: [f64; 3]) -> [f64; 3] {
        let d: [f64; 3] = std::array::from_fn(|i| y_mm[i] - self.translation_mm[i]);
        so3::mat_vec(&so3::transpose(&self.rotation), d)
    }
}

/// WM voxel counts in the bridge core of the atlas with the callosum
/// condition at +1 (absent) and -1 (present).
pub fn bridge_wm_counts(model: &TrainedModel, frame: &SharedFrame, t_weeks: f64, sigma_weeks: f64, grid: &AtlasGrid) -> Result<(usize, usize)> {
    condition_index(model, "cc_absent")?;
    let region: Vec<bool> = (0..voxel_count(grid.dims))
        .map(|i| in_bridge_core(frame.to_canonical(grid.voxel_mm(unravel(grid.dims, i))), t_weeks))
        .collect();
    let count = |xi: f64| -> Result<usize> {
        let atlas = generate_atlas(
            model,
            &AtlasRequest {
                t_weeks,
                sigma_weeks,
                condition_override: vec![("cc_absent".into(), xi)],
                grid: grid.clone(),
                modalities: Vec::new(),
            },
        )?;
        Ok(atlas
            .labels
            .labels
            .iter()
            .zip(&region)
            .filter(|(&l, &r)| r && l == WHITE_MATTER)
            .count())
    };
    Ok((count(1.0)?, count(-1.0)?))
}

/// Adapts on modality 0 only and scores the translated modality 1 against
/// the acquired one: `(psnr, ssim)` per subject.
pub fn translation_scores(model: &TrainedModel, held: &[Subject], cfg: &AdaptConfig) -> Result<Vec<(f64, f64)>> {
    let cfg = AdaptConfig {
        observed_channels: vec![0],
        ..cfg.clone()
    };
    held.iter()
        .map(|s| {
            let res = adapt(model, &s.volumes.select_channels(&[0])?, &s.mask, &cfg)?;
            let pred = translate_modality(model, &res, 1)?;
            let truth = s.volumes.select_channels(&[1])?;
            Ok((psnr(&pred, &truth, &s.mask)?, ssim3d(&pred, &truth, &s.mask)?))
        })
        .collect()
}

/// Adapts to a single phantom with a known LV fraction and returns
/// `(estimated, true)` normalized condition values.
pub fn lv_recovery(model: &TrainedModel, lv_fraction: f64, age_weeks: f64, grid: usize, spacing: f64, cfg: &AdaptConfig, seed: u64) -> Result<(f64, f64)> {
    let q = condition_index(model, "lv_fraction")?;
    let s = generate_subject(&PhantomSpec {
        id: "lv-probe".into(),
        grid,
        spacing,
        age_weeks,
        lv_fraction,
        seed: derive_seed(seed, "lv-probe"),
        ..PhantomSpec::default()
    })?;
    let res = adapt(model, &s.volumes, &s.mask, cfg)?;
    let est = estimate_conditions(model, &res)?;
    Ok((est[q].normalized, model.conditions[q].to_normalized(lv_fraction)))
}

fn ablation_cohort(cfg: &RunConfig) -> CohortSpec {
    CohortSpec {
        count: cfg.ablation.count,
        grid: cfg.ablation.grid,
        spacing: cfg.ablation.spacing,
        ..cfg.cohort.clone()
    }
}

fn ablation_train(cfg: &RunConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: cfg.ablation.epochs,
        conditions: Vec::new(),
        ..cfg.train.clone()
    }
}

/// Mean held-out foreground Dice with the configured latent grid and with a
/// single latent vector: `(spatial, single)`.
pub fn latent_shape_ablation(cfg: &RunConfig, seed: u64) -> Result<(f64, f64)> {
    let spec = ablation_cohort(cfg);
    let cohort = generate_cohort(&spec, seed)?;
    let held = held_out_cohort(&spec, cfg.ablation.held_out, seed)?;
    let tcfg = ablation_train(cfg, seed);
    let adapt_cfg = AdaptConfig { seed, ..cfg.adapt.clone() };
    let mut out = [0.0; 2];
    for (k, grid) in [cfg.model.latent_grid, [1, 1, 1]].into_iter().enumerate() {
        let model = train_on(&cohort, &ModelConfig { latent_grid: grid, ..cfg.model.clone() }, &tcfg)?;
        let (report, _) = evaluate_held_out(&model, &held, &adapt_cfg)?;
        out[k] = report.aggregate(|r| Some(r.mean_dice)).0;
    }
    Ok((out[0], out[1]))
}

/// Rotation closest in Frobenius norm to the mean of `rots`.
pub fn chordal_mean(rots: &[so3::Mat3]) -> so3::Mat3 {
    let mut sum = nalgebra::Matrix3::<f64>::zeros();
    for r in rots {
        sum += nalgebra::Matrix3::from_fn(|i, j| r[i][j]);
    }
    let svd = sum.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = nalgebra::Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let m = u * d * v_t;
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

/// Per-subject rotation error (degrees) of learned alignments against the
/// injected rotations. A learned map `exp(r_i)` undoes the injection when
/// `exp(r_i) exp(inj_i)` is the same rotation `G` for every subject; `G`
/// (the arbitrary orientation of the shared frame) is their chordal mean.
pub fn alignment_errors_deg(learned: &[[f64; 3]], injected: &[[f64; 3]]) -> Vec<f64> {
    let composed: Vec<so3::Mat3> = learned
        .iter()
        .zip(injected)
        .map(|(r, q)| so3::mat_mul(&so3::exp(*r), &so3::exp(*q)))
        .collect();
    let g_t = so3::transpose(&chordal_mean(&composed));
    composed
        .iter()
        .map(|m| so3::angle(&so3::mat_mul(&g_t, m)).to_degrees())
        .collect()
}

/// Trains with rigid alignment on a cohort with injected rotations and
/// returns the per-subject alignment errors in degrees.
pub fn rigid_ablation(cfg: &RunConfig, seed: u64) -> Result<Vec<f64>> {
    let mut spec = ablation_cohort(cfg);
    spec.conditions.max_rotation_deg = cfg.ablation.max_rotation_deg;
    let cohort = generate_cohort(&spec, seed)?;
    let tcfg = TrainConfig {
        learn_rigid: true,
        ..ablation_train(cfg, seed)
    };
    let model = train_on(&cohort, &cfg.model, &tcfg)?;
    let learned: Vec<[f64; 3]> = model.subjects.iter().map(|s| s.rigid.axis_angle).collect();
    let injected: Vec<[f64; 3]> = cohort.iter().map(|s| s.rotation).collect();
    Ok(alignment_errors_deg(&learned, &injected))
}

/// Birth-age MAE (weeks) on held-out subjects from the adapted condition of
/// an explicitly conditioned model, and from soft-neighbour regression on
/// latents of an unconditioned one: `(explicit, implicit)`.
pub fn conditioning_ablation(cfg: &RunConfig, seed: u64) -> Result<(f64, f64)> {
    let mut spec = ablation_cohort(cfg);
    spec.age_range = cfg.ablation.birth_cohort_ages;
    spec.conditions.birth_age_weeks = Some(cfg.ablation.birth_age_weeks);
    let cohort = generate_cohort(&spec, seed)?;
    let held = held_out_cohort(&spec, cfg.ablation.held_out, seed)?;
    let adapt_cfg = AdaptConfig { seed, ..cfg.adapt.clone() };
    let birth = |s: &Subject| s.conditions.birth_age_weeks.expect("birth-age cohort");

    let explicit_cfg = TrainConfig {
        conditions: vec!["birth_age_weeks".into()],
        ..ablation_train(cfg, seed)
    };
    let explicit = train_on(&cohort, &cfg.model, &explicit_cfg)?;
    let mut e_err = Vec::new();
    for s in &held {
        let res = adapt(&explicit, &s.volumes, &s.mask, &adapt_cfg)?;
        e_err.push(estimate_conditions(&explicit, &res)?[0].physical - birth(s));
    }

    let implicit = train_on(&cohort, &cfg.model, &ablation_train(cfg, seed))?;
    let reg = SoftNeighborRegressor::fit(
        implicit.subjects.iter().map(|s| flatten_latent(&s.latent)).collect(),
        cohort.iter().map(birth).collect(),
    )?;
    let mut i_err = Vec::new();
    for s in &held {
        let res = adapt(&implicit, &s.volumes, &s.mask, &adapt_cfg)?;
        i_err.push(reg.predict(&flatten_latent(&res.latent)) - birth(s));
    }
    Ok((mean_abs(e_err), mean_abs(i_err)))
}

fn train_main(cfg: &RunConfig, conditions: &[&str], cc_probability: Option<f64>, out: &mut Outputs) -> Result<(Vec<Subject>, TrainedModel)> {
    let mut spec = cfg.cohort.clone();
    if let Some(p) = cc_probability {
        spec.conditions.cc_present_probability = p;
    }
    let cohort = generate_cohort(&spec, cfg.seed)?;
    let mut tcfg = cfg.train_config();
    if !conditions.is_empty() {
        tcfg.conditions = conditions.iter().map(|s| s.to_string()).collect();
    }
    let model = train_on(&cohort, &cfg.model, &tcfg)?;
    checkpoint::save(&model, &out.path("model.ckpt"))?;
    out.write("training_log.csv", model.log_csv())?;
    Ok((cohort, model))
}

/// Runs a recipe, writing its artifacts, `summary.csv` and `manifest.json`
/// into `cfg.out`.
pub fn run(recipe: Recipe, cfg: &RunConfig) -> Result<RecipeReport> {
    cfg.validate()?;
    let mut out = Outputs::new(&cfg.out)?;
    let mut report = RecipeReport {
        recipe: recipe.name().into(),
        ..Default::default()
    };
    let adapt_cfg = AdaptConfig {
        seed: cfg.seed,
        ..cfg.adapt.clone()
    };
    let ev = &cfg.evaluation;
    match recipe {
        Recipe::SegEval => {
            let (_, model) = train_main(cfg, &[], None, &mut out)?;
            let held = held_out_cohort(&cfg.cohort, ev.held_out, cfg.seed)?;
            let (metrics, _) = evaluate_held_out(&model, &held, &adapt_cfg)?;
            out.write("report.csv", metrics.to_csv())?;
            let dice = metrics.aggregate(|r| Some(r.mean_dice)).0;
            let mae = mean_abs(metrics.rows.iter().filter_map(|r| r.age_error_weeks));
            report.metrics.push(("mean_foreground_dice".into(), dice));
            report.metrics.push(("scan_age_mae_weeks".into(), mae));
            report.checks.push(Check::above("mean_foreground_dice", dice, 0.85));
            report.checks.push(Check::below("scan_age_mae_weeks", mae, 1.0));
        }
        Recipe::BirthAge => {
            let mut c = cfg.clone();
            c.cohort.age_range = cfg.ablation.birth_cohort_ages;
            c.cohort.conditions.birth_age_weeks = Some(cfg.ablation.birth_age_weeks);
            let (_, model) = train_main(&c, &["birth_age_weeks"], None, &mut out)?;
            let held = held_out_cohort(&c.cohort, ev.held_out, cfg.seed)?;
            let mut rows = String::from("subject,true_birth_age_weeks,estimated_birth_age_weeks\n");
            let mut errs = Vec::new();
            for s in &held {
                let res = adapt(&model, &s.volumes, &s.mask, &adapt_cfg)?;
                let est = estimate_conditions(&model, &res)?[0].physical;
                let truth = s.conditions.birth_age_weeks.unwrap_or(f64::NAN);
                let _ = writeln!(rows, "{},{truth:.4},{est:.4}", s.id);
                errs.push(est - truth);
            }
            out.write("birth_age.csv", rows)?;
            report.metrics.push(("birth_age_mae_weeks".into(), mean_abs(errs)));
        }
        Recipe::LvConditioning => {
            let (_, model) = train_main(cfg, &["lv_fraction"], None, &mut out)?;
            let grid = AtlasGrid::covering(&model, ev.resolution_mm)?;
            let xis = [-1.0, -0.5, 0.0, 0.5, 1.0];
            let table = lv_volume_table(&model, &ev.atlas_ages, &xis, ev.sigma_weeks, &grid)?;
            let mut csv = String::from("age_weeks,xi_m1,xi_m0.5,xi_0,xi_0.5,xi_1\n");
            let mut monotone = 0;
            for (t, row) in ev.atlas_ages.iter().zip(&table) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.1}")).collect();
                let _ = writeln!(csv, "{t},{}", cells.join(","));
                monotone += usize::from(row.windows(2).all(|w| w[1] > w[0]));
            }
            out.write("lv_volumes.csv", csv)?;
            let mid = 0.5 * (cfg.cohort.age_range.0 + cfg.cohort.age_range.1);
            let (est, truth) = lv_recovery(&model, 0.05, mid, cfg.cohort.grid, cfg.cohort.spacing, &adapt_cfg, cfg.seed)?;
            report.metrics.push(("lv_xi_estimate".into(), est));
            report.metrics.push(("lv_xi_truth".into(), truth));
            report.checks.push(Check::above("ages_with_increasing_lv", monotone as f64, ev.atlas_ages.len() as f64 - 0.5));
            report.checks.push(Check::below("lv_xi_error", (est - truth).abs(), 0.15));
        }
        Recipe::AccConditioning => {
            let (cohort, model) = train_main(cfg, &["cc_absent"], Some(0.5), &mut out)?;
            let grid = AtlasGrid::covering(&model, ev.resolution_mm)?;
            let mid = 0.5 * (cfg.cohort.age_range.0 + cfg.cohort.age_range.1);
            let frame = SharedFrame::estimate(&model, &cohort)?;
            let (absent, present) = bridge_wm_counts(&model, &frame, mid, ev.sigma_weeks, &grid)?;
            report.metrics.push(("bridge_wm_absent".into(), absent as f64));
            report.metrics.push(("bridge_wm_present".into(), present as f64));
            report.checks.push(Check::above(
                "bridge_wm_ratio",
                present as f64 / (absent as f64).max(1.0),
                10.0,
            ));
        }
        Recipe::ModalityTranslation => {
            let (_, model) = train_main(cfg, &[], None, &mut out)?;
            let held = held_out_cohort(&cfg.cohort, ev.held_out, cfg.seed)?;
            let scores = translation_scores(&model, &held, &adapt_cfg)?;
            let mut csv = String::from("subject,psnr_db,ssim\n");
            for (s, (p, q)) in held.iter().zip(&scores) {
                let _ = writeln!(csv, "{},{p:.4},{q:.6}", s.id);
            }
            out.write("translation.csv", csv)?;
            let p = mean_std(&scores.iter().map(|s| s.0).collect::<Vec<_>>()).0;
            let q = mean_std(&scores.iter().map(|s| s.1).collect::<Vec<_>>()).0;
            report.checks.push(Check::above("translation_psnr_db", p, 25.0));
            report.checks.push(Check::above("translation_ssim", q, 0.85));
        }
        Recipe::AblationLatentShape => {
            let mut csv = String::from("seed,spatial_dice,single_dice\n");
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for &seed in &cfg.ablation.seeds {
                let (d3, d1) = latent_shape_ablation(cfg, seed)?;
                let _ = writeln!(csv, "{seed},{d3:.6},{d1:.6}");
                a.push(d3);
                b.push(d1);
            }
            out.write("ablation_latent_shape.csv", csv)?;
            let (d3, d1) = (mean_std(&a).0, mean_std(&b).0);
            report.metrics.push(("spatial_dice".into(), d3));
            report.metrics.push(("single_dice".into(), d1));
            report.checks.push(Check::above("spatial_minus_single_dice", d3 - d1, -0.02));
        }
        Recipe::AblationRigid => {
            let mut csv = String::from("seed,mean_error_deg,max_error_deg\n");
            let mut all = Vec::new();
            for &seed in &cfg.ablation.seeds {
                let e = rigid_ablation(cfg, seed)?;
                let max = e.iter().copied().fold(0.0, f64::max);
                let _ = writeln!(csv, "{seed},{:.4},{max:.4}", mean_std(&e).0);
                all.extend(e);
            }
            out.write("ablation_rigid.csv", csv)?;
            let worst = all.iter().copied().fold(0.0, f64::max);
            report.metrics.push(("mean_rotation_error_deg".into(), mean_std(&all).0));
            report.checks.push(Check::below("max_rotation_error_deg", worst, 2.0));
        }
        Recipe::AblationConditioning => {
            let mut csv = String::from("seed,explicit_mae_weeks,implicit_mae_weeks\n");
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for &seed in &cfg.ablation.seeds {
                let (e, i) = conditioning_ablation(cfg, seed)?;
                let _ = writeln!(csv, "{seed},{e:.4},{i:.4}");
                a.push(e);
                b.push(i);
            }
            out.write("ablation_conditioning.csv", csv)?;
            let (e, i) = (mean_std(&a).0, mean_std(&b).0);
            report.metrics.push(("explicit_mae_weeks".into(), e));
            report.metrics.push(("implicit_mae_weeks".into(), i));
            report.checks.push(Check::below("explicit_minus_implicit_mae", e - i, 0.0));
        }
    }
    out.write("summary.csv", report.summary_csv())?;
    out.write("config.toml", cfg.to_toml()?)?;
    report.files = out.files.clone();
    let manifest = serde_json::json!({
        "recipe": recipe.name(),
        "description": recipe.description(),
        "seed": cfg.seed,
        "config": "config.toml",
        "files": out.files.iter().map(|p| p.display().to_string()).chain([out.dir.join("manifest.json").display().to_string()]).collect::<Vec<_>>(),
        "passed": report.passed(),
    });
    fs::write(out.path("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    report.files = out.files;
    Ok(report)
}
