//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Always exits 0 once every criterion has been measured; a FAIL line is a
//! measured result, not a crash.

use std::time::Instant;

use inr_atlas::adaptation::{estimate_conditions, AdaptConfig, AdaptResult};
use inr_atlas::analysis::{dice, mean_abs_difference, mean_std, pca_latents, pearson, ssim3d};
use inr_atlas::atlas::{average_pool, evaluate_latent, generate_atlas, kernel_weights, AgeNormalization, AtlasGrid, AtlasRequest};
use inr_atlas::checkpoint;
use inr_atlas::config::{RunConfig, Scale};
use inr_atlas::gradcheck::{grad_check_with, RotationScale};
use inr_atlas::inr::{interp_latent, LatentGrid, ModelConfig};
use inr_atlas::nifti;
use inr_atlas::phantom::{cohort_specs, generate_cohort, generate_subject, CohortSpec, PhantomSpec, Subject, VENTRICLE, WHITE_MATTER};
use inr_atlas::recipes::{
    bridge_wm_counts, conditioning_ablation, evaluate_held_out, held_out_cohort, latent_shape_ablation, lv_volume_table,
    rigid_ablation, train_on, translation_scores, SharedFrame,
};
use inr_atlas::rng::stream;
use inr_atlas::so3;
use inr_atlas::training::{reconstruct_subject, TrainConfig, TrainedModel};
use inr_atlas::volume::Mask;
use rand::Rng as _;

const SEED: u64 = 0;

struct Tally {
    passed: usize,
    total: usize,
}

impl Tally {
    fn line(&mut self, id: usize, name: &str, ok: bool, detail: String) {
        self.total += 1;
        self.passed += usize::from(ok);
        println!("{} [{id:>2}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

fn note(msg: String) {
    println!("       {msg}");
}

fn random_desk_config(seed: u64) -> ModelConfig {
    let mut rng = stream(seed, "acceptance/config");
    let hidden_layers = rng.random_range(2..=3);
    let mut modulated: Vec<usize> = (1..=hidden_layers).filter(|_| rng.random_bool(0.6)).collect();
    if modulated.is_empty() {
        modulated.push(1);
    }
    ModelConfig {
        hidden_layers,
        hidden_width: [32, 64, 128][rng.random_range(0..3)],
        modulated_layer_indices: modulated,
        latent_channels: [8, 16, 32][rng.random_range(0..3)],
        latent_grid: std::array::from_fn(|_| rng.random_range(1..=3)),
        condition_dims: rng.random_range(1..=2),
        ..ModelConfig::desk()
    }
}

fn c1_gradients(t: &mut Tally) {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut groups = std::collections::BTreeSet::new();
    for k in 0..10 {
        let cfg = random_desk_config(k);
        let rot = if k % 2 == 0 { RotationScale::Generic } else { RotationScale::NearZero };
        let r = grad_check_with(&cfg, 100 + k, rot).expect("grad check");
        worst = worst.max(r.max_rel_error);
        groups.extend(r.per_group.keys().copied());
    }
    let secs = start.elapsed().as_secs_f64();
    t.line(
        1,
        "gradient check, 10 configurations",
        worst < 1e-4 && groups.len() == 4 && secs < 60.0,
        format!("max rel error {worst:.2e} (< 1e-4), {} groups, {secs:.1} s (< 60 s)", groups.len()),
    );
}

fn c2_rotations(t: &mut Tally) {
    let mut rng = stream(SEED, "acceptance/rotations");
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let scale = match k % 4 {
            0 => 1e-9,
            1 => 1e-5,
            2 => 1.0,
            _ => 3.0,
        };
        let r: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0) * scale);
        let m = so3::exp(r);
        let rtr = so3::mat_mul(&so3::transpose(&m), &m);
        for i in 0..3 {
            for j in 0..3 {
                worst = worst.max((rtr[i][j] - f64::from(u8::from(i == j))).abs());
            }
        }
        worst = worst.max((so3::det(&m) - 1.0).abs());
    }
    t.line(2, "rotation validity, 1000 draws", worst < 1e-6, format!("max deviation {worst:.2e} (< 1e-6)"));
}

/// Weighted sum over the 8 surrounding nodes, written out directly.
fn trilinear_oracle(g: &LatentGrid<f64>, x: [f64; 3]) -> Vec<f64> {
    let mut lo = [0usize; 3];
    let mut f = [0.0; 3];
    for d in 0..3 {
        let n = g.grid[d];
        if n > 1 {
            let u = (x[d].clamp(-1.0, 1.0) + 1.0) / 2.0 * (n - 1) as f64;
            lo[d] = (u.floor() as usize).min(n - 2);
            f[d] = u - lo[d] as f64;
        }
    }
    let mut out = vec![0.0; g.z.cols];
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = [(dx, 0), (dy, 1), (dz, 2)]
                    .iter()
                    .map(|&(b, d)| if b == 1 { f[d] } else { 1.0 - f[d] })
                    .product::<f64>();
                if w == 0.0 {
                    continue;
                }
                let idx = |b: usize, d: usize| (lo[d] + b).min(g.grid[d] - 1);
                let node = g.node(idx(dx, 0), idx(dy, 1), idx(dz, 2));
                for (o, v) in out.iter_mut().zip(node) {
                    *o += w * v;
                }
            }
        }
    }
    out
}

fn c3_trilinear(t: &mut Tally) {
    let mut rng = stream(SEED, "acceptance/trilinear");
    let cfg = ModelConfig {
        latent_channels: 5,
        latent_grid: [3, 4, 2],
        ..ModelConfig::desk()
    };
    let mut g = LatentGrid::<f64>::zeros(&cfg);
    g.z.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.2..1.2));
        let a = interp_latent(&g, x);
        for (p, q) in a.iter().zip(trilinear_oracle(&g, x)) {
            worst = worst.max((p - q).abs());
        }
    }
    let mut node_exact = true;
    for k in 0..2 {
        for j in 0..4 {
            for i in 0..3 {
                let x = [i as f64 - 1.0, j as f64 * 2.0 / 3.0 - 1.0, k as f64 * 2.0 - 1.0];
                node_exact &= interp_latent(&g, x)[..5] == *g.node(i, j, k);
            }
        }
    }
    t.line(
        3,
        "trilinear interpolation vs 8-corner oracle",
        worst < 1e-12 && node_exact,
        format!("max abs error {worst:.2e} (< 1e-12), exact at nodes: {node_exact}"),
    );
}

fn c4_kernel(t: &mut Tally) {
    let mut rng = stream(SEED, "acceptance/kernel");
    let mut sum_err: f64 = 0.0;
    let mut oracle_err: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..40);
        let ages: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target = rng.random_range(-1.0..1.0);
        let sigma = rng.random_range(0.05..0.5);
        let w = kernel_weights(target, &ages, sigma).expect("weights");
        sum_err = sum_err.max((w.iter().sum::<f64>() - 1.0).abs());
        let raw: Vec<f64> = ages.iter().map(|a| (-(target - a).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = raw.iter().sum();
        for (a, b) in w.iter().zip(&raw) {
            oracle_err = oracle_err.max((a - b / total).abs());
        }
    }
    let weeks: Vec<f64> = (0..=1700).map(|i| 21.0 + i as f64 * 0.01).collect();
    let norm = AgeNormalization::from_ages(&weeks);
    let normalized: Vec<f64> = weeks.iter().map(|&a| norm.age(a)).collect();
    let w = kernel_weights(norm.age(30.0), &normalized, norm.sigma(0.5)).expect("weights");
    let mass: f64 = weeks.iter().zip(&w).filter(|(a, _)| (**a - 30.0).abs() <= 1.0).map(|(_, w)| w).sum();
    t.line(
        4,
        "kernel weights",
        sum_err < 1e-12 && oracle_err < 1e-12 && (mass - 0.9545).abs() <= 0.005,
        format!(
            "sum error {sum_err:.1e} (< 1e-12), oracle error {oracle_err:.1e}, mass within 1 wk {mass:.4} (0.9545 +- 0.005)"
        ),
    );
}

fn c5_sigma_collapse(t: &mut Tally, model: &TrainedModel) {
    let ages = model.ages();
    let norm = AgeNormalization::from_ages(&ages);
    let sigma_weeks = 1e-3 * (norm.max - norm.min) / 2.0;
    let normalized: Vec<f64> = ages.iter().map(|&a| norm.age(a)).collect();
    let grid = AtlasGrid::covering(model, 2.0).expect("grid");
    let (mut worst, mut worst_all) = (0.0f64, 0.0f64);
    let mut blended = Vec::new();
    for (j, s) in model.subjects.iter().enumerate() {
        let atlas = generate_atlas(
            model,
            &AtlasRequest {
                t_weeks: s.scan_age_weeks,
                sigma_weeks,
                condition_override: Vec::new(),
                grid: grid.clone(),
                modalities: Vec::new(),
            },
        )
        .expect("atlas");
        let (own, _, _) = evaluate_latent(model, &s.latent, &grid).expect("reconstruction");
        let d = mean_abs_difference(&atlas.intensities, &own).expect("same grid");
        worst_all = worst_all.max(d);
        // another subject within a few sigma of t_j keeps real weight
        let w = kernel_weights(normalized[j], &normalized, 1e-3).expect("weights");
        if w[j] > 1.0 - 1e-6 {
            worst = worst.max(d);
        } else {
            blended.push(format!("{} (own weight {:.2})", s.id, w[j]));
        }
    }
    let tested = model.subjects.len() - blended.len();
    t.line(
        5,
        "sigma collapse to a training subject",
        worst < 1e-3 && tested * 5 >= model.subjects.len() * 4,
        format!(
            "max mean abs difference {worst:.2e} (< 1e-3) over {tested}/{} subjects with a distinct age; {worst_all:.2e} including age ties",
            model.subjects.len()
        ),
    );
    if !blended.is_empty() {
        note(format!("kernel blends at sigma 1e-3: {}", blended.join(", ")));
    }
}

struct HeldOut {
    subjects: Vec<Subject>,
    results: Vec<AdaptResult>,
    age_errors: Vec<f64>,
}

fn c6_segmentation(t: &mut Tally, model: &TrainedModel, cohort: &[Subject], held: HeldOut, train_secs: f64, adapt_secs: f64) -> HeldOut {
    let mut wm = Vec::new();
    for s in cohort {
        let (_, labels) = reconstruct_subject(model, &s.id).expect("reconstruction");
        wm.push(dice(&labels, &s.labels, WHITE_MATTER).expect("dice"));
    }
    let held_dice: Vec<f64> = held
        .results
        .iter()
        .zip(&held.subjects)
        .map(|(r, s)| {
            let (_, labels) = inr_atlas::adaptation::predict_segmentation(model, r).expect("segmentation");
            inr_atlas::analysis::foreground_dice(&labels, &s.labels).expect("dice").1
        })
        .collect();
    let (hd, hsd) = mean_std(&held_dice);
    let (wm_mean, _) = mean_std(&wm);
    let wm_min = wm.iter().copied().fold(f64::INFINITY, f64::min);
    t.line(
        6,
        "phantom segmentation",
        hd > 0.85 && wm_mean > 0.90,
        format!(
            "held-out foreground Dice {hd:.4} +- {hsd:.4} (> 0.85), training WM Dice mean {wm_mean:.4} (> 0.90), min {wm_min:.4}"
        ),
    );
    note(format!("training {train_secs:.0} s, {} adaptations {adapt_secs:.0} s", held.subjects.len()));
    if let Some((first, last)) = model.smoothed_loss(50) {
        note(format!("smoothed training loss {first:.4} -> {last:.4} ({:.1}% of initial, expected < 25%)", 100.0 * last / first));
    }
    held
}

/// LV Dice after adapting to a phantom whose ventricles exceed the training range.
fn severe_ventricles(model: &TrainedModel, cfg: &RunConfig) {
    let s = generate_subject(&PhantomSpec {
        id: "severe".into(),
        grid: cfg.cohort.grid,
        spacing: cfg.cohort.spacing,
        age_weeks: 30.0,
        lv_fraction: 0.12,
        seed: SEED,
        ..PhantomSpec::default()
    })
    .expect("phantom");
    let acfg = AdaptConfig { seed: SEED, ..cfg.adapt.clone() };
    let r = inr_atlas::adaptation::adapt(model, &s.volumes, &s.mask, &acfg).expect("adaptation");
    let (_, labels) = inr_atlas::adaptation::predict_segmentation(model, &r).expect("segmentation");
    let d = dice(&labels, &s.labels, VENTRICLE).expect("dice");
    note(format!("severe ventricles (lv_fraction 0.12, training max {:.2}): LV Dice {d:.4} (expected > 0.80)", cfg.cohort.conditions.lv_fraction.1));
}

fn c7_age(t: &mut Tally, model: &TrainedModel, held: &HeldOut) {
    let emb = pca_latents(model).expect("pca");
    let r = pearson(&emb.pc_scores(0), &model.ages());
    let mae = mean_std(&held.age_errors.iter().map(|e| e.abs()).collect::<Vec<_>>()).0;
    t.line(
        7,
        "age signal in latents",
        r.abs() > 0.8 && mae < 1.0,
        format!("|r(PC1, age)| {:.4} (> 0.8), held-out scan-age MAE {mae:.3} wk (< 1.0)", r.abs()),
    );
}

fn c8_conditioning(t: &mut Tally, model: &TrainedModel, cohort: &[Subject], cfg: &RunConfig, held: &HeldOut) {
    let grid = AtlasGrid::covering(model, cfg.evaluation.resolution_mm).expect("grid");
    let xis = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let table = lv_volume_table(model, &cfg.evaluation.atlas_ages, &xis, cfg.evaluation.sigma_weeks, &grid).expect("lv table");
    let monotone = table.iter().filter(|row| row.windows(2).all(|w| w[1] > w[0])).count();
    let mid = 0.5 * (cfg.cohort.age_range.0 + cfg.cohort.age_range.1);
    let frame = SharedFrame::estimate(model, cohort).expect("frame");
    let (absent, present) = bridge_wm_counts(model, &frame, mid, cfg.evaluation.sigma_weeks, &grid).expect("bridge");
    let ratio = present as f64 / (absent as f64).max(1.0);
    let q = model.conditions.iter().position(|c| c.name == "lv_fraction").expect("lv condition");
    let errs: Vec<f64> = held
        .results
        .iter()
        .zip(&held.subjects)
        .map(|(r, s)| {
            let est = estimate_conditions(model, r).expect("conditions")[q].normalized;
            (est - model.conditions[q].to_normalized(s.conditions.lv_fraction)).abs()
        })
        .collect();
    let (lv_mae, _) = mean_std(&errs);
    let lv_max = errs.iter().copied().fold(0.0, f64::max);
    t.line(
        8,
        "explicit conditioning",
        monotone == table.len() && ratio > 10.0 && lv_mae < 0.15,
        format!(
            "LV increasing in xi at {monotone}/{} ages, bridge WM {present} vs {absent} (ratio > 10), held-out xi_LV MAE {lv_mae:.3} (< 0.15, max {lv_max:.3})",
            table.len()
        ),
    );
    for (age, row) in cfg.evaluation.atlas_ages.iter().zip(&table) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.0}")).collect();
        note(format!("LV mm3 at {age} wk, xi -1..1: {}", cells.join(" ")));
    }
}

fn c9_ablations(t: &mut Tally, cfg: &RunConfig) {
    let start = Instant::now();
    let (mut spatial, mut single, mut explicit, mut implicit, mut rot) = (vec![], vec![], vec![], vec![], vec![]);
    for &seed in &cfg.ablation.seeds {
        let (a, b) = latent_shape_ablation(cfg, seed).expect("latent shape");
        spatial.push(a);
        single.push(b);
        let (e, i) = conditioning_ablation(cfg, seed).expect("conditioning");
        explicit.push(e);
        implicit.push(i);
        let errs = rigid_ablation(cfg, seed).expect("rigid");
        note(format!(
            "seed {seed}: Dice spatial {a:.4} single {b:.4}; birth-age MAE explicit {e:.2} implicit {i:.2}; rotation error mean {:.2} max {:.2} deg",
            mean_std(&errs).0,
            errs.iter().copied().fold(0.0, f64::max)
        ));
        rot.extend(errs);
    }
    let (s3, s1) = (mean_std(&spatial).0, mean_std(&single).0);
    let (e, i) = (mean_std(&explicit).0, mean_std(&implicit).0);
    let rmax = rot.iter().copied().fold(0.0, f64::max);
    let within = rot.iter().filter(|&&x| x <= 2.0).count();
    t.line(
        9,
        "ablation contrasts, 5 seeds",
        e < i && s3 >= s1 - 0.02 && rmax <= 2.0,
        format!(
            "birth-age MAE explicit {e:.3} < implicit {i:.3}; Dice spatial {s3:.4} >= single {s1:.4} - 0.02; rotation error max {rmax:.2} deg (<= 2), mean {:.2}, {within}/{} within 2 deg",
            mean_std(&rot).0,
            rot.len()
        ),
    );
    note(format!("ablations {:.0} s", start.elapsed().as_secs_f64()));
}

fn c10_translation(t: &mut Tally, model: &TrainedModel, cfg: &RunConfig, held: &HeldOut) {
    let acfg = AdaptConfig { seed: SEED, ..cfg.adapt.clone() };
    let scores = translation_scores(model, &held.subjects, &acfg).expect("translation");
    let p = mean_std(&scores.iter().map(|s| s.0).collect::<Vec<_>>()).0;
    let q = mean_std(&scores.iter().map(|s| s.1).collect::<Vec<_>>()).0;
    t.line(
        10,
        "modality translation",
        p > 25.0 && q > 0.85,
        format!("PSNR {p:.2} dB (> 25), SSIM {q:.4} (> 0.85)"),
    );
    // SSIM of the noise-free target against the acquired one bounds any predictor.
    let spec = CohortSpec { count: held.subjects.len(), id_prefix: "held".into(), ..cfg.cohort.clone() };
    let clean: Vec<f64> = cohort_specs(&spec, inr_atlas::rng::derive_seed(SEED, "held-out"))
        .expect("specs")
        .into_iter()
        .zip(&held.subjects)
        .map(|(mut ps, s)| {
            ps.noise_sigma = 0.0;
            let c = generate_subject(&ps).expect("clean phantom");
            let a = c.volumes.select_channels(&[1]).expect("channel");
            let b = s.volumes.select_channels(&[1]).expect("channel");
            ssim3d(&a, &b, &s.mask).expect("ssim")
        })
        .collect();
    note(format!("SSIM of the noise-free modality vs the acquired one: {:.4}", mean_std(&clean).0));
}

fn c11_multires(t: &mut Tally, model: &TrainedModel, cfg: &RunConfig) {
    let coarse = AtlasGrid::covering(model, 1.0).expect("grid");
    let fine = AtlasGrid::with_dims(model, coarse.dims.map(|n| 2 * n), 0.5);
    let request = |grid: AtlasGrid| AtlasRequest {
        t_weeks: 30.0,
        sigma_weeks: cfg.evaluation.sigma_weeks,
        condition_override: Vec::new(),
        grid,
        modalities: Vec::new(),
    };
    let a = generate_atlas(model, &request(coarse)).expect("1 mm atlas");
    let b = generate_atlas(model, &request(fine)).expect("0.5 mm atlas");
    let pooled = average_pool(&b.intensities, 2).expect("pool");
    let all = mean_abs_difference(&a.intensities, &pooled).expect("same grid");
    let brain = Mask::from_labels(&a.labels).expect("mask");
    let n = a.intensities.voxels();
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..a.intensities.channels {
        for (i, (&p, &q)) in a.intensities.channel(c).iter().zip(pooled.channel(c)).enumerate() {
            if brain.data[i % n] {
                sum += f64::from((p - q).abs());
                count += 1;
            }
        }
    }
    let inside = sum / count.max(1) as f64;
    t.line(
        11,
        "multi-resolution consistency",
        all < 0.05 && inside < 0.05,
        format!("mean abs difference 1.0 mm vs pooled 0.5 mm: {all:.4} whole grid, {inside:.4} in brain (< 0.05)"),
    );
}

fn c12_determinism(t: &mut Tally) {
    let spec = CohortSpec { count: 4, grid: 16, spacing: 3.0, ..CohortSpec::default() };
    let tcfg = TrainConfig { epochs: 1, conditions: vec!["lv_fraction".into()], ..TrainConfig::desk() };
    let model_cfg = ModelConfig { hidden_width: 32, latent_channels: 8, ..ModelConfig::desk() };
    let run = || {
        let cohort = generate_cohort(&spec, 7).expect("cohort");
        let model = train_on(&cohort, &model_cfg, &tcfg).expect("train");
        let held = held_out_cohort(&spec, 2, 7).expect("held");
        let acfg = AdaptConfig { epochs: 2, seed: 7, ..AdaptConfig::default() };
        let (report, _) = evaluate_held_out(&model, &held, &acfg).expect("evaluate");
        (checkpoint::to_bytes(&model).expect("bytes"), report.to_csv(), cohort)
    };
    let (ck_a, rep_a, cohort) = run();
    let (ck_b, rep_b, _) = run();
    let dir = tempfile::tempdir().expect("tempdir");
    let s = &cohort[0];
    let (vp, lp, mp) = (dir.path().join("v.nii"), dir.path().join("l.nii"), dir.path().join("m.nii"));
    nifti::write_volume(&s.volumes, &vp).expect("write");
    nifti::write_labels(&s.labels, &lp).expect("write");
    nifti::write_mask(&s.mask, &mp).expect("write");
    let v = nifti::read_nifti(&vp).and_then(|n| n.into_volume()).expect("read");
    let l = nifti::read_nifti(&lp).and_then(|n| n.into_labels()).expect("read");
    let m = nifti::read_nifti(&mp).and_then(|n| n.into_mask()).expect("read");
    let bits_equal = v.data.iter().zip(&s.volumes.data).all(|(a, b)| a.to_bits() == b.to_bits()) && v.data.len() == s.volumes.data.len();
    let roundtrip = bits_equal && l.labels == s.labels.labels && m.data == s.mask.data && v.dims == s.volumes.dims;
    t.line(
        12,
        "determinism and NIfTI round trip",
        ck_a == ck_b && rep_a == rep_b && roundtrip,
        format!(
            "checkpoints identical: {} ({} bytes), reports identical: {}, NIfTI payload bit-exact: {roundtrip}",
            ck_a == ck_b,
            ck_a.len(),
            rep_a == rep_b
        ),
    );
}

fn main() {
    let mut t = Tally { passed: 0, total: 0 };
    c1_gradients(&mut t);
    c2_rotations(&mut t);
    c3_trilinear(&mut t);
    c4_kernel(&mut t);

    let mut cfg = RunConfig::profile(Scale::Desk);
    cfg.seed = SEED;
    cfg.cohort.conditions.cc_present_probability = 0.5;
    cfg.train.conditions = vec!["lv_fraction".into(), "cc_absent".into()];
    let start = Instant::now();
    let cohort = generate_cohort(&cfg.cohort, SEED).expect("cohort");
    let model = train_on(&cohort, &cfg.model, &cfg.train_config()).expect("training");
    let train_secs = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let subjects = held_out_cohort(&cfg.cohort, cfg.evaluation.held_out, SEED).expect("held-out cohort");
    let acfg = AdaptConfig { seed: SEED, ..cfg.adapt.clone() };
    let (report, results) = evaluate_held_out(&model, &subjects, &acfg).expect("adaptation");
    let held = HeldOut {
        age_errors: report.rows.iter().filter_map(|r| r.age_error_weeks).collect(),
        subjects,
        results,
    };
    let adapt_secs = start.elapsed().as_secs_f64();

    c5_sigma_collapse(&mut t, &model);
    let held = c6_segmentation(&mut t, &model, &cohort, held, train_secs, adapt_secs);
    severe_ventricles(&model, &cfg);
    c7_age(&mut t, &model, &held);
    c8_conditioning(&mut t, &model, &cohort, &cfg, &held);
    c9_ablations(&mut t, &cfg);
    c10_translation(&mut t, &model, &cfg, &held);
    c11_multires(&mut t, &model, &cfg);
    c12_determinism(&mut t);

    println!("{}/{} criteria passed", t.passed, t.total);
}
