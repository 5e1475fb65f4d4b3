//! The `invert`, `bias-study`, `edit` and `sample` subcommands.
//!
//! Independent seeds run on the rayon pool; results are collected in seed
//! order and every file is written from a single deterministic pass.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use stsl_core::editing::edit_pipeline;
use stsl_core::io::{self, Image};
use stsl_core::metrics::{paired_bootstrap, PairedInterval, REQUIRES_PRETRAINED};
use stsl_core::samplers::{nfe_report, run, sample_prior, Problem, RunReport, SamplerConfig, Variant};
use stsl_core::scoremodels::{ConditionalShiftPrior, Covariance, ScoreModel};
use stsl_core::synthetic::{desk_task, nearest_component, TaskFamily, PIXEL_RANGE};
use stsl_core::{rng_from_seed, Matrix, Vector};

use crate::config::{CodecKind, LoadedConfig, PriorKind};
use crate::experiment::{
    build_instance, build_setup, finite_or_null, image_metrics, run_id, write_metrics_csv, write_run,
    ImageMetrics, MetricsRow, RunArtifacts, Setup,
};

/// Command-line overrides shared by the run subcommands.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seeds: Option<Vec<u64>>,
    pub variant: Option<Variant>,
    pub tasks: Option<Vec<TaskFamily>>,
    pub outdir: Option<PathBuf>,
    /// Record wall time (makes reports differ between runs).
    pub timing: bool,
}

impl RunOptions {
    fn seeds(&self, loaded: &LoadedConfig) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| loaded.config.seeds.clone())
    }

    fn outdir(&self, loaded: &LoadedConfig) -> PathBuf {
        self.outdir
            .clone()
            .unwrap_or_else(|| loaded.resolve(&loaded.config.output.dir))
    }
}

fn elapsed_ms(start: Option<Instant>) -> Option<f64> {
    start.map(|s| s.elapsed().as_secs_f64() * 1e3)
}

fn metrics_json(m: &ImageMetrics) -> serde_json::Value {
    json!({
        "mse": m.mse,
        "psnr": finite_or_null(m.psnr),
        "ssim": m.ssim,
        "lpips": REQUIRES_PRETRAINED,
        "clip_accuracy": REQUIRES_PRETRAINED,
    })
}

fn task_json(loaded: &LoadedConfig, measurement_dim: usize, impulses: usize) -> serde_json::Value {
    let t = &loaded.config.task;
    json!({
        "operator": t.operator.name(),
        "sigma_y": t.sigma_y,
        "measurement_dim": measurement_dim,
        "impulses": impulses,
    })
}

fn create_outdir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Runs the configured sampler once per seed and writes one run directory each.
pub fn invert(loaded: &LoadedConfig, opts: &RunOptions) -> anyhow::Result<Vec<MetricsRow>> {
    let setup = build_setup(loaded)?;
    let outdir = opts.outdir(loaded);
    create_outdir(&outdir)?;
    let variant = opts.variant.unwrap_or(loaded.config.sampler.variant);
    let seeds = opts.seeds(loaded);
    let rows = seeds
        .par_iter()
        .map(|&seed| invert_one(loaded, &setup, &outdir, variant, seed, opts.timing))
        .collect::<anyhow::Result<Vec<_>>>()?;
    write_metrics_csv(&outdir.join("invert.csv"), &rows)?;
    Ok(rows)
}

fn invert_one(
    loaded: &LoadedConfig,
    setup: &Setup,
    outdir: &Path,
    variant: Variant,
    seed: u64,
    timing: bool,
) -> anyhow::Result<MetricsRow> {
    let inst = build_instance(loaded, setup, seed)?;
    let cfg = SamplerConfig {
        variant,
        seed,
        ..loaded.config.sampler.clone()
    };
    let start = timing.then(Instant::now);
    let problem = Problem::new(&inst.task, &setup.prior, &setup.codec, &setup.schedule);
    let mut report = run(&problem, &cfg).with_context(|| format!("seed {seed}"))?;
    report.wall_ms = elapsed_ms(start);
    let recon = Vector::from_vec(report.reconstruction.clone());
    let m = image_metrics(&inst.clean, &recon, setup.shape, &loaded.config.metrics)?;
    let nfe = nfe_report(&report);
    let id = run_id(&loaded.text, "invert", variant.name(), seed);
    let row = MetricsRow {
        run_id: id.clone(),
        task: loaded.config.task.operator.name().into(),
        variant: variant.name().into(),
        seed,
        mse: Some(m.mse),
        psnr: Some(m.psnr),
        ssim: m.ssim,
        nfe_guidance: nfe.guidance,
        nfe_raw: nfe.raw,
        wall_ms: report.wall_ms,
    };
    let doc = json!({
        "run_id": id,
        "command": "invert",
        "task": task_json(loaded, inst.task.y.len(), inst.impulses),
        "metrics": metrics_json(&m),
        "nfe": nfe,
        "run": report,
    });
    write_run(
        outdir,
        &RunArtifacts {
            report: &doc,
            recon: &recon,
            shape: setup.shape,
            row: &row,
            extra: Vec::new(),
        },
    )?;
    Ok(row)
}

const STUDY_VARIANTS: [Variant; 3] = [Variant::Stsl, Variant::StslBiased, Variant::FirstOrder];

/// Paired comparison `worse - better` on one task family.
#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub task: TaskFamily,
    pub better: Variant,
    pub worse: Variant,
    pub interval: PairedInterval,
    /// Positive mean difference with an interval excluding zero.
    pub ordering_holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BiasStudySummary {
    pub seeds: usize,
    pub mean_mse: Vec<(TaskFamily, Variant, f64)>,
    pub comparisons: Vec<Comparison>,
}

/// Runs the three variants over the seed list on every requested desk task.
pub fn bias_study(loaded: &LoadedConfig, opts: &RunOptions) -> anyhow::Result<BiasStudySummary> {
    let c = &loaded.config;
    if c.prior.kind != PriorKind::Image || c.codec.kind != CodecKind::Identity {
        bail!("bias-study needs the image prior with the identity codec");
    }
    let setup = build_setup(loaded)?;
    let outdir = opts.outdir(loaded);
    create_outdir(&outdir)?;
    let tasks = opts.tasks.clone().unwrap_or_else(|| c.bias_study.tasks.clone());
    let seeds = opts.seeds(loaded);
    let side = c.prior.side;
    let jobs: Vec<(TaskFamily, u64)> = tasks
        .iter()
        .flat_map(|&t| seeds.iter().map(move |&s| (t, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(family, seed)| -> anyhow::Result<Vec<MetricsRow>> {
            let desk = desk_task(family, &setup.prior, side, c.task.sigma_y, seed)?;
            let problem = Problem::new(&desk.task, &setup.prior, &setup.codec, &setup.schedule);
            STUDY_VARIANTS
                .iter()
                .map(|&variant| {
                    let cfg = SamplerConfig {
                        variant,
                        seed,
                        ..c.sampler.clone()
                    };
                    let start = opts.timing.then(Instant::now);
                    let report = run(&problem, &cfg)
                        .with_context(|| format!("{} {} seed {seed}", family.name(), variant.name()))?;
                    let recon = Vector::from_vec(report.reconstruction.clone());
                    let m = image_metrics(&desk.clean, &recon, setup.shape, &c.metrics)?;
                    let nfe = nfe_report(&report);
                    let tag = format!("{}/{}", family.name(), variant.name());
                    Ok(MetricsRow {
                        run_id: run_id(&loaded.text, "bias-study", &tag, seed),
                        task: family.name().into(),
                        variant: variant.name().into(),
                        seed,
                        mse: Some(m.mse),
                        psnr: Some(m.psnr),
                        ssim: m.ssim,
                        nfe_guidance: nfe.guidance,
                        nfe_raw: nfe.raw,
                        wall_ms: elapsed_ms(start),
                    })
                })
                .collect()
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    // Rows ordered by task, then variant, then seed.
    let mut rows = Vec::new();
    for (ti, _) in tasks.iter().enumerate() {
        for vi in 0..STUDY_VARIANTS.len() {
            for si in 0..seeds.len() {
                rows.push(results[ti * seeds.len() + si][vi].clone());
            }
        }
    }
    let mse_of = |ti: usize, vi: usize| -> Vec<f64> {
        (0..seeds.len())
            .map(|si| results[ti * seeds.len() + si][vi].mse.unwrap_or(f64::NAN))
            .collect()
    };
    let mut rng = rng_from_seed(c.bias_study.bootstrap_seed);
    let mut mean_mse = Vec::new();
    let mut comparisons = Vec::new();
    for (ti, &task) in tasks.iter().enumerate() {
        for (vi, &v) in STUDY_VARIANTS.iter().enumerate() {
            let m = mse_of(ti, vi);
            mean_mse.push((task, v, m.iter().sum::<f64>() / m.len() as f64));
        }
        for (better, worse) in [(0, 1), (1, 2)] {
            let (b, w) = (mse_of(ti, better), mse_of(ti, worse));
            let diffs: Vec<f64> = w.iter().zip(&b).map(|(w, b)| w - b).collect();
            let interval = paired_bootstrap(&diffs, c.bias_study.resamples, c.bias_study.confidence, &mut rng)?;
            comparisons.push(Comparison {
                task,
                better: STUDY_VARIANTS[better],
                worse: STUDY_VARIANTS[worse],
                ordering_holds: interval.mean > 0.0 && interval.excludes_zero(),
                interval,
            });
        }
    }
    let summary = BiasStudySummary {
        seeds: seeds.len(),
        mean_mse,
        comparisons,
    };
    write_bias_csv(&outdir.join("bias_study.csv"), &rows, &summary)?;
    let mut doc = serde_json::to_vec_pretty(&summary)?;
    doc.push(b'\n');
    fs::write(outdir.join("bias_study_summary.json"), doc)?;
    Ok(summary)
}

fn write_bias_csv(path: &Path, rows: &[MetricsRow], summary: &BiasStudySummary) -> anyhow::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.write_record(["# summary"])?;
    w.write_record([
        "task",
        "comparison",
        "mean_diff",
        "ci_low",
        "ci_high",
        "confidence",
        "resamples",
        "sign",
        "ordering_holds",
    ])?;
    for c in &summary.comparisons {
        let i = &c.interval;
        let sign = if i.mean > 0.0 {
            "+"
        } else if i.mean < 0.0 {
            "-"
        } else {
            "0"
        };
        w.write_record([
            c.task.name().to_string(),
            format!("{}-{}", c.worse.name(), c.better.name()),
            i.mean.to_string(),
            i.low.to_string(),
            i.high.to_string(),
            i.confidence.to_string(),
            i.resamples.to_string(),
            sign.to_string(),
            c.ordering_holds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Inversion followed by editing towards the configured target embedding.
pub fn edit(loaded: &LoadedConfig, opts: &RunOptions) -> anyhow::Result<Vec<MetricsRow>> {
    let setup = build_setup(loaded)?;
    let outdir = opts.outdir(loaded);
    create_outdir(&outdir)?;
    let h = setup.prior.dim();
    let model = ConditionalShiftPrior::new(setup.prior.clone(), Matrix::identity(h, h))?;
    let seeds = opts.seeds(loaded);
    let rows = seeds
        .par_iter()
        .map(|&seed| edit_one(loaded, &setup, &model, &outdir, seed, opts.timing))
        .collect::<anyhow::Result<Vec<_>>>()?;
    write_metrics_csv(&outdir.join("edit.csv"), &rows)?;
    Ok(rows)
}

fn edit_one(
    loaded: &LoadedConfig,
    setup: &Setup,
    model: &ConditionalShiftPrior,
    outdir: &Path,
    seed: u64,
    timing: bool,
) -> anyhow::Result<MetricsRow> {
    let c = &loaded.config;
    let inst = build_instance(loaded, setup, seed)?;
    let source_latent = setup.codec.encode(&inst.clean)?;
    let source_component = nearest_component(&setup.prior, &source_latent);
    let target = match c.edit.target_component {
        Some(j) => {
            if j >= setup.prior.components() {
                bail!(
                    "[edit] target_component {j} out of range (prior has {} components)",
                    setup.prior.components()
                );
            }
            (&setup.prior.means[j] - &setup.prior.means[source_component])
                .iter()
                .cloned()
                .collect()
        }
        None => c.edit.target.clone(),
    };
    let edit_cfg = c.edit.to_edit_config(target)?;
    let sampler = SamplerConfig {
        variant: Variant::Stsl,
        seed,
        ..c.sampler.clone()
    };
    let start = timing.then(Instant::now);
    let report = edit_pipeline(&inst.task, model, &setup.codec, &setup.schedule, &sampler, &edit_cfg)
        .with_context(|| format!("seed {seed}"))?;
    let wall_ms = elapsed_ms(start);
    let inversion: &RunReport = report.inversion.as_ref().expect("pipeline records its inversion");
    let edited = Vector::from_vec(report.reconstruction.clone());
    let inverted = Vector::from_vec(inversion.reconstruction.clone());
    let m_edit = image_metrics(&inst.clean, &edited, setup.shape, &c.metrics)?;
    let m_inv = image_metrics(&inst.clean, &inverted, setup.shape, &c.metrics)?;
    let out_component = nearest_component(&setup.prior, &setup.codec.encode(&edited)?);
    let nfe = nfe_report(inversion);
    let id = run_id(&loaded.text, "edit", "stsl", seed);
    let row = MetricsRow {
        run_id: id.clone(),
        task: c.task.operator.name().into(),
        variant: "edit".into(),
        seed,
        mse: Some(m_edit.mse),
        psnr: Some(m_edit.psnr),
        ssim: m_edit.ssim,
        nfe_guidance: nfe.guidance,
        nfe_raw: nfe.raw,
        wall_ms,
    };
    let nullopt = &report.null_optimization;
    let steps = nullopt.residuals.len();
    let doc = json!({
        "run_id": id,
        "command": "edit",
        "task": task_json(loaded, inst.task.y.len(), inst.impulses),
        "edit": edit_cfg,
        "source_component": source_component,
        "edited_component": out_component,
        "metrics_vs_clean": {
            "edited": metrics_json(&m_edit),
            "inversion": metrics_json(&m_inv),
        },
        "null_optimization": {
            "initial_residual": (0..steps).map(|t| nullopt.initial_residual(t)).collect::<Vec<_>>(),
            "final_residual": (0..steps).map(|t| nullopt.final_residual(t)).collect::<Vec<_>>(),
            "stalled": nullopt.stalled,
        },
        "inversion": inversion,
        "edited_latent": report.latent,
        "wall_ms": wall_ms,
    });
    let (rows, cols) = setup.shape;
    let mut inv_pgm = Vec::new();
    io::write_pgm(&mut inv_pgm, &Image::new(rows, cols, inversion.reconstruction.clone())?, PIXEL_RANGE)?;
    let mut inv_raw = Vec::new();
    io::write_f64(&mut inv_raw, &Matrix::from_row_slice(rows, cols, &inversion.reconstruction))?;
    let emb = &nullopt.embeddings.embeddings;
    let emb_matrix = Matrix::from_fn(emb.len(), h_of(emb), |r, col| emb[r][col]);
    let mut emb_txt = Vec::new();
    io::write_text_matrix(&mut emb_txt, &emb_matrix)?;
    write_run(
        outdir,
        &RunArtifacts {
            report: &doc,
            recon: &edited,
            shape: setup.shape,
            row: &row,
            extra: vec![
                ("inversion.pgm", inv_pgm),
                ("inversion.f64", inv_raw),
                ("embeddings.txt", emb_txt),
            ],
        },
    )?;
    Ok(row)
}

fn h_of(emb: &[Vec<f64>]) -> usize {
    emb.first().map_or(0, Vec::len)
}

/// Moment check of unconditional samples against a single-Gaussian prior.
#[derive(Debug, Clone, Serialize)]
pub struct MomentCheck {
    pub samples: usize,
    /// Largest `|mean_i - μ_i| / SE` over coordinates.
    pub max_mean_z: f64,
    /// Largest covariance-entry z-score (dimensions up to 64 only).
    pub max_cov_z: Option<f64>,
    pub threshold: f64,
    pub pass: bool,
}

const MOMENT_Z: f64 = 4.0;
const MAX_COV_CHECK_DIM: usize = 64;

fn moment_check(setup: &Setup, samples: &[Vector]) -> Option<MomentCheck> {
    if setup.prior.components() != 1 || samples.len() < 2 {
        return None;
    }
    if !matches!(setup.codec, stsl_core::operators::LatentCodec::Identity { .. }) {
        return None;
    }
    let d = setup.prior.dim();
    let mu = &setup.prior.means[0];
    let sigma = setup.prior.covariances[0].to_matrix(d);
    let n = samples.len() as f64;
    let mean = stsl_core::metrics::sample_mean(samples).ok()?;
    let max_mean_z = (0..d)
        .map(|i| (mean[i] - mu[i]).abs() / (sigma[(i, i)] / n).sqrt())
        .fold(0.0, f64::max);
    let max_cov_z = (d <= MAX_COV_CHECK_DIM).then(|| {
        let cov = stsl_core::metrics::sample_covariance(samples).expect("at least two samples");
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                let var = (sigma[(i, i)] * sigma[(j, j)] + sigma[(i, j)].powi(2)) / n;
                worst = worst.max((cov[(i, j)] - sigma[(i, j)]).abs() / var.sqrt());
            }
        }
        worst
    });
    let pass = max_mean_z <= MOMENT_Z && max_cov_z.is_none_or(|z| z <= MOMENT_Z);
    Some(MomentCheck {
        samples: samples.len(),
        max_mean_z,
        max_cov_z,
        threshold: MOMENT_Z,
        pass,
    })
}

/// Ancestral samples from the prior; `count` per seed.
pub fn sample(loaded: &LoadedConfig, opts: &RunOptions) -> anyhow::Result<Vec<(MetricsRow, Option<MomentCheck>)>> {
    let setup = build_setup(loaded)?;
    let outdir = opts.outdir(loaded);
    create_outdir(&outdir)?;
    let count = loaded.config.sample.count;
    let steps = setup.schedule.steps() as u64;
    let results = opts
        .seeds(loaded)
        .par_iter()
        .map(|&seed| -> anyhow::Result<(MetricsRow, Option<MomentCheck>)> {
            let start = opts.timing.then(Instant::now);
            let mut rng = rng_from_seed(seed);
            let samples = (0..count)
                .map(|_| sample_prior(&setup.prior, &setup.codec, &setup.schedule, &mut rng))
                .collect::<stsl_core::Result<Vec<_>>>()?;
            let wall_ms = elapsed_ms(start);
            let check = moment_check(&setup, &samples);
            let id = run_id(&loaded.text, "sample", "unconditional", seed);
            let row = MetricsRow {
                run_id: id.clone(),
                task: "prior".into(),
                variant: Variant::Unconditional.name().into(),
                seed,
                mse: None,
                psnr: None,
                ssim: None,
                nfe_guidance: 0,
                nfe_raw: steps * count as u64,
                wall_ms,
            };
            let prior_summary = match &setup.prior.covariances[..] {
                [Covariance::Scalar(s)] => json!({"components": 1, "isotropic_variance": s}),
                _ => json!({"components": setup.prior.components()}),
            };
            let doc = json!({
                "run_id": id,
                "command": "sample",
                "seed": seed,
                "samples": count,
                "prior": prior_summary,
                "nfe": {"combine": steps * count as u64, "raw": steps * count as u64},
                "moment_check": check,
                "wall_ms": wall_ms,
            });
            let d = setup.codec.data_dim();
            let all = Matrix::from_fn(count, d, |r, c| samples[r][c]);
            let mut raw = Vec::new();
            io::write_f64(&mut raw, &all)?;
            write_run(
                &outdir,
                &RunArtifacts {
                    report: &doc,
                    recon: &samples[0],
                    shape: setup.shape,
                    row: &row,
                    extra: vec![("samples.f64", raw)],
                },
            )?;
            Ok((row, check))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let rows: Vec<MetricsRow> = results.iter().map(|(r, _)| r.clone()).collect();
    write_metrics_csv(&outdir.join("sample.csv"), &rows)?;
    Ok(results)
}
