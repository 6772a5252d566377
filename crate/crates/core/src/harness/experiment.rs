//! End-to-end experiment: generate, degrade, train with the selected
//! manager, evaluate held-out views and write the artifacts.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ManagerKind};
use super::ppm::write_image;
use super::synth::{generate_scene, init_scene, split_views, GeneratedScene};
use crate::error::Result;
use crate::lpm::{error_map, CorrespondenceProvider, GroundTruthMatcher, MatchCache, MatcherSpec, PatchNccMatcher, RejectionRecord, ZoneRecord};
use crate::manage::{AdcManager, DensifyEvent, LpmManager};
use crate::optimize::loss::{psnr, ssim};
use crate::optimize::train::{train, LogEntry, Model, NoManagement, TrainSetup, TrainView, EVAL_SSIM_WINDOW};
use crate::render::render;
use crate::{Camera, Image, Scene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ZoneSummary {
    pub count: usize,
    /// Zones in which at least one front point was reset.
    pub reset_events: usize,
    pub points_reset: usize,
    pub inserted: usize,
    pub densified: usize,
    pub pruned: usize,
    pub rejections: usize,
}

impl ZoneSummary {
    pub fn from_records(zones: &[ZoneRecord], rejections: usize) -> Self {
        Self {
            count: zones.len(),
            reset_events: zones.iter().filter(|z| z.n_reset > 0).count(),
            points_reset: zones.iter().map(|z| z.n_reset).sum(),
            inserted: zones.iter().map(|z| z.n_inserted).sum(),
            densified: zones.iter().map(|z| z.n_densified).sum(),
            pruned: zones.iter().map(|z| z.n_pruned).sum(),
            rejections,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub manager: String,
    pub seed: u64,
    pub views: Vec<ViewMetrics>,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub point_count: usize,
    pub initial_point_count: usize,
    pub wall_clock_seconds: f64,
    pub zones: ZoneSummary,
    pub config: ExperimentConfig,
}

pub struct ExperimentRun {
    pub config: ExperimentConfig,
    pub generated: GeneratedScene,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub init: Scene,
    pub model: Model<f64>,
    pub log: Vec<LogEntry>,
    pub zones: Vec<ZoneRecord>,
    pub rejections: Vec<RejectionRecord>,
    pub densify_events: Vec<DensifyEvent>,
    /// LPM steps whose edits escaped their zones (audited runs only).
    pub locality_violations: usize,
    pub lpm_steps: usize,
    pub report: MetricsReport,
}

pub fn evaluate_views(scene: &Scene, cameras: &[Camera], images: &[Image], ids: &[usize]) -> Result<Vec<ViewMetrics>> {
    ids.iter()
        .map(|&v| {
            let out = render(scene, &cameras[v]);
            Ok(ViewMetrics { view: v, psnr: psnr(&out.color, &images[v])?, ssim: ssim(&out.color, &images[v], EVAL_SSIM_WINDOW)? })
        })
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn matcher(config: &ExperimentConfig, generated: &GeneratedScene, train_ids: &[usize]) -> Box<dyn CorrespondenceProvider<f64> + Send> {
    let cams: Vec<Camera> = train_ids.iter().map(|&i| generated.cameras[i]).collect();
    match config.lpm.matcher {
        MatcherSpec::GroundTruth { samples_per_point, depth_slack } => {
            Box::new(GroundTruthMatcher::new(&generated.gt, cams, samples_per_point, depth_slack, config.seed ^ 0x6d61_7463))
        }
        MatcherSpec::PatchNcc { min_score, max_corners } => {
            let images = train_ids.iter().map(|&i| generated.images[i].clone()).collect();
            Box::new(PatchNccMatcher::new(images, min_score, max_corners))
        }
    }
}

/// Run an experiment in memory. With `audit`, every LPM step's edits are
/// checked against the zone predicates.
pub fn execute(config: &ExperimentConfig, audit: bool) -> Result<ExperimentRun> {
    config.validate()?;
    let started = Instant::now();
    let generated = generate_scene(&config.scene, &config.rig, config.seed)?;
    let (train_ids, test_ids) = split_views(generated.cameras.len(), config.rig.test_every);
    let init = if config.init_from_gt {
        generated.gt.clone()
    } else {
        init_scene(&generated.gt, &config.init, &generated.cameras, config.seed ^ 0x696e_6974)?
    };
    let view = |i: &usize| TrainView { camera: generated.cameras[*i], image: generated.images[*i].clone() };
    let views: Vec<TrainView<f64>> = train_ids.iter().map(view).collect();
    let tests: Vec<TrainView<f64>> = test_ids.iter().map(view).collect();
    let schedule = config.schedule();
    let setup = TrainSetup { views: &views, tests: &tests, schedule: &schedule, loss: &config.loss, scene_diagonal: config.scene.diagonal() };
    let mut model = Model::new(init.clone(), config.rates, schedule.iterations as u64);
    let seed = config.seed ^ 0x6d67_6d74;

    let (mut zones, mut rejections, mut densify_events) = (Vec::new(), Vec::new(), Vec::new());
    let (mut violations, mut lpm_steps) = (0, 0);
    let log = match config.manager {
        ManagerKind::None => train(&mut model, &setup, &mut NoManagement)?,
        ManagerKind::Adc | ManagerKind::AdcLowTau => {
            let mut params = config.adc;
            if config.manager == ManagerKind::AdcLowTau {
                params.densify_threshold = config.lpm.local_densify_threshold;
            }
            let mut m = AdcManager::new(params, true, seed);
            let log = train(&mut model, &setup, &mut m)?;
            densify_events = m.events;
            log
        }
        ManagerKind::AdcLpm => {
            let cache = MatchCache::new(matcher(config, &generated, &train_ids));
            let mut m = LpmManager::new(config.adc, config.lpm, cache, seed);
            m.audit = audit;
            let log = train(&mut model, &setup, &mut m)?;
            zones = m.zones;
            rejections = m.rejections;
            densify_events = m.adc.events;
            violations = m.violations.len();
            lpm_steps = m.steps;
            log
        }
    };

    let views_metrics = evaluate_views(&model.scene, &generated.cameras, &generated.images, &test_ids)?;
    let report = MetricsReport {
        schema_version: config.schema_version,
        manager: config.manager.name().into(),
        seed: config.seed,
        psnr_mean: mean(views_metrics.iter().map(|v| v.psnr)),
        ssim_mean: mean(views_metrics.iter().map(|v| v.ssim)),
        views: views_metrics,
        point_count: model.scene.len(),
        initial_point_count: init.len(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        zones: ZoneSummary::from_records(&zones, rejections.len()),
        config: config.clone(),
    };
    Ok(ExperimentRun {
        config: config.clone(),
        generated,
        train_ids,
        test_ids,
        init,
        model,
        log,
        zones,
        rejections,
        densify_events,
        locality_violations: violations,
        lpm_steps,
        report,
    })
}

fn write_jsonl<S: Serialize>(path: &Path, items: &[S]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    scene.write_text(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Depth normalized by the farthest covered pixel; empty pixels stay black.
pub fn depth_image(depth: &[f64], width: usize, height: usize) -> Image {
    let far = depth.iter().copied().fold(0.0, f64::max);
    let s = if far > 0.0 { 1.0 / far } else { 1.0 };
    Image { width, height, pixels: depth.iter().map(|d| [d * s; 3]).collect() }
}

/// Write renders, depth and error maps of every view, logs, scenes and the report.
pub fn write_artifacts(run: &ExperimentRun, dir: &Path) -> Result<()> {
    for sub in ["renders", "depth", "errors", "gt"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for (v, cam) in run.generated.cameras.iter().enumerate() {
        let tag = if run.test_ids.contains(&v) { "test" } else { "train" };
        let name = format!("{tag}_{v:02}.ppm");
        let out = render(&run.model.scene, cam);
        write_image(&dir.join("renders").join(&name), &out.color)?;
        write_image(&dir.join("gt").join(&name), &run.generated.images[v])?;
        write_image(&dir.join("depth").join(&name), &depth_image(&out.depth, cam.width, cam.height))?;
        let err = error_map(&out.color, &run.generated.images[v])?;
        let peak = err.values.iter().copied().fold(0.0, f64::max);
        write_image(&dir.join("errors").join(&name), &err.to_image(peak))?;
    }
    write_scene(&dir.join("gt.gs3d"), &run.generated.gt)?;
    write_scene(&dir.join("init.gs3d"), &run.init)?;
    write_scene(&dir.join("final.gs3d"), &run.model.scene)?;
    write_jsonl(&dir.join("train_log.jsonl"), &run.log)?;
    write_jsonl(&dir.join("zones.jsonl"), &run.zones)?;
    write_jsonl(&dir.join("rejections.jsonl"), &run.rejections)?;
    write_jsonl(&dir.join("densify.jsonl"), &run.densify_events)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&run.config)?)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&run.report)?)?;
    Ok(())
}

pub fn run_experiment(config: &ExperimentConfig, dir: &Path) -> Result<MetricsReport> {
    let run = execute(config, false)?;
    write_artifacts(&run, dir)?;
    Ok(run.report)
}
