//! Round-robin training loop with pluggable point management.

use serde::{Deserialize, Serialize};

use super::adam::{adam_step, LearningRates, OptimizerState};
use super::loss::{psnr, ssim, LossSpec};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::render::{backward, render, GradientBundle};
use crate::scene::{Camera, ImageBuffer, RowMap, Scene};

/// Window used for the SSIM reported in logs and metrics.
pub const EVAL_SSIM_WINDOW: usize = 11;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainView<T> {
    pub camera: Camera<T>,
    pub image: ImageBuffer<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub iterations: usize,
    pub manage_interval: usize,
    pub manage_start: usize,
    pub manage_stop: usize,
    /// ADC baselines only.
    pub opacity_reset_interval: usize,
    pub lpm_interval: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            iterations: 2000,
            manage_interval: 100,
            manage_start: 300,
            manage_stop: 1500,
            opacity_reset_interval: 600,
            lpm_interval: 200,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.manage_interval == 0 || self.opacity_reset_interval == 0 || self.lpm_interval == 0 {
            return Err(Error::InvalidParameter("schedule intervals must be at least 1".into()));
        }
        if self.manage_start > self.manage_stop || self.manage_stop > self.iterations {
            return Err(Error::InvalidParameter("schedule needs start <= stop <= iterations".into()));
        }
        Ok(())
    }

    fn in_window(&self, iter: usize) -> bool {
        iter >= self.manage_start && iter <= self.manage_stop
    }

    pub fn densifies(&self, iter: usize) -> bool {
        self.in_window(iter) && iter.is_multiple_of(self.manage_interval)
    }

    pub fn resets_opacity(&self, iter: usize) -> bool {
        self.in_window(iter) && iter.is_multiple_of(self.opacity_reset_interval)
    }

    pub fn runs_lpm(&self, iter: usize) -> bool {
        self.in_window(iter) && iter.is_multiple_of(self.lpm_interval)
    }

    /// Whether gradient statistics are still being collected.
    pub fn observes(&self, iter: usize) -> bool {
        iter <= self.manage_stop
    }
}

/// Scene plus the optimizer state that must follow its edits.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub scene: Scene<T>,
    pub optimizer: OptimizerState<T>,
}

impl<T: Real> Model<T> {
    pub fn new(scene: Scene<T>, rates: LearningRates<T>, decay_steps: u64) -> Self {
        let optimizer = OptimizerState::new(&scene, rates, decay_steps);
        Self { scene, optimizer }
    }

    /// Realign optimizer rows after a scene edit.
    pub fn follow(&mut self, rows: &RowMap) {
        self.optimizer.apply_rows(rows, self.scene.generation);
    }
}

pub struct ManageContext<'a, T> {
    pub iteration: usize,
    pub schedule: &'a TrainSchedule,
    pub views: &'a [TrainView<T>],
    pub scene_diagonal: T,
}

pub trait PointManager<T: Real> {
    /// Sees every training gradient before the optimizer step.
    fn observe(&mut self, ctx: &ManageContext<'_, T>, bundle: &GradientBundle<T>) -> Result<()>;
    /// Runs after the optimizer step; may edit the model.
    fn manage(&mut self, model: &mut Model<T>, ctx: &ManageContext<'_, T>) -> Result<()>;
}

/// Never edits the point set.
pub struct NoManagement;

impl<T: Real> PointManager<T> for NoManagement {
    fn observe(&mut self, _: &ManageContext<'_, T>, _: &GradientBundle<T>) -> Result<()> {
        Ok(())
    }

    fn manage(&mut self, _: &mut Model<T>, _: &ManageContext<'_, T>) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogEntry {
    pub iter: usize,
    /// Mean training loss since the previous entry.
    pub loss: f64,
    pub point_count: usize,
    pub psnr_test: Option<f64>,
    pub ssim_test: Option<f64>,
}

/// Mean test PSNR and SSIM of the current scene.
pub fn evaluate<T: Real>(scene: &Scene<T>, views: &[TrainView<T>]) -> Result<Option<(f64, f64)>> {
    if views.is_empty() {
        return Ok(None);
    }
    let (mut p, mut s) = (0.0, 0.0);
    for v in views {
        let out = render(scene, &v.camera);
        p += psnr(&out.color, &v.image)?.as_f64();
        s += ssim(&out.color, &v.image, EVAL_SSIM_WINDOW)?.as_f64();
    }
    let n = views.len() as f64;
    Ok(Some((p / n, s / n)))
}

pub struct TrainSetup<'a, T> {
    pub views: &'a [TrainView<T>],
    pub tests: &'a [TrainView<T>],
    pub schedule: &'a TrainSchedule,
    pub loss: &'a LossSpec<T>,
    pub scene_diagonal: T,
}

/// Train in place; one log entry per management interval and one at the end.
pub fn train<T: Real, M: PointManager<T> + ?Sized>(
    model: &mut Model<T>,
    setup: &TrainSetup<'_, T>,
    manager: &mut M,
) -> Result<Vec<LogEntry>> {
    if setup.views.is_empty() {
        return Err(Error::InvalidInput("training needs at least one view".into()));
    }
    setup.schedule.validate()?;
    setup.loss.validate()?;
    let background = [T::zero(); 3];
    let mut log = Vec::new();
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    for iter in 1..=setup.schedule.iterations {
        let view = &setup.views[(iter - 1) % setup.views.len()];
        let ctx = ManageContext { iteration: iter, schedule: setup.schedule, views: setup.views, scene_diagonal: setup.scene_diagonal };
        let bundle = backward(&model.scene, &view.camera, background, &view.image, setup.loss)?;
        if !bundle.is_finite() {
            return Err(Error::Consistency(format!("non-finite gradient at iteration {iter}")));
        }
        loss_sum += bundle.loss.as_f64();
        loss_count += 1;
        if setup.schedule.observes(iter) {
            manager.observe(&ctx, &bundle)?;
        }
        adam_step(&mut model.scene, &bundle, &mut model.optimizer)?;
        manager.manage(model, &ctx)?;
        if iter % setup.schedule.manage_interval == 0 || iter == setup.schedule.iterations {
            let metrics = evaluate(&model.scene, setup.tests)?;
            log.push(LogEntry {
                iter,
                loss: loss_sum / loss_count as f64,
                point_count: model.scene.len(),
                psnr_test: metrics.map(|m| m.0),
                ssim_test: metrics.map(|m| m.1),
            });
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    Ok(log)
}
