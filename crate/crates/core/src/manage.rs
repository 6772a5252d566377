//! Point-management policies plugged into the training loop: plain ADC,
//! ADC with its threshold lowered everywhere, and ADC with localized
//! management.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adc::{densify_and_prune, global_opacity_reset, AdcParams, DensifyCounts, GradStats};
use crate::error::Result;
use crate::lpm::{lpm_step, locality_violations, LpmContext, LpmParams, LpmView, MatchCache, RejectionRecord, ZoneRecord};
use crate::optimize::train::{ManageContext, Model, PointManager, TrainView};
use crate::real::Real;
use crate::render::GradientBundle;
use crate::scene::RowMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DensifyEvent {
    pub iter: usize,
    #[serde(flatten)]
    pub counts: DensifyCounts,
    pub point_count: usize,
}

/// Adaptive density control, optionally with the periodic opacity reset.
pub struct AdcManager<T> {
    pub params: AdcParams<T>,
    pub global_reset: bool,
    pub stats: Option<GradStats<T>>,
    pub events: Vec<DensifyEvent>,
    pub resets: Vec<usize>,
    rng: ChaCha8Rng,
}

impl<T: Real> AdcManager<T> {
    pub fn new(params: AdcParams<T>, global_reset: bool, seed: u64) -> Self {
        Self { params, global_reset, stats: None, events: Vec::new(), resets: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn stats_for(&mut self, model: &Model<T>) -> &mut GradStats<T> {
        let (n, generation) = (model.scene.len(), model.scene.generation);
        let stats = self.stats.get_or_insert_with(|| GradStats::new(n, generation));
        if stats.len() != n {
            stats.reset(n, generation);
        }
        stats
    }
}

impl<T: Real> PointManager<T> for AdcManager<T> {
    fn observe(&mut self, _: &ManageContext<'_, T>, bundle: &GradientBundle<T>) -> Result<()> {
        let stats = self.stats.get_or_insert_with(|| GradStats::new(bundle.len(), bundle.generation));
        stats.accumulate(bundle)
    }

    fn manage(&mut self, model: &mut Model<T>, ctx: &ManageContext<'_, T>) -> Result<()> {
        let iter = ctx.iteration;
        if ctx.schedule.densifies(iter) {
            self.stats_for(model);
            let stats = self.stats.as_mut().expect("stats initialized");
            let (rows, counts) = densify_and_prune(&mut model.scene, stats, &self.params, ctx.scene_diagonal, &mut self.rng)?;
            model.follow(&rows);
            self.events.push(DensifyEvent { iter, counts, point_count: model.scene.len() });
        }
        if self.global_reset && ctx.schedule.resets_opacity(iter) {
            global_opacity_reset(&mut model.scene, self.params.reset_ceiling);
            model.follow(&RowMap::identity(model.scene.len()));
            let all: Vec<usize> = (0..model.scene.len()).collect();
            model.optimizer.reset_opacity_moments(&all);
            if let Some(stats) = self.stats.as_mut() {
                stats.generation = model.scene.generation;
            }
            self.resets.push(iter);
        }
        Ok(())
    }
}

/// Reference view for `view`: the nearest camera center whose viewing
/// direction differs by at least `min_angle_deg`.
pub fn reference_view<T: Real>(views: &[TrainView<T>], view: usize, min_angle_deg: T) -> Option<usize> {
    let cam = &views[view].camera;
    (0..views.len())
        .filter(|&j| j != view)
        .filter(|&j| {
            let cos = cam.forward().dot(views[j].camera.forward()).max(-T::one()).min(T::one());
            cos.acos().to_degrees() >= min_angle_deg
        })
        .min_by(|&a, &b| {
            let da = (views[a].camera.position - cam.position).norm();
            let db = (views[b].camera.position - cam.position).norm();
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        })
}

/// ADC at the global threshold plus localized management of error zones.
pub struct LpmManager<T> {
    pub adc: AdcManager<T>,
    pub params: LpmParams<T>,
    pub matches: MatchCache<T>,
    pub zones: Vec<ZoneRecord>,
    pub rejections: Vec<RejectionRecord>,
    /// Check every step's edits against the zone predicates.
    pub audit: bool,
    pub violations: Vec<(usize, usize, Vec<usize>)>,
    pub steps: usize,
    seed: u64,
}

impl<T: Real> LpmManager<T> {
    pub fn new(adc: AdcParams<T>, params: LpmParams<T>, matches: MatchCache<T>, seed: u64) -> Self {
        Self {
            adc: AdcManager::new(adc, false, seed),
            params,
            matches,
            zones: Vec::new(),
            rejections: Vec::new(),
            audit: false,
            violations: Vec::new(),
            steps: 0,
            seed,
        }
    }

    fn run_lpm(&mut self, model: &mut Model<T>, ctx: &ManageContext<'_, T>) -> Result<()> {
        let lpm_ctx = LpmContext {
            iteration: ctx.iteration,
            intersection_distance: self.params.intersection_fraction * ctx.scene_diagonal,
            split_scale: self.adc.params.split_scale_fraction * ctx.scene_diagonal,
            seed: self.seed,
        };
        for v in 0..ctx.views.len() {
            let Some(r) = reference_view(ctx.views, v, self.params.min_triangulation_deg) else {
                continue;
            };
            self.adc.stats_for(model);
            let matches = self.matches.get(v, r)?;
            let current = LpmView { id: v, camera: &ctx.views[v].camera, gt: &ctx.views[v].image };
            let reference = LpmView { id: r, camera: &ctx.views[r].camera, gt: &ctx.views[r].image };
            let before = self.audit.then(|| model.scene.clone());
            let stats = self.adc.stats.as_mut().expect("stats initialized");
            let out = lpm_step(
                &mut model.scene,
                &current,
                &reference,
                matches,
                stats,
                &self.adc.params,
                &self.params,
                &lpm_ctx,
                &mut self.adc.rng,
            )?;
            self.steps += 1;
            if !out.zones.is_empty() {
                model.follow(&out.rows);
                model.optimizer.reset_opacity_moments(&out.reset);
            }
            if let Some(before) = before {
                let bad = locality_violations(&before, &model.scene, &out, current.camera, reference.camera, self.params.front_opacity);
                if !bad.is_empty() {
                    self.violations.push((ctx.iteration, v, bad));
                }
            }
            self.zones.extend(out.records);
            self.rejections.extend(out.rejections);
        }
        Ok(())
    }
}

impl<T: Real> PointManager<T> for LpmManager<T> {
    fn observe(&mut self, ctx: &ManageContext<'_, T>, bundle: &GradientBundle<T>) -> Result<()> {
        self.adc.observe(ctx, bundle)
    }

    fn manage(&mut self, model: &mut Model<T>, ctx: &ManageContext<'_, T>) -> Result<()> {
        if ctx.schedule.runs_lpm(ctx.iteration) {
            self.run_lpm(model, ctx)?;
        }
        self.adc.manage(model, ctx)
    }
}
