//! Adaptive density control: view-averaged gradient statistics, clone/split
//! densification, opacity pruning and the periodic all-points opacity reset.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::real::Real;
use crate::render::GradientBundle;
use crate::scene::{Gaussian3D, RowMap, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdcParams<T> {
    /// τ: densify when the view-averaged screen gradient exceeds this.
    pub densify_threshold: T,
    /// Points whose largest scale exceeds this fraction of the scene
    /// diagonal are split, smaller ones cloned.
    pub split_scale_fraction: T,
    pub split_count: usize,
    pub split_shrink: T,
    /// ε_α: points fainter than this are removed.
    pub prune_opacity: T,
    pub reset_ceiling: T,
}

impl<T: Real> Default for AdcParams<T> {
    fn default() -> Self {
        Self {
            densify_threshold: T::c(2e-4),
            split_scale_fraction: T::c(0.01),
            split_count: 2,
            split_shrink: T::c(1.0 / 1.6),
            prune_opacity: T::c(0.005),
            reset_ceiling: T::c(0.01),
        }
    }
}

impl<T: Real> AdcParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.densify_threshold > T::zero()) {
            return Err(Error::InvalidParameter("densify threshold must be positive".into()));
        }
        if !(self.prune_opacity >= T::zero() && self.prune_opacity < T::one()) {
            return Err(Error::InvalidParameter("prune opacity must lie in [0,1)".into()));
        }
        if !(self.split_shrink > T::zero() && self.split_shrink < T::one()) {
            return Err(Error::InvalidParameter("split shrink must lie in (0,1)".into()));
        }
        if !(self.reset_ceiling > T::zero() && self.reset_ceiling < T::one()) {
            return Err(Error::InvalidParameter("reset ceiling must lie in (0,1)".into()));
        }
        if self.split_count < 2 {
            return Err(Error::InvalidParameter("split count must be at least 2".into()));
        }
        Ok(())
    }
}

/// Running per-point densification statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStats<T> {
    pub accum: Vec<T>,
    pub views: Vec<u32>,
    pub max_radius: Vec<T>,
    /// Sum of world-space positional gradients, used as the clone direction.
    pub grad_sum: Vec<Vec3<T>>,
    pub generation: u64,
}

impl<T: Real> GradStats<T> {
    pub fn new(n: usize, generation: u64) -> Self {
        Self {
            accum: vec![T::zero(); n],
            views: vec![0; n],
            max_radius: vec![T::zero(); n],
            grad_sum: vec![Vec3::zero(); n],
            generation,
        }
    }

    pub fn len(&self) -> usize {
        self.accum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accum.is_empty()
    }

    pub fn accumulate(&mut self, bundle: &GradientBundle<T>) -> Result<()> {
        if bundle.generation != self.generation || bundle.len() != self.len() {
            return Err(Error::Consistency(format!(
                "gradient bundle generation {} vs stats generation {}",
                bundle.generation, self.generation
            )));
        }
        for i in 0..self.len() {
            if bundle.contributions[i] == 0 {
                continue;
            }
            self.accum[i] += bundle.screen[i];
            self.views[i] += 1;
            self.max_radius[i] = self.max_radius[i].max(bundle.radii[i]);
            self.grad_sum[i] += bundle.mean[i];
        }
        Ok(())
    }

    /// `T_i`, the view-averaged gradient magnitude (0 for unseen points).
    pub fn average(&self, i: usize) -> T {
        if self.views[i] == 0 {
            T::zero()
        } else {
            self.accum[i] / T::from_u32(self.views[i]).unwrap()
        }
    }

    pub fn apply_rows(&mut self, rows: &RowMap, generation: u64) {
        self.accum = rows.remap(&self.accum, T::zero());
        self.views = rows.remap(&self.views, 0);
        self.max_radius = rows.remap(&self.max_radius, T::zero());
        self.grad_sum = rows.remap(&self.grad_sum, Vec3::zero());
        self.generation = generation;
    }

    pub fn clear_rows(&mut self, rows: &[usize]) {
        for &i in rows {
            self.accum[i] = T::zero();
            self.views[i] = 0;
            self.max_radius[i] = T::zero();
            self.grad_sum[i] = Vec3::zero();
        }
    }

    pub fn reset(&mut self, n: usize, generation: u64) {
        *self = Self::new(n, generation);
    }
}

/// Keep `g` and add a copy nudged against the positional gradient by 1% of
/// its mean scale.
pub fn clone_point<T: Real>(g: &Gaussian3D<T>, grad_direction: Vec3<T>) -> (Gaussian3D<T>, Gaussian3D<T>) {
    let mut copy = *g;
    if let Some(dir) = grad_direction.try_normalize() {
        copy.mean -= dir * (T::c(0.01) * g.scale.mean_component());
    }
    (*g, copy)
}

/// Children of a split: means drawn from the parent's own density, scales
/// shrunk by `shrink`.
pub fn split_point<T: Real, R: Rng + ?Sized>(g: &Gaussian3D<T>, count: usize, shrink: T, rng: &mut R) -> Vec<Gaussian3D<T>> {
    let rot = g.rotation.to_rotation();
    (0..count)
        .map(|_| {
            let z = Vec3::new(
                T::c(rng.sample(StandardNormal)),
                T::c(rng.sample(StandardNormal)),
                T::c(rng.sample(StandardNormal)),
            );
            let mut child = *g;
            child.mean = g.mean + rot.mul_vec(z.component_mul(g.scale));
            child.scale = g.scale * shrink;
            child
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DensifyCounts {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Densify or prune one candidate under the given threshold. Returns how the
/// point was handled so callers can restrict the rule to a subset.
#[allow(clippy::too_many_arguments)]
pub(crate) fn densify_candidates<T: Real, R: Rng + ?Sized>(
    scene: &mut Scene<T>,
    stats: &GradStats<T>,
    params: &AdcParams<T>,
    threshold: T,
    split_scale: T,
    candidates: impl Fn(usize) -> bool,
    prune: bool,
    rng: &mut R,
) -> Result<(RowMap, DensifyCounts, Vec<usize>)> {
    if stats.len() != scene.len() || stats.generation != scene.generation {
        return Err(Error::Consistency("gradient statistics out of sync with the scene".into()));
    }
    let mut kept = Vec::with_capacity(scene.len());
    let mut rows = Vec::with_capacity(scene.len());
    let mut fresh = Vec::new();
    let mut densified = Vec::new();
    let mut counts = DensifyCounts::default();
    for (i, g) in scene.points.iter().enumerate() {
        if prune && g.opacity < params.prune_opacity {
            counts.pruned += 1;
            continue;
        }
        if candidates(i) && stats.average(i) > threshold {
            densified.push(i);
            if g.scale.max_component() <= split_scale {
                let (orig, copy) = clone_point(g, stats.grad_sum[i]);
                kept.push(orig);
                rows.push(Some(i));
                fresh.push(copy);
                counts.cloned += 1;
            } else {
                fresh.extend(split_point(g, params.split_count, params.split_shrink, rng));
                counts.split += 1;
            }
            continue;
        }
        kept.push(*g);
        rows.push(Some(i));
    }
    rows.extend(std::iter::repeat_n(None, fresh.len()));
    kept.extend(fresh);
    let rows = scene.replace_points(kept, RowMap(rows));
    Ok((rows, counts, densified))
}

/// Threshold densification over the whole scene followed by opacity pruning.
pub fn densify_and_prune<T: Real, R: Rng + ?Sized>(
    scene: &mut Scene<T>,
    stats: &mut GradStats<T>,
    params: &AdcParams<T>,
    scene_diagonal: T,
    rng: &mut R,
) -> Result<(RowMap, DensifyCounts)> {
    let split_scale = params.split_scale_fraction * scene_diagonal;
    let (rows, counts, _) =
        densify_candidates(scene, stats, params, params.densify_threshold, split_scale, |_| true, true, rng)?;
    stats.reset(scene.len(), scene.generation);
    Ok((rows, counts))
}

/// `opacity ← min(opacity, ceiling)` for every point; returns the rows that changed.
pub fn global_opacity_reset<T: Real>(scene: &mut Scene<T>, ceiling: T) -> Vec<usize> {
    let mut changed = Vec::new();
    for (i, g) in scene.points.iter_mut().enumerate() {
        if g.opacity > ceiling {
            g.opacity = ceiling;
            changed.push(i);
        }
    }
    if !changed.is_empty() {
        scene.bump_generation();
    }
    changed
}
