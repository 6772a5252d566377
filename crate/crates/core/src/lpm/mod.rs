//! Localized point management: rendering-error regions are paired across
//! views, triangulated into 3D zones, and points are densified, inserted,
//! reset and pruned only inside those zones.

mod matching;

pub use matching::{
    denormalize_pixel, harris_corners, normalize_pixel, Correspondence, CorrespondenceProvider, GroundTruthMatcher,
    MatchCache, MatcherSpec, PatchNccMatcher,
};

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adc::{densify_candidates, AdcParams, DensifyCounts, GradStats};
use crate::error::{Error, Result};
use crate::geom::{cone_rays, min_enclosing_circle, min_enclosing_sphere, ray_closest_points, ClosestPoints, Cone, Sphere};
use crate::linalg::{Quat, Vec2, Vec3};
use crate::real::Real;
use crate::render::{pixel_center, render};
use crate::scene::{Camera, Gaussian3D, ImageBuffer, RowMap, Scene};

pub const INSERT_OPACITY: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LpmParams<T> {
    /// Regions need error above `max(error_floor, mean + error_std_factor·std)`.
    pub error_floor: T,
    pub error_std_factor: T,
    pub min_region_area: usize,
    pub max_regions: usize,
    /// τ_local, below the global densification threshold.
    pub local_densify_threshold: T,
    /// ε_int as a fraction of the scene bounding-box diagonal.
    pub intersection_fraction: T,
    pub min_midpoints: usize,
    pub min_triangulation_deg: T,
    /// Matches needed inside a region to pair it with the reference view.
    pub min_support: usize,
    pub cone_ray_cap: usize,
    /// Zones holding fewer points than this get a point at their center.
    pub sparsity_floor: usize,
    /// α_high: front points above this opacity are reset.
    pub front_opacity: T,
    pub reset_ceiling: T,
    pub prune_target: usize,
    pub matcher: MatcherSpec,
}

impl<T: Real> Default for LpmParams<T> {
    fn default() -> Self {
        Self {
            error_floor: T::c(0.05),
            error_std_factor: T::c(2.0),
            min_region_area: 4,
            max_regions: 4,
            local_densify_threshold: T::c(1e-4),
            intersection_fraction: T::c(0.01),
            min_midpoints: 4,
            min_triangulation_deg: T::c(2.0),
            min_support: 3,
            cone_ray_cap: crate::geom::CONE_RAY_CAP,
            sparsity_floor: 2,
            front_opacity: T::c(0.9),
            reset_ceiling: T::c(0.01),
            prune_target: 64,
            matcher: MatcherSpec::default(),
        }
    }
}

impl<T: Real> LpmParams<T> {
    /// Checks ranges, including `τ_local < τ` against the global threshold.
    pub fn validate(&self, global_threshold: T) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if !(self.local_densify_threshold > T::zero() && self.local_densify_threshold < global_threshold) {
            return bad("local densify threshold must be positive and below the global one");
        }
        if !(self.error_floor >= T::zero() && self.error_std_factor >= T::zero()) {
            return bad("error thresholds must be non-negative");
        }
        if !(self.intersection_fraction > T::zero()) {
            return bad("intersection fraction must be positive");
        }
        if !(self.front_opacity > T::zero() && self.front_opacity < T::one()) {
            return bad("front opacity threshold must lie in (0,1)");
        }
        if !(self.reset_ceiling > T::zero() && self.reset_ceiling < self.front_opacity) {
            return bad("reset ceiling must lie in (0, front opacity)");
        }
        if !(self.min_triangulation_deg >= T::zero()) {
            return bad("triangulation angle must be non-negative");
        }
        if self.min_region_area == 0 || self.max_regions == 0 || self.min_support == 0 || self.cone_ray_cap == 0 {
            return bad("region area, region count, support and ray cap must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap<T> {
    pub width: usize,
    pub height: usize,
    pub values: Vec<T>,
}

impl<T: Real> ErrorMap<T> {
    pub fn get(&self, x: usize, y: usize) -> T {
        self.values[y * self.width + x]
    }

    /// Mean and population standard deviation.
    pub fn mean_std(&self) -> (T, T) {
        if self.values.is_empty() {
            return (T::zero(), T::zero());
        }
        let n = T::from_usize_lossy(self.values.len());
        let mean = self.values.iter().copied().sum::<T>() / n;
        let var = self.values.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
        (mean, var.sqrt())
    }

    /// Grayscale visualization scaled so `max_value` maps to white.
    pub fn to_image(&self, max_value: T) -> ImageBuffer<T> {
        let s = if max_value > T::zero() { T::one() / max_value } else { T::one() };
        let pixels = self.values.iter().map(|v| [(*v * s).min(T::one()); 3]).collect();
        ImageBuffer { width: self.width, height: self.height, pixels }
    }
}

/// Per-pixel channel-mean absolute difference.
pub fn error_map<T: Real>(render: &ImageBuffer<T>, gt: &ImageBuffer<T>) -> Result<ErrorMap<T>> {
    if !render.same_shape(gt) {
        return Err(Error::InvalidInput(format!(
            "error map of {}x{} against {}x{}",
            render.width, render.height, gt.width, gt.height
        )));
    }
    let third = T::one() / T::c(3.0);
    let values = render
        .pixels
        .iter()
        .zip(&gt.pixels)
        .map(|(a, b)| ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) * third)
        .collect();
    Ok(ErrorMap { width: render.width, height: render.height, values })
}

/// Center and radius of a region's circumscribed circle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Footprint<T> {
    pub centroid: Vec2<T>,
    pub radius: T,
}

impl<T: Real> Footprint<T> {
    pub fn contains(&self, p: Vec2<T>) -> bool {
        (p - self.centroid).norm() <= self.radius
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRegion<T> {
    pub pixels: Vec<(usize, usize)>,
    pub centroid: Vec2<T>,
    /// Minimal enclosing circle radius of the pixel centers.
    pub radius: T,
    pub mean_error: T,
}

impl<T: Real> ErrorRegion<T> {
    pub fn from_pixels(pixels: Vec<(usize, usize)>, mean_error: T) -> Result<Self> {
        let centers: Vec<Vec2<T>> = pixels.iter().map(|&(x, y)| pixel_center(x, y)).collect();
        let (_, radius) = min_enclosing_circle(&centers)?;
        let n = T::from_usize_lossy(centers.len());
        let centroid = centers.iter().fold(Vec2::zero(), |a, c| a + *c) * (T::one() / n);
        Ok(Self { pixels, centroid, radius, mean_error })
    }

    pub fn footprint(&self) -> Footprint<T> {
        Footprint { centroid: self.centroid, radius: self.radius }
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// 4-connected components of above-threshold pixels, largest mean error first.
pub fn extract_regions<T: Real>(map: &ErrorMap<T>, params: &LpmParams<T>) -> Vec<ErrorRegion<T>> {
    let (w, h) = (map.width, map.height);
    let (mean, std) = map.mean_std();
    let threshold = params.error_floor.max(mean + params.error_std_factor * std);
    let hot: Vec<bool> = map.values.iter().map(|v| *v > threshold).collect();
    let mut seen = vec![false; w * h];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !hot[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        let mut total = T::zero();
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            pixels.push((x, y));
            total += map.values[i];
            let mut visit = |j: usize| {
                if hot[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if pixels.len() >= params.min_region_area {
            let mean_error = total / T::from_usize_lossy(pixels.len());
            pixels.sort_by_key(|&(x, y)| (y, x));
            regions.push(ErrorRegion::from_pixels(pixels, mean_error).expect("non-empty component"));
        }
    }
    regions.sort_by(|a, b| b.mean_error.partial_cmp(&a.mean_error).unwrap());
    regions
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionPair<T> {
    pub region: ErrorRegion<T>,
    /// `R_e′`: a disk of the same radius around the mean mapped position.
    pub mapped: ErrorRegion<T>,
    pub support: usize,
}

/// Disk of pixels whose centers lie within `radius` of `center`, clipped to
/// the image; the pixel under `center` when the disk misses every center.
fn disk_pixels<T: Real>(center: Vec2<T>, radius: T, width: usize, height: usize) -> Vec<(usize, usize)> {
    let lo_x = (center.x - radius - T::one()).floor().max(T::zero()).to_usize().unwrap_or(0);
    let lo_y = (center.y - radius - T::one()).floor().max(T::zero()).to_usize().unwrap_or(0);
    let hi_x = (center.x + radius + T::one()).ceil().to_usize().unwrap_or(0).min(width);
    let hi_y = (center.y + radius + T::one()).ceil().to_usize().unwrap_or(0).min(height);
    let mut out = Vec::new();
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            if (pixel_center::<T>(x, y) - center).norm() <= radius {
                out.push((x, y));
            }
        }
    }
    if out.is_empty() {
        let x = center.x.floor().max(T::zero()).to_usize().unwrap_or(0).min(width - 1);
        let y = center.y.floor().max(T::zero()).to_usize().unwrap_or(0).min(height - 1);
        out.push((x, y));
    }
    out
}

/// Carry a region to the reference view through the matches inside its
/// circumscribed circle; `None` when support is too thin.
pub fn pair_region<T: Real>(
    region: &ErrorRegion<T>,
    matches: &Correspondence<T>,
    size: (usize, usize),
    reference_size: (usize, usize),
    min_support: usize,
) -> Option<RegionPair<T>> {
    let fp = region.footprint();
    let mapped: Vec<Vec2<T>> = matches
        .pairs
        .iter()
        .filter(|(a, _)| fp.contains(denormalize_pixel(*a, size.0, size.1)))
        .map(|(_, b)| denormalize_pixel(*b, reference_size.0, reference_size.1))
        .collect();
    if mapped.is_empty() || mapped.len() < min_support {
        return None;
    }
    let n = T::from_usize_lossy(mapped.len());
    let centroid = mapped.iter().fold(Vec2::zero(), |a, p| a + *p) * (T::one() / n);
    let pixels = disk_pixels(centroid, region.radius, reference_size.0, reference_size.1);
    let mapped_region = ErrorRegion { pixels, centroid, radius: region.radius, mean_error: region.mean_error };
    Some(RegionPair { region: region.clone(), mapped: mapped_region, support: mapped.len() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ZoneOrigin {
    pub view: usize,
    pub reference_view: usize,
    pub iteration: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Zone<T> {
    pub sphere: Sphere<T>,
    pub origin: ZoneOrigin,
    pub region: Footprint<T>,
    pub reference_region: Footprint<T>,
    /// Pixels of the originating error region.
    pub pixels: Vec<(usize, usize)>,
    pub region_mean_error: T,
    pub midpoints: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum ZoneRejection {
    Unmatched,
    Coaxial { angle_deg: f64 },
    TooFewMidpoints { accepted: usize },
    Degenerate,
}

/// Triangulate a region pair: closest-point midpoints of every cross-cone
/// ray pair within `max_distance`, enclosed by their minimal sphere.
pub fn identify_zone<T: Real>(
    pair: &RegionPair<T>,
    camera_a: &Camera<T>,
    camera_b: &Camera<T>,
    params: &LpmParams<T>,
    max_distance: T,
    origin: ZoneOrigin,
    seed: u64,
) -> std::result::Result<Zone<T>, ZoneRejection> {
    let cone_a = Cone::new(camera_a, pair.region.centroid, pair.region.radius).map_err(|_| ZoneRejection::Degenerate)?;
    let cone_b = Cone::new(camera_b, pair.mapped.centroid, pair.mapped.radius).map_err(|_| ZoneRejection::Degenerate)?;
    let cos = cone_a.axis.dot(cone_b.axis).max(-T::one()).min(T::one());
    let angle = cos.acos().to_degrees();
    if angle < params.min_triangulation_deg {
        return Err(ZoneRejection::Coaxial { angle_deg: angle.as_f64() });
    }
    let rays_a = cone_rays(&cone_a, &pair.region.pixels, params.cone_ray_cap, seed).map_err(|_| ZoneRejection::Degenerate)?;
    let rays_b = cone_rays(&cone_b, &pair.mapped.pixels, params.cone_ray_cap, seed ^ 0x9e37_79b9_7f4a_7c15)
        .map_err(|_| ZoneRejection::Degenerate)?;
    let mut mids = Vec::new();
    let half = T::c(0.5);
    for ra in &rays_a {
        for rb in &rays_b {
            if let ClosestPoints::Found { p1, p2, distance, s, t } = ray_closest_points(ra, rb) {
                if distance < max_distance && s > T::zero() && t > T::zero() {
                    mids.push((p1 + p2) * half);
                }
            }
        }
    }
    if mids.len() < params.min_midpoints {
        return Err(ZoneRejection::TooFewMidpoints { accepted: mids.len() });
    }
    let sphere = min_enclosing_sphere(&mids).map_err(|_| ZoneRejection::Degenerate)?;
    if !(sphere.radius > T::zero()) || !sphere.center.is_finite() {
        return Err(ZoneRejection::Degenerate);
    }
    Ok(Zone {
        sphere,
        origin,
        region: pair.region.footprint(),
        reference_region: pair.mapped.footprint(),
        pixels: pair.region.pixels.clone(),
        region_mean_error: pair.region.mean_error,
        midpoints: mids.len(),
    })
}

/// Indices of points whose mean lies in the closed zone sphere.
pub fn points_in_zone<T: Real>(scene: &Scene<T>, zone: &Zone<T>) -> Vec<usize> {
    (0..scene.len()).filter(|&i| zone.sphere.contains(scene.points[i].mean)).collect()
}

/// The ADC clone/split rule at threshold τ_local, restricted to the zone.
/// Statistics follow the edit; densified points restart their accumulation.
pub fn localized_densify<T: Real, R: Rng + ?Sized>(
    scene: &mut Scene<T>,
    zone: &Zone<T>,
    stats: &mut GradStats<T>,
    adc: &AdcParams<T>,
    threshold: T,
    split_scale: T,
    rng: &mut R,
) -> Result<(RowMap, DensifyCounts)> {
    let inside: Vec<bool> = scene.points.iter().map(|g| zone.sphere.contains(g.mean)).collect();
    let (rows, counts, densified) = densify_candidates(scene, stats, adc, threshold, split_scale, |i| inside[i], false, rng)?;
    stats.apply_rows(&rows, scene.generation);
    let carried: Vec<usize> = (0..rows.len()).filter(|&j| rows.0[j].is_some_and(|o| densified.binary_search(&o).is_ok())).collect();
    stats.clear_rows(&carried);
    Ok((rows, counts))
}

/// Add one point at the zone center when the zone is sparse. Returns the
/// row mapping, or `None` when the zone already holds enough points.
pub fn insert_center_point<T: Real>(
    scene: &mut Scene<T>,
    zone: &Zone<T>,
    gt: &ImageBuffer<T>,
    sparsity_floor: usize,
) -> Result<Option<RowMap>> {
    if points_in_zone(scene, zone).len() >= sparsity_floor {
        return Ok(None);
    }
    let mut color = [T::zero(); 3];
    for &(x, y) in &zone.pixels {
        let p = gt.get(x, y);
        for c in 0..3 {
            color[c] += p[c];
        }
    }
    let n = T::from_usize_lossy(zone.pixels.len().max(1));
    let color = color.map(|c| (c / n).max(T::zero()).min(T::one()));
    let g = Gaussian3D::new(zone.sphere.center, Quat::identity(), Vec3::splat(zone.sphere.radius / T::c(3.0)), T::c(INSERT_OPACITY), color)?;
    let mut points = scene.points.clone();
    points.push(g);
    let mut rows = RowMap::identity(scene.len());
    rows.0.push(None);
    Ok(Some(scene.replace_points(points, rows)))
}

/// A point occluding the zone from `camera`: its mean projects into the
/// footprint, lies nearer than the zone's front, and is nearly opaque.
pub fn is_front_of_zone<T: Real>(
    g: &Gaussian3D<T>,
    zone: &Zone<T>,
    camera: &Camera<T>,
    footprint: &Footprint<T>,
    front_opacity: T,
) -> bool {
    let Some(center) = camera.project_point(zone.sphere.center) else {
        return false;
    };
    let Some(p) = camera.project_point(g.mean) else {
        return false;
    };
    g.opacity > front_opacity && p.depth < center.depth - zone.sphere.radius && footprint.contains(p.pixel)
}

/// Lower front-of-zone points to the reset ceiling; returns changed rows.
pub fn reset_front_points<T: Real>(
    scene: &mut Scene<T>,
    zone: &Zone<T>,
    camera: &Camera<T>,
    footprint: &Footprint<T>,
    params: &LpmParams<T>,
) -> Vec<usize> {
    let mut changed = Vec::new();
    for (i, g) in scene.points.iter_mut().enumerate() {
        if is_front_of_zone(g, zone, camera, footprint, params.front_opacity) && g.opacity > params.reset_ceiling {
            g.opacity = params.reset_ceiling;
            changed.push(i);
        }
    }
    if !changed.is_empty() {
        scene.bump_generation();
    }
    changed
}

/// Remove up to `added` of the faintest unprotected zone points, never
/// taking the zone below `target` points. Returns the mapping and removed rows.
pub fn density_aware_prune<T: Real>(
    scene: &mut Scene<T>,
    zone: &Zone<T>,
    added: usize,
    target: usize,
    protected: &[bool],
) -> (RowMap, Vec<usize>) {
    let inside = points_in_zone(scene, zone);
    let k = added.min(inside.len().saturating_sub(target));
    let mut order: Vec<usize> = inside.into_iter().filter(|&i| !protected.get(i).copied().unwrap_or(false)).collect();
    order.sort_by(|&a, &b| scene.points[a].opacity.partial_cmp(&scene.points[b].opacity).unwrap().then(a.cmp(&b)));
    let mut removed: Vec<usize> = order.into_iter().take(k).collect();
    removed.sort_unstable();
    if removed.is_empty() {
        return (RowMap::identity(scene.len()), removed);
    }
    let mut points = Vec::with_capacity(scene.len() - removed.len());
    let mut rows = Vec::with_capacity(points.capacity());
    for (i, g) in scene.points.iter().enumerate() {
        if removed.binary_search(&i).is_err() {
            points.push(*g);
            rows.push(Some(i));
        }
    }
    let rows = scene.replace_points(points, RowMap(rows));
    (rows, removed)
}

pub struct LpmView<'a, T> {
    pub id: usize,
    pub camera: &'a Camera<T>,
    pub gt: &'a ImageBuffer<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct LpmContext<T> {
    pub iteration: usize,
    /// ε_int in world units.
    pub intersection_distance: T,
    /// Largest scale for which densification clones instead of splitting.
    pub split_scale: T,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZoneRecord {
    pub iter: usize,
    pub view: usize,
    pub reference_view: usize,
    pub center: [f64; 3],
    pub radius: f64,
    pub n_points_before: usize,
    pub n_densified: usize,
    pub n_inserted: usize,
    pub n_reset: usize,
    pub n_pruned: usize,
    pub region_centroid: [f64; 2],
    pub region_radius: f64,
    pub region_mean_error: f64,
    pub midpoints: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RejectionRecord {
    pub iter: usize,
    pub view: usize,
    pub reference_view: usize,
    pub region: usize,
    #[serde(flatten)]
    pub rejection: ZoneRejection,
}

#[derive(Clone, Debug, Default)]
pub struct LpmOutcome<T> {
    pub zones: Vec<Zone<T>>,
    pub records: Vec<ZoneRecord>,
    pub rejections: Vec<RejectionRecord>,
    /// Final rows in terms of the scene's rows before the step.
    pub rows: RowMap,
    /// Final rows whose opacity was reset.
    pub reset: Vec<usize>,
    pub inserted: Vec<usize>,
}

fn mix_seed(seed: u64, a: usize, b: usize) -> u64 {
    let mut z = seed ^ (a as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (b as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Default)]
struct RowTag {
    inserted: bool,
    reset: bool,
}

/// One localized management pass for `current`, paired with `reference`.
/// `matches` maps positions in `current` to positions in `reference`.
#[allow(clippy::too_many_arguments)]
pub fn lpm_step<T: Real, R: Rng + ?Sized>(
    scene: &mut Scene<T>,
    current: &LpmView<'_, T>,
    reference: &LpmView<'_, T>,
    matches: &Correspondence<T>,
    stats: &mut GradStats<T>,
    adc: &AdcParams<T>,
    params: &LpmParams<T>,
    ctx: &LpmContext<T>,
    rng: &mut R,
) -> Result<LpmOutcome<T>> {
    if stats.len() != scene.len() || stats.generation != scene.generation {
        return Err(Error::Consistency("gradient statistics out of sync with the scene".into()));
    }
    let rendered = render(scene, current.camera);
    let map = error_map(&rendered.color, current.gt)?;
    let mut regions = extract_regions(&map, params);
    regions.truncate(params.max_regions);

    let mut outcome = LpmOutcome { rows: RowMap::identity(scene.len()), ..Default::default() };
    let size = (current.camera.width, current.camera.height);
    let reference_size = (reference.camera.width, reference.camera.height);
    for (k, region) in regions.iter().enumerate() {
        let origin = ZoneOrigin { view: current.id, reference_view: reference.id, iteration: ctx.iteration };
        let zone = pair_region(region, matches, size, reference_size, params.min_support)
            .ok_or(ZoneRejection::Unmatched)
            .and_then(|pair| {
                let seed = mix_seed(ctx.seed, ctx.iteration * 1024 + current.id, k);
                identify_zone(&pair, current.camera, reference.camera, params, ctx.intersection_distance, origin, seed)
            });
        match zone {
            Ok(z) => outcome.zones.push(z),
            Err(rejection) => outcome.rejections.push(RejectionRecord {
                iter: ctx.iteration,
                view: current.id,
                reference_view: reference.id,
                region: k,
                rejection,
            }),
        }
    }
    if outcome.zones.is_empty() {
        return Ok(outcome);
    }

    let mut work = scene.clone();
    let mut wstats = stats.clone();
    let mut tags = vec![RowTag::default(); work.len()];
    let mut total = RowMap::identity(work.len());
    fn follow<T: Real>(rows: &RowMap, work: &Scene<T>, wstats: &mut GradStats<T>, tags: &mut Vec<RowTag>, total: &mut RowMap) {
        wstats.apply_rows(rows, work.generation);
        *tags = rows.remap(tags, RowTag::default());
        *total = rows.after(total);
    }
    for zone in &outcome.zones {
        let n_before = points_in_zone(&work, zone).len();
        let len0 = work.len();
        let (rows, counts) =
            localized_densify(&mut work, zone, &mut wstats, adc, params.local_densify_threshold, ctx.split_scale, rng)?;
        follow(&rows, &work, &mut wstats, &mut tags, &mut total);
        let mut added = work.len().saturating_sub(len0);

        let mut n_inserted = 0;
        if let Some(rows) = insert_center_point(&mut work, zone, current.gt, params.sparsity_floor)? {
            follow(&rows, &work, &mut wstats, &mut tags, &mut total);
            tags.last_mut().expect("inserted row").inserted = true;
            n_inserted = 1;
            added += 1;
        }

        let mut n_reset = 0;
        for (camera, footprint) in [(current.camera, &zone.region), (reference.camera, &zone.reference_region)] {
            let changed = reset_front_points(&mut work, zone, camera, footprint, params);
            wstats.generation = work.generation;
            for i in changed {
                tags[i].reset = true;
                n_reset += 1;
            }
        }

        let protected: Vec<bool> = tags.iter().map(|t| t.inserted).collect();
        let (rows, removed) = density_aware_prune(&mut work, zone, added, params.prune_target, &protected);
        follow(&rows, &work, &mut wstats, &mut tags, &mut total);

        let c = zone.sphere.center;
        outcome.records.push(ZoneRecord {
            iter: ctx.iteration,
            view: zone.origin.view,
            reference_view: zone.origin.reference_view,
            center: [c.x.as_f64(), c.y.as_f64(), c.z.as_f64()],
            radius: zone.sphere.radius.as_f64(),
            n_points_before: n_before,
            n_densified: counts.cloned + counts.split,
            n_inserted,
            n_reset,
            n_pruned: removed.len(),
            region_centroid: [zone.region.centroid.x.as_f64(), zone.region.centroid.y.as_f64()],
            region_radius: zone.region.radius.as_f64(),
            region_mean_error: zone.region_mean_error.as_f64(),
            midpoints: zone.midpoints,
        });
    }
    scene.replace_points(work.points, total.clone());
    wstats.generation = scene.generation;
    *stats = wstats;
    outcome.reset = (0..tags.len()).filter(|&i| tags[i].reset).collect();
    outcome.inserted = (0..tags.len()).filter(|&i| tags[i].inserted).collect();
    outcome.rows = total;
    Ok(outcome)
}

/// Rows of `before` that an LPM step removed or modified although they lie
/// outside every zone and in front of none from either view of its pair.
pub fn locality_violations<T: Real>(
    before: &Scene<T>,
    after: &Scene<T>,
    outcome: &LpmOutcome<T>,
    current: &Camera<T>,
    reference: &Camera<T>,
    front_opacity: T,
) -> Vec<usize> {
    let mut fate: Vec<Option<usize>> = vec![None; before.len()];
    for (j, o) in outcome.rows.0.iter().enumerate() {
        if let Some(i) = o {
            fate[*i] = Some(j);
        }
    }
    (0..before.len())
        .filter(|&i| {
            let g = &before.points[i];
            if fate[i].is_some_and(|j| after.points[j] == *g) {
                return false;
            }
            !outcome.zones.iter().any(|z| {
                z.sphere.contains(g.mean)
                    || is_front_of_zone(g, z, current, &z.region, front_opacity)
                    || is_front_of_zone(g, z, reference, &z.reference_region, front_opacity)
            })
        })
        .collect()
}
