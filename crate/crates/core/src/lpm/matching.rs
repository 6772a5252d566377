//! Cross-view correspondences: a ground-truth projector and a Harris/NCC
//! patch matcher, behind one cached provider interface.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Vec2, Vec3};
use crate::real::Real;
use crate::render::{render, RenderOutput};
use crate::scene::{Camera, ImageBuffer, Scene};

/// Matched positions normalized to `[0,1]²` by image size.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Correspondence<T> {
    pub pairs: Vec<(Vec2<T>, Vec2<T>)>,
    pub confidence: Vec<T>,
}

impl<T: Real> Correspondence<T> {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn push(&mut self, a: Vec2<T>, b: Vec2<T>, confidence: T) {
        self.pairs.push((a, b));
        self.confidence.push(confidence.max(T::zero()).min(T::one()));
    }
}

pub fn normalize_pixel<T: Real>(p: Vec2<T>, width: usize, height: usize) -> Vec2<T> {
    Vec2::new(p.x / T::from_usize_lossy(width), p.y / T::from_usize_lossy(height))
}

pub fn denormalize_pixel<T: Real>(p: Vec2<T>, width: usize, height: usize) -> Vec2<T> {
    Vec2::new(p.x * T::from_usize_lossy(width), p.y * T::from_usize_lossy(height))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum MatcherSpec {
    GroundTruth {
        #[serde(default = "default_samples")]
        samples_per_point: usize,
        /// Slack on the depth visibility test, world units, on top of three
        /// standard deviations of the sampled Gaussian.
        #[serde(default = "default_depth_slack")]
        depth_slack: f64,
    },
    PatchNcc {
        #[serde(default = "default_min_score")]
        min_score: f64,
        #[serde(default = "default_max_corners")]
        max_corners: usize,
    },
}

fn default_samples() -> usize {
    32
}
fn default_depth_slack() -> f64 {
    0.05
}
fn default_min_score() -> f64 {
    0.8
}
fn default_max_corners() -> usize {
    200
}

impl Default for MatcherSpec {
    fn default() -> Self {
        Self::GroundTruth { samples_per_point: default_samples(), depth_slack: default_depth_slack() }
    }
}

pub trait CorrespondenceProvider<T> {
    fn compute(&mut self, a: usize, b: usize) -> Result<Correspondence<T>>;
}

/// Memoizes a provider per ordered view pair.
pub struct MatchCache<T> {
    provider: Box<dyn CorrespondenceProvider<T> + Send>,
    cache: BTreeMap<(usize, usize), Correspondence<T>>,
}

impl<T: Real> MatchCache<T> {
    pub fn new(provider: Box<dyn CorrespondenceProvider<T> + Send>) -> Self {
        Self { provider, cache: BTreeMap::new() }
    }

    pub fn get(&mut self, a: usize, b: usize) -> Result<&Correspondence<T>> {
        if !self.cache.contains_key(&(a, b)) {
            let m = self.provider.compute(a, b)?;
            self.cache.insert((a, b), m);
        }
        Ok(&self.cache[&(a, b)])
    }

    pub fn cached_pairs(&self) -> usize {
        self.cache.len()
    }
}

/// Projects surface samples of the ground-truth scene into both views.
pub struct GroundTruthMatcher<T> {
    cameras: Vec<Camera<T>>,
    /// Sample position and the extent of the Gaussian it came from.
    samples: Vec<(Vec3<T>, T)>,
    renders: BTreeMap<usize, RenderOutput<T>>,
    gt: Scene<T>,
    depth_slack: T,
}

impl<T: Real> GroundTruthMatcher<T> {
    pub fn new(gt: &Scene<T>, cameras: Vec<Camera<T>>, samples_per_point: usize, depth_slack: T, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::with_capacity(gt.len() * samples_per_point);
        for g in &gt.points {
            let rot = g.rotation.to_rotation();
            let extent = g.scale.max_component() * T::c(3.0);
            for k in 0..samples_per_point {
                let p = if k == 0 {
                    g.mean
                } else {
                    let z: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                    g.mean + rot.mul_vec(Vec3::new(T::c(z[0]), T::c(z[1]), T::c(z[2])).component_mul(g.scale))
                };
                samples.push((p, extent));
            }
        }
        Self { cameras, samples, renders: BTreeMap::new(), gt: gt.clone(), depth_slack }
    }

    fn camera(&self, v: usize) -> Result<&Camera<T>> {
        self.cameras.get(v).ok_or_else(|| Error::InvalidInput(format!("no camera with index {v}")))
    }

    fn visible(&mut self, v: usize, p: Vec3<T>, extent: T) -> Result<Option<Vec2<T>>> {
        let cam = *self.camera(v)?;
        let Some(proj) = cam.project_point(p) else {
            return Ok(None);
        };
        let (px, py) = (proj.pixel.x, proj.pixel.y);
        if !(px >= T::zero() && py >= T::zero() && px < T::from_usize_lossy(cam.width) && py < T::from_usize_lossy(cam.height)) {
            return Ok(None);
        }
        let out = self.renders.entry(v).or_insert_with(|| render(&self.gt, &cam));
        let idx = py.to_usize().unwrap() * cam.width + px.to_usize().unwrap();
        if out.alpha[idx] < T::c(0.5) || (proj.depth - out.depth[idx]).abs() > extent + self.depth_slack {
            return Ok(None);
        }
        Ok(Some(normalize_pixel(proj.pixel, cam.width, cam.height)))
    }
}

impl<T: Real> CorrespondenceProvider<T> for GroundTruthMatcher<T> {
    fn compute(&mut self, a: usize, b: usize) -> Result<Correspondence<T>> {
        self.camera(a)?;
        self.camera(b)?;
        let mut out = Correspondence::default();
        for k in 0..self.samples.len() {
            let (p, extent) = self.samples[k];
            if let Some(pa) = self.visible(a, p, extent)? {
                if let Some(pb) = self.visible(b, p, extent)? {
                    out.push(pa, pb, T::one());
                }
            }
        }
        Ok(out)
    }
}

const PATCH_HALF: usize = 3;

/// Harris corners matched by normalized cross-correlation of 7×7 patches.
pub struct PatchNccMatcher<T> {
    images: Vec<ImageBuffer<T>>,
    min_score: T,
    max_corners: usize,
}

impl<T: Real> PatchNccMatcher<T> {
    pub fn new(images: Vec<ImageBuffer<T>>, min_score: T, max_corners: usize) -> Self {
        Self { images, min_score, max_corners }
    }
}

fn gray<T: Real>(img: &ImageBuffer<T>) -> Vec<T> {
    img.pixels.iter().map(|p| (p[0] + p[1] + p[2]) / T::c(3.0)).collect()
}

/// Harris corners ordered by descending response.
pub fn harris_corners<T: Real>(img: &ImageBuffer<T>, max_corners: usize) -> Vec<(usize, usize)> {
    let (w, h) = (img.width, img.height);
    let margin = PATCH_HALF + 1;
    if w <= 2 * margin || h <= 2 * margin {
        return Vec::new();
    }
    let g = gray(img);
    let half = T::c(0.5);
    let mut ix = vec![T::zero(); w * h];
    let mut iy = vec![T::zero(); w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            ix[y * w + x] = (g[y * w + x + 1] - g[y * w + x - 1]) * half;
            iy[y * w + x] = (g[(y + 1) * w + x] - g[(y - 1) * w + x]) * half;
        }
    }
    let mut resp = vec![T::zero(); w * h];
    for y in margin..h - margin {
        for x in margin..w - margin {
            let (mut a, mut b, mut c) = (T::zero(), T::zero(), T::zero());
            for yy in y - 2..=y + 2 {
                for xx in x - 2..=x + 2 {
                    let (gx, gy) = (ix[yy * w + xx], iy[yy * w + xx]);
                    a += gx * gx;
                    b += gx * gy;
                    c += gy * gy;
                }
            }
            resp[y * w + x] = a * c - b * b - T::c(0.04) * (a + c) * (a + c);
        }
    }
    let peak = resp.iter().copied().fold(T::zero(), T::max);
    if !(peak > T::zero()) {
        return Vec::new();
    }
    let floor = peak * T::c(0.01);
    let mut corners = Vec::new();
    for y in margin..h - margin {
        for x in margin..w - margin {
            let r = resp[y * w + x];
            if r <= floor {
                continue;
            }
            let is_max = (y - 1..=y + 1).all(|yy| {
                (x - 1..=x + 1).all(|xx| (yy == y && xx == x) || resp[yy * w + xx] < r || (resp[yy * w + xx] == r && yy * w + xx > y * w + x))
            });
            if is_max {
                corners.push((r, x, y));
            }
        }
    }
    corners.sort_by(|p, q| q.0.partial_cmp(&p.0).unwrap().then((p.2, p.1).cmp(&(q.2, q.1))));
    corners.truncate(max_corners);
    corners.into_iter().map(|(_, x, y)| (x, y)).collect()
}

fn patch<T: Real>(g: &[T], w: usize, x: usize, y: usize) -> Option<Vec<T>> {
    let mut p = Vec::with_capacity((2 * PATCH_HALF + 1).pow(2));
    for yy in y - PATCH_HALF..=y + PATCH_HALF {
        for xx in x - PATCH_HALF..=x + PATCH_HALF {
            p.push(g[yy * w + xx]);
        }
    }
    let n = T::from_usize_lossy(p.len());
    let mean = p.iter().copied().sum::<T>() / n;
    p.iter_mut().for_each(|v| *v -= mean);
    let norm = p.iter().map(|v| *v * *v).sum::<T>().sqrt();
    if !(norm > T::c(1e-12)) {
        return None;
    }
    p.iter_mut().for_each(|v| *v /= norm);
    Some(p)
}

impl<T: Real> CorrespondenceProvider<T> for PatchNccMatcher<T> {
    fn compute(&mut self, a: usize, b: usize) -> Result<Correspondence<T>> {
        let (ia, ib) = match (self.images.get(a), self.images.get(b)) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(Error::InvalidInput(format!("no image for view pair ({a}, {b})"))),
        };
        let (ga, gb) = (gray(ia), gray(ib));
        let (wb, hb) = (ib.width, ib.height);
        let mut out = Correspondence::default();
        if wb <= 2 * PATCH_HALF || hb <= 2 * PATCH_HALF {
            return Ok(out);
        }
        let targets: Vec<(usize, usize, Vec<T>)> = (PATCH_HALF..hb - PATCH_HALF)
            .flat_map(|y| (PATCH_HALF..wb - PATCH_HALF).map(move |x| (x, y)))
            .filter_map(|(x, y)| patch(&gb, wb, x, y).map(|p| (x, y, p)))
            .collect();
        let tie = T::c(1e-12);
        for (x, y) in harris_corners(ia, self.max_corners) {
            let Some(src) = patch(&ga, ia.width, x, y) else { continue };
            let mut best: Option<(T, usize, usize, usize)> = None;
            for (tx, ty, tp) in &targets {
                let score: T = src.iter().zip(tp).map(|(p, q)| *p * *q).sum();
                let d2 = tx.abs_diff(x).pow(2) + ty.abs_diff(y).pow(2);
                let better = match best {
                    None => true,
                    Some((s, _, _, bd)) => score > s + tie || ((score - s).abs() <= tie && d2 < bd),
                };
                if better {
                    best = Some((score, *tx, *ty, d2));
                }
            }
            if let Some((score, tx, ty, _)) = best {
                if score >= self.min_score {
                    let pa = normalize_pixel(crate::render::pixel_center(x, y), ia.width, ia.height);
                    let pb = normalize_pixel(crate::render::pixel_center(tx, ty), wb, hb);
                    out.push(pa, pb, score);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Gaussian3D;

    fn ring_camera(angle: f64) -> Camera<f64> {
        let pos = Vec3::new(4.0 * angle.cos(), 4.0 * angle.sin(), 0.3);
        Camera::look_at(pos, Vec3::zero(), Vec3::new(0.0, 0.0, 1.0), 60.0, 48, 48).unwrap()
    }

    #[test]
    fn identical_views_match_identically() {
        let gt = Scene::new(vec![
            Gaussian3D::isotropic(Vec3::new(0.0, 0.0, 0.0), 0.3, 0.9, [1.0, 0.0, 0.0]).unwrap(),
            Gaussian3D::isotropic(Vec3::new(0.3, 0.4, 0.1), 0.2, 0.8, [0.0, 1.0, 0.0]).unwrap(),
        ]);
        let mut m = GroundTruthMatcher::new(&gt, vec![ring_camera(0.0), ring_camera(0.8)], 16, 0.05, 1);
        let c = m.compute(0, 0).unwrap();
        assert!(!c.is_empty());
        for (a, b) in &c.pairs {
            assert_eq!(a, b);
            assert!((0.0..=1.0).contains(&a.x) && (0.0..=1.0).contains(&a.y));
        }
        assert!(c.confidence.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_point_matches_its_projections() {
        let p = Vec3::new(0.1, -0.2, 0.05);
        let gt = Scene::new(vec![Gaussian3D::isotropic(p, 0.05, 0.99, [0.5, 0.5, 0.5]).unwrap()]);
        let cams = vec![ring_camera(0.0), ring_camera(0.7)];
        let mut m = GroundTruthMatcher::new(&gt, cams.clone(), 1, 0.05, 3);
        let c = m.compute(0, 1).unwrap();
        assert_eq!(c.len(), 1);
        let pa = normalize_pixel(cams[0].project_point(p).unwrap().pixel, 48, 48);
        let pb = normalize_pixel(cams[1].project_point(p).unwrap().pixel, 48, 48);
        assert!((c.pairs[0].0 - pa).norm() < 1e-6 && (c.pairs[0].1 - pb).norm() < 1e-6);
    }

    #[test]
    fn occluded_samples_are_dropped() {
        let cam0 = ring_camera(0.0);
        let back = Vec3::zero();
        let front = cam0.position * 0.5;
        let gt = Scene::new(vec![
            Gaussian3D::isotropic(back, 0.05, 0.99, [1.0, 1.0, 1.0]).unwrap(),
            Gaussian3D::isotropic(front, 0.3, 0.99, [1.0, 1.0, 1.0]).unwrap(),
        ]);
        let mut m = GroundTruthMatcher::new(&gt, vec![cam0, ring_camera(1.5)], 1, 0.05, 3);
        let c = m.compute(0, 1).unwrap();
        let hidden = normalize_pixel(cam0.project_point(back).unwrap().pixel, 48, 48);
        assert!(c.pairs.iter().all(|(a, _)| (*a - hidden).norm() > 1e-9));
    }

    fn textured(w: usize, h: usize) -> ImageBuffer<f64> {
        let mut img = ImageBuffer::filled(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let v = if (x / 5 + y / 7) % 2 == 0 { 0.9 } else { 0.1 };
                let v = v + 0.05 * ((x * 7 + y * 13) % 11) as f64 / 11.0;
                img.set(x, y, [v, v * 0.8, 1.0 - v]);
            }
        }
        img
    }

    #[test]
    fn patch_matcher_matches_itself() {
        let img = textured(32, 32);
        let mut m = PatchNccMatcher::new(vec![img.clone()], 0.8, 200);
        let c = m.compute(0, 0).unwrap();
        assert!(!c.is_empty());
        for ((a, b), s) in c.pairs.iter().zip(&c.confidence) {
            assert_eq!(a, b);
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_matcher_follows_a_shift() {
        let img = textured(40, 40);
        let mut shifted = ImageBuffer::filled(40, 40, [0.0; 3]);
        for y in 0..40 {
            for x in 0..40 {
                shifted.set(x, y, img.get((x + 3).min(39), y));
            }
        }
        let mut m = PatchNccMatcher::new(vec![img, shifted], 0.95, 50);
        let c = m.compute(0, 1).unwrap();
        assert!(!c.is_empty());
        let exact = c.pairs.iter().filter(|(a, b)| ((a.x - b.x) * 40.0 - 3.0).abs() < 1e-9 && a.y == b.y).count();
        assert!(exact * 10 >= c.len() * 9, "{exact} of {}", c.len());
    }

    #[test]
    fn cache_computes_once() {
        struct Counting(usize);
        impl CorrespondenceProvider<f64> for Counting {
            fn compute(&mut self, _: usize, _: usize) -> Result<Correspondence<f64>> {
                self.0 += 1;
                let mut c = Correspondence::default();
                c.push(Vec2::new(0.5, 0.5), Vec2::new(0.25, 0.5), 1.0 / self.0 as f64);
                Ok(c)
            }
        }
        let mut cache = MatchCache::new(Box::new(Counting(0)));
        assert_eq!(cache.get(0, 1).unwrap().confidence[0], 1.0);
        assert_eq!(cache.get(0, 1).unwrap().confidence[0], 1.0);
        assert_eq!(cache.get(1, 0).unwrap().confidence[0], 0.5);
        assert_eq!(cache.cached_pairs(), 2);
    }
}
