//! Synthetic ground truth: random Gaussian scenes, a camera ring and
//! degraded initializations.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::config::{InitSpec, OccluderSpec, Placement, RigSpec, SceneSpec};
use crate::error::{Error, Result};
use crate::render::render;
use crate::{Camera, Gaussian, Image, Quat, Scene, Vec3};

pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Quat {
    loop {
        let v: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let q = Quat::from_array(v);
        if q.norm() > 1e-6 {
            return q.normalize();
        }
    }
}

/// Gaussians uniform in the cube with random orientation, per-axis scale,
/// color and opacity.
pub fn generate_gt_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    if spec.count == 0 {
        return Err(Error::Config("ground truth needs at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = spec.half_extent;
    let [s0, s1] = spec.scale_range;
    let [o0, o1] = spec.opacity_range;
    let points = (0..spec.count)
        .map(|_| {
            let mean = Vec3::new(rng.random_range(-h..=h), rng.random_range(-h..=h), rng.random_range(-h..=h));
            let rotation = random_rotation(&mut rng);
            let scale = Vec3::new(rng.random_range(s0..=s1), rng.random_range(s0..=s1), rng.random_range(s0..=s1));
            let opacity = rng.random_range(o0..=o1);
            let color = [rng.random::<f64>(), rng.random(), rng.random()];
            Gaussian::new(mean, rotation, scale, opacity, color)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene::new(points))
}

/// Cameras evenly spaced on a horizontal ring around the origin, looking at it.
pub fn ring_cameras(rig: &RigSpec) -> Result<Vec<Camera>> {
    if rig.cameras < 2 {
        return Err(Error::Config("rig needs at least two cameras".into()));
    }
    (0..rig.cameras)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / rig.cameras as f64;
            let z = if i % 2 == 0 { rig.elevation } else { -rig.elevation };
            let pos = Vec3::new(rig.radius * a.cos(), rig.radius * a.sin(), z);
            Camera::look_at(pos, Vec3::zero(), Vec3::new(0.0, 0.0, 1.0), rig.focal, rig.width, rig.height)
        })
        .collect()
}

/// Indices of (train, test) cameras: every `test_every`-th camera is held out.
pub fn split_views(n: usize, test_every: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|i| i % test_every.max(1) != 0)
}

pub struct GeneratedScene {
    pub gt: Scene,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
}

pub fn generate_scene(spec: &SceneSpec, rig: &RigSpec, seed: u64) -> Result<GeneratedScene> {
    let gt = generate_gt_scene(spec, seed)?;
    let cameras = ring_cameras(rig)?;
    let images = cameras.iter().map(|c| render(&gt, c).color).collect();
    Ok(GeneratedScene { gt, cameras, images })
}

pub fn occluder_position(o: &OccluderSpec, cameras: &[Camera]) -> Result<Vec3> {
    match &o.placement {
        Placement::At(p) => Ok(Vec3::from_array(*p)),
        Placement::BetweenCamera { camera, fraction, target } => {
            let cam = cameras.get(*camera).ok_or_else(|| Error::Config(format!("no camera {camera}")))?;
            let t = Vec3::from_array(*target);
            Ok(cam.position + (t - cam.position) * *fraction)
        }
    }
}

/// Subsample, jitter and fade the ground truth, then append the occluders.
pub fn init_scene(gt: &Scene, spec: &InitSpec, cameras: &[Camera], seed: u64) -> Result<Scene> {
    if !(spec.fraction > 0.0 && spec.fraction <= 1.0) {
        return Err(Error::Config("init fraction must lie in (0,1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<&Gaussian> = gt
        .points
        .iter()
        .filter(|g| !spec.exclude.iter().any(|e| (g.mean - Vec3::from_array(e.center)).norm() <= e.radius))
        .collect();
    let keep = ((spec.fraction * candidates.len() as f64).round() as usize).clamp(usize::from(!candidates.is_empty()), candidates.len());
    let mut picked = sample(&mut rng, candidates.len(), keep).into_vec();
    picked.sort_unstable();
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut points: Vec<Gaussian> = picked
        .into_iter()
        .map(|i| {
            let mut g = *candidates[i];
            if spec.sigma > 0.0 {
                g.mean += Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
            }
            g.opacity = spec.opacity;
            g
        })
        .collect();
    for o in &spec.occluders {
        let pos = occluder_position(o, cameras)?;
        points.push(Gaussian::isotropic(pos, o.scale, o.opacity, o.color)?);
    }
    Ok(Scene::new(points))
}
