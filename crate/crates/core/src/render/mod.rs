//! Forward splatting: EWA projection, global depth sort and front-to-back
//! alpha compositing.

mod backward;

pub use backward::{backward, backward_image, GradientBundle};

use crate::linalg::{Mat2, Mat3, Vec2, Vec3};
use crate::real::Real;
use crate::scene::{Camera, Gaussian3D, ImageBuffer, Scene, NEAR_PLANE};

/// Per-fragment opacity cap; keeps transmittance strictly positive.
pub const ALPHA_CAP: f64 = 0.99;
/// Isotropic dilation added to every projected covariance, in px².
pub const BLUR_FLOOR: f64 = 0.3;
/// Squared Mahalanobis radius beyond which a splat has no influence.
pub const CUTOFF_MAHALANOBIS2: f64 = 9.0;
/// Lower bound on accumulated alpha when normalizing the depth map.
pub const DEPTH_EPS: f64 = 1e-6;

/// A Gaussian projected into one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D<T> {
    pub mean2: Vec2<T>,
    pub cov2: Mat2<T>,
    /// Inverse of `cov2`.
    pub conic: Mat2<T>,
    pub depth: T,
    /// 3σ footprint radius along the major axis, px.
    pub radius: T,
    pub source: usize,
}

/// Intermediate quantities of the projection, reused by the backward pass.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ProjectionTerms<T> {
    pub cam_point: Vec3<T>,
    /// Camera-to-world rotation; world-to-camera is its transpose.
    pub cam_rot: Mat3<T>,
    /// Rows of the 2x3 pinhole Jacobian.
    pub jac: [[T; 3]; 2],
    pub cov_cam: Mat3<T>,
}

pub(crate) fn projection_terms<T: Real>(camera: &Camera<T>, g: &Gaussian3D<T>) -> Option<ProjectionTerms<T>> {
    let cam_rot = camera.rotation();
    let w = cam_rot.transpose();
    let cam_point = w.mul_vec(g.mean - camera.position);
    if !(cam_point.z > T::c(NEAR_PLANE)) {
        return None;
    }
    let (fx, fy) = (camera.focal.x, camera.focal.y);
    let iz = T::one() / cam_point.z;
    let iz2 = iz * iz;
    let jac = [
        [fx * iz, T::zero(), -fx * cam_point.x * iz2],
        [T::zero(), fy * iz, -fy * cam_point.y * iz2],
    ];
    let cov_cam = w * g.covariance() * cam_rot;
    Some(ProjectionTerms { cam_point, cam_rot, jac, cov_cam })
}

/// `J Σc Jᵀ` without the dilation.
pub(crate) fn jacobian_sandwich<T: Real>(jac: &[[T; 3]; 2], cov: &Mat3<T>) -> Mat2<T> {
    let mut out = Mat2::zero();
    for a in 0..2 {
        for b in 0..2 {
            let mut s = T::zero();
            for i in 0..3 {
                for j in 0..3 {
                    s += jac[a][i] * cov.0[i][j] * jac[b][j];
                }
            }
            out.0[a][b] = s;
        }
    }
    out
}

/// Project one Gaussian; `None` when it is behind the near plane or its 3σ
/// footprint misses the image.
pub fn project_gaussian<T: Real>(camera: &Camera<T>, g: &Gaussian3D<T>, source: usize) -> Option<Splat2D<T>> {
    let terms = projection_terms(camera, g)?;
    let p = terms.cam_point;
    let mean2 = Vec2::new(
        camera.focal.x * p.x / p.z + camera.principal.x,
        camera.focal.y * p.y / p.z + camera.principal.y,
    );
    let cov2 = jacobian_sandwich(&terms.jac, &terms.cov_cam) + Mat2::identity().scaled(T::c(BLUR_FLOOR));
    let conic = cov2.inverse()?;
    let (_, lmax) = cov2.sym_eigenvalues();
    let radius = T::c(3.0) * lmax.sqrt();
    let (w, h) = (T::from_usize_lossy(camera.width), T::from_usize_lossy(camera.height));
    if mean2.x + radius < T::zero() || mean2.x - radius > w || mean2.y + radius < T::zero() || mean2.y - radius > h {
        return None;
    }
    if !mean2.x.is_finite() || !mean2.y.is_finite() || !radius.is_finite() {
        return None;
    }
    Some(Splat2D { mean2, cov2, conic, depth: p.z, radius, source })
}

impl<T: Real> Mat2<T> {
    pub fn scaled(self, s: T) -> Self {
        let m = self.0;
        Self([[m[0][0] * s, m[0][1] * s], [m[1][0] * s, m[1][1] * s]])
    }
}

/// Squared Mahalanobis distance of `pixel` from the splat center.
#[inline]
pub fn mahalanobis2<T: Real>(s: &Splat2D<T>, pixel: Vec2<T>) -> T {
    s.conic.quad(pixel - s.mean2)
}

/// `min(ALPHA_CAP, opacity · exp(-½ dᵀ Σ⁻¹ d))`, zero beyond the cutoff.
pub fn compute_alpha<T: Real>(s: &Splat2D<T>, opacity: T, pixel: Vec2<T>) -> T {
    let m2 = mahalanobis2(s, pixel);
    if !(m2 <= T::c(CUTOFF_MAHALANOBIS2)) {
        return T::zero();
    }
    (opacity * (-T::c(0.5) * m2).exp()).min(T::c(ALPHA_CAP))
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Fragment<T> {
    /// Index into `Raster::splats` (depth order).
    pub splat: u32,
    pub alpha: T,
    /// Gaussian falloff `exp(-½ m²)` before opacity.
    pub falloff: T,
    pub capped: bool,
}

/// Depth-sorted splats plus per-pixel fragment lists, front to back.
pub(crate) struct Raster<T> {
    pub splats: Vec<Splat2D<T>>,
    pub fragments: Vec<Vec<Fragment<T>>>,
    pub width: usize,
    pub height: usize,
}

#[inline]
pub fn pixel_center<T: Real>(x: usize, y: usize) -> Vec2<T> {
    Vec2::new(T::from_usize_lossy(x) + T::c(0.5), T::from_usize_lossy(y) + T::c(0.5))
}

pub(crate) fn rasterize<T: Real>(scene: &Scene<T>, camera: &Camera<T>) -> Raster<T> {
    let mut splats: Vec<Splat2D<T>> = scene
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(camera, g, i))
        .collect();
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap_or(std::cmp::Ordering::Equal).then(a.source.cmp(&b.source)));

    let (w, h) = (camera.width, camera.height);
    let mut fragments: Vec<Vec<Fragment<T>>> = vec![Vec::new(); w * h];
    let cutoff = T::c(CUTOFF_MAHALANOBIS2);
    let cap = T::c(ALPHA_CAP);
    let half = T::c(0.5);
    for (rank, s) in splats.iter().enumerate() {
        let opacity = scene.points[s.source].opacity;
        let x0 = (s.mean2.x - s.radius - half).ceil().max(T::zero());
        let y0 = (s.mean2.y - s.radius - half).ceil().max(T::zero());
        let x1 = (s.mean2.x + s.radius - half).floor().min(T::from_usize_lossy(w - 1));
        let y1 = (s.mean2.y + s.radius - half).floor().min(T::from_usize_lossy(h - 1));
        if x1 < x0 || y1 < y0 {
            continue;
        }
        let (x0, x1) = (x0.to_usize().unwrap_or(0), x1.to_usize().unwrap_or(0));
        let (y0, y1) = (y0.to_usize().unwrap_or(0), y1.to_usize().unwrap_or(0));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let m2 = mahalanobis2(s, pixel_center(x, y));
                if !(m2 <= cutoff) {
                    continue;
                }
                let falloff = (-half * m2).exp();
                let raw = opacity * falloff;
                let capped = raw > cap;
                fragments[y * w + x].push(Fragment { splat: rank as u32, alpha: if capped { cap } else { raw }, falloff, capped });
            }
        }
    }
    Raster { splats, fragments, width: w, height: h }
}

/// Result of rendering one view.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput<T> {
    pub color: ImageBuffer<T>,
    /// Alpha-weighted expected depth, normalized by accumulated alpha; 0
    /// where nothing was drawn.
    pub depth: Vec<T>,
    /// Accumulated alpha `1 - T_final` per pixel.
    pub alpha: Vec<T>,
    /// Number of pixels each scene point touched.
    pub contributions: Vec<u32>,
}

pub fn render<T: Real>(scene: &Scene<T>, camera: &Camera<T>) -> RenderOutput<T> {
    render_with_background(scene, camera, [T::zero(); 3])
}

/// One front-to-back compositing result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blend<T> {
    pub color: [T; 3],
    /// Alpha-weighted depth sum, before normalization.
    pub depth_sum: T,
    pub transmittance: T,
}

/// Front-to-back "over" compositing of `(alpha, color, depth)` layers,
/// optionally recording the transmittance in front of each layer.
pub fn composite<T: Real>(
    layers: impl IntoIterator<Item = (T, [T; 3], T)>,
    background: [T; 3],
    mut trace: Option<&mut Vec<T>>,
) -> Blend<T> {
    let mut trans = T::one();
    let mut c = [T::zero(); 3];
    let mut d = T::zero();
    for (alpha, col, depth) in layers {
        if let Some(t) = trace.as_deref_mut() {
            t.push(trans);
        }
        let weight = alpha * trans;
        for ch in 0..3 {
            c[ch] += col[ch] * weight;
        }
        d += depth * weight;
        trans *= T::one() - alpha;
    }
    for ch in 0..3 {
        c[ch] += background[ch] * trans;
    }
    Blend { color: c, depth_sum: d, transmittance: trans }
}

pub fn render_with_background<T: Real>(scene: &Scene<T>, camera: &Camera<T>, background: [T; 3]) -> RenderOutput<T> {
    let raster = rasterize(scene, camera);
    let n = raster.width * raster.height;
    let mut color = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    let mut contributions = vec![0u32; scene.len()];
    for frags in &raster.fragments {
        let layers = frags.iter().map(|f| {
            let s = &raster.splats[f.splat as usize];
            contributions[s.source] += 1;
            (f.alpha, scene.points[s.source].color, s.depth)
        });
        let b = composite(layers, background, None);
        let acc = T::one() - b.transmittance;
        color.push(b.color);
        alpha.push(acc);
        depth.push(if frags.is_empty() { T::zero() } else { b.depth_sum / acc.max(T::c(DEPTH_EPS)) });
    }
    RenderOutput {
        color: ImageBuffer { width: raster.width, height: raster.height, pixels: color },
        depth,
        alpha,
        contributions,
    }
}
