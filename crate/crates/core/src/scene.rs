//! Scene primitives: Gaussians, pinhole cameras, images and the scene container.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::linalg::{Mat3, Quat, Vec2, Vec3};
use crate::real::Real;

/// Points closer than this to the camera plane are not projected.
pub const NEAR_PLANE: f64 = 1e-4;

/// One anisotropic Gaussian primitive with view-independent color.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian3D<T> {
    pub mean: Vec3<T>,
    pub rotation: Quat<T>,
    /// Per-axis standard deviations.
    pub scale: Vec3<T>,
    pub opacity: T,
    pub color: [T; 3],
}

impl<T: Real> Gaussian3D<T> {
    pub fn new(mean: Vec3<T>, rotation: Quat<T>, scale: Vec3<T>, opacity: T, color: [T; 3]) -> Result<Self> {
        let g = Self { mean, rotation, scale, opacity, color };
        g.validate()?;
        Ok(g)
    }

    pub fn isotropic(mean: Vec3<T>, scale: T, opacity: T, color: [T; 3]) -> Result<Self> {
        Self::new(mean, Quat::identity(), Vec3::splat(scale), opacity, color)
    }

    pub fn validate(&self) -> Result<()> {
        let tol = T::c(1e-6);
        if (self.rotation.norm() - T::one()).abs() > tol {
            return Err(Error::InvalidParameter(format!("quaternion norm {} is not 1", self.rotation.norm())));
        }
        if !(self.scale.min_component() > T::zero()) || !self.scale.is_finite() {
            return Err(Error::InvalidParameter("scale components must be positive".into()));
        }
        if !(self.opacity >= T::zero() && self.opacity <= T::one()) {
            return Err(Error::InvalidParameter(format!("opacity {} outside [0,1]", self.opacity)));
        }
        if self.color.iter().any(|c| !(*c >= T::zero() && *c <= T::one())) {
            return Err(Error::InvalidParameter("color outside [0,1]".into()));
        }
        if !self.mean.is_finite() {
            return Err(Error::InvalidParameter("non-finite mean".into()));
        }
        Ok(())
    }

    pub fn covariance(&self) -> Mat3<T> {
        build_covariance(self.rotation, self.scale).expect("validated gaussian")
    }
}

/// `R · diag(scale²) · Rᵀ` for the rotation of `rotation`.
pub fn build_covariance<T: Real>(rotation: Quat<T>, scale: Vec3<T>) -> Result<Mat3<T>> {
    if !(scale.min_component() > T::zero()) {
        return Err(Error::InvalidParameter(format!("scale must be positive, got {:?}", scale)));
    }
    let r = rotation.to_rotation();
    let s2 = scale.component_mul(scale);
    let mut out = Mat3::zero();
    for i in 0..3 {
        for j in i..3 {
            let v = r.0[i][0] * s2.x * r.0[j][0] + r.0[i][1] * s2.y * r.0[j][1] + r.0[i][2] * s2.z * r.0[j][2];
            out.0[i][j] = v;
            out.0[j][i] = v;
        }
    }
    Ok(out)
}

/// Unnormalized density `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`.
///
/// Evaluated in the Gaussian's principal frame, `Σ⁻¹ = R S⁻² Rᵀ`.
pub fn gaussian_density<T: Real>(g: &Gaussian3D<T>, x: Vec3<T>) -> T {
    let local = g.rotation.to_rotation().transpose().mul_vec(x - g.mean);
    let z = Vec3::new(local.x / g.scale.x, local.y / g.scale.y, local.z / g.scale.z);
    (-T::c(0.5) * z.norm_squared()).exp()
}

/// Pinhole camera. The orientation maps camera axes (x right, y down,
/// z forward) to world axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera<T> {
    pub position: Vec3<T>,
    pub orientation: Quat<T>,
    pub focal: Vec2<T>,
    pub principal: Vec2<T>,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointProjection<T> {
    pub pixel: Vec2<T>,
    pub depth: T,
}

impl<T: Real> Camera<T> {
    pub fn new(
        position: Vec3<T>,
        orientation: Quat<T>,
        focal: Vec2<T>,
        principal: Vec2<T>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self { position, orientation: orientation.normalize(), focal, principal, width, height };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `position` looking at `target`, with the principal point at
    /// the image center.
    pub fn look_at(position: Vec3<T>, target: Vec3<T>, up: Vec3<T>, focal: T, width: usize, height: usize) -> Result<Self> {
        let forward = (target - position)
            .try_normalize()
            .ok_or_else(|| Error::InvalidParameter("camera position equals target".into()))?;
        let mut right = forward.cross(up);
        if right.norm() < T::c(1e-9) {
            let alt = if forward.x.abs() < T::c(0.9) { Vec3::new(T::one(), T::zero(), T::zero()) } else { Vec3::new(T::zero(), T::one(), T::zero()) };
            right = forward.cross(alt);
        }
        let right = right.normalize();
        let down = forward.cross(right);
        let rot = Mat3::from_columns(right, down, forward);
        let principal = Vec2::new(T::from_usize_lossy(width) * T::c(0.5), T::from_usize_lossy(height) * T::c(0.5));
        Self::new(position, Quat::from_rotation(&rot), Vec2::new(focal, focal), principal, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("camera resolution must be at least 1x1".into()));
        }
        if !(self.focal.x > T::zero() && self.focal.y > T::zero()) {
            return Err(Error::InvalidParameter("focal lengths must be positive".into()));
        }
        let (w, h) = (T::from_usize_lossy(self.width), T::from_usize_lossy(self.height));
        let p = self.principal;
        if !(p.x >= T::zero() && p.x <= w && p.y >= T::zero() && p.y <= h) {
            return Err(Error::InvalidParameter("principal point outside the image".into()));
        }
        Ok(())
    }

    /// Camera-to-world rotation.
    pub fn rotation(&self) -> Mat3<T> {
        self.orientation.to_rotation()
    }

    pub fn forward(&self) -> Vec3<T> {
        self.rotation().column(2)
    }

    pub fn world_to_camera(&self, p: Vec3<T>) -> Vec3<T> {
        self.rotation().transpose().mul_vec(p - self.position)
    }

    /// Pixel coordinates and depth of a world point; `None` when the point is
    /// not in front of the near plane.
    pub fn project_point(&self, p: Vec3<T>) -> Option<PointProjection<T>> {
        let c = self.world_to_camera(p);
        if !(c.z > T::c(NEAR_PLANE)) {
            return None;
        }
        let pixel = Vec2::new(self.focal.x * c.x / c.z + self.principal.x, self.focal.y * c.y / c.z + self.principal.y);
        Some(PointProjection { pixel, depth: c.z })
    }

    /// Unit world-space direction of the ray through an image position.
    pub fn pixel_direction(&self, pixel: Vec2<T>) -> Vec3<T> {
        let d = Vec3::new((pixel.x - self.principal.x) / self.focal.x, (pixel.y - self.principal.y) / self.focal.y, T::one());
        self.rotation().mul_vec(d).normalize()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn image_diagonal(&self) -> T {
        T::from_usize_lossy(self.width * self.width + self.height * self.height).sqrt()
    }
}

/// Row-major RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer<T> {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[T; 3]>,
}

impl<T: Real> ImageBuffer<T> {
    pub fn filled(width: usize, height: usize, value: [T; 3]) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<[T; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::InvalidInput(format!("{} pixels for a {width}x{height} image", pixels.len())));
        }
        Ok(Self { width, height, pixels })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [T; 3] {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [T; 3]) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn clamped(&self) -> Self {
        let pixels = self.pixels.iter().map(|p| p.map(|v| v.max(T::zero()).min(T::one()))).collect();
        Self { width: self.width, height: self.height, pixels }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Ordered set of Gaussians plus an edit generation counter.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Scene<T> {
    pub points: Vec<Gaussian3D<T>>,
    pub generation: u64,
}

impl<T: Real> Scene<T> {
    pub fn new(points: Vec<Gaussian3D<T>>) -> Self {
        Self { points, generation: 0 }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.points.iter().enumerate() {
            g.validate().map_err(|e| Error::InvalidParameter(format!("point {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn bump_generation(&mut self) {
        self.generation += 1;
    }

    /// Axis-aligned bounds of the means, `None` for an empty scene.
    pub fn bounds(&self) -> Option<(Vec3<T>, Vec3<T>)> {
        let first = self.points.first()?.mean;
        Some(self.points.iter().fold((first, first), |(lo, hi), g| {
            (
                Vec3::new(lo.x.min(g.mean.x), lo.y.min(g.mean.y), lo.z.min(g.mean.z)),
                Vec3::new(hi.x.max(g.mean.x), hi.y.max(g.mean.y), hi.z.max(g.mean.z)),
            )
        }))
    }

    /// Replace the point list, returning the row mapping so per-point state can follow.
    pub fn replace_points(&mut self, points: Vec<Gaussian3D<T>>, rows: RowMap) -> RowMap {
        debug_assert_eq!(points.len(), rows.len());
        self.points = points;
        self.bump_generation();
        rows
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "GS3D v1 {}", self.points.len())?;
        for g in &self.points {
            let q = g.rotation;
            writeln!(
                w,
                "{} {} {} {} {} {} {} {} {} {} {} {} {} {}",
                g.mean.x, g.mean.y, g.mean.z, q.w, q.x, q.y, q.z, g.scale.x, g.scale.y, g.scale.z, g.opacity,
                g.color[0], g.color[1], g.color[2]
            )?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty scene file".into()))??;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("GS3D") || parts.next() != Some("v1") {
            return Err(Error::Format(format!("bad scene header {header:?}")));
        }
        let count: usize = parts
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| Error::Format("missing point count in header".into()))?;
        let mut points = Vec::with_capacity(count);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<T> = line
                .split_whitespace()
                .map(|t| t.parse::<T>().map_err(|_| Error::Format(format!("bad number {t:?}"))))
                .collect::<Result<_>>()?;
            if vals.len() != 14 {
                return Err(Error::Format(format!("expected 14 values per record, got {}", vals.len())));
            }
            let g = Gaussian3D::new(
                Vec3::new(vals[0], vals[1], vals[2]),
                Quat::new(vals[3], vals[4], vals[5], vals[6]),
                Vec3::new(vals[7], vals[8], vals[9]),
                vals[10],
                [vals[11], vals[12], vals[13]],
            )
            .map_err(|e| Error::Format(format!("record {}: {e}", points.len())))?;
            points.push(g);
        }
        if points.len() != count {
            return Err(Error::Format(format!("header says {count} points, found {}", points.len())));
        }
        Ok(Self::new(points))
    }
}

/// Provenance of each row after a scene edit: `Some(old)` for a row carried
/// over from the previous point list, `None` for a newly created point.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct RowMap(pub Vec<Option<usize>>);

impl RowMap {
    pub fn identity(n: usize) -> Self {
        Self((0..n).map(Some).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `self` applied after `first`: maps rows of the final list to rows of
    /// the list `first` started from.
    pub fn after(&self, first: &RowMap) -> RowMap {
        RowMap(self.0.iter().map(|o| o.and_then(|i| first.0[i])).collect())
    }

    /// Reorder per-row data, filling new rows with `fresh`.
    pub fn remap<V: Clone>(&self, old: &[V], fresh: V) -> Vec<V> {
        self.0.iter().map(|o| o.map_or_else(|| fresh.clone(), |i| old[i].clone())).collect()
    }
}
