//! Multiview geometric primitives: rays, ray-pair closest points, minimal
//! enclosing circles/spheres and pixel-cone ray bundles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{Vec2, Vec3};
use crate::real::Real;
use crate::scene::Camera;

/// Directions whose cross product is shorter than this are parallel.
pub const PARALLEL_EPS: f64 = 1e-9;
/// Default cap on rays cast per cone.
pub const CONE_RAY_CAP: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<T> {
    pub origin: Vec3<T>,
    pub direction: Vec3<T>,
}

impl<T: Real> Ray<T> {
    /// Ray with the direction normalized; `None` for a zero direction.
    pub fn new(origin: Vec3<T>, direction: Vec3<T>) -> Option<Self> {
        Some(Self { origin, direction: direction.try_normalize()? })
    }

    pub fn at(&self, t: T) -> Vec3<T> {
        self.origin + self.direction * t
    }

    pub fn through_pixel(camera: &Camera<T>, pixel: Vec2<T>) -> Self {
        Self { origin: camera.position, direction: camera.pixel_direction(pixel) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClosestPoints<T> {
    Found {
        p1: Vec3<T>,
        p2: Vec3<T>,
        /// Ray parameters of `p1` and `p2`.
        s: T,
        t: T,
        distance: T,
    },
    Parallel,
    /// The closest points of the supporting lines lie behind an origin.
    Behind,
}

/// Closest points between two rays, admitting only non-negative parameters.
pub fn ray_closest_points<T: Real>(r1: &Ray<T>, r2: &Ray<T>) -> ClosestPoints<T> {
    let n = r1.direction.cross(r2.direction);
    let nn = n.norm_squared();
    if nn.sqrt() < T::c(PARALLEL_EPS) {
        return ClosestPoints::Parallel;
    }
    let w = r2.origin - r1.origin;
    let s = w.cross(r2.direction).dot(n) / nn;
    let t = w.cross(r1.direction).dot(n) / nn;
    if s < T::zero() || t < T::zero() {
        return ClosestPoints::Behind;
    }
    let p1 = r1.at(s);
    let p2 = r2.at(t);
    ClosestPoints::Found { p1, p2, s, t, distance: (p1 - p2).norm() }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sphere<T> {
    pub center: Vec3<T>,
    pub radius: T,
}

impl<T: Real> Sphere<T> {
    /// Closed-ball membership.
    pub fn contains(&self, p: Vec3<T>) -> bool {
        (p - self.center).norm_squared() <= self.radius * self.radius
    }
}

#[derive(Clone, Copy, Debug)]
struct Ball<T, const D: usize> {
    center: [T; D],
    r2: T,
}

impl<T: Real, const D: usize> Ball<T, D> {
    fn empty() -> Self {
        Self { center: [T::zero(); D], r2: -T::one() }
    }

    fn contains(&self, p: &[T; D]) -> bool {
        if self.r2 < T::zero() {
            return false;
        }
        let d2 = dist2(p, &self.center);
        d2 <= self.r2 + (self.r2 + T::one()) * T::epsilon() * T::c(64.0)
    }
}

fn dist2<T: Real, const D: usize>(a: &[T; D], b: &[T; D]) -> T {
    (0..D).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

/// Smallest ball with every support point on its boundary.
fn ball_on_boundary<T: Real, const D: usize>(support: &[[T; D]]) -> Ball<T, D> {
    let k = support.len();
    if k == 0 {
        return Ball::empty();
    }
    let p0 = support[0];
    if k == 1 {
        return Ball { center: p0, r2: T::zero() };
    }
    let v: Vec<[T; D]> = support[1..].iter().map(|p| std::array::from_fn(|d| p[d] - p0[d])).collect();
    let m = k - 1;
    // 2 (v_j · v_l) λ_l = |v_j|², solved by elimination with partial pivoting.
    let mut a = vec![vec![T::zero(); m + 1]; m];
    for j in 0..m {
        for l in 0..m {
            a[j][l] = T::c(2.0) * (0..D).map(|d| v[j][d] * v[l][d]).sum::<T>();
        }
        a[j][m] = (0..D).map(|d| v[j][d] * v[j][d]).sum::<T>();
    }
    let scale = (0..m).map(|j| a[j][j].abs()).fold(T::zero(), T::max);
    for col in 0..m {
        let piv = (col..m).max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap()).unwrap();
        if !(a[piv][col].abs() > scale * T::epsilon() * T::c(1e3)) {
            return farthest_pair_ball(support);
        }
        a.swap(col, piv);
        for row in 0..m {
            if row != col {
                let f = a[row][col] / a[col][col];
                for c in col..=m {
                    let sub = f * a[col][c];
                    a[row][c] -= sub;
                }
            }
        }
    }
    let mut center = p0;
    for j in 0..m {
        let lambda = a[j][m] / a[j][j];
        for d in 0..D {
            center[d] += lambda * v[j][d];
        }
    }
    let r2 = support.iter().map(|p| dist2(p, &center)).fold(T::zero(), T::max);
    if !r2.is_finite() {
        return farthest_pair_ball(support);
    }
    Ball { center, r2 }
}

fn farthest_pair_ball<T: Real, const D: usize>(pts: &[[T; D]]) -> Ball<T, D> {
    let mut best = (0, 0, T::zero());
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d = dist2(&pts[i], &pts[j]);
            if d > best.2 {
                best = (i, j, d);
            }
        }
    }
    let (a, b) = (pts[best.0], pts[best.1]);
    let center = std::array::from_fn(|d| (a[d] + b[d]) * T::c(0.5));
    let r2 = pts.iter().map(|p| dist2(p, &center)).fold(T::zero(), T::max);
    Ball { center, r2 }
}

/// Welzl's algorithm with move-to-front, over a deterministic input order.
/// Recursion depth is bounded by the support size `D + 1`.
fn move_to_front<T: Real, const D: usize>(
    pts: &[[T; D]],
    order: &mut [usize],
    end: usize,
    support: &mut Vec<[T; D]>,
) -> Ball<T, D> {
    let mut ball = ball_on_boundary(support);
    if support.len() == D + 1 {
        return ball;
    }
    for i in 0..end {
        let p = pts[order[i]];
        if !ball.contains(&p) {
            support.push(p);
            ball = move_to_front(pts, order, i, support);
            support.pop();
            order[..=i].rotate_right(1);
        }
    }
    ball
}

fn miniball<T: Real, const D: usize>(pts: &[[T; D]]) -> Result<([T; D], T)> {
    if pts.is_empty() {
        return Err(Error::InvalidInput("minimal enclosing ball of an empty point set".into()));
    }
    let mut order: Vec<usize> = (0..pts.len()).collect();
    let mut support = Vec::with_capacity(D + 1);
    let ball = move_to_front(pts, &mut order, pts.len(), &mut support);
    Ok((ball.center, ball.r2.max(T::zero()).sqrt()))
}

/// Smallest circle containing every point.
pub fn min_enclosing_circle<T: Real>(points: &[Vec2<T>]) -> Result<(Vec2<T>, T)> {
    let pts: Vec<[T; 2]> = points.iter().map(|p| p.to_array()).collect();
    let (c, r) = miniball(&pts)?;
    Ok((Vec2::new(c[0], c[1]), r))
}

/// Smallest sphere containing every point.
pub fn min_enclosing_sphere<T: Real>(points: &[Vec3<T>]) -> Result<Sphere<T>> {
    let pts: Vec<[T; 3]> = points.iter().map(|p| p.to_array()).collect();
    let (c, r) = miniball(&pts)?;
    Ok(Sphere { center: Vec3::from_array(c), radius: r })
}

/// Ray bundle from a camera center through an image region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cone<T> {
    pub apex: Vec3<T>,
    pub axis: Vec3<T>,
    /// Circumscribed-circle radius of the region at the image plane, px.
    pub radius: T,
    /// Image position the axis passes through.
    pub center_pixel: Vec2<T>,
    pub camera: Camera<T>,
}

impl<T: Real> Cone<T> {
    pub fn new(camera: &Camera<T>, center_pixel: Vec2<T>, radius: T) -> Result<Self> {
        if !(radius >= T::zero()) {
            return Err(Error::InvalidParameter("cone radius must be non-negative".into()));
        }
        Ok(Self { apex: camera.position, axis: camera.pixel_direction(center_pixel), radius, center_pixel, camera: *camera })
    }
}

/// One ray per region pixel center plus the axis ray, deduplicated; above
/// `cap` the axis is kept and the pixels are stratified-subsampled.
pub fn cone_rays<T: Real>(cone: &Cone<T>, pixels: &[(usize, usize)], cap: usize, seed: u64) -> Result<Vec<Ray<T>>> {
    if pixels.is_empty() {
        return Err(Error::InvalidInput("cone over an empty region".into()));
    }
    let cap = cap.max(1);
    let axis = Ray { origin: cone.apex, direction: cone.axis };
    let tol = T::c(1e-9);
    let centers: Vec<Vec2<T>> = pixels
        .iter()
        .map(|&(x, y)| Vec2::new(T::from_usize_lossy(x) + T::c(0.5), T::from_usize_lossy(y) + T::c(0.5)))
        .filter(|c| (*c - cone.center_pixel).norm() > tol)
        .collect();
    let chosen: Vec<Vec2<T>> = if centers.len() < cap {
        centers
    } else {
        let k = cap - 1;
        let n = centers.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|s| {
                let lo = s * n / k;
                let hi = ((s + 1) * n / k).max(lo + 1);
                centers[rng.random_range(lo..hi)]
            })
            .collect()
    };
    let mut rays = Vec::with_capacity(chosen.len() + 1);
    rays.push(axis);
    rays.extend(chosen.into_iter().map(|c| Ray::through_pixel(&cone.camera, c)));
    Ok(rays)
}
