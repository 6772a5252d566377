//! Analytic gradients of an image-space loss with respect to every Gaussian
//! parameter.

use super::{pixel_center, projection_terms, rasterize};
use crate::linalg::{rotation_partials, Mat2, Mat3, Vec2, Vec3};
use crate::optimize::loss::{loss_and_grad, LossSpec};
use crate::real::Real;
use crate::scene::{Camera, ImageBuffer, Scene};

/// Per-point loss gradients for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle<T> {
    pub mean: Vec<Vec3<T>>,
    pub opacity: Vec<T>,
    pub color: Vec<[T; 3]>,
    pub log_scale: Vec<Vec3<T>>,
    /// Gradient w.r.t. the raw quaternion, projected on the tangent of the unit sphere.
    pub rotation: Vec<[T; 4]>,
    /// `|∂L/∂mean2|`, the per-view screen-space positional gradient magnitude.
    pub screen: Vec<T>,
    /// 3σ footprint radius in this view, px (0 when culled).
    pub radii: Vec<T>,
    pub contributions: Vec<u32>,
    /// Scene generation the bundle was computed for.
    pub generation: u64,
    pub loss: T,
}

impl<T: Real> GradientBundle<T> {
    pub fn zeros(n: usize, generation: u64) -> Self {
        Self {
            mean: vec![Vec3::zero(); n],
            opacity: vec![T::zero(); n],
            color: vec![[T::zero(); 3]; n],
            log_scale: vec![Vec3::zero(); n],
            rotation: vec![[T::zero(); 4]; n],
            screen: vec![T::zero(); n],
            radii: vec![T::zero(); n],
            contributions: vec![0; n],
            generation,
            loss: T::zero(),
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.opacity.iter().all(|v| v.is_finite())
            && self.color.iter().flatten().all(|v| v.is_finite())
            && self.rotation.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy)]
struct SplatAccum<T> {
    d_opacity: T,
    d_color: [T; 3],
    d_mean2: Vec2<T>,
    /// Full-matrix gradient w.r.t. the conic.
    d_conic: Mat2<T>,
}

/// Render, evaluate the loss against `gt`, and backpropagate it.
pub fn backward<T: Real>(
    scene: &Scene<T>,
    camera: &Camera<T>,
    background: [T; 3],
    gt: &ImageBuffer<T>,
    spec: &LossSpec<T>,
) -> crate::Result<GradientBundle<T>> {
    let out = super::render_with_background(scene, camera, background);
    let (loss, grad) = loss_and_grad(&out.color, gt, spec)?;
    let mut bundle = backward_image(scene, camera, background, &grad);
    bundle.loss = loss;
    Ok(bundle)
}

/// Backpropagate a given per-pixel color gradient `∂L/∂C`.
pub fn backward_image<T: Real>(
    scene: &Scene<T>,
    camera: &Camera<T>,
    background: [T; 3],
    d_pixels: &[[T; 3]],
) -> GradientBundle<T> {
    let raster = rasterize(scene, camera);
    assert_eq!(d_pixels.len(), raster.width * raster.height, "pixel gradient size mismatch");
    let zero = SplatAccum { d_opacity: T::zero(), d_color: [T::zero(); 3], d_mean2: Vec2::zero(), d_conic: Mat2::zero() };
    let mut acc = vec![zero; raster.splats.len()];
    let mut contributions = vec![0u32; scene.len()];
    let mut trans_before: Vec<T> = Vec::new();
    let half = T::c(0.5);

    for (pix, frags) in raster.fragments.iter().enumerate() {
        if frags.is_empty() {
            continue;
        }
        let g = d_pixels[pix];
        trans_before.clear();
        let mut t = T::one();
        for f in frags {
            trans_before.push(t);
            t *= T::one() - f.alpha;
        }
        let center = pixel_center::<T>(pix % raster.width, pix / raster.width);
        // Color of everything behind the current fragment, normalized by its transmittance.
        let mut behind = background;
        for (k, f) in frags.iter().enumerate().rev() {
            let s = &raster.splats[f.splat as usize];
            contributions[s.source] += 1;
            let color = scene.points[s.source].color;
            let tk = trans_before[k];
            let w = f.alpha * tk;
            let a = &mut acc[f.splat as usize];
            let mut d_alpha = T::zero();
            for ch in 0..3 {
                a.d_color[ch] += g[ch] * w;
                d_alpha += g[ch] * (color[ch] - behind[ch]);
                behind[ch] = f.alpha * color[ch] + (T::one() - f.alpha) * behind[ch];
            }
            d_alpha *= tk;
            if f.capped {
                continue;
            }
            let opacity = scene.points[s.source].opacity;
            a.d_opacity += d_alpha * f.falloff;
            let d_m2 = -half * d_alpha * opacity * f.falloff;
            let d = center - s.mean2;
            let ad = s.conic.mul_vec(d);
            // m² = dᵀ A d with d = pixel - mean2.
            a.d_mean2 += ad * (-(d_m2 + d_m2));
            a.d_conic.0[0][0] += d_m2 * d.x * d.x;
            a.d_conic.0[0][1] += d_m2 * d.x * d.y;
            a.d_conic.0[1][0] += d_m2 * d.y * d.x;
            a.d_conic.0[1][1] += d_m2 * d.y * d.y;
        }
    }

    let mut bundle = GradientBundle::zeros(scene.len(), scene.generation);
    bundle.contributions = contributions;
    for (rank, s) in raster.splats.iter().enumerate() {
        let a = acc[rank];
        let i = s.source;
        let gauss = &scene.points[i];
        bundle.opacity[i] = a.d_opacity;
        bundle.color[i] = a.d_color;
        bundle.screen[i] = a.d_mean2.norm();
        bundle.radii[i] = s.radius;

        let terms = projection_terms(camera, gauss).expect("rasterized splat projects");
        // ∂L/∂cov2 = -A (∂L/∂A) A
        let d_cov2 = (s.conic * a.d_conic * s.conic).scaled(-T::one());
        let jac = terms.jac;
        let sym = d_cov2 + d_cov2.transpose();

        // ∂L/∂Σc = Jᵀ G J
        let mut d_cov_cam = Mat3::zero();
        for p in 0..3 {
            for q in 0..3 {
                let mut v = T::zero();
                for r in 0..2 {
                    for c in 0..2 {
                        v += jac[r][p] * d_cov2.0[r][c] * jac[c][q];
                    }
                }
                d_cov_cam.0[p][q] = v;
            }
        }
        // ∂L/∂J = (G + Gᵀ) J Σc
        let mut d_jac = [[T::zero(); 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                let mut v = T::zero();
                for k in 0..2 {
                    for m in 0..3 {
                        v += sym.0[r][k] * jac[k][m] * terms.cov_cam.0[m][c];
                    }
                }
                d_jac[r][c] = v;
            }
        }

        let p = terms.cam_point;
        let (fx, fy) = (camera.focal.x, camera.focal.y);
        let iz = T::one() / p.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let two = T::c(2.0);
        let dm2 = a.d_mean2;
        let d_cam = Vec3::new(
            dm2.x * fx * iz + d_jac[0][2] * (-fx * iz2),
            dm2.y * fy * iz + d_jac[1][2] * (-fy * iz2),
            -dm2.x * fx * p.x * iz2 - dm2.y * fy * p.y * iz2
                + d_jac[0][0] * (-fx * iz2)
                + d_jac[0][2] * (two * fx * p.x * iz3)
                + d_jac[1][1] * (-fy * iz2)
                + d_jac[1][2] * (two * fy * p.y * iz3),
        );
        bundle.mean[i] = terms.cam_rot.mul_vec(d_cam);

        // Σ = M Mᵀ with M = R S, and Σc = W Σ Wᵀ.
        let d_cov = terms.cam_rot * d_cov_cam * terms.cam_rot.transpose();
        let rot = gauss.rotation.to_rotation();
        let m = rot * Mat3::from_diagonal(gauss.scale);
        let d_m = (d_cov + d_cov.transpose()) * m;
        let mut d_rot = Mat3::zero();
        let mut d_scale = Vec3::zero();
        for r in 0..3 {
            for c in 0..3 {
                d_rot.0[r][c] = d_m.0[r][c] * gauss.scale[c];
                d_scale[c] += d_m.0[r][c] * rot.0[r][c];
            }
        }
        bundle.log_scale[i] = d_scale.component_mul(gauss.scale);

        let qn = gauss.rotation.norm();
        let qu = gauss.rotation.normalize();
        let parts = rotation_partials(qu);
        let dq: [T; 4] = std::array::from_fn(|k| parts[k].frobenius_dot(&d_rot));
        let qa = qu.to_array();
        let radial = (0..4).map(|k| dq[k] * qa[k]).sum::<T>();
        bundle.rotation[i] = std::array::from_fn(|k| (dq[k] - radial * qa[k]) / qn);
    }
    bundle
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Quat;
    use crate::render::render;
    use crate::scene::Gaussian3D;

    fn camera() -> Camera<f64> {
        Camera::look_at(Vec3::new(0.3, -0.2, -4.0), Vec3::zero(), Vec3::new(0.0, 1.0, 0.0), 18.0, 16, 16).unwrap()
    }

    fn scene() -> Scene<f64> {
        Scene::new(vec![
            Gaussian3D::new(
                Vec3::new(0.1, 0.2, 0.0),
                Quat::new(0.9, 0.2, -0.3, 0.1).normalize(),
                Vec3::new(0.3, 0.15, 0.2),
                0.7,
                [0.8, 0.3, 0.2],
            )
            .unwrap(),
            Gaussian3D::new(
                Vec3::new(-0.3, -0.1, 0.4),
                Quat::new(0.5, -0.4, 0.6, 0.2).normalize(),
                Vec3::new(0.25, 0.35, 0.1),
                0.6,
                [0.1, 0.7, 0.5],
            )
            .unwrap(),
        ])
    }

    #[test]
    fn perfect_fit_has_zero_gradients() {
        let s = scene();
        let cam = camera();
        let gt = render(&s, &cam).color;
        let b = backward(&s, &cam, [0.0; 3], &gt, &LossSpec::default()).unwrap();
        assert!(b.loss.abs() < 1e-12);
        for i in 0..s.len() {
            assert!(b.mean[i].norm() < 1e-9, "{:?}", b.mean[i]);
            assert!(b.opacity[i].abs() < 1e-9);
            assert!(b.screen[i] < 1e-9);
        }
    }

    #[test]
    fn non_contributing_point_has_zero_gradient() {
        let mut s = scene();
        s.points.push(Gaussian3D::isotropic(Vec3::new(0.0, 0.0, -6.0), 0.2, 0.9, [1.0; 3]).unwrap());
        let cam = camera();
        let gt = ImageBuffer::filled(16, 16, [0.5; 3]);
        let b = backward(&s, &cam, [0.0; 3], &gt, &LossSpec::default()).unwrap();
        assert_eq!(b.contributions[2], 0);
        assert_eq!(b.mean[2], Vec3::zero());
        assert_eq!(b.opacity[2], 0.0);
        assert_eq!(b.rotation[2], [0.0; 4]);
        assert!(b.is_finite());
    }

    #[test]
    fn gradient_is_additive_over_tiles() {
        let s = scene();
        let cam = camera();
        let mut d = vec![[0.0; 3]; 256];
        for (i, p) in d.iter_mut().enumerate() {
            *p = [((i * 7) % 11) as f64 / 11.0 - 0.5, ((i * 3) % 5) as f64 / 5.0 - 0.4, 0.1];
        }
        let whole = backward_image(&s, &cam, [0.0; 3], &d);
        let mut sum = GradientBundle::zeros(s.len(), 0);
        for tile in 0..4 {
            let part: Vec<[f64; 3]> = d
                .iter()
                .enumerate()
                .map(|(i, v)| if ((i % 16) / 8) + 2 * ((i / 16) / 8) == tile { *v } else { [0.0; 3] })
                .collect();
            let b = backward_image(&s, &cam, [0.0; 3], &part);
            for i in 0..s.len() {
                sum.mean[i] += b.mean[i];
                sum.opacity[i] += b.opacity[i];
                sum.log_scale[i] += b.log_scale[i];
            }
        }
        for i in 0..s.len() {
            assert!((sum.mean[i] - whole.mean[i]).norm() < 1e-12);
            assert!((sum.opacity[i] - whole.opacity[i]).abs() < 1e-12);
            assert!((sum.log_scale[i] - whole.log_scale[i]).norm() < 1e-12);
        }
    }
}
