//! Per-group Adam over the packed Gaussian parameters.
//!
//! Scale is optimized in log space and opacity through a logit, so positivity
//! and the [0,1] range hold by construction; quaternions are renormalized
//! after every step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Quat, Vec3};
use crate::real::Real;
use crate::render::GradientBundle;
use crate::scene::{RowMap, Scene};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;
/// Opacities are kept this far from 0 and 1 before taking the logit.
pub const OPACITY_EPS: f64 = 1e-6;

/// Packed per-point parameter layout.
pub const PARAMS_PER_POINT: usize = 14;
const MEAN: usize = 0;
const LOG_SCALE: usize = 3;
const ROT: usize = 6;
const OPACITY: usize = 10;
const COLOR: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates<T> {
    pub mean: T,
    /// The mean rate decays exponentially to `mean * mean_final_factor`.
    pub mean_final_factor: T,
    pub color: T,
    pub opacity: T,
    pub log_scale: T,
    pub rotation: T,
}

impl<T: Real> Default for LearningRates<T> {
    fn default() -> Self {
        Self {
            mean: T::c(1.6e-3),
            mean_final_factor: T::c(0.01),
            color: T::c(2.5e-3),
            opacity: T::c(5e-2),
            log_scale: T::c(5e-3),
            rotation: T::c(1e-3),
        }
    }
}

type Row<T> = [T; PARAMS_PER_POINT];

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub first: Vec<Row<T>>,
    pub second: Vec<Row<T>>,
    pub step: u64,
    pub rates: LearningRates<T>,
    /// Steps over which the mean rate decays.
    pub decay_steps: u64,
    pub generation: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(scene: &Scene<T>, rates: LearningRates<T>, decay_steps: u64) -> Self {
        let n = scene.len();
        Self {
            first: vec![[T::zero(); PARAMS_PER_POINT]; n],
            second: vec![[T::zero(); PARAMS_PER_POINT]; n],
            step: 0,
            rates,
            decay_steps: decay_steps.max(1),
            generation: scene.generation,
        }
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    /// Follow a scene edit: carried rows keep their moments, new rows start at zero.
    pub fn apply_rows(&mut self, rows: &RowMap, generation: u64) {
        let zero = [T::zero(); PARAMS_PER_POINT];
        self.first = rows.remap(&self.first, zero);
        self.second = rows.remap(&self.second, zero);
        self.generation = generation;
    }

    pub fn reset_opacity_moments(&mut self, rows: &[usize]) {
        for &i in rows {
            self.first[i][OPACITY] = T::zero();
            self.second[i][OPACITY] = T::zero();
        }
    }

    pub fn mean_rate(&self) -> T {
        let progress = T::from_u64(self.step.min(self.decay_steps)).unwrap() / T::from_u64(self.decay_steps).unwrap();
        self.rates.mean * self.rates.mean_final_factor.powf(progress)
    }
}

pub fn opacity_logit<T: Real>(opacity: T) -> T {
    let eps = T::c(OPACITY_EPS);
    let p = opacity.max(eps).min(T::one() - eps);
    (p / (T::one() - p)).ln()
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// One Adam update of every point in place.
pub fn adam_step<T: Real>(scene: &mut Scene<T>, grads: &GradientBundle<T>, state: &mut OptimizerState<T>) -> Result<()> {
    let n = scene.len();
    if state.len() != n || state.generation != scene.generation {
        return Err(Error::Consistency(format!(
            "optimizer state ({} rows, generation {}) does not match scene ({} points, generation {})",
            state.len(),
            state.generation,
            n,
            scene.generation
        )));
    }
    if grads.len() != n || grads.generation != scene.generation {
        return Err(Error::Consistency("gradient bundle from another scene generation".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::c(BETA1), T::c(BETA2));
    let bias1 = T::one() - b1.powi(t);
    let bias2 = T::one() - b2.powi(t);
    let eps = T::c(ADAM_EPS);
    let rates = state.rates;
    let mut lr = [T::zero(); PARAMS_PER_POINT];
    lr[MEAN..MEAN + 3].fill(state.mean_rate());
    lr[LOG_SCALE..LOG_SCALE + 3].fill(rates.log_scale);
    lr[ROT..ROT + 4].fill(rates.rotation);
    lr[OPACITY] = rates.opacity;
    lr[COLOR..COLOR + 3].fill(rates.color);

    for i in 0..n {
        let g = &mut scene.points[i];
        let p = g.opacity.max(T::c(OPACITY_EPS)).min(T::one() - T::c(OPACITY_EPS));
        let mut grad = [T::zero(); PARAMS_PER_POINT];
        grad[MEAN..MEAN + 3].copy_from_slice(&grads.mean[i].to_array());
        grad[LOG_SCALE..LOG_SCALE + 3].copy_from_slice(&grads.log_scale[i].to_array());
        grad[ROT..ROT + 4].copy_from_slice(&grads.rotation[i]);
        grad[OPACITY] = grads.opacity[i] * p * (T::one() - p);
        grad[COLOR..COLOR + 3].copy_from_slice(&grads.color[i]);

        let m = &mut state.first[i];
        let v = &mut state.second[i];
        let mut step = [T::zero(); PARAMS_PER_POINT];
        for k in 0..PARAMS_PER_POINT {
            m[k] = b1 * m[k] + (T::one() - b1) * grad[k];
            v[k] = b2 * v[k] + (T::one() - b2) * grad[k] * grad[k];
            let mh = m[k] / bias1;
            let vh = v[k] / bias2;
            step[k] = lr[k] * mh / (vh.sqrt() + eps);
        }
        let moved = |r: std::ops::Range<usize>| step[r].iter().any(|s| *s != T::zero());

        if moved(MEAN..MEAN + 3) {
            g.mean -= Vec3::new(step[MEAN], step[MEAN + 1], step[MEAN + 2]);
        }
        if moved(LOG_SCALE..LOG_SCALE + 3) {
            for a in 0..3 {
                g.scale[a] = (g.scale[a].ln() - step[LOG_SCALE + a]).exp();
            }
        }
        if moved(ROT..ROT + 4) {
            let q = g.rotation.to_array();
            let q = Quat::from_array(std::array::from_fn(|k| q[k] - step[ROT + k]));
            if q.norm() > T::c(1e-12) {
                g.rotation = q.normalize();
            }
        }
        if moved(OPACITY..OPACITY + 1) {
            g.opacity = sigmoid(opacity_logit(g.opacity) - step[OPACITY]);
        }
        if moved(COLOR..COLOR + 3) {
            for ch in 0..3 {
                g.color[ch] = (g.color[ch] - step[COLOR + ch]).max(T::zero()).min(T::one());
            }
        }
    }
    Ok(())
}
