//! Exponential-family leaves in expectation parameterization.
//!
//! Leaf parameters form a `D x K x R x |T|` tensor of expectation parameters
//! φ = E[T(x)]. Densities are `log h(x) + T(x)·θ(φ) − A(θ(φ))`; EM updates
//! are ratios of accumulated `p·T(x)` and `p`.

use ndarray::{Array3, Array4, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::simplex::project_with_floor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Leaf distribution family shared by all variables of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ExpFamily {
    /// Univariate Gaussian, `T(x) = (x, x²)`.
    Gaussian,
    /// One-hot categorical over `0..num_states`.
    Categorical { num_states: usize },
    /// Binomial with `n_trials` trials, `T(x) = x`.
    Binomial { n_trials: u32 },
}

impl ExpFamily {
    /// Dimension of the sufficient statistic.
    pub fn stat_dim(&self) -> usize {
        match *self {
            ExpFamily::Gaussian => 2,
            ExpFamily::Categorical { num_states } => num_states,
            ExpFamily::Binomial { .. } => 1,
        }
    }

    pub fn is_discrete(&self) -> bool {
        !matches!(self, ExpFamily::Gaussian)
    }

    /// Support values for discrete families; `None` for continuous ones.
    pub fn support(&self) -> Option<Vec<f64>> {
        match *self {
            ExpFamily::Gaussian => None,
            ExpFamily::Categorical { num_states } => Some((0..num_states).map(|s| s as f64).collect()),
            ExpFamily::Binomial { n_trials } => Some((0..=n_trials).map(|s| s as f64).collect()),
        }
    }

    pub fn in_support(&self, x: f64) -> bool {
        match *self {
            ExpFamily::Gaussian => x.is_finite(),
            ExpFamily::Categorical { num_states } => x >= 0.0 && x.fract() == 0.0 && (x as usize) < num_states,
            ExpFamily::Binomial { n_trials } => x >= 0.0 && x.fract() == 0.0 && x <= n_trials as f64,
        }
    }

    pub fn sufficient_stats(&self, x: f64, out: &mut [f64]) {
        match *self {
            ExpFamily::Gaussian => {
                out[0] = x;
                out[1] = x * x;
            }
            ExpFamily::Categorical { .. } => {
                out.fill(0.0);
                out[x as usize] = 1.0;
            }
            ExpFamily::Binomial { .. } => out[0] = x,
        }
    }

    pub fn log_base_measure(&self, x: f64) -> f64 {
        match *self {
            ExpFamily::Gaussian => -0.5 * LN_2PI,
            ExpFamily::Categorical { .. } => 0.0,
            ExpFamily::Binomial { n_trials } => ln_binomial_coefficient(n_trials, x as u32),
        }
    }

    /// θ(φ).
    pub fn natural_params(&self, phi: &[f64]) -> Vec<f64> {
        match *self {
            ExpFamily::Gaussian => {
                let (mean, var) = gaussian_moments(phi);
                vec![mean / var, -0.5 / var]
            }
            ExpFamily::Categorical { .. } => phi.iter().map(|p| p.ln()).collect(),
            ExpFamily::Binomial { n_trials } => {
                let p = phi[0] / n_trials as f64;
                vec![(p / (1.0 - p)).ln()]
            }
        }
    }

    /// φ(θ) = ∇A(θ).
    pub fn expectation_params(&self, theta: &[f64]) -> Vec<f64> {
        match *self {
            ExpFamily::Gaussian => {
                let var = -0.5 / theta[1];
                let mean = theta[0] * var;
                vec![mean, mean * mean + var]
            }
            ExpFamily::Categorical { .. } => {
                let m = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = theta.iter().map(|t| (t - m).exp()).sum();
                theta.iter().map(|t| (t - m).exp() / z).collect()
            }
            ExpFamily::Binomial { n_trials } => {
                vec![n_trials as f64 / (1.0 + (-theta[0]).exp())]
            }
        }
    }

    /// A(θ).
    pub fn log_normalizer(&self, theta: &[f64]) -> f64 {
        match *self {
            ExpFamily::Gaussian => -theta[0] * theta[0] / (4.0 * theta[1]) - 0.5 * (-2.0 * theta[1]).ln(),
            ExpFamily::Categorical { .. } => {
                let m = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + theta.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
            }
            ExpFamily::Binomial { n_trials } => n_trials as f64 * softplus(theta[0]),
        }
    }

    /// `log h(x) + T(x)·θ(φ) − A(θ(φ))`, the textbook exponential-family route.
    pub fn log_prob(&self, phi: &[f64], x: f64) -> f64 {
        let theta = self.natural_params(phi);
        let mut t = vec![0.0; self.stat_dim()];
        self.sufficient_stats(x, &mut t);
        let dot: f64 = match self {
            // Avoid 0 * -inf for zero-probability states that are not observed.
            ExpFamily::Categorical { .. } => theta[x as usize],
            _ => t.iter().zip(&theta).map(|(a, b)| a * b).sum(),
        };
        self.log_base_measure(x) + dot - self.log_normalizer(&theta)
    }

    /// Draws one value from the density with expectation parameters `phi`.
    pub fn sample<R: Rng + ?Sized>(&self, phi: &[f64], rng: &mut R) -> f64 {
        match *self {
            ExpFamily::Gaussian => {
                let (mean, var) = gaussian_moments(phi);
                let z: f64 = rng.sample(StandardNormal);
                mean + var.max(0.0).sqrt() * z
            }
            ExpFamily::Categorical { .. } => {
                let u: f64 = rng.random();
                sample_index(phi, u) as f64
            }
            ExpFamily::Binomial { n_trials } => {
                let p = (phi[0] / n_trials as f64).clamp(0.0, 1.0);
                Binomial::new(n_trials as u64, p)
                    .expect("valid binomial parameters")
                    .sample(rng) as f64
            }
        }
    }
}

/// `(mean, variance)` from Gaussian expectation parameters `(E[x], E[x²])`.
pub fn gaussian_moments(phi: &[f64]) -> (f64, f64) {
    let mean = phi[0];
    (mean, phi[1] - mean * mean)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn ln_binomial_coefficient(n: u32, k: u32) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64 / (i + 1) as f64).ln()).sum()
}

/// Index drawn from unnormalized non-negative `weights` using uniform `u ∈ [0,1)`.
pub fn sample_index(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
            acc += w;
            if target < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Bounds enforced on leaf parameters after every update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafProjection {
    pub var_min: f64,
    pub var_max: f64,
    /// Floor on categorical probabilities and on binomial success probability.
    pub prob_floor: f64,
}

impl Default for LeafProjection {
    fn default() -> Self {
        LeafProjection {
            var_min: 1e-6,
            var_max: f64::INFINITY,
            prob_floor: 1e-12,
        }
    }
}

impl LeafProjection {
    /// Variance clamp used for image models normalized to `[0, 1]`.
    pub fn image() -> Self {
        LeafProjection {
            var_max: 1e-2,
            ..Default::default()
        }
    }

    /// Projects one parameter vector in place. Valid vectors are left bitwise unchanged.
    pub fn project(&self, family: ExpFamily, phi: &mut [f64]) {
        match family {
            ExpFamily::Gaussian => {
                let (mean, var) = gaussian_moments(phi);
                let clamped = var.clamp(self.var_min, self.var_max);
                if clamped != var || !var.is_finite() {
                    phi[1] = mean * mean + clamped;
                }
            }
            ExpFamily::Categorical { .. } => project_with_floor(phi, self.prob_floor),
            ExpFamily::Binomial { n_trials } => {
                let n = n_trials as f64;
                let lo = self.prob_floor.max(f64::MIN_POSITIVE) * n;
                let hi = (1.0 - self.prob_floor.max(f64::EPSILON)) * n;
                if !(phi[0] >= lo && phi[0] <= hi) {
                    phi[0] = phi[0].clamp(lo, hi);
                    if phi[0].is_nan() {
                        phi[0] = 0.5 * n;
                    }
                }
            }
        }
    }

    pub fn project_all(&self, family: ExpFamily, phi: &mut Array4<f64>) {
        for mut lane in phi.lanes_mut(Axis(3)) {
            let slice = lane.as_slice_mut().expect("contiguous stat axis");
            self.project(family, slice);
        }
    }

    pub fn is_valid(&self, family: ExpFamily, phi: &[f64], tol: f64) -> bool {
        match family {
            ExpFamily::Gaussian => {
                let (_, var) = gaussian_moments(phi);
                var >= self.var_min * (1.0 - tol) && var <= self.var_max * (1.0 + tol)
            }
            ExpFamily::Categorical { .. } => {
                (phi.iter().sum::<f64>() - 1.0).abs() <= tol && phi.iter().all(|&p| p >= 0.0)
            }
            ExpFamily::Binomial { n_trials } => phi[0] > 0.0 && phi[0] < n_trials as f64,
        }
    }
}

/// Minimum accumulated responsibility for a leaf component to be re-estimated.
pub const EPS_COUNT: f64 = 1e-12;

/// Unprojected M-step target `Σ p·T / Σ p`; components whose accumulated
/// responsibility is at most [`EPS_COUNT`] keep their current parameters.
pub fn em_target(phi: &Array4<f64>, acc_pt: &Array4<f64>, acc_p: &Array3<f64>) -> Array4<f64> {
    let mut out = phi.clone();
    for ((d, k, r), &p) in acc_p.indexed_iter() {
        if p > EPS_COUNT {
            for t in 0..phi.dim().3 {
                out[[d, k, r, t]] = acc_pt[[d, k, r, t]] / p;
            }
        }
    }
    out
}

/// Full leaf EM update: ratio target followed by projection.
pub fn ef_em_update(
    family: ExpFamily,
    phi: &Array4<f64>,
    acc_pt: &Array4<f64>,
    acc_p: &Array3<f64>,
    projection: &LeafProjection,
) -> Array4<f64> {
    let mut out = em_target(phi, acc_pt, acc_p);
    projection.project_all(family, &mut out);
    out
}

/// Random initial leaf parameters of shape `D x K x R x |T|`.
///
/// Gaussian means are uniform over each variable's observed range (or
/// `[0, 1)` without data) with unit variance; categorical probabilities are
/// Dirichlet(1); binomial success probabilities are uniform on `[0.1, 0.9]`.
pub fn init_leaf_params<R: Rng + ?Sized>(
    family: ExpFamily,
    d_vars: usize,
    k: usize,
    replica: usize,
    ranges: Option<&[(f64, f64)]>,
    projection: &LeafProjection,
    rng: &mut R,
) -> Array4<f64> {
    let t = family.stat_dim();
    let mut phi = Array4::zeros((d_vars, k, replica, t));
    for d in 0..d_vars {
        let (lo, hi) = ranges.map_or((0.0, 1.0), |r| r[d]);
        for kk in 0..k {
            for r in 0..replica {
                let mut lane = phi.slice_mut(ndarray::s![d, kk, r, ..]);
                match family {
                    ExpFamily::Gaussian => {
                        let u: f64 = rng.random();
                        let mean = lo + (hi - lo) * u;
                        lane[0] = mean;
                        lane[1] = mean * mean + 1.0;
                    }
                    ExpFamily::Categorical { .. } => {
                        let mut total = 0.0;
                        for s in 0..t {
                            let u: f64 = rng.random();
                            let e = -(1.0 - u).ln();
                            lane[s] = e;
                            total += e;
                        }
                        lane.mapv_inplace(|v| v / total);
                    }
                    ExpFamily::Binomial { n_trials } => {
                        let u: f64 = rng.random();
                        lane[0] = (0.1 + 0.8 * u) * n_trials as f64;
                    }
                }
                projection.project(family, lane.as_slice_mut().unwrap());
            }
        }
    }
    phi
}

/// Per-component constants for fast repeated leaf evaluation.
///
/// Gaussian rows hold `(mean, 1/(2σ²), −½log(2πσ²))`, categorical rows the
/// log-probabilities, binomial rows `(log p, log(1−p))`. Components are laid
/// out as `D x R x K` so all K entries of one `(d, r)` are contiguous.
#[derive(Clone, Debug)]
pub struct LeafTable {
    family: ExpFamily,
    stride: usize,
    k: usize,
    replica: usize,
    values: Vec<f64>,
}

impl LeafTable {
    pub fn new(family: ExpFamily, phi: &Array4<f64>) -> Self {
        let (d_vars, k, replica, _) = phi.dim();
        let stride = match family {
            ExpFamily::Gaussian => 3,
            ExpFamily::Categorical { num_states } => num_states,
            ExpFamily::Binomial { .. } => 2,
        };
        let mut values = Vec::with_capacity(d_vars * k * replica * stride);
        for d in 0..d_vars {
            for r in 0..replica {
                for kk in 0..k {
                    push_constants(family, phi.slice(ndarray::s![d, kk, r, ..]), &mut values);
                }
            }
        }
        LeafTable {
            family,
            stride,
            k,
            replica,
            values,
        }
    }

    fn block(&self, d: usize, r: usize) -> &[f64] {
        let width = self.k * self.stride;
        let base = (d * self.replica + r) * width;
        &self.values[base..base + width]
    }

    /// Log-density of component `(d, k, r)` at `x`. `x` must be in the support.
    #[inline]
    pub fn log_prob(&self, d: usize, k: usize, r: usize, x: f64) -> f64 {
        let mut out = vec![0.0; self.k];
        self.add_log_probs(d, r, x, &mut out);
        out[k]
    }

    /// Adds `log p_{d,k,r}(x)` to `out[k]` for every `k`.
    #[inline]
    pub fn add_log_probs(&self, d: usize, r: usize, x: f64, out: &mut [f64]) {
        let block = self.block(d, r);
        match self.family {
            ExpFamily::Gaussian => {
                for (o, c) in out.iter_mut().zip(block.chunks_exact(3)) {
                    let z = x - c[0];
                    *o += c[2] - z * z * c[1];
                }
            }
            ExpFamily::Categorical { .. } => {
                let s = x as usize;
                for (o, c) in out.iter_mut().zip(block.chunks_exact(self.stride)) {
                    *o += c[s];
                }
            }
            ExpFamily::Binomial { n_trials } => {
                let n = n_trials as f64;
                let coef = ln_binomial_coefficient(n_trials, x as u32);
                for (o, c) in out.iter_mut().zip(block.chunks_exact(2)) {
                    *o += coef + x * c[0] + (n - x) * c[1];
                }
            }
        }
    }
}

fn push_constants(family: ExpFamily, phi: ArrayView1<f64>, out: &mut Vec<f64>) {
    match family {
        ExpFamily::Gaussian => {
            let (mean, var) = gaussian_moments(&[phi[0], phi[1]]);
            out.extend([mean, 0.5 / var, -0.5 * (LN_2PI + var.ln())]);
        }
        ExpFamily::Categorical { .. } => out.extend(phi.iter().map(|p| p.ln())),
        ExpFamily::Binomial { n_trials } => {
            let p = phi[0] / n_trials as f64;
            out.extend([p.ln(), (1.0 - p).ln()]);
        }
    }
}
