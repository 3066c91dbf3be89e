//! EM training: full-batch, stochastic (online) and mixtures of networks.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compiler::Layer;
use crate::engine::{self, BackwardStats, ForwardPass, DEFAULT_CHUNK};
use crate::error::{EngineError, TrainError};
use crate::expfam::{em_target, sample_index, LeafProjection};
use crate::model::{project_layer, EinsumNetwork, LayerWeights, DEFAULT_EPS_W};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmMode {
    Full,
    Stochastic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub mode: EmMode,
    /// Step size of stochastic EM.
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub leaf_projection: LeafProjection,
    pub eps_w: f64,
    /// Samples per forward/backward pass when accumulating statistics.
    pub chunk: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            mode: EmMode::Stochastic,
            lambda: 0.5,
            batch_size: 500,
            epochs: 25,
            seed: 0,
            leaf_projection: LeafProjection::default(),
            eps_w: DEFAULT_EPS_W,
            chunk: DEFAULT_CHUNK,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TrainError::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if self.chunk == 0 {
            return Err(TrainError::Config("chunk size must be at least 1".into()));
        }
        if self.eps_w.is_nan() || self.eps_w <= 0.0 {
            return Err(TrainError::Config("weight floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_ll: f64,
    pub valid_ll: Option<f64>,
    pub wall_seconds: f64,
}

/// Unprojected M-step targets computed from accumulated statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub layers: Vec<LayerWeights>,
    pub leaves: ndarray::Array4<f64>,
}

/// Normalizes every accumulated count row; all-zero rows keep the current weights.
pub fn m_step_targets(net: &EinsumNetwork, stats: &BackwardStats) -> Targets {
    let layers = net
        .circuit
        .layers
        .iter()
        .zip(&net.params.layers)
        .zip(&stats.layers)
        .map(|((layer, w), n)| match (layer, w, n) {
            (Layer::Einsum(_), LayerWeights::Einsum(w), LayerWeights::Einsum(n)) => {
                let mut t = w.clone();
                let (l, k_out, k, _) = w.dim();
                let n = n.view().into_shape_with_order((l * k_out, k * k)).unwrap();
                let mut tf = t.view_mut().into_shape_with_order((l * k_out, k * k)).unwrap();
                for (mut row, counts) in tf.outer_iter_mut().zip(n.outer_iter()) {
                    let total = counts.sum();
                    if total > 0.0 {
                        Zip::from(&mut row).and(&counts).for_each(|t, &c| *t = c / total);
                    }
                }
                LayerWeights::Einsum(t)
            }
            (Layer::Mixing(_), LayerWeights::Mixing(w), LayerWeights::Mixing(n)) => {
                let mut t = w.clone();
                for (mut row, counts) in t.outer_iter_mut().zip(n.outer_iter()) {
                    let total = counts.sum();
                    if total > 0.0 {
                        Zip::from(&mut row).and(&counts).for_each(|t, &c| *t = c / total);
                    }
                }
                LayerWeights::Mixing(t)
            }
            _ => unreachable!("statistics mirror the weights"),
        })
        .collect();
    Targets {
        layers,
        leaves: em_target(&net.params.leaves, &stats.acc_pt, &stats.acc_p),
    }
}

/// `θ ← (1−λ)θ + λ·target`, then projection of every parameter.
pub fn apply_targets(net: &mut EinsumNetwork, targets: &Targets, lambda: f64, cfg: &TrainerConfig) {
    let keep = 1.0 - lambda;
    for ((layer, w), t) in net
        .circuit
        .layers
        .iter()
        .zip(net.params.layers.iter_mut())
        .zip(&targets.layers)
    {
        match (&mut *w, t) {
            (LayerWeights::Einsum(w), LayerWeights::Einsum(t)) => {
                Zip::from(w).and(t).for_each(|w, &t| *w = keep * *w + lambda * t)
            }
            (LayerWeights::Mixing(w), LayerWeights::Mixing(t)) => {
                Zip::from(w).and(t).for_each(|w, &t| *w = keep * *w + lambda * t)
            }
            _ => unreachable!("targets mirror the weights"),
        }
        project_layer(layer, w, cfg.eps_w);
    }
    Zip::from(&mut net.params.leaves)
        .and(&targets.leaves)
        .for_each(|p, &t| *p = keep * *p + lambda * t);
    cfg.leaf_projection.project_all(net.family, &mut net.params.leaves);
}

/// One EM update from the statistics of `x` with step size `lambda`.
/// Returns the mean log-likelihood of `x` before the update.
fn em_update(net: &mut EinsumNetwork, x: ArrayView2<f64>, lambda: f64, cfg: &TrainerConfig) -> Result<f64, TrainError> {
    if x.nrows() == 0 {
        return Err(TrainError::EmptyData);
    }
    let stats = engine::accumulate_stats(net, x, cfg.chunk)?;
    let targets = m_step_targets(net, &stats);
    apply_targets(net, &targets, lambda, cfg);
    Ok(stats.mean_log_likelihood())
}

/// Full-batch EM step; returns the pre-update mean train log-likelihood.
pub fn em_full_step(net: &mut EinsumNetwork, x: ArrayView2<f64>, cfg: &TrainerConfig) -> Result<f64, TrainError> {
    em_update(net, x, 1.0, cfg)
}

/// Stochastic EM step on one minibatch; returns its pre-update mean log-likelihood.
pub fn em_stochastic_step(
    net: &mut EinsumNetwork,
    batch: ArrayView2<f64>,
    lambda: f64,
    cfg: &TrainerConfig,
) -> Result<f64, TrainError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TrainError::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    em_update(net, batch, lambda, cfg)
}

pub fn mean_log_likelihood(net: &EinsumNetwork, x: ArrayView2<f64>, chunk: usize) -> Result<f64, EngineError> {
    let ll = engine::log_likelihood(net, x, &vec![false; net.d_vars()], chunk)?;
    Ok(ll.sum() / ll.len() as f64)
}

/// Trains for `cfg.epochs` epochs; see [`train_with`].
pub fn train(
    net: &mut EinsumNetwork,
    train: ArrayView2<f64>,
    valid: Option<ArrayView2<f64>>,
    cfg: &TrainerConfig,
) -> Result<Vec<EpochMetrics>, TrainError> {
    train_with(net, train, valid, cfg, |_| {})
}

/// Epoch loop. Stochastic mode visits seeded shuffled minibatches; full mode
/// takes one full-batch step per epoch. Metrics hold the log-likelihood of
/// the parameters at the end of each epoch.
pub fn train_with(
    net: &mut EinsumNetwork,
    train: ArrayView2<f64>,
    valid: Option<ArrayView2<f64>>,
    cfg: &TrainerConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>, TrainError> {
    cfg.validate()?;
    let n = train.nrows();
    if n == 0 {
        return Err(TrainError::EmptyData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        match cfg.mode {
            EmMode::Full => {
                em_full_step(net, train, cfg)?;
                check_finite(net, epoch, 1)?;
            }
            EmMode::Stochastic => {
                order.shuffle(&mut rng);
                for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
                    let batch = train.select(Axis(0), idx);
                    em_stochastic_step(net, batch.view(), cfg.lambda, cfg)?;
                    check_finite(net, epoch, b + 1)?;
                }
            }
        }
        let train_ll = mean_log_likelihood(net, train, cfg.chunk)?;
        let valid_ll = match valid {
            Some(v) if v.nrows() > 0 => Some(mean_log_likelihood(net, v, cfg.chunk)?),
            _ => None,
        };
        let m = EpochMetrics {
            epoch,
            train_ll,
            valid_ll,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(metrics)
}

fn check_finite(net: &EinsumNetwork, epoch: usize, batch: usize) -> Result<(), TrainError> {
    match net.params.all_finite() {
        Some(location) => Err(TrainError::NonFinite { location, epoch, batch }),
        None => Ok(()),
    }
}

/// Lloyd's k-means. Starts from `k` distinct random points; empty clusters are
/// reseeded to the point farthest from its centroid.
pub fn kmeans(
    x: ArrayView2<f64>,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<(Vec<usize>, Array2<f64>), TrainError> {
    let n = x.nrows();
    if k == 0 {
        return Err(TrainError::Config("number of clusters must be at least 1".into()));
    }
    if k > n {
        return Err(TrainError::Config(format!("{k} clusters for {n} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = rand::seq::index::sample(&mut rng, n, k);
    let mut centroids = x.select(Axis(0), &init.into_vec());
    let mut assign = vec![usize::MAX; n];
    let dist = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum()
    };
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, row) in x.outer_iter().enumerate() {
            let best = (0..k)
                .map(|c| (c, dist(row, centroids.row(c))))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        for (i, row) in x.outer_iter().enumerate() {
            counts[assign[i]] += 1;
            let mut s = sums.row_mut(assign[i]);
            s += &row;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centroids.row_mut(c).assign(&mean);
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[assign[i]] > 1)
                .max_by(|&a, &b| {
                    dist(x.row(a), centroids.row(assign[a])).total_cmp(&dist(x.row(b), centroids.row(assign[b])))
                })
                .expect("k ≤ n leaves a cluster with two points");
            counts[assign[far]] -= 1;
            assign[far] = c;
            counts[c] = 1;
            centroids.row_mut(c).assign(&x.row(far));
            changed = true;
        }
        if !changed {
            break;
        }
    }
    Ok((assign, centroids))
}

/// Weighted mixture of networks over the same variables.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureModel {
    pub components: Vec<EinsumNetwork>,
    pub weights: Vec<f64>,
}

impl MixtureModel {
    pub fn single(net: EinsumNetwork) -> Self {
        MixtureModel {
            components: vec![net],
            weights: vec![1.0],
        }
    }

    pub fn d_vars(&self) -> usize {
        self.components[0].d_vars()
    }

    fn passes(&self, x: ArrayView2<f64>, marg: &[bool]) -> Result<Vec<ForwardPass>, EngineError> {
        self.components.iter().map(|c| engine::forward(c, x, marg)).collect()
    }

    /// `log Σ_c π_c p_c(x)` per row, with masked variables integrated out.
    pub fn log_likelihood(&self, x: ArrayView2<f64>, marg: &[bool]) -> Result<Array1<f64>, EngineError> {
        if self.components.len() == 1 {
            return engine::log_likelihood(&self.components[0], x, marg, DEFAULT_CHUNK);
        }
        let mut out = Vec::with_capacity(x.nrows());
        for part in x.axis_chunks_iter(Axis(0), DEFAULT_CHUNK) {
            let passes = self.passes(part, marg)?;
            for b in 0..part.nrows() {
                let terms: Vec<f64> = passes
                    .iter()
                    .zip(&self.weights)
                    .map(|(p, w)| w.ln() + p.log_likelihood[b])
                    .collect();
                out.push(engine::log_sum_exp(&terms));
            }
        }
        Ok(Array1::from(out))
    }

    /// `n` samples; sample `i` uses RNG stream `i` for both the component and
    /// the descent.
    pub fn sample(&self, n: usize, seed: u64) -> Array2<f64> {
        if self.components.len() == 1 {
            return engine::sample(&self.components[0], n, seed);
        }
        let evidence = vec![false; self.d_vars()];
        let mut out = Array2::zeros((n, self.d_vars()));
        for (i, row) in out.outer_iter_mut().enumerate() {
            let mut rng = engine::sample_rng(seed, i);
            let c = sample_index(&self.weights, rng.random());
            engine::descend(&self.components[c], None, &evidence, row, &mut rng);
        }
        out
    }

    /// One conditional sample per row of `x`; the component is drawn from its
    /// posterior given the evidence.
    pub fn conditional_sample_batch(
        &self,
        x: ArrayView2<f64>,
        evidence: &[bool],
        seed: u64,
    ) -> Result<Array2<f64>, EngineError> {
        if self.components.len() == 1 {
            return engine::conditional_sample_batch(&self.components[0], x, evidence, seed);
        }
        if evidence.len() != self.d_vars() {
            return Err(EngineError::Shape(format!(
                "evidence mask has {} entries, model has {} variables",
                evidence.len(),
                self.d_vars()
            )));
        }
        let marg: Vec<bool> = evidence.iter().map(|&e| !e).collect();
        let mut out = x.to_owned();
        for (ci, part) in x.axis_chunks_iter(Axis(0), DEFAULT_CHUNK).enumerate() {
            let passes = self.passes(part, &marg)?;
            for b in 0..part.nrows() {
                let i = ci * DEFAULT_CHUNK + b;
                let logs: Vec<f64> = passes
                    .iter()
                    .zip(&self.weights)
                    .map(|(p, w)| w.ln() + p.log_likelihood[b])
                    .collect();
                let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if top == f64::NEG_INFINITY {
                    return Err(EngineError::ImpossibleEvidence);
                }
                let post: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
                let mut rng = engine::sample_rng(seed, i);
                let c = sample_index(&post, rng.random());
                engine::descend(
                    &self.components[c],
                    Some((&passes[c], b)),
                    evidence,
                    out.row_mut(i),
                    &mut rng,
                );
            }
        }
        Ok(out)
    }
}

/// Result of [`train_mixture`].
#[derive(Clone, Debug)]
pub struct MixtureFit {
    pub model: MixtureModel,
    pub assignments: Vec<usize>,
    /// Per-component epoch metrics on that component's cluster.
    pub metrics: Vec<Vec<EpochMetrics>>,
}

/// Clusters `x` with k-means, trains one network per cluster and mixes them
/// with the cluster proportions. `init(cluster_data, seed)` builds each
/// untrained component.
pub fn train_mixture(
    x: ArrayView2<f64>,
    n_clusters: usize,
    cfg: &TrainerConfig,
    mut init: impl FnMut(ArrayView2<f64>, u64) -> Result<EinsumNetwork, TrainError>,
) -> Result<MixtureFit, TrainError> {
    if n_clusters < 1 {
        return Err(TrainError::Config("number of clusters must be at least 1".into()));
    }
    if x.nrows() == 0 {
        return Err(TrainError::EmptyData);
    }
    let (assignments, _) = kmeans(x, n_clusters, cfg.seed, 50)?;
    let n = x.nrows() as f64;
    let mut components = Vec::with_capacity(n_clusters);
    let mut weights = Vec::with_capacity(n_clusters);
    let mut metrics = Vec::with_capacity(n_clusters);
    for c in 0..n_clusters {
        let idx: Vec<usize> = (0..x.nrows()).filter(|&i| assignments[i] == c).collect();
        let data = x.select(Axis(0), &idx);
        let seed = cfg.seed.wrapping_add(c as u64);
        let mut net = init(data.view(), seed)?;
        let component_cfg = TrainerConfig { seed, ..cfg.clone() };
        metrics.push(train(&mut net, data.view(), None, &component_cfg)?);
        components.push(net);
        weights.push(idx.len() as f64 / n);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(MixtureFit {
        model: MixtureModel { components, weights },
        assignments,
        metrics,
    })
}
