//! Timing and memory sweeps over K, depth and replica count.
//!
//! Every configuration builds one random tree network on Gaussian-noise data
//! and times it with both the batched engine and the scalar oracle.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine;
use crate::error::PersistError;
use crate::expfam::ExpFamily;
use crate::model::{EinsumNetwork, InitOptions};
use crate::oracle::{expand, scalar_backward, ScalarCircuit, ScalarNode};
use crate::structures::{random_binary_tree, StructureConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchEngine {
    Einsum,
    Oracle,
}

impl BenchEngine {
    pub fn name(&self) -> &'static str {
        match self {
            BenchEngine::Einsum => "einsum",
            BenchEngine::Oracle => "oracle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub ks: Vec<usize>,
    pub depths: Vec<usize>,
    pub replicas: Vec<usize>,
    pub batch: usize,
    pub d_vars: usize,
    /// Timed repetitions per configuration; the median is reported.
    pub repeats: usize,
    pub seed: u64,
    pub engines: Vec<BenchEngine>,
    /// Skip backward timing.
    pub forward_only: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            ks: vec![10],
            depths: vec![4],
            replicas: vec![10],
            batch: 100,
            d_vars: 512,
            repeats: 3,
            seed: 0,
            engines: vec![BenchEngine::Einsum, BenchEngine::Oracle],
            forward_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub engine: BenchEngine,
    pub k: usize,
    pub depth: usize,
    pub replica: usize,
    pub batch: usize,
    pub forward_ms: f64,
    /// Full statistics pass (forward and backward); NaN when skipped.
    pub backward_ms: f64,
    pub peak_bytes: usize,
}

/// Cartesian product of the configured K, depth and replica lists.
pub fn grid(cfg: &BenchConfig) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for &k in &cfg.ks {
        for &d in &cfg.depths {
            for &r in &cfg.replicas {
                out.push((k, d, r));
            }
        }
    }
    out
}

pub fn bench_network(d_vars: usize, k: usize, depth: usize, replica: usize, seed: u64) -> EinsumNetwork {
    let rg = random_binary_tree(d_vars, &StructureConfig::Rat { depth, replica, seed }).expect("valid structure");
    EinsumNetwork::random(rg, k, 1, ExpFamily::Gaussian, &InitOptions::default(), seed).expect("compiles")
}

pub fn noise(batch: usize, d_vars: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((batch, d_vars), || StandardNormal.sample(&mut rng))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn time_ms(repeats: usize, mut f: impl FnMut()) -> f64 {
    median(
        (0..repeats.max(1))
            .map(|_| {
                let t = Instant::now();
                f();
                t.elapsed().as_secs_f64() * 1e3
            })
            .collect(),
    )
}

/// Bytes held by the scalar evaluator for one sample: node values, node
/// gradients and the expanded weights.
fn oracle_bytes(sc: &ScalarCircuit, with_grad: bool) -> usize {
    let weights: usize = sc
        .nodes
        .iter()
        .map(|n| match n {
            ScalarNode::Sum { weights, .. } => weights.len() * 2,
            _ => 0,
        })
        .sum();
    8 * (sc.nodes.len() * if with_grad { 2 } else { 1 } + weights)
}

/// Times one engine on one network.
pub fn measure(
    engine_kind: BenchEngine,
    net: &EinsumNetwork,
    x: &Array2<f64>,
    repeats: usize,
    forward_only: bool,
) -> (f64, f64, usize) {
    let marg = vec![false; net.d_vars()];
    match engine_kind {
        BenchEngine::Einsum => {
            let mut peak = 0;
            let fwd = time_ms(repeats, || {
                let pass = engine::forward(net, x.view(), &marg).expect("forward");
                peak = peak.max(pass.meter.peak_bytes());
            });
            let bwd = if forward_only {
                f64::NAN
            } else {
                time_ms(repeats, || {
                    let pass = engine::forward(net, x.view(), &marg).expect("forward");
                    let stats = engine::backward(net, &pass).expect("backward");
                    peak = peak.max(stats.meter.peak_bytes());
                })
            };
            (fwd, bwd, peak)
        }
        BenchEngine::Oracle => {
            let sc = expand(net);
            let fwd = time_ms(repeats, || {
                for row in x.outer_iter() {
                    std::hint::black_box(sc.eval(row.as_slice().expect("contiguous"), &marg));
                }
            });
            let bwd = if forward_only {
                f64::NAN
            } else {
                time_ms(repeats, || {
                    std::hint::black_box(scalar_backward(&sc, x.view()));
                })
            };
            (fwd, bwd, oracle_bytes(&sc, !forward_only))
        }
    }
}

/// Runs the full sweep, calling `progress` after each row.
pub fn run(cfg: &BenchConfig, mut progress: impl FnMut(&BenchRow)) -> Vec<BenchRow> {
    let x = noise(cfg.batch, cfg.d_vars, cfg.seed);
    let mut rows = Vec::new();
    for (k, depth, replica) in grid(cfg) {
        let net = bench_network(cfg.d_vars, k, depth, replica, cfg.seed);
        for &e in &cfg.engines {
            let (forward_ms, backward_ms, peak_bytes) = measure(e, &net, &x, cfg.repeats, cfg.forward_only);
            let row = BenchRow {
                engine: e,
                k,
                depth,
                replica,
                batch: cfg.batch,
                forward_ms,
                backward_ms,
                peak_bytes,
            };
            progress(&row);
            rows.push(row);
        }
    }
    rows
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

pub fn write_report(path: impl AsRef<Path>, rows: &[BenchRow]) -> Result<(), PersistError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PersistError::Data(e.to_string()))?;
    let err = |e: csv::Error| PersistError::Data(e.to_string());
    w.write_record([
        "engine",
        "K",
        "D",
        "R",
        "batch",
        "forward_ms",
        "backward_ms",
        "peak_bytes",
    ])
    .map_err(err)?;
    for r in rows {
        w.write_record([
            r.engine.name().to_string(),
            r.k.to_string(),
            r.depth.to_string(),
            r.replica.to_string(),
            r.batch.to_string(),
            format!("{:.4}", r.forward_ms),
            format!("{:.4}", r.backward_ms),
            r.peak_bytes.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_has_one_row_per_configuration_and_engine() {
        let cfg = BenchConfig {
            ks: vec![1, 2],
            depths: vec![1, 2],
            replicas: vec![1],
            batch: 3,
            d_vars: 8,
            repeats: 1,
            ..BenchConfig::default()
        };
        let rows = run(&cfg, |_| {});
        assert_eq!(rows.len(), grid(&cfg).len() * 2);
        assert!(rows.iter().all(|r| r.peak_bytes > 0 && r.forward_ms >= 0.0));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        write_report(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), rows.len() + 1);
        assert!(text.starts_with("engine,K,D,R,batch,forward_ms,backward_ms,peak_bytes\n"));
    }

    #[test]
    fn exponent_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 5.0 * x.powi(3)).collect();
        assert!((fit_exponent(&xs, &ys) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn engine_peak_grows_with_batch() {
        let net = bench_network(16, 3, 2, 2, 0);
        let (_, _, small) = measure(BenchEngine::Einsum, &net, &noise(2, 16, 0), 1, false);
        let (_, _, large) = measure(BenchEngine::Einsum, &net, &noise(20, 16, 0), 1, false);
        assert!(large > small);
    }
}
