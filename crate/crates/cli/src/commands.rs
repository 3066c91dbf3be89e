use std::fmt;
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use ndarray::{Array2, ArrayView2, Axis};
use serde_json::json;

use einet::bench::{self, BenchConfig, BenchEngine, BenchRow};
use einet::engine;
use einet::expfam::{ExpFamily, LeafProjection};
use einet::io::{self, LoadOptions, ModelFile};
use einet::model::{EinsumNetwork, ImageShape, InitOptions};
use einet::oracle::{expand, random_fixture, FixtureSpec};
use einet::structures::{RegionGraph, StructureConfig};
use einet::trainer::{self, EpochMetrics, MixtureModel, TrainerConfig};

use crate::config::{FamilyKind, StructureKind, TrainFlags, TrainSettings};

/// Bad or missing command-line input; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> Result<()> {
    Err(UsageError(msg.into()).into())
}

pub fn report(result: Result<()>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn family_of(s: &TrainSettings, x: &Array2<f64>) -> Result<ExpFamily> {
    Ok(match s.family {
        FamilyKind::Gaussian => ExpFamily::Gaussian,
        FamilyKind::Categorical => {
            let num_states = match s.states {
                Some(n) => n,
                None => x.iter().cloned().fold(0.0, f64::max) as usize + 1,
            };
            if num_states < 2 {
                bail!(UsageError("categorical leaves need at least 2 states".into()));
            }
            ExpFamily::Categorical { num_states }
        }
        FamilyKind::Binomial => ExpFamily::Binomial { n_trials: s.trials },
    })
}

fn structure_of(s: &TrainSettings, d_vars: usize) -> Result<(StructureConfig, Option<ImageShape>)> {
    let image = match (s.height, s.width) {
        (Some(height), Some(width)) => {
            if height * width != d_vars {
                bail!(UsageError(format!(
                    "image {height}x{width} does not match {d_vars} variables in the data"
                )));
            }
            Some(ImageShape { height, width })
        }
        (None, None) => None,
        _ => bail!(UsageError("--height and --width must be given together".into())),
    };
    let cfg = match s.structure {
        StructureKind::Rat => StructureConfig::Rat {
            depth: s.depth,
            replica: s.replica,
            seed: s.structure_seed.unwrap_or(s.seed),
        },
        StructureKind::Pd => {
            let Some(ImageShape { height, width }) = image else {
                bail!(UsageError("pd structures need --height and --width".into()));
            };
            StructureConfig::Pd {
                height,
                width,
                delta: s.delta.clone(),
                axes: s.axes.into(),
            }
        }
    };
    Ok((cfg, image))
}

fn ranges(x: ArrayView2<f64>) -> Vec<(f64, f64)> {
    x.axis_iter(Axis(1))
        .map(|col| {
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if lo.is_finite() && hi.is_finite() {
                (lo, hi)
            } else {
                (0.0, 1.0)
            }
        })
        .collect()
}

fn projection_of(s: &TrainSettings, family: ExpFamily, image: bool, x: &Array2<f64>) -> LeafProjection {
    let unit_range = x.iter().all(|v| (0.0..=1.0).contains(v));
    let mut p = if family == ExpFamily::Gaussian && image && unit_range {
        LeafProjection::image()
    } else {
        LeafProjection::default()
    };
    p.var_min = s.var_min;
    if let Some(v) = s.var_max {
        p.var_max = v;
    }
    p
}

fn load_data(path: &Path, scale_u8: bool) -> Result<Array2<f64>> {
    let x = io::load_dataset(path, LoadOptions { scale_u8 }).with_context(|| format!("reading {}", path.display()))?;
    if x.nrows() == 0 {
        bail!("dataset {} is empty", path.display());
    }
    Ok(x)
}

fn scale_for(family: FamilyKind, normalize: bool) -> bool {
    normalize && family == FamilyKind::Gaussian
}

pub fn train(flags: &TrainFlags) -> Result<()> {
    let s = flags.resolve().map_err(|e| UsageError(format!("{e:#}")))?;
    let Some(data) = &s.data else {
        return usage("missing --data");
    };
    if s.clusters == 0 {
        return usage("--clusters must be at least 1");
    }
    let scale = scale_for(s.family, s.normalize);
    let x = load_data(data, scale)?;
    let valid = s.valid.as_deref().map(|p| load_data(p, scale)).transpose()?;
    if let Some(v) = &valid {
        if v.ncols() != x.ncols() {
            bail!(
                "validation data has {} variables, training data {}",
                v.ncols(),
                x.ncols()
            );
        }
    }
    let family = family_of(&s, &x)?;
    let (structure, image) = structure_of(&s, x.ncols())?;
    let graph: RegionGraph = structure.build(x.ncols()).map_err(|e| UsageError(e.to_string()))?;
    let projection = projection_of(&s, family, image.is_some(), &x);
    let cfg = TrainerConfig {
        mode: s.mode.into(),
        lambda: s.lambda,
        batch_size: s.batch,
        epochs: s.epochs,
        seed: s.seed,
        leaf_projection: projection,
        eps_w: s.eps_w,
        ..TrainerConfig::default()
    };
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;

    let build = |data: ArrayView2<f64>, seed: u64| -> Result<EinsumNetwork, einet::TrainError> {
        let opts = InitOptions {
            ranges: Some(ranges(data)),
            leaf_projection: projection,
            eps_w: s.eps_w,
        };
        EinsumNetwork::random(graph.clone(), s.k, s.k_root, family, &opts, seed)
            .map_err(|e| einet::TrainError::Config(e.to_string()))
    };

    if let Some(path) = &flags.dump_plan {
        let net = build(x.view(), s.seed)?;
        std::fs::write(path, net.circuit.to_json()).with_context(|| format!("writing {}", path.display()))?;
    }

    let (mixture, metrics) = if s.clusters == 1 {
        let mut net = build(x.view(), s.seed)?;
        eprintln!(
            "{} variables, {} samples, {} parameters",
            net.d_vars(),
            x.nrows(),
            net.num_parameters()
        );
        let metrics = trainer::train_with(&mut net, x.view(), valid.as_ref().map(|v| v.view()), &cfg, |m| {
            print_epoch(m)
        })?;
        (MixtureModel::single(net), metrics)
    } else {
        let fit = trainer::train_mixture(x.view(), s.clusters, &cfg, build)?;
        let metrics = aggregate(&fit.metrics, &fit.model.weights);
        metrics.iter().for_each(print_epoch);
        (fit.model, metrics)
    };

    let train_ll = mixture_mean_ll(&mixture, x.view())?;
    let valid_ll = valid
        .as_ref()
        .map(|v| mixture_mean_ll(&mixture, v.view()))
        .transpose()?;
    println!("train_ll {train_ll}");
    if let Some(v) = valid_ll {
        println!("valid_ll {v}");
    }
    if let Some(path) = &s.metrics {
        io::write_metrics(path, &metrics).with_context(|| format!("writing {}", path.display()))?;
    }
    let model = ModelFile {
        mixture,
        structure: Some(structure),
        image,
        provenance: json!({
            "settings": s,
            "normalize": s.normalize,
            "train_ll": train_ll,
            "valid_ll": valid_ll,
            "epochs": metrics.len(),
        }),
    };
    io::save_model(&s.out, &model).with_context(|| format!("writing {}", s.out.display()))?;
    Ok(())
}

fn print_epoch(m: &EpochMetrics) {
    match m.valid_ll {
        Some(v) => eprintln!(
            "epoch {:>3}  train_ll {:.6}  valid_ll {:.6}  {:.2}s",
            m.epoch, m.train_ll, v, m.wall_seconds
        ),
        None => eprintln!(
            "epoch {:>3}  train_ll {:.6}  {:.2}s",
            m.epoch, m.train_ll, m.wall_seconds
        ),
    }
}

/// Cluster-weighted average of per-component metrics, epoch by epoch.
fn aggregate(per_component: &[Vec<EpochMetrics>], weights: &[f64]) -> Vec<EpochMetrics> {
    let epochs = per_component.iter().map(Vec::len).min().unwrap_or(0);
    (0..epochs)
        .map(|e| EpochMetrics {
            epoch: e + 1,
            train_ll: per_component.iter().zip(weights).map(|(m, w)| w * m[e].train_ll).sum(),
            valid_ll: None,
            wall_seconds: per_component.iter().map(|m| m[e].wall_seconds).sum(),
        })
        .collect()
}

fn mixture_mean_ll(m: &MixtureModel, x: ArrayView2<f64>) -> Result<f64> {
    let ll = m.log_likelihood(x, &vec![false; m.d_vars()])?;
    Ok(ll.sum() / ll.len() as f64)
}

fn load(path: &Path) -> Result<ModelFile> {
    io::load_model(path).with_context(|| format!("loading model {}", path.display()))
}

/// Whether the model was trained on Gaussian data with 8-bit payloads divided by 255.
fn normalized(model: &ModelFile) -> bool {
    let gaussian = model.mixture.components[0].family == ExpFamily::Gaussian;
    gaussian
        && model
            .provenance
            .get("normalize")
            .and_then(|v| v.as_bool())
            .unwrap_or(true)
}

fn load_for(model: &ModelFile, path: &Path) -> Result<Array2<f64>> {
    let x = load_data(path, normalized(model))?;
    if x.ncols() != model.mixture.d_vars() {
        bail!("data has {} variables, model has {}", x.ncols(), model.mixture.d_vars());
    }
    Ok(x)
}

pub fn eval(model_path: &Path, data: &Path, per_sample: Option<&Path>) -> Result<()> {
    let model = load(model_path)?;
    let x = load_for(&model, data)?;
    let ll = model.mixture.log_likelihood(x.view(), &vec![false; x.ncols()])?;
    let total = ll.sum();
    println!("samples {}", ll.len());
    println!("mean_ll {}", total / ll.len() as f64);
    println!("total_ll {total}");
    if let Some(path) = per_sample {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for v in &ll {
            writeln!(f, "{v}")?;
        }
        f.flush()?;
    }
    Ok(())
}

fn write_output(model: &ModelFile, x: &Array2<f64>, out: &Path, cols: usize, pixel_scale: Option<f64>) -> Result<()> {
    let is_pgm = out.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        let Some(shape) = model.image else {
            bail!("model has no image shape; write CSV instead");
        };
        let scale = pixel_scale.unwrap_or(if normalized(model) { 255.0 } else { 1.0 });
        io::write_pgm_grid(out, x, shape, cols, scale)?;
    } else {
        io::save_csv(out, x)?;
    }
    Ok(())
}

pub fn sample(model_path: &Path, n: usize, seed: u64, out: &Path, cols: usize, pixel_scale: Option<f64>) -> Result<()> {
    let model = load(model_path)?;
    let x = model.mixture.sample(n, seed);
    write_output(&model, &x, out, cols, pixel_scale)
}

/// Variables hidden during inpainting.
#[derive(Clone, Debug, PartialEq)]
pub enum Mask {
    /// Columns `c < W/2` of the image.
    LeftHalf,
    /// Rows `r < H/2` of the image.
    TopHalf,
    Vars(Vec<usize>),
}

/// `true` for observed variables.
pub fn evidence_mask(mask: &Mask, d_vars: usize, image: Option<ImageShape>) -> Result<Vec<bool>> {
    let need_image = || -> Result<ImageShape> {
        image.ok_or_else(|| UsageError("--cover needs a model with an image shape".into()).into())
    };
    Ok(match mask {
        Mask::LeftHalf => {
            let s = need_image()?;
            (0..d_vars).map(|i| i % s.width >= s.width / 2).collect()
        }
        Mask::TopHalf => {
            let s = need_image()?;
            (0..d_vars).map(|i| i / s.width >= s.height / 2).collect()
        }
        Mask::Vars(idx) => {
            let mut e = vec![true; d_vars];
            for &i in idx {
                if i >= d_vars {
                    bail!(UsageError(format!("variable {i} out of range for {d_vars} variables")));
                }
                e[i] = false;
            }
            e
        }
    })
}

pub fn inpaint(
    model_path: &Path,
    data: &Path,
    mask: &Mask,
    seed: u64,
    out: &Path,
    cols: usize,
    pixel_scale: Option<f64>,
) -> Result<()> {
    let model = load(model_path)?;
    let x = load_for(&model, data)?;
    let evidence = evidence_mask(mask, x.ncols(), model.image)?;
    let filled = model.mixture.conditional_sample_batch(x.view(), &evidence, seed)?;
    write_output(&model, &filled, out, cols, pixel_scale)
}

fn print_row(r: &BenchRow) {
    eprintln!(
        "{:<6} K={:<3} D={:<2} R={:<3} batch={:<4} forward {:>10.3} ms  backward {:>10.3} ms  peak {} B",
        r.engine.name(),
        r.k,
        r.depth,
        r.replica,
        r.batch,
        r.forward_ms,
        r.backward_ms,
        r.peak_bytes
    );
}

pub fn bench(cfg: &BenchConfig, out: Option<&Path>) -> Result<()> {
    let rows = bench::run(cfg, print_row);
    let einsum: Vec<&BenchRow> = rows.iter().filter(|r| r.engine == BenchEngine::Einsum).collect();
    let ks: Vec<f64> = einsum.iter().map(|r| r.k as f64).collect();
    if cfg.depths.len() == 1 && cfg.replicas.len() == 1 && cfg.ks.len() > 1 {
        let times: Vec<f64> = einsum.iter().map(|r| r.forward_ms).collect();
        println!("k_exponent {:.4}", bench::fit_exponent(&ks, &times));
    }
    for r in &einsum {
        let oracle = rows
            .iter()
            .find(|o| o.engine == BenchEngine::Oracle && (o.k, o.depth, o.replica) == (r.k, r.depth, r.replica));
        if let Some(o) = oracle {
            println!(
                "speedup K={} D={} R={}: {:.2}x",
                r.k,
                r.depth,
                r.replica,
                o.forward_ms / r.forward_ms
            );
        }
    }
    if let Some(path) = out {
        bench::write_report(path, &rows).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn oracle_check(fixtures: u64, tol: f64, seed: u64) -> Result<()> {
    let spec = FixtureSpec::default();
    let mut worst = 0.0f64;
    for i in 0..fixtures {
        let f = random_fixture(seed.wrapping_add(i), &spec);
        let marg = vec![false; f.net.d_vars()];
        let pass = engine::forward(&f.net, f.x.view(), &marg)?;
        let sc = expand(&f.net);
        for (b, row) in f.x.outer_iter().enumerate() {
            let reference = sc.eval(&row.to_vec(), &marg);
            let diff = (pass.log_likelihood[b] - reference).abs();
            worst = worst.max(diff);
            if diff.is_nan() || diff > tol {
                bail!(
                    "fixture {} sample {b}: engine {} vs oracle {reference} (|diff| {diff:e})",
                    seed.wrapping_add(i),
                    pass.log_likelihood[b]
                );
            }
        }
    }
    println!("{fixtures} fixtures agree, max |diff| {worst:e}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn left_half_hides_left_columns() {
        let e = evidence_mask(&Mask::LeftHalf, 6, Some(ImageShape { height: 2, width: 3 })).unwrap();
        assert_eq!(e, vec![false, true, true, false, true, true]);
        let e = evidence_mask(&Mask::TopHalf, 6, Some(ImageShape { height: 2, width: 3 })).unwrap();
        assert_eq!(e, vec![false, false, false, true, true, true]);
    }

    #[test]
    fn cover_without_image_is_a_usage_error() {
        let err = evidence_mask(&Mask::LeftHalf, 4, None).unwrap_err();
        assert!(err.is::<UsageError>());
        assert!(evidence_mask(&Mask::Vars(vec![4]), 4, None).is_err());
    }

    #[test]
    fn aggregate_weights_components() {
        let m = |ll| EpochMetrics {
            epoch: 1,
            train_ll: ll,
            valid_ll: None,
            wall_seconds: 1.0,
        };
        let out = aggregate(&[vec![m(-1.0)], vec![m(-3.0)]], &[0.25, 0.75]);
        assert_eq!(out.len(), 1);
        assert!((out[0].train_ll + 2.5).abs() < 1e-15);
        assert_eq!(out[0].wall_seconds, 2.0);
    }
}
