//! A compiled einsum network together with its parameters.

use ndarray::{Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compiler::{compile, Layer, LayeredCircuit};
use crate::error::CompileError;
use crate::expfam::{init_leaf_params, ExpFamily, LeafProjection};
use crate::simplex::{project_masked, project_with_floor};
use crate::structures::RegionGraph;

/// Floor applied to every sum weight after each update.
pub const DEFAULT_EPS_W: f64 = 1e-12;

/// Weights of one einsum or mixing layer, aligned with [`LayeredCircuit::layers`].
#[derive(Clone, Debug, PartialEq)]
pub enum LayerWeights {
    /// `L x K_out x K x K`, normalized over the last two axes.
    Einsum(Array4<f64>),
    /// `M x Dmax`, normalized over unmasked entries; padding is exactly 0.
    Mixing(Array2<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub layers: Vec<LayerWeights>,
    /// Leaf expectation parameters, `D x K x R x |T|`.
    pub leaves: Array4<f64>,
}

impl Parameters {
    pub fn all_finite(&self) -> Option<String> {
        for (i, l) in self.layers.iter().enumerate() {
            let finite = match l {
                LayerWeights::Einsum(w) => w.iter().all(|v| v.is_finite()),
                LayerWeights::Mixing(w) => w.iter().all(|v| v.is_finite()),
            };
            if !finite {
                return Some(format!("layer {i} weights"));
            }
        }
        if !self.leaves.iter().all(|v| v.is_finite()) {
            return Some("leaf parameters".into());
        }
        None
    }
}

/// Options for random initialization.
#[derive(Clone, Debug)]
pub struct InitOptions {
    /// Per-variable `(min, max)` range for Gaussian means.
    pub ranges: Option<Vec<(f64, f64)>>,
    pub leaf_projection: LeafProjection,
    pub eps_w: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            ranges: None,
            leaf_projection: LeafProjection::default(),
            eps_w: DEFAULT_EPS_W,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EinsumNetwork {
    pub graph: RegionGraph,
    pub circuit: LayeredCircuit,
    pub family: ExpFamily,
    pub params: Parameters,
}

/// Image geometry attached to models built on a pixel grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
}

impl EinsumNetwork {
    /// Compiles `graph` and draws random parameters from `seed`.
    ///
    /// Every `W[l,k,·,·]` and mixing row is i.i.d. uniform(0,1), normalized.
    pub fn random(
        graph: RegionGraph,
        k: usize,
        k_root: usize,
        family: ExpFamily,
        opts: &InitOptions,
        seed: u64,
    ) -> Result<Self, CompileError> {
        let circuit = compile(&graph, k, k_root)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = circuit
            .layers
            .iter()
            .map(|layer| random_layer_weights(layer, k, opts.eps_w, &mut rng))
            .collect();
        let leaves = init_leaf_params(
            family,
            circuit.d_vars,
            k,
            circuit.replica.num_replica,
            opts.ranges.as_deref(),
            &opts.leaf_projection,
            &mut rng,
        );
        Ok(EinsumNetwork {
            graph,
            circuit,
            family,
            params: Parameters { layers, leaves },
        })
    }

    pub fn d_vars(&self) -> usize {
        self.circuit.d_vars
    }

    pub fn k(&self) -> usize {
        self.circuit.k
    }

    pub fn num_replica(&self) -> usize {
        self.circuit.replica.num_replica
    }

    pub fn num_parameters(&self) -> usize {
        self.params
            .layers
            .iter()
            .map(|l| match l {
                LayerWeights::Einsum(w) => w.len(),
                LayerWeights::Mixing(w) => w.len(),
            })
            .sum::<usize>()
            + self.params.leaves.len()
    }

    /// Checks the simplex and floor invariants of all sum weights.
    pub fn check_weights(&self, eps_w: f64, tol: f64) -> Result<(), String> {
        for (li, (layer, w)) in self.circuit.layers.iter().zip(&self.params.layers).enumerate() {
            match (layer, w) {
                (Layer::Einsum(_), LayerWeights::Einsum(w)) => {
                    for (l, block) in w.outer_iter().enumerate() {
                        for (k, sub) in block.outer_iter().enumerate() {
                            let sum: f64 = sub.iter().sum();
                            let min = sub.iter().cloned().fold(f64::INFINITY, f64::min);
                            if (sum - 1.0).abs() > tol || min < eps_w {
                                return Err(format!("layer {li} row {l} entry {k}: sum {sum}, min {min}"));
                            }
                        }
                    }
                }
                (Layer::Mixing(plan), LayerWeights::Mixing(w)) => {
                    for (m, row) in w.outer_iter().enumerate() {
                        let mask = &plan.mask[m * plan.dmax..(m + 1) * plan.dmax];
                        let sum: f64 = row.iter().sum();
                        if (sum - 1.0).abs() > tol
                            || row
                                .iter()
                                .zip(mask)
                                .any(|(&v, &on)| if on { v < eps_w } else { v != 0.0 })
                        {
                            return Err(format!("mixing layer {li} row {m} violates the simplex"));
                        }
                    }
                }
                _ => return Err(format!("layer {li}: weight kind does not match the plan")),
            }
        }
        Ok(())
    }

    /// Projects all sum weights onto the floored simplex.
    pub fn project_weights(&mut self, eps_w: f64) {
        for (layer, w) in self.circuit.layers.iter().zip(self.params.layers.iter_mut()) {
            project_layer(layer, w, eps_w);
        }
    }
}

pub(crate) fn project_layer(layer: &Layer, w: &mut LayerWeights, eps_w: f64) {
    match (layer, w) {
        (Layer::Einsum(_), LayerWeights::Einsum(w)) => {
            let (l, k_out, k, _) = w.dim();
            let mut flat = w.view_mut().into_shape_with_order((l * k_out, k * k)).unwrap();
            for mut row in flat.outer_iter_mut() {
                project_with_floor(row.as_slice_mut().unwrap(), eps_w);
            }
        }
        (Layer::Mixing(plan), LayerWeights::Mixing(w)) => {
            for (m, mut row) in w.axis_iter_mut(Axis(0)).enumerate() {
                let mask = &plan.mask[m * plan.dmax..(m + 1) * plan.dmax];
                project_masked(row.as_slice_mut().unwrap(), mask, eps_w);
            }
        }
        _ => unreachable!("weights are built from the plan"),
    }
}

fn random_layer_weights<R: Rng>(layer: &Layer, k: usize, eps_w: f64, rng: &mut R) -> LayerWeights {
    let mut w = match layer {
        Layer::Einsum(plan) => {
            LayerWeights::Einsum(Array4::from_shape_simple_fn((plan.len(), plan.k_out, k, k), || {
                rng.random::<f64>()
            }))
        }
        Layer::Mixing(plan) => {
            let mut w = Array2::from_shape_simple_fn((plan.len(), plan.dmax), || rng.random::<f64>());
            for (i, v) in w.iter_mut().enumerate() {
                if !plan.mask[i] {
                    *v = 0.0;
                }
            }
            LayerWeights::Mixing(w)
        }
    };
    // Plain normalization first so the floor only touches genuinely tiny draws.
    normalize_rows(layer, &mut w);
    project_layer(layer, &mut w, eps_w);
    w
}

fn normalize_rows(layer: &Layer, w: &mut LayerWeights) {
    match (layer, w) {
        (Layer::Einsum(_), LayerWeights::Einsum(w)) => {
            let (l, k_out, k, _) = w.dim();
            let mut flat = w.view_mut().into_shape_with_order((l * k_out, k * k)).unwrap();
            for mut row in flat.outer_iter_mut() {
                let s = row.sum();
                row.mapv_inplace(|v| v / s);
            }
        }
        (Layer::Mixing(_), LayerWeights::Mixing(w)) => {
            for mut row in w.outer_iter_mut() {
                let s = row.sum();
                row.mapv_inplace(|v| v / s);
            }
        }
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structures::{random_binary_tree, StructureConfig};

    #[test]
    fn random_init_satisfies_invariants_and_is_seeded() {
        let rg = random_binary_tree(
            6,
            &StructureConfig::Rat {
                depth: 2,
                replica: 3,
                seed: 0,
            },
        )
        .unwrap();
        let a = EinsumNetwork::random(rg.clone(), 3, 1, ExpFamily::Gaussian, &InitOptions::default(), 9).unwrap();
        let b = EinsumNetwork::random(rg, 3, 1, ExpFamily::Gaussian, &InitOptions::default(), 9).unwrap();
        assert_eq!(a, b);
        a.check_weights(DEFAULT_EPS_W, 1e-12).unwrap();
        assert_eq!(a.params.leaves.dim(), (6, 3, 3, 2));
    }
}
