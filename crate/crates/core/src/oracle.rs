//! Scalar reference evaluator.
//!
//! A compiled network is expanded into one node per vector entry and evaluated
//! node by node. Leaf densities come from `statrs` rather than from the
//! engine's exponential-family code, so agreement between the two is a real
//! cross-check. This path is deliberately slow; it is the baseline in benchmarks.

use std::collections::HashMap;

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, Categorical, Continuous, Discrete, Normal};

use crate::compiler::{Layer, RegionOutput};
use crate::expfam::{gaussian_moments, ExpFamily, LeafProjection};
use crate::model::{EinsumNetwork, InitOptions, LayerWeights};
use crate::structures::{poon_domingos, random_binary_tree, SplitAxes, StructureConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum ScalarNode {
    /// Product of univariate densities of component `(k, replica)` over `vars`,
    /// plus a constant log-offset.
    Leaf {
        row: usize,
        vars: Vec<usize>,
        k: usize,
        replica: usize,
        shift: f64,
    },
    Product {
        left: usize,
        right: usize,
    },
    Sum {
        children: Vec<usize>,
        weights: Vec<f64>,
    },
}

/// Expanded circuit; nodes are stored children-first.
#[derive(Clone, Debug)]
pub struct ScalarCircuit {
    pub nodes: Vec<ScalarNode>,
    /// One node per root vector entry.
    pub roots: Vec<usize>,
    pub family: ExpFamily,
    pub d_vars: usize,
    params: Vec<LeafDensity>,
    k: usize,
    replica: usize,
}

#[derive(Clone, Debug)]
enum LeafDensity {
    Normal(Normal),
    Categorical(Categorical),
    Binomial(Binomial),
}

impl LeafDensity {
    fn ln_density(&self, x: f64) -> f64 {
        match self {
            LeafDensity::Normal(n) => n.ln_pdf(x),
            LeafDensity::Categorical(c) => c.ln_pmf(x as u64),
            LeafDensity::Binomial(b) => b.ln_pmf(x as u64),
        }
    }
}

/// Expands a network into a scalar circuit.
pub fn expand(net: &EinsumNetwork) -> ScalarCircuit {
    let circuit = &net.circuit;
    let (d_vars, k, replica, _) = net.params.leaves.dim();
    let mut params = Vec::with_capacity(d_vars * k * replica);
    for d in 0..d_vars {
        for kk in 0..k {
            for r in 0..replica {
                let phi = net.params.leaves.slice(s![d, kk, r, ..]).to_vec();
                params.push(match net.family {
                    ExpFamily::Gaussian => {
                        let (mean, var) = gaussian_moments(&phi);
                        LeafDensity::Normal(Normal::new(mean, var.sqrt()).expect("valid variance"))
                    }
                    ExpFamily::Categorical { .. } => {
                        LeafDensity::Categorical(Categorical::new(&phi).expect("valid probabilities"))
                    }
                    ExpFamily::Binomial { n_trials } => LeafDensity::Binomial(
                        Binomial::new((phi[0] / n_trials as f64).clamp(0.0, 1.0), n_trials as u64)
                            .expect("valid success probability"),
                    ),
                });
            }
        }
    }

    let mut einsum_of: HashMap<usize, (usize, usize)> = HashMap::new();
    let mut owner_of_row: HashMap<usize, usize> = HashMap::new();
    for (li, layer) in circuit.layers.iter().enumerate() {
        if let Layer::Einsum(plan) = layer {
            for (row, &(_, p)) in plan.owners.iter().enumerate() {
                einsum_of.insert(p, (li, row));
                owner_of_row.insert(plan.offset + row, p);
            }
        }
    }

    let mut sc = ScalarCircuit {
        nodes: Vec::new(),
        roots: Vec::new(),
        family: net.family,
        d_vars,
        params,
        k,
        replica,
    };
    let children = net.graph.child_partitions();
    let mut memo: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut ctx = Expander {
        net,
        children: &children,
        einsum_of: &einsum_of,
        owner_of_row: &owner_of_row,
        memo: &mut memo,
    };
    sc.roots = ctx.region(&mut sc.nodes, circuit.root);
    sc
}

struct Expander<'a> {
    net: &'a EinsumNetwork,
    children: &'a [Vec<usize>],
    einsum_of: &'a HashMap<usize, (usize, usize)>,
    owner_of_row: &'a HashMap<usize, usize>,
    memo: &'a mut HashMap<usize, Vec<usize>>,
}

impl Expander<'_> {
    fn region(&mut self, nodes: &mut Vec<ScalarNode>, region: usize) -> Vec<usize> {
        if let Some(ids) = self.memo.get(&region) {
            return ids.clone();
        }
        let circuit = &self.net.circuit;
        let k = circuit.k;
        let ids = match circuit.region_output[region] {
            RegionOutput::Leaf { row } => (0..k)
                .map(|kk| {
                    nodes.push(ScalarNode::Leaf {
                        row,
                        vars: circuit.leaf.scopes[row].clone(),
                        k: kk,
                        replica: circuit.leaf.replica[row],
                        shift: 0.0,
                    });
                    nodes.len() - 1
                })
                .collect(),
            RegionOutput::Einsum { .. } => {
                let p = self.children[region][0];
                self.simple_sums(nodes, p)
            }
            RegionOutput::Mixing { layer, row } => {
                let (Layer::Mixing(plan), LayerWeights::Mixing(w)) =
                    (&circuit.layers[layer], &self.net.params.layers[layer])
                else {
                    unreachable!("mixing output points at a mixing layer");
                };
                let parts: Vec<(f64, Vec<usize>)> = plan
                    .children(row)
                    .map(|(c, src)| (w[[row, c]], self.simple_sums(nodes, self.owner_of_row[&src])))
                    .collect();
                (0..plan.k_out)
                    .map(|kk| {
                        nodes.push(ScalarNode::Sum {
                            children: parts.iter().map(|(_, ids)| ids[kk]).collect(),
                            weights: parts.iter().map(|(w, _)| *w).collect(),
                        });
                        nodes.len() - 1
                    })
                    .collect()
            }
        };
        self.memo.insert(region, ids.clone());
        ids
    }

    /// One sum node per output entry of partition `p`'s einsum row, each over
    /// the `K²` products of its children.
    fn simple_sums(&mut self, nodes: &mut Vec<ScalarNode>, p: usize) -> Vec<usize> {
        let part = &self.net.graph.partitions[p];
        let (left, right) = (part.left, part.right);
        let left = self.region(nodes, left);
        let right = self.region(nodes, right);
        let mut products = Vec::with_capacity(left.len() * right.len());
        for &l in &left {
            for &r in &right {
                nodes.push(ScalarNode::Product { left: l, right: r });
                products.push(nodes.len() - 1);
            }
        }
        let (layer, row) = self.einsum_of[&p];
        let LayerWeights::Einsum(w) = &self.net.params.layers[layer] else {
            unreachable!("partition rows live in einsum layers");
        };
        let k_out = w.dim().1;
        (0..k_out)
            .map(|kk| {
                nodes.push(ScalarNode::Sum {
                    children: products.clone(),
                    weights: w.slice(s![row, kk, .., ..]).iter().cloned().collect(),
                });
                nodes.len() - 1
            })
            .collect()
    }
}

fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.map(|t| (t - m).exp()).sum::<f64>().ln()
}

impl ScalarCircuit {
    fn leaf_log(&self, vars: &[usize], k: usize, replica: usize, shift: f64, x: &[f64], marg: &[bool]) -> f64 {
        let mut v = shift;
        for &d in vars {
            if !marg[d] {
                v += self.params[(d * self.k + k) * self.replica + replica].ln_density(x[d]);
            }
        }
        v
    }

    fn node_log(&self, id: usize, vals: &[f64], x: &[f64], marg: &[bool]) -> f64 {
        match &self.nodes[id] {
            ScalarNode::Leaf {
                vars,
                k,
                replica,
                shift,
                ..
            } => self.leaf_log(vars, *k, *replica, *shift, x, marg),
            ScalarNode::Product { left, right } => vals[*left] + vals[*right],
            ScalarNode::Sum { children, weights } => {
                log_sum_exp(children.iter().zip(weights).map(|(&c, &w)| w.ln() + vals[c]))
            }
        }
    }

    fn root_value(&self, vals: &[f64]) -> f64 {
        let terms = self.roots.iter().map(|&r| vals[r]);
        if self.roots.len() == 1 {
            return vals[self.roots[0]];
        }
        log_sum_exp(terms) - (self.roots.len() as f64).ln()
    }

    /// All node log-values in storage order.
    pub fn node_values(&self, x: &[f64], marg: &[bool]) -> Vec<f64> {
        let mut vals = vec![0.0; self.nodes.len()];
        for id in 0..self.nodes.len() {
            vals[id] = self.node_log(id, &vals, x, marg);
        }
        vals
    }

    /// Log-density of `x` with masked variables integrated out.
    pub fn eval(&self, x: &[f64], marg: &[bool]) -> f64 {
        self.root_value(&self.node_values(x, marg))
    }

    /// Same as [`ScalarCircuit::eval`] but visiting nodes depth-first from
    /// the last root, right child first.
    pub fn eval_recursive(&self, x: &[f64], marg: &[bool]) -> f64 {
        let mut vals = vec![f64::NAN; self.nodes.len()];
        let mut done = vec![false; self.nodes.len()];
        for &root in self.roots.iter().rev() {
            let mut stack = vec![(root, false)];
            while let Some((id, expanded)) = stack.pop() {
                if done[id] {
                    continue;
                }
                if expanded {
                    vals[id] = self.node_log(id, &vals, x, marg);
                    done[id] = true;
                    continue;
                }
                stack.push((id, true));
                match &self.nodes[id] {
                    ScalarNode::Leaf { .. } => {}
                    ScalarNode::Product { left, right } => {
                        stack.push((*left, false));
                        stack.push((*right, false));
                    }
                    ScalarNode::Sum { children, .. } => {
                        stack.extend(children.iter().map(|&c| (c, false)));
                    }
                }
            }
        }
        self.root_value(&vals)
    }

    /// Linear-domain evaluation; only meaningful when nothing underflows.
    pub fn eval_linear(&self, x: &[f64], marg: &[bool]) -> f64 {
        let mut vals = vec![0.0; self.nodes.len()];
        for id in 0..self.nodes.len() {
            vals[id] = match &self.nodes[id] {
                ScalarNode::Leaf {
                    vars,
                    k,
                    replica,
                    shift,
                    ..
                } => self.leaf_log(vars, *k, *replica, *shift, x, marg).exp(),
                ScalarNode::Product { left, right } => vals[*left] * vals[*right],
                ScalarNode::Sum { children, weights } => children.iter().zip(weights).map(|(&c, &w)| w * vals[c]).sum(),
            };
        }
        let total: f64 = self.roots.iter().map(|&r| vals[r]).sum();
        (total / self.roots.len() as f64).ln()
    }

    /// Adds `delta` to the log-value of leaf entry `(row, k)`.
    pub fn shift_leaf(&mut self, leaf_row: usize, entry: usize, delta: f64) {
        for node in &mut self.nodes {
            if let ScalarNode::Leaf { row, k, shift, .. } = node {
                if *row == leaf_row && *k == entry {
                    *shift += delta;
                }
            }
        }
    }

    pub fn num_sums(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, ScalarNode::Sum { .. }))
            .count()
    }

    pub fn num_products(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, ScalarNode::Product { .. }))
            .count()
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, ScalarNode::Leaf { .. }))
            .count()
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OracleError {
    #[error("variable {0} is continuous and cannot be summed out")]
    Continuous(usize),
}

/// `log Σ exp(log p)` over every completion of the unassigned (`None`) variables.
pub fn exhaustive_marginal(sc: &ScalarCircuit, partial: &[Option<f64>]) -> Result<f64, OracleError> {
    let free: Vec<usize> = (0..partial.len()).filter(|&d| partial[d].is_none()).collect();
    let support = match sc.family.support() {
        Some(s) => s,
        None if free.is_empty() => Vec::new(),
        None => return Err(OracleError::Continuous(free[0])),
    };
    let marg = vec![false; sc.d_vars];
    let mut x: Vec<f64> = partial.iter().map(|v| v.unwrap_or(0.0)).collect();
    let mut counter = vec![0usize; free.len()];
    let mut terms = Vec::new();
    loop {
        for (slot, &d) in free.iter().enumerate() {
            x[d] = support[counter[slot]];
        }
        terms.push(sc.eval(&x, &marg));
        let mut slot = 0;
        loop {
            if slot == free.len() {
                return Ok(log_sum_exp(terms.iter().cloned()));
            }
            counter[slot] += 1;
            if counter[slot] < support.len() {
                break;
            }
            counter[slot] = 0;
            slot += 1;
        }
    }
}

/// A single scalar parameter perturbed by [`finite_diff_grad`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Entry {
    Einsum {
        layer: usize,
        row: usize,
        k: usize,
        i: usize,
        j: usize,
    },
    Mixing {
        layer: usize,
        row: usize,
        c: usize,
    },
    Leaf {
        var: usize,
        k: usize,
        replica: usize,
        stat: usize,
    },
    /// Additive log-offset of leaf row `row`, entry `k`.
    LeafShift {
        row: usize,
        k: usize,
    },
}

/// How a step is applied to the perturbed parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Step {
    /// `p + h`
    Additive,
    /// `p · exp(h)` for sum weights; additive for leaf entries.
    Log,
}

fn perturbed(net: &EinsumNetwork, entry: Entry, delta: f64, step: Step) -> ScalarCircuit {
    let mut net = net.clone();
    let apply = |v: &mut f64| match step {
        Step::Additive => *v += delta,
        Step::Log => *v *= delta.exp(),
    };
    match entry {
        Entry::Einsum { layer, row, k, i, j } => {
            let LayerWeights::Einsum(w) = &mut net.params.layers[layer] else {
                panic!("layer {layer} is not an einsum layer");
            };
            apply(&mut w[[row, k, i, j]]);
        }
        Entry::Mixing { layer, row, c } => {
            let LayerWeights::Mixing(w) = &mut net.params.layers[layer] else {
                panic!("layer {layer} is not a mixing layer");
            };
            apply(&mut w[[row, c]]);
        }
        Entry::Leaf { var, k, replica, stat } => net.params.leaves[[var, k, replica, stat]] += delta,
        Entry::LeafShift { .. } => {}
    }
    let mut sc = expand(&net);
    if let Entry::LeafShift { row, k } = entry {
        sc.shift_leaf(row, k, delta);
    }
    sc
}

fn mean_log_likelihood(sc: &ScalarCircuit, x: ArrayView2<f64>) -> f64 {
    let marg = vec![false; sc.d_vars];
    let total: f64 = x.outer_iter().map(|row| sc.eval(&row.to_vec(), &marg)).sum();
    total / x.nrows() as f64
}

/// Central difference of the mean log-likelihood with respect to `entry`,
/// without renormalizing the perturbed weights.
pub fn finite_diff_grad(net: &EinsumNetwork, x: ArrayView2<f64>, entry: Entry, step: f64) -> f64 {
    let plus = mean_log_likelihood(&perturbed(net, entry, step, Step::Additive), x);
    let minus = mean_log_likelihood(&perturbed(net, entry, -step, Step::Additive), x);
    (plus - minus) / (2.0 * step)
}

/// Central difference with respect to the log of a sum weight, i.e. an
/// estimate of `w · ∂/∂w` of the mean log-likelihood. Stays inside the
/// positive orthant for weights smaller than `step`. Leaf entries are
/// stepped additively as in [`finite_diff_grad`].
pub fn finite_diff_log_grad(net: &EinsumNetwork, x: ArrayView2<f64>, entry: Entry, step: f64) -> f64 {
    let plus = mean_log_likelihood(&perturbed(net, entry, step, Step::Log), x);
    let minus = mean_log_likelihood(&perturbed(net, entry, -step, Step::Log), x);
    (plus - minus) / (2.0 * step)
}

/// Reverse pass over the scalar circuit.
#[derive(Clone, Debug)]
pub struct ScalarBackward {
    /// Per sum node, per child: accumulated `w · ∂log P/∂w`.
    pub sum_stats: HashMap<usize, Vec<f64>>,
    /// `D x K x R`.
    pub acc_p: Array3<f64>,
}

/// Accumulates expected statistics over `x` node by node.
pub fn scalar_backward(sc: &ScalarCircuit, x: ArrayView2<f64>) -> ScalarBackward {
    let marg = vec![false; sc.d_vars];
    let mut out = ScalarBackward {
        sum_stats: HashMap::new(),
        acc_p: Array3::zeros((sc.d_vars, sc.k, sc.replica)),
    };
    for row in x.outer_iter() {
        let xs = row.to_vec();
        let vals = sc.node_values(&xs, &marg);
        let ll = sc.root_value(&vals);
        if !ll.is_finite() {
            continue;
        }
        let mut grad = vec![0.0; sc.nodes.len()];
        for &r in &sc.roots {
            grad[r] += (vals[r] - ll).exp() / sc.roots.len() as f64;
        }
        for id in (0..sc.nodes.len()).rev() {
            let g = grad[id];
            if g == 0.0 {
                continue;
            }
            match &sc.nodes[id] {
                ScalarNode::Leaf { vars, k, replica, .. } => {
                    for &d in vars {
                        out.acc_p[[d, *k, *replica]] += g;
                    }
                }
                ScalarNode::Product { left, right } => {
                    grad[*left] += g;
                    grad[*right] += g;
                }
                ScalarNode::Sum { children, weights } => {
                    let stats = out.sum_stats.entry(id).or_insert_with(|| vec![0.0; children.len()]);
                    for (slot, (&c, &w)) in children.iter().zip(weights).enumerate() {
                        let share = g * w * (vals[c] - vals[id]).exp();
                        stats[slot] += share;
                        grad[c] += share;
                    }
                }
            }
        }
    }
    out
}

/// A random network with a matching input batch.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub net: EinsumNetwork,
    pub x: Array2<f64>,
}

/// Bounds for [`random_fixture`].
#[derive(Clone, Copy, Debug)]
pub struct FixtureSpec {
    pub max_vars: usize,
    pub max_k: usize,
    pub max_depth: usize,
    pub batch: usize,
    /// `None` alternates between Gaussian and categorical leaves by seed.
    pub family: Option<ExpFamily>,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            max_vars: 8,
            max_k: 5,
            max_depth: 3,
            batch: 6,
            family: None,
        }
    }
}

/// Seeded random structure, parameters and inputs.
///
/// Roughly one fixture in four uses a small image structure; the rest are
/// random binary trees with up to three replica. `K_root` is occasionally 2.
pub fn random_fixture(seed: u64, spec: &FixtureSpec) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let family = spec.family.unwrap_or(if seed.is_multiple_of(2) {
        ExpFamily::Gaussian
    } else {
        ExpFamily::Categorical {
            num_states: rng.random_range(2..=4),
        }
    });
    let graph = if rng.random_bool(0.25) && spec.max_vars >= 4 {
        let shapes: Vec<(usize, usize)> = [(1, 4), (2, 2), (2, 3), (1, 6), (2, 4)]
            .into_iter()
            .filter(|&(h, w)| h * w <= spec.max_vars)
            .collect();
        let (h, w) = shapes[rng.random_range(0..shapes.len())];
        let delta = if rng.random_bool(0.5) { vec![1] } else { vec![1, 2] };
        let axes = [SplitAxes::Vertical, SplitAxes::Horizontal, SplitAxes::Both][rng.random_range(0..3)];
        let axes = if h == 1 { SplitAxes::Vertical } else { axes };
        poon_domingos(
            h,
            w,
            &StructureConfig::Pd {
                height: h,
                width: w,
                delta,
                axes,
            },
        )
        .expect("valid image structure")
    } else {
        let d_vars = rng.random_range(2..=spec.max_vars);
        let max_depth = (usize::BITS - 1 - d_vars.leading_zeros()) as usize;
        let depth = rng.random_range(1..=max_depth.min(spec.max_depth));
        random_binary_tree(
            d_vars,
            &StructureConfig::Rat {
                depth,
                replica: rng.random_range(1..=3),
                seed: rng.random(),
            },
        )
        .expect("valid tree structure")
    };
    let k = rng.random_range(1..=spec.max_k);
    let k_root = if rng.random_bool(0.2) { 2 } else { 1 };
    let d_vars = graph.d_vars;
    let opts = InitOptions {
        ranges: Some(vec![(-1.0, 1.0); d_vars]),
        leaf_projection: LeafProjection::default(),
        ..InitOptions::default()
    };
    let net = EinsumNetwork::random(graph, k, k_root, family, &opts, rng.random()).expect("compiles");
    let x = Array2::from_shape_fn((spec.batch, d_vars), |_| match family {
        ExpFamily::Gaussian => rng.random_range(-2.0..2.0),
        ExpFamily::Categorical { num_states } => rng.random_range(0..num_states) as f64,
        ExpFamily::Binomial { n_trials } => rng.random_range(0..=n_trials) as f64,
    });
    Fixture { net, x }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structures::random_binary_tree;

    fn small(k: usize, family: ExpFamily) -> EinsumNetwork {
        let rg = random_binary_tree(
            4,
            &StructureConfig::Rat {
                depth: 1,
                replica: 1,
                seed: 3,
            },
        )
        .unwrap();
        EinsumNetwork::random(rg, k, 1, family, &InitOptions::default(), 5).unwrap()
    }

    #[test]
    fn k_one_node_counts_match_graph() {
        let net = small(1, ExpFamily::Gaussian);
        let sc = expand(&net);
        assert_eq!(sc.num_leaves(), net.graph.leaf_regions().len());
        assert_eq!(sc.num_products(), net.graph.partitions.len());
        assert_eq!(sc.num_sums(), net.graph.regions.len() - net.graph.leaf_regions().len());
    }

    #[test]
    fn k_three_einsum_row_has_nine_products_per_output() {
        let net = small(3, ExpFamily::Gaussian);
        let sc = expand(&net);
        assert_eq!(sc.roots.len(), 1);
        assert_eq!(sc.num_products(), 9);
        let ScalarNode::Sum { children, weights } = &sc.nodes[sc.roots[0]] else {
            panic!()
        };
        assert_eq!(children.len(), 9);
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_masked_is_zero() {
        let f = random_fixture(2, &FixtureSpec::default());
        let sc = expand(&f.net);
        let v = sc.eval(&f.x.row(0).to_vec(), &vec![true; sc.d_vars]);
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn single_leaf_chain_matches_family_density() {
        let rg = random_binary_tree(
            2,
            &StructureConfig::Rat {
                depth: 1,
                replica: 1,
                seed: 0,
            },
        )
        .unwrap();
        let net = EinsumNetwork::random(rg, 1, 1, ExpFamily::Gaussian, &InitOptions::default(), 1).unwrap();
        let sc = expand(&net);
        let x = [0.3, -0.7];
        let expected: f64 = (0..2)
            .map(|d| {
                let phi = net.params.leaves.slice(s![d, 0, 0, ..]).to_vec();
                ExpFamily::Gaussian.log_prob(&phi, x[d])
            })
            .sum();
        assert!((sc.eval(&x, &[false, false]) - expected).abs() < 1e-12);
    }

    #[test]
    fn evaluation_orders_agree() {
        for seed in 0..20 {
            let f = random_fixture(seed, &FixtureSpec::default());
            let sc = expand(&f.net);
            let marg = vec![false; sc.d_vars];
            for row in f.x.outer_iter() {
                let x = row.to_vec();
                let a = sc.eval(&x, &marg);
                let b = sc.eval_recursive(&x, &marg);
                let c = sc.eval_linear(&x, &marg);
                assert!((a - b).abs() <= 1e-12, "seed {seed}: {a} vs {b}");
                assert!((a - c).abs() <= 1e-9, "seed {seed}: {a} vs {c}");
            }
        }
    }

    #[test]
    fn exhaustive_marginal_basics() {
        let spec = FixtureSpec {
            family: Some(ExpFamily::Categorical { num_states: 2 }),
            ..FixtureSpec::default()
        };
        let f = random_fixture(11, &spec);
        let sc = expand(&f.net);
        let full: Vec<Option<f64>> = f.x.row(0).iter().map(|&v| Some(v)).collect();
        let direct = sc.eval(&f.x.row(0).to_vec(), &vec![false; sc.d_vars]);
        assert_eq!(exhaustive_marginal(&sc, &full).unwrap(), direct);
        let none = vec![None; sc.d_vars];
        assert!(exhaustive_marginal(&sc, &none).unwrap().abs() < 1e-9);
    }

    #[test]
    fn continuous_marginal_is_unsupported() {
        let sc = expand(&small(2, ExpFamily::Gaussian));
        assert_eq!(
            exhaustive_marginal(&sc, &[None, Some(0.0), Some(0.0), Some(0.0)]),
            Err(OracleError::Continuous(0))
        );
    }

    #[test]
    fn central_difference_is_second_order() {
        let f = random_fixture(4, &FixtureSpec::default());
        let entry = Entry::LeafShift { row: 0, k: 0 };
        let reference = finite_diff_grad(&f.net, f.x.view(), entry, 1e-5);
        let coarse = (finite_diff_grad(&f.net, f.x.view(), entry, 0.2) - reference).abs();
        let half = (finite_diff_grad(&f.net, f.x.view(), entry, 0.1) - reference).abs();
        let ratio = coarse / half;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn log_step_scales_gradient_by_weight() {
        let f = random_fixture(2, &FixtureSpec::default());
        let (li, w) = f
            .net
            .params
            .layers
            .iter()
            .enumerate()
            .find_map(|(li, l)| match l {
                LayerWeights::Einsum(w) => Some((li, w)),
                _ => None,
            })
            .unwrap();
        let ((row, k, i, j), &wv) = w.indexed_iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        let entry = Entry::Einsum {
            layer: li,
            row,
            k,
            i,
            j,
        };
        let additive = finite_diff_grad(&f.net, f.x.view(), entry, 1e-6);
        let log = finite_diff_log_grad(&f.net, f.x.view(), entry, 1e-5);
        assert!(
            (log - wv * additive).abs() <= 1e-6 * log.abs().max(1e-3),
            "{log} vs {}",
            wv * additive
        );
        let leaf = Entry::LeafShift { row: 0, k: 0 };
        assert_eq!(
            finite_diff_log_grad(&f.net, f.x.view(), leaf, 1e-5),
            finite_diff_grad(&f.net, f.x.view(), leaf, 1e-5)
        );
    }
}
