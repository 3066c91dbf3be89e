//! Flattening a region graph into an executable layered circuit.
//!
//! Every node output lives in one row of a single concatenated buffer: leaf
//! rows first, then the rows of each einsum and mixing layer in execution
//! order. Gather indices in the layer plans are global row numbers into that
//! buffer, so collecting the left/right inputs of an einsum layer is one
//! gather per side.

use serde::{Deserialize, Serialize};

use crate::error::CompileError;
use crate::structures::{PartitionId, RegionGraph, RegionId};

/// A pure node set produced by [`topological_layers`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "nodes", rename_all = "lowercase")]
pub enum NodeSet {
    Leaves(Vec<RegionId>),
    Products(Vec<PartitionId>),
    Sums(Vec<RegionId>),
}

impl NodeSet {
    pub fn len(&self) -> usize {
        match self {
            NodeSet::Leaves(v) | NodeSet::Products(v) | NodeSet::Sums(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Topologically sorted node sets, bottom (leaves) first.
///
/// Top-down breadth-first sweep: a sum enters a layer once all its parent
/// products are placed, a product once its parent sum is placed; the leaf set
/// is prepended last.
pub fn topological_layers(rg: &RegionGraph) -> Result<Vec<NodeSet>, CompileError> {
    let violations = rg.validate();
    if !violations.is_empty() {
        return Err(CompileError::Invalid(violations));
    }
    let children = rg.child_partitions();
    let parents = rg.parent_partitions();
    let n_regions = rg.regions.len();
    let is_sum: Vec<bool> = (0..n_regions).map(|r| !children[r].is_empty()).collect();
    let n_sums = is_sum.iter().filter(|&&s| s).count();
    let n_products = rg.partitions.len();

    let mut region_seen = vec![false; n_regions];
    let mut partition_seen = vec![false; n_products];
    let mut seen = 0usize;
    let mut top_down: Vec<NodeSet> = Vec::new();

    while seen < n_sums + n_products {
        let sums: Vec<RegionId> = (0..n_regions)
            .filter(|&r| is_sum[r] && !region_seen[r] && parents[r].iter().all(|&p| partition_seen[p]))
            .collect();
        for &r in &sums {
            region_seen[r] = true;
        }
        let products: Vec<PartitionId> = (0..n_products)
            .filter(|&p| !partition_seen[p] && region_seen[rg.partitions[p].parent])
            .collect();
        for &p in &products {
            partition_seen[p] = true;
        }
        if sums.is_empty() && products.is_empty() {
            return Err(CompileError::Cycle);
        }
        seen += sums.len() + products.len();
        if !sums.is_empty() {
            top_down.push(NodeSet::Sums(sums));
        }
        if !products.is_empty() {
            top_down.push(NodeSet::Products(products));
        }
    }
    let leaves: Vec<RegionId> = (0..n_regions).filter(|&r| !is_sum[r]).collect();
    top_down.push(NodeSet::Leaves(leaves));
    top_down.reverse();
    Ok(top_down)
}

/// Replica index per leaf region: leaf regions sharing a variable never share a replica.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaAssignment {
    /// `(leaf region, replica)` pairs in ascending region order.
    pub assignment: Vec<(RegionId, usize)>,
    pub num_replica: usize,
}

impl ReplicaAssignment {
    pub fn replica_of(&self, region: RegionId) -> Option<usize> {
        self.assignment
            .binary_search_by_key(&region, |&(r, _)| r)
            .ok()
            .map(|i| self.assignment[i].1)
    }
}

/// Greedy first-fit coloring of the leaf-region conflict graph (edge iff the
/// scopes intersect), visiting leaves by descending scope size, then id.
pub fn assign_replica(rg: &RegionGraph) -> ReplicaAssignment {
    let mut leaves = rg.leaf_regions();
    leaves.sort_by_key(|&r| (std::cmp::Reverse(rg.regions[r].scope.len()), r));
    // Colors already used on each variable.
    let mut used: Vec<Vec<usize>> = vec![Vec::new(); rg.d_vars];
    let mut assignment = Vec::with_capacity(leaves.len());
    let mut num_replica = 0;
    for r in leaves {
        let vars = rg.regions[r].scope.vars();
        let mut taken: Vec<usize> = vars.iter().flat_map(|&v| used[v].iter().copied()).collect();
        taken.sort_unstable();
        taken.dedup();
        let color = taken
            .iter()
            .enumerate()
            .find(|(i, &c)| *i != c)
            .map_or(taken.len(), |(i, _)| i);
        for &v in &vars {
            used[v].push(color);
        }
        num_replica = num_replica.max(color + 1);
        assignment.push((r, color));
    }
    assignment.sort_unstable();
    ReplicaAssignment {
        assignment,
        num_replica,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafLayerPlan {
    /// Leaf region behind each leaf row.
    pub regions: Vec<RegionId>,
    /// Variables of each leaf row, ascending.
    pub scopes: Vec<Vec<usize>>,
    pub replica: Vec<usize>,
}

impl LeafLayerPlan {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

/// One einsum layer: `L` rows, each a single-child sum vector over the outer
/// product of two earlier rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EinsumLayerPlan {
    /// Global row of this layer's first output.
    pub offset: usize,
    pub k_out: usize,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    /// `(region, partition)` that each row computes.
    pub owners: Vec<(RegionId, PartitionId)>,
}

impl EinsumLayerPlan {
    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }
}

/// Element-wise convex combinations of simple sums from the preceding einsum layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingLayerPlan {
    pub offset: usize,
    pub k_out: usize,
    pub regions: Vec<RegionId>,
    /// Maximal number of children among the aggregated sums.
    pub dmax: usize,
    /// `M x dmax` global source rows, row-major; padded slots hold 0.
    pub sources: Vec<usize>,
    /// `M x dmax`; `true` for real children, `false` for padding.
    pub mask: Vec<bool>,
}

impl MixingLayerPlan {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn children(&self, m: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.dmax)
            .filter(move |&c| self.mask[m * self.dmax + c])
            .map(move |c| (c, self.sources[m * self.dmax + c]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Layer {
    Einsum(EinsumLayerPlan),
    Mixing(MixingLayerPlan),
}

impl Layer {
    pub fn offset(&self) -> usize {
        match self {
            Layer::Einsum(p) => p.offset,
            Layer::Mixing(p) => p.offset,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Layer::Einsum(p) => p.len(),
            Layer::Mixing(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn k_out(&self) -> usize {
        match self {
            Layer::Einsum(p) => p.k_out,
            Layer::Mixing(p) => p.k_out,
        }
    }
}

/// Where the final output of a region is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum RegionOutput {
    Leaf {
        row: usize,
    },
    /// `layer` indexes [`LayeredCircuit::layers`]; `row` is layer-local.
    Einsum {
        layer: usize,
        row: usize,
    },
    Mixing {
        layer: usize,
        row: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayeredCircuit {
    pub d_vars: usize,
    pub k: usize,
    pub k_root: usize,
    pub leaf: LeafLayerPlan,
    pub replica: ReplicaAssignment,
    /// Einsum and mixing layers in execution order; the last computes the root.
    pub layers: Vec<Layer>,
    pub region_output: Vec<RegionOutput>,
    /// Global row holding each region's output.
    pub region_row: Vec<usize>,
    pub total_rows: usize,
    pub root: RegionId,
}

impl LayeredCircuit {
    pub fn root_row(&self) -> usize {
        self.region_row[self.root]
    }

    /// Column count of the shared row buffer.
    pub fn row_width(&self) -> usize {
        self.k.max(self.k_root)
    }

    pub fn num_einsum_layers(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Einsum(_))).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

/// Compiles a region graph with vector length `k` (and `k_root` at the root).
pub fn compile(rg: &RegionGraph, k: usize, k_root: usize) -> Result<LayeredCircuit, CompileError> {
    if k == 0 || k_root == 0 {
        return Err(CompileError::VectorLength { k, k_root });
    }
    let node_sets = topological_layers(rg)?;
    let children = rg.child_partitions();
    let replica = assign_replica(rg);
    let n_regions = rg.regions.len();

    let leaf_regions = match &node_sets[0] {
        NodeSet::Leaves(v) => v.clone(),
        _ => unreachable!("leaf set is always first"),
    };
    let mut region_row = vec![usize::MAX; n_regions];
    let mut region_output = vec![RegionOutput::Leaf { row: usize::MAX }; n_regions];
    for (row, &r) in leaf_regions.iter().enumerate() {
        region_row[r] = row;
        region_output[r] = RegionOutput::Leaf { row };
    }
    let leaf = LeafLayerPlan {
        scopes: leaf_regions.iter().map(|&r| rg.regions[r].scope.vars()).collect(),
        replica: leaf_regions
            .iter()
            .map(|&r| replica.replica_of(r).expect("every leaf region has a replica"))
            .collect(),
        regions: leaf_regions,
    };

    let mut next_row = leaf.len();
    let mut layers = Vec::new();
    for set in &node_sets[1..] {
        let NodeSet::Sums(sums) = set else {
            // Product sets carry no computation of their own: they are exactly
            // the inputs of the following sum set.
            continue;
        };
        let k_out = if sums.contains(&rg.root) { k_root } else { k };
        let offset = next_row;
        let mut plan = EinsumLayerPlan {
            offset,
            k_out,
            left: Vec::new(),
            right: Vec::new(),
            owners: Vec::new(),
        };
        let mut multi: Vec<(RegionId, Vec<usize>)> = Vec::new();
        for &r in sums {
            let first = plan.len();
            for &p in &children[r] {
                let part = &rg.partitions[p];
                plan.left.push(region_row[part.left]);
                plan.right.push(region_row[part.right]);
                plan.owners.push((r, p));
            }
            let rows: Vec<usize> = (first..plan.len()).collect();
            if rows.len() == 1 {
                region_row[r] = offset + rows[0];
                region_output[r] = RegionOutput::Einsum {
                    layer: layers.len(),
                    row: rows[0],
                };
            } else {
                multi.push((r, rows));
            }
        }
        next_row += plan.len();
        let einsum_index = layers.len();
        layers.push(Layer::Einsum(plan));

        if !multi.is_empty() {
            let dmax = multi.iter().map(|(_, rows)| rows.len()).max().unwrap_or(0);
            let m_offset = next_row;
            let mut mix = MixingLayerPlan {
                offset: m_offset,
                k_out,
                regions: Vec::with_capacity(multi.len()),
                dmax,
                sources: vec![0; multi.len() * dmax],
                mask: vec![false; multi.len() * dmax],
            };
            for (m, (r, rows)) in multi.iter().enumerate() {
                for (c, &row) in rows.iter().enumerate() {
                    mix.sources[m * dmax + c] = offset + row;
                    mix.mask[m * dmax + c] = true;
                }
                mix.regions.push(*r);
                region_row[*r] = m_offset + m;
                region_output[*r] = RegionOutput::Mixing {
                    layer: einsum_index + 1,
                    row: m,
                };
            }
            next_row += mix.len();
            layers.push(Layer::Mixing(mix));
        }
    }

    Ok(LayeredCircuit {
        d_vars: rg.d_vars,
        k,
        k_root,
        leaf,
        replica,
        layers,
        region_output,
        region_row,
        total_rows: next_row,
        root: rg.root,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structures::{poon_domingos, random_binary_tree, Scope, SplitAxes, StructureConfig};

    fn rat(d_vars: usize, depth: usize, replica: usize) -> RegionGraph {
        random_binary_tree(
            d_vars,
            &StructureConfig::Rat {
                depth,
                replica,
                seed: 1,
            },
        )
        .unwrap()
    }

    fn pd(h: usize, w: usize, delta: Vec<usize>, axes: SplitAxes) -> RegionGraph {
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
        .unwrap()
    }

    #[test]
    fn layers_for_smallest_rat() {
        let rg = rat(2, 1, 1);
        let layers = topological_layers(&rg).unwrap();
        assert_eq!(layers.len(), 3);
        assert!(matches!(&layers[0], NodeSet::Leaves(v) if v.len() == 2));
        assert!(matches!(&layers[1], NodeSet::Products(v) if v.len() == 1));
        assert_eq!(layers[2], NodeSet::Sums(vec![rg.root]));
    }

    #[test]
    fn layers_respect_dependencies() {
        let rg = rat(4, 2, 2);
        let layers = topological_layers(&rg).unwrap();
        assert_eq!(layers.len(), 5);
        let mut region_layer = vec![usize::MAX; rg.regions.len()];
        let mut part_layer = vec![usize::MAX; rg.partitions.len()];
        for (i, set) in layers.iter().enumerate() {
            match set {
                NodeSet::Leaves(v) | NodeSet::Sums(v) => v.iter().for_each(|&r| region_layer[r] = i),
                NodeSet::Products(v) => v.iter().for_each(|&p| part_layer[p] = i),
            }
        }
        for p in &rg.partitions {
            assert!(region_layer[p.parent] > part_layer[p.id]);
            assert!(part_layer[p.id] > region_layer[p.left]);
            assert!(part_layer[p.id] > region_layer[p.right]);
        }
        assert!(layers.len() <= 2 * rg.depth() + 2);
    }

    #[test]
    fn pd_root_is_alone_in_last_layer() {
        let rg = pd(2, 2, vec![1], SplitAxes::Both);
        let layers = topological_layers(&rg).unwrap();
        assert_eq!(layers.last().unwrap(), &NodeSet::Sums(vec![rg.root]));
    }

    #[test]
    fn single_partition_regions_have_no_mixing_layer() {
        let rg = rat(8, 3, 1);
        let c = compile(&rg, 3, 1).unwrap();
        assert!(c.layers.iter().all(|l| matches!(l, Layer::Einsum(_))));
        assert_eq!(c.layers.len(), 3);
    }

    #[test]
    fn multi_partition_region_gets_mixing_row() {
        // Root with three partitions.
        let rg = rat(4, 1, 3);
        let c = compile(&rg, 2, 1).unwrap();
        assert_eq!(c.layers.len(), 2);
        let Layer::Einsum(e) = &c.layers[0] else { panic!() };
        assert_eq!(e.len(), 3);
        let Layer::Mixing(m) = &c.layers[1] else { panic!() };
        assert_eq!(m.len(), 1);
        assert!(m.dmax >= 3);
        assert_eq!(m.children(0).count(), 3);
        assert_eq!(c.root_row(), m.offset);
    }

    #[test]
    fn pd_dag_plan_is_consistent() {
        let rg = pd(4, 4, vec![2, 3], SplitAxes::Both);
        let c = compile(&rg, 2, 1).unwrap();
        let mut seen = vec![0usize; rg.partitions.len()];
        let mut padded = 0;
        for (li, l) in c.layers.iter().enumerate() {
            match l {
                Layer::Einsum(e) => {
                    for (row, &(_, p)) in e.owners.iter().enumerate() {
                        seen[p] += 1;
                        assert!(e.left[row] < e.offset && e.right[row] < e.offset);
                    }
                }
                Layer::Mixing(m) => {
                    let Layer::Einsum(prev) = &c.layers[li - 1] else {
                        panic!()
                    };
                    for i in 0..m.len() {
                        let kids: Vec<_> = m.children(i).collect();
                        assert!(kids.len() >= 2);
                        for (_, src) in kids {
                            assert!(src >= prev.offset && src < prev.offset + prev.len());
                            let (owner, _) = prev.owners[src - prev.offset];
                            assert_eq!(owner, m.regions[i]);
                        }
                        padded += m.dmax - m.children(i).count();
                    }
                }
            }
        }
        assert!(seen.iter().all(|&n| n == 1));
        assert!(padded > 0, "mixed partition counts within a layer need padding");
        assert_eq!(c.total_rows, c.layers.last().map(|l| l.offset() + l.len()).unwrap());
    }

    #[test]
    fn root_layer_uses_k_root() {
        let rg = rat(8, 2, 2);
        let c = compile(&rg, 4, 3).unwrap();
        assert_eq!(c.layers.last().unwrap().k_out(), 3);
        assert!(c.layers[..c.layers.len() - 2].iter().all(|l| l.k_out() == 4));
        assert_eq!(c.row_width(), 4);
    }

    #[test]
    fn replica_disjoint_leaves_share_one() {
        let rg = rat(2, 1, 1);
        let a = assign_replica(&rg);
        assert_eq!(a.num_replica, 1);
        assert!(a.assignment.iter().all(|&(_, r)| r == 0));
    }

    #[test]
    fn replica_count_for_rat_equals_repetitions() {
        let rg = rat(32, 3, 10);
        let a = assign_replica(&rg);
        assert_eq!(a.num_replica, 10);
        // Brute-force check of the coloring.
        let leaves = rg.leaf_regions();
        for &x in &leaves {
            for &y in &leaves {
                if x < y && rg.regions[x].scope.intersects(&rg.regions[y].scope) {
                    assert_ne!(a.replica_of(x), a.replica_of(y));
                }
            }
        }
    }

    #[test]
    fn replica_pd_strips_share() {
        let rg = pd(1, 4, vec![2], SplitAxes::Vertical);
        let a = assign_replica(&rg);
        assert_eq!(a.num_replica, 1);
    }

    #[test]
    fn compile_rejects_invalid_graph() {
        let mut rg = rat(4, 1, 1);
        rg.regions[1].scope = Scope::full(4);
        assert!(matches!(compile(&rg, 2, 1), Err(CompileError::Invalid(_))));
        assert!(matches!(
            compile(&rat(4, 1, 1), 0, 1),
            Err(CompileError::VectorLength { .. })
        ));
    }
}
