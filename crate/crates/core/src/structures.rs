//! Region graphs: the vectorized structure of a probabilistic circuit.
//!
//! A region graph is a bipartite DAG of *regions* (scoped vectors of sums or
//! leaves) and *partitions* (binary products splitting a region's scope into
//! two disjoint halves). Two generators are provided: randomized balanced
//! binary trees (RAT) and the Poon-Domingos rectangle decomposition for images.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::StructureError;

/// Set of variable indices, stored as a bitset.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Scope {
    words: Vec<u64>,
}

impl Scope {
    pub fn empty(d_vars: usize) -> Self {
        Scope {
            words: vec![0; d_vars.div_ceil(64)],
        }
    }

    pub fn full(d_vars: usize) -> Self {
        let mut s = Scope::empty(d_vars);
        for v in 0..d_vars {
            s.insert(v);
        }
        s
    }

    pub fn from_vars(d_vars: usize, vars: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Scope::empty(d_vars);
        for v in vars {
            s.insert(v);
        }
        s
    }

    pub fn insert(&mut self, v: usize) {
        let w = v / 64;
        if w >= self.words.len() {
            self.words.resize(w + 1, 0);
        }
        self.words[w] |= 1u64 << (v % 64);
    }

    pub fn contains(&self, v: usize) -> bool {
        self.words.get(v / 64).is_some_and(|w| w & (1u64 << (v % 64)) != 0)
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn intersects(&self, other: &Scope) -> bool {
        self.words.iter().zip(&other.words).any(|(a, b)| a & b != 0)
    }

    pub fn union(&self, other: &Scope) -> Scope {
        let n = self.words.len().max(other.words.len());
        let words = (0..n)
            .map(|i| self.words.get(i).unwrap_or(&0) | other.words.get(i).unwrap_or(&0))
            .collect();
        Scope { words }
    }

    /// Set equality that ignores trailing zero words.
    pub fn same_vars(&self, other: &Scope) -> bool {
        let n = self.words.len().max(other.words.len());
        (0..n).all(|i| self.words.get(i).unwrap_or(&0) == other.words.get(i).unwrap_or(&0))
    }

    /// Variable indices in ascending order.
    pub fn vars(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        for (wi, &w) in self.words.iter().enumerate() {
            let mut bits = w;
            while bits != 0 {
                let b = bits.trailing_zeros() as usize;
                out.push(wi * 64 + b);
                bits &= bits - 1;
            }
        }
        out
    }
}

impl fmt::Debug for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.vars()).finish()
    }
}

impl Serialize for Scope {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.vars().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Scope {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let vars = Vec::<usize>::deserialize(d)?;
        let d_vars = vars.iter().max().map_or(0, |m| m + 1);
        Ok(Scope::from_vars(d_vars, vars))
    }
}

pub type RegionId = usize;
pub type PartitionId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    Leaf,
    Inner,
    Root,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: RegionId,
    pub scope: Scope,
}

/// A binary product: splits `parent`'s scope into the scopes of `left` and `right`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub id: PartitionId,
    pub parent: RegionId,
    pub left: RegionId,
    pub right: RegionId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionGraph {
    pub d_vars: usize,
    pub regions: Vec<Region>,
    pub partitions: Vec<Partition>,
    pub root: RegionId,
}

/// A rule broken by a region graph, as reported by [`RegionGraph::validate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    /// Children of a partition share variables.
    Decomposability {
        partition: PartitionId,
    },
    /// The union of a partition's children differs from its parent's scope.
    Completeness {
        partition: PartitionId,
    },
    /// A partition refers to a region id that does not exist.
    DanglingReference {
        partition: PartitionId,
    },
    EmptyScope {
        region: RegionId,
    },
    RootScope,
    /// The root region has no child partition.
    LeafRoot,
    /// A non-root region without any parent partition.
    Orphan {
        region: RegionId,
    },
    Cycle {
        region: RegionId,
    },
    IdMismatch {
        index: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Decomposability { partition } => {
                write!(f, "partition {partition}: child scopes overlap (decomposability)")
            }
            Violation::Completeness { partition } => write!(
                f,
                "partition {partition}: child scopes do not cover the parent scope (completeness)"
            ),
            Violation::DanglingReference { partition } => {
                write!(f, "partition {partition}: references a missing region")
            }
            Violation::EmptyScope { region } => write!(f, "region {region}: empty scope"),
            Violation::RootScope => write!(f, "root region does not cover all variables"),
            Violation::LeafRoot => write!(f, "root region has no child partition"),
            Violation::Orphan { region } => write!(f, "region {region}: no parent partition"),
            Violation::Cycle { region } => write!(f, "region {region}: lies on a cycle"),
            Violation::IdMismatch { index } => write!(f, "node at index {index}: id mismatch"),
        }
    }
}

impl RegionGraph {
    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    /// Child partitions of every region, in partition-id order.
    pub fn child_partitions(&self) -> Vec<Vec<PartitionId>> {
        let mut out = vec![Vec::new(); self.regions.len()];
        for p in &self.partitions {
            if p.parent < out.len() {
                out[p.parent].push(p.id);
            }
        }
        out
    }

    /// Parent partitions of every region.
    pub fn parent_partitions(&self) -> Vec<Vec<PartitionId>> {
        let mut out = vec![Vec::new(); self.regions.len()];
        for p in &self.partitions {
            for c in [p.left, p.right] {
                if c < out.len() {
                    out[c].push(p.id);
                }
            }
        }
        out
    }

    pub fn kind(&self, region: RegionId) -> RegionKind {
        if region == self.root {
            RegionKind::Root
        } else if self.partitions.iter().any(|p| p.parent == region) {
            RegionKind::Inner
        } else {
            RegionKind::Leaf
        }
    }

    /// Leaf regions (regions without child partitions), ascending id.
    pub fn leaf_regions(&self) -> Vec<RegionId> {
        let children = self.child_partitions();
        (0..self.regions.len()).filter(|&r| children[r].is_empty()).collect()
    }

    /// Longest root-to-leaf path, counted in partitions.
    pub fn depth(&self) -> usize {
        let children = self.child_partitions();
        let mut memo: Vec<Option<usize>> = vec![None; self.regions.len()];
        fn go(rg: &RegionGraph, children: &[Vec<PartitionId>], memo: &mut [Option<usize>], r: RegionId) -> usize {
            if let Some(d) = memo[r] {
                return d;
            }
            let d = children[r]
                .iter()
                .map(|&p| {
                    let part = &rg.partitions[p];
                    1 + go(rg, children, memo, part.left).max(go(rg, children, memo, part.right))
                })
                .max()
                .unwrap_or(0);
            memo[r] = Some(d);
            d
        }
        go(self, &children, &mut memo, self.root)
    }

    /// Checks decomposability, completeness, scoping and acyclicity.
    /// Returns an empty list iff the graph is a valid smooth, decomposable structure.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.regions.len();
        for (i, r) in self.regions.iter().enumerate() {
            if r.id != i {
                out.push(Violation::IdMismatch { index: i });
            }
            if r.scope.is_empty() {
                out.push(Violation::EmptyScope { region: i });
            }
        }
        for (i, p) in self.partitions.iter().enumerate() {
            if p.id != i {
                out.push(Violation::IdMismatch { index: i });
            }
        }
        if self.root >= n {
            out.push(Violation::RootScope);
            return out;
        }
        if !self.regions[self.root].scope.same_vars(&Scope::full(self.d_vars)) {
            out.push(Violation::RootScope);
        }
        if !self.partitions.iter().any(|p| p.parent == self.root) {
            out.push(Violation::LeafRoot);
        }
        let mut has_parent = vec![false; n];
        for p in &self.partitions {
            if p.parent >= n || p.left >= n || p.right >= n {
                out.push(Violation::DanglingReference { partition: p.id });
                continue;
            }
            has_parent[p.left] = true;
            has_parent[p.right] = true;
            let l = &self.regions[p.left].scope;
            let r = &self.regions[p.right].scope;
            if l.intersects(r) {
                out.push(Violation::Decomposability { partition: p.id });
            }
            if !l.union(r).same_vars(&self.regions[p.parent].scope) {
                out.push(Violation::Completeness { partition: p.id });
            }
        }
        for (r, &hp) in has_parent.iter().enumerate() {
            if r != self.root && !hp {
                out.push(Violation::Orphan { region: r });
            }
        }
        if let Some(region) = self.find_cycle() {
            out.push(Violation::Cycle { region });
        }
        out
    }

    fn find_cycle(&self) -> Option<RegionId> {
        let n = self.regions.len();
        let children = self.child_partitions();
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; n];
        for start in 0..n {
            if state[start] != 0 {
                continue;
            }
            let mut stack: Vec<(RegionId, usize)> = vec![(start, 0)];
            state[start] = 1;
            while let Some(&mut (r, ref mut next)) = stack.last_mut() {
                let kids: Vec<RegionId> = children[r]
                    .iter()
                    .flat_map(|&p| {
                        let part = &self.partitions[p];
                        [part.left, part.right]
                    })
                    .filter(|&c| c < n)
                    .collect();
                if *next < kids.len() {
                    let c = kids[*next];
                    *next += 1;
                    match state[c] {
                        0 => {
                            state[c] = 1;
                            stack.push((c, 0));
                        }
                        1 => return Some(c),
                        _ => {}
                    }
                } else {
                    state[r] = 2;
                    stack.pop();
                }
            }
        }
        None
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("region graph serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        let mut rg: RegionGraph = serde_json::from_str(s)?;
        // Scopes deserialize with the minimal word count; widen them to d_vars.
        for r in &mut rg.regions {
            r.scope = Scope::from_vars(rg.d_vars, r.scope.vars());
        }
        Ok(rg)
    }
}

/// Which axis-aligned cuts the Poon-Domingos generator may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitAxes {
    /// Cuts along the width (columns), yielding left/right halves.
    Vertical,
    /// Cuts along the height (rows), yielding top/bottom halves.
    Horizontal,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StructureConfig {
    Rat {
        depth: usize,
        replica: usize,
        seed: u64,
    },
    Pd {
        height: usize,
        width: usize,
        delta: Vec<usize>,
        axes: SplitAxes,
    },
}

impl StructureConfig {
    /// Builds the region graph described by this configuration.
    pub fn build(&self, d_vars: usize) -> Result<RegionGraph, StructureError> {
        match self {
            StructureConfig::Rat { .. } => random_binary_tree(d_vars, self),
            StructureConfig::Pd { height, width, .. } => {
                if height * width != d_vars {
                    return Err(StructureError::ImageSize {
                        height: *height,
                        width: *width,
                        d_vars,
                    });
                }
                poon_domingos(*height, *width, self)
            }
        }
    }
}

/// `R` random balanced binary trees of depth `D` mixed under one root region.
pub fn random_binary_tree(d_vars: usize, cfg: &StructureConfig) -> Result<RegionGraph, StructureError> {
    let StructureConfig::Rat { depth, replica, seed } = *cfg else {
        return Err(StructureError::WrongConfig("rat"));
    };
    if depth < 1 || replica < 1 {
        return Err(StructureError::InvalidParameter(
            "RAT depth and replica must be at least 1".into(),
        ));
    }
    if depth >= usize::BITS as usize || (1usize << depth) > d_vars {
        return Err(StructureError::TooDeep { depth, d_vars });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rg = RegionGraph {
        d_vars,
        regions: vec![Region {
            id: 0,
            scope: Scope::full(d_vars),
        }],
        partitions: Vec::new(),
        root: 0,
    };

    for _ in 0..replica {
        let mut frontier = vec![(0usize, (0..d_vars).collect::<Vec<_>>())];
        for _ in 0..depth {
            let mut next = Vec::with_capacity(frontier.len() * 2);
            for (region, mut vars) in frontier {
                vars.shuffle(&mut rng);
                let cut = vars.len().div_ceil(2);
                let (lv, rv) = vars.split_at(cut);
                let (mut lv, mut rv) = (lv.to_vec(), rv.to_vec());
                lv.sort_unstable();
                rv.sort_unstable();
                let left = push_region(&mut rg, &lv);
                let right = push_region(&mut rg, &rv);
                let id = rg.partitions.len();
                rg.partitions.push(Partition {
                    id,
                    parent: region,
                    left,
                    right,
                });
                next.push((left, lv));
                next.push((right, rv));
            }
            frontier = next;
        }
    }
    Ok(rg)
}

fn push_region(rg: &mut RegionGraph, vars: &[usize]) -> RegionId {
    let id = rg.regions.len();
    rg.regions.push(Region {
        id,
        scope: Scope::from_vars(rg.d_vars, vars.iter().copied()),
    });
    id
}

/// Pixel rectangle `[top, top+height) x [left, left+width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct Rect {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
}

/// Poon-Domingos structure: recursive axis-aligned splits of an image at
/// offsets that are multiples of the step sizes in `delta`. Identical
/// rectangles are shared, so the result is a DAG.
pub fn poon_domingos(height: usize, width: usize, cfg: &StructureConfig) -> Result<RegionGraph, StructureError> {
    let StructureConfig::Pd { delta, axes, .. } = cfg else {
        return Err(StructureError::WrongConfig("pd"));
    };
    if height == 0 || width == 0 {
        return Err(StructureError::ZeroArea);
    }
    if delta.is_empty() || delta.contains(&0) {
        return Err(StructureError::InvalidParameter(
            "every PD step size must be at least 1".into(),
        ));
    }
    let d_vars = height * width;
    let mut deltas = delta.clone();
    deltas.sort_unstable();
    deltas.dedup();

    let mut rg = RegionGraph {
        d_vars,
        regions: Vec::new(),
        partitions: Vec::new(),
        root: 0,
    };
    let mut ids: HashMap<Rect, RegionId> = HashMap::new();
    let root = Rect {
        top: 0,
        left: 0,
        height,
        width,
    };
    let scope_of = |r: &Rect| {
        let mut s = Scope::empty(d_vars);
        for y in r.top..r.top + r.height {
            for x in r.left..r.left + r.width {
                s.insert(y * width + x);
            }
        }
        s
    };
    ids.insert(root, 0);
    rg.regions.push(Region {
        id: 0,
        scope: scope_of(&root),
    });

    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(rect) = queue.pop_front() {
        let parent = ids[&rect];
        for (a, b) in pd_cuts(&rect, &deltas, *axes) {
            let mut child_id = |r: Rect, rg: &mut RegionGraph, queue: &mut std::collections::VecDeque<Rect>| {
                *ids.entry(r).or_insert_with(|| {
                    let id = rg.regions.len();
                    rg.regions.push(Region {
                        id,
                        scope: scope_of(&r),
                    });
                    queue.push_back(r);
                    id
                })
            };
            let left = child_id(a, &mut rg, &mut queue);
            let right = child_id(b, &mut rg, &mut queue);
            let id = rg.partitions.len();
            rg.partitions.push(Partition {
                id,
                parent,
                left,
                right,
            });
        }
    }
    Ok(rg)
}

/// All distinct two-way cuts of `rect` at offsets that are multiples of some Δ.
fn pd_cuts(rect: &Rect, deltas: &[usize], axes: SplitAxes) -> Vec<(Rect, Rect)> {
    let offsets = |extent: usize| {
        let mut v: Vec<usize> = deltas
            .iter()
            .flat_map(|&d| (1..).map(move |m| m * d).take_while(move |&o| o < extent))
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut out = Vec::new();
    if matches!(axes, SplitAxes::Vertical | SplitAxes::Both) {
        for o in offsets(rect.width) {
            out.push((
                Rect { width: o, ..*rect },
                Rect {
                    left: rect.left + o,
                    width: rect.width - o,
                    ..*rect
                },
            ));
        }
    }
    if matches!(axes, SplitAxes::Horizontal | SplitAxes::Both) {
        for o in offsets(rect.height) {
            out.push((
                Rect { height: o, ..*rect },
                Rect {
                    top: rect.top + o,
                    height: rect.height - o,
                    ..*rect
                },
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rat(depth: usize, replica: usize, seed: u64) -> StructureConfig {
        StructureConfig::Rat { depth, replica, seed }
    }

    fn pd(delta: Vec<usize>, axes: SplitAxes) -> StructureConfig {
        StructureConfig::Pd {
            height: 0,
            width: 0,
            delta,
            axes,
        }
    }

    #[test]
    fn scope_bitset_basics() {
        let a = Scope::from_vars(130, [0, 64, 129]);
        let b = Scope::from_vars(130, [1, 129]);
        assert_eq!(a.len(), 3);
        assert!(a.contains(64) && !a.contains(63));
        assert!(a.intersects(&b));
        assert_eq!(a.union(&b).vars(), vec![0, 1, 64, 129]);
    }

    #[test]
    fn rat_two_variables() {
        let rg = random_binary_tree(2, &rat(1, 1, 0)).unwrap();
        assert_eq!(rg.regions.len(), 3);
        assert_eq!(rg.partitions.len(), 1);
        let leaves: Vec<_> = rg.leaf_regions().iter().map(|&r| rg.regions[r].scope.vars()).collect();
        assert_eq!(leaves.len(), 2);
        assert!(leaves.contains(&vec![0]) && leaves.contains(&vec![1]));
        assert!(rg.validate().is_empty());
    }

    #[test]
    fn rat_counts_at_paper_defaults() {
        let rg = random_binary_tree(512, &rat(4, 10, 3)).unwrap();
        let root_parts = rg.partitions.iter().filter(|p| p.parent == rg.root).count();
        assert_eq!(root_parts, 10);
        assert_eq!(rg.leaf_regions().len(), 160);
        assert!(rg.validate().is_empty());
        assert_eq!(rg.depth(), 4);
        for &l in &rg.leaf_regions() {
            assert_eq!(rg.regions[l].scope.len(), 32);
        }
    }

    #[test]
    fn rat_is_deterministic_and_seed_sensitive() {
        let a = random_binary_tree(20, &rat(3, 4, 11)).unwrap();
        let b = random_binary_tree(20, &rat(3, 4, 11)).unwrap();
        let c = random_binary_tree(20, &rat(3, 4, 12)).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn rat_rejects_too_deep() {
        assert!(matches!(
            random_binary_tree(3, &rat(2, 1, 0)),
            Err(StructureError::TooDeep { .. })
        ));
    }

    #[test]
    fn rat_split_sizes_are_balanced() {
        let rg = random_binary_tree(13, &rat(3, 2, 5)).unwrap();
        for p in &rg.partitions {
            let l = rg.regions[p.left].scope.len() as isize;
            let r = rg.regions[p.right].scope.len() as isize;
            assert!((l - r).abs() <= 1 && l >= r);
        }
    }

    #[test]
    fn pd_one_by_four_delta_two() {
        let rg = poon_domingos(1, 4, &pd(vec![2], SplitAxes::Vertical)).unwrap();
        let scopes: Vec<_> = rg.regions.iter().map(|r| r.scope.vars()).collect();
        assert_eq!(scopes, vec![vec![0, 1, 2, 3], vec![0, 1], vec![2, 3]]);
        assert_eq!(rg.partitions.len(), 1);
        assert_eq!(rg.leaf_regions(), vec![1, 2]);
        assert!(rg.validate().is_empty());
    }

    #[test]
    fn pd_one_by_two() {
        let rg = poon_domingos(1, 2, &pd(vec![1], SplitAxes::Both)).unwrap();
        assert_eq!(rg.regions.len(), 3);
        assert_eq!(rg.partitions.len(), 1);
    }

    /// Brute force: every sub-rectangle reachable by repeated Δ=1 cuts is
    /// every sub-rectangle of the image.
    #[test]
    fn pd_two_by_two_matches_rectangle_enumeration() {
        let rg = poon_domingos(2, 2, &pd(vec![1], SplitAxes::Both)).unwrap();
        let root_parts = rg.partitions.iter().filter(|p| p.parent == rg.root).count();
        assert_eq!(root_parts, 2);
        let mut expected = 0;
        for t in 0..2 {
            for b in t + 1..=2 {
                for l in 0..2 {
                    for r in l + 1..=2 {
                        let _ = (t, b, l, r);
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(rg.regions.len(), expected);
        assert!(rg.validate().is_empty());
    }

    #[test]
    fn pd_regions_are_rectangles_and_multi_pixel_leaves() {
        let rg = poon_domingos(4, 6, &pd(vec![2], SplitAxes::Both)).unwrap();
        assert!(rg.validate().is_empty());
        for r in &rg.regions {
            let vars = r.scope.vars();
            let ys: Vec<_> = vars.iter().map(|v| v / 6).collect();
            let xs: Vec<_> = vars.iter().map(|v| v % 6).collect();
            let (y0, y1) = (*ys.iter().min().unwrap(), *ys.iter().max().unwrap());
            let (x0, x1) = (*xs.iter().min().unwrap(), *xs.iter().max().unwrap());
            assert_eq!(vars.len(), (y1 - y0 + 1) * (x1 - x0 + 1));
        }
        assert!(rg.leaf_regions().iter().all(|&l| rg.regions[l].scope.len() >= 2));
    }

    #[test]
    fn pd_rejects_zero_area() {
        assert!(matches!(
            poon_domingos(0, 3, &pd(vec![1], SplitAxes::Both)),
            Err(StructureError::ZeroArea)
        ));
    }

    #[test]
    fn validate_reports_overlap_and_incomplete_cover() {
        let mut rg = RegionGraph {
            d_vars: 3,
            regions: vec![
                Region {
                    id: 0,
                    scope: Scope::full(3),
                },
                Region {
                    id: 1,
                    scope: Scope::from_vars(3, [0, 1]),
                },
                Region {
                    id: 2,
                    scope: Scope::from_vars(3, [1, 2]),
                },
            ],
            partitions: vec![Partition {
                id: 0,
                parent: 0,
                left: 1,
                right: 2,
            }],
            root: 0,
        };
        assert_eq!(rg.validate(), vec![Violation::Decomposability { partition: 0 }]);

        rg.regions[2].scope = Scope::from_vars(3, [2]);
        rg.regions[1].scope = Scope::from_vars(3, [0]);
        assert_eq!(rg.validate(), vec![Violation::Completeness { partition: 0 }]);
    }

    #[test]
    fn json_round_trip() {
        let rg = poon_domingos(2, 3, &pd(vec![1], SplitAxes::Vertical)).unwrap();
        let back = RegionGraph::from_json(&rg.to_json()).unwrap();
        assert_eq!(back, rg);
        let v: serde_json::Value = serde_json::from_str(&rg.to_json()).unwrap();
        assert_eq!(v["regions"][0]["scope"], serde_json::json!([0, 1, 2, 3, 4, 5]));
    }
}
