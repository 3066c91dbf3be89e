//! Batched log-domain evaluation of a layered circuit.
//!
//! All node outputs of a pass live in one `rows x batch x width` buffer (see
//! [`crate::compiler`]). Einsum layers evaluate
//! `log S[l,k] = a + a' + log Σ_ij W[l,k,i,j] exp(N[l,i] − a) exp(N'[l,j] − a')`
//! with `a`, `a'` the row maxima, as one outer product followed by a matrix
//! product against the reshaped weights. The backward pass propagates
//! responsibilities `∂log P/∂log node` top-down; multiplied with the weights
//! these are exactly the expected counts used by EM.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compiler::{Layer, RegionOutput};
use crate::error::EngineError;
use crate::expfam::{sample_index, LeafTable};
use crate::model::{EinsumNetwork, LayerWeights};

const F64_BYTES: usize = std::mem::size_of::<f64>();

/// High-water mark of tensor-buffer allocations made by a pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemoryMeter {
    current: usize,
    peak: usize,
}

impl MemoryMeter {
    fn alloc(&mut self, elems: usize) {
        self.current += elems * F64_BYTES;
        self.peak = self.peak.max(self.current);
    }

    fn free(&mut self, elems: usize) {
        self.current = self.current.saturating_sub(elems * F64_BYTES);
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak
    }
}

/// Result of a forward pass; holds every node output for a later backward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `rows x batch x width` log-densities.
    pub values: Array3<f64>,
    /// Per-sample log-likelihood (or log-marginal when variables are masked).
    pub log_likelihood: Array1<f64>,
    x: Array2<f64>,
    marg: Vec<bool>,
    root_row: usize,
    k_root: usize,
    pub meter: MemoryMeter,
}

impl ForwardPass {
    pub fn batch_size(&self) -> usize {
        self.log_likelihood.len()
    }

    /// Root output, `batch x K_root`.
    pub fn root(&self) -> ArrayView2<'_, f64> {
        self.values.slice(s![self.root_row, .., ..self.k_root])
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn marginalized(&self) -> &[bool] {
        &self.marg
    }
}

/// Accumulated expected statistics of one or more backward passes.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardStats {
    /// Per layer: `n = W ⊙ Σ_x ∂log P(x)/∂W`, shaped like the weights.
    pub layers: Vec<LayerWeights>,
    /// `Σ_x p_L(x)` per leaf component, `D x K x R`.
    pub acc_p: Array3<f64>,
    /// `Σ_x p_L(x) T(x)`, `D x K x R x |T|`.
    pub acc_pt: Array4<f64>,
    pub num_samples: usize,
    /// Sum of per-sample log-likelihoods of the passes merged in.
    pub log_likelihood_sum: f64,
    pub meter: MemoryMeter,
}

impl BackwardStats {
    pub fn zeros(net: &EinsumNetwork) -> Self {
        let layers = net
            .params
            .layers
            .iter()
            .map(|w| match w {
                LayerWeights::Einsum(w) => LayerWeights::Einsum(Array4::zeros(w.raw_dim())),
                LayerWeights::Mixing(w) => LayerWeights::Mixing(Array2::zeros(w.raw_dim())),
            })
            .collect();
        let (d, k, r, t) = net.params.leaves.dim();
        BackwardStats {
            layers,
            acc_p: Array3::zeros((d, k, r)),
            acc_pt: Array4::zeros((d, k, r, t)),
            num_samples: 0,
            log_likelihood_sum: 0.0,
            meter: MemoryMeter::default(),
        }
    }

    /// Adds `other` into `self`. Merging is associative and commutative.
    pub fn merge(&mut self, other: &BackwardStats) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (LayerWeights::Einsum(a), LayerWeights::Einsum(b)) => *a += b,
                (LayerWeights::Mixing(a), LayerWeights::Mixing(b)) => *a += b,
                _ => panic!("merging statistics of different networks"),
            }
        }
        self.acc_p += &other.acc_p;
        self.acc_pt += &other.acc_pt;
        self.num_samples += other.num_samples;
        self.log_likelihood_sum += other.log_likelihood_sum;
        self.meter.peak = self.meter.peak.max(other.meter.peak);
    }

    pub fn mean_log_likelihood(&self) -> f64 {
        self.log_likelihood_sum / self.num_samples as f64
    }
}

/// Numerically stable `log Σ_ij W[k,i,j] exp(n_i) exp(n'_j)` for one row.
///
/// `log_n` and `log_n2` are `K` log-values, `w` is `K_out x K x K`. Rows with a
/// `−∞` maximum give `−∞`.
pub fn log_einsum_exp(log_n: &[f64], log_n2: &[f64], w: &ndarray::ArrayView3<f64>) -> Vec<f64> {
    let (k_out, k, k2) = w.dim();
    assert_eq!(k, log_n.len());
    assert_eq!(k2, log_n2.len());
    let (e, a) = shifted_exp(log_n);
    let (e2, a2) = shifted_exp(log_n2);
    (0..k_out)
        .map(|kk| {
            if a == f64::NEG_INFINITY || a2 == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            let mut q = 0.0;
            for i in 0..k {
                for j in 0..k2 {
                    q += w[[kk, i, j]] * e[i] * e2[j];
                }
            }
            a + a2 + q.ln()
        })
        .collect()
}

fn shifted_exp(v: &[f64]) -> (Vec<f64>, f64) {
    let a = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if a == f64::NEG_INFINITY {
        return (vec![0.0; v.len()], a);
    }
    (v.iter().map(|x| (x - a).exp()).collect(), a)
}

fn check_inputs(net: &EinsumNetwork, x: &ArrayView2<f64>, marg: &[bool]) -> Result<(), EngineError> {
    let d = net.d_vars();
    if x.ncols() != d {
        return Err(EngineError::Shape(format!(
            "input has {} columns, model has {d} variables",
            x.ncols()
        )));
    }
    if marg.len() != d {
        return Err(EngineError::Shape(format!(
            "marginalization mask has {} entries, model has {d} variables",
            marg.len()
        )));
    }
    for row in x.outer_iter() {
        for (var, (&value, &m)) in row.iter().zip(marg).enumerate() {
            if !m && !net.family.in_support(value) {
                return Err(EngineError::OutOfSupport { var, value });
            }
        }
    }
    Ok(())
}

/// Scratch buffers of one einsum row evaluation over a batch.
struct RowScratch {
    e: Array2<f64>,
    e2: Array2<f64>,
    a: Vec<f64>,
    a2: Vec<f64>,
    outer: Array2<f64>,
    q: Array2<f64>,
}

impl RowScratch {
    fn new(batch: usize, k: usize, k_out: usize) -> Self {
        RowScratch {
            e: Array2::zeros((batch, k)),
            e2: Array2::zeros((batch, k)),
            a: vec![0.0; batch],
            a2: vec![0.0; batch],
            outer: Array2::zeros((batch, k * k)),
            q: Array2::zeros((batch, k_out)),
        }
    }

    fn elems(batch: usize, k: usize, k_out: usize) -> usize {
        batch * (2 * k + 2 + k * k + k_out)
    }

    /// Fills `e`, `a`, `outer` and `q = outer · Wᵀ` for one einsum row.
    fn contract(&mut self, left: ArrayView2<f64>, right: ArrayView2<f64>, w: ArrayView2<f64>) {
        let k = left.ncols();
        fill_shifted(&left, &mut self.e, &mut self.a);
        fill_shifted(&right, &mut self.e2, &mut self.a2);
        for ((mut o, e), e2) in self
            .outer
            .outer_iter_mut()
            .zip(self.e.outer_iter())
            .zip(self.e2.outer_iter())
        {
            let o = o.as_slice_mut().unwrap();
            for i in 0..k {
                let ei = e[i];
                let dst = &mut o[i * k..(i + 1) * k];
                for (d, &ej) in dst.iter_mut().zip(e2.iter()) {
                    *d = ei * ej;
                }
            }
        }
        general_mat_mul(1.0, &self.outer, &w.t(), 0.0, &mut self.q);
    }
}

fn fill_shifted(v: &ArrayView2<f64>, e: &mut Array2<f64>, a: &mut [f64]) {
    for ((row, mut out), a) in v.outer_iter().zip(e.outer_iter_mut()).zip(a.iter_mut()) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        *a = m;
        if m == f64::NEG_INFINITY {
            out.fill(0.0);
        } else {
            for (o, &x) in out.iter_mut().zip(row.iter()) {
                *o = (x - m).exp();
            }
        }
    }
}

/// Evaluates the network on a batch. `marg[d] = true` integrates variable `d` out.
pub fn forward(net: &EinsumNetwork, x: ArrayView2<f64>, marg: &[bool]) -> Result<ForwardPass, EngineError> {
    forward_impl(net, x, marg, None)
}

/// [`forward`] with `shift[row, k]` added to the log-value of every leaf row.
pub fn forward_shifted(
    net: &EinsumNetwork,
    x: ArrayView2<f64>,
    marg: &[bool],
    shift: &Array2<f64>,
) -> Result<ForwardPass, EngineError> {
    if shift.dim() != (net.circuit.leaf.len(), net.k()) {
        return Err(EngineError::Shape(format!(
            "leaf shift must be {} x {}",
            net.circuit.leaf.len(),
            net.k()
        )));
    }
    forward_impl(net, x, marg, Some(shift))
}

fn forward_impl(
    net: &EinsumNetwork,
    x: ArrayView2<f64>,
    marg: &[bool],
    shift: Option<&Array2<f64>>,
) -> Result<ForwardPass, EngineError> {
    check_inputs(net, &x, marg)?;
    let circuit = &net.circuit;
    let batch = x.nrows();
    let width = circuit.row_width();
    let k = circuit.k;
    let mut meter = MemoryMeter::default();
    let mut values = Array3::<f64>::zeros((circuit.total_rows, batch, width));
    meter.alloc(values.len());

    let table = LeafTable::new(net.family, &net.params.leaves);
    meter.alloc(net.params.leaves.len());
    for (row, (scope, &r)) in circuit.leaf.scopes.iter().zip(&circuit.leaf.replica).enumerate() {
        let mut out = values.index_axis_mut(Axis(0), row);
        for (b, xb) in x.outer_iter().enumerate() {
            let mut dst = out.row_mut(b);
            for &d in scope {
                if marg[d] {
                    continue;
                }
                table.add_log_probs(d, r, xb[d], dst.as_slice_mut().unwrap());
            }
        }
        if let Some(shift) = shift {
            out += &shift.row(row);
        }
        check_nan(out.view(), 0, row)?;
    }
    meter.free(net.params.leaves.len());

    for (li, (layer, weights)) in circuit.layers.iter().zip(&net.params.layers).enumerate() {
        match (layer, weights) {
            (Layer::Einsum(plan), LayerWeights::Einsum(w)) => {
                let k_out = plan.k_out;
                let mut scratch = RowScratch::new(batch, k, k_out);
                let scratch_elems = RowScratch::elems(batch, k, k_out);
                meter.alloc(scratch_elems);
                let (lower, mut upper) = values.view_mut().split_at(Axis(0), plan.offset);
                for l in 0..plan.len() {
                    let wl = w.index_axis(Axis(0), l).into_shape_with_order((k_out, k * k)).unwrap();
                    scratch.contract(
                        lower.slice(s![plan.left[l], .., ..k]),
                        lower.slice(s![plan.right[l], .., ..k]),
                        wl,
                    );
                    let mut out = upper.index_axis_mut(Axis(0), l);
                    for b in 0..batch {
                        let shift = scratch.a[b] + scratch.a2[b];
                        for kk in 0..k_out {
                            out[[b, kk]] = if shift == f64::NEG_INFINITY {
                                f64::NEG_INFINITY
                            } else {
                                shift + scratch.q[[b, kk]].ln()
                            };
                        }
                    }
                    check_nan(out.view(), li + 1, l)?;
                }
                meter.free(scratch_elems);
            }
            (Layer::Mixing(plan), LayerWeights::Mixing(w)) => {
                let k_out = plan.k_out;
                let (lower, mut upper) = values.view_mut().split_at(Axis(0), plan.offset);
                for m in 0..plan.len() {
                    let children: Vec<(usize, usize)> = plan.children(m).collect();
                    let mut out = upper.index_axis_mut(Axis(0), m);
                    for b in 0..batch {
                        for kk in 0..k_out {
                            let mx = children
                                .iter()
                                .map(|&(_, src)| lower[[src, b, kk]])
                                .fold(f64::NEG_INFINITY, f64::max);
                            out[[b, kk]] = if mx == f64::NEG_INFINITY {
                                f64::NEG_INFINITY
                            } else {
                                let s: f64 = children
                                    .iter()
                                    .map(|&(c, src)| w[[m, c]] * (lower[[src, b, kk]] - mx).exp())
                                    .sum();
                                mx + s.ln()
                            };
                        }
                    }
                    check_nan(out.view(), li + 1, m)?;
                }
            }
            _ => return Err(EngineError::Shape(format!("layer {li}: weights do not match plan"))),
        }
    }

    let root_row = circuit.root_row();
    let k_root = circuit.k_root;
    let log_likelihood = values
        .slice(s![root_row, .., ..k_root])
        .outer_iter()
        .map(|r| root_log_likelihood(r.as_slice().unwrap_or(&r.to_vec())))
        .collect();
    meter.alloc(batch);
    Ok(ForwardPass {
        values,
        log_likelihood,
        x: x.to_owned(),
        marg: marg.to_vec(),
        root_row,
        k_root,
        meter,
    })
}

/// Model density from the root vector: the entry itself when `K_root = 1`,
/// otherwise the uniform mixture of the root entries.
fn root_log_likelihood(root: &[f64]) -> f64 {
    if root.len() == 1 {
        return root[0];
    }
    log_sum_exp(root) - (root.len() as f64).ln()
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_nan(v: ArrayView2<f64>, layer: usize, row: usize) -> Result<(), EngineError> {
    if v.iter().any(|x| x.is_nan()) {
        Err(EngineError::NaN { layer, row })
    } else {
        Ok(())
    }
}

/// Reverse pass over a completed forward pass, returning expected statistics.
///
/// Samples whose log-likelihood is not finite contribute nothing.
pub fn backward(net: &EinsumNetwork, pass: &ForwardPass) -> Result<BackwardStats, EngineError> {
    let circuit = &net.circuit;
    let batch = pass.batch_size();
    let k = circuit.k;
    if pass.values.dim() != (circuit.total_rows, batch, circuit.row_width()) {
        return Err(EngineError::Shape("forward pass belongs to a different network".into()));
    }
    let mut stats = BackwardStats::zeros(net);
    let mut meter = pass.meter;
    let mut grad = Array3::<f64>::zeros(pass.values.raw_dim());
    meter.alloc(grad.len());

    let root_row = circuit.root_row();
    for b in 0..batch {
        let ll = pass.log_likelihood[b];
        if !ll.is_finite() {
            continue;
        }
        stats.log_likelihood_sum += ll;
        if circuit.k_root == 1 {
            grad[[root_row, b, 0]] = 1.0;
        } else {
            let inv = 1.0 / circuit.k_root as f64;
            for kk in 0..circuit.k_root {
                let v = pass.values[[root_row, b, kk]];
                grad[[root_row, b, kk]] = inv * (v - ll).exp();
            }
        }
    }
    stats.num_samples = batch;

    for (li, layer) in circuit.layers.iter().enumerate().rev() {
        match (layer, &net.params.layers[li], &mut stats.layers[li]) {
            (Layer::Einsum(plan), LayerWeights::Einsum(w), LayerWeights::Einsum(n)) => {
                let k_out = plan.k_out;
                let mut scratch = RowScratch::new(batch, k, k_out);
                let mut g = Array2::<f64>::zeros((batch, k_out));
                let mut d_outer = Array2::<f64>::zeros((batch, k * k));
                let mut grad_w = Array2::<f64>::zeros((k_out, k * k));
                let extra = RowScratch::elems(batch, k, k_out) + g.len() + d_outer.len() + grad_w.len();
                meter.alloc(extra);
                let (mut g_lower, g_upper) = grad.view_mut().split_at(Axis(0), plan.offset);
                let v_lower = pass.values.slice(s![..plan.offset, .., ..]);
                for l in 0..plan.len() {
                    let wl = w.index_axis(Axis(0), l).into_shape_with_order((k_out, k * k)).unwrap();
                    let resp = g_upper.slice(s![l, .., ..k_out]);
                    if resp.iter().all(|&r| r == 0.0) {
                        continue;
                    }
                    scratch.contract(
                        v_lower.slice(s![plan.left[l], .., ..k]),
                        v_lower.slice(s![plan.right[l], .., ..k]),
                        wl,
                    );
                    for b in 0..batch {
                        for kk in 0..k_out {
                            let q = scratch.q[[b, kk]];
                            let r = resp[[b, kk]];
                            g[[b, kk]] = if q > 0.0 && r != 0.0 { r / q } else { 0.0 };
                        }
                    }
                    general_mat_mul(1.0, &g.t(), &scratch.outer, 0.0, &mut grad_w);
                    let mut nl = n
                        .index_axis_mut(Axis(0), l)
                        .into_shape_with_order((k_out, k * k))
                        .unwrap();
                    ndarray::Zip::from(&mut nl)
                        .and(&grad_w)
                        .and(&wl)
                        .for_each(|n, &gw, &wv| *n += gw * wv);
                    general_mat_mul(1.0, &g, &wl, 0.0, &mut d_outer);
                    let (lrow, rrow) = (plan.left[l], plan.right[l]);
                    for b in 0..batch {
                        let dp = d_outer.row(b);
                        let dp = dp.as_slice().unwrap();
                        let e = scratch.e.row(b);
                        let e2 = scratch.e2.row(b);
                        for i in 0..k {
                            let mut acc_l = 0.0;
                            for j in 0..k {
                                acc_l += dp[i * k + j] * e2[j];
                            }
                            g_lower[[lrow, b, i]] += e[i] * acc_l;
                        }
                        for j in 0..k {
                            let mut acc_r = 0.0;
                            for i in 0..k {
                                acc_r += dp[i * k + j] * e[i];
                            }
                            g_lower[[rrow, b, j]] += e2[j] * acc_r;
                        }
                    }
                }
                meter.free(extra);
            }
            (Layer::Mixing(plan), LayerWeights::Mixing(w), LayerWeights::Mixing(n)) => {
                let k_out = plan.k_out;
                let (mut g_lower, g_upper) = grad.view_mut().split_at(Axis(0), plan.offset);
                for m in 0..plan.len() {
                    let own = plan.offset + m;
                    for (c, src) in plan.children(m) {
                        let mut total = 0.0;
                        for b in 0..batch {
                            for kk in 0..k_out {
                                let r = g_upper[[m, b, kk]];
                                let v = pass.values[[own, b, kk]];
                                if r == 0.0 || v == f64::NEG_INFINITY {
                                    continue;
                                }
                                let rc = r * w[[m, c]] * (pass.values[[src, b, kk]] - v).exp();
                                g_lower[[src, b, kk]] += rc;
                                total += rc;
                            }
                        }
                        n[[m, c]] += total;
                    }
                }
            }
            _ => return Err(EngineError::Shape(format!("layer {li}: weights do not match plan"))),
        }
    }

    let t_dim = net.family.stat_dim();
    let mut t = vec![0.0; t_dim];
    for (row, (scope, &r)) in circuit.leaf.scopes.iter().zip(&circuit.leaf.replica).enumerate() {
        for b in 0..batch {
            for &d in scope {
                if pass.marg[d] {
                    continue;
                }
                net.family.sufficient_stats(pass.x[[b, d]], &mut t);
                for kk in 0..k {
                    let p = grad[[row, b, kk]];
                    if p == 0.0 {
                        continue;
                    }
                    stats.acc_p[[d, kk, r]] += p;
                    for (ti, &tv) in t.iter().enumerate() {
                        stats.acc_pt[[d, kk, r, ti]] += p * tv;
                    }
                }
            }
        }
    }
    meter.free(grad.len());
    stats.meter = meter;
    Ok(stats)
}

/// Forward/backward pairing that rejects a backward pass without a prior forward.
pub struct Session<'a> {
    net: &'a EinsumNetwork,
    pass: Option<ForwardPass>,
}

impl<'a> Session<'a> {
    pub fn new(net: &'a EinsumNetwork) -> Self {
        Session { net, pass: None }
    }

    pub fn forward(&mut self, x: ArrayView2<f64>, marg: &[bool]) -> Result<&ForwardPass, EngineError> {
        self.pass = Some(forward(self.net, x, marg)?);
        Ok(self.pass.as_ref().unwrap())
    }

    pub fn backward(&self) -> Result<BackwardStats, EngineError> {
        let pass = self.pass.as_ref().ok_or(EngineError::BackwardBeforeForward)?;
        backward(self.net, pass)
    }
}

/// Default number of samples evaluated per pass in the chunked helpers.
pub const DEFAULT_CHUNK: usize = 512;

/// Per-sample log-likelihoods, evaluated in chunks of `chunk` rows.
pub fn log_likelihood(
    net: &EinsumNetwork,
    x: ArrayView2<f64>,
    marg: &[bool],
    chunk: usize,
) -> Result<Array1<f64>, EngineError> {
    let mut out = Vec::with_capacity(x.nrows());
    for part in x.axis_chunks_iter(Axis(0), chunk.max(1)) {
        out.extend(forward(net, part, marg)?.log_likelihood);
    }
    Ok(Array1::from(out))
}

/// Forward + backward over `x` in chunks, merging the statistics.
pub fn accumulate_stats(net: &EinsumNetwork, x: ArrayView2<f64>, chunk: usize) -> Result<BackwardStats, EngineError> {
    let marg = vec![false; net.d_vars()];
    let mut total = BackwardStats::zeros(net);
    for part in x.axis_chunks_iter(Axis(0), chunk.max(1)) {
        let pass = forward(net, part, &marg)?;
        total.merge(&backward(net, &pass)?);
    }
    Ok(total)
}

/// Role of a variable in a conditional query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarRole {
    Query,
    Evidence,
    Marginal,
}

/// `log p(x_q | x_e)` with the remaining variables integrated out, per row of `x`.
pub fn conditional_log_density(
    net: &EinsumNetwork,
    x: ArrayView2<f64>,
    roles: &[VarRole],
) -> Result<Array1<f64>, EngineError> {
    if roles.len() != net.d_vars() {
        return Err(EngineError::VariableSets(format!(
            "{} roles for {} variables",
            roles.len(),
            net.d_vars()
        )));
    }
    let numerator_mask: Vec<bool> = roles.iter().map(|&r| r == VarRole::Marginal).collect();
    let denominator_mask: Vec<bool> = roles.iter().map(|&r| r != VarRole::Evidence).collect();
    let num = log_likelihood(net, x, &numerator_mask, DEFAULT_CHUNK)?;
    let den = log_likelihood(net, x, &denominator_mask, DEFAULT_CHUNK)?;
    if den.iter().any(|&d| d == f64::NEG_INFINITY) {
        return Err(EngineError::ImpossibleEvidence);
    }
    Ok(num - den)
}

pub(crate) fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// `n` ancestral samples. Sample `i` uses RNG stream `i` of `seed`.
pub fn sample(net: &EinsumNetwork, n: usize, seed: u64) -> Array2<f64> {
    let mut out = Array2::zeros((n, net.d_vars()));
    let evidence = vec![false; net.d_vars()];
    for (i, row) in out.outer_iter_mut().enumerate() {
        let mut rng = sample_rng(seed, i);
        descend(net, None, &evidence, row, &mut rng);
    }
    out
}

/// One conditional sample per row of `x`, keeping variables with
/// `evidence[d] = true` fixed to their values in `x`.
pub fn conditional_sample_batch(
    net: &EinsumNetwork,
    x: ArrayView2<f64>,
    evidence: &[bool],
    seed: u64,
) -> Result<Array2<f64>, EngineError> {
    if evidence.len() != net.d_vars() {
        return Err(EngineError::Shape(format!(
            "evidence mask has {} entries, model has {} variables",
            evidence.len(),
            net.d_vars()
        )));
    }
    let n = x.nrows();
    if !evidence.iter().any(|&e| e) {
        return Ok(sample(net, n, seed));
    }
    let marg: Vec<bool> = evidence.iter().map(|&e| !e).collect();
    let mut out = x.to_owned();
    for (start, part) in x.axis_chunks_iter(Axis(0), DEFAULT_CHUNK).enumerate() {
        let pass = forward(net, part, &marg)?;
        if pass.log_likelihood.iter().any(|&l| l == f64::NEG_INFINITY) {
            return Err(EngineError::ImpossibleEvidence);
        }
        for b in 0..part.nrows() {
            let i = start * DEFAULT_CHUNK + b;
            let mut rng = sample_rng(seed, i);
            descend(net, Some((&pass, b)), evidence, out.row_mut(i), &mut rng);
        }
    }
    Ok(out)
}

/// `n` samples from `p(· | x_e)`.
pub fn conditional_sample(
    net: &EinsumNetwork,
    x_e: &[f64],
    evidence: &[bool],
    n: usize,
    seed: u64,
) -> Result<Array2<f64>, EngineError> {
    let x = Array2::from_shape_fn((n, x_e.len()), |(_, d)| x_e[d]);
    conditional_sample_batch(net, x.view(), evidence, seed)
}

/// Top-down ancestral descent filling `out`. With a forward pass, branch
/// choices use posterior weights given the evidence in that pass.
pub(crate) fn descend<R: Rng>(
    net: &EinsumNetwork,
    pass: Option<(&ForwardPass, usize)>,
    evidence: &[bool],
    mut out: ndarray::ArrayViewMut1<f64>,
    rng: &mut R,
) {
    let circuit = &net.circuit;
    let k = circuit.k;
    let value = |row: usize, kk: usize| pass.map_or(0.0, |(p, b)| p.values[[row, b, kk]]);

    let root_entry = if circuit.k_root == 1 {
        0
    } else {
        let root = circuit.root_row();
        let logs: Vec<f64> = (0..circuit.k_root).map(|kk| value(root, kk)).collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        sample_index(&w, rng.random())
    };

    let mut stack = vec![(circuit.root, root_entry)];
    let mut weights = vec![0.0; k * k];
    while let Some((region, kk)) = stack.pop() {
        let (layer, row) = match circuit.region_output[region] {
            RegionOutput::Leaf { row } => {
                let r = circuit.leaf.replica[row];
                for &d in &circuit.leaf.scopes[row] {
                    if !evidence[d] {
                        let phi = net.params.leaves.slice(s![d, kk, r, ..]);
                        out[d] = net.family.sample(phi.as_slice().unwrap(), rng);
                    }
                }
                continue;
            }
            RegionOutput::Einsum { layer, row } => (layer, row),
            RegionOutput::Mixing { layer, row } => {
                let (Layer::Mixing(plan), LayerWeights::Mixing(w)) =
                    (&circuit.layers[layer], &net.params.layers[layer])
                else {
                    unreachable!("mixing output points at a mixing layer");
                };
                let children: Vec<(usize, usize)> = plan.children(row).collect();
                let logs: Vec<f64> = children.iter().map(|&(_, src)| value(src, kk)).collect();
                let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let cw: Vec<f64> = children
                    .iter()
                    .zip(&logs)
                    .map(|(&(c, _), &l)| w[[row, c]] * (l - m).exp())
                    .collect();
                let pick = sample_index(&cw, rng.random());
                let src = children[pick].1;
                (layer - 1, src - circuit.layers[layer - 1].offset())
            }
        };
        let (Layer::Einsum(plan), LayerWeights::Einsum(w)) = (&circuit.layers[layer], &net.params.layers[layer]) else {
            unreachable!("sum rows live in einsum layers");
        };
        let (lr, rr) = (plan.left[row], plan.right[row]);
        let left_logs: Vec<f64> = (0..k).map(|i| value(lr, i)).collect();
        let right_logs: Vec<f64> = (0..k).map(|j| value(rr, j)).collect();
        let (el, _) = shifted_exp(&left_logs);
        let (er, _) = shifted_exp(&right_logs);
        for i in 0..k {
            for j in 0..k {
                weights[i * k + j] = w[[row, kk, i, j]] * el[i] * er[j];
            }
        }
        let idx = sample_index(&weights, rng.random());
        let (i, j) = (idx / k, idx % k);
        let part = &net.graph.partitions[plan.owners[row].1];
        stack.push((part.right, j));
        stack.push((part.left, i));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::ExpFamily;
    use crate::model::InitOptions;
    use crate::oracle::{exhaustive_marginal, expand, finite_diff_log_grad, random_fixture, Entry, FixtureSpec};
    use crate::structures::{poon_domingos, random_binary_tree, SplitAxes, StructureConfig};
    use ndarray::{array, Array3};

    fn rat_net(d: usize, depth: usize, replica: usize, k: usize, family: ExpFamily, seed: u64) -> EinsumNetwork {
        let rg = random_binary_tree(d, &StructureConfig::Rat { depth, replica, seed }).unwrap();
        EinsumNetwork::random(rg, k, 1, family, &InitOptions::default(), seed).unwrap()
    }

    #[test]
    fn log_einsum_exp_identity() {
        let w = Array3::from_elem((1, 1, 1), 1.0);
        assert_eq!(log_einsum_exp(&[0.0], &[0.0], &w.view()), vec![0.0]);
    }

    #[test]
    fn log_einsum_exp_uniform_halves() {
        let w = Array3::from_elem((2, 2, 2), 0.25);
        let h = 0.5f64.ln();
        for v in log_einsum_exp(&[h, h], &[h, h], &w.view()) {
            assert!((v - 0.25f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn log_einsum_exp_survives_underflow() {
        let w = Array3::from_elem((2, 2, 2), 0.25);
        let (n, n2) = ([-1000.0, -1001.0], [-1000.0, -1000.0]);
        let naive: f64 = (0..2)
            .flat_map(|i| (0..2).map(move |j| 0.25 * f64::exp(n[i]) * f64::exp(n2[j])))
            .sum::<f64>()
            .ln();
        assert_eq!(naive, f64::NEG_INFINITY);
        for v in log_einsum_exp(&n, &n2, &w.view()) {
            assert!((v - -2_000.379_885_493_041_7).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn log_einsum_exp_neg_infinity_row() {
        let w = Array3::from_elem((1, 2, 2), 0.25);
        let v = log_einsum_exp(&[f64::NEG_INFINITY; 2], &[0.0, 0.0], &w.view());
        assert_eq!(v, vec![f64::NEG_INFINITY]);
    }

    #[test]
    fn forward_matches_oracle_on_fixtures() {
        for seed in 0..30 {
            let f = random_fixture(seed, &FixtureSpec::default());
            let sc = expand(&f.net);
            let marg = vec![false; f.net.d_vars()];
            let pass = forward(&f.net, f.x.view(), &marg).unwrap();
            for (b, row) in f.x.outer_iter().enumerate() {
                let o = sc.eval(&row.to_vec(), &marg);
                assert!(
                    (pass.log_likelihood[b] - o).abs() <= 1e-9,
                    "seed {seed}: {} vs {o}",
                    pass.log_likelihood[b]
                );
            }
        }
    }

    #[test]
    fn fully_marginalized_forward_is_zero() {
        for seed in 0..20 {
            let f = random_fixture(seed, &FixtureSpec::default());
            let pass = forward(&f.net, f.x.view(), &vec![true; f.net.d_vars()]).unwrap();
            assert!(pass.log_likelihood.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn identical_samples_give_identical_values() {
        let net = rat_net(8, 2, 3, 4, ExpFamily::Gaussian, 1);
        let x = Array2::from_shape_fn((5, 8), |(_, d)| d as f64 * 0.1);
        let pass = forward(&net, x.view(), &[false; 8]).unwrap();
        assert!(pass
            .log_likelihood
            .iter()
            .all(|&v| v.to_bits() == pass.log_likelihood[0].to_bits()));
    }

    #[test]
    fn masked_two_pixel_leaf_row_is_zero() {
        let cfg = StructureConfig::Pd {
            height: 1,
            width: 4,
            delta: vec![2],
            axes: SplitAxes::Vertical,
        };
        let rg = poon_domingos(1, 4, &cfg).unwrap();
        let net = EinsumNetwork::random(rg, 3, 1, ExpFamily::Gaussian, &InitOptions::default(), 0).unwrap();
        let x = array![[0.1, 0.2, 0.3, 0.4]];
        let row = net.circuit.leaf.scopes.iter().position(|s| s == &vec![0, 1]).unwrap();
        let pass = forward(&net, x.view(), &[true, true, false, false]).unwrap();
        assert!(pass.values.slice(s![row, 0, ..3]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nan_weights_report_location() {
        let mut net = rat_net(4, 1, 1, 2, ExpFamily::Gaussian, 0);
        if let LayerWeights::Einsum(w) = &mut net.params.layers[0] {
            w[[0, 0, 1, 0]] = f64::NAN;
        }
        let err = forward(&net, array![[0.0, 0.0, 0.0, 0.0]].view(), &[false; 4]).unwrap_err();
        assert_eq!(err, EngineError::NaN { layer: 1, row: 0 });
    }

    #[test]
    fn out_of_support_and_shape_errors() {
        let net = rat_net(2, 1, 1, 2, ExpFamily::Categorical { num_states: 2 }, 0);
        let err = forward(&net, array![[0.0, 2.0]].view(), &[false; 2]).unwrap_err();
        assert_eq!(err, EngineError::OutOfSupport { var: 1, value: 2.0 });
        assert!(forward(&net, array![[0.0, 2.0]].view(), &[false, true]).is_ok());
        assert!(matches!(
            forward(&net, array![[0.0]].view(), &[false]),
            Err(EngineError::Shape(_))
        ));
    }

    #[test]
    fn backward_requires_forward() {
        let net = rat_net(2, 1, 1, 2, ExpFamily::Gaussian, 0);
        let mut session = Session::new(&net);
        assert_eq!(session.backward().unwrap_err(), EngineError::BackwardBeforeForward);
        session.forward(array![[0.0, 1.0]].view(), &[false, false]).unwrap();
        assert!(session.backward().is_ok());
    }

    #[test]
    fn root_statistics_are_normalized_per_sample() {
        for seed in 0..10 {
            let f = random_fixture(seed, &FixtureSpec::default());
            let stats = accumulate_stats(&f.net, f.x.view(), 4).unwrap();
            let batch = f.x.nrows() as f64;
            let root = match stats.layers.last().unwrap() {
                LayerWeights::Einsum(n) => n.sum(),
                LayerWeights::Mixing(n) => n.sum(),
            };
            assert!((root - batch).abs() < 1e-9, "seed {seed}: {root}");
            for l in &stats.layers {
                match l {
                    LayerWeights::Einsum(n) => assert!(n.iter().all(|&v| v >= 0.0)),
                    LayerWeights::Mixing(n) => assert!(n.iter().all(|&v| v >= 0.0)),
                }
            }
            assert!(stats.acc_p.iter().all(|&v| v >= 0.0));
            // Each induced tree covers variable 0 with exactly one leaf.
            let per_var: f64 = stats.acc_p.slice(s![0, .., ..]).sum();
            assert!((per_var - batch).abs() < 1e-9);
        }
    }

    #[test]
    fn chunked_statistics_match_single_pass() {
        let f = random_fixture(
            3,
            &FixtureSpec {
                batch: 9,
                ..FixtureSpec::default()
            },
        );
        let a = accumulate_stats(&f.net, f.x.view(), 9).unwrap();
        let b = accumulate_stats(&f.net, f.x.view(), 2).unwrap();
        assert!((&a.acc_p - &b.acc_p).iter().all(|v| v.abs() < 1e-12));
        assert!((a.log_likelihood_sum - b.log_likelihood_sum).abs() < 1e-12);
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        assert_eq!(ab.acc_p, ba.acc_p);
    }

    fn rel_err(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
    }

    #[test]
    fn statistics_match_finite_differences() {
        for seed in [0u64, 1, 5] {
            let f = random_fixture(seed, &FixtureSpec::default());
            let stats = accumulate_stats(&f.net, f.x.view(), 64).unwrap();
            let batch = f.x.nrows() as f64;
            for (li, (w, n)) in f.net.params.layers.iter().zip(&stats.layers).enumerate() {
                if let (LayerWeights::Einsum(w), LayerWeights::Einsum(n)) = (w, n) {
                    let (l, k_out, k, _) = w.dim();
                    let idx = (l - 1, k_out - 1, k / 2, k - 1);
                    let analytic = n[[idx.0, idx.1, idx.2, idx.3]] / batch;
                    let entry = Entry::Einsum {
                        layer: li,
                        row: idx.0,
                        k: idx.1,
                        i: idx.2,
                        j: idx.3,
                    };
                    let numeric = finite_diff_log_grad(&f.net, f.x.view(), entry, 1e-5);
                    assert!(
                        rel_err(analytic, numeric) < 1e-4,
                        "seed {seed} layer {li}: {analytic} vs {numeric}"
                    );
                }
            }
            let (d, kk) = (f.net.d_vars() - 1, f.net.k() - 1);
            let r = 0;
            let row = (0..f.net.circuit.leaf.len())
                .find(|&row| f.net.circuit.leaf.replica[row] == r && f.net.circuit.leaf.scopes[row].contains(&d))
                .unwrap();
            let analytic = stats.acc_p[[d, kk, r]] / batch;
            let numeric = finite_diff_log_grad(&f.net, f.x.view(), Entry::LeafShift { row, k: kk }, 1e-5);
            assert!(
                rel_err(analytic, numeric) < 1e-4,
                "seed {seed} leaf: {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn one_hot_weights_route_all_responsibility() {
        let mut net = rat_net(4, 1, 1, 2, ExpFamily::Gaussian, 2);
        for layer in &mut net.params.layers {
            if let LayerWeights::Einsum(w) = layer {
                w.fill(1e-12);
                w.slice_mut(s![.., .., 1, 0]).fill(1.0 - 3e-12);
            }
        }
        let x = array![[0.1, 0.5, 0.9, 0.3], [0.0, 0.2, 0.4, 0.6]];
        let stats = accumulate_stats(&net, x.view(), 8).unwrap();
        let LayerWeights::Einsum(n) = &stats.layers[0] else {
            panic!()
        };
        assert!((n[[0, 0, 1, 0]] - 2.0).abs() < 1e-9);
        let leaf_left = net.circuit.leaf.scopes[net.circuit.leaf.len() - 2][0];
        assert!(stats.acc_p[[leaf_left, 0, 0]] < 1e-9 || stats.acc_p[[leaf_left, 1, 0]] < 1e-9);
    }

    #[test]
    fn leaf_shift_moves_chain_likelihood_exactly() {
        let net = rat_net(2, 1, 1, 3, ExpFamily::Gaussian, 4);
        let x = array![[0.2, -0.4]];
        let base = forward(&net, x.view(), &[false, false]).unwrap().log_likelihood[0];
        let mut shift = Array2::zeros((2, 3));
        shift.row_mut(0).fill(1.5);
        let moved = forward_shifted(&net, x.view(), &[false, false], &shift)
            .unwrap()
            .log_likelihood[0];
        assert!((moved - base - 1.5).abs() < 1e-12);
    }

    fn binary3() -> EinsumNetwork {
        rat_net(3, 1, 2, 3, ExpFamily::Categorical { num_states: 2 }, 8)
    }

    #[test]
    fn conditional_density_matches_enumeration() {
        let net = binary3();
        let sc = expand(&net);
        let x = array![[1.0, 0.0, 1.0]];
        let roles = [VarRole::Query, VarRole::Marginal, VarRole::Evidence];
        let got = conditional_log_density(&net, x.view(), &roles).unwrap()[0];
        let num = exhaustive_marginal(&sc, &[Some(1.0), None, Some(1.0)]).unwrap();
        let den = exhaustive_marginal(&sc, &[None, None, Some(1.0)]).unwrap();
        assert!((got - (num - den)).abs() < 1e-12);

        let all_q = [VarRole::Query; 3];
        let ll = forward(&net, x.view(), &[false; 3]).unwrap().log_likelihood[0];
        assert_eq!(conditional_log_density(&net, x.view(), &all_q).unwrap()[0], ll);
    }

    #[test]
    fn impossible_evidence_is_rejected() {
        let mut net = binary3();
        net.params.leaves.slice_mut(s![2, .., .., 0]).fill(0.0);
        net.params.leaves.slice_mut(s![2, .., .., 1]).fill(1.0);
        let x = array![[1.0, 0.0, 0.0]];
        let roles = [VarRole::Query, VarRole::Marginal, VarRole::Evidence];
        assert_eq!(
            conditional_log_density(&net, x.view(), &roles).unwrap_err(),
            EngineError::ImpossibleEvidence
        );
        assert_eq!(
            conditional_sample(&net, &[0.0, 0.0, 0.0], &[false, false, true], 3, 0).unwrap_err(),
            EngineError::ImpossibleEvidence
        );
    }

    #[test]
    fn gaussian_samples_match_leaf() {
        let rg = random_binary_tree(
            2,
            &StructureConfig::Rat {
                depth: 1,
                replica: 1,
                seed: 0,
            },
        )
        .unwrap();
        let net = EinsumNetwork::random(rg, 1, 1, ExpFamily::Gaussian, &InitOptions::default(), 6).unwrap();
        let n = 20_000;
        let xs = sample(&net, n, 3);
        for d in 0..2usize {
            let phi = net.params.leaves.slice(s![d, 0, 0, ..]).to_vec();
            let (mean, var) = crate::expfam::gaussian_moments(&phi);
            let m = xs.column(d).mean().unwrap();
            assert!((m - mean).abs() < 3.0 * (var / n as f64).sqrt());
        }
        assert_eq!(xs, sample(&net, n, 3));
    }

    fn joint_tv(net: &EinsumNetwork, draws: &Array2<f64>, evidence: Option<(&[f64], &[bool])>) -> f64 {
        let d = net.d_vars();
        let sc = expand(net);
        let mut counts = vec![0usize; 1 << d];
        for row in draws.outer_iter() {
            let idx = row.iter().enumerate().fold(0, |acc, (i, &v)| acc | ((v as usize) << i));
            counts[idx] += 1;
        }
        let den = match evidence {
            Some((x_e, e)) => {
                let partial: Vec<Option<f64>> = (0..d).map(|i| e[i].then_some(x_e[i])).collect();
                exhaustive_marginal(&sc, &partial).unwrap()
            }
            None => 0.0,
        };
        let mut tv = 0.0;
        for (idx, &c) in counts.iter().enumerate() {
            let x: Vec<f64> = (0..d).map(|i| ((idx >> i) & 1) as f64).collect();
            let consistent = evidence.is_none_or(|(x_e, e)| (0..d).all(|i| !e[i] || x[i] == x_e[i]));
            let p = if consistent {
                (sc.eval(&x, &vec![false; d]) - den).exp()
            } else {
                0.0
            };
            tv += (p - c as f64 / draws.nrows() as f64).abs();
        }
        tv / 2.0
    }

    #[test]
    fn discrete_samples_match_joint() {
        let net = rat_net(2, 1, 2, 3, ExpFamily::Categorical { num_states: 2 }, 12);
        let draws = sample(&net, 100_000, 9);
        let tv = joint_tv(&net, &draws, None);
        assert!(tv < 0.02, "tv {tv}");
    }

    #[test]
    fn conditional_samples_match_conditional() {
        let net = binary3();
        let x_e = [0.0, 1.0, 0.0];
        let evidence = [false, true, false];
        let draws = conditional_sample(&net, &x_e, &evidence, 100_000, 5).unwrap();
        assert!(draws.column(1).iter().all(|&v| v == 1.0));
        let tv = joint_tv(&net, &draws, Some((&x_e, &evidence)));
        assert!(tv < 0.02, "tv {tv}");
    }

    #[test]
    fn full_evidence_is_copied() {
        let net = binary3();
        let draws = conditional_sample(&net, &[1.0, 0.0, 1.0], &[true; 3], 4, 0).unwrap();
        assert!(draws.outer_iter().all(|r| r.to_vec() == vec![1.0, 0.0, 1.0]));
    }

    #[test]
    fn one_hot_weights_sample_identical_components() {
        let mut net = rat_net(4, 1, 1, 2, ExpFamily::Gaussian, 2);
        for layer in &mut net.params.layers {
            if let LayerWeights::Einsum(w) = layer {
                w.fill(0.0);
                w.slice_mut(s![.., .., 0, 1]).fill(1.0);
            }
        }
        for d in 0..4 {
            for k in 0..2 {
                let mean = (10 * d + k) as f64;
                net.params.leaves[[d, k, 0, 0]] = mean;
                net.params.leaves[[d, k, 0, 1]] = mean * mean + 1e-12;
            }
        }
        let draws = sample(&net, 50, 1);
        let first = draws.row(0).mapv(|v| v.round());
        assert!(draws.outer_iter().all(|r| r.mapv(|v| v.round()) == first));
    }
}
