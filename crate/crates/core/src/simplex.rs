//! Projection of weight vectors onto the probability simplex with a floor.

/// Tolerance on `|Σw − 1|` under which an already-floored vector is left untouched.
const SUM_TOLERANCE: f64 = 1e-13;

/// Projects `w` onto `{w : Σw = 1, w_i ≥ floor}`.
///
/// Entries that would fall below `floor` after rescaling are pinned to
/// `floor`; the rest are scaled to fill the remaining mass. Vectors that
/// already satisfy the constraints (within [`SUM_TOLERANCE`]) are returned
/// bit-for-bit unchanged, which keeps repeated projection idempotent.
/// An all-zero (or non-positive) input becomes uniform.
pub fn project_with_floor(w: &mut [f64], floor: f64) {
    let n = w.len();
    if n == 0 {
        return;
    }
    let floor = floor.min(1.0 / n as f64);
    let sum: f64 = w.iter().sum();
    if w.iter().all(|&x| x >= floor) && (sum - 1.0).abs() <= SUM_TOLERANCE {
        return;
    }
    for x in w.iter_mut() {
        if x.is_nan() || *x <= 0.0 {
            *x = 0.0;
        }
    }
    if w.iter().sum::<f64>() <= 0.0 {
        w.fill(1.0 / n as f64);
        return;
    }
    let mut pinned = vec![false; n];
    let mut n_pinned = 0usize;
    let scale = loop {
        let free: f64 = w.iter().zip(&pinned).filter(|(_, &p)| !p).map(|(x, _)| x).sum();
        let scale = (1.0 - n_pinned as f64 * floor) / free;
        let mut changed = false;
        for i in 0..n {
            if !pinned[i] && w[i] * scale < floor {
                pinned[i] = true;
                n_pinned += 1;
                changed = true;
            }
        }
        if !changed {
            break scale;
        }
    };
    for (x, &p) in w.iter_mut().zip(&pinned) {
        *x = if p { floor } else { *x * scale };
    }
}

/// Projects only the entries selected by `mask`; masked-out entries become 0.
pub fn project_masked(w: &mut [f64], mask: &[bool], floor: f64) {
    let mut active: Vec<f64> = w.iter().zip(mask).filter(|(_, &m)| m).map(|(&x, _)| x).collect();
    project_with_floor(&mut active, floor);
    let mut it = active.into_iter();
    for (x, &m) in w.iter_mut().zip(mask) {
        *x = if m { it.next().unwrap() } else { 0.0 };
    }
}
