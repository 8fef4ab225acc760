//! Core calibration machinery: excess risks, exact calibration functions via
//! pairwise QPs, the piecewise-linear lower bound with exact inner
//! maximization over v, closed-form tree bounds, consistency-level
//! estimates, and the sample-complexity calculator.

use crate::curve::{CalibrationCurve, CurveMeta, CurveValue};
use crate::losses::{LossMatrix, TreeSpec};
use crate::matrixcore::{DenseMatrix, DenseVector};
use crate::qpsolve::{
    dorn_dual_value, solve_qp, solve_qp_assume_feasible, QPProblem, QPStatus,
};
use crate::subspaces::{pair_projection_sqnorm, PairDelta, ScoreSubspace, SubspaceKind};
use crate::{Error, Result};
use rayon::prelude::*;

pub use crate::curve::convex_minorant;

/// Values of the exact curve below this threshold are reported as exact
/// zeros; keeps QP noise out of zero-exit detection.
const ZERO_CLAMP: f64 = 1e-9;

/// Which pairs (i, j) participate in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairPolicy {
    All,
    Sampled { n: usize, seed: u64 },
}

/// Which ground-truth labelings participate in the consistency search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelPolicy {
    Exhaustive,
    Sampled { n: usize, seed: u64 },
}

/// Mode of the inner maximization over v in the lower bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VMode {
    Optimal,
    FixedOne,
}

// ---------------------------------------------------------------------------
// Excess risks
// ---------------------------------------------------------------------------

fn check_simplex(q: &DenseVector) -> Result<()> {
    if q.min() < -1e-12 || (q.sum() - 1.0).abs() > 1e-10 {
        return Err(Error::Invalid("q must lie in the probability simplex".into()));
    }
    Ok(())
}

/// Excess of the conditional surrogate risk, `(1/2k)‖Fθ + P_𝓕 L q‖²`.
pub fn excess_surrogate(
    s: &ScoreSubspace,
    l: &LossMatrix,
    theta: &DenseVector,
    q: &DenseVector,
) -> Result<f64> {
    if theta.len() != s.d() || q.len() != l.m() || s.k() != l.k() {
        return Err(Error::Dimension("excess_surrogate: incompatible shapes".into()));
    }
    check_simplex(q)?;
    let plq = s.projector.apply(&(&l.l * q))?;
    let r = &s.f * theta + plq;
    Ok(r.norm_squared() / (2.0 * l.k() as f64))
}

/// Minimizer of the conditional surrogate risk over the subspace
/// coordinates, `θ*(q) = −(FᵀF)⁺ Fᵀ L q`.
pub fn theta_star(s: &ScoreSubspace, l: &LossMatrix, q: &DenseVector) -> DenseVector {
    -(&s.projector.gram_pinv * (s.f.transpose() * (&l.l * q)))
}

/// Prediction from a score vector: argmax with first-index tie-breaking.
pub fn predict(f: &DenseVector) -> usize {
    let mut best = 0usize;
    for i in 1..f.len() {
        if f[i] > f[best] {
            best = i;
        }
    }
    best + 1
}

/// Excess of the conditional task risk, `(Lq)_pred(f) − min_c (Lq)_c`.
pub fn excess_task(l: &LossMatrix, f: &DenseVector, q: &DenseVector) -> Result<f64> {
    if f.len() != l.k() || q.len() != l.m() {
        return Err(Error::Dimension("excess_task: incompatible shapes".into()));
    }
    check_simplex(q)?;
    let lq = &l.l * q;
    Ok(lq[predict(f) - 1] - lq.min())
}

// ---------------------------------------------------------------------------
// ξ envelopes and the lower bound
// ---------------------------------------------------------------------------

/// Upper envelope of `ξ(v) = max_y |a_y v − b_y|` for v ≥ 0, stored as
/// segments `(v_start, slope, intercept)` in increasing `v_start` order.
#[derive(Debug, Clone)]
struct XiEnvelope {
    segments: Vec<(f64, f64, f64)>,
}

impl XiEnvelope {
    /// Build from the `(slope, intercept)` description of the lines
    /// `a_y v − b_y`; the envelope covers both signs of each line.
    fn build(lines: &[(f64, f64)]) -> Self {
        // Candidate lines (slope, offset) meaning slope·v + offset.
        let mut cand: Vec<(f64, f64)> = Vec::with_capacity(2 * lines.len());
        for &(a, b) in lines {
            cand.push((a, -b));
            cand.push((-a, b));
        }
        cand.sort_by(|x, y| x.partial_cmp(y).unwrap());
        // For equal slopes only the largest offset can touch the envelope.
        cand.dedup_by(|next, prev| {
            if next.0 == prev.0 {
                if next.1 > prev.1 {
                    prev.1 = next.1;
                }
                true
            } else {
                false
            }
        });
        // Upper-envelope stack over all v ∈ ℝ, then clip to v ≥ 0.
        let mut stack: Vec<(f64, f64)> = Vec::new(); // lines on the envelope
        let mut starts: Vec<f64> = Vec::new(); // v where each line takes over
        for &(s, o) in &cand {
            loop {
                match stack.last() {
                    None => {
                        starts.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&(ps, po)) => {
                        // Intersection with the current top line.
                        let v = (o - po) / (ps - s);
                        if v <= *starts.last().unwrap() {
                            stack.pop();
                            starts.pop();
                        } else {
                            starts.push(v);
                            break;
                        }
                    }
                }
            }
            stack.push((s, o));
        }
        // Clip to v ≥ 0.
        let mut segments = Vec::new();
        for (idx, &(s, o)) in stack.iter().enumerate() {
            let v0 = starts[idx];
            let v1 = starts.get(idx + 1).copied().unwrap_or(f64::INFINITY);
            if v1 <= 0.0 {
                continue;
            }
            segments.push((v0.max(0.0), s, o));
        }
        XiEnvelope { segments }
    }

    fn eval(&self, v: f64) -> f64 {
        let mut seg = &self.segments[0];
        for s in &self.segments {
            if s.0 <= v {
                seg = s;
            } else {
                break;
            }
        }
        (seg.1 * v + seg.2).max(0.0)
    }

    /// Limiting slope of ξ as v → ∞.
    fn final_slope(&self) -> f64 {
        self.segments.last().map(|s| s.1).unwrap_or(0.0)
    }

    /// `sup_{v ≥ 0} (ε v − ξ(v))₊`; `None` encodes +∞ (ε exceeds the
    /// limiting slope so the supremum diverges).
    fn sup_gain(&self, eps: f64) -> Option<f64> {
        if eps > self.final_slope() {
            return None;
        }
        let mut best = (0.0f64).max(-self.eval(0.0));
        for seg in &self.segments {
            let v = seg.0;
            if v > 0.0 && v.is_finite() {
                best = best.max(eps * v - self.eval(v));
            }
        }
        Some(best.max(0.0))
    }

    /// The value of v attaining [`sup_gain`]; 1.0 when the supremum is flat.
    fn argmax_gain(&self, eps: f64) -> f64 {
        let mut best = 0.0;
        let mut best_v = 0.0;
        for seg in &self.segments {
            let v = seg.0;
            if v > 0.0 && v.is_finite() {
                let g = eps * v - self.eval(v);
                if g > best {
                    best = g;
                    best_v = v;
                }
            }
        }
        best_v
    }

    /// `inf_{v > 0} ξ(v)/v`: attained at an envelope breakpoint or as the
    /// limiting slope.
    fn inf_ratio(&self) -> f64 {
        let mut best = self.final_slope();
        for seg in &self.segments {
            let v = seg.0;
            if v > 0.0 && v.is_finite() {
                best = best.min(self.eval(v) / v);
            }
        }
        best.max(0.0)
    }
}

/// Per-pair data of the lower bound: the denominator `w = 2k‖P_𝓕Δ_ij‖²`
/// and the lines `(slope_y, intercept_y)` with
/// `ξ_ij(v) = max_y |slope_y·v − intercept_y|`.
#[derive(Debug, Clone)]
pub struct PairBoundTerm {
    pub i: usize,
    pub j: usize,
    pub w: f64,
    pub xi_lines: Vec<(f64, f64)>,
    envelope: XiEnvelope,
}

/// Shared per-instance context: the QP quadratic term and the projected
/// loss matrix, computed once and reused across all pairs and grid points.
pub struct CalibContext {
    pub k: usize,
    pub m: usize,
    pub d: usize,
    /// `P_𝓕 L` (k×m).
    pub pl: DenseMatrix,
    /// Quadratic term of the pair QP over (θ, q): Gram of [F | P_𝓕L] / k.
    h: DenseMatrix,
}

impl CalibContext {
    pub fn new(s: &ScoreSubspace, l: &LossMatrix) -> Result<Self> {
        if s.k() != l.k() {
            return Err(Error::Dimension(format!(
                "subspace has {} rows but loss has {} outputs",
                s.k(),
                l.k()
            )));
        }
        let pl = s.projector.apply_matrix(&l.l)?;
        let (k, m, d) = (l.k(), l.m(), s.d());
        let mut basis = DenseMatrix::zeros(k, d + m);
        basis.view_mut((0, 0), (k, d)).copy_from(&s.f);
        basis.view_mut((0, d), (k, m)).copy_from(&pl);
        let h = basis.transpose() * &basis / k as f64;
        Ok(CalibContext { k, m, d, pl, h })
    }
}

/// Build the bound term for one ordered pair.
pub fn pair_bound_term(
    s: &ScoreSubspace,
    l: &LossMatrix,
    ctx: &CalibContext,
    pair: PairDelta,
) -> Result<PairBoundTerm> {
    let (i, j) = (pair.i, pair.j);
    let w = 2.0 * ctx.k as f64 * pair_projection_sqnorm(s, pair)?;
    let mut xi_lines = Vec::with_capacity(ctx.m);
    for y in 0..ctx.m {
        let a = l.l[(i - 1, y)] - l.l[(j - 1, y)];
        let b = ctx.pl[(i - 1, y)] - ctx.pl[(j - 1, y)];
        xi_lines.push((a, b));
    }
    let envelope = XiEnvelope::build(&xi_lines);
    Ok(PairBoundTerm { i, j, w, xi_lines, envelope })
}

/// `ξ_ij(v) = ‖Lᵀ(vI − P_𝓕)Δ_ij‖∞`.
pub fn xi_ij(s: &ScoreSubspace, l: &LossMatrix, i: usize, j: usize, v: f64) -> Result<f64> {
    if v < 0.0 {
        return Err(Error::Invalid("v must be non-negative".into()));
    }
    let ctx = CalibContext::new(s, l)?;
    let term = pair_bound_term(s, l, &ctx, PairDelta::new(i, j)?)?;
    Ok(term.xi(v))
}

impl PairBoundTerm {
    /// Evaluate ξ at a given v.
    pub fn xi(&self, v: f64) -> f64 {
        self.envelope.eval(v)
    }

    /// Value of this pair's bound term at ε under a v-mode, applying the
    /// conventions: numerator and denominator both zero → 0, denominator
    /// zero alone → +∞ (pair excluded from the outer min).
    pub fn value(&self, eps: f64, v_mode: VMode) -> CurveValue {
        let num = match v_mode {
            VMode::Optimal => self.envelope.sup_gain(eps),
            VMode::FixedOne => Some((eps - self.xi(1.0)).max(0.0)),
        };
        match num {
            None => CurveValue::Infinite,
            Some(g) => {
                if self.w <= 1e-12 {
                    if g <= 0.0 {
                        CurveValue::Finite(0.0)
                    } else {
                        CurveValue::Infinite
                    }
                } else {
                    CurveValue::Finite(g * g / self.w)
                }
            }
        }
    }

    /// The v attaining the optimal-mode numerator (1.0 in consistent cases
    /// where the gain is linear in v with slope 0 beyond the kink).
    pub fn optimal_v(&self, eps: f64) -> f64 {
        self.envelope.argmax_gain(eps)
    }

    /// Zero-exit threshold of this pair, `inf_{v>0} ξ(v)/v`.
    pub fn zero_exit_threshold(&self) -> f64 {
        self.envelope.inf_ratio()
    }
}

/// All ordered pairs, or a seeded uniform sample of them.
pub fn select_pairs(k: usize, policy: PairPolicy) -> Vec<PairDelta> {
    match policy {
        PairPolicy::All => {
            let mut pairs = Vec::with_capacity(k * (k - 1));
            for i in 1..=k {
                for j in 1..=k {
                    if i != j {
                        pairs.push(PairDelta { i, j });
                    }
                }
            }
            pairs
        }
        PairPolicy::Sampled { n, seed } => {
            use rand::SeedableRng;
            let total = k * (k - 1);
            let n = n.min(total);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, total, n).into_vec();
            idx.sort_unstable();
            idx.into_iter()
                .map(|t| {
                    let i = t / (k - 1);
                    let off = t % (k - 1);
                    let j = if off >= i { off + 1 } else { off };
                    PairDelta { i: i + 1, j: j + 1 }
                })
                .collect()
        }
    }
}

/// Lower bound of the calibration function at one ε: minimum of the pair
/// terms over ordered pairs.
pub fn lower_bound_at(
    s: &ScoreSubspace,
    l: &LossMatrix,
    eps: f64,
    v_mode: VMode,
) -> Result<CurveValue> {
    let curve = lower_bound_curve(s, l, &[eps], v_mode)?;
    Ok(curve.points[0].1)
}

/// Lower-bound curve over a grid; pair envelopes are built once and
/// evaluated at every grid point.
pub fn lower_bound_curve(
    s: &ScoreSubspace,
    l: &LossMatrix,
    eps_grid: &[f64],
    v_mode: VMode,
) -> Result<CalibrationCurve> {
    let ctx = CalibContext::new(s, l)?;
    let pairs = select_pairs(ctx.k, PairPolicy::All);
    let terms: Vec<PairBoundTerm> = pairs
        .into_par_iter()
        .map(|p| pair_bound_term(s, l, &ctx, p))
        .collect::<Result<_>>()?;
    let mut points = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let mut best = CurveValue::Infinite;
        for t in &terms {
            best = best.min(t.value(eps, v_mode));
        }
        if let CurveValue::Finite(v) = best {
            if v < ZERO_CLAMP {
                best = CurveValue::Finite(0.0);
            }
        }
        points.push((eps, best));
    }
    finalize_curve(points, match v_mode {
        VMode::Optimal => CurveMeta::BoundVopt,
        VMode::FixedOne => CurveMeta::BoundV1,
    })
}

/// Enforce the container invariants on raw sweep output: clamp tiny values,
/// force 0 at ε = 0, and apply a running maximum.
fn finalize_curve(
    mut points: Vec<(f64, CurveValue)>,
    meta: CurveMeta,
) -> Result<CalibrationCurve> {
    if let Some(first) = points.first_mut() {
        if first.0 == 0.0 {
            first.1 = CurveValue::Finite(0.0);
        }
    }
    let mut run = CurveValue::Finite(0.0);
    for p in &mut points {
        if let CurveValue::Finite(v) = p.1 {
            if v < ZERO_CLAMP {
                p.1 = CurveValue::Finite(0.0);
            }
        }
        run = if run.le(&p.1) { p.1 } else { run };
        p.1 = run;
    }
    CalibrationCurve::new(points, meta)
}

// ---------------------------------------------------------------------------
// Exact calibration via pairwise QPs
// ---------------------------------------------------------------------------

/// Inequality rows forcing output j to be an argmax of the scores.  For
/// structured subspaces the k−1 generic rows collapse to an equivalent
/// smaller set (same feasible set, so the QP optimum is unchanged).
fn argmax_rows(s: &ScoreSubspace, j: usize) -> Vec<DenseVector> {
    let d = s.d();
    match s.kind {
        SubspaceKind::MapSort => {
            // (F_sort θ) is maximized by row σ iff θ is sorted consistently
            // with σ (rearrangement inequality): r−1 adjacent-rank rows.
            let r = d;
            // σ_j as positions of items; invert to items by rank.
            let mut by_rank = vec![0usize; r];
            for p in 0..r {
                let pos = pos_of(s, j, p);
                by_rank[pos - 1] = p;
            }
            (0..r - 1)
                .map(|t| {
                    let mut row = DenseVector::zeros(d);
                    row[by_rank[t]] = 1.0;
                    row[by_rank[t + 1]] = -1.0;
                    row
                })
                .collect()
        }
        SubspaceKind::TreeBlock(_) => {
            // Scores are per-block constants: the block of j must dominate.
            let bj = (0..d)
                .find(|&b| s.f[(j - 1, b)] == 1.0)
                .expect("leaf must belong to a block");
            (0..d)
                .filter(|&b| b != bj)
                .map(|b| {
                    let mut row = DenseVector::zeros(d);
                    row[bj] = 1.0;
                    row[b] = -1.0;
                    row
                })
                .collect()
        }
        _ => {
            let k = s.k();
            let fj = s.f.row(j - 1);
            (1..=k)
                .filter(|&c| c != j)
                .map(|c| (fj - s.f.row(c - 1)).transpose())
                .collect()
        }
    }
}

/// Position of item p (0-based) in the ranking of row j of the sort basis:
/// the entry is 1/position.
fn pos_of(s: &ScoreSubspace, j: usize, p: usize) -> usize {
    (1.0 / s.f[(j - 1, p)]).round() as usize
}

/// Per-pair machinery for the exact curve: the QP constraint system with
/// the ε entry left variable, and the largest feasible ε.
struct PairProgram {
    qp: QPProblem,
    eps_max: f64,
    /// Feasible q from the ε_max computation; used to start the IPM.
    q_start: DenseVector,
}

/// Largest achievable task-excess for the pair:
/// `max (Lq)_j − (Lq)_i  s.t.  (Lq)_i ≤ (Lq)_c, q ∈ simplex`.
/// `None` when even that LP is infeasible (i is never loss-minimal).
fn pair_eps_max(l: &LossMatrix, i: usize, j: usize) -> Result<Option<(f64, DenseVector)>> {
    let m = l.m();
    let k = l.k();
    let li = l.l.row(i - 1);
    let obj_row = (l.l.row(j - 1) - li).transpose();
    let rows: Vec<DenseVector> = (1..=k)
        .filter(|&c| c != i)
        .map(|c| (l.l.row(c - 1) - li).transpose())
        .collect();
    let mut a = DenseMatrix::zeros(rows.len(), m);
    for (ri, row) in rows.iter().enumerate() {
        a.row_mut(ri).copy_from(&row.transpose());
    }
    let p = QPProblem {
        h: DenseMatrix::zeros(m, m),
        c: -obj_row,
        a_ineq: a,
        b_ineq: DenseVector::zeros(rows.len()),
        a_eq: DenseMatrix::from_element(1, m, 1.0),
        b_eq: DenseVector::from_element(1, 1.0),
        nonneg_mask: vec![true; m],
    };
    let sol = solve_qp(&p)?;
    match sol.status {
        QPStatus::Optimal => Ok(Some((-sol.objective, sol.x))),
        _ => Ok(None),
    }
}

fn build_pair_program(
    s: &ScoreSubspace,
    l: &LossMatrix,
    ctx: &CalibContext,
    pair: PairDelta,
) -> Result<Option<PairProgram>> {
    let (i, j) = (pair.i, pair.j);
    let Some((eps_max, q_start)) = pair_eps_max(l, i, j)? else {
        return Ok(None);
    };
    let (d, m, k) = (ctx.d, ctx.m, ctx.k);
    let n = d + m;
    let theta_rows = argmax_rows(s, j);
    let li = l.l.row(i - 1);
    let n_rows = 1 + (k - 1) + theta_rows.len();
    let mut a = DenseMatrix::zeros(n_rows, n);
    // Row 0: (Lq)_j − (Lq)_i ≥ ε (the ε entry is set per grid point).
    a.view_mut((0, d), (1, m)).copy_from(&(l.l.row(j - 1) - li));
    let mut r = 1;
    for c in 1..=k {
        if c == i {
            continue;
        }
        a.view_mut((r, d), (1, m)).copy_from(&(l.l.row(c - 1) - li));
        r += 1;
    }
    for row in &theta_rows {
        a.view_mut((r, 0), (1, d)).copy_from(&row.transpose());
        r += 1;
    }
    let b = DenseVector::zeros(n_rows);
    let mut a_eq = DenseMatrix::zeros(1, n);
    for y in 0..m {
        a_eq[(0, d + y)] = 1.0;
    }
    let mut nonneg = vec![false; n];
    for flag in nonneg.iter_mut().skip(d) {
        *flag = true;
    }
    let qp = QPProblem {
        h: ctx.h.clone(),
        c: DenseVector::zeros(n),
        a_ineq: a,
        b_ineq: b,
        a_eq,
        b_eq: DenseVector::from_element(1, 1.0),
        nonneg_mask: nonneg,
    };
    Ok(Some(PairProgram { qp, eps_max, q_start }))
}

impl PairProgram {
    /// Solve the pair QP at one ε; +∞ beyond the feasible range.
    fn solve_at(&mut self, eps: f64) -> Result<CurveValue> {
        if eps > self.eps_max + 1e-9 {
            return Ok(CurveValue::Infinite);
        }
        let eps_eff = eps.min(self.eps_max);
        self.qp.b_ineq[0] = eps_eff;
        let d = self.qp.n() - self.q_start.len();
        let mut start = DenseVector::zeros(self.qp.n());
        start.rows_mut(d, self.q_start.len()).copy_from(&self.q_start);
        let attempt = solve_qp_assume_feasible(&self.qp, Some(&start));
        let sol = match attempt {
            Ok(sol) => sol,
            Err(_) if eps_eff > 1e-9 => {
                // Degenerate boundary (often a singleton feasible set at
                // ε_max): back off by a negligible amount and retry.
                self.qp.b_ineq[0] = eps_eff - 1e-9 * eps_eff.max(1.0);
                solve_qp_assume_feasible(&self.qp, Some(&start))?
            }
            Err(e) => return Err(e),
        };
        Ok(CurveValue::Finite(sol.objective.max(0.0)))
    }
}

/// Optimal value of the pairwise calibration QP at one ε, or +∞ when the
/// pair cannot realize task excess ε.
pub fn pair_calibration(
    s: &ScoreSubspace,
    l: &LossMatrix,
    i: usize,
    j: usize,
    eps: f64,
) -> Result<CurveValue> {
    if eps < 0.0 {
        return Err(Error::Invalid("eps must be non-negative".into()));
    }
    let ctx = CalibContext::new(s, l)?;
    match build_pair_program(s, l, &ctx, PairDelta::new(i, j)?)? {
        None => Ok(CurveValue::Infinite),
        Some(mut prog) => prog.solve_at(eps),
    }
}

/// Exact calibration curve: pointwise minimum of the pair QP values over
/// the selected pairs.  Pair tasks run in parallel; the min-reduction is
/// order-independent, so results do not depend on the worker count.
pub fn calibration_curve(
    s: &ScoreSubspace,
    l: &LossMatrix,
    eps_grid: &[f64],
    pair_policy: PairPolicy,
) -> Result<CalibrationCurve> {
    if eps_grid.is_empty() || eps_grid[0] < 0.0 {
        return Err(Error::Invalid("eps grid must be non-empty and start at ≥ 0".into()));
    }
    let ctx = CalibContext::new(s, l)?;
    let pairs = select_pairs(ctx.k, pair_policy);
    let per_pair: Vec<Vec<CurveValue>> = pairs
        .into_par_iter()
        .map(|pair| -> Result<Vec<CurveValue>> {
            match build_pair_program(s, l, &ctx, pair)? {
                None => Ok(vec![CurveValue::Infinite; eps_grid.len()]),
                Some(mut prog) => {
                    eps_grid.iter().map(|&e| prog.solve_at(e)).collect()
                }
            }
        })
        .collect::<Result<_>>()?;
    let mut values = vec![CurveValue::Infinite; eps_grid.len()];
    for col in &per_pair {
        for (v, &pv) in values.iter_mut().zip(col) {
            *v = v.min(pv);
        }
    }
    let points = eps_grid.iter().cloned().zip(values).collect();
    finalize_curve(points, CurveMeta::ExactQp)
}

// ---------------------------------------------------------------------------
// Closed-form tree bound
// ---------------------------------------------------------------------------

/// Closed-form lower bound for the tree loss at consistency depth t.
///
/// Same-block pairs force the bound to zero up to the maximal within-block
/// distance `D̄_t` and are excluded beyond it; each cross-block pair at
/// distance `d` contributes `((d−Ā_t)²/(d−D̄_t/2)²)·(ε−D̄_t/2)₊²/(4b_t)`
/// while ε ≤ d and is excluded afterwards.  The reported value minimizes
/// over the admissible cross-block distance levels, which reduces to the
/// minimal cross-block distance whenever `Ā_t ≥ D̄_t/2`.
pub fn tree_bound_closed(spec: &TreeSpec, t: usize, eps: f64) -> Result<CurveValue> {
    spec.validate()?;
    let depth = spec.depth();
    if t < 1 || t > depth {
        return Err(Error::Invalid(format!("depth must be in 1..={depth}, got {t}")));
    }
    if eps < 0.0 {
        return Err(Error::Invalid("eps must be non-negative".into()));
    }
    // 0-based levels t..D−1 are inside a block.
    let d_bar: f64 = spec.weights[t..].iter().sum();
    let mut a_bar = 0.0;
    let mut prod = 1.0f64;
    for s in t..depth {
        prod *= spec.children[s] as f64;
        a_bar += spec.weights[s] * (prod - 1.0) / prod;
    }
    if a_bar < d_bar / 2.0 - 1e-12 {
        log::warn!(
            "average within-block distance {a_bar} below half the maximal {d_bar}; \
             the minimum over distance levels still yields a valid bound"
        );
    }
    let b_t: f64 = spec.children[..t].iter().product::<usize>() as f64;
    if eps <= d_bar {
        return Ok(CurveValue::Finite(0.0));
    }
    // Cross-block distance levels, smallest first.
    let mut best: Option<f64> = None;
    for lvl in (0..t).rev() {
        let dist: f64 = spec.weights[lvl..].iter().sum();
        if dist + 1e-12 < eps {
            continue; // pair infeasible at this ε, excluded
        }
        let phi = (dist - a_bar).powi(2) / (dist - d_bar / 2.0).powi(2);
        let gain = (eps - d_bar / 2.0).max(0.0);
        let val = phi * gain * gain / (4.0 * b_t);
        best = Some(best.map_or(val, |b: f64| b.min(val)));
    }
    Ok(best.map(CurveValue::Finite).unwrap_or(CurveValue::Infinite))
}

// ---------------------------------------------------------------------------
// Consistency reports
// ---------------------------------------------------------------------------

/// Certified consistency-level estimates with a witnessing labeling.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ConsistencyReport {
    pub eta_lower: f64,
    pub eta_upper: f64,
    pub witness: Witness,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Witness {
    pub label: String,
    pub predicted: String,
    pub optimal: String,
}

/// Lower/upper estimates of the consistency level.
///
/// `eta_lower` maximizes the task excess of the surrogate-optimal score at
/// point-mass distributions; it certifies that the calibration function is
/// zero up to this value because the corresponding excess surrogate is
/// exactly zero.  `eta_upper` is the zero-exit point of the lower bound,
/// `max_{i≠j} inf_{v>0} ξ_ij(v)/v`, beyond which the bound is positive.
pub fn consistency_report(
    s: &ScoreSubspace,
    l: &LossMatrix,
    label_policy: LabelPolicy,
) -> Result<ConsistencyReport> {
    let ctx = CalibContext::new(s, l)?;
    let labels: Vec<usize> = match label_policy {
        LabelPolicy::Exhaustive => (0..ctx.m).collect(),
        LabelPolicy::Sampled { n, seed } => {
            use rand::SeedableRng;
            let n = n.min(ctx.m);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, ctx.m, n).into_vec();
            idx.sort_unstable();
            idx
        }
    };
    let mut eta_lower = 0.0;
    let mut witness = Witness {
        label: String::new(),
        predicted: String::new(),
        optimal: String::new(),
    };
    // Certified levels: for any q the score θ*(q) has zero excess surrogate,
    // so its task excess is a level at which the calibration function is
    // still zero.  Search point masses and two-labeling mixtures.
    let k = ctx.k;
    let eval_mix = |a: usize, b: usize, lam: f64| -> (f64, usize, usize) {
        let mut pred = 0usize;
        let mut best_f = f64::NEG_INFINITY;
        for c in 0..k {
            let f = -(lam * ctx.pl[(c, a)] + (1.0 - lam) * ctx.pl[(c, b)]);
            if f > best_f {
                best_f = f;
                pred = c;
            }
        }
        let mut opt = 0usize;
        let mut min_l = f64::INFINITY;
        let mut pred_l = 0.0;
        for c in 0..k {
            let v = lam * l.l[(c, a)] + (1.0 - lam) * l.l[(c, b)];
            if v < min_l {
                min_l = v;
                opt = c;
            }
            if c == pred {
                pred_l = v;
            }
        }
        (pred_l - min_l, pred, opt)
    };
    let coarse: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let best_mix = labels
        .par_iter()
        .map(|&a| {
            let mut best = (eval_mix(a, a, 1.0).0, a, a, 1.0f64);
            for &b in &labels {
                if b <= a {
                    continue;
                }
                for &lam in &coarse {
                    let (ex, _, _) = eval_mix(a, b, lam);
                    if ex > best.0 {
                        best = (ex, a, b, lam);
                    }
                }
            }
            best
        })
        .reduce(|| (0.0, 0, 0, 1.0), |x, y| if y.0 > x.0 { y } else { x });
    let (mut best_ex, a, b, mut best_lam) = best_mix;
    // Refine λ locally around the coarse optimum.
    for step in 1..=2 {
        let width = 10f64.powi(-2 * step);
        let center = best_lam;
        for i in -100..=100i64 {
            let lam = (center + i as f64 * width / 100.0).clamp(0.0, 1.0);
            let (ex, _, _) = eval_mix(a, b, lam);
            if ex > best_ex {
                best_ex = ex;
                best_lam = lam;
            }
        }
    }
    if best_ex > eta_lower {
        eta_lower = best_ex;
        let (_, pred, opt) = eval_mix(a, b, best_lam);
        let label = if best_lam >= 1.0 {
            l.gt_labels[a].clone()
        } else if best_lam <= 0.0 {
            l.gt_labels[b].clone()
        } else {
            format!(
                "{:.6}*{} + {:.6}*{}",
                best_lam,
                l.gt_labels[a],
                1.0 - best_lam,
                l.gt_labels[b]
            )
        };
        witness = Witness {
            label,
            predicted: l.output_labels[pred].clone(),
            optimal: l.output_labels[opt].clone(),
        };
    }
    // ξ is symmetric in (i, j), so unordered pairs suffice.
    let pairs: Vec<(usize, usize)> = (1..=ctx.k)
        .flat_map(|i| ((i + 1)..=ctx.k).map(move |j| (i, j)))
        .collect();
    let eta_upper = pairs
        .into_par_iter()
        .map(|(i, j)| -> Result<f64> {
            let term = pair_bound_term(s, l, &ctx, PairDelta { i, j })?;
            if term.w <= 1e-12 {
                // Excluded pair: its bound term never exits zero by the ξ
                // route; the threshold is the largest ε it can realize.
                let max_slope =
                    term.xi_lines.iter().fold(0.0f64, |m, &(a, _)| m.max(a.abs()));
                Ok(max_slope)
            } else {
                Ok(term.zero_exit_threshold())
            }
        })
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))?;
    Ok(ConsistencyReport { eta_lower, eta_upper, witness })
}

// ---------------------------------------------------------------------------
// Sample complexity
// ---------------------------------------------------------------------------

/// The optimization constant `DM = l_max²·ξ(κ√d·R·Q)` with `ξ(z) = z² + z`.
pub fn dm_constant(l_max: f64, kappa: f64, d: usize, r_const: f64, q_const: f64) -> f64 {
    let z = kappa * (d as f64).sqrt() * r_const * q_const;
    l_max * l_max * (z * z + z)
}

/// `N* = 4·DM²/δ̌(ε)²` for a user-supplied optimization constant.
pub fn sample_complexity_with_dm(
    minorant: &CalibrationCurve,
    eps: f64,
    dm: f64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::Invalid("target accuracy below consistency level".into()));
    }
    let delta = match minorant.value_at(eps) {
        CurveValue::Finite(v) if v > 0.0 => v,
        CurveValue::Finite(_) => {
            return Err(Error::Invalid("target accuracy below consistency level".into()))
        }
        CurveValue::Infinite => {
            return Err(Error::Invalid(
                "target accuracy outside the feasible range of the curve".into(),
            ))
        }
    };
    Ok(4.0 * dm * dm / (delta * delta))
}

/// Sufficient number of averaged stochastic-gradient steps for target
/// accuracy ε, from the convex minorant δ̌ of the calibration function.
#[allow(clippy::too_many_arguments)]
pub fn sample_complexity(
    minorant: &CalibrationCurve,
    eps: f64,
    l_max: f64,
    kappa: f64,
    d: usize,
    r_const: f64,
    q_const: f64,
) -> Result<f64> {
    if l_max <= 0.0 || kappa <= 0.0 || d == 0 || r_const <= 0.0 || q_const <= 0.0 {
        return Err(Error::Invalid("all constants must be positive".into()));
    }
    sample_complexity_with_dm(minorant, eps, dm_constant(l_max, kappa, d, r_const, q_const))
}


// ---------------------------------------------------------------------------
// Dual certificate checks
// ---------------------------------------------------------------------------

/// Outcome of checking the analytic dual-feasible point against the dual of
/// the relaxed pair QP.
#[derive(Debug, Clone)]
pub enum CertificateReport {
    /// The pair has `‖P_𝓕Δ‖² = 0` and is excluded by convention.
    ExcludedPair,
    Checked {
        /// Dual objective of the analytic point, divided by k.
        dual_value: f64,
        /// `(vε − ξ(v))₊²/(2k‖PΔ‖²)` at the requested v.
        bound_term: f64,
        /// Exact pair QP value at ε.
        qp_value: CurveValue,
        /// Infinity-norm residual of the dual equality constraints plus any
        /// negative part of the sign-constrained multipliers.
        feasibility_residual: f64,
    },
}

/// Build the analytic dual point of the lower-bound derivation and verify
/// it against the inversion-free dual of the relaxed pair program.
pub fn dorn_certificate_check(
    s: &ScoreSubspace,
    l: &LossMatrix,
    i: usize,
    j: usize,
    eps: f64,
    v: f64,
) -> Result<CertificateReport> {
    let pair = PairDelta::new(i, j)?;
    let ctx = CalibContext::new(s, l)?;
    let w2 = pair_projection_sqnorm(s, pair)?;
    if w2 <= 1e-12 {
        return Ok(CertificateReport::ExcludedPair);
    }
    let (k, m, d) = (ctx.k, ctx.m, ctx.d);
    let term = pair_bound_term(s, l, &ctx, pair)?;
    let xi = term.xi(v);
    let gain = (v * eps - xi).max(0.0);
    let bound_term = gain * gain / (2.0 * k as f64 * w2);

    // Relaxed pair program over x = (θ, q), without the 1/k scaling:
    // min ½‖Fθ + PLq‖²  s.t.  (Lq)_j − (Lq)_i ≥ ε, (Fθ)_j − (Fθ)_i ≥ 0,
    // 1ᵀq = 1, q ≥ 0.
    let n = d + m;
    let mut h = ctx.h.clone() * k as f64;
    // Symmetrize away accumulation noise.
    h = (&h + h.transpose()) * 0.5;
    let mut a = DenseMatrix::zeros(2, n);
    let li = l.l.row(i - 1);
    a.view_mut((0, d), (1, m)).copy_from(&(l.l.row(j - 1) - li));
    let ftheta = s.f.row(j - 1) - s.f.row(i - 1);
    a.view_mut((1, 0), (1, d)).copy_from(&ftheta);
    let mut a_eq = DenseMatrix::zeros(1, n);
    for y in 0..m {
        a_eq[(0, d + y)] = 1.0;
    }
    let mut nonneg = vec![false; n];
    for flag in nonneg.iter_mut().skip(d) {
        *flag = true;
    }
    let primal = QPProblem {
        h,
        c: DenseVector::zeros(n),
        a_ineq: a,
        b_ineq: DenseVector::from_column_slice(&[eps, 0.0]),
        a_eq,
        b_eq: DenseVector::from_element(1, 1.0),
        nonneg_mask: nonneg,
    };

    // Analytic dual point: the primal-copy is (θ̂, q̂ = 0) with
    // θ̂ = −v_F (FᵀF)⁺FᵀΔ, multipliers v_L = v·v_F for the ε row, v_F for
    // the score row, v_q = v_F(v·LᵀΔ − LᵀPΔ + ξ1) for q ≥ 0, and
    // w = −v_F·ξ(v) for the simplex equality.
    let v_f = gain / w2;
    let v_l = v * v_f;
    let mut delta = DenseVector::zeros(k);
    delta[i - 1] = 1.0;
    delta[j - 1] = -1.0;
    let theta_hat = -(&s.projector.gram_pinv * (s.f.transpose() * &delta)) * v_f;
    let mut u = DenseVector::zeros(n);
    u.rows_mut(0, d).copy_from(&theta_hat);
    let mut v_vec = DenseVector::zeros(2 + m);
    v_vec[0] = v_l;
    v_vec[1] = v_f;
    let mut min_mult = 0.0f64;
    for (y, &(a_y, b_y)) in term.xi_lines.iter().enumerate() {
        let vq = v_f * (v * a_y - b_y + xi);
        v_vec[2 + y] = vq.max(0.0);
        min_mult = min_mult.min(vq);
    }
    let w_vec = DenseVector::from_element(1, -v_f * xi);
    let (dual_value_raw, residual) = dorn_dual_value(&primal, &u, &v_vec, &w_vec);
    let feasibility_residual = residual + (-min_mult).max(0.0);
    Ok(CertificateReport::Checked {
        dual_value: dual_value_raw / k as f64,
        bound_term,
        qp_value: pair_calibration(s, l, i, j, eps)?,
        feasibility_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{map_loss_matrix, tree_loss_matrix};
    use crate::subspaces::{f_map, f_sort, tree_block_basis};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn binary_setup() -> (ScoreSubspace, LossMatrix) {
        let l = LossMatrix::new(
            DenseMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            vec!["1".into(), "2".into()],
            vec!["1".into(), "2".into()],
        )
        .unwrap();
        (ScoreSubspace::identity(2).unwrap(), l)
    }

    fn tree_setup() -> (TreeSpec, ScoreSubspace, LossMatrix) {
        let spec = TreeSpec::new(vec![2, 2], vec![0.5, 0.5]).unwrap();
        let l = tree_loss_matrix(&spec).unwrap();
        let s = tree_block_basis(&spec, 1).unwrap();
        (spec, s, l)
    }

    fn random_instance(rng: &mut impl Rng) -> (ScoreSubspace, LossMatrix) {
        let k = rng.gen_range(2..=6);
        let m = rng.gen_range(2..=6);
        let l = DenseMatrix::from_fn(k, m, |_, _| rng.gen_range(0.0..1.0));
        let loss = LossMatrix::new(
            l,
            (1..=k).map(|i| i.to_string()).collect(),
            (1..=m).map(|i| i.to_string()).collect(),
        )
        .unwrap();
        let d = rng.gen_range(1..=3.min(k));
        let f = DenseMatrix::from_fn(k, d, |_, _| rng.gen_range(-1.0..1.0));
        (ScoreSubspace::explicit(f).unwrap(), loss)
    }

    #[test]
    fn excess_surrogate_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let (s, l) = random_instance(&mut rng);
            let mut q = DenseVector::from_fn(l.m(), |_, _| rng.gen_range(0.0..1.0));
            q /= q.sum();
            let ts = theta_star(&s, &l, &q);
            assert!(excess_surrogate(&s, &l, &ts, &q).unwrap() < 1e-18);
            let theta = DenseVector::from_fn(s.d(), |_, _| rng.gen_range(-1.0..1.0));
            assert!(excess_surrogate(&s, &l, &theta, &q).unwrap() >= 0.0);
        }
    }

    #[test]
    fn excess_surrogate_grid_oracle() {
        // k = 2, d = 1: compare against Φ̄(Fθ, q) − min over a dense θ grid.
        let (s, l) = binary_setup();
        let f = DenseMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let s1 = ScoreSubspace::explicit(f).unwrap();
        let q = DenseVector::from_column_slice(&[0.7, 0.3]);
        let cond = |theta: f64| -> f64 {
            // Φ̄(f, q) = Σ_y q_y (1/2k)‖f + L(:,y)‖².
            let fv = &s1.f * DenseVector::from_element(1, theta);
            let mut acc = 0.0;
            for y in 0..2 {
                let col = l.l.column(y);
                acc += q[y] * (0..2).map(|c| (fv[c] + col[c]).powi(2)).sum::<f64>() / 4.0;
            }
            acc
        };
        let min_grid = (-2000..=2000)
            .map(|t| cond(t as f64 / 1000.0))
            .fold(f64::INFINITY, f64::min);
        for &th in &[-0.5f64, 0.0, 0.3, 1.0] {
            let direct = cond(th) - min_grid;
            let fast =
                excess_surrogate(&s1, &l, &DenseVector::from_element(1, th), &q).unwrap();
            assert!((direct - fast).abs() < 1e-5, "θ={th}: {direct} vs {fast}");
        }
        let _ = s;
    }

    #[test]
    fn excess_surrogate_consistent_case() {
        // span(L) ⊆ 𝓕 ⇒ P L = L, so the projector can be dropped.
        let (_, s, l) = tree_setup();
        let full = tree_block_basis(&TreeSpec::new(vec![2, 2], vec![0.5, 0.5]).unwrap(), 2).unwrap();
        let q = DenseVector::from_column_slice(&[0.1, 0.2, 0.3, 0.4]);
        let theta = DenseVector::from_column_slice(&[0.5, -0.2, 0.1, 0.0]);
        let lhs = excess_surrogate(&full, &l, &theta, &q).unwrap();
        let direct = (&full.f * &theta + &l.l * &q).norm_squared() / 8.0;
        assert!((lhs - direct).abs() < 1e-12);
        let _ = s;
    }

    #[test]
    fn excess_task_examples() {
        let (_, l) = binary_setup();
        let q = DenseVector::from_column_slice(&[0.8, 0.2]);
        let f = DenseVector::from_column_slice(&[0.0, 1.0]);
        assert!((excess_task(&l, &f, &q).unwrap() - 0.6).abs() < 1e-12);
        // Tie: first index wins.
        let tie = DenseVector::from_column_slice(&[0.0, 0.0]);
        assert_eq!(predict(&tie), 1);
        // f = −Lq predicts a loss minimizer.
        let f_opt = -(&l.l * &q);
        assert_eq!(excess_task(&l, &f_opt, &q).unwrap(), 0.0);
    }

    #[test]
    fn binary_pair_qp_matches_analytic() {
        let (s, l) = binary_setup();
        for eps in [0.0, 0.1, 0.25, 0.5, 0.9, 1.0] {
            let v = pair_calibration(&s, &l, 1, 2, eps).unwrap();
            let got = v.finite().expect("feasible");
            assert!((got - eps * eps / 8.0).abs() < 1e-6, "eps={eps}: {got}");
        }
        assert_eq!(pair_calibration(&s, &l, 1, 2, 1.1).unwrap(), CurveValue::Infinite);
    }

    #[test]
    fn binary_brute_force_grid() {
        // Brute force over q on a simplex grid and θ on a dense grid.
        let (s, l) = binary_setup();
        let eps = 0.4;
        let mut best = f64::INFINITY;
        for qi in 0..=200 {
            let q = DenseVector::from_column_slice(&[qi as f64 / 200.0, 1.0 - qi as f64 / 200.0]);
            let lq = &l.l * &q;
            // Pair (i=1, j=2): 1 must be optimal, 2 predicted.
            if lq[0] > lq[1] - eps + 1e-9 {
                continue;
            }
            for t1 in -40..=40 {
                for t2 in -40..=40 {
                    let f = DenseVector::from_column_slice(&[t1 as f64 / 40.0, t2 as f64 / 40.0]);
                    if f[1] < f[0] {
                        continue;
                    }
                    let e = (&f + s.projector.apply(&(&l.l * &q)).unwrap()).norm_squared() / 4.0;
                    best = best.min(e);
                }
            }
        }
        let qp = pair_calibration(&s, &l, 1, 2, eps).unwrap().finite().unwrap();
        assert!((qp - eps * eps / 8.0).abs() < 1e-6);
        assert!(best >= qp - 1e-6);
        assert!(best <= qp + 1e-3); // grid resolution
    }

    #[test]
    fn binary_curve() {
        let (s, l) = binary_setup();
        let grid: Vec<f64> = (0..=60).map(|i| i as f64 * 0.02).collect(); // up to 1.2
        let curve = calibration_curve(&s, &l, &grid, PairPolicy::All).unwrap();
        for (e, v) in &curve.points {
            if *e <= 1.0 {
                let got = v.finite().expect("finite on [0,1]");
                assert!((got - e * e / 8.0).abs() < 1e-6, "eps={e}: {got}");
            } else {
                assert_eq!(*v, CurveValue::Infinite, "eps={e}");
            }
        }
    }

    #[test]
    fn xi_examples() {
        let (_, s, l) = tree_setup();
        // Same block: ξ(v) = v·d(i,j).
        for v in [0.0, 0.5, 1.3] {
            assert!((xi_ij(&s, &l, 1, 2, v).unwrap() - v * 0.5).abs() < 1e-10);
        }
        // Consistent case at v = 1: ξ = 0.
        let spec = TreeSpec::new(vec![2, 2], vec![0.5, 0.5]).unwrap();
        let full = tree_block_basis(&spec, 2).unwrap();
        assert!(xi_ij(&full, &l, 1, 3, 1.0).unwrap() < 1e-10);
        // v = 0 reduces to ‖LᵀP𝓕Δ‖∞.
        let ctx = CalibContext::new(&s, &l).unwrap();
        let mut delta = DenseVector::zeros(4);
        delta[0] = 1.0;
        delta[2] = -1.0;
        let explicit = (l.l.transpose() * s.projector.apply(&delta).unwrap()).amax();
        assert!((xi_ij(&s, &l, 1, 3, 0.0).unwrap() - explicit).abs() < 1e-10);
        let _ = ctx;
    }

    #[test]
    fn tree_bound_examples() {
        let (spec, s, l) = tree_setup();
        // ε = 1, t = 1 → (0.75)²/8 = 0.0703125.
        let v = tree_bound_closed(&spec, 1, 1.0).unwrap().finite().unwrap();
        assert!((v - 0.0703125).abs() < 1e-12);
        let tb = lower_bound_at(&s, &l, 1.0, VMode::Optimal).unwrap().finite().unwrap();
        assert!((tb - 0.0703125).abs() < 1e-8);
        // Below the indicator threshold.
        assert_eq!(tree_bound_closed(&spec, 1, 0.4).unwrap(), CurveValue::Finite(0.0));
        // t = D → ε²/(4k).
        for eps in [0.1, 0.5, 0.9] {
            let v = tree_bound_closed(&spec, 2, eps).unwrap().finite().unwrap();
            assert!((v - eps * eps / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tree_equivalence_small() {
        // Closed form equals the explicit bound for several small trees.
        let specs = [
            TreeSpec::new(vec![2, 2], vec![0.5, 0.5]).unwrap(),
            TreeSpec::new(vec![3], vec![1.0]).unwrap(),
            TreeSpec::new(vec![2, 3], vec![0.3, 0.7]).unwrap(),
            TreeSpec::new(vec![2, 2, 2], vec![0.2, 0.3, 0.5]).unwrap(),
        ];
        for spec in &specs {
            let l = tree_loss_matrix(spec).unwrap();
            for t in 1..=spec.depth() {
                let s = tree_block_basis(spec, t).unwrap();
                for gi in 0..=20 {
                    let eps = gi as f64 / 20.0;
                    let closed = tree_bound_closed(spec, t, eps).unwrap();
                    let explicit = lower_bound_at(&s, &l, eps, VMode::Optimal).unwrap();
                    match (closed, explicit) {
                        (CurveValue::Finite(a), CurveValue::Finite(b)) => {
                            assert!(
                                (a - b).abs() < 1e-8,
                                "spec={:?} t={t} eps={eps}: {a} vs {b}",
                                spec.children
                            );
                        }
                        (a, b) => assert_eq!(a, b, "spec={:?} t={t} eps={eps}", spec.children),
                    }
                }
            }
        }
    }

    #[test]
    fn bound_dominance_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        for trial in 0..12 {
            let (s, l) = random_instance(&mut rng);
            let grid: Vec<f64> = (0..10).map(|i| i as f64 * l.l_max / 9.0).collect();
            let exact = calibration_curve(&s, &l, &grid, PairPolicy::All).unwrap();
            for v_mode in [VMode::Optimal, VMode::FixedOne] {
                let bound = lower_bound_curve(&s, &l, &grid, v_mode).unwrap();
                for ((_, bv), (e, ev)) in bound.points.iter().zip(&exact.points) {
                    match (bv, ev) {
                        (CurveValue::Finite(b), CurveValue::Finite(x)) => {
                            assert!(b <= &(x + 1e-7), "trial {trial} eps={e}: {b} > {x}")
                        }
                        (CurveValue::Infinite, CurveValue::Finite(x)) =>

                            panic!("trial {trial} eps={e}: bound ∞ but exact {x}"),
                        _ => {}
                    }
                }
                // v-optimal dominates v = 1.
                if v_mode == VMode::Optimal {
                    let b1 = lower_bound_curve(&s, &l, &grid, VMode::FixedOne).unwrap();
                    for ((_, vo), (_, v1)) in bound.points.iter().zip(&b1.points) {
                        assert!(v1.le(vo));
                    }
                }
            }
        }
    }

    #[test]
    fn consistent_reduction() {
        // span(L) ⊆ 𝓕: optimal-v bound equals v = 1 bound equals
        // min ε²/(2k‖PΔ‖²).
        let spec = TreeSpec::new(vec![2, 2], vec![0.5, 0.5]).unwrap();
        let l = tree_loss_matrix(&spec).unwrap();
        let s = tree_block_basis(&spec, 2).unwrap();
        let ctx = CalibContext::new(&s, &l).unwrap();
        for gi in 1..=10 {
            let eps = gi as f64 / 10.0;
            let vo = lower_bound_at(&s, &l, eps, VMode::Optimal).unwrap().finite().unwrap();
            let v1 = lower_bound_at(&s, &l, eps, VMode::FixedOne).unwrap().finite().unwrap();
            assert!((vo - v1).abs() < 1e-9);
            let mut direct = f64::INFINITY;
            for i in 1..=4usize {
                for j in 1..=4usize {
                    if i != j {
                        let w = 2.0 * 4.0
                            * pair_projection_sqnorm(&s, PairDelta { i, j }).unwrap();
                        direct = direct.min(eps * eps / w);
                    }
                }
            }
            assert!((vo - direct).abs() < 1e-9);
        }
        let _ = ctx;
    }

    #[test]
    fn tree_consistency_levels() {
        let (_, s, l) = tree_setup();
        let rep = consistency_report(&s, &l, LabelPolicy::Exhaustive).unwrap();
        assert!((rep.eta_lower - 0.5).abs() < 1e-12, "eta_lower {}", rep.eta_lower);
        assert!((rep.eta_upper - 0.5).abs() < 1e-12, "eta_upper {}", rep.eta_upper);
        // Consistent setting: both zero.
        let spec = TreeSpec::new(vec![2, 2], vec![0.5, 0.5]).unwrap();
        let full = tree_block_basis(&spec, 2).unwrap();
        let rep0 = consistency_report(&full, &l, LabelPolicy::Exhaustive).unwrap();
        assert_eq!(rep0.eta_lower, 0.0);
        assert!(rep0.eta_upper < 1e-10);
    }

    #[test]
    fn certificate_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(606);
        let mut checked = 0;
        for _ in 0..10 {
            let (s, l) = random_instance(&mut rng);
            let k = l.k();
            let i = rng.gen_range(1..=k);
            let mut j = rng.gen_range(1..=k);
            if j == i {
                j = if i == k { 1 } else { i + 1 };
            }
            let eps = rng.gen_range(0.01..0.3);
            let v = rng.gen_range(0.0..2.0);
            match dorn_certificate_check(&s, &l, i, j, eps, v).unwrap() {
                CertificateReport::ExcludedPair => {}
                CertificateReport::Checked {
                    dual_value,
                    bound_term,
                    qp_value,
                    feasibility_residual,
                } => {
                    checked += 1;
                    assert!(feasibility_residual < 1e-8);
                    assert!(dual_value >= bound_term - 1e-9);
                    if let CurveValue::Finite(qp) = qp_value {
                        assert!(dual_value <= qp + 1e-7, "{dual_value} vs qp {qp}");
                    }
                }
            }
        }
        assert!(checked > 0);

        // Consistent case with v = 1: certificate equals ε²/(2k‖PΔ‖²).
        let spec = TreeSpec::new(vec![2, 2], vec![0.5, 0.5]).unwrap();
        let l = tree_loss_matrix(&spec).unwrap();
        let s = tree_block_basis(&spec, 2).unwrap();
        let eps = 0.4;
        match dorn_certificate_check(&s, &l, 1, 3, eps, 1.0).unwrap() {
            CertificateReport::Checked { dual_value, .. } => {
                let w = 2.0 * 4.0 * pair_projection_sqnorm(&s, PairDelta::new(1, 3).unwrap()).unwrap();
                assert!((dual_value - eps * eps / w).abs() < 1e-10);
            }
            _ => panic!("pair should not be excluded"),
        }

        // w = 0 pair is excluded.
        let s1 = tree_block_basis(&spec, 1).unwrap();
        assert!(matches!(
            dorn_certificate_check(&s1, &l, 1, 2, 0.1, 1.0).unwrap(),
            CertificateReport::ExcludedPair
        ));
    }

    #[test]
    fn sample_complexity_values() {
        // DM with unit constants: ξ(1) = 2.
        assert!((dm_constant(1.0, 1.0, 1, 1.0, 1.0) - 2.0).abs() < 1e-15);
        // Parabola ε²/8 at ε = 0.1 with DM = 1 → 4/0.00125² ≈ 2.56e6.
        let points: Vec<(f64, CurveValue)> = (0..=100)
            .map(|i| {
                let e = i as f64 / 100.0;
                (e, CurveValue::Finite(e * e / 8.0))
            })
            .collect();
        let curve = CalibrationCurve::new(points, CurveMeta::ExactQp).unwrap();
        let min = convex_minorant(&curve).unwrap();
        let n = sample_complexity_with_dm(&min, 0.1, 1.0).unwrap();
        assert!((n - 2_560_000.0).abs() < 1e-3, "{n}");
        // Monotone decreasing in ε.
        let n2 = sample_complexity_with_dm(&min, 0.2, 1.0).unwrap();
        assert!(n2 < n);
        // Guarded zero.
        assert!(sample_complexity_with_dm(&min, 0.0, 1.0).is_err());
    }

    #[test]
    fn sampled_pairs_deterministic() {
        let a = select_pairs(10, PairPolicy::Sampled { n: 20, seed: 7 });
        let b = select_pairs(10, PairPolicy::Sampled { n: 20, seed: 7 });
        assert_eq!(a, b);
        let c = select_pairs(10, PairPolicy::Sampled { n: 20, seed: 8 });
        assert_ne!(a, c);
        for p in &a {
            assert_ne!(p.i, p.j);
            assert!(p.i >= 1 && p.i <= 10 && p.j >= 1 && p.j <= 10);
        }
    }

    #[test]
    fn structured_argmax_rows_match_generic() {
        // The reduced constraint sets give the same QP values as forcing
        // the generic kind.
        let r = 3;
        let l = map_loss_matrix(r).unwrap();
        let fs = f_sort(r).unwrap();
        let generic = ScoreSubspace::explicit(fs.f.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..8 {
            let i = rng.gen_range(1..=6);
            let mut j = rng.gen_range(1..=6);
            if j == i {
                j = (i % 6) + 1;
            }
            let eps = rng.gen_range(0.0..0.5);
            let fast = pair_calibration(&fs, &l, i, j, eps).unwrap();
            let slow = pair_calibration(&generic, &l, i, j, eps).unwrap();
            match (fast, slow) {
                (CurveValue::Finite(a), CurveValue::Finite(b)) => {
                    assert!((a - b).abs() < 1e-7, "pair ({i},{j}) eps={eps}: {a} vs {b}")
                }
                (a, b) => assert_eq!(a, b),
            }
        }
        // Tree block reduction.
        let spec = TreeSpec::new(vec![2, 2], vec![0.5, 0.5]).unwrap();
        let tl = tree_loss_matrix(&spec).unwrap();
        let tb = tree_block_basis(&spec, 1).unwrap();
        let tg = ScoreSubspace::explicit(tb.f.clone()).unwrap();
        for (i, j, eps) in [(1, 3, 0.6), (2, 4, 0.8), (1, 2, 0.3)] {
            let fast = pair_calibration(&tb, &tl, i, j, eps).unwrap();
            let slow = pair_calibration(&tg, &tl, i, j, eps).unwrap();
            match (fast, slow) {
                (CurveValue::Finite(a), CurveValue::Finite(b)) => {
                    assert!((a - b).abs() < 1e-7)
                }
                (a, b) => assert_eq!(a, b),
            }
        }
        let _ = f_map(3).unwrap();
    }
}
