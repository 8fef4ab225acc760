//! Dense convex QP solver with equality and inequality constraints, plus the
//! inversion-free dual construction used for lower-bound certificates.
//!
//! The calibration programs are small (tens of variables, a few hundred
//! constraints) but solved by the hundred thousand, so the solver is a
//! straightforward infeasible-start Mehrotra predictor–corrector working on
//! a reduced KKT system that is refactorized once per iteration and reused
//! for the corrector step.

use crate::matrixcore::{DenseMatrix, DenseVector};
use crate::{Error, Result};
use nalgebra::LU;

/// Convergence tolerance on residuals and the complementarity measure.
const TOL: f64 = 1e-9;
/// Proximal regularization added to the KKT system only; reported objectives
/// always use the original matrices.
const REG: f64 = 1e-10;
const MAX_ITERS: usize = 200;

/// Convex QP in the form
/// `min ½ xᵀHx + cᵀx  s.t.  A_ineq x ≥ b_ineq,  A_eq x = b_eq,  x_i ≥ 0 (masked)`.
#[derive(Debug, Clone)]
pub struct QPProblem {
    pub h: DenseMatrix,
    pub c: DenseVector,
    pub a_ineq: DenseMatrix,
    pub b_ineq: DenseVector,
    pub a_eq: DenseMatrix,
    pub b_eq: DenseVector,
    pub nonneg_mask: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QPStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Farkas-type certificate of primal infeasibility: multipliers with
/// `A_ineqᵀλ + A_eqᵀν ≈ 0`, `λ ≥ 0` and `b_ineqᵀλ + b_eqᵀν > 0`.
#[derive(Debug, Clone)]
pub struct FarkasCertificate {
    pub ineq_multipliers: DenseVector,
    pub eq_multipliers: DenseVector,
    /// `b_ineqᵀλ + b_eqᵀν`, strictly positive for a valid certificate.
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct QPSolution {
    pub x: DenseVector,
    pub objective: f64,
    pub dual_objective: f64,
    pub status: QPStatus,
    pub kkt_residual: f64,
    /// Multipliers for the expanded inequality system (declared rows first,
    /// then one row per masked non-negative variable).
    pub ineq_multipliers: DenseVector,
    pub eq_multipliers: DenseVector,
    pub farkas: Option<FarkasCertificate>,
}

impl QPProblem {
    /// Problem with no constraints at all.
    pub fn unconstrained(h: DenseMatrix, c: DenseVector) -> Self {
        let n = c.len();
        QPProblem {
            h,
            c,
            a_ineq: DenseMatrix::zeros(0, n),
            b_ineq: DenseVector::zeros(0),
            a_eq: DenseMatrix::zeros(0, n),
            b_eq: DenseVector::zeros(0),
            nonneg_mask: vec![false; n],
        }
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    fn validate_shapes(&self) -> Result<()> {
        let n = self.n();
        if self.h.nrows() != n
            || self.h.ncols() != n
            || self.a_ineq.ncols() != n && self.a_ineq.nrows() > 0
            || self.a_eq.ncols() != n && self.a_eq.nrows() > 0
            || self.a_ineq.nrows() != self.b_ineq.len()
            || self.a_eq.nrows() != self.b_eq.len()
            || self.nonneg_mask.len() != n
        {
            return Err(Error::Dimension("inconsistent QP dimensions".into()));
        }
        Ok(())
    }

    /// Symmetry and positive semi-definiteness of H (tolerance 1e-10).
    fn validate_h(&self) -> Result<()> {
        let n = self.n();
        for i in 0..n {
            for j in (i + 1)..n {
                if (self.h[(i, j)] - self.h[(j, i)]).abs() > 1e-10 * (1.0 + self.h[(i, j)].abs()) {
                    return Err(Error::Invalid("H is not symmetric".into()));
                }
            }
        }
        if n > 0 {
            let eig = self.h.clone().symmetric_eigen();
            let max_ev = eig.eigenvalues.amax().max(1.0);
            if eig.eigenvalues.min() < -1e-10 * max_ev {
                return Err(Error::Invalid("H is not positive semi-definite".into()));
            }
        }
        Ok(())
    }

    /// Inequality system with the non-negativity rows appended.
    fn expanded_ineq(&self) -> (DenseMatrix, DenseVector) {
        let n = self.n();
        let extra: Vec<usize> =
            (0..n).filter(|&i| self.nonneg_mask[i]).collect();
        if extra.is_empty() {
            return (self.a_ineq.clone(), self.b_ineq.clone());
        }
        let mi = self.a_ineq.nrows();
        let mut a = DenseMatrix::zeros(mi + extra.len(), n);
        a.view_mut((0, 0), (mi, n)).copy_from(&self.a_ineq);
        let mut b = DenseVector::zeros(mi + extra.len());
        b.rows_mut(0, mi).copy_from(&self.b_ineq);
        for (row, &var) in extra.iter().enumerate() {
            a[(mi + row, var)] = 1.0;
        }
        (a, b)
    }
}

/// Solve a convex QP: validates the problem, detects infeasibility with a
/// certificate, then runs the interior-point method.
pub fn solve_qp(p: &QPProblem) -> Result<QPSolution> {
    p.validate_shapes()?;
    p.validate_h()?;
    solve_qp_prechecked(p)
}

/// Solve without re-validating H; for hot loops where the caller has already
/// checked the (shared) quadratic term.
pub fn solve_qp_prechecked(p: &QPProblem) -> Result<QPSolution> {
    let n = p.n();
    let (a, b) = p.expanded_ineq();
    let (e, d) = (&p.a_eq, &p.b_eq);

    // Equality system solvable at all? A least-squares residual in the
    // orthogonal complement of range(E) is itself a Farkas certificate.
    let x_eq = if e.nrows() > 0 {
        let x_ls = least_squares(e, d);
        let resid = d - e * &x_ls;
        if resid.norm() > 1e-8 * (1.0 + d.norm()) {
            let gap = resid.dot(d);
            return Ok(infeasible_solution(
                n,
                a.nrows(),
                e.nrows(),
                FarkasCertificate {
                    ineq_multipliers: DenseVector::zeros(a.nrows()),
                    eq_multipliers: resid,
                    gap,
                },
            ));
        }
        x_ls
    } else {
        DenseVector::zeros(n)
    };

    if a.nrows() == 0 {
        return solve_equality_qp(p, &x_eq);
    }

    // Phase 1: minimize the uniform constraint violation t.
    if let Some(farkas) = phase_one_infeasible(&a, &b, e, d, &x_eq)? {
        return Ok(infeasible_solution(n, a.nrows(), e.nrows(), farkas));
    }

    let core = ipm_core(&p.h, &p.c, &a, &b, e, d, Some(&x_eq))?;
    Ok(assemble_solution(p, &a, &b, core))
}

/// Hot-path entry: skips H validation and the phase-1 feasibility check.
/// The caller must know the problem is feasible (for example from a shared
/// per-instance feasibility computation); an optional starting point seeds
/// the interior-point iteration.
pub fn solve_qp_assume_feasible(
    p: &QPProblem,
    x_start: Option<&DenseVector>,
) -> Result<QPSolution> {
    let (a, b) = p.expanded_ineq();
    if a.nrows() == 0 {
        let x_eq = if p.a_eq.nrows() > 0 {
            least_squares(&p.a_eq, &p.b_eq)
        } else {
            DenseVector::zeros(p.n())
        };
        return solve_equality_qp(p, &x_eq);
    }
    let core = ipm_core(&p.h, &p.c, &a, &b, &p.a_eq, &p.b_eq, x_start)?;
    Ok(assemble_solution(p, &a, &b, core))
}

fn infeasible_solution(n: usize, mi: usize, me: usize, farkas: FarkasCertificate) -> QPSolution {
    QPSolution {
        x: DenseVector::zeros(n),
        objective: f64::INFINITY,
        dual_objective: f64::INFINITY,
        status: QPStatus::Infeasible,
        kkt_residual: f64::NAN,
        ineq_multipliers: DenseVector::zeros(mi),
        eq_multipliers: DenseVector::zeros(me),
        farkas: Some(farkas),
    }
}

fn least_squares(e: &DenseMatrix, d: &DenseVector) -> DenseVector {
    let pinv = crate::matrixcore::symmetric_pseudoinverse(&(e.transpose() * e));
    pinv * (e.transpose() * d)
}

/// Equality-constrained (or unconstrained) QP via one KKT solve.
fn solve_equality_qp(p: &QPProblem, x_eq: &DenseVector) -> Result<QPSolution> {
    let n = p.n();
    let me = p.a_eq.nrows();
    let mut kkt = DenseMatrix::zeros(n + me, n + me);
    kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
    for i in 0..n {
        kkt[(i, i)] += REG;
    }
    if me > 0 {
        kkt.view_mut((0, n), (n, me)).copy_from(&p.a_eq.transpose());
        kkt.view_mut((n, 0), (me, n)).copy_from(&p.a_eq);
        for i in 0..me {
            kkt[(n + i, n + i)] = -REG;
        }
    }
    let mut rhs = DenseVector::zeros(n + me);
    rhs.rows_mut(0, n).copy_from(&(-&p.c));
    rhs.rows_mut(n, me).copy_from(&p.b_eq);
    let lu = LU::new(kkt);
    let sol = match lu.solve(&rhs) {
        Some(s) => s,
        None => {
            // Singular KKT: fall back to the minimum-norm stationary point
            // on the feasible affine set, x = x_eq + N z with N spanning
            // null(E); here handled via the pseudo-inverse of H restricted.
            let grad = &p.h * x_eq + &p.c;
            let hp = crate::matrixcore::symmetric_pseudoinverse(&p.h);
            let x = x_eq - hp * grad;
            let mut out = DenseVector::zeros(n + me);
            out.rows_mut(0, n).copy_from(&x);
            out
        }
    };
    let x = sol.rows(0, n).into_owned();
    let nu = if me > 0 { sol.rows(n, me).into_owned() } else { DenseVector::zeros(0) };
    let objective = 0.5 * (&p.h * &x).dot(&x) + p.c.dot(&x);
    let grad_res = (&p.h * &x + &p.c + p.a_eq.transpose() * &nu).amax();
    let eq_res = if me > 0 { (&p.a_eq * &x - &p.b_eq).amax() } else { 0.0 };
    if grad_res.max(eq_res) > 1e-6 {
        return Err(Error::Solver(format!(
            "equality QP residual {:.3e}",
            grad_res.max(eq_res)
        )));
    }
    let dual_objective = -0.5 * (&p.h * &x).dot(&x) - p.b_eq.dot(&nu);
    Ok(QPSolution {
        x,
        objective,
        dual_objective,
        status: QPStatus::Optimal,
        kkt_residual: grad_res.max(eq_res),
        ineq_multipliers: DenseVector::zeros(0),
        eq_multipliers: nu,
        farkas: None,
    })
}

/// Phase-1 feasibility: `min t  s.t.  Ax + t·1 ≥ b, Ex = d, t ≥ −1`.
/// Returns a certificate when the optimal violation stays positive.
fn phase_one_infeasible(
    a: &DenseMatrix,
    b: &DenseVector,
    e: &DenseMatrix,
    d: &DenseVector,
    x_eq: &DenseVector,
) -> Result<Option<FarkasCertificate>> {
    let n = a.ncols();
    let mi = a.nrows();
    let me = e.nrows();
    let mut a1 = DenseMatrix::zeros(mi + 1, n + 1);
    a1.view_mut((0, 0), (mi, n)).copy_from(a);
    for i in 0..mi {
        a1[(i, n)] = 1.0;
    }
    a1[(mi, n)] = 1.0; // t ≥ −1
    let mut b1 = DenseVector::zeros(mi + 1);
    b1.rows_mut(0, mi).copy_from(b);
    b1[mi] = -1.0;
    let mut e1 = DenseMatrix::zeros(me, n + 1);
    if me > 0 {
        e1.view_mut((0, 0), (me, n)).copy_from(e);
    }
    let mut c1 = DenseVector::zeros(n + 1);
    c1[n] = 1.0;
    // Strictly interior start: x solving the equalities, t large enough.
    let viol = if mi > 0 { (b - a * x_eq).max() } else { 0.0 };
    let mut x0 = DenseVector::zeros(n + 1);
    x0.rows_mut(0, n).copy_from(x_eq);
    x0[n] = viol.max(0.0) + 1.0;
    let h1 = DenseMatrix::zeros(n + 1, n + 1);
    let core = ipm_core(&h1, &c1, &a1, &b1, &e1, d, Some(&x0))?;
    let t_star = core.x[n];
    if t_star > 1e-7 {
        // Phase-1 multipliers certify infeasibility of the original system.
        let lam = core.lam.rows(0, mi).into_owned();
        let nu = -core.nu.clone();
        let gap = b.dot(&lam) + d.dot(&nu);
        return Ok(Some(FarkasCertificate { ineq_multipliers: lam, eq_multipliers: nu, gap }));
    }
    Ok(None)
}

struct IpmResult {
    x: DenseVector,
    lam: DenseVector,
    nu: DenseVector,
    kkt_residual: f64,
}

/// Mehrotra predictor–corrector on
/// `min ½xᵀHx + cᵀx  s.t.  Ax ≥ b (mi > 0), Ex = d`.
#[allow(clippy::too_many_arguments)]
fn ipm_core(
    h: &DenseMatrix,
    c: &DenseVector,
    a: &DenseMatrix,
    b: &DenseVector,
    e: &DenseMatrix,
    d: &DenseVector,
    x_start: Option<&DenseVector>,
) -> Result<IpmResult> {
    let n = c.len();
    let mi = a.nrows();
    let me = e.nrows();
    debug_assert!(mi > 0);

    let mut x = x_start.cloned().unwrap_or_else(|| DenseVector::zeros(n));
    let mut s = DenseVector::from_fn(mi, |i, _| {
        let slack = (a.row(i) * &x)[0] - b[i];
        slack.max(1.0)
    });
    let mut lam = DenseVector::from_element(mi, 1.0);
    let mut nu = DenseVector::zeros(me);

    let scale_c = 1.0 + c.amax();
    let scale_b = 1.0 + if mi > 0 { b.amax() } else { 0.0 };
    let scale_d = 1.0 + if me > 0 { d.amax() } else { 0.0 };

    let mut kkt_residual = f64::INFINITY;
    for _iter in 0..MAX_ITERS {
        let r_d = h * &x + c - a.transpose() * &lam - e.transpose() * &nu;
        let r_p = if me > 0 { e * &x - d } else { DenseVector::zeros(0) };
        let r_g = a * &x - &s - b;
        let mu = s.dot(&lam) / mi as f64;

        let res_d = r_d.amax() / scale_c;
        let res_p = if me > 0 { r_p.amax() / scale_d } else { 0.0 };
        let res_g = r_g.amax() / scale_b;
        kkt_residual = res_d.max(res_p).max(res_g).max(mu);
        if kkt_residual <= TOL {
            break;
        }
        if x.amax() > 1e14 {
            return Err(Error::Solver("iterates diverged (problem unbounded?)".into()));
        }

        // Reduced KKT matrix, rebuilt and factorized once per iteration.
        let mut kkt = DenseMatrix::zeros(n + me, n + me);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        for i in 0..n {
            kkt[(i, i)] += REG;
        }
        // M += AᵀDA with D = diag(λ/s); row-wise rank-one updates.
        for r in 0..mi {
            let dr = lam[r] / s[r];
            let row = a.row(r);
            for i in 0..n {
                let ai = row[i];
                if ai == 0.0 {
                    continue;
                }
                let w = dr * ai;
                for j in 0..n {
                    kkt[(i, j)] += w * row[j];
                }
            }
        }
        if me > 0 {
            // Blocks for [dx; dν]: M dx − Eᵀ dν = rhs₁, E dx = rhs₂ (−δ reg).
            kkt.view_mut((0, n), (n, me)).copy_from(&(-e.transpose()));
            kkt.view_mut((n, 0), (me, n)).copy_from(e);
            for i in 0..me {
                kkt[(n + i, n + i)] = -REG;
            }
        }
        let lu = LU::new(kkt);

        let solve_step = |rc: &DenseVector, lu: &LU<f64, nalgebra::Dyn, nalgebra::Dyn>|
            -> Option<(DenseVector, DenseVector, DenseVector, DenseVector)> {
            // dλ = −S⁻¹rc − D(A dx + r_g); ds = A dx + r_g.
            let mut rhs = DenseVector::zeros(n + me);
            let mut top = -&r_d;
            for r in 0..mi {
                let coeff = rc[r] / s[r] + lam[r] / s[r] * r_g[r];
                for i in 0..n {
                    top[i] -= coeff * a[(r, i)];
                }
            }
            rhs.rows_mut(0, n).copy_from(&top);
            if me > 0 {
                rhs.rows_mut(n, me).copy_from(&(-&r_p));
            }
            let sol = lu.solve(&rhs)?;
            let dx = sol.rows(0, n).into_owned();
            let dnu = if me > 0 { sol.rows(n, me).into_owned() } else { DenseVector::zeros(0) };
            let ds = a * &dx + &r_g;
            let dlam = DenseVector::from_fn(mi, |r, _| -(rc[r] + lam[r] * ds[r]) / s[r]);
            Some((dx, ds, dlam, dnu))
        };

        // Predictor (affine) direction.
        let rc_aff = DenseVector::from_fn(mi, |r, _| s[r] * lam[r]);
        let (_dx_a, ds_a, dlam_a, _dnu_a) = solve_step(&rc_aff, &lu)
            .ok_or_else(|| Error::Solver("singular KKT system".into()))?;
        let alpha_p_aff = max_step(&s, &ds_a);
        let alpha_d_aff = max_step(&lam, &dlam_a);
        let mu_aff = {
            let mut acc = 0.0;
            for r in 0..mi {
                acc += (s[r] + alpha_p_aff * ds_a[r]) * (lam[r] + alpha_d_aff * dlam_a[r]);
            }
            acc / mi as f64
        };
        let sigma = if mu > 0.0 { (mu_aff / mu).powi(3).clamp(0.0, 1.0) } else { 0.0 };

        // Corrector direction reusing the factorization.
        let rc_cor =
            DenseVector::from_fn(mi, |r, _| s[r] * lam[r] + ds_a[r] * dlam_a[r] - sigma * mu);
        let (dx, ds, dlam, dnu) = solve_step(&rc_cor, &lu)
            .ok_or_else(|| Error::Solver("singular KKT system".into()))?;

        let eta = 1.0 - (0.01f64).min(mu.sqrt()).max(1e-4);
        let alpha_p = (eta * max_step(&s, &ds)).min(1.0);
        let alpha_d = (eta * max_step(&lam, &dlam)).min(1.0);
        x += alpha_p * &dx;
        s += alpha_p * &ds;
        lam += alpha_d * &dlam;
        if me > 0 {
            nu += alpha_d * &dnu;
        }
    }

    if kkt_residual > 1e-6 {
        return Err(Error::Solver(format!(
            "interior-point method did not converge (residual {kkt_residual:.3e})"
        )));
    }
    Ok(IpmResult { x, lam, nu, kkt_residual })
}

/// Largest step in [0, 1] keeping `v + α dv` strictly positive.
fn max_step(v: &DenseVector, dv: &DenseVector) -> f64 {
    let mut alpha = 1.0f64;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            alpha = alpha.min(-v[i] / dv[i]);
        }
    }
    alpha
}

fn assemble_solution(
    p: &QPProblem,
    a: &DenseMatrix,
    b: &DenseVector,
    core: IpmResult,
) -> QPSolution {
    let x = core.x;
    let objective = 0.5 * (&p.h * &x).dot(&x) + p.c.dot(&x);
    let dual_objective =
        -0.5 * (&p.h * &x).dot(&x) + b.dot(&core.lam) + p.b_eq.dot(&core.nu);
    debug_assert!(a.nrows() == core.lam.len());
    QPSolution {
        x,
        objective,
        dual_objective,
        status: QPStatus::Optimal,
        kkt_residual: core.kkt_residual,
        ineq_multipliers: core.lam,
        eq_multipliers: core.nu,
        farkas: None,
    }
}

/// Dorn dual of `min ½xᵀHx + cᵀx s.t. Ax ≥ b, Ex = d`, returned as a
/// minimization problem over `z = (u, v, w)`:
///
/// `min ½uᵀHu − bᵀv − dᵀw  s.t.  −Hu + Aᵀv + Eᵀw = c,  v ≥ 0`.
///
/// Negating its optimal objective gives the dual maximum; any feasible `z`
/// certifies the lower bound `bᵀv + dᵀw − ½uᵀHu` on the primal optimum,
/// with no matrix inversion involved.  The non-negativity mask of the primal
/// is treated as appended inequality rows.
pub fn dorn_dual(p: &QPProblem) -> QPProblem {
    let n = p.n();
    let (a, b) = p.expanded_ineq();
    let mi = a.nrows();
    let me = p.a_eq.nrows();
    let nz = n + mi + me;

    let mut h = DenseMatrix::zeros(nz, nz);
    h.view_mut((0, 0), (n, n)).copy_from(&p.h);

    let mut c = DenseVector::zeros(nz);
    for r in 0..mi {
        c[n + r] = -b[r];
    }
    for r in 0..me {
        c[n + mi + r] = -p.b_eq[r];
    }

    let mut a_eq = DenseMatrix::zeros(n, nz);
    a_eq.view_mut((0, 0), (n, n)).copy_from(&(-&p.h));
    if mi > 0 {
        a_eq.view_mut((0, n), (n, mi)).copy_from(&a.transpose());
    }
    if me > 0 {
        a_eq.view_mut((0, n + mi), (n, me)).copy_from(&p.a_eq.transpose());
    }

    let mut nonneg = vec![false; nz];
    for flag in nonneg.iter_mut().skip(n).take(mi) {
        *flag = true;
    }

    QPProblem {
        h,
        c,
        a_ineq: DenseMatrix::zeros(0, nz),
        b_ineq: DenseVector::zeros(0),
        a_eq,
        b_eq: p.c.clone(),
        nonneg_mask: nonneg,
    }
}

/// Objective of the Dorn dual (as a maximization) at a candidate point,
/// together with its equality residual; used for certificate checks.
pub fn dorn_dual_value(
    p: &QPProblem,
    u: &DenseVector,
    v: &DenseVector,
    w: &DenseVector,
) -> (f64, f64) {
    let (a, b) = p.expanded_ineq();
    let value = b.dot(v) + p.b_eq.dot(w) - 0.5 * (&p.h * u).dot(u);
    let residual =
        (a.transpose() * v + p.a_eq.transpose() * w - &p.h * u - &p.c).amax();
    (value, residual)
}
