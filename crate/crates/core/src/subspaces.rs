//! Score-subspace constructions and their derived quantities: projectors,
//! pair projection norms, closed-form Gram matrices and condition numbers.

use crate::losses::{all_permutations, TreeSpec};
use crate::matrixcore::{DenseMatrix, DenseVector, Projector};
use crate::rankanalysis::harmonic;
use crate::{Error, Result};

/// Tag describing how a subspace was built; closed-form fast paths key on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubspaceKind {
    Explicit,
    TreeBlock(usize),
    MapFull,
    MapSort,
    Identity,
}

/// A score subspace `span(F)` with its cached projector.
#[derive(Debug, Clone)]
pub struct ScoreSubspace {
    pub f: DenseMatrix,
    pub projector: Projector,
    pub kind: SubspaceKind,
}

/// Ordered pair of output indices defining the direction `Δ_ij = e_i − e_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairDelta {
    pub i: usize,
    pub j: usize,
}

impl PairDelta {
    pub fn new(i: usize, j: usize) -> Result<Self> {
        if i == j {
            return Err(Error::Invalid("pair indices must differ".into()));
        }
        Ok(PairDelta { i, j })
    }
}

impl ScoreSubspace {
    pub fn new(f: DenseMatrix, kind: SubspaceKind) -> Result<Self> {
        if f.column_iter().any(|c| c.norm() == 0.0) {
            return Err(Error::Invalid("score basis has an all-zero column".into()));
        }
        let projector = Projector::from_basis(f.clone());
        Ok(ScoreSubspace { f, projector, kind })
    }

    /// Explicit basis from a dense matrix.
    pub fn explicit(f: DenseMatrix) -> Result<Self> {
        Self::new(f, SubspaceKind::Explicit)
    }

    /// The unconstrained subspace `𝓕 = ℝᵏ`.
    pub fn identity(k: usize) -> Result<Self> {
        Self::new(DenseMatrix::identity(k, k), SubspaceKind::Identity)
    }

    /// Number of outputs `k`.
    pub fn k(&self) -> usize {
        self.f.nrows()
    }

    /// Basis dimension `d`.
    pub fn d(&self) -> usize {
        self.f.ncols()
    }
}

/// Block-indicator basis at consistency depth `t`: scores are tied within
/// each group of leaves sharing an ancestor at depth `t`.
pub fn tree_block_basis(spec: &TreeSpec, t: usize) -> Result<ScoreSubspace> {
    spec.validate()?;
    let depth = spec.depth();
    if t < 1 || t > depth {
        return Err(Error::Invalid(format!("block depth must be in 1..={depth}, got {t}")));
    }
    let k = spec.leaf_count();
    let blocks: usize = spec.children[..t].iter().product();
    let block_size = k / blocks;
    let mut f = DenseMatrix::zeros(k, blocks);
    for leaf in 0..k {
        // Leaves are laid out in path order, so consecutive runs of
        // `block_size` leaves share the depth-t ancestor.
        f[(leaf, leaf / block_size)] = 1.0;
    }
    ScoreSubspace::new(f, SubspaceKind::TreeBlock(t))
}

/// Column order of the pair-indexed basis: all (p, q) with p ≤ q,
/// lexicographically.
pub fn pair_columns(r: usize) -> Vec<(usize, usize)> {
    let mut cols = Vec::with_capacity(r * (r + 1) / 2);
    for p in 1..=r {
        for q in p..=r {
            cols.push((p, q));
        }
    }
    cols
}

/// Full ranking score basis: entry (σ, (p,q)) = 1/max(σ(p), σ(q)).
pub fn f_map(r: usize) -> Result<ScoreSubspace> {
    if !(2..=7).contains(&r) {
        return Err(Error::Invalid(format!("pair basis supports 2 ≤ r ≤ 7, got {r}")));
    }
    let perms = all_permutations(r);
    let cols = pair_columns(r);
    let mut f = DenseMatrix::zeros(perms.len(), cols.len());
    for (row, sigma) in perms.iter().enumerate() {
        for (ci, &(p, q)) in cols.iter().enumerate() {
            f[(row, ci)] = 1.0 / sigma.pos(p).max(sigma.pos(q)) as f64;
        }
    }
    ScoreSubspace::new(f, SubspaceKind::MapFull)
}

/// Sort score basis: entry (σ, p) = 1/σ(p); argmax prediction is sorting.
pub fn f_sort(r: usize) -> Result<ScoreSubspace> {
    if !(2..=7).contains(&r) {
        return Err(Error::Invalid(format!("sort basis supports 2 ≤ r ≤ 7, got {r}")));
    }
    let perms = all_permutations(r);
    let mut f = DenseMatrix::zeros(perms.len(), r);
    for (row, sigma) in perms.iter().enumerate() {
        for p in 1..=r {
            f[(row, p - 1)] = 1.0 / sigma.pos(p) as f64;
        }
    }
    ScoreSubspace::new(f, SubspaceKind::MapSort)
}

/// Squared norm of the projected pair direction, `‖P_𝓕 Δ_ij‖²`.
pub fn pair_projection_sqnorm(s: &ScoreSubspace, pair: PairDelta) -> Result<f64> {
    let k = s.k();
    if pair.i < 1 || pair.i > k || pair.j < 1 || pair.j > k {
        return Err(Error::Invalid(format!("pair indices out of range 1..={k}")));
    }
    // ΔᵀPΔ with P = F G⁺ Fᵀ reduces to gᵀ G⁺ g where g = FᵀΔ.
    let fi = s.f.row(pair.i - 1).transpose();
    let fj = s.f.row(pair.j - 1).transpose();
    let g: DenseVector = fi - fj;
    let val = (&s.projector.gram_pinv * &g).dot(&g);
    Ok(val.max(0.0))
}

/// Factorial in floating point; errors once the value is not representable.
pub fn factorial_f64(n: usize) -> Result<f64> {
    if n > 170 {
        return Err(Error::Invalid(format!("{n}! overflows double precision")));
    }
    if n > 25 {
        log::warn!("factorial({n}) computed in floating point; relative error grows with n");
    }
    Ok((1..=n).fold(1.0, |acc, i| acc * i as f64))
}

/// Closed-form Gram matrix of the sort basis: diagonal `(r−1)!·H_{r,2}`,
/// off-diagonal `(r−2)!·(H_{r,1}² − H_{r,2})`, with no factorial-sized
/// enumeration.
pub fn gram_f_sort_closed(r: usize) -> Result<DenseMatrix> {
    if r < 2 {
        return Err(Error::Invalid("need r ≥ 2".into()));
    }
    let h1 = harmonic(r, 1);
    let h2 = harmonic(r, 2);
    let diag = factorial_f64(r - 1)? * h2;
    let off = factorial_f64(r - 2)? * (h1 * h1 - h2);
    let mut g = DenseMatrix::from_element(r, r, off);
    for i in 0..r {
        g[(i, i)] = diag;
    }
    Ok(g)
}

/// Condition number of the sort basis via harmonic numbers only.
pub fn kappa_sort_closed(r: usize) -> f64 {
    let h1 = harmonic(r, 1);
    let h2 = harmonic(r, 2);
    ((r - 1) as f64).sqrt() * h1 / (r as f64 * h2 - h1 * h1).sqrt()
}

/// Ratio of extreme singular values of the basis matrix.  For the sort basis
/// the harmonic-number closed form is used instead of an r!-row SVD.
pub fn condition_number(s: &ScoreSubspace) -> Result<f64> {
    if s.kind == SubspaceKind::MapSort {
        return Ok(kappa_sort_closed(s.d()));
    }
    let svd = s.f.clone().svd(false, false);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_sv <= 1e-12 * max_sv {
        let rank = svd.singular_values.iter().filter(|&&v| v > 1e-12 * max_sv).count();
        return Err(Error::Invalid(format!(
            "basis is rank deficient: numerical rank {rank} of {} columns",
            s.d()
        )));
    }
    Ok(max_sv / min_sv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::map_loss_matrix;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tree_block_examples() {
        let spec = TreeSpec::new(vec![2, 2], vec![0.5, 0.5]).unwrap();
        let s = tree_block_basis(&spec, 1).unwrap();
        assert_eq!((s.k(), s.d()), (4, 2));
        let expect = DenseMatrix::from_row_slice(4, 2, &[1., 0., 1., 0., 0., 1., 0., 1.]);
        assert_eq!(s.f, expect);

        // t = D: permutation of the identity.
        let full = tree_block_basis(&spec, 2).unwrap();
        assert_eq!(full.f, DenseMatrix::identity(4, 4));

        // FᵀF = block_size · I for any t.
        let spec3 = TreeSpec::new(vec![2, 3], vec![0.4, 0.6]).unwrap();
        for t in 1..=2 {
            let s = tree_block_basis(&spec3, t).unwrap();
            let gram = s.f.transpose() * &s.f;
            let z = (s.k() / s.d()) as f64;
            assert!((gram - DenseMatrix::identity(s.d(), s.d()) * z).norm() < 1e-12);
        }
        assert!(tree_block_basis(&spec, 0).is_err());
        assert!(tree_block_basis(&spec, 3).is_err());
    }

    #[test]
    fn f_map_entries_and_sort_columns() {
        let s = f_map(2).unwrap();
        // Row for the identity ranking (first in lexicographic order).
        assert_eq!(s.f.row(0).iter().cloned().collect::<Vec<_>>(), vec![1.0, 0.5, 0.5]);
        assert!(s.f.iter().all(|&v| v > 0.0 && v <= 1.0));

        // Diagonal pair columns (p, p) reproduce the sort basis columns.
        for r in 2..=4 {
            let fm = f_map(r).unwrap();
            let fs = f_sort(r).unwrap();
            let cols = pair_columns(r);
            for (ci, &(p, q)) in cols.iter().enumerate() {
                if p == q {
                    assert_eq!(fm.f.column(ci), fs.f.column(p - 1));
                }
            }
        }
    }

    #[test]
    fn f_sort_rows() {
        let s = f_sort(2).unwrap();
        assert_eq!(s.f.row(0).iter().cloned().collect::<Vec<_>>(), vec![1.0, 0.5]);
        assert_eq!(s.f.row(1).iter().cloned().collect::<Vec<_>>(), vec![0.5, 1.0]);
        for r in 2..=5 {
            let s = f_sort(r).unwrap();
            let h1 = harmonic(r, 1);
            for row in s.f.row_iter() {
                assert!((row.sum() - h1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pair_projection_basics() {
        let id = ScoreSubspace::identity(5).unwrap();
        let v = pair_projection_sqnorm(&id, PairDelta::new(1, 4).unwrap()).unwrap();
        assert!((v - 2.0).abs() < 1e-12);

        let spec = TreeSpec::new(vec![2, 3], vec![0.4, 0.6]).unwrap();
        let s = tree_block_basis(&spec, 1).unwrap();
        // Same block: projection vanishes. Leaves 1..3 share block 1.
        let same = pair_projection_sqnorm(&s, PairDelta::new(1, 3).unwrap()).unwrap();
        assert!(same.abs() < 1e-12);
        // Different blocks: 2 / block size.
        let cross = pair_projection_sqnorm(&s, PairDelta::new(1, 4).unwrap()).unwrap();
        assert!((cross - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pair_projection_matches_explicit_projector() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let k = rng.gen_range(2..=8);
            let d = rng.gen_range(1..=k);
            let f = DenseMatrix::from_fn(k, d, |_, _| rng.gen_range(-1.0..1.0));
            let s = ScoreSubspace::explicit(f).unwrap();
            let i = rng.gen_range(1..=k);
            let mut j = rng.gen_range(1..=k);
            if j == i {
                j = if i == k { 1 } else { i + 1 };
            }
            let mut delta = DenseVector::zeros(k);
            delta[i - 1] = 1.0;
            delta[j - 1] = -1.0;
            let oracle = s.projector.apply(&delta).unwrap().dot(&delta);
            let fast = pair_projection_sqnorm(&s, PairDelta::new(i, j).unwrap()).unwrap();
            assert!((fast - oracle).abs() < 1e-10);
            assert!((0.0..=2.0 + 1e-12).contains(&fast));
        }
    }

    #[test]
    fn gram_sort_closed_vs_explicit() {
        // r = 3 exact values.
        let g3 = gram_f_sort_closed(3).unwrap();
        assert!((g3[(0, 0)] - 49.0 / 18.0).abs() < 1e-12);
        assert!((g3[(0, 1)] - 2.0).abs() < 1e-12);
        for r in 3..=6 {
            let closed = gram_f_sort_closed(r).unwrap();
            let explicit = {
                let s = f_sort(r).unwrap();
                s.f.transpose() * &s.f
            };
            let rel = (&closed - &explicit).norm() / explicit.norm();
            assert!(rel < 1e-9, "r={r} rel={rel}");
        }
        // Shifted matrix has rank one.
        let r = 5;
        let h1 = harmonic(r, 1);
        let h2 = harmonic(r, 2);
        let shift = factorial_f64(r - 2).unwrap() * (r as f64 * h2 - h1 * h1);
        let shifted = gram_f_sort_closed(r).unwrap() - DenseMatrix::identity(r, r) * shift;
        let svd = shifted.svd(false, false);
        let max_sv = svd.singular_values.max();
        let rank = svd.singular_values.iter().filter(|&&v| v > 1e-9 * max_sv).count();
        assert_eq!(rank, 1);
    }

    #[test]
    fn condition_numbers() {
        // Orthogonal equal-norm columns give condition number 1.
        let spec = TreeSpec::new(vec![2, 2], vec![0.5, 0.5]).unwrap();
        let s = tree_block_basis(&spec, 1).unwrap();
        assert!((condition_number(&s).unwrap() - 1.0).abs() < 1e-12);

        // Sort basis closed form vs explicit SVD.
        for (r, want) in [(3usize, 3.0509), (5, 3.1480)] {
            let closed = kappa_sort_closed(r);
            assert!((closed - want).abs() < 5e-4, "r={r} closed={closed}");
            let s = f_sort(r).unwrap();
            let explicit = ScoreSubspace::explicit(s.f.clone()).unwrap();
            let svd_val = condition_number(&explicit).unwrap();
            assert!((closed - svd_val).abs() < 1e-9 * svd_val);
        }

        // Rank-deficient basis is rejected.
        let f = DenseMatrix::from_row_slice(3, 2, &[1., 2., 2., 4., 3., 6.]);
        let s = ScoreSubspace::explicit(f).unwrap();
        assert!(condition_number(&s).is_err());
    }

    #[test]
    fn kappa_log_growth_bracket() {
        for &r in &[10usize, 100, 1000, 10000] {
            let ratio = kappa_sort_closed(r) / (r as f64).ln();
            assert!((0.5..=3.0).contains(&ratio), "r={r} ratio={ratio}");
        }
    }

    #[test]
    fn map_span_equals_pair_basis_span() {
        for r in 3..=4 {
            let l = map_loss_matrix(r).unwrap();
            let pl = Projector::from_basis(l.l.clone()).to_matrix();
            let pf = f_map(r).unwrap().projector.to_matrix();
            assert!((pl - pf).norm() < 1e-9, "r={r}");
        }
    }

    #[test]
    fn nested_subspace_monotone_projection() {
        // F_sort ⊆ F_map and tree t1 < t2 nesting.
        let r = 4;
        let fs = f_sort(r).unwrap();
        let fm = f_map(r).unwrap();
        let k = fs.k();
        for i in 1..=k.min(24) {
            for j in 1..=k.min(24) {
                if i == j {
                    continue;
                }
                let pair = PairDelta::new(i, j).unwrap();
                let a = pair_projection_sqnorm(&fs, pair).unwrap();
                let b = pair_projection_sqnorm(&fm, pair).unwrap();
                assert!(a <= b + 1e-10);
            }
        }
        let spec = TreeSpec::new(vec![2, 2, 2], vec![0.2, 0.3, 0.5]).unwrap();
        let s1 = tree_block_basis(&spec, 1).unwrap();
        let s2 = tree_block_basis(&spec, 2).unwrap();
        for i in 1..=8 {
            for j in 1..=8 {
                if i == j {
                    continue;
                }
                let pair = PairDelta::new(i, j).unwrap();
                let a = pair_projection_sqnorm(&s1, pair).unwrap();
                let b = pair_projection_sqnorm(&s2, pair).unwrap();
                assert!(a <= b + 1e-10);
            }
        }
    }
}
