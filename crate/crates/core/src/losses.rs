//! Task-loss constructions: tree-structured multi-class losses, the
//! mean-average-precision ranking loss, and user-supplied explicit matrices.

use crate::matrixcore::DenseMatrix;
use crate::{Error, Result};
use itertools::Itertools;
use serde::Deserialize;
use std::path::Path;

/// Level-homogeneous label tree: every node at depth `s` has `children[s]`
/// children, and every edge between depth `s` and `s+1` carries weight
/// `weights[s] / 2` so that the leaf-to-leaf distance through a depth-`s`
/// ancestor accumulates `weights[s]` per traversed level.
#[derive(Debug, Clone, Deserialize)]
pub struct TreeSpec {
    pub children: Vec<usize>,
    pub weights: Vec<f64>,
}

impl TreeSpec {
    pub fn new(children: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        let spec = TreeSpec { children, weights };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.children.is_empty() || self.children.len() != self.weights.len() {
            return Err(Error::Invalid(
                "tree spec needs equal, non-empty children and weights lists".into(),
            ));
        }
        if self.children.iter().any(|&n| n < 2) {
            return Err(Error::Invalid("every level must have at least 2 children".into()));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Invalid("tree weights must be finite and non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!(
                "tree weights must sum to 1 (got {total})"
            )));
        }
        Ok(())
    }

    /// Tree depth `D`.
    pub fn depth(&self) -> usize {
        self.children.len()
    }

    /// Number of leaves `k = ∏ n_s`.
    pub fn leaf_count(&self) -> usize {
        self.children.iter().product()
    }

    /// Path digits of a 1-based leaf index, most significant digit first
    /// (digit `s` selects the child taken at depth `s`).
    fn leaf_path(&self, leaf: usize) -> Vec<usize> {
        let mut rem = leaf - 1;
        let mut digits = vec![0usize; self.depth()];
        for s in (0..self.depth()).rev() {
            digits[s] = rem % self.children[s];
            rem /= self.children[s];
        }
        digits
    }

    /// Load a tree spec from a JSON file `{"children":[...],"weights":[...]}`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: TreeSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Weighted path length between two leaves (1-based indices).
pub fn tree_distance(spec: &TreeSpec, i: usize, j: usize) -> Result<f64> {
    let k = spec.leaf_count();
    if i < 1 || i > k || j < 1 || j > k {
        return Err(Error::Invalid(format!("leaf index out of range 1..={k}")));
    }
    if i == j {
        return Ok(0.0);
    }
    let (pi, pj) = (spec.leaf_path(i), spec.leaf_path(j));
    let split = pi.iter().zip(&pj).position(|(a, b)| a != b).unwrap_or(spec.depth());
    Ok(spec.weights[split..].iter().sum())
}

/// Dense task-loss matrix `L` of size k×m together with label metadata.
#[derive(Debug, Clone)]
pub struct LossMatrix {
    pub l: DenseMatrix,
    pub output_labels: Vec<String>,
    pub gt_labels: Vec<String>,
    pub l_max: f64,
}

impl LossMatrix {
    pub fn new(l: DenseMatrix, output_labels: Vec<String>, gt_labels: Vec<String>) -> Result<Self> {
        if l.nrows() != output_labels.len() || l.ncols() != gt_labels.len() {
            return Err(Error::Dimension("label lists must match matrix shape".into()));
        }
        if l.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::Invalid("loss entries must be finite and non-negative".into()));
        }
        let l_max = l.iter().cloned().fold(0.0, f64::max);
        Ok(LossMatrix { l, output_labels, gt_labels, l_max })
    }

    pub fn k(&self) -> usize {
        self.l.nrows()
    }

    pub fn m(&self) -> usize {
        self.l.ncols()
    }
}

/// Full k×k matrix of pairwise tree distances.
pub fn tree_loss_matrix(spec: &TreeSpec) -> Result<LossMatrix> {
    spec.validate()?;
    let k = spec.leaf_count();
    let mut l = DenseMatrix::zeros(k, k);
    for i in 1..=k {
        for j in (i + 1)..=k {
            let d = tree_distance(spec, i, j)?;
            l[(i - 1, j - 1)] = d;
            l[(j - 1, i - 1)] = d;
        }
    }
    let labels: Vec<String> = (1..=k).map(|i| i.to_string()).collect();
    LossMatrix::new(l, labels.clone(), labels)
}

/// A ranking of `r` items: `positions[p]` is the 1-based position assigned to
/// item `p + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    pub positions: Vec<usize>,
}

impl Permutation {
    pub fn new(positions: Vec<usize>) -> Result<Self> {
        let r = positions.len();
        let mut seen = vec![false; r];
        for &p in &positions {
            if p < 1 || p > r || seen[p - 1] {
                return Err(Error::Invalid("positions must be a bijection onto 1..=r".into()));
            }
            seen[p - 1] = true;
        }
        Ok(Permutation { positions })
    }

    pub fn r(&self) -> usize {
        self.positions.len()
    }

    /// Identity ranking: item p at position p.
    pub fn identity(r: usize) -> Self {
        Permutation { positions: (1..=r).collect() }
    }

    /// Position of item `p` (1-based).
    pub fn pos(&self, p: usize) -> usize {
        self.positions[p - 1]
    }

    pub fn label(&self) -> String {
        self.positions.iter().map(|p| p.to_string()).join(",")
    }
}

/// All `r!` rankings in lexicographic order of the positions array; this is
/// the row order of every permutation-indexed matrix in the crate.
pub fn all_permutations(r: usize) -> Vec<Permutation> {
    (1..=r)
        .permutations(r)
        .map(|positions| Permutation { positions })
        .collect()
}

/// All `2^r − 1` nonzero relevance labelings in increasing integer order,
/// with item 1 stored in the least significant bit.  Returned as bit masks.
pub fn all_labelings(r: usize) -> Vec<u32> {
    (1..(1u32 << r)).collect()
}

/// Human-readable label for a relevance bit mask, e.g. `{1,3}`.
pub fn labeling_label(mask: u32, r: usize) -> String {
    let items: Vec<String> = (1..=r)
        .filter(|p| mask >> (p - 1) & 1 == 1)
        .map(|p| p.to_string())
        .collect();
    format!("{{{}}}", items.join(","))
}

/// One minus average precision of the ranking `sigma` against the relevant
/// set `y` (a bit mask with item 1 in the least significant bit).
///
/// Evaluates the precision-averaging form and, in debug builds, asserts that
/// it agrees with the pairwise `1/max(σ(p), σ(q))` decomposition.
pub fn map_loss(sigma: &Permutation, y: u32) -> Result<f64> {
    let r = sigma.r();
    if y == 0 {
        return Err(Error::Invalid("relevance labeling must be nonzero".into()));
    }
    if y >= 1u32 << r {
        return Err(Error::Invalid("labeling has more items than the ranking".into()));
    }
    let h = y.count_ones() as f64;
    // relevant[pos - 1] flags whether the item placed at `pos` is relevant.
    let mut relevant = vec![false; r];
    for p in 1..=r {
        if y >> (p - 1) & 1 == 1 {
            relevant[sigma.pos(p) - 1] = true;
        }
    }
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for pos in 1..=r {
        if relevant[pos - 1] {
            hits += 1;
            precision_sum += hits as f64 / pos as f64;
        }
    }
    let loss = 1.0 - precision_sum / h;
    debug_assert!((loss - map_loss_pairwise(sigma, y)).abs() < 1e-12);
    Ok(loss)
}

/// Pairwise form of the same loss: `1 − Σ_{p≤q} y_p y_q / (|y|·max(σ(p),σ(q)))`.
pub fn map_loss_pairwise(sigma: &Permutation, y: u32) -> f64 {
    let r = sigma.r();
    let h = y.count_ones() as f64;
    let mut acc = 0.0;
    for p in 1..=r {
        if y >> (p - 1) & 1 == 0 {
            continue;
        }
        for q in p..=r {
            if y >> (q - 1) & 1 == 0 {
                continue;
            }
            acc += 1.0 / sigma.pos(p).max(sigma.pos(q)) as f64;
        }
    }
    1.0 - acc / h
}

/// Explicit `r! × (2^r − 1)` loss matrix for mean-average-precision ranking.
pub fn map_loss_matrix(r: usize) -> Result<LossMatrix> {
    if !(2..=7).contains(&r) {
        return Err(Error::Invalid(format!("mAP matrix supports 2 ≤ r ≤ 7, got {r}")));
    }
    let perms = all_permutations(r);
    let labelings = all_labelings(r);
    let mut l = DenseMatrix::zeros(perms.len(), labelings.len());
    for (row, sigma) in perms.iter().enumerate() {
        for (col, &y) in labelings.iter().enumerate() {
            l[(row, col)] = map_loss(sigma, y)?;
        }
    }
    let output_labels = perms.iter().map(|p| p.label()).collect();
    let gt_labels = labelings.iter().map(|&y| labeling_label(y, r)).collect();
    LossMatrix::new(l, output_labels, gt_labels)
}

/// Parse a headerless CSV of finite non-negative reals into a loss matrix
/// with labels `1..k` and `1..m`.
pub fn load_loss_matrix(path: &Path) -> Result<LossMatrix> {
    let text = std::fs::read_to_string(path)?;
    let data = parse_csv_matrix(&text)?;
    let k = data.len();
    let m = data[0].len();
    let flat: Vec<f64> = data.into_iter().flatten().collect();
    let l = DenseMatrix::from_row_slice(k, m, &flat);
    let output_labels = (1..=k).map(|i| i.to_string()).collect();
    let gt_labels = (1..=m).map(|i| i.to_string()).collect();
    LossMatrix::new(l, output_labels, gt_labels)
}

/// Parse a rectangular headerless CSV of finite non-negative reals.
pub fn parse_csv_matrix(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ri, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (ci, field) in line.split(',').enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                row: ri + 1,
                col: ci + 1,
                msg: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Parse {
                    row: ri + 1,
                    col: ci + 1,
                    msg: format!("entry must be finite and non-negative, got {v}"),
                });
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Parse {
                    row: ri + 1,
                    col: 0,
                    msg: "ragged row length".into(),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Invalid("empty CSV matrix".into()));
    }
    Ok(rows)
}
