//! Adaptive rank selection: per-rank scores, global top-k selection, rank
//! masks, sparse uploads and their aggregation.
//!
//! A "rank vector" of module `m` is column `i` of `B` or row `i` of `A`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::Factor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// `‖ΔB[:,i]‖·‖A[i,:]‖` (or `‖B[:,i]‖·‖ΔA[i,:]‖`): norm of the rank's
    /// change to ΔW.
    #[default]
    Contribution,
    /// `‖ΔB[:,i]‖` (or `‖ΔA[i,:]‖`).
    Magnitude,
    /// `Σ |θ · ∂L/∂θ|` over the rank vector, at the received parameters.
    Importance,
}

/// Rank vector `i` of a factor matrix.
pub fn rank_vector(m: &Matrix, factor: Factor, i: usize) -> Vec<f64> {
    match factor {
        Factor::B => m.col(i),
        Factor::A => m.row(i).to_vec(),
    }
}

fn rank_count(m: &Matrix, factor: Factor) -> usize {
    match factor {
        Factor::B => m.cols(),
        Factor::A => m.rows(),
    }
}

fn rank_len(m: &Matrix, factor: Factor) -> usize {
    match factor {
        Factor::B => m.rows(),
        Factor::A => m.cols(),
    }
}

fn rank_vector_norm(m: &Matrix, factor: Factor, i: usize) -> f64 {
    match factor {
        Factor::B => m.col_norm(i),
        Factor::A => m.row_norm(i),
    }
}

/// `scores[m][i]` for every module and rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    scores: Vec<Vec<f64>>,
}

impl ImportanceScores {
    pub fn new(scores: Vec<Vec<f64>>) -> Result<Self> {
        let rank = scores.first().map_or(0, Vec::len);
        if scores.iter().any(|s| s.len() != rank) {
            return Err(Error::config("every module needs the same number of rank scores"));
        }
        if scores.iter().flatten().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::protocol("rank scores must be finite and non-negative"));
        }
        Ok(ImportanceScores { scores })
    }

    pub fn num_modules(&self) -> usize {
        self.scores.len()
    }

    pub fn rank(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.num_modules() * self.rank()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, module: usize, rank: usize) -> f64 {
        self.scores[module][rank]
    }

    pub fn as_rows(&self) -> &[Vec<f64>] {
        &self.scores
    }
}

fn check_pairs(a: &[Matrix], b: &[Matrix], op: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op,
            lhs: (a.len(), 0),
            rhs: (b.len(), 0),
        });
    }
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::Dimension {
                op,
                lhs: x.shape(),
                rhs: y.shape(),
            });
        }
    }
    Ok(())
}

/// Contribution scores from the trained factor's probe delta and the frozen
/// counterpart. `deltas[m]` has the trained factor's shape; `counterparts[m]`
/// is the other factor of the same module.
pub fn importance_scores(deltas: &[Matrix], counterparts: &[Matrix], trainable: Factor) -> Result<ImportanceScores> {
    if deltas.len() != counterparts.len() {
        return Err(Error::Dimension {
            op: "importance scores",
            lhs: (deltas.len(), 0),
            rhs: (counterparts.len(), 0),
        });
    }
    let scores = deltas
        .iter()
        .zip(counterparts)
        .map(|(delta, other)| {
            let r = rank_count(delta, trainable);
            if rank_count(other, trainable.other()) != r {
                return Err(Error::Dimension {
                    op: "importance scores",
                    lhs: delta.shape(),
                    rhs: other.shape(),
                });
            }
            Ok((0..r)
                .map(|i| rank_vector_norm(delta, trainable, i) * rank_vector_norm(other, trainable.other(), i))
                .collect())
        })
        .collect::<Result<_>>()?;
    ImportanceScores::new(scores)
}

pub fn magnitude_scores(deltas: &[Matrix], trainable: Factor) -> Result<ImportanceScores> {
    ImportanceScores::new(
        deltas
            .iter()
            .map(|d| {
                (0..rank_count(d, trainable))
                    .map(|i| rank_vector_norm(d, trainable, i))
                    .collect()
            })
            .collect(),
    )
}

pub fn sensitivity_scores(params: &[Matrix], grads: &[Matrix], trainable: Factor) -> Result<ImportanceScores> {
    check_pairs(params, grads, "sensitivity scores")?;
    ImportanceScores::new(
        params
            .iter()
            .zip(grads)
            .map(|(p, g)| {
                (0..rank_count(p, trainable))
                    .map(|i| {
                        rank_vector(p, trainable, i)
                            .iter()
                            .zip(rank_vector(g, trainable, i))
                            .map(|(a, b)| (a * b).abs())
                            .sum()
                    })
                    .collect()
            })
            .collect(),
    )
}

/// Selected `(module, rank)` pairs, stored per module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankMask {
    keep: Vec<Vec<bool>>,
}

impl RankMask {
    pub fn full(num_modules: usize, rank: usize) -> Self {
        RankMask {
            keep: vec![vec![true; rank]; num_modules],
        }
    }

    pub fn empty(num_modules: usize, rank: usize) -> Self {
        RankMask {
            keep: vec![vec![false; rank]; num_modules],
        }
    }

    /// The first `k` ranks of every module.
    pub fn leading(num_modules: usize, rank: usize, k: usize) -> Self {
        RankMask {
            keep: vec![(0..rank).map(|i| i < k).collect(); num_modules],
        }
    }

    pub fn from_selected(num_modules: usize, rank: usize, selected: &[(usize, usize)]) -> Result<Self> {
        let mut mask = RankMask::empty(num_modules, rank);
        for &(m, i) in selected {
            if m >= num_modules || i >= rank {
                return Err(Error::config(format!("rank ({m}, {i}) outside {num_modules} x {rank}")));
            }
            mask.keep[m][i] = true;
        }
        Ok(mask)
    }

    pub fn num_modules(&self) -> usize {
        self.keep.len()
    }

    pub fn rank(&self) -> usize {
        self.keep.first().map_or(0, Vec::len)
    }

    pub fn contains(&self, module: usize, rank: usize) -> bool {
        self.keep[module][rank]
    }

    pub fn count(&self) -> usize {
        self.keep.iter().flatten().filter(|&&k| k).count()
    }

    pub fn is_full(&self) -> bool {
        self.keep.iter().flatten().all(|&k| k)
    }

    pub fn module_count(&self, module: usize) -> usize {
        self.keep[module].iter().filter(|&&k| k).count()
    }

    pub fn module_ranks(&self, module: usize) -> Vec<usize> {
        (0..self.rank()).filter(|&i| self.keep[module][i]).collect()
    }

    /// Ascending `(module, rank)` pairs.
    pub fn selected(&self) -> Vec<(usize, usize)> {
        (0..self.num_modules())
            .flat_map(|m| self.module_ranks(m).into_iter().map(move |i| (m, i)))
            .collect()
    }

    pub fn selected_set(&self) -> BTreeSet<(usize, usize)> {
        self.selected().into_iter().collect()
    }

    /// The 0/1 matrix for one module's factor: whole columns of `B` (shape
    /// `d1 × r`) or whole rows of `A` (`r × d2`).
    pub fn factor_mask(&self, module: usize, factor: Factor, shape: (usize, usize)) -> Matrix {
        let mut m = Matrix::zeros(shape.0, shape.1);
        for i in self.module_ranks(module) {
            match factor {
                Factor::B => m.set_col(i, &vec![1.0; shape.0]),
                Factor::A => m.row_mut(i).fill(1.0),
            }
        }
        m
    }

    /// Whether entry `(row, col)` of the module's factor is trainable.
    pub fn keeps_entry(&self, module: usize, factor: Factor, row: usize, col: usize) -> bool {
        match factor {
            Factor::B => self.keep[module][col],
            Factor::A => self.keep[module][row],
        }
    }
}

/// Global top-`budget` over all `(module, rank)` pairs. Ties go to the lower
/// `(module, rank)`; there is no per-module quota.
pub fn select_ranks(scores: &ImportanceScores, budget: usize) -> Result<RankMask> {
    if budget > scores.len() {
        return Err(Error::config(format!(
            "rank budget {budget} exceeds the {} available ranks",
            scores.len()
        )));
    }
    let mut pairs: Vec<(usize, usize)> = (0..scores.num_modules())
        .flat_map(|m| (0..scores.rank()).map(move |i| (m, i)))
        .collect();
    pairs.sort_by(|&(ma, ia), &(mb, ib)| {
        scores
            .get(mb, ib)
            .total_cmp(&scores.get(ma, ia))
            .then((ma, ia).cmp(&(mb, ib)))
    });
    RankMask::from_selected(scores.num_modules(), scores.rank(), &pairs[..budget])
}

/// `delta ⊙ M` for one module's factor. Excluded entries come out as `+0.0`
/// (a plain product would give `-0.0` for negative entries).
pub fn apply_mask_to_step(delta: &Matrix, mask: &RankMask, module: usize, factor: Factor) -> Matrix {
    let cols = delta.cols();
    let mut out = delta.clone();
    for (k, v) in out.as_mut_slice().iter_mut().enumerate() {
        if !mask.keeps_entry(module, factor, k / cols, k % cols) {
            *v = 0.0;
        }
    }
    out
}

/// `param += delta` on the entries the mask keeps; the others are not
/// touched at all.
pub fn apply_masked_step(param: &mut Matrix, delta: &Matrix, mask: Option<&RankMask>, module: usize, factor: Factor) {
    let cols = param.cols();
    for (k, (p, d)) in param.as_mut_slice().iter_mut().zip(delta.as_slice()).enumerate() {
        if mask.is_none_or(|m| m.keeps_entry(module, factor, k / cols, k % cols)) {
            *p += d;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSlice {
    pub module: usize,
    pub rank: usize,
    pub factor: Factor,
    pub values: Vec<f64>,
}

/// Rank vectors sent by one client: deltas relative to the parameters it
/// received.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseUpload {
    pub slices: Vec<RankSlice>,
}

impl SparseUpload {
    /// Uploaded real-valued parameters.
    pub fn param_count(&self) -> usize {
        self.slices.iter().map(|s| s.values.len()).sum()
    }

    /// Rank indices sent alongside the values.
    pub fn index_count(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.slices.iter().flat_map(|s| s.values.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.slices.iter_mut().flat_map(|s| s.values.iter_mut())
    }

    pub fn contains_factor(&self, factor: Factor) -> bool {
        self.slices.iter().any(|s| s.factor == factor)
    }

    /// Rank vectors `ranks[m]` of every module's `deltas[m]`.
    pub fn from_ranks(deltas: &[Matrix], factor: Factor, ranks: &[Vec<usize>]) -> Self {
        let mut slices = Vec::new();
        for (m, (delta, rs)) in deltas.iter().zip(ranks).enumerate() {
            for &i in rs {
                slices.push(RankSlice {
                    module: m,
                    rank: i,
                    factor,
                    values: rank_vector(delta, factor, i),
                });
            }
        }
        SparseUpload { slices }
    }

    pub fn extend(&mut self, other: SparseUpload) {
        self.slices.extend(other.slices);
    }

    /// Dense per-module deltas of one factor; absent ranks are zero.
    pub fn decode(&self, factor: Factor, shapes: &[(usize, usize)]) -> Result<Vec<Matrix>> {
        let mut out: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        for s in self.slices.iter().filter(|s| s.factor == factor) {
            let target = out
                .get_mut(s.module)
                .ok_or_else(|| Error::protocol(format!("upload names unknown module {}", s.module)))?;
            if s.rank >= rank_count(target, factor) || s.values.len() != rank_len(target, factor) {
                return Err(Error::protocol(format!(
                    "malformed rank slice ({}, {}) of length {}",
                    s.module,
                    s.rank,
                    s.values.len()
                )));
            }
            match factor {
                Factor::B => target.set_col(s.rank, &s.values),
                Factor::A => target.row_mut(s.rank).copy_from_slice(&s.values),
            }
        }
        Ok(out)
    }
}

/// Packs `trained − snapshot` for every selected rank. A nonzero delta on an
/// excluded rank is a protocol violation.
pub fn encode_sparse_upload(
    trained: &[Matrix],
    snapshot: &[Matrix],
    mask: &RankMask,
    factor: Factor,
) -> Result<SparseUpload> {
    check_pairs(trained, snapshot, "sparse upload")?;
    let mut slices = Vec::new();
    for (m, (t, s)) in trained.iter().zip(snapshot).enumerate() {
        for i in 0..rank_count(t, factor) {
            let tv = rank_vector(t, factor, i);
            let sv = rank_vector(s, factor, i);
            if mask.contains(m, i) {
                slices.push(RankSlice {
                    module: m,
                    rank: i,
                    factor,
                    values: tv.iter().zip(&sv).map(|(a, b)| a - b).collect(),
                });
            } else if tv.iter().zip(&sv).any(|(a, b)| a != b) {
                return Err(Error::protocol(format!(
                    "excluded rank ({m}, {i}) of {factor:?} changed during training"
                )));
            }
        }
    }
    Ok(SparseUpload { slices })
}

/// New factor values: for each `(module, rank)` selected by some client,
/// `snapshot + Σ ŵ_k δ_k` with weights renormalised over the selecting
/// clients; ranks nobody selected are copied from the snapshot.
pub fn aggregate_sparse(snapshot: &[Matrix], uploads: &[(f64, &SparseUpload)], factor: Factor) -> Result<Vec<Matrix>> {
    let shapes: Vec<(usize, usize)> = snapshot.iter().map(Matrix::shape).collect();
    let r = snapshot.first().map_or(0, |m| rank_count(m, factor));
    let mut weight_sum = vec![vec![0.0; r]; snapshot.len()];
    for (w, up) in uploads {
        if !(w.is_finite() && *w > 0.0) {
            return Err(Error::protocol("client weights must be positive"));
        }
        if up.slices.iter().any(|s| s.factor != factor) {
            return Err(Error::protocol(format!(
                "upload carries a factor other than {factor:?}"
            )));
        }
        for s in &up.slices {
            if s.module >= snapshot.len() || s.rank >= r {
                return Err(Error::protocol(format!(
                    "upload names unknown rank ({}, {})",
                    s.module, s.rank
                )));
            }
            weight_sum[s.module][s.rank] += w;
        }
    }
    let mut acc: Vec<Matrix> = shapes.iter().map(|&(a, b)| Matrix::zeros(a, b)).collect();
    for (w, up) in uploads {
        for s in &up.slices {
            if s.values.len() != rank_len(&acc[s.module], factor) {
                return Err(Error::protocol(format!(
                    "malformed rank slice ({}, {})",
                    s.module, s.rank
                )));
            }
            add_rank_scaled(
                &mut acc[s.module],
                &s.values,
                factor,
                s.rank,
                w / weight_sum[s.module][s.rank],
            );
        }
    }
    let mut out = snapshot.to_vec();
    for (m, (target, sums)) in out.iter_mut().zip(&weight_sum).enumerate() {
        for (i, &sum) in sums.iter().enumerate() {
            if sum > 0.0 {
                let v = rank_vector(&acc[m], factor, i);
                add_rank_scaled(target, &v, factor, i, 1.0);
            }
        }
    }
    Ok(out)
}

fn add_rank_scaled(target: &mut Matrix, values: &[f64], factor: Factor, i: usize, scale: f64) {
    match factor {
        Factor::B => {
            for (row, v) in values.iter().enumerate() {
                target.row_mut(row)[i] += scale * v;
            }
        }
        Factor::A => {
            for (t, v) in target.row_mut(i).iter_mut().zip(values) {
                *t += scale * v;
            }
        }
    }
}
