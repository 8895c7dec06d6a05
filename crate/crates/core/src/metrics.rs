//! Measurements: discordance, communication accounting, client similarity,
//! average gradient similarity and parameter-space reach checks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flcore::{freeze_phase, Phase, Strategy};
use crate::linalg::{dot, norm2, numerical_rank, row_space_basis, Matrix};
use crate::model::{AdapterSet, Factor};
use crate::ranksel::RankMask;

/// Singular values at or below this fraction of the largest count as zero.
pub const RANK_TOL: f64 = 1e-8;

fn check_clients(weights: &[f64], clients: &[&AdapterSet]) -> Result<()> {
    if clients.is_empty() || weights.len() != clients.len() {
        return Err(Error::config(
            "discordance needs one weight per client and at least one client",
        ));
    }
    let n = clients[0].len();
    if clients.iter().any(|c| c.len() != n) {
        return Err(Error::config("clients disagree on the module count"));
    }
    Ok(())
}

/// `Σ_m ‖Σ_k w_k B_k A_k − (Σ_k w_k B_k)(Σ_k w_k A_k)‖_F` over the clients'
/// local factors.
pub fn discordance(weights: &[f64], clients: &[&AdapterSet]) -> Result<f64> {
    check_clients(weights, clients)?;
    let mut total = 0.0;
    for m in 0..clients[0].len() {
        let (mean_of_products, mean_b, mean_a) = weighted_module_sums(weights, clients, m);
        total += mean_of_products.sub(&mean_b.matmul(&mean_a)).frobenius_norm();
    }
    Ok(total)
}

/// `Σ_m ‖Σ_k w_k B_k A_k‖_F`, the scale discordance is compared against.
pub fn product_norm(weights: &[f64], clients: &[&AdapterSet]) -> Result<f64> {
    check_clients(weights, clients)?;
    Ok((0..clients[0].len())
        .map(|m| weighted_module_sums(weights, clients, m).0.frobenius_norm())
        .sum())
}

fn weighted_module_sums(weights: &[f64], clients: &[&AdapterSet], m: usize) -> (Matrix, Matrix, Matrix) {
    let first = &clients[0].modules[m];
    let mut prod = Matrix::zeros(first.b.rows(), first.a.cols());
    let mut b = Matrix::zeros(first.b.rows(), first.b.cols());
    let mut a = Matrix::zeros(first.a.rows(), first.a.cols());
    for (w, c) in weights.iter().zip(clients) {
        let ad = &c.modules[m];
        prod.axpy(*w, &ad.b.matmul(&ad.a));
        b.axpy(*w, &ad.b);
        a.axpy(*w, &ad.a);
    }
    (prod, b, a)
}

/// What one client transmits in a round.
#[derive(Debug, Clone, Copy)]
pub enum ClientAlloc<'a> {
    Rank(usize),
    Mask(&'a RankMask),
}

/// Parameters uploaded in round `t` by all clients, from the accounting
/// rule of each strategy. `dims[m] = (d1, d2)`.
pub fn comm_cost(strategy: Strategy, t: usize, dims: &[(usize, usize)], clients: &[ClientAlloc]) -> Result<u64> {
    let mut total = 0u64;
    for alloc in clients {
        for (m, &(d1, d2)) in dims.iter().enumerate() {
            let per_module = match (strategy, alloc) {
                (Strategy::FlLora | Strategy::FlexLora | Strategy::HetLora, ClientAlloc::Rank(r)) => r * (d1 + d2),
                (Strategy::FfaLora, ClientAlloc::Rank(r)) => r * d1,
                (Strategy::LoraA2, ClientAlloc::Mask(mask)) => {
                    let width = match freeze_phase(t) {
                        Factor::B => d1,
                        Factor::A => d2,
                    };
                    mask.module_count(m) * width
                }
                (s, _) => {
                    return Err(Error::config(format!(
                        "no upload accounting for {s:?} with this allocation"
                    )));
                }
            };
            total += per_module as u64;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    RankJaccard,
    UpdateCosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub kind: SimilarityKind,
    pub values: Matrix,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.values[(j, k)]
    }

    /// Mean over the off-diagonal pairs `j < k` accepted by `keep`; `None`
    /// when no pair qualifies.
    pub fn mean_pairs(&self, keep: impl Fn(usize, usize) -> bool) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for j in 0..self.len() {
            for k in j + 1..self.len() {
                if keep(j, k) {
                    sum += self.get(j, k);
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// `|R_j ∩ R_k| / |R_j ∪ R_k|`; two empty selections count as identical.
pub fn rank_jaccard(masks: &[RankMask]) -> SimilarityMatrix {
    let sets: Vec<_> = masks.iter().map(RankMask::selected_set).collect();
    let n = sets.len();
    let mut values = Matrix::zeros(n, n);
    for j in 0..n {
        for k in j..n {
            let union = sets[j].union(&sets[k]).count();
            let v = if union == 0 {
                1.0
            } else {
                sets[j].intersection(&sets[k]).count() as f64 / union as f64
            };
            values.row_mut(j)[k] = v;
            values.row_mut(k)[j] = v;
        }
    }
    SimilarityMatrix {
        kind: SimilarityKind::RankJaccard,
        values,
    }
}

/// Cosine of two vectors; 0 if either is zero.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let (nu, nv) = (norm2(u), norm2(v));
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)
}

/// Pairwise cosine of flattened client updates.
pub fn update_cosine(updates: &[Vec<f64>]) -> SimilarityMatrix {
    let n = updates.len();
    let mut values = Matrix::zeros(n, n);
    for j in 0..n {
        for k in j..n {
            let v = if j == k {
                if norm2(&updates[j]) > 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                cosine(&updates[j], &updates[k])
            };
            values.row_mut(j)[k] = v;
            values.row_mut(k)[j] = v;
        }
    }
    SimilarityMatrix {
        kind: SimilarityKind::UpdateCosine,
        values,
    }
}

/// Concatenation of every module's matrix, row-major.
pub fn flatten(mats: &[Matrix]) -> Vec<f64> {
    mats.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
}

/// `(1/n²) Σ_i Σ_j cos(x_i − y_i, x_j − y_j)` with `x` the current and `y`
/// the previous per-client cumulative updates. The `i = j` terms are
/// included.
pub fn average_gradient_similarity(current: &[Vec<f64>], previous: &[Vec<f64>]) -> Result<f64> {
    if current.is_empty() || current.len() != previous.len() {
        return Err(Error::config("AGS needs matching non-empty client lists"));
    }
    let deltas: Vec<Vec<f64>> = current
        .iter()
        .zip(previous)
        .map(|(c, p)| c.iter().zip(p).map(|(a, b)| a - b).collect())
        .collect();
    let n = deltas.len();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            sum += if i == j {
                if norm2(&deltas[i]) > 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                cosine(&deltas[i], &deltas[j])
            };
        }
    }
    Ok(sum / (n * n) as f64)
}

/// `‖ΔW (I − A⁺A)‖_F`: the part of `ΔW` outside the row space of `a`.
pub fn rowspace_residual(delta_w: &Matrix, a: &Matrix) -> Result<f64> {
    let q = row_space_basis(a, RANK_TOL)?;
    if q.rows() == 0 {
        return Ok(delta_w.frobenius_norm());
    }
    let projected = delta_w.matmul_t(&q).matmul(&q);
    Ok(delta_w.sub(&projected).frobenius_norm())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachCheck {
    /// Numerical rank of each module's cumulative ΔW.
    pub ranks: Vec<usize>,
    /// Largest rowspace residual over modules (FFA-LoRA only).
    pub rowspace_residual: Option<f64>,
    /// Whether the strategy's structural bound holds: residual below 1e-8
    /// for FFA-LoRA, rank ≤ r for FL-LoRA and FlexLoRA. Always true for
    /// the others, whose reach is only recorded.
    pub within_bound: bool,
}

impl ReachCheck {
    pub fn max_rank(&self) -> usize {
        self.ranks.iter().copied().max().unwrap_or(0)
    }
}

/// Checks cumulative `ΔW` per module against the reach of `strategy` with
/// adapter rank `r`; `a_init` is only used for FFA-LoRA.
pub fn reach_checks(cumulative: &[Matrix], strategy: Strategy, r: usize, a_init: &[Matrix]) -> Result<ReachCheck> {
    let ranks = cumulative
        .iter()
        .map(|dw| numerical_rank(dw, RANK_TOL))
        .collect::<Result<Vec<_>>>()?;
    let rowspace_residual = if strategy == Strategy::FfaLora {
        if a_init.len() != cumulative.len() {
            return Err(Error::config("rowspace check needs the initial A of every module"));
        }
        let mut worst: f64 = 0.0;
        for (dw, a) in cumulative.iter().zip(a_init) {
            worst = worst.max(rowspace_residual(dw, a)?);
        }
        Some(worst)
    } else {
        None
    };
    let within_bound = match strategy {
        Strategy::FfaLora => rowspace_residual.is_some_and(|v| v < 1e-8),
        Strategy::FlLora | Strategy::FlexLora => ranks.iter().all(|&k| k <= r),
        Strategy::HetLora | Strategy::LoraA2 => true,
    };
    Ok(ReachCheck {
        ranks,
        rowspace_residual,
        within_bound,
    })
}

/// One line of the run log. Every record of a strategy has the same fields;
/// quantities a strategy does not produce are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub strategy: Strategy,
    pub phase: Phase,
    pub participants: Vec<usize>,
    pub test_accuracy: f64,
    /// Weighted mean of the clients' final-epoch losses.
    pub train_loss: f64,
    pub uploaded_params: u64,
    pub index_metadata: u64,
    pub cumulative_uploaded_params: u64,
    pub discordance: f64,
    /// `Σ_m ‖Σ_k w_k B_k A_k‖_F` for the same round.
    pub discordance_reference: f64,
    /// `(module, rank)` pairs per participant (LoRA-A² only).
    pub selected_ranks: Option<Vec<Vec<(usize, usize)>>>,
    pub ags: Option<f64>,
    /// Numerical rank of each module's cumulative global ΔW.
    pub numerical_ranks: Vec<usize>,
    pub rowspace_residual: Option<f64>,
    pub reach_within_bound: bool,
    pub update_cosine: Option<Vec<Vec<f64>>>,
}
