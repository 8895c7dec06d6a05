//! Synthetic Gaussian-cluster data, non-IID client partitions and client rank
//! budgets.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm2, Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if samples.rows() != labels.len() {
            return Err(Error::config(format!(
                "{} samples but {} labels",
                samples.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::config(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            samples,
            labels,
            num_classes,
        })
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.samples.row(i)).collect();
        let samples = if rows.is_empty() {
            Matrix::zeros(0, self.dim())
        } else {
            Matrix::from_rows(&rows)
        };
        Dataset {
            samples,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Per-class split; `round(n_c · test_fraction)` of each class goes to
    /// the test side. Returns `(train, test)` index lists in ascending order.
    pub fn stratified_split(&self, test_fraction: f64, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::config("data.test_fraction must be in [0, 1)"));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for members in self.indices_by_class() {
            let mut members = members;
            rng.shuffle(&mut members);
            let n_test = (members.len() as f64 * test_fraction).round() as usize;
            test.extend_from_slice(&members[..n_test]);
            train.extend_from_slice(&members[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((train, test))
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    /// Text snapshot: a header line `n d num_classes`, then one line per
    /// sample with the label followed by the `d` feature values.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {} {}", self.len(), self.dim(), self.num_classes);
        for i in 0..self.len() {
            let _ = write!(out, "{}", self.labels[i]);
            for v in self.samples.row(i) {
                let _ = write!(out, " {v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Dataset> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::config("dataset file is empty"))?;
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::config(format!("bad header field {t:?}"))))
            .collect::<Result<_>>()?;
        let [n, d, c] = nums[..] else {
            return Err(Error::config("header must be `n d num_classes`"));
        };
        let mut labels = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n * d);
        for (lineno, line) in lines.enumerate() {
            let mut fields = line.split_whitespace();
            let label = fields
                .next()
                .and_then(|t| t.parse::<usize>().ok())
                .ok_or_else(|| Error::config(format!("line {}: bad label", lineno + 2)))?;
            labels.push(label);
            let before = values.len();
            for t in fields {
                values.push(
                    t.parse::<f64>()
                        .map_err(|_| Error::config(format!("line {}: bad value {t:?}", lineno + 2)))?,
                );
            }
            if values.len() - before != d {
                return Err(Error::config(format!("line {}: expected {d} values", lineno + 2)));
            }
        }
        if labels.len() != n {
            return Err(Error::config(format!(
                "header says {n} samples, found {}",
                labels.len()
            )));
        }
        Dataset::new(Matrix::from_vec(n, d, values)?, labels, c)
    }
}

/// Balanced classes around random unit-norm means, `cluster_std` isotropic
/// noise. Samples are ordered class by class.
pub fn gen_synthetic(
    num_classes: usize,
    d: usize,
    n_per_class: usize,
    cluster_std: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if num_classes == 0 || d == 0 || n_per_class == 0 {
        return Err(Error::config(
            "synthetic data needs positive classes, width and class size",
        ));
    }
    if !(cluster_std.is_finite() && cluster_std >= 0.0) {
        return Err(Error::config("data.cluster_std must be finite and non-negative"));
    }
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
            let n = norm2(&v);
            if n > 0.0 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect();
    let n = num_classes * n_per_class;
    let mut values = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            values.extend(mean.iter().map(|&mu| mu + cluster_std * rng.standard_normal()));
            labels.push(c);
        }
    }
    Dataset::new(Matrix::from_vec(n, d, values)?, labels, num_classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shard {
    pub client_id: usize,
    /// Ascending indices into the parent dataset.
    pub indices: Vec<usize>,
    pub weight: f64,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn finish_shards(groups: Vec<Vec<usize>>) -> Vec<Shard> {
    let total: usize = groups.iter().map(Vec::len).sum();
    groups
        .into_iter()
        .enumerate()
        .map(|(client_id, mut indices)| {
            indices.sort_unstable();
            let weight = indices.len() as f64 / total as f64;
            Shard {
                client_id,
                indices,
                weight,
            }
        })
        .collect()
}

/// Per class, `p ~ Dir(alpha·1_K)` and each sample goes to a client drawn
/// from `p`. Empty clients are then given the last sample of the currently
/// largest shard (lowest id on ties), in ascending client order.
pub fn dirichlet_partition(dataset: &Dataset, k: usize, alpha: f64, rng: &mut Rng) -> Result<Vec<Shard>> {
    if k == 0 {
        return Err(Error::config("need at least one client"));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::config("data.dirichlet_alpha must be positive and finite"));
    }
    if dataset.len() < k {
        return Err(Error::config(format!(
            "{} samples cannot fill {k} non-empty shards",
            dataset.len()
        )));
    }
    let mut groups = vec![Vec::new(); k];
    for members in dataset.indices_by_class() {
        if members.is_empty() {
            continue;
        }
        let p = rng.dirichlet(alpha, k);
        for i in members {
            groups[rng.categorical(&p)].push(i);
        }
    }
    for empty in 0..k {
        if !groups[empty].is_empty() {
            continue;
        }
        let donor = (0..k)
            .max_by(|&a, &b| groups[a].len().cmp(&groups[b].len()).then(b.cmp(&a)))
            .expect("k >= 1");
        let moved = groups[donor].pop().expect("donor holds at least two samples");
        groups[empty].push(moved);
    }
    Ok(finish_shards(groups))
}

/// Clients `2j` and `2j+1` each get one half of classes `2j` and `2j+1`
/// (first half of each class to the even client). Classes `≥ K` are unused.
pub fn pathological_partition(dataset: &Dataset, k: usize) -> Result<Vec<Shard>> {
    if k == 0 || !k.is_multiple_of(2) {
        return Err(Error::config(format!(
            "pathological partition needs an even client count, got {k}"
        )));
    }
    if dataset.num_classes() < k {
        return Err(Error::config(format!(
            "pathological partition needs num_classes >= clients ({} < {k})",
            dataset.num_classes()
        )));
    }
    let by_class = dataset.indices_by_class();
    let mut groups = vec![Vec::new(); k];
    for (c, members) in by_class.iter().enumerate().take(k) {
        if members.len() < 2 {
            return Err(Error::config(format!("class {c} has fewer than 2 samples")));
        }
        let pair = c / 2 * 2;
        let half = members.len() / 2;
        groups[pair].extend_from_slice(&members[..half]);
        groups[pair + 1].extend_from_slice(&members[half..]);
    }
    Ok(finish_shards(groups))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetKind {
    #[default]
    Homogeneous,
    Uniform,
    HeavyTail,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankBudgetAssignment {
    pub kind: BudgetKind,
    pub budgets: Vec<usize>,
}

/// Success probability of the geometric tail in `heavy_tail`.
pub const HEAVY_TAIL_P: f64 = 0.6;

/// Rank budgets in `1..=r_global`.
///
/// `homogeneous` gives every client `r`; `uniform` draws from `{1..r_G}`;
/// `heavy_tail` is `1 + Geometric(0.6)` failures, clamped; `normal` rounds
/// `N(r_G/2, (r_G/4)²)` and clamps.
pub fn assign_rank_budgets(
    k: usize,
    kind: BudgetKind,
    r: usize,
    r_global: usize,
    rng: &mut Rng,
) -> Result<RankBudgetAssignment> {
    if r_global == 0 {
        return Err(Error::config("global rank must be positive"));
    }
    if kind == BudgetKind::Homogeneous && !(1..=r_global).contains(&r) {
        return Err(Error::config(format!(
            "rank budget {r} must satisfy 1 <= r <= r_G = {r_global}"
        )));
    }
    let budgets = (0..k)
        .map(|_| match kind {
            BudgetKind::Homogeneous => r,
            BudgetKind::Uniform => 1 + rng.below(r_global),
            BudgetKind::HeavyTail => {
                let mut v = 1;
                while v < r_global && rng.uniform() >= HEAVY_TAIL_P {
                    v += 1;
                }
                v
            }
            BudgetKind::Normal => {
                let g = rng.gaussian(r_global as f64 / 2.0, r_global as f64 / 4.0).round();
                g.clamp(1.0, r_global as f64) as usize
            }
        })
        .collect();
    Ok(RankBudgetAssignment { kind, budgets })
}
