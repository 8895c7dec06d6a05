//! Federated orchestration: strategies, local training, aggregation and the
//! round loop.
//!
//! Every client uploads rank vectors of its factor deltas relative to the
//! adapters it received. The server rebuilds each client's factors from the
//! upload (after privatisation) and hands them to the strategy's aggregator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{assign_rank_budgets, BudgetKind, Dataset, Shard};
use crate::dp::{privatize, DpConfig};
use crate::error::{Error, Result};
use crate::linalg::{svd_truncated, tags, Matrix, Rng};
use crate::metrics::{
    average_gradient_similarity, comm_cost, discordance, flatten, product_norm, rank_jaccard, reach_checks,
    update_cosine, ClientAlloc, RoundReport, SimilarityMatrix,
};
use crate::model::{init_model, AdapterSet, Batch, Factor, LoraModel, ModelConfig};
use crate::optim::{AdamWConfig, AdamWState, LrPolicy};
use crate::ranksel::{
    aggregate_sparse, apply_masked_step, encode_sparse_upload, importance_scores, magnitude_scores, select_ranks,
    sensitivity_scores, Criterion, RankMask, SparseUpload,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    FlLora,
    FfaLora,
    #[serde(rename = "flexlora")]
    FlexLora,
    #[serde(rename = "hetlora")]
    HetLora,
    LoraA2,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::FlLora,
        Strategy::FfaLora,
        Strategy::FlexLora,
        Strategy::HetLora,
        Strategy::LoraA2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FlLora => "fl_lora",
            Strategy::FfaLora => "ffa_lora",
            Strategy::FlexLora => "flexlora",
            Strategy::HetLora => "hetlora",
            Strategy::LoraA2 => "lora_a2",
        }
    }

    /// Factors trained in round `t`.
    pub fn phase(self, t: usize) -> Phase {
        match self {
            Strategy::FlLora | Strategy::FlexLora | Strategy::HetLora => Phase::Both,
            Strategy::FfaLora => Phase::B,
            Strategy::LoraA2 => match freeze_phase(t) {
                Factor::B => Phase::B,
                Factor::A => Phase::A,
            },
        }
    }

    /// Whether the adapters carry the global rank `r_G` rather than `r`.
    pub fn uses_global_rank(self) -> bool {
        matches!(self, Strategy::HetLora | Strategy::LoraA2)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy `{s}`")))
    }
}

/// Alternating schedule: B on even rounds, A on odd rounds (0-indexed).
pub fn freeze_phase(t: usize) -> Factor {
    if t.is_multiple_of(2) {
        Factor::B
    } else {
        Factor::A
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    B,
    A,
    Both,
}

impl Phase {
    pub fn factors(self) -> &'static [Factor] {
        match self {
            Phase::B => &[Factor::B],
            Phase::A => &[Factor::A],
            Phase::Both => &[Factor::B, Factor::A],
        }
    }

    pub fn trains(self, f: Factor) -> bool {
        self.factors().contains(&f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: Strategy,
    /// Adapter rank for FL-LoRA, FFA-LoRA and FlexLoRA; per-client rank
    /// budget for HetLoRA and LoRA-A² (under homogeneous budgets).
    pub rank: usize,
    pub budgets: BudgetKind,
    pub gamma: f64,
    /// FlexLoRA truncation rank; defaults to `rank`.
    pub r_target: Option<usize>,
    pub criterion: Criterion,
}

impl StrategyConfig {
    pub fn new(kind: Strategy, rank: usize) -> Self {
        StrategyConfig {
            kind,
            rank,
            budgets: BudgetKind::Homogeneous,
            gamma: 0.99,
            r_target: None,
            criterion: Criterion::Contribution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrPolicy,
    pub adamw: AdamWConfig,
}

impl Default for LocalSpec {
    fn default() -> Self {
        LocalSpec {
            epochs: 5,
            batch_size: 32,
            lr: LrPolicy::default(),
            adamw: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    /// `model.rank` is the global rank `r_G`.
    pub model: ModelConfig,
    pub strategy: StrategyConfig,
    pub local: LocalSpec,
    pub dp: DpConfig,
    /// Fraction of clients sampled each round.
    pub participation: f64,
    /// Put the client update-cosine matrix into every report.
    pub record_similarity: bool,
}

impl SimConfig {
    pub fn adapter_rank(&self) -> usize {
        if self.strategy.kind.uses_global_rank() {
            self.model.rank
        } else {
            self.strategy.rank
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let s = &self.strategy;
        if s.rank == 0 {
            return Err(Error::config("strategy.rank must be at least 1"));
        }
        if s.rank > self.model.rank {
            return Err(Error::config(format!(
                "strategy.rank = {} violates r ≤ r_G (model.r_global = {})",
                s.rank, self.model.rank
            )));
        }
        if !(s.gamma > 0.0 && s.gamma <= 1.0) {
            return Err(Error::config("strategy.gamma must lie in (0, 1]"));
        }
        if let Some(rt) = s.r_target {
            if rt == 0 || rt > s.rank.min(self.model.d) {
                return Err(Error::config("strategy.r_target must lie in 1..=min(r, d)"));
            }
        }
        if self.local.epochs == 0 {
            return Err(Error::config("training.epochs must be at least 1"));
        }
        if self.local.batch_size == 0 {
            return Err(Error::config("training.batch_size must be at least 1"));
        }
        self.local.lr.validate()?;
        self.dp.validate()?;
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config("participation must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Learning rates actually used: the B multiplier belongs to LoRA-A²,
    /// every baseline trains both factors at `eta_a`.
    pub fn effective_lr(&self) -> LrPolicy {
        if self.strategy.kind == Strategy::LoraA2 {
            self.local.lr
        } else {
            LrPolicy::uniform(self.local.lr.eta_a)
        }
    }
}

/// Output of one client's local run.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalResult {
    pub adapters: AdapterSet,
    /// Mean minibatch loss over the final epoch.
    pub mean_loss: f64,
}

fn gather(data: &Dataset, idx: &[usize]) -> Batch {
    let d = data.dim();
    let mut inputs = Matrix::zeros(idx.len(), d);
    let mut labels = Vec::with_capacity(idx.len());
    for (row, &i) in idx.iter().enumerate() {
        inputs.row_mut(row).copy_from_slice(data.samples().row(i));
        labels.push(data.labels()[i]);
    }
    Batch { inputs, labels }
}

/// The whole dataset as one batch.
pub fn full_batch(data: &Dataset) -> Batch {
    Batch {
        inputs: data.samples().clone(),
        labels: data.labels().to_vec(),
    }
}

/// Minibatch AdamW from a copy of `received`. Only the factors in `phase`
/// move; with a mask, excluded entries are never written. Fresh optimizer
/// state; the sample order is reshuffled from `rng` every epoch and the
/// last batch may be short.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    model: &LoraModel,
    data: &Dataset,
    received: &AdapterSet,
    spec: &LocalSpec,
    phase: Phase,
    epochs: usize,
    mask: Option<&RankMask>,
    rng: &mut Rng,
) -> Result<LocalResult> {
    if data.is_empty() {
        return Err(Error::config("local training on an empty shard"));
    }
    if epochs == 0 || spec.batch_size == 0 {
        return Err(Error::config("local training needs epochs ≥ 1 and batch_size ≥ 1"));
    }
    let mut adapters = received.clone();
    let mut states: Vec<[AdamWState; 2]> = adapters
        .modules
        .iter()
        .map(|m| {
            [
                AdamWState::for_param(&m.b, spec.adamw),
                AdamWState::for_param(&m.a, spec.adamw),
            ]
        })
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut mean_loss = 0.0;
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(spec.batch_size) {
            let batch = gather(data, chunk);
            let (loss, grads) = model.loss_and_grads(&adapters, &batch)?;
            loss_sum += loss;
            batches += 1;
            for (m, (adapter, g)) in adapters.modules.iter_mut().zip(&grads.modules).enumerate() {
                for &f in phase.factors() {
                    let slot = match f {
                        Factor::B => 0,
                        Factor::A => 1,
                    };
                    let param = adapter.factor_mut(f);
                    let delta = states[m][slot].step_delta(param, g.factor(f), spec.lr.step_size(f))?;
                    apply_masked_step(param, &delta, mask, m, f);
                }
            }
        }
        mean_loss = loss_sum / batches as f64;
    }
    if !adapters.is_finite() {
        return Err(Error::protocol("local training produced non-finite adapters"));
    }
    Ok(LocalResult { adapters, mean_loss })
}

/// What a client sends back, plus the bookkeeping the simulator keeps.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub weight: f64,
    pub upload: SparseUpload,
    pub uploaded_params: u64,
    /// Rank indices sent with a sparse upload; zero for dense ones.
    pub index_metadata: u64,
    pub train_loss: f64,
    pub mask: Option<RankMask>,
    /// Locally trained adapters before privatisation (never transmitted).
    pub trained: AdapterSet,
}

fn check_weights(clients: &[(f64, &AdapterSet)], base: &AdapterSet) -> Result<()> {
    if clients.is_empty() {
        return Err(Error::protocol("aggregation needs at least one client"));
    }
    let total: f64 = clients.iter().map(|(w, _)| w).sum();
    if (total - 1.0).abs() > 1e-9 || clients.iter().any(|(w, _)| w.is_nan() || *w < 0.0) {
        return Err(Error::protocol(format!(
            "client weights must be non-negative and sum to 1 (got {total})"
        )));
    }
    for (_, c) in clients {
        if c.len() != base.len()
            || c.modules
                .iter()
                .zip(&base.modules)
                .any(|(x, y)| x.b.shape() != y.b.shape() || x.a.shape() != y.a.shape())
        {
            return Err(Error::protocol("client adapters do not match the global shapes"));
        }
    }
    Ok(())
}

fn averaged_factor(base: &AdapterSet, clients: &[(f64, &AdapterSet)], m: usize, f: Factor) -> Matrix {
    let b0 = base.modules[m].factor(f);
    let mut out = b0.clone();
    for (w, c) in clients {
        out.axpy(*w, &c.modules[m].factor(f).sub(b0));
    }
    out
}

/// FedAvg of each factor independently.
pub fn aggregate_fedavg(base: &AdapterSet, clients: &[(f64, &AdapterSet)]) -> Result<AdapterSet> {
    check_weights(clients, base)?;
    let mut out = base.clone();
    for m in 0..base.len() {
        out.modules[m].b = averaged_factor(base, clients, m, Factor::B);
        out.modules[m].a = averaged_factor(base, clients, m, Factor::A);
    }
    Ok(out)
}

/// Averages only `trainable`; the other factor must be bit-identical to the
/// global one on every client.
pub fn aggregate_frozen(base: &AdapterSet, clients: &[(f64, &AdapterSet)], trainable: Factor) -> Result<AdapterSet> {
    check_weights(clients, base)?;
    let frozen = trainable.other();
    for (k, (_, c)) in clients.iter().enumerate() {
        for (m, (x, y)) in c.modules.iter().zip(&base.modules).enumerate() {
            if !x.factor(frozen).bit_eq(y.factor(frozen)) {
                return Err(Error::protocol(format!(
                    "client {k} changed the frozen {frozen:?} factor of module {m}"
                )));
            }
        }
    }
    let mut out = base.clone();
    for m in 0..base.len() {
        *out.modules[m].factor_mut(trainable) = averaged_factor(base, clients, m, trainable);
    }
    Ok(out)
}

/// Averages the full products `B_k A_k` and refactorises the mean with a
/// truncated SVD: `B = U√S`, `A = √S Vᵀ`. Ranks past `r_target` are zero.
pub fn aggregate_flexlora(base: &AdapterSet, clients: &[(f64, &AdapterSet)], r_target: usize) -> Result<AdapterSet> {
    check_weights(clients, base)?;
    let mut out = base.clone();
    for (m, adapter) in out.modules.iter_mut().enumerate() {
        let r = adapter.rank();
        let (d1, d2) = (adapter.d_in(), adapter.d_out());
        if r_target == 0 || r_target > r || r_target > d1.min(d2) {
            return Err(Error::config(format!(
                "flexlora r_target {r_target} must lie in 1..=min({r}, {d1}, {d2})"
            )));
        }
        let w_base = base.modules[m].b.matmul(&base.modules[m].a);
        let mut mean = w_base.clone();
        for (w, c) in clients {
            let ad = &c.modules[m];
            mean.axpy(*w, &ad.b.matmul(&ad.a).sub(&w_base));
        }
        let svd = svd_truncated(&mean, r_target)?;
        let mut b = Matrix::zeros(d1, r);
        let mut a = Matrix::zeros(r, d2);
        for (j, &s) in svd.s.iter().enumerate() {
            let root = s.sqrt();
            for i in 0..d1 {
                b[(i, j)] = svd.u[(i, j)] * root;
            }
            for (dst, &v) in a.row_mut(j).iter_mut().zip(svd.vt.row(j)) {
                *dst = root * v;
            }
        }
        adapter.b = b;
        adapter.a = a;
    }
    Ok(out)
}

/// Zero-padded FedAvg over heterogeneous ranks: client `k` owns only its
/// leading `ranks[k]` rank vectors. Ranks at or beyond the smallest client
/// rank are then scaled by `gamma` in both factors.
pub fn aggregate_hetlora(
    base: &AdapterSet,
    clients: &[(f64, &AdapterSet)],
    ranks: &[usize],
    gamma: f64,
) -> Result<AdapterSet> {
    check_weights(clients, base)?;
    if ranks.len() != clients.len() {
        return Err(Error::protocol("hetlora needs one rank per client"));
    }
    let r_global = base.rank();
    for (k, ((_, c), &rk)) in clients.iter().zip(ranks).enumerate() {
        if rk > r_global {
            return Err(Error::config(format!("client rank {rk} exceeds r_G = {r_global}")));
        }
        let outside = RankMask::leading(base.len(), r_global, rk);
        for (m, (x, y)) in c.modules.iter().zip(&base.modules).enumerate() {
            for f in [Factor::B, Factor::A] {
                let (xm, ym) = (x.factor(f), y.factor(f));
                let cols = xm.cols();
                let touched = xm
                    .as_slice()
                    .iter()
                    .zip(ym.as_slice())
                    .enumerate()
                    .any(|(i, (p, q))| p != q && !outside.keeps_entry(m, f, i / cols, i % cols));
                if touched {
                    return Err(Error::protocol(format!(
                        "client {k} updated ranks beyond its budget {rk} in module {m}"
                    )));
                }
            }
        }
    }
    let mut out = aggregate_fedavg(base, clients)?;
    let min_rank = ranks.iter().copied().min().unwrap_or(r_global);
    if gamma != 1.0 {
        for adapter in &mut out.modules {
            for i in min_rank..r_global {
                for row in 0..adapter.b.rows() {
                    adapter.b[(row, i)] *= gamma;
                }
                for v in adapter.a.row_mut(i) {
                    *v *= gamma;
                }
            }
        }
    }
    Ok(out)
}

/// Everything about one round, for callers that need more than the report.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub report: RoundReport,
    /// Globals broadcast at the start of the round.
    pub received: AdapterSet,
    pub clients: Vec<ClientUpdate>,
    pub update_cosine: SimilarityMatrix,
    pub rank_jaccard: Option<SimilarityMatrix>,
}

/// Server state plus the clients' data for a whole run.
#[derive(Debug, Clone)]
pub struct Simulation {
    cfg: SimConfig,
    lr: LrPolicy,
    model: LoraModel,
    init: AdapterSet,
    globals: AdapterSet,
    test: Dataset,
    shards: Vec<Shard>,
    client_data: Vec<Dataset>,
    budgets: Vec<usize>,
    round: usize,
    /// Globals at the start of the previous two rounds, newest last.
    snapshots: Vec<AdapterSet>,
    prev_cumulative: Vec<Option<Vec<f64>>>,
    cumulative_uploads: u64,
}

impl Simulation {
    /// `shards` index into `train`; their ids must be `0..K` in order.
    pub fn new(cfg: SimConfig, train: &Dataset, test: Dataset, shards: Vec<Shard>) -> Result<Self> {
        cfg.validate()?;
        if shards.is_empty() {
            return Err(Error::config("need at least one client"));
        }
        if shards.iter().enumerate().any(|(k, s)| s.client_id != k || s.is_empty()) {
            return Err(Error::config("shards must be non-empty and numbered 0..K"));
        }
        if train.dim() != cfg.model.d || test.dim() != cfg.model.d {
            return Err(Error::config("data dimension differs from model.d"));
        }
        if train.num_classes() != cfg.model.num_classes {
            return Err(Error::config("data class count differs from model.num_classes"));
        }
        let model_cfg = ModelConfig {
            rank: cfg.adapter_rank(),
            ..cfg.model.clone()
        };
        let (model, init) = init_model(&model_cfg, &mut Rng::derive(cfg.seed, &[tags::MODEL_INIT]))?;
        let k = shards.len();
        let budgets = if cfg.strategy.kind.uses_global_rank() {
            assign_rank_budgets(
                k,
                cfg.strategy.budgets,
                cfg.strategy.rank,
                cfg.model.rank,
                &mut Rng::derive(cfg.seed, &[tags::BUDGETS]),
            )?
            .budgets
        } else {
            vec![cfg.strategy.rank; k]
        };
        let client_data = shards.iter().map(|s| train.subset(&s.indices)).collect();
        Ok(Simulation {
            lr: cfg.effective_lr(),
            cfg,
            model,
            globals: init.clone(),
            init,
            test,
            shards,
            client_data,
            budgets,
            round: 0,
            snapshots: Vec::new(),
            prev_cumulative: vec![None; k],
            cumulative_uploads: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn model(&self) -> &LoraModel {
        &self.model
    }

    pub fn globals(&self) -> &AdapterSet {
        &self.globals
    }

    pub fn initial_adapters(&self) -> &AdapterSet {
        &self.init
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn budgets(&self) -> &[usize] {
        &self.budgets
    }

    pub fn shards(&self) -> &[Shard] {
        &self.shards
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn cumulative_uploads(&self) -> u64 {
        self.cumulative_uploads
    }

    pub fn test_accuracy(&self) -> Result<f64> {
        self.model.accuracy(&self.globals, &self.test)
    }

    fn num_modules(&self) -> usize {
        self.globals.len()
    }

    fn participants(&self, t: usize) -> Vec<usize> {
        let k = self.shards.len();
        let mut ids: Vec<usize> = (0..k).collect();
        if self.cfg.participation >= 1.0 {
            return ids;
        }
        let n = ((self.cfg.participation * k as f64).ceil() as usize).clamp(1, k);
        Rng::derive(self.cfg.seed, &[tags::PARTICIPATION, t as u64]).shuffle(&mut ids);
        ids.truncate(n);
        ids.sort_unstable();
        ids
    }

    /// Factor values the sparse aggregation of round `t` builds on: the
    /// output of round `t − 2`, the last round that wrote this factor. That
    /// is the broadcast of round `t − 1`; the initialisation before that.
    fn snapshot(&self, t: usize) -> &AdapterSet {
        match self.snapshots.last() {
            Some(s) if t >= 2 => s,
            _ => &self.init,
        }
    }

    fn select_mask(
        &self,
        data: &Dataset,
        received: &AdapterSet,
        factor: Factor,
        budget: usize,
        rng: &mut Rng,
    ) -> Result<RankMask> {
        let n = self.num_modules();
        let r = received.rank();
        if budget >= n * r {
            return Ok(RankMask::full(n, r));
        }
        let scores = match self.cfg.strategy.criterion {
            Criterion::Importance => {
                let (_, grads) = self.model.loss_and_grads(received, &full_batch(data))?;
                let g: Vec<Matrix> = grads.modules.iter().map(|g| g.factor(factor).clone()).collect();
                sensitivity_scores(&received.factors(factor), &g, factor)?
            }
            crit => {
                let phase = match factor {
                    Factor::B => Phase::B,
                    Factor::A => Phase::A,
                };
                let probe = local_train(
                    &self.model,
                    data,
                    received,
                    &self.cfg.local_with(self.lr),
                    phase,
                    1,
                    None,
                    rng,
                )?;
                let deltas: Vec<Matrix> = probe
                    .adapters
                    .factors(factor)
                    .iter()
                    .zip(received.factors(factor))
                    .map(|(p, q)| p.sub(&q))
                    .collect();
                if crit == Criterion::Magnitude {
                    magnitude_scores(&deltas, factor)?
                } else {
                    importance_scores(&deltas, &received.factors(factor.other()), factor)?
                }
            }
        };
        select_ranks(&scores, budget)
    }

    fn client_round(&self, k: usize, t: usize, weight: f64, received: &AdapterSet) -> Result<ClientUpdate> {
        let data = &self.client_data[k];
        let kind = self.cfg.strategy.kind;
        let phase = kind.phase(t);
        let n = self.num_modules();
        let r = received.rank();
        let mut rng = Rng::derive(self.cfg.seed, &[tags::CLIENT, k as u64, t as u64]);
        let mask = match kind {
            Strategy::HetLora => Some(RankMask::leading(n, r, self.budgets[k])),
            Strategy::LoraA2 => {
                Some(self.select_mask(data, received, freeze_phase(t), self.budgets[k] * n, &mut rng)?)
            }
            _ => None,
        };
        let spec = self.cfg.local_with(self.lr);
        let local = local_train(
            &self.model,
            data,
            received,
            &spec,
            phase,
            spec.epochs,
            mask.as_ref(),
            &mut rng,
        )?;
        let mut upload = SparseUpload::default();
        for &f in phase.factors() {
            let part = match &mask {
                Some(mk) => encode_sparse_upload(&local.adapters.factors(f), &received.factors(f), mk, f)?,
                None => {
                    let deltas: Vec<Matrix> = local
                        .adapters
                        .factors(f)
                        .iter()
                        .zip(received.factors(f))
                        .map(|(p, q)| p.sub(&q))
                        .collect();
                    SparseUpload::from_ranks(&deltas, f, &vec![(0..r).collect(); n])
                }
            };
            upload.extend(part);
        }
        let mut dp_rng = Rng::derive(self.cfg.seed, &[tags::DP, k as u64, t as u64]);
        privatize(&mut upload, &self.cfg.dp, data.len(), &mut dp_rng)?;
        let index_metadata = if kind == Strategy::LoraA2 {
            upload.index_count() as u64
        } else {
            0
        };
        Ok(ClientUpdate {
            client_id: k,
            weight,
            uploaded_params: upload.param_count() as u64,
            index_metadata,
            upload,
            train_loss: local.mean_loss,
            mask,
            trained: local.adapters,
        })
    }

    /// Client factors as the server sees them: globals plus decoded deltas.
    fn reconstruct(&self, received: &AdapterSet, upload: &SparseUpload) -> Result<AdapterSet> {
        let mut out = received.clone();
        for f in [Factor::B, Factor::A] {
            if !upload.contains_factor(f) {
                continue;
            }
            let shapes: Vec<(usize, usize)> = received.modules.iter().map(|m| m.factor(f).shape()).collect();
            for (adapter, delta) in out.modules.iter_mut().zip(upload.decode(f, &shapes)?) {
                let p = adapter.factor_mut(f);
                *p = p.add(&delta);
            }
        }
        Ok(out)
    }

    /// Broadcast, local training, privatisation, aggregation, evaluation.
    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        let t = self.round;
        self.run_round_inner(t).map_err(|e| match e {
            Error::InRound { .. } => e,
            other => other.in_round(t, None, None),
        })
    }

    fn run_round_inner(&mut self, t: usize) -> Result<RoundOutcome> {
        let kind = self.cfg.strategy.kind;
        let received = self.globals.clone();
        let participants = self.participants(t);
        let total: usize = participants.iter().map(|&k| self.shards[k].len()).sum();
        let weights: Vec<f64> = participants
            .iter()
            .map(|&k| self.shards[k].len() as f64 / total as f64)
            .collect();

        let results: Vec<Result<ClientUpdate>> = participants
            .par_iter()
            .zip(weights.par_iter())
            .map(|(&k, &w)| {
                self.client_round(k, t, w, &received)
                    .map_err(|e| e.in_round(t, Some(k), None))
            })
            .collect();
        let updates: Vec<ClientUpdate> = results.into_iter().collect::<Result<_>>()?;

        let locals: Vec<AdapterSet> = updates
            .iter()
            .map(|u| {
                self.reconstruct(&received, &u.upload)
                    .map_err(|e| e.in_round(t, Some(u.client_id), None))
            })
            .collect::<Result<_>>()?;
        let pairs: Vec<(f64, &AdapterSet)> = weights.iter().copied().zip(locals.iter()).collect();

        let new_globals = match kind {
            Strategy::FlLora => aggregate_fedavg(&received, &pairs)?,
            Strategy::FfaLora => aggregate_frozen(&received, &pairs, Factor::B)?,
            Strategy::FlexLora => {
                let rt = self.cfg.strategy.r_target.unwrap_or(self.cfg.strategy.rank);
                aggregate_flexlora(&received, &pairs, rt)?
            }
            Strategy::HetLora => {
                let ranks: Vec<usize> = participants.iter().map(|&k| self.budgets[k]).collect();
                aggregate_hetlora(&received, &pairs, &ranks, self.cfg.strategy.gamma)?
            }
            Strategy::LoraA2 => {
                let factor = freeze_phase(t);
                let snapshot = self.snapshot(t).factors(factor);
                let current = received.factors(factor);
                if snapshot.iter().zip(&current).any(|(s, c)| !s.bit_eq(c)) {
                    return Err(Error::protocol(format!(
                        "snapshot of {factor:?} drifted from the global factor"
                    )));
                }
                let ups: Vec<(f64, &SparseUpload)> = updates.iter().map(|u| (u.weight, &u.upload)).collect();
                let merged = aggregate_sparse(&snapshot, &ups, factor)?;
                let mut out = received.clone();
                for (adapter, m) in out.modules.iter_mut().zip(merged) {
                    *adapter.factor_mut(factor) = m;
                }
                out
            }
        };
        if !new_globals.is_finite() {
            return Err(Error::protocol("aggregation produced non-finite adapters"));
        }

        // Accounting: the encoded uploads must match the closed-form rule.
        let dims: Vec<(usize, usize)> = received.modules.iter().map(|m| (m.d_in(), m.d_out())).collect();
        let allocs: Vec<ClientAlloc> = updates
            .iter()
            .map(|u| match (kind, &u.mask) {
                (Strategy::LoraA2, Some(mask)) => ClientAlloc::Mask(mask),
                (Strategy::HetLora, _) => ClientAlloc::Rank(self.budgets[u.client_id]),
                _ => ClientAlloc::Rank(received.rank()),
            })
            .collect();
        let expected = comm_cost(kind, t, &dims, &allocs)?;
        let uploaded: u64 = updates.iter().map(|u| u.uploaded_params).sum();
        if expected != uploaded {
            return Err(Error::protocol(format!(
                "uploaded {uploaded} parameters, accounting expects {expected}"
            )));
        }
        let index_metadata: u64 = updates.iter().map(|u| u.index_metadata).sum();

        let local_refs: Vec<&AdapterSet> = locals.iter().collect();
        let disc = discordance(&weights, &local_refs)?;
        let disc_ref = product_norm(&weights, &local_refs)?;

        let init_dw = self.init.delta_ws();
        let received_dw = received.delta_ws();
        let mut per_client_update = Vec::with_capacity(locals.len());
        let mut cumulative_now = Vec::with_capacity(locals.len());
        for local in &locals {
            let dw = local.delta_ws();
            per_client_update.push(flatten(
                &dw.iter().zip(&received_dw).map(|(a, b)| a.sub(b)).collect::<Vec<_>>(),
            ));
            cumulative_now.push(flatten(
                &dw.iter().zip(&init_dw).map(|(a, b)| a.sub(b)).collect::<Vec<_>>(),
            ));
        }
        let (cur, prev): (Vec<Vec<f64>>, Vec<Vec<f64>>) = participants
            .iter()
            .zip(&cumulative_now)
            .filter_map(|(&k, c)| self.prev_cumulative[k].as_ref().map(|p| (c.clone(), p.clone())))
            .unzip();
        let ags = if cur.is_empty() {
            None
        } else {
            Some(average_gradient_similarity(&cur, &prev)?)
        };
        let cosine = update_cosine(&per_client_update);
        let masks: Option<Vec<RankMask>> = (kind == Strategy::LoraA2).then(|| {
            updates
                .iter()
                .map(|u| u.mask.clone().expect("lora_a2 clients carry masks"))
                .collect()
        });
        let jaccard = masks.as_ref().map(|m| rank_jaccard(m));

        let cumulative: Vec<Matrix> = new_globals
            .delta_ws()
            .iter()
            .zip(&init_dw)
            .map(|(a, b)| a.sub(b))
            .collect();
        let reach = reach_checks(
            &cumulative,
            kind,
            self.cfg.adapter_rank(),
            &self.init.factors(Factor::A),
        )?;

        let test_accuracy = self.model.accuracy(&new_globals, &self.test)?;
        let train_loss = updates.iter().map(|u| u.weight * u.train_loss).sum();

        // Commit.
        for (&k, c) in participants.iter().zip(cumulative_now) {
            self.prev_cumulative[k] = Some(c);
        }
        self.snapshots.push(received.clone());
        if self.snapshots.len() > 2 {
            self.snapshots.remove(0);
        }
        self.globals = new_globals;
        self.cumulative_uploads += uploaded;
        self.round += 1;

        let report = RoundReport {
            round: t,
            strategy: kind,
            phase: kind.phase(t),
            participants: participants.clone(),
            test_accuracy,
            train_loss,
            uploaded_params: uploaded,
            index_metadata,
            cumulative_uploaded_params: self.cumulative_uploads,
            discordance: disc,
            discordance_reference: disc_ref,
            selected_ranks: masks.map(|ms| ms.iter().map(RankMask::selected).collect()),
            ags,
            numerical_ranks: reach.ranks.clone(),
            rowspace_residual: reach.rowspace_residual,
            reach_within_bound: reach.within_bound,
            update_cosine: self
                .cfg
                .record_similarity
                .then(|| (0..cosine.len()).map(|j| cosine.values.row(j).to_vec()).collect()),
        };
        Ok(RoundOutcome {
            report,
            received,
            clients: updates,
            update_cosine: cosine,
            rank_jaccard: jaccard,
        })
    }
}

impl SimConfig {
    fn local_with(&self, lr: LrPolicy) -> LocalSpec {
        LocalSpec {
            lr,
            ..self.local.clone()
        }
    }
}
