//! Fixtures shared by the benchmarks.

use fedlora::data::{dirichlet_partition, gen_synthetic, Dataset, Shard};
use fedlora::dp::DpConfig;
use fedlora::flcore::{LocalSpec, SimConfig, Simulation, Strategy, StrategyConfig};
use fedlora::linalg::{tags, Rng};
use fedlora::model::ModelConfig;

pub struct Fixture {
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<Shard>,
}

/// 8 classes, `d = 32`, 300 samples per class, 20 clients under `Dir(0.05)`.
pub fn fixture(seed: u64) -> Fixture {
    let full = gen_synthetic(8, 32, 300, 0.3, &mut Rng::derive(seed, &[tags::DATA])).expect("valid data");
    let (tr, te) = full
        .stratified_split(0.1, &mut Rng::derive(seed, &[tags::SPLIT]))
        .expect("valid split");
    let train = full.subset(&tr);
    let shards = dirichlet_partition(&train, 20, 0.05, &mut Rng::derive(seed, &[tags::PARTITION])).expect("partition");
    Fixture {
        train,
        test: full.subset(&te),
        shards,
    }
}

/// A simulation over [`fixture`] with one local epoch per round.
pub fn simulation(kind: Strategy, rank: usize, seed: u64) -> Simulation {
    let f = fixture(seed);
    let cfg = SimConfig {
        seed,
        model: ModelConfig::default(),
        strategy: StrategyConfig::new(kind, rank),
        local: LocalSpec {
            epochs: 1,
            batch_size: 16,
            ..LocalSpec::default()
        },
        dp: DpConfig::default(),
        participation: 1.0,
        record_similarity: false,
    };
    Simulation::new(cfg, &f.train, f.test, f.shards).expect("valid simulation")
}
