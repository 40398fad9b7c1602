//! Fixtures shared by the benchmarks.

use fairnews_core::data::{sample_instances, simulate_corpus, TrainingInstance};
use fairnews_core::{seed, Corpus, Model, RunConfig, SimulatorConfig, Variant};

/// Desk-sized corpus, fixed seed.
pub fn corpus() -> Corpus {
    let cfg = RunConfig::default();
    simulate_corpus(&cfg.simulator_config()).expect("simulator config is valid").corpus
}

/// Smaller corpus for the end-to-end benchmark.
pub fn small_corpus() -> Corpus {
    let cfg = SimulatorConfig {
        users: 100,
        news: 200,
        providers: 10,
        seed: 3,
        ..SimulatorConfig::default()
    };
    simulate_corpus(&cfg).expect("simulator config is valid").corpus
}

pub fn model(corpus: &Corpus) -> Model {
    let cfg = RunConfig::default();
    Model::new(cfg.encoder_for(corpus), 7).expect("desk encoder is valid")
}

/// One batch of training instances.
pub fn batch(corpus: &Corpus) -> Vec<TrainingInstance> {
    let cfg = RunConfig::default();
    let mut rng = seed::rng(cfg.seed, "bench");
    let mut inst = sample_instances(&corpus.train, cfg.negatives, &mut rng).instances;
    inst.truncate(cfg.batch_size);
    inst
}

pub fn run_config(epochs: usize) -> RunConfig {
    RunConfig {
        epochs,
        ..RunConfig::default()
    }
}

pub fn full_train_config(epochs: usize) -> fairnews_core::TrainConfig {
    run_config(epochs).train_config(Variant::Full)
}
