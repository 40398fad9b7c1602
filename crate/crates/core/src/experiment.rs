//! Run configuration, the named model variants, ablation and the
//! adversarial-weight sweep.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, SimulatorConfig, Split};
use crate::encoders::{Backbone, EncoderConfig, Model};
use crate::eval::{self, FairnessReport, ProbeConfig, ProbeResult};
use crate::seed;
use crate::training::{train_run, LossWeights, TrainConfig, TrainOutcome};
use crate::{Error, Result};

/// Protected ratio of the headline fairness columns.
pub const HEADLINE_RATIO: f64 = 0.5;
/// Cut-off of the headline fairness columns.
pub const HEADLINE_K: usize = 10;
pub const DEFAULT_SWEEP: [f64; 5] = [0.0, 0.001, 0.004, 0.016, 0.064];

/// Everything a command needs. Top-level keys mirror the command-line
/// flags; the sections hold the remaining knobs. Every random stream is
/// derived from `seed`, including the simulator's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub backbone: Backbone,
    pub lambda_c: f64,
    pub lambda_u: f64,
    pub lambda_n: f64,
    pub lambda_a: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub negatives: usize,
    pub clip_norm: f64,
    pub discriminator_steps: usize,
    pub ratios: Vec<f64>,
    pub ks: Vec<usize>,
    pub sweep: Vec<f64>,
    /// `seed` inside this section is ignored.
    pub simulator: SimulatorConfig,
    /// `vocab_size`, `provider_count` and `backbone` are taken from the
    /// corpus and the top-level key.
    pub encoder: EncoderConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let t = TrainConfig::default();
        Self {
            seed: 42,
            epochs: 5,
            backbone: Backbone::Mhsa,
            lambda_c: w.lambda_c,
            lambda_u: w.lambda_u,
            lambda_n: w.lambda_n,
            lambda_a: w.lambda_a,
            learning_rate: 3e-3,
            batch_size: t.batch_size,
            negatives: t.negatives,
            clip_norm: t.clip_norm,
            discriminator_steps: t.discriminator_steps,
            ratios: eval::DEFAULT_RATIOS.to_vec(),
            ks: eval::DEFAULT_KS.to_vec(),
            sweep: DEFAULT_SWEEP.to_vec(),
            simulator: SimulatorConfig::default(),
            encoder: EncoderConfig::desk(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let mut table: toml::Table = toml::from_str(text).map_err(|e| bad(&e))?;
        // A partial [encoder] section fills in from the desk preset.
        if let Some(toml::Value::Table(enc)) = table.get_mut("encoder") {
            let Ok(toml::Value::Table(mut base)) = toml::Value::try_from(EncoderConfig::desk()) else {
                unreachable!("encoder config serialises to a table")
            };
            base.extend(std::mem::take(enc));
            *enc = base;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e| bad(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config(Variant::Full).validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.ratios.is_empty() || self.ks.is_empty() {
            return Err(Error::Config("ratios and ks must be non-empty".into()));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return Err(Error::Config(format!("ratio {r} must lie in (0, 1)")));
        }
        if let Some(k) = self.ks.iter().find(|&&k| k < eval::RND_STRIDE) {
            return Err(Error::Config(format!("K = {k} is below the rND stride {}", eval::RND_STRIDE)));
        }
        if let Some(l) = self.sweep.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("sweep value {l} must be finite and >= 0")));
        }
        if !(self.probe.train_fraction > 0.0 && self.probe.train_fraction < 1.0) {
            return Err(Error::Config("probe.train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_c: self.lambda_c,
            lambda_u: self.lambda_u,
            lambda_n: self.lambda_n,
            lambda_a: self.lambda_a,
        }
    }

    pub fn simulator_config(&self) -> SimulatorConfig {
        SimulatorConfig {
            seed: seed::derive(self.seed, "simulate"),
            ..self.simulator.clone()
        }
    }

    pub fn encoder_for(&self, corpus: &Corpus) -> EncoderConfig {
        EncoderConfig {
            vocab_size: corpus.vocab.len(),
            provider_count: corpus.providers.len(),
            backbone: self.backbone,
            ..self.encoder.clone()
        }
    }

    pub fn train_config(&self, variant: Variant) -> TrainConfig {
        let (weights, use_biased) = variant.apply(self.weights());
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            negatives: self.negatives,
            clip_norm: self.clip_norm,
            discriminator_steps: self.discriminator_steps,
            use_biased,
            weights,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Biased news and user vectors fixed at zero.
    NoBiased,
    /// `lambda_a = 0`.
    NoAdversarial,
    /// `lambda_u = lambda_n = 0`.
    NoOrthogonal,
    /// Plain recommender: no biased vectors, no fairness terms.
    Baseline,
}

/// The four rows of an ablation table.
pub const ABLATION: [Variant; 4] = [Variant::Full, Variant::NoBiased, Variant::NoAdversarial, Variant::NoOrthogonal];

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoBiased => "no_biased",
            Variant::NoAdversarial => "no_adversarial",
            Variant::NoOrthogonal => "no_orthogonal",
            Variant::Baseline => "baseline",
        }
    }

    /// Weights and biased-path switch for this variant.
    pub fn apply(self, w: LossWeights) -> (LossWeights, bool) {
        match self {
            Variant::Full => (w, true),
            Variant::NoBiased => (w, false),
            Variant::NoAdversarial => (LossWeights { lambda_a: 0.0, ..w }, true),
            Variant::NoOrthogonal => (
                LossWeights {
                    lambda_u: 0.0,
                    lambda_n: 0.0,
                    ..w
                },
                true,
            ),
            Variant::Baseline => (
                LossWeights {
                    lambda_u: 0.0,
                    lambda_n: 0.0,
                    lambda_a: 0.0,
                    ..w
                },
                false,
            ),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Variant::Full, Variant::NoBiased, Variant::NoAdversarial, Variant::NoOrthogonal, Variant::Baseline]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Clone, Debug)]
pub struct VariantRun {
    pub variant: Variant,
    pub train: TrainConfig,
    pub outcome: TrainOutcome,
    /// Test-split report; `probe_accuracy` is the probe on fair news
    /// vectors.
    pub report: FairnessReport,
    pub fair_probe: ProbeResult,
    pub biased_probe: ProbeResult,
}

impl VariantRun {
    pub fn headline_rnd(&self) -> f64 {
        self.report.cell(HEADLINE_RATIO, HEADLINE_K).map_or(f64::NAN, |c| c.rnd)
    }

    pub fn headline_er(&self) -> Option<f64> {
        self.report.cell(HEADLINE_RATIO, HEADLINE_K).and_then(|c| c.er.value())
    }

    pub fn auc(&self) -> f64 {
        self.report.accuracy.auc
    }
}

/// Leakage probes on the fair and the biased news vectors of every
/// article.
pub fn probes(model: &Model, corpus: &Corpus, cfg: &ProbeConfig, root_seed: u64) -> Result<(ProbeResult, ProbeResult)> {
    let labels = corpus.discrimination_labels(model.config().discriminator_classes);
    let fair = eval::encode_all_news(model, corpus)?;
    let biased = model.encode_news_biased(&corpus.provider_ids())?;
    let f = eval::discriminator_probe(&fair, &labels, cfg, &mut seed::rng(root_seed, "probe-fair"))?;
    let b = eval::discriminator_probe(&biased, &labels, cfg, &mut seed::rng(root_seed, "probe-biased"))?;
    Ok((f, b))
}

/// Trains one variant and evaluates it on the test split.
pub fn run_variant(corpus: &Corpus, cfg: &RunConfig, variant: Variant, checkpoint_dir: Option<&Path>) -> Result<VariantRun> {
    cfg.validate()?;
    let train = cfg.train_config(variant);
    let outcome = train_run(corpus, &cfg.encoder_for(corpus), &train, checkpoint_dir)?;
    let mut report = eval::evaluate(&outcome.model, corpus, Split::Test, &cfg.ratios, &cfg.ks)?;
    let (fair_probe, biased_probe) = probes(&outcome.model, corpus, &cfg.probe, cfg.seed)?;
    report.probe_accuracy = Some(fair_probe.accuracy);
    report.metadata.insert("variant".into(), variant.name().into());
    report.metadata.insert("lambda_a".into(), train.weights.lambda_a.to_string());
    report.metadata.insert("seed".into(), cfg.seed.to_string());
    Ok(VariantRun {
        variant,
        train,
        outcome,
        report,
        fair_probe,
        biased_probe,
    })
}

/// Full model and the three ablations, in [`ABLATION`] order.
pub fn ablation(corpus: &Corpus, cfg: &RunConfig) -> Result<Vec<VariantRun>> {
    ABLATION.iter().map(|&v| run_variant(corpus, cfg, v, None)).collect()
}

/// The full model at each adversarial weight.
pub fn sweep_lambda(corpus: &Corpus, cfg: &RunConfig, lambdas: &[f64]) -> Result<Vec<(f64, VariantRun)>> {
    lambdas
        .iter()
        .map(|&l| {
            let c = RunConfig {
                lambda_a: l,
                ..cfg.clone()
            };
            run_variant(corpus, &c, Variant::Full, None).map(|r| (l, r))
        })
        .collect()
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

fn opt6(v: Option<f64>) -> String {
    v.map_or("unbounded".into(), f6)
}

/// One row per variant; deltas are relative to the first row.
pub fn ablation_csv(runs: &[VariantRun]) -> String {
    let mut s = format!("# {}; {}; r={HEADLINE_RATIO}; K={HEADLINE_K}\n", eval::Z_CONVENTION, eval::ER_CONVENTION);
    s.push_str("variant,AUC,MRR,nDCG@10,ER@10,rND@10,delta_AUC,delta_rND@10,probe_fair,probe_biased\n");
    let Some(base) = runs.first() else { return s };
    for r in runs {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.variant,
            f6(r.auc()),
            f6(r.report.accuracy.mrr),
            f6(r.report.accuracy.ndcg10),
            opt6(r.headline_er()),
            f6(r.headline_rnd()),
            f6(r.auc() - base.auc()),
            f6(r.headline_rnd() - base.headline_rnd()),
            f6(r.fair_probe.accuracy),
            f6(r.biased_probe.accuracy)
        )
        .unwrap();
    }
    s
}

pub fn sweep_csv(rows: &[(f64, VariantRun)]) -> String {
    let mut s = format!("# {}; {}; r={HEADLINE_RATIO}; K={HEADLINE_K}\n", eval::Z_CONVENTION, eval::ER_CONVENTION);
    s.push_str("lambda_a,AUC,rND@10,ER@10,probe_fair\n");
    for (l, r) in rows {
        writeln!(
            s,
            "{l},{},{},{},{}",
            f6(r.auc()),
            f6(r.headline_rnd()),
            opt6(r.headline_er()),
            f6(r.fair_probe.accuracy)
        )
        .unwrap();
    }
    s
}
