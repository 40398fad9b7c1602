//! Training objective and the alternating discriminator/encoder schedule.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_global_norm, Adam, Graph, ParamGroup, Var, COSINE_NORM_FLOOR, LOG_PROB_FLOOR};
use crate::data::{sample_instances, Corpus, TrainingInstance};
use crate::encoders::{fit_history, DualNewsRep, DualUserRep, EncoderConfig, Model, UserSide};
use crate::eval::{self, argmax};
use crate::seed;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_u: f64,
    pub lambda_n: f64,
    pub lambda_a: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_u: 1.0,
            lambda_n: 1.0,
            lambda_a: 0.004,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_u", self.lambda_u),
            ("lambda_n", self.lambda_n),
            ("lambda_a", self.lambda_a),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Negatives per clicked candidate (`F`).
    pub negatives: usize,
    pub clip_norm: f64,
    /// Discriminator updates per encoder update.
    pub discriminator_steps: usize,
    /// When false the biased news and user vectors are fixed at zero.
    pub use_biased: bool,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 3,
            learning_rate: 1e-3,
            negatives: 4,
            clip_norm: 5.0,
            discriminator_steps: 1,
            use_biased: true,
            weights: LossWeights::default(),
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 || self.negatives == 0 {
            return Err(Error::Config("batch_size and negatives must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Diagnostics of one training step. Losses are the values on the batch
/// before the respective update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub lc: f64,
    pub ld: f64,
    pub la: f64,
    pub lu: f64,
    pub ln: f64,
    pub total: f64,
    pub discriminator_accuracy: f64,
    /// Global gradient norms before clipping.
    pub encoder_grad_norm: f64,
    pub discriminator_grad_norm: f64,
    /// Fair/biased pairs skipped by the orthogonality terms because one
    /// side had (near) zero norm.
    pub degenerate_pairs: usize,
}

/// `(u^c + u^p) · (n^c + n^p)`.
pub fn click_score_biasaware(user: &DualUserRep, news: &DualNewsRep) -> Result<f64> {
    let d = user.fair.len();
    if [user.biased.len(), news.fair.len(), news.biased.len()].iter().any(|&l| l != d) {
        return Err(Error::Contract("bias-aware score needs equal dimensions".into()));
    }
    Ok((0..d)
        .map(|i| (user.fair[i] + user.biased[i]) * (news.fair[i] + news.biased[i]))
        .sum())
}

/// `-log softmax(scores)[0]` for `[positive, negatives...]`.
pub fn nce_loss(positive: f64, negatives: &[f64]) -> f64 {
    let max = negatives.iter().copied().fold(positive, f64::max);
    let lse = max
        + std::iter::once(positive)
            .chain(negatives.iter().copied())
            .map(|s| (s - max).exp())
            .sum::<f64>()
            .ln();
    lse - positive
}

/// Mean NCE loss over rows of `[positive, negatives...]`.
pub fn nce_loss_batch(rows: &[Vec<f64>]) -> f64 {
    rows.iter().map(|r| nce_loss(r[0], &r[1..])).sum::<f64>() / rows.len() as f64
}

/// Mean `-log p[label]` with the probability floored.
pub fn discriminator_loss(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| -p[y].max(LOG_PROB_FLOOR).ln())
        .sum::<f64>()
        / labels.len() as f64
}

/// `|cos(fair, biased)|`, or `None` when either norm is below the floor.
pub fn orthogonal_reg(fair: &[f64], biased: &[f64]) -> Option<f64> {
    let sa = fair.iter().map(|x| x * x).sum::<f64>();
    let sb = biased.iter().map(|x| x * x).sum::<f64>();
    if sa.sqrt() < COSINE_NORM_FLOOR || sb.sqrt() < COSINE_NORM_FLOOR {
        return None;
    }
    Some((eval::dot(fair, biased) / (sa * sb).sqrt()).abs())
}

pub fn total_loss(lc: f64, lu: f64, ln: f64, la: f64, w: &LossWeights) -> f64 {
    w.lambda_c * lc + w.lambda_u * lu + w.lambda_n * ln - w.lambda_a * la
}

/// Graph nodes of the batch objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub lc: Var,
    pub lu: Option<Var>,
    pub ln: Option<Var>,
    pub la: Var,
    pub total: Var,
    /// Fair vectors of the unique batch news.
    pub news_fair: Var,
}

/// Unique news of a batch with local row indices.
#[derive(Clone, Debug)]
pub struct BatchLayout {
    pub news: Vec<usize>,
    pub histories: Vec<Vec<Option<usize>>>,
    /// `[B * (F + 1)]` local rows, positive first in every group.
    pub candidates: Vec<usize>,
    pub group: usize,
}

impl BatchLayout {
    pub fn new(batch: &[TrainingInstance], history_len: usize) -> Result<Self> {
        let first = batch.first().ok_or_else(|| Error::Contract("empty training batch".into()))?;
        let group = first.negatives.len() + 1;
        let mut news = Vec::new();
        let mut local: HashMap<usize, usize> = HashMap::new();
        let mut intern = |n: usize| {
            *local.entry(n).or_insert_with(|| {
                news.push(n);
                news.len() - 1
            })
        };
        let mut histories = Vec::with_capacity(batch.len());
        let mut candidates = Vec::with_capacity(batch.len() * group);
        for inst in batch {
            if inst.negatives.len() + 1 != group {
                return Err(Error::Contract("instances in a batch need the same F".into()));
            }
            histories.push(
                fit_history(&inst.history, history_len)
                    .into_iter()
                    .map(|h| h.map(&mut intern))
                    .collect(),
            );
            candidates.extend(inst.candidates().map(&mut intern));
        }
        Ok(Self {
            news,
            histories,
            candidates,
            group,
        })
    }
}

fn mean_abs_cosine(g: &mut Graph, a: Var, b: Var) -> Result<(Var, usize)> {
    let cos = g.cosine_similarity(a, b)?;
    let degenerate = g
        .value(a)
        .rows()
        .zip(g.value(b).rows())
        .filter(|(x, y)| orthogonal_reg(x, y).is_none())
        .count();
    let abs = g.abs(cos);
    Ok((g.reduce_mean(abs), degenerate))
}

/// Content and orthogonality terms of the objective.
#[derive(Clone, Copy, Debug)]
pub struct EncoderTerms {
    /// Fair vectors of the unique batch news.
    pub news_fair: Var,
    pub lc: Var,
    pub lu: Option<Var>,
    pub ln: Option<Var>,
    /// Fair/biased pairs with a (near) zero side.
    pub degenerate: usize,
}

/// Encodes the batch once and builds `L^c`, `L^u` and `L^n`.
pub fn encoder_terms(
    g: &mut Graph,
    model: &Model,
    corpus: &Corpus,
    layout: &BatchLayout,
    use_biased: bool,
) -> Result<EncoderTerms> {
    let titles: Vec<&[usize]> = layout.news.iter().map(|&n| corpus.news[n].tokens.as_slice()).collect();
    let rows: Vec<Option<usize>> = layout.candidates.iter().map(|&i| Some(i)).collect();
    let c = model.news_fair(g, &titles)?;
    let uc = model.users(g, c, &layout.histories, UserSide::Fair)?;
    let nc = g.gather_rows(c, &rows)?;
    let (mut ua, mut na) = (uc, nc);
    let (mut lu, mut ln, mut degenerate) = (None, None, 0);
    if use_biased {
        let providers: Vec<usize> = layout.news.iter().map(|&n| corpus.news[n].provider).collect();
        let p = model.news_biased(g, &providers)?;
        let up = model.users(g, p, &layout.histories, UserSide::Biased)?;
        let np = g.gather_rows(p, &rows)?;
        ua = g.add(uc, up)?;
        na = g.add(nc, np)?;
        let (u, du) = mean_abs_cosine(g, uc, up)?;
        let (n, dn) = mean_abs_cosine(g, c, p)?;
        lu = Some(u);
        ln = Some(n);
        degenerate = du + dn;
    }
    let b = layout.histories.len();
    let d = g.shape(ua)[1];
    let na3 = g.reshape(na, &[b, layout.group, d])?;
    let ua3 = g.reshape(ua, &[b, d, 1])?;
    let scores = g.batch_matmul(na3, ua3)?;
    let scores = g.reshape(scores, &[b, layout.group])?;
    let lc = g.cross_entropy(scores, &vec![0; b])?;
    Ok(EncoderTerms {
        news_fair: c,
        lc,
        lu,
        ln,
        degenerate,
    })
}

/// Adds `L^a` on the fair news vectors and combines all terms into the
/// weighted total. The discriminator enters with whatever groups `g` has
/// frozen.
pub fn finish_objective(
    g: &mut Graph,
    model: &Model,
    terms: &EncoderTerms,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<ObjectiveVars> {
    let logits = model.discriminator_logits(g, terms.news_fair)?;
    let la = g.cross_entropy(logits, labels)?;
    let mut total = g.scale(terms.lc, weights.lambda_c);
    for (term, w) in [
        (terms.lu, weights.lambda_u),
        (terms.ln, weights.lambda_n),
        (Some(la), -weights.lambda_a),
    ] {
        if let Some(t) = term {
            let s = g.scale(t, w);
            total = g.add(total, s)?;
        }
    }
    Ok(ObjectiveVars {
        lc: terms.lc,
        lu: terms.lu,
        ln: terms.ln,
        la,
        total,
        news_fair: terms.news_fair,
    })
}

/// Full objective on `g`. Provider labels are per unique batch news
/// (`layout.news`).
pub fn build_objective(
    g: &mut Graph,
    model: &Model,
    corpus: &Corpus,
    layout: &BatchLayout,
    labels: &[usize],
    weights: &LossWeights,
    use_biased: bool,
) -> Result<(ObjectiveVars, usize)> {
    let terms = encoder_terms(g, model, corpus, layout, use_biased)?;
    Ok((finish_objective(g, model, &terms, labels, weights)?, terms.degenerate))
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{name} = {v}; step aborted")))
    }
}

/// Owns the model and both optimisers.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    encoder_opt: Adam,
    discriminator_opt: Adam,
    /// Provider class per news index.
    labels: Vec<usize>,
}

impl Trainer {
    pub fn new(model: Model, corpus: &Corpus, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let labels = corpus.discrimination_labels(model.config().discriminator_classes);
        Ok(Self {
            model,
            encoder_opt: Adam::new(config.learning_rate),
            discriminator_opt: Adam::new(config.learning_rate),
            config,
            labels,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Phase A: discriminator step(s) on the batch's fair news vectors with
    /// the encoders held fixed. Phase B: one encoder step on the full
    /// objective with the updated discriminator held fixed.
    pub fn train_step(&mut self, corpus: &Corpus, batch: &[TrainingInstance]) -> Result<StepReport> {
        let layout = BatchLayout::new(batch, self.model.config().history_len)?;
        let labels: Vec<usize> = layout.news.iter().map(|&n| self.labels[n]).collect();
        let cfg = &self.config;

        let mut g = Graph::new();
        g.freeze(ParamGroup::Discriminator);
        let terms = encoder_terms(&mut g, &self.model, corpus, &layout, cfg.use_biased)?;
        let fair = g.value(terms.news_fair).clone();

        let (mut ld, mut accuracy, mut disc_norm) = (0.0, 0.0, 0.0);
        for k in 0..cfg.discriminator_steps {
            let mut ga = Graph::new();
            ga.freeze(ParamGroup::Encoder);
            let c = ga.constant(fair.clone());
            let logits = self.model.discriminator_logits(&mut ga, c)?;
            let loss = ga.cross_entropy(logits, &labels)?;
            let value = finite("L^d", ga.value(loss).item())?;
            if k == 0 {
                ld = value;
                accuracy = ga
                    .value(logits)
                    .rows()
                    .zip(&labels)
                    .filter(|(r, &y)| argmax(r) == y)
                    .count() as f64
                    / labels.len() as f64;
            }
            let mut grads = ga.backward(loss)?.params();
            let norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if k == 0 {
                disc_norm = norm;
            }
            self.discriminator_opt.apply(self.model.params_mut(), &grads)?;
        }

        let vars = finish_objective(&mut g, &self.model, &terms, &labels, &cfg.weights)?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        let lc = finite("L^c", value(Some(vars.lc)))?;
        let lu = finite("L^u", value(vars.lu))?;
        let ln = finite("L^n", value(vars.ln))?;
        let la = finite("L^a", value(Some(vars.la)))?;
        let total = finite("L", value(Some(vars.total)))?;
        let mut grads = g.backward(vars.total)?.params();
        let enc_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        finite("encoder gradient norm", enc_norm)?;
        self.encoder_opt.apply(self.model.params_mut(), &grads)?;
        Ok(StepReport {
            lc,
            ld,
            la,
            lu,
            ln,
            total,
            discriminator_accuracy: accuracy,
            encoder_grad_norm: enc_norm,
            discriminator_grad_norm: disc_norm,
            degenerate_pairs: terms.degenerate,
        })
    }
}

/// Mean losses and validation metrics of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lc: f64,
    pub ld: f64,
    pub la: f64,
    pub lu: f64,
    pub ln: f64,
    pub val_auc: Option<f64>,
    pub val_rnd10: Option<f64>,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,L_c,L_d,L_a,L_u,L_n,val_auc,val_rnd@10";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.epoch,
            self.lc,
            self.ld,
            self.la,
            self.lu,
            self.ln,
            opt(self.val_auc),
            opt(self.val_rnd10)
        )
    }
}

pub fn epoch_log_csv(logs: &[EpochLog]) -> String {
    let mut s = format!("{EPOCH_LOG_HEADER}\n");
    for l in logs {
        writeln!(s, "{}", l.csv_row()).unwrap();
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation AUC (the last
    /// epoch when there is no validation split).
    pub model: Model,
    pub best_epoch: usize,
    pub epochs: Vec<EpochLog>,
    pub skipped_impressions: usize,
}

/// Protected ratio used for the rND@10 column of the epoch log.
const LOG_RND_RATIO: f64 = 0.5;

fn validation(model: &Model, corpus: &Corpus) -> Result<(Option<f64>, Option<f64>)> {
    if corpus.valid.is_empty() {
        return Ok((None, None));
    }
    let news = eval::encode_all_news(model, corpus)?;
    let rows = eval::score_impressions(model, &news, &corpus.valid)?;
    let auc = eval::accuracy_metrics(&rows).auc;
    let lists = eval::rank_all_with(model, corpus, &news, &corpus.valid)?;
    let rnd = eval::ProviderGroups::from_corpus(corpus, LOG_RND_RATIO)
        .and_then(|g| eval::rnd_at_k(&lists, &g, 10.min(corpus.news.len())))
        .ok();
    Ok((Some(auc).filter(|a| a.is_finite()), rnd))
}

/// Full training run. Deterministic for a given seed. When
/// `checkpoint_dir` is set, writes `epoch_{n}.ckpt` after every epoch and
/// `train_log.csv` at the end.
pub fn train_run(
    corpus: &Corpus,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Data("training split has no impressions".into()));
    }
    let model = Model::new(encoder.clone(), seed::derive(config.seed, "init"))?;
    let mut trainer = Trainer::new(model, corpus, config.clone())?;
    let mut best: Option<(f64, usize, Model)> = None;
    let mut logs = Vec::new();
    let mut skipped = 0;
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for epoch in 1..=config.epochs {
        let mut rng = seed::rng(config.seed, &format!("epoch-{epoch}"));
        let sampled = sample_instances(&corpus.train, config.negatives, &mut rng);
        skipped = sampled.skipped_impressions;
        let mut instances = sampled.instances;
        if instances.is_empty() {
            return Err(Error::Data("no training instance: every impression lacks clicks or non-clicks".into()));
        }
        instances.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        let mut steps = 0;
        for batch in instances.chunks(config.batch_size) {
            let r = trainer.train_step(corpus, batch)?;
            for (s, v) in sums.iter_mut().zip([r.lc, r.ld, r.la, r.lu, r.ln]) {
                *s += v;
            }
            steps += 1;
        }
        let (val_auc, val_rnd10) = validation(&trainer.model, corpus)?;
        let mean = |i: usize| sums[i] / steps as f64;
        logs.push(EpochLog {
            epoch,
            lc: mean(0),
            ld: mean(1),
            la: mean(2),
            lu: mean(3),
            ln: mean(4),
            val_auc,
            val_rnd10,
        });
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("epoch_{epoch}.ckpt"));
            trainer.model.params().save(&path).map_err(|e| Error::io(&path, e))?;
        }
        let score = val_auc.unwrap_or(f64::NEG_INFINITY);
        if val_auc.is_none() || best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, trainer.model.clone()));
        }
    }
    if let Some(dir) = checkpoint_dir {
        let path = dir.join("train_log.csv");
        fs::write(&path, epoch_log_csv(&logs)).map_err(|e| Error::io(&path, e))?;
    }
    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, trainer.model),
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        epochs: logs,
        skipped_impressions: skipped,
    })
}
