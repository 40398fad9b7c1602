//! Fair-path inference, accuracy metrics, provider-group exposure metrics
//! and the leakage probe.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_global_norm, sigmoid, Adam, Graph, ParameterStore, Tensor};
use crate::data::{Corpus, Impression, ProviderStats, Split};
use crate::encoders::{fit_history, Model, UserSide};
use crate::{Error, Result};

/// How the rND normaliser is built. Written into every report.
pub const Z_CONVENTION: &str = "rnd_z=max(protected_first,protected_last)";
/// How the ER expectation is read. Written into every report.
pub const ER_CONVENTION: &str = "er=ratio_of_user_means";
/// Stride between rND prefix checkpoints.
pub const RND_STRIDE: usize = 10;

pub const DEFAULT_RATIOS: [f64; 3] = [0.1, 0.3, 0.5];
pub const DEFAULT_KS: [usize; 3] = [10, 30, 50];

const ENCODE_CHUNK: usize = 256;

/// Served score `σ(u^c · n^c)`.
pub fn score_fair(user_fair: &[f64], news_fair: &[f64]) -> f64 {
    sigmoid(dot(user_fair, news_fair))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full-corpus ranking for one user.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub user: String,
    /// News indices, best first.
    pub news: Vec<usize>,
    /// Fair scores aligned with `news`; non-increasing.
    pub scores: Vec<f64>,
}

impl AsRef<[usize]> for RankedList {
    fn as_ref(&self) -> &[usize] {
        &self.news
    }
}

/// Orders indices by raw score descending, ties by ascending id.
pub fn rank_indices(raw: &[f64], ids: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]).then_with(|| ids[a].cmp(&ids[b])));
    order
}

/// Fair vectors of every article, `[|D|, d]`.
pub fn encode_all_news(model: &Model, corpus: &Corpus) -> Result<Tensor> {
    let titles = corpus.titles();
    let d = model.config().repr_dim;
    let mut data = Vec::with_capacity(titles.len() * d);
    for chunk in titles.chunks(ENCODE_CHUNK) {
        data.extend_from_slice(model.encode_news_fair(chunk)?.data());
    }
    Ok(Tensor::new(vec![titles.len(), d], data)?)
}

/// Fair user vectors for the given histories, `[n, d]`.
pub fn encode_user_histories(model: &Model, news: &Tensor, histories: &[&[usize]]) -> Result<Tensor> {
    let m = model.config().history_len;
    let d = model.config().repr_dim;
    let mut data = Vec::with_capacity(histories.len() * d);
    for chunk in histories.chunks(ENCODE_CHUNK) {
        let fitted: Vec<Vec<Option<usize>>> = chunk.iter().map(|h| fit_history(h, m)).collect();
        data.extend_from_slice(model.encode_users(news, &fitted, UserSide::Fair)?.data());
    }
    Ok(Tensor::new(vec![histories.len(), d], data)?)
}

/// First impression of every distinct user, ordered by user id.
pub fn users_of(impressions: &[Impression]) -> Vec<&Impression> {
    let mut first: BTreeMap<&str, &Impression> = BTreeMap::new();
    for imp in impressions {
        first.entry(imp.user.as_str()).or_insert(imp);
    }
    first.into_values().collect()
}

/// Ranks the whole corpus for each distinct user of `impressions`.
pub fn rank_all(model: &Model, corpus: &Corpus, impressions: &[Impression]) -> Result<Vec<RankedList>> {
    let news = encode_all_news(model, corpus)?;
    rank_all_with(model, corpus, &news, impressions)
}

pub(crate) fn rank_all_with(
    model: &Model,
    corpus: &Corpus,
    news: &Tensor,
    impressions: &[Impression],
) -> Result<Vec<RankedList>> {
    let users = users_of(impressions);
    let histories: Vec<&[usize]> = users.iter().map(|i| i.history.as_slice()).collect();
    if histories.is_empty() {
        return Ok(Vec::new());
    }
    let reps = encode_user_histories(model, news, &histories)?;
    let ids: Vec<String> = corpus.news.iter().map(|n| n.id.clone()).collect();
    let out = users
        .iter()
        .zip(reps.rows())
        .map(|(imp, u)| {
            let raw: Vec<f64> = news.rows().map(|n| dot(u, n)).collect();
            let order = rank_indices(&raw, &ids);
            RankedList {
                user: imp.user.clone(),
                scores: order.iter().map(|&i| sigmoid(raw[i])).collect(),
                news: order,
            }
        })
        .collect();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccuracyMetrics {
    pub auc: f64,
    pub mrr: f64,
    pub ndcg10: f64,
    /// Impressions that contributed.
    pub scored: usize,
    /// Impressions lacking a positive or a negative.
    pub excluded: usize,
}

/// AUC with ties counted one half.
pub fn impression_auc(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let (mut correct, mut pairs) = (0.0, 0usize);
    for (i, &yi) in labels.iter().enumerate() {
        if !yi {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                correct += 1.0;
            } else if scores[i] == scores[j] {
                correct += 0.5;
            }
        }
    }
    (pairs > 0).then(|| correct / pairs as f64)
}

fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Mean reciprocal rank of the positives.
pub fn impression_mrr(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let order = order_desc(scores);
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 {
        return None;
    }
    let rr: f64 = order
        .iter()
        .enumerate()
        .filter(|(_, &i)| labels[i])
        .map(|(rank, _)| 1.0 / (rank + 1) as f64)
        .sum();
    Some(rr / positives as f64)
}

/// nDCG@k with binary gain.
pub fn impression_ndcg(labels: &[bool], scores: &[f64], k: usize) -> Option<f64> {
    let order = order_desc(scores);
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 {
        return None;
    }
    let disc = |rank: usize| 1.0 / ((rank + 2) as f64).log2();
    let dcg: f64 = order.iter().take(k).enumerate().filter(|(_, &i)| labels[i]).map(|(r, _)| disc(r)).sum();
    let idcg: f64 = (0..positives.min(k)).map(disc).sum();
    Some(dcg / idcg)
}

/// Per-impression metrics averaged over impressions with at least one
/// positive and one negative.
pub fn accuracy_metrics(rows: &[(Vec<bool>, Vec<f64>)]) -> AccuracyMetrics {
    let (mut auc, mut mrr, mut ndcg) = (Vec::new(), Vec::new(), Vec::new());
    let mut excluded = 0;
    for (labels, scores) in rows {
        match impression_auc(labels, scores) {
            Some(a) => {
                auc.push(a);
                mrr.push(impression_mrr(labels, scores).expect("has a positive"));
                ndcg.push(impression_ndcg(labels, scores, 10).expect("has a positive"));
            }
            None => excluded += 1,
        }
    }
    AccuracyMetrics {
        auc: ordered_mean(&mut auc),
        mrr: ordered_mean(&mut mrr),
        ndcg10: ordered_mean(&mut ndcg),
        scored: auc.len(),
        excluded,
    }
}

/// Mean over values sorted first, so the result does not depend on the
/// input order.
fn ordered_mean(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Fair-path raw inner products `u^c · n^c` of every candidate in
/// `impressions`. They order candidates exactly like [`score_fair`] but do
/// not saturate.
pub fn score_impressions(model: &Model, news: &Tensor, impressions: &[Impression]) -> Result<Vec<(Vec<bool>, Vec<f64>)>> {
    let histories: Vec<&[usize]> = impressions.iter().map(|i| i.history.as_slice()).collect();
    if histories.is_empty() {
        return Ok(Vec::new());
    }
    let users = encode_user_histories(model, news, &histories)?;
    let d = news.shape()[1];
    Ok(impressions
        .iter()
        .zip(users.rows())
        .map(|(imp, u)| {
            let labels = imp.candidates.iter().map(|c| c.1).collect();
            let scores = imp
                .candidates
                .iter()
                .map(|&(n, _)| dot(u, &news.data()[n * d..(n + 1) * d]))
                .collect();
            (labels, scores)
        })
        .collect())
}

/// Protected/unprotected split of providers and their news.
#[derive(Clone, Debug, PartialEq)]
pub struct ProviderGroups {
    pub ratio: f64,
    /// Protected provider ids, least clicked first.
    pub protected: Vec<usize>,
    pub unprotected: Vec<usize>,
    /// Per news index: is it in the protected news set.
    pub protected_news: Vec<bool>,
}

impl ProviderGroups {
    pub fn protected_count(&self) -> usize {
        self.protected_news.iter().filter(|&&p| p).count()
    }

    pub fn news_count(&self) -> usize {
        self.protected_news.len()
    }

    /// Groups from training-split click statistics of `corpus`.
    pub fn from_corpus(corpus: &Corpus, ratio: f64) -> Result<Self> {
        partition_groups(&corpus.provider_stats(), &corpus.provider_ids(), ratio)
    }
}

/// Bottom `round(r·|P|)` providers by average clicks per article (ties by
/// ascending id) are protected. Providers without articles are ignored.
/// The protected count is kept within `[1, |P| - 1]` so both groups exist.
pub fn partition_groups(stats: &[ProviderStats], news_provider: &[usize], ratio: f64) -> Result<ProviderGroups> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Metric(format!("protected ratio {ratio} outside (0, 1)")));
    }
    let mut providers: Vec<usize> = (0..stats.len()).filter(|&p| stats[p].articles > 0).collect();
    if providers.len() < 2 {
        return Err(Error::Metric(format!(
            "fairness needs at least 2 providers with articles, found {}",
            providers.len()
        )));
    }
    providers.sort_by(|&a, &b| {
        stats[a]
            .avg_clicks()
            .total_cmp(&stats[b].avg_clicks())
            .then(a.cmp(&b))
    });
    let k = ((ratio * providers.len() as f64).round() as usize).clamp(1, providers.len() - 1);
    let unprotected = providers.split_off(k);
    let mut is_protected = vec![false; stats.len()];
    for &p in &providers {
        is_protected[p] = true;
    }
    Ok(ProviderGroups {
        ratio,
        protected: providers,
        unprotected,
        protected_news: news_provider.iter().map(|&p| is_protected.get(p).copied().unwrap_or(false)).collect(),
    })
}

/// Exposure ratio value; `Unbounded` when no unprotected article is ever
/// in a top-K list.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExposureRatio {
    Value(f64),
    Unbounded,
}

impl ExposureRatio {
    pub fn value(self) -> Option<f64> {
        match self {
            ExposureRatio::Value(v) => Some(v),
            ExposureRatio::Unbounded => None,
        }
    }
}

impl std::fmt::Display for ExposureRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExposureRatio::Value(v) => write!(f, "{v}"),
            ExposureRatio::Unbounded => f.write_str("unbounded"),
        }
    }
}

fn check_lists<L: AsRef<[usize]>>(lists: &[L], groups: &ProviderGroups, k: usize) -> Result<()> {
    let n = groups.news_count();
    let p = groups.protected_count();
    if p == 0 || p == n {
        return Err(Error::Metric("protected or unprotected news set is empty".into()));
    }
    if k == 0 || k > n {
        return Err(Error::Metric(format!("K = {k} outside [1, {n}]")));
    }
    if lists.is_empty() {
        return Err(Error::Metric("no ranked lists".into()));
    }
    if let Some(l) = lists.iter().find(|l| l.as_ref().len() < k) {
        return Err(Error::Metric(format!("ranked list of length {} shorter than K = {k}", l.as_ref().len())));
    }
    Ok(())
}

fn protected_in_prefix(list: &[usize], groups: &ProviderGroups, n: usize) -> usize {
    list[..n].iter().filter(|&&i| groups.protected_news[i]).count()
}

/// Mean over users of the protected top-K inclusion rate divided by the
/// mean over users of the unprotected rate.
pub fn exposure_ratio_at_k<L: AsRef<[usize]>>(lists: &[L], groups: &ProviderGroups, k: usize) -> Result<ExposureRatio> {
    check_lists(lists, groups, k)?;
    let (mut prot, mut unprot) = (0usize, 0usize);
    for l in lists {
        let c = protected_in_prefix(l.as_ref(), groups, k);
        prot += c;
        unprot += k - c;
    }
    let users = lists.len() as f64;
    let p = groups.protected_count() as f64;
    let u = (groups.news_count() - groups.protected_count()) as f64;
    let num = prot as f64 / p / users;
    let den = unprot as f64 / u / users;
    Ok(if den == 0.0 {
        ExposureRatio::Unbounded
    } else {
        ExposureRatio::Value(num / den)
    })
}

fn rnd_checkpoints(k: usize) -> impl Iterator<Item = usize> {
    (RND_STRIDE..=k).step_by(RND_STRIDE)
}

fn rnd_inner(counts: impl Fn(usize) -> usize, k: usize, share: f64) -> f64 {
    rnd_checkpoints(k)
        .map(|n| (counts(n) as f64 / n as f64 - share).abs() / (n as f64).log2())
        .sum()
}

/// The rND normaliser: the larger of the two extremal rankings' sums.
pub fn rnd_normalizer(protected: usize, total: usize, k: usize) -> f64 {
    let share = protected as f64 / total as f64;
    let unprotected = total - protected;
    let first = rnd_inner(|n| n.min(protected), k, share);
    let last = rnd_inner(|n| n.saturating_sub(unprotected), k, share);
    first.max(last)
}

/// Normalised discounted difference over prefix checkpoints 10, 20, ..., K.
pub fn rnd_at_k<L: AsRef<[usize]>>(lists: &[L], groups: &ProviderGroups, k: usize) -> Result<f64> {
    check_lists(lists, groups, k)?;
    if k < RND_STRIDE {
        return Err(Error::Metric(format!("rND needs K >= {RND_STRIDE}, got {k}")));
    }
    let (p, total) = (groups.protected_count(), groups.news_count());
    let z = rnd_normalizer(p, total, k);
    if z == 0.0 {
        return Err(Error::Metric("rND normaliser is zero".into()));
    }
    let share = p as f64 / total as f64;
    let mut per_user: Vec<f64> = lists
        .iter()
        .map(|l| rnd_inner(|n| protected_in_prefix(l.as_ref(), groups, n), k, share))
        .collect();
    Ok(ordered_mean(&mut per_user) / z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FairnessCell {
    pub ratio: f64,
    pub k: usize,
    pub er: ExposureRatio,
    pub rnd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FairnessReport {
    pub cells: Vec<FairnessCell>,
    pub accuracy: AccuracyMetrics,
    pub probe_accuracy: Option<f64>,
    pub metadata: BTreeMap<String, String>,
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

impl FairnessReport {
    pub fn cell(&self, ratio: f64, k: usize) -> Option<&FairnessCell> {
        self.cells.iter().find(|c| (c.ratio - ratio).abs() < 1e-12 && c.k == k)
    }

    fn header_comment(&self) -> String {
        let mut s = format!("# {Z_CONVENTION}; {ER_CONVENTION}");
        for (k, v) in &self.metadata {
            write!(s, "; {k}={v}").unwrap();
        }
        s.push('\n');
        s
    }

    /// One row per `(r, K)` cell. Accuracy columns repeat on every row.
    pub fn to_csv(&self) -> String {
        let mut s = self.header_comment();
        s.push_str("r,K,ER,rND,AUC,MRR,nDCG@10,probe_accuracy\n");
        let probe = self.probe_accuracy.map_or(String::new(), fmt_f);
        for c in &self.cells {
            let er = c.er.value().map_or("unbounded".to_string(), fmt_f);
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                c.ratio,
                c.k,
                er,
                fmt_f(c.rnd),
                fmt_f(self.accuracy.auc),
                fmt_f(self.accuracy.mrr),
                fmt_f(self.accuracy.ndcg10),
                probe
            )
            .unwrap();
        }
        s
    }

    /// Long format `metric,r,K,value` for plotting.
    pub fn to_long_csv(&self) -> String {
        let mut s = self.header_comment();
        s.push_str("metric,r,K,value\n");
        for c in &self.cells {
            let er = c.er.value().map_or("unbounded".to_string(), fmt_f);
            writeln!(s, "ER,{},{},{er}", c.ratio, c.k).unwrap();
            writeln!(s, "rND,{},{},{}", c.ratio, c.k, fmt_f(c.rnd)).unwrap();
        }
        writeln!(s, "AUC,,,{}", fmt_f(self.accuracy.auc)).unwrap();
        writeln!(s, "MRR,,,{}", fmt_f(self.accuracy.mrr)).unwrap();
        writeln!(s, "nDCG@10,,,{}", fmt_f(self.accuracy.ndcg10)).unwrap();
        if let Some(p) = self.probe_accuracy {
            writeln!(s, "probe_accuracy,,,{}", fmt_f(p)).unwrap();
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "conventions: {Z_CONVENTION}, {ER_CONVENTION}").unwrap();
        writeln!(
            s,
            "AUC {:.4}  MRR {:.4}  nDCG@10 {:.4}  ({} impressions, {} excluded)",
            self.accuracy.auc, self.accuracy.mrr, self.accuracy.ndcg10, self.accuracy.scored, self.accuracy.excluded
        )
        .unwrap();
        if let Some(p) = self.probe_accuracy {
            writeln!(s, "probe accuracy {p:.4}").unwrap();
        }
        writeln!(s, "{:>5} {:>4} {:>10} {:>8}", "r", "K", "ER", "rND").unwrap();
        for c in &self.cells {
            let er = c.er.value().map_or("unbounded".to_string(), |v| format!("{v:.4}"));
            writeln!(s, "{:>4}% {:>4} {:>10} {:>8.4}", (c.ratio * 100.0).round(), c.k, er, c.rnd).unwrap();
        }
        s
    }
}

/// Fairness cells for every `(r, K)` pair from precomputed rankings.
pub fn fairness_cells(corpus: &Corpus, lists: &[RankedList], ratios: &[f64], ks: &[usize]) -> Result<Vec<FairnessCell>> {
    let mut cells = Vec::new();
    for &ratio in ratios {
        let groups = ProviderGroups::from_corpus(corpus, ratio)?;
        for &k in ks {
            cells.push(FairnessCell {
                ratio,
                k,
                er: exposure_ratio_at_k(lists, &groups, k)?,
                rnd: rnd_at_k(lists, &groups, k)?,
            });
        }
    }
    Ok(cells)
}

/// Accuracy and provider fairness of `model` on one split. The probe is
/// left empty; see [`discriminator_probe`].
pub fn evaluate(model: &Model, corpus: &Corpus, split: Split, ratios: &[f64], ks: &[usize]) -> Result<FairnessReport> {
    let impressions = corpus.split(split);
    if impressions.is_empty() {
        return Err(Error::Data(format!("{split:?} split has no impressions")));
    }
    let news = encode_all_news(model, corpus)?;
    let rows = score_impressions(model, &news, impressions)?;
    let lists = rank_all_with(model, corpus, &news, impressions)?;
    Ok(FairnessReport {
        cells: fairness_cells(corpus, &lists, ratios, ks)?,
        accuracy: accuracy_metrics(&rows),
        probe_accuracy: None,
        metadata: BTreeMap::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 300,
            learning_rate: 0.01,
            train_fraction: 0.7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    /// Held-out accuracy of the fresh classifier.
    pub accuracy: f64,
    /// Held-out accuracy of always predicting the most frequent training
    /// label.
    pub majority_baseline: f64,
}

/// Trains a fresh one-hidden-layer classifier on standardised `reps` and
/// reports held-out accuracy.
pub fn discriminator_probe<R: Rng>(
    reps: &Tensor,
    labels: &[usize],
    cfg: &ProbeConfig,
    rng: &mut R,
) -> Result<ProbeResult> {
    let n = labels.len();
    if reps.rank() != 2 || reps.shape()[0] != n {
        return Err(Error::Contract(format!("probe reps {:?} vs {n} labels", reps.shape())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct < 2 {
        return Err(Error::Metric("probe needs at least two provider classes".into()));
    }
    let d = reps.shape()[1];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let cut = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 1);
    let (train, test) = order.split_at(cut);

    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in train {
        for (j, v) in reps.row(i).iter().enumerate() {
            mean[j] += v / train.len() as f64;
        }
    }
    for &i in train {
        for (j, v) in reps.row(i).iter().enumerate() {
            sd[j] += (v - mean[j]).powi(2) / train.len() as f64;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| v.sqrt().max(1e-12)).collect();
    let features = |idx: &[usize]| -> Result<Tensor> {
        let data = idx
            .iter()
            .flat_map(|&i| reps.row(i).iter().enumerate().map(|(j, v)| (v - mean[j]) / sd[j]).collect::<Vec<_>>())
            .collect();
        Ok(Tensor::new(vec![idx.len(), d], data)?)
    };
    let (x_train, x_test) = (features(train)?, features(test)?);
    let y_train: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let y_test: Vec<usize> = test.iter().map(|&i| labels[i]).collect();

    let mut store = ParameterStore::new();
    let glorot = |rng: &mut R, fan_in: usize, fan_out: usize| {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
        Tensor::new(vec![fan_in, fan_out], data).expect("probe weight shape")
    };
    let w1 = store.insert("probe.w1", glorot(rng, d, cfg.hidden));
    let b1 = store.insert("probe.b1", Tensor::zeros(&[cfg.hidden]));
    let w2 = store.insert("probe.w2", glorot(rng, cfg.hidden, classes));
    let b2 = store.insert("probe.b2", Tensor::zeros(&[classes]));
    let forward = |g: &mut Graph, store: &ParameterStore, x: &Tensor| -> Result<crate::autodiff::Var> {
        let x = g.constant(x.clone());
        let (pw1, pb1, pw2, pb2) = (g.param(store, w1), g.param(store, b1), g.param(store, w2), g.param(store, b2));
        let h = g.matmul(x, pw1)?;
        let h = g.add(h, pb1)?;
        let h = g.relu(h);
        let o = g.matmul(h, pw2)?;
        Ok(g.add(o, pb2)?)
    };
    let mut adam = Adam::new(cfg.learning_rate);
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let logits = forward(&mut g, &store, &x_train)?;
        let loss = g.cross_entropy(logits, &y_train)?;
        let mut grads = g.backward(loss)?.params();
        clip_global_norm(&mut grads, 5.0);
        adam.apply(&mut store, &grads)?;
    }
    let mut g = Graph::new();
    let logits = forward(&mut g, &store, &x_test)?;
    let correct = g
        .value(logits)
        .rows()
        .zip(&y_test)
        .filter(|(row, &y)| argmax(row) == y)
        .count();

    let mut counts = vec![0usize; classes];
    for &y in &y_train {
        counts[y] += 1;
    }
    let majority = argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    let baseline = y_test.iter().filter(|&&y| y == majority).count();
    Ok(ProbeResult {
        accuracy: correct as f64 / y_test.len() as f64,
        majority_baseline: baseline as f64 / y_test.len() as f64,
    })
}

/// Index of the largest value; first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
