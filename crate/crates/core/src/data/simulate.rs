//! Synthetic click logs with a known interest model and a tunable
//! provider-popularity bias.
//!
//! Providers get Zipf popularity `w_i ∝ (i + 1)^-s`, normalised to sum to
//! one. Every article has one topic and one provider; candidate lists
//! over-sample popular providers in proportion to `w`. A user clicks a
//! candidate with probability
//! `sigmoid(α · pref_u[topic] + β · w[provider] − offset)`.
//! Titles mix topic words, filler words and (with some probability) a
//! provider-specific style word, so provider identity is partly readable
//! from content.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, Impression, NewsArticle, ProviderTable, Vocab, DEFAULT_MIN_FREQ};
use crate::autodiff::sigmoid;
use crate::{Error, Result};

/// How raw Zipf weights `(i + 1)^-s` are scaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopularityNorm {
    /// Weights sum to one (popularity share).
    Sum,
    /// The most popular provider has weight one.
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    pub users: usize,
    pub news: usize,
    pub providers: usize,
    pub topics: usize,
    pub zipf_exponent: f64,
    /// Candidate lists sample news with weight `popularity^exposure_exponent`.
    pub exposure_exponent: f64,
    /// Scale of the popularity weights.
    pub popularity_norm: PopularityNorm,
    /// Weight α of the user–topic interest term.
    pub interest_weight: f64,
    /// Weight β of the provider-popularity term.
    pub popularity_weight: f64,
    pub impressions_per_user: usize,
    pub candidates_per_impression: usize,
    /// Unlogged impressions whose clicks form each user's history.
    pub history_impressions: usize,
    pub topics_per_user: usize,
    pub click_offset: f64,
    pub words_per_topic: usize,
    pub filler_words: usize,
    pub style_words_per_provider: usize,
    /// Probability that a title carries a provider style word.
    pub style_word_prob: f64,
    pub min_title_words: usize,
    pub max_title_words: usize,
    pub seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            users: 2000,
            news: 500,
            providers: 20,
            topics: 10,
            zipf_exponent: 1.0,
            popularity_norm: PopularityNorm::Max,
            exposure_exponent: 1.0,
            interest_weight: 4.0,
            popularity_weight: 2.0,
            impressions_per_user: 8,
            candidates_per_impression: 10,
            history_impressions: 8,
            topics_per_user: 2,
            click_offset: 3.5,
            words_per_topic: 30,
            filler_words: 40,
            style_words_per_provider: 3,
            style_word_prob: 0.8,
            min_title_words: 5,
            max_title_words: 9,
            seed: 42,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("users", self.users),
            ("news", self.news),
            ("providers", self.providers),
            ("topics", self.topics),
            ("impressions_per_user", self.impressions_per_user),
            ("candidates_per_impression", self.candidates_per_impression),
            ("topics_per_user", self.topics_per_user),
            ("words_per_topic", self.words_per_topic),
            ("min_title_words", self.min_title_words),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("simulator {name} must be at least 1")));
        }
        if self.providers > self.news {
            return Err(Error::Config("every provider needs at least one article".into()));
        }
        if self.candidates_per_impression > self.news {
            return Err(Error::Config("more candidates per impression than news".into()));
        }
        if self.topics_per_user > self.topics {
            return Err(Error::Config("topics_per_user exceeds topics".into()));
        }
        if self.max_title_words < self.min_title_words {
            return Err(Error::Config("max_title_words < min_title_words".into()));
        }
        for (name, v) in [
            ("interest_weight", self.interest_weight),
            ("popularity_weight", self.popularity_weight),
            ("zipf_exponent", self.zipf_exponent),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("simulator {name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.style_word_prob) {
            return Err(Error::Config("style_word_prob must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Generator-side facts retained for diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Scaled provider popularity, by provider id.
    pub provider_popularity: Vec<f64>,
    pub news_topic: Vec<usize>,
    /// Topic preference weights per user, by user index.
    pub user_prefs: Vec<Vec<f64>>,
    /// `(user id, news id, α · pref)` for every logged candidate pair.
    pub relevance: Vec<(String, String, f64)>,
    /// How often each news was shown in logged impressions.
    pub exposures: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SimulatedCorpus {
    pub corpus: Corpus,
    pub truth: GroundTruth,
}

fn provider_name(i: usize, width: usize) -> String {
    format!("P{i:0width$}")
}

fn user_name(i: usize, width: usize) -> String {
    format!("U{i:0width$}")
}

fn digits(n: usize) -> usize {
    n.to_string().len()
}

/// Weighted sampling of `k` distinct indices (Efraimidis–Spirakis keys).
fn weighted_distinct<R: Rng>(weights: &[f64], k: usize, rng: &mut R) -> Vec<usize> {
    let mut keys: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (u.ln() / w, i)
        })
        .collect();
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keys.truncate(k);
    keys.into_iter().map(|(_, i)| i).collect()
}

fn time_string(minutes: usize) -> String {
    let day = 9 + minutes / (24 * 60);
    let rem = minutes % (24 * 60);
    let (h, m) = (rem / 60, rem % 60);
    let (h12, ampm) = match h {
        0 => (12, "AM"),
        1..=11 => (h, "AM"),
        12 => (12, "PM"),
        _ => (h - 12, "PM"),
    };
    format!("11/{day}/2019 {h12}:{m:02}:00 {ampm}")
}

pub fn simulate_corpus(cfg: &SimulatorConfig) -> Result<SimulatedCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let raw: Vec<f64> = (0..cfg.providers)
        .map(|i| ((i + 1) as f64).powf(-cfg.zipf_exponent))
        .collect();
    let total: f64 = match cfg.popularity_norm {
        PopularityNorm::Sum => raw.iter().sum(),
        PopularityNorm::Max => raw[0],
    };
    let popularity: Vec<f64> = raw.iter().map(|w| w / total).collect();

    let topic_words: Vec<Vec<String>> = (0..cfg.topics)
        .map(|t| (0..cfg.words_per_topic).map(|j| format!("t{t}w{j}")).collect())
        .collect();
    let filler: Vec<String> = (0..cfg.filler_words).map(|j| format!("f{j}")).collect();
    let style: Vec<Vec<String>> = (0..cfg.providers)
        .map(|p| (0..cfg.style_words_per_provider).map(|j| format!("p{p}s{j}")).collect())
        .collect();

    let news_width = digits(cfg.news);
    let mut provider_of = Vec::with_capacity(cfg.news);
    let mut topic_of = Vec::with_capacity(cfg.news);
    let mut titles = Vec::with_capacity(cfg.news);
    for j in 0..cfg.news {
        let provider = if j < cfg.providers { j } else { rng.gen_range(0..cfg.providers) };
        let topic = rng.gen_range(0..cfg.topics);
        let len = rng.gen_range(cfg.min_title_words..=cfg.max_title_words);
        let mut words: Vec<&str> = (0..len)
            .map(|_| {
                if filler.is_empty() || rng.gen_bool(0.6) {
                    topic_words[topic].choose(&mut rng).unwrap().as_str()
                } else {
                    filler.choose(&mut rng).unwrap().as_str()
                }
            })
            .collect();
        if !style[provider].is_empty() && rng.gen_bool(cfg.style_word_prob) {
            let pos = rng.gen_range(0..words.len());
            words[pos] = style[provider].choose(&mut rng).unwrap();
        }
        provider_of.push(provider);
        topic_of.push(topic);
        titles.push(words.join(" "));
    }

    let user_prefs: Vec<Vec<f64>> = (0..cfg.users)
        .map(|_| {
            let mut prefs = vec![0.0; cfg.topics];
            for t in rand::seq::index::sample(&mut rng, cfg.topics, cfg.topics_per_user) {
                prefs[t] = rng.gen_range(0.5..=1.0);
            }
            prefs
        })
        .collect();

    let exposure_weight: Vec<f64> = provider_of.iter().map(|&p| popularity[p].powf(cfg.exposure_exponent)).collect();
    let fair_score = |u: usize, n: usize| cfg.interest_weight * user_prefs[u][topic_of[n]];
    let click_prob = |u: usize, n: usize| {
        sigmoid(fair_score(u, n) + cfg.popularity_weight * popularity[provider_of[n]] - cfg.click_offset)
    };

    let provider_width = digits(cfg.providers.saturating_sub(1));
    let providers = ProviderTable::from_names((0..cfg.providers).map(|i| provider_name(i, provider_width)));
    let vocab = Vocab::build(titles.iter().map(String::as_str), DEFAULT_MIN_FREQ);
    let news: Vec<NewsArticle> = (0..cfg.news)
        .map(|j| NewsArticle {
            id: format!("N{j:0news_width$}"),
            category: format!("topic{}", topic_of[j]),
            subcategory: format!("topic{}", topic_of[j]),
            tokens: vocab.encode(&titles[j]),
            title: titles[j].clone(),
            provider: providers
                .id(&provider_name(provider_of[j], provider_width))
                .expect("provider names are registered"),
        })
        .collect();
    let mut corpus = Corpus::new(news, vocab, providers, 0);

    let user_width = digits(cfg.users);
    let mut exposures = vec![0usize; cfg.news];
    let mut relevance: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut impression_id = 0usize;
    let mut minute = 0usize;
    for u in 0..cfg.users {
        let mut history = Vec::new();
        for _ in 0..cfg.history_impressions {
            for n in weighted_distinct(&exposure_weight, cfg.candidates_per_impression, &mut rng) {
                if rng.gen_bool(click_prob(u, n)) {
                    history.push(n);
                }
            }
        }
        let logged = cfg.impressions_per_user;
        for k in 0..logged {
            let cands = weighted_distinct(&exposure_weight, cfg.candidates_per_impression, &mut rng);
            let candidates: Vec<(usize, bool)> =
                cands.iter().map(|&n| (n, rng.gen_bool(click_prob(u, n)))).collect();
            for &n in &cands {
                exposures[n] += 1;
                relevance.insert((u, n), fair_score(u, n));
            }
            impression_id += 1;
            minute += 7;
            let imp = Impression {
                id: impression_id.to_string(),
                user: user_name(u, user_width),
                time: time_string(minute),
                history: history.clone(),
                candidates,
            };
            // last impression of each user is test, the one before is
            // validation, the rest train
            let split = if logged >= 2 && k + 1 == logged {
                &mut corpus.test
            } else if logged >= 3 && k + 2 == logged {
                &mut corpus.valid
            } else {
                &mut corpus.train
            };
            split.push(imp);
        }
    }

    let relevance = relevance
        .into_iter()
        .map(|((u, n), r)| (user_name(u, user_width), corpus.news[n].id.clone(), r))
        .collect();
    Ok(SimulatedCorpus {
        corpus,
        truth: GroundTruth {
            provider_popularity: popularity,
            news_topic: topic_of,
            user_prefs,
            relevance,
            exposures,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimulatorConfig {
        SimulatorConfig {
            users: 50,
            news: 60,
            providers: 6,
            topics: 4,
            ..SimulatorConfig::default()
        }
    }

    #[test]
    fn validation_rejects_zero_users() {
        let cfg = SimulatorConfig {
            users: 0,
            ..small()
        };
        assert!(matches!(simulate_corpus(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_for_seed() {
        let a = simulate_corpus(&small()).unwrap();
        let b = simulate_corpus(&small()).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.truth, b.truth);
        let c = simulate_corpus(&SimulatorConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn structure() {
        let s = simulate_corpus(&small()).unwrap();
        let c = &s.corpus;
        c.validate().unwrap();
        assert_eq!(c.news.len(), 60);
        assert_eq!(c.providers.len(), 6);
        assert_eq!(c.train.len(), 50 * 6);
        assert_eq!(c.valid.len(), 50);
        assert_eq!(c.test.len(), 50);
        let stats = c.provider_stats();
        assert!(stats[..6].iter().all(|s| s.articles >= 1));
        assert_eq!(stats.iter().map(|s| s.articles).sum::<usize>(), 60);
        assert_eq!(s.truth.provider_popularity[0], 1.0);
        for imp in &c.train {
            assert_eq!(imp.candidates.len(), 10);
            let mut ids: Vec<usize> = imp.candidates.iter().map(|c| c.0).collect();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), 10);
        }
    }

    #[test]
    fn time_strings() {
        assert_eq!(time_string(0), "11/9/2019 12:00:00 AM");
        assert_eq!(time_string(13 * 60 + 5), "11/9/2019 1:05:00 PM");
    }

    #[test]
    fn round_trip_through_files() {
        let s = simulate_corpus(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        crate::data::write_mind_dir(&s.corpus, dir.path()).unwrap();
        let back = Corpus::load_dir(dir.path()).unwrap();
        assert_eq!(back, s.corpus);
    }

    fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    fn per_article(s: &SimulatedCorpus) -> (Vec<usize>, Vec<usize>) {
        let c = &s.corpus;
        let mut clicks = vec![0; c.news.len()];
        let mut shown = vec![0; c.news.len()];
        for imp in c.train.iter().chain(&c.valid).chain(&c.test) {
            for &(n, y) in &imp.candidates {
                shown[n] += 1;
                clicks[n] += usize::from(y);
            }
        }
        (clicks, shown)
    }

    #[test]
    fn no_popularity_term_means_click_rate_independent_of_popularity() {
        let cfg = SimulatorConfig {
            popularity_weight: 0.0,
            click_offset: 2.0,
            ..SimulatorConfig::default()
        };
        let s = simulate_corpus(&cfg).unwrap();
        let (clicks, shown) = per_article(&s);
        assert!(clicks.iter().sum::<usize>() > 10_000);
        let (mut rate, mut pop) = (Vec::new(), Vec::new());
        for (n, article) in s.corpus.news.iter().enumerate() {
            if shown[n] > 0 {
                rate.push(clicks[n] as f64 / shown[n] as f64);
                pop.push(s.truth.provider_popularity[article.provider]);
            }
        }
        let rho = pearson(&pop, &rate);
        assert!(rho.abs() < 0.1, "rho = {rho}");
    }

    #[test]
    fn strong_popularity_term_concentrates_clicks() {
        let cfg = SimulatorConfig {
            interest_weight: 0.0,
            popularity_weight: 20.0,
            ..SimulatorConfig::default()
        };
        let s = simulate_corpus(&cfg).unwrap();
        let (clicks, _) = per_article(&s);
        let stats = s.corpus.provider_stats();
        let per = |p: usize| {
            let articles = stats[p].articles as f64;
            s.corpus
                .news
                .iter()
                .enumerate()
                .filter(|(_, a)| a.provider == p)
                .map(|(n, _)| clicks[n] as f64)
                .sum::<f64>()
                / articles
        };
        // providers are named in popularity order, so ids 0..2 are the top
        // decile of 20 and 18..20 the bottom
        let top = (per(0) + per(1)) / 2.0;
        let bottom = (per(18) + per(19)) / 2.0;
        assert!(top > 5.0 * bottom, "top {top} bottom {bottom}");
    }
}
