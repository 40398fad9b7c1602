//! Corpus model, MIND-format I/O, the synthetic biased-click simulator and
//! training-instance sampling.

mod mind;
mod sampling;
mod simulate;
mod vocab;

use std::collections::HashMap;

pub use mind::{load_behaviors, load_news, write_ground_truth, write_mind_dir, LoadedNews, FILES};
pub use sampling::{sample_instances, SampledInstances, TrainingInstance};
pub use simulate::{simulate_corpus, GroundTruth, PopularityNorm, SimulatedCorpus, SimulatorConfig};
pub use vocab::{tokenize, Vocab, DEFAULT_MIN_FREQ};

#[derive(Clone, Debug, PartialEq)]
pub struct NewsArticle {
    pub id: String,
    pub category: String,
    pub subcategory: String,
    /// Raw title as read from the news file.
    pub title: String,
    /// Full title token ids; padding/truncation happens at encode time.
    pub tokens: Vec<usize>,
    /// Provider id in `[0, H]`; `H` is the unknown-provider bucket.
    pub provider: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Impression {
    pub id: String,
    pub user: String,
    pub time: String,
    /// Clicked news indices, oldest first.
    pub history: Vec<usize>,
    /// Candidate news indices with click labels.
    pub candidates: Vec<(usize, bool)>,
}

impl Impression {
    pub fn clicks(&self) -> impl Iterator<Item = usize> + '_ {
        self.candidates.iter().filter(|c| c.1).map(|c| c.0)
    }

    pub fn non_clicks(&self) -> impl Iterator<Item = usize> + '_ {
        self.candidates.iter().filter(|c| !c.1).map(|c| c.0)
    }
}

/// Provider names indexed by provider id. Id `len()` is reserved for news
/// without a known provider.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ProviderTable {
    names: Vec<String>,
}

impl ProviderTable {
    /// Ids follow the lexicographic order of names.
    pub fn from_names(names: impl IntoIterator<Item = String>) -> Self {
        let mut names: Vec<String> = names.into_iter().collect();
        names.sort();
        names.dedup();
        Self { names }
    }

    /// Number of known providers `H`.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn unknown_id(&self) -> usize {
        self.names.len()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn name(&self, id: usize) -> &str {
        self.names.get(id).map_or("<unknown>", String::as_str)
    }
}

/// Per-provider article and training-click counts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProviderStats {
    pub articles: usize,
    pub clicks: usize,
}

impl ProviderStats {
    pub fn avg_clicks(&self) -> f64 {
        if self.articles == 0 {
            0.0
        } else {
            self.clicks as f64 / self.articles as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub news: Vec<NewsArticle>,
    pub vocab: Vocab,
    pub providers: ProviderTable,
    pub train: Vec<Impression>,
    pub valid: Vec<Impression>,
    pub test: Vec<Impression>,
    /// News that had no entry in the provider map.
    pub unmapped_news: usize,
    news_index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(
        news: Vec<NewsArticle>,
        vocab: Vocab,
        providers: ProviderTable,
        unmapped_news: usize,
    ) -> Self {
        let news_index = news.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
        Self {
            news,
            vocab,
            providers,
            train: Vec::new(),
            valid: Vec::new(),
            test: Vec::new(),
            unmapped_news,
            news_index,
        }
    }

    pub fn news_idx(&self, id: &str) -> Option<usize> {
        self.news_index.get(id).copied()
    }

    pub fn split(&self, split: Split) -> &[Impression] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Provider slots including the unknown bucket (`H + 1`).
    pub fn provider_slots(&self) -> usize {
        self.providers.len() + 1
    }

    /// Article counts over all news and click counts over training
    /// impressions, indexed by provider id (length `H + 1`).
    pub fn provider_stats(&self) -> Vec<ProviderStats> {
        let mut stats = vec![ProviderStats::default(); self.provider_slots()];
        for n in &self.news {
            stats[n.provider].articles += 1;
        }
        for imp in &self.train {
            for c in imp.clicks() {
                stats[self.news[c].provider].clicks += 1;
            }
        }
        stats
    }

    /// Class label per news for provider discrimination: the
    /// `classes - 1` providers with the most training clicks get their own
    /// class (ties by provider id), everything else shares the last class.
    pub fn discrimination_labels(&self, classes: usize) -> Vec<usize> {
        assert!(classes >= 2, "need at least two discriminator classes");
        let stats = self.provider_stats();
        let mut order: Vec<usize> = (0..self.providers.len()).collect();
        order.sort_by(|&a, &b| stats[b].clicks.cmp(&stats[a].clicks).then(a.cmp(&b)));
        let mut class_of = vec![classes - 1; self.provider_slots()];
        for (class, &p) in order.iter().take(classes - 1).enumerate() {
            class_of[p] = class;
        }
        self.news.iter().map(|n| class_of[n.provider]).collect()
    }

    pub fn titles(&self) -> Vec<&[usize]> {
        self.news.iter().map(|n| n.tokens.as_slice()).collect()
    }

    pub fn provider_ids(&self) -> Vec<usize> {
        self.news.iter().map(|n| n.provider).collect()
    }

    /// Checks referential integrity and label sanity.
    pub fn validate(&self) -> crate::Result<()> {
        let h = self.providers.len();
        for n in &self.news {
            if n.provider > h {
                return Err(crate::Error::Data(format!("news {} has provider {} > {h}", n.id, n.provider)));
            }
            if let Some(&t) = n.tokens.iter().find(|&&t| t >= self.vocab.len()) {
                return Err(crate::Error::Data(format!("news {} has token {t} outside vocabulary", n.id)));
            }
        }
        for imp in self.train.iter().chain(&self.valid).chain(&self.test) {
            if imp
                .history
                .iter()
                .chain(imp.candidates.iter().map(|c| &c.0))
                .any(|&i| i >= self.news.len())
            {
                return Err(crate::Error::Data(format!("impression {} references unknown news", imp.id)));
            }
        }
        Ok(())
    }
}
