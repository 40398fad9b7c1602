//! Fair (content) and biased (provider) news encoders, the two user
//! encoders and the provider discriminator.
//!
//! All forward functions append to a caller-owned [`Graph`] so the same code
//! serves training (with gradients) and inference.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, ParamId, ParameterStore, Tensor, Var};
use crate::Error;

/// Token id reserved for padding. Its embedding is the zero vector.
pub const PAD_TOKEN: usize = 0;
/// Token id for out-of-vocabulary words.
pub const OOV_TOKEN: usize = 1;

/// Additive attention mask for padded keys. `exp` of it underflows to 0.
const MASK_VALUE: f64 = -1e30;

/// Context-modelling backbone of the fair news encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// Word embeddings, multi-head self-attention, attention pooling.
    #[default]
    Mhsa,
    /// Mean of word embeddings followed by a linear projection.
    Meanpool,
}

impl std::str::FromStr for Backbone {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mhsa" => Ok(Backbone::Mhsa),
            "meanpool" => Ok(Backbone::Meanpool),
            other => Err(format!("unknown backbone {other:?} (expected mhsa or meanpool)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    /// Title tokens kept per article (first `title_len`).
    pub title_len: usize,
    /// Clicked articles kept per user (most recent `history_len`).
    pub history_len: usize,
    pub word_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub repr_dim: usize,
    pub provider_dim: usize,
    /// Known providers `H`; row `H` of the provider table is the
    /// unknown-provider bucket.
    pub provider_count: usize,
    pub discriminator_classes: usize,
    pub attention_hidden: usize,
    pub discriminator_hidden: usize,
    pub backbone: Backbone,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::full_size()
    }
}

impl EncoderConfig {
    /// Dimensions of the NRMS-style model used on full MIND.
    pub fn full_size() -> Self {
        Self {
            vocab_size: 0,
            title_len: 30,
            history_len: 50,
            word_dim: 300,
            heads: 20,
            head_dim: 20,
            repr_dim: 400,
            provider_dim: 400,
            provider_count: 1,
            discriminator_classes: 51,
            attention_hidden: 200,
            discriminator_hidden: 256,
            backbone: Backbone::Mhsa,
        }
    }

    /// Reduced dimensions that train in minutes on one core.
    pub fn desk() -> Self {
        Self {
            vocab_size: 0,
            title_len: 12,
            history_len: 10,
            word_dim: 32,
            heads: 4,
            head_dim: 8,
            repr_dim: 32,
            provider_dim: 32,
            provider_count: 1,
            discriminator_classes: 51,
            attention_hidden: 16,
            discriminator_hidden: 32,
            backbone: Backbone::Mhsa,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("title_len", self.title_len),
            ("history_len", self.history_len),
            ("word_dim", self.word_dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("repr_dim", self.repr_dim),
            ("provider_dim", self.provider_dim),
            ("provider_count", self.provider_count),
            ("discriminator_classes", self.discriminator_classes),
            ("attention_hidden", self.attention_hidden),
            ("discriminator_hidden", self.discriminator_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be set and at least 1")));
        }
        if self.repr_dim != self.heads * self.head_dim {
            return Err(Error::Config(format!(
                "repr_dim ({}) must equal heads x head_dim ({} x {})",
                self.repr_dim, self.heads, self.head_dim
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must cover padding and OOV".into()));
        }
        Ok(())
    }
}

/// Which user model to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UserSide {
    Fair,
    Biased,
}

/// Paired fair/biased news vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DualNewsRep {
    pub fair: Vec<f64>,
    pub biased: Vec<f64>,
}

/// Paired fair/biased user vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DualUserRep {
    pub fair: Vec<f64>,
    pub biased: Vec<f64>,
}

#[derive(Clone, Debug)]
struct MhsaIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

#[derive(Clone, Debug)]
struct PoolIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
}

#[derive(Clone, Debug)]
enum NewsIds {
    Mhsa { mhsa: MhsaIds, pool: PoolIds },
    Meanpool { proj: ParamId },
}

#[derive(Clone, Debug)]
struct MlpIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    word_emb: ParamId,
    news: NewsIds,
    provider_emb: ParamId,
    provider_mlp: MlpIds,
    user_fair: (MhsaIds, PoolIds),
    user_biased: (MhsaIds, PoolIds),
    discriminator: MlpIds,
}

/// All trainable state of the recommender.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: EncoderConfig,
    params: ParameterStore,
    ids: Ids,
}

struct Init<'a> {
    rng: ChaCha8Rng,
    store: &'a mut ParameterStore,
}

impl Init<'_> {
    fn uniform(&mut self, name: &str, shape: &[usize], limit: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-limit..=limit)).collect();
        self.store
            .insert(name, Tensor::new(shape.to_vec(), data).expect("init shape"))
    }

    fn glorot(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, &[fan_in, fan_out], limit)
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.insert(name, Tensor::zeros(shape))
    }

    fn mhsa(&mut self, prefix: &str, d_in: usize, d_out: usize) -> MhsaIds {
        MhsaIds {
            wq: self.glorot(&format!("{prefix}.wq"), d_in, d_out),
            wk: self.glorot(&format!("{prefix}.wk"), d_in, d_out),
            wv: self.glorot(&format!("{prefix}.wv"), d_in, d_out),
        }
    }

    fn pool(&mut self, prefix: &str, d: usize, hidden: usize) -> PoolIds {
        PoolIds {
            w1: self.glorot(&format!("{prefix}.w1"), d, hidden),
            b1: self.zeros(&format!("{prefix}.b1"), &[hidden]),
            w2: self.glorot(&format!("{prefix}.w2"), hidden, 1),
        }
    }

    fn mlp(&mut self, prefix: &str, d_in: usize, hidden: usize, d_out: usize) -> MlpIds {
        MlpIds {
            w1: self.glorot(&format!("{prefix}.w1"), d_in, hidden),
            b1: self.zeros(&format!("{prefix}.b1"), &[hidden]),
            w2: self.glorot(&format!("{prefix}.w2"), hidden, d_out),
            b2: self.zeros(&format!("{prefix}.b2"), &[d_out]),
        }
    }
}

fn build(cfg: &EncoderConfig, seed: u64, store: &mut ParameterStore) -> Ids {
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        store,
    };
    let word_emb = init.uniform("news.word_embedding", &[cfg.vocab_size, cfg.word_dim], 0.1);
    init.store.get_mut(word_emb).data_mut()[..cfg.word_dim].fill(0.0);
    let news = match cfg.backbone {
        Backbone::Mhsa => NewsIds::Mhsa {
            mhsa: init.mhsa("news.mhsa", cfg.word_dim, cfg.repr_dim),
            pool: init.pool("news.pool", cfg.repr_dim, cfg.attention_hidden),
        },
        Backbone::Meanpool => NewsIds::Meanpool {
            proj: init.glorot("news.projection", cfg.word_dim, cfg.repr_dim),
        },
    };
    let provider_emb = init.uniform(
        "provider.embedding",
        &[cfg.provider_count + 1, cfg.provider_dim],
        0.1,
    );
    let provider_mlp = init.mlp("provider.mlp", cfg.provider_dim, cfg.repr_dim, cfg.repr_dim);
    let user_fair = (
        init.mhsa("user_fair.mhsa", cfg.repr_dim, cfg.repr_dim),
        init.pool("user_fair.pool", cfg.repr_dim, cfg.attention_hidden),
    );
    let user_biased = (
        init.mhsa("user_biased.mhsa", cfg.repr_dim, cfg.repr_dim),
        init.pool("user_biased.pool", cfg.repr_dim, cfg.attention_hidden),
    );
    let discriminator = init.mlp(
        "discriminator",
        cfg.repr_dim,
        cfg.discriminator_hidden,
        cfg.discriminator_classes,
    );
    Ids {
        word_emb,
        news,
        provider_emb,
        provider_mlp,
        user_fair,
        user_biased,
        discriminator,
    }
}

/// Pads with [`PAD_TOKEN`] or truncates to the first `len` tokens.
pub fn fit_title(tokens: &[usize], len: usize) -> Vec<usize> {
    let mut out: Vec<usize> = tokens.iter().copied().take(len).collect();
    out.resize(len, PAD_TOKEN);
    out
}

/// Keeps the `len` most recent entries (history is oldest first) and pads
/// at the end.
pub fn fit_history(history: &[usize], len: usize) -> Vec<Option<usize>> {
    let start = history.len().saturating_sub(len);
    let mut out: Vec<Option<usize>> = history[start..].iter().map(|&i| Some(i)).collect();
    out.resize(len, None);
    out
}

/// True when a title has no non-padding token; its fair vector is zero.
pub fn is_degenerate_title(tokens: &[usize], len: usize) -> bool {
    tokens.iter().take(len).all(|&t| t == PAD_TOKEN)
}

fn key_mask(valid: &[bool], n: usize, copies: usize, queries: usize) -> Option<Tensor> {
    if valid.iter().all(|&v| v) {
        return None;
    }
    let l = valid.len() / n;
    let mut data = Vec::with_capacity(n * copies * queries * l);
    for item in valid.chunks(l) {
        for _ in 0..copies * queries {
            data.extend(item.iter().map(|&v| if v { 0.0 } else { MASK_VALUE }));
        }
    }
    Some(Tensor::new(vec![n * copies, queries, l], data).expect("mask shape"))
}

impl Model {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self, Error> {
        cfg.validate()?;
        let mut params = ParameterStore::new();
        let ids = build(&cfg, seed, &mut params);
        Ok(Self { cfg, params, ids })
    }

    /// Rebuilds a model around stored values (e.g. a loaded checkpoint).
    pub fn from_params(cfg: EncoderConfig, stored: &ParameterStore) -> Result<Self, Error> {
        let mut model = Self::new(cfg, 0)?;
        model.params.assign_from(stored)?;
        Ok(model)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    /// Overwrites word-embedding rows from a whitespace-separated text file
    /// (`word v1 .. v_dim` per line). Returns the number of rows replaced.
    pub fn load_pretrained_embeddings(
        &mut self,
        path: &Path,
        lookup: impl Fn(&str) -> Option<usize>,
    ) -> Result<usize, Error> {
        let dim = self.cfg.word_dim;
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let table = self.params.get_mut(self.ids.word_emb);
        let mut replaced = 0;
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values: Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
            let values = values.map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
            if values.len() != dim {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("expected {dim} values, found {}", values.len()),
                });
            }
            if let Some(id) = lookup(word).filter(|&id| id != PAD_TOKEN && id < self.cfg.vocab_size) {
                table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
                replaced += 1;
            }
        }
        Ok(replaced)
    }

    fn p(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(&self.params, id)
    }

    /// Multi-head self-attention over `n` sequences of length `l` stored as
    /// `[n*l, d_in]`. Returns the contextual outputs `[n*l, repr_dim]` and
    /// the attention weights `[n*heads, l, l]`.
    fn mhsa(
        &self,
        g: &mut Graph,
        x: Var,
        n: usize,
        valid: &[bool],
        ids: &MhsaIds,
    ) -> Result<(Var, Var), AutodiffError> {
        let l = valid.len() / n;
        let (h, k) = (self.cfg.heads, self.cfg.head_dim);
        let split = |g: &mut Graph, w: ParamId| -> Result<Var, AutodiffError> {
            let w = g.param(&self.params, w);
            let p = g.matmul(x, w)?;
            let p = g.reshape(p, &[n, l, h, k])?;
            let p = g.transpose(p, 1, 2)?;
            g.reshape(p, &[n * h, l, k])
        };
        let q = split(g, ids.wq)?;
        let kk = split(g, ids.wk)?;
        let v = split(g, ids.wv)?;
        let kt = g.transpose(kk, 1, 2)?;
        let scores = g.batch_matmul(q, kt)?;
        let mut scores = g.scale(scores, 1.0 / (k as f64).sqrt());
        if let Some(mask) = key_mask(valid, n, h, l) {
            let mask = g.constant(mask);
            scores = g.add(scores, mask)?;
        }
        let att = g.softmax(scores);
        let out = g.batch_matmul(att, v)?;
        let out = g.reshape(out, &[n, h, l, k])?;
        let out = g.transpose(out, 1, 2)?;
        let out = g.reshape(out, &[n * l, h * k])?;
        Ok((out, att))
    }

    /// Additive attention pooling of `[n*l, d]` rows into `[n, d]`.
    fn attention_pool(
        &self,
        g: &mut Graph,
        hs: Var,
        n: usize,
        valid: &[bool],
        ids: &PoolIds,
    ) -> Result<Var, AutodiffError> {
        let l = valid.len() / n;
        let d = g.shape(hs)[1];
        let (w1, b1, w2) = (self.p(g, ids.w1), self.p(g, ids.b1), self.p(g, ids.w2));
        let a = g.matmul(hs, w1)?;
        let a = g.add(a, b1)?;
        let a = g.tanh(a);
        let logits = g.matmul(a, w2)?;
        let mut logits = g.reshape(logits, &[n, 1, l])?;
        if let Some(mask) = key_mask(valid, n, 1, 1) {
            let mask = g.constant(mask);
            logits = g.add(logits, mask)?;
        }
        let weights = g.softmax(logits);
        let h3 = g.reshape(hs, &[n, l, d])?;
        let pooled = g.batch_matmul(weights, h3)?;
        g.reshape(pooled, &[n, d])
    }

    /// Fair news vectors `[titles.len(), repr_dim]` from title tokens only.
    pub fn news_fair(&self, g: &mut Graph, titles: &[&[usize]]) -> Result<Var, Error> {
        self.news_fair_with_attention(g, titles).map(|(v, _)| v)
    }

    fn news_fair_with_attention(
        &self,
        g: &mut Graph,
        titles: &[&[usize]],
    ) -> Result<(Var, Option<Var>), Error> {
        let n = titles.len();
        if n == 0 {
            return Err(Error::Contract("no titles to encode".into()));
        }
        let t = self.cfg.title_len;
        let tokens: Vec<usize> = titles.iter().flat_map(|tt| fit_title(tt, t)).collect();
        if let Some(&bad) = tokens.iter().find(|&&tok| tok >= self.cfg.vocab_size) {
            return Err(AutodiffError::Index {
                op: "embedding_lookup",
                index: bad,
                len: self.cfg.vocab_size,
            }
            .into());
        }
        let valid: Vec<bool> = tokens.iter().map(|&tok| tok != PAD_TOKEN).collect();
        let table = self.p(g, self.ids.word_emb);
        let emb = g.embedding_lookup(table, &tokens, Some(PAD_TOKEN))?;
        match &self.ids.news {
            NewsIds::Mhsa { mhsa, pool } => {
                let (ctx, att) = self.mhsa(g, emb, n, &valid, mhsa)?;
                Ok((self.attention_pool(g, ctx, n, &valid, pool)?, Some(att)))
            }
            NewsIds::Meanpool { proj } => {
                let mut weights = Vec::with_capacity(n * t);
                for item in valid.chunks(t) {
                    let count = item.iter().filter(|&&v| v).count();
                    let w = if count == 0 { 0.0 } else { 1.0 / count as f64 };
                    weights.extend(item.iter().map(|&v| if v { w } else { 0.0 }));
                }
                let weights = g.constant(Tensor::new(vec![n, 1, t], weights)?);
                let emb3 = g.reshape(emb, &[n, t, self.cfg.word_dim])?;
                let mean = g.batch_matmul(weights, emb3)?;
                let mean = g.reshape(mean, &[n, self.cfg.word_dim])?;
                let proj = self.p(g, *proj);
                Ok((g.matmul(mean, proj)?, None))
            }
        }
    }

    /// Maps provider ids outside `[0, H)` to the unknown-provider row `H`.
    pub fn provider_row(&self, provider: usize) -> usize {
        provider.min(self.cfg.provider_count)
    }

    /// Biased news vectors `[providers.len(), repr_dim]` from provider ids
    /// only.
    pub fn news_biased(&self, g: &mut Graph, providers: &[usize]) -> Result<Var, Error> {
        let rows: Vec<usize> = providers.iter().map(|&p| self.provider_row(p)).collect();
        let table = self.p(g, self.ids.provider_emb);
        let e = g.embedding_lookup(table, &rows, None)?;
        Ok(self.mlp(g, e, &self.ids.provider_mlp)?)
    }

    fn mlp(&self, g: &mut Graph, x: Var, ids: &MlpIds) -> Result<Var, AutodiffError> {
        let (w1, b1, w2, b2) = (
            self.p(g, ids.w1),
            self.p(g, ids.b1),
            self.p(g, ids.w2),
            self.p(g, ids.b2),
        );
        let h = g.matmul(x, w1)?;
        let h = g.add(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, w2)?;
        g.add(o, b2)
    }

    /// User vectors `[histories.len(), repr_dim]`. Each history lists rows
    /// of `news_reps` (already fitted to `history_len`; `None` is padding).
    pub fn users(
        &self,
        g: &mut Graph,
        news_reps: Var,
        histories: &[Vec<Option<usize>>],
        side: UserSide,
    ) -> Result<Var, Error> {
        let n = histories.len();
        let m = self.cfg.history_len;
        if n == 0 || histories.iter().any(|h| h.len() != m) {
            return Err(Error::Contract(format!(
                "histories must be non-empty and fitted to length {m}"
            )));
        }
        let rows: Vec<Option<usize>> = histories.iter().flatten().copied().collect();
        let valid: Vec<bool> = rows.iter().map(Option::is_some).collect();
        let x = g.gather_rows(news_reps, &rows)?;
        let (mhsa, pool) = match side {
            UserSide::Fair => &self.ids.user_fair,
            UserSide::Biased => &self.ids.user_biased,
        };
        let (ctx, _) = self.mhsa(g, x, n, &valid, mhsa)?;
        Ok(self.attention_pool(g, ctx, n, &valid, pool)?)
    }

    /// Discriminator logits `[rows, classes]` for fair news vectors.
    pub fn discriminator_logits(&self, g: &mut Graph, fair: Var) -> Result<Var, Error> {
        Ok(self.mlp(g, fair, &self.ids.discriminator)?)
    }

    // Value-level conveniences used by evaluation and tests.

    pub fn encode_news_fair(&self, titles: &[&[usize]]) -> Result<Tensor, Error> {
        let mut g = Graph::new();
        let v = self.news_fair(&mut g, titles)?;
        Ok(g.value(v).clone())
    }

    pub fn encode_news_biased(&self, providers: &[usize]) -> Result<Tensor, Error> {
        let mut g = Graph::new();
        let v = self.news_biased(&mut g, providers)?;
        Ok(g.value(v).clone())
    }

    /// User vectors from precomputed news vectors.
    pub fn encode_users(
        &self,
        news_reps: &Tensor,
        histories: &[Vec<Option<usize>>],
        side: UserSide,
    ) -> Result<Tensor, Error> {
        let mut g = Graph::new();
        let reps = g.constant(news_reps.clone());
        let v = self.users(&mut g, reps, histories, side)?;
        Ok(g.value(v).clone())
    }

    /// Class probabilities of the discriminator.
    pub fn discriminate_provider(&self, fair: &Tensor) -> Result<Tensor, Error> {
        let mut g = Graph::new();
        let c = g.constant(fair.clone());
        let logits = self.discriminator_logits(&mut g, c)?;
        let p = g.softmax(logits);
        Ok(g.value(p).clone())
    }

    /// Attention weights of the fair news MHSA layer, `[n*heads, T, T]`.
    pub fn news_attention_weights(&self, titles: &[&[usize]]) -> Result<Option<Tensor>, Error> {
        let mut g = Graph::new();
        let (_, att) = self.news_fair_with_attention(&mut g, titles)?;
        Ok(att.map(|a| g.value(a).clone()))
    }
}
