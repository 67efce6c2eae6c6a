//! NRMS-style recommender: a multi-head self-attention news encoder over
//! title tokens, a self-attention user encoder over clicked-news vectors,
//! and dot-product click scores.
//!
//! Neither encoder uses positional information, so the user vector is
//! invariant to the order of the history. Titles are encoded over their
//! non-pad prefix only, which is equivalent to masking pad positions out of
//! every attention softmax.

pub mod checkpoint;
mod config;

use bigfair_tensor::{Graph, ParamStore, Rng, Stream, Tensor, Var};
use rayon::prelude::*;

pub use config::{Capacity, ModelConfig};

use crate::data::{Dataset, PAD_ID};
use crate::error::{Error, Result};

/// Forward-pass mode. Dropout is active only in training mode.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    fn dropout(&mut self, g: &mut Graph<'_>, x: Var, rate: f64) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => Ok(g.dropout(x, rate, rng)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct AttentionIdx {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct PoolIdx {
    proj: usize,
    bias: usize,
    query: usize,
}

/// Indices of each named parameter in the store.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    embedding: usize,
    news_layers: Vec<AttentionIdx>,
    news_pool: PoolIdx,
    user_attention: AttentionIdx,
    user_pool: PoolIdx,
    score: usize,
    empty_history: usize,
}

/// Parameter names and shapes in store order.
fn parameter_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (e, h, a) = (cfg.token_embed_dim, cfg.hidden_dim, cfg.query_dim);
    let mut specs = vec![("token_embedding".to_string(), vec![cfg.vocab_size, e])];
    for l in 0..cfg.num_layers {
        let input = if l == 0 { e } else { h };
        for w in ["wq", "wk", "wv"] {
            specs.push((format!("news.layer{l}.{w}"), vec![input, h]));
        }
        specs.push((format!("news.layer{l}.wo"), vec![h, h]));
    }
    let pool = |prefix: &str| {
        vec![
            (format!("{prefix}.proj"), vec![h, a]),
            (format!("{prefix}.bias"), vec![1, a]),
            (format!("{prefix}.query"), vec![a, 1]),
        ]
    };
    specs.extend(pool("news.pool"));
    for w in ["wq", "wk", "wv", "wo"] {
        specs.push((format!("user.attention.{w}"), vec![h, h]));
    }
    specs.extend(pool("user.pool"));
    specs.push(("score.proj".into(), vec![h, h]));
    specs.push(("user.empty_history".into(), vec![1, h]));
    specs
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut next = 0usize;
        let mut take = || {
            next += 1;
            next - 1
        };
        let embedding = take();
        let news_layers = (0..cfg.num_layers)
            .map(|_| AttentionIdx {
                q: take(),
                k: take(),
                v: take(),
                o: take(),
            })
            .collect();
        let news_pool = PoolIdx {
            proj: take(),
            bias: take(),
            query: take(),
        };
        let user_attention = AttentionIdx {
            q: take(),
            k: take(),
            v: take(),
            o: take(),
        };
        let user_pool = PoolIdx {
            proj: take(),
            bias: take(),
            query: take(),
        };
        Layout {
            embedding,
            news_layers,
            news_pool,
            user_attention,
            user_pool,
            score: take(),
            empty_history: take(),
        }
    }
}

/// Parameters bound into one graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    fn get(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

/// Catalogue-wide news vectors for repeated eval-mode scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCache {
    pub news: Vec<Vec<f64>>,
    /// `news` multiplied by the score projection.
    pub projected: Vec<Vec<f64>>,
}

impl EvalCache {
    pub fn scores(&self, projected_user: &[f64], candidates: &[usize]) -> Vec<f64> {
        candidates
            .iter()
            .map(|c| projected_user.iter().zip(&self.projected[*c]).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewsRecommender {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl NewsRecommender {
    /// Embeddings ~ U(-0.1, 0.1), projections Glorot-uniform, biases zero,
    /// all drawn from the `Init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::stream(seed, Stream::Init);
        let mut params = ParamStore::new();
        for (name, shape) in parameter_specs(&config) {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = if name.ends_with(".bias") {
                vec![0.0; n]
            } else if name == "token_embedding" || name == "user.empty_history" {
                (0..n).map(|_| rng.uniform(-0.1, 0.1)).collect()
            } else {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.uniform(-limit, limit)).collect()
            };
            params.push(name, Tensor::new(shape, values)?);
        }
        let layout = Layout::new(&config);
        Ok(NewsRecommender { config, params, layout })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = parameter_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::ModelConfig(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in specs.iter().zip(params.iter()) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::ModelConfig(format!(
                    "parameter `{}` {:?} does not match expected `{name}` {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        let layout = Layout::new(&config);
        Ok(NewsRecommender { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p>) -> Bound {
        Bound {
            vars: self.params.bind(g),
        }
    }

    /// Multi-head self-attention within each row block of `lens`.
    fn self_attention(&self, g: &mut Graph<'_>, b: &Bound, x: Var, lens: &[usize], idx: &AttentionIdx) -> Result<Var> {
        let q = g.matmul(x, b.get(idx.q))?;
        let k = g.matmul(x, b.get(idx.k))?;
        let v = g.matmul(x, b.get(idx.v))?;
        let att = g.segment_attention(q, k, v, lens, self.config.num_heads)?;
        Ok(g.matmul(att, b.get(idx.o))?)
    }

    /// `softmax(tanh(x P + b) q)`-weighted sum of each row block of `x`:
    /// one `[1, hidden]` summary per block.
    fn additive_pool(&self, g: &mut Graph<'_>, b: &Bound, x: Var, lens: &[usize], idx: &PoolIdx) -> Result<Var> {
        let rows = g.shape(x)[0];
        let proj = g.matmul(x, b.get(idx.proj))?;
        let bias = g.repeat_rows(b.get(idx.bias), rows)?;
        let hidden = g.add(proj, bias)?;
        let hidden = g.tanh(hidden)?;
        let logits = g.matmul(hidden, b.get(idx.query))?;
        Ok(g.segment_pool(logits, x, lens)?)
    }

    fn title_prefix<'t>(&self, token_ids: &'t [u32]) -> Result<&'t [u32]> {
        if token_ids.len() != self.config.max_title_len {
            return Err(Error::TitleLength {
                got: token_ids.len(),
                expected: self.config.max_title_len,
            });
        }
        let len = token_ids.iter().take_while(|t| **t != PAD_ID).count();
        if len == 0 {
            return Err(Error::EmptyTitle);
        }
        Ok(&token_ids[..len])
    }

    /// `[titles.len(), hidden_dim]` vectors for padded titles, encoded
    /// together. Each title only attends within itself, so a row does not
    /// depend on the other titles in the call.
    pub fn encode_titles(&self, g: &mut Graph<'_>, b: &Bound, titles: &[&[u32]], mode: &mut Mode<'_>) -> Result<Var> {
        if titles.is_empty() {
            return Err(Error::Invalid("no titles to encode".into()));
        }
        let mut ids = Vec::new();
        let mut lens = Vec::with_capacity(titles.len());
        for t in titles {
            let prefix = self.title_prefix(t)?;
            ids.extend(prefix.iter().map(|t| *t as usize));
            lens.push(prefix.len());
        }
        let rate = self.config.dropout_rate;
        let mut x = g.embedding_lookup(b.get(self.layout.embedding), &ids)?;
        x = mode.dropout(g, x, rate)?;
        for (l, idx) in self.layout.news_layers.iter().enumerate() {
            let h = self.self_attention(g, b, x, &lens, idx)?;
            let h = mode.dropout(g, h, rate)?;
            let input = if l == 0 {
                self.config.token_embed_dim
            } else {
                self.config.hidden_dim
            };
            x = if input == self.config.hidden_dim { g.add(x, h)? } else { h };
        }
        self.additive_pool(g, b, x, &lens, &self.layout.news_pool)
    }

    /// `[1, hidden_dim]` vector for a padded title.
    pub fn encode_news(&self, g: &mut Graph<'_>, b: &Bound, token_ids: &[u32], mode: &mut Mode<'_>) -> Result<Var> {
        self.encode_titles(g, b, &[token_ids], mode)
    }

    /// `[lens.len(), hidden_dim]` user vectors from stacked history vectors:
    /// user `i` owns the next `lens[i]` rows of `history`. Every length must
    /// be positive; empty histories use [`Self::empty_history`].
    pub fn encode_users(&self, g: &mut Graph<'_>, b: &Bound, history: Var, lens: &[usize], mode: &mut Mode<'_>) -> Result<Var> {
        if let Some(n) = lens.iter().find(|n| **n > self.config.max_history_len) {
            return Err(Error::HistoryTooLong {
                got: *n,
                limit: self.config.max_history_len,
            });
        }
        let h = self.self_attention(g, b, history, lens, &self.layout.user_attention)?;
        let h = mode.dropout(g, h, self.config.dropout_rate)?;
        self.additive_pool(g, b, h, lens, &self.layout.user_pool)
    }

    /// `[1, hidden_dim]` user vector from stacked `[n, hidden_dim]` history
    /// vectors.
    pub fn encode_user(&self, g: &mut Graph<'_>, b: &Bound, history: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let n = g.shape(history)[0];
        self.encode_users(g, b, history, &[n], mode)
    }

    /// Learned user vector for users without any history.
    pub fn empty_history(&self, b: &Bound) -> Var {
        b.get(self.layout.empty_history)
    }

    /// Vectors multiplied by the score projection; scores are dot products
    /// of projected users and projected candidates.
    pub fn project(&self, g: &mut Graph<'_>, b: &Bound, x: Var) -> Result<Var> {
        Ok(g.matmul(x, b.get(self.layout.score))?)
    }

    /// Raw scores `[1, c]` of `c` stacked candidate vectors for one user.
    pub fn score(&self, g: &mut Graph<'_>, b: &Bound, user: Var, candidates: Var) -> Result<Var> {
        let u = self.project(g, b, user)?;
        let c = self.project(g, b, candidates)?;
        Ok(g.matmul_nt(u, c)?)
    }

    /// Scores `candidates` for `user`, computing every news vector inside one
    /// graph. `history_override` replaces the user's stored history (the
    /// augmented view).
    pub fn score_candidates(
        &self,
        data: &Dataset,
        user: usize,
        candidates: &[usize],
        history_override: Option<&[usize]>,
        mode: &mut Mode<'_>,
    ) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Err(Error::Invalid("no candidates to score".into()));
        }
        let mut g = Graph::no_grad();
        let b = self.bind(&mut g);
        let history = history_override.unwrap_or(&data.users[user].history);
        let titles = |ids: &[usize]| ids.iter().map(|n| data.news[*n].token_ids.as_slice()).collect::<Vec<_>>();
        let user_vec = if history.is_empty() {
            self.empty_history(&b)
        } else {
            let stacked = self.encode_titles(&mut g, &b, &titles(history), mode)?;
            self.encode_user(&mut g, &b, stacked, mode)?
        };
        let cands = self.encode_titles(&mut g, &b, &titles(candidates), mode)?;
        let s = self.score(&mut g, &b, user_vec, cands)?;
        Ok(g.value(s).values().to_vec())
    }

    /// Eval-mode news vectors for the whole catalogue, before and after the
    /// score projection.
    pub fn eval_cache(&self, data: &Dataset) -> Result<EvalCache> {
        let chunks = data
            .news
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let mut g = Graph::no_grad();
                let b = self.bind(&mut g);
                let titles: Vec<&[u32]> = chunk.iter().map(|n| n.token_ids.as_slice()).collect();
                let v = self.encode_titles(&mut g, &b, &titles, &mut Mode::Eval)?;
                let p = self.project(&mut g, &b, v)?;
                Ok((rows_of(g.value(v)), rows_of(g.value(p))))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut cache = EvalCache {
            news: Vec::with_capacity(data.news.len()),
            projected: Vec::with_capacity(data.news.len()),
        };
        for (news, projected) in chunks {
            cache.news.extend(news);
            cache.projected.extend(projected);
        }
        Ok(cache)
    }

    /// Eval-mode user vectors after the score projection, one per history.
    pub fn projected_users(&self, cache: &EvalCache, histories: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let chunks = histories
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let mut g = Graph::no_grad();
                let b = self.bind(&mut g);
                let empty = self.project(&mut g, &b, self.empty_history(&b))?;
                let empty = g.value(empty).values().to_vec();
                let lens: Vec<usize> = chunk.iter().map(|h| h.len()).filter(|n| *n > 0).collect();
                let mut encoded = Vec::new();
                if !lens.is_empty() {
                    let h = self.config.hidden_dim;
                    let rows: usize = lens.iter().sum();
                    let mut vals = Vec::with_capacity(rows * h);
                    for i in chunk.iter().flat_map(|h| h.iter()) {
                        vals.extend_from_slice(&cache.news[*i]);
                    }
                    let hist = g.constant(Tensor::matrix(rows, h, vals)?)?;
                    let users = self.encode_users(&mut g, &b, hist, &lens, &mut Mode::Eval)?;
                    let p = self.project(&mut g, &b, users)?;
                    encoded = rows_of(g.value(p));
                }
                let mut encoded = encoded.into_iter();
                Ok(chunk
                    .iter()
                    .map(|h| {
                        if h.is_empty() {
                            empty.clone()
                        } else {
                            encoded.next().expect("one row per non-empty history")
                        }
                    })
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    /// Eval-mode user vector after the score projection.
    pub fn projected_user(&self, cache: &EvalCache, history: &[usize]) -> Result<Vec<f64>> {
        Ok(self.projected_users(cache, &[history])?.remove(0))
    }

    /// Eval-mode scores of `candidates` from cached vectors.
    pub fn score_with_cache(&self, cache: &EvalCache, history: &[usize], candidates: &[usize]) -> Result<Vec<f64>> {
        let user = self.projected_user(cache, history)?;
        Ok(cache.scores(&user, candidates))
    }
}

/// Titles or users per graph when scoring in eval mode.
const EVAL_CHUNK: usize = 256;

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = *t.shape().last().unwrap();
    t.values().chunks(cols).map(<[f64]>::to_vec).collect()
}
