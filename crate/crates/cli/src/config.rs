//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. `schema_version` and
//! `seed` are required; every other key has a default. Unknown keys are an
//! error. The resolved configuration, defaults included, is written back into
//! each output directory as `config.resolved`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use bigfair_core::data::synthetic::SyntheticConfig;
use bigfair_core::evaluation::EvalOptions;
use bigfair_core::model::{Capacity, ModelConfig};
use bigfair_core::training::TrainConfig;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "BIGFAIR_SEED";

/// Model fields that may override the capacity preset.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub capacity: Capacity,
    pub token_embed_dim: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub query_dim: usize,
    pub dropout_rate: f64,
}

impl ModelSettings {
    pub fn model_config(&self, vocab_size: usize, max_title_len: usize, max_history_len: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            token_embed_dim: self.token_embed_dim,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            num_layers: self.num_layers,
            query_dim: self.query_dim,
            dropout_rate: self.dropout_rate,
            max_title_len,
            max_history_len,
            capacity: self.capacity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub synthetic: SyntheticConfig,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub sweep_seeds: Vec<u64>,
    pub p_list: Vec<f64>,
}

struct Source {
    entries: BTreeMap<String, (String, usize)>,
    path: String,
}

impl Source {
    fn parse(content: &str, path: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in content.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("{path}:{}: expected `key = value`, got `{line}`", i + 1))
            })?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(CliError::Config(format!("{path}:{}: duplicate key `{key}`", i + 1)));
            }
        }
        Ok(Source {
            entries,
            path: path.to_string(),
        })
    }

    fn parse_value<T: FromStr>(&self, key: &str, value: &str, line: usize) -> Result<T, CliError> {
        value.parse().map_err(|_| {
            CliError::Config(format!(
                "{}:{line}: invalid value `{value}` for `{key}`",
                self.path
            ))
        })
    }

    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, CliError> {
        match self.entries.remove(key) {
            Some((v, line)) => self.parse_value(key, &v, line),
            None => Ok(default),
        }
    }

    fn take_opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError> {
        match self.entries.remove(key) {
            Some((v, line)) => self.parse_value(key, &v, line).map(Some),
            None => Ok(None),
        }
    }

    fn require<T: FromStr>(&mut self, key: &str) -> Result<T, CliError> {
        self.take_opt(key)?
            .ok_or_else(|| CliError::Config(format!("{}: missing required key `{key}`", self.path)))
    }

    fn take_list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>, CliError> {
        match self.entries.remove(key) {
            Some((v, line)) => parse_list(&v).map_err(|_| {
                CliError::Config(format!("{}:{line}: invalid list `{v}` for `{key}`", self.path))
            }),
            None => Ok(default),
        }
    }
}

/// Comma-separated values; blanks around items are ignored.
pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, T::Err> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(str::parse)
        .collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// `seed_override` (from `--seed`) beats `BIGFAIR_SEED`, which beats the file.
    pub fn parse(content: &str, path: &str, seed_override: Option<u64>) -> Result<Self, CliError> {
        let mut src = Source::parse(content, path)?;
        let schema_version: u32 = src.require("schema_version")?;
        if schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "{path}: unsupported schema_version {schema_version} (expected {SCHEMA_VERSION})"
            )));
        }
        let file_seed: u64 = src.require("seed")?;
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| CliError::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        let seed = seed_override.or(env_seed).unwrap_or(file_seed);

        let d = SyntheticConfig::default();
        let synthetic = SyntheticConfig {
            num_users: src.take("num_users", d.num_users)?,
            num_news: src.take("num_news", d.num_news)?,
            num_topics: src.take("num_topics", d.num_topics)?,
            vocab_size: src.take("vocab_size", d.vocab_size)?,
            topic_token_concentration: src.take("topic_token_concentration", d.topic_token_concentration)?,
            user_interest_concentration: src.take("user_interest_concentration", d.user_interest_concentration)?,
            cold_fraction: src.take("cold_fraction", d.cold_fraction)?,
            cold_threshold: src.take("cold_threshold", d.cold_threshold)?,
            heavy_history_mu: src.take("heavy_history_mu", d.heavy_history_mu)?,
            heavy_history_sigma: src.take("heavy_history_sigma", d.heavy_history_sigma)?,
            max_history_len: src.take("max_history_len", d.max_history_len)?,
            min_title_tokens: src.take("min_title_tokens", d.min_title_tokens)?,
            max_title_tokens: src.take("max_title_tokens", d.max_title_tokens)?,
            max_title_len: src.take("max_title_len", d.max_title_len)?,
            slate_size: src.take("slate_size", d.slate_size)?,
            click_noise: src.take("click_noise", d.click_noise)?,
            click_temperature: src.take("click_temperature", d.click_temperature)?,
            train_impressions_per_user: src.take("train_impressions_per_user", d.train_impressions_per_user)?,
            eval_impressions_per_user: src.take("eval_impressions_per_user", d.eval_impressions_per_user)?,
            num_negatives: src.take("num_negatives", d.num_negatives)?,
            master_seed: seed,
        };

        let capacity: Capacity = src.take("capacity", Capacity::Small)?;
        let preset = ModelConfig::preset(capacity, 2);
        let model = ModelSettings {
            capacity,
            token_embed_dim: src.take("token_embed_dim", preset.token_embed_dim)?,
            hidden_dim: src.take("hidden_dim", preset.hidden_dim)?,
            num_heads: src.take("num_heads", preset.num_heads)?,
            num_layers: src.take("num_layers", preset.num_layers)?,
            query_dim: src.take("query_dim", preset.query_dim)?,
            dropout_rate: src.take("dropout_rate", preset.dropout_rate)?,
        };

        let t = TrainConfig::default();
        let train = TrainConfig {
            drop_ratio: src.take("drop_ratio", t.drop_ratio)?,
            num_negatives: synthetic.num_negatives,
            learning_rate: src.take("learning_rate", t.learning_rate)?,
            batch_size: src.take("batch_size", t.batch_size)?,
            max_steps: src.take("max_steps", t.max_steps)?,
            eval_interval: src.take("eval_interval", t.eval_interval)?,
            early_stop_patience: src.take("early_stop_patience", t.early_stop_patience)?,
            bigfair_enabled: src.take("bigfair_enabled", t.bigfair_enabled)?,
            master_seed: seed,
            kl_weight: src.take("kl_weight", t.kl_weight)?,
            detach_teacher: src.take("detach_teacher", t.detach_teacher)?,
            shared_dropout: src.take("shared_dropout", t.shared_dropout)?,
            eval: EvalOptions {
                cold_threshold: synthetic.cold_threshold,
                pooled: src.take("pooled_auc", false)?,
            },
            run_tag: src.take("run_tag", t.run_tag)?,
        };
        let sweep_seeds = src.take_list("sweep_seeds", vec![seed])?;
        let p_list = src.take_list("p_list", bigfair_core::evaluation::sweep::DEFAULT_GRID.to_vec())?;

        if let Some((key, (_, line))) = src.entries.iter().next() {
            return Err(CliError::Config(format!("{path}:{line}: unknown key `{key}`")));
        }
        let cfg = RunConfig {
            schema_version,
            seed,
            synthetic,
            model,
            train,
            sweep_seeds,
            p_list,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let content = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&content, &path.display().to_string(), seed_override)
    }

    fn validate(&self) -> Result<(), CliError> {
        self.synthetic
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.model
            .model_config(self.synthetic.vocab_size, self.synthetic.max_title_len, self.synthetic.max_history_len)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.sweep_seeds.is_empty() {
            return Err(CliError::Config("sweep_seeds is empty".into()));
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order.
    pub fn resolved(&self) -> String {
        let s = &self.synthetic;
        let m = &self.model;
        let t = &self.train;
        let rows: Vec<(&str, String)> = vec![
            ("schema_version", self.schema_version.to_string()),
            ("seed", self.seed.to_string()),
            ("num_users", s.num_users.to_string()),
            ("num_news", s.num_news.to_string()),
            ("num_topics", s.num_topics.to_string()),
            ("vocab_size", s.vocab_size.to_string()),
            ("topic_token_concentration", format!("{:?}", s.topic_token_concentration)),
            ("user_interest_concentration", format!("{:?}", s.user_interest_concentration)),
            ("cold_fraction", format!("{:?}", s.cold_fraction)),
            ("cold_threshold", s.cold_threshold.to_string()),
            ("heavy_history_mu", format!("{:?}", s.heavy_history_mu)),
            ("heavy_history_sigma", format!("{:?}", s.heavy_history_sigma)),
            ("max_history_len", s.max_history_len.to_string()),
            ("min_title_tokens", s.min_title_tokens.to_string()),
            ("max_title_tokens", s.max_title_tokens.to_string()),
            ("max_title_len", s.max_title_len.to_string()),
            ("slate_size", s.slate_size.to_string()),
            ("click_noise", format!("{:?}", s.click_noise)),
            ("click_temperature", format!("{:?}", s.click_temperature)),
            ("train_impressions_per_user", s.train_impressions_per_user.to_string()),
            ("eval_impressions_per_user", s.eval_impressions_per_user.to_string()),
            ("num_negatives", s.num_negatives.to_string()),
            ("capacity", m.capacity.to_string()),
            ("token_embed_dim", m.token_embed_dim.to_string()),
            ("hidden_dim", m.hidden_dim.to_string()),
            ("num_heads", m.num_heads.to_string()),
            ("num_layers", m.num_layers.to_string()),
            ("query_dim", m.query_dim.to_string()),
            ("dropout_rate", format!("{:?}", m.dropout_rate)),
            ("drop_ratio", format!("{:?}", t.drop_ratio)),
            ("learning_rate", format!("{:?}", t.learning_rate)),
            ("batch_size", t.batch_size.to_string()),
            ("max_steps", t.max_steps.to_string()),
            ("eval_interval", t.eval_interval.to_string()),
            ("early_stop_patience", t.early_stop_patience.to_string()),
            ("bigfair_enabled", t.bigfair_enabled.to_string()),
            ("kl_weight", format!("{:?}", t.kl_weight)),
            ("detach_teacher", t.detach_teacher.to_string()),
            ("shared_dropout", t.shared_dropout.to_string()),
            ("pooled_auc", t.eval.pooled.to_string()),
            ("run_tag", t.run_tag.clone()),
            ("sweep_seeds", join(&self.sweep_seeds)),
            ("p_list", join(&self.p_list)),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
