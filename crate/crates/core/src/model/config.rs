use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capacity {
    Small,
    Big,
    Custom,
}

impl fmt::Display for Capacity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Capacity::Small => "small",
            Capacity::Big => "big",
            Capacity::Custom => "custom",
        })
    }
}

impl FromStr for Capacity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Capacity::Small),
            "big" => Ok(Capacity::Big),
            "custom" => Ok(Capacity::Custom),
            other => Err(Error::ModelConfig(format!("unknown capacity `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub token_embed_dim: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    /// Self-attention layers in the news encoder.
    pub num_layers: usize,
    /// Width of the additive-attention query space.
    pub query_dim: usize,
    pub dropout_rate: f64,
    pub max_title_len: usize,
    pub max_history_len: usize,
    pub capacity: Capacity,
}

impl ModelConfig {
    /// One shallow self-attention layer: embed 300, hidden 400, 20 heads.
    pub fn small(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            token_embed_dim: 300,
            hidden_dim: 400,
            num_heads: 20,
            num_layers: 1,
            query_dim: 200,
            dropout_rate: 0.2,
            max_title_len: 30,
            max_history_len: 50,
            capacity: Capacity::Small,
        }
    }

    /// Deeper encoder standing in for a pretrained language model: four
    /// residual self-attention layers of width 128 with 8 heads.
    pub fn big(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            token_embed_dim: 128,
            hidden_dim: 128,
            num_heads: 8,
            num_layers: 4,
            query_dim: 64,
            dropout_rate: 0.2,
            max_title_len: 30,
            max_history_len: 50,
            capacity: Capacity::Big,
        }
    }

    pub fn preset(capacity: Capacity, vocab_size: usize) -> Self {
        match capacity {
            Capacity::Small => Self::small(vocab_size),
            Capacity::Big => Self::big(vocab_size),
            Capacity::Custom => ModelConfig {
                capacity: Capacity::Custom,
                ..Self::small(vocab_size)
            },
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::ModelConfig(m));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if [
            self.token_embed_dim,
            self.hidden_dim,
            self.num_heads,
            self.num_layers,
            self.query_dim,
            self.max_title_len,
            self.max_history_len,
        ]
        .contains(&0)
        {
            return fail("dimensions, heads, layers and lengths must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    /// Closed-form count of scalar weights.
    pub fn parameter_count(&self) -> usize {
        let (v, e, h, a) = (self.vocab_size, self.token_embed_dim, self.hidden_dim, self.query_dim);
        let news_layers: usize = (0..self.num_layers)
            .map(|l| {
                let input = if l == 0 { e } else { h };
                3 * input * h + h * h
            })
            .sum();
        let pool = h * a + 2 * a;
        v * e + news_layers + pool + 4 * h * h + pool + h * h + h
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("token_embed_dim".into(), self.token_embed_dim.to_string()),
            ("hidden_dim".into(), self.hidden_dim.to_string()),
            ("num_heads".into(), self.num_heads.to_string()),
            ("num_layers".into(), self.num_layers.to_string()),
            ("query_dim".into(), self.query_dim.to_string()),
            ("dropout_rate".into(), format!("{:?}", self.dropout_rate)),
            ("max_title_len".into(), self.max_title_len.to_string()),
            ("max_history_len".into(), self.max_history_len.to_string()),
            ("capacity".into(), self.capacity.to_string()),
        ]
    }

    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::ModelConfig(format!("missing key `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::ModelConfig(format!("key `{k}` is not an integer")))
        };
        let cfg = ModelConfig {
            vocab_size: num("vocab_size")?,
            token_embed_dim: num("token_embed_dim")?,
            hidden_dim: num("hidden_dim")?,
            num_heads: num("num_heads")?,
            num_layers: num("num_layers")?,
            query_dim: num("query_dim")?,
            dropout_rate: get("dropout_rate")?
                .parse()
                .map_err(|_| Error::ModelConfig("key `dropout_rate` is not a number".into()))?,
            max_title_len: num("max_title_len")?,
            max_history_len: num("max_history_len")?,
            capacity: get("capacity")?.parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::small(1000).validate().unwrap();
        ModelConfig::big(1000).validate().unwrap();
        let bad = ModelConfig {
            num_heads: 7,
            ..ModelConfig::small(10)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn small_preset_count() {
        // Hand expansion for vocab 1000:
        // embeddings 1000*300, one layer 3*300*400 + 400*400, two pools
        // (400*200 + 400) each, user attention 4*400*400, score 400*400,
        // empty-history 400.
        let expected = 300_000 + 360_000 + 160_000 + 2 * 80_400 + 640_000 + 160_000 + 400;
        assert_eq!(ModelConfig::small(1000).parameter_count(), expected);
    }

    #[test]
    fn kv_round_trip() {
        let cfg = ModelConfig::big(321);
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }
}
