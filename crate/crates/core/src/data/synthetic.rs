//! Synthetic behavior logs with a known generative process.
//!
//! Each news item belongs to one topic and draws its title tokens from that
//! topic's token distribution. Each user has a Dirichlet interest vector over
//! topics. Every click (historical or in an impression) is drawn from a slate
//! of random items with probability
//! `(1 - noise) * softmax(interest[topic] / temperature) + noise / slate_size`.

use bigfair_tensor::{Rng, Stream};

use super::{
    build_training_samples, eval_impressions, DataError, Dataset, Impression, NewsItem, UserRecord, Vocab, PAD_ID,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_news: usize,
    pub num_topics: usize,
    /// Including the pad and OOV ids.
    pub vocab_size: usize,
    /// Dirichlet concentration of each topic's token distribution.
    pub topic_token_concentration: f64,
    /// Dirichlet concentration of each user's interest over topics.
    pub user_interest_concentration: f64,
    pub cold_fraction: f64,
    pub cold_threshold: usize,
    /// Log-normal parameters of heavy-user history length.
    pub heavy_history_mu: f64,
    pub heavy_history_sigma: f64,
    pub max_history_len: usize,
    pub min_title_tokens: usize,
    pub max_title_tokens: usize,
    /// Padded title length.
    pub max_title_len: usize,
    pub slate_size: usize,
    pub click_noise: f64,
    pub click_temperature: f64,
    pub train_impressions_per_user: usize,
    pub eval_impressions_per_user: usize,
    pub num_negatives: usize,
    pub master_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_users: 10_000,
            num_news: 2_000,
            num_topics: 20,
            vocab_size: 1_000,
            topic_token_concentration: 0.05,
            user_interest_concentration: 0.2,
            cold_fraction: 0.11,
            cold_threshold: super::DEFAULT_COLD_THRESHOLD,
            heavy_history_mu: 2.8,
            heavy_history_sigma: 0.6,
            max_history_len: super::DEFAULT_MAX_HISTORY_LEN,
            min_title_tokens: 4,
            max_title_tokens: 10,
            max_title_len: super::DEFAULT_MAX_TITLE_LEN,
            slate_size: 10,
            click_noise: 0.05,
            click_temperature: 0.5,
            train_impressions_per_user: 2,
            eval_impressions_per_user: 1,
            num_negatives: 4,
            master_seed: 42,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::InvalidConfig(m));
        if self.num_users == 0 || self.num_news == 0 || self.num_topics == 0 {
            return fail("num_users, num_news and num_topics must be positive".into());
        }
        if self.vocab_size < 3 {
            return fail(format!("vocab_size must be at least 3, got {}", self.vocab_size));
        }
        if self.slate_size < 2 {
            return fail(format!("slate_size must be at least 2, got {}", self.slate_size));
        }
        if self.slate_size > self.num_news {
            return fail(format!(
                "slate_size {} exceeds num_news {}",
                self.slate_size, self.num_news
            ));
        }
        if !(0.0..=1.0).contains(&self.cold_fraction) {
            return fail(format!("cold_fraction must lie in [0, 1], got {}", self.cold_fraction));
        }
        if !(0.0..=1.0).contains(&self.click_noise) {
            return fail(format!("click_noise must lie in [0, 1], got {}", self.click_noise));
        }
        if !(self.topic_token_concentration > 0.0 && self.user_interest_concentration > 0.0) {
            return fail("Dirichlet concentrations must be positive".into());
        }
        if !(self.click_temperature > 0.0) {
            return fail("click_temperature must be positive".into());
        }
        if !(self.heavy_history_sigma >= 0.0 && self.heavy_history_mu.is_finite()) {
            return fail("heavy history log-normal parameters are invalid".into());
        }
        if self.cold_threshold == 0 || self.cold_threshold >= self.max_history_len {
            return fail(format!(
                "cold_threshold {} must lie in [1, max_history_len {})",
                self.cold_threshold, self.max_history_len
            ));
        }
        if self.min_title_tokens == 0
            || self.min_title_tokens > self.max_title_tokens
            || self.max_title_tokens > self.max_title_len
        {
            return fail("title lengths must satisfy 1 <= min <= max <= max_title_len".into());
        }
        if self.train_impressions_per_user == 0 {
            return fail("train_impressions_per_user must be positive".into());
        }
        if self.num_negatives == 0 {
            return fail("num_negatives must be positive".into());
        }
        Ok(())
    }
}

/// Generated corpus plus the ground truth behind it.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    pub train_impressions: Vec<Impression>,
    pub dev_impressions: Vec<Impression>,
    /// Per-user interest over topics.
    pub interests: Vec<Vec<f64>>,
}

struct ClickModel<'a> {
    news_topics: &'a [usize],
    noise: f64,
    temperature: f64,
}

impl ClickModel<'_> {
    /// Click distribution over `slate` for a user with `interest`.
    fn probabilities(&self, interest: &[f64], slate: &[usize]) -> Vec<f64> {
        let logits: Vec<f64> = slate
            .iter()
            .map(|n| interest[self.news_topics[*n]] / self.temperature)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let uniform = 1.0 / slate.len() as f64;
        exps.iter()
            .map(|e| (1.0 - self.noise) * e / total + self.noise * uniform)
            .collect()
    }

    fn click(&self, rng: &mut Rng, interest: &[f64], slate: &[usize]) -> usize {
        rng.categorical(&self.probabilities(interest, slate))
    }
}

fn cdf(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

fn draw_from_cdf(rng: &mut Rng, cdf: &[f64]) -> usize {
    let total = *cdf.last().unwrap();
    let target = rng.next_f64() * total;
    cdf.partition_point(|c| *c <= target).min(cdf.len() - 1)
}

fn impression_time(day: usize, ordinal: usize) -> String {
    let secs = ordinal % (12 * 3600);
    format!(
        "11/{:02}/2019 {}:{:02}:{:02} AM",
        day,
        secs / 3600 + 1,
        (secs / 60) % 60,
        secs % 60
    )
}

pub fn generate_corpus(cfg: &SyntheticConfig) -> Result<SyntheticCorpus, DataError> {
    cfg.validate()?;
    let mut rng = Rng::stream(cfg.master_seed, Stream::Data);

    let regular = cfg.vocab_size - 2;
    let vocab = Vocab::from_tokens((0..regular).map(|i| format!("w{}", i + 2)));

    let topic_cdfs: Vec<Vec<f64>> = (0..cfg.num_topics)
        .map(|_| cdf(&rng.dirichlet(cfg.topic_token_concentration, regular)))
        .collect();

    let mut news = Vec::with_capacity(cfg.num_news);
    let mut news_topics = Vec::with_capacity(cfg.num_news);
    for i in 0..cfg.num_news {
        let topic = rng.below(cfg.num_topics);
        let len = rng.range_inclusive(cfg.min_title_tokens, cfg.max_title_tokens);
        let mut tokens: Vec<u32> = (0..len)
            .map(|_| draw_from_cdf(&mut rng, &topic_cdfs[topic]) as u32 + 2)
            .collect();
        tokens.resize(cfg.max_title_len, PAD_ID);
        news.push(NewsItem {
            news_id: format!("N{}", i + 1),
            token_ids: tokens,
            topic_id: Some(topic),
        });
        news_topics.push(topic);
    }

    let model = ClickModel {
        news_topics: &news_topics,
        noise: cfg.click_noise,
        temperature: cfg.click_temperature,
    };

    let mut users = Vec::with_capacity(cfg.num_users);
    let mut interests = Vec::with_capacity(cfg.num_users);
    for u in 0..cfg.num_users {
        let interest = rng.dirichlet(cfg.user_interest_concentration, cfg.num_topics);
        let len = if rng.bernoulli(cfg.cold_fraction) {
            rng.range_inclusive(1, cfg.cold_threshold)
        } else {
            let raw = rng.log_normal(cfg.heavy_history_mu, cfg.heavy_history_sigma).round();
            (raw as usize).clamp(cfg.cold_threshold + 1, cfg.max_history_len)
        };
        let history = (0..len)
            .map(|_| {
                let slate = rng.sample_distinct(cfg.num_news, cfg.slate_size);
                slate[model.click(&mut rng, &interest, &slate)]
            })
            .collect();
        users.push(UserRecord {
            user_id: format!("U{}", u + 1),
            history,
        });
        interests.push(interest);
    }

    let mut next_id = 1usize;
    let mut make_impressions = |rng: &mut Rng, per_user: usize, first_day: usize, days: usize| {
        let mut out = Vec::with_capacity(cfg.num_users * per_user);
        for (u, interest) in interests.iter().enumerate() {
            for k in 0..per_user {
                let slate = rng.sample_distinct(cfg.num_news, cfg.slate_size);
                let clicked = model.click(rng, interest, &slate);
                let labels = (0..slate.len()).map(|i| u8::from(i == clicked)).collect();
                out.push(Impression {
                    impression_id: next_id.to_string(),
                    user: u,
                    time: impression_time(first_day + k % days, next_id),
                    candidates: slate,
                    labels,
                });
                next_id += 1;
            }
        }
        out
    };
    // Training impressions precede evaluation impressions in time.
    let train_impressions = make_impressions(&mut rng, cfg.train_impressions_per_user, 9, 5);
    let dev_impressions = make_impressions(&mut rng, cfg.eval_impressions_per_user, 14, 2);

    let mut sampling = Rng::stream(cfg.master_seed, Stream::Sampling);
    let train = build_training_samples(&train_impressions, cfg.num_negatives, &mut sampling);
    let eval = eval_impressions(&dev_impressions);

    Ok(SyntheticCorpus {
        dataset: Dataset {
            vocab,
            news,
            users,
            train,
            eval,
            max_title_len: cfg.max_title_len,
        },
        train_impressions,
        dev_impressions,
        interests,
    })
}
