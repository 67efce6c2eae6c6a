//! Behavior logs: news items, users, impressions, and the samples derived
//! from them.

mod augment;
pub mod mind;
pub mod synthetic;
mod vocab;

use std::collections::HashMap;

use bigfair_tensor::Rng;

pub use augment::drop_behaviors;
pub use vocab::{tokenize, Vocab, OOV_ID, PAD_ID};

pub const DEFAULT_COLD_THRESHOLD: usize = 5;
pub const DEFAULT_MAX_HISTORY_LEN: usize = 50;
pub const DEFAULT_MAX_TITLE_LEN: usize = 30;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewsItem {
    pub news_id: String,
    /// Exactly `max_title_len` ids; padding only as a suffix.
    pub token_ids: Vec<u32>,
    /// Generating topic; known for synthetic data only.
    pub topic_id: Option<usize>,
}

impl NewsItem {
    /// Number of non-pad tokens.
    pub fn title_len(&self) -> usize {
        self.token_ids.iter().take_while(|t| **t != PAD_ID).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activeness {
    Cold,
    Heavy,
}

/// Cold iff the user has at most `cold_threshold` historical clicks.
pub fn classify_user(history_len: usize, cold_threshold: usize) -> Activeness {
    if history_len <= cold_threshold {
        Activeness::Cold
    } else {
        Activeness::Heavy
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserRecord {
    pub user_id: String,
    /// Indices into [`Dataset::news`], oldest first.
    pub history: Vec<usize>,
}

impl UserRecord {
    pub fn activeness(&self, cold_threshold: usize) -> Activeness {
        classify_user(self.history.len(), cold_threshold)
    }
}

/// One served slate with click labels, as it appears in a behaviors log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Impression {
    pub impression_id: String,
    pub user: usize,
    pub time: String,
    pub candidates: Vec<usize>,
    pub labels: Vec<u8>,
}

impl Impression {
    /// At least one click and one skip.
    pub fn is_auc_eligible(&self) -> bool {
        self.labels.contains(&1) && self.labels.contains(&0)
    }
}

/// One positive plus K negatives for a user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSample {
    pub user: usize,
    pub candidates: Vec<usize>,
    pub positive_index: usize,
    pub impression_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalImpression {
    pub user: usize,
    pub candidates: Vec<usize>,
    pub labels: Vec<u8>,
    pub impression_id: String,
}

/// Everything a run needs: the news catalogue, users, training samples and
/// evaluation impressions. Indices in users/samples refer to `news` and
/// `users`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub news: Vec<NewsItem>,
    pub users: Vec<UserRecord>,
    pub train: Vec<TrainingSample>,
    pub eval: Vec<EvalImpression>,
    pub max_title_len: usize,
}

impl Dataset {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn news_index(&self) -> HashMap<&str, usize> {
        self.news.iter().enumerate().map(|(i, n)| (n.news_id.as_str(), i)).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}:{line}: {msg}")]
    Malformed { path: String, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("drop ratio must lie in [0, 1], got {0}")]
    InvalidDropRatio(f64),
}

/// Pairs every clicked item with `k` skipped items from the same
/// impression. Negatives are drawn without replacement when the impression
/// has at least `k` of them, with replacement otherwise; the positive is
/// placed at a random slot. Impressions with no click or no skip yield
/// nothing.
pub fn build_training_samples(impressions: &[Impression], k: usize, rng: &mut Rng) -> Vec<TrainingSample> {
    let mut out = Vec::new();
    for imp in impressions {
        if !imp.is_auc_eligible() {
            continue;
        }
        let negatives: Vec<usize> = imp
            .candidates
            .iter()
            .zip(&imp.labels)
            .filter(|(_, l)| **l == 0)
            .map(|(c, _)| *c)
            .collect();
        for (c, l) in imp.candidates.iter().zip(&imp.labels) {
            if *l != 1 {
                continue;
            }
            let mut candidates: Vec<usize> = if negatives.len() >= k {
                rng.sample_distinct(negatives.len(), k).into_iter().map(|i| negatives[i]).collect()
            } else {
                (0..k).map(|_| negatives[rng.below(negatives.len())]).collect()
            };
            let positive_index = rng.below(k + 1);
            candidates.insert(positive_index, *c);
            out.push(TrainingSample {
                user: imp.user,
                candidates,
                positive_index,
                impression_id: imp.impression_id.clone(),
            });
        }
    }
    out
}

/// AUC-eligible impressions only.
pub fn eval_impressions(impressions: &[Impression]) -> Vec<EvalImpression> {
    impressions
        .iter()
        .filter(|i| i.is_auc_eligible())
        .map(|i| EvalImpression {
            user: i.user,
            candidates: i.candidates.clone(),
            labels: i.labels.clone(),
            impression_id: i.impression_id.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cold_threshold_boundaries() {
        assert_eq!(classify_user(5, 5), Activeness::Cold);
        assert_eq!(classify_user(6, 5), Activeness::Heavy);
        assert_eq!(classify_user(0, 5), Activeness::Cold);
    }

    #[test]
    fn classify_is_monotone() {
        let mut was_heavy = false;
        for n in 0..100 {
            let heavy = classify_user(n, DEFAULT_COLD_THRESHOLD) == Activeness::Heavy;
            assert!(heavy || !was_heavy);
            was_heavy = heavy;
        }
    }

    fn imp(labels: &[u8]) -> Impression {
        Impression {
            impression_id: "1".into(),
            user: 0,
            time: String::new(),
            candidates: (10..10 + labels.len()).collect(),
            labels: labels.to_vec(),
        }
    }

    #[test]
    fn samples_have_one_positive_and_k_negatives() {
        let mut rng = Rng::seed_from_u64(1);
        let imps = vec![imp(&[1, 0, 0, 0, 0, 0, 1]), imp(&[0, 1]), imp(&[0, 0]), imp(&[1, 1])];
        let samples = build_training_samples(&imps, 4, &mut rng);
        // two clicks in the first impression, one in the second, none usable after
        assert_eq!(samples.len(), 3);
        for s in &samples {
            assert_eq!(s.candidates.len(), 5);
            assert!(s.positive_index <= 4);
            let pos = s.candidates[s.positive_index];
            assert!(pos == 10 || pos == 16 || pos == 11);
            let positives_in_slate = s.candidates.iter().filter(|c| **c == pos).count();
            assert_eq!(positives_in_slate, 1);
        }
        // the second impression has one negative: drawn with replacement
        assert!(samples[2].candidates.iter().filter(|c| **c == 10).count() == 4);
        assert_eq!(eval_impressions(&imps).len(), 2);
    }
}
