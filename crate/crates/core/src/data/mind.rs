//! Reader and writer for the MIND tab-separated layout.
//!
//! `news.tsv`: id, category, subcategory, title, abstract, url,
//! title-entities, abstract-entities. Only id, category and title are used.
//!
//! `behaviors.tsv`: impression id, user id, time, space-separated history
//! ids, space-separated `newsid-label` pairs.
//!
//! A data directory holds `train/` and `dev/` subdirectories, each with
//! `news.tsv` and `behaviors.tsv`, plus an optional `vocab.tsv` (`id<TAB>token`
//! for ids >= 2). Without `vocab.tsv` the vocabulary is built from the
//! training news titles.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use bigfair_tensor::{Rng, Stream};

use super::{
    build_training_samples, eval_impressions, DataError, Dataset, Impression, NewsItem, UserRecord, Vocab,
};

/// Counters for entries the parser skipped rather than rejected.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub lines: usize,
    pub impressions: usize,
    pub unknown_history_ids: usize,
    pub unknown_candidate_ids: usize,
    pub ineligible_impressions: usize,
    /// Users whose history differs between lines; the first one is kept.
    pub history_conflicts: usize,
}

/// Users keyed by id, in first-seen order.
#[derive(Debug, Clone, Default)]
pub struct UserTable {
    pub users: Vec<UserRecord>,
    index: HashMap<String, usize>,
}

impl UserTable {
    fn get_or_insert(&mut self, user_id: &str, history: Vec<usize>, report: &mut ParseReport) -> usize {
        if let Some(&i) = self.index.get(user_id) {
            if self.users[i].history != history {
                report.history_conflicts += 1;
            }
            return i;
        }
        self.users.push(UserRecord {
            user_id: user_id.to_string(),
            history,
        });
        self.index.insert(user_id.to_string(), self.users.len() - 1);
        self.users.len() - 1
    }
}

fn malformed(path: &str, line: usize, msg: impl Into<String>) -> DataError {
    DataError::Malformed {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn topic_from_category(category: &str) -> Option<usize> {
    category.strip_prefix("topic").and_then(|t| t.parse().ok())
}

/// Parses news lines. When `grow_vocab` is set, unseen title tokens are
/// added to `vocab`; otherwise they map to OOV.
pub fn parse_news(
    content: &str,
    path: &str,
    vocab: &mut Vocab,
    grow_vocab: bool,
    max_title_len: usize,
) -> Result<Vec<NewsItem>, DataError> {
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for (lineno, line) in content.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            return Err(malformed(path, lineno, format!("expected at least 4 columns, found {}", cols.len())));
        }
        let id = cols[0].trim();
        if id.is_empty() {
            return Err(malformed(path, lineno, "empty news id"));
        }
        if seen.insert(id.to_string(), lineno).is_some() {
            return Err(malformed(path, lineno, format!("duplicate news id {id}")));
        }
        if grow_vocab {
            for t in super::tokenize(cols[3]) {
                vocab.insert(&t);
            }
        }
        out.push(NewsItem {
            news_id: id.to_string(),
            token_ids: vocab.encode_title(cols[3], max_title_len),
            topic_id: topic_from_category(cols[1]),
        });
    }
    Ok(out)
}

/// Parses behavior lines into labeled impressions, registering users in
/// `users`. Unknown news ids are skipped and counted; impressions that end up
/// without both a click and a skip are dropped and counted.
pub fn parse_behaviors(
    content: &str,
    path: &str,
    news_index: &HashMap<&str, usize>,
    users: &mut UserTable,
    max_history_len: usize,
    report: &mut ParseReport,
) -> Result<Vec<Impression>, DataError> {
    let mut out = Vec::new();
    for (lineno, line) in content.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(malformed(path, lineno, format!("expected 5 columns, found {}", cols.len())));
        }
        let user_id = cols[1].trim();
        if user_id.is_empty() {
            return Err(malformed(path, lineno, "empty user id"));
        }
        let mut history = Vec::new();
        for id in cols[3].split_whitespace() {
            match news_index.get(id) {
                Some(&i) => history.push(i),
                None => report.unknown_history_ids += 1,
            }
        }
        if history.len() > max_history_len {
            history.drain(..history.len() - max_history_len);
        }
        let user = users.get_or_insert(user_id, history, report);

        let mut candidates = Vec::new();
        let mut labels = Vec::new();
        for pair in cols[4].split_whitespace() {
            let (id, label) = pair
                .rsplit_once('-')
                .ok_or_else(|| malformed(path, lineno, format!("impression entry `{pair}` has no label")))?;
            let label = match label {
                "0" => 0u8,
                "1" => 1u8,
                other => return Err(malformed(path, lineno, format!("label `{other}` is not 0 or 1"))),
            };
            match news_index.get(id) {
                Some(&i) => {
                    candidates.push(i);
                    labels.push(label);
                }
                None => report.unknown_candidate_ids += 1,
            }
        }
        let imp = Impression {
            impression_id: cols[0].trim().to_string(),
            user,
            time: cols[2].to_string(),
            candidates,
            labels,
        };
        if imp.is_auc_eligible() {
            report.impressions += 1;
            out.push(imp);
        } else {
            report.ineligible_impressions += 1;
        }
    }
    Ok(out)
}

pub fn write_news(news: &[NewsItem], vocab: &Vocab) -> String {
    let mut s = String::new();
    for n in news {
        let category = n.topic_id.map(|t| format!("topic{t}")).unwrap_or_default();
        let _ = writeln!(s, "{}\t{}\t\t{}\t\t\t[]\t[]", n.news_id, category, vocab.decode_title(&n.token_ids));
    }
    s
}

pub fn write_behaviors(impressions: &[Impression], users: &[UserRecord], news: &[NewsItem]) -> String {
    let mut s = String::new();
    for imp in impressions {
        let user = &users[imp.user];
        let history: Vec<&str> = user.history.iter().map(|i| news[*i].news_id.as_str()).collect();
        let slate: Vec<String> = imp
            .candidates
            .iter()
            .zip(&imp.labels)
            .map(|(c, l)| format!("{}-{}", news[*c].news_id, l))
            .collect();
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            imp.impression_id,
            user.user_id,
            imp.time,
            history.join(" "),
            slate.join(" ")
        );
    }
    s
}

pub fn write_vocab(vocab: &Vocab) -> String {
    let mut s = String::new();
    for (i, t) in vocab.regular_tokens().iter().enumerate() {
        let _ = writeln!(s, "{}\t{}", i + 2, t);
    }
    s
}

pub fn parse_vocab(content: &str, path: &str) -> Result<Vocab, DataError> {
    let mut vocab = Vocab::new();
    for (lineno, line) in content.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.is_empty() {
            continue;
        }
        let (id, token) = line
            .split_once('\t')
            .ok_or_else(|| malformed(path, lineno, "expected `id<TAB>token`"))?;
        let id: usize = id.parse().map_err(|_| malformed(path, lineno, format!("bad id `{id}`")))?;
        if id != vocab.len() {
            return Err(malformed(path, lineno, format!("ids must be consecutive from 2, got {id}")));
        }
        vocab.insert(token);
    }
    Ok(vocab)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub max_title_len: usize,
    pub max_history_len: usize,
    pub num_negatives: usize,
    /// Seeds the negative-sampling stream.
    pub seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            max_title_len: super::DEFAULT_MAX_TITLE_LEN,
            max_history_len: super::DEFAULT_MAX_HISTORY_LEN,
            num_negatives: 4,
            seed: 0,
        }
    }
}

/// Loads a `train/` + `dev/` data directory. Training samples come from
/// `train/behaviors.tsv`, evaluation impressions from `dev/behaviors.tsv`.
pub fn load_dir(dir: &Path, opts: &LoadOptions) -> Result<(Dataset, ParseReport), DataError> {
    let vocab_path = dir.join("vocab.tsv");
    let (mut vocab, grow) = if vocab_path.exists() {
        (parse_vocab(&read(&vocab_path)?, &vocab_path.display().to_string())?, false)
    } else {
        (Vocab::new(), true)
    };

    let train_news_path = dir.join("train").join("news.tsv");
    let mut news = parse_news(
        &read(&train_news_path)?,
        &train_news_path.display().to_string(),
        &mut vocab,
        grow,
        opts.max_title_len,
    )?;
    let dev_news_path = dir.join("dev").join("news.tsv");
    if dev_news_path.exists() {
        let dev_news = parse_news(
            &read(&dev_news_path)?,
            &dev_news_path.display().to_string(),
            &mut vocab,
            false,
            opts.max_title_len,
        )?;
        let known: std::collections::HashSet<String> = news.iter().map(|n| n.news_id.clone()).collect();
        news.extend(dev_news.into_iter().filter(|n| !known.contains(&n.news_id)));
    }

    let mut report = ParseReport::default();
    let mut users = UserTable::default();
    let (train_imps, dev_imps) = {
        let index: HashMap<&str, usize> = news.iter().enumerate().map(|(i, n)| (n.news_id.as_str(), i)).collect();
        let train_path = dir.join("train").join("behaviors.tsv");
        let train_imps = parse_behaviors(
            &read(&train_path)?,
            &train_path.display().to_string(),
            &index,
            &mut users,
            opts.max_history_len,
            &mut report,
        )?;
        let dev_path = dir.join("dev").join("behaviors.tsv");
        let dev_imps = parse_behaviors(
            &read(&dev_path)?,
            &dev_path.display().to_string(),
            &index,
            &mut users,
            opts.max_history_len,
            &mut report,
        )?;
        (train_imps, dev_imps)
    };

    let mut rng = Rng::stream(opts.seed, Stream::Sampling);
    let train = build_training_samples(&train_imps, opts.num_negatives, &mut rng);
    let eval = eval_impressions(&dev_imps);
    Ok((
        Dataset {
            vocab,
            news,
            users: users.users,
            train,
            eval,
            max_title_len: opts.max_title_len,
        },
        report,
    ))
}

/// Writes a corpus in the directory layout read by [`load_dir`].
pub fn write_dir(
    dir: &Path,
    vocab: &Vocab,
    news: &[NewsItem],
    users: &[UserRecord],
    train: &[Impression],
    dev: &[Impression],
) -> Result<(), DataError> {
    let write = |path: &Path, content: String| {
        fs::write(path, content).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    for (sub, imps) in [("train", train), ("dev", dev)] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|source| DataError::Io {
            path: d.display().to_string(),
            source,
        })?;
        write(&d.join("news.tsv"), write_news(news, vocab))?;
        write(&d.join("behaviors.tsv"), write_behaviors(imps, users, news))?;
    }
    write(&dir.join("vocab.tsv"), write_vocab(vocab))
}
