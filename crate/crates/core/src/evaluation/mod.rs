//! Impression-level AUC, cold/heavy stratification and the checkpoint
//! unfairness score.

pub mod sweep;

use std::fmt;
use std::io::Write;
use std::path::Path;


use crate::data::{classify_user, Activeness, Dataset};
use crate::error::{io_err, Error, Result};
use crate::model::NewsRecommender;
use crate::training::CheckpointRecord;

/// Probability that a random positive outscores a random negative, ties
/// counted one half. Uses average ranks, so the result equals exhaustive
/// pair counting bit for bit.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "auc: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("auc: NaN score".into()));
    }
    let npos = labels.iter().filter(|l| **l == 1).count() as u64;
    let nneg = labels.len() as u64 - npos;
    if npos == 0 || nneg == 0 {
        return Err(Error::Invalid("auc: labels must contain both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    // twice the rank sum of positives; a tie group over 0-based positions
    // [i, j) has doubled average rank i + j + 1
    let mut rank_sum2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos_in_group = order[i..j].iter().filter(|k| labels[**k] == 1).count() as u64;
        rank_sum2 += pos_in_group * (i + j + 1) as u64;
        i = j;
    }
    let numerator2 = rank_sum2 - npos * (npos + 1);
    Ok(numerator2 as f64 / (2 * npos * nneg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Bucket {
    UpTo5,
    UpTo10,
    UpTo20,
    UpTo50,
    Over50,
}

impl Bucket {
    pub const ALL: [Bucket; 5] = [Bucket::UpTo5, Bucket::UpTo10, Bucket::UpTo20, Bucket::UpTo50, Bucket::Over50];

    pub fn of(history_len: usize) -> Bucket {
        match history_len {
            0..=5 => Bucket::UpTo5,
            6..=10 => Bucket::UpTo10,
            11..=20 => Bucket::UpTo20,
            21..=50 => Bucket::UpTo50,
            _ => Bucket::Over50,
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bucket::UpTo5 => "0-5",
            Bucket::UpTo10 => "6-10",
            Bucket::UpTo20 => "11-20",
            Bucket::UpTo50 => "21-50",
            Bucket::Over50 => ">50",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketStat {
    pub bucket: Bucket,
    pub n: usize,
    pub auc: Option<f64>,
}

/// AUCs are fractions in [0, 1]; a stratum without eligible impressions is
/// `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall: Option<f64>,
    pub heavy: Option<f64>,
    pub cold: Option<f64>,
    pub n_overall: usize,
    pub n_heavy: usize,
    pub n_cold: usize,
    /// Impressions skipped for lacking a click or a skip.
    pub n_ineligible: usize,
    pub buckets: Vec<BucketStat>,
}

impl EvalReport {
    /// A report carrying only stratum values, for feeding externally
    /// measured numbers into [`unfairness`].
    pub fn from_strata(overall: Option<f64>, heavy: Option<f64>, cold: Option<f64>) -> Self {
        EvalReport {
            overall,
            heavy,
            cold,
            n_overall: 0,
            n_heavy: 0,
            n_cold: 0,
            n_ineligible: 0,
            buckets: Vec::new(),
        }
    }

    pub fn write_buckets_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("bucket,n,auc\n");
        for b in &self.buckets {
            out.push_str(&format!("{},{},{}\n", b.bucket, b.n, fmt_points(b.auc)));
        }
        write_file(path, &out)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "overall_auc {} (n={})", fmt_points(self.overall), self.n_overall)?;
        writeln!(f, "heavy_auc   {} (n={})", fmt_points(self.heavy), self.n_heavy)?;
        writeln!(f, "cold_auc    {} (n={})", fmt_points(self.cold), self.n_cold)?;
        for b in &self.buckets {
            writeln!(f, "bucket {:>6} {} (n={})", b.bucket, fmt_points(b.auc), b.n)?;
        }
        Ok(())
    }
}

/// AUC in ×100 points, blank when absent.
pub fn fmt_points(v: Option<f64>) -> String {
    v.map(|x| format!("{}", 100.0 * x)).unwrap_or_default()
}

pub(crate) fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(content.as_bytes()).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub cold_threshold: usize,
    /// Pool all (score, label) pairs of a stratum into one AUC instead of
    /// averaging per-impression AUCs.
    pub pooled: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            cold_threshold: crate::data::DEFAULT_COLD_THRESHOLD,
            pooled: false,
        }
    }
}

/// Model scores for one impression together with the user's history length.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredImpression {
    pub history_len: usize,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Order-independent mean: values are sorted before summation.
fn mean(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

fn stratum_auc(items: &[&ScoredImpression], pooled: bool) -> Result<Option<f64>> {
    if items.is_empty() {
        return Ok(None);
    }
    if pooled {
        let scores: Vec<f64> = items.iter().flat_map(|s| s.scores.iter().copied()).collect();
        let labels: Vec<u8> = items.iter().flat_map(|s| s.labels.iter().copied()).collect();
        return auc(&scores, &labels).map(Some);
    }
    let mut aucs = items
        .iter()
        .map(|s| auc(&s.scores, &s.labels))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&mut aucs))
}

pub fn report_from_scores(scored: &[ScoredImpression], opts: &EvalOptions) -> Result<EvalReport> {
    let eligible: Vec<&ScoredImpression> = scored
        .iter()
        .filter(|s| s.labels.contains(&1) && s.labels.contains(&0))
        .collect();
    let n_ineligible = scored.len() - eligible.len();
    let (cold, heavy): (Vec<&ScoredImpression>, Vec<&ScoredImpression>) = eligible
        .iter()
        .partition(|s| classify_user(s.history_len, opts.cold_threshold) == Activeness::Cold);
    let buckets = Bucket::ALL
        .iter()
        .map(|b| {
            let items: Vec<&ScoredImpression> = eligible
                .iter()
                .copied()
                .filter(|s| Bucket::of(s.history_len) == *b)
                .collect();
            Ok(BucketStat {
                bucket: *b,
                n: items.len(),
                auc: stratum_auc(&items, opts.pooled)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        overall: stratum_auc(&eligible, opts.pooled)?,
        heavy: stratum_auc(&heavy, opts.pooled)?,
        cold: stratum_auc(&cold, opts.pooled)?,
        n_overall: eligible.len(),
        n_heavy: heavy.len(),
        n_cold: cold.len(),
        n_ineligible,
        buckets,
    })
}

/// Eval-mode scores for every evaluation impression, in dataset order. Each
/// distinct user is encoded once.
pub fn score_impressions(model: &NewsRecommender, data: &Dataset) -> Result<Vec<ScoredImpression>> {
    let cache = model.eval_cache(data)?;
    let mut users: Vec<usize> = data.eval.iter().map(|imp| imp.user).collect();
    users.sort_unstable();
    users.dedup();
    let histories: Vec<&[usize]> = users.iter().map(|u| data.users[*u].history.as_slice()).collect();
    let vectors = model.projected_users(&cache, &histories)?;
    Ok(data
        .eval
        .iter()
        .map(|imp| {
            let slot = users.binary_search(&imp.user).expect("user collected above");
            ScoredImpression {
                history_len: data.users[imp.user].history.len(),
                scores: cache.scores(&vectors[slot], &imp.candidates),
                labels: imp.labels.clone(),
            }
        })
        .collect())
}

pub fn evaluate(model: &NewsRecommender, data: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    report_from_scores(&score_impressions(model, data)?, opts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnfairnessResult {
    pub best_overall_step: usize,
    pub best_cold_step: usize,
    pub overall_at_best_overall: f64,
    pub heavy_at_best_overall: Option<f64>,
    pub cold_at_best_overall: f64,
    pub cold_at_best_cold: f64,
    /// `cold_at_best_cold - cold_at_best_overall` in AUC ×100 points.
    pub unfairness: f64,
}

fn argmax_earliest(
    records: &[CheckpointRecord],
    key: impl Fn(&EvalReport) -> Option<f64>,
) -> Option<(&CheckpointRecord, f64)> {
    let mut best: Option<(&CheckpointRecord, f64)> = None;
    for r in records {
        if let Some(v) = key(&r.report) {
            let better = match best {
                None => true,
                Some((b, bv)) => v > bv || (v == bv && r.step < b.step),
            };
            if better {
                best = Some((r, v));
            }
        }
    }
    best
}

/// Cold-user AUC lost by selecting the checkpoint that is best overall
/// rather than the one best on cold users. Ties go to the earliest step.
pub fn unfairness(records: &[CheckpointRecord]) -> Result<UnfairnessResult> {
    let (bo, overall) = argmax_earliest(records, |r| r.overall)
        .ok_or_else(|| Error::Invalid("unfairness: no checkpoint has an overall AUC".into()))?;
    let (bc, cold_best) = argmax_earliest(records, |r| r.cold)
        .ok_or_else(|| Error::Invalid("unfairness: no checkpoint has a cold-user AUC".into()))?;
    let cold_at_overall = bo.report.cold.ok_or_else(|| {
        Error::Invalid(format!(
            "unfairness: best-overall checkpoint at step {} has no cold-user AUC",
            bo.step
        ))
    })?;
    Ok(UnfairnessResult {
        best_overall_step: bo.step,
        best_cold_step: bc.step,
        overall_at_best_overall: overall,
        heavy_at_best_overall: bo.report.heavy,
        cold_at_best_overall: cold_at_overall,
        cold_at_best_cold: cold_best,
        unfairness: 100.0 * (cold_best - cold_at_overall),
    })
}
