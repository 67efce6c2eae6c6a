//! Recommendation loss, the self-distillation KL term and the training loop.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use bigfair_tensor::{AdamState, Graph, Rng, Stream, Tensor, TensorError, Var};

use crate::data::{drop_behaviors, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{self, fmt_points, write_file, EvalOptions, EvalReport};
use crate::model::{checkpoint, Bound, Mode, ModelConfig, NewsRecommender};

/// Learning rate of the shallow model and of the desk-scale deep model.
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
/// Learning rate used when fine-tuning a pretrained encoder.
pub const PRETRAINED_LEARNING_RATE: f64 = 3e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Fraction of the history removed to build the student view.
    pub drop_ratio: f64,
    pub num_negatives: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    pub early_stop_patience: usize,
    pub bigfair_enabled: bool,
    pub master_seed: u64,
    pub kl_weight: f64,
    /// Stop gradients through the teacher scores.
    pub detach_teacher: bool,
    /// Reuse the teacher's user-encoder dropout masks for the student.
    pub shared_dropout: bool,
    pub eval: EvalOptions,
    pub run_tag: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            drop_ratio: 0.5,
            num_negatives: 4,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: 32,
            max_steps: 2000,
            eval_interval: 200,
            early_stop_patience: 5,
            bigfair_enabled: false,
            master_seed: 0,
            kl_weight: 1.0,
            detach_teacher: true,
            shared_dropout: false,
            eval: EvalOptions::default(),
            run_tag: "run".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::TrainConfig(m.into()));
        if !(0.0..=1.0).contains(&self.drop_ratio) {
            return fail("drop_ratio must lie in [0, 1]");
        }
        if self.num_negatives == 0 {
            return fail("num_negatives must be at least 1");
        }
        if self.eval_interval == 0 {
            return fail("eval_interval must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return fail("kl_weight must be non-negative");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("drop_ratio".into(), format!("{:?}", self.drop_ratio)),
            ("num_negatives".into(), self.num_negatives.to_string()),
            ("learning_rate".into(), format!("{:?}", self.learning_rate)),
            ("batch_size".into(), self.batch_size.to_string()),
            ("max_steps".into(), self.max_steps.to_string()),
            ("eval_interval".into(), self.eval_interval.to_string()),
            ("early_stop_patience".into(), self.early_stop_patience.to_string()),
            ("bigfair_enabled".into(), self.bigfair_enabled.to_string()),
            ("master_seed".into(), self.master_seed.to_string()),
            ("kl_weight".into(), format!("{:?}", self.kl_weight)),
            ("detach_teacher".into(), self.detach_teacher.to_string()),
            ("shared_dropout".into(), self.shared_dropout.to_string()),
            ("cold_threshold".into(), self.eval.cold_threshold.to_string()),
            ("pooled_auc".into(), self.eval.pooled.to_string()),
            ("run_tag".into(), self.run_tag.clone()),
        ]
    }
}

/// `-log softmax(scores)[positive_index]` for a `[1, 1+K]` score row.
pub fn infonce_loss(g: &mut Graph<'_>, scores: Var, positive_index: usize) -> Result<Var> {
    let ls = g.log_softmax(scores)?;
    let picked = g.select(ls, positive_index)?;
    Ok(g.scale(picked, -1.0)?)
}

/// `D_KL(softmax(y) || softmax(y_hat))` over one sample's candidates; for
/// `[n, 1+K]` inputs, the sum of the per-row divergences.
pub fn kl_loss(g: &mut Graph<'_>, y: Var, y_hat: Var, detach_teacher: bool) -> Result<Var> {
    if g.shape(y) != g.shape(y_hat) {
        return Err(Error::Invalid(format!(
            "kl_loss: teacher {:?} and student {:?} differ in shape",
            g.shape(y),
            g.shape(y_hat)
        )));
    }
    let teacher = if detach_teacher { g.detach(y) } else { y };
    let p = g.softmax(teacher)?;
    let log_p = g.log_softmax(teacher)?;
    let log_q = g.log_softmax(y_hat)?;
    let diff = g.sub(log_p, log_q)?;
    let terms = g.mul(p, diff)?;
    Ok(g.sum(terms)?)
}

/// Scalar forms of the two losses on plain score vectors.
pub fn infonce_value(scores: &[f64], positive_index: usize) -> Result<f64> {
    let mut g = Graph::no_grad();
    let s = g.constant(Tensor::row(scores.to_vec()))?;
    let l = infonce_loss(&mut g, s, positive_index)?;
    Ok(g.value(l).values()[0])
}

pub fn kl_value(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    let mut g = Graph::no_grad();
    let a = g.constant(Tensor::row(y.to_vec()))?;
    let b = g.constant(Tensor::row(y_hat.to_vec()))?;
    let l = kl_loss(&mut g, a, b, true)?;
    Ok(g.value(l).values()[0])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub loss: f64,
    pub rec_loss: f64,
    pub kl_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub step: usize,
    pub path: Option<PathBuf>,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<CheckpointRecord>,
    /// One entry per optimizer step.
    pub losses: Vec<StepLoss>,
    pub final_step: usize,
    pub stopped_early: bool,
    pub model: NewsRecommender,
}

struct Rngs {
    shuffle: Rng,
    dropout: Rng,
    behavior: Rng,
}

/// Scores `[users, 1+K]` of each user row against its own candidate slots
/// in the projected news matrix.
fn slate_scores(g: &mut Graph<'_>, users: Var, news: Var, slots: &[usize], width: usize) -> Result<Var> {
    let rows = slots.len() / width;
    let cands = g.gather_rows(news, slots)?;
    let owner: Vec<usize> = (0..slots.len()).map(|i| i / width).collect();
    let users = g.gather_rows(users, &owner)?;
    let prod = g.mul(cands, users)?;
    let dim = g.shape(prod)[1];
    let ones = g.constant(Tensor::matrix(dim, 1, vec![1.0; dim])?)?;
    let s = g.matmul(prod, ones)?;
    Ok(g.reshape(s, vec![rows, width])?)
}

/// Loss graph for one minibatch. Every distinct news item is encoded once,
/// in one batch, and shared by the teacher and student views; users are
/// encoded together too. Both losses are means over the batch, so samples
/// without history add zero KL but still count in the denominator.
fn batch_loss<'p>(
    model: &'p NewsRecommender,
    g: &mut Graph<'p>,
    b: &Bound,
    data: &Dataset,
    batch: &[usize],
    cfg: &TrainConfig,
    rngs: &mut Rngs,
) -> Result<(Var, StepLoss)> {
    let width = cfg.num_negatives + 1;
    let mut slot_of: HashMap<usize, usize> = HashMap::new();
    let mut order: Vec<usize> = Vec::new();
    let mut slot = |id: usize| {
        *slot_of.entry(id).or_insert_with(|| {
            order.push(id);
            order.len() - 1
        })
    };
    let mut cand_slots = Vec::with_capacity(batch.len() * width);
    let mut positives = Vec::with_capacity(batch.len());
    let mut histories: Vec<Vec<usize>> = Vec::new();
    // Batch rows of the samples that have a history, in batch order.
    let mut with_history = Vec::new();
    for (row, &si) in batch.iter().enumerate() {
        let sample = &data.train[si];
        if sample.candidates.len() != width {
            return Err(Error::TrainConfig(format!(
                "sample {} has {} candidates, expected {}",
                sample.impression_id,
                sample.candidates.len(),
                width
            )));
        }
        cand_slots.extend(sample.candidates.iter().map(|c| slot(*c)));
        positives.push(row * width + sample.positive_index);
        let history = &data.users[sample.user].history;
        if !history.is_empty() {
            histories.push(history.iter().map(|h| slot(*h)).collect());
            with_history.push(row);
        }
    }
    let titles: Vec<&[u32]> = order.iter().map(|n| data.news[*n].token_ids.as_slice()).collect();
    let news = model.encode_titles(g, b, &titles, &mut Mode::Train(&mut rngs.dropout))?;
    let projected_news = model.project(g, b, news)?;

    let encode = |g: &mut Graph<'p>, hists: &[Vec<usize>], rng: &mut Rng| -> Result<Var> {
        let flat: Vec<usize> = hists.iter().flatten().copied().collect();
        let lens: Vec<usize> = hists.iter().map(Vec::len).collect();
        let stacked = g.gather_rows(news, &flat)?;
        let users = model.encode_users(g, b, stacked, &lens, &mut Mode::Train(rng))?;
        model.project(g, b, users)
    };

    let shared = rngs.dropout.clone();
    let teacher_users = if histories.is_empty() {
        None
    } else {
        Some(encode(g, &histories, &mut rngs.dropout)?)
    };
    let users = if with_history.len() == batch.len() {
        teacher_users.expect("every sample has a history")
    } else {
        let empty = model.empty_history(b);
        let empty = model.project(g, b, empty)?;
        let (table, empty_row) = match teacher_users {
            Some(t) => (g.concat_rows(&[t, empty])?, with_history.len()),
            None => (empty, 0),
        };
        let mut next = 0;
        let rows: Vec<usize> = (0..batch.len())
            .map(|r| {
                if with_history.get(next) == Some(&r) {
                    next += 1;
                    next - 1
                } else {
                    empty_row
                }
            })
            .collect();
        g.gather_rows(table, &rows)?
    };
    let y = slate_scores(g, users, projected_news, &cand_slots, width)?;

    let scale = 1.0 / batch.len() as f64;
    let log_probs = g.log_softmax(y)?;
    let flat = g.reshape(log_probs, vec![batch.len() * width, 1])?;
    let picked = g.gather_rows(flat, &positives)?;
    let rec = g.sum(picked)?;
    let rec = g.scale(rec, -scale)?;
    let rec_value = g.value(rec).values()[0];

    let (total, kl_value) = if cfg.bigfair_enabled && !with_history.is_empty() {
        let kept = histories
            .iter()
            .map(|h| drop_behaviors(h, cfg.drop_ratio, &mut rngs.behavior))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let students = if cfg.shared_dropout {
            let mut rng = shared;
            encode(g, &kept, &mut rng)?
        } else {
            encode(g, &kept, &mut rngs.dropout)?
        };
        let slots: Vec<usize> = with_history
            .iter()
            .flat_map(|r| cand_slots[r * width..(r + 1) * width].iter().copied())
            .collect();
        let y_hat = slate_scores(g, students, projected_news, &slots, width)?;
        let teacher = if with_history.len() == batch.len() {
            y
        } else {
            g.gather_rows(y, &with_history)?
        };
        let kl = kl_loss(g, teacher, y_hat, cfg.detach_teacher)?;
        let kl = g.scale(kl, scale)?;
        let kl_value = g.value(kl).values()[0];
        let weighted = g.scale(kl, cfg.kl_weight)?;
        (g.add(rec, weighted)?, kl_value)
    } else {
        (rec, 0.0)
    };
    let loss = StepLoss {
        loss: g.value(total).values()[0],
        rec_loss: rec_value,
        kl_loss: kl_value,
    };
    Ok((total, loss))
}

fn non_finite_at(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss { step },
        other => other,
    }
}

/// Minibatch loss and its gradient for every parameter (zeros where a
/// parameter is unused), with all random streams seeded from `seed`. The
/// model is not updated, so repeated calls are deterministic.
pub fn minibatch_gradients(
    model: &NewsRecommender,
    data: &Dataset,
    batch: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(StepLoss, Vec<Vec<f64>>)> {
    let mut rngs = Rngs {
        shuffle: Rng::stream(seed, Stream::Sampling),
        dropout: Rng::stream(seed, Stream::Dropout),
        behavior: Rng::stream(seed, Stream::BehaviorDrop),
    };
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let (total, loss) = batch_loss(model, &mut g, &b, data, batch, cfg, &mut rngs)?;
    let grads = g.backward(total)?;
    let per_param = model
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| grads.param(i).unwrap_or_else(|| vec![0.0; p.value.len()]))
        .collect();
    Ok((loss, per_param))
}

/// One optimizer update; returns the batch losses.
fn train_step(
    model: &mut NewsRecommender,
    adam: &mut AdamState,
    data: &Dataset,
    batch: &[usize],
    cfg: &TrainConfig,
    rngs: &mut Rngs,
    step: usize,
) -> Result<StepLoss> {
    let (grads, loss) = {
        let mut g = Graph::new();
        let b = model.bind(&mut g);
        let (total, loss) = batch_loss(model, &mut g, &b, data, batch, cfg, rngs).map_err(non_finite_at(step))?;
        if !(loss.loss.is_finite() && loss.rec_loss.is_finite() && loss.kl_loss.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        (g.backward(total)?, loss)
    };
    let params = model.params_mut();
    params.accumulate(&grads);
    params.ensure_grads();
    adam.step(params).map_err(|e| non_finite_at(step)(e.into()))?;
    Ok(loss)
}

struct RunFiles {
    dir: PathBuf,
    metrics: String,
}

impl RunFiles {
    fn new(dir: &Path) -> Self {
        RunFiles {
            dir: dir.to_path_buf(),
            metrics: "step,loss,rec_loss,kl_loss,overall_auc,heavy_auc,cold_auc\n".into(),
        }
    }

    fn manifest(&self, model_cfg: &ModelConfig, cfg: &TrainConfig, status: &str) -> Result<()> {
        let mut out = String::new();
        for (k, v) in model_cfg.to_kv().iter().chain(&cfg.to_kv()) {
            out.push_str(&format!("{k}={v}\n"));
        }
        out.push_str(&format!("status={status}\n"));
        write_file(&self.dir.join("run_manifest"), &out)
    }

    fn metrics_row(&mut self, step: usize, loss: Option<StepLoss>, report: &EvalReport) -> Result<()> {
        let (l, r, k) = match loss {
            Some(s) => (s.loss.to_string(), s.rec_loss.to_string(), s.kl_loss.to_string()),
            None => Default::default(),
        };
        self.metrics.push_str(&format!(
            "{step},{l},{r},{k},{},{},{}\n",
            fmt_points(report.overall),
            fmt_points(report.heavy),
            fmt_points(report.cold)
        ));
        write_file(&self.dir.join("metrics.csv"), &self.metrics)
    }
}

/// Mean of the step losses in `window`.
fn mean_loss(window: &[StepLoss]) -> Option<StepLoss> {
    if window.is_empty() {
        return None;
    }
    let n = window.len() as f64;
    Some(StepLoss {
        loss: window.iter().map(|s| s.loss).sum::<f64>() / n,
        rec_loss: window.iter().map(|s| s.rec_loss).sum::<f64>() / n,
        kl_loss: window.iter().map(|s| s.kl_loss).sum::<f64>() / n,
    })
}

/// Trains from a fresh initialization, evaluating and checkpointing at
/// steps `0, eval_interval, 2 * eval_interval, ...`. Stops at `max_steps` or
/// after `early_stop_patience` evaluations without an overall-AUC gain.
/// When `out_dir` is given, writes `metrics.csv`, `run_manifest`,
/// `unfairness.csv` and `checkpoints/step_<n>.bin` there.
pub fn train(data: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::TrainConfig("training set is empty".into()));
    }
    if model_cfg.vocab_size < data.vocab_size() {
        return Err(Error::ModelConfig(format!(
            "vocab_size {} is smaller than the dataset vocabulary {}",
            model_cfg.vocab_size,
            data.vocab_size()
        )));
    }
    let mut model = NewsRecommender::new(model_cfg.clone(), cfg.master_seed)?;
    let mut adam = AdamState::new(model.params(), cfg.learning_rate);
    let mut rngs = Rngs {
        shuffle: Rng::stream(cfg.master_seed, Stream::Sampling),
        dropout: Rng::stream(cfg.master_seed, Stream::Dropout),
        behavior: Rng::stream(cfg.master_seed, Stream::BehaviorDrop),
    };
    let mut files = out_dir.map(RunFiles::new);
    if let Some(f) = &files {
        f.manifest(model_cfg, cfg, "running")?;
    }

    let mut records = Vec::new();
    let mut losses: Vec<StepLoss> = Vec::new();
    let mut checkpoint = |step: usize,
                          model: &NewsRecommender,
                          window: &[StepLoss],
                          files: &mut Option<RunFiles>|
     -> Result<EvalReport> {
        let report = evaluation::evaluate(model, data, &cfg.eval)?;
        let mut path = None;
        if let Some(f) = files.as_mut() {
            let p = f.dir.join("checkpoints").join(format!("step_{step}.bin"));
            let meta = vec![
                ("step".to_string(), step.to_string()),
                ("master_seed".to_string(), cfg.master_seed.to_string()),
            ];
            checkpoint::save(&p, model, &meta)?;
            f.metrics_row(step, mean_loss(window), &report)?;
            path = Some(p);
        }
        records.push(CheckpointRecord {
            step,
            path,
            report: report.clone(),
        });
        Ok(report)
    };

    let first = checkpoint(0, &model, &[], &mut files)?;
    let mut best = first.overall;
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut cursor = order.len();
    let mut window_start = 0usize;
    let mut step = 0usize;
    let mut stopped_early = false;
    while step < cfg.max_steps {
        if cursor >= order.len() {
            rngs.shuffle.shuffle(&mut order);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch = order[cursor..end].to_vec();
        cursor = end;
        step += 1;
        losses.push(train_step(&mut model, &mut adam, data, &batch, cfg, &mut rngs, step)?);
        if step.is_multiple_of(cfg.eval_interval) {
            let report = checkpoint(step, &model, &losses[window_start..], &mut files)?;
            window_start = losses.len();
            match (report.overall, best) {
                (Some(v), Some(b)) if v <= b => since_best += 1,
                (None, _) => since_best += 1,
                (Some(v), _) => {
                    best = Some(v);
                    since_best = 0;
                }
            }
            if since_best >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }

    if let Some(f) = &files {
        let mut out = String::from(
            "model_tag,seed,best_overall_step,best_cold_step,cold_at_best_overall,cold_at_best_cold,unfairness\n",
        );
        if let Ok(u) = evaluation::unfairness(&records) {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                cfg.run_tag,
                cfg.master_seed,
                u.best_overall_step,
                u.best_cold_step,
                100.0 * u.cold_at_best_overall,
                100.0 * u.cold_at_best_cold,
                u.unfairness
            ));
        }
        write_file(&f.dir.join("unfairness.csv"), &out)?;
        f.manifest(model_cfg, cfg, "complete")?;
    }
    Ok(TrainOutcome {
        records,
        losses,
        final_step: step,
        stopped_early,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{tiny_config, tiny_dataset};
    use crate::data::{EvalImpression, TrainingSample};

    #[test]
    fn loss_examples() {
        assert!((infonce_value(&[0.3; 5], 2).unwrap() - 5f64.ln()).abs() < 1e-12);
        let e = std::f64::consts::E;
        let expected = ((e + 4.0) / e).ln();
        assert!((infonce_value(&[1.0, 0.0, 0.0, 0.0, 0.0], 0).unwrap() - expected).abs() < 1e-12);
        // logits whose softmaxes are [0.5, 0.5] and [0.9, 0.1]
        let kl = kl_value(&[0.0, 0.0], &[9f64.ln(), 0.0]).unwrap();
        assert!((kl - 0.510826).abs() < 1e-6);
        assert_eq!(kl_value(&[0.2, -1.0, 3.0], &[0.2, -1.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn infonce_decreases_with_positive_score() {
        let mut prev = f64::INFINITY;
        for k in 0..20 {
            let l = infonce_value(&[k as f64, 0.0, 0.0, 0.0, 0.0], 0).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn teacher_gradient_is_zero_when_detached() {
        let mut g = Graph::new();
        let y = g.leaf(Tensor::row(vec![0.1, 0.7, -0.3])).unwrap();
        let y_hat = g.leaf(Tensor::row(vec![0.4, -0.2, 0.9])).unwrap();
        let kl = kl_loss(&mut g, y, y_hat, true).unwrap();
        let grads = g.backward(kl).unwrap();
        assert!(grads.wrt(y).is_none_or(|gy| gy.iter().all(|v| *v == 0.0)));
        assert!(grads.wrt(y_hat).unwrap().iter().any(|v| *v != 0.0));

        let mut g = Graph::new();
        let y = g.leaf(Tensor::row(vec![0.1, 0.7, -0.3])).unwrap();
        let y_hat = g.leaf(Tensor::row(vec![0.4, -0.2, 0.9])).unwrap();
        let kl = kl_loss(&mut g, y, y_hat, false).unwrap();
        let grads = g.backward(kl).unwrap();
        assert!(grads.wrt(y).unwrap().iter().any(|v| *v != 0.0));
    }

    fn tiny_training_data() -> Dataset {
        let mut data = tiny_dataset();
        data.train = vec![
            TrainingSample {
                user: 0,
                candidates: vec![3, 4],
                positive_index: 0,
                impression_id: "1".into(),
            },
            TrainingSample {
                user: 1,
                candidates: vec![1, 4],
                positive_index: 1,
                impression_id: "2".into(),
            },
        ];
        data.eval = vec![
            EvalImpression {
                user: 0,
                candidates: vec![3, 4, 1],
                labels: vec![1, 0, 0],
                impression_id: "3".into(),
            },
            EvalImpression {
                user: 1,
                candidates: vec![1, 2],
                labels: vec![0, 1],
                impression_id: "4".into(),
            },
        ];
        data
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            num_negatives: 1,
            batch_size: 2,
            max_steps: 7,
            eval_interval: 3,
            learning_rate: 1e-2,
            bigfair_enabled: true,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn checkpoint_steps_follow_interval() {
        let data = tiny_training_data();
        let out = train(&data, &tiny_config(), &tiny_train_config(), None).unwrap();
        let steps: Vec<usize> = out.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 3, 6]);
        assert_eq!(out.losses.len(), 7);
        assert_eq!(out.final_step, 7);

        let zero = TrainConfig {
            max_steps: 0,
            ..tiny_train_config()
        };
        let out = train(&data, &tiny_config(), &zero, None).unwrap();
        assert_eq!(out.records.len(), 1);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn disabled_bigfair_has_zero_kl() {
        let data = tiny_training_data();
        let cfg = TrainConfig {
            bigfair_enabled: false,
            ..tiny_train_config()
        };
        let out = train(&data, &tiny_config(), &cfg, None).unwrap();
        for l in &out.losses {
            assert_eq!(l.kl_loss, 0.0);
            assert_eq!(l.loss, l.rec_loss);
        }
    }

    #[test]
    fn kl_is_nonnegative_in_training() {
        let data = tiny_training_data();
        let out = train(&data, &tiny_config(), &tiny_train_config(), None).unwrap();
        for l in &out.losses {
            assert!(l.kl_loss >= -1e-15);
            assert!(l.loss >= l.rec_loss - 1e-15);
        }
    }

    #[test]
    fn early_stopping_with_zero_patience_stops_at_first_eval() {
        let data = tiny_training_data();
        let cfg = TrainConfig {
            early_stop_patience: 0,
            ..tiny_train_config()
        };
        let out = train(&data, &tiny_config(), &cfg, None).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.final_step, 3);
    }

    #[test]
    fn rejects_mismatched_negatives() {
        let data = tiny_training_data();
        let cfg = TrainConfig {
            num_negatives: 4,
            ..tiny_train_config()
        };
        assert!(matches!(
            train(&data, &tiny_config(), &cfg, None),
            Err(Error::TrainConfig(_))
        ));
    }

    #[test]
    fn huge_learning_rate_surfaces_step() {
        let data = tiny_training_data();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            max_steps: 50,
            eval_interval: 100,
            ..tiny_train_config()
        };
        match train(&data, &tiny_config(), &cfg, None) {
            Err(Error::NonFiniteLoss { step }) => assert!((1..=50).contains(&step)),
            other => panic!("expected a non-finite loss, got {other:?}"),
        }
    }
}
