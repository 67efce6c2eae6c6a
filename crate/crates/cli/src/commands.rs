use std::path::{Path, PathBuf};

use bigfair_core::data::mind::{load_dir, write_dir, LoadOptions};
use bigfair_core::data::synthetic::generate_corpus;
use bigfair_core::data::{classify_user, Activeness, Dataset};
use bigfair_core::evaluation::sweep::sweep_p;
use bigfair_core::evaluation::{self, fmt_points};
use bigfair_core::model::checkpoint;
use bigfair_core::training;

use crate::config::{parse_list, RunConfig};
use crate::report;
use crate::CliError;

pub const RESOLVED_CONFIG: &str = "config.resolved";

fn write(path: &Path, content: &str) -> Result<(), CliError> {
    let io = |source| CliError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, content).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Corpus from `data` when given, otherwise generated from the config.
fn dataset(cfg: &RunConfig, data: Option<&Path>) -> Result<Dataset, CliError> {
    match data {
        Some(dir) => {
            let opts = LoadOptions {
                max_title_len: cfg.synthetic.max_title_len,
                max_history_len: cfg.synthetic.max_history_len,
                num_negatives: cfg.synthetic.num_negatives,
                seed: cfg.seed,
            };
            let (data, parse) = load_dir(dir, &opts)?;
            eprintln!(
                "loaded {}: {} news, {} users, {} training samples, {} eval impressions ({} unknown ids skipped)",
                dir.display(),
                data.news.len(),
                data.users.len(),
                data.train.len(),
                data.eval.len(),
                parse.unknown_history_ids + parse.unknown_candidate_ids
            );
            Ok(data)
        }
        None => Ok(generate_corpus(&cfg.synthetic)?.dataset),
    }
}

pub fn gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config, seed)?;
    let corpus = generate_corpus(&cfg.synthetic)?;
    let d = &corpus.dataset;
    write_dir(out, &d.vocab, &d.news, &d.users, &corpus.train_impressions, &corpus.dev_impressions)?;
    write(&out.join(RESOLVED_CONFIG), &cfg.resolved())?;
    let cold = d
        .users
        .iter()
        .filter(|u| classify_user(u.history.len(), cfg.synthetic.cold_threshold) == Activeness::Cold)
        .count();
    let manifest = format!(
        "seed={}\nnum_news={}\nnum_users={}\ncold_users={}\ntrain_impressions={}\ndev_impressions={}\nconfig={}\nstatus=complete\n",
        cfg.seed,
        d.news.len(),
        d.users.len(),
        cold,
        corpus.train_impressions.len(),
        corpus.dev_impressions.len(),
        RESOLVED_CONFIG
    );
    write(&out.join("manifest"), &manifest)?;
    println!(
        "wrote {} news, {} users ({} cold), {} train and {} dev impressions to {}",
        d.news.len(),
        d.users.len(),
        cold,
        corpus.train_impressions.len(),
        corpus.dev_impressions.len(),
        out.display()
    );
    Ok(())
}

/// Rewrites the `status=` line of a run manifest after a failure.
fn mark_failed(dir: &Path, err: &CliError) {
    let path = dir.join("run_manifest");
    if let Ok(text) = std::fs::read_to_string(&path) {
        let mut out: String = text
            .lines()
            .filter(|l| !l.starts_with("status=") && !l.starts_with("error="))
            .map(|l| format!("{l}\n"))
            .collect();
        out.push_str("status=failed\n");
        out.push_str(&format!("error={}\n", err.to_string().replace('\n', " ")));
        let _ = std::fs::write(path, out);
    }
}

pub fn train(config: &Path, data: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config, seed)?;
    let data = dataset(&cfg, data)?;
    let model_cfg = cfg
        .model
        .model_config(data.vocab_size(), data.max_title_len, cfg.synthetic.max_history_len);
    write(&out.join(RESOLVED_CONFIG), &cfg.resolved())?;
    let outcome = match training::train(&data, &model_cfg, &cfg.train, Some(out)) {
        Ok(o) => o,
        Err(e) => {
            let e = CliError::from(e);
            mark_failed(out, &e);
            return Err(e);
        }
    };
    for r in &outcome.records {
        println!(
            "step {:>6}  overall {:>8}  heavy {:>8}  cold {:>8}",
            r.step,
            short(r.report.overall),
            short(r.report.heavy),
            short(r.report.cold)
        );
    }
    match evaluation::unfairness(&outcome.records) {
        Ok(u) => println!(
            "best overall at step {}, best cold at step {}, unfairness {:.4}",
            u.best_overall_step, u.best_cold_step, u.unfairness
        ),
        Err(e) => println!("unfairness unavailable: {e}"),
    }
    Ok(())
}

fn short(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

fn meta_value<'a>(meta: &'a [(String, String)], key: &str) -> Option<&'a str> {
    meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

pub fn eval(ckpt: &Path, data: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let (model, meta) = checkpoint::load(ckpt)?;
    let cfg = config.map(|c| RunConfig::load(c, None)).transpose()?;
    let opts = cfg.as_ref().map(|c| c.train.eval).unwrap_or_default();
    let seed = meta_value(&meta, "master_seed").and_then(|s| s.parse().ok()).unwrap_or(0);
    let load = LoadOptions {
        max_title_len: model.config().max_title_len,
        max_history_len: model.config().max_history_len,
        num_negatives: cfg.as_ref().map(|c| c.synthetic.num_negatives).unwrap_or(4),
        seed,
    };
    let (dataset, _) = load_dir(data, &load)?;
    if dataset.vocab_size() > model.config().vocab_size {
        return Err(CliError::Usage(format!(
            "corpus vocabulary ({}) is larger than the checkpoint's ({})",
            dataset.vocab_size(),
            model.config().vocab_size
        )));
    }
    let report = evaluation::evaluate(&model, &dataset, &opts)?;
    print!("{report}");
    let dir: PathBuf = match out {
        Some(o) => o.to_path_buf(),
        None => ckpt.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    report.write_buckets_csv(&dir.join("buckets.csv"))?;
    Ok(())
}

pub fn sweep(
    config: &Path,
    data: Option<&Path>,
    out: &Path,
    p_list: Option<&str>,
    jobs: usize,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config, seed)?;
    if let Some(list) = p_list {
        cfg.p_list = parse_list(list).map_err(|_| CliError::Usage(format!("invalid --p-list `{list}`")))?;
    }
    if cfg.p_list.is_empty() {
        return Err(CliError::Usage("empty drop-ratio list".into()));
    }
    let data = dataset(&cfg, data)?;
    let model_cfg = cfg
        .model
        .model_config(data.vocab_size(), data.max_title_len, cfg.synthetic.max_history_len);
    write(&out.join(RESOLVED_CONFIG), &cfg.resolved())?;
    let train_cfg = training::TrainConfig {
        bigfair_enabled: true,
        ..cfg.train.clone()
    };
    let cells = sweep_p(&data, &model_cfg, &train_cfg, &cfg.p_list, &cfg.sweep_seeds, jobs, Some(out))?;
    let failed: Vec<String> = cells
        .iter()
        .filter_map(|c| c.outcome.as_ref().err().map(|e| format!("p={} seed={}: {e}", c.drop_ratio, c.seed)))
        .collect();
    for c in &cells {
        if let Ok(r) = &c.outcome {
            println!(
                "p={} seed={} unfairness {:.4} heavy@best {}",
                c.drop_ratio,
                c.seed,
                r.unfairness.unfairness,
                fmt_points(r.unfairness.heavy_at_best_overall)
            );
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{} of {} sweep cells failed: {}",
            failed.len(),
            cells.len(),
            failed.join("; ")
        )))
    }
}

pub fn report(runs: &[PathBuf], out: &Path, svg: bool) -> Result<(), CliError> {
    let loaded = report::load_runs(runs)?;
    write(&out.join("curves.csv"), &report::curves_csv(&loaded))?;
    write(&out.join("unfairness_summary.csv"), &report::unfairness_csv(&loaded))?;
    if svg {
        for r in &loaded {
            write(&out.join(format!("{}.svg", report::file_stem(&r.tag))), &report::svg_chart(r))?;
        }
    }
    println!("merged {} runs into {}", loaded.len(), out.display());
    Ok(())
}

