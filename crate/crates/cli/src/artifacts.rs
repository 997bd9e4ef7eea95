//! Run directories, frozen configs, and artifact writers.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use ratlab_core::attack::SampleOutcome;
use ratlab_core::data::{load_corpus, Corpus, Document, EmbeddingTable};
use ratlab_core::metrics::{MetricsReport, METRIC_NAMES};
use ratlab_core::report::{annotate, render_html_document, render_text};
use ratlab_core::train::EpochStats;
use ratlab_core::Real;

use crate::Command;

/// Creates the run directory under `out`: the given name, or
/// `<kind>-<timestamp>` made unique. Refuses to reuse an existing
/// directory so no run ever mixes artifacts with another.
pub fn create_run_dir(out: &Path, run_name: &Option<String>, kind: &str) -> Result<PathBuf> {
    let dir = match run_name {
        Some(name) => {
            let dir = out.join(name);
            if dir.exists() {
                bail!("run directory {} already exists", dir.display());
            }
            dir
        }
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            let mut dir = out.join(format!("{}-{}", kind, stamp));
            let mut n = 1;
            while dir.exists() {
                n += 1;
                dir = out.join(format!("{}-{}-{}", kind, stamp, n));
            }
            dir
        }
    };
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating run directory {}", dir.display()))?;
    println!("run dir: {}", dir.display());
    Ok(dir)
}

/// Freezes the fully resolved command as `config.json`; `ratlab rerun`
/// replays it.
pub fn write_config(dir: &Path, cmd: &Command) -> Result<()> {
    let json = serde_json::to_string_pretty(cmd).context("serializing run config")?;
    let path = dir.join("config.json");
    fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub struct DataDir {
    pub table: EmbeddingTable<Real>,
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

impl DataDir {
    pub fn split(&self, name: &str) -> Result<&[Document]> {
        match name {
            "train" => Ok(&self.train.docs),
            "dev" => Ok(&self.dev.docs),
            "test" => Ok(&self.test.docs),
            other => bail!("unknown split {:?} (expected train, dev or test)", other),
        }
    }
}

pub fn load_data(dir: &Path) -> Result<DataDir> {
    let table = EmbeddingTable::load(dir.join("embeddings.txt"))
        .with_context(|| format!("loading embeddings from {}", dir.display()))?;
    let load = |name: &str| -> Result<Corpus> {
        let path = dir.join(format!("{}.jsonl", name));
        let (corpus, stats) =
            load_corpus(&path, &table).with_context(|| format!("loading {}", path.display()))?;
        if stats.unknown_tokens > 0 {
            log::warn!(
                "{}: {} of {} tokens missing from the embedding table",
                path.display(),
                stats.unknown_tokens,
                stats.total_tokens
            );
        }
        log::info!("{}: {} documents", path.display(), stats.docs);
        Ok(corpus)
    };
    let train = load("train")?;
    let dev = load("dev")?;
    let test = load("test")?;
    Ok(DataDir { table, train, dev, test })
}

pub fn write_history(dir: &Path, history: &[EpochStats]) -> Result<()> {
    let mut csv = String::from("epoch,train_loss,dev_acc\n");
    for e in history {
        csv.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.dev_acc));
    }
    let path = dir.join("history.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_trace(
    dir: &Path,
    name: &str,
    rounds: &[ratlab_core::attack::RoundRecord],
) -> Result<()> {
    let mut csv = String::from("round,loss_before,loss_after,replacements\n");
    for r in rounds {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.round, r.loss_before, r.loss_after, r.replacements
        ));
    }
    let path = dir.join(name);
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Mean metric table across seeds. Counts and accuracies average over all
/// seeds; each rationale metric averages the per-seed means over the seeds
/// where it was defined, with that seed count in the last column.
pub fn mean_metrics_csv(reports: &[(u64, MetricsReport)]) -> String {
    let n = reports.len() as f64;
    let mut csv = String::from("section,metric,mean,seeds\n");
    let count_row = |csv: &mut String, name: &str, f: &dyn Fn(&MetricsReport) -> f64| {
        let m = reports.iter().map(|(_, r)| f(r)).sum::<f64>() / n;
        csv.push_str(&format!("counts,{},{},{}\n", name, m, reports.len()));
    };
    count_row(&mut csv, "total", &|r| r.total as f64);
    count_row(&mut csv, "flipped", &|r| r.flipped as f64);
    count_row(&mut csv, "kept", &|r| r.kept as f64);
    let acc_row = |csv: &mut String, name: &str, f: &dyn Fn(&MetricsReport) -> f64| {
        let m = reports.iter().map(|(_, r)| f(r)).sum::<f64>() / n;
        csv.push_str(&format!("accuracy,{},{},{}\n", name, m, reports.len()));
    };
    acc_row(&mut csv, "acc_clean", &|r| r.accuracy.acc_clean);
    acc_row(&mut csv, "acc_adv", &|r| r.accuracy.acc_adv);
    acc_row(&mut csv, "delta_acc_abs", &|r| r.accuracy.delta_acc_abs);
    for name in METRIC_NAMES {
        let values: Vec<f64> = reports
            .iter()
            .filter_map(|(_, r)| rationale_mean(r, name))
            .collect();
        if values.is_empty() {
            csv.push_str(&format!("rationale,{},,0\n", name));
        } else {
            let m = values.iter().sum::<f64>() / values.len() as f64;
            csv.push_str(&format!("rationale,{},{},{}\n", name, m, values.len()));
        }
    }
    csv
}

pub fn rationale_mean(report: &MetricsReport, name: &str) -> Option<f64> {
    report
        .rationale
        .as_ref()?
        .iter()
        .find(|m| m.name == name)?
        .mean
}

/// Writes `<stem>.txt` and `<stem>.html`, the first `limit` documents
/// annotated with gold/before/trigger/after marker layers.
pub fn write_reports(
    dir: &Path,
    stem: &str,
    title: &str,
    samples: &[SampleOutcome],
    vocab: &[String],
    limit: usize,
) -> Result<()> {
    let mut text = String::new();
    let mut sections = Vec::new();
    for (i, s) in samples.iter().take(limit).enumerate() {
        let ann = annotate(s, vocab)
            .with_context(|| format!("annotating document {} for the report", i))?;
        let head = format!(
            "doc {}: label {}, clean {}, adversarial {}{}",
            i,
            s.label,
            s.clean_class,
            s.adv_class,
            if s.flipped { " (flipped)" } else { "" }
        );
        text.push_str(&format!("# {}\n{}\n\n", head, render_text(&ann)));
        sections.push((head, ann));
    }
    let path = dir.join(format!("{}.txt", stem));
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    let path = dir.join(format!("{}.html", stem));
    fs::write(&path, render_html_document(title, &sections))
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Option cell for a csv table: the value or the empty string.
pub fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
