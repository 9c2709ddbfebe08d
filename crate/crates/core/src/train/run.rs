//! Full training run: data loading, the step loop, periodic evaluation, an
//! append-only CSV log and checkpoints, with resume from the latest checkpoint.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::config::TrainConfig;
use super::trainer::{StepMetrics, Trainer};
use crate::data::{read_checkpoint, write_checkpoint, BatchIterator, Manifest, Split};
use crate::error::{Error, Result};
use crate::quantize::MetricsReport;
use crate::tensor::Tensor;

pub const LOG_NAME: &str = "train_log.csv";
pub const CHECKPOINT_NAME: &str = "checkpoint.pqck";
pub const LOG_HEADER: &str = "step,loss_total,recon_q_mse,recon_e_mse,commit,codebook_term,lambda,batch_usage,eval_usage,eval_perplexity,eval_rmse";

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub resume: bool,
    pub quiet: bool,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub final_step: u64,
    pub steps_run: u64,
    pub last_eval: Option<MetricsReport>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn snapshot_name(step: u64) -> String {
    format!("ckpt_{step:06}.pqck")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn format_log_row(m: &StepMetrics, eval: Option<&MetricsReport>) -> String {
    let t = &m.terms;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        m.step,
        t.total,
        t.recon_q,
        opt(t.recon_e),
        t.commit,
        t.codebook,
        t.lambda,
        opt(m.batch_usage),
        opt(eval.and_then(|e| e.usage)),
        opt(eval.and_then(|e| e.perplexity)),
        opt(eval.map(|e| e.rmse)),
    )
}

/// Train and eval splits of the manifest, checked against the model's feature width.
pub fn load_corpus(manifest: &Path, feature_dim: usize) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let m = Manifest::read(manifest)?;
    let train = m.load(Split::Train)?;
    let eval = m.load(Split::Eval)?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "{} needs both train and eval sequences ({} train, {} eval)",
            manifest.display(),
            train.len(),
            eval.len()
        )));
    }
    if let Some(bad) = train.iter().chain(&eval).find(|t| t.cols() != feature_dim) {
        return Err(Error::shape(
            "load_corpus",
            format!("features have width {}, model expects {feature_dim}", bad.cols()),
        ));
    }
    Ok((train, eval))
}

/// Keeps the header and rows up to `step`, dropping rows written after the checkpoint.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let row_step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
        if i == 0 || row_step.is_some_and(|s| s <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    write_checkpoint(path, &trainer.to_tensors())
}

pub fn run_training(cfg: &TrainConfig, out_dir: &Path, opts: RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let (train, eval) = load_corpus(&cfg.manifest, cfg.model.feature_dim)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = out_dir.join(CHECKPOINT_NAME);
    let log_path = out_dir.join(LOG_NAME);
    let mut batches = BatchIterator::new(&train, cfg.batch_frames, cfg.window_frames, cfg.seed)?;

    let resuming = opts.resume && ckpt_path.exists() && log_path.exists();
    let mut trainer = if resuming {
        Trainer::from_tensors(cfg.clone(), &read_checkpoint(&ckpt_path)?)?
    } else {
        let mut probe = BatchIterator::new(&train, cfg.batch_frames, cfg.window_frames, cfg.seed)?;
        let first = probe.next().expect("batch iterator is endless");
        Trainer::new(cfg.clone(), &first)?
    };
    let start = trainer.step;
    let mut summary = RunSummary {
        final_step: start,
        steps_run: 0,
        last_eval: None,
        checkpoint: ckpt_path.clone(),
        log: log_path.clone(),
    };
    if resuming && start >= cfg.total_steps {
        return Ok(summary);
    }

    let file = if resuming {
        truncate_log(&log_path, start)?;
        batches.skip_batches(start);
        OpenOptions::new().append(true).open(&log_path)
    } else {
        File::create(&log_path).and_then(|mut f| writeln!(f, "{LOG_HEADER}").map(|_| f))
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);

    for step in start + 1..=cfg.total_steps {
        let batch = batches.next().expect("batch iterator is endless");
        let metrics = trainer.train_step(&batch)?;
        let eval_now = step % cfg.eval_every == 0 || step == cfg.total_steps;
        let report = if eval_now { Some(trainer.evaluate(&eval)?) } else { None };
        writeln!(log, "{}", format_log_row(&metrics, report.as_ref())).map_err(|e| Error::io(&log_path, e))?;
        if let Some(r) = &report {
            if !opts.quiet {
                eprintln!(
                    "step {step}: loss {:.5} usage {} perplexity {} rmse {:.5}",
                    metrics.terms.total,
                    opt(r.usage),
                    r.perplexity.map(|p| format!("{p:.2}")).unwrap_or_default(),
                    r.rmse
                );
            }
            summary.last_eval = report;
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            save(&trainer, &out_dir.join(snapshot_name(step)))?;
            save(&trainer, &ckpt_path)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    save(&trainer, &ckpt_path)?;
    summary.final_step = trainer.step;
    summary.steps_run = trainer.step - start;
    Ok(summary)
}
