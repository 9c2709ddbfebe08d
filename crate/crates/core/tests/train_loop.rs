//! Training loop behavior: learning signal, determinism, resume and logs.

mod common;

use std::fs;

use common::{small_corpus, small_train_config};
use pqvae::data::{read_checkpoint, BatchIterator, Split};
use pqvae::quantize::QuantizerKind;
use pqvae::train::{run_training, RunOptions, Trainer, CHECKPOINT_NAME, LOG_HEADER, LOG_NAME};

const QUIET: RunOptions = RunOptions { resume: false, quiet: true };
const RESUME: RunOptions = RunOptions { resume: true, quiet: true };

fn log_rows(dir: &std::path::Path) -> Vec<String> {
    fs::read_to_string(dir.join(LOG_NAME)).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn overfits_a_single_batch() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(dir.path(), 0);
    let seqs = m.load(Split::Train).unwrap();
    let mut cfg = small_train_config(&m.root.join("manifest.tsv"), QuantizerKind::None, vec![]);
    cfg.loss.alpha = 0.0;
    cfg.loss.lambda.start_value = 0.0;
    cfg.loss.lambda.end_value = 0.0;
    let batch = BatchIterator::new(&seqs, 64, 16, 0).unwrap().next().unwrap();
    let mut t = Trainer::new(cfg, &batch).unwrap();
    let losses: Vec<f64> = (0..100).map(|_| t.train_step(&batch).unwrap().terms.total).collect();
    assert!(losses[99] < 0.5 * losses[0], "loss {} -> {}", losses[0], losses[99]);
    assert_eq!(t.step, 100);
}

#[test]
fn runs_are_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(&dir.path().join("corpus"), 1);
    for (kind, sizes) in [(QuantizerKind::Pq, vec![4, 4]), (QuantizerKind::Vq, vec![8]), (QuantizerKind::Rvq, vec![4, 4])] {
        let mut cfg = small_train_config(&m.root.join("manifest.tsv"), kind, sizes);
        cfg.checkpoint_every = 20;
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        run_training(&cfg, &a, QUIET).unwrap();
        run_training(&cfg, &b, QUIET).unwrap();
        for name in [LOG_NAME, CHECKPOINT_NAME, "ckpt_000020.pqck", "ckpt_000040.pqck"] {
            assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{kind} {name}");
        }
        cfg.seed = 9;
        run_training(&cfg, &b, QUIET).unwrap();
        assert_ne!(fs::read(a.join(LOG_NAME)).unwrap(), fs::read(b.join(LOG_NAME)).unwrap());
    }
}

#[test]
fn zero_steps_writes_header_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(&dir.path().join("corpus"), 2);
    let mut cfg = small_train_config(&m.root.join("manifest.tsv"), QuantizerKind::Pq, vec![4, 4]);
    cfg.total_steps = 0;
    let out = dir.path().join("run");
    let s = run_training(&cfg, &out, QUIET).unwrap();
    assert_eq!(s.final_step, 0);
    assert_eq!(log_rows(&out), vec![LOG_HEADER.to_string()]);
    assert!(!read_checkpoint(&out.join(CHECKPOINT_NAME)).unwrap().is_empty());
}

#[test]
fn resume_continues_step_numbering() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(&dir.path().join("corpus"), 3);
    let mut cfg = small_train_config(&m.root.join("manifest.tsv"), QuantizerKind::Pq, vec![4, 4]);
    let out = dir.path().join("run");
    cfg.total_steps = 20;
    run_training(&cfg, &out, QUIET).unwrap();
    cfg.total_steps = 40;
    let s = run_training(&cfg, &out, RESUME).unwrap();
    assert_eq!((s.final_step, s.steps_run), (40, 20));
    let rows = log_rows(&out);
    assert_eq!(rows[0], LOG_HEADER);
    let steps: Vec<u64> = rows[1..].iter().map(|r| r.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (1..=40).collect::<Vec<_>>());

    // Already finished: nothing is rewritten.
    let before = (fs::read(out.join(LOG_NAME)).unwrap(), fs::read(out.join(CHECKPOINT_NAME)).unwrap());
    let again = run_training(&cfg, &out, RESUME).unwrap();
    assert_eq!(again.steps_run, 0);
    let after = (fs::read(out.join(LOG_NAME)).unwrap(), fs::read(out.join(CHECKPOINT_NAME)).unwrap());
    assert_eq!(before, after);
}

#[test]
fn smoke_run_logs_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(&dir.path().join("corpus"), 4);
    let mut cfg = small_train_config(&m.root.join("manifest.tsv"), QuantizerKind::Pq, vec![8, 8]);
    cfg.total_steps = 500;
    cfg.eval_every = 100;
    cfg.loss.lambda = pqvae::train::ScheduleConfig::scaled(500);
    cfg.dual = true;
    let out = dir.path().join("run");
    let s = run_training(&cfg, &out, QUIET).unwrap();
    let rows = log_rows(&out);
    assert_eq!(rows.len(), 501);
    let cols = LOG_HEADER.split(',').count();
    assert!(rows.iter().all(|r| r.split(',').count() == cols));
    let evals = rows[1..].iter().filter(|r| !r.ends_with(',')).count();
    assert_eq!(evals, 5);
    let report = s.last_eval.unwrap();
    assert!(report.rmse.is_finite() && report.usage.unwrap() >= 2);
}
