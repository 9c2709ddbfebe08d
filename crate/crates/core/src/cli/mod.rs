//! The `pqvae` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod spec;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use spec::ExperimentSpec;

use crate::data::{
    gen_synthetic_corpus, read_checkpoint, write_features, Manifest, Split, MANIFEST_NAME,
};
use crate::error::{Error, Result};
use crate::quantize::{compose_codebook, MetricsReport, Quantizer, DEFAULT_COMPOSE_CAP};
use crate::train::{encode_sequence, evaluate, load_state, run_training, RunOptions};

pub const EVAL_HEADER: &str = "usage,perplexity,rmse,tokens,subbook_usage,subbook_perplexity";
pub const SWEEP_NAME: &str = "sweep.csv";
pub const SPEC_EXTENSION: &str = "cfg";

#[derive(Parser, Debug)]
#[command(name = "pqvae", version, about = "Product-quantized autoencoder tokenizer toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// Experiment file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the command's config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (or file, for dump-config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus into --out.
    Gen,
    /// Train from --config, writing the log and checkpoints into --out.
    Train {
        /// Continue from --out/checkpoint.pqck if present.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the eval split of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Train every `*.cfg` in a directory and aggregate final evaluations.
    Sweep {
        #[arg(long)]
        spec_dir: PathBuf,
    },
    /// Export the composed codebook of a PQ checkpoint, optionally with token streams.
    Compose {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest whose sequences are tokenized into --out/tokens.txt.
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_COMPOSE_CAP)]
        cap: u64,
    },
    /// Print the fully defaulted config in canonical form.
    DumpConfig,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}

fn load_spec(g: &GlobalArgs) -> Result<ExperimentSpec> {
    let mut spec = match &g.config {
        Some(p) => ExperimentSpec::from_file(p)?,
        None => ExperimentSpec::default(),
    };
    spec.resolve();
    Ok(spec)
}

fn require_out(g: &GlobalArgs) -> Result<&Path> {
    g.out
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("--out is required for this command".into()))
}

pub fn execute(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Gen => {
            let mut spec = load_spec(g)?;
            if let Some(s) = g.seed {
                spec.synth.seed = s;
            }
            let out = require_out(g)?;
            let m = gen_synthetic_corpus(&spec.synth, out)?;
            if !g.quiet {
                eprintln!("wrote {} sequences to {}", m.entries.len(), out.join(MANIFEST_NAME).display());
            }
            Ok(())
        }
        Command::Train { resume } => {
            if g.config.is_none() {
                return Err(Error::InvalidConfig("train needs --config".into()));
            }
            let mut spec = load_spec(g)?;
            if let Some(s) = g.seed {
                spec.train.seed = s;
            }
            let out = require_out(g)?;
            let summary = run_training(
                &spec.train,
                out,
                RunOptions {
                    resume: *resume,
                    quiet: g.quiet,
                },
            )?;
            if !g.quiet {
                eprintln!(
                    "ran {} steps (now at step {}); checkpoint {}",
                    summary.steps_run,
                    summary.final_step,
                    summary.checkpoint.display()
                );
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            manifest,
            out_csv,
        } => {
            let row = eval_row(checkpoint, manifest)?;
            write_text(out_csv, &format!("{EVAL_HEADER}\n{row}\n"))
        }
        Command::Sweep { spec_dir } => sweep(spec_dir, require_out(g)?, g),
        Command::Compose {
            checkpoint,
            tokens,
            cap,
        } => compose(checkpoint, tokens.as_deref(), *cap, require_out(g)?),
        Command::DumpConfig => {
            let mut spec = load_spec(g)?;
            if let Some(s) = g.seed {
                spec.train.seed = s;
            }
            match &g.out {
                Some(p) => write_text(p, &spec.to_text()),
                None => {
                    print!("{}", spec.to_text());
                    Ok(())
                }
            }
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn joined<T: ToString>(v: Option<&Vec<T>>) -> String {
    v.map(|v| v.iter().map(T::to_string).collect::<Vec<_>>().join(";"))
        .unwrap_or_default()
}

/// One CSV row in [`EVAL_HEADER`] order; per-sub-book values are `;`-joined.
pub fn format_eval_row(r: &MetricsReport) -> String {
    let mut s = String::new();
    write!(
        s,
        "{},{},{},{},{},{}",
        r.usage.map(|u| u.to_string()).unwrap_or_default(),
        r.perplexity.map(|p| p.to_string()).unwrap_or_default(),
        r.rmse,
        r.tokens,
        joined(r.per_subbook_usage.as_ref()),
        joined(r.per_subbook_perplexity.as_ref()),
    )
    .expect("string write");
    s
}

/// Evaluates a checkpoint on the eval split of `manifest`.
pub fn eval_report(checkpoint: &Path, manifest: &Path) -> Result<MetricsReport> {
    let state = load_state(&read_checkpoint(checkpoint)?, None)?;
    let seqs = Manifest::read(manifest)?.load(Split::Eval)?;
    let want = state.model.config().feature_dim;
    if let Some(bad) = seqs.iter().find(|s| s.cols() != want) {
        return Err(Error::shape(
            "eval",
            format!("checkpoint expects {want} features, manifest data has {}", bad.cols()),
        ));
    }
    evaluate(&state.model, &state.quantizer, &seqs)
}

pub fn eval_row(checkpoint: &Path, manifest: &Path) -> Result<String> {
    eval_report(checkpoint, manifest).map(|r| format_eval_row(&r))
}

/// `*.cfg` files of a directory in lexicographic order.
pub fn list_specs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut specs = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|x| x == SPEC_EXTENSION) {
            specs.push(p);
        }
    }
    specs.sort();
    Ok(specs)
}

fn sweep(spec_dir: &Path, out: &Path, g: &GlobalArgs) -> Result<()> {
    let specs = list_specs(spec_dir)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut csv = format!("spec,{EVAL_HEADER},error\n");
    let mut failures = 0;
    for path in &specs {
        let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let run_dir = out.join(&name);
        let result = (|| -> Result<String> {
            let mut spec = ExperimentSpec::from_file(path)?;
            if let Some(s) = g.seed {
                spec.train.seed = s;
            }
            spec.resolve();
            if !g.quiet {
                eprintln!("sweep: {name}");
            }
            let opts = RunOptions { resume: false, quiet: g.quiet };
            let summary = run_training(&spec.train, &run_dir, opts)?;
            eval_row(&summary.checkpoint, &spec.train.manifest)
        })();
        match result {
            Ok(row) => writeln!(csv, "{name},{row},").expect("string write"),
            Err(e) => {
                failures += 1;
                eprintln!("sweep: {name} failed: {e}");
                let msg = e.to_string().replace([',', '\n'], " ");
                writeln!(csv, "{name},,,,,,,{msg}").expect("string write");
            }
        }
    }
    write_text(&out.join(SWEEP_NAME), &csv)?;
    if failures > 0 {
        return Err(Error::Format {
            path: out.join(SWEEP_NAME),
            msg: format!("{failures} of {} sweep runs failed", specs.len()),
        });
    }
    Ok(())
}

pub const CODEBOOK_FILE: &str = "codebook.pqvf";
pub const TOKENS_FILE: &str = "tokens.txt";

fn compose(checkpoint: &Path, tokens: Option<&Path>, cap: u64, out: &Path) -> Result<()> {
    let state = load_state(&read_checkpoint(checkpoint)?, None)?;
    let Quantizer::Pq { books, .. } = &state.quantizer else {
        return Err(Error::InvalidConfig(format!(
            "compose needs a pq checkpoint, {} holds {}",
            checkpoint.display(),
            state.quantizer.kind()
        )));
    };
    let composed = compose_codebook(books, cap)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_features(&out.join(CODEBOOK_FILE), &composed.codewords_tensor())?;
    if let Some(manifest) = tokens {
        let m = Manifest::read(manifest)?;
        let mut text = String::new();
        for entry in &m.entries {
            let seq = crate::data::read_features(&m.resolve(entry))?;
            let codes = encode_sequence(&state.model, &state.quantizer, &seq)?;
            let line: Vec<String> = codes
                .result
                .map(|r| r.composed_index.iter().map(u64::to_string).collect())
                .unwrap_or_default();
            writeln!(text, "{}", line.join(" ")).expect("string write");
        }
        write_text(&out.join(TOKENS_FILE), &text)?;
    }
    Ok(())
}
