use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use spactor::config::{Config, Stage, Tau};
use spactor::corruption::{corrupt_example, dump_line};
use spactor::diagnostics::{
    build_eval_set, eval_sc_loss, gap_series, normalized_cumulative_flops, ols_trend_test, ContextMode, FlopsInput,
    FlopsReport, GapSeries,
};
use spactor::rng::{stream_rng, Stream};
use spactor::tokenizer::{build_vocab, chunk_documents, encode, read_corpus, PAD_ID};
use spactor::trainer::{encode_corpus, read_checkpoint, run, RunOptions};

#[derive(Parser)]
#[command(name = "spactor", version, about = "Hybrid span-corruption + replaced-token-detection pre-training")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint directory or run directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed steps.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Validation SC loss of two runs at their shared checkpoints, and the trend of the gap.
    EvalGap {
        #[arg(long)]
        run_a: PathBuf,
        #[arg(long)]
        run_b: PathBuf,
        #[arg(long, default_value = "clean")]
        mode: ContextMode,
        #[arg(long, default_value_t = 0)]
        start_step: u64,
        /// Validation corpus; defaults to `val_corpus` of run A.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        max_batches: Option<usize>,
    },
    /// FLOPs per step and normalized cumulative FLOPs.
    Flops {
        #[arg(long)]
        config: PathBuf,
        /// Transition step or `inf`.
        #[arg(long)]
        tau: Tau,
        #[arg(long)]
        steps: u64,
        /// Use this hybrid/baseline ratio instead of the computed one.
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// OLS trend test of one CSV column against another.
    Regress {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value = "step")]
        x_col: String,
        #[arg(long, default_value = "gap")]
        y_col: String,
        #[arg(long, default_value_t = 0)]
        start_step: u64,
    },
    /// Print corrupted training examples (original, sc, masked, target; tab-separated).
    DumpExamples {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        n: usize,
    },
}

fn checkpoint_losses(run_dir: &Path, val: &Path, mode: ContextMode, seed: u64, max_batches: Option<usize>) -> Result<Vec<(u64, f64)>> {
    let root = run_dir.join("checkpoints");
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for dir in dirs {
        let ckpt = read_checkpoint(&dir)?;
        let cfg = &ckpt.config;
        let docs = encode_corpus(val, &ckpt.vocab)?;
        let set = build_eval_set(&docs, &ckpt.vocab, &cfg.corruption(), cfg.input_len, cfg.batch_size, seed, max_batches)?;
        out.push((ckpt.state.step, eval_sc_loss(&ckpt.state.params, &set, mode, seed)?));
    }
    Ok(out)
}

fn series_csv(series: &GapSeries, a: &[(u64, f64)], b: &[(u64, f64)]) -> String {
    let mut csv = String::from("step,loss_a,loss_b,gap\n");
    for (step, gap) in series.steps.iter().zip(&series.gap) {
        let la = a.iter().find(|(s, _)| s == step).map(|x| x.1).unwrap_or(f64::NAN);
        let lb = b.iter().find(|(s, _)| s == step).map(|x| x.1).unwrap_or(f64::NAN);
        csv += &format!("{step},{la},{lb},{gap}\n");
    }
    csv
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Pretrain { config, out, resume, stop_at } => {
            let cfg = Config::from_file(&config)?;
            let summary = run(&cfg, &out, &RunOptions { resume, stop_at })?;
            println!("step={}", summary.final_step);
            for c in &summary.checkpoints {
                println!("checkpoint={}", c.display());
            }
        }
        Command::EvalGap { run_a, run_b, mode, start_step, val, seed, max_batches } => {
            let val = match val {
                Some(v) => v,
                None => Config::from_file(&run_a.join("config.cfg"))?
                    .val_corpus
                    .context("no --val given and run A has no val_corpus")?,
            };
            let a = checkpoint_losses(&run_a, &val, mode, seed, max_batches)?;
            let b = checkpoint_losses(&run_b, &val, mode, seed, max_batches)?;
            let series = gap_series(&a, &b, start_step, &run_a.display().to_string(), &run_b.display().to_string())?;
            print!("{}", series_csv(&series, &a, &b));
            println!();
            print!("{}", ols_trend_test(&series)?.to_key_values());
        }
        Command::Flops { config, tau, steps, ratio } => {
            let cfg = Config::from_file(&config)?;
            let model = cfg.model_config();
            let corruption = cfg.corruption();
            let input = FlopsInput { model: &model, corruption: &corruption, input_len: cfg.input_len, batch_size: cfg.batch_size };
            let mut report = FlopsReport::new(&input, &[(tau.0, steps)]);
            if let Some(r) = ratio {
                report.ratio = r;
                report.cumulative = vec![(tau.0, steps, normalized_cumulative_flops(tau.0, steps, r))];
            }
            print!("{}", report.to_csv());
        }
        Command::Regress { csv, x_col, y_col, start_step } => {
            let text = std::fs::read_to_string(&csv).with_context(|| format!("reading {}", csv.display()))?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            let header: Vec<&str> = lines.next().context("empty CSV")?.split(',').map(str::trim).collect();
            let col = |name: &str| header.iter().position(|h| *h == name).with_context(|| format!("no column `{name}`"));
            let (xi, yi) = (col(&x_col)?, col(&y_col)?);
            let mut points = Vec::new();
            for line in lines {
                let fields: Vec<&str> = line.split(',').map(str::trim).collect();
                let get = |i: usize| -> Result<f64> {
                    let f = fields.get(i).context("short CSV row")?;
                    f.parse().with_context(|| format!("`{f}` is not a number"))
                };
                let (x, y) = (get(xi)?, get(yi)?);
                if x >= start_step as f64 {
                    points.push((x, y));
                }
            }
            let (x, y): (Vec<f64>, Vec<f64>) = points.into_iter().unzip();
            print!("{}", spactor::diagnostics::ols(&x, &y)?.to_key_values());
        }
        Command::DumpExamples { config, n } => {
            let cfg = Config::from_file(&config)?;
            let Some(corpus) = &cfg.corpus else { bail!("config has no corpus") };
            let texts = read_corpus(corpus)?;
            let vocab = build_vocab(
                texts.iter().map(String::as_str),
                cfg.vocab_size,
                cfg.corruption().sentinel_budget(cfg.input_len),
            )?;
            let docs: Vec<_> = texts.iter().map(|t| encode(t, &vocab)).collect();
            let mut spans = stream_rng(cfg.seed, Stream::Spans);
            let mut mlm = stream_rng(cfg.seed, Stream::Mlm);
            let corruption = if cfg.tau.stage_at(0) == Stage::Hybrid {
                cfg.corruption()
            } else {
                spactor::trainer::stage_corruption(&cfg, Stage::ScOnly)
            };
            for row in chunk_documents(&docs, cfg.input_len).iter().filter(|r| r.last() != Some(&PAD_ID)).take(n) {
                let ex = corrupt_example(row, &corruption, &vocab, &mut spans, &mut mlm)?;
                println!("{}", dump_line(&ex, &vocab)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
