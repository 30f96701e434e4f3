use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kgseq::config::RunConfig;
use kgseq::error::AppResult;
use kgseq::formats::read_text;
use kgseq::pipeline::{self, Ctx, EvalSplit, SynthKind};
use kgseq::rundir::RunDir;

/// Seq2seq link prediction and question answering over knowledge graphs.
#[derive(Parser)]
#[command(name = "kgseq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run directory holding every artifact of an experiment.
    #[arg(long)]
    run: PathBuf,
    /// Config file to start from instead of the run's saved config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set train.steps=2000`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Redo a stage even though its settings or inputs changed.
    #[arg(long)]
    force: bool,
    /// Evaluation worker threads.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Clone)]
struct EvalArgs {
    #[arg(long, value_enum, default_value = "test")]
    split: EvalSplit,
}

#[derive(Subcommand)]
enum Command {
    /// Write a bundled synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "grid")]
        kind: SynthKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Drop edges from the input graph into valid and test.
    Split {
        #[command(flatten)]
        common: Common,
        /// Dataset directory with entities.tsv, relations.tsv and triples.tsv.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build entity and relation mentions.
    BuildRegistry {
        #[command(flatten)]
        common: Common,
    },
    /// Train the subword vocabulary.
    TrainTokenizer {
        #[command(flatten)]
        common: Common,
    },
    /// Train (or continue training) the seq2seq model on link prediction.
    TrainLp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Filtered link-prediction evaluation of the seq2seq model.
    EvalLp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        sample_size: Option<usize>,
    },
    /// Finetune the link-prediction model on questions mixed with triples.
    FinetuneQa {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Question answering hits@1 with neighbourhood reranking.
    EvalQa {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        beam: Option<usize>,
        /// A number, or `tune` to pick it on the validation questions.
        #[arg(long)]
        alpha: Option<String>,
        #[arg(long)]
        hops: Option<usize>,
    },
    /// Train the ComplEx baseline.
    TrainComplex {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Filtered link-prediction evaluation of ComplEx
    EvalComplex {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Template to relation-path baseline.
    Pathpred {
        #[command(subcommand)]
        action: PathpredAction,
    },
    /// Rule-routed ensembles.
    Ensemble {
        #[command(subcommand)]
        kind: EnsembleKind,
    },
    /// Collate metric summaries into reports/summary.md.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum PathpredAction {
    Build {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        hops: Option<usize>,
    },
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
    },
}

#[derive(Subcommand)]
enum EnsembleKind {
    /// Seq2seq for queries without other train answers, ComplEx otherwise.
    Lp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        sample_size: Option<usize>,
    },
    /// PathPred when it answers, the QA model otherwise.
    Qa {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
    },
}

type Flags<'a> = [(&'a str, &'a str, Option<String>)];

/// Resolves the config (saved or `--config` file, then `KGSEQ_*` variables,
/// `--set` and command flags), runs `f`, and saves the config on success.
fn with_ctx<T>(common: &Common, flags: &Flags, f: impl FnOnce(&mut Ctx) -> AppResult<T>) -> AppResult<T> {
    let rd = RunDir::open(&common.run)?;
    let mut cfg = match &common.config {
        Some(p) => RunConfig::parse(&read_text(p)?)?,
        None => rd.load_config()?.unwrap_or_default(),
    };
    cfg.apply_env(std::env::vars())?;
    for s in &common.set {
        cfg.set_assignment(s)?;
    }
    if let Some(w) = common.workers {
        cfg.set("inference", "workers", &w.to_string())?;
    }
    for (sec, key, v) in flags {
        if let Some(v) = v {
            cfg.set(sec, key, v)?;
        }
    }
    let mut ctx = Ctx::new(&common.run, cfg, common.force)?;
    let out = f(&mut ctx)?;
    ctx.rd.save_config(&ctx.cfg)?;
    Ok(out)
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn run(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::Synth { out, kind, seed } => pipeline::synth(&out, kind, seed),
        Command::Split {
            common,
            data,
            fraction,
            seed,
        } => {
            let data = data.map(|d| d.to_string_lossy().into_owned());
            let flags = [("data", "dir", data), ("split", "fraction", s(&fraction)), ("split", "seed", s(&seed))];
            with_ctx(&common, &flags, pipeline::split)
        }
        Command::BuildRegistry { common } => with_ctx(&common, &[], pipeline::build_registry),
        Command::TrainTokenizer { common } => with_ctx(&common, &[], pipeline::train_tokenizer),
        Command::TrainLp { common, steps } => with_ctx(&common, &[("train", "steps", s(&steps))], pipeline::train_lp_cmd),
        Command::EvalLp {
            common,
            eval,
            sample_size,
        } => with_ctx(&common, &[("inference", "sample_size", s(&sample_size))], |c| {
            pipeline::eval_lp(c, eval.split)
        }),
        Command::FinetuneQa { common, steps } => with_ctx(&common, &[("qa", "steps", s(&steps))], pipeline::finetune_qa),
        Command::EvalQa {
            common,
            eval,
            beam,
            alpha,
            hops,
        } => {
            let flags = [
                ("inference", "beam", s(&beam)),
                ("inference", "alpha", alpha),
                ("inference", "hops", s(&hops)),
            ];
            with_ctx(&common, &flags, |c| pipeline::eval_qa(c, eval.split))
        }
        Command::TrainComplex { common, steps } => {
            with_ctx(&common, &[("complex", "steps", s(&steps))], pipeline::train_complex_cmd)
        }
        Command::EvalComplex { common, eval } => with_ctx(&common, &[], |c| pipeline::eval_complex(c, eval.split)),
        Command::Pathpred { action } => match action {
            PathpredAction::Build { common, hops } => {
                with_ctx(&common, &[("pathpred", "hops", s(&hops))], pipeline::pathpred_build)
            }
            PathpredAction::Eval { common, eval } => with_ctx(&common, &[], |c| pipeline::pathpred_eval(c, eval.split)),
        },
        Command::Ensemble { kind } => match kind {
            EnsembleKind::Lp {
                common,
                eval,
                sample_size,
            } => with_ctx(&common, &[("inference", "sample_size", s(&sample_size))], |c| {
                pipeline::ensemble_lp(c, eval.split)
            }),
            EnsembleKind::Qa { common, eval } => with_ctx(&common, &[], |c| pipeline::ensemble_qa(c, eval.split)),
        },
        Command::Report { common } => {
            let md = with_ctx(&common, &[], pipeline::report)?;
            print!("{md}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KGSEQ_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

