use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mtl_core::data::{cmi, dump_corpus, spf, Corpus, TaskSet};
use mtl_core::harness::config::parse_corpora;
use mtl_core::harness::{compare_runs, decode_run, evaluate_run, expand, preset, run_experiment, run_grid, ExperimentConfig};
use mtl_core::models::Split;
use mtl_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mtl", version, about = "Meta-transfer learning experiments on synthetic code-switched tasks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set meta.alpha=0.5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut pairs = vec![];
        let mut bad = vec![];
        for o in &self.overrides {
            match o.split_once('=') {
                Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string())),
                None => bad.push(format!("--set {o}: expected KEY=VALUE")),
            }
        }
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
        base.with_overrides(&pairs)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus and write it to a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train, evaluate and write a run directory.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Continue from the last checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Recompute report.json of a finished run from its checkpoints.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
    },
    /// Print beam-search transcripts of a finished transducer run.
    Decode {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "CS")]
        corpus: String,
        #[arg(long, default_value = "test")]
        split: String,
        /// Decode at most this many utterances; 0 means all.
        #[arg(long, default_value_t = 10)]
        limit: usize,
        /// Use the parameters from before fine-tuning.
        #[arg(long)]
        pre_ft: bool,
    },
    /// Compare finished runs with a baseline run.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        /// CS validation loss used for iterations-to-threshold; defaults to
        /// the baseline's final value.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        json: bool,
        runs: Vec<PathBuf>,
    },
    /// Run a named grid of experiments and compare them.
    Grid {
        #[arg(long, default_value = "paper")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated run seeds; defaults to `run.seed`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(vec![format!("--split: expected train, val or test, got {s}")])),
    }
}

fn gen_data(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let set = TaskSet::generate(&cfg.data)?;
    dump_corpus(&set, &cfg.data, out)?;
    println!("{:<8}{:>8}{:>8}{:>8}{:>10}{:>8}", "task", "train", "val", "test", "cmi", "spf");
    for t in &set.tasks {
        let all: Vec<_> = t.train.iter().chain(&t.val).chain(&t.test).collect();
        let c = cmi(all.iter().copied());
        let s = spf(all.iter().copied()).map_or("-".into(), |v| format!("{v:.3}"));
        println!(
            "{:<8}{:>8}{:>8}{:>8}{:>10.3}{:>8}",
            t.name,
            t.train.len(),
            t.val.len(),
            t.test.len(),
            c.value,
            s
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { out, cfg } => gen_data(&out, &cfg.load()?),
        Cmd::Train { out, resume, cfg } => {
            let report = run_experiment(&cfg.load()?, &out, resume)?;
            println!("{}", serde_json::to_string_pretty(&report.eval.tasks)?);
            Ok(())
        }
        Cmd::Evaluate { run } => {
            let report = evaluate_run(&run)?;
            println!("{}", serde_json::to_string_pretty(&report.eval.tasks)?);
            Ok(())
        }
        Cmd::Decode {
            run,
            corpus,
            split,
            limit,
            pre_ft,
        } => {
            let corpora = parse_corpora("--corpus", &corpus)?;
            let [c]: [Corpus; 1] = corpora
                .try_into()
                .map_err(|_| Error::Config(vec!["--corpus: name exactly one corpus".into()]))?;
            for line in decode_run(&run, c, parse_split(&split)?, limit, pre_ft)? {
                println!("{}", serde_json::to_string(&line)?);
            }
            Ok(())
        }
        Cmd::Compare {
            baseline,
            threshold,
            json,
            runs,
        } => {
            let runs = if runs.is_empty() { vec![baseline.clone()] } else { runs };
            let cmp = compare_runs(&runs, &baseline, threshold)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&cmp)?);
            } else {
                print!("{}", cmp.to_table());
            }
            Ok(())
        }
        Cmd::Grid {
            preset: name,
            out,
            seeds,
            resume,
            cfg,
        } => {
            let configs = expand(&cfg.load()?, &preset(&name)?, &seeds)?;
            let cmp = run_grid(&configs, &out, resume)?;
            print!("{}", cmp.to_table());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
