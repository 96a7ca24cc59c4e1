use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use faithcore::harness::evaluate::{accuracy, synthetic_corpora};
use faithcore::harness::{
    emit_curves, prepare, run_evaluation, run_selfcheck, write_corpus, RunConfig,
};
use faithcore::metrics::Metric;
use faithcore::model::adapter::{serve, AdapterOutput};
use faithcore::model::{backward_input_grad, forward, ModelParams};
use faithcore::{Error, Result};

/// Faithfulness metrics for token attributions.
#[derive(Parser)]
#[command(name = "faith", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/dev/test corpora as JSONL.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory receiving train.jsonl, dev.jsonl and test.jsonl.
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train the built-in classifier and save its parameters.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Where to write the parameter file.
        #[arg(long, default_value = "model.json")]
        save: PathBuf,
    },
    /// Run the full evaluation sweep and write reports.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Rebuild curve tables from a finished run directory.
    Curves { run_dir: PathBuf },
    /// Run the built-in invariant checks.
    Selfcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Serve predictions over stdin/stdout using the adapter protocol.
    Adapter {
        /// Parameter file of the built-in model to serve.
        #[arg(long, conflicts_with = "fixed_probs")]
        model: Option<PathBuf>,
        /// Always answer with these probabilities (comma separated).
        #[arg(long, value_delimiter = ',')]
        fixed_probs: Option<Vec<f64>>,
    },
}

/// Run configuration sources. Flags override the file; `--set` entries are
/// applied last.
#[derive(Args)]
struct ConfigArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any configuration key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long)]
    train_corpus: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    output: Option<String>,
    #[arg(long)]
    fas: Option<String>,
    #[arg(long)]
    ratios: Option<String>,
    #[arg(long)]
    soft_samples: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    adapter: Option<String>,
    #[arg(long)]
    attributions: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let flags = [
            ("seed", &self.seed),
            ("seeds", &self.seeds),
            ("dataset", &self.dataset),
            ("corpus", &self.corpus),
            ("train_corpus", &self.train_corpus),
            ("model", &self.model),
            ("output", &self.output),
            ("fas", &self.fas),
            ("ratios", &self.ratios),
            ("soft_samples", &self.soft_samples),
            ("epsilon", &self.epsilon),
            ("adapter", &self.adapter),
            ("attributions", &self.attributions),
        ];
        let mut overrides: Vec<(String, String)> = flags
            .iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect();
        for entry in &self.set {
            let (k, v) = entry
                .split_once('=')
                .ok_or_else(|| Error::Parameter(format!("--set expects KEY=VALUE, got '{entry}'")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out } => {
            let cfg = config.resolve()?;
            let corpora = synthetic_corpora(&cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.display().to_string(), source: e })?;
            for (name, split) in [("train", &corpora.train), ("dev", &corpora.dev), ("test", &corpora.test)] {
                write_corpus(&out.join(format!("{name}.jsonl")), split)?;
            }
            println!(
                "wrote {} / {} / {} instances to {}",
                corpora.train.len(),
                corpora.dev.len(),
                corpora.test.len(),
                out.display()
            );
        }
        Command::Train { config, save } => {
            let cfg = config.resolve()?;
            let prepared = prepare(&cfg)?;
            prepared.params.save(&save)?;
            println!(
                "saved {} (train accuracy {:.4}, evaluation accuracy {:.4})",
                save.display(),
                accuracy(&prepared.params, &prepared.train)?,
                accuracy(&prepared.params, &prepared.eval)?
            );
        }
        Command::Evaluate { config } => {
            let cfg = config.resolve()?;
            for run_cfg in cfg.per_seed() {
                let summary = run_evaluation(&run_cfg)?;
                let out = &summary.output;
                println!(
                    "{}: {} instances, {} excluded, test accuracy {:.4}",
                    summary.dir.display(),
                    out.instances.len(),
                    out.excluded_ids().len(),
                    out.test_accuracy
                );
                for metric in Metric::ALL {
                    if let Some(d) = out.diagnosticity_for("average", metric) {
                        println!(
                            "  {metric:<7} diagnosticity {:.4} ({} pairs, {} ties, p = {:.3e})",
                            d.diagnosticity,
                            d.pairs,
                            d.ties,
                            d.p_value.unwrap_or(f64::NAN)
                        );
                    }
                }
            }
        }
        Command::Curves { run_dir } => {
            for path in emit_curves(&run_dir)? {
                println!("{}", path.display());
            }
        }
        Command::Selfcheck { seed, instances } => {
            let checks = run_selfcheck(seed, instances)?;
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!("{} {:<28} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if failed > 0 {
                return Err(Error::Consistency(format!("{failed} self-checks failed")));
            }
        }
        Command::Adapter { model, fixed_probs } => {
            let stdin = io::stdin().lock();
            let stdout = BufWriter::new(io::stdout().lock());
            match (model, fixed_probs) {
                (Some(path), _) => {
                    let params = ModelParams::load(&path)?;
                    serve(stdin, stdout, &["probs", "attention", "grads"], |x| {
                        let trace = forward(x, &params)?;
                        let (grads, _) = backward_input_grad(&trace, &params, trace.predicted)?;
                        Ok(AdapterOutput {
                            attention: Some(trace.attention.column_means()),
                            grads: Some(grads),
                            probs: trace.probs,
                        })
                    })?;
                }
                (None, Some(probs)) => {
                    serve(stdin, stdout, &["probs"], |_| {
                        Ok(AdapterOutput {
                            probs: probs.clone(),
                            attention: None,
                            grads: None,
                        })
                    })?;
                }
                (None, None) => {
                    return Err(Error::Parameter("adapter needs --model or --fixed-probs".into()))
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
