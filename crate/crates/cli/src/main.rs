use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use chronoline::event_detection::Algorithm;
use chronoline::evaluate::MetricReport;
use chronoline::pipeline::{self, Ablation, DetectOptions, GenerateOptions, PipelineConfig, Run, TrainOptions};
use chronoline::Error;

#[derive(Parser)]
#[command(name = "chronoline", version, about = "Preference-guided timeline summarisation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    run_id: String,
    /// TOML configuration; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Embed and cluster the corpus into ranked, dated events.
    Detect {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        algorithm: Option<Algorithm>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        inflation: Option<f64>,
        #[arg(long)]
        top_l: Option<usize>,
        /// Reference timeline whose date count sets the number of events.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Produce candidate timelines for annotation.
    Candidates {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Serve the annotation API.
    Serve {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        bind: Option<String>,
        /// Directory of static UI files served at the root.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Answer every pending comparison by similarity to a reference timeline.
    SimulateAnnotation {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Fit the score model and calibrate the reward.
    LearnReward {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Fine-tune the summary policy with actor-critic.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        no_r1: bool,
        #[arg(long)]
        no_r2: bool,
        #[arg(long)]
        no_r3r4: bool,
        #[arg(long)]
        per_cluster_policy: bool,
        /// Stop after this many episodes; rerun to resume.
        #[arg(long)]
        max_episodes: Option<usize>,
    },
    /// Generate the timeline, optionally scoring it against a reference.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        /// Skip training and use the untrained policy.
        #[arg(long)]
        zero_shot: bool,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Score timelines against references.
    Evaluate {
        #[arg(long, required = true, num_args = 1..)]
        pred: Vec<PathBuf>,
        #[arg(long = "ref", required = true, num_args = 1..)]
        reference: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        window: u32,
        #[arg(long, value_enum, default_value_t = Report::Json)]
        report: Report,
        /// Configuration naming the embedding provider for soft F1.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the run state.
    Status {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Report {
    Json,
    Csv,
}

fn load_config(path: Option<&PathBuf>) -> chronoline::Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn open(args: &RunArgs) -> chronoline::Result<Run> {
    Run::new(load_config(args.config.as_ref())?, &args.run_id)
}

fn json(v: &impl serde::Serialize) -> chronoline::Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn run(cli: Cli) -> chronoline::Result<()> {
    match cli.command {
        Command::Detect {
            run,
            corpus,
            algorithm,
            threshold,
            inflation,
            top_l,
            reference,
        } => {
            let run = open(&run)?;
            let opts = DetectOptions {
                corpus,
                algorithm,
                threshold,
                inflation,
                top_l,
                reference,
            };
            for e in pipeline::cmd_detect(&run, &opts)? {
                println!(
                    "{}\t{}\t{} articles\t{} mentions",
                    e.rank,
                    e.date(),
                    e.cluster.members.len(),
                    e.cluster.mention_count
                );
            }
        }
        Command::Candidates { run, count } => {
            let run = open(&run)?;
            for c in pipeline::cmd_candidates(&run, count)? {
                println!("{}\t{}\t{}", c.id, c.label, run.path(&c.file).display());
            }
        }
        Command::Serve { run, bind, static_dir } => {
            let run = open(&run)?;
            pipeline::cmd_serve(&run, bind.as_deref(), static_dir)?;
        }
        Command::SimulateAnnotation { run, reference } => {
            let run = open(&run)?;
            println!("recorded {} preference pairs", pipeline::cmd_simulate_annotation(&run, &reference)?);
        }
        Command::LearnReward { run } => {
            let run = open(&run)?;
            println!("{}", json(&pipeline::cmd_learn_reward(&run)?)?);
        }
        Command::Train {
            run,
            no_r1,
            no_r2,
            no_r3r4,
            per_cluster_policy,
            max_episodes,
        } => {
            let run = open(&run)?;
            let opts = TrainOptions {
                ablation: Ablation { no_r1, no_r2, no_r3r4 },
                per_cluster_policy,
                max_episodes,
            };
            let out = pipeline::cmd_train(&run, &opts)?;
            if out.finished {
                println!("training finished after {} episodes in this call", out.episodes_run);
            } else {
                println!("paused after {} episodes; rerun to resume", out.episodes_run);
            }
        }
        Command::Generate {
            run,
            zero_shot,
            reference,
        } => {
            let run = open(&run)?;
            let out = pipeline::cmd_generate(&run, &GenerateOptions { zero_shot, reference })?;
            println!("wrote {}", out.path.display());
            if let Some(m) = out.metrics {
                println!("{}", json(&m)?);
            }
        }
        Command::Evaluate {
            pred,
            reference,
            window,
            report,
            config,
        } => {
            if pred.len() != reference.len() {
                return Err(Error::Validation(format!(
                    "{} predicted timelines but {} references",
                    pred.len(),
                    reference.len()
                )));
            }
            let cfg = load_config(config.as_ref())?;
            let empty = chronoline::corpus::ArticleCollection::new("", Vec::new())?;
            let provider = cfg.embedding.build(&empty, std::path::Path::new("."))?;
            let pairs: Vec<_> = pred.into_iter().zip(reference).collect();
            let rows = pipeline::evaluate_files(&pairs, provider.as_ref(), window)?;
            match report {
                Report::Json => {
                    let map: std::collections::BTreeMap<_, _> = rows.into_iter().collect();
                    println!("{}", json(&map)?);
                }
                Report::Csv => {
                    println!("{}", MetricReport::CSV_HEADER);
                    for (topic, m) in &rows {
                        println!("{}", m.csv_row(topic));
                    }
                }
            }
        }
        Command::Status { run } => {
            let run = open(&run)?;
            match run.load_state()? {
                Some(s) => println!("{}", json(&s)?),
                None => return Err(Error::Stage(format!("run {} has not been started", run.id))),
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Stage(_) => 3,
        Error::Numerical(_) | Error::Provider(_) | Error::Contract(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
