//! Command-line front end: validate data, train embeddings, extend them to
//! new facts, and run the dynamic-insertion experiment.
//!
//! Configuration precedence is flags over config file over defaults, and the
//! exit code says what went wrong: 1 for i/o and parsing, 2 for integrity
//! violations, 3 for numeric trouble, 4 for bad configuration.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use relemb::Result;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "relemb", version, about = "Relational tuple embeddings over foreign-key walks")]
struct Cli {
    /// TOML configuration file; flags override its keys.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed; pins every random choice of a run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Chat about progress on stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a schema and its CSV data, check integrity, print counts.
    Validate(DataArgs),
    /// Train an embedder and write its model file.
    Embed(EmbedArgs),
    /// Insert new facts and extend an existing model to them.
    Extend(ExtendArgs),
    /// Delete, retrain, reinsert, extend: the dynamic experiment.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct DataArgs {
    /// TOML schema descriptor.
    #[arg(long, value_name = "FILE")]
    schema: Option<PathBuf>,
    /// Directory holding one CSV file per relation.
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.schema {
            cfg.schema = Some(p.clone());
        }
        if let Some(p) = &self.data_dir {
            cfg.data_dir = Some(p.clone());
        }
    }
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Embedder to train: "forward" or "graph".
    #[arg(long)]
    embedder: Option<String>,
    /// Relation whose facts are embedded (the walk-kernel embedder needs it).
    #[arg(long)]
    relation: Option<String>,
    /// Where to write the model.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
}

impl EmbedArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        self.data.apply(cfg);
        if let Some(e) = &self.embedder {
            cfg.embedder = e.clone();
        }
        if let Some(r) = &self.relation {
            cfg.relation = Some(r.clone());
        }
        if let Some(m) = &self.model {
            cfg.model = Some(m.clone());
        }
    }
}

#[derive(Args)]
struct ExtendArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model file to extend.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Where to write the extended model; defaults to --model.
    #[arg(long, value_name = "FILE")]
    model_out: Option<PathBuf>,
    /// Directory of CSV files with the facts to insert.
    #[arg(long, value_name = "DIR")]
    new_data: Option<PathBuf>,
    /// Insertion order: "one-by-one" or "all-at-once".
    #[arg(long)]
    mode: Option<String>,
    /// Write the new vectors here instead of stdout.
    #[arg(long, value_name = "FILE")]
    vectors: Option<PathBuf>,
}

impl ExtendArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        self.data.apply(cfg);
        if let Some(m) = &self.model {
            cfg.model = Some(m.clone());
        }
        if let Some(m) = &self.model_out {
            cfg.model_out = Some(m.clone());
        }
        if let Some(d) = &self.new_data {
            cfg.new_data = Some(d.clone());
        }
        if let Some(m) = &self.mode {
            cfg.mode = m.clone();
        }
        if let Some(v) = &self.vectors {
            cfg.vectors = Some(v.clone());
        }
    }
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Embedder to evaluate: "forward" or "graph".
    #[arg(long)]
    embedder: Option<String>,
    /// Relation holding the prediction attribute.
    #[arg(long)]
    relation: Option<String>,
    /// Attribute the classifier predicts.
    #[arg(long)]
    attribute: Option<String>,
    /// Where to write the JSON report.
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    /// Also write one CSV row per (ratio, run, mode).
    #[arg(long, value_name = "FILE")]
    report_csv: Option<PathBuf>,
    /// Deletion ratios to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    /// Extension orders to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
    /// Repetitions per (ratio, mode) cell.
    #[arg(long)]
    runs: Option<usize>,
    /// Record wall-clock timings (false makes equal-seed reports
    /// byte-identical).
    #[arg(long, value_name = "BOOL")]
    record_timing: Option<bool>,
}

impl ExperimentArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        self.data.apply(cfg);
        if let Some(e) = &self.embedder {
            cfg.embedder = e.clone();
        }
        if let Some(r) = &self.relation {
            cfg.relation = Some(r.clone());
        }
        if let Some(a) = &self.attribute {
            cfg.attribute = Some(a.clone());
        }
        if let Some(p) = &self.report {
            cfg.report = Some(p.clone());
        }
        if let Some(p) = &self.report_csv {
            cfg.report_csv = Some(p.clone());
        }
        if let Some(r) = &self.ratios {
            cfg.experiment.ratios = r.clone();
        }
        if let Some(m) = &self.modes {
            cfg.experiment.modes = m.clone();
        }
        if let Some(n) = self.runs {
            cfg.experiment.runs = n;
        }
        if let Some(t) = self.record_timing {
            cfg.experiment.record_timing = t;
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::Validate(args) => args.apply(&mut cfg),
        Command::Embed(args) => args.apply(&mut cfg),
        Command::Extend(args) => args.apply(&mut cfg),
        Command::Experiment(args) => args.apply(&mut cfg),
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.verbose {
        cfg.verbose = true;
    }
    match &cli.command {
        Command::Validate(_) => commands::cmd_validate(&cfg),
        Command::Embed(_) => commands::cmd_embed(&cfg),
        Command::Extend(_) => commands::cmd_extend(&cfg),
        Command::Experiment(_) => commands::cmd_experiment(&cfg),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not errors; everything else is a bad
            // invocation, which is a configuration problem.
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 4,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
