use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lich_entropy::{average_prior_gap, population_posteriors, sharpen, summarize, ToyWorld};

mod chat;
mod commands;
mod error;
mod setup;
mod table;

use error::{read_input, CliError, CliResult};

/// Simulate, mediate and evaluate underspecified multi-turn conversations.
#[derive(Debug, Parser)]
#[command(name = "lich", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one arm over a task file.
    Run(commands::RunArgs),
    /// Build contrastive pairs from fewshot full and sharded runs.
    Mine(commands::MineArgs),
    /// Distill contrastive pairs into an experience store.
    Refine(commands::RefineArgs),
    /// Recompute reports from stored trajectories.
    Eval(commands::EvalArgs),
    /// Print the results table for one or more reports.
    Report(commands::ReportArgs),
    /// Exact entropy computations on small intent worlds.
    Entropy(EntropyArgs),
    /// Talk to the mediated pipeline yourself.
    Chat(chat::ChatArgs),
}

#[derive(Debug, Args)]
struct EntropyArgs {
    #[command(subcommand)]
    command: EntropyCommand,
}

#[derive(Debug, Subcommand)]
enum EntropyCommand {
    /// H(I|C) and H(I|C,H) for the bundled worlds, plus the prior-gap world.
    Demo,
    /// Entropies of a world file, and its prior gap for one trait.
    World {
        path: PathBuf,
        /// Trait whose posterior is compared with the population's.
        #[arg(long = "trait")]
        trait_name: Option<String>,
        /// Sharpening exponent applied to the population posterior.
        #[arg(long, default_value_t = 4.0)]
        beta: f64,
    },
}

fn print_world(w: &ToyWorld, trait_name: Option<&str>, beta: f64) -> CliResult<()> {
    let s = summarize(w);
    println!(
        "{}: H(I|C) = {:.4} bits, H(I|C,H) = {:.4} bits, gap = {:.4} bits",
        s.world, s.h_i_given_c, s.h_i_given_c_h, s.gap_bits
    );
    if let Some(name) = trait_name {
        let t = w
            .trait_index(name)
            .ok_or_else(|| CliError::Config(format!("world {} has no trait {name:?}", w.name)))?;
        let pop = population_posteriors(w);
        let sharp: Vec<_> = pop.iter().map(|p| p.as_ref().map(|p| sharpen(p, beta))).collect();
        println!(
            "{}: argmax disagreement with trait {name} = {:.4} (sharpened ^{beta}: {:.4})",
            s.world,
            average_prior_gap(w, &pop, t)?,
            average_prior_gap(w, &sharp, t)?
        );
    }
    Ok(())
}

fn entropy(args: EntropyArgs) -> CliResult<()> {
    match args.command {
        EntropyCommand::Demo => {
            for w in lich_entropy::demo_worlds() {
                print_world(&w, None, 1.0)?;
            }
            let gap = lich_entropy::prior_gap_world();
            let rare = gap.traits.last().cloned();
            print_world(&gap, rare.as_deref(), 4.0)
        }
        EntropyCommand::World { path, trait_name, beta } => {
            let w = ToyWorld::from_json(&read_input(&path)?)?;
            print_world(&w, trait_name.as_deref(), beta)
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run(a) => commands::run(a),
        Command::Mine(a) => commands::mine(a),
        Command::Refine(a) => commands::refine(a),
        Command::Eval(a) => commands::eval(a),
        Command::Report(a) => commands::report(a),
        Command::Entropy(a) => entropy(a),
        Command::Chat(a) => chat::chat(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
