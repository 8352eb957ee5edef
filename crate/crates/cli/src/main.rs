mod verbs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Numerical lab for small-noise SDEs with Dini-continuous singular drifts.
#[derive(Debug, Parser)]
#[command(name = "sdeldp", version, about)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Bundled problem name or path to a problem file.
    #[arg(long)]
    pub problem: String,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; outputs do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct RegionArgs {
    /// Ball center (with --radius) for a ball target/event.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub center: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.0)]
    pub radius: f64,
    /// Half-space normal (with --offset): the set n . z >= offset.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "center")]
    pub normal: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub offset: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Fit {
    Affine,
    Asymptotic,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Probe the standing assumptions of a problem.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4000)]
        n_pairs: usize,
        #[arg(long, default_value_t = 1000)]
        n_points: usize,
    },
    /// Solve the resolvent equation and certify the transform.
    Zvonkin {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        map: MapArgs,
        /// Largest lambda tried before giving up.
        #[arg(long)]
        lambda_cap: Option<f64>,
    },
    /// Simulate sample paths.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_hyphen_values = true)]
        eps: f64,
        #[arg(long, default_value_t = 10)]
        n_paths: usize,
        /// Defaults to the problem's experiment setting, else 100.
        #[arg(long)]
        n_steps: Option<usize>,
        /// Simulate the transformed system instead.
        #[arg(long)]
        transformed: bool,
        #[command(flatten)]
        map: MapArgs,
    },
    /// Minimize the action over controls reaching a target.
    Rate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: RegionArgs,
        #[arg(long)]
        n_intervals: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long, default_value_t = 8)]
        steps_per_interval: usize,
        /// Optimize on the transformed system with the target pulled back.
        #[arg(long)]
        via_transform: bool,
        #[command(flatten)]
        map: MapArgs,
    },
    /// Estimate probabilities along an epsilon ladder and fit the slope.
    Ldp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        event: RegionArgs,
        #[arg(long, value_delimiter = ',')]
        eps_ladder: Option<Vec<f64>>,
        #[arg(long)]
        n_paths: Option<usize>,
        #[arg(long)]
        n_steps: Option<usize>,
        /// Replace b2 by zero.
        #[arg(long)]
        without_singular: bool,
        /// Label the event as open (checks the lower bound).
        #[arg(long)]
        open: bool,
        #[arg(long, value_enum, default_value = "asymptotic")]
        fit: Fit,
        /// Skip the rate minimization and the bound check.
        #[arg(long)]
        no_rate: bool,
    },
    /// Run the full gate sequence.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 257)]
        resolution: usize,
        /// Override the problem's path count.
        #[arg(long)]
        n_paths: Option<usize>,
        /// Gates to skip, e.g. `--skip 7,8`; echoed in the report.
        #[arg(long, value_delimiter = ',')]
        skip: Vec<usize>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct MapArgs {
    #[arg(long, default_value_t = 257)]
    pub resolution: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_start: f64,
    #[arg(long, default_value_t = 2.0)]
    pub lambda_growth: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let result = match cli.verb {
        Verb::Validate { common, n_pairs, n_points } => verbs::validate(&common, &args, n_pairs, n_points),
        Verb::Zvonkin { common, map, lambda_cap } => verbs::zvonkin(&common, &args, &map, lambda_cap),
        Verb::Simulate {
            common,
            eps,
            n_paths,
            n_steps,
            transformed,
            map,
        } => verbs::simulate(&common, &args, eps, n_paths, n_steps, transformed.then_some(&map)),
        Verb::Rate {
            common,
            target,
            n_intervals,
            restarts,
            steps_per_interval,
            via_transform,
            map,
        } => verbs::rate(
            &common,
            &args,
            &target,
            n_intervals,
            restarts,
            steps_per_interval,
            via_transform.then_some(&map),
        ),
        Verb::Ldp {
            common,
            event,
            eps_ladder,
            n_paths,
            n_steps,
            without_singular,
            open,
            fit,
            no_rate,
        } => verbs::ldp(
            &common,
            &args,
            verbs::LdpArgs {
                event,
                eps_ladder,
                n_paths,
                n_steps,
                without_singular,
                open,
                fit,
                no_rate,
            },
        ),
        Verb::Verify {
            common,
            resolution,
            n_paths,
            skip,
        } => verbs::verify(&common, &args, resolution, n_paths, skip),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
