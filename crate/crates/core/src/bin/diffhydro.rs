use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use diffhydro::coupling::{extract_learned_relation, relation_csv};
use diffhydro::harness::config::KeyValues;
use diffhydro::harness::dataset::{output_csv, read_forcing_csv};
use diffhydro::harness::experiment::{evaluate_saved, grid_points, parse_grid};
use diffhydro::harness::synthetic::synthetic_forcing;
use diffhydro::harness::{
    generate_synthetic, hbv_gradcheck, nn_gradcheck, reference_parameters, run_experiment, save_dataset, Climate,
    ExperimentConfig, ExperimentOutcome, SyntheticSpec,
};
use diffhydro::hbv::{simulate_values, HbvState, ParamName};
use diffhydro::nn::{Activation, MlpWeights};
use diffhydro::{Error, Result};

/// Differentiable HBV modeling with neural-network coupling.
#[derive(Parser)]
#[command(name = "diffhydro", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset described by a generator config.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the model described by an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate saved weights on the data of an experiment config.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Run HBV with fixed parameters; prints the output CSV.
    Simulate {
        /// `NAME = value` lines; missing parameters take reference values.
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        forcings: PathBuf,
    },
    /// Compare reverse-mode gradients with finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Module::All)]
        module: Module,
    },
    /// Sample a learned flux network on a grid; prints `input,output`.
    Relation {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        grid: String,
        #[arg(long, default_value = "tanh")]
        activation: Activation,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Module {
    Hbv,
    Nn,
    All,
}

fn print_outcome(o: &ExperimentOutcome) {
    print!("{}", o.summary());
}

fn read_params(path: &Path) -> Result<diffhydro::hbv::HbvParameters> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut kv = KeyValues::parse(&text, path)?;
    let mut p = reference_parameters();
    for name in ParamName::ALL {
        if let Some(v) = kv.take::<f64>(name.label())? {
            p.set(name, v);
        }
    }
    kv.finish()?;
    p.validate()?;
    Ok(p)
}

fn gradcheck(module: Module) -> Result<bool> {
    let mut ok = true;
    println!("module,coordinate,analytic,numeric,relative_error,breakpoint,failure");
    let mut emit = |name: &str, report: diffhydro::autodiff::GradCheckReport| {
        for line in report.to_csv().lines().skip(1) {
            println!("{name},{line}");
        }
        let worst = report.max_relative_error();
        eprintln!(
            "{name}: max relative error {worst:e}, {} flagged, {} failed",
            report.flagged(),
            report.failed()
        );
        ok &= worst < 1e-5 && report.failed() == 0;
    };
    if module != Module::Nn {
        let forcings = synthetic_forcing(0, &[0.5; 4], 365, Climate::Mixed);
        emit("hbv", hbv_gradcheck(&reference_parameters(), &forcings, 1e-6)?);
    }
    if module != Module::Hbv {
        emit("nn", nn_gradcheck(&[4, 8, 3], Activation::Tanh, 0, 1e-6)?);
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate { spec, out } => {
            let text = fs::read_to_string(&spec).map_err(|e| Error::Io { path: spec.clone(), source: e })?;
            let s = SyntheticSpec::from_config(&text, &spec)?;
            let data = generate_synthetic(&s)?;
            save_dataset(&data, &out)?;
            println!("wrote {} basins to {}", data.len(), out.display());
        }
        Command::Train { config } => print_outcome(&run_experiment(&ExperimentConfig::load(&config)?)?),
        Command::Evaluate { config, weights } => {
            print_outcome(&evaluate_saved(&ExperimentConfig::load(&config)?, &weights)?)
        }
        Command::Simulate { params, forcings } => {
            let p = read_params(&params)?;
            let file = read_forcing_csv(&forcings)?;
            let out = simulate_values(&HbvState::empty(), &p, &file.forcings, 0)?;
            print!("{}", output_csv(file.start, &out));
        }
        Command::Gradcheck { module } => {
            if !gradcheck(module)? {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Relation { weights, grid, activation } => {
            let net = MlpWeights::load(&weights, activation)?;
            let pairs = extract_learned_relation(&net, &grid_points(parse_grid(&grid)?))?;
            print!("{}", relation_csv(&pairs));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
