use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use martlab::scenario::{parse_space_arg, run_scenario, Backend, Report, RunOptions, Scenario};
use martlab::verify::{probe_umd_lower_bound, Ensemble, GundyConstants};

#[derive(Parser)]
#[command(name = "martlab", version, about = "Martingale decomposition and weak-type inequality laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every analysis of a scenario and write the report files.
    Run(RunArgs),
    /// Run the analyses and print report.json to stdout without writing files.
    Verify(RunArgs),
    /// Write sample paths of a grid scenario as CSV.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        paths: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Search for a lower bound on the UMD constant of ℓ^q_d.
    Probe {
        /// Space as `q,d`, e.g. `inf,8`.
        #[arg(long)]
        space: String,
        #[arg(long)]
        depth: usize,
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Summarize an existing report.json.
    Report { report: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Replace the Gundy constants (`sup,first,rare,variation`); recorded in
    /// the report.
    #[arg(long, value_name = "SUP,FIRST,RARE,VARIATION")]
    unsafe_gundy_constants: Option<String>,
}

fn set_jobs(jobs: Option<usize>) -> Result<()> {
    if let Some(n) = jobs {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    Ok(())
}

fn parse_constants(arg: &str) -> Result<GundyConstants> {
    let v: Vec<f64> = arg
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing `{arg}`"))?;
    match v[..] {
        [sup, first, rare, variation] => Ok(GundyConstants { sup, first, rare, variation }),
        _ => bail!("expected four comma-separated constants, got {}", v.len()),
    }
}

fn summarize(report: &Report) {
    for a in &report.analyses {
        for c in &a.checks {
            let status = if c.pass { "PASS" } else { "FAIL" };
            let vacuous = if c.vacuous { " (vacuous)" } else { "" };
            eprintln!("{status} {:<28} estimate {:.6e} bound {:.6e} slack {:.3e}{vacuous}", c.name, c.estimate, c.bound, c.slack);
        }
    }
    eprintln!("{}", if report.passed { "all checks passed" } else { "some checks failed" });
}

fn run(args: RunArgs, print_json: bool) -> Result<bool> {
    set_jobs(args.jobs)?;
    let scenario = Scenario::load(&args.scenario)?;
    let options = RunOptions {
        seed: args.seed,
        out: if print_json { None } else { args.out.clone() },
        unsafe_gundy_constants: args.unsafe_gundy_constants.as_deref().map(parse_constants).transpose()?,
    };
    let mut scenario = scenario;
    if print_json {
        scenario.output.dir = None;
    }
    let outcome = run_scenario(&scenario, &options)?;
    if print_json {
        print!("{}", outcome.report.to_json());
    }
    summarize(&outcome.report);
    Ok(outcome.report.passed)
}

fn simulate(path: PathBuf, out: PathBuf, paths: usize, seed: Option<u64>) -> Result<bool> {
    let mut scenario = Scenario::load(&path)?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    if scenario.backend != Backend::Grid {
        bail!("simulate needs the grid backend");
    }
    let ens = Ensemble::new(scenario.grid_model()?, paths.max(1), scenario.seed)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for i in 0..paths {
        let file = out.join(format!("path_{i:04}.csv"));
        let w = std::fs::File::create(&file).with_context(|| format!("creating {}", file.display()))?;
        ens.path(i)?.write_csv(std::io::BufWriter::new(w))?;
    }
    eprintln!("wrote {paths} paths to {}", out.display());
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args, false),
        Command::Verify(args) => run(args, true),
        Command::Simulate { scenario, out, paths, seed } => simulate(scenario, out, paths, seed),
        Command::Probe { space, depth, budget, p, seed, jobs } => (|| {
            set_jobs(jobs)?;
            let space = parse_space_arg(&space)?;
            let r = probe_umd_lower_bound(space.norm_kind(), space.dim(), depth, p, budget, seed, None)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(true)
        })(),
        Command::Report { report } => (|| {
            let text = std::fs::read_to_string(&report).with_context(|| format!("reading {}", report.display()))?;
            let report = Report::from_json(&text)?;
            summarize(&report);
            Ok(report.passed)
        })(),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
