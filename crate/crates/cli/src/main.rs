use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pdzdpg::harness::aggregate::aggregate_dir;
use pdzdpg::harness::experiment::{compute_benchmark, run_experiment, write_json, BENCHMARK_FILE};
use pdzdpg::harness::timing::{mai_timing_config, time_algorithm, write_timing};
use pdzdpg::harness::verify::{verify, Suite, VerifyOptions};
use pdzdpg::harness::ExperimentConfig;
use pdzdpg::learner::Algorithm;
use pdzdpg::systems::ServiceKind;
use pdzdpg::Error;

#[derive(Parser)]
#[command(name = "pdzdpg", version, about = "Primal-dual zeroth-order policy gradients for wireless resource allocation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    #[value(name = "pdzdpg+")]
    Plus,
    #[value(name = "pdzdpg")]
    Base,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Which {
    Waterfilling,
    Wmmse,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write per-seed CSVs, a benchmark
    /// sidecar and a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        algo: Option<AlgoArg>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Comma-separated seeds overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Skip the model-based benchmark.
        #[arg(long)]
        no_benchmark: bool,
    },
    /// Compute the model-based benchmark for a config.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        which: Which,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean curves and bootstrap bands across the seeds in a directory.
    Aggregate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        boot: usize,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long, default_value_t = 0)]
        boot_seed: u64,
    },
    /// Run the self-verification suite.
    Verify {
        #[arg(long)]
        full: bool,
        #[arg(long, hide = true)]
        corrupt_vjp: bool,
    },
    /// Median per-iteration wall time of both algorithms on an MAI problem.
    Timing {
        #[arg(long, default_value_t = 5)]
        users: usize,
        #[arg(long, value_delimiter = ',', default_value = "512,256")]
        hidden: Vec<usize>,
        #[arg(long, default_value_t = 10_000)]
        iters: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Train {
            config,
            algo,
            out,
            seeds,
            no_benchmark,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(a) = algo {
                cfg = cfg.with_algo(match a {
                    AlgoArg::Plus => Algorithm::PdZdpgPlus,
                    AlgoArg::Base => Algorithm::PdZdpg,
                })?;
            }
            if let Some(s) = seeds {
                cfg = cfg.with_seeds(s)?;
            }
            log::info!("config {} hash {}", cfg.name, cfg.hash());
            let report = run_experiment(&cfg, &out, !no_benchmark)?;
            for r in &report.manifest.runs {
                match &r.last_record {
                    Some(rec) => println!(
                        "seed {}: {} iters, ma_sumrate {:.4}, power_violation {:.4}",
                        r.seed, r.iters_completed, rec.ma_sumrate, rec.power_violation
                    ),
                    None => println!("seed {}: no iterations completed", r.seed),
                }
            }
            if let Some(b) = &report.manifest.benchmark {
                println!("benchmark {:.4} +- {:.4}", b.value, b.stderr);
            }
            if report.manifest.diverged {
                eprintln!("numeric divergence recorded in the manifest");
                return Ok(3);
            }
            Ok(if report.any_aborted() { 1 } else { 0 })
        }
        Command::Baseline { config, which, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let expected = match which {
                Which::Waterfilling => ServiceKind::Awgn,
                Which::Wmmse => ServiceKind::Mai,
            };
            if cfg.problem.service != expected {
                return Err(Error::Config {
                    field: "problem.service".into(),
                    reason: "benchmark does not match the service model".into(),
                });
            }
            let b = compute_benchmark(&cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            write_json(&out.join(BENCHMARK_FILE), &b)?;
            println!("{:.6} +- {:.6} (n_mc {}, seed {})", b.value, b.stderr, b.n_mc, b.seed);
            Ok(0)
        }
        Command::Aggregate {
            input,
            out,
            boot,
            level,
            boot_seed,
        } => {
            let n = aggregate_dir(&input, &out, boot, level, boot_seed)?;
            println!("aggregated {n} runs into {}", out.display());
            Ok(0)
        }
        Command::Verify { full, corrupt_vjp } => {
            let opts = VerifyOptions {
                suite: if full { Suite::Full } else { Suite::Fast },
                corrupt_vjp,
                ..VerifyOptions::default()
            };
            let results = verify(&opts);
            let mut failed = 0;
            for r in &results {
                let tag = if r.passed { "PASS" } else { "FAIL" };
                println!("{tag} {} ({} ms): {}", r.name, r.millis, r.detail);
                failed += usize::from(!r.passed);
            }
            println!("{} checks, {failed} failed", results.len());
            Ok(if failed == 0 { 0 } else { 1 })
        }
        Command::Timing {
            users,
            hidden,
            iters,
            out,
        } => {
            let cfg = mai_timing_config(users, hidden);
            let mut rows = Vec::new();
            for algo in [Algorithm::PdZdpgPlus, Algorithm::PdZdpg] {
                let row = time_algorithm(&cfg, algo, iters, 0)?;
                println!(
                    "{}: {} params, perturbation dim {}, median {} ns/iter",
                    row.algo, row.n_params, row.perturbation_dim, row.median_wall_ns
                );
                rows.push(row);
            }
            write_timing(&out, &rows)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
