use std::ops::RangeInclusive;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drainsim::recover::RecoveryParams;
use drainsim_harness::conf::{mapping_text, ConfigError, HarnessConfig};
use drainsim_harness::experiments::{self, Experiment, RunOptions, Scale};

#[derive(Parser)]
#[command(name = "drainsim", about = "Memory-controller write-drain contention simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one named experiment (full name or `E<n>`).
    Run {
        experiment: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// `section.key=value`, applied after the config file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory; defaults to results/<experiment>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use the full request counts and secret lengths.
        #[arg(long)]
        paper_scale: bool,
        #[arg(long)]
        reps: Option<usize>,
        /// Secret length for the covert experiments.
        #[arg(long)]
        bits: Option<usize>,
    },
    /// List the experiments and the figures they reproduce.
    List,
    /// Check a config file and report every error in it.
    Validate { config: PathBuf },
    /// Recover the address mapping of the configured machine from timing.
    RecoverMapping {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Candidate address bits, e.g. 6..30.
        #[arg(long, value_parser = parse_bits)]
        bits: Option<RangeInclusive<u32>>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_bits(s: &str) -> Result<RangeInclusive<u32>, String> {
    let (a, b) = s
        .split_once("..=")
        .or_else(|| s.split_once(".."))
        .ok_or_else(|| format!("expected LO..HI, got `{s}`"))?;
    let lo: u32 = a.trim().parse().map_err(|e| format!("{a}: {e}"))?;
    let hi: u32 = b.trim().parse().map_err(|e| format!("{b}: {e}"))?;
    if lo > hi || hi > 63 {
        return Err(format!("bad bit range {lo}..{hi}"));
    }
    Ok(lo..=hi)
}

fn load(config: Option<&PathBuf>, overrides: &[String]) -> Result<HarnessConfig, ExitCode> {
    let r = match config {
        Some(p) => HarnessConfig::load(p, overrides),
        None => HarnessConfig::parse(drainsim_harness::conf::DEFAULT_CONFIG, overrides),
    };
    r.map_err(|errs| {
        report(&errs);
        ExitCode::from(1)
    })
}

fn report(errs: &[ConfigError]) {
    eprintln!("{} configuration error(s):", errs.len());
    for e in errs {
        eprintln!("  {e}");
    }
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::List => {
            for e in experiments::ALL {
                println!("{:<22} {}", e.name(), e.figure());
            }
            ExitCode::SUCCESS
        }
        Cmd::Validate { config } => match HarnessConfig::load(&config, &[]) {
            Ok(_) => {
                println!("{}: ok", config.display());
                ExitCode::SUCCESS
            }
            Err(errs) => {
                report(&errs);
                ExitCode::from(1)
            }
        },
        Cmd::Run {
            experiment,
            config,
            seed,
            overrides,
            out,
            paper_scale,
            reps,
            bits,
        } => {
            let e = match Experiment::parse(&experiment) {
                Ok(e) => e,
                Err(err) => {
                    eprintln!("{err}");
                    return ExitCode::from(1);
                }
            };
            let cfg = match load(config.as_ref(), &overrides) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let opts = RunOptions {
                seed: seed.unwrap_or(cfg.run.seed),
                scale: if paper_scale { Scale::Paper } else { Scale::Desk },
                reps,
                bits,
            };
            let out = out.unwrap_or_else(|| PathBuf::from("results").join(e.name()));
            match drainsim_harness::execute(e, &cfg, &opts, &out) {
                Ok((_, paths, outcome)) => {
                    for p in &paths {
                        println!("{}", p.display());
                    }
                    match outcome {
                        Ok(()) => ExitCode::SUCCESS,
                        Err(why) => {
                            eprintln!("{} failed: {why}", e.name());
                            ExitCode::from(2)
                        }
                    }
                }
                Err(io) => {
                    eprintln!("cannot write {}: {io}", out.display());
                    ExitCode::from(2)
                }
            }
        }
        Cmd::RecoverMapping { config, bits, seed } => {
            let cfg = match load(config.as_ref(), &[]) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let m = &cfg.soc.mapping;
            let mut p = RecoveryParams {
                row_shift: m.row_shift,
                bank_group_functions: m.bank_group_fns.len(),
                bank_functions: m.bank_fns.len(),
                seed: seed.unwrap_or(cfg.run.seed),
                ..RecoveryParams::default()
            };
            if let Some(b) = bits {
                p.candidate_bits = b;
            }
            match experiments::recover_with_probes(m, &cfg.soc, &p) {
                Ok(r) => {
                    print!("{}", mapping_text(&r));
                    ExitCode::SUCCESS
                }
                Err(why) => {
                    eprintln!("recovery failed: {why}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
