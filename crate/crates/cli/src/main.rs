use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pacsan_core::harness::{collide, run_corpus, CorpusOptions, RunReport};
use pacsan_core::interp::{self, prepare, run_unoptimized_oracle, Limits, Verdict};
use pacsan_core::miniir::{self, load};
use pacsan_core::optpasses::OptLevel;
use pacsan_core::pacore::AddressConfig;

#[derive(Parser)]
#[command(name = "pacsan", version, about = "Software-emulated pointer-authentication memory-safety sanitizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Instrument and execute one IR program.
    Run {
        file: PathBuf,
        /// Virtual address width in bits (33..=52).
        #[arg(long, default_value_t = 47)]
        n: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// none, redundant, samelock or all.
        #[arg(long, default_value = "all")]
        opts: OptLevel,
        /// Print the instrumented program before running it.
        #[arg(long)]
        emit: bool,
        /// Write a JSON report to this path.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Execute without instrumentation.
        #[arg(long, conflicts_with = "oracle")]
        raw: bool,
        /// Use the unoptimized per-byte reference checker.
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value_t = 10_000_000)]
        max_insts: u64,
    },
    /// Run every program of a corpus directory and tabulate detection.
    Corpus {
        dir: PathBuf,
        #[arg(long, default_value_t = 47)]
        n: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also print static and dynamic check counts per file.
        #[arg(long)]
        checks: bool,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Measure the forgery success rate against one object.
    Collide {
        #[arg(long)]
        trials: u64,
        #[arg(long, default_value_t = 47)]
        n: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Use fewer PAC bits than the address width leaves.
        #[arg(long)]
        p_override: Option<u32>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn address_config(n: u32, p_override: Option<u32>) -> Result<AddressConfig> {
    let cfg = AddressConfig::new(n)?;
    Ok(match p_override {
        Some(p) => cfg.with_pac_override(p)?,
        None => cfg,
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    file: &Path,
    n: u32,
    seed: u64,
    opts: OptLevel,
    emit: bool,
    json: Option<&Path>,
    raw: bool,
    oracle: bool,
    max_insts: u64,
) -> Result<ExitCode> {
    let cfg = address_config(n, None)?;
    let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let source = load(&text).with_context(|| format!("loading {}", file.display()))?;
    let limits = Limits {
        max_insts,
        ..Limits::default()
    };
    let (label, result) = if raw {
        if emit {
            print!("{}", miniir::print(&source));
        }
        ("raw".to_string(), interp::run(&source, cfg, seed, limits)?)
    } else if oracle {
        if emit {
            print!("{}", miniir::print(&prepare(&source, OptLevel::None)?));
        }
        ("oracle".to_string(), run_unoptimized_oracle(&source, cfg, seed, limits)?)
    } else {
        let program = prepare(&source, opts)?;
        if emit {
            print!("{}", miniir::print(&program));
        }
        (opts.name().to_string(), interp::run(&program, cfg, seed, limits)?)
    };
    match &result.verdict {
        Verdict::Completed(code) => println!("completed: exit value {code}"),
        Verdict::Violation(v) => {
            let at = v.inst_index.map_or("?".to_string(), |i| i.to_string());
            println!(
                "violation: {} in @{} at instruction {at}, pointer {:#018x}, shadow id {}",
                v.kind.name(),
                v.function,
                v.pointer.0,
                v.found_id.0
            );
            println!("  {}", v.message);
        }
    }
    let s = &result.stats;
    println!(
        "stats: full checks {}, fast checks {}, allocs {}, frees {}, instructions {}",
        s.checks_full, s.checks_fast, s.allocs, s.frees, s.insts
    );
    if let Some(path) = json {
        write_json(path, &RunReport::new(&result, &cfg, seed, &label))?;
    }
    Ok(match result.verdict {
        Verdict::Completed(_) => ExitCode::SUCCESS,
        Verdict::Violation(_) => ExitCode::from(1),
    })
}

fn cmd_corpus(dir: &Path, n: u32, seed: u64, checks: bool, json: Option<&Path>) -> Result<ExitCode> {
    let opts = CorpusOptions {
        cfg: address_config(n, None)?,
        seed,
        limits: Limits::default(),
    };
    let report = run_corpus(dir, &opts)?;
    print!("{}", report.render_detection_table());
    println!("files: {}, false positives: {}", report.files.len(), report.false_positives());
    if checks {
        println!();
        print!("{}", report.render_check_table());
    }
    if let Some(path) = json {
        write_json(path, &report.to_json())?;
    }
    let mismatches = report.mismatches();
    if mismatches.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    println!("mismatches:");
    for m in mismatches {
        println!("  {m}");
    }
    Ok(ExitCode::from(1))
}

fn cmd_collide(trials: u64, n: u32, seed: u64, p_override: Option<u32>, json: Option<&Path>) -> Result<ExitCode> {
    let cfg = address_config(n, p_override)?;
    if trials == 0 {
        bail!("--trials must be positive");
    }
    let s = collide(trials, cfg, seed)?;
    println!("p = {}, trials = {}, successes = {}", s.p, s.trials, s.successes);
    println!("rate = {:.6e}, expected = {:.6e}, z = {:.3}", s.rate, s.expected, s.z);
    if let Some(path) = json {
        write_json(path, &s)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run {
            file,
            n,
            seed,
            opts,
            emit,
            json,
            raw,
            oracle,
            max_insts,
        } => cmd_run(file, *n, *seed, *opts, *emit, json.as_deref(), *raw, *oracle, *max_insts),
        Command::Corpus {
            dir,
            n,
            seed,
            checks,
            json,
        } => cmd_corpus(dir, *n, *seed, *checks, json.as_deref()),
        Command::Collide {
            trials,
            n,
            seed,
            p_override,
            json,
        } => cmd_collide(*trials, *n, *seed, *p_override, json.as_deref()),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
