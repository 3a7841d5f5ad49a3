//! Thin command-line front end over the library commands.
//!
//! ```text
//! ectr generate --config <path> [--out <dir>] [--seed <u64>]
//! ectr train    --config <path> [--out <dir>] [--seed <u64>]
//! ectr sweep    --config <path> [--out <dir>] [--seed <u64>] [--jobs <n>]
//! ectr verify   [--tolerance <real>] [--inject-kl-detach-violation]
//! ```
//!
//! `ECTR_LOG` in {quiet, info, trace} controls stderr logging. Exit status
//! is 0 only on success (and, for verify, only when every check passes).

use std::path::PathBuf;
use std::process::ExitCode;

use ectr::commands::{cmd_generate, cmd_sweep, cmd_train, cmd_verify};
use ectr::config::Config;
use ectr::verify::VerifyOptions;

const USAGE: &str = "usage:
  ectr generate --config <path> [--out <dir>] [--seed <u64>]
  ectr train    --config <path> [--out <dir>] [--seed <u64>]
  ectr sweep    --config <path> [--out <dir>] [--seed <u64>] [--jobs <n>]
  ectr verify   [--tolerance <real>] [--inject-kl-detach-violation]

env: ECTR_LOG = quiet | info | trace";

struct Args {
    config: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    jobs: usize,
    tolerance: f64,
    inject_kl_detach_violation: bool,
}

fn parse_args(argv: std::env::Args) -> Result<(String, Args), String> {
    let mut rest = argv.peekable();
    let command = rest.next().ok_or_else(|| USAGE.to_string())?;
    let mut args = Args {
        config: None,
        out: PathBuf::from("ectr-out"),
        seed: None,
        jobs: 1,
        tolerance: 1e-4,
        inject_kl_detach_violation: false,
    };
    while let Some(flag) = rest.next() {
        let mut value = |name: &str| {
            rest.next()
                .ok_or_else(|| format!("flag {name} needs a value\n{USAGE}"))
        };
        match flag.as_str() {
            "--config" => args.config = Some(PathBuf::from(value("--config")?)),
            "--out" => args.out = PathBuf::from(value("--out")?),
            "--seed" => {
                args.seed = Some(
                    value("--seed")?
                        .parse()
                        .map_err(|_| "--seed expects an unsigned integer".to_string())?,
                )
            }
            "--jobs" => {
                args.jobs = value("--jobs")?
                    .parse()
                    .map_err(|_| "--jobs expects a positive integer".to_string())?
            }
            "--tolerance" => {
                args.tolerance = value("--tolerance")?
                    .parse()
                    .map_err(|_| "--tolerance expects a number".to_string())?
            }
            "--inject-kl-detach-violation" => args.inject_kl_detach_violation = true,
            other => return Err(format!("unknown flag '{other}'\n{USAGE}")),
        }
    }
    Ok((command, args))
}

fn load_config(args: &Args, seed_key: &str) -> Result<Config, String> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| format!("--config is required\n{USAGE}"))?;
    let mut cfg = Config::load(path).map_err(|e| e.to_string())?;
    if let Some(seed) = args.seed {
        cfg.set(seed_key, seed);
    }
    Ok(cfg)
}

fn run() -> Result<bool, String> {
    let mut argv = std::env::args();
    let _ = argv.next();
    let (command, args) = parse_args(argv)?;
    match command.as_str() {
        "generate" => {
            let cfg = load_config(&args, "sim.seed")?;
            cmd_generate(&cfg, &args.out).map_err(|e| e.to_string())?;
            Ok(true)
        }
        "train" => {
            let cfg = load_config(&args, "train.seed")?;
            cmd_train(&cfg, &args.out).map_err(|e| e.to_string())?;
            Ok(true)
        }
        "sweep" => {
            let cfg = load_config(&args, "sweep.seeds")?;
            cmd_sweep(&cfg, &args.out, args.jobs).map_err(|e| e.to_string())?;
            Ok(true)
        }
        "verify" => {
            let opts = VerifyOptions {
                fd_tolerance: args.tolerance,
                inject_kl_detach_violation: args.inject_kl_detach_violation,
            };
            let results = cmd_verify(&opts);
            let mut all_passed = true;
            for check in &results {
                println!("{}", check.line());
                all_passed &= check.passed;
            }
            Ok(all_passed)
        }
        other => Err(format!("unknown command '{other}'\n{USAGE}")),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
