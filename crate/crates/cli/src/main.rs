use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bsm_moe::config::RunConfig;
use bsm_moe::pipeline::Method;
use bsm_moe::runner::{self, RunManifest, StageError};
use clap::{Args, Parser, Subcommand};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "bsm-moe",
    version,
    about = "Binaural rendering experiments for wearable arrays"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the scene, render every method, evaluate and export everything.
    Run(Common),
    /// Simulate the scene only: microphone signals, dry source, ground truth.
    Simulate(Common),
    /// Render an existing multichannel WAV recorded with the configured array.
    Process {
        #[command(flatten)]
        common: Common,
        /// Multichannel input WAV, one channel per microphone.
        #[arg(long)]
        input: PathBuf,
    },
    /// Same computation as `run`, metrics only.
    Eval(Common),
    /// Export directional gain patterns of gain-controlled BSM over the γ sweep.
    Pattern(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured methods; repeat or separate with commas.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    method: Vec<Method>,
    /// Print nothing on success.
    #[arg(long)]
    quiet: bool,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        format!(
            "unknown method '{s}' (expected one of {})",
            names.join(", ")
        )
    })
}

impl Common {
    fn load(&self) -> Result<(RunConfig, PathBuf), String> {
        let mut cfg = RunConfig::from_file(&self.config)
            .map_err(|e| format!("{}: {e}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if !self.method.is_empty() {
            cfg.methods = self.method.clone();
        }
        cfg.validate()
            .map_err(|e| format!("{}: {e}", self.config.display()))?;
        let out = self.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        Ok((cfg, out))
    }
}

fn summarize(manifest: &RunManifest, out: &Path) {
    println!(
        "{}: {} files in {}",
        manifest.command,
        manifest.artifacts.len(),
        out.display()
    );
    for a in &manifest.artifacts {
        println!(
            "  {:<28} {:>10} bytes  {}",
            a.path,
            a.bytes,
            &a.sha256[..12]
        );
    }
    for t in &manifest.timings {
        println!("  {:<28} {:>8.2} s", t.stage, t.seconds);
    }
    println!("  {:<28} {:>8.2} s", "total", manifest.wall_clock_s);
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, input) = match &cli.command {
        Command::Run(c) | Command::Simulate(c) | Command::Eval(c) | Command::Pattern(c) => {
            (c, None)
        }
        Command::Process { common, input } => (common, Some(input)),
    };
    let (cfg, out) = match common.load() {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: invalid configuration: {msg}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let result: Result<RunManifest, StageError> = match &cli.command {
        Command::Run(_) => runner::run(&cfg, &out),
        Command::Simulate(_) => runner::simulate(&cfg, &out),
        Command::Eval(_) => runner::eval(&cfg, &out),
        Command::Pattern(_) => runner::pattern(&cfg, &out),
        Command::Process { .. } => {
            runner::process_recording(&cfg, input.expect("process has an input"), &out)
        }
    };
    match result {
        Ok(m) => {
            if !common.quiet {
                summarize(&m, &out);
            }
            ExitCode::SUCCESS
        }
        Err(e) if e.stage == "config" => {
            eprintln!("error: invalid configuration: {}", e.source);
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("error: stage {} failed: {}", e.stage, e.source);
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
