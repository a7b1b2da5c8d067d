mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use config::{Command, RunConfig};
use output::{Stamp, WriteError};

#[derive(Parser, Debug)]
#[command(name = "chiral", version, about = "Majorana edge transfer on the decorated honeycomb")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: the configured one, else `out`).
    #[arg(long, global = true, env = "CHIRAL_OUT")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads for parallel maps (default: all cores).
    #[arg(long, global = true, env = "CHIRAL_JOBS")]
    jobs: Option<usize>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Cylinder band structure, bulk gap and edge crossing.
    Bands,
    /// Extrapolated triangle and dodecagon vortex gaps.
    VortexGaps,
    /// Dot or droplet transfer between two boundary registers.
    Transfer,
    /// Disorder sweep of the dot transfer.
    Sweep,
    /// Exact spin spectrum against the free-fermion sectors.
    Oracle,
    /// Occupied-band Chern number.
    Chern,
    /// Checks a configuration without computing anything.
    Validate {
        /// Also checks the geometry against one command.
        #[arg(long, value_enum)]
        against: Option<Target>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Target {
    Bands,
    VortexGaps,
    Transfer,
    Sweep,
    Oracle,
    Chern,
}

impl From<Target> for Command {
    fn from(t: Target) -> Self {
        match t {
            Target::Bands => Command::Bands,
            Target::VortexGaps => Command::VortexGaps,
            Target::Transfer => Command::Transfer,
            Target::Sweep => Command::Sweep,
            Target::Oracle => Command::Oracle,
            Target::Chern => Command::Chern,
        }
    }
}

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Core(chiral_core::Error),
    Exists(PathBuf),
    Io(std::io::Error),
}

impl From<chiral_core::Error> for Failure {
    fn from(e: chiral_core::Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        use chiral_core::Error as E;
        match self {
            Failure::Config(_) | Failure::Core(E::Invalid(_)) => 2,
            Failure::Core(E::Precondition(_)) | Failure::Exists(_) => 3,
            Failure::Core(E::Numerical(_) | E::Json(_)) => 4,
            Failure::Core(E::Io(_)) | Failure::Io(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        use chiral_core::Error as E;
        match self {
            Failure::Config(_) => "config",
            Failure::Core(E::Invalid(_)) => "invalid",
            Failure::Core(E::Precondition(_)) => "precondition",
            Failure::Exists(_) => "exists",
            Failure::Core(E::Numerical(_) | E::Json(_)) => "numerical",
            Failure::Core(E::Io(_)) | Failure::Io(_) => "io",
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Config(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
            Failure::Exists(p) => format!("{} exists; pass --force to overwrite", p.display()),
            Failure::Io(e) => e.to_string(),
        }
    }
}

fn fail(f: &Failure) -> ExitCode {
    let body = json!({ "error": f.kind(), "message": f.message(), "exit_code": f.code() });
    eprintln!("{body}");
    ExitCode::from(f.code())
}

fn load(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text).map_err(Failure::Config)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load(&cli)?;
    let cmd = match cli.command {
        Sub::Validate { against } => {
            match against {
                Some(t) => cfg.validate(Some(t.into())),
                None => cfg.validate(None),
            }
            .map_err(Failure::Config)?;
            println!("{}", json!({ "valid": true, "config_sha256": cfg.digest() }));
            return Ok(());
        }
        Sub::Bands => Command::Bands,
        Sub::VortexGaps => Command::VortexGaps,
        Sub::Transfer => Command::Transfer,
        Sub::Sweep => Command::Sweep,
        Sub::Oracle => Command::Oracle,
        Sub::Chern => Command::Chern,
    };
    cfg.validate(Some(cmd)).map_err(Failure::Config)?;
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Failure::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Config(e.to_string()))?;
    }
    let dir = cli.out.clone().or_else(|| cfg.output.dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"));
    let stamp = Stamp { command: cmd.name(), digest: cfg.digest(), seed: cfg.seed };

    let result = commands::execute(cmd, &cfg, &stamp, cli.format)?;
    let paths = output::write_all(&dir, &result.artifacts, cli.force).map_err(|e| match e {
        WriteError::Exists(p) => Failure::Exists(p),
        WriteError::Io(e) => Failure::Io(e),
    })?;
    let files: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
    println!("{}", json!({ "command": cmd.name(), "config_sha256": stamp.digest, "files": files }));
    match result.check {
        Some(msg) => Err(Failure::Core(chiral_core::Error::Numerical(msg))),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&Failure::Config(e.to_string().trim_end().to_string())),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(&f),
    }
}
