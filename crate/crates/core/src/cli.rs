//! `mcit {train|infer} <task_ids...> --benchmark <name> --method <name>`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, ValueEnum};

use crate::config::{load_config_tree, ConfigRequest, Layer, DATA_ROOT_ENV, PLUGIN_PATH_ENV};
use crate::error::{Error, Result};
use crate::registry::{FrozenRegistry, Kind, Registry};
use crate::trainer::{execute, RunContext, RunMode, RunOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Train,
    Infer,
}

#[derive(Debug, Parser)]
#[command(name = "mcit", version, about = "Continual instruction tuning on a desk-scale multimodal backbone")]
struct Args {
    /// Run mode.
    #[arg(value_enum)]
    mode: ModeArg,
    /// 0-based task ids, strictly increasing.
    #[arg(required = true, num_args = 1..)]
    task_ids: Vec<String>,
    #[arg(long)]
    benchmark: String,
    #[arg(long)]
    method: String,
    #[arg(long, default_value = "config")]
    config_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Extra plugin root; may be repeated.
    #[arg(long = "plugin-root")]
    plugin_roots: Vec<PathBuf>,
    /// Config override as dotted.key=value; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

/// A validated command line.
#[derive(Clone, Debug, PartialEq)]
pub struct RunCommand {
    pub mode: RunMode,
    pub task_ids: Vec<usize>,
    pub benchmark: String,
    pub method: String,
    pub config_dir: PathBuf,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub plugin_roots: Vec<PathBuf>,
    pub overrides: Vec<String>,
}

#[derive(Debug)]
pub enum CliAction {
    Run(RunCommand),
    /// Help or version text to print before exiting successfully.
    Print(String),
}

fn parse_ids(raw: &[String]) -> Result<Vec<usize>> {
    let ids = raw
        .iter()
        .map(|s| s.parse::<usize>().map_err(|_| Error::Usage(format!("task id `{s}` is not a nonnegative integer"))))
        .collect::<Result<Vec<_>>>()?;
    if ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Usage(format!("task ids {ids:?} must be strictly increasing")));
    }
    Ok(ids)
}

/// Values of `--flag v` and `--flag=v` in a raw argument list.
fn scan_flag(argv: &[OsString], flag: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut it = argv.iter().map(|a| a.to_string_lossy().into_owned());
    while let Some(a) = it.next() {
        if a == flag {
            out.extend(it.next().map(PathBuf::from));
        } else if let Some(v) = a.strip_prefix(&format!("{flag}=")) {
            out.push(PathBuf::from(v));
        }
    }
    out
}

fn env_plugin_roots() -> Vec<PathBuf> {
    std::env::var_os(PLUGIN_PATH_ENV).map(|v| std::env::split_paths(&v).collect()).unwrap_or_default()
}

/// Built-in registry plus plugins from config, environment and command-line roots, in that order.
pub fn build_registry(config_roots: &[PathBuf], cli_roots: &[PathBuf]) -> Result<FrozenRegistry<f64>> {
    let mut registry = Registry::builtin()?;
    let mut roots = config_roots.to_vec();
    roots.extend(env_plugin_roots());
    roots.extend(cli_roots.iter().cloned());
    let n = registry.discover_plugins(&roots)?;
    if n > 0 {
        log::info!("registered {n} plugin entries");
    }
    Ok(registry.freeze())
}

fn listing(registry: &FrozenRegistry<f64>) -> String {
    format!(
        "Modes: train, infer\nMethods: {}\nBenchmarks: {}\nBackbones: {}",
        registry.names(Kind::Method).join(", "),
        registry.names(Kind::Benchmark).join(", "),
        registry.names(Kind::Backbone).join(", "),
    )
}

/// Parses arguments. Help output lists the live registries.
pub fn parse_cli(argv: &[OsString]) -> Result<CliAction> {
    let matches = match Args::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let config_dir =
                        scan_flag(argv, "--config-dir").pop().unwrap_or_else(|| PathBuf::from("config"));
                    let config_roots = load_config_tree(&config_dir, &ConfigRequest::default())
                        .map(|t| t.config.plugin_roots)
                        .unwrap_or_default();
                    let registry = build_registry(&config_roots, &scan_flag(argv, "--plugin-root"))?;
                    let help = Args::command().after_help(listing(&registry)).render_help().to_string();
                    Ok(CliAction::Print(help))
                }
                ErrorKind::DisplayVersion => Ok(CliAction::Print(e.to_string())),
                _ => Err(Error::Usage(e.to_string().trim_end().to_owned())),
            };
        }
    };
    let args = Args::from_arg_matches(&matches).map_err(|e| Error::Usage(e.to_string()))?;
    Ok(CliAction::Run(RunCommand {
        mode: match args.mode {
            ModeArg::Train => RunMode::Train,
            ModeArg::Infer => RunMode::Infer,
        },
        task_ids: parse_ids(&args.task_ids)?,
        benchmark: args.benchmark,
        method: args.method,
        config_dir: args.config_dir,
        seed: args.seed,
        out_dir: args.out_dir,
        plugin_roots: args.plugin_roots,
        overrides: args.overrides,
    }))
}

fn cli_layers(cmd: &RunCommand) -> Result<Vec<Layer>> {
    let mut layers = Vec::new();
    if let Some(root) = std::env::var_os(DATA_ROOT_ENV) {
        let mut t = toml::Table::new();
        crate::config::set_path(&mut t, "paths.data_root", toml::Value::String(Path::new(&root).display().to_string()));
        layers.push(Layer::new(format!("env {DATA_ROOT_ENV}"), t));
    }
    layers.push(Layer::from_assignments("cli --set", &cmd.overrides)?);
    let mut flags = toml::Table::new();
    if let Some(seed) = cmd.seed {
        let seed = i64::try_from(seed).map_err(|_| Error::Usage(format!("seed {seed} is too large")))?;
        flags.insert("seed".into(), toml::Value::Integer(seed));
    }
    if let Some(out) = &cmd.out_dir {
        crate::config::set_path(&mut flags, "paths.out_dir", toml::Value::String(out.display().to_string()));
    }
    layers.push(Layer::new("cli", flags));
    Ok(layers)
}

/// Loads configuration, discovers plugins and executes the command.
pub fn run(cmd: &RunCommand) -> Result<RunOutcome> {
    let request =
        ConfigRequest { benchmark: cmd.benchmark.clone(), method: cmd.method.clone(), cli: cli_layers(cmd)? };
    let tree = load_config_tree(&cmd.config_dir, &request)?;
    let registry = build_registry(&tree.config.plugin_roots, &cmd.plugin_roots)?;
    let ctx = RunContext {
        registry: &registry,
        config: &tree.config,
        provenance: &tree.provenance,
        config_dir: &cmd.config_dir,
        benchmark: &cmd.benchmark,
        method: &cmd.method,
    };
    let outcome = execute(&ctx, cmd.mode, &cmd.task_ids)?;
    Ok(outcome)
}

/// Full process behaviour; returns the exit code.
pub fn main_with_args(argv: &[OsString]) -> i32 {
    let result = parse_cli(argv).and_then(|action| match action {
        CliAction::Print(text) => {
            println!("{text}");
            Ok(())
        }
        CliAction::Run(cmd) => run(&cmd).map(|outcome| {
            let r = &outcome.report;
            let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.2}"));
            println!(
                "{} / {}: last {}  avg {}  forgetting {}  ({})",
                r.benchmark,
                r.method,
                fmt(r.last_accuracy),
                fmt(r.average_accuracy),
                fmt(r.forgetting),
                outcome.state.metrics_path().display()
            );
        }),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
