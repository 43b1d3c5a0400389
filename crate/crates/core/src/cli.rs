//! `nfsails` command-line interface.
//!
//! Every command resolves a [`RunConfig`], writes it to `<out>/run.cfg`,
//! and then runs. Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, RunConfig, SampleMethod, SEED_ENV};
use crate::flow::{load_checkpoint, save_checkpoint, CheckpointError, FlowModel};
use crate::io::{read_points_csv, write_points_csv};
use crate::metrics::{evaluate, MetricError};
use crate::pipeline::{comparison_csv, comparison_table, repro, ReproConfig};
use crate::plot::render_svg;
use crate::samplers::{naive_sample, nf_sails_chains, RunDiagnostics};
use crate::train::{train, TrainError};

#[derive(Debug, Parser)]
#[command(name = "nfsails", version, about = "Train coupling flows on 2D targets and sample them in latent space")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a flow; writes model.ckpt and trace.csv.
    Train(Flags),
    /// Draw samples from a checkpoint; writes samples.csv, latent.csv and,
    /// for `sails`, diagnostics.json.
    Sample(Flags),
    /// Score a samples CSV against the target; writes report.json.
    Eval(Flags),
    /// Render a samples CSV; writes plot.svg.
    Plot(Flags),
    /// Train and compare naive and sails sampling over several seeds;
    /// writes comparison.csv and prints a summary table.
    Repro(Flags),
}

/// Flags shared by every command. Each overrides the key of the same name
/// (dashes become underscores) from `--config`.
#[derive(Debug, Default, Args)]
pub struct Flags {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<String>,
    #[arg(long)]
    pub samples: Option<String>,
    /// Sampler diagnostics JSON to copy into the eval report.
    #[arg(long)]
    pub diagnostics: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub dataset_size: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<String>,
    #[arg(long)]
    pub clip_norm: Option<String>,
    #[arg(long)]
    pub layers: Option<String>,
    /// Comma-separated hidden widths.
    #[arg(long)]
    pub hidden: Option<String>,
    /// `sails` or `naive`.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub n: Option<String>,
    #[arg(long)]
    pub eps: Option<String>,
    /// Probability of the local kernel at each step.
    #[arg(long)]
    pub p: Option<String>,
    #[arg(long)]
    pub burn_in: Option<String>,
    #[arg(long)]
    pub thin: Option<String>,
    /// `approx` or `exact` proposals.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub adapt: Option<String>,
    #[arg(long)]
    pub chains: Option<String>,
    /// Comma-separated subset of loglik,kl,ks,ood.
    #[arg(long)]
    pub metrics: Option<String>,
    #[arg(long)]
    pub k_nn: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
    #[arg(long)]
    pub level_samples: Option<String>,
    /// Level-set mass to outline, or `none`.
    #[arg(long)]
    pub levelset: Option<String>,
    #[arg(long)]
    pub target_samples: Option<String>,
    #[arg(long)]
    pub width: Option<String>,
    #[arg(long)]
    pub height: Option<String>,
    #[arg(long)]
    pub grid: Option<String>,
    /// Comma-separated repetition seeds for `repro`.
    #[arg(long)]
    pub seeds: Option<String>,
}

impl Flags {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("target", &self.target),
            ("seed", &self.seed),
            ("out", &self.out),
            ("checkpoint", &self.checkpoint),
            ("samples", &self.samples),
            ("diagnostics", &self.diagnostics),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("dataset_size", &self.dataset_size),
            ("learning_rate", &self.learning_rate),
            ("clip_norm", &self.clip_norm),
            ("layers", &self.layers),
            ("hidden", &self.hidden),
            ("method", &self.method),
            ("n", &self.n),
            ("eps", &self.eps),
            ("p", &self.p),
            ("burn_in", &self.burn_in),
            ("thin", &self.thin),
            ("mode", &self.mode),
            ("adapt", &self.adapt),
            ("chains", &self.chains),
            ("metrics", &self.metrics),
            ("k_nn", &self.k_nn),
            ("alpha", &self.alpha),
            ("level_samples", &self.level_samples),
            ("levelset", &self.levelset),
            ("target_samples", &self.target_samples),
            ("width", &self.width),
            ("height", &self.height),
            ("grid", &self.grid),
            ("seeds", &self.seeds),
        ]
    }

    /// Defaults, then the seed fallback, then `--config`, then flags.
    pub fn resolve(&self, env_seed: Option<&str>) -> Result<RunConfig, ConfigError> {
        let mut c = RunConfig::with_env_seed(env_seed)?;
        if let Some(path) = &self.config {
            c.apply_file(path)?;
        }
        for (key, value) in self.pairs() {
            if let Some(v) = value {
                c.set(key, v)?;
            }
        }
        c.finish();
        Ok(c)
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl ToString) -> Self {
        CliError {
            code: 2,
            message: message.to_string(),
        }
    }

    fn runtime(message: impl ToString) -> Self {
        CliError {
            code: 1,
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::usage(e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn prepare_out(config: &RunConfig) -> CliResult {
    fs::create_dir_all(&config.out)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", config.out.display())))?;
    write_file(&config.out.join("run.cfg"), config.to_cfg_string())
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    path.as_deref().ok_or_else(|| CliError::usage(format!("--{flag} is required")))
}

fn load_model(path: &Path) -> CliResult<FlowModel> {
    load_checkpoint(path).map_err(|e| match e {
        CheckpointError::Io(io) if io.kind() == ErrorKind::NotFound => {
            CliError::usage(format!("checkpoint not found: {}", path.display()))
        }
        other => CliError::usage(format!("{}: {other}", path.display())),
    })
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn metric_error(e: MetricError) -> CliError {
    match e {
        MetricError::Input(_) => CliError::usage(e),
        _ => CliError::runtime(e),
    }
}

fn cmd_train(config: &RunConfig) -> CliResult {
    config.train.validate().map_err(CliError::usage)?;
    prepare_out(config)?;
    let trace_path = config.out.join("trace.csv");
    match train(&config.target, &config.train) {
        Ok(outcome) => {
            let ckpt = config.out.join("model.ckpt");
            save_checkpoint(&outcome.model, &ckpt)
                .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", ckpt.display())))?;
            write_file(&trace_path, outcome.trace.to_csv())?;
            let last = outcome.trace.epoch_nll.last().copied().unwrap_or(outcome.trace.initial_nll);
            println!(
                "trained {} epochs: nll {:.4} -> {:.4}",
                outcome.trace.epochs(),
                outcome.trace.initial_nll,
                last
            );
            Ok(())
        }
        Err(TrainError::Diverged { epoch, trace }) => {
            write_file(&trace_path, trace.to_csv())?;
            Err(CliError::runtime(format!(
                "training diverged in epoch {}; partial trace in {}",
                epoch + 1,
                trace_path.display()
            )))
        }
        Err(e @ TrainError::Config(_)) => Err(CliError::usage(e)),
        Err(e) => Err(CliError::runtime(e)),
    }
}

fn cmd_sample(config: &RunConfig) -> CliResult {
    let model = load_model(required(&config.checkpoint, "checkpoint")?)?;
    config.sampler.validate().map_err(CliError::usage)?;
    prepare_out(config)?;
    let run = match config.method {
        SampleMethod::Naive => naive_sample(&model, config.sampler.n_samples, config.seed),
        SampleMethod::Sails => nf_sails_chains(&model, &config.sampler, config.chains),
    }
    .map_err(CliError::runtime)?;
    let csv = |name: &str, points, prefix| {
        let path = config.out.join(name);
        write_points_csv(&path, points, prefix).map_err(CliError::runtime)
    };
    csv("samples.csv", &run.samples, 'x')?;
    csv("latent.csv", &run.latent, 'z')?;
    if let Some(d) = &run.diagnostics {
        write_file(&config.out.join("diagnostics.json"), to_json(d))?;
    }
    println!("wrote {} samples to {}", run.samples.len(), config.out.display());
    Ok(())
}

fn cmd_eval(config: &RunConfig) -> CliResult {
    let samples = read_points_csv(required(&config.samples, "samples")?).map_err(CliError::usage)?;
    let diagnostics = match &config.diagnostics {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
            Some(
                serde_json::from_str::<RunDiagnostics>(&text)
                    .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?,
            )
        }
        None => None,
    };
    prepare_out(config)?;
    let report = evaluate(&config.target, &samples, &config.metrics, &config.eval, diagnostics).map_err(metric_error)?;
    write_file(&config.out.join("report.json"), to_json(&report))?;
    print!("{}", to_json(&report));
    Ok(())
}

fn cmd_plot(config: &RunConfig) -> CliResult {
    let samples = read_points_csv(required(&config.samples, "samples")?).map_err(CliError::usage)?;
    prepare_out(config)?;
    let svg = render_svg(&config.target, &samples, &config.plot).map_err(CliError::runtime)?;
    if config.plot.levelset.is_some() && !config.target.has_density() {
        eprintln!("note: {} has no density; level set omitted", config.target);
    }
    write_file(&config.out.join("plot.svg"), svg)
}

fn cmd_repro(config: &RunConfig) -> CliResult {
    if config.seeds.is_empty() {
        return Err(CliError::usage("--seeds must list at least one seed"));
    }
    config.train.validate().map_err(CliError::usage)?;
    config.sampler.validate().map_err(CliError::usage)?;
    prepare_out(config)?;
    let rc = ReproConfig {
        target: config.target,
        train: config.train.clone(),
        sampler: config.sampler.clone(),
        eval: config.eval.clone(),
        metrics: config.metrics.clone(),
        seeds: config.seeds.clone(),
    };
    let rows = repro(&rc).map_err(CliError::runtime)?;
    write_file(&config.out.join("comparison.csv"), comparison_csv(&rows))?;
    println!("{}", config.target);
    print!("{}", comparison_table(&rows));
    Ok(())
}

/// Runs the CLI on `args` (including the program name); returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let (flags, command): (&Flags, fn(&RunConfig) -> CliResult) = match &cli.command {
        Command::Train(f) => (f, cmd_train),
        Command::Sample(f) => (f, cmd_sample),
        Command::Eval(f) => (f, cmd_eval),
        Command::Plot(f) => (f, cmd_plot),
        Command::Repro(f) => (f, cmd_repro),
    };
    let result = flags
        .resolve(env_seed.as_deref())
        .map_err(CliError::from)
        .and_then(|config| command(&config));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn every_flag_maps_to_a_config_key() {
        let flags = Flags::default();
        let keys: Vec<&str> = flags.pairs().into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, crate::config::KEYS);
    }

    #[test]
    fn flags_override_config_file_and_env() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("a.cfg");
        fs::write(&file, "seed = 4\neps = 0.2\n").unwrap();
        let flags = Flags {
            config: Some(file),
            eps: Some("0.3".into()),
            ..Default::default()
        };
        let c = flags.resolve(Some("99")).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.sampler.eps, 0.3);
        assert_eq!(c.sampler.seed, 4);
        assert_eq!(Flags::default().resolve(Some("99")).unwrap().seed, 99);
    }

    #[test]
    fn unknown_config_key_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("a.cfg");
        fs::write(&file, "sede = 4\n").unwrap();
        let flags = Flags {
            config: Some(file),
            ..Default::default()
        };
        let err = CliError::from(flags.resolve(None).unwrap_err());
        assert_eq!(err.code, 2);
        assert!(err.message.contains("sede"));
    }
}
