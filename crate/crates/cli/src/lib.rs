//! The `dnal` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dnal::checkpoint;
use dnal::checks::gradient_suite;
use dnal::config::TrainConfig;
use dnal::gating::GateGradForm;
use dnal::metrics::{write_csv, write_json, RunReport};
use dnal::trainer::{baseline_of, build_model, finish_joint, Data, Session, Stage};
use dnal::{Error, Result};

pub const CSV_NAME: &str = "metrics.csv";
pub const REPORT_NAME: &str = "report.json";
pub const CHECKPOINT_NAME: &str = "checkpoint.dnal";

#[derive(Parser, Debug)]
#[command(
    name = "dnal",
    version,
    about = "Train, search, prune and finetune channel-gated CNNs"
)]
struct Cli {
    /// Repeat for more log output (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    checkpoint_in: Option<PathBuf>,
    /// Where to write the checkpoint (default: <out-dir>/checkpoint.dnal).
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    /// Directory for the metrics CSV, JSON report and default checkpoint.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the weights with the gates disabled.
    TrainWeights(Common),
    /// Train the gates with weights and BN statistics frozen.
    SearchArch(Common),
    /// Derive masks from the gates and remove the closed channels.
    Prune(Common),
    /// Retrain the pruned network.
    Finetune(Common),
    /// Every remaining stage, in order.
    RunAll(Common),
    /// Weights and gates together, then the saturated-gradient probe and pruning.
    RunJoint(Common),
    /// Print the architecture report of a checkpoint or configured model.
    Report(Common),
    /// Finite-difference check of every gradient.
    Gradcheck(Common),
}

/// Parses `argv` (program name first), runs the command, and returns the exit code:
/// 0 on success, 1 on a runtime failure, 2 on a usage or configuration error.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_logging(cli.verbose, cli.quiet);
    match run(cli.command) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => "warn",
        (_, 0) => "info",
        (_, 1) => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn load_config(path: &Path) -> Result<TrainConfig, Failure> {
    TrainConfig::load(path).map_err(|e| match e {
        Error::Io { .. } | Error::Config { .. } => Failure::Usage(e.to_string()),
        e => Failure::Run(e),
    })
}

/// Session from the checkpoint, or a fresh one from the config. A config given
/// alongside a checkpoint replaces its settings for the remaining stages but may not
/// change the network.
fn open_session(c: &Common, joint: bool) -> Result<Session, Failure> {
    let cfg = c.config.as_deref().map(load_config).transpose()?;
    match (&c.checkpoint_in, cfg) {
        (Some(path), cfg) => {
            let mut s = checkpoint::load(path)?;
            if let Some(cfg) = cfg {
                let old = &s.cfg;
                if cfg.model != old.model
                    || cfg.model_spec != old.model_spec
                    || cfg.num_classes != old.num_classes
                    || cfg.gate_order != old.gate_order
                {
                    return Err(Failure::Usage(format!(
                        "{} describes a different network than checkpoint {}",
                        c.config.as_ref().unwrap().display(),
                        path.display()
                    )));
                }
                if cfg.joint_mode != old.joint_mode {
                    return Err(Failure::Usage("joint_mode cannot change on resume".into()));
                }
                s.cfg = cfg;
            }
            Ok(s)
        }
        (None, Some(cfg)) => Ok(Session::new(TrainConfig {
            joint_mode: joint || cfg.joint_mode,
            ..cfg
        })?),
        (None, None) => Err(Failure::Usage(
            "either --config or --checkpoint-in is required".into(),
        )),
    }
}

fn expect_stage(s: &Session, allowed: &[Stage], command: &str) -> Result<(), Failure> {
    if allowed.contains(&s.progress.stage) {
        Ok(())
    } else {
        Err(Failure::Run(Error::State(format!(
            "`{command}` cannot run on a session at stage `{}` (epoch {})",
            s.progress.stage.as_str(),
            s.progress.epoch
        ))))
    }
}

fn write_outputs(
    s: &Session,
    c: &Common,
    saturation: Option<dnal::trainer::SaturationReport>,
) -> Result<()> {
    write_csv(&c.out_dir.join(CSV_NAME), &s.rows)?;
    write_json(
        &c.out_dir.join(REPORT_NAME),
        &RunReport::from_session(s, saturation)?,
    )?;
    let ckpt = c
        .checkpoint_out
        .clone()
        .unwrap_or_else(|| c.out_dir.join(CHECKPOINT_NAME));
    checkpoint::save(s, &ckpt)?;
    log::info!(
        "wrote {} and {} in {}, checkpoint {}",
        CSV_NAME,
        REPORT_NAME,
        c.out_dir.display(),
        ckpt.display()
    );
    Ok(())
}

fn run(command: Command) -> Result<i32, Failure> {
    match command {
        Command::TrainWeights(c) => staged(&c, &[Stage::Weights], "train-weights", |st| {
            st == Stage::Weights
        }),
        Command::SearchArch(c) => staged(&c, &[Stage::Arch], "search-arch", |st| st == Stage::Arch),
        Command::Prune(c) => staged(&c, &[Stage::Prune], "prune", |st| st == Stage::Prune),
        Command::Finetune(c) => staged(&c, &[Stage::Finetune], "finetune", |st| {
            st == Stage::Finetune
        }),
        Command::RunAll(c) => staged(
            &c,
            &[Stage::Weights, Stage::Arch, Stage::Prune, Stage::Finetune],
            "run-all",
            |_| true,
        ),
        Command::RunJoint(c) => {
            let mut s = open_session(&c, true)?;
            expect_stage(&s, &[Stage::Joint], "run-joint")?;
            let data = Data::from_config(&s.cfg)?;
            let sat = finish_joint(&mut s, &data)?;
            println!(
                "saturated gate gradients (delta = {:e}, |s| >= {:.3}, {} of {} gates raised): max |dL/ds| = {:e} (f32), {:e} (f64)",
                sat.delta, sat.min_abs_s, sat.clamped, sat.gates, sat.max_abs_grad, sat.max_abs_grad_f64
            );
            write_outputs(&s, &c, Some(sat))?;
            Ok(0)
        }
        Command::Report(c) => {
            let report = match (&c.checkpoint_in, &c.config) {
                (None, Some(path)) => {
                    let model = build_model(&load_config(path)?)?;
                    dnal::pruner::ArchReport::new(&baseline_of(&model)?, &model, None, 0.0, 0)?
                }
                _ => open_session(&c, false)?.arch_report()?,
            };
            print!("{report}");
            Ok(0)
        }
        Command::Gradcheck(c) => {
            let form = match &c.config {
                Some(p) => load_config(p)?.grad_form,
                None => GateGradForm::ChainRule,
            };
            let results = gradient_suite(form, 0)?;
            let mut ok = true;
            for r in &results {
                println!(
                    "{:<28} max rel err {:.3e}  tol {:.0e}  {}",
                    r.name,
                    r.max_rel_err,
                    r.tol,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                ok &= r.passed();
            }
            Ok(if ok { 0 } else { 1 })
        }
    }
}

fn staged(
    c: &Common,
    allowed: &[Stage],
    name: &str,
    keep_going: impl Fn(Stage) -> bool,
) -> Result<i32, Failure> {
    let mut s = open_session(c, false)?;
    if s.cfg.joint_mode {
        return Err(Failure::Usage(format!(
            "`{name}` runs the staged pipeline; use run-joint for joint_mode = true"
        )));
    }
    expect_stage(&s, allowed, name)?;
    let data = Data::from_config(&s.cfg)?;
    s.run_while(&data, keep_going)?;
    if let Some(d) = s.equivalence {
        log::info!("max |pruned - gated| logits: {d:.3e}");
    }
    write_outputs(&s, c, None)?;
    Ok(0)
}
