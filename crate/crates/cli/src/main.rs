//! `fsprl`: dataset generation, reward meta pre-training, online runs with
//! oracle or human feedback, and plot export.
//!
//! Exit codes: 0 success, 2 invalid configuration or arguments, 3 I/O or
//! runtime failure.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fsprl_core::config::ConfigFile;
use fsprl_core::env::Family;
use fsprl_core::export::{plot_tables, XAxis};
use fsprl_core::meta::{maml_pretrain, RewardEnsemble};
use fsprl_core::orchestrator::{
    read_records, run, CheckpointHandle, LabelSource, MetricsRecord, Mode, OracleLabeler, RunObserver,
    ScriptedLabeler, SkippingLabeler,
};
use fsprl_core::preference::{read_datasets, write_datasets, Label, LabelSource as Provenance};
use fsprl_core::Error;
use fsprl_service::{AnswerRecord, FeedbackHub, HubObserver, HumanLabeler, Server};

#[derive(Parser)]
#[command(name = "fsprl", version, about = "Few-shot preference-based reinforcement learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Environment family, overriding the config.
    #[arg(long, value_parser = parse_family)]
    env: Option<Family>,
    /// Seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Collect behavior rollouts on the pre-training tasks and write oracle-labeled query datasets.
    Datasets {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Meta pre-train a reward ensemble and write its checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Use existing datasets instead of generating them.
        #[arg(long)]
        datasets: Option<PathBuf>,
        /// Pre-training log (JSON lines); defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train a policy online with scheduled preference feedback.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long, value_enum, default_value_t = LabelerKind::Oracle)]
        labeler: LabelerKind,
        /// Reward checkpoint (few-shot and init modes).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Address for the feedback service (human labeler).
        #[arg(long)]
        serve_addr: Option<SocketAddr>,
        /// Cancel a human run when no answer arrives for this many seconds.
        #[arg(long)]
        idle_timeout: Option<f64>,
        /// Answer log to replay (replay labeler).
        #[arg(long)]
        replay: Option<PathBuf>,
        /// Oracle labeler skips every n-th query.
        #[arg(long)]
        skip_every: Option<usize>,
        /// Total environment steps, overriding the config.
        #[arg(long)]
        steps: Option<u64>,
        /// Metrics output (JSON lines).
        #[arg(long, default_value = "metrics.jsonl")]
        metrics: PathBuf,
        /// Answer log output; defaults to `<metrics>.answers.jsonl`.
        #[arg(long)]
        answers: Option<PathBuf>,
    },
    /// Aggregate metrics files (e.g. one per seed) into tab-separated series.
    ExportPlots {
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Axis::Steps)]
        x: Axis,
        /// Output directory; receives `returns.tsv` and `agreement.tsv`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelerKind {
    Oracle,
    Human,
    Replay,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Steps,
    Feedback,
}

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse::<Family>().map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

type CliResult<T> = Result<T, Error>;

fn load_config(c: &Common) -> CliResult<ConfigFile> {
    let mut cfg = match &c.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    if let Some(f) = c.env {
        cfg.family = f;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn datasets_cmd(common: &Common, out: &Path) -> CliResult<()> {
    let cfg = load_config(common)?;
    cfg.run_config()?;
    let ds = cfg.pretrain_datasets()?;
    let mut w = create(out)?;
    write_datasets(&mut w, &ds)?;
    w.flush()?;
    log::info!("wrote {} task datasets to {}", ds.len(), out.display());
    Ok(())
}

fn pretrain_cmd(common: &Common, out: &Path, datasets: Option<&Path>, log_path: Option<&Path>) -> CliResult<()> {
    let cfg = load_config(common)?;
    cfg.run_config()?;
    let ds = match datasets {
        Some(p) => {
            let ds = read_datasets(BufReader::new(File::open(p)?))?;
            if let Some(d) = ds.iter().find(|d| d.family != cfg.family) {
                return Err(Error::Config(format!("{} holds {} datasets, config is {}", p.display(), d.family, cfg.family)));
            }
            ds
        }
        None => cfg.pretrain_datasets()?,
    };
    let log_path = log_path.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(out, ".log.jsonl"));
    let mut log_w = create(&log_path)?;
    let mut log_err = None;
    let mut ensemble = RewardEnsemble::from_config(cfg.family, &cfg.meta, cfg.seed);
    maml_pretrain(&mut ensemble, &ds, &cfg.meta, cfg.seed, |r| {
        if r.iteration % 100 == 0 {
            log::info!("member {} iteration {} meta loss {:.4}", r.member, r.iteration, r.meta_loss);
        }
        if log_err.is_none() {
            let line = serde_json::to_string(r).expect("record serializes");
            if let Err(e) = writeln!(log_w, "{line}") {
                log_err = Some(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    log_w.flush()?;
    let mut w = create(out)?;
    ensemble.write_checkpoint(&mut w)?;
    w.flush()?;
    log::info!("wrote checkpoint {}", out.display());
    Ok(())
}

/// Writes metrics lines as they arrive and forwards them to the service.
struct MetricsSink {
    out: BufWriter<File>,
    hub: Option<HubObserver>,
    error: Option<std::io::Error>,
}

impl RunObserver for MetricsSink {
    fn record(&mut self, r: &MetricsRecord) {
        if self.error.is_none() {
            let res = writeln!(self.out, "{}", r.to_line()).and_then(|_| self.out.flush());
            self.error = res.err();
        }
        match r {
            MetricsRecord::Eval(e) => log::info!(
                "step {} return {:.2} success {:.2} feedback {}",
                e.step,
                e.mean_return,
                e.success,
                e.feedback_used
            ),
            MetricsRecord::Session(s) => log::info!("session {} at step {}: {} queries", s.session, s.step, s.labels.len()),
            _ => {}
        }
        if let Some(h) = &mut self.hub {
            h.record(r);
        }
    }

    fn progress(&mut self, step: u64) {
        if let Some(h) = &mut self.hub {
            h.progress(step);
        }
    }
}

fn read_answer_log(path: &Path) -> CliResult<Vec<(u64, Label)>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let a: AnswerRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push((a.query_id, a.choice));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn run_cmd(
    common: &Common,
    mode: Option<Mode>,
    labeler: LabelerKind,
    checkpoint: Option<&Path>,
    serve_addr: Option<SocketAddr>,
    idle_timeout: Option<f64>,
    replay: Option<&Path>,
    skip_every: Option<usize>,
    steps: Option<u64>,
    metrics: &Path,
    answers: Option<&Path>,
) -> CliResult<()> {
    let mut file = load_config(common)?;
    if let Some(m) = mode {
        file.mode = m;
    }
    if let Some(s) = steps {
        file.total_steps = s;
    }
    let cfg = file.run_config()?;
    if cfg.mode.needs_checkpoint() && checkpoint.is_none() {
        return Err(Error::Config(format!("--mode {} requires --checkpoint", cfg.mode)));
    }
    if skip_every == Some(0) {
        return Err(Error::Config("--skip-every must be positive".into()));
    }
    let handle = checkpoint.map(CheckpointHandle::from_path);

    let hub = FeedbackHub::new();
    let mut server = None;
    let mut source: Box<dyn LabelSource> = match labeler {
        LabelerKind::Oracle => {
            let oracle = OracleLabeler::new(cfg.task(), cfg.env.clone());
            match skip_every {
                Some(n) => Box::new(SkippingLabeler::new(oracle, n)),
                None => Box::new(oracle),
            }
        }
        LabelerKind::Replay => {
            let path = replay.ok_or_else(|| Error::Config("--labeler replay requires --replay".into()))?;
            Box::new(ScriptedLabeler::new(read_answer_log(path)?, Provenance::Human))
        }
        LabelerKind::Human => {
            let addr = serve_addr.ok_or_else(|| Error::Config("--labeler human requires --serve-addr".into()))?;
            if matches!(idle_timeout, Some(t) if !(t > 0.0)) {
                return Err(Error::Config("--idle-timeout must be positive".into()));
            }
            server = Some(Server::spawn(hub.clone(), addr)?);
            Box::new(HumanLabeler::new(hub.clone(), idle_timeout.map(Duration::from_secs_f64)))
        }
    };

    let mut sink = MetricsSink {
        out: create(metrics)?,
        hub: server.as_ref().map(|_| HubObserver { hub: hub.clone() }),
        error: None,
    };
    let outcome = run(&cfg, handle.as_ref(), source.as_mut(), &mut sink);
    let log = hub.answer_log();
    if !log.is_empty() {
        let path = answers.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(metrics, ".answers.jsonl"));
        let mut w = create(&path)?;
        for a in &log {
            writeln!(w, "{}", serde_json::to_string(a).expect("answer serializes"))?;
        }
        w.flush()?;
        log::info!("wrote {} answers to {}", log.len(), path.display());
    }
    drop(server);
    let outcome = outcome?;
    if let Some(e) = sink.error {
        return Err(e.into());
    }
    log::info!(
        "done: {} sessions, {} queries charged ({} skipped), metrics in {}",
        outcome.sessions,
        outcome.feedback_used,
        outcome.skips,
        metrics.display()
    );
    Ok(())
}

fn export_cmd(metrics: &[PathBuf], x: Axis, out: &Path) -> CliResult<()> {
    let runs = metrics
        .iter()
        .map(|p| read_records(BufReader::new(File::open(p)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let x = match x {
        Axis::Steps => XAxis::Steps,
        Axis::Feedback => XAxis::Feedback,
    };
    let tables = plot_tables(&runs, x)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("returns.tsv"), tables.evals_tsv())?;
    std::fs::write(out.join("agreement.tsv"), tables.sessions_tsv())?;
    log::info!("exported {} runs to {}", tables.runs, out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Datasets { common, out } => datasets_cmd(common, out),
        Command::Pretrain {
            common,
            out,
            datasets,
            log,
        } => pretrain_cmd(common, out, datasets.as_deref(), log.as_deref()),
        Command::Run {
            common,
            mode,
            labeler,
            checkpoint,
            serve_addr,
            idle_timeout,
            replay,
            skip_every,
            steps,
            metrics,
            answers,
        } => run_cmd(
            common,
            *mode,
            *labeler,
            checkpoint.as_deref(),
            *serve_addr,
            *idle_timeout,
            replay.as_deref(),
            *skip_every,
            *steps,
            metrics,
            answers.as_deref(),
        ),
        Command::ExportPlots { metrics, x, out } => export_cmd(metrics, *x, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
