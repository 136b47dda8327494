use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chatwatch::config::{parse_config, ConfigOverrides, EngineConfig, RunManifest};
use chatwatch::context::{build_contexts, spam_moving_average, Context};
use chatwatch::online::{
    inject_probe_users, probe_checks, run_online_with, tcp_source, wall_clock_ms, EventSink,
    JsonLinesSink, LabelHandle, ReplaySource, SourceItem, TcpSourceOptions,
};
use chatwatch::parser::{parse_event, parse_stream, ChatEvent};
use chatwatch::pca::{gram_svd, project, rows_to_matrix, Components};
use chatwatch::pipeline::build_profiles;
use chatwatch::profile::FeatureMatrix;
use chatwatch::report::{build_report, default_rules};
use chatwatch::scoring::{score_population, Label, ScoringMethod};
use chatwatch::synth::{
    default_probes, generate_probe_events, generate_stream, write_stream, write_truth, GroundTruth,
    Scenario,
};

#[derive(Parser)]
#[command(
    name = "chatwatch",
    version,
    about = "Find disruptive users in crowd-played game chat"
)]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for sampling and generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write a JSON run manifest here.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count lines, malformed lines and out-of-order timestamps.
    ParseStats(ParseStatsArgs),
    /// Aggregate a log into fixed time windows.
    Contexts(ContextsArgs),
    /// Build per-user feature vectors from a log.
    Features(FeaturesArgs),
    /// Score a feature file.
    Score(ScoreArgs),
    /// Principal components of a feature file.
    Pca(PcaArgs),
    /// Run the streaming engine over a socket or a recorded log.
    Online(OnlineArgs),
    /// Generate a synthetic chat log with known trolls.
    Synth(SynthArgs),
    /// Score distributions and feature rates for every method.
    Report(ReportArgs),
}

#[derive(Args)]
struct ParseStatsArgs {
    /// Log file, or - for stdin.
    #[arg(long, short)]
    input: PathBuf,
}

#[derive(Args)]
struct ContextsArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    /// Window length in seconds.
    #[arg(long)]
    duration: Option<u32>,
    /// Also write the per-second spam fraction and its moving average.
    #[arg(long)]
    spam_series: Option<PathBuf>,
    /// Moving-average length in seconds.
    #[arg(long, default_value_t = 60)]
    spam_window: usize,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long)]
    duration: Option<u32>,
    #[arg(long)]
    min_messages: Option<u64>,
}

#[derive(Args)]
struct ScorerArgs {
    #[arg(long)]
    method: Option<ScoringMethod>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Rows defining the distance structure when the population is larger.
    #[arg(long)]
    sample: Option<usize>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Feature CSV.
    #[arg(long, short)]
    input: PathBuf,
    /// Per-user scores CSV.
    #[arg(long, short)]
    output: PathBuf,
    /// Summary JSON; stdout when absent.
    #[arg(long)]
    summary: Option<PathBuf>,
    #[command(flatten)]
    scorer: ScorerArgs,
}

#[derive(Args)]
struct PcaArgs {
    #[arg(long, short)]
    input: PathBuf,
    /// Projection CSV.
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, default_value = "first3")]
    components: Components,
    /// Subtract column means first.
    #[arg(long)]
    center: bool,
    /// Singular values JSON; stdout when absent.
    #[arg(long)]
    singular_values: Option<PathBuf>,
}

#[derive(Args)]
struct OnlineArgs {
    /// Listen for line streams on this address.
    #[arg(long, conflicts_with = "replay", required_unless_present = "replay")]
    listen: Option<String>,
    /// Replay a recorded log.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Replay rate relative to real time; 0 means as fast as possible.
    #[arg(long, default_value_t = 0.0)]
    speed: f64,
    /// Stop after the first connection closes.
    #[arg(long)]
    once: bool,
    /// Interleave owned probe accounts with known labels.
    #[arg(long)]
    inject_probes: bool,
    /// Length of probe activity for live sources, in seconds.
    #[arg(long, default_value_t = 3600)]
    probe_duration: u32,
    /// Write probe ground truth CSV here.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Events as JSON lines; stdout when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    recluster_interval: Option<u32>,
    #[command(flatten)]
    scorer: ScorerArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, short)]
    out: PathBuf,
    /// Ground-truth CSV.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    users: usize,
    #[arg(long, default_value_t = 0.01)]
    troll_fraction: f64,
    /// Seconds of chat.
    #[arg(long, default_value_t = 3600)]
    duration: u32,
    /// Add the default probe accounts to the log and the truth file.
    #[arg(long)]
    probes: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Feature CSV.
    #[arg(long, short)]
    input: PathBuf,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    sample: Option<usize>,
}

enum CliError {
    Usage(String),
    Input(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Input(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Input(m) | CliError::Internal(m) => m,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn input_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn output_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Internal(format!("cannot write {}: {e}", path.display()))
}

fn open_input(path: &Path) -> Result<Box<dyn BufRead + Send>> {
    if path == Path::new("-") {
        return Ok(Box::new(BufReader::new(io::stdin())));
    }
    let f = File::open(path).map_err(|e| input_err(path, e))?;
    Ok(Box::new(BufReader::new(f)))
}

fn create_output(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| output_err(path, e))
}

fn read_events(path: &Path) -> Result<(Vec<ChatEvent>, chatwatch::parser::ParseStats)> {
    parse_stream(open_input(path)?).map_err(|e| input_err(path, e))
}

fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let r = open_input(path)?;
    FeatureMatrix::read_csv(r).map_err(|e| input_err(path, e))
}

fn write_json_or_stdout(path: Option<&Path>, json: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, format!("{json}\n")).map_err(|e| output_err(p, e)),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

struct Run {
    config: EngineConfig,
    manifest: RunManifest,
    manifest_path: Option<PathBuf>,
}

impl Run {
    fn new(cli: &Cli, name: &str, overrides: ConfigOverrides) -> Result<Run> {
        let overrides = ConfigOverrides {
            seed: cli.seed,
            ..overrides
        };
        let config = parse_config(cli.config.as_deref(), &overrides)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let manifest = RunManifest::new(name, &config, Some(config.seed));
        Ok(Run {
            config,
            manifest,
            manifest_path: cli.manifest.clone(),
        })
    }

    fn input(&mut self, path: &Path) {
        if path != Path::new("-") {
            if let Err(e) = self.manifest.add_input(path) {
                log::warn!("cannot hash {}: {e}", path.display());
            }
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(p) = &self.manifest_path {
            std::fs::write(p, self.manifest.to_json()).map_err(|e| output_err(p, e))?;
        }
        Ok(())
    }
}

fn scorer_overrides(a: &ScorerArgs) -> ConfigOverrides {
    ConfigOverrides {
        method: a.method,
        k: a.k,
        threshold: a.threshold,
        sample_size: a.sample,
        ..Default::default()
    }
}

fn cmd_parse_stats(cli: &Cli, a: &ParseStatsArgs) -> Result<()> {
    let mut run = Run::new(cli, "parse-stats", ConfigOverrides::default())?;
    run.input(&a.input);
    let (_, stats) = read_events(&a.input)?;
    println!("{}", stats.to_json());
    run.manifest.count("lines", stats.lines);
    run.manifest.count("malformed", stats.malformed);
    run.manifest.count("out_of_order", stats.out_of_order);
    run.finish()
}

fn cmd_contexts(cli: &Cli, a: &ContextsArgs) -> Result<()> {
    let mut run = Run::new(
        cli,
        "contexts",
        ConfigOverrides {
            context_duration_s: a.duration,
            ..Default::default()
        },
    )?;
    run.input(&a.input);
    let (events, stats) = read_events(&a.input)?;
    if let Some(path) = &a.spam_series {
        if a.spam_window == 0 {
            return Err(CliError::Usage("--spam-window must be positive".into()));
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| output_err(path, e))?;
        w.write_record([
            "second_start_ms",
            "total",
            "spam",
            "fraction",
            "moving_average",
        ])
        .map_err(|e| output_err(path, e))?;
        for p in spam_moving_average(&events, 1, a.spam_window) {
            w.write_record([
                p.second_start_ms.to_string(),
                p.total.to_string(),
                p.spam.to_string(),
                p.fraction.to_string(),
                p.moving_average.to_string(),
            ])
            .map_err(|e| output_err(path, e))?;
        }
        w.flush().map_err(|e| output_err(path, e))?;
    }
    let windows = build_contexts(
        events,
        run.config.context_duration_s,
        run.config.mode_state(),
    );
    let mut out = create_output(&a.output)?;
    let write = |out: &mut BufWriter<File>| -> io::Result<()> {
        writeln!(out, "{}", Context::csv_header())?;
        for w in &windows {
            writeln!(out, "{}", w.context.to_csv_row())?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| output_err(&a.output, e))?;
    run.manifest.count("lines", stats.lines);
    run.manifest.count("malformed", stats.malformed);
    run.manifest.count("contexts", windows.len() as u64);
    run.finish()
}

fn cmd_features(cli: &Cli, a: &FeaturesArgs) -> Result<()> {
    let mut run = Run::new(
        cli,
        "features",
        ConfigOverrides {
            context_duration_s: a.duration,
            min_messages: a.min_messages,
            ..Default::default()
        },
    )?;
    run.input(&a.input);
    let (events, stats) = read_events(&a.input)?;
    let n_events = events.len() as u64;
    let build = build_profiles(events, &run.config, false);
    let matrix = build.profiles.snapshot(run.config.min_messages);
    matrix
        .write_csv(create_output(&a.output)?)
        .map_err(|e| output_err(&a.output, e))?;
    run.manifest.count("lines", stats.lines);
    run.manifest.count("events", n_events);
    run.manifest.count("users", build.profiles.len() as u64);
    run.manifest.count("eligible_users", matrix.len() as u64);
    run.finish()
}

fn cmd_score(cli: &Cli, a: &ScoreArgs) -> Result<()> {
    let mut run = Run::new(cli, "score", scorer_overrides(&a.scorer))?;
    run.input(&a.input);
    let matrix = read_features(&a.input)?;
    let c = &run.config;
    let board = score_population(&matrix, &c.scorer, c.sample_size, c.seed)
        .map_err(|e| CliError::Input(e.to_string()))?;
    board
        .write_csv(create_output(&a.output)?)
        .map_err(|e| output_err(&a.output, e))?;
    let json = serde_json::to_string_pretty(&board.summary())
        .map_err(|e| CliError::Internal(e.to_string()))?;
    write_json_or_stdout(a.summary.as_deref(), &json)?;
    run.manifest.count("users", board.users.len() as u64);
    run.manifest.count("trolls", board.trolls() as u64);
    run.finish()
}

fn cmd_pca(cli: &Cli, a: &PcaArgs) -> Result<()> {
    let mut run = Run::new(cli, "pca", ConfigOverrides::default())?;
    run.input(&a.input);
    let matrix = read_features(&a.input)?;
    if matrix.is_empty() {
        return Err(CliError::Input(format!("{}: no rows", a.input.display())));
    }
    let m = rows_to_matrix(&matrix.rows);
    let pca = gram_svd(&m, a.center);
    let comps = a.components.indices(m.ncols());
    let proj = project(&m, &pca, &comps);

    let mut w = csv::Writer::from_writer(create_output(&a.output)?);
    let mut header = vec!["username".to_string()];
    header.extend(a.components.labels(m.ncols()));
    w.write_record(&header)
        .map_err(|e| output_err(&a.output, e))?;
    for (i, name) in matrix.usernames.iter().enumerate() {
        let mut rec = vec![name.clone()];
        rec.extend(proj.row(i).iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(|e| output_err(&a.output, e))?;
    }
    w.flush().map_err(|e| output_err(&a.output, e))?;

    let json = serde_json::json!({
        "singular_values": pca.singular_values,
        "rank_deficient": pca.rank_deficient,
        "centered": a.center,
        "components": a.components.labels(m.ncols()),
    });
    write_json_or_stdout(
        a.singular_values.as_deref(),
        &serde_json::to_string_pretty(&json).expect("json"),
    )?;
    run.manifest.count("rows", matrix.len() as u64);
    run.manifest.count("rank", pca.rank() as u64);
    run.finish()
}

/// First and last timestamps of a log, for aligning probe activity.
fn log_span(path: &Path) -> Result<Option<(i64, i64)>> {
    let mut span: Option<(i64, i64)> = None;
    for line in open_input(path)?.lines() {
        let line = line.map_err(|e| input_err(path, e))?;
        if let Ok(ev) = parse_event(&line) {
            let t = ev.timestamp_ms;
            span = Some(span.map_or((t, t), |(a, b)| (a.min(t), b.max(t))));
        }
    }
    Ok(span)
}

fn probe_scenario(start_ms: i64, end_ms: i64, seed: u64) -> Scenario {
    let start = start_ms.div_euclid(20_000) * 20_000;
    Scenario {
        n_users: 0,
        troll_fraction: 0.0,
        duration_s: ((end_ms - start) / 1000).max(1) as u32,
        start_ms: start,
        seed,
        ..Scenario::default()
    }
}

fn cmd_online(cli: &Cli, a: &OnlineArgs) -> Result<()> {
    let mut overrides = scorer_overrides(&a.scorer);
    overrides.recluster_interval_s = a.recluster_interval;
    let mut run = Run::new(cli, "online", overrides)?;
    if !(a.speed >= 0.0 && a.speed.is_finite()) {
        return Err(CliError::Usage(
            "--speed must be a non-negative number".into(),
        ));
    }

    let source: Box<dyn Iterator<Item = SourceItem> + Send> = match (&a.replay, &a.listen) {
        (Some(path), _) => {
            run.input(path);
            Box::new(ReplaySource::new(open_input(path)?, a.speed))
        }
        (None, Some(addr)) => {
            let opts = TcpSourceOptions {
                max_connections: a.once.then_some(1),
                ..Default::default()
            };
            let (local, lines) = tcp_source(addr.as_str(), opts)
                .map_err(|e| CliError::Input(format!("cannot listen on {addr}: {e}")))?;
            log::info!("listening on {local}");
            Box::new(lines)
        }
        (None, None) => return Err(CliError::Usage("need --listen or --replay".into())),
    };

    let mut expected: Vec<(String, Label)> = Vec::new();
    let source: Box<dyn Iterator<Item = SourceItem> + Send> = if a.inject_probes {
        let (start, end) = match &a.replay {
            Some(path) => log_span(path)?.unwrap_or((0, 0)),
            None => {
                let now = wall_clock_ms();
                (now, now + i64::from(a.probe_duration) * 1000)
            }
        };
        let probes = default_probes();
        let scenario = probe_scenario(start, end, run.config.seed);
        let events = generate_probe_events(&scenario, &probes);
        run.manifest.count("probe_events", events.len() as u64);
        if let Some(path) = &a.truth {
            let truth: Vec<GroundTruth> = probes
                .iter()
                .map(|p| GroundTruth {
                    username: p.username.clone(),
                    label: p.label,
                    behavior: p.behavior,
                })
                .collect();
            write_truth(&truth, create_output(path)?).map_err(|e| output_err(path, e))?;
        }
        expected = probes
            .iter()
            .map(|p| (p.username.clone(), p.label))
            .collect();
        Box::new(inject_probe_users(events, source))
    } else {
        source
    };

    let writer: Box<dyn Write + Send> = match &a.output {
        Some(p) => Box::new(create_output(p)?),
        None => Box::new(io::stdout()),
    };
    let labels = LabelHandle::new();
    let outcome = run_online_with(source, &run.config, JsonLinesSink(writer), labels.clone())
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let mut sink = outcome.sink;
    let mut failed = 0;
    for ev in probe_checks(&labels.current(), &expected) {
        if let chatwatch::online::EngineEvent::ProbeCheck {
            ok: false,
            username,
            ..
        } = &ev
        {
            log::warn!("probe {username} mislabeled");
            failed += 1;
        }
        sink.emit(&ev)
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    run.manifest.count("lines", outcome.stats.lines);
    run.manifest.count("malformed", outcome.stats.malformed);
    run.manifest
        .count("late_dropped", outcome.stats.late_dropped);
    run.manifest.count("epochs", outcome.epochs);
    run.manifest.count("probe_failures", failed);
    run.finish()
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let scenario = Scenario {
        n_users: a.users,
        troll_fraction: a.troll_fraction,
        duration_s: a.duration,
        seed: cli.seed.unwrap_or(0),
        ..Scenario::default()
    };
    scenario.validate().map_err(CliError::Usage)?;
    let mut stream = generate_stream(&scenario);
    if a.probes {
        let probes = default_probes();
        stream
            .events
            .extend(generate_probe_events(&scenario, &probes));
        stream.events.sort_by(|x, y| {
            (x.timestamp_ms, &x.username, &x.raw_msg).cmp(&(
                y.timestamp_ms,
                &y.username,
                &y.raw_msg,
            ))
        });
        stream.truth.extend(probes.into_iter().map(|p| GroundTruth {
            username: p.username,
            label: p.label,
            behavior: p.behavior,
        }));
    }
    write_stream(&stream.events, create_output(&a.out)?).map_err(|e| output_err(&a.out, e))?;
    if let Some(path) = &a.truth {
        write_truth(&stream.truth, create_output(path)?).map_err(|e| output_err(path, e))?;
    }
    let mut manifest = RunManifest::new("synth", &scenario, Some(scenario.seed));
    manifest.count("events", stream.events.len() as u64);
    manifest.count("users", stream.truth.len() as u64);
    manifest.count(
        "trolls",
        stream.truth.iter().filter(|t| t.label.is_troll()).count() as u64,
    );
    if let Some(p) = &cli.manifest {
        std::fs::write(p, manifest.to_json()).map_err(|e| output_err(p, e))?;
    }
    Ok(())
}

fn cmd_report(cli: &Cli, a: &ReportArgs) -> Result<()> {
    let mut run = Run::new(
        cli,
        "report",
        ConfigOverrides {
            threshold: a.threshold,
            sample_size: a.sample,
            ..Default::default()
        },
    )?;
    run.input(&a.input);
    let matrix = read_features(&a.input)?;
    let c = &run.config;
    let report = build_report(
        &matrix,
        c.scorer.threshold,
        &default_rules(),
        c.sample_size,
        c.seed,
    );
    report
        .write_dir(&a.out)
        .map_err(|e| output_err(&a.out, e))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    run.manifest.count("users", report.n as u64);
    run.manifest.count("runs", report.runs.len() as u64);
    run.finish()
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::ParseStats(a) => cmd_parse_stats(cli, a),
        Command::Contexts(a) => cmd_contexts(cli, a),
        Command::Features(a) => cmd_features(cli, a),
        Command::Score(a) => cmd_score(cli, a),
        Command::Pca(a) => cmd_pca(cli, a),
        Command::Online(a) => cmd_online(cli, a),
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Report(a) => cmd_report(cli, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
