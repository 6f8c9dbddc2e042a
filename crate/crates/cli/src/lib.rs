//! Argument handling and command execution for the `tokenbinder` binary.
//!
//! Every verb resolves one [`RunConfig`] from an optional config file, the
//! `--set` overrides and `--seed`, then writes its artifacts under `--out`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use log::info;
use tokenbinder_core::data::save_gallery;
use tokenbinder_core::experiment::{
    benchmark_data, encode_split, evaluate_model, find_report, run_ablation, save_metrics_csv, write_ablation_csv,
    write_query_csv, AblationRow, Sweep,
};
use tokenbinder_core::metrics::{Direction, MetricsReport, Stage};
use tokenbinder_core::model::Model;
use tokenbinder_core::retrieval::rank_full;
use tokenbinder_core::training::{objective_gradcheck, save_loss_log, train_loop};
use tokenbinder_core::{data::load_gallery, Error, RunConfig};

/// Environment variable holding the log filter (`error` … `trace`).
pub const LOG_ENV: &str = "TOKENBINDER_LOG";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Verb {
    /// Train on the synthetic benchmark; write checkpoints and the loss log.
    Train,
    /// Evaluate both stages in both directions; write metrics.csv.
    Eval,
    /// Rank the gallery for one query; write query.csv.
    Query,
    /// Finite-difference check of every parameter gradient on a toy model.
    Gradcheck,
    /// Train and evaluate one configuration per swept value; write ablation.csv.
    Ablate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    T2v,
    V2t,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::T2v => Direction::TextToVideo,
            DirectionArg::V2t => Direction::VideoToText,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tokenbinder", version, about = "Two-stage text-video retrieval on a synthetic benchmark")]
pub struct Args {
    pub verb: Verb,
    /// Config file of `key: value` lines; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a config key. A comma-separated list sweeps the key (ablate only).
    #[arg(long = "set", value_name = "KEY=V[,V...]")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run the command twice and fail unless every artifact is byte-identical.
    #[arg(long)]
    pub deterministic: bool,
    /// Trained parameters for eval and query; a fresh model otherwise.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Query index within the held-out split.
    #[arg(long, default_value_t = 0)]
    pub query: usize,
    #[arg(long, value_enum, default_value = "t2v")]
    pub direction: DirectionArg,
    /// Rank against a saved gallery instead of encoding the held-out split.
    #[arg(long, value_name = "PATH")]
    pub gallery: Option<PathBuf>,
    /// Ablate the component toggles (indicators, stage-1 scores, Gumbel).
    #[arg(long)]
    pub components: bool,
    /// Finite-difference step for gradcheck.
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    /// Maximum relative error accepted by gradcheck.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

/// A validated invocation.
#[derive(Clone, Debug)]
pub struct Command {
    pub verb: Verb,
    pub config_path: Option<PathBuf>,
    pub config: RunConfig,
    /// Single-valued overrides, already applied to `config`.
    pub overrides: Vec<(String, String)>,
    /// Ablation axes in command-line order.
    pub sweeps: Vec<Sweep>,
    pub out: PathBuf,
    pub deterministic: bool,
    pub checkpoint: Option<PathBuf>,
    pub query: usize,
    pub direction: Direction,
    pub gallery: Option<PathBuf>,
    pub eps: f64,
    pub tol: f64,
}

#[derive(Debug)]
pub enum CliError {
    /// `--help` or `--version` text; printed to stdout, exit status 0.
    Help(String),
    /// Bad invocation; exit status 2.
    Usage(String),
    /// A requested check failed; exit status 1.
    CheckFailed(String),
    /// Runtime failure; exit status 1.
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Help(_) => 0,
            CliError::Usage(_) => 2,
            CliError::CheckFailed(_) | CliError::Core(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Help(m) => write!(f, "{m}"),
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::ConfigParse { .. } | Error::Usage(_) => CliError::Usage(e.to_string()),
            other => CliError::Core(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Split `KEY=V[,V...]`, checking the key.
fn parse_override(raw: &str) -> CliResult<(String, Vec<String>)> {
    let (key, values) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{raw}`")))?;
    let key = key.trim();
    if !RunConfig::is_known_key(key) {
        return Err(CliError::Usage(format!("--set {raw}: unknown config key `{key}`")));
    }
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if values.iter().any(String::is_empty) {
        return Err(CliError::Usage(format!("--set {raw}: empty value")));
    }
    Ok((key.to_string(), values))
}

/// Parse `argv` (program name first) into a validated [`Command`].
pub fn parse_args<I, T>(argv: I) -> CliResult<Command>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = Args::try_parse_from(argv).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => CliError::Help(e.to_string()),
        _ => CliError::Usage(e.to_string().trim_start_matches("error: ").to_string()),
    })?;
    command_from_args(args)
}

pub fn command_from_args(args: Args) -> CliResult<Command> {
    let mut config = match &args.config {
        Some(p) => {
            if !p.is_file() {
                return Err(CliError::Usage(format!("--config {}: no such file", p.display())));
            }
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let mut overrides = Vec::new();
    let mut sweeps = Vec::new();
    for raw in &args.set {
        let (key, values) = parse_override(raw)?;
        if values.len() == 1 {
            config
                .set(&key, &values[0])
                .map_err(|e| CliError::Usage(format!("--set {raw}: {e}")))?;
            overrides.push((key, values[0].clone()));
        } else if args.verb == Verb::Ablate {
            sweeps.push(Sweep::Key { key, values });
        } else {
            return Err(CliError::Usage(format!("--set {raw}: value lists are only accepted by ablate")));
        }
    }
    if args.components {
        if args.verb != Verb::Ablate {
            return Err(CliError::Usage("--components is only accepted by ablate".into()));
        }
        sweeps.insert(0, Sweep::Components);
    }
    if args.verb == Verb::Ablate {
        if sweeps.is_empty() {
            return Err(CliError::Usage(
                "ablate needs --components or at least one --set KEY=V1,V2,...".into(),
            ));
        }
        for s in &sweeps {
            s.configs(&config)
                .map_err(|e| CliError::Usage(format!("sweep {s:?}: {e}")))?;
        }
    }
    if !(args.eps > 0.0) || !(args.tol > 0.0) {
        return Err(CliError::Usage("--eps and --tol must be positive".into()));
    }
    Ok(Command {
        verb: args.verb,
        config_path: args.config,
        config,
        overrides,
        sweeps,
        out: args.out,
        deterministic: args.deterministic,
        checkpoint: args.checkpoint,
        query: args.query,
        direction: args.direction.into(),
        gallery: args.gallery,
        eps: args.eps,
        tol: args.tol,
    })
}

/// Run `cmd`; with `--deterministic`, run it a second time into a scratch
/// directory and compare every artifact byte for byte.
pub fn execute(cmd: &Command) -> CliResult<()> {
    run_once(cmd, &cmd.out)?;
    if cmd.deterministic {
        let scratch = cmd.out.join(".rerun");
        if scratch.exists() {
            fs::remove_dir_all(&scratch)?;
        }
        run_once(cmd, &scratch)?;
        let mismatches = compare_dirs(&cmd.out, &scratch)?;
        fs::remove_dir_all(&scratch)?;
        if !mismatches.is_empty() {
            return Err(CliError::CheckFailed(format!(
                "artifacts differ between identical runs: {}",
                mismatches.join(", ")
            )));
        }
        println!("determinism: PASS (artifacts byte-identical across two runs)");
    }
    Ok(())
}

fn run_once(cmd: &Command, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cmd.config.to_text())?;
    match cmd.verb {
        Verb::Train => run_train(cmd, out),
        Verb::Eval => run_eval(cmd, out),
        Verb::Query => run_query(cmd, out),
        Verb::Gradcheck => run_gradcheck(cmd, out),
        Verb::Ablate => run_ablate(cmd, out),
    }
}

fn files_under(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.file_name().is_some_and(|n| n == ".rerun") {
            continue;
        }
        if path.is_dir() {
            files_under(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// Relative paths whose contents differ or exist on one side only.
fn compare_dirs(a: &Path, b: &Path) -> CliResult<Vec<String>> {
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    files_under(a, a, &mut fa)?;
    files_under(b, b, &mut fb)?;
    fa.sort();
    fb.sort();
    let mut bad = Vec::new();
    for f in &fa {
        if !fb.contains(f) || fs::read(a.join(f))? != fs::read(b.join(f))? {
            bad.push(f.display().to_string());
        }
    }
    bad.extend(fb.iter().filter(|f| !fa.contains(f)).map(|f| f.display().to_string()));
    Ok(bad)
}

fn load_model(cmd: &Command) -> CliResult<Model> {
    Ok(match &cmd.checkpoint {
        Some(p) => Model::from_checkpoint(&cmd.config, p)?,
        None => Model::init(&cmd.config)?,
    })
}

fn run_train(cmd: &Command, out: &Path) -> CliResult<()> {
    let (train, _) = benchmark_data(&cmd.config)?;
    let model = Model::init(&cmd.config)?;
    let outcome = train_loop(&train, model, Some(&out.join("checkpoints")))?;
    save_loss_log(&outcome.log, &out.join("loss_log.csv"))?;
    outcome.model.save_checkpoint(&out.join("model.ckpt"))?;
    for (e, r) in outcome.epochs.iter().enumerate() {
        println!("epoch {}: combined loss {:.6}", e + 1, r.combined);
    }
    println!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}

fn format_table(reports: &[MetricsReport]) -> String {
    let mut s = format!(
        "{:<4} {:<11} {:>7} {:>7} {:>7} {:>6} {:>8}\n",
        "dir", "stage", "R@1", "R@5", "R@10", "MdR", "MnR"
    );
    for r in reports {
        s.push_str(&format!(
            "{:<4} {:<11} {:>7.2} {:>7.2} {:>7.2} {:>6.1} {:>8.2}\n",
            r.direction.to_string(),
            r.stage.to_string(),
            r.r1,
            r.r5,
            r.r10,
            r.median_rank,
            r.mean_rank
        ));
    }
    s
}

/// Invariants every report must satisfy.
fn check_reports(reports: &[MetricsReport]) -> Vec<String> {
    reports
        .iter()
        .filter(|r| !(r.r1 <= r.r5 && r.r5 <= r.r10 && r.r10 <= 100.0 && r.median_rank >= 1.0 && r.mean_rank >= 1.0))
        .map(|r| format!("{} {} violates recall monotonicity or rank bounds", r.direction, r.stage))
        .collect()
}

fn run_eval(cmd: &Command, out: &Path) -> CliResult<()> {
    let model = load_model(cmd)?;
    let (_, test) = benchmark_data(&cmd.config)?;
    let reports = evaluate_model(&model, &test)?;
    save_metrics_csv(&reports, &out.join("metrics.csv"))?;
    print!("{}", format_table(&reports));
    let mut failures = check_reports(&reports);
    if cmd.checkpoint.is_none() {
        for d in [Direction::TextToVideo, Direction::VideoToText] {
            let broad = find_report(&reports, d, Stage::BroadOnly).map(MetricsReport::csv_fields);
            let two = find_report(&reports, d, Stage::TwoStage).map(MetricsReport::csv_fields);
            if broad != two {
                failures.push(format!("{d}: untrained two-stage ranking differs from broad-only"));
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(failures.join("; ")))
    }
}

fn run_query(cmd: &Command, out: &Path) -> CliResult<()> {
    let model = load_model(cmd)?;
    let (_, test) = benchmark_data(&cmd.config)?;
    if cmd.query >= test.len() {
        return Err(CliError::Usage(format!(
            "--query {} outside the {} held-out pairs",
            cmd.query,
            test.len()
        )));
    }
    let enc = encode_split(&model, &test)?;
    let (queries, encoded) = match cmd.direction {
        Direction::TextToVideo => (&enc.text_queries, &enc.video_gallery),
        Direction::VideoToText => (&enc.video_queries, &enc.text_gallery),
    };
    let gallery = match &cmd.gallery {
        Some(p) => load_gallery(p)?,
        None => {
            let path = out.join(format!("gallery_{}.bin", cmd.direction));
            save_gallery(encoded, &path)?;
            load_gallery(&path)?
        }
    };
    let net = model.fusion(cmd.direction);
    let result = rank_full(&queries[cmd.query], &gallery, &net, &model.params, cmd.config.model.k)?;
    let path = out.join("query.csv");
    write_query_csv(&result, &gallery, std::io::BufWriter::new(fs::File::create(&path)?))?;
    let top: Vec<String> = result
        .order
        .iter()
        .take(10)
        .map(|&i| gallery.entries()[i].id.to_string())
        .collect();
    println!("query {} ({}): top ids {}", cmd.query, cmd.direction, top.join(" "));
    println!("wrote {}", path.display());
    Ok(())
}

fn run_gradcheck(cmd: &Command, out: &Path) -> CliResult<()> {
    let report = objective_gradcheck(&cmd.config, cmd.eps)?;
    let mut csv = String::from("parameter,max_rel_error\n");
    for (name, err) in &report.per_param {
        csv.push_str(&format!("{name},{err:.6e}\n"));
    }
    fs::write(out.join("gradcheck.csv"), csv)?;
    let max = report.max_rel_error();
    let (worst, _) = report.worst().unwrap_or(("-", 0.0));
    let verdict = if report.passes(cmd.tol) { "PASS" } else { "FAIL" };
    println!(
        "gradcheck: {verdict} max relative error {max:.3e} (worst {worst}, tolerance {:.1e}, eps {:.1e}, {} parameters)",
        cmd.tol,
        cmd.eps,
        report.per_param.len()
    );
    if report.passes(cmd.tol) {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("max relative error {max:.3e} >= {:.1e}", cmd.tol)))
    }
}

fn run_ablate(cmd: &Command, out: &Path) -> CliResult<()> {
    let mut rows: Vec<AblationRow> = Vec::new();
    for sweep in &cmd.sweeps {
        info!("sweep {sweep:?}");
        rows.extend(run_ablation(&cmd.config, sweep)?);
    }
    let path = out.join("ablation.csv");
    write_ablation_csv(&rows, std::io::BufWriter::new(fs::File::create(&path)?))?;
    for r in &rows {
        let t2v = find_report(&r.metrics, Direction::TextToVideo, Stage::TwoStage);
        let v2t = find_report(&r.metrics, Direction::VideoToText, Stage::TwoStage);
        println!(
            "{}={}: t2v R@1 {:.2}, v2t R@1 {:.2}",
            r.axis,
            r.value,
            t2v.map_or(f64::NAN, |m| m.r1),
            v2t.map_or(f64::NAN, |m| m.r1)
        );
    }
    println!("wrote {}", path.display());
    let failures: Vec<String> = rows.iter().flat_map(|r| check_reports(&r.metrics)).collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(failures.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_train_invocation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "").unwrap();
        let cmd = parse_args(["tokenbinder", "train", "--config", cfg.to_str().unwrap()]).unwrap();
        assert_eq!(cmd.verb, Verb::Train);
        assert_eq!(cmd.config_path.as_deref(), Some(cfg.as_path()));
        assert!(cmd.overrides.is_empty() && cmd.sweeps.is_empty());
    }

    #[test]
    fn ablate_list_becomes_sweep() {
        let cmd = parse_args(["tokenbinder", "ablate", "--set", "k=5,10,20"]).unwrap();
        assert_eq!(
            cmd.sweeps,
            vec![Sweep::Key {
                key: "k".into(),
                values: vec!["5".into(), "10".into(), "20".into()]
            }]
        );
    }

    #[test]
    fn indicator_cap_is_a_usage_error() {
        let err = parse_args(["tokenbinder", "eval", "--set", "indicator_count=7"]).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bad_invocations_name_the_problem() {
        let unknown_verb = parse_args(["tokenbinder", "fly"]).unwrap_err();
        assert!(unknown_verb.to_string().contains("fly"));
        let unknown_key = parse_args(["tokenbinder", "eval", "--set", "kk=1"]).unwrap_err();
        assert!(unknown_key.to_string().contains("kk"));
        let missing = parse_args(["tokenbinder", "train", "--config", "/nonexistent/run.cfg"]).unwrap_err();
        assert!(missing.to_string().contains("--config"));
        let list = parse_args(["tokenbinder", "train", "--set", "k=5,10"]).unwrap_err();
        assert!(list.to_string().contains("ablate"));
        assert!(parse_args(["tokenbinder", "ablate"]).is_err());
    }
}
