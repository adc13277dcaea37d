//! Operator command line. Talks to the service over HTTP only.
//!
//! Exit codes: 0 success, 1 API or transport error, 64 usage error.
//! `study watch` exits 2 when the study was canceled and 3 when it
//! finished with failed experiments.

mod studyfile;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use maci_core::analysis::{CubeQuery, ExportFormat, Filter, Predicate, Reducer, ReducerMap, ParetoQuery};
use maci_core::model::{format_number, Direction, ParamValue, StudyId, StudyStatus, StudyTemplate};
use maci_core::orchestrator::StudyProgress;
use maci_core::{estimate_duration, instance_count};

use crate::client::{ApiClient, ClientError};
pub use studyfile::{load_study_file, load_template_file, LoadedStudy, StudyFile, StudySpec, TemplateSource, TemplateSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_API: i32 = 1;
pub const EXIT_CANCELED: i32 = 2;
pub const EXIT_FAILED: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "maci", version, about = "Manage experiment studies on a MACI service")]
pub struct Cli {
    /// Service root URL.
    #[arg(long, env = "MACI_ENDPOINT", global = true)]
    pub endpoint: Option<String>,
    /// Bearer token.
    #[arg(long, env = "MACI_TOKEN", global = true, hide_env_values = true)]
    pub token: Option<String>,
    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Template operations.
    #[command(subcommand)]
    Template(TemplateCommand),
    /// Study operations.
    #[command(subcommand)]
    Study(StudyCommand),
    /// Write a study's result frame as CSV or JSONL.
    Export(ExportArgs),
    /// Filter, group and summarise a metric.
    Cube(CubeArgs),
    /// Pareto frontier of two metrics.
    Pareto(ParetoArgs),
    /// Worker operations.
    #[command(subcommand)]
    Worker(WorkerCommand),
}

#[derive(Debug, Subcommand)]
pub enum TemplateCommand {
    /// Upload a template (or the template of a study file).
    Push { file: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum StudyCommand {
    /// Create a study from a study file.
    Create {
        file: PathBuf,
        /// Seconds one experiment takes, for the duration estimate.
        #[arg(long)]
        per_experiment_s: Option<f64>,
        /// Workers running in parallel, for the duration estimate.
        #[arg(long, default_value_t = 1)]
        workers: u32,
    },
    Start { id: String },
    /// Poll progress until the study ends.
    Watch {
        id: String,
        #[arg(long, default_value_t = 2.0)]
        interval_s: f64,
    },
    Cancel { id: String },
}

#[derive(Debug, Subcommand)]
pub enum WorkerCommand {
    List,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    pub id: String,
    #[arg(long, default_value = "csv", value_parser = ["csv", "jsonl"])]
    pub format: String,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub include_failed: bool,
}

#[derive(Debug, Args)]
pub struct CubeArgs {
    pub id: String,
    #[arg(long)]
    pub metric: String,
    #[arg(long, value_parser = parse_reducer, default_value = "last")]
    pub reducer: Reducer,
    /// Comma-separated parameter names.
    #[arg(long, value_delimiter = ',')]
    pub group_by: Vec<String>,
    /// `p=v` (equals), `p=v1|v2` (one of) or `p=lo..hi` (inclusive range).
    #[arg(long = "filter")]
    pub filters: Vec<String>,
    #[arg(long)]
    pub include_failed: bool,
}

#[derive(Debug, Args)]
pub struct ParetoArgs {
    pub id: String,
    /// `metric[:max|:min]`; without a direction the declared one is used.
    #[arg(long)]
    pub x: String,
    #[arg(long)]
    pub y: String,
    #[arg(long, value_delimiter = ',')]
    pub group_by: Vec<String>,
    /// `metric:reducer`, repeatable.
    #[arg(long = "reducer")]
    pub reducers: Vec<String>,
    #[arg(long)]
    pub include_failed: bool,
}

fn parse_reducer(s: &str) -> Result<Reducer, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown reducer {s:?}; expected last, first, mean, max, min or sum"))
}

fn parse_axis(s: &str) -> Result<(String, Option<Direction>), String> {
    match s.split_once(':') {
        None => Ok((s.to_string(), None)),
        Some((m, d)) => {
            let dir = match d {
                "max" | "maximize" => Direction::Maximize,
                "min" | "minimize" => Direction::Minimize,
                other => return Err(format!("unknown direction {other:?}; expected max or min")),
            };
            Ok((m.to_string(), Some(dir)))
        }
    }
}

/// Types a filter literal against the parameter's declared values, falling
/// back to bool, then number, then text.
fn typed_value(template: Option<&StudyTemplate>, parameter: &str, text: &str) -> ParamValue {
    if let Some(v) = template
        .and_then(|t| t.parameter(parameter))
        .and_then(|p| p.values.iter().find(|v| v.canonical_text() == text))
    {
        return v.clone();
    }
    match text {
        "true" => ParamValue::Bool(true),
        "false" => ParamValue::Bool(false),
        _ => text
            .parse::<f64>()
            .ok()
            .and_then(|x| ParamValue::number(x).ok())
            .unwrap_or_else(|| ParamValue::text(text)),
    }
}

pub fn parse_filter(template: Option<&StudyTemplate>, spec: &str) -> Result<Filter, String> {
    let (parameter, rhs) = spec
        .split_once('=')
        .ok_or_else(|| format!("filter {spec:?} is not of the form parameter=value"))?;
    let has_literal = |s: &str| template.and_then(|t| t.parameter(parameter)).is_some_and(|p| p.values.iter().any(|v| v.canonical_text() == s));
    let predicate = if let Some((lo, hi)) = rhs.split_once("..").filter(|_| !has_literal(rhs)) {
        let lo: f64 = lo.parse().map_err(|_| format!("bad range bound {lo:?}"))?;
        let hi: f64 = hi.parse().map_err(|_| format!("bad range bound {hi:?}"))?;
        Predicate::Range { lo, hi }
    } else if rhs.contains('|') && !has_literal(rhs) {
        Predicate::In { values: rhs.split('|').map(|v| typed_value(template, parameter, v)).collect() }
    } else {
        Predicate::Equals { value: typed_value(template, parameter, rhs) }
    };
    Ok(Filter { parameter: parameter.to_string(), predicate })
}

enum Failure {
    Usage(String),
    Api(ClientError),
    Io(std::io::Error),
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        Failure::Api(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e)
    }
}

type CmdResult = Result<i32, Failure>;

/// Renders rows as a left-aligned text table.
fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    for row in rows {
        out += &line(row.iter().map(String::as_str).collect());
    }
    out
}

fn json_line(out: &mut dyn Write, value: &impl serde::Serialize) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(format_number).unwrap_or_else(|| "-".into())
}

fn fmt_duration(secs: f64) -> String {
    let s = secs.round() as u64;
    format!("{}h {:02}m {:02}s", s / 3600, (s % 3600) / 60, s % 60)
}

fn progress_line(p: &StudyProgress) -> String {
    let c = &p.counts;
    let eta = p.eta_s.map(|e| format!(" eta {}", fmt_duration(e))).unwrap_or_default();
    format!(
        "{}: {}/{} finished, {} failed, {} running, {} leased, {} pending, {} canceled ({:.1}/min){eta}",
        serde_json::to_value(p.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
        c.finished,
        p.total,
        c.failed,
        c.running,
        c.leased,
        c.pending,
        c.canceled,
        p.throughput_per_min,
    )
}

struct Ctx<'a> {
    client: ApiClient,
    json: bool,
    out: &'a mut dyn Write,
}

impl Ctx<'_> {
    async fn template_push(&mut self, file: PathBuf) -> CmdResult {
        let t = load_template_file(&file).map_err(|e| Failure::Usage(e.to_string()))?;
        let created = self.client.create_template(&t).await?;
        if self.json {
            json_line(self.out, &created)?;
        } else {
            writeln!(self.out, "template {}", created.id)?;
        }
        Ok(EXIT_OK)
    }

    async fn study_create(&mut self, file: PathBuf, per_experiment_s: Option<f64>, workers: u32) -> CmdResult {
        let loaded = load_study_file(&file).map_err(|e| Failure::Usage(e.to_string()))?;
        if let Some(per) = per_experiment_s {
            if !(per.is_finite() && per > 0.0) || workers == 0 {
                return Err(Failure::Usage("--per-experiment-s must be positive and --workers at least 1".into()));
            }
        }
        let template = match &loaded.template {
            TemplateSource::New(t) => self.client.create_template(t).await?,
            TemplateSource::Existing(id) => self.client.template(id).await?,
        };
        let study = self.client.create_study(&loaded.new_study(template.id.clone())).await?;
        let count = instance_count(&template, &study).unwrap_or(0);
        let estimate = match per_experiment_s {
            Some(per) => Some(
                estimate_duration(&study, &template, per, workers)
                    .map_err(|e| Failure::Usage(e.to_string()))?,
            ),
            None => None,
        };
        if self.json {
            json_line(
                self.out,
                &serde_json::json!({
                    "study": study,
                    "template_id": template.id,
                    "experiments": count,
                    "estimated_duration_s": estimate,
                }),
            )?;
        } else {
            writeln!(self.out, "study {}", study.id)?;
            writeln!(self.out, "{count} experiments")?;
            if let Some(secs) = estimate {
                writeln!(
                    self.out,
                    "estimated duration: {} s ({}) with {workers} worker(s) at {} s per experiment",
                    format_number(secs),
                    fmt_duration(secs),
                    format_number(per_experiment_s.unwrap_or_default()),
                )?;
            }
        }
        Ok(EXIT_OK)
    }

    fn print_progress(&mut self, p: &StudyProgress) -> std::io::Result<()> {
        if self.json {
            serde_json::to_writer(&mut *self.out, p)?;
            writeln!(self.out)
        } else {
            writeln!(self.out, "{}", progress_line(p))
        }
    }

    async fn study_watch(&mut self, id: StudyId, interval: Duration) -> CmdResult {
        loop {
            let p = self.client.progress(&id).await?;
            self.print_progress(&p)?;
            self.out.flush()?;
            match p.status {
                StudyStatus::Canceled => return Ok(EXIT_CANCELED),
                StudyStatus::Finished if p.counts.failed > 0 => return Ok(EXIT_FAILED),
                StudyStatus::Finished => return Ok(EXIT_OK),
                StudyStatus::Draft | StudyStatus::Running => tokio::time::sleep(interval).await,
            }
        }
    }

    async fn export(&mut self, args: ExportArgs) -> CmdResult {
        let format: ExportFormat = args.format.parse().map_err(|e: maci_core::analysis::AnalysisError| Failure::Usage(e.to_string()))?;
        let bytes = self.client.export(&StudyId(args.id), format, args.include_failed).await?;
        match args.out {
            Some(path) => std::fs::write(path, bytes)?,
            None => self.out.write_all(&bytes)?,
        }
        Ok(EXIT_OK)
    }

    async fn template_of(&self, id: &StudyId) -> Result<StudyTemplate, Failure> {
        let study = self.client.study(id).await?;
        Ok(self.client.template(&study.template_id).await?)
    }

    async fn cube(&mut self, args: CubeArgs) -> CmdResult {
        let id = StudyId(args.id);
        let template = self.template_of(&id).await?;
        let filters = args
            .filters
            .iter()
            .map(|f| parse_filter(Some(&template), f))
            .collect::<Result<Vec<_>, _>>()
            .map_err(Failure::Usage)?;
        let query = CubeQuery {
            study_id: id,
            metric: args.metric,
            reducer: args.reducer,
            filters,
            group_by: args.group_by.clone(),
            include_failed: args.include_failed,
        };
        let groups = self.client.cube(&query).await?;
        if self.json {
            json_line(self.out, &groups)?;
            return Ok(EXIT_OK);
        }
        let mut header: Vec<&str> = args.group_by.iter().map(String::as_str).collect();
        header.extend(["count", "mean", "std", "min", "q1", "median", "q3", "max", "outliers"]);
        let rows: Vec<Vec<String>> = groups
            .iter()
            .map(|g| {
                let s = &g.stats;
                let mut row: Vec<String> = g.group_key.values().map(|v| v.canonical_text()).collect();
                row.push(s.count.to_string());
                row.extend([Some(s.mean), s.std, Some(s.min), Some(s.q1), Some(s.median), Some(s.q3), Some(s.max)].map(fmt_opt));
                row.push(s.outliers.len().to_string());
                row
            })
            .collect();
        write!(self.out, "{}", table(&header, &rows))?;
        Ok(EXIT_OK)
    }

    async fn pareto(&mut self, args: ParetoArgs) -> CmdResult {
        let (metric_x, dir_x) = parse_axis(&args.x).map_err(Failure::Usage)?;
        let (metric_y, dir_y) = parse_axis(&args.y).map_err(Failure::Usage)?;
        let mut reducers = ReducerMap::new();
        for spec in &args.reducers {
            let (m, r) = spec
                .split_once(':')
                .ok_or_else(|| Failure::Usage(format!("reducer {spec:?} is not of the form metric:reducer")))?;
            reducers.insert(m.to_string(), parse_reducer(r).map_err(Failure::Usage)?);
        }
        let query = ParetoQuery {
            study_id: StudyId(args.id),
            metric_x: metric_x.clone(),
            dir_x,
            metric_y: metric_y.clone(),
            dir_y,
            group_by: args.group_by,
            reducers,
            include_failed: args.include_failed,
        };
        let points = self.client.pareto(&query).await?;
        if self.json {
            json_line(self.out, &points)?;
            return Ok(EXIT_OK);
        }
        let rows: Vec<Vec<String>> = points
            .iter()
            .map(|p| {
                let label = match (&p.group_key, &p.experiment_id) {
                    (Some(k), _) => k.iter().map(|(n, v)| format!("{n}={}", v.canonical_text())).collect::<Vec<_>>().join(" "),
                    (None, Some(e)) => e.to_string(),
                    (None, None) => String::new(),
                };
                vec![format_number(p.x), format_number(p.y), if p.on_frontier { "*".into() } else { String::new() }, label]
            })
            .collect();
        write!(self.out, "{}", table(&[&metric_x, &metric_y, "frontier", "point"], &rows))?;
        Ok(EXIT_OK)
    }

    async fn worker_list(&mut self) -> CmdResult {
        let workers = self.client.workers().await?;
        if self.json {
            json_line(self.out, &workers)?;
            return Ok(EXIT_OK);
        }
        let rows: Vec<Vec<String>> = workers
            .iter()
            .map(|w| {
                vec![
                    w.id.to_string(),
                    serde_json::to_value(w.state).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                    w.labels.iter().cloned().collect::<Vec<_>>().join(","),
                    w.last_heartbeat.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                    w.current_experiment.as_ref().map(|e| e.to_string()).unwrap_or_default(),
                ]
            })
            .collect();
        write!(self.out, "{}", table(&["id", "state", "labels", "last_heartbeat", "experiment"], &rows))?;
        Ok(EXIT_OK)
    }

    async fn dispatch(&mut self, command: Command) -> CmdResult {
        match command {
            Command::Template(TemplateCommand::Push { file }) => self.template_push(file).await,
            Command::Study(StudyCommand::Create { file, per_experiment_s, workers }) => {
                self.study_create(file, per_experiment_s, workers).await
            }
            Command::Study(StudyCommand::Start { id }) => {
                let p = self.client.start_study(&StudyId(id)).await?;
                self.print_progress(&p)?;
                Ok(EXIT_OK)
            }
            Command::Study(StudyCommand::Watch { id, interval_s }) => {
                if !(interval_s.is_finite() && interval_s > 0.0) {
                    return Err(Failure::Usage("--interval-s must be positive".into()));
                }
                self.study_watch(StudyId(id), Duration::from_secs_f64(interval_s)).await
            }
            Command::Study(StudyCommand::Cancel { id }) => {
                let p = self.client.cancel_study(&StudyId(id)).await?;
                self.print_progress(&p)?;
                Ok(EXIT_OK)
            }
            Command::Export(args) => self.export(args).await,
            Command::Cube(args) => self.cube(args).await,
            Command::Pareto(args) => self.pareto(args).await,
            Command::Worker(WorkerCommand::List) => self.worker_list().await,
        }
    }
}

/// Runs the CLI with `args` (including the program name) and returns the
/// process exit code.
pub async fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind::*;
            let (code, sink): (i32, &mut dyn Write) = match e.kind() {
                DisplayHelp | DisplayVersion => (EXIT_OK, out),
                _ => (EXIT_USAGE, err),
            };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    let Some(endpoint) = cli.endpoint.clone() else {
        let _ = writeln!(err, "error: no endpoint; pass --endpoint or set MACI_ENDPOINT");
        return EXIT_USAGE;
    };
    let mut ctx = Ctx { client: ApiClient::new(&endpoint, cli.token.clone()), json: cli.json, out };
    match ctx.dispatch(cli.command).await {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Api(ClientError::Api(e))) => {
            let _ = writeln!(err, "error: {} ({}): {}", e.code, e.status, e.message);
            for d in &e.details {
                let _ = writeln!(err, "  {}: {}", d.field, d.reason);
            }
            EXIT_API
        }
        Err(Failure::Api(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_API
        }
        Err(Failure::Io(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_API
        }
    }
}
