//! Batch command line. Every subcommand mirrors a service endpoint and runs
//! without a server.

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use netcomb_core::combined::{run, LinkSubset, RunControl, SimMode, SimOutput, SimRequest};
use netcomb_core::csi::{
    generate_or_fetch, restore_all, system_verify_restored, Codec, CsiDataset, CsiDatasetParams,
    CsiSample, IdentityCodec, NullCodec, UniformQuantizer,
};
use netcomb_core::rl::{Action, AntennaEnv};
use netcomb_core::scenario::{demo_scenario, load_scenario, serialize_scenario, Scenario};
use netcomb_core::store::DatasetStore;
use netcomb_core::traffic::{
    evaluate_transfer, synthesize_event, CellCountSeries, EventSpec, EventType, TopKCriterion,
};
use netcomb_core::users::{MobilityParams, Point};
use serde_json::json;

use crate::app::{evaluate, serve, AppState, EvaluateBody, SeriesInput, ServiceConfig};

#[derive(Debug, Parser)]
#[command(
    name = "netcomb",
    version,
    about = "Radio-network emulators: service and batch tools"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[command(flatten)]
        store: StoreArgs,
    },
    /// One simulation run written to a directory.
    Simulate(SimulateArgs),
    /// Print a hexagonal demo scenario document.
    Scenario {
        #[arg(long, default_value_t = 7)]
        sites: usize,
        #[arg(long, default_value_t = 3)]
        sectors: usize,
        /// Inter-site distance, metres.
        #[arg(long, default_value_t = 500.0)]
        isd: f64,
    },
    /// Drive the antenna-tuning environment
    #[command(subcommand)]
    Env(EnvCommand),
    /// CSI datasets and codec verification
    #[command(subcommand)]
    Csi(CsiCommand),
    /// Event traffic series and forecast scoring
    #[command(subcommand)]
    Traffic(TrafficCommand),
}

#[derive(Debug, Args)]
pub struct StoreArgs {
    #[arg(long, env = "NETCOMB_DATA_ROOT", default_value = "netcomb-data")]
    pub data_root: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    ProtocolStack,
    Coverage,
    LinkChannel,
}

impl From<ModeArg> for SimMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::ProtocolStack => SimMode::ProtocolStack,
            ModeArg::Coverage => SimMode::Coverage,
            ModeArg::LinkChannel => SimMode::LinkChannel,
        }
    }
}

#[derive(Debug, Args)]
pub struct PopulationArgs {
    /// Scenario document (JSON).
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub users: usize,
    /// Mobility parameters (JSON); random waypoint when absent.
    #[arg(long)]
    pub mobility: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl PopulationArgs {
    fn load(&self) -> Result<(Scenario, MobilityParams)> {
        let scenario = read_scenario(&self.scenario)?;
        let mobility = match &self.mobility {
            Some(p) => serde_json::from_str(&read(p)?)
                .with_context(|| format!("parsing {}", p.display()))?,
            None => MobilityParams::default(),
        };
        Ok((scenario, mobility))
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[command(flatten)]
    pub population: PopulationArgs,
    /// Seconds.
    #[arg(long)]
    pub duration: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Export only serving links (link-channel mode).
    #[arg(long)]
    pub serving_only: bool,
}

#[derive(Debug, Subcommand)]
pub enum EnvCommand {
    /// Fixed-action episode; one JSON line of indicators per step.
    Demo {
        #[command(flatten)]
        population: PopulationArgs,
        #[arg(long, default_value_t = 10)]
        steps: u64,
        /// Action file (JSON) applied at every step; scenario beams otherwise.
        #[arg(long)]
        action: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct CsiArgs {
    #[command(flatten)]
    pub population: PopulationArgs,
    /// Ticks sampled per user.
    #[arg(long, default_value_t = 10)]
    pub samples: usize,
    #[arg(long, default_value_t = 48)]
    pub subband_size: usize,
    #[command(flatten)]
    pub store: StoreArgs,
}

impl CsiArgs {
    fn params(&self) -> Result<CsiDatasetParams> {
        let (scenario, mobility) = self.population.load()?;
        Ok(CsiDatasetParams {
            scenario,
            n_users: self.population.users,
            mobility,
            seed: self.population.seed,
            samples_per_user: self.samples,
            subband_size: self.subband_size,
        })
    }

    fn dataset(&self) -> Result<CsiDataset> {
        let store = DatasetStore::open(&self.store.data_root)?;
        Ok(generate_or_fetch(&self.params()?, &store)?)
    }
}

#[derive(Debug, Subcommand)]
pub enum CsiCommand {
    /// Generate (or fetch from the store) a characteristic-vector dataset.
    Gen {
        #[command(flatten)]
        args: CsiArgs,
        /// Write the samples here as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// System verification of restored samples, from a file or a built-in codec.
    Verify {
        #[command(flatten)]
        args: CsiArgs,
        /// `identity`, `null` or `uniform:<bits>`.
        #[arg(long, default_value = "identity", conflicts_with = "restored")]
        codec: String,
        /// JSON array of restored samples, in dataset order.
        #[arg(long)]
        restored: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EventArg {
    Concert,
    Championship,
    Esports,
}

impl From<EventArg> for EventType {
    fn from(e: EventArg) -> Self {
        match e {
            EventArg::Concert => EventType::Concert,
            EventArg::Championship => EventType::Championship,
            EventArg::Esports => EventType::Esports,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CriterionArg {
    Peak,
    Total,
}

impl From<CriterionArg> for TopKCriterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Peak => TopKCriterion::Peak,
            CriterionArg::Total => TopKCriterion::Total,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum TrafficCommand {
    /// Synthesize per-cell user counts around an event.
    Synth {
        #[command(flatten)]
        population: PopulationArgs,
        /// Venue centre as `x,y` in metres.
        #[arg(long, value_parser = parse_point)]
        venue: Point,
        /// Event start and end, seconds.
        #[arg(long)]
        start: f64,
        #[arg(long)]
        end: f64,
        #[arg(long, value_enum, default_value = "concert")]
        event: EventArg,
        #[arg(long)]
        peak_strength: Option<f64>,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a forecast against the truth, or a baseline built from `--train`
    /// histories when no `--pred` is given.
    Eval {
        #[arg(long, required_unless_present = "train")]
        pred: Option<PathBuf>,
        #[arg(long)]
        train: Vec<PathBuf>,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, value_enum, default_value = "peak")]
        criterion: CriterionArg,
        #[arg(long)]
        aligned: bool,
    },
}

fn parse_point(s: &str) -> Result<Point, String> {
    let (x, y) = s.split_once(',').ok_or("expected x,y")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok(Point::new(p(x)?, p(y)?))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_scenario(path: &Path) -> Result<Scenario> {
    load_scenario(&read(path)?).with_context(|| format!("loading scenario {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Prints a line to stdout. A closed pipe is not an error.
fn say(text: &str) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write(p, text),
        None => say(text),
    }
}

pub fn parse_codec(spec: &str) -> Result<Box<dyn Codec>> {
    Ok(match spec {
        "identity" => Box::new(IdentityCodec),
        "null" => Box::new(NullCodec),
        other => match other.strip_prefix("uniform:") {
            Some(bits) => Box::new(UniformQuantizer {
                bits: bits.parse()?,
            }),
            None => bail!("unknown codec `{other}`"),
        },
    })
}

pub fn run_cli(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Serve { host, port, store } => serve_blocking(&host, port, store.data_root),
        Command::Simulate(args) => simulate(args),
        Command::Scenario {
            sites,
            sectors,
            isd,
        } => say(&serialize_scenario(&demo_scenario(sites, sectors, isd))),
        Command::Env(EnvCommand::Demo {
            population,
            steps,
            action,
            out,
        }) => env_demo(population, steps, action, out),
        Command::Csi(CsiCommand::Gen { args, out }) => {
            let ds = args.dataset()?;
            if let Some(p) = out {
                write(&p, &serde_json::to_string(&ds.samples)?)?;
            }
            say(&json!({
                "key": ds.key,
                "cache_hit": ds.cache_hit,
                "checksum": ds.checksum,
                "samples": ds.samples.len(),
                "shape": ds.shape,
            })
            .to_string())
        }
        Command::Csi(CsiCommand::Verify {
            args,
            codec,
            restored,
            out,
        }) => {
            let ds = args.dataset()?;
            let restored: Vec<CsiSample> = match restored {
                Some(p) => serde_json::from_str(&read(&p)?)?,
                None => restore_all(&ds.samples, parse_codec(&codec)?.as_ref())?,
            };
            let report = system_verify_restored(&ds, &restored)?;
            emit(out.as_deref(), &serde_json::to_string_pretty(&report)?)
        }
        Command::Traffic(TrafficCommand::Synth {
            population,
            venue,
            start,
            end,
            event,
            peak_strength,
            radius,
            out,
        }) => {
            let (scenario, _) = population.load()?;
            let mut spec = EventSpec::new(event.into(), venue, start, end);
            if let Some(p) = peak_strength {
                spec.peak_strength = p;
            }
            if let Some(r) = radius {
                spec.radius = r;
            }
            let series = synthesize_event(&spec, &scenario, population.users, population.seed)?;
            write(&out, &series.to_text())
        }
        Command::Traffic(TrafficCommand::Eval {
            pred,
            train,
            truth,
            k,
            criterion,
            aligned,
        }) => {
            let load = |p: &Path| -> Result<CellCountSeries> {
                CellCountSeries::from_text(&read(p)?)
                    .with_context(|| format!("parsing series {}", p.display()))
            };
            let truth = load(&truth)?;
            let text = match pred {
                Some(p) => {
                    let r = evaluate(EvaluateBody {
                        pred: SeriesInput::Series(load(&p)?),
                        truth: SeriesInput::Series(truth),
                        k,
                        criterion: criterion.into(),
                        aligned,
                    })
                    .map_err(|e| anyhow::anyhow!(e.body.message))?;
                    serde_json::to_string_pretty(&r)?
                }
                None => {
                    let history = train.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
                    let r = evaluate_transfer(&history, &truth, k, criterion.into())?;
                    serde_json::to_string_pretty(&r)?
                }
            };
            say(&text)
        }
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let (scenario, mobility) = args.population.load()?;
    let req = SimRequest {
        mode: args.mode.into(),
        scenario,
        antenna_overrides: vec![],
        n_users: args.population.users,
        mobility,
        duration: args.duration,
        seed: args.population.seed,
        link_subset: if args.serving_only {
            LinkSubset::Serving
        } else {
            LinkSubset::All
        },
    };
    req.validate()?;
    let result = run(&req, &RunControl::default())?;
    fs::create_dir_all(&args.out)?;
    if let SimOutput::LinkChannel(ds) = &result.output {
        fs::write(args.out.join("channel.bin"), &ds.payload)?;
    }
    write(
        &args.out.join("request.json"),
        &serde_json::to_string_pretty(&req)?,
    )?;
    write(
        &args.out.join("result.json"),
        &serde_json::to_string(&result)?,
    )?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn env_demo(
    population: PopulationArgs,
    steps: u64,
    action: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (scenario, mobility) = population.load()?;
    let mut env = AntennaEnv::new(SimRequest {
        mode: SimMode::ProtocolStack,
        scenario,
        antenna_overrides: vec![],
        n_users: population.users,
        mobility,
        duration: 1.0,
        seed: population.seed,
        link_subset: LinkSubset::All,
    })?;
    env.reset(steps, population.seed)?;
    let action: Action = match action {
        Some(p) => serde_json::from_str(&read(&p)?)?,
        None => Action::from_scenario(&env.request().scenario),
    };
    let mut lines = Vec::new();
    for _ in 0..steps {
        let r = env.step(&action)?;
        lines.push(serde_json::to_string(&r.indicators)?);
    }
    emit(out.as_deref(), &lines.join("\n"))
}

fn serve_blocking(host: &str, port: u16, data_root: PathBuf) -> Result<()> {
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .with_context(|| format!("bad address {host}:{port}"))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(async move {
        let state = AppState::new(ServiceConfig::new(data_root))?;
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("netcomb listening on {}", listener.local_addr()?);
        serve(listener, state, shutdown_signal()).await?;
        Ok(())
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        if let Ok(mut s) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
        {
            s.recv().await;
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
