use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use fogdetect::detection::Thresholds;
use fogdetect::harness::client::GatewayClient;
use fogdetect::harness::{compare_report, run_scenario, run_suite, write_outcome, write_suite, Scenario, SuiteParams};
use fogdetect::master::{spawn_master, MasterConfig};
use fogdetect::metrics::{jitter, MetricsReport};
use fogdetect::preprocess::{self, ImagePayload, Mode};
use fogdetect::protocol::Tier;
use fogdetect::worker::net::{run_worker, WorkerNetError};
use fogdetect::worker::{DetectorSpec, LatencyModel, WorkerAgent};

type Error = Box<dyn std::error::Error>;

#[derive(Parser)]
#[command(name = "fogdetect", version, about = "Fog/cloud object-detection orchestration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the master (gateway HTTP endpoint plus worker listener).
    Master(MasterArgs),
    /// Run a worker that connects to a master.
    Worker(WorkerArgs),
    /// Submit images to a master at a fixed rate.
    Client(ClientArgs),
    /// Simulated scenarios and report comparison.
    #[command(subcommand)]
    Harness(HarnessCommand),
}

#[derive(Args)]
struct MasterArgs {
    #[arg(long)]
    listen_http: Option<SocketAddr>,
    #[arg(long)]
    listen_worker: Option<SocketAddr>,
    /// Mode used when a request has no X-Mode header.
    #[arg(long)]
    mode_default: Option<Mode>,
    #[arg(long)]
    target_long_side: Option<u32>,
    #[arg(long)]
    heartbeat_interval_ms: Option<u64>,
    /// TOML file with the same keys as the flags (flags win).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct WorkerArgs {
    /// Master worker-listener address, host:port.
    #[arg(long)]
    master: String,
    #[arg(long)]
    id: String,
    #[arg(long, default_value = "fog")]
    tier: Tier,
    /// `mock` or `tensorfile`.
    #[arg(long, default_value = "mock")]
    detector: String,
    /// Directory of `<image_id>.grid` fixtures (tensorfile detector).
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Mock latency: `fixed:<ms>` or `uniform:<base>:<spread>`.
    #[arg(long, default_value = "fixed:100")]
    latency: LatencyModel,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    slots: u32,
    #[arg(long, default_value_t = Thresholds::default().score)]
    score_threshold: f64,
    #[arg(long, default_value_t = Thresholds::default().iou)]
    iou_threshold: f64,
}

#[derive(Args)]
struct ClientArgs {
    /// Master HTTP root, for example http://127.0.0.1:8080.
    #[arg(long)]
    master: String,
    #[arg(long, default_value = "accuracy")]
    mode: Mode,
    /// Images per minute.
    #[arg(long, default_value_t = 10.0)]
    rate: f64,
    /// Seconds of injection.
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    /// PPM files, or directories of them; used in order and cycled.
    #[arg(long, required = true, num_args = 1..)]
    images: Vec<PathBuf>,
    /// Rescale on the gateway in low-latency mode.
    #[arg(long)]
    client_rescale: bool,
    #[arg(long, default_value_t = preprocess::DEFAULT_TARGET_LONG_SIDE)]
    target_long_side: u32,
}

#[derive(Subcommand)]
enum HarnessCommand {
    /// Run one scenario file on the virtual clock.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Directory for the ledger, completions, and report CSVs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare report CSVs and check the expected orderings.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Run the four-topology by two-mode suite and write CSVs.
    Suite {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Master(a) => runtime().and_then(|rt| rt.block_on(master(a))),
        Command::Worker(a) => runtime().and_then(|rt| rt.block_on(worker(a))),
        Command::Client(a) => runtime().and_then(|rt| rt.block_on(client(a))),
        Command::Harness(h) => harness(h),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, Error> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

async fn master(a: MasterArgs) -> Result<ExitCode, Error> {
    let mut config = match &a.config {
        Some(p) => toml::from_str::<MasterConfig>(&std::fs::read_to_string(p)?)?,
        None => MasterConfig::default(),
    };
    if let Some(v) = a.listen_http {
        config.listen_http = v;
    }
    if let Some(v) = a.listen_worker {
        config.listen_worker = v;
    }
    if let Some(v) = a.mode_default {
        config.scheduler.mode_default = v;
    }
    if let Some(v) = a.target_long_side {
        config.scheduler.target_long_side = v;
    }
    if let Some(v) = a.heartbeat_interval_ms {
        config.scheduler.heartbeat_interval_ms = v;
    }
    let handle = spawn_master(config).await?;
    log::info!("http on {}, workers on {}", handle.http_addr, handle.worker_addr);
    handle.wait().await;
    Ok(ExitCode::SUCCESS)
}

async fn worker(a: WorkerArgs) -> Result<ExitCode, Error> {
    let spec = match a.detector.as_str() {
        "mock" => DetectorSpec::Mock {
            latency: a.latency,
            seed: a.seed,
            detections: Vec::new(),
        },
        "tensorfile" => DetectorSpec::Tensorfile {
            fixtures: a.fixtures.ok_or("--fixtures is required for the tensorfile detector")?,
            thresholds: Thresholds {
                score: a.score_threshold,
                iou: a.iou_threshold,
            },
        },
        other => return Err(format!("unknown detector {other:?} (expected mock or tensorfile)").into()),
    };
    let agent = WorkerAgent::new(a.id, a.tier, a.slots, spec.build()?);
    loop {
        match run_worker(agent.clone(), &a.master).await {
            Err(e @ WorkerNetError::Rejected(_)) => return Err(e.into()),
            Err(e) => log::warn!("{e}; reconnecting in 1 s"),
            Ok(()) => log::warn!("master closed the connection; reconnecting in 1 s"),
        }
        tokio::time::sleep(Duration::from_secs(1)).await;
    }
}

fn collect_images(paths: &[PathBuf]) -> Result<Vec<PathBuf>, Error> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "ppm"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err("no images found".into());
    }
    Ok(out)
}

async fn client(a: ClientArgs) -> Result<ExitCode, Error> {
    let files = collect_images(&a.images)?;
    let images: Vec<ImagePayload> = files
        .iter()
        .map(|f| Ok(ImagePayload::ppm("", std::fs::read(f)?)?))
        .collect::<Result<_, Error>>()?;
    let schedule = fogdetect::harness::client_inject(a.rate, a.duration)?;
    let client = GatewayClient::new(&a.master)?;
    let rescale = a.client_rescale && a.mode == Mode::LowLatency;
    let start = tokio::time::Instant::now();
    let mut calls = Vec::new();
    for sub in schedule {
        let mut payload = images[sub.index % images.len()].clone();
        payload.image_id = sub.image_id.clone();
        if rescale {
            payload = preprocess::prepare(&payload, Mode::LowLatency, a.target_long_side)?;
        }
        let client = client.clone();
        let mode = a.mode;
        calls.push(tokio::spawn(async move {
            tokio::time::sleep_until(start + Duration::from_micros(sub.at_us)).await;
            client.detect(&payload, mode, rescale).await
        }));
    }
    let mut latencies = Vec::new();
    let mut failures = 0;
    println!("image_id,status,response_ms,worker_id,detections");
    for call in calls {
        match call.await? {
            Ok(o) => {
                let worker = o.response.as_ref().map_or("", |r| r.timing.worker_id.as_str());
                let n = o.response.as_ref().map_or(0, |r| r.detections.len());
                println!("{},{},{:.1},{},{}", o.image_id, o.status, o.elapsed_ms, worker, n);
                if o.status == 200 {
                    latencies.push(o.elapsed_ms);
                } else {
                    failures += 1;
                }
            }
            Err(e) => {
                eprintln!("request failed: {e}");
                failures += 1;
            }
        }
    }
    if !latencies.is_empty() {
        let mean = latencies.iter().sum::<f64>() / latencies.len() as f64;
        eprintln!(
            "{} ok, {} failed, mean response {:.1} ms, jitter {}",
            latencies.len(),
            failures,
            mean,
            jitter(&latencies).map_or("n/a".to_string(), |j| format!("{j:.1} ms"))
        );
    }
    Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn read_reports(paths: &[PathBuf]) -> Result<Vec<MetricsReport>, Error> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(MetricsReport::read_csv(std::fs::File::open(p)?)?);
    }
    Ok(all)
}

fn harness(cmd: HarnessCommand) -> Result<ExitCode, Error> {
    match cmd {
        HarnessCommand::Run { scenario, out } => {
            let s = Scenario::read(&scenario)?;
            let outcome = run_scenario(&s)?;
            print!("{}", outcome.report.summary());
            if let Some(dir) = out {
                write_outcome(&dir, &outcome)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        HarnessCommand::Compare { reports } => {
            let reports = read_reports(&reports)?;
            if reports.len() < 2 {
                return Err("compare needs at least 2 reports".into());
            }
            let cmp = compare_report(&reports);
            print!("{}", cmp.summary());
            for d in &cmp.deltas {
                println!(
                    "delta {} -> {}: response {:+.1} ms, jitter {:+.1} ms, gateway {:+} B, energy {:+.0} J",
                    d.left, d.right, d.mean_response_ms, d.jitter_ms, d.gateway_bytes, d.energy_total_j
                );
            }
            Ok(exit_for(cmp.all_consistent()))
        }
        HarnessCommand::Suite { out, seed } => {
            let mut params = SuiteParams::default();
            if let Some(s) = seed {
                params.seed = s;
            }
            let suite = run_suite(&params)?;
            write_suite(Path::new(&out), &suite)?;
            for o in &suite.outcomes {
                print!("{}", o.report.summary());
            }
            print!("{}", suite.comparison.summary());
            Ok(exit_for(suite.comparison.all_consistent()))
        }
    }
}

fn exit_for(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
