use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use fluxshard::bench::{self, SyntheticTiming};
use fluxshard::calibration::{calibrate, CalibrationConfig, PipelineEvaluator, DEFAULT_SPLIT};
use fluxshard::dispatch::{DriverConfig, FrameDriver, LatencyModel, DEFAULT_EPSILON_MS, DEFAULT_EWMA_WEIGHT};
use fluxshard::link::{generate_tier_trace, BandwidthTrace, LinkSim, Tier, DEFAULT_PROPAGATION_MS};
use fluxshard::modes::ModeRegistry;
use fluxshard::pipeline::PipelineOptions;
use fluxshard::refnet::{build_network, NetworkConfig, NetworkSpec};
use fluxshard::reuse::ThresholdVector;
use fluxshard::rfap::RfapRegistry;
use fluxshard::scenes::{generate, SceneSpec, Scenario, Sequence};
use fluxshard::server::{CloudEndpoint, LocalCloud, Server, TcpCloud};

#[derive(Parser)]
#[command(name = "fluxshard", version, about = "Motion-aware feature reuse with edge/cloud dispatch")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic sequence directory.
    Datagen(DatagenArgs),
    /// Generate a bandwidth trace for a tier.
    Trace(TraceArgs),
    /// Run a sequence through one execution mode and emit the metrics CSV.
    Run(RunArgs),
    /// Calibrate per-stage thresholds against a fidelity target.
    Calibrate(CalibrateArgs),
    /// Sweep recompute density and write a latency profile.
    Profile(ProfileArgs),
    /// Serve cloud sessions over TCP.
    Serve(ServeArgs),
    /// Summarise run CSVs, one line per run.
    Report(ReportArgs),
}

#[derive(Args)]
struct DatagenArgs {
    /// static, pan[:dy,dx], two_region[:bdy,bdx,fdy,fdx], reveal, scramble[:jitter]
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value_t = 60)]
    frames: usize,
    /// HxW, both multiples of 16.
    #[arg(long, default_value = "128x128")]
    size: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-pixel sensor noise amplitude.
    #[arg(long, default_value_t = 0.0)]
    noise: f32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TraceArgs {
    /// low, medium or high
    #[arg(long)]
    tier: String,
    #[arg(long, default_value_t = 600)]
    samples: usize,
    #[arg(long, default_value_t = 100.0)]
    step_ms: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineFlags {
    /// Network description file; defaults to the reference net sized to the input.
    #[arg(long)]
    net: Option<PathBuf>,
    #[arg(long)]
    thresholds: Option<PathBuf>,
    #[arg(long, conflicts_with = "per_layer_rfap")]
    no_rfap: bool,
    #[arg(long)]
    per_layer_rfap: bool,
    #[arg(long)]
    no_remap: bool,
    #[arg(long)]
    no_sparse: bool,
}

impl PipelineFlags {
    fn rfap(&self) -> &'static str {
        if self.no_rfap {
            "off"
        } else if self.per_layer_rfap {
            "per-layer"
        } else {
            "compacted"
        }
    }

    fn opts(&self) -> PipelineOptions {
        PipelineOptions {
            remap: !self.no_remap,
            sparse: !self.no_sparse,
        }
    }

    fn thresholds(&self) -> Result<ThresholdVector> {
        match &self.thresholds {
            Some(p) => Ok(ThresholdVector::parse(&read(p)?)?),
            None => Ok(ThresholdVector::zero()),
        }
    }

    fn net(&self, dims: (usize, usize, usize)) -> Result<NetworkSpec> {
        let config = match &self.net {
            Some(p) => NetworkConfig::parse(&read(p)?)?,
            None => NetworkConfig::default_config().with_input(dims.0, dims.1, dims.2),
        };
        if config.input != dims {
            bail!("network input {:?} does not match the data {:?}", config.input, dims);
        }
        Ok(build_network(&config)?)
    }
}

#[derive(Args)]
struct RunArgs {
    /// Sequence directory written by `datagen`.
    #[arg(long)]
    seq: PathBuf,
    #[arg(long, default_value = "fluxshard")]
    mode: String,
    /// Bandwidth trace CSV (t_ms,bps).
    #[arg(long, conflicts_with = "tier")]
    trace: Option<PathBuf>,
    /// Generate a tier trace instead of reading one.
    #[arg(long)]
    tier: Option<String>,
    #[arg(long, default_value_t = 0)]
    trace_seed: u64,
    #[command(flatten)]
    pipeline: PipelineFlags,
    /// Edge latency profile CSV (rho,latency_ms).
    #[arg(long)]
    edge_profile: Option<PathBuf>,
    #[arg(long)]
    cloud_profile: Option<PathBuf>,
    #[arg(long)]
    edge_only: bool,
    /// Offload to a running `serve` process.
    #[arg(long, conflicts_with = "loopback_tcp")]
    server: Option<String>,
    /// Offload over TCP to a server spawned in this process.
    #[arg(long)]
    loopback_tcp: bool,
    #[arg(long, default_value_t = 1)]
    client_id: u64,
    #[arg(long, default_value_t = DEFAULT_EPSILON_MS)]
    epsilon_ms: f64,
    #[arg(long, default_value_t = DEFAULT_EWMA_WEIGHT)]
    ewma: f64,
    #[arg(long, default_value_t = DEFAULT_PROPAGATION_MS)]
    propagation_ms: f64,
    #[arg(long, default_value_t = 16)]
    search_radius: usize,
    /// Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// One or more sequence directories.
    #[arg(long = "seq", required = true)]
    seqs: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.97)]
    alpha: f64,
    /// Share of the error budget given to the dispatch stage.
    #[arg(long, default_value_t = DEFAULT_SPLIT)]
    split: f64,
    #[arg(long, default_value_t = 16)]
    search_radius: usize,
    #[command(flatten)]
    pipeline: PipelineFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    /// Sequence whose first frame warms the cache; a synthetic frame otherwise.
    #[arg(long)]
    seq: Option<PathBuf>,
    #[arg(long, default_value = "128x128")]
    size: String,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    rhos: Vec<f64>,
    #[arg(long, default_value_t = 50.0)]
    intercept_ms: f64,
    #[arg(long, default_value_t = 446.8)]
    dense_ms: f64,
    #[arg(long)]
    isotonic: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    pipeline: PipelineFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    /// Input size the clients will send, when --net is not given.
    #[arg(long, default_value = "128x128")]
    size: String,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct ReportArgs {
    /// Run CSVs written by `run`.
    csvs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s.split_once('x').with_context(|| format!("size `{s}` is not HxW"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

fn load_seq(dir: &Path) -> Result<Sequence> {
    Sequence::load(dir).with_context(|| format!("loading sequence {}", dir.display()))
}

fn dims(seq: &Sequence) -> (usize, usize, usize) {
    let f = &seq.frames[0];
    (f.height(), f.width(), f.channels())
}

fn datagen(a: DatagenArgs) -> Result<()> {
    let (h, w) = parse_size(&a.size)?;
    let spec = SceneSpec::new(Scenario::parse(&a.scenario)?, a.frames, h, w, a.seed).with_noise(a.noise);
    let seq = generate(&spec)?;
    let manifest = seq.write(&a.out)?;
    info!("wrote {} frames to {}", a.frames, a.out.display());
    println!("{} frames, mv std {:.3} px", manifest.frame_files.len(), manifest.mv_std);
    Ok(())
}

fn trace(a: TraceArgs) -> Result<()> {
    let t = generate_tier_trace(Tier::parse(&a.tier)?, a.samples, a.step_ms, a.seed)?;
    emit(&a.out, &t.to_csv())
}

fn run(a: RunArgs) -> Result<()> {
    let seq = load_seq(&a.seq)?;
    let net = Arc::new(a.pipeline.net(dims(&seq))?);
    let trace = match (&a.trace, &a.tier) {
        (Some(p), _) => BandwidthTrace::from_csv(&read(p)?)?,
        (None, Some(t)) => generate_tier_trace(Tier::parse(t)?, 600, 100.0, a.trace_seed)?,
        (None, None) => generate_tier_trace(Tier::Medium, 600, 100.0, a.trace_seed)?,
    };
    let profile = |p: &Option<PathBuf>, default: LatencyModel| -> Result<LatencyModel> {
        match p {
            Some(p) => Ok(LatencyModel::from_csv(&read(p)?)?),
            None => Ok(default),
        }
    };
    let config = DriverConfig {
        thresholds: a.pipeline.thresholds()?,
        rfap: a.pipeline.rfap().into(),
        opts: a.pipeline.opts(),
        edge_model: profile(&a.edge_profile, LatencyModel::default_edge())?,
        cloud_model: profile(&a.cloud_profile, LatencyModel::default_cloud())?,
        epsilon_ms: a.epsilon_ms,
        ewma_weight: a.ewma,
        search_radius: a.search_radius,
        edge_only: a.edge_only,
        ..DriverConfig::default()
    };
    let session = config.session(Arc::clone(&net));
    let mut handle = None;
    let cloud: Box<dyn CloudEndpoint> = if let Some(addr) = &a.server {
        Box::new(TcpCloud::connect(addr, a.client_id, session.hash())?)
    } else if a.loopback_tcp {
        let h = Server::bind("127.0.0.1:0", session.clone())?.spawn()?;
        let c = TcpCloud::connect(&h.addr_string(), a.client_id, session.hash())?;
        handle = Some(h);
        Box::new(c)
    } else {
        Box::new(LocalCloud::new(session)?)
    };
    let mode = ModeRegistry::default().take(&a.mode)?;
    let mut driver = FrameDriver::new(net, config, mode, Some(cloud), LinkSim::new(trace, a.propagation_ms))?;
    let rows = bench::run_sequence(&mut driver, &seq.frames)?;
    drop(driver);
    if let Some(h) = handle {
        h.shutdown();
    }
    emit(&a.out, &bench::to_csv(&rows))
}

fn calibrate_cmd(a: CalibrateArgs) -> Result<()> {
    let seqs = a.seqs.iter().map(|p| load_seq(p)).collect::<Result<Vec<_>>>()?;
    let d = dims(&seqs[0]);
    if seqs.iter().any(|s| dims(s) != d) {
        bail!("calibration sequences differ in size");
    }
    let net = a.pipeline.net(d)?;
    let registry = RfapRegistry::default();
    let frames = seqs.into_iter().map(|s| s.frames).collect();
    let eval = PipelineEvaluator::new(&net, registry.get(a.pipeline.rfap())?, a.pipeline.opts(), frames, a.search_radius)?;
    let config = CalibrationConfig {
        split_ratio: a.split,
        ..CalibrationConfig::for_network(&net, a.alpha)
    };
    let t = calibrate(&config, &eval)?;
    let r = eval.replay(&t)?;
    info!("fidelity {:.6}, compute ratio {:.6}", r.fidelity, r.compute_ratio);
    emit(&a.out, &t.to_text())
}

fn profile_cmd(a: ProfileArgs) -> Result<()> {
    let frame = match &a.seq {
        Some(p) => load_seq(p)?.frames.swap_remove(0),
        None => {
            let (h, w) = parse_size(&a.size)?;
            generate(&SceneSpec::new(Scenario::Static, 1, h, w, a.seed))?.frames.swap_remove(0)
        }
    };
    let net = a.pipeline.net((frame.height(), frame.width(), frame.channels()))?;
    let registry = RfapRegistry::default();
    let timing = SyntheticTiming {
        intercept_ms: a.intercept_ms,
        dense_ms: a.dense_ms,
    };
    let model = bench::profile(&net, &frame, registry.get(a.pipeline.rfap())?, timing, &a.rhos, a.seed, a.isotonic)?;
    emit(&a.out, &model.to_csv())
}

fn serve(a: ServeArgs) -> Result<()> {
    let (h, w) = parse_size(&a.size)?;
    let net = Arc::new(a.pipeline.net((h, w, 3))?);
    let config = DriverConfig {
        thresholds: a.pipeline.thresholds()?,
        rfap: a.pipeline.rfap().into(),
        opts: a.pipeline.opts(),
        ..DriverConfig::default()
    };
    let server = Server::bind(&a.listen, config.session(net))?;
    println!("listening on {}", server.local_addr()?);
    server.serve(Arc::new(AtomicBool::new(false)))?;
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let runs = a
        .csvs
        .iter()
        .map(|p| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, bench::parse_csv(&read(p)?)?))
        })
        .collect::<Result<Vec<_>>>()?;
    emit(&a.out, &bench::report(&runs)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FS_LOG", "warn")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Datagen(a) => datagen(a),
        Cmd::Trace(a) => trace(a),
        Cmd::Run(a) => run(a),
        Cmd::Calibrate(a) => calibrate_cmd(a),
        Cmd::Profile(a) => profile_cmd(a),
        Cmd::Serve(a) => serve(a),
        Cmd::Report(a) => report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<fluxshard::Error>() {
                Some(fluxshard::Error::Usage(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
