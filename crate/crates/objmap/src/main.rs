use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use objmap::{run_backend, run_eval, run_pipeline, run_replay, run_sensor_process, run_sim, AppError, RunConfig, RunSummary, Variant};
use objmap_sim::Timing;

#[derive(Parser)]
#[command(name = "objmap", version, about = "Object-level semantic mapping with a network of smart RGB-D sensors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate all sensors and record their streams (no backend).
    Sim(RunArgs),
    /// Run one sensor and stream to a backend at --addr.
    Sensor {
        #[command(flatten)]
        run: RunArgs,
        /// Camera id from the scenario.
        #[arg(long, env = "OBJMAP_CAMERA")]
        camera: u16,
        /// Also record the stream under --out/replay.
        #[arg(long)]
        record: bool,
    },
    /// Listen on --addr for one connection per scenario camera and build the map.
    Backend(RunArgs),
    /// Run sensors and backend in-process over loopback TCP.
    Run(RunArgs),
    /// Evaluate run directories under --out against ground truth.
    Eval {
        #[arg(long, env = "OBJMAP_OUT", default_value = "objmap-out")]
        out: PathBuf,
        /// Side of the square dilation kernel applied to ground-truth masks.
        #[arg(long, env = "OBJMAP_DILATE_PX")]
        dilate_px: Option<u32>,
    },
    /// Re-run the backend on the streams recorded in a run directory.
    Replay {
        /// Run directory containing run.json, scenario.toml and replay/.
        #[arg(long, env = "OBJMAP_FROM")]
        from: PathBuf,
        #[arg(long, env = "OBJMAP_OUT", default_value = "objmap-replay")]
        out: PathBuf,
        /// Pace frames in real time, scaled by this factor, instead of as fast as possible.
        #[arg(long)]
        speed: Option<f64>,
    },
}

#[derive(Args, Clone, Debug)]
struct RunArgs {
    /// Scenario file or built-in name (default, noisy, occlusion).
    #[arg(long, env = "OBJMAP_SCENARIO")]
    scenario: Option<String>,
    #[arg(long, env = "OBJMAP_SEED")]
    seed: Option<u64>,
    /// Object representation: mesh or submap.
    #[arg(long, env = "OBJMAP_MODE")]
    mode: Option<String>,
    /// pnp, icp-local, icp-backend, or all (run only).
    #[arg(long, env = "OBJMAP_VARIANT")]
    variant: Option<String>,
    /// Backend bind / connect address.
    #[arg(long, env = "OBJMAP_ADDR")]
    addr: Option<String>,
    #[arg(long, env = "OBJMAP_OUT")]
    out: Option<PathBuf>,
    #[arg(long, env = "OBJMAP_TAU_DIST")]
    tau_dist: Option<f64>,
    #[arg(long, env = "OBJMAP_TAU_TRACK")]
    tau_track: Option<f64>,
    #[arg(long, env = "OBJMAP_TAU_OCC")]
    tau_occ: Option<u32>,
    #[arg(long, env = "OBJMAP_SYNC_WINDOW_MS")]
    sync_window_ms: Option<f64>,
    /// TOML file with RunConfig keys; its values override flags.
    #[arg(long, env = "OBJMAP_CONFIG")]
    config: Option<PathBuf>,
}

impl RunArgs {
    /// Flags over defaults, then the config file over both. Returns the
    /// config and whether every variant was requested.
    fn resolve(&self) -> Result<(RunConfig, bool), AppError> {
        let mut c = RunConfig::default();
        let mut all = false;
        if let Some(v) = &self.scenario {
            c.scenario = v.clone();
        }
        c.seed = self.seed.or(c.seed);
        if let Some(m) = &self.mode {
            c.mode = m.parse().map_err(AppError::Config)?;
        }
        match self.variant.as_deref() {
            Some("all") => all = true,
            Some(v) => c.variant = v.parse().map_err(AppError::Config)?,
            None => {}
        }
        if let Some(v) = &self.addr {
            c.addr = v.clone();
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        c.tau_dist = self.tau_dist.unwrap_or(c.tau_dist);
        c.tau_track = self.tau_track.unwrap_or(c.tau_track);
        c.tau_occ = self.tau_occ.unwrap_or(c.tau_occ);
        c.sync_window_ms = self.sync_window_ms.unwrap_or(c.sync_window_ms);
        if let Some(path) = &self.config {
            c = c.merge_file(path)?;
        }
        c.validate()?;
        Ok((c, all))
    }
}

fn print_summary(s: &RunSummary) {
    println!(
        "{}: {} snapshots, per sensor: observations {:.1} B/s, segments {:.1} B/s; {:.2} s",
        s.out.display(),
        s.snapshots,
        s.bandwidth.per_sensor_mean(|b| b.observation_bps),
        s.bandwidth.per_sensor_mean(|b| b.segment_bps),
        s.elapsed.as_secs_f64()
    );
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Sim(args) => print_summary(&run_sim(&args.resolve()?.0)?),
        Command::Sensor { run, camera, record } => {
            let (cfg, _) = run.resolve()?;
            let log = run_sensor_process(&cfg, camera, record.then_some(cfg.out.as_path()))?;
            println!("sensor {camera}: {} frames, {} bytes on the wire", log.frames, log.wire_bytes);
        }
        Command::Backend(args) => print_summary(&run_backend(&args.resolve()?.0)?),
        Command::Run(args) => {
            let (cfg, all) = args.resolve()?;
            if all {
                // validate once before any directory is created
                cfg.load_scenario()?;
                for v in Variant::ALL {
                    let c = RunConfig { variant: v, out: cfg.out.join(v.name()), ..cfg.clone() };
                    print_summary(&run_pipeline(&c)?);
                }
            } else {
                print_summary(&run_pipeline(&cfg)?);
            }
        }
        Command::Eval { out, dilate_px } => {
            let report = run_eval(&out, dilate_px)?;
            print!("{}", report.to_table());
        }
        Command::Replay { from, out, speed } => {
            let timing = speed.map_or(Timing::AsFastAsPossible, |speed| Timing::Original { speed });
            print_summary(&run_replay(&from, &out, timing)?);
        }
    }
    Ok(())
}

fn exit_code(e: &AppError) -> u8 {
    match e {
        AppError::Config(_) | AppError::Scenario(_) => 2,
        AppError::Bind { .. } | AppError::Connect { .. } => 3,
        AppError::Protocol(_) | AppError::Replay(_) => 4,
        AppError::MissingArtifacts(_) | AppError::BadArtifact { .. } => 5,
        AppError::Io { .. } | AppError::Worker(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("OBJMAP_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("objmap: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
