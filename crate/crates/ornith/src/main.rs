//! Command-line entry point: plan gate trajectories, run closed-loop
//! simulations, identify model parameters, and execute ablation campaigns.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ornith::config::RunConfig;
use ornith::gateplan::{self, Gate, RacePlan};
use ornith::ident::{self, ManeuverLog};
use ornith::model::AblationMode;
use ornith::refpath::{build_reference, ArcLengthSpline, DEFAULT_SPACING};
use ornith::sim::{self, StopCondition};
use ornith::{flightlog, presets};

const EXIT_USAGE: u8 = 2;
const EXIT_CONSTRAINT: u8 = 3;
const EXIT_RUN_ABORT: u8 = 4;
const EXIT_IDENT: u8 = 5;

#[derive(Parser)]
#[command(name = "ornith", version, about = "Flapping-wing MAV flight stack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Structured TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master RNG seed (overrides config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a gate trajectory and emit plan, waypoints, and spline.
    Plan {
        #[command(flatten)]
        common: Common,
        /// Gate layout JSON; alternative to --preset.
        #[arg(long)]
        gates: Option<PathBuf>,
        /// Built-in gate layout.
        #[arg(long, value_parser = ["track1", "track2"])]
        preset: Option<String>,
    },
    /// Run the closed-loop tracking simulation.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Reference spline JSON; alternative to --preset.
        #[arg(long)]
        spline: Option<PathBuf>,
        /// Built-in reference (tracks are planned first, then tracked).
        #[arg(long, value_parser = ["circle", "track1", "track2"])]
        preset: Option<String>,
        /// Lap count (must be >= 1).
        #[arg(long)]
        laps: Option<usize>,
        /// Controller variant.
        #[arg(long, value_parser = ["full", "i", "ii", "iii", "iv"])]
        mode: Option<String>,
    },
    /// Identify model parameters from maneuver logs.
    Identify {
        #[command(flatten)]
        common: Common,
        /// Directory of maneuver-log JSON files.
        #[arg(long, required_unless_present = "synthetic")]
        logs: Option<PathBuf>,
        /// Use the bundled synthetic campaign instead of a log directory.
        #[arg(long)]
        synthetic: bool,
    },
    /// Run the ablation campaign and Welch comparison report.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Reference preset to track.
        #[arg(long, default_value = "circle", value_parser = ["circle", "track1", "track2"])]
        preset: String,
        /// Independent runs (laps) per mode.
        #[arg(long)]
        laps: Option<usize>,
    },
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    command: String,
    resolved_config: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    seed: u64,
    version: String,
    wall_time_s: f64,
}

fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)
}

fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: &[String],
    outputs: &[String],
    seed: u64,
    started: Instant,
) -> std::io::Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        resolved_config: cfg.to_toml(),
        inputs: inputs.to_vec(),
        outputs: outputs.to_vec(),
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    write_atomic(
        &out.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
}

fn load_config(common: &Common) -> Result<RunConfig, u8> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| {
            eprintln!("error: {e}");
            EXIT_USAGE
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.sim.seed = seed;
        cfg.plan.seed = seed;
    }
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> Result<(), u8> {
    std::fs::create_dir_all(dir).map_err(|e| {
        eprintln!("error: cannot create output dir {}: {e}", dir.display());
        EXIT_USAGE
    })
}

/// Post-hoc audit of a finished plan with 5% slack on the configured limits.
fn audit_plan(plan: &RacePlan, cfg: &ornith::gateplan::PlanConfig) -> Result<(), String> {
    let samples = 512;
    let mut min_radius = f64::INFINITY;
    let mut max_climb: f64 = 0.0;
    for seg in &plan.segments {
        for k in 0..=samples {
            let t = k as f64 / samples as f64;
            let d1 = seg.d1(t);
            let d2 = seg.d2(t);
            let s2 = d1[0] * d1[0] + d1[1] * d1[1] + d1[2] * d1[2];
            if s2 < 1e-12 {
                return Err("degenerate segment (zero speed)".to_string());
            }
            let cx = d1[1] * d2[2] - d1[2] * d2[1];
            let cy = d1[2] * d2[0] - d1[0] * d2[2];
            let cz = d1[0] * d2[1] - d1[1] * d2[0];
            let kappa = (cx * cx + cy * cy + cz * cz).sqrt() / (s2 * s2.sqrt());
            if kappa > 1e-9 {
                min_radius = min_radius.min(1.0 / kappa);
            }
            let climb = (d1[2] / s2.sqrt()).asin().to_degrees().abs();
            max_climb = max_climb.max(climb);
        }
    }
    if min_radius < 0.95 * cfg.min_radius {
        return Err(format!(
            "turning radius {min_radius:.3} m below {:.2} m",
            0.95 * cfg.min_radius
        ));
    }
    if max_climb > 1.05 * cfg.max_climb_deg {
        return Err(format!(
            "climb angle {max_climb:.1} deg exceeds {:.1} deg",
            1.05 * cfg.max_climb_deg
        ));
    }
    Ok(())
}

fn plan_preset_spline(
    preset: &str,
    cfg: &RunConfig,
) -> Result<ArcLengthSpline, (u8, String)> {
    match preset {
        "circle" => presets::circle_spline().map_err(|e| (EXIT_RUN_ABORT, e.to_string())),
        name => {
            let gates = if name == "track1" { presets::track1_gates() } else { presets::track2_gates() };
            let (plan, _) =
                gateplan::plan(&gates, &cfg.plan).map_err(|e| (EXIT_RUN_ABORT, e.to_string()))?;
            audit_plan(&plan, &cfg.plan).map_err(|e| (EXIT_CONSTRAINT, e))?;
            let waypoints = gateplan::to_waypoints(&plan, DEFAULT_SPACING);
            build_reference(&waypoints, DEFAULT_SPACING)
                .map_err(|e| (EXIT_RUN_ABORT, e.to_string()))
        }
    }
}

fn cmd_plan(common: Common, gates: Option<PathBuf>, preset: Option<String>) -> Result<(), u8> {
    let started = Instant::now();
    let cfg = load_config(&common)?;
    prepare_out(&common.out)?;
    let (gates, input_desc): (Vec<Gate>, String) = match (gates, preset) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(&path).map_err(|e| {
                eprintln!("error: cannot read {}: {e}", path.display());
                EXIT_USAGE
            })?;
            let gates = gateplan::gates_from_json(&text).map_err(|e| {
                eprintln!("error: {e}");
                EXIT_USAGE
            })?;
            (gates, path.display().to_string())
        }
        (None, Some(name)) => {
            let g = if name == "track1" { presets::track1_gates() } else { presets::track2_gates() };
            (g, format!("preset:{name}"))
        }
        _ => {
            eprintln!("error: provide exactly one of --gates or --preset");
            return Err(EXIT_USAGE);
        }
    };

    let (plan, trace) = gateplan::plan(&gates, &cfg.plan).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_RUN_ABORT
    })?;
    if let Err(violation) = audit_plan(&plan, &cfg.plan) {
        eprintln!("constraint violation: {violation}");
        return Err(EXIT_CONSTRAINT);
    }

    let waypoints = gateplan::to_waypoints(&plan, DEFAULT_SPACING);
    let spline = build_reference(&waypoints, DEFAULT_SPACING).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_RUN_ABORT
    })?;

    let plan_json = serde_json::json!({
        "plan": &plan,
        "cost_trace": trace,
        "length_m": gateplan::plan_length(&plan),
    });
    let outputs = ["plan.json", "waypoints.csv", "spline.json"];
    write_atomic(&common.out.join("plan.json"), &serde_json::to_string_pretty(&plan_json).unwrap())
        .and_then(|_| write_atomic(&common.out.join("waypoints.csv"), &waypoints.to_csv()))
        .and_then(|_| write_atomic(&common.out.join("spline.json"), &spline.to_json()))
        .and_then(|_| {
            write_manifest(
                &common.out,
                "plan",
                &cfg,
                &[input_desc],
                &outputs.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
                cfg.plan.seed,
                started,
            )
        })
        .map_err(|e| {
            eprintln!("error writing outputs: {e}");
            EXIT_RUN_ABORT
        })?;
    println!(
        "planned {} segments, cost {:.4}, length {:.2} m",
        plan.segments.len(),
        plan.cost,
        gateplan::plan_length(&plan)
    );
    Ok(())
}

fn cmd_simulate(
    common: Common,
    spline_path: Option<PathBuf>,
    preset: Option<String>,
    laps: Option<usize>,
    mode: Option<String>,
) -> Result<(), u8> {
    let started = Instant::now();
    let mut cfg = load_config(&common)?;
    if let Some(laps) = laps {
        if laps == 0 {
            eprintln!("error: lap count must be >= 1");
            return Err(EXIT_USAGE);
        }
        cfg.sim.stop = StopCondition::Laps(laps);
    }
    if let Some(mode) = mode {
        cfg.sim.mode = AblationMode::parse(&mode).ok_or_else(|| {
            eprintln!("error: unknown mode {mode}");
            EXIT_USAGE
        })?;
    }
    if let StopCondition::Laps(0) = cfg.sim.stop {
        eprintln!("error: lap count must be >= 1");
        return Err(EXIT_USAGE);
    }
    prepare_out(&common.out)?;

    let (spline, input_desc) = match (spline_path, preset) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(&path).map_err(|e| {
                eprintln!("error: cannot read {}: {e}", path.display());
                EXIT_USAGE
            })?;
            let spline = ArcLengthSpline::from_json(&text).map_err(|e| {
                eprintln!("error: {e}");
                EXIT_USAGE
            })?;
            (spline, path.display().to_string())
        }
        (None, Some(name)) => {
            let spline = plan_preset_spline(&name, &cfg).map_err(|(code, msg)| {
                eprintln!("error: {msg}");
                code
            })?;
            (spline, format!("preset:{name}"))
        }
        _ => {
            eprintln!("error: provide exactly one of --spline or --preset");
            return Err(EXIT_USAGE);
        }
    };

    let log = sim::run_closed_loop(&spline, &cfg.model, &cfg.estimator, &cfg.sim, &cfg.mpcc)
        .map_err(|e| {
            eprintln!("run aborted: {e}");
            EXIT_RUN_ABORT
        })?;
    let metrics = sim::compute_metrics(&log, &spline).map_err(|e| {
        eprintln!("run aborted: {e}");
        EXIT_RUN_ABORT
    })?;

    let outputs = ["flightlog.csv", "metrics.json"];
    write_atomic(&common.out.join("flightlog.csv"), &flightlog::to_csv(&log))
        .and_then(|_| {
            write_atomic(
                &common.out.join("metrics.json"),
                &serde_json::to_string_pretty(&metrics).unwrap(),
            )
        })
        .and_then(|_| {
            write_manifest(
                &common.out,
                "simulate",
                &cfg,
                &[input_desc],
                &outputs.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
                cfg.sim.seed,
                started,
            )
        })
        .map_err(|e| {
            eprintln!("error writing outputs: {e}");
            EXIT_RUN_ABORT
        })?;
    println!(
        "mean 3D error {:.2} cm, max {:.2} cm, solve p95 {:.2} ms",
        metrics.e3d_mean_cm, metrics.e3d_max_cm, metrics.solve_ms_p95
    );
    Ok(())
}

fn cmd_identify(common: Common, logs_dir: Option<PathBuf>, synthetic: bool) -> Result<(), u8> {
    let started = Instant::now();
    let cfg = load_config(&common)?;
    prepare_out(&common.out)?;

    let (logs, input_desc): (Vec<ManeuverLog>, String) = if synthetic {
        (
            ident::synth_campaign(&cfg.model, None, cfg.sim.seed),
            "synthetic-campaign".to_string(),
        )
    } else {
        let dir = logs_dir.expect("clap enforces logs xor synthetic");
        let mut logs = Vec::new();
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| {
                eprintln!("error: cannot read {}: {e}", dir.display());
                EXIT_USAGE
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
            .collect();
        entries.sort();
        for path in &entries {
            let text = std::fs::read_to_string(path).map_err(|e| {
                eprintln!("error: cannot read {}: {e}", path.display());
                EXIT_USAGE
            })?;
            let log: ManeuverLog = serde_json::from_str(&text).map_err(|e| {
                eprintln!("error: {} is not a maneuver log: {e}", path.display());
                EXIT_USAGE
            })?;
            logs.push(log);
        }
        (logs, dir.display().to_string())
    };

    let (params, report) = ident::identify_all(&logs).map_err(|e| {
        eprintln!("identification failed: {e}");
        EXIT_IDENT
    })?;

    let outputs = ["params.toml", "diagnostics.json"];
    write_atomic(&common.out.join("params.toml"), &params.to_config_string())
        .and_then(|_| write_atomic(&common.out.join("diagnostics.json"), &report.to_json()))
        .and_then(|_| {
            write_manifest(
                &common.out,
                "identify",
                &cfg,
                &[input_desc],
                &outputs.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
                cfg.sim.seed,
                started,
            )
        })
        .map_err(|e| {
            eprintln!("error writing outputs: {e}");
            EXIT_RUN_ABORT
        })?;
    println!("identified {} stages", report.stages.len());
    Ok(())
}

fn cmd_ablate(common: Common, preset: String, laps: Option<usize>) -> Result<(), u8> {
    let started = Instant::now();
    let cfg = load_config(&common)?;
    let runs = laps.unwrap_or(20);
    if runs == 0 {
        eprintln!("error: lap count must be >= 1");
        return Err(EXIT_USAGE);
    }
    prepare_out(&common.out)?;
    let spline = plan_preset_spline(&preset, &cfg).map_err(|(code, msg)| {
        eprintln!("error: {msg}");
        code
    })?;

    let base = sim::SimConfig { stop: StopCondition::Laps(1), ..cfg.sim };
    let modes = [
        AblationMode::Full,
        AblationMode::FixedSpeedTurning,
        AblationMode::NoTurnAltCoupling,
        AblationMode::SecondOrderVertical,
        AblationMode::SecondOrderHeading,
    ];
    let mut report =
        sim::ablation_campaign(&spline, &cfg.model, &cfg.estimator, &base, &cfg.mpcc, &modes, runs);
    if runs < 2 {
        // too few samples for any statistics
        report.comparisons.clear();
    }

    for outcome in &report.outcomes {
        let mean = if outcome.samples.is_empty() {
            f64::NAN
        } else {
            outcome.samples.iter().sum::<f64>() / outcome.samples.len() as f64
        };
        println!(
            "mode {:>4}: mean 3D error {:.2} cm over {} runs ({} aborted)",
            outcome.mode,
            mean,
            outcome.samples.len(),
            outcome.aborted_runs
        );
    }
    for c in &report.comparisons {
        if let Some(w) = &c.welch {
            println!("mode {:>4} vs full: t = {:.3}, p = {:.4}", c.mode, w.t, w.p_two_sided);
        }
    }

    let outputs = ["ablation.json"];
    write_atomic(
        &common.out.join("ablation.json"),
        &serde_json::to_string_pretty(&report).unwrap(),
    )
    .and_then(|_| {
        write_manifest(
            &common.out,
            "ablate",
            &cfg,
            &[format!("preset:{preset}")],
            &outputs.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            cfg.sim.seed,
            started,
        )
    })
    .map_err(|e| {
        eprintln!("error writing outputs: {e}");
        EXIT_RUN_ABORT
    })?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are success; everything else is usage
            if e.use_stderr() {
                let _ = e.print();
                return ExitCode::from(EXIT_USAGE);
            }
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.command {
        Command::Plan { common, gates, preset } => cmd_plan(common, gates, preset),
        Command::Simulate { common, spline, preset, laps, mode } => {
            cmd_simulate(common, spline, preset, laps, mode)
        }
        Command::Identify { common, logs, synthetic } => cmd_identify(common, logs, synthetic),
        Command::Ablate { common, preset, laps } => cmd_ablate(common, preset, laps),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}
