use clap::{Args, Parser, Subcommand};
use qclfm::coincidence::{
    fit_sum_projection, ghost_image, joint_momentum_histogram, normalize_ghost, pair_events, IdlerRegion, PixelWindow,
};
use qclfm::config::ExperimentConfig;
use qclfm::io;
use qclfm::metrics::{conventional_dof, dof_curve, report_csv};
use qclfm::pipeline::{momentum_pairs_from_events, records_from_events, simulate, truth_csv};
use qclfm::refocus::{error_trace_csv, gs_retrieve, ray_trace_refocus, RetrievalOptions};
use qclfm::volumetric::{all_in_focus, depth_map, export_depth, export_stack, sweep, sweep_depths, SweepOptions};
use qclfm::{Error, Result};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "qclfm", version, about = "Quantum-correlation light-field microscopy simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a detection-event stream.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Acquisition time (default: simulation.duration_s).
        #[arg(long)]
        duration_s: Option<f64>,
        /// Also write truth.csv with the true momenta of detectable pairs.
        #[arg(long)]
        dump_truth: bool,
    },
    /// Refocus at one depth and retrieve the amplitude.
    Reconstruct(Common),
    /// Focal stack over a depth sweep.
    Stack(Common),
    /// Focal stack plus depth map.
    Depth(Common),
    /// Momentum-correlation histograms and sum-coordinate fit.
    FitMomentum(Common),
    /// Conventional depth of field, and the resolvability curve when events are given.
    Dof(Common),
    /// Coincidence image in idler-camera coordinates.
    Ghost(Common),
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Event file (EVT1, or CSV by extension).
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    z_um: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    z_min_um: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    z_max_um: Option<f64>,
    #[arg(long)]
    z_step_um: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    gate_ns: Option<f64>,
    /// GS early-stop residual (reconstruct, stack, depth) or contrast threshold (dof).
    #[arg(long)]
    threshold: Option<f64>,
}

struct Ctx {
    cfg: ExperimentConfig,
    base_dir: Option<PathBuf>,
    out: PathBuf,
    events: Option<PathBuf>,
}

impl Ctx {
    fn new(c: &Common, threshold_is_contrast: bool) -> Result<Self> {
        let mut cfg = match &c.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let r = &mut cfg.reconstruction;
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        if let Some(v) = c.z_um {
            r.z_um = v;
        }
        if let Some(v) = c.z_min_um {
            r.z_min_um = v;
        }
        if let Some(v) = c.z_max_um {
            r.z_max_um = v;
        }
        if let Some(v) = c.z_step_um {
            r.z_step_um = v;
        }
        if let Some(v) = c.iterations {
            r.iterations = v;
        }
        if let Some(v) = c.gate_ns {
            r.gate_ns = v;
        }
        if let Some(v) = c.threshold {
            if threshold_is_contrast {
                r.contrast_threshold = v;
            } else {
                r.residual_threshold = Some(v);
            }
        }
        cfg.validate()?;
        Ok(Ctx {
            cfg,
            base_dir: c.config.as_ref().and_then(|p| p.parent().map(Path::to_path_buf)),
            out: c.out.clone(),
            events: c.events.clone(),
        })
    }

    fn read_events(&self) -> Result<Vec<qclfm::detector::DetectionEvent>> {
        let p = self
            .events
            .as_ref()
            .ok_or_else(|| Error::config("--events", "an event file is required"))?;
        io::read_events(p)
    }

    fn lambda(&self) -> f64 {
        self.cfg.wavelength_um()
    }

    fn sweep_options(&self) -> SweepOptions {
        let r = &self.cfg.reconstruction;
        SweepOptions {
            refocus: r.refocus,
            retrieval: RetrievalOptions {
                iterations: r.iterations,
                threshold: r.residual_threshold,
            },
            ray_trace_only: false,
        }
    }

    fn path(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out)?;
        Ok(self.out.join(name))
    }

    fn summary(&self, v: Value) -> Result<()> {
        let text = serde_json::to_string_pretty(&v).expect("json") + "\n";
        io::write_text(&self.path("summary.json")?, &text)?;
        println!("{text}");
        Ok(())
    }
}

fn cmd_simulate(c: &Common, duration_s: Option<f64>, dump_truth: bool) -> Result<()> {
    let ctx = Ctx::new(c, false)?;
    let duration = duration_s.unwrap_or(ctx.cfg.simulation.duration_s);
    let scene = ctx.cfg.build_scene(ctx.base_dir.as_deref())?;
    let out = simulate(&ctx.cfg, scene.as_ref(), duration, dump_truth)?;
    io::write_evt1(&ctx.path("events.evt1")?, &out.events)?;
    if dump_truth {
        io::write_text(&ctx.path("truth.csv")?, &truth_csv(&out.truth))?;
    }
    ctx.summary(serde_json::to_value(&out.summary).expect("json"))
}

fn cmd_reconstruct(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c, false)?;
    let r = &ctx.cfg.reconstruction;
    let records = records_from_events(&ctx.read_events()?, &ctx.cfg, 0.0)?;
    let shifted = ray_trace_refocus(&records, r.z_um, &r.grid, ctx.lambda(), &r.refocus)?;
    let opts = ctx.sweep_options().retrieval;
    let result = gs_retrieve(&shifted, None, ctx.lambda(), &opts)?;
    io::write_fld1(&ctx.path("field.fld1")?, &result.field)?;
    io::write_pgm(&ctx.path("amplitude.pgm")?, &result.field.amplitude())?;
    io::write_pgm(&ctx.path("refocused.pgm")?, &shifted.amplitude)?;
    io::write_text(&ctx.path("error_trace.csv")?, &error_trace_csv(&result.error_trace))?;
    ctx.summary(json!({
        "z_um": r.z_um,
        "records": records.len(),
        "off_grid": shifted.off_grid,
        "iterations": result.iterations,
        "final_residual": result.error_trace.last(),
    }))
}

fn build_stack(ctx: &Ctx) -> Result<(qclfm::volumetric::FocalStack, usize)> {
    let r = &ctx.cfg.reconstruction;
    let records = records_from_events(&ctx.read_events()?, &ctx.cfg, 0.0)?;
    let depths = sweep_depths(r.z_min_um, r.z_max_um, r.z_step_um)?;
    Ok((sweep(&records, &depths, &r.grid, ctx.lambda(), &ctx.sweep_options())?, records.len()))
}

fn cmd_stack(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c, false)?;
    let (stack, n) = build_stack(&ctx)?;
    export_stack(&ctx.out, &stack, ctx.lambda())?;
    let (_, preview) = all_in_focus(&stack)?;
    io::write_pgm(&ctx.path("all_in_focus.pgm")?, &preview)?;
    ctx.summary(json!({ "records": n, "depths_um": stack.depths() }))
}

fn cmd_depth(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c, false)?;
    let (stack, n) = build_stack(&ctx)?;
    export_stack(&ctx.out, &stack, ctx.lambda())?;
    let (_, preview) = all_in_focus(&stack)?;
    io::write_pgm(&ctx.path("all_in_focus.pgm")?, &preview)?;
    let map = depth_map(&stack, &ctx.cfg.reconstruction.depth)?;
    export_depth(&ctx.out, &map, ctx.lambda())?;
    ctx.summary(json!({
        "records": n,
        "depths_um": stack.depths(),
        "foreground_fraction": map.foreground_fraction(),
    }))
}

fn cmd_fit_momentum(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c, false)?;
    let r = &ctx.cfg.reconstruction;
    let events = ctx.read_events()?;
    let pairs = momentum_pairs_from_events(&events, &ctx.cfg, 0.0)?;
    let acc = if r.subtract_accidentals {
        Some(momentum_pairs_from_events(&events, &ctx.cfg, r.accidental_shift_ns)?)
    } else {
        None
    };
    let h = joint_momentum_histogram(&pairs, acc.as_deref(), &r.histogram)?;
    io::write_pgm(&ctx.path("joint_x.pgm")?, &h.x_joint.to_image())?;
    io::write_pgm(&ctx.path("joint_y.pgm")?, &h.y_joint.to_image())?;
    io::write_pgm(&ctx.path("sum.pgm")?, &h.sum.to_image())?;
    let (fx, fy) = fit_sum_projection(&h)?;
    let pitch = ctx.cfg.pair_geometry()?.idler_momentum_pitch();
    let model = qclfm::spdc::momentum_sigma(&ctx.cfg.source.pump)?;
    ctx.summary(json!({
        "coincidences": pairs.len(),
        "accidentals": acc.as_ref().map(|a| a.len()),
        "low_count": h.low_count,
        "sigma_x_per_um": fx.sigma,
        "sigma_y_per_um": fy.sigma,
        "sigma_x_px": fx.sigma_px(pitch),
        "sigma_y_px": fy.sigma_px(pitch),
        "model_sigma_per_um": model,
        "momentum_pitch_per_um": pitch,
    }))
}

fn cmd_dof(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c, true)?;
    let conventional = conventional_dof(&ctx.cfg.microscope)?;
    let mut summary = json!({ "conventional_dof_um": conventional });
    if ctx.events.is_some() {
        let r = &ctx.cfg.reconstruction;
        let scene = ctx.cfg.build_scene(ctx.base_dir.as_deref())?;
        let chart = scene
            .and_then(|s| s.chart)
            .ok_or_else(|| Error::config("scene", "the resolvability curve needs a usaf scene"))?;
        let records = records_from_events(&ctx.read_events()?, &ctx.cfg, 0.0)?;
        let depths = sweep_depths(r.z_min_um, r.z_max_um, r.z_step_um)?;
        let (curve, reports) = dof_curve(
            &records,
            &depths,
            &r.grid,
            ctx.lambda(),
            &chart,
            r.contrast_threshold,
            &ctx.sweep_options(),
        )?;
        io::write_text(&ctx.path("metrics.csv")?, &report_csv(&reports))?;
        let finite = |v: f64| if v.is_finite() { Some(v) } else { None };
        summary["threshold"] = json!(r.contrast_threshold);
        summary["z_um"] = json!(curve.z_um);
        summary["smallest_resolved_um"] = json!(curve.smallest_um.iter().map(|&v| finite(v)).collect::<Vec<_>>());
        summary["monotone_in_abs_z"] = json!(curve.is_monotone_in_abs_z());
    }
    ctx.summary(summary)
}

fn cmd_ghost(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c, false)?;
    let d = &ctx.cfg.detector;
    let region = d.idler_region();
    let window = match region {
        IdlerRegion::Pixels { x0, y0, x1, y1, .. } => PixelWindow {
            x0,
            y0,
            width: x1 - x0,
            height: y1 - y0,
        },
        IdlerRegion::Camera { .. } => {
            let p = d.idler_params();
            PixelWindow {
                x0: 0,
                y0: 0,
                width: p.width_px as u32,
                height: p.height_px as u32,
            }
        }
    };
    let events = ctx.read_events()?;
    let pairs = pair_events(&events, ctx.cfg.reconstruction.gate_ns, &region, 0.0)?;
    let ghost = ghost_image(&pairs, &window);
    let singles = window.histogram(events.iter().filter(|e| region.contains(e)));
    io::write_pgm(&ctx.path("ghost.pgm")?, &ghost)?;
    io::write_image_fld1(&ctx.path("ghost.fld1")?, &ghost, ctx.lambda())?;
    let normalized = normalize_ghost(&ghost, &singles.gaussian_blur(2.0), 0.05)?;
    io::write_pgm(&ctx.path("ghost_normalized.pgm")?, &normalized)?;
    ctx.summary(json!({ "coincidences": pairs.len(), "window": [window.x0, window.y0, window.width, window.height] }))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate {
            common,
            duration_s,
            dump_truth,
        } => cmd_simulate(common, *duration_s, *dump_truth),
        Command::Reconstruct(c) => cmd_reconstruct(c),
        Command::Stack(c) => cmd_stack(c),
        Command::Depth(c) => cmd_depth(c),
        Command::FitMomentum(c) => cmd_fit_momentum(c),
        Command::Dof(c) => cmd_dof(c),
        Command::Ghost(c) => cmd_ghost(c),
    }
}

fn init_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("QCLFM_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| format!("QCLFM_THREADS must be a positive integer, got {v:?}"))?;
    if n == 0 {
        return Err("QCLFM_THREADS must be >= 1".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
