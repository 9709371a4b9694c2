use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cognimap_core::membank::{self, MemoryBank};
use cognimap_core::metrics::{self, MetricsReport};
use cognimap_core::pipeline::{
    build_problem, evaluate, frame_file, ingest_all, memory_pass, read_ground_truth, read_pgm, read_trajectory,
    run_dir, segment_sequence, static_points, write_dir_atomically, write_pgm, write_synth, write_trajectory,
    PipelineConfig, PipelineError, RunSummary, StaticAccumulator,
};
use cognimap_core::posegraph::solve;
use cognimap_core::synth::{generate, NoiseConfig, SceneConfig};
use cognimap_core::{Mask, Pose};
use log::info;

#[derive(Parser)]
#[command(name = "cognimap", version, about = "Dynamic-scene segmentation, scene memory and trajectory refinement")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Config file of `key=value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. `--set graph.solve.max_iter=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Frames between memory recalls.
    #[arg(long, global = true)]
    cadence: Option<usize>,
    /// Memory bank directory.
    #[arg(long, global = true)]
    bank: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence with ground truth.
    Synth(SynthArgs),
    /// Dynamic masks for every frame.
    Segment(SeqOut),
    /// Query the bank with a sequence without modifying it.
    Recall(SeqOnly),
    /// Refine the trajectory without memory.
    Optimize(OptimizeArgs),
    /// Full pipeline: segment, recall/update the bank, optimize.
    Run(SeqOut),
    /// Trajectory and mask metrics against ground truth.
    Eval(EvalArgs),
    /// Memory bank tools.
    Bank {
        #[command(subcommand)]
        command: BankCommand,
    },
}

#[derive(Subcommand)]
enum BankCommand {
    /// Print the map registry and occupancy statistics.
    Inspect {
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    frames: usize,
    #[arg(long, default_value_t = 1)]
    movers: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 96)]
    height: usize,
    /// Orbit start offset (rad); the same seed with another offset revisits the scene.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    orbit_offset: f64,
    /// Relative depth noise σ.
    #[arg(long, default_value_t = 0.005)]
    depth_noise: f64,
    /// Pose rotation noise σ (degrees).
    #[arg(long, default_value_t = 0.5)]
    rot_noise: f64,
    /// Pose translation noise σ (m).
    #[arg(long, default_value_t = 0.03)]
    trans_noise: f64,
    /// Flow noise σ (px).
    #[arg(long, default_value_t = 0.2)]
    flow_noise: f64,
    /// Keypoint noise σ (px).
    #[arg(long, default_value_t = 0.0)]
    keypoint_noise: f64,
}

#[derive(Args)]
struct SeqOnly {
    /// Sequence directory.
    #[arg(long)]
    seq: Option<PathBuf>,
}

#[derive(Args)]
struct SeqOut {
    #[arg(long)]
    seq: Option<PathBuf>,
    /// Output directory, replaced atomically.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    io: SeqOut,
    /// Use these masks (`NNNNNN.pgm`) instead of segmenting.
    #[arg(long)]
    masks: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Output directory of `run`; supplies the estimate, masks and timings.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Sequence directory; supplies `gt/trajectory.tum` and `gt/masks`.
    #[arg(long)]
    seq: Option<PathBuf>,
    /// Estimated trajectory (TUM).
    #[arg(long)]
    est: Option<PathBuf>,
    /// Ground-truth trajectory (TUM).
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    est_masks: Option<PathBuf>,
    #[arg(long)]
    gt_masks: Option<PathBuf>,
    /// Where to write metrics.json; defaults to the run directory or `.`.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(c) => CliError::Usage(c.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn load_config(g: &Global) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &g.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            PipelineConfig::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    let usage = |e: cognimap_core::pipeline::ConfigError| CliError::Usage(e.to_string());
    for kv in &g.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim()).map_err(usage)?;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(c) = g.cadence {
        cfg.set("cadence", &c.to_string()).map_err(usage)?;
    }
    if let Some(b) = &g.bank {
        cfg.paths.bank = Some(b.clone());
    }
    Ok(cfg)
}

fn required(flag: Option<&PathBuf>, fallback: Option<&PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or(fallback)
        .cloned()
        .ok_or_else(|| CliError::Usage(format!("missing --{name} (or paths.{name} in the config)")))
}

fn seq_path(cfg: &PipelineConfig, seq: Option<&PathBuf>) -> Result<PathBuf, CliError> {
    required(seq, cfg.paths.sequence.as_ref(), "sequence")
        .map_err(|_| CliError::Usage("missing --seq (or paths.sequence in the config)".into()))
}

fn out_path(cfg: &PipelineConfig, out: Option<&PathBuf>) -> Result<PathBuf, CliError> {
    required(out, cfg.paths.out.as_ref(), "out")
}

fn bank_path(cfg: &PipelineConfig) -> Result<PathBuf, CliError> {
    required(None, cfg.paths.bank.as_ref(), "bank")
}

fn bank_exists(dir: &Path) -> bool {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dir.exists() || ["old", "new"].iter().any(|s| dir.with_file_name(format!("{name}.{s}")).exists())
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn read_mask_dir(dir: &Path) -> Result<Vec<Mask>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| runtime(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    files.sort();
    files.iter().map(|p| read_pgm(p).map_err(runtime)).collect()
}

fn cmd_synth(a: &SynthArgs, cfg: &PipelineConfig) -> Result<(), CliError> {
    let scene = SceneConfig {
        seed: cfg.seed,
        width: a.width,
        height: a.height,
        frames: a.frames,
        movers: a.movers,
        orbit_offset: a.orbit_offset,
        noise: NoiseConfig {
            depth_rel: a.depth_noise,
            rot: a.rot_noise.to_radians(),
            trans: a.trans_noise,
            flow: a.flow_noise,
            keypoint: a.keypoint_noise,
        },
        ..Default::default()
    };
    let seq = generate(&scene).map_err(|e| CliError::Usage(e.to_string()))?;
    write_dir_atomically(&a.out, |dir| write_synth(dir, &seq))?;
    println!("wrote {} frames to {}", a.frames, a.out.display());
    Ok(())
}

fn cmd_segment(a: &SeqOut, cfg: &PipelineConfig) -> Result<(), CliError> {
    let seq = seq_path(cfg, a.seq.as_ref())?;
    let out = out_path(cfg, a.out.as_ref())?;
    let frames = ingest_all(&seq)?;
    let mut params = cfg.segment;
    params.seed = cfg.seed;
    let seg = segment_sequence(&frames, &params)?;
    write_dir_atomically(&out, |dir| {
        let masks = dir.join("masks");
        fs::create_dir_all(&masks).map_err(|source| PipelineError::Io { path: masks.clone(), source })?;
        for (f, m) in frames.iter().zip(&seg.masks) {
            write_pgm(&frame_file(&masks, f.frame_id, "pgm"), m)?;
        }
        Ok(())
    })?;
    println!(
        "segmented {} frames ({} full segmentations) into {}",
        frames.len(),
        seg.full.len(),
        out.display()
    );
    Ok(())
}

fn cmd_recall(a: &SeqOnly, cfg: &PipelineConfig) -> Result<(), CliError> {
    let seq = seq_path(cfg, a.seq.as_ref())?;
    let bank_dir = bank_path(cfg)?;
    let frames = ingest_all(&seq)?;
    let mut bank = if bank_exists(&bank_dir) { membank::load(&bank_dir).map_err(runtime)? } else { MemoryBank::new() };
    bank.params = cfg.recall;
    let mut params = cfg.segment;
    params.seed = cfg.seed;
    let seg = segment_sequence(&frames, &params)?;
    let mem = memory_pass(&frames, &seg.masks, &mut bank, cfg)?;
    let report = serde_json::json!({
        "events": mem.events,
        "recalled_map": mem.recalled.as_ref().map(|r| r.map.map_id),
        "alignment": mem.recalled.as_ref().map(|r| &r.alignment),
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    Ok(())
}

fn cmd_optimize(a: &OptimizeArgs, cfg: &PipelineConfig) -> Result<(), CliError> {
    let seq = seq_path(cfg, a.io.seq.as_ref())?;
    let out = out_path(cfg, a.io.out.as_ref())?;
    let frames = ingest_all(&seq)?;
    let masks = match &a.masks {
        Some(dir) => frames
            .iter()
            .map(|f| read_pgm(&frame_file(dir, f.frame_id, "pgm")))
            .collect::<Result<Vec<_>, _>>()?,
        None => {
            let mut params = cfg.segment;
            params.seed = cfg.seed;
            segment_sequence(&frames, &params)?.masks
        }
    };
    let mut acc = StaticAccumulator::new(cfg.voxel, cfg.voxel_frac);
    for (t, (f, m)) in frames.iter().zip(&masks).enumerate() {
        if t % cfg.stride == 0 {
            acc.add(&static_points(f, m, cfg.conf_min));
        }
    }
    let d_scene = cognimap_core::icp::bbox_diagonal(&acc.cloud.points);
    let problem = build_problem(&frames, &masks, cfg, d_scene, None)?;
    let result = solve(&problem, &cfg.graph.solve).map_err(runtime)?;
    let traj: Vec<Pose> = result.extrinsics().iter().map(Pose::inverse).collect();
    write_dir_atomically(&out, |dir| {
        write_trajectory(&dir.join("trajectory.tum"), &traj)?;
        let text = serde_json::to_string_pretty(&result.report).expect("serializable");
        let path = dir.join("solve.json");
        fs::write(&path, text + "\n").map_err(|source| PipelineError::Io { path, source })
    })?;
    println!(
        "cost {:.4} → {:.4} in {} iterations; trajectory written to {}",
        result.report.initial_cost,
        result.report.final_cost,
        result.report.iterations,
        out.display()
    );
    Ok(())
}

fn cmd_run(a: &SeqOut, cfg: &PipelineConfig) -> Result<(), CliError> {
    let seq = seq_path(cfg, a.seq.as_ref())?;
    let out = out_path(cfg, a.out.as_ref())?;
    let bank = bank_path(cfg)?;
    let output = run_dir(&seq, &bank, &out, cfg)?;
    let s = &output.summary;
    match (s.recalled_map, s.created_map) {
        (Some(id), _) => println!("recalled map {id}"),
        (_, Some(id)) => println!("created map {id}"),
        _ => println!("bank unchanged"),
    }
    println!(
        "{} frames, {} landmarks ({} from memory); outputs in {}",
        s.frames,
        s.landmarks,
        s.memory_landmarks,
        out.display()
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let est_path = a
        .est
        .clone()
        .or_else(|| a.run.as_ref().map(|r| r.join("trajectory.tum")))
        .ok_or_else(|| CliError::Usage("eval needs --est or --run".into()))?;
    let est = read_trajectory(&est_path)?;
    let (gt, seq_masks) = match (&a.gt, &a.seq) {
        (Some(p), _) => (read_trajectory(p)?, None),
        (None, Some(seq)) => {
            let (poses, _) = read_ground_truth(seq, &[])?
                .ok_or_else(|| runtime(format!("{}: no gt/trajectory.tum", seq.display())))?;
            let dir = seq.join("gt").join("masks");
            (poses, dir.exists().then_some(dir))
        }
        (None, None) => return Err(CliError::Usage("eval needs --gt or --seq".into())),
    };
    if est.len() != gt.len() {
        return Err(runtime(format!(
            "trajectory length mismatch: estimate has {} poses, ground truth {}",
            est.len(),
            gt.len()
        )));
    }
    let est_mask_dir = a.est_masks.clone().or_else(|| a.run.as_ref().map(|r| r.join("masks")).filter(|d| d.exists()));
    let gt_mask_dir = a.gt_masks.clone().or(seq_masks);
    let masks = match (est_mask_dir, gt_mask_dir) {
        (Some(e), Some(g)) => Some((read_mask_dir(&e)?, read_mask_dir(&g)?)),
        _ => None,
    };
    let timings = a
        .run
        .as_ref()
        .map(|r| r.join("run.json"))
        .filter(|p| p.exists())
        .and_then(|p| fs::read_to_string(p).ok())
        .and_then(|t| serde_json::from_str::<RunSummary>(&t).ok())
        .map(|s| s.timings)
        .unwrap_or_default();
    let report: MetricsReport = evaluate(&est, &gt, masks.as_ref().map(|(e, g)| (e.as_slice(), g.as_slice())), timings)
        .map_err(|e: metrics::MetricsError| runtime(e))?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.run.clone().unwrap_or_else(|| PathBuf::from(".")).join("metrics.json"));
    write_json(&out, &report)?;
    println!(
        "ATE {:.4} m, RPE {:.4} m / {:.3}°{}",
        report.ate_rmse,
        report.rpe_trans,
        report.rpe_rot,
        report.mask_iou.map(|v| format!(", mask IoU {v:.3}")).unwrap_or_default()
    );
    info!("metrics written to {}", out.display());
    Ok(())
}

fn cmd_bank_inspect(cfg: &PipelineConfig, json: bool) -> Result<(), CliError> {
    let dir = bank_path(cfg)?;
    if !bank_exists(&dir) {
        return Err(runtime(format!("{}: no bank", dir.display())));
    }
    let bank = membank::load(&dir).map_err(runtime)?;
    let rows: Vec<serde_json::Value> = bank
        .maps()
        .map(|m| {
            serde_json::json!({
                "map_id": m.map_id,
                "points": m.cloud.len(),
                "voxel_size": m.voxel_size,
                "occupied_voxels": m.occupied_voxels().len(),
                "keyframes": m.keyframe_feats.len(),
                "visits": m.visits,
                "diameter": m.diameter(),
            })
        })
        .collect();
    if json {
        let v = serde_json::json!({ "maps": rows, "feature_entries": bank.table().len() });
        println!("{}", serde_json::to_string_pretty(&v).expect("serializable"));
        return Ok(());
    }
    println!("{:>6} {:>8} {:>8} {:>9} {:>9} {:>6} {:>9}", "map", "points", "voxels", "voxel(m)", "keyframes", "visits", "diam(m)");
    for m in bank.maps() {
        println!(
            "{:>6} {:>8} {:>8} {:>9.4} {:>9} {:>6} {:>9.3}",
            m.map_id,
            m.cloud.len(),
            m.occupied_voxels().len(),
            m.voxel_size,
            m.keyframe_feats.len(),
            m.visits,
            m.diameter()
        );
    }
    println!("{} maps, {} feature entries", bank.len(), bank.table().len());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli.global)?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, &cfg),
        Command::Segment(a) => cmd_segment(a, &cfg),
        Command::Recall(a) => cmd_recall(a, &cfg),
        Command::Optimize(a) => cmd_optimize(a, &cfg),
        Command::Run(a) => cmd_run(a, &cfg),
        Command::Eval(a) => cmd_eval(a),
        Command::Bank {
            command: BankCommand::Inspect { json },
        } => cmd_bank_inspect(&cfg, *json),
    }
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
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
