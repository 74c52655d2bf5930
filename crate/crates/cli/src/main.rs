//! Command-line surface for the reconstruction pipeline: dataset synthesis,
//! training, mesh extraction, score-map rendering and evaluation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use refneus_core::bvh::Bvh;
use refneus_core::math::vec3;
use refneus_core::mesh::{extract_from_field, ply};
use refneus_core::metrics::EvalReport;
use refneus_core::render::{render_view, NeuralScene, SceneField};
use refneus_core::scene::load_scene;
use refneus_core::score::{score_map, write_score_map, ScoreParams};
use refneus_core::synth::{generate_scene, write_scene, SceneSpec};
use refneus_core::train::{checkpoint, train, TrainConfig, TrainError};

/// Numerical-halt exit code; usage/config problems exit with 2.
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "refneus", version, about = "Reflection-aware neural implicit surface reconstruction")]
struct Cli {
    /// Worker thread cap (falls back to REFNEUS_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic glossy scene directory.
    Synth(SynthArgs),
    /// Train the fields on a scene.
    Train(TrainArgs),
    /// Extract a mesh from a checkpoint via marching cubes.
    Extract(ExtractArgs),
    /// Render a per-pixel reflection-score map for one view.
    Scoremap(ScoremapArgs),
    /// Evaluate a mesh or checkpoint against a scene's ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene spec JSON; the built-in glossy sphere when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config JSON; the desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation toggles, e.g. "rs=off,vis=off,ref=off".
    #[arg(long)]
    ablate: Option<String>,
    /// Resume from a checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Marching-cubes lattice resolution.
    #[arg(long, default_value_t = 512)]
    res: usize,
    #[arg(long)]
    out: PathBuf,
    /// Write ASCII PLY instead of binary little-endian.
    #[arg(long)]
    ascii: bool,
}

#[derive(Args)]
struct ScoremapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// View index within the scene.
    #[arg(long)]
    view: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Recovered mesh (PLY). Mutually exclusive with --checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    mesh: Option<PathBuf>,
    /// Checkpoint to extract and evaluate (enables MAE and PSNR).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Extraction resolution when evaluating a checkpoint.
    #[arg(long, default_value_t = 256)]
    res: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also dump per-view color/normal/depth/weight renders here.
    #[arg(long)]
    dump: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("REFNEUS_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Extract(args) => cmd_extract(args),
        Command::Scoremap(args) => cmd_scoremap(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

/// Written atomically into the output directory before a run mutates it.
fn write_run_manifest(out_dir: &Path, command: &str, config_path: Option<&Path>, seed: u64) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let manifest = serde_json::json!({
        "command": command,
        "config": config_path.map(|p| p.display().to_string()),
        "out_dir": out_dir.display().to_string(),
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
        "timestamp_unix": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    });
    let tmp = out_dir.join(".run_manifest.json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
    std::fs::rename(&tmp, out_dir.join("run_manifest.json"))?;
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let mut spec: SceneSpec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read spec {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| "invalid scene spec JSON")?
        }
        None => SceneSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(|e| anyhow::anyhow!(e))?;
    write_run_manifest(&args.out, "synth", args.spec.as_deref(), spec.seed)?;
    let scene = generate_scene(&spec).map_err(|e| anyhow::anyhow!(e))?;
    write_scene(&scene, &args.out)?;
    println!(
        "wrote {} views ({}x{}) to {}",
        scene.dataset.num_views(),
        spec.image_size,
        spec.image_size,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| "invalid train config JSON")?
        }
        None => TrainConfig::desk(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(ablate) = &args.ablate {
        cfg.apply_ablation(ablate)?;
    }
    cfg.validate()?;
    let dataset = load_scene(&args.scene.join("manifest.json"))?;
    write_run_manifest(&args.out, "train", args.config.as_deref(), cfg.seed)?;
    // echo the resolved config (ablations applied) next to the outputs
    std::fs::write(
        args.out.join("config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;
    match train(&dataset, &cfg, Some(&args.out), args.resume.as_deref()) {
        Ok(result) => {
            println!(
                "trained {} iterations; final loss {:.5}; checkpoint {}",
                result.completed_iters,
                result.log.records.last().map(|r| r.total_loss).unwrap_or(f64::NAN),
                args.out.join("final.rnkp").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(e @ (TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. })) => {
            eprintln!("error: {e}");
            eprintln!("the last periodic checkpoint (if any) is preserved in {}", args.out.display());
            Ok(ExitCode::from(EXIT_NUMERICAL))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_extract(args: ExtractArgs) -> Result<ExitCode> {
    let (_cfg, sdf, _rad, _dev, iteration) = checkpoint::load_networks(&args.checkpoint)?;
    if args.res < 2 {
        bail!("--res must be at least 2");
    }
    let ws = std::sync::Mutex::new(refneus_core::field::SdfWorkspace::new(&sdf, 4096));
    let eval = |pts: &[[f64; 3]]| -> Vec<f64> {
        let mut ws = ws.lock().unwrap();
        let mut out = Vec::new();
        sdf.sdf_values_f64(pts, &mut ws, &mut out);
        out
    };
    let mut mesh = extract_from_field(&eval, vec3(-1.0, -1.0, -1.0), vec3(1.0, 1.0, 1.0), args.res, 0.0);
    mesh.iteration = iteration;
    if mesh.is_empty() {
        eprintln!("warning: the SDF has no zero crossing inside the unit box; writing an empty mesh");
    }
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    if args.ascii {
        ply::write_ascii(&mesh, &args.out)?;
    } else {
        ply::write_binary(&mesh, &args.out)?;
    }
    println!(
        "extracted {} vertices / {} triangles at res {} -> {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        args.res,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_scoremap(args: ScoremapArgs) -> Result<ExitCode> {
    let (cfg, sdf, rad, dev, _) = checkpoint::load_networks(&args.checkpoint)?;
    let dataset = load_scene(&args.scene.join("manifest.json"))?;
    if args.view >= dataset.num_views() {
        bail!("view {} out of range (scene has {})", args.view, dataset.num_views());
    }
    let bvh = if cfg.use_visibility {
        let mesh = refneus_core::train::extract_intermediate_mesh(&sdf, cfg.mesh_res_intermediate);
        Bvh::build(&mesh)
    } else {
        None
    };
    let scene_field = NeuralScene { sdf: &sdf, radiance: &rad, deviation: &dev };
    let score_params = ScoreParams {
        gamma: cfg.gamma,
        beta_floor: cfg.beta_sq_min,
        eps_vis: 2.0 * (2.0 / cfg.mesh_res_intermediate as f64),
        use_visibility: cfg.use_visibility,
    };
    let seed = args.seed.unwrap_or(cfg.seed);
    let scores = score_map(
        &scene_field,
        &dataset.frames,
        args.view,
        bvh.as_ref(),
        &score_params,
        &cfg.render_params(),
        seed,
    );
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let ablation = format!(
        "rs={},vis={},ref={}",
        if cfg.use_reflection_score { "on" } else { "off" },
        if cfg.use_visibility { "on" } else { "off" },
        if cfg.use_reflection_direction { "on" } else { "off" }
    );
    let cam = &dataset.frames[args.view].camera;
    write_score_map(&scores, cam.width, cam.height, &score_params, &ablation, &args.out)?;
    println!("wrote score map for view {} -> {}", args.view, args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let dataset = load_scene(&args.scene.join("manifest.json"))?;
    let mut report = EvalReport {
        accuracy: None,
        completeness: None,
        mae_deg: None,
        psnr_db: None,
    };

    let recovered = if let Some(mesh_path) = &args.mesh {
        Some(ply::read(mesh_path)?)
    } else if let Some(ckpt) = &args.checkpoint {
        let (cfg, sdf, rad, dev, _) = checkpoint::load_networks(ckpt)?;
        let ws = std::sync::Mutex::new(refneus_core::field::SdfWorkspace::new(&sdf, 4096));
        let eval_fn = |pts: &[[f64; 3]]| -> Vec<f64> {
            let mut ws = ws.lock().unwrap();
            let mut out = Vec::new();
            sdf.sdf_values_f64(pts, &mut ws, &mut out);
            out
        };
        let mesh = extract_from_field(
            &eval_fn,
            vec3(-1.0, -1.0, -1.0),
            vec3(1.0, 1.0, 1.0),
            args.res,
            0.0,
        );
        drop(ws);
        let field = NeuralScene { sdf: &sdf, radiance: &rad, deviation: &dev };
        let (mae, psnr) = refneus_core::metrics::eval_renderings(
            &field,
            &dataset,
            &cfg.render_params(),
            args.seed,
        );
        report.mae_deg = mae;
        report.psnr_db = psnr.filter(|p| p.is_finite());
        if let Some(dump) = &args.dump {
            for (vi, frame) in dataset.frames.iter().enumerate() {
                let view = render_view(&field, &frame.camera, &cfg.render_params(), args.seed ^ vi as u64);
                view.write_pngs(dump, &format!("view_{vi:03}"))?;
            }
        }
        Some(mesh)
    } else {
        bail!("provide --mesh or --checkpoint");
    };

    if let (Some(mesh), Some(gt_path)) = (&recovered, &dataset.gt_mesh_path) {
        if mesh.is_empty() {
            eprintln!("warning: recovered mesh is empty; geometry metrics stay null");
        } else {
            let gt = ply::read(gt_path)?;
            let (acc, comp) =
                refneus_core::metrics::eval_mesh_against_gt(mesh, &gt, &dataset, 100_000, args.seed);
            report.accuracy = Some(acc);
            report.completeness = Some(comp);
        }
    } else if dataset.gt_mesh_path.is_none() {
        eprintln!("note: scene has no ground-truth mesh; geometry metrics stay null");
    }

    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(ExitCode::SUCCESS)
}
