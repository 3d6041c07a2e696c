//! Command-line interface for the multi-view stereo engine.
//!
//! Subcommands: `synth`, `train`, `predict`, `fuse`, `eval`, `iter-study`,
//! `ablate`. Shared flags: `--config <file>`, `--seed <n>`,
//! `--weights <file>`, `--out <path>`, `--dump-iters`. The worker count is
//! capped by the `MVSR_THREADS` environment variable. Exit codes: 0 on
//! success, 2 on validation failures, 3 on numeric failures.

use mvsr_core::diffkern::{load_weights, save_weights, ParameterStore};
use mvsr_core::error::{Error, Result};
use mvsr_core::evalmetrics::{
    aggregate_depth_reports, depth_metrics, depth_report_json, point_metrics, point_report_json,
};
use mvsr_core::fusion::fuse;
use mvsr_core::io::{pfm, ply};
use mvsr_core::pipeline::{
    load_scene_dir, run_ablation, run_iter_study, run_predict, run_train, ModelNets,
    PipelineConfig, SceneData,
};
use mvsr_core::pointflow::AblationMode;
use mvsr_core::synthdata::{generate_scene, write_scene_dir};
use mvsr_core::upsample::nn_resample;
use std::path::{Path, PathBuf};

const USAGE: &str = "\
mvsr — multi-view depth prediction, refinement, fusion and evaluation

USAGE:
  mvsr synth      --out DIR [--seed N] [--count K] [--config FILE]
  mvsr train      --scenes DIR --val DIR --out WEIGHTS [--config FILE] [--seed N]
  mvsr predict    --scenes SCENE_DIR --weights FILE --out DIR [--config FILE] [--dump-iters]
  mvsr fuse       --scenes SCENE_DIR --depths DIR --out CLOUD.ply [--config FILE]
  mvsr eval       --scenes SCENE_DIR --depths DIR [--out REPORT.jsonl] [--config FILE]
  mvsr iter-study --scenes DIR --weights FILE [--out REPORT.jsonl] [--config FILE]
  mvsr ablate     --scenes DIR --weights FILE --mode MODE [--out REPORT.jsonl] [--config FILE]

FLAGS:
  --config FILE   key = value configuration (unknown keys are rejected)
  --seed N        seed override (scene generation / training)
  --weights FILE  weight file (*.3dvw)
  --out PATH      output file or directory
  --dump-iters    write every refinement stage as PFM files
  --mode MODE     ablation mode: full | no3d | single_scale | avg_feats

The MVSR_THREADS environment variable caps the worker count.
";

struct Args {
    flags: std::collections::BTreeMap<String, String>,
    bools: std::collections::BTreeSet<String>,
}

impl Args {
    fn parse(argv: &[String]) -> Result<Args> {
        let mut flags = std::collections::BTreeMap::new();
        let mut bools = std::collections::BTreeSet::new();
        let mut i = 0;
        while i < argv.len() {
            let a = &argv[i];
            if !a.starts_with("--") {
                return Err(Error::Config(format!("unexpected argument `{a}`")));
            }
            let name = a.trim_start_matches("--").to_string();
            if name == "dump-iters" {
                bools.insert(name);
                i += 1;
            } else {
                let v = argv
                    .get(i + 1)
                    .ok_or_else(|| Error::Config(format!("flag --{name} needs a value")))?;
                flags.insert(name, v.clone());
                i += 2;
            }
        }
        Ok(Args { flags, bools })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.flags.get(name).map(|s| s.as_str())
    }

    fn require(&self, name: &str) -> Result<&str> {
        self.get(name).ok_or_else(|| Error::Config(format!("missing required flag --{name}")))
    }

    fn has(&self, name: &str) -> bool {
        self.bools.contains(name)
    }
}

fn load_config(args: &Args) -> Result<PipelineConfig> {
    match args.get("config") {
        Some(path) => PipelineConfig::load(Path::new(path)),
        None => Ok(PipelineConfig::default()),
    }
}

fn log_config(cfg: &PipelineConfig, out_dir: Option<&Path>) -> Result<()> {
    eprint!("{}", cfg.render());
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        std::fs::write(dir.join("config.resolved"), cfg.render())
            .map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    Ok(())
}

fn scene_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    // a directory that itself holds poses.txt is a single scene
    if dir.join("poses.txt").exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut subs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("poses.txt").exists())
        .collect();
    subs.sort();
    if subs.is_empty() {
        return Err(Error::Config(format!("no scenes found under {}", dir.display())));
    }
    Ok(subs)
}

fn load_scenes(dir: &Path, cfg: &PipelineConfig) -> Result<Vec<SceneData>> {
    scene_subdirs(dir)?.iter().map(|p| load_scene_dir(p, cfg)).collect()
}

/// Reference point cloud for a scene: its ground-truth depths fused with a
/// strict consistency check, which for analytic depths lies exactly on the
/// true surfaces.
fn gt_cloud(scene: &SceneData) -> Result<Vec<nalgebra::Vector3<f64>>> {
    if scene.gt_depths.is_empty() {
        return Err(Error::Config("scene has no ground-truth depths".into()));
    }
    let strict = mvsr_core::fusion::FusionParams {
        rel_tol: 0.01,
        min_consistent: 1,
        average_positions: false,
    };
    Ok(fuse(&scene.gt_depths, &scene.cams, &strict)?.positions)
}

fn write_depth_dir(dir: &Path, label: &str, maps: &[mvsr_core::geometry::DepthMap]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for (i, m) in maps.iter().enumerate() {
        pfm::write(&dir.join(format!("{label}_{i:04}.pfm")), m)?;
    }
    Ok(())
}

fn cmd_synth(args: &Args) -> Result<()> {
    let cfg = load_config(args)?;
    let seed: u64 = match args.get("seed") {
        Some(s) => s.parse().map_err(|_| Error::Config(format!("bad seed `{s}`")))?,
        None => 1,
    };
    let count: usize = match args.get("count") {
        Some(s) => s.parse().map_err(|_| Error::Config(format!("bad count `{s}`")))?,
        None => 1,
    };
    let out = PathBuf::from(args.require("out")?);
    log_config(&cfg, Some(&out))?;
    for k in 0..count {
        let spec = generate_scene(seed + k as u64, cfg.synth_boxes, cfg.synth_frames);
        let dir = if count == 1 { out.clone() } else { out.join(format!("scene_{k:04}")) };
        write_scene_dir(&spec, &dir)?;
        eprintln!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_train(args: &Args) -> Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(s) = args.get("seed") {
        cfg.train_seed = s.parse().map_err(|_| Error::Config(format!("bad seed `{s}`")))?;
    }
    let out = PathBuf::from(args.require("out")?);
    let out_dir = out.parent().unwrap_or(Path::new(".")).to_path_buf();
    log_config(&cfg, Some(&out_dir))?;
    let train = load_scenes(Path::new(args.require("scenes")?), &cfg)?;
    let val = load_scenes(Path::new(args.require("val")?), &cfg)?;
    let (store, report) = run_train(&train, &val, &cfg, Some(&out_dir))?;
    save_weights(&store, &out)?;
    let log_path = out_dir.join("train_log.jsonl");
    std::fs::write(&log_path, report.log.join("\n") + "\n")
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn load_model(args: &Args, cfg: &PipelineConfig) -> Result<(ParameterStore, ModelNets)> {
    let store = load_weights(Path::new(args.require("weights")?))?;
    let nets = ModelNets::attach(&store, cfg)?;
    Ok((store, nets))
}

fn cmd_predict(args: &Args) -> Result<()> {
    let cfg = load_config(args)?;
    let out = PathBuf::from(args.require("out")?);
    log_config(&cfg, Some(&out))?;
    let (store, nets) = load_model(args, &cfg)?;
    let scene = load_scene_dir(Path::new(args.require("scenes")?), &cfg)?;
    let pred = run_predict(&scene, &cfg, &store, &nets, AblationMode::Full)?;
    write_depth_dir(&out, "depth", &pred.final_depths)?;
    if args.has("dump-iters") {
        for (lo, li, maps) in &pred.refine.snapshots {
            write_depth_dir(&out.join("iters"), &format!("d_{lo}_{li}"), maps)?;
        }
    }
    eprintln!("wrote {} depth maps to {}", pred.final_depths.len(), out.display());
    Ok(())
}

fn read_depth_dir(dir: &Path, label: &str, count: usize) -> Result<Vec<mvsr_core::geometry::DepthMap>> {
    (0..count).map(|i| pfm::read(&dir.join(format!("{label}_{i:04}.pfm")))).collect()
}

fn cmd_fuse(args: &Args) -> Result<()> {
    let cfg = load_config(args)?;
    let scene = load_scene_dir(Path::new(args.require("scenes")?), &cfg)?;
    let depths = read_depth_dir(Path::new(args.require("depths")?), "depth", scene.n_frames())?;
    let cloud = fuse(&depths, &scene.cams, &cfg.fusion_params())?;
    let out = PathBuf::from(args.require("out")?);
    ply::write_points(&out, &cloud.positions, &[], &[], Some(&cloud.support))?;
    eprintln!("fused {} points to {}", cloud.len(), out.display());
    Ok(())
}

fn cmd_eval(args: &Args) -> Result<()> {
    let cfg = load_config(args)?;
    let scene = load_scene_dir(Path::new(args.require("scenes")?), &cfg)?;
    if scene.gt_depths.is_empty() {
        return Err(Error::Config("eval needs ground-truth depths in the scene".into()));
    }
    let depths = read_depth_dir(Path::new(args.require("depths")?), "depth", scene.n_frames())?;
    let mut lines = Vec::new();
    let mut reports = Vec::new();
    for (p, g) in depths.iter().zip(&scene.gt_depths) {
        let gt = nn_resample(g, p.width, p.height);
        reports.push(depth_metrics(p, &gt, cfg.eval_min_gt)?);
    }
    let agg = aggregate_depth_reports(&reports);
    lines.push(depth_report_json("depth", &agg));
    let cloud = fuse(&depths, &scene.cams, &cfg.fusion_params())?;
    if !cloud.is_empty() {
        let reference = gt_cloud(&scene)?;
        let pm = point_metrics(&cloud.positions, &reference, cfg.eval_tau)?;
        lines.push(point_report_json("points", &pm));
    }
    let text = lines.join("\n") + "\n";
    match args.get("out") {
        Some(path) => std::fs::write(path, &text).map_err(|e| Error::io(path.to_string(), e))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_iter_study(args: &Args) -> Result<()> {
    let cfg = load_config(args)?;
    let (store, nets) = load_model(args, &cfg)?;
    let scenes = load_scenes(Path::new(args.require("scenes")?), &cfg)?;
    let gt_clouds: Result<Vec<_>> = scenes.iter().map(gt_cloud).collect();
    let rows = run_iter_study(&scenes, &gt_clouds?, &cfg, &store, &nets)?;
    let text = rows.iter().map(|r| r.json()).collect::<Vec<_>>().join("\n") + "\n";
    match args.get("out") {
        Some(path) => std::fs::write(path, &text).map_err(|e| Error::io(path.to_string(), e))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_ablate(args: &Args) -> Result<()> {
    let cfg = load_config(args)?;
    let mode = AblationMode::from_name(args.require("mode")?)?;
    let (store, nets) = load_model(args, &cfg)?;
    let scenes = load_scenes(Path::new(args.require("scenes")?), &cfg)?;
    let gt_clouds: Result<Vec<_>> = scenes.iter().map(gt_cloud).collect();
    let report = run_ablation(&scenes, &gt_clouds?, &cfg, &store, &nets, mode)?;
    let text = report.json() + "\n";
    match args.get("out") {
        Some(path) => std::fs::write(path, &text).map_err(|e| Error::io(path.to_string(), e))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn dispatch() -> Result<()> {
    mvsr_core::parallel::init_thread_pool();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let Some(cmd) = argv.first() else {
        eprint!("{USAGE}");
        return Err(Error::Config("missing subcommand".into()));
    };
    let args = Args::parse(&argv[1..])?;
    match cmd.as_str() {
        "synth" => cmd_synth(&args),
        "train" => cmd_train(&args),
        "predict" => cmd_predict(&args),
        "fuse" => cmd_fuse(&args),
        "eval" => cmd_eval(&args),
        "iter-study" => cmd_iter_study(&args),
        "ablate" => cmd_ablate(&args),
        "--help" | "-h" | "help" => {
            print!("{USAGE}");
            Ok(())
        }
        other => {
            eprint!("{USAGE}");
            Err(Error::Config(format!("unknown subcommand `{other}`")))
        }
    }
}

fn main() {
    match dispatch() {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
