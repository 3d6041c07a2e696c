//! C ABI for the multi-view stereo engine.
//!
//! The engine is an opaque handle carrying a configuration and (after
//! `mvsr_engine_init_weights` or `mvsr_engine_load_weights`) a parameter
//! store with the attached model. All functions return [`MvsrStatus`];
//! details of the last failure are available through
//! `mvsr_last_error_message`. Paths and option strings are NUL-terminated
//! UTF-8.

use mvsr_core::diffkern::{load_weights, save_weights, ParameterStore};
use mvsr_core::error::Error;
use mvsr_core::evalmetrics::{aggregate_depth_reports, depth_metrics};
use mvsr_core::fusion::fuse;
use mvsr_core::pipeline::{load_scene_dir, run_predict, run_train, ModelNets, PipelineConfig};
use mvsr_core::pointflow::AblationMode;
use mvsr_core::synthdata::{generate_scene, write_scene_dir};
use mvsr_core::upsample::nn_resample;
use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::path::{Path, PathBuf};

/// Status codes returned by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MvsrStatus {
    MvsrOk = 0,
    MvsrInvalidArgument = 1,
    MvsrIoError = 2,
    MvsrParseError = 3,
    MvsrCorruptFile = 4,
    MvsrVersionMismatch = 5,
    MvsrNumericError = 6,
    MvsrNoData = 7,
    MvsrNotReady = 8,
}

/// Opaque engine handle.
pub struct MvsrEngine {
    cfg: PipelineConfig,
    model: Option<(ParameterStore, ModelNets)>,
}

/// Aggregated 2D depth metrics.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MvsrDepthMetrics {
    pub abs_rel: f64,
    pub abs_diff: f64,
    pub abs_inv: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub delta_125: f64,
    pub delta_125_2: f64,
    pub delta_125_3: f64,
    pub pixel_count: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: Vec<u8> = msg.bytes().filter(|b| *b != 0).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &Error) -> MvsrStatus {
    match err {
        Error::Io { .. } => MvsrStatus::MvsrIoError,
        Error::Parse { .. } => MvsrStatus::MvsrParseError,
        Error::CorruptFile(_) => MvsrStatus::MvsrCorruptFile,
        Error::VersionMismatch { .. } => MvsrStatus::MvsrVersionMismatch,
        Error::NonFiniteLoss { .. } | Error::NumericFailure { .. } => MvsrStatus::MvsrNumericError,
        Error::EmptyCloud | Error::NoValidPixels | Error::NoValidView => MvsrStatus::MvsrNoData,
        _ => MvsrStatus::MvsrInvalidArgument,
    }
}

fn fail(err: Error) -> MvsrStatus {
    set_error(&err.to_string());
    status_of(&err)
}

/// # Safety
/// `s` must be a valid NUL-terminated string or null.
unsafe fn path_arg(s: *const c_char) -> Result<PathBuf, MvsrStatus> {
    if s.is_null() {
        set_error("null path argument");
        return Err(MvsrStatus::MvsrInvalidArgument);
    }
    match CStr::from_ptr(s).to_str() {
        Ok(t) => Ok(PathBuf::from(t)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(MvsrStatus::MvsrInvalidArgument)
        }
    }
}

unsafe fn engine_arg<'a>(e: *mut MvsrEngine) -> Result<&'a mut MvsrEngine, MvsrStatus> {
    if e.is_null() {
        set_error("null engine handle");
        return Err(MvsrStatus::MvsrInvalidArgument);
    }
    Ok(&mut *e)
}

/// Library version string; static storage, do not free.
#[no_mangle]
pub extern "C" fn mvsr_version() -> *const c_char {
    concat!("mvsr ", env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the last error message into `buf` (truncated to `len - 1` bytes,
/// always NUL-terminated). Returns the full message length.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null (query mode).
#[no_mangle]
pub unsafe extern "C" fn mvsr_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Fresh engine with the default configuration. Free with
/// `mvsr_engine_free`.
#[no_mangle]
pub extern "C" fn mvsr_engine_new() -> *mut MvsrEngine {
    mvsr_core::parallel::init_thread_pool();
    Box::into_raw(Box::new(MvsrEngine { cfg: PipelineConfig::default(), model: None }))
}

/// # Safety
/// `engine` must come from `mvsr_engine_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mvsr_engine_free(engine: *mut MvsrEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Replace the configuration from a key-value file.
///
/// # Safety
/// Pointer contracts as documented on the module.
#[no_mangle]
pub unsafe extern "C" fn mvsr_engine_load_config(
    engine: *mut MvsrEngine,
    path: *const c_char,
) -> MvsrStatus {
    let eng = match engine_arg(engine) {
        Ok(e) => e,
        Err(s) => return s,
    };
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match PipelineConfig::load(&path) {
        Ok(cfg) => {
            eng.cfg = cfg;
            eng.model = None; // widths may have changed
            MvsrStatus::MvsrOk
        }
        Err(e) => fail(e),
    }
}

/// Set one configuration option, e.g. key `"fusion.rel_tol"` value `"0.02"`.
///
/// # Safety
/// Pointer contracts as documented on the module.
#[no_mangle]
pub unsafe extern "C" fn mvsr_engine_set_option(
    engine: *mut MvsrEngine,
    key: *const c_char,
    value: *const c_char,
) -> MvsrStatus {
    let eng = match engine_arg(engine) {
        Ok(e) => e,
        Err(s) => return s,
    };
    let (key, value) = match (path_arg(key), path_arg(value)) {
        (Ok(k), Ok(v)) => (k, v),
        (Err(s), _) | (_, Err(s)) => return s,
    };
    let text = format!("{}\n{} = {}\n", eng.cfg.render(), key.display(), value.display());
    match PipelineConfig::parse(&text) {
        Ok(cfg) => {
            eng.cfg = cfg;
            eng.model = None;
            MvsrStatus::MvsrOk
        }
        Err(e) => fail(e),
    }
}

/// Initialize fresh, untrained weights for the configured model.
///
/// # Safety
/// Pointer contracts as documented on the module.
#[no_mangle]
pub unsafe extern "C" fn mvsr_engine_init_weights(engine: *mut MvsrEngine, seed: u64) -> MvsrStatus {
    let eng = match engine_arg(engine) {
        Ok(e) => e,
        Err(s) => return s,
    };
    let mut store = ParameterStore::new(seed);
    let nets = ModelNets::register(&mut store, &eng.cfg);
    eng.model = Some((store, nets));
    MvsrStatus::MvsrOk
}

/// # Safety
/// Pointer contracts as documented on the module.
#[no_mangle]
pub unsafe extern "C" fn mvsr_engine_load_weights(
    engine: *mut MvsrEngine,
    path: *const c_char,
) -> MvsrStatus {
    let eng = match engine_arg(engine) {
        Ok(e) => e,
        Err(s) => return s,
    };
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let store = match load_weights(&path) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    match ModelNets::attach(&store, &eng.cfg) {
        Ok(nets) => {
            eng.model = Some((store, nets));
            MvsrStatus::MvsrOk
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// Pointer contracts as documented on the module.
#[no_mangle]
pub unsafe extern "C" fn mvsr_engine_save_weights(
    engine: *mut MvsrEngine,
    path: *const c_char,
) -> MvsrStatus {
    let eng = match engine_arg(engine) {
        Ok(e) => e,
        Err(s) => return s,
    };
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match &eng.model {
        Some((store, _)) => match save_weights(store, &path) {
            Ok(()) => MvsrStatus::MvsrOk,
            Err(e) => fail(e),
        },
        None => {
            set_error("no weights loaded");
            MvsrStatus::MvsrNotReady
        }
    }
}

/// Write a synthetic scene directory (images, ground-truth depth, cameras).
///
/// # Safety
/// Pointer contracts as documented on the module.
#[no_mangle]
pub unsafe extern "C" fn mvsr_generate_scene(
    seed: u64,
    n_boxes: usize,
    n_frames: usize,
    out_dir: *const c_char,
) -> MvsrStatus {
    let dir = match path_arg(out_dir) {
        Ok(p) => p,
        Err(s) => return s,
    };
    if n_frames == 0 {
        set_error("n_frames must be positive");
        return MvsrStatus::MvsrInvalidArgument;
    }
    let spec = generate_scene(seed, n_boxes, n_frames);
    match write_scene_dir(&spec, &dir) {
        Ok(()) => MvsrStatus::MvsrOk,
        Err(e) => fail(e),
    }
}

fn require_model(eng: &MvsrEngine) -> Result<&(ParameterStore, ModelNets), MvsrStatus> {
    eng.model.as_ref().ok_or_else(|| {
        set_error("engine has no weights; call mvsr_engine_init_weights or mvsr_engine_load_weights");
        MvsrStatus::MvsrNotReady
    })
}

fn predict_into(
    eng: &MvsrEngine,
    scene_dir: &Path,
    out_dir: &Path,
    dump_iters: bool,
) -> Result<(), MvsrStatus> {
    let (store, nets) = require_model(eng)?;
    let scene = load_scene_dir(scene_dir, &eng.cfg).map_err(fail)?;
    let pred = run_predict(&scene, &eng.cfg, store, nets, AblationMode::Full).map_err(fail)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| fail(Error::io(out_dir.display().to_string(), e)))?;
    for (i, m) in pred.final_depths.iter().enumerate() {
        mvsr_core::io::pfm::write(&out_dir.join(format!("depth_{i:04}.pfm")), m).map_err(fail)?;
    }
    if dump_iters {
        let iters = out_dir.join("iters");
        std::fs::create_dir_all(&iters)
            .map_err(|e| fail(Error::io(iters.display().to_string(), e)))?;
        for (lo, li, maps) in &pred.refine.snapshots {
            for (i, m) in maps.iter().enumerate() {
                mvsr_core::io::pfm::write(&iters.join(format!("d_{lo}_{li}_{i:04}.pfm")), m)
                    .map_err(fail)?;
            }
        }
    }
    Ok(())
}

/// Predict full-resolution depth maps for every frame of a scene directory.
///
/// # Safety
/// Pointer contracts as documented on the module.
#[no_mangle]
pub unsafe extern "C" fn mvsr_engine_predict(
    engine: *mut MvsrEngine,
    scene_dir: *const c_char,
    out_dir: *const c_char,
    dump_iters: c_int,
) -> MvsrStatus {
    let eng = match engine_arg(engine) {
        Ok(e) => e,
        Err(s) => return s,
    };
    let (scene, out) = match (path_arg(scene_dir), path_arg(out_dir)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(s), _) | (_, Err(s)) => return s,
    };
    match predict_into(eng, &scene, &out, dump_iters != 0) {
        Ok(()) => MvsrStatus::MvsrOk,
        Err(s) => s,
    }
}

/// Fuse predicted depth maps (`depth_%04d.pfm` under `depth_dir`) into a
/// binary little-endian PLY point cloud.
///
/// # Safety
/// Pointer contracts as documented on the module.
#[no_mangle]
pub unsafe extern "C" fn mvsr_engine_fuse(
    engine: *mut MvsrEngine,
    scene_dir: *const c_char,
    depth_dir: *const c_char,
    out_ply: *const c_char,
) -> MvsrStatus {
    let eng = match engine_arg(engine) {
        Ok(e) => e,
        Err(s) => return s,
    };
    let (scene_dir, depth_dir, out_ply) =
        match (path_arg(scene_dir), path_arg(depth_dir), path_arg(out_ply)) {
            (Ok(a), Ok(b), Ok(c)) => (a, b, c),
            (Err(s), _, _) | (_, Err(s), _) | (_, _, Err(s)) => return s,
        };
    let inner = || -> Result<usize, MvsrStatus> {
        let scene = load_scene_dir(&scene_dir, &eng.cfg).map_err(fail)?;
        let depths: Result<Vec<_>, _> = (0..scene.n_frames())
            .map(|i| mvsr_core::io::pfm::read(&depth_dir.join(format!("depth_{i:04}.pfm"))))
            .collect();
        let depths = depths.map_err(fail)?;
        let cloud = fuse(&depths, &scene.cams, &eng.cfg.fusion_params()).map_err(fail)?;
        mvsr_core::io::ply::write_points(&out_ply, &cloud.positions, &[], &[], Some(&cloud.support))
            .map_err(fail)?;
        Ok(cloud.len())
    };
    match inner() {
        Ok(_) => MvsrStatus::MvsrOk,
        Err(s) => s,
    }
}

/// Depth metrics of predicted maps against the scene's ground truth.
///
/// # Safety
/// Pointer contracts as documented on the module; `out` must point to a
/// writable [`MvsrDepthMetrics`].
#[no_mangle]
pub unsafe extern "C" fn mvsr_engine_eval_depth(
    engine: *mut MvsrEngine,
    scene_dir: *const c_char,
    depth_dir: *const c_char,
    out: *mut MvsrDepthMetrics,
) -> MvsrStatus {
    let eng = match engine_arg(engine) {
        Ok(e) => e,
        Err(s) => return s,
    };
    if out.is_null() {
        set_error("null output pointer");
        return MvsrStatus::MvsrInvalidArgument;
    }
    let (scene_dir, depth_dir) = match (path_arg(scene_dir), path_arg(depth_dir)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(s), _) | (_, Err(s)) => return s,
    };
    let inner = || -> Result<MvsrDepthMetrics, MvsrStatus> {
        let scene = load_scene_dir(&scene_dir, &eng.cfg).map_err(fail)?;
        if scene.gt_depths.is_empty() {
            set_error("scene has no ground-truth depths");
            return Err(MvsrStatus::MvsrNoData);
        }
        let mut reports = Vec::new();
        for (i, g) in scene.gt_depths.iter().enumerate() {
            let p = mvsr_core::io::pfm::read(&depth_dir.join(format!("depth_{i:04}.pfm")))
                .map_err(fail)?;
            let gt = nn_resample(g, p.width, p.height);
            reports.push(depth_metrics(&p, &gt, eng.cfg.eval_min_gt).map_err(fail)?);
        }
        let a = aggregate_depth_reports(&reports);
        Ok(MvsrDepthMetrics {
            abs_rel: a.abs_rel,
            abs_diff: a.abs_diff,
            abs_inv: a.abs_inv,
            sq_rel: a.sq_rel,
            rmse: a.rmse,
            delta_125: a.delta_125,
            delta_125_2: a.delta_125_2,
            delta_125_3: a.delta_125_3,
            pixel_count: a.pixel_count as u64,
        })
    };
    match inner() {
        Ok(m) => {
            *out = m;
            MvsrStatus::MvsrOk
        }
        Err(s) => s,
    }
}

/// Train on scene directories (subdirectories with `poses.txt` each) and
/// store the final weights in the engine.
///
/// # Safety
/// Pointer contracts as documented on the module.
#[no_mangle]
pub unsafe extern "C" fn mvsr_engine_train(
    engine: *mut MvsrEngine,
    train_dir: *const c_char,
    val_dir: *const c_char,
) -> MvsrStatus {
    let eng = match engine_arg(engine) {
        Ok(e) => e,
        Err(s) => return s,
    };
    let (train_dir, val_dir) = match (path_arg(train_dir), path_arg(val_dir)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(s), _) | (_, Err(s)) => return s,
    };
    let mut inner = || -> Result<(), MvsrStatus> {
        let load_all = |dir: &Path| -> Result<Vec<_>, MvsrStatus> {
            let mut subs: Vec<PathBuf> = if dir.join("poses.txt").exists() {
                vec![dir.to_path_buf()]
            } else {
                std::fs::read_dir(dir)
                    .map_err(|e| fail(Error::io(dir.display().to_string(), e)))?
                    .filter_map(|e| e.ok())
                    .map(|e| e.path())
                    .filter(|p| p.join("poses.txt").exists())
                    .collect()
            };
            subs.sort();
            subs.iter().map(|p| load_scene_dir(p, &eng.cfg).map_err(fail)).collect()
        };
        let train = load_all(&train_dir)?;
        let val = load_all(&val_dir)?;
        let (store, _) = run_train(&train, &val, &eng.cfg, None).map_err(fail)?;
        let nets = ModelNets::attach(&store, &eng.cfg).map_err(fail)?;
        eng.model = Some((store, nets));
        Ok(())
    };
    match inner() {
        Ok(()) => MvsrStatus::MvsrOk,
        Err(s) => s,
    }
}
