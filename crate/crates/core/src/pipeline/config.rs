//! Plain-text key-value configuration.
//!
//! `key = value` per line, `#` comments. Unknown keys are rejected; every
//! run logs the fully resolved form via [`PipelineConfig::render`].

use crate::costvolume::DepthHypothesisGrid;
use crate::error::{Error, Result};
use crate::features::Extractor;
use crate::fusion::FusionParams;
use crate::pointflow::{DirectionMode, RefinementSchedule};
use crate::scenemodel::UnetWidths;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub features_extractor: String,
    pub features_seed: u64,
    pub sweep_start: f64,
    pub sweep_step: f64,
    pub sweep_count: usize,
    pub refine_outer: usize,
    pub refine_steps_m: Vec<f64>,
    pub refine_h: usize,
    pub refine_direction: String,
    pub fusion_rel_tol: f64,
    pub fusion_min_consistent: usize,
    pub fusion_average: bool,
    pub model_seed: u64,
    pub model_unet: [usize; 5],
    pub model_head: Vec<usize>,
    pub model_costreg: Vec<usize>,
    pub model_smooth: [usize; 3],
    pub train_seed: u64,
    pub train_lr: f64,
    pub train_batch: usize,
    pub train_frames_per_sample: usize,
    pub train_phase_a: usize,
    pub train_phase_b: usize,
    pub train_phase_c: usize,
    pub train_epoch_iters: usize,
    pub train_subset_pixels: usize,
    pub train_frames_supervised: usize,
    pub train_plateau_patience: usize,
    pub train_lr_decay: f64,
    pub synth_boxes: usize,
    pub synth_frames: usize,
    pub eval_min_gt: f64,
    pub eval_tau: f64,
    pub eval_gt_density: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            features_extractor: "handcrafted32".into(),
            features_seed: 7,
            sweep_start: 0.5,
            sweep_step: 0.05,
            sweep_count: 96,
            refine_outer: 2,
            refine_steps_m: vec![0.05, 0.05, 0.025],
            refine_h: 3,
            refine_direction: "ray".into(),
            fusion_rel_tol: 0.03,
            fusion_min_consistent: 2,
            fusion_average: false,
            model_seed: 1,
            model_unet: [16, 24, 32, 24, 16],
            model_head: vec![32, 16, 8],
            model_costreg: vec![16, 8],
            model_smooth: [16, 16, 8],
            train_seed: 42,
            train_lr: 3e-3,
            train_batch: 2,
            train_frames_per_sample: 7,
            train_phase_a: 200,
            train_phase_b: 18,
            train_phase_c: 12,
            train_epoch_iters: 25,
            train_subset_pixels: 320,
            train_frames_supervised: 3,
            train_plateau_patience: 2,
            train_lr_decay: 0.5,
            synth_boxes: 3,
            synth_frames: 24,
            eval_min_gt: 0.5,
            eval_tau: 0.05,
            eval_gt_density: 300.0,
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str, key: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|t| {
            t.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad list entry `{t}` for {key}")))
        })
        .collect()
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", lineno + 1)));
            };
            let key = key.trim();
            let v = value.trim();
            let bad = |what: &str| Error::Config(format!("bad value `{v}` for {key} ({what})"));
            match key {
                "features.extractor" => cfg.features_extractor = v.to_string(),
                "features.seed" => cfg.features_seed = v.parse().map_err(|_| bad("u64"))?,
                "sweep.start" => cfg.sweep_start = v.parse().map_err(|_| bad("float"))?,
                "sweep.step" => cfg.sweep_step = v.parse().map_err(|_| bad("float"))?,
                "sweep.count" => cfg.sweep_count = v.parse().map_err(|_| bad("int"))?,
                "refine.outer" => cfg.refine_outer = v.parse().map_err(|_| bad("int"))?,
                "refine.steps_m" => cfg.refine_steps_m = parse_list(v, key)?,
                "refine.h" => cfg.refine_h = v.parse().map_err(|_| bad("int"))?,
                "refine.direction" => cfg.refine_direction = v.to_string(),
                "fusion.rel_tol" => cfg.fusion_rel_tol = v.parse().map_err(|_| bad("float"))?,
                "fusion.min_consistent" => {
                    cfg.fusion_min_consistent = v.parse().map_err(|_| bad("int"))?
                }
                "fusion.average" => cfg.fusion_average = v.parse().map_err(|_| bad("bool"))?,
                "model.seed" => cfg.model_seed = v.parse().map_err(|_| bad("u64"))?,
                "model.unet" => {
                    let l: Vec<usize> = parse_list(v, key)?;
                    cfg.model_unet = l.try_into().map_err(|_| bad("5 channel widths"))?;
                }
                "model.head" => cfg.model_head = parse_list(v, key)?,
                "model.costreg" => cfg.model_costreg = parse_list(v, key)?,
                "model.smooth" => {
                    let l: Vec<usize> = parse_list(v, key)?;
                    cfg.model_smooth = l.try_into().map_err(|_| bad("3 channel widths"))?;
                }
                "train.seed" => cfg.train_seed = v.parse().map_err(|_| bad("u64"))?,
                "train.lr" => cfg.train_lr = v.parse().map_err(|_| bad("float"))?,
                "train.batch" => cfg.train_batch = v.parse().map_err(|_| bad("int"))?,
                "train.frames_per_sample" => {
                    cfg.train_frames_per_sample = v.parse().map_err(|_| bad("int"))?
                }
                "train.phase_a" => cfg.train_phase_a = v.parse().map_err(|_| bad("int"))?,
                "train.phase_b" => cfg.train_phase_b = v.parse().map_err(|_| bad("int"))?,
                "train.phase_c" => cfg.train_phase_c = v.parse().map_err(|_| bad("int"))?,
                "train.epoch_iters" => cfg.train_epoch_iters = v.parse().map_err(|_| bad("int"))?,
                "train.subset_pixels" => {
                    cfg.train_subset_pixels = v.parse().map_err(|_| bad("int"))?
                }
                "train.frames_supervised" => {
                    cfg.train_frames_supervised = v.parse().map_err(|_| bad("int"))?
                }
                "train.plateau_patience" => {
                    cfg.train_plateau_patience = v.parse().map_err(|_| bad("int"))?
                }
                "train.lr_decay" => cfg.train_lr_decay = v.parse().map_err(|_| bad("float"))?,
                "synth.boxes" => cfg.synth_boxes = v.parse().map_err(|_| bad("int"))?,
                "synth.frames" => cfg.synth_frames = v.parse().map_err(|_| bad("int"))?,
                "eval.min_gt" => cfg.eval_min_gt = v.parse().map_err(|_| bad("float"))?,
                "eval.tau" => cfg.eval_tau = v.parse().map_err(|_| bad("float"))?,
                "eval.gt_density" => cfg.eval_gt_density = v.parse().map_err(|_| bad("float"))?,
                other => return Err(Error::Config(format!("unknown config key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.hypothesis_grid().validate()?;
        self.schedule().validate()?;
        self.fusion_params().validate()?;
        self.extractor()?;
        self.direction_mode()?;
        if self.train_frames_per_sample < 2 {
            return Err(Error::Config("train.frames_per_sample must be at least 2".into()));
        }
        if self.model_head.is_empty() || self.model_costreg.is_empty() {
            return Err(Error::Config("model head/costreg widths must be non-empty".into()));
        }
        Ok(())
    }

    /// Fully resolved key-value dump (parses back to the same config).
    pub fn render(&self) -> String {
        let mut s = String::new();
        let list = |v: &[f64]| {
            v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
        };
        let ulist = |v: &[usize]| {
            v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
        };
        writeln!(s, "features.extractor = {}", self.features_extractor).unwrap();
        writeln!(s, "features.seed = {}", self.features_seed).unwrap();
        writeln!(s, "sweep.start = {}", self.sweep_start).unwrap();
        writeln!(s, "sweep.step = {}", self.sweep_step).unwrap();
        writeln!(s, "sweep.count = {}", self.sweep_count).unwrap();
        writeln!(s, "refine.outer = {}", self.refine_outer).unwrap();
        writeln!(s, "refine.steps_m = {}", list(&self.refine_steps_m)).unwrap();
        writeln!(s, "refine.h = {}", self.refine_h).unwrap();
        writeln!(s, "refine.direction = {}", self.refine_direction).unwrap();
        writeln!(s, "fusion.rel_tol = {}", self.fusion_rel_tol).unwrap();
        writeln!(s, "fusion.min_consistent = {}", self.fusion_min_consistent).unwrap();
        writeln!(s, "fusion.average = {}", self.fusion_average).unwrap();
        writeln!(s, "model.seed = {}", self.model_seed).unwrap();
        writeln!(s, "model.unet = {}", ulist(&self.model_unet)).unwrap();
        writeln!(s, "model.head = {}", ulist(&self.model_head)).unwrap();
        writeln!(s, "model.costreg = {}", ulist(&self.model_costreg)).unwrap();
        writeln!(s, "model.smooth = {}", ulist(&self.model_smooth)).unwrap();
        writeln!(s, "train.seed = {}", self.train_seed).unwrap();
        writeln!(s, "train.lr = {}", self.train_lr).unwrap();
        writeln!(s, "train.batch = {}", self.train_batch).unwrap();
        writeln!(s, "train.frames_per_sample = {}", self.train_frames_per_sample).unwrap();
        writeln!(s, "train.phase_a = {}", self.train_phase_a).unwrap();
        writeln!(s, "train.phase_b = {}", self.train_phase_b).unwrap();
        writeln!(s, "train.phase_c = {}", self.train_phase_c).unwrap();
        writeln!(s, "train.epoch_iters = {}", self.train_epoch_iters).unwrap();
        writeln!(s, "train.subset_pixels = {}", self.train_subset_pixels).unwrap();
        writeln!(s, "train.frames_supervised = {}", self.train_frames_supervised).unwrap();
        writeln!(s, "train.plateau_patience = {}", self.train_plateau_patience).unwrap();
        writeln!(s, "train.lr_decay = {}", self.train_lr_decay).unwrap();
        writeln!(s, "synth.boxes = {}", self.synth_boxes).unwrap();
        writeln!(s, "synth.frames = {}", self.synth_frames).unwrap();
        writeln!(s, "eval.min_gt = {}", self.eval_min_gt).unwrap();
        writeln!(s, "eval.tau = {}", self.eval_tau).unwrap();
        writeln!(s, "eval.gt_density = {}", self.eval_gt_density).unwrap();
        s
    }

    pub fn hypothesis_grid(&self) -> DepthHypothesisGrid {
        DepthHypothesisGrid { start: self.sweep_start, step: self.sweep_step, count: self.sweep_count }
    }

    pub fn schedule(&self) -> RefinementSchedule {
        RefinementSchedule {
            outer_loops: self.refine_outer,
            steps_m: self.refine_steps_m.clone(),
            half_count: self.refine_h,
        }
    }

    pub fn fusion_params(&self) -> FusionParams {
        FusionParams {
            rel_tol: self.fusion_rel_tol,
            min_consistent: self.fusion_min_consistent,
            average_positions: self.fusion_average,
        }
    }

    pub fn extractor(&self) -> Result<Extractor> {
        Extractor::from_config(&self.features_extractor, self.features_seed)
    }

    pub fn unet_widths(&self) -> UnetWidths {
        UnetWidths {
            e0: self.model_unet[0],
            e1: self.model_unet[1],
            e2: self.model_unet[2],
            d1: self.model_unet[3],
            d0: self.model_unet[4],
        }
    }

    pub fn direction_mode(&self) -> Result<DirectionMode> {
        match self.refine_direction.as_str() {
            "ray" => Ok(DirectionMode::PerPixelRay),
            "principal" => Ok(DirectionMode::PrincipalAxis),
            other => Err(Error::Config(format!("unknown refine.direction `{other}`"))),
        }
    }
}

impl PipelineConfig {
    /// Direction mode assuming a validated config.
    pub(crate) fn direction_mode_unchecked(&self) -> DirectionMode {
        self.direction_mode().expect("validated config")
    }
}
