//! Run configuration in a flat `key = value` text format.
//!
//! Lines starting with `#` are comments. Every key has a default, so an
//! empty file is a valid config. Serialisation writes every key and floats
//! in their shortest round-trip form, so `parse(to_text(c)) == c`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{FgdError, Result};
use crate::gcblock::DEFAULT_REDUCTION;
use crate::losses::{AblationMode, FgdHyperParams, L1Reduction, DEFAULT_TEMPERATURE};
use crate::pipeline::scene::SceneConfig;

/// Preset name used for explicit weights.
pub const CUSTOM_PRESET: &str = "custom";

/// Distillation weights: a named preset or explicit values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Weights {
    Preset(&'static str),
    Custom { alpha: f64, beta: f64, gamma: f64, lambda: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub weights: Weights,
    pub mode: AblationMode,
    pub temperature: f64,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Steps without improvement of the total loss before the rate halves;
    /// 0 disables the schedule.
    pub plateau_patience: usize,
    pub teacher_channels: usize,
    pub student_channels: usize,
    pub teacher_pretrain_steps: usize,
    pub teacher_lr: f64,
    /// Size of the fixed scene pool cycled through by the batches.
    pub num_scenes: usize,
    pub gc_reduction: usize,
    /// One GcBlock for every level instead of one per level.
    pub share_gc: bool,
    pub l1_reduction: L1Reduction,
    /// Mask dumps every this many steps (plus the final state); 0 dumps
    /// only the initial and final states.
    pub mask_dump_interval: usize,
    pub scene: SceneConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            weights: Weights::Preset("anchor-one-stage"),
            mode: AblationMode::Full,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
            steps: 500,
            batch_size: 4,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            plateau_patience: 50,
            teacher_channels: 8,
            student_channels: 4,
            teacher_pretrain_steps: 200,
            teacher_lr: 0.05,
            num_scenes: 16,
            gc_reduction: DEFAULT_REDUCTION,
            share_gc: false,
            l1_reduction: L1Reduction::Mean,
            mask_dump_interval: 100,
            scene: SceneConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

const KEYS: [&str; 31] = [
    "preset",
    "alpha",
    "beta",
    "gamma",
    "lambda",
    "mode",
    "temperature",
    "seed",
    "steps",
    "batch_size",
    "lr",
    "momentum",
    "weight_decay",
    "plateau_patience",
    "teacher_channels",
    "student_channels",
    "teacher_pretrain_steps",
    "teacher_lr",
    "num_scenes",
    "gc_reduction",
    "share_gc",
    "l1_reduction",
    "mask_dump_interval",
    "image_height",
    "image_width",
    "min_rects",
    "max_rects",
    "min_rect_size",
    "max_rect_size",
    "noise",
    "contrast",
];

const EXTRA_KEYS: [&str; 1] = ["out_dir"];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| FgdError::config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(FgdError::config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn preset_name(name: &str) -> Result<&'static str> {
    crate::losses::PRESET_NAMES
        .into_iter()
        .find(|p| *p == name)
        .ok_or_else(|| FgdError::config(format!("unknown preset {name:?}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        let mut preset: Option<String> = None;
        let mut custom = [None::<f64>; 4];
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FgdError::config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(FgdError::config(format!("line {}: duplicate key {k}", n + 1)));
            }
            match k {
                "preset" => preset = Some(v.to_string()),
                "alpha" => custom[0] = Some(parse_num(k, v)?),
                "beta" => custom[1] = Some(parse_num(k, v)?),
                "gamma" => custom[2] = Some(parse_num(k, v)?),
                "lambda" => custom[3] = Some(parse_num(k, v)?),
                _ => cfg.set(k, v)?,
            }
        }
        cfg.weights = match preset.as_deref() {
            Some(CUSTOM_PRESET) => match custom {
                [Some(alpha), Some(beta), Some(gamma), Some(lambda)] => Weights::Custom { alpha, beta, gamma, lambda },
                _ => return Err(FgdError::config("preset = custom needs alpha, beta, gamma and lambda")),
            },
            name => {
                if custom.iter().any(Option::is_some) {
                    return Err(FgdError::config(
                        "alpha, beta, gamma and lambda are only allowed with preset = custom",
                    ));
                }
                Weights::Preset(preset_name(name.unwrap_or("anchor-one-stage"))?)
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text form. Setting a single weight switches
    /// the config to explicit weights, starting from the resolved preset.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match k {
            "preset" => {
                self.weights = if v == CUSTOM_PRESET {
                    let hp = self.hyper_params()?;
                    Weights::Custom { alpha: hp.alpha, beta: hp.beta, gamma: hp.gamma, lambda: hp.lambda }
                } else {
                    Weights::Preset(preset_name(v)?)
                }
            }
            "alpha" | "beta" | "gamma" | "lambda" => {
                let x: f64 = parse_num(k, v)?;
                let hp = self.hyper_params()?;
                let (mut a, mut b, mut g, mut l) = (hp.alpha, hp.beta, hp.gamma, hp.lambda);
                match k {
                    "alpha" => a = x,
                    "beta" => b = x,
                    "gamma" => g = x,
                    _ => l = x,
                }
                self.weights = Weights::Custom { alpha: a, beta: b, gamma: g, lambda: l };
            }
            "mode" => self.mode = v.parse().map_err(|e: FgdError| FgdError::config(e.to_string()))?,
            "temperature" => self.temperature = parse_num(k, v)?,
            "seed" => self.seed = parse_num(k, v)?,
            "steps" => self.steps = parse_num(k, v)?,
            "batch_size" => self.batch_size = parse_num(k, v)?,
            "lr" => self.lr = parse_num(k, v)?,
            "momentum" => self.momentum = parse_num(k, v)?,
            "weight_decay" => self.weight_decay = parse_num(k, v)?,
            "plateau_patience" => self.plateau_patience = parse_num(k, v)?,
            "teacher_channels" => self.teacher_channels = parse_num(k, v)?,
            "student_channels" => self.student_channels = parse_num(k, v)?,
            "teacher_pretrain_steps" => self.teacher_pretrain_steps = parse_num(k, v)?,
            "teacher_lr" => self.teacher_lr = parse_num(k, v)?,
            "num_scenes" => self.num_scenes = parse_num(k, v)?,
            "gc_reduction" => self.gc_reduction = parse_num(k, v)?,
            "share_gc" => self.share_gc = parse_bool(k, v)?,
            "l1_reduction" => self.l1_reduction = v.parse().map_err(|e: FgdError| FgdError::config(e.to_string()))?,
            "mask_dump_interval" => self.mask_dump_interval = parse_num(k, v)?,
            "image_height" => self.scene.height = parse_num(k, v)?,
            "image_width" => self.scene.width = parse_num(k, v)?,
            "min_rects" => self.scene.min_rects = parse_num(k, v)?,
            "max_rects" => self.scene.max_rects = parse_num(k, v)?,
            "min_rect_size" => self.scene.min_rect_size = parse_num(k, v)?,
            "max_rect_size" => self.scene.max_rect_size = parse_num(k, v)?,
            "noise" => self.scene.noise = parse_num(k, v)?,
            "contrast" => self.scene.contrast = parse_num(k, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(FgdError::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn known_keys() -> impl Iterator<Item = &'static str> {
        KEYS.into_iter().chain(EXTRA_KEYS)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper_params()
            .map_err(|e| FgdError::config(e.to_string()))?;
        self.scene.validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("teacher_channels", self.teacher_channels),
            ("student_channels", self.student_channels),
            ("num_scenes", self.num_scenes),
            ("gc_reduction", self.gc_reduction),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(FgdError::config(format!("{k} must be positive")));
            }
        }
        for (k, v) in [("lr", self.lr), ("momentum", self.momentum), ("weight_decay", self.weight_decay), ("teacher_lr", self.teacher_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FgdError::config(format!("{k} must be finite and >= 0, got {v}")));
            }
        }
        let deepest = *crate::pipeline::toynet::LEVEL_STRIDES.last().expect("levels");
        if !self.scene.height.is_multiple_of(deepest) || !self.scene.width.is_multiple_of(deepest) {
            return Err(FgdError::config(format!("image dimensions must be divisible by {deepest}")));
        }
        if self.out_dir.as_os_str().is_empty() || self.out_dir.to_string_lossy().contains('\n') {
            return Err(FgdError::config("out_dir must be a non-empty single-line path"));
        }
        Ok(())
    }

    /// Resolved weights with this config's temperature.
    pub fn hyper_params(&self) -> Result<FgdHyperParams> {
        match self.weights {
            Weights::Preset(name) => {
                let mut hp = FgdHyperParams::preset(name)?;
                hp.temperature = self.temperature;
                hp.validate()?;
                Ok(hp)
            }
            Weights::Custom { alpha, beta, gamma, lambda } => {
                FgdHyperParams::new(alpha, beta, gamma, lambda, self.temperature)
            }
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match self.weights {
            Weights::Preset(name) => {
                let _ = writeln!(s, "preset = {name}");
            }
            Weights::Custom { alpha, beta, gamma, lambda } => {
                let _ = writeln!(s, "preset = {CUSTOM_PRESET}");
                let _ = writeln!(s, "alpha = {alpha}\nbeta = {beta}\ngamma = {gamma}\nlambda = {lambda}");
            }
        }
        let sc = &self.scene;
        let pairs: [(&str, String); 27] = [
            ("mode", self.mode.to_string()),
            ("temperature", self.temperature.to_string()),
            ("seed", self.seed.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("plateau_patience", self.plateau_patience.to_string()),
            ("teacher_channels", self.teacher_channels.to_string()),
            ("student_channels", self.student_channels.to_string()),
            ("teacher_pretrain_steps", self.teacher_pretrain_steps.to_string()),
            ("teacher_lr", self.teacher_lr.to_string()),
            ("num_scenes", self.num_scenes.to_string()),
            ("gc_reduction", self.gc_reduction.to_string()),
            ("share_gc", self.share_gc.to_string()),
            ("l1_reduction", self.l1_reduction.to_string()),
            ("mask_dump_interval", self.mask_dump_interval.to_string()),
            ("image_height", sc.height.to_string()),
            ("image_width", sc.width.to_string()),
            ("min_rects", sc.min_rects.to_string()),
            ("max_rects", sc.max_rects.to_string()),
            ("min_rect_size", sc.min_rect_size.to_string()),
            ("max_rect_size", sc.max_rect_size.to_string()),
            ("noise", sc.noise.to_string()),
            ("contrast", sc.contrast.to_string()),
            ("out_dir", self.out_dir.to_string_lossy().into_owned()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// The serialised config followed by the resolved weights as comments.
    pub fn echo(&self) -> Result<String> {
        let hp = self.hyper_params()?;
        let mut s = self.to_text();
        let _ = writeln!(
            s,
            "# resolved: alpha = {}, beta = {}, gamma = {}, lambda = {}, temperature = {}",
            hp.alpha, hp.beta, hp.gamma, hp.lambda, hp.temperature
        );
        Ok(s)
    }
}
