//! Distillation loss terms: plain feature imitation, the decoupled and
//! attention-weighted feature loss, the attention-mimicking loss, the
//! GcBlock relation loss, and their per-step assembly.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{FgdError, Result};
use crate::gcblock::{relation, GcBlockVars};
use crate::graph::{Graph, Var};
use crate::masks::{attention_masks_var, build_masks, BoxSet, LevelGeometry, MaskSet};
use crate::tensor::{Parameter, Tensor};

/// Default temperature of the attention softmax.
pub const DEFAULT_TEMPERATURE: f64 = 0.5;

/// Names accepted by [`FgdHyperParams::preset`].
pub const PRESET_NAMES: [&str; 3] = ["two-stage", "anchor-one-stage", "anchor-free"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FgdHyperParams {
    /// Foreground feature weight.
    pub alpha: f64,
    /// Background feature weight.
    pub beta: f64,
    /// Attention loss weight.
    pub gamma: f64,
    /// Global loss weight.
    pub lambda: f64,
    pub temperature: f64,
}

impl FgdHyperParams {
    pub fn new(alpha: f64, beta: f64, gamma: f64, lambda: f64, temperature: f64) -> Result<Self> {
        let hp = FgdHyperParams { alpha, beta, gamma, lambda, temperature };
        hp.validate()?;
        Ok(hp)
    }

    /// Detector-family presets, all with `T = 0.5`.
    pub fn preset(name: &str) -> Result<Self> {
        let (alpha, beta, gamma, lambda) = match name {
            "two-stage" => (5e-5, 2.5e-5, 5e-5, 5e-7),
            "anchor-one-stage" => (1e-3, 5e-4, 1e-3, 5e-6),
            "anchor-free" => (1.6e-3, 8e-4, 8e-3, 8e-6),
            other => {
                return Err(FgdError::param(format!(
                    "unknown preset {other:?}; expected one of {PRESET_NAMES:?}"
                )))
            }
        };
        FgdHyperParams::new(alpha, beta, gamma, lambda, DEFAULT_TEMPERATURE)
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("lambda", self.lambda)];
        for (name, v) in weights {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(FgdError::param(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(FgdError::param(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// How the L1 distance between attention masks is reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum L1Reduction {
    #[default]
    Mean,
    Sum,
}

impl FromStr for L1Reduction {
    type Err = FgdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(L1Reduction::Mean),
            "sum" => Ok(L1Reduction::Sum),
            other => Err(FgdError::param(format!("unknown L1 reduction {other:?}"))),
        }
    }
}

impl fmt::Display for L1Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            L1Reduction::Mean => "mean",
            L1Reduction::Sum => "sum",
        })
    }
}

/// Which distillation areas and attention masks are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationMode {
    FgOnly,
    BgOnly,
    JointNoSplit,
    Split,
    NoSpatialAttn,
    NoChannelAttn,
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 7] = [
        AblationMode::FgOnly,
        AblationMode::BgOnly,
        AblationMode::JointNoSplit,
        AblationMode::Split,
        AblationMode::NoSpatialAttn,
        AblationMode::NoChannelAttn,
        AblationMode::Full,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationMode::FgOnly => "fg_only",
            AblationMode::BgOnly => "bg_only",
            AblationMode::JointNoSplit => "joint_no_split",
            AblationMode::Split => "split",
            AblationMode::NoSpatialAttn => "no_spatial_attn",
            AblationMode::NoChannelAttn => "no_channel_attn",
            AblationMode::Full => "full",
        }
    }

    /// Effective weights and mask overrides for this mode.
    pub fn apply(&self, hp: &FgdHyperParams) -> (FgdHyperParams, MaskOverrides) {
        let mut hp = *hp;
        let mut ov = MaskOverrides::default();
        match self {
            AblationMode::FgOnly => hp.beta = 0.0,
            AblationMode::BgOnly => hp.alpha = 0.0,
            AblationMode::JointNoSplit => hp.beta = hp.alpha,
            AblationMode::NoSpatialAttn => ov.spatial_ones = true,
            AblationMode::NoChannelAttn => ov.channel_ones = true,
            AblationMode::Split | AblationMode::Full => {}
        }
        (hp, ov)
    }
}

impl FromStr for AblationMode {
    type Err = FgdError;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| FgdError::param(format!("unknown ablation mode {s:?}")))
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Attention masks forced to all-ones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MaskOverrides {
    pub spatial_ones: bool,
    pub channel_ones: bool,
}

impl MaskOverrides {
    pub fn apply(&self, masks: &MaskSet) -> MaskSet {
        let mut m = masks.clone();
        if self.spatial_ones {
            m.spatial_attn = Tensor::ones(m.spatial_attn.shape());
        }
        if self.channel_ones {
            m.channel_attn = Tensor::ones(m.channel_attn.shape());
        }
        m
    }
}

/// Itemised loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub fea_fg: f64,
    pub fea_bg: f64,
    pub attention: f64,
    pub focal: f64,
    pub global_: f64,
    pub total_distill: f64,
    pub task: f64,
    pub total: f64,
}

impl LossReport {
    /// Largest violation of `focal = fg + bg + attention` and
    /// `total = task + focal + global`.
    pub fn identity_error(&self) -> f64 {
        let focal = (self.focal - (self.fea_fg + self.fea_bg + self.attention)).abs();
        let total = (self.total - (self.task + self.focal + self.global_)).abs();
        let distill = (self.total_distill - (self.focal + self.global_)).abs();
        focal.max(total).max(distill)
    }

    pub fn is_finite(&self) -> bool {
        [
            self.fea_fg,
            self.fea_bg,
            self.attention,
            self.focal,
            self.global_,
            self.total_distill,
            self.task,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Trainable 1×1 projection from student to teacher channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Adaptation {
    pub weight: Parameter,
    pub bias: Parameter,
}

#[derive(Clone, Copy, Debug)]
pub struct AdaptationVars {
    pub weight: Var,
    pub bias: Var,
}

impl Adaptation {
    /// Identity when the channel counts match, otherwise uniform in
    /// `±1/sqrt(in)`. Bias starts at zero.
    pub fn new<R: Rng + ?Sized>(prefix: &str, in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let weight = if in_channels == out_channels {
            let mut w = Tensor::zeros(&[out_channels, in_channels]);
            (0..in_channels).for_each(|i| w.data_mut()[i * in_channels + i] = 1.0);
            w
        } else {
            let b = 1.0 / (in_channels as f64).sqrt();
            Tensor::uniform(&[out_channels, in_channels], -b, b, rng)
        };
        Adaptation {
            weight: Parameter::new(format!("{prefix}.weight"), weight),
            bias: Parameter::new(format!("{prefix}.bias"), Tensor::zeros(&[out_channels])),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> AdaptationVars {
        AdaptationVars { weight: g.param(&self.weight), bias: g.param(&self.bias) }
    }

    pub fn parameters(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    pub fn parameters_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

impl AdaptationVars {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.conv1x1(x, self.weight, Some(self.bias))
    }
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(FgdError::dim(format!(
            "{what}: teacher {:?} vs student {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// Mean squared difference over all elements (per image over `C·H·W`,
/// averaged over the batch).
pub fn baseline_loss(g: &mut Graph, f_t: Var, f_s_adapted: Var) -> Result<Var> {
    same_shape(g, f_t, f_s_adapted, "baseline_loss")?;
    let d = g.sub(f_t, f_s_adapted)?;
    let sq = g.square(d);
    Ok(g.mean_all(sq))
}

/// Foreground and background feature terms for one image:
/// `Σ w·(F_t − F_s)²` with `w = α·M·S·A^S·A^C` (fg) and
/// `w = β·(1−M)·S·A^S·A^C` (bg).
pub fn feature_loss(
    g: &mut Graph,
    f_t: Var,
    f_s_adapted: Var,
    masks: &MaskSet,
    alpha: f64,
    beta: f64,
) -> Result<(Var, Var)> {
    same_shape(g, f_t, f_s_adapted, "feature_loss")?;
    let s = g.shape(f_t).to_vec();
    let (c, h, w) = (masks.channels(), masks.height(), masks.width());
    if s != [1, c, h, w] {
        return Err(FgdError::dim(format!("feature_loss: masks are {c}x{h}x{w}, features {s:?}")));
    }
    let p = h * w;
    let mut w_fg = vec![0.0; c * p];
    let mut w_bg = vec![0.0; c * p];
    let (m, sc, a_s, a_c) = (
        masks.binary.data(),
        masks.scale.data(),
        masks.spatial_attn.data(),
        masks.channel_attn.data(),
    );
    for k in 0..c {
        for i in 0..p {
            let base = sc[i] * a_s[i] * a_c[k];
            w_fg[k * p + i] = alpha * m[i] * base;
            w_bg[k * p + i] = beta * (1.0 - m[i]) * base;
        }
    }
    let fg = g.weighted_sq_err(f_t, f_s_adapted, &Tensor::new(s.clone(), w_fg)?)?;
    let bg = g.weighted_sq_err(f_t, f_s_adapted, &Tensor::new(s, w_bg)?)?;
    Ok((fg, bg))
}

fn l1(g: &mut Graph, target: &Tensor, pred: Var, reduction: L1Reduction) -> Result<Var> {
    if target.shape() != g.shape(pred) {
        return Err(FgdError::dim(format!(
            "attention mask shapes {:?} and {:?} differ",
            target.shape(),
            g.shape(pred)
        )));
    }
    let t = g.constant(target.clone());
    let d = g.sub(t, pred)?;
    let a = g.abs(d);
    Ok(match reduction {
        L1Reduction::Mean => g.mean_all(a),
        L1Reduction::Sum => g.sum_all(a),
    })
}

/// `γ·(l1(A_t^S, A_s^S) + l1(A_t^C, A_s^C))` against the teacher's masks.
pub fn attention_loss(
    g: &mut Graph,
    teacher: &MaskSet,
    s_spatial: Var,
    s_channel: Var,
    gamma: f64,
    reduction: L1Reduction,
) -> Result<Var> {
    let ls = l1(g, &teacher.spatial_attn, s_spatial, reduction)?;
    let lc = l1(g, &teacher.channel_attn, s_channel, reduction)?;
    let sum = g.add(ls, lc)?;
    Ok(g.scale(sum, gamma))
}

/// `λ·Σ(R(F_t) − R(F_s))²` through one shared GcBlock.
pub fn global_loss(g: &mut Graph, f_t: Var, f_s: Var, gc: &GcBlockVars, lambda: f64) -> Result<Var> {
    same_shape(g, f_t, f_s, "global_loss")?;
    let rt = relation(g, f_t, gc)?;
    let rs = relation(g, f_s, gc)?;
    let d = g.sub(rt, rs)?;
    let sq = g.square(d);
    let s = g.sum_all(sq);
    Ok(g.scale(s, lambda))
}

/// One feature level of a batch.
pub struct LevelInput<'a> {
    /// `[B, C_t, H, W]`, treated as a constant.
    pub teacher: &'a Tensor,
    /// `[B, C_s, H, W]` student features.
    pub student: Var,
    /// One box set per image.
    pub boxes: &'a [BoxSet],
    pub geom: LevelGeometry,
}

/// Graph handles of every assembled term.
#[derive(Clone, Copy, Debug)]
pub struct FgdTerms {
    pub fea_fg: Var,
    pub fea_bg: Var,
    pub attention: Var,
    pub focal: Var,
    pub global: Var,
    pub total_distill: Var,
    pub task: Var,
    pub total: Var,
}

impl FgdTerms {
    pub fn report(&self, g: &Graph) -> LossReport {
        let v = |x: Var| g.value(x).item();
        LossReport {
            fea_fg: v(self.fea_fg),
            fea_bg: v(self.fea_bg),
            attention: v(self.attention),
            focal: v(self.focal),
            global_: v(self.global),
            total_distill: v(self.total_distill),
            task: v(self.task),
            total: v(self.total),
        }
    }
}

/// Assembles every distillation term across levels and images.
///
/// Per level and image: teacher masks, adapted student features, student
/// attention masks (from the adapted features), then the feature,
/// attention and global terms. Terms are summed over levels and images and
/// divided by the batch size.
#[allow(clippy::too_many_arguments)]
pub fn fgd_total(
    g: &mut Graph,
    levels: &[LevelInput<'_>],
    hp: &FgdHyperParams,
    mode: AblationMode,
    adapters: &[AdaptationVars],
    gcs: &[GcBlockVars],
    task: Var,
    l1_reduction: L1Reduction,
) -> Result<FgdTerms> {
    hp.validate()?;
    if levels.is_empty() {
        return Err(FgdError::dim("fgd_total needs at least one level"));
    }
    if adapters.len() != levels.len() || gcs.len() != levels.len() {
        return Err(FgdError::dim(format!(
            "{} levels but {} adapters and {} gc blocks",
            levels.len(),
            adapters.len(),
            gcs.len()
        )));
    }
    let (hp, overrides) = mode.apply(hp);
    let batch = levels[0].teacher.shape()[0];
    let zero = g.constant(Tensor::scalar(0.0));
    let (mut fg, mut bg, mut at, mut gl) = (zero, zero, zero, zero);
    for ((lvl, adapter), gc) in levels.iter().zip(adapters).zip(gcs) {
        let ts = lvl.teacher.shape();
        if ts.len() != 4 || ts[0] != batch || lvl.boxes.len() != batch {
            return Err(FgdError::dim(format!(
                "level teacher {ts:?} with {} box sets, batch {batch}",
                lvl.boxes.len()
            )));
        }
        let student_shape = g.shape(lvl.student).to_vec();
        if student_shape.len() != 4 || student_shape[0] != batch || student_shape[2..] != ts[2..] {
            return Err(FgdError::dim(format!("student {student_shape:?} vs teacher {ts:?}")));
        }
        let adapted = adapter.apply(g, lvl.student)?;
        let raw_for_global = student_shape[1] == ts[1];
        for b in 0..batch {
            let t_img = lvl.teacher.batch_item(b)?;
            let masks = build_masks(&t_img, &lvl.boxes[b], &lvl.geom, hp.temperature)?;
            let masks = overrides.apply(&masks);
            let ft = g.constant(t_img);
            let fs = g.select_batch(adapted, b)?;
            let (f1, b1) = feature_loss(g, ft, fs, &masks, hp.alpha, hp.beta)?;
            let (mut ss, mut sc) = attention_masks_var(g, fs, hp.temperature)?;
            // an ablated mask has nothing to imitate, so its L1 term vanishes
            if overrides.spatial_ones {
                ss = g.constant(masks.spatial_attn.clone());
            }
            if overrides.channel_ones {
                sc = g.constant(masks.channel_attn.clone());
            }
            let a1 = attention_loss(g, &masks, ss, sc, hp.gamma, l1_reduction)?;
            let fs_global = if raw_for_global { g.select_batch(lvl.student, b)? } else { fs };
            let g1 = global_loss(g, ft, fs_global, gc, hp.lambda)?;
            fg = g.add(fg, f1)?;
            bg = g.add(bg, b1)?;
            at = g.add(at, a1)?;
            gl = g.add(gl, g1)?;
        }
    }
    let inv = 1.0 / batch as f64;
    let fea_fg = g.scale(fg, inv);
    let fea_bg = g.scale(bg, inv);
    let attention = g.scale(at, inv);
    let global = g.scale(gl, inv);
    let fea = g.add(fea_fg, fea_bg)?;
    let focal = g.add(fea, attention)?;
    let total_distill = g.add(focal, global)?;
    let with_focal = g.add(task, focal)?;
    let total = g.add(with_focal, global)?;
    Ok(FgdTerms { fea_fg, fea_bg, attention, focal, global, total_distill, task, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::LevelGeometry;

    fn one_pixel_masks() -> MaskSet {
        MaskSet {
            binary: Tensor::ones(&[1, 1]),
            scale: Tensor::ones(&[1, 1]),
            spatial_attn: Tensor::ones(&[1, 1]),
            channel_attn: Tensor::ones(&[1]),
            n_bg: 0,
            dropped_boxes: 0,
        }
    }

    #[test]
    fn presets_match_published_values() {
        let p = FgdHyperParams::preset("two-stage").unwrap();
        assert_eq!((p.alpha, p.beta, p.gamma, p.lambda), (5e-5, 2.5e-5, 5e-5, 5e-7));
        let p = FgdHyperParams::preset("anchor-one-stage").unwrap();
        assert_eq!((p.alpha, p.beta, p.gamma, p.lambda), (1e-3, 5e-4, 1e-3, 5e-6));
        let p = FgdHyperParams::preset("anchor-free").unwrap();
        assert_eq!((p.alpha, p.beta, p.gamma, p.lambda), (1.6e-3, 8e-4, 8e-3, 8e-6));
        assert_eq!(p.temperature, 0.5);
        assert!(FgdHyperParams::preset("retina").is_err());
    }

    #[test]
    fn hyper_params_are_validated() {
        assert!(FgdHyperParams::new(-1.0, 0.0, 0.0, 0.0, 0.5).is_err());
        assert!(FgdHyperParams::new(0.0, 0.0, 0.0, 0.0, 0.0).is_err());
        assert!(FgdHyperParams::new(0.0, 0.0, 0.0, f64::NAN, 0.5).is_err());
        assert!(FgdHyperParams::new(0.0, 0.0, 0.0, 0.0, 0.5).is_ok());
    }

    #[test]
    fn baseline_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 2, 2, 1], vec![0.5, 1.0, -2.0, 3.0]).unwrap());
        let l = baseline_loss(&mut g, a, a).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let b = g.constant(Tensor::new(vec![1, 2, 2, 1], vec![1.5, 2.0, -1.0, 4.0]).unwrap());
        let l = baseline_loss(&mut g, b, a).unwrap();
        assert_eq!(g.value(l).item(), 1.0);

        let t = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![0.0, 0.0]).unwrap());
        let s = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap());
        let l = baseline_loss(&mut g, t, s).unwrap();
        assert_eq!(g.value(l).item(), 5.0);

        let bad = g.constant(Tensor::zeros(&[1, 1, 2, 1]));
        assert!(matches!(baseline_loss(&mut g, t, bad), Err(FgdError::Dimension(_))));
    }

    #[test]
    fn feature_loss_examples() {
        let masks = one_pixel_masks();
        let mut g = Graph::new();
        let t = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap());
        let s = g.input(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let (fg, bg) = feature_loss(&mut g, t, s, &masks, 1e-3, 5e-4).unwrap();
        assert!((g.value(fg).item() - 4e-3).abs() < 1e-18);
        assert_eq!(g.value(bg).item(), 0.0);

        let (fg, bg) = feature_loss(&mut g, t, t, &masks, 1e-3, 5e-4).unwrap();
        assert_eq!((g.value(fg).item(), g.value(bg).item()), (0.0, 0.0));
        let (fg, bg) = feature_loss(&mut g, t, s, &masks, 0.0, 0.0).unwrap();
        assert_eq!((g.value(fg).item(), g.value(bg).item()), (0.0, 0.0));

        let wrong = g.constant(Tensor::zeros(&[1, 2, 1, 1]));
        assert!(feature_loss(&mut g, wrong, wrong, &masks, 1.0, 1.0).is_err());
    }

    #[test]
    fn attention_loss_examples() {
        let mut teacher = one_pixel_masks();
        teacher.spatial_attn = Tensor::new(vec![1, 2], vec![0.5, 1.5]).unwrap();
        teacher.channel_attn = Tensor::from_slice(&[1.0, 1.0]);
        let mut g = Graph::new();
        let ss = g.constant(Tensor::ones(&[1, 2]));
        let sc = g.constant(Tensor::ones(&[2]));
        let l = attention_loss(&mut g, &teacher, ss, sc, 1.0, L1Reduction::Mean).unwrap();
        assert_eq!(g.value(l).item(), 0.5);
        let l = attention_loss(&mut g, &teacher, ss, sc, 1.0, L1Reduction::Sum).unwrap();
        assert_eq!(g.value(l).item(), 1.0);

        let ts = g.constant(teacher.spatial_attn.clone());
        let tc = g.constant(teacher.channel_attn.clone());
        let l = attention_loss(&mut g, &teacher, ts, tc, 3.0, L1Reduction::Mean).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let bad = g.constant(Tensor::ones(&[3]));
        assert!(attention_loss(&mut g, &teacher, ss, bad, 1.0, L1Reduction::Mean).is_err());
    }

    #[test]
    fn ablation_modes() {
        let hp = FgdHyperParams::preset("anchor-one-stage").unwrap();
        assert_eq!(AblationMode::FgOnly.apply(&hp).0.beta, 0.0);
        assert_eq!(AblationMode::BgOnly.apply(&hp).0.alpha, 0.0);
        let (j, _) = AblationMode::JointNoSplit.apply(&hp);
        assert_eq!(j.alpha, j.beta);
        assert!(AblationMode::NoSpatialAttn.apply(&hp).1.spatial_ones);
        assert!(AblationMode::NoChannelAttn.apply(&hp).1.channel_ones);
        assert_eq!(AblationMode::Full.apply(&hp), (hp, MaskOverrides::default()));
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
        }
        assert!(matches!("focal".parse::<AblationMode>(), Err(FgdError::Parameter(_))));
    }

    #[test]
    fn adaptation_is_identity_when_square() {
        let mut rng = rand::thread_rng();
        let a = Adaptation::new("adapt", 3, 3, &mut rng);
        let mut g = Graph::new();
        let v = a.bind(&mut g);
        let x = g.constant(Tensor::uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut rng));
        let y = v.apply(&mut g, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn fg_only_on_empty_image_has_no_feature_loss() {
        let mut rng = rand::thread_rng();
        let teacher = Tensor::uniform(&[1, 2, 2, 2], -1.0, 1.0, &mut rng);
        let boxes = vec![BoxSet::empty((4, 4))];
        let mut g = Graph::new();
        let s = g.input(Tensor::uniform(&[1, 2, 2, 2], -1.0, 1.0, &mut rng));
        let adapt = Adaptation::new("a", 2, 2, &mut rng).bind(&mut g);
        let gc = crate::gcblock::GcBlockParams::new("gc", 2, 2, &mut rng).unwrap().bind(&mut g);
        let task = g.constant(Tensor::scalar(0.0));
        let levels = [LevelInput {
            teacher: &teacher,
            student: s,
            boxes: &boxes,
            geom: LevelGeometry::for_image((4, 4), 2).unwrap(),
        }];
        let hp = FgdHyperParams::preset("anchor-free").unwrap();
        let terms =
            fgd_total(&mut g, &levels, &hp, AblationMode::FgOnly, &[adapt], &[gc], task, L1Reduction::Mean).unwrap();
        let r = terms.report(&g);
        assert_eq!(r.fea_fg + r.fea_bg, 0.0);
        assert!(r.attention > 0.0);
    }
}
