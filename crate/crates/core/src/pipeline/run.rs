//! Full distillation runs: training loop, metric log, mask dumps and checkpoint.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info};

use crate::config::RunConfig;
use crate::error::{FgdError, Result};
use crate::graph::Graph;
use crate::io::{grid_text, pgm, vector_csv, write_atomic};
use crate::losses::{FgdHyperParams, LossReport};
use crate::masks::{attention_masks, build_masks, channel_attention_map, spatial_attention_map, LevelGeometry};

use super::checkpoint;
use super::scene::{image_batch, SyntheticScene};
use super::toynet::LEVEL_STRIDES;
use super::train::{Dataset, PlateauSchedule, TrainState};

pub const METRICS_HEADER: &str = "step,fea_fg,fea_bg,attention,focal,global,task,total";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_ECHO_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const GAPS_FILE: &str = "attention_gap.csv";

/// Distance between teacher and student attention masks on one level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionGap {
    pub level: usize,
    /// Mean `|A^S_t − A^S_s|` over pixels.
    pub spatial_l1: f64,
    /// Mean `|A^C_t − A^C_s|` over channels.
    pub channel_l1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    /// One report per step, losses before that step's update.
    pub reports: Vec<LossReport>,
    /// Gaps on the probe scene at every dumped step.
    pub gaps: Vec<(usize, Vec<AttentionGap>)>,
    pub final_lr: f64,
    pub out_dir: PathBuf,
}

impl RunSummary {
    /// Mean spatial gap over levels at the first and last dumps.
    pub fn spatial_gap_change(&self) -> Option<(f64, f64)> {
        let mean = |g: &[AttentionGap]| g.iter().map(|x| x.spatial_l1).sum::<f64>() / g.len() as f64;
        Some((mean(&self.gaps.first()?.1), mean(&self.gaps.last()?.1)))
    }
}

pub fn metrics_row(step: usize, r: &LossReport) -> String {
    format!(
        "{step},{},{},{},{},{},{},{}",
        r.fea_fg, r.fea_bg, r.attention, r.focal, r.global_, r.task, r.total
    )
}

pub fn metrics_csv(reports: &[LossReport]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for (i, r) in reports.iter().enumerate() {
        let _ = writeln!(s, "{}", metrics_row(i, r));
    }
    s
}

/// Writes teacher and student masks of every level for `scene` into `dir`
/// and returns the attention gaps. Student masks come from the adapted
/// student features, as in the loss.
pub fn dump_masks(dir: &Path, state: &TrainState, scene: &SyntheticScene, hp: &FgdHyperParams) -> Result<Vec<AttentionGap>> {
    let image = image_batch(&[scene])?;
    let teacher = state.teacher.features(&image)?;
    let student = state.student.features(&image)?;
    write_atomic(&dir.join("boxes.txt"), scene.boxes.to_text().as_bytes())?;
    let mut gaps = Vec::new();
    for (l, &stride) in LEVEL_STRIDES.iter().enumerate() {
        let geom = LevelGeometry::for_image(scene.boxes.image_size(), stride)?;
        let tm = build_masks(&teacher[l], &scene.boxes, &geom, hp.temperature)?;
        let adapted = {
            let mut g = Graph::new();
            let vars = state.adapters[l].bind(&mut g);
            let x = g.constant(student[l].clone());
            let y = vars.apply(&mut g, x)?;
            g.value(y).clone()
        };
        let (ss, sc) =
            attention_masks(&spatial_attention_map(&adapted)?, &channel_attention_map(&adapted)?, hp.temperature)?;
        let mean_abs = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        let gap = AttentionGap {
            level: l,
            spatial_l1: mean_abs(tm.spatial_attn.data(), ss.data()),
            channel_l1: mean_abs(tm.channel_attn.data(), sc.data()),
        };
        let files: [(&str, Vec<u8>); 8] = [
            ("teacher_spatial.txt", grid_text(&tm.spatial_attn)?.into_bytes()),
            ("teacher_spatial.pgm", pgm(&tm.spatial_attn)?),
            ("student_spatial.txt", grid_text(&ss)?.into_bytes()),
            ("student_spatial.pgm", pgm(&ss)?),
            ("teacher_channel.csv", vector_csv(&tm.channel_attn, "channel,value").into_bytes()),
            ("student_channel.csv", vector_csv(&sc, "channel,value").into_bytes()),
            ("binary.txt", grid_text(&tm.binary)?.into_bytes()),
            ("scale.txt", grid_text(&tm.scale)?.into_bytes()),
        ];
        for (name, bytes) in files {
            write_atomic(&dir.join(format!("level{l}_{name}")), &bytes)?;
        }
        gaps.push(gap);
    }
    Ok(gaps)
}

pub fn mask_dir(out: &Path, step: usize) -> PathBuf {
    out.join("masks").join(format!("step_{step:06}"))
}

fn gaps_csv(gaps: &[(usize, Vec<AttentionGap>)]) -> String {
    let mut s = String::from("step,level,spatial_l1,channel_l1\n");
    for (step, gs) in gaps {
        for g in gs {
            let _ = writeln!(s, "{step},{},{},{}", g.level, g.spatial_l1, g.channel_l1);
        }
    }
    s
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    checkpoint::save(path, state.all_parameters().into_iter().map(|p| (p.name.as_str(), &p.tensor)))
}

/// Rebuilds the initial state for `cfg` and overwrites it from a checkpoint.
pub fn load_state(cfg: &RunConfig, data: &Dataset, path: &Path) -> Result<TrainState> {
    let entries = checkpoint::load(path)?;
    let mut cfg = cfg.clone();
    cfg.teacher_pretrain_steps = 0;
    let mut state = TrainState::init(&cfg, data)?;
    state.restore(&entries)?;
    Ok(state)
}

/// Trains for `cfg.steps` steps, writing into `cfg.out_dir`:
/// the config echo, `metrics.csv`, mask dumps, attention gaps and the
/// final checkpoint. A non-finite loss writes `diagnostic.txt` and fails.
pub fn distill_run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.out_dir.as_path();
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join(CONFIG_ECHO_FILE), cfg.echo()?.as_bytes())?;
    let hp = cfg.hyper_params()?;
    let data = Dataset::generate(&cfg.scene, cfg.seed, cfg.num_scenes)?;
    let mut state = TrainState::init(cfg, &data)?;
    let probe = &data.scenes[0];
    let mut schedule = PlateauSchedule::new(cfg.plateau_patience);
    let mut reports = Vec::with_capacity(cfg.steps);
    let mut gaps = Vec::new();
    info!("run {}: mode {}, {} steps", out.display(), cfg.mode, cfg.steps);

    for step in 0..cfg.steps {
        let due = step == 0 || (cfg.mask_dump_interval > 0 && step % cfg.mask_dump_interval == 0);
        if due {
            gaps.push((step, dump_masks(&mask_dir(out, step), &state, probe, &hp)?));
        }
        let batch = data.batch(step, cfg.batch_size);
        let report = match state.train_step(&batch, &hp, cfg.mode) {
            Ok(r) => r,
            Err(e @ FgdError::NonFinite { .. }) => {
                let mut d = format!("{e}\n");
                if let Some(last) = reports.last() {
                    let _ = writeln!(d, "last finite report: {last:?}");
                }
                let _ = writeln!(d, "learning rate: {}", state.optimizer.lr);
                write_atomic(&out.join("diagnostic.txt"), d.as_bytes())?;
                write_atomic(&out.join(METRICS_FILE), metrics_csv(&reports).as_bytes())?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        debug!("step {step}: {}", metrics_row(step, &report));
        if schedule.observe(report.total) {
            state.optimizer.lr *= 0.5;
            debug!("step {step}: learning rate halved to {}", state.optimizer.lr);
        }
        reports.push(report);
        if (step + 1) % 100 == 0 {
            info!("step {}: total {} distill {}", step + 1, report.total, report.total_distill);
            write_atomic(&out.join(METRICS_FILE), metrics_csv(&reports).as_bytes())?;
        }
    }
    if gaps.last().map(|(s, _)| *s) != Some(cfg.steps) {
        gaps.push((cfg.steps, dump_masks(&mask_dir(out, cfg.steps), &state, probe, &hp)?));
    }
    write_atomic(&out.join(METRICS_FILE), metrics_csv(&reports).as_bytes())?;
    write_atomic(&out.join(GAPS_FILE), gaps_csv(&gaps).as_bytes())?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &state)?;
    Ok(RunSummary { reports, gaps, final_lr: state.optimizer.lr, out_dir: out.to_path_buf() })
}
