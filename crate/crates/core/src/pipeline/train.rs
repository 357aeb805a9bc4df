//! Training state, SGD with momentum and weight decay, and one distillation step.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{FgdError, Result};
use crate::gcblock::{GcBlockParams, GcBlockVars};
use crate::graph::Graph;
use crate::losses::{fgd_total, Adaptation, AblationMode, FgdHyperParams, L1Reduction, LevelInput, LossReport};
use crate::masks::{BoxSet, LevelGeometry};
use crate::tensor::{Parameter, Tensor};

use super::scene::{generate_scene, image_batch, SceneConfig, SyntheticScene, IMAGE_CHANNELS};
use super::toynet::{task_target, ToyNet, LEVEL_STRIDES};

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd { lr, momentum, weight_decay, velocity: BTreeMap::new() }
    }

    /// `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr·v`, then clears the gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter>) {
        for p in params {
            let n = p.tensor.numel();
            let grad = p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            let v = self.velocity.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let data = p.tensor.data_mut();
            for i in 0..n {
                let d = grad[i] + self.weight_decay * data[i];
                v[i] = self.momentum * v[i] + d;
                data[i] -= self.lr * v[i];
            }
            p.zero_grad();
        }
    }
}

/// Halves the learning rate when the monitored loss stops improving.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub patience: usize,
    best: f64,
    since_best: usize,
}

impl PlateauSchedule {
    pub fn new(patience: usize) -> Self {
        PlateauSchedule { patience, best: f64::INFINITY, since_best: 0 }
    }

    /// Records `loss`; returns true when the rate should be halved.
    pub fn observe(&mut self, loss: f64) -> bool {
        if self.patience == 0 {
            return false;
        }
        if loss < self.best * (1.0 - 1e-4) {
            self.best = loss;
            self.since_best = 0;
            return false;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            self.since_best = 0;
            return true;
        }
        false
    }
}

/// Fixed pool of scenes; batch `k` takes consecutive scenes cyclically.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<SyntheticScene>,
}

impl Dataset {
    pub fn generate(cfg: &SceneConfig, seed: u64, count: usize) -> Result<Self> {
        let scenes = (0..count as u64)
            .map(|i| generate_scene(cfg, scene_seed(seed, i)))
            .collect::<Result<_>>()?;
        Ok(Dataset { scenes })
    }

    pub fn batch(&self, step: usize, batch_size: usize) -> Vec<&SyntheticScene> {
        let n = self.scenes.len();
        (0..batch_size).map(|j| &self.scenes[(step * batch_size + j) % n]).collect()
    }
}

/// Seed of scene `i` in the pool of run `seed`.
pub fn scene_seed(seed: u64, i: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i.wrapping_mul(0xBF58_476D_1CE4_E5B9)) ^ i
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub teacher: ToyNet,
    pub student: ToyNet,
    pub adapters: Vec<Adaptation>,
    /// One block per level, or a single block shared by every level.
    pub gcs: Vec<GcBlockParams>,
    pub optimizer: Sgd,
    /// `[teacher_channels, 3]` non-negative projection defining the task.
    pub task_projection: Tensor,
    pub l1_reduction: L1Reduction,
    pub rng_seed: u64,
}

impl TrainState {
    /// Fresh student, adapters and GcBlocks plus a teacher trained on the
    /// stand-in task for `cfg.teacher_pretrain_steps` steps.
    pub fn init(cfg: &RunConfig, data: &Dataset) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let tc = cfg.teacher_channels;
        let sc = cfg.student_channels;
        if sc > tc {
            return Err(FgdError::config(format!("student has {sc} channels, teacher only {tc}")));
        }
        let task_projection = Tensor::uniform(&[tc, IMAGE_CHANNELS], 0.0, 1.0, &mut rng);
        let teacher = ToyNet::new("teacher", IMAGE_CHANNELS, tc, &mut rng);
        let student = ToyNet::new("student", IMAGE_CHANNELS, sc, &mut rng);
        let adapters = (0..LEVEL_STRIDES.len())
            .map(|l| Adaptation::new(&format!("adapt.l{l}"), sc, tc, &mut rng))
            .collect();
        let gcs = if cfg.share_gc {
            vec![GcBlockParams::new("gc.shared", tc, cfg.gc_reduction, &mut rng)?]
        } else {
            (0..LEVEL_STRIDES.len())
                .map(|l| GcBlockParams::new(&format!("gc.l{l}"), tc, cfg.gc_reduction, &mut rng))
                .collect::<Result<_>>()?
        };
        let mut state = TrainState {
            step: 0,
            teacher,
            student,
            adapters,
            gcs,
            optimizer: Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay),
            task_projection,
            l1_reduction: cfg.l1_reduction,
            rng_seed: rng.gen(),
        };
        state.pretrain_teacher(data, cfg)?;
        Ok(state)
    }

    fn pretrain_teacher(&mut self, data: &Dataset, cfg: &RunConfig) -> Result<()> {
        let mut opt = Sgd::new(cfg.teacher_lr, cfg.momentum, cfg.weight_decay);
        for k in 0..cfg.teacher_pretrain_steps {
            let batch = data.batch(k, cfg.batch_size);
            let image = image_batch(&batch)?;
            let target = task_target(&image, &self.task_projection, self.teacher.channels())?;
            let mut g = Graph::new();
            let vars = self.teacher.bind(&mut g);
            let x = g.constant(image);
            let levels = vars.forward(&mut g, x)?;
            let t = g.constant(target);
            let d = g.sub(levels[0], t)?;
            let sq = g.square(d);
            let loss = g.mean_all(sq);
            let v = g.value(loss).item();
            if !v.is_finite() {
                return Err(FgdError::NonFinite { step: k, detail: format!("teacher pretraining loss {v}") });
            }
            g.backward(loss)?.accumulate_into(self.teacher.parameters_mut())?;
            opt.step(self.teacher.parameters_mut());
        }
        Ok(())
    }

    /// Parameters updated by the optimizer.
    pub fn trainable(&self) -> Vec<&Parameter> {
        let mut v = self.student.parameters();
        v.extend(self.adapters.iter().flat_map(|a| a.parameters()));
        v.extend(self.gcs.iter().flat_map(|g| g.parameters()));
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Parameter> {
        self.split_mut().1
    }

    fn split_mut(&mut self) -> (Vec<&mut Parameter>, Vec<&mut Parameter>) {
        let mut v = self.student.parameters_mut();
        v.extend(self.adapters.iter_mut().flat_map(|a| a.parameters_mut()));
        v.extend(self.gcs.iter_mut().flat_map(|g| g.parameters_mut()));
        (self.teacher.parameters_mut(), v)
    }

    /// Every parameter, teacher included, in a fixed order.
    pub fn all_parameters(&self) -> Vec<&Parameter> {
        let mut v = self.teacher.parameters();
        v.extend(self.trainable());
        v
    }

    pub fn all_parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let (mut v, rest) = self.split_mut();
        v.extend(rest);
        v
    }

    /// Forward and backward pass on `batch`; gradients are added to the
    /// trainable parameters and no update is made.
    pub fn compute_gradients(
        &mut self,
        batch: &[&SyntheticScene],
        hp: &FgdHyperParams,
        mode: AblationMode,
    ) -> Result<LossReport> {
        let image = image_batch(batch)?;
        let teacher_levels = self.teacher.features(&image)?;
        let target = task_target(&image, &self.task_projection, self.student.channels())?;
        let boxes: Vec<BoxSet> = batch.iter().map(|s| s.boxes.clone()).collect();
        let image_size = boxes[0].image_size();

        let mut g = Graph::new();
        let student = self.student.bind(&mut g);
        let adapters: Vec<_> = self.adapters.iter().map(|a| a.bind(&mut g)).collect();
        let bound: Vec<GcBlockVars> = self.gcs.iter().map(|p| p.bind(&mut g)).collect();
        let gcs: Vec<GcBlockVars> = (0..LEVEL_STRIDES.len()).map(|l| bound[l.min(bound.len() - 1)]).collect();
        let x = g.constant(image);
        let levels = student.forward(&mut g, x)?;
        let t = g.constant(target);
        let d = g.sub(levels[0], t)?;
        let sq = g.square(d);
        let task = g.mean_all(sq);

        let inputs = LEVEL_STRIDES
            .iter()
            .zip(&teacher_levels)
            .zip(&levels)
            .map(|((&stride, teacher), &student)| {
                Ok(LevelInput { teacher, student, boxes: &boxes, geom: LevelGeometry::for_image(image_size, stride)? })
            })
            .collect::<Result<Vec<_>>>()?;
        let terms = fgd_total(&mut g, &inputs, hp, mode, &adapters, &gcs, task, self.l1_reduction)?;
        let report = terms.report(&g);
        if !report.is_finite() {
            return Err(FgdError::NonFinite { step: self.step, detail: format!("{report:?}") });
        }
        g.backward(terms.total)?.accumulate_into(self.trainable_mut())?;
        Ok(report)
    }

    /// Applies the accumulated gradients and advances the step counter.
    pub fn apply_update(&mut self) {
        let mut opt = std::mem::replace(&mut self.optimizer, Sgd::new(0.0, 0.0, 0.0));
        opt.step(self.trainable_mut());
        self.optimizer = opt;
        self.step += 1;
    }

    /// One SGD update; the report holds the losses before the update.
    pub fn train_step(
        &mut self,
        batch: &[&SyntheticScene],
        hp: &FgdHyperParams,
        mode: AblationMode,
    ) -> Result<LossReport> {
        let report = self.compute_gradients(batch, hp, mode)?;
        self.apply_update();
        Ok(report)
    }

    /// Replaces parameter values from `(name, tensor)` pairs; every
    /// parameter must be present with a matching shape.
    pub fn restore(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let map: BTreeMap<&str, &Tensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in self.all_parameters_mut() {
            let t = map
                .get(p.name.as_str())
                .ok_or_else(|| FgdError::Format(format!("checkpoint lacks parameter {}", p.name)))?;
            if t.shape() != p.shape() {
                return Err(FgdError::Format(format!(
                    "parameter {} has shape {:?} in the checkpoint, expected {:?}",
                    p.name,
                    t.shape(),
                    p.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}
