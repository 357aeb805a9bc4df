//! Tiny two-level feature extractor standing in for a backbone and neck.
//!
//! Each stage is a 1×1 convolution, an optional ReLU and a 2×2 mean pool,
//! so the two outputs sit at strides 2 and 4.

use rand::Rng;

use crate::error::{FgdError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Parameter, Tensor};

pub const LEVEL_STRIDES: [usize; 2] = [2, 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub weight: Parameter,
    pub bias: Parameter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyNet {
    pub stages: Vec<Stage>,
    pub relu: bool,
}

#[derive(Clone, Debug)]
pub struct ToyNetVars {
    stages: Vec<(Var, Var)>,
    relu: bool,
}

impl ToyNet {
    pub fn new<R: Rng + ?Sized>(prefix: &str, in_channels: usize, channels: usize, rng: &mut R) -> Self {
        let mut stages = Vec::with_capacity(LEVEL_STRIDES.len());
        let mut cin = in_channels;
        for s in 0..LEVEL_STRIDES.len() {
            let b = (3.0 / cin as f64).sqrt();
            stages.push(Stage {
                weight: Parameter::new(
                    format!("{prefix}.stage{s}.weight"),
                    Tensor::uniform(&[channels, cin], -b, b, rng),
                ),
                bias: Parameter::new(format!("{prefix}.stage{s}.bias"), Tensor::full(&[channels], 0.1)),
            });
            cin = channels;
        }
        ToyNet { stages, relu: true }
    }

    pub fn channels(&self) -> usize {
        self.stages[0].weight.shape()[0]
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        self.stages.iter().flat_map(|s| [&s.weight, &s.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.stages.iter_mut().flat_map(|s| [&mut s.weight, &mut s.bias]).collect()
    }

    pub fn bind(&self, g: &mut Graph) -> ToyNetVars {
        ToyNetVars {
            stages: self.stages.iter().map(|s| (g.param(&s.weight), g.param(&s.bias))).collect(),
            relu: self.relu,
        }
    }

    /// Binds the weights as constants (no gradient).
    pub fn bind_frozen(&self, g: &mut Graph) -> ToyNetVars {
        ToyNetVars {
            stages: self
                .stages
                .iter()
                .map(|s| (g.constant(s.weight.tensor.clone()), g.constant(s.bias.tensor.clone())))
                .collect(),
            relu: self.relu,
        }
    }

    /// Level features of `image` (`[B, 3, H, W]`) as plain values.
    pub fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let x = g.constant(image.clone());
        let levels = vars.forward(&mut g, x)?;
        Ok(levels.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

impl ToyNetVars {
    /// One feature map per level, at strides [`LEVEL_STRIDES`].
    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>> {
        let s = g.shape(image).to_vec();
        let deepest = *LEVEL_STRIDES.last().expect("at least one level");
        if s.len() != 4 || !s[2].is_multiple_of(deepest) || !s[3].is_multiple_of(deepest) {
            return Err(FgdError::dim(format!(
                "image {s:?} must be [B, C, H, W] with H and W divisible by {deepest}"
            )));
        }
        let mut x = image;
        let mut levels = Vec::with_capacity(self.stages.len());
        for &(w, b) in &self.stages {
            x = g.conv1x1(x, w, Some(b))?;
            if self.relu {
                x = g.relu(x);
            }
            x = g.avg_pool2(x)?;
            levels.push(x);
        }
        Ok(levels)
    }
}

/// Regression target of the stand-in task: a fixed non-negative projection
/// of the 2×-pooled image onto the first `channels` rows of `projection`.
pub fn task_target(image: &Tensor, projection: &Tensor, channels: usize) -> Result<Tensor> {
    let rows = projection.shape()[0];
    if channels > rows {
        return Err(FgdError::dim(format!("task projection has {rows} rows, need {channels}")));
    }
    let cin = projection.shape()[1];
    let w = Tensor::new(vec![channels, cin], projection.data()[..channels * cin].to_vec())?;
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let x = g.avg_pool2(x)?;
    let w = g.constant(w);
    let y = g.conv1x1(x, w, None)?;
    Ok(g.value(y).clone())
}
