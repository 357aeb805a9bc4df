//! Global context block: softmax-attention pooling over all pixels, a
//! bottleneck transform, and a residual add back onto every pixel.

use rand::Rng;

use crate::error::{FgdError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Parameter, Tensor};

pub const DEFAULT_REDUCTION: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct GcBlockParams {
    /// `[1, C]` context-logit projection.
    pub w_k: Parameter,
    /// `[C_mid, C]`
    pub w_v1: Parameter,
    /// `[C, C_mid]`
    pub w_v2: Parameter,
    pub ln_gamma: Parameter,
    pub ln_beta: Parameter,
    pub reduction: usize,
}

impl GcBlockParams {
    /// `w_k` and `w_v1` uniform in `[-0.1, 0.1]`, `w_v2` zero, layer norm
    /// at identity. With `w_v2 = 0` the block starts as `R(F) = F`.
    pub fn new<R: Rng + ?Sized>(prefix: &str, channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(FgdError::param("gcblock channels and reduction must be positive"));
        }
        let mid = (channels / reduction).max(1);
        Ok(GcBlockParams {
            w_k: Parameter::new(format!("{prefix}.w_k"), Tensor::uniform(&[1, channels], -0.1, 0.1, rng)),
            w_v1: Parameter::new(format!("{prefix}.w_v1"), Tensor::uniform(&[mid, channels], -0.1, 0.1, rng)),
            w_v2: Parameter::new(format!("{prefix}.w_v2"), Tensor::zeros(&[channels, mid])),
            ln_gamma: Parameter::new(format!("{prefix}.ln_gamma"), Tensor::ones(&[mid])),
            ln_beta: Parameter::new(format!("{prefix}.ln_beta"), Tensor::zeros(&[mid])),
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_k.shape()[1]
    }

    pub fn mid_channels(&self) -> usize {
        self.w_v1.shape()[0]
    }

    pub fn parameters(&self) -> [&Parameter; 5] {
        [&self.w_k, &self.w_v1, &self.w_v2, &self.ln_gamma, &self.ln_beta]
    }

    pub fn parameters_mut(&mut self) -> [&mut Parameter; 5] {
        [&mut self.w_k, &mut self.w_v1, &mut self.w_v2, &mut self.ln_gamma, &mut self.ln_beta]
    }

    pub fn bind(&self, g: &mut Graph) -> GcBlockVars {
        GcBlockVars {
            w_k: g.param(&self.w_k),
            w_v1: g.param(&self.w_v1),
            w_v2: g.param(&self.w_v2),
            ln_gamma: g.param(&self.ln_gamma),
            ln_beta: g.param(&self.ln_beta),
        }
    }

    /// `R(F)` evaluated without gradient tracking.
    pub fn relation_value(&self, f: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = GcBlockVars {
            w_k: g.constant(self.w_k.tensor.clone()),
            w_v1: g.constant(self.w_v1.tensor.clone()),
            w_v2: g.constant(self.w_v2.tensor.clone()),
            ln_gamma: g.constant(self.ln_gamma.tensor.clone()),
            ln_beta: g.constant(self.ln_beta.tensor.clone()),
        };
        let x = g.constant(f.clone());
        let r = relation(&mut g, x, &vars)?;
        Ok(g.value(r).clone())
    }
}

/// Graph handles of a bound [`GcBlockParams`].
#[derive(Clone, Copy, Debug)]
pub struct GcBlockVars {
    pub w_k: Var,
    pub w_v1: Var,
    pub w_v2: Var,
    pub ln_gamma: Var,
    pub ln_beta: Var,
}

/// Softmax-weighted sum of the pixel vectors of a `[1, C, H, W]` map,
/// returned as a `[C]` vector.
pub fn context_pool(g: &mut Graph, f: Var, w_k: Var) -> Result<Var> {
    let s = g.shape(f).to_vec();
    if s.len() != 4 || s[0] != 1 {
        return Err(FgdError::dim(format!("context_pool expects [1, C, H, W], got {s:?}")));
    }
    let (c, np) = (s[1], s[2] * s[3]);
    let logits = g.conv1x1(f, w_k, None)?;
    if g.shape(logits)[1] != 1 {
        return Err(FgdError::dim("w_k must project to a single logit channel"));
    }
    let logits = g.reshape(logits, &[np])?;
    let weights = g.softmax_t(logits, 0, 1.0)?;
    let weights = g.reshape(weights, &[np, 1])?;
    let pixels = g.reshape(f, &[c, np])?;
    let ctx = g.matmul(pixels, weights)?;
    g.reshape(ctx, &[c])
}

/// `w_v2 · relu(layer_norm(w_v1 · ctx))` for a `[C]` context vector.
pub fn transform(g: &mut Graph, ctx: Var, p: &GcBlockVars) -> Result<Var> {
    let c = g.value(ctx).numel();
    let col = g.reshape(ctx, &[c, 1])?;
    let hidden = g.matmul(p.w_v1, col)?;
    let mid = g.shape(hidden)[0];
    let hidden = g.reshape(hidden, &[mid])?;
    let normed = g.layer_norm(hidden, p.ln_gamma, p.ln_beta, &[0])?;
    let act = g.relu(normed);
    let act = g.reshape(act, &[mid, 1])?;
    let out = g.matmul(p.w_v2, act)?;
    g.reshape(out, &[c])
}

/// `R(F) = F + transform(context_pool(F))` with the transform broadcast to
/// every pixel. Works per image on a `[B, C, H, W]` batch.
pub fn relation(g: &mut Graph, f: Var, p: &GcBlockVars) -> Result<Var> {
    let s = g.shape(f).to_vec();
    if s.len() != 4 {
        return Err(FgdError::dim(format!("relation expects [B, C, H, W], got {s:?}")));
    }
    let mut parts = Vec::with_capacity(s[0]);
    for b in 0..s[0] {
        let fi = g.select_batch(f, b)?;
        let ctx = context_pool(g, fi, p.w_k)?;
        let delta = transform(g, ctx, p)?;
        let delta = g.reshape(delta, &[1, s[1], 1, 1])?;
        let delta = g.broadcast_to(delta, &[1, s[1], s[2], s[3]])?;
        parts.push(g.add(fi, delta)?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat_batch(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(c: usize, reduction: usize, seed: u64) -> GcBlockParams {
        GcBlockParams::new("gc", c, reduction, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn context_pool_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let px = g.constant(Tensor::new(vec![1, 3, 1, 1], vec![0.5, -1.0, 2.0]).unwrap());
        let wk = g.constant(Tensor::uniform(&[1, 3], -3.0, 3.0, &mut rng));
        let ctx = context_pool(&mut g, px, wk).unwrap();
        assert_eq!(g.value(ctx).data(), &[0.5, -1.0, 2.0]);

        let data: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let f = g.constant(Tensor::new(vec![1, 2, 2, 2], data).unwrap());
        let zero = g.constant(Tensor::zeros(&[1, 2]));
        let ctx = context_pool(&mut g, f, zero).unwrap();
        assert_eq!(g.value(ctx).data(), &[1.5, 5.5]);

        // logits [0, ln 3] from w_k = [ln 3, 0] on pixels (0, a), (1, b)
        let f = g.constant(Tensor::new(vec![1, 2, 1, 2], vec![0.0, 1.0, 4.0, 8.0]).unwrap());
        let wk = g.constant(Tensor::new(vec![1, 2], vec![3f64.ln(), 0.0]).unwrap());
        let ctx = context_pool(&mut g, f, wk).unwrap();
        let d = g.value(ctx).data();
        assert!((d[0] - 0.75).abs() < 1e-15);
        assert!((d[1] - (0.25 * 4.0 + 0.75 * 8.0)).abs() < 1e-14);
    }

    #[test]
    fn transform_examples() {
        let mut p = params(4, 2, 3);
        let mut g = Graph::new();
        let v = p.bind(&mut g);
        let ctx = g.constant(Tensor::from_slice(&[0.3, -0.2, 1.0, 0.5]));
        let out = transform(&mut g, ctx, &v).unwrap();
        assert!(g.value(out).data().iter().all(|&x| x == 0.0));

        p.w_v1.tensor = Tensor::zeros(&[2, 4]);
        p.ln_beta.tensor = Tensor::from_slice(&[0.7, -0.4]);
        p.w_v2.tensor = Tensor::new(vec![4, 2], vec![1.0, 1.0, 2.0, 0.0, -1.0, 3.0, 0.5, 0.5]).unwrap();
        let mut g = Graph::new();
        let v = p.bind(&mut g);
        let ctx = g.constant(Tensor::from_slice(&[0.3, -0.2, 1.0, 0.5]));
        let out = transform(&mut g, ctx, &v).unwrap();
        // relu(beta) = (0.7, 0)
        let expect = [0.7, 1.4, -0.7, 0.35];
        for (a, b) in g.value(out).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn relation_with_zero_w_v2_is_identity() {
        let p = params(4, 2, 5);
        let f = Tensor::uniform(&[2, 4, 3, 3], -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(p.relation_value(&f).unwrap(), f);
    }

    #[test]
    fn relation_on_constant_map_is_constant_per_channel() {
        let mut p = params(4, 2, 6);
        p.w_v2.tensor = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let mut data = Vec::new();
        for c in [0.5, -1.0, 2.0, 0.0] {
            data.extend(std::iter::repeat_n(c, 6));
        }
        let f = Tensor::new(vec![1, 4, 2, 3], data).unwrap();
        let r = p.relation_value(&f).unwrap();
        for c in 0..4 {
            let plane = &r.data()[c * 6..(c + 1) * 6];
            assert!(plane.iter().all(|&v| v == plane[0]));
        }
    }

    #[test]
    fn relation_hand_trace() {
        // C = 2, reduction 1 (C_mid = 2), one pixel (1, 2)
        let mut p = params(2, 1, 0);
        p.w_k.tensor = Tensor::new(vec![1, 2], vec![0.3, -0.8]).unwrap();
        p.w_v1.tensor = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        p.ln_gamma.tensor = Tensor::from_slice(&[1.0, 1.0]);
        p.ln_beta.tensor = Tensor::from_slice(&[0.0, 0.5]);
        p.w_v2.tensor = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 2.0]).unwrap();
        let f = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        // ctx = (1, 2); w_v1 ctx = (1, 3); mean 2, var 1
        // LN = (-a, a) + beta with a = 1/sqrt(1 + 1e-5); relu -> (0, a + 0.5)
        let v = 1.0 / (1.0f64 + 1e-5).sqrt() + 0.5;
        let r = p.relation_value(&f).unwrap();
        assert!((r.data()[0] - (1.0 + v)).abs() < 1e-14);
        assert!((r.data()[1] - (2.0 + 2.0 * v)).abs() < 1e-14);
    }

    #[test]
    fn shapes_and_names() {
        let p = params(8, 2, 0);
        assert_eq!(p.mid_channels(), 4);
        assert_eq!(p.w_v2.shape(), &[8, 4]);
        assert_eq!(p.w_k.name, "gc.w_k");
        assert_eq!(params(3, 16, 0).mid_channels(), 1);
    }
}
