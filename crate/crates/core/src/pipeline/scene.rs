//! Synthetic scenes: uniform background noise with painted rectangles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FgdError, Result};
use crate::masks::{BBox, BoxSet};
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;
pub const MAX_RECTS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_rects: usize,
    pub max_rects: usize,
    pub min_rect_size: usize,
    pub max_rect_size: usize,
    /// Background values are uniform in `[0, noise)`.
    pub noise: f64,
    /// Mean intensity added inside a rectangle.
    pub contrast: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 32,
            width: 32,
            min_rects: 1,
            max_rects: 3,
            min_rect_size: 4,
            max_rect_size: 14,
            noise: 0.2,
            contrast: 1.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(FgdError::config("scene dimensions must be positive"));
        }
        if self.max_rects > MAX_RECTS || self.min_rects > self.max_rects {
            return Err(FgdError::config(format!(
                "rectangle count range {}..={} must lie within 0..={MAX_RECTS}",
                self.min_rects, self.max_rects
            )));
        }
        if self.min_rect_size == 0 || self.min_rect_size > self.max_rect_size {
            return Err(FgdError::config("rectangle size range is empty"));
        }
        if self.max_rect_size > self.height.min(self.width) {
            return Err(FgdError::config(format!(
                "rectangles up to {} px do not fit a {}x{} image",
                self.max_rect_size, self.height, self.width
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.contrast >= 0.0 && self.contrast.is_finite()) {
            return Err(FgdError::config("noise and contrast must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `[3, H, W]`
    pub image: Tensor,
    pub boxes: BoxSet,
    pub seed: u64,
}

/// Deterministic scene for `seed`. Later rectangles paint over earlier ones.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let plane = h * w;
    let mut img: Vec<f64> = (0..IMAGE_CHANNELS * plane).map(|_| cfg.noise * rng.gen::<f64>()).collect();
    let n = rng.gen_range(cfg.min_rects..=cfg.max_rects);
    let mut boxes = Vec::with_capacity(n);
    for _ in 0..n {
        let rh = rng.gen_range(cfg.min_rect_size..=cfg.max_rect_size);
        let rw = rng.gen_range(cfg.min_rect_size..=cfg.max_rect_size);
        let y = rng.gen_range(0..=h - rh);
        let x = rng.gen_range(0..=w - rw);
        // per-channel colour with mean 1 across channels
        let mut colour: Vec<f64> = (0..IMAGE_CHANNELS).map(|_| rng.gen_range(0.5..1.5)).collect();
        let mean = colour.iter().sum::<f64>() / IMAGE_CHANNELS as f64;
        colour.iter_mut().for_each(|c| *c /= mean);
        for (k, c) in colour.iter().enumerate() {
            for i in y..y + rh {
                for j in x..x + rw {
                    let idx = k * plane + i * w + j;
                    img[idx] = cfg.noise * rng.gen::<f64>() + cfg.contrast * c;
                }
            }
        }
        boxes.push(BBox::new(x as f64, y as f64, (x + rw) as f64, (y + rh) as f64));
    }
    Ok(SyntheticScene {
        image: Tensor::new(vec![IMAGE_CHANNELS, h, w], img)?,
        boxes: BoxSet::new(boxes, (h, w))?,
        seed,
    })
}

/// Scene for externally supplied boxes: background noise drawn from
/// `seed`, each box painted over the pixels whose centres it contains.
pub fn scene_from_boxes(cfg: &SceneConfig, boxes: BoxSet, seed: u64) -> Result<SyntheticScene> {
    let (h, w) = (cfg.height, cfg.width);
    if boxes.image_size() != (h, w) {
        return Err(FgdError::config(format!(
            "box file is for a {:?} image, config has {h}x{w}",
            boxes.image_size()
        )));
    }
    let background = SceneConfig { min_rects: 0, max_rects: 0, ..cfg.clone() };
    let mut scene = generate_scene(&background, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    let plane = h * w;
    let img = scene.image.data_mut();
    for b in boxes.boxes() {
        let rows = (b.y1 - 0.5).ceil().max(0.0) as usize..((b.y2 - 0.5).ceil().max(0.0) as usize).min(h);
        let cols = (b.x1 - 0.5).ceil().max(0.0) as usize..((b.x2 - 0.5).ceil().max(0.0) as usize).min(w);
        for k in 0..IMAGE_CHANNELS {
            for i in rows.clone() {
                for j in cols.clone() {
                    img[k * plane + i * w + j] = cfg.noise * rng.gen::<f64>() + cfg.contrast;
                }
            }
        }
    }
    scene.boxes = boxes;
    Ok(scene)
}

/// Stacks scene images into a `[B, 3, H, W]` batch.
pub fn image_batch(scenes: &[&SyntheticScene]) -> Result<Tensor> {
    let items: Vec<Tensor> = scenes
        .iter()
        .map(|s| {
            let mut shape = vec![1];
            shape.extend_from_slice(s.image.shape());
            s.image.reshape(&shape)
        })
        .collect::<Result<_>>()?;
    Tensor::stack_batch(&items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rectangles_gives_noise_and_no_boxes() {
        let cfg = SceneConfig { min_rects: 0, max_rects: 0, ..SceneConfig::default() };
        let s = generate_scene(&cfg, 3).unwrap();
        assert!(s.boxes.is_empty());
        assert!(s.image.data().iter().all(|&v| (0.0..cfg.noise).contains(&v)));
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(&cfg, 42).unwrap(), generate_scene(&cfg, 42).unwrap());
        assert_ne!(generate_scene(&cfg, 42).unwrap(), generate_scene(&cfg, 43).unwrap());
    }

    #[test]
    fn rectangle_is_brighter_by_contrast() {
        let cfg = SceneConfig {
            min_rects: 1,
            max_rects: 1,
            min_rect_size: 12,
            max_rect_size: 12,
            contrast: 2.0,
            ..SceneConfig::default()
        };
        for seed in 0..5 {
            let s = generate_scene(&cfg, seed).unwrap();
            let b = s.boxes.boxes()[0];
            let (h, w) = (cfg.height, cfg.width);
            let (mut fg, mut nfg, mut bg, mut nbg) = (0.0, 0, 0.0, 0);
            for k in 0..3 {
                for i in 0..h {
                    for j in 0..w {
                        let v = s.image.data()[k * h * w + i * w + j];
                        let inside = (b.x1 as usize..b.x2 as usize).contains(&j)
                            && (b.y1 as usize..b.y2 as usize).contains(&i);
                        if inside {
                            fg += v;
                            nfg += 1;
                        } else {
                            bg += v;
                            nbg += 1;
                        }
                    }
                }
            }
            let diff = fg / nfg as f64 - bg / nbg as f64;
            // the noise means differ by sampling error only
            assert!((diff - cfg.contrast).abs() < 0.02, "seed {seed}: {diff}");
        }
    }

    #[test]
    fn painted_extent_matches_box() {
        let cfg = SceneConfig { min_rects: 1, max_rects: 1, noise: 0.0, ..SceneConfig::default() };
        let s = generate_scene(&cfg, 11).unwrap();
        let b = s.boxes.boxes()[0];
        let w = cfg.width;
        for i in 0..cfg.height {
            for j in 0..w {
                let inside = (b.x1 as usize..b.x2 as usize).contains(&j) && (b.y1 as usize..b.y2 as usize).contains(&i);
                assert_eq!(s.image.data()[i * w + j] > 0.0, inside);
            }
        }
    }

    #[test]
    fn supplied_boxes_are_painted() {
        let cfg = SceneConfig { noise: 0.0, ..SceneConfig::default() };
        let boxes = BoxSet::new(vec![BBox::new(1.0, 2.0, 3.0, 5.0)], (32, 32)).unwrap();
        let s = scene_from_boxes(&cfg, boxes.clone(), 0).unwrap();
        assert_eq!(s.boxes, boxes);
        let lit: Vec<usize> = (0..32 * 32).filter(|&i| s.image.data()[i] > 0.0).collect();
        assert_eq!(lit, vec![2 * 32 + 1, 2 * 32 + 2, 3 * 32 + 1, 3 * 32 + 2, 4 * 32 + 1, 4 * 32 + 2]);
        let wrong = BoxSet::empty((16, 16));
        assert!(scene_from_boxes(&cfg, wrong, 0).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let too_big = SceneConfig { max_rect_size: 40, ..SceneConfig::default() };
        assert!(matches!(generate_scene(&too_big, 0), Err(FgdError::Config(_))));
        let too_many = SceneConfig { max_rects: 5, ..SceneConfig::default() };
        assert!(generate_scene(&too_many, 0).is_err());
    }
}
