//! Foreground/background, scale and attention masks for one feature level
//! of one image.
//!
//! Teacher masks are plain values. The student's attention masks have to be
//! differentiated, so [`attention_masks_var`] builds the same computation on
//! a [`Graph`].

use crate::error::{FgdError, Result};
use crate::graph::{softmax_values, Graph, Var};
use crate::tensor::Tensor;

/// Axis-aligned box in image-pixel coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }
}

/// Ground-truth boxes of one image, clipped to the image.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxSet {
    boxes: Vec<BBox>,
    /// `(height, width)` in pixels.
    image_size: (usize, usize),
}

impl BoxSet {
    pub fn new(boxes: Vec<BBox>, image_size: (usize, usize)) -> Result<Self> {
        let (h, w) = image_size;
        if h == 0 || w == 0 {
            return Err(FgdError::dim(format!("empty image size {image_size:?}")));
        }
        let mut clipped = Vec::with_capacity(boxes.len());
        for b in boxes {
            let finite = [b.x1, b.y1, b.x2, b.y2].iter().all(|v| v.is_finite());
            if !finite || b.x1 >= b.x2 || b.y1 >= b.y2 {
                return Err(FgdError::param(format!("invalid box {b:?}")));
            }
            let c = BBox {
                x1: b.x1.clamp(0.0, w as f64),
                y1: b.y1.clamp(0.0, h as f64),
                x2: b.x2.clamp(0.0, w as f64),
                y2: b.y2.clamp(0.0, h as f64),
            };
            if c.x1 >= c.x2 || c.y1 >= c.y2 {
                return Err(FgdError::param(format!("box {b:?} lies outside the {h}x{w} image")));
            }
            clipped.push(c);
        }
        Ok(BoxSet { boxes: clipped, image_size })
    }

    pub fn empty(image_size: (usize, usize)) -> Self {
        BoxSet { boxes: Vec::new(), image_size }
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Parses the box file format: a header line `height width`, then one
    /// `x1 y1 x2 y2` line per box. Blank lines and `#` comments are skipped.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| FgdError::Format("box file has no header".into()))?;
        let dims = parse_numbers(header)?;
        if dims.len() != 2 || dims.iter().any(|d| d.fract() != 0.0 || *d < 1.0) {
            return Err(FgdError::Format(format!("bad box file header {header:?}")));
        }
        let mut boxes = Vec::new();
        for line in lines {
            let v = parse_numbers(line)?;
            if v.len() != 4 {
                return Err(FgdError::Format(format!("box line needs 4 numbers: {line:?}")));
            }
            boxes.push(BBox::new(v[0], v[1], v[2], v[3]));
        }
        BoxSet::new(boxes, (dims[0] as usize, dims[1] as usize))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.image_size.0, self.image_size.1);
        for b in &self.boxes {
            s.push_str(&format!("{} {} {} {}\n", b.x1, b.y1, b.x2, b.y2));
        }
        s
    }
}

fn parse_numbers(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| FgdError::Format(format!("not a number: {t:?}"))))
        .collect()
}

/// How one feature level tiles the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelGeometry {
    pub stride: usize,
    pub feature_h: usize,
    pub feature_w: usize,
}

impl LevelGeometry {
    pub fn new(stride: usize, feature_h: usize, feature_w: usize) -> Result<Self> {
        if stride == 0 || feature_h == 0 || feature_w == 0 {
            return Err(FgdError::dim("level geometry extents must be positive"));
        }
        Ok(LevelGeometry { stride, feature_h, feature_w })
    }

    /// The smallest grid of `stride`-sized cells that covers the image.
    pub fn for_image(image_size: (usize, usize), stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(FgdError::dim("stride must be positive"));
        }
        LevelGeometry::new(stride, image_size.0.div_ceil(stride), image_size.1.div_ceil(stride))
    }

    /// The grid must cover the image with less than one stride of slack.
    pub fn check_covers(&self, image_size: (usize, usize)) -> Result<()> {
        let ok = |cells: usize, px: usize| cells * self.stride >= px && cells * self.stride < px + self.stride;
        if ok(self.feature_h, image_size.0) && ok(self.feature_w, image_size.1) {
            Ok(())
        } else {
            Err(FgdError::dim(format!("{self:?} does not tile an image of size {image_size:?}")))
        }
    }
}

/// Half-open rectangle of feature cells: rows `r0..r1`, columns `c0..c1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellRect {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl CellRect {
    pub fn rows(&self) -> usize {
        self.r1 - self.r0
    }

    pub fn cols(&self) -> usize {
        self.c1 - self.c0
    }

    pub fn area(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.r0..self.r1).contains(&r) && (self.c0..self.c1).contains(&c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub rects: Vec<CellRect>,
    /// Boxes whose projection was empty.
    pub dropped: usize,
}

/// Maps image boxes onto the feature grid: start cells are `floor(v/stride)`,
/// end cells `ceil(v/stride)`, clamped to the grid.
pub fn project_boxes(boxes: &BoxSet, geom: &LevelGeometry) -> Result<Projection> {
    geom.check_covers(boxes.image_size())?;
    let s = geom.stride as f64;
    let mut rects = Vec::with_capacity(boxes.boxes().len());
    let mut dropped = 0;
    for b in boxes.boxes() {
        let lo = |v: f64, n: usize| ((v / s).floor().max(0.0) as usize).min(n);
        let hi = |v: f64, n: usize| ((v / s).ceil().max(0.0) as usize).min(n);
        let r = CellRect {
            r0: lo(b.y1, geom.feature_h),
            r1: hi(b.y2, geom.feature_h),
            c0: lo(b.x1, geom.feature_w),
            c1: hi(b.x2, geom.feature_w),
        };
        if r.r0 < r.r1 && r.c0 < r.c1 {
            rects.push(r);
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::debug!("{dropped} boxes projected to empty cell ranges at stride {}", geom.stride);
    }
    Ok(Projection { rects, dropped })
}

fn check_rects(rects: &[CellRect], h: usize, w: usize) -> Result<()> {
    match rects.iter().find(|r| r.r0 >= r.r1 || r.c0 >= r.c1 || r.r1 > h || r.c1 > w) {
        Some(r) => Err(FgdError::dim(format!("rect {r:?} outside a {h}x{w} grid"))),
        None => Ok(()),
    }
}

/// `M`: 1 on cells covered by any rect, 0 elsewhere.
pub fn binary_mask(rects: &[CellRect], h: usize, w: usize) -> Result<Tensor> {
    check_rects(rects, h, w)?;
    let mut m = vec![0.0; h * w];
    for r in rects {
        for i in r.r0..r.r1 {
            m[i * w + r.c0..i * w + r.c1].iter_mut().for_each(|v| *v = 1.0);
        }
    }
    Tensor::new(vec![h, w], m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleMask {
    pub values: Tensor,
    /// Number of background cells.
    pub n_bg: usize,
}

impl ScaleMask {
    /// Set when the foreground covers the whole grid; background entries
    /// are then zero.
    pub fn no_background(&self) -> bool {
        self.n_bg == 0
    }
}

/// `S`: `1/(rows·cols)` of the smallest covering rect on foreground cells
/// (lowest index on equal areas), `1/N_bg` on background cells.
pub fn scale_mask(rects: &[CellRect], h: usize, w: usize) -> Result<ScaleMask> {
    check_rects(rects, h, w)?;
    let mut order: Vec<usize> = (0..rects.len()).collect();
    // paint largest first so that smaller rects (and lower indices on ties)
    // overwrite
    order.sort_by(|&a, &b| rects[b].area().cmp(&rects[a].area()).then(b.cmp(&a)));
    let mut s = vec![f64::NAN; h * w];
    for &k in &order {
        let r = rects[k];
        let v = 1.0 / r.area() as f64;
        for i in r.r0..r.r1 {
            s[i * w + r.c0..i * w + r.c1].iter_mut().for_each(|x| *x = v);
        }
    }
    let n_bg = s.iter().filter(|v| v.is_nan()).count();
    let bg = if n_bg == 0 { 0.0 } else { 1.0 / n_bg as f64 };
    s.iter_mut().filter(|v| v.is_nan()).for_each(|v| *v = bg);
    if n_bg == 0 {
        log::debug!("foreground covers the whole {h}x{w} grid; background scale set to 0");
    }
    Ok(ScaleMask { values: Tensor::new(vec![h, w], s)?, n_bg })
}

fn single_image(f: &Tensor) -> Result<(usize, usize, usize)> {
    let s = f.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(FgdError::dim(format!("expected a single-image [1, C, H, W] map, got {s:?}")));
    }
    Ok((s[1], s[2], s[3]))
}

/// `G^S`: mean of `|F|` over channels, per pixel.
pub fn spatial_attention_map(f: &Tensor) -> Result<Tensor> {
    let (c, h, w) = single_image(f)?;
    let p = h * w;
    let mut g = vec![0.0; p];
    for k in 0..c {
        for (acc, v) in g.iter_mut().zip(&f.data()[k * p..(k + 1) * p]) {
            *acc += v.abs();
        }
    }
    g.iter_mut().for_each(|v| *v /= c as f64);
    Tensor::new(vec![h, w], g)
}

/// `G^C`: mean of `|F|` over pixels, per channel.
pub fn channel_attention_map(f: &Tensor) -> Result<Tensor> {
    let (c, h, w) = single_image(f)?;
    let p = h * w;
    let g = (0..c)
        .map(|k| f.data()[k * p..(k + 1) * p].iter().map(|v| v.abs()).sum::<f64>() / p as f64)
        .collect();
    Tensor::new(vec![c], g)
}

/// `A^S = H·W·softmax(G^S/T)` and `A^C = C·softmax(G^C/T)`.
pub fn attention_masks(g_s: &Tensor, g_c: &Tensor, temperature: f64) -> Result<(Tensor, Tensor)> {
    if g_s.rank() != 2 || g_c.rank() != 1 {
        return Err(FgdError::dim("attention maps must be [H, W] and [C]"));
    }
    let hw = g_s.numel();
    let flat = g_s.reshape(&[hw])?;
    let a_s = softmax_values(&flat, 0, temperature)?
        .map(|v| v * hw as f64)
        .reshape(g_s.shape())?;
    let c = g_c.numel() as f64;
    let a_c = softmax_values(g_c, 0, temperature)?.map(|v| v * c);
    Ok((a_s, a_c))
}

/// Differentiable `A^S` (`[H, W]`) and `A^C` (`[C]`) of a `[1, C, H, W]` node.
pub fn attention_masks_var(g: &mut Graph, f: Var, temperature: f64) -> Result<(Var, Var)> {
    let s = g.shape(f).to_vec();
    if s.len() != 4 || s[0] != 1 {
        return Err(FgdError::dim(format!("expected a single-image [1, C, H, W] map, got {s:?}")));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let a = g.abs(f);
    let gs = g.mean(a, &[0, 1])?;
    let gs = g.reshape(gs, &[h * w])?;
    let a_s = g.softmax_t(gs, 0, temperature)?;
    let a_s = g.scale(a_s, (h * w) as f64);
    let a_s = g.reshape(a_s, &[h, w])?;
    let gc = g.mean(a, &[0, 2, 3])?;
    let a_c = g.softmax_t(gc, 0, temperature)?;
    let a_c = g.scale(a_c, c as f64);
    Ok((a_s, a_c))
}

/// Per-image, per-level masks consumed by the feature loss.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub binary: Tensor,
    pub scale: Tensor,
    pub spatial_attn: Tensor,
    pub channel_attn: Tensor,
    pub n_bg: usize,
    pub dropped_boxes: usize,
}

impl MaskSet {
    pub fn height(&self) -> usize {
        self.binary.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.binary.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.channel_attn.numel()
    }
}

/// Teacher masks for one image at one level.
pub fn build_masks(
    f_teacher: &Tensor,
    boxes: &BoxSet,
    geom: &LevelGeometry,
    temperature: f64,
) -> Result<MaskSet> {
    let (_, h, w) = single_image(f_teacher)?;
    if (h, w) != (geom.feature_h, geom.feature_w) {
        return Err(FgdError::dim(format!(
            "feature map is {h}x{w} but the level geometry is {}x{}",
            geom.feature_h, geom.feature_w
        )));
    }
    let proj = project_boxes(boxes, geom)?;
    let binary = binary_mask(&proj.rects, h, w)?;
    let scale = scale_mask(&proj.rects, h, w)?;
    let g_s = spatial_attention_map(f_teacher)?;
    let g_c = channel_attention_map(f_teacher)?;
    let (spatial_attn, channel_attn) = attention_masks(&g_s, &g_c, temperature)?;
    Ok(MaskSet {
        binary,
        scale: scale.values,
        spatial_attn,
        channel_attn,
        n_bg: scale.n_bg,
        dropped_boxes: proj.dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(r0: usize, r1: usize, c0: usize, c1: usize) -> CellRect {
        CellRect { r0, r1, c0, c1 }
    }

    fn fmap(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![1, c, h, w], data).unwrap()
    }

    #[test]
    fn boxes_are_validated_and_clipped() {
        assert!(BoxSet::new(vec![BBox::new(4.0, 0.0, 2.0, 3.0)], (8, 8)).is_err());
        assert!(BoxSet::new(vec![BBox::new(9.0, 9.0, 12.0, 12.0)], (8, 8)).is_err());
        let b = BoxSet::new(vec![BBox::new(-2.0, 1.0, 10.0, 5.0)], (8, 8)).unwrap();
        assert_eq!(b.boxes()[0], BBox::new(0.0, 1.0, 8.0, 5.0));
    }

    #[test]
    fn box_file_round_trip() {
        let text = "# scene\n16 12\n0 0 4 4\n2.5 3 8 9.75\n";
        let b = BoxSet::parse_text(text).unwrap();
        assert_eq!(b.image_size(), (16, 12));
        assert_eq!(b.boxes().len(), 2);
        assert_eq!(BoxSet::parse_text(&b.to_text()).unwrap(), b);
        assert!(BoxSet::parse_text("16\n").is_err());
        assert!(BoxSet::parse_text("16 12\n0 0 4\n").is_err());
    }

    #[test]
    fn projection_examples() {
        let geom = LevelGeometry::for_image((16, 16), 4).unwrap();
        let b = BoxSet::new(vec![BBox::new(0.0, 0.0, 8.0, 8.0)], (16, 16)).unwrap();
        assert_eq!(project_boxes(&b, &geom).unwrap().rects, vec![rect(0, 2, 0, 2)]);

        let full = BoxSet::new(vec![BBox::new(0.0, 0.0, 16.0, 16.0)], (16, 16)).unwrap();
        assert_eq!(project_boxes(&full, &geom).unwrap().rects, vec![rect(0, 4, 0, 4)]);

        let tiny = BoxSet::new(vec![BBox::new(5.0, 9.0, 7.0, 11.5)], (16, 16)).unwrap();
        assert_eq!(project_boxes(&tiny, &geom).unwrap().rects, vec![rect(2, 3, 1, 2)]);
    }

    #[test]
    fn geometry_must_tile_the_image() {
        let g = LevelGeometry::new(4, 3, 4).unwrap();
        assert!(g.check_covers((16, 16)).is_err());
        assert!(g.check_covers((12, 16)).is_ok());
        assert!(g.check_covers((9, 13)).is_ok());
        assert_eq!(LevelGeometry::for_image((9, 13), 4).unwrap(), g);
    }

    #[test]
    fn binary_mask_examples() {
        assert!(binary_mask(&[], 4, 4).unwrap().data().iter().all(|&v| v == 0.0));
        let m = binary_mask(&[rect(1, 3, 1, 3)], 4, 4).unwrap();
        assert_eq!(m.sum(), 4.0);
        assert_eq!(m.data()[5], 1.0);
        let all = binary_mask(&[rect(0, 4, 0, 4)], 4, 4).unwrap();
        assert!(all.data().iter().all(|&v| v == 1.0));
        assert!(binary_mask(&[rect(0, 5, 0, 1)], 4, 4).is_err());
    }

    #[test]
    fn scale_mask_examples() {
        let s = scale_mask(&[rect(0, 2, 0, 2)], 4, 4).unwrap();
        let m = binary_mask(&[rect(0, 2, 0, 2)], 4, 4).unwrap();
        for (sv, mv) in s.values.data().iter().zip(m.data()) {
            let expect = if *mv == 1.0 { 0.25 } else { 1.0 / 12.0 };
            assert_eq!(*sv, expect);
        }
        assert_eq!(s.n_bg, 12);

        // 2x2 nested in 3x3
        let s = scale_mask(&[rect(0, 3, 0, 3), rect(0, 2, 0, 2)], 5, 5).unwrap();
        let d = s.values.data();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i < 2 && j < 2 { 0.25 } else { 1.0 / 9.0 };
                assert_eq!(d[i * 5 + j], expect, "cell ({i},{j})");
            }
        }

        let s = scale_mask(&[], 3, 4).unwrap();
        assert!(s.values.data().iter().all(|&v| v == 1.0 / 12.0));
    }

    #[test]
    fn full_foreground_zeroes_background() {
        let s = scale_mask(&[rect(0, 2, 0, 2)], 2, 2).unwrap();
        assert!(s.no_background());
        assert!(s.values.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn attention_map_examples() {
        let c = fmap(2, 2, 2, vec![-1.5; 8]);
        assert!(spatial_attention_map(&c).unwrap().data().iter().all(|&v| v == 1.5));
        let px = fmap(2, 1, 1, vec![3.0, -1.0]);
        assert_eq!(spatial_attention_map(&px).unwrap().data(), &[2.0]);
        let z = fmap(3, 2, 2, vec![0.0; 12]);
        assert!(spatial_attention_map(&z).unwrap().data().iter().all(|&v| v == 0.0));

        let ch = fmap(2, 2, 2, vec![1.0, -1.0, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(channel_attention_map(&ch).unwrap().data(), &[1.0, 0.0]);
        let cc = fmap(1, 2, 2, vec![-2.0; 4]);
        assert_eq!(channel_attention_map(&cc).unwrap().data(), &[2.0]);

        assert!(spatial_attention_map(&Tensor::zeros(&[2, 1, 2, 2])).is_err());
    }

    #[test]
    fn attention_mask_examples() {
        let (a_s, a_c) =
            attention_masks(&Tensor::full(&[2, 3], 0.7), &Tensor::full(&[4], -1.0), 0.5).unwrap();
        assert!(a_s.data().iter().all(|v| (v - 1.0).abs() < 1e-15));
        assert!(a_c.data().iter().all(|v| (v - 1.0).abs() < 1e-15));

        let gs = Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap();
        let (a_s, _) = attention_masks(&gs, &Tensor::from_slice(&[1.0]), 1.0).unwrap();
        assert!((a_s.data()[0] - 0.5).abs() < 1e-15 && (a_s.data()[1] - 1.5).abs() < 1e-15);

        let gs = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let (a_s, _) = attention_masks(&gs, &Tensor::from_slice(&[1.0]), 0.5).unwrap();
        let e2 = 2f64.exp();
        assert!((a_s.data()[0] - 2.0 / (1.0 + e2)).abs() < 1e-15);
        assert!((a_s.data()[1] - 2.0 * e2 / (1.0 + e2)).abs() < 1e-15);

        assert!(matches!(
            attention_masks(&gs, &Tensor::from_slice(&[1.0]), 0.0),
            Err(FgdError::Parameter(_))
        ));
    }

    #[test]
    fn differentiable_masks_match_values() {
        let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.4).collect();
        let f = fmap(3, 2, 4, data);
        let (a_s, a_c) = attention_masks(
            &spatial_attention_map(&f).unwrap(),
            &channel_attention_map(&f).unwrap(),
            0.5,
        )
        .unwrap();
        let mut g = Graph::new();
        let v = g.constant(f);
        let (vs, vc) = attention_masks_var(&mut g, v, 0.5).unwrap();
        assert!(g.value(vs).max_abs_diff(&a_s) < 1e-14);
        assert_eq!(g.shape(vs), a_s.shape());
        assert!(g.value(vc).max_abs_diff(&a_c) < 1e-14);
    }

    #[test]
    fn build_masks_without_boxes() {
        let f = fmap(2, 2, 2, vec![0.1, 0.2, 0.3, 0.4, 1.0, 0.0, -1.0, 2.0]);
        let geom = LevelGeometry::for_image((4, 4), 2).unwrap();
        let m = build_masks(&f, &BoxSet::empty((4, 4)), &geom, 0.5).unwrap();
        assert!(m.binary.data().iter().all(|&v| v == 0.0));
        assert!(m.scale.data().iter().all(|&v| v == 0.25));
        assert!((m.spatial_attn.sum() - 4.0).abs() < 1e-12);
        assert_eq!(m, build_masks(&f, &BoxSet::empty((4, 4)), &geom, 0.5).unwrap());

        let wrong = LevelGeometry::for_image((8, 8), 2).unwrap();
        assert!(build_masks(&f, &BoxSet::empty((8, 8)), &wrong, 0.5).is_err());
    }
}
