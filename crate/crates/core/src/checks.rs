//! Named finite-difference checks over every differentiable building block.
//!
//! Instances are small (one image, four channels, 4×4 and 2×2 levels) and
//! seeded. Inputs are drawn with magnitudes in `[0.2, 1]` so `abs` and
//! `relu` are evaluated away from their kinks. Checks whose path crosses a
//! kinked op use the looser tolerance.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FgdError, Result};
use crate::gcblock::{context_pool, relation, transform, GcBlockVars};
use crate::gradcheck::{gradcheck, GradcheckConfig};
use crate::graph::{Graph, OpKind, Reduction, Var};
use crate::losses::{
    attention_loss, baseline_loss, feature_loss, fgd_total, global_loss, AblationMode, AdaptationVars,
    FgdHyperParams, L1Reduction, LevelInput,
};
use crate::masks::{attention_masks_var, build_masks, BBox, BoxSet, LevelGeometry, MaskSet};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
pub const SMOOTH_TOL: f64 = 1e-4;
pub const KINKED_TOL: f64 = 1e-3;
pub const DEFAULT_SEED: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Masks,
    Gcblock,
    Losses,
    All,
}

impl Scope {
    fn includes(self, group: Scope) -> bool {
        self == Scope::All || self == group
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Scope::Ops => "ops",
            Scope::Masks => "masks",
            Scope::Gcblock => "gcblock",
            Scope::Losses => "losses",
            Scope::All => "all",
        }
    }
}

impl FromStr for Scope {
    type Err = FgdError;

    fn from_str(s: &str) -> Result<Self> {
        [Scope::Ops, Scope::Masks, Scope::Gcblock, Scope::Losses, Scope::All]
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| FgdError::param(format!("unknown gradcheck scope {s:?}")))
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

type CheckFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct Check {
    pub name: String,
    pub group: Scope,
    pub smooth: bool,
    pub inputs: Vec<Tensor>,
    f: CheckFn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub rel_tol: f64,
    pub elements: usize,
    pub passed: bool,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<6} {:<34} max_rel_err={:.3e} tol={:.0e} elements={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.rel_tol,
            self.elements
        )
    }
}

fn signed(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 0.2, 1.0, rng)
}

/// `Σ r ⊙ out` with fixed random `r`, reducing any output to a scalar.
fn contract(g: &mut Graph, out: Var, r: &Tensor) -> Result<Var> {
    let r = g.constant(r.clone());
    let p = g.mul(out, r)?;
    Ok(g.sum_all(p))
}

fn gc_vars(xs: &[Var]) -> GcBlockVars {
    GcBlockVars { w_k: xs[0], w_v1: xs[1], w_v2: xs[2], ln_gamma: xs[3], ln_beta: xs[4] }
}

/// GcBlock parameters for 4 channels with a middle width of 2.
fn gc_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![
        signed(&[1, 4], rng),
        signed(&[2, 4], rng),
        signed(&[4, 2], rng),
        positive(&[2], rng),
        signed(&[2], rng),
    ]
}

struct Builder {
    checks: Vec<Check>,
}

impl Builder {
    fn add(
        &mut self,
        name: &str,
        group: Scope,
        smooth: bool,
        inputs: Vec<Tensor>,
        f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
    ) {
        self.checks.push(Check { name: format!("{}/{name}", group.as_str()), group, smooth, inputs, f: Box::new(f) });
    }
}

const IMAGE: (usize, usize) = (8, 8);

fn scene_boxes() -> BoxSet {
    BoxSet::new(vec![BBox::new(0.0, 0.0, 4.0, 4.0), BBox::new(2.0, 2.0, 8.0, 6.0)], IMAGE).expect("valid boxes")
}

fn level_masks(teacher: &Tensor, stride: usize) -> MaskSet {
    let geom = LevelGeometry::for_image(IMAGE, stride).expect("valid geometry");
    build_masks(teacher, &scene_boxes(), &geom, 0.5).expect("valid masks")
}

/// Every check, in a fixed order, on instances drawn from `seed`.
pub fn suite(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder { checks: Vec::new() };
    let rng = &mut rng;
    use Scope::*;

    let (x, y) = (signed(&[2, 3, 2], rng), signed(&[2, 3, 2], rng));
    let r = signed(&[2, 3, 2], rng);
    for (name, kind) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let r = r.clone();
        b.add(name, Ops, true, vec![x.clone(), y.clone()], move |g, xs| {
            let o = match kind {
                0 => g.add(xs[0], xs[1])?,
                1 => g.sub(xs[0], xs[1])?,
                _ => g.mul(xs[0], xs[1])?,
            };
            contract(g, o, &r)
        });
    }
    let yb = signed(&[3, 1], rng);
    let rr = r.clone();
    b.add("broadcast_mul", Ops, true, vec![x.clone(), yb], move |g, xs| {
        let yb = g.broadcast_to(xs[1], &[2, 3, 2])?;
        let o = g.mul(xs[0], yb)?;
        contract(g, o, &rr)
    });
    for (name, kind, smooth) in [("square", 0, true), ("abs", 1, false), ("relu", 2, false), ("scalar_affine", 3, true)] {
        let r = r.clone();
        b.add(name, Ops, smooth, vec![x.clone()], move |g, xs| {
            let o = match kind {
                0 => g.square(xs[0]),
                1 => g.abs(xs[0]),
                2 => g.relu(xs[0]),
                _ => {
                    let s = g.scale(xs[0], -1.5);
                    g.add_scalar(s, 0.25)
                }
            };
            contract(g, o, &r)
        });
    }
    for (name, red) in [("sum_axes", Reduction::Sum), ("mean_axes", Reduction::Mean)] {
        let r = signed(&[3], rng);
        b.add(name, Ops, true, vec![x.clone()], move |g, xs| {
            let o = g.reduce(red, xs[0], &[0, 2])?;
            contract(g, o, &r)
        });
    }
    for axis in 0..3 {
        let r = signed(&[2, 3, 2], rng);
        b.add(&format!("softmax_axis{axis}"), Ops, true, vec![x.clone()], move |g, xs| {
            let o = g.softmax_t(xs[0], axis, 0.5)?;
            contract(g, o, &r)
        });
    }
    let (fx, w, bias) = (signed(&[2, 3, 2, 2], rng), signed(&[4, 3], rng), signed(&[4], rng));
    let r = signed(&[2, 4, 2, 2], rng);
    b.add("conv1x1", Ops, true, vec![fx.clone(), w, bias], move |g, xs| {
        let o = g.conv1x1(xs[0], xs[1], Some(xs[2]))?;
        contract(g, o, &r)
    });
    let r = signed(&[2, 3, 2, 2], rng);
    let (gamma, beta) = (positive(&[2, 2], rng), signed(&[2, 2], rng));
    b.add("layer_norm", Ops, true, vec![fx.clone(), gamma, beta], move |g, xs| {
        let o = g.layer_norm(xs[0], xs[1], xs[2], &[2, 3])?;
        contract(g, o, &r)
    });
    let (ma, mb, r) = (signed(&[3, 4], rng), signed(&[4, 2], rng), signed(&[3, 2], rng));
    b.add("matmul", Ops, true, vec![ma, mb], move |g, xs| {
        let o = g.matmul(xs[0], xs[1])?;
        contract(g, o, &r)
    });
    let r = signed(&[2, 3, 1, 1], rng);
    b.add("avg_pool2", Ops, true, vec![fx.clone()], move |g, xs| {
        let o = g.avg_pool2(xs[0])?;
        contract(g, o, &r)
    });
    let r = signed(&[3, 3, 2, 2], rng);
    b.add("select_concat_batch", Ops, true, vec![fx.clone()], move |g, xs| {
        let a = g.select_batch(xs[0], 1)?;
        let c = g.concat_batch(&[a, xs[0]])?;
        contract(g, c, &r)
    });
    let (ya, wts) = (signed(&[2, 3, 2, 2], rng), positive(&[2, 3, 2, 2], rng));
    b.add("weighted_sq_err", Ops, true, vec![fx.clone(), ya], move |g, xs| g.weighted_sq_err(xs[0], xs[1], &wts));

    // masks: student attention masks as functions of the features
    let f = signed(&[1, 4, 4, 4], rng);
    let (rs, rc) = (signed(&[4, 4], rng), signed(&[4], rng));
    b.add("spatial_attention", Masks, false, vec![f.clone()], move |g, xs| {
        let (s, _) = attention_masks_var(g, xs[0], 0.5)?;
        contract(g, s, &rs)
    });
    b.add("channel_attention", Masks, false, vec![f.clone()], move |g, xs| {
        let (_, c) = attention_masks_var(g, xs[0], 0.5)?;
        contract(g, c, &rc)
    });

    // gcblock
    let gc = gc_inputs(rng);
    let r = signed(&[4], rng);
    let rr = r.clone();
    b.add("context_pool", Gcblock, true, vec![f.clone(), gc[0].clone()], move |g, xs| {
        let c = context_pool(g, xs[0], xs[1])?;
        contract(g, c, &rr)
    });
    let mut inputs = gc.clone();
    inputs.push(signed(&[4], rng));
    let rr = r.clone();
    b.add("transform", Gcblock, false, inputs, move |g, xs| {
        let t = transform(g, xs[5], &gc_vars(xs))?;
        contract(g, t, &rr)
    });
    let mut inputs = gc.clone();
    inputs.push(signed(&[2, 4, 2, 2], rng));
    let r = signed(&[2, 4, 2, 2], rng);
    b.add("relation", Gcblock, false, inputs, move |g, xs| {
        let o = relation(g, xs[5], &gc_vars(xs))?;
        contract(g, o, &r)
    });

    // losses on a two-level instance: 4×4 at stride 2, 2×2 at stride 4
    let t0 = signed(&[1, 4, 4, 4], rng);
    let t1 = signed(&[1, 4, 2, 2], rng);
    let s0 = signed(&[1, 4, 4, 4], rng);
    let s1 = signed(&[1, 4, 2, 2], rng);
    let (aw, ab) = (signed(&[4, 4], rng), signed(&[4], rng));
    let masks0 = level_masks(&t0, 2);

    let tt = t0.clone();
    b.add("baseline_loss", Losses, true, vec![s0.clone()], move |g, xs| {
        let t = g.constant(tt.clone());
        baseline_loss(g, t, xs[0])
    });
    let (tt, m) = (t0.clone(), masks0.clone());
    b.add("feature_loss", Losses, true, vec![s0.clone(), aw.clone(), ab.clone()], move |g, xs| {
        let adapted = AdaptationVars { weight: xs[1], bias: xs[2] }.apply(g, xs[0])?;
        let t = g.constant(tt.clone());
        let (fg, bg) = feature_loss(g, t, adapted, &m, 2.0, 0.5)?;
        g.add(fg, bg)
    });
    let m = masks0.clone();
    b.add("attention_loss", Losses, false, vec![s0.clone(), aw.clone(), ab.clone()], move |g, xs| {
        let adapted = AdaptationVars { weight: xs[1], bias: xs[2] }.apply(g, xs[0])?;
        let (ss, sc) = attention_masks_var(g, adapted, 0.5)?;
        attention_loss(g, &m, ss, sc, 1.5, L1Reduction::Mean)
    });
    let mut inputs = gc.clone();
    inputs.push(s0.clone());
    let tt = t0.clone();
    b.add("global_loss", Losses, false, inputs, move |g, xs| {
        let t = g.constant(tt.clone());
        global_loss(g, t, xs[5], &gc_vars(xs), 0.7)
    });

    let gc1 = gc_inputs(rng);
    let narrow0 = signed(&[1, 2, 4, 4], rng);
    let narrow1 = signed(&[1, 2, 2, 2], rng);
    let (nw0, nb0, nw1, nb1) = (signed(&[4, 2], rng), signed(&[4], rng), signed(&[4, 2], rng), signed(&[4], rng));
    for (name, students, adapters) in [
        ("fgd_total", [s0.clone(), s1.clone()], [aw.clone(), ab.clone(), signed(&[4, 4], rng), signed(&[4], rng)]),
        ("fgd_total_narrow_student", [narrow0, narrow1], [nw0, nb0, nw1, nb1]),
    ] {
        let mut inputs: Vec<Tensor> = students.to_vec();
        inputs.extend(adapters);
        inputs.extend(gc.iter().cloned());
        inputs.extend(gc1.iter().cloned());
        let teachers = [t0.clone(), t1.clone()];
        b.add(name, Losses, false, inputs, move |g, xs| {
            let boxes = [scene_boxes()];
            let levels = [
                LevelInput { teacher: &teachers[0], student: xs[0], boxes: &boxes, geom: LevelGeometry::for_image(IMAGE, 2)? },
                LevelInput { teacher: &teachers[1], student: xs[1], boxes: &boxes, geom: LevelGeometry::for_image(IMAGE, 4)? },
            ];
            let adapters =
                [AdaptationVars { weight: xs[2], bias: xs[3] }, AdaptationVars { weight: xs[4], bias: xs[5] }];
            let gcs = [gc_vars(&xs[6..11]), gc_vars(&xs[11..16])];
            let hp = FgdHyperParams::new(1.0, 0.5, 0.8, 0.3, 0.5)?;
            let task = g.constant(Tensor::scalar(0.0));
            let terms = fgd_total(g, &levels, &hp, AblationMode::Full, &adapters, &gcs, task, L1Reduction::Mean)?;
            Ok(terms.total)
        });
    }

    b.checks
}

/// Runs every check in `scope`. `fault`, when set, corrupts the backward
/// rule of one op kind on the analytic side (negative control).
pub fn run_checks(scope: Scope, seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckOutcome>> {
    suite(seed)
        .into_iter()
        .filter(|c| scope.includes(c.group))
        .map(|c| {
            let tol = if c.smooth { SMOOTH_TOL } else { KINKED_TOL };
            let f = &c.f;
            let report = gradcheck(
                |g, xs| {
                    g.inject_backward_fault(fault);
                    f(g, xs)
                },
                &c.inputs,
                GradcheckConfig::new(STEP, tol),
            )?;
            Ok(CheckOutcome {
                name: c.name,
                max_rel_error: report.max_rel_error,
                rel_tol: tol,
                elements: report.elements_checked,
                passed: report.passed,
            })
        })
        .collect()
}
