//! Finite-difference checks of every differentiable primitive and of the
//! whole network.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use unwarp_core::autodiff::nn::{add_norm, feed_forward, linear, multi_head_attention, AttentionParams, FeedForwardParams, NormParams};
use unwarp_core::autodiff::{gradcheck, AutodiffError, EdgeMode, GradCheckConfig, GradCheckReport, Graph, Tensor, Var};
use unwarp_core::model::{image_tensor, model_forward, ModelConfig, ModelError, ParamStore, QueryMode, UpsampleMode};
use unwarp_core::synth::{generate_indexed, CropCategory};

use super::{rng, uniform_tensor, Criterion};

/// Largest relative error tolerated between tape and difference quotient.
pub const MAX_REL_ERROR: f64 = 1e-4;

type Built = Result<Var, AutodiffError>;

/// Contracts a tensor of any shape to a scalar with fixed pseudo-random
/// weights, so every output entry reaches the loss with a distinct factor.
fn reduce(g: &mut Graph<f64>, y: Var, seed: u64) -> Built {
    let shape = g.shape(y).to_vec();
    let w = uniform_tensor(&mut rng(seed ^ 0xD07), &shape, -1.0, 1.0);
    g.dot_const(y, w)
}

pub struct Primitive {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Built>,
}

fn prim(name: &'static str, shapes: &[&[usize]], build: impl Fn(&mut Graph<f64>, &[Var]) -> Built + 'static) -> Primitive {
    Primitive {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

fn attention_params(v: &[Var]) -> AttentionParams {
    AttentionParams {
        wq: v[0],
        bq: v[1],
        wk: v[2],
        bk: v[3],
        wv: v[4],
        bv: v[5],
        wo: v[6],
        bo: v[7],
    }
}

pub fn primitives() -> Vec<Primitive> {
    let att_shapes: Vec<&[usize]> = vec![&[4, 4], &[4], &[4, 4], &[4], &[4, 4], &[4], &[4, 4], &[4]];
    vec![
        prim("add", &[&[3, 4], &[3, 4]], |g, v| {
            let y = g.add(v[0], v[1])?;
            reduce(g, y, 1)
        }),
        prim("sub", &[&[3, 4], &[3, 4]], |g, v| {
            let y = g.sub(v[0], v[1])?;
            reduce(g, y, 2)
        }),
        prim("mul", &[&[3, 4], &[3, 4]], |g, v| {
            let y = g.mul(v[0], v[1])?;
            reduce(g, y, 3)
        }),
        prim("scale", &[&[5]], |g, v| {
            let y = g.scale(v[0], -0.7)?;
            reduce(g, y, 4)
        }),
        prim("add_bias", &[&[3, 4], &[4]], |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            reduce(g, y, 5)
        }),
        prim("add_bias (map)", &[&[2, 3, 4], &[4]], |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            reduce(g, y, 6)
        }),
        prim("matmul", &[&[3, 5], &[5, 4]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            reduce(g, y, 7)
        }),
        prim("transpose", &[&[3, 5]], |g, v| {
            let t = g.transpose(v[0])?;
            let y = g.mul(t, t)?;
            reduce(g, y, 8)
        }),
        prim("reshape", &[&[3, 4]], |g, v| {
            let r = g.reshape(v[0], &[2, 6])?;
            let y = g.mul(r, r)?;
            reduce(g, y, 9)
        }),
        prim("slice_cols", &[&[3, 6]], |g, v| {
            let s = g.slice_cols(v[0], 2, 3)?;
            let y = g.mul(s, s)?;
            reduce(g, y, 10)
        }),
        prim("concat_cols", &[&[3, 2], &[3, 3]], |g, v| {
            let c = g.concat_cols(&[v[0], v[1]])?;
            let y = g.mul(c, c)?;
            reduce(g, y, 11)
        }),
        prim("softmax axis 0", &[&[3, 4]], |g, v| {
            let y = g.softmax(v[0], 0)?;
            reduce(g, y, 12)
        }),
        prim("softmax axis 1", &[&[3, 4]], |g, v| {
            let y = g.softmax(v[0], 1)?;
            reduce(g, y, 13)
        }),
        prim("softmax inner axis", &[&[2, 3, 4]], |g, v| {
            let y = g.softmax(v[0], 1)?;
            reduce(g, y, 14)
        }),
        prim("softmax last axis", &[&[2, 2, 3, 9]], |g, v| {
            let y = g.softmax(v[0], 3)?;
            reduce(g, y, 15)
        }),
        prim("layer_norm", &[&[3, 6], &[6], &[6]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            reduce(g, y, 16)
        }),
        prim("relu", &[&[4, 5]], |g, v| {
            let y = g.relu(v[0])?;
            reduce(g, y, 17)
        }),
        prim("gelu", &[&[4, 5]], |g, v| {
            let y = g.gelu(v[0])?;
            reduce(g, y, 18)
        }),
        prim("conv2d 3x3 stride 1", &[&[5, 6, 3], &[3, 3, 3, 4]], |g, v| {
            let y = g.conv2d(v[0], v[1], 1, 1)?;
            reduce(g, y, 19)
        }),
        prim("conv2d 3x3 stride 2", &[&[7, 6, 2], &[3, 3, 2, 3]], |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 1)?;
            reduce(g, y, 20)
        }),
        prim("conv2d 1x1", &[&[4, 4, 3], &[1, 1, 3, 2]], |g, v| {
            let y = g.conv2d(v[0], v[1], 1, 0)?;
            reduce(g, y, 21)
        }),
        prim("resize_bilinear up (clamp)", &[&[4, 5, 2]], |g, v| {
            let y = g.resize_bilinear(v[0], 7, 9, EdgeMode::Clamp)?;
            reduce(g, y, 22)
        }),
        prim("resize_bilinear up (extrapolate)", &[&[3, 4, 2]], |g, v| {
            let y = g.resize_bilinear(v[0], 12, 16, EdgeMode::Extrapolate)?;
            reduce(g, y, 23)
        }),
        prim("resize_bilinear down", &[&[8, 6, 1]], |g, v| {
            let y = g.resize_bilinear(v[0], 3, 4, EdgeMode::Clamp)?;
            reduce(g, y, 24)
        }),
        prim("convex_upsample", &[&[2, 3, 2], &[2, 3, 4, 9]], |g, v| {
            let y = g.convex_upsample(v[0], v[1], 2)?;
            reduce(g, y, 25)
        }),
        prim("sum", &[&[3, 4]], |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.sum(y)
        }),
        prim("l1_mean", &[&[3, 4]], |g, v| {
            let target = uniform_tensor(&mut rng(26), &[3, 4], -1.0, 1.0);
            g.l1_mean(v[0], target)
        }),
        prim("dot_const", &[&[6]], |g, v| {
            let y = g.mul(v[0], v[0])?;
            reduce(g, y, 27)
        }),
        prim("linear", &[&[3, 4], &[4, 5], &[5]], |g, v| {
            let y = linear(g, v[0], v[1], v[2])?;
            reduce(g, y, 28)
        }),
        prim(
            "multi_head_attention",
            &[&[[3usize, 4].as_slice(), &[5, 4], &[5, 4]], att_shapes.as_slice()].concat(),
            |g, v| {
                let a = multi_head_attention(g, v[0], v[1], v[2], 2, &attention_params(&v[3..]))?;
                reduce(g, a.output, 29)
            },
        ),
        prim("feed_forward", &[&[3, 4], &[4, 6], &[6], &[6, 4], &[4]], |g, v| {
            let p = FeedForwardParams {
                w1: v[1],
                b1: v[2],
                w2: v[3],
                b2: v[4],
            };
            let y = feed_forward(g, v[0], &p)?;
            reduce(g, y, 30)
        }),
        prim("add_norm", &[&[3, 4], &[3, 4], &[4], &[4]], |g, v| {
            let y = add_norm(g, v[0], v[1], &NormParams { gain: v[2], bias: v[3] })?;
            reduce(g, y, 31)
        }),
    ]
}

pub fn check_primitive(p: &Primitive, seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let inputs: Vec<Tensor<f64>> = p.shapes.iter().map(|s| uniform_tensor(&mut r, s, -1.0, 1.0)).collect();
    let cfg = GradCheckConfig {
        seed,
        ..Default::default()
    };
    gradcheck(&inputs, |g, v| (p.build)(g, v), &cfg).unwrap_or_else(|e| panic!("{}: {e}", p.name))
}

/// Small random perturbation of every parameter so that zero-initialised
/// branches carry gradient too.
fn perturbed(cfg: &ModelConfig, seed: u64, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut p = ParamStore::<f64>::init(cfg, seed).unwrap();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.02..0.02);
        }
    }
    p
}

/// Full network against a ground-truth flow, sampling `per_tensor`
/// coordinates of every parameter tensor.
pub fn check_model(cfg: &ModelConfig, per_tensor: usize, seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let params = perturbed(cfg, seed, &mut r);
    let sample = generate_indexed(seed, 0, CropCategory::Partial, (cfg.height, cfg.width)).unwrap();
    let image = image_tensor::<f64>(&sample.record.image);
    let target = unwarp_core::model::flow_tensor::<f64>(&sample.record.flow);
    let gc = GradCheckConfig {
        per_input: Some(per_tensor),
        seed,
        ..Default::default()
    };
    gradcheck(
        params.tensors(),
        |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var, ModelError> {
            let bound = params.bind_existing(vars.to_vec());
            let x = g.constant(image.clone());
            let out = model_forward(g, cfg, &bound, x)?;
            Ok(g.l1_mean(out.flow, target.clone())?)
        },
        &gc,
    )
    .expect("model gradient check")
}

/// Smallest configuration with a full three-level pyramid.
pub fn gradcheck_config(upsample: UpsampleMode, query: QueryMode) -> ModelConfig {
    ModelConfig {
        upsample,
        query,
        ..ModelConfig::tiny()
    }
}

fn describe(r: &GradCheckReport) -> String {
    match r.worst {
        Some((i, j, a, n)) => format!(
            "{} coords, {} kinks skipped, max rel err {:.2e} (input {i}[{j}]: tape {a:.6e} vs fd {n:.6e})",
            r.checked, r.kinks, r.max_rel_error
        ),
        None => format!("{} coords, {} kinks skipped", r.checked, r.kinks),
    }
}

pub fn gradient_suite(model_coords: usize) -> Criterion {
    let mut c = Criterion::new("gradient suite: primitives and full model at 64-bit, max relative error < 1e-4");
    for (k, p) in primitives().iter().enumerate() {
        let r = check_primitive(p, 100 + k as u64);
        c.check(p.name, r.checked > 0 && r.max_rel_error < MAX_REL_ERROR, describe(&r));
    }
    for (up, q, label) in [
        (UpsampleMode::Learned, QueryMode::Learned, "full model (learned upsampling, learned queries)"),
        (UpsampleMode::Bilinear, QueryMode::Fixed, "full model (bilinear upsampling, fixed queries)"),
    ] {
        let cfg = gradcheck_config(up, q);
        let r = check_model(&cfg, model_coords, 7);
        let label = format!("{label}, {}x{} input, C_b={}", cfg.height, cfg.width, cfg.c_b);
        c.check(label, r.checked > 0 && r.max_rel_error < MAX_REL_ERROR, describe(&r));
    }
    c
}
