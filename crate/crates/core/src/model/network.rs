//! Forward pass: backbone, distortion encoder, rectification decoder and
//! flow head.

use super::config::{ModelConfig, QueryMode, UpsampleMode, BACKBONE_STRIDE, PYRAMID_STRIDE, UPSAMPLE_FACTOR};
use super::params::Bound;
use super::ModelError;
use crate::autodiff::nn::{add_norm, feed_forward, multi_head_attention, AttentionParams, FeedForwardParams, NormParams};
use crate::autodiff::{EdgeMode, Graph, Real, Tensor, Var};
use crate::image::ImageRaster;

type Result<T> = std::result::Result<T, ModelError>;

/// Fixed 2-D sinusoidal embedding as an `[h, w, c]` tensor.
///
/// The first `c/2` channels encode the column, the rest the row; inside each
/// half, channel `2i` is `sin(pos·ω_i)` and `2i+1` is `cos(pos·ω_i)` with
/// `ω_i = 10000^(−i/(c/4))`.
pub fn positional_embedding(h: usize, w: usize, c: usize) -> Result<Tensor<f64>> {
    if c == 0 || c % 4 != 0 {
        return Err(ModelError::Config(format!("embedding width {c} must be a positive multiple of 4")));
    }
    let q = c / 4;
    let omega: Vec<f64> = (0..q).map(|i| 10000f64.powf(-(i as f64) / q as f64)).collect();
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for pos in [x as f64, y as f64] {
                for om in &omega {
                    data.push((pos * om).sin());
                    data.push((pos * om).cos());
                }
            }
        }
    }
    Ok(Tensor::new(&[h, w, c], data)?)
}

/// Network input: RGB intensities shifted to `[-0.5, 0.5]`, `[H, W, 3]`.
pub fn image_tensor<T: Real>(img: &ImageRaster) -> Tensor<T> {
    let rgb = img.to_rgb();
    let data = rgb.data().iter().map(|&v| T::from_f64_lossy(v as f64 - 0.5)).collect();
    Tensor::new(&[img.height(), img.width(), 3], data).expect("raster extents")
}

fn conv<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let k = p.var(&format!("{name}.w"));
    let pad = g.shape(k)[0] / 2;
    let y = g.conv2d(x, k, stride, pad)?;
    Ok(g.add_bias(y, p.var(&format!("{name}.b")))?)
}

/// `relu(skip + conv2(relu(conv1(x))))`; the skip is a strided 1×1
/// projection on the first block of a stage.
pub fn residual_block<T: Real>(g: &mut Graph<T>, p: &Bound, base: &str, x: Var, first: bool) -> Result<Var> {
    let stride = if first { 2 } else { 1 };
    let h = conv(g, p, &format!("{base}.conv1"), x, stride)?;
    let h = g.relu(h)?;
    let h = conv(g, p, &format!("{base}.conv2"), h, 1)?;
    let skip = if first { conv(g, p, &format!("{base}.proj"), x, 2)? } else { x };
    let s = g.add(h, skip)?;
    Ok(g.relu(s)?)
}

/// `[H, W, 3]` → `[H/8, W/8, C_b]`.
pub fn backbone_forward<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, p: &Bound, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[2] != 3 || s[0] % BACKBONE_STRIDE != 0 || s[1] % BACKBONE_STRIDE != 0 {
        return Err(ModelError::Config(format!(
            "backbone input {s:?} must be [H, W, 3] with H and W divisible by {BACKBONE_STRIDE}"
        )));
    }
    let mut h = conv(g, p, "backbone.stem", x, 1)?;
    h = g.relu(h)?;
    for stage in 0..cfg.ladder.len() {
        for b in 0..2 {
            h = residual_block(g, p, &format!("backbone.s{stage}.b{b}"), h, b == 0)?;
        }
    }
    conv(g, p, "backbone.out", h, 1)
}

fn attention_params(p: &Bound, base: &str) -> AttentionParams {
    let v = |s: &str| p.var(&format!("{base}.{s}"));
    AttentionParams {
        wq: v("wq"),
        bq: v("bq"),
        wk: v("wk"),
        bk: v("bk"),
        wv: v("wv"),
        bv: v("bv"),
        wo: v("wo"),
        bo: v("bo"),
    }
}

fn norm_params(p: &Bound, base: &str) -> NormParams {
    NormParams {
        gain: p.var(&format!("{base}.gain")),
        bias: p.var(&format!("{base}.bias")),
    }
}

fn ffn_params(p: &Bound, base: &str) -> FeedForwardParams {
    let v = |s: &str| p.var(&format!("{base}.{s}"));
    FeedForwardParams {
        w1: v("w1"),
        b1: v("b1"),
        w2: v("w2"),
        b2: v("b2"),
    }
}

fn add_embedding<T: Real>(g: &mut Graph<T>, tokens: Var, h: usize, w: usize, c: usize) -> Result<Var> {
    let pe = g.constant(positional_embedding(h, w, c)?.cast::<T>().reshaped(&[h * w, c])?);
    Ok(g.add(tokens, pe)?)
}

/// Hierarchical encoder outputs at strides 8, 16 and 32, `[h, w, C_b]` each.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub e2: Var,
    pub e4: Var,
    pub e6: Var,
}

pub fn encoder_forward<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, p: &Bound, ec: Var) -> Result<FeaturePyramid> {
    let c = cfg.c_b;
    let (h8, w8) = cfg.grid(BACKBONE_STRIDE);
    if g.shape(ec) != [h8, w8, c] {
        return Err(ModelError::Config(format!(
            "encoder input {:?} does not match [{h8}, {w8}, {c}]",
            g.shape(ec)
        )));
    }
    let mut map = ec;
    let mut levels = Vec::with_capacity(cfg.encoder_blocks);
    for blk in 0..cfg.encoder_blocks {
        let s = g.shape(map).to_vec();
        let (h, w) = (s[0], s[1]);
        let flat = g.reshape(map, &[h * w, c])?;
        let mut x = add_embedding(g, flat, h, w, c)?;
        for layer in 0..cfg.encoder_layers {
            let base = format!("enc.b{blk}.l{layer}");
            let a = multi_head_attention(g, x, x, x, cfg.heads, &attention_params(p, &format!("{base}.attn")))?;
            x = add_norm(g, a.output, x, &norm_params(p, &format!("{base}.ln1")))?;
            let f = feed_forward(g, x, &ffn_params(p, &format!("{base}.ffn")))?;
            x = add_norm(g, f, x, &norm_params(p, &format!("{base}.ln2")))?;
        }
        let out = g.reshape(x, &[h, w, c])?;
        levels.push(out);
        if blk + 1 < cfg.encoder_blocks {
            map = conv(g, p, &format!("enc.down{blk}"), out, 2)?;
        }
    }
    Ok(FeaturePyramid {
        e2: levels[0],
        e4: levels[1],
        e6: levels[2],
    })
}

/// Decoder queries at `H/32 × W/32`: learned tokens, or the frozen
/// embedding in fixed mode. `[h·w, C_b]`.
pub fn decoder_queries<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, p: &Bound) -> Result<Var> {
    match cfg.query {
        QueryMode::Learned => Ok(p.var("dec.queries")),
        QueryMode::Fixed => {
            let (h, w) = cfg.grid(PYRAMID_STRIDE);
            let pe = positional_embedding(h, w, cfg.c_b)?.cast::<T>().reshaped(&[h * w, cfg.c_b])?;
            Ok(g.constant(pe))
        }
    }
}

#[derive(Debug)]
pub struct Decoded {
    /// `D6`, `[H/8, W/8, C_b]`.
    pub output: Var,
    /// Cross-attention maps of every decoder layer and head, `[Nq, Nk]`.
    pub cross_attention: Vec<Var>,
}

pub fn decoder_forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &Bound,
    pyramid: &FeaturePyramid,
    queries: Var,
) -> Result<Decoded> {
    let c = cfg.c_b;
    let (h32, w32) = cfg.grid(PYRAMID_STRIDE);
    if g.shape(queries) != [h32 * w32, c] {
        return Err(ModelError::Config(format!(
            "queries {:?} do not match [{}, {c}]",
            g.shape(queries),
            h32 * w32
        )));
    }
    let memories = [pyramid.e6, pyramid.e4, pyramid.e2];
    let (mut h, mut w) = (h32, w32);
    let mut x = queries;
    let mut maps = Vec::new();
    for (blk, &mem) in memories.iter().enumerate().take(cfg.decoder_blocks) {
        let ms = g.shape(mem).to_vec();
        if ms[..2] != [h, w] {
            return Err(ModelError::Config(format!(
                "pyramid level {blk} is {ms:?}, decoder tokens are at {h}x{w}"
            )));
        }
        let mem = g.reshape(mem, &[h * w, c])?;
        if blk == 0 || cfg.decoder_pos_per_block {
            x = add_embedding(g, x, h, w, c)?;
        }
        for layer in 0..cfg.decoder_layers {
            let base = format!("dec.b{blk}.l{layer}");
            let a = multi_head_attention(g, x, x, x, cfg.heads, &attention_params(p, &format!("{base}.self")))?;
            x = add_norm(g, a.output, x, &norm_params(p, &format!("{base}.ln1")))?;
            let a = multi_head_attention(g, x, mem, mem, cfg.heads, &attention_params(p, &format!("{base}.cross")))?;
            maps.extend(a.weights);
            x = add_norm(g, a.output, x, &norm_params(p, &format!("{base}.ln2")))?;
            let f = feed_forward(g, x, &ffn_params(p, &format!("{base}.ffn")))?;
            x = add_norm(g, f, x, &norm_params(p, &format!("{base}.ln3")))?;
        }
        if blk + 1 < cfg.decoder_blocks {
            let m = g.reshape(x, &[h, w, c])?;
            let up = g.resize_bilinear(m, 2 * h, 2 * w, EdgeMode::Clamp)?;
            h *= 2;
            w *= 2;
            x = g.reshape(up, &[h * w, c])?;
        }
    }
    let output = g.reshape(x, &[h, w, c])?;
    Ok(Decoded {
        output,
        cross_attention: maps,
    })
}

/// Cell-center coordinates of the coarse grid in full-resolution pixels:
/// `(8j + 3.5, 8i + 3.5)`, `[h, w, 2]`.
pub fn coarse_identity(h: usize, w: usize) -> Tensor<f64> {
    let f = UPSAMPLE_FACTOR as f64;
    let off = (f - 1.0) / 2.0;
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            data.push(f * j as f64 + off);
            data.push(f * i as f64 + off);
        }
    }
    Tensor::new(&[h, w, 2], data).expect("grid extents")
}

#[derive(Debug)]
pub struct HeadOutput {
    /// Full-resolution flow, `[H, W, 2]` with `(u, v)` per pixel.
    pub flow: Var,
    /// Coarse flow `f_m`, `[H/8, W/8, 2]`.
    pub coarse: Var,
    /// Convex weights `[H/8, W/8, 64, 9]` in learned mode.
    pub weights: Option<Var>,
}

/// Coarse flow `f_m = grid + s · conv(relu(conv(D6)))` followed by learned
/// convex or bilinear 8× upsampling.
pub fn flow_head<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, p: &Bound, d6: Var) -> Result<HeadOutput> {
    let s = g.shape(d6).to_vec();
    let (h, w) = (s[0], s[1]);
    let a = conv(g, p, "head.flow1", d6, 1)?;
    let a = g.relu(a)?;
    let a = conv(g, p, "head.flow2", a, 1)?;
    let a = g.scale(a, T::from_f64_lossy(cfg.flow_scale))?;
    let grid = g.constant(coarse_identity(h, w).cast());
    let coarse = g.add(grid, a)?;
    let f = UPSAMPLE_FACTOR;
    match cfg.upsample {
        UpsampleMode::Learned => {
            let m = conv(g, p, "head.mask1", d6, 1)?;
            let m = g.relu(m)?;
            let m = conv(g, p, "head.mask2", m, 1)?;
            let m = g.reshape(m, &[h, w, f * f, 9])?;
            let weights = g.softmax(m, 3)?;
            let flow = g.convex_upsample(coarse, weights, f)?;
            Ok(HeadOutput {
                flow,
                coarse,
                weights: Some(weights),
            })
        }
        UpsampleMode::Bilinear => {
            let flow = g.resize_bilinear(coarse, h * f, w * f, EdgeMode::Extrapolate)?;
            Ok(HeadOutput {
                flow,
                coarse,
                weights: None,
            })
        }
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub flow: Var,
    pub backbone: Var,
    pub pyramid: FeaturePyramid,
    pub decoded: Decoded,
    pub head: HeadOutput,
}

/// Full network on an `[H, W, 3]` input.
pub fn model_forward<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, p: &Bound, image: Var) -> Result<ForwardOutput> {
    if g.shape(image) != [cfg.height, cfg.width, 3] {
        return Err(ModelError::Config(format!(
            "input {:?} does not match the configured {}x{}x3",
            g.shape(image),
            cfg.height,
            cfg.width
        )));
    }
    let backbone = backbone_forward(g, cfg, p, image)?;
    let pyramid = encoder_forward(g, cfg, p, backbone)?;
    let queries = decoder_queries(g, cfg, p)?;
    let decoded = decoder_forward(g, cfg, p, &pyramid, queries)?;
    let head = flow_head(g, cfg, p, decoded.output)?;
    Ok(ForwardOutput {
        flow: head.flow,
        backbone,
        pyramid,
        decoded,
        head,
    })
}
