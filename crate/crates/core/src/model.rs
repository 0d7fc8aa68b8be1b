//! The segmentation network.
//!
//! Pipeline: patch embedding (+ previous-mask fusion + positions) → a stack of
//! dual cross-attention blocks with gated merging → a multi-scale decoder with
//! a 1×1 MLP head. All feature maps are token-major `[h·w, D]` matrices.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::image::{ImagePlane, ProbMap};
use crate::pue::PromptVector;
use crate::tensor::{Graph, SparseMap, Tensor, Var};

/// How decoder features are brought to the quarter-resolution grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Upsampler {
    /// Corner-aligned bilinear interpolation.
    #[default]
    Bilinear,
    /// Bilinear interpolation with half-pixel alignment, also used for the
    /// final upsampling of the logits.
    BilinearHalfPixel,
    TransposedConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub dma_layers: usize,
    pub decoder_scales: Vec<usize>,
    pub max_prompts: usize,
    pub ffn_hidden: usize,
    pub learnable_positional: bool,
    pub upsampler: Upsampler,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            patch: 4,
            d_model: 64,
            heads: 2,
            dma_layers: 3,
            decoder_scales: vec![4, 8, 16],
            max_prompts: 24,
            ffn_hidden: 128,
            learnable_positional: false,
            upsampler: Upsampler::Bilinear,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// The smallest configuration used by gradient checks.
    pub fn miniature() -> Self {
        Self {
            input_size: 16,
            patch: 4,
            d_model: 8,
            heads: 2,
            dma_layers: 1,
            decoder_scales: vec![4],
            max_prompts: 8,
            ffn_hidden: 12,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.input_size;
        if s == 0 || self.patch == 0 || s % self.patch != 0 {
            bail!(Config, "input_size {s} must be a positive multiple of patch {}", self.patch);
        }
        if s % 4 != 0 {
            bail!(Config, "input_size {s} must be divisible by 4");
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            bail!(Config, "d_model {} must be divisible by heads {}", self.d_model, self.heads);
        }
        if self.dma_layers == 0 {
            bail!(Config, "at least one attention layer is required");
        }
        if self.decoder_scales.len() != self.dma_layers {
            bail!(
                Config,
                "{} decoder scales for {} attention layers",
                self.decoder_scales.len(),
                self.dma_layers
            );
        }
        for &sc in &self.decoder_scales {
            if sc < 4 || s % sc != 0 || !(sc / 4).is_power_of_two() || sc % 4 != 0 {
                bail!(Config, "decoder scale {sc} must be 4·2^k and divide input_size {s}");
            }
            let ok = (sc >= self.patch && sc % self.patch == 0) || (sc < self.patch && self.patch % sc == 0);
            if !ok {
                bail!(Config, "decoder scale {sc} incompatible with patch {}", self.patch);
            }
        }
        if self.max_prompts == 0 {
            bail!(Config, "max_prompts must be at least 1");
        }
        if self.ffn_hidden == 0 {
            bail!(Config, "ffn_hidden must be at least 1");
        }
        if !(self.ln_eps > 0.0) {
            bail!(Config, "ln_eps must be positive");
        }
        Ok(())
    }

    /// Tokens per side of the patch grid.
    pub fn grid(&self) -> usize {
        self.input_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Length of a flattened prompt vector, `W + H + 2`.
    pub fn prompt_len(&self) -> usize {
        2 * self.input_size + 2
    }

    fn quarter(&self) -> usize {
        self.input_size / 4
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    /// `U(-1/√fan_in, 1/√fan_in)`.
    FanIn(usize),
    Positional,
}

fn attention_names(prefix: &str) -> [String; 8] {
    ["wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"].map(|n| format!("{prefix}.{n}"))
}

/// Name, shape and initialiser of every parameter, in checkpoint order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let f = cfg.ffn_hidden;
    let s = cfg.decoder_scales.len();
    let pin = cfg.patch * cfg.patch * 3;
    let mut out = vec![
        ("patch.w".to_string(), vec![pin, d], Init::FanIn(pin)),
        ("patch.b".to_string(), vec![d], Init::Zeros),
        ("mask.w".to_string(), vec![1, d], Init::FanIn(1)),
    ];
    if cfg.learnable_positional {
        out.push(("pos".to_string(), vec![cfg.tokens(), d], Init::Positional));
    }
    out.push(("prompt.w".to_string(), vec![cfg.prompt_len(), d], Init::FanIn(cfg.prompt_len())));
    out.push(("prompt.b".to_string(), vec![d], Init::Zeros));
    for l in 0..cfg.dma_layers {
        for att in ["sa", "ca_qv", "ca_vq"] {
            let names = attention_names(&format!("dma{l}.{att}"));
            for (i, n) in names.into_iter().enumerate() {
                if i < 4 {
                    out.push((n, vec![d, d], Init::FanIn(d)));
                } else {
                    out.push((n, vec![d], Init::Zeros));
                }
            }
        }
        for side in ["qv", "vq"] {
            out.push((format!("dma{l}.ln_{side}.g"), vec![d], Init::Ones));
            out.push((format!("dma{l}.ln_{side}.b"), vec![d], Init::Zeros));
            out.push((format!("dma{l}.ffn_{side}.w1"), vec![d, f], Init::FanIn(d)));
            out.push((format!("dma{l}.ffn_{side}.b1"), vec![f], Init::Zeros));
            out.push((format!("dma{l}.ffn_{side}.w2"), vec![f, d], Init::FanIn(f)));
            out.push((format!("dma{l}.ffn_{side}.b2"), vec![d], Init::Zeros));
            out.push((format!("dma{l}.iif_{side}.s"), vec![d], Init::Ones));
            out.push((format!("dma{l}.iif_{side}.b"), vec![d], Init::Zeros));
        }
    }
    for (i, &sc) in cfg.decoder_scales.iter().enumerate() {
        out.push((format!("dec{i}.align.w"), vec![d, d], Init::FanIn(d)));
        out.push((format!("dec{i}.align.b"), vec![d], Init::Zeros));
        let up = sc / 4;
        if cfg.upsampler == Upsampler::TransposedConv && up > 1 {
            out.push((format!("dec{i}.up.w"), vec![d, d * up * up], Init::FanIn(d)));
            out.push((format!("dec{i}.up.b"), vec![d], Init::Zeros));
        }
    }
    out.push(("head.w1".to_string(), vec![s * d, d], Init::FanIn(s * d)));
    out.push(("head.b1".to_string(), vec![d], Init::Zeros));
    out.push(("head.w2".to_string(), vec![d, 1], Init::Zeros));
    out.push(("head.b2".to_string(), vec![1], Init::Zeros));
    out.push(("p2cl.w".to_string(), vec![d, s * d], Init::FanIn(d)));
    out.push(("p2cl.b".to_string(), vec![s * d], Init::Zeros));
    out
}

/// Fixed 2-D sinusoidal encodings: the first half of the channels encode the
/// row, the second half the column.
pub fn sinusoidal_positions(grid: usize, d: usize) -> Tensor {
    let half = d / 2;
    Tensor::from_fn(&[grid * grid, d], |i| {
        let (t, c) = (i / d, i % d);
        let (pos, c) = if c < half { (t / grid, c) } else { (t % grid, c - half) };
        let width = if c < half { half } else { d - half };
        let k = (c / 2) as f64;
        let omega = libm::pow(10_000.0, -2.0 * k / width.max(1) as f64);
        let angle = pos as f64 * omega;
        if c % 2 == 0 {
            libm::sin(angle)
        } else {
            libm::cos(angle)
        }
    })
}

/// Rounds to the nearest `f32` so values survive a 4-byte checkpoint exactly.
pub fn to_f32_grid(v: f64) -> f64 {
    v as f32 as f64
}

/// All learnable weights, as an ordered list of named tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    /// Fresh weights; biases, the output layer of the head and layer-norm
    /// offsets start at zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = layout(cfg)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::full(&shape, 1.0),
                    Init::FanIn(n) => {
                        let a = 1.0 / libm::sqrt(n as f64);
                        Tensor::from_fn(&shape, |_| to_f32_grid(rng.gen_range(-a..a)))
                    }
                    Init::Positional => {
                        let p = sinusoidal_positions(cfg.grid(), cfg.d_model);
                        Tensor::from_fn(&shape, |i| to_f32_grid(p.data()[i]))
                    }
                };
                (name, t)
            })
            .collect();
        Ok(Self { entries })
    }

    /// Checks names and shapes against what `cfg` expects.
    pub fn from_entries(entries: Vec<(String, Tensor)>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let expected = layout(cfg);
        if expected.len() != entries.len() {
            bail!(Shape, "expected {} parameter tensors, got {}", expected.len(), entries.len());
        }
        for ((name, shape, _), (got_name, t)) in expected.iter().zip(&entries) {
            if name != got_name || shape.as_slice() != t.shape() {
                bail!(
                    Shape,
                    "parameter {got_name} {:?} does not match expected {name} {:?}",
                    t.shape(),
                    shape
                );
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Puts every tensor on `graph`, as trainable leaves or as constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                let v = if trainable { graph.param(t) } else { graph.constant(t) };
                (n.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Graph handles for a [`ModelParams`], by name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Pairs `names[i]` with `vars[i]`.
    pub fn from_vars(names: &[String], vars: &[Var]) -> Self {
        Self { vars: names.iter().cloned().zip(vars.iter().copied()).collect() }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        match self.vars.get(name) {
            Some(&v) => Ok(v),
            None => bail!(Contract, "no parameter named {name}"),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// `(name, var)` pairs in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, &v)| (n.as_str(), v))
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn ffn(g: &mut Graph, bp: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, x, bp.var(&format!("{prefix}.w1"))?, bp.var(&format!("{prefix}.b1"))?)?;
    let h = g.gelu(h);
    linear(g, h, bp.var(&format!("{prefix}.w2"))?, bp.var(&format!("{prefix}.b2"))?)
}

/// `[n, h·dh]` → `[h, n, dh]`.
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
    let dh = d / heads;
    let index = (0..heads)
        .flat_map(|h| (0..n).flat_map(move |i| (0..dh).map(move |j| i * d + h * dh + j)))
        .collect();
    g.gather(x, index, &[heads, n, dh])
}

/// `[h, n, dh]` → `[n, h·dh]`.
fn merge_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let (heads, n, dh) = (g.shape(x)[0], g.shape(x)[1], g.shape(x)[2]);
    let index = (0..n)
        .flat_map(|i| (0..heads).flat_map(move |h| (0..dh).map(move |j| h * n * dh + i * dh + j)))
        .collect();
    g.gather(x, index, &[n, heads * dh])
}

/// Multi-head attention of `queries` over `context`.
fn attention(
    g: &mut Graph,
    bp: &BoundParams,
    prefix: &str,
    queries: Var,
    context: Var,
    heads: usize,
) -> Result<Var> {
    let [wq, wk, wv, wo, bq, bk, bv, bo] = attention_names(prefix);
    let q = linear(g, queries, bp.var(&wq)?, bp.var(&bq)?)?;
    let k = linear(g, context, bp.var(&wk)?, bp.var(&bk)?)?;
    let v = linear(g, context, bp.var(&wv)?, bp.var(&bv)?)?;
    let dh = g.shape(q)[1] / heads;
    let (qh, kh, vh) = (split_heads(g, q, heads)?, split_heads(g, k, heads)?, split_heads(g, v, heads)?);
    let scores = g.matmul_nt(qh, kh)?;
    let scores = g.scale(scores, 1.0 / libm::sqrt(dh as f64));
    let attn = g.softmax_lastdim(scores)?;
    let mixed = g.matmul(attn, vh)?;
    let merged = merge_heads(g, mixed)?;
    linear(g, merged, bp.var(&wo)?, bp.var(&bo)?)
}

/// Token features of one image: patch embedding, plus the pooled previous
/// mask through a 1×1 projection, plus positional encodings. `[L, D]`.
pub fn image_encode(
    g: &mut Graph,
    bp: &BoundParams,
    image: &ImagePlane,
    prev_mask: &ProbMap,
    cfg: &ModelConfig,
) -> Result<Var> {
    let s = cfg.input_size;
    if image.width() != s || image.height() != s || image.channels() != 3 {
        bail!(
            Shape,
            "model expects a {s}x{s} RGB image, got {}x{}x{}",
            image.width(),
            image.height(),
            image.channels()
        );
    }
    if prev_mask.width() != s || prev_mask.height() != s {
        bail!(Shape, "previous mask must be {s}x{s}, got {}x{}", prev_mask.width(), prev_mask.height());
    }
    let (p, grid) = (cfg.patch, cfg.grid());
    let pin = p * p * 3;
    let mut patches = vec![0.0; grid * grid * pin];
    let mut pooled = vec![0.0; grid * grid];
    let inv = 1.0 / (p * p) as f64;
    for ty in 0..grid {
        for tx in 0..grid {
            let t = ty * grid + tx;
            for dy in 0..p {
                for dx in 0..p {
                    let (x, y) = (tx * p + dx, ty * p + dy);
                    let px = image.pixel(x, y);
                    let base = t * pin + (dy * p + dx) * 3;
                    patches[base..base + 3].copy_from_slice(px);
                    pooled[t] += prev_mask.data()[y * s + x] * inv;
                }
            }
        }
    }
    let patches = g.constant_from(&[grid * grid, pin], patches)?;
    let mut f = linear(g, patches, bp.var("patch.w")?, bp.var("patch.b")?)?;
    if pooled.iter().any(|&v| v != 0.0) {
        let m = g.constant_from(&[grid * grid, 1], pooled)?;
        let fused = g.matmul(m, bp.var("mask.w")?)?;
        f = g.add(f, fused)?;
    }
    let pos = match bp.get("pos") {
        Some(v) => v,
        None => {
            let t = sinusoidal_positions(grid, cfg.d_model);
            g.constant(&t)
        }
    };
    g.add(f, pos)
}

/// Stacks flattened prompt vectors into `[N, W+H+2]`.
pub fn stack_prompts(prompts: &[PromptVector], cfg: &ModelConfig) -> Result<Tensor> {
    let n = prompts.len();
    let len = cfg.prompt_len();
    let mut data = Vec::with_capacity(n * len);
    for q in prompts {
        let flat = q.flatten();
        if flat.len() != len {
            bail!(Shape, "prompt vector of length {} for a model expecting {len}", flat.len());
        }
        data.extend(flat);
    }
    Tensor::new(vec![n, len], data)
}

/// Affine projection of raw prompt vectors `[N, W+H+2]` to `[N, D]`.
pub fn prompt_project(g: &mut Graph, bp: &BoundParams, q_raw: Var, cfg: &ModelConfig) -> Result<Var> {
    let shape = g.shape(q_raw);
    if shape.len() != 2 || shape[1] != cfg.prompt_len() {
        bail!(Shape, "prompt matrix {:?} does not have {} columns", shape, cfg.prompt_len());
    }
    linear(g, q_raw, bp.var("prompt.w")?, bp.var("prompt.b")?)
}

/// Gate values forced in place of the learned ones (test hook).
#[derive(Debug, Clone)]
pub struct ForcedGates {
    pub qv: Vec<f64>,
    pub vq: Vec<f64>,
}

/// `F_dual = f_v ⊙ (1 + g_qv ⊙ f_v + g_vq ⊙ f_v)`, with `g = sigmoid(s ⊙ colmax(F̂) + b)`.
pub fn iif_merge(
    g: &mut Graph,
    bp: &BoundParams,
    layer: usize,
    f_qv_hat: Var,
    f_vq_hat: Var,
    f_v: Var,
    forced: Option<&ForcedGates>,
) -> Result<Var> {
    let d = g.shape(f_v)[1];
    if g.shape(f_qv_hat)[1] != d || g.shape(f_vq_hat)[1] != d {
        bail!(Shape, "gating features must have {d} channels");
    }
    let (g_qv, g_vq) = match forced {
        Some(f) => {
            if f.qv.len() != d || f.vq.len() != d {
                bail!(Shape, "forced gates must have {d} entries");
            }
            (g.constant_from(&[d], f.qv.clone())?, g.constant_from(&[d], f.vq.clone())?)
        }
        None => (
            gate(g, bp, &format!("dma{layer}.iif_qv"), f_qv_hat)?,
            gate(g, bp, &format!("dma{layer}.iif_vq"), f_vq_hat)?,
        ),
    };
    let gates = g.add(g_qv, g_vq)?;
    let inner = g.mul_row(f_v, gates)?;
    let inner = g.offset(inner, 1.0);
    g.mul(f_v, inner)
}

fn gate(g: &mut Graph, bp: &BoundParams, prefix: &str, hat: Var) -> Result<Var> {
    let m = g.col_max(hat)?;
    let m = g.reshape(m, &[g.shape(m)[1]])?;
    let m = g.mul(m, bp.var(&format!("{prefix}.s"))?)?;
    let m = g.add(m, bp.var(&format!("{prefix}.b"))?)?;
    Ok(g.sigmoid(m))
}

/// Closed form of the merge for given gate vectors, outside any graph.
pub fn iif_merge_values(g_qv: &[f64], g_vq: &[f64], f_v: &Tensor) -> Result<Tensor> {
    let d = *f_v.shape().last().unwrap_or(&0);
    if g_qv.len() != d || g_vq.len() != d {
        bail!(Shape, "gate vectors must have {d} entries");
    }
    let data = f_v.data();
    Ok(Tensor::from_fn(f_v.shape(), |i| {
        let c = i % d;
        data[i] * (1.0 + g_qv[c] * data[i] + g_vq[c] * data[i])
    }))
}

/// Outputs of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct DmaOutput {
    pub f_dual: Var,
    pub q_out: Var,
}

/// One dual cross-attention block. `q_in` is `None` for the first layer.
pub fn dma_block(
    g: &mut Graph,
    bp: &BoundParams,
    q_in: Option<Var>,
    q: Var,
    f_v: Var,
    layer: usize,
    cfg: &ModelConfig,
    forced: Option<&ForcedGates>,
) -> Result<DmaOutput> {
    if g.shape(q)[0] == 0 {
        bail!(Contract, "attention block needs at least one prompt");
    }
    let pre = format!("dma{layer}");
    let sa_in = match q_in {
        Some(prev) => g.add(prev, q)?,
        None => q,
    };
    let q_prime = attention(g, bp, &format!("{pre}.sa"), sa_in, sa_in, cfg.heads)?;
    let a_qv = attention(g, bp, &format!("{pre}.ca_qv"), q_prime, f_v, cfg.heads)?;
    let f_qv = g.add(a_qv, q)?;
    let a_vq = attention(g, bp, &format!("{pre}.ca_vq"), f_v, q_prime, cfg.heads)?;
    let f_vq = g.add(a_vq, f_v)?;
    let hat_qv = {
        let n = g.layer_norm(f_qv, bp.var(&format!("{pre}.ln_qv.g"))?, bp.var(&format!("{pre}.ln_qv.b"))?, cfg.ln_eps)?;
        ffn(g, bp, &format!("{pre}.ffn_qv"), n)?
    };
    let hat_vq = {
        let n = g.layer_norm(f_vq, bp.var(&format!("{pre}.ln_vq.g"))?, bp.var(&format!("{pre}.ln_vq.b"))?, cfg.ln_eps)?;
        ffn(g, bp, &format!("{pre}.ffn_vq"), n)?
    };
    let f_dual = iif_merge(g, bp, layer, hat_qv, hat_vq, f_v, forced)?;
    Ok(DmaOutput { f_dual, q_out: q_prime })
}

/// Decoder outputs.
#[derive(Debug, Clone, Copy)]
pub struct Decoded {
    /// Concatenated aligned features on the quarter grid, `[(S/4)², D·scales]`.
    pub fused: Var,
    /// Full-resolution logits, `[S, S]`.
    pub logits: Var,
}

/// Transposed convolution with kernel = stride = `f` on a `[h·w, D]` map.
fn transposed_conv(g: &mut Graph, x: Var, w: Var, b: Var, h: usize, f: usize) -> Result<Var> {
    let d = g.shape(x)[1];
    let y = g.matmul(x, w)?; // [h·w, d·f·f], column = (dy·f + dx)·d + c
    let (oh, ow) = (h * f, h * f);
    let index = (0..oh * ow)
        .flat_map(|o| {
            let (oy, ox) = (o / ow, o % ow);
            let t = (oy / f) * h + ox / f;
            let k = (oy % f) * f + ox % f;
            (0..d).map(move |c| t * d * f * f + k * d + c)
        })
        .collect();
    let y = g.gather(y, index, &[oh * ow, d])?;
    g.add_row(y, b)
}

fn bilinear_map(kind: Upsampler, h: usize, factor: usize) -> Result<SparseMap> {
    match kind {
        Upsampler::BilinearHalfPixel => SparseMap::bilinear_upsample_half_pixel(h, h, factor),
        _ => SparseMap::bilinear_upsample(h, h, factor),
    }
}

/// Upsamples a `[h·w, D]` token map by `factor` (bilinear).
fn upsample_tokens(g: &mut Graph, x: Var, h: usize, factor: usize, kind: Upsampler) -> Result<Var> {
    if factor == 1 {
        return Ok(x);
    }
    let map = Arc::new(bilinear_map(kind, h, factor)?);
    g.resample(x, map)
}

/// Multi-scale decoding of the per-layer merged features into logits.
pub fn multiscale_decode(g: &mut Graph, bp: &BoundParams, duals: &[Var], cfg: &ModelConfig) -> Result<Decoded> {
    if duals.len() != cfg.decoder_scales.len() {
        bail!(Config, "{} merged features for {} decoder scales", duals.len(), cfg.decoder_scales.len());
    }
    let grid = cfg.grid();
    let quarter = cfg.quarter();
    let mut aligned = Vec::with_capacity(duals.len());
    for (i, (&f, &sc)) in duals.iter().zip(&cfg.decoder_scales).enumerate() {
        let side = cfg.input_size / sc;
        let resampled = if sc > cfg.patch {
            let map = Arc::new(SparseMap::avg_pool(grid, grid, sc / cfg.patch)?);
            g.resample(f, map)?
        } else {
            upsample_tokens(g, f, grid, cfg.patch / sc, cfg.upsampler)?
        };
        let a = linear(g, resampled, bp.var(&format!("dec{i}.align.w"))?, bp.var(&format!("dec{i}.align.b"))?)?;
        let up = sc / 4;
        let a = match (cfg.upsampler, up) {
            (_, 1) => a,
            (Upsampler::Bilinear | Upsampler::BilinearHalfPixel, _) => upsample_tokens(g, a, side, up, cfg.upsampler)?,
            (Upsampler::TransposedConv, _) => transposed_conv(
                g,
                a,
                bp.var(&format!("dec{i}.up.w"))?,
                bp.var(&format!("dec{i}.up.b"))?,
                side,
                up,
            )?,
        };
        debug_assert_eq!(g.shape(a)[0], quarter * quarter);
        aligned.push(a);
    }
    let fused = if aligned.len() == 1 { aligned[0] } else { g.concat_cols(&aligned)? };
    let h = linear(g, fused, bp.var("head.w1")?, bp.var("head.b1")?)?;
    let h = g.gelu(h);
    let low = linear(g, h, bp.var("head.w2")?, bp.var("head.b2")?)?;
    let map = Arc::new(bilinear_map(cfg.upsampler, quarter, 4)?);
    let up = g.resample(low, map)?;
    let logits = g.reshape(up, &[cfg.input_size, cfg.input_size])?;
    Ok(Decoded { fused, logits })
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub f_v: Var,
    pub q_raw: Var,
    pub q: Var,
    pub q_prime: Var,
    pub duals: Vec<Var>,
    pub fused: Var,
    pub logits: Var,
    pub prob: Var,
    /// Normalised prompt embeddings `[N, D·scales]`.
    pub z_q: Var,
    /// Normalised pixel embeddings on the quarter grid.
    pub z_v: Var,
}

/// Builds the whole forward pass on `g`.
pub fn forward_graph(
    g: &mut Graph,
    bp: &BoundParams,
    image: &ImagePlane,
    prev_mask: &ProbMap,
    prompts: &[PromptVector],
    cfg: &ModelConfig,
    forced: Option<&ForcedGates>,
) -> Result<ForwardVars> {
    if prompts.is_empty() {
        bail!(Contract, "forward pass needs at least one prompt");
    }
    if prompts.len() > cfg.max_prompts {
        bail!(Contract, "{} prompts exceed capacity {}", prompts.len(), cfg.max_prompts);
    }
    let f_v = image_encode(g, bp, image, prev_mask, cfg)?;
    let q_raw = g.constant(&stack_prompts(prompts, cfg)?);
    let q = prompt_project(g, bp, q_raw, cfg)?;
    let d = cfg.d_model;
    let unit = g.constant(&Tensor::full(&[d], 1.0));
    let zero = g.constant(&Tensor::zeros(&[d]));
    let mut feats = f_v;
    let mut q_in = None;
    let mut duals = Vec::with_capacity(cfg.dma_layers);
    for layer in 0..cfg.dma_layers {
        let input = g.layer_norm(feats, unit, zero, cfg.ln_eps)?;
        let out = dma_block(g, bp, q_in, q, input, layer, cfg, forced)?;
        duals.push(out.f_dual);
        feats = out.f_dual;
        q_in = Some(out.q_out);
    }
    let q_prime = q_in.unwrap_or(q);
    let dec = multiscale_decode(g, bp, &duals, cfg)?;
    let prob = g.sigmoid(dec.logits);
    let zq = linear(g, q_prime, bp.var("p2cl.w")?, bp.var("p2cl.b")?)?;
    let z_q = g.row_normalize(zq);
    let z_v = g.row_normalize(dec.fused);
    Ok(ForwardVars { f_v, q_raw, q, q_prime, duals, fused: dec.fused, logits: dec.logits, prob, z_q, z_v })
}

/// Materialised results of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub f_v: Tensor,
    pub q_raw: Tensor,
    pub q_prime: Tensor,
    pub duals: Vec<Tensor>,
    pub fused: Tensor,
    pub logits: Tensor,
    pub prob: ProbMap,
    pub z_q: Tensor,
    pub z_v: Tensor,
}

/// Inference-only forward pass.
pub fn model_forward(
    image: &ImagePlane,
    prev_mask: &ProbMap,
    prompts: &[PromptVector],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<ForwardState> {
    cfg.validate()?;
    let mut g = Graph::new();
    let bp = params.bind(&mut g, false);
    let v = forward_graph(&mut g, &bp, image, prev_mask, prompts, cfg, None)?;
    let s = cfg.input_size;
    Ok(ForwardState {
        f_v: g.tensor(v.f_v),
        q_raw: g.tensor(v.q_raw),
        q_prime: g.tensor(v.q_prime),
        duals: v.duals.iter().map(|&d| g.tensor(d)).collect(),
        fused: g.tensor(v.fused),
        logits: g.tensor(v.logits),
        prob: ProbMap::new(s, s, g.value(v.prob).to_vec())?,
        z_q: g.tensor(v.z_q),
        z_v: g.tensor(v.z_v),
    })
}
