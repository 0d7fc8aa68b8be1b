//! Normalised focal loss, DICE loss and the prompt-to-pixel contrastive loss.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::image::BinaryMask;
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.5, gamma: 2.0, lambda: 2.0, eps: 1e-7 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            bail!(Config, "gamma must be non-negative, got {}", self.gamma);
        }
        if !(self.lambda >= 0.0) {
            bail!(Config, "lambda must be non-negative, got {}", self.lambda);
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            bail!(Config, "alpha must lie in (0, 1), got {}", self.alpha);
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            bail!(Config, "eps must lie in (0, 0.5), got {}", self.eps);
        }
        Ok(())
    }
}

fn check_len(g: &Graph, prob: Var, gt: &BinaryMask) -> Result<()> {
    let n = g.value(prob).len();
    if n != gt.data().len() {
        bail!(Shape, "prediction has {n} values, mask has {}", gt.data().len());
    }
    Ok(())
}

/// Probability assigned to the true class, `p` on foreground and `1 − p` on background.
fn p_true(g: &mut Graph, prob: Var, gt: &BinaryMask) -> Result<Var> {
    let sign: Vec<f64> = gt.data().iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
    let signed = g.mul_const(prob, sign)?;
    let shift: Vec<f64> = gt.data().iter().map(|&b| if b { 0.0 } else { 1.0 }).collect();
    let shift = g.constant_from(g.shape(prob).to_vec().as_slice(), shift)?;
    g.add(signed, shift)
}

/// Focal weights `(1 − p_t)^γ` normalised to sum to one, applied to the
/// α-balanced log-likelihood.
pub fn nfl_loss(g: &mut Graph, prob: Var, gt: &BinaryMask, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    check_len(g, prob, gt)?;
    let pt = p_true(g, prob, gt)?;
    let miss = g.scale(pt, -1.0);
    let miss = g.offset(miss, 1.0);
    let beta = g.powf(miss, cfg.gamma);
    let total = g.sum(beta);
    let total = g.offset(total, cfg.eps);
    let inv = g.recip(total);
    let alpha: Vec<f64> = gt.data().iter().map(|&b| if b { cfg.alpha } else { 1.0 - cfg.alpha }).collect();
    let beta = g.mul_const(beta, alpha)?;
    let floored = g.clamp(pt, cfg.eps, 1.0);
    let logp = g.log(floored);
    let weighted = g.mul(beta, logp)?;
    let s = g.sum(weighted);
    let s = g.mul(s, inv)?;
    Ok(g.scale(s, -1.0))
}

/// `1 − (2Σpg + 1) / (Σp + Σg + 1)`.
pub fn dice_loss(g: &mut Graph, prob: Var, gt: &BinaryMask) -> Result<Var> {
    check_len(g, prob, gt)?;
    let gtf = gt.to_f64();
    let gsum: f64 = gtf.iter().sum();
    let inter = g.mul_const(prob, gtf)?;
    let inter = g.sum(inter);
    let num = g.scale(inter, 2.0);
    let num = g.offset(num, 1.0);
    let psum = g.sum(prob);
    let den = g.offset(psum, gsum + 1.0);
    let inv = g.recip(den);
    let ratio = g.mul(num, inv)?;
    let neg = g.scale(ratio, -1.0);
    Ok(g.offset(neg, 1.0))
}

fn check_unit_rows(g: &Graph, x: Var, what: &str) -> Result<()> {
    let shape = g.shape(x);
    if shape.len() != 2 {
        bail!(Shape, "{what} must be a matrix, got {:?}", shape);
    }
    let cols = shape[1];
    for (r, row) in g.value(x).chunks(cols.max(1)).enumerate() {
        let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
        if (norm - 1.0).abs() > 1e-4 {
            bail!(Contract, "{what} row {r} has norm {norm}, expected 1");
        }
    }
    Ok(())
}

/// `ρ = ½(z_q z_vᵀ + 1)`, `[N, L]`.
pub fn p2cl_similarity(g: &mut Graph, z_q: Var, z_v: Var) -> Result<Var> {
    check_unit_rows(g, z_q, "z_q")?;
    check_unit_rows(g, z_v, "z_v")?;
    let dot = g.matmul_nt(z_q, z_v)?;
    let half = g.scale(dot, 0.5);
    Ok(g.offset(half, 0.5))
}

/// Mean over all (prompt, cell) pairs of `−log ρ` for pairs whose cell label
/// matches the prompt intent and `−log(1 − ρ)` otherwise.
pub fn p2cl_loss(g: &mut Graph, rho: Var, intents: &[bool], gt_cells: &BinaryMask, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    if intents.is_empty() {
        bail!(Contract, "contrastive loss needs at least one prompt");
    }
    let l = gt_cells.data().len();
    if g.shape(rho) != [intents.len(), l] {
        bail!(Shape, "similarity {:?} does not match {} prompts × {l} cells", g.shape(rho), intents.len());
    }
    let mut sign = Vec::with_capacity(intents.len() * l);
    let mut shift = Vec::with_capacity(intents.len() * l);
    for &positive in intents {
        for &fg in gt_cells.data() {
            if fg == positive {
                sign.push(1.0);
                shift.push(0.0);
            } else {
                sign.push(-1.0);
                shift.push(1.0);
            }
        }
    }
    let signed = g.mul_const(rho, sign)?;
    let shift = g.constant_from(&[intents.len(), l], shift)?;
    let t = g.add(signed, shift)?;
    let t = g.clamp(t, cfg.eps, 1.0 - cfg.eps);
    let logs = g.log(t);
    let m = g.mean(logs);
    Ok(g.scale(m, -1.0))
}

/// Values of the three components and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nfl: f64,
    pub dice: f64,
    /// Unweighted contrastive term.
    pub p2cl: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `nfl + dice + λ·p2cl`; with `λ = 0` the contrastive term is left out entirely.
    pub fn combine(nfl: f64, dice: f64, p2cl: f64, lambda: f64) -> Self {
        let total = if lambda == 0.0 { nfl + dice } else { nfl + dice + lambda * p2cl };
        Self { nfl, dice, p2cl, total }
    }

    /// `λ·p2cl` as it enters the total.
    pub fn p2cl_contribution(&self, lambda: f64) -> f64 {
        if lambda == 0.0 {
            0.0
        } else {
            lambda * self.p2cl
        }
    }
}

/// Graph handles of the loss components.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub nfl: Var,
    pub dice: Var,
    pub p2cl: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown { nfl: g.scalar(self.nfl), dice: g.scalar(self.dice), p2cl: g.scalar(self.p2cl), total: g.scalar(self.total) }
    }
}

/// `NFL + DICE + λ·P²CL`. `gt` is at full resolution; the contrastive term
/// uses it max-pooled onto the grid of `z_v`.
pub fn total_loss(
    g: &mut Graph,
    prob: Var,
    gt: &BinaryMask,
    z_q: Var,
    z_v: Var,
    intents: &[bool],
    cfg: &LossConfig,
) -> Result<LossVars> {
    let nfl = nfl_loss(g, prob, gt, cfg)?;
    let dice = dice_loss(g, prob, gt)?;
    let cells = g.shape(z_v)[0];
    let side = libm::sqrt(cells as f64) as usize;
    if side * side != cells || side == 0 || gt.width() % side != 0 || gt.width() != gt.height() {
        bail!(Shape, "{cells} pixel embeddings do not tile a {}x{} mask", gt.width(), gt.height());
    }
    let gt_cells = gt.max_pool(gt.width() / side)?;
    let rho = p2cl_similarity(g, z_q, z_v)?;
    let p2cl = p2cl_loss(g, rho, intents, &gt_cells, cfg)?;
    let base = g.add(nfl, dice)?;
    let total = if cfg.lambda == 0.0 {
        base
    } else {
        let weighted = g.scale(p2cl, cfg.lambda);
        g.add(base, weighted)?
    };
    Ok(LossVars { nfl, dice, p2cl, total })
}
