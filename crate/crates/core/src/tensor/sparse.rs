//! Fixed sparse linear maps over token rows (resampling, pooling).

use alloc::vec::Vec;

use crate::error::{bail, Result};

/// A `rows_out × rows_in` sparse matrix in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap {
    rows_in: usize,
    row_start: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseMap {
    pub fn from_rows(rows_in: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_start = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        row_start.push(0);
        for row in rows {
            for (c, w) in row {
                debug_assert!(c < rows_in);
                cols.push(c);
                weights.push(w);
            }
            row_start.push(cols.len());
        }
        Self { rows_in, row_start, cols, weights }
    }

    pub fn rows_in(&self) -> usize {
        self.rows_in
    }

    pub fn rows_out(&self) -> usize {
        self.row_start.len() - 1
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_start[r]..self.row_start[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.weights[span].iter().copied())
    }

    /// Corner-aligned bilinear upsampling of an `h × w` grid by `factor`.
    pub fn bilinear_upsample(h: usize, w: usize, factor: usize) -> Result<Self> {
        Self::bilinear(h, w, factor, false)
    }

    /// Bilinear upsampling with half-pixel alignment: output centre `o + ½`
    /// samples input position `(o + ½)/factor − ½`, clamped at the borders, so
    /// each input cell stays centred on the block it covers.
    pub fn bilinear_upsample_half_pixel(h: usize, w: usize, factor: usize) -> Result<Self> {
        Self::bilinear(h, w, factor, true)
    }

    fn bilinear(h: usize, w: usize, factor: usize, half_pixel: bool) -> Result<Self> {
        if factor == 0 || h == 0 || w == 0 {
            bail!(Config, "invalid upsample {h}x{w} by {factor}");
        }
        let (oh, ow) = (h * factor, w * factor);
        let axis = |n_in: usize, o: usize| -> (usize, usize, f64) {
            let n_out = n_in * factor;
            let src = if half_pixel {
                ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n_in - 1) as f64)
            } else if n_in == 1 || n_out == 1 {
                0.0
            } else {
                o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            };
            let lo = (libm::floor(src) as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        };
        let mut rows = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            let (y0, y1, fy) = axis(h, oy);
            for ox in 0..ow {
                let (x0, x1, fx) = axis(w, ox);
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
                let mut add = |y: usize, x: usize, wt: f64| {
                    if wt == 0.0 {
                        return;
                    }
                    let idx = y * w + x;
                    match row.iter_mut().find(|e| e.0 == idx) {
                        Some(e) => e.1 += wt,
                        None => row.push((idx, wt)),
                    }
                };
                add(y0, x0, (1.0 - fy) * (1.0 - fx));
                add(y0, x1, (1.0 - fy) * fx);
                add(y1, x0, fy * (1.0 - fx));
                add(y1, x1, fy * fx);
                rows.push(row);
            }
        }
        Ok(Self::from_rows(h * w, rows))
    }

    /// Mean over non-overlapping `factor × factor` blocks of an `h × w` grid.
    pub fn avg_pool(h: usize, w: usize, factor: usize) -> Result<Self> {
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            bail!(Config, "{h}x{w} grid not divisible by pool factor {factor}");
        }
        let (oh, ow) = (h / factor, w / factor);
        let wt = 1.0 / (factor * factor) as f64;
        let mut rows = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut row = Vec::with_capacity(factor * factor);
                for dy in 0..factor {
                    for dx in 0..factor {
                        row.push(((oy * factor + dy) * w + ox * factor + dx, wt));
                    }
                }
                rows.push(row);
            }
        }
        Ok(Self::from_rows(h * w, rows))
    }

    /// `out[r, :] = Σ_k S[r, k] · x[k, :]` for a row-major `rows_in × channels` input.
    pub fn apply(&self, x: &[f64], channels: usize, out: &mut [f64]) {
        for r in 0..self.rows_out() {
            let dst = &mut out[r * channels..(r + 1) * channels];
            dst.iter_mut().for_each(|v| *v = 0.0);
            for (k, w) in self.row(r) {
                let src = &x[k * channels..(k + 1) * channels];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
            }
        }
    }

    /// `grad_x += Sᵀ · grad_out`.
    pub fn apply_transpose_acc(&self, grad_out: &[f64], channels: usize, grad_x: &mut [f64]) {
        for r in 0..self.rows_out() {
            let src = &grad_out[r * channels..(r + 1) * channels];
            for (k, w) in self.row(r) {
                let dst = &mut grad_x[k * channels..(k + 1) * channels];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
            }
        }
    }
}
