//! Prompt-unified encoding.
//!
//! Every prompt, whatever its kind, becomes one vector `[q_h, q_v, q_b]`:
//! a horizontal profile of length `W`, a vertical profile of length `H`, and a
//! two-element one-hot intent code. Profile entries are quasi-Gaussian
//! responses to a per-position distance, so they lie in `[0, 1]` and vanish
//! once the distance exceeds `sigma`.
//!
//! * Clicks multiply the spatial offset from the click by the luminance
//!   difference to the clicked pixel, read along the click's own row (for
//!   `q_h`) and column (for `q_v`).
//! * Boxes do the same around the box centre, with every position farther
//!   than half the extent from the centre forced to zero.
//! * Scribbles are rasterised, then one point per bounding-box column (row)
//!   is drawn at random; its offset from the bounding box's top row (left
//!   column) is the distance. At most `w0 + h0` points are sampled.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::image::ImagePlane;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Click,
    Box,
    Scribble,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Click => "click",
            PromptKind::Box => "box",
            PromptKind::Scribble => "scribble",
        }
    }
}

/// Where a prompt was drawn, in integer pixel coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Geometry {
    Click { x: usize, y: usize },
    /// Centre plus full extent.
    Box { cx: usize, cy: usize, w: usize, h: usize },
    Scribble { points: Vec<(usize, usize)> },
}

/// A user interaction with its positive (inside the object) or negative intent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub positive: bool,
    pub geometry: Geometry,
}

impl Prompt {
    pub fn click(x: usize, y: usize, positive: bool) -> Self {
        Self { positive, geometry: Geometry::Click { x, y } }
    }

    pub fn bbox(cx: usize, cy: usize, w: usize, h: usize, positive: bool) -> Self {
        Self { positive, geometry: Geometry::Box { cx, cy, w, h } }
    }

    pub fn scribble(points: Vec<(usize, usize)>, positive: bool) -> Self {
        Self { positive, geometry: Geometry::Scribble { points } }
    }

    pub fn kind(&self) -> PromptKind {
        match self.geometry {
            Geometry::Click { .. } => PromptKind::Click,
            Geometry::Box { .. } => PromptKind::Box,
            Geometry::Scribble { .. } => PromptKind::Scribble,
        }
    }

    /// Checks the geometry against an image of the given size.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        match &self.geometry {
            Geometry::Click { x, y } => check_point(*x, *y, width, height),
            Geometry::Box { cx, cy, w, h } => {
                if *w < 1 || *h < 1 {
                    bail!(Validation, "box extent must be at least 1x1, got {w}x{h}");
                }
                check_point(*cx, *cy, width, height)
            }
            Geometry::Scribble { points } => {
                if points.is_empty() {
                    bail!(Validation, "scribble needs at least one point");
                }
                points.iter().try_for_each(|&(x, y)| check_point(x, y, width, height))
            }
        }
    }
}

fn check_point(x: usize, y: usize, width: usize, height: usize) -> Result<()> {
    if x >= width || y >= height {
        bail!(Bounds, "({x}, {y}) outside {width}x{height} image");
    }
    Ok(())
}

/// Rounds a sub-pixel coordinate half-up (`2.5 -> 3`, `-0.5 -> 0`).
pub fn round_half_up(v: f64) -> i64 {
    libm::floor(v + 0.5) as i64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub sigma: f64,
    /// Prompt kinds whose distance includes the luminance factor.
    pub visual_distance_enabled_for: Vec<PromptKind>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { sigma: 3.0, visual_distance_enabled_for: vec![PromptKind::Click, PromptKind::Box] }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            bail!(Config, "sigma must be positive, got {}", self.sigma);
        }
        if self.visual_distance_enabled_for.contains(&PromptKind::Scribble) {
            bail!(Config, "scribble encoding has no visual distance term");
        }
        Ok(())
    }

    fn visual(&self, kind: PromptKind) -> bool {
        self.visual_distance_enabled_for.contains(&kind)
    }
}

/// The unified encoding of one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptVector {
    pub q_h: Vec<f64>,
    pub q_v: Vec<f64>,
    pub q_b: [f64; 2],
    pub sigma: f64,
}

impl PromptVector {
    pub fn len(&self) -> usize {
        self.q_h.len() + self.q_v.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `[q_h, q_v, q_b]` as one row.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.q_h);
        out.extend_from_slice(&self.q_v);
        out.extend_from_slice(&self.q_b);
        out
    }
}

fn intent(positive: bool) -> [f64; 2] {
    if positive {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Horizontal,
    Vertical,
}

/// Product of spatial and luminance distance to `anchor` along one axis.
///
/// Horizontal distances read the anchor's row, vertical ones its column.
pub fn distance_product(image: &ImagePlane, axis: Axis, anchor: (usize, usize)) -> Result<Vec<f64>> {
    let (x0, y0) = anchor;
    check_point(x0, y0, image.width(), image.height())?;
    let p0 = image.luminance(x0, y0);
    Ok(match axis {
        Axis::Horizontal => (0..image.width())
            .map(|x| spatial(x, x0) * (image.luminance(x, y0) - p0).abs())
            .collect(),
        Axis::Vertical => (0..image.height())
            .map(|y| spatial(y, y0) * (image.luminance(x0, y) - p0).abs())
            .collect(),
    })
}

fn spatial(i: usize, anchor: usize) -> f64 {
    (i as f64 - anchor as f64).abs()
}

/// `exp(-d^2 / 2 sigma^2)` for `d <= sigma`, zero beyond (and for infinite `d`).
pub fn quasi_gaussian_scalar(d: f64, sigma: f64) -> f64 {
    if d <= sigma {
        libm::exp(-(d * d) / (2.0 * sigma * sigma))
    } else {
        0.0
    }
}

pub fn quasi_gaussian(d: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        bail!(Config, "sigma must be positive, got {sigma}");
    }
    Ok(d.iter().map(|&v| quasi_gaussian_scalar(v, sigma)).collect())
}

fn centred_profile(
    image: &ImagePlane,
    axis: Axis,
    anchor: (usize, usize),
    visual: bool,
    half_extent: Option<f64>,
    sigma: f64,
) -> Result<Vec<f64>> {
    let (centre, len) = match axis {
        Axis::Horizontal => (anchor.0, image.width()),
        Axis::Vertical => (anchor.1, image.height()),
    };
    let mut d = if visual {
        distance_product(image, axis, anchor)?
    } else {
        check_point(anchor.0, anchor.1, image.width(), image.height())?;
        (0..len).map(|i| spatial(i, centre)).collect()
    };
    if let Some(half) = half_extent {
        for (i, v) in d.iter_mut().enumerate() {
            if spatial(i, centre) > half {
                *v = f64::INFINITY;
            }
        }
    }
    quasi_gaussian(&d, sigma)
}

pub fn encode_click(image: &ImagePlane, click: &Prompt, cfg: &EncoderConfig) -> Result<PromptVector> {
    cfg.validate()?;
    let Geometry::Click { x, y } = click.geometry else {
        bail!(Contract, "encode_click called with a {} prompt", click.kind().as_str());
    };
    click.validate(image.width(), image.height())?;
    let visual = cfg.visual(PromptKind::Click);
    Ok(PromptVector {
        q_h: centred_profile(image, Axis::Horizontal, (x, y), visual, None, cfg.sigma)?,
        q_v: centred_profile(image, Axis::Vertical, (x, y), visual, None, cfg.sigma)?,
        q_b: intent(click.positive),
        sigma: cfg.sigma,
    })
}

pub fn encode_box(image: &ImagePlane, bbox: &Prompt, cfg: &EncoderConfig) -> Result<PromptVector> {
    cfg.validate()?;
    let Geometry::Box { cx, cy, w, h } = bbox.geometry else {
        bail!(Contract, "encode_box called with a {} prompt", bbox.kind().as_str());
    };
    bbox.validate(image.width(), image.height())?;
    let visual = cfg.visual(PromptKind::Box);
    let anchor = (cx, cy);
    Ok(PromptVector {
        q_h: centred_profile(image, Axis::Horizontal, anchor, visual, Some(w as f64 / 2.0), cfg.sigma)?,
        q_v: centred_profile(image, Axis::Vertical, anchor, visual, Some(h as f64 / 2.0), cfg.sigma)?,
        q_b: intent(bbox.positive),
        sigma: cfg.sigma,
    })
}

/// Pixels visited by the polyline through `points` (8-connected, first visit order).
pub fn rasterize_polyline(points: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    let push = |p: (usize, usize), out: &mut Vec<(usize, usize)>| {
        if !out.contains(&p) {
            out.push(p);
        }
    };
    let Some(&first) = points.first() else {
        return out;
    };
    push(first, &mut out);
    for pair in points.windows(2) {
        let (x0, y0) = (pair[0].0 as i64, pair[0].1 as i64);
        let (x1, y1) = (pair[1].0 as i64, pair[1].1 as i64);
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            push((x as usize, y as usize), &mut out);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
    out
}

/// Scribble points retained by the discretisation, plus the bounding box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScribbleSamples {
    /// `(x_min, y_min, x_max, y_max)`, inclusive.
    pub bbox: (usize, usize, usize, usize),
    /// One point per bounding-box column that the scribble crosses.
    pub horizontal: Vec<(usize, usize)>,
    /// One point per bounding-box row that the scribble crosses.
    pub vertical: Vec<(usize, usize)>,
}

impl ScribbleSamples {
    pub fn budget(&self) -> usize {
        let (x0, y0, x1, y1) = self.bbox;
        (x1 - x0 + 1) + (y1 - y0 + 1)
    }

    pub fn count(&self) -> usize {
        self.horizontal.len() + self.vertical.len()
    }
}

/// Draws one aligned scribble pixel per column and per row of the bounding box.
pub fn discretize_scribble(points: &[(usize, usize)], seed: u64) -> Result<ScribbleSamples> {
    if points.is_empty() {
        bail!(Validation, "scribble needs at least one point");
    }
    let path = rasterize_polyline(points);
    let x_min = path.iter().map(|p| p.0).min().unwrap_or(0);
    let x_max = path.iter().map(|p| p.0).max().unwrap_or(0);
    let y_min = path.iter().map(|p| p.1).min().unwrap_or(0);
    let y_max = path.iter().map(|p| p.1).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |candidates: Vec<(usize, usize)>| -> Option<(usize, usize)> {
        if candidates.is_empty() {
            None
        } else {
            Some(candidates[rng.gen_range(0..candidates.len())])
        }
    };
    let horizontal = (x_min..=x_max)
        .filter_map(|x| pick(path.iter().copied().filter(|p| p.0 == x).collect()))
        .collect();
    let vertical = (y_min..=y_max)
        .filter_map(|y| pick(path.iter().copied().filter(|p| p.1 == y).collect()))
        .collect();
    Ok(ScribbleSamples { bbox: (x_min, y_min, x_max, y_max), horizontal, vertical })
}

pub fn encode_scribble(
    image: &ImagePlane,
    scribble: &Prompt,
    cfg: &EncoderConfig,
    rng_seed: u64,
) -> Result<PromptVector> {
    cfg.validate()?;
    let Geometry::Scribble { points } = &scribble.geometry else {
        bail!(Contract, "encode_scribble called with a {} prompt", scribble.kind().as_str());
    };
    scribble.validate(image.width(), image.height())?;
    let samples = discretize_scribble(points, rng_seed)?;
    let (x_ref, y_ref) = (samples.bbox.0, samples.bbox.1);
    let mut q_h = vec![0.0; image.width()];
    for &(x, y) in &samples.horizontal {
        q_h[x] = quasi_gaussian_scalar(spatial(y, y_ref), cfg.sigma);
    }
    let mut q_v = vec![0.0; image.height()];
    for &(x, y) in &samples.vertical {
        q_v[y] = quasi_gaussian_scalar(spatial(x, x_ref), cfg.sigma);
    }
    Ok(PromptVector { q_h, q_v, q_b: intent(scribble.positive), sigma: cfg.sigma })
}

/// Dispatches on the prompt kind. `rng_seed` only matters for scribbles.
pub fn encode_prompt(
    image: &ImagePlane,
    prompt: &Prompt,
    cfg: &EncoderConfig,
    rng_seed: u64,
) -> Result<PromptVector> {
    match prompt.kind() {
        PromptKind::Click => encode_click(image, prompt, cfg),
        PromptKind::Box => encode_box(image, prompt, cfg),
        PromptKind::Scribble => encode_scribble(image, prompt, cfg, rng_seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn row(values: &[f64]) -> ImagePlane {
        ImagePlane::from_gray(values.len(), 1, values).unwrap()
    }

    #[test]
    fn distance_product_matches_hand_evaluation() {
        let img = row(&[0.0, 0.5, 1.0]);
        let d = distance_product(&img, Axis::Horizontal, (0, 0)).unwrap();
        // |i - 0| * |p_i - 0|
        assert_eq!(d, vec![0.0, 0.5, 2.0]);
    }

    #[test]
    fn distance_product_collapses_on_constant_rows() {
        let img = ImagePlane::filled(7, 4, [0.3, 0.3, 0.3]).unwrap();
        for x in 0..7 {
            let d = distance_product(&img, Axis::Horizontal, (x, 2)).unwrap();
            assert!(d.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn distance_product_is_zero_at_anchor() {
        let img = row(&[0.9, 0.1, 0.4, 0.7]);
        for a in 0..4 {
            assert_eq!(distance_product(&img, Axis::Horizontal, (a, 0)).unwrap()[a], 0.0);
        }
        assert!(matches!(
            distance_product(&img, Axis::Horizontal, (4, 0)),
            Err(crate::Error::Bounds(_))
        ));
    }

    #[test]
    fn quasi_gaussian_branches() {
        assert_eq!(quasi_gaussian_scalar(0.0, 3.0), 1.0);
        assert_abs_diff_eq!(quasi_gaussian_scalar(3.0, 3.0), libm::exp(-0.5), epsilon = 1e-15);
        assert_abs_diff_eq!(quasi_gaussian_scalar(3.0, 3.0), 0.60653, epsilon = 1e-5);
        assert_eq!(quasi_gaussian_scalar(3.0 + 1e-9, 3.0), 0.0);
        assert_eq!(quasi_gaussian_scalar(f64::INFINITY, 3.0), 0.0);
        assert!(quasi_gaussian(&[1.0], 0.0).is_err());
        assert!(quasi_gaussian(&[1.0], -1.0).is_err());
    }

    #[test]
    fn click_on_three_pixel_row() {
        let img = row(&[0.0, 0.5, 1.0]);
        let q = encode_click(&img, &Prompt::click(0, 0, true), &EncoderConfig::default()).unwrap();
        // exp(-d^2/18) for d = [0, 0.5, 2]
        let expected = [1.0, 0.986_207_116_743_916_3, 0.800_737_402_916_808_1];
        for (a, b) in q.q_h.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
        }
        assert_eq!(q.q_v, vec![1.0]);
        assert_eq!(q.q_b, [1.0, 0.0]);
        let neg = encode_click(&img, &Prompt::click(0, 0, false), &EncoderConfig::default()).unwrap();
        assert_eq!(neg.q_b, [0.0, 1.0]);
    }

    #[test]
    fn click_on_constant_image_is_all_ones() {
        let img = ImagePlane::filled(9, 5, [0.2, 0.6, 0.1]).unwrap();
        let q = encode_click(&img, &Prompt::click(4, 1, true), &EncoderConfig::default()).unwrap();
        assert!(q.q_h.iter().chain(&q.q_v).all(|&v| v == 1.0));
        assert_eq!(q.len(), 9 + 5 + 2);
    }

    #[test]
    fn click_without_visual_term_is_spatial_gaussian() {
        let img = row(&[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let cfg = EncoderConfig { sigma: 3.0, visual_distance_enabled_for: vec![] };
        let q = encode_click(&img, &Prompt::click(0, 0, true), &cfg).unwrap();
        assert_abs_diff_eq!(q.q_h[2], libm::exp(-4.0 / 18.0), epsilon = 1e-15);
        assert_eq!(q.q_h[4], 0.0);
    }

    #[test]
    fn click_out_of_bounds() {
        let img = row(&[0.0, 0.5]);
        let err = encode_click(&img, &Prompt::click(2, 0, true), &EncoderConfig::default());
        assert!(matches!(err, Err(crate::Error::Bounds(_))));
    }

    #[test]
    fn box_exterior_is_zero() {
        let img = ImagePlane::filled(12, 12, [0.5, 0.5, 0.5]).unwrap();
        let q = encode_box(&img, &Prompt::bbox(5, 6, 4, 2, true), &EncoderConfig::default()).unwrap();
        assert_eq!(q.q_h, vec![0., 0., 0., 1., 1., 1., 1., 1., 0., 0., 0., 0.]);
        assert_eq!(q.q_v, vec![0., 0., 0., 0., 0., 1., 1., 1., 0., 0., 0., 0.]);
    }

    #[test]
    fn box_centre_is_one_regardless_of_content() {
        let gray: Vec<f64> = (0..64).map(|i| (i * 37 % 11) as f64 / 10.0).collect();
        let img = ImagePlane::from_gray(8, 8, &gray).unwrap();
        let q = encode_box(&img, &Prompt::bbox(3, 4, 5, 3, false), &EncoderConfig::default()).unwrap();
        assert_eq!(q.q_h[3], 1.0);
        assert_eq!(q.q_v[4], 1.0);
        assert_eq!(q.q_b, [0.0, 1.0]);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let img = ImagePlane::filled(4, 4, [0.5; 3]).unwrap();
        let err = encode_box(&img, &Prompt::bbox(1, 1, 0, 2, true), &EncoderConfig::default());
        assert!(matches!(err, Err(crate::Error::Validation(_))));
    }

    #[test]
    fn rasterized_polyline_is_connected() {
        let path = rasterize_polyline(&[(0, 0), (5, 2), (5, 6)]);
        assert_eq!(path.first(), Some(&(0, 0)));
        assert_eq!(path.last(), Some(&(5, 6)));
        for w in path.windows(2) {
            let dx = (w[0].0 as i64 - w[1].0 as i64).abs();
            let dy = (w[0].1 as i64 - w[1].1 as i64).abs();
            assert!(dx <= 1 && dy <= 1);
        }
    }

    #[test]
    fn straight_scribble_on_reference_row() {
        let img = ImagePlane::filled(10, 6, [0.5; 3]).unwrap();
        let s = Prompt::scribble(vec![(2, 3), (7, 3)], true);
        let q = encode_scribble(&img, &s, &EncoderConfig::default(), 11).unwrap();
        assert_eq!(q.q_h, vec![0., 0., 1., 1., 1., 1., 1., 1., 0., 0.]);
        assert!(q.q_v.iter().enumerate().all(|(y, &v)| y == 3 || v == 0.0));
    }

    #[test]
    fn single_point_scribble_support() {
        let img = ImagePlane::filled(10, 6, [0.5; 3]).unwrap();
        let q = encode_scribble(&img, &Prompt::scribble(vec![(4, 2)], true), &EncoderConfig::default(), 0)
            .unwrap();
        for (x, &v) in q.q_h.iter().enumerate() {
            assert_eq!(v > 0.0, x == 4);
        }
        for (y, &v) in q.q_v.iter().enumerate() {
            assert_eq!(v > 0.0, y == 2);
        }
    }

    #[test]
    fn empty_scribble_is_rejected() {
        let img = ImagePlane::filled(4, 4, [0.5; 3]).unwrap();
        let err = encode_scribble(&img, &Prompt::scribble(vec![], true), &EncoderConfig::default(), 0);
        assert!(matches!(err, Err(crate::Error::Validation(_))));
    }

    #[test]
    fn dispatch_matches_direct_encoders() {
        let gray: Vec<f64> = (0..30).map(|i| (i % 7) as f64 / 6.0).collect();
        let img = ImagePlane::from_gray(6, 5, &gray).unwrap();
        let cfg = EncoderConfig::default();
        let c = Prompt::click(2, 3, true);
        let b = Prompt::bbox(3, 2, 3, 3, false);
        let s = Prompt::scribble(vec![(0, 0), (5, 4)], true);
        assert_eq!(encode_prompt(&img, &c, &cfg, 1).unwrap(), encode_click(&img, &c, &cfg).unwrap());
        assert_eq!(encode_prompt(&img, &b, &cfg, 1).unwrap(), encode_box(&img, &b, &cfg).unwrap());
        assert_eq!(
            encode_prompt(&img, &s, &cfg, 1).unwrap(),
            encode_scribble(&img, &s, &cfg, 1).unwrap()
        );
        assert!(matches!(encode_click(&img, &b, &cfg), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig { sigma: 0.0, ..Default::default() }.validate().is_err());
        let with_scribble =
            EncoderConfig { sigma: 3.0, visual_distance_enabled_for: vec![PromptKind::Scribble] };
        assert!(with_scribble.validate().is_err());
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(2.49), 2);
        assert_eq!(round_half_up(-0.5), 0);
    }
}
