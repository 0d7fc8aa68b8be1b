//! Simulated users and the interactive evaluation protocol.
//!
//! A session starts from an empty prediction. Each step the simulated user
//! looks at the largest false-positive / false-negative component of the
//! current prediction and answers with a click (or, in mixed mode, a box or a
//! scribble) on it. Sessions stop when the highest IoU target is met or after
//! `max_interactions` steps.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::image::{BinaryMask, ImagePlane, ProbMap};
use crate::pue::{Prompt, PromptKind};

/// `|A ∩ B| / |A ∪ B|`, and 1 when both are empty.
pub fn compute_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if !pred.same_shape(gt) {
        bail!(Shape, "masks {}x{} and {}x{} differ", pred.width(), pred.height(), gt.width(), gt.height());
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// A 4-connected piece of the false-positive or false-negative map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// True when the pixels are missed foreground (FN), false for FP.
    pub false_negative: bool,
    /// Pixels in discovery order; the first one is the row-major minimum.
    pub pixels: Vec<(usize, usize)>,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// Inclusive `(x_min, y_min, x_max, y_max)`.
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        let mut b = (usize::MAX, usize::MAX, 0, 0);
        for &(x, y) in &self.pixels {
            b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
        }
        b
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorRegions {
    pub fp: BinaryMask,
    pub fn_: BinaryMask,
    /// Sorted by descending area; equal areas keep row-major discovery order.
    pub components: Vec<Component>,
}

impl ErrorRegions {
    fn largest(&self) -> Result<&Component> {
        self.components.first().ok_or(Error::ProtocolComplete)
    }
}

fn label_components(mask: &BinaryMask, false_negative: bool, out: &mut Vec<Component>) {
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w * h];
    for start in 0..w * h {
        if !mask.data()[start] || seen[start] {
            continue;
        }
        let mut pixels = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            pixels.push((x, y));
            let mut visit = |j: usize| {
                if mask.data()[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        out.push(Component { false_negative, pixels });
    }
}

/// FP / FN maps of `pred` against `gt` and their 4-connected components.
pub fn error_regions(pred: &BinaryMask, gt: &BinaryMask) -> Result<ErrorRegions> {
    if !pred.same_shape(gt) {
        bail!(Shape, "prediction and ground truth differ in size");
    }
    let (w, h) = (gt.width(), gt.height());
    let fp = BinaryMask::from_fn(w, h, |x, y| pred.get(x, y) && !gt.get(x, y));
    let fn_ = BinaryMask::from_fn(w, h, |x, y| !pred.get(x, y) && gt.get(x, y));
    let mut components = Vec::new();
    label_components(&fp, false, &mut components);
    label_components(&fn_, true, &mut components);
    // discovery order across both maps is row-major by first pixel
    components.sort_by_key(|c| {
        let (x, y) = c.pixels[0];
        y * w + x
    });
    components.sort_by(|a, b| b.area().cmp(&a.area()));
    Ok(ErrorRegions { fp, fn_, components })
}

/// 4-connected (L1) distance from each component pixel to the nearest pixel
/// outside it; pixels beyond the image border count as outside.
fn inner_distance(c: &Component) -> BTreeMap<(usize, usize), usize> {
    let members: alloc::collections::BTreeSet<(usize, usize)> = c.pixels.iter().copied().collect();
    let mut dist: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut queue = VecDeque::new();
    for &(x, y) in &c.pixels {
        let on_edge = x == 0
            || y == 0
            || !members.contains(&(x - 1, y))
            || !members.contains(&(x + 1, y))
            || !members.contains(&(x, y - 1))
            || !members.contains(&(x, y + 1));
        if on_edge {
            dist.insert((x, y), 1);
            queue.push_back((x, y));
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        let d = dist[&(x, y)];
        let mut nbrs = vec![(x + 1, y), (x, y + 1)];
        if x > 0 {
            nbrs.push((x - 1, y));
        }
        if y > 0 {
            nbrs.push((x, y - 1));
        }
        for n in nbrs {
            if members.contains(&n) && !dist.contains_key(&n) {
                dist.insert(n, d + 1);
                queue.push_back(n);
            }
        }
    }
    dist
}

/// Row-major first pixel of `c` maximising the distance to its boundary.
fn deepest_point(c: &Component) -> (usize, usize) {
    let dist = inner_distance(c);
    let mut best = c.pixels[0];
    let mut best_d = 0;
    let mut ordered: Vec<(usize, usize)> = c.pixels.clone();
    ordered.sort_by_key(|&(x, y)| (y, x));
    for p in ordered {
        let d = dist[&p];
        if d > best_d {
            best_d = d;
            best = p;
        }
    }
    best
}

/// Click at the deepest point of the largest error component; positive for FN.
pub fn next_click(err: &ErrorRegions) -> Result<Prompt> {
    let c = err.largest()?;
    let (x, y) = deepest_point(c);
    Ok(Prompt::click(x, y, c.false_negative))
}

/// Tight box around the largest error component. The centre is the midpoint
/// rounded half up, `(min + max + 1) / 2`; the extent is `max − min + 1`.
pub fn next_box(err: &ErrorRegions) -> Result<Prompt> {
    let c = err.largest()?;
    let (x0, y0, x1, y1) = c.bbox();
    Ok(Prompt::bbox((x0 + x1 + 1) / 2, (y0 + y1 + 1) / 2, x1 - x0 + 1, y1 - y0 + 1, c.false_negative))
}

/// A connected path through the largest error component along its principal
/// axis, from one interior extreme to the other.
pub fn next_scribble(err: &ErrorRegions, seed: u64) -> Result<Prompt> {
    let c = err.largest()?;
    let positive = c.false_negative;
    if c.area() == 1 {
        return Ok(Prompt::scribble(vec![c.pixels[0]], positive));
    }
    let n = c.area() as f64;
    let (mx, my) = c.pixels.iter().fold((0.0, 0.0), |a, &(x, y)| (a.0 + x as f64 / n, a.1 + y as f64 / n));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in &c.pixels {
        let (dx, dy) = (x as f64 - mx, y as f64 - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let theta = 0.5 * libm::atan2(2.0 * sxy, sxx - syy);
    let (ax, ay) = (libm::cos(theta), libm::sin(theta));
    let proj = |p: (usize, usize)| (p.0 as f64 - mx) * ax + (p.1 as f64 - my) * ay;
    let perp = |p: (usize, usize)| (-(p.0 as f64 - mx) * ay + (p.1 as f64 - my) * ax).abs();

    let dist = inner_distance(c);
    let deepest = dist.values().copied().max().unwrap_or(1);
    let depth_floor = deepest.min(2);
    let mut interior: Vec<(usize, usize)> = c.pixels.iter().copied().filter(|p| dist[p] >= depth_floor).collect();
    interior.sort_by_key(|&(x, y)| (y, x));
    let mut start = interior[0];
    let mut end = interior[0];
    for &p in &interior {
        if proj(p) < proj(start) {
            start = p;
        }
        if proj(p) > proj(end) {
            end = p;
        }
    }

    // breadth-first distance to `end` inside the component
    let members: alloc::collections::BTreeSet<(usize, usize)> = c.pixels.iter().copied().collect();
    let neighbours = |(x, y): (usize, usize)| {
        let mut v = vec![(x + 1, y), (x, y + 1)];
        if x > 0 {
            v.push((x - 1, y));
        }
        if y > 0 {
            v.push((x, y - 1));
        }
        v.into_iter().filter(|p| members.contains(p)).collect::<Vec<_>>()
    };
    let mut to_end: BTreeMap<(usize, usize), usize> = BTreeMap::from([(end, 0)]);
    let mut queue = VecDeque::from([end]);
    while let Some(p) = queue.pop_front() {
        let d = to_end[&p];
        for q in neighbours(p) {
            if !to_end.contains_key(&q) {
                to_end.insert(q, d + 1);
                queue.push_back(q);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut path = vec![start];
    let mut cur = start;
    while cur != end {
        let d = to_end[&cur];
        let mut steps: Vec<(usize, usize)> = neighbours(cur).into_iter().filter(|q| to_end[q] + 1 == d).collect();
        steps.sort_by(|a, b| perp(*a).total_cmp(&perp(*b)).then((a.1, a.0).cmp(&(b.1, b.0))));
        let best = perp(steps[0]);
        let tied: Vec<(usize, usize)> = steps.into_iter().filter(|q| perp(*q) - best < 1e-9).collect();
        cur = tied[rng.gen_range(0..tied.len())];
        path.push(cur);
    }

    let (bx0, by0, bx1, by1) = path.iter().fold((usize::MAX, usize::MAX, 0, 0), |b, &(x, y)| {
        (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y))
    });
    let budget = (bx1 - bx0 + 1) + (by1 - by0 + 1);
    if path.len() > budget {
        let last = *path.last().unwrap_or(&start);
        let stride = path.len().div_ceil(budget - 1);
        let mut thinned: Vec<(usize, usize)> = path.iter().copied().step_by(stride).collect();
        if thinned.last() != Some(&last) {
            thinned.push(last);
        }
        path = thinned;
    }
    Ok(Prompt::scribble(path, positive))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    #[default]
    ClickOnly,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub theta: f64,
    pub min_improvement: f64,
    pub max_interactions: usize,
    pub targets: Vec<f64>,
    pub mode: ProtocolMode,
    pub rng_seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            theta: 0.85,
            min_improvement: 0.05,
            max_interactions: 20,
            targets: vec![0.85, 0.90],
            mode: ProtocolMode::ClickOnly,
            rng_seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            bail!(Config, "theta must lie in (0, 1), got {}", self.theta);
        }
        if self.max_interactions == 0 {
            bail!(Config, "max_interactions must be at least 1");
        }
        if self.targets.is_empty() || self.targets.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            bail!(Config, "targets must be non-empty and lie in (0, 1]");
        }
        Ok(())
    }

    fn stop_target(&self) -> f64 {
        self.targets.iter().copied().fold(0.0, f64::max)
    }
}

/// Switch away from clicks when the last IoU is below `theta` or improved by
/// less than `min_improvement` over the step before.
pub fn should_switch(history: &[f64], cfg: &ProtocolConfig) -> bool {
    match history {
        [] => false,
        [.., last] if *last < cfg.theta => true,
        [.., prev, last] => last - prev < cfg.min_improvement,
        _ => false,
    }
}

/// Key used for a target in reports, e.g. `"0.85"`.
pub fn target_key(t: f64) -> String {
    format!("{t:.2}")
}

/// Something that turns an image, the previous probability map and the
/// prompts so far into a new probability map.
pub trait Segmenter {
    /// `prompts[i].1` is the seed for encoding `prompts[i].0`.
    fn segment(&self, image: &ImagePlane, prev: &ProbMap, prompts: &[(Prompt, u64)]) -> Result<ProbMap>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub kind: PromptKind,
    pub positive: bool,
    pub geometry: crate::pue::Geometry,
    pub iou: f64,
    #[serde(skip)]
    pub mask: Option<BinaryMask>,
}

impl StepRecord {
    pub fn prompt(&self) -> Prompt {
        Prompt { positive: self.positive, geometry: self.geometry.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub instance_id: String,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    /// First 1-based step whose IoU reaches each target.
    pub reached: BTreeMap<String, Option<usize>>,
}

impl SessionRecord {
    pub fn ious(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.iou).collect()
    }

    /// First 1-based step with IoU ≥ `t`.
    pub fn reached_at(&self, t: f64) -> Option<usize> {
        self.steps.iter().position(|s| s.iou >= t).map(|i| i + 1)
    }

    fn fill_reached(&mut self, targets: &[f64]) {
        self.reached = targets.iter().map(|&t| (target_key(t), self.reached_at(t))).collect();
    }
}

/// Indices of the prompts kept when at most `capacity` fit: the oldest
/// non-click prompts go first, then the oldest clicks. Order is preserved.
pub fn select_prompts(kinds: &[PromptKind], capacity: usize) -> Vec<usize> {
    let mut keep: Vec<usize> = (0..kinds.len()).collect();
    let mut excess = kinds.len().saturating_sub(capacity);
    for pass_clicks in [false, true] {
        keep.retain(|&i| {
            if excess > 0 && (kinds[i] == PromptKind::Click) == pass_clicks {
                excess -= 1;
                false
            } else {
                true
            }
        });
    }
    keep
}

/// Seed used to encode the `index`-th prompt (0-based) of a session.
pub fn prompt_seed(session_seed: u64, index: usize) -> u64 {
    session_seed.wrapping_add(index as u64)
}

/// Runs one simulated interactive session.
pub fn run_session<S: Segmenter + ?Sized>(
    instance_id: &str,
    image: &ImagePlane,
    gt: &BinaryMask,
    segmenter: &S,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<SessionRecord> {
    cfg.validate()?;
    if image.width() != gt.width() || image.height() != gt.height() {
        bail!(Shape, "image and ground truth differ in size");
    }
    let (w, h) = (gt.width(), gt.height());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5e55_1011);
    let mut record =
        SessionRecord { instance_id: instance_id.into(), seed, steps: Vec::new(), reached: BTreeMap::new() };
    let mut prev = ProbMap::zeros(w, h);
    let mut pred = BinaryMask::empty(w, h);
    let mut prompts: Vec<(Prompt, u64)> = Vec::new();
    let mut ious: Vec<f64> = Vec::new();
    for step in 0..cfg.max_interactions {
        let err = error_regions(&pred, gt)?;
        if err.components.is_empty() {
            break;
        }
        let kind = if step == 0 || cfg.mode == ProtocolMode::ClickOnly || !should_switch(&ious, cfg) {
            PromptKind::Click
        } else if rng.gen_bool(0.5) {
            PromptKind::Box
        } else {
            PromptKind::Scribble
        };
        let prompt = match kind {
            PromptKind::Click => next_click(&err)?,
            PromptKind::Box => next_box(&err)?,
            PromptKind::Scribble => next_scribble(&err, seed.wrapping_mul(31).wrapping_add(step as u64))?,
        };
        prompts.push((prompt.clone(), prompt_seed(seed, step)));
        let prob = segmenter.segment(image, &prev, &prompts)?;
        if prob.width() != w || prob.height() != h {
            bail!(Shape, "segmenter returned a {}x{} map for a {w}x{h} image", prob.width(), prob.height());
        }
        pred = prob.threshold();
        let iou = compute_iou(&pred, gt)?;
        ious.push(iou);
        record.steps.push(StepRecord {
            kind: prompt.kind(),
            positive: prompt.positive,
            geometry: prompt.geometry,
            iou,
            mask: Some(pred.clone()),
        });
        prev = prob;
        if iou >= cfg.stop_target() {
            break;
        }
    }
    record.fill_reached(&cfg.targets);
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub instances: usize,
    pub max_interactions: usize,
    /// Mean interactions to reach each target, failures counted at the cap.
    pub noc: BTreeMap<String, f64>,
    /// Number of instances that never reach each target.
    pub nof: BTreeMap<String, usize>,
    /// Mean IoU after k = 1..=max_interactions steps (last value carried forward).
    pub iou_at_k: Vec<f64>,
}

impl MetricsReport {
    pub fn noc_at(&self, t: f64) -> Option<f64> {
        self.noc.get(&target_key(t)).copied()
    }

    pub fn nof_at(&self, t: f64) -> Option<usize> {
        self.nof.get(&target_key(t)).copied()
    }

    /// IoU after `k` interactions (1-based).
    pub fn iou_at(&self, k: usize) -> Option<f64> {
        k.checked_sub(1).and_then(|i| self.iou_at_k.get(i)).copied()
    }

    /// `k,miou` rows of the mIoU-versus-interactions curve.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("k,miou\n");
        for (i, v) in self.iou_at_k.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, v));
        }
        s
    }
}

/// NoC / NoF / IoU@k over sessions, accumulated in record order.
pub fn aggregate_metrics(records: &[SessionRecord], targets: &[f64], max_interactions: usize) -> Result<MetricsReport> {
    if records.is_empty() {
        bail!(Contract, "no session records to aggregate");
    }
    if max_interactions == 0 {
        bail!(Config, "max_interactions must be at least 1");
    }
    if let Some(r) = records.iter().find(|r| r.steps.is_empty()) {
        bail!(Contract, "session {} has no steps", r.instance_id);
    }
    let n = records.len() as f64;
    let mut noc = BTreeMap::new();
    let mut nof = BTreeMap::new();
    for &t in targets {
        let mut total = 0.0;
        let mut failures = 0;
        for r in records {
            match r.reached_at(t) {
                Some(k) if k <= max_interactions => total += k as f64,
                _ => {
                    total += max_interactions as f64;
                    failures += 1;
                }
            }
        }
        noc.insert(target_key(t), total / n);
        nof.insert(target_key(t), failures);
    }
    let iou_at_k = (1..=max_interactions)
        .map(|k| {
            records.iter().map(|r| r.steps[k.min(r.steps.len()) - 1].iou).sum::<f64>() / n
        })
        .collect();
    Ok(MetricsReport { instances: records.len(), max_interactions, noc, nof, iou_at_k })
}
