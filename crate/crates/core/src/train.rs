//! Iterative-prompt training, evaluation with the simulated user, and the
//! gradient check used by the command line.
//!
//! Every training sample is visited for `rounds` forward passes. The first
//! prompt is a click on the ground truth; each later prompt has a random kind
//! and is placed on the largest error region of the previous round, whose
//! probability map (detached) becomes the next `prev_mask`. Prompts
//! accumulate across rounds. The batch loss is the mean over all samples and
//! rounds.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::image::{BinaryMask, ImagePlane, ProbMap};
use crate::interact::{
    aggregate_metrics, error_regions, next_box, next_click, next_scribble, prompt_seed, run_session, select_prompts,
    MetricsReport, ProtocolConfig, Segmenter, SessionRecord,
};
use crate::losses::{total_loss, LossBreakdown, LossConfig};
use crate::model::{forward_graph, model_forward, BoundParams, ModelConfig, ModelParams};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::pue::{encode_prompt, EncoderConfig, Prompt, PromptKind, PromptVector};
use crate::synth::InstanceSample;
use crate::tensor::{finite_diff_check_many, Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    /// The learning rate is multiplied by `lr_decay` from this epoch (0-based) on.
    pub lr_decay_epoch: usize,
    pub lr_decay: f64,
    pub rounds: usize,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            lr: 5e-4,
            adam: AdamConfig::default(),
            lr_decay_epoch: 50,
            lr_decay: 0.1,
            rounds: 3,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            encoder: EncoderConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            bail!(Config, "epochs must be at least 1");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be at least 1");
        }
        if self.rounds == 0 {
            bail!(Config, "rounds must be at least 1");
        }
        if !(self.lr > 0.0) {
            bail!(Config, "learning rate must be positive, got {}", self.lr);
        }
        if !(self.lr_decay > 0.0) {
            bail!(Config, "lr_decay must be positive, got {}", self.lr_decay);
        }
        self.adam.validate()?;
        self.loss.validate()?;
        self.model.validate()?;
        self.encoder.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub step: u64,
    /// One breakdown per optimizer step.
    pub history: Vec<LossBreakdown>,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let adam = AdamState::new(params.entries().iter().map(|(_, t)| t));
        Self { params, adam, step: 0, history: Vec::new() }
    }

    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        Ok(Self::new(ModelParams::init(&cfg.model, cfg.seed)?))
    }
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over a combined key
    let mut z = a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_add(0x632b_e59b_d9b7_313b);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d1_049b_b133_111e);
    z ^ (z >> 31)
}

/// The simulated prompt for one training round.
fn training_prompt(round: usize, pred: &BinaryMask, gt: &BinaryMask, rng: &mut ChaCha8Rng) -> Result<Option<Prompt>> {
    let err = error_regions(pred, gt)?;
    if err.components.is_empty() {
        return Ok(None);
    }
    let kind = if round == 0 {
        PromptKind::Click
    } else {
        [PromptKind::Click, PromptKind::Box, PromptKind::Scribble][rng.gen_range(0..3)]
    };
    let p = match kind {
        PromptKind::Click => next_click(&err)?,
        PromptKind::Box => next_box(&err)?,
        PromptKind::Scribble => next_scribble(&err, rng.gen())?,
    };
    Ok(Some(p))
}

/// Loss and parameter gradients of one sample, summed over its rounds.
fn sample_gradients(
    params: &ModelParams,
    sample: &InstanceSample,
    cfg: &TrainConfig,
    seed: u64,
    grads: &mut [Tensor],
    sum: &mut LossBreakdown,
) -> Result<usize> {
    let s = cfg.model.input_size;
    if sample.image.width() != s || sample.image.height() != s {
        bail!(Shape, "training image is {}x{}, model expects {s}x{s}", sample.image.width(), sample.image.height());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prev = ProbMap::zeros(s, s);
    let mut pred = BinaryMask::empty(s, s);
    let mut prompts: Vec<PromptVector> = Vec::new();
    let mut intents: Vec<bool> = Vec::new();
    let mut done = 0;
    for round in 0..cfg.rounds {
        let Some(p) = training_prompt(round, &pred, &sample.gt, &mut rng)? else {
            break;
        };
        prompts.push(encode_prompt(&sample.image, &p, &cfg.encoder, rng.gen())?);
        intents.push(p.positive);
        let mut g = Graph::new();
        let bp = params.bind(&mut g, true);
        let fwd = forward_graph(&mut g, &bp, &sample.image, &prev, &prompts, &cfg.model, None)?;
        let loss = total_loss(&mut g, fwd.prob, &sample.gt, fwd.z_q, fwd.z_v, &intents, &cfg.loss)?;
        let b = loss.breakdown(&g);
        sum.nfl += b.nfl;
        sum.dice += b.dice;
        sum.p2cl += b.p2cl;
        sum.total += b.total;
        let gr = g.backward(loss.total)?;
        for ((name, _), acc) in params.entries().iter().zip(grads.iter_mut()) {
            if let Some(d) = gr.get(bp.var(name)?) {
                for (a, x) in acc.data_mut().iter_mut().zip(d) {
                    *a += x;
                }
            }
        }
        prev = ProbMap::new(s, s, g.value(fwd.prob).to_vec())?;
        pred = prev.threshold();
        done += 1;
    }
    Ok(done)
}

/// One optimizer step on `batch`; returns the mean loss breakdown.
pub fn train_step(state: &mut TrainState, batch: &[InstanceSample], cfg: &TrainConfig, lr: f64) -> Result<LossBreakdown> {
    if batch.is_empty() {
        bail!(Contract, "empty training batch");
    }
    let mut grads: Vec<Tensor> = state.params.entries().iter().map(|(_, t)| t.zeros_like()).collect();
    let mut sum = LossBreakdown::default();
    let mut count = 0usize;
    for (i, sample) in batch.iter().enumerate() {
        let seed = mix(cfg.seed, mix(state.step, i as u64));
        count += sample_gradients(&state.params, sample, cfg, seed, &mut grads, &mut sum)?;
    }
    let n = count as f64;
    for g in &mut grads {
        for v in g.data_mut() {
            *v /= n;
        }
    }
    adam_step(state.params.entries_mut(), &mut state.adam, &grads, lr, &cfg.adam)?;
    state.step += 1;
    let mean = LossBreakdown { nfl: sum.nfl / n, dice: sum.dice / n, p2cl: sum.p2cl / n, total: sum.total / n };
    state.history.push(mean);
    Ok(mean)
}

/// Progress passed to the [`fit`] callback after every step.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// Runs `cfg.epochs` epochs over `samples`, shuffled per epoch. The callback
/// returns `false` to stop early.
pub fn fit(
    state: &mut TrainState,
    samples: &[InstanceSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepInfo) -> bool,
) -> Result<()> {
    cfg.validate()?;
    if samples.is_empty() {
        bail!(Contract, "no training samples");
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ 0xe90c, epoch as u64));
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<InstanceSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let loss = train_step(state, &batch, cfg, lr)?;
            if !on_step(&StepInfo { epoch, step: state.step, lr, loss }) {
                return Ok(());
            }
        }
    }
    Ok(())
}

/// A trained network behind the [`Segmenter`] interface. When more prompts
/// arrive than the model holds, the oldest non-click prompts are dropped first.
#[derive(Debug, Clone)]
pub struct ModelSegmenter<'a> {
    pub params: &'a ModelParams,
    pub model: &'a ModelConfig,
    pub encoder: &'a EncoderConfig,
}

impl Segmenter for ModelSegmenter<'_> {
    fn segment(&self, image: &ImagePlane, prev: &ProbMap, prompts: &[(Prompt, u64)]) -> Result<ProbMap> {
        let kinds: Vec<PromptKind> = prompts.iter().map(|(p, _)| p.kind()).collect();
        let vectors = select_prompts(&kinds, self.model.max_prompts)
            .into_iter()
            .map(|i| encode_prompt(image, &prompts[i].0, self.encoder, prompts[i].1))
            .collect::<Result<Vec<_>>>()?;
        Ok(model_forward(image, prev, &vectors, self.params, self.model)?.prob)
    }
}

/// Simulated sessions over `samples` in order, then NoC / NoF / IoU@k.
/// Session `i` uses seed `protocol.rng_seed + i`.
pub fn evaluate<S: Segmenter + ?Sized>(
    segmenter: &S,
    samples: &[InstanceSample],
    protocol: &ProtocolConfig,
) -> Result<(MetricsReport, Vec<SessionRecord>)> {
    protocol.validate()?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let id = format!("{i:05}");
        records.push(run_session(&id, &s.image, &s.gt, segmenter, protocol, prompt_seed(protocol.rng_seed, i))?);
    }
    let report = aggregate_metrics(&records, &protocol.targets, protocol.max_interactions)?;
    Ok((report, records))
}

/// Max relative finite-difference error per checked group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Central-difference check of each loss on its own and of the full forward
/// pass plus total loss with respect to every parameter tensor. Weights are
/// drawn at random so no gradient is trivially zero.
pub fn gradient_check(model: &ModelConfig, loss: &LossConfig, seed: u64, h: f64) -> Result<GradCheckReport> {
    model.validate()?;
    loss.validate()?;
    let s = model.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(model, seed)?;
    for (name, t) in params.entries_mut() {
        let centre = if name.ends_with(".g") || name.ends_with(".s") { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            *v = centre + rng.gen_range(-0.5..0.5);
        }
    }
    let image = ImagePlane::new(s, s, 3, (0..s * s * 3).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let prev = ProbMap::new(s, s, (0..s * s).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let gt = BinaryMask::from_fn(s, s, |x, y| (s / 4..3 * s / 4).contains(&x) && (s / 5..2 * s / 3).contains(&y));
    let list = [
        Prompt::click(s / 2, s / 3, true),
        Prompt::bbox(s / 3, s / 2, s / 2, s / 3, false),
        Prompt::scribble(alloc::vec![(1, 1), (s - 2, s / 2)], true),
    ];
    let enc = EncoderConfig::default();
    let prompts =
        list.iter().enumerate().map(|(i, p)| encode_prompt(&image, p, &enc, i as u64)).collect::<Result<Vec<_>>>()?;
    let intents: Vec<bool> = list.iter().map(|p| p.positive).collect();

    let mut groups = Vec::new();
    let prob = Tensor::from_fn(&[s * s], |_| rng.gen_range(0.05..0.95));
    let err = finite_diff_check_many(|g, v| crate::losses::nfl_loss(g, v[0], &gt, loss), &[prob.clone()], h)?;
    groups.push(("loss.nfl".into(), err[0]));
    let err = finite_diff_check_many(|g, v| crate::losses::dice_loss(g, v[0], &gt), &[prob], h)?;
    groups.push(("loss.dice".into(), err[0]));
    let zq = Tensor::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0));
    let zv = Tensor::from_fn(&[16, 4], |_| rng.gen_range(-1.0..1.0));
    let cells = BinaryMask::from_fn(4, 4, |x, y| x + y < 4);
    let err = finite_diff_check_many(
        |g, v| {
            let a = g.row_normalize(v[0]);
            let b = g.row_normalize(v[1]);
            let rho = crate::losses::p2cl_similarity(g, a, b)?;
            crate::losses::p2cl_loss(g, rho, &intents, &cells, loss)
        },
        &[zq, zv],
        h,
    )?;
    groups.push(("loss.p2cl".into(), err[0].max(err[1])));

    let names: Vec<String> = params.entries().iter().map(|(n, _)| n.clone()).collect();
    let tensors: Vec<Tensor> = params.entries().iter().map(|(_, t)| t.clone()).collect();
    let errs = finite_diff_check_many(
        |g, vars| {
            let bp = BoundParams::from_vars(&names, vars);
            let fwd = forward_graph(g, &bp, &image, &prev, &prompts, model, None)?;
            Ok(total_loss(g, fwd.prob, &gt, fwd.z_q, fwd.z_v, &intents, loss)?.total)
        },
        &tensors,
        h,
    )?;
    groups.extend(names.into_iter().zip(errs));
    Ok(GradCheckReport { groups })
}
