//! Synthetic PEG datasets with planted structure, and a finite-difference
//! training loop for the reference decoder.
//!
//! Every grounded phrase `k` is backed by a concept vector `s_k` shared by
//! the whole dataset. Its text tokens carry `s_k`, and one image token
//! carries `s_k` plus a fixed linear code of the object's box, so a query can
//! find both halves of a pair by matching against the same direction.

use std::io::{Read, Write};
use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::assignment::Assignment;
use crate::data::{
    BoxXYXY, GroundingPair, PegPrediction, PegPredictionSet, PegSampleGT, PhraseSpans, RecordError,
    TokenizedCaption,
};
use crate::geometry::BoxCXCYWH;
use crate::kernels::attention::softmax;
use crate::kernels::model::Damage;
use crate::kernels::{
    match_queries, total_loss, DecoderModel, KernelConfig, KernelError, Memory, Params,
    QueryOutputs,
};
use crate::linalg::{inverse_sigmoid, Matrix};
use crate::metrics::{evaluate, EvalOptions, MetricsError, Protocol};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error("memory sidecar: {0}")]
    Sidecar(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged {
        step: usize,
        loss: f64,
        trace: Vec<f64>,
    },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_samples: usize,
    pub n_text: RangeInclusive<usize>,
    pub n_img: usize,
    pub pairs_per_sample: RangeInclusive<usize>,
    pub span_len: RangeInclusive<usize>,
    /// Feature width; must equal the decoder's `d_model`.
    pub d_model: usize,
    /// Std-dev of the Gaussian noise added to every feature.
    pub noise: f64,
    /// Scale of the per-concept box code added to object tokens.
    pub box_signal: f64,
    /// Std-dev of filler text tokens and background image tokens.
    pub clutter: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 3,
            n_text: 6..=9,
            n_img: 2,
            pairs_per_sample: 1..=2,
            span_len: 1..=2,
            d_model: 16,
            noise: 0.05,
            box_signal: 3.0,
            clutter: 0.1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        for (name, r) in [
            ("n_text", &self.n_text),
            ("pairs_per_sample", &self.pairs_per_sample),
            ("span_len", &self.span_len),
        ] {
            if r.is_empty() {
                return bad(format!("{name} range is empty"));
            }
        }
        if *self.n_text.start() == 0 || *self.span_len.start() == 0 {
            return bad("n_text and span_len must be at least 1".into());
        }
        let worst = self.pairs_per_sample.end() * self.span_len.end();
        if worst > *self.n_text.start() {
            return bad(format!(
                "{} pairs of up to {} tokens do not fit in {} tokens",
                self.pairs_per_sample.end(),
                self.span_len.end(),
                self.n_text.start()
            ));
        }
        if *self.pairs_per_sample.end() > self.n_img {
            return bad(format!(
                "{} pairs need more than {} image tokens",
                self.pairs_per_sample.end(),
                self.n_img
            ));
        }
        if self.d_model == 0 {
            return bad("d_model must be positive".into());
        }
        if [self.noise, self.box_signal, self.clutter]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return bad("noise, box_signal and clutter must be finite and >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub samples: Vec<PegSampleGT>,
    pub memories: Vec<Memory>,
}

const CONCEPT_WORDS: &[&str] = &["dog", "ball", "tree", "car", "cup", "bird", "chair", "kite"];
const MODIFIER_WORDS: &[&str] = &["red", "small", "old", "striped"];
const FILLER_WORDS: &[&str] = &[
    "a", "the", "is", "on", "near", "with", "and", "of", "in", "by", "some", "there",
];

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream simple to reason about.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * gaussian(rng)).collect()
}

/// Draws ground truth and matching memory features.
pub fn generate_dataset(spec: &SynthSpec) -> Result<SynthDataset, SynthError> {
    spec.validate()?;
    let d = spec.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_concepts = *spec.pairs_per_sample.end();
    let concepts: Vec<Vec<f64>> = (0..n_concepts)
        .map(|_| gaussian_vec(&mut rng, d, 1.0))
        .collect();
    // Box code of concept k: feature += B_k · inverse_sigmoid(cx, cy, w, h).
    let box_code: Vec<Vec<Vec<f64>>> = (0..n_concepts)
        .map(|_| {
            (0..d)
                .map(|_| gaussian_vec(&mut rng, 4, spec.box_signal))
                .collect()
        })
        .collect();

    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut memories = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let n_text = rng.gen_range(spec.n_text.clone());
        let n_pairs = rng.gen_range(spec.pairs_per_sample.clone());
        let lens: Vec<usize> = (0..n_pairs)
            .map(|_| rng.gen_range(spec.span_len.clone()))
            .collect();

        // Random placement: split the free tokens into n_pairs + 1 gaps.
        let free = n_text - lens.iter().sum::<usize>();
        let mut cuts: Vec<usize> = (0..n_pairs).map(|_| rng.gen_range(0..=free)).collect();
        cuts.sort_unstable();
        let mut order: Vec<usize> = (0..n_pairs).collect();
        order.shuffle(&mut rng);
        let mut starts = vec![0; n_pairs];
        let (mut pos, mut prev_cut) = (0, 0);
        for (slot, &k) in order.iter().enumerate() {
            pos += cuts[slot] - prev_cut;
            prev_cut = cuts[slot];
            starts[k] = pos;
            pos += lens[k];
        }

        let mut tokens: Vec<String> = (0..n_text)
            .map(|_| FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())].to_string())
            .collect();
        let mut text = Matrix::zeros(n_text, d);
        let mut concept_of_token = vec![None; n_text];
        for k in 0..n_pairs {
            for j in starts[k]..starts[k] + lens[k] {
                concept_of_token[j] = Some(k);
                tokens[j] = if j + 1 == starts[k] + lens[k] {
                    CONCEPT_WORDS[k % CONCEPT_WORDS.len()].to_string()
                } else {
                    MODIFIER_WORDS[rng.gen_range(0..MODIFIER_WORDS.len())].to_string()
                };
            }
        }
        for (j, concept) in concept_of_token.iter().enumerate() {
            let row = match *concept {
                Some(k) => concepts[k]
                    .iter()
                    .map(|c| c + spec.noise * gaussian(&mut rng))
                    .collect(),
                None => gaussian_vec(&mut rng, d, spec.clutter),
            };
            text.row_mut(j).copy_from_slice(&row);
        }

        let mut image = Matrix::zeros(spec.n_img, d);
        let mut slots: Vec<usize> = (0..spec.n_img).collect();
        slots.shuffle(&mut rng);
        let mut pairs = Vec::with_capacity(n_pairs);
        let mut object_rows = vec![None; spec.n_img];
        for k in 0..n_pairs {
            let w = rng.gen_range(0.2..0.5);
            let h = rng.gen_range(0.2..0.5);
            let cx = rng.gen_range(w / 2.0 + 0.02..1.0 - w / 2.0 - 0.02);
            let cy = rng.gen_range(h / 2.0 + 0.02..1.0 - h / 2.0 - 0.02);
            let b = BoxCXCYWH::new(cx, cy, w, h)?;
            object_rows[slots[k]] = Some((k, b));
            pairs.push(GroundingPair::new(
                PhraseSpans::new(&[(starts[k], starts[k] + lens[k])], n_text)?,
                vec![b.to_xyxy()?],
            )?);
        }
        for (r, object) in object_rows.iter().enumerate() {
            let row: Vec<f64> = match *object {
                Some((k, b)) => {
                    let code = b.to_array().map(inverse_sigmoid);
                    (0..d)
                        .map(|c| {
                            concepts[k][c]
                                + box_code[k][c]
                                    .iter()
                                    .zip(&code)
                                    .map(|(a, x)| a * x)
                                    .sum::<f64>()
                                + spec.noise * gaussian(&mut rng)
                        })
                        .collect()
                }
                None => gaussian_vec(&mut rng, d, spec.clutter),
            };
            image.row_mut(r).copy_from_slice(&row);
        }

        samples.push(PegSampleGT {
            caption: TokenizedCaption::new(format!("synth-{:04}", i), tokens)?,
            pairs,
        });
        memories.push(Memory {
            image_features: image,
            text_features: text,
        });
    }
    Ok(SynthDataset { samples, memories })
}

const SIDECAR_MAGIC: &[u8; 4] = b"PEGM";
const SIDECAR_VERSION: u16 = 1;

/// One block per sample, in dataset order: a 16-byte header (magic `PEGM`,
/// version u16, D u16, N_img u32, N_text u32; little-endian) then the image
/// rows and the text rows as f64 LE.
pub fn write_memory_sidecar<W: Write>(memories: &[Memory], mut out: W) -> Result<(), SynthError> {
    for m in memories {
        let d = m.image_features.cols();
        let d16 = u16::try_from(d).map_err(|_| SynthError::Sidecar(format!("D {d} too wide")))?;
        out.write_all(SIDECAR_MAGIC)?;
        out.write_all(&SIDECAR_VERSION.to_le_bytes())?;
        out.write_all(&d16.to_le_bytes())?;
        out.write_all(&(m.n_img() as u32).to_le_bytes())?;
        out.write_all(&(m.n_text() as u32).to_le_bytes())?;
        for v in m
            .image_features
            .as_slice()
            .iter()
            .chain(m.text_features.as_slice())
        {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_memory_sidecar<R: Read>(mut input: R) -> Result<Vec<Memory>, SynthError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut out = Vec::new();
    let mut at = 0;
    let take = |at: &mut usize, n: usize| -> Result<&[u8], SynthError> {
        let s = bytes
            .get(*at..*at + n)
            .ok_or_else(|| SynthError::Sidecar(format!("truncated at byte {}", *at)))?;
        *at += n;
        Ok(s)
    };
    while at < bytes.len() {
        let header = take(&mut at, 16)?;
        if &header[0..4] != SIDECAR_MAGIC {
            return Err(SynthError::Sidecar(format!(
                "bad magic at byte {}",
                at - 16
            )));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != SIDECAR_VERSION {
            return Err(SynthError::Sidecar(format!(
                "unsupported version {version}"
            )));
        }
        let d = u16::from_le_bytes([header[6], header[7]]) as usize;
        let n_img = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let n_text = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let mut read = |rows: usize| -> Result<Matrix, SynthError> {
            let raw = take(&mut at, rows * d * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Matrix::from_vec(rows, d, data))
        };
        let image_features = read(n_img)?;
        let text_features = read(n_text)?;
        out.push(Memory {
            image_features,
            text_features,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub max_steps: usize,
    pub learning_rate: f64,
    /// Step size multiplier after an accepted step.
    pub growth: f64,
    /// Central-difference step. Large enough to smooth the L1 kinks.
    pub fd_step: f64,
    pub init_seed: u64,
    /// Stop as soon as the training set scores CMAP_50 = 1 and Any-Box R@1 = 1.
    pub stop_when_solved: bool,
    pub threads: usize,
    /// One backtracked step size per parameter block instead of one overall.
    pub split_step_sizes: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            max_steps: 2000,
            learning_rate: 0.05,
            growth: 1.5,
            fd_step: 3e-2,
            init_seed: 0,
            stop_when_solved: true,
            threads: 1,
            split_step_sizes: true,
        }
    }
}

/// Parameter ranges sharing one step size: the whole vector, or one range
/// per embedding / dense layer.
fn step_groups(model: &DecoderModel, split: bool) -> Vec<std::ops::Range<usize>> {
    if split {
        model.param_blocks().into_iter().map(|(_, r)| r).collect()
    } else {
        std::iter::once(0..model.n_params()).collect()
    }
}

pub const MAX_FD_PARAMS: usize = 20_000;
const DIVERGENCE_LOSS: f64 = 1e6;
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: Params,
    /// Loss before each step, then the final loss.
    pub loss_trace: Vec<f64>,
    pub steps: usize,
    pub solved: bool,
    pub predictions: Vec<PegPredictionSet>,
}

struct Objective<'a> {
    model: &'a DecoderModel,
    samples: &'a [PegSampleGT],
    memories: &'a [Memory],
}

impl Objective<'_> {
    /// Loss with freshly matched assignments.
    fn loss_matched(&self, params: &Params) -> Result<(f64, Vec<Assignment>), SynthError> {
        let cfg = &self.model.config;
        let mut total = 0.0;
        let mut assignments = Vec::with_capacity(self.samples.len());
        for (gt, mem) in self.samples.iter().zip(self.memories) {
            let out = self.model.forward(params, mem, false)?;
            let q = QueryOutputs {
                anchors: &out.state.anchors,
                phrase_logits: &out.phrase_logits,
            };
            let a = match_queries(q, gt, cfg)?;
            total += total_loss(q, gt, cfg, &a)?.total;
            assignments.push(a);
        }
        Ok((total, assignments))
    }

    fn fd_gradient(
        &self,
        params: &Params,
        assignments: &[Assignment],
        h: f64,
        threads: usize,
    ) -> Result<Vec<f64>, SynthError> {
        let model = self.model;
        let caches = self
            .memories
            .iter()
            .map(|m| model.forward_cached(params, m))
            .collect::<Result<Vec<_>, _>>()?;
        let loss_at = |work: &Params, damage: &Damage| -> Result<f64, SynthError> {
            let mut total = 0.0;
            for (((gt, mem), cache), a) in self
                .samples
                .iter()
                .zip(self.memories)
                .zip(&caches)
                .zip(assignments)
            {
                let (anchors, logits) = model.forward_incremental(work, mem, cache, damage)?;
                let q = QueryOutputs {
                    anchors: &anchors,
                    phrase_logits: &logits,
                };
                total += total_loss(q, gt, &model.config, a)?.total;
            }
            Ok(total)
        };
        let coord = |i: usize, work: &mut Params| -> Result<f64, SynthError> {
            let damage = model.damage_of(i);
            let orig = work.0[i];
            work.0[i] = orig + h;
            let plus = loss_at(work, &damage)?;
            work.0[i] = orig - h;
            let minus = loss_at(work, &damage)?;
            work.0[i] = orig;
            Ok((plus - minus) / (2.0 * h))
        };
        if threads <= 1 {
            let mut work = params.clone();
            return (0..params.len()).map(|i| coord(i, &mut work)).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        pool.install(|| {
            (0..params.len())
                .into_par_iter()
                .map_init(|| params.clone(), |work, i| coord(i, work))
                .collect()
        })
    }
}

/// Predictions of every query. Box: final anchor. Confidence:
/// `1 − p(no_phrase)`. Phrase: tokens whose probability in the text query's
/// distribution is above uniform `1/(n_text+1)`; queries with no such token
/// emit nothing.
pub fn emit_predictions(
    model: &DecoderModel,
    params: &Params,
    samples: &[PegSampleGT],
    memories: &[Memory],
) -> Result<Vec<PegPredictionSet>, SynthError> {
    let mut sets = Vec::with_capacity(samples.len());
    for (gt, mem) in samples.iter().zip(memories) {
        let out = model.forward(params, mem, false)?;
        let n_text = mem.n_text();
        let uniform = 1.0 / (n_text + 1) as f64;
        let mut predictions = Vec::new();
        for q in 0..out.state.n_queries() {
            let scaled: Vec<f64> = out
                .phrase_logits
                .row(q)
                .iter()
                .map(|l| l / model.config.tau)
                .collect();
            let p = softmax(&scaled);
            let mask: Vec<bool> = p[..n_text].iter().map(|&pj| pj > uniform).collect();
            let phrase = PhraseSpans::from_mask(&mask);
            if phrase.is_empty() {
                continue;
            }
            let bbox = BoxCXCYWH::from_array(out.state.anchor(q)).to_xyxy()?;
            let confidence = (1.0 - p[n_text]).clamp(0.0, 1.0);
            predictions.push(PegPrediction::new(bbox, phrase, confidence)?);
        }
        sets.push(PegPredictionSet {
            sample_id: gt.sample_id().to_string(),
            predictions,
        });
    }
    Ok(sets)
}

fn solved(gt: &[PegSampleGT], preds: &[PegPredictionSet]) -> Result<bool, SynthError> {
    let opts = EvalOptions {
        ks: vec![1],
        protocols: vec![Protocol::AnyBox],
        ..EvalOptions::default()
    };
    let r = evaluate(gt, preds, &opts)?;
    Ok(r.cmap.values().all(|&v| v == 1.0) && r.recall_at_k.values().all(|&v| v == 1.0))
}

/// Gradient descent on the summed matched loss, with gradients from central
/// differences over every parameter.
///
/// The assignment is recomputed at the start of each step and held fixed for
/// the finite differences. Each step group (see `split_step_sizes`) gets its
/// own step size. A group's update is kept only if the re-matched loss drops;
/// otherwise its step size is halved and the update retried.
pub fn fd_train(
    samples: &[PegSampleGT],
    memories: &[Memory],
    config: &KernelConfig,
    options: &TrainOptions,
) -> Result<TrainResult, SynthError> {
    if samples.len() != memories.len() {
        return Err(SynthError::InvalidSpec(format!(
            "{} samples but {} memories",
            samples.len(),
            memories.len()
        )));
    }
    let model = DecoderModel::new(config.clone())?;
    if model.n_params() > MAX_FD_PARAMS {
        return Err(SynthError::InvalidSpec(format!(
            "{} parameters exceed the finite-difference bound {MAX_FD_PARAMS}",
            model.n_params()
        )));
    }
    if let Some(s) = samples.iter().find(|s| s.n_targets() > config.n_queries) {
        return Err(SynthError::InvalidSpec(format!(
            "sample {} has more targets than {} queries",
            s.sample_id(),
            config.n_queries
        )));
    }
    if !(options.learning_rate.is_finite() && options.learning_rate >= 0.0) {
        return Err(SynthError::InvalidSpec("learning rate must be >= 0".into()));
    }
    let objective = Objective {
        model: &model,
        samples,
        memories,
    };
    let mut params = model.init_params(options.init_seed);
    let (mut loss, mut assignments) = objective.loss_matched(&params)?;
    let mut trace = vec![loss];
    let groups = step_groups(&model, options.split_step_sizes);
    let mut lrs = vec![options.learning_rate; groups.len()];
    let mut steps = 0;
    let mut is_solved = false;
    while steps < options.max_steps {
        if options.stop_when_solved {
            let preds = emit_predictions(&model, &params, samples, memories)?;
            if solved(samples, &preds)? {
                is_solved = true;
                break;
            }
        }
        if options.learning_rate == 0.0 {
            steps += 1;
            trace.push(loss);
            continue;
        }
        let grad =
            objective.fd_gradient(&params, &assignments, options.fd_step, options.threads)?;
        let mut any_accepted = false;
        for (group, lr) in groups.iter().zip(lrs.iter_mut()) {
            if grad[group.clone()].iter().all(|&g| g == 0.0) {
                continue;
            }
            let start_lr = *lr;
            let mut accepted = None;
            for _ in 0..MAX_HALVINGS {
                let mut cand = params.clone();
                for i in group.clone() {
                    cand.0[i] -= *lr * grad[i];
                }
                match objective.loss_matched(&cand) {
                    Ok((l, a)) if l.is_finite() && l < loss => {
                        accepted = Some((cand, l, a));
                        break;
                    }
                    Ok(_) => {}
                    // A step that sends a forward non-finite is just too long.
                    Err(SynthError::Kernel(KernelError::NonFinite { .. })) => {}
                    Err(e) => return Err(e),
                }
                *lr /= 2.0;
            }
            match accepted {
                Some((p, l, a)) => {
                    params = p;
                    loss = l;
                    assignments = a;
                    *lr *= options.growth;
                    any_accepted = true;
                }
                None => *lr = start_lr / 4.0,
            }
        }
        steps += 1;
        if !any_accepted {
            log::info!("step {steps}: no descent direction, stopping at loss {loss}");
            trace.push(loss);
            break;
        }
        if loss > DIVERGENCE_LOSS {
            return Err(SynthError::Diverged {
                step: steps,
                loss,
                trace,
            });
        }
        trace.push(loss);
        if steps % 25 == 0 {
            log::info!("step {steps}: loss {loss:.6}");
        }
    }
    let predictions = emit_predictions(&model, &params, samples, memories)?;
    if !is_solved {
        is_solved = solved(samples, &predictions)?;
    }
    Ok(TrainResult {
        params,
        loss_trace: trace,
        steps,
        solved: is_solved,
        predictions,
    })
}

pub fn write_loss_trace<W: Write>(trace: &[f64], mut out: W) -> std::io::Result<()> {
    writeln!(out, "step,loss")?;
    for (i, l) in trace.iter().enumerate() {
        writeln!(out, "{i},{l:.6}")?;
    }
    Ok(())
}

/// Jittered copies of each ground-truth pair plus random distractors, with
/// confidences on a coarse grid so that ties are common.
pub fn noisy_predictions(samples: &[PegSampleGT], seed: u64) -> Vec<PegPredictionSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter_box = |b: &BoxXYXY, rng: &mut ChaCha8Rng, amount: f64| -> BoxXYXY {
        let mut v = b
            .to_array()
            .map(|x| (x + rng.gen_range(-amount..amount)).clamp(0.0, 1.0));
        if v[2] - v[0] < 0.01 {
            v[0] = (v[2] - 0.01).max(0.0);
            v[2] = v[0] + 0.01;
        }
        if v[3] - v[1] < 0.01 {
            v[1] = (v[3] - 0.01).max(0.0);
            v[3] = v[1] + 0.01;
        }
        BoxXYXY::from_array(v).expect("jittered box stays valid")
    };
    samples
        .iter()
        .map(|s| {
            let n_text = s.n_text();
            let mut predictions = Vec::new();
            for (b, phrase) in s.targets() {
                if rng.gen_bool(0.15) {
                    continue;
                }
                let spans: Vec<(usize, usize)> = phrase
                    .spans()
                    .iter()
                    .map(|&(a, e)| {
                        let e2 = if rng.gen_bool(0.2) {
                            (e + 1).min(n_text)
                        } else {
                            e
                        };
                        (a, e2)
                    })
                    .collect();
                predictions.push(PegPrediction {
                    bbox: jitter_box(b, &mut rng, 0.08),
                    phrase: PhraseSpans::normalized(&spans),
                    confidence: rng.gen_range(0..=20) as f64 / 20.0,
                });
            }
            for _ in 0..rng.gen_range(0..3) {
                let a = rng.gen_range(0..n_text);
                let e = rng.gen_range(a + 1..=n_text);
                let x1 = rng.gen_range(0.0..0.8);
                let y1 = rng.gen_range(0.0..0.8);
                let bbox = BoxXYXY::new(
                    x1,
                    y1,
                    x1 + rng.gen_range(0.05..0.2),
                    y1 + rng.gen_range(0.05..0.2),
                )
                .expect("distractor box is valid");
                predictions.push(PegPrediction {
                    bbox,
                    phrase: PhraseSpans::normalized(&[(a, e)]),
                    confidence: rng.gen_range(0..=20) as f64 / 20.0,
                });
            }
            PegPredictionSet {
                sample_id: s.sample_id().to_string(),
                predictions,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_ground_truth, write_ground_truth};

    #[test]
    fn deterministic_and_valid() {
        let spec = SynthSpec {
            seed: 7,
            n_samples: 20,
            pairs_per_sample: 0..=3,
            n_img: 3,
            ..SynthSpec::default()
        };
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        write_ground_truth(&a.samples, &mut ba).unwrap();
        write_ground_truth(&b.samples, &mut bb).unwrap();
        assert_eq!(ba, bb);
        assert_eq!(a.memories, b.memories);
        let parsed = parse_ground_truth(&ba[..]).unwrap();
        assert_eq!(parsed, a.samples);
        assert!(a.samples.iter().any(|s| s.pairs.is_empty()));
        for s in &a.samples {
            let mut seen = vec![false; s.n_text()];
            for p in &s.pairs {
                for t in p.phrase.tokens() {
                    assert!(!seen[t], "spans overlap in {}", s.sample_id());
                    seen[t] = true;
                }
            }
        }
    }

    #[test]
    fn rejects_infeasible_specs() {
        for spec in [
            SynthSpec {
                n_samples: 0,
                ..SynthSpec::default()
            },
            SynthSpec {
                pairs_per_sample: 4..=4,
                span_len: 2..=2,
                n_text: 6..=9,
                ..SynthSpec::default()
            },
            SynthSpec {
                pairs_per_sample: 3..=3,
                n_img: 2,
                ..SynthSpec::default()
            },
        ] {
            assert!(matches!(
                generate_dataset(&spec),
                Err(SynthError::InvalidSpec(_))
            ));
        }
    }

    #[test]
    fn sidecar_round_trip() {
        let data = generate_dataset(&SynthSpec::default()).unwrap();
        let mut buf = Vec::new();
        write_memory_sidecar(&data.memories, &mut buf).unwrap();
        let m = &data.memories[0];
        assert_eq!(&buf[..4], b"PEGM");
        assert_eq!(
            u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize,
            m.n_img()
        );
        assert_eq!(read_memory_sidecar(&buf[..]).unwrap(), data.memories);
        assert!(read_memory_sidecar(&buf[..buf.len() - 3]).is_err());
        buf[0] = b'X';
        assert!(read_memory_sidecar(&buf[..]).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_everything() {
        let data = generate_dataset(&SynthSpec {
            n_samples: 2,
            ..SynthSpec::default()
        })
        .unwrap();
        let cfg = KernelConfig::default();
        let opts = TrainOptions {
            max_steps: 3,
            learning_rate: 0.0,
            stop_when_solved: false,
            ..TrainOptions::default()
        };
        let r = fd_train(&data.samples, &data.memories, &cfg, &opts).unwrap();
        let init = DecoderModel::new(cfg).unwrap().init_params(0);
        assert_eq!(r.params, init);
        assert!(r.loss_trace.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn noisy_predictions_parse() {
        let data = generate_dataset(&SynthSpec {
            n_samples: 50,
            ..SynthSpec::default()
        })
        .unwrap();
        let preds = noisy_predictions(&data.samples, 1);
        let mut buf = Vec::new();
        crate::data::write_predictions(&preds, &mut buf).unwrap();
        let back = crate::data::parse_predictions(&buf[..]).unwrap();
        assert_eq!(back.len(), 50);
    }
}
