//! CMAP (cross-modal average precision) and Recall@k under the Any-Box and
//! Merged-Boxes protocols.
//!
//! CMAP treats every (box, phrase) ground-truth combination as one target.
//! A prediction is positive when its dual IOU with an unmatched target
//! reaches the threshold; matching is greedy in descending confidence, one
//! match per target, and never crosses samples. All samples are pooled into a
//! single class-agnostic P-R curve integrated with the monotone precision
//! envelope.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{BoxXYXY, PegPredictionSet, PegSampleGT, PhraseSpans};
use crate::geometry::{box_iou, dual_iou, merge_boxes, phrase_iou};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction sample {pred:?} paired with ground truth {gt:?}")]
    SampleMismatch { gt: String, pred: String },
    #[error("predictions reference unknown sample id {0:?}")]
    UnknownSample(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

/// Outcome of one prediction after matching.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub confidence: f64,
    pub is_tp: bool,
    pub sample_id: String,
    /// Index of the prediction inside its sample's prediction list.
    pub pred_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PRPoint {
    pub recall: f64,
    pub precision: f64,
    pub confidence: f64,
}

/// Recall protocol for phrases with several ground-truth boxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Protocol {
    /// Correct if the box overlaps any ground-truth box of the phrase.
    AnyBox,
    /// Ground-truth boxes of the phrase are replaced by their hull.
    MergedBoxes,
}

impl Protocol {
    pub fn key(self) -> &'static str {
        match self {
            Protocol::AnyBox => "anybox",
            Protocol::MergedBoxes => "merged",
        }
    }
}

/// Formats a threshold the way report keys spell it (`0.50`).
pub fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

/// Key of the optional COCO-style threshold sweep. Not part of CMAP proper.
pub const MEAN_RANGE_KEY: &str = "mean_0.50_0.95";

/// Thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Greedy confidence-ordered matching of one sample's predictions.
///
/// Verdicts come back in prediction-list order.
pub fn greedy_match_sample(
    gt: &PegSampleGT,
    preds: &PegPredictionSet,
    threshold: f64,
) -> Result<Vec<Verdict>, MetricsError> {
    if gt.sample_id() != preds.sample_id {
        return Err(MetricsError::SampleMismatch {
            gt: gt.sample_id().to_owned(),
            pred: preds.sample_id.clone(),
        });
    }
    let targets: Vec<(&BoxXYXY, &PhraseSpans)> = gt.targets().collect();
    let mut order: Vec<usize> = (0..preds.predictions.len()).collect();
    // Stable sort keeps input order among equal confidences.
    order.sort_by(|&a, &b| {
        preds.predictions[b]
            .confidence
            .total_cmp(&preds.predictions[a].confidence)
    });
    let mut taken = vec![false; targets.len()];
    let mut is_tp = vec![false; preds.predictions.len()];
    for &pi in &order {
        let p = &preds.predictions[pi];
        let mut best: Option<(usize, f64)> = None;
        for (ti, (tb, tp)) in targets.iter().enumerate() {
            if taken[ti] {
                continue;
            }
            let d = dual_iou(&p.bbox, &p.phrase, tb, tp);
            if d >= threshold && best.is_none_or(|(_, bd)| d > bd) {
                best = Some((ti, d));
            }
        }
        if let Some((ti, _)) = best {
            taken[ti] = true;
            is_tp[pi] = true;
        }
    }
    Ok(preds
        .predictions
        .iter()
        .zip(is_tp)
        .enumerate()
        .map(|(i, (p, tp))| Verdict {
            confidence: p.confidence,
            is_tp: tp,
            sample_id: preds.sample_id.clone(),
            pred_index: i,
        })
        .collect())
}

fn sorted_verdicts(verdicts: &[Verdict]) -> Vec<&Verdict> {
    let mut sorted: Vec<&Verdict> = verdicts.iter().collect();
    sorted.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.sample_id.cmp(&b.sample_id))
            .then_with(|| a.pred_index.cmp(&b.pred_index))
    });
    sorted
}

/// Raw (uninterpolated) P-R points, one per verdict, in ranking order.
pub fn pr_curve(verdicts: &[Verdict], n_gt: usize) -> Vec<PRPoint> {
    let mut tp = 0usize;
    sorted_verdicts(verdicts)
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            if v.is_tp {
                tp += 1;
            }
            PRPoint {
                recall: if n_gt == 0 {
                    0.0
                } else {
                    tp as f64 / n_gt as f64
                },
                precision: tp as f64 / (i + 1) as f64,
                confidence: v.confidence,
            }
        })
        .collect()
}

/// All-point interpolated AP over pooled verdicts.
pub fn average_precision(verdicts: &[Verdict], n_gt: usize) -> f64 {
    if n_gt == 0 || verdicts.is_empty() {
        return 0.0;
    }
    let points = pr_curve(verdicts, n_gt);
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, interp) in points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * interp;
        prev_recall = p.recall;
    }
    ap
}

/// Pairs every prediction set with its ground-truth sample. Samples without
/// predictions get an empty set.
fn align<'a>(
    gt: &'a [PegSampleGT],
    preds: &'a [PegPredictionSet],
) -> Result<Vec<(&'a PegSampleGT, Option<&'a PegPredictionSet>)>, MetricsError> {
    let index: HashMap<&str, usize> = gt
        .iter()
        .enumerate()
        .map(|(i, s)| (s.sample_id(), i))
        .collect();
    let mut by_sample: Vec<Option<&PegPredictionSet>> = vec![None; gt.len()];
    for set in preds {
        let i = *index
            .get(set.sample_id.as_str())
            .ok_or_else(|| MetricsError::UnknownSample(set.sample_id.clone()))?;
        by_sample[i] = Some(set);
    }
    Ok(gt.iter().zip(by_sample).collect())
}

fn check_thresholds(thresholds: &[f64]) -> Result<(), MetricsError> {
    match thresholds
        .iter()
        .find(|t| !t.is_finite() || !(0.0..=1.0).contains(*t))
    {
        Some(&t) => Err(MetricsError::InvalidThreshold(t)),
        None => Ok(()),
    }
}

fn sample_verdicts(
    sample: &PegSampleGT,
    preds: Option<&PegPredictionSet>,
    threshold: f64,
) -> Result<Vec<Verdict>, MetricsError> {
    match preds {
        Some(p) => greedy_match_sample(sample, p, threshold),
        None => Ok(Vec::new()),
    }
}

/// CMAP at each threshold, keyed by [`threshold_key`].
pub fn cmap(
    gt: &[PegSampleGT],
    preds: &[PegPredictionSet],
    thresholds: &[f64],
) -> Result<BTreeMap<String, f64>, MetricsError> {
    check_thresholds(thresholds)?;
    let aligned = align(gt, preds)?;
    let n_gt: usize = gt.iter().map(PegSampleGT::n_targets).sum();
    let mut out = BTreeMap::new();
    for &t in thresholds {
        let mut pooled = Vec::new();
        for (s, p) in &aligned {
            pooled.extend(sample_verdicts(s, *p, t)?);
        }
        out.insert(threshold_key(t), average_precision(&pooled, n_gt));
    }
    Ok(out)
}

/// Per-phrase predictions after association, for a single sample.
fn associate<'a>(
    sample: &PegSampleGT,
    preds: Option<&'a PegPredictionSet>,
) -> Vec<Vec<(f64, usize, &'a BoxXYXY)>> {
    let mut per_phrase = vec![Vec::new(); sample.pairs.len()];
    let Some(set) = preds else {
        return per_phrase;
    };
    for (pi, p) in set.predictions.iter().enumerate() {
        if p.phrase.is_empty() {
            continue;
        }
        let mut best: Option<(usize, f64, usize)> = None;
        for (gi, pair) in sample.pairs.iter().enumerate() {
            let iou = phrase_iou(&p.phrase, &pair.phrase);
            let first = pair.phrase.first_token().unwrap_or(usize::MAX);
            let better = match best {
                None => true,
                Some((_, bi, bf)) => iou > bi || (iou == bi && first < bf),
            };
            if better {
                best = Some((gi, iou, first));
            }
        }
        if let Some((gi, iou, _)) = best {
            if iou > 0.0 {
                per_phrase[gi].push((p.confidence, pi, &p.bbox));
            }
        }
    }
    for list in &mut per_phrase {
        list.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    }
    per_phrase
}

/// Number of phrases of one sample recalled within the top `k`.
fn recalled_in_sample(
    sample: &PegSampleGT,
    preds: Option<&PegPredictionSet>,
    k: usize,
    box_threshold: f64,
    protocol: Protocol,
) -> usize {
    let associated = associate(sample, preds);
    sample
        .pairs
        .iter()
        .zip(&associated)
        .filter(|(pair, cands)| {
            let merged;
            let gt_boxes: &[BoxXYXY] = match protocol {
                Protocol::AnyBox => &pair.boxes,
                Protocol::MergedBoxes => {
                    merged = [merge_boxes(&pair.boxes).expect("pairs have boxes")];
                    &merged
                }
            };
            cands
                .iter()
                .take(k)
                .any(|(_, _, pb)| gt_boxes.iter().any(|gb| box_iou(pb, gb) >= box_threshold))
        })
        .count()
}

fn recall_at_k(
    gt: &[PegSampleGT],
    preds: &[PegPredictionSet],
    k: usize,
    box_threshold: f64,
    protocol: Protocol,
) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    check_thresholds(&[box_threshold])?;
    let aligned = align(gt, preds)?;
    let n_phrases: usize = gt.iter().map(|s| s.pairs.len()).sum();
    if n_phrases == 0 {
        return Ok(0.0);
    }
    let hits: usize = aligned
        .iter()
        .map(|(s, p)| recalled_in_sample(s, *p, k, box_threshold, protocol))
        .sum();
    Ok(hits as f64 / n_phrases as f64)
}

/// Each prediction with a non-empty phrase is attached to the ground-truth
/// phrase of highest phrase IOU (ties: lowest first token; zero overlap:
/// not attached). A phrase is recalled when one of its top-`k` predictions
/// by confidence reaches `box_threshold` box IOU with any of its boxes.
pub fn recall_at_k_anybox(
    gt: &[PegSampleGT],
    preds: &[PegPredictionSet],
    k: usize,
    box_threshold: f64,
) -> Result<f64, MetricsError> {
    recall_at_k(gt, preds, k, box_threshold, Protocol::AnyBox)
}

/// As [`recall_at_k_anybox`], with each phrase's boxes merged into their hull.
pub fn recall_at_k_merged(
    gt: &[PegSampleGT],
    preds: &[PegPredictionSet],
    k: usize,
    box_threshold: f64,
) -> Result<f64, MetricsError> {
    recall_at_k(gt, preds, k, box_threshold, Protocol::MergedBoxes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub thresholds: Vec<f64>,
    pub ks: Vec<usize>,
    pub protocols: Vec<Protocol>,
    pub box_threshold: f64,
    /// Adds the mean over 0.50..0.95 under [`MEAN_RANGE_KEY`].
    pub mean_range: bool,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            thresholds: vec![0.5],
            ks: vec![1, 5, 10],
            protocols: vec![Protocol::AnyBox, Protocol::MergedBoxes],
            box_threshold: 0.5,
            mean_range: false,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub cmap: BTreeMap<String, f64>,
    /// Keyed `"<protocol>@<k>"`, e.g. `anybox@1`.
    pub recall_at_k: BTreeMap<String, f64>,
    /// Flattened (box, phrase) targets.
    pub n_gt_pairs: usize,
    pub n_predictions: usize,
    pub pr_curves: BTreeMap<String, Vec<PRPoint>>,
}

struct SampleResult {
    verdicts: Vec<Vec<Verdict>>,
    recalled: Vec<usize>,
}

/// Full evaluation. Per-sample work runs on `options.threads` workers; the
/// pooled reduction is sequential, so the report does not depend on the
/// thread count.
pub fn evaluate(
    gt: &[PegSampleGT],
    preds: &[PegPredictionSet],
    options: &EvalOptions,
) -> Result<EvalReport, MetricsError> {
    if options.ks.contains(&0) {
        return Err(MetricsError::InvalidK);
    }
    check_thresholds(&options.thresholds)?;
    check_thresholds(&[options.box_threshold])?;
    let aligned = align(gt, preds)?;

    let mut thresholds = options.thresholds.clone();
    let sweep = coco_thresholds();
    if options.mean_range {
        thresholds.extend(&sweep);
    }
    let recall_keys: Vec<(Protocol, usize)> = options
        .protocols
        .iter()
        .flat_map(|&p| options.ks.iter().map(move |&k| (p, k)))
        .collect();

    let per_sample = |(s, p): &(&PegSampleGT, Option<&PegPredictionSet>)| {
        let verdicts = thresholds
            .iter()
            .map(|&t| sample_verdicts(s, *p, t))
            .collect::<Result<Vec<_>, _>>()?;
        let recalled = recall_keys
            .iter()
            .map(|&(proto, k)| recalled_in_sample(s, *p, k, options.box_threshold, proto))
            .collect();
        Ok::<_, MetricsError>(SampleResult { verdicts, recalled })
    };

    let results: Vec<SampleResult> = if options.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.threads)
            .build()
            .map_err(|e| MetricsError::ThreadPool(e.to_string()))?;
        pool.install(|| aligned.par_iter().map(per_sample).collect::<Result<_, _>>())?
    } else {
        aligned.iter().map(per_sample).collect::<Result<_, _>>()?
    };

    let n_gt: usize = gt.iter().map(PegSampleGT::n_targets).sum();
    let n_phrases: usize = gt.iter().map(|s| s.pairs.len()).sum();
    let mut cmap = BTreeMap::new();
    let mut pr_curves = BTreeMap::new();
    let mut sweep_aps = Vec::new();
    for (ti, &t) in thresholds.iter().enumerate() {
        let pooled: Vec<Verdict> = results
            .iter()
            .flat_map(|r| r.verdicts[ti].iter().cloned())
            .collect();
        let ap = average_precision(&pooled, n_gt);
        if ti < options.thresholds.len() {
            cmap.insert(threshold_key(t), ap);
            pr_curves.insert(threshold_key(t), pr_curve(&pooled, n_gt));
        } else {
            sweep_aps.push(ap);
        }
    }
    if options.mean_range {
        cmap.insert(
            MEAN_RANGE_KEY.to_owned(),
            sweep_aps.iter().sum::<f64>() / sweep_aps.len() as f64,
        );
    }

    let mut recall = BTreeMap::new();
    for (ki, &(proto, k)) in recall_keys.iter().enumerate() {
        let hits: usize = results.iter().map(|r| r.recalled[ki]).sum();
        let value = if n_phrases == 0 {
            0.0
        } else {
            hits as f64 / n_phrases as f64
        };
        recall.insert(format!("{}@{}", proto.key(), k), value);
    }

    Ok(EvalReport {
        cmap,
        recall_at_k: recall,
        n_gt_pairs: n_gt,
        n_predictions: preds.iter().map(|s| s.predictions.len()).sum(),
        pr_curves,
    })
}

fn write_map(out: &mut String, map: &BTreeMap<String, f64>) {
    out.push('{');
    for (i, (k, v)) in map.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&serde_json::to_string(k).expect("string keys serialize"));
        out.push_str(&format!(": {v:.6}"));
    }
    out.push('}');
}

impl EvalReport {
    /// Report JSON with sorted keys and six-decimal numbers.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{\"cmap\": ");
        write_map(&mut out, &self.cmap);
        out.push_str(&format!(
            ", \"n_gt_pairs\": {}, \"n_predictions\": {}, \"recall\": ",
            self.n_gt_pairs, self.n_predictions
        ));
        write_map(&mut out, &self.recall_at_k);
        out.push_str("}\n");
        out
    }
}

/// CSV with header `recall,precision,confidence`, one row per point.
pub fn write_pr_csv<W: Write>(points: &[PRPoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "recall,precision,confidence")?;
    for p in points {
        writeln!(
            out,
            "{:.6},{:.6},{:.6}",
            p.recall, p.precision, p.confidence
        )?;
    }
    Ok(())
}
