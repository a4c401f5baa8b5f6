//! Slow reference implementations of CMAP, written without reusing the
//! metric code paths.
//!
//! Matching is found by enumerating every injective partial assignment of
//! predictions to targets and keeping the lexicographically best one in
//! ranking order. The P-R curve is integrated point by point with the
//! envelope taken as an explicit maximum over the tail.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{
    BoxXYXY, GroundingPair, PegPrediction, PegPredictionSet, PegSampleGT, PhraseSpans,
    TokenizedCaption,
};

fn oracle_box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn oracle_phrase_iou(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

fn token_set(p: &PhraseSpans) -> BTreeSet<usize> {
    p.spans().iter().flat_map(|&(s, e)| s..e).collect()
}

/// One target choice per ranked prediction. Compared element by element:
/// matched beats unmatched, then higher dual IOU, then lower target index.
type Key = Vec<Option<(f64, usize)>>;

fn better(a: &Key, b: &Key) -> bool {
    for (x, y) in a.iter().zip(b) {
        match (x, y) {
            (Some(_), None) => return true,
            (None, Some(_)) => return false,
            (None, None) => {}
            (Some((da, ta)), Some((db, tb))) => {
                if da != db {
                    return da > db;
                }
                if ta != tb {
                    return ta < tb;
                }
            }
        }
    }
    false
}

fn enumerate(
    rank: usize,
    dual: &[Vec<f64>],
    threshold: f64,
    used: &mut Vec<bool>,
    current: &mut Key,
    best: &mut Option<Key>,
) {
    if rank == dual.len() {
        if best.as_ref().is_none_or(|b| better(current, b)) {
            *best = Some(current.clone());
        }
        return;
    }
    current.push(None);
    enumerate(rank + 1, dual, threshold, used, current, best);
    current.pop();
    for t in 0..used.len() {
        if !used[t] && dual[rank][t] >= threshold {
            used[t] = true;
            current.push(Some((dual[rank][t], t)));
            enumerate(rank + 1, dual, threshold, used, current, best);
            current.pop();
            used[t] = false;
        }
    }
}

/// `(confidence, sample_id, prediction index, is_tp)` for every prediction
/// of one sample.
fn oracle_verdicts(
    gt: &PegSampleGT,
    set: &PegPredictionSet,
    threshold: f64,
) -> Vec<(f64, String, usize, bool)> {
    let mut targets = Vec::new();
    for pair in &gt.pairs {
        for b in &pair.boxes {
            targets.push((b.to_array(), token_set(&pair.phrase)));
        }
    }
    // Ranking by selection: repeatedly take the highest confidence, earliest
    // index first among equals.
    let n = set.predictions.len();
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut ranked = Vec::with_capacity(n);
    while !remaining.is_empty() {
        let mut pick = 0;
        for (k, &i) in remaining.iter().enumerate() {
            if set.predictions[i].confidence > set.predictions[remaining[pick]].confidence {
                pick = k;
            }
        }
        ranked.push(remaining.remove(pick));
    }
    let dual: Vec<Vec<f64>> = ranked
        .iter()
        .map(|&i| {
            let p = &set.predictions[i];
            let (pb, pt) = (p.bbox.to_array(), token_set(&p.phrase));
            targets
                .iter()
                .map(|(tb, tt)| oracle_box_iou(pb, *tb).sqrt() * oracle_phrase_iou(&pt, tt))
                .collect()
        })
        .collect();
    let mut best = None;
    enumerate(
        0,
        &dual,
        threshold,
        &mut vec![false; targets.len()],
        &mut Vec::new(),
        &mut best,
    );
    let best = best.unwrap_or_default();
    ranked
        .iter()
        .zip(best)
        .map(|(&i, choice)| {
            (
                set.predictions[i].confidence,
                set.sample_id.clone(),
                i,
                choice.is_some(),
            )
        })
        .collect()
}

/// Reference CMAP at one threshold. Prediction sets whose id is not in
/// `gt` are ignored.
pub fn oracle_cmap(gt: &[PegSampleGT], preds: &[PegPredictionSet], threshold: f64) -> f64 {
    let n_gt: usize = gt
        .iter()
        .map(|s| s.pairs.iter().map(|p| p.boxes.len()).sum::<usize>())
        .sum();
    let mut pooled = Vec::new();
    for set in preds {
        if let Some(s) = gt.iter().find(|s| s.caption.sample_id == set.sample_id) {
            pooled.extend(oracle_verdicts(s, set, threshold));
        }
    }
    if n_gt == 0 || pooled.is_empty() {
        return 0.0;
    }
    pooled.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then_with(|| a.1.cmp(&b.1))
            .then_with(|| a.2.cmp(&b.2))
    });
    let precision: Vec<f64> = pooled
        .iter()
        .enumerate()
        .scan(0usize, |tp, (i, v)| {
            *tp += v.3 as usize;
            Some(*tp as f64 / (i + 1) as f64)
        })
        .collect();
    // Recall only moves at true positives, by exactly 1 / n_gt.
    let mut sum = 0.0;
    for (i, v) in pooled.iter().enumerate() {
        if v.3 {
            sum += precision[i..].iter().copied().fold(0.0, f64::max);
        }
    }
    sum / n_gt as f64
}

fn random_box<R: Rng>(rng: &mut R) -> BoxXYXY {
    let w = rng.gen_range(0.05..0.6);
    let h = rng.gen_range(0.05..0.6);
    let x1 = rng.gen_range(0.0..1.0 - w);
    let y1 = rng.gen_range(0.0..1.0 - h);
    BoxXYXY::new(x1, y1, x1 + w, y1 + h).expect("valid by construction")
}

fn jitter<R: Rng>(rng: &mut R, b: &BoxXYXY, scale: f64) -> BoxXYXY {
    let mut c = b.to_array();
    for v in &mut c {
        *v = (*v + rng.gen_range(-scale..=scale)).clamp(0.0, 1.0);
    }
    if c[2] <= c[0] {
        c[2] = (c[0] + 0.01).min(1.0);
        c[0] = c[2] - 0.01;
    }
    if c[3] <= c[1] {
        c[3] = (c[1] + 0.01).min(1.0);
        c[1] = c[3] - 0.01;
    }
    BoxXYXY::from_array(c).expect("valid by construction")
}

fn random_phrase<R: Rng>(rng: &mut R, n_text: usize) -> PhraseSpans {
    let start = rng.gen_range(0..n_text);
    let end = rng.gen_range(start + 1..=n_text.min(start + 3));
    PhraseSpans::normalized(&[(start, end)])
}

/// A small random dataset: up to `max_samples` samples, up to `max_preds`
/// predictions per sample. Predictions mix near-copies of targets with
/// random boxes and phrases; confidences come from a coarse grid so ties
/// occur.
pub fn random_mini_dataset<R: Rng>(
    rng: &mut R,
    max_samples: usize,
    max_preds: usize,
) -> (Vec<PegSampleGT>, Vec<PegPredictionSet>) {
    let n_samples = rng.gen_range(1..=max_samples);
    let mut gt = Vec::with_capacity(n_samples);
    let mut preds = Vec::new();
    for s in 0..n_samples {
        let n_text = rng.gen_range(3..=8);
        let tokens = (0..n_text).map(|i| format!("w{i}")).collect();
        let caption = TokenizedCaption::new(format!("s{s}"), tokens).expect("non-empty id");
        let mut pairs = Vec::new();
        let mut free: Vec<usize> = (0..n_text).collect();
        free.shuffle(rng);
        for _ in 0..rng.gen_range(0..=3usize) {
            let Some(t) = free.pop() else { break };
            let phrase = if rng.gen_bool(0.3) && t + 1 < n_text && free.contains(&(t + 1)) {
                free.retain(|&x| x != t + 1);
                PhraseSpans::normalized(&[(t, t + 2)])
            } else {
                PhraseSpans::normalized(&[(t, t + 1)])
            };
            let boxes = (0..rng.gen_range(1..=2)).map(|_| random_box(rng)).collect();
            pairs.push(GroundingPair::new(phrase, boxes).expect("non-empty"));
        }
        let sample = PegSampleGT { caption, pairs };
        if rng.gen_bool(0.85) {
            let targets: Vec<(BoxXYXY, PhraseSpans)> =
                sample.targets().map(|(b, p)| (*b, p.clone())).collect();
            let mut predictions = Vec::new();
            for _ in 0..rng.gen_range(0..=max_preds) {
                let (bbox, phrase) = if !targets.is_empty() && rng.gen_bool(0.7) {
                    let (b, p) = &targets[rng.gen_range(0..targets.len())];
                    let phrase = if rng.gen_bool(0.8) {
                        p.clone()
                    } else {
                        random_phrase(rng, n_text)
                    };
                    let scale = rng.gen_range(0.0..0.15);
                    (jitter(rng, b, scale), phrase)
                } else {
                    (random_box(rng), random_phrase(rng, n_text))
                };
                let confidence = rng.gen_range(1..=10) as f64 / 10.0;
                predictions.push(PegPrediction::new(bbox, phrase, confidence).expect("in range"));
            }
            preds.push(PegPredictionSet {
                sample_id: sample.sample_id().to_string(),
                predictions,
            });
        }
        gt.push(sample);
    }
    preds.shuffle(rng);
    (gt, preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::cmap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_trace_tp_fp_tp() {
        // 2 targets; ranked TP, FP, TP gives 0.5·1 + 0.5·(2/3).
        let b1 = BoxXYXY::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let b2 = BoxXYXY::new(0.5, 0.5, 1.0, 1.0).unwrap();
        let ph = PhraseSpans::normalized(&[(0, 1)]);
        let gt = vec![PegSampleGT {
            caption: TokenizedCaption::new("a", vec!["x".into(), "y".into()]).unwrap(),
            pairs: vec![GroundingPair::new(ph.clone(), vec![b1, b2]).unwrap()],
        }];
        let wrong = BoxXYXY::new(0.0, 0.6, 0.2, 0.9).unwrap();
        let preds = vec![PegPredictionSet {
            sample_id: "a".into(),
            predictions: vec![
                PegPrediction::new(b1, ph.clone(), 0.9).unwrap(),
                PegPrediction::new(wrong, ph.clone(), 0.8).unwrap(),
                PegPrediction::new(b2, ph, 0.7).unwrap(),
            ],
        }];
        let ap = oracle_cmap(&gt, &preds, 0.5);
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn agrees_with_metrics_on_small_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (gt, preds) = random_mini_dataset(&mut rng, 5, 6);
            for t in [0.3, 0.5, 0.7] {
                let fast = cmap(&gt, &preds, &[t])
                    .unwrap()
                    .into_values()
                    .next()
                    .unwrap();
                let slow = oracle_cmap(&gt, &preds, t);
                assert!((fast - slow).abs() <= 1e-12, "{fast} vs {slow}");
            }
        }
    }
}
