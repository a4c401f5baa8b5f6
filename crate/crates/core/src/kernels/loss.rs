//! Set-prediction losses with analytic gradients.

use super::attention::softmax;
use super::config::KernelConfig;
use super::KernelError;
use crate::assignment::{flatten_targets, hungarian_solve, matching_cost_matrix, Assignment};
use crate::data::PegSampleGT;
use crate::geometry::{cxcywh_to_corners, BoxCXCYWH};
use crate::linalg::{log_sum_exp, Matrix};

/// Target of one query's phrase distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhraseTarget<'a> {
    /// Matched query: indices of the ground-truth phrase tokens.
    Tokens(&'a [usize]),
    /// Unmatched query: the `no_phrase` position (last logit).
    NoPhrase,
}

/// `Σ_{j∈S} −log softmax_j(logits / τ)` and its gradient w.r.t. `logits`.
///
/// For [`PhraseTarget::NoPhrase`] `S` is the last position and both the
/// value and the gradient are scaled by `no_phrase_weight`.
pub fn loss_phrase_contrastive(
    logits: &[f64],
    target: PhraseTarget<'_>,
    config: &KernelConfig,
) -> Result<(f64, Vec<f64>), KernelError> {
    let n = logits.len();
    if n == 0 {
        return Err(KernelError::Shape("no logits".into()));
    }
    let last = [n - 1];
    let (set, weight): (&[usize], f64) = match target {
        PhraseTarget::Tokens(s) => (s, 1.0),
        PhraseTarget::NoPhrase => (&last, config.no_phrase_weight),
    };
    if set.is_empty() {
        return Err(KernelError::EmptyTargetSet);
    }
    if let Some(&index) = set.iter().find(|&&j| j >= n) {
        return Err(KernelError::TargetOutOfRange { index, len: n });
    }
    let tau = config.tau;
    let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
    let lse = log_sum_exp(&scaled);
    let loss: f64 = set.iter().map(|&j| lse - scaled[j]).sum();
    let p = softmax(&scaled);
    let k = set.len() as f64;
    let mut grad: Vec<f64> = p.iter().map(|pi| k * pi / tau).collect();
    for &j in set {
        grad[j] -= 1.0 / tau;
    }
    for g in &mut grad {
        *g *= weight;
    }
    Ok((weight * loss, grad))
}

fn kink_sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// GIOU of two corner boxes and its gradient w.r.t. the first one's corners.
///
/// At `min`/`max` ties the derivative is attributed to the first box, which
/// makes the gradient exactly 0 when the boxes coincide.
pub(crate) fn giou_with_grad(p: &[f64; 4], g: &[f64; 4]) -> (f64, [f64; 4]) {
    let area_p = (p[2] - p[0]) * (p[3] - p[1]);
    let area_g = (g[2] - g[0]) * (g[3] - g[1]);
    let iw = p[2].min(g[2]) - p[0].max(g[0]);
    let ih = p[3].min(g[3]) - p[1].max(g[1]);
    let overlap = iw > 0.0 && ih > 0.0;
    let inter = if overlap { iw * ih } else { 0.0 };
    let union = area_p + area_g - inter;
    let cw = p[2].max(g[2]) - p[0].min(g[0]);
    let ch = p[3].max(g[3]) - p[1].min(g[1]);
    let hull = cw * ch;
    let giou = inter / union - (hull - union) / hull;

    let (pw, ph) = (p[2] - p[0], p[3] - p[1]);
    let d_area = [-ph, -pw, ph, pw];
    let mut d_inter = [0.0; 4];
    if overlap {
        if p[0] >= g[0] {
            d_inter[0] = -ih;
        }
        if p[1] >= g[1] {
            d_inter[1] = -iw;
        }
        if p[2] <= g[2] {
            d_inter[2] = ih;
        }
        if p[3] <= g[3] {
            d_inter[3] = iw;
        }
    }
    let mut d_hull = [0.0; 4];
    if p[0] <= g[0] {
        d_hull[0] = -ch;
    }
    if p[1] <= g[1] {
        d_hull[1] = -cw;
    }
    if p[2] >= g[2] {
        d_hull[2] = ch;
    }
    if p[3] >= g[3] {
        d_hull[3] = cw;
    }
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d_union = d_area[i] - d_inter[i];
        grad[i] = d_inter[i] / union - inter * d_union / (union * union) + d_union / hull
            - union * d_hull[i] / (hull * hull);
    }
    (giou, grad)
}

/// Chain rule from corner gradients to `(cx, cy, w, h)`.
pub(crate) fn corners_to_center_grad(d: [f64; 4]) -> [f64; 4] {
    [
        d[0] + d[2],
        d[1] + d[3],
        0.5 * (d[2] - d[0]),
        0.5 * (d[3] - d[1]),
    ]
}

/// `loss_coef_bbox · L1 + loss_coef_giou · (1 − GIOU)` and its gradient
/// w.r.t. `pred`. Subgradient 0 is used at `|·|` kinks.
pub fn loss_box(
    pred: &BoxCXCYWH,
    gt: &BoxCXCYWH,
    config: &KernelConfig,
) -> Result<(f64, [f64; 4]), KernelError> {
    for b in [pred, gt] {
        if !(b.w > 0.0 && b.h > 0.0) || !b.to_array().iter().all(|v| v.is_finite()) {
            return Err(KernelError::DegenerateBox(b.to_array()));
        }
    }
    let (pa, ga) = (pred.to_array(), gt.to_array());
    let l1: f64 = pa.iter().zip(&ga).map(|(a, b)| (a - b).abs()).sum();
    let (giou, d_corners) = giou_with_grad(&cxcywh_to_corners(pa), &cxcywh_to_corners(ga));
    let d_giou = corners_to_center_grad(d_corners);
    let mut grad = [0.0; 4];
    for i in 0..4 {
        grad[i] =
            config.loss_coef_bbox * kink_sign(pa[i] - ga[i]) - config.loss_coef_giou * d_giou[i];
    }
    Ok((
        config.loss_coef_bbox * l1 + config.loss_coef_giou * (1.0 - giou),
        grad,
    ))
}

/// Decoder outputs the losses are taken on.
#[derive(Debug, Clone, Copy)]
pub struct QueryOutputs<'a> {
    /// `[n_queries × 4]` cxcywh.
    pub anchors: &'a Matrix,
    /// `[n_queries × (n_text + 1)]` raw similarities.
    pub phrase_logits: &'a Matrix,
}

impl QueryOutputs<'_> {
    fn boxes(&self) -> Vec<BoxCXCYWH> {
        (0..self.anchors.rows())
            .map(|q| {
                let r = self.anchors.row(q);
                BoxCXCYWH::from_array([r[0], r[1], r[2], r[3]])
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Σ of [`loss_box`] over matched queries.
    pub box_loss: f64,
    /// Phrase terms after `loss_coef_phrase` (matched and `no_phrase`).
    pub phrase_loss: f64,
    pub grad_anchors: Matrix,
    pub grad_logits: Matrix,
}

/// Bipartite matching of queries to the sample's flattened targets.
pub fn match_queries(
    outputs: QueryOutputs<'_>,
    gt: &PegSampleGT,
    config: &KernelConfig,
) -> Result<Assignment, KernelError> {
    let targets = flatten_targets(gt);
    let cost = matching_cost_matrix(
        &outputs.boxes(),
        outputs.phrase_logits,
        &targets,
        config.cost_weights,
        config.tau,
    )?;
    Ok(hungarian_solve(&cost)?)
}

/// Box and phrase losses of matched queries plus the down-weighted
/// `no_phrase` loss of the rest, under a given assignment.
pub fn total_loss(
    outputs: QueryOutputs<'_>,
    gt: &PegSampleGT,
    config: &KernelConfig,
    assignment: &Assignment,
) -> Result<LossBreakdown, KernelError> {
    let nq = outputs.anchors.rows();
    if outputs.phrase_logits.rows() != nq || outputs.anchors.cols() != 4 {
        return Err(KernelError::Shape("query outputs".into()));
    }
    if outputs.phrase_logits.cols() != gt.n_text() + 1 {
        return Err(KernelError::Shape(format!(
            "{} logit columns for {} text tokens",
            outputs.phrase_logits.cols(),
            gt.n_text()
        )));
    }
    let targets = flatten_targets(gt);
    let boxes = outputs.boxes();
    let mut grad_anchors = Matrix::zeros(nq, 4);
    let mut grad_logits = Matrix::zeros(nq, outputs.phrase_logits.cols());
    let (mut box_loss, mut phrase_loss) = (0.0, 0.0);
    for (q, target) in assignment.target_of(nq).into_iter().enumerate() {
        let phrase_target = match target {
            Some(g) => {
                let t = targets.get(g).ok_or(KernelError::TargetOutOfRange {
                    index: g,
                    len: targets.len(),
                })?;
                let (l, d) = loss_box(&boxes[q], &t.bbox, config)?;
                box_loss += l;
                grad_anchors.row_mut(q).copy_from_slice(&d);
                PhraseTarget::Tokens(&t.tokens)
            }
            None => PhraseTarget::NoPhrase,
        };
        let (l, d) = loss_phrase_contrastive(outputs.phrase_logits.row(q), phrase_target, config)?;
        phrase_loss += config.loss_coef_phrase * l;
        for (o, v) in grad_logits.row_mut(q).iter_mut().zip(d) {
            *o = config.loss_coef_phrase * v;
        }
    }
    Ok(LossBreakdown {
        total: box_loss + phrase_loss,
        box_loss,
        phrase_loss,
        grad_anchors,
        grad_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BoxXYXY, GroundingPair, PhraseSpans, TokenizedCaption};
    use crate::kernels::gradcheck::fd_check_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> KernelConfig {
        KernelConfig::default()
    }

    #[test]
    fn phrase_loss_examples() {
        let c = cfg();
        let (l, _) = loss_phrase_contrastive(&[0.3, 0.3], PhraseTarget::Tokens(&[0]), &c).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let (l, _) = loss_phrase_contrastive(&[0.3, 0.3], PhraseTarget::NoPhrase, &c).unwrap();
        assert!((l - 0.05 * 2f64.ln()).abs() < 1e-12);
        let (l, _) =
            loss_phrase_contrastive(&[5.0, -5.0, -5.0], PhraseTarget::Tokens(&[0]), &c).unwrap();
        assert!(l < 1e-50);
        assert!(matches!(
            loss_phrase_contrastive(&[0.0, 0.0], PhraseTarget::Tokens(&[]), &c),
            Err(KernelError::EmptyTargetSet)
        ));
        assert!(matches!(
            loss_phrase_contrastive(&[0.0, 0.0], PhraseTarget::Tokens(&[2]), &c),
            Err(KernelError::TargetOutOfRange { index: 2, len: 2 })
        ));
    }

    #[test]
    fn phrase_gradient_matches_fd() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.gen_range(2..8);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let set: Vec<usize> = (0..n - 1).filter(|_| rng.gen_bool(0.5)).collect();
            let target = if set.is_empty() {
                PhraseTarget::NoPhrase
            } else {
                PhraseTarget::Tokens(&set)
            };
            let f = |p: &[f64]| loss_phrase_contrastive(p, target, &c).unwrap();
            let r = fd_check_gradient(f, &x, 1e-6, 1e-6).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn box_loss_zero_at_target() {
        let b = BoxCXCYWH::new(0.4, 0.5, 0.2, 0.3).unwrap();
        let (l, g) = loss_box(&b, &b, &cfg()).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, [0.0; 4]);
        let bad = BoxCXCYWH::from_array([0.4, 0.5, 0.0, 0.3]);
        assert!(matches!(
            loss_box(&bad, &b, &cfg()),
            Err(KernelError::DegenerateBox(_))
        ));
    }

    #[test]
    fn box_gradient_matches_fd() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rand_box = |rng: &mut ChaCha8Rng| {
            [
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.05..0.5),
            ]
        };
        for _ in 0..100 {
            let p = rand_box(&mut rng);
            let g = BoxCXCYWH::from_array(rand_box(&mut rng));
            let f = |x: &[f64]| {
                let (l, d) =
                    loss_box(&BoxCXCYWH::from_array([x[0], x[1], x[2], x[3]]), &g, &c).unwrap();
                (l, d.to_vec())
            };
            let r = fd_check_gradient(f, &p, 1e-6, 1e-4).unwrap();
            assert!(r.passed, "{p:?} vs {g:?}: {r:?}");
        }
    }

    fn sample() -> PegSampleGT {
        let caption =
            TokenizedCaption::new("s", vec!["a".into(), "red".into(), "cup".into()]).unwrap();
        let pair = GroundingPair::new(
            PhraseSpans::new(&[(1, 3)], 3).unwrap(),
            vec![BoxXYXY::new(0.1, 0.2, 0.5, 0.6).unwrap()],
        )
        .unwrap();
        PegSampleGT {
            caption,
            pairs: vec![pair],
        }
    }

    #[test]
    fn total_loss_components() {
        let gt = sample();
        let c = cfg();
        let anchors = Matrix::from_rows(&[vec![0.3, 0.4, 0.4, 0.4], vec![0.6, 0.6, 0.1, 0.1]]);
        let logits = Matrix::from_rows(&[vec![-0.1, 0.2, 0.25, 0.0], vec![0.0, 0.1, 0.0, 0.3]]);
        let out = QueryOutputs {
            anchors: &anchors,
            phrase_logits: &logits,
        };
        let a = match_queries(out, &gt, &c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        let base = total_loss(out, &gt, &c, &a).unwrap();
        assert!(base.box_loss < 1e-12, "anchor 0 equals the gt box");
        assert_eq!(base.grad_anchors.row(1), &[0.0; 4]);

        let doubled = KernelConfig {
            loss_coef_phrase: 4.0,
            ..c.clone()
        };
        let d = total_loss(out, &gt, &doubled, &a).unwrap();
        assert_eq!(d.phrase_loss, 2.0 * base.phrase_loss);

        let none = PegSampleGT {
            pairs: Vec::new(),
            ..gt.clone()
        };
        let a0 = match_queries(out, &none, &c).unwrap();
        assert!(a0.pairs.is_empty());
        let l0 = total_loss(out, &none, &c, &a0).unwrap();
        assert_eq!(l0.box_loss, 0.0);
        let expected: f64 = (0..2)
            .map(|q| {
                2.0 * loss_phrase_contrastive(logits.row(q), PhraseTarget::NoPhrase, &c)
                    .unwrap()
                    .0
            })
            .sum();
        assert!((l0.total - expected).abs() < 1e-12);
    }

    #[test]
    fn ground_truth_outputs_are_a_local_minimum() {
        let gt = sample();
        let c = cfg();
        let anchors = Matrix::from_rows(&[vec![0.3, 0.4, 0.4, 0.4], vec![0.6, 0.6, 0.1, 0.1]]);
        let logits = Matrix::from_rows(&[vec![-1.0, 1.0, 1.0, -1.0], vec![-1.0, -1.0, -1.0, 1.0]]);
        let eval = |a: &Matrix, l: &Matrix| {
            let out = QueryOutputs {
                anchors: a,
                phrase_logits: l,
            };
            let asg = match_queries(out, &gt, &c).unwrap();
            total_loss(out, &gt, &c, &asg).unwrap().total
        };
        let base = eval(&anchors, &logits);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let mut a = anchors.clone();
            let mut l = logits.clone();
            for v in a.as_mut_slice() {
                *v += rng.gen_range(-0.01..0.01);
            }
            for v in l.as_mut_slice() {
                *v += rng.gen_range(-0.01..0.01);
            }
            assert!(eval(&a, &l) > base);
        }
    }
}
