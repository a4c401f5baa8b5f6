//! Softmax variants and multi-head attention over row-major matrices.

use super::model::LinearLayout;
use super::KernelError;
use crate::linalg::{dot, Matrix};

/// Plain max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    for v in &mut e {
        *v /= s;
    }
    e
}

/// Softmax restricted to `mask[j] == true`; masked entries are exactly 0.
///
/// With an all-ones mask this performs the same operations as [`softmax`]
/// and so returns bit-identical weights.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>, KernelError> {
    if logits.len() != mask.len() {
        return Err(KernelError::Shape(format!(
            "{} logits, {} mask entries",
            logits.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&b| b) {
        return Err(KernelError::EmptyMask);
    }
    let m = logits
        .iter()
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(x, &keep)| if keep { (x - m).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    for v in &mut e {
        *v /= s;
    }
    Ok(e)
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionLayout {
    pub q: LinearLayout,
    pub k: LinearLayout,
    pub v: LinearLayout,
    pub o: LinearLayout,
}

/// Result of one attention call. `weights[h]` is `[n_queries × n_keys]` for
/// head `h` and is only filled when tracing.
pub struct AttentionOutput {
    pub out: Matrix,
    pub weights: Vec<Matrix>,
}

/// Multi-head scaled dot-product attention.
///
/// `key_masks[i]`, when present, restricts query row `i` to keys with a set
/// bit; `None` rows go through the unmasked [`softmax`].
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    params: &[f64],
    layout: &AttentionLayout,
    n_heads: usize,
    query_in: &Matrix,
    key_in: &Matrix,
    value_in: &Matrix,
    key_masks: &[Option<&[bool]>],
    trace: bool,
) -> Result<AttentionOutput, KernelError> {
    let q = layout.q.apply_rows(params, query_in);
    let k = layout.k.apply_rows(params, key_in);
    let v = layout.v.apply_rows(params, value_in);
    attend(params, &layout.o, n_heads, &q, &k, &v, key_masks, trace)
}

/// Attention on already projected queries, keys and values, followed by
/// the output projection `o`.
#[allow(clippy::too_many_arguments)]
pub fn attend(
    params: &[f64],
    o: &LinearLayout,
    n_heads: usize,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    key_masks: &[Option<&[bool]>],
    trace: bool,
) -> Result<AttentionOutput, KernelError> {
    let d = q.cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (nq, nk) = (q.rows(), k.rows());
    let mut mixed = Matrix::zeros(nq, d);
    let mut weights = Vec::new();
    let mut scores = vec![0.0; nk];
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut head_weights = if trace {
            Matrix::zeros(nq, nk)
        } else {
            Matrix::zeros(0, 0)
        };
        for i in 0..nq {
            let qi = &q.row(i)[cols.clone()];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot(qi, &k.row(j)[cols.clone()]) * scale;
            }
            let w = match key_masks.get(i).copied().flatten() {
                Some(mask) => masked_softmax(&scores, mask)?,
                None => softmax(&scores),
            };
            let out = &mut mixed.row_mut(i)[cols.clone()];
            for (j, &wj) in w.iter().enumerate() {
                if wj == 0.0 {
                    continue;
                }
                for (o, x) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += wj * x;
                }
            }
            if trace {
                head_weights.row_mut(i).copy_from_slice(&w);
            }
        }
        if trace {
            weights.push(head_weights);
        }
    }
    Ok(AttentionOutput {
        out: o.apply_rows(params, &mixed),
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let w = softmax(&[1.0, 2.0, 3.0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(
            masked_softmax(&[1.0, 2.0, 3.0], &[true; 3]).unwrap(),
            w,
            "all-ones mask must be bitwise identical"
        );
        assert_eq!(
            masked_softmax(&[4.0, -1.0, 2.0], &[false, true, false]).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        assert_eq!(
            masked_softmax(&[0.0, 0.0, 0.0], &[true, true, false]).unwrap(),
            vec![0.5, 0.5, 0.0]
        );
        assert!(matches!(
            masked_softmax(&[0.0, 0.0], &[false, false]),
            Err(KernelError::EmptyMask)
        ));
    }

    #[test]
    fn masked_softmax_stable_for_large_logits() {
        let w = masked_softmax(&[1000.0, 999.0, 5000.0], &[true, true, false]).unwrap();
        assert!(w.iter().all(|v| v.is_finite()));
        assert_eq!(w[2], 0.0);
        assert!((w[0] + w[1] - 1.0).abs() < 1e-15);
    }
}
