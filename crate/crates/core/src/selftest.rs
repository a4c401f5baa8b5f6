//! Randomized oracle suites behind `peg-eval selftest`.
//!
//! Every suite is deterministic given its seed. A failing trial records the
//! name of the check it tripped.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assignment::{brute_force_assignment, hungarian_solve};
use crate::geometry::{cxcywh_to_corners, BoxCXCYWH};
use crate::kernels::gradcheck::fd_check_gradient;
use crate::kernels::loss::{corners_to_center_grad, giou_with_grad};
use crate::kernels::model::TextGating;
use crate::kernels::{
    loss_box, loss_phrase_contrastive, DecoderModel, KernelConfig, KernelError, Memory,
    PhraseTarget,
};
use crate::linalg::Matrix;
use crate::metrics::cmap;
use crate::oracle::{oracle_cmap, random_mini_dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Suite {
    Hungarian,
    Ap,
    Gradients,
    Attention,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::Hungarian,
        Suite::Ap,
        Suite::Gradients,
        Suite::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Hungarian => "hungarian",
            Suite::Ap => "ap",
            Suite::Gradients => "gradients",
            Suite::Attention => "attention",
        }
    }

    pub fn default_trials(self) -> usize {
        match self {
            Suite::Hungarian => 2000,
            Suite::Ap => 500,
            Suite::Gradients => 100,
            Suite::Attention => 200,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| format!("unknown suite '{s}' (hungarian, ap, gradients, attention)"))
    }
}

/// Signature of [`loss_box`]; swappable so a deliberately broken gradient
/// can be fed through the gradient suite.
pub type BoxLossFn =
    fn(&BoxCXCYWH, &BoxCXCYWH, &KernelConfig) -> Result<(f64, [f64; 4]), KernelError>;

/// [`loss_box`] with the sign of the GIOU gradient term flipped. Negative
/// control for the gradient suite.
pub fn loss_box_flipped_giou_sign(
    pred: &BoxCXCYWH,
    gt: &BoxCXCYWH,
    config: &KernelConfig,
) -> Result<(f64, [f64; 4]), KernelError> {
    let (value, mut grad) = loss_box(pred, gt, config)?;
    let (_, d) = giou_with_grad(&pred.corners(), &cxcywh_to_corners(gt.to_array()));
    for (g, dg) in grad.iter_mut().zip(corners_to_center_grad(d)) {
        *g += 2.0 * config.loss_coef_giou * dg;
    }
    Ok((value, grad))
}

#[derive(Debug, Clone)]
pub struct SelftestOptions {
    pub seed: u64,
    /// Overrides [`Suite::default_trials`].
    pub trials: Option<usize>,
    pub box_loss: BoxLossFn,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: None,
            box_loss: loss_box,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckFailure {
    pub check: &'static str,
    pub trial: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub trials: usize,
    /// Individual assertions evaluated.
    pub checks: usize,
    pub failed: usize,
    /// First few failures, for display.
    pub failures: Vec<CheckFailure>,
    /// `(evaluated, failed)` per check name.
    pub per_check: BTreeMap<&'static str, (usize, usize)>,
    /// Suite-specific tallies, e.g. how many masked keys were inspected.
    pub counters: BTreeMap<&'static str, usize>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failed == 0
    }
}

const KEPT_FAILURES: usize = 10;

struct Recorder {
    checks: usize,
    failed: usize,
    failures: Vec<CheckFailure>,
    per_check: BTreeMap<&'static str, (usize, usize)>,
    counters: BTreeMap<&'static str, usize>,
}

impl Recorder {
    fn new() -> Self {
        Self {
            checks: 0,
            failed: 0,
            failures: Vec::new(),
            per_check: BTreeMap::new(),
            counters: BTreeMap::new(),
        }
    }

    fn count(&mut self, name: &'static str, n: usize) {
        *self.counters.entry(name).or_default() += n;
    }

    fn check(
        &mut self,
        ok: bool,
        name: &'static str,
        trial: usize,
        detail: impl FnOnce() -> String,
    ) {
        self.checks += 1;
        let entry = self.per_check.entry(name).or_default();
        entry.0 += 1;
        if !ok {
            entry.1 += 1;
            self.failed += 1;
            if self.failures.len() < KEPT_FAILURES {
                self.failures.push(CheckFailure {
                    check: name,
                    trial,
                    detail: detail(),
                });
            }
        }
    }

    fn finish(self, suite: Suite, trials: usize) -> SuiteReport {
        SuiteReport {
            suite,
            trials,
            checks: self.checks,
            failed: self.failed,
            failures: self.failures,
            per_check: self.per_check,
            counters: self.counters,
        }
    }
}

pub fn run_suite(suite: Suite, options: &SelftestOptions) -> SuiteReport {
    let trials = options.trials.unwrap_or(suite.default_trials());
    // Each suite draws from its own stream so `--suite x` reproduces the
    // numbers of a full run.
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    rng.set_stream(suite as u64);
    let mut rec = Recorder::new();
    match suite {
        Suite::Hungarian => hungarian_suite(&mut rng, trials, &mut rec),
        Suite::Ap => ap_suite(&mut rng, trials, &mut rec),
        Suite::Gradients => gradient_suite(&mut rng, trials, options.box_loss, &mut rec),
        Suite::Attention => attention_suite(&mut rng, trials, &mut rec),
    }
    rec.finish(suite, trials)
}

pub fn run_all(options: &SelftestOptions) -> Vec<SuiteReport> {
    Suite::ALL.iter().map(|&s| run_suite(s, options)).collect()
}

fn hungarian_suite(rng: &mut ChaCha8Rng, trials: usize, rec: &mut Recorder) {
    for trial in 0..trials {
        let (n, m) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
        let integer = rng.gen_bool(0.3);
        let cost = Matrix::from_vec(
            n,
            m,
            (0..n * m)
                .map(|_| {
                    if integer {
                        rng.gen_range(0..4) as f64
                    } else {
                        rng.gen_range(-10.0..10.0)
                    }
                })
                .collect(),
        );
        let (fast, slow) = match (hungarian_solve(&cost), brute_force_assignment(&cost)) {
            (Ok(f), Ok(s)) => (f, s),
            (f, s) => {
                rec.check(false, "hungarian.solves", trial, || {
                    format!("{f:?} / {s:?}")
                });
                continue;
            }
        };
        rec.check(
            fast.total_cost == slow.total_cost,
            "hungarian.cost_equals_brute_force",
            trial,
            || format!("{n}x{m}: {} vs {}", fast.total_cost, slow.total_cost),
        );
        let mut rows: Vec<usize> = fast.pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<usize> = fast.pairs.iter().map(|p| p.1).collect();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        rec.check(
            fast.pairs.len() == n.min(m) && rows.len() == n.min(m) && cols.len() == n.min(m),
            "hungarian.one_to_one",
            trial,
            || format!("{:?}", fast.pairs),
        );
    }
}

fn ap_suite(rng: &mut ChaCha8Rng, trials: usize, rec: &mut Recorder) {
    for trial in 0..trials {
        let (gt, preds) = random_mini_dataset(rng, 5, 6);
        let t = [0.3, 0.5, 0.7][trial % 3];
        let fast = match cmap(&gt, &preds, &[t]) {
            Ok(map) => map.into_values().next().unwrap_or(f64::NAN),
            Err(e) => {
                rec.check(false, "ap.cmap_runs", trial, || e.to_string());
                continue;
            }
        };
        let slow = oracle_cmap(&gt, &preds, t);
        rec.check(
            (fast - slow).abs() <= 1e-12,
            "ap.cmap_equals_oracle",
            trial,
            || format!("threshold {t}: {fast} vs oracle {slow}"),
        );
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    [
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.05..0.5),
        rng.gen_range(0.05..0.5),
    ]
}

const FD_STEP: f64 = 1e-6;
pub const BOX_GRAD_TOLERANCE: f64 = 1e-4;
pub const PHRASE_GRAD_TOLERANCE: f64 = 1e-6;

fn gradient_suite(rng: &mut ChaCha8Rng, trials: usize, box_loss: BoxLossFn, rec: &mut Recorder) {
    let config = KernelConfig::default();
    for trial in 0..trials {
        let p = random_box(rng);
        let g = BoxCXCYWH::from_array(random_box(rng));
        let f = |x: &[f64]| match box_loss(
            &BoxCXCYWH::from_array([x[0], x[1], x[2], x[3]]),
            &g,
            &config,
        ) {
            Ok((l, d)) => (l, d.to_vec()),
            Err(_) => (f64::NAN, vec![f64::NAN; 4]),
        };
        let r = fd_check_gradient(f, &p, FD_STEP, BOX_GRAD_TOLERANCE);
        rec.check(
            r.as_ref().is_ok_and(|r| r.passed),
            "gradients.loss_box_fd",
            trial,
            || match &r {
                Ok(r) => format!(
                    "rel error {:.3e} at coordinate {} (analytic {:?}, numeric {:?})",
                    r.max_rel_error, r.worst_index, r.analytic, r.numeric
                ),
                Err(e) => e.to_string(),
            },
        );

        let n = rng.gen_range(2..10);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let set: Vec<usize> = (0..n - 1).filter(|_| rng.gen_bool(0.4)).collect();
        let target = if set.is_empty() {
            PhraseTarget::NoPhrase
        } else {
            PhraseTarget::Tokens(&set)
        };
        let f = |x: &[f64]| match loss_phrase_contrastive(x, target, &config) {
            Ok(v) => v,
            Err(_) => (f64::NAN, vec![f64::NAN; x.len()]),
        };
        let r = fd_check_gradient(f, &x, FD_STEP, PHRASE_GRAD_TOLERANCE);
        rec.check(
            r.as_ref().is_ok_and(|r| r.passed),
            "gradients.loss_phrase_fd",
            trial,
            || match &r {
                Ok(r) => format!("rel error {:.3e} at {}", r.max_rel_error, r.worst_index),
                Err(e) => e.to_string(),
            },
        );
    }
}

fn random_config(rng: &mut ChaCha8Rng) -> KernelConfig {
    let d_model = [8, 16][rng.gen_range(0..2)];
    KernelConfig {
        d_model,
        d_proj: [4, 8][rng.gen_range(0..2)],
        d_ffn: [8, 16][rng.gen_range(0..2)],
        n_heads: [1, 2, 4][rng.gen_range(0..3)],
        n_queries: rng.gen_range(1..=4),
        n_layers: rng.gen_range(1..=3),
        ..KernelConfig::default()
    }
}

fn random_memory(rng: &mut ChaCha8Rng, d: usize) -> Memory {
    let n_img = rng.gen_range(1..=6);
    let n_text = rng.gen_range(1..=8);
    let mut features = |rows: usize| {
        Matrix::from_vec(
            rows,
            d,
            (0..rows * d).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        )
    };
    Memory {
        image_features: features(n_img),
        text_features: features(n_text),
    }
}

pub const ROW_SUM_TOLERANCE: f64 = 1e-9;
pub const MASKED_WEIGHT_BOUND: f64 = 1e-12;

fn attention_suite(rng: &mut ChaCha8Rng, trials: usize, rec: &mut Recorder) {
    for trial in 0..trials {
        let config = random_config(rng);
        let model = match DecoderModel::new(config.clone()) {
            Ok(m) => m,
            Err(e) => {
                rec.check(false, "attention.model_builds", trial, || e.to_string());
                continue;
            }
        };
        let params = model.init_params(rng.gen());
        let memory = random_memory(rng, config.d_model);
        let (nq, n_img) = (config.n_queries, memory.n_img());

        let mut state = model.initial_state(&params, memory.n_text());
        for layer in 0..config.n_layers {
            let (next, trace) = match model.layer_forward(
                &params,
                layer,
                &state,
                &memory,
                TextGating::Masked,
                true,
            ) {
                Ok((s, Some(t))) => (s, t),
                Ok((_, None)) => unreachable!("trace requested"),
                Err(e) => {
                    rec.check(false, "attention.forward_runs", trial, || e.to_string());
                    break;
                }
            };

            let rows_ok = trace
                .self_weights
                .iter()
                .chain(&trace.cross_weights)
                .flat_map(|w| w.iter_rows())
                .all(|r| (r.iter().sum::<f64>() - 1.0).abs() <= ROW_SUM_TOLERANCE);
            rec.check(rows_ok, "attention.row_sums", trial, || {
                format!("layer {layer}: a row does not sum to 1")
            });

            let mut worst: f64 = 0.0;
            for w in &trace.cross_weights {
                for (q, mask) in trace.input_masks.iter().enumerate() {
                    let row = w.row(nq + q);
                    for (j, &keep) in mask.iter().enumerate() {
                        if !keep {
                            worst = worst.max(row[n_img + j]);
                            rec.count("masked_text_key_weights", 1);
                        }
                    }
                }
            }
            rec.check(
                worst < MASKED_WEIGHT_BOUND,
                "attention.masked_text_keys",
                trial,
                || format!("layer {layer}: masked text key weight {worst:e}"),
            );

            // One positional embedding feeds both streams of a pair, so the
            // image and text copies must be bit-identical.
            let shared = trace.positional_image == trace.positional_text
                && trace.input_masks == state.text_masks
                && next.anchors.rows() == nq
                && next.text_masks.len() == nq;
            rec.check(shared, "positional.shared_anchor_and_mask", trial, || {
                format!("layer {layer}: paired queries diverge")
            });

            // All-ones masks must be indistinguishable from no masking.
            let ones = crate::kernels::DualQueryState {
                text_masks: vec![vec![true; memory.n_text()]; nq],
                ..state.clone()
            };
            let masked =
                model.layer_forward(&params, layer, &ones, &memory, TextGating::Masked, true);
            let plain =
                model.layer_forward(&params, layer, &ones, &memory, TextGating::Unmasked, true);
            let identical = match (masked, plain) {
                (Ok((a, Some(ta))), Ok((b, Some(tb)))) => {
                    a == b && ta.cross_weights == tb.cross_weights
                }
                _ => false,
            };
            rec.check(identical, "attention.all_ones_mask_bitwise", trial, || {
                format!("layer {layer}: all-ones mask differs from unmasked")
            });

            state = next;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(suite: Suite, box_loss: BoxLossFn) -> SuiteReport {
        run_suite(
            suite,
            &SelftestOptions {
                seed: 1,
                trials: Some(20),
                box_loss,
            },
        )
    }

    #[test]
    fn suites_pass() {
        for s in Suite::ALL {
            let r = quick(s, loss_box);
            assert!(r.passed(), "{r:?}");
            assert!(r.checks >= 20);
        }
    }

    #[test]
    fn flipped_giou_sign_is_caught() {
        let r = quick(Suite::Gradients, loss_box_flipped_giou_sign);
        assert!(!r.passed());
        assert!(r
            .failures
            .iter()
            .all(|f| f.check == "gradients.loss_box_fd"));
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }
}
