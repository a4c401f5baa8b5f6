//! Kernel dimensions and loss coefficients.
//!
//! The text format is flat `key = value`, one per line, `#` comments. Key
//! names follow the usual DETR-family hyper-parameter tables
//! (`hidden_dim`, `set_cost_bbox`, `giou_loss_coef`, ...).

use std::str::FromStr;

use super::KernelError;
use crate::assignment::CostWeights;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelConfig {
    pub d_model: usize,
    /// Width of the projected query/text space used for phrase scores.
    pub d_proj: usize,
    pub d_ffn: usize,
    pub n_queries: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub tau: f64,
    /// Multiplier on the phrase loss of queries matched to nothing.
    pub no_phrase_weight: f64,
    pub loss_coef_phrase: f64,
    pub loss_coef_bbox: f64,
    pub loss_coef_giou: f64,
    pub cost_weights: CostWeights,
    /// Mask bit is set when the projected dot product is strictly above this.
    pub mask_threshold: f64,
}

impl Default for KernelConfig {
    /// Desk-scale dimensions with the published coefficients.
    fn default() -> Self {
        Self {
            d_model: 16,
            d_proj: 8,
            d_ffn: 16,
            n_queries: 4,
            n_heads: 2,
            n_layers: 1,
            tau: 0.07,
            no_phrase_weight: 0.05,
            loss_coef_phrase: 2.0,
            loss_coef_bbox: 5.0,
            loss_coef_giou: 2.0,
            cost_weights: CostWeights::default(),
            mask_threshold: 0.0,
        }
    }
}

/// Keys accepted but not used by these kernels (optimizer schedule,
/// backbone and encoder settings).
const IGNORED_KEYS: &[&str] = &[
    "lr",
    "lr_backbone",
    "text_encoder_lr",
    "fraction_warmup_steps",
    "weight_decay",
    "clip_max_norm",
    "enc_layers",
    "dropout",
    "transformer_activation",
    "batch_norm_type",
    "pre_norm",
];

impl KernelConfig {
    /// Full-size dimensions (D=256, D1=64, 100 query pairs, 6 layers).
    pub fn full_scale() -> Self {
        Self {
            d_model: 256,
            d_proj: 64,
            d_ffn: 2048,
            n_queries: 100,
            n_heads: 8,
            n_layers: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        let bad = |m: String| Err(KernelError::InvalidConfig(m));
        if self.d_model == 0 || self.d_proj == 0 || self.d_ffn == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.d_model.is_multiple_of(8) {
            return bad(format!("d_model {} not divisible by 8", self.d_model));
        }
        if self.n_queries == 0 || self.n_layers == 0 {
            return bad("n_queries and n_layers must be positive".into());
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        for (name, v) in [
            ("no_phrase_weight", self.no_phrase_weight),
            ("loss_coef_phrase", self.loss_coef_phrase),
            ("loss_coef_bbox", self.loss_coef_bbox),
            ("loss_coef_giou", self.loss_coef_giou),
            ("mask_threshold", self.mask_threshold),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        self.cost_weights
            .validate()
            .map_err(|e| KernelError::InvalidConfig(e.to_string()))
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(mut self, text: &str) -> Result<Self, KernelError> {
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| KernelError::ConfigParse {
                    line: line_no,
                    message: format!("expected key = value, got {line:?}"),
                })?;
            let (key, value) = (key.trim(), value.trim().trim_matches('"'));
            let err = |message: String| KernelError::ConfigParse {
                line: line_no,
                message,
            };
            fn num<T: FromStr>(v: &str) -> Result<T, String> {
                v.parse().map_err(|_| format!("cannot parse {v:?}"))
            }
            match key {
                "hidden_dim" | "d_model" => self.d_model = num(value).map_err(err)?,
                "d_proj" | "contrastive_hdim" => self.d_proj = num(value).map_err(err)?,
                "dim_feedforward" | "d_ffn" => self.d_ffn = num(value).map_err(err)?,
                "num_queries" | "n_queries" => self.n_queries = num(value).map_err(err)?,
                "nheads" | "n_heads" => self.n_heads = num(value).map_err(err)?,
                "dec_layers" | "n_layers" => self.n_layers = num(value).map_err(err)?,
                "cls_temperature" | "tau" => self.tau = num(value).map_err(err)?,
                "no_phrase_weight" => self.no_phrase_weight = num(value).map_err(err)?,
                "ce_loss_coef" => self.loss_coef_phrase = num(value).map_err(err)?,
                "bbox_loss_coef" => self.loss_coef_bbox = num(value).map_err(err)?,
                "giou_loss_coef" => self.loss_coef_giou = num(value).map_err(err)?,
                "set_cost_class" => self.cost_weights.w_class = num(value).map_err(err)?,
                "set_cost_bbox" => self.cost_weights.w_bbox = num(value).map_err(err)?,
                "set_cost_giou" => self.cost_weights.w_giou = num(value).map_err(err)?,
                "mask_threshold" => self.mask_threshold = num(value).map_err(err)?,
                k if IGNORED_KEYS.contains(&k) => {
                    log::warn!("config line {line_no}: ignoring {k:?}");
                }
                k => return Err(err(format!("unknown key {k:?}"))),
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn from_text(text: &str) -> Result<Self, KernelError> {
        Self::default().apply_text(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_coefficients() {
        let c = KernelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.tau, 0.07);
        assert_eq!(c.no_phrase_weight, 0.05);
        assert_eq!(
            (c.loss_coef_phrase, c.loss_coef_bbox, c.loss_coef_giou),
            (2.0, 5.0, 2.0)
        );
        assert_eq!(c.cost_weights, CostWeights::default());
        let full = KernelConfig::full_scale();
        full.validate().unwrap();
        assert_eq!((full.d_model, full.d_proj, full.n_queries), (256, 64, 100));
    }

    #[test]
    fn parses_hyper_parameter_table() {
        let text = "\
# training schedule
lr = 0.0001
weight_decay = 0.0001
hidden_dim = 32
nheads = 4
num_queries = 6
set_cost_bbox = 4.5
cls_temperature = 0.1
";
        let c = KernelConfig::from_text(text).unwrap();
        assert_eq!((c.d_model, c.n_heads, c.n_queries), (32, 4, 6));
        assert_eq!(c.cost_weights.w_bbox, 4.5);
        assert_eq!(c.tau, 0.1);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            KernelConfig::from_text("mystery = 1"),
            Err(KernelError::ConfigParse { line: 1, .. })
        ));
        assert!(matches!(
            KernelConfig::from_text("\nhidden_dim 16"),
            Err(KernelError::ConfigParse { line: 2, .. })
        ));
        assert!(matches!(
            KernelConfig::from_text("hidden_dim = 20\nnheads = 3"),
            Err(KernelError::InvalidConfig(_))
        ));
        assert!(matches!(
            KernelConfig::from_text("tau = 0"),
            Err(KernelError::InvalidConfig(_))
        ));
    }
}
