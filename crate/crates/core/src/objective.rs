//! Supervised training objective: a weighted mix of per-frame cross-entropy
//! and max-pool cross-entropy, applied to both encoder and decoder heads.
//!
//! `L = sum_head w_head * [(1 - alpha) * CE_head + alpha * MP_head]`
//!
//! CE is averaged over frames. MP is counted once per utterance: for a
//! positive it is the cross-entropy at the frame with the highest keyword
//! logit inside the window ending at the keyword end; for a negative it is
//! the cross-entropy against background at the frame with the highest
//! keyword logit anywhere.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::Label;
use crate::frontend::{FrameLabels, BACKGROUND_UNIT};
use crate::matrix::Matrix;

/// Decoder class indices.
pub const DECODER_BACKGROUND: usize = 0;
pub const DECODER_KEYWORD: usize = 1;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("label {label} at frame {frame} is outside [0, {classes})")]
    LabelError { frame: usize, label: usize, classes: usize },
    #[error("positive utterance has no end-of-keyword frame")]
    MissingEndLabel,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid loss config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub encoder_weight: f64,
    pub decoder_weight: f64,
    /// Frames in the positive max-pool window, ending at the keyword end.
    pub pool_window_frames: usize,
    /// Frames labelled keyword for the decoder CE, ending at the keyword end.
    pub decoder_positive_frames: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            encoder_weight: 1.0,
            decoder_weight: 1.0,
            pool_window_frames: 10,
            decoder_positive_frames: 5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LossError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        for (name, w) in [("encoder_weight", self.encoder_weight), ("decoder_weight", self.decoder_weight)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(LossError::Config(format!("{name} = {w}")));
            }
        }
        if self.pool_window_frames == 0 {
            return Err(LossError::Config("pool_window_frames must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-frame targets for both heads of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTargets {
    /// Encoder unit ids, [`BACKGROUND_UNIT`] outside the keyword.
    pub encoder: Vec<usize>,
    /// Decoder classes.
    pub decoder: Vec<usize>,
    pub end_frame: Option<usize>,
    pub label: Label,
    /// Encoder class pooled by the max-pool term: the keyword's final unit.
    pub keyword_unit: usize,
}

impl FrameTargets {
    /// Decoder frames `[end - span + 1, end]` are keyword for positives.
    pub fn from_frame_labels(labels: &FrameLabels, label: Label, keyword_unit: usize, decoder_span: usize) -> Self {
        let mut decoder = vec![DECODER_BACKGROUND; labels.units.len()];
        if let (Label::Positive, Some(end)) = (label, labels.end_frame) {
            let start = (end + 1).saturating_sub(decoder_span.max(1));
            for d in &mut decoder[start..=end.min(labels.units.len().saturating_sub(1))] {
                *d = DECODER_KEYWORD;
            }
        }
        Self {
            encoder: labels.units.clone(),
            decoder,
            end_frame: if label.is_positive() { labels.end_frame } else { None },
            label,
            keyword_unit,
        }
    }

    pub fn len(&self) -> usize {
        self.encoder.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoder.is_empty()
    }
}

/// Which class the max-pool term tracks and which it pushes towards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolTarget {
    pub label: Label,
    pub end_frame: Option<usize>,
    pub keyword_class: usize,
    pub background_class: usize,
}

/// Log-sum-exp and softmax of one row.
fn log_softmax_parts(row: &[f64]) -> (f64, Vec<f64>) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = m + sum.ln();
    (lse, exps.into_iter().map(|e| e / sum).collect())
}

/// Cross-entropy of a single row and its gradient.
fn row_ce(row: &[f64], label: usize) -> (f64, Vec<f64>) {
    let (lse, mut grad) = log_softmax_parts(row);
    grad[label] -= 1.0;
    ((lse - row[label]).max(0.0), grad)
}

fn check_label(frame: usize, label: usize, classes: usize) -> Result<(), LossError> {
    if label >= classes {
        Err(LossError::LabelError { frame, label, classes })
    } else {
        Ok(())
    }
}

/// Mean softmax cross-entropy over frames; gradient `(softmax - onehot) / T`.
pub fn ce_frame_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix), LossError> {
    let (frames, classes) = (logits.rows(), logits.cols());
    if labels.len() != frames {
        return Err(LossError::Shape(format!("{} labels for {frames} frames", labels.len())));
    }
    let mut grad = Matrix::zeros(frames, classes);
    if frames == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / frames as f64;
    let mut total = 0.0;
    for (t, &y) in labels.iter().enumerate() {
        check_label(t, y, classes)?;
        let (loss, g) = row_ce(logits.row(t), y);
        total += loss;
        for (d, v) in grad.row_mut(t).iter_mut().zip(g) {
            *d = v * inv;
        }
    }
    Ok((total * inv, grad))
}

/// Frame selected by the max-pool rule (first index on ties).
pub fn pooled_frame(logits: &Matrix, target: &PoolTarget, window: usize) -> Result<usize, LossError> {
    let frames = logits.rows();
    if frames == 0 {
        return Err(LossError::Shape("no frames".into()));
    }
    check_label(0, target.keyword_class, logits.cols())?;
    check_label(0, target.background_class, logits.cols())?;
    if window == 0 {
        return Err(LossError::Config("pool window must be at least 1".into()));
    }
    let range = match target.label {
        Label::Positive => {
            let end = target.end_frame.ok_or(LossError::MissingEndLabel)?;
            if end >= frames {
                return Err(LossError::Shape(format!("end frame {end} with {frames} frames")));
            }
            (end + 1).saturating_sub(window)..end + 1
        }
        Label::Negative => 0..frames,
    };
    let k = target.keyword_class;
    let mut best = range.start;
    for t in range {
        if logits.get(t, k) > logits.get(best, k) {
            best = t;
        }
    }
    Ok(best)
}

/// Cross-entropy at the pooled frame; the gradient is zero on every other frame.
pub fn max_pool_loss(logits: &Matrix, target: &PoolTarget, window: usize) -> Result<(f64, Matrix), LossError> {
    let t_star = pooled_frame(logits, target, window)?;
    let class = match target.label {
        Label::Positive => target.keyword_class,
        Label::Negative => target.background_class,
    };
    let (loss, g) = row_ce(logits.row(t_star), class);
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    grad.row_mut(t_star).copy_from_slice(&g);
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    /// Weighted CE over both heads.
    pub ce_part: f64,
    /// Weighted max-pool loss over both heads.
    pub mp_part: f64,
    pub grad_encoder: Matrix,
    pub grad_decoder: Matrix,
}

pub fn combined_loss(
    encoder_logits: &Matrix,
    decoder_logits: &Matrix,
    targets: &FrameTargets,
    cfg: &LossConfig,
) -> Result<LossOutput, LossError> {
    cfg.validate()?;
    if encoder_logits.rows() != decoder_logits.rows() || targets.len() != encoder_logits.rows() {
        return Err(LossError::Shape(format!(
            "encoder {} frames, decoder {} frames, targets {}",
            encoder_logits.rows(),
            decoder_logits.rows(),
            targets.len()
        )));
    }
    if decoder_logits.cols() != 2 {
        return Err(LossError::Shape(format!("decoder has {} classes", decoder_logits.cols())));
    }
    let (ce_e, g_ce_e) = ce_frame_loss(encoder_logits, &targets.encoder)?;
    let (ce_d, g_ce_d) = ce_frame_loss(decoder_logits, &targets.decoder)?;
    let enc_pool = PoolTarget {
        label: targets.label,
        end_frame: targets.end_frame,
        keyword_class: targets.keyword_unit,
        background_class: BACKGROUND_UNIT,
    };
    let dec_pool = PoolTarget {
        label: targets.label,
        end_frame: targets.end_frame,
        keyword_class: DECODER_KEYWORD,
        background_class: DECODER_BACKGROUND,
    };
    let w = cfg.pool_window_frames;
    let (mp_e, g_mp_e) = max_pool_loss(encoder_logits, &enc_pool, w)?;
    let (mp_d, g_mp_d) = max_pool_loss(decoder_logits, &dec_pool, w)?;

    let (we, wd, a) = (cfg.encoder_weight, cfg.decoder_weight, cfg.alpha);
    let ce_part = we * ce_e + wd * ce_d;
    let mp_part = we * mp_e + wd * mp_d;
    let mix = |ce: &Matrix, mp: &Matrix, head_w: f64| {
        let data = ce
            .as_slice()
            .iter()
            .zip(mp.as_slice())
            .map(|(c, m)| head_w * ((1.0 - a) * c + a * m))
            .collect();
        Matrix::from_vec(ce.rows(), ce.cols(), data)
    };
    Ok(LossOutput {
        total: (1.0 - a) * ce_part + a * mp_part,
        ce_part,
        mp_part,
        grad_encoder: mix(&g_ce_e, &g_mp_e, we),
        grad_decoder: mix(&g_ce_d, &g_mp_d, wd),
    })
}
