//! Detection scores, threshold selection at a fixed false-accept rate, DET curves.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontend::FeatureSequence;
use crate::objective::DECODER_KEYWORD;
use crate::svdf::{KwsModel, ModelError};

pub const DEFAULT_TARGET_FA_PER_HOUR: f64 = 0.133;
pub const DEFAULT_SMOOTHING_FRAMES: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no negative scores")]
    InsufficientNegatives,
    #[error("no positive scores")]
    InsufficientPositives,
    #[error("empty feature sequence")]
    EmptyInput,
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn keyword_posterior(decoder: &[f64]) -> f64 {
    // two-way softmax
    1.0 / (1.0 + (decoder[0] - decoder[DECODER_KEYWORD]).exp())
}

/// Causal moving average: frame `t` averages frames `max(0, t-w+1)..=t`.
pub fn smooth(values: &[f64], width: usize) -> Vec<f64> {
    let w = width.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for t in 0..values.len() {
        sum += values[t];
        if t >= w {
            sum -= values[t - w];
        }
        out.push(sum / (t + 1).min(w) as f64);
    }
    out
}

/// Per-frame decoder keyword posteriors from the streaming path.
pub fn stream_posteriors(model: &KwsModel, feats: &FeatureSequence) -> Result<Vec<f64>, EvalError> {
    if feats.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n_enc = model.config().encoder_output_dim;
    let mut state = model.stream_init();
    feats
        .vectors
        .iter_rows()
        .map(|row| {
            let logits = model.forward_stream(&mut state, row)?;
            Ok(keyword_posterior(&logits[n_enc..]))
        })
        .collect()
}

/// Per-frame decoder keyword posteriors from the batch path.
pub fn batch_posteriors(model: &KwsModel, feats: &FeatureSequence) -> Result<Vec<f64>, EvalError> {
    if feats.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n_enc = model.config().encoder_output_dim;
    let logits = model.forward_batch(feats)?;
    Ok(logits.iter_rows().map(|r| keyword_posterior(&r[n_enc..])).collect())
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Maximum smoothed keyword posterior, computed by streaming.
pub fn score_utterance(model: &KwsModel, feats: &FeatureSequence) -> Result<f64, EvalError> {
    score_utterance_smoothed(model, feats, DEFAULT_SMOOTHING_FRAMES)
}

pub fn score_utterance_smoothed(model: &KwsModel, feats: &FeatureSequence, width: usize) -> Result<f64, EvalError> {
    Ok(max_of(&smooth(&stream_posteriors(model, feats)?, width)))
}

fn check_scores(scores: &[f64]) -> Result<(), EvalError> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::Invalid("NaN score".into()));
    }
    Ok(())
}

fn check_hours(neg_hours: f64) -> Result<(), EvalError> {
    if !(neg_hours > 0.0 && neg_hours.is_finite()) {
        return Err(EvalError::Invalid(format!("negative duration {neg_hours} h")));
    }
    Ok(())
}

/// Utterances whose score strictly exceeds `threshold`.
pub fn false_accepts(neg_scores: &[f64], threshold: f64) -> usize {
    neg_scores.iter().filter(|&&s| s > threshold).count()
}

/// Smallest candidate in `neg_scores ∪ {+inf}` meeting the FA/hr target.
pub fn select_threshold(neg_scores: &[f64], neg_hours: f64, target_fa_per_hour: f64) -> Result<f64, EvalError> {
    if neg_scores.is_empty() {
        return Err(EvalError::InsufficientNegatives);
    }
    check_scores(neg_scores)?;
    check_hours(neg_hours)?;
    let mut sorted = neg_scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    for (i, &theta) in sorted.iter().enumerate() {
        if i + 1 < n && sorted[i + 1] == theta {
            continue;
        }
        // scores above the last copy of theta
        if (n - i - 1) as f64 / neg_hours <= target_fa_per_hour {
            return Ok(theta);
        }
    }
    Ok(f64::INFINITY)
}

/// Percentage of positives scoring at or below `threshold`.
pub fn frr_at_threshold(pos_scores: &[f64], threshold: f64) -> Result<f64, EvalError> {
    if pos_scores.is_empty() {
        return Err(EvalError::InsufficientPositives);
    }
    check_scores(pos_scores)?;
    let rejects = pos_scores.iter().filter(|&&s| s <= threshold).count();
    Ok(100.0 * rejects as f64 / pos_scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub fa_per_hour: f64,
    pub frr_percent: f64,
}

/// One point per distinct negative score, in increasing threshold order.
pub fn det_curve(pos_scores: &[f64], neg_scores: &[f64], neg_hours: f64) -> Result<Vec<DetPoint>, EvalError> {
    if neg_scores.is_empty() {
        return Err(EvalError::InsufficientNegatives);
    }
    if pos_scores.is_empty() {
        return Err(EvalError::InsufficientPositives);
    }
    check_scores(neg_scores)?;
    check_scores(pos_scores)?;
    check_hours(neg_hours)?;
    let mut neg = neg_scores.to_vec();
    neg.sort_by(|a, b| a.total_cmp(b));
    neg.dedup();
    let mut pos = pos_scores.to_vec();
    pos.sort_by(|a, b| a.total_cmp(b));
    let mut sorted_neg = neg_scores.to_vec();
    sorted_neg.sort_by(|a, b| a.total_cmp(b));
    Ok(neg
        .iter()
        .map(|&theta| {
            let fa = sorted_neg.len() - sorted_neg.partition_point(|&s| s <= theta);
            let rej = pos.partition_point(|&s| s <= theta);
            DetPoint {
                threshold: theta,
                fa_per_hour: fa as f64 / neg_hours,
                frr_percent: 100.0 * rej as f64 / pos.len() as f64,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target_fa_per_hour: f64,
    pub threshold: f64,
    pub frr_percent: f64,
    pub fa_per_hour: f64,
    pub det_points: Vec<DetPoint>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub neg_hours: f64,
}

impl EvalReport {
    pub fn det_csv(&self) -> String {
        let mut out = String::from("threshold,fa_per_hour,frr_percent\n");
        for p in &self.det_points {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.fa_per_hour, p.frr_percent));
        }
        out
    }

    /// JSON with a non-finite threshold written as a string.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({
            "target_fa_per_hour": self.target_fa_per_hour,
            "frr_percent": self.frr_percent,
            "fa_per_hour": self.fa_per_hour,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "neg_hours": self.neg_hours,
            "det_points": self.det_points,
        });
        v["threshold"] = if self.threshold.is_finite() {
            serde_json::json!(self.threshold)
        } else {
            serde_json::json!("inf")
        };
        v
    }
}

/// Operating point and DET curve from collected scores.
pub fn evaluate_scores(
    pos_scores: &[f64],
    neg_scores: &[f64],
    neg_hours: f64,
    target_fa_per_hour: f64,
) -> Result<EvalReport, EvalError> {
    let threshold = select_threshold(neg_scores, neg_hours, target_fa_per_hour)?;
    let frr_percent = frr_at_threshold(pos_scores, threshold)?;
    Ok(EvalReport {
        target_fa_per_hour,
        threshold,
        frr_percent,
        fa_per_hour: false_accepts(neg_scores, threshold) as f64 / neg_hours,
        det_points: det_curve(pos_scores, neg_scores, neg_hours)?,
        n_pos: pos_scores.len(),
        n_neg: neg_scores.len(),
        neg_hours,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::svdf::ModelConfig;

    #[test]
    fn symmetric_model_scores_half() {
        let cfg = ModelConfig::encoder_decoder(4, 3, 2, 5);
        let model = KwsModel::from_params(cfg.clone(), vec![0.0; cfg.param_count()]).unwrap();
        let feats = FeatureSequence {
            vectors: Matrix::zeros(7, crate::frontend::FEATURE_DIM),
            source_frames: 15,
        };
        assert_eq!(score_utterance(&model, &feats).unwrap(), 0.5);
        let empty = FeatureSequence {
            vectors: Matrix::zeros(0, crate::frontend::FEATURE_DIM),
            source_frames: 0,
        };
        assert!(matches!(score_utterance(&model, &empty), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn smoothing() {
        let v = [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.5];
        assert_eq!(smooth(&v, 1), v.to_vec());
        let s = smooth(&v, 5);
        assert_eq!(s[0], 0.0);
        assert_eq!(s[1], 0.5);
        assert!((s[4] - 0.2).abs() < 1e-15);
        assert!((s[6] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn threshold_examples() {
        let scores: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        assert_eq!(select_threshold(&scores, 10.0, 0.133).unwrap(), 0.98);
        assert_eq!(select_threshold(&scores, 10.0, 1e9).unwrap(), 0.0);
        assert_eq!(select_threshold(&[0.3; 10], 1.0, 0.0).unwrap(), 0.3);
        assert_eq!(select_threshold(&[0.3, 0.4], 100.0, 0.0).unwrap(), 0.4);
        assert!(matches!(select_threshold(&[], 1.0, 0.1), Err(EvalError::InsufficientNegatives)));
        assert!(select_threshold(&[0.1], 0.0, 0.1).is_err());
    }

    #[test]
    fn frr_examples() {
        let pos = [0.1, 0.5, 0.9];
        assert_eq!(frr_at_threshold(&pos, 0.0).unwrap(), 0.0);
        assert_eq!(frr_at_threshold(&pos, 1.0).unwrap(), 100.0);
        assert!((frr_at_threshold(&pos, 0.5).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert!(matches!(frr_at_threshold(&[], 0.5), Err(EvalError::InsufficientPositives)));
    }

    #[test]
    fn det_examples() {
        assert_eq!(det_curve(&[0.5], &[0.2], 1.0).unwrap().len(), 1);
        let d = det_curve(&[0.8, 0.9], &[0.1, 0.2, 0.2], 1.0).unwrap();
        assert_eq!(d.len(), 2);
        assert!(d.iter().any(|p| p.fa_per_hour == 0.0 && p.frr_percent == 0.0));
    }

    #[test]
    fn report_json_has_target() {
        let r = evaluate_scores(&[0.9], &[0.1], 1.0, DEFAULT_TARGET_FA_PER_HOUR).unwrap();
        let v = r.to_json();
        assert_eq!(v["target_fa_per_hour"], serde_json::json!(0.133));
        assert_eq!(r.frr_percent, 0.0);
    }
}
