//! Log-mel filterbank frontend.
//!
//! 40 log filterbank energies are computed over 25 ms Hann windows every
//! 10 ms; three consecutive frames are stacked with a stride of two, giving
//! one 120-dim vector per 20 ms.

use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::audio::{AudioClip, Label, SAMPLE_RATE_HZ};
use crate::matrix::Matrix;

pub const WINDOW_SAMPLES: usize = 400;
pub const HOP_SAMPLES: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const NUM_MELS: usize = 40;
pub const MEL_LOW_HZ: f64 = 125.0;
pub const MEL_HIGH_HZ: f64 = 7500.0;
pub const STACK: usize = 3;
pub const STRIDE: usize = 2;
pub const FEATURE_DIM: usize = NUM_MELS * STACK;
pub const FRAME_PERIOD_MS: u32 = 20;
/// Samples per stacked output frame.
pub const OUTPUT_HOP_SAMPLES: usize = HOP_SAMPLES * STRIDE;
pub const LOG_FLOOR: f64 = 1e-12;
/// Encoder class used for every frame outside the keyword.
pub const BACKGROUND_UNIT: usize = 0;

#[derive(Debug, Error, PartialEq)]
pub enum FrontendError {
    #[error("clip has {len} samples, fewer than one {WINDOW_SAMPLES}-sample window")]
    EmptyInput { len: usize },
    #[error("unsupported sample rate {0} Hz (only 16000 Hz is accepted)")]
    UnsupportedRate(u32),
    #[error("alignment extends past the clip: {0}")]
    InvalidAlignment(String),
}

/// `T x 120` stacked log-mel vectors at a 20 ms cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub vectors: Matrix,
    /// Number of 10 ms frames before stacking.
    pub source_frames: usize,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn frame_period_ms(&self) -> u32 {
        FRAME_PERIOD_MS
    }

    /// One CSV row per vector, for debugging dumps.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.vectors.iter_rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Number of 10 ms frames for `n` samples.
pub fn source_frame_count(n: usize) -> usize {
    if n < WINDOW_SAMPLES {
        0
    } else {
        (n - WINDOW_SAMPLES) / HOP_SAMPLES + 1
    }
}

/// Number of stacked vectors for `source_frames` 10 ms frames.
pub fn stacked_frame_count(source_frames: usize) -> usize {
    if source_frames < STACK {
        0
    } else {
        (source_frames - STACK) / STRIDE + 1
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

struct MelFilter {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Precomputed window, FFT plan and filterbank. Cheap to share.
pub struct Frontend {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    filters: Vec<MelFilter>,
}

impl Default for Frontend {
    fn default() -> Self {
        Self::new()
    }
}

impl Frontend {
    pub fn new() -> Self {
        let window = (0..WINDOW_SAMPLES)
            .map(|n| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW_SAMPLES as f64).cos()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        Self {
            window,
            fft,
            filters: build_filters(),
        }
    }

    /// Unstacked 40-dim log-mel frames.
    pub fn log_mel_frames(&self, samples: &[f64]) -> Matrix {
        let n_frames = source_frame_count(samples.len());
        let mut out = Matrix::zeros(n_frames, NUM_MELS);
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; FFT_SIZE / 2 + 1];
        for f in 0..n_frames {
            let start = f * HOP_SAMPLES;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < WINDOW_SAMPLES {
                    Complex::new(samples[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            let row = out.row_mut(f);
            for (m, filt) in self.filters.iter().enumerate() {
                let energy: f64 = filt
                    .weights
                    .iter()
                    .zip(&power[filt.first_bin..])
                    .map(|(w, p)| w * p)
                    .sum();
                row[m] = energy.max(LOG_FLOOR).ln();
            }
        }
        out
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<FeatureSequence, FrontendError> {
        if clip.sample_rate_hz != SAMPLE_RATE_HZ {
            return Err(FrontendError::UnsupportedRate(clip.sample_rate_hz));
        }
        if clip.len() < WINDOW_SAMPLES {
            return Err(FrontendError::EmptyInput { len: clip.len() });
        }
        let frames = self.log_mel_frames(&clip.samples);
        let source_frames = frames.rows();
        let t_out = stacked_frame_count(source_frames);
        let mut vectors = Matrix::zeros(t_out, FEATURE_DIM);
        for t in 0..t_out {
            let row = vectors.row_mut(t);
            for k in 0..STACK {
                row[k * NUM_MELS..(k + 1) * NUM_MELS]
                    .copy_from_slice(frames.row(STRIDE * t + k));
            }
        }
        Ok(FeatureSequence {
            vectors,
            source_frames,
        })
    }
}

fn build_filters() -> Vec<MelFilter> {
    let mel_lo = hz_to_mel(MEL_LOW_HZ);
    let mel_hi = hz_to_mel(MEL_HIGH_HZ);
    let edges: Vec<f64> = (0..NUM_MELS + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (NUM_MELS + 1) as f64))
        .collect();
    let bin_hz = f64::from(SAMPLE_RATE_HZ) / FFT_SIZE as f64;
    (0..NUM_MELS)
        .map(|m| {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let first_bin = (lo / bin_hz).ceil() as usize;
            let last_bin = ((hi / bin_hz).floor() as usize).min(FFT_SIZE / 2);
            let weights = (first_bin..=last_bin)
                .map(|b| {
                    let f = b as f64 * bin_hz;
                    let up = (f - lo) / (center - lo);
                    let down = (hi - f) / (hi - center);
                    up.min(down).max(0.0)
                })
                .collect();
            MelFilter { first_bin, weights }
        })
        .collect()
}

fn shared() -> &'static Frontend {
    static FRONTEND: OnceLock<Frontend> = OnceLock::new();
    FRONTEND.get_or_init(Frontend::new)
}

/// Stacked 120-dim features for a 16 kHz clip.
pub fn compute_features(clip: &AudioClip) -> Result<FeatureSequence, FrontendError> {
    shared().compute(clip)
}

/// Per-frame targets mapped from the sample-domain alignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameLabels {
    /// Encoder unit per 20 ms frame; [`BACKGROUND_UNIT`] outside the keyword.
    pub units: Vec<usize>,
    /// Frame in which the keyword ends.
    pub end_frame: Option<usize>,
}

/// Maps alignment and keyword end to the 20 ms frame grid of `num_frames`
/// feature vectors.
///
/// Frame `t` covers samples `[320 t, 320 (t + 1))` and takes the unit whose
/// segment contains the bucket midpoint. Only units that end at or before the
/// keyword end carry their id; everything else is background. An end that
/// falls past the last frame is clamped to it.
pub fn feature_frame_labels(clip: &AudioClip, num_frames: usize) -> Result<FrameLabels, FrontendError> {
    let len = clip.len();
    if let Some(seg) = clip.unit_alignment.iter().find(|s| s.end > len || s.start >= s.end) {
        return Err(FrontendError::InvalidAlignment(format!(
            "segment [{}, {}) in a {len}-sample clip",
            seg.start, seg.end
        )));
    }
    let mut units = vec![BACKGROUND_UNIT; num_frames];
    if clip.label == Label::Negative {
        return Ok(FrameLabels {
            units,
            end_frame: None,
        });
    }
    let Some(kw_end) = clip.keyword_end_sample else {
        return Ok(FrameLabels {
            units,
            end_frame: None,
        });
    };
    if kw_end > len {
        return Err(FrontendError::InvalidAlignment(format!(
            "keyword end {kw_end} in a {len}-sample clip"
        )));
    }
    let keyword_segments: Vec<_> = clip
        .unit_alignment
        .iter()
        .filter(|s| s.end <= kw_end)
        .collect();
    for (t, unit) in units.iter_mut().enumerate() {
        let mid = t * OUTPUT_HOP_SAMPLES + OUTPUT_HOP_SAMPLES / 2;
        if let Some(seg) = keyword_segments.iter().find(|s| s.start <= mid && mid < s.end) {
            *unit = seg.unit;
        }
    }
    let end_frame = (num_frames > 0).then(|| (kw_end / OUTPUT_HOP_SAMPLES).min(num_frames - 1));
    Ok(FrameLabels { units, end_frame })
}
