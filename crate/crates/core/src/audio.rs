//! Audio clips, WAV I/O and the alignment sidecar format.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SAMPLE_RATE_HZ: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("sample {index} is not finite or outside [-1, 1]: {value}")]
    SampleOutOfRange { index: usize, value: f64 },
    #[error("keyword end sample {end} is past clip length {len}")]
    KeywordEndOutOfRange { end: usize, len: usize },
    #[error("alignment segment {index} is invalid or overlaps its predecessor")]
    BadAlignment { index: usize },
    #[error("unsupported WAV format: {0}")]
    UnsupportedFormat(String),
    #[error("WAV error: {0}")]
    Wav(#[from] hound::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("alignment JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn is_positive(self) -> bool {
        matches!(self, Label::Positive)
    }
}

/// One rendered sound unit, `[start, end)` in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSegment {
    pub unit: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
    pub speaker_id: String,
    pub label: Label,
    pub keyword_end_sample: Option<usize>,
    pub unit_alignment: Vec<UnitSegment>,
}

impl AudioClip {
    /// Unlabelled negative clip with no alignment.
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Self {
        Self {
            samples,
            sample_rate_hz,
            speaker_id: String::new(),
            label: Label::Negative,
            keyword_end_sample: None,
            unit_alignment: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate_hz)
    }

    /// Mean power of the samples.
    pub fn power(&self) -> f64 {
        power(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Same metadata, new samples.
    pub fn with_samples(&self, samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate_hz: self.sample_rate_hz,
            speaker_id: self.speaker_id.clone(),
            label: self.label,
            keyword_end_sample: self.keyword_end_sample,
            unit_alignment: self.unit_alignment.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), AudioError> {
        if let Some((index, &value)) = self
            .samples
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(AudioError::SampleOutOfRange { index, value });
        }
        if let Some(end) = self.keyword_end_sample {
            if end > self.len() {
                return Err(AudioError::KeywordEndOutOfRange {
                    end,
                    len: self.len(),
                });
            }
        }
        let mut prev_end = 0;
        for (index, seg) in self.unit_alignment.iter().enumerate() {
            if seg.start >= seg.end || seg.start < prev_end {
                return Err(AudioError::BadAlignment { index });
            }
            prev_end = seg.end;
        }
        Ok(())
    }
}

pub fn power(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64
}

/// Sidecar describing where the keyword and its units sit in a WAV file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword_end_sample: Option<usize>,
    #[serde(default)]
    pub units: Vec<UnitSegment>,
}

/// Reads a 16-bit PCM mono WAV. Other formats are rejected rather than converted.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32), AudioError> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(AudioError::UnsupportedFormat(format!(
            "{} channels",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedFormat(format!(
            "{:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((samples, spec.sample_rate))
}

pub fn write_wav(path: &Path, samples: &[f64], sample_rate_hz: u32) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn read_alignment(path: &Path) -> Result<Alignment, AudioError> {
    let file = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(file)?)
}

pub fn write_alignment(path: &Path, alignment: &Alignment) -> Result<(), AudioError> {
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(file, alignment)?;
    Ok(())
}

/// Loads an externally produced WAV plus optional alignment sidecar.
pub fn load_clip(
    wav: &Path,
    alignment: Option<&Path>,
    label: Label,
    speaker_id: &str,
) -> Result<AudioClip, AudioError> {
    let (samples, sample_rate_hz) = read_wav(wav)?;
    let align = match alignment {
        Some(p) => read_alignment(p)?,
        None => Alignment::default(),
    };
    let clip = AudioClip {
        samples,
        sample_rate_hz,
        speaker_id: speaker_id.to_string(),
        label,
        keyword_end_sample: align.keyword_end_sample,
        unit_alignment: align.units,
    };
    clip.validate()?;
    Ok(clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_rejects_overlap_and_range() {
        let mut clip = AudioClip::new(vec![0.0; 100], SAMPLE_RATE_HZ);
        clip.unit_alignment = vec![
            UnitSegment { unit: 1, start: 0, end: 50 },
            UnitSegment { unit: 2, start: 40, end: 60 },
        ];
        assert!(matches!(clip.validate(), Err(AudioError::BadAlignment { index: 1 })));
        clip.unit_alignment.clear();
        clip.keyword_end_sample = Some(101);
        assert!(clip.validate().is_err());
        clip.keyword_end_sample = None;
        clip.samples[3] = 1.5;
        assert!(matches!(
            clip.validate(),
            Err(AudioError::SampleOutOfRange { index: 3, .. })
        ));
    }

    #[test]
    fn wav_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f64> = (0..800).map(|i| (i as f64 * 0.05).sin() * 0.5).collect();
        write_wav(&path, &samples, SAMPLE_RATE_HZ).unwrap();
        let (back, sr) = read_wav(&path).unwrap();
        assert_eq!(sr, SAMPLE_RATE_HZ);
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert!((a - b).abs() < 1.0 / 16000.0);
        }
    }
}
