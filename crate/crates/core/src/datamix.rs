//! Manifests and declarative training mixtures.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::Label;
use crate::seed;
use crate::tts::SynthMode;

#[derive(Debug, Error)]
pub enum DatamixError {
    #[error("pool `{pool}` has {available} entries, {requested} requested")]
    PoolExhausted {
        pool: String,
        requested: usize,
        available: usize,
    },
    #[error(
        "need {requested_speakers} speakers with >= {utts_per_speaker} utterances, pool has {available_speakers}"
    )]
    StratificationError {
        requested_speakers: usize,
        utts_per_speaker: usize,
        available_speakers: usize,
    },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid mix spec: {0}")]
    InvalidSpec(String),
    #[error("manifest line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Tts,
}

/// Everything needed to re-render an oracle utterance instead of reading a WAV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecipe {
    pub text: String,
    pub query: String,
    pub template_id: usize,
    pub seed: u64,
    pub mode: SynthMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub wav_path: String,
    pub label: Label,
    pub speaker_id: String,
    pub source: Source,
    pub duration_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword_end_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleRecipe>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<(), DatamixError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.utt_id.as_str()) {
                return Err(DatamixError::InvalidManifest(format!("duplicate utt_id `{}`", e.utt_id)));
            }
            if e.label.is_positive() && e.keyword_end_ms.is_none() {
                return Err(DatamixError::InvalidManifest(format!(
                    "positive `{}` lacks keyword_end_ms",
                    e.utt_id
                )));
            }
        }
        Ok(())
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    pub fn total_hours(&self) -> f64 {
        self.entries.iter().map(|e| e.duration_ms).sum::<f64>() / 3_600_000.0
    }

    pub fn speakers(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&str> = self.entries.iter().map(|e| e.speaker_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn filter(&self, mut keep: impl FnMut(&ManifestEntry) -> bool) -> Manifest {
        Manifest::new(self.entries.iter().filter(|e| keep(e)).cloned().collect())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, DatamixError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(line).map_err(|source| DatamixError::Parse { line: i + 1, source })?);
        }
        let m = Manifest { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self, DatamixError> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), DatamixError> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RealPosRule {
    Count(usize),
    Stratified { n_speakers: usize, utts_per_speaker: usize },
}

impl RealPosRule {
    pub fn total(&self) -> usize {
        match *self {
            RealPosRule::Count(n) => n,
            RealPosRule::Stratified {
                n_speakers,
                utts_per_speaker,
            } => n_speakers * utts_per_speaker,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixSpec {
    pub tts_pos: usize,
    pub tts_neg: usize,
    pub real_pos: RealPosRule,
    pub real_neg: usize,
    pub seed: u64,
}

impl MixSpec {
    pub fn validate(&self) -> Result<(), DatamixError> {
        if let RealPosRule::Stratified {
            n_speakers,
            utts_per_speaker,
        } = self.real_pos
        {
            if n_speakers == 0 || utts_per_speaker == 0 {
                return Err(DatamixError::InvalidSpec("stratified fields must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, DatamixError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Source pools a mixture draws from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pools {
    pub tts_pos: Manifest,
    pub tts_neg: Manifest,
    pub real_pos: Manifest,
    pub real_neg: Manifest,
}

impl Pools {
    /// Splits one manifest by source and label.
    pub fn from_manifest(all: &Manifest) -> Self {
        let pick = |s: Source, l: Label| all.filter(|e| e.source == s && e.label == l);
        Pools {
            tts_pos: pick(Source::Tts, Label::Positive),
            tts_neg: pick(Source::Tts, Label::Negative),
            real_pos: pick(Source::Real, Label::Positive),
            real_neg: pick(Source::Real, Label::Negative),
        }
    }
}

fn sample_pool(pool: &Manifest, name: &str, count: usize, seed: u64) -> Result<Vec<ManifestEntry>, DatamixError> {
    if count > pool.len() {
        return Err(DatamixError::PoolExhausted {
            pool: name.to_string(),
            requested: count,
            available: pool.len(),
        });
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    seed::shuffle(&mut idx, &mut seed::rng(seed, &[]));
    Ok(idx[..count].iter().map(|&i| pool.entries[i].clone()).collect())
}

pub fn sample_mixture(pools: &Pools, spec: &MixSpec) -> Result<Manifest, DatamixError> {
    spec.validate()?;
    let mut out = Vec::new();
    out.extend(sample_pool(&pools.tts_pos, "tts_pos", spec.tts_pos, seed::derive(spec.seed, &[1]))?);
    out.extend(sample_pool(&pools.tts_neg, "tts_neg", spec.tts_neg, seed::derive(spec.seed, &[2]))?);
    match spec.real_pos {
        RealPosRule::Count(n) => {
            out.extend(sample_pool(&pools.real_pos, "real_pos", n, seed::derive(spec.seed, &[3]))?);
        }
        RealPosRule::Stratified {
            n_speakers,
            utts_per_speaker,
        } => {
            let s = stratify_speakers(&pools.real_pos, n_speakers, utts_per_speaker, seed::derive(spec.seed, &[3]))?;
            out.extend(s.entries);
        }
    }
    out.extend(sample_pool(&pools.real_neg, "real_neg", spec.real_neg, seed::derive(spec.seed, &[4]))?);
    seed::shuffle(&mut out, &mut seed::rng(spec.seed, &[5]));
    let m = Manifest::new(out);
    m.validate()?;
    Ok(m)
}

pub fn stratify_speakers(
    pool: &Manifest,
    n_speakers: usize,
    utts_per_speaker: usize,
    seed: u64,
) -> Result<Manifest, DatamixError> {
    if n_speakers == 0 || utts_per_speaker == 0 {
        return Err(DatamixError::InvalidSpec("stratified fields must be >= 1".into()));
    }
    let mut by_speaker: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in &pool.entries {
        by_speaker.entry(&e.speaker_id).or_default().push(e);
    }
    let mut eligible: Vec<&str> = by_speaker
        .iter()
        .filter(|(_, v)| v.len() >= utts_per_speaker)
        .map(|(k, _)| *k)
        .collect();
    if eligible.len() < n_speakers {
        return Err(DatamixError::StratificationError {
            requested_speakers: n_speakers,
            utts_per_speaker,
            available_speakers: eligible.len(),
        });
    }
    let mut rng = seed::rng(seed, &[0]);
    seed::shuffle(&mut eligible, &mut rng);
    let mut out = Vec::with_capacity(n_speakers * utts_per_speaker);
    for (k, spk) in eligible[..n_speakers].iter().enumerate() {
        let mut utts = by_speaker[spk].clone();
        seed::shuffle(&mut utts, &mut seed::rng(seed, &[1, k as u64]));
        out.extend(utts[..utts_per_speaker].iter().map(|e| (*e).clone()));
    }
    Ok(Manifest::new(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    RealPosCount,
    NSpeakers,
    UttsPerSpeaker,
}

impl std::str::FromStr for SweepAxis {
    type Err = DatamixError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real_pos_count" => Ok(SweepAxis::RealPosCount),
            "n_speakers" => Ok(SweepAxis::NSpeakers),
            "utts_per_speaker" => Ok(SweepAxis::UttsPerSpeaker),
            other => Err(DatamixError::InvalidSpec(format!("unknown sweep axis `{other}`"))),
        }
    }
}

/// Utterances per speaker assumed when a speaker axis meets a plain count.
pub const DEFAULT_UTTS_PER_SPEAKER: usize = 10;
/// Speaker count assumed when an utterance axis meets a plain count.
pub const DEFAULT_SWEEP_SPEAKERS: usize = 100;

pub fn sweep_grid(base: &MixSpec, axis: SweepAxis, values: &[usize]) -> Result<Vec<MixSpec>, DatamixError> {
    if values.is_empty() {
        return Err(DatamixError::InvalidSpec("sweep values are empty".into()));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DatamixError::InvalidSpec("sweep values must be strictly increasing".into()));
    }
    let (n_spk, upk) = match base.real_pos {
        RealPosRule::Stratified {
            n_speakers,
            utts_per_speaker,
        } => (n_speakers, utts_per_speaker),
        RealPosRule::Count(_) => (DEFAULT_SWEEP_SPEAKERS, DEFAULT_UTTS_PER_SPEAKER),
    };
    Ok(values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let real_pos = match axis {
                SweepAxis::RealPosCount => RealPosRule::Count(v),
                SweepAxis::NSpeakers => RealPosRule::Stratified {
                    n_speakers: v,
                    utts_per_speaker: upk,
                },
                SweepAxis::UttsPerSpeaker => RealPosRule::Stratified {
                    n_speakers: n_spk,
                    utts_per_speaker: v,
                },
            };
            MixSpec {
                real_pos,
                seed: base.seed + i as u64,
                ..*base
            }
        })
        .collect())
}
