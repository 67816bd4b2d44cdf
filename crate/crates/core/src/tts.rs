//! Deterministic procedural speech synthesizer with exact alignments.
//!
//! Every word is split into two-letter chunks, and each chunk hashes to a
//! sound unit in `1..inventory` (unit 0 is reserved for background). A unit
//! is rendered as a harmonic tone at the speaker's pitch whose spectrum is
//! shaped by two formant resonances derived from the unit id. Prosody
//! controls act on whole words:
//!
//! * `(w)` stretches every unit of `w` by 1.5,
//! * `w:` adds a 150 ms pause after `w`,
//! * `w?` ramps pitch up by 20 % over the last third of `w`,
//! * `w!` renders `w` 6 dB louder.
//!
//! [`SynthMode::Real`] emulates recorded speech: wider duration and pitch
//! jitter, per-speaker formant offsets for each unit, a per-speaker channel
//! low-pass and a breath-noise floor. This gives "real" and "TTS" pools a
//! measurable domain gap.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::{AudioClip, Label, UnitSegment, SAMPLE_RATE_HZ};
use crate::seed;
use crate::textgen::{parse_prompt, PromptSpec};

pub const DEFAULT_UNIT_INVENTORY: usize = 16;
pub const PITCH_RANGE_HZ: (f64, f64) = (90.0, 280.0);
pub const FORMANT_SCALE_RANGE: (f64, f64) = (0.8, 1.25);
pub const SPEAKING_RATE_RANGE: (f64, f64) = (0.8, 1.25);

const LEAD_SILENCE_MS: f64 = 100.0;
const TAIL_SILENCE_MS: f64 = 120.0;
const WORD_GAP_MS: f64 = 30.0;
const PAUSE_MS: f64 = 150.0;
const SLOW_FACTOR: f64 = 1.5;
const RISE_FACTOR: f64 = 1.2;
const LOUD_DB: f64 = 6.0;
const BASE_AMPLITUDE: f64 = 0.3;
const RAMP_MS: f64 = 8.0;
const MAX_HARMONIC_HZ: f64 = 4000.0;
/// Per-speaker, per-unit formant offset of real-mode voices.
pub const ACCENT_DEPTH: f64 = 0.25;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("prompt has no renderable words")]
    EmptyPrompt,
    #[error("speaker id is empty")]
    EmptySpeakerId,
    #[error("unit inventory must hold at least 2 units, got {0}")]
    BadInventory(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    #[default]
    Tts,
    Real,
}

impl SynthMode {
    fn duration_jitter(self) -> f64 {
        match self {
            SynthMode::Tts => 0.10,
            SynthMode::Real => 0.25,
        }
    }

    fn pitch_jitter(self) -> f64 {
        match self {
            SynthMode::Tts => 0.03,
            SynthMode::Real => 0.08,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub mode: SynthMode,
    pub unit_inventory: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            mode: SynthMode::Tts,
            unit_inventory: DEFAULT_UNIT_INVENTORY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub base_pitch_hz: f64,
    pub formant_scale: f64,
    pub speaking_rate: f64,
}

fn sha_words(data: &[u8]) -> [u64; 4] {
    let digest = Sha256::digest(data);
    let mut out = [0u64; 4];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u64::from_le_bytes(digest[i * 8..(i + 1) * 8].try_into().expect("8 bytes"));
    }
    out
}

fn uniform_in(word: u64, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * ((word >> 11) as f64 / (1u64 << 53) as f64)
}

/// Stable hash of a string, used for unit ids and per-speaker offsets.
pub fn stable_hash(s: &str) -> u64 {
    sha_words(s.as_bytes())[0]
}

/// Profile fields are independent uniform draws from a SHA-256 of the id.
pub fn speaker_params(speaker_id: &str) -> Result<SpeakerProfile, SynthError> {
    if speaker_id.is_empty() {
        return Err(SynthError::EmptySpeakerId);
    }
    let w = sha_words(speaker_id.as_bytes());
    Ok(SpeakerProfile {
        speaker_id: speaker_id.to_string(),
        base_pitch_hz: uniform_in(w[0], PITCH_RANGE_HZ),
        formant_scale: uniform_in(w[1], FORMANT_SCALE_RANGE),
        speaking_rate: uniform_in(w[2], SPEAKING_RATE_RANGE),
    })
}

/// Unit ids of a normalized word: one per two-letter chunk, in `1..inventory`.
pub fn word_units(word: &str, inventory: usize) -> Vec<usize> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .chunks(2)
        .map(|c| {
            let chunk: String = c.iter().collect();
            1 + (stable_hash(&chunk) % (inventory as u64 - 1)) as usize
        })
        .collect()
}

/// Nominal duration of a unit in `[60, 120]` ms.
pub fn unit_base_ms(unit: usize) -> f64 {
    60.0 + (seed::mix64(unit as u64 ^ 0xD0_12A7) % 61) as f64
}

/// Nominal first and second formant of a unit.
pub fn unit_formants(unit: usize) -> (f64, f64) {
    let f1 = 300.0 + 600.0 * seed::unit_f64(unit as u64 ^ 0xF1);
    let f2 = 950.0 + 1550.0 * seed::unit_f64(unit as u64 ^ 0xF2);
    (f1, f2)
}

/// Unit sequence the keyword words render to.
pub fn keyword_units(words: &[String], inventory: usize) -> Vec<usize> {
    words.iter().flat_map(|w| word_units(w, inventory)).collect()
}

/// Final unit of the keyword, the class the encoder max-pool term tracks.
pub fn keyword_final_unit(words: &[String], inventory: usize) -> Option<usize> {
    keyword_units(words, inventory).last().copied()
}

#[derive(Debug, Clone, PartialEq)]
struct PlannedUnit {
    unit: usize,
    start: usize,
    len: usize,
    f0_start: f64,
    f0_end: f64,
    gain: f64,
    formants: (f64, f64),
}

/// Timeline of a rendering, available without generating audio.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPlan {
    pub total_samples: usize,
    pub alignment: Vec<UnitSegment>,
    pub keyword_end_sample: Option<usize>,
    /// Sample span of every rendered word.
    pub word_spans: Vec<(usize, usize)>,
    units: Vec<PlannedUnit>,
    mode: SynthMode,
    channel_pole: f64,
    noise_seed: u64,
}

fn ms_to_samples(ms: f64) -> usize {
    (ms * f64::from(SAMPLE_RATE_HZ) / 1000.0).round() as usize
}

pub fn plan_synth(
    prompt: &PromptSpec,
    speaker: &SpeakerProfile,
    seed: u64,
    opts: &SynthOptions,
) -> Result<SynthPlan, SynthError> {
    if opts.unit_inventory < 2 {
        return Err(SynthError::BadInventory(opts.unit_inventory));
    }
    let words = parse_prompt(&prompt.text);
    if words.is_empty() {
        return Err(SynthError::EmptyPrompt);
    }
    let keyword_words = match prompt.label {
        Label::Positive => words.len().saturating_sub(parse_prompt(&prompt.query).len()),
        Label::Negative => 0,
    };
    let spk_hash = stable_hash(&speaker.speaker_id);
    let real = opts.mode == SynthMode::Real;
    let dj = opts.mode.duration_jitter();
    let pj = opts.mode.pitch_jitter();

    let mut cursor = ms_to_samples(LEAD_SILENCE_MS);
    let mut units = Vec::new();
    let mut word_spans = Vec::with_capacity(words.len());
    let mut keyword_end = None;
    for (wi, word) in words.iter().enumerate() {
        let ids = word_units(&word.text, opts.unit_inventory);
        let wkey = seed::derive(seed, &[wi as u64]);
        let f0 = speaker.base_pitch_hz * (1.0 + pj * seed::signed_f64(wkey ^ 0x9177));
        let lens: Vec<usize> = ids
            .iter()
            .enumerate()
            .map(|(ui, &u)| {
                let jitter = 1.0 + dj * seed::signed_f64(seed::derive(wkey, &[ui as u64, 0xD0]));
                let slow = if word.slow { SLOW_FACTOR } else { 1.0 };
                ms_to_samples(unit_base_ms(u) / speaker.speaking_rate * jitter * slow).max(1)
            })
            .collect();
        let word_len: usize = lens.iter().sum();
        let word_start = cursor;
        let rise_start = word_start + (2 * word_len) / 3;
        let pitch_at = |s: usize| -> f64 {
            if word.rise && s > rise_start {
                let frac = (s - rise_start) as f64 / (word_start + word_len - rise_start) as f64;
                f0 * (1.0 + (RISE_FACTOR - 1.0) * frac)
            } else {
                f0
            }
        };
        let gain = BASE_AMPLITUDE * if word.loud { 10f64.powf(LOUD_DB / 20.0) } else { 1.0 };
        for (&u, &len) in ids.iter().zip(&lens) {
            let (mut f1, mut f2) = unit_formants(u);
            f1 *= speaker.formant_scale;
            f2 *= speaker.formant_scale;
            if real {
                let key = seed::derive(spk_hash, &[u as u64]);
                f1 *= 1.0 + ACCENT_DEPTH * seed::signed_f64(key ^ 1);
                f2 *= 1.0 + ACCENT_DEPTH * seed::signed_f64(key ^ 2);
            }
            units.push(PlannedUnit {
                unit: u,
                start: cursor,
                len,
                f0_start: pitch_at(cursor),
                f0_end: pitch_at(cursor + len),
                gain,
                formants: (f1, f2),
            });
            cursor += len;
        }
        word_spans.push((word_start, cursor));
        if wi + 1 == keyword_words {
            keyword_end = Some(cursor);
        }
        cursor += ms_to_samples(WORD_GAP_MS);
        if word.pause {
            cursor += ms_to_samples(PAUSE_MS);
        }
    }
    let total_samples = cursor + ms_to_samples(TAIL_SILENCE_MS);
    let alignment = units
        .iter()
        .map(|u| UnitSegment {
            unit: u.unit,
            start: u.start,
            end: u.start + u.len,
        })
        .collect();
    Ok(SynthPlan {
        total_samples,
        alignment,
        keyword_end_sample: keyword_end,
        word_spans,
        units,
        mode: opts.mode,
        channel_pole: if real { 0.6 * seed::unit_f64(spk_hash ^ 0xC4A7) } else { 0.0 },
        noise_seed: seed::derive(seed, &[spk_hash, 0xB4EA]),
    })
}

fn resonance(f: f64, centre: f64, bandwidth: f64) -> f64 {
    let x = (f - centre) / bandwidth;
    1.0 / (1.0 + x * x)
}

/// Renders a planned utterance to samples.
pub fn render(plan: &SynthPlan) -> Vec<f64> {
    let sr = f64::from(SAMPLE_RATE_HZ);
    let mut out = vec![0.0; plan.total_samples];
    let ramp = ms_to_samples(RAMP_MS).max(1);
    let mut phase = 0.0f64;
    let mut amps = Vec::new();
    let mut sines = Vec::new();
    for u in &plan.units {
        let f_max = u.f0_start.max(u.f0_end);
        let k_max = ((MAX_HARMONIC_HZ / f_max).floor() as usize).max(1);
        amps.clear();
        amps.extend((1..=k_max).map(|k| {
            let f = k as f64 * u.f0_start;
            resonance(f, u.formants.0, 90.0) + 0.6 * resonance(f, u.formants.1, 140.0) + 0.02
        }));
        let norm: f64 = amps.iter().sum();
        sines.resize(k_max, 0.0);
        let r = ramp.min(u.len / 2).max(1);
        for i in 0..u.len {
            let frac = i as f64 / u.len as f64;
            let f0 = u.f0_start + (u.f0_end - u.f0_start) * frac;
            phase += 2.0 * std::f64::consts::PI * f0 / sr;
            if phase > 2.0 * std::f64::consts::PI {
                phase -= 2.0 * std::f64::consts::PI;
            }
            // sin(k phase) by the Chebyshev recurrence
            let (s1, c1) = phase.sin_cos();
            let mut prev = 0.0;
            let mut cur = s1;
            let mut acc = 0.0;
            for a in &amps {
                acc += a * cur;
                let next = 2.0 * c1 * cur - prev;
                prev = cur;
                cur = next;
            }
            let env = if i < r {
                0.5 - 0.5 * (std::f64::consts::PI * i as f64 / r as f64).cos()
            } else if i >= u.len - r {
                0.5 - 0.5 * (std::f64::consts::PI * (u.len - 1 - i) as f64 / r as f64).cos()
            } else {
                1.0
            };
            out[u.start + i] = u.gain * env * acc / norm;
        }
    }
    if plan.mode == SynthMode::Real {
        let mut rng = seed::rng(plan.noise_seed, &[]);
        let mut lp = 0.0;
        for s in &mut out {
            let n: f64 = StandardNormal.sample(&mut rng);
            lp = 0.7 * lp + 0.3 * n;
            *s += 0.004 * lp;
        }
        let c = plan.channel_pole;
        let mut y = 0.0;
        for s in &mut out {
            y = (1.0 - c) * *s + c * y;
            *s = y;
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        out.iter_mut().for_each(|v| *v *= 0.99 / peak);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthResult {
    pub clip: AudioClip,
    pub prompt: PromptSpec,
    /// Sample span of each rendered word.
    pub word_spans: Vec<(usize, usize)>,
}

pub fn synth(prompt: &PromptSpec, speaker: &SpeakerProfile, seed: u64) -> Result<SynthResult, SynthError> {
    synth_with(prompt, speaker, seed, &SynthOptions::default())
}

pub fn synth_with(
    prompt: &PromptSpec,
    speaker: &SpeakerProfile,
    seed: u64,
    opts: &SynthOptions,
) -> Result<SynthResult, SynthError> {
    let plan = plan_synth(prompt, speaker, seed, opts)?;
    let samples = render(&plan);
    let clip = AudioClip {
        samples,
        sample_rate_hz: SAMPLE_RATE_HZ,
        speaker_id: speaker.speaker_id.clone(),
        label: prompt.label,
        keyword_end_sample: plan.keyword_end_sample,
        unit_alignment: plan.alignment.clone(),
    };
    Ok(SynthResult {
        clip,
        prompt: prompt.clone(),
        word_spans: plan.word_spans,
    })
}

/// Autocorrelation pitch estimate in Hz, or `None` for unvoiced input.
///
/// Picks the shortest lag whose normalized autocorrelation is within 15 % of
/// the best peak in `[min_hz, max_hz]`, which avoids octave-down errors on
/// harmonic-rich signals, and refines it with parabolic interpolation.
pub fn estimate_pitch(samples: &[f64], min_hz: f64, max_hz: f64) -> Option<f64> {
    let sr = f64::from(SAMPLE_RATE_HZ);
    let min_lag = (sr / max_hz).floor() as usize;
    let max_lag = ((sr / min_hz).ceil() as usize).min(samples.len().saturating_sub(1));
    if min_lag < 1 || min_lag + 2 >= max_lag {
        return None;
    }
    let energy: f64 = samples.iter().map(|s| s * s).sum();
    if energy <= 0.0 {
        return None;
    }
    let r: Vec<f64> = (0..=max_lag + 1)
        .map(|lag| {
            if lag >= samples.len() {
                return 0.0;
            }
            let n = samples.len() - lag;
            let sum: f64 = samples[..n].iter().zip(&samples[lag..]).map(|(a, b)| a * b).sum();
            sum / energy * samples.len() as f64 / n as f64
        })
        .collect();
    let best = (min_lag..=max_lag).map(|l| r[l]).fold(f64::NEG_INFINITY, f64::max);
    if best < 0.3 {
        return None;
    }
    let lag = (min_lag..=max_lag).find(|&l| r[l] >= 0.85 * best && r[l] >= r[l - 1] && r[l] >= r[l + 1])?;
    let (a, b, c) = (r[lag - 1], r[lag], r[lag + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 { 0.5 * (a - c) / denom } else { 0.0 };
    Some(sr / (lag as f64 + shift.clamp(-0.5, 0.5)))
}

/// Synthesizes with a random seed drawn from `rng`; convenience for tests.
pub fn synth_random<R: Rng>(
    prompt: &PromptSpec,
    speaker: &SpeakerProfile,
    opts: &SynthOptions,
    rng: &mut R,
) -> Result<SynthResult, SynthError> {
    synth_with(prompt, speaker, rng.gen(), opts)
}
