//! Multistyle augmentation: additive noise at a target SNR and simulated
//! reverberation, both applied to raw audio before featurization.

use std::cell::RefCell;
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioClip, AudioError, SAMPLE_RATE_HZ};

/// Peak a mixture is rescaled to when it would otherwise clip.
pub const CLIP_GUARD_PEAK: f64 = 0.99;
/// Kernels longer than this are convolved through the FFT.
const DIRECT_CONV_MAX_TAPS: usize = 64;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("noise has zero power; SNR is undefined")]
    ZeroNoise,
    #[error("clip has zero power; SNR is undefined")]
    ZeroSignal,
    #[error("impulse response is empty, non-finite or all zeros")]
    DegenerateRir,
    #[error("invalid augmentation policy: {0}")]
    InvalidPolicy(String),
    #[error("policy needs noise but the noise corpus is empty")]
    PolicyUnsatisfiable,
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    /// Closed SNR interval in dB; `None` disables noise mixing.
    pub snr_db_range: Option<[f64; 2]>,
    pub reverb_probability: f64,
    pub rir_decay_ms_range: [f64; 2],
    /// WAV files making up the noise corpus.
    pub noise_files: Vec<PathBuf>,
    /// Fall back to procedurally generated noise when no files are given.
    pub synthetic_noise: bool,
    #[serde(skip)]
    pub noise_corpus: Vec<Arc<AudioClip>>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            snr_db_range: Some([5.0, 25.0]),
            reverb_probability: 0.5,
            rir_decay_ms_range: [50.0, 300.0],
            noise_files: Vec::new(),
            synthetic_noise: true,
            noise_corpus: Vec::new(),
        }
    }
}

impl AugmentPolicy {
    /// A policy that leaves clips untouched.
    pub fn disabled() -> Self {
        Self {
            snr_db_range: None,
            reverb_probability: 0.0,
            synthetic_noise: false,
            ..Self::default()
        }
    }

    /// True when the policy can never change a clip.
    pub fn is_identity(&self) -> bool {
        self.snr_db_range.is_none() && self.reverb_probability == 0.0
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if let Some([lo, hi]) = self.snr_db_range {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(AugmentError::InvalidPolicy(format!("snr range [{lo}, {hi}]")));
            }
        }
        if !(0.0..=1.0).contains(&self.reverb_probability) {
            return Err(AugmentError::InvalidPolicy(format!(
                "reverb probability {}",
                self.reverb_probability
            )));
        }
        let [lo, hi] = self.rir_decay_ms_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(AugmentError::InvalidPolicy(format!("rir decay range [{lo}, {hi}]")));
        }
        Ok(())
    }

    /// Loads `noise_files`, then generates synthetic noise if the corpus is
    /// still empty and `synthetic_noise` is set.
    pub fn resolve_noise(&mut self, seed: u64) -> Result<(), AugmentError> {
        if self.noise_corpus.is_empty() {
            for path in &self.noise_files {
                let (samples, sr) = audio::read_wav(path)?;
                self.noise_corpus
                    .push(Arc::new(AudioClip::new(samples, sr)));
            }
        }
        if self.noise_corpus.is_empty() && self.synthetic_noise {
            self.noise_corpus = synthetic_noise_corpus(seed)
                .into_iter()
                .map(Arc::new)
                .collect();
        }
        Ok(())
    }
}

/// Records which effects `random_augment` applied.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AugmentTrace {
    pub reverb_decay_ms: Option<f64>,
    pub snr_db: Option<f64>,
}

/// Adds `noise` (tiled from sample 0) at `snr_db` relative to the clip.
pub fn mix_noise(clip: &AudioClip, noise: &AudioClip, snr_db: f64) -> Result<AudioClip, AugmentError> {
    mix_noise_at(clip, noise, snr_db, 0)
}

/// Adds `noise`, tiled starting at `offset`, scaled so the clip-to-noise
/// power ratio of the summed components is `snr_db`. If the sum would clip,
/// the whole mixture is rescaled to a peak of [`CLIP_GUARD_PEAK`].
pub fn mix_noise_at(
    clip: &AudioClip,
    noise: &AudioClip,
    snr_db: f64,
    offset: usize,
) -> Result<AudioClip, AugmentError> {
    if noise.is_empty() || noise.power() == 0.0 {
        return Err(AugmentError::ZeroNoise);
    }
    let p_clip = clip.power();
    if p_clip == 0.0 {
        return Err(AugmentError::ZeroSignal);
    }
    let segment = tiled(&noise.samples, offset, clip.len());
    let p_noise = audio::power(&segment);
    if p_noise == 0.0 {
        return Err(AugmentError::ZeroNoise);
    }
    let gain = (p_clip / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mixed = clip
        .samples
        .iter()
        .zip(&segment)
        .map(|(s, n)| s + gain * n)
        .collect();
    Ok(clip.with_samples(peak_guard(mixed)))
}

fn tiled(noise: &[f64], offset: usize, len: usize) -> Vec<f64> {
    (0..len).map(|i| noise[(offset + i) % noise.len()]).collect()
}

fn peak_guard(mut samples: Vec<f64>) -> Vec<f64> {
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 1.0 {
        let k = CLIP_GUARD_PEAK / peak;
        samples.iter_mut().for_each(|s| *s *= k);
    }
    samples
}

/// Convolves with `rir` and truncates to the input length. The direct path
/// sits at `rir[0]`, so alignment is preserved unshifted.
pub fn apply_reverb(clip: &AudioClip, rir: &[f64]) -> Result<AudioClip, AugmentError> {
    if rir.is_empty() || rir.iter().any(|v| !v.is_finite()) || rir.iter().all(|&v| v == 0.0) {
        return Err(AugmentError::DegenerateRir);
    }
    let out = convolve_truncated(&clip.samples, rir);
    Ok(clip.with_samples(peak_guard(out)))
}

fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    if h.len() <= DIRECT_CONV_MAX_TAPS {
        let mut y = vec![0.0; n];
        for (i, yi) in y.iter_mut().enumerate() {
            let kmax = h.len().min(i + 1);
            *yi = (0..kmax).map(|k| h[k] * x[i - k]).sum();
        }
        return y;
    }
    thread_local! {
        static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
    }
    let taps = h.len().min(n);
    let size = (n + taps - 1).next_power_of_two();
    let (fwd, inv) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(size), p.plan_fft_inverse(size))
    });
    let mut a: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    a.resize(size, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = h[..taps].iter().map(|&v| Complex::new(v, 0.0)).collect();
    b.resize(size, Complex::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (ai, bi) in a.iter_mut().zip(&b) {
        *ai *= bi;
    }
    inv.process(&mut a);
    let scale = 1.0 / size as f64;
    a[..n].iter().map(|c| c.re * scale).collect()
}

/// Delta at index 0 plus a Gaussian tail decaying by 60 dB over `decay_ms`.
/// The tail carries roughly half the direct-path energy.
pub fn synthetic_rir<R: Rng>(decay_ms: f64, rng: &mut R) -> Vec<f64> {
    let len = ((decay_ms * f64::from(SAMPLE_RATE_HZ) / 1000.0).round() as usize).max(2);
    let gain = (0.5 * 6.0 * std::f64::consts::LN_10 / len as f64).sqrt();
    let mut rir = Vec::with_capacity(len);
    rir.push(1.0);
    for k in 1..len {
        let g: f64 = StandardNormal.sample(rng);
        rir.push(gain * g * 10f64.powf(-3.0 * k as f64 / len as f64));
    }
    rir
}

pub fn random_augment<R: Rng>(
    clip: &AudioClip,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<AudioClip, AugmentError> {
    random_augment_traced(clip, policy, rng).map(|(c, _)| c)
}

/// Reverb with `reverb_probability`, then noise at an SNR drawn uniformly
/// from the policy range.
pub fn random_augment_traced<R: Rng>(
    clip: &AudioClip,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<(AudioClip, AugmentTrace), AugmentError> {
    policy.validate()?;
    if policy.snr_db_range.is_some() && policy.noise_corpus.is_empty() {
        return Err(AugmentError::PolicyUnsatisfiable);
    }
    let mut trace = AugmentTrace::default();
    let mut out = clip.clone();
    if rng.gen::<f64>() < policy.reverb_probability {
        let [lo, hi] = policy.rir_decay_ms_range;
        let decay = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        let rir = synthetic_rir(decay, rng);
        out = apply_reverb(&out, &rir)?;
        trace.reverb_decay_ms = Some(decay);
    }
    if let Some([lo, hi]) = policy.snr_db_range {
        let noise = &policy.noise_corpus[crate::seed::index(rng, policy.noise_corpus.len())];
        let snr = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        let offset = crate::seed::index(rng, noise.len().max(1));
        if out.power() > 0.0 {
            out = mix_noise_at(&out, noise, snr, offset)?;
            trace.snr_db = Some(snr);
        }
    }
    Ok((out, trace))
}

/// Two seconds each of white, pink, brown, mains hum and babble-like noise.
pub fn synthetic_noise_corpus(seed: u64) -> Vec<AudioClip> {
    let n = 2 * SAMPLE_RATE_HZ as usize;
    let mut rng = crate::seed::rng(seed, &[0x4015E]);
    let mut white = || -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };

    let w = white();
    // Paul Kellet's economy pink filter
    let mut pink = Vec::with_capacity(n);
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    for &x in &white() {
        b0 = 0.99765 * b0 + x * 0.0990460;
        b1 = 0.96300 * b1 + x * 0.2965164;
        b2 = 0.57000 * b2 + x * 1.0526913;
        pink.push(b0 + b1 + b2 + x * 0.1848);
    }
    let mut brown = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &x in &white() {
        acc = 0.995 * acc + 0.1 * x;
        brown.push(acc);
    }
    let hiss = white();
    let hum: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / f64::from(SAMPLE_RATE_HZ);
            (1..=5)
                .map(|k| (2.0 * std::f64::consts::PI * 50.0 * k as f64 * t).sin() / k as f64)
                .sum::<f64>()
                + 0.05 * hiss[i]
        })
        .collect();
    let mut babble = vec![0.0; n];
    for v in 0..6 {
        let f0 = 100.0 + 30.0 * v as f64;
        let rate = 3.0 + v as f64 * 0.7;
        for (i, b) in babble.iter_mut().enumerate() {
            let t = i as f64 / f64::from(SAMPLE_RATE_HZ);
            let env = (0.5 + 0.5 * (2.0 * std::f64::consts::PI * rate * t + v as f64).sin()).powi(2);
            let tone: f64 = (1..=8)
                .map(|k| (2.0 * std::f64::consts::PI * f0 * k as f64 * t).sin() / k as f64)
                .sum();
            *b += env * tone;
        }
    }
    [w, pink, brown, hum, babble]
        .into_iter()
        .map(|s| {
            let peak = s.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            AudioClip::new(s.iter().map(|v| 0.5 * v / peak).collect(), SAMPLE_RATE_HZ)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{Label, UnitSegment};
    use rand::Rng;
    use proptest::prelude::*;

    fn white(seed: u64, n: usize, amp: f64) -> AudioClip {
        let mut rng = crate::seed::rng(seed, &[]);
        AudioClip::new(
            (0..n).map(|_| rng.gen_range(-amp..amp)).collect(),
            SAMPLE_RATE_HZ,
        )
    }

    fn labelled(seed: u64) -> AudioClip {
        let mut c = white(seed, 4000, 0.3);
        c.label = Label::Positive;
        c.speaker_id = "spk".into();
        c.keyword_end_sample = Some(3000);
        c.unit_alignment = vec![UnitSegment { unit: 2, start: 100, end: 3000 }];
        c
    }

    #[test]
    fn zero_db_equalizes_rms() {
        let clip = white(1, 8000, 0.2);
        let noise = white(2, 8000, 0.05);
        let out = mix_noise(&clip, &noise, 0.0).unwrap();
        let scaled: Vec<f64> = out.samples.iter().zip(&clip.samples).map(|(o, c)| o - c).collect();
        let ratio = (audio::power(&scaled) / clip.power()).sqrt();
        assert!((ratio - 1.0).abs() < 1e-6, "ratio {ratio}");
    }

    #[test]
    fn very_high_snr_is_clean() {
        let clip = white(3, 8000, 0.5);
        let out = mix_noise(&clip, &white(4, 100, 0.5), 120.0).unwrap();
        for (a, b) in out.samples.iter().zip(&clip.samples) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn ten_db_measured_on_components() {
        let clip = white(5, 16000, 0.1);
        let noise = white(6, 16000, 0.1);
        let out = mix_noise(&clip, &noise, 10.0).unwrap();
        let added: Vec<f64> = out.samples.iter().zip(&clip.samples).map(|(o, c)| o - c).collect();
        let snr = 10.0 * (clip.power() / audio::power(&added)).log10();
        assert!((9.9..=10.1).contains(&snr), "snr {snr}");
    }

    #[test]
    fn zero_power_inputs_error() {
        let clip = white(7, 1000, 0.3);
        let silent = AudioClip::new(vec![0.0; 1000], SAMPLE_RATE_HZ);
        assert!(matches!(mix_noise(&clip, &silent, 10.0), Err(AugmentError::ZeroNoise)));
        assert!(matches!(mix_noise(&silent, &clip, 10.0), Err(AugmentError::ZeroSignal)));
    }

    #[test]
    fn clipping_guard_rescales_to_099() {
        let clip = AudioClip::new(vec![0.9; 1000], SAMPLE_RATE_HZ);
        let noise = AudioClip::new(vec![1.0; 1000], SAMPLE_RATE_HZ);
        let out = mix_noise(&clip, &noise, 0.0).unwrap();
        assert!((out.peak() - CLIP_GUARD_PEAK).abs() < 1e-12);
    }

    #[test]
    fn delta_and_scaling_kernels() {
        let clip = white(8, 500, 0.5);
        assert_eq!(apply_reverb(&clip, &[1.0]).unwrap().samples, clip.samples);
        let half = apply_reverb(&clip, &[0.5]).unwrap();
        for (h, c) in half.samples.iter().zip(&clip.samples) {
            assert_eq!(*h, 0.5 * c);
        }
    }

    #[test]
    fn impulse_reproduces_kernel_prefix() {
        let mut rng = crate::seed::rng(9, &[]);
        let rir = synthetic_rir(100.0, &mut rng);
        assert!(rir.len() > DIRECT_CONV_MAX_TAPS);
        let mut impulse = vec![0.0; 1000];
        impulse[0] = 0.5;
        let out = apply_reverb(&AudioClip::new(impulse, SAMPLE_RATE_HZ), &rir).unwrap();
        for (o, h) in out.samples.iter().zip(&rir) {
            assert!((o - 0.5 * h).abs() < 1e-12);
        }
        let short = [1.0, -0.5, 0.25];
        let mut impulse = vec![0.0; 10];
        impulse[0] = 1.0;
        let out = apply_reverb(&AudioClip::new(impulse, SAMPLE_RATE_HZ), &short).unwrap();
        assert_eq!(&out.samples[..3], &short);
    }

    #[test]
    fn fft_and_direct_convolution_agree() {
        let x = white(10, 700, 0.5).samples;
        let h: Vec<f64> = white(11, 200, 0.2).samples;
        let fast = convolve_truncated(&x, &h);
        for i in 0..x.len() {
            let direct: f64 = (0..h.len().min(i + 1)).map(|k| h[k] * x[i - k]).sum();
            assert!((fast[i] - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_rir() {
        let clip = white(12, 100, 0.3);
        assert!(matches!(apply_reverb(&clip, &[]), Err(AugmentError::DegenerateRir)));
        assert!(matches!(apply_reverb(&clip, &[0.0, 0.0]), Err(AugmentError::DegenerateRir)));
    }

    #[test]
    fn random_augment_is_seeded() {
        let mut policy = AugmentPolicy::default();
        policy.resolve_noise(1).unwrap();
        let clip = labelled(13);
        let a = random_augment(&clip, &policy, &mut crate::seed::rng(5, &[])).unwrap();
        let b = random_augment(&clip, &policy, &mut crate::seed::rng(5, &[])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.label, clip.label);
        assert_eq!(a.speaker_id, clip.speaker_id);
        assert_eq!(a.keyword_end_sample, clip.keyword_end_sample);
        assert_eq!(a.unit_alignment, clip.unit_alignment);
        assert_eq!(a.len(), clip.len());
    }

    #[test]
    fn disabled_effects_leave_clip_unchanged() {
        let mut policy = AugmentPolicy {
            snr_db_range: Some([120.0, 120.0]),
            reverb_probability: 0.0,
            ..AugmentPolicy::default()
        };
        policy.resolve_noise(2).unwrap();
        let clip = labelled(14);
        let out = random_augment(&clip, &policy, &mut crate::seed::rng(1, &[])).unwrap();
        for (a, b) in out.samples.iter().zip(&clip.samples) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_corpus_is_unsatisfiable() {
        let policy = AugmentPolicy {
            synthetic_noise: false,
            ..AugmentPolicy::default()
        };
        let err = random_augment(&labelled(1), &policy, &mut crate::seed::rng(1, &[])).unwrap_err();
        assert!(matches!(err, AugmentError::PolicyUnsatisfiable));
    }

    #[test]
    fn reverb_frequency_tracks_probability() {
        let policy = AugmentPolicy {
            snr_db_range: None,
            reverb_probability: 0.5,
            rir_decay_ms_range: [5.0, 5.0],
            ..AugmentPolicy::default()
        };
        let clip = white(15, 480, 0.3);
        let mut rng = crate::seed::rng(77, &[]);
        let applied = (0..1000)
            .filter(|_| {
                random_augment_traced(&clip, &policy, &mut rng)
                    .unwrap()
                    .1
                    .reverb_decay_ms
                    .is_some()
            })
            .count();
        assert!((450..=550).contains(&applied), "applied {applied}");
    }

    proptest! {
        #[test]
        fn snr_contract(seed in 0u64..500, snr in -10.0f64..40.0, amp in 0.01f64..0.3) {
            let clip = white(seed, 2000, amp);
            let noise = white(seed + 1000, 777, 0.2);
            let offset = (seed as usize * 31) % 777;
            let out = mix_noise_at(&clip, &noise, snr, offset).unwrap();
            // skip cases where the clipping guard rescaled the mixture
            prop_assume!(out.peak() < 0.98);
            let added: Vec<f64> = out.samples.iter().zip(&clip.samples).map(|(o, c)| o - c).collect();
            let measured = 10.0 * (clip.power() / audio::power(&added)).log10();
            prop_assert!((measured - snr).abs() <= 0.1);
            prop_assert_eq!(out.len(), clip.len());
        }

        #[test]
        fn reverb_is_linear(seed in 0u64..500, a in -2.0f64..2.0, taps in 1usize..300) {
            let x = white(seed, 600, 0.2);
            let h = white(seed + 7, taps, 0.4).samples;
            prop_assume!(h.iter().any(|&v| v != 0.0));
            let scaled = x.with_samples(x.samples.iter().map(|s| a * s).collect());
            let lhs = apply_reverb(&scaled, &h).unwrap();
            let rhs = apply_reverb(&x, &h).unwrap();
            prop_assume!(lhs.peak() < 0.98 && rhs.peak() < 0.98);
            for (l, r) in lhs.samples.iter().zip(&rhs.samples) {
                prop_assert!((l - a * r).abs() < 1e-9);
            }
            prop_assert_eq!(lhs.len(), x.len());
        }
    }
}
