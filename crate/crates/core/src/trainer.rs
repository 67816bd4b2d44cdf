//! Mini-batch training loop.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioClip, AudioError, Label, SAMPLE_RATE_HZ};
use crate::augment::{random_augment, AugmentError, AugmentPolicy};
use crate::datamix::{Manifest, ManifestEntry};
use crate::frontend::{compute_features, feature_frame_labels, FeatureSequence, FrontendError};
use crate::objective::{combined_loss, FrameTargets, LossConfig, LossError};
use crate::optimizer::{optimizer_step, OptimizerConfig, OptimizerError, OptimizerState};
use crate::svdf::{Gradients, KwsModel, ModelConfig, ModelError};
use crate::textgen::{Keyword, PromptSpec, TextgenError};
use crate::tts::{keyword_final_unit, speaker_params, synth_with, SynthError, SynthOptions};
use crate::seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("manifest has {positives} positives and {negatives} negatives, pos_fraction {pos_fraction} needs both")]
    ManifestImbalance {
        positives: usize,
        negatives: usize,
        pos_fraction: f64,
    },
    #[error("non-finite loss at step {step}")]
    DivergenceError { step: usize },
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("utterance `{utt_id}`: {message}")]
    Utterance { utt_id: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Keyword(#[from] TextgenError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub pos_fraction: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub augment: AugmentPolicy,
    pub seed: u64,
    pub keyword: String,
    /// Rescale the batch gradient to at most this L2 norm.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 64,
            pos_fraction: 0.25,
            learning_rate: 1e-3,
            optimizer: OptimizerConfig::adam(),
            loss: LossConfig::default(),
            augment: AugmentPolicy::default(),
            seed: 0,
            keyword: "Hey Google".into(),
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.pos_fraction) {
            return Err(TrainError::Config(format!("pos_fraction {}", self.pos_fraction)));
        }
        self.loss.validate()?;
        self.augment.validate()?;
        Ok(())
    }

    /// Positives in every batch.
    pub fn positives_per_batch(&self) -> usize {
        (self.pos_fraction * self.batch_size as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub ce_part: f64,
    pub mp_part: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub wall_clock_secs: f64,
    pub checkpoint_path: Option<PathBuf>,
}

impl TrainLog {
    pub fn to_csv(&self) -> Result<String, TrainError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.steps {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| TrainError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

/// Materializes manifest entries as labelled clips.
#[derive(Debug, Clone)]
pub struct ClipLoader {
    /// Directory relative WAV and alignment paths are resolved against.
    pub base_dir: PathBuf,
    pub synth: SynthOptions,
}

impl ClipLoader {
    pub fn new(base_dir: impl Into<PathBuf>, unit_inventory: usize) -> Self {
        Self {
            base_dir: base_dir.into(),
            synth: SynthOptions {
                unit_inventory,
                ..SynthOptions::default()
            },
        }
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<AudioClip, TrainError> {
        if let Some(recipe) = &entry.oracle {
            let prompt = PromptSpec {
                text: recipe.text.clone(),
                label: entry.label,
                template_id: recipe.template_id,
                query: recipe.query.clone(),
                controls: Vec::new(),
            };
            let speaker = speaker_params(&entry.speaker_id)?;
            let opts = SynthOptions {
                mode: recipe.mode,
                ..self.synth
            };
            return Ok(synth_with(&prompt, &speaker, recipe.seed, &opts)?.clip);
        }
        let wav = self.resolve(&entry.wav_path);
        let alignment = entry.alignment_path.as_deref().map(|p| self.resolve(p));
        let mut clip = audio::load_clip(&wav, alignment.as_deref(), entry.label, &entry.speaker_id)?;
        if clip.keyword_end_sample.is_none() {
            if let (Label::Positive, Some(ms)) = (entry.label, entry.keyword_end_ms) {
                let end = (ms * f64::from(SAMPLE_RATE_HZ) / 1000.0).round() as usize;
                clip.keyword_end_sample = Some(end.min(clip.len()));
            }
        }
        Ok(clip)
    }
}

/// Features and targets of one utterance.
pub fn prepare_example(
    clip: &AudioClip,
    keyword_unit: usize,
    loss: &LossConfig,
) -> Result<(FeatureSequence, FrameTargets), TrainError> {
    let feats = compute_features(clip)?;
    let labels = feature_frame_labels(clip, feats.len())?;
    let targets = FrameTargets::from_frame_labels(&labels, clip.label, keyword_unit, loss.decoder_positive_frames);
    Ok((feats, targets))
}

/// Loss and parameter gradient of one prepared example.
pub fn example_gradient(
    model: &KwsModel,
    feats: &FeatureSequence,
    targets: &FrameTargets,
    loss: &LossConfig,
) -> Result<(crate::objective::LossOutput, Gradients), TrainError> {
    let cache = model.forward_with_cache(&feats.vectors)?;
    let (enc, dec) = model.head_logits(&cache);
    let out = combined_loss(&enc, &dec, targets, loss)?;
    let upstream = crate::matrix::Matrix::hstack(&out.grad_encoder, &out.grad_decoder);
    let grads = model.backward_from_cache(&cache, &upstream)?;
    Ok((out, grads))
}

/// Features of an unaugmented utterance kept between steps, stored in f32.
struct CachedExample {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
    source_frames: usize,
    targets: FrameTargets,
}

impl CachedExample {
    fn new(feats: &FeatureSequence, targets: FrameTargets) -> Self {
        Self {
            rows: feats.vectors.rows(),
            cols: feats.vectors.cols(),
            values: feats.vectors.as_slice().iter().map(|&v| v as f32).collect(),
            source_frames: feats.source_frames,
            targets,
        }
    }

    fn features(&self) -> FeatureSequence {
        FeatureSequence {
            vectors: crate::matrix::Matrix::from_vec(self.rows, self.cols, self.values.iter().map(|&v| f64::from(v)).collect()),
            source_frames: self.source_frames,
        }
    }
}

/// Cycles through a shuffled index list, reshuffling at each pass.
struct Cycler {
    items: Vec<usize>,
    pos: usize,
    pass: u64,
    seed: u64,
}

impl Cycler {
    fn new(items: Vec<usize>, seed: u64) -> Self {
        let mut c = Self { items, pos: 0, pass: 0, seed };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        seed::shuffle(&mut self.items, &mut seed::rng(self.seed, &[self.pass]));
        self.pos = 0;
    }

    fn next(&mut self) -> usize {
        if self.pos == self.items.len() {
            self.pass += 1;
            self.reshuffle();
        }
        self.pos += 1;
        self.items[self.pos - 1]
    }
}

/// Draws batches of manifest indices with an exact positive count.
pub struct BatchSampler {
    pos: Option<Cycler>,
    neg: Option<Cycler>,
    n_pos: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(manifest: &Manifest, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let (p, n): (Vec<usize>, Vec<usize>) =
            (0..manifest.len()).partition(|&i| manifest.entries[i].label.is_positive());
        let n_pos = cfg.positives_per_batch();
        let n_neg = cfg.batch_size - n_pos;
        if (n_pos > 0 && p.is_empty()) || (n_neg > 0 && n.is_empty()) {
            return Err(TrainError::ManifestImbalance {
                positives: p.len(),
                negatives: n.len(),
                pos_fraction: cfg.pos_fraction,
            });
        }
        Ok(Self {
            pos: (!p.is_empty()).then(|| Cycler::new(p, seed::derive(cfg.seed, &[0xBA7C, 1]))),
            neg: (!n.is_empty()).then(|| Cycler::new(n, seed::derive(cfg.seed, &[0xBA7C, 0]))),
            n_pos,
            batch_size: cfg.batch_size,
        })
    }

    /// Indices of the next batch in manifest order.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        for _ in 0..self.n_pos {
            out.push(self.pos.as_mut().expect("checked in new").next());
        }
        for _ in self.n_pos..self.batch_size {
            out.push(self.neg.as_mut().expect("checked in new").next());
        }
        out.sort_unstable();
        out
    }
}

/// Observes training progress.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) {}
}

impl TrainObserver for () {}

pub fn train(
    model_cfg: &ModelConfig,
    manifest: &Manifest,
    cfg: &TrainConfig,
    loader: &ClipLoader,
) -> Result<(KwsModel, TrainLog), TrainError> {
    train_observed(model_cfg, manifest, cfg, loader, &mut ())
}

pub fn train_observed(
    model_cfg: &ModelConfig,
    manifest: &Manifest,
    cfg: &TrainConfig,
    loader: &ClipLoader,
    observer: &mut dyn TrainObserver,
) -> Result<(KwsModel, TrainLog), TrainError> {
    let started = Instant::now();
    cfg.validate()?;
    let mut model = KwsModel::init(model_cfg, seed::derive(cfg.seed, &[0x1417]))?;
    let mut log = TrainLog::default();
    if cfg.steps == 0 {
        return Ok((model, log));
    }
    if manifest.is_empty() {
        return Err(TrainError::Config("manifest is empty".into()));
    }
    let keyword = Keyword::parse(&cfg.keyword)?;
    let keyword_unit = keyword_final_unit(&keyword.words(), model_cfg.encoder_output_dim)
        .ok_or_else(|| TrainError::Config("keyword renders no units".into()))?;
    let mut augment = cfg.augment.clone();
    augment.resolve_noise(seed::derive(cfg.seed, &[0x0015E]))?;
    let mut sampler = BatchSampler::new(manifest, cfg)?;
    let mut state = OptimizerState::new(model.param_count());
    // with an identity policy every utterance always yields the same features
    let cache: Vec<OnceLock<CachedExample>> = if augment.is_identity() {
        (0..manifest.len()).map(|_| OnceLock::new()).collect()
    } else {
        Vec::new()
    };

    for step in 0..cfg.steps {
        let batch = sampler.next_batch();
        let results: Vec<Result<_, TrainError>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &idx)| {
                let entry = &manifest.entries[idx];
                let wrap = |e: TrainError| TrainError::Utterance {
                    utt_id: entry.utt_id.clone(),
                    message: e.to_string(),
                };
                if let Some(cell) = cache.get(idx) {
                    if cell.get().is_none() {
                        let clip = loader.load(entry).map_err(wrap)?;
                        let (feats, targets) = prepare_example(&clip, keyword_unit, &cfg.loss).map_err(wrap)?;
                        let _ = cell.set(CachedExample::new(&feats, targets));
                    }
                    let ex = cell.get().expect("filled above");
                    return example_gradient(&model, &ex.features(), &ex.targets, &cfg.loss);
                }
                let clean = loader.load(entry).map_err(wrap)?;
                let mut rng = seed::rng(cfg.seed, &[0xA46, step as u64, slot as u64]);
                let clip = random_augment(&clean, &augment, &mut rng)?;
                let (feats, targets) = prepare_example(&clip, keyword_unit, &cfg.loss).map_err(wrap)?;
                example_gradient(&model, &feats, &targets, &cfg.loss)
            })
            .collect();
        let mut grads = Gradients::zeros_like(&model);
        let mut rec = StepRecord {
            step,
            loss: 0.0,
            ce_part: 0.0,
            mp_part: 0.0,
        };
        for r in results {
            let (out, g) = r?;
            rec.loss += out.total;
            rec.ce_part += out.ce_part;
            rec.mp_part += out.mp_part;
            grads.add_assign(&g);
        }
        let inv = 1.0 / batch.len() as f64;
        rec.loss *= inv;
        rec.ce_part *= inv;
        rec.mp_part *= inv;
        grads.scale(inv);
        if !rec.loss.is_finite() || grads.values.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::DivergenceError { step });
        }
        if let Some(max) = cfg.max_grad_norm {
            let norm = grads.values.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max {
                grads.scale(max / norm);
            }
        }
        optimizer_step(model.params_mut(), &grads.values, &mut state, &cfg.optimizer, cfg.learning_rate)?;
        observer.on_step(&rec);
        log.steps.push(rec);
    }
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamix::{OracleRecipe, Source};
    use crate::tts::SynthMode;

    fn oracle_entry(i: usize, label: Label) -> ManifestEntry {
        let text = match label {
            Label::Positive => "Hey Google, what time is it".to_string(),
            Label::Negative => format!("play track number {i}"),
        };
        ManifestEntry {
            utt_id: format!("u{i}"),
            wav_path: format!("oracle:u{i}"),
            label,
            speaker_id: format!("voice{}", i % 3),
            source: Source::Tts,
            duration_ms: 0.0,
            keyword_end_ms: label.is_positive().then_some(0.0),
            alignment_path: None,
            oracle: Some(OracleRecipe {
                text,
                query: if label.is_positive() { "what time is it".into() } else { String::new() },
                template_id: if label.is_positive() { 1 } else { 6 },
                seed: i as u64,
                mode: SynthMode::Tts,
            }),
        }
    }

    fn manifest(n_pos: usize, n_neg: usize) -> Manifest {
        let mut e: Vec<_> = (0..n_pos).map(|i| oracle_entry(i, Label::Positive)).collect();
        e.extend((n_pos..n_pos + n_neg).map(|i| oracle_entry(i, Label::Negative)));
        Manifest::new(e)
    }

    fn small_model() -> ModelConfig {
        ModelConfig::encoder_decoder(8, 4, 4, 16)
    }

    #[test]
    fn zero_steps_returns_init() {
        let cfg = TrainConfig { steps: 0, seed: 5, ..TrainConfig::default() };
        let (m, log) = train(&small_model(), &manifest(2, 2), &cfg, &ClipLoader::new(".", 16)).unwrap();
        assert!(log.steps.is_empty());
        assert_eq!(m.params(), KwsModel::init(&small_model(), seed::derive(5, &[0x1417])).unwrap().params());
    }

    #[test]
    fn batch_positive_count_is_exact() {
        let m = manifest(7, 13);
        let cfg = TrainConfig { batch_size: 10, pos_fraction: 0.25, ..TrainConfig::default() };
        let mut s = BatchSampler::new(&m, &cfg).unwrap();
        for _ in 0..1000 {
            let b = s.next_batch();
            assert_eq!(b.len(), 10);
            assert_eq!(b.iter().filter(|&&i| m.entries[i].label.is_positive()).count(), 3);
        }
    }

    #[test]
    fn one_label_manifest_is_rejected() {
        let cfg = TrainConfig { steps: 1, ..TrainConfig::default() };
        let err = train(&small_model(), &manifest(0, 4), &cfg, &ClipLoader::new(".", 16)).unwrap_err();
        assert!(matches!(err, TrainError::ManifestImbalance { positives: 0, negatives: 4, .. }));
    }

    #[test]
    fn training_is_reproducible_and_logged() {
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 4,
            augment: AugmentPolicy::default(),
            seed: 11,
            ..TrainConfig::default()
        };
        let loader = ClipLoader::new(".", 16);
        let (a, log) = train(&small_model(), &manifest(3, 3), &cfg, &loader).unwrap();
        let (b, _) = train(&small_model(), &manifest(3, 3), &cfg, &loader).unwrap();
        assert_eq!(a.to_checkpoint_bytes(), b.to_checkpoint_bytes());
        assert_eq!(log.steps.len(), 3);
        assert!(log.steps.iter().all(|r| r.loss.is_finite()));
        let csv = log.to_csv().unwrap();
        assert!(csv.starts_with("step,loss,ce_part,mp_part\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
