//! Desk-scale oracle corpora and the mix, train, evaluate pipeline.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::Label;
use crate::datamix::{
    sample_mixture, DatamixError, Manifest, ManifestEntry, MixSpec, OracleRecipe, Pools, RealPosRule, Source,
};
use crate::report::{RunRow, RunStatus};
use crate::evaluator::{evaluate_scores, score_utterance, EvalError, EvalReport};
use crate::frontend::{compute_features, FeatureSequence};
use crate::seed;
use crate::svdf::{KwsModel, ModelConfig};
use crate::textgen::{Keyword, PromptGenerator, PromptSpec, TextgenError};
use crate::trainer::{train, ClipLoader, TrainConfig, TrainError, TrainLog};
use crate::tts::{plan_synth, speaker_params, SynthError, SynthMode, SynthOptions};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Datamix(#[from] DatamixError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Text(#[from] TextgenError),
    #[error("feature extraction: {0}")]
    Frontend(#[from] crate::frontend::FrontendError),
}

const SUBJECTS: [&str; 24] = [
    "lights", "music", "weather", "timer", "alarm", "news", "calendar", "thermostat", "radio", "podcast",
    "traffic", "recipe", "movie", "playlist", "volume", "door", "fan", "heater", "garage", "reminder",
    "shopping list", "kitchen lamp", "living room", "bedroom lights",
];

const FRAMES: [&str; 20] = [
    "turn on the {s}",
    "turn off the {s}",
    "what is the {s} like today",
    "set the {s} for {n} minutes",
    "show me the {s}",
    "please stop the {s}",
    "can you check the {s}",
    "open the {s}",
    "play the {s} again",
    "how long is the {s}",
    "add milk to my {s}",
    "is the {s} still running",
    "make the {s} quieter",
    "start the {s} at {n}",
    "remind me about the {s}",
    "cancel the {s}",
    "what time is it",
    "tell me a joke about the {s}",
    "move the {s} to {n} percent",
    "who made this {s}",
];

const NUMBERS: [&str; 8] = ["five", "ten", "twenty", "seven", "nine", "three", "forty", "eleven"];

/// Deterministic query corpus of household commands.
pub fn desk_query_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = seed::rng(seed, &[0xC0_4905]);
    (0..n)
        .map(|_| {
            let f = FRAMES[seed::index(&mut rng, FRAMES.len())];
            let s = SUBJECTS[seed::index(&mut rng, SUBJECTS.len())];
            let num = NUMBERS[seed::index(&mut rng, NUMBERS.len())];
            f.replace("{s}", s).replace("{n}", num)
        })
        .collect()
}

/// Sizes and speaker layout of generated oracle pools.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskPoolSpec {
    pub keyword: String,
    pub tts_pos: usize,
    pub tts_neg: usize,
    pub tts_voices: usize,
    pub real_speakers: usize,
    pub real_utts_per_speaker: usize,
    pub real_neg: usize,
    pub real_neg_speakers: usize,
    /// Prefix of real speaker ids; distinct prefixes give disjoint speakers.
    pub speaker_prefix: String,
    pub unit_inventory: usize,
    pub seed: u64,
}

impl Default for DeskPoolSpec {
    fn default() -> Self {
        Self {
            keyword: "Hey Google".into(),
            tts_pos: 8000,
            tts_neg: 6000,
            tts_voices: 200,
            real_speakers: 500,
            real_utts_per_speaker: 4,
            real_neg: 6000,
            real_neg_speakers: 1500,
            speaker_prefix: "real_spk".into(),
            unit_inventory: ModelConfig::desk().encoder_output_dim,
            seed: 2024,
        }
    }
}

fn oracle_entry(
    utt_id: String,
    prompt: &PromptSpec,
    speaker_id: String,
    source: Source,
    synth_seed: u64,
    inventory: usize,
) -> Result<ManifestEntry, ExperimentError> {
    let mode = match source {
        Source::Tts => SynthMode::Tts,
        Source::Real => SynthMode::Real,
    };
    let speaker = speaker_params(&speaker_id)?;
    let plan = plan_synth(
        prompt,
        &speaker,
        synth_seed,
        &SynthOptions {
            mode,
            unit_inventory: inventory,
        },
    )?;
    let ms = |s: usize| s as f64 * 1000.0 / f64::from(crate::audio::SAMPLE_RATE_HZ);
    Ok(ManifestEntry {
        wav_path: format!("oracle:{utt_id}"),
        utt_id,
        label: prompt.label,
        speaker_id,
        source,
        duration_ms: ms(plan.total_samples),
        keyword_end_ms: plan.keyword_end_sample.map(ms),
        alignment_path: None,
        oracle: Some(OracleRecipe {
            text: prompt.text.clone(),
            query: prompt.query.clone(),
            template_id: prompt.template_id,
            seed: synth_seed,
            mode,
        }),
    })
}

/// Builds the four oracle pools; every entry re-renders on demand.
pub fn desk_pools(spec: &DeskPoolSpec) -> Result<Pools, ExperimentError> {
    let keyword = Keyword::parse(&spec.keyword)?;
    let corpus = desk_query_corpus(4000, spec.seed);
    let gen = PromptGenerator::new(&keyword, &corpus);
    let s = spec.seed;
    let inv = spec.unit_inventory;
    let pfx = &spec.speaker_prefix;

    let build = |prompts: Vec<PromptSpec>,
                 tag: &str,
                 pool: u64,
                 source: Source,
                 speaker: &(dyn Fn(usize) -> String + Sync)|
     -> Result<Manifest, ExperimentError> {
        let entries = prompts
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                oracle_entry(format!("{pfx}_{tag}_{i:05}"), p, speaker(i), source, seed::derive(s, &[pool, i as u64]), inv)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Manifest::new(entries))
    };

    let voices = spec.tts_voices.max(1);
    let tts_voice = |i: usize| format!("tts_voice_{:03}", i % voices);
    let upk = spec.real_utts_per_speaker.max(1);
    let real_pos_spk = move |i: usize| format!("{pfx}_{:04}", i / upk);
    let neg_spk = spec.real_neg_speakers.max(1);
    let real_neg_spk = move |i: usize| format!("{pfx}_{:04}", i % neg_spk);

    Ok(Pools {
        tts_pos: build(gen.positives(spec.tts_pos, &mut seed::rng(s, &[1])), "ttspos", 1, Source::Tts, &tts_voice)?,
        tts_neg: build(gen.negatives(spec.tts_neg, &mut seed::rng(s, &[2])), "ttsneg", 2, Source::Tts, &tts_voice)?,
        real_pos: build(
            gen.positives(spec.real_speakers * upk, &mut seed::rng(s, &[3])),
            "realpos",
            3,
            Source::Real,
            &real_pos_spk,
        )?,
        real_neg: build(gen.negatives(spec.real_neg, &mut seed::rng(s, &[4])), "realneg", 4, Source::Real, &real_neg_spk)?,
    })
}

/// Held-out real-mode evaluation set with features computed once.
pub struct EvalSet {
    pub pos: Vec<FeatureSequence>,
    pub neg: Vec<FeatureSequence>,
    pub neg_hours: f64,
}

impl EvalSet {
    pub fn from_manifests(pos: &Manifest, neg: &Manifest, loader: &ClipLoader) -> Result<Self, ExperimentError> {
        let feats = |m: &Manifest| -> Result<Vec<FeatureSequence>, ExperimentError> {
            m.entries
                .par_iter()
                .map(|e| Ok(compute_features(&loader.load(e)?)?))
                .collect()
        };
        Ok(Self {
            pos: feats(pos)?,
            neg: feats(neg)?,
            neg_hours: neg.total_hours(),
        })
    }

    /// `n_pos` positives and `n_neg` negatives from speakers `prefix_*`.
    pub fn desk(
        keyword: &str,
        n_pos: usize,
        n_neg: usize,
        prefix: &str,
        seed: u64,
        loader: &ClipLoader,
    ) -> Result<(Self, Pools), ExperimentError> {
        let spec = DeskPoolSpec {
            keyword: keyword.into(),
            tts_pos: 0,
            tts_neg: 0,
            real_speakers: n_pos.div_ceil(4),
            real_utts_per_speaker: 4,
            real_neg: n_neg,
            real_neg_speakers: n_pos.div_ceil(4).max(1),
            speaker_prefix: prefix.into(),
            unit_inventory: loader.synth.unit_inventory,
            seed,
            ..DeskPoolSpec::default()
        };
        let mut pools = desk_pools(&spec)?;
        pools.real_pos.entries.truncate(n_pos);
        let set = Self::from_manifests(&pools.real_pos, &pools.real_neg, loader)?;
        Ok((set, pools))
    }

    pub fn evaluate(&self, model: &KwsModel, target_fa_per_hour: f64) -> Result<EvalReport, ExperimentError> {
        let score = |v: &Vec<FeatureSequence>| -> Result<Vec<f64>, EvalError> {
            v.par_iter().map(|f| score_utterance(model, f)).collect()
        };
        Ok(evaluate_scores(&score(&self.pos)?, &score(&self.neg)?, self.neg_hours, target_fa_per_hour)?)
    }
}

pub struct RunOutcome {
    pub model: KwsModel,
    pub log: TrainLog,
    pub report: EvalReport,
    pub mixture: Manifest,
}

/// Mix, train and evaluate one configuration.
pub fn run_pipeline(
    pools: &Pools,
    spec: &MixSpec,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval: &EvalSet,
    loader: &ClipLoader,
    target_fa_per_hour: f64,
) -> Result<RunOutcome, ExperimentError> {
    let mixture = sample_mixture(pools, spec)?;
    let (model, log) = train(model_cfg, &mixture, train_cfg, loader)?;
    let report = eval.evaluate(&model, target_fa_per_hour)?;
    Ok(RunOutcome {
        model,
        log,
        report,
        mixture,
    })
}

/// Results row of one sweep point; `None` marks a failed run.
pub fn sweep_row(axis_value: usize, spec: &MixSpec, report: Option<&EvalReport>) -> RunRow {
    let (n_speakers, utts_per_speaker) = match spec.real_pos {
        RealPosRule::Stratified {
            n_speakers,
            utts_per_speaker,
        } => (n_speakers, utts_per_speaker),
        RealPosRule::Count(_) => (0, 0),
    };
    RunRow {
        axis_value,
        frr_percent: report.map(|r| r.frr_percent),
        fa_per_hour: report.map(|r| r.fa_per_hour),
        n_real_pos: spec.real_pos.total(),
        n_speakers,
        utts_per_speaker,
        seed: spec.seed,
        status: if report.is_some() { RunStatus::Ok } else { RunStatus::Failed },
    }
}

/// Writes manifests of all four pools into `dir`.
pub fn write_pools(pools: &Pools, dir: &Path) -> Result<(), DatamixError> {
    std::fs::create_dir_all(dir)?;
    pools.tts_pos.write(&dir.join("tts_pos.jsonl"))?;
    pools.tts_neg.write(&dir.join("tts_neg.jsonl"))?;
    pools.real_pos.write(&dir.join("real_pos.jsonl"))?;
    pools.real_neg.write(&dir.join("real_neg.jsonl"))?;
    Ok(())
}

pub fn label_counts(m: &Manifest) -> (usize, usize) {
    (m.count_label(Label::Positive), m.count_label(Label::Negative))
}
