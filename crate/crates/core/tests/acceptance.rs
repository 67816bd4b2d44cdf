//! Acceptance suite: one PASS/FAIL line per criterion, then a single assertion.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use kwsforge::audio::Label;
use kwsforge::augment::AugmentPolicy;
use kwsforge::datamix::{sample_mixture, sweep_grid, MixSpec, RealPosRule, SweepAxis};
use kwsforge::evaluator::{det_curve, frr_at_threshold, select_threshold, DEFAULT_TARGET_FA_PER_HOUR};
use kwsforge::experiment::{desk_pools, sweep_row, DeskPoolSpec, EvalSet};
use kwsforge::frontend::FEATURE_DIM;
use kwsforge::matrix::Matrix;
use kwsforge::objective::{
    ce_frame_loss, combined_loss, max_pool_loss, FrameTargets, LossConfig, PoolTarget, DECODER_BACKGROUND,
    DECODER_KEYWORD,
};
use kwsforge::report::rows_to_csv;
use kwsforge::seed;
use kwsforge::svdf::{Activation, KwsModel, LayerConfig, ModelConfig, SvdfLayerConfig};
use kwsforge::textgen::{contains_keyword, Keyword, PromptGenerator, PromptSpec};
use kwsforge::trainer::{train, ClipLoader, TrainConfig};
use kwsforge::tts::{estimate_pitch, speaker_params, synth, SynthResult};

const KEYWORD: &str = "Hey Google";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report_line(n: usize, name: &str, o: &Outcome) {
    let line = format!(
        "acceptance criterion {n:>2} [{name}]: {} ({})",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    // bypasses libtest output capture
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect())
}

fn svdf(nodes: usize, input_dim: usize, memory: usize, activation: Activation) -> LayerConfig {
    LayerConfig::Svdf(SvdfLayerConfig {
        nodes,
        input_dim,
        memory,
        activation,
    })
}

fn streaming_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(1, &[]);
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let cfg = match i % 3 {
            0 => ModelConfig::desk(),
            1 => ModelConfig::encoder_decoder(8 + rng.gen_range(0..24), 1 + rng.gen_range(0..12), 4 + rng.gen_range(0..8), 5),
            _ => ModelConfig::encoder_decoder(16, 32, 8, 12),
        };
        let mut model = KwsModel::init(&cfg, i).unwrap();
        for p in model.params_mut().iter_mut().filter(|p| **p == 0.0) {
            *p = 0.1 * rng.gen_range(-1.0..1.0);
        }
        let frames = rng.gen_range(2..=200);
        let x = random_matrix(&mut rng, frames, FEATURE_DIM);
        let batch = model.forward_matrix(&x).unwrap();
        let mut state = model.stream_init();
        for t in 0..frames {
            let y = model.forward_stream(&mut state, x.row(t)).unwrap();
            for (a, b) in y.iter().zip(batch.row(t)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 1e-5 && secs < 10.0, format!("max |stream - batch| = {worst:.3e}, {secs:.2} s"))
}

/// Encoder head of three linear units, decoder of two.
fn tiny_model() -> ModelConfig {
    ModelConfig {
        layers: vec![svdf(3, FEATURE_DIM, 3, Activation::None), svdf(2, 3, 3, Activation::None)],
        encoder_output_dim: 3,
        decoder_output_dim: 2,
        split_index: 1,
    }
}

fn gradient_check() -> Outcome {
    let cfg = tiny_model();
    let n_params = cfg.param_count();
    let mut rng = seed::rng(2, &[]);
    let mut model = KwsModel::init(&cfg, 7).unwrap();
    for p in model.params_mut() {
        *p += 0.2 * rng.gen_range(-1.0..1.0);
    }
    let frames = 14;
    let x = random_matrix(&mut rng, frames, FEATURE_DIM);
    let mut labels = vec![0usize; frames];
    for (t, l) in labels.iter_mut().enumerate().take(11).skip(6) {
        *l = 1 + t % 2;
    }
    let targets = FrameTargets {
        encoder: labels,
        decoder: (0..frames).map(|t| usize::from((6..=10).contains(&t))).collect(),
        end_frame: Some(10),
        label: Label::Positive,
        keyword_unit: 2,
    };
    let loss_cfg = LossConfig {
        pool_window_frames: 6,
        ..LossConfig::default()
    };
    let loss_at = |m: &KwsModel| -> (f64, Matrix, Matrix) {
        let logits = m.forward_matrix(&x).unwrap();
        let enc = logits.columns(0, 3);
        let dec = logits.columns(3, 5);
        let out = combined_loss(&enc, &dec, &targets, &loss_cfg).unwrap();
        (out.total, out.grad_encoder, out.grad_decoder)
    };
    let (_, ge, gd) = loss_at(&model);
    let upstream = Matrix::hstack(&ge, &gd);
    let analytic = model.backward(
        &kwsforge::frontend::FeatureSequence {
            vectors: x.clone(),
            source_frames: 2 * frames + 1,
        },
        &upstream,
    );
    let analytic = analytic.unwrap().values;
    let eps = 1e-4;
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = model.clone();
        plus.params_mut()[i] += eps;
        let mut minus = model.clone();
        minus.params_mut()[i] -= eps;
        let numeric = (loss_at(&plus).0 - loss_at(&minus).0) / (2.0 * eps);
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    outcome(
        n_params <= 500 && worst < 1e-4,
        format!("{n_params} params, worst relative error {worst:.3e}"),
    )
}

fn random_targets<R: Rng>(rng: &mut R, frames: usize, units: usize) -> FrameTargets {
    let label = if rng.gen_bool(0.5) { Label::Positive } else { Label::Negative };
    let end = rng.gen_range(0..frames);
    FrameTargets {
        encoder: (0..frames).map(|_| rng.gen_range(0..units)).collect(),
        decoder: (0..frames)
            .map(|t| usize::from(label.is_positive() && t + 5 > end && t <= end))
            .collect(),
        end_frame: label.is_positive().then_some(end),
        label,
        keyword_unit: rng.gen_range(1..units),
    }
}

fn endpoints_and_linearity() -> Outcome {
    let mut rng = seed::rng(3, &[]);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let frames = rng.gen_range(3..60);
        let units = rng.gen_range(3..20);
        let enc = random_matrix(&mut rng, frames, units);
        let dec = random_matrix(&mut rng, frames, 2);
        let targets = random_targets(&mut rng, frames, units);
        let base = LossConfig {
            encoder_weight: rng.gen_range(0.2..2.0),
            decoder_weight: rng.gen_range(0.2..2.0),
            ..LossConfig::default()
        };
        let at = |alpha: f64| combined_loss(&enc, &dec, &targets, &LossConfig { alpha, ..base }).unwrap().total;
        let ce = base.encoder_weight * ce_frame_loss(&enc, &targets.encoder).unwrap().0
            + base.decoder_weight * ce_frame_loss(&dec, &targets.decoder).unwrap().0;
        let pool = |keyword_class, background_class| PoolTarget {
            label: targets.label,
            end_frame: targets.end_frame,
            keyword_class,
            background_class,
        };
        let w = base.pool_window_frames;
        let mp = base.encoder_weight * max_pool_loss(&enc, &pool(targets.keyword_unit, 0), w).unwrap().0
            + base.decoder_weight * max_pool_loss(&dec, &pool(DECODER_KEYWORD, DECODER_BACKGROUND), w).unwrap().0;
        let (l0, l1) = (at(0.0), at(1.0));
        worst = worst.max((l0 - ce).abs()).max((l1 - mp).abs());
        for _ in 0..10 {
            let a: f64 = rng.gen_range(0.0..1.0);
            worst = worst.max((at(a) - ((1.0 - a) * l0 + a * l1)).abs());
        }
    }
    outcome(worst <= 1e-12, format!("max deviation {worst:.3e}"))
}

/// Cross-entropy written out from its definition.
fn oracle_ce(row: &[f64], class: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in row {
        sum += (z - m).exp();
    }
    m + sum.ln() - row[class]
}

fn max_pool_oracle() -> Outcome {
    let mut rng = seed::rng(4, &[]);
    let mut mismatches = 0;
    for case in 0..50 {
        let frames = rng.gen_range(1..80);
        let classes = rng.gen_range(2..12);
        let logits = random_matrix(&mut rng, frames, classes);
        let positive = case % 2 == 0;
        let end = rng.gen_range(0..frames);
        let window = rng.gen_range(1..15);
        let keyword = rng.gen_range(1..classes);
        let target = PoolTarget {
            label: if positive { Label::Positive } else { Label::Negative },
            end_frame: positive.then_some(end),
            keyword_class: keyword,
            background_class: 0,
        };
        let (lo, hi) = if positive { (end.saturating_sub(window - 1), end) } else { (0, frames - 1) };
        let mut best = lo;
        for t in lo..=hi {
            if logits.get(t, keyword) > logits.get(best, keyword) {
                best = t;
            }
        }
        let expected = oracle_ce(logits.row(best), if positive { keyword } else { 0 });
        let (got, grad) = max_pool_loss(&logits, &target, window).unwrap();
        let nonzero_rows: Vec<usize> = (0..frames).filter(|&t| grad.row(t).iter().any(|g| *g != 0.0)).collect();
        if got != expected || nonzero_rows != vec![best] {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over 50 sequences"))
}

fn metric_oracle() -> Outcome {
    let mut rng = seed::rng(5, &[]);
    let mut mismatches = 0;
    for case in 0..20 {
        let n_neg = rng.gen_range(1..=1000);
        let n_pos = rng.gen_range(1..=1000);
        let quantize = case % 3 == 0;
        let mut draw = |n: usize, shift: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.0..1.0) + shift;
                    if quantize {
                        (v * 20.0).round() / 20.0
                    } else {
                        v
                    }
                })
                .collect()
        };
        let neg = draw(n_neg, 0.0);
        let pos = draw(n_pos, 0.3);
        let hours = rng.gen_range(0.5..60.0);
        let target = if case % 4 == 0 { DEFAULT_TARGET_FA_PER_HOUR } else { rng.gen_range(0.0..20.0) };

        let mut candidates = neg.clone();
        candidates.push(f64::INFINITY);
        candidates.sort_by(|a, b| a.total_cmp(b));
        candidates.dedup();
        let fa_at = |th: f64| neg.iter().filter(|&&s| s > th).count() as f64 / hours;
        let frr_at = |th: f64| 100.0 * pos.iter().filter(|&&s| s <= th).count() as f64 / pos.len() as f64;
        let oracle_th = *candidates.iter().find(|&&th| fa_at(th) <= target).unwrap();
        let th = select_threshold(&neg, hours, target).unwrap();
        if th != oracle_th || frr_at_threshold(&pos, th).unwrap() != frr_at(th) {
            mismatches += 1;
        }
        let det = det_curve(&pos, &neg, hours).unwrap();
        let finite: Vec<f64> = candidates.iter().copied().filter(|c| c.is_finite()).collect();
        let same = det.len() == finite.len()
            && det
                .iter()
                .zip(&finite)
                .all(|(p, &th)| p.threshold == th && p.fa_per_hour == fa_at(th) && p.frr_percent == frr_at(th));
        if !same {
            mismatches += 1;
        }
    }
    let default_ok = DEFAULT_TARGET_FA_PER_HOUR == 0.133;
    outcome(
        mismatches == 0 && default_ok,
        format!("{mismatches} mismatches over 20 score sets, default target {DEFAULT_TARGET_FA_PER_HOUR}"),
    )
}

fn text_generator_safety() -> Outcome {
    let kw = Keyword::parse(KEYWORD).unwrap();
    let mut rng = seed::rng(6, &[]);
    let clean = kwsforge::experiment::desk_query_corpus(1900, 6);
    let salted = [
        "hey google turn on the lights",
        "HEY Google! what time is it",
        "ok so (hey) google: play music",
        "tell me hey   google?",
        "hey, google. stop",
    ];
    let mut corpus: Vec<String> = clean;
    for i in 0..100 {
        corpus.push(salted[i % salted.len()].to_string());
    }
    kwsforge::seed::shuffle(&mut corpus, &mut rng);
    let salted_share = corpus.iter().filter(|l| contains_keyword(l, &kw)).count() as f64 / corpus.len() as f64;
    let gen = PromptGenerator::new(&kw, &corpus);
    let negatives = gen.negatives(10_000, &mut seed::rng(6, &[1]));
    let leaks = negatives.iter().filter(|p| contains_keyword(&p.text, &kw)).count();
    let positives = gen.positives(10_000, &mut seed::rng(6, &[2]));
    let misses = positives.iter().filter(|p| !contains_keyword(&p.text, &kw)).count();
    let mut usage = [0usize; 5];
    for p in &positives {
        usage[p.template_id - 1] += 1;
    }
    let uniform = usage.iter().all(|&c| (c as f64 - 2000.0).abs() <= 200.0);
    outcome(
        negatives.len() == 10_000 && positives.len() == 10_000 && leaks == 0 && misses == 0 && uniform,
        format!(
            "salted {:.1}%, {} negatives with {leaks} leaks, {} positives with {misses} misses, template usage {usage:?}",
            100.0 * salted_share,
            negatives.len(),
            positives.len()
        ),
    )
}

fn render(text: &str, speaker: &str, seed: u64) -> SynthResult {
    let prompt = PromptSpec {
        text: text.into(),
        label: Label::Negative,
        template_id: 6,
        query: text.into(),
        controls: Vec::new(),
    };
    synth(&prompt, &speaker_params(speaker).unwrap(), seed).unwrap()
}

fn word_samples(r: &SynthResult, word: usize) -> &[f64] {
    let (s, e) = r.word_spans[word];
    &r.clip.samples[s..e]
}

fn peak(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn prosody_effects() -> Outcome {
    let (mut min_slow, mut peak_range, mut min_pause, mut min_rise) = (f64::INFINITY, (f64::INFINITY, 0.0f64), f64::INFINITY, f64::INFINITY);
    for i in 0..20u64 {
        let spk = format!("spk_{i:03}");
        let plain = render("Google", &spk, i);
        let len = |r: &SynthResult| (r.word_spans[0].1 - r.word_spans[0].0) as f64;
        min_slow = min_slow.min(len(&render("(Google)", &spk, i)) / len(&plain));

        let ratio = peak(word_samples(&render("Google!", &spk, i), 0)) / peak(word_samples(&plain, 0));
        peak_range = (peak_range.0.min(ratio), peak_range.1.max(ratio));

        let paused = render("Google: now", &spk, i);
        let gap = &paused.clip.samples[paused.word_spans[0].1..paused.word_spans[1].0];
        let gap_ms = if peak(gap) < 1e-3 { gap.len() as f64 / 16.0 } else { 0.0 };
        min_pause = min_pause.min(gap_ms);

        let rising = render("Google?", &spk, i);
        let w = word_samples(&rising, 0);
        let head = estimate_pitch(&w[..w.len() * 3 / 10], 60.0, 500.0);
        let tail = estimate_pitch(&w[w.len() * 85 / 100..], 60.0, 500.0);
        let rise = match (head, tail) {
            (Some(h), Some(t)) => t / h,
            _ => 0.0,
        };
        min_rise = min_rise.min(rise);
    }
    let pass = min_slow >= 1.4
        && peak_range.0 >= 1.8
        && peak_range.1 <= 2.2
        && min_pause >= 140.0
        && min_rise >= 1.1;
    outcome(
        pass,
        format!(
            "over 20 speakers: slow ratio >= {min_slow:.3}, loud peak ratio in [{:.3}, {:.3}], pause >= {min_pause:.1} ms, terminal pitch ratio >= {min_rise:.3}",
            peak_range.0, peak_range.1
        ),
    )
}

fn full_scale_budget() -> Outcome {
    let n = ModelConfig::full_scale().param_count();
    outcome((288_000..=352_000).contains(&n), format!("{n} parameters"))
}

struct Desk {
    pools: kwsforge::datamix::Pools,
    eval: EvalSet,
    loader: ClipLoader,
}

fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 600,
        batch_size: 32,
        learning_rate: 3e-3,
        augment: AugmentPolicy::default(),
        seed,
        keyword: KEYWORD.into(),
        ..TrainConfig::default()
    }
}

fn desk_mix(seed: u64) -> MixSpec {
    MixSpec {
        tts_pos: 4000,
        tts_neg: 4000,
        real_pos: RealPosRule::Count(2000),
        real_neg: 6000,
        seed,
    }
}

/// One end-to-end desk run: checkpoint bytes, results row, FRR, seconds.
fn desk_run(desk: &Desk, seed: u64) -> (Vec<u8>, String, f64, f64) {
    let start = Instant::now();
    let spec = desk_mix(seed);
    let mixture = sample_mixture(&desk.pools, &spec).unwrap();
    let (model, _) = train(&ModelConfig::desk(), &mixture, &desk_train_config(seed), &desk.loader).unwrap();
    let report = desk.eval.evaluate(&model, DEFAULT_TARGET_FA_PER_HOUR).unwrap();
    let row = rows_to_csv(&[sweep_row(spec.real_pos.total(), &spec, Some(&report))]).unwrap();
    (model.to_checkpoint_bytes(), row, report.frr_percent, start.elapsed().as_secs_f64())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn sweep_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 300,
        batch_size: 32,
        learning_rate: 3e-3,
        augment: AugmentPolicy::disabled(),
        seed,
        keyword: KEYWORD.into(),
        ..TrainConfig::default()
    }
}

fn sweep_base(seed: u64) -> MixSpec {
    MixSpec {
        tts_pos: 2000,
        tts_neg: 2000,
        real_pos: RealPosRule::Stratified {
            n_speakers: 1,
            utts_per_speaker: 10,
        },
        real_neg: 3000,
        seed,
    }
}

const SWEEP_SEEDS: [u64; 3] = [100, 200, 300];

#[test]
fn acceptance() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        report_line(n, name, &o);
        results.push((n, name, o));
    };

    record(1, "streaming equivalence", streaming_equivalence());
    record(2, "gradient correctness", gradient_check());
    record(3, "loss endpoints and linearity", endpoints_and_linearity());
    record(4, "max-pool oracle", max_pool_oracle());
    record(5, "metric oracle", metric_oracle());
    record(6, "text generator safety", text_generator_safety());
    record(7, "prosody oracle effects", prosody_effects());
    record(11, "full-scale parameter budget", full_scale_budget());

    let loader = ClipLoader::new(".", ModelConfig::desk().encoder_output_dim);
    let (eval, _) = EvalSet::desk(KEYWORD, 1000, 2000, "eval_spk", 99, &loader).unwrap();
    let desk = Desk {
        pools: desk_pools(&DeskPoolSpec::default()).unwrap(),
        eval,
        loader: loader.clone(),
    };
    let (ckpt_a, row_a, frr, secs) = desk_run(&desk, 7);
    record(
        8,
        "end-to-end desk experiment",
        outcome(
            frr <= 10.0 && secs <= 900.0,
            format!(
                "FRR {frr:.2}% at {DEFAULT_TARGET_FA_PER_HOUR} FA/hr, {} params, 600 steps x 32, {secs:.0} s",
                ModelConfig::desk().param_count()
            ),
        ),
    );
    let (ckpt_b, row_b, _, _) = desk_run(&desk, 7);
    record(
        12,
        "reproducibility",
        outcome(
            ckpt_a == ckpt_b && row_a == row_b,
            format!(
                "checkpoints {} ({} bytes), results rows {}",
                if ckpt_a == ckpt_b { "identical" } else { "differ" },
                ckpt_a.len(),
                if row_a == row_b { "identical" } else { "differ" }
            ),
        ),
    );

    let sweep_pools = desk_pools(&DeskPoolSpec {
        tts_pos: 2000,
        tts_neg: 2000,
        real_speakers: 150,
        real_utts_per_speaker: 10,
        real_neg: 3000,
        real_neg_speakers: 600,
        ..DeskPoolSpec::default()
    })
    .unwrap();
    let run = |spec: &MixSpec| -> f64 {
        let mixture = sample_mixture(&sweep_pools, spec).unwrap();
        let (model, _) = train(&ModelConfig::desk(), &mixture, &sweep_train_config(spec.seed), &loader).unwrap();
        desk.eval.evaluate(&model, DEFAULT_TARGET_FA_PER_HOUR).unwrap().frr_percent
    };
    let speakers = [1usize, 10, 100];
    let mut by_point: Vec<Vec<f64>> = vec![Vec::new(); speakers.len()];
    for &s in &SWEEP_SEEDS {
        for (i, spec) in sweep_grid(&sweep_base(s), SweepAxis::NSpeakers, &speakers).unwrap().iter().enumerate() {
            by_point[i].push(run(spec));
        }
    }
    let medians: Vec<f64> = by_point.iter().map(|v| median(v.clone())).collect();
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    record(
        9,
        "speaker sweep trend",
        outcome(
            monotone && medians[0] - medians[2] >= 2.0,
            format!("median FRR by speakers {speakers:?} x 10 utts: {medians:.2?}, seeds per point {by_point:.2?}"),
        ),
    );

    let tts_only: Vec<f64> = SWEEP_SEEDS
        .iter()
        .map(|&s| {
            run(&MixSpec {
                real_pos: RealPosRule::Count(0),
                ..sweep_base(s)
            })
        })
        .collect();
    let (m_tts, m_mixed) = (median(tts_only.clone()), medians[2]);
    record(
        10,
        "TTS-only vs mixed",
        outcome(
            m_tts > m_mixed,
            format!("median FRR TTS-only {m_tts:.2}% ({tts_only:.2?}) vs TTS + 1000 real positives {m_mixed:.2}%"),
        ),
    );

    results.sort_by_key(|r| r.0);
    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| format!("{} ({})", r.0, r.1)).collect();
    let _ = writeln!(
        std::io::stdout().lock(),
        "acceptance summary: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
