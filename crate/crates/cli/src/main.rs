use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use kwsforge::audio::{write_alignment, write_wav, Alignment};
use kwsforge::datamix::{sample_mixture, sweep_grid, Manifest, ManifestEntry, MixSpec, Pools, Source, SweepAxis};
use kwsforge::evaluator::{evaluate_scores, score_utterance, DEFAULT_TARGET_FA_PER_HOUR};
use kwsforge::experiment::{desk_pools, sweep_row, DeskPoolSpec, EvalSet};
use kwsforge::frontend::compute_features;
use kwsforge::report::{emit_report, read_results, write_results, RunRow};
use kwsforge::seed;
use kwsforge::svdf::{KwsModel, ModelConfig};
use kwsforge::textgen::{Keyword, PromptGenerator, PromptSpec};
use kwsforge::trainer::{train, ClipLoader, TrainConfig};
use kwsforge::tts::{speaker_params, synth_with, SynthMode, SynthOptions};

#[derive(Parser)]
#[command(name = "kwsforge", version, about = "Keyword-spotting data, training and evaluation toolkit")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Global seed; falls back to KWSFORGE_SEED, then 0.
    #[arg(long, global = true, env = "KWSFORGE_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Tts,
    Real,
}

impl From<Mode> for SynthMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Tts => SynthMode::Tts,
            Mode::Real => SynthMode::Real,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate positive and negative prompts as JSON-lines.
    GenPrompts {
        #[arg(long, default_value = "Hey Google")]
        keyword: String,
        /// Query corpus, one query per line.
        #[arg(long)]
        corpus: PathBuf,
        /// Number of positive prompts.
        #[arg(long)]
        count: usize,
        /// Number of negative prompts; defaults to --count.
        #[arg(long)]
        neg_count: Option<usize>,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render prompts to WAV files with alignment sidecars and a manifest.
    Synth {
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated speaker ids; prompts cycle through them.
        #[arg(long, value_delimiter = ',', default_value = "spk_001")]
        speakers: Vec<String>,
        #[arg(long, value_enum, default_value = "tts")]
        mode: Mode,
        /// Unit inventory; must equal the model's encoder output size.
        #[arg(long, default_value_t = 16)]
        units: usize,
    },
    /// Write lazily rendered oracle pools and a held-out evaluation set.
    OraclePools {
        #[arg(long)]
        out_dir: PathBuf,
        /// JSON DeskPoolSpec; desk defaults when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        eval_pos: usize,
        #[arg(long, default_value_t = 2000)]
        eval_neg: usize,
    },
    /// Sample a training mixture from a pooled manifest.
    Mix {
        /// Manifest holding every pool; split by source and label.
        #[arg(long)]
        manifest: PathBuf,
        /// JSON MixSpec.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write model.kws, its sidecar and train_log.csv.
    Train {
        /// JSON ModelConfig, or the preset names `desk` / `full_scale`.
        #[arg(long, default_value = "desk")]
        model_config: String,
        #[arg(long)]
        manifest: PathBuf,
        /// JSON TrainConfig; defaults when absent.
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score held-out manifests and write report.json plus a DET CSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pos_manifest: PathBuf,
        #[arg(long)]
        neg_manifest: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TARGET_FA_PER_HOUR)]
        target_fa: f64,
        #[arg(long)]
        out: PathBuf,
        /// DET curve CSV; `<out>.det.csv` when absent.
        #[arg(long)]
        det_csv: Option<PathBuf>,
    },
    /// Run mix, train and eval for every point of a sweep grid.
    Sweep {
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        /// Base JSON MixSpec.
        #[arg(long)]
        base_spec: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "desk")]
        model_config: String,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        pos_manifest: PathBuf,
        #[arg(long)]
        neg_manifest: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TARGET_FA_PER_HOUR)]
        target_fa: f64,
        #[arg(long)]
        out: PathBuf,
        /// Grid points run concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Combine results.csv files into one sorted table and CSV.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?
        .lines()
        .map(str::to_owned)
        .collect())
}

fn load_model_config(arg: &str) -> Result<ModelConfig> {
    let cfg = match arg {
        "desk" => ModelConfig::desk(),
        "full_scale" => ModelConfig::full_scale(),
        path => serde_json::from_str(&fs::read_to_string(path).with_context(|| format!("reading {path}"))?)
            .with_context(|| format!("parsing {path}"))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    Manifest::read(path).with_context(|| format!("reading manifest {}", path.display()))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn gen_prompts(keyword: &str, corpus: &Path, count: usize, neg_count: usize, out: Option<&Path>, seed: u64) -> Result<()> {
    let kw = Keyword::parse(keyword)?;
    let lines = read_lines(corpus)?;
    let gen = PromptGenerator::new(&kw, &lines);
    let mut text = String::new();
    let pos = gen.positives(count, &mut seed::rng(seed, &[1]));
    if pos.len() < count {
        bail!("corpus has no usable query lines");
    }
    for p in pos.iter().chain(&gen.negatives(neg_count, &mut seed::rng(seed, &[2]))) {
        text.push_str(&p.to_json_line());
        text.push('\n');
    }
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn synth_cmd(prompts: &Path, out_dir: &Path, speakers: &[String], mode: SynthMode, units: usize, seed: u64) -> Result<()> {
    if speakers.is_empty() {
        bail!("no speakers given");
    }
    fs::create_dir_all(out_dir)?;
    let opts = SynthOptions {
        mode,
        unit_inventory: units,
    };
    let source = match mode {
        SynthMode::Tts => Source::Tts,
        SynthMode::Real => Source::Real,
    };
    let mut entries = Vec::new();
    for (i, line) in read_lines(prompts)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let prompt = PromptSpec::from_json_line(line).with_context(|| format!("prompt line {}", i + 1))?;
        let speaker = speaker_params(&speakers[i % speakers.len()])?;
        let r = synth_with(&prompt, &speaker, seed::derive(seed, &[i as u64]), &opts)?;
        let utt_id = format!("utt_{i:06}");
        let wav = format!("{utt_id}.wav");
        let align = format!("{utt_id}.align.json");
        write_wav(&out_dir.join(&wav), &r.clip.samples, r.clip.sample_rate_hz)?;
        write_alignment(
            &out_dir.join(&align),
            &Alignment {
                keyword_end_sample: r.clip.keyword_end_sample,
                units: r.clip.unit_alignment.clone(),
            },
        )?;
        let ms = |s: usize| s as f64 * 1000.0 / f64::from(r.clip.sample_rate_hz);
        entries.push(ManifestEntry {
            utt_id,
            wav_path: wav,
            label: prompt.label,
            speaker_id: speaker.speaker_id.clone(),
            source,
            duration_ms: ms(r.clip.len()),
            keyword_end_ms: r.clip.keyword_end_sample.map(ms),
            alignment_path: Some(align),
            oracle: None,
        });
    }
    Manifest::new(entries).write(&out_dir.join("manifest.jsonl"))?;
    Ok(())
}

fn oracle_pools(out_dir: &Path, spec: Option<&Path>, eval_pos: usize, eval_neg: usize, seed: Option<u64>) -> Result<()> {
    let mut spec: DeskPoolSpec = match spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => DeskPoolSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    fs::create_dir_all(out_dir)?;
    let pools = desk_pools(&spec)?;
    let mut all = pools.tts_pos.entries;
    all.extend(pools.tts_neg.entries);
    all.extend(pools.real_pos.entries);
    all.extend(pools.real_neg.entries);
    Manifest::new(all).write(&out_dir.join("pools.jsonl"))?;
    let eval_spec = DeskPoolSpec {
        tts_pos: 0,
        tts_neg: 0,
        real_speakers: eval_pos.div_ceil(4),
        real_utts_per_speaker: 4,
        real_neg: eval_neg,
        real_neg_speakers: eval_pos.div_ceil(4).max(1),
        speaker_prefix: "eval_spk".into(),
        seed: seed::derive(spec.seed, &[0xE7A1]),
        ..spec
    };
    let eval = desk_pools(&eval_spec)?;
    let mut pos = eval.real_pos;
    pos.entries.truncate(eval_pos);
    pos.write(&out_dir.join("eval_pos.jsonl"))?;
    eval.real_neg.write(&out_dir.join("eval_neg.jsonl"))?;
    Ok(())
}

fn mix_cmd(manifest: &Path, spec: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let pools = Pools::from_manifest(&read_manifest(manifest)?);
    let mut spec = MixSpec::read(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    sample_mixture(&pools, &spec)?.write(out)?;
    Ok(())
}

fn train_cmd(model_config: &str, manifest: &Path, train_config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let model_cfg = load_model_config(model_config)?;
    let cfg = load_train_config(train_config, seed)?;
    let m = read_manifest(manifest)?;
    let loader = ClipLoader::new(base_dir(manifest), model_cfg.encoder_output_dim);
    let (model, mut log) = train(&model_cfg, &m, &cfg, &loader)?;
    fs::create_dir_all(out)?;
    let ckpt = out.join("model.kws");
    model.save(&ckpt)?;
    log.checkpoint_path = Some(ckpt.clone());
    log.write_csv(&out.join("train_log.csv"))?;
    eprintln!(
        "trained {} steps in {:.1}s, final loss {:.4}, checkpoint {}",
        log.steps.len(),
        log.wall_clock_secs,
        log.steps.last().map_or(f64::NAN, |r| r.loss),
        ckpt.display()
    );
    Ok(())
}

fn eval_cmd(model: &Path, pos: &Path, neg: &Path, target: f64, out: &Path, det: Option<&Path>) -> Result<()> {
    let model = KwsModel::load(model).with_context(|| format!("loading {}", model.display()))?;
    let units = model.config().encoder_output_dim;
    let score_all = |path: &Path| -> Result<(Vec<f64>, f64)> {
        let m = read_manifest(path)?;
        let loader = ClipLoader::new(base_dir(path), units);
        let mut scores = Vec::with_capacity(m.len());
        for e in &m.entries {
            let clip = loader.load(e)?;
            scores.push(score_utterance(&model, &compute_features(&clip)?)?);
        }
        Ok((scores, m.total_hours()))
    };
    let (pos_scores, _) = score_all(pos)?;
    let (neg_scores, hours) = score_all(neg)?;
    let report = evaluate_scores(&pos_scores, &neg_scores, hours, target)?;
    fs::write(out, serde_json::to_vec_pretty(&report.to_json())?)?;
    let det_path = det.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".det.csv");
        PathBuf::from(p)
    });
    fs::write(&det_path, report.det_csv())?;
    println!(
        "FRR {:.2}% at {:.3} FA/hr (target {}), threshold {}",
        report.frr_percent, report.fa_per_hour, report.target_fa_per_hour, report.threshold
    );
    Ok(())
}

struct SweepArgs<'a> {
    axis: &'a str,
    values: &'a [usize],
    base_spec: &'a Path,
    manifest: &'a Path,
    model_config: &'a str,
    train_config: Option<&'a Path>,
    pos_manifest: &'a Path,
    neg_manifest: &'a Path,
    target_fa: f64,
    out: &'a Path,
    parallel: usize,
    seed: Option<u64>,
}

fn sweep_cmd(a: SweepArgs<'_>) -> Result<()> {
    let axis: SweepAxis = a.axis.parse()?;
    let mut base = MixSpec::read(a.base_spec)?;
    if let Some(s) = a.seed {
        base.seed = s;
    }
    let grid = sweep_grid(&base, axis, a.values)?;
    let model_cfg = load_model_config(a.model_config)?;
    let train_cfg = load_train_config(a.train_config, None)?;
    let pools = Pools::from_manifest(&read_manifest(a.manifest)?);
    let loader = ClipLoader::new(base_dir(a.manifest), model_cfg.encoder_output_dim);
    let eval = EvalSet::from_manifests(
        &read_manifest(a.pos_manifest)?,
        &read_manifest(a.neg_manifest)?,
        &ClipLoader::new(base_dir(a.pos_manifest), model_cfg.encoder_output_dim),
    )?;
    fs::create_dir_all(a.out)?;

    let rows: Mutex<Vec<Option<RunRow>>> = Mutex::new(vec![None; grid.len()]);
    let next = AtomicUsize::new(0);
    let run_point = |i: usize| -> RunRow {
        let spec = &grid[i];
        let dir = a.out.join(format!("run_{i:02}_{}", a.values[i]));
        let result = (|| -> Result<_> {
            fs::create_dir_all(&dir)?;
            let mixture = sample_mixture(&pools, spec)?;
            mixture.write(&dir.join("mixture.jsonl"))?;
            let cfg = TrainConfig {
                seed: spec.seed,
                ..train_cfg.clone()
            };
            let (model, log) = train(&model_cfg, &mixture, &cfg, &loader)?;
            model.save(&dir.join("model.kws"))?;
            log.write_csv(&dir.join("train_log.csv"))?;
            let report = eval.evaluate(&model, a.target_fa)?;
            fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report.to_json())?)?;
            fs::write(dir.join("det.csv"), report.det_csv())?;
            Ok(report)
        })();
        match result {
            Ok(r) => sweep_row(a.values[i], spec, Some(&r)),
            Err(e) => {
                eprintln!("sweep point {} failed: {e:#}", a.values[i]);
                sweep_row(a.values[i], spec, None)
            }
        }
    };
    std::thread::scope(|s| {
        for _ in 0..a.parallel.max(1).min(grid.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= grid.len() {
                    break;
                }
                let row = run_point(i);
                rows.lock().expect("rows lock")[i] = Some(row);
            });
        }
    });
    let rows: Vec<RunRow> = rows.into_inner().expect("rows lock").into_iter().flatten().collect();
    write_results(&a.out.join("results.csv"), &rows)?;
    print!("{}", emit_report(&rows)?.table);
    Ok(())
}

fn report_cmd(results: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for p in results {
        rows.extend(read_results(p).with_context(|| format!("reading {}", p.display()))?);
    }
    let report = emit_report(&rows)?;
    print!("{}", report.table);
    if let Some(out) = out {
        fs::write(out, &report.csv)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let s = seed.unwrap_or(0);
    match &cli.command {
        Command::GenPrompts {
            keyword,
            corpus,
            count,
            neg_count,
            out,
        } => gen_prompts(keyword, corpus, *count, neg_count.unwrap_or(*count), out.as_deref(), s),
        Command::Synth {
            prompts,
            out_dir,
            speakers,
            mode,
            units,
        } => synth_cmd(prompts, out_dir, speakers, (*mode).into(), *units, s),
        Command::OraclePools {
            out_dir,
            spec,
            eval_pos,
            eval_neg,
        } => oracle_pools(out_dir, spec.as_deref(), *eval_pos, *eval_neg, seed),
        Command::Mix { manifest, spec, out } => mix_cmd(manifest, spec, out, seed),
        Command::Train {
            model_config,
            manifest,
            train_config,
            out,
        } => train_cmd(model_config, manifest, train_config.as_deref(), out, seed),
        Command::Eval {
            model,
            pos_manifest,
            neg_manifest,
            target_fa,
            out,
            det_csv,
        } => eval_cmd(model, pos_manifest, neg_manifest, *target_fa, out, det_csv.as_deref()),
        Command::Sweep {
            axis,
            values,
            base_spec,
            manifest,
            model_config,
            train_config,
            pos_manifest,
            neg_manifest,
            target_fa,
            out,
            parallel,
        } => sweep_cmd(SweepArgs {
            axis,
            values,
            base_spec,
            manifest,
            model_config,
            train_config: train_config.as_deref(),
            pos_manifest,
            neg_manifest,
            target_fa: *target_fa,
            out,
            parallel: *parallel,
            seed,
        }),
        Command::Report { results, out } => report_cmd(results, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

