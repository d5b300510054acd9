use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use glyphgen::data::{self, Labeled, PreprocessConfig, ProcessedRecord, SplitMode, SplitSpec, SynthConfig};
use glyphgen::eval::{self, Classifier, ClassifierConfig, EmbeddingIndex, EvalReport};
use glyphgen::models::{Model, ModelConfig, ModelKind};
use glyphgen::render::{render_drawing, tile_pgm, Canvas};
use glyphgen::splines::{Point, SplineStroke};
use glyphgen::training::{self, HpCandidate, ModelCheckpoint, TrainConfig};

use crate::config::{layered, with_overrides, ConfigError, ConfigFile, Flags};
use crate::manifest::{manifest_path, RunManifest};
use crate::*;

/// Parses `argv`, runs the command and maps failures to exit codes:
/// 2 for usage errors, 1 for runtime errors.
pub fn run(argv: Vec<String>) -> ExitCode {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(cli, argv[1..].to_vec()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", category(&e));
            ExitCode::from(1)
        }
    }
}

fn category(e: &anyhow::Error) -> &'static str {
    use glyphgen::Error as G;
    for cause in e.chain() {
        if let Some(g) = cause.downcast_ref::<G>() {
            return match g {
                G::Parse { .. } | G::Json(_) => "parse",
                G::Io(_) => "io",
                G::CorruptCheckpoint(_) | G::CheckpointVersion(_) | G::ConfigMismatch(_) => "checkpoint",
                G::NonFiniteLoss { .. } | G::NonFiniteGradient(_) => "numeric",
                G::Split(_) => "split",
                G::Degenerate(_) | G::DegenerateStroke(_) | G::EmptyDrawing { .. } | G::ZeroProbability(_) => "degenerate",
                _ => "invalid-argument",
            };
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return "config";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return "parse";
        }
    }
    "runtime"
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    glyphgen::Error::InvalidArgument(msg.into()).into()
}

struct Ctx {
    seed: u64,
    file: ConfigFile,
    manifest: RunManifest,
}

fn execute(cli: Cli, argv: Vec<String>) -> Result<()> {
    let threads = cli.threads;
    if threads == Some(0) {
        bail!(invalid("--threads must be >= 1"));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().context("building the worker pool")?;
    if let Command::Rerun(a) = &cli.command {
        let m = RunManifest::load(&a.manifest)?;
        if m.command == "rerun" {
            bail!(invalid("manifest records a rerun"));
        }
        let mut replay = vec!["glyphgen".to_string()];
        replay.extend(m.argv.iter().cloned());
        let inner = Cli::try_parse_from(&replay).map_err(|e| invalid(format!("manifest argv: {e}")))?;
        return execute(inner, m.argv);
    }
    let name = command_name(&cli.command);
    let mut ctx = Ctx {
        seed: cli.seed,
        file: ConfigFile::load(cli.config.as_deref())?,
        manifest: RunManifest::new(name, argv, cli.seed, threads),
    };
    if let Some(c) = &cli.config {
        ctx.manifest.input(c);
    }
    pool.install(|| dispatch(&cli.command, &mut ctx))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Preprocess(_) => "preprocess",
        Command::Split(_) => "split",
        Command::Train(_) => "train",
        Command::HpSearch(_) => "hp-search",
        Command::Eval(_) => "eval",
        Command::Table(_) => "table",
        Command::Ttest(_) => "ttest",
        Command::Sample(_) => "sample",
        Command::ClassifierTrain(_) => "classifier-train",
        Command::Neighbors(_) => "neighbors",
        Command::Grid(_) => "grid",
        Command::Rerun(_) => "rerun",
    }
}

fn dispatch(cmd: &Command, ctx: &mut Ctx) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a, ctx),
        Command::Preprocess(a) => preprocess(a, ctx),
        Command::Split(a) => split(a, ctx),
        Command::Train(a) => train(a, ctx),
        Command::HpSearch(a) => hp_search(a, ctx),
        Command::Eval(a) => evaluate(a, ctx),
        Command::Table(a) => table(a, ctx),
        Command::Ttest(a) => ttest(a, ctx),
        Command::Sample(a) => sample(a, ctx),
        Command::ClassifierTrain(a) => classifier_train(a, ctx),
        Command::Neighbors(a) => neighbors(a, ctx),
        Command::Grid(a) => grid(a, ctx),
        Command::Rerun(_) => unreachable!("handled before dispatch"),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| glyphgen::Error::Json(e).into())
}

/// Records the outputs and writes the manifest for a file artifact.
fn finish_file(ctx: &mut Ctx, primary: &Path, extra: &[&Path]) -> Result<()> {
    ctx.manifest.output(primary);
    for p in extra {
        ctx.manifest.output(p);
    }
    ctx.manifest.write(&manifest_path(primary, false))
}

fn finish_dir(ctx: &mut Ctx, dir: &Path) -> Result<()> {
    ctx.manifest.output(dir);
    ctx.manifest.write(&manifest_path(dir, true))
}

fn synth(a: &SynthArgs, ctx: &mut Ctx) -> Result<()> {
    let mut f = Flags::default();
    f.set("alphabets", a.alphabets)
        .set("characters_per_alphabet", a.characters)
        .set("drawings_per_character", a.drawings)
        .set("max_strokes", a.max_strokes)
        .set("jitter", a.jitter)
        .set("seed", Some(ctx.seed));
    let cfg: SynthConfig = layered(SynthConfig::default(), &ctx.file, "synth", &f)?;
    ctx.manifest.config(&cfg);
    let corpus = data::synthetic_corpus(&cfg);
    ensure_parent(&a.out)?;
    data::save_corpus(&a.out, &corpus)?;
    println!("wrote {} drawings to {}", corpus.len(), a.out.display());
    finish_file(ctx, &a.out, &[])
}

fn preprocess(a: &PreprocessArgs, ctx: &mut Ctx) -> Result<()> {
    let mut f = Flags::default();
    f.set("residual_threshold", a.residual_thresh)
        .set("min_length", a.min_length)
        .set("max_control_points", a.max_control_points);
    let cfg: PreprocessConfig = layered(PreprocessConfig::default(), &ctx.file, "preprocess", &f)?;
    ctx.manifest.config(&cfg);
    ctx.manifest.input(&a.input);
    let raw = data::load_corpus(&a.input)?;
    let (processed, stats) = data::preprocess_corpus(&raw, &cfg)?;
    ensure_parent(&a.out)?;
    data::save_processed(&a.out, &processed)?;
    let stats_path = PathBuf::from(format!("{}.stats.json", a.out.display()));
    write_json(&stats_path, &stats)?;
    println!(
        "kept {}/{} drawings, {} strokes dropped, {:.2} control points per stroke",
        stats.records_out, stats.records_in, stats.strokes_dropped, stats.mean_control_points
    );
    finish_file(ctx, &a.out, &[&stats_path])
}

fn split_spec(s: &str, seed: u64) -> Result<SplitSpec> {
    Ok(SplitSpec::parse(s, seed)?)
}

fn select(corpus: Vec<ProcessedRecord>, sel: &SplitSelect, ctx: &mut Ctx, train_side: bool) -> Result<Vec<ProcessedRecord>> {
    let Some(s) = &sel.split else {
        return Ok(corpus);
    };
    let spec = split_spec(s, ctx.seed)?;
    let eval = match &sel.eval_corpus {
        Some(p) => {
            ctx.manifest.input(p);
            Some(data::load_processed(p)?)
        }
        None => None,
    };
    let (train, test) = data::make_splits(&corpus, &spec, eval.as_deref())?;
    Ok(if train_side { train } else { test })
}

fn split(a: &SplitArgs, ctx: &mut Ctx) -> Result<()> {
    let spec = split_spec(&a.split, ctx.seed)?;
    ctx.manifest.config(&spec);
    ctx.manifest.input(&a.input);
    let corpus = data::load_processed(&a.input)?;
    let eval = match &a.eval_corpus {
        Some(p) => {
            ctx.manifest.input(p);
            Some(data::load_processed(p)?)
        }
        None => None,
    };
    let (train, test) = data::make_splits(&corpus, &spec, eval.as_deref())?;
    ensure_parent(&a.train_out)?;
    ensure_parent(&a.test_out)?;
    data::save_processed(&a.train_out, &train)?;
    data::save_processed(&a.test_out, &test)?;
    println!("{}: {} train, {} test drawings", spec.id(), train.len(), test.len());
    finish_file(ctx, &a.train_out, &[&a.test_out])
}

fn model_config(m: &ModelFlags, ctx: &Ctx) -> Result<ModelConfig> {
    let kind: ModelKind = m.model.parse()?;
    let base = match m.preset.as_str() {
        "standard" => ModelConfig::standard(kind),
        "tiny" => ModelConfig::tiny(kind),
        other => bail!(invalid(format!("unknown preset `{other}` (standard or tiny)"))),
    };
    let mut f = Flags::default();
    f.set("components", m.components)
        .set("dropout", m.dropout)
        .set("lstm_units", m.lstm_units)
        .set("lstm_layers", m.lstm_layers);
    let cfg: ModelConfig = layered(base, &ctx.file, "model", &f)?;
    if cfg.kind != kind {
        bail!(ConfigError(format!("[model] kind {} contradicts --model {kind}", cfg.kind)));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(t: &TrainFlags, ctx: &Ctx, section: &str, base: TrainConfig) -> Result<TrainConfig> {
    let mut f = Flags::default();
    f.set("max_steps", t.steps)
        .set("batch_size", t.batch_size)
        .set("learning_rate", t.lr)
        .set("clip_norm", t.clip.map(Some))
        .set("eval_every", t.eval_every)
        .set("seed", Some(ctx.seed));
    let cfg: TrainConfig = layered(base, &ctx.file, section, &f)?;
    cfg.validate()?;
    Ok(cfg)
}

fn drawings(records: &[ProcessedRecord]) -> Vec<Vec<SplineStroke>> {
    records.iter().map(|r| r.strokes.clone()).collect()
}

fn train(a: &TrainArgs, ctx: &mut Ctx) -> Result<()> {
    let model_cfg = model_config(&a.model, ctx)?;
    let train_cfg = train_config(&a.train, ctx, "train", TrainConfig::default())?;
    ctx.manifest.config(&json!({ "model": model_cfg, "train": train_cfg, "split": a.select.split }));
    ctx.manifest.input(&a.data);
    let corpus = data::load_processed(&a.data)?;
    let set = drawings(&select(corpus, &a.select, ctx, true)?);
    let valid = match &a.valid {
        Some(p) => {
            ctx.manifest.input(p);
            Some(drawings(&data::load_processed(p)?))
        }
        None => None,
    };
    ensure_parent(&a.out)?;
    let mut model = Model::new(model_cfg, ctx.seed)?;
    let out = a.out.clone();
    let result = training::train(&mut model, &set, &train_cfg, |ck| {
        ck.save(&out)?;
        let last = ck.loss_trace.last().copied().unwrap_or(f64::NAN);
        match &valid {
            Some(v) => {
                let m = ck.to_model()?;
                log::info!("step {}: train {last:.4}, valid {:.4}", ck.step, training::mean_nll(&m, v)?);
            }
            None => log::info!("step {}: train {last:.4}", ck.step),
        }
        Ok(())
    });
    match result {
        Ok(o) => {
            println!(
                "trained {} for {} steps on {} drawings; final batch loss {:.4}",
                model.kind(),
                o.loss_trace.len(),
                set.len(),
                o.loss_trace.last().copied().unwrap_or(f64::NAN)
            );
            finish_file(ctx, &a.out, &[])
        }
        Err(glyphgen::Error::NonFiniteLoss { step, last_good }) => {
            if let Some(ck) = last_good {
                ck.save(&a.out)?;
                finish_file(ctx, &a.out, &[])?;
            }
            Err(glyphgen::Error::NonFiniteLoss { step, last_good: None }).context(format!(
                "training diverged; last good checkpoint kept at {}",
                a.out.display()
            ))
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Deserialize)]
struct GridFile {
    candidate: Vec<GridEntry>,
}

#[derive(Deserialize)]
struct GridEntry {
    id: String,
    #[serde(flatten)]
    overrides: Map<String, Value>,
}

fn hp_search(a: &HpSearchArgs, ctx: &mut Ctx) -> Result<()> {
    let base = model_config(&a.model, ctx)?;
    let train_cfg = train_config(&a.train, ctx, "train", TrainConfig::default())?;
    ctx.manifest.input(&a.grid);
    ctx.manifest.input(&a.data);
    let text = std::fs::read_to_string(&a.grid).with_context(|| format!("reading {}", a.grid.display()))?;
    let grid: GridFile = toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", a.grid.display())))?;
    if grid.candidate.is_empty() {
        bail!(ConfigError("grid has no [[candidate]] entries".into()));
    }
    let candidates = grid
        .candidate
        .iter()
        .map(|c| {
            let config: ModelConfig = with_overrides(&base, &c.overrides, &format!("candidate `{}`", c.id))?;
            config.validate()?;
            Ok(HpCandidate { id: c.id.clone(), config })
        })
        .collect::<Result<Vec<_>>>()?;
    let corpus = data::load_processed(&a.data)?;
    // each outer split's training side is split again by character for validation
    let mut folds = Vec::new();
    for s in a.splits.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let spec = split_spec(s, ctx.seed)?;
        if spec.mode == SplitMode::Holdout {
            bail!(invalid("hp-search splits must be alphabet or character splits"));
        }
        let (outer, _) = data::make_splits(&corpus, &spec, None)?;
        let inner = SplitSpec::new(SplitMode::Character, spec.fold, ctx.seed)?;
        let (fit, val) = data::make_splits(&outer, &inner, None)?;
        folds.push((drawings(&fit), drawings(&val)));
    }
    ctx.manifest.config(&json!({ "candidates": candidates, "train": train_cfg, "splits": a.splits }));
    let report = training::hp_search(&candidates, &folds, &train_cfg, ctx.seed)?;
    let best = candidates.iter().find(|c| c.id == report.best).expect("best is a candidate");
    write_json(&a.out, &json!({ "report": report, "best_config": best.config }))?;
    for (id, m) in &report.mean_validation_loss {
        println!("{id}: mean validation NLL {m:.4}");
    }
    println!("best: {}", report.best);
    finish_file(ctx, &a.out, &[])
}

fn labelled(records: &[ProcessedRecord]) -> Vec<(String, Vec<SplineStroke>)> {
    records.iter().map(|r| (r.drawing_id.clone(), r.strokes.clone())).collect()
}

fn evaluate(a: &EvalArgs, ctx: &mut Ctx) -> Result<()> {
    ctx.manifest.input(&a.ckpt);
    ctx.manifest.input(&a.test);
    let ck = ModelCheckpoint::load(&a.ckpt)?;
    let model = ck.to_model()?;
    let corpus = data::load_processed(&a.test)?;
    let (split_id, test) = match &a.split {
        None => ("all".to_string(), corpus),
        Some(s) => {
            let spec = split_spec(s, ctx.seed)?;
            if spec.mode == SplitMode::Holdout {
                (spec.id(), corpus)
            } else {
                (spec.id(), data::make_splits(&corpus, &spec, None)?.1)
            }
        }
    };
    let model_id = a
        .model_id
        .clone()
        .unwrap_or_else(|| a.ckpt.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned()));
    ctx.manifest.config(&json!({ "model": ck.model, "split": split_id, "model_id": model_id }));
    let report = eval::evaluate(&model, &model_id, &split_id, &labelled(&test))?;
    write_json(&a.out, &report)?;
    let table_path = PathBuf::from(format!("{}.txt", a.out.display()));
    let table = eval::summary_table(std::slice::from_ref(&report));
    std::fs::write(&table_path, &table)?;
    println!("{model_id} on {split_id}: mean NLL {:.4} over {} drawings", report.mean_nll, report.nlls.len());
    finish_file(ctx, &a.out, &[&table_path])
}

fn table(a: &TableArgs, ctx: &mut Ctx) -> Result<()> {
    let mut reports = Vec::new();
    for p in &a.reports {
        ctx.manifest.input(p);
        reports.push(read_json::<EvalReport>(p)?);
    }
    let text = eval::summary_table(&reports);
    ensure_parent(&a.out)?;
    std::fs::write(&a.out, &text)?;
    print!("{text}");
    finish_file(ctx, &a.out, &[])
}

fn ttest(a: &TtestArgs, ctx: &mut Ctx) -> Result<()> {
    ctx.manifest.input(&a.a);
    ctx.manifest.input(&a.b);
    let ra: EvalReport = read_json(&a.a)?;
    let rb: EvalReport = read_json(&a.b)?;
    let lookup: std::collections::HashMap<&str, f64> =
        rb.drawing_ids.iter().map(String::as_str).zip(rb.nlls.iter().copied()).collect();
    if lookup.len() != ra.drawing_ids.len() {
        bail!(invalid("reports cover different numbers of drawings"));
    }
    let mut b = Vec::with_capacity(ra.nlls.len());
    for id in &ra.drawing_ids {
        b.push(*lookup.get(id.as_str()).ok_or_else(|| invalid(format!("drawing `{id}` missing from {}", a.b.display())))?);
    }
    let r = eval::paired_t_test(&ra.nlls, &b)?;
    let out = json!({ "a": ra.model_id, "b": rb.model_id, "split": ra.split_id, "result": r });
    ctx.manifest.config(&json!({ "a": ra.model_id, "b": rb.model_id }));
    write_json(&a.out, &out)?;
    println!("{} vs {}: t({}) = {:.4}, p = {:.4e}", ra.model_id, rb.model_id, r.df, r.t, r.p);
    finish_file(ctx, &a.out, &[])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StrokeJson {
    pub stroke_index: usize,
    pub start: Point,
    pub offsets: Vec<Point>,
    pub control_points: Vec<Point>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleJson {
    pub index: usize,
    pub capped: bool,
    pub strokes: Vec<StrokeJson>,
}

fn sample_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn sample(a: &SampleArgs, ctx: &mut Ctx) -> Result<()> {
    if a.n == 0 {
        bail!(invalid("--n must be >= 1"));
    }
    ctx.manifest.input(&a.ckpt);
    let ck = ModelCheckpoint::load(&a.ckpt)?;
    let model = ck.to_model()?;
    ctx.manifest.config(&json!({ "model": ck.model, "n": a.n, "temperature": a.temperature }));
    let seed = ctx.seed;
    let chars = (0..a.n)
        .into_par_iter()
        .map(|i| model.generate_character(&mut ChaCha8Rng::seed_from_u64(sample_seed(seed, i)), a.temperature))
        .collect::<glyphgen::Result<Vec<_>>>()?;
    std::fs::create_dir_all(&a.out)?;
    let mut json = Vec::with_capacity(a.n);
    for (i, c) in chars.iter().enumerate() {
        std::fs::write(a.out.join(format!("sample_{i:03}.pgm")), c.canvas.to_pgm())?;
        json.push(SampleJson {
            index: i,
            capped: c.capped,
            strokes: c
                .strokes
                .iter()
                .enumerate()
                .map(|(k, s)| StrokeJson {
                    stroke_index: k,
                    start: s.start,
                    offsets: s.offsets.clone(),
                    control_points: s.control_points(),
                })
                .collect(),
        });
    }
    write_json(&a.out.join("samples.json"), &json)?;
    let canvases: Vec<Canvas> = chars.into_iter().map(|c| c.canvas).collect();
    let cols = (a.n as f64).sqrt().ceil() as usize;
    std::fs::write(a.out.join("samples.pgm"), tile_pgm(&canvases, cols, 2))?;
    println!("wrote {} samples to {}", a.n, a.out.display());
    finish_dir(ctx, &a.out)
}

fn classifier_train(a: &ClassifierTrainArgs, ctx: &mut Ctx) -> Result<()> {
    let mut f = Flags::default();
    f.set("hidden_units", a.hidden_units);
    let clf_cfg: ClassifierConfig = layered(ClassifierConfig::default(), &ctx.file, "classifier", &f)?;
    let base = TrainConfig {
        batch_size: 32,
        max_steps: 300,
        ..Default::default()
    };
    let train_cfg = train_config(&a.train, ctx, "classifier_train", base)?;
    ctx.manifest.config(&json!({ "classifier": clf_cfg, "train": train_cfg }));
    ctx.manifest.input(&a.input);
    let corpus = data::load_processed(&a.input)?;
    let canvases: Vec<Canvas> = corpus.par_iter().map(|r| render_drawing(&r.strokes)).collect();
    let labels: Vec<String> = corpus.iter().map(|r| format!("{}/{}", r.alphabet(), r.character_id())).collect();
    let (clf, trace) = eval::train_classifier(&canvases, &labels, clf_cfg, &train_cfg)?;
    let classes: Vec<usize> = labels.iter().map(|l| clf.classes.binary_search(l).expect("known class")).collect();
    let acc = clf.accuracy(&canvases, &classes)?;
    ensure_parent(&a.out)?;
    clf.save(&a.out)?;
    println!(
        "{} classes, final loss {:.4}, train accuracy {:.3}",
        clf.classes.len(),
        trace.last().copied().unwrap_or(f64::NAN),
        acc
    );
    finish_file(ctx, &a.out, &[])
}

fn sample_canvases(path: &Path) -> Result<Vec<Canvas>> {
    let samples: Vec<SampleJson> = read_json(path)?;
    Ok(samples
        .iter()
        .map(|s| {
            let strokes: Vec<SplineStroke> = s
                .strokes
                .iter()
                .map(|k| SplineStroke {
                    start: k.start,
                    offsets: k.offsets.clone(),
                })
                .collect();
            render_drawing(&strokes)
        })
        .collect())
}

fn build_index(clf: &Classifier, corpus: &[ProcessedRecord]) -> Result<EmbeddingIndex> {
    let items: Vec<(String, Canvas)> = corpus
        .par_iter()
        .map(|r| (r.drawing_id.clone(), render_drawing(&r.strokes)))
        .collect();
    Ok(EmbeddingIndex::build(clf, &items)?)
}

fn neighbors(a: &NeighborsArgs, ctx: &mut Ctx) -> Result<()> {
    for p in [&a.classifier, &a.index, &a.samples] {
        ctx.manifest.input(p);
    }
    ctx.manifest.config(&json!({ "k": a.k }));
    let clf = Classifier::load(&a.classifier)?;
    let index = build_index(&clf, &data::load_processed(&a.index)?)?;
    let canvases = sample_canvases(&a.samples)?;
    let queries = clf.embed(&canvases.iter().collect::<Vec<_>>())?;
    let table = eval::nearest_neighbors(&queries, &index, a.k)?;
    let rows: Vec<Value> = table
        .iter()
        .enumerate()
        .map(|(i, n)| json!({ "sample": i, "neighbors": n }))
        .collect();
    write_json(&a.out, &json!({ "classifier_id": index.classifier_id, "k": a.k, "table": rows }))?;
    println!("wrote neighbours of {} samples", rows.len());
    finish_file(ctx, &a.out, &[])
}

fn grid(a: &GridArgs, ctx: &mut Ctx) -> Result<()> {
    for p in [&a.classifier, &a.index, &a.samples] {
        ctx.manifest.input(p);
    }
    ctx.manifest.config(&json!({ "side": eval::GRID_SIDE }));
    let clf = Classifier::load(&a.classifier)?;
    let corpus = data::load_processed(&a.index)?;
    let index = build_index(&clf, &corpus)?;
    let canvases = sample_canvases(&a.samples)?;
    let emb = clf.embed(&canvases.iter().collect::<Vec<_>>())?;
    let g = eval::arrange_grid(&emb, &index)?;
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("grid.json"), &g)?;
    let by_id: std::collections::HashMap<&str, &ProcessedRecord> =
        corpus.iter().map(|r| (r.drawing_id.as_str(), r)).collect();
    let placed: Vec<Canvas> = g.cells.iter().flatten().map(|&i| canvases[i].clone()).collect();
    let nn: Vec<Canvas> = g
        .neighbors
        .iter()
        .flatten()
        .map(|id| render_drawing(&by_id[id.as_str()].strokes))
        .collect();
    std::fs::write(a.out.join("grid.pgm"), tile_pgm(&placed, eval::GRID_SIDE, 2))?;
    std::fs::write(a.out.join("neighbors.pgm"), tile_pgm(&nn, eval::GRID_SIDE, 2))?;
    println!("wrote grid to {}", a.out.display());
    finish_dir(ctx, &a.out)
}
