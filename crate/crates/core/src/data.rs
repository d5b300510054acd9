//! Drawing corpora: NDJSON I/O, spline preprocessing, deterministic splits
//! and a synthetic corpus generator.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::splines::{
    eval_spline, fit_minimal_spline, trajectory_length, Point, RawStroke, SplineStroke,
    DEFAULT_MAX_CONTROL_POINTS, DEFAULT_RESIDUAL_THRESHOLD,
};

pub const DEFAULT_MIN_LENGTH: f64 = 10.0;
pub const TRAIN_FRACTION: f64 = 0.8;

/// One raw drawing of a character.
#[derive(Clone, Debug, PartialEq)]
pub struct DrawingRecord {
    pub alphabet: String,
    pub character_id: String,
    pub drawing_id: String,
    pub strokes: Vec<RawStroke>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecordJson {
    alphabet: String,
    character_id: String,
    drawing_id: String,
    strokes: Vec<Vec<Vec<f64>>>,
}

/// A preprocessed drawing: minimal spline strokes in the source frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessedRecord {
    pub alphabet: String,
    pub character_id: String,
    pub drawing_id: String,
    #[serde(default)]
    pub dropped_strokes: usize,
    pub strokes: Vec<SplineStroke>,
}

/// Access to the ids used for splitting.
pub trait Labeled {
    fn alphabet(&self) -> &str;
    fn character_id(&self) -> &str;
    fn drawing_id(&self) -> &str;
}

macro_rules! labeled {
    ($t:ty) => {
        impl Labeled for $t {
            fn alphabet(&self) -> &str {
                &self.alphabet
            }
            fn character_id(&self) -> &str {
                &self.character_id
            }
            fn drawing_id(&self) -> &str {
                &self.drawing_id
            }
        }
    };
}
labeled!(DrawingRecord);
labeled!(ProcessedRecord);

impl DrawingRecord {
    fn from_json(j: RawRecordJson) -> std::result::Result<Self, String> {
        if j.strokes.is_empty() {
            return Err("record has no strokes".into());
        }
        let mut strokes = Vec::with_capacity(j.strokes.len());
        for (s, pts) in j.strokes.iter().enumerate() {
            if pts.is_empty() {
                return Err(format!("stroke {s} has no points"));
            }
            let timed = pts[0].len() == 3;
            let mut points = Vec::with_capacity(pts.len());
            let mut times = Vec::new();
            for (i, p) in pts.iter().enumerate() {
                if p.len() != 2 && p.len() != 3 {
                    return Err(format!("stroke {s} point {i}: expected [x, y] or [x, y, t]"));
                }
                if (p.len() == 3) != timed {
                    return Err(format!("stroke {s} point {i}: timestamps must be all or none"));
                }
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(format!("stroke {s} point {i}: non-finite coordinate"));
                }
                points.push([p[0], p[1]]);
                if timed {
                    times.push(p[2]);
                }
            }
            strokes.push(RawStroke {
                points,
                times: timed.then_some(times),
            });
        }
        Ok(DrawingRecord {
            alphabet: j.alphabet,
            character_id: j.character_id,
            drawing_id: j.drawing_id,
            strokes,
        })
    }

    fn to_json(&self) -> RawRecordJson {
        RawRecordJson {
            alphabet: self.alphabet.clone(),
            character_id: self.character_id.clone(),
            drawing_id: self.drawing_id.clone(),
            strokes: self
                .strokes
                .iter()
                .map(|s| {
                    s.points
                        .iter()
                        .enumerate()
                        .map(|(i, p)| match &s.times {
                            Some(t) => vec![p[0], p[1], t[i]],
                            None => vec![p[0], p[1]],
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Reads NDJSON lines with `parse`, skipping blank lines. Drawing ids must be unique.
fn read_ndjson<T: Labeled, R: BufRead>(
    reader: R,
    parse: impl Fn(&str) -> std::result::Result<T, String>,
) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse(&line).map_err(|m| parse_error(i + 1, m))?;
        if !seen.insert(rec.drawing_id().to_string()) {
            return Err(parse_error(i + 1, format!("duplicate drawing_id `{}`", rec.drawing_id())));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<DrawingRecord>> {
    read_ndjson(reader, |line| {
        let j: RawRecordJson = serde_json::from_str(line).map_err(|e| e.to_string())?;
        DrawingRecord::from_json(j)
    })
}

pub fn load_corpus(path: &Path) -> Result<Vec<DrawingRecord>> {
    read_corpus(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Canonical NDJSON: one compact object per line, fixed key order,
/// shortest round-trip float formatting.
pub fn write_corpus<W: Write>(mut w: W, records: &[DrawingRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, &r.to_json())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_corpus(path: &Path, records: &[DrawingRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_corpus(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn read_processed<R: BufRead>(reader: R) -> Result<Vec<ProcessedRecord>> {
    read_ndjson(reader, |line| {
        let r: ProcessedRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if r.strokes.is_empty() {
            return Err("record has no strokes".into());
        }
        if let Some(i) = r.strokes.iter().position(|s| !s.is_finite()) {
            return Err(format!("stroke {i} has a non-finite control point"));
        }
        Ok(r)
    })
}

pub fn load_processed(path: &Path) -> Result<Vec<ProcessedRecord>> {
    read_processed(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn write_processed<W: Write>(mut w: W, records: &[ProcessedRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_processed(path: &Path, records: &[ProcessedRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_processed(&mut w, records)?;
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// RMS residual threshold in source pixels.
    pub residual_threshold: f64,
    /// Strokes with a shorter trajectory are removed.
    pub min_length: f64,
    pub max_control_points: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            residual_threshold: DEFAULT_RESIDUAL_THRESHOLD,
            min_length: DEFAULT_MIN_LENGTH,
            max_control_points: DEFAULT_MAX_CONTROL_POINTS,
        }
    }
}

/// Drops short strokes and fits a minimal spline to each remaining one, in order.
pub fn preprocess(record: &DrawingRecord, cfg: &PreprocessConfig) -> Result<ProcessedRecord> {
    let mut strokes = Vec::new();
    let mut dropped = 0;
    for s in &record.strokes {
        if trajectory_length(&s.points) < cfg.min_length {
            dropped += 1;
            continue;
        }
        strokes.push(fit_minimal_spline(s, cfg.residual_threshold, cfg.max_control_points)?.spline);
    }
    if strokes.is_empty() {
        return Err(Error::EmptyDrawing {
            drawing_id: record.drawing_id.clone(),
            dropped,
        });
    }
    Ok(ProcessedRecord {
        alphabet: record.alphabet.clone(),
        character_id: record.character_id.clone(),
        drawing_id: record.drawing_id.clone(),
        dropped_strokes: dropped,
        strokes,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub records_in: usize,
    pub records_out: usize,
    pub empty_drawings: Vec<String>,
    pub strokes_dropped: usize,
    pub strokes_kept: usize,
    pub mean_control_points: f64,
}

/// Preprocesses a corpus in parallel. Output keeps input order; drawings
/// left empty by the length filter are excluded and listed in the stats.
pub fn preprocess_corpus(records: &[DrawingRecord], cfg: &PreprocessConfig) -> Result<(Vec<ProcessedRecord>, PreprocessStats)> {
    let results: Vec<Result<ProcessedRecord>> = records.par_iter().map(|r| preprocess(r, cfg)).collect();
    let mut out = Vec::with_capacity(records.len());
    let mut stats = PreprocessStats {
        records_in: records.len(),
        ..Default::default()
    };
    let mut cps = 0usize;
    for r in results {
        match r {
            Ok(p) => {
                stats.strokes_dropped += p.dropped_strokes;
                stats.strokes_kept += p.strokes.len();
                cps += p.strokes.iter().map(|s| s.num_control_points()).sum::<usize>();
                out.push(p);
            }
            Err(Error::EmptyDrawing { drawing_id, dropped }) => {
                log::warn!("drawing {drawing_id} excluded: all {dropped} strokes below the length threshold");
                stats.strokes_dropped += dropped;
                stats.empty_drawings.push(drawing_id);
            }
            Err(e) => return Err(e),
        }
    }
    stats.records_out = out.len();
    stats.mean_control_points = if stats.strokes_kept > 0 {
        cps as f64 / stats.strokes_kept as f64
    } else {
        0.0
    };
    Ok((out, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Alphabet,
    Character,
    Holdout,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alphabet" => Ok(SplitMode::Alphabet),
            "character" => Ok(SplitMode::Character),
            "holdout" => Ok(SplitMode::Holdout),
            other => Err(Error::InvalidArgument(format!("unknown split mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    /// 1, 2 or 3.
    pub fold: u8,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(mode: SplitMode, fold: u8, seed: u64) -> Result<Self> {
        if !(1..=3).contains(&fold) {
            return Err(Error::Split(format!("fold must be 1, 2 or 3, got {fold}")));
        }
        Ok(SplitSpec { mode, fold, seed })
    }

    /// Parses `mode:fold`, e.g. `alphabet:2`.
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        let (mode, fold) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("split `{s}` is not mode:fold")))?;
        let fold = fold
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad fold in `{s}`")))?;
        SplitSpec::new(mode.parse()?, fold, seed)
    }

    pub fn id(&self) -> String {
        let mode = match self.mode {
            SplitMode::Alphabet => "alphabet",
            SplitMode::Character => "character",
            SplitMode::Holdout => "holdout",
        };
        format!("{mode}:{}", self.fold)
    }
}

fn unit_rank(seed: u64, fold: u8, unit: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([fold]);
    h.update(unit.as_bytes());
    h.finalize().into()
}

/// Units sent to training: the first `floor(0.8 n)` (at least one, leaving
/// at least one for testing when n >= 2) in hash order.
fn train_units(units: &BTreeSet<String>, spec: &SplitSpec) -> BTreeSet<String> {
    let mut ranked: Vec<(&String, [u8; 32])> = units.iter().map(|u| (u, unit_rank(spec.seed, spec.fold, u))).collect();
    ranked.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(b.0)));
    let n = ranked.len();
    let take = ((n as f64 * TRAIN_FRACTION).floor() as usize).clamp(1, n.saturating_sub(1).max(1));
    ranked.into_iter().take(take).map(|(u, _)| u.clone()).collect()
}

fn class_key<T: Labeled>(r: &T) -> String {
    format!("{}\u{1f}{}", r.alphabet(), r.character_id())
}

/// Partitions `corpus` into (train, test). Holdout mode trains on the whole
/// corpus and tests on `evaluation`. Both sides keep corpus order.
pub fn make_splits<T: Labeled + Clone>(corpus: &[T], spec: &SplitSpec, evaluation: Option<&[T]>) -> Result<(Vec<T>, Vec<T>)> {
    if corpus.is_empty() {
        return Err(Error::Split("empty corpus".into()));
    }
    match spec.mode {
        SplitMode::Holdout => {
            let eval = evaluation.ok_or_else(|| Error::Split("holdout mode needs an evaluation corpus".into()))?;
            let train_classes: HashSet<String> = corpus.iter().map(class_key).collect();
            if eval.iter().any(|r| train_classes.contains(&class_key(r))) {
                return Err(Error::Split("evaluation corpus shares character classes with training".into()));
            }
            Ok((corpus.to_vec(), eval.to_vec()))
        }
        SplitMode::Alphabet => {
            let alphabets: BTreeSet<String> = corpus.iter().map(|r| r.alphabet().to_string()).collect();
            if alphabets.len() < 5 {
                return Err(Error::Split(format!(
                    "alphabet mode needs at least 5 alphabets, corpus has {}",
                    alphabets.len()
                )));
            }
            let train = train_units(&alphabets, spec);
            Ok(corpus.iter().cloned().partition(|r| train.contains(r.alphabet())))
        }
        SplitMode::Character => {
            let mut per_alphabet: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
            for r in corpus {
                per_alphabet.entry(r.alphabet().to_string()).or_default().insert(class_key(r));
            }
            let mut train = HashSet::new();
            for classes in per_alphabet.values() {
                train.extend(train_units(classes, spec));
            }
            Ok(corpus.iter().cloned().partition(|r| train.contains(&class_key(r))))
        }
    }
}

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub alphabets: usize,
    pub characters_per_alphabet: usize,
    pub drawings_per_character: usize,
    pub max_strokes: usize,
    /// Per-control-point jitter between drawings of one character, in pixels.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            alphabets: 7,
            characters_per_alphabet: 4,
            drawings_per_character: 4,
            max_strokes: 3,
            jitter: 1.5,
            seed: 0,
        }
    }
}

/// Random spline compositions: every character is a prototype of 1 to
/// `max_strokes` strokes placed around an alphabet-specific centre and
/// scale; each drawing jitters the prototype's control points and is
/// emitted as a dense timestamped trajectory.
pub fn synthetic_corpus(cfg: &SynthConfig) -> Vec<DrawingRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jitter = Normal::new(0.0, cfg.jitter.max(1e-9)).expect("positive jitter scale");
    let mut out = Vec::new();
    for a in 0..cfg.alphabets {
        let centre: Point = [rng.random_range(40.0..65.0), rng.random_range(40.0..65.0)];
        let spread = rng.random_range(12.0..25.0);
        for c in 0..cfg.characters_per_alphabet {
            let n_strokes = rng.random_range(1..=cfg.max_strokes.max(1));
            let proto: Vec<Vec<Point>> = (0..n_strokes)
                .map(|_| {
                    let n_cp = rng.random_range(4..=6);
                    let mut p = [
                        centre[0] + rng.random_range(-spread..spread),
                        centre[1] + rng.random_range(-spread..spread),
                    ];
                    (0..n_cp)
                        .map(|_| {
                            let cp = p;
                            p = [
                                (p[0] + rng.random_range(-spread..spread) * 0.6).clamp(5.0, 100.0),
                                (p[1] + rng.random_range(-spread..spread) * 0.6).clamp(5.0, 100.0),
                            ];
                            cp
                        })
                        .collect()
                })
                .collect();
            for d in 0..cfg.drawings_per_character {
                let strokes = proto
                    .iter()
                    .map(|cps| {
                        let noisy: Vec<Point> = cps
                            .iter()
                            .map(|p| [p[0] + jitter.sample(&mut rng), p[1] + jitter.sample(&mut rng)])
                            .collect();
                        let points = eval_spline(&SplineStroke::from_control_points(&noisy), 8);
                        let times = (0..points.len()).map(|i| i as f64 * 10.0).collect();
                        RawStroke {
                            points,
                            times: Some(times),
                        }
                    })
                    .collect();
                out.push(DrawingRecord {
                    alphabet: format!("alphabet{a:02}"),
                    character_id: format!("a{a:02}c{c:02}"),
                    drawing_id: format!("a{a:02}c{c:02}d{d:02}"),
                    strokes,
                });
            }
        }
    }
    out
}
