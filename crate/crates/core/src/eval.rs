//! Likelihood evaluation, paired significance tests, classifier embeddings,
//! nearest neighbours and sample-grid arrangement.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::mdn::{categorical_log_prob_op, categorical_log_probs};
use crate::models::{Model, ModelKind};
use crate::render::{Canvas, CANVAS_SIZE};
use crate::splines::SplineStroke;
use crate::tensor::{Activation, ConvBlock, Dense, Mode, ParamStore, Session, Tensor, Var};
use crate::training::{adam_step, clip_global_norm, epoch_batches, zero_grads, AdamState, TrainConfig};

/// Per-drawing test NLLs of one model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub model_kind: ModelKind,
    pub split_id: String,
    pub drawing_ids: Vec<String>,
    pub nlls: Vec<f64>,
    pub mean_nll: f64,
}

/// Teacher-forced NLL of every test drawing, in eval mode.
pub fn evaluate(model: &Model, model_id: &str, split_id: &str, test: &[(String, Vec<SplineStroke>)]) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let scored: Vec<Result<f64>> = test.par_iter().map(|(_, d)| model.score_drawing(d)).collect();
    let nlls = scored.into_iter().collect::<Result<Vec<_>>>()?;
    let mean_nll = nlls.iter().sum::<f64>() / nlls.len() as f64;
    Ok(EvalReport {
        model_id: model_id.to_string(),
        model_kind: model.kind(),
        split_id: split_id.to_string(),
        drawing_ids: test.iter().map(|(id, _)| id.clone()).collect(),
        nlls,
        mean_nll,
    })
}

/// Published reference numbers, printed for context only.
pub const REFERENCE_FOOTER: &str = "\
reference (full corpus, not reproducible at desk scale):
  Full NS alphabet splits 13.77 / 14.18 / 17.53
  holdout: Full NS 19.51, H-LSTM 20.16, Baseline 19.66
  Full NS vs H-LSTM on holdout: t(5531) = 3.094, p < 0.002
";

/// Models-by-splits table of mean NLL (nats per character).
pub fn summary_table(reports: &[EvalReport]) -> String {
    let mut splits: Vec<&str> = reports.iter().map(|r| r.split_id.as_str()).collect();
    splits.sort_unstable();
    splits.dedup();
    let mut cells: BTreeMap<(usize, &str), Vec<f64>> = BTreeMap::new();
    for r in reports {
        let row = ModelKind::ALL.iter().position(|k| *k == r.model_kind).expect("known kind");
        cells.entry((row, r.split_id.as_str())).or_default().push(r.mean_nll);
    }
    let mut out = String::from("mean test NLL per character (nats, lower is better)\n");
    let _ = write!(out, "{:<10}", "model");
    for s in &splits {
        let _ = write!(out, " {s:>14}");
    }
    out.push('\n');
    for (row, kind) in ModelKind::ALL.iter().enumerate() {
        if !cells.keys().any(|(r, _)| *r == row) {
            continue;
        }
        let _ = write!(out, "{:<10}", kind.display_name());
        for s in &splits {
            match cells.get(&(row, *s)) {
                Some(v) => {
                    let _ = write!(out, " {:>14.3}", v.iter().sum::<f64>() / v.len() as f64);
                }
                None => {
                    let _ = write!(out, " {:>14}", "-");
                }
            }
        }
        out.push('\n');
    }
    out.push('\n');
    out.push_str(REFERENCE_FOOTER);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    /// Two-sided p-value.
    pub p: f64,
    pub mean_difference: f64,
    /// Differences are constant and non-zero, so `t` is infinite.
    pub infinite: bool,
}

/// Two-sided Student-t tail mass `P(|T| >= |t|)`.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t))
}

/// Paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!("lengths differ: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument("paired t-test needs n >= 2".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite difference".into()));
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        if mean == 0.0 {
            return Err(Error::Degenerate("all paired differences are zero".into()));
        }
        return Ok(TTest {
            t: mean.signum() * f64::INFINITY,
            df,
            p: 0.0,
            mean_difference: mean,
            infinite: true,
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    Ok(TTest {
        t,
        df,
        p: student_t_two_sided(t, df as f64),
        mean_difference: mean,
        infinite: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub filters: [usize; 4],
    pub hidden_units: usize,
    pub dropout: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            filters: [16, 16, 16, 16],
            hidden_units: 64,
            dropout: 0.0,
        }
    }
}

/// Four pooled conv blocks, a tanh embedding layer and a softmax head.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub classes: Vec<String>,
    pub store: ParamStore,
    blocks: Vec<ConvBlock>,
    hidden: Dense,
    head: Dense,
}

fn canvas_batch(sess: &mut Session, canvases: &[&Canvas]) -> Var {
    let data = canvases.iter().flat_map(|c| c.pixels().iter().copied()).collect();
    let t = Tensor::new(vec![canvases.len(), 1, CANVAS_SIZE, CANVAS_SIZE], data).expect("canvas size");
    sess.constant(t)
}

impl Classifier {
    pub fn new(config: ClassifierConfig, classes: Vec<String>, seed: u64) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "classifier needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut blocks = Vec::new();
        let (mut ch, mut side) = (1, CANVAS_SIZE);
        for (i, &k) in config.filters.iter().enumerate() {
            blocks.push(ConvBlock::new(
                &mut store,
                &format!("classifier.conv{i}"),
                ch,
                k,
                Activation::Relu,
                true,
                config.dropout,
                &mut rng,
            ));
            ch = k;
            side = side.div_ceil(2);
        }
        let hidden = Dense::new(&mut store, "classifier.hidden", ch * side * side, config.hidden_units, Activation::Tanh, &mut rng);
        let head = Dense::new(&mut store, "classifier.head", config.hidden_units, classes.len(), Activation::None, &mut rng);
        Ok(Classifier {
            config,
            classes,
            store,
            blocks,
            hidden,
            head,
        })
    }

    /// `(embeddings [N, H], logits [N, C])`.
    pub fn forward(&self, sess: &mut Session, canvases: &[&Canvas]) -> Result<(Var, Var)> {
        let n = canvases.len();
        let mut x = canvas_batch(sess, canvases);
        for b in &self.blocks {
            x = b.forward(sess, x)?;
        }
        let flat = sess.graph.value(x).len() / n;
        let x = sess.graph.reshape(x, &[n, flat])?;
        let e = self.hidden.forward(sess, x)?;
        let logits = self.head.forward(sess, e)?;
        Ok((e, logits))
    }

    /// Mean cross-entropy of the labels.
    pub fn cross_entropy(&self, sess: &mut Session, canvases: &[&Canvas], labels: &[usize]) -> Result<Var> {
        let (_, logits) = self.forward(sess, canvases)?;
        let mut terms = Vec::with_capacity(labels.len());
        for (i, &y) in labels.iter().enumerate() {
            let row = sess.graph.slice_rows(logits, i, 1)?;
            terms.push(categorical_log_prob_op(&mut sess.graph, row, y));
        }
        let total = sess.graph.add_n(&terms)?;
        Ok(sess.graph.scale(total, -1.0 / labels.len() as f64))
    }

    fn eval_rows(&self, canvases: &[&Canvas]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut sess = Session::new(&self.store, Mode::Eval, 0);
        let (e, l) = self.forward(&mut sess, canvases)?;
        let rows = |v: Var| {
            let w = sess.graph.shape(v)[1];
            sess.graph.value(v).chunks(w).map(|r| r.to_vec()).collect::<Vec<_>>()
        };
        Ok((rows(e), rows(l)))
    }

    /// Last-hidden-layer embeddings.
    pub fn embed(&self, canvases: &[&Canvas]) -> Result<Vec<Vec<f64>>> {
        Ok(self.eval_rows(canvases)?.0)
    }

    pub fn probabilities(&self, canvases: &[&Canvas]) -> Result<Vec<Vec<f64>>> {
        let (_, logits) = self.eval_rows(canvases)?;
        Ok(logits
            .iter()
            .map(|l| categorical_log_probs(l).iter().map(|v| v.exp()).collect())
            .collect())
    }

    pub fn predict(&self, canvases: &[&Canvas]) -> Result<Vec<usize>> {
        Ok(self
            .probabilities(canvases)?
            .iter()
            .map(|p| (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b }))
            .collect())
    }

    pub fn accuracy(&self, canvases: &[Canvas], labels: &[usize]) -> Result<f64> {
        let refs: Vec<&Canvas> = canvases.iter().collect();
        let pred = self.predict(&refs)?;
        Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
    }

    pub fn to_file(&self) -> ClassifierFile {
        ClassifierFile {
            config: self.config.clone(),
            classes: self.classes.clone(),
            tensors: self
                .store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.tensor.shape.clone(), p.tensor.data.iter().map(|v| *v as f32).collect()))
                .collect(),
        }
    }

    pub fn from_file(file: &ClassifierFile) -> Result<Self> {
        let mut c = Classifier::new(file.config.clone(), file.classes.clone(), 0)?;
        if file.tensors.len() != c.store.len() {
            return Err(Error::ConfigMismatch("classifier tensor count".into()));
        }
        for (p, (name, shape, data)) in c.store.iter_mut().zip(&file.tensors) {
            if &p.name != name || &p.tensor.shape != shape {
                return Err(Error::ConfigMismatch(format!("classifier tensor `{name}`")));
            }
            p.tensor.data = data.iter().map(|v| *v as f64).collect();
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let file: ClassifierFile =
            serde_json::from_slice(&bytes).map_err(|e| Error::CorruptCheckpoint(format!("classifier: {e}")))?;
        Self::from_file(&file)
    }

    /// Content hash identifying the weights.
    pub fn id(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_file()).expect("serialisable");
        Sha256::digest(&bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// JSON form of a trained classifier, weights stored as f32.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierFile {
    pub config: ClassifierConfig,
    pub classes: Vec<String>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

/// Cross-entropy training with the shared Adam and clipping machinery.
/// Returns the classifier and its per-step loss trace.
pub fn train_classifier(
    canvases: &[Canvas],
    labels: &[String],
    config: ClassifierConfig,
    train: &TrainConfig,
) -> Result<(Classifier, Vec<f64>)> {
    train.validate()?;
    if canvases.len() != labels.len() || canvases.len() < 2 {
        return Err(Error::InvalidArgument("need >= 2 labelled canvases".into()));
    }
    let mut classes: Vec<String> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let ys: Vec<usize> = labels.iter().map(|l| classes.binary_search(l).expect("present")).collect();
    let mut clf = Classifier::new(config, classes, train.seed)?;
    let mut adam = AdamState::new(&clf.store);
    let mut trace = Vec::with_capacity(train.max_steps);
    let mut batches = Vec::new();
    let mut epoch = 0;
    let batch_size = train.batch_size.max(2);
    for step in 0..train.max_steps {
        if batches.is_empty() {
            batches = epoch_batches(canvases.len(), batch_size, train.seed, epoch);
            // batch norm needs two images; fold a trailing singleton into its neighbour
            if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
                let last = batches.pop().expect("non-empty");
                batches.last_mut().expect("non-empty").extend(last);
            }
            batches.reverse();
            epoch += 1;
        }
        let idx = batches.pop().expect("non-empty epoch");
        let imgs: Vec<&Canvas> = idx.iter().map(|&i| &canvases[i]).collect();
        let y: Vec<usize> = idx.iter().map(|&i| ys[i]).collect();
        let mut sess = Session::new(&clf.store, Mode::Train, train.seed.wrapping_add(step as u64));
        let loss = clf.cross_entropy(&mut sess, &imgs, &y)?;
        let value = sess.graph.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, last_good: None });
        }
        let (graph, updates) = sess.finish();
        let mut grads = zero_grads(&clf.store);
        for (id, g) in graph.backward(loss).params() {
            grads[id.0].iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        trace.push(value);
        clf.store.apply_running_updates(updates);
        if let Some(c) = train.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        adam_step(&mut clf.store, &grads, &mut adam, train)?;
    }
    Ok((clf, trace))
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// Training-set embeddings keyed by drawing id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    pub classifier_id: String,
    pub ids: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
}

impl EmbeddingIndex {
    pub fn new(classifier_id: String, ids: Vec<String>, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != embeddings.len() {
            return Err(Error::InvalidArgument("ids and embeddings differ in length".into()));
        }
        let dim = embeddings.first().map_or(0, |e| e.len());
        for (id, e) in ids.iter().zip(&embeddings) {
            if e.len() != dim {
                return Err(Error::InvalidArgument(format!("embedding `{id}` has dimension {}", e.len())));
            }
            if e.iter().all(|v| *v == 0.0) || e.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("embedding `{id}` is zero or non-finite")));
            }
        }
        Ok(EmbeddingIndex {
            classifier_id,
            ids,
            embeddings,
        })
    }

    /// Embeds every canvas, in parallel chunks.
    pub fn build(classifier: &Classifier, items: &[(String, Canvas)]) -> Result<Self> {
        let chunks: Vec<Result<Vec<Vec<f64>>>> = items
            .par_chunks(64)
            .map(|c| classifier.embed(&c.iter().map(|(_, x)| x).collect::<Vec<_>>()))
            .collect();
        let mut embeddings = Vec::with_capacity(items.len());
        for c in chunks {
            embeddings.extend(c?);
        }
        Self::new(classifier.id(), items.iter().map(|(id, _)| id.clone()).collect(), embeddings)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub distance: f64,
}

/// Exhaustive cosine-distance scan; ties are broken by drawing id.
pub fn nearest_neighbors(queries: &[Vec<f64>], index: &EmbeddingIndex, k: usize) -> Result<Vec<Vec<Neighbor>>> {
    if k > index.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds index size {}", index.len())));
    }
    queries
        .par_iter()
        .map(|q| {
            if index.embeddings.first().is_some_and(|e| e.len() != q.len()) {
                return Err(Error::InvalidArgument("query dimension differs from the index".into()));
            }
            let mut all: Vec<(f64, &str)> = index
                .embeddings
                .iter()
                .zip(&index.ids)
                .map(|(e, id)| (cosine_distance(q, e), id.as_str()))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
            Ok(all
                .into_iter()
                .take(k)
                .map(|(distance, id)| Neighbor {
                    id: id.to_string(),
                    distance,
                })
                .collect())
        })
        .collect()
}

pub const GRID_SIDE: usize = 10;

/// A 10x10 sample arrangement and the nearest training drawing per cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleGrid {
    /// `cells[r][c]` is a sample index.
    pub cells: Vec<Vec<usize>>,
    pub neighbors: Vec<Vec<String>>,
}

/// Greedy row-major placement: sample 0 goes to (0, 0); each later cell
/// takes the unplaced sample with the least mean cosine distance to the
/// already placed cells above and to the left (lowest index on ties).
pub fn greedy_placement(embeddings: &[Vec<f64>]) -> Result<Vec<Vec<usize>>> {
    let n = GRID_SIDE * GRID_SIDE;
    if embeddings.len() != n {
        return Err(Error::InvalidArgument(format!("grid needs exactly {n} samples, got {}", embeddings.len())));
    }
    let mut cells = vec![vec![usize::MAX; GRID_SIDE]; GRID_SIDE];
    let mut used = vec![false; n];
    cells[0][0] = 0;
    used[0] = true;
    for pos in 1..n {
        let (r, c) = (pos / GRID_SIDE, pos % GRID_SIDE);
        let mut adj = Vec::with_capacity(2);
        if r > 0 {
            adj.push(cells[r - 1][c]);
        }
        if c > 0 {
            adj.push(cells[r][c - 1]);
        }
        let mut best = (f64::INFINITY, usize::MAX);
        for (i, e) in embeddings.iter().enumerate() {
            if used[i] {
                continue;
            }
            let d = adj.iter().map(|&j| cosine_distance(e, &embeddings[j])).sum::<f64>() / adj.len() as f64;
            if d < best.0 || best.1 == usize::MAX {
                best = (d, i);
            }
        }
        cells[r][c] = best.1;
        used[best.1] = true;
    }
    Ok(cells)
}

/// Sum of cosine distances over all orthogonally adjacent cell pairs.
pub fn grid_cost(cells: &[Vec<usize>], embeddings: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for r in 0..cells.len() {
        for c in 0..cells[r].len() {
            if r + 1 < cells.len() {
                total += cosine_distance(&embeddings[cells[r][c]], &embeddings[cells[r + 1][c]]);
            }
            if c + 1 < cells[r].len() {
                total += cosine_distance(&embeddings[cells[r][c]], &embeddings[cells[r][c + 1]]);
            }
        }
    }
    total
}

/// Greedy placement of 100 sample embeddings plus the paired grid of their
/// nearest indexed training drawings.
pub fn arrange_grid(sample_embeddings: &[Vec<f64>], index: &EmbeddingIndex) -> Result<SampleGrid> {
    let cells = greedy_placement(sample_embeddings)?;
    let nn = nearest_neighbors(sample_embeddings, index, 1)?;
    let neighbors = cells
        .iter()
        .map(|row| row.iter().map(|&i| nn[i][0].id.clone()).collect())
        .collect();
    Ok(SampleGrid { cells, neighbors })
}
