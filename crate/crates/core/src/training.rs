//! Maximum-likelihood training: Adam, global-norm clipping, the minibatch
//! loop, checkpoint files and hyperparameter selection.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig, ModelKind};
use crate::splines::SplineStroke;
use crate::tensor::{Mode, ParamStore, Session};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GGCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_steps: usize,
    /// Checkpoint interval in steps; 0 emits only the final checkpoint.
    pub eval_every: usize,
    pub seed: u64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 200,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_steps: 1000,
            eval_every: 100,
            seed: 0,
            clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad learning rate {}", self.learning_rate)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument(format!("clip norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Dense per-parameter gradient buffers aligned with the store.
pub type GradBuffers = Vec<Vec<f64>>;

pub fn zero_grads(store: &ParamStore) -> GradBuffers {
    store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect()
}

/// Bias-corrected Adam update of every trainable parameter.
pub fn adam_step(store: &mut ParamStore, grads: &GradBuffers, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    for ((_, p), g) in store.iter().zip(grads) {
        if p.trainable && g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for j in 0..g.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p.tensor.data[j] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &GradBuffers) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales all gradients so the global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut GradBuffers, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

fn mix(a: u64, b: u64) -> u64 {
    crate::tensor::layers::splitmix64(a ^ crate::tensor::layers::splitmix64(b))
}

/// Minibatch index lists for one epoch: a seeded shuffle cut into
/// `batch_size` chunks, each sorted so summation order is shuffle-independent.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch));
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1))
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_unstable();
            c
        })
        .collect()
}

/// Loss and summed gradients of the mean minibatch NLL in train mode.
///
/// The canvas model shares batch statistics across the whole minibatch and
/// runs on one tape; the sequence models run one tape per drawing in
/// parallel and add gradients in index order, so the result does not depend
/// on the thread count.
pub fn batch_gradients(model: &Model, batch: &[&[SplineStroke]], seed: u64) -> Result<(f64, GradBuffers, Vec<crate::tensor::RunningUpdate>)> {
    let store = model.store();
    let mut grads = zero_grads(store);
    if model.kind() == ModelKind::FullNs {
        let mut sess = Session::new(store, Mode::Train, seed);
        let loss = model.batch_nll(&mut sess, batch)?;
        let value = sess.graph.scalar(loss);
        let (graph, updates) = sess.finish();
        if !value.is_finite() {
            return Ok((value, grads, updates));
        }
        for (id, g) in graph.backward(loss).params() {
            grads[id.0].iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        return Ok((value, grads, updates));
    }
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<Result<(f64, Vec<(crate::tensor::ParamId, Vec<f64>)>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let mut sess = Session::new(store, Mode::Train, mix(seed, i as u64));
            let nll = model.drawing_nlls(&mut sess, &[d])?[0];
            let loss = sess.graph.scale(nll, scale);
            let value = sess.graph.scalar(loss);
            let (graph, _) = sess.finish();
            let g = graph.backward(loss).params().map(|(id, g)| (id, g.to_vec())).collect();
            Ok((value, g))
        })
        .collect();
    let mut total = 0.0;
    for part in parts {
        let (v, g) = part?;
        total += v;
        for (id, g) in g {
            grads[id.0].iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }
    Ok((total, grads, Vec::new()))
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Train-mode minibatch loss at every step, before that step's update.
    pub loss_trace: Vec<f64>,
    pub checkpoint: ModelCheckpoint,
}

/// Trains `model` in place. `on_checkpoint` receives a checkpoint every
/// `eval_every` steps and at the end. A non-finite loss aborts with the most
/// recent checkpoint taken (the initial state if none was emitted yet).
pub fn train<F>(model: &mut Model, data: &[Vec<SplineStroke>], cfg: &TrainConfig, mut on_checkpoint: F) -> Result<TrainOutcome>
where
    F: FnMut(&ModelCheckpoint) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut adam = AdamState::new(model.store());
    let mut trace = Vec::with_capacity(cfg.max_steps);
    let mut last_good = ModelCheckpoint::from_model(model, Some(cfg), Some(&adam), &trace);
    let mut batches = Vec::new();
    let mut epoch = 0u64;
    for step in 0..cfg.max_steps {
        if batches.is_empty() {
            batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch);
            batches.reverse();
            epoch += 1;
        }
        let idx = batches.pop().expect("non-empty epoch");
        let batch: Vec<&[SplineStroke]> = idx.iter().map(|&i| data[i].as_slice()).collect();
        // a non-finite head output surfaces as invalid mixture parameters
        let (loss, mut grads, updates) = match batch_gradients(model, &batch, mix(cfg.seed ^ 0x5EED, step as u64)) {
            Ok(r) => r,
            Err(Error::InvalidParams(m)) => {
                log::warn!("step {step}: {m}");
                (f64::NAN, Vec::new(), Vec::new())
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                last_good: Some(Box::new(last_good)),
            });
        }
        trace.push(loss);
        model.store_mut().apply_running_updates(updates);
        if let Some(c) = cfg.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        adam_step(model.store_mut(), &grads, &mut adam, cfg)?;
        let done = step + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.max_steps {
            last_good = ModelCheckpoint::from_model(model, Some(cfg), Some(&adam), &trace);
            on_checkpoint(&last_good)?;
        }
    }
    let checkpoint = ModelCheckpoint::from_model(model, Some(cfg), Some(&adam), &trace);
    on_checkpoint(&checkpoint)?;
    Ok(TrainOutcome {
        loss_trace: trace,
        checkpoint,
    })
}

/// A named tensor stored at 32-bit precision.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Persisted model: configuration, parameters, optimizer moments and
/// training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Optimizer steps taken; with the train seed this fixes the shuffle
    /// and dropout streams for resumption.
    pub step: u64,
    pub loss_trace: Vec<f64>,
    pub tensors: Vec<StoredTensor>,
    /// Adam moments as `adam.m.<name>` / `adam.v.<name>` tensors.
    pub optimizer: Vec<StoredTensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: ModelKind,
    model: ModelConfig,
    train: Option<TrainConfig>,
    step: u64,
    loss_trace: Vec<f64>,
    tensors: Vec<TensorEntry>,
    optimizer: Vec<TensorEntry>,
    payload_len: usize,
    payload_sha256: String,
}

fn stored(name: String, shape: &[usize], data: &[f64]) -> StoredTensor {
    StoredTensor {
        name,
        shape: shape.to_vec(),
        data: data.iter().map(|v| *v as f32).collect(),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl ModelCheckpoint {
    pub fn from_model(model: &Model, train: Option<&TrainConfig>, adam: Option<&AdamState>, trace: &[f64]) -> Self {
        let store = model.store();
        let tensors = store
            .iter()
            .map(|(_, p)| stored(p.name.clone(), &p.tensor.shape, &p.tensor.data))
            .collect();
        let mut optimizer = Vec::new();
        if let Some(a) = adam {
            for (i, (_, p)) in store.iter().enumerate() {
                optimizer.push(stored(format!("adam.m.{}", p.name), &p.tensor.shape, &a.m[i]));
                optimizer.push(stored(format!("adam.v.{}", p.name), &p.tensor.shape, &a.v[i]));
            }
        }
        ModelCheckpoint {
            version: CHECKPOINT_VERSION,
            model: model.config().clone(),
            train: train.cloned(),
            step: adam.map_or(0, |a| a.t),
            loss_trace: trace.to_vec(),
            tensors,
            optimizer,
        }
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.model.clone(), 0)?;
        let by_name: BTreeMap<&str, &StoredTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        if by_name.len() != self.tensors.len() {
            return Err(Error::CorruptCheckpoint("duplicate tensor names".into()));
        }
        if by_name.len() != model.store().len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {} tensors, {} model expects {}",
                by_name.len(),
                self.model.kind,
                model.store().len()
            )));
        }
        for p in model.store_mut().iter_mut() {
            let t = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter `{}`", p.name)))?;
            if t.shape != p.tensor.shape {
                return Err(Error::ConfigMismatch(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name, t.shape, p.tensor.shape
                )));
            }
            p.tensor.data = t.data.iter().map(|v| *v as f64).collect();
        }
        Ok(model)
    }

    /// As `to_model`, rejecting checkpoints of another model kind.
    pub fn to_model_of_kind(&self, kind: ModelKind) -> Result<Model> {
        if self.model.kind != kind {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds a {} model, expected {kind}",
                self.model.kind
            )));
        }
        self.to_model()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut payload = Vec::new();
        let dir = |ts: &[StoredTensor], payload: &mut Vec<u8>| -> Vec<TensorEntry> {
            ts.iter()
                .map(|t| {
                    let offset = payload.len() / 4;
                    for v in &t.data {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                    TensorEntry {
                        name: t.name.clone(),
                        shape: t.shape.clone(),
                        offset,
                        len: t.data.len(),
                    }
                })
                .collect()
        };
        let tensors = dir(&self.tensors, &mut payload);
        let optimizer = dir(&self.optimizer, &mut payload);
        let manifest = Manifest {
            format_version: self.version,
            kind: self.model.kind,
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            loss_trace: self.loss_trace.clone(),
            tensors,
            optimizer,
            payload_len: payload.len(),
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&manifest)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 16 {
            return Err(corrupt("file shorter than the header"));
        }
        if &bytes[..6] != b"GGCKPT" {
            return Err(corrupt("bad magic bytes"));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointVersion(String::from_utf8_lossy(&bytes[6..8]).into_owned()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < len {
            return Err(corrupt("truncated manifest"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..len]).map_err(|e| Error::CorruptCheckpoint(format!("manifest: {e}")))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion(manifest.format_version.to_string()));
        }
        if manifest.kind != manifest.model.kind {
            return Err(corrupt("manifest kind disagrees with its model config"));
        }
        let payload = &body[len..];
        if payload.len() != manifest.payload_len {
            return Err(corrupt("payload length does not match the manifest"));
        }
        if hex(&Sha256::digest(payload)) != manifest.payload_sha256 {
            return Err(corrupt("payload checksum mismatch"));
        }
        let read = |entries: &[TensorEntry]| -> Result<Vec<StoredTensor>> {
            entries
                .iter()
                .map(|e| {
                    if e.shape.iter().product::<usize>() != e.len {
                        return Err(Error::CorruptCheckpoint(format!("tensor `{}` shape/length mismatch", e.name)));
                    }
                    let end = (e.offset + e.len) * 4;
                    if end > payload.len() {
                        return Err(Error::CorruptCheckpoint(format!("tensor `{}` outside payload", e.name)));
                    }
                    let data = payload[e.offset * 4..end]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Ok(StoredTensor {
                        name: e.name.clone(),
                        shape: e.shape.clone(),
                        data,
                    })
                })
                .collect()
        };
        Ok(ModelCheckpoint {
            version: manifest.format_version,
            model: manifest.model,
            train: manifest.train,
            step: manifest.step,
            loss_trace: manifest.loss_trace,
            tensors: read(&manifest.tensors)?,
            optimizer: read(&manifest.optimizer)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// One grid point of a hyperparameter search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpCandidate {
    pub id: String,
    pub config: ModelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpResult {
    pub id: String,
    pub fold: usize,
    pub validation_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpSearchReport {
    pub results: Vec<HpResult>,
    pub mean_validation_loss: BTreeMap<String, f64>,
    pub best: String,
}

/// Id with the lowest mean validation loss; ties go to the
/// lexicographically smallest id and NaN means are never selected.
pub fn select_best(results: &[HpResult]) -> Result<(String, BTreeMap<String, f64>)> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in results {
        let e = sums.entry(r.id.clone()).or_insert((0.0, 0));
        e.0 += r.validation_loss;
        e.1 += 1;
    }
    let means: BTreeMap<String, f64> = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    let mut best: Option<(&String, f64)> = None;
    for (id, &m) in &means {
        if m.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| m < b) {
            best = Some((id, m));
        }
    }
    let best = best
        .map(|(id, _)| id.clone())
        .ok_or_else(|| Error::InvalidArgument("no finite hyperparameter results".into()))?;
    Ok((best, means))
}

/// Mean eval-mode NLL over a set of drawings.
pub fn mean_nll(model: &Model, data: &[Vec<SplineStroke>]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let nlls: Vec<Result<f64>> = data.par_iter().map(|d| model.score_drawing(d)).collect();
    let mut total = 0.0;
    for v in nlls {
        total += v?;
    }
    Ok(total / data.len() as f64)
}

/// Trains every candidate on every (train, validation) fold and selects the
/// lowest mean validation loss.
pub fn hp_search(
    candidates: &[HpCandidate],
    folds: &[(Vec<Vec<SplineStroke>>, Vec<Vec<SplineStroke>>)],
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<HpSearchReport> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("empty hyperparameter grid".into()));
    }
    let mut results = Vec::new();
    for c in candidates {
        for (f, (train_set, val)) in folds.iter().enumerate() {
            let mut model = Model::new(c.config.clone(), init_seed)?;
            let loss = match train(&mut model, train_set, cfg, |_| Ok(())) {
                Ok(_) => mean_nll(&model, val)?,
                Err(Error::NonFiniteLoss { step, .. }) => {
                    log::warn!("candidate {} fold {} diverged at step {step}", c.id, f + 1);
                    f64::NAN
                }
                Err(e) => return Err(e),
            };
            results.push(HpResult {
                id: c.id.clone(),
                fold: f + 1,
                validation_loss: loss,
            });
        }
    }
    let (best, means) = select_best(&results)?;
    Ok(HpSearchReport {
        results,
        mean_validation_loss: means,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![1], vec![w]).unwrap(), true);
        s
    }

    #[test]
    fn first_adam_step_is_lr_times_sign() {
        let cfg = TrainConfig::default();
        for g in [3.0, -0.02] {
            let mut s = scalar_store(1.0);
            let mut st = AdamState::new(&s);
            adam_step(&mut s, &vec![vec![g]], &mut st, &cfg).unwrap();
            let expect = 1.0 - cfg.learning_rate * g / (g.abs() + cfg.eps);
            assert!((s.by_name("w").unwrap().tensor.data[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let cfg = TrainConfig::default();
        let mut s = scalar_store(0.5);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &vec![vec![1.0]], &mut st, &cfg).unwrap();
        let w = s.by_name("w").unwrap().tensor.data[0];
        let (m, v) = (st.m[0][0], st.v[0][0]);
        let mut st2 = st.clone();
        let mut s2 = s.clone();
        adam_step(&mut s2, &vec![vec![0.0]], &mut st2, &cfg).unwrap();
        assert!((st2.m[0][0] - 0.9 * m).abs() < 1e-15);
        assert!((st2.v[0][0] - 0.999 * v).abs() < 1e-15);
        // the bias-corrected first moment still moves the parameter
        let mut s3 = scalar_store(0.5);
        let mut st3 = AdamState::new(&s3);
        adam_step(&mut s3, &vec![vec![0.0]], &mut st3, &cfg).unwrap();
        assert_eq!(s3.by_name("w").unwrap().tensor.data[0], 0.5);
        assert!(w < 0.5);
    }

    #[test]
    fn adam_descends_a_parabola() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        for _ in 0..200 {
            let w = s.by_name("w").unwrap().tensor.data[0];
            adam_step(&mut s, &vec![vec![2.0 * w]], &mut st, &cfg).unwrap();
        }
        assert!(s.by_name("w").unwrap().tensor.data[0].abs() < 1e-2);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        let err = adam_step(&mut s, &vec![vec![f64::NAN]], &mut st, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
    }

    #[test]
    fn clipping_bounds_the_norm_exactly() {
        let mut g = vec![vec![3.0, 4.0], vec![12.0]];
        let before = clip_global_norm(&mut g, 5.0);
        assert_eq!(before, 13.0);
        assert!((global_norm(&g) - 5.0).abs() < 1e-12);
        let mut small = vec![vec![0.3]];
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small, vec![vec![0.3]]);
    }

    #[test]
    fn epoch_batches_partition_indices() {
        let b = epoch_batches(10, 4, 3, 0);
        assert_eq!(b.iter().map(|c| c.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(10, 4, 3, 0));
        assert_ne!(b, epoch_batches(10, 4, 3, 1));
    }

    #[test]
    fn selection_is_argmin_with_lexicographic_ties() {
        let r = |id: &str, l: f64| HpResult {
            id: id.into(),
            fold: 1,
            validation_loss: l,
        };
        assert_eq!(select_best(&[r("only", 3.0)]).unwrap().0, "only");
        assert_eq!(select_best(&[r("a", 2.0), r("b", f64::NEG_INFINITY), r("c", 1.0)]).unwrap().0, "b");
        assert_eq!(select_best(&[r("zeta", 1.0), r("alpha", 1.0), r("mid", 1.0)]).unwrap().0, "alpha");
        assert_eq!(select_best(&[r("x", f64::NAN), r("y", 9.0)]).unwrap().0, "y");
    }
}
