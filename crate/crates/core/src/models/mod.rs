//! The three generative architectures.
//!
//! All models see locations in the 105x105 source frame divided by 105 and
//! offsets divided by the same factor, so reported likelihoods are densities
//! in these normalised units.

mod baseline;
mod fullns;
mod hlstm;

pub use baseline::{flatten_drawing, unflatten_sequence, Baseline, SequenceElement};
pub use fullns::{AttentionStep, FullNs};
pub use hlstm::Hlstm;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{render_drawing, Canvas, SOURCE_FRAME};
use crate::splines::{Point, SplineStroke};
use crate::tensor::{Activation, Mode, ParamStore, Session, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    FullNs,
    Hlstm,
    Baseline,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::FullNs, ModelKind::Hlstm, ModelKind::Baseline];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::FullNs => "full_ns",
            ModelKind::Hlstm => "hlstm",
            ModelKind::Baseline => "baseline",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::FullNs => "Full NS",
            ModelKind::Hlstm => "H-LSTM",
            ModelKind::Baseline => "Baseline",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_ns" | "fullns" => Ok(ModelKind::FullNs),
            "hlstm" => Ok(ModelKind::Hlstm),
            "baseline" => Ok(ModelKind::Baseline),
            other => Err(Error::InvalidArgument(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Architecture hyperparameters. Fields a given kind does not use are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Mixture components per GMM head.
    pub components: usize,
    pub activation: Activation,
    pub dropout: f64,
    /// Filters of the four pooled blocks in the location and termination CNNs.
    pub cnn_filters: Vec<usize>,
    pub dense_units: usize,
    pub stroke_cnn_filters: usize,
    pub attention_units: usize,
    /// Stroke LSTM (Full NS), character LSTM (H-LSTM) or the single LSTM (Baseline).
    pub lstm_layers: usize,
    pub lstm_units: usize,
    /// H-LSTM stroke encoder units per direction.
    pub encoder_units: usize,
    /// H-LSTM stroke model units.
    pub stroke_units: usize,
    /// H-LSTM location MLP hidden units.
    pub mlp_units: usize,
    pub max_strokes: usize,
    pub max_offsets: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::standard(ModelKind::FullNs)
    }
}

impl ModelConfig {
    /// Desk defaults at the sizes reported for the original experiments;
    /// tuned values that were never published are filled with plain choices.
    pub fn standard(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            components: crate::mdn::DEFAULT_COMPONENTS,
            activation: Activation::Relu,
            dropout: 0.1,
            cnn_filters: vec![64; 4],
            dense_units: 256,
            stroke_cnn_filters: 64,
            attention_units: 128,
            lstm_layers: if kind == ModelKind::Baseline { 2 } else { 1 },
            lstm_units: 256,
            encoder_units: 256,
            stroke_units: 256,
            mlp_units: 256,
            max_strokes: 10,
            max_offsets: 30,
        }
    }

    /// Small smooth configuration for tests and gradient checks.
    pub fn tiny(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            components: 3,
            activation: Activation::Tanh,
            dropout: 0.0,
            cnn_filters: vec![4; 4],
            dense_units: 8,
            stroke_cnn_filters: 4,
            attention_units: 8,
            lstm_layers: 1,
            lstm_units: 16,
            encoder_units: 8,
            stroke_units: 16,
            mlp_units: 16,
            max_strokes: 10,
            max_offsets: 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("components", self.components),
            ("dense_units", self.dense_units),
            ("stroke_cnn_filters", self.stroke_cnn_filters),
            ("attention_units", self.attention_units),
            ("lstm_layers", self.lstm_layers),
            ("lstm_units", self.lstm_units),
            ("encoder_units", self.encoder_units),
            ("stroke_units", self.stroke_units),
            ("mlp_units", self.mlp_units),
            ("max_strokes", self.max_strokes),
            ("max_offsets", self.max_offsets),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        if self.cnn_filters.len() != 4 || self.cnn_filters.contains(&0) {
            return Err(Error::InvalidArgument(
                "cnn_filters needs four positive entries".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Which factor of the likelihood a term belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Location,
    Offset,
    StrokeEnd,
    Termination,
    PenState,
}

/// One log-probability factor of a drawing's likelihood.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub stroke: usize,
    pub kind: TermKind,
    pub log_prob: f64,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LogTerm {
    pub stroke: usize,
    pub kind: TermKind,
    pub var: Var,
}

/// A sampled character. Stroke `i` of `strokes` is the `i`-th stroke drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCharacter {
    pub strokes: Vec<SplineStroke>,
    #[serde(skip)]
    pub canvas: Canvas,
    /// True when a stroke or offset cap ended sampling.
    pub capped: bool,
}

pub(crate) fn normalise(p: Point) -> Point {
    [p[0] / SOURCE_FRAME, p[1] / SOURCE_FRAME]
}

pub(crate) fn denormalise(p: Point) -> Point {
    [p[0] * SOURCE_FRAME, p[1] * SOURCE_FRAME]
}

pub(crate) fn row(sess: &mut Session, values: &[f64]) -> Var {
    sess.constant(Tensor {
        shape: vec![1, values.len()],
        data: values.to_vec(),
        grad: None,
    })
}

pub(crate) fn check_drawing(strokes: &[SplineStroke]) -> Result<()> {
    if strokes.is_empty() {
        return Err(Error::InvalidArgument("cannot score an empty drawing".into()));
    }
    for (i, s) in strokes.iter().enumerate() {
        if s.offsets.is_empty() {
            return Err(Error::InvalidArgument(format!("stroke {i} has no offsets")));
        }
        if !s.is_finite() {
            return Err(Error::InvalidArgument(format!("stroke {i} is not finite")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
enum Net {
    FullNs(FullNs),
    Hlstm(Hlstm),
    Baseline(Baseline),
}

/// A generative model: architecture plus its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    net: Net,
}

impl Model {
    /// Fresh model with parameters initialised from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = match config.kind {
            ModelKind::FullNs => Net::FullNs(FullNs::new(&config, &mut store, &mut rng)),
            ModelKind::Hlstm => Net::Hlstm(Hlstm::new(&config, &mut store, &mut rng)),
            ModelKind::Baseline => Net::Baseline(Baseline::new(&config, &mut store, &mut rng)),
        };
        Ok(Model { config, store, net })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// The canvas-reading network, for inspecting its sub-models.
    pub fn as_full_ns(&self) -> Option<&FullNs> {
        match &self.net {
            Net::FullNs(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_hlstm(&self) -> Option<&Hlstm> {
        match &self.net {
            Net::Hlstm(m) => Some(m),
            _ => None,
        }
    }

    pub(crate) fn log_terms(&self, sess: &mut Session, drawings: &[&[SplineStroke]]) -> Result<Vec<Vec<LogTerm>>> {
        for d in drawings {
            check_drawing(d)?;
        }
        match &self.net {
            Net::FullNs(m) => m.log_terms(&self.config, sess, drawings),
            Net::Hlstm(m) => drawings.iter().map(|d| m.log_terms(&self.config, sess, d)).collect(),
            Net::Baseline(m) => drawings.iter().map(|d| m.log_terms(&self.config, sess, d)).collect(),
        }
    }

    /// Per-drawing negative log-likelihood nodes recorded on `sess`.
    pub fn drawing_nlls(&self, sess: &mut Session, drawings: &[&[SplineStroke]]) -> Result<Vec<Var>> {
        let terms = self.log_terms(sess, drawings)?;
        terms
            .into_iter()
            .map(|t| {
                let vars: Vec<Var> = t.iter().map(|t| t.var).collect();
                let total = sess.graph.add_n(&vars)?;
                Ok(sess.graph.scale(total, -1.0))
            })
            .collect()
    }

    /// Mean negative log-likelihood of a minibatch, as a scalar node.
    pub fn batch_nll(&self, sess: &mut Session, drawings: &[&[SplineStroke]]) -> Result<Var> {
        if drawings.is_empty() {
            return Err(Error::InvalidArgument("empty minibatch".into()));
        }
        let nlls = self.drawing_nlls(sess, drawings)?;
        let total = sess.graph.add_n(&nlls)?;
        Ok(sess.graph.scale(total, 1.0 / drawings.len() as f64))
    }

    /// Every log-probability factor of a drawing, teacher forced in eval mode.
    pub fn score_breakdown(&self, drawing: &[SplineStroke]) -> Result<Vec<Term>> {
        let mut sess = Session::new(&self.store, Mode::Eval, 0);
        let terms = self.log_terms(&mut sess, &[drawing])?;
        Ok(terms[0]
            .iter()
            .map(|t| Term {
                stroke: t.stroke,
                kind: t.kind,
                log_prob: sess.graph.scalar(t.var),
            })
            .collect())
    }

    /// Negative log-likelihood of one drawing in nats (eval mode).
    pub fn score_drawing(&self, drawing: &[SplineStroke]) -> Result<f64> {
        let mut sess = Session::new(&self.store, Mode::Eval, 0);
        let nll = self.drawing_nlls(&mut sess, &[drawing])?;
        let v = sess.graph.scalar(nll[0]);
        if !v.is_finite() {
            return Err(Error::InvalidParams(format!("non-finite likelihood {v}")));
        }
        Ok(v)
    }

    /// Ancestral sample of one character at the given temperature.
    pub fn generate_character<R: Rng + ?Sized>(&self, rng: &mut R, temperature: f64) -> Result<GeneratedCharacter> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
        }
        let (strokes, capped) = match &self.net {
            Net::FullNs(m) => m.generate(&self.config, &self.store, rng, temperature)?,
            Net::Hlstm(m) => m.generate(&self.config, &self.store, rng, temperature)?,
            Net::Baseline(m) => m.generate(&self.config, &self.store, rng, temperature)?,
        };
        let canvas = render_drawing(&strokes);
        Ok(GeneratedCharacter {
            strokes,
            canvas,
            capped,
        })
    }
}
