//! Canvas-reading model: location, stroke and termination networks around
//! the symbolic renderer.

use rand::Rng;

use super::{denormalise, normalise, row, LogTerm, ModelConfig, TermKind};
use crate::error::Result;
use crate::mdn::{bernoulli_log_prob_op, gmm_log_prob_op, sample_bernoulli, GmmParams};
use crate::render::{render_prefixes, Canvas, CANVAS_SIZE};
use crate::splines::{Point, SplineStroke};
use crate::tensor::{
    ConvBlock, Dense, Lstm, LstmState, Mode, ParamId, ParamStore, Session, Tensor, Var,
};
use crate::tensor::Activation;

const FEATURE_SIDE: usize = 14;

/// Pooled CNN followed by a dense layer and an output head.
#[derive(Clone, Debug)]
struct CnnMlp {
    blocks: Vec<ConvBlock>,
    dense: Dense,
    head: Dense,
    dropout: f64,
}

impl CnnMlp {
    fn new<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, name: &str, outputs: usize, rng: &mut R) -> Self {
        let mut blocks = Vec::new();
        let mut channels = 1;
        let mut side = CANVAS_SIZE;
        for (i, &k) in cfg.cnn_filters.iter().enumerate() {
            blocks.push(ConvBlock::new(
                store,
                &format!("{name}.conv{i}"),
                channels,
                k,
                cfg.activation,
                true,
                cfg.dropout,
                rng,
            ));
            channels = k;
            side = side.div_ceil(2);
        }
        let flat = channels * side * side;
        let dense = Dense::new(store, &format!("{name}.dense"), flat, cfg.dense_units, cfg.activation, rng);
        let head = Dense::new(store, &format!("{name}.head"), cfg.dense_units, outputs, Activation::None, rng);
        CnnMlp {
            blocks,
            dense,
            head,
            dropout: cfg.dropout,
        }
    }

    /// `[N, 1, 28, 28]` canvases to `[N, outputs]` raw head values.
    fn forward(&self, sess: &mut Session, images: Var) -> Result<Var> {
        let n = sess.graph.shape(images)[0];
        let mut x = images;
        for b in &self.blocks {
            x = b.forward(sess, x)?;
        }
        let flat = sess.graph.value(x).len() / n;
        let x = sess.graph.reshape(x, &[n, flat])?;
        let x = self.dense.forward(sess, x)?;
        let x = sess.dropout(x, self.dropout)?;
        self.head.forward(sess, x)
    }
}

#[derive(Clone, Debug)]
pub struct FullNs {
    location: CnnMlp,
    termination: CnnMlp,
    stroke_cnn: Vec<ConvBlock>,
    att_feature: ParamId,
    att_hidden: ParamId,
    att_bias: ParamId,
    att_score: ParamId,
    lstm: Lstm,
    stroke_head: Dense,
    start_offset: ParamId,
}

/// Attention over the 14x14 feature locations at one offset step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStep {
    pub weights: Vec<f64>,
    pub context: Vec<f64>,
}

/// Stroke-model state that persists between offset steps.
struct StrokeCtx {
    features: Var,
    projected: Var,
    state: Vec<LstmState>,
    prev: Var,
    y: Var,
}

fn stack_canvases(sess: &mut Session, canvases: &[&Canvas]) -> Var {
    let mut data = Vec::with_capacity(canvases.len() * CANVAS_SIZE * CANVAS_SIZE);
    for c in canvases {
        data.extend_from_slice(c.pixels());
    }
    sess.constant(Tensor {
        shape: vec![canvases.len(), 1, CANVAS_SIZE, CANVAS_SIZE],
        data,
        grad: None,
    })
}

impl FullNs {
    pub(crate) fn new<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let k = cfg.components;
        let location = CnnMlp::new(cfg, store, "fullns.location", 6 * k, rng);
        let termination = CnnMlp::new(cfg, store, "fullns.termination", 1, rng);
        let s = cfg.stroke_cnn_filters;
        let stroke_cnn = (0..3)
            .map(|i| {
                let inputs = if i == 0 { 1 } else { s };
                ConvBlock::new(store, &format!("fullns.stroke.conv{i}"), inputs, s, cfg.activation, i == 0, 0.0, rng)
            })
            .collect();
        let a = cfg.attention_units;
        let u = cfg.lstm_units;
        let att_feature = store.add("fullns.attention.feature", Tensor::glorot(&[s, a], s, a, rng), true);
        let att_hidden = store.add("fullns.attention.hidden", Tensor::glorot(&[u, a], u, a, rng), true);
        let att_bias = store.add("fullns.attention.bias", Tensor::zeros(&[a]), true);
        let att_score = store.add("fullns.attention.score", Tensor::glorot(&[a, 1], a, 1, rng), true);
        let lstm = Lstm::new(store, "fullns.stroke.lstm", 2 + s + 2, u, cfg.lstm_layers, cfg.dropout, rng);
        let stroke_head = Dense::new(store, "fullns.stroke.head", u, 6 * k + 1, Activation::None, rng);
        let start_offset = store.add("fullns.stroke.start", Tensor::zeros(&[1, 2]), true);
        FullNs {
            location,
            termination,
            stroke_cnn,
            att_feature,
            att_hidden,
            att_bias,
            att_score,
            lstm,
            stroke_head,
            start_offset,
        }
    }

    /// `[N, 1, 28, 28]` to `[N, S, 14, 14]` attention features.
    fn stroke_features(&self, sess: &mut Session, images: Var) -> Result<Var> {
        let mut x = images;
        for b in &self.stroke_cnn {
            x = b.forward(sess, x)?;
        }
        Ok(x)
    }

    /// Sets up the stroke LSTM for features row `index` and start `y`.
    fn begin_stroke(&self, sess: &mut Session, features: Var, index: usize, y: Point) -> Result<StrokeCtx> {
        let shape = sess.graph.shape(features).to_vec();
        let s = shape[1];
        let locs = FEATURE_SIDE * FEATURE_SIDE;
        let f = sess.graph.slice_rows(features, index, 1)?;
        let f = sess.graph.reshape(f, &[s, locs])?;
        let f = sess.graph.transpose(f)?;
        let wf = sess.param(self.att_feature);
        let projected = sess.graph.matmul(f, wf)?;
        let state = self.lstm.zero_state(sess, 1);
        let prev = sess.param(self.start_offset);
        let y = row(sess, &normalise(y));
        Ok(StrokeCtx {
            features: f,
            projected,
            state,
            prev,
            y,
        })
    }

    /// Soft attention over the 196 feature locations given the current hidden state.
    fn attend(&self, sess: &mut Session, ctx: &StrokeCtx) -> Result<(Var, Var)> {
        let h = ctx.state.last().expect("at least one layer").h;
        let wh = sess.param(self.att_hidden);
        let b = sess.param(self.att_bias);
        let v = sess.param(self.att_score);
        let g = &mut sess.graph;
        let hp = g.matmul(h, wh)?;
        let hp = g.add_row(hp, b)?;
        let e = g.add_row(ctx.projected, hp)?;
        let e = g.tanh(e);
        let scores = g.matmul(e, v)?;
        let scores = g.transpose(scores)?;
        let alpha = g.softmax_rows(scores)?;
        let context = g.matmul(alpha, ctx.features)?;
        Ok((context, alpha))
    }

    /// One offset step: returns the `[1, 6K + 1]` head output.
    fn stroke_step(&self, cfg: &ModelConfig, sess: &mut Session, ctx: &mut StrokeCtx) -> Result<Var> {
        let (context, _) = self.attend(sess, ctx)?;
        let input = sess.graph.concat(&[ctx.prev, context, ctx.y])?;
        ctx.state = self.lstm.step(sess, input, &ctx.state)?;
        let h = ctx.state.last().expect("at least one layer").h;
        let h = sess.dropout(h, cfg.dropout)?;
        self.stroke_head.forward(sess, h)
    }

    pub(crate) fn log_terms(
        &self,
        cfg: &ModelConfig,
        sess: &mut Session,
        drawings: &[&[SplineStroke]],
    ) -> Result<Vec<Vec<LogTerm>>> {
        let k = cfg.components;
        let prefixes: Vec<Vec<Canvas>> = drawings.iter().map(|d| render_prefixes(d)).collect();
        let before: Vec<&Canvas> = prefixes.iter().flat_map(|p| &p[..p.len() - 1]).collect();
        let after: Vec<&Canvas> = prefixes.iter().flat_map(|p| &p[1..]).collect();
        let before_img = stack_canvases(sess, &before);
        let after_img = stack_canvases(sess, &after);
        let loc_raw = self.location.forward(sess, before_img)?;
        let term_raw = self.termination.forward(sess, after_img)?;
        let features = self.stroke_features(sess, before_img)?;

        let mut out = Vec::with_capacity(drawings.len());
        let mut m = 0;
        for d in drawings {
            let mut terms = Vec::new();
            for (t, stroke) in d.iter().enumerate() {
                let raw = sess.graph.slice_rows(loc_raw, m, 1)?;
                let lp = gmm_log_prob_op(&mut sess.graph, raw, normalise(stroke.start))?;
                terms.push(LogTerm {
                    stroke: t,
                    kind: TermKind::Location,
                    var: lp,
                });

                let mut ctx = self.begin_stroke(sess, features, m, stroke.start)?;
                for (j, delta) in stroke.offsets.iter().enumerate() {
                    let head = self.stroke_step(cfg, sess, &mut ctx)?;
                    let gmm = sess.graph.slice_cols(head, 0, 6 * k)?;
                    let end = sess.graph.slice_cols(head, 6 * k, 1)?;
                    let d_norm = normalise(*delta);
                    let lp = gmm_log_prob_op(&mut sess.graph, gmm, d_norm)?;
                    terms.push(LogTerm {
                        stroke: t,
                        kind: TermKind::Offset,
                        var: lp,
                    });
                    let last = j + 1 == stroke.offsets.len();
                    let lp = bernoulli_log_prob_op(&mut sess.graph, end, last);
                    terms.push(LogTerm {
                        stroke: t,
                        kind: TermKind::StrokeEnd,
                        var: lp,
                    });
                    ctx.prev = row(sess, &d_norm);
                }

                let logit = sess.graph.slice_rows(term_raw, m, 1)?;
                let lp = bernoulli_log_prob_op(&mut sess.graph, logit, t + 1 == d.len());
                terms.push(LogTerm {
                    stroke: t,
                    kind: TermKind::Termination,
                    var: lp,
                });
                m += 1;
            }
            out.push(terms);
        }
        Ok(out)
    }

    /// Location distribution for the next stroke on `canvas` (eval mode).
    pub fn location_distribution(&self, store: &ParamStore, canvas: &Canvas) -> Result<GmmParams> {
        let mut sess = Session::new(store, Mode::Eval, 0);
        let img = stack_canvases(&mut sess, &[canvas]);
        let raw = self.location.forward(&mut sess, img)?;
        GmmParams::from_raw(sess.graph.value(raw))
    }

    /// Probability that the character is complete given `canvas` (eval mode).
    pub fn termination_probability(&self, store: &ParamStore, canvas: &Canvas) -> Result<f64> {
        let z = self.termination_logit(store, canvas)?;
        Ok(1.0 / (1.0 + (-z).exp()))
    }

    fn termination_logit(&self, store: &ParamStore, canvas: &Canvas) -> Result<f64> {
        let mut sess = Session::new(store, Mode::Eval, 0);
        let img = stack_canvases(&mut sess, &[canvas]);
        let raw = self.termination.forward(&mut sess, img)?;
        Ok(sess.graph.scalar(raw))
    }

    /// Stroke-model feature map of `canvas` as `[196, S]` rows (eval mode).
    pub fn feature_map(&self, store: &ParamStore, canvas: &Canvas) -> Result<Tensor> {
        let mut sess = Session::new(store, Mode::Eval, 0);
        let img = stack_canvases(&mut sess, &[canvas]);
        let features = self.stroke_features(&mut sess, img)?;
        let ctx = self.begin_stroke(&mut sess, features, 0, [0.0, 0.0])?;
        Ok(sess.graph.tensor(ctx.features))
    }

    /// Attention weights and context at each step of teacher-forcing
    /// `stroke` on `canvas` (eval mode).
    pub fn attention(
        &self,
        cfg: &ModelConfig,
        store: &ParamStore,
        canvas: &Canvas,
        stroke: &SplineStroke,
    ) -> Result<Vec<AttentionStep>> {
        let mut sess = Session::new(store, Mode::Eval, 0);
        let img = stack_canvases(&mut sess, &[canvas]);
        let features = self.stroke_features(&mut sess, img)?;
        let mut ctx = self.begin_stroke(&mut sess, features, 0, stroke.start)?;
        let mut out = Vec::new();
        for delta in &stroke.offsets {
            let (context, alpha) = self.attend(&mut sess, &ctx)?;
            out.push(AttentionStep {
                weights: sess.graph.value(alpha).to_vec(),
                context: sess.graph.value(context).to_vec(),
            });
            self.stroke_step(cfg, &mut sess, &mut ctx)?;
            ctx.prev = row(&mut sess, &normalise(*delta));
        }
        Ok(out)
    }

    pub(crate) fn generate<R: Rng + ?Sized>(
        &self,
        cfg: &ModelConfig,
        store: &ParamStore,
        rng: &mut R,
        temperature: f64,
    ) -> Result<(Vec<SplineStroke>, bool)> {
        let k = cfg.components;
        let mut canvas = Canvas::new();
        let mut strokes = Vec::new();
        let mut capped = false;
        loop {
            let loc = self.location_distribution(store, &canvas)?;
            let y = denormalise(loc.sample(temperature, rng)?);

            let mut sess = Session::new(store, Mode::Eval, 0);
            let img = stack_canvases(&mut sess, &[&canvas]);
            let features = self.stroke_features(&mut sess, img)?;
            let mut ctx = self.begin_stroke(&mut sess, features, 0, y)?;
            let mut offsets = Vec::new();
            loop {
                let head = self.stroke_step(cfg, &mut sess, &mut ctx)?;
                let raw = sess.graph.value(head);
                let gmm = GmmParams::from_raw(&raw[..6 * k])?;
                let end_logit = raw[6 * k];
                let d = gmm.sample(temperature, rng)?;
                let end = sample_bernoulli(end_logit, temperature, rng)?;
                offsets.push(denormalise(d));
                if end {
                    break;
                }
                if offsets.len() >= cfg.max_offsets {
                    capped = true;
                    break;
                }
                ctx.prev = row(&mut sess, &d);
            }
            drop(sess);

            let stroke = SplineStroke { start: y, offsets };
            canvas.draw_stroke(&stroke);
            strokes.push(stroke);
            let logit = self.termination_logit(store, &canvas)?;
            if sample_bernoulli(logit, temperature, rng)? {
                return Ok((strokes, capped));
            }
            if strokes.len() >= cfg.max_strokes {
                return Ok((strokes, true));
            }
        }
    }
}
