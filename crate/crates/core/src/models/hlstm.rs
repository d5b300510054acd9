//! Hierarchical LSTM: a character-level LSTM over strokes, a bidirectional
//! stroke encoder, an MLP location head and an offset LSTM.

use rand::Rng;

use super::{denormalise, normalise, row, LogTerm, ModelConfig, TermKind};
use crate::error::Result;
use crate::mdn::{bernoulli_log_prob_op, gmm_log_prob_op, sample_bernoulli, GmmParams};
use crate::splines::{Point, SplineStroke};
use crate::tensor::{Activation, Dense, Lstm, LstmCell, LstmState, Mode, ParamId, ParamStore, Session, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Hlstm {
    enc_forward: LstmCell,
    enc_backward: LstmCell,
    character: Lstm,
    start_location: ParamId,
    start_encoding: ParamId,
    loc_hidden: Dense,
    loc_head: Dense,
    stroke: LstmCell,
    stroke_head: Dense,
    stroke_start: ParamId,
}

impl Hlstm {
    pub(crate) fn new<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let k = cfg.components;
        let e = cfg.encoder_units;
        let u = cfg.lstm_units;
        Hlstm {
            enc_forward: LstmCell::new(store, "hlstm.encoder.forward", 2, e, rng),
            enc_backward: LstmCell::new(store, "hlstm.encoder.backward", 2, e, rng),
            character: Lstm::new(store, "hlstm.character", 2 + 2 * e, u, cfg.lstm_layers, cfg.dropout, rng),
            start_location: store.add("hlstm.start.location", Tensor::zeros(&[1, 2]), true),
            start_encoding: store.add("hlstm.start.encoding", Tensor::zeros(&[1, 2 * e]), true),
            loc_hidden: Dense::new(store, "hlstm.location.hidden", u, cfg.mlp_units, cfg.activation, rng),
            loc_head: Dense::new(store, "hlstm.location.head", cfg.mlp_units, 6 * k + 1, Activation::None, rng),
            stroke: LstmCell::new(store, "hlstm.stroke.lstm", 2 + 2 + u, cfg.stroke_units, rng),
            stroke_head: Dense::new(store, "hlstm.stroke.head", cfg.stroke_units, 6 * k + 1, Activation::None, rng),
            stroke_start: store.add("hlstm.stroke.start", Tensor::zeros(&[1, 2]), true),
        }
    }

    /// Final forward and backward hidden states over normalised offsets, concatenated.
    pub(crate) fn encode(&self, sess: &mut Session, offsets: &[Point]) -> Result<Var> {
        let inputs: Vec<Var> = offsets.iter().map(|d| row(sess, d)).collect();
        let mut fwd = self.enc_forward.zero_state(sess, 1);
        for &x in &inputs {
            fwd = self.enc_forward.step(sess, x, fwd)?;
        }
        let mut bwd = self.enc_backward.zero_state(sess, 1);
        for &x in inputs.iter().rev() {
            bwd = self.enc_backward.step(sess, x, bwd)?;
        }
        sess.graph.concat(&[fwd.h, bwd.h])
    }

    /// Encoder output for a stroke's source-frame offsets (eval mode).
    pub fn encode_stroke(&self, store: &ParamStore, offsets: &[Point]) -> Result<Vec<f64>> {
        let mut sess = Session::new(store, Mode::Eval, 0);
        let norm: Vec<Point> = offsets.iter().map(|d| normalise(*d)).collect();
        let v = self.encode(&mut sess, &norm)?;
        Ok(sess.graph.value(v).to_vec())
    }

    /// Character step: returns the new states and the `[1, 6K + 1]` location head.
    fn char_step(
        &self,
        cfg: &ModelConfig,
        sess: &mut Session,
        input: Var,
        state: &[LstmState],
    ) -> Result<(Vec<LstmState>, Var, Var)> {
        let state = self.character.step(sess, input, state)?;
        let h = state.last().expect("at least one layer").h;
        let h = sess.dropout(h, cfg.dropout)?;
        let z = self.loc_hidden.forward(sess, h)?;
        let z = sess.dropout(z, cfg.dropout)?;
        let head = self.loc_head.forward(sess, z)?;
        Ok((state, h, head))
    }

    fn stroke_step(
        &self,
        cfg: &ModelConfig,
        sess: &mut Session,
        prev: Var,
        y: Var,
        h: Var,
        state: LstmState,
    ) -> Result<(LstmState, Var)> {
        let input = sess.graph.concat(&[prev, y, h])?;
        let state = self.stroke.step(sess, input, state)?;
        let out = sess.dropout(state.h, cfg.dropout)?;
        let head = self.stroke_head.forward(sess, out)?;
        Ok((state, head))
    }

    pub(crate) fn log_terms(&self, cfg: &ModelConfig, sess: &mut Session, strokes: &[SplineStroke]) -> Result<Vec<LogTerm>> {
        let k = cfg.components;
        let n = strokes.len();
        let mut terms = Vec::new();
        let mut state = self.character.zero_state(sess, 1);
        let y0 = sess.param(self.start_location);
        let e0 = sess.param(self.start_encoding);
        let mut input = sess.graph.concat(&[y0, e0])?;
        for t in 0..=n {
            let (next, h, head) = self.char_step(cfg, sess, input, &state)?;
            state = next;
            if t >= 1 {
                let stop = sess.graph.slice_cols(head, 6 * k, 1)?;
                let lp = bernoulli_log_prob_op(&mut sess.graph, stop, t == n);
                terms.push(LogTerm {
                    stroke: t - 1,
                    kind: TermKind::Termination,
                    var: lp,
                });
            }
            if t == n {
                break;
            }
            let stroke = &strokes[t];
            let y_norm = normalise(stroke.start);
            let gmm = sess.graph.slice_cols(head, 0, 6 * k)?;
            let lp = gmm_log_prob_op(&mut sess.graph, gmm, y_norm)?;
            terms.push(LogTerm {
                stroke: t,
                kind: TermKind::Location,
                var: lp,
            });

            let y = row(sess, &y_norm);
            let mut s_state = self.stroke.zero_state(sess, 1);
            let mut prev = sess.param(self.stroke_start);
            let offsets: Vec<Point> = stroke.offsets.iter().map(|d| normalise(*d)).collect();
            for (j, d) in offsets.iter().enumerate() {
                let (next, head) = self.stroke_step(cfg, sess, prev, y, h, s_state)?;
                s_state = next;
                let gmm = sess.graph.slice_cols(head, 0, 6 * k)?;
                let end = sess.graph.slice_cols(head, 6 * k, 1)?;
                let lp = gmm_log_prob_op(&mut sess.graph, gmm, *d)?;
                terms.push(LogTerm {
                    stroke: t,
                    kind: TermKind::Offset,
                    var: lp,
                });
                let lp = bernoulli_log_prob_op(&mut sess.graph, end, j + 1 == offsets.len());
                terms.push(LogTerm {
                    stroke: t,
                    kind: TermKind::StrokeEnd,
                    var: lp,
                });
                prev = row(sess, d);
            }
            let enc = self.encode(sess, &offsets)?;
            input = sess.graph.concat(&[y, enc])?;
        }
        Ok(terms)
    }

    pub(crate) fn generate<R: Rng + ?Sized>(
        &self,
        cfg: &ModelConfig,
        store: &ParamStore,
        rng: &mut R,
        temperature: f64,
    ) -> Result<(Vec<SplineStroke>, bool)> {
        let k = cfg.components;
        let mut sess = Session::new(store, Mode::Eval, 0);
        let mut strokes = Vec::new();
        let mut capped = false;
        let mut state = self.character.zero_state(&mut sess, 1);
        let y0 = sess.param(self.start_location);
        let e0 = sess.param(self.start_encoding);
        let mut input = sess.graph.concat(&[y0, e0])?;
        loop {
            let (next, h, head) = self.char_step(cfg, &mut sess, input, &state)?;
            state = next;
            let raw = sess.graph.value(head).to_vec();
            if !strokes.is_empty() {
                if sample_bernoulli(raw[6 * k], temperature, rng)? {
                    return Ok((strokes, capped));
                }
                if strokes.len() >= cfg.max_strokes {
                    return Ok((strokes, true));
                }
            }
            let y_norm = GmmParams::from_raw(&raw[..6 * k])?.sample(temperature, rng)?;
            let y = row(&mut sess, &y_norm);
            let mut s_state = self.stroke.zero_state(&mut sess, 1);
            let mut prev = sess.param(self.stroke_start);
            let mut offsets = Vec::new();
            loop {
                let (next, head) = self.stroke_step(cfg, &mut sess, prev, y, h, s_state)?;
                s_state = next;
                let raw = sess.graph.value(head);
                let d = GmmParams::from_raw(&raw[..6 * k])?.sample(temperature, rng)?;
                let end = sample_bernoulli(raw[6 * k], temperature, rng)?;
                offsets.push(d);
                if end {
                    break;
                }
                if offsets.len() >= cfg.max_offsets {
                    capped = true;
                    break;
                }
                prev = row(&mut sess, &d);
            }
            let enc = self.encode(&mut sess, &offsets)?;
            input = sess.graph.concat(&[y, enc])?;
            strokes.push(SplineStroke {
                start: denormalise(y_norm),
                offsets: offsets.into_iter().map(denormalise).collect(),
            });
        }
    }
}
