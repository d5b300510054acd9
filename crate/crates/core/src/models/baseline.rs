//! Flat sequence LSTM over pen actions.

use rand::Rng;

use super::{denormalise, normalise, row, LogTerm, ModelConfig, TermKind};
use crate::error::Result;
use crate::mdn::{categorical_log_prob_op, gmm_log_prob_op, sample_categorical, GmmParams, PenState};
use crate::splines::{Point, SplineStroke};
use crate::tensor::{Activation, Dense, Lstm, Mode, ParamId, ParamStore, Session, Tensor};

/// One pen action: a normalised move and the pen state after it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceElement {
    pub delta: Point,
    pub pen: PenState,
    pub stroke: usize,
    /// True for the move that reaches a stroke's first control point.
    pub stroke_start: bool,
}

/// Flattens a drawing into one action sequence. The first move of each
/// stroke goes from the previous stroke's last control point (the origin for
/// the first stroke) to the stroke's start; the last action of a stroke ends
/// it and the last action of the drawing ends the drawing.
pub fn flatten_drawing(strokes: &[SplineStroke]) -> Vec<SequenceElement> {
    let mut out = Vec::new();
    let mut pos = [0.0, 0.0];
    for (s, stroke) in strokes.iter().enumerate() {
        let cps = stroke.control_points();
        for (j, cp) in cps.iter().enumerate() {
            let delta = normalise([cp[0] - pos[0], cp[1] - pos[1]]);
            pos = *cp;
            let pen = if j + 1 < cps.len() {
                PenState::Continue
            } else if s + 1 < strokes.len() {
                PenState::EndStroke
            } else {
                PenState::EndDrawing
            };
            out.push(SequenceElement {
                delta,
                pen,
                stroke: s,
                stroke_start: j == 0,
            });
        }
    }
    out
}

/// Inverse of `flatten_drawing` on normalised moves; pen states close strokes.
pub fn unflatten_sequence(moves: &[(Point, PenState)]) -> Vec<SplineStroke> {
    let mut strokes = Vec::new();
    let mut pos = [0.0, 0.0];
    let mut current: Option<SplineStroke> = None;
    for (d, pen) in moves {
        let d = denormalise(*d);
        pos = [pos[0] + d[0], pos[1] + d[1]];
        match current.as_mut() {
            None => {
                current = Some(SplineStroke {
                    start: pos,
                    offsets: Vec::new(),
                })
            }
            Some(s) => s.offsets.push(d),
        }
        if *pen != PenState::Continue {
            strokes.extend(current.take());
        }
        if *pen == PenState::EndDrawing {
            break;
        }
    }
    strokes.extend(current);
    strokes
}

#[derive(Clone, Debug)]
pub struct Baseline {
    lstm: Lstm,
    start: ParamId,
    head: Dense,
}

impl Baseline {
    pub(crate) fn new<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let k = cfg.components;
        Baseline {
            lstm: Lstm::new(store, "baseline.lstm", 5, cfg.lstm_units, cfg.lstm_layers, cfg.dropout, rng),
            start: store.add("baseline.start", Tensor::zeros(&[1, 5]), true),
            head: Dense::new(store, "baseline.head", cfg.lstm_units, 3 + 6 * k, Activation::None, rng),
        }
    }

    fn input_row(sess: &mut Session, delta: Point, pen: PenState) -> crate::tensor::Var {
        let oh = pen.one_hot();
        row(sess, &[delta[0], delta[1], oh[0], oh[1], oh[2]])
    }

    pub(crate) fn log_terms(&self, cfg: &ModelConfig, sess: &mut Session, strokes: &[SplineStroke]) -> Result<Vec<LogTerm>> {
        let k = cfg.components;
        let seq = flatten_drawing(strokes);
        let mut terms = Vec::with_capacity(2 * seq.len());
        let mut state = self.lstm.zero_state(sess, 1);
        let mut input = sess.param(self.start);
        for el in &seq {
            state = self.lstm.step(sess, input, &state)?;
            let h = state.last().expect("at least one layer").h;
            let h = sess.dropout(h, cfg.dropout)?;
            let head = self.head.forward(sess, h)?;
            let pen = sess.graph.slice_cols(head, 0, 3)?;
            let gmm = sess.graph.slice_cols(head, 3, 6 * k)?;
            let lp = categorical_log_prob_op(&mut sess.graph, pen, el.pen.index());
            terms.push(LogTerm {
                stroke: el.stroke,
                kind: TermKind::PenState,
                var: lp,
            });
            let lp = gmm_log_prob_op(&mut sess.graph, gmm, el.delta)?;
            terms.push(LogTerm {
                stroke: el.stroke,
                kind: if el.stroke_start { TermKind::Location } else { TermKind::Offset },
                var: lp,
            });
            input = Self::input_row(sess, el.delta, el.pen);
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
        let mut state = self.lstm.zero_state(&mut sess, 1);
        let mut input = sess.param(self.start);
        let mut moves = Vec::new();
        let mut strokes_done = 0;
        let mut offsets_in_stroke = 0;
        let mut first_of_stroke = true;
        let mut capped = false;
        loop {
            state = self.lstm.step(&mut sess, input, &state)?;
            let h = state.last().expect("at least one layer").h;
            let head = self.head.forward(&mut sess, h)?;
            let raw = sess.graph.value(head);
            let mut pen = PenState::from_index(sample_categorical(&raw[..3], temperature, rng)?)?;
            let delta = GmmParams::from_raw(&raw[3..3 + 6 * k])?.sample(temperature, rng)?;
            if first_of_stroke {
                first_of_stroke = false;
            } else {
                offsets_in_stroke += 1;
            }
            if pen == PenState::Continue && offsets_in_stroke >= cfg.max_offsets {
                pen = PenState::EndStroke;
                capped = true;
            }
            if pen == PenState::EndStroke && strokes_done + 1 >= cfg.max_strokes {
                pen = PenState::EndDrawing;
                capped = true;
            }
            moves.push((delta, pen));
            match pen {
                PenState::Continue => {}
                PenState::EndStroke => {
                    strokes_done += 1;
                    offsets_in_stroke = 0;
                    first_of_stroke = true;
                }
                PenState::EndDrawing => break,
            }
            input = Self::input_row(&mut sess, delta, pen);
        }
        Ok((unflatten_sequence(&moves), capped))
    }
}
