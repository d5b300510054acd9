mod common;

use common::*;
use glyphgen::mdn::GmmParams;
use glyphgen::models::{flatten_drawing, unflatten_sequence, Model, ModelConfig, ModelKind, TermKind};
use glyphgen::render::{render_drawing, render_prefixes, Canvas};
use glyphgen::splines::SplineStroke;
use glyphgen::tensor::Mode;
use std::f64::consts::PI;

fn tiny(kind: ModelKind, seed: u64) -> Model {
    Model::new(ModelConfig::tiny(kind), seed).unwrap()
}

/// Zeroes every output head so all raw mixture values are 0.
fn pin_heads(model: &mut Model) {
    for p in model.store_mut().iter_mut() {
        if p.name.contains(".head.") {
            p.tensor.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// log-density of a mixture of identical standard normals.
fn std_normal_lp(x: [f64; 2]) -> f64 {
    -(2.0 * PI).ln() - 0.5 * (x[0] * x[0] + x[1] * x[1])
}

fn n(p: [f64; 2]) -> [f64; 2] {
    [p[0] / 105.0, p[1] / 105.0]
}

#[test]
fn pinned_heads_match_closed_form_for_every_kind() {
    let drawing = vec![stroke(&[[21.0, 42.0], [31.5, 52.5]])];
    let y = n([21.0, 42.0]);
    let d = n([10.5, 10.5]);
    let half = 0.5f64.ln();
    let third = (1.0f64 / 3.0).ln();
    let expected = [
        // location, offset, end bit, termination
        (ModelKind::FullNs, -(std_normal_lp(y) + std_normal_lp(d) + 2.0 * half)),
        // location, offset, end bit, stop logit
        (ModelKind::Hlstm, -(std_normal_lp(y) + std_normal_lp(d) + 2.0 * half)),
        // two actions, each a pen state and a move
        (ModelKind::Baseline, -(std_normal_lp(y) + std_normal_lp(d) + 2.0 * third)),
    ];
    for (kind, want) in expected {
        let mut m = tiny(kind, 3);
        pin_heads(&mut m);
        let got = m.score_drawing(&drawing).unwrap();
        assert!((got - want).abs() < 1e-10, "{kind}: {got} vs {want}");
    }
}

#[test]
fn nll_is_sum_of_terms_and_deterministic() {
    for kind in ModelKind::ALL {
        let m = tiny(kind, 5);
        for d in fixture_drawings() {
            let nll = m.score_drawing(&d).unwrap();
            let terms = m.score_breakdown(&d).unwrap();
            let sum: f64 = terms.iter().map(|t| t.log_prob).sum();
            assert!((nll + sum).abs() < 1e-9 * nll.abs().max(1.0), "{kind}");
            assert_eq!(nll, m.score_drawing(&d.clone()).unwrap());
            let per_stroke: f64 = (0..d.len())
                .map(|s| terms.iter().filter(|t| t.stroke == s).map(|t| t.log_prob).sum::<f64>())
                .sum();
            assert!((per_stroke - sum).abs() < 1e-9);
        }
    }
}

#[test]
fn term_counts_follow_the_factorisation() {
    let d = &fixture_drawings()[0];
    let offsets: usize = d.iter().map(|s| s.offsets.len()).sum();
    let count = |m: &Model, k: TermKind| m.score_breakdown(d).unwrap().iter().filter(|t| t.kind == k).count();
    for kind in [ModelKind::FullNs, ModelKind::Hlstm] {
        let m = tiny(kind, 1);
        assert_eq!(count(&m, TermKind::Location), d.len());
        assert_eq!(count(&m, TermKind::Offset), offsets);
        assert_eq!(count(&m, TermKind::StrokeEnd), offsets);
        assert_eq!(count(&m, TermKind::Termination), d.len());
    }
    let m = tiny(ModelKind::Baseline, 1);
    assert_eq!(count(&m, TermKind::PenState), offsets + d.len());
    assert_eq!(count(&m, TermKind::Location), d.len());
}

#[test]
fn full_ns_heads_are_valid_distributions() {
    let m = tiny(ModelKind::FullNs, 2);
    let net = m.as_full_ns().unwrap();
    let blank = Canvas::new();
    let inked = render_drawing(&fixture_drawings()[0]);
    for c in [&blank, &inked] {
        let g: GmmParams = net.location_distribution(m.store(), c).unwrap();
        g.validate().unwrap();
        assert!((g.pi.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let p = net.termination_probability(m.store(), c).unwrap();
        assert!(p > 0.0 && p < 1.0);
    }
}

#[test]
fn zero_termination_head_gives_half() {
    let mut m = tiny(ModelKind::FullNs, 2);
    for p in m.store_mut().iter_mut() {
        if p.name.starts_with("fullns.termination.head") {
            p.tensor.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let net = m.as_full_ns().unwrap();
    let c = render_drawing(&fixture_drawings()[1]);
    assert_eq!(net.termination_probability(m.store(), &c).unwrap(), 0.5);
}

#[test]
fn attention_is_a_convex_combination() {
    let m = tiny(ModelKind::FullNs, 4);
    let net = m.as_full_ns().unwrap();
    let d = &fixture_drawings()[0];
    let canvas = render_prefixes(d)[1].clone();
    for step in net.attention(m.config(), m.store(), &canvas, &d[1]).unwrap() {
        assert_eq!(step.weights.len(), 196);
        assert!((step.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(step.weights.iter().all(|w| *w >= 0.0));
    }
}

#[test]
fn uniform_feature_map_gives_mean_context() {
    let m = tiny(ModelKind::FullNs, 4);
    let net = m.as_full_ns().unwrap();
    // a blank canvas gives the same feature vector at every location
    let blank = Canvas::new();
    let f = net.feature_map(m.store(), &blank).unwrap();
    let s = f.shape[1];
    let mean: Vec<f64> = (0..s).map(|c| (0..196).map(|l| f.data[l * s + c]).sum::<f64>() / 196.0).collect();
    for l in 0..196 {
        for c in 0..s {
            assert!((f.data[l * s + c] - mean[c]).abs() < 1e-12);
        }
    }
    let d = &fixture_drawings()[1];
    for step in net.attention(m.config(), m.store(), &blank, &d[0]).unwrap() {
        for (a, b) in step.context.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn hlstm_start_embeddings_drive_first_step() {
    let d = &fixture_drawings()[0];
    let mut m = tiny(ModelKind::Hlstm, 8);
    let before = m.score_breakdown(d).unwrap()[0];
    assert_eq!(before.kind, TermKind::Location);
    let id = m.store().id("hlstm.start.location").unwrap();
    m.store_mut().get_mut(id).tensor.data = vec![0.7, -0.4];
    let after = m.score_breakdown(d).unwrap()[0];
    assert_ne!(before.log_prob, after.log_prob);
}

#[test]
fn tied_encoder_is_symmetric_on_palindromes() {
    let mut m = tiny(ModelKind::Hlstm, 8);
    for part in ["wx", "wh", "bias"] {
        let src = m.store().by_name(&format!("hlstm.encoder.forward.{part}")).unwrap().tensor.clone();
        let dst = m.store().id(&format!("hlstm.encoder.backward.{part}")).unwrap();
        m.store_mut().get_mut(dst).tensor = src;
    }
    let net = m.as_hlstm().unwrap();
    let offsets = [[3.0, -2.0], [1.5, 4.0], [-6.0, 0.5], [1.5, 4.0], [3.0, -2.0]];
    let enc = net.encode_stroke(m.store(), &offsets).unwrap();
    let e = enc.len() / 2;
    assert_eq!(&enc[..e], &enc[e..]);
}

#[test]
fn baseline_initial_state_is_zero() {
    // with h0 = 0 the recurrent weights cannot influence the first step
    let d = &fixture_drawings()[0];
    let mut m = tiny(ModelKind::Baseline, 9);
    let first = m.score_breakdown(d).unwrap()[..2].to_vec();
    let id = m.store().id("baseline.lstm.l0.wh").unwrap();
    m.store_mut().get_mut(id).tensor.data.iter_mut().for_each(|v| *v = 3.0);
    let again = m.score_breakdown(d).unwrap()[..2].to_vec();
    assert_eq!(first, again);
    // and the rest of the sequence does depend on them
    assert_ne!(m.score_drawing(d).unwrap(), tiny(ModelKind::Baseline, 9).score_drawing(d).unwrap());
}

#[test]
fn baseline_sequence_round_trips() {
    let d = &fixture_drawings()[0];
    let seq = flatten_drawing(d);
    assert_eq!(seq.len(), d.iter().map(|s| s.num_control_points()).sum::<usize>());
    let moves: Vec<_> = seq.iter().map(|e| (e.delta, e.pen)).collect();
    let back = unflatten_sequence(&moves);
    assert_eq!(back.len(), d.len());
    for (a, b) in back.iter().zip(d) {
        for (p, q) in a.control_points().iter().zip(b.control_points()) {
            assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
        }
    }
}

#[test]
fn whole_model_gradients_match_finite_differences() {
    for kind in ModelKind::ALL {
        let mut m = tiny(kind, 11);
        jitter_params(&mut m, 12, 0.1);
        for mode in [Mode::Train, Mode::Eval] {
            let r = check_model_gradients(&mut m, &fixture_drawings(), mode, 6);
            assert!(r.max_rel < 1e-4, "{kind} {mode:?}: {} ({})", r.max_rel, r.worst);
        }
    }
}

#[test]
fn scoring_rejects_empty_input() {
    let m = tiny(ModelKind::Baseline, 1);
    assert!(m.score_drawing(&[]).is_err());
    assert!(m.score_drawing(&[SplineStroke::default()]).is_err());
}

#[test]
fn samples_respect_caps_and_reproduce() {
    for kind in ModelKind::ALL {
        let mut cfg = ModelConfig::tiny(kind);
        cfg.max_strokes = 3;
        cfg.max_offsets = 4;
        let m = Model::new(cfg, 21).unwrap();
        for seed in 0..30 {
            let a = m.generate_character(&mut rng(seed), 1.0).unwrap();
            let b = m.generate_character(&mut rng(seed), 1.0).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.canvas, b.canvas);
            assert!(!a.strokes.is_empty() && a.strokes.len() <= 3, "{kind}");
            assert!(a.strokes.iter().all(|s| s.offsets.len() <= 4), "{kind}");
            assert_eq!(a.canvas, render_drawing(&a.strokes));
        }
        assert!(m.generate_character(&mut rng(0), 0.0).is_err());
    }
}
