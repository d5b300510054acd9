#![allow(dead_code)]

pub mod oracles;

use glyphgen::models::Model;
use glyphgen::splines::SplineStroke;
use glyphgen::tensor::{Graph, Mode, ParamId, Session, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative error, so entries that are zero up to
/// round-off are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Max relative error between the tape gradient of `f` and central
/// differences, over every entry of every input.
pub fn check_graph_fn<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.wrt(*v).map_or(vec![0.0; t.numel()], |g| g.to_vec()))
        .collect();

    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

/// Weighted sum `sum(w * x)` with fixed pseudo-random weights, so every
/// output element contributes with a distinct sensitivity.
pub fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    let shape = g.shape(x).to_vec();
    let w = random_tensor(&shape, &mut rng(seed));
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

pub struct ModelCheck {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Compares tape gradients of the minibatch NLL against central
/// differences for up to `per_tensor` entries of every trainable tensor.
pub fn check_model_gradients(model: &mut Model, drawings: &[Vec<SplineStroke>], mode: Mode, per_tensor: usize) -> ModelCheck {
    let refs: Vec<&[SplineStroke]> = drawings.iter().map(|d| d.as_slice()).collect();
    let loss = |m: &Model| {
        let mut sess = Session::new(m.store(), mode, 7);
        let l = m.batch_nll(&mut sess, &refs).unwrap();
        sess.graph.scalar(l)
    };
    let grads = {
        let mut sess = Session::new(model.store(), mode, 7);
        let l = model.batch_nll(&mut sess, &refs).unwrap();
        let (graph, _) = sess.finish();
        graph.backward(l)
    };
    let targets: Vec<(ParamId, String, usize)> = model
        .store()
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.name.clone(), p.tensor.numel()))
        .collect();
    let mut pick = rng(99);
    let mut out = ModelCheck {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (id, name, numel) in targets {
        let analytic = grads.param(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; numel]);
        let entries: Vec<usize> = if numel <= per_tensor {
            (0..numel).collect()
        } else {
            (0..per_tensor).map(|_| pick.random_range(0..numel)).collect()
        };
        for j in entries {
            let orig = model.store().get(id).tensor.data[j];
            model.store_mut().get_mut(id).tensor.data[j] = orig + FD_STEP;
            let up = loss(model);
            model.store_mut().get_mut(id).tensor.data[j] = orig - FD_STEP;
            let down = loss(model);
            model.store_mut().get_mut(id).tensor.data[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(analytic[j], numeric);
            out.checked += 1;
            if e > out.max_rel {
                out.max_rel = e;
                out.worst = format!("{name}[{j}]: analytic {} numeric {numeric}", analytic[j]);
            }
        }
    }
    out
}

/// Perturbs all parameters so gradient checks do not sit at the
/// symmetric initial point (zero biases, zero start embeddings).
pub fn jitter_params(model: &mut Model, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for p in model.store_mut().iter_mut() {
        if p.trainable {
            p.tensor.data.iter_mut().for_each(|v| *v += r.random_range(-scale..scale));
        }
    }
}

pub fn stroke(cps: &[[f64; 2]]) -> SplineStroke {
    SplineStroke::from_control_points(cps)
}

/// Two small fixed drawings in source-frame coordinates.
pub fn fixture_drawings() -> Vec<Vec<SplineStroke>> {
    vec![
        vec![
            stroke(&[[20.0, 30.0], [35.0, 40.0], [50.0, 38.0], [70.0, 60.0]]),
            stroke(&[[60.0, 20.0], [62.0, 50.0], [58.0, 85.0]]),
        ],
        vec![stroke(&[[30.0, 70.0], [50.0, 72.0], [75.0, 69.0], [80.0, 40.0], [60.0, 25.0]])],
    ]
}

/// Gradient check for a forward pass over a parameter store: compares the
/// tape against central differences on every input entry and every
/// trainable parameter entry.
pub fn check_session_fn<F>(store: &mut glyphgen::tensor::ParamStore, inputs: &[Tensor], mode: Mode, f: F) -> f64
where
    F: Fn(&mut Session, &[Var]) -> Var,
{
    fn run<'s, F: Fn(&mut Session, &[Var]) -> Var>(
        store: &'s glyphgen::tensor::ParamStore,
        ts: &[Tensor],
        track: bool,
        mode: Mode,
        f: &F,
    ) -> (Session<'s>, Vec<Var>, Var) {
        let mut sess = Session::new(store, mode, 3);
        let vars: Vec<Var> = ts
            .iter()
            .map(|t| if track { sess.graph.variable(t.clone()) } else { sess.graph.constant(t.clone()) })
            .collect();
        let out = f(&mut sess, &vars);
        (sess, vars, out)
    }
    let (sess, vars, out) = run(store, inputs, true, mode, &f);
    let (graph, _) = sess.finish();
    let grads = graph.backward(out);
    let input_grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.wrt(*v).map_or(vec![0.0; t.numel()], |g| g.to_vec()))
        .collect();
    let param_grads: Vec<(ParamId, Vec<f64>)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, grads.param(id).map_or(vec![0.0; p.tensor.numel()], |g| g.to_vec())))
        .collect();
    let value = |store: &glyphgen::tensor::ParamStore, ts: &[Tensor]| {
        let (sess, _, out) = run(store, ts, false, mode, &f);
        sess.graph.scalar(out)
    };
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= FD_STEP;
            let numeric = (value(store, &plus) - value(store, &minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(input_grads[i][j], numeric));
        }
    }
    for (id, g) in param_grads {
        for (j, a) in g.iter().enumerate() {
            let orig = store.get(id).tensor.data[j];
            store.get_mut(id).tensor.data[j] = orig + FD_STEP;
            let up = value(store, inputs);
            store.get_mut(id).tensor.data[j] = orig - FD_STEP;
            let down = value(store, inputs);
            store.get_mut(id).tensor.data[j] = orig;
            worst = worst.max(rel_err(*a, (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Max relative gradient error of every differentiable tape operation and
/// layer on small random shapes.
pub fn layer_gradient_suite() -> Vec<(&'static str, f64)> {
    use glyphgen::mdn::{bernoulli_log_prob_op, categorical_log_prob_op, gmm_log_prob_op};
    use glyphgen::tensor::{Activation, BatchNorm, ConvBlock, Dense, Lstm, LstmCell, ParamStore};

    let mut r = rng(2024);
    let mut out = Vec::new();
    let a34 = random_tensor(&[3, 4], &mut r);
    let b42 = random_tensor(&[4, 2], &mut r);
    out.push((
        "matmul",
        check_graph_fn(&[a34.clone(), b42.clone()], |g, v| {
            let m = g.matmul(v[0], v[1]).unwrap();
            g.sum(m)
        }),
    ));
    let c34 = random_tensor(&[3, 4], &mut r);
    out.push((
        "add/sub/mul/scale",
        check_graph_fn(&[a34.clone(), c34.clone()], |g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            let d = g.sub(v[0], v[1]).unwrap();
            let p = g.mul(s, d).unwrap();
            let p = g.scale(p, 1.7);
            weighted_sum(g, p, 1)
        }),
    ));
    out.push((
        "add_row/add_n",
        check_graph_fn(&[a34.clone(), random_tensor(&[4], &mut r)], |g, v| {
            let x = g.add_row(v[0], v[1]).unwrap();
            let y = g.add_n(&[x, v[0], x]).unwrap();
            weighted_sum(g, y, 2)
        }),
    ));
    for (name, act) in [("tanh", 0), ("sigmoid", 1), ("exp", 2), ("elu", 3), ("relu", 4)] {
        out.push((
            name,
            check_graph_fn(&[a34.clone()], move |g, v| {
                let y = match act {
                    0 => g.tanh(v[0]),
                    1 => g.sigmoid(v[0]),
                    2 => g.exp(v[0]),
                    3 => g.elu(v[0]),
                    _ => g.relu(v[0]),
                };
                weighted_sum(g, y, 3)
            }),
        ));
    }
    let pos = Tensor::new(vec![2, 3], vec![0.5, 1.2, 2.0, 0.3, 0.9, 3.1]).unwrap();
    out.push((
        "ln",
        check_graph_fn(&[pos], |g, v| {
            let y = g.ln(v[0]);
            weighted_sum(g, y, 4)
        }),
    ));
    out.push((
        "concat/slice/transpose/reshape",
        check_graph_fn(&[a34.clone(), c34.clone()], |g, v| {
            let c = g.concat(&[v[0], v[1]]).unwrap();
            let s = g.slice_cols(c, 2, 4).unwrap();
            let t = g.transpose(s).unwrap();
            let rr = g.slice_rows(t, 1, 2).unwrap();
            let rr = g.reshape(rr, &[1, 6]).unwrap();
            weighted_sum(g, rr, 5)
        }),
    ));
    out.push((
        "softmax_rows",
        check_graph_fn(&[a34.clone()], |g, v| {
            let s = g.softmax_rows(v[0]).unwrap();
            weighted_sum(g, s, 6)
        }),
    ));
    out.push((
        "conv2d_3x3",
        check_graph_fn(
            &[
                random_tensor(&[1, 2, 5, 5], &mut r),
                random_tensor(&[3, 2, 3, 3], &mut r),
                random_tensor(&[3], &mut r),
            ],
            |g, v| {
                let y = g.conv2d_3x3(v[0], v[1], v[2]).unwrap();
                weighted_sum(g, y, 7)
            },
        ),
    ));
    // distinct values keep central differences away from ties
    let mut pool_in = random_tensor(&[2, 2, 5, 5], &mut r);
    for (i, v) in pool_in.data.iter_mut().enumerate() {
        *v += i as f64 * 1e-2;
    }
    out.push((
        "maxpool_2x2",
        check_graph_fn(&[pool_in], |g, v| {
            let y = g.maxpool_2x2(v[0]).unwrap();
            weighted_sum(g, y, 8)
        }),
    ));

    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", 3);
    for p in store.iter_mut() {
        if p.trainable {
            p.tensor.data.iter_mut().for_each(|v| *v += r.random_range(-0.3..0.3));
        }
    }
    let x = random_tensor(&[4, 3, 2, 2], &mut r);
    out.push((
        "batchnorm (train)",
        check_session_fn(&mut store, &[x.clone()], Mode::Train, |s, v| {
            let y = bn.forward(s, v[0]).unwrap();
            weighted_sum(&mut s.graph, y, 9)
        }),
    ));
    out.push((
        "batchnorm (eval)",
        check_session_fn(&mut store, &[x], Mode::Eval, |s, v| {
            let y = bn.forward(s, v[0]).unwrap();
            weighted_sum(&mut s.graph, y, 10)
        }),
    ));

    let mut store = ParamStore::new();
    let dense = Dense::new(&mut store, "dense", 4, 3, Activation::Tanh, &mut r);
    out.push((
        "dense",
        check_session_fn(&mut store, &[a34.clone()], Mode::Eval, |s, v| {
            let y = dense.forward(s, v[0]).unwrap();
            weighted_sum(&mut s.graph, y, 11)
        }),
    ));

    let mut store = ParamStore::new();
    let block = ConvBlock::new(&mut store, "block", 1, 2, Activation::Tanh, true, 0.3, &mut r);
    let img = random_tensor(&[3, 1, 6, 6], &mut r);
    out.push((
        "conv block + dropout (train)",
        check_session_fn(&mut store, &[img], Mode::Train, |s, v| {
            let y = block.forward(s, v[0]).unwrap();
            weighted_sum(&mut s.graph, y, 12)
        }),
    ));

    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "cell", 3, 8, &mut r);
    let xs: Vec<Tensor> = (0..5).map(|_| random_tensor(&[1, 3], &mut r)).collect();
    out.push((
        "lstm cell x5 steps",
        check_session_fn(&mut store, &xs, Mode::Eval, |s, v| {
            let mut st = cell.zero_state(s, 1);
            for x in v {
                st = cell.step(s, *x, st).unwrap();
            }
            let hc = s.graph.concat(&[st.h, st.c]).unwrap();
            weighted_sum(&mut s.graph, hc, 13)
        }),
    ));

    let mut store = ParamStore::new();
    let lstm = Lstm::new(&mut store, "stack", 2, 4, 2, 0.25, &mut r);
    let xs: Vec<Tensor> = (0..3).map(|_| random_tensor(&[2, 2], &mut r)).collect();
    out.push((
        "stacked lstm + dropout (train)",
        check_session_fn(&mut store, &xs, Mode::Train, |s, v| {
            let mut st = lstm.zero_state(s, 2);
            for x in v {
                st = lstm.step(s, *x, &st).unwrap();
            }
            let h = st.last().unwrap().h;
            weighted_sum(&mut s.graph, h, 14)
        }),
    ));

    let raw = random_tensor(&[1, 18], &mut r);
    out.push((
        "gmm log-prob",
        check_graph_fn(&[raw], |g, v| gmm_log_prob_op(g, v[0], [0.3, -0.2]).unwrap()),
    ));
    out.push((
        "bernoulli log-prob",
        check_graph_fn(&[Tensor::new(vec![1, 1], vec![0.4]).unwrap()], |g, v| {
            let a = bernoulli_log_prob_op(g, v[0], true);
            let b = bernoulli_log_prob_op(g, v[0], false);
            let b = g.scale(b, 0.5);
            g.add(a, b).unwrap()
        }),
    ));
    out.push((
        "categorical log-prob",
        check_graph_fn(&[random_tensor(&[1, 3], &mut r)], |g, v| categorical_log_prob_op(g, v[0], 2)),
    ));
    out
}

/// `n` preprocessed drawings from the default synthetic corpus.
pub fn synthetic_drawings(n: usize, seed: u64) -> Vec<Vec<SplineStroke>> {
    use glyphgen::data::{preprocess_corpus, synthetic_corpus, PreprocessConfig, SynthConfig};
    let raw = synthetic_corpus(&SynthConfig {
        seed,
        ..Default::default()
    });
    let (processed, _) = preprocess_corpus(&raw, &PreprocessConfig::default()).unwrap();
    processed.into_iter().take(n).map(|r| r.strokes).collect()
}

/// Overfits `data` with full-batch training; returns (initial, final)
/// mean eval-mode NLL.
pub fn overfit(kind: glyphgen::models::ModelKind, data: &[Vec<SplineStroke>], steps: usize) -> (f64, f64) {
    use glyphgen::models::ModelConfig;
    use glyphgen::training::{mean_nll, train, TrainConfig};
    let mut m = Model::new(ModelConfig::tiny(kind), 1).unwrap();
    let before = mean_nll(&m, data).unwrap();
    let cfg = TrainConfig {
        batch_size: data.len(),
        learning_rate: 1e-2,
        max_steps: steps,
        eval_every: 0,
        seed: 2,
        ..Default::default()
    };
    train(&mut m, data, &cfg, |_| Ok(())).unwrap();
    (before, mean_nll(&m, data).unwrap())
}
