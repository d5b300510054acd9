//! Neural-network layers built on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Elu,
    Sigmoid,
    None,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Elu => g.elu(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::None => x,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "elu" => Ok(Activation::Elu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "none" => Ok(Activation::None),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

/// New running statistics for a batch-norm layer, applied after the step.
#[derive(Clone, Debug)]
pub struct RunningUpdate {
    pub param: ParamId,
    pub values: Vec<f64>,
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One forward pass over a parameter store: owns the tape, caches parameter
/// leaves and carries the train/eval mode and dropout stream.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    cache: Vec<Option<Var>>,
    mode: Mode,
    dropout_seed: u64,
    dropout_calls: u64,
    updates: Vec<RunningUpdate>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, dropout_seed: u64) -> Self {
        Session {
            graph: Graph::new(),
            store,
            cache: vec![None; store.len()],
            mode,
            dropout_seed,
            dropout_calls: 0,
            updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.cache[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.graph.param_leaf(id, &p.tensor, p.trainable);
        self.cache[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.graph.constant(Tensor::zeros(shape))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)`; identity in eval mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let call = self.dropout_calls;
        self.dropout_calls += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.dropout_seed ^ splitmix64(call)));
        let keep = 1.0 / (1.0 - p);
        let n = self.graph.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.graph.mask(x, mask)
    }

    pub(crate) fn record_update(&mut self, param: ParamId, values: Vec<f64>) {
        self.updates.push(RunningUpdate { param, values });
    }

    /// Ends the pass, returning the tape and any pending running-stat updates.
    pub fn finish(self) -> (Graph, Vec<RunningUpdate>) {
        (self.graph, self.updates)
    }
}

/// Affine layer `x W + b` followed by a pointwise activation.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub activation: Activation,
}

impl Dense {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            Tensor::glorot(&[inputs, outputs], inputs, outputs, rng),
            true,
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), true);
        Dense { w, b, activation }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let w = sess.param(self.w);
        let b = sess.param(self.b);
        let z = sess.graph.matmul(x, w)?;
        let z = sess.graph.add_row(z, b)?;
        Ok(self.activation.apply(&mut sess.graph, z))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[channels], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::filled(&[channels], 1.0),
                false,
            ),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Normalises axis 1 of `[N, C, ...]`. Train mode uses batch statistics
    /// and records momentum-updated running statistics on the session.
    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let gamma = sess.param(self.gamma);
        let beta = sess.param(self.beta);
        match sess.mode() {
            Mode::Train => {
                let shape = sess.graph.shape(x).to_vec();
                if shape.first().copied().unwrap_or(0) < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "batch norm in train mode needs N >= 2, got shape {shape:?}"
                    )));
                }
                let count = shape[0] * shape[2..].iter().product::<usize>();
                let (y, mean, var) = sess.graph.batchnorm(x, gamma, beta, None, self.eps)?;
                let unbias = count as f64 / (count as f64 - 1.0);
                let rm = &sess.store().get(self.running_mean).tensor.data;
                let rv = &sess.store().get(self.running_var).tensor.data;
                let m = self.momentum;
                let new_mean: Vec<f64> = rm.iter().zip(&mean).map(|(r, b)| (1.0 - m) * r + m * b).collect();
                let new_var: Vec<f64> = rv
                    .iter()
                    .zip(&var)
                    .map(|(r, b)| (1.0 - m) * r + m * b * unbias)
                    .collect();
                sess.record_update(self.running_mean, new_mean);
                sess.record_update(self.running_var, new_var);
                Ok(y)
            }
            Mode::Eval => {
                let rm = sess.store().get(self.running_mean).tensor.data.clone();
                let rv = sess.store().get(self.running_var).tensor.data.clone();
                let (y, _, _) = sess.graph.batchnorm(x, gamma, beta, Some((&rm, &rv)), self.eps)?;
                Ok(y)
            }
        }
    }
}

/// 3x3 convolution, batch norm, activation, optional 2x2 max-pool, dropout.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub bn: BatchNorm,
    pub activation: Activation,
    pub pool: bool,
    pub dropout: f64,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        activation: Activation,
        pool: bool,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * 9;
        let fan_out = out_channels * 9;
        ConvBlock {
            kernels: store.add(
                format!("{name}.kernels"),
                Tensor::glorot(&[out_channels, in_channels, 3, 3], fan_in, fan_out, rng),
                true,
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true),
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_channels),
            activation,
            pool,
            dropout,
        }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let k = sess.param(self.kernels);
        let b = sess.param(self.bias);
        let y = sess.graph.conv2d_3x3(x, k, b)?;
        let y = self.bn.forward(sess, y)?;
        let mut y = self.activation.apply(&mut sess.graph, y);
        if self.pool {
            y = sess.graph.maxpool_2x2(y)?;
        }
        sess.dropout(y, self.dropout)
    }
}

/// Hidden and cell state of one LSTM layer, each `[batch, units]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Standard LSTM cell with gate order (input, forget, candidate, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub units: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inputs: usize, units: usize, rng: &mut R) -> Self {
        let wx = store.add(
            format!("{name}.wx"),
            Tensor::glorot(&[inputs, 4 * units], inputs, units, rng),
            true,
        );
        let wh = store.add(
            format!("{name}.wh"),
            Tensor::glorot(&[units, 4 * units], units, units, rng),
            true,
        );
        let mut bias = Tensor::zeros(&[4 * units]);
        bias.data[units..2 * units].iter_mut().for_each(|v| *v = 1.0);
        let b = store.add(format!("{name}.bias"), bias, true);
        LstmCell { wx, wh, b, units }
    }

    pub fn zero_state(&self, sess: &mut Session, batch: usize) -> LstmState {
        LstmState {
            h: sess.zeros(&[batch, self.units]),
            c: sess.zeros(&[batch, self.units]),
        }
    }

    pub fn step(&self, sess: &mut Session, x: Var, prev: LstmState) -> Result<LstmState> {
        let u = self.units;
        let wx = sess.param(self.wx);
        let wh = sess.param(self.wh);
        let b = sess.param(self.b);
        let g = &mut sess.graph;
        let zx = g.matmul(x, wx)?;
        let zh = g.matmul(prev.h, wh)?;
        let z = g.add(zx, zh)?;
        let z = g.add_row(z, b)?;
        let i = g.slice_cols(z, 0, u)?;
        let f = g.slice_cols(z, u, u)?;
        let cand = g.slice_cols(z, 2 * u, u)?;
        let o = g.slice_cols(z, 3 * u, u)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, prev.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}

/// Stack of LSTM layers with dropout between layers (train mode only).
#[derive(Clone, Debug)]
pub struct Lstm {
    pub layers: Vec<LstmCell>,
    pub dropout: f64,
}

impl Lstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        units: usize,
        layers: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let fan = if l == 0 { inputs } else { units };
                LstmCell::new(store, &format!("{name}.l{l}"), fan, units, rng)
            })
            .collect();
        Lstm { layers, dropout }
    }

    pub fn units(&self) -> usize {
        self.layers.last().map_or(0, |l| l.units)
    }

    pub fn zero_state(&self, sess: &mut Session, batch: usize) -> Vec<LstmState> {
        self.layers.iter().map(|l| l.zero_state(sess, batch)).collect()
    }

    /// Advances every layer one step; the last state's `h` is the output.
    pub fn step(&self, sess: &mut Session, x: Var, prev: &[LstmState]) -> Result<Vec<LstmState>> {
        let mut input = x;
        let mut next = Vec::with_capacity(self.layers.len());
        for (l, (cell, state)) in self.layers.iter().zip(prev).enumerate() {
            if l > 0 {
                input = sess.dropout(input, self.dropout)?;
            }
            let s = cell.step(sess, input, *state)?;
            input = s.h;
            next.push(s);
        }
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dropout_identity_cases() {
        let store = ParamStore::new();
        for mode in [Mode::Train, Mode::Eval] {
            let mut sess = Session::new(&store, mode, 7);
            let x = sess.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
            let y = sess.dropout(x, 0.0).unwrap();
            assert_eq!(sess.graph.value(y), &[1.0, 2.0, 3.0, 4.0]);
        }
        let mut sess = Session::new(&store, Mode::Eval, 7);
        let x = sess.constant(Tensor::filled(&[1, 4], 3.0));
        let y = sess.dropout(x, 0.9).unwrap();
        assert_eq!(sess.graph.value(y), &[3.0; 4]);
    }

    #[test]
    fn dropout_rejects_p_one() {
        let store = ParamStore::new();
        let mut sess = Session::new(&store, Mode::Train, 0);
        let x = sess.constant(Tensor::zeros(&[1, 2]));
        assert!(sess.dropout(x, 1.0).is_err());
    }

    #[test]
    fn dropout_survivor_fraction_concentrates() {
        let store = ParamStore::new();
        let mut sess = Session::new(&store, Mode::Train, 1234);
        let n = 1_000_000;
        let x = sess.constant(Tensor::filled(&[1, n], 1.0));
        let y = sess.dropout(x, 0.5).unwrap();
        let survivors = sess.graph.value(y).iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / n as f64;
        // binomial sd = 0.0005; 0.002 is four sigma
        assert!((frac - 0.5).abs() < 0.002, "{frac}");
        assert!(sess.graph.value(y).iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dropout_is_deterministic_per_seed_and_call() {
        let store = ParamStore::new();
        let run = |seed| {
            let mut sess = Session::new(&store, Mode::Train, seed);
            let x = sess.constant(Tensor::filled(&[1, 64], 1.0));
            let a = sess.dropout(x, 0.3).unwrap();
            let b = sess.dropout(x, 0.3).unwrap();
            (sess.graph.value(a).to_vec(), sess.graph.value(b).to_vec())
        };
        let (a1, b1) = run(5);
        let (a2, b2) = run(5);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_ne!(a1, b1);
    }

    #[test]
    fn zero_lstm_gives_zero_hidden() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::new(&mut store, "cell", 3, 4, &mut rng);
        for p in store.iter_mut() {
            p.tensor.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut sess = Session::new(&store, Mode::Eval, 0);
        let x = sess.constant(Tensor::filled(&[1, 3], 0.8));
        let s0 = cell.zero_state(&mut sess, 1);
        let s1 = cell.step(&mut sess, x, s0).unwrap();
        assert!(sess.graph.value(s1.h).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = LstmCell::new(&mut store, "cell", 2, 3, &mut rng);
        store.get_mut(cell.b).tensor.data[3..6].iter_mut().for_each(|v| *v = 50.0);
        let mut sess = Session::new(&store, Mode::Eval, 0);
        let x = sess.constant(Tensor::new(vec![1, 2], vec![0.3, -0.2]).unwrap());
        let h0 = sess.constant(Tensor::filled(&[1, 3], 0.1));
        let c0 = sess.constant(Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap());
        let s = cell.step(&mut sess, x, LstmState { h: h0, c: c0 }).unwrap();
        // c = c_prev + sigma(i) * tanh(candidate) once the forget gate is saturated
        let z: Vec<f64> = {
            let wx = &store.get(cell.wx).tensor.data;
            let wh = &store.get(cell.wh).tensor.data;
            let b = &store.get(cell.b).tensor.data;
            (0..12)
                .map(|j| 0.3 * wx[j] - 0.2 * wx[12 + j] + (0..3).map(|k| 0.1 * wh[k * 12 + j]).sum::<f64>() + b[j])
                .collect()
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let c = sess.graph.value(s.c);
        for k in 0..3 {
            let expected = [0.5, -1.0, 2.0][k] + sig(z[k]) * z[6 + k].tanh();
            assert!((c[k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_train_standardises() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let mut sess = Session::new(&store, Mode::Train, 0);
        let data: Vec<f64> = (0..24).map(|v| ((v * 37) % 11) as f64 * 0.7 - 2.0).collect();
        let x = sess.constant(Tensor::new(vec![3, 2, 2, 2], data).unwrap());
        let y = bn.forward(&mut sess, x).unwrap();
        let out = sess.graph.value(y).to_vec();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| out[(n * 2 + ch) * 4..(n * 2 + ch + 1) * 4].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 12.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
        let (_, updates) = sess.finish();
        assert_eq!(updates.len(), 2);
    }

    #[test]
    fn batchnorm_eval_with_unit_stats_is_identity() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        let mut sess = Session::new(&store, Mode::Eval, 0);
        let x = sess.constant(Tensor::new(vec![1, 3], vec![0.5, -2.0, 4.0]).unwrap());
        let y = bn.forward(&mut sess, x).unwrap();
        for (a, b) in sess.graph.value(y).iter().zip([0.5, -2.0, 4.0]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_train_rejects_single_item() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let mut sess = Session::new(&store, Mode::Train, 0);
        let x = sess.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(bn.forward(&mut sess, x).is_err());
    }

    #[test]
    fn dense_identity_and_tanh_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Dense::new(&mut store, "d", 2, 2, Activation::None, &mut rng);
        store.get_mut(d.w).tensor.data = vec![1.0, 0.0, 0.0, 1.0];
        let t = Dense::new(&mut store, "t", 2, 2, Activation::Tanh, &mut rng);
        let mut sess = Session::new(&store, Mode::Eval, 0);
        let x = sess.constant(Tensor::new(vec![1, 2], vec![0.25, -3.0]).unwrap());
        let y = d.forward(&mut sess, x).unwrap();
        assert_eq!(sess.graph.value(y), &[0.25, -3.0]);
        let z = sess.zeros(&[1, 2]);
        let y = t.forward(&mut sess, z).unwrap();
        assert_eq!(sess.graph.value(y), &[0.0, 0.0]);
    }
}
