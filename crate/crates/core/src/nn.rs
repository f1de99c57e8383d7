//! Minimal fully connected network engine: batched forward/backward passes,
//! Adam, patience-gated cosine annealing, warm starting, and checkpoints.
//!
//! Everything runs in 64-bit floats; densities and log-densities span too
//! large a dynamic range for single precision once the state dimension grows.
//! Batches are laid out feature-major: an input batch is `(input_dim, B)`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    /// Identity output; used by the logarithmic filters and all gradient nets.
    Linear,
    /// Exponential output; keeps plain-density networks strictly positive.
    Exp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub output_activation: OutputActivation,
}

impl MlpConfig {
    pub fn new(
        input_dim: usize,
        hidden: Vec<usize>,
        output_dim: usize,
        output_activation: OutputActivation,
    ) -> Self {
        MlpConfig {
            input_dim,
            hidden,
            output_dim,
            output_activation,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.output_dim);
        dims
    }
}

/// Fully connected ReLU network with a configurable output activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub output_activation: OutputActivation,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Post-activation values kept from a forward pass for the backward sweep.
pub struct MlpCache {
    input: Array2<f64>,
    activations: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

impl Mlp {
    /// He/Kaiming fan-in initialization for rectifier stacks; biases zero.
    pub fn he_init<R: Rng + ?Sized>(config: &MlpConfig, rng: &mut R) -> Self {
        let dims = config.dims();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_out, fan_in) = (dims[l + 1], dims[l]);
            let std = (2.0 / fan_in as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
                std * rng.sample::<f64, _>(StandardNormal)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Mlp {
            dims,
            output_activation: config.output_activation,
            weights,
            biases,
        }
    }

    pub fn zeros(config: &MlpConfig) -> Self {
        let dims = config.dims();
        let weights = (0..dims.len() - 1)
            .map(|l| Array2::zeros((dims[l + 1], dims[l])))
            .collect();
        let biases = (0..dims.len() - 1).map(|l| Array1::zeros(dims[l + 1])).collect();
        Mlp {
            dims,
            output_activation: config.output_activation,
            weights,
            biases,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    /// Total number of weights and biases.
    pub fn param_count(&self) -> usize {
        self.dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Copy parameters from `prev` into this network (warm start).
    /// The optimizer state is the caller's to reset.
    pub fn warm_start_from(&mut self, prev: &Mlp) -> Result<()> {
        if self.dims != prev.dims {
            return Err(Error::Filter(format!(
                "warm start architecture mismatch: {:?} vs {:?}",
                self.dims, prev.dims
            )));
        }
        for (dst, src) in self.weights.iter_mut().zip(&prev.weights) {
            dst.assign(src);
        }
        for (dst, src) in self.biases.iter_mut().zip(&prev.biases) {
            dst.assign(src);
        }
        Ok(())
    }

    /// Batched forward pass: `x` is `(input_dim, B)`, result `(output_dim, B)`.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut a = x.clone();
        let last = self.layer_count() - 1;
        for l in 0..=last {
            let mut z = self.weights[l].dot(&a);
            z += &self.biases[l].view().insert_axis(Axis(1));
            a = if l < last {
                z.mapv_into(|v| v.max(0.0))
            } else {
                match self.output_activation {
                    OutputActivation::Linear => z,
                    OutputActivation::Exp => z.mapv_into(f64::exp),
                }
            };
        }
        a
    }

    /// Forward pass for one sample.
    pub fn forward_single(&self, x: &[f64]) -> Vec<f64> {
        let input = Array2::from_shape_vec((x.len(), 1), x.to_vec()).unwrap();
        self.forward(&input).column(0).to_vec()
    }

    /// Forward pass that keeps the activations needed by `backward`.
    pub fn forward_cached(&self, x: &Array2<f64>) -> MlpCache {
        let last = self.layer_count() - 1;
        let mut activations = Vec::with_capacity(last);
        let mut a = x.clone();
        for l in 0..=last {
            let mut z = self.weights[l].dot(&a);
            z += &self.biases[l].view().insert_axis(Axis(1));
            if l < last {
                a = z.mapv_into(|v| v.max(0.0));
                activations.push(a.clone());
            } else {
                let out = match self.output_activation {
                    OutputActivation::Linear => z,
                    OutputActivation::Exp => z.mapv_into(f64::exp),
                };
                return MlpCache {
                    input: x.clone(),
                    activations,
                    output: out,
                };
            }
        }
        unreachable!()
    }

    /// Reverse sweep from `dout = dL/d(output)`. Accumulates parameter
    /// gradients into `grads` when given, and returns `dL/d(input)`.
    pub fn backward(
        &self,
        cache: &MlpCache,
        dout: &Array2<f64>,
        mut grads: Option<&mut MlpGrads>,
    ) -> Array2<f64> {
        let last = self.layer_count() - 1;
        let mut dz = match self.output_activation {
            OutputActivation::Linear => dout.clone(),
            OutputActivation::Exp => dout * &cache.output,
        };
        for l in (0..=last).rev() {
            let a_prev = if l == 0 {
                &cache.input
            } else {
                &cache.activations[l - 1]
            };
            if let Some(g) = grads.as_deref_mut() {
                g.dw[l] += &dz.dot(&a_prev.t());
                g.db[l] += &dz.sum_axis(Axis(1));
            }
            let da_prev = self.weights[l].t().dot(&dz);
            if l == 0 {
                return da_prev;
            }
            // ReLU mask from the stored post-activations
            dz = da_prev;
            dz.zip_mut_with(&cache.activations[l - 1], |d, a| {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        unreachable!()
    }

    /// For scalar-output networks: per-sample values and input gradients.
    /// Returns `(values (B), d(value)/d(input) (input_dim, B))`.
    pub fn value_and_input_grad(&self, x: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
        assert_eq!(self.output_dim(), 1, "input gradient needs a scalar net");
        let cache = self.forward_cached(x);
        let ones = Array2::ones((1, x.ncols()));
        let dinput = self.backward(&cache, &ones, None);
        let values = cache.output.row(0).to_owned();
        (values, dinput)
    }
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub dw: Vec<Array2<f64>>,
    pub db: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            dw: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            db: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.dw.iter_mut().zip(&other.dw) {
            *a += b;
        }
        for (a, b) in self.db.iter_mut().zip(&other.db) {
            *a += b;
        }
    }

    pub fn reset(&mut self) {
        for a in self.dw.iter_mut() {
            a.fill(0.0);
        }
        for a in self.db.iter_mut() {
            a.fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.dw.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.db.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam first/second moments plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: MlpGrads,
    v: MlpGrads,
    t: u64,
}

impl AdamState {
    pub fn new(net: &Mlp) -> Self {
        AdamState {
            m: MlpGrads::zeros_like(net),
            v: MlpGrads::zeros_like(net),
            t: 0,
        }
    }
}

/// One Adam update with bias correction.
pub fn adam_step(net: &mut Mlp, state: &mut AdamState, grads: &MlpGrads, eta: f64) {
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let update = |theta: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *theta -= eta * m_hat / (v_hat.sqrt() + ADAM_EPS);
    };
    for l in 0..net.weights.len() {
        let (w, m, v, g) = (
            &mut net.weights[l],
            &mut state.m.dw[l],
            &mut state.v.dw[l],
            &grads.dw[l],
        );
        for ((th, (m, v)), g) in w
            .iter_mut()
            .zip(m.iter_mut().zip(v.iter_mut()))
            .zip(g.iter())
        {
            update(th, m, v, *g);
        }
        let (b, mb, vb, gb) = (
            &mut net.biases[l],
            &mut state.m.db[l],
            &mut state.v.db[l],
            &grads.db[l],
        );
        for ((th, (m, v)), g) in b
            .iter_mut()
            .zip(mb.iter_mut().zip(vb.iter_mut()))
            .zip(gb.iter())
        {
            update(th, m, v, *g);
        }
    }
}

/// Learning-rate schedule parameters. A constant rate is the degenerate case
/// `eta_max = eta_min`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Schedule {
    pub eta_max: f64,
    pub eta_min: f64,
    /// Cosine cycle length C.
    pub cycle_len: usize,
    /// Patience limit P (window evaluations).
    pub patience: usize,
    /// Loss-averaging window in iterations.
    pub window: usize,
}

pub const DEFAULT_CYCLE_LEN: usize = 80;
pub const DEFAULT_PATIENCE: usize = 50;
pub const DEFAULT_WINDOW: usize = 200;

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Schedule {
            eta_max: lr,
            eta_min: lr,
            cycle_len: DEFAULT_CYCLE_LEN,
            patience: DEFAULT_PATIENCE,
            window: DEFAULT_WINDOW,
        }
    }

    pub fn cosine(eta_max: f64, eta_min: f64) -> Self {
        Schedule {
            eta_max,
            eta_min,
            ..Schedule::constant(0.0)
        }
    }
}

/// Training-loop state: cosine cycle position, patience counter, and the
/// windowed loss average driving both.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub schedule: Schedule,
    cycle_pos: usize,
    patience_count: usize,
    window_sum: f64,
    window_n: usize,
    prev_window_mean: Option<f64>,
    pub last_window_mean: Option<f64>,
    stopped: bool,
    pub iterations: u64,
}

impl TrainState {
    pub fn new(schedule: Schedule) -> Self {
        TrainState {
            schedule,
            cycle_pos: 0,
            patience_count: 0,
            window_sum: 0.0,
            window_n: 0,
            prev_window_mean: None,
            last_window_mean: None,
            stopped: false,
            iterations: 0,
        }
    }

    /// Current rate `eta_c = eta_min + (eta_max - eta_min)(1 + cos(pi c/C))/2`.
    pub fn lr(&self) -> f64 {
        let s = &self.schedule;
        let c = self.cycle_pos.min(s.cycle_len) as f64;
        s.eta_min
            + 0.5 * (s.eta_max - s.eta_min) * (1.0 + (std::f64::consts::PI * c / s.cycle_len as f64).cos())
    }

    pub fn cycle_pos(&self) -> usize {
        self.cycle_pos
    }

    pub fn patience(&self) -> usize {
        self.patience_count
    }

    pub fn stopped(&self) -> bool {
        self.stopped
    }

    /// Record one iteration's loss. Window means are compared every `window`
    /// iterations: a decrease resets the patience counter, anything else
    /// increments it; `p >= P` stops. The cosine position advances each
    /// iteration while `p > P/2`. Returns true when training should stop.
    pub fn record(&mut self, loss: f64) -> bool {
        self.iterations += 1;
        self.window_sum += loss;
        self.window_n += 1;
        if self.window_n == self.schedule.window {
            let mean = self.window_sum / self.window_n as f64;
            self.window_sum = 0.0;
            self.window_n = 0;
            if let Some(prev) = self.prev_window_mean {
                if mean < prev {
                    self.patience_count = 0;
                } else {
                    self.patience_count += 1;
                    if self.patience_count >= self.schedule.patience {
                        self.stopped = true;
                    }
                }
            }
            self.prev_window_mean = Some(mean);
            self.last_window_mean = Some(mean);
        }
        if self.patience_count * 2 > self.schedule.patience {
            self.cycle_pos = (self.cycle_pos + 1).min(self.schedule.cycle_len);
        }
        self.stopped
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    dims: Vec<usize>,
    output_activation: OutputActivation,
    meta: serde_json::Value,
}

/// Save as `u64 header length | JSON header | little-endian f64 blob`
/// (weights row-major then bias, layer by layer).
pub fn save_checkpoint(path: &Path, net: &Mlp, meta: serde_json::Value) -> Result<()> {
    let header = CheckpointHeader {
        dims: net.dims.clone(),
        output_activation: net.output_activation,
        meta,
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header_bytes = serde_json::to_vec(&header)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for l in 0..net.layer_count() {
        for v in net.weights[l].iter() {
            file.write_all(&v.to_le_bytes())?;
        }
        for v in net.biases[l].iter() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Mlp, serde_json::Value)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let mut header_bytes = vec![0u8; u64::from_le_bytes(len_bytes) as usize];
    file.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    if header.dims.len() < 2 {
        return Err(Error::Checkpoint("invalid dims".to_string()));
    }
    let config = MlpConfig {
        input_dim: header.dims[0],
        hidden: header.dims[1..header.dims.len() - 1].to_vec(),
        output_dim: *header.dims.last().unwrap(),
        output_activation: header.output_activation,
    };
    let mut net = Mlp::zeros(&config);
    let mut buf = [0u8; 8];
    for l in 0..net.layer_count() {
        for v in net.weights[l].iter_mut() {
            file.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        for v in net.biases[l].iter_mut() {
            file.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    Ok((net, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn cfg(input: usize, hidden: Vec<usize>, out: usize, act: OutputActivation) -> MlpConfig {
        MlpConfig::new(input, hidden, out, act)
    }

    #[test]
    fn zero_net_outputs() {
        let lin = Mlp::zeros(&cfg(3, vec![4, 4], 2, OutputActivation::Linear));
        let x = Array2::zeros((3, 5));
        assert!(lin.forward(&x).iter().all(|v| *v == 0.0));

        let exp = Mlp::zeros(&cfg(3, vec![4], 2, OutputActivation::Exp));
        assert!(exp.forward(&x).iter().all(|v| *v == 1.0));
    }

    #[test]
    fn single_linear_layer_identity() {
        let mut net = Mlp::zeros(&cfg(3, vec![], 3, OutputActivation::Linear));
        for i in 0..3 {
            net.weights[0][(i, i)] = 1.0;
        }
        let x = array![[1.0], [2.0], [-3.0]];
        let y = net.forward(&x);
        assert_eq!(y, x);
    }

    #[test]
    fn param_count_matches_closed_form() {
        let net = Mlp::zeros(&cfg(7, vec![11, 13, 5], 2, OutputActivation::Linear));
        let expected = 7 * 11 + 11 + 11 * 13 + 13 + 13 * 5 + 5 + 5 * 2 + 2;
        assert_eq!(net.param_count(), expected);
        let n: usize = net.weights.iter().map(|w| w.len()).sum::<usize>()
            + net.biases.iter().map(|b| b.len()).sum::<usize>();
        assert_eq!(n, expected);
    }

    fn loss_of(net: &Mlp, x: &Array2<f64>, target: &Array2<f64>) -> f64 {
        let out = net.forward(x);
        (&out - target).mapv(|v| v * v).sum() / x.ncols() as f64
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let key = StreamKey::root(21).child("gradcheck");
        for trial in 0..20u64 {
            let mut rng = key.index(trial).rng();
            let input = 1 + (trial % 4) as usize;
            let out = 1 + (trial % 2) as usize;
            let act = if trial % 2 == 0 {
                OutputActivation::Linear
            } else {
                OutputActivation::Exp
            };
            let config = cfg(input, vec![5, 4], out, act);
            let mut net = Mlp::he_init(&config, &mut rng);
            let b = 3;
            let x = Array2::from_shape_fn((input, b), |_| {
                rng.sample::<f64, _>(StandardNormal) * 0.8
            });
            let target = Array2::from_shape_fn((out, b), |_| rng.sample::<f64, _>(StandardNormal));

            let cache = net.forward_cached(&x);
            let dout = (cache.output() - &target) * (2.0 / b as f64);
            let mut grads = MlpGrads::zeros_like(&net);
            let dinput = net.backward(&cache, &dout, Some(&mut grads));

            let eps = 1e-5;
            for l in 0..net.layer_count() {
                for idx in 0..net.weights[l].len().min(12) {
                    let orig = net.weights[l].as_slice_mut().unwrap()[idx];
                    net.weights[l].as_slice_mut().unwrap()[idx] = orig + eps;
                    let lp = loss_of(&net, &x, &target);
                    net.weights[l].as_slice_mut().unwrap()[idx] = orig - eps;
                    let lm = loss_of(&net, &x, &target);
                    net.weights[l].as_slice_mut().unwrap()[idx] = orig;
                    let fd = (lp - lm) / (2.0 * eps);
                    let an = grads.dw[l].as_slice().unwrap()[idx];
                    assert!(
                        (an - fd).abs() <= 1e-4 * (1.0 + fd.abs()),
                        "trial {trial} layer {l} idx {idx}: {an} vs {fd}"
                    );
                }
            }
            // input gradient of the same loss
            let mut xp = x.clone();
            for idx in 0..xp.len().min(6) {
                let orig = xp.as_slice_mut().unwrap()[idx];
                xp.as_slice_mut().unwrap()[idx] = orig + eps;
                let lp = loss_of(&net, &xp, &target);
                xp.as_slice_mut().unwrap()[idx] = orig - eps;
                let lm = loss_of(&net, &xp, &target);
                xp.as_slice_mut().unwrap()[idx] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = dinput.as_slice().unwrap()[idx];
                assert!(
                    (an - fd).abs() <= 1e-4 * (1.0 + fd.abs()),
                    "input grad trial {trial} idx {idx}: {an} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn input_grad_of_constant_net_is_zero() {
        let mut rng = StreamKey::root(22).rng();
        let mut net = Mlp::he_init(&cfg(3, vec![6], 1, OutputActivation::Linear), &mut rng);
        // zero final layer makes the output constant
        net.weights.last_mut().unwrap().fill(0.0);
        net.biases.last_mut().unwrap().fill(1.7);
        let x = Array2::from_shape_fn((3, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let (vals, grad) = net.value_and_input_grad(&x);
        assert!(vals.iter().all(|v| (*v - 1.7).abs() < 1e-15));
        assert!(grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn input_grad_of_linear_net_is_weight_row() {
        let mut net = Mlp::zeros(&cfg(3, vec![], 1, OutputActivation::Linear));
        net.weights[0] = array![[0.5, -1.0, 2.0]];
        let x = array![[0.1], [0.2], [0.3]];
        let (_, grad) = net.value_and_input_grad(&x);
        assert_eq!(grad.column(0).to_vec(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut rng = StreamKey::root(23).rng();
        let mut net = Mlp::he_init(&cfg(2, vec![3], 1, OutputActivation::Linear), &mut rng);
        let before = net.clone();
        let mut state = AdamState::new(&net);
        let grads = MlpGrads::zeros_like(&net);
        for _ in 0..5 {
            adam_step(&mut net, &mut state, &grads, 1e-2);
        }
        for l in 0..net.layer_count() {
            assert_eq!(net.weights[l], before.weights[l]);
            assert_eq!(net.biases[l], before.biases[l]);
        }
    }

    #[test]
    fn adam_constant_gradient_moves_monotonically_and_bounded() {
        // scalar parameter, constant gradient g > 0: parameter decreases each
        // step and each move is bounded by eta (small tolerance for eps)
        let mut net = Mlp::zeros(&cfg(1, vec![], 1, OutputActivation::Linear));
        let mut state = AdamState::new(&net);
        let mut grads = MlpGrads::zeros_like(&net);
        grads.dw[0][(0, 0)] = 0.7;
        let eta = 1e-2;
        let mut prev = net.weights[0][(0, 0)];
        for _ in 0..50 {
            adam_step(&mut net, &mut state, &grads, eta);
            let cur = net.weights[0][(0, 0)];
            assert!(cur < prev, "must move against the gradient sign");
            assert!(prev - cur <= eta * 1.001, "step bounded by eta");
            prev = cur;
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let sched = Schedule {
            eta_max: 1e-3,
            eta_min: 1e-5,
            cycle_len: 80,
            patience: 50,
            window: 200,
        };
        let mut state = TrainState::new(sched);
        assert_relative_eq!(state.lr(), 1e-3, epsilon = 1e-15);
        state.cycle_pos = 40;
        assert_relative_eq!(state.lr(), (1e-3 + 1e-5) / 2.0, max_relative = 1e-12);
        state.cycle_pos = 80;
        assert_relative_eq!(state.lr(), 1e-5, max_relative = 1e-12);
    }

    #[test]
    fn patience_semantics() {
        let sched = Schedule {
            eta_max: 1e-3,
            eta_min: 1e-3,
            cycle_len: 80,
            patience: 5,
            window: 10,
        };
        // strictly decreasing stream never stops
        let mut state = TrainState::new(sched);
        let mut loss = 100.0;
        for _ in 0..2000 {
            assert!(!state.record(loss));
            loss *= 0.999;
        }
        assert_eq!(state.patience(), 0);

        // non-decreasing stream stops after exactly P comparisons
        let mut state = TrainState::new(sched);
        let mut comparisons = 0;
        let mut stopped_at = None;
        for i in 0..2000 {
            let stop = state.record(1.0);
            if (i + 1) % sched.window == 0 && (i + 1) / sched.window >= 2 {
                comparisons += 1;
            }
            if stop {
                stopped_at = Some(comparisons);
                break;
            }
        }
        assert_eq!(stopped_at, Some(sched.patience));
    }

    #[test]
    fn cosine_advances_only_past_half_patience() {
        let sched = Schedule {
            eta_max: 1e-3,
            eta_min: 1e-5,
            cycle_len: 80,
            patience: 4,
            window: 5,
        };
        let mut state = TrainState::new(sched);
        // two plateau windows: p = 1 after the comparison, not yet > P/2 = 2
        for _ in 0..15 {
            state.record(1.0);
        }
        assert_eq!(state.cycle_pos(), 0);
        // two more plateau windows: p = 3 > 2, c starts advancing
        for _ in 0..10 {
            state.record(1.0);
        }
        assert!(state.cycle_pos() > 0);
    }

    #[test]
    fn warm_start_copies_and_detaches() {
        let mut rng = StreamKey::root(24).rng();
        let config = cfg(4, vec![8, 8], 1, OutputActivation::Exp);
        let src = Mlp::he_init(&config, &mut rng);
        let mut dst = Mlp::zeros(&config);
        dst.warm_start_from(&src).unwrap();
        let x = Array2::from_shape_fn((4, 3), |_| rng.sample::<f64, _>(StandardNormal));
        assert_eq!(src.forward(&x), dst.forward(&x));
        // mutating the copy leaves the original unchanged
        dst.weights[0][(0, 0)] += 1.0;
        assert_ne!(src.weights[0][(0, 0)], dst.weights[0][(0, 0)]);

        let other = Mlp::zeros(&cfg(4, vec![8, 9], 1, OutputActivation::Exp));
        assert!(dst.warm_start_from(&other).is_err());
    }

    #[test]
    fn he_init_reproducible_from_seed() {
        let config = cfg(5, vec![7], 2, OutputActivation::Linear);
        let a = Mlp::he_init(&config, &mut StreamKey::root(37).rng());
        let b = Mlp::he_init(&config, &mut StreamKey::root(37).rng());
        for l in 0..a.layer_count() {
            assert_eq!(a.weights[l], b.weights[l]);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = StreamKey::root(25).rng();
        let net = Mlp::he_init(&cfg(6, vec![9, 9], 1, OutputActivation::Exp), &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&path, &net, serde_json::json!({"step": 3})).unwrap();
        let (loaded, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta["step"], 3);
        assert_eq!(loaded.dims, net.dims);
        for l in 0..net.layer_count() {
            assert_eq!(loaded.weights[l], net.weights[l]);
            assert_eq!(loaded.biases[l], net.biases[l]);
        }
    }

    proptest! {
        #[test]
        fn exp_output_networks_are_strictly_positive(
            seed in 0u64..1000,
            xs in proptest::collection::vec(-50.0f64..50.0, 3),
        ) {
            let net = Mlp::he_init(
                &cfg(3, vec![8, 8], 1, OutputActivation::Exp),
                &mut StreamKey::root(seed).rng(),
            );
            let out = net.forward_single(&xs);
            prop_assert!(out[0] > 0.0);
        }
    }
}
