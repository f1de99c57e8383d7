//! Euler-Maruyama simulation of state trajectories, observation sequences,
//! and auxiliary training paths, with deterministic seeding.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{InitialDistribution, ObservationModel, Sde};
use crate::rng::StreamKey;

/// Uniform observation/substep grid: horizon `T`, `K` observation times
/// `t_k = T k / K`, and `N` substeps per observation interval, so
/// `tau = T / (K N)` and `t_{k,n} = t_k + n tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub obs_count: usize,
    pub substeps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, obs_count: usize, substeps: usize) -> Result<Self> {
        if horizon <= 0.0 || obs_count == 0 || substeps == 0 {
            return Err(Error::config("grid needs T > 0, K >= 1, N >= 1"));
        }
        Ok(TimeGrid {
            horizon,
            obs_count,
            substeps,
        })
    }

    /// Same horizon and observation count with a different substep count
    /// (each method runs on its own `N`).
    pub fn with_substeps(&self, substeps: usize) -> Self {
        TimeGrid { substeps, ..*self }
    }

    pub fn tau(&self) -> f64 {
        self.horizon / (self.obs_count * self.substeps) as f64
    }

    /// Observation interval length `T / K`.
    pub fn dt_obs(&self) -> f64 {
        self.horizon / self.obs_count as f64
    }

    /// Observation time `t_k`, computed by index arithmetic so repeated calls
    /// never accumulate drift.
    pub fn t_obs(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.obs_count as f64
    }

    /// Substep time `t_{k,n} = t_k + n tau`.
    pub fn t_sub(&self, k: usize, n: usize) -> f64 {
        self.t_obs(k) + n as f64 * self.tau()
    }

    pub fn total_substeps(&self) -> usize {
        self.obs_count * self.substeps
    }
}

/// A discretized state path over the full grid: `K N + 1` states of
/// dimension `d`, stored flat in step-major order.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub dim: usize,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Trajectory {
            grid,
            dim,
            data: vec![0.0; (grid.total_substeps() + 1) * dim],
        }
    }

    pub fn len(&self) -> usize {
        self.grid.total_substeps() + 1
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn state(&self, step: usize) -> &[f64] {
        &self.data[step * self.dim..(step + 1) * self.dim]
    }

    pub fn state_mut(&mut self, step: usize) -> &mut [f64] {
        &mut self.data[step * self.dim..(step + 1) * self.dim]
    }

    /// State at observation time `t_k` (`k = 0..=K`), i.e. substep `k N`.
    pub fn at_obs(&self, k: usize) -> &[f64] {
        self.state(k * self.grid.substeps)
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Observations `o_1, ..., o_K`, stored flat.
#[derive(Debug, Clone)]
pub struct ObservationSequence {
    pub obs_dim: usize,
    data: Vec<f64>,
}

impl ObservationSequence {
    pub fn zeros(obs_count: usize, obs_dim: usize) -> Self {
        ObservationSequence {
            obs_dim,
            data: vec![0.0; obs_count * obs_dim],
        }
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.obs_dim
    }

    /// Observation `o_k` for `k = 1..=K`.
    pub fn obs(&self, k: usize) -> &[f64] {
        debug_assert!(k >= 1);
        &self.data[(k - 1) * self.obs_dim..k * self.obs_dim]
    }

    pub fn obs_mut(&mut self, k: usize) -> &mut [f64] {
        debug_assert!(k >= 1);
        &mut self.data[(k - 1) * self.obs_dim..k * self.obs_dim]
    }

    /// Flat view of `o_1, ..., o_k`.
    pub fn prefix(&self, k: usize) -> &[f64] {
        &self.data[..k * self.obs_dim]
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Reusable Euler-Maruyama stepper; keeps scratch buffers and exposes the
/// diffusion increment `sigma(x_n) dW_n` of the last step for schemes that
/// need it.
pub struct EmStepper {
    mu: Vec<f64>,
    dw: Vec<f64>,
    sdw: Vec<f64>,
}

impl EmStepper {
    pub fn new(sde: &dyn Sde) -> Self {
        EmStepper {
            mu: vec![0.0; sde.state_dim()],
            dw: vec![0.0; sde.noise_dim()],
            sdw: vec![0.0; sde.state_dim()],
        }
    }

    /// One step with increments drawn from `rng` (`dW ~ N(0, dt I)`).
    /// Returns false if the new state is non-finite.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        sde: &dyn Sde,
        x: &mut [f64],
        dt: f64,
        rng: &mut R,
    ) -> bool {
        let sqrt_dt = dt.sqrt();
        for w in self.dw.iter_mut() {
            *w = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
        }
        self.step_with_dw(sde, x, dt)
    }

    /// One step using the increments already stored in the scratch buffer.
    pub fn step_with_dw(&mut self, sde: &dyn Sde, x: &mut [f64], dt: f64) -> bool {
        sde.drift_into(x, &mut self.mu);
        sde.sigma_mul(x, &self.dw, &mut self.sdw);
        let mut finite = true;
        for i in 0..x.len() {
            x[i] += self.mu[i] * dt + self.sdw[i];
            finite &= x[i].is_finite();
        }
        finite
    }

    /// `sigma(x_n) dW_n` of the last step taken.
    pub fn last_sdw(&self) -> &[f64] {
        &self.sdw
    }

    pub fn dw_mut(&mut self) -> &mut [f64] {
        &mut self.dw
    }
}

/// One Euler-Maruyama step `x + mu(x) dt + sigma(x) dW`.
pub fn em_step(sde: &dyn Sde, x: &[f64], dt: f64, dw: &[f64]) -> DVector<f64> {
    let mut out = DVector::from_column_slice(x);
    let mu = sde.drift(x);
    let mut sdw = vec![0.0; sde.state_dim()];
    sde.sigma_mul(x, dw, &mut sdw);
    for i in 0..x.len() {
        out[i] += mu[i] * dt + sdw[i];
    }
    out
}

/// Simulate a state path and its observation sequence
/// `O_k = h(S_{t_k}) + V_k`. Identical seeds give bit-identical output.
pub fn simulate_pair<R: Rng + ?Sized>(
    sde: &dyn Sde,
    obs_model: &ObservationModel,
    init: &InitialDistribution,
    grid: TimeGrid,
    rng: &mut R,
) -> Result<(Trajectory, ObservationSequence)> {
    let d = sde.state_dim();
    let mut traj = Trajectory::zeros(grid, d);
    let mut obs = ObservationSequence::zeros(grid.obs_count, obs_model.obs_dim);
    let mut stepper = EmStepper::new(sde);
    let tau = grid.tau();

    let x0 = init.sample(rng);
    traj.state_mut(0).copy_from_slice(x0.as_slice());
    let mut x = x0.as_slice().to_vec();

    let mut step = 0;
    for k in 1..=grid.obs_count {
        for _ in 0..grid.substeps {
            if !stepper.step(sde, &mut x, tau, rng) {
                return Err(Error::NonFinite {
                    context: format!("trajectory simulation (state_dim {d})"),
                    step: step + 1,
                });
            }
            step += 1;
            traj.state_mut(step).copy_from_slice(&x);
        }
        let noise = obs_model.sample_noise(rng);
        let mut hx = vec![0.0; obs_model.obs_dim];
        obs_model.h_into(&x, &mut hx);
        let o = obs.obs_mut(k);
        for i in 0..o.len() {
            o[i] = hx[i] + noise[i];
        }
    }
    Ok((traj, obs))
}

/// Simulate a batch of auxiliary training paths (started from `q_0`, driven
/// by their own Brownian motions) paired with observation sequences produced
/// by independent signal paths from `pi_0`.
pub fn simulate_training_batch(
    sde: &dyn Sde,
    obs_model: &ObservationModel,
    q0: &InitialDistribution,
    pi0: &InitialDistribution,
    grid: TimeGrid,
    batch: usize,
    key: &StreamKey,
) -> Result<Vec<(Trajectory, ObservationSequence)>> {
    (0..batch)
        .map(|i| {
            let item = key.index(i as u64);
            // observation sequence from an independent signal path
            let (_, obs) =
                simulate_pair(sde, obs_model, pi0, grid, &mut item.child("signal").rng())?;
            // auxiliary path from q0
            let mut rng = item.child("aux").rng();
            let d = sde.state_dim();
            let mut traj = Trajectory::zeros(grid, d);
            let x0 = q0.sample(&mut rng);
            traj.state_mut(0).copy_from_slice(x0.as_slice());
            let mut x = x0.as_slice().to_vec();
            let mut stepper = EmStepper::new(sde);
            for step in 1..=grid.total_substeps() {
                if !stepper.step(sde, &mut x, grid.tau(), &mut rng) {
                    return Err(Error::NonFinite {
                        context: "auxiliary training path".to_string(),
                        step,
                    });
                }
                traj.state_mut(step).copy_from_slice(&x);
            }
            Ok((traj, obs))
        })
        .collect()
}

/// Header of a binary trajectory dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub model: String,
    pub grid: TimeGrid,
    pub seed: u64,
    pub batch_count: usize,
    pub state_dim: usize,
    pub obs_dim: usize,
}

/// Write pairs as little-endian 64-bit floats behind a JSON header:
/// `u64 header length | header JSON | per pair: states then observations`.
pub fn write_dataset(
    path: &Path,
    header: &DatasetHeader,
    pairs: &[(Trajectory, ObservationSequence)],
) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header_bytes = serde_json::to_vec(header)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (traj, obs) in pairs {
        for v in traj.raw() {
            file.write_all(&v.to_le_bytes())?;
        }
        for v in obs.raw() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_dataset(
    path: &Path,
) -> Result<(DatasetHeader, Vec<(Trajectory, ObservationSequence)>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: DatasetHeader = serde_json::from_slice(&header_bytes)?;

    let steps = header.grid.total_substeps() + 1;
    let traj_len = steps * header.state_dim;
    let obs_len = header.grid.obs_count * header.obs_dim;
    let mut pairs = Vec::with_capacity(header.batch_count);
    for _ in 0..header.batch_count {
        let mut traj = Trajectory::zeros(header.grid, header.state_dim);
        read_f64_slice(&mut file, &mut traj.raw_mut()[..traj_len])?;
        let mut obs = ObservationSequence::zeros(header.grid.obs_count, header.obs_dim);
        read_f64_slice(&mut file, &mut obs.raw_mut()[..obs_len])?;
        pairs.push((traj, obs));
    }
    Ok((header, pairs))
}

fn read_f64_slice(file: &mut impl Read, out: &mut [f64]) -> Result<()> {
    let mut buf = [0u8; 8];
    for v in out.iter_mut() {
        file.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ou_model, ConstSde, FdSde, InitialDistribution, ObservationModel};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    #[test]
    fn grid_index_arithmetic_is_exact() {
        let grid = TimeGrid::new(1.0, 10, 64).unwrap();
        assert_eq!(grid.t_obs(3), 1.0 * 3.0 / 10.0);
        assert_eq!(grid.t_sub(3, 0), grid.t_obs(3));
        assert_eq!(grid.t_sub(0, 640), 640.0 * grid.tau());
        assert_relative_eq!(grid.t_sub(9, 64), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn em_step_identity_for_zero_model() {
        let stub = ConstSde::zero(1);
        let out = em_step(&stub, &[1.5], 0.1, &[0.7]);
        assert_eq!(out[0], 1.5);
    }

    #[test]
    fn em_step_ou_examples() {
        let ou = ou_model(1).unwrap();
        assert_relative_eq!(em_step(&*ou.sde, &[1.0], 0.1, &[0.0])[0], 0.9, epsilon = 1e-15);
        assert_relative_eq!(em_step(&*ou.sde, &[0.0], 0.1, &[0.5])[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn deterministic_init_and_zero_noise_keeps_state() {
        let stub = ConstSde::zero(2);
        let init = InitialDistribution::gaussian(
            nalgebra::DVector::from_vec(vec![1.0, -2.0]),
            DMatrix::identity(2, 2) * 1e-30,
        )
        .unwrap();
        let obs = ObservationModel::identity(2, DMatrix::identity(2, 2)).unwrap();
        let grid = TimeGrid::new(1.0, 4, 4).unwrap();
        let mut rng = StreamKey::root(1).rng();
        let (traj, _) = simulate_pair(&stub, &obs, &init, grid, &mut rng).unwrap();
        for step in 0..traj.len() {
            assert_relative_eq!(traj.state(step)[0], 1.0, epsilon = 1e-9);
            assert_relative_eq!(traj.state(step)[1], -2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn vanishing_observation_noise_recovers_h() {
        let ou = ou_model(1).unwrap();
        let obs = ObservationModel::identity(1, DMatrix::from_element(1, 1, 1e-12)).unwrap();
        let grid = TimeGrid::new(1.0, 10, 8).unwrap();
        let mut rng = StreamKey::root(2).rng();
        let (traj, o) = simulate_pair(&*ou.sde, &obs, &ou.init, grid, &mut rng).unwrap();
        for k in 1..=10 {
            assert!((o.obs(k)[0] - traj.at_obs(k)[0]).abs() < 1e-5);
        }
    }

    #[test]
    fn ou_terminal_variance_matches_closed_form() {
        let ou = ou_model(1).unwrap();
        let grid = TimeGrid::new(1.0, 10, 10).unwrap();
        let n = 100_000u64;
        let key = StreamKey::root(3).child("var");
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for i in 0..n {
            let mut rng = key.index(i).rng();
            let (traj, _) = simulate_pair(&*ou.sde, &ou.obs, &ou.init, grid, &mut rng).unwrap();
            let x = traj.at_obs(10)[0];
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let exact = 0.5 * (1.0 - (-2.0_f64).exp()) + (-2.0_f64).exp();
        let se = exact * (2.0 / n as f64).sqrt();
        // 3 standard errors plus the O(tau) discretization bias
        assert!(
            (var - exact).abs() < 3.0 * se + 2e-3,
            "var {var} vs exact {exact} (se {se})"
        );
    }

    #[test]
    fn same_seed_bit_identical() {
        let ou = ou_model(3).unwrap();
        let grid = TimeGrid::new(1.0, 5, 7).unwrap();
        let run = || {
            let mut rng = StreamKey::root(99).child("pair").rng();
            simulate_pair(&*ou.sde, &ou.obs, &ou.init, grid, &mut rng).unwrap()
        };
        let (t1, o1) = run();
        let (t2, o2) = run();
        assert_eq!(t1.raw(), t2.raw());
        assert_eq!(o1.raw(), o2.raw());
    }

    #[test]
    fn weak_error_halves_with_tau() {
        // On the OU drift the EM mean recursion is deterministic, so the weak
        // error of the mean can be read off a noise-free variant.
        let det_ou = FdSde::new(1, 1, |x| vec![-x[0]], |_| vec![0.0]);
        let init = InitialDistribution::gaussian(
            nalgebra::DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, 1e-30),
        )
        .unwrap();
        let obs = ObservationModel::identity(1, DMatrix::identity(1, 1)).unwrap();
        let mut errs = Vec::new();
        for substeps in [10, 20] {
            let grid = TimeGrid::new(1.0, 10, substeps).unwrap();
            let mut rng = StreamKey::root(5).rng();
            let (traj, _) = simulate_pair(&det_ou, &obs, &init, grid, &mut rng).unwrap();
            errs.push((traj.at_obs(10)[0] - (-1.0_f64).exp()).abs());
        }
        let ratio = errs[0] / errs[1];
        assert!((1.5..=2.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn observation_residual_covariance_matches_r() {
        let ou = ou_model(1).unwrap();
        let grid = TimeGrid::new(1.0, 10, 2).unwrap();
        let key = StreamKey::root(6).child("resid");
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for i in 0..10_000u64 {
            let mut rng = key.index(i).rng();
            let (traj, obs) = simulate_pair(&*ou.sde, &ou.obs, &ou.init, grid, &mut rng).unwrap();
            for k in 1..=10 {
                let r = obs.obs(k)[0] - traj.at_obs(k)[0];
                sum_sq += r * r;
                count += 1;
            }
        }
        let var = sum_sq / count as f64;
        assert!((var - 1.0).abs() < 0.05, "residual var {var}");
    }

    #[test]
    fn training_batch_reproducible_and_matched_in_law() {
        let ou = ou_model(1).unwrap();
        let grid = TimeGrid::new(1.0, 10, 4).unwrap();
        let key = StreamKey::root(7).child("train");
        let batch =
            simulate_training_batch(&*ou.sde, &ou.obs, &ou.aux_init, &ou.init, grid, 1, &key)
                .unwrap();
        let batch2 =
            simulate_training_batch(&*ou.sde, &ou.obs, &ou.aux_init, &ou.init, grid, 1, &key)
                .unwrap();
        assert_eq!(batch[0].0.raw(), batch2[0].0.raw());
        assert_eq!(batch[0].1.raw(), batch2[0].1.raw());

        // X_{t_1} must match S_{t_1} in law when q0 = pi0 (two-sample KS)
        let n = 10_000usize;
        let pairs = simulate_training_batch(
            &*ou.sde,
            &ou.obs,
            &ou.aux_init,
            &ou.init,
            grid,
            n,
            &key.child("ks"),
        )
        .unwrap();
        let mut xs: Vec<f64> = pairs.iter().map(|(t, _)| t.at_obs(1)[0]).collect();
        let sig_key = key.child("sig");
        let mut ss: Vec<f64> = (0..n)
            .map(|i| {
                let mut rng = sig_key.index(i as u64).rng();
                simulate_pair(&*ou.sde, &ou.obs, &ou.init, grid, &mut rng)
                    .unwrap()
                    .0
                    .at_obs(1)[0]
            })
            .collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ss.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p = ks_two_sample_pvalue(&xs, &ss);
        assert!(p > 0.01, "KS p-value {p}");
    }

    /// Two-sample Kolmogorov-Smirnov p-value (asymptotic) for sorted samples.
    fn ks_two_sample_pvalue(a: &[f64], b: &[f64]) -> f64 {
        let (n, m) = (a.len(), b.len());
        let (mut i, mut j) = (0usize, 0usize);
        let mut d: f64 = 0.0;
        while i < n && j < m {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
        }
        let ne = (n * m) as f64 / (n + m) as f64;
        let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
        (2.0 * (1..=100)
            .map(|k| {
                let k = k as f64;
                (-1.0_f64).powi(k as i32 - 1) * (-2.0 * k * k * lambda * lambda).exp()
            })
            .sum::<f64>())
        .clamp(0.0, 1.0)
    }

    #[test]
    fn dataset_roundtrip() {
        let ou = ou_model(2).unwrap();
        let grid = TimeGrid::new(1.0, 3, 2).unwrap();
        let key = StreamKey::root(8).child("dump");
        let pairs =
            simulate_training_batch(&*ou.sde, &ou.obs, &ou.aux_init, &ou.init, grid, 4, &key)
                .unwrap();
        let header = DatasetHeader {
            model: "ou2d".to_string(),
            grid,
            seed: 8,
            batch_count: pairs.len(),
            state_dim: 2,
            obs_dim: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.bin");
        write_dataset(&path, &header, &pairs).unwrap();
        let (h2, pairs2) = read_dataset(&path).unwrap();
        assert_eq!(h2.batch_count, 4);
        for (p, q) in pairs.iter().zip(&pairs2) {
            assert_eq!(p.0.raw(), q.0.raw());
            assert_eq!(p.1.raw(), q.1.raw());
        }
    }
}
