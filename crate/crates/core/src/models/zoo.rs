//! The benchmark systems: Ornstein-Uhlenbeck, bistable double-well, linear
//! spring-mass chain, Schlogl chemical Langevin model, and stochastic
//! Lorenz-96, each with analytic coefficient derivatives.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    InitialDistribution, LinearSde, ModelBundle, ObsMap, ObservationModel, Sde,
};
use crate::error::{Error, Result};
use crate::rng::StreamKey;

/// Identity-in/identity-out helper for constant diagonal diffusion.
fn copy_scaled(z: &[f64], scale: f64, out: &mut [f64]) {
    for (o, zi) in out.iter_mut().zip(z) {
        *o = scale * zi;
    }
}

// ---------------------------------------------------------------------------
// Ornstein-Uhlenbeck
// ---------------------------------------------------------------------------

/// Mean-reverting linear model: `mu(x) = -x`, `sigma = I`.
pub struct OuModel {
    dim: usize,
}

impl Sde for OuModel {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn noise_dim(&self) -> usize {
        self.dim
    }

    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = -xi;
        }
    }

    fn sigma_mul(&self, _x: &[f64], z: &[f64], out: &mut [f64]) {
        copy_scaled(z, 1.0, out);
    }

    fn sigma_t_mul(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
        copy_scaled(v, 1.0, out);
    }

    fn diffusion(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim)
    }

    fn div_drift(&self, _x: &[f64]) -> f64 {
        -(self.dim as f64)
    }

    fn grad_div_a_into(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn lap_a(&self, _x: &[f64]) -> f64 {
        0.0
    }

    fn jac_drift(&self, _x: &[f64]) -> DMatrix<f64> {
        -DMatrix::<f64>::identity(self.dim, self.dim)
    }

    fn linear_part(&self) -> Option<LinearSde> {
        Some(LinearSde {
            a: -DMatrix::<f64>::identity(self.dim, self.dim),
            sigma: DMatrix::identity(self.dim, self.dim),
        })
    }
}

/// `d`-dimensional Ornstein-Uhlenbeck with identity observation, `R = I`,
/// and `pi_0 = N(0, I)`.
pub fn ou_model(dim: usize) -> Result<ModelBundle> {
    if dim == 0 {
        return Err(Error::model("dimension must be positive"));
    }
    let init = InitialDistribution::standard(dim);
    Ok(ModelBundle {
        name: format!("ou{dim}d"),
        sde: Arc::new(OuModel { dim }),
        obs: ObservationModel::identity(dim, DMatrix::identity(dim, dim))?,
        init: init.clone(),
        aux_init: init,
        sidecar: None,
    })
}

// ---------------------------------------------------------------------------
// Bistable double-well
// ---------------------------------------------------------------------------

/// 1D nonlinear model with drift `-(2/5)(5x - x^3)` and unit diffusion.
pub struct BistableModel;

impl BistableModel {
    pub fn drift_scalar(x: f64) -> f64 {
        -0.4 * (5.0 * x - x * x * x)
    }
}

impl Sde for BistableModel {
    fn state_dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        out[0] = Self::drift_scalar(x[0]);
    }

    fn sigma_mul(&self, _x: &[f64], z: &[f64], out: &mut [f64]) {
        out[0] = z[0];
    }

    fn sigma_t_mul(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] = v[0];
    }

    fn diffusion(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0)
    }

    fn div_drift(&self, x: &[f64]) -> f64 {
        -2.0 + 1.2 * x[0] * x[0]
    }

    fn grad_div_a_into(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn lap_a(&self, _x: &[f64]) -> f64 {
        0.0
    }

    fn jac_drift(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, -2.0 + 1.2 * x[0] * x[0])
    }
}

/// 1D bistable model: `sigma = 1`, `h(x) = x`, `R = 1`, `pi_0 = N(0, 1)`.
pub fn bistable_model() -> Result<ModelBundle> {
    let init = InitialDistribution::standard(1);
    Ok(ModelBundle {
        name: "bistable".to_string(),
        sde: Arc::new(BistableModel),
        obs: ObservationModel::identity(1, DMatrix::identity(1, 1))?,
        init: init.clone(),
        aux_init: init,
        sidecar: None,
    })
}

// ---------------------------------------------------------------------------
// Linear spring-mass chain
// ---------------------------------------------------------------------------

/// Heterogeneous chain parameters, drawn once from a recorded seed and then
/// treated as deterministic constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpringMassParams {
    pub masses: Vec<f64>,
    pub springs: Vec<f64>,
    pub dampers: Vec<f64>,
}

impl SpringMassParams {
    /// Draw `m_i ~ U[0.8, 1.2]`, `k_i ~ U[0.8, 1.2]`, `c_i ~ U[0.15, 0.25]`.
    pub fn sample(r: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = StreamKey::root(seed).child("lsm-params").rng();
        let unif = |rng: &mut rand_chacha::ChaCha8Rng, a: f64, b: f64| -> f64 {
            a + (b - a) * rng.random::<f64>()
        };
        let masses = (0..r).map(|_| unif(&mut rng, 0.8, 1.2)).collect();
        let springs = (0..=r).map(|_| unif(&mut rng, 0.8, 1.2)).collect();
        let dampers = (0..=r).map(|_| unif(&mut rng, 0.15, 0.25)).collect();
        SpringMassParams {
            masses,
            springs,
            dampers,
        }
    }

    pub fn mass_count(&self) -> usize {
        self.masses.len()
    }
}

/// Linear spring-mass model with block drift matrix
/// `[[0, I], [A21, A22]]` and unit diffusion.
pub struct SpringMassModel {
    a: DMatrix<f64>,
    params: SpringMassParams,
}

impl SpringMassModel {
    /// Build from explicit parameters (also the hook used to pin matrices in
    /// tests).
    pub fn from_params(params: SpringMassParams) -> Result<Self> {
        let r = params.mass_count();
        if r == 0 {
            return Err(Error::model("need at least one mass"));
        }
        if params.springs.len() != r + 1 || params.dampers.len() != r + 1 {
            return Err(Error::model("need r+1 springs and dampers for r masses"));
        }
        let d = 2 * r;
        let mut a = DMatrix::zeros(d, d);
        for i in 0..r {
            a[(i, r + i)] = 1.0;
        }
        let (m, k, c) = (&params.masses, &params.springs, &params.dampers);
        for i in 0..r {
            a[(r + i, i)] = -(k[i] + k[i + 1]) / m[i];
            if i + 1 < r {
                a[(r + i, i + 1)] = k[i + 1] / m[i];
                a[(r + i + 1, i)] = k[i + 1] / m[i + 1];
            }
            a[(r + i, r + i)] = -(c[i] + c[i + 1]) / m[i];
        }
        Ok(SpringMassModel { a, params })
    }

    pub fn drift_matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn params(&self) -> &SpringMassParams {
        &self.params
    }
}

impl Sde for SpringMassModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn noise_dim(&self) -> usize {
        self.a.nrows()
    }

    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.a.nrows();
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.a[(i, j)] * x[j];
            }
            out[i] = acc;
        }
    }

    fn sigma_mul(&self, _x: &[f64], z: &[f64], out: &mut [f64]) {
        copy_scaled(z, 1.0, out);
    }

    fn sigma_t_mul(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
        copy_scaled(v, 1.0, out);
    }

    fn diffusion(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(self.a.nrows(), self.a.nrows())
    }

    fn div_drift(&self, _x: &[f64]) -> f64 {
        self.a.trace()
    }

    fn grad_div_a_into(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn lap_a(&self, _x: &[f64]) -> f64 {
        0.0
    }

    fn jac_drift(&self, _x: &[f64]) -> DMatrix<f64> {
        self.a.clone()
    }

    fn linear_part(&self) -> Option<LinearSde> {
        Some(LinearSde {
            a: self.a.clone(),
            sigma: DMatrix::identity(self.a.nrows(), self.a.nrows()),
        })
    }
}

/// Spring-mass chain with `r` masses (`d = 2r`), positions observed through
/// `H = [I 0]`, `R = I`, `pi_0 = N(0, I)`. Parameters are drawn once from
/// `seed` and serialized into the bundle sidecar.
pub fn spring_mass_model(r: usize, seed: u64) -> Result<ModelBundle> {
    if r == 0 {
        return Err(Error::model("need at least one mass"));
    }
    let params = SpringMassParams::sample(r, seed);
    let sidecar = serde_json::to_value(&params)?;
    let model = SpringMassModel::from_params(params)?;
    let d = 2 * r;
    let mut h = DMatrix::zeros(r, d);
    for i in 0..r {
        h[(i, i)] = 1.0;
    }
    let obs = ObservationModel::new(
        d,
        r,
        ObsMap::Linear {
            h: (0..r)
                .map(|i| (0..d).map(|j| h[(i, j)]).collect())
                .collect(),
        },
        DMatrix::identity(r, r),
    )?;
    let init = InitialDistribution::standard(d);
    Ok(ModelBundle {
        name: format!("lsm{d}d"),
        sde: Arc::new(model),
        obs,
        init: init.clone(),
        aux_init: init,
        sidecar: Some(sidecar),
    })
}

// ---------------------------------------------------------------------------
// Schlogl chemical Langevin model
// ---------------------------------------------------------------------------

pub const SCHLOGL_THETA: [f64; 4] = [3e-7, 1e-4, 1e-3, 3.5];
pub const SCHLOGL_A: f64 = 1e5;
pub const SCHLOGL_B: f64 = 2e5;

/// 1D chemical Langevin approximation with four reaction channels merged into
/// one effective noise term. Rates are clamped at zero outside the physical
/// domain; clamping increments a counter that the harness reports.
pub struct SchloglModel {
    /// Sign applied to the `b4` drift contribution (see `schlogl_model`).
    pub b4_sign: f64,
    clamp_events: AtomicU64,
}

impl SchloglModel {
    pub fn new(b4_sign: f64) -> Self {
        SchloglModel {
            b4_sign,
            clamp_events: AtomicU64::new(0),
        }
    }

    /// Raw (unclamped) channel rates.
    pub fn raw_rates(x: f64) -> [f64; 4] {
        let [t1, t2, t3, t4] = SCHLOGL_THETA;
        [
            t1 * SCHLOGL_A / 2.0 * x * (x - 1.0),
            t2 / 6.0 * x * (x - 1.0) * (x - 2.0),
            t3 * SCHLOGL_B,
            t4 * x,
        ]
    }

    /// Channel rates clamped at zero; flags a domain event when clamping.
    pub fn rates(&self, x: f64) -> [f64; 4] {
        let raw = Self::raw_rates(x);
        if raw.iter().any(|b| *b < 0.0) {
            self.clamp_events.fetch_add(1, Ordering::Relaxed);
        }
        raw.map(|b| b.max(0.0))
    }

    /// Derivatives of the raw rates.
    pub fn rate_derivs(x: f64) -> [f64; 4] {
        let [t1, t2, _, t4] = SCHLOGL_THETA;
        [
            t1 * SCHLOGL_A / 2.0 * (2.0 * x - 1.0),
            t2 / 6.0 * (3.0 * x * x - 6.0 * x + 2.0),
            0.0,
            t4,
        ]
    }

    /// Number of evaluations that needed clamping so far.
    pub fn clamp_count(&self) -> u64 {
        self.clamp_events.load(Ordering::Relaxed)
    }

    fn active(x: f64) -> [bool; 4] {
        Self::raw_rates(x).map(|b| b > 0.0)
    }
}

impl Sde for SchloglModel {
    fn state_dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        let [b1, b2, b3, b4] = self.rates(x[0]);
        out[0] = b1 - b2 + b3 + self.b4_sign * b4;
    }

    fn sigma_mul(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        let [b1, b2, b3, b4] = self.rates(x[0]);
        out[0] = (b1 + b2 + b3 + b4).sqrt() * z[0];
    }

    fn sigma_t_mul(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        self.sigma_mul(x, v, out);
    }

    fn diffusion(&self, x: &[f64]) -> DMatrix<f64> {
        let [b1, b2, b3, b4] = self.rates(x[0]);
        DMatrix::from_element(1, 1, (b1 + b2 + b3 + b4).sqrt())
    }

    fn div_drift(&self, x: &[f64]) -> f64 {
        let act = Self::active(x[0]);
        let der = Self::rate_derivs(x[0]);
        let term = |i: usize| if act[i] { der[i] } else { 0.0 };
        term(0) - term(1) + term(2) + self.b4_sign * term(3)
    }

    fn grad_div_a_into(&self, x: &[f64], out: &mut [f64]) {
        let act = Self::active(x[0]);
        let der = Self::rate_derivs(x[0]);
        out[0] = (0..4).map(|i| if act[i] { der[i] } else { 0.0 }).sum();
    }

    fn lap_a(&self, x: &[f64]) -> f64 {
        let act = Self::active(x[0]);
        let [t1, t2, _, _] = SCHLOGL_THETA;
        let b1dd = if act[0] { t1 * SCHLOGL_A } else { 0.0 };
        let b2dd = if act[1] { t2 * (x[0] - 1.0) } else { 0.0 };
        b1dd + b2dd
    }

    fn jac_drift(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.div_drift(x))
    }
}

/// Schlogl model: `h(x) = log(1 + x)`, `R = 0.5`, bimodal `pi_0`, and a wider
/// training law `q_0` matching the spread of early trajectories.
///
/// `b4_sign` selects the sign of the `b4` drift contribution. The default +1
/// follows the drift as a sum of all four rates; -1 gives the variant where
/// the fourth channel removes mass.
pub fn schlogl_model(b4_sign: f64) -> Result<ModelBundle> {
    if b4_sign != 1.0 && b4_sign != -1.0 {
        return Err(Error::model("b4_sign must be +1 or -1"));
    }
    let comp = |m: f64, s: f64| {
        (
            0.5,
            DVector::from_element(1, m),
            DMatrix::from_element(1, 1, s * s),
        )
    };
    let init = InitialDistribution::mixture(vec![comp(150.0, 10.0), comp(350.0, 10.0)])?;
    let aux_init = InitialDistribution::mixture(vec![comp(150.0, 25.0), comp(375.0, 60.0)])?;
    Ok(ModelBundle {
        name: "schlogl".to_string(),
        sde: Arc::new(SchloglModel::new(b4_sign)),
        obs: ObservationModel::new(1, 1, ObsMap::Log1p, DMatrix::from_element(1, 1, 0.5))?,
        init,
        aux_init,
        sidecar: None,
    })
}

// ---------------------------------------------------------------------------
// Stochastic Lorenz-96
// ---------------------------------------------------------------------------

/// Cyclic Lorenz-96 drift `mu(x)_i = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F`
/// with additive noise `sigma I`.
pub struct Lorenz96Model {
    dim: usize,
    forcing: f64,
    sigma: f64,
}

impl Lorenz96Model {
    pub fn new(dim: usize, forcing: f64, sigma: f64) -> Result<Self> {
        if dim < 4 {
            return Err(Error::model("Lorenz-96 needs dim >= 4"));
        }
        Ok(Lorenz96Model {
            dim,
            forcing,
            sigma,
        })
    }
}

impl Sde for Lorenz96Model {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn noise_dim(&self) -> usize {
        self.dim
    }

    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let ip1 = (i + 1) % d;
            let im1 = (i + d - 1) % d;
            let im2 = (i + d - 2) % d;
            out[i] = (x[ip1] - x[im2]) * x[im1] - x[i] + self.forcing;
        }
    }

    fn sigma_mul(&self, _x: &[f64], z: &[f64], out: &mut [f64]) {
        copy_scaled(z, self.sigma, out);
    }

    fn sigma_t_mul(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
        copy_scaled(v, self.sigma, out);
    }

    fn diffusion(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim) * self.sigma
    }

    fn div_drift(&self, _x: &[f64]) -> f64 {
        // neighbour couplings never touch the diagonal for d >= 4
        -(self.dim as f64)
    }

    fn grad_div_a_into(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn lap_a(&self, _x: &[f64]) -> f64 {
        0.0
    }

    fn jac_drift(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        let mut jac = DMatrix::zeros(d, d);
        for i in 0..d {
            let ip1 = (i + 1) % d;
            let im1 = (i + d - 1) % d;
            let im2 = (i + d - 2) % d;
            jac[(i, ip1)] += x[im1];
            jac[(i, im2)] -= x[im1];
            jac[(i, im1)] += x[ip1] - x[im2];
            jac[(i, i)] -= 1.0;
        }
        jac
    }
}

/// Lorenz-96 with every `stride`-th coordinate observed (`stride = d / d'`),
/// `R = 2I`, and `pi_0 = N((F, ..., F), I)`.
pub fn lorenz96_model(dim: usize, obs_dim: usize, forcing: f64, sigma: f64) -> Result<ModelBundle> {
    let model = Lorenz96Model::new(dim, forcing, sigma)?;
    if obs_dim == 0 || dim % obs_dim != 0 {
        return Err(Error::model(format!(
            "observation stride must be integral: d = {dim}, d' = {obs_dim}"
        )));
    }
    let stride = dim / obs_dim;
    let obs = ObservationModel::new(
        dim,
        obs_dim,
        ObsMap::Stride { stride },
        DMatrix::identity(obs_dim, obs_dim) * 2.0,
    )?;
    let init = InitialDistribution::gaussian(
        DVector::from_element(dim, forcing),
        DMatrix::identity(dim, dim),
    )?;
    Ok(ModelBundle {
        name: format!("l96_{dim}d"),
        sde: Arc::new(model),
        obs,
        init: init.clone(),
        aux_init: init,
        sidecar: None,
    })
}
