//! Classical reference and baseline filters: exact Kalman filter for
//! linear-Gaussian models, continuous-discrete EKF, stochastic (perturbed
//! observations) EnKF, and the bootstrap particle filter.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{EventKind, EventLog};
use crate::models::{InitialDistribution, ModelBundle, ObservationModel, Sde, LN_2PI};
use crate::sim::EmStepper;
use crate::stats::{logsumexp, sample_moments, weighted_moments};

/// Gaussian filtering state `(m_k, P_k)`.
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        GaussianBelief { mean, cov }
    }

    pub fn from_init(init: &InitialDistribution) -> Result<Self> {
        let mut comps = init.components();
        let first = comps
            .next()
            .ok_or_else(|| Error::Filter("empty initial distribution".to_string()))?;
        if comps.next().is_some() {
            // moment-match the mixture
            let mut mean = DVector::zeros(init.dim());
            let mut second = DMatrix::zeros(init.dim(), init.dim());
            for (w, m, c) in init.components() {
                mean += w * m;
                second += w * (c + m * m.transpose());
            }
            let cov = second - &mean * mean.transpose();
            return Ok(GaussianBelief::new(mean, cov));
        }
        Ok(GaussianBelief::new(first.1.clone(), first.2.clone()))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        let chol = match Cholesky::new(self.cov.clone()) {
            Some(c) => c,
            None => return f64::NEG_INFINITY,
        };
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let diff = DVector::from_column_slice(x) - &self.mean;
        let sol = chol.solve(&diff);
        -0.5 * (self.dim() as f64) * LN_2PI - 0.5 * log_det - 0.5 * diff.dot(&sol)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let chol = Cholesky::new(symmetrize(&self.cov))
            .expect("belief covariance must be positive definite to sample");
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + chol.l_dirty().lower_triangle() * z
    }
}

fn symmetrize(p: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (p + p.transpose())
}

/// Constant matrices of a linear-Gaussian state-space model.
#[derive(Debug, Clone)]
pub struct LinearStateSpace {
    /// Drift matrix of `dS = A S dt + sigma dB`.
    pub a: DMatrix<f64>,
    /// Process noise `Q = sigma sigma^T`.
    pub q: DMatrix<f64>,
    /// Observation matrix.
    pub h: DMatrix<f64>,
    /// Observation noise covariance.
    pub r: DMatrix<f64>,
}

impl LinearStateSpace {
    /// Extract the linear model; errors when drift or observation map is
    /// nonlinear.
    pub fn from_bundle(bundle: &ModelBundle) -> Result<Self> {
        let lin = bundle
            .sde
            .linear_part()
            .ok_or_else(|| Error::Filter("model drift is not linear".to_string()))?;
        let h = bundle
            .obs
            .linear_h()
            .ok_or_else(|| Error::Filter("observation map is not linear".to_string()))?;
        Ok(LinearStateSpace {
            q: &lin.sigma * lin.sigma.transpose(),
            a: lin.a,
            h,
            r: bundle.obs.r.clone(),
        })
    }
}

/// Fixed-step RK4 integration of coupled mean/covariance ODEs.
fn rk4_moments(
    deriv: impl Fn(&DVector<f64>, &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>),
    mut m: DVector<f64>,
    mut p: DMatrix<f64>,
    dt: f64,
    substeps: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let h = dt / substeps as f64;
    for _ in 0..substeps {
        let (k1m, k1p) = deriv(&m, &p);
        let (k2m, k2p) = deriv(&(&m + 0.5 * h * &k1m), &(&p + 0.5 * h * &k1p));
        let (k3m, k3p) = deriv(&(&m + 0.5 * h * &k2m), &(&p + 0.5 * h * &k2p));
        let (k4m, k4p) = deriv(&(&m + h * &k3m), &(&p + h * &k3p));
        m += h / 6.0 * (k1m + 2.0 * k2m + 2.0 * k3m + k4m);
        p += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
    }
    (m, symmetrize(&p))
}

/// Kalman prediction: integrate `m' = A m`, `P' = A P + P A^T + Q` over the
/// observation interval.
pub fn kf_predict(
    belief: &GaussianBelief,
    ss: &LinearStateSpace,
    dt: f64,
    substeps: usize,
) -> GaussianBelief {
    let (m, p) = rk4_moments(
        |m, p| (&ss.a * m, &ss.a * p + p * ss.a.transpose() + &ss.q),
        belief.mean.clone(),
        belief.cov.clone(),
        dt,
        substeps,
    );
    GaussianBelief::new(m, p)
}

/// Exact linear-Gaussian update.
pub fn kf_update(belief: &GaussianBelief, ss: &LinearStateSpace, o: &[f64]) -> Result<GaussianBelief> {
    gaussian_update(belief, &ss.h, &ss.r, o, &(&ss.h * &belief.mean))
}

fn gaussian_update(
    belief: &GaussianBelief,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    o: &[f64],
    predicted_obs: &DVector<f64>,
) -> Result<GaussianBelief> {
    let s = h * &belief.cov * h.transpose() + r;
    let chol = Cholesky::new(symmetrize(&s))
        .ok_or_else(|| Error::Filter("singular innovation covariance".to_string()))?;
    // K = P H^T S^{-1}
    let pht = &belief.cov * h.transpose();
    let k = chol.solve(&pht.transpose()).transpose();
    let innovation = DVector::from_column_slice(o) - predicted_obs;
    let mean = &belief.mean + &k * innovation;
    let eye = DMatrix::<f64>::identity(belief.dim(), belief.dim());
    let cov = symmetrize(&((&eye - &k * h) * &belief.cov));
    Ok(GaussianBelief::new(mean, cov))
}

/// One Kalman filter cycle over `[t_{k-1}, t_k]` followed by the update with
/// `o_k`.
pub fn kf_step(
    belief: &GaussianBelief,
    ss: &LinearStateSpace,
    dt: f64,
    substeps: usize,
    o: &[f64],
) -> Result<GaussianBelief> {
    let pred = kf_predict(belief, ss, dt, substeps);
    kf_update(&pred, ss, o)
}

/// EKF prediction: moment ODEs with the drift Jacobian evaluated along the
/// mean, `m' = mu(m)`, `P' = A_t P + P A_t^T + sigma(m) sigma(m)^T`.
pub fn ekf_predict(
    belief: &GaussianBelief,
    sde: &dyn Sde,
    dt: f64,
    substeps: usize,
) -> GaussianBelief {
    let (m, p) = rk4_moments(
        |m, p| {
            let a_t = sde.jac_drift(m.as_slice());
            let sig = sde.diffusion(m.as_slice());
            (
                sde.drift(m.as_slice()),
                &a_t * p + p * a_t.transpose() + &sig * sig.transpose(),
            )
        },
        belief.mean.clone(),
        belief.cov.clone(),
        dt,
        substeps,
    );
    GaussianBelief::new(m, p)
}

/// EKF update with the observation Jacobian at the predicted mean.
pub fn ekf_update(
    belief: &GaussianBelief,
    obs_model: &ObservationModel,
    o: &[f64],
) -> Result<GaussianBelief> {
    let h = obs_model.jacobian_h(belief.mean.as_slice());
    let predicted = obs_model.h(belief.mean.as_slice());
    gaussian_update(belief, &h, &obs_model.r, o, &predicted)
}

/// One continuous-discrete EKF cycle.
pub fn ekf_step(
    belief: &GaussianBelief,
    sde: &dyn Sde,
    obs_model: &ObservationModel,
    dt: f64,
    substeps: usize,
    o: &[f64],
) -> Result<GaussianBelief> {
    let pred = ekf_predict(belief, sde, dt, substeps);
    ekf_update(&pred, obs_model, o)
}

/// Equally weighted ensemble, stored flat (`M x d`).
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub dim: usize,
    pub members: Vec<f64>,
}

impl Ensemble {
    pub fn from_init<R: Rng + ?Sized>(init: &InitialDistribution, m: usize, rng: &mut R) -> Self {
        let dim = init.dim();
        let mut members = Vec::with_capacity(m * dim);
        for _ in 0..m {
            members.extend_from_slice(init.sample(rng).as_slice());
        }
        Ensemble { dim, members }
    }

    pub fn len(&self) -> usize {
        self.members.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member(&self, i: usize) -> &[f64] {
        &self.members[i * self.dim..(i + 1) * self.dim]
    }
}

/// Unweighted sample mean and covariance (`1/(M-1)`).
pub fn ensemble_moments(ens: &Ensemble) -> (DVector<f64>, DMatrix<f64>) {
    sample_moments(&ens.members, ens.dim)
}

/// Kalman gain from forecast states and predicted observations:
/// `K = P^{xy} (P^{yy})^{-1}` with `1/(M-1)` sample covariances. Singular
/// `P^{yy}` is repaired by escalating jitter (1e-10, 1e-8, 1e-6) with a
/// logged event; if everything fails the gain is zero (no update).
pub fn ensemble_gain(
    xs: &[f64],
    dim_x: usize,
    ys: &[f64],
    dim_y: usize,
    events: &mut EventLog,
) -> DMatrix<f64> {
    let m = xs.len() / dim_x;
    debug_assert_eq!(ys.len() / dim_y, m);
    let (x_mean, _) = sample_moments(xs, dim_x);
    let (y_mean, _) = sample_moments(ys, dim_y);
    let mut p_xy = DMatrix::zeros(dim_x, dim_y);
    let mut p_yy = DMatrix::zeros(dim_y, dim_y);
    for i in 0..m {
        let x = &xs[i * dim_x..(i + 1) * dim_x];
        let y = &ys[i * dim_y..(i + 1) * dim_y];
        for a in 0..dim_x {
            let dx = x[a] - x_mean[a];
            for b in 0..dim_y {
                p_xy[(a, b)] += dx * (y[b] - y_mean[b]);
            }
        }
        for a in 0..dim_y {
            let dy = y[a] - y_mean[a];
            for b in a..dim_y {
                p_yy[(a, b)] += dy * (y[b] - y_mean[b]);
            }
        }
    }
    let scale = 1.0 / (m as f64 - 1.0);
    p_xy *= scale;
    p_yy *= scale;
    for a in 0..dim_y {
        for b in 0..a {
            p_yy[(a, b)] = p_yy[(b, a)];
        }
    }

    let mut jitter = 0.0;
    for attempt in 0..4 {
        let mut s = p_yy.clone();
        if attempt > 0 {
            jitter = [1e-10, 1e-8, 1e-6][attempt - 1];
            for a in 0..dim_y {
                s[(a, a)] += jitter;
            }
        }
        if let Some(chol) = Cholesky::new(s) {
            if attempt > 0 {
                events.record(
                    EventKind::JitterApplied,
                    format!("ensemble gain needed jitter {jitter}"),
                );
            }
            return chol.solve(&p_xy.transpose()).transpose();
        }
    }
    events.record(
        EventKind::JitterApplied,
        "ensemble gain unrecoverable, using zero gain".to_string(),
    );
    DMatrix::zeros(dim_x, dim_y)
}

/// One stochastic EnKF cycle: Euler-Maruyama forecast of every member,
/// perturbed observations, gain, and member shift.
pub fn enkf_step<R: Rng + ?Sized>(
    ens: &Ensemble,
    sde: &dyn Sde,
    obs_model: &ObservationModel,
    dt: f64,
    substeps: usize,
    o: &[f64],
    rng: &mut R,
    events: &mut EventLog,
) -> Result<Ensemble> {
    let m = ens.len();
    if m < 2 {
        return Err(Error::Filter("EnKF needs at least two members".to_string()));
    }
    let dim = ens.dim;
    let dy = obs_model.obs_dim;
    let tau = dt / substeps as f64;
    let mut stepper = EmStepper::new(sde);
    let mut forecast = vec![0.0; m * dim];
    for i in 0..m {
        let x = &mut forecast[i * dim..(i + 1) * dim];
        x.copy_from_slice(ens.member(i));
        for step in 0..substeps {
            if !stepper.step(sde, x, tau, rng) {
                events.record(
                    EventKind::NonFinite,
                    format!("EnKF member {i} diverged at substep {step}"),
                );
                return Err(Error::NonFinite {
                    context: "EnKF forecast".to_string(),
                    step,
                });
            }
        }
    }

    // perturbed observations
    let mut predicted = vec![0.0; m * dy];
    for i in 0..m {
        let noise = obs_model.sample_noise(rng);
        let slot = &mut predicted[i * dy..(i + 1) * dy];
        obs_model.h_into(&forecast[i * dim..(i + 1) * dim], slot);
        for (s, n) in slot.iter_mut().zip(noise.iter()) {
            *s += n;
        }
    }

    let gain = ensemble_gain(&forecast, dim, &predicted, dy, events);

    let mut updated = forecast;
    let mut innovation = vec![0.0; dy];
    for i in 0..m {
        for b in 0..dy {
            innovation[b] = o[b] - predicted[i * dy + b];
        }
        let x = &mut updated[i * dim..(i + 1) * dim];
        for a in 0..dim {
            let mut acc = 0.0;
            for b in 0..dy {
                acc += gain[(a, b)] * innovation[b];
            }
            x[a] += acc;
        }
    }
    Ok(Ensemble {
        dim,
        members: updated,
    })
}

/// Weighted particle system, particles stored flat (`M x d`), weights in the
/// log domain. After normalization `logsumexp(log_weights) = 0`.
#[derive(Debug, Clone)]
pub struct ParticleCloud {
    pub dim: usize,
    pub particles: Vec<f64>,
    pub log_weights: Vec<f64>,
}

impl ParticleCloud {
    pub fn from_init<R: Rng + ?Sized>(init: &InitialDistribution, m: usize, rng: &mut R) -> Self {
        let dim = init.dim();
        let mut particles = Vec::with_capacity(m * dim);
        for _ in 0..m {
            particles.extend_from_slice(init.sample(rng).as_slice());
        }
        ParticleCloud {
            dim,
            particles,
            log_weights: vec![-(m as f64).ln(); m],
        }
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.particles[i * self.dim..(i + 1) * self.dim]
    }

    /// Linear-domain normalized weights.
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|lw| lw.exp()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ResampleScheme {
    #[default]
    Systematic,
    Multinomial,
}

/// Resampling indices from normalized linear weights.
pub fn resample_indices<R: Rng + ?Sized>(
    weights: &[f64],
    scheme: ResampleScheme,
    rng: &mut R,
) -> Vec<usize> {
    let m = weights.len();
    let mut indices = vec![0usize; m];
    match scheme {
        ResampleScheme::Systematic => {
            let u: f64 = rng.random();
            let mut cum = weights[0];
            let mut j = 0usize;
            for (i, slot) in indices.iter_mut().enumerate() {
                let pos = (u + i as f64) / m as f64;
                while cum < pos && j + 1 < m {
                    j += 1;
                    cum += weights[j];
                }
                *slot = j;
            }
        }
        ResampleScheme::Multinomial => {
            let mut cdf = Vec::with_capacity(m);
            let mut cum = 0.0;
            for w in weights {
                cum += w;
                cdf.push(cum);
            }
            for slot in indices.iter_mut() {
                let u: f64 = rng.random::<f64>() * cum;
                *slot = match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
                    Ok(i) => i,
                    Err(i) => i.min(m - 1),
                };
            }
        }
    }
    indices
}

/// Result of one bootstrap PF cycle: the resampled cloud plus the weighted
/// cloud just before resampling (the filtering distribution at `t_k`).
pub struct PfStepResult {
    pub cloud: ParticleCloud,
    pub weighted: ParticleCloud,
}

/// One bootstrap particle filter cycle: propagate by Euler-Maruyama,
/// multiply weights by the likelihood, normalize by logsumexp, resample,
/// reset weights to uniform.
pub fn pf_step<R: Rng + ?Sized>(
    cloud: &ParticleCloud,
    sde: &dyn Sde,
    obs_model: &ObservationModel,
    dt: f64,
    substeps: usize,
    o: &[f64],
    scheme: ResampleScheme,
    rng: &mut R,
    events: &mut EventLog,
) -> Result<PfStepResult> {
    let m = cloud.len();
    let dim = cloud.dim;
    let tau = dt / substeps as f64;
    let mut stepper = EmStepper::new(sde);
    let mut particles = cloud.particles.clone();
    let mut log_weights = cloud.log_weights.clone();
    let mut lost = 0usize;
    for i in 0..m {
        let x = &mut particles[i * dim..(i + 1) * dim];
        let mut ok = true;
        for _ in 0..substeps {
            if !stepper.step(sde, x, tau, rng) {
                ok = false;
                break;
            }
        }
        if ok {
            log_weights[i] += obs_model.log_likelihood(o, x);
        } else {
            // escaped particle: zero weight, kept in place so shapes stay fixed
            log_weights[i] = f64::NEG_INFINITY;
            lost += 1;
        }
    }
    if lost > 0 {
        events.record(
            EventKind::NonFinite,
            format!("{lost} particles diverged during propagation"),
        );
    }

    let lse = logsumexp(&log_weights);
    if !lse.is_finite() {
        events.record(EventKind::WeightCollapse, "all particle weights vanished");
        return Err(Error::WeightCollapse { step: 0 });
    }
    for lw in log_weights.iter_mut() {
        *lw -= lse;
    }
    let weighted = ParticleCloud {
        dim,
        particles: particles.clone(),
        log_weights: log_weights.clone(),
    };

    let weights = weighted.weights();
    let indices = resample_indices(&weights, scheme, rng);
    let mut resampled = vec![0.0; m * dim];
    for (slot, &src) in indices.iter().enumerate() {
        resampled[slot * dim..(slot + 1) * dim]
            .copy_from_slice(&particles[src * dim..(src + 1) * dim]);
    }
    Ok(PfStepResult {
        cloud: ParticleCloud {
            dim,
            particles: resampled,
            log_weights: vec![-(m as f64).ln(); m],
        },
        weighted,
    })
}

/// Weighted sample mean and covariance of a particle cloud.
pub fn cloud_moments(cloud: &ParticleCloud) -> (DVector<f64>, DMatrix<f64>) {
    let weights = cloud.weights();
    weighted_moments(&cloud.particles, cloud.dim, &weights)
}
