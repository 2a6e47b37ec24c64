//! The continuous generation half: a velocity network, the hybrid
//! deterministic/stochastic sampler, exact Gaussian step log-densities and
//! the closed-form velocity KL.
//!
//! Convention: noise at `t = 1`, data at `t = 0`, `z_t = (1-t) z0 + t eps`
//! and `v = E[eps - z0 | z_t]`. Under it the score of the marginal is
//! `-(z + (1-t) v) / t`, and the stochastic step
//!
//! ```text
//! mu     = z - dt (v - sigma^2/2 * score)
//! z_next = mu + sigma sqrt(dt) eps
//! ```
//!
//! reduces to the Euler step toward data when `sigma = 0`. The mean is affine
//! in `v`, `mu = cz z + cv v`, so the KL between two policies sharing a state
//! is `w_t |v - v'|^2` with `w_t = cv^2 / (2 sigma^2 dt)`.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::gradcore::{self, GradError, Layout, Mlp, ParamVector, Tape, Tensor, Var};
use crate::rng::Rng;

/// Smallest time a schedule visits; the score diverges as `1/t`.
pub const T_MIN: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error("time {0} outside the valid range")]
    Time(f64),
    #[error("step {dt} invalid at time {t}")]
    Step { t: f64, dt: f64 },
    #[error("zero variance")]
    ZeroVariance,
    #[error("KL undefined for a deterministic policy (a = 0)")]
    Deterministic,
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("condition width {got}, expected {expected}")]
    Condition { got: usize, expected: usize },
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, FlowError>;

/// `sigma_t = a sqrt(t / (1 - t))`.
pub fn sigma_t(t: f64, a: f64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(FlowError::Time(t));
    }
    Ok(a * (t / (1.0 - t)).sqrt())
}

pub fn score_from_velocity(z: &[f64], v: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t >= T_MIN && t <= 1.0) {
        return Err(FlowError::Time(t));
    }
    Ok(z.iter().zip(v).map(|(zi, vi)| -(zi + (1.0 - t) * vi) / t).collect())
}

/// Coefficients `(cz, cv)` with `mu = cz z + cv v`.
pub fn mean_coefficients(t: f64, dt: f64, sigma: f64) -> (f64, f64) {
    let s2 = sigma * sigma;
    (1.0 - dt * s2 / (2.0 * t), -dt * (1.0 + s2 * (1.0 - t) / (2.0 * t)))
}

fn check_step(t: f64, dt: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(FlowError::Time(t));
    }
    if !(dt > 0.0 && dt < t) {
        return Err(FlowError::Step { t, dt });
    }
    Ok(())
}

fn step_mean(z: &[f64], v: &[f64], t: f64, dt: f64, sigma: f64) -> Vec<f64> {
    let (cz, cv) = mean_coefficients(t, dt, sigma);
    z.iter().zip(v).map(|(zi, vi)| cz * zi + cv * vi).collect()
}

/// One Euler-Maruyama step with an explicit noise scale.
pub fn sde_step_sigma(z: &[f64], t: f64, dt: f64, v: &[f64], sigma: f64, eps: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_step(t, dt)?;
    let mu = step_mean(z, v, t, dt, sigma);
    let scale = sigma * dt.sqrt();
    let next = mu.iter().zip(eps).map(|(m, e)| m + scale * e).collect();
    Ok((mu, next))
}

/// One Euler-Maruyama step at noise level `a`; returns `(mu, z_next)`.
pub fn sde_step(z: &[f64], t: f64, dt: f64, v: &[f64], a: f64, eps: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let sigma = if a == 0.0 { 0.0 } else { sigma_t(t, a)? };
    sde_step_sigma(z, t, dt, v, sigma, eps)
}

/// `log N(x; mu, sigma^2 dt I)`.
pub fn gaussian_step_logprob(x: &[f64], mu: &[f64], sigma: f64, dt: f64) -> Result<f64> {
    let var = sigma * sigma * dt;
    if !(var > 0.0) {
        return Err(FlowError::ZeroVariance);
    }
    Ok(gradcore::gaussian_logprob(x, mu, var))
}

/// KL weight for an explicit noise scale.
pub fn kl_weight_sigma(sigma: f64, t: f64, dt: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(FlowError::Deterministic);
    }
    check_step(t, dt)?;
    let inner = sigma * (1.0 - t) / (2.0 * t) + 1.0 / sigma;
    Ok(0.5 * dt * inner * inner)
}

/// `w_t = (dt/2) (sigma_t (1-t) / (2t) + 1/sigma_t)^2`.
pub fn kl_weight(t: f64, dt: f64, a: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(FlowError::Deterministic);
    }
    if !(dt > 0.0) {
        return Err(FlowError::Step { t, dt });
    }
    kl_weight_sigma(sigma_t(t, a)?, t, dt)
}

pub fn flow_kl(v_theta: &[f64], v_ref: &[f64], t: f64, dt: f64, a: f64) -> Result<f64> {
    let w = kl_weight(t, dt, a)?;
    Ok(w * v_theta.iter().zip(v_ref).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
}

/// Uniformly spaced times from 1 down to [`T_MIN`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub times: Vec<f64>,
}

impl Schedule {
    pub fn uniform(steps: usize) -> Self {
        let h = (1.0 - T_MIN) / steps as f64;
        let mut times: Vec<f64> = (0..steps).map(|k| 1.0 - k as f64 * h).collect();
        times.push(T_MIN);
        Schedule { times }
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() < 2 {
            return Err(FlowError::Schedule("need at least one step".into()));
        }
        if self.times[0] > 1.0 || *self.times.last().unwrap() < T_MIN {
            return Err(FlowError::Schedule("times must lie in [t_min, 1]".into()));
        }
        if self.times.windows(2).any(|w| w[1] >= w[0]) {
            return Err(FlowError::Schedule("times must strictly decrease".into()));
        }
        Ok(())
    }

    /// Noise scale used on step `k`. At `t = 1` the schedule is unbounded,
    /// so the first step borrows the value at the next grid time.
    pub fn sigma(&self, k: usize, a: f64) -> Result<f64> {
        if a == 0.0 {
            return Ok(0.0);
        }
        let t = self.times[k];
        if t >= 1.0 {
            sigma_t(self.times[k + 1], a)
        } else {
            sigma_t(t, a)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowStepRecord {
    pub t: f64,
    pub dt: f64,
    pub z_t: Vec<f64>,
    pub mean: Vec<f64>,
    pub sigma: f64,
    pub z_next: Vec<f64>,
    pub logprob: Option<f64>,
    pub is_sde: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTrajectory {
    pub condition: Vec<f64>,
    pub steps: Vec<FlowStepRecord>,
    pub z0: Vec<f64>,
}

impl FlowTrajectory {
    pub fn sde_indices(&self) -> Vec<usize> {
        self.steps.iter().enumerate().filter(|(_, s)| s.is_sde).map(|(i, _)| i).collect()
    }

    pub fn is_chain_consistent(&self) -> bool {
        self.steps.windows(2).all(|w| w[0].z_next == w[1].z_t && w[1].t < w[0].t)
            && self.steps.last().is_none_or(|s| s.z_next == self.z0)
    }

    /// Line-delimited JSON dump of the step records.
    pub fn to_jsonl(&self) -> std::result::Result<String, serde_json::Error> {
        let mut s = String::new();
        for rec in &self.steps {
            s.push_str(&serde_json::to_string(rec)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Velocity network `v(z, t, c)`: input `[z | t | condition]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowNet {
    pub dim: usize,
    pub cond_width: usize,
    pub mlp: Mlp,
}

impl FlowNet {
    pub fn register(layout: &mut Layout, dim: usize, cond_width: usize, hidden: usize) -> Self {
        let mlp = Mlp::register(layout, "flow", &[dim + 1 + cond_width, hidden, hidden, dim]);
        FlowNet { dim, cond_width, mlp }
    }

    fn row(&self, z: &[f64], t: f64, cond: &[f64]) -> Vec<f64> {
        let mut r = Vec::with_capacity(self.mlp.input_width());
        r.extend_from_slice(z);
        r.push(t);
        r.extend_from_slice(cond);
        r
    }

    pub fn velocity(&self, params: &ParamVector, z: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>> {
        if cond.len() != self.cond_width {
            return Err(FlowError::Condition { got: cond.len(), expected: self.cond_width });
        }
        Ok(gradcore::mlp_forward(params, &self.row(z, t, cond), &self.mlp)?)
    }

    /// Samples one trajectory from `z_1 ~ N(0, I)`. Steps whose index is in
    /// `sde_window` are stochastic (when `a > 0`); the rest are Euler steps.
    pub fn sample_trajectory(
        &self,
        params: &ParamVector,
        condition: &[f64],
        schedule: &Schedule,
        sde_window: &[usize],
        a: f64,
        rng: &mut Rng,
    ) -> Result<FlowTrajectory> {
        let z1: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_from(params, condition, schedule, sde_window, a, z1, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn sample_from(
        &self,
        params: &ParamVector,
        condition: &[f64],
        schedule: &Schedule,
        sde_window: &[usize],
        a: f64,
        z1: Vec<f64>,
        rng: &mut Rng,
    ) -> Result<FlowTrajectory> {
        schedule.validate()?;
        let mut z = z1;
        let mut steps = Vec::with_capacity(schedule.steps());
        for k in 0..schedule.steps() {
            let t = schedule.times[k];
            let dt = t - schedule.times[k + 1];
            let v = self.velocity(params, &z, t, condition)?;
            let sigma = schedule.sigma(k, a)?;
            let is_sde = sigma > 0.0 && sde_window.contains(&k);
            let rec = if is_sde {
                let eps: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                let (mean, z_next) = sde_step_sigma(&z, t, dt, &v, sigma, &eps)?;
                let logprob = gaussian_step_logprob(&z_next, &mean, sigma, dt)?;
                FlowStepRecord { t, dt, z_t: z, mean, sigma, z_next, logprob: Some(logprob), is_sde }
            } else {
                let (mean, z_next) = sde_step_sigma(&z, t, dt, &v, 0.0, &vec![0.0; self.dim])?;
                FlowStepRecord { t, dt, z_t: z, mean, sigma: 0.0, z_next, logprob: None, is_sde }
            };
            z = rec.z_next.clone();
            steps.push(rec);
        }
        Ok(FlowTrajectory { condition: condition.to_vec(), steps, z0: z })
    }

    /// Deterministic Euler integration from `z1`.
    pub fn integrate(&self, params: &ParamVector, condition: &[f64], schedule: &Schedule, z1: Vec<f64>) -> Result<Vec<f64>> {
        let mut rng = crate::rng::stream(0, &[]);
        Ok(self.sample_from(params, condition, schedule, &[], 0.0, z1, &mut rng)?.z0)
    }

    /// Velocities at the stored states of the listed steps, one row each.
    pub fn step_velocities(&self, params: &ParamVector, traj: &FlowTrajectory, steps: &[usize]) -> Result<Tensor> {
        Ok(self.mlp.forward(params, &self.step_rows(traj, steps))?)
    }

    fn step_rows(&self, traj: &FlowTrajectory, steps: &[usize]) -> Tensor {
        let data: Vec<f64> = steps
            .iter()
            .flat_map(|&k| {
                let s = &traj.steps[k];
                self.row(&s.z_t, s.t, &traj.condition)
            })
            .collect();
        Tensor::new(steps.len(), self.mlp.input_width(), data)
    }

    /// Log-densities of the stored transitions of `steps` under `params`.
    pub fn rescore(&self, params: &ParamVector, traj: &FlowTrajectory, steps: &[usize]) -> Result<Vec<f64>> {
        let v = self.step_velocities(params, traj, steps)?;
        steps
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let s = &traj.steps[k];
                let mu = step_mean(&s.z_t, v.row(i), s.t, s.dt, s.sigma);
                gaussian_step_logprob(&s.z_next, &mu, s.sigma, s.dt)
            })
            .collect()
    }

    /// Taped rescoring over a batch of `(trajectory, step)` pairs. Returns
    /// the column of log-densities and the velocity rows.
    pub fn tape_rescore(&self, tape: &mut Tape, vars: &[Var], items: &[(&FlowTrajectory, usize)]) -> Result<(Var, Var)> {
        let mut data = Vec::with_capacity(items.len() * self.mlp.input_width());
        let mut konst = Vec::with_capacity(items.len() * self.dim);
        let mut cv = Vec::with_capacity(items.len());
        let mut var = Vec::with_capacity(items.len());
        let mut x = Vec::with_capacity(items.len() * self.dim);
        for (traj, k) in items {
            let s = &traj.steps[*k];
            if !(s.sigma > 0.0) {
                return Err(FlowError::ZeroVariance);
            }
            data.extend(self.row(&s.z_t, s.t, &traj.condition));
            let (czk, cvk) = mean_coefficients(s.t, s.dt, s.sigma);
            konst.extend(s.z_t.iter().map(|z| czk * z));
            cv.push(cvk);
            var.push(s.sigma * s.sigma * s.dt);
            x.extend_from_slice(&s.z_next);
        }
        let n = items.len();
        let input = tape.constant(Tensor::new(n, self.mlp.input_width(), data));
        let v = self.mlp.forward_tape(tape, vars, input);
        let scaled = tape.scale_rows(v, cv);
        let mu = tape.add_const(scaled, &Tensor::new(n, self.dim, konst));
        let lp = tape.gaussian_logprob(mu, Tensor::new(n, self.dim, x), var);
        Ok((lp, v))
    }
}

/// One conditional flow-matching regression example with its noise draw.
#[derive(Debug, Clone, PartialEq)]
pub struct CfmSample {
    pub z0: Vec<f64>,
    pub condition: Vec<f64>,
    pub t: f64,
    pub eps: Vec<f64>,
}

impl CfmSample {
    pub fn z_t(&self) -> Vec<f64> {
        self.z0.iter().zip(&self.eps).map(|(z, e)| (1.0 - self.t) * z + self.t * e).collect()
    }

    pub fn target(&self) -> Vec<f64> {
        self.eps.iter().zip(&self.z0).map(|(e, z)| e - z).collect()
    }
}

pub fn draw_cfm_samples(batch: &[(Vec<f64>, Vec<f64>)], rng: &mut Rng) -> Vec<CfmSample> {
    batch
        .iter()
        .map(|(z0, c)| CfmSample {
            z0: z0.clone(),
            condition: c.clone(),
            t: rng.random_range(T_MIN..1.0),
            eps: (0..z0.len()).map(|_| rng.sample(StandardNormal)).collect(),
        })
        .collect()
}

impl FlowNet {
    fn cfm_inputs(&self, samples: &[CfmSample]) -> (Tensor, Tensor) {
        let input: Vec<f64> = samples.iter().flat_map(|s| self.row(&s.z_t(), s.t, &s.condition)).collect();
        let target: Vec<f64> = samples.iter().flat_map(CfmSample::target).collect();
        (
            Tensor::new(samples.len(), self.mlp.input_width(), input),
            Tensor::new(samples.len(), self.dim, target),
        )
    }

    /// Mean over samples of `|v(z_t, t, c) - (eps - z0)|^2`.
    pub fn cfm_loss(&self, params: &ParamVector, samples: &[CfmSample]) -> Result<f64> {
        let (input, target) = self.cfm_inputs(samples);
        let v = self.mlp.forward(params, &input)?;
        let sq: f64 = v.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(sq / samples.len() as f64)
    }

    pub fn tape_cfm_loss(&self, tape: &mut Tape, vars: &[Var], samples: &[CfmSample]) -> Var {
        let (input, target) = self.cfm_inputs(samples);
        let x = tape.constant(input);
        let v = self.mlp.forward_tape(tape, vars, x);
        let tgt = tape.constant(target);
        let diff = tape.sub(v, tgt);
        let sq = tape.square(diff);
        let total = tape.sum(sq);
        tape.scale(total, 1.0 / samples.len() as f64)
    }

    /// Draws noise for `batch` and evaluates [`FlowNet::cfm_loss`].
    pub fn cfm_pretrain_loss(&self, params: &ParamVector, batch: &[(Vec<f64>, Vec<f64>)], rng: &mut Rng) -> Result<f64> {
        self.cfm_loss(params, &draw_cfm_samples(batch, rng))
    }
}
