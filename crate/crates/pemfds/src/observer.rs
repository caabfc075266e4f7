//! High-order sliding-mode observer driven by the two measured pressures.

use nalgebra::{DMatrix, DVector};

use crate::controller::{state_feedback_control, ControlOutput, ControllerGains, ShapedEnergy};
use crate::model::{Load, ModelError, Plant, StateVector};
use crate::scalar::Jet;
use crate::sim::integrate::{integrate_step, Scheme};

/// Output derivatives up to third order along the flow with frozen input:
/// `out[k] = [d^k x_n / dt^k, d^k x_sm / dt^k]`.
pub fn output_derivatives(plant: &Plant, x: &[f64], u: [f64; 2], load: &Load) -> [[f64; 2]; 4] {
    let n = plant.n();
    let d = x.len();
    let mut series: Vec<Jet<4>> = x.iter().map(|v| Jet::constant(*v)).collect();
    let uj = [Jet::constant(u[0]), Jet::constant(u[1])];
    for k in 0..3 {
        let f = plant.dynamics_generic(&series, uj, load);
        for i in 0..d {
            series[i].0[k + 1] = f[i].0[k] / (k + 1) as f64;
        }
    }
    let (a, b) = (series[2 * n - 1], series[2 * n + 1]);
    let mut out = [[0.0; 2]; 4];
    for (k, row) in out.iter_mut().enumerate() {
        *row = [a.derivative(k), b.derivative(k)];
    }
    out
}

/// Stacked output derivatives `[y1, y2, y1', y2', y1'', y2'', y1''', y2''']`.
pub fn stacked_outputs(plant: &Plant, x: &[f64], u: [f64; 2], load: &Load) -> DVector<f64> {
    let o = output_derivatives(plant, x, u, load);
    DVector::from_iterator(8, o.iter().flat_map(|r| r.iter().cloned()))
}

#[derive(Clone, Debug)]
pub struct ObserverGainReport {
    pub jacobian_stack: DMatrix<f64>,
    /// Condition number over the retained singular values.
    pub condition_number: f64,
    /// Singular values above `RANK_TOL * s_max`.
    pub rank: usize,
    pub l_ob: DMatrix<f64>,
}

fn jacobian_step(v: f64) -> f64 {
    (1e-6 * v.abs()).max(1.0)
}

/// Relative singular-value floor separating observable directions from
/// numerically null ones.
pub const RANK_TOL: f64 = 1e-10;

/// Gain from the inverse of the stacked output-derivative Jacobian; the last
/// two columns of the inverse map a correction onto the third derivatives.
/// The inverse is a pseudo-inverse truncated at `RANK_TOL`, so directions
/// the outputs cannot see (hydrogen partial pressures when both species
/// permeate at the same rate) receive no correction.
pub fn observer_gain(
    plant: &Plant,
    x_hat: &StateVector,
    u: [f64; 2],
    load: &Load,
    cond_cap: f64,
) -> Result<ObserverGainReport, ModelError> {
    let d = x_hat.len();
    let mut jac = DMatrix::zeros(8, d);
    for i in 0..d {
        let h = jacobian_step(x_hat[i]);
        let mut xp = x_hat.clone();
        let mut xm = x_hat.clone();
        xp[i] += h;
        xm[i] -= h;
        let col = (stacked_outputs(plant, xp.as_slice(), u, load) - stacked_outputs(plant, xm.as_slice(), u, load))
            / (2.0 * h);
        jac.set_column(i, &col);
    }
    let svd = jac.clone().svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    let floor = RANK_TOL * smax;
    let rank = sv.iter().filter(|&&s| s > floor).count();
    if rank < 2 {
        return Err(ModelError::Singularity(format!(
            "observability Jacobian has numerical rank {rank}"
        )));
    }
    let smin = sv.iter().copied().filter(|&s| s > floor).fold(f64::INFINITY, f64::min);
    let condition_number = smax / smin;
    if !(condition_number <= cond_cap) {
        return Err(ModelError::Singularity(format!(
            "observability Jacobian condition number {condition_number:.3e} exceeds cap {cond_cap:.3e}"
        )));
    }
    let inv = svd
        .pseudo_inverse(floor)
        .map_err(|e| ModelError::Singularity(format!("observability Jacobian inverse failed: {e}")))?;
    let l_ob = inv.columns(6, 2).into_owned();
    Ok(ObserverGainReport {
        jacobian_stack: jac,
        condition_number,
        rank,
        l_ob,
    })
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Signed power `|v|^p sign(v)`.
#[inline]
fn spow(v: f64, p: f64) -> f64 {
    v.abs().powf(p) * sign(v)
}

/// Third-order robust exact differentiator for one channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Differentiator {
    /// Estimates of the signal and its first three derivatives.
    pub e: [f64; 4],
    pub lipschitz: f64,
}

/// Standard gain sequence for the third-order differentiator.
const LAMBDA: [f64; 4] = [1.1, 1.5, 2.0, 3.0];

impl Differentiator {
    pub fn new(lipschitz: f64) -> Self {
        Differentiator { e: [0.0; 4], lipschitz }
    }

    pub fn with_initial(lipschitz: f64, y0: f64) -> Self {
        Differentiator { e: [y0, 0.0, 0.0, 0.0], lipschitz }
    }

    /// One explicit step driven by the sample `f`.
    pub fn step(&mut self, f: f64, dt: f64) {
        let l = self.lipschitz;
        let [z0, z1, z2, z3] = self.e;
        let v0 = -LAMBDA[3] * l.powf(0.25) * spow(z0 - f, 0.75) + z1;
        let v1 = -LAMBDA[2] * l.powf(1.0 / 3.0) * spow(z1 - v0, 2.0 / 3.0) + z2;
        let v2 = -LAMBDA[1] * l.sqrt() * spow(z2 - v1, 0.5) + z3;
        let v3 = -LAMBDA[0] * l * sign(z3 - v2);
        self.e = [z0 + dt * v0, z1 + dt * v1, z2 + dt * v2, z3 + dt * v3];
    }

    /// Injection `-alpha {e3 + 3 (e2^6 + e1^4 + |e0|^3)^(1/12) sign[e2 +
    /// (e1^4 + |e0|^3)^(1/6) sign(e1 + 0.5 |e0|^(3/4) sign(e0))]}`.
    pub fn injection(&self, alpha: f64) -> f64 {
        injection(self.e, alpha)
    }
}

pub fn injection(e: [f64; 4], alpha: f64) -> f64 {
    let [e0, e1, e2, e3] = e;
    let inner = sign(e1 + 0.5 * e0.abs().powf(0.75) * sign(e0));
    let mid = sign(e2 + (e1.powi(4) + e0.abs().powi(3)).powf(1.0 / 6.0) * inner);
    -alpha * (e3 + 3.0 * (e2.powi(6) + e1.powi(4) + e0.abs().powi(3)).powf(1.0 / 12.0) * mid)
}

/// Advance a differentiator and emit the channel injection.
pub fn differentiator_step(y_err: f64, state: &Differentiator, alpha: f64, dt: f64) -> (f64, Differentiator) {
    let mut s = *state;
    s.step(y_err, dt);
    (s.injection(alpha), s)
}

#[derive(Clone, Debug)]
pub struct ObserverState {
    pub x_hat: StateVector,
    pub diff: [Differentiator; 2],
    pub alpha: [f64; 2],
    pub cond_cap: f64,
    /// Last gain that passed the conditioning check.
    pub l_ob: Option<DMatrix<f64>>,
    pub last_nu: [f64; 2],
    pub gain_fault: bool,
    pub projected: bool,
    pub last_condition: f64,
}

impl ObserverState {
    pub fn new(x_hat: StateVector, y: [f64; 2], alpha: [f64; 2], lipschitz: [f64; 2], cond_cap: f64) -> Self {
        let n = (x_hat.len() - 2) / 2;
        let err = [x_hat[2 * n - 1] - y[0], x_hat[2 * n + 1] - y[1]];
        ObserverState {
            diff: [
                Differentiator::with_initial(lipschitz[0], err[0]),
                Differentiator::with_initial(lipschitz[1], err[1]),
            ],
            x_hat,
            alpha,
            cond_cap,
            l_ob: None,
            last_nu: [0.0; 2],
            gain_fault: false,
            projected: false,
            last_condition: f64::NAN,
        }
    }
}

/// One observer step: update the differentiators on `y_hat - y`, refresh the
/// gain, and integrate the copy of the plant with the injection held.
pub fn observer_step(
    plant: &Plant,
    obs: &mut ObserverState,
    u: [f64; 2],
    y: [f64; 2],
    load: &Load,
    dt: f64,
    scheme: Scheme,
    refresh_gain: bool,
) -> Result<(), ModelError> {
    let n = plant.n();
    let x_hat = obs.x_hat.clone();
    let y_err = [x_hat[2 * n - 1] - y[0], x_hat[2 * n + 1] - y[1]];
    let mut nu = [0.0; 2];
    for c in 0..2 {
        let (v, s) = differentiator_step(y_err[c], &obs.diff[c], obs.alpha[c], dt);
        obs.diff[c] = s;
        nu[c] = v;
    }
    obs.last_nu = nu;
    if refresh_gain && (nu[0] != 0.0 || nu[1] != 0.0 || obs.l_ob.is_none()) {
        match observer_gain(plant, &x_hat, u, load, obs.cond_cap) {
            Ok(rep) => {
                obs.last_condition = rep.condition_number;
                obs.l_ob = Some(rep.l_ob);
                obs.gain_fault = false;
            }
            Err(ModelError::Singularity(_)) => obs.gain_fault = true,
            Err(e) => return Err(e),
        }
    }
    let correction = match &obs.l_ob {
        Some(l) if nu[0] != 0.0 || nu[1] != 0.0 => l * DVector::from_vec(nu.to_vec()),
        _ => DVector::zeros(x_hat.len()),
    };
    let mut f = |x: &StateVector| -> StateVector {
        let mut v = plant.dynamics_unchecked(x.as_slice(), u, load);
        v += &correction;
        v
    };
    let mut next = integrate_step(&x_hat, &mut f, dt, scheme)?;
    obs.projected = project_feasible(&mut next);
    obs.x_hat = next;
    Ok(())
}

/// Clip each hydrogen estimate into `[0, total]`; returns whether anything moved.
pub fn project_feasible(x: &mut StateVector) -> bool {
    let mut moved = false;
    for k in 0..x.len() / 2 {
        let t = x[2 * k + 1];
        let h = x[2 * k];
        let c = h.clamp(0.0, t.max(0.0));
        if c != h {
            x[2 * k] = c;
            moved = true;
        }
    }
    moved
}

/// State-feedback law evaluated on the estimate, with the measured outputs
/// in the damping term.
pub fn output_feedback_control(
    plant: &Plant,
    obs: &ObserverState,
    y: [f64; 2],
    design: &ShapedEnergy,
    gains: &ControllerGains,
    load: &Load,
) -> Result<ControlOutput, ModelError> {
    state_feedback_control(plant, design, gains, &obs.x_hat, y, load)
}

/// Empirical Lipschitz constants from sampled pairs in a box.
#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzReport {
    /// `||pi(x) - pi(x')|| / ||x - x'||`.
    pub rho1: f64,
    /// Same ratio for the output rows of `pi`.
    pub delta_a: f64,
    /// Same ratio for the output rows of the closed-loop energy flow.
    pub delta_d: f64,
}

impl LipschitzReport {
    /// The injection bound `k_l` must exceed `rho1` for the estimation error
    /// energy to decay.
    pub fn tuning_violation(&self, k_l: f64) -> bool {
        k_l <= self.rho1
    }
}

pub fn lipschitz_probe<F>(
    plant: &Plant,
    load: &Load,
    lo: &StateVector,
    hi: &StateVector,
    samples: usize,
    seed: u64,
    closed_loop: F,
) -> Result<LipschitzReport, ModelError>
where
    F: Fn(&StateVector) -> StateVector,
{
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = plant.n();
    let pi = |x: &StateVector| -> Result<StateVector, ModelError> {
        let aux = plant.aux_coefficients(x, load)?;
        Ok(&aux.a * x)
    };
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> StateVector {
        DVector::from_iterator(lo.len(), (0..lo.len()).map(|i| rng.gen_range(lo[i]..=hi[i])))
    };
    let outs = |v: &StateVector| (v[2 * n - 1].powi(2) + v[2 * n + 1].powi(2)).sqrt();
    let mut rep = LipschitzReport { rho1: 0.0, delta_a: 0.0, delta_d: 0.0 };
    for _ in 0..samples {
        let x = draw(&mut rng);
        let xp = draw(&mut rng);
        let dist = (&x - &xp).norm();
        if dist == 0.0 {
            continue;
        }
        let dp = pi(&x)? - pi(&xp)?;
        rep.rho1 = rep.rho1.max(dp.norm() / dist);
        rep.delta_a = rep.delta_a.max(outs(&dp) / dist);
        let dd = closed_loop(&x) - closed_loop(&xp);
        rep.delta_d = rep.delta_d.max(outs(&dd) / dist);
    }
    Ok(rep)
}
