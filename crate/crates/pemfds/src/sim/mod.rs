//! Fixed-step closed-loop simulation, scenario schedules, trace recording
//! and metrics.

pub mod integrate;
pub mod metrics;
pub mod trace;

use std::collections::BTreeMap;

use nalgebra::DVector;
use thiserror::Error;

use crate::controller::{
    clamp_input, energy_rate, equilibrium, lyapunov_vd, singularity_guard, state_feedback_control, ControlOutput,
    ControllerGains, ShapedEnergy,
};
use crate::model::{Load, ModelError, Plant, StackParams, StateVector};
use crate::observer::{observer_step, output_feedback_control, ObserverState};
use crate::ph_core::{grad_hamiltonian, hamiltonian, min_eig_sym, natural_structure, segment_ports, sym_norm};
use integrate::{integrate_step, Scheme};
pub use metrics::{metrics, MetricSettings, Metrics};
use trace::{schema, Trace};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("integration fault at t = {t}: {msg}")]
    Integration { t: f64, msg: String },
    #[error(transparent)]
    Trace(#[from] trace::TraceError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    StateFeedback,
    OutputFeedback,
    OpenLoop,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "state_feedback" => Ok(Mode::StateFeedback),
            "output_feedback" => Ok(Mode::OutputFeedback),
            "open_loop" => Ok(Mode::OpenLoop),
            other => Err(format!(
                "unknown mode '{other}' (expected state_feedback, output_feedback or open_loop)"
            )),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::StateFeedback => "state_feedback",
            Mode::OutputFeedback => "output_feedback",
            Mode::OpenLoop => "open_loop",
        })
    }
}

/// Piecewise-constant schedule; each point holds from its time onwards.
#[derive(Clone, Debug, PartialEq)]
pub struct Profile<T: Copy> {
    pub points: Vec<(f64, T)>,
}

impl<T: Copy> Profile<T> {
    pub fn constant(v: T) -> Self {
        Profile { points: vec![(0.0, v)] }
    }

    pub fn new(mut points: Vec<(f64, T)>) -> Result<Self, String> {
        if points.is_empty() {
            return Err("profile has no points".into());
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        if points[0].0 > 0.0 {
            return Err("profile must start at t = 0".into());
        }
        if points.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err("profile has repeated times".into());
        }
        Ok(Profile { points })
    }

    pub fn at(&self, t: f64) -> T {
        let mut v = self.points[0].1;
        for (ti, vi) in &self.points {
            if *ti <= t + 1e-9 {
                v = *vi;
            } else {
                break;
            }
        }
        v
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObserverSettings {
    pub alpha: [f64; 2],
    pub lipschitz: [f64; 2],
    pub cond_cap: f64,
    /// Steps between gain refreshes.
    pub gain_every: usize,
}

impl Default for ObserverSettings {
    fn default() -> Self {
        ObserverSettings {
            alpha: [0.1, 1.0],
            lipschitz: [1e3, 1e3],
            cond_cap: 1e12,
            gain_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub duration: f64,
    pub dt: f64,
    pub scheme: Scheme,
    pub mode: Mode,
    pub params: StackParams,
    pub gains: ControllerGains,
    pub current: Profile<f64>,
    /// `(x_nd, x_smd)` schedule.
    pub setpoint: Profile<(f64, f64)>,
    /// Explicit initial plant state; otherwise the first target scaled by
    /// `1 + initial_offset`.
    pub initial_state: Option<StateVector>,
    pub initial_offset: f64,
    /// Explicit initial estimate; otherwise the initial state scaled by
    /// `1 + estimate_offset`.
    pub initial_estimate: Option<StateVector>,
    pub estimate_offset: f64,
    pub observer: ObserverSettings,
    pub open_loop_u: [f64; 2],
    /// Record one trace row every this many steps (the last step is always kept).
    pub record_every: usize,
    pub seed: u64,
    pub metric_settings: MetricSettings,
}

impl Scenario {
    pub fn nominal(mode: Mode) -> Self {
        let params = StackParams::default();
        let n = params.n_seg;
        Scenario {
            duration: 1000.0,
            dt: 1e-3,
            scheme: Scheme::Rk4,
            mode,
            gains: ControllerGains::defaults(n),
            params,
            current: Profile::new(vec![
                (0.0, 150.0),
                (100.0, 250.0),
                (320.0, 150.0),
                (470.0, 250.0),
                (700.0, 150.0),
                (900.0, 250.0),
            ])
            .expect("static profile"),
            setpoint: Profile::constant((1.2e5, 1.8e5)),
            initial_state: None,
            initial_offset: 0.01,
            initial_estimate: None,
            estimate_offset: 0.02,
            observer: ObserverSettings::default(),
            open_loop_u: [0.0, 0.0],
            record_every: 100,
            seed: 1,
            metric_settings: MetricSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Scenario(m.to_string()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !(self.duration >= self.dt) {
            return bad("duration must be at least dt");
        }
        if self.record_every == 0 {
            return bad("record_every must be at least 1");
        }
        if self.observer.gain_every == 0 {
            return bad("observer gain_every must be at least 1");
        }
        if self.observer.alpha.iter().chain(self.observer.lipschitz.iter()).any(|v| !(*v > 0.0)) {
            return bad("observer alpha and lipschitz values must be positive");
        }
        let d = self.params.dim();
        for (name, v) in [("initial_state", &self.initial_state), ("initial_estimate", &self.initial_estimate)] {
            if let Some(v) = v {
                if v.len() != d {
                    return Err(SimError::Scenario(format!("{name} has {} entries, expected {d}", v.len())));
                }
            }
        }
        self.params.validate()?;
        self.gains.validate(self.params.n_seg)?;
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    /// Times where the current or setpoint changes, including t = 0.
    pub fn step_times(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.current.times().chain(self.setpoint.times()).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }
}

/// Target design for one `(current, x_nd, x_smd)` combination.
#[derive(Clone, Debug)]
pub struct Piece {
    pub load: Load,
    pub design: Option<ShapedEnergy>,
}

/// Designs for every distinct operating point in the schedule.
pub struct Schedule {
    pieces: BTreeMap<[u64; 3], Piece>,
}

impl Schedule {
    pub fn build(plant: &Plant, s: &Scenario) -> Result<Self, SimError> {
        let mut pieces = BTreeMap::new();
        for t in s.step_times() {
            let i = s.current.at(t);
            let (x_nd, x_smd) = s.setpoint.at(t);
            let key = [i.to_bits(), x_nd.to_bits(), x_smd.to_bits()];
            if pieces.contains_key(&key) {
                continue;
            }
            let load = plant.load(i)?;
            let design = if s.mode == Mode::OpenLoop {
                None
            } else {
                let target = equilibrium(plant, &load, x_nd, x_smd).map_err(|e| {
                    SimError::Scenario(format!("no admissible target at I = {i} A, x_nd = {x_nd}, x_smd = {x_smd}: {e}"))
                })?;
                Some(ShapedEnergy::design(plant, target, &load, &s.gains)?)
            };
            pieces.insert(key, Piece { load, design });
        }
        Ok(Schedule { pieces })
    }

    pub fn at(&self, s: &Scenario, t: f64) -> &Piece {
        let i = s.current.at(t);
        let (x_nd, x_smd) = s.setpoint.at(t);
        &self.pieces[&[i.to_bits(), x_nd.to_bits(), x_smd.to_bits()]]
    }

    pub fn designs(&self) -> impl Iterator<Item = &ShapedEnergy> {
        self.pieces.values().filter_map(|p| p.design.as_ref())
    }
}

pub struct RunOutput {
    pub trace: Trace,
    pub schedule: Schedule,
    /// Steps where the control law faulted and the previous input was held.
    pub control_faults: usize,
    /// Largest `|x - x_hat|` on the two outputs over every step after the
    /// estimate skip, recorded or not.
    pub max_est_err: [f64; 2],
}

fn initial_state(plant: &Plant, s: &Scenario, schedule: &Schedule) -> StateVector {
    if let Some(x) = &s.initial_state {
        return x.clone();
    }
    match &schedule.at(s, 0.0).design {
        Some(d) => d.target.x_d.clone() * (1.0 + s.initial_offset),
        None => {
            let n = plant.n();
            let (x_nd, x_smd) = s.setpoint.at(0.0);
            let mut x = DVector::zeros(plant.dim());
            for k in 0..=n {
                let tot = if k == n { x_smd } else { x_smd + (x_nd - x_smd) * (k + 1) as f64 / n as f64 };
                x[2 * k + 1] = tot * (1.0 + s.initial_offset);
                x[2 * k] = 0.9 * x[2 * k + 1];
            }
            x
        }
    }
}

struct RowInputs<'a> {
    t: f64,
    x: &'a StateVector,
    x_hat: &'a StateVector,
    u_raw: [f64; 2],
    u: [f64; 2],
    piece: &'a Piece,
    setpoint: (f64, f64),
    nu: [f64; 2],
    guard_mask: u32,
    fault: bool,
    gain_fault: bool,
}

fn record_row(plant: &Plant, s: &Scenario, r: RowInputs) -> Result<Vec<f64>, ModelError> {
    let n = plant.n();
    let k = &s.gains.energy;
    let load = &r.piece.load;
    let xdot = plant.dynamics(r.x, r.u, load)?;
    let aux = plant.aux_coefficients(r.x, load)?;
    let mut row = Vec::with_capacity(schema(n).len());
    row.extend([r.t, load.split.total, r.setpoint.0, r.setpoint.1]);
    row.extend(r.x.iter());
    row.extend(r.x_hat.iter());
    row.extend(r.u_raw);
    row.extend(r.u);
    row.extend(aux.zeta.iter());
    let h = hamiltonian(r.x, k);
    let (h_d, hdot_d, v_d) = match &r.piece.design {
        Some(d) => (d.h_d(r.x), energy_rate(d, r.x, &xdot), lyapunov_vd(d, r.x, n)),
        None => (f64::NAN, f64::NAN, f64::NAN),
    };
    let hdot_tol = 1e-12 * grad_hamiltonian(r.x, k).norm() * xdot.norm();
    let v_ob = 0.5 * (r.x - r.x_hat).norm_squared();
    row.extend([h, h_d, hdot_d, hdot_tol, v_d, v_ob, r.nu[0], r.nu[1]]);
    let ports = segment_ports(plant, r.x.as_slice(), xdot.as_slice(), r.u, k);
    row.extend(ports.iter().map(|p| p.supply));
    row.extend(ports.iter().map(|p| p.energy_rate));
    let (_, mut rd) = natural_structure(&aux.a, k);
    if let Some(d) = &r.piece.design {
        let damping = crate::ph_core::DampingGains {
            k_n1: s.gains.k_n1,
            k_sm1: s.gains.k_sm1,
            x_nd: d.target.x_nd,
            x_smd: d.target.x_smd,
        };
        let ad = crate::ph_core::assigned_damping(plant, &damping, k, r.x, &d.omega(r.x))?;
        rd[(2 * n - 1, 2 * n - 1)] += ad.k66.unwrap_or(f64::NAN);
        rd[(2 * n + 1, 2 * n + 1)] += ad.k88.unwrap_or(f64::NAN);
    }
    let (min_eig, norm) = if rd.iter().all(|v| v.is_finite()) {
        (min_eig_sym(&rd), sym_norm(&rd))
    } else {
        (f64::NAN, f64::NAN)
    };
    row.extend([
        min_eig,
        norm,
        r.guard_mask as f64,
        r.fault as u8 as f64,
        r.gain_fault as u8 as f64,
        r.x[2 * n - 1] - r.setpoint.0,
        r.x[2 * n + 1] - r.setpoint.1,
        r.x[2 * n - 1] - r.x_hat[2 * n - 1],
        r.x[2 * n + 1] - r.x_hat[2 * n + 1],
    ]);
    Ok(row)
}

/// Run one scenario to completion.
pub fn run_scenario(s: &Scenario) -> Result<RunOutput, SimError> {
    s.validate()?;
    let plant = Plant::new(s.params.clone())?;
    let n = plant.n();
    let schedule = Schedule::build(&plant, s)?;
    let mut x = initial_state(&plant, s, &schedule);
    plant.check_state(x.as_slice())?;
    let y_of = |x: &StateVector| [x[2 * n - 1], x[2 * n + 1]];
    let mut obs = if s.mode == Mode::OutputFeedback {
        let x_hat = s.initial_estimate.clone().unwrap_or_else(|| &x * (1.0 + s.estimate_offset));
        Some(ObserverState::new(
            x_hat,
            y_of(&x),
            s.observer.alpha,
            s.observer.lipschitz,
            s.observer.cond_cap,
        ))
    } else {
        None
    };
    let mut u_hold = match &schedule.at(s, 0.0).design {
        Some(d) => d.target.u_d,
        None => s.open_loop_u,
    };
    let mut trace = Trace::new(schema(n));
    let steps = s.steps();
    let mut control_faults = 0;
    let mut max_est_err = [0.0_f64; 2];
    for i in 0..=steps {
        let t = i as f64 * s.dt;
        let piece = schedule.at(s, t);
        let y = y_of(&x);
        let ctrl: Option<Result<ControlOutput, ModelError>> = match (&piece.design, s.mode) {
            (_, Mode::OpenLoop) | (None, _) => None,
            (Some(d), Mode::StateFeedback) => Some(state_feedback_control(&plant, d, &s.gains, &x, y, &piece.load)),
            (Some(d), Mode::OutputFeedback) => {
                let o = obs.as_ref().expect("observer present in output feedback");
                Some(output_feedback_control(&plant, o, y, d, &s.gains, &piece.load))
            }
        };
        let (u_raw, guard_mask, fault) = match ctrl {
            None => (s.open_loop_u, 0, false),
            Some(Ok(c)) => {
                u_hold = c.u;
                (c.u, c.guards.failure_mask(), false)
            }
            Some(Err(_)) => {
                control_faults += 1;
                let mask = piece
                    .design
                    .as_ref()
                    .map(|d| singularity_guard(&plant, &x, &d.target, s.gains.q).failure_mask())
                    .unwrap_or(0);
                (u_hold, mask, true)
            }
        };
        let u = clamp_input(u_raw);
        if let Some(o) = &obs {
            if t >= s.metric_settings.estimate_skip {
                max_est_err[0] = max_est_err[0].max((x[2 * n - 1] - o.x_hat[2 * n - 1]).abs());
                max_est_err[1] = max_est_err[1].max((x[2 * n + 1] - o.x_hat[2 * n + 1]).abs());
            }
        }
        if i % s.record_every == 0 || i == steps {
            let x_hat = obs.as_ref().map(|o| o.x_hat.clone()).unwrap_or_else(|| x.clone());
            let row = record_row(
                &plant,
                s,
                RowInputs {
                    t,
                    x: &x,
                    x_hat: &x_hat,
                    u_raw,
                    u,
                    piece,
                    setpoint: s.setpoint.at(t),
                    nu: obs.as_ref().map(|o| o.last_nu).unwrap_or([0.0; 2]),
                    guard_mask,
                    fault,
                    gain_fault: obs.as_ref().map(|o| o.gain_fault).unwrap_or(false),
                },
            )
            .map_err(|e| SimError::Integration { t, msg: e.to_string() })?;
            trace.rows.push(row);
        }
        if i == steps {
            break;
        }
        let load = &piece.load;
        let mut f = |v: &StateVector| plant.dynamics_unchecked(v.as_slice(), u, load);
        let next =
            integrate_step(&x, &mut f, s.dt, s.scheme).map_err(|e| SimError::Integration { t, msg: e.to_string() })?;
        if let Some(o) = obs.as_mut() {
            let refresh = i % s.observer.gain_every == 0;
            observer_step(&plant, o, u, y, load, s.dt, s.scheme, refresh)
                .map_err(|e| SimError::Integration { t, msg: format!("observer: {e}") })?;
        }
        plant
            .check_state(next.as_slice())
            .map_err(|e| SimError::Integration { t, msg: e.to_string() })?;
        x = next;
    }
    Ok(RunOutput {
        trace,
        schedule,
        control_faults,
        max_est_err,
    })
}
