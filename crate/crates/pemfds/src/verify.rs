//! Randomized structural verification of the plant, its port-Hamiltonian
//! form and the controller design.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::controller::{left_inverse, matching_term};
use crate::model::{Load, ModelError, Plant, StateVector};
use crate::ph_core::{
    assigned_interconnection, check_conditions, fd_step, grad_hamiltonian, hamiltonian, natural_structure,
    skew_residual, symmetry_residual,
};
use crate::sim::{metrics, run_scenario, Mode, Scenario, SimError};

/// Deliberate defects for exercising the failure path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Inject {
    None,
    /// Flip the sign of the lower triangle of `J` before the skew check.
    SkewSign,
    /// Negate the analytic energy gradient before the finite-difference check.
    GradientSign,
}

impl std::str::FromStr for Inject {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Inject::None),
            "skew_sign" => Ok(Inject::SkewSign),
            "gradient_sign" => Ok(Inject::GradientSign),
            other => Err(format!("unknown inject '{other}' (expected none, skew_sign or gradient_sign)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifySettings {
    pub structure_samples: usize,
    pub factorization_samples: usize,
    pub gradient_samples: usize,
    pub tol_skew: f64,
    pub tol_psd: f64,
    pub tol_factorization: f64,
    pub tol_gradient: f64,
    pub tol_conditions: f64,
    pub tol_matching: f64,
    pub min_ordering_fraction: f64,
    /// Simulated time used for trajectory-based checks (s).
    pub trajectory_duration: f64,
    pub inject: Inject,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings {
            structure_samples: 1000,
            factorization_samples: 100,
            gradient_samples: 50,
            tol_skew: 1e-12,
            tol_psd: 1e-9,
            tol_factorization: 1e-9,
            tol_gradient: 1e-6,
            tol_conditions: 1e-6,
            tol_matching: 1e-6,
            min_ordering_fraction: 0.99,
            trajectory_duration: 50.0,
            inject: Inject::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    /// Whether `value` must stay at or below `limit` (otherwise at or above).
    pub upper: bool,
}

impl Check {
    pub fn upper(name: &str, value: f64, limit: f64) -> Self {
        Check { name: name.into(), value, limit, upper: true }
    }

    pub fn lower(name: &str, value: f64, limit: f64) -> Self {
        Check { name: name.into(), value, limit, upper: false }
    }

    pub fn passed(&self) -> bool {
        if self.upper {
            self.value <= self.limit
        } else {
            self.value >= self.limit
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_text(&self) -> String {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{} = {:e} ({} {} {:e}) {}\n",
                    c.name,
                    c.value,
                    if c.upper { "limit" } else { "floor" },
                    if c.upper { "<=" } else { ">=" },
                    c.limit,
                    if c.passed() { "PASS" } else { "FAIL" }
                )
            })
            .collect()
    }
}

/// Random state with segment totals in `[1.05e5, 2.5e5]` Pa and hydrogen
/// fractions in `[0.5, 0.99]`.
pub fn random_state(rng: &mut impl Rng, n: usize) -> StateVector {
    let mut x = DVector::zeros(2 * n + 2);
    for k in 0..=n {
        let tot = rng.gen_range(1.05e5..2.5e5);
        x[2 * k + 1] = tot;
        x[2 * k] = tot * rng.gen_range(0.5..0.99);
    }
    x
}

pub fn random_input(rng: &mut impl Rng) -> [f64; 2] {
    [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]
}

fn rel(a: f64, scale: f64) -> f64 {
    a / scale.max(f64::MIN_POSITIVE)
}

/// Largest relative mismatch between the assembled port-Hamiltonian form and
/// the flow-based right-hand side.
pub fn factorization_error(plant: &Plant, x: &StateVector, u: [f64; 2], load: &Load, k: &crate::ph_core::EnergyCoeffs) -> Result<f64, ModelError> {
    let aux = plant.aux_coefficients(x, load)?;
    let (j, r) = natural_structure(&aux.a, k);
    let flow = (&j - &r) * grad_hamiltonian(x, k);
    let gu = plant.input_map(x.as_slice()) * DVector::from_vec(u.to_vec());
    let f = plant.dynamics(x, u, load)?;
    let scale = flow.norm() + gu.norm() + aux.zeta.norm();
    Ok(rel((&flow + &gu + &aux.zeta - f).norm(), scale))
}

fn fd_gradient(f: impl Fn(&StateVector) -> f64, x: &StateVector) -> StateVector {
    let mut g = DVector::zeros(x.len());
    for i in 0..x.len() {
        let h = fd_step(x[i]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

/// Run every structural check for the scenario's parameters and designs.
pub fn verify(s: &Scenario, v: &VerifySettings) -> Result<VerifyReport, SimError> {
    s.validate()?;
    let plant = Plant::new(s.params.clone())?;
    let n = plant.n();
    let k = &s.gains.energy;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut rep = VerifyReport::default();
    let currents: Vec<f64> = s.current.points.iter().map(|p| p.1).collect();

    let (mut skew_j, mut skew_jd, mut sym_r) = (0.0_f64, 0.0_f64, 0.0_f64);
    for i in 0..v.structure_samples {
        let x = random_state(&mut rng, n);
        let load = plant.load(currents[i % currents.len()])?;
        let aux = plant.aux_coefficients(&x, &load)?;
        let (mut j, r) = natural_structure(&aux.a, k);
        let jd = &j + assigned_interconnection(&aux, n);
        if v.inject == Inject::SkewSign {
            for a in 0..j.nrows() {
                for b in 0..a {
                    j[(a, b)] = -j[(a, b)];
                }
            }
        }
        skew_j = skew_j.max(skew_residual(&j));
        skew_jd = skew_jd.max(skew_residual(&jd));
        sym_r = sym_r.max(symmetry_residual(&r));
    }
    rep.checks.push(Check::upper("skew_j", skew_j, v.tol_skew));
    rep.checks.push(Check::upper("skew_jd", skew_jd, v.tol_skew));
    rep.checks.push(Check::upper("symmetry_r", sym_r, v.tol_skew));

    let mut fact = 0.0_f64;
    for i in 0..v.factorization_samples {
        let x = random_state(&mut rng, n);
        let u = random_input(&mut rng);
        let load = plant.load(currents[i % currents.len()])?;
        fact = fact.max(factorization_error(&plant, &x, u, &load, k)?);
    }
    rep.checks.push(Check::upper("factorization", fact, v.tol_factorization));

    let mut grad_err = 0.0_f64;
    for _ in 0..v.gradient_samples {
        let x = random_state(&mut rng, n);
        let mut g = grad_hamiltonian(&x, k);
        if v.inject == Inject::GradientSign {
            g = -g;
        }
        let fd = fd_gradient(|z| hamiltonian(z, k), &x);
        grad_err = grad_err.max(rel((g - &fd).norm(), fd.norm()));
    }
    rep.checks.push(Check::upper("gradient_h", grad_err, v.tol_gradient));

    let mut sf = s.clone();
    if sf.mode != Mode::StateFeedback {
        sf.mode = Mode::StateFeedback;
    }
    sf.duration = s.duration.min(v.trajectory_duration);
    let run = run_scenario(&sf)?;

    let (mut omega_err, mut integ, mut assign, mut min_eig, mut matching) =
        (0.0_f64, 0.0_f64, 0.0_f64, f64::INFINITY, 0.0_f64);
    for d in run.schedule.designs() {
        let xd = d.x_d().clone();
        for _ in 0..v.gradient_samples {
            let mut x = xd.clone();
            for e in x.iter_mut() {
                *e *= rng.gen_range(0.95..1.05);
            }
            let fd = fd_gradient(|z| d.h_a(z), &x);
            omega_err = omega_err.max(rel((d.omega(&x) - &fd).norm(), fd.norm()));
        }
        let c = check_conditions(&xd, |z| d.omega(z), k);
        integ = integ.max(c.integrability);
        assign = assign.max(c.assignment_rel);
        min_eig = min_eig.min(c.min_eig);
        let load = plant.load(d.target.current)?;
        let aux = plant.aux_coefficients(&xd, &load)?;
        let term = matching_term(&plant, &aux, &s.gains, &d.target, &xd, &d.omega(&xd))?;
        let g = plant.input_map(xd.as_slice());
        let proj = &g * (left_inverse(&g)? * &term);
        matching = matching.max(rel((&term - proj).norm(), term.norm() + aux.zeta.norm()));
    }
    rep.checks.push(Check::upper("gradient_omega", omega_err, v.tol_gradient));
    rep.checks.push(Check::upper("integrability", integ, v.tol_conditions));
    rep.checks.push(Check::upper("assignment", assign, v.tol_conditions));
    rep.checks.push(Check::lower("min_eig_conditions", min_eig, f64::MIN_POSITIVE));
    rep.checks.push(Check::upper("matching_residual", matching, v.tol_matching));

    let m = metrics(&run.trace, &s.metric_settings)?;
    let get = |key: &str| m.get(key).unwrap_or(f64::NAN);
    rep.checks.push(Check::lower("min_eig_rd_rel", get("min_eig_rd_rel"), -v.tol_psd));
    rep.checks.push(Check::upper("singular_rd_samples", get("singular_rd_samples"), 0.0));
    rep.checks.push(Check::lower("min_eig_rd", get("min_eig_rd"), f64::NEG_INFINITY));
    rep.checks.push(Check::lower(
        "passivity_ordering_fraction",
        get("passivity_ordering_fraction"),
        v.min_ordering_fraction,
    ));
    rep.checks.push(Check::upper("passivity_total_violations", get("passivity_total_violations"), 0.0));
    Ok(rep)
}
