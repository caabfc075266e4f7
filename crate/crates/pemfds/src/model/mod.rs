//! Segmented anode plant: orifice flows, reaction and crossover rates,
//! cathode nitrogen fraction, recirculation blower and the assembled
//! nonlinear state-space dynamics.
//!
//! State layout for `n` segments: entry `2k` is the hydrogen partial pressure
//! of segment `k`, `2k + 1` its total pressure, then the supply-manifold pair.

mod params;

pub use params::StackParams;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("singularity: {0}")]
    Singularity(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

pub type StateVector = DVector<f64>;

#[inline]
pub fn h2_index(k: usize) -> usize {
    2 * k
}

#[inline]
pub fn total_index(k: usize) -> usize {
    2 * k + 1
}

/// Human-readable state names, `x1_h2, x1, ..., xsm_h2, xsm`.
pub fn state_names(n: usize) -> Vec<String> {
    let mut v = Vec::with_capacity(2 * n + 2);
    for k in 1..=n {
        v.push(format!("x{k}_h2"));
        v.push(format!("x{k}"));
    }
    v.push("xsm_h2".into());
    v.push("xsm".into());
    v
}

/// Molar rate through an orifice, carrying the upstream species fraction.
pub fn orifice_flow(
    p_up: f64,
    p_down: f64,
    p_species_up: f64,
    p_total_up: f64,
    area: f64,
    molar_mass: f64,
    alpha: f64,
) -> Result<f64, ModelError> {
    let args = [p_up, p_down, p_species_up, p_total_up, area, molar_mass, alpha];
    if args.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Domain("non-finite orifice argument".into()));
    }
    if p_total_up == 0.0 {
        return Err(ModelError::Domain("upstream total pressure is zero".into()));
    }
    Ok(alpha * area / molar_mass * (p_up - p_down) * (p_species_up / p_total_up))
}

/// Hydrogen consumed by the electrochemical reaction (mol/s).
pub fn reaction_rate(current: f64, n_fc: f64, faraday: f64) -> Result<f64, ModelError> {
    if !(current >= 0.0) {
        return Err(ModelError::Domain(format!("segment current must be non-negative, got {current}")));
    }
    Ok(n_fc * current / (2.0 * faraday))
}

/// Membrane permeation (mol/s).
pub fn crossover_rate(t_k: f64, n_fc: f64, k_cr: f64, p_high: f64, p_low: f64) -> Result<f64, ModelError> {
    let r = t_k * n_fc * k_cr * (p_high - p_low);
    if !r.is_finite() {
        return Err(ModelError::Domain("non-finite crossover rate".into()));
    }
    Ok(r)
}

/// Nitrogen mole fraction in the cathode.
pub fn cathode_n2_fraction(current: f64, p: &StackParams) -> Result<f64, ModelError> {
    let base = p.faraday * p.alpha * p.a_or * (p.p_c - p.p_0);
    let den = 4.0 * base - 0.79 * p.n_fc * current * (p.m_n2 - p.m_o2);
    if !den.is_finite() || den.abs() <= 1e-12 * (4.0 * base).abs().max(f64::MIN_POSITIVE) {
        return Err(ModelError::Singularity(format!("cathode N2 fraction denominator {den}")));
    }
    let num = 3.16 * base * (1.0 - p.x_c_h2o)
        + 0.79 * p.n_fc * current * (p.m_o2 + (p.m_h2o - p.m_o2) * p.x_c_h2o);
    let x = num / den;
    if !x.is_finite() {
        return Err(ModelError::Singularity("non-finite cathode N2 fraction".into()));
    }
    Ok(x)
}

/// Blower regression polynomials `(Phi_m, beta, Psi_m)` at Mach number `mach`.
pub fn blower_regression(mach: f64, p: &StackParams) -> (f64, f64, f64) {
    let poly = |c: &[f64]| c.iter().rev().fold(0.0, |acc, &ci| acc * mach + ci);
    (poly(&p.blower_a), poly(&p.blower_b), poly(&p.blower_c))
}

/// Recirculation blower molar flow (mol/s).
pub fn blower_flow(u_bl: f64, t_in: f64, p_ratio: f64, u_tip: f64, p: &StackParams) -> Result<f64, ModelError> {
    if !(0.0..=1.0).contains(&u_bl) {
        return Err(ModelError::Domain(format!("blower command {u_bl} outside [0, 1]")));
    }
    if !(u_tip > 0.0 && t_in > 0.0) {
        return Err(ModelError::Domain("tip speed and inlet temperature must be positive".into()));
    }
    let mach = u_tip / (p.gamma * p.r_air * t_in).sqrt();
    let (phi_m, beta, psi_m) = blower_regression(mach, p);
    if psi_m == 0.0 {
        return Err(ModelError::Singularity("Psi_m vanishes at this Mach number".into()));
    }
    let head = p.c_p * t_in * (p_ratio.powf((p.gamma - 1.0) / p.gamma) - 1.0) / (0.5 * u_tip * u_tip);
    let phi = phi_m * (1.0 - (beta * (head / psi_m - 1.0)).exp());
    let w_mass = phi * p.rho_bl * std::f64::consts::FRAC_PI_4 * p.d_bl * p.d_bl * u_tip;
    let r = u_bl * w_mass / p.m_bl;
    if !r.is_finite() {
        return Err(ModelError::Domain("non-finite blower flow".into()));
    }
    Ok(r)
}

/// Stack current and its per-segment split.
#[derive(Clone, Debug, PartialEq)]
pub struct CurrentSplit {
    pub total: f64,
    pub parts: Vec<f64>,
}

impl CurrentSplit {
    /// Split proportional to segment volume fractions.
    pub fn proportional(total: f64, t: &[f64]) -> Result<Self, ModelError> {
        if !(total >= 0.0) {
            return Err(ModelError::Domain(format!("stack current must be non-negative, got {total}")));
        }
        Ok(CurrentSplit {
            total,
            parts: t.iter().map(|tk| tk * total).collect(),
        })
    }
}

/// Everything that depends on the stack current but not on the state.
#[derive(Clone, Debug)]
pub struct Load {
    pub split: CurrentSplit,
    /// Reaction rate per segment (mol/s).
    pub reaction: Vec<f64>,
    /// Cathode nitrogen partial pressure plus vapour pressure (Pa).
    pub p_cathode: f64,
}

/// Parameter set with derived rate constants.
#[derive(Clone, Debug)]
pub struct Plant {
    pub params: StackParams,
    /// `R T / V` per segment (Pa/mol).
    pub mu: Vec<f64>,
    pub mu_sm: f64,
    /// Orifice conductances `alpha A / M` (mol/(Pa s)).
    pub m_ej: f64,
    pub m_seg: f64,
    pub m_bd: f64,
    /// Hydrogen and nitrogen permeances per segment (mol/(Pa s)).
    pub rho: Vec<f64>,
    pub xi: Vec<f64>,
    /// Blower molar flow at full command (mol/s).
    pub w_bl: f64,
}

impl Plant {
    pub fn new(params: StackParams) -> Result<Self, ModelError> {
        params.validate()?;
        let p = &params;
        let mu = p.t.iter().map(|tk| p.r_gas * p.t_a / (tk * p.v_a)).collect();
        let rho = p.t.iter().map(|tk| tk * p.n_fc * p.k_cr_h2).collect();
        let xi = p.t.iter().map(|tk| tk * p.n_fc * p.k_cr_n2).collect();
        let w_bl = blower_flow(1.0, p.t_bl_in, p.p_ratio_bl, p.tip_speed(), p)?;
        Ok(Plant {
            mu,
            mu_sm: p.r_gas * p.t_sm / p.v_sm,
            m_ej: p.alpha * p.a_ai / p.m_ej,
            m_seg: p.alpha * p.a_ai / p.m_seg,
            m_bd: p.alpha * p.a_bd * p.bleed_duty / p.m_bd,
            rho,
            xi,
            w_bl,
            params,
        })
    }

    pub fn n(&self) -> usize {
        self.params.n_seg
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn load(&self, current: f64) -> Result<Load, ModelError> {
        let p = &self.params;
        let split = CurrentSplit::proportional(current, &p.t)?;
        let reaction = split
            .parts
            .iter()
            .map(|&ik| reaction_rate(ik, p.n_fc, p.faraday))
            .collect::<Result<Vec<_>, _>>()?;
        let x_cn2 = cathode_n2_fraction(current, p)?;
        Ok(Load {
            split,
            reaction,
            p_cathode: x_cn2 * (p.p_c - p.p_sat) + p.p_sat,
        })
    }

    /// Check the total pressures used as divisors.
    pub fn check_state(&self, x: &[f64]) -> Result<(), ModelError> {
        let names = state_names(self.n());
        for (i, v) in x.iter().enumerate() {
            if !v.is_finite() {
                return Err(ModelError::Domain(format!("{} is not finite", names[i])));
            }
            if i % 2 == 1 && *v == 0.0 {
                return Err(ModelError::Singularity(format!("{} is zero", names[i])));
            }
        }
        Ok(())
    }

    /// Right-hand side assembled from the physical flows.
    pub fn dynamics_generic<S: Scalar>(&self, x: &[S], u: [S; 2], load: &Load) -> Vec<S> {
        let n = self.n();
        let p = &self.params;
        let zero = S::cst(0.0);
        let mut dx = vec![zero; 2 * n + 2];
        let (xsm_h2, xsm) = (x[2 * n], x[2 * n + 1]);
        let blower = u[0].scale(self.w_bl);
        let (xn_h2, xn) = (x[2 * n - 2], x[2 * n - 1]);
        for k in 0..n {
            let (xh, xt) = (x[2 * k], x[2 * k + 1]);
            let (up_h, up_t, m_in) = if k == 0 {
                (xsm_h2, xsm, self.m_ej)
            } else {
                (x[2 * k - 2], x[2 * k - 1], self.m_seg)
            };
            let q_in = (up_t - xt).scale(m_in);
            let q_in_h2 = q_in * up_h / up_t;
            let q_out = if k + 1 < n {
                (xt - x[2 * k + 3]).scale(self.m_seg)
            } else {
                (xt - S::cst(p.p_0)).scale(self.m_bd)
            };
            let q_out_h2 = q_out * xh / xt;
            let rxn = S::cst(load.reaction[k]);
            let cross_h2 = xh.scale(self.rho[k]);
            let cross_n2 = (S::cst(load.p_cathode) - xt + xh).scale(self.xi[k]);
            let mut dh = q_in_h2 - q_out_h2 - rxn - cross_h2;
            let mut dt = q_in - q_out - rxn - cross_h2 + cross_n2;
            if k + 1 == n {
                dh = dh - blower * xh / xt;
                dt = dt - blower;
            }
            dx[2 * k] = dh.scale(self.mu[k]);
            dx[2 * k + 1] = dt.scale(self.mu[k]);
        }
        let q_ej = (xsm - x[1]).scale(self.m_ej);
        let tank = u[1].scale(p.eta_ht_m);
        dx[2 * n] = (blower * xn_h2 / xn - q_ej * xsm_h2 / xsm + tank).scale(self.mu_sm);
        dx[2 * n + 1] = (blower - q_ej + tank).scale(self.mu_sm);
        dx
    }

    pub fn dynamics(&self, x: &StateVector, u: [f64; 2], load: &Load) -> Result<StateVector, ModelError> {
        self.check_state(x.as_slice())?;
        Ok(self.dynamics_unchecked(x.as_slice(), u, load))
    }

    #[inline]
    pub fn dynamics_unchecked(&self, x: &[f64], u: [f64; 2], load: &Load) -> StateVector {
        DVector::from_vec(self.dynamics_generic(x, u, load))
    }

    /// Auxiliary coefficient matrix: `dx/dt = A(x) x + G(x) u + zeta`.
    pub fn aux_coefficients(&self, x: &StateVector, load: &Load) -> Result<AuxCoeffs, ModelError> {
        self.check_state(x.as_slice())?;
        let n = self.n();
        let d = self.dim();
        let p = &self.params;
        let mut a = DMatrix::zeros(d, d);
        let sm = 2 * n + 1;
        for k in 0..n {
            let (h, t) = (2 * k, 2 * k + 1);
            let mu = self.mu[k];
            let (up_h, up_t, m_in) = if k == 0 {
                (2 * n, sm, self.m_ej)
            } else {
                (2 * k - 2, 2 * k - 1, self.m_seg)
            };
            a[(h, up_h)] += mu * m_in * (1.0 - x[t] / x[up_t]);
            let m_out = if k + 1 < n {
                a[(h, h)] -= mu * self.rho[k] + mu * self.m_seg * (1.0 - x[t + 2] / x[t]);
                a[(t, t + 2)] += mu * self.m_seg;
                self.m_seg
            } else {
                a[(h, h)] -= mu * (self.m_bd * (1.0 - p.p_0 / x[t]) + self.rho[k]);
                self.m_bd
            };
            a[(t, h)] += mu * (self.xi[k] - self.rho[k]);
            a[(t, t)] -= mu * (m_in + self.xi[k] + m_out);
            a[(t, up_t)] += mu * m_in;
        }
        a[(2 * n, 2 * n)] = -self.mu_sm * self.m_ej * (1.0 - x[1] / x[sm]);
        a[(sm, 1)] = self.mu_sm * self.m_ej;
        a[(sm, sm)] = -self.mu_sm * self.m_ej;
        Ok(AuxCoeffs {
            a,
            zeta: self.disturbance(load),
        })
    }

    /// Input map; the blower term carries the outlet hydrogen fraction.
    pub fn input_map(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let mut g = DMatrix::zeros(self.dim(), 2);
        let frac = x[2 * n - 2] / x[2 * n - 1];
        let mu_n = self.mu[n - 1];
        g[(2 * n - 2, 0)] = -mu_n * self.w_bl * frac;
        g[(2 * n - 1, 0)] = -mu_n * self.w_bl;
        g[(2 * n, 0)] = self.mu_sm * self.w_bl * frac;
        g[(2 * n + 1, 0)] = self.mu_sm * self.w_bl;
        g[(2 * n, 1)] = self.mu_sm * self.params.eta_ht_m;
        g[(2 * n + 1, 1)] = self.mu_sm * self.params.eta_ht_m;
        g
    }

    /// Exogenous terms: reaction sinks, nitrogen crossover source and bleed
    /// back-pressure.
    pub fn disturbance(&self, load: &Load) -> StateVector {
        let n = self.n();
        let mut z = DVector::zeros(self.dim());
        for k in 0..n {
            let r = -self.mu[k] * load.reaction[k];
            z[2 * k] = r;
            z[2 * k + 1] = r + self.mu[k] * self.xi[k] * load.p_cathode;
        }
        z[2 * n - 1] += self.mu[n - 1] * self.m_bd * self.params.p_0;
        z
    }

    /// Net convective molar inflow of each segment and of the manifold
    /// (total gas, hydrogen), including blower, tank and bleed.
    pub fn boundary_flows(&self, x: &[f64], u: [f64; 2]) -> Vec<(f64, f64)> {
        let n = self.n();
        let p = &self.params;
        let mut out = Vec::with_capacity(n + 1);
        let blower = u[0] * self.w_bl;
        for k in 0..n {
            let (xh, xt) = (x[2 * k], x[2 * k + 1]);
            let (up_h, up_t, m_in) = if k == 0 {
                (x[2 * n], x[2 * n + 1], self.m_ej)
            } else {
                (x[2 * k - 2], x[2 * k - 1], self.m_seg)
            };
            let q_in = m_in * (up_t - xt);
            let q_out = if k + 1 < n {
                self.m_seg * (xt - x[2 * k + 3])
            } else {
                self.m_bd * (xt - p.p_0)
            };
            let mut tot = q_in - q_out;
            let mut h2 = q_in * up_h / up_t - q_out * xh / xt;
            if k + 1 == n {
                tot -= blower;
                h2 -= blower * xh / xt;
            }
            out.push((tot, h2));
        }
        let q_ej = self.m_ej * (x[2 * n + 1] - x[1]);
        let tank = u[1] * p.eta_ht_m;
        out.push((
            blower + tank - q_ej,
            blower * x[2 * n - 2] / x[2 * n - 1] + tank - q_ej * x[2 * n] / x[2 * n + 1],
        ));
        out
    }

    /// Per-segment accumulation `|inflow - outflow|` of total gas (mol/s),
    /// each side evaluated with the orifice equation.
    pub fn mass_balance_residual(&self, x: &StateVector) -> Result<Vec<f64>, ModelError> {
        let n = self.n();
        let p = &self.params;
        let mut res = Vec::with_capacity(n);
        for k in 0..n {
            let xt = x[2 * k + 1];
            let (up_t, m_mass) = if k == 0 { (x[2 * n + 1], p.m_ej) } else { (x[2 * k - 1], p.m_seg) };
            let inflow = orifice_flow(up_t, xt, up_t, up_t, p.a_ai, m_mass, p.alpha)?;
            let outflow = if k + 1 < n {
                orifice_flow(xt, x[2 * k + 3], xt, xt, p.a_ai, p.m_seg, p.alpha)?
            } else {
                orifice_flow(xt, p.p_0, xt, xt, p.a_bd * p.bleed_duty, p.m_bd, p.alpha)?
            };
            res.push((inflow - outflow).abs());
        }
        Ok(res)
    }

    /// Total gas inventory `sum V P / (R T)` (mol).
    pub fn total_moles(&self, x: &[f64]) -> f64 {
        let n = self.n();
        let p = &self.params;
        let seg: f64 = (0..n).map(|k| p.t[k] * p.v_a * x[2 * k + 1] / (p.r_gas * p.t_a)).sum();
        seg + p.v_sm * x[2 * n + 1] / (p.r_gas * p.t_sm)
    }
}

/// State-dependent coefficients and the disturbance vector.
#[derive(Clone, Debug)]
pub struct AuxCoeffs {
    pub a: DMatrix<f64>,
    pub zeta: StateVector,
}

impl AuxCoeffs {
    /// Coefficient `a_ij` with one-based row and column.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[(i - 1, j - 1)]
    }
}
