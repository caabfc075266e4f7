//! Energy-shaping tracking controller.
//!
//! The added energy combines the logarithmic kernels on the first and `q`-th
//! segment hydrogen entries, the outlet hydrogen term `phi`, and a completion
//! that places the closed-loop energy minimum at the target. The kernel
//! coefficients are frozen at the target.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::model::{AuxCoeffs, Load, ModelError, Plant, StateVector};
use crate::ph_core::{
    assigned_damping, assigned_interconnection, grad_hamiltonian, hamiltonian, min_eig_sym, natural_structure,
    DampingGains, EnergyCoeffs,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerGains {
    pub beta1: f64,
    pub beta2: f64,
    /// Damping injection on the measured outlet and manifold pressures.
    pub k_n1: f64,
    pub k_sm1: f64,
    pub energy: EnergyCoeffs,
    /// One-based index of the middle segment used by the second kernel.
    pub q: usize,
    /// Lower bound imposed on the closed-loop energy curvature at the target.
    pub curvature_margin: f64,
}

impl ControllerGains {
    pub fn defaults(n: usize) -> Self {
        ControllerGains {
            beta1: 1.0,
            beta2: 2.0,
            k_n1: 0.0,
            k_sm1: 0.0,
            energy: EnergyCoeffs::unit(2 * n + 2),
            q: 2,
            curvature_margin: 0.1,
        }
    }

    pub fn validate(&self, n: usize) -> Result<(), ModelError> {
        if !(self.beta1 > 0.0 && self.beta2 > 0.0) {
            return Err(ModelError::InvalidParam("beta1 and beta2 must be positive".into()));
        }
        if self.k_n1 < 0.0 || self.k_sm1 < 0.0 {
            return Err(ModelError::InvalidParam("k_n1 and k_sm1 must be non-negative".into()));
        }
        if self.q < 2 || self.q > n {
            return Err(ModelError::InvalidParam(format!("q must lie in [2, {n}]")));
        }
        if self.energy.k.len() != 2 * n + 2 {
            return Err(ModelError::InvalidParam("energy weight dimension mismatch".into()));
        }
        if !(self.curvature_margin >= 0.0) {
            return Err(ModelError::InvalidParam("curvature_margin must be non-negative".into()));
        }
        Ok(())
    }
}

/// Operating target: outputs, derived full equilibrium and feed-forward input.
#[derive(Clone, Debug, PartialEq)]
pub struct DesiredTrajectory {
    pub x_nd: f64,
    pub x_smd: f64,
    pub x_nd_h2: f64,
    pub y_d_dot: [f64; 2],
    pub x_d: StateVector,
    pub u_d: [f64; 2],
    pub current: f64,
}

/// Solve `f(x, u) = 0` with the outlet and manifold totals pinned to the
/// setpoints. Damped Newton with a finite-difference Jacobian.
pub fn equilibrium(plant: &Plant, load: &Load, x_nd: f64, x_smd: f64) -> Result<DesiredTrajectory, ModelError> {
    let n = plant.n();
    let d = plant.dim();
    let (i_n, i_sm) = (2 * n - 1, 2 * n + 1);
    if !(x_smd > x_nd && x_nd > plant.params.p_0) {
        return Err(ModelError::Domain(format!(
            "setpoints must satisfy x_smd > x_nd > p_0, got x_nd={x_nd}, x_smd={x_smd}"
        )));
    }
    let free: Vec<usize> = (0..d).filter(|&i| i != i_n && i != i_sm).collect();
    let assemble = |z: &DVector<f64>| -> (StateVector, [f64; 2]) {
        let mut x = DVector::zeros(d);
        for (j, &i) in free.iter().enumerate() {
            x[i] = z[j];
        }
        x[i_n] = x_nd;
        x[i_sm] = x_smd;
        (x, [z[d - 2], z[d - 1]])
    };
    let residual = |z: &DVector<f64>| -> Option<DVector<f64>> {
        let (x, u) = assemble(z);
        if x.iter().skip(1).step_by(2).any(|v| *v <= 0.0) {
            return None;
        }
        let f = plant.dynamics_unchecked(x.as_slice(), u, load);
        let scaled: Vec<f64> = f
            .iter()
            .enumerate()
            .map(|(i, v)| v / if i / 2 < n { plant.mu[i / 2] } else { plant.mu_sm })
            .collect();
        Some(DVector::from_vec(scaled))
    };
    let mut z = DVector::zeros(d);
    for k in 0..n {
        let tot = x_smd + (x_nd - x_smd) * (k + 1) as f64 / n as f64;
        z[2 * k] = 0.95 * tot;
        if k + 1 < n {
            z[2 * k + 1] = tot;
        }
    }
    z[2 * n - 1] = 0.95 * x_smd;
    z[d - 2] = 0.3;
    z[d - 1] = 0.3;
    let mut f = residual(&z).ok_or_else(|| ModelError::Domain("infeasible initial guess".into()))?;
    let scale = load.reaction.iter().sum::<f64>().max(1e-6) + plant.m_ej * x_smd;
    for _ in 0..200 {
        let mut jac = DMatrix::zeros(d, d);
        for j in 0..d {
            let h = if j >= d - 2 { 1e-7 } else { 1e-6 * z[j].abs().max(1.0) };
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let (fp, fm) = match (residual(&zp), residual(&zm)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(ModelError::Domain("equilibrium iterate left the feasible region".into())),
            };
            jac.set_column(j, &((fp - fm) / (2.0 * h)));
        }
        let step = jac
            .lu()
            .solve(&(-&f))
            .ok_or_else(|| ModelError::Singularity("singular equilibrium Jacobian".into()))?;
        let f0 = f.norm();
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let zt = &z + &step * lambda;
            if let Some(ft) = residual(&zt) {
                if ft.norm() < f0 * (1.0 - 1e-4 * lambda) || ft.norm() <= 1e-14 * scale {
                    z = zt;
                    f = ft;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        let done = f.norm() <= 1e-13 * scale;
        if done {
            break;
        }
        if !accepted {
            if f.norm() <= 1e-10 * scale {
                break;
            }
            return Err(ModelError::Domain("equilibrium solve stalled".into()));
        }
    }
    if f.norm() > 1e-10 * scale {
        return Err(ModelError::Domain(format!("equilibrium residual {} did not converge", f.norm())));
    }
    let (x_d, u_d) = assemble(&z);
    for k in 0..=n {
        if !(x_d[2 * k] >= 0.0 && x_d[2 * k] <= x_d[2 * k + 1]) {
            return Err(ModelError::Domain("equilibrium hydrogen pressure outside [0, total]".into()));
        }
    }
    if !u_d.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(ModelError::Domain(format!(
            "equilibrium input ({:.4}, {:.4}) outside [0, 1]",
            u_d[0], u_d[1]
        )));
    }
    Ok(DesiredTrajectory {
        x_nd,
        x_smd,
        x_nd_h2: x_d[2 * n - 2],
        y_d_dot: [0.0, 0.0],
        x_d,
        u_d,
        current: load.split.total,
    })
}

/// `phi = beta1/2 x^2 - beta2 x_d (x - x_d)`.
pub fn phi(x: f64, x_d: f64, beta1: f64, beta2: f64) -> f64 {
    0.5 * beta1 * x * x - beta2 * x_d * (x - x_d)
}

pub fn phi_prime(x: f64, x_d: f64, beta1: f64, beta2: f64) -> f64 {
    beta1 * x - beta2 * x_d
}

/// Kernel slope for the first-segment term.
pub fn f1(x_d: &StateVector, aux_d: &AuxCoeffs, zeta_d: &StateVector, k: &EnergyCoeffs) -> Result<f64, ModelError> {
    let n = (x_d.len() - 2) / 2;
    let (a11, a17) = (aux_d.a[(0, 0)], aux_d.a[(0, 2 * n)]);
    if a11 == 0.0 || a17 == 0.0 {
        return Err(ModelError::Domain("a11 or a17 vanishes at the target".into()));
    }
    let b = a17 * x_d[0] + a11 * x_d[2 * n];
    if b == 0.0 {
        return Err(ModelError::Domain("first kernel argument vanishes at the target".into()));
    }
    Ok(-zeta_d[0] * (1.0 + b.abs().ln()) / (a11 * a17) - x_d[2 * n] * k.k[2 * n] / a11)
}

/// Kernel slope for the `q`-th segment term (`q` one-based).
pub fn f2(
    x_d: &StateVector,
    aux_d: &AuxCoeffs,
    zeta_d: &StateVector,
    k: &EnergyCoeffs,
    q: usize,
) -> Result<f64, ModelError> {
    let (iq, ip) = (2 * (q - 1), 2 * (q - 2));
    let (a31, a33) = (aux_d.a[(iq, ip)], aux_d.a[(iq, iq)]);
    if a31 == 0.0 || a33 == 0.0 {
        return Err(ModelError::Domain("a31 or a33 vanishes at the target".into()));
    }
    let c = a31 * x_d[iq] + a33 * x_d[ip];
    if c == 0.0 {
        return Err(ModelError::Domain("second kernel argument vanishes at the target".into()));
    }
    Ok(zeta_d[iq] * (1.0 + c.abs().ln()) / (a31 * a33) + x_d[iq] * k.k[iq] / a31)
}

/// Logarithmic kernel `kappa s ln|s| - f sbar` with `s = w . x`,
/// `sbar = wbar . x`, both supported on two state entries.
#[derive(Clone, Debug, PartialEq)]
struct LogKernel {
    idx: [usize; 2],
    w: [f64; 2],
    wbar: [f64; 2],
    kappa: f64,
    f: f64,
}

impl LogKernel {
    fn arg(&self, x: &StateVector) -> f64 {
        self.w[0] * x[self.idx[0]] + self.w[1] * x[self.idx[1]]
    }

    fn value(&self, x: &StateVector) -> f64 {
        let s = self.arg(x);
        let sbar = self.wbar[0] * x[self.idx[0]] + self.wbar[1] * x[self.idx[1]];
        self.kappa * s * s.abs().ln() - self.f * sbar
    }

    fn add_grad(&self, x: &StateVector, g: &mut StateVector) {
        let l = self.kappa * (1.0 + self.arg(x).abs().ln());
        for i in 0..2 {
            g[self.idx[i]] += l * self.w[i] - self.f * self.wbar[i];
        }
    }

    fn add_hessian(&self, x: &StateVector, h: &mut DMatrix<f64>) {
        let c = self.kappa / self.arg(x);
        for i in 0..2 {
            for j in 0..2 {
                h[(self.idx[i], self.idx[j])] += c * self.w[i] * self.w[j];
            }
        }
    }
}

/// Added energy designed at one operating target.
#[derive(Clone, Debug)]
pub struct ShapedEnergy {
    pub target: DesiredTrajectory,
    pub energy: EnergyCoeffs,
    pub zeta_d: StateVector,
    pub f1: f64,
    pub f2: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    /// Linear completion `r` and isotropic quadratic completion weight.
    pub r: StateVector,
    pub quad: f64,
    offset: f64,
    kernels: Vec<LogKernel>,
    i_nh2: usize,
}

impl ShapedEnergy {
    pub fn design(
        plant: &Plant,
        target: DesiredTrajectory,
        load: &Load,
        gains: &ControllerGains,
    ) -> Result<Self, ModelError> {
        gains.validate(plant.n())?;
        let n = plant.n();
        let x_d = target.x_d.clone();
        let aux_d = plant.aux_coefficients(&x_d, load)?;
        let zeta_d = aux_d.zeta.clone();
        let k = &gains.energy;
        let f1v = f1(&x_d, &aux_d, &zeta_d, k)?;
        let (a11, a17) = (aux_d.a[(0, 0)], aux_d.a[(0, 2 * n)]);
        let mut kernels = vec![LogKernel {
            idx: [0, 2 * n],
            w: [a17, a11],
            wbar: [a17, -a11],
            kappa: zeta_d[0] / (a11 * a17),
            f: f1v,
        }];
        let mut f2v = None;
        if gains.q < n {
            let q = gains.q;
            let v = f2(&x_d, &aux_d, &zeta_d, k, q)?;
            let (iq, ip) = (2 * (q - 1), 2 * (q - 2));
            let (a31, a33) = (aux_d.a[(iq, ip)], aux_d.a[(iq, iq)]);
            kernels.push(LogKernel {
                idx: [iq, ip],
                w: [a31, a33],
                wbar: [a31, -a33],
                kappa: zeta_d[iq] / (a31 * a33),
                f: v,
            });
            f2v = Some(v);
        }
        let mut se = ShapedEnergy {
            energy: k.clone(),
            zeta_d,
            f1: f1v,
            f2: f2v,
            beta1: gains.beta1,
            beta2: gains.beta2,
            r: DVector::zeros(x_d.len()),
            quad: 0.0,
            offset: 0.0,
            kernels,
            i_nh2: 2 * n - 2,
            target,
        };
        se.r = grad_hamiltonian(&x_d, k) + se.kernel_grad(&x_d);
        let curv = DMatrix::from_diagonal(&k.k) + se.kernel_hessian(&x_d);
        se.quad = (gains.curvature_margin - min_eig_sym(&curv)).max(0.0);
        se.offset = -hamiltonian(&x_d, k) - se.kernel_value(&x_d);
        Ok(se)
    }

    pub fn x_d(&self) -> &StateVector {
        &self.target.x_d
    }

    fn kernel_value(&self, x: &StateVector) -> f64 {
        let xd = self.target.x_nd_h2;
        self.kernels.iter().map(|kr| kr.value(x)).sum::<f64>() + phi(x[self.i_nh2], xd, self.beta1, self.beta2)
    }

    fn kernel_grad(&self, x: &StateVector) -> StateVector {
        let mut g = DVector::zeros(x.len());
        for kr in &self.kernels {
            kr.add_grad(x, &mut g);
        }
        g[self.i_nh2] += phi_prime(x[self.i_nh2], self.target.x_nd_h2, self.beta1, self.beta2);
        g
    }

    fn kernel_hessian(&self, x: &StateVector) -> DMatrix<f64> {
        let d = x.len();
        let mut h = DMatrix::zeros(d, d);
        for kr in &self.kernels {
            kr.add_hessian(x, &mut h);
        }
        h[(self.i_nh2, self.i_nh2)] += self.beta1;
        h
    }

    /// Added energy `H_a`.
    pub fn h_a(&self, x: &StateVector) -> f64 {
        let dx = x - self.x_d();
        self.kernel_value(x) - self.r.dot(&dx) + 0.5 * self.quad * dx.norm_squared() + self.offset
    }

    /// `Omega = grad H_a`.
    pub fn omega(&self, x: &StateVector) -> StateVector {
        let dx = x - self.x_d();
        self.kernel_grad(x) - &self.r + dx * self.quad
    }

    pub fn hessian_a(&self, x: &StateVector) -> DMatrix<f64> {
        let d = x.len();
        self.kernel_hessian(x) + DMatrix::identity(d, d) * self.quad
    }

    /// Closed-loop energy `H + H_a`, zero at the target.
    pub fn h_d(&self, x: &StateVector) -> f64 {
        hamiltonian(x, &self.energy) + self.h_a(x)
    }

    pub fn grad_h_d(&self, x: &StateVector) -> StateVector {
        grad_hamiltonian(x, &self.energy) + self.omega(x)
    }
}

/// Initial-condition constraints that keep the closed-loop denominators away
/// from zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GuardFlags(pub [bool; 5]);

impl GuardFlags {
    pub fn all_pass(&self) -> bool {
        self.0.iter().all(|v| *v)
    }

    /// Bit `i` set when guard `i` fails.
    pub fn failure_mask(&self) -> u32 {
        self.0.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| 1u32 << i).sum()
    }
}

pub fn singularity_guard(plant: &Plant, x: &StateVector, target: &DesiredTrajectory, q: usize) -> GuardFlags {
    let n = plant.n();
    let tot = |k: usize| x[2 * k + 1];
    let xsm = x[2 * n + 1];
    let (qi, pi) = (q - 1, q - 2);
    let g1 = xsm > tot(0);
    let g2 = (plant.mu[0] * plant.rho[0] + plant.mu[0] * plant.m_ej) * tot(0) + plant.mu[1] * plant.m_seg * tot(1) > 0.0;
    let g3 = tot(pi) > tot(qi);
    let g4 = plant.mu[qi] * plant.m_seg * tot(n - 1) - (plant.mu[qi] * plant.m_seg + plant.rho[qi]) * tot(n - 2) > 0.0;
    let g5 = x[2 * n - 2] > target.x_nd_h2;
    GuardFlags([g1, g2, g3, g4, g5])
}

#[derive(Clone, Debug)]
pub struct ControlOutput {
    /// Unclamped command.
    pub u: [f64; 2],
    pub omega: StateVector,
    pub h_a: f64,
    pub guards: GuardFlags,
}

/// Minimum-norm left inverse of a two-column input map.
pub fn left_inverse(g: &DMatrix<f64>) -> Result<DMatrix<f64>, ModelError> {
    let gtg = g.transpose() * g;
    let m = Matrix2::new(gtg[(0, 0)], gtg[(0, 1)], gtg[(1, 0)], gtg[(1, 1)]);
    let det = m.determinant();
    if !(det.abs() > 1e-12 * m[(0, 0)] * m[(1, 1)]) {
        return Err(ModelError::Singularity("input map is rank deficient".into()));
    }
    let inv = m.try_inverse().ok_or_else(|| ModelError::Singularity("input map is rank deficient".into()))?;
    let inv = DMatrix::from_row_slice(2, 2, &[inv[(0, 0)], inv[(0, 1)], inv[(1, 0)], inv[(1, 1)]]);
    Ok(inv * g.transpose())
}

/// Bracketed matching term `(J_d - R_d) Omega + (J_a - R_a) grad H - zeta`,
/// with `R_a grad H_d` formed as the product so the assigned damping stays
/// finite at the target.
pub fn matching_term(
    plant: &Plant,
    aux: &AuxCoeffs,
    gains: &ControllerGains,
    target: &DesiredTrajectory,
    x: &StateVector,
    omega: &StateVector,
) -> Result<StateVector, ModelError> {
    let n = plant.n();
    let k = &gains.energy;
    let grad_h = grad_hamiltonian(x, k);
    let grad_hd = &grad_h + omega;
    let (j, r) = natural_structure(&aux.a, k);
    let ja = assigned_interconnection(aux, n);
    let damping = DampingGains {
        k_n1: gains.k_n1,
        k_sm1: gains.k_sm1,
        x_nd: target.x_nd,
        x_smd: target.x_smd,
    };
    let ad = assigned_damping(plant, &damping, k, x, omega)?;
    let mut term = (&j - &r) * omega + ja * grad_hd - &aux.zeta;
    term[2 * n - 1] -= ad.product66;
    term[2 * n + 1] -= ad.product88;
    Ok(term)
}

/// Tracking law evaluated at `x` with measured outputs `y`.
pub fn state_feedback_control(
    plant: &Plant,
    design: &ShapedEnergy,
    gains: &ControllerGains,
    x: &StateVector,
    y: [f64; 2],
    load: &Load,
) -> Result<ControlOutput, ModelError> {
    let aux = plant.aux_coefficients(x, load)?;
    let omega = design.omega(x);
    let term = matching_term(plant, &aux, gains, &design.target, x, &omega)?;
    let gp = left_inverse(&plant.input_map(x.as_slice()))?;
    let v = gp * term;
    let u = [v[0] - gains.k_n1 * y[0], v[1] - gains.k_sm1 * y[1]];
    if !(u[0].is_finite() && u[1].is_finite()) {
        return Err(ModelError::Domain("non-finite control".into()));
    }
    Ok(ControlOutput {
        u,
        h_a: design.h_a(x),
        guards: singularity_guard(plant, x, &design.target, gains.q),
        omega,
    })
}

pub fn clamp_input(u: [f64; 2]) -> [f64; 2] {
    [u[0].clamp(0.0, 1.0), u[1].clamp(0.0, 1.0)]
}

/// Closed-loop energy rate along `xdot`.
pub fn energy_rate(design: &ShapedEnergy, x: &StateVector, xdot: &StateVector) -> f64 {
    design.grad_h_d(x).dot(xdot)
}

/// `V_d = 1/2 e^T e + H_d`.
pub fn lyapunov_vd(design: &ShapedEnergy, x: &StateVector, n: usize) -> f64 {
    let e = Vector2::new(x[2 * n - 1] - design.target.x_nd, x[2 * n + 1] - design.target.x_smd);
    0.5 * e.norm_squared() + design.h_d(x)
}
