//! Port-Hamiltonian form of the plant: energy, interconnection and damping
//! matrices, assigned structure, and numerical checks of the structural
//! properties.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::model::{AuxCoeffs, ModelError, Plant, StateVector};

/// Quadratic energy weights, one per state entry.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyCoeffs {
    pub k: DVector<f64>,
}

impl EnergyCoeffs {
    pub fn unit(dim: usize) -> Self {
        EnergyCoeffs { k: DVector::from_element(dim, 1.0) }
    }

    /// Same weight for every segment's hydrogen entry, every segment's total,
    /// and separate manifold weights.
    pub fn grouped(n: usize, k_h2: f64, k_tot: f64, k_sm_h2: f64, k_sm: f64) -> Result<Self, ModelError> {
        let vals = [k_h2, k_tot, k_sm_h2, k_sm];
        if vals.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(ModelError::InvalidParam("energy weights must be positive".into()));
        }
        let mut k = DVector::zeros(2 * n + 2);
        for s in 0..n {
            k[2 * s] = k_h2;
            k[2 * s + 1] = k_tot;
        }
        k[2 * n] = k_sm_h2;
        k[2 * n + 1] = k_sm;
        Ok(EnergyCoeffs { k })
    }
}

pub fn hamiltonian(x: &StateVector, k: &EnergyCoeffs) -> f64 {
    0.5 * x.iter().zip(k.k.iter()).map(|(xi, ki)| ki * xi * xi).sum::<f64>()
}

pub fn grad_hamiltonian(x: &StateVector, k: &EnergyCoeffs) -> StateVector {
    x.component_mul(&k.k)
}

/// Assigned damping injection on the outlet and manifold totals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DampingGains {
    pub k_n1: f64,
    pub k_sm1: f64,
    pub x_nd: f64,
    pub x_smd: f64,
}

#[derive(Clone, Debug)]
pub struct PHStructure {
    pub j: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub j_a: DMatrix<f64>,
    pub r_a: DMatrix<f64>,
    pub j_d: DMatrix<f64>,
    pub r_d: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

/// Output selection `y = (x_n, x_sm)`.
pub fn output_matrix(n: usize) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(2, 2 * n + 2);
    c[(0, 2 * n - 1)] = 1.0;
    c[(1, 2 * n + 1)] = 1.0;
    c
}

/// Interconnection and damping from the coefficient matrix:
/// `A K^-1 = J - R`.
pub fn natural_structure(a: &DMatrix<f64>, k: &EnergyCoeffs) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut ak = a.clone();
    for (j, kj) in k.k.iter().enumerate() {
        ak.column_mut(j).unscale_mut(*kj);
    }
    let t = ak.transpose();
    ((&ak - &t) * 0.5, (&ak + &t) * -0.5)
}

/// Added interconnection coupling the outlet, manifold hydrogen and manifold
/// total entries.
pub fn assigned_interconnection(aux: &AuxCoeffs, n: usize) -> DMatrix<f64> {
    let d = 2 * n + 2;
    let a76 = aux.a[(2, 0)] / 2.0;
    let a87 = aux.a[(1, 0)] / 2.0;
    let mut ja = DMatrix::zeros(d, d);
    ja[(2 * n - 1, 2 * n)] = -a76;
    ja[(2 * n, 2 * n - 1)] = a76;
    ja[(2 * n, 2 * n + 1)] = -a87;
    ja[(2 * n + 1, 2 * n)] = a87;
    ja
}

/// Gains of the assigned damping on the outlet and manifold totals, and the
/// product of each with the corresponding closed-loop energy gradient.
/// The product stays finite at the target where the gradient vanishes.
pub fn assigned_damping(
    plant: &Plant,
    damping: &DampingGains,
    k: &EnergyCoeffs,
    x: &StateVector,
    omega: &StateVector,
) -> Result<AssignedDamping, ModelError> {
    let n = plant.n();
    let (i_n, i_sm) = (2 * n - 1, 2 * n + 1);
    let g_n = plant.mu[n - 1] * plant.w_bl;
    let g_sm_ht = plant.mu_sm * plant.params.eta_ht_m;
    let num66 = -g_n * damping.k_n1 * damping.x_nd;
    let num88 = g_sm_ht * damping.k_sm1 * damping.x_smd;
    let den66 = omega[i_n] + k.k[i_n] * x[i_n];
    let den88 = omega[i_sm] + k.k[i_sm] * x[i_sm];
    let gain = |num: f64, den: f64, name: &str| -> Result<f64, ModelError> {
        if num == 0.0 {
            Ok(0.0)
        } else if den == 0.0 || !(num / den).is_finite() {
            Err(ModelError::Singularity(format!("assigned damping {name} has a zero denominator")))
        } else {
            Ok(num / den)
        }
    };
    Ok(AssignedDamping {
        k66: gain(num66, den66, "k66"),
        k88: gain(num88, den88, "k88"),
        product66: num66,
        product88: num88,
    })
}

#[derive(Clone, Debug)]
pub struct AssignedDamping {
    pub k66: Result<f64, ModelError>,
    pub k88: Result<f64, ModelError>,
    pub product66: f64,
    pub product88: f64,
}

pub fn build_structure(
    plant: &Plant,
    aux: &AuxCoeffs,
    k: &EnergyCoeffs,
    damping: &DampingGains,
    x: &StateVector,
    omega: &StateVector,
) -> Result<PHStructure, ModelError> {
    let n = plant.n();
    let d = plant.dim();
    let (j, r) = natural_structure(&aux.a, k);
    let j_a = assigned_interconnection(aux, n);
    let ad = assigned_damping(plant, damping, k, x, omega)?;
    let mut r_a = DMatrix::zeros(d, d);
    r_a[(2 * n - 1, 2 * n - 1)] = ad.k66?;
    r_a[(2 * n + 1, 2 * n + 1)] = ad.k88?;
    let j_d = &j + &j_a;
    let r_d = &r + &r_a;
    Ok(PHStructure {
        g: plant.input_map(x.as_slice()),
        c: output_matrix(n),
        j,
        r,
        j_a,
        r_a,
        j_d,
        r_d,
    })
}

/// `(J_d - R_d) Omega + (J_a - R_a) grad H - G sigma - zeta`.
pub fn matching_residual(
    omega: &StateVector,
    grad_h: &StateVector,
    s: &PHStructure,
    zeta: &StateVector,
    sigma: &DVector<f64>,
) -> StateVector {
    (&s.j_d - &s.r_d) * omega + (&s.j_a - &s.r_a) * grad_h - &s.g * sigma - zeta
}

pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// `||M + M^T||_inf / max(1, ||M||_inf)`.
pub fn skew_residual(m: &DMatrix<f64>) -> f64 {
    inf_norm(&(m + m.transpose())) / inf_norm(m).max(1.0)
}

pub fn symmetry_residual(m: &DMatrix<f64>) -> f64 {
    inf_norm(&(m - m.transpose())) / inf_norm(m).max(1.0)
}

pub fn min_eig_sym(m: &DMatrix<f64>) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(s).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Spectral norm of a symmetric matrix.
pub fn sym_norm(m: &DMatrix<f64>) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(s).eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

/// Numerical integrability, equilibrium assignment and Lyapunov conditions at
/// the target.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionsReport {
    /// Max asymmetry of the Jacobian of Omega, relative to its largest entry.
    pub integrability: f64,
    /// `||Omega(x_d) + grad H(x_d)||`.
    pub assignment_abs: f64,
    /// Same, relative to `||grad H(x_d)||`.
    pub assignment_rel: f64,
    /// Smallest eigenvalue of `Jac Omega + Hess H` at the target.
    pub min_eig: f64,
}

impl ConditionsReport {
    pub fn passes(&self, tol_integrability: f64, tol_assignment: f64) -> bool {
        self.integrability <= tol_integrability && self.assignment_rel <= tol_assignment && self.min_eig > 0.0
    }
}

pub fn fd_step(v: f64) -> f64 {
    (1e-5 * v.abs()).max(1.0)
}

/// Central-difference Jacobian of a vector field.
pub fn numerical_jacobian<F>(f: F, x: &StateVector, step: impl Fn(f64) -> f64) -> DMatrix<f64>
where
    F: Fn(&StateVector) -> StateVector,
{
    let d = x.len();
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, d);
    for i in 0..d {
        let h = step(x[i]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let col = (f(&xp) - f(&xm)) / (2.0 * h);
        jac.set_column(i, &col);
    }
    jac
}

pub fn check_conditions<F>(x_d: &StateVector, omega_fn: F, k: &EnergyCoeffs) -> ConditionsReport
where
    F: Fn(&StateVector) -> StateVector,
{
    let jac = numerical_jacobian(&omega_fn, x_d, fd_step);
    let scale = jac.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    let integrability = (&jac - jac.transpose()).iter().map(|v| v.abs()).fold(0.0, f64::max) / scale;
    let grad = grad_hamiltonian(x_d, k);
    let assignment_abs = (omega_fn(x_d) + &grad).norm();
    let assignment_rel = assignment_abs / grad.norm().max(f64::MIN_POSITIVE);
    let hess = DMatrix::from_diagonal(&k.k);
    let min_eig = min_eig_sym(&(jac + hess));
    ConditionsReport {
        integrability,
        assignment_abs,
        assignment_rel,
        min_eig,
    }
}

/// Port variables of one segment or of the manifold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentPort {
    /// Stored energy `1/2 k_h2 x_h2^2 + 1/2 k x^2`.
    pub energy: f64,
    /// Energy rate along the flow.
    pub energy_rate: f64,
    /// Supply rate `u_s^T y_s`.
    pub supply: f64,
}

/// Port variables for every segment followed by the manifold. The port input
/// is the net convective inflow scaled to a pressure rate and the port output
/// is the energy gradient of the node.
pub fn segment_ports(plant: &Plant, x: &[f64], xdot: &[f64], u: [f64; 2], k: &EnergyCoeffs) -> Vec<SegmentPort> {
    let n = plant.n();
    let flows = plant.boundary_flows(x, u);
    (0..=n)
        .map(|s| {
            let (h, t) = (2 * s, 2 * s + 1);
            let mu = if s < n { plant.mu[s] } else { plant.mu_sm };
            let (yh, yt) = (k.k[h] * x[h], k.k[t] * x[t]);
            let (tot, h2) = flows[s];
            SegmentPort {
                energy: 0.5 * (yh * x[h] + yt * x[t]),
                energy_rate: yh * xdot[h] + yt * xdot[t],
                supply: mu * (h2 * yh + tot * yt),
            }
        })
        .collect()
}

/// Passivity summary over a sequence of port evaluations.
#[derive(Clone, Debug, PartialEq)]
pub struct PassivityReport {
    /// Samples where the segment pressures are strictly decreasing.
    pub ordered_samples: usize,
    /// Of those, samples where the supply rates are strictly decreasing too.
    pub ordering_holds: usize,
    /// Samples where a segment's energy rate exceeds its supply rate.
    pub segment_violations: usize,
    /// Samples where total energy rate exceeds total supply.
    pub total_violations: usize,
    pub samples: usize,
}

impl PassivityReport {
    pub fn ordering_fraction(&self) -> f64 {
        if self.ordered_samples == 0 {
            1.0
        } else {
            self.ordering_holds as f64 / self.ordered_samples as f64
        }
    }
}

/// Evaluate segment passivity from per-sample ports and segment totals.
/// `rel_tol` scales the allowed excess by the magnitude of the compared rates.
pub fn segment_passivity<'a, I>(samples: I, rel_tol: f64) -> PassivityReport
where
    I: IntoIterator<Item = (&'a [f64], &'a [SegmentPort])>,
{
    let mut rep = PassivityReport {
        ordered_samples: 0,
        ordering_holds: 0,
        segment_violations: 0,
        total_violations: 0,
        samples: 0,
    };
    for (totals, ports) in samples {
        rep.samples += 1;
        let n = totals.len();
        let seg = &ports[..n];
        if seg.iter().any(|p| p.energy_rate > p.supply + rel_tol * (p.energy_rate.abs() + p.supply.abs())) {
            rep.segment_violations += 1;
        }
        let hdot: f64 = ports.iter().map(|p| p.energy_rate).sum();
        let supply: f64 = ports.iter().map(|p| p.supply).sum();
        let scale: f64 = ports.iter().map(|p| p.energy_rate.abs() + p.supply.abs()).sum();
        if hdot > supply + rel_tol * scale {
            rep.total_violations += 1;
        }
        if totals.windows(2).all(|w| w[0] > w[1]) {
            rep.ordered_samples += 1;
            if seg.windows(2).all(|w| w[0].supply > w[1].supply) {
                rep.ordering_holds += 1;
            }
        }
    }
    rep
}
