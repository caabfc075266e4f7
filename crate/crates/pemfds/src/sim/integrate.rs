use nalgebra::DVector;

use crate::model::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Rk4,
    Euler,
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rk4" => Ok(Scheme::Rk4),
            "euler" => Ok(Scheme::Euler),
            other => Err(format!("unknown integrator '{other}' (expected rk4 or euler)")),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Rk4 => "rk4",
            Scheme::Euler => "euler",
        })
    }
}

fn finite(v: &DVector<f64>, x: &DVector<f64>) -> Result<(), ModelError> {
    if v.iter().all(|e| e.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::Domain(format!(
            "non-finite derivative at state [{}]",
            x.iter().map(|e| format!("{e:.6e}")).collect::<Vec<_>>().join(", ")
        )))
    }
}

/// One fixed step of `x' = f(x)`.
pub fn integrate_step<F>(x: &DVector<f64>, f: &mut F, dt: f64, scheme: Scheme) -> Result<DVector<f64>, ModelError>
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    match scheme {
        Scheme::Euler => {
            let k1 = f(x);
            finite(&k1, x)?;
            Ok(x + k1 * dt)
        }
        Scheme::Rk4 => {
            let k1 = f(x);
            finite(&k1, x)?;
            let x2 = x + &k1 * (0.5 * dt);
            let k2 = f(&x2);
            finite(&k2, &x2)?;
            let x3 = x + &k2 * (0.5 * dt);
            let k3 = f(&x3);
            finite(&k3, &x3)?;
            let x4 = x + &k3 * dt;
            let k4 = f(&x4);
            finite(&k4, &x4)?;
            Ok(x + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stationary_field_leaves_state() {
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let y = integrate_step(&x, &mut |_| DVector::zeros(2), 0.1, Scheme::Rk4).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn one_step_error_is_fifth_order() {
        let lambda = -1.3;
        let err = |dt: f64| {
            let x = DVector::from_vec(vec![1.0]);
            let y = integrate_step(&x, &mut |v| v * lambda, dt, Scheme::Rk4).unwrap();
            (y[0] - (lambda * dt).exp()).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((28.0..36.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn non_finite_derivative_is_reported() {
        let x = DVector::from_vec(vec![1.0]);
        let e = integrate_step(&x, &mut |_| DVector::from_vec(vec![f64::NAN]), 0.1, Scheme::Euler);
        assert!(e.unwrap_err().to_string().contains("non-finite"));
    }
}
