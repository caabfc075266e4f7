use super::ModelError;

/// Physical constants, blower regression and operating point.
#[derive(Clone, Debug, PartialEq)]
pub struct StackParams {
    pub n_seg: usize,
    /// Lumped orifice coefficient.
    pub alpha: f64,
    /// Inter-segment and ejector orifice area (m²).
    pub a_ai: f64,
    /// Bleed orifice area (m²).
    pub a_bd: f64,
    /// Cathode outlet orifice area (m²).
    pub a_or: f64,
    pub v_a: f64,
    pub v_c: f64,
    pub v_sm: f64,
    pub t_a: f64,
    pub t_sm: f64,
    pub faraday: f64,
    pub r_gas: f64,
    pub k_cr_h2: f64,
    pub k_cr_n2: f64,
    /// Tank valve molar flow at full opening (mol/s).
    pub eta_ht_m: f64,
    pub n_fc: f64,
    pub p_sat: f64,
    pub p_0: f64,
    pub p_c: f64,
    pub d_bl: f64,
    pub blower_a: [f64; 5],
    pub blower_b: [f64; 3],
    pub blower_c: [f64; 6],
    /// Segment volume proportions, one per segment.
    pub t: Vec<f64>,
    pub m_h2: f64,
    pub m_n2: f64,
    pub m_o2: f64,
    pub m_h2o: f64,
    pub x_c_h2o: f64,
    /// Molar masses entering the ejector, inter-segment and bleed orifices.
    pub m_ej: f64,
    pub m_seg: f64,
    pub m_bd: f64,
    /// Fraction of the bleed orifice that is open.
    pub bleed_duty: f64,
    pub t_bl_in: f64,
    pub gamma: f64,
    pub r_air: f64,
    pub c_p: f64,
    pub rho_bl: f64,
    pub m_bl: f64,
    pub shaft_speed_rpm: f64,
    pub p_ratio_bl: f64,
}

impl Default for StackParams {
    fn default() -> Self {
        let n = 3;
        StackParams {
            n_seg: n,
            alpha: 0.01,
            a_ai: 8.04e-6,
            a_bd: 7.24e-5,
            a_or: 7.24e-6,
            v_a: 1.1e-4,
            v_c: 1.9e-4,
            v_sm: 1.608e-5,
            t_a: 298.0,
            t_sm: 298.0,
            faraday: 96485.0,
            r_gas: 8.314,
            k_cr_h2: 7.455e-12,
            k_cr_n2: 7.455e-12,
            eta_ht_m: 0.15,
            n_fc: 25.0,
            p_sat: 1.762e4,
            p_0: 1.01e5,
            p_c: 1.5e5,
            d_bl: 0.2286,
            blower_a: [2.21e-03, -4.64e-05, -5.36e-04, 2.70e-04, -3.70e-04],
            blower_b: [2.44, -1.31, 1.77],
            blower_c: [0.43, -0.68, 0.80, -0.43, 0.11, -9.79e-03],
            t: vec![1.0 / n as f64; n],
            m_h2: 2.016e-3,
            m_n2: 28.0e-3,
            m_o2: 32.0e-3,
            m_h2o: 18.0e-3,
            x_c_h2o: 0.1,
            m_ej: 0.02,
            m_seg: 0.02,
            m_bd: 0.02,
            bleed_duty: 0.05,
            t_bl_in: 298.0,
            gamma: 1.4,
            r_air: 287.0,
            c_p: 1004.0,
            rho_bl: 1.2,
            m_bl: 0.02,
            shaft_speed_rpm: 18000.0,
            p_ratio_bl: 1.05,
        }
    }
}

impl StackParams {
    /// Defaults with `n` equal segments.
    pub fn with_segments(n: usize) -> Self {
        StackParams {
            n_seg: n,
            t: vec![1.0 / n as f64; n],
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        2 * self.n_seg + 2
    }

    /// Blade tip speed from shaft speed (m/s).
    pub fn tip_speed(&self) -> f64 {
        self.shaft_speed_rpm / 60.0 * std::f64::consts::PI * self.d_bl
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("alpha", self.alpha),
            ("a_ai", self.a_ai),
            ("a_bd", self.a_bd),
            ("a_or", self.a_or),
            ("v_a", self.v_a),
            ("v_c", self.v_c),
            ("v_sm", self.v_sm),
            ("t_a", self.t_a),
            ("t_sm", self.t_sm),
            ("faraday", self.faraday),
            ("r_gas", self.r_gas),
            ("n_fc", self.n_fc),
            ("m_ej", self.m_ej),
            ("m_seg", self.m_seg),
            ("m_bd", self.m_bd),
            ("t_bl_in", self.t_bl_in),
            ("gamma", self.gamma),
            ("r_air", self.r_air),
            ("c_p", self.c_p),
            ("rho_bl", self.rho_bl),
            ("m_bl", self.m_bl),
            ("d_bl", self.d_bl),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ModelError::InvalidParam(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("k_cr_h2", self.k_cr_h2),
            ("k_cr_n2", self.k_cr_n2),
            ("eta_ht_m", self.eta_ht_m),
            ("bleed_duty", self.bleed_duty),
            ("shaft_speed_rpm", self.shaft_speed_rpm),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ModelError::InvalidParam(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.n_seg < 2 {
            return Err(ModelError::InvalidParam(format!("n_seg must be at least 2, got {}", self.n_seg)));
        }
        if self.t.len() != self.n_seg {
            return Err(ModelError::InvalidParam(format!(
                "expected {} segment proportions, got {}",
                self.n_seg,
                self.t.len()
            )));
        }
        if self.t.iter().any(|&v| !(v > 0.0)) {
            return Err(ModelError::InvalidParam("segment proportions must be positive".into()));
        }
        let sum: f64 = self.t.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ModelError::InvalidParam(format!("segment proportions sum to {sum}, expected 1")));
        }
        if !(0.0..1.0).contains(&self.x_c_h2o) {
            return Err(ModelError::InvalidParam("x_c_h2o must lie in [0, 1)".into()));
        }
        Ok(())
    }
}
