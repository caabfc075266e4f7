//! Line-oriented scenario files.
//!
//! ```text
//! # comment
//! [scenario]
//! duration = 1000
//! dt = 1e-3
//! mode = state_feedback
//! [profile]
//! current = 0:150, 100:250
//! setpoint = 0:1.2e5/1.8e5
//! ```
//!
//! Every key belongs to a section; unknown sections and keys are rejected.
//! `scenario.duration`, `scenario.dt` and `scenario.mode` are required, all
//! other keys fall back to the nominal scenario.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use thiserror::Error;

use crate::controller::ControllerGains;
use crate::model::StackParams;
use crate::ph_core::EnergyCoeffs;
use crate::sim::{Mode, Profile, Scenario};
use crate::verify::VerifySettings;

#[derive(Debug, Error, PartialEq)]
#[error("{origin}: {msg}")]
pub struct ConfigError {
    pub origin: String,
    pub msg: String,
}

impl ConfigError {
    fn at(origin: &str, msg: impl Into<String>) -> Self {
        ConfigError { origin: origin.to_string(), msg: msg.into() }
    }
}

macro_rules! param_fields {
    ($mac:ident) => {
        $mac!(
            alpha, a_ai, a_bd, a_or, v_a, v_c, v_sm, t_a, t_sm, faraday, r_gas, k_cr_h2, k_cr_n2, eta_ht_m, n_fc,
            p_sat, p_0, p_c, d_bl, m_h2, m_n2, m_o2, m_h2o, x_c_h2o, m_ej, m_seg, m_bd, bleed_duty, t_bl_in, gamma,
            r_air, c_p, rho_bl, m_bl, shaft_speed_rpm, p_ratio_bl
        )
    };
}

macro_rules! param_names {
    ($($f:ident),*) => { &[$(stringify!($f)),*] };
}

const PARAM_SCALARS: &[&str] = param_fields!(param_names);

/// All accepted `(section, key)` pairs.
pub fn known_keys() -> Vec<(&'static str, &'static str)> {
    let mut v = vec![];
    for k in [
        "duration",
        "dt",
        "integrator",
        "mode",
        "record_every",
        "seed",
        "initial_offset",
        "estimate_offset",
        "initial_state",
        "initial_estimate",
        "open_loop_u",
    ] {
        v.push(("scenario", k));
    }
    v.push(("profile", "current"));
    v.push(("profile", "setpoint"));
    for k in PARAM_SCALARS.iter().copied().chain(["n_seg", "t", "blower_a", "blower_b", "blower_c"]) {
        v.push(("params", k));
    }
    for k in ["beta1", "beta2", "k_n1", "k_sm1", "q", "curvature_margin", "energy"] {
        v.push(("gains", k));
    }
    for k in ["alpha", "lipschitz", "cond_cap", "gain_every"] {
        v.push(("observer", k));
    }
    for k in ["transient_window", "estimate_skip", "band", "passivity_tol"] {
        v.push(("metrics", k));
    }
    for k in [
        "structure_samples",
        "factorization_samples",
        "gradient_samples",
        "tol_skew",
        "tol_psd",
        "tol_factorization",
        "tol_gradient",
        "tol_conditions",
        "tol_matching",
        "min_ordering_fraction",
        "trajectory_duration",
        "inject",
    ] {
        v.push(("verify", k));
    }
    v.push(("sweep", "parameter"));
    v.push(("sweep", "values"));
    v
}

/// Resolve `section.key` or a bare key that belongs to exactly one section.
pub fn resolve_key(key: &str) -> Result<(String, String), String> {
    let known = known_keys();
    if let Some((sec, k)) = key.split_once('.') {
        if known.iter().any(|(s, kk)| *s == sec && *kk == k) {
            return Ok((sec.to_string(), k.to_string()));
        }
        return Err(format!("unknown key '{key}'"));
    }
    let hits: Vec<_> = known.iter().filter(|(_, k)| *k == key).collect();
    match hits.len() {
        0 => Err(format!("unknown key '{key}'")),
        1 => Ok((hits[0].0.to_string(), key.to_string())),
        _ => Err(format!(
            "key '{key}' is ambiguous; qualify it as one of {}",
            hits.iter().map(|(s, k)| format!("{s}.{k}")).collect::<Vec<_>>().join(", ")
        )),
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    section: String,
    key: String,
    value: String,
    origin: String,
}

/// Parsed but not yet interpreted configuration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    entries: Vec<Entry>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let known = known_keys();
        let mut section: Option<String> = None;
        let mut entries: Vec<Entry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let origin = format!("line {}", i + 1);
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::at(&origin, "unterminated section header"))?
                    .trim();
                if !known.iter().any(|(s, _)| *s == name) {
                    return Err(ConfigError::at(&origin, format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::at(&origin, format!("expected 'key = value', found '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            let sec = section
                .clone()
                .ok_or_else(|| ConfigError::at(&origin, format!("key '{k}' appears before any section header")))?;
            if !known.iter().any(|(s, kk)| *s == sec && *kk == k) {
                return Err(ConfigError::at(&origin, format!("unknown key '{k}' in section [{sec}]")));
            }
            if v.is_empty() {
                return Err(ConfigError::at(&origin, format!("key '{k}' has no value")));
            }
            if let Some(prev) = entries.iter().find(|e| e.section == sec && e.key == k) {
                return Err(ConfigError::at(
                    &origin,
                    format!("duplicate key '{sec}.{k}' (first set at {})", prev.origin),
                ));
            }
            entries.push(Entry { section: sec, key: k.to_string(), value: v.to_string(), origin });
        }
        Ok(RawConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::at(&path.display().to_string(), format!("cannot read scenario: {e}")))?;
        RawConfig::parse(&text).map_err(|e| ConfigError { origin: format!("{}: {}", path.display(), e.origin), msg: e.msg })
    }

    /// Apply `KEY=VALUE`, replacing any existing value.
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let origin = format!("--set {assignment}");
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::at(&origin, "expected KEY=VALUE"))?;
        let (sec, key) = resolve_key(k.trim()).map_err(|m| ConfigError::at(&origin, m))?;
        let value = v.trim().to_string();
        if value.is_empty() {
            return Err(ConfigError::at(&origin, "empty value"));
        }
        self.entries.retain(|e| !(e.section == sec && e.key == key));
        self.entries.push(Entry { section: sec, key, value, origin });
        Ok(())
    }

    fn get(&self, section: &str, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.section == section && e.key == key)
    }

    fn require(&self, section: &str, key: &str) -> Result<&Entry, ConfigError> {
        self.get(section, key)
            .ok_or_else(|| ConfigError::at("scenario", format!("missing required key '{section}.{key}'")))
    }
}

fn num(e: &Entry) -> Result<f64, ConfigError> {
    e.value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| ConfigError::at(&e.origin, format!("'{}' must be a finite number, got '{}'", e.key, e.value)))
}

fn count(e: &Entry) -> Result<usize, ConfigError> {
    e.value
        .parse::<usize>()
        .map_err(|_| ConfigError::at(&e.origin, format!("'{}' must be a non-negative integer, got '{}'", e.key, e.value)))
}

fn list(e: &Entry) -> Result<Vec<f64>, ConfigError> {
    e.value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| ConfigError::at(&e.origin, format!("'{}' has a bad list element '{}'", e.key, s.trim())))
        })
        .collect()
}

fn fixed<const N: usize>(e: &Entry) -> Result<[f64; N], ConfigError> {
    let v = list(e)?;
    v.try_into()
        .map_err(|v: Vec<f64>| ConfigError::at(&e.origin, format!("'{}' needs {N} values, got {}", e.key, v.len())))
}

fn parsed<T: std::str::FromStr<Err = String>>(e: &Entry) -> Result<T, ConfigError> {
    e.value.parse::<T>().map_err(|m| ConfigError::at(&e.origin, m))
}

fn profile<T: Copy>(e: &Entry, item: impl Fn(&str) -> Option<T>) -> Result<Profile<T>, ConfigError> {
    let mut pts = Vec::new();
    for part in e.value.split(',') {
        let part = part.trim();
        let bad = || ConfigError::at(&e.origin, format!("'{}' has a bad point '{part}' (expected TIME:VALUE)", e.key));
        let (t, v) = part.split_once(':').ok_or_else(bad)?;
        let t: f64 = t.trim().parse().map_err(|_| bad())?;
        pts.push((t, item(v.trim()).ok_or_else(bad)?));
    }
    Profile::new(pts).map_err(|m| ConfigError::at(&e.origin, format!("'{}': {m}", e.key)))
}

fn setpoint_item(s: &str) -> Option<(f64, f64)> {
    let (a, b) = s.split_once('/')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

/// Interpreted configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub scenario: Scenario,
    pub verify: VerifySettings,
    pub sweep: Option<SweepSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    /// Qualified key, e.g. `gains.beta1`.
    pub key: String,
    pub values: Vec<String>,
}

fn apply_param(p: &mut StackParams, e: &Entry) -> Result<(), ConfigError> {
    macro_rules! set_scalar {
        ($($f:ident),*) => {
            match e.key.as_str() {
                $(stringify!($f) => { p.$f = num(e)?; return Ok(()); })*
                _ => {}
            }
        };
    }
    param_fields!(set_scalar);
    match e.key.as_str() {
        "t" => p.t = list(e)?,
        "blower_a" => p.blower_a = fixed(e)?,
        "blower_b" => p.blower_b = fixed(e)?,
        "blower_c" => p.blower_c = fixed(e)?,
        "n_seg" => {}
        _ => unreachable!("key table and setter disagree on params.{}", e.key),
    }
    Ok(())
}

/// Render parameters as a `[params]` section that parses back to the same
/// values.
pub fn params_text(p: &StackParams) -> String {
    let mut s = String::from("[params]\n");
    let _ = writeln!(s, "n_seg = {}", p.n_seg);
    macro_rules! dump {
        ($($f:ident),*) => { $( let _ = writeln!(s, "{} = {:?}", stringify!($f), p.$f); )* };
    }
    param_fields!(dump);
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
    let _ = writeln!(s, "t = {}", join(&p.t));
    let _ = writeln!(s, "blower_a = {}", join(&p.blower_a));
    let _ = writeln!(s, "blower_b = {}", join(&p.blower_b));
    let _ = writeln!(s, "blower_c = {}", join(&p.blower_c));
    s
}

impl RawConfig {
    pub fn build(&self) -> Result<Config, ConfigError> {
        let mode: Mode = parsed(self.require("scenario", "mode")?)?;
        let duration = num(self.require("scenario", "duration")?)?;
        let dt = num(self.require("scenario", "dt")?)?;
        let mut s = Scenario::nominal(mode);
        s.duration = duration;
        s.dt = dt;
        if let Some(e) = self.get("params", "n_seg") {
            let n = count(e)?;
            if n < 2 {
                return Err(ConfigError::at(&e.origin, "n_seg must be at least 2"));
            }
            s.params = StackParams::with_segments(n);
            s.gains = ControllerGains::defaults(n);
        }
        let n = s.params.n_seg;
        let mut v = VerifySettings::default();
        let mut sweep_key = None;
        let mut sweep_values = None;
        for e in &self.entries {
            match (e.section.as_str(), e.key.as_str()) {
                ("scenario", "duration" | "dt" | "mode") => {}
                ("scenario", "integrator") => s.scheme = parsed(e)?,
                ("scenario", "record_every") => s.record_every = count(e)?,
                ("scenario", "seed") => {
                    s.seed = e.value.parse().map_err(|_| ConfigError::at(&e.origin, "seed must be an unsigned integer"))?
                }
                ("scenario", "initial_offset") => s.initial_offset = num(e)?,
                ("scenario", "estimate_offset") => s.estimate_offset = num(e)?,
                ("scenario", "initial_state") => s.initial_state = Some(DVector::from_vec(list(e)?)),
                ("scenario", "initial_estimate") => s.initial_estimate = Some(DVector::from_vec(list(e)?)),
                ("scenario", "open_loop_u") => s.open_loop_u = fixed(e)?,
                ("profile", "current") => s.current = profile(e, |v| v.parse().ok())?,
                ("profile", "setpoint") => s.setpoint = profile(e, setpoint_item)?,
                ("params", _) => apply_param(&mut s.params, e)?,
                ("gains", "beta1") => s.gains.beta1 = num(e)?,
                ("gains", "beta2") => s.gains.beta2 = num(e)?,
                ("gains", "k_n1") => s.gains.k_n1 = num(e)?,
                ("gains", "k_sm1") => s.gains.k_sm1 = num(e)?,
                ("gains", "q") => s.gains.q = count(e)?,
                ("gains", "curvature_margin") => s.gains.curvature_margin = num(e)?,
                ("gains", "energy") => {
                    let k = list(e)?;
                    if k.len() != 2 * n + 2 || k.iter().any(|v| !(*v > 0.0)) {
                        return Err(ConfigError::at(&e.origin, format!("energy needs {} positive weights", 2 * n + 2)));
                    }
                    s.gains.energy = EnergyCoeffs { k: DVector::from_vec(k) };
                }
                ("observer", "alpha") => s.observer.alpha = fixed(e)?,
                ("observer", "lipschitz") => s.observer.lipschitz = fixed(e)?,
                ("observer", "cond_cap") => s.observer.cond_cap = num(e)?,
                ("observer", "gain_every") => s.observer.gain_every = count(e)?,
                ("metrics", "transient_window") => s.metric_settings.transient_window = num(e)?,
                ("metrics", "estimate_skip") => s.metric_settings.estimate_skip = num(e)?,
                ("metrics", "band") => s.metric_settings.band = num(e)?,
                ("metrics", "passivity_tol") => s.metric_settings.passivity_tol = num(e)?,
                ("verify", "structure_samples") => v.structure_samples = count(e)?,
                ("verify", "factorization_samples") => v.factorization_samples = count(e)?,
                ("verify", "gradient_samples") => v.gradient_samples = count(e)?,
                ("verify", "tol_skew") => v.tol_skew = num(e)?,
                ("verify", "tol_psd") => v.tol_psd = num(e)?,
                ("verify", "tol_factorization") => v.tol_factorization = num(e)?,
                ("verify", "tol_gradient") => v.tol_gradient = num(e)?,
                ("verify", "tol_conditions") => v.tol_conditions = num(e)?,
                ("verify", "tol_matching") => v.tol_matching = num(e)?,
                ("verify", "min_ordering_fraction") => v.min_ordering_fraction = num(e)?,
                ("verify", "trajectory_duration") => v.trajectory_duration = num(e)?,
                ("verify", "inject") => v.inject = parsed(e)?,
                ("sweep", "parameter") => {
                    let (sec, k) = resolve_key(&e.value).map_err(|m| ConfigError::at(&e.origin, m))?;
                    if sec == "sweep" {
                        return Err(ConfigError::at(&e.origin, "cannot sweep a sweep key"));
                    }
                    sweep_key = Some(format!("{sec}.{k}"));
                }
                ("sweep", "values") => {
                    sweep_values = Some(e.value.split(',').map(|v| v.trim().to_string()).collect::<Vec<_>>())
                }
                (sec, key) => unreachable!("key table and builder disagree on {sec}.{key}"),
            }
        }
        let sweep = match (sweep_key, sweep_values) {
            (Some(key), Some(values)) => Some(SweepSpec { key, values }),
            (None, None) => None,
            _ => {
                return Err(ConfigError::at(
                    "scenario",
                    "[sweep] needs both 'parameter' and 'values'",
                ))
            }
        };
        s.validate().map_err(|e| ConfigError::at("scenario", e.to_string()))?;
        Ok(Config { scenario: s, verify: v, sweep })
    }
}

/// Load, apply overrides and interpret.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<Config, ConfigError> {
    let mut raw = RawConfig::load(path)?;
    for o in overrides {
        raw.set(o)?;
    }
    raw.build()
}

/// One configuration per sweep value, in file order.
pub fn expand_sweep(path: &Path, overrides: &[String]) -> Result<Vec<(String, Config)>, ConfigError> {
    let base = load_config(path, overrides)?;
    let spec = base
        .sweep
        .ok_or_else(|| ConfigError::at("scenario", "sweep needs a [sweep] section with 'parameter' and 'values'"))?;
    let mut raw = RawConfig::load(path)?;
    for o in overrides {
        raw.set(o)?;
    }
    spec.values
        .iter()
        .map(|v| {
            let mut r = raw.clone();
            r.set(&format!("{}={v}", spec.key))?;
            Ok((v.clone(), r.build()?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "[scenario]\nduration = 2\ndt = 1e-3\nmode = state_feedback\n";

    #[test]
    fn minimal_file_builds_nominal() {
        let c = RawConfig::parse(BASE).unwrap().build().unwrap();
        let mut want = Scenario::nominal(Mode::StateFeedback);
        want.duration = 2.0;
        assert_eq!(c.scenario, want);
        assert!(c.sweep.is_none());
    }

    #[test]
    fn missing_dt_names_the_key() {
        let e = RawConfig::parse("[scenario]\nduration = 2\nmode = open_loop\n").unwrap().build().unwrap_err();
        assert!(e.to_string().contains("scenario.dt"), "{e}");
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = RawConfig::parse("[scenario]\n\nbogus = 1\n").unwrap_err();
        assert_eq!(e.origin, "line 3");
        let e = RawConfig::parse("[nope]\n").unwrap_err();
        assert!(e.msg.contains("unknown section"));
        let e = RawConfig::parse("dt = 1\n").unwrap_err();
        assert!(e.msg.contains("before any section"));
        let e = RawConfig::parse(&format!("{BASE}dt = 2\n")).unwrap_err();
        assert!(e.msg.contains("duplicate"));
        let e = RawConfig::parse(&format!("{BASE}[gains]\nbeta1 = x\n")).unwrap().build().unwrap_err();
        assert_eq!(e.origin, "line 6");
    }

    #[test]
    fn set_accepts_bare_and_qualified_keys() {
        let mut r = RawConfig::parse(BASE).unwrap();
        r.set("mode=output_feedback").unwrap();
        r.set("gains.beta1=3").unwrap();
        let c = r.build().unwrap();
        assert_eq!(c.scenario.mode, Mode::OutputFeedback);
        assert_eq!(c.scenario.gains.beta1, 3.0);
        assert!(r.set("alpha=1").unwrap_err().msg.contains("ambiguous"));
        assert!(r.set("nope=1").unwrap_err().msg.contains("unknown key"));
    }

    #[test]
    fn profiles_parse() {
        let text = format!("{BASE}[profile]\ncurrent = 0:150, 1:250\nsetpoint = 0:1.2e5/1.8e5, 1.5:1.1e5/1.7e5\n");
        let c = RawConfig::parse(&text).unwrap().build().unwrap();
        assert_eq!(c.scenario.current.at(1.2), 250.0);
        assert_eq!(c.scenario.setpoint.at(1.6), (1.1e5, 1.7e5));
    }

    #[test]
    fn params_dump_round_trips() {
        let p = StackParams::default();
        let text = format!("{BASE}{}", params_text(&p));
        let c = RawConfig::parse(&text).unwrap().build().unwrap();
        assert_eq!(c.scenario.params, p);
    }

    #[test]
    fn segment_count_resizes_defaults() {
        let c = RawConfig::parse(&format!("{BASE}[params]\nn_seg = 4\n")).unwrap().build().unwrap();
        assert_eq!(c.scenario.params.t.len(), 4);
        assert_eq!(c.scenario.gains.energy.k.len(), 10);
    }

    #[test]
    fn every_known_key_is_buildable() {
        for (sec, key) in known_keys() {
            let r = resolve_key(&format!("{sec}.{key}")).unwrap();
            assert_eq!(r, (sec.to_string(), key.to_string()));
        }
    }
}
