//! Acceptance suite. Runs every primary criterion, prints one PASS/FAIL line
//! per criterion and exits non-zero if any fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pemfds::config::load_config;
use pemfds::controller::{equilibrium, ControllerGains, ShapedEnergy};
use pemfds::model::{Plant, StackParams, StateVector};
use pemfds::ph_core::{assigned_interconnection, grad_hamiltonian, hamiltonian, natural_structure};
use pemfds::sim::integrate::{integrate_step, Scheme};
use pemfds::sim::{metrics, run_scenario, Metrics, RunOutput, Scenario};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn scenario(name: &str) -> Scenario {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.scn"));
    load_config(&p, &[]).unwrap_or_else(|e| panic!("{name}: {e}")).scenario
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t0 = Instant::now();
    let v = f();
    (v, t0.elapsed())
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

fn feasible_state(rng: &mut ChaCha8Rng, n: usize) -> StateVector {
    let mut x = DVector::zeros(2 * n + 2);
    for k in 0..=n {
        let tot: f64 = rng.gen_range(1.05e5..2.5e5);
        x[2 * k + 1] = tot;
        x[2 * k] = tot * rng.gen_range(0.5..0.99);
    }
    x
}

fn central_gradient(f: impl Fn(&StateVector) -> f64, x: &StateVector) -> StateVector {
    let mut g = DVector::zeros(x.len());
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1e5);
        let (mut p, mut m) = (x.clone(), x.clone());
        p[i] += h;
        m[i] -= h;
        g[i] = (f(&p) - f(&m)) / (2.0 * h);
    }
    g
}

fn structure(sf: &Metrics) -> Outcome {
    let (res, elapsed) = timed(|| {
        let plant = Plant::new(StackParams::default()).unwrap();
        let n = plant.n();
        let k = ControllerGains::defaults(n).energy;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut sj, mut sjd, mut sr) = (0.0_f64, 0.0_f64, 0.0_f64);
        for i in 0..1000 {
            let x = feasible_state(&mut rng, n);
            let load = plant.load(if i % 2 == 0 { 150.0 } else { 250.0 }).unwrap();
            let aux = plant.aux_coefficients(&x, &load).unwrap();
            let (j, r) = natural_structure(&aux.a, &k);
            let jd = &j + assigned_interconnection(&aux, n);
            sj = sj.max(inf_norm(&(&j + j.transpose())) / inf_norm(&j).max(1.0));
            sjd = sjd.max(inf_norm(&(&jd + jd.transpose())) / inf_norm(&jd).max(1.0));
            sr = sr.max(inf_norm(&(&r - r.transpose())));
        }
        (sj, sjd, sr)
    });
    let (sj, sjd, sr) = res;
    let eig_rel = sf.get("min_eig_rd_rel").unwrap();
    let singular = sf.get("singular_rd_samples").unwrap();
    let pass = sj <= 1e-12 && sjd <= 1e-12 && sr == 0.0 && eig_rel >= -1e-9 && singular == 0.0 && elapsed.as_secs_f64() < 10.0;
    Outcome {
        name: "structure suite",
        pass,
        detail: format!(
            "skew(J) {sj:.2e}, skew(J_d) {sjd:.2e}, asym(R) {sr:.2e} over 1000 states; min eig(R_d)/|R_d| {eig_rel:.3e} on trajectory; {:.2} s",
            elapsed.as_secs_f64()
        ),
    }
}

fn factorization() -> Outcome {
    let (worst, elapsed) = timed(|| {
        let plant = Plant::new(StackParams::default()).unwrap();
        let n = plant.n();
        let k = ControllerGains::defaults(n).energy;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut worst = 0.0_f64;
        for i in 0..200 {
            let x = feasible_state(&mut rng, n);
            let u = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let load = plant.load(100.0 + i as f64).unwrap();
            let aux = plant.aux_coefficients(&x, &load).unwrap();
            let (j, r) = natural_structure(&aux.a, &k);
            let ph = (&j - &r) * grad_hamiltonian(&x, &k)
                + plant.input_map(x.as_slice()) * DVector::from_vec(u.to_vec())
                + &aux.zeta;
            let f = plant.dynamics(&x, u, &load).unwrap();
            worst = worst.max((&ph - &f).norm() / f.norm().max(aux.zeta.norm()));
        }
        worst
    });
    Outcome {
        name: "factorization oracle",
        pass: worst <= 1e-9 && elapsed.as_secs_f64() < 5.0,
        detail: format!("max relative mismatch {worst:.2e} over 200 (x, u); {:.2} s", elapsed.as_secs_f64()),
    }
}

fn gradients() -> Outcome {
    let plant = Plant::new(StackParams::default()).unwrap();
    let n = plant.n();
    let gains = ControllerGains::defaults(n);
    let k = &gains.energy;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut eh = 0.0_f64;
    for _ in 0..50 {
        let x = feasible_state(&mut rng, n);
        let fd = central_gradient(|z| hamiltonian(z, k), &x);
        eh = eh.max((grad_hamiltonian(&x, k) - &fd).norm() / fd.norm());
    }
    let mut eo = 0.0_f64;
    for (i, current) in [150.0, 250.0].into_iter().enumerate() {
        let load = plant.load(current).unwrap();
        let target = equilibrium(&plant, &load, 1.2e5, 1.8e5).unwrap();
        let d = ShapedEnergy::design(&plant, target, &load, &gains).unwrap();
        for _ in 0..25 + i {
            let mut x = d.x_d().clone();
            for v in x.iter_mut() {
                *v *= rng.gen_range(0.95..1.05);
            }
            let fd = central_gradient(|z| d.h_a(z), &x);
            eo = eo.max((d.omega(&x) - &fd).norm() / fd.norm());
        }
    }
    Outcome {
        name: "gradient checks",
        pass: eh <= 1e-6 && eo <= 1e-6,
        detail: format!("grad H rel err {eh:.2e} (50 states), Omega rel err {eo:.2e} (51 states)"),
    }
}

fn conditions() -> Outcome {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios/nominal_state_feedback.scn");
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("verify.txt");
    let code = pemfds::cli::main_with_args([
        "pemfds",
        "verify",
        "--quiet",
        "--scenario",
        path.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&report).unwrap_or_default();
    let line = |key: &str| {
        text.lines()
            .find(|l| l.starts_with(&format!("{key} =")))
            .and_then(|l| l.split_whitespace().nth(2))
            .and_then(|v| v.parse::<f64>().ok())
            .unwrap_or(f64::NAN)
    };
    let (integ, assign, eig) = (line("integrability"), line("assignment"), line("min_eig_conditions"));
    Outcome {
        name: "energy-shaping conditions at target",
        pass: code == 0 && integ <= 1e-6 && assign <= 1e-6 && eig > 0.0,
        detail: format!("verify exit {code}; integrability {integ:.2e}, assignment {assign:.2e}, min eig {eig:.3e}"),
    }
}

fn conservation() -> Outcome {
    let s = scenario("open_loop_conservation");
    let plant = Plant::new(s.params.clone()).unwrap();
    let (out, elapsed) = timed(|| run_scenario(&s).unwrap());
    let names = pemfds::model::state_names(plant.n());
    let cols: Vec<usize> = names.iter().map(|c| out.trace.col(c).unwrap()).collect();
    let moles: Vec<f64> = out
        .trace
        .rows
        .iter()
        .map(|r| plant.total_moles(&cols.iter().map(|&i| r[i]).collect::<Vec<_>>()))
        .collect();
    let drift = moles.iter().map(|m| ((m - moles[0]) / moles[0]).abs()).fold(0.0, f64::max);
    let steps = s.steps();
    let spread = {
        let last = out.trace.rows.last().unwrap();
        let tot: Vec<f64> = (0..=plant.n()).map(|k| last[cols[2 * k + 1]]).collect();
        tot.iter().cloned().fold(f64::MIN, f64::max) - tot.iter().cloned().fold(f64::MAX, f64::min)
    };
    Outcome {
        name: "open-loop conservation",
        pass: drift <= 1e-8 && steps >= 1_000_000 && elapsed.as_secs_f64() < 60.0,
        detail: format!(
            "max relative drift {drift:.2e} over {steps} steps; final pressure spread {spread:.2e} Pa; {:.1} s",
            elapsed.as_secs_f64()
        ),
    }
}

fn lyapunov(sf: &Metrics) -> Outcome {
    let frac = sf.get("hdot_nonpos_fraction").unwrap();
    let (v0, v1) = (sf.get("v_d_initial").unwrap(), sf.get("v_d_final").unwrap());
    Outcome {
        name: "Lyapunov decrease",
        pass: frac >= 0.95 && v1 < v0,
        detail: format!("dH_d/dt <= 0 at {:.2}% of windowed samples; V_d {v0:.4e} -> {v1:.4e}", 100.0 * frac),
    }
}

fn observer_bounds(of: &RunOutput, elapsed: Duration) -> Outcome {
    let [en, esm] = of.max_est_err;
    Outcome {
        name: "observer error bounds",
        pass: en < 350.0 && esm < 300.0 && elapsed.as_secs_f64() < 120.0,
        detail: format!(
            "after 10 s: max |x_n - xhat_n| {en:.3e} Pa (< 350), max |x_sm - xhat_sm| {esm:.3e} Pa (< 300); {:.1} s",
            elapsed.as_secs_f64()
        ),
    }
}

fn performance_recovery(sf: &RunOutput, sf_m: &Metrics) -> Outcome {
    let mut s = scenario("nominal_output_feedback");
    s.estimate_offset = 0.0;
    let of = run_scenario(&s).unwrap();
    let of_m = metrics(&of.trace, &s.metric_settings).unwrap();
    let t_nu = of_m.get("first_nonzero_nu_t").unwrap();
    let t = of.trace.column("t").unwrap();
    let mut names = pemfds::model::state_names(3);
    names.extend(["u_bl", "u_ht"].map(String::from));
    let mut worst = 0.0_f64;
    for c in &names {
        let a = of.trace.column(c).unwrap();
        let b = sf.trace.column(c).unwrap();
        for i in 0..t.len() {
            if t_nu.is_nan() || t[i] < t_nu {
                worst = worst.max((a[i] - b[i]).abs() / b[i].abs().max(1e-12));
            }
        }
    }
    let rmse = |m: &Metrics| m.get("rmse_e_n").unwrap().hypot(m.get("rmse_e_sm").unwrap());
    let (r_of, r_sf) = (rmse(&of_m), rmse(sf_m));
    Outcome {
        name: "performance recovery",
        pass: worst < 1e-6 && r_of <= 2.0 * r_sf,
        detail: format!(
            "max relative trace gap {worst:.2e} before first nonzero nu (t = {t_nu}); tracking RMSE {r_of:.4} vs {r_sf:.4} Pa"
        ),
    }
}

fn passivity(sf: &Metrics) -> Outcome {
    let frac = sf.get("passivity_ordering_fraction").unwrap();
    let ordered = sf.get("passivity_ordered_samples").unwrap();
    let total = sf.get("passivity_total_violations").unwrap();
    Outcome {
        name: "passivity ordering",
        pass: frac >= 0.99 && ordered > 0.0 && total == 0.0,
        detail: format!(
            "supply ordering holds at {:.3}% of {ordered} ordered samples; {total} total-rate violations",
            100.0 * frac
        ),
    }
}

fn integrator_order() -> Outcome {
    let lambda = -1.0_f64;
    let global = |dt: f64| {
        let steps = (1.0 / dt).round() as usize;
        let mut x = DVector::from_vec(vec![1.0]);
        for _ in 0..steps {
            x = integrate_step(&x, &mut |v: &DVector<f64>| v * lambda, dt, Scheme::Rk4).unwrap();
        }
        (x[0] - lambda.exp()).abs()
    };
    let dts = [0.1, 0.05, 0.025, 0.0125];
    let ratios: Vec<f64> = dts.windows(2).map(|w| global(w[0]) / global(w[1])).collect();
    Outcome {
        name: "integrator order",
        pass: ratios.iter().all(|r| (12.0..=20.0).contains(r)),
        detail: format!("RK4 global error ratios per halving {ratios:.3?}"),
    }
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let t0 = Instant::now();
    let (sf_run, of_pair) = std::thread::scope(|scope| {
        let sf = scope.spawn(|| run_scenario(&scenario("nominal_state_feedback")).unwrap());
        let of = scope.spawn(|| timed(|| run_scenario(&scenario("nominal_output_feedback")).unwrap()));
        (sf.join().unwrap(), of.join().unwrap())
    });
    let sf_m = metrics(&sf_run.trace, &scenario("nominal_state_feedback").metric_settings).unwrap();

    let results = std::thread::scope(|scope| {
        let cons = scope.spawn(conservation);
        let rec = scope.spawn(|| performance_recovery(&sf_run, &sf_m));
        let mut v = vec![
            structure(&sf_m),
            factorization(),
            gradients(),
            conditions(),
        ];
        v.push(cons.join().unwrap());
        v.push(lyapunov(&sf_m));
        v.push(observer_bounds(&of_pair.0, of_pair.1));
        v.push(rec.join().unwrap());
        v.push(passivity(&sf_m));
        v.push(integrator_order());
        v
    });

    let mut failed = 0;
    for o in &results {
        println!("{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed ({:.1} s)",
        results.len() - failed,
        t0.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
