//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero on any failure.

use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use iscap_cli::{solve_sweep, zero_power_antennas, Axis, ScenarioConfig, SweepSpec};
use iscap_core::analog_stage::{optimize_analog, AnalogOptions};
use iscap_core::ao_driver::{compare_schemes, random_analog, scheme_scenario, AoOptions, DesignResult, SchemeId};
use iscap_core::array_sensing::{build_fim, packed_index, SteeringSet};
use iscap_core::conic::schur::schur_crb_lmis;
use iscap_core::conic::{AffineExpr, ConicProgram, SolveStatus, SolverSettings};
use iscap_core::design::{Architecture, HybridDesign, ProblemData};
use iscap_core::digital_stage::{optimize_digital, recover_rank_one, DigitalContext};
use iscap_core::linalg::{CMatrix, CVector, C64};
use iscap_core::power_models::{eh_dc, eh_threshold_invert};
use iscap_core::scenario::{generate_scenario, Dimensions, Geometry, Scenario};
use iscap_core::sca::{ScaOptions, ScaTrace};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn cn(rng: &mut ChaCha8Rng) -> C64 {
    let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    C64::new(a, b)
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> CMatrix {
    CMatrix::from_fn(r, c, |_, _| cn(rng))
}

/// `G Gᴴ` with `G` of the given rank.
fn random_psd(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> CMatrix {
    let g = random_matrix(rng, n, rank);
    &g * g.adjoint()
}

fn ula(theta: f64, n: usize) -> CVector {
    CVector::from_fn(n, |m, _| {
        let k = m as f64 - (n as f64 - 1.0) / 2.0;
        C64::from_polar(1.0, std::f64::consts::PI * k * theta.sin())
    })
}

fn desk(seed: u64) -> Scenario {
    generate_scenario(seed, &Dimensions::desk(), &Geometry::default(), 3.0).unwrap()
}

/// Echo model `G(ξ) = A B Vᵀ` with `ξ = [θ, Re β, Im β]`.
fn echo_matrix(xi: &[f64], k: usize, n_tx: usize, n_rx: usize) -> CMatrix {
    let mut g = CMatrix::zeros(n_rx, n_tx);
    for i in 0..k {
        let beta = C64::new(xi[k + i], xi[2 * k + i]);
        g += ula(xi[i], n_rx) * ula(xi[i], n_tx).transpose() * beta;
    }
    g
}

/// FIM of `Y = G(ξ) X + Z` with `X Xᴴ = L R_x`, derivatives by central differences.
fn fim_by_finite_differences(theta: &[f64], beta: &[C64], rx: &CMatrix, dwell: usize, sigma2: f64, n_rx: usize) -> DMatrix<f64> {
    let k = theta.len();
    let n_tx = rx.nrows();
    let xi: Vec<f64> = theta.iter().copied().chain(beta.iter().map(|b| b.re)).chain(beta.iter().map(|b| b.im)).collect();
    let p = xi.len();
    let h = 1e-6;
    let grads: Vec<CMatrix> = (0..p)
        .map(|i| {
            let (mut up, mut dn) = (xi.clone(), xi.clone());
            up[i] += h;
            dn[i] -= h;
            (echo_matrix(&up, k, n_tx, n_rx) - echo_matrix(&dn, k, n_tx, n_rx)) / C64::new(2.0 * h, 0.0)
        })
        .collect();
    DMatrix::from_fn(p, p, |i, j| {
        let t = (grads[i].adjoint() * &grads[j] * rx).trace();
        2.0 * dwell as f64 / sigma2 * t.re
    })
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let n = 8;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let theta = vec![rng.random_range(-1.0..1.0)];
        let beta = vec![C64::from_polar(rng.random_range(0.1..2.0), rng.random_range(0.0..6.28))];
        let rx = random_psd(&mut rng, n, n) + CMatrix::identity(n, n) * C64::new(0.1, 0.0);
        let sigma2 = rng.random_range(0.5..2.0);
        let dwell = 10;
        let ss = SteeringSet::new(&theta, &beta, n, n);
        let analytic = build_fim(&ss, &rx, dwell, sigma2).unwrap().m;
        let oracle = fim_by_finite_differences(&theta, &beta, &rx, dwell, sigma2, n);
        worst = worst.max((&analytic - &oracle).norm() / oracle.norm());
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(worst <= 1e-3 && secs < 5.0, format!("worst relative Frobenius error {worst:.2e}, {secs:.2}s"))
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for case in 0..20 {
        let p = 3 + case % 7;
        let g = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        let m = &g * g.transpose() + DMatrix::identity(p, p) * 0.05;
        let mut fim = vec![AffineExpr::zero(); p * (p + 1) / 2];
        for a in 0..p {
            for b in a..p {
                fim[packed_index(a, b, p)] = AffineExpr::constant(m[(a, b)]);
            }
        }
        let mut prog = ConicProgram::new();
        let h = schur_crb_lmis(&mut prog, &fim, p, &vec![1.0; p], 1.0);
        prog.set_objective(h.total());
        let sol = prog.solve(&SolverSettings::default()).unwrap();
        if sol.status != SolveStatus::Optimal {
            failures += 1;
            continue;
        }
        let exact = m.clone().try_inverse().unwrap().trace();
        worst = worst.max((sol.objective_value - exact).abs() / exact);
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        failures == 0 && worst <= 1e-5 && secs < 30.0,
        format!("{failures} solver failures, worst relative error {worst:.2e}, {secs:.2}s"),
    )
}

fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut cov_err, mut sig_err, mut min_eig): (f64, f64, f64) = (0.0, 0.0, f64::INFINITY);
    for _ in 0..50 {
        let n_tx = rng.random_range(4..=8);
        let n_rf = rng.random_range(2..=n_tx);
        let k = rng.random_range(1..=n_rf.min(3));
        let f = CMatrix::from_fn(n_tx, n_rf, |_, _| C64::from_polar(1.0 / (n_tx as f64).sqrt(), rng.random_range(0.0..6.28)));
        let h: Vec<CVector> = (0..k).map(|_| random_matrix(&mut rng, n_tx, 1).column(0).into_owned()).collect();
        let r_bar: Vec<CMatrix> = (0..k)
            .map(|_| {
                let rank = rng.random_range(1..=n_rf);
                random_psd(&mut rng, n_rf, rank)
            })
            .collect();
        let rank = rng.random_range(1..=n_rf);
        let s_bar = random_psd(&mut rng, n_rf, rank);
        let rec = recover_rank_one(&r_bar, &s_bar, &f, &h).unwrap();
        let before = r_bar.iter().fold(s_bar.clone(), |acc, r| acc + r);
        let after = rec.r.iter().fold(rec.s.clone(), |acc, r| acc + r);
        cov_err = cov_err.max((&after - &before).norm() / before.norm());
        for i in 0..k {
            let g = f.adjoint() * &h[i];
            let h_tilde = &g * g.adjoint();
            let want = (&h_tilde * &r_bar[i]).trace().re;
            let got = (&h_tilde * &rec.r[i]).trace().re;
            sig_err = sig_err.max((got - want).abs() / want.abs());
            let beam = &rec.w[i] * rec.w[i].adjoint();
            cov_err = cov_err.max((&beam - &rec.r[i]).norm() / before.norm());
        }
        let s = nalgebra::linalg::SymmetricEigen::new(rec.s.clone()).eigenvalues;
        min_eig = min_eig.min(s.min());
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        cov_err <= 1e-12 && sig_err <= 1e-10 && min_eig >= -1e-8 && secs < 10.0,
        format!("covariance error {cov_err:.1e}, signal error {sig_err:.1e}, min eig of S {min_eig:.1e}, {secs:.2}s"),
    )
}

fn monotone(trace: &ScaTrace) -> bool {
    trace.objectives.windows(2).all(|w| w[1] <= w[0] + 1e-6)
}

fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    let mut bad = Vec::new();
    let (mut digital_iters, mut analog_iters, mut at_cap) = (0, 0, 0);
    for seed in 0..10u64 {
        let scn = desk(seed);
        let data = ProblemData::new(&scn).unwrap();
        let f = random_analog(scn.dims.n_tx, scn.dims.n_rf, seed, 0);
        let ctx = DigitalContext::connected(&data, &f, Architecture::Hybrid);
        let dig = match optimize_digital(&ctx, None, &ScaOptions::default()) {
            Ok(d) => d,
            Err(e) => {
                bad.push(format!("seed {seed}: digital stage failed: {e}"));
                continue;
            }
        };
        digital_iters = digital_iters.max(dig.trace.iterations);
        if !monotone(&dig.trace) || dig.trace.iterations > 50 {
            bad.push(format!("seed {seed}: digital trace {:?}", dig.trace.objectives));
        }
        match optimize_analog(&data, &dig.design, &AnalogOptions::default()) {
            Ok(an) => {
                analog_iters = analog_iters.max(an.trace.iterations);
                at_cap += usize::from(an.trace.iterations == 50);
                if !monotone(&an.trace) || an.trace.iterations > 50 {
                    bad.push(format!("seed {seed}: analog trace {:?}", an.trace.objectives));
                }
            }
            Err(e) => bad.push(format!("seed {seed}: analog stage failed: {e}")),
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let detail = format!(
        "max iterations digital {digital_iters}, analog {analog_iters} ({at_cap} analog runs stopped at the cap), {secs:.1}s; {}",
        bad.join("; ")
    );
    outcome(bad.is_empty(), detail)
}

/// Independent recomputation of every constraint; returns the worst relative violation.
fn recheck(scn: &Scenario, d: &HybridDesign) -> f64 {
    let f = &d.f;
    let beams: Vec<CVector> = d.w.iter().map(|w| f * w).collect();
    let rx = beams.iter().fold(f * &d.s * f.adjoint(), |acc, b| acc + b * b.adjoint());
    let mut worst: f64 = 0.0;
    for (k, h) in scn.h.iter().enumerate() {
        let gain = |v: &CVector| (h.adjoint() * v)[(0, 0)].norm_sqr();
        let signal = gain(&beams[k]);
        let interference: f64 = beams.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, b)| gain(b)).sum();
        let sensing = (h.adjoint() * f * &d.s * f.adjoint() * h)[(0, 0)].re;
        let sinr = signal / (interference + sensing + scn.noise_ir[k]);
        let need = scn.thresholds.sinr_min[k];
        worst = worst.max((need - sinr) / need);
    }
    for (j, dv) in scn.d.iter().enumerate() {
        let p_in = (dv.adjoint() * &rx * dv)[(0, 0)].re;
        let e = scn.eh_params[j];
        let psi = e.m / (1.0 + (-e.a * (p_in - e.b)).exp());
        let omega = 1.0 / (1.0 + (e.a * e.b).exp());
        let dc = (psi - e.m * omega) / (1.0 - omega);
        let need = scn.thresholds.eh_dc_min[j];
        worst = worst.max((need - dc) / need);
    }
    if scn.dims.k_s > 0 {
        let ss = SteeringSet::from_scenario(scn);
        let fim = build_fim(&ss, &rx, scn.dims.dwell, scn.noise_sense).unwrap().m;
        let crb = match fim.try_inverse() {
            Some(inv) => inv.trace(),
            None => f64::INFINITY,
        };
        worst = worst.max((crb - scn.thresholds.crb_max) / scn.thresholds.crb_max);
    }
    for n in 0..scn.dims.n_tx {
        worst = worst.max((rx[(n, n)].re - scn.hw.p_ant_max) / scn.hw.p_ant_max);
    }
    worst
}

struct Comparison {
    seed: u64,
    results: Vec<DesignResult>,
}

fn total(c: &Comparison, s: SchemeId) -> Option<f64> {
    c.results.iter().find(|r| r.scheme == s).and_then(|r| r.total_w())
}

fn criterion_5(runs: &[Comparison]) -> Outcome {
    let mut checked = 0;
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut bad = Vec::new();
    for c in runs {
        let scn = desk(c.seed);
        for r in c.results.iter().filter(|r| r.status.is_feasible()) {
            let d = r.design.as_ref().unwrap();
            let v = recheck(&scheme_scenario(&scn, r.scheme), d);
            checked += 1;
            worst = worst.max(v);
            if v > 1e-6 {
                bad.push(format!("seed {} {}: violation {v:.2e}", c.seed, r.scheme));
            }
        }
    }
    let total_results: usize = runs.iter().map(|c| c.results.len()).sum();
    outcome(
        bad.is_empty() && checked > 0,
        format!("{checked}/{total_results} designs returned and rechecked, worst relative violation {worst:.2e}; {}", bad.join("; ")),
    )
}

fn criterion_6(runs: &[Comparison]) -> Outcome {
    let mut bad = Vec::new();
    let mut sums = [0.0; 4];
    let order = [SchemeId::Joint, SchemeId::PsOnly, SchemeId::RfOnly, SchemeId::NoOnoff];
    let mut counted = 0;
    for c in runs {
        let t: Vec<Option<f64>> = order.iter().map(|&s| total(c, s)).collect();
        let Some(joint) = t[0] else {
            bad.push(format!("seed {}: joint infeasible", c.seed));
            continue;
        };
        for (i, other) in t.iter().enumerate().skip(1) {
            if let Some(o) = other {
                if joint > o + 1e-8 {
                    bad.push(format!("seed {}: joint {joint:.6} > {} {o:.6}", c.seed, order[i]));
                }
            }
        }
        if t.iter().all(Option::is_some) {
            counted += 1;
            for (s, v) in sums.iter_mut().zip(&t) {
                *s += v.unwrap();
            }
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / counted.max(1) as f64).collect();
    let ordered = counted > 0 && means[0] <= means[1] && means[0] <= means[2] && means[1].max(means[2]) <= means[3] && means[0] < means[3];
    if !ordered {
        bad.push("mean ordering joint <= partial <= no_onoff with joint < no_onoff not reproduced".into());
    }
    let detail = format!(
        "mean totals over {counted} seeds: joint {:.4}, ps_only {:.4}, rf_only {:.4}, no_onoff {:.4} W; {}",
        means[0],
        means[1],
        means[2],
        means[3],
        bad.join("; ")
    );
    outcome(bad.is_empty(), detail)
}

fn criterion_7() -> Outcome {
    let t0 = Instant::now();
    let base = ScenarioConfig::default();
    let opts = AoOptions::default();
    let schemes = vec![SchemeId::Joint, SchemeId::NoOnoff];
    let seeds = vec![0, 1];
    let sweeps = [
        (Axis::SinrDb, vec![0.0, 2.0, 4.0, 6.0, 8.0]),
        (Axis::CrbMax, vec![1e-5, 5e-6, 2e-6, 1e-6]),
        (Axis::EhDbm, vec![-130.0, -125.0, -120.0, -115.0]),
    ];
    let mut bad = Vec::new();
    let mut notes = Vec::new();
    let (mut carried, mut cells) = (0, 0);
    for (axis, values) in sweeps {
        let spec = SweepSpec { axis, values, schemes: schemes.clone(), seeds: seeds.clone(), continuation: true };
        let out = match solve_sweep(&spec, &base, &opts) {
            Ok(o) => o,
            Err(e) => {
                bad.push(format!("{}: {e}", axis.name()));
                continue;
            }
        };
        carried += out.rows.iter().filter(|r| r.carried).count();
        cells += out.rows.len();
        for &s in &schemes {
            // Values are listed loosest first.
            let curve = out.mean_curve(s);
            let means: Vec<f64> = curve.iter().map(|(_, m)| m.unwrap_or(f64::NAN)).collect();
            if means.iter().any(|m| !m.is_finite()) {
                bad.push(format!("{} {s}: infeasible cell {means:?}", axis.name()));
                continue;
            }
            if means.windows(2).any(|w| w[1] < w[0] - 1e-6) {
                bad.push(format!("{} {s}: not monotone {means:?}", axis.name()));
            }
            if axis == Axis::SinrDb {
                let gap = (means[1] - means[0]).abs() / means[0];
                notes.push(format!("{s} plateau gap {:.3}%", 100.0 * gap));
                if gap >= 0.01 {
                    bad.push(format!("{s}: totals at the two loosest SINR values differ by {:.2}%", 100.0 * gap));
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        bad.is_empty(),
        format!("{}, {carried}/{cells} cells took the tighter neighbour's design, {secs:.1}s; {}", notes.join(", "), bad.join("; ")),
    )
}

fn criterion_8(runs: &[Comparison]) -> Outcome {
    let mut pairs = Vec::new();
    let mut bad = Vec::new();
    for c in runs {
        let count = |s: SchemeId| c.results.iter().find(|r| r.scheme == s).and_then(|r| r.design.as_ref()).map(zero_power_antennas);
        match (count(SchemeId::Joint), count(SchemeId::FixedPa)) {
            (Some(nonlinear), Some(linear)) => {
                pairs.push(format!("seed {}: {nonlinear} vs {linear}", c.seed));
                if nonlinear < linear {
                    bad.push(c.seed);
                }
            }
            _ => bad.push(c.seed),
        }
    }
    outcome(bad.is_empty(), format!("zero-power antennas at beta 0.5 vs beta 0: {}; failing seeds {bad:?}", pairs.join(", ")))
}

fn criterion_9() -> Outcome {
    let (m, a, b) = (0.02, 6400.0, 0.003);
    let zero = eh_dc(0.0, m, a, b);
    let sat = eh_dc(100.0 * b, m, a, b);
    let sat_err = (sat - m).abs() / m;
    let mut round: f64 = 0.0;
    for i in 1..200 {
        let p = 1e-6 * 1.06f64.powi(i);
        let g = eh_dc(p, m, a, b);
        if g >= m * (1.0 - 1e-9) {
            break;
        }
        let back = eh_threshold_invert(g, m, a, b).unwrap();
        round = round.max((back - p).abs() / p);
    }
    let pass = zero == 0.0 && sat_err <= 1e-6 && round <= 1e-10;
    outcome(pass, format!("eh(0) = {zero:e}, saturation error {sat_err:.1e}, inversion round trip {round:.1e}"))
}

fn criterion_10() -> Outcome {
    let dir = std::env::temp_dir().join(format!("iscap-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let config = dir.join("sweep.toml");
    std::fs::write(
        &config,
        "[sweep]\naxis = \"sinr_db\"\nvalues = [4.0, 8.0]\nschemes = [\"joint\", \"rf_only\"]\nseeds = [3]\n",
    )
    .unwrap();
    let run = |name: &str| -> Result<String, String> {
        let out: PathBuf = dir.join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_iscap"))
            .args(["--config", config.to_str().unwrap(), "sweep", "--out", out.to_str().unwrap()])
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("exit {:?}: {}", status.status.code(), String::from_utf8_lossy(&status.stderr)));
        }
        let text = std::fs::read_to_string(&out).map_err(|e| e.to_string())?;
        Ok(text.lines().skip(1).collect::<Vec<_>>().join("\n"))
    };
    let result = match (run("a.csv"), run("b.csv")) {
        (Ok(a), Ok(b)) => {
            let rows = a.lines().count();
            outcome(a == b && rows == 5, format!("{rows} lines after the timestamp header, identical: {}", a == b))
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    };
    let _ = std::fs::remove_dir_all(&dir);
    result
}

fn main() {
    let t0 = Instant::now();
    let runs: Vec<Comparison> = (0..4u64)
        .map(|seed| Comparison { seed, results: compare_schemes(&desk(seed), &SchemeId::ALL, &AoOptions::default()) })
        .collect();
    let compare_secs = t0.elapsed().as_secs_f64();

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("FIM matches finite-difference oracle", Box::new(criterion_1)),
        ("Schur LMI minimum equals tr(M^-1)", Box::new(criterion_2)),
        ("rank-one recovery", Box::new(criterion_3)),
        ("SCA monotonicity in both stages", Box::new(criterion_4)),
        ("end-to-end feasibility", Box::new(|| criterion_5(&runs))),
        ("scheme dominance", Box::new(|| criterion_6(&runs))),
        ("monotone threshold sweeps", Box::new(criterion_7)),
        ("non-linear PA sparsification", Box::new(|| criterion_8(&runs))),
        ("energy-harvesting model", Box::new(criterion_9)),
        ("deterministic CSV output", Box::new(criterion_10)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| outcome(false, "panicked".into()));
        if !o.pass {
            failed += 1;
        }
        println!("criterion {:>2} {}: {} ({})", i + 1, if o.pass { "PASS" } else { "FAIL" }, name, o.detail);
    }
    println!("scheme comparisons on 4 seeds took {compare_secs:.1}s, total {:.1}s", t0.elapsed().as_secs_f64());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
