//! One line per acceptance criterion; exits non-zero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use upf_core::control::{evaluate_plan, solve_best_response, BestResponseConfig, CostParams, Problem};
use upf_core::dynamics::{ActuatorLimits, ControlInput, DynamicsModel, VehicleState};
use upf_core::fieldgrid::{GridSpec, ScalarField};
use upf_core::fields::{apply_screened_operator, solve_screened_poisson, FieldParams};
use upf_core::fusion::{CahnHilliard, FusionParams};
use upf_core::population::{wasserstein2, PopulationMeasure, StyleLabel};
use upf_sim::export::steps_to_jsonl;
use upf_sim::run::RunLog;
use upf_sim::{run, Scenario};
use nalgebra::{DMatrix, DVector, Matrix6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn dynamics_exactness() -> Outcome {
    let mut worst = 0.0f64;
    for dt in [0.01, 0.1, 0.5] {
        let m = DynamicsModel::new(dt, 0.05).map_err(|e| e.to_string())?;
        for axis in 0..2 {
            let (p, v, a) = (axis, axis + 2, axis + 4);
            let mut want_a = Matrix6::<f64>::identity();
            want_a[(p, v)] = dt;
            want_a[(p, a)] = dt * dt / 2.0;
            want_a[(v, a)] = dt;
            for (i, j) in [(p, v), (p, a), (v, a), (p, p), (v, v), (a, a)] {
                worst = worst.max((m.a[(i, j)] - want_a[(i, j)]).abs());
            }
            worst = worst.max((m.b[(p, axis)] - dt * dt * dt / 6.0).abs());
            worst = worst.max((m.b[(v, axis)] - dt * dt / 2.0).abs());
            worst = worst.max((m.b[(a, axis)] - dt).abs());
        }
        let mut off = m.a - Matrix6::identity();
        for axis in 0..2 {
            off[(axis, axis + 2)] = 0.0;
            off[(axis, axis + 4)] = 0.0;
            off[(axis + 2, axis + 4)] = 0.0;
        }
        worst = worst.max(off.amax());
    }
    let m = DynamicsModel::new(0.1, 0.0).map_err(|e| e.to_string())?;
    let x0 = VehicleState::new(200.0, 1.0, 22.0, -0.2, 0.5, 0.1);
    let mut x = x0;
    let mut roll = 0.0f64;
    for k in 1..=150 {
        x = m.propagate(&x, &ControlInput::ZERO, &nalgebra::Vector6::zeros()).map_err(|e| e.to_string())?;
        let t = k as f64 * 0.1;
        roll = roll.max((x.s - (x0.s + x0.s_dot * t + 0.5 * x0.s_ddot * t * t)).abs());
        roll = roll.max((x.d - (x0.d + x0.d_dot * t + 0.5 * x0.d_ddot * t * t)).abs());
    }
    check(
        worst <= 1e-15 && roll <= 1e-9,
        format!("matrix error {worst:.1e}, 150-step rollout error {roll:.1e}"),
    )
}

fn elliptic_oracle() -> Outcome {
    let spec = GridSpec::new(0.0, 600.0, -8.0, 8.0, 25, 10).map_err(|e| e.to_string())?;
    let n = spec.len();
    let mut dense = DMatrix::zeros(n, n);
    let (mut e, mut col) = (vec![0.0; n], vec![0.0; n]);
    for j in 0..n {
        e[j] = 1.0;
        apply_screened_operator(&spec, 1.0, &e, &mut col);
        e[j] = 0.0;
        dense.set_column(j, &DVector::from_column_slice(&col));
    }
    let lu = dense.lu();
    let params = FieldParams {
        cg_tol: 1e-13,
        cg_max_iter: 10_000,
        ..FieldParams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cg = solve_screened_poisson(&ScalarField::from_values(spec, v.clone()).unwrap(), 1.0, &params)
            .map_err(|e| e.to_string())?;
        let want = lu.solve(&DVector::from_vec(v)).ok_or("singular operator")?;
        worst = worst.max((DVector::from_vec(cg.field.values) - &want).norm() / want.norm());
    }
    check(worst <= 1e-8, format!("worst relative error {worst:.1e} over 20 sources"))
}

fn cahn_hilliard() -> Outcome {
    let spec = GridSpec::new(0.0, 600.0, -8.0, 8.0, 64, 16).map_err(|e| e.to_string())?;
    let params = FusionParams {
        tau_step: 0.05,
        max_steps: 2000,
        ..FusionParams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let phi0 = ScalarField::from_fn(spec, |_, _| rng.random_range(-0.6..0.6));
    let b = ScalarField::from_fn(spec, |s, d| (-(s - 300.0).powi(2) / 5e3 - d * d / 10.0).exp());
    let r = ScalarField::from_fn(spec, |s, d| (-(s - 350.0).powi(2) / 200.0 - (d - 3.75).powi(2) / 4.0).exp());
    let mut ch = CahnHilliard::new(phi0.clone(), &b, &r, &params).map_err(|e| e.to_string())?;
    let mut mean = ch.phi().mean();
    let mut drift = 0.0f64;
    for _ in 0..2000 {
        ch.step();
        let m = ch.phi().mean();
        drift = drift.max((m - mean).abs());
        mean = m;
    }
    let mut free = CahnHilliard::without_coupling(phi0, &params).map_err(|e| e.to_string())?;
    let mut energy = free.energy();
    let mut rises = 0;
    for _ in 0..2000 {
        free.step();
        let next = free.energy();
        if next > energy + 1e-12 * energy.abs() {
            rises += 1;
        }
        energy = next;
    }
    check(
        drift <= 1e-10 && rises == 0,
        format!("max per-step mean drift {drift:.1e}, energy increases {rises}/2000"),
    )
}

fn adjoint_gradients() -> Outcome {
    let model = DynamicsModel::new(0.1, 0.0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (a, b, c) = (rng.random_range(0.5..2.0), rng.random_range(0.0..6.0), rng.random_range(0.2..1.0));
        let phi = ScalarField::from_fn(GridSpec::default(), |s, d| c * (s / 60.0 + b).sin() * (d * a / 3.0).cos());
        let cost = CostParams {
            terminal_lane_weight: rng.random_range(0.0..1.0),
            terminal_speed_weight: rng.random_range(0.0..1.0),
            target_lane_offset: 3.75,
            ..CostParams::default()
        };
        let problem = Problem::new(&model, &phi, cost);
        let x0 = VehicleState::new(
            rng.random_range(100.0..400.0),
            rng.random_range(-4.5..4.5),
            rng.random_range(10.0..30.0),
            rng.random_range(-0.5..0.5),
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.5..0.5),
        );
        let u: Vec<ControlInput> = (0..10)
            .map(|_| ControlInput::new(rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)))
            .collect();
        let plan = evaluate_plan(&problem, &x0, u.clone()).map_err(|e| e.to_string())?;
        let grad = problem.control_gradient(&plan.controls, &plan.adjoints);
        let h = 1e-6;
        let (mut err, mut scale) = (0.0f64, 0.0f64);
        for k in 0..10 {
            for axis in 0..2 {
                let cost_at = |delta: f64| {
                    let mut c = u.clone();
                    let mut v = c[k].to_vector();
                    v[axis] += delta;
                    c[k] = ControlInput::from_vector(&v);
                    evaluate_plan(&problem, &x0, c).map(|p| p.cost)
                };
                let fd = (cost_at(h).map_err(|e| e.to_string())? - cost_at(-h).map_err(|e| e.to_string())?) / (2.0 * h);
                err = err.max((grad[k][axis] - fd).abs());
                scale = scale.max(fd.abs());
            }
        }
        worst = worst.max(err / scale);
    }
    check(worst <= 1e-4, format!("worst relative error {worst:.1e} over 100 instances"))
}

fn lq_oracle() -> Outcome {
    let model = DynamicsModel::new(0.1, 0.0).map_err(|e| e.to_string())?;
    let phi = ScalarField::zeros(GridSpec::default());
    let config = BestResponseConfig {
        max_sweeps: 20_000,
        tol: 1e-11,
        ..BestResponseConfig::default()
    };
    let mut worst = 0.0f64;
    for k in [5usize, 10, 20] {
        let cost = CostParams {
            terminal_lane_weight: 0.4,
            terminal_speed_weight: 0.2,
            target_lane_offset: 1.0,
            ..CostParams::default()
        };
        let mut problem = Problem::new(&model, &phi, cost);
        problem.limits = ActuatorLimits {
            a_max: 1e3,
            omega_max: 1e3,
            accel_max: 1e3,
        };
        let x0 = VehicleState::new(150.0, 0.2, 23.0, 0.1, 0.3, 0.0);
        let br = solve_best_response(&x0, &problem, &vec![ControlInput::ZERO; k], &config).map_err(|e| e.to_string())?;
        // Stacked terminal map x_K = c + G u and its normal equations.
        let mut pw = vec![Matrix6::identity(); k + 1];
        for i in 1..=k {
            pw[i] = model.a * pw[i - 1];
        }
        let c = pw[k] * x0.to_vector();
        let mut g = DMatrix::zeros(6, 2 * k);
        for j in 0..k {
            g.view_mut((0, 2 * j), (6, 2)).copy_from(&(pw[k - 1 - j] * model.b));
        }
        let mut hess = DMatrix::identity(2 * k, 2 * k) * model.dt;
        let mut rhs = DVector::zeros(2 * k);
        for (row, w, t) in [(1, cost.terminal_lane_weight, cost.target_lane_offset), (2, cost.terminal_speed_weight, cost.target_speed)] {
            let gr = g.row(row).transpose();
            hess += &gr * gr.transpose() * w;
            rhs += &gr * (w * (t - c[row]));
        }
        let u = hess.lu().solve(&rhs).ok_or("singular normal equations")?;
        let oracle: Vec<ControlInput> = (0..k).map(|j| ControlInput::new(u[2 * j], u[2 * j + 1])).collect();
        let states = problem.rollout(&x0, &oracle);
        for (p, o) in br.plan.states.iter().zip(&states) {
            worst = worst.max((p.to_vector() - o.to_vector()).amax());
        }
    }
    check(worst <= 1e-6, format!("worst state error {worst:.1e} for K in {{5, 10, 20}}"))
}

fn wasserstein_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let perms: Vec<[usize; 4]> = (0..4usize)
        .flat_map(|a| (0..4usize).flat_map(move |b| (0..4usize).flat_map(move |c| (0..4usize).map(move |d| [a, b, c, d]))))
        .filter(|p| {
            let mut seen = [false; 4];
            p.iter().all(|&i| !std::mem::replace(&mut seen[i], true))
        })
        .collect();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let mut draw = || {
            (0..4)
                .map(|_| {
                    VehicleState::new(
                        rng.random_range(0.0..600.0),
                        rng.random_range(-8.0..8.0),
                        rng.random_range(0.0..35.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                    )
                })
                .collect::<Vec<_>>()
        };
        let (a, b) = (draw(), draw());
        let brute = perms
            .iter()
            .map(|p| (0..4).map(|i| (a[i].to_vector() - b[p[i]].to_vector()).norm_squared()).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let m = |v: &[VehicleState]| PopulationMeasure::uniform(v.iter().enumerate().map(|(i, x)| (i as u32, *x, StyleLabel::Cooperative)));
        let got = wasserstein2(&m(&a), &m(&b)).map_err(|e| e.to_string())?;
        if got != (brute / 4.0).sqrt() {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches}/1000 mismatches"))
}

fn host_final_d(log: &RunLog) -> f64 {
    let last = log.records.last().expect("records");
    last.vehicles.iter().find(|v| v.host).expect("host").state.d
}

fn lane_change_safety(log: &RunLog) -> Outcome {
    let safety = log.safety();
    let below = log.records.iter().filter(|r| r.min_separation_m < 8.0).count();
    let d = host_final_d(log);
    check(
        below == 0 && (d - 3.75).abs() <= 0.5,
        format!(
            "host min separation {:.2} m, steps below 8 m {below}, final host d {d:.2} m (all-pairs min {:.2} m)",
            safety.min_separation_m, safety.min_pairwise_separation_m
        ),
    )
}

fn overtaking(log: &RunLog) -> Outcome {
    let max_d = log
        .records
        .iter()
        .map(|r| r.vehicles.iter().find(|v| v.host).unwrap().state.d.abs())
        .fold(0.0, f64::max);
    let host = log.scenario.host().id;
    let target = log
        .scenario
        .vehicles
        .iter()
        .find(|v| v.style == StyleLabel::Conservative)
        .map(|v| v.id)
        .ok_or("no conservative target")?;
    let gap = |r: &upf_sim::StepRecord| {
        let pos = |id: u32| r.vehicles.iter().find(|v| v.id == id).unwrap().state;
        let (h, t) = (pos(host), pos(target));
        (h.s - t.s).hypot(h.d - t.d)
    };
    let run_min = log.safety().min_separation_m;
    let final_gap = gap(log.records.last().unwrap());
    check(
        max_d <= 1.0 && final_gap > run_min,
        format!("max |d| {max_d:.2} m, final host-target separation {final_gap:.1} m vs run minimum {run_min:.2} m"),
    )
}

fn convergence(log: &RunLog) -> Outcome {
    let first = &log.convergence.first().ok_or("no fixed-point solve")?.report;
    let rho = first.rho_hat;
    let decreasing = first.gaps.len() >= 2 && first.gaps.last() < first.gaps.first();
    let all: Vec<f64> = log.convergence.iter().filter_map(|c| c.report.rho_hat).collect();
    let contracting = all.iter().filter(|r| **r < 1.0).count();
    check(
        decreasing && rho.is_some_and(|r| r < 1.0),
        format!(
            "t=0 gaps {:?}, rho_hat {}; rho_hat < 1 in {contracting}/{} solves with 3+ gaps",
            first.gaps.iter().map(|g| format!("{g:.2e}")).collect::<Vec<_>>(),
            rho.map_or("n/a".into(), |r| format!("{r:.4}")),
            all.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {name} ({secs:.2} s): {detail}");
    };

    report("dynamics exactness", &mut dynamics_exactness);
    report("elliptic solver oracle", &mut elliptic_oracle);
    report("Cahn-Hilliard conservation and descent", &mut cahn_hilliard);
    report("adjoint correctness", &mut adjoint_gradients);
    report("LQ oracle", &mut lq_oracle);
    report("Wasserstein oracle", &mut wasserstein_oracle);

    let lc = Scenario::preset("lane_change").expect("bundled preset");
    let mut first: Option<RunLog> = None;
    report("lane-change safety", &mut || {
        let log = run(&lc, lc.mode).map_err(|f| f.error.to_string())?;
        let out = lane_change_safety(&log);
        first = Some(log);
        out
    });
    report("overtaking property", &mut || {
        let sc = Scenario::preset("overtaking").expect("bundled preset");
        overtaking(&run(&sc, sc.mode).map_err(|f| f.error.to_string())?)
    });
    report("convergence property", &mut || convergence(first.as_ref().ok_or("lane-change run failed")?));
    report("determinism", &mut || {
        let a = steps_to_jsonl(&first.as_ref().ok_or("lane-change run failed")?.records);
        let b = steps_to_jsonl(&run(&lc, lc.mode).map_err(|f| f.error.to_string())?.records);
        check(a == b, format!("steps.jsonl {} bytes, identical: {}", a.len(), a == b))
    });

    println!("{} criteria failed", failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
