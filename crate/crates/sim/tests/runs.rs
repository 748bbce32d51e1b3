use upf_sim::export::{export_run, field_from_csv, read_run, steps_to_jsonl, STEPS_FILE};
use upf_sim::run::RunLog;
use upf_sim::{run, RunMode, Scenario, SafetyReport};

fn lane_change() -> Scenario {
    Scenario::preset("lane_change").unwrap()
}

/// Host alone on the road, cruising at its target speed in its lane.
fn lone_host() -> Scenario {
    let mut sc = lane_change();
    sc.vehicles.truncate(1);
    sc.dynamics.sigma_w = 0.0;
    let speed = sc.vehicles[0].speed_mps;
    sc.styles.cooperative.target_speed_mps = speed;
    sc.planner.lane_selection = false;
    sc
}

#[test]
fn same_seed_gives_identical_steps() {
    let mut sc = lane_change();
    sc.duration_s = 2.0;
    let a = steps_to_jsonl(&run(&sc, sc.mode).unwrap().records);
    let b = steps_to_jsonl(&run(&sc, sc.mode).unwrap().records);
    assert_eq!(a, b);
    sc.seed += 1;
    let c = steps_to_jsonl(&run(&sc, sc.mode).unwrap().records);
    assert_ne!(a, c);
}

#[test]
fn lone_vehicle_cruises_straight() {
    let sc = lone_host();
    let log = run(&sc, sc.mode).unwrap();
    assert_eq!(log.records.len(), sc.n_steps() + 1);
    let x0 = log.records[0].vehicles[0].state;
    for r in &log.records {
        let x = r.vehicles[0].state;
        let t = r.t_s;
        assert!((x.s - (x0.s + x0.s_dot * t)).abs() < 1e-6, "s at t={t}");
        assert!((x.d - x0.d).abs() < 1e-9);
        assert!((x.s_dot - x0.s_dot).abs() < 1e-9);
        assert_eq!(r.min_separation_m, f64::INFINITY);
    }
}

#[test]
fn timestamps_advance_by_dt() {
    let sc = lone_host();
    let log = run(&sc, sc.mode).unwrap();
    for (k, r) in log.records.iter().enumerate() {
        assert!((r.t_s - k as f64 * sc.dt_s).abs() < 1e-12);
    }
}

#[test]
fn export_writes_every_artifact() {
    let sc = lone_host();
    let log = run(&sc, sc.mode).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_run(&log, dir.path()).unwrap();
    let mut snapshots: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("fields_t"))
        .collect();
    snapshots.sort_by_key(|n| n.trim_start_matches("fields_t").trim_end_matches(".csv").parse::<usize>().unwrap());
    let expect: Vec<String> = (0..=150).step_by(25).map(|k| format!("fields_t{k}.csv")).collect();
    assert_eq!(snapshots, expect);
    let csv = std::fs::read_to_string(dir.path().join("fields_t75.csv")).unwrap();
    let field = field_from_csv(&csv).unwrap();
    assert_eq!((field.spec.n_s, field.spec.n_d), (250, 20));
    let art = read_run(dir.path()).unwrap();
    assert_eq!(art.steps.len(), 151);
    assert_eq!(art.safety, log.safety());
    let resolved = std::fs::read_to_string(dir.path().join("scenario.resolved.toml")).unwrap();
    assert_eq!(Scenario::from_toml_str(&resolved).unwrap(), sc);

    // Exporting the same log again reproduces the files byte for byte.
    let again = tempfile::tempdir().unwrap();
    export_run(&log, again.path()).unwrap();
    for name in [STEPS_FILE, "fields_t0.csv", "convergence.jsonl", "safety.json", "scenario.resolved.toml"] {
        assert_eq!(
            std::fs::read(dir.path().join(name)).unwrap(),
            std::fs::read(again.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn empty_log_still_exports_all_files() {
    let dir = tempfile::tempdir().unwrap();
    export_run(&RunLog::empty(lane_change()), dir.path()).unwrap();
    for name in [STEPS_FILE, "convergence.jsonl", "safety.json", "scenario.resolved.toml"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    assert_eq!(std::fs::read_to_string(dir.path().join(STEPS_FILE)).unwrap(), "");
}

#[test]
fn noise_free_plan_once_follows_the_plans() {
    let mut sc = lane_change();
    sc.dynamics.sigma_w = 0.0;
    sc.duration_s = sc.planner.horizon_steps as f64 * sc.dt_s;
    let log = run(&sc, RunMode::PlanOnce).unwrap();
    assert_eq!(log.convergence.len(), 1);
    for (i, (id, plan)) in log.initial_plans.iter().enumerate() {
        for (k, r) in log.records.iter().enumerate() {
            let v = &r.vehicles[i];
            assert_eq!(v.id, *id);
            let diff = (v.state.to_vector() - plan.states[k].to_vector()).amax();
            assert!(diff <= 1e-9, "vehicle {id} step {k}: {diff:e}");
        }
    }
}

#[test]
fn safety_report_and_host_traces_are_consistent() {
    let mut sc = lane_change();
    sc.duration_s = 3.0;
    let log = run(&sc, sc.mode).unwrap();
    let safety = log.safety();
    let min = log.records.iter().map(|r| r.min_separation_m).fold(f64::INFINITY, f64::min);
    assert_eq!(safety.min_separation_m, min);
    assert_eq!(safety, SafetyReport::from_records(&log.records, sc.dt_s));
    assert!(safety.critical_m < safety.warning_m);
    for r in &log.records {
        assert!((0.0..=1.0).contains(&r.bbar_host), "B at t={}", r.t_s);
        assert!((0.0..=1.0).contains(&r.rbar_host), "R at t={}", r.t_s);
        assert!(r.phi_host.is_finite());
    }
}
