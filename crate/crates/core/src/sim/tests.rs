use super::*;
use proptest::prelude::*;

fn only(policy: Policy, mut s: SimScenario) -> SimScenario {
    s.policies = vec![policy];
    s
}

fn full_cluster_run(s: &SimScenario, policy: Policy, load: u64) -> SimRun {
    let out = simulate(&only(policy, s.clone())).unwrap();
    out.find(policy, load, s.speeds.len()).unwrap().clone()
}

/// Independent finish-time oracle: hands rows out one at a time and adds
/// each row's cost to its provider's clock.
fn brute_force_equal_split(speeds: &[f64], load: u64, reference: f64) -> f64 {
    let n = speeds.len() as u64;
    let per_row = |speed: f64| (load * load) as f64 / (speed * reference * reference);
    let mut clocks = vec![0.0; speeds.len()];
    for row in 0..load {
        // Equal split gives the first `load % n` providers one extra row,
        // which is what dealing rows out round-robin produces.
        let i = (row % n) as usize;
        clocks[i] += per_row(speeds[i]);
    }
    clocks.iter().cloned().fold(0.0, f64::max)
}

#[test]
fn identical_speeds_give_linear_speedup() {
    let s = SimScenario::new(vec![1.0; 4], 1.0, 0.0, vec![400, 800]);
    for load in [400, 800] {
        let run = full_cluster_run(&s, Policy::Homogenized, load);
        assert!((run.speedup_measured - 4.0).abs() < 1e-12, "{}", run.speedup_measured);
        assert!((run.speedup_formula - 4.0).abs() < 1e-12);
    }
}

#[test]
fn homogenized_speedup_is_total_over_standalone() {
    let s = SimScenario::new(vec![2.0, 1.0, 1.0], 2.0, 0.0, vec![800]);
    let run = full_cluster_run(&s, Policy::Homogenized, 800);
    assert!((run.speedup_measured - 2.0).abs() < 1e-12);
    assert!((run.n_h - 2.0).abs() < 1e-15);
}

#[test]
fn equal_split_is_held_back_by_the_slowest() {
    let s = SimScenario::new(vec![2.0, 1.0, 1.0], 2.0, 0.0, vec![600, 601, 1000]);
    let out = simulate(&only(Policy::EqualSplit, s.clone())).unwrap();
    let run = out.find(Policy::EqualSplit, 600, 3).unwrap();
    assert!((run.speedup_measured - 1.5).abs() < 1e-12, "{}", run.speedup_measured);
    for load in [600, 601, 1000] {
        let run = out.find(Policy::EqualSplit, load, 3).unwrap();
        let oracle = brute_force_equal_split(&s.speeds, load, s.reference_rows);
        assert!((run.t_compute_max - oracle).abs() <= 1e-9 * oracle, "{load}");
    }
}

#[test]
fn replication_scenario_shape() {
    let s = paper_replication_scenario();
    assert_eq!(s.speeds.len(), 9);
    assert_eq!(s.overhead_slope, 20.0);
    let mut sorted = s.speeds.clone();
    sorted.sort_by(f64::total_cmp);
    let slowest = [s.speeds[5], s.speeds[8]];
    assert!(slowest.contains(&sorted[0]) && slowest.contains(&sorted[1]));
    assert!(sorted[1] < sorted[2]);
    let csv = sweep(&s).unwrap();
    assert_eq!(csv.lines().count(), 91);
    assert!(csv.starts_with(&CSV_HEADER.join(",")));
    assert!(!csv.contains('\r'));
}

#[test]
fn formula_column_matches_perf_model() {
    let s = paper_replication_scenario();
    for run in simulate(&s).unwrap().runs {
        let n_h = virtual_machine_count(s.speeds[..run.n_providers].iter().sum(), s.standalone_speed).unwrap();
        let m = SpeedupModel::new(
            run.t_standalone,
            n_h,
            OverheadModel::new(s.overhead_slope).unwrap(),
            run.load_rows as f64,
        )
        .unwrap();
        assert_eq!(run.speedup_formula, predicted_speedup(&m));
        assert_eq!(run.n_h, n_h);
    }
}

#[test]
fn overhead_column_is_slope_times_load() {
    let s = paper_replication_scenario();
    for run in simulate(&s).unwrap().runs {
        assert_eq!(run.t_overhead, 20.0 * run.load_rows as f64);
        assert_eq!(run.t_total, run.t_compute_max + run.t_overhead);
    }
}

#[test]
fn small_loads_lose_and_large_loads_win() {
    let s = paper_replication_scenario();
    let out = simulate(&s).unwrap();
    assert!(out
        .runs
        .iter()
        .filter(|r| r.load_rows == 200)
        .all(|r| r.speedup_measured < 1.0));
    assert!(out.find(Policy::Homogenized, 1000, 9).unwrap().speedup_measured > 1.0);
}

#[test]
fn speedup_grows_with_load_towards_n_h() {
    let s = paper_replication_scenario();
    let out = simulate(&s).unwrap();
    for n in 1..=9 {
        let runs: Vec<&SimRun> = s
            .loads
            .iter()
            .map(|&l| out.find(Policy::Homogenized, l, n).unwrap())
            .collect();
        for w in runs.windows(2) {
            assert!(w[1].speedup_measured > w[0].speedup_measured, "n={n}");
        }
        for r in &runs {
            assert!(r.speedup_measured < r.n_h);
        }
        let gap = |r: &SimRun| (r.n_h - r.speedup_measured) / r.n_h;
        assert!(gap(runs[4]) < gap(runs[0]));
    }
}

#[test]
fn adding_a_provider_never_slows_homogenized_compute() {
    let s = paper_replication_scenario();
    let out = simulate(&s).unwrap();
    for &load in &s.loads {
        for n in 1..9 {
            let before = out.find(Policy::Homogenized, load, n).unwrap();
            let after = out.find(Policy::Homogenized, load, n + 1).unwrap();
            // One row on the slowest participant is the rounding slack.
            let slack = after
                .providers
                .iter()
                .map(|p| s.row_time(1, load, p.speed))
                .fold(0.0, f64::max);
            assert!(after.t_compute_max <= before.t_compute_max + slack, "load {load} n {n}");
        }
    }
}

#[test]
fn latency_is_added_to_busy_providers_only() {
    let mut s = SimScenario::new(vec![1000.0, 1e-3], 1.0, 0.0, vec![2]);
    s.latency = 5.0;
    let run = full_cluster_run(&s, Policy::Homogenized, 2);
    assert_eq!(run.providers[1].rows, 0);
    assert_eq!(run.providers[1].compute, 0.0);
    assert!(run.providers[0].compute >= 5.0);
}

#[test]
fn noise_is_seeded() {
    let mut s = paper_replication_scenario();
    s.noise = 0.2;
    s.seed = 7;
    assert_eq!(sweep(&s).unwrap(), sweep(&s).unwrap());
    let mut other = s.clone();
    other.seed = 8;
    assert_ne!(sweep(&s).unwrap(), sweep(&other).unwrap());
    for run in simulate(&s).unwrap().runs {
        for (p, nominal) in run.providers.iter().zip(&s.speeds) {
            assert!(p.speed >= nominal * 0.8 - 1e-15 && p.speed <= nominal * 1.2 + 1e-15);
        }
    }
}

#[test]
fn scenario_files_parse() {
    let s = SimScenario::parse(
        "speeds = 2.0, 1.0, 1.0\nstandalone_speed = 2\noverhead_slope = 0.5\nloads = 100,200\n\
         policies = equal\nnoise = 0.1\nseed = 3\nlatency = 0.25\nreference_rows = 100\n",
    )
    .unwrap();
    assert_eq!(s.speeds, vec![2.0, 1.0, 1.0]);
    assert_eq!(s.policies, vec![Policy::EqualSplit]);
    assert_eq!(s.loads, vec![100, 200]);
    assert_eq!((s.noise, s.seed, s.latency, s.reference_rows), (0.1, 3, 0.25, 100.0));
    let defaults = SimScenario::parse("speeds = 1\nstandalone_speed = 1\nloads = 10").unwrap();
    assert_eq!(defaults.policies, vec![Policy::Homogenized, Policy::EqualSplit]);
    assert_eq!(defaults.reference_rows, DEFAULT_REFERENCE_ROWS);
}

#[test]
fn scenario_files_are_validated() {
    for bad in [
        "speeds = 1\nloads = 10",
        "speeds = 1, -1\nstandalone_speed = 1\nloads = 10",
        "speeds = 1\nstandalone_speed = 1\nloads = 0",
        "speeds = 1\nstandalone_speed = 1\nloads = 10\nnoise = 1",
        "speeds = 1\nstandalone_speed = 1\nloads = 10\ncolour = blue",
        "speeds = 1\nstandalone_speed = 1\nloads = 10\npolicies = fastest",
    ] {
        assert!(SimScenario::parse(bad).is_err(), "{bad}");
    }
}

#[test]
fn g9_formatting_matches_printf() {
    let cases = [
        (0.1, "0.1"),
        (1234567890.0, "1.23456789e+09"),
        (1e-5, "1e-05"),
        (123456.789, "123456.789"),
        (2.0 / 3.0, "0.666666667"),
        (100.0, "100"),
        (-0.5, "-0.5"),
        (0.0001, "0.0001"),
        (999999999.0, "999999999"),
        (999999999.5, "1e+09"),
        (0.000123456789123, "0.000123456789"),
        (3e-300, "3e-300"),
        (12345678.96, "12345679"),
        (0.0, "0"),
    ];
    for (x, want) in cases {
        assert_eq!(fmt_g9(x), want, "{x}");
    }
}

#[test]
fn measurements_round_trip_through_csv() {
    let out = simulate(&paper_replication_scenario()).unwrap();
    let text = out.to_csv().unwrap();
    let back = read_measurements(text.as_bytes()).unwrap();
    assert_eq!(back.len(), out.runs.len());
    for (b, r) in back.iter().zip(&out.runs) {
        assert_eq!(b.run_id, r.run_id);
        assert_eq!(b.policy, r.policy.as_str());
        assert!((b.t_total_s - r.t_total).abs() <= 1e-8 * r.t_total);
    }
    // Concatenated files with repeated headers are accepted.
    let twice = format!("{text}{text}");
    assert_eq!(read_measurements(twice.as_bytes()).unwrap().len(), 2 * out.runs.len());
}

#[test]
fn compare_needs_input() {
    assert!(matches!(
        compare_live(&[], &paper_replication_scenario()),
        Err(Error::EmptyInput)
    ));
}

/// Speeds and loads chosen so every allotment is an exact fair share.
fn divisible_scenario() -> SimScenario {
    let mut s = SimScenario::new(vec![2.0, 1.0, 1.0], 2.0, 0.01, vec![400, 800, 1200]);
    s.policies = vec![Policy::Homogenized];
    s
}

#[test]
fn zero_noise_runs_agree_with_the_formula() {
    let s = divisible_scenario();
    let full: Vec<RunMeasurement> = simulate(&s)
        .unwrap()
        .runs
        .iter()
        .filter(|r| r.n_providers == 3)
        .map(SimRun::measurement)
        .collect();
    for c in compare_live(&full, &s).unwrap() {
        assert!(c.deviation_rel < 1e-12, "{c:?}");
    }
}

#[test]
fn noisy_runs_deviate_within_the_jitter_bound() {
    let s = divisible_scenario();
    let a = 0.1;
    let mut max_dev = 0.0f64;
    for seed in 0..100 {
        let mut noisy = s.clone();
        noisy.noise = a;
        noisy.seed = seed;
        let runs: Vec<RunMeasurement> = simulate(&noisy)
            .unwrap()
            .runs
            .iter()
            .filter(|r| r.n_providers == 3)
            .map(SimRun::measurement)
            .collect();
        for c in compare_live(&runs, &s).unwrap() {
            // Compute time moves by a factor in [1/(1+a), 1/(1−a)], overhead
            // not at all, so the speedup moves by at most a factor 1 ± a.
            assert!(c.deviation_rel <= a + 1e-12, "{c:?}");
            max_dev = max_dev.max(c.deviation_rel);
        }
    }
    assert!(max_dev > 0.0);
}

proptest! {
    #[test]
    fn sweep_is_deterministic(seed in any::<u64>(), noise in 0.0f64..0.9) {
        let mut s = SimScenario::new(vec![1.5, 0.5, 2.5], 1.0, 0.1, vec![50, 300]);
        s.noise = noise;
        s.seed = seed;
        prop_assert_eq!(sweep(&s).unwrap(), sweep(&s).unwrap());
    }

    #[test]
    fn overhead_is_exactly_linear(m in 0.0f64..100.0, loads in prop::collection::vec(1u64..5000, 1..8)) {
        let s = SimScenario::new(vec![1.0, 2.0], 1.0, m, loads);
        for run in simulate(&s).unwrap().runs {
            prop_assert_eq!(run.t_overhead, m * run.load_rows as f64);
        }
    }

    #[test]
    fn homogenized_total_never_exceeds_equal_split(
        speeds in prop::collection::vec(0.01f64..10.0, 1..10),
        load in 1u64..3000,
        m in 0.0f64..1.0,
    ) {
        let s = SimScenario::new(speeds, 1.0, m, vec![load]);
        let out = simulate(&s).unwrap();
        for n in 1..=s.speeds.len() {
            let h = out.find(Policy::Homogenized, load, n).unwrap();
            let e = out.find(Policy::EqualSplit, load, n).unwrap();
            prop_assert!(h.t_total <= e.t_total, "n={} {} > {}", n, h.t_total, e.t_total);
        }
    }
}
