use coserve_core::baselines::*;

fn fresh() -> DtsState {
    DtsState::new(DtsConfig::default())
}

#[test]
fn empty_queue_history_gives_64() {
    assert_eq!(fresh().compute_next_interval(), 64.0);
}

#[test]
fn low_pressure_floor() {
    assert_eq!(dts_raw_interval(0.8), 64.0);
    assert_eq!(dts_raw_interval(0.1), 64.0);
}

#[test]
fn high_pressure_ceiling() {
    assert_eq!(dts_raw_interval(2.0), 512.0);
    assert_eq!(dts_raw_interval(7.5), 512.0);
}

#[test]
fn interpolation_uses_point_six_scaling() {
    let p = 1.4;
    assert_eq!(dts_raw_interval(p), 64.0 + ((p - 0.8) / 1.2) * 0.6 * 448.0);
}

#[test]
fn pressure_divisors_and_caps() {
    assert_eq!(dts_pressure(10.0, 0.0, 0.0, 0.0), 0.5);
    assert_eq!(dts_pressure(40.0, 0.0, 0.0, 0.0), 1.0);
    assert_eq!(dts_pressure(0.0, 5.0, 0.0, 0.0), 0.2);
    assert_eq!(dts_pressure(0.0, 100.0, 0.0, 0.0), 0.5);
    assert_eq!(dts_pressure(0.0, 0.0, 12.0, 4.0), 1.0);
    assert_eq!(dts_pressure(0.0, 0.0, 4.0, 12.0), 0.0);
}

#[test]
fn hand_traced_pressure_example() {
    let p = dts_pressure(10.0, 12.0, 10.0, 8.0);
    assert!((p - 1.23).abs() < 1e-12);
    assert!((dts_raw_interval(p) - 160.32).abs() < 1e-9);
}

#[test]
fn stabilization_smoothing_and_floor() {
    // one sample with q = 10, q_max = 10: p = 0.5 + 0.4 = 0.9
    let mut s = fresh();
    s.q.push(10.0);
    s.b.push(1.0);
    let f: f64 = (64.0 + (0.1 / 1.2) * 0.6 * 448.0) * 1.35;
    let smoothed = (f + 2.0 * 64.0) / 3.0;
    assert_eq!(s.compute_next_interval(), smoothed.max(80.0));
    assert_eq!(s.f_p, smoothed);

    // p = 0 → 64 → 86.4 → (86.4 + 128)/3 ≈ 71.47 → floor 80; f_p keeps the unfloored value
    let mut s = fresh();
    s.q.push(0.0);
    assert_eq!(s.compute_next_interval(), 80.0);
    assert_eq!(s.f_p, (64.0 * 1.35 + 128.0) / 3.0);
}

#[test]
fn clamp_to_512() {
    let mut s = fresh();
    s.f_p = 512.0;
    s.q.push(100.0);
    s.r_a = 100.0;
    assert_eq!(s.compute_next_interval(), 512.0);
    assert_eq!(s.f_p, (512.0 * 1.35 + 1024.0) / 3.0);
}

#[test]
fn fresh_state_switches_on_64th_step() {
    let mut s = fresh();
    for i in 0..63 {
        assert!(!s.step(0.0, 1.0, 0.0, 0.0), "step {i}");
    }
    assert!(s.step(0.0, 1.0, 0.0, 0.0));
}

#[test]
fn recompute_only_every_third_decision() {
    let mut s = fresh();
    s.f_p = 100.0;
    let run_until_switch = |s: &mut DtsState| {
        let mut n = 0;
        while !s.step(30.0, 4.0, 2.0, 1.0) {
            n += 1;
        }
        n + 1
    };
    assert_eq!(run_until_switch(&mut s), 64);
    assert_eq!(s.d, 1);
    assert_eq!(s.s, (100.0f64 * 1.1).min(512.0));
    run_until_switch(&mut s);
    assert_eq!(s.d, 2);
    assert_eq!(s.s, 100.0 * 1.1);
    assert_eq!(s.f_p, 100.0);
    run_until_switch(&mut s);
    assert_eq!(s.d, 0);
    assert_ne!(s.f_p, 100.0);
    assert!(s.q.is_empty() && s.r_a == 0.0);
}

#[test]
fn between_recomputes_interval_capped_at_512() {
    let mut s = fresh();
    s.f_p = 500.0;
    while !s.step(0.0, 0.0, 0.0, 0.0) {}
    assert_eq!(s.s, 512.0);
}

#[test]
fn recomputed_intervals_stay_in_range_and_move_by_a_third() {
    let mut s = fresh();
    for step in 0..200_000u64 {
        let q = ((step * 7919) % 97) as f64;
        let f_p = s.f_p;
        let switched = s.step(q, 8.0, (step % 5) as f64, (step % 3) as f64);
        if switched && s.d == 0 {
            assert!((80.0..=512.0).contains(&s.s));
            // f_s = (f + 2 f_p)/3 moves at most (f_max − f_p)/3 with f_max = 512·1.35
            assert!((s.f_p - f_p).abs() <= (512.0 * 1.35 - f_p).abs() / 3.0 + 1e-9);
        }
        assert!((0.0..=512.0).contains(&s.s));
    }
}
