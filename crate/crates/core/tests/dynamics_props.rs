use nalgebra::Vector3;
use proptest::prelude::*;
use uavrace::dynamics::*;

fn sticks() -> impl Strategy<Value = StickInput> {
    (0.0f32..=1.0, -1.0f32..=1.0, -1.0f32..=1.0, -1.0f32..=1.0).prop_map(|(t, e, a, r)| StickInput::new(t, e, a, r))
}

fn aloft() -> UavState {
    UavState::at_rest(Vector3::new(0.0, 0.0, 20.0), 0.3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn step_is_pure(seq in prop::collection::vec(sticks(), 1..120)) {
        let p = UavParams::default();
        let (mut a, mut b) = (aloft(), aloft());
        for u in &seq {
            a = step(&a, *u, &p).unwrap();
            b = step(&b, *u, &p).unwrap();
        }
        prop_assert_eq!(a, b);
        prop_assert_eq!(a.tick, seq.len() as u64);
    }

    #[test]
    fn any_stick_stream_keeps_state_finite_and_unit(seq in prop::collection::vec(sticks(), 1..600)) {
        let p = UavParams::default();
        let mut s = aloft();
        for u in &seq {
            s = step(&s, *u, &p).unwrap();
            prop_assert!(s.is_finite());
            prop_assert!((s.orientation.norm() - 1.0).abs() < 1e-9);
            prop_assert!(s.position.z >= 0.0);
        }
    }

    #[test]
    fn out_of_range_sticks_act_as_clamped(t in -5.0f32..5.0, e in -5.0f32..5.0, a in -5.0f32..5.0, r in -5.0f32..5.0) {
        let p = UavParams::default();
        let raw = StickInput::new(t, e, a, r);
        prop_assert_eq!(step(&aloft(), raw, &p).unwrap(), step(&aloft(), raw.clamped(), &p).unwrap());
        let c = raw.clamped();
        prop_assert!((0.0..=1.0).contains(&c.throttle));
        for v in [c.elevator, c.aileron, c.rudder] {
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn climb_setpoint_is_monotone(a in 0.0f32..=1.0, b in 0.0f32..=1.0) {
        let p = UavParams::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(p.climb_setpoint(lo) <= p.climb_setpoint(hi));
        prop_assert!(p.climb_setpoint(a).abs() <= p.max_climb_rate + 1e-12);
    }

    #[test]
    fn drag_opposes_motion(v in prop::array::uniform3(-40.0f64..40.0), yaw in -3.0f64..3.0) {
        let p = UavParams::default();
        let mut s = UavState::at_rest(Vector3::new(0.0, 0.0, 5.0), yaw);
        s.velocity = Vector3::from(v);
        prop_assert!(drag_force(&s, &p).dot(&s.velocity) <= 0.0);
    }
}

#[test]
fn quaternion_norm_over_a_million_steps() {
    let p = UavParams::default();
    let mut s = aloft();
    let mut worst: f64 = 0.0;
    for k in 0..1_000_000u64 {
        // A slowly varying, always-turning input keeps every axis busy.
        let ph = k as f32 / 97.0;
        let u = StickInput::new(0.5 + 0.02 * (ph * 0.3).sin(), 0.2 * ph.sin(), 0.4 * (ph * 1.3).cos(), 0.6 * (ph * 0.7).sin());
        s = step(&s, u, &p).unwrap();
        worst = worst.max((s.orientation.norm() - 1.0).abs());
        if k % 6000 == 0 {
            // Keep the vehicle inside a sane box so drag and clamping stay tame.
            s.position = Vector3::new(0.0, 0.0, 20.0);
        }
    }
    assert!(worst < 1e-6, "worst norm drift {worst}");
}

#[test]
fn more_pitch_is_never_slower() {
    let p = UavParams::default();
    let cruise = |e: f32| {
        let mut s = aloft();
        for _ in 0..60 * 30 {
            s = step(&s, StickInput::new(1.0, e, 0.0, 0.0), &p).unwrap();
        }
        s.velocity.xy().norm()
    };
    let speeds: Vec<f64> = [0.25f32, 0.5, 0.75, 1.0].iter().map(|&e| cruise(e)).collect();
    assert!(speeds.windows(2).all(|w| w[0] < w[1]), "{speeds:?}");
    assert!(speeds[3] < 40.0);
}
