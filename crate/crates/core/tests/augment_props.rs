use proptest::prelude::*;
use uavrace::augment::*;
use uavrace::dynamics::StickInput;
use uavrace::pipeline::{GRID_LATERAL, GRID_YAW};
use uavrace::render::ViewOffset;

fn sticks() -> impl Strategy<Value = StickInput> {
    (0.0f32..=1.0, -1.0f32..=1.0, -1.0f32..=1.0, -1.0f32..=1.0).prop_map(|(t, e, a, r)| StickInput::new(t, e, a, r))
}

fn gains() -> impl Strategy<Value = AugmentConfig> {
    (0.05f64..1.0, 0.05f64..1.0, 0.05f64..1.0).prop_map(|(k_lat, k_yaw, k_couple)| AugmentConfig { k_lat, k_yaw, k_couple, ..AugmentConfig::empty() })
}

proptest! {
    #[test]
    fn lateral_correction_is_antisymmetric(u in sticks(), d in 0.0f64..2.0, cfg in gains()) {
        let delta = |off: f64| corrective_controls(u, ViewOffset::new(off, 0.0), &cfg).aileron as f64 - u.aileron as f64;
        let a = u.aileron as f64;
        prop_assume!((a + cfg.k_lat * d).abs() <= 1.0 && (a - cfg.k_lat * d).abs() <= 1.0);
        prop_assert!((delta(d) + delta(-d)).abs() < 1e-6);
    }

    #[test]
    fn yaw_correction_is_antisymmetric(u in sticks(), y in 0.0f64..1.5, cfg in gains()) {
        let c = |off: f64| corrective_controls(u, ViewOffset::new(0.0, off), &cfg);
        let r = u.rudder as f64;
        prop_assume!((r + cfg.k_yaw * y).abs() <= 1.0 && (r - cfg.k_yaw * y).abs() <= 1.0);
        let (p, m) = (c(y), c(-y));
        prop_assert!(((p.rudder as f64 - r) + (m.rudder as f64 - r)).abs() < 1e-6);
    }

    #[test]
    fn corrections_grow_with_offset(u in sticks(), a in -2.0f64..2.0, b in -2.0f64..2.0, cfg in gains()) {
        let (lo, hi) = if a.abs() <= b.abs() { (a, b) } else { (b, a) };
        let lat = |d: f64| (corrective_controls(u, ViewOffset::new(d, 0.0), &cfg).aileron - u.aileron).abs();
        let yaw = |d: f64| (corrective_controls(u, ViewOffset::new(0.0, d * 0.75), &cfg).rudder - u.rudder).abs();
        // Same sign side so clamping at one end cannot reorder them.
        if lo * hi >= 0.0 {
            prop_assert!(lat(lo) <= lat(hi) + 1e-6);
            prop_assert!(yaw(lo) <= yaw(hi) + 1e-6);
        }
    }

    #[test]
    fn corrected_sticks_stay_in_range(u in sticks(), lat in -2.0f64..2.0, yaw in -1.5f64..1.5, cfg in gains()) {
        let c = corrective_controls(u, ViewOffset::new(lat, yaw), &cfg);
        prop_assert!((-1.0..=1.0).contains(&c.aileron) && (-1.0..=1.0).contains(&c.rudder));
        prop_assert_eq!((c.throttle, c.elevator), (u.throttle, u.elevator));
    }

    #[test]
    fn correction_steers_back(lat in 0.01f64..2.0, yaw in 0.01f64..1.5) {
        let cfg = AugmentConfig::empty();
        let zero = StickInput::new(0.5, 0.0, 0.0, 0.0);
        // Displaced right or rotated clockwise: steer left, counter-clockwise.
        prop_assert!(corrective_controls(zero, ViewOffset::new(lat, 0.0), &cfg).aileron < 0.0);
        prop_assert!(corrective_controls(zero, ViewOffset::new(0.0, yaw), &cfg).rudder < 0.0);
        prop_assert!(corrective_controls(zero, ViewOffset::new(-lat, 0.0), &cfg).aileron > 0.0);
    }

    #[test]
    fn interval_enumerates_the_range(lo in -100i32..0, hi in 1i32..100, step in 1i32..40) {
        let spec = format!("[{lo}:{step}:{hi}]");
        let got = parse_interval(&spec).unwrap();
        let want: Vec<f64> = (0..).map(|k| lo + k * step).take_while(|v| *v <= hi).filter(|v| *v != 0).map(f64::from).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn symmetric_interval_is_symmetric(m in 1i32..20, step in 1i32..10) {
        let hi = m * step;
        let v = parse_interval(&format!("[{}:{step}:{hi}]", -hi)).unwrap();
        prop_assert_eq!(v.len() as i32, 2 * m);
        let mut neg: Vec<f64> = v.iter().map(|x| -x).collect();
        neg.reverse();
        prop_assert_eq!(neg, v);
    }

    #[test]
    fn interval_parser_is_total(text in "\\PC{0,24}") {
        let _ = parse_interval(&text);
    }
}

#[test]
fn grid_headers_enumerate_every_cell() {
    let mut cells = 0;
    for l in GRID_LATERAL {
        for y in GRID_YAW {
            let g = make_grid(l, y).unwrap();
            let lat = parse_interval(l).unwrap();
            let yaw = parse_interval(y).unwrap();
            assert_eq!(g.offsets().len(), lat.len() + yaw.len(), "{l} x {y}");
            let want: Vec<ViewOffset> = lat
                .iter()
                .map(|cm| ViewOffset::new(cm / 100.0, 0.0))
                .chain(yaw.iter().map(|d| ViewOffset::new(0.0, d.to_radians())))
                .collect();
            assert_eq!(g.offsets(), want);
            cells += 1;
        }
    }
    assert_eq!(cells, 20);
    let d = AugmentConfig::default_grid();
    assert_eq!(d.offsets().len(), 6);
    assert_eq!(d, make_grid("[-50:50:50]", "[-30:15:30]").unwrap());
}
