use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;
use uavrace::bundled;
use uavrace::track::timing::{LapTimer, RaceEvent};
use uavrace::track::*;

/// Star-shaped loops: sorted angles with bounded radii, inside the stadium.
fn sketch() -> impl Strategy<Value = TrackSketch> {
    (4usize..9, any::<u64>()).prop_flat_map(|(n, _)| {
        (prop::collection::vec(0.1f64..0.9, n), prop::collection::vec(0.55f64..1.0, n), 0.0..(2.0 * PI)).prop_map(
            move |(jitter, radii, phase)| {
                let points = (0..n)
                    .map(|i| {
                        let a = phase + 2.0 * PI * (i as f64 + jitter[i] * 0.6) / n as f64;
                        Vector2::new(48.0 * radii[i] * a.cos(), 30.0 * radii[i] * a.sin())
                    })
                    .collect();
                TrackSketch { name: "prop".into(), control_points: points, closed: true }
            },
        )
    })
}

fn built(s: &TrackSketch) -> Option<TrackSpec> {
    build_track(s, &TrackParams::default()).ok()
}

fn gate() -> impl Strategy<Value = Gate> {
    (-20.0f64..20.0, -20.0f64..20.0, 0.5f64..3.0, -PI..PI, 1.0f64..4.0, 1.0f64..4.0).prop_map(|(x, y, z, heading, width, height)| Gate {
        center: Vector3::new(x, y, z),
        heading,
        width,
        height,
        index: 0,
        station: 0.0,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn build_is_deterministic(s in sketch()) {
        let a = built(&s);
        prop_assume!(a.is_some());
        let b = built(&s).unwrap();
        let a = a.unwrap();
        prop_assert_eq!(a.to_document(), b.to_document());
        prop_assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn cones_are_uniformly_spaced(s in sketch()) {
        let t = built(&s);
        prop_assume!(t.is_some());
        let t = t.unwrap();
        let n = t.cone_pairs();
        let step = t.total_length / n as f64;
        // Rounding the pair count keeps the gap within half a step.
        prop_assert!((step - t.params.cone_spacing).abs() <= t.params.cone_spacing / (2.0 * n as f64) * 1.0001 + 1e-9);
        let stations: Vec<f64> = t.cones.chunks(2).map(|p| t.locate(&((p[0] + p[1]) / 2.0)).station).collect();
        for k in 0..n {
            let gap = (stations[(k + 1) % n] - stations[k]).rem_euclid(t.total_length);
            prop_assert!((gap - step).abs() < 0.01 * step, "gap {} vs {}", gap, step);
        }
    }

    #[test]
    fn reversed_motion_swaps_crossing(g in gate(), d0 in 0.05f64..3.0, d1 in 0.05f64..3.0, u in -0.49f64..0.49, v in -0.49f64..0.49, du in -0.2f64..0.2) {
        let inside = g.center + g.right() * (u * g.width) + Vector3::z() * (v * g.height);
        let a = inside - g.normal() * d0 + g.right() * du;
        let b = inside + g.normal() * d1 - g.right() * du * d1 / d0;
        prop_assert_eq!(gate_crossing(&g, &a, &b), Crossing::Passed);
        prop_assert_eq!(gate_crossing(&g, &b, &a), Crossing::WrongDirection);
    }

    #[test]
    fn crossing_antisymmetry_everywhere(g in gate(), a in prop::array::uniform3(-25.0f64..25.0), b in prop::array::uniform3(-25.0f64..25.0)) {
        let (a, b) = (Vector3::from(a), Vector3::from(b));
        let fwd = gate_crossing(&g, &a, &b);
        let back = gate_crossing(&g, &b, &a);
        prop_assert_eq!(fwd == Crossing::WrongDirection, back == Crossing::Passed);
        prop_assert_eq!(fwd == Crossing::None, back == Crossing::None);
    }

    #[test]
    fn sketch_text_round_trips(s in sketch()) {
        let mut text = format!("name: {}\n", s.name);
        for p in &s.control_points {
            text.push_str(&format!("{:?} {:?}\n", p.x, p.y));
        }
        prop_assert_eq!(parse_sketch(&text).unwrap(), s);
    }

    #[test]
    fn out_of_stadium_points_rejected(x in 55.01f64..500.0, sign in prop::bool::ANY) {
        let x = if sign { x } else { -x };
        let text = format!("name: o\n0 0\n10 0\n{x} 10\n");
        let is_bounds = matches!(parse_sketch(&text), Err(SketchError::OutOfBounds { line: 4, .. }));
        prop_assert!(is_bounds);
    }
}

/// One traversal of the sampled centerline, counting crossings of every gate.
fn centerline_crossings(t: &TrackSpec) -> Vec<(usize, Crossing)> {
    let n = t.centerline.len();
    let mut out = Vec::new();
    for i in 0..n {
        let a = t.centerline[i].point;
        let b = t.centerline[(i + 1) % n].point;
        for g in &t.gates {
            let c = gate_crossing(g, &a, &b);
            if c != Crossing::None {
                out.push((g.index, c));
            }
        }
    }
    out
}

#[test]
fn full_traversal_passes_each_gate_once() {
    for t in bundled::all_tracks() {
        let hits = centerline_crossings(&t);
        assert_eq!(hits.len(), t.gates.len(), "{}", t.name);
        let mut idx: Vec<usize> = hits.iter().map(|h| h.0).collect();
        idx.sort();
        assert_eq!(idx, (0..t.gates.len()).collect::<Vec<_>>(), "{}", t.name);
        assert!(hits.iter().all(|h| h.1 == Crossing::Passed));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn random_tracks_traverse_each_gate_once(s in sketch()) {
        let t = built(&s);
        prop_assume!(t.is_some());
        let t = t.unwrap();
        let hits = centerline_crossings(&t);
        prop_assert_eq!(hits.len(), t.gates.len());
        prop_assert!(hits.iter().all(|h| h.1 == Crossing::Passed));
    }
}

#[test]
fn bundled_tracks_fit_and_space_cones() {
    let tracks = bundled::all_tracks();
    assert_eq!(tracks.len(), 11);
    for t in &tracks {
        assert!(t.bounds.min.x >= -STADIUM_HALF_X && t.bounds.max.x <= STADIUM_HALF_X, "{}", t.name);
        assert!(t.bounds.min.y >= -STADIUM_HALF_Y && t.bounds.max.y <= STADIUM_HALF_Y, "{}", t.name);
        let step = t.total_length / t.cone_pairs() as f64;
        if t.cone_pairs() >= 50 {
            assert!((step - t.params.cone_spacing).abs() < 0.01 * t.params.cone_spacing, "{}", t.name);
        }
        let doc = t.to_document();
        assert_eq!(&TrackSpec::from_document(&doc).unwrap(), t);
    }
}

#[test]
fn lap_timer_over_bundled_tracks() {
    for t in bundled::all_tracks() {
        let mut timer = LapTimer::new(&t, 2, 0);
        let n = t.centerline.len();
        let mut events = Vec::new();
        let start = t.locate(&t.gates[0].center).index;
        let mut prev = t.centerline[start].point;
        for k in 1..=(2 * n + 2) {
            let cur = t.centerline[(start + k) % n].point;
            events.extend(timer.update(&t, k as u64, &prev, &cur));
            prev = cur;
            if timer.finished() {
                break;
            }
        }
        assert!(timer.finished(), "{}", t.name);
        assert_eq!(timer.gates_passed(), 2 * t.gates.len(), "{}", t.name);
        assert_eq!(events.iter().filter(|e| matches!(e, RaceEvent::Lap { .. })).count(), 2);
        assert!(matches!(events.last(), Some(RaceEvent::Finish { .. })));
        let splits: f64 = timer.gate_splits().iter().sum();
        assert!((splits - timer.last_gate_tick() as f64 / 60.0).abs() < 1e-9);
    }
}
