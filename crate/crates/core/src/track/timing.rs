//! Gate and lap timing shared by the evaluation harness, demo recorder and
//! the network server.
//!
//! Gates may be taken out of order and each counts at most once per lap.
//! A lap closes on a correct crossing of gate 0 once the last gate has been
//! reached in the current lap, either by passing it or by progressing beyond
//! its station along the centerline.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{gate_crossing, Crossing, TrackSpec};
use crate::dynamics::TICK_RATE;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RaceEvent {
    Gate { index: usize, tick: u64, split: f64 },
    Lap { lap: usize, tick: u64, lap_time: f64 },
    Finish { tick: u64 },
}

impl RaceEvent {
    pub fn tick(&self) -> u64 {
        match *self {
            RaceEvent::Gate { tick, .. } | RaceEvent::Lap { tick, .. } | RaceEvent::Finish { tick } => tick,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LapTimer {
    laps_target: usize,
    passed: Vec<bool>,
    laps_done: usize,
    total_passed: usize,
    last_gate_tick: u64,
    lap_start_tick: u64,
    hint: usize,
    last_station: f64,
    progress: f64,
    finished: bool,
    gate_splits: Vec<f64>,
    lap_times: Vec<f64>,
}

impl LapTimer {
    /// A timer for a race starting at gate 0 on `start_tick`.
    pub fn new(track: &TrackSpec, laps: usize, start_tick: u64) -> Self {
        let start = track.locate(&track.gates[0].center);
        Self {
            laps_target: laps,
            passed: vec![false; track.gates.len()],
            laps_done: 0,
            total_passed: 0,
            last_gate_tick: start_tick,
            lap_start_tick: start_tick,
            hint: start.index,
            last_station: 0.0,
            progress: 0.0,
            finished: laps == 0,
            gate_splits: Vec::new(),
            lap_times: Vec::new(),
        }
    }

    pub fn laps_done(&self) -> usize {
        self.laps_done
    }
    pub fn gates_passed(&self) -> usize {
        self.total_passed
    }
    pub fn finished(&self) -> bool {
        self.finished
    }
    pub fn gate_splits(&self) -> &[f64] {
        &self.gate_splits
    }
    pub fn lap_times(&self) -> &[f64] {
        &self.lap_times
    }
    /// Unwrapped distance flown along the centerline since the start.
    pub fn progress(&self) -> f64 {
        self.progress
    }
    pub fn last_gate_tick(&self) -> u64 {
        self.last_gate_tick
    }

    /// Advances the timer with the motion `prev -> cur` that ended on `tick`.
    pub fn update(
        &mut self,
        track: &TrackSpec,
        tick: u64,
        prev: &Vector3<f64>,
        cur: &Vector3<f64>,
    ) -> Vec<RaceEvent> {
        let mut events = Vec::new();
        if self.finished {
            return events;
        }
        self.track_progress(track, cur);
        let n = track.gates.len();
        let last_station = track.gates[n - 1].station;
        for gate in &track.gates {
            if gate_crossing(gate, prev, cur) != Crossing::Passed {
                continue;
            }
            let i = gate.index;
            if i == 0 {
                let lap_progress = self.progress - self.laps_done as f64 * track.total_length;
                let reached_last = self.passed[n - 1] || lap_progress >= last_station;
                if !reached_last || self.passed[0] {
                    continue;
                }
            } else if self.passed[i] {
                continue;
            }
            self.passed[i] = true;
            self.total_passed += 1;
            let split = (tick - self.last_gate_tick) as f64 / TICK_RATE;
            self.last_gate_tick = tick;
            self.gate_splits.push(split);
            events.push(RaceEvent::Gate { index: i, tick, split });
            if i == 0 {
                let lap_time = (tick - self.lap_start_tick) as f64 / TICK_RATE;
                self.lap_start_tick = tick;
                self.lap_times.push(lap_time);
                events.push(RaceEvent::Lap { lap: self.laps_done, tick, lap_time });
                self.laps_done += 1;
                self.passed.iter_mut().for_each(|p| *p = false);
                if self.laps_done >= self.laps_target {
                    self.finished = true;
                    events.push(RaceEvent::Finish { tick });
                    break;
                }
            }
        }
        events
    }

    fn track_progress(&mut self, track: &TrackSpec, cur: &Vector3<f64>) {
        let mut loc = track.locate_near(cur, self.hint, 80);
        if loc.distance > 15.0 {
            loc = track.locate(cur);
        }
        self.hint = loc.index;
        let l = track.total_length;
        let mut delta = loc.station - self.last_station;
        if delta > l / 2.0 {
            delta -= l;
        } else if delta < -l / 2.0 {
            delta += l;
        }
        self.progress += delta;
        self.last_station = loc.station;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::{build_track, parse_sketch, TrackParams};

    fn square() -> TrackSpec {
        let s = parse_sketch("name: sq\n20 -20\n20 20\n-20 20\n-20 -20\n").unwrap();
        build_track(&s, &TrackParams::default()).unwrap()
    }

    fn fly_centerline(track: &TrackSpec, laps: usize, timer: &mut LapTimer) -> Vec<RaceEvent> {
        let mut events = Vec::new();
        let n = track.centerline.len();
        let mut prev = track.centerline[0].point;
        let mut tick = 0;
        for k in 1..=(n * laps) {
            let cur = track.centerline[k % n].point;
            tick += 1;
            events.extend(timer.update(track, tick, &prev, &cur));
            prev = cur;
        }
        events
    }

    #[test]
    fn one_lap_passes_every_gate_once() {
        let t = square();
        let mut timer = LapTimer::new(&t, 1, 0);
        let ev = fly_centerline(&t, 1, &mut timer);
        let gates: Vec<usize> = ev
            .iter()
            .filter_map(|e| match e {
                RaceEvent::Gate { index, .. } => Some(*index),
                _ => None,
            })
            .collect();
        assert_eq!(gates, vec![1, 2, 3, 0]);
        assert!(timer.finished());
        assert_eq!(timer.gates_passed(), 4);
    }

    #[test]
    fn two_laps_event_counts() {
        let t = square();
        let mut timer = LapTimer::new(&t, 2, 0);
        let ev = fly_centerline(&t, 2, &mut timer);
        let gate_events = ev.iter().filter(|e| matches!(e, RaceEvent::Gate { .. })).count();
        let lap_events = ev.iter().filter(|e| matches!(e, RaceEvent::Lap { .. })).count();
        assert_eq!(gate_events, 8);
        assert_eq!(lap_events, 2);
        let total: f64 = timer.gate_splits().iter().sum();
        assert!((total - timer.last_gate_tick() as f64 / TICK_RATE).abs() < 1e-9);
        let laps: f64 = timer.lap_times().iter().sum();
        assert!((laps - total).abs() < 1e-9);
    }

    #[test]
    fn reverse_flight_counts_nothing() {
        let t = square();
        let mut timer = LapTimer::new(&t, 1, 0);
        let n = t.centerline.len();
        let mut prev = t.centerline[0].point;
        for k in 1..=n {
            let cur = t.centerline[(n - k) % n].point;
            assert!(timer.update(&t, k as u64, &prev, &cur).is_empty());
            prev = cur;
        }
        assert_eq!(timer.gates_passed(), 0);
    }
}
