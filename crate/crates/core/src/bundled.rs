//! Track sketches shipped with the crate: seven training loops and four
//! held-out test loops.

use crate::track::{build_track, parse_sketch, TrackParams, TrackSpec};

pub const TRAINING: [(&str, &str); 7] = [
    ("track01", include_str!("../tracks/track01.sketch")),
    ("track02", include_str!("../tracks/track02.sketch")),
    ("track03", include_str!("../tracks/track03.sketch")),
    ("track04", include_str!("../tracks/track04.sketch")),
    ("track05", include_str!("../tracks/track05.sketch")),
    ("track06", include_str!("../tracks/track06.sketch")),
    ("track07", include_str!("../tracks/track07.sketch")),
];

pub const TEST: [(&str, &str); 4] = [
    ("track08", include_str!("../tracks/track08.sketch")),
    ("track09", include_str!("../tracks/track09.sketch")),
    ("track10", include_str!("../tracks/track10.sketch")),
    ("track11", include_str!("../tracks/track11.sketch")),
];

pub fn sketch_text(name: &str) -> Option<&'static str> {
    TRAINING.iter().chain(TEST.iter()).find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Builds a bundled track with default parameters.
pub fn load(name: &str) -> Option<TrackSpec> {
    let text = sketch_text(name)?;
    let sketch = parse_sketch(text).expect("bundled sketch parses");
    Some(build_track(&sketch, &TrackParams::default()).expect("bundled sketch builds"))
}

pub fn training_tracks() -> Vec<TrackSpec> {
    TRAINING.iter().map(|(n, _)| load(n).unwrap()).collect()
}

pub fn test_tracks() -> Vec<TrackSpec> {
    TEST.iter().map(|(n, _)| load(n).unwrap()).collect()
}

pub fn all_tracks() -> Vec<TrackSpec> {
    training_tracks().into_iter().chain(test_tracks()).collect()
}
