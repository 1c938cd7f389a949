#![no_main]

use dualenc::repr::io::parse_teacher_scores;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(scores) = parse_teacher_scores(data) {
        assert!(scores.iter().all(|s| s.score.is_finite()));
    }
});
