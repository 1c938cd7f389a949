#![no_main]

use dualenc::repr::io::{parse_run, write_run};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(run) = parse_run(data) {
        // Accepted runs hold the canonical order and survive a rewrite.
        let mut buf = Vec::new();
        write_run(&mut buf, &run, "fuzz").expect("serializing a valid run");
        let again = parse_run(buf.as_slice()).expect("round-tripping a valid run");
        assert_eq!(run, again);
    }
});
