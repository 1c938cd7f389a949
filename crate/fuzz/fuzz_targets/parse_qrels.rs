#![no_main]

use dualenc::repr::io::parse_qrels;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(qrels) = parse_qrels(data) {
        qrels.validate().expect("parsed qrels satisfy their invariants");
    }
});
