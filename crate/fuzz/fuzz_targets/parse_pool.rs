#![no_main]

use dualenc::repr::io::parse_pool;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_pool(data);
});
