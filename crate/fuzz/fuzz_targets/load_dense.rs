#![no_main]

use dualenc::index::disk::read_dense;
use dualenc::index::DocTable;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let table = DocTable::from_ids((0..4).map(|i| format!("d{i}")).collect()).unwrap();
    if let Ok(index) = read_dense(data, table, String::new()) {
        assert_eq!(index.num_docs(), 4);
        assert!(index.raw_rows().iter().all(|v| v.is_finite()));
    }
});
