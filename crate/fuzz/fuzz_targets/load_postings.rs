#![no_main]

use dualenc::index::disk::read_postings;
use dualenc::index::DocTable;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let table = DocTable::from_ids((0..4).map(|i| format!("d{i}")).collect()).unwrap();
    if let Ok(index) = read_postings(data, table, None, String::new()) {
        // Accepted postings are sorted, unique, in range and nonzero.
        for term in 0..index.vocab_size() {
            let list = index.postings(term);
            for pair in list.windows(2) {
                assert!(pair[0].0 < pair[1].0);
            }
            assert!(list.iter().all(|&(o, i)| (o as usize) < index.num_docs() && i > 0));
        }
    }
});
