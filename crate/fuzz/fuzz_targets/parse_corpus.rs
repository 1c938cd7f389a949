#![no_main]

use dualenc::repr::io::parse_corpus;
use dualenc::repr::TokenLimits;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let limits = TokenLimits { vocab_size: 1024, max_seq_len: 126 };
    // Parsing either succeeds with validated documents or errors; it must
    // never panic or hang on arbitrary bytes.
    if let Ok(docs) = parse_corpus(data, &limits) {
        for doc in &docs {
            assert!(!doc.tokens.is_empty());
            assert!(doc.tokens.iter().all(|&t| t < limits.vocab_size));
        }
    }
});
