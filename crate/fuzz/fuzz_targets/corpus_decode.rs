#![no_main]

use cardcount::datagen::Corpus;
use libfuzzer_sys::fuzz_target;

// Decoding normalises (the embedded spec is re-serialised), so the
// property is that one decode/encode cycle reaches a fixed point.
fuzz_target!(|data: &[u8]| {
    if let Ok(corpus) = Corpus::from_bytes(data) {
        let bytes = corpus.to_bytes();
        let again = Corpus::from_bytes(&bytes).expect("re-encoded corpus decodes");
        assert_eq!(again.to_bytes(), bytes);
    }
});
