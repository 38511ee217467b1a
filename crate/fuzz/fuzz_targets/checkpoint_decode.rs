#![no_main]

use cardcount::model::CountModel;
use libfuzzer_sys::fuzz_target;

// Compared as bytes: decoded weights may hold NaN.
fuzz_target!(|data: &[u8]| {
    if let Ok(model) = CountModel::from_bytes(data) {
        let bytes = model.to_bytes();
        let again = CountModel::from_bytes(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.to_bytes(), bytes);
    }
});
