//! The dataset reader must reject or accept arbitrary bytes without
//! panicking or over-allocating; accepted inputs must re-serialize to
//! a byte-stable form (bit-exact from the first write onward, even for
//! non-finite pixel payloads).

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = dior::data::read_dataset_bytes(data) {
        let mut first = Vec::new();
        dior::data::write_dataset(&ds, &mut first).unwrap();
        let back = dior::data::read_dataset_bytes(&first).unwrap();
        let mut second = Vec::new();
        dior::data::write_dataset(&back, &mut second).unwrap();
        assert_eq!(first, second);
    }
});
