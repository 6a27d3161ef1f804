//! The checkpoint reader must reject or accept arbitrary bytes without
//! panicking; accepted inputs must re-serialize to a byte-stable form
//! (bit-exact from the first write onward, even for non-finite weights).

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = dior::model::read_checkpoint_bytes(data) {
        let first = dior::model::write_checkpoint_bytes(&params);
        let back = dior::model::read_checkpoint_bytes(&first).unwrap();
        let second = dior::model::write_checkpoint_bytes(&back);
        assert_eq!(first, second);
    }
});
