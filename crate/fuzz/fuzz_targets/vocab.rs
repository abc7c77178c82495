//! Vocabulary files: parsing must never panic; accepted vocabularies give a
//! bijection between ids and tokens.

#![no_main]
use libfuzzer_sys::fuzz_target;
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(v) = sm2::data::Vocab::from_text(text, Path::new("fuzz")) {
        for id in 0..v.len() as u32 {
            assert_eq!(v.id(v.token(id)), id, "id/token round trip broke");
        }
    }
});
