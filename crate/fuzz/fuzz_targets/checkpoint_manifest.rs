//! Checkpoint manifests: hostile JSON must be rejected with a typed error —
//! no panics, no unchecked shapes, no path-escaping blob names.

#![no_main]
use libfuzzer_sys::fuzz_target;
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(man) = sm2::checkpoint::parse_manifest(text, Path::new("fuzz")) {
        // Whatever parses must have passed the structural guards.
        assert_eq!(man.format_version, sm2::checkpoint::FORMAT_VERSION);
        assert!(man.config.check().is_ok());
        for e in &man.params {
            assert!(!e.name.contains('/') && !e.name.contains(".."));
        }
    }
});
