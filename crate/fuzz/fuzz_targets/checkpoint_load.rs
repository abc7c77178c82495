//! Full checkpoint decoder: a fuzzer-built directory (manifest before the
//! first NUL, blob bytes after) must load or fail cleanly. Oversized
//! architectures are skipped so the harness cannot be OOM-killed for
//! allocating exactly what a giant manifest asks for.

#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some(nul) = data.iter().position(|&b| b == 0) else {
        return;
    };
    let (man_bytes, rest) = data.split_at(nul);
    let blob = &rest[1..];
    let Ok(man_text) = std::str::from_utf8(man_bytes) else {
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(sm2::checkpoint::MANIFEST_FILE), man_text).unwrap();
    let blobs = dir.path().join(sm2::checkpoint::BLOBS_DIR);
    std::fs::create_dir(&blobs).unwrap();
    if let Ok(man) = sm2::checkpoint::parse_manifest(man_text, dir.path()) {
        let total: usize = sm2::model::param_specs(&man.config)
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum();
        if total > 4_000_000 {
            return;
        }
        for e in &man.params {
            std::fs::write(blobs.join(format!("{}.f32", e.name)), blob).unwrap();
        }
    }
    let _ = sm2::checkpoint::load(dir.path(), None, true);
});
