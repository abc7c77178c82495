//! Corpus loader: arbitrary src/tgt/align text must parse or error, never
//! panic. Sections are separated by `\n===\n` lines.

#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let mut parts = text.splitn(3, "\n===\n");
    let src = parts.next().unwrap_or("");
    let tgt = parts.next().unwrap_or("");
    let align = parts.next();
    if let Ok(corpus) = sm2::data::load_parallel_texts(src, tgt, align, None) {
        // Accepted corpora satisfy the sentence invariants by construction;
        // exercise the id mapping round trip as well.
        for ex in &corpus.examples {
            assert!(!ex.src.is_empty());
            assert_eq!(*ex.tgt.last().unwrap(), sm2::data::EOS);
        }
    }
});
