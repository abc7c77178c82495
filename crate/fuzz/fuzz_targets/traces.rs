//! Session-trace files: decoding plus replay validation must never panic on
//! corrupt or adversarial trace dumps.

#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(traces) = sm2::inference::load_traces(text) {
        for t in &traces {
            let _ = t.validate();
        }
    }
});
