//! Policy and training-mode strings from the command line: parse must never
//! panic, and anything accepted must round-trip through its own label.

#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(p) = sm2::inference::Policy::parse(s) {
        let again = sm2::inference::Policy::parse(&p.label()).expect("label must re-parse");
        assert_eq!(p, again, "policy label round trip");
    }
    if let Ok(m) = sm2::training::TrainMode::parse(s) {
        let again = sm2::training::TrainMode::parse(&m.as_string()).expect("mode re-parse");
        assert_eq!(m, again, "mode string round trip");
    }
});
