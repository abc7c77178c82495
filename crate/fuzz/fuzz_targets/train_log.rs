//! Training-log auditor: arbitrary JSONL must produce a report or a typed
//! error, never panic — the auditor is run against logs from crashed runs.

#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(report) = sm2::verify::coverage_audit(text) {
        assert!(report.p_value.is_nan() || (0.0..=1.0).contains(&report.p_value));
        let _ = format!("{report}");
    }
});
