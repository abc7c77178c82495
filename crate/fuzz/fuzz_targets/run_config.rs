//! TOML run configuration: serde + the semantic checks must reject bad
//! configs with errors, not panics.

#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = toml::from_str::<sm2::model::ModelConfig>(text) {
        let _ = cfg.check();
    }
    if let Ok(cfg) = toml::from_str::<sm2::training::TrainConfig>(text) {
        let _ = cfg.validate();
    }
});
