#![no_main]

use drlora::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = ExperimentConfig::from_toml(text) {
        let _ = config.validate();
        if let Ok(again) = config.to_toml() {
            assert!(ExperimentConfig::from_toml(&again).is_ok());
        }
    }
});
