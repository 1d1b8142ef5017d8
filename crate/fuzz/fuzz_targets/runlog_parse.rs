#![no_main]

use drlora::trainer::RunLog;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(log) = RunLog::from_ndjson(text) {
        let _ = log.header();
        let _ = log.final_record();
        let _ = log.events();
        let encoded = log.to_ndjson().expect("parsed log re-encodes");
        let again = RunLog::from_ndjson(&encoded).expect("re-encoded log parses");
        assert_eq!(again.records.len(), log.records.len());
    }
});
