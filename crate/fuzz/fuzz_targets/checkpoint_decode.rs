#![no_main]

use drlora::trainer::{Container, Trainer};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(container) = Container::decode(data) {
        let encoded = container.encode().expect("decoded container re-encodes");
        let again = Container::decode(&encoded).expect("re-encoded container decodes");
        assert_eq!(again.encode().expect("stable encoding"), encoded);
        let _ = Trainer::from_container(&container);
    }
});
