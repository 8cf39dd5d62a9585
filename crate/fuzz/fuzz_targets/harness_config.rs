#![no_main]

use libfuzzer_sys::fuzz_target;
use tsan_lab::experiments::harness::HarnessConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(parsed) = HarnessConfig::parse(text) {
        let again = HarnessConfig::parse(&parsed.to_text()).expect("printed form must parse");
        assert_eq!(again, parsed);
    }
});
