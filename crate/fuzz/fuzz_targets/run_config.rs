#![no_main]

use libfuzzer_sys::fuzz_target;
use tsan_lab::experiments::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(parsed) = RunConfig::parse(text) {
        let again = RunConfig::parse(&parsed.to_text()).expect("printed form must parse");
        assert_eq!(again, parsed);
    }
});
