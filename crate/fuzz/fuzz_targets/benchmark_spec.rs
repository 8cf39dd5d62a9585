#![no_main]

use libfuzzer_sys::fuzz_target;
use tsan_lab::data::BenchmarkSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(parsed) = BenchmarkSpec::parse(text) {
        let again = BenchmarkSpec::parse(&parsed.to_text()).expect("printed form must parse");
        assert_eq!(again, parsed);
    }
});
