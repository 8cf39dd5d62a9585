#![no_main]

use libfuzzer_sys::fuzz_target;
use tsan_lab::data::{format_manifest, parse_manifest};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(entries) = parse_manifest(text) {
        let again = parse_manifest(&format_manifest(&entries)).expect("formatted manifest must parse");
        assert_eq!(again, entries);
    }
});
