#![no_main]

use libfuzzer_sys::fuzz_target;
use tsan_lab::data::{decode_sequence, encode_sequence};

fuzz_target!(|data: &[u8]| {
    if let Ok(seq) = decode_sequence(data, "fuzz") {
        seq.validate().expect("decoded sequence must validate");
        let bytes = encode_sequence(&seq).expect("decoded sequence must re-encode");
        let again = decode_sequence(&bytes, "fuzz").expect("re-encoded sequence must decode");
        assert_eq!(again.len(), seq.len());
        assert_eq!(again.labels, seq.labels);
        assert_eq!(again.relevance, seq.relevance);
    }
});
