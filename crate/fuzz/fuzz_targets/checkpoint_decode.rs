#![no_main]

use libfuzzer_sys::fuzz_target;
use tsan_lab::experiments::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    let Ok(ckpt) = Checkpoint::decode(data) else {
        return;
    };
    let bytes = ckpt.encode().expect("decoded checkpoint must re-encode");
    assert_eq!(Checkpoint::decode(&bytes).expect("round trip"), ckpt);
    match ckpt.table {
        None => {
            let _ = ckpt.step_model();
        }
        // Large tables are valid but slow to build; they say nothing new about the decoder.
        Some((p, _)) if p <= 1024 => {
            let _ = ckpt.seso_model();
        }
        Some(_) => {}
    }
});
