#![no_main]

use libfuzzer_sys::fuzz_target;
use qctc::engine::read_journal;

fuzz_target!(|data: &[u8]| {
    let _ = read_journal(data);
});
