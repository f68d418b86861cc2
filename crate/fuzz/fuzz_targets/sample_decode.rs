#![no_main]

use intq::data::decode_sample;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = decode_sample(data);
});
