#![no_main]

use intq::container::{encode_metadata, parse_metadata};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(meta) = parse_metadata(text) {
            if let Ok(again) = encode_metadata(&meta) {
                assert_eq!(parse_metadata(&again).expect("canonical text parses"), meta);
            }
        }
    }
});
