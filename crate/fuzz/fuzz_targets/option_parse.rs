#![no_main]

use intq::data::SyntheticKind;
use intq::model::{AttentionMode, BitTriple, LayerNormMode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(bits) = s.parse::<BitTriple>() {
        assert_eq!(bits.to_string().parse::<BitTriple>().expect("display parses"), bits);
    }
    let _ = s.parse::<AttentionMode>();
    let _ = s.parse::<LayerNormMode>();
    let _ = s.parse::<SyntheticKind>();
});
