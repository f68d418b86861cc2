#![no_main]

use intq::container::Container;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Anything that decodes must survive a re-encode round trip.
    if let Ok(c) = Container::decode(data) {
        let bytes = c.encode().expect("decoded container re-encodes");
        assert_eq!(Container::decode(&bytes).expect("re-decodes"), c);
    }
});
