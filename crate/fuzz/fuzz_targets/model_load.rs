#![no_main]

use intq::container::Container;
use intq::model::{EncoderPlan, FloatEncoder, QuantizedEncoderModel};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(c) = Container::decode(data) else { return };
    let _ = FloatEncoder::from_container(&c);
    if let Ok(q) = QuantizedEncoderModel::from_container(&c) {
        // a model that loads must also compile
        let _ = EncoderPlan::compile(&q);
    }
});
