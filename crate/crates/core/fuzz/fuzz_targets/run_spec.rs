#![no_main]

use libfuzzer_sys::fuzz_target;
use tbd_core::config::RunSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(spec) = RunSpec::parse(text, "fuzz") {
        let _ = spec.filter_config(None);
    }
});
