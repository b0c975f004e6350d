#![no_main]
use dqsgd::config::{parse_config, to_config_string};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(spec) = parse_config(text) {
        let again = parse_config(&to_config_string(&spec)).expect("serialized config parses");
        assert_eq!(again, spec);
    }
});
