#![no_main]

use libfuzzer_sys::fuzz_target;
use qctc::config::Config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = Config::from_toml(text) {
        // Anything accepted must survive a round trip unchanged.
        let text = cfg.to_toml().expect("serializable");
        let again = Config::from_toml(&text).expect("round trip parses");
        assert_eq!(text, again.to_toml().expect("serializable"));
    }
});
