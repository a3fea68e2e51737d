#![no_main]

use std::path::Path;

use everhub::api::HubConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(mut c) = HubConfig::from_toml(data, Path::new("fuzz.toml")) {
        let _ = c.validate();
    }
});
