#![no_main]

use everhub::runtime::{RuntimeAddress, RuntimeEndpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(addr) = data.parse::<RuntimeAddress>() {
        let again: RuntimeAddress = addr.to_string().parse().expect("displayed address parses");
        assert_eq!(again, addr);
        let _ = RuntimeEndpoint::new(addr, false, "fuzz");
    }
});
