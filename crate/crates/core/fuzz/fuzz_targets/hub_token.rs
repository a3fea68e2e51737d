#![no_main]

use everhub::auth::{HubToken, TokenSigner};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(t) = HubToken::decode(data) {
        assert_eq!(HubToken::decode(&t.encode()).as_ref(), Ok(&t));
    }
    let signer = TokenSigner::new(b"fuzz-secret-key-0123456789abcdef".to_vec());
    let _ = signer.verify(data, 1_700_000_000_000);
});
