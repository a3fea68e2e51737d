#![no_main]

use everhub::repo::parse_repo_url;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(r) = parse_repo_url(data) {
        let again = parse_repo_url(&r.canonical_url).expect("canonical url parses");
        assert_eq!((&again.host, &again.owner, &again.name), (&r.host, &r.owner, &r.name));
        assert_eq!(again.canonical_url, r.canonical_url);
    }
});
