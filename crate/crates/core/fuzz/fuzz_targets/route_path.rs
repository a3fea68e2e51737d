#![no_main]

use everhub::proxy::{validate_route_path, RouteTable, RouteTarget};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let table = RouteTable::new();
    let target = RouteTarget {
        backend: "127.0.0.1:1".into(),
        session_id: "s".into(),
        owner: "o".into(),
    };
    let valid = validate_route_path(data).is_ok();
    assert_eq!(table.register(data, target).is_ok(), valid);
    if valid {
        let hit = table.resolve(&format!("{data}x/y")).expect("registered prefix resolves");
        assert_eq!(hit.route_path, data);
    }
});
