#![no_main]

use everhub::session::{replay, JournalRecord};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let records: Vec<JournalRecord> = data.lines().filter_map(|l| JournalRecord::parse_line(l).ok()).collect();
    for r in &records {
        let back = JournalRecord::parse_line(&r.to_line()).expect("serialized record parses");
        assert_eq!(&back, r);
    }
    let _ = replay(&records);
});
