#![no_main]

use everhub::runtime::docker::BuildStreamDecoder;
use libfuzzer_sys::fuzz_target;

fn decode(chunks: impl Iterator<Item = Vec<u8>>) -> Vec<everhub::runtime::docker::BuildStreamEvent> {
    let mut d = BuildStreamDecoder::new();
    let mut out = Vec::new();
    for c in chunks {
        out.extend(d.push(&c));
    }
    out.extend(d.finish());
    out
}

// The decoded events must not depend on how the stream was chunked.
fuzz_target!(|data: &[u8]| {
    let Some((&step, body)) = data.split_first() else {
        return;
    };
    let step = usize::from(step).max(1);
    let whole = decode(std::iter::once(body.to_vec()));
    let split = decode(body.chunks(step).map(<[u8]>::to_vec));
    assert_eq!(whole, split);
});
