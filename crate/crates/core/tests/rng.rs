use bvib_core::rng::*;
use rand::Rng;

#[test]
fn same_seed_same_stream_reproduces() {
    let a: Vec<u64> = stream_rng(7, Stream::Noise(3))
        .random_iter()
        .take(8)
        .collect();
    let b: Vec<u64> = stream_rng(7, Stream::Noise(3))
        .random_iter()
        .take(8)
        .collect();
    assert_eq!(a, b);
}

#[test]
fn streams_are_independent() {
    let a: u64 = stream_rng(7, Stream::Noise(0)).random();
    let b: u64 = stream_rng(7, Stream::Noise(1)).random();
    let c: u64 = stream_rng(7, Stream::DeviceInit(0)).random();
    assert_ne!(a, b);
    assert_ne!(a, c);
}
