mod common;

#[test]
fn seeded_pipeline_is_bitwise_reproducible() {
    let a = common::small_pipeline(21);
    let b = common::small_pipeline(21);
    assert_eq!(a.forward_fingerprint_before, a.forward_fingerprint_after);
    assert_eq!(a, b);
    let c = common::small_pipeline(22);
    assert_ne!(a.forward_bytes, c.forward_bytes);
}
