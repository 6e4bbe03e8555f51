mod common;

use common::{conv_case, ConvKind};
use drivenext::tensor::SplitMix64;

fn run(kind: ConvKind, cases: usize, seed: u64) {
    let mut rng = SplitMix64::new(seed);
    for _ in 0..cases {
        let (desc, rel) = conv_case(&mut rng, kind);
        assert!(rel <= 1e-12, "{desc}: rel {rel:e}");
    }
}

#[test]
fn dense_matches_direct_convolution() {
    run(ConvKind::Dense, 50, 1);
}

#[test]
fn depthwise_matches_direct_convolution() {
    run(ConvKind::Depthwise, 40, 2);
}

#[test]
fn grouped_matches_direct_convolution() {
    run(ConvKind::Grouped, 30, 3);
}
