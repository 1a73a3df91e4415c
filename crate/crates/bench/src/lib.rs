//! Fixtures shared by the benchmarks.

use jointlens::synthgen::{generate_joint, JointSpec};
use jointlens::{preprocess, DefectKind, NormalizedImage};

pub fn joint(seed: u64, kind: DefectKind) -> NormalizedImage {
    let j = generate_joint(&JointSpec::new(seed, kind)).expect("valid spec");
    preprocess(&j.image).expect("generator output is 256×256")
}

/// Three separated clusters of `per` points each in `dim` dimensions,
/// from a small deterministic LCG.
pub fn clusters(per: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut s: u64 = 0x9e37_79b9_7f4a_7c15;
    let mut next = || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    };
    (0..3 * per)
        .map(|i| {
            let c = (i / per) as f64 * 6.0;
            (0..dim).map(|d| if d == 0 { c } else { 0.0 } + next()).collect()
        })
        .collect()
}
