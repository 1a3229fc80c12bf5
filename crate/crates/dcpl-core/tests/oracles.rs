//! Values frozen from an independent exact-quadrature computation (numpy,
//! aliasing-free grid) and closed-form constants.

use std::sync::Arc;

use dcpl_core::decoupling::{decoupling_ratio, ExponentTriple};
use dcpl_core::fft::C64;
use dcpl_core::geometry::{CapTree, ScaleLadder};
use dcpl_core::synthesis::{power_sums_terms, FrequencyLattice, FrequencyProfile, GridSpec};

/// Five columns with a few lattice points each, coefficients `c_j (1 + m/10)`.
fn sparse_profile() -> FrequencyProfile {
    let mut p = FrequencyProfile::zeros(Arc::new(FrequencyLattice::new(256)));
    let columns = [
        (0, C64::new(1.0, 0.0)),
        (3, C64::new(0.0, 0.5)),
        (10, C64::new(-2.0, 0.0)),
        (40, C64::new(1.0, 1.0)),
        (-17, C64::new(0.25, 0.0)),
    ];
    for (j, c) in columns {
        let sq: i64 = j * j;
        let lo = (sq - 256 + 255).div_euclid(256);
        let hi = (sq + 256).div_euclid(256);
        for m in lo..=hi {
            p.set(j, m, c * (1.0 + 0.1 * m as f64)).unwrap();
        }
    }
    p
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn lp_integrals_of_sparse_profile() {
    let p = sparse_profile();
    assert_eq!(p.coeffs.iter().filter(|c| c.norm() > 0.0).count(), 11);
    let grid = GridSpec::new(256, 4).unwrap();
    let sums = power_sums_terms(&p.terms(), grid, &[2.0, 4.0, 6.0]);
    assert!(rel(sums[0], 1_538_662.4) < 1e-12, "{}", sums[0]);
    assert!(rel(sums[1], 90_901_065.344) < 1e-12, "{}", sums[1]);
    assert!(rel(sums[2], 7_581_572_540.498385) < 1e-12, "{}", sums[2]);
}

#[test]
fn decoupling_ratio_of_sparse_profile() {
    let p = sparse_profile();
    let ladder = ScaleLadder::new(256).unwrap();
    let grid = GridSpec::new(256, 4).unwrap();
    let r44 = decoupling_ratio("sparse", &p, &ExponentTriple::new(4.0, 4.0, 0.5).unwrap(), &ladder, grid).unwrap();
    assert_eq!(r44.active_caps, 3);
    assert!(rel(r44.d_emp, 2.6076166343488074) < 1e-10, "{}", r44.d_emp);
    let r62 = decoupling_ratio("sparse", &p, &ExponentTriple::new(6.0, 2.0, 0.5).unwrap(), &ladder, grid).unwrap();
    assert!(rel(r62.d_emp, 1.9533302917213369) < 1e-10, "{}", r62.d_emp);
}

#[test]
fn ladder_values() {
    let l = ScaleLadder::new(65536).unwrap();
    assert_eq!(l.n, 2);
    assert_eq!(l.scales, vec![1.0, 16.0, 256.0]);
    // log2 R = 20: N = ceil(10 / log2 20) = 3.
    let l = ScaleLadder::new(1 << 20).unwrap();
    assert_eq!(l.n, 3);
    assert_eq!(l.scales, vec![1.0, 20.0, 400.0, 1024.0]);
    for r in [256u64, 1024, 4096] {
        assert_eq!(ScaleLadder::new(r).unwrap().n, 2);
    }
    let tree = CapTree::new(&ScaleLadder::new(256).unwrap());
    assert_eq!(tree.level(1).len(), 16);
    assert_eq!(tree.thetas().len(), 32);
}

#[test]
fn exponent_triples() {
    let cases = [((6.0, 6.0, 1.0), (3.0, 2.0), 3.0), ((4.0, 4.0, 0.5), (0.0, 0.5), 0.5), ((6.0, 2.0, 0.5), (0.0, 0.0), 0.0)];
    for ((p, q, b), (e1, e2), dom) in cases {
        let t = ExponentTriple::new(p, q, b).unwrap();
        let (a, c) = t.power_terms();
        assert!((a - e1).abs() < 1e-12 && (c - e2).abs() < 1e-12, "{t:?}");
        assert_eq!(t.dominant_exponent(), dom);
        assert_eq!(t.log_exponent_allowance(), 30.0 + 3.0 * p);
    }
}
