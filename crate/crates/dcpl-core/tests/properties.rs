use std::sync::Arc;

use proptest::prelude::*;

use dcpl_core::cutoffs::{linear_fit, normalized_sinc};
use dcpl_core::decoupling::{admissible_exponents, decoupling_ratio, fit_exponent, ExponentTriple};
use dcpl_core::fft::C64;
use dcpl_core::geometry::{to_f64, CapTree, ScaleLadder, SmallCapPartition};
use dcpl_core::synthesis::{make_family_raw, power_sums_terms, FamilyKind, FamilySpec, FrequencyLattice, FrequencyProfile, GridSpec};

fn small_profile(entries: &[(usize, f64, f64)]) -> FrequencyProfile {
    let lattice = Arc::new(FrequencyLattice::new(256));
    let mut p = FrequencyProfile::zeros(lattice.clone());
    for &(i, re, im) in entries {
        let i = i % lattice.len();
        p.coeffs[i] = C64::new(re, im);
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ladder_is_geometric_up_to_the_root(log_r in 8u32..48) {
        let l = ScaleLadder::new(1u64 << log_r).unwrap();
        let lg = log_r as f64;
        prop_assert_eq!(l.scales.len(), l.n + 1);
        for k in 0..l.n {
            prop_assert_eq!(l.scales[k], lg.powi(k as i32));
        }
        let root = (l.r as f64).sqrt();
        prop_assert_eq!(l.scales[l.n], root);
        prop_assert!(lg.powi(l.n as i32 - 1) < root);
        prop_assert!(lg.powi(l.n as i32) >= root * (1.0 - 1e-12));
    }

    #[test]
    fn small_caps_tile_the_interval(log_r in 8u32..14, beta in 0.5f64..=1.0) {
        let l = ScaleLadder::new(1u64 << log_r).unwrap();
        let part = SmallCapPartition::new(&l, beta).unwrap();
        let d = (l.r_f64().powf(beta)).round() as usize;
        prop_assert_eq!(part.len(), 2 * d);
        prop_assert_eq!(to_f64(part.caps[0].a), -1.0);
        prop_assert_eq!(to_f64(part.caps[part.len() - 1].b), 1.0);
        for w in part.caps.windows(2) {
            prop_assert_eq!(w[0].b, w[1].a);
        }
        prop_assert!(part.caps.last().unwrap().closed_right);
    }

    #[test]
    fn plancherel_on_random_sparse_profiles(entries in prop::collection::vec((0usize..100_000, -2.0f64..2.0, -2.0f64..2.0), 1..12)) {
        let p = small_profile(&entries);
        prop_assume!(p.energy() > 1e-6);
        let grid = GridSpec::new(256, 4).unwrap();
        let l2 = power_sums_terms(&p.terms(), grid, &[2.0])[0];
        let exact = 256.0f64.powi(2) * p.energy();
        prop_assert!((l2 - exact).abs() <= 1e-10 * exact);
    }

    #[test]
    fn one_cap_profiles_decouple_trivially(col in -256i64..256, re in 0.1f64..2.0, beta in 0.5f64..=1.0) {
        let ladder = ScaleLadder::new(256).unwrap();
        let grid = GridSpec::new(256, 4).unwrap();
        let mut p = FrequencyProfile::zeros(Arc::new(FrequencyLattice::new(256)));
        let m = (col * col).div_euclid(256);
        p.set(col, m, C64::new(re, 0.5)).unwrap();
        let t = ExponentTriple::new(6.0, 2.0, beta).unwrap();
        let rep = decoupling_ratio("one", &p, &t, &ladder, grid).unwrap();
        prop_assert!((rep.d_emp - 1.0).abs() < 1e-10);
    }

    #[test]
    fn dominant_exponent_is_nonnegative(p in 1.0f64..12.0, q in 1.0f64..12.0, beta in 0.5f64..=1.0) {
        let t = ExponentTriple::new(p, q, beta).unwrap();
        let (a, b) = t.power_terms();
        prop_assert!(t.dominant_exponent() >= 0.0);
        prop_assert!(t.dominant_exponent() >= a.max(b));
        let _ = admissible_exponents(&t);
    }

    #[test]
    fn fit_recovers_power_laws(slope in -1.0f64..4.0, c in 0.1f64..10.0) {
        let t = ExponentTriple::new(4.0, 4.0, 0.5).unwrap();
        let rs = [256u64, 1024, 4096, 16384];
        let d: Vec<f64> = rs.iter().map(|&r| c * (r as f64).powf(slope)).collect();
        let fit = fit_exponent("law", &t, &rs, &d).unwrap();
        prop_assert!((fit.slope - slope).abs() < 1e-9);
        prop_assert!(fit.residual < 1e-9);
    }

    #[test]
    fn linear_fit_is_exact_on_lines(a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let x = [0.0, 1.0, 2.5, 4.0];
        let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let (fa, fb, _) = linear_fit(&x, &y);
        prop_assert!((fa - a).abs() < 1e-10 && (fb - b).abs() < 1e-10);
    }

    #[test]
    fn sinc_vanishes_at_nonzero_integers(n in 1i32..1000) {
        prop_assert!(normalized_sinc(n as f64).abs() < 1e-12);
        prop_assert!(normalized_sinc(-(n as f64)).abs() < 1e-12);
    }
}

#[test]
fn cap_levels_partition_and_nest() {
    let tree = CapTree::new(&ScaleLadder::new(1024).unwrap());
    for k in 0..=tree.depth() {
        let caps = tree.level(k);
        let total: f64 = caps.iter().map(|c| c.width()).sum();
        assert!((total - 2.0).abs() < 1e-12);
        for w in caps.windows(2) {
            assert_eq!(w[0].interval.b, w[1].interval.a);
        }
        for c in caps {
            let (lo, hi) = c.children;
            if k < tree.depth() {
                let kids = &tree.level(k + 1)[lo..hi];
                assert_eq!(kids[0].interval.a, c.interval.a);
                assert_eq!(kids[kids.len() - 1].interval.b, c.interval.b);
            }
        }
    }
}

#[test]
fn families_are_reproducible() {
    let ladder = ScaleLadder::new(256).unwrap();
    for kind in FamilyKind::ALL {
        let spec = FamilySpec::new(kind, 0.5, 42);
        let a = make_family_raw(&spec, &ladder).unwrap();
        let b = make_family_raw(&spec, &ladder).unwrap();
        assert_eq!(a.coeffs, b.coeffs, "{}", kind.name());
        assert!(!a.is_zero());
    }
}
