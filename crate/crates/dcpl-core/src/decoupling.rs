//! Empirical small cap decoupling constants against the predicted power laws.

use rayon::prelude::*;
use serde::Serialize;

use crate::cutoffs::linear_fit;
use crate::error::{invalid, Error, Result};
use crate::fft::{fft2, fft_size, Term, C64};
use crate::geometry::{ScaleLadder, SmallCapPartition};
use crate::synthesis::{make_family_raw, power_sums_terms, FamilySpec, FrequencyProfile, GridSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExponentTriple {
    pub p: f64,
    pub q: f64,
    pub beta: f64,
}

impl ExponentTriple {
    pub fn new(p: f64, q: f64, beta: f64) -> Result<Self> {
        if !(p >= 1.0 && p.is_finite()) || !(q >= 1.0 && q.is_finite()) {
            return invalid(format!("p and q must be finite and at least 1, got p={p}, q={q}"));
        }
        if !(0.5..=1.0).contains(&beta) {
            return invalid(format!("beta must lie in [1/2, 1], got {beta}"));
        }
        Ok(Self { p, q, beta })
    }

    /// Exponents of the two power-law terms of the bound.
    pub fn power_terms(&self) -> (f64, f64) {
        let ExponentTriple { p, q, beta } = *self;
        (beta * (p - p / q - 1.0) - 1.0, p * beta * (0.5 - 1.0 / q))
    }

    /// Largest of `0` and the two power-law exponents.
    pub fn dominant_exponent(&self) -> f64 {
        let (a, b) = self.power_terms();
        a.max(b).max(0.0)
    }

    /// `30 + 3p`.
    pub fn log_exponent_allowance(&self) -> f64 {
        30.0 + 3.0 * self.p
    }
}

/// `3/p + 1/q ≤ 1`.
pub fn admissible_exponents(t: &ExponentTriple) -> bool {
    3.0 / t.p + 1.0 / t.q <= 1.0 + 1e-15
}

/// `1 + R^{β(p−p/q−1)−1} + R^{pβ(1/2−1/q)}`.
pub fn bound_core(t: &ExponentTriple, r: u64) -> f64 {
    let (a, b) = t.power_terms();
    let r = r as f64;
    1.0 + r.powf(a) + r.powf(b)
}

/// The full bound with its `(log₂R)^{30+3p}` factor, and the core without it.
pub fn theoretical_bound(t: &ExponentTriple, r: u64) -> (f64, f64) {
    let core = bound_core(t, r);
    let l = (r as f64).log2();
    (l.powf(t.log_exponent_allowance()) * core, core)
}

#[derive(Clone, Debug, Serialize)]
pub struct DecouplingReport {
    pub triple: ExponentTriple,
    pub r: u64,
    pub family: String,
    /// `‖f‖_p^p`.
    pub numerator: f64,
    /// `(Σ_γ ‖f_γ‖_p^q)^{p/q}` over the caps with nonzero components.
    pub denominator: f64,
    pub active_caps: usize,
    pub d_emp: f64,
    pub bound_core: f64,
    pub log_margin: f64,
    pub allowance: f64,
    pub pass: bool,
}

/// `∫_cell |g|^p` for a component with few coefficients, sampled on the
/// smallest power-of-two grid holding four times its frequency extent.
/// Demodulation leaves `|g|` unchanged.
pub fn component_power_integral(terms: &[Term], r: u64, p: f64) -> f64 {
    if terms.is_empty() {
        return 0.0;
    }
    let lo1 = terms.iter().map(|t| t.0).min().unwrap_or(0);
    let lo2 = terms.iter().map(|t| t.1).min().unwrap_or(0);
    let ext = terms.iter().map(|t| (t.0 - lo1).max(t.1 - lo2)).max().unwrap_or(0) as usize + 1;
    let m = fft_size(4 * ext).max(4);
    let mut values = vec![C64::new(0.0, 0.0); m * m];
    for &(u1, u2, c) in terms {
        values[(u2 - lo2) as usize * m + (u1 - lo1) as usize] += c;
    }
    fft2(&mut values, m, true);
    let cell = (r as f64 / m as f64).powi(2);
    values.iter().map(|v| v.norm().powf(p)).sum::<f64>() * cell
}

/// `‖f_γ‖_p^p` for every small cap of the partition.
pub fn cap_power_integrals(f: &FrequencyProfile, part: &SmallCapPartition, p: f64) -> Vec<f64> {
    let r = f.r();
    part.caps
        .par_iter()
        .map(|iv| component_power_integral(&f.cap_terms(iv), r, p))
        .collect()
}

pub fn decoupling_ratio(family: &str, f: &FrequencyProfile, t: &ExponentTriple, ladder: &ScaleLadder, grid: GridSpec) -> Result<DecouplingReport> {
    if !admissible_exponents(t) {
        return invalid(format!("exponents p={}, q={} violate 3/p + 1/q <= 1", t.p, t.q));
    }
    if f.r() != ladder.r || grid.r != ladder.r {
        return invalid("profile, ladder and grid must share R");
    }
    if f.is_zero() {
        return Err(Error::UndefinedRatio("the decoupling ratio of the zero function".into()));
    }
    let numerator = power_sums_terms(&f.terms(), grid, &[t.p])[0];
    let part = SmallCapPartition::new(ladder, t.beta)?;
    let norms: Vec<f64> = cap_power_integrals(f, &part, t.p).into_iter().filter(|&v| v > 0.0).collect();
    let active_caps = norms.len();
    let sum: f64 = norms.iter().map(|v| v.powf(t.q / t.p)).sum();
    let denominator = sum.powf(t.p / t.q);
    let d_emp = numerator / denominator;
    let core = bound_core(t, ladder.r);
    let log_margin = (d_emp / core).ln() / ladder.log_r.ln();
    let allowance = t.log_exponent_allowance();
    Ok(DecouplingReport {
        triple: *t,
        r: ladder.r,
        family: family.to_string(),
        numerator,
        denominator,
        active_caps,
        d_emp,
        bound_core: core,
        log_margin,
        allowance,
        pass: log_margin <= allowance,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ExponentFit {
    pub family: String,
    pub triple: ExponentTriple,
    pub rs: Vec<u64>,
    pub d_emp: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// Root mean square residual of the fit in `log₂` units.
    pub residual: f64,
    pub predicted: f64,
}

impl ExponentFit {
    pub fn within(&self, slack: f64) -> bool {
        (self.slope - self.predicted).abs() <= slack
    }
}

/// Least-squares slope of `log₂ d_emp` against `log₂ R`.
pub fn fit_exponent(family: &str, t: &ExponentTriple, rs: &[u64], d_emp: &[f64]) -> Result<ExponentFit> {
    if rs.len() < 3 || rs.len() != d_emp.len() {
        return Err(Error::InvalidParameter(format!("an exponent fit needs at least 3 values of R, got {}", rs.len())));
    }
    let x: Vec<f64> = rs.iter().map(|&r| (r as f64).log2()).collect();
    let y: Vec<f64> = d_emp.iter().map(|d| d.log2()).collect();
    let (slope, intercept, _) = linear_fit(&x, &y);
    let residual = (x.iter().zip(&y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
    Ok(ExponentFit {
        family: family.to_string(),
        triple: *t,
        rs: rs.to_vec(),
        d_emp: d_emp.to_vec(),
        slope,
        intercept,
        residual,
        predicted: t.dominant_exponent(),
    })
}

/// Builds the family at each `R` and fits the growth of `d_emp`.
pub fn exponent_fit(spec: &FamilySpec, t: &ExponentTriple, rs: &[u64]) -> Result<(ExponentFit, Vec<DecouplingReport>)> {
    if rs.len() < 3 {
        return Err(Error::InvalidParameter(format!("an exponent fit needs at least 3 values of R, got {}", rs.len())));
    }
    let reports = rs.iter().map(|&r| family_report(spec, t, r)).collect::<Result<Vec<_>>>()?;
    let d: Vec<f64> = reports.iter().map(|r| r.d_emp).collect();
    Ok((fit_exponent(spec.kind.name(), t, rs, &d)?, reports))
}

fn family_report(spec: &FamilySpec, t: &ExponentTriple, r: u64) -> Result<DecouplingReport> {
    let ladder = ScaleLadder::new(r)?;
    let grid = GridSpec::new(r, 4)?;
    // The ratio is scale invariant, so the family needs no normalization.
    let f = make_family_raw(spec, &ladder)?;
    decoupling_ratio(spec.kind.name(), &f, t, &ladder, grid)
}

#[derive(Clone, Debug, Serialize)]
pub struct Battery {
    pub reports: Vec<DecouplingReport>,
    pub fits: Vec<ExponentFit>,
}

impl Battery {
    pub fn all_pass(&self) -> bool {
        self.reports.iter().all(|r| r.pass)
    }

    /// The family whose fitted slope comes closest to the predicted exponent of `t`.
    pub fn best_fit(&self, t: &ExponentTriple) -> Option<&ExponentFit> {
        self.fits
            .iter()
            .filter(|f| f.triple == *t)
            .min_by(|a, b| (a.slope - a.predicted).abs().total_cmp(&(b.slope - b.predicted).abs()))
    }
}

/// Every family against every triple; fits are added when at least three `R` are given.
pub fn run_battery(families: &[FamilySpec], triples: &[ExponentTriple], rs: &[u64]) -> Result<Battery> {
    let mut reports = Vec::new();
    let mut fits = Vec::new();
    for spec in families {
        for t in triples {
            // The partition depends on β, so each triple carries its own family instance.
            let spec = FamilySpec { beta: t.beta, ..*spec };
            let batch = rs.iter().map(|&r| family_report(&spec, t, r)).collect::<Result<Vec<_>>>()?;
            if rs.len() >= 3 {
                let d: Vec<f64> = batch.iter().map(|r| r.d_emp).collect();
                fits.push(fit_exponent(spec.kind.name(), t, rs, &d)?);
            }
            reports.extend(batch);
        }
    }
    Ok(Battery { reports, fits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::{make_family, FamilyKind};

    #[test]
    fn admissibility_examples() {
        let t = |p, q| ExponentTriple::new(p, q, 0.5).unwrap();
        assert!(admissible_exponents(&t(6.0, 2.0)));
        assert!(admissible_exponents(&t(4.0, 4.0)));
        assert!(!admissible_exponents(&t(3.0, 3.0)));
    }

    #[test]
    fn bound_core_exponent_arithmetic() {
        let r = 256u64;
        let rf = r as f64;
        let t = ExponentTriple::new(6.0, 6.0, 1.0).unwrap();
        assert!((bound_core(&t, r) - (1.0 + rf.powi(3) + rf.powi(2))).abs() < 1e-6);
        let t = ExponentTriple::new(4.0, 4.0, 0.5).unwrap();
        assert!((bound_core(&t, r) - (2.0 + rf.sqrt())).abs() < 1e-12);
        let t = ExponentTriple::new(6.0, 2.0, 0.5).unwrap();
        assert!((bound_core(&t, r) - 3.0).abs() < 1e-12);
        let (full, core) = theoretical_bound(&t, r);
        assert!((full / core - 8f64.powi(48)).abs() < 1e-6 * full / core);
    }

    #[test]
    fn component_integral_of_single_mode() {
        let v = component_power_integral(&[(5, 3, C64::new(0.0, 2.0))], 256, 4.0);
        assert!((v - 16.0 * 256.0 * 256.0).abs() < 1e-6);
    }

    #[test]
    fn component_integral_matches_full_grid() {
        let ladder = ScaleLadder::new(256).unwrap();
        let grid = GridSpec::new(256, 4).unwrap();
        let f = make_family(FamilyKind::RandomPhase, &ladder, 0.5, 11).unwrap();
        let part = SmallCapPartition::new(&ladder, 0.5).unwrap();
        for iv in part.caps.iter().step_by(7) {
            let terms = f.cap_terms(iv);
            let full = power_sums_terms(&terms, grid, &[4.0, 6.0]);
            let small = [component_power_integral(&terms, 256, 4.0), component_power_integral(&terms, 256, 6.0)];
            for (a, b) in full.iter().zip(small) {
                assert!((a - b).abs() <= 1e-9 * a, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn single_cap_ratio_is_one() {
        let ladder = ScaleLadder::new(256).unwrap();
        let grid = GridSpec::new(256, 4).unwrap();
        let t = ExponentTriple::new(4.0, 4.0, 0.5).unwrap();
        let f = make_family(FamilyKind::SingleCap, &ladder, 0.5, 1).unwrap();
        let rep = decoupling_ratio("single_cap", &f, &t, &ladder, grid).unwrap();
        assert_eq!(rep.active_caps, 1);
        assert!((rep.d_emp - 1.0).abs() < 1e-10);
        assert!(rep.pass);
    }

    #[test]
    fn rejects_inadmissible_and_zero() {
        let ladder = ScaleLadder::new(256).unwrap();
        let grid = GridSpec::new(256, 4).unwrap();
        let f = make_family(FamilyKind::Flat, &ladder, 0.5, 1).unwrap();
        let bad = ExponentTriple::new(3.0, 3.0, 0.5).unwrap();
        assert!(decoupling_ratio("flat", &f, &bad, &ladder, grid).is_err());
        let ok = ExponentTriple::new(6.0, 2.0, 0.5).unwrap();
        let zero = f.scaled(0.0);
        assert!(matches!(decoupling_ratio("zero", &zero, &ok, &ladder, grid), Err(Error::UndefinedRatio(_))));
    }

    #[test]
    fn fit_needs_three_points() {
        let t = ExponentTriple::new(4.0, 4.0, 0.5).unwrap();
        assert!(fit_exponent("x", &t, &[256, 1024], &[1.0, 2.0]).is_err());
        let fit = fit_exponent("x", &t, &[256, 1024, 4096], &[1.0, 2.0, 4.0]).unwrap();
        assert!((fit.slope - 0.5).abs() < 1e-12);
        assert!(fit.residual < 1e-12);
    }
}
