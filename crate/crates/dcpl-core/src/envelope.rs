//! Both sides of the wave envelope estimate, for one amplitude or a sweep.
//!
//! The tile norms `‖S_U f‖₂²` use sharp restriction of the unpruned square
//! function and are evaluated in closed form from its coefficients. Gauge
//! membership comes from the pruning cascade at the same amplitude.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::cutoffs::{kappa_w, spectral_tile_averages, spectral_tile_masses};
use crate::error::{invalid, Result};
use crate::fft::{Term, C64};
use crate::geometry::{CapTree, PlateSpec, ScaleLadder};
use crate::pruning::{PruneContext, DEFAULT_CP};
use crate::survey::CapSurvey;
use crate::synthesis::{make_family_raw, stream_rows_multi, theta_sup_norms, FamilyKind, FamilySpec, FrequencyProfile, GridSpec};

/// Exponent allowed on `log₂R` in the envelope estimate.
pub const ENVELOPE_EXPONENT: f64 = 31.0;

#[derive(Clone, Debug, Serialize)]
pub struct EnvelopeReport {
    pub r: u64,
    pub alpha: f64,
    pub family: String,
    /// `α⁴ |{|f| > α}|` from the grid node count.
    pub lhs: f64,
    /// Uncertainty of `lhs` from nodes whose neighbour lies across the level set.
    pub lhs_error: f64,
    pub rhs_core: f64,
    /// `rhs_core` recomputed with `W_U`-weighted tile norms.
    pub rhs_weighted: f64,
    pub ratio: Option<f64>,
    pub log_exponent: Option<f64>,
    /// Gauge tiles summed over caps, for levels `1..=N`.
    pub gauge_population: Vec<usize>,
    /// Set when `rhs_core = 0`; then `lhs` must lie within its error bar.
    pub vacuous: bool,
    pub warnings: Vec<String>,
}

impl EnvelopeReport {
    /// Passes the `(log₂R)^E` gate; vacuous reports pass when `lhs` is within its error bar.
    pub fn passes(&self, exponent: f64) -> bool {
        match self.log_exponent {
            Some(e) => e <= exponent,
            None => self.lhs <= self.lhs_error,
        }
    }

    /// `rhs_weighted / rhs_core`, compared against `κ_W²` in the consistency check.
    pub fn convention_ratio(&self) -> Option<f64> {
        (self.rhs_core > 0.0).then(|| self.rhs_weighted / self.rhs_core)
    }
}

/// Amplitude-independent data for one profile: the pruning context and the
/// sharp and weighted tile norms of the unpruned square functions.
pub struct EnvelopeContext {
    pub family: String,
    pub prune: Arc<PruneContext>,
    /// `sharp[k][i][t] = ∫_{U_t} Σ_{θ⊆τ} |f_θ|²` for levels `k ≥ 1`.
    pub sharp: Vec<Vec<Vec<f64>>>,
    /// `weighted[k][i][t]`: the `W_U`-weighted average of the same square function.
    pub weighted: Vec<Vec<Vec<f64>>>,
}

impl EnvelopeContext {
    pub fn new(family: &str, profile: &FrequencyProfile, tree: &CapTree, grid: GridSpec) -> Result<Self> {
        let survey = CapSurvey::measure(profile, tree, grid, false);
        Self::with_survey(family, profile, tree, grid, &survey)
    }

    /// Reuses sup-norms already measured for `profile`.
    pub fn with_survey(family: &str, profile: &FrequencyProfile, tree: &CapTree, grid: GridSpec, survey: &CapSurvey) -> Result<Self> {
        let prune = Arc::new(PruneContext::new(profile, tree, grid, survey)?);
        let n = tree.depth();
        let plates: Vec<Vec<PlateSpec>> = (0..=n)
            .map(|k| {
                if k == 0 {
                    Ok(Vec::new())
                } else {
                    tree.level(k).iter().map(|c| PlateSpec::new(c, &tree.ladder)).collect()
                }
            })
            .collect::<Result<_>>()?;
        let per_theta: Vec<Vec<(Vec<f64>, Vec<f64>)>> = prune
            .thetas
            .par_iter()
            .enumerate()
            .map(|(ti, b)| {
                if b.is_empty() {
                    return Vec::new();
                }
                let terms = b.abs2().terms();
                (1..=n)
                    .map(|k| {
                        let plate = &plates[k][tree.ancestor(ti, k)];
                        (spectral_tile_masses(&terms, plate), spectral_tile_averages(&terms, plate))
                    })
                    .collect()
            })
            .collect();
        let empty = || -> Vec<Vec<Vec<f64>>> { plates.iter().map(|l| l.iter().map(|p| vec![0.0; p.tiles]).collect()).collect() };
        let mut sharp = empty();
        let mut weighted = empty();
        for (ti, levels) in per_theta.into_iter().enumerate() {
            for (k, (s, w)) in (1..=n).zip(levels) {
                let i = tree.ancestor(ti, k);
                sharp[k][i].iter_mut().zip(s).for_each(|(a, b)| *a += b);
                weighted[k][i].iter_mut().zip(w).for_each(|(a, b)| *a += b);
            }
        }
        Ok(Self {
            family: family.to_string(),
            prune,
            sharp,
            weighted,
        })
    }

    pub fn tree(&self) -> &CapTree {
        &self.prune.tree
    }

    /// Both sides at every amplitude in `alphas`, sharing one pass over the grid.
    pub fn reports(&self, alphas: &[f64], cp: f64) -> Result<Vec<EnvelopeReport>> {
        let levels = superlevel_counts(&self.prune.profile.terms(), self.prune.grid, alphas);
        alphas
            .iter()
            .zip(levels)
            .map(|(&alpha, (count, boundary))| self.report(alpha, cp, count, boundary))
            .collect()
    }

    pub fn report_at(&self, alpha: f64, cp: f64) -> Result<EnvelopeReport> {
        Ok(self.reports(&[alpha], cp)?.remove(0))
    }

    fn report(&self, alpha: f64, cp: f64, count: u64, boundary: u64) -> Result<EnvelopeReport> {
        let d = self.prune.prune(alpha, cp)?;
        let tree = self.tree();
        let n = tree.depth();
        let cell = self.prune.grid.cell_area();
        let scale = alpha.powi(4) * cell;
        let lhs = scale * count as f64;
        let lhs_error = scale * boundary as f64;
        let mut rhs_core = 0.0;
        let mut rhs_weighted = 0.0;
        let mut gauge_population = Vec::with_capacity(n);
        for k in 1..=n {
            let mut pop = 0;
            for (i, gauge) in d.gauges[k].iter().enumerate() {
                let area = self.prune.weights[k][i].plate.area();
                for &t in &gauge.tiles {
                    let s = self.sharp[k][i][t];
                    rhs_core += s * s / area;
                    let w = self.weighted[k][i][t];
                    rhs_weighted += area * w * w;
                }
                pop += gauge.len();
            }
            gauge_population.push(pop);
        }
        let log_l = tree.ladder.log_r.ln();
        let (ratio, log_exponent) = if rhs_core > 0.0 {
            let ratio = lhs / rhs_core;
            let e = if ratio > 0.0 { ratio.ln() / log_l } else { f64::NEG_INFINITY };
            (Some(ratio), Some(e))
        } else {
            (None, None)
        };
        Ok(EnvelopeReport {
            r: tree.ladder.r,
            alpha,
            family: self.family.clone(),
            lhs,
            lhs_error,
            rhs_core,
            rhs_weighted,
            ratio,
            log_exponent,
            gauge_population,
            vacuous: rhs_core <= 0.0,
            warnings: d.warnings,
        })
    }
}

/// Node counts of `{|f| > α}` and of nodes with a right or upper neighbour on
/// the other side of the level, for each `α`.
pub fn superlevel_counts(terms: &[Term], grid: GridSpec, alphas: &[f64]) -> Vec<(u64, u64)> {
    let r = grid.period();
    let h = grid.spacing();
    // The same field one grid row higher.
    let shifted: Vec<Term> = terms
        .iter()
        .map(|&(u1, u2, c)| (u1, u2, c * C64::from_polar(1.0, std::f64::consts::TAU * u2 as f64 * h / r)))
        .collect();
    let parts = stream_rows_multi(&[terms, &shifted], grid, || vec![(0u64, 0u64); alphas.len()], |acc, _, rows| {
        let m = rows[0].len();
        for (a, slot) in alphas.iter().zip(acc.iter_mut()) {
            for n1 in 0..m {
                let here = rows[0][n1].norm() > *a;
                let right = rows[0][(n1 + 1) % m].norm() > *a;
                let up = rows[1][n1].norm() > *a;
                if here {
                    slot.0 += 1;
                }
                if here != right || here != up {
                    slot.1 += 1;
                }
            }
        }
    });
    parts.into_iter().fold(vec![(0, 0); alphas.len()], |mut tot, p| {
        tot.iter_mut().zip(p).for_each(|(t, x)| {
            t.0 += x.0;
            t.1 += x.1;
        });
        tot
    })
}

/// Builds the context for `profile` and evaluates both sides at one amplitude.
pub fn envelope_sides(family: &str, profile: &FrequencyProfile, alpha: f64, cp: f64, tree: &CapTree, grid: GridSpec) -> Result<EnvelopeReport> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return invalid(format!("alpha must be positive and finite, got {alpha}"));
    }
    EnvelopeContext::new(family, profile, tree, grid)?.report_at(alpha, cp)
}

/// `{2^{j/2} : 1 ≤ 2^{j/2} ≤ R^{1/2}}`, `log₂R + 1` points.
pub fn alpha_grid(ladder: &ScaleLadder) -> Vec<f64> {
    (0..=ladder.log_r as i32).map(|j| 2f64.powf(j as f64 / 2.0)).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct EnvelopeScan {
    pub reports: Vec<EnvelopeReport>,
    /// Largest observed exponent per `(family, R)`.
    pub max_exponent: Vec<(String, u64, Option<f64>)>,
    pub kappa_w: f64,
}

impl EnvelopeScan {
    pub fn all_pass(&self, exponent: f64) -> bool {
        self.reports.iter().all(|r| r.passes(exponent))
    }
}

/// Sweep over families and ladders at the given amplitudes (the default grid when empty).
pub fn envelope_scan(families: &[FamilySpec], rs: &[u64], alphas: &[f64], cp: f64) -> Result<EnvelopeScan> {
    let mut reports = Vec::new();
    let mut max_exponent = Vec::new();
    for &r in rs {
        let ladder = ScaleLadder::new(r)?;
        let tree = CapTree::new(&ladder);
        let grid = GridSpec::new(r, 4)?;
        let grid_alphas = if alphas.is_empty() { alpha_grid(&ladder) } else { alphas.to_vec() };
        for spec in families {
            let (profile, survey) = normalized_family(spec, &tree, grid)?;
            let ctx = EnvelopeContext::with_survey(spec.kind.name(), &profile, &tree, grid, &survey)?;
            let batch = ctx.reports(&grid_alphas, cp)?;
            let top = batch.iter().filter_map(|b| b.log_exponent).reduce(f64::max);
            max_exponent.push((spec.kind.name().to_string(), r, top));
            reports.extend(batch);
        }
    }
    Ok(EnvelopeScan {
        reports,
        max_exponent,
        kappa_w: kappa_w(),
    })
}

/// The family scaled to `max_θ ‖f_θ‖_∞ = 1`, with its survey, from a single
/// pass over the canonical caps.
pub fn normalized_family(spec: &FamilySpec, tree: &CapTree, grid: GridSpec) -> Result<(FrequencyProfile, CapSurvey)> {
    let raw = make_family_raw(spec, &tree.ladder)?;
    let survey = CapSurvey::measure(&raw, tree, grid, false);
    let top = survey.theta_max();
    if top == 0.0 {
        return Ok((raw, survey));
    }
    Ok((raw.scaled(1.0 / top), survey.scaled(1.0 / top)))
}

/// The default family ensemble used by the scans.
pub fn default_families(seed: u64) -> Vec<FamilySpec> {
    FamilyKind::ALL.iter().map(|&k| FamilySpec::new(k, 0.5, seed)).collect()
}

/// Redraws the coefficient phases of `profile` `n` times, renormalizes, and
/// keeps the report with the largest ratio at `alpha`.
pub fn perturbed_max(profile: &FrequencyProfile, n: usize, seed: u64, alpha: f64, tree: &CapTree, grid: GridSpec) -> Result<Option<EnvelopeReport>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<EnvelopeReport> = None;
    for _ in 0..n {
        let mut p = profile.clone();
        for c in p.coeffs.iter_mut() {
            *c *= C64::from_polar(1.0, rng.gen::<f64>() * std::f64::consts::TAU);
        }
        let top = theta_sup_norms(&p, tree, grid).into_iter().fold(0.0, f64::max);
        if top > 0.0 {
            p = p.scaled(1.0 / top);
        }
        let rep = envelope_sides("perturbed", &p, alpha, DEFAULT_CP, tree, grid)?;
        let better = match (&best, rep.ratio) {
            (_, None) => false,
            (None, Some(_)) => true,
            (Some(b), Some(x)) => b.ratio.map_or(true, |y| x > y),
        };
        if better {
            best = Some(rep);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::FrequencyLattice;

    fn setup() -> (ScaleLadder, CapTree, GridSpec) {
        let ladder = ScaleLadder::new(256).unwrap();
        let tree = CapTree::new(&ladder);
        (ladder, tree, GridSpec::new(256, 4).unwrap())
    }

    #[test]
    fn plane_wave_fills_the_cell() {
        let (ladder, tree, grid) = setup();
        let mut p = FrequencyProfile::zeros(Arc::new(FrequencyLattice::new(ladder.r)));
        p.set(0, 0, C64::new(1.0, 0.0)).unwrap();
        let rep = envelope_sides("plane_wave", &p, 0.5, DEFAULT_CP, &tree, grid).unwrap();
        assert!((rep.lhs - 0.5f64.powi(4) * 256.0 * 256.0).abs() < 1e-6);
        assert_eq!(rep.lhs_error, 0.0);
        assert!(rep.rhs_core > 0.0);
        assert!(rep.ratio.is_some());
        assert!(!rep.warnings.is_empty());
    }

    #[test]
    fn zero_profile_is_vacuous() {
        let (ladder, tree, grid) = setup();
        let p = FrequencyProfile::zeros(Arc::new(FrequencyLattice::new(ladder.r)));
        let rep = envelope_sides("zero", &p, 2.0, DEFAULT_CP, &tree, grid).unwrap();
        assert_eq!(rep.lhs, 0.0);
        assert_eq!(rep.rhs_core, 0.0);
        assert!(rep.vacuous);
        assert!(rep.passes(ENVELOPE_EXPONENT));
    }

    #[test]
    fn alpha_grid_has_log_r_plus_one_points() {
        for r in [256, 1024, 4096] {
            let ladder = ScaleLadder::new(r).unwrap();
            let g = alpha_grid(&ladder);
            assert_eq!(g.len(), ladder.log_r as usize + 1);
            assert_eq!(g[0], 1.0);
            assert!((g.last().unwrap() - (r as f64).sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn superlevel_counts_match_dense_grid() {
        let (ladder, _, grid) = setup();
        let p = crate::synthesis::make_family(FamilyKind::RandomPhase, &ladder, 0.5, 3).unwrap();
        let field = crate::synthesis::synthesize(&p, grid).unwrap();
        let alphas = [1.0, 2.5, 4.0];
        let counts = superlevel_counts(&p.terms(), grid, &alphas);
        let m = grid.m;
        for (a, (count, boundary)) in alphas.iter().zip(counts) {
            let above = |n1: usize, n2: usize| field.values[(n2 % m) * m + n1 % m].norm() > *a;
            let dense = field.values.iter().filter(|v| v.norm() > *a).count() as u64;
            assert_eq!(count, dense);
            let mut b = 0;
            for n2 in 0..m {
                for n1 in 0..m {
                    let h = above(n1, n2);
                    if h != above(n1 + 1, n2) || h != above(n1, n2 + 1) {
                        b += 1;
                    }
                }
            }
            assert_eq!(boundary, b);
        }
    }
}
