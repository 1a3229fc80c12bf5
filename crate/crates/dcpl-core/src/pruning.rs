//! Amplitude-dependent pruning cascade. All pruned components are kept as
//! exact coefficient boxes: multiplying by a sum of tile weights is a
//! convolution with the weights' finite spectrum.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::cutoffs::{spectral_tile_averages, TileWeightSystem};
use crate::error::{invalid, Result};
use crate::fft::{SpecBox, Term};
use crate::geometry::{Cap, CapTree};
use crate::survey::CapSurvey;
use crate::synthesis::{stream_rows_multi, FrequencyProfile, GridSpec};

pub const DEFAULT_CP: f64 = 1e4;

/// Tiles of one cap that pass the amplitude threshold.
#[derive(Clone, Debug, Serialize)]
pub struct GaugeSet {
    pub level: usize,
    pub cap: usize,
    pub alpha: f64,
    pub cp: f64,
    /// Right-hand side `α² / (#τ_k)²`.
    pub threshold: f64,
    /// Weighted averages of the square function on every tile.
    pub averages: Vec<f64>,
    /// Sorted member tile indices.
    pub tiles: Vec<usize>,
}

impl GaugeSet {
    fn build(level: usize, cap: usize, alpha: f64, cp: f64, threshold: f64, gauge_factor: f64, averages: Vec<f64>) -> Self {
        let tiles = averages
            .iter()
            .enumerate()
            .filter(|(_, &a)| gauge_factor * a >= threshold)
            .map(|(i, _)| i)
            .collect();
        Self {
            level,
            cap,
            alpha,
            cp,
            threshold,
            averages,
            tiles,
        }
    }

    pub fn contains(&self, tile: usize) -> bool {
        self.tiles.binary_search(&tile).is_ok()
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.averages.len()];
        self.tiles.iter().for_each(|&t| m[t] = true);
        m
    }
}

/// Everything the cascade needs that does not depend on `α`: the tree, the
/// per-cap weight systems and the θ components. Shared between decompositions.
#[derive(Debug)]
pub struct PruneContext {
    pub tree: CapTree,
    pub grid: GridSpec,
    pub profile: FrequencyProfile,
    /// `weights[k][i]` for levels `k ≥ 1`; `weights[0]` is empty.
    pub weights: Vec<Vec<TileWeightSystem>>,
    pub thetas: Vec<SpecBox>,
    /// `#τ_k`: caps at level `k` whose component is not numerically zero.
    pub counts: Vec<usize>,
    /// `active[k][i]`: whether cap `(k, i)` counts towards `#τ_k`.
    pub active: Vec<Vec<bool>>,
    pub sup_f: f64,
    pub theta_sup: f64,
}

impl PruneContext {
    pub fn new(profile: &FrequencyProfile, tree: &CapTree, grid: GridSpec, survey: &CapSurvey) -> Result<Self> {
        if profile.r() != tree.ladder.r || grid.r != tree.ladder.r {
            return invalid("profile, tree and grid must share R");
        }
        let n = tree.depth();
        let weights = (0..=n)
            .map(|k| {
                if k == 0 {
                    return Ok(Vec::new());
                }
                tree.level(k).iter().map(|c| TileWeightSystem::for_cap(c, &tree.ladder)).collect()
            })
            .collect::<Result<Vec<_>>>()?;
        let thetas = tree
            .thetas()
            .iter()
            .map(|c| SpecBox::from_terms(&profile.cap_terms(&c.interval)))
            .collect();
        Ok(Self {
            tree: tree.clone(),
            grid,
            profile: profile.clone(),
            weights,
            thetas,
            counts: (0..=n).map(|k| survey.active_count(k)).collect(),
            active: (0..=n).map(|k| (0..tree.level(k).len()).map(|i| survey.is_active(k, i)).collect()).collect(),
            sup_f: survey.sup_total(),
            theta_sup: survey.theta_max(),
        })
    }

    /// Measures the survey itself (sup-norms only).
    pub fn measure(profile: &FrequencyProfile, tree: &CapTree, grid: GridSpec) -> Result<Self> {
        let survey = CapSurvey::measure(profile, tree, grid, false);
        Self::new(profile, tree, grid, &survey)
    }

    /// `C_p (log₂R)⁴`, the factor in front of the average in the gauge test.
    pub fn gauge_factor(&self, cp: f64) -> f64 {
        cp * self.tree.ladder.log_r.powi(4)
    }

    pub fn threshold(&self, alpha: f64, k: usize) -> f64 {
        match self.counts[k] {
            0 => f64::INFINITY,
            c => alpha * alpha / (c * c) as f64,
        }
    }

    /// Weighted tile averages of `Σ_{θ⊆τ} |g_θ|²` for cap `(k, i)`.
    fn square_averages(&self, k: usize, i: usize, comps: &[SpecBox]) -> Vec<f64> {
        let (lo, hi) = self.tree.theta_range(k, i);
        let square = comps[lo..hi]
            .iter()
            .filter(|b| !b.is_empty())
            .fold(SpecBox::empty(), |acc, b| acc.add(&b.abs2()));
        let plate = &self.weights[k][i].plate;
        if square.is_empty() {
            return vec![0.0; plate.tiles];
        }
        spectral_tile_averages(&square.terms(), plate)
    }

    pub fn prune(self: &Arc<Self>, alpha: f64, cp: f64) -> Result<PrunedDecomposition> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return invalid(format!("alpha must be positive and finite, got {alpha}"));
        }
        if !(cp > 0.0 && cp.is_finite()) {
            return invalid(format!("C_p must be positive and finite, got {cp}"));
        }
        let mut warnings = Vec::new();
        if alpha < 1.0 || alpha > self.tree.ladder.root() {
            warnings.push(format!("alpha = {alpha} lies outside [1, R^(1/2)]"));
        }
        let n = self.tree.depth();
        let factor = self.gauge_factor(cp);
        let mut gauges: Vec<Vec<GaugeSet>> = vec![Vec::new(); n + 1];
        let mut pruned: Vec<Vec<SpecBox>> = vec![Vec::new(); n + 1];
        let mut current = self.thetas.clone();
        for k in (1..=n).rev() {
            let threshold = self.threshold(alpha, k);
            let level: Vec<(GaugeSet, Vec<SpecBox>)> = (0..self.tree.level(k).len())
                .into_par_iter()
                .map(|i| {
                    let averages = self.square_averages(k, i, &current);
                    let gauge = GaugeSet::build(k, i, alpha, cp, threshold, factor, averages);
                    let (lo, hi) = self.tree.theta_range(k, i);
                    let parts = if gauge.is_empty() {
                        vec![SpecBox::empty(); hi - lo]
                    } else {
                        let mult = SpecBox::from_terms(&self.weights[k][i].sum_terms(&gauge.mask()));
                        current[lo..hi].iter().map(|b| b.multiply(&mult)).collect()
                    };
                    (gauge, parts)
                })
                .collect();
            let mut next = Vec::with_capacity(current.len());
            for (g, parts) in level {
                gauges[k].push(g);
                next.extend(parts);
            }
            pruned[k] = next.clone();
            current = next;
        }
        Ok(PrunedDecomposition {
            ctx: self.clone(),
            alpha,
            cp,
            gauges,
            pruned,
            warnings,
        })
    }
}

/// Builds the context and runs the cascade in one step.
pub fn prune_cascade(profile: &FrequencyProfile, alpha: f64, cp: f64, tree: &CapTree, grid: GridSpec) -> Result<PrunedDecomposition> {
    Arc::new(PruneContext::measure(profile, tree, grid)?).prune(alpha, cp)
}

#[derive(Clone, Debug)]
pub struct PrunedDecomposition {
    pub ctx: Arc<PruneContext>,
    pub alpha: f64,
    pub cp: f64,
    /// `gauges[k][i]` for levels `k ≥ 1`.
    pub gauges: Vec<Vec<GaugeSet>>,
    /// `pruned[k][θ]` holds `f_{k,θ}` for `k = 1..=N`.
    pub pruned: Vec<Vec<SpecBox>>,
    pub warnings: Vec<String>,
}

fn sum_boxes<'a>(boxes: impl Iterator<Item = &'a SpecBox>) -> Vec<Term> {
    boxes.fold(SpecBox::empty(), |acc, b| acc.add(b)).terms()
}

impl PrunedDecomposition {
    pub fn depth(&self) -> usize {
        self.ctx.tree.depth()
    }

    /// Component `f_{k,θ}`; level `N + 1` means the unpruned `f_θ`.
    pub fn component(&self, k: usize, theta: usize) -> &SpecBox {
        if k == self.depth() + 1 {
            &self.ctx.thetas[theta]
        } else {
            &self.pruned[k][theta]
        }
    }

    /// Coefficients of `f_k = Σ_θ f_{k,θ}`.
    pub fn level_terms(&self, k: usize) -> Vec<Term> {
        sum_boxes((0..self.ctx.thetas.len()).map(|t| self.component(k, t)))
    }

    /// `Σ_{U ∉ G_τ} ψ_U f_{m,θ}` with `τ` the level-`(m−1)` ancestor of θ;
    /// for `m = N + 1` this is `f_θ − f_{N,θ}`.
    pub fn bad_component(&self, m: usize, theta: usize) -> SpecBox {
        let k = m - 1;
        let i = self.ctx.tree.ancestor(theta, k);
        let g = &self.gauges[k][i];
        let src = self.component(m, theta);
        if src.is_empty() {
            return SpecBox::empty();
        }
        let complement: Vec<bool> = g.mask().iter().map(|b| !b).collect();
        let mult = SpecBox::from_terms(&self.ctx.weights[k][i].sum_terms(&complement));
        src.multiply(&mult)
    }

    /// Coefficients of `f_m^B` for `m = 2..=N`, or of `f − f_N` for `m = N + 1`.
    pub fn bad_terms(&self, m: usize) -> Vec<Term> {
        let parts: Vec<SpecBox> = (0..self.ctx.thetas.len()).into_par_iter().map(|t| self.bad_component(m, t)).collect();
        sum_boxes(parts.iter())
    }

    pub fn gauge_set(&self, cap: &Cap) -> Result<&GaugeSet> {
        if cap.level == 0 || cap.level > self.depth() {
            return invalid(format!("no gauge at level {}", cap.level));
        }
        let level = &self.gauges[cap.level];
        match level.get(cap.index) {
            Some(g) if self.ctx.tree.cap(cap.level, cap.index).interval == cap.interval => Ok(g),
            _ => invalid(format!("unknown cap ({}, {})", cap.level, cap.index)),
        }
    }

    /// Recomputes the gauge of cap `(k, i)` from the stored components.
    pub fn recompute_gauge(&self, k: usize, i: usize) -> GaugeSet {
        let averages = self.ctx.square_averages(k, i, if k == self.depth() { &self.ctx.thetas } else { &self.pruned[k + 1] });
        GaugeSet::build(
            k,
            i,
            self.alpha,
            self.cp,
            self.ctx.threshold(self.alpha, k),
            self.ctx.gauge_factor(self.cp),
            averages,
        )
    }

    /// Whether every recorded gauge agrees exactly with its recomputation.
    pub fn gauges_reproducible(&self) -> bool {
        (1..=self.depth()).all(|k| {
            self.gauges[k].iter().enumerate().all(|(i, g)| {
                let again = self.recompute_gauge(k, i);
                again.tiles == g.tiles && again.averages == g.averages
            })
        })
    }

    /// Fraction of surviving tiles over all gauges.
    pub fn kept_fraction(&self) -> f64 {
        let (mut kept, mut total) = (0usize, 0usize);
        for g in self.gauges.iter().flatten() {
            kept += g.len();
            total += g.averages.len();
        }
        if total == 0 {
            0.0
        } else {
            kept as f64 / total as f64
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InvariantReport {
    pub alpha: f64,
    pub cp: f64,
    pub sup_f: f64,
    /// `sup |f_N − f_1 − Σ_m f_m^B|` with the bad parts built from complements.
    pub telescoping_residual: f64,
    /// `max (|f_{k,θ}| − |f_{k+1,θ}|)` over nodes, θ and `k = 1..=N`.
    pub monotonicity_violation: f64,
    /// Largest coefficient-energy fraction of any `f_{k,θ}` outside `2(N−k+1)θ`.
    pub leakage: f64,
    /// The same with the tighter dilate `2(N−k)θ` for `k < N` (informational).
    pub leakage_tight: f64,
    /// `sup |(f_m − f_{m−1}) − f_m^B| / ‖f‖_∞` over `m = 2..=N`.
    pub reconstruction_residual: f64,
    pub gauges_reproducible: bool,
    pub kept_fraction: f64,
}

/// Fraction of the energy of `b` outside the `λ`-dilate of cap `theta`.
pub fn leakage_fraction(b: &SpecBox, theta: &Cap, r: f64, lambda: f64) -> f64 {
    let total = b.energy();
    if total == 0.0 {
        return 0.0;
    }
    let c = theta.center.0;
    let hw = theta.width() / 2.0;
    let (v_lo, v_hi) = (-1.0 / r, hw * hw + 1.0 / r);
    let (v0, t) = (0.5 * (v_lo + v_hi), 0.5 * (v_hi - v_lo));
    let outside: f64 = b
        .iter()
        .filter(|&(u1, u2, _)| {
            let (x1, x2) = (u1 as f64 / r, u2 as f64 / r);
            let v = x2 - (c * c + 2.0 * c * (x1 - c));
            (x1 - c).abs() > lambda * hw + 1e-12 || (v - v0).abs() > lambda * t + 1e-12
        })
        .map(|(_, _, z)| z.norm_sqr())
        .sum();
    outside / total
}

pub fn pruning_invariant_report(d: &PrunedDecomposition) -> InvariantReport {
    let ctx = &d.ctx;
    let n = d.depth();
    let grid = ctx.grid;
    let r = ctx.tree.ladder.r_f64();
    let sup_f = ctx.sup_f.max(f64::MIN_POSITIVE);

    let mut spectra: Vec<Vec<Term>> = vec![d.level_terms(n), d.level_terms(1)];
    spectra.extend((2..=n).map(|m| d.bad_terms(m)));
    let diffs: Vec<Vec<Term>> = (2..=n).map(|m| d.level_terms(m - 1)).collect();
    let levels: Vec<Vec<Term>> = (2..=n).map(|m| d.level_terms(m)).collect();
    let refs: Vec<&[Term]> = spectra.iter().chain(&diffs).chain(&levels).map(|v| v.as_slice()).collect();
    let bad_count = n - 1;
    let parts = stream_rows_multi(&refs, grid, || (0.0f64, 0.0f64), |(tele, recon), _, rows| {
        for x in 0..grid.m {
            let mut s = rows[0][x] - rows[1][x];
            for b in &rows[2..2 + bad_count] {
                s -= b[x];
            }
            *tele = tele.max(s.norm());
            for j in 0..bad_count {
                let lower = rows[2 + bad_count + j][x];
                let upper = rows[2 + 2 * bad_count + j][x];
                let e = (upper - lower - rows[2 + j][x]).norm();
                *recon = recon.max(e);
            }
        }
    });
    let (telescoping_residual, recon) = parts.iter().fold((0.0f64, 0.0f64), |a, p| (a.0.max(p.0), a.1.max(p.1)));

    let thetas = ctx.tree.thetas();
    let monotonicity_violation = (0..thetas.len())
        .filter(|&t| !ctx.thetas[t].is_empty())
        .map(|t| {
            let chain: Vec<Vec<Term>> = (1..=n + 1).map(|k| d.component(k, t).terms()).collect();
            let refs: Vec<&[Term]> = chain.iter().map(|v| v.as_slice()).collect();
            stream_rows_multi(&refs, grid, || f64::NEG_INFINITY, |worst, _, rows| {
                for x in 0..grid.m {
                    for k in 0..n {
                        *worst = worst.max(rows[k][x].norm() - rows[k + 1][x].norm());
                    }
                }
            })
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
        })
        .fold(0.0f64, f64::max);

    let mut leakage = 0.0f64;
    let mut leakage_tight = 0.0f64;
    for k in 1..=n {
        for (t, theta) in thetas.iter().enumerate() {
            let b = &d.pruned[k][t];
            leakage = leakage.max(leakage_fraction(b, theta, r, 2.0 * (n - k + 1) as f64));
            if k < n {
                leakage_tight = leakage_tight.max(leakage_fraction(b, theta, r, 2.0 * (n - k) as f64));
            }
        }
    }

    InvariantReport {
        alpha: d.alpha,
        cp: d.cp,
        sup_f: ctx.sup_f,
        telescoping_residual,
        monotonicity_violation,
        leakage,
        leakage_tight,
        reconstruction_residual: recon / sup_f,
        gauges_reproducible: d.gauges_reproducible(),
        kept_fraction: d.kept_fraction(),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ReplacementReport {
    /// `sup |f − f_N|` over grid nodes.
    pub gap: f64,
    /// `K_rep · α / (C_p^{1/2} log₂R)`.
    pub bound: f64,
    pub k_rep: f64,
    pub pass: bool,
    /// Nodes with `|f| > α`.
    pub superlevel_nodes: usize,
    /// Nodes with `|f| > α` but `|f_N| ≤ α/2`.
    pub inclusion_failures: usize,
    /// Whether the inclusion is implied (gap below `α/2`).
    pub inclusion_applies: bool,
}

pub fn replacement_gap(d: &PrunedDecomposition, k_rep: f64) -> ReplacementReport {
    let ctx = &d.ctx;
    let f = ctx.profile.terms();
    let f_n = d.level_terms(d.depth());
    let alpha = d.alpha;
    let parts = stream_rows_multi(&[&f, &f_n], ctx.grid, || (0.0f64, 0usize, 0usize), |(gap, sup, fail), _, rows| {
        for (a, b) in rows[0].iter().zip(&rows[1]) {
            *gap = gap.max((a - b).norm());
            if a.norm() > alpha {
                *sup += 1;
                if b.norm() <= alpha / 2.0 {
                    *fail += 1;
                }
            }
        }
    });
    let (gap, superlevel_nodes, inclusion_failures) =
        parts.into_iter().fold((0.0f64, 0, 0), |a, p| (a.0.max(p.0), a.1 + p.1, a.2 + p.2));
    let bound = k_rep * alpha / (d.cp.sqrt() * ctx.tree.ladder.log_r);
    ReplacementReport {
        gap,
        bound,
        k_rep,
        pass: gap <= bound,
        superlevel_nodes,
        inclusion_failures,
        inclusion_applies: gap < alpha / 2.0,
    }
}

/// The `q`-quantile of the finest-level gauge ratio
/// `(#θ) · (C_p (log₂R)⁴ ⨏_U |f_θ|²)^{1/2}` over active tiles. Choosing `α`
/// there prunes roughly a fraction `q` of the finest tiles.
pub fn alpha_at_gauge_quantile(ctx: &Arc<PruneContext>, cp: f64, q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return invalid(format!("quantile must lie in [0, 1], got {q}"));
    }
    let n = ctx.tree.depth();
    let count = ctx.counts[n] as f64;
    let factor = ctx.gauge_factor(cp);
    let mut ratios: Vec<f64> = (0..ctx.tree.level(n).len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let av = ctx.square_averages(n, i, &ctx.thetas);
            av.into_iter().filter(|&a| a > 0.0).map(move |a| count * (factor * a).sqrt()).collect::<Vec<_>>()
        })
        .collect();
    if ratios.is_empty() {
        return invalid("profile has no active tiles");
    }
    ratios.sort_by(f64::total_cmp);
    let pos = (q * (ratios.len() - 1) as f64).round() as usize;
    Ok(ratios[pos])
}

/// An amplitude above which every gauge is empty: each square function is at
/// most `#θ · max_θ ‖f_θ‖²_∞` and the weighted average never exceeds the sup.
pub fn vacuous_alpha(ctx: &PruneContext, cp: f64) -> f64 {
    let n = ctx.tree.depth();
    let widest = ctx.counts[1..].iter().copied().max().unwrap_or(0) as f64;
    (ctx.gauge_factor(cp) * ctx.thetas.len() as f64).sqrt() * ctx.theta_sup * widest * (1.0 + 1e-9) + f64::MIN_POSITIVE * n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ScaleLadder;
    use crate::synthesis::{make_family, FamilyKind};

    fn context(kind: FamilyKind) -> Arc<PruneContext> {
        let ladder = ScaleLadder::new(256).unwrap();
        let tree = CapTree::new(&ladder);
        let grid = GridSpec::new(256, 4).unwrap();
        let f = make_family(kind, &ladder, 0.5, 3).unwrap();
        Arc::new(PruneContext::measure(&f, &tree, grid).unwrap())
    }

    #[test]
    fn nothing_prunes_at_tiny_amplitude() {
        let ctx = context(FamilyKind::RandomPhase);
        let d = ctx.prune(1e-9, DEFAULT_CP).unwrap();
        assert_eq!(d.kept_fraction(), 1.0);
        let gap = replacement_gap(&d, 10.0);
        assert!(gap.gap <= 1e-12 * ctx.sup_f, "gap {}", gap.gap);
    }

    #[test]
    fn everything_prunes_above_the_vacuous_amplitude() {
        let ctx = context(FamilyKind::Flat);
        let d = ctx.prune(2.0 * vacuous_alpha(&ctx, DEFAULT_CP), DEFAULT_CP).unwrap();
        assert_eq!(d.kept_fraction(), 0.0);
        assert!(d.level_terms(d.depth()).iter().all(|t| t.2.norm() == 0.0));
    }

    #[test]
    fn invariants_at_median_amplitude() {
        let ctx = context(FamilyKind::Gaussian);
        let alpha = alpha_at_gauge_quantile(&ctx, DEFAULT_CP, 0.5).unwrap();
        let d = ctx.prune(alpha, DEFAULT_CP).unwrap();
        let kept = d.kept_fraction();
        assert!(kept > 0.0 && kept < 1.0, "kept {kept}");
        assert!(d.gauges_reproducible());
        let inv = pruning_invariant_report(&d);
        assert!(inv.telescoping_residual <= 1e-12 * inv.sup_f);
        assert!(inv.monotonicity_violation <= 1e-12);
        assert!(inv.leakage <= 1e-6);
        assert!(inv.reconstruction_residual <= 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        let ctx = context(FamilyKind::SingleCap);
        assert!(ctx.prune(0.0, DEFAULT_CP).is_err());
        assert!(ctx.prune(1.0, f64::NAN).is_err());
        assert!(alpha_at_gauge_quantile(&ctx, DEFAULT_CP, 1.5).is_err());
    }
}
