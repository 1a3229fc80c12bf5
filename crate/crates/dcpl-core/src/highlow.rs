//! Square functions and numerical checks of the high/low lemmas. Every
//! convolution with a filter or kernel is a multiplier on the exact
//! coefficient boxes; sup-norms and set measures come from grid samples.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cutoffs::{spectral_tile_averages, BoxKernel, FilterBank, FilterKind, ScaleWeight};
use crate::error::{invalid, Result};
use crate::fft::{fft2, RowSynth, SpecBox, Term, C64};
use crate::geometry::{wrap, CapTree, Interval, PlateSpec, Rational};
use crate::pruning::PrunedDecomposition;
use crate::survey::row_tile_sums;
use crate::synthesis::{stream_rows, stream_rows_multi, sup_norm_terms, FrequencyProfile, GridSpec, SampledField};

/// Constant allowance in front of the stated log power.
pub const DEFAULT_TOLERANCE: f64 = 100.0;

#[derive(Clone, Debug, Serialize)]
pub struct LemmaReport {
    pub lemma: String,
    pub params: BTreeMap<String, f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    /// `ln(ratio) / ln(log₂R)`.
    pub log_exponent: f64,
    pub stated_power: f64,
    pub tolerance: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

impl LemmaReport {
    /// Inequality report: passes when `ratio ≤ tolerance · (log₂R)^power`.
    pub fn inequality(lemma: &str, params: &[(&str, f64)], lhs: f64, rhs: f64, power: f64, tolerance: f64, log_r: f64) -> Self {
        let ratio = if rhs > 0.0 {
            lhs / rhs
        } else if lhs == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        Self {
            lemma: lemma.to_string(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            lhs,
            rhs,
            ratio,
            log_exponent: ratio.ln() / log_r.ln(),
            stated_power: power,
            tolerance,
            pass: ratio <= tolerance * log_r.powf(power),
            extra: BTreeMap::new(),
        }
    }

    /// Identity report: `ratio` is the relative residual, passing below `tolerance`.
    pub fn identity(lemma: &str, params: &[(&str, f64)], lhs: f64, rhs: f64, residual: f64, tolerance: f64) -> Self {
        let rel = if lhs > 0.0 { residual / lhs } else { residual };
        Self {
            lemma: lemma.to_string(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            lhs,
            rhs,
            ratio: rel,
            log_exponent: f64::NAN,
            stated_power: 0.0,
            tolerance,
            pass: rel <= tolerance,
            extra: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, v: f64) -> Self {
        self.extra.insert(key.to_string(), v);
        self
    }

    /// Whether the measured log exponent stays within `slack` of the stated power.
    pub fn exponent_within(&self, slack: f64) -> bool {
        !(self.log_exponent > self.stated_power + slack)
    }
}

/// Multiplies every coefficient at `u` by `mult(u / R)`.
pub fn apply_multiplier(b: &SpecBox, r: f64, mult: impl Fn((f64, f64)) -> f64) -> SpecBox {
    let mut out = b.clone();
    let (lo1, lo2, n1) = (b.lo1, b.lo2, b.n1);
    for (i, c) in out.data.iter_mut().enumerate() {
        let u1 = lo1 + (i % n1) as i64;
        let u2 = lo2 + (i / n1) as i64;
        *c *= mult((u1 as f64 / r, u2 as f64 / r));
    }
    out
}

pub fn filtered(b: &SpecBox, r_period: f64, kind: FilterKind, radius: f64) -> SpecBox {
    apply_multiplier(b, r_period, |xi| FilterBank::eta(kind, radius, xi))
}

/// `∫_cell |g|²` by Parseval.
pub fn l2_squared(b: &SpecBox, r: f64) -> f64 {
    r * r * b.energy()
}

/// `∫_cell |g|⁴`.
pub fn l4_fourth(b: &SpecBox, r: f64) -> f64 {
    if b.is_empty() {
        return 0.0;
    }
    l2_squared(&b.abs2(), r)
}

fn sum_boxes<'a>(it: impl Iterator<Item = &'a SpecBox>) -> SpecBox {
    it.fold(SpecBox::empty(), |acc, b| acc.add(b))
}

fn square_sum<'a>(it: impl Iterator<Item = &'a SpecBox>) -> SpecBox {
    it.filter(|b| !b.is_empty()).fold(SpecBox::empty(), |acc, b| acc.add(&b.abs2()))
}

/// Grid sup of `|a − b|` and of `|a|`, `|b|`.
fn sup_pair(a: &[Term], b: &[Term], grid: GridSpec) -> (f64, f64, f64) {
    stream_rows_multi(&[a, b], grid, || (0.0f64, 0.0f64, 0.0f64), |s, _, rows| {
        for (x, y) in rows[0].iter().zip(&rows[1]) {
            s.0 = s.0.max((x - y).norm());
            s.1 = s.1.max(x.norm());
            s.2 = s.2.max(y.norm());
        }
    })
    .into_iter()
    .fold((0.0, 0.0, 0.0), |a, p| (a.0.max(p.0), a.1.max(p.1), a.2.max(p.2)))
}

/// Level-`k` caps contained in cap `(s, i)`.
pub fn caps_within(tree: &CapTree, s: usize, i: usize, k: usize) -> Vec<usize> {
    let (lo, hi) = tree.theta_range(s, i);
    (0..tree.level(k).len())
        .filter(|&j| {
            let (a, b) = tree.theta_range(k, j);
            a >= lo && b <= hi
        })
        .collect()
}

/// Which components a square function is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum SquareSource {
    /// The unpruned `f_θ`.
    Profile,
    /// `f_{k,θ}` at the given level.
    Pruned(usize),
    /// `f^B_{m,θ}`.
    Bad(usize),
}

/// Per-θ components of the chosen source.
pub fn components(d: &PrunedDecomposition, source: SquareSource) -> Result<Vec<SpecBox>> {
    let n = d.depth();
    let count = d.ctx.thetas.len();
    match source {
        SquareSource::Profile => Ok(d.ctx.thetas.clone()),
        SquareSource::Pruned(k) if (1..=n).contains(&k) => Ok(d.pruned[k].clone()),
        SquareSource::Bad(m) if (2..=n + 1).contains(&m) => Ok((0..count).into_par_iter().map(|t| d.bad_component(m, t)).collect()),
        other => invalid(format!("no components for {other:?}")),
    }
}

#[derive(Clone, Debug)]
pub struct SquareField {
    pub level: usize,
    pub cap: Option<usize>,
    pub source: SquareSource,
    pub grid: GridSpec,
    /// Coefficients of `Σ_{θ⊆τ} |g_θ|²`.
    pub spectrum: SpecBox,
}

impl SquareField {
    pub fn values(&self) -> SampledField {
        SampledField::from_terms(&self.spectrum.terms(), self.grid)
    }

    pub fn integral(&self) -> f64 {
        let r = self.grid.period();
        r * r * self.spectrum.get(0, 0).re
    }

    /// Energy fraction of the coefficients outside `|ξ| ≤ radius`.
    pub fn support_leakage(&self, radius: f64) -> f64 {
        let r = self.grid.period();
        let total = self.spectrum.energy();
        if total == 0.0 {
            return 0.0;
        }
        let out: f64 = self
            .spectrum
            .iter()
            .filter(|&(u1, u2, _)| (u1 as f64 / r).hypot(u2 as f64 / r) > radius * (1.0 + 1e-12))
            .map(|(_, _, c)| c.norm_sqr())
            .sum();
        out / total
    }
}

/// `Σ_{θ⊆τ} |g_θ|²` for cap `(k, cap)`, or over all θ when `cap` is `None`.
pub fn square_field(d: &PrunedDecomposition, source: SquareSource, k: usize, cap: Option<usize>) -> Result<SquareField> {
    let tree = &d.ctx.tree;
    if k > d.depth() {
        return invalid(format!("level {k} exceeds depth {}", d.depth()));
    }
    let (lo, hi) = match cap {
        Some(i) if i < tree.level(k).len() => tree.theta_range(k, i),
        Some(i) => return invalid(format!("no cap {i} at level {k}")),
        None => (0, tree.thetas().len()),
    };
    let comps = components(d, source)?;
    Ok(SquareField {
        level: k,
        cap,
        source,
        grid: d.ctx.grid,
        spectrum: square_sum(comps[lo..hi].iter()),
    })
}

/// `(Σ_{nodes ∈ U} sq · cell)^{1/2}` with the sharp restriction to tile `U`.
pub fn restricted_square_norm(sq: &SampledField, plate: &PlateSpec, tile: usize) -> Result<f64> {
    if tile >= plate.tiles {
        return invalid(format!("tile {tile} out of range"));
    }
    Ok(restricted_square_norms(sq, plate)[tile])
}

/// Restricted square norms of every tile of the plate.
pub fn restricted_square_norms(sq: &SampledField, plate: &PlateSpec) -> Vec<f64> {
    let grid = sq.grid;
    let (m, h, cell) = (grid.m, grid.spacing(), grid.cell_area());
    let mut acc = vec![0.0; plate.tiles];
    let mut prefix = Vec::with_capacity(m + 1);
    for n2 in 0..m {
        prefix.clear();
        prefix.push(0.0);
        let mut run = 0.0;
        for v in &sq.values[n2 * m..(n2 + 1) * m] {
            run += v.re * cell;
            prefix.push(run);
        }
        row_tile_sums(plate, plate.row_shift(n2 as f64 * h), h, &prefix, &mut acc);
    }
    acc.into_iter().map(|a| a.max(0.0).sqrt()).collect()
}

fn check_level(d: &PrunedDecomposition, name: &str, v: usize, lo: usize, hi: usize) -> Result<()> {
    if v < lo || v > hi {
        return invalid(format!("{name} = {v} must lie in [{lo}, {hi}] (N = {})", d.depth()));
    }
    Ok(())
}

/// `F[i] = Σ_{θ⊆τ_i} g_θ` for every cap at level `k`.
fn cap_sums(tree: &CapTree, k: usize, comps: &[SpecBox]) -> Vec<SpecBox> {
    (0..tree.level(k).len())
        .into_par_iter()
        .map(|i| {
            let (lo, hi) = tree.theta_range(k, i);
            sum_boxes(comps[lo..hi].iter())
        })
        .collect()
}

/// `Σ_{i∈S} F_i · conj(Σ_{j near i, j∈S} F_j)` over the caps `S`.
fn near_pair_sum(tree: &CapTree, k: usize, caps: &[usize], parts: &[SpecBox], kappa: f64) -> SpecBox {
    let products: Vec<SpecBox> = caps
        .par_iter()
        .map(|&i| {
            if parts[i].is_empty() {
                return SpecBox::empty();
            }
            let near = tree.near_caps(k, i, kappa);
            let partner = sum_boxes(near.iter().filter(|j| caps.contains(j)).map(|&j| &parts[j]));
            if partner.is_empty() {
                return SpecBox::empty();
            }
            parts[i].multiply(&partner.conj_reflect())
        })
        .collect();
    sum_boxes(products.iter())
}

/// Both sides of the low-lemma identity for cap `(s, s_cap)`; the near sum
/// runs over caps inside `τ_s`.
pub fn low_lemma_residual(d: &PrunedDecomposition, m: usize, k: usize, s: usize, s_cap: usize, r: f64, kappa: f64) -> Result<LemmaReport> {
    let n = d.depth();
    check_level(d, "m", m, 2, n)?;
    check_level(d, "k", k, m, n)?;
    check_level(d, "s", s, 0, k)?;
    let tree = &d.ctx.tree;
    if s_cap >= tree.level(s).len() {
        return invalid(format!("no cap {s_cap} at level {s}"));
    }
    let rk = tree.ladder.scale(k);
    if !(r > 0.0) || r > (1.0 + 1e-12) / rk {
        return invalid(format!("r = {r} must lie in (0, 1/R_k = {}]", 1.0 / rk));
    }
    let period = tree.ladder.r_f64();
    let bad = components(d, SquareSource::Bad(m))?;
    let parts = cap_sums(tree, k, &bad);
    let inside = caps_within(tree, s, s_cap, k);
    let whole = sum_boxes(inside.iter().map(|&i| &parts[i]));
    let lhs = if whole.is_empty() { SpecBox::empty() } else { filtered(&whole.abs2(), period, FilterKind::Low, r) };
    let rhs = filtered(&near_pair_sum(tree, k, &inside, &parts, kappa), period, FilterKind::Low, r);
    let (res, a, b) = sup_pair(&lhs.terms(), &rhs.terms(), d.ctx.grid);
    Ok(LemmaReport::identity(
        "low",
        &[("m", m as f64), ("k", k as f64), ("s", s as f64), ("cap", s_cap as f64), ("r", r)],
        a,
        b,
        res,
        1e-6,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HighVariant {
    A,
    B,
    C,
}

impl HighVariant {
    pub fn name(&self) -> &'static str {
        match self {
            HighVariant::A => "high-a",
            HighVariant::B => "high-b",
            HighVariant::C => "high-c",
        }
    }
}

/// Ratio of the two sides of a high lemma.
pub fn high_lemma_ratio(d: &PrunedDecomposition, variant: HighVariant, m: usize, k: usize, l: usize, kappa: f64) -> Result<LemmaReport> {
    let n = d.depth();
    check_level(d, "m", m, 2, n)?;
    check_level(d, "k", k, 0, n)?;
    if variant == HighVariant::C && k + l > n {
        return invalid(format!("k + l = {} exceeds N = {n}", k + l));
    }
    let tree = &d.ctx.tree;
    let ladder = &tree.ladder;
    let period = ladder.r_f64();
    let bad = components(d, SquareSource::Bad(m))?;
    let caps = tree.level(k).len();
    let params = [("m", m as f64), ("k", k as f64), ("l", l as f64)];
    let (lhs, rhs, power) = match variant {
        HighVariant::A => {
            let radius = ladder.scale(k) / period;
            let lhs = l2_squared(&filtered(&square_sum(bad.iter()), period, FilterKind::High, radius), period);
            let pruned: Vec<&SpecBox> = (0..tree.thetas().len()).map(|t| d.component(m, t)).collect();
            let rhs: f64 = (0..caps)
                .into_par_iter()
                .map(|i| {
                    let (lo, hi) = tree.theta_range(k, i);
                    let sq = square_sum(pruned[lo..hi].iter().copied());
                    l2_squared(&filtered(&sq, period, FilterKind::High, radius), period)
                })
                .sum();
            (lhs, rhs, 1.0)
        }
        HighVariant::B | HighVariant::C => {
            let parts = cap_sums(tree, k, &bad);
            let rhs: f64 = parts.par_iter().map(|p| l4_fourth(p, period)).sum();
            let all: Vec<usize> = (0..caps).collect();
            let (inner, radius, power) = if variant == HighVariant::B {
                (square_sum(parts.iter()), 1.0 / ladder.scale(k), 1.0)
            } else {
                (near_pair_sum(tree, k, &all, &parts, kappa), 1.0 / ladder.scale(k + l), l as f64 + 3.0)
            };
            let lhs = l2_squared(&filtered(&inner, period, FilterKind::High, radius), period);
            (lhs, rhs, power)
        }
    };
    Ok(LemmaReport::inequality(variant.name(), &params, lhs, rhs, power, DEFAULT_TOLERANCE, ladder.log_r))
}

/// Hypothesis variant for the integrated constancy lemma (a).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleGate {
    /// `r ≤ 2 R_{k+3}/R`, with the log factor on the right.
    Body,
    /// `r ≤ R_{k+3}/(2R)`, without the log factor.
    Appendix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstancyKind {
    PointwiseTheta,
    PointwiseTau,
    IntegratedA,
    IntegratedB,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ConstancyParams {
    pub m: usize,
    pub k: usize,
    pub r: f64,
    pub gate: ScaleGate,
    /// A single cap (or θ); `None` aggregates over all of them.
    pub cap: Option<usize>,
}

/// `R_j` on the ladder, continued as `(log₂R)^j` past the top level.
pub fn extended_scale(tree: &CapTree, j: usize) -> f64 {
    let ladder = &tree.ladder;
    if j <= ladder.n {
        ladder.scale(j)
    } else {
        ladder.log_r.powi(j as i32)
    }
}

/// `max_x g(x) / (g ∗ K)(x)` over nodes where `g` exceeds `1e-9` of its mean.
fn pointwise_max_ratio(g: &SpecBox, conv: &SpecBox, grid: GridSpec) -> f64 {
    let floor = 1e-9 * g.get(0, 0).re.max(0.0);
    let (a, b) = (g.terms(), conv.terms());
    stream_rows_multi(&[&a, &b], grid, || 0.0f64, |worst, _, rows| {
        for (x, y) in rows[0].iter().zip(&rows[1]) {
            if x.re > floor {
                *worst = worst.max(x.re / y.re);
            }
        }
    })
    .into_iter()
    .fold(0.0, f64::max)
}

fn selected(cap: Option<usize>, count: usize) -> Result<Vec<usize>> {
    match cap {
        Some(i) if i < count => Ok(vec![i]),
        Some(i) => invalid(format!("index {i} out of range (count {count})")),
        None => Ok((0..count).collect()),
    }
}

pub fn constancy_ratio(d: &PrunedDecomposition, kind: ConstancyKind, p: ConstancyParams) -> Result<LemmaReport> {
    let n = d.depth();
    let tree = &d.ctx.tree;
    let ladder = &tree.ladder;
    let period = ladder.r_f64();
    let log_r = ladder.log_r;
    let grid = d.ctx.grid;
    match kind {
        ConstancyKind::PointwiseTheta => {
            let thetas = selected(p.cap, tree.thetas().len())?;
            let worst = thetas
                .iter()
                .filter(|&&t| !d.ctx.thetas[t].is_empty())
                .map(|&t| {
                    let g = d.ctx.thetas[t].abs2();
                    let kernel = BoxKernel::for_cap(&tree.thetas()[t], period);
                    let conv = apply_multiplier(&g, period, |xi| kernel.abs_dual_fourier(xi));
                    pointwise_max_ratio(&g, &conv, grid)
                })
                .fold(0.0, f64::max);
            let l1 = BoxKernel::for_cap(&tree.thetas()[0], period).dual_l1();
            let mut rep = LemmaReport::inequality("const-pointwise-theta", &[], worst, 1.0, 0.0, 10.0 * l1, log_r);
            if let Some(t) = p.cap {
                rep.params.insert("theta".into(), t as f64);
            }
            Ok(rep.with("kernel_l1", l1))
        }
        ConstancyKind::PointwiseTau => {
            check_level(d, "m", p.m, 1, n + 1)?;
            check_level(d, "k", p.k, 0, n)?;
            let weight = ScaleWeight { scale: ladder.scale(p.k) };
            let comps: Vec<&SpecBox> = (0..tree.thetas().len()).map(|t| d.component(p.m, t)).collect();
            let worst = selected(p.cap, tree.level(p.k).len())?
                .into_iter()
                .map(|i| {
                    let (lo, hi) = tree.theta_range(p.k, i);
                    let f = sum_boxes(comps[lo..hi].iter().copied());
                    if f.is_empty() {
                        return 0.0;
                    }
                    let g = f.abs2();
                    let conv = apply_multiplier(&g, period, |xi| weight.fourier(xi));
                    pointwise_max_ratio(&g, &conv, grid)
                })
                .fold(0.0, f64::max);
            Ok(LemmaReport::inequality(
                "const-pointwise-tau",
                &[("m", p.m as f64), ("k", p.k as f64)],
                worst,
                1.0,
                0.0,
                DEFAULT_TOLERANCE,
                log_r,
            ))
        }
        ConstancyKind::IntegratedA | ConstancyKind::IntegratedB => integrated_constancy(d, kind, p),
    }
}

/// The wave-envelope kernel `|ρ^∨|` of the dilate `(log₂R)³ U*_{τ_k,R}`.
fn envelope_kernel(tree: &CapTree, k: usize, i: usize) -> BoxKernel {
    let ladder = &tree.ladder;
    let r = ladder.r_f64();
    let l3 = ladder.log_r.powi(3);
    let tiles = ladder.tiles_per_cap(k) as f64;
    BoxKernel::new(tree.cap(k, i).tangent, 0.5 * l3 * tiles / r, 0.5 * l3 / r)
}

fn integrated_constancy(d: &PrunedDecomposition, kind: ConstancyKind, p: ConstancyParams) -> Result<LemmaReport> {
    let n = d.depth();
    let tree = &d.ctx.tree;
    let ladder = &tree.ladder;
    let period = ladder.r_f64();
    check_level(d, "m", p.m, 2, n)?;
    let bad = components(d, SquareSource::Bad(p.m))?;
    let caps = selected(p.cap, tree.level(p.k).len())?;
    let enveloped = |i: usize| -> (SpecBox, f64) {
        let (lo, hi) = tree.theta_range(p.k, i);
        let sq = square_sum(bad[lo..hi].iter());
        let kernel = envelope_kernel(tree, p.k, i);
        let e = l2_squared(&apply_multiplier(&sq, period, |xi| kernel.abs_dual_fourier(xi)), period);
        (sq, e)
    };
    if kind == ConstancyKind::IntegratedA {
        check_level(d, "k", p.k, 0, n)?;
        let top = extended_scale(tree, p.k + 3) / period;
        let limit = match p.gate {
            ScaleGate::Body => 2.0 * top,
            ScaleGate::Appendix => 0.5 * top,
        };
        if !(p.r > 0.0) || p.r > limit * (1.0 + 1e-12) {
            return invalid(format!("r = {} must lie in (0, {limit}]", p.r));
        }
        let (lhs, rhs) = caps
            .par_iter()
            .map(|&i| {
                let (sq, e) = enveloped(i);
                (l2_squared(&filtered(&sq, period, FilterKind::Annulus, p.r), period), e)
            })
            .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        let rep = LemmaReport::inequality(
            "const-integrated-a",
            &[("m", p.m as f64), ("k", p.k as f64), ("r", p.r)],
            lhs,
            rhs,
            1.0,
            DEFAULT_TOLERANCE,
            ladder.log_r,
        );
        let appendix_pass = rep.ratio <= DEFAULT_TOLERANCE;
        return Ok(rep.with("appendix_pass", f64::from(u8::from(appendix_pass))));
    }
    check_level(d, "k", p.k, p.m, n)?;
    let (lhs, rhs) = caps
        .par_iter()
        .map(|&i| {
            let (_, e) = enveloped(i);
            let g = &d.gauges[p.k][i];
            if g.is_empty() {
                return (e, 0.0);
            }
            let (lo, hi) = tree.theta_range(p.k, i);
            let sq = square_sum(d.ctx.thetas[lo..hi].iter());
            let plate = &d.ctx.weights[p.k][i].plate;
            let av = spectral_tile_averages(&sq.terms(), plate);
            let env: f64 = g.tiles.iter().map(|&t| plate.area() * av[t] * av[t]).sum();
            (e, env)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(LemmaReport::inequality(
        "const-integrated-b",
        &[("m", p.m as f64), ("k", p.k as f64)],
        lhs,
        rhs,
        1.0,
        DEFAULT_TOLERANCE,
        ladder.log_r,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DominationPart {
    A,
    B,
}

/// Weak high-domination of the bad parts at `(m, k)`. Part a compares the sup
/// of the low-filtered square sum with the pruning threshold; part b checks
/// the pointwise domination by the high-filtered sum at the nodes where
/// `α ≤ κ log₂R |f^B_{m,τ_k}|`.
pub fn weak_high_domination(d: &PrunedDecomposition, m: usize, k: usize, part: DominationPart, kappa: f64, kappa_prime: f64) -> Result<LemmaReport> {
    let n = d.depth();
    check_level(d, "m", m, 2, n)?;
    if k >= m {
        return invalid(format!("k = {k} must be below m = {m}"));
    }
    let tree = &d.ctx.tree;
    let ladder = &tree.ladder;
    let period = ladder.r_f64();
    let log_r = ladder.log_r;
    let grid = d.ctx.grid;
    let bad = components(d, SquareSource::Bad(m))?;
    let children = cap_sums(tree, m - 1, &bad);
    let radius = ladder.scale(m - 1) / period;
    let total = d.ctx.counts[m - 1] as f64;
    let params = [("m", m as f64), ("k", k as f64)];
    match part {
        DominationPart::A => {
            let sides: Vec<(f64, f64)> = (0..tree.level(k).len())
                .map(|i| {
                    let inside = caps_within(tree, k, i, m - 1);
                    let active = inside.iter().filter(|&&j| d.ctx.active[m - 1][j]).count() as f64;
                    let sq = square_sum(inside.iter().map(|&j| &children[j]));
                    let low = filtered(&sq, period, FilterKind::Low, radius);
                    let sup = if low.is_empty() { 0.0 } else { sup_norm_terms(&low.terms(), grid) };
                    let bound = if total > 0.0 {
                        d.alpha * d.alpha * active / (d.cp * log_r * log_r * total * total)
                    } else {
                        0.0
                    };
                    (sup, bound)
                })
                .collect();
            // Report the cap with the largest ratio.
            let ratio = |&(s, b): &(f64, f64)| if b > 0.0 { s / b } else if s > 0.0 { f64::INFINITY } else { 0.0 };
            let (lhs, rhs) = sides.iter().copied().max_by(|x, y| ratio(x).total_cmp(&ratio(y))).unwrap_or((0.0, 0.0));
            Ok(LemmaReport::inequality("whd-a", &params, lhs, rhs, 0.0, kappa, log_r))
        }
        DominationPart::B => {
            let mut qualifying = 0usize;
            let mut violations = 0usize;
            let mut worst = 0.0f64;
            for i in 0..tree.level(k).len() {
                let inside = caps_within(tree, k, i, m - 1);
                let whole = sum_boxes(inside.iter().map(|&j| &children[j]));
                if whole.is_empty() {
                    continue;
                }
                let sq = square_sum(inside.iter().map(|&j| &children[j]));
                let high = filtered(&sq, period, FilterKind::High, radius);
                let spectra = [whole.terms(), sq.terms(), high.terms()];
                let refs: Vec<&[Term]> = spectra.iter().map(|v| v.as_slice()).collect();
                let cut = d.alpha / (kappa * log_r);
                let parts = stream_rows_multi(&refs, grid, || (0usize, 0usize, 0.0f64), |acc, _, rows| {
                    for x in 0..grid.m {
                        if rows[0][x].norm() < cut {
                            continue;
                        }
                        acc.0 += 1;
                        let (s, h) = (rows[1][x].re, rows[2][x].norm());
                        let ratio = if h > 0.0 { s / h } else if s > 0.0 { f64::INFINITY } else { 0.0 };
                        acc.2 = acc.2.max(ratio);
                        if s > kappa_prime * h {
                            acc.1 += 1;
                        }
                    }
                });
                for (q, v, w) in parts {
                    qualifying += q;
                    violations += v;
                    worst = worst.max(w);
                }
            }
            Ok(LemmaReport::inequality("whd-b", &params, worst, 1.0, 0.0, kappa_prime, log_r)
                .with("qualifying_nodes", qualifying as f64)
                .with("violations", violations as f64))
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DichotomyVerdict {
    pub level: usize,
    pub cap: usize,
    pub broad: bool,
    pub narrow: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct DichotomySummary {
    pub nodes: usize,
    pub checks: usize,
    pub broad: usize,
    pub narrow: usize,
    pub neither: usize,
}

struct Dichotomy<'a> {
    tree: &'a CapTree,
    log_r: f64,
    /// `near[k][c]`: children-level caps near `c` at level `k`.
    near: Vec<Vec<Vec<usize>>>,
}

impl<'a> Dichotomy<'a> {
    fn new(tree: &'a CapTree, kappa: f64) -> Self {
        let near = (0..=tree.depth())
            .map(|k| (0..tree.level(k).len()).map(|i| tree.near_caps(k, i, kappa)).collect())
            .collect();
        Self {
            tree,
            log_r: tree.ladder.log_r,
            near,
        }
    }

    /// Verdict for cap `(k, i)` given the values of the level-`k+1` sums, and
    /// the child that realizes the narrow maximum.
    fn verdict(&self, k: usize, i: usize, child_vals: &[C64]) -> (DichotomyVerdict, usize) {
        let (c0, c1) = self.tree.cap(k, i).children;
        let whole: C64 = child_vals[c0..c1].iter().sum();
        let size = whole.norm();
        let mut bilinear = 0.0f64;
        let mut cluster = 0.0f64;
        let mut best = c0;
        for c in c0..c1 {
            let near = &self.near[k + 1][c];
            let s: C64 = near.iter().filter(|&&j| j >= c0 && j < c1).map(|&j| child_vals[j]).sum();
            if s.norm() > cluster {
                cluster = s.norm();
                best = c;
            }
            for c2 in c + 1..c1 {
                if near.binary_search(&c2).is_err() {
                    bilinear = bilinear.max((child_vals[c].norm() * child_vals[c2].norm()).sqrt());
                }
            }
        }
        let slack = 1.0 + 1e-12;
        let broad = size <= self.log_r.powi(3) * bilinear * slack;
        let narrow = size <= (1.0 + 1.0 / self.log_r) * cluster * slack;
        (DichotomyVerdict { level: k, cap: i, broad, narrow }, best)
    }

    /// Cap sums at every level from the θ values.
    fn level_values(&self, theta_vals: &[C64]) -> Vec<Vec<C64>> {
        (0..=self.tree.depth())
            .map(|k| {
                (0..self.tree.level(k).len())
                    .map(|i| {
                        let (lo, hi) = self.tree.theta_range(k, i);
                        theta_vals[lo..hi].iter().sum()
                    })
                    .collect()
            })
            .collect()
    }

    fn chain(&self, vals: &[Vec<C64>]) -> Vec<DichotomyVerdict> {
        let mut out = Vec::new();
        let mut cap = 0;
        for k in 0..self.tree.depth() {
            let (v, best) = self.verdict(k, cap, &vals[k + 1]);
            out.push(v);
            cap = best;
        }
        out
    }
}

/// Values of every `f^B_{m,θ}` along grid row `n2`.
fn bad_rows(bad: &[SpecBox], synth: &RowSynth, n2: usize) -> Vec<Vec<C64>> {
    let mut scratch = synth.scratch();
    bad.iter()
        .map(|b| {
            if b.is_empty() {
                return vec![C64::new(0.0, 0.0); synth.len()];
            }
            synth.row(&b.terms(), n2, &mut scratch);
            scratch.buf.clone()
        })
        .collect()
}

/// Broad/narrow verdicts along the chain of maximizing children at node `(n1, n2)`.
pub fn classify_point(d: &PrunedDecomposition, m: usize, node: (usize, usize), kappa: f64) -> Result<Vec<DichotomyVerdict>> {
    check_level(d, "m", m, 2, d.depth())?;
    let grid = d.ctx.grid;
    if node.0 >= grid.m || node.1 >= grid.m {
        return invalid(format!("node {node:?} outside the {}-point grid", grid.m));
    }
    let bad = components(d, SquareSource::Bad(m))?;
    let rows = bad_rows(&bad, &RowSynth::new(grid.m), node.1);
    let theta_vals: Vec<C64> = rows.iter().map(|r| r[node.0]).collect();
    let dich = Dichotomy::new(&d.ctx.tree, kappa);
    Ok(dich.chain(&dich.level_values(&theta_vals)))
}

/// Checks the dichotomy for every cap at every level at `nodes` random grid nodes.
pub fn narrow_dichotomy_scan(d: &PrunedDecomposition, m: usize, nodes: usize, seed: u64, kappa: f64) -> Result<DichotomySummary> {
    check_level(d, "m", m, 2, d.depth())?;
    let grid = d.ctx.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_row: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for _ in 0..nodes {
        let (n1, n2) = (rng.gen_range(0..grid.m), rng.gen_range(0..grid.m));
        by_row.entry(n2).or_default().push(n1);
    }
    let bad = components(d, SquareSource::Bad(m))?;
    let synth = RowSynth::new(grid.m);
    let dich = Dichotomy::new(&d.ctx.tree, kappa);
    let rows: Vec<(usize, Vec<usize>)> = by_row.into_iter().collect();
    let parts: Vec<DichotomySummary> = rows
        .par_iter()
        .map(|(n2, cols)| {
            let vals = bad_rows(&bad, &synth, *n2);
            let mut s = DichotomySummary::default();
            for &n1 in cols {
                let theta_vals: Vec<C64> = vals.iter().map(|r| r[n1]).collect();
                let levels = dich.level_values(&theta_vals);
                s.nodes += 1;
                for k in 0..d.depth() {
                    for i in 0..dich.tree.level(k).len() {
                        let (v, _) = dich.verdict(k, i, &levels[k + 1]);
                        s.checks += 1;
                        s.broad += usize::from(v.broad);
                        s.narrow += usize::from(v.narrow);
                        s.neither += usize::from(!v.broad && !v.narrow);
                    }
                }
            }
            s
        })
        .collect();
    Ok(parts.into_iter().fold(DichotomySummary::default(), |a, p| DichotomySummary {
        nodes: a.nodes + p.nodes,
        checks: a.checks + p.checks,
        broad: a.broad + p.broad,
        narrow: a.narrow + p.narrow,
        neither: a.neither + p.neither,
    }))
}

/// Bilinear restriction ratio with `X = {|f_τ f_τ'|^{1/2} > α}` and the
/// `S^{-1/2}`-cap partition of `[-1, 1]` into `2⌈S^{1/2}⌉` equal caps.
pub fn bilinear_ratio(f: &FrequencyProfile, tau: &Interval, tau_prime: &Interval, e: f64, alpha: f64, s: f64, grid: GridSpec) -> Result<LemmaReport> {
    let r = f.r() as f64;
    if !(s >= 4.0) || s > r {
        return invalid(format!("S = {s} must lie in [4, R]"));
    }
    if !(e <= 0.5 && e >= s.powf(-0.5) * (1.0 - 1e-12)) {
        return invalid(format!("E = {e} must lie in [S^(-1/2), 1/2]"));
    }
    if tau.distance(tau_prime) < e * (1.0 - 1e-12) {
        return invalid(format!("caps are {}-separated, need {e}", tau.distance(tau_prime)));
    }
    if grid.r != f.r() {
        return invalid("grid and profile must share R");
    }
    let m = grid.m;
    let cell = grid.cell_area();
    let (a, b) = (f.cap_terms(tau), f.cap_terms(tau_prime));
    // Superlevel set X and the left-hand side.
    let rows = stream_rows_multi(&[&a, &b], grid, Vec::new, |acc: &mut Vec<(usize, Vec<usize>, f64)>, n2, rows| {
        let mut hits = Vec::new();
        let mut lhs = 0.0;
        for n1 in 0..m {
            let prod = rows[0][n1].norm_sqr() * rows[1][n1].norm_sqr();
            if prod > alpha.powi(4) {
                hits.push(n1);
                lhs += prod * cell;
            }
        }
        acc.push((n2, hits, lhs));
    });
    let mut mask = vec![C64::new(0.0, 0.0); m * m];
    let mut lhs = 0.0;
    for (n2, hits, l) in rows.into_iter().flatten() {
        lhs += l;
        for n1 in hits {
            mask[n2 * m + n1] = C64::new(1.0, 0.0);
        }
    }
    let rho = s.sqrt();
    let hood = dilate(&mask, grid, rho);
    // Σ_ω |f_ω|² ∗ w_{S^{1/2}}.
    let count = 2 * (rho - 1e-9).ceil() as i64;
    let sq = (0..count)
        .map(|i| Interval::new(Rational::new(2 * i - count, count), Rational::new(2 * i + 2 - count, count), i + 1 == count))
        .map(|iv| SpecBox::from_terms(&f.cap_terms(&iv)))
        .filter(|b| !b.is_empty())
        .fold(SpecBox::empty(), |acc, b| acc.add(&b.abs2()));
    let weight = ScaleWeight { scale: rho };
    let smooth = apply_multiplier(&sq, r, |xi| weight.fourier(xi)).terms();
    let env: f64 = stream_rows(&smooth, grid, || 0.0f64, |acc, n2, row| {
        for (n1, v) in row.iter().enumerate() {
            if hood[n2 * m + n1] {
                *acc += v.norm_sqr() * cell;
            }
        }
    })
    .into_iter()
    .sum();
    let rhs = env / (e * e);
    Ok(LemmaReport::inequality(
        "bilinear",
        &[("E", e), ("alpha", alpha), ("S", s)],
        lhs,
        rhs,
        0.0,
        DEFAULT_TOLERANCE,
        (r).log2(),
    ))
}

/// Nodes within distance `rho` of the support of `mask`, by FFT convolution
/// with the sampled disk.
fn dilate(mask: &[C64], grid: GridSpec, rho: f64) -> Vec<bool> {
    let m = grid.m;
    if mask.iter().all(|c| c.re == 0.0) {
        return vec![false; m * m];
    }
    let (h, p) = (grid.spacing(), grid.period());
    let mut disk = vec![C64::new(0.0, 0.0); m * m];
    for n2 in 0..m {
        let d2 = wrap(n2 as f64 * h, p);
        if d2.abs() > rho {
            continue;
        }
        for n1 in 0..m {
            let d1 = wrap(n1 as f64 * h, p);
            if d1.hypot(d2) <= rho {
                disk[n2 * m + n1] = C64::new(1.0, 0.0);
            }
        }
    }
    let mut a = mask.to_vec();
    fft2(&mut a, m, false);
    fft2(&mut disk, m, false);
    a.iter_mut().zip(&disk).for_each(|(x, y)| *x *= y);
    fft2(&mut a, m, true);
    let norm = (m * m) as f64;
    a.iter().map(|c| c.re / norm > 0.5).collect()
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct BatteryOptions {
    /// Near-relation constant for the pair sums.
    pub kappa_near: f64,
    pub kappa_dichotomy: f64,
    /// Constants `κ = κ'` of the weak high-domination checks.
    pub kappa_domination: f64,
    pub dichotomy_nodes: usize,
    pub low_draws: usize,
    pub seed: u64,
}

impl Default for BatteryOptions {
    fn default() -> Self {
        Self {
            kappa_near: 1.0,
            kappa_dichotomy: 1.0,
            kappa_domination: 10.0,
            dichotomy_nodes: 10_000,
            low_draws: 20,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LemmaBattery {
    pub reports: Vec<LemmaReport>,
    /// `(m, summary)` for every bad level `m`.
    pub dichotomy: Vec<(usize, DichotomySummary)>,
}

impl LemmaBattery {
    pub fn of<'a>(&'a self, lemma: &'a str) -> impl Iterator<Item = &'a LemmaReport> + 'a {
        self.reports.iter().filter(move |r| r.lemma == lemma)
    }

    /// Largest `log_exponent − stated_power` among reports of `lemma`.
    pub fn worst_excess(&self, lemma: &str) -> Option<f64> {
        self.of(lemma).map(|r| r.log_exponent - r.stated_power).filter(|x| !x.is_nan()).reduce(f64::max)
    }

    pub fn counterexamples(&self) -> usize {
        self.dichotomy.iter().map(|(_, s)| s.neither).sum()
    }
}

/// Low-lemma identities at `count` random `(m, k, s, cap, r)` draws.
pub fn low_lemma_draws(d: &PrunedDecomposition, count: usize, seed: u64, kappa: f64) -> Result<Vec<LemmaReport>> {
    let n = d.depth();
    let tree = &d.ctx.tree;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let m = rng.gen_range(2..=n);
            let k = rng.gen_range(m..=n);
            let s = rng.gen_range(0..=k);
            let cap = rng.gen_range(0..tree.level(s).len());
            let r = rng.gen_range(0.05..=1.0) / tree.ladder.scale(k);
            low_lemma_residual(d, m, k, s, cap, r, kappa)
        })
        .collect()
}

/// Every lemma check at one decomposition. Low-lemma parameters are drawn at
/// random; the integrated constancy (a) amplitude sweeps dyadic radii from
/// `1/R` up to its hypothesis limit.
pub fn lemma_battery(d: &PrunedDecomposition, opts: &BatteryOptions) -> Result<LemmaBattery> {
    let n = d.depth();
    let tree = &d.ctx.tree;
    let ladder = &tree.ladder;
    let period = ladder.r_f64();
    let mut reports = low_lemma_draws(d, opts.low_draws, opts.seed, opts.kappa_near)?;
    for m in 2..=n {
        for k in 0..=n {
            reports.push(high_lemma_ratio(d, HighVariant::A, m, k, 0, opts.kappa_near)?);
            reports.push(high_lemma_ratio(d, HighVariant::B, m, k, 0, opts.kappa_near)?);
            for l in 0..=(n - k) {
                reports.push(high_lemma_ratio(d, HighVariant::C, m, k, l, opts.kappa_near)?);
            }
        }
    }
    let params = |m, k, r| ConstancyParams { m, k, r, gate: ScaleGate::Body, cap: None };
    reports.push(constancy_ratio(d, ConstancyKind::PointwiseTheta, params(0, 0, 0.0))?);
    for k in 0..=n {
        reports.push(constancy_ratio(d, ConstancyKind::PointwiseTau, params(n + 1, k, 0.0))?);
    }
    for m in 2..=n {
        for k in 0..=n {
            let limit = 2.0 * extended_scale(tree, k + 3) / period;
            let mut r = 1.0 / period;
            while r <= limit * (1.0 + 1e-12) {
                reports.push(constancy_ratio(d, ConstancyKind::IntegratedA, params(m, k, r))?);
                r *= 2.0;
            }
            if k >= m {
                reports.push(constancy_ratio(d, ConstancyKind::IntegratedB, params(m, k, 0.0))?);
            }
        }
        for k in 0..m {
            reports.push(weak_high_domination(d, m, k, DominationPart::A, opts.kappa_domination, opts.kappa_domination)?);
            reports.push(weak_high_domination(d, m, k, DominationPart::B, opts.kappa_domination, opts.kappa_domination)?);
        }
    }
    let dichotomy = (2..=n)
        .map(|m| Ok((m, narrow_dichotomy_scan(d, m, opts.dichotomy_nodes, opts.seed, opts.kappa_dichotomy)?)))
        .collect::<Result<Vec<_>>>()?;
    let e = 0.5f64.max(period.powf(-0.5));
    let thetas = tree.thetas();
    let level1 = tree.level(1);
    for (a, b) in [(&thetas[0].interval, &thetas[thetas.len() - 1].interval), (&level1[0].interval, &level1[level1.len() - 1].interval)] {
        reports.push(bilinear_ratio(&d.ctx.profile, a, b, e, 0.5, period, d.ctx.grid)?);
    }
    Ok(LemmaBattery { reports, dichotomy })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::geometry::ScaleLadder;
    use crate::pruning::{alpha_at_gauge_quantile, PruneContext, DEFAULT_CP};
    use crate::synthesis::{make_family, FamilyKind};

    fn decomposition(kind: FamilyKind) -> PrunedDecomposition {
        let ladder = ScaleLadder::new(256).unwrap();
        let tree = CapTree::new(&ladder);
        let grid = GridSpec::new(256, 4).unwrap();
        let f = make_family(kind, &ladder, 0.5, 11).unwrap();
        let ctx = Arc::new(PruneContext::measure(&f, &tree, grid).unwrap());
        let alpha = alpha_at_gauge_quantile(&ctx, DEFAULT_CP, 0.5).unwrap();
        ctx.prune(alpha, DEFAULT_CP).unwrap()
    }

    #[test]
    fn inequality_report_scales_tolerance_by_log_power() {
        let log_r = 8.0;
        let r = LemmaReport::inequality("x", &[], 64.0, 1.0, 2.0, 1.0, log_r);
        assert_eq!(r.ratio, 64.0);
        assert!((r.log_exponent - 2.0).abs() < 1e-12);
        assert!(r.pass);
        assert!(r.exponent_within(0.0));
        let over = LemmaReport::inequality("x", &[], 65.0, 1.0, 2.0, 1.0, log_r);
        assert!(!over.pass && !over.exponent_within(0.0));
    }

    #[test]
    fn caps_within_matches_theta_ranges() {
        let ladder = ScaleLadder::new(256).unwrap();
        let tree = CapTree::new(&ladder);
        let n = tree.depth();
        let inside = caps_within(&tree, 1, 3, n);
        let (lo, hi) = tree.theta_range(1, 3);
        assert_eq!(inside, (lo..hi).collect::<Vec<_>>());
        assert_eq!(caps_within(&tree, 0, 0, 1).len(), tree.level(1).len());
    }

    #[test]
    fn low_lemma_is_an_identity() {
        let d = decomposition(FamilyKind::RandomPhase);
        for rep in low_lemma_draws(&d, 5, 1, 1.0).unwrap() {
            assert!(rep.ratio <= 1e-10, "{rep:?}");
        }
    }

    #[test]
    fn low_lemma_rejects_radius_beyond_scale() {
        let d = decomposition(FamilyKind::Flat);
        let n = d.depth();
        let too_big = 2.0 / d.ctx.tree.ladder.scale(n);
        assert!(low_lemma_residual(&d, 2, n, 0, 0, too_big, 1.0).is_err());
    }

    #[test]
    fn dichotomy_has_no_counterexamples() {
        let d = decomposition(FamilyKind::Gaussian);
        let s = narrow_dichotomy_scan(&d, 2, 300, 5, 1.0).unwrap();
        assert_eq!(s.nodes, 300);
        assert_eq!(s.neither, 0);
    }

    #[test]
    fn multiplier_of_one_is_identity() {
        let mut b = SpecBox::zeros(-1, 0, 3, 2);
        *b.at_mut(0, 1) = C64::new(1.0, -2.0);
        let out = apply_multiplier(&b, 256.0, |_| 1.0);
        assert_eq!(out.terms(), b.terms());
        assert!((l2_squared(&b, 2.0) - 20.0).abs() < 1e-12);
    }
}
