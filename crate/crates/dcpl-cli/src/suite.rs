//! The acceptance battery: one verdict per criterion with the measured values
//! and the pinned tolerances. Wall times and memory live in a separate
//! `timing` record so that the rest of the summary is reproducible.

use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use dcpl_core::cutoffs::cutoff_selftest;
use dcpl_core::decoupling::{decoupling_ratio, run_battery, ExponentTriple};
use dcpl_core::envelope::{default_families, envelope_scan, ENVELOPE_EXPONENT};
use dcpl_core::error::Result;
use dcpl_core::fft::Term;
use dcpl_core::geometry::{CapTree, ScaleLadder};
use dcpl_core::highlow::{lemma_battery, low_lemma_draws, BatteryOptions};
use dcpl_core::pruning::{alpha_at_gauge_quantile, pruning_invariant_report, replacement_gap, PruneContext, DEFAULT_CP};
use dcpl_core::synthesis::{make_family, power_sums_terms, stream_rows_multi, FamilyKind, FamilySpec, GridSpec};

/// Pinned tolerances.
pub mod tol {
    pub const PLANCHEREL: f64 = 1e-10;
    pub const ADDITIVITY: f64 = 1e-12;
    pub const TELESCOPING: f64 = 1e-12;
    pub const LOW_LEMMA: f64 = 1e-6;
    pub const LOW_DRAWS: usize = 20;
    pub const EXACT_SECONDS: f64 = 60.0;
    pub const POU: f64 = 1e-8;
    pub const POU_WINDOW: usize = 12;
    pub const PSI_FLOOR: f64 = -1e-14;
    pub const DECAY_RESIDUAL: f64 = 0.05;
    pub const MONOTONICITY: f64 = 1e-12;
    pub const LEAKAGE: f64 = 1e-6;
    pub const REPLACEMENT_K: f64 = 10.0;
    pub const EXPONENT_SLACK: f64 = 0.5;
    pub const DICHOTOMY_NODES: usize = 10_000;
    pub const SINGLE_CAP: f64 = 1e-10;
    pub const SLOPE: f64 = 0.25;
    pub const SMALL_SECONDS: f64 = 15.0 * 60.0;
    pub const SMALL_BYTES: f64 = 4e9;
    pub const LARGE_SECONDS: f64 = 60.0 * 60.0;
    pub const LARGE_BYTES: f64 = 16e9;
}

#[derive(Clone, Debug, Serialize)]
pub struct Criterion {
    pub id: usize,
    pub name: String,
    pub pass: bool,
    pub measured: Value,
    pub tolerance: Value,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteSummary {
    pub r_max: u64,
    pub seed: u64,
    pub criteria: Vec<Criterion>,
    pub all_pass: bool,
    /// Wall seconds per criterion and peak resident memory; excluded from
    /// reproducibility comparisons.
    pub timing: Value,
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub r_max: u64,
    pub seed: u64,
    pub sigma: usize,
}

const ENSEMBLE: [FamilyKind; 3] = [FamilyKind::Flat, FamilyKind::RandomPhase, FamilyKind::Gaussian];
const QUANTILES: [f64; 3] = [0.25, 0.5, 0.9];

fn ladder_rs(r_max: u64) -> Vec<u64> {
    [256, 1024, 4096].into_iter().filter(|&r| r <= r_max.max(256)).collect()
}

/// Peak resident set size in bytes, when the platform reports it.
pub fn peak_rss_bytes() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024.0)
}

struct Setup {
    tree: CapTree,
    grid: GridSpec,
}

fn setup(r: u64, sigma: usize) -> Result<Setup> {
    let ladder = ScaleLadder::new(r)?;
    Ok(Setup {
        tree: CapTree::new(&ladder),
        grid: GridSpec::new(r, sigma)?,
    })
}

/// `sup |f − Σ_τ f_τ| / sup |f|` over every level.
fn additivity_residual(terms: &[Term], profile: &dcpl_core::synthesis::FrequencyProfile, tree: &CapTree, grid: GridSpec) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..=tree.depth() {
        let caps: Vec<Vec<Term>> = tree.level(k).iter().map(|c| profile.cap_terms(&c.interval)).collect();
        let mut spectra: Vec<&[Term]> = vec![terms];
        spectra.extend(caps.iter().map(|c| c.as_slice()));
        let (res, top) = stream_rows_multi(&spectra, grid, || (0.0f64, 0.0f64), |acc, _, rows| {
            for x in 0..grid.m {
                let sum: dcpl_core::fft::C64 = rows[1..].iter().map(|r| r[x]).sum();
                acc.0 = acc.0.max((rows[0][x] - sum).norm());
                acc.1 = acc.1.max(rows[0][x].norm());
            }
        })
        .into_iter()
        .fold((0.0f64, 0.0f64), |a, p| (a.0.max(p.0), a.1.max(p.1)));
        if top > 0.0 {
            worst = worst.max(res / top);
        }
    }
    worst
}

fn exact_identities(opts: &SuiteOptions) -> Result<Criterion> {
    let start = Instant::now();
    let s = setup(256, opts.sigma)?;
    let ladder = &s.tree.ladder;
    let (mut plancherel, mut additivity, mut telescoping, mut low) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut draws = 0;
    for kind in ENSEMBLE {
        let f = make_family(kind, ladder, 0.5, opts.seed)?;
        let terms = f.terms();
        let l2 = power_sums_terms(&terms, s.grid, &[2.0])[0];
        let exact = ladder.r_f64().powi(2) * f.energy();
        plancherel = plancherel.max((l2 - exact).abs() / exact);
        additivity = additivity.max(additivity_residual(&terms, &f, &s.tree, s.grid));
        let ctx = Arc::new(PruneContext::measure(&f, &s.tree, s.grid)?);
        let alpha = alpha_at_gauge_quantile(&ctx, DEFAULT_CP, 0.5)?;
        let d = ctx.prune(alpha, DEFAULT_CP)?;
        let inv = pruning_invariant_report(&d);
        telescoping = telescoping.max(inv.telescoping_residual / inv.sup_f);
        for rep in low_lemma_draws(&d, tol::LOW_DRAWS, opts.seed, 1.0)? {
            low = low.max(rep.ratio);
            draws += 1;
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    let pass = plancherel <= tol::PLANCHEREL
        && additivity <= tol::ADDITIVITY
        && telescoping <= tol::TELESCOPING
        && low <= tol::LOW_LEMMA
        && draws >= tol::LOW_DRAWS
        && seconds <= tol::EXACT_SECONDS;
    Ok(Criterion {
        id: 1,
        name: "exact-model identities".into(),
        pass,
        measured: json!({
            "plancherel_rel": plancherel,
            "additivity_rel": additivity,
            "telescoping_rel": telescoping,
            "low_lemma_rel": low,
            "low_lemma_draws": draws,
            "within_time": seconds <= tol::EXACT_SECONDS,
        }),
        tolerance: json!({
            "plancherel_rel": tol::PLANCHEREL,
            "additivity_rel": tol::ADDITIVITY,
            "telescoping_rel": tol::TELESCOPING,
            "low_lemma_rel": tol::LOW_LEMMA,
            "low_lemma_draws_min": tol::LOW_DRAWS,
            "seconds": tol::EXACT_SECONDS,
        }),
    })
}

fn cutoff_system(opts: &SuiteOptions) -> Result<Criterion> {
    let ladder = ScaleLadder::new(256)?;
    let t = cutoff_selftest(&ladder, 200, tol::POU_WINDOW, opts.seed)?;
    let pass = t.pou_deviation <= tol::POU && t.min_psi >= tol::PSI_FLOOR && t.decay.c > 0.0 && t.decay.residual <= tol::DECAY_RESIDUAL;
    Ok(Criterion {
        id: 2,
        name: "cutoff system".into(),
        pass,
        measured: json!({
            "pou_deviation": t.pou_deviation,
            "min_psi": t.min_psi,
            "decay_c": t.decay.c,
            "decay_fit_residual": t.decay.residual,
            "caps": t.caps,
            "samples": t.samples,
        }),
        tolerance: json!({
            "pou_deviation": tol::POU,
            "window_tiles": tol::POU_WINDOW,
            "min_psi": tol::PSI_FLOOR,
            "decay_fit_residual": tol::DECAY_RESIDUAL,
            "decay_range": [10.0, 1e3],
        }),
    })
}

fn pruning_and_lemmas(opts: &SuiteOptions) -> Result<(Criterion, Criterion)> {
    let rs: Vec<u64> = ladder_rs(opts.r_max).into_iter().filter(|&r| r <= 1024).collect();
    let lemma_r = rs[0];
    let (mut mono, mut leak, mut worst_gap_ratio) = (0.0f64, 0.0f64, 0.0f64);
    let mut gap_rows = Vec::new();
    let mut excess: std::collections::BTreeMap<String, f64> = std::collections::BTreeMap::new();
    let mut counterexamples = 0usize;
    let mut dichotomy_nodes = 0usize;
    let lemmas = ["high-a", "high-b", "high-c", "const-integrated-a", "const-integrated-b", "whd-a"];
    for &r in &rs {
        let s = setup(r, opts.sigma)?;
        for kind in ENSEMBLE {
            let f = make_family(kind, &s.tree.ladder, 0.5, opts.seed)?;
            let ctx = Arc::new(PruneContext::measure(&f, &s.tree, s.grid)?);
            // Above the smallest scale one amplitude per family keeps the run inside the time budget.
            let quantiles: &[f64] = if r == lemma_r { &QUANTILES } else { &[0.5] };
            for &q in quantiles {
                let alpha = alpha_at_gauge_quantile(&ctx, DEFAULT_CP, q)?;
                let d = ctx.prune(alpha, DEFAULT_CP)?;
                let inv = pruning_invariant_report(&d);
                mono = mono.max(inv.monotonicity_violation);
                leak = leak.max(inv.leakage);
                let g = replacement_gap(&d, tol::REPLACEMENT_K);
                worst_gap_ratio = worst_gap_ratio.max(g.gap / g.bound);
                gap_rows.push(json!({"family": kind.name(), "R": r, "quantile": q, "alpha": alpha, "gap": g.gap, "bound": g.bound}));
                if q == 0.5 && r == lemma_r {
                    let opts = BatteryOptions {
                        seed: opts.seed,
                        dichotomy_nodes: tol::DICHOTOMY_NODES,
                        ..BatteryOptions::default()
                    };
                    let b = lemma_battery(&d, &opts)?;
                    for name in lemmas {
                        if let Some(e) = b.worst_excess(name) {
                            let slot = excess.entry(name.to_string()).or_insert(f64::NEG_INFINITY);
                            *slot = slot.max(e);
                        }
                    }
                    counterexamples += b.counterexamples();
                    dichotomy_nodes += b.dichotomy.iter().map(|(_, s)| s.nodes).sum::<usize>();
                }
            }
        }
    }
    let pruning = Criterion {
        id: 3,
        name: "pruning lemmas".into(),
        pass: mono <= tol::MONOTONICITY && leak <= tol::LEAKAGE && worst_gap_ratio <= 1.0,
        measured: json!({
            "R": rs,
            "monotonicity_violation": mono,
            "leakage": leak,
            "worst_gap_over_bound": worst_gap_ratio,
            "replacement": gap_rows,
        }),
        tolerance: json!({
            "monotonicity_violation": tol::MONOTONICITY,
            "leakage": tol::LEAKAGE,
            "replacement_bound": "10 alpha / (C_p^(1/2) log2 R)",
            "cp": DEFAULT_CP,
        }),
    };
    let worst = excess.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lemma = Criterion {
        id: 4,
        name: "lemma log-exponents".into(),
        pass: worst <= tol::EXPONENT_SLACK && counterexamples == 0,
        measured: json!({
            "R": [lemma_r],
            "excess_over_stated_power": excess,
            "dichotomy_counterexamples": counterexamples,
            "dichotomy_nodes": dichotomy_nodes,
        }),
        tolerance: json!({
            "excess_over_stated_power": tol::EXPONENT_SLACK,
            "dichotomy_counterexamples": 0,
            "nodes_per_configuration": tol::DICHOTOMY_NODES,
        }),
    };
    Ok((pruning, lemma))
}

fn envelope_gate(opts: &SuiteOptions) -> Result<Criterion> {
    let rs = ladder_rs(opts.r_max);
    let scan = envelope_scan(&default_families(opts.seed), &rs, &[], DEFAULT_CP)?;
    let max = scan.reports.iter().filter_map(|r| r.log_exponent).fold(f64::NEG_INFINITY, f64::max);
    let per: Vec<Value> = scan
        .max_exponent
        .iter()
        .map(|(f, r, e)| json!({"family": f, "R": r, "max_log_exponent": e}))
        .collect();
    Ok(Criterion {
        id: 5,
        name: "wave envelope gate".into(),
        pass: scan.all_pass(ENVELOPE_EXPONENT),
        measured: json!({
            "R": rs,
            "reports": scan.reports.len(),
            "max_log_exponent": max,
            "below_informational_4": max <= 4.0,
            "per_family": per,
            "kappa_w": scan.kappa_w,
        }),
        tolerance: json!({"log_exponent": ENVELOPE_EXPONENT}),
    })
}

fn decoupling_gate(opts: &SuiteOptions) -> Result<Criterion> {
    // Slope fits need three scales; the reduced-grid norms keep R = 4096 cheap.
    let rs = ladder_rs(opts.r_max.max(4096));
    let mut single = 0.0f64;
    for &r in &rs {
        let s = setup(r, opts.sigma)?;
        let t = ExponentTriple::new(4.0, 4.0, 0.5)?;
        let f = make_family(FamilyKind::SingleCap, &s.tree.ladder, 0.5, opts.seed)?;
        let rep = decoupling_ratio("single_cap", &f, &t, &s.tree.ladder, s.grid)?;
        single = single.max((rep.d_emp - 1.0).abs());
    }
    let probes = [ExponentTriple::new(6.0, 6.0, 1.0)?, ExponentTriple::new(4.0, 4.0, 0.5)?];
    let informational = ExponentTriple::new(6.0, 2.0, 0.5)?;
    let mut triples = probes.to_vec();
    triples.push(informational);
    let families: Vec<FamilySpec> = default_families(opts.seed);
    let battery = run_battery(&families, &triples, &rs)?;
    let worst_margin = battery.reports.iter().map(|r| r.log_margin - r.allowance).fold(f64::NEG_INFINITY, f64::max);
    let mut sharp = true;
    let mut realized = Vec::new();
    for t in &probes {
        let best = battery.best_fit(t);
        let ok = best.is_some_and(|b| b.within(tol::SLOPE));
        sharp &= ok;
        realized.push(json!({
            "p": t.p, "q": t.q, "beta": t.beta,
            "predicted": t.dominant_exponent(),
            "family": best.map(|b| b.family.clone()),
            "slope": best.map(|b| b.slope),
            "attained": ok,
        }));
    }
    let fits: Vec<Value> = battery
        .fits
        .iter()
        .map(|f| json!({"family": f.family, "p": f.triple.p, "q": f.triple.q, "beta": f.triple.beta, "slope": f.slope, "predicted": f.predicted, "residual": f.residual}))
        .collect();
    Ok(Criterion {
        id: 6,
        name: "decoupling gate and sharpness".into(),
        pass: single <= tol::SINGLE_CAP && battery.all_pass() && sharp,
        measured: json!({
            "R": rs,
            "single_cap_deviation": single,
            "worst_margin_minus_allowance": worst_margin,
            "sharpness": realized,
            "fits": fits,
        }),
        tolerance: json!({"single_cap_deviation": tol::SINGLE_CAP, "log_margin": "30 + 3p", "slope": tol::SLOPE}),
    })
}

/// Runs every criterion; `progress` receives each verdict as it completes.
pub fn run_suite(opts: &SuiteOptions, mut progress: impl FnMut(&Criterion, f64)) -> Result<SuiteSummary> {
    let mut criteria = Vec::new();
    let mut seconds = Vec::new();
    let mut small_seconds = 0.0;
    let mut push = |c: Criterion, t: f64, criteria: &mut Vec<Criterion>| {
        progress(&c, t);
        seconds.push(json!({"id": c.id, "seconds": t}));
        criteria.push(c);
    };
    let t = Instant::now();
    push(exact_identities(opts)?, t.elapsed().as_secs_f64(), &mut criteria);
    small_seconds += t.elapsed().as_secs_f64();
    let t = Instant::now();
    push(cutoff_system(opts)?, t.elapsed().as_secs_f64(), &mut criteria);
    small_seconds += t.elapsed().as_secs_f64();
    let t = Instant::now();
    let (c3, c4) = pruning_and_lemmas(opts)?;
    let dt = t.elapsed().as_secs_f64();
    small_seconds += dt;
    push(c3, dt, &mut criteria);
    push(c4, 0.0, &mut criteria);
    let t = Instant::now();
    push(envelope_gate(opts)?, t.elapsed().as_secs_f64(), &mut criteria);
    let large_seconds_env = t.elapsed().as_secs_f64();
    let t = Instant::now();
    push(decoupling_gate(opts)?, t.elapsed().as_secs_f64(), &mut criteria);
    let large_seconds = large_seconds_env + t.elapsed().as_secs_f64();
    let peak = peak_rss_bytes();
    let bytes_limit = if opts.r_max > 1024 { tol::LARGE_BYTES } else { tol::SMALL_BYTES };
    let resource_pass = small_seconds <= tol::SMALL_SECONDS && large_seconds <= tol::LARGE_SECONDS && peak.map_or(true, |b| b <= bytes_limit);
    let c7 = Criterion {
        id: 7,
        name: "resource envelope".into(),
        pass: resource_pass,
        measured: json!({"threads": rayon::current_num_threads()}),
        tolerance: json!({
            "small_seconds": tol::SMALL_SECONDS,
            "small_bytes": tol::SMALL_BYTES,
            "scan_seconds": tol::LARGE_SECONDS,
            "scan_bytes": tol::LARGE_BYTES,
            "grid_nodes": "(4R)^2",
        }),
    };
    push(c7, 0.0, &mut criteria);
    let all_pass = criteria.iter().all(|c| c.pass);
    Ok(SuiteSummary {
        r_max: opts.r_max,
        seed: opts.seed,
        criteria,
        all_pass,
        timing: json!({
            "criteria": seconds,
            "identities_pruning_lemmas_seconds": small_seconds,
            "envelope_decoupling_seconds": large_seconds,
            "peak_rss_bytes": peak,
        }),
    })
}
