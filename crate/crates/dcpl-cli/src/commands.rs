//! One handler per subcommand. Each returns a JSON result, an optional flat
//! table for CSV output and whether the run's gate held.

use std::sync::Arc;

use serde_json::{json, Value};

use dcpl_core::cutoffs::cutoff_selftest;
use dcpl_core::decoupling::{admissible_exponents, decoupling_ratio, fit_exponent, ExponentTriple};
use dcpl_core::envelope::{alpha_grid, envelope_scan, normalized_family, perturbed_max, EnvelopeReport, ENVELOPE_EXPONENT};
use dcpl_core::error::Error;
use dcpl_core::geometry::{to_f64, Cap, CapTree, ScaleLadder, SmallCapPartition};
use dcpl_core::highlow::{lemma_battery, BatteryOptions};
use dcpl_core::pruning::{alpha_at_gauge_quantile, pruning_invariant_report, replacement_gap, PruneContext};
use dcpl_core::synthesis::{make_family_on, make_family_raw, power_sums_terms, synthesize, FamilyKind, FamilySpec, GridSpec, SampledField};

use crate::config::RunConfig;
use crate::suite::{run_suite, SuiteOptions};

/// Multiplier of the replacement-gap bound.
const REPLACEMENT_K: f64 = 10.0;

#[derive(Debug)]
pub enum Payload {
    Report { result: Value, table: Vec<Value> },
    Field(SampledField),
}

#[derive(Debug)]
pub struct Outcome {
    pub payload: Payload,
    pub gate_held: bool,
}

impl Outcome {
    fn report(result: Value, table: Vec<Value>, gate_held: bool) -> Self {
        Self {
            payload: Payload::Report { result, table },
            gate_held,
        }
    }
}

pub type CmdResult = Result<Outcome, Error>;

fn families(cfg: &RunConfig) -> Result<Vec<FamilySpec>, Error> {
    cfg.families
        .iter()
        .map(|name| {
            let kind: FamilyKind = name.parse().map_err(|_| Error::InvalidParameter(format!("unknown family {name:?}")))?;
            Ok(FamilySpec::new(kind, cfg.beta, cfg.seed))
        })
        .collect()
}

fn first_family(cfg: &RunConfig) -> Result<FamilySpec, Error> {
    families(cfg)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidParameter("no family given".into()))
}

fn cap_json(c: &Cap) -> Value {
    json!({
        "level": c.level,
        "index": c.index,
        "interval": [to_f64(c.interval.a), to_f64(c.interval.b)],
        "closed_right": c.interval.closed_right,
        "center": [c.center.0, c.center.1],
        "tangent": [c.tangent.0, c.tangent.1],
        "normal": [c.normal.0, c.normal.1],
        "vertical_thickness": c.vertical_thickness,
    })
}

fn cap_row(c: &Cap) -> Value {
    json!({
        "level": c.level,
        "index": c.index,
        "a": to_f64(c.interval.a),
        "b": to_f64(c.interval.b),
        "center_x": c.center.0,
        "vertical_thickness": c.vertical_thickness,
    })
}

pub fn ladder(cfg: &RunConfig) -> CmdResult {
    let l = ScaleLadder::new(cfg.r)?;
    let table: Vec<Value> = (0..=l.n)
        .map(|k| json!({"k": k, "scale": l.scale(k), "caps": l.caps_at_level(k), "tiles_per_cap": l.tiles_per_cap(k)}))
        .collect();
    let result = json!({
        "R": l.r,
        "N": l.n,
        "L": l.log_r,
        "scales": &l.scales[..l.n],
        "R_N": l.root(),
        "levels": table,
    });
    Ok(Outcome::report(result, table, true))
}

pub fn caps(cfg: &RunConfig) -> CmdResult {
    let l = ScaleLadder::new(cfg.r)?;
    if cfg.small_caps {
        let part = SmallCapPartition::new(&l, cfg.beta)?;
        let rows: Vec<Value> = part
            .caps
            .iter()
            .enumerate()
            .map(|(i, iv)| json!({"index": i, "a": to_f64(iv.a), "b": to_f64(iv.b), "closed_right": iv.closed_right}))
            .collect();
        let result = json!({"R": l.r, "kind": "small", "beta": cfg.beta, "count": rows.len(), "caps": rows});
        return Ok(Outcome::report(result, rows, true));
    }
    if cfg.level > l.n {
        return Err(Error::InvalidParameter(format!("level must lie in 0..={}, got {}", l.n, cfg.level)));
    }
    let caps = CapTree::new(&l).level(cfg.level).to_vec();
    let result = json!({
        "R": l.r,
        "kind": "ladder",
        "level": cfg.level,
        "count": caps.len(),
        "caps": caps.iter().map(cap_json).collect::<Vec<_>>(),
    });
    Ok(Outcome::report(result, caps.iter().map(cap_row).collect(), true))
}

pub fn cutoff(cfg: &RunConfig) -> CmdResult {
    let l = ScaleLadder::new(cfg.r)?;
    let t = cutoff_selftest(&l, 200, 12, cfg.seed)?;
    let checks = json!({
        "pou_deviation": t.pou_deviation <= 1e-8,
        "min_psi": t.min_psi >= -1e-14,
        "decay_constant_positive": t.decay.c > 0.0,
        "decay_fit": t.decay.residual <= 0.05,
    });
    let held = checks.as_object().unwrap().values().all(|v| v == &Value::Bool(true));
    let row = json!({
        "R": t.r,
        "pou_deviation": t.pou_deviation,
        "min_psi": t.min_psi,
        "decay_c": t.decay.c,
        "decay_log_k": t.decay.log_k,
        "decay_residual": t.decay.residual,
    });
    Ok(Outcome::report(json!({"selftest": t, "checks": checks}), vec![row], held))
}

pub fn synth(cfg: &RunConfig) -> CmdResult {
    let l = ScaleLadder::new(cfg.r)?;
    let grid = GridSpec::new(cfg.r, cfg.sigma)?;
    let spec = first_family(cfg)?;
    let f = make_family_on(&spec, &l, grid)?;
    if cfg.format == crate::config::OutputFormat::BinaryField {
        return Ok(Outcome {
            payload: Payload::Field(synthesize(&f, grid)?),
            gate_held: true,
        });
    }
    let sums = power_sums_terms(&f.terms(), grid, &[2.0, 4.0, 6.0]);
    let row = json!({
        "family": spec.kind.name(),
        "R": cfg.r,
        "M": grid.m,
        "coefficients": f.coeffs.iter().filter(|c| c.norm() > 0.0).count(),
        "energy": f.energy(),
        "sup_norm": dcpl_core::synthesis::sup_norm_terms(&f.terms(), grid),
        "l2_squared": sums[0],
        "l4_fourth": sums[1],
        "l6_sixth": sums[2],
    });
    Ok(Outcome::report(row.clone(), vec![row], true))
}

fn amplitudes(cfg: &RunConfig, ctx: &Arc<PruneContext>) -> Result<Vec<f64>, Error> {
    if cfg.alpha.is_empty() {
        Ok(vec![alpha_at_gauge_quantile(ctx, cfg.cp, cfg.alpha_quantile)?])
    } else {
        Ok(cfg.alpha.clone())
    }
}

fn prune_context(cfg: &RunConfig) -> Result<(FamilySpec, Arc<PruneContext>), Error> {
    let l = ScaleLadder::new(cfg.r)?;
    let tree = CapTree::new(&l);
    let grid = GridSpec::new(cfg.r, cfg.sigma)?;
    let spec = first_family(cfg)?;
    let (profile, survey) = normalized_family(&spec, &tree, grid)?;
    Ok((spec, Arc::new(PruneContext::new(&profile, &tree, grid, &survey)?)))
}

pub fn prune(cfg: &RunConfig) -> CmdResult {
    let (spec, ctx) = prune_context(cfg)?;
    let mut runs = Vec::new();
    let mut table = Vec::new();
    let mut held = true;
    for alpha in amplitudes(cfg, &ctx)? {
        let d = ctx.prune(alpha, cfg.cp)?;
        let inv = pruning_invariant_report(&d);
        let gap = replacement_gap(&d, REPLACEMENT_K);
        held &= inv.monotonicity_violation <= 1e-12 && inv.leakage <= 1e-6 && gap.pass;
        let gauges: Vec<Vec<usize>> = d.gauges.iter().map(|lv| lv.iter().map(|g| g.len()).collect()).collect();
        table.push(json!({
            "family": spec.kind.name(),
            "alpha": alpha,
            "telescoping_residual": inv.telescoping_residual,
            "monotonicity_violation": inv.monotonicity_violation,
            "leakage": inv.leakage,
            "kept_fraction": inv.kept_fraction,
            "gap": gap.gap,
            "gap_bound": gap.bound,
        }));
        runs.push(json!({"alpha": alpha, "invariants": inv, "replacement": gap, "gauge_sizes": gauges, "warnings": d.warnings}));
    }
    let result = json!({"family": spec.kind.name(), "R": cfg.r, "sup_f": ctx.sup_f, "runs": runs});
    Ok(Outcome::report(result, table, held))
}

pub fn verify(cfg: &RunConfig) -> CmdResult {
    let (spec, ctx) = prune_context(cfg)?;
    let opts = BatteryOptions {
        kappa_near: cfg.kappa_near,
        kappa_dichotomy: cfg.kappa_dichotomy,
        kappa_domination: cfg.kappa_domination,
        dichotomy_nodes: cfg.nodes,
        seed: cfg.seed,
        ..BatteryOptions::default()
    };
    let mut runs = Vec::new();
    let mut table = Vec::new();
    let mut held = true;
    for alpha in amplitudes(cfg, &ctx)? {
        let d = ctx.prune(alpha, cfg.cp)?;
        let b = lemma_battery(&d, &opts)?;
        held &= b.counterexamples() == 0 && b.reports.iter().all(|r| r.pass);
        for r in &b.reports {
            table.push(json!({
                "alpha": alpha,
                "lemma": r.lemma,
                "lhs": r.lhs,
                "rhs": r.rhs,
                "ratio": r.ratio,
                "log_exponent": r.log_exponent,
                "stated_power": r.stated_power,
                "pass": r.pass,
            }));
        }
        runs.push(json!({"alpha": alpha, "counterexamples": b.counterexamples(), "battery": b}));
    }
    Ok(Outcome::report(json!({"family": spec.kind.name(), "R": cfg.r, "runs": runs}), table, held))
}

fn envelope_row(r: &EnvelopeReport) -> Value {
    json!({
        "family": r.family,
        "R": r.r,
        "alpha": r.alpha,
        "lhs": r.lhs,
        "lhs_error": r.lhs_error,
        "rhs_core": r.rhs_core,
        "rhs_weighted": r.rhs_weighted,
        "ratio": r.ratio,
        "log_exponent": r.log_exponent,
        "vacuous": r.vacuous,
    })
}

pub fn envelope(cfg: &RunConfig) -> CmdResult {
    let specs = families(cfg)?;
    let rs = cfg.rs();
    let scan = envelope_scan(&specs, &rs, &cfg.alpha, cfg.cp)?;
    let mut held = scan.all_pass(ENVELOPE_EXPONENT);
    let mut perturbed = Vec::new();
    if cfg.perturb > 0 {
        for &r in &rs {
            let l = ScaleLadder::new(r)?;
            let tree = CapTree::new(&l);
            let grid = GridSpec::new(r, cfg.sigma)?;
            let alphas = if cfg.alpha.is_empty() { alpha_grid(&l) } else { cfg.alpha.clone() };
            for spec in &specs {
                let (profile, _) = normalized_family(spec, &tree, grid)?;
                for &alpha in &alphas {
                    if let Some(rep) = perturbed_max(&profile, cfg.perturb, cfg.seed, alpha, &tree, grid)? {
                        held &= rep.passes(ENVELOPE_EXPONENT);
                        perturbed.push(rep);
                    }
                }
            }
        }
    }
    let table = scan.reports.iter().chain(&perturbed).map(envelope_row).collect();
    let result = json!({
        "gate_exponent": ENVELOPE_EXPONENT,
        "scan": scan,
        "perturbed": perturbed,
    });
    Ok(Outcome::report(result, table, held))
}

pub fn decouple(cfg: &RunConfig) -> CmdResult {
    let t = ExponentTriple::new(cfg.p, cfg.q, cfg.beta)?;
    if !admissible_exponents(&t) {
        return Err(Error::InvalidParameter(format!("exponents (p, q, beta) = ({}, {}, {}) lie outside the admissible range", t.p, t.q, t.beta)));
    }
    let rs = cfg.rs();
    let mut reports = Vec::new();
    let mut fits = Vec::new();
    for spec in families(cfg)? {
        let mut d_emp = Vec::new();
        for &r in &rs {
            let l = ScaleLadder::new(r)?;
            let grid = GridSpec::new(r, cfg.sigma)?;
            let f = make_family_raw(&spec, &l)?;
            let rep = decoupling_ratio(spec.kind.name(), &f, &t, &l, grid)?;
            d_emp.push(rep.d_emp);
            reports.push(rep);
        }
        if rs.len() >= 3 {
            fits.push(fit_exponent(spec.kind.name(), &t, &rs, &d_emp)?);
        }
    }
    let held = reports.iter().all(|r| r.pass);
    let table = reports
        .iter()
        .map(|r| json!({"family": r.family, "R": r.r, "d_emp": r.d_emp, "bound_core": r.bound_core, "log_margin": r.log_margin, "allowance": r.allowance, "pass": r.pass}))
        .collect();
    let result = json!({"triple": t, "predicted_exponent": t.dominant_exponent(), "reports": reports, "fits": fits});
    Ok(Outcome::report(result, table, held))
}

pub fn suite(cfg: &RunConfig) -> CmdResult {
    let opts = SuiteOptions {
        r_max: cfg.r,
        seed: cfg.seed,
        sigma: cfg.sigma,
    };
    let summary = run_suite(&opts, |c, secs| {
        eprintln!("criterion {} ({}): {} [{secs:.1} s]", c.id, c.name, if c.pass { "PASS" } else { "FAIL" });
    })?;
    let table = summary
        .criteria
        .iter()
        .map(|c| json!({"id": c.id, "name": c.name, "pass": c.pass}))
        .collect();
    let held = summary.all_pass;
    Ok(Outcome::report(serde_json::to_value(&summary)?, table, held))
}

pub fn dispatch(cfg: &RunConfig) -> CmdResult {
    match cfg.subcommand.as_str() {
        "ladder" => ladder(cfg),
        "caps" => caps(cfg),
        "cutoff-selftest" => cutoff(cfg),
        "synth" => synth(cfg),
        "prune" => prune(cfg),
        "verify" => verify(cfg),
        "envelope" => envelope(cfg),
        "decouple" => decouple(cfg),
        "suite" => suite(cfg),
        other => Err(Error::InvalidParameter(format!("unknown subcommand {other:?}"))),
    }
}
