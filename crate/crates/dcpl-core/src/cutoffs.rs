//! Gevrey cutoffs, tile weights forming an exact partition of unity on the
//! periodic cell, polynomial weights and radial frequency filters.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};
use std::sync::OnceLock;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::fft::{fft2, Term, C64};
use crate::geometry::{wrap, Cap, PlateSpec, ScaleLadder};
use crate::synthesis::{GridSpec, SampledField};

/// Sample spacing of tabulated bump profiles on `[-1, 1]`.
const PROFILE_STEP: f64 = 1.0 / 8192.0;

#[derive(Clone, Debug, Serialize)]
pub struct DecayFit {
    pub log_k: f64,
    pub c: f64,
    /// `1 − R²` of the least-squares fit of the log-envelope against `|x|^{1/2}`.
    pub residual: f64,
}

/// Even bump `g = 1_{[-1+r, 1-r]} ∗ μ_r`, `μ_r` a truncated infinite
/// convolution of normalized indicators with radii proportional to `n⁻²`.
#[derive(Clone, Debug, Serialize)]
pub struct GevreyBump {
    pub epsilon0: f64,
    pub conv_terms: usize,
    pub plateau_halfwidth: f64,
    pub support_halfwidth: f64,
    pub radii: Vec<f64>,
    #[serde(skip)]
    pub samples: Vec<f64>,
    pub decay: DecayFit,
}

impl GevreyBump {
    pub fn new(epsilon0: f64, conv_terms: usize) -> Result<Self> {
        if !(epsilon0 > 0.0 && epsilon0 < 0.5) {
            return invalid(format!("epsilon0 must lie in (0, 1/2), got {epsilon0}"));
        }
        if conv_terms < 10 {
            return invalid(format!("conv_terms must be at least 10, got {conv_terms}"));
        }
        let r = 0.5 * epsilon0;
        let zeta: f64 = (1..=conv_terms).map(|n| 1.0 / (n * n) as f64).sum();
        let radii: Vec<f64> = (1..=conv_terms).map(|n| r / ((n * n) as f64 * zeta)).collect();
        let half = (1.0 / PROFILE_STEP).round() as usize;
        let len = 2 * half + 1;
        let inner = ((1.0 - r) / PROFILE_STEP + 1e-9).floor() as usize;
        let mut samples: Vec<f64> = (0..len).map(|i| if i.abs_diff(half) <= inner { 1.0 } else { 0.0 }).collect();
        for &rn in &radii {
            let w = (rn / PROFILE_STEP).floor() as usize;
            if w > 0 {
                samples = box_smooth(&samples, w);
            }
        }
        let mut bump = Self {
            epsilon0,
            conv_terms,
            plateau_halfwidth: 1.0 - epsilon0,
            support_halfwidth: 1.0,
            radii,
            samples,
            decay: DecayFit { log_k: 0.0, c: 0.0, residual: 1.0 },
        };
        bump.decay = bump.fit_decay(10.0, 1000.0);
        Ok(bump)
    }

    /// `g(x)`, linearly interpolated from the tabulated profile.
    pub fn value(&self, x: f64) -> f64 {
        let t = (x.abs() / PROFILE_STEP).min(1.0 / PROFILE_STEP);
        let half = (self.samples.len() - 1) / 2;
        let i = t.floor() as usize;
        if i >= half {
            return self.samples[2 * half];
        }
        let f = t - i as f64;
        self.samples[half + i] * (1.0 - f) + self.samples[half + i + 1] * f
    }

    /// `ĝ(ξ) = ∫ g(x) e^{−2πixξ} dx` as the sinc product of the convolution factors.
    pub fn fourier(&self, xi: f64) -> f64 {
        let r: f64 = self.radii.iter().sum();
        let a = 1.0 - r;
        let base = if xi == 0.0 { 2.0 * a } else { (TAU * a * xi).sin() / (PI * xi) };
        base * self.radii.iter().map(|&rn| sinc(TAU * rn * xi)).product::<f64>()
    }

    /// `‖ĝ‖₁` by quadrature, tail bounded by the fitted decay.
    pub fn fourier_l1(&self) -> f64 {
        let h = 1.0 / 64.0;
        let n = (4000.0 / h) as usize;
        let mut s = 0.5 * self.fourier(0.0).abs();
        for i in 1..=n {
            s += self.fourier(i as f64 * h).abs();
        }
        2.0 * s * h
    }

    /// Fits `log|ĝ(x)| ≤ log K − c|x|^{1/2}` on `[lo, hi]`: regress the running
    /// upper envelope on `|x|^{1/2}`, then raise `log K` until the bound holds
    /// at every sample.
    pub fn fit_decay(&self, lo: f64, hi: f64) -> DecayFit {
        let n = 4000;
        let xs: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
        let logs: Vec<f64> = xs.iter().map(|&x| self.fourier(x).abs().max(1e-300).ln()).collect();
        let mut env = logs.clone();
        for i in (0..n).rev() {
            env[i] = env[i].max(env[i + 1]);
        }
        let ts: Vec<f64> = xs.iter().map(|x| x.sqrt()).collect();
        let (slope, intercept, r2) = linear_fit(&ts, &env);
        let c = -slope;
        let log_k = logs
            .iter()
            .zip(&ts)
            .map(|(l, t)| l + c * t)
            .fold(intercept, f64::max);
        DecayFit { log_k, c, residual: 1.0 - r2 }
    }
}

pub fn build_gevrey_bump(epsilon0: f64, conv_terms: usize) -> Result<GevreyBump> {
    GevreyBump::new(epsilon0, conv_terms)
}

fn sinc(y: f64) -> f64 {
    if y.abs() < 1e-8 {
        1.0 - y * y / 6.0
    } else {
        y.sin() / y
    }
}

fn box_smooth(v: &[f64], w: usize) -> Vec<f64> {
    let n = v.len();
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + v[i];
    }
    let norm = 1.0 / (2 * w + 1) as f64;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(w);
            let hi = (i + w + 1).min(n);
            (prefix[hi] - prefix[lo]) * norm
        })
        .collect()
}

/// Least squares `y ≈ a x + b`; returns `(a, b, R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let a = sxy / sxx;
    let b = my - a * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (a, b, r2)
}

/// Shared default bumps.
pub fn default_bump() -> &'static GevreyBump {
    static BUMP: OnceLock<GevreyBump> = OnceLock::new();
    BUMP.get_or_init(|| GevreyBump::new(0.25, 40).expect("valid default"))
}

fn window_bump() -> &'static GevreyBump {
    static BUMP: OnceLock<GevreyBump> = OnceLock::new();
    BUMP.get_or_init(|| GevreyBump::new(0.45, 40).expect("valid window"))
}

/// Nonnegative tile weights `ψ_U = |X(· − c_U)|² / Z` for one cap, where `X`
/// has Fourier coefficients `χ_a` on the digital line `(a, round(slope·a))`,
/// `|a| ≤ A = ⌊R_k/4⌋`. Because all differences `a − a'` stay below the tile
/// count `K`, the `K` translates sum to one exactly on the periodic cell.
#[derive(Clone, Debug)]
pub struct TileWeightSystem {
    pub plate: PlateSpec,
    pub half_width: i64,
    pub line: Vec<(i64, i64, f64)>,
    /// Autocorrelation of the line coefficients, divided by `Z`.
    pub generator: Vec<(i64, i64, f64)>,
    pub norm: f64,
}

impl TileWeightSystem {
    pub fn new(plate: &PlateSpec, ladder: &ScaleLadder) -> Result<Self> {
        let half_width = (ladder.scale(plate.level) / 4.0).floor() as i64;
        let k = plate.tiles as i64;
        if half_width < 1 || 2 * half_width >= k {
            return invalid(format!("tile count {k} too small for generator half-width {half_width}"));
        }
        let window = window_bump();
        let line: Vec<(i64, i64, f64)> = (-half_width..=half_width)
            .map(|a| {
                let b = round_half_away(plate.slope * a as f64);
                (a, b, window.value(a as f64 / (half_width + 1) as f64))
            })
            .collect();
        let norm = k as f64 * line.iter().map(|l| l.2 * l.2).sum::<f64>();
        let mut acc: HashMap<(i64, i64), f64> = HashMap::new();
        for &(a, b, x) in &line {
            for &(a2, b2, y) in &line {
                *acc.entry((a - a2, b - b2)).or_insert(0.0) += x * y / norm;
            }
        }
        let mut generator: Vec<(i64, i64, f64)> = acc.into_iter().map(|((a, b), v)| (a, b, v)).collect();
        generator.sort_by_key(|g| (g.0, g.1));
        Ok(Self {
            plate: plate.clone(),
            half_width,
            line,
            generator,
            norm,
        })
    }

    pub fn for_cap(cap: &Cap, ladder: &ScaleLadder) -> Result<Self> {
        Self::new(&PlateSpec::new(cap, ladder)?, ladder)
    }

    pub fn tiles(&self) -> usize {
        self.plate.tiles
    }

    /// `ψ_U(x)` for tile `i`.
    pub fn psi(&self, i: usize, x: (f64, f64)) -> f64 {
        let c = self.plate.center(i);
        let r = self.plate.period;
        let v: C64 = self
            .line
            .iter()
            .map(|&(a, b, w)| w * C64::from_polar(1.0, TAU * (a as f64 * (x.0 - c.0) + b as f64 * (x.1 - c.1)) / r))
            .sum();
        v.norm_sqr() / self.norm
    }

    /// Fourier coefficients of `Σ_{U ∈ G} ψ_U` for the tile mask `member`.
    pub fn sum_terms(&self, member: &[bool]) -> Vec<Term> {
        let k = self.tiles();
        let mut phase_sum: HashMap<i64, C64> = HashMap::new();
        let mut out = Vec::with_capacity(self.generator.len());
        for &(a, b, g) in &self.generator {
            let s = *phase_sum.entry(a).or_insert_with(|| {
                (0..k)
                    .filter(|&i| member[i])
                    .map(|i| C64::from_polar(1.0, -TAU * (a * i as i64).rem_euclid(k as i64) as f64 / k as f64))
                    .sum()
            });
            let c = s * g;
            if c.norm() > 0.0 {
                out.push((a, b, c));
            }
        }
        out
    }

    pub fn psi_terms(&self, i: usize) -> Vec<Term> {
        let mut mask = vec![false; self.tiles()];
        mask[i] = true;
        self.sum_terms(&mask)
    }
}

pub fn build_tile_weights(plate: &PlateSpec, ladder: &ScaleLadder) -> Result<TileWeightSystem> {
    TileWeightSystem::new(plate, ladder)
}

fn round_half_away(x: f64) -> i64 {
    x.round() as i64
}

#[derive(Clone, Debug, Serialize)]
pub struct CutoffSelftest {
    pub r: u64,
    pub decay: DecayFit,
    /// Largest `|Σ_{|i − i_x| ≤ window} ψ_i(x) − 1|` over caps and sample points.
    pub pou_deviation: f64,
    pub window: usize,
    /// Smallest `ψ_i(x)` seen.
    pub min_psi: f64,
    pub caps: usize,
    pub samples: usize,
}

/// Partition-of-unity and positivity checks of every tile weight system at
/// levels `≥ 1`, summing tiles within `window` of the tile containing each
/// sample point, plus the decay fit of the bump on `[10, 10³]`.
pub fn cutoff_selftest(ladder: &ScaleLadder, samples: usize, window: usize, seed: u64) -> Result<CutoffSelftest> {
    use rand::{Rng, SeedableRng};
    let tree = crate::geometry::CapTree::new(ladder);
    let period = ladder.r_f64();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<(f64, f64)> = (0..samples).map(|_| (rng.gen::<f64>() * period, rng.gen::<f64>() * period)).collect();
    let mut deviation = 0.0f64;
    let mut min_psi = f64::INFINITY;
    let mut caps = 0;
    for k in 1..=tree.depth() {
        for cap in tree.level(k) {
            let sys = TileWeightSystem::for_cap(cap, ladder)?;
            let kt = sys.tiles();
            caps += 1;
            for &x in &points {
                let home = sys.plate.tile_of(x) as i64;
                let reach = window.min(kt / 2) as i64;
                let mut seen = vec![false; kt];
                let mut sum = 0.0;
                for off in -reach..=reach {
                    let i = (home + off).rem_euclid(kt as i64) as usize;
                    if std::mem::replace(&mut seen[i], true) {
                        continue;
                    }
                    let v = sys.psi(i, x);
                    min_psi = min_psi.min(v);
                    sum += v;
                }
                deviation = deviation.max((sum - 1.0).abs());
            }
        }
    }
    Ok(CutoffSelftest {
        r: ladder.r,
        decay: default_bump().fit_decay(10.0, 1e3),
        pou_deviation: deviation,
        window,
        min_psi,
        caps,
        samples,
    })
}

/// `(1 + y²)^{-100}`.
pub fn w_profile(y: f64) -> f64 {
    (1.0 + y * y).powi(-100)
}

/// Below this value the tile weight is treated as zero.
pub const WEIGHT_FLOOR: f64 = 1e-30;

/// `W_U(x)` for tile `i` of `plate`.
pub fn tile_weight(plate: &PlateSpec, i: usize, x: (f64, f64)) -> f64 {
    let (s, d2) = plate.sheared_offset(i, x);
    let w = w_profile(s / plate.short_dim) * w_profile(d2 / plate.long_dim);
    if w < WEIGHT_FLOOR {
        0.0
    } else {
        w
    }
}

/// `|U|⁻¹ Σ_nodes g W_U · cell_area` for a nonnegative real field.
pub fn weighted_cell_average(field: &SampledField, plate: &PlateSpec, tile: usize) -> Result<f64> {
    let grid = field.grid;
    let m = grid.m;
    let mut acc = 0.0;
    for n2 in 0..m {
        let x2 = n2 as f64 * grid.spacing();
        let d2 = wrap(x2 - plate.center(tile).1, plate.period);
        let w2 = w_profile(d2 / plate.long_dim);
        if w2 < WEIGHT_FLOOR {
            continue;
        }
        for n1 in 0..m {
            let v = field.values[n2 * m + n1].re;
            if v < -1e-12 {
                return Err(Error::InvalidInput(format!("negative field value {v}")));
            }
            let w = tile_weight(plate, tile, grid.node(n1, n2));
            acc += v * w;
        }
    }
    Ok(acc * grid.cell_area() / plate.area())
}

/// `κ_W = |U|⁻¹ ∫ W_U`.
pub fn kappa_w() -> f64 {
    w_hat(0.0) * weight_spectrum().omega2(0.0)
}

/// `∫_ℝ (1+y²)^{-100} cos(2πηy) dy`.
pub fn w_hat(eta: f64) -> f64 {
    let h = 1.0 / 1024.0;
    let n = 4096;
    let mut s = w_profile(0.0);
    for i in 1..=n {
        let y = i as f64 * h;
        s += 2.0 * w_profile(y) * (TAU * eta * y).cos();
    }
    s * h
}

/// Table of `∫_{-1/2}^{1/2} (1+y²)^{-100} cos(2πvy) dy` on a uniform grid in `v`.
pub struct WeightSpectrum {
    step: f64,
    table: Vec<f64>,
}

const OMEGA_RANGE: f64 = 1024.0;
const OMEGA_STEP: f64 = 1.0 / 32.0;

impl WeightSpectrum {
    fn build() -> Self {
        let (nodes, weights) = gauss_legendre(12);
        let panels = 64;
        let mut quad = Vec::with_capacity(panels * nodes.len());
        for p in 0..panels {
            let a = -0.5 + p as f64 / panels as f64;
            let hw = 0.5 / panels as f64;
            for (x, w) in nodes.iter().zip(&weights) {
                let y = a + hw * (1.0 + x);
                quad.push((y, w * hw * w_profile(y)));
            }
        }
        let count = (OMEGA_RANGE / OMEGA_STEP) as usize;
        let table = (0..=count)
            .map(|i| {
                let v = i as f64 * OMEGA_STEP;
                quad.iter().map(|(y, w)| w * (TAU * v * y).cos()).sum()
            })
            .collect();
        Self { step: OMEGA_STEP, table }
    }

    pub fn omega2(&self, v: f64) -> f64 {
        let t = v.abs() / self.step;
        if t > (self.table.len() - 5) as f64 {
            return direct_omega2(v);
        }
        // 8-point Lagrange interpolation on the even table.
        let base = t.floor() as i64 - 3;
        let mut s = 0.0;
        for j in 0..8 {
            let xj = (base + j) as f64;
            let mut l = 1.0;
            for k in 0..8 {
                if k != j {
                    let xk = (base + k) as f64;
                    l *= (t - xk) / (xj - xk);
                }
            }
            let idx = (base + j).unsigned_abs() as usize;
            s += l * self.table[idx];
        }
        s
    }
}

fn direct_omega2(v: f64) -> f64 {
    let n = 20000;
    let h = 1.0 / n as f64;
    (0..n)
        .map(|i| {
            let y = -0.5 + (i as f64 + 0.5) * h;
            w_profile(y) * (TAU * v * y).cos()
        })
        .sum::<f64>()
        * h
}

pub fn weight_spectrum() -> &'static WeightSpectrum {
    static SPEC: OnceLock<WeightSpectrum> = OnceLock::new();
    SPEC.get_or_init(WeightSpectrum::build)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre(n, x);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Weighted averages `⨏_U g` over every tile of a plate, computed from the
/// Fourier coefficients of `g`:
/// `⨏_{U_i} g = Σ_u ĝ(u) e^{2πi u₁ i/K} ŵ(u₁/K) ω(u₂ − slope·u₁)`.
pub fn spectral_tile_averages(coeffs: &[Term], plate: &PlateSpec) -> Vec<f64> {
    let spec = weight_spectrum();
    let k = plate.tiles as f64;
    tile_sums(coeffs, plate, |v| spec.omega2(v), |u1| w_hat(u1 / k))
}

/// Sharp integrals `∫_U g` over every tile of `plate` for a real trigonometric
/// polynomial `g`, evaluated in closed form from its coefficients.
pub fn spectral_tile_masses(coeffs: &[Term], plate: &PlateSpec) -> Vec<f64> {
    let k = plate.tiles as f64;
    let area = plate.area();
    tile_sums(coeffs, plate, normalized_sinc, |u1| area * normalized_sinc(u1 / k))
}

/// `sin(πx)/(πx)`.
pub fn normalized_sinc(x: f64) -> f64 {
    sinc(PI * x)
}

/// `Σ_u c_u row(u₂ − slope·u₁) col(u₁) e(u₁ i / K)` for each tile `i`.
fn tile_sums(coeffs: &[Term], plate: &PlateSpec, row: impl Fn(f64) -> f64, col: impl Fn(f64) -> f64) -> Vec<f64> {
    let k = plate.tiles;
    let mut by_col: HashMap<i64, C64> = HashMap::new();
    for &(u1, u2, c) in coeffs {
        *by_col.entry(u1).or_insert(C64::new(0.0, 0.0)) += c * row(u2 as f64 - plate.slope * u1 as f64);
    }
    let mut cols: Vec<(i64, C64)> = by_col.into_iter().map(|(u1, s)| (u1, s * col(u1 as f64))).collect();
    cols.sort_by_key(|c| c.0);
    (0..k)
        .map(|i| {
            cols.iter()
                .map(|&(u1, s)| (s * C64::from_polar(1.0, TAU * (u1 * i as i64).rem_euclid(k as i64) as f64 / k as f64)).re)
                .sum()
        })
        .collect()
}

/// `w_k(x) = c (1 + |x|²/s)^{-10}` with `c = 9/(π s)` so the plane integral is one.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ScaleWeight {
    pub scale: f64,
}

impl ScaleWeight {
    pub fn value(&self, d: (f64, f64)) -> f64 {
        let q = (d.0 * d.0 + d.1 * d.1) / self.scale;
        9.0 / (PI * self.scale) * (1.0 + q).powi(-10)
    }

    /// Samples on the grid about the origin with minimal-image offsets.
    pub fn sample(&self, grid: GridSpec) -> Vec<f64> {
        let m = grid.m;
        let p = grid.period();
        let mut out = vec![0.0; m * m];
        for n2 in 0..m {
            let d2 = wrap(n2 as f64 * grid.spacing(), p);
            for n1 in 0..m {
                let d1 = wrap(n1 as f64 * grid.spacing(), p);
                out[n2 * m + n1] = self.value((d1, d2));
            }
        }
        out
    }

    pub fn grid_mass(&self, grid: GridSpec) -> f64 {
        self.sample(grid).iter().sum::<f64>() * grid.cell_area()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Low,
    High,
    Annulus,
}

/// Radial filters built from `φ(ξ) = Φ(|ξ|)`, `Φ = 1` on `[0, 1]`, `0` on `[2, ∞)`.
#[derive(Clone, Copy, Debug)]
pub struct FilterBank;

impl FilterBank {
    pub fn phi_radial(t: f64) -> f64 {
        if t <= 1.0 {
            return 1.0;
        }
        if t >= 2.0 {
            return 0.0;
        }
        let b = window_bump();
        let eps = b.epsilon0;
        b.value(1.0 - eps + eps * (t - 1.0))
    }

    pub fn phi(xi: (f64, f64)) -> f64 {
        Self::phi_radial(xi.0.hypot(xi.1))
    }

    pub fn eta(kind: FilterKind, r: f64, xi: (f64, f64)) -> f64 {
        let t = xi.0.hypot(xi.1);
        match kind {
            FilterKind::Low => Self::phi_radial(t / r),
            FilterKind::High => Self::phi_radial(t) - Self::phi_radial(t / r),
            FilterKind::Annulus => Self::phi_radial(t / r) - Self::phi_radial(2.0 * t / r),
        }
    }

    /// Applies the filter to coefficient terms with frequency `u / R`.
    pub fn apply_terms(kind: FilterKind, r: f64, period: f64, terms: &[Term]) -> Vec<Term> {
        terms
            .iter()
            .filter_map(|&(u1, u2, c)| {
                let e = Self::eta(kind, r, (u1 as f64 / period, u2 as f64 / period));
                (e != 0.0).then_some((u1, u2, c * e))
            })
            .collect()
    }
}

/// FFT, multiply by the chosen `η`, inverse FFT.
pub fn band_filter(field: &SampledField, r: f64, kind: FilterKind) -> Result<SampledField> {
    if !(r > 0.0) {
        return invalid(format!("filter radius must be positive, got {r}"));
    }
    let grid = field.grid;
    let m = grid.m;
    let mut v = field.values.clone();
    fft2(&mut v, m, false);
    let norm = 1.0 / grid.nodes() as f64;
    let signed = |b: usize| if b >= m / 2 { b as i64 - m as i64 } else { b as i64 };
    for n2 in 0..m {
        let xi2 = signed(n2) as f64 / grid.period();
        for n1 in 0..m {
            let xi1 = signed(n1) as f64 / grid.period();
            v[n2 * m + n1] *= FilterBank::eta(kind, r, (xi1, xi2)) * norm;
        }
    }
    fft2(&mut v, m, true);
    Ok(SampledField { grid, values: v })
}

/// Cosine transform `∫ g(y) cos(2πηy) dy` of an even function, tabulated by
/// one FFT of trapezoid samples with spacing `dy` over `|y| < n·dy/2`.
#[derive(Clone, Debug)]
pub struct EvenTransform {
    step: f64,
    table: Vec<f64>,
}

impl EvenTransform {
    fn new(g: impl Fn(f64) -> f64, dy: f64, n: usize) -> Self {
        let mut data: Vec<C64> = (0..n)
            .map(|j| {
                let y = if j < n / 2 { j as f64 } else { j as f64 - n as f64 } * dy;
                C64::new(g(y.abs()), 0.0)
            })
            .collect();
        rustfft::FftPlanner::new().plan_fft_forward(n).process(&mut data);
        Self {
            step: 1.0 / (n as f64 * dy),
            table: data[..=n / 2].iter().map(|c| c.re * dy).collect(),
        }
    }

    /// Linear interpolation in the table; zero beyond its range.
    pub fn value(&self, eta: f64) -> f64 {
        let t = eta.abs() / self.step;
        let i = t.floor() as usize;
        if i + 1 >= self.table.len() {
            return 0.0;
        }
        let w = t - i as f64;
        self.table[i] * (1.0 - w) + self.table[i + 1] * w
    }
}

/// Transform of `|ĝ|` for the default bump `g`: the spectrum of the kernel
/// `|ρ^∨|` along one axis.
pub fn abs_kernel_transform() -> &'static EvenTransform {
    static T: OnceLock<EvenTransform> = OnceLock::new();
    T.get_or_init(|| {
        let b = default_bump();
        EvenTransform::new(|y| b.fourier(y).abs(), 1.0 / 512.0, 1 << 20)
    })
}

/// Box cutoff `ρ(ξ) = g(ξ·t/a) g(ξ·n/b)` with `g` the default bump, scaled so
/// it equals one on the box with half-sides `(a, b)·plateau`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct BoxKernel {
    pub tangent: (f64, f64),
    pub half_t: f64,
    pub half_n: f64,
}

impl BoxKernel {
    /// Kernel of the box with the given half-sides along `tangent` and its normal.
    pub fn new(tangent: (f64, f64), side_t: f64, side_n: f64) -> Self {
        let p = default_bump().plateau_halfwidth;
        Self {
            tangent,
            half_t: side_t / p,
            half_n: side_n / p,
        }
    }

    /// Kernel adapted to the cap: its `R⁻¹`-neighborhood fits in the plateau.
    pub fn for_cap(cap: &Cap, r: f64) -> Self {
        let hw = cap.width() / 2.0;
        let s = (1.0 + 4.0 * cap.center.0 * cap.center.0).sqrt();
        Self::new(cap.tangent, hw * s, (hw * hw + 2.0 / r) / s)
    }

    /// Fourier transform of `|ρ^∨|` at `ξ`.
    pub fn abs_dual_fourier(&self, xi: (f64, f64)) -> f64 {
        let (t1, t2) = self.tangent;
        let along = xi.0 * t1 + xi.1 * t2;
        let across = -xi.0 * t2 + xi.1 * t1;
        let h = abs_kernel_transform();
        h.value(along / self.half_t) * h.value(across / self.half_n)
    }

    /// `‖ρ^∨‖₁`.
    pub fn dual_l1(&self) -> f64 {
        self.abs_dual_fourier((0.0, 0.0))
    }
}

impl ScaleWeight {
    /// `ŵ(ξ)`, the plane Fourier transform of the weight.
    pub fn fourier(&self, xi: (f64, f64)) -> f64 {
        static T: OnceLock<EvenTransform> = OnceLock::new();
        // Integrating out one variable: ∫(1+x²+y²)^{-10} dy = B (1+x²)^{-9.5}.
        let t = T.get_or_init(|| {
            let b = simpson(|y| (1.0 + y * y).powi(-10), -40.0, 40.0, 1 << 16);
            EvenTransform::new(|x| b * (1.0 + x * x).powf(-9.5), 1.0 / 256.0, 1 << 18)
        });
        9.0 / PI * t.value(self.scale.sqrt() * xi.0.hypot(xi.1))
    }
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    s * h / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CapTree;

    #[test]
    fn bump_plateau_and_support() {
        let b = default_bump();
        assert!((b.value(0.0) - 1.0).abs() < 1e-12);
        assert!((b.value(b.plateau_halfwidth) - 1.0).abs() < 1e-9);
        assert_eq!(b.value(1.0), 0.0);
        assert_eq!(b.value(-1.0), 0.0);
        assert!(b.decay.c > 0.0);
    }

    #[test]
    fn sampled_profile_matches_sinc_product() {
        let b = default_bump();
        // Trapezoid transform of the samples against the analytic product.
        for &xi in &[0.0, 0.5, 1.7, 4.0] {
            let half = (b.samples.len() - 1) / 2;
            let s: f64 = b
                .samples
                .iter()
                .enumerate()
                .map(|(i, g)| g * (TAU * xi * (i as f64 - half as f64) * PROFILE_STEP).cos())
                .sum::<f64>()
                * PROFILE_STEP;
            assert!((s - b.fourier(xi)).abs() < 2e-3, "xi {xi}: {s} vs {}", b.fourier(xi));
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(12);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(10)).sum();
        assert!((s - 2.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn omega_interpolation_matches_direct() {
        let s = weight_spectrum();
        for &v in &[0.0, 0.3, 2.71, 17.5, -40.2] {
            assert!((s.omega2(v) - direct_omega2(v)).abs() < 1e-9, "v={v}");
        }
    }

    #[test]
    fn tile_weights_partition_unity() {
        let ladder = ScaleLadder::new(256).unwrap();
        let tree = CapTree::new(&ladder);
        let sys = TileWeightSystem::for_cap(tree.cap(2, 20), &ladder).unwrap();
        for &x in &[(0.3, 7.1), (100.0, -50.0), (13.7, 200.2)] {
            let s: f64 = (0..sys.tiles()).map(|i| sys.psi(i, x)).sum();
            assert!((s - 1.0).abs() < 1e-13, "{s}");
        }
        for (a, b, c) in sys.sum_terms(&vec![true; sys.tiles()]) {
            let expect = if (a, b) == (0, 0) { 1.0 } else { 0.0 };
            assert!((c - C64::new(expect, 0.0)).norm() < 1e-14);
        }
    }

    #[test]
    fn sharp_tile_masses_partition_the_cell() {
        let ladder = ScaleLadder::new(256).unwrap();
        let tree = CapTree::new(&ladder);
        let plate = PlateSpec::new(tree.cap(2, 11), &ladder).unwrap();
        let ones = spectral_tile_masses(&[(0, 0, C64::new(1.0, 0.0))], &plate);
        for m in &ones {
            assert!((m - plate.area()).abs() < 1e-9 * plate.area());
        }
        // Nonzero modes integrate to zero over the whole cell.
        let g = [(0, 0, C64::new(2.0, 0.0)), (3, -1, C64::new(0.4, 0.2)), (-3, 1, C64::new(0.4, -0.2)), (7, 5, C64::new(0.1, 0.0)), (-7, -5, C64::new(0.1, 0.0))];
        let total: f64 = spectral_tile_masses(&g, &plate).iter().sum();
        assert!((total - 2.0 * 256.0 * 256.0).abs() < 1e-8 * total);
    }

    #[test]
    fn filters_telescope() {
        for &t in &[0.0, 0.5, 1.3, 1.9, 2.5] {
            let xi = (t, 0.0);
            let lo = FilterBank::eta(FilterKind::Low, 0.7, xi);
            let hi = FilterBank::eta(FilterKind::High, 0.7, xi);
            assert_eq!(lo + hi, FilterBank::phi(xi));
        }
    }

    #[test]
    fn kernel_transforms_at_origin() {
        let l1 = default_bump().fourier_l1();
        assert!((abs_kernel_transform().value(0.0) - l1).abs() < 1e-3 * l1);
        let w = ScaleWeight { scale: 16.0 };
        assert!((w.fourier((0.0, 0.0)) - 1.0).abs() < 1e-9);
        assert!(w.fourier((1.0, 0.0)) < 1e-4);
    }
}
