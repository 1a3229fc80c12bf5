//! Band-limited functions on the R⁻¹-neighborhood of the parabola: frequency
//! lattice, coefficient profiles, grid sampling, norms and test families.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fft::{par_rows, synthesize_terms, RowSynth, Term, C64};
use crate::geometry::{CapTree, Interval, ScaleLadder, SmallCapPartition};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyLattice {
    pub r: u64,
    /// Points `(j, m)` sorted by `j`, then `m`.
    pub points: Vec<(i64, i64)>,
    /// `col_start[j + R]..col_start[j + R + 1]` indexes the points of column `j`.
    col_start: Vec<usize>,
}

impl FrequencyLattice {
    pub fn new(r: u64) -> Self {
        let ri = r as i64;
        let mut points = Vec::with_capacity(3 * (2 * r as usize + 1));
        let mut col_start = Vec::with_capacity(2 * r as usize + 2);
        for j in -ri..=ri {
            col_start.push(points.len());
            let (lo, hi) = column_bounds(j, ri);
            points.extend((lo..=hi).map(|m| (j, m)));
        }
        col_start.push(points.len());
        Self { r, points, col_start }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index range of the points in column `j`.
    pub fn column(&self, j: i64) -> std::ops::Range<usize> {
        let i = (j + self.r as i64) as usize;
        self.col_start[i]..self.col_start[i + 1]
    }

    /// Index range of all points with `j` in the inclusive column range.
    pub fn columns(&self, lo: i64, hi: i64) -> std::ops::Range<usize> {
        if lo > hi {
            return 0..0;
        }
        self.column(lo).start..self.column(hi).end
    }

    pub fn interval_range(&self, iv: &Interval) -> std::ops::Range<usize> {
        match iv.column_range(self.r) {
            Some((lo, hi)) => self.columns(lo, hi),
            None => 0..0,
        }
    }

    pub fn index_of(&self, j: i64, m: i64) -> Option<usize> {
        if j.abs() > self.r as i64 {
            return None;
        }
        let col = self.column(j);
        let first = self.points[col.start].1;
        let k = m - first;
        (k >= 0 && (k as usize) < col.len()).then(|| col.start + k as usize)
    }
}

/// Smallest and largest `m` with `|m − j²/R| ≤ 1`.
fn column_bounds(j: i64, r: i64) -> (i64, i64) {
    let sq = j * j;
    ((sq - r).div_euclid(r) + i64::from((sq - r).rem_euclid(r) != 0), (sq + r).div_euclid(r))
}

pub fn build_lattice(r: u64) -> FrequencyLattice {
    FrequencyLattice::new(r)
}

#[derive(Clone, Debug)]
pub struct FrequencyProfile {
    pub lattice: Arc<FrequencyLattice>,
    pub coeffs: Vec<C64>,
}

impl FrequencyProfile {
    pub fn zeros(lattice: Arc<FrequencyLattice>) -> Self {
        let n = lattice.len();
        Self {
            lattice,
            coeffs: vec![C64::new(0.0, 0.0); n],
        }
    }

    pub fn r(&self) -> u64 {
        self.lattice.r
    }

    pub fn set(&mut self, j: i64, m: i64, c: C64) -> Result<()> {
        let i = self
            .lattice
            .index_of(j, m)
            .ok_or_else(|| Error::InvalidParameter(format!("({j}, {m}) is not a lattice point")))?;
        self.coeffs[i] = c;
        Ok(())
    }

    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.re == 0.0 && c.im == 0.0)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            lattice: self.lattice.clone(),
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.lattice.r != other.lattice.r {
            return invalid("profiles live on different lattices");
        }
        Ok(Self {
            lattice: self.lattice.clone(),
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a + b).collect(),
        })
    }

    /// Nonzero coefficients as `(j, m, a)` terms.
    pub fn terms(&self) -> Vec<Term> {
        self.terms_in(0..self.coeffs.len())
    }

    pub fn terms_in(&self, range: std::ops::Range<usize>) -> Vec<Term> {
        range
            .filter(|&i| self.coeffs[i].re != 0.0 || self.coeffs[i].im != 0.0)
            .map(|i| (self.lattice.points[i].0, self.lattice.points[i].1, self.coeffs[i]))
            .collect()
    }

    /// Terms of the cap projection onto `iv`.
    pub fn cap_terms(&self, iv: &Interval) -> Vec<Term> {
        self.terms_in(self.lattice.interval_range(iv))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let entries: Vec<[f64; 4]> = self
            .terms()
            .iter()
            .map(|&(j, m, c)| [j as f64, m as f64, c.re, c.im])
            .collect();
        serde_json::json!({ "R": self.r(), "entries": entries })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            #[serde(rename = "R")]
            r: u64,
            entries: Vec<[f64; 4]>,
        }
        let raw: Raw = serde_json::from_value(v.clone())?;
        let mut p = Self::zeros(Arc::new(FrequencyLattice::new(raw.r)));
        for e in raw.entries {
            if e[0].fract() != 0.0 || e[1].fract() != 0.0 {
                return Err(Error::InvalidInput("lattice indices must be integers".into()));
            }
            p.set(e[0] as i64, e[1] as i64, C64::new(e[2], e[3]))?;
        }
        Ok(p)
    }
}

/// Projection onto the columns `j` with `j/R` in `iv` (half-open unless the
/// interval is closed on the right).
pub fn cap_component(profile: &FrequencyProfile, iv: &Interval) -> FrequencyProfile {
    let mut out = FrequencyProfile::zeros(profile.lattice.clone());
    let range = profile.lattice.interval_range(iv);
    out.coeffs[range.clone()].copy_from_slice(&profile.coeffs[range]);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub r: u64,
    pub oversampling: usize,
    pub m: usize,
}

impl GridSpec {
    pub fn new(r: u64, oversampling: usize) -> Result<Self> {
        if oversampling < 4 {
            return invalid(format!("oversampling must be at least 4, got {oversampling}"));
        }
        Ok(Self {
            r,
            oversampling,
            m: oversampling * r as usize,
        })
    }

    pub fn period(&self) -> f64 {
        self.r as f64
    }

    pub fn spacing(&self) -> f64 {
        self.period() / self.m as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.spacing() * self.spacing()
    }

    pub fn node(&self, n1: usize, n2: usize) -> (f64, f64) {
        (n1 as f64 * self.spacing(), n2 as f64 * self.spacing())
    }

    pub fn nodes(&self) -> usize {
        self.m * self.m
    }
}

/// Grid samples, `values[n2 * M + n1]` at `x = (n1, n2) · R/M`.
#[derive(Clone, Debug)]
pub struct SampledField {
    pub grid: GridSpec,
    pub values: Vec<C64>,
}

impl SampledField {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            values: vec![C64::new(0.0, 0.0); grid.nodes()],
        }
    }

    pub fn from_terms(terms: &[Term], grid: GridSpec) -> Self {
        let mut f = Self::zeros(grid);
        synthesize_terms(terms, grid.m, &mut f.values);
        f
    }

    pub fn from_real(grid: GridSpec, values: Vec<f64>) -> Self {
        Self {
            grid,
            values: values.into_iter().map(|v| C64::new(v, 0.0)).collect(),
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn at(&self, n1: usize, n2: usize) -> C64 {
        self.values[n2 * self.grid.m + n1]
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        }
    }

    /// Normalized coefficients `f̂(u)` indexed like the values, bin `u mod M`.
    pub fn spectrum(&self) -> Vec<C64> {
        let mut v = self.values.clone();
        crate::fft::fft2(&mut v, self.grid.m, false);
        let norm = 1.0 / self.grid.nodes() as f64;
        v.iter_mut().for_each(|c| *c *= norm);
        v
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"DCPL")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&self.grid.r.to_le_bytes())?;
        w.write_all(&(self.grid.m as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(16 * self.grid.m);
        for row in self.values.chunks(self.grid.m) {
            buf.clear();
            for c in row {
                buf.extend_from_slice(&c.re.to_le_bytes());
                buf.extend_from_slice(&c.im.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut rd: R) -> Result<Self> {
        let mut head = [0u8; 24];
        rd.read_exact(&mut head)?;
        if &head[..4] != b"DCPL" {
            return Err(Error::InvalidInput("bad magic".into()));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != 1 {
            return Err(Error::InvalidInput(format!("unsupported version {version}")));
        }
        let r = u64::from_le_bytes(head[8..16].try_into().unwrap());
        let m = u64::from_le_bytes(head[16..24].try_into().unwrap()) as usize;
        if r == 0 || m % r as usize != 0 {
            return Err(Error::InvalidInput("grid size is not a multiple of R".into()));
        }
        let grid = GridSpec {
            r,
            oversampling: m / r as usize,
            m,
        };
        let mut bytes = vec![0u8; 16 * m * m];
        rd.read_exact(&mut bytes)?;
        let values = bytes
            .chunks_exact(16)
            .map(|b| C64::new(f64::from_le_bytes(b[..8].try_into().unwrap()), f64::from_le_bytes(b[8..].try_into().unwrap())))
            .collect();
        Ok(Self { grid, values })
    }
}

pub fn synthesize(profile: &FrequencyProfile, grid: GridSpec) -> Result<SampledField> {
    if profile.r() != grid.r {
        return invalid(format!("profile R={} but grid R={}", profile.r(), grid.r));
    }
    Ok(SampledField::from_terms(&profile.terms(), grid))
}

pub fn lp_norm(field: &SampledField, p: f64) -> Result<f64> {
    if p < 1.0 || p.is_nan() {
        return invalid(format!("p must be at least 1, got {p}"));
    }
    let sum: f64 = field.values.iter().map(|v| v.norm().powf(p)).sum();
    Ok((sum * field.grid.cell_area()).powf(1.0 / p))
}

pub fn superlevel_measure(field: &SampledField, alpha: f64) -> f64 {
    let count = field.values.iter().filter(|v| v.norm() > alpha).count();
    count as f64 * field.grid.cell_area()
}

/// Streams the grid samples of `terms` row by row; `body(state, n2, row)`.
pub fn stream_rows<T, I, B>(terms: &[Term], grid: GridSpec, init: I, body: B) -> Vec<T>
where
    T: Send,
    I: Fn() -> T + Sync,
    B: Fn(&mut T, usize, &[C64]) + Sync,
{
    let synth = RowSynth::new(grid.m);
    let states = par_rows(
        grid.m,
        || (init(), synth.scratch()),
        |(state, scratch), n2| {
            synth.row(terms, n2, scratch);
            body(state, n2, &scratch.buf);
        },
    );
    states.into_iter().map(|(s, _)| s).collect()
}

/// Streams several functions at once; `body(state, n2, rows)` sees one row per spectrum.
pub fn stream_rows_multi<T, I, B>(spectra: &[&[Term]], grid: GridSpec, init: I, body: B) -> Vec<T>
where
    T: Send,
    I: Fn() -> T + Sync,
    B: Fn(&mut T, usize, &[Vec<C64>]) + Sync,
{
    let synth = RowSynth::new(grid.m);
    let states = par_rows(
        grid.m,
        || (init(), synth.scratch(), vec![Vec::<C64>::new(); spectra.len()]),
        |(state, scratch, rows), n2| {
            for (terms, out) in spectra.iter().zip(rows.iter_mut()) {
                synth.row(terms, n2, scratch);
                out.clear();
                out.extend_from_slice(&scratch.buf);
            }
            body(state, n2, rows);
        },
    );
    states.into_iter().map(|(s, _, _)| s).collect()
}

/// Grid sup-norm of the function with coefficients `terms`.
pub fn sup_norm_terms(terms: &[Term], grid: GridSpec) -> f64 {
    if terms.is_empty() {
        return 0.0;
    }
    stream_rows(terms, grid, || 0.0f64, |acc, _, row| {
        *acc = row.iter().map(|v| v.norm()).fold(*acc, f64::max);
    })
    .into_iter()
    .fold(0.0, f64::max)
}

/// `Σ_nodes |f|^p · cell_area` for each `p` in `powers`, streamed over rows.
pub fn power_sums_terms(terms: &[Term], grid: GridSpec, powers: &[f64]) -> Vec<f64> {
    let parts = stream_rows(terms, grid, || vec![0.0f64; powers.len()], |acc, _, row| {
        for v in row {
            let a = v.norm();
            for (s, &p) in acc.iter_mut().zip(powers) {
                *s += a.powf(p);
            }
        }
    });
    let mut out = vec![0.0; powers.len()];
    for part in parts {
        out.iter_mut().zip(part).for_each(|(o, v)| *o += v);
    }
    out.iter().map(|s| s * grid.cell_area()).collect()
}

/// Grid sup-norms of every canonical cap component.
pub fn theta_sup_norms(profile: &FrequencyProfile, tree: &CapTree, grid: GridSpec) -> Vec<f64> {
    tree.thetas().iter().map(|t| sup_norm_terms(&profile.cap_terms(&t.interval), grid)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Flat,
    RandomPhase,
    SingleCap,
    Block,
    Gaussian,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 5] = [Self::Flat, Self::RandomPhase, Self::SingleCap, Self::Block, Self::Gaussian];

    pub fn name(self) -> &'static str {
        match self {
            Self::Flat => "flat",
            Self::RandomPhase => "random_phase",
            Self::SingleCap => "single_cap",
            Self::Block => "block",
            Self::Gaussian => "gaussian",
        }
    }

    pub fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl std::str::FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown family {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub kind: FamilyKind,
    pub beta: f64,
    pub seed: u64,
    /// Ladder level of the active cap for [`FamilyKind::Block`].
    pub block_level: usize,
}

impl FamilySpec {
    pub fn new(kind: FamilyKind, beta: f64, seed: u64) -> Self {
        Self {
            kind,
            beta,
            seed,
            block_level: 1,
        }
    }
}

/// Unnormalized family coefficients.
pub fn make_family_raw(spec: &FamilySpec, ladder: &ScaleLadder) -> Result<FrequencyProfile> {
    let lattice = Arc::new(FrequencyLattice::new(ladder.r));
    let mut p = FrequencyProfile::zeros(lattice.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.kind.stream());
    let one = C64::new(1.0, 0.0);
    match spec.kind {
        FamilyKind::Flat => p.coeffs.iter_mut().for_each(|c| *c = one),
        FamilyKind::RandomPhase => {
            for c in p.coeffs.iter_mut() {
                *c = C64::from_polar(1.0, rng.gen::<f64>() * std::f64::consts::TAU);
            }
        }
        FamilyKind::Gaussian => {
            for c in p.coeffs.iter_mut() {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                *c = C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2;
            }
        }
        FamilyKind::SingleCap => {
            let part = SmallCapPartition::new(ladder, spec.beta)?;
            let iv = &part.caps[rng.gen_range(0..part.len())];
            let range = lattice.interval_range(iv);
            p.coeffs[range].iter_mut().for_each(|c| *c = one);
        }
        FamilyKind::Block => {
            if spec.block_level > ladder.n {
                return invalid(format!("block level {} exceeds N={}", spec.block_level, ladder.n));
            }
            let tree = CapTree::new(ladder);
            let caps = tree.level(spec.block_level);
            let iv = &caps[rng.gen_range(0..caps.len())].interval;
            let range = lattice.interval_range(iv);
            p.coeffs[range].iter_mut().for_each(|c| *c = one);
        }
    }
    Ok(p)
}

/// Family profile scaled so that `max_θ ‖f_θ‖_∞ = 1` on the grid.
pub fn make_family_on(spec: &FamilySpec, ladder: &ScaleLadder, grid: GridSpec) -> Result<FrequencyProfile> {
    let raw = make_family_raw(spec, ladder)?;
    let tree = CapTree::new(ladder);
    let top = theta_sup_norms(&raw, &tree, grid).into_iter().fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(raw);
    }
    Ok(raw.scaled(1.0 / top))
}

pub fn make_family(kind: FamilyKind, ladder: &ScaleLadder, beta: f64, seed: u64) -> Result<FrequencyProfile> {
    make_family_on(&FamilySpec::new(kind, beta, seed), ladder, GridSpec::new(ladder.r, 4)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_columns() {
        let lat = FrequencyLattice::new(256);
        let ms: Vec<i64> = lat.column(0).map(|i| lat.points[i].1).collect();
        assert_eq!(ms, vec![-1, 0, 1]);
        let ms: Vec<i64> = lat.column(256).map(|i| lat.points[i].1).collect();
        assert_eq!(ms, vec![255, 256, 257]);
        let ms: Vec<i64> = lat.column(3).map(|i| lat.points[i].1).collect();
        assert_eq!(ms, vec![0, 1]);
    }

    #[test]
    fn binary_round_trip() {
        let grid = GridSpec::new(4, 4).unwrap();
        let f = SampledField::from_terms(&[(1, 2, C64::new(0.5, -1.0))], grid);
        let mut bytes = Vec::new();
        f.write_binary(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 24 + 16 * 256);
        let g = SampledField::read_binary(bytes.as_slice()).unwrap();
        assert_eq!(g.values, f.values);
    }

    #[test]
    fn profile_json_round_trip() {
        let mut p = FrequencyProfile::zeros(Arc::new(FrequencyLattice::new(256)));
        p.set(3, 1, C64::new(2.0, -1.0)).unwrap();
        let q = FrequencyProfile::from_json(&p.to_json()).unwrap();
        assert_eq!(p.coeffs, q.coeffs);
        assert!(p.set(3, 7, C64::new(1.0, 0.0)).is_err());
    }
}
