//! FFT plumbing: row-streamed synthesis of sparse spectra on the fine grid and
//! in-place 2D transforms.

use std::f64::consts::TAU;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

pub type C64 = Complex64;

/// A trigonometric polynomial `Σ c · e^{2πi(u1 x1 + u2 x2)/R}` on the period-`R` cell.
pub type Term = (i64, i64, C64);

/// Rows processed per parallel work item.
const ROW_CHUNK: usize = 16;

#[derive(Clone)]
pub struct RowSynth {
    m: usize,
    inverse: Arc<dyn Fft<f64>>,
    forward: Arc<dyn Fft<f64>>,
    twiddle: Arc<Vec<C64>>,
}

/// Per-worker buffers for [`RowSynth`].
pub struct RowScratch {
    pub buf: Vec<C64>,
    scratch: Vec<C64>,
}

impl RowSynth {
    pub fn new(m: usize) -> Self {
        let mut planner = FftPlanner::new();
        let inverse = planner.plan_fft_inverse(m);
        let forward = planner.plan_fft_forward(m);
        let twiddle = (0..m).map(|t| C64::from_polar(1.0, TAU * t as f64 / m as f64)).collect();
        Self {
            m,
            inverse,
            forward,
            twiddle: Arc::new(twiddle),
        }
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn scratch(&self) -> RowScratch {
        let n = self.inverse.get_inplace_scratch_len().max(self.forward.get_inplace_scratch_len());
        RowScratch {
            buf: vec![C64::new(0.0, 0.0); self.m],
            scratch: vec![C64::new(0.0, 0.0); n],
        }
    }

    /// `e^{2πi t/M}` for any integer `t`.
    pub fn phase(&self, t: i64) -> C64 {
        self.twiddle[t.rem_euclid(self.m as i64) as usize]
    }

    /// Values of `terms` along grid row `n2` (fixed `x2 = n2 R/M`), written to
    /// `out.buf` indexed by `n1`.
    pub fn row(&self, terms: &[Term], n2: usize, out: &mut RowScratch) {
        let m = self.m as i64;
        out.buf.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        for &(u1, u2, c) in terms {
            let ph = self.twiddle[(u2.rem_euclid(m) as usize * n2) % self.m];
            out.buf[u1.rem_euclid(m) as usize] += c * ph;
        }
        self.inverse.process_with_scratch(&mut out.buf, &mut out.scratch);
    }

    pub fn forward_inplace(&self, data: &mut [C64], scratch: &mut RowScratch) {
        self.forward.process_with_scratch(data, &mut scratch.scratch);
    }

    pub fn inverse_inplace(&self, data: &mut [C64], scratch: &mut RowScratch) {
        self.inverse.process_with_scratch(data, &mut scratch.scratch);
    }
}

/// Runs `body(state, n2)` over all rows `0..m` in parallel chunks and returns
/// the per-chunk states in row order, so folds over the result are
/// deterministic.
pub fn par_rows<T, I, B>(m: usize, init: I, body: B) -> Vec<T>
where
    T: Send,
    I: Fn() -> T + Sync,
    B: Fn(&mut T, usize) + Sync,
{
    let chunks: Vec<usize> = (0..m.div_ceil(ROW_CHUNK)).collect();
    chunks
        .into_par_iter()
        .map(|c| {
            let mut state = init();
            let end = ((c + 1) * ROW_CHUNK).min(m);
            for n2 in c * ROW_CHUNK..end {
                body(&mut state, n2);
            }
            state
        })
        .collect()
}

/// Fills `values` (row-major, `values[n2 * m + n1]`) with the grid samples of `terms`.
pub fn synthesize_terms(terms: &[Term], m: usize, values: &mut [C64]) {
    let synth = RowSynth::new(m);
    values.par_chunks_mut(m * ROW_CHUNK).enumerate().for_each(|(c, block)| {
        let mut s = synth.scratch();
        for (r, row) in block.chunks_mut(m).enumerate() {
            synth.row(terms, c * ROW_CHUNK + r, &mut s);
            row.copy_from_slice(&s.buf);
        }
    });
}

/// In-place 2D DFT of a row-major `m × m` array. `inverse` selects the sign
/// `+`; neither direction normalizes.
pub fn fft2(values: &mut [C64], m: usize, inverse: bool) {
    let synth = RowSynth::new(m);
    let pass = |data: &mut [C64]| {
        data.par_chunks_mut(m * ROW_CHUNK).for_each(|block| {
            let mut s = synth.scratch();
            for row in block.chunks_mut(m) {
                if inverse {
                    synth.inverse_inplace(row, &mut s);
                } else {
                    synth.forward_inplace(row, &mut s);
                }
            }
        });
    };
    pass(values);
    transpose(values, m);
    pass(values);
    transpose(values, m);
}

fn transpose(values: &mut [C64], m: usize) {
    const B: usize = 32;
    for bi in (0..m).step_by(B) {
        for bj in (bi..m).step_by(B) {
            for i in bi..(bi + B).min(m) {
                let start = if bi == bj { i + 1 } else { bj };
                for j in start..(bj + B).min(m) {
                    values.swap(i * m + j, j * m + i);
                }
            }
        }
    }
}

/// Dense coefficient box `[lo1, lo1 + n1) × [lo2, lo2 + n2)` of a
/// trigonometric polynomial; `data[i2 * n1 + i1]`.
#[derive(Clone, Debug)]
pub struct SpecBox {
    pub lo1: i64,
    pub lo2: i64,
    pub n1: usize,
    pub n2: usize,
    pub data: Vec<C64>,
}

impl SpecBox {
    pub fn zeros(lo1: i64, lo2: i64, n1: usize, n2: usize) -> Self {
        Self {
            lo1,
            lo2,
            n1,
            n2,
            data: vec![C64::new(0.0, 0.0); n1 * n2],
        }
    }

    pub fn empty() -> Self {
        Self::zeros(0, 0, 0, 0)
    }

    pub fn is_empty(&self) -> bool {
        self.n1 == 0 || self.n2 == 0
    }

    pub fn from_terms(terms: &[Term]) -> Self {
        if terms.is_empty() {
            return Self::empty();
        }
        let (mut a1, mut b1, mut a2, mut b2) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
        for &(u1, u2, _) in terms {
            a1 = a1.min(u1);
            b1 = b1.max(u1);
            a2 = a2.min(u2);
            b2 = b2.max(u2);
        }
        let mut out = Self::zeros(a1, a2, (b1 - a1 + 1) as usize, (b2 - a2 + 1) as usize);
        for &(u1, u2, c) in terms {
            *out.at_mut(u1, u2) += c;
        }
        out
    }

    pub fn at_mut(&mut self, u1: i64, u2: i64) -> &mut C64 {
        let i = (u2 - self.lo2) as usize * self.n1 + (u1 - self.lo1) as usize;
        &mut self.data[i]
    }

    pub fn get(&self, u1: i64, u2: i64) -> C64 {
        if u1 < self.lo1 || u2 < self.lo2 {
            return C64::new(0.0, 0.0);
        }
        let (i1, i2) = ((u1 - self.lo1) as usize, (u2 - self.lo2) as usize);
        if i1 >= self.n1 || i2 >= self.n2 {
            return C64::new(0.0, 0.0);
        }
        self.data[i2 * self.n1 + i1]
    }

    /// Nonzero terms in `(u1, u2)` order of storage.
    pub fn terms(&self) -> Vec<Term> {
        let mut out = Vec::new();
        for i2 in 0..self.n2 {
            for i1 in 0..self.n1 {
                let c = self.data[i2 * self.n1 + i1];
                if c.re != 0.0 || c.im != 0.0 {
                    out.push((self.lo1 + i1 as i64, self.lo2 + i2 as i64, c));
                }
            }
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, i64, C64)> + '_ {
        self.data.iter().enumerate().map(move |(i, &c)| {
            (self.lo1 + (i % self.n1) as i64, self.lo2 + (i / self.n1) as i64, c)
        })
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Coefficients of `conj(f)`: `ĝ(u) = conj(f̂(−u))`.
    pub fn conj_reflect(&self) -> Self {
        let mut out = Self::zeros(-(self.lo1 + self.n1 as i64 - 1), -(self.lo2 + self.n2 as i64 - 1), self.n1, self.n2);
        for i2 in 0..self.n2 {
            for i1 in 0..self.n1 {
                let c = self.data[i2 * self.n1 + i1];
                let j = (self.n2 - 1 - i2) * self.n1 + (self.n1 - 1 - i1);
                out.data[j] = c.conj();
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|c| *c *= s);
    }

    /// Sum of two boxes on the union bounding box.
    pub fn add(&self, other: &Self) -> Self {
        if self.is_empty() {
            return other.clone();
        }
        if other.is_empty() {
            return self.clone();
        }
        let lo1 = self.lo1.min(other.lo1);
        let lo2 = self.lo2.min(other.lo2);
        let hi1 = (self.lo1 + self.n1 as i64).max(other.lo1 + other.n1 as i64);
        let hi2 = (self.lo2 + self.n2 as i64).max(other.lo2 + other.n2 as i64);
        let mut out = Self::zeros(lo1, lo2, (hi1 - lo1) as usize, (hi2 - lo2) as usize);
        for src in [self, other] {
            for (u1, u2, c) in src.iter() {
                *out.at_mut(u1, u2) += c;
            }
        }
        out
    }

    /// Coefficients of the product of the two trigonometric polynomials.
    pub fn multiply(&self, other: &Self) -> Self {
        if self.is_empty() || other.is_empty() {
            return Self::empty();
        }
        let n1 = self.n1 + other.n1 - 1;
        let n2 = self.n2 + other.n2 - 1;
        if self.data.len().min(other.data.len()) <= 48 {
            return self.multiply_direct(other);
        }
        let (p1, p2) = (fft_size(n1), fft_size(n2));
        let mut planner = FftPlanner::new();
        let f1 = planner.plan_fft_forward(p1);
        let f2 = planner.plan_fft_forward(p2);
        let i1 = planner.plan_fft_inverse(p1);
        let i2 = planner.plan_fft_inverse(p2);
        let load = |b: &Self| {
            let mut a = vec![C64::new(0.0, 0.0); p1 * p2];
            for r in 0..b.n2 {
                a[r * p1..r * p1 + b.n1].copy_from_slice(&b.data[r * b.n1..(r + 1) * b.n1]);
            }
            transform2(&mut a, p1, p2, &*f1, &*f2);
            a
        };
        let mut a = load(self);
        let b = load(other);
        a.iter_mut().zip(&b).for_each(|(x, y)| *x *= y);
        transform2(&mut a, p1, p2, &*i1, &*i2);
        let norm = 1.0 / (p1 * p2) as f64;
        let mut out = Self::zeros(self.lo1 + other.lo1, self.lo2 + other.lo2, n1, n2);
        for r in 0..n2 {
            for c in 0..n1 {
                out.data[r * n1 + c] = a[r * p1 + c] * norm;
            }
        }
        out
    }

    fn multiply_direct(&self, other: &Self) -> Self {
        let n1 = self.n1 + other.n1 - 1;
        let n2 = self.n2 + other.n2 - 1;
        let mut out = Self::zeros(self.lo1 + other.lo1, self.lo2 + other.lo2, n1, n2);
        for (i, &a) in self.data.iter().enumerate() {
            if a.re == 0.0 && a.im == 0.0 {
                continue;
            }
            let (ai1, ai2) = (i % self.n1, i / self.n1);
            for (j, &b) in other.data.iter().enumerate() {
                let (bj1, bj2) = (j % other.n1, j / other.n1);
                out.data[(ai2 + bj2) * n1 + ai1 + bj1] += a * b;
            }
        }
        out
    }

    /// Coefficients of `|f|²`.
    pub fn abs2(&self) -> Self {
        self.multiply(&self.conj_reflect())
    }

    /// Samples on the `p1 × p2` grid `x = (R n1/p1, R n2/p2)`, row-major in `n2`.
    pub fn sample(&self, p1: usize, p2: usize) -> Vec<C64> {
        let mut planner = FftPlanner::new();
        let i1 = planner.plan_fft_inverse(p1);
        let i2 = planner.plan_fft_inverse(p2);
        let mut a = vec![C64::new(0.0, 0.0); p1 * p2];
        for (u1, u2, c) in self.iter() {
            let r = u2.rem_euclid(p2 as i64) as usize;
            let col = u1.rem_euclid(p1 as i64) as usize;
            a[r * p1 + col] += c;
        }
        transform2(&mut a, p1, p2, &*i1, &*i2);
        a
    }
}

/// Smallest size ≥ n of the form 2^a 3^b.
pub fn fft_size(n: usize) -> usize {
    let mut best = n.next_power_of_two();
    let mut p3 = 1;
    while p3 <= best {
        let mut v = p3;
        while v < n {
            v *= 2;
        }
        best = best.min(v);
        p3 *= 3;
    }
    best
}

/// Separable 2D transform of a row-major `p1 × p2` array (rows of length `p1`).
pub fn transform2(a: &mut [C64], p1: usize, p2: usize, along1: &dyn Fft<f64>, along2: &dyn Fft<f64>) {
    for row in a.chunks_mut(p1) {
        along1.process(row);
    }
    let mut col = vec![C64::new(0.0, 0.0); p2];
    for c in 0..p1 {
        for r in 0..p2 {
            col[r] = a[r * p1 + c];
        }
        along2.process(&mut col);
        for r in 0..p2 {
            a[r * p1 + c] = col[r];
        }
    }
}

/// Evaluates `terms` at a single point `x` of the cell of period `r`.
pub fn eval_terms(terms: &[Term], r: f64, x: (f64, f64)) -> C64 {
    terms
        .iter()
        .map(|&(u1, u2, c)| c * C64::from_polar(1.0, TAU * (u1 as f64 * x.0 + u2 as f64 * x.1) / r))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_product_matches_pointwise_product() {
        let a = SpecBox::from_terms(&[(0, 0, C64::new(1.0, 0.5)), (3, -2, C64::new(-0.25, 2.0)), (1, 4, C64::new(0.0, 1.0))]);
        let b = SpecBox::from_terms(&[(-1, 1, C64::new(2.0, 0.0)), (2, 2, C64::new(0.5, -0.5))]);
        let p = a.multiply(&b);
        let x = (1.7, -3.2);
        let lhs = eval_terms(&p.terms(), 16.0, x);
        let rhs = eval_terms(&a.terms(), 16.0, x) * eval_terms(&b.terms(), 16.0, x);
        assert!((lhs - rhs).norm() < 1e-12);
        let q = a.abs2();
        let v = eval_terms(&q.terms(), 16.0, x);
        assert!((v.re - eval_terms(&a.terms(), 16.0, x).norm_sqr()).abs() < 1e-12 && v.im.abs() < 1e-12);
    }

    #[test]
    fn fft_path_matches_direct_product() {
        let terms: Vec<Term> = (0..60).map(|i| (i % 9 - 4, i / 9, C64::new((i as f64).sin(), (i as f64 * 0.3).cos()))).collect();
        let a = SpecBox::from_terms(&terms);
        let fast = a.multiply(&a.conj_reflect());
        let slow = a.multiply_direct(&a.conj_reflect());
        let err: f64 = fast.data.iter().zip(&slow.data).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        assert!(err < 1e-12, "err {err}");
    }

    #[test]
    fn row_synthesis_matches_direct_evaluation() {
        let terms = vec![(3, -1, C64::new(1.0, 0.0)), (-2, 5, C64::new(0.3, -0.7))];
        let m = 32;
        let mut values = vec![C64::new(0.0, 0.0); m * m];
        synthesize_terms(&terms, m, &mut values);
        for &(n1, n2) in &[(0usize, 0usize), (5, 7), (31, 30)] {
            let x = (n1 as f64 * 8.0 / m as f64, n2 as f64 * 8.0 / m as f64);
            let direct = eval_terms(&terms, 8.0, x);
            assert!((values[n2 * m + n1] - direct).norm() < 1e-12);
        }
    }

    #[test]
    fn fft2_round_trip() {
        let m = 16;
        let mut v: Vec<C64> = (0..m * m).map(|i| C64::new((i as f64).sqrt(), (i % 7) as f64)).collect();
        let orig = v.clone();
        fft2(&mut v, m, false);
        fft2(&mut v, m, true);
        for (a, b) in v.iter().zip(&orig) {
            assert!((a / (m * m) as f64 - b).norm() < 1e-12);
        }
    }

    #[test]
    fn fft_sizes_are_smooth() {
        assert_eq!(fft_size(5), 6);
        assert_eq!(fft_size(17), 18);
        assert_eq!(fft_size(64), 64);
        assert_eq!(fft_size(65), 72);
    }
}
