//! Scale ladder, nested caps on the parabola, small-cap partitions and the
//! sheared plate tilings of the periodic cell.

use num_rational::Ratio;
use serde::Serialize;

use crate::error::{invalid, Result};

/// Exact rational endpoint of a cap interval.
pub type Rational = Ratio<i64>;

#[derive(Clone, Debug, Serialize)]
pub struct ScaleLadder {
    pub r: u64,
    pub n: usize,
    /// `scales[k]` is R_k for `k = 0..=n`; the last entry is R^{1/2}.
    pub scales: Vec<f64>,
    pub log_r: f64,
}

impl ScaleLadder {
    pub fn new(r: u64) -> Result<Self> {
        if r < 256 || !r.is_power_of_two() {
            return invalid(format!("R must be a power of two >= 256, got {r}"));
        }
        let log_r = r.trailing_zeros() as f64;
        let ratio = 0.5 * log_r / log_r.log2();
        let n = (ratio - 1e-12).ceil().max(1.0) as usize;
        let mut scales: Vec<f64> = (0..n).map(|k| log_r.powi(k as i32)).collect();
        scales.push((r as f64).sqrt());
        Ok(Self { r, n, scales, log_r })
    }

    pub fn r_f64(&self) -> f64 {
        self.r as f64
    }

    pub fn scale(&self, k: usize) -> f64 {
        self.scales[k]
    }

    pub fn root(&self) -> f64 {
        self.scales[self.n]
    }

    /// Number of plate tiles per cap at level `k` (⌈R_k⌉).
    pub fn tiles_per_cap(&self, k: usize) -> usize {
        (self.scales[k] - 1e-9).ceil() as usize
    }

    /// Number of caps at level `k`.
    pub fn caps_at_level(&self, k: usize) -> usize {
        if k == 0 {
            1
        } else {
            2 * self.tiles_per_cap(k)
        }
    }
}

pub fn build_scale_ladder(r: u64) -> Result<ScaleLadder> {
    ScaleLadder::new(r)
}

/// A closed or half-open interval `[a, b)` (closed when `closed_right`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Interval {
    pub a: Rational,
    pub b: Rational,
    pub closed_right: bool,
}

impl Interval {
    pub fn new(a: Rational, b: Rational, closed_right: bool) -> Self {
        Self { a, b, closed_right }
    }

    pub fn full() -> Self {
        Self::new(Rational::from_integer(-1), Rational::from_integer(1), true)
    }

    pub fn width(&self) -> f64 {
        to_f64(self.b - self.a)
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (to_f64(self.a) + to_f64(self.b))
    }

    /// Whether the column `j` (frequency `j / r`) lies in the interval.
    pub fn contains_column(&self, j: i64, r: u64) -> bool {
        let x = Rational::new(j, r as i64);
        x >= self.a && (x < self.b || (self.closed_right && x == self.b))
    }

    /// Inclusive range of lattice columns inside the interval, if any.
    pub fn column_range(&self, r: u64) -> Option<(i64, i64)> {
        let ri = r as i64;
        let lo = (self.a * ri).ceil().to_integer();
        let hb = self.b * ri;
        let hi = if self.closed_right || !hb.is_integer() {
            hb.floor().to_integer()
        } else {
            hb.to_integer() - 1
        };
        (lo <= hi).then_some((lo, hi))
    }

    pub fn distance(&self, other: &Interval) -> f64 {
        if other.a >= self.b {
            to_f64(other.a - self.b)
        } else if self.a >= other.b {
            to_f64(self.a - other.b)
        } else {
            0.0
        }
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        other.a >= self.a
            && (other.b < self.b || (other.b == self.b && (self.closed_right || !other.closed_right)))
    }
}

pub fn to_f64(q: Rational) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

#[derive(Clone, Debug, Serialize)]
pub struct Cap {
    pub level: usize,
    pub index: usize,
    pub interval: Interval,
    pub center: (f64, f64),
    pub tangent: (f64, f64),
    pub normal: (f64, f64),
    pub vertical_thickness: f64,
    pub parent: Option<usize>,
    /// Half-open index range of the children at level `level + 1`.
    pub children: (usize, usize),
}

impl Cap {
    fn new(level: usize, index: usize, interval: Interval, thickness: f64) -> Self {
        let c = interval.midpoint();
        let s = (1.0 + 4.0 * c * c).sqrt();
        Self {
            level,
            index,
            interval,
            center: (c, c * c),
            tangent: (1.0 / s, 2.0 * c / s),
            normal: (-2.0 * c / s, 1.0 / s),
            vertical_thickness: thickness,
            parent: None,
            children: (0, 0),
        }
    }

    /// Slope of the parabola at the cap center.
    pub fn slope(&self) -> f64 {
        2.0 * self.center.0
    }

    pub fn width(&self) -> f64 {
        self.interval.width()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CapTree {
    pub ladder: ScaleLadder,
    pub levels: Vec<Vec<Cap>>,
}

impl CapTree {
    pub fn new(ladder: &ScaleLadder) -> Self {
        let n = ladder.n;
        let r = ladder.r;
        let fine = ladder.caps_at_level(n) as i64;
        // Finest level: equal intervals with denominator `fine / 2`.
        let edge = |i: i64| Rational::new(2 * i - fine, fine);
        let mut bounds: Vec<Vec<i64>> = vec![Vec::new(); n + 1];
        bounds[n] = (0..=fine).collect();
        for k in (0..n).rev() {
            let below = &bounds[k + 1];
            let nb = below.len() as i64 - 1;
            let nk = ladder.caps_at_level(k) as i64;
            // Split the `nb` children into `nk` near-equal consecutive groups.
            let b: Vec<i64> = (0..=nk).map(|g| below[((g * nb) / nk) as usize]).collect();
            bounds[k] = b;
        }
        let mut levels: Vec<Vec<Cap>> = Vec::with_capacity(n + 1);
        for (k, b) in bounds.iter().enumerate() {
            let thickness = if k == n {
                1.0 / r as f64
            } else {
                ladder.scale(k).powi(-2)
            };
            let count = b.len() - 1;
            let caps = (0..count)
                .map(|i| {
                    let iv = Interval::new(edge(b[i]), edge(b[i + 1]), i + 1 == count);
                    Cap::new(k, i, iv, thickness)
                })
                .collect();
            levels.push(caps);
        }
        for k in 0..n {
            let (upper, lower) = levels.split_at_mut(k + 1);
            let parents = &mut upper[k];
            let kids = &mut lower[0];
            let mut start = 0;
            for (pi, p) in parents.iter_mut().enumerate() {
                let mut end = start;
                while end < kids.len() && p.interval.contains_interval(&kids[end].interval) {
                    kids[end].parent = Some(pi);
                    end += 1;
                }
                p.children = (start, end);
                start = end;
            }
        }
        Self {
            ladder: ladder.clone(),
            levels,
        }
    }

    pub fn depth(&self) -> usize {
        self.ladder.n
    }

    pub fn level(&self, k: usize) -> &[Cap] {
        &self.levels[k]
    }

    pub fn cap(&self, k: usize, i: usize) -> &Cap {
        &self.levels[k][i]
    }

    /// Canonical caps θ (the finest level).
    pub fn thetas(&self) -> &[Cap] {
        &self.levels[self.ladder.n]
    }

    /// Nominal width of the caps at level `k`.
    pub fn nominal_width(&self, k: usize) -> f64 {
        2.0 / self.levels[k].len() as f64
    }

    /// Index of the level-`k` ancestor of θ number `theta`.
    pub fn ancestor(&self, theta: usize, k: usize) -> usize {
        let mut idx = theta;
        for lvl in (k + 1..=self.ladder.n).rev() {
            idx = self.levels[lvl][idx].parent.expect("non-root cap has a parent");
        }
        idx
    }

    /// Range of θ indices below cap `(k, i)`.
    pub fn theta_range(&self, k: usize, i: usize) -> (usize, usize) {
        let (mut lo, mut hi) = (i, i + 1);
        for lvl in k..self.ladder.n {
            lo = self.levels[lvl][lo].children.0;
            hi = self.levels[lvl][hi - 1].children.1;
        }
        (lo, hi)
    }

    /// Level of caps and the cap index containing column `j`.
    pub fn cap_of_column(&self, k: usize, j: i64) -> Option<usize> {
        let r = self.ladder.r;
        let caps = &self.levels[k];
        let x = Rational::new(j, r as i64);
        let idx = caps.partition_point(|c| c.interval.b <= x && !(c.interval.closed_right && c.interval.b == x));
        (idx < caps.len() && caps[idx].interval.contains_column(j, r)).then_some(idx)
    }

    pub fn are_near(&self, a: &Cap, b: &Cap, kappa: f64) -> Result<bool> {
        if a.level != b.level {
            return invalid(format!("levels differ: {} vs {}", a.level, b.level));
        }
        let reach = kappa * self.ladder.log_r * self.nominal_width(a.level);
        Ok(a.interval.distance(&b.interval) <= reach + 1e-15)
    }

    /// Indices of the level-`k` caps near cap `i` (including itself).
    pub fn near_caps(&self, k: usize, i: usize, kappa: f64) -> Vec<usize> {
        let a = &self.levels[k][i];
        self.levels[k]
            .iter()
            .filter(|b| self.are_near(a, b, kappa).unwrap_or(false))
            .map(|b| b.index)
            .collect()
    }
}

pub fn build_cap_tree(ladder: &ScaleLadder) -> CapTree {
    CapTree::new(ladder)
}

pub fn are_near(tree: &CapTree, a: &Cap, b: &Cap, kappa: f64) -> Result<bool> {
    tree.are_near(a, b, kappa)
}

#[derive(Clone, Debug, Serialize)]
pub struct SmallCapPartition {
    pub beta: f64,
    pub caps: Vec<Interval>,
}

impl SmallCapPartition {
    /// Intervals of width `1/d` with `d = round(R^β)`.
    pub fn new(ladder: &ScaleLadder, beta: f64) -> Result<Self> {
        if !(0.5..=1.0).contains(&beta) || beta.is_nan() {
            return invalid(format!("beta must lie in [1/2, 1], got {beta}"));
        }
        let d = (ladder.r_f64().powf(beta)).round() as i64;
        let count = 2 * d;
        let caps = (0..count)
            .map(|i| Interval::new(Rational::new(i - d, d), Rational::new(i + 1 - d, d), i + 1 == count))
            .collect();
        Ok(Self { beta, caps })
    }

    pub fn len(&self) -> usize {
        self.caps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caps.is_empty()
    }
}

pub fn small_cap_partition(ladder: &ScaleLadder, beta: f64) -> Result<SmallCapPartition> {
    SmallCapPartition::new(ladder, beta)
}

/// Sheared plate tiling of the periodic cell attached to a cap.
///
/// Tile `i` is the set of points whose sheared coordinate
/// `s = x1 + slope * x2` (with `x2` reduced to `[-R/2, R/2)`) lies within
/// `R / (2K)` of `i R / K` modulo `R`. Its long edges are parallel to the cap
/// normal, and the `K` tiles cover the cell exactly once.
#[derive(Clone, Debug, Serialize)]
pub struct PlateSpec {
    pub level: usize,
    pub cap_index: usize,
    pub slope: f64,
    pub long_dim: f64,
    pub short_dim: f64,
    pub tiles: usize,
    pub period: f64,
    pub origin: (f64, f64),
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Tile {
    pub index: usize,
    pub center: (f64, f64),
    /// Corners in counter-clockwise order.
    pub corners: [(f64, f64); 4],
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DualBox {
    /// Edge along the cap tangent.
    pub long_edge: (f64, f64),
    /// Vertical edge.
    pub short_edge: (f64, f64),
}

impl DualBox {
    pub fn long_len(&self) -> f64 {
        self.long_edge.0.hypot(self.long_edge.1)
    }

    pub fn area(&self) -> f64 {
        (self.long_edge.0 * self.short_edge.1 - self.long_edge.1 * self.short_edge.0).abs()
    }
}

impl PlateSpec {
    pub fn new(cap: &Cap, ladder: &ScaleLadder) -> Result<Self> {
        if cap.level == 0 {
            return invalid("no plate tiling is attached to the level-0 cap");
        }
        let period = ladder.r_f64();
        let tiles = ladder.tiles_per_cap(cap.level);
        Ok(Self {
            level: cap.level,
            cap_index: cap.index,
            slope: cap.slope(),
            long_dim: period,
            short_dim: period / tiles as f64,
            tiles,
            period,
            origin: (0.0, 0.0),
        })
    }

    pub fn area(&self) -> f64 {
        self.long_dim * self.short_dim
    }

    pub fn center(&self, i: usize) -> (f64, f64) {
        (self.origin.0 + i as f64 * self.short_dim, self.origin.1)
    }

    pub fn tile(&self, i: usize) -> Tile {
        let (cx, cy) = self.center(i);
        let h = 0.5 * self.long_dim;
        let w = 0.5 * self.short_dim;
        let at = |s: f64, y: f64| (cx + s - self.slope * y, cy + y);
        Tile {
            index: i,
            center: (cx, cy),
            corners: [at(-w, -h), at(w, -h), at(w, h), at(-w, h)],
        }
    }

    /// All tiles meeting the periodic cell.
    pub fn iter_tiles(&self) -> impl Iterator<Item = Tile> + '_ {
        (0..self.tiles).map(move |i| self.tile(i))
    }

    /// Sheared offsets `(s, d2)` of `x` relative to tile `i`, both reduced to
    /// `[-R/2, R/2)` by minimal image.
    pub fn sheared_offset(&self, i: usize, x: (f64, f64)) -> (f64, f64) {
        let (cx, cy) = self.center(i);
        let d2 = wrap(x.1 - cy, self.period);
        let s = wrap(x.0 - cx + self.slope * d2, self.period);
        (s, d2)
    }

    /// Index of the tile containing `x`.
    pub fn tile_of(&self, x: (f64, f64)) -> usize {
        let shift = self.row_shift(x.1);
        self.tile_in_row(x.0, shift)
    }

    /// Sheared shift `slope · d2 − origin.0` of the row at height `x2`.
    pub fn row_shift(&self, x2: f64) -> f64 {
        self.slope * wrap(x2 - self.origin.1, self.period) - self.origin.0
    }

    /// Tile index of the point `(x1, ·)` in a row with the given shift.
    pub fn tile_in_row(&self, x1: f64, shift: f64) -> usize {
        let q = ((x1 + shift) * self.tiles as f64 / self.period + 0.5).floor() as i64;
        q.rem_euclid(self.tiles as i64) as usize
    }

    pub fn dual_box(&self) -> DualBox {
        let k = self.tiles as f64;
        DualBox {
            long_edge: (k / self.period, self.slope * k / self.period),
            short_edge: (0.0, 1.0 / self.period),
        }
    }
}

pub fn plate_tiling(cap: &Cap, ladder: &ScaleLadder) -> Result<PlateSpec> {
    PlateSpec::new(cap, ladder)
}

/// Reduce `x` to `[-p/2, p/2)`.
pub fn wrap(x: f64, p: f64) -> f64 {
    let y = (x + 0.5 * p).rem_euclid(p) - 0.5 * p;
    if y >= 0.5 * p {
        y - p
    } else {
        y
    }
}

#[derive(Serialize)]
struct LevelDump {
    level: usize,
    endpoints: Vec<(i64, i64)>,
    plate: Option<(f64, f64)>,
}

/// JSON description of the ladder, per-level endpoints and plate sizes.
pub fn geometry_json(tree: &CapTree) -> serde_json::Value {
    let ladder = &tree.ladder;
    let levels: Vec<LevelDump> = tree
        .levels
        .iter()
        .enumerate()
        .map(|(k, caps)| {
            let mut endpoints: Vec<(i64, i64)> = caps.iter().map(|c| (*c.interval.a.numer(), *c.interval.a.denom())).collect();
            if let Some(last) = caps.last() {
                endpoints.push((*last.interval.b.numer(), *last.interval.b.denom()));
            }
            let plate = (k > 0).then(|| (ladder.r_f64(), ladder.r_f64() / ladder.tiles_per_cap(k) as f64));
            LevelDump {
                level: k,
                endpoints,
                plate,
            }
        })
        .collect();
    serde_json::json!({
        "R": ladder.r,
        "N": ladder.n,
        "scales": &ladder.scales[..ladder.n],
        "RN": ladder.root(),
        "log_r": ladder.log_r,
        "levels": levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_examples() {
        let l = ScaleLadder::new(65536).unwrap();
        assert_eq!(l.n, 2);
        assert_eq!(&l.scales, &[1.0, 16.0, 256.0]);
        let l = ScaleLadder::new(256).unwrap();
        assert_eq!(&l.scales, &[1.0, 8.0, 16.0]);
        assert!(ScaleLadder::new(100).is_err());
        assert!(ScaleLadder::new(128).is_err());
    }

    #[test]
    fn column_ranges_respect_half_open_convention() {
        let iv = Interval::new(Rational::new(-1, 2), Rational::new(0, 1), false);
        assert_eq!(iv.column_range(256), Some((-128, -1)));
        let last = Interval::new(Rational::new(1, 2), Rational::new(1, 1), true);
        assert_eq!(last.column_range(256), Some((128, 256)));
        assert!(last.contains_column(256, 256));
        assert!(!iv.contains_column(0, 256));
    }

    #[test]
    fn wrap_is_minimal_image() {
        assert_eq!(wrap(0.0, 8.0), 0.0);
        assert_eq!(wrap(4.0, 8.0), -4.0);
        assert_eq!(wrap(-4.0, 8.0), -4.0);
        assert_eq!(wrap(7.0, 8.0), -1.0);
    }

    #[test]
    fn tile_lookup_matches_offsets() {
        let ladder = ScaleLadder::new(256).unwrap();
        let tree = CapTree::new(&ladder);
        let plate = PlateSpec::new(tree.cap(2, 5), &ladder).unwrap();
        for t in 0..plate.tiles {
            let c = plate.center(t);
            assert_eq!(plate.tile_of(c), t);
            let (s, d2) = plate.sheared_offset(t, c);
            assert_eq!((s, d2), (0.0, 0.0));
        }
    }
}
