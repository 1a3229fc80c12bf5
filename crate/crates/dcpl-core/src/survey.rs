//! Grid statistics of a profile gathered in one streamed pass per cap:
//! sup-norms at every level and sharp tile masses of the square functions.

use rayon::prelude::*;
use serde::Serialize;

use crate::geometry::{CapTree, PlateSpec};
use crate::synthesis::{stream_rows, sup_norm_terms, FrequencyProfile, GridSpec};

#[derive(Clone, Debug, Serialize)]
pub struct CapSurvey {
    /// `sup[k][i]` is the grid sup-norm of the cap component `(k, i)`; level 0 is `f`.
    pub sup: Vec<Vec<f64>>,
    /// `tile_mass[k][i][t] = Σ_{θ⊆τ} ∫_{U_t} |f_θ|²` (sharp restriction) for levels `k ≥ 1`.
    pub tile_mass: Option<Vec<Vec<Vec<f64>>>>,
}

impl CapSurvey {
    pub fn measure(profile: &FrequencyProfile, tree: &CapTree, grid: GridSpec, with_tiles: bool) -> Self {
        let n = tree.depth();
        let ladder = &tree.ladder;
        let plates: Vec<Vec<PlateSpec>> = (0..=n)
            .map(|k| {
                if k == 0 {
                    Vec::new()
                } else {
                    tree.level(k).iter().map(|c| PlateSpec::new(c, ladder).expect("level ≥ 1")).collect()
                }
            })
            .collect();
        let mut sup: Vec<Vec<f64>> = (0..=n).map(|k| vec![0.0; tree.level(k).len()]).collect();
        let mut tile_mass: Vec<Vec<Vec<f64>>> = (0..=n)
            .map(|k| plates[k].iter().map(|p| vec![0.0; p.tiles]).collect())
            .collect();
        let h = grid.spacing();
        let cell = grid.cell_area();
        for (ti, theta) in tree.thetas().iter().enumerate() {
            let terms = profile.cap_terms(&theta.interval);
            if terms.is_empty() {
                continue;
            }
            if !with_tiles {
                sup[n][ti] = sup_norm_terms(&terms, grid);
                continue;
            }
            let owners: Vec<&PlateSpec> = (1..=n).map(|k| &plates[k][tree.ancestor(ti, k)]).collect();
            let parts = stream_rows(
                &terms,
                grid,
                || (0.0f64, owners.iter().map(|p| vec![0.0; p.tiles]).collect::<Vec<_>>(), Vec::<f64>::new()),
                |(s, acc, prefix), n2, row| {
                    prefix.clear();
                    prefix.push(0.0);
                    let mut run = 0.0;
                    for v in row {
                        let a = v.norm_sqr();
                        *s = s.max(a);
                        run += a * cell;
                        prefix.push(run);
                    }
                    let x2 = n2 as f64 * h;
                    for (plate, out) in owners.iter().zip(acc.iter_mut()) {
                        row_tile_sums(plate, plate.row_shift(x2), h, prefix, out);
                    }
                },
            );
            let mut top = 0.0f64;
            let mut totals: Vec<Vec<f64>> = owners.iter().map(|p| vec![0.0; p.tiles]).collect();
            for (s, acc, _) in parts {
                top = top.max(s);
                for (t, a) in totals.iter_mut().zip(acc) {
                    t.iter_mut().zip(a).for_each(|(x, y)| *x += y);
                }
            }
            sup[n][ti] = top.sqrt();
            for (lvl, t) in (1..=n).zip(totals) {
                let dst = &mut tile_mass[lvl][tree.ancestor(ti, lvl)];
                dst.iter_mut().zip(t).for_each(|(x, y)| *x += y);
            }
        }
        for (k, level_sup) in sup.iter_mut().enumerate().take(n) {
            let caps = tree.level(k);
            let values: Vec<f64> = caps
                .par_iter()
                .map(|c| {
                    let terms = profile.cap_terms(&c.interval);
                    sup_norm_terms(&terms, grid)
                })
                .collect();
            *level_sup = values;
        }
        Self {
            sup,
            tile_mass: with_tiles.then_some(tile_mass),
        }
    }

    pub fn sup_total(&self) -> f64 {
        self.sup[0][0]
    }

    pub fn theta_max(&self) -> f64 {
        self.sup.last().map(|v| v.iter().cloned().fold(0.0, f64::max)).unwrap_or(0.0)
    }

    /// Number of caps at level `k` with sup-norm above `1e-14 ‖f‖_∞`.
    pub fn active_count(&self, k: usize) -> usize {
        let floor = 1e-14 * self.sup_total();
        self.sup[k].iter().filter(|&&s| s > floor && s > 0.0).count()
    }

    pub fn is_active(&self, k: usize, i: usize) -> bool {
        let s = self.sup[k][i];
        s > 0.0 && s > 1e-14 * self.sup_total()
    }

    /// Survey of `c · f`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            sup: self.sup.iter().map(|l| l.iter().map(|s| s * c.abs()).collect()).collect(),
            tile_mass: self
                .tile_mass
                .as_ref()
                .map(|m| m.iter().map(|l| l.iter().map(|t| t.iter().map(|v| v * c * c).collect()).collect()).collect()),
        }
    }
}

/// Adds the sums of `prefix` over each tile's run of row nodes into `out`.
pub(crate) fn row_tile_sums(plate: &PlateSpec, shift: f64, h: f64, prefix: &[f64], out: &mut [f64]) {
    let m = prefix.len() - 1;
    let k = plate.tiles as i64;
    let q_of = |n1: usize| ((n1 as f64 * h + shift) * k as f64 / plate.period + 0.5).floor() as i64;
    let mut start = 0usize;
    let mut q = q_of(0);
    while start < m {
        let target = q + 1;
        let guess = (((target as f64 - 0.5) * plate.period / k as f64 - shift) / h).ceil();
        let mut end = if guess.is_finite() { guess.max(start as f64 + 1.0).min(m as f64) as usize } else { m };
        while end > start + 1 && q_of(end - 1) >= target {
            end -= 1;
        }
        while end < m && q_of(end) < target {
            end += 1;
        }
        out[q.rem_euclid(k) as usize] += prefix[end] - prefix[start];
        start = end;
        q = target;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ScaleLadder;

    #[test]
    fn row_segments_match_pointwise_assignment() {
        let ladder = ScaleLadder::new(256).unwrap();
        let tree = CapTree::new(&ladder);
        let grid = GridSpec::new(256, 4).unwrap();
        let h = grid.spacing();
        for cap in [tree.cap(1, 0), tree.cap(2, 9), tree.cap(2, 16), tree.cap(2, 31)] {
            let plate = PlateSpec::new(cap, &ladder).unwrap();
            for &n2 in &[0usize, 3, 511, 512, 1000] {
                let x2 = n2 as f64 * h;
                let row: Vec<f64> = (0..grid.m).map(|i| 1.0 + (i % 7) as f64).collect();
                let mut prefix = vec![0.0];
                for v in &row {
                    let last = *prefix.last().unwrap();
                    prefix.push(last + v);
                }
                let mut fast = vec![0.0; plate.tiles];
                row_tile_sums(&plate, plate.row_shift(x2), h, &prefix, &mut fast);
                let mut slow = vec![0.0; plate.tiles];
                for (n1, v) in row.iter().enumerate() {
                    slow[plate.tile_of((n1 as f64 * h, x2))] += v;
                }
                assert_eq!(fast, slow);
            }
        }
    }
}
