//! 2D cell-averaging CFAR over the power periodogram.
//!
//! The training region is a cross: `guard + 1 ..= guard + train` cells on
//! both sides of the cell under test along each axis. The Doppler axis wraps,
//! the range axis does not (cells past either end are left out of the mean).

use crate::config::SensingConfig;
use crate::error::{Error, Result};
use crate::specest::PowerPeriodogram;

/// Physical region in which candidates may be reported. Training cells may
/// still lie outside it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchRegion {
    pub min_range: f64,
    pub max_range: f64,
    /// Largest |speed| in m/s.
    pub max_speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfarConfig {
    pub guard_range: usize,
    pub guard_doppler: usize,
    pub train_range: usize,
    pub train_doppler: usize,
    /// Design probability of false alarm.
    pub pfa: f64,
    /// Restricts reported cells; `None` searches the whole grid.
    pub region: Option<SearchRegion>,
}

impl Default for CfarConfig {
    fn default() -> Self {
        Self {
            guard_range: 2,
            guard_doppler: 2,
            train_range: 8,
            train_doppler: 8,
            pfa: 1e-6,
            region: None,
        }
    }
}

impl CfarConfig {
    pub fn with_region(mut self, region: SearchRegion) -> Self {
        self.region = Some(region);
        self
    }

    /// Range bins that detection reads: the reported rows plus the range
    /// training margin, widened by `extra` on both sides.
    pub fn row_span(&self, cfg: &SensingConfig, extra: usize) -> std::ops::Range<usize> {
        let np = cfg.range_bins();
        let (rows, _) = region_bounds(self.region.as_ref(), cfg, np, cfg.doppler_bins());
        if self.region.is_none() {
            return rows;
        }
        let margin = self.guard_range + self.train_range + extra;
        rows.start.saturating_sub(margin)..(rows.end + margin).min(np)
    }

    /// Training cells in the full (unclipped) cross.
    pub fn training_cells(&self) -> usize {
        2 * (self.train_range + self.train_doppler)
    }

    fn validate(&self) -> Result<()> {
        if self.training_cells() == 0 {
            return Err(Error::Config(
                "CFAR needs at least one training cell".into(),
            ));
        }
        if !(self.pfa > 0.0 && self.pfa <= 1.0) {
            return Err(Error::Config(
                "CFAR false-alarm probability must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// CA-CFAR scaling `N_t (P_FA^{-1/N_t} - 1)` for exponentially distributed cells.
pub fn threshold_factor(training_cells: usize, pfa: f64) -> f64 {
    let nt = training_cells as f64;
    nt * (pfa.powf(-1.0 / nt) - 1.0)
}

/// A threshold crossing that is also a local maximum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub range_bin: usize,
    /// Signed Doppler bin.
    pub doppler_bin: isize,
    pub power: f64,
    pub range: f64,
    pub speed: f64,
}

impl Candidate {
    pub fn bin(&self) -> (usize, isize) {
        (self.range_bin, self.doppler_bin)
    }

    pub fn position(&self) -> (f64, f64) {
        (self.range, self.speed)
    }
}

/// Descending power, then ascending range bin, then ascending Doppler bin.
pub fn sort_candidates(candidates: &mut [Candidate]) {
    candidates.sort_by(|a, b| {
        b.power
            .total_cmp(&a.power)
            .then(a.range_bin.cmp(&b.range_bin))
            .then(a.doppler_bin.cmp(&b.doppler_bin))
    });
}

/// Greater in the (power, then earlier position) total order.
fn beats(p: f64, pos: (usize, usize), q: f64, qpos: (usize, usize)) -> bool {
    p > q || (p == q && pos < qpos)
}

/// Runs CA-CFAR over `p` and returns local-maximum crossings, strongest first.
pub fn detect_candidates(
    p: &PowerPeriodogram,
    cfar: &CfarConfig,
    cfg: &SensingConfig,
) -> Result<Vec<Candidate>> {
    cfar.validate()?;
    let (np, mp) = p.dims();
    let window = (
        2 * (cfar.guard_range + cfar.train_range) + 1,
        2 * (cfar.guard_doppler + cfar.train_doppler) + 1,
    );
    if np < window.0 || mp < window.1 {
        return Err(Error::GridTooSmall {
            grid: (np, mp),
            window,
        });
    }

    let (rows, cols) = region_bounds(cfar.region.as_ref(), cfg, np, mp);
    let full_factor = threshold_factor(cfar.training_cells(), cfar.pfa);
    let mut out = Vec::new();
    for n in rows {
        for &col in &cols {
            let v = p[(n, col)];
            if v <= 0.0 || !is_local_max(p, n, col) {
                continue;
            }
            let (sum, count) = training_sum(p, n, col, cfar);
            let factor = if count == cfar.training_cells() {
                full_factor
            } else {
                threshold_factor(count, cfar.pfa)
            };
            if v > factor * (sum / count as f64) {
                let m = cfg.doppler_bin_of_column(col);
                out.push(Candidate {
                    range_bin: n,
                    doppler_bin: m,
                    power: v,
                    range: n as f64 * cfg.range_per_bin(),
                    speed: m as f64 * cfg.speed_per_bin(),
                });
            }
        }
    }
    sort_candidates(&mut out);
    Ok(out)
}

fn region_bounds(
    region: Option<&SearchRegion>,
    cfg: &SensingConfig,
    np: usize,
    mp: usize,
) -> (std::ops::Range<usize>, Vec<usize>) {
    match region {
        None => (0..np, (0..mp).collect()),
        Some(r) => {
            let lo = (r.min_range / cfg.range_per_bin()).ceil().max(0.0) as usize;
            let hi = ((r.max_range / cfg.range_per_bin()).floor() as usize + 1).min(np);
            let half = (r.max_speed / cfg.speed_per_bin()).floor() as isize;
            let half = half.min((mp / 2) as isize - 1);
            let cols = (-half..=half)
                .map(|m| cfg.column_of_doppler_bin(m))
                .collect();
            (lo.min(hi)..hi, cols)
        }
    }
}

fn is_local_max(p: &PowerPeriodogram, n: usize, col: usize) -> bool {
    let (np, mp) = p.dims();
    let v = p[(n, col)];
    for dn in -1i64..=1 {
        let nn = n as i64 + dn;
        if nn < 0 || nn >= np as i64 {
            continue;
        }
        for dc in -1i64..=1 {
            if dn == 0 && dc == 0 {
                continue;
            }
            let cc = (col as i64 + dc).rem_euclid(mp as i64) as usize;
            let q = p[(nn as usize, cc)];
            if !beats(v, (n, col), q, (nn as usize, cc)) {
                return false;
            }
        }
    }
    true
}

fn training_sum(p: &PowerPeriodogram, n: usize, col: usize, cfar: &CfarConfig) -> (f64, usize) {
    let (np, mp) = p.dims();
    let mut sum = 0.0;
    let mut count = 0;
    for d in cfar.guard_range + 1..=cfar.guard_range + cfar.train_range {
        if n >= d {
            sum += p[(n - d, col)];
            count += 1;
        }
        if n + d < np {
            sum += p[(n + d, col)];
            count += 1;
        }
    }
    for d in cfar.guard_doppler + 1..=cfar.guard_doppler + cfar.train_doppler {
        sum += p[(n, (col + d) % mp)];
        sum += p[(n, (col + mp - d % mp) % mp)];
        count += 2;
    }
    (sum, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{GridConfig, RadioConfig, TddPattern};
    use crate::grid::Grid;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Exp1;

    fn cfg(np: usize, mp: usize) -> SensingConfig {
        SensingConfig::new(
            RadioConfig::new(27.4e9, 120e3, np / 2),
            TddPattern::new(4, 0, mp / 8),
            GridConfig::new(np, mp),
        )
        .unwrap()
    }

    fn exp_grid(np: usize, mp: usize, seed: u64) -> PowerPeriodogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..np * mp).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        PowerPeriodogram::from_grid(Grid::from_vec(np, mp, data))
    }

    #[test]
    fn threshold_factor_values() {
        assert_relative_eq!(
            threshold_factor(16, 1e-6),
            16.0 * (1e6f64.powf(1.0 / 16.0) - 1.0),
            max_relative = 1e-12
        );
        assert!((threshold_factor(16, 1e-6) - 21.94).abs() < 0.005);
        assert!((threshold_factor(1_000_000, 1e-6) - 13.8155).abs() < 1e-3);
        assert_eq!(threshold_factor(7, 1.0), 0.0);
    }

    #[test]
    fn zero_grid_has_no_candidates() {
        let c = cfg(64, 64);
        let p = PowerPeriodogram::from_grid(Grid::filled(64, 64, 0.0));
        assert!(detect_candidates(&p, &CfarConfig::default(), &c)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn grid_too_small() {
        let c = cfg(16, 64);
        let p = PowerPeriodogram::from_grid(Grid::filled(16, 64, 1.0));
        assert!(matches!(
            detect_candidates(&p, &CfarConfig::default(), &c),
            Err(Error::GridTooSmall { .. })
        ));
    }

    #[test]
    fn isolated_spike_detected() {
        let c = cfg(64, 64);
        let mut p = exp_grid(64, 64, 1);
        p[(30, 10)] = 1e4;
        let found = detect_candidates(&p, &CfarConfig::default(), &c).unwrap();
        assert_eq!(found[0].bin(), (30, c.doppler_bin_of_column(10)));
    }

    #[test]
    fn false_alarm_rate_on_exponential_noise() {
        // Oracle: Monte-Carlo count over independent exponential grids; with
        // i.i.d. cells the design P_FA holds exactly, local-max gating only
        // removes crossings adjacent to larger ones.
        let c = cfg(256, 256);
        let pfa = 1e-3;
        let cfar = CfarConfig {
            pfa,
            ..CfarConfig::default()
        };
        let trials = 100;
        let mut total = 0usize;
        for seed in 0..trials {
            total += detect_candidates(&exp_grid(256, 256, seed), &cfar, &c)
                .unwrap()
                .len();
        }
        let expected = pfa * (256 * 256 * trials as usize) as f64;
        let ratio = total as f64 / expected;
        assert!(ratio > 1.0 / 3.0 && ratio < 3.0, "{total} vs {expected}");
    }

    #[test]
    fn region_limits_candidates() {
        let c = cfg(64, 64);
        let mut p = exp_grid(64, 64, 2);
        p[(40, 32)] = 1e4;
        p[(20, 32)] = 1e4;
        let limit = 30.0 * c.range_per_bin();
        let cfar = CfarConfig::default().with_region(SearchRegion {
            min_range: 0.0,
            max_range: limit,
            max_speed: 1e9,
        });
        let found = detect_candidates(&p, &cfar, &c).unwrap();
        assert!(found.iter().all(|f| f.range_bin <= 30));
        assert!(found.iter().any(|f| f.range_bin == 20));
    }

    #[test]
    fn sorted_by_power_then_position() {
        let mut v = vec![
            Candidate {
                range_bin: 3,
                doppler_bin: 1,
                power: 1.0,
                range: 0.0,
                speed: 0.0,
            },
            Candidate {
                range_bin: 1,
                doppler_bin: 5,
                power: 2.0,
                range: 0.0,
                speed: 0.0,
            },
            Candidate {
                range_bin: 1,
                doppler_bin: -2,
                power: 1.0,
                range: 0.0,
                speed: 0.0,
            },
            Candidate {
                range_bin: 0,
                doppler_bin: 9,
                power: 1.0,
                range: 0.0,
                speed: 0.0,
            },
        ];
        sort_candidates(&mut v);
        let bins: Vec<_> = v.iter().map(|c| c.bin()).collect();
        assert_eq!(bins, vec![(1, 5), (0, 9), (1, -2), (3, 1)]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn scale_invariance(seed in 0u64..1000, exp in -40i32..40) {
            let c = cfg(64, 64);
            let p = exp_grid(64, 64, seed);
            let cfar = CfarConfig { pfa: 1e-2, ..CfarConfig::default() };
            let scale = 2f64.powi(exp);
            let q = PowerPeriodogram::from_grid(p.map(|v| v * scale));
            let a: Vec<_> = detect_candidates(&p, &cfar, &c).unwrap().iter().map(|x| x.bin()).collect();
            let b: Vec<_> = detect_candidates(&q, &cfar, &c).unwrap().iter().map(|x| x.bin()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn candidates_are_local_maxima_above_threshold(seed in 0u64..1000) {
            let c = cfg(64, 64);
            let p = exp_grid(64, 64, seed);
            let cfar = CfarConfig { pfa: 1e-2, ..CfarConfig::default() };
            for cand in detect_candidates(&p, &cfar, &c).unwrap() {
                let col = c.column_of_doppler_bin(cand.doppler_bin);
                let n = cand.range_bin;
                for dn in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let nn = n as i64 + dn;
                        if (dn, dc) == (0, 0) || !(0..64).contains(&nn) { continue; }
                        let cc = (col as i64 + dc).rem_euclid(64) as usize;
                        prop_assert!(p[(nn as usize, cc)] < cand.power);
                    }
                }
                let (sum, count) = training_sum(&p, n, col, &cfar);
                prop_assert!(cand.power > threshold_factor(count, cfar.pfa) * sum / count as f64);
            }
        }
    }
}
