//! Comparison detectors without sidelobe discrimination.
//!
//! * Conventional: CA-CFAR on the full-frame periodogram, every candidate
//!   refined and reported.
//! * Single DL: CA-CFAR on the non-coherent average of the per-burst
//!   periodograms (no UL gaps inside a burst, hence no impulsive sidelobes),
//!   then a fine search on the full-frame periodogram confined to a window
//!   narrower than the sidelobe spacing.

use crate::cfar::{detect_candidates, Candidate, CfarConfig};
use crate::config::SensingConfig;
use crate::error::{Error, Result};
use crate::scene::CsiMatrix;
use crate::specest::{burst_average_power, focused_fourier_batch, PeakEstimate, RefineConfig};
use crate::tddclean::DetectionState;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    pub refine: RefineConfig,
    /// Candidates weaker than the strongest cell by more than this are dropped.
    pub dynamic_range_db: f64,
    /// Half-width in range bins of the single-DL confined fine search.
    pub confine_range: usize,
    /// Half-width in Doppler bins of the confined search; `None` means
    /// `floor(M' / (2 M_TDD))`, just under half the sidelobe spacing.
    pub confine_doppler: Option<usize>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            refine: RefineConfig::default(),
            dynamic_range_db: 150.0,
            confine_range: 2,
            confine_doppler: None,
        }
    }
}

impl BaselineConfig {
    pub fn confine_doppler_bins(&self, cfg: &SensingConfig) -> usize {
        self.confine_doppler
            .unwrap_or(cfg.doppler_bins() / (2 * cfg.tdd.period()))
    }

    fn floor(&self, peak: f64) -> f64 {
        peak * 10f64.powf(-self.dynamic_range_db / 10.0)
    }

    fn validate(&self) -> Result<()> {
        if !(self.dynamic_range_db > 0.0) {
            return Err(Error::Config("dynamic range must be positive".into()));
        }
        Ok(())
    }
}

/// CFAR window used on the burst average: the Doppler guard grows by
/// `round(M / M_DL)`, the factor by which a burst's Doppler main lobe is wider
/// than the full frame's. The training width stays put so the range and
/// Doppler arms keep equal weight in the mean.
pub fn single_dl_cfar(cfar: &CfarConfig, cfg: &SensingConfig) -> CfarConfig {
    let widen = (cfg.symbols() as f64 / cfg.tdd.dl_symbols as f64).round() as usize;
    CfarConfig {
        guard_doppler: cfar.guard_doppler * widen,
        ..*cfar
    }
}

fn max_power(p: &[f64]) -> f64 {
    p.iter().copied().fold(0.0, f64::max)
}

/// Conventional periodogram detection on `h`.
pub fn detect_conventional(
    h: &CsiMatrix,
    cfg: &SensingConfig,
    cfar: &CfarConfig,
    base: &BaselineConfig,
) -> Result<Vec<PeakEstimate>> {
    let state = DetectionState::with_rows(h.clone(), cfar.row_span(cfg, 0), cfg)?;
    detect_conventional_from(&state, cfg, cfar, base)
}

/// Conventional detection on a precomputed state; every CFAR candidate is
/// refined and reported, strongest first.
pub fn detect_conventional_from(
    state: &DetectionState,
    cfg: &SensingConfig,
    cfar: &CfarConfig,
    base: &BaselineConfig,
) -> Result<Vec<PeakEstimate>> {
    base.validate()?;
    let floor = base.floor(max_power(state.power.as_slice()));
    let bins: Vec<(usize, isize)> = detect_candidates(&state.power, cfar, cfg)?
        .into_iter()
        .filter(|c| c.power > floor)
        .map(|c| c.bin())
        .collect();
    focused_fourier_batch(&state.csi, &bins, cfg, &base.refine)
}

/// Single-DL detection on `h`.
pub fn detect_single_dl(
    h: &CsiMatrix,
    cfg: &SensingConfig,
    cfar: &CfarConfig,
    base: &BaselineConfig,
) -> Result<Vec<PeakEstimate>> {
    let rows = cfar.row_span(cfg, base.confine_range);
    let state = DetectionState::with_rows(h.clone(), rows, cfg)?;
    detect_single_dl_from(&state, cfg, cfar, base)
}

/// Coarse CFAR candidates of the burst-averaged periodogram.
pub fn single_dl_candidates(
    h: &CsiMatrix,
    rows: std::ops::Range<usize>,
    cfg: &SensingConfig,
    cfar: &CfarConfig,
    base: &BaselineConfig,
) -> Result<Vec<Candidate>> {
    base.validate()?;
    let avg = burst_average_power(h, cfg, rows)?;
    let floor = base.floor(max_power(avg.as_slice()));
    let mut found = detect_candidates(&avg, &single_dl_cfar(cfar, cfg), cfg)?;
    found.retain(|c| c.power > floor);
    Ok(found)
}

/// Single-DL detection reusing the full-frame power of `state` for the
/// confined fine search. Coarse peaks that land on the same full-frame bin
/// are reported once.
pub fn detect_single_dl_from(
    state: &DetectionState,
    cfg: &SensingConfig,
    cfar: &CfarConfig,
    base: &BaselineConfig,
) -> Result<Vec<PeakEstimate>> {
    let coarse = single_dl_candidates(&state.csi, state.rows.clone(), cfg, cfar, base)?;
    let half_m = base.confine_doppler_bins(cfg) as isize;
    let mp = cfg.doppler_bins() as isize;
    let rows = state.rows.clone();
    let mut seen = Vec::new();
    for c in coarse {
        let n_lo = c
            .range_bin
            .saturating_sub(base.confine_range)
            .max(rows.start);
        let n_hi = (c.range_bin + base.confine_range + 1).min(rows.end);
        let mut best = None;
        let mut best_power = f64::NEG_INFINITY;
        for n in n_lo..n_hi {
            for dm in -half_m..=half_m {
                let m = (c.doppler_bin + dm + mp / 2).rem_euclid(mp) - mp / 2;
                let p = state.power[(n, cfg.column_of_doppler_bin(m))];
                if p > best_power {
                    best_power = p;
                    best = Some((n, m));
                }
            }
        }
        let Some(bin) = best else { continue };
        if seen.contains(&bin) {
            continue;
        }
        seen.push(bin);
    }
    focused_fourier_batch(&state.csi, &seen, cfg, &base.refine)
}
