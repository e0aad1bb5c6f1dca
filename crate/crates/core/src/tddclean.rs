//! Iterative TDD peak detection: refine a candidate, remove it coherently,
//! and keep it only if the impulsive sidelobes it should own lose power.
//!
//! The detection state is `(H, C, P)`. A trial removal never touches the
//! committed state, so a failed check leaves it bit-identical.

use std::ops::Range;

use num_complex::Complex64;

use crate::cfar::{detect_candidates, Candidate, CfarConfig};
use crate::config::SensingConfig;
use crate::error::{Error, Result};
use crate::psf::{psf_stencil, Psf2dStencil, StencilExtent};
use crate::scene::CsiMatrix;
use crate::specest::{
    complex_periodogram_span_into, focused_fourier, power_periodogram_span_into,
    ComplexPeriodogram, PeakEstimate, PowerPeriodogram, RefineConfig, Taper,
};

/// Where a candidate's contribution is subtracted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RemovalMode {
    /// Subtract from `H`, then recompute the periodogram.
    Csi,
    /// Subtract the shifted 2D PSF from `C` (and the rank-one term from `H`).
    #[default]
    Psf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckConfig {
    pub removal: RemovalMode,
    /// Required sidelobe power reduction ratio, in `[0, 1)`.
    pub gamma: f64,
    /// Sidelobe orders `k = 1..=sidelobe_orders` examined per Doppler side;
    /// the strongest one on each side is checked.
    pub sidelobe_orders: usize,
    /// Ellipse semi-axis in range bins.
    pub ellipse_range: f64,
    /// Ellipse semi-axis in Doppler bins.
    pub ellipse_doppler: f64,
    pub stencil: StencilExtent,
    pub refine: RefineConfig,
    /// Candidates weaker than the initial periodogram maximum by more than
    /// this many dB are treated as numerical residue and ignored.
    pub dynamic_range_db: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            removal: RemovalMode::Psf,
            gamma: 0.0,
            sidelobe_orders: 2,
            ellipse_range: 3.0,
            ellipse_doppler: 3.0,
            stencil: StencilExtent::Full,
            refine: RefineConfig::default(),
            dynamic_range_db: 150.0,
        }
    }
}

impl CheckConfig {
    pub fn with_removal(mut self, removal: RemovalMode) -> Self {
        self.removal = removal;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma must lie in [0, 1)".into()));
        }
        if self.sidelobe_orders == 0 {
            return Err(Error::Config(
                "at least one sidelobe order is required".into(),
            ));
        }
        if !(self.ellipse_range >= 1.0 && self.ellipse_doppler >= 1.0) {
            return Err(Error::Config(
                "ellipse semi-axes must be at least one bin".into(),
            ));
        }
        if !(self.dynamic_range_db > 0.0) {
            return Err(Error::Config("dynamic range must be positive".into()));
        }
        Ok(())
    }

    /// Extra range rows around the search region that the check may read.
    pub fn row_margin(&self) -> usize {
        (self.ellipse_range + self.refine.max_offset()).ceil() as usize + 1
    }
}

/// Mean sidelobe power on one Doppler side before and after a removal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SideMeasurement {
    /// `+1` or `-1`.
    pub side: i8,
    /// Selected sidelobe order `k`.
    pub order: usize,
    /// Ellipse center as (fractional range bin, fractional signed Doppler bin).
    pub center: (f64, f64),
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SidelobeCheck {
    pub passed: bool,
    pub sides: Vec<SideMeasurement>,
}

/// Range-Doppler state carried between iterations.
#[derive(Debug, Clone)]
pub struct DetectionState {
    pub csi: CsiMatrix,
    pub periodogram: ComplexPeriodogram,
    pub power: PowerPeriodogram,
    /// Range bins that are computed; all other rows are zero.
    pub rows: Range<usize>,
}

impl DetectionState {
    /// Full-grid state.
    pub fn new(csi: CsiMatrix, cfg: &SensingConfig) -> Result<Self> {
        Self::with_rows(csi, 0..cfg.range_bins(), cfg)
    }

    /// State whose periodograms are computed only on `rows`.
    pub fn with_rows(csi: CsiMatrix, rows: Range<usize>, cfg: &SensingConfig) -> Result<Self> {
        let mut state = Self::unevaluated(csi, rows);
        state.recompute(cfg)?;
        Ok(state)
    }

    fn unevaluated(csi: CsiMatrix, rows: Range<usize>) -> Self {
        Self {
            csi,
            periodogram: ComplexPeriodogram::empty(),
            power: PowerPeriodogram::empty(),
            rows,
        }
    }

    /// State for detection under `cfar` and `check`: rows restricted to what
    /// the search region can reach.
    pub fn for_search(
        csi: CsiMatrix,
        cfar: &CfarConfig,
        check: &CheckConfig,
        cfg: &SensingConfig,
    ) -> Result<Self> {
        Self::with_rows(csi, cfar.row_span(cfg, check.row_margin()), cfg)
    }

    fn recompute(&mut self, cfg: &SensingConfig) -> Result<()> {
        complex_periodogram_span_into(
            &self.csi,
            cfg,
            &Taper::default(),
            self.rows.clone(),
            &mut self.periodogram,
        )?;
        power_periodogram_span_into(&self.periodogram, self.rows.clone(), &mut self.power);
        Ok(())
    }

    fn copy_from(&mut self, other: &Self) {
        self.csi.clone_from(&other.csi);
        self.rows = other.rows.clone();
    }
}

/// Why a candidate is not in the confirmed set.
#[derive(Debug, Clone, PartialEq)]
pub enum RejectionReason {
    /// Removing it did not reduce its sidelobes enough.
    SidelobeCheck(SidelobeCheck),
    /// It vanished from the candidate set once confirmed peak `by` was removed.
    Cleared { by: usize },
    /// Its refined position fell within the resolution limit of confirmed
    /// peak `to`.
    Unresolved { to: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub candidate: Candidate,
    /// Refined estimate; present for checked candidates.
    pub peak: Option<PeakEstimate>,
    pub reason: RejectionReason,
}

#[derive(Debug, Clone)]
pub struct DetectionReport {
    pub confirmed: Vec<PeakEstimate>,
    pub rejected: Vec<Rejection>,
    /// Number of candidates examined (refined and checked).
    pub iterations: usize,
    /// State after the last confirmed removal.
    pub state: DetectionState,
}

/// The `skip`-th strongest candidate that lies outside the resolution limit
/// of every confirmed peak (distance exactly 1 counts as inside).
pub fn select_candidate<'a>(
    candidates: &'a [Candidate],
    confirmed: &[PeakEstimate],
    skip: usize,
    cfg: &SensingConfig,
) -> Option<&'a Candidate> {
    candidates
        .iter()
        .filter(|c| is_eligible(c, confirmed, cfg))
        .nth(skip)
}

fn is_eligible(c: &Candidate, confirmed: &[PeakEstimate], cfg: &SensingConfig) -> bool {
    confirmed
        .iter()
        .all(|p| cfg.resolution_distance(c.position(), p.position()) > 1.0)
}

/// CSI-domain coefficient `α̂ = α̂' N'M' / (N M D_TDD)` of a refined peak.
fn csi_alpha(peak: &PeakEstimate, cfg: &SensingConfig) -> Complex64 {
    peak.csi_coefficient(cfg)
}

/// `H - α̂ a(r̂') b(v̂')^T diag(d)`, in place.
fn subtract_peak(h: &mut CsiMatrix, peak: &PeakEstimate, cfg: &SensingConfig) {
    h.add_rank_one(
        -csi_alpha(peak, cfg),
        peak.range,
        peak.speed,
        cfg.mask(),
        cfg,
    );
}

/// CSI Removal: `H'`, then `C'` and `P'` recomputed from it.
pub fn csi_removal(
    h: &CsiMatrix,
    peak: &PeakEstimate,
    cfg: &SensingConfig,
) -> Result<(CsiMatrix, ComplexPeriodogram, PowerPeriodogram)> {
    let mut hp = h.clone();
    subtract_peak(&mut hp, peak, cfg);
    let state = DetectionState::new(hp, cfg)?;
    Ok((state.csi, state.periodogram, state.power))
}

/// Stencil of a refined peak, scaled so its center value is `α̂'`.
pub fn peak_stencil(
    peak: &PeakEstimate,
    extent: StencilExtent,
    cfg: &SensingConfig,
) -> Psf2dStencil {
    let gain = cfg.subcarriers() as f64 * (cfg.tdd.dl_symbols * cfg.tdd.repetitions) as f64;
    psf_stencil(
        (peak.range_bin, peak.doppler_bin),
        peak.coeff / gain,
        extent,
        cfg,
    )
}

/// PSF Removal: `C' = C - α̂' W_RD(n - n̂', m - m̂') / W_RD(0, 0)`, `P' = |C'|²`,
/// and `H'` as in CSI Removal.
pub fn psf_removal(
    c: &ComplexPeriodogram,
    h: &CsiMatrix,
    peak: &PeakEstimate,
    extent: StencilExtent,
    cfg: &SensingConfig,
) -> (CsiMatrix, ComplexPeriodogram, PowerPeriodogram) {
    let mut hp = h.clone();
    subtract_peak(&mut hp, peak, cfg);
    let mut cp = c.clone();
    peak_stencil(peak, extent, cfg).subtract_from(&mut cp, 0..c.rows());
    let pp = crate::specest::power_periodogram(&cp);
    (hp, cp, pp)
}

/// Integer bins inside the ellipse, as (range bin, column). Doppler wraps,
/// range is truncated.
fn ellipse_bins(
    center: (f64, f64),
    semi: (f64, f64),
    grid: (usize, usize),
) -> impl Iterator<Item = (usize, usize)> {
    let (nc, mc) = center;
    let (a, b) = semi;
    let (np, mp) = (grid.0 as i64, grid.1 as i64);
    let lo = (nc - a).ceil() as i64;
    let hi = (nc + a).floor() as i64;
    (lo.max(0)..=hi.min(np - 1)).flat_map(move |n| {
        let t = (n as f64 - nc) / a;
        let w = b * (1.0 - t * t).max(0.0).sqrt();
        let (m0, m1) = ((mc - w).ceil() as i64, (mc + w).floor() as i64);
        (m0..=m1).map(move |m| (n as usize, (m + mp / 2).rem_euclid(mp) as usize))
    })
}

fn ellipse_mean(
    center: (f64, f64),
    semi: (f64, f64),
    grid: (usize, usize),
    power: impl Fn(usize, usize) -> f64,
) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for (n, col) in ellipse_bins(center, semi, grid) {
        sum += power(n, col);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Sidelobe power check with `after` given as a function of (range bin, column).
pub fn sidelobe_check_with(
    before: &PowerPeriodogram,
    after: impl Fn(usize, usize) -> f64,
    peak: &PeakEstimate,
    check: &CheckConfig,
    cfg: &SensingConfig,
) -> SidelobeCheck {
    let grid = before.dims();
    let semi = (check.ellipse_range, check.ellipse_doppler);
    let spacing = cfg.sidelobe_bin_spacing();
    let mut sides = Vec::with_capacity(2);
    for side in [-1i8, 1] {
        let mut best: Option<(usize, (f64, f64), f64)> = None;
        for k in 1..=check.sidelobe_orders {
            let center = (
                peak.range_bin,
                peak.doppler_bin + f64::from(side) * k as f64 * spacing,
            );
            let mean = ellipse_mean(center, semi, grid, |n, col| before[(n, col)]);
            if best.is_none_or(|b| mean > b.2) {
                best = Some((k, center, mean));
            }
        }
        let (order, center, mean) = best.expect("at least one sidelobe order");
        sides.push(SideMeasurement {
            side,
            order,
            center,
            before: mean,
            after: ellipse_mean(center, semi, grid, &after),
        });
    }
    let passed = sides
        .iter()
        .all(|s| s.after <= (1.0 - check.gamma) * s.before);
    SidelobeCheck { passed, sides }
}

/// Sidelobe power check between two power periodograms.
pub fn sidelobe_check(
    before: &PowerPeriodogram,
    after: &PowerPeriodogram,
    peak: &PeakEstimate,
    check: &CheckConfig,
    cfg: &SensingConfig,
) -> Result<SidelobeCheck> {
    if before.dims() != after.dims() {
        return Err(Error::DimensionMismatch {
            expected: before.dims(),
            got: after.dims(),
        });
    }
    Ok(sidelobe_check_with(
        before,
        |n, col| after[(n, col)],
        peak,
        check,
        cfg,
    ))
}

/// A trial removal that has been checked but not yet committed.
enum Trial {
    Psf(Psf2dStencil),
    /// The trial state lives in the spare buffer.
    Csi,
}

struct Detector<'a> {
    cfg: &'a SensingConfig,
    check: &'a CheckConfig,
    state: DetectionState,
    spare: Option<DetectionState>,
}

impl<'a> Detector<'a> {
    /// Refines the candidate, removes it on trial, and checks its sidelobes.
    fn try_candidate(
        &mut self,
        coarse: (usize, isize),
    ) -> Result<(PeakEstimate, SidelobeCheck, Trial)> {
        let peak = focused_fourier(&self.state.csi, coarse, self.cfg, &self.check.refine)?;
        match self.check.removal {
            RemovalMode::Psf => {
                let stencil = peak_stencil(&peak, self.check.stencil, self.cfg);
                let c = &self.state.periodogram;
                let result = sidelobe_check_with(
                    &self.state.power,
                    |n, col| (c[(n, col)] - stencil.at(n, col)).norm_sqr(),
                    &peak,
                    self.check,
                    self.cfg,
                );
                Ok((peak, result, Trial::Psf(stencil)))
            }
            RemovalMode::Csi => {
                let spare = self.spare.get_or_insert_with(|| {
                    DetectionState::unevaluated(self.state.csi.clone(), self.state.rows.clone())
                });
                spare.copy_from(&self.state);
                subtract_peak(&mut spare.csi, &peak, self.cfg);
                spare.recompute(self.cfg)?;
                let result =
                    sidelobe_check(&self.state.power, &spare.power, &peak, self.check, self.cfg)?;
                Ok((peak, result, Trial::Csi))
            }
        }
    }

    fn commit(&mut self, peak: &PeakEstimate, trial: Trial) {
        match trial {
            Trial::Psf(stencil) => {
                subtract_peak(&mut self.state.csi, peak, self.cfg);
                stencil.subtract_from(&mut self.state.periodogram, self.state.rows.clone());
                let rows = self.state.rows.clone();
                power_periodogram_span_into(&self.state.periodogram, rows, &mut self.state.power);
            }
            Trial::Csi => {
                let spare = self.spare.as_mut().expect("trial state present");
                std::mem::swap(&mut self.state, spare);
            }
        }
    }
}

fn candidates_above(
    state: &DetectionState,
    cfar: &CfarConfig,
    floor: f64,
    cfg: &SensingConfig,
) -> Result<Vec<Candidate>> {
    let mut found = detect_candidates(&state.power, cfar, cfg)?;
    found.retain(|c| c.power > floor);
    Ok(found)
}

/// Iterative TDD peak detection on `h`.
pub fn run_detection(
    h: &CsiMatrix,
    cfg: &SensingConfig,
    cfar: &CfarConfig,
    check: &CheckConfig,
) -> Result<DetectionReport> {
    let state = DetectionState::for_search(h.clone(), cfar, check, cfg)?;
    run_detection_from(state, cfg, cfar, check)
}

/// Iterative TDD peak detection starting from a precomputed state.
pub fn run_detection_from(
    state: DetectionState,
    cfg: &SensingConfig,
    cfar: &CfarConfig,
    check: &CheckConfig,
) -> Result<DetectionReport> {
    check.validate()?;
    let peak_power = state.power.as_slice().iter().copied().fold(0.0, f64::max);
    let floor = peak_power * 10f64.powf(-check.dynamic_range_db / 10.0);
    let mut candidates = candidates_above(&state, cfar, floor, cfg)?;

    let mut det = Detector {
        cfg,
        check,
        state,
        spare: None,
    };
    let mut confirmed: Vec<PeakEstimate> = Vec::new();
    let mut rejected = Vec::new();
    let mut iterations = 0;
    let mut skip = 0;
    while let Some(&cand) = select_candidate(&candidates, &confirmed, skip, cfg) {
        iterations += 1;
        let (peak, result, trial) = det.try_candidate(cand.bin())?;
        // Refinement can move a peak by up to a bin, so the coarse gating in
        // select_candidate does not settle separation on its own.
        let close = confirmed
            .iter()
            .position(|p| cfg.resolution_distance(peak.position(), p.position()) <= 1.0);
        if let (true, Some(to)) = (result.passed, close) {
            rejected.push(Rejection {
                candidate: cand,
                peak: Some(peak),
                reason: RejectionReason::Unresolved { to },
            });
            skip += 1;
        } else if result.passed {
            det.commit(&peak, trial);
            confirmed.push(peak);
            let updated = candidates_above(&det.state, cfar, floor, cfg)?;
            for old in &candidates {
                if old.bin() != cand.bin() && !updated.iter().any(|u| u.bin() == old.bin()) {
                    rejected.push(Rejection {
                        candidate: *old,
                        peak: None,
                        reason: RejectionReason::Cleared {
                            by: confirmed.len() - 1,
                        },
                    });
                }
            }
            candidates = updated;
            skip = 0;
        } else {
            rejected.push(Rejection {
                candidate: cand,
                peak: Some(peak),
                reason: RejectionReason::SidelobeCheck(result),
            });
            skip += 1;
        }
    }
    Ok(DetectionReport {
        confirmed,
        rejected,
        iterations,
        state: det.state,
    })
}

/// Refines candidate `coarse` against `state` and runs the sidelobe check
/// without committing anything.
pub fn check_candidate(
    state: &DetectionState,
    coarse: (usize, isize),
    check: &CheckConfig,
    cfg: &SensingConfig,
) -> Result<(PeakEstimate, SidelobeCheck)> {
    check.validate()?;
    let mut det = Detector {
        cfg,
        check,
        state: state.clone(),
        spare: None,
    };
    let (peak, result, _) = det.try_candidate(coarse)?;
    Ok((peak, result))
}

/// Power periodogram of `H + Ĥ_full diag(1 - d)`: the UL gaps are filled with
/// the confirmed peaks' contributions.
pub fn cleaned_periodogram(
    h: &CsiMatrix,
    confirmed: &[PeakEstimate],
    cfg: &SensingConfig,
) -> Result<PowerPeriodogram> {
    let gaps: Vec<bool> = cfg.mask().iter().map(|&on| !on).collect();
    let mut filled = h.clone();
    for peak in confirmed {
        filled.add_rank_one(csi_alpha(peak, cfg), peak.range, peak.speed, &gaps, cfg);
    }
    // The filled matrix is no longer zero on UL symbols, so bypass the mask.
    let c = crate::specest::complex_periodogram_of(&filled, cfg, &Taper::default())?;
    Ok(crate::specest::power_periodogram(&c))
}
