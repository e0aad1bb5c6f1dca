//! Monte-Carlo evaluation of the detectors and a constant-velocity Kalman
//! tracker over per-frame detections.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use crate::baselines::{detect_conventional_from, detect_single_dl_from, BaselineConfig};
use crate::cfar::{CfarConfig, SearchRegion};
use crate::config::SensingConfig;
use crate::error::{Error, Result};
use crate::scene::{
    free_space_gain, substream_rng, synthesize_csi_with_rng, NoiseSpec, SceneSpec, Target,
};
use crate::specest::PeakEstimate;
use crate::tddclean::{run_detection_from, CheckConfig, DetectionState, RemovalMode};

/// Detector under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    TddPsf,
    TddCsi,
    Conventional,
    SingleDl,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::TddPsf,
        Method::TddCsi,
        Method::Conventional,
        Method::SingleDl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::TddPsf => "tdd-psf",
            Method::TddCsi => "tdd-csi",
            Method::Conventional => "conventional",
            Method::SingleDl => "single-dl",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Detector settings shared by all methods.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DetectorSet {
    pub cfar: CfarConfig,
    pub check: CheckConfig,
    pub baseline: BaselineConfig,
}

impl DetectorSet {
    /// State computed once per CSI matrix and shared by every method.
    pub fn state(&self, h: crate::CsiMatrix, cfg: &SensingConfig) -> Result<DetectionState> {
        let margin = self.check.row_margin().max(self.baseline.confine_range);
        DetectionState::with_rows(h, self.cfar.row_span(cfg, margin), cfg)
    }

    /// Runs `method` on a state from [`DetectorSet::state`]. TDD methods
    /// consume a copy of the state.
    pub fn detect(
        &self,
        method: Method,
        state: &DetectionState,
        cfg: &SensingConfig,
    ) -> Result<Vec<PeakEstimate>> {
        let tdd = |mode| {
            let check = self.check.with_removal(mode);
            run_detection_from(state.clone(), cfg, &self.cfar, &check).map(|r| r.confirmed)
        };
        match method {
            Method::TddPsf => tdd(RemovalMode::Psf),
            Method::TddCsi => tdd(RemovalMode::Csi),
            Method::Conventional => {
                detect_conventional_from(state, cfg, &self.cfar, &self.baseline)
            }
            Method::SingleDl => detect_single_dl_from(state, cfg, &self.cfar, &self.baseline),
        }
    }
}

/// Outcome of matching one trial's reports against the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: u64,
    pub method: Method,
    pub truth: Vec<Target>,
    pub reported: Vec<PeakEstimate>,
    /// `(reported index, truth index)` pairs.
    pub matches: Vec<(usize, usize)>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl TrialResult {
    pub fn f1(&self) -> f64 {
        f1_score(self.tp, self.fp, self.fn_)
    }
}

/// `2TP / (2TP + FP + FN)`; 1 when there is nothing to find and nothing reported.
pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        1.0
    } else {
        2.0 * tp as f64 / den as f64
    }
}

/// Greedy one-to-one matching: reported peaks in descending power each take
/// the nearest unmatched truth target within one resolution cell (distance 1
/// inclusive).
pub fn match_detections(
    truth: &[Target],
    reported: &[PeakEstimate],
    cfg: &SensingConfig,
) -> (Vec<(usize, usize)>, usize, usize, usize) {
    let mut order: Vec<usize> = (0..reported.len()).collect();
    order.sort_by(|&a, &b| {
        reported[b]
            .power_db
            .total_cmp(&reported[a].power_db)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; truth.len()];
    let mut matches = Vec::new();
    for i in order {
        let pos = reported[i].position();
        let nearest = truth
            .iter()
            .enumerate()
            .filter(|(j, _)| !taken[*j])
            .map(|(j, t)| (j, cfg.resolution_distance(pos, (t.range, t.speed))))
            .filter(|&(_, d)| d <= 1.0)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((j, _)) = nearest {
            taken[j] = true;
            matches.push((i, j));
        }
    }
    let tp = matches.len();
    (matches, tp, reported.len() - tp, truth.len() - tp)
}

/// Matches and packages one trial.
pub fn score_trial(
    trial: u64,
    method: Method,
    truth: &[Target],
    reported: Vec<PeakEstimate>,
    cfg: &SensingConfig,
) -> TrialResult {
    let (matches, tp, fp, fn_) = match_detections(truth, &reported, cfg);
    TrialResult {
        trial,
        method,
        truth: truth.to_vec(),
        reported,
        matches,
        tp,
        fp,
        fn_,
    }
}

/// Wilson score interval for `successes` out of `n` at normal quantile `z`.
/// `n` may be fractional (used for F1).
pub fn wilson_interval(successes: f64, n: f64, z: f64) -> (f64, f64) {
    if n <= 0.0 {
        return (0.0, 1.0);
    }
    let p = successes / n;
    let z2 = z * z;
    let den = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / den;
    let half = z / den * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

const Z95: f64 = 1.959_963_984_540_054;

/// Aggregate metrics of one (noise point, method, target count) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub noise_power: f64,
    /// `10 log10(g(50 m)² N M D_TDD / P_n)`.
    pub snr_db: f64,
    pub method: Method,
    pub targets: usize,
    pub trials: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub p_md: f64,
    /// Wilson 95% bounds.
    pub p_md_ci: (f64, f64),
    pub f1: f64,
    pub f1_ci: (f64, f64),
}

impl MetricsRow {
    /// Micro-averaged metrics over `results`, all of the same cell.
    pub fn aggregate(
        noise_power: f64,
        method: Method,
        targets: usize,
        results: &[TrialResult],
        cfg: &SensingConfig,
    ) -> Self {
        let tp: usize = results.iter().map(|r| r.tp).sum();
        let fp: usize = results.iter().map(|r| r.fp).sum();
        let fn_: usize = results.iter().map(|r| r.fn_).sum();
        let truth = (tp + fn_) as f64;
        // F1 = TP / (TP + (FP + FN) / 2), a proportion over a fractional count.
        let f1_n = tp as f64 + (fp + fn_) as f64 / 2.0;
        Self {
            noise_power,
            snr_db: reference_snr_db(noise_power, cfg),
            method,
            targets,
            trials: results.len(),
            tp,
            fp,
            fn_,
            p_md: if truth > 0.0 { fn_ as f64 / truth } else { 0.0 },
            p_md_ci: wilson_interval(fn_ as f64, truth, Z95),
            f1: f1_score(tp, fp, fn_),
            f1_ci: wilson_interval(tp as f64, f1_n, Z95),
        }
    }

    /// `(hi - lo) / 2` of the P_MD and F1 intervals.
    pub fn half_widths(&self) -> (f64, f64) {
        (
            (self.p_md_ci.1 - self.p_md_ci.0) / 2.0,
            (self.f1_ci.1 - self.f1_ci.0) / 2.0,
        )
    }
}

/// Reference SNR of a unit-amplitude target at 50 m after full coherent
/// integration.
pub fn reference_snr_db(noise_power: f64, cfg: &SensingConfig) -> f64 {
    let g = free_space_gain(50.0, cfg);
    let gain = cfg.subcarriers() as f64 * cfg.symbols() as f64 * cfg.duty_cycle();
    10.0 * (g * g * gain / noise_power).log10()
}

/// Noise power giving reference SNR `snr_db`.
pub fn noise_for_snr_db(snr_db: f64, cfg: &SensingConfig) -> f64 {
    let g = free_space_gain(50.0, cfg);
    let gain = cfg.subcarriers() as f64 * cfg.symbols() as f64 * cfg.duty_cycle();
    g * g * gain / 10f64.powf(snr_db / 10.0)
}

/// Monte-Carlo sweep description.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloPlan {
    pub noise_powers: Vec<f64>,
    pub target_counts: Vec<usize>,
    pub trials: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub scene: SceneSpec,
    pub detectors: DetectorSet,
}

impl MonteCarloPlan {
    /// Desk-scale defaults: 200 trials at 5 reference SNRs, 1 and 3 targets.
    pub fn desk_scale(cfg: &SensingConfig) -> Self {
        let scene = SceneSpec::default();
        Self {
            noise_powers: [-30.0, -25.0, -20.0, -15.0, -10.0]
                .iter()
                .map(|&s| noise_for_snr_db(s, cfg))
                .collect(),
            target_counts: vec![1, 3],
            trials: 200,
            methods: vec![Method::TddPsf, Method::Conventional, Method::SingleDl],
            seed: 0,
            scene,
            detectors: DetectorSet {
                cfar: CfarConfig::default().with_region(search_region_for(&scene)),
                ..DetectorSet::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config(
                "at least one trial per point is required".into(),
            ));
        }
        if self.methods.is_empty() || self.target_counts.is_empty() || self.noise_powers.is_empty()
        {
            return Err(Error::Config("empty Monte-Carlo sweep".into()));
        }
        if self.target_counts.contains(&0) {
            return Err(Error::Config("target counts must be at least 1".into()));
        }
        if self.noise_powers.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Config("noise powers must be non-negative".into()));
        }
        self.detectors.check.validate()
    }
}

/// Search region covering a scene distribution plus two sidelobe orders of
/// Doppler margin, so sidelobe false alarms stay observable.
pub fn search_region_for(scene: &SceneSpec) -> SearchRegion {
    SearchRegion {
        min_range: (scene.min_range - 5.0).max(0.0),
        max_range: scene.max_range + 5.0,
        max_speed: scene.max_speed + 10.0,
    }
}

/// RNG substream of one trial: disjoint for distinct `(point, count, trial)`.
pub fn trial_stream(point: usize, count: usize, trial: usize) -> u64 {
    ((point as u64) << 48) | ((count as u64) << 32) | trial as u64
}

/// Draws the scene of one trial and runs every method of `plan` on it.
pub fn run_trial(
    plan: &MonteCarloPlan,
    cfg: &SensingConfig,
    point: usize,
    count: usize,
    trial: usize,
) -> Result<Vec<TrialResult>> {
    let mut rng = substream_rng(plan.seed, trial_stream(point, count, trial));
    let truth = plan.scene.sample(count, cfg, &mut rng);
    let noise = NoiseSpec::new(plan.noise_powers[point]);
    let h = synthesize_csi_with_rng(&truth, noise, cfg, &mut rng)?;
    let state = plan.detectors.state(h, cfg)?;
    plan.methods
        .iter()
        .map(|&m| {
            let reported = plan.detectors.detect(m, &state, cfg)?;
            Ok(score_trial(trial as u64, m, &truth, reported, cfg))
        })
        .collect()
}

/// Runs the sweep. Rows are ordered by noise point, target count, then the
/// order of `plan.methods`; results do not depend on thread scheduling.
pub fn run_montecarlo(plan: &MonteCarloPlan, cfg: &SensingConfig) -> Result<Vec<MetricsRow>> {
    plan.validate()?;
    let mut rows = Vec::new();
    for (point, &noise_power) in plan.noise_powers.iter().enumerate() {
        for &count in &plan.target_counts {
            let per_trial: Vec<Vec<TrialResult>> = (0..plan.trials)
                .into_par_iter()
                .map(|t| run_trial(plan, cfg, point, count, t))
                .collect::<Result<_>>()?;
            for (i, &method) in plan.methods.iter().enumerate() {
                let results: Vec<TrialResult> = per_trial.iter().map(|r| r[i].clone()).collect();
                rows.push(MetricsRow::aggregate(
                    noise_power,
                    method,
                    count,
                    &results,
                    cfg,
                ));
            }
        }
    }
    Ok(rows)
}

pub const METRICS_HEADER: &str =
    "noise_power,snr_db,method,targets,trials,tp,fp,fn,p_md,p_md_lo,p_md_hi,f1,f1_lo,f1_hi";

/// Writes `rows` as CSV with 17 significant digits per float.
pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut w: W) -> io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{:.16e},{:.16e},{},{},{},{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.noise_power,
            r.snr_db,
            r.method,
            r.targets,
            r.trials,
            r.tp,
            r.fp,
            r.fn_,
            r.p_md,
            r.p_md_ci.0,
            r.p_md_ci.1,
            r.f1,
            r.f1_ci.0,
            r.f1_ci.1
        )?;
    }
    Ok(())
}

/// Constant-velocity Kalman filter settings. Defaults are plumbing choices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanConfig {
    pub frame_interval_s: f64,
    /// White-acceleration spectral density, as a standard deviation in m/s².
    pub accel_std: f64,
    pub range_std: f64,
    pub speed_std: f64,
    /// Mahalanobis gate in standard deviations.
    pub gate_sigma: f64,
    /// Consecutive misses a track survives.
    pub max_misses: usize,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            frame_interval_s: 0.1,
            accel_std: 1.0,
            range_std: 0.3,
            speed_std: 0.3,
            gate_sigma: 3.0,
            max_misses: 3,
        }
    }
}

impl KalmanConfig {
    fn transition(&self) -> Matrix2<f64> {
        Matrix2::new(1.0, self.frame_interval_s, 0.0, 1.0)
    }

    fn process_noise(&self) -> Matrix2<f64> {
        let t = self.frame_interval_s;
        let q = self.accel_std * self.accel_std;
        Matrix2::new(t.powi(4) / 4.0, t.powi(3) / 2.0, t.powi(3) / 2.0, t * t) * q
    }

    fn measurement_noise(&self) -> Matrix2<f64> {
        Matrix2::new(self.range_std.powi(2), 0.0, 0.0, self.speed_std.powi(2))
    }
}

/// Filter state `(r, v)` with covariance, as of frame `frame`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackState {
    pub x: Vector2<f64>,
    pub p: Matrix2<f64>,
    pub frame: usize,
}

/// One track at one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub frame: usize,
    pub track: usize,
    pub state: TrackState,
    /// Innovation of the associated measurement; `None` when coasting.
    pub innovation: Option<Vector2<f64>>,
}

struct Track {
    id: usize,
    state: TrackState,
    misses: usize,
}

/// Tracks per-frame `(range, speed)` measurements. Each live track is
/// predicted, then takes the nearest free measurement inside the gate; tracks
/// without one coast. Free measurements start new tracks.
pub fn track_frames(frames: &[Vec<(f64, f64)>], kf: &KalmanConfig) -> Vec<TrackPoint> {
    let (f, q, r) = (kf.transition(), kf.process_noise(), kf.measurement_noise());
    let mut tracks: Vec<Track> = Vec::new();
    let mut next_id = 0;
    let mut history = Vec::new();
    for (frame, meas) in frames.iter().enumerate() {
        let mut used = vec![false; meas.len()];
        for track in &mut tracks {
            let s = &mut track.state;
            s.x = f * s.x;
            s.p = f * s.p * f.transpose() + q;
            s.frame = frame;
            // H = I: both range and speed are measured.
            let cov = s.p + r;
            let inv = cov
                .try_inverse()
                .expect("innovation covariance is positive definite");
            let best = meas
                .iter()
                .enumerate()
                .filter(|(j, _)| !used[*j])
                .map(|(j, &(mr, mv))| {
                    let y = Vector2::new(mr, mv) - s.x;
                    (j, y, (y.transpose() * inv * y)[0])
                })
                .filter(|&(_, _, d2)| d2 <= kf.gate_sigma * kf.gate_sigma)
                .min_by(|a, b| a.2.total_cmp(&b.2));
            let innovation = if let Some((j, y, _)) = best {
                used[j] = true;
                let gain = s.p * inv;
                s.x += gain * y;
                s.p = (Matrix2::identity() - gain) * s.p;
                s.p = (s.p + s.p.transpose()) / 2.0;
                track.misses = 0;
                Some(y)
            } else {
                track.misses += 1;
                None
            };
            history.push(TrackPoint {
                frame,
                track: track.id,
                state: *s,
                innovation,
            });
        }
        tracks.retain(|t| t.misses <= kf.max_misses);
        for (j, &(mr, mv)) in meas.iter().enumerate() {
            if used[j] {
                continue;
            }
            let state = TrackState {
                x: Vector2::new(mr, mv),
                p: kf.measurement_noise(),
                frame,
            };
            history.push(TrackPoint {
                frame,
                track: next_id,
                state,
                innovation: None,
            });
            tracks.push(Track {
                id: next_id,
                state,
                misses: 0,
            });
            next_id += 1;
        }
    }
    history
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn peak(range: f64, speed: f64, power_db: f64) -> PeakEstimate {
        PeakEstimate {
            coarse_range_bin: 0,
            coarse_doppler_bin: 0,
            range_bin: 0.0,
            doppler_bin: 0.0,
            range,
            speed,
            coeff: Complex64::new(1.0, 0.0),
            power_db,
        }
    }

    fn target(range: f64, speed: f64) -> Target {
        Target::new(range, speed, Complex64::new(1.0, 0.0))
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("clean".parse::<Method>().is_err());
    }

    #[test]
    fn exact_report_is_a_true_positive() {
        let cfg = SensingConfig::reference();
        let (_, tp, fp, fn_) =
            match_detections(&[target(40.0, 1.0)], &[peak(40.0, 1.0, 0.0)], &cfg);
        assert_eq!((tp, fp, fn_), (1, 0, 0));
        assert_eq!(f1_score(tp, fp, fn_), 1.0);
    }

    #[test]
    fn diagonal_resolution_offset_is_unmatched() {
        let cfg = SensingConfig::reference();
        let (dr, dv) = (cfg.range_resolution(), cfg.speed_resolution());
        let (_, tp, fp, fn_) = match_detections(
            &[target(40.0, 1.0)],
            &[peak(40.0 + dr, 1.0 + dv, 0.0)],
            &cfg,
        );
        assert_eq!((tp, fp, fn_), (0, 1, 1));
    }

    #[test]
    fn target_plus_two_sidelobes_gives_half_f1() {
        let cfg = SensingConfig::reference();
        let reports = [
            peak(40.0, 1.0, -20.0),
            peak(40.0, 5.69, -30.0),
            peak(40.0, -3.69, -31.0),
        ];
        let (m, tp, fp, fn_) = match_detections(&[target(40.0, 1.0)], &reports, &cfg);
        assert_eq!(m, vec![(0, 0)]);
        assert_eq!((tp, fp, fn_), (1, 2, 0));
        assert_eq!(f1_score(tp, fp, fn_), 0.5);
    }

    #[test]
    fn strongest_report_claims_the_target_first() {
        let cfg = SensingConfig::reference();
        let dr = cfg.range_resolution();
        let reports = [
            peak(40.0 + 0.6 * dr, 1.0, -30.0),
            peak(40.0 + 0.1 * dr, 1.0, -10.0),
        ];
        let (m, ..) = match_detections(&[target(40.0, 1.0)], &reports, &cfg);
        assert_eq!(m, vec![(1, 0)]);
    }

    #[test]
    fn wilson_interval_reference_values() {
        // 8 of 10: (0.4902, 0.9433); all successes: upper bound 1.
        let (lo, hi) = wilson_interval(8.0, 10.0, Z95);
        assert!(
            (lo - 0.490_16).abs() < 1e-4 && (hi - 0.943_32).abs() < 1e-4,
            "{lo} {hi}"
        );
        let (lo, hi) = wilson_interval(200.0, 200.0, Z95);
        assert_eq!(hi, 1.0);
        assert!((lo - 200.0 / (200.0 + Z95 * Z95)).abs() < 1e-12);
    }

    #[test]
    fn snr_helpers_invert() {
        let cfg = SensingConfig::reference();
        for s in [-10.0, 0.0, 23.5] {
            assert!((reference_snr_db(noise_for_snr_db(s, &cfg), &cfg) - s).abs() < 1e-9);
        }
    }

    #[test]
    fn trial_streams_are_disjoint() {
        let mut seen = std::collections::HashSet::new();
        for p in 0..5 {
            for c in [1, 3] {
                for t in 0..200 {
                    assert!(seen.insert(trial_stream(p, c, t)));
                }
            }
        }
    }

    #[test]
    fn noiseless_constant_velocity_innovations_vanish() {
        let kf = KalmanConfig::default();
        let frames: Vec<Vec<(f64, f64)>> = (0..200)
            .map(|k| vec![(20.0 + 2.5 * kf.frame_interval_s * k as f64, 2.5)])
            .collect();
        let hist = track_frames(&frames, &kf);
        assert!(hist.iter().all(|p| p.track == 0));
        let last = hist.last().unwrap().innovation.unwrap();
        assert!(last.norm() < 1e-6, "{last}");
    }

    #[test]
    fn missed_frame_coasts_by_v_t() {
        let kf = KalmanConfig::default();
        let mut frames: Vec<Vec<(f64, f64)>> = (0..50)
            .map(|k| vec![(20.0 + 2.0 * kf.frame_interval_s * k as f64, 2.0)])
            .collect();
        frames[50 - 1].clear();
        let hist = track_frames(&frames, &kf);
        let before = hist[hist.len() - 2].state;
        let coast = hist[hist.len() - 1];
        assert!(coast.innovation.is_none());
        let advance = coast.state.x[0] - before.x[0];
        assert!((advance - before.x[1] * kf.frame_interval_s).abs() < 1e-12);
    }

    #[test]
    fn track_is_dropped_after_max_misses() {
        let kf = KalmanConfig::default();
        let mut frames = vec![vec![(20.0, 0.0)]];
        frames.extend(std::iter::repeat_n(Vec::new(), kf.max_misses + 2));
        let hist = track_frames(&frames, &kf);
        assert_eq!(hist.len(), 1 + kf.max_misses + 1);
    }
}
