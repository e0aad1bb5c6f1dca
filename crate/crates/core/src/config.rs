//! Radio, TDD and DFT-grid parameters plus the coordinate conversions
//! shared by every processing stage.
//!
//! Doppler bins are signed: `m` runs over `-M'/2 .. M'/2`. Grids store the
//! Doppler axis center-shifted, so column `i` holds bin `m = i - M'/2`.

use crate::error::{Error, Result};

/// Propagation speed in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Cyclic-prefix fraction of the 5G NR normal CP (144 of 2048 samples).
pub const NR_NORMAL_CP_FRACTION: f64 = 144.0 / 2048.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadioConfig {
    /// Carrier frequency in Hz.
    pub carrier_hz: f64,
    /// Subcarrier spacing in Hz.
    pub subcarrier_spacing_hz: f64,
    pub subcarriers: usize,
    /// OFDM symbol duration in seconds, cyclic prefix included.
    pub symbol_duration_s: f64,
}

impl RadioConfig {
    /// Symbol duration `1/Δf`, i.e. no cyclic prefix.
    pub fn new(carrier_hz: f64, subcarrier_spacing_hz: f64, subcarriers: usize) -> Self {
        Self {
            carrier_hz,
            subcarrier_spacing_hz,
            subcarriers,
            symbol_duration_s: 1.0 / subcarrier_spacing_hz,
        }
    }

    /// Stretches the symbol by a cyclic prefix of `fraction` times the useful part.
    pub fn with_cyclic_prefix(mut self, fraction: f64) -> Self {
        self.symbol_duration_s = (1.0 + fraction) / self.subcarrier_spacing_hz;
        self
    }

    pub fn bandwidth_hz(&self) -> f64 {
        self.subcarriers as f64 * self.subcarrier_spacing_hz
    }

    pub fn wavelength_m(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    fn validate(&self) -> Result<()> {
        if !(self.carrier_hz > 0.0) {
            return Err(Error::Config("carrier frequency must be positive".into()));
        }
        if !(self.subcarrier_spacing_hz > 0.0) {
            return Err(Error::Config("subcarrier spacing must be positive".into()));
        }
        if self.subcarriers == 0 {
            return Err(Error::Config("need at least one subcarrier".into()));
        }
        // Allow for rounding when T_0 was given as exactly 1/Δf.
        if !(self.symbol_duration_s * self.subcarrier_spacing_hz >= 1.0 - 1e-12) {
            return Err(Error::Config(
                "symbol duration shorter than 1/subcarrier spacing".into(),
            ));
        }
        Ok(())
    }
}

/// Parametric TDD pattern: `dl_symbols` downlink symbols followed by
/// `ul_symbols` uplink symbols, repeated `repetitions` times per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TddPattern {
    pub dl_symbols: usize,
    pub ul_symbols: usize,
    pub repetitions: usize,
}

impl TddPattern {
    pub fn new(dl_symbols: usize, ul_symbols: usize, repetitions: usize) -> Self {
        Self {
            dl_symbols,
            ul_symbols,
            repetitions,
        }
    }

    /// Symbols per pattern period.
    pub fn period(&self) -> usize {
        self.dl_symbols + self.ul_symbols
    }

    /// Symbols per frame.
    pub fn frame_symbols(&self) -> usize {
        self.repetitions * self.period()
    }

    pub fn duty_cycle(&self) -> f64 {
        self.dl_symbols as f64 / self.period() as f64
    }

    pub fn is_downlink(&self, symbol: usize) -> bool {
        symbol % self.period() < self.dl_symbols
    }

    fn validate(&self) -> Result<()> {
        if self.dl_symbols == 0 {
            return Err(Error::Config(
                "need at least one DL symbol per pattern".into(),
            ));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("need at least one pattern repetition".into()));
        }
        Ok(())
    }
}

/// DFT lengths after zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridConfig {
    /// Range DFT length `N'`.
    pub range_bins: usize,
    /// Doppler DFT length `M'`.
    pub doppler_bins: usize,
}

impl GridConfig {
    pub fn new(range_bins: usize, doppler_bins: usize) -> Self {
        Self {
            range_bins,
            doppler_bins,
        }
    }

    /// `N' = 2N` and `M' >= M`, both rounded up to a power of two.
    pub fn default_for(subcarriers: usize, symbols: usize) -> Self {
        Self {
            range_bins: (2 * subcarriers).next_power_of_two().max(2),
            doppler_bins: symbols.next_power_of_two().max(2),
        }
    }
}

/// Complete sensing configuration with derived constants.
#[derive(Debug, Clone, PartialEq)]
pub struct SensingConfig {
    pub radio: RadioConfig,
    pub tdd: TddPattern,
    pub grid: GridConfig,
    mask: Vec<bool>,
}

impl SensingConfig {
    pub fn new(radio: RadioConfig, tdd: TddPattern, grid: GridConfig) -> Result<Self> {
        radio.validate()?;
        tdd.validate()?;
        let symbols = tdd.frame_symbols();
        if grid.range_bins < radio.subcarriers || grid.range_bins % 2 != 0 {
            return Err(Error::Config(format!(
                "range DFT length {} must be even and >= {}",
                grid.range_bins, radio.subcarriers
            )));
        }
        if grid.doppler_bins < symbols || grid.doppler_bins % 2 != 0 {
            return Err(Error::Config(format!(
                "Doppler DFT length {} must be even and >= {}",
                grid.doppler_bins, symbols
            )));
        }
        Ok(Self {
            radio,
            tdd,
            grid,
            mask: make_mask(&tdd),
        })
    }

    /// Radio and TDD parameters with the default grid for them.
    pub fn with_default_grid(radio: RadioConfig, tdd: TddPattern) -> Result<Self> {
        let grid = GridConfig::default_for(radio.subcarriers, tdd.frame_symbols());
        Self::new(radio, tdd, grid)
    }

    /// 27.4 GHz carrier, 1584 subcarriers at 120 kHz, 8 x (104 DL + 36 UL), no CP.
    pub fn reference() -> Self {
        let radio = RadioConfig::new(27.4e9, 120e3, 1584);
        let tdd = TddPattern::new(104, 36, 8);
        Self::with_default_grid(radio, tdd).expect("built-in configuration is valid")
    }

    /// Same configuration with a different grid.
    pub fn regrid(&self, grid: GridConfig) -> Result<Self> {
        Self::new(self.radio, self.tdd, grid)
    }

    pub fn subcarriers(&self) -> usize {
        self.radio.subcarriers
    }

    pub fn symbols(&self) -> usize {
        self.tdd.frame_symbols()
    }

    pub fn range_bins(&self) -> usize {
        self.grid.range_bins
    }

    pub fn doppler_bins(&self) -> usize {
        self.grid.doppler_bins
    }

    /// DL/UL mask `d`, one entry per symbol.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Indices of DL symbols.
    pub fn downlink_symbols(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(l, &on)| on.then_some(l))
    }

    pub fn duty_cycle(&self) -> f64 {
        self.tdd.duty_cycle()
    }

    /// Pattern period `T_TDD` in seconds.
    pub fn tdd_period_s(&self) -> f64 {
        self.tdd.period() as f64 * self.radio.symbol_duration_s
    }

    /// Range resolution `c / 2B`.
    pub fn range_resolution(&self) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.radio.bandwidth_hz())
    }

    /// Speed resolution `c / (2 f_c M T_0)`.
    pub fn speed_resolution(&self) -> f64 {
        SPEED_OF_LIGHT
            / (2.0 * self.radio.carrier_hz * self.symbols() as f64 * self.radio.symbol_duration_s)
    }

    /// Doppler spacing of the impulsive sidelobes, `1 / T_TDD`, in Hz.
    pub fn sidelobe_doppler_spacing_hz(&self) -> f64 {
        1.0 / self.tdd_period_s()
    }

    /// Speed spacing of the impulsive sidelobes in m/s.
    pub fn sidelobe_speed_spacing(&self) -> f64 {
        self.sidelobe_doppler_spacing_hz() * SPEED_OF_LIGHT / (2.0 * self.radio.carrier_hz)
    }

    /// Impulsive-sidelobe spacing in Doppler bins, `M' / M_TDD`.
    pub fn sidelobe_bin_spacing(&self) -> f64 {
        self.doppler_bins() as f64 / self.tdd.period() as f64
    }

    /// Largest representable speed magnitude, `c / (4 f_c T_0)`.
    pub fn unambiguous_speed(&self) -> f64 {
        SPEED_OF_LIGHT / (4.0 * self.radio.carrier_hz * self.radio.symbol_duration_s)
    }

    /// Largest representable range, `c / (2 Δf)`.
    pub fn unambiguous_range(&self) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.radio.subcarrier_spacing_hz)
    }

    /// Meters per range bin.
    pub fn range_per_bin(&self) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.radio.subcarrier_spacing_hz * self.range_bins() as f64)
    }

    /// m/s per Doppler bin.
    pub fn speed_per_bin(&self) -> f64 {
        SPEED_OF_LIGHT
            / (2.0
                * self.radio.carrier_hz
                * self.radio.symbol_duration_s
                * self.doppler_bins() as f64)
    }

    /// Converts a (possibly fractional) bin pair to range in m and speed in m/s.
    pub fn bin_to_physical(&self, n: f64, m: f64) -> Result<(f64, f64)> {
        let half = self.doppler_bins() as f64 / 2.0;
        let in_domain = (0.0..self.range_bins() as f64).contains(&n) && (-half..half).contains(&m);
        if !in_domain {
            return Err(Error::BinOutOfDomain { n, m });
        }
        Ok((n * self.range_per_bin(), m * self.speed_per_bin()))
    }

    /// Inverse of [`bin_to_physical`](Self::bin_to_physical).
    pub fn physical_to_bin(&self, range: f64, speed: f64) -> Result<(f64, f64)> {
        let n = range / self.range_per_bin();
        let m = speed / self.speed_per_bin();
        let half = self.doppler_bins() as f64 / 2.0;
        if !((0.0..self.range_bins() as f64).contains(&n) && (-half..half).contains(&m)) {
            return Err(Error::TargetOutOfDomain { range, speed });
        }
        Ok((n, m))
    }

    /// Signed Doppler bin of a stored column.
    pub fn doppler_bin_of_column(&self, column: usize) -> isize {
        column as isize - (self.doppler_bins() / 2) as isize
    }

    /// Stored column of a signed Doppler bin, wrapped modulo `M'`.
    pub fn column_of_doppler_bin(&self, m: isize) -> usize {
        let mp = self.doppler_bins() as isize;
        (m + mp / 2).rem_euclid(mp) as usize
    }

    /// Euclidean distance in resolution cells between two (range, speed) points.
    pub fn resolution_distance(&self, a: (f64, f64), b: (f64, f64)) -> f64 {
        let dr = (a.0 - b.0) / self.range_resolution();
        let dv = (a.1 - b.1) / self.speed_resolution();
        dr.hypot(dv)
    }
}

impl Default for SensingConfig {
    fn default() -> Self {
        Self::reference()
    }
}

/// DL/UL mask: entry `m` is set iff `m mod M_TDD < M_DL`.
pub fn make_mask(tdd: &TddPattern) -> Vec<bool> {
    (0..tdd.frame_symbols())
        .map(|m| tdd.is_downlink(m))
        .collect()
}

/// Range and speed resolution `(Δr, Δv)`.
pub fn resolutions(cfg: &SensingConfig) -> (f64, f64) {
    (cfg.range_resolution(), cfg.speed_resolution())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn reference_mask() {
        let mask = make_mask(&TddPattern::new(104, 36, 8));
        assert_eq!(mask.len(), 1120);
        assert_eq!(mask.iter().filter(|&&d| d).count(), 832);
    }

    #[test]
    fn mask_without_uplink_is_all_ones() {
        let mask = make_mask(&TddPattern::new(12, 0, 1));
        assert_eq!(mask, vec![true; 12]);
    }

    #[test]
    fn small_mask_layout() {
        let mask = make_mask(&TddPattern::new(2, 1, 2));
        assert_eq!(mask, vec![true, true, false, true, true, false]);
    }

    #[test]
    fn mask_is_periodic() {
        let tdd = TddPattern::new(5, 3, 6);
        let mask = make_mask(&tdd);
        for m in 0..mask.len() - tdd.period() {
            assert_eq!(mask[m], mask[m + tdd.period()]);
        }
    }

    #[test]
    fn default_grid_is_power_of_two() {
        let cfg = SensingConfig::reference();
        assert_eq!(cfg.range_bins(), 4096);
        assert_eq!(cfg.doppler_bins(), 2048);
    }

    #[test]
    fn zero_bin_is_origin() {
        let cfg = SensingConfig::reference();
        assert_eq!(cfg.bin_to_physical(0.0, 0.0).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn half_resolution_per_bin_at_double_padding() {
        let base = SensingConfig::reference();
        let cfg = base.regrid(GridConfig::new(2 * 1584, 2048)).unwrap();
        let (r, _) = cfg.bin_to_physical(1.0, 0.0).unwrap();
        let expected = SPEED_OF_LIGHT / (2.0 * 120e3 * 3168.0);
        assert_relative_eq!(r, expected, max_relative = 1e-15);
        assert_relative_eq!(r, cfg.range_resolution() / 2.0, max_relative = 1e-12);
        assert!((r - 0.394).abs() < 5e-4);
    }

    #[test]
    fn one_sidelobe_spacing_at_unpadded_doppler() {
        let base = SensingConfig::reference();
        let cfg = base.regrid(GridConfig::new(4096, 1120)).unwrap();
        let (_, v) = cfg.bin_to_physical(0.0, 8.0).unwrap();
        let t_tdd = 140.0 / 120e3;
        let expected = SPEED_OF_LIGHT / (2.0 * 27.4e9 * t_tdd);
        assert_relative_eq!(v, expected, max_relative = 1e-12);
        assert!((v - 4.69).abs() < 0.005);
        assert_relative_eq!(v, cfg.sidelobe_speed_spacing(), max_relative = 1e-12);
    }

    #[test]
    fn resolutions_reference() {
        let cfg = SensingConfig::reference();
        let (dr, dv) = resolutions(&cfg);
        assert_relative_eq!(dr, SPEED_OF_LIGHT / (2.0 * 190.08e6), max_relative = 1e-12);
        assert!((dr - 0.789).abs() < 5e-4);
        assert_relative_eq!(
            dv,
            SPEED_OF_LIGHT / (2.0 * 27.4e9 * 1120.0 / 120e3),
            max_relative = 1e-12
        );
        assert!((dv - 0.586).abs() < 5e-4);
    }

    #[test]
    fn doubling_bandwidth_halves_range_resolution() {
        let cfg = SensingConfig::reference();
        let wide = SensingConfig::with_default_grid(RadioConfig::new(27.4e9, 240e3, 1584), cfg.tdd)
            .unwrap();
        assert_relative_eq!(
            wide.range_resolution(),
            cfg.range_resolution() / 2.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn sidelobes_sit_r_cells_apart() {
        let cfg = SensingConfig::reference();
        assert_relative_eq!(
            cfg.sidelobe_speed_spacing() / cfg.speed_resolution(),
            8.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn cyclic_prefix_profile() {
        let radio = RadioConfig::new(27.4e9, 120e3, 1584).with_cyclic_prefix(NR_NORMAL_CP_FRACTION);
        let cfg = SensingConfig::with_default_grid(radio, TddPattern::new(104, 36, 8)).unwrap();
        assert!((cfg.tdd_period_s() - 1.25e-3).abs() < 2e-6);
        assert!((cfg.sidelobe_speed_spacing() - 4.38).abs() < 0.01);
    }

    #[test]
    fn out_of_domain_bins_rejected() {
        let cfg = SensingConfig::reference();
        assert!(cfg.bin_to_physical(-0.5, 0.0).is_err());
        assert!(cfg.bin_to_physical(4096.0, 0.0).is_err());
        assert!(cfg.bin_to_physical(0.0, 1024.0).is_err());
        assert!(cfg.bin_to_physical(0.0, -1024.0).is_ok());
    }

    #[test]
    fn invalid_configs_rejected() {
        let radio = RadioConfig::new(27.4e9, 120e3, 1584);
        let tdd = TddPattern::new(104, 36, 8);
        assert!(SensingConfig::new(radio, tdd, GridConfig::new(1000, 2048)).is_err());
        assert!(SensingConfig::new(radio, tdd, GridConfig::new(4096, 1000)).is_err());
        assert!(SensingConfig::new(radio, tdd, GridConfig::new(4097, 2048)).is_err());
        assert!(SensingConfig::with_default_grid(radio, TddPattern::new(0, 36, 8)).is_err());
        assert!(SensingConfig::with_default_grid(RadioConfig::new(-1.0, 120e3, 4), tdd).is_err());
        let mut short = radio;
        short.symbol_duration_s = 0.5 / 120e3;
        assert!(SensingConfig::with_default_grid(short, tdd).is_err());
    }

    #[test]
    fn column_mapping_round_trips() {
        let cfg = SensingConfig::reference();
        for col in [0usize, 1, 1023, 1024, 2047] {
            assert_eq!(
                cfg.column_of_doppler_bin(cfg.doppler_bin_of_column(col)),
                col
            );
        }
        assert_eq!(cfg.column_of_doppler_bin(1024), 0);
    }

    proptest! {
        #[test]
        fn physical_round_trip(n in 0.0f64..4096.0, m in -1024.0f64..1024.0) {
            let cfg = SensingConfig::reference();
            let (r, v) = cfg.bin_to_physical(n, m).unwrap();
            let (n2, m2) = cfg.physical_to_bin(r, v).unwrap();
            prop_assert!((n2 - n).abs() <= 1e-12 * n.abs().max(1.0));
            prop_assert!((m2 - m).abs() <= 1e-12 * m.abs().max(1.0));
        }
    }
}
