//! Point spread function of the TDD-windowed range-Doppler periodogram.
//!
//! The real-valued forms ([`psf_doppler`], [`psf_rd`]) are the symmetric
//! Dirichlet products. The complex kernels additionally carry the linear
//! phase of a window that starts at subcarrier 0 and symbol 0, which is what
//! the DFT of a synthesized CSI matrix actually produces; stencils are built
//! from those so they can be subtracted from a periodogram bin for bin.

use std::f64::consts::PI;
use std::ops::Range;

use num_complex::Complex64;

use crate::config::SensingConfig;
use crate::grid::Grid;

/// Below this |sin(πx)| the kernel is evaluated by its Taylor series.
const SINGULARITY_EPS: f64 = 1e-9;

/// Dirichlet kernel `sin(Aπx) / (A sin(πx))`, continuous at integer `x`.
pub fn dirichlet(order: usize, x: f64) -> f64 {
    assert!(order >= 1, "Dirichlet kernel order must be >= 1");
    let a = order as f64;
    // D_A(k + e) = (-1)^(k(A-1)) D_A(e)
    let k = x.round();
    let e = x - k;
    let flip = (order - 1) % 2 == 1 && (k as i64).rem_euclid(2) == 1;
    let sign = if flip { -1.0 } else { 1.0 };
    let s = (PI * e).sin();
    let core = if s.abs() < SINGULARITY_EPS {
        1.0 - (a * a - 1.0) * (PI * e).powi(2) / 6.0
    } else {
        (a * PI * e).sin() / (a * s)
    };
    sign * core
}

/// `Σ_{i<A} exp(-j2π i x)` written as `exp(-jπ(A-1)x) A D_A(x)`.
fn geometric_kernel(order: usize, x: f64) -> Complex64 {
    // The sum is 1-periodic in x; reduce to keep the phase argument small.
    let x = x - x.round();
    let a = order as f64;
    Complex64::from_polar(a * dirichlet(order, x), -PI * (a - 1.0) * x)
}

/// Doppler PSF `M_DL D_{M_DL}(m/M') R D_R(M_TDD m/M')` at a fractional bin offset.
pub fn psf_doppler(m: f64, cfg: &SensingConfig) -> f64 {
    let tdd = cfg.tdd;
    let x = m / cfg.doppler_bins() as f64;
    tdd.dl_symbols as f64
        * dirichlet(tdd.dl_symbols, x)
        * tdd.repetitions as f64
        * dirichlet(tdd.repetitions, tdd.period() as f64 * x)
}

/// 2D PSF `W_D(m) N D_N(n/N')`.
pub fn psf_rd(n: f64, m: f64, cfg: &SensingConfig) -> f64 {
    let subcarriers = cfg.subcarriers();
    psf_doppler(m, cfg) * subcarriers as f64 * dirichlet(subcarriers, n / cfg.range_bins() as f64)
}

/// Complex range kernel: the inverse DFT over `N` subcarriers of a
/// unit-amplitude target, at `offset` range bins from its position.
pub fn range_kernel(offset: f64, cfg: &SensingConfig) -> Complex64 {
    // Inverse transform, so the phase runs the other way.
    geometric_kernel(cfg.subcarriers(), -offset / cfg.range_bins() as f64)
}

/// Complex Doppler kernel: the DFT of the TDD mask, at `offset` Doppler bins.
pub fn doppler_kernel(offset: f64, cfg: &SensingConfig) -> Complex64 {
    let tdd = cfg.tdd;
    let x = offset / cfg.doppler_bins() as f64;
    geometric_kernel(tdd.dl_symbols, x) * geometric_kernel(tdd.repetitions, tdd.period() as f64 * x)
}

/// Which part of the grid a stencil covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StencilExtent {
    /// Every bin of the periodogram.
    #[default]
    Full,
    /// `±range_half_width` range bins around the center (circular) and the
    /// full Doppler axis.
    RangeWindow { range_half_width: usize },
    /// A `±range_half_width × ±doppler_half_width` box around the center.
    Window {
        range_half_width: usize,
        doppler_half_width: usize,
    },
}

/// A shifted, scaled copy of the 2D PSF restricted to a set of grid bins.
///
/// The PSF is separable, so the stencil keeps one kernel per axis; the value
/// at (`range_bins[i]`, `doppler_columns[j]`) is
/// `coeff * range_values[i] * doppler_values[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Psf2dStencil {
    /// Fractional (range bin, signed Doppler bin) of the PSF center.
    pub center: (f64, f64),
    pub coeff: Complex64,
    pub range_bins: Vec<usize>,
    pub doppler_columns: Vec<usize>,
    pub range_values: Vec<Complex64>,
    pub doppler_values: Vec<Complex64>,
    /// Periodogram dimensions `(N', M')` the stencil was placed on.
    pub grid: (usize, usize),
}

impl Psf2dStencil {
    pub fn value(&self, i: usize, j: usize) -> Complex64 {
        self.coeff * self.range_values[i] * self.doppler_values[j]
    }

    /// Stencil value at periodogram bin (`n`, `col`); zero outside the extent.
    pub fn at(&self, n: usize, col: usize) -> Complex64 {
        match (
            window_index(&self.range_bins, n, self.grid.0),
            window_index(&self.doppler_columns, col, self.grid.1),
        ) {
            (Some(i), Some(j)) => self.value(i, j),
            _ => Complex64::new(0.0, 0.0),
        }
    }

    /// `c -= stencil` on the covered bins whose range bin lies in `rows`.
    pub fn subtract_from(&self, c: &mut Grid<Complex64>, rows: Range<usize>) {
        for (&n, &rv) in self.range_bins.iter().zip(&self.range_values) {
            if !rows.contains(&n) {
                continue;
            }
            let scaled = self.coeff * rv;
            let row = c.row_mut(n);
            for (&col, &dv) in self.doppler_columns.iter().zip(&self.doppler_values) {
                row[col] -= scaled * dv;
            }
        }
    }

    /// Dense `range_bins.len() × doppler_columns.len()` matrix, row-major.
    pub fn values(&self) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(self.range_bins.len() * self.doppler_columns.len());
        for &rv in &self.range_values {
            let scaled = self.coeff * rv;
            out.extend(self.doppler_values.iter().map(|&dv| scaled * dv));
        }
        out
    }
}

/// Position of `bin` in a circular run of consecutive bins.
fn window_index(bins: &[usize], bin: usize, len: usize) -> Option<usize> {
    let first = *bins.first()?;
    let i = (bin + len - first) % len;
    (i < bins.len()).then_some(i)
}

fn circular_window(center: f64, half_width: usize, len: usize) -> Vec<usize> {
    if 2 * half_width + 1 >= len {
        return (0..len).collect();
    }
    let c = center.round() as i64;
    (-(half_width as i64)..=half_width as i64)
        .map(|d| (c + d).rem_euclid(len as i64) as usize)
        .collect()
}

/// Shifts the 2D PSF to the fractional `center` (range bin, signed Doppler
/// bin) and scales it by `coeff`. Offsets are evaluated circularly on both
/// axes.
pub fn psf_stencil(
    center: (f64, f64),
    coeff: Complex64,
    extent: StencilExtent,
    cfg: &SensingConfig,
) -> Psf2dStencil {
    let (n_hat, m_hat) = center;
    let nr = cfg.range_bins();
    let md = cfg.doppler_bins();
    let center_column = m_hat + (md / 2) as f64;
    let (range_bins, doppler_columns) = match extent {
        StencilExtent::Full => ((0..nr).collect(), (0..md).collect()),
        StencilExtent::RangeWindow { range_half_width } => (
            circular_window(n_hat, range_half_width, nr),
            (0..md).collect(),
        ),
        StencilExtent::Window {
            range_half_width,
            doppler_half_width,
        } => (
            circular_window(n_hat, range_half_width, nr),
            circular_window(center_column, doppler_half_width, md),
        ),
    };
    let range_values = range_bins
        .iter()
        .map(|&n| range_kernel(n as f64 - n_hat, cfg))
        .collect();
    let doppler_values = doppler_columns
        .iter()
        .map(|&col| doppler_kernel(cfg.doppler_bin_of_column(col) as f64 - m_hat, cfg))
        .collect();
    Psf2dStencil {
        center,
        coeff,
        range_bins,
        doppler_columns,
        range_values,
        doppler_values,
        grid: (nr, md),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{GridConfig, RadioConfig, TddPattern};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn brute_dirichlet(order: usize, x: f64) -> f64 {
        let a = order as f64;
        (a * PI * x).sin() / (a * (PI * x).sin())
    }

    /// DFT of the mask zero-padded to M', evaluated at integer bin m.
    fn mask_dft(cfg: &SensingConfig, m: f64) -> Complex64 {
        let md = cfg.doppler_bins() as f64;
        cfg.downlink_symbols()
            .map(|l| Complex64::from_polar(1.0, -2.0 * PI * l as f64 * m / md))
            .sum()
    }

    #[test]
    fn dirichlet_at_zero_is_one() {
        for a in [1usize, 2, 7, 104, 1584] {
            assert_eq!(dirichlet(a, 0.0), 1.0);
        }
    }

    #[test]
    fn dirichlet_reference_first_sidelobe() {
        let v = dirichlet(104, 1.0 / 140.0);
        assert_relative_eq!(v, brute_dirichlet(104, 1.0 / 140.0), max_relative = 1e-12);
        assert!((v - 0.3097).abs() < 5e-5, "{v}");
    }

    #[test]
    fn dirichlet_zeros() {
        for a in [3usize, 8, 104] {
            for k in 1..a {
                assert!(dirichlet(a, k as f64 / a as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dirichlet_integer_limits() {
        assert_eq!(dirichlet(8, 1.0), -1.0);
        assert_eq!(dirichlet(8, 2.0), 1.0);
        assert_eq!(dirichlet(9, 1.0), 1.0);
        assert_eq!(dirichlet(104, -3.0), -1.0);
    }

    #[test]
    fn dirichlet_near_integer_is_continuous() {
        for a in [2usize, 8, 104] {
            let at = dirichlet(a, 1.0);
            let near = dirichlet(a, 1.0 + 1e-11);
            assert!((at - near).abs() < 1e-12);
        }
    }

    #[test]
    fn doppler_psf_peak() {
        let cfg = SensingConfig::reference();
        assert_eq!(psf_doppler(0.0, &cfg), 832.0);
        assert_eq!(psf_rd(0.0, 0.0, &cfg), 1584.0 * 832.0);
    }

    #[test]
    fn degenerate_tdd_is_plain_dirichlet() {
        let cfg = SensingConfig::with_default_grid(
            RadioConfig::new(27.4e9, 120e3, 64),
            TddPattern::new(140, 0, 1),
        )
        .unwrap();
        for m in [0.3, 1.0, 5.5, 14.63, 100.0] {
            let plain = 140.0 * dirichlet(140, m / cfg.doppler_bins() as f64);
            assert_relative_eq!(psf_doppler(m, &cfg), plain, max_relative = 1e-12);
        }
    }

    #[test]
    fn sidelobe_maxima_match_mask_dft() {
        // Unpadded Doppler axis so sidelobes fall on integer bins.
        let cfg = SensingConfig::reference()
            .regrid(GridConfig::new(4096, 1120))
            .unwrap();
        let md = cfg.doppler_bins() as i64;
        let spectrum: Vec<f64> = (-md / 2..md / 2)
            .map(|m| mask_dft(&cfg, m as f64).norm())
            .collect();
        let at = |m: i64| spectrum[(m + md / 2) as usize];
        // Local maxima beyond the mainlobe sit at multiples of M'/M_TDD = 8.
        let mut maxima = Vec::new();
        for m in (-md / 2 + 1)..(md / 2 - 1) {
            if m.abs() > 2 && at(m) > at(m - 1) && at(m) > at(m + 1) && at(m) > 1.0 {
                maxima.push(m);
            }
        }
        assert!(maxima.len() > 10);
        assert!(maxima.iter().all(|m| m % 8 == 0), "{maxima:?}");
        for k in 1..=4i64 {
            assert!(maxima.contains(&(8 * k)) && maxima.contains(&(-8 * k)));
        }
        for m in [-24.0, -8.0, 8.0, 16.0] {
            assert_relative_eq!(
                psf_doppler(m, &cfg).abs(),
                mask_dft(&cfg, m).norm(),
                max_relative = 1e-9
            );
        }
    }

    #[test]
    fn separable_product() {
        let cfg = SensingConfig::reference();
        for (n, m) in [(1.3, 2.7), (-4.0, 14.63), (100.25, -300.5)] {
            let lhs = psf_rd(n, m, &cfg);
            let rhs = psf_rd(n, 0.0, &cfg) * psf_rd(0.0, m, &cfg) / psf_rd(0.0, 0.0, &cfg);
            assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
        }
    }

    #[test]
    fn first_impulsive_sidelobe_value() {
        let cfg = SensingConfig::reference();
        let m = cfg.sidelobe_bin_spacing();
        let v = psf_rd(0.0, m, &cfg);
        let d = dirichlet(104, 1.0 / 140.0);
        // D_8(1) = -1.
        assert_relative_eq!(v, -1584.0 * 832.0 * d, max_relative = 1e-12);
        // Magnitude agrees with the direct DFT of a(0) b(0)^T diag(d).
        let dft_mag = 1584.0 * mask_dft(&cfg, m).norm();
        assert_relative_eq!(v.abs(), dft_mag, max_relative = 1e-9);
    }

    #[test]
    fn complex_kernels_match_real_magnitude() {
        let cfg = SensingConfig::reference();
        for (n, m) in [(0.5, 0.5), (3.0, 14.0), (-7.2, 29.3)] {
            let c = range_kernel(n, &cfg) * doppler_kernel(m, &cfg);
            assert_relative_eq!(c.norm(), psf_rd(n, m, &cfg).abs(), max_relative = 1e-9);
        }
    }

    #[test]
    fn zero_coefficient_gives_zero_stencil() {
        let cfg = SensingConfig::reference();
        let s = psf_stencil(
            (10.2, -3.4),
            Complex64::new(0.0, 0.0),
            StencilExtent::Full,
            &cfg,
        );
        assert!(s.values().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn on_grid_center_value() {
        let cfg = SensingConfig::reference();
        let coeff = Complex64::new(0.3, -1.1);
        let s = psf_stencil(
            (20.0, 5.0),
            coeff,
            StencilExtent::Window {
                range_half_width: 2,
                doppler_half_width: 2,
            },
            &cfg,
        );
        assert_eq!(s.range_bins[2], 20);
        assert_eq!(cfg.doppler_bin_of_column(s.doppler_columns[2]), 5);
        let v = s.value(2, 2);
        assert_relative_eq!((v - coeff * 1584.0 * 832.0).norm(), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn stencil_windows_wrap() {
        let cfg = SensingConfig::reference();
        let s = psf_stencil(
            (1.0, -1024.0),
            Complex64::new(1.0, 0.0),
            StencilExtent::Window {
                range_half_width: 3,
                doppler_half_width: 2,
            },
            &cfg,
        );
        assert_eq!(s.range_bins, vec![4094, 4095, 0, 1, 2, 3, 4]);
        assert_eq!(s.doppler_columns, vec![2046, 2047, 0, 1, 2]);
    }

    proptest! {
        #[test]
        fn antiperiodicity(order in 1usize..300, x in -3.0f64..3.0) {
            let lhs = dirichlet(order, x + 1.0);
            let sign = if order % 2 == 0 { -1.0 } else { 1.0 };
            prop_assert!((lhs - sign * dirichlet(order, x)).abs() < 1e-9);
        }

        #[test]
        fn doppler_magnitude_periodic(m in -1024.0f64..1024.0) {
            let cfg = SensingConfig::reference();
            let a = psf_doppler(m, &cfg).abs();
            let b = psf_doppler(m + cfg.doppler_bins() as f64, &cfg).abs();
            prop_assert!((a - b).abs() <= 1e-9 * 832.0);
        }

        #[test]
        fn dirichlet_bounded(order in 1usize..2000, x in -10.0f64..10.0) {
            prop_assert!(dirichlet(order, x).abs() <= 1.0 + 1e-12);
        }
    }
}
