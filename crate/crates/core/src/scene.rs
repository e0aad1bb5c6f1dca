//! Point-target scenes and TDD-masked CSI synthesis.

use std::f64::consts::PI;
use std::ops::{Deref, DerefMut};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{SensingConfig, SPEED_OF_LIGHT};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// A point reflector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    /// Range in m.
    pub range: f64,
    /// Radial speed in m/s; negative values are receding.
    pub speed: f64,
    /// Complex path coefficient.
    pub coeff: Complex64,
}

impl Target {
    pub fn new(range: f64, speed: f64, coeff: Complex64) -> Self {
        Self {
            range,
            speed,
            coeff,
        }
    }

    fn validate(&self, cfg: &SensingConfig) -> Result<()> {
        let ok = self.range >= 0.0
            && self.range < cfg.unambiguous_range()
            && self.speed.abs() < cfg.unambiguous_speed();
        if ok {
            Ok(())
        } else {
            Err(Error::TargetOutOfDomain {
                range: self.range,
                speed: self.speed,
            })
        }
    }
}

/// Additive white Gaussian noise, given as total power over the bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseSpec {
    pub total_power: f64,
}

impl NoiseSpec {
    pub fn new(total_power: f64) -> Self {
        assert!(total_power >= 0.0, "noise power must be non-negative");
        Self { total_power }
    }

    pub fn noiseless() -> Self {
        Self { total_power: 0.0 }
    }

    /// Per-element variance `σ_n² = P_n / N`.
    pub fn element_variance(&self, cfg: &SensingConfig) -> f64 {
        self.total_power / cfg.subcarriers() as f64
    }
}

/// `N × M` CSI matrix (subcarriers × symbols) with UL symbols zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiMatrix(Grid<Complex64>);

impl CsiMatrix {
    pub fn zeros(cfg: &SensingConfig) -> Self {
        Self(Grid::filled(
            cfg.subcarriers(),
            cfg.symbols(),
            Complex64::new(0.0, 0.0),
        ))
    }

    /// Wraps raw samples and zeroes the UL columns.
    pub fn from_grid(grid: Grid<Complex64>, cfg: &SensingConfig) -> Result<Self> {
        let expected = (cfg.subcarriers(), cfg.symbols());
        if grid.dims() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: grid.dims(),
            });
        }
        let mut csi = Self(grid);
        csi.apply_mask(cfg);
        Ok(csi)
    }

    pub fn into_grid(self) -> Grid<Complex64> {
        self.0
    }

    pub fn apply_mask(&mut self, cfg: &SensingConfig) {
        let mask = cfg.mask();
        for row in self.0.rows_iter_mut() {
            for (v, &on) in row.iter_mut().zip(mask) {
                if !on {
                    *v = Complex64::new(0.0, 0.0);
                }
            }
        }
    }

    /// Adds `coeff · a(range) b(speed)^T` on the columns selected by `columns`.
    pub(crate) fn add_rank_one(
        &mut self,
        coeff: Complex64,
        range: f64,
        speed: f64,
        columns: &[bool],
        cfg: &SensingConfig,
    ) {
        let a = steering_range(range, cfg);
        let b = steering_doppler(speed, cfg);
        let bc: Vec<Complex64> = b
            .iter()
            .zip(columns)
            .map(|(&bv, &on)| {
                if on {
                    coeff * bv
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect();
        for (row, &ak) in self.0.rows_iter_mut().zip(&a) {
            for ((v, &bl), &on) in row.iter_mut().zip(&bc).zip(columns) {
                if on {
                    *v += ak * bl;
                }
            }
        }
    }
}

impl Deref for CsiMatrix {
    type Target = Grid<Complex64>;

    fn deref(&self) -> &Grid<Complex64> {
        &self.0
    }
}

impl DerefMut for CsiMatrix {
    fn deref_mut(&mut self) -> &mut Grid<Complex64> {
        &mut self.0
    }
}

/// Range steering vector, `a_k = exp(-j4π k Δf r / c)`.
pub fn steering_range(range: f64, cfg: &SensingConfig) -> Vec<Complex64> {
    let step = 4.0 * PI * cfg.radio.subcarrier_spacing_hz * range / SPEED_OF_LIGHT;
    (0..cfg.subcarriers())
        .map(|k| Complex64::from_polar(1.0, -step * k as f64))
        .collect()
}

/// Doppler steering vector, `b_l = exp(+j4π l T_0 f_c v / c)`.
pub fn steering_doppler(speed: f64, cfg: &SensingConfig) -> Vec<Complex64> {
    let step =
        4.0 * PI * cfg.radio.symbol_duration_s * cfg.radio.carrier_hz * speed / SPEED_OF_LIGHT;
    (0..cfg.symbols())
        .map(|l| Complex64::from_polar(1.0, step * l as f64))
        .collect()
}

/// `H = (Σ α_p a(r_p) b(v_p)^T + Z) diag(d)` using the given generator for `Z`.
pub fn synthesize_csi_with_rng<R: Rng + ?Sized>(
    targets: &[Target],
    noise: NoiseSpec,
    cfg: &SensingConfig,
    rng: &mut R,
) -> Result<CsiMatrix> {
    for t in targets {
        t.validate(cfg)?;
    }
    let mut h = CsiMatrix::zeros(cfg);
    for t in targets {
        h.add_rank_one(t.coeff, t.range, t.speed, cfg.mask(), cfg);
    }
    let variance = noise.element_variance(cfg);
    if variance > 0.0 {
        let sd = (variance / 2.0).sqrt();
        let mask = cfg.mask();
        for row in h.rows_iter_mut() {
            for (v, &on) in row.iter_mut().zip(mask) {
                if on {
                    let re: f64 = StandardNormal.sample(rng);
                    let im: f64 = StandardNormal.sample(rng);
                    *v += Complex64::new(sd * re, sd * im);
                }
            }
        }
    }
    Ok(h)
}

/// Deterministic CSI synthesis for a fixed seed.
pub fn synthesize_csi(
    targets: &[Target],
    noise: NoiseSpec,
    cfg: &SensingConfig,
    seed: u64,
) -> Result<CsiMatrix> {
    synthesize_csi_with_rng(targets, noise, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Independent generator for substream `stream` of `master_seed`.
pub fn substream_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// Two-way free-space amplitude factor `(λ / 4πr)²`.
pub fn free_space_gain(range: f64, cfg: &SensingConfig) -> f64 {
    (cfg.radio.wavelength_m() / (4.0 * PI * range)).powi(2)
}

/// Rician amplitude `|ν + σ(X₁ + jX₂)|` with `X` standard normal.
pub fn rice_sample<R: Rng + ?Sized>(nu: f64, sigma: f64, rng: &mut R) -> f64 {
    let x1: f64 = StandardNormal.sample(rng);
    let x2: f64 = StandardNormal.sample(rng);
    (nu + sigma * x1).hypot(sigma * x2)
}

/// Distribution of random scene targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub min_range: f64,
    pub max_range: f64,
    pub max_speed: f64,
    pub rice_nu: f64,
    pub rice_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            min_range: 10.0,
            max_range: 100.0,
            max_speed: 5.0,
            rice_nu: 2.0,
            rice_sigma: 1.0,
        }
    }
}

impl SceneSpec {
    pub fn sample<R: Rng + ?Sized>(
        &self,
        count: usize,
        cfg: &SensingConfig,
        rng: &mut R,
    ) -> Vec<Target> {
        (0..count)
            .map(|_| {
                let range = rng.gen_range(self.min_range..self.max_range);
                let speed = rng.gen_range(-self.max_speed..self.max_speed);
                let amp =
                    free_space_gain(range, cfg) * rice_sample(self.rice_nu, self.rice_sigma, rng);
                let phase = rng.gen_range(0.0..2.0 * PI);
                Target::new(range, speed, Complex64::from_polar(amp, phase))
            })
            .collect()
    }
}

/// `count` targets from the default scene distribution.
pub fn sample_scene(count: usize, seed: u64, cfg: &SensingConfig) -> Vec<Target> {
    SceneSpec::default().sample(count, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}
