//! Range-Doppler periodograms and focused (zoomed) Fourier refinement.
//!
//! Normalization: `C[n, m] = 1/(N'M') Σ_k Σ_l H[k, l] e^{-j2πlm/M'} e^{+j2πkn/N'}`.
//! Refined coefficients are reported in the same normalization, so a
//! noiseless target with CSI coefficient `α` shows up as
//! `α' = α N M D_TDD / (N'M')`.

use std::f64::consts::PI;
use std::ops::{Deref, DerefMut, Range};

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::config::SensingConfig;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scene::CsiMatrix;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// `N' × M'` complex periodogram, Doppler axis center-shifted.
#[derive(Debug, PartialEq)]
pub struct ComplexPeriodogram {
    grid: Grid<Complex64>,
    span: Range<usize>,
}

/// `N' × M'` power periodogram, Doppler axis center-shifted.
#[derive(Debug, PartialEq)]
pub struct PowerPeriodogram {
    grid: Grid<f64>,
    span: Range<usize>,
}

impl PowerPeriodogram {
    /// Strongest bin as (range bin, column, power).
    pub fn max_bin(&self) -> (usize, usize, f64) {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for (n, row) in self.rows_iter().enumerate() {
            for (col, &p) in row.iter().enumerate() {
                if p > best.2 {
                    best = (n, col, p);
                }
            }
        }
        best
    }
}

macro_rules! grid_newtype {
    ($name:ident, $elem:ty) => {
        impl $name {
            pub fn from_grid(grid: Grid<$elem>) -> Self {
                let span = 0..grid.rows();
                Self { grid, span }
            }

            pub fn into_grid(self) -> Grid<$elem> {
                self.grid
            }

            /// Range bins that were computed; all other rows are zero.
            pub fn span(&self) -> Range<usize> {
                self.span.clone()
            }

            pub(crate) fn empty() -> Self {
                Self::from_grid(Grid::from_vec(0, 0, Vec::new()))
            }

            /// Resizes to `np × mp` and zeroes every row outside `rows` that
            /// may hold data. Fresh storage is zero-allocated so untouched
            /// rows cost nothing.
            fn prepare(&mut self, np: usize, mp: usize, rows: Range<usize>) {
                if self.grid.dims() != (np, mp) {
                    let data = bytemuck::allocation::zeroed_vec(np * mp);
                    self.grid = Grid::from_vec(np, mp, data);
                } else {
                    let old = self.span.clone();
                    let data = self.grid.as_mut_slice();
                    let zero = bytemuck::Zeroable::zeroed();
                    data[old.start.min(rows.start) * mp..rows.start.max(old.start) * mp].fill(zero);
                    data[rows.end.min(old.end) * mp..old.end.max(rows.end) * mp].fill(zero);
                }
                self.span = rows;
            }
        }

        // Copies only the computed rows; the rest stays lazily zeroed.
        impl Clone for $name {
            fn clone(&self) -> Self {
                let mut out = Self::empty();
                out.clone_from(self);
                out
            }

            fn clone_from(&mut self, src: &Self) {
                let (np, mp) = src.grid.dims();
                self.prepare(np, mp, src.span());
                let rows = src.span.start * mp..src.span.end * mp;
                self.grid.as_mut_slice()[rows.clone()].copy_from_slice(&src.grid.as_slice()[rows]);
            }
        }

        impl Deref for $name {
            type Target = Grid<$elem>;

            fn deref(&self) -> &Grid<$elem> {
                &self.grid
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut Grid<$elem> {
                &mut self.grid
            }
        }
    };
}

grid_newtype!(ComplexPeriodogram, Complex64);
grid_newtype!(PowerPeriodogram, f64);

/// Optional amplitude tapers applied before the transforms.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Taper {
    /// One weight per subcarrier.
    pub range: Option<Vec<f64>>,
    /// One weight per symbol.
    pub doppler: Option<Vec<f64>>,
}

fn check_dims(h: &Grid<Complex64>, cfg: &SensingConfig) -> Result<()> {
    let expected = (cfg.subcarriers(), cfg.symbols());
    if h.dims() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: h.dims(),
        });
    }
    Ok(())
}

/// Complex periodogram of `h` (no taper).
pub fn complex_periodogram(h: &CsiMatrix, cfg: &SensingConfig) -> Result<ComplexPeriodogram> {
    complex_periodogram_of(h, cfg, &Taper::default())
}

/// Complex periodogram with optional tapers.
pub fn complex_periodogram_tapered(
    h: &CsiMatrix,
    cfg: &SensingConfig,
    taper: &Taper,
) -> Result<ComplexPeriodogram> {
    complex_periodogram_of(h, cfg, taper)
}

/// Periodogram of an arbitrary `N × M` grid; UL columns are not forced to zero.
pub fn complex_periodogram_of(
    h: &Grid<Complex64>,
    cfg: &SensingConfig,
    taper: &Taper,
) -> Result<ComplexPeriodogram> {
    let mut out = ComplexPeriodogram::empty();
    complex_periodogram_into(h, cfg, taper, &mut out)?;
    Ok(out)
}

thread_local! {
    // Symbol-major range spectra, kept between calls to avoid refaulting pages.
    static SPECTRA: std::cell::RefCell<Vec<Complex64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Like [`complex_periodogram_of`], writing into `out` and reusing its storage.
pub fn complex_periodogram_into(
    h: &Grid<Complex64>,
    cfg: &SensingConfig,
    taper: &Taper,
    out: &mut ComplexPeriodogram,
) -> Result<()> {
    complex_periodogram_span_into(h, cfg, taper, 0..cfg.range_bins(), out)
}

/// Computes only the range bins in `rows`; every other row of `out` is zero.
pub fn complex_periodogram_span_into(
    h: &Grid<Complex64>,
    cfg: &SensingConfig,
    taper: &Taper,
    rows: Range<usize>,
    out: &mut ComplexPeriodogram,
) -> Result<()> {
    check_dims(h, cfg)?;
    let (n_sc, n_sym) = h.dims();
    let (np, mp) = (cfg.range_bins(), cfg.doppler_bins());
    if let Some(w) = &taper.range {
        assert_eq!(w.len(), n_sc, "range taper length");
    }
    if let Some(w) = &taper.doppler {
        assert_eq!(w.len(), n_sym, "Doppler taper length");
    }

    let doppler_fft = FftPlanner::<f64>::new().plan_fft_forward(mp);
    with_range_spectra(h, np, taper, |spectra, active| {
        doppler_stage(spectra, active, np, &*doppler_fft, rows, out)
    });
    Ok(())
}

/// Runs the range inverse FFT of every nonzero symbol of `h` (zero-padded to
/// `np`) and hands the symbol-major spectra to `f` together with the mask of
/// nonzero symbols.
fn with_range_spectra<R>(
    h: &Grid<Complex64>,
    np: usize,
    taper: &Taper,
    f: impl FnOnce(&[Complex64], &[bool]) -> R,
) -> R {
    let (n_sc, n_sym) = h.dims();
    let range_ifft = FftPlanner::<f64>::new().plan_fft_inverse(np);
    let active: Vec<bool> = (0..n_sym)
        .map(|l| (0..n_sc).any(|k| h[(k, l)] != ZERO))
        .collect();

    let mut spectra = SPECTRA.with(|s| std::mem::take(&mut *s.borrow_mut()));
    // Only active symbols are written and read, so stale data elsewhere is harmless.
    if spectra.len() != n_sym * np {
        spectra = bytemuck::allocation::zeroed_vec(n_sym * np);
    }
    spectra
        .par_chunks_mut(np)
        .enumerate()
        .filter(|(l, _)| active[*l])
        .for_each_init(
            || vec![ZERO; range_ifft.get_inplace_scratch_len()],
            |scratch, (l, col)| {
                let dw = taper.doppler.as_ref().map_or(1.0, |w| w[l]);
                for k in 0..n_sc {
                    let rw = taper.range.as_ref().map_or(1.0, |w| w[k]);
                    col[k] = h[(k, l)] * (rw * dw);
                }
                col[n_sc..].fill(ZERO);
                range_ifft.process_with_scratch(col, scratch);
            },
        );
    let result = f(&spectra, &active);
    SPECTRA.with(|s| *s.borrow_mut() = spectra);
    result
}

fn doppler_stage(
    spectra: &[Complex64],
    active: &[bool],
    np: usize,
    doppler_fft: &dyn rustfft::Fft<f64>,
    rows: Range<usize>,
    out: &mut ComplexPeriodogram,
) {
    let n_sym = active.len();
    let mp = doppler_fft.len();
    let scale = 1.0 / (np as f64 * mp as f64);
    let half = mp / 2;
    let rows = rows.start.min(np)..rows.end.min(np);
    out.prepare(np, mp, rows.clone());
    // Rows are handled in blocks so the symbol-major gather reads contiguous runs.
    const BLOCK: usize = 16;
    out.grid.as_mut_slice()[rows.start * mp..rows.end * mp]
        .par_chunks_mut(mp * BLOCK)
        .enumerate()
        .for_each_init(
            || {
                (
                    vec![ZERO; mp * BLOCK],
                    vec![ZERO; doppler_fft.get_inplace_scratch_len()],
                )
            },
            |(bufs, scratch), (b, block)| {
                let n0 = rows.start + b * BLOCK;
                let count = block.len() / mp;
                bufs.iter_mut().for_each(|v| *v = ZERO);
                for l in (0..n_sym).filter(|&l| active[l]) {
                    let src = &spectra[l * np + n0..l * np + n0 + count];
                    for (r, &v) in src.iter().enumerate() {
                        bufs[r * mp + l] = v;
                    }
                }
                for (buf, row) in bufs.chunks_exact_mut(mp).zip(block.chunks_exact_mut(mp)) {
                    doppler_fft.process_with_scratch(buf, scratch);
                    // Column i holds bin i - M'/2, i.e. FFT index (i + M'/2) mod M'.
                    let (lo, hi) = buf.split_at(half);
                    for (v, &x) in row.iter_mut().zip(hi.iter().chain(lo)) {
                        *v = x * scale;
                    }
                }
            },
        );
}

/// Non-coherent average over the `R` DL bursts: each burst's symbols are
/// Doppler-transformed alone (zero-padded to `M'`) and the powers averaged.
/// Same `1/(N'M')` scale as the full-frame periodogram, so a target peak sits
/// `R²` below the full-frame peak while the noise floor sits `R` below.
pub fn burst_average_power(
    h: &CsiMatrix,
    cfg: &SensingConfig,
    rows: Range<usize>,
) -> Result<PowerPeriodogram> {
    check_dims(h, cfg)?;
    let (np, mp) = (cfg.range_bins(), cfg.doppler_bins());
    let period = cfg.tdd.period();
    let reps = cfg.tdd.repetitions;
    let mask = cfg.mask();
    let doppler_fft = FftPlanner::<f64>::new().plan_fft_forward(mp);
    let scale2 = (1.0 / (np as f64 * mp as f64)).powi(2) / reps as f64;
    let half = mp / 2;
    let rows = rows.start.min(np)..rows.end.min(np);
    let mut out = PowerPeriodogram::empty();
    out.prepare(np, mp, rows.clone());
    with_range_spectra(h, np, &Taper::default(), |spectra, _| {
        out.grid.as_mut_slice()[rows.start * mp..rows.end * mp]
            .par_chunks_mut(mp)
            .enumerate()
            .for_each_init(
                || {
                    (
                        vec![ZERO; mp],
                        vec![ZERO; doppler_fft.get_inplace_scratch_len()],
                    )
                },
                |(buf, scratch), (r, row)| {
                    let n = rows.start + r;
                    for b in 0..reps {
                        buf.fill(ZERO);
                        for l in (b * period..(b + 1) * period).filter(|&l| mask[l]) {
                            buf[l - b * period] = spectra[l * np + n];
                        }
                        doppler_fft.process_with_scratch(buf, scratch);
                        let (lo, hi) = buf.split_at(half);
                        for (v, x) in row.iter_mut().zip(hi.iter().chain(lo)) {
                            *v += x.norm_sqr() * scale2;
                        }
                    }
                },
            );
    });
    Ok(out)
}

/// Elementwise `|C|²`.
pub fn power_periodogram(c: &ComplexPeriodogram) -> PowerPeriodogram {
    PowerPeriodogram {
        grid: c.map(|v| v.norm_sqr()),
        span: c.span(),
    }
}

/// Like [`power_periodogram`], reusing the storage of `out`.
pub fn power_periodogram_into(c: &ComplexPeriodogram, out: &mut PowerPeriodogram) {
    power_periodogram_span_into(c, 0..c.rows(), out);
}

/// `|C|²` on the rows in `rows`; every other row of `out` is zero.
pub fn power_periodogram_span_into(
    c: &ComplexPeriodogram,
    rows: Range<usize>,
    out: &mut PowerPeriodogram,
) {
    let (np, mp) = c.dims();
    let rows = rows.start.min(np)..rows.end.min(np);
    out.prepare(np, mp, rows.clone());
    let src = &c.as_slice()[rows.start * mp..rows.end * mp];
    for (p, v) in out.grid.as_mut_slice()[rows.start * mp..rows.end * mp]
        .iter_mut()
        .zip(src)
    {
        *p = v.norm_sqr();
    }
}

/// Fine-grid search parameters (in periodogram bins).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub coarse_half_width: f64,
    pub coarse_step: f64,
    pub fine_half_width: f64,
    pub fine_step: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            coarse_half_width: 1.0,
            coarse_step: 1.0 / 8.0,
            fine_half_width: 1.0 / 8.0,
            fine_step: 1.0 / 64.0,
        }
    }
}

impl RefineConfig {
    /// Largest possible distance between refined and coarse bin, per axis.
    pub fn max_offset(&self) -> f64 {
        self.coarse_half_width + self.fine_half_width
    }
}

/// Refined candidate peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakEstimate {
    /// Coarse range bin `n̂`.
    pub coarse_range_bin: usize,
    /// Coarse signed Doppler bin `m̂`.
    pub coarse_doppler_bin: isize,
    /// Refined fractional range bin `n̂'`, in `[0, N')`.
    pub range_bin: f64,
    /// Refined fractional Doppler bin `m̂'`, in `[-M'/2, M'/2)`.
    pub doppler_bin: f64,
    pub range: f64,
    pub speed: f64,
    /// Complex coefficient in periodogram normalization.
    pub coeff: Complex64,
    /// `10 log10 |coeff|²`.
    pub power_db: f64,
}

impl PeakEstimate {
    pub fn position(&self) -> (f64, f64) {
        (self.range, self.speed)
    }

    /// CSI-domain coefficient `α = α' N'M' / (N M D_TDD)`.
    pub fn csi_coefficient(&self, cfg: &SensingConfig) -> Complex64 {
        csi_coefficient(self.coeff, cfg)
    }
}

/// Converts a periodogram-normalized coefficient to the CSI domain.
pub fn csi_coefficient(coeff: Complex64, cfg: &SensingConfig) -> Complex64 {
    let padded = cfg.range_bins() as f64 * cfg.doppler_bins() as f64;
    let gain = cfg.subcarriers() as f64 * (cfg.tdd.dl_symbols * cfg.tdd.repetitions) as f64;
    coeff * (padded / gain)
}

fn offsets(half_width: f64, step: f64) -> Vec<f64> {
    let count = (half_width / step).round() as i64;
    (-count..=count).map(|i| i as f64 * step).collect()
}

/// Unnormalized `W_r^T H W_s` at the given fractional range and Doppler bins.
/// Result is row-major `range_bins.len() × doppler_bins.len()`.
pub fn focused_values(
    h: &CsiMatrix,
    range_bins: &[f64],
    doppler_bins: &[f64],
    cfg: &SensingConfig,
) -> Vec<Complex64> {
    focused_values_batch(h, &[(range_bins, doppler_bins)], cfg).remove(0)
}

/// [`focused_values`] for several grids with one pass over `H`.
///
/// Range first: `R[u, l] = Σ_k H[k, l] e^{+j2π k n_u / N'}` over the distinct
/// range points of all grids and the DL symbols, then each grid's Doppler
/// points on the rows of `R` it needs.
pub fn focused_values_batch(
    h: &CsiMatrix,
    grids: &[(&[f64], &[f64])],
    cfg: &SensingConfig,
) -> Vec<Vec<Complex64>> {
    let (np, mp) = (cfg.range_bins() as f64, cfg.doppler_bins() as f64);
    let mut points: Vec<f64> = grids.iter().flat_map(|g| g.0.iter().copied()).collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let dl: Vec<usize> = cfg.downlink_symbols().collect();
    let turns: Vec<f64> = points.iter().map(|&n| n / np).collect();
    let r = range_project(h, &dl, &turns);
    let positions: Vec<usize> = (0..dl.len()).collect();
    grids
        .iter()
        .map(|&(ns, ms)| {
            let mut rows = Vec::with_capacity(ns.len() * dl.len());
            for n in ns {
                let u = points
                    .binary_search_by(|p| p.total_cmp(n))
                    .expect("point was collected");
                rows.extend_from_slice(&r[u * dl.len()..(u + 1) * dl.len()]);
            }
            Weights::new(&positions, &dl, ms.iter().map(|&m| -m / mp)).apply(&rows, dl.len())
        })
        .collect()
}

/// `Σ_k x[k, l] e^{j2π t_u k}` for every `t_u` in `turns` and every column
/// `l` in `cols`; returns `turns.len() × cols.len()`.
fn range_project(x: &Grid<Complex64>, cols: &[usize], turns: &[f64]) -> Vec<Complex64> {
    const BLOCK: usize = 128;
    let (rows, width) = (x.rows(), cols.len());
    let nu = turns.len();
    let w: Vec<Complex64> = turns
        .iter()
        .flat_map(|&t| {
            (0..rows).map(move |k| Complex64::from_polar(1.0, 2.0 * PI * frac(t * k as f64)))
        })
        .collect();
    let blocks: Vec<(Vec<f64>, Vec<f64>)> = cols
        .par_chunks(BLOCK)
        .map(|block| {
            let (mut re, mut im) = (vec![0.0; nu * block.len()], vec![0.0; nu * block.len()]);
            project_block(x, block, &w, &mut re, &mut im);
            (re, im)
        })
        .collect();
    let mut out = vec![ZERO; nu * width];
    for (b, (re, im)) in blocks.iter().enumerate() {
        let len = re.len() / nu.max(1);
        for u in 0..nu {
            for i in 0..len {
                out[u * width + b * BLOCK + i] = Complex64::new(re[u * len + i], im[u * len + i]);
            }
        }
    }
    out
}

fn project_block(
    x: &Grid<Complex64>,
    block: &[usize],
    w: &[Complex64],
    re: &mut [f64],
    im: &mut [f64],
) {
    #[cfg(target_arch = "x86_64")]
    if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
        // SAFETY: the required CPU features were just detected.
        return unsafe { project_block_fma(x, block, w, re, im) };
    }
    project_block_with::<false>(x, block, w, re, im);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn project_block_fma(
    x: &Grid<Complex64>,
    block: &[usize],
    w: &[Complex64],
    re: &mut [f64],
    im: &mut [f64],
) {
    project_block_with::<true>(x, block, w, re, im);
}

#[inline(always)]
fn madd<const FMA: bool>(a: f64, b: f64, c: f64) -> f64 {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

#[inline(always)]
fn project_block_with<const FMA: bool>(
    x: &Grid<Complex64>,
    block: &[usize],
    w: &[Complex64],
    re: &mut [f64],
    im: &mut [f64],
) {
    let rows = x.rows();
    let len = block.len();
    let (mut xr, mut xi) = (vec![0.0; len], vec![0.0; len]);
    for k in 0..rows {
        let row = x.row(k);
        for (i, &l) in block.iter().enumerate() {
            xr[i] = row[l].re;
            xi[i] = row[l].im;
        }
        for ((ru, iu), wu) in re
            .chunks_exact_mut(len)
            .zip(im.chunks_exact_mut(len))
            .zip(w.chunks_exact(rows))
        {
            let c = wu[k];
            for (((a, b), &p), &q) in ru.iter_mut().zip(iu.iter_mut()).zip(&xr).zip(&xi) {
                *a = madd::<FMA>(c.re, p, madd::<FMA>(-c.im, q, *a));
                *b = madd::<FMA>(c.re, q, madd::<FMA>(c.im, p, *b));
            }
        }
    }
}

type Quad = [f64; 4];

/// Fourier weights `e^{j2π t e}` for exponents `e` (read from row positions
/// `cols`) and points `t` in turns, split into real and imaginary planes of
/// four-point groups.
struct Weights {
    cols: Vec<usize>,
    points: usize,
    groups: usize,
    re: Vec<Quad>,
    im: Vec<Quad>,
}

impl Weights {
    fn new(cols: &[usize], exps: &[usize], turns: impl Iterator<Item = f64>) -> Self {
        let turns: Vec<f64> = turns.collect();
        let groups = turns.len().div_ceil(4);
        let mut re = vec![[0.0; 4]; cols.len() * groups];
        let mut im = vec![[0.0; 4]; cols.len() * groups];
        for (i, &e) in exps.iter().enumerate() {
            for (j, &t) in turns.iter().enumerate() {
                let w = Complex64::from_polar(1.0, 2.0 * PI * frac(t * e as f64));
                re[i * groups + j / 4][j % 4] = w.re;
                im[i * groups + j / 4][j % 4] = w.im;
            }
        }
        Self {
            cols: cols.to_vec(),
            points: turns.len(),
            groups,
            re,
            im,
        }
    }

    /// `Σ_l x[r, l] w[l, j]` for every row `r` of `x` (`rows × len`, row-major);
    /// returns `rows × points`.
    fn apply(&self, x: &[Complex64], len: usize) -> Vec<Complex64> {
        let rows = x.len().checked_div(len).unwrap_or(0);
        let mut out = vec![ZERO; rows * self.points];
        if self.points == 0 {
            return out;
        }
        out.par_chunks_mut(self.points)
            .zip(x.par_chunks(len))
            .for_each_init(
                || (vec![[0.0; 4]; self.groups], vec![[0.0; 4]; self.groups]),
                |(acc_re, acc_im), (dst, row)| {
                    self.accumulate(row, acc_re, acc_im);
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d = Complex64::new(acc_re[j / 4][j % 4], acc_im[j / 4][j % 4]);
                    }
                },
            );
        out
    }

    fn accumulate(&self, row: &[Complex64], acc_re: &mut [Quad], acc_im: &mut [Quad]) {
        #[cfg(target_arch = "x86_64")]
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were just detected.
            return unsafe { self.accumulate_fma(row, acc_re, acc_im) };
        }
        self.accumulate_with::<false>(row, acc_re, acc_im);
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn accumulate_fma(&self, row: &[Complex64], acc_re: &mut [Quad], acc_im: &mut [Quad]) {
        self.accumulate_with::<true>(row, acc_re, acc_im);
    }

    #[inline(always)]
    fn accumulate_with<const FMA: bool>(
        &self,
        row: &[Complex64],
        acc_re: &mut [Quad],
        acc_im: &mut [Quad],
    ) {
        acc_re.fill([0.0; 4]);
        acc_im.fill([0.0; 4]);
        let g = self.groups;
        for (i, &l) in self.cols.iter().enumerate() {
            let v = row[l];
            let (wr, wi) = (&self.re[i * g..(i + 1) * g], &self.im[i * g..(i + 1) * g]);
            for (((ar, ai), c), s) in acc_re.iter_mut().zip(acc_im.iter_mut()).zip(wr).zip(wi) {
                for q in 0..4 {
                    ar[q] = madd::<FMA>(v.re, c[q], madd::<FMA>(-v.im, s[q], ar[q]));
                    ai[q] = madd::<FMA>(v.re, s[q], madd::<FMA>(v.im, c[q], ai[q]));
                }
            }
        }
    }
}

fn frac(x: f64) -> f64 {
    x - x.floor()
}

/// Best point of each `center ± half_width` grid at spacing `step`.
fn argmax_on_grids(
    h: &CsiMatrix,
    centers: &[(f64, f64)],
    half_width: f64,
    step: f64,
    cfg: &SensingConfig,
) -> Vec<(f64, f64, Complex64)> {
    let offs = offsets(half_width, step);
    let axes: Vec<(Vec<f64>, Vec<f64>)> = centers
        .iter()
        .map(|c| {
            (
                offs.iter().map(|o| c.0 + o).collect(),
                offs.iter().map(|o| c.1 + o).collect(),
            )
        })
        .collect();
    let grids: Vec<(&[f64], &[f64])> = axes.iter().map(|(n, m)| (&n[..], &m[..])).collect();
    let values = focused_values_batch(h, &grids, cfg);
    axes.iter()
        .zip(centers)
        .zip(&values)
        .map(|(((ns, ms), center), values)| {
            let mut best = (center.0, center.1, ZERO);
            let mut best_power = f64::NEG_INFINITY;
            for (i, &n) in ns.iter().enumerate() {
                for (j, &m) in ms.iter().enumerate() {
                    let v = values[i * ms.len() + j];
                    if v.norm_sqr() > best_power {
                        best_power = v.norm_sqr();
                        best = (n, m, v);
                    }
                }
            }
            best
        })
        .collect()
}

/// Focused Fourier analysis around the coarse bin `(n̂, m̂)`: two nested
/// fractional-bin grids, keeping the argmax of `|W_r^T H W_s|`.
pub fn focused_fourier(
    h: &CsiMatrix,
    coarse: (usize, isize),
    cfg: &SensingConfig,
    refine: &RefineConfig,
) -> Result<PeakEstimate> {
    Ok(focused_fourier_batch(h, &[coarse], cfg, refine)?.remove(0))
}

/// [`focused_fourier`] for several coarse bins, sharing the passes over `H`.
pub fn focused_fourier_batch(
    h: &CsiMatrix,
    coarse: &[(usize, isize)],
    cfg: &SensingConfig,
    refine: &RefineConfig,
) -> Result<Vec<PeakEstimate>> {
    check_dims(h, cfg)?;
    let half = (cfg.doppler_bins() / 2) as isize;
    for &(n_hat, m_hat) in coarse {
        if n_hat >= cfg.range_bins() || m_hat < -half || m_hat >= half {
            return Err(Error::BinOutOfDomain {
                n: n_hat as f64,
                m: m_hat as f64,
            });
        }
    }
    if coarse.is_empty() {
        return Ok(Vec::new());
    }
    let centers: Vec<(f64, f64)> = coarse.iter().map(|&(n, m)| (n as f64, m as f64)).collect();
    let first = argmax_on_grids(
        h,
        &centers,
        refine.coarse_half_width,
        refine.coarse_step,
        cfg,
    );
    let centers: Vec<(f64, f64)> = first.iter().map(|&(n, m, _)| (n, m)).collect();
    let second = argmax_on_grids(h, &centers, refine.fine_half_width, refine.fine_step, cfg);
    Ok(coarse
        .iter()
        .zip(second)
        .map(|(&c, (n, m, raw))| make_peak(c, (n, m), raw, cfg))
        .collect())
}

pub(crate) fn make_peak(
    coarse: (usize, isize),
    refined: (f64, f64),
    raw: Complex64,
    cfg: &SensingConfig,
) -> PeakEstimate {
    let np = cfg.range_bins() as f64;
    let mp = cfg.doppler_bins() as f64;
    let n = refined.0.rem_euclid(np);
    let m = (refined.1 + mp / 2.0).rem_euclid(mp) - mp / 2.0;
    let coeff = raw / (np * mp);
    PeakEstimate {
        coarse_range_bin: coarse.0,
        coarse_doppler_bin: coarse.1,
        range_bin: n,
        doppler_bin: m,
        range: n * cfg.range_per_bin(),
        speed: m * cfg.speed_per_bin(),
        coeff,
        power_db: 10.0 * coeff.norm_sqr().log10(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{GridConfig, RadioConfig, TddPattern};
    use crate::scene::{steering_range, synthesize_csi, NoiseSpec, Target};
    use approx::assert_relative_eq;

    fn small_cfg() -> SensingConfig {
        SensingConfig::new(
            RadioConfig::new(27.4e9, 120e3, 24),
            TddPattern::new(5, 2, 3),
            GridConfig::new(48, 32),
        )
        .unwrap()
    }

    /// Direct double sum, straight from the definition.
    fn direct(h: &CsiMatrix, cfg: &SensingConfig) -> Grid<Complex64> {
        let (np, mp) = (cfg.range_bins(), cfg.doppler_bins());
        let mut out = Grid::filled(np, mp, ZERO);
        for n in 0..np {
            for col in 0..mp {
                let m = cfg.doppler_bin_of_column(col) as f64;
                let mut acc = ZERO;
                for k in 0..h.rows() {
                    for l in 0..h.cols() {
                        let ph = -2.0 * PI * l as f64 * m / mp as f64
                            + 2.0 * PI * (k * n) as f64 / np as f64;
                        acc += h[(k, l)] * Complex64::from_polar(1.0, ph);
                    }
                }
                out[(n, col)] = acc / (np * mp) as f64;
            }
        }
        out
    }

    fn random_csi(cfg: &SensingConfig, seed: u64) -> CsiMatrix {
        synthesize_csi(&[], NoiseSpec::new(10.0), cfg, seed).unwrap()
    }

    fn max_norm(g: &[Complex64]) -> f64 {
        g.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn fft_matches_direct_sum() {
        let cfg = small_cfg();
        let h = random_csi(&cfg, 3);
        let fast = complex_periodogram(&h, &cfg).unwrap();
        let slow = direct(&h, &cfg);
        let scale = max_norm(slow.as_slice());
        for (a, b) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((a - b).norm() <= 1e-10 * scale);
        }
    }

    #[test]
    fn zero_csi_gives_zero_periodogram() {
        let cfg = small_cfg();
        let c = complex_periodogram(&CsiMatrix::zeros(&cfg), &cfg).unwrap();
        assert!(c.as_slice().iter().all(|v| *v == ZERO));
        assert!(power_periodogram(&c).as_slice().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let cfg = small_cfg();
        let other = SensingConfig::reference();
        let h = CsiMatrix::zeros(&other);
        assert!(matches!(
            complex_periodogram(&h, &cfg),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn on_grid_peak_value() {
        let cfg = SensingConfig::reference();
        let alpha = Complex64::new(0.7, -0.2);
        let (r, _) = cfg.bin_to_physical(40.0, 0.0).unwrap();
        let h = synthesize_csi(
            &[Target::new(r, 0.0, alpha)],
            NoiseSpec::noiseless(),
            &cfg,
            0,
        )
        .unwrap();
        let p = power_periodogram(&complex_periodogram(&h, &cfg).unwrap());
        let (n, col, peak) = p.max_bin();
        assert_eq!((n, cfg.doppler_bin_of_column(col)), (40, 0));
        let expected = alpha.norm() * 1584.0 * 832.0 / (4096.0 * 2048.0);
        assert_relative_eq!(peak.sqrt(), expected, max_relative = 1e-9);
    }

    #[test]
    fn periodogram_is_linear() {
        let cfg = small_cfg();
        let a = random_csi(&cfg, 1);
        let b = random_csi(&cfg, 2);
        let mut sum = a.clone();
        for (s, v) in sum.as_mut_slice().iter_mut().zip(b.as_slice()) {
            *s += v;
        }
        let ca = complex_periodogram(&a, &cfg).unwrap();
        let cb = complex_periodogram(&b, &cfg).unwrap();
        let cs = complex_periodogram(&sum, &cfg).unwrap();
        for ((x, y), z) in ca.as_slice().iter().zip(cb.as_slice()).zip(cs.as_slice()) {
            assert!((x + y - z).norm() < 1e-12);
        }
    }

    #[test]
    fn parseval() {
        let cfg = small_cfg();
        let h = random_csi(&cfg, 8);
        let c = complex_periodogram(&h, &cfg).unwrap();
        let lhs: f64 = power_periodogram(&c).as_slice().iter().sum();
        let rhs: f64 = h.as_slice().iter().map(|v| v.norm_sqr()).sum::<f64>()
            / (cfg.range_bins() * cfg.doppler_bins()) as f64;
        assert_relative_eq!(lhs, rhs, max_relative = 1e-9);
    }

    #[test]
    fn phase_rotation_keeps_power() {
        let cfg = small_cfg();
        let h = random_csi(&cfg, 4);
        let mut rotated = h.clone();
        let rot = Complex64::from_polar(1.0, 1.234);
        rotated.as_mut_slice().iter_mut().for_each(|v| *v *= rot);
        let p0 = power_periodogram(&complex_periodogram(&h, &cfg).unwrap());
        let p1 = power_periodogram(&complex_periodogram(&rotated, &cfg).unwrap());
        for (a, b) in p0.as_slice().iter().zip(p1.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-12));
        }
    }

    #[test]
    fn range_shift_theorem() {
        // Multiplying rows by a(r0) shifts C circularly by r0's range bin.
        let cfg = small_cfg();
        let h = random_csi(&cfg, 5);
        let shift = 3usize;
        let r0 = shift as f64 * cfg.range_per_bin();
        let a = steering_range(r0, &cfg);
        let mut shifted = h.clone();
        for (k, row) in shifted.rows_iter_mut().enumerate() {
            row.iter_mut().for_each(|v| *v *= a[k]);
        }
        let c0 = complex_periodogram(&h, &cfg).unwrap();
        let c1 = complex_periodogram(&shifted, &cfg).unwrap();
        let np = cfg.range_bins();
        let scale = max_norm(c0.as_slice());
        for n in 0..np {
            for col in 0..cfg.doppler_bins() {
                let d = c1[((n + shift) % np, col)] - c0[(n, col)];
                assert!(d.norm() <= 1e-9 * scale);
            }
        }
    }

    #[test]
    fn focused_values_match_periodogram_on_grid() {
        let cfg = small_cfg();
        let h = random_csi(&cfg, 6);
        let c = complex_periodogram(&h, &cfg).unwrap();
        let ns = [0.0, 5.0, 47.0];
        let ms = [-16.0, 0.0, 7.0];
        let v = focused_values(&h, &ns, &ms, &cfg);
        let norm = (cfg.range_bins() * cfg.doppler_bins()) as f64;
        for (i, &n) in ns.iter().enumerate() {
            for (j, &m) in ms.iter().enumerate() {
                let col = cfg.column_of_doppler_bin(m as isize);
                let expected = c[(n as usize, col)];
                assert!((v[i * 3 + j] / norm - expected).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn on_grid_refinement_is_exact() {
        let cfg = SensingConfig::reference();
        let (r, v) = cfg.bin_to_physical(120.0, -37.0).unwrap();
        let alpha = Complex64::new(-1.5, 0.25);
        let h =
            synthesize_csi(&[Target::new(r, v, alpha)], NoiseSpec::noiseless(), &cfg, 0).unwrap();
        let peak = focused_fourier(&h, (120, -37), &cfg, &RefineConfig::default()).unwrap();
        assert_eq!(peak.range_bin, 120.0);
        assert_eq!(peak.doppler_bin, -37.0);
        let recovered = peak.csi_coefficient(&cfg);
        assert!((recovered - alpha).norm() <= 1e-6 * alpha.norm());
    }

    #[test]
    fn off_grid_refinement_within_a_fine_step() {
        let cfg = SensingConfig::reference();
        let truth = (200.37, 11.0 - 0.21);
        let (r, v) = cfg.bin_to_physical(truth.0, truth.1).unwrap();
        let h = synthesize_csi(
            &[Target::new(r, v, Complex64::new(1.0, 0.0))],
            NoiseSpec::noiseless(),
            &cfg,
            0,
        )
        .unwrap();
        let peak = focused_fourier(&h, (200, 11), &cfg, &RefineConfig::default()).unwrap();
        // Oracle: dense 1/512-bin brute-force search around the truth.
        let offs: Vec<f64> = (-16..=16).map(|i| i as f64 / 512.0).collect();
        let ns: Vec<f64> = offs.iter().map(|o| truth.0 + o).collect();
        let ms: Vec<f64> = offs.iter().map(|o| truth.1 + o).collect();
        let dense = focused_values(&h, &ns, &ms, &cfg);
        let (bi, _) = dense
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .unwrap();
        let oracle = (ns[bi / ms.len()], ms[bi % ms.len()]);
        assert!((oracle.0 - truth.0).abs() <= 1.0 / 512.0);
        assert!((oracle.1 - truth.1).abs() <= 1.0 / 512.0);
        assert!((peak.range_bin - oracle.0).abs() <= 1.0 / 64.0);
        assert!((peak.doppler_bin - oracle.1).abs() <= 1.0 / 64.0);
        assert!((peak.range_bin - 200.0).abs() <= RefineConfig::default().max_offset());
    }

    #[test]
    fn refinement_never_below_coarse_bin() {
        let cfg = SensingConfig::reference();
        let h = synthesize_csi(
            &[Target::new(33.3, 2.2, Complex64::new(1.0, 0.0))],
            NoiseSpec::new(1e-6),
            &cfg,
            17,
        )
        .unwrap();
        let c = complex_periodogram(&h, &cfg).unwrap();
        let p = power_periodogram(&c);
        let (n, col, power) = p.max_bin();
        let peak = focused_fourier(
            &h,
            (n, cfg.doppler_bin_of_column(col)),
            &cfg,
            &RefineConfig::default(),
        )
        .unwrap();
        assert!(peak.coeff.norm_sqr() >= power * (1.0 - 1e-12));
    }

    #[test]
    fn coarse_bin_outside_grid_rejected() {
        let cfg = small_cfg();
        let h = CsiMatrix::zeros(&cfg);
        assert!(focused_fourier(&h, (48, 0), &cfg, &RefineConfig::default()).is_err());
        assert!(focused_fourier(&h, (0, 16), &cfg, &RefineConfig::default()).is_err());
    }
}
