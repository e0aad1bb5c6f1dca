//! Command-line front end: argument parsing, file formats and the glue
//! between them and the `tddsense` library.

pub mod config;
pub mod csifile;
pub mod error;

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tddsense::cfar::detect_candidates;
use tddsense::harness::{
    noise_for_snr_db, run_montecarlo, track_frames, write_metrics_csv, DetectorSet, Method,
    MonteCarloPlan,
};
use tddsense::psf::psf_rd;
use tddsense::scene::{substream_rng, synthesize_csi_with_rng};
use tddsense::specest::{complex_periodogram_span_into, power_periodogram, Taper};
use tddsense::{ComplexPeriodogram, CsiMatrix, NoiseSpec, PeakEstimate, SensingConfig, Target};

use crate::config::FileConfig;
use crate::csifile::{read_csi, write_csi};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "tddsense",
    version,
    about = "OFDM sensing under TDD transmission"
)]
pub struct Cli {
    /// Configuration file (TOML or JSON); defaults to the reference set-up.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// `|W_RD|²` in dB around the PSF center, as a CSV matrix (rows: range
    /// offsets, columns: Doppler offsets, both starting at minus half the
    /// window).
    Psf {
        /// `RANGExDOPPLER` bins, e.g. 64x64.
        #[arg(long, default_value = "64x64", value_parser = parse_window)]
        window: (usize, usize),
    },
    /// Draws a random scene and writes its CSI matrix.
    Simulate(SimulateArgs),
    /// Power periodogram over the search region, one bin per CSV row.
    Periodogram {
        csi: PathBuf,
        /// Also write the CA-CFAR candidates as CSV.
        #[arg(long)]
        peaks: Option<PathBuf>,
    },
    /// Runs a detector on a CSI file and writes the reported peaks.
    Detect {
        csi: PathBuf,
        #[arg(long, default_value = "tdd-psf", value_parser = parse_method)]
        method: Method,
    },
    /// Monte-Carlo sweep; writes one metrics row per (noise, targets, method).
    Montecarlo(MonteCarloArgs),
    /// Kalman tracking over per-frame detections.
    Track(TrackArgs),
    /// Prints a configuration file holding every default.
    Config,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 1)]
    pub targets: usize,
    /// Reference SNR in dB (unit target at 50 m after full integration).
    #[arg(long, default_value_t = 20.0, conflicts_with = "noise_power")]
    pub snr_db: f64,
    /// Total noise power; overrides `--snr-db`.
    #[arg(long)]
    pub noise_power: Option<f64>,
    /// Also write the drawn targets as CSV.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MonteCarloArgs {
    /// Trials per point (default 200).
    #[arg(long)]
    pub trials: Option<usize>,
    /// 10000 trials per point.
    #[arg(long, conflicts_with = "trials")]
    pub full: bool,
    /// Reference SNRs in dB.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub snr_db: Option<Vec<f64>>,
    /// Noise powers; overrides `--snr-db`.
    #[arg(long, value_delimiter = ',')]
    pub noise_power: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_value = "1,3")]
    pub targets: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_method,
          default_value = "tdd-psf,conventional,single-dl")]
    pub methods: Vec<Method>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// CSV with columns `frame,range_m,speed_mps`; when absent a single
    /// target is simulated and detected frame by frame.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub frames: usize,
    #[arg(long, default_value_t = 30.0)]
    pub start_range: f64,
    #[arg(long, default_value_t = 3.0, allow_negative_numbers = true)]
    pub speed: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub snr_db: f64,
    #[arg(long, default_value = "tdd-psf", value_parser = parse_method)]
    pub method: Method,
}

fn parse_window(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once('x')
        .ok_or("expected RANGExDOPPLER, e.g. 64x64")?;
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| e.to_string());
    let w = (parse(a)?, parse(b)?);
    if w.0 == 0 || w.1 == 0 {
        return Err("window sizes must be positive".into());
    }
    Ok(w)
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: tddsense::Error| e.to_string())
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code. Errors are reported on standard error.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Usage errors exit with 2, help and version with 0.
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let file = FileConfig::load_or_default(cli.config.as_deref())?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Psf { window } => psf_command(&file.sensing()?, *window, out),
        Command::Simulate(args) => simulate_command(&file, args, cli.seed, out),
        Command::Periodogram { csi, peaks } => {
            periodogram_command(&file, csi, peaks.as_deref(), out)
        }
        Command::Detect { csi, method } => detect_command(&file, csi, *method, out),
        Command::Montecarlo(args) => montecarlo_command(&file, args, cli.seed, out),
        Command::Track(args) => track_command(&file, args, cli.seed, out),
        Command::Config => with_output(out, |w| w.write_all(config::default_toml().as_bytes())),
    }
}

/// Runs `f` on a buffered writer for `out`, or standard output.
fn with_output(
    out: Option<&Path>,
    f: impl FnOnce(&mut dyn Write) -> io::Result<()>,
) -> CliResult<()> {
    let (result, path) = match out {
        Some(path) => {
            let file = File::create(path).map_err(|e| CliError::io(path, e))?;
            let mut w = BufWriter::new(file);
            (f(&mut w).and_then(|_| w.flush()), path.to_path_buf())
        }
        None => {
            let mut w = io::stdout().lock();
            (f(&mut w).and_then(|_| w.flush()), PathBuf::from("<stdout>"))
        }
    };
    result.map_err(|e| CliError::io(path, e))
}

fn psf_command(cfg: &SensingConfig, (nr, nd): (usize, usize), out: Option<&Path>) -> CliResult<()> {
    let (r0, d0) = ((nr / 2) as f64, (nd / 2) as f64);
    with_output(out, |w| {
        for i in 0..nr {
            let row: Vec<String> = (0..nd)
                .map(|j| {
                    format!(
                        "{:.16e}",
                        20.0 * psf_rd(i as f64 - r0, j as f64 - d0, cfg).abs().log10()
                    )
                })
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    })
}

fn simulate_command(
    file: &FileConfig,
    args: &SimulateArgs,
    seed: u64,
    out: Option<&Path>,
) -> CliResult<()> {
    let cfg = file.sensing()?;
    let out = out.ok_or_else(|| CliError::Config("simulate needs --out".into()))?;
    let noise = args
        .noise_power
        .unwrap_or_else(|| noise_for_snr_db(args.snr_db, &cfg));
    let mut rng = substream_rng(seed, 0);
    let truth = file.scene().sample(args.targets, &cfg, &mut rng);
    let h = synthesize_csi_with_rng(&truth, NoiseSpec::new(noise), &cfg, &mut rng)?;
    write_csi(out, &h, &cfg)?;
    if let Some(path) = &args.truth {
        with_output(Some(path), |w| write_targets(w, &truth))?;
    }
    Ok(())
}

pub fn write_targets(w: &mut dyn Write, targets: &[Target]) -> io::Result<()> {
    writeln!(w, "range_m,speed_mps,coeff_re,coeff_im")?;
    for t in targets {
        writeln!(
            w,
            "{:.16e},{:.16e},{:.16e},{:.16e}",
            t.range, t.speed, t.coeff.re, t.coeff.im
        )?;
    }
    Ok(())
}

/// Loads a CSI file; radio and TDD parameters come from its header, the
/// grid and detector settings from `file`.
pub fn load_csi(file: &FileConfig, path: &Path) -> CliResult<(CsiMatrix, SensingConfig)> {
    let (header, grid) = read_csi(path)?;
    let cfg = file.sensing_with(header.radio(), header.tdd())?;
    let h = CsiMatrix::from_grid(grid, &cfg).map_err(|e| CliError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok((h, cfg))
}

fn periodogram_command(
    file: &FileConfig,
    csi: &Path,
    peaks: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<()> {
    let (h, cfg) = load_csi(file, csi)?;
    let cfar = file.detectors()?.cfar;
    let rows = cfar.row_span(&cfg, 0);
    let mut c = ComplexPeriodogram::from_grid(tddsense::Grid::from_vec(0, 0, Vec::new()));
    complex_periodogram_span_into(&h, &cfg, &Taper::default(), rows.clone(), &mut c)?;
    let p = power_periodogram(&c);
    let keep = |range: f64, speed: f64| {
        cfar.region.is_none_or(|r| {
            range >= r.min_range && range <= r.max_range && speed.abs() <= r.max_speed
        })
    };
    if let Some(path) = peaks {
        let found = detect_candidates(&p, &cfar, &cfg)?;
        with_output(Some(path), |w| {
            writeln!(w, "range_bin,doppler_bin,range_m,speed_mps,power,power_db")?;
            for c in &found {
                writeln!(
                    w,
                    "{},{},{:.16e},{:.16e},{:.16e},{:.16e}",
                    c.range_bin,
                    c.doppler_bin,
                    c.range,
                    c.speed,
                    c.power,
                    10.0 * c.power.log10()
                )?;
            }
            Ok(())
        })?;
    }
    with_output(out, |w| {
        writeln!(w, "range_bin,doppler_bin,range_m,speed_mps,power,power_db")?;
        for n in rows.clone() {
            for col in 0..cfg.doppler_bins() {
                let m = cfg.doppler_bin_of_column(col);
                let (range, speed) = (
                    n as f64 * cfg.range_per_bin(),
                    m as f64 * cfg.speed_per_bin(),
                );
                if !keep(range, speed) {
                    continue;
                }
                let v = p[(n, col)];
                writeln!(
                    w,
                    "{n},{m},{range:.16e},{speed:.16e},{v:.16e},{:.16e}",
                    10.0 * v.log10()
                )?;
            }
        }
        Ok(())
    })
}

/// Runs `method` on `h` with the detector settings of `file`.
pub fn detect(
    detectors: &DetectorSet,
    method: Method,
    h: CsiMatrix,
    cfg: &SensingConfig,
) -> CliResult<Vec<PeakEstimate>> {
    let state = detectors.state(h, cfg)?;
    Ok(detectors.detect(method, &state, cfg)?)
}

pub fn write_peaks(w: &mut dyn Write, peaks: &[PeakEstimate]) -> io::Result<()> {
    writeln!(
        w,
        "range_m,speed_mps,range_bin,doppler_bin,coeff_re,coeff_im,power_db"
    )?;
    for p in peaks {
        writeln!(
            w,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            p.range, p.speed, p.range_bin, p.doppler_bin, p.coeff.re, p.coeff.im, p.power_db
        )?;
    }
    Ok(())
}

fn detect_command(
    file: &FileConfig,
    csi: &Path,
    method: Method,
    out: Option<&Path>,
) -> CliResult<()> {
    let (h, cfg) = load_csi(file, csi)?;
    let peaks = detect(&file.detectors()?, method, h, &cfg)?;
    with_output(out, |w| write_peaks(w, &peaks))
}

/// Monte-Carlo plan from the desk-scale defaults, `file` and `args`.
pub fn montecarlo_plan(
    file: &FileConfig,
    args: &MonteCarloArgs,
    seed: u64,
    cfg: &SensingConfig,
) -> CliResult<MonteCarloPlan> {
    let mut plan = MonteCarloPlan::desk_scale(cfg);
    plan.scene = file.scene();
    plan.detectors = file.detectors()?;
    plan.seed = seed;
    plan.trials = if args.full {
        10_000
    } else {
        args.trials.unwrap_or(plan.trials)
    };
    if let Some(snrs) = &args.snr_db {
        plan.noise_powers = snrs.iter().map(|&s| noise_for_snr_db(s, cfg)).collect();
    }
    if let Some(powers) = &args.noise_power {
        plan.noise_powers = powers.clone();
    }
    plan.target_counts = args.targets.clone();
    plan.methods = args.methods.clone();
    plan.validate()?;
    Ok(plan)
}

fn montecarlo_command(
    file: &FileConfig,
    args: &MonteCarloArgs,
    seed: u64,
    out: Option<&Path>,
) -> CliResult<()> {
    let cfg = file.sensing()?;
    let plan = montecarlo_plan(file, args, seed, &cfg)?;
    let rows = run_montecarlo(&plan, &cfg)?;
    with_output(out, |w| write_metrics_csv(&rows, w))
}

/// Reads `frame,range_m,speed_mps` rows into per-frame measurement lists.
pub fn read_detections(path: &Path) -> CliResult<Vec<Vec<(f64, f64)>>> {
    let bad = |line: usize, reason: String| CliError::Format {
        path: path.to_path_buf(),
        reason: format!("line {line}: {reason}"),
    };
    let reader = BufReader::new(File::open(path).map_err(|e| CliError::io(path, e))?);
    let mut frames: Vec<Vec<(f64, f64)>> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(bad(i + 1, "expected frame,range_m,speed_mps".into()));
        }
        let frame: usize = fields[0].parse().map_err(|e| bad(i + 1, format!("{e}")))?;
        let r: f64 = fields[1].parse().map_err(|e| bad(i + 1, format!("{e}")))?;
        let v: f64 = fields[2].parse().map_err(|e| bad(i + 1, format!("{e}")))?;
        if frames.len() <= frame {
            frames.resize(frame + 1, Vec::new());
        }
        frames[frame].push((r, v));
    }
    Ok(frames)
}

/// Per-frame detections of one constant-velocity target.
pub fn simulate_track_detections(
    file: &FileConfig,
    args: &TrackArgs,
    seed: u64,
    cfg: &SensingConfig,
) -> CliResult<Vec<Vec<(f64, f64)>>> {
    let detectors = file.detectors()?;
    let kf = file.kalman();
    let noise = NoiseSpec::new(noise_for_snr_db(args.snr_db, cfg));
    (0..args.frames)
        .map(|k| {
            let range = args.start_range + args.speed * kf.frame_interval_s * k as f64;
            let coeff = num_complex::Complex64::from_polar(
                tddsense::scene::free_space_gain(range, cfg),
                0.7 * k as f64,
            );
            let mut rng = substream_rng(seed, k as u64);
            let h = synthesize_csi_with_rng(
                &[Target::new(range, args.speed, coeff)],
                noise,
                cfg,
                &mut rng,
            )?;
            let peaks = detect(&detectors, args.method, h, cfg)?;
            Ok(peaks.iter().map(|p| (p.range, p.speed)).collect())
        })
        .collect()
}

fn track_command(
    file: &FileConfig,
    args: &TrackArgs,
    seed: u64,
    out: Option<&Path>,
) -> CliResult<()> {
    let frames = match &args.detections {
        Some(path) => read_detections(path)?,
        None => simulate_track_detections(file, args, seed, &file.sensing()?)?,
    };
    let history = track_frames(&frames, &file.kalman());
    with_output(out, |w| {
        writeln!(
            w,
            "frame,track,range_m,speed_mps,var_range,var_speed,associated"
        )?;
        for p in &history {
            let s = &p.state;
            writeln!(
                w,
                "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                p.frame,
                p.track,
                s.x[0],
                s.x[1],
                s.p[(0, 0)],
                s.p[(1, 1)],
                u8::from(p.innovation.is_some())
            )?;
        }
        Ok(())
    })
}
