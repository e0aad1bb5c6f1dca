//! CSI file: one line of JSON header, then the `N × M` matrix row-major as
//! little-endian `f64` pairs `(re, im)`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use tddsense::{CsiMatrix, Grid, RadioConfig, SensingConfig, TddPattern};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct CsiHeader {
    pub N: usize,
    pub M: usize,
    pub M_DL: usize,
    pub M_UL: usize,
    pub R: usize,
    pub f_c: f64,
    pub delta_f: f64,
    pub T_0: f64,
}

impl CsiHeader {
    pub fn of(cfg: &SensingConfig) -> Self {
        Self {
            N: cfg.subcarriers(),
            M: cfg.symbols(),
            M_DL: cfg.tdd.dl_symbols,
            M_UL: cfg.tdd.ul_symbols,
            R: cfg.tdd.repetitions,
            f_c: cfg.radio.carrier_hz,
            delta_f: cfg.radio.subcarrier_spacing_hz,
            T_0: cfg.radio.symbol_duration_s,
        }
    }

    pub fn radio(&self) -> RadioConfig {
        RadioConfig {
            symbol_duration_s: self.T_0,
            ..RadioConfig::new(self.f_c, self.delta_f, self.N)
        }
    }

    pub fn tdd(&self) -> TddPattern {
        TddPattern::new(self.M_DL, self.M_UL, self.R)
    }
}

pub fn write_csi(path: &Path, h: &CsiMatrix, cfg: &SensingConfig) -> CliResult<()> {
    let io = |e| CliError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let header = serde_json::to_string(&CsiHeader::of(cfg)).expect("header serializes");
    writeln!(w, "{header}").map_err(io)?;
    for v in h.as_slice() {
        w.write_all(&v.re.to_le_bytes()).map_err(io)?;
        w.write_all(&v.im.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a CSI file; the matrix dimensions must agree with the header.
pub fn read_csi(path: &Path) -> CliResult<(CsiHeader, Grid<Complex64>)> {
    let io = |e| CliError::io(path, e);
    let bad = |reason: String| CliError::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line).map_err(io)?;
    let header: CsiHeader =
        serde_json::from_slice(&line).map_err(|e| bad(format!("header: {e}")))?;
    let count = header
        .N
        .checked_mul(header.M)
        .filter(|c| c.checked_mul(16).is_some())
        .ok_or_else(|| bad(format!("matrix {}x{} is too large", header.N, header.M)))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() != count * 16 {
        return Err(bad(format!(
            "expected {} payload bytes for {}x{}, found {}",
            count * 16,
            header.N,
            header.M,
            bytes.len()
        )));
    }
    let f = |b: &[u8]| f64::from_le_bytes(b.try_into().expect("8-byte chunk"));
    let data = bytes
        .chunks_exact(16)
        .map(|c| Complex64::new(f(&c[..8]), f(&c[8..])))
        .collect();
    Ok((header, Grid::from_vec(header.N, header.M, data)))
}
