//! Configuration file: TOML (or the equivalent JSON object), every field
//! optional, defaults equal to the library's reference set-up.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tddsense::baselines::BaselineConfig;
use tddsense::cfar::{CfarConfig, SearchRegion};
use tddsense::config::NR_NORMAL_CP_FRACTION;
use tddsense::harness::{search_region_for, DetectorSet, KalmanConfig};
use tddsense::psf::StencilExtent;
use tddsense::scene::SceneSpec;
use tddsense::tddclean::{CheckConfig, RemovalMode};
use tddsense::{GridConfig, RadioConfig, SensingConfig, TddPattern};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioSection {
    pub carrier_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub subcarriers: usize,
    /// Cyclic prefix as a fraction of the useful symbol (0.0703125 for the
    /// 5G NR normal prefix).
    pub cyclic_prefix: f64,
}

impl Default for RadioSection {
    fn default() -> Self {
        Self {
            carrier_hz: 27.4e9,
            subcarrier_spacing_hz: 120e3,
            subcarriers: 1584,
            cyclic_prefix: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TddSection {
    pub dl_symbols: usize,
    pub ul_symbols: usize,
    pub repetitions: usize,
}

impl Default for TddSection {
    fn default() -> Self {
        Self {
            dl_symbols: 104,
            ul_symbols: 36,
            repetitions: 8,
        }
    }
}

/// Periodogram size; absent fields follow the default zero-padding rule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub range_bins: Option<usize>,
    pub doppler_bins: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfarSection {
    pub guard_range: usize,
    pub guard_doppler: usize,
    pub train_range: usize,
    pub train_doppler: usize,
    pub pfa: f64,
    /// Search the whole grid instead of a region.
    pub full_grid: bool,
    /// Region bounds; absent ones are derived from the scene distribution.
    pub min_range: Option<f64>,
    pub max_range: Option<f64>,
    pub max_speed: Option<f64>,
}

impl Default for CfarSection {
    fn default() -> Self {
        let c = CfarConfig::default();
        Self {
            guard_range: c.guard_range,
            guard_doppler: c.guard_doppler,
            train_range: c.train_range,
            train_doppler: c.train_doppler,
            pfa: c.pfa,
            full_grid: false,
            min_range: None,
            max_range: None,
            max_speed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSection {
    /// `"psf"` or `"csi"`; only used where the method does not fix it.
    pub removal: String,
    pub gamma: f64,
    pub sidelobe_orders: usize,
    pub ellipse_range: f64,
    pub ellipse_doppler: f64,
    /// Restricts PSF stencils to this many range bins either side.
    pub stencil_range_half_width: Option<usize>,
    pub dynamic_range_db: f64,
    pub confine_range: usize,
    pub confine_doppler: Option<usize>,
}

impl Default for CheckSection {
    fn default() -> Self {
        let c = CheckConfig::default();
        let b = BaselineConfig::default();
        Self {
            removal: "psf".into(),
            gamma: c.gamma,
            sidelobe_orders: c.sidelobe_orders,
            ellipse_range: c.ellipse_range,
            ellipse_doppler: c.ellipse_doppler,
            stencil_range_half_width: None,
            dynamic_range_db: c.dynamic_range_db,
            confine_range: b.confine_range,
            confine_doppler: b.confine_doppler,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub min_range: f64,
    pub max_range: f64,
    pub max_speed: f64,
    pub rice_nu: f64,
    pub rice_sigma: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let s = SceneSpec::default();
        Self {
            min_range: s.min_range,
            max_range: s.max_range,
            max_speed: s.max_speed,
            rice_nu: s.rice_nu,
            rice_sigma: s.rice_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KalmanSection {
    pub frame_interval_s: f64,
    pub accel_std: f64,
    pub range_std: f64,
    pub speed_std: f64,
    pub gate_sigma: f64,
    pub max_misses: usize,
}

impl Default for KalmanSection {
    fn default() -> Self {
        let k = KalmanConfig::default();
        Self {
            frame_interval_s: k.frame_interval_s,
            accel_std: k.accel_std,
            range_std: k.range_std,
            speed_std: k.speed_std,
            gate_sigma: k.gate_sigma,
            max_misses: k.max_misses,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub radio: RadioSection,
    pub tdd: TddSection,
    pub grid: GridSection,
    pub cfar: CfarSection,
    pub check: CheckSection,
    pub scene: SceneSection,
    pub kalman: KalmanSection,
}

impl FileConfig {
    /// Reads TOML, or JSON when the first non-blank character is `{`.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| e.to_string())
        } else {
            toml::from_str(text).map_err(|e| e.to_string())
        }
    }

    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn radio(&self) -> RadioConfig {
        let r = &self.radio;
        RadioConfig::new(r.carrier_hz, r.subcarrier_spacing_hz, r.subcarriers)
            .with_cyclic_prefix(r.cyclic_prefix)
    }

    pub fn tdd(&self) -> TddPattern {
        TddPattern::new(
            self.tdd.dl_symbols,
            self.tdd.ul_symbols,
            self.tdd.repetitions,
        )
    }

    pub fn sensing(&self) -> CliResult<SensingConfig> {
        Ok(self.sensing_with(self.radio(), self.tdd())?)
    }

    /// Applies the grid section to an externally given radio and TDD set-up.
    pub fn sensing_with(
        &self,
        radio: RadioConfig,
        tdd: TddPattern,
    ) -> tddsense::Result<SensingConfig> {
        let base = SensingConfig::with_default_grid(radio, tdd)?;
        let grid = GridConfig::new(
            self.grid.range_bins.unwrap_or(base.range_bins()),
            self.grid.doppler_bins.unwrap_or(base.doppler_bins()),
        );
        base.regrid(grid)
    }

    pub fn scene(&self) -> SceneSpec {
        let s = &self.scene;
        SceneSpec {
            min_range: s.min_range,
            max_range: s.max_range,
            max_speed: s.max_speed,
            rice_nu: s.rice_nu,
            rice_sigma: s.rice_sigma,
        }
    }

    pub fn removal(&self) -> CliResult<RemovalMode> {
        match self.check.removal.as_str() {
            "psf" => Ok(RemovalMode::Psf),
            "csi" => Ok(RemovalMode::Csi),
            other => Err(CliError::Config(format!("unknown removal mode `{other}`"))),
        }
    }

    pub fn detectors(&self) -> CliResult<DetectorSet> {
        let c = &self.cfar;
        let derived = search_region_for(&self.scene());
        let region = (!c.full_grid).then(|| SearchRegion {
            min_range: c.min_range.unwrap_or(derived.min_range),
            max_range: c.max_range.unwrap_or(derived.max_range),
            max_speed: c.max_speed.unwrap_or(derived.max_speed),
        });
        let k = &self.check;
        let check = CheckConfig {
            removal: self.removal()?,
            gamma: k.gamma,
            sidelobe_orders: k.sidelobe_orders,
            ellipse_range: k.ellipse_range,
            ellipse_doppler: k.ellipse_doppler,
            stencil: k.stencil_range_half_width.map_or(StencilExtent::Full, |w| {
                StencilExtent::RangeWindow {
                    range_half_width: w,
                }
            }),
            dynamic_range_db: k.dynamic_range_db,
            ..CheckConfig::default()
        };
        check.validate()?;
        Ok(DetectorSet {
            cfar: CfarConfig {
                guard_range: c.guard_range,
                guard_doppler: c.guard_doppler,
                train_range: c.train_range,
                train_doppler: c.train_doppler,
                pfa: c.pfa,
                region,
            },
            check,
            baseline: BaselineConfig {
                refine: check.refine,
                dynamic_range_db: k.dynamic_range_db,
                confine_range: k.confine_range,
                confine_doppler: k.confine_doppler,
            },
        })
    }

    pub fn kalman(&self) -> KalmanConfig {
        let k = &self.kalman;
        KalmanConfig {
            frame_interval_s: k.frame_interval_s,
            accel_std: k.accel_std,
            range_std: k.range_std,
            speed_std: k.speed_std,
            gate_sigma: k.gate_sigma,
            max_misses: k.max_misses,
        }
    }
}

/// Example file with every field at its default, written by `config --dump`.
pub fn default_toml() -> String {
    let mut text = toml::to_string_pretty(&FileConfig::default()).expect("defaults serialize");
    text.push_str(&format!(
        "\n# 5G NR normal cyclic prefix: radio.cyclic_prefix = {NR_NORMAL_CP_FRACTION}\n"
    ));
    text
}
