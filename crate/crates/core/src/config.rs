//! Run configuration loaded from TOML.
//!
//! Every section is optional and falls back to shipped defaults. Relative
//! paths resolve against a data root (usually the config file's directory).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{ExportConfig, NoiseSchedule, ScheduleConfig};
use crate::engine::{EngineConfig, SweepConfig};
use crate::error::{Error, Result};
use crate::raster::{LandCoverTable, ValidationRules};
use crate::reflection::ReflectionWeights;
use crate::sampling::{satellite_grid, SamplingConfig};
use crate::terrain::TerrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// DEM file or directory of tiles.
    pub dem: Option<PathBuf>,
    pub landcover: Option<PathBuf>,
    pub function: Option<PathBuf>,
    pub weather: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl PathsConfig {
    fn entries_mut(&mut self) -> [&mut Option<PathBuf>; 5] {
        [
            &mut self.dem,
            &mut self.landcover,
            &mut self.function,
            &mut self.weather,
            &mut self.output,
        ]
    }

    /// Make every relative path absolute under `root`.
    pub fn resolve(&mut self, root: &Path) {
        for p in self.entries_mut().into_iter().flatten() {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    pub frequency_hz: f64,
    pub ut_height_agl: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        let s = SweepConfig::default();
        Self {
            frequency_hz: s.frequency_hz,
            ut_height_agl: s.ut_height_agl,
        }
    }
}

impl LinkConfig {
    pub fn sweep(&self) -> SweepConfig {
        SweepConfig {
            frequency_hz: self.frequency_hz,
            ut_height_agl: self.ut_height_agl,
        }
    }
}

/// Per-class override of the shipped land-cover table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassOverride {
    pub class_id: u8,
    pub canopy_height: Option<f64>,
    pub beta_reflect: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub schedule: ScheduleConfig,
    /// Soft-gating exponent.
    pub gamma: f64,
    pub export: ExportConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            gamma: 1.0,
            export: ExportConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub link: LinkConfig,
    pub validation: ValidationRules,
    pub terrain: TerrainConfig,
    pub sampling: SamplingConfig,
    pub engine: EngineConfig,
    pub reflection: ReflectionWeights,
    pub landcover: Vec<ClassOverride>,
    pub diffusion: DiffusionConfig,
}

fn invalid(section: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("[{section}] {msg}"))
}

impl RunConfig {
    /// Parse and validate; paths are left as written.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file. Relative paths resolve against `data_root` when
    /// given, else against the file's directory.
    pub fn load(path: impl AsRef<Path>, data_root: Option<&Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let root = match data_root {
            Some(r) => r.to_path_buf(),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        cfg.paths.resolve(&root);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Shipped class table with the configured overrides applied.
    pub fn landcover_table(&self) -> Result<LandCoverTable> {
        let mut table = LandCoverTable::default();
        for o in &self.landcover {
            table
                .set_class(o.class_id, o.canopy_height, o.beta_reflect)
                .map_err(|e| invalid("landcover", e))?;
        }
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        let link = &self.link;
        if !(link.frequency_hz > 0.0 && link.frequency_hz.is_finite()) {
            return Err(invalid("link", format!("frequency_hz must be positive, got {}", link.frequency_hz)));
        }
        if !(link.ut_height_agl >= 0.0 && link.ut_height_agl.is_finite()) {
            return Err(invalid("link", format!("ut_height_agl must be >= 0, got {}", link.ut_height_agl)));
        }

        let v = &self.validation;
        if !(v.dem_min_m < v.dem_max_m) {
            return Err(invalid(
                "validation",
                format!("dem_min_m ({}) must be below dem_max_m ({})", v.dem_min_m, v.dem_max_m),
            ));
        }

        let t = &self.terrain;
        if t.tpi_small_radius == 0 || t.tpi_small_radius >= t.tpi_large_radius {
            return Err(invalid(
                "terrain",
                format!(
                    "need 0 < tpi_small_radius < tpi_large_radius, got {} and {}",
                    t.tpi_small_radius, t.tpi_large_radius
                ),
            ));
        }

        let s = &self.sampling;
        if s.k == 0 {
            return Err(invalid("sampling", "k must be at least 1"));
        }
        if s.budget == 0 {
            return Err(invalid("sampling", "budget must be at least 1"));
        }
        if s.s_min.saturating_mul(s.k) > s.budget {
            return Err(invalid(
                "sampling",
                format!("s_min * k = {} exceeds budget {}", s.s_min * s.k, s.budget),
            ));
        }
        if !(s.d_min_m >= 0.0) {
            return Err(invalid("sampling", "d_min_m must be >= 0"));
        }
        if s.retry_factor == 0 || s.max_iter == 0 || s.max_fit_pixels == 0 {
            return Err(invalid("sampling", "retry_factor, max_iter and max_fit_pixels must be positive"));
        }
        let (coeffs, factors) = s.parameters();
        coeffs.validate().map_err(|e| invalid("sampling.coefficients", e))?;
        factors.validate().map_err(|e| invalid("sampling.factors", e))?;
        satellite_grid(&s.satellites).map_err(|e| invalid("sampling.satellites", e))?;

        let table = self.landcover_table()?;
        let e = &self.engine;
        if !(e.trace.rho_threshold > 0.0) {
            return Err(invalid("engine.trace", "rho_threshold must be positive"));
        }
        e.tables.validate(&table).map_err(|err| invalid("engine.tables", err))?;
        let r = &e.ring;
        if !(r.r_min_m > 0.0 && r.r_max_m >= r.r_min_m && r.growth > 1.0 && r.angles > 0) {
            return Err(invalid(
                "engine.ring",
                "need r_min_m > 0, r_max_m >= r_min_m, growth > 1 and angles > 0",
            ));
        }
        if !(0.0..=100.0).contains(&r.keep_percentile) || !(r.tolerance_deg > 0.0) {
            return Err(invalid("engine.ring", "keep_percentile must lie in [0, 100] and tolerance_deg be positive"));
        }

        self.reflection.validate().map_err(|err| invalid("reflection", err))?;

        let d = &self.diffusion;
        NoiseSchedule::new(&d.schedule).map_err(|err| invalid("diffusion.schedule", err))?;
        if !(d.gamma > 0.0 && d.gamma.is_finite()) {
            return Err(invalid("diffusion", format!("gamma must be positive, got {}", d.gamma)));
        }
        if d.export.tile_size < 8 {
            return Err(invalid("diffusion.export", "tile_size must be at least 8"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::Preset;

    #[test]
    fn empty_config_is_default() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn sections_parse() {
        let text = r#"
seed = 7

[paths]
dem = "dem"
output = "/tmp/out"

[link]
frequency_hz = 2.0e10

[sampling]
k = 4
budget = 200
preset = "los"

[sampling.satellites]
altitudes_km = [550.0]

[[landcover]]
class_id = 17
beta_reflect = 0.6

[diffusion.schedule]
steps = 50
kind = { kind = "linear", beta_start = 1e-4, beta_end = 0.02 }
"#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.link.frequency_hz, 2.0e10);
        assert_eq!(cfg.sampling.k, 4);
        assert_eq!(cfg.sampling.preset, Preset::Los);
        assert_eq!(cfg.sampling.satellites.altitudes_km, vec![550.0]);
        assert_eq!(cfg.diffusion.schedule.steps, 50);
        assert_eq!(cfg.landcover_table().unwrap().get(17).unwrap().beta_reflect, 0.6);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.landcover.push(ClassOverride {
            class_id: 0,
            canopy_height: Some(20.0),
            beta_reflect: None,
        });
        let back = RunConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_name_the_section() {
        let cases = [
            ("[link]\nfrequency_hz = -1.0", "[link]"),
            ("[sampling]\nk = 0", "[sampling]"),
            ("[sampling]\nk = 10\nbudget = 5", "exceeds budget"),
            ("[reflection]\nw_slope = 0.9", "[reflection]"),
            ("[[landcover]]\nclass_id = 40", "[landcover]"),
            ("[diffusion]\ngamma = 0.0", "[diffusion]"),
            ("[validation]\ndem_min_m = 10.0\ndem_max_m = 0.0", "[validation]"),
            ("[terrain]\ntpi_small_radius = 20", "[terrain]"),
            ("bogus = 1", "bogus"),
        ];
        for (text, needle) in cases {
            let msg = RunConfig::from_toml_str(text).unwrap_err().to_string();
            assert!(msg.contains(needle), "{text:?} -> {msg}");
        }
    }

    #[test]
    fn load_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        std::fs::write(&file, "[paths]\ndem = \"tiles\"\nweather = \"/abs/w.csv\"\n").unwrap();
        let cfg = RunConfig::load(&file, None).unwrap();
        assert_eq!(cfg.paths.dem.as_deref(), Some(dir.path().join("tiles").as_path()));
        assert_eq!(cfg.paths.weather.as_deref(), Some(Path::new("/abs/w.csv")));
        let root = Path::new("/data");
        let cfg = RunConfig::load(&file, Some(root)).unwrap();
        assert_eq!(cfg.paths.dem.as_deref(), Some(Path::new("/data/tiles")));
    }
}
