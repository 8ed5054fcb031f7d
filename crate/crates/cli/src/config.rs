//! Pipeline configuration file.
//!
//! One TOML document drives every subcommand. Angles are written in degrees
//! and converted to radians at load time; spectral quantities are either a
//! single number (constant across bands) or an array with one entry per
//! band. Every key is optional and falls back to the defaults below; unknown
//! keys are rejected. `configs/default.toml` spells out the complete set.

use std::path::{Path, PathBuf};

use hpbrdf::{
    AcquisitionConfig, MaterialSpec, MlpConfig, OcclusionMasks, Spectrum, SphereSceneConfig,
    TableDims, TrainConfig, Vec3, WavelengthGrid, DEFAULT_INPAINT_SIGMA,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_ENV: &str = "HPBRDF_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: PathsSection,
    pub acquisition: AcquisitionSection,
    pub scene: SphereSceneConfig,
    pub material: MaterialSpec,
    pub table: TableSection,
    pub inpaint: InpaintSection,
    pub render: RenderSection,
    pub train: TrainSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PathsSection::default(),
            acquisition: AcquisitionSection::default(),
            scene: SphereSceneConfig::default(),
            material: default_material(),
            table: TableSection::default(),
            inpaint: InpaintSection::default(),
            render: RenderSection::default(),
            train: TrainSection::default(),
        }
    }
}

fn default_material() -> MaterialSpec {
    MaterialSpec {
        eta: Spectrum::Constant(1.5),
        kappa: Spectrum::Constant(0.0),
        albedo: Spectrum::Constant(0.5),
        specular_scale: 1.0,
        lobe_width: 0.05,
    }
}

impl PipelineConfig {
    /// Explicit path, then the `HPBRDF_CONFIG` environment variable, then
    /// built-in defaults. Returns the source path when a file was read.
    pub fn load(explicit: Option<&Path>) -> Result<(Self, Option<PathBuf>), CliError> {
        let path = explicit
            .map(PathBuf::from)
            .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        let Some(path) = path else {
            return Ok((Self::default(), None));
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let config = toml::from_str(&text).map_err(|e| {
            let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            CliError::Config(format!("{}: {msg}", path.display()))
        })?;
        Ok((config, Some(path)))
    }
}

/// Default input and output locations, used when a subcommand's path flags
/// are omitted. All relative to the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub capture: PathBuf,
    pub stack: PathBuf,
    pub table: PathBuf,
    pub inpainted: PathBuf,
    pub model: PathBuf,
    pub render_dir: PathBuf,
    pub pca_csv: PathBuf,
    pub decompose_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            capture: "capture.hpma".into(),
            stack: "stack.hpmi".into(),
            table: "table.hpbt".into(),
            inpainted: "inpainted.hpbt".into(),
            model: "model.hpnn".into(),
            render_dir: "renders".into(),
            pca_csv: "variance.csv".into(),
            decompose_dir: "maps".into(),
        }
    }
}

/// Virtual acquisition protocol: rotation angle sets of the two retarders,
/// light arm positions, spectral sampling and measurement-model switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionSection {
    pub illum_qwp_deg: Vec<f64>,
    pub analyzer_qwp_deg: Vec<f64>,
    pub light_arm_deg: Vec<f64>,
    pub wavelengths: WavelengthGrid,
    pub illum_retardance_deg: Spectrum,
    pub analyzer_retardance_deg: Spectrum,
    pub light_spectrum: Spectrum,
    pub noise_rel: f64,
    pub apply_falloff: bool,
    pub apply_foreshortening: bool,
    pub frame_reference: [f64; 3],
    pub occlusion: Option<OcclusionMasks>,
}

impl Default for AcquisitionSection {
    fn default() -> Self {
        Self {
            illum_qwp_deg: vec![30.0, -45.0, 60.0, -90.0],
            analyzer_qwp_deg: (0..6).map(|i| 30.0 * i as f64).collect(),
            light_arm_deg: (0..25).map(|i| 40.0 + 5.0 * i as f64).collect(),
            wavelengths: WavelengthGrid::default(),
            illum_retardance_deg: Spectrum::Constant(90.0),
            analyzer_retardance_deg: Spectrum::Constant(90.0),
            light_spectrum: Spectrum::Constant(1.0),
            noise_rel: 0.0,
            apply_falloff: true,
            apply_foreshortening: true,
            frame_reference: [0.0, 1.0, 0.0],
            occlusion: None,
        }
    }
}

fn spectrum_to_radians(s: &Spectrum) -> Spectrum {
    match s {
        Spectrum::Constant(v) => Spectrum::Constant(v.to_radians()),
        Spectrum::PerBand(vs) => Spectrum::PerBand(vs.iter().map(|v| v.to_radians()).collect()),
    }
}

impl AcquisitionSection {
    pub fn build(&self) -> AcquisitionConfig {
        let rad = |v: &Vec<f64>| v.iter().map(|d| d.to_radians()).collect();
        AcquisitionConfig {
            illum_qwp_angles: rad(&self.illum_qwp_deg),
            analyzer_qwp_angles: rad(&self.analyzer_qwp_deg),
            light_arm_angles: rad(&self.light_arm_deg),
            wavelength_grid: self.wavelengths,
            illum_retardance: spectrum_to_radians(&self.illum_retardance_deg),
            analyzer_retardance: spectrum_to_radians(&self.analyzer_retardance_deg),
            light_spectrum: self.light_spectrum.clone(),
            noise_rel: self.noise_rel,
            apply_falloff: self.apply_falloff,
            apply_foreshortening: self.apply_foreshortening,
            frame_reference: Vec3::new(
                self.frame_reference[0],
                self.frame_reference[1],
                self.frame_reference[2],
            ),
            occlusion: self.occlusion.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TableSection {
    pub dims: TableDims,
}

impl Default for TableSection {
    fn default() -> Self {
        Self { dims: TableDims::full() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintSection {
    pub sigma: [f64; 3],
}

impl Default for InpaintSection {
    fn default() -> Self {
        Self { sigma: DEFAULT_INPAINT_SIGMA }
    }
}

/// Rendering setup. The scene defaults to the acquisition scene; a
/// `[render.scene]` block overrides it wholesale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSection {
    pub arm_deg: f64,
    pub radiance: Spectrum,
    /// Fully linearly polarized illumination at this angle; absent means
    /// unpolarized light.
    pub linear_polarizer_deg: Option<f64>,
    pub gamma: f64,
    pub scene: Option<SphereSceneConfig>,
}

impl Default for RenderSection {
    fn default() -> Self {
        Self {
            arm_deg: 80.0,
            radiance: Spectrum::Constant(1.0),
            linear_polarizer_deg: None,
            gamma: 2.2,
            scene: None,
        }
    }
}

/// Model shape plus optimizer settings for `fit-mlp`. The defaults are the
/// reference-scale run; cut `iterations` and `batch` way down for desk work
/// (see `configs/desk.toml`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub model: MlpConfig,
    pub batch: usize,
    pub step: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let run = TrainConfig::default();
        Self {
            model: MlpConfig::default(),
            batch: run.batch,
            step: run.step,
            iterations: run.iterations,
            seed: run.seed,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch: self.batch,
            step: self.step,
            iterations: self.iterations,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_default_file_matches_built_in_defaults() {
        let text = include_str!("../../../configs/default.toml");
        let parsed: PipelineConfig = toml::from_str(text).unwrap();
        assert_eq!(parsed, PipelineConfig::default());
    }

    #[test]
    fn desk_file_parses_and_stays_desk_sized() {
        let text = include_str!("../../../configs/desk.toml");
        let parsed: PipelineConfig = toml::from_str(text).unwrap();
        assert_eq!(parsed.table.dims, TableDims::desk());
        assert!(parsed.train.iterations <= 10_000);
        assert_eq!(parsed.acquisition.wavelengths.count, 16);
        assert_eq!(parsed.scene.camera.width, 128);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<PipelineConfig>("laser_power = 9000").unwrap_err();
        assert!(err.to_string().contains("laser_power"));
        assert!(toml::from_str::<PipelineConfig>("[acquisition]\nqwp = 1").is_err());
    }

    #[test]
    fn angles_convert_to_radians_on_build() {
        let section = AcquisitionSection::default();
        let built = section.build();
        assert!((built.illum_qwp_angles[0] - 30f64.to_radians()).abs() < 1e-15);
        assert!((built.light_arm_angles[24] - 160f64.to_radians()).abs() < 1e-15);
        match built.illum_retardance {
            Spectrum::Constant(v) => {
                assert!((v - std::f64::consts::FRAC_PI_2).abs() < 1e-15)
            }
            _ => panic!("expected constant retardance"),
        }
        assert_eq!(built, AcquisitionConfig::default());
    }

    #[test]
    fn partial_files_inherit_the_rest() {
        let cfg: PipelineConfig =
            toml::from_str("[table]\ndims = { bands = 4, phi_d = 10, theta_d = 5, theta_h = 5 }")
                .unwrap();
        assert_eq!(cfg.table.dims.bands, 4);
        assert_eq!(cfg.acquisition.wavelengths.count, 68);
        assert_eq!(cfg.paths.capture, PathBuf::from("capture.hpma"));
    }
}
