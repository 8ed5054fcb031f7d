//! Hyperspectral polarimetric BRDF toolkit.
//!
//! Simulates a dual-rotating-retarder ellipsometer over a spectral grid,
//! reconstructs per-pixel Mueller matrices by least squares, accumulates them
//! into a Rusinkiewicz-parameterized table with mask-aware inpainting, and
//! analyzes the result (physical-validity testing, polar decomposition, PCA,
//! polarimetric rendering, neural compression).

pub mod analytic;
pub mod eigen4;
pub mod ellipsometer;
pub mod frame;
pub mod fresnel;
pub mod inpaint;
pub mod luchipman;
pub mod mlp;
pub mod mueller;
pub mod pca;
pub mod reconstruct;
pub mod render;
pub mod rusinkiewicz;
pub mod scene;
pub mod spectrum;
pub mod table;

pub use analytic::{AnalyticPbrdf, MaterialSpec, PbrdfError};
pub use ellipsometer::{
    emitted_stokes, read_archive_header, simulate_pixel, simulate_sphere_capture,
    AcquisitionConfig, Capture, CaptureDims, CaptureError, OcclusionMasks, RectRegion,
};
pub use reconstruct::{
    build_design_matrix, reconstruct_capture, solve_mueller, DesignMatrix, MuellerImageStack,
    ReconstructError, StackHeader, FLAG_PHYSICAL, FLAG_VALID,
};
pub use inpaint::{inpaint, DEFAULT_INPAINT_SIGMA};
pub use luchipman::{
    diattenuation, lu_chipman, polarizance, preservation, retardance_scalar, scalar_maps,
    AnalysisError, LuChipmanFactors, ScalarMaps,
};
pub use mlp::{
    evaluate_mse, train, MlpConfig, MlpModel, NeuralError, TrainConfig, TrainReport,
};
pub use pca::{
    pca_samples, pca_table, write_variance_csv, PcaError, PcaResult, SliceSpec, TableAxis,
};
pub use render::{
    aolp_map, apply_polarizer, band_grayscale, cie_xyz_cmf, dop_map, mueller_image, nir_bands,
    read_pfm, render_direct, to_srgb, write_pfm, BandSelect, LightPolarization, RenderError,
    RenderLight, RenderMaterial, SpectralStokesImage, VISIBLE_CUTOFF_NM,
};
pub use rusinkiewicz::{
    from_rusinkiewicz, to_rusinkiewicz, DegenerateHalfVector, RusinkiewiczCoord,
};
pub use scene::{CameraConfig, SceneError, SphereScene, SphereSceneConfig};
pub use table::{
    read_table_header, HpbrdfTable, LookupMode, SplatReport, TableBuilder, TableDims, TableError,
};
pub use frame::{frame_transfer, PolarizationFrame, Vec3};
pub use fresnel::{
    fresnel_coefficients, fresnel_reflection_mueller, MaterialError, SpectralIor,
};
pub use mueller::{
    dop, frame_rotation, is_admissible, is_physical_gk, lp_mueller, retarder_mueller,
    GkDiagnostics, GkOptions, MuellerError, MuellerMatrix, StokesVector,
};
pub use spectrum::{Spectrum, SpectrumError, WavelengthGrid};
