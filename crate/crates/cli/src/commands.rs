//! One function per subcommand. Each reads its inputs, runs the library
//! stage, writes the binary output plus a `<output>.json` report, and keeps
//! progress chatter on standard error.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};
use std::time::Instant;

use hpbrdf::{
    inpaint as inpaint_table, is_physical_gk, pca_table, read_archive_header, read_table_header,
    reconstruct_capture, render_direct, scalar_maps, simulate_sphere_capture, to_srgb, train,
    write_pfm, write_variance_csv, BandSelect, Capture, GkOptions, HpbrdfTable, LightPolarization,
    LookupMode, MlpConfig, MlpModel, MuellerImageStack, MuellerMatrix, RenderLight,
    RenderMaterial, SliceSpec, SphereScene, TableAxis, TableBuilder, TableDims, FLAG_PHYSICAL,
    FLAG_VALID,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::CliError;

fn report_path(output: &Path) -> PathBuf {
    PathBuf::from(format!("{}.json", output.display()))
}

fn write_report<T: Serialize>(path: &Path, report: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(report)
        .map_err(|e| CliError::Config(format!("report serialization: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn seconds(t: Instant) -> f64 {
    (t.elapsed().as_secs_f64() * 1000.0).round() / 1000.0
}

#[derive(Serialize)]
struct SimulateReport {
    command: &'static str,
    elapsed_s: f64,
    width: u32,
    height: u32,
    arms: usize,
    bands: usize,
    states_per_pixel: usize,
    intensities: usize,
    on_sphere_fraction: f64,
    output: String,
}

pub fn simulate(
    config: &PipelineConfig,
    output: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let output = output.unwrap_or_else(|| config.paths.capture.clone());
    let acq = config.acquisition.build();
    let grid = acq.wavelength_grid;
    let material = config.material.build(&grid)?;
    let scene = SphereScene::new(&config.scene, grid.count)?;
    eprintln!(
        "simulate: {}x{} pixels, {} arms, {} bands, {} states",
        scene.width,
        scene.height,
        acq.light_arm_angles.len(),
        grid.count,
        acq.illum_qwp_angles.len() * acq.analyzer_qwp_angles.len(),
    );
    let t = Instant::now();
    let capture = simulate_sphere_capture(&material, &scene, &acq, seed.unwrap_or(0))?;
    capture.write_archive(&output)?;
    let on_sphere = capture.validity.iter().filter(|&&v| v != 0).count();
    let report = SimulateReport {
        command: "simulate",
        elapsed_s: seconds(t),
        width: capture.dims.width,
        height: capture.dims.height,
        arms: capture.dims.arms,
        bands: capture.dims.bands,
        states_per_pixel: capture.dims.states(),
        intensities: capture.intensities.len(),
        on_sphere_fraction: on_sphere as f64 / capture.validity.len() as f64,
        output: output.display().to_string(),
    };
    write_report(&report_path(&output), &report)
}

#[derive(Serialize)]
struct ReconstructReport {
    command: &'static str,
    elapsed_s: f64,
    arms: usize,
    bands: usize,
    solved_fraction: f64,
    physical_fraction_of_solved: f64,
    mean_residual: f64,
    output: String,
}

pub fn reconstruct(
    config: &PipelineConfig,
    input: Option<PathBuf>,
    output: Option<PathBuf>,
) -> Result<(), CliError> {
    let input = input.unwrap_or_else(|| config.paths.capture.clone());
    let output = output.unwrap_or_else(|| config.paths.stack.clone());
    let capture = Capture::read_archive(&input)?;
    let acq = config.acquisition.build();
    let scene = SphereScene::new(&config.scene, capture.grid.count)?;
    eprintln!(
        "reconstruct: {} arms x {} bands x {}x{} pixels",
        capture.dims.arms, capture.dims.bands, capture.dims.width, capture.dims.height
    );
    let t = Instant::now();
    let stack = reconstruct_capture(&capture, &scene, &acq, &GkOptions::reconstruction())?;
    stack.write(&output)?;
    let solved = stack.flags.iter().filter(|&&f| f & FLAG_VALID != 0).count();
    let physical = stack.flags.iter().filter(|&&f| f & FLAG_PHYSICAL != 0).count();
    let residual_sum: f64 = stack
        .flags
        .iter()
        .zip(&stack.residual)
        .filter(|(f, _)| **f & FLAG_VALID != 0)
        .map(|(_, r)| r)
        .sum();
    let report = ReconstructReport {
        command: "reconstruct",
        elapsed_s: seconds(t),
        arms: stack.arms,
        bands: stack.bands,
        solved_fraction: solved as f64 / stack.flags.len() as f64,
        physical_fraction_of_solved: if solved > 0 {
            physical as f64 / solved as f64
        } else {
            0.0
        },
        mean_residual: if solved > 0 { residual_sum / solved as f64 } else { 0.0 },
        output: output.display().to_string(),
    };
    write_report(&report_path(&output), &report)
}

fn parse_bins(text: &str) -> Result<TableDims, CliError> {
    let parts: Vec<_> = text.split('x').collect();
    let parse = |s: &str| -> Result<usize, CliError> {
        s.parse()
            .map_err(|_| CliError::Usage(format!("--bins: '{s}' is not a positive integer")))
    };
    match parts.as_slice() {
        [b, p, d, h] => Ok(TableDims {
            bands: parse(b)?,
            phi_d: parse(p)?,
            theta_d: parse(d)?,
            theta_h: parse(h)?,
        }),
        _ => Err(CliError::Usage(format!(
            "--bins: expected bands x phi_d x theta_d x theta_h, got '{text}'"
        ))),
    }
}

#[derive(Serialize)]
struct TabulateReport {
    command: &'static str,
    elapsed_s: f64,
    dims: [usize; 4],
    bins: usize,
    splats_accepted: u64,
    splats_skipped: u64,
    filled_fraction: f64,
    output: String,
}

pub fn tabulate(
    config: &PipelineConfig,
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    bins: Option<String>,
) -> Result<(), CliError> {
    let input = input.unwrap_or_else(|| config.paths.stack.clone());
    let output = output.unwrap_or_else(|| config.paths.table.clone());
    let dims = match bins {
        Some(text) => parse_bins(&text)?,
        None => config.table.dims,
    };
    let stack = MuellerImageStack::read(&input)?;
    let scene = SphereScene::new(&config.scene, stack.bands)?;
    eprintln!(
        "tabulate: {} bins from {} arms x {} bands",
        dims.bins(),
        stack.arms,
        stack.bands
    );
    let t = Instant::now();
    let mut builder = TableBuilder::new(dims, stack.grid)?;
    let splat = builder.splat_stack(&stack, &scene)?;
    let table = builder.finalize();
    table.write(&output)?;
    let filled = table.mask.iter().filter(|&&m| m != 0).count();
    let report = TabulateReport {
        command: "tabulate",
        elapsed_s: seconds(t),
        dims: [dims.bands, dims.phi_d, dims.theta_d, dims.theta_h],
        bins: dims.bins(),
        splats_accepted: splat.accepted,
        splats_skipped: splat.skipped,
        filled_fraction: filled as f64 / dims.bins() as f64,
        output: output.display().to_string(),
    };
    write_report(&report_path(&output), &report)
}

fn parse_sigma(text: &str) -> Result<[f64; 3], CliError> {
    let parts: Vec<_> = text.split(',').collect();
    let parse = |s: &str| -> Result<f64, CliError> {
        s.trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("--sigma: '{s}' is not a number")))
    };
    match parts.as_slice() {
        [p, d, h] => Ok([parse(p)?, parse(d)?, parse(h)?]),
        _ => Err(CliError::Usage(format!(
            "--sigma: expected three comma-separated values, got '{text}'"
        ))),
    }
}

#[derive(Serialize)]
struct InpaintReport {
    command: &'static str,
    elapsed_s: f64,
    bins: usize,
    sigma: [f64; 3],
    filled_before: usize,
    filled_after: usize,
    output: String,
}

pub fn inpaint(
    config: &PipelineConfig,
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    sigma: Option<String>,
) -> Result<(), CliError> {
    let input = input.unwrap_or_else(|| config.paths.table.clone());
    let output = output.unwrap_or_else(|| config.paths.inpainted.clone());
    let sigma = match sigma {
        Some(text) => parse_sigma(&text)?,
        None => config.inpaint.sigma,
    };
    let table = HpbrdfTable::read(&input)?;
    let filled_before = table.mask.iter().filter(|&&m| m != 0).count();
    eprintln!(
        "inpaint: {} of {} bins filled, sigma {:?}",
        filled_before,
        table.dims.bins(),
        sigma
    );
    let t = Instant::now();
    let filled_table = inpaint_table(&table, sigma)?;
    filled_table.write(&output)?;
    let filled_after = filled_table.mask.iter().filter(|&&m| m != 0).count();
    let report = InpaintReport {
        command: "inpaint",
        elapsed_s: seconds(t),
        bins: table.dims.bins(),
        sigma,
        filled_before,
        filled_after,
        output: output.display().to_string(),
    };
    write_report(&report_path(&output), &report)
}

#[derive(Serialize)]
struct ValidateReport {
    command: &'static str,
    elapsed_s: f64,
    matrices: usize,
    solved: usize,
    physical: usize,
    physical_percent: f64,
    stored_flags_agree: bool,
}

pub fn validate(config: &PipelineConfig, input: Option<PathBuf>) -> Result<(), CliError> {
    let input = input.unwrap_or_else(|| config.paths.stack.clone());
    let stack = MuellerImageStack::read(&input)?;
    eprintln!("validate: {} matrices", stack.flags.len());
    let t = Instant::now();
    let options = GkOptions::reconstruction();
    let physical = stack
        .data
        .par_chunks(16)
        .zip(stack.flags.par_iter())
        .filter(|(_, &flags)| flags & FLAG_VALID != 0)
        .filter(|(entries, _)| {
            let mut rows = [[0.0; 4]; 4];
            for r in 0..4 {
                rows[r].copy_from_slice(&entries[4 * r..4 * r + 4]);
            }
            is_physical_gk(&MuellerMatrix::from_rows(rows), &options)
                .map(|d| d.physical)
                .unwrap_or(false)
        })
        .count();
    let solved = stack.flags.iter().filter(|&&f| f & FLAG_VALID != 0).count();
    let stored = stack.flags.iter().filter(|&&f| f & FLAG_PHYSICAL != 0).count();
    let percent = if solved > 0 {
        physical as f64 / solved as f64 * 100.0
    } else {
        0.0
    };
    println!("physically valid: {percent:.2}% ({physical} of {solved} solved matrices)");
    let report = ValidateReport {
        command: "validate",
        elapsed_s: seconds(t),
        matrices: stack.flags.len(),
        solved,
        physical,
        physical_percent: percent,
        stored_flags_agree: stored == physical,
    };
    write_report(&PathBuf::from(format!("{}.validity.json", input.display())), &report)
}

#[derive(Serialize)]
struct DecomposeReport {
    command: &'static str,
    elapsed_s: f64,
    arm: usize,
    band: usize,
    width: u32,
    height: u32,
    finite_fraction: f64,
    outputs: Vec<String>,
}

pub fn decompose(
    config: &PipelineConfig,
    input: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    arm: usize,
    band: usize,
) -> Result<(), CliError> {
    let input = input.unwrap_or_else(|| config.paths.stack.clone());
    let out_dir = out_dir.unwrap_or_else(|| config.paths.decompose_dir.clone());
    let stack = MuellerImageStack::read(&input)?;
    if arm >= stack.arms || band >= stack.bands {
        return Err(CliError::Usage(format!(
            "--arm {arm} --band {band} out of range for {} arms x {} bands",
            stack.arms, stack.bands
        )));
    }
    eprintln!("decompose: {} matrices", stack.flags.len());
    let t = Instant::now();
    let maps = scalar_maps(&stack);
    fs::create_dir_all(&out_dir)?;
    let pixels = (maps.width * maps.height) as usize;
    let offset = (arm * maps.bands + band) * pixels;
    let mut outputs = Vec::new();
    let mut finite = 0usize;
    for (name, plane) in [
        ("diattenuation", &maps.diattenuation),
        ("polarizance", &maps.polarizance),
        ("retardance", &maps.retardance),
        ("preservation", &maps.preservation),
    ] {
        let path = out_dir.join(format!("{name}.pfm"));
        let values: Vec<f64> =
            plane[offset..offset + pixels].iter().map(|&v| v as f64).collect();
        finite += values.iter().filter(|v| v.is_finite()).count();
        write_pfm(BufWriter::new(File::create(&path)?), maps.width, maps.height, &values)?;
        outputs.push(path.display().to_string());
    }
    let report = DecomposeReport {
        command: "decompose",
        elapsed_s: seconds(t),
        arm,
        band,
        width: maps.width,
        height: maps.height,
        finite_fraction: finite as f64 / (4 * pixels) as f64,
        outputs,
    };
    write_report(&out_dir.join("report.json"), &report)
}

#[derive(Serialize)]
struct PcaReport {
    command: &'static str,
    elapsed_s: f64,
    rows: String,
    cols: String,
    samples: usize,
    components: usize,
    explained_variance: Vec<f64>,
    cumulative_fraction: Vec<f64>,
    output: String,
}

pub fn pca(
    config: &PipelineConfig,
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    rows: TableAxis,
    cols: TableAxis,
    components: usize,
) -> Result<(), CliError> {
    let input = input.unwrap_or_else(|| config.paths.table.clone());
    let output = output.unwrap_or_else(|| config.paths.pca_csv.clone());
    let table = HpbrdfTable::read(&input)?;
    eprintln!("pca: {components} components over {rows:?} x {cols:?} slices");
    let t = Instant::now();
    let result = pca_table(&table, SliceSpec { rows, cols }, components)?;
    write_variance_csv(&result, BufWriter::new(File::create(&output)?))?;
    let report = PcaReport {
        command: "pca",
        elapsed_s: seconds(t),
        rows: format!("{rows:?}"),
        cols: format!("{cols:?}"),
        samples: result.mean.len(),
        components: result.n_components(),
        explained_variance: result.explained_variance.clone(),
        cumulative_fraction: (1..=result.n_components())
            .map(|k| result.cumulative_fraction(k))
            .collect(),
        output: output.display().to_string(),
    };
    write_report(&report_path(&output), &report)
}

#[derive(Serialize)]
struct RenderReport {
    command: &'static str,
    elapsed_s: f64,
    width: u32,
    height: u32,
    bands: usize,
    material: &'static str,
    outputs: Vec<String>,
}

pub fn render(
    scene_path: PathBuf,
    table_path: Option<PathBuf>,
    nearest: bool,
    out_dir: Option<PathBuf>,
    band: Option<usize>,
) -> Result<(), CliError> {
    let (config, _) = PipelineConfig::load(Some(&scene_path))?;
    let out_dir = out_dir.unwrap_or_else(|| config.paths.render_dir.clone());
    let grid = config.acquisition.wavelengths;
    let scene_config = config.render.scene.as_ref().unwrap_or(&config.scene);
    let scene = SphereScene::new(scene_config, grid.count)?;
    let light = RenderLight {
        arm_angle: config.render.arm_deg.to_radians(),
        radiance: config.render.radiance.sample(&grid)?,
        polarization: match config.render.linear_polarizer_deg {
            Some(deg) => LightPolarization::Linear { angle: deg.to_radians() },
            None => LightPolarization::Unpolarized,
        },
    };

    let table_storage;
    let analytic_storage;
    let (material, material_name) = match &table_path {
        Some(path) => {
            table_storage = HpbrdfTable::read(path)?;
            let mode = if nearest { LookupMode::Nearest } else { LookupMode::Trilinear };
            (RenderMaterial::Table(&table_storage, mode), "table")
        }
        None => {
            analytic_storage = config.material.build(&grid)?;
            (RenderMaterial::Analytic(&analytic_storage), "analytic")
        }
    };
    eprintln!(
        "render: {}x{} at {} bands from the {material_name} material",
        scene.width, scene.height, grid.count
    );
    let t = Instant::now();
    let image = render_direct(&scene, &light, &material, grid)?;
    fs::create_dir_all(&out_dir)?;
    let mut outputs = Vec::new();

    let nir = hpbrdf::nir_bands(&grid);
    if nir.len() < grid.count {
        let path = out_dir.join("color.png");
        to_srgb(&image, config.render.gamma)?
            .save(&path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        outputs.push(path.display().to_string());
    }
    for b in nir {
        let lambda = grid.start_nm + b as f64 * grid.step_nm;
        let path = out_dir.join(format!("nir_{lambda:.0}nm.png"));
        hpbrdf::band_grayscale(&image, b, config.render.gamma)?
            .save(&path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        outputs.push(path.display().to_string());
    }
    let select = match band {
        Some(b) => BandSelect::Band(b),
        None => BandSelect::Average,
    };
    for (name, plane) in [
        ("dop", hpbrdf::dop_map(&image, select)?),
        ("aolp", hpbrdf::aolp_map(&image, select)?),
    ] {
        let path = out_dir.join(format!("{name}.pfm"));
        write_pfm(BufWriter::new(File::create(&path)?), image.width, image.height, &plane)?;
        outputs.push(path.display().to_string());
    }
    let report = RenderReport {
        command: "render",
        elapsed_s: seconds(t),
        width: image.width,
        height: image.height,
        bands: grid.count,
        material: material_name,
        outputs,
    };
    write_report(&out_dir.join("report.json"), &report)
}

fn parse_layers(text: &str, pe_frequencies: usize) -> Result<MlpConfig, CliError> {
    let parts: Vec<_> = text.split('x').collect();
    let parse = |s: &str| -> Result<usize, CliError> {
        s.parse()
            .map_err(|_| CliError::Usage(format!("--layers: '{s}' is not a positive integer")))
    };
    match parts.as_slice() {
        [l, w] => Ok(MlpConfig {
            hidden_layers: parse(l)?,
            hidden_width: parse(w)?,
            pe_frequencies,
        }),
        _ => Err(CliError::Usage(format!(
            "--layers: expected hidden_layers x width, got '{text}'"
        ))),
    }
}

#[derive(Serialize)]
struct FitMlpReport {
    command: &'static str,
    elapsed_s: f64,
    hidden_layers: usize,
    hidden_width: usize,
    pe_frequencies: usize,
    parameters: usize,
    iterations: usize,
    batch: usize,
    final_loss: f64,
    eval_mse: f64,
    serialized_bytes: u64,
    compression_vs_full_table: f64,
    output: String,
}

pub fn fit_mlp(
    config: &PipelineConfig,
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    layers: Option<String>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let input = input.unwrap_or_else(|| config.paths.table.clone());
    let output = output.unwrap_or_else(|| config.paths.model.clone());
    let model_config = match layers {
        Some(text) => parse_layers(&text, config.train.model.pe_frequencies)?,
        None => config.train.model,
    };
    let table = HpbrdfTable::read(&input)?;
    let grid = table.grid;
    let lambda_max = grid.start_nm + grid.step_nm * (grid.count.saturating_sub(1)) as f64;
    let seed = seed.unwrap_or(config.train.seed);
    let train_config = config.train.train_config(seed);
    let mut model = MlpModel::new(&model_config, grid.start_nm, lambda_max, seed)?;
    eprintln!(
        "fit-mlp: {} parameters, {} iterations of batch {}",
        model.param_count(),
        train_config.iterations,
        train_config.batch
    );
    let t = Instant::now();
    let outcome = train(&mut model, &table, &train_config)?;
    let eval_mse = hpbrdf::evaluate_mse(&model, &table, 20_000, seed ^ 0x4556_414c)?;
    model.write(BufWriter::new(File::create(&output)?))?;
    let report = FitMlpReport {
        command: "fit-mlp",
        elapsed_s: seconds(t),
        hidden_layers: model_config.hidden_layers,
        hidden_width: model_config.hidden_width,
        pe_frequencies: model_config.pe_frequencies,
        parameters: model.param_count(),
        iterations: train_config.iterations,
        batch: train_config.batch,
        final_loss: *outcome.loss_history.last().unwrap_or(&f64::NAN),
        eval_mse,
        serialized_bytes: model.serialized_bytes(),
        compression_vs_full_table: TableDims::full().payload_bytes() as f64
            / model.serialized_bytes() as f64,
        output: output.display().to_string(),
    };
    write_report(&report_path(&output), &report)
}

#[derive(Serialize)]
#[serde(untagged)]
enum InfoReport {
    Capture {
        kind: &'static str,
        arms: usize,
        bands: usize,
        width: u32,
        height: u32,
        illum_states: usize,
        analyzer_states: usize,
        start_nm: f64,
        step_nm: f64,
    },
    Stack {
        kind: &'static str,
        arms: usize,
        bands: usize,
        width: u32,
        height: u32,
        start_nm: f64,
        step_nm: f64,
    },
    Table {
        kind: &'static str,
        bands: usize,
        phi_d: usize,
        theta_d: usize,
        theta_h: usize,
        bins: usize,
        start_nm: f64,
        step_nm: f64,
        payload_bytes: u64,
    },
    Model {
        kind: &'static str,
        pe_frequencies: usize,
        layer_sizes: Vec<[usize; 2]>,
        parameters: usize,
        lambda_min_nm: f64,
        lambda_max_nm: f64,
        serialized_bytes: u64,
    },
}

pub fn info(file: PathBuf) -> Result<(), CliError> {
    let mut magic = [0u8; 4];
    File::open(&file)?.read_exact(&mut magic)?;
    let report = match &magic {
        b"HPMA" => {
            let (dims, grid) = read_archive_header(&file)?;
            InfoReport::Capture {
                kind: "capture",
                arms: dims.arms,
                bands: dims.bands,
                width: dims.width,
                height: dims.height,
                illum_states: dims.illum_states,
                analyzer_states: dims.analyzer_states,
                start_nm: grid.start_nm,
                step_nm: grid.step_nm,
            }
        }
        b"HPMI" => {
            let header = MuellerImageStack::read_header(&file)?;
            InfoReport::Stack {
                kind: "stack",
                arms: header.arms,
                bands: header.bands,
                width: header.width,
                height: header.height,
                start_nm: header.grid.start_nm,
                step_nm: header.grid.step_nm,
            }
        }
        b"HPBT" => {
            let (dims, grid) = read_table_header(&file)?;
            InfoReport::Table {
                kind: "table",
                bands: dims.bands,
                phi_d: dims.phi_d,
                theta_d: dims.theta_d,
                theta_h: dims.theta_h,
                bins: dims.bins(),
                start_nm: grid.start_nm,
                step_nm: grid.step_nm,
                payload_bytes: dims.payload_bytes(),
            }
        }
        b"HPNN" => {
            let model = MlpModel::read(BufReader::new(File::open(&file)?))?;
            InfoReport::Model {
                kind: "model",
                pe_frequencies: model.pe_frequencies,
                layer_sizes: model.layers.iter().map(|l| [l.inputs, l.outputs]).collect(),
                parameters: model.param_count(),
                lambda_min_nm: model.lambda_min,
                lambda_max_nm: model.lambda_max,
                serialized_bytes: model.serialized_bytes(),
            }
        }
        other => {
            return Err(CliError::Usage(format!(
                "{}: unrecognized magic {:?}",
                file.display(),
                String::from_utf8_lossy(other)
            )))
        }
    };
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Config(format!("report serialization: {e}")))?;
    text.push('\n');
    print!("{text}");
    Ok(())
}
