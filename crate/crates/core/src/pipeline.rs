//! End-to-end coarse-to-fine parcellation orchestration.
//!
//! A run proceeds in fixed stages:
//!
//! 1. Load inputs: either fit tensors to a diffusion series and derive
//!    the configured scalar maps, or read precomputed maps.
//! 2. Resample the maps onto the analysis grid (the 256 cubed conformed
//!    space by default, or the native grid when conforming is disabled).
//! 3. Coarse stage: one segmenter scores background plus the seven
//!    coarse groups from the stacked map channels.
//! 4. Fine stages: for each of the five subdivided groups, the maps plus
//!    the coarse labeling (normalized by the largest group id) feed a
//!    group-specific segmenter that scores background plus that group's
//!    labels. Predictions are cleaned against the group's coarse mask.
//! 5. Assembly: per-group results merge with the white-matter
//!    passthrough labels, convert to FreeSurfer LUT ids, and resample
//!    back onto the native grid with nearest-neighbour interpolation.
//!
//! Stages run tile-serially with deterministic accumulation, so rerunning
//! a configuration reproduces the label volumes byte for byte; only the
//! timings in the run manifest differ.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::backend::{SegmenterBackend, SubprocessBackend};
use crate::config::{InputsConfig, PipelineConfig};
use crate::dwi::{read_bvals, read_bvecs, DwiSeries, GradientScheme};
use crate::eigen::eigendecompose;
use crate::error::{CoreError, Result};
use crate::maps::{derive_maps, MapCode, ScalarMapSet};
use crate::nifti::{read_series, read_volume, write_volume};
use crate::postprocess::clean_group_labels;
use crate::resample::{resample_to, Interpolation};
use crate::schema::{LabelSchema, LabelSpace, LabelVolume};
use crate::sliding::infer_volume;
use crate::tensor::fit_tensors;
use crate::transform::GridTransform;
use crate::volume::{Grid, Volume};

/// Output file names inside the configured output directory.
pub const COARSE_FILE: &str = "coarse.nii.gz";
pub const PARCELLATION_CONFORMED_FILE: &str = "parcellation_conformed.nii.gz";
pub const PARCELLATION_FILE: &str = "parcellation.nii.gz";
pub const MANIFEST_FILE: &str = "run_manifest.json";

/// The segmenters a run drives: one coarse, one per fine-stage group.
pub struct PipelineBackends {
    pub coarse: Box<dyn SegmenterBackend>,
    pub fine: BTreeMap<i32, Box<dyn SegmenterBackend>>,
}

/// Launches the configured subprocess backends with the channel and
/// class counts the schema dictates.
pub fn spawn_backends(config: &PipelineConfig, schema: &LabelSchema) -> Result<PipelineBackends> {
    let channels = config.map_codes.len();
    let coarse_classes = schema.max_group_id() as usize + 1;
    let coarse = SubprocessBackend::spawn(&config.backends.coarse.command, channels, coarse_classes)?;
    let mut fine: BTreeMap<i32, Box<dyn SegmenterBackend>> = BTreeMap::new();
    for (&gid, partition) in schema.partitions() {
        let spec = config.backends.fine.get(&gid).ok_or_else(|| {
            CoreError::Config(format!("no fine backend configured for group {gid}"))
        })?;
        let backend =
            SubprocessBackend::spawn(&spec.command, channels + 1, partition.len() + 1)?;
        fine.insert(gid, Box::new(backend));
    }
    Ok(PipelineBackends {
        coarse: Box::new(coarse),
        fine,
    })
}

/// Wall-clock timing of one pipeline stage.
#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub millis: u64,
}

/// Provenance record written next to the label outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub created_unix_seconds: u64,
    pub config_sha256: String,
    pub schema_name: String,
    pub map_codes: Vec<String>,
    pub analysis_dims: [usize; 3],
    pub stages: Vec<StageTiming>,
    pub outputs: Vec<String>,
}

/// In-memory results of a run; everything is also written to the output
/// directory.
#[derive(Debug)]
pub struct PipelineOutputs {
    /// Coarse group ids on the analysis grid.
    pub coarse: LabelVolume,
    /// Final labels as FreeSurfer LUT ids on the analysis grid.
    pub analysis_lut: LabelVolume,
    /// Final labels as FreeSurfer LUT ids on the native grid.
    pub native_lut: LabelVolume,
    pub manifest: RunManifest,
}

fn timed<T>(
    stages: &mut Vec<StageTiming>,
    name: &str,
    f: impl FnOnce() -> Result<T>,
) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    stages.push(StageTiming {
        stage: name.to_string(),
        millis: start.elapsed().as_millis() as u64,
    });
    Ok(out)
}

/// Loads the configured inputs as native-space scalar maps.
pub fn load_input_maps(config: &PipelineConfig) -> Result<ScalarMapSet> {
    match &config.inputs {
        InputsConfig::Dwi { dwi, bvals, bvecs } => {
            let frames = read_series(dwi)?;
            let scheme = GradientScheme::new(read_bvals(bvals)?, read_bvecs(bvecs)?)?;
            let series = DwiSeries::new(frames, scheme)?;
            let tensors = fit_tensors(&series)?;
            let eigen = eigendecompose(&tensors, false);
            derive_maps(&eigen, &config.map_codes)
        }
        InputsConfig::Maps { paths } => {
            let mut set = ScalarMapSet::new();
            for code in &config.map_codes {
                let path = paths.get(code).ok_or_else(|| {
                    CoreError::Config(format!("inputs.paths does not provide map {code}"))
                })?;
                set.insert(*code, read_volume(path)?.into_f32())?;
            }
            Ok(set)
        }
    }
}

struct TransformPair {
    /// Maps analysis-space world points into the native world frame.
    conformed_to_native: GridTransform,
    /// Maps native world points into the analysis-space frame.
    native_to_conformed: GridTransform,
}

fn load_transforms(config: &PipelineConfig) -> Result<TransformPair> {
    let displacement_hint = |missing: &str| {
        CoreError::InvalidTransform(format!(
            "cannot invert a displacement field; supply {missing} explicitly"
        ))
    };
    match (
        &config.transform_conformed_to_native,
        &config.transform_native_to_conformed,
    ) {
        (None, None) => Ok(TransformPair {
            conformed_to_native: GridTransform::Identity,
            native_to_conformed: GridTransform::Identity,
        }),
        (Some(c2n), None) => {
            let forward = GridTransform::load(c2n)?;
            let inverse = forward
                .inverted()
                .map_err(|_| displacement_hint("transform_native_to_conformed"))?;
            Ok(TransformPair {
                conformed_to_native: forward,
                native_to_conformed: inverse,
            })
        }
        (None, Some(n2c)) => {
            let forward = GridTransform::load(n2c)?;
            let inverse = forward
                .inverted()
                .map_err(|_| displacement_hint("transform_conformed_to_native"))?;
            Ok(TransformPair {
                conformed_to_native: inverse,
                native_to_conformed: forward,
            })
        }
        (Some(c2n), Some(n2c)) => Ok(TransformPair {
            conformed_to_native: GridTransform::load(c2n)?,
            native_to_conformed: GridTransform::load(n2c)?,
        }),
    }
}

/// The grid all inference runs on: the conformed space centred on the
/// (transformed) input centre, or the native grid itself.
fn analysis_grid(native: &Grid, conform: bool, native_to_conformed: &GridTransform) -> Grid {
    if conform {
        Grid::conformed_around(native_to_conformed.apply(native.world_center()))
    } else {
        native.clone()
    }
}

fn resample_maps(
    maps: &ScalarMapSet,
    target: &Grid,
    conformed_to_native: &GridTransform,
) -> Result<ScalarMapSet> {
    let mut out = ScalarMapSet::new();
    for (code, vol) in maps.iter() {
        out.insert(
            code,
            resample_to(vol, target, conformed_to_native, Interpolation::Trilinear)?,
        )?;
    }
    Ok(out)
}

fn stacked<'a>(maps: &'a ScalarMapSet, codes: &[MapCode]) -> Result<Vec<&'a Volume<f32>>> {
    codes.iter().map(|&c| maps.require(c)).collect()
}

fn run_coarse(
    maps: &ScalarMapSet,
    codes: &[MapCode],
    schema: &LabelSchema,
    backend: &mut dyn SegmenterBackend,
    sliding: &crate::sliding::SlidingWindowConfig,
) -> Result<LabelVolume> {
    let classes = schema.max_group_id() as usize + 1;
    if backend.classes() != classes {
        return Err(CoreError::Config(format!(
            "coarse backend scores {} classes, need {} (background plus {} groups)",
            backend.classes(),
            classes,
            schema.max_group_id()
        )));
    }
    let chans = stacked(maps, codes)?;
    let probs = infer_volume(&chans, backend, sliding)?;
    let table: Vec<i32> = (0..=schema.max_group_id()).collect();
    Ok(LabelVolume::new(
        probs.argmax_labels(&table)?,
        LabelSpace::Coarse,
    ))
}

fn group_mask(coarse: &LabelVolume, gid: i32) -> Volume<u8> {
    let mut mask = Volume::<u8>::zeros(coarse.volume.grid().clone());
    for (m, &v) in mask.data_mut().iter_mut().zip(coarse.volume.data()) {
        *m = u8::from(v == gid);
    }
    mask
}

#[allow(clippy::too_many_arguments)]
fn run_fine_group(
    maps: &ScalarMapSet,
    codes: &[MapCode],
    coarse: &LabelVolume,
    gid: i32,
    partition: &[i32],
    schema: &LabelSchema,
    backend: &mut dyn SegmenterBackend,
    sliding: &crate::sliding::SlidingWindowConfig,
    postprocess: &crate::postprocess::PostprocessConfig,
) -> Result<LabelVolume> {
    let classes = partition.len() + 1;
    if backend.classes() != classes {
        return Err(CoreError::Config(format!(
            "fine backend for group {gid} scores {} classes, need {} (background plus {} labels)",
            backend.classes(),
            classes,
            partition.len()
        )));
    }

    // The coarse labeling joins the input stack as one extra channel,
    // normalized by the largest group id.
    let grid = coarse.volume.grid().clone();
    let mut coarse_channel = Volume::<f32>::zeros(grid);
    let divisor = schema.max_group_id() as f32;
    for (o, &v) in coarse_channel
        .data_mut()
        .iter_mut()
        .zip(coarse.volume.data())
    {
        *o = v as f32 / divisor;
    }

    let mut chans = stacked(maps, codes)?;
    chans.push(&coarse_channel);
    let probs = infer_volume(&chans, backend, sliding)?;
    let mut table = vec![0i32];
    table.extend_from_slice(partition);
    let predicted = probs.argmax_labels(&table)?;

    let mask = group_mask(coarse, gid);
    let cleaned = clean_group_labels(&predicted, &mask, postprocess)?;
    Ok(LabelVolume::new(cleaned, LabelSpace::FineInternal))
}

fn unix_seconds() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CoreError + '_ {
    move |source| CoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Runs the full pipeline and writes labels plus a run manifest into
/// `config.output_dir`.
pub fn run_pipeline(
    config: &PipelineConfig,
    backends: &mut PipelineBackends,
) -> Result<PipelineOutputs> {
    config.validate()?;
    let schema = config.load_schema()?;
    config.validate_against_schema(&schema)?;
    let schema_groups: Vec<i32> = schema.partitions().keys().copied().collect();
    let backend_groups: Vec<i32> = backends.fine.keys().copied().collect();
    if schema_groups != backend_groups {
        return Err(CoreError::Config(format!(
            "fine backends supplied for groups {backend_groups:?}, schema needs {schema_groups:?}"
        )));
    }

    let mut stages = Vec::new();

    let native_maps = timed(&mut stages, "load-inputs", || load_input_maps(config))?;
    let native_grid = native_maps
        .grid()
        .ok_or_else(|| CoreError::Config("no input maps loaded".to_string()))?
        .clone();

    let transforms = load_transforms(config)?;
    let target = analysis_grid(&native_grid, config.conform, &transforms.native_to_conformed);
    let maps = if config.conform {
        timed(&mut stages, "conform", || {
            resample_maps(&native_maps, &target, &transforms.conformed_to_native)
        })?
    } else {
        native_maps
    };

    let coarse = timed(&mut stages, "coarse", || {
        run_coarse(
            &maps,
            &config.map_codes,
            &schema,
            backends.coarse.as_mut(),
            &config.sliding_window,
        )
    })?;

    let mut fine_by_group = BTreeMap::new();
    for (&gid, partition) in schema.partitions() {
        let backend = backends
            .fine
            .get_mut(&gid)
            .expect("checked against schema groups above");
        let cleaned = timed(&mut stages, &format!("fine-group-{gid}"), || {
            run_fine_group(
                &maps,
                &config.map_codes,
                &coarse,
                gid,
                partition,
                &schema,
                backend.as_mut(),
                &config.sliding_window,
                &config.postprocess,
            )
        })?;
        fine_by_group.insert(gid, cleaned);
    }

    let (analysis_lut, native_lut) = timed(&mut stages, "assemble", || {
        let merged = schema.merge_fine(&coarse, &fine_by_group)?;
        let analysis_lut = schema.to_freesurfer_lut(&merged)?;
        let native_volume = if config.conform {
            resample_to(
                &analysis_lut.volume,
                &native_grid,
                &transforms.native_to_conformed,
                Interpolation::Nearest,
            )?
        } else {
            analysis_lut.volume.clone()
        };
        Ok((
            analysis_lut,
            LabelVolume::new(native_volume, LabelSpace::FreeSurfer),
        ))
    })?;

    let outputs = timed(&mut stages, "write-outputs", || {
        std::fs::create_dir_all(&config.output_dir).map_err(io_error(&config.output_dir))?;
        write_volume(&coarse.volume, &config.output_dir.join(COARSE_FILE))?;
        write_volume(
            &analysis_lut.volume,
            &config.output_dir.join(PARCELLATION_CONFORMED_FILE),
        )?;
        write_volume(&native_lut.volume, &config.output_dir.join(PARCELLATION_FILE))?;
        Ok(vec![
            COARSE_FILE.to_string(),
            PARCELLATION_CONFORMED_FILE.to_string(),
            PARCELLATION_FILE.to_string(),
        ])
    })?;

    let manifest = RunManifest {
        created_unix_seconds: unix_seconds(),
        config_sha256: config.sha256(),
        schema_name: schema.name().to_string(),
        map_codes: config.map_codes.iter().map(|c| c.to_string()).collect(),
        analysis_dims: {
            let (nx, ny, nz) = target.dims();
            [nx, ny, nz]
        },
        stages,
        outputs,
    };
    crate::io_util::write_json(&config.output_dir.join(MANIFEST_FILE), &manifest)?;

    Ok(PipelineOutputs {
        coarse,
        analysis_lut,
        native_lut,
        manifest,
    })
}
