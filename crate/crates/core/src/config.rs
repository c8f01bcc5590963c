//! Declarative run configuration for the parcellation pipeline.
//!
//! A configuration is a single JSON document naming the inputs, the label
//! schema, the segmenter backend commands, and the tiling and cleanup
//! parameters. Field defaults follow the pipeline's standard operating
//! point: four input channels (FA, trace, spherical coefficient, first
//! eigenvalue), half-overlap 128-voxel patches, 26-connected component
//! filtering, and conforming to the 256 cubed analysis space.
//!
//! ```json
//! {
//!   "inputs": { "kind": "dwi", "dwi": "dwi.nii.gz",
//!               "bvals": "dwi.bval", "bvecs": "dwi.bvec" },
//!   "backends": {
//!     "coarse": { "command": ["coarse-segmenter"] },
//!     "fine": { "3": { "command": ["fine-segmenter", "--group", "3"] },
//!               "4": { "command": ["fine-segmenter", "--group", "4"] },
//!               "5": { "command": ["fine-segmenter", "--group", "5"] },
//!               "6": { "command": ["fine-segmenter", "--group", "6"] },
//!               "7": { "command": ["fine-segmenter", "--group", "7"] } }
//!   },
//!   "output_dir": "out"
//! }
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::maps::MapCode;
use crate::postprocess::PostprocessConfig;
use crate::schema::LabelSchema;
use crate::sliding::SlidingWindowConfig;

/// Where the input channels come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InputsConfig {
    /// A diffusion series; tensors are fitted and maps derived.
    Dwi {
        dwi: PathBuf,
        bvals: PathBuf,
        bvecs: PathBuf,
    },
    /// Precomputed scalar maps, keyed by map code.
    Maps { paths: BTreeMap<MapCode, PathBuf> },
}

/// How to launch one segmenter process.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    /// Program and arguments.
    pub command: Vec<String>,
}

/// Backend commands for the coarse stage and each fine-stage group.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub coarse: BackendSpec,
    /// Keyed by coarse group id.
    pub fine: BTreeMap<i32, BackendSpec>,
}

fn default_map_codes() -> Vec<MapCode> {
    vec![MapCode::Fa, MapCode::Tr, MapCode::Cs, MapCode::E1]
}

fn default_true() -> bool {
    true
}

/// Full pipeline run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub inputs: InputsConfig,

    /// Scalar maps stacked as segmenter input channels, in order.
    #[serde(default = "default_map_codes")]
    pub map_codes: Vec<MapCode>,

    /// Path to a label schema JSON; the bundled schema when omitted.
    #[serde(default)]
    pub schema: Option<PathBuf>,

    /// Resample inputs into the 256 cubed, 1 mm, LIA analysis space.
    /// Disable for inputs that are already on the desired analysis grid.
    #[serde(default = "default_true")]
    pub conform: bool,

    /// Transform mapping analysis-space world points to native world
    /// points, applied while resampling inputs onto the analysis grid.
    /// For an affine the opposite direction is derived by inversion;
    /// displacement fields require both directions.
    #[serde(default)]
    pub transform_conformed_to_native: Option<PathBuf>,

    /// Transform mapping native world points to analysis-space world
    /// points, applied while resampling labels back onto the native grid.
    #[serde(default)]
    pub transform_native_to_conformed: Option<PathBuf>,

    pub backends: BackendsConfig,

    #[serde(default)]
    pub sliding_window: SlidingWindowConfig,

    #[serde(default)]
    pub postprocess: PostprocessConfig,

    pub output_dir: PathBuf,
}

impl PipelineConfig {
    /// Reads and structurally validates a configuration file.
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path).map_err(|source| CoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Checks everything that can be checked without touching the
    /// filesystem or the schema.
    pub fn validate(&self) -> Result<()> {
        if self.map_codes.is_empty() {
            return Err(CoreError::Config("map_codes must not be empty".to_string()));
        }
        let mut seen = Vec::new();
        for code in &self.map_codes {
            if seen.contains(code) {
                return Err(CoreError::Config(format!(
                    "map code {code} listed more than once"
                )));
            }
            seen.push(*code);
        }
        if let InputsConfig::Maps { paths } = &self.inputs {
            for code in &self.map_codes {
                if !paths.contains_key(code) {
                    return Err(CoreError::Config(format!(
                        "map_codes requests {code} but inputs.paths does not provide it"
                    )));
                }
            }
        }
        if self.backends.coarse.command.is_empty() {
            return Err(CoreError::Config("coarse backend command is empty".to_string()));
        }
        for (gid, spec) in &self.backends.fine {
            if spec.command.is_empty() {
                return Err(CoreError::Config(format!(
                    "fine backend command for group {gid} is empty"
                )));
            }
        }
        self.sliding_window.validate()?;
        Ok(())
    }

    /// Checks schema-dependent constraints: one fine backend per
    /// fine-stage group, no extras.
    pub fn validate_against_schema(&self, schema: &LabelSchema) -> Result<()> {
        let wanted: Vec<i32> = schema.partitions().keys().copied().collect();
        let configured: Vec<i32> = self.backends.fine.keys().copied().collect();
        if wanted != configured {
            return Err(CoreError::Config(format!(
                "fine backends configured for groups {configured:?}, schema {:?} needs exactly {wanted:?}",
                schema.name()
            )));
        }
        Ok(())
    }

    /// Loads the configured schema, or the bundled one.
    pub fn load_schema(&self) -> Result<LabelSchema> {
        match &self.schema {
            None => Ok(LabelSchema::bundled()),
            Some(path) => LabelSchema::load(path),
        }
    }

    /// SHA-256 of the canonical serialized form, hex encoded. Stable
    /// across load/save cycles and field formatting differences.
    pub fn sha256(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&canonical);
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io_util::write_json(path, self)
    }
}
