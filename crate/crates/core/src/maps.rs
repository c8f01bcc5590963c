//! Scalar maps derived from the tensor eigensystem.
//!
//! Nine maps are available, addressed by single-letter codes matching the
//! channel vocabulary used throughout configuration files and file names:
//!
//! | code | map                       | definition                          |
//! |------|---------------------------|-------------------------------------|
//! | `F`  | fractional anisotropy     | normalized eigenvalue dispersion    |
//! | `T`  | trace                     | l1 + l2 + l3                        |
//! | `S`  | sphericity                | 3 l3 / trace                        |
//! | `L`  | linearity                 | (l1 - l2) / trace                   |
//! | `P`  | planarity                 | 2 (l2 - l3) / trace                 |
//! | `E1` | largest eigenvalue        | l1                                  |
//! | `E2` | middle eigenvalue         | l2                                  |
//! | `E3` | smallest eigenvalue       | l3                                  |
//! | `MD` | mean diffusivity          | trace / 3                           |
//!
//! Linearity, planarity and sphericity partition the unit: their sum is
//! exactly 1 wherever the trace is positive. At voxels with a
//! non-positive trace (including fit-invalid voxels, which carry zero
//! eigenvalues) all ratio-based maps read 0. Map values are computed in
//! f64 and stored as float32 volumes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::eigen::EigenSystem;
use crate::error::{CoreError, Result};
use crate::volume::{Grid, Volume};

/// Identifier of a derived scalar map.
///
/// Declaration order is the canonical vocabulary order used when sorting
/// map combinations; `MD` sorts last and is excluded from the ablation
/// vocabulary because it is the trace rescaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MapCode {
    Fa,
    Tr,
    Cs,
    Cl,
    Cp,
    E1,
    E2,
    E3,
    Md,
}

/// The eight channel codes eligible for ablation studies, in canonical
/// order.
pub const ABLATION_VOCABULARY: [MapCode; 8] = [
    MapCode::Fa,
    MapCode::Tr,
    MapCode::Cs,
    MapCode::Cl,
    MapCode::Cp,
    MapCode::E1,
    MapCode::E2,
    MapCode::E3,
];

impl MapCode {
    /// Short channel code used in configuration and combination strings.
    pub fn letter(self) -> &'static str {
        match self {
            MapCode::Fa => "F",
            MapCode::Tr => "T",
            MapCode::Cs => "S",
            MapCode::Cl => "L",
            MapCode::Cp => "P",
            MapCode::E1 => "E1",
            MapCode::E2 => "E2",
            MapCode::E3 => "E3",
            MapCode::Md => "MD",
        }
    }

    /// File stem used when a map is written to disk (`fa.nii`, `cs.nii`, ...).
    pub fn file_stem(self) -> &'static str {
        match self {
            MapCode::Fa => "fa",
            MapCode::Tr => "tr",
            MapCode::Cs => "cs",
            MapCode::Cl => "cl",
            MapCode::Cp => "cp",
            MapCode::E1 => "e1",
            MapCode::E2 => "e2",
            MapCode::E3 => "e3",
            MapCode::Md => "md",
        }
    }

    pub fn all() -> [MapCode; 9] {
        [
            MapCode::Fa,
            MapCode::Tr,
            MapCode::Cs,
            MapCode::Cl,
            MapCode::Cp,
            MapCode::E1,
            MapCode::E2,
            MapCode::E3,
            MapCode::Md,
        ]
    }
}

impl fmt::Display for MapCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.letter())
    }
}

impl FromStr for MapCode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "F" | "FA" => Ok(MapCode::Fa),
            "T" | "TR" => Ok(MapCode::Tr),
            "S" | "CS" => Ok(MapCode::Cs),
            "L" | "CL" => Ok(MapCode::Cl),
            "P" | "CP" => Ok(MapCode::Cp),
            "E1" => Ok(MapCode::E1),
            "E2" => Ok(MapCode::E2),
            "E3" => Ok(MapCode::E3),
            "MD" => Ok(MapCode::Md),
            other => Err(CoreError::Argument(format!(
                "unknown map code {other:?}; expected one of F, T, S, L, P, E1, E2, E3, MD"
            ))),
        }
    }
}

impl Serialize for MapCode {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.letter())
    }
}

impl<'de> Deserialize<'de> for MapCode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// Fractional anisotropy of a descending eigenvalue triple, clamped to
/// [0, 1]. Zero when the trace is non-positive or all eigenvalues vanish.
pub fn fractional_anisotropy(l: [f64; 3]) -> f64 {
    let sum = l[0] + l[1] + l[2];
    let sq = l[0] * l[0] + l[1] * l[1] + l[2] * l[2];
    if sum <= 0.0 || sq == 0.0 {
        return 0.0;
    }
    let num = (l[0] - l[1]).powi(2) + (l[1] - l[2]).powi(2) + (l[0] - l[2]).powi(2);
    (num / (2.0 * sq)).sqrt().clamp(0.0, 1.0)
}

/// Linearity, planarity and sphericity of a descending eigenvalue triple.
/// The three sum to exactly 1 when the trace is positive; all are 0
/// otherwise.
pub fn westin_measures(l: [f64; 3]) -> (f64, f64, f64) {
    let sum = l[0] + l[1] + l[2];
    if sum <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let cl = (l[0] - l[1]) / sum;
    let cp = 2.0 * (l[1] - l[2]) / sum;
    let cs = 3.0 * l[2] / sum;
    (cl, cp, cs)
}

fn map_value(code: MapCode, l: [f64; 3]) -> f64 {
    match code {
        MapCode::Fa => fractional_anisotropy(l),
        MapCode::Tr => l[0] + l[1] + l[2],
        MapCode::Md => (l[0] + l[1] + l[2]) / 3.0,
        MapCode::Cl => westin_measures(l).0,
        MapCode::Cp => westin_measures(l).1,
        MapCode::Cs => westin_measures(l).2,
        MapCode::E1 => l[0],
        MapCode::E2 => l[1],
        MapCode::E3 => l[2],
    }
}

/// A bundle of scalar maps sharing one grid, keyed by map code.
#[derive(Debug, Clone, Default)]
pub struct ScalarMapSet {
    maps: BTreeMap<MapCode, Volume<f32>>,
}

impl ScalarMapSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a map, enforcing that all members share the grid of the first.
    pub fn insert(&mut self, code: MapCode, volume: Volume<f32>) -> Result<()> {
        if let Some(existing) = self.maps.values().next() {
            if existing.grid() != volume.grid() {
                return Err(CoreError::InvalidVolume(format!(
                    "map {code} is on a different grid than the rest of the set"
                )));
            }
        }
        self.maps.insert(code, volume);
        Ok(())
    }

    pub fn get(&self, code: MapCode) -> Option<&Volume<f32>> {
        self.maps.get(&code)
    }

    /// The map for `code`, or a configuration error naming the gap.
    pub fn require(&self, code: MapCode) -> Result<&Volume<f32>> {
        self.maps.get(&code).ok_or_else(|| {
            CoreError::Config(format!("required map {code} is missing from the input set"))
        })
    }

    pub fn codes(&self) -> impl Iterator<Item = MapCode> + '_ {
        self.maps.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (MapCode, &Volume<f32>)> {
        self.maps.iter().map(|(c, v)| (*c, v))
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn grid(&self) -> Option<&Grid> {
        self.maps.values().next().map(|v| v.grid())
    }
}

/// Computes the selected maps from a per-voxel eigensystem.
pub fn derive_maps(eigen: &EigenSystem, codes: &[MapCode]) -> Result<ScalarMapSet> {
    let mut set = ScalarMapSet::new();
    for &code in codes {
        let data: Vec<f32> = eigen
            .lambdas()
            .par_iter()
            .map(|&l| map_value(code, l) as f32)
            .collect();
        set.insert(code, Volume::new(eigen.grid().clone(), data)?)?;
    }
    Ok(set)
}

/// Pearson correlation between two maps over the voxels where `mask` is
/// nonzero (all voxels when no mask is given).
///
/// Fails when fewer than two voxels are selected or either map has zero
/// variance over the selection.
pub fn map_correlation(
    a: &Volume<f32>,
    b: &Volume<f32>,
    mask: Option<&Volume<u8>>,
) -> Result<f64> {
    if a.grid() != b.grid() {
        return Err(CoreError::InvalidVolume(
            "correlation requires both maps on one grid".to_string(),
        ));
    }
    if let Some(m) = mask {
        if m.grid() != a.grid() {
            return Err(CoreError::InvalidVolume(
                "correlation mask is on a different grid".to_string(),
            ));
        }
    }

    let selected = |i: usize| mask.map(|m| m.data()[i] != 0).unwrap_or(true);
    let n = (0..a.data().len()).filter(|&i| selected(i)).count();
    if n < 2 {
        return Err(CoreError::MetricUndefined(format!(
            "correlation needs at least 2 voxels, mask selects {n}"
        )));
    }

    let (mut sum_a, mut sum_b) = (0.0f64, 0.0f64);
    for i in 0..a.data().len() {
        if selected(i) {
            sum_a += a.data()[i] as f64;
            sum_b += b.data()[i] as f64;
        }
    }
    let mean_a = sum_a / n as f64;
    let mean_b = sum_b / n as f64;

    let (mut var_a, mut var_b, mut cov) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..a.data().len() {
        if selected(i) {
            let da = a.data()[i] as f64 - mean_a;
            let db = b.data()[i] as f64 - mean_b;
            var_a += da * da;
            var_b += db * db;
            cov += da * db;
        }
    }
    if var_a <= 0.0 || var_b <= 0.0 {
        return Err(CoreError::MetricUndefined(
            "correlation undefined: a map has zero variance over the selection".to_string(),
        ));
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}
