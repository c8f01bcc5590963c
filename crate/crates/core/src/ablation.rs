//! Input-channel ablation planning and ranking.
//!
//! An ablation study reruns the pipeline with different subsets of the
//! derived scalar maps as segmenter input channels. This module
//! enumerates those subsets over a fixed eight-map vocabulary (FA,
//! trace, the three Westin shape measures, and the three eigenvalue
//! maps), emits one pipeline configuration per subset, and ranks the
//! scored results.
//!
//! A combination remembers the channel order it was written in, since
//! that order is what the segmenter sees; two combinations with the same
//! maps in different orders are still the same experiment, so set-wise
//! identity uses a canonical ordering.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{CoreError, Result};
use crate::maps::{MapCode, ABLATION_VOCABULARY};

/// An ordered, duplicate-free selection of input maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Combination(Vec<MapCode>);

impl Combination {
    pub fn new(codes: Vec<MapCode>) -> Result<Combination> {
        if codes.is_empty() {
            return Err(CoreError::Argument(
                "a combination needs at least one map".to_string(),
            ));
        }
        for (i, code) in codes.iter().enumerate() {
            if codes[..i].contains(code) {
                return Err(CoreError::Argument(format!(
                    "map {code} appears twice in the combination"
                )));
            }
        }
        Ok(Combination(codes))
    }

    pub fn codes(&self) -> &[MapCode] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The same maps sorted into vocabulary order.
    pub fn canonical(&self) -> Combination {
        let mut codes = self.0.clone();
        codes.sort();
        Combination(codes)
    }

    /// Order-independent identity, e.g. `"F+T"` for both `T+F` and `F+T`.
    pub fn canonical_key(&self) -> String {
        self.canonical().to_string()
    }

    /// Filename-safe form, e.g. `T_F_S_E1`.
    pub fn file_stem(&self) -> String {
        self.0.iter().map(|c| c.letter()).join("_")
    }
}

impl fmt::Display for Combination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.iter().map(|c| c.letter()).join("+"))
    }
}

impl FromStr for Combination {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Combination> {
        let codes = s
            .split(['+', '_'])
            .map(|part| part.trim().parse::<MapCode>())
            .collect::<Result<Vec<_>>>()?;
        Combination::new(codes)
    }
}

/// All vocabulary subsets with sizes in `min_size..=max_size`, smaller
/// subsets first, each in vocabulary order.
pub fn enumerate_combinations(min_size: usize, max_size: usize) -> Result<Vec<Combination>> {
    let limit = ABLATION_VOCABULARY.len();
    if min_size == 0 || min_size > max_size || max_size > limit {
        return Err(CoreError::Argument(format!(
            "combination sizes must satisfy 1 <= min <= max <= {limit}, got {min_size}..={max_size}"
        )));
    }
    let mut out = Vec::new();
    for size in min_size..=max_size {
        for subset in ABLATION_VOCABULARY.iter().copied().combinations(size) {
            out.push(Combination(subset));
        }
    }
    Ok(out)
}

/// Whether larger or smaller metric values win.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankDirection {
    HigherIsBetter,
    LowerIsBetter,
}

/// The ranking direction for a named evaluation metric.
pub fn direction_for_metric(metric: &str) -> Result<RankDirection> {
    match metric {
        "dsc" => Ok(RankDirection::HigherIsBetter),
        "hd95_mm" | "rsd_fa" | "rsd_md" | "rsd_cs" => Ok(RankDirection::LowerIsBetter),
        other => Err(CoreError::Config(format!(
            "unknown metric {other:?}; expected dsc, hd95_mm, rsd_fa, rsd_md or rsd_cs"
        ))),
    }
}

/// One scored ablation run.
#[derive(Debug, Clone)]
pub struct ScoredRun {
    pub combination: Combination,
    pub score: f64,
}

/// Scored runs as read from or written to disk.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationResults {
    /// Metric the scores came from; decides the ranking direction.
    pub metric: String,
    pub runs: Vec<RunScore>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunScore {
    pub combination: String,
    pub score: f64,
}

impl AblationResults {
    pub fn load(path: &Path) -> Result<AblationResults> {
        let text = std::fs::read_to_string(path).map_err(|source| CoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))
    }

    /// Parses and ranks the runs, best first.
    pub fn ranked(&self) -> Result<Vec<ScoredRun>> {
        let direction = direction_for_metric(&self.metric)?;
        let runs = self
            .runs
            .iter()
            .map(|r| {
                Ok(ScoredRun {
                    combination: r.combination.parse()?,
                    score: r.score,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rank_runs(runs, direction)
    }
}

/// Sorts runs best-first. Ties break towards fewer channels, then the
/// lexicographically smaller canonical key. Duplicate combinations and
/// non-finite scores are rejected.
pub fn rank_runs(mut runs: Vec<ScoredRun>, direction: RankDirection) -> Result<Vec<ScoredRun>> {
    let mut seen = std::collections::BTreeSet::new();
    for run in &runs {
        if !run.score.is_finite() {
            return Err(CoreError::Config(format!(
                "non-finite score for combination {}",
                run.combination
            )));
        }
        if !seen.insert(run.combination.canonical_key()) {
            return Err(CoreError::Config(format!(
                "combination {} scored more than once",
                run.combination.canonical_key()
            )));
        }
    }
    runs.sort_by(|a, b| {
        let by_score = match direction {
            RankDirection::HigherIsBetter => b.score.total_cmp(&a.score),
            RankDirection::LowerIsBetter => a.score.total_cmp(&b.score),
        };
        by_score
            .then_with(|| a.combination.len().cmp(&b.combination.len()))
            .then_with(|| a.combination.canonical_key().cmp(&b.combination.canonical_key()))
    });
    Ok(runs)
}

/// Renders ranked runs as a CSV leaderboard.
pub fn leaderboard_csv(ranked: &[ScoredRun]) -> String {
    let mut out = String::from("rank,combination,channels,score\n");
    for (i, run) in ranked.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{:.6}\n",
            i + 1,
            run.combination,
            run.combination.len(),
            run.score
        ));
    }
    out
}

/// Writes one pipeline configuration per combination into `dir`, named
/// by the combination's file stem, with `map_codes` overridden. Every
/// emitted configuration is validated first.
pub fn emit_manifest_set(
    base: &PipelineConfig,
    combinations: &[Combination],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|source| CoreError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::with_capacity(combinations.len());
    for combo in combinations {
        let mut config = base.clone();
        config.map_codes = combo.codes().to_vec();
        config.output_dir = base.output_dir.join(combo.file_stem());
        config
            .validate()
            .map_err(|e| CoreError::Config(format!("combination {combo}: {e}")))?;
        let path = dir.join(format!("{}.json", combo.file_stem()));
        config.save(&path)?;
        written.push(path);
    }
    Ok(written)
}
