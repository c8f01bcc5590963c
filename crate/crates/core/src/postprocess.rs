//! Label cleanup between fine-stage inference and final assembly.
//!
//! Each fine stage predicts labels only where the coarse stage placed its
//! group, so the cleanup chain per group is:
//!
//! 1. restrict predictions to the group's coarse mask,
//! 2. grow labels into masked voxels the fine stage left unlabeled
//!    (face-neighbour dilation, smallest label wins ties, until stable),
//! 3. keep only the largest connected component of every label.
//!
//! On a volume whose labels already tile their mask with one component
//! each, the chain is the identity, which is the regime a well-behaved
//! segmenter produces. The individual operations are also safe on
//! arbitrary volumes: restriction and component filtering never add
//! voxels and dilation never removes them.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::volume::Volume;

/// Neighbourhood used for connected-component analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    /// Face neighbours.
    Six,
    /// Face and edge neighbours.
    Eighteen,
    /// Face, edge and corner neighbours.
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<(i32, i32, i32)> {
        let mut offs = Vec::new();
        for dz in -1i32..=1 {
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let nonzero = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => nonzero == 1,
                        Connectivity::Eighteen => (1..=2).contains(&nonzero),
                        Connectivity::TwentySix => nonzero >= 1,
                    };
                    if keep {
                        offs.push((dx, dy, dz));
                    }
                }
            }
        }
        offs
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(value: u8) -> std::result::Result<Self, Self::Error> {
        match value {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6, 18 or 26, found {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(value: Connectivity) -> u8 {
        match value {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

fn default_connectivity() -> Connectivity {
    Connectivity::TwentySix
}

/// Cleanup parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostprocessConfig {
    /// Neighbourhood for the largest-component filter.
    #[serde(default = "default_connectivity")]
    pub connectivity: Connectivity,
    /// Cap on dilation rounds; `null` dilates until stable.
    #[serde(default)]
    pub dilate_max_iters: Option<usize>,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            connectivity: default_connectivity(),
            dilate_max_iters: None,
        }
    }
}

fn check_same_grid(labels: &Volume<i32>, mask: &Volume<u8>) -> Result<()> {
    if !labels.grid().compatible(mask.grid()) {
        return Err(CoreError::InvalidVolume(
            "label volume and mask are on different grids".to_string(),
        ));
    }
    Ok(())
}

/// Zeroes every label outside the mask.
pub fn restrict_to_mask(labels: &Volume<i32>, mask: &Volume<u8>) -> Result<Volume<i32>> {
    check_same_grid(labels, mask)?;
    let mut out = labels.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(mask.data()) {
        if m == 0 {
            *v = 0;
        }
    }
    Ok(out)
}

/// Grows labels into masked voxels that are still background.
///
/// Rounds are synchronous: every unlabeled masked voxel with at least one
/// labeled face neighbour receives the smallest such neighbour label, and
/// all assignments of a round land together. Masked voxels with no
/// labeled voxel reachable through the mask stay background.
pub fn dilate_into_mask(
    labels: &Volume<i32>,
    mask: &Volume<u8>,
    max_iters: Option<usize>,
) -> Result<Volume<i32>> {
    check_same_grid(labels, mask)?;
    let (nx, ny, nz) = labels.grid().dims();
    let mut out = labels.clone();

    let mut pending: Vec<usize> = (0..out.data().len())
        .filter(|&i| mask.data()[i] != 0 && out.data()[i] == 0)
        .collect();
    let mut assignments: Vec<(usize, i32)> = Vec::new();

    let mut round = 0;
    loop {
        if let Some(cap) = max_iters {
            if round >= cap {
                break;
            }
        }
        assignments.clear();
        for &i in &pending {
            let x = (i % nx) as i32;
            let y = ((i / nx) % ny) as i32;
            let z = (i / (nx * ny)) as i32;
            let mut best: Option<i32> = None;
            for (dx, dy, dz) in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
            {
                let (qx, qy, qz) = (x + dx, y + dy, z + dz);
                if qx < 0 || qy < 0 || qz < 0 {
                    continue;
                }
                let (qx, qy, qz) = (qx as usize, qy as usize, qz as usize);
                if qx >= nx || qy >= ny || qz >= nz {
                    continue;
                }
                let v = out.data()[qx + nx * (qy + ny * qz)];
                if v != 0 && best.map(|b| v < b).unwrap_or(true) {
                    best = Some(v);
                }
            }
            if let Some(label) = best {
                assignments.push((i, label));
            }
        }
        if assignments.is_empty() {
            break;
        }
        for &(i, label) in &assignments {
            out.data_mut()[i] = label;
        }
        pending.retain(|&i| out.data()[i] == 0);
        round += 1;
    }
    Ok(out)
}

/// Keeps, for every label, only its largest connected component.
///
/// Size ties go to the component whose smallest voxel coordinate
/// `(x, y, z)` is lexicographically least, so the outcome never depends
/// on traversal order.
pub fn largest_component(labels: &Volume<i32>, connectivity: Connectivity) -> Volume<i32> {
    let (nx, ny, nz) = labels.grid().dims();
    let n = labels.grid().len();
    let offsets = connectivity.offsets();

    const UNSEEN: u32 = u32::MAX;
    let mut component = vec![UNSEEN; n];
    // Per component: owning label, voxel count, smallest (x, y, z).
    let mut info: Vec<(i32, usize, (usize, usize, usize))> = Vec::new();
    let mut queue = VecDeque::new();

    for seed in 0..n {
        if labels.data()[seed] == 0 || component[seed] != UNSEEN {
            continue;
        }
        let label = labels.data()[seed];
        let id = info.len() as u32;
        component[seed] = id;
        queue.push_back(seed);
        let mut size = 0usize;
        let mut min_xyz = (usize::MAX, usize::MAX, usize::MAX);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let x = i % nx;
            let y = (i / nx) % ny;
            let z = i / (nx * ny);
            min_xyz = min_xyz.min((x, y, z));
            for &(dx, dy, dz) in &offsets {
                let (qx, qy, qz) = (x as i32 + dx, y as i32 + dy, z as i32 + dz);
                if qx < 0 || qy < 0 || qz < 0 {
                    continue;
                }
                let (qx, qy, qz) = (qx as usize, qy as usize, qz as usize);
                if qx >= nx || qy >= ny || qz >= nz {
                    continue;
                }
                let j = qx + nx * (qy + ny * qz);
                if labels.data()[j] == label && component[j] == UNSEEN {
                    component[j] = id;
                    queue.push_back(j);
                }
            }
        }
        info.push((label, size, min_xyz));
    }

    let mut winner: HashMap<i32, u32> = HashMap::new();
    for (id, &(label, size, min_xyz)) in info.iter().enumerate() {
        let id = id as u32;
        match winner.get(&label) {
            None => {
                winner.insert(label, id);
            }
            Some(&best) => {
                let (_, best_size, best_min) = info[best as usize];
                if size > best_size || (size == best_size && min_xyz < best_min) {
                    winner.insert(label, id);
                }
            }
        }
    }

    let mut out = Volume::<i32>::zeros(labels.grid().clone());
    for i in 0..n {
        let label = labels.data()[i];
        if label != 0 && winner.get(&label) == Some(&component[i]) {
            out.data_mut()[i] = label;
        }
    }
    out
}

/// The full per-group chain: restrict, dilate, largest component.
pub fn clean_group_labels(
    fine: &Volume<i32>,
    group_mask: &Volume<u8>,
    config: &PostprocessConfig,
) -> Result<Volume<i32>> {
    let restricted = restrict_to_mask(fine, group_mask)?;
    let filled = dilate_into_mask(&restricted, group_mask, config.dilate_max_iters)?;
    Ok(largest_component(&filled, config.connectivity))
}
