//! The hierarchical label inventory and projections between label spaces.
//!
//! A schema declares fine labels (positive internal ids, bijectively
//! paired with FreeSurfer lookup-table ids) and exactly seven coarse
//! groups. Two groups hold a single white-matter label each, one per
//! hemisphere; those labels are assigned directly from the coarse
//! prediction. The remaining five groups are each refined by a dedicated
//! fine segmentation stage over that group's label partition.
//!
//! Label volumes move between three spaces: fine internal ids, coarse
//! group ids, and FreeSurfer LUT ids. Background is 0 in all three.
//!
//! All counts (labels per group, partition sizes) are data: loaders
//! enforce only the structural invariants above, so reduced or enlarged
//! inventories work as long as they keep seven groups and two
//! single-label white-matter groups.
//!
//! The bundled `dk101` schema carries 101 labels: left and right cerebral
//! white matter, 34 cortical regions per hemisphere, 5 central structures
//! (corpus callosum, CSF, brain stem, third and fourth ventricles), and
//! 13 subcortical structures per hemisphere. Published descriptions of
//! this inventory quote 14 subcortical labels per hemisphere, which
//! double-counts against the stated total of 101; this crate resolves the
//! tension as 13 + 13, the standard FreeSurfer subcortical set.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::volume::Volume;

const BUNDLED_DK101: &str = include_str!("../assets/dk101.json");

/// Which id vocabulary a label volume's voxels use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelSpace {
    /// Fine internal ids as declared by the schema.
    FineInternal,
    /// Coarse group ids 1..=7.
    Coarse,
    /// FreeSurfer lookup-table ids.
    FreeSurfer,
}

impl fmt::Display for LabelSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LabelSpace::FineInternal => "fine-internal",
            LabelSpace::Coarse => "coarse",
            LabelSpace::FreeSurfer => "freesurfer-lut",
        };
        f.write_str(s)
    }
}

/// An integer label volume tagged with the space its ids live in.
#[derive(Debug, Clone)]
pub struct LabelVolume {
    pub volume: Volume<i32>,
    pub space: LabelSpace,
}

impl LabelVolume {
    pub fn new(volume: Volume<i32>, space: LabelSpace) -> Self {
        LabelVolume { volume, space }
    }

    fn expect_space(&self, space: LabelSpace, context: &str) -> Result<()> {
        if self.space != space {
            return Err(CoreError::LabelData(format!(
                "{context} expects labels in {space} space, found {}",
                self.space
            )));
        }
        Ok(())
    }
}

/// Hemisphere tag of a fine label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hemisphere {
    Left,
    Right,
    Central,
}

/// One fine label: internal id, FreeSurfer LUT id, display name,
/// hemisphere, and owning coarse group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelDef {
    pub id: i32,
    pub lut: i32,
    pub name: String,
    pub hemisphere: Hemisphere,
    pub group: i32,
}

/// One coarse group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupDef {
    pub id: i32,
    pub name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SchemaJson {
    name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    description: String,
    groups: Vec<GroupDef>,
    wm_passthrough: Vec<i32>,
    labels: Vec<LabelDef>,
}

/// A validated label schema.
#[derive(Debug, Clone)]
pub struct LabelSchema {
    name: String,
    description: String,
    groups: Vec<GroupDef>,
    labels: Vec<LabelDef>,
    wm_passthrough: Vec<i32>,
    by_id: HashMap<i32, usize>,
    by_lut: HashMap<i32, usize>,
    /// Fine-stage groups in ascending id order, each with its ordered
    /// label partition.
    partitions: BTreeMap<i32, Vec<i32>>,
    /// Group id -> white-matter label id for the two passthrough groups.
    passthrough_by_group: BTreeMap<i32, i32>,
}

impl LabelSchema {
    /// The label inventory shipped with the crate (101 labels, see the
    /// module docs).
    pub fn bundled() -> LabelSchema {
        Self::from_json_str(BUNDLED_DK101).expect("bundled schema is valid")
    }

    /// Loads and validates a schema from a JSON file.
    pub fn load(path: &Path) -> Result<LabelSchema> {
        let text = std::fs::read_to_string(path).map_err(|source| CoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
            .map_err(|e| CoreError::SchemaValidation(format!("{}: {e}", path.display())))
    }

    pub fn from_json_str(text: &str) -> Result<LabelSchema> {
        let raw: SchemaJson = serde_json::from_str(text)
            .map_err(|e| CoreError::SchemaValidation(format!("malformed JSON: {e}")))?;
        Self::from_parts(raw.name, raw.description, raw.groups, raw.wm_passthrough, raw.labels)
    }

    /// Builds and validates a schema from its parts.
    pub fn from_parts(
        name: String,
        description: String,
        groups: Vec<GroupDef>,
        wm_passthrough: Vec<i32>,
        labels: Vec<LabelDef>,
    ) -> Result<LabelSchema> {
        let fail = |msg: String| Err(CoreError::SchemaValidation(msg));

        if groups.len() != 7 {
            return fail(format!("expected 7 groups, found {}", groups.len()));
        }
        let mut group_ids: Vec<i32> = groups.iter().map(|g| g.id).collect();
        group_ids.sort_unstable();
        if group_ids != vec![1, 2, 3, 4, 5, 6, 7] {
            return fail(format!("group ids must be exactly 1..=7, found {group_ids:?}"));
        }

        if labels.is_empty() {
            return fail("schema declares no labels".to_string());
        }
        let mut by_id = HashMap::new();
        let mut by_lut = HashMap::new();
        for (i, label) in labels.iter().enumerate() {
            if label.id <= 0 {
                return fail(format!("label {:?} has non-positive id {}", label.name, label.id));
            }
            if label.lut <= 0 {
                return fail(format!("label {:?} has non-positive LUT id {}", label.name, label.lut));
            }
            if by_id.insert(label.id, i).is_some() {
                return fail(format!("duplicate internal id {} ({:?})", label.id, label.name));
            }
            if by_lut.insert(label.lut, i).is_some() {
                return fail(format!("duplicate LUT id {} ({:?})", label.lut, label.name));
            }
            if !(1..=7).contains(&label.group) {
                return fail(format!(
                    "label {:?} references unknown group {}",
                    label.name, label.group
                ));
            }
        }

        if wm_passthrough.len() != 2 {
            return fail(format!(
                "wm_passthrough must list exactly 2 label ids, found {}",
                wm_passthrough.len()
            ));
        }
        let mut passthrough_by_group = BTreeMap::new();
        let mut hemis = Vec::new();
        for &id in &wm_passthrough {
            let idx = match by_id.get(&id) {
                Some(&i) => i,
                None => return fail(format!("wm_passthrough references unknown label id {id}")),
            };
            let label = &labels[idx];
            hemis.push(label.hemisphere);
            if passthrough_by_group.insert(label.group, label.id).is_some() {
                return fail(format!(
                    "both wm_passthrough labels live in group {}",
                    label.group
                ));
            }
        }
        if !(hemis.contains(&Hemisphere::Left) && hemis.contains(&Hemisphere::Right)) {
            return fail("wm_passthrough must cover one left and one right label".to_string());
        }

        let mut partitions: BTreeMap<i32, Vec<i32>> = BTreeMap::new();
        for gid in 1..=7 {
            if !passthrough_by_group.contains_key(&gid) {
                partitions.insert(gid, Vec::new());
            }
        }
        for label in &labels {
            match partitions.get_mut(&label.group) {
                Some(part) => part.push(label.id),
                None => {
                    // A passthrough group: its only member must be the
                    // passthrough label itself.
                    if passthrough_by_group.get(&label.group) != Some(&label.id) {
                        return fail(format!(
                            "group {} is a white-matter passthrough group but also contains {:?}",
                            label.group, label.name
                        ));
                    }
                }
            }
        }
        for (gid, part) in &partitions {
            if part.is_empty() {
                return fail(format!("fine-stage group {gid} has no labels"));
            }
        }

        Ok(LabelSchema {
            name,
            description,
            groups,
            labels,
            wm_passthrough,
            by_id,
            by_lut,
            partitions,
            passthrough_by_group,
        })
    }

    /// Serializes the schema back to its JSON grammar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let raw = SchemaJson {
            name: self.name.clone(),
            description: self.description.clone(),
            groups: self.groups.clone(),
            wm_passthrough: self.wm_passthrough.clone(),
            labels: self.labels.clone(),
        };
        crate::io_util::write_json(path, &raw)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn labels(&self) -> &[LabelDef] {
        &self.labels
    }

    pub fn groups(&self) -> &[GroupDef] {
        &self.groups
    }

    pub fn label_by_id(&self, id: i32) -> Option<&LabelDef> {
        self.by_id.get(&id).map(|&i| &self.labels[i])
    }

    pub fn label_by_lut(&self, lut: i32) -> Option<&LabelDef> {
        self.by_lut.get(&lut).map(|&i| &self.labels[i])
    }

    /// Largest coarse group id (always 7); the divisor used when a coarse
    /// id is fed to a fine stage as a normalized input channel.
    pub fn max_group_id(&self) -> i32 {
        7
    }

    /// Fine-stage groups in ascending id order with their ordered label
    /// partitions. Always five entries.
    pub fn partitions(&self) -> &BTreeMap<i32, Vec<i32>> {
        &self.partitions
    }

    /// The two white-matter passthrough groups and their label ids.
    pub fn passthrough_groups(&self) -> &BTreeMap<i32, i32> {
        &self.passthrough_by_group
    }

    pub fn wm_passthrough(&self) -> &[i32] {
        &self.wm_passthrough
    }

    /// Checks that every nonzero voxel uses a declared id in the volume's
    /// space (fine internal or FreeSurfer; coarse volumes are checked
    /// against group ids).
    pub fn validate_volume(&self, labels: &LabelVolume) -> Result<()> {
        let lookup: Box<dyn Fn(i32) -> bool> = match labels.space {
            LabelSpace::FineInternal => Box::new(|v| self.by_id.contains_key(&v)),
            LabelSpace::FreeSurfer => Box::new(|v| self.by_lut.contains_key(&v)),
            LabelSpace::Coarse => Box::new(|v| (1..=7).contains(&v)),
        };
        for (i, &v) in labels.volume.data().iter().enumerate() {
            if v != 0 && !lookup(v) {
                let (x, y, z) = labels.volume.grid().coords(i);
                return Err(CoreError::LabelData(format!(
                    "voxel ({x},{y},{z}) holds {v}, which is not a {} id of schema {:?}",
                    labels.space, self.name
                )));
            }
        }
        Ok(())
    }

    /// Collapses fine internal labels onto their coarse groups. Background
    /// stays 0; an undeclared id is an error naming the voxel.
    pub fn coarse_project(&self, fine: &LabelVolume) -> Result<LabelVolume> {
        fine.expect_space(LabelSpace::FineInternal, "coarse_project")?;
        let mut out = Volume::<i32>::zeros(fine.volume.grid().clone());
        for (i, (&v, o)) in fine
            .volume
            .data()
            .iter()
            .zip(out.data_mut().iter_mut())
            .enumerate()
        {
            if v == 0 {
                continue;
            }
            match self.label_by_id(v) {
                Some(def) => *o = def.group,
                None => {
                    let (x, y, z) = fine.volume.grid().coords(i);
                    return Err(CoreError::LabelData(format!(
                        "voxel ({x},{y},{z}) holds {v}, which is not a fine label of schema {:?}",
                        self.name
                    )));
                }
            }
        }
        Ok(LabelVolume::new(out, LabelSpace::Coarse))
    }

    /// Assembles the full fine labeling from the coarse prediction and the
    /// per-group fine results.
    ///
    /// Per voxel: background stays background; a white-matter group writes
    /// its passthrough label; any other group copies that group's fine
    /// prediction, which must be background or a member of the group's
    /// partition.
    pub fn merge_fine(
        &self,
        coarse: &LabelVolume,
        fine_by_group: &BTreeMap<i32, LabelVolume>,
    ) -> Result<LabelVolume> {
        coarse.expect_space(LabelSpace::Coarse, "merge_fine")?;
        for (gid, fine) in fine_by_group {
            fine.expect_space(LabelSpace::FineInternal, "merge_fine")?;
            if fine.volume.grid() != coarse.volume.grid() {
                return Err(CoreError::LabelData(format!(
                    "fine volume for group {gid} is on a different grid than the coarse volume"
                )));
            }
        }

        let grid = coarse.volume.grid().clone();
        let mut out = Volume::<i32>::zeros(grid.clone());
        for i in 0..coarse.volume.data().len() {
            let g = coarse.volume.data()[i];
            if g == 0 {
                continue;
            }
            if !(1..=7).contains(&g) {
                let (x, y, z) = grid.coords(i);
                return Err(CoreError::LabelData(format!(
                    "voxel ({x},{y},{z}) holds coarse id {g}, outside 1..=7"
                )));
            }
            if let Some(&wm) = self.passthrough_by_group.get(&g) {
                out.data_mut()[i] = wm;
                continue;
            }
            let fine = fine_by_group.get(&g).ok_or_else(|| {
                CoreError::Config(format!("no fine prediction supplied for group {g}"))
            })?;
            let v = fine.volume.data()[i];
            if v == 0 {
                continue;
            }
            let member = self.label_by_id(v).map(|d| d.group == g).unwrap_or(false);
            if !member {
                let (x, y, z) = grid.coords(i);
                return Err(CoreError::LabelData(format!(
                    "voxel ({x},{y},{z}): fine label {v} does not belong to group {g}"
                )));
            }
            out.data_mut()[i] = v;
        }
        Ok(LabelVolume::new(out, LabelSpace::FineInternal))
    }

    /// Rewrites fine internal ids as FreeSurfer LUT ids.
    pub fn to_freesurfer_lut(&self, fine: &LabelVolume) -> Result<LabelVolume> {
        fine.expect_space(LabelSpace::FineInternal, "to_freesurfer_lut")?;
        let mut out = Volume::<i32>::zeros(fine.volume.grid().clone());
        for (i, (&v, o)) in fine
            .volume
            .data()
            .iter()
            .zip(out.data_mut().iter_mut())
            .enumerate()
        {
            if v == 0 {
                continue;
            }
            match self.label_by_id(v) {
                Some(def) => *o = def.lut,
                None => {
                    let (x, y, z) = fine.volume.grid().coords(i);
                    return Err(CoreError::LabelData(format!(
                        "voxel ({x},{y},{z}) holds {v}, which is not a fine label of schema {:?}",
                        self.name
                    )));
                }
            }
        }
        Ok(LabelVolume::new(out, LabelSpace::FreeSurfer))
    }

    /// Rewrites FreeSurfer LUT ids as fine internal ids, the inverse of
    /// [`LabelSchema::to_freesurfer_lut`]. LUT ids absent from the schema
    /// are an error; ground truth should be reduced to the schema's
    /// inventory before evaluation.
    pub fn from_freesurfer_lut(&self, lut: &LabelVolume) -> Result<LabelVolume> {
        lut.expect_space(LabelSpace::FreeSurfer, "from_freesurfer_lut")?;
        let mut out = Volume::<i32>::zeros(lut.volume.grid().clone());
        for (i, (&v, o)) in lut
            .volume
            .data()
            .iter()
            .zip(out.data_mut().iter_mut())
            .enumerate()
        {
            if v == 0 {
                continue;
            }
            match self.label_by_lut(v) {
                Some(def) => *o = def.id,
                None => {
                    let (x, y, z) = lut.volume.grid().coords(i);
                    return Err(CoreError::LabelData(format!(
                        "voxel ({x},{y},{z}) holds {v}, which is not a LUT id of schema {:?}",
                        self.name
                    )));
                }
            }
        }
        Ok(LabelVolume::new(out, LabelSpace::FineInternal))
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub(crate) fn label(id: i32, lut: i32, name: &str, hemi: Hemisphere, group: i32) -> LabelDef {
        LabelDef {
            id,
            lut,
            name: name.to_string(),
            hemisphere: hemi,
            group,
        }
    }

    pub(crate) fn tiny_groups() -> Vec<GroupDef> {
        (1..=7)
            .map(|id| GroupDef {
                id,
                name: format!("group-{id}"),
            })
            .collect()
    }

    /// Twelve labels: two WM plus two per fine-stage group.
    pub(crate) fn tiny_schema() -> LabelSchema {
        let mut labels = vec![
            label(1, 2, "Left-WM", Hemisphere::Left, 1),
            label(2, 41, "Right-WM", Hemisphere::Right, 2),
        ];
        let mut next = 3;
        for group in 3..=7 {
            for k in 0..2 {
                labels.push(label(
                    next,
                    1000 + next,
                    &format!("region-{group}-{k}"),
                    Hemisphere::Central,
                    group,
                ));
                next += 1;
            }
        }
        LabelSchema::from_parts(
            "tiny".to_string(),
            String::new(),
            tiny_groups(),
            vec![1, 2],
            labels,
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::{label, tiny_groups, tiny_schema};
    use super::*;
    use crate::volume::Grid;
    use nalgebra::Matrix4;

    #[test]
    fn bundled_schema_loads_with_expected_structure() {
        let schema = LabelSchema::bundled();
        assert_eq!(schema.name(), "dk101");
        assert_eq!(schema.labels().len(), 101);
        assert_eq!(schema.partitions().len(), 5);
        let sizes: Vec<usize> = schema.partitions().values().map(|p| p.len()).collect();
        assert_eq!(sizes, vec![34, 34, 5, 13, 13]);
        assert_eq!(schema.wm_passthrough(), &[1, 2]);
        assert_eq!(schema.passthrough_groups().len(), 2);
        // Spot checks against the FreeSurfer colour table.
        assert_eq!(schema.label_by_id(1).unwrap().lut, 2);
        assert_eq!(schema.label_by_id(2).unwrap().lut, 41);
        assert_eq!(schema.label_by_lut(1035).unwrap().name, "ctx-lh-insula");
        assert_eq!(schema.label_by_lut(16).unwrap().name, "Brain-Stem");
        // Internal ids are 1..=101 and LUT ids are bijective.
        for id in 1..=101 {
            assert!(schema.label_by_id(id).is_some(), "missing id {id}");
        }
    }

    #[test]
    fn six_groups_are_rejected_with_a_count_message() {
        let mut groups = tiny_groups();
        groups.pop();
        let err = LabelSchema::from_parts(
            "bad".into(),
            String::new(),
            groups,
            vec![1, 2],
            vec![label(1, 2, "L", Hemisphere::Left, 1)],
        )
        .unwrap_err();
        assert!(err.to_string().contains("expected 7 groups"), "{err}");
    }

    #[test]
    fn structural_mutations_are_rejected() {
        // Each mutation of a valid schema must fail validation with a
        // message locating the problem.
        let cases: Vec<(&str, Box<dyn Fn(&mut SchemaJson)>, &str)> = vec![
            (
                "duplicate internal id",
                Box::new(|s| s.labels[5].id = s.labels[4].id),
                "duplicate internal id",
            ),
            (
                "duplicate LUT id",
                Box::new(|s| s.labels[5].lut = s.labels[4].lut),
                "duplicate LUT id",
            ),
            (
                "unknown group reference",
                Box::new(|s| s.labels[5].group = 9),
                "unknown group",
            ),
            (
                "extra label in a passthrough group",
                Box::new(|s| s.labels[5].group = 1),
                "passthrough group",
            ),
            (
                "nonexistent passthrough id",
                Box::new(|s| s.wm_passthrough = vec![1, 999]),
                "unknown label id",
            ),
            (
                "same-hemisphere passthrough",
                Box::new(|s| {
                    s.labels[1].hemisphere = Hemisphere::Left;
                }),
                "one left and one right",
            ),
            (
                "passthrough labels share a group",
                Box::new(|s| {
                    s.labels[1].group = 1;
                    s.wm_passthrough = vec![1, 2];
                }),
                "group",
            ),
            (
                "group ids not 1..=7",
                Box::new(|s| s.groups[6].id = 12),
                "group ids",
            ),
            (
                "non-positive label id",
                Box::new(|s| s.labels[3].id = 0),
                "non-positive",
            ),
            (
                "emptied fine-stage group",
                Box::new(|s| {
                    // Move both labels of group 7 elsewhere.
                    for l in &mut s.labels {
                        if l.group == 7 {
                            l.group = 6;
                        }
                    }
                }),
                "no labels",
            ),
        ];

        let valid = tiny_schema();
        let base = SchemaJson {
            name: valid.name().to_string(),
            description: String::new(),
            groups: valid.groups().to_vec(),
            wm_passthrough: valid.wm_passthrough().to_vec(),
            labels: valid.labels().to_vec(),
        };
        for (what, mutate, want) in cases {
            let mut raw = SchemaJson {
                name: base.name.clone(),
                description: String::new(),
                groups: base.groups.clone(),
                wm_passthrough: base.wm_passthrough.clone(),
                labels: base.labels.clone(),
            };
            mutate(&mut raw);
            let text = serde_json::to_string(&raw).unwrap();
            let err = LabelSchema::from_json_str(&text)
                .err()
                .unwrap_or_else(|| panic!("mutation {what:?} was accepted"));
            assert!(
                err.to_string().contains(want),
                "mutation {what:?}: message {err:?} lacks {want:?}"
            );
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let schema = tiny_schema();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.json");
        schema.save(&path).unwrap();
        let back = LabelSchema::load(&path).unwrap();
        assert_eq!(back.labels().len(), schema.labels().len());
        assert_eq!(back.partitions(), schema.partitions());
    }

    fn grid(n: usize) -> Grid {
        Grid::new((n, 1, 1), Matrix4::identity()).unwrap()
    }

    #[test]
    fn coarse_project_matches_label_histogram() {
        let schema = tiny_schema();
        // Voxels: background, WM left, group-3 label, group-7 label.
        let v = Volume::new(grid(4), vec![0, 1, 3, 12]).unwrap();
        let fine = LabelVolume::new(v, LabelSpace::FineInternal);
        let coarse = schema.coarse_project(&fine).unwrap();
        assert_eq!(coarse.volume.data(), &[0, 1, 3, 7]);
        assert_eq!(coarse.space, LabelSpace::Coarse);
    }

    #[test]
    fn coarse_project_rejects_undeclared_ids() {
        let schema = tiny_schema();
        let v = Volume::new(grid(2), vec![0, 99]).unwrap();
        let fine = LabelVolume::new(v, LabelSpace::FineInternal);
        let err = schema.coarse_project(&fine).unwrap_err();
        assert!(err.to_string().contains("99"), "{err}");
        assert!(err.to_string().contains("(1,0,0)"), "{err}");
    }

    #[test]
    fn merge_inverts_decomposition() {
        let schema = tiny_schema();
        // Ground-truth fine labeling covering every group.
        let fine_data = vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12];
        let fine = LabelVolume::new(
            Volume::new(grid(13), fine_data.clone()).unwrap(),
            LabelSpace::FineInternal,
        );
        let coarse = schema.coarse_project(&fine).unwrap();
        // Decompose into per-group volumes.
        let mut by_group = BTreeMap::new();
        for (&gid, part) in schema.partitions() {
            let data: Vec<i32> = fine_data
                .iter()
                .map(|&v| if part.contains(&v) { v } else { 0 })
                .collect();
            by_group.insert(
                gid,
                LabelVolume::new(Volume::new(grid(13), data).unwrap(), LabelSpace::FineInternal),
            );
        }
        let merged = schema.merge_fine(&coarse, &by_group).unwrap();
        assert_eq!(merged.volume.data(), fine_data.as_slice());
    }

    #[test]
    fn merge_writes_passthrough_labels_from_coarse_alone() {
        let schema = tiny_schema();
        let coarse = LabelVolume::new(
            Volume::new(grid(3), vec![0, 1, 2]).unwrap(),
            LabelSpace::Coarse,
        );
        let empty = |gid: i32| {
            (
                gid,
                LabelVolume::new(Volume::zeros(grid(3)), LabelSpace::FineInternal),
            )
        };
        let by_group: BTreeMap<i32, LabelVolume> = (3..=7).map(empty).collect();
        let merged = schema.merge_fine(&coarse, &by_group).unwrap();
        assert_eq!(merged.volume.data(), &[0, 1, 2]);
    }

    #[test]
    fn merge_rejects_fine_labels_outside_their_group() {
        let schema = tiny_schema();
        let coarse = LabelVolume::new(
            Volume::new(grid(1), vec![3]).unwrap(),
            LabelSpace::Coarse,
        );
        let mut by_group = BTreeMap::new();
        for gid in 3..=7 {
            // Label 12 belongs to group 7, planted in every group's volume.
            by_group.insert(
                gid,
                LabelVolume::new(
                    Volume::new(grid(1), vec![12]).unwrap(),
                    LabelSpace::FineInternal,
                ),
            );
        }
        let err = schema.merge_fine(&coarse, &by_group).unwrap_err();
        assert!(err.to_string().contains("does not belong"), "{err}");
    }

    #[test]
    fn merge_requires_every_fine_stage_volume() {
        let schema = tiny_schema();
        let coarse = LabelVolume::new(
            Volume::new(grid(1), vec![5]).unwrap(),
            LabelSpace::Coarse,
        );
        let err = schema.merge_fine(&coarse, &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("group 5"), "{err}");
    }

    #[test]
    fn lut_mapping_round_trips() {
        let schema = LabelSchema::bundled();
        let ids: Vec<i32> = (0..=101).collect();
        let fine = LabelVolume::new(
            Volume::new(grid(102), ids.clone()).unwrap(),
            LabelSpace::FineInternal,
        );
        let lut = schema.to_freesurfer_lut(&fine).unwrap();
        assert_eq!(lut.space, LabelSpace::FreeSurfer);
        assert_eq!(lut.volume.data()[0], 0);
        assert_eq!(lut.volume.data()[1], 2);
        assert_eq!(lut.volume.data()[2], 41);
        let back = schema.from_freesurfer_lut(&lut).unwrap();
        assert_eq!(back.volume.data(), ids.as_slice());
    }

    #[test]
    fn space_tags_are_enforced() {
        let schema = tiny_schema();
        let coarse_tagged = LabelVolume::new(Volume::zeros(grid(1)), LabelSpace::Coarse);
        assert!(schema.coarse_project(&coarse_tagged).is_err());
        assert!(schema.to_freesurfer_lut(&coarse_tagged).is_err());
    }

    #[test]
    fn validate_volume_checks_the_right_vocabulary() {
        let schema = tiny_schema();
        let fine = LabelVolume::new(
            Volume::new(grid(2), vec![12, 0]).unwrap(),
            LabelSpace::FineInternal,
        );
        schema.validate_volume(&fine).unwrap();
        let bad = LabelVolume::new(
            Volume::new(grid(2), vec![13, 0]).unwrap(),
            LabelSpace::FineInternal,
        );
        assert!(schema.validate_volume(&bad).is_err());
        let coarse = LabelVolume::new(
            Volume::new(grid(2), vec![7, 0]).unwrap(),
            LabelSpace::Coarse,
        );
        schema.validate_volume(&coarse).unwrap();
    }
}
