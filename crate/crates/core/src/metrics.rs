//! Overlap, surface-distance and homogeneity metrics, and report output.
//!
//! * Dice similarity (DSC) per label, with the usual empty-set
//!   conventions: two empty regions agree perfectly, one empty region
//!   scores zero.
//! * 95th-percentile Hausdorff distance (HD95) in millimetres, computed
//!   from exact Euclidean distance transforms of the two boundary sets.
//!   Boundaries use face connectivity, and the volume border counts as
//!   outside, so a region touching the edge of the field of view still
//!   has a closed surface. By default the 95th percentile is taken over
//!   the pooled, bidirectional multiset of boundary-to-boundary
//!   distances; a max-of-directed variant is available.
//! * Relative standard deviation (RSD) of a scalar map inside a region:
//!   population standard deviation over mean. Lower values mean the
//!   region is more homogeneous. Undefined for regions with fewer than
//!   two voxels or a near-zero mean.
//!
//! Aggregates over regions are unweighted means with population standard
//! deviations; undefined per-region values are skipped and the count of
//! contributing regions is reported.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::volume::{Grid, Volume};

/// Near-zero guard for RSD denominators.
const RSD_MEAN_EPSILON: f64 = 1e-12;

/// How the two directed surface-distance distributions combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Hd95Mode {
    /// 95th percentile of the pooled bidirectional distance multiset.
    #[default]
    Pooled,
    /// Maximum of the two directed 95th percentiles.
    MaxDirected,
}

fn check_grids(a: &Grid, b: &Grid, what: &str) -> Result<()> {
    if !a.compatible(b) {
        return Err(CoreError::InvalidVolume(format!(
            "{what} volumes are on different grids"
        )));
    }
    Ok(())
}

/// Dice similarity coefficient of one label between two volumes.
pub fn dsc(pred: &Volume<i32>, gt: &Volume<i32>, label: i32) -> Result<f64> {
    check_grids(pred.grid(), gt.grid(), "dsc input")?;
    let mut np = 0usize;
    let mut ng = 0usize;
    let mut overlap = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let ip = p == label;
        let ig = g == label;
        np += usize::from(ip);
        ng += usize::from(ig);
        overlap += usize::from(ip && ig);
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * overlap as f64 / (np + ng) as f64)
}

/// Exact squared Euclidean distance transform on an anisotropic grid.
///
/// `seeds` marks voxels at distance zero; every other voxel receives the
/// squared distance in millimetres to its nearest seed, or infinity if
/// there are no seeds. Axis passes use the lower-envelope-of-parabolas
/// construction, which is exact in floating point up to rounding of the
/// final sum of three squared terms.
pub fn squared_distance_transform(
    dims: (usize, usize, usize),
    spacing: [f64; 3],
    seeds: &[bool],
) -> Vec<f64> {
    let (nx, ny, nz) = dims;
    assert_eq!(seeds.len(), nx * ny * nz, "seed mask length mismatch");
    let mut dist: Vec<f64> = seeds
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();

    let mut line_f = Vec::new();
    let mut line_out = Vec::new();

    // Pass along x: lines are contiguous.
    let positions_x: Vec<f64> = (0..nx).map(|i| i as f64 * spacing[0]).collect();
    for line in dist.chunks_mut(nx) {
        line_f.clear();
        line_f.extend_from_slice(line);
        line_out.resize(nx, 0.0);
        edt_line(&line_f, &positions_x, &mut line_out);
        line.copy_from_slice(&line_out);
    }

    // Pass along y.
    let positions_y: Vec<f64> = (0..ny).map(|i| i as f64 * spacing[1]).collect();
    for z in 0..nz {
        for x in 0..nx {
            line_f.clear();
            line_f.extend((0..ny).map(|y| dist[x + nx * (y + ny * z)]));
            line_out.resize(ny, 0.0);
            edt_line(&line_f, &positions_y, &mut line_out);
            for y in 0..ny {
                dist[x + nx * (y + ny * z)] = line_out[y];
            }
        }
    }

    // Pass along z.
    let positions_z: Vec<f64> = (0..nz).map(|i| i as f64 * spacing[2]).collect();
    for y in 0..ny {
        for x in 0..nx {
            line_f.clear();
            line_f.extend((0..nz).map(|z| dist[x + nx * (y + ny * z)]));
            line_out.resize(nz, 0.0);
            edt_line(&line_f, &positions_z, &mut line_out);
            for z in 0..nz {
                dist[x + nx * (y + ny * z)] = line_out[z];
            }
        }
    }

    dist
}

/// One-dimensional squared-distance pass: `out[q] = min_p (x_q - x_p)^2
/// + f[p]`, over sample positions `x`. Infinite entries of `f` never win
/// and an all-infinite line stays infinite.
fn edt_line(f: &[f64], positions: &[f64], out: &mut [f64]) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if sites.is_empty() {
        out[..n].fill(f64::INFINITY);
        return;
    }

    // Lower envelope: v holds parabola sites, z[k]..z[k+1] is the range
    // where parabola k is minimal.
    let mut v = vec![0usize; sites.len()];
    let mut z = vec![0.0f64; sites.len() + 1];
    v[0] = sites[0];
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let mut k = 0usize;
    for &q in &sites[1..] {
        let xq = positions[q];
        loop {
            let p = v[k];
            let xp = positions[p];
            let s = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }

    let mut k = 0usize;
    for (i, o) in out.iter_mut().enumerate().take(n) {
        let x = positions[i];
        while z[k + 1] < x {
            k += 1;
        }
        let p = v[k];
        let d = x - positions[p];
        *o = d * d + f[p];
    }
}

/// Boundary of a binary mask under face connectivity: a mask voxel with
/// at least one face neighbour outside the mask, where beyond the volume
/// counts as outside.
fn boundary_of(mask: &[bool], dims: (usize, usize, usize)) -> Vec<bool> {
    let (nx, ny, nz) = dims;
    let mut out = vec![false; mask.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if !mask[i] {
                    continue;
                }
                let exposed = x == 0
                    || x == nx - 1
                    || y == 0
                    || y == ny - 1
                    || z == 0
                    || z == nz - 1
                    || !mask[i - 1]
                    || !mask[i + 1]
                    || !mask[i - nx]
                    || !mask[i + nx]
                    || !mask[i - nx * ny]
                    || !mask[i + nx * ny];
                out[i] = exposed;
            }
        }
    }
    out
}

/// Linear-interpolation percentile of a sorted slice: rank `(n - 1) * p`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty set");
    assert!((0.0..=1.0).contains(&p), "percentile fraction out of range");
    let rank = (sorted.len() - 1) as f64 * p;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let t = rank - lo as f64;
        sorted[lo] * (1.0 - t) + sorted[hi] * t
    }
}

struct BoundingBox {
    lo: [usize; 3],
    hi: [usize; 3], // inclusive
}

fn bounding_box(pred: &[i32], gt: &[i32], dims: (usize, usize, usize), label: i32) -> Option<BoundingBox> {
    let (nx, ny, _) = dims;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if p != label && g != label {
            continue;
        }
        any = true;
        let c = [i % nx, (i / nx) % ny, i / (nx * ny)];
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    any.then_some(BoundingBox { lo, hi })
}

/// 95th-percentile Hausdorff distance in millimetres between one label's
/// regions in two volumes. `Ok(None)` when the label is missing from
/// either volume, since a one-sided surface has no distance distribution.
pub fn hd95(pred: &Volume<i32>, gt: &Volume<i32>, label: i32, mode: Hd95Mode) -> Result<Option<f64>> {
    check_grids(pred.grid(), gt.grid(), "hd95 input")?;
    let dims = pred.grid().dims();
    let (nx, ny, _) = dims;

    let present_pred = pred.data().iter().any(|&v| v == label);
    let present_gt = gt.data().iter().any(|&v| v == label);
    if !present_pred || !present_gt {
        return Ok(None);
    }

    // All seeds and queries live in the joint bounding box, so the
    // transform restricted to it is exact.
    let bbox = bounding_box(pred.data(), gt.data(), dims, label).expect("label present");
    let sub_dims = (
        bbox.hi[0] - bbox.lo[0] + 1,
        bbox.hi[1] - bbox.lo[1] + 1,
        bbox.hi[2] - bbox.lo[2] + 1,
    );
    let sub_len = sub_dims.0 * sub_dims.1 * sub_dims.2;
    let mut mask_pred = vec![false; sub_len];
    let mut mask_gt = vec![false; sub_len];
    for sz in 0..sub_dims.2 {
        for sy in 0..sub_dims.1 {
            for sx in 0..sub_dims.0 {
                let full = (bbox.lo[0] + sx) + nx * ((bbox.lo[1] + sy) + ny * (bbox.lo[2] + sz));
                let sub = sx + sub_dims.0 * (sy + sub_dims.1 * sz);
                mask_pred[sub] = pred.data()[full] == label;
                mask_gt[sub] = gt.data()[full] == label;
            }
        }
    }

    let spacing = pred.grid().spacing();
    let boundary_pred = boundary_of(&mask_pred, sub_dims);
    let boundary_gt = boundary_of(&mask_gt, sub_dims);
    let dist_to_gt = squared_distance_transform(sub_dims, spacing, &boundary_gt);
    let dist_to_pred = squared_distance_transform(sub_dims, spacing, &boundary_pred);

    let mut forward: Vec<f64> = boundary_pred
        .iter()
        .zip(&dist_to_gt)
        .filter(|(&b, _)| b)
        .map(|(_, &d2)| d2.sqrt())
        .collect();
    let mut backward: Vec<f64> = boundary_gt
        .iter()
        .zip(&dist_to_pred)
        .filter(|(&b, _)| b)
        .map(|(_, &d2)| d2.sqrt())
        .collect();

    let value = match mode {
        Hd95Mode::Pooled => {
            let mut pooled = forward;
            pooled.append(&mut backward);
            pooled.sort_unstable_by(f64::total_cmp);
            percentile(&pooled, 0.95)
        }
        Hd95Mode::MaxDirected => {
            forward.sort_unstable_by(f64::total_cmp);
            backward.sort_unstable_by(f64::total_cmp);
            percentile(&forward, 0.95).max(percentile(&backward, 0.95))
        }
    };
    Ok(Some(value))
}

fn mean_and_population_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Relative standard deviation of `map` inside the voxels labelled
/// `label`. `Ok(None)` for regions with fewer than two voxels or a mean
/// within [`RSD_MEAN_EPSILON`] of zero.
pub fn rsd(map: &Volume<f32>, labels: &Volume<i32>, label: i32) -> Result<Option<f64>> {
    check_grids(map.grid(), labels.grid(), "rsd input")?;
    let values: Vec<f64> = labels
        .data()
        .iter()
        .zip(map.data())
        .filter(|(&l, _)| l == label)
        .map(|(_, &v)| v as f64)
        .collect();
    if values.len() < 2 {
        return Ok(None);
    }
    let (mean, std) = mean_and_population_std(&values);
    if mean.abs() <= RSD_MEAN_EPSILON {
        return Ok(None);
    }
    Ok(Some(std / mean))
}

/// Unweighted aggregate of per-region metric values.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricAggregate {
    pub mean: f64,
    /// Population standard deviation: a single region aggregates with
    /// zero spread.
    pub std: f64,
    /// Regions with a defined value.
    pub count: usize,
}

/// Aggregates defined values, skipping `None` entries. `None` when no
/// region had a defined value.
pub fn aggregate<I: IntoIterator<Item = Option<f64>>>(values: I) -> Option<MetricAggregate> {
    let defined: Vec<f64> = values.into_iter().flatten().collect();
    if defined.is_empty() {
        return None;
    }
    let (mean, std) = mean_and_population_std(&defined);
    Some(MetricAggregate {
        mean,
        std,
        count: defined.len(),
    })
}

/// Per-region evaluation row.
#[derive(Debug, Clone, Serialize)]
pub struct RegionMetrics {
    pub id: i32,
    pub name: String,
    pub voxels_pred: usize,
    pub voxels_gt: Option<usize>,
    pub dsc: Option<f64>,
    pub hd95_mm: Option<f64>,
    pub rsd_fa: Option<f64>,
    pub rsd_md: Option<f64>,
    pub rsd_cs: Option<f64>,
}

/// Scalar maps to score region homogeneity against, all optional.
#[derive(Default, Clone, Copy)]
pub struct HomogeneityMaps<'a> {
    pub fa: Option<&'a Volume<f32>>,
    pub md: Option<&'a Volume<f32>>,
    pub cs: Option<&'a Volume<f32>>,
}

/// Full evaluation output: per-region rows plus per-metric aggregates
/// keyed by column name.
#[derive(Debug, Serialize)]
pub struct EvaluationSummary {
    pub regions: Vec<RegionMetrics>,
    pub aggregates: BTreeMap<String, MetricAggregate>,
}

/// Evaluates a predicted labeling region by region.
///
/// Overlap metrics need `gt`; homogeneity metrics need the corresponding
/// map and are computed over the predicted regions. Every requested
/// input must share the prediction's grid.
pub fn evaluate_labels(
    pred: &Volume<i32>,
    gt: Option<&Volume<i32>>,
    regions: &[(i32, String)],
    maps: &HomogeneityMaps,
    mode: Hd95Mode,
) -> Result<EvaluationSummary> {
    if let Some(gt) = gt {
        check_grids(pred.grid(), gt.grid(), "evaluation")?;
    }
    for map in [maps.fa, maps.md, maps.cs].into_iter().flatten() {
        check_grids(pred.grid(), map.grid(), "evaluation")?;
    }

    let mut rows = Vec::with_capacity(regions.len());
    for (id, name) in regions {
        let id = *id;
        let voxels_pred = pred.data().iter().filter(|&&v| v == id).count();
        let (voxels_gt, dsc_v, hd95_v) = match gt {
            None => (None, None, None),
            Some(gt) => {
                let ng = gt.data().iter().filter(|&&v| v == id).count();
                (
                    Some(ng),
                    Some(dsc(pred, gt, id)?),
                    hd95(pred, gt, id, mode)?,
                )
            }
        };
        let rsd_of = |map: Option<&Volume<f32>>| -> Result<Option<f64>> {
            map.map_or(Ok(None), |m| rsd(m, pred, id))
        };
        rows.push(RegionMetrics {
            id,
            name: name.clone(),
            voxels_pred,
            voxels_gt,
            dsc: dsc_v,
            hd95_mm: hd95_v,
            rsd_fa: rsd_of(maps.fa)?,
            rsd_md: rsd_of(maps.md)?,
            rsd_cs: rsd_of(maps.cs)?,
        });
    }

    let mut aggregates = BTreeMap::new();
    let columns: [(&str, Box<dyn Fn(&RegionMetrics) -> Option<f64>>); 5] = [
        ("dsc", Box::new(|r| r.dsc)),
        ("hd95_mm", Box::new(|r| r.hd95_mm)),
        ("rsd_fa", Box::new(|r| r.rsd_fa)),
        ("rsd_md", Box::new(|r| r.rsd_md)),
        ("rsd_cs", Box::new(|r| r.rsd_cs)),
    ];
    for (key, extract) in columns {
        if let Some(agg) = aggregate(rows.iter().map(|r| extract(r))) {
            aggregates.insert(key.to_string(), agg);
        }
    }

    Ok(EvaluationSummary {
        regions: rows,
        aggregates,
    })
}

/// CSV header of [`write_region_csv`].
pub const REGION_CSV_HEADER: &str =
    "id,name,voxels_pred,voxels_gt,dsc,hd95_mm,rsd_fa,rsd_md,rsd_cs";

fn csv_field(name: &str) -> String {
    if name.contains(',') || name.contains('"') {
        format!("\"{}\"", name.replace('"', "\"\""))
    } else {
        name.to_string()
    }
}

fn csv_opt_float(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Writes per-region rows as CSV. Undefined values become empty cells.
pub fn write_region_csv(path: &Path, rows: &[RegionMetrics]) -> Result<()> {
    let mut text = String::new();
    text.push_str(REGION_CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.id,
            csv_field(&r.name),
            r.voxels_pred,
            r.voxels_gt.map(|v| v.to_string()).unwrap_or_default(),
            csv_opt_float(r.dsc),
            csv_opt_float(r.hd95_mm),
            csv_opt_float(r.rsd_fa),
            csv_opt_float(r.rsd_md),
            csv_opt_float(r.rsd_cs),
        ));
    }
    crate::io_util::atomic_write(path, |w| {
        w.write_all(text.as_bytes()).map_err(|source| CoreError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}
