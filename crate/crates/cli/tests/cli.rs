//! End-to-end tests driving the installed binaries as subprocesses.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dparc_core::config::{BackendSpec, BackendsConfig, InputsConfig};
use dparc_core::metrics::REGION_CSV_HEADER;
use dparc_core::nifti::{read_volume, write_series, write_volume};
use dparc_core::postprocess::PostprocessConfig;
use dparc_core::schema::{GroupDef, Hemisphere, LabelDef};
use dparc_core::sliding::SlidingWindowConfig;
use dparc_core::{
    Grid, LabelSchema, LabelSpace, LabelVolume, MapCode, PipelineConfig, ScalarMapSet, Volume,
};
use nalgebra::Matrix4;

const DPARC: &str = env!("CARGO_BIN_EXE_dparc");
const ORACLE: &str = env!("CARGO_BIN_EXE_dparc-oracle-backend");

fn dparc(args: &[&str]) -> Output {
    Command::new(DPARC)
        .args(args)
        .output()
        .expect("running dparc")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

/// Twelve labels: two white-matter passthroughs plus two labels in each
/// of the five subdivided groups.
fn small_schema() -> LabelSchema {
    let groups = vec![
        GroupDef { id: 1, name: "left-wm".into() },
        GroupDef { id: 2, name: "right-wm".into() },
        GroupDef { id: 3, name: "left-cortex".into() },
        GroupDef { id: 4, name: "right-cortex".into() },
        GroupDef { id: 5, name: "central".into() },
        GroupDef { id: 6, name: "left-deep".into() },
        GroupDef { id: 7, name: "right-deep".into() },
    ];
    let mut labels = vec![
        LabelDef { id: 1, lut: 2, name: "Left-WM".into(), hemisphere: Hemisphere::Left, group: 1 },
        LabelDef { id: 2, lut: 41, name: "Right-WM".into(), hemisphere: Hemisphere::Right, group: 2 },
    ];
    let mut next = 3;
    for group in 3..=7 {
        for k in 0..2 {
            labels.push(LabelDef {
                id: next,
                lut: 1000 + next,
                name: format!("region-{group}-{k}"),
                hemisphere: Hemisphere::Central,
                group,
            });
            next += 1;
        }
    }
    LabelSchema::from_parts("small".into(), String::new(), groups, vec![1, 2], labels).unwrap()
}

/// Seven x slabs, one per coarse group, split along y for the
/// subdivided groups; the z = 0 plane stays background.
fn phantom_labels(grid: &Grid, schema: &LabelSchema) -> Volume<i32> {
    let (nx, ny, nz) = grid.dims();
    let mut vol = Volume::<i32>::zeros(grid.clone());
    for z in 1..nz {
        for y in 0..ny {
            for x in 0..nx {
                let gid = (x * 7 / nx) as i32 + 1;
                let v = match schema.passthrough_groups().get(&gid) {
                    Some(&wm) => wm,
                    None => {
                        let part = &schema.partitions()[&gid];
                        part[usize::from(y >= ny / 2)]
                    }
                };
                vol.set(x, y, z, v);
            }
        }
    }
    vol
}

fn as_f32(v: &Volume<i32>) -> Volume<f32> {
    let mut out = Volume::<f32>::zeros(v.grid().clone());
    for (o, &x) in out.data_mut().iter_mut().zip(v.data()) {
        *o = x as f32;
    }
    out
}

fn phantom_maps(gt: &Volume<i32>, schema: &LabelSchema) -> ScalarMapSet {
    let coarse = schema
        .coarse_project(&LabelVolume::new(gt.clone(), LabelSpace::FineInternal))
        .unwrap();
    let mut maps = ScalarMapSet::new();
    maps.insert(MapCode::Fa, as_f32(gt)).unwrap();
    maps.insert(MapCode::Tr, as_f32(&coarse.volume)).unwrap();
    maps.insert(MapCode::Cs, Volume::filled(gt.grid().clone(), 0.5)).unwrap();
    maps.insert(MapCode::E1, Volume::filled(gt.grid().clone(), 0.1)).unwrap();
    maps
}

fn write_maps(dir: &Path, maps: &ScalarMapSet) -> BTreeMap<MapCode, PathBuf> {
    maps.iter()
        .map(|(code, vol)| {
            let path = dir.join(format!("{}.nii.gz", code.file_stem()));
            write_volume(vol, &path).unwrap();
            (code, path)
        })
        .collect()
}

fn oracle_command(channels: usize, classes: usize, decode: usize, labels: &[i32]) -> Vec<String> {
    let list = labels.iter().map(i32::to_string).collect::<Vec<_>>().join(",");
    vec![
        ORACLE.to_string(),
        "--channels".into(),
        channels.to_string(),
        "--classes".into(),
        classes.to_string(),
        "--decode-channel".into(),
        decode.to_string(),
        "--labels".into(),
        list,
    ]
}

fn phantom_setup(dir: &Path, edge: usize) -> (LabelSchema, Volume<i32>, PathBuf) {
    let schema = small_schema();
    let grid = Grid::new((edge, edge, edge), Matrix4::identity()).unwrap();
    let gt = phantom_labels(&grid, &schema);
    let maps = phantom_maps(&gt, &schema);
    let paths = write_maps(dir, &maps);
    let schema_path = dir.join("schema.json");
    schema.save(&schema_path).unwrap();

    let config = PipelineConfig {
        inputs: InputsConfig::Maps { paths },
        map_codes: vec![MapCode::Fa, MapCode::Tr, MapCode::Cs, MapCode::E1],
        schema: Some(schema_path),
        conform: false,
        transform_conformed_to_native: None,
        transform_native_to_conformed: None,
        backends: BackendsConfig {
            coarse: BackendSpec {
                command: oracle_command(4, 8, 1, &[1, 2, 3, 4, 5, 6, 7]),
            },
            fine: schema
                .partitions()
                .iter()
                .map(|(&gid, part)| {
                    (gid, BackendSpec { command: oracle_command(5, part.len() + 1, 0, part) })
                })
                .collect(),
        },
        sliding_window: SlidingWindowConfig {
            patch: [8, 8, 8],
            overlap: 0.5,
            sigma_fraction: 0.125,
        },
        postprocess: PostprocessConfig::default(),
        output_dir: dir.join("out"),
    };
    let config_path = dir.join("config.json");
    config.save(&config_path).unwrap();
    (schema, gt, config_path)
}

#[test]
fn parcellate_reproduces_the_phantom_through_subprocess_backends() {
    let dir = tempfile::tempdir().unwrap();
    let (schema, gt, config_path) = phantom_setup(dir.path(), 12);

    let out = dparc(&["parcellate", "--config", config_path.to_str().unwrap()]);
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("coarse:"), "{stdout}");
    assert!(stdout.contains("parcellation.nii.gz"), "{stdout}");

    let expected = schema
        .to_freesurfer_lut(&LabelVolume::new(gt, LabelSpace::FineInternal))
        .unwrap();
    let produced = read_volume(&dir.path().join("out").join("parcellation.nii.gz"))
        .unwrap()
        .into_labels()
        .unwrap();
    assert_eq!(produced.data(), expected.volume.data());
    assert!(dir.path().join("out").join("run_manifest.json").exists());
}

#[test]
fn parcellate_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, config_path) = phantom_setup(dir.path(), 10);

    assert_success(&dparc(&["parcellate", "--config", config_path.to_str().unwrap()]));
    let first = std::fs::read(dir.path().join("out").join("parcellation.nii.gz")).unwrap();
    let first_coarse = std::fs::read(dir.path().join("out").join("coarse.nii.gz")).unwrap();

    assert_success(&dparc(&["parcellate", "--config", config_path.to_str().unwrap()]));
    let second = std::fs::read(dir.path().join("out").join("parcellation.nii.gz")).unwrap();
    let second_coarse = std::fs::read(dir.path().join("out").join("coarse.nii.gz")).unwrap();

    assert_eq!(first, second);
    assert_eq!(first_coarse, second_coarse);
}

#[test]
fn fit_dti_writes_the_requested_maps() {
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid::new((5, 5, 5), Matrix4::identity()).unwrap();

    // One b0 plus six directions, all voxels sharing one diagonal
    // tensor with eigenvalues (1.7, 0.4, 0.2) um^2/ms.
    let s0 = 1000.0f64;
    let b = 1000.0f64;
    let evals = [1.7e-3, 0.4e-3, 0.2e-3];
    let sq2 = std::f64::consts::FRAC_1_SQRT_2;
    let dirs = [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [sq2, sq2, 0.0],
        [sq2, 0.0, sq2],
        [0.0, sq2, sq2],
    ];
    let mut frames = vec![Volume::filled(grid.clone(), s0 as f32)];
    for g in dirs {
        let adc = evals[0] * g[0] * g[0] + evals[1] * g[1] * g[1] + evals[2] * g[2] * g[2];
        frames.push(Volume::filled(grid.clone(), (s0 * (-b * adc).exp()) as f32));
    }
    let dwi = dir.path().join("dwi.nii.gz");
    write_series(&frames, &dwi).unwrap();

    let bvals = dir.path().join("dwi.bval");
    std::fs::write(&bvals, "0 1000 1000 1000 1000 1000 1000\n").unwrap();
    let bvecs = dir.path().join("dwi.bvec");
    let mut rows = String::new();
    for axis in 0..3 {
        let mut row = vec!["0".to_string()];
        row.extend(dirs.iter().map(|g| format!("{}", g[axis])));
        rows.push_str(&row.join(" "));
        rows.push('\n');
    }
    std::fs::write(&bvecs, rows).unwrap();

    let out_dir = dir.path().join("maps");
    let out = dparc(&[
        "fit-dti",
        "--dwi", dwi.to_str().unwrap(),
        "--bvals", bvals.to_str().unwrap(),
        "--bvecs", bvecs.to_str().unwrap(),
        "--maps", "F,T",
        "--out", out_dir.to_str().unwrap(),
    ]);
    assert_success(&out);

    let fa = read_volume(&out_dir.join("fa.nii.gz")).unwrap().into_f32();
    let tr = read_volume(&out_dir.join("tr.nii.gz")).unwrap().into_f32();
    let expected_fa = 0.8025041713;
    let expected_tr = 2.3e-3;
    for &v in fa.data() {
        assert!((v as f64 - expected_fa).abs() < 1e-4, "fa {v}");
    }
    for &v in tr.data() {
        assert!((v as f64 - expected_tr).abs() < 1e-7, "tr {v}");
    }
    assert!(!out_dir.join("md.nii.gz").exists());
}

#[test]
fn exit_codes_separate_usage_input_and_backend_failures() {
    // Unknown map code: rejected while parsing arguments.
    let out = dparc(&[
        "fit-dti", "--dwi", "x", "--bvals", "y", "--bvecs", "z",
        "--maps", "Q", "--out", "o",
    ]);
    assert_eq!(exit_code(&out), 2);

    // Structurally invalid configuration.
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"inputs":{"kind":"dwi","dwi":"d","bvals":"b","bvecs":"v"},"patch_size":4,"backends":{"coarse":{"command":["x"]},"fine":{}},"output_dir":"o"}"#).unwrap();
    let out = dparc(&["parcellate", "--config", bad.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    // Missing input file: a runtime error.
    let out = dparc(&[
        "fit-dti", "--dwi", "missing.nii.gz", "--bvals", "y", "--bvecs", "z", "--out", "o",
    ]);
    assert_eq!(exit_code(&out), 3);

    // A backend that dies immediately.
    let (_, _, config_path) = phantom_setup(dir.path(), 8);
    let text = std::fs::read_to_string(&config_path).unwrap();
    let mut config: serde_json::Value = serde_json::from_str(&text).unwrap();
    config["backends"]["coarse"]["command"] = serde_json::json!(["/bin/false"]);
    std::fs::write(&config_path, serde_json::to_string(&config).unwrap()).unwrap();
    let out = dparc(&["parcellate", "--config", config_path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn evaluate_scores_a_perfect_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let schema = small_schema();
    let grid = Grid::new((10, 10, 10), Matrix4::identity()).unwrap();
    let gt = phantom_labels(&grid, &schema);
    let lut = schema
        .to_freesurfer_lut(&LabelVolume::new(gt, LabelSpace::FineInternal))
        .unwrap();

    let pred_path = dir.path().join("pred.nii.gz");
    let gt_path = dir.path().join("gt.nii.gz");
    write_volume(&lut.volume, &pred_path).unwrap();
    write_volume(&lut.volume, &gt_path).unwrap();
    let fa_path = dir.path().join("fa.nii.gz");
    write_volume(&Volume::filled(grid, 0.7f32), &fa_path).unwrap();
    let schema_path = dir.path().join("schema.json");
    schema.save(&schema_path).unwrap();

    let csv_path = dir.path().join("regions.csv");
    let out = dparc(&[
        "evaluate",
        "--pred", pred_path.to_str().unwrap(),
        "--gt", gt_path.to_str().unwrap(),
        "--schema", schema_path.to_str().unwrap(),
        "--fa", fa_path.to_str().unwrap(),
        "--out", csv_path.to_str().unwrap(),
    ]);
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("dsc: mean 1.000000 std 0.000000 over 12 regions"), "{stdout}");
    assert!(stdout.contains("hd95_mm: mean 0.000000"), "{stdout}");

    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv.lines().next().unwrap(), REGION_CSV_HEADER);
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn rsd_profiles_homogeneity_and_requires_a_map() {
    let dir = tempfile::tempdir().unwrap();
    let schema = small_schema();
    let grid = Grid::new((10, 10, 10), Matrix4::identity()).unwrap();
    let gt = phantom_labels(&grid, &schema);
    let lut = schema
        .to_freesurfer_lut(&LabelVolume::new(gt, LabelSpace::FineInternal))
        .unwrap();
    let labels_path = dir.path().join("labels.nii.gz");
    write_volume(&lut.volume, &labels_path).unwrap();
    let schema_path = dir.path().join("schema.json");
    schema.save(&schema_path).unwrap();

    // Without any map the request is rejected up front.
    let out = dparc(&[
        "rsd",
        "--labels", labels_path.to_str().unwrap(),
        "--schema", schema_path.to_str().unwrap(),
        "--out", dir.path().join("r.csv").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--fa"));

    let fa_path = dir.path().join("fa.nii.gz");
    write_volume(&Volume::filled(grid, 0.4f32), &fa_path).unwrap();
    let csv_path = dir.path().join("rsd.csv");
    let out = dparc(&[
        "rsd",
        "--labels", labels_path.to_str().unwrap(),
        "--schema", schema_path.to_str().unwrap(),
        "--fa", fa_path.to_str().unwrap(),
        "--out", csv_path.to_str().unwrap(),
    ]);
    assert_success(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("rsd_fa: mean 0.000000"));
    assert!(csv_path.exists());
}

#[test]
fn postprocess_drops_satellites_outside_the_main_component() {
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid::new((8, 8, 8), Matrix4::identity()).unwrap();
    let mut labels = Volume::<i32>::zeros(grid.clone());
    for z in 0..8 {
        for y in 0..8 {
            for x in 0..4 {
                labels.set(x, y, z, 5);
            }
        }
    }
    labels.set(7, 7, 7, 5);
    // The mask matches the label support, so the satellite is not
    // bridged to the main body by dilation.
    let mut mask = Volume::<i32>::zeros(grid);
    for (m, &v) in mask.data_mut().iter_mut().zip(labels.data()) {
        *m = i32::from(v != 0);
    }

    let labels_path = dir.path().join("labels.nii.gz");
    let mask_path = dir.path().join("mask.nii.gz");
    let out_path = dir.path().join("clean.nii.gz");
    write_volume(&labels, &labels_path).unwrap();
    write_volume(&mask, &mask_path).unwrap();

    let out = dparc(&[
        "postprocess",
        "--labels", labels_path.to_str().unwrap(),
        "--mask", mask_path.to_str().unwrap(),
        "--connectivity", "6",
        "--out", out_path.to_str().unwrap(),
    ]);
    assert_success(&out);
    let cleaned = read_volume(&out_path).unwrap().into_labels().unwrap();
    assert_eq!(cleaned.get(7, 7, 7), 0);
    assert_eq!(cleaned.get(0, 0, 0), 5);
}

#[test]
fn conform_resamples_onto_the_analysis_grid() {
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid::new((10, 10, 10), Matrix4::identity()).unwrap();
    let mut vol = Volume::<u8>::zeros(grid);
    vol.set(5, 5, 5, 200);
    let input = dir.path().join("in.nii.gz");
    write_volume(&vol, &input).unwrap();

    let out_path = dir.path().join("conformed.nii.gz");
    let out = dparc(&[
        "conform",
        "--input", input.to_str().unwrap(),
        "--interpolation", "nearest",
        "--out", out_path.to_str().unwrap(),
    ]);
    assert_success(&out);
    let conformed = read_volume(&out_path).unwrap();
    let grid = match &conformed {
        dparc_core::AnyVolume::U8(v) => v.grid().clone(),
        other => panic!("unexpected dtype {other:?}"),
    };
    assert_eq!(grid.dims(), (256, 256, 256));
    for s in grid.spacing() {
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn ablation_plan_emits_configs_and_ranks_results() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base.json");
    std::fs::write(
        &base,
        r#"{
            "inputs": {"kind": "dwi", "dwi": "d.nii.gz", "bvals": "d.bval", "bvecs": "d.bvec"},
            "backends": {
                "coarse": {"command": ["seg", "--stage=coarse"]},
                "fine": {
                    "3": {"command": ["seg", "--group=3"]},
                    "4": {"command": ["seg", "--group=4"]},
                    "5": {"command": ["seg", "--group=5"]},
                    "6": {"command": ["seg", "--group=6"]},
                    "7": {"command": ["seg", "--group=7"]}
                }
            },
            "output_dir": "runs"
        }"#,
    )
    .unwrap();

    let plan_dir = dir.path().join("plan");
    let out = dparc(&[
        "ablation-plan",
        "--config", base.to_str().unwrap(),
        "--min-size", "1",
        "--max-size", "1",
        "--out", plan_dir.to_str().unwrap(),
    ]);
    assert_success(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("wrote 8 configurations"));
    assert!(plan_dir.join("F.json").exists());
    assert!(plan_dir.join("E3.json").exists());
    let emitted = PipelineConfig::load(&plan_dir.join("E1.json")).unwrap();
    assert_eq!(emitted.map_codes, vec![MapCode::E1]);

    let results = dir.path().join("results.json");
    std::fs::write(
        &results,
        r#"{"metric":"dsc","runs":[
            {"combination":"T+F+S+E3","score":76.49},
            {"combination":"T+F+S+E1","score":76.52}
        ]}"#,
    )
    .unwrap();
    let leaderboard = dir.path().join("leaderboard.csv");
    let out = dparc(&[
        "ablation-plan",
        "--results", results.to_str().unwrap(),
        "--leaderboard", leaderboard.to_str().unwrap(),
    ]);
    assert_success(&out);
    let csv = std::fs::read_to_string(&leaderboard).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "rank,combination,channels,score");
    assert_eq!(lines.next().unwrap(), "1,T+F+S+E1,4,76.520000");
    assert_eq!(lines.next().unwrap(), "2,T+F+S+E3,4,76.490000");

    // Planning and ranking at once is contradictory.
    let out = dparc(&[
        "ablation-plan",
        "--config", base.to_str().unwrap(),
        "--out", plan_dir.to_str().unwrap(),
        "--results", results.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
}
