//! Command-line front end for the parcellation pipeline.
//!
//! Every subcommand maps onto one library entry point: tensor fitting,
//! conforming, the full coarse-to-fine run, label cleanup, evaluation,
//! homogeneity reporting, and ablation planning. Failures exit with 2
//! for invalid inputs or configuration, 3 for runtime errors, and 4 for
//! segmenter backend failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dparc_core::ablation::{enumerate_combinations, leaderboard_csv, AblationResults};
use dparc_core::dwi::{read_bvals, read_bvecs};
use dparc_core::eigen::eigendecompose;
use dparc_core::metrics::{evaluate_labels, write_region_csv, Hd95Mode, HomogeneityMaps};
use dparc_core::nifti::{read_series, read_volume, write_volume};
use dparc_core::pipeline::{run_pipeline, spawn_backends, MANIFEST_FILE};
use dparc_core::postprocess::{clean_group_labels, Connectivity, PostprocessConfig};
use dparc_core::tensor::fit_tensors;
use dparc_core::{
    conform, maps, AnyVolume, CoreError, DwiSeries, ErrorKind, GradientScheme, Interpolation,
    LabelSchema, MapCode, PipelineConfig, Result, Volume,
};

#[derive(Parser)]
#[command(
    name = "dparc",
    version,
    about = "Two-stage coarse-to-fine brain parcellation from diffusion tensor maps"
)]
struct Cli {
    /// Threads for the global worker pool; all cores when omitted.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit diffusion tensors and write derived scalar maps.
    FitDti(FitDtiArgs),
    /// Resample a volume into the 256 cubed, 1 mm analysis space.
    Conform(ConformArgs),
    /// Run the full coarse-to-fine parcellation.
    Parcellate(ParcellateArgs),
    /// Clean a label volume against a binary mask.
    Postprocess(PostprocessArgs),
    /// Score a predicted parcellation against a reference.
    Evaluate(EvaluateArgs),
    /// Report per-region scalar-map homogeneity without a reference.
    Rsd(RsdArgs),
    /// Emit per-combination configurations, or rank scored results.
    AblationPlan(AblationPlanArgs),
}

#[derive(Args)]
struct FitDtiArgs {
    /// 4D diffusion series (NIfTI-1, optionally gzipped).
    #[arg(long)]
    dwi: PathBuf,
    /// b-values, whitespace separated.
    #[arg(long)]
    bvals: PathBuf,
    /// Gradient directions, three rows or three columns.
    #[arg(long)]
    bvecs: PathBuf,
    /// Maps to derive (comma separated codes such as F,T,S,E1).
    #[arg(long, value_delimiter = ',', default_value = "F,T,S,L,P,E1,E2,E3,MD")]
    maps: Vec<MapCode>,
    /// Output directory; one file per map, named fa.nii.gz, tr.nii.gz, ...
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum InterpArg {
    Trilinear,
    Nearest,
}

impl From<InterpArg> for Interpolation {
    fn from(arg: InterpArg) -> Interpolation {
        match arg {
            InterpArg::Trilinear => Interpolation::Trilinear,
            InterpArg::Nearest => Interpolation::Nearest,
        }
    }
}

#[derive(Args)]
struct ConformArgs {
    /// Input volume.
    #[arg(long)]
    input: PathBuf,
    /// Output path (.nii or .nii.gz).
    #[arg(long)]
    out: PathBuf,
    /// Use nearest for label volumes, trilinear for intensities.
    #[arg(long, value_enum, default_value_t = InterpArg::Trilinear)]
    interpolation: InterpArg,
}

#[derive(Args)]
struct ParcellateArgs {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct PostprocessArgs {
    /// Label volume to clean.
    #[arg(long)]
    labels: PathBuf,
    /// Mask the labels must live in; nonzero voxels are inside.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Neighbourhood connectivity: 6, 18 or 26.
    #[arg(long, default_value_t = 26)]
    connectivity: u8,
    /// Cap on dilation sweeps; unlimited when omitted.
    #[arg(long)]
    max_dilate_iters: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Hd95ModeArg {
    Pooled,
    MaxDirected,
}

impl From<Hd95ModeArg> for Hd95Mode {
    fn from(arg: Hd95ModeArg) -> Hd95Mode {
        match arg {
            Hd95ModeArg::Pooled => Hd95Mode::Pooled,
            Hd95ModeArg::MaxDirected => Hd95Mode::MaxDirected,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted labels (FreeSurfer LUT ids).
    #[arg(long)]
    pred: PathBuf,
    /// Reference labels; overlap and surface metrics need this.
    #[arg(long)]
    gt: PathBuf,
    /// Label schema JSON; the bundled inventory when omitted.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// FA map for per-region homogeneity.
    #[arg(long)]
    fa: Option<PathBuf>,
    /// Mean-diffusivity map for per-region homogeneity.
    #[arg(long)]
    md: Option<PathBuf>,
    /// Sphericity map for per-region homogeneity.
    #[arg(long)]
    cs: Option<PathBuf>,
    /// Per-region CSV report path.
    #[arg(long)]
    out: PathBuf,
    /// Surface-distance aggregation across directions.
    #[arg(long, value_enum, default_value_t = Hd95ModeArg::Pooled)]
    hd95: Hd95ModeArg,
}

#[derive(Args)]
struct RsdArgs {
    /// Labels to profile (FreeSurfer LUT ids).
    #[arg(long)]
    labels: PathBuf,
    /// Label schema JSON; the bundled inventory when omitted.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// FA map.
    #[arg(long)]
    fa: Option<PathBuf>,
    /// Mean-diffusivity map.
    #[arg(long)]
    md: Option<PathBuf>,
    /// Sphericity map.
    #[arg(long)]
    cs: Option<PathBuf>,
    /// Per-region CSV report path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblationPlanArgs {
    /// Base pipeline configuration to specialise per combination.
    #[arg(long, required_unless_present = "results", conflicts_with = "results")]
    config: Option<PathBuf>,
    /// Smallest combination size to enumerate.
    #[arg(long, default_value_t = 1)]
    min_size: usize,
    /// Largest combination size to enumerate.
    #[arg(long, default_value_t = 4)]
    max_size: usize,
    /// Directory receiving one configuration per combination.
    #[arg(long, required_unless_present = "results", conflicts_with = "results")]
    out: Option<PathBuf>,
    /// Scored results JSON to rank instead of planning.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Leaderboard CSV path; stdout when omitted.
    #[arg(long, requires = "results")]
    leaderboard: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // A second initialisation (e.g. in tests) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err.kind() {
                ErrorKind::Validation => 2,
                ErrorKind::Runtime => 3,
                ErrorKind::Backend => 4,
            })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::FitDti(args) => fit_dti(args),
        Command::Conform(args) => conform_volume(args),
        Command::Parcellate(args) => parcellate(args),
        Command::Postprocess(args) => postprocess(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Rsd(args) => rsd(args),
        Command::AblationPlan(args) => ablation_plan(args),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| CoreError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn fit_dti(args: FitDtiArgs) -> Result<()> {
    if args.maps.is_empty() {
        return Err(CoreError::Argument("no maps requested".to_string()));
    }
    let frames = read_series(&args.dwi)?;
    let scheme = GradientScheme::new(read_bvals(&args.bvals)?, read_bvecs(&args.bvecs)?)?;
    let series = DwiSeries::new(frames, scheme)?;
    let tensors = fit_tensors(&series)?;
    let eigen = eigendecompose(&tensors, false);
    let maps = maps::derive_maps(&eigen, &args.maps)?;
    create_dir(&args.out)?;
    for (code, volume) in maps.iter() {
        let path = args.out.join(format!("{}.nii.gz", code.file_stem()));
        write_volume(volume, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn conform_volume(args: ConformArgs) -> Result<()> {
    let interp: Interpolation = args.interpolation.into();
    let conformed = match read_volume(&args.input)? {
        AnyVolume::F32(v) => AnyVolume::F32(conform(&v, interp)),
        AnyVolume::I32(v) => AnyVolume::I32(conform(&v, interp)),
        AnyVolume::U8(v) => AnyVolume::U8(conform(&v, interp)),
    };
    match &conformed {
        AnyVolume::F32(v) => write_volume(v, &args.out)?,
        AnyVolume::I32(v) => write_volume(v, &args.out)?,
        AnyVolume::U8(v) => write_volume(v, &args.out)?,
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn parcellate(args: ParcellateArgs) -> Result<()> {
    let config = PipelineConfig::load(&args.config)?;
    let schema = config.load_schema()?;
    let mut backends = spawn_backends(&config, &schema)?;
    let outputs = run_pipeline(&config, &mut backends)?;
    for stage in &outputs.manifest.stages {
        println!("{}: {} ms", stage.stage, stage.millis);
    }
    for name in &outputs.manifest.outputs {
        println!("wrote {}", config.output_dir.join(name).display());
    }
    println!("wrote {}", config.output_dir.join(MANIFEST_FILE).display());
    Ok(())
}

fn read_labels(path: &Path) -> Result<Volume<i32>> {
    read_volume(path)?.into_labels()
}

fn postprocess(args: PostprocessArgs) -> Result<()> {
    let labels = read_labels(&args.labels)?;
    let mask_labels = read_labels(&args.mask)?;
    let mut mask = Volume::<u8>::zeros(mask_labels.grid().clone());
    for (m, &v) in mask.data_mut().iter_mut().zip(mask_labels.data()) {
        *m = u8::from(v != 0);
    }
    let config = PostprocessConfig {
        connectivity: Connectivity::try_from(args.connectivity).map_err(CoreError::Argument)?,
        dilate_max_iters: args.max_dilate_iters,
    };
    let cleaned = clean_group_labels(&labels, &mask, &config)?;
    write_volume(&cleaned, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn load_schema(path: &Option<PathBuf>) -> Result<LabelSchema> {
    match path {
        Some(p) => LabelSchema::load(p),
        None => Ok(LabelSchema::bundled()),
    }
}

fn schema_regions(schema: &LabelSchema) -> Vec<(i32, String)> {
    schema
        .labels()
        .iter()
        .map(|l| (l.lut, l.name.clone()))
        .collect()
}

fn optional_map(path: &Option<PathBuf>) -> Result<Option<Volume<f32>>> {
    path.as_ref()
        .map(|p| read_volume(p).map(AnyVolume::into_f32))
        .transpose()
}

fn print_aggregates(aggregates: &std::collections::BTreeMap<String, dparc_core::metrics::MetricAggregate>) {
    for (metric, agg) in aggregates {
        println!(
            "{metric}: mean {:.6} std {:.6} over {} regions",
            agg.mean, agg.std, agg.count
        );
    }
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let schema = load_schema(&args.schema)?;
    let pred = read_labels(&args.pred)?;
    let gt = read_labels(&args.gt)?;
    let fa = optional_map(&args.fa)?;
    let md = optional_map(&args.md)?;
    let cs = optional_map(&args.cs)?;
    let maps = HomogeneityMaps {
        fa: fa.as_ref(),
        md: md.as_ref(),
        cs: cs.as_ref(),
    };
    let summary = evaluate_labels(
        &pred,
        Some(&gt),
        &schema_regions(&schema),
        &maps,
        args.hd95.into(),
    )?;
    write_region_csv(&args.out, &summary.regions)?;
    print_aggregates(&summary.aggregates);
    println!("wrote {}", args.out.display());
    Ok(())
}

fn rsd(args: RsdArgs) -> Result<()> {
    if args.fa.is_none() && args.md.is_none() && args.cs.is_none() {
        return Err(CoreError::Argument(
            "provide at least one of --fa, --md, --cs".to_string(),
        ));
    }
    let schema = load_schema(&args.schema)?;
    let labels = read_labels(&args.labels)?;
    let fa = optional_map(&args.fa)?;
    let md = optional_map(&args.md)?;
    let cs = optional_map(&args.cs)?;
    let maps = HomogeneityMaps {
        fa: fa.as_ref(),
        md: md.as_ref(),
        cs: cs.as_ref(),
    };
    let summary = evaluate_labels(
        &labels,
        None,
        &schema_regions(&schema),
        &maps,
        Hd95Mode::Pooled,
    )?;
    write_region_csv(&args.out, &summary.regions)?;
    print_aggregates(&summary.aggregates);
    println!("wrote {}", args.out.display());
    Ok(())
}

fn ablation_plan(args: AblationPlanArgs) -> Result<()> {
    if let Some(results_path) = &args.results {
        let ranked = AblationResults::load(results_path)?.ranked()?;
        let csv = leaderboard_csv(&ranked);
        match &args.leaderboard {
            Some(path) => {
                std::fs::write(path, &csv).map_err(|source| CoreError::Io {
                    path: path.clone(),
                    source,
                })?;
                println!("wrote {}", path.display());
            }
            None => print!("{csv}"),
        }
        return Ok(());
    }

    let (config_path, out) = (
        args.config.as_ref().expect("enforced by clap"),
        args.out.as_ref().expect("enforced by clap"),
    );
    let base = PipelineConfig::load(config_path)?;
    let combos = enumerate_combinations(args.min_size, args.max_size)?;
    let written = dparc_core::ablation::emit_manifest_set(&base, &combos, out)?;
    println!(
        "wrote {} configurations to {}",
        written.len(),
        out.display()
    );
    Ok(())
}
