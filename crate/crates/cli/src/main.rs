use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use partlift::em::ViewSchedule;
use partlift::eval::evaluate;
use partlift::geometry::{read_ply, read_rig, write_ply, write_rig, PlyFormat, RigParams};
use partlift::masks::{read_masks, write_masks, Corruption};
use partlift::pipeline::{ablation_run, run_pipeline, scene_data, stage_seed, EmUnit, PipelineConfig, Stage, Variant};
use partlift::segmentation::InstanceSegmentation;
use partlift::superpoints::read_partition;
use partlift::synthetic::{make_benchmark, make_scene, write_spec, Difficulty};
use partlift::voting::{labels_from_text, labels_to_text};

#[derive(Parser)]
#[command(
    name = "partlift",
    version,
    about = "Lift multi-view 2D part masks to 3D part segmentation"
)]
struct Cli {
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with ground-truth masks.
    Generate(GenerateArgs),
    /// Segment a point cloud from multi-view masks.
    Segment(SegmentArgs),
    /// Score a predicted segmentation against ground truth.
    Eval(EvalArgs),
    /// Compare the full pipeline against its ablations on a synthetic benchmark.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DifficultyArg {
    Easy,
    Hard,
}

impl From<DifficultyArg> for Difficulty {
    fn from(d: DifficultyArg) -> Self {
        match d {
            DifficultyArg::Easy => Difficulty::Easy,
            DifficultyArg::Hard => Difficulty::Hard,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Random,
    RoundRobin,
}

#[derive(Clone, Copy, ValueEnum)]
enum UnitArg {
    Superpoint,
    Point,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "easy")]
    difficulty: DifficultyArg,
    #[arg(long)]
    out: PathBuf,
    /// Also write a corrupted copy of the masks to masks_corrupt/ (bboxify, dilate:R, erode:R, dropout:P, boundary-noise:R:P).
    #[arg(long, value_parser = parse_corruption)]
    corrupt: Option<Corruption>,
    #[arg(long, default_value_t = 10)]
    views: usize,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 256)]
    size: usize,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    rig: PathBuf,
    /// Directory of mask PNGs with masks.json.
    #[arg(long)]
    masks: PathBuf,
    /// Precomputed superpoint id per point, one per line.
    #[arg(long)]
    partition: Option<PathBuf>,
    /// Ground-truth instances; when given, report.json includes scores.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// JSON pipeline config; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    grad_steps: Option<usize>,
    #[arg(long, value_enum)]
    schedule: Option<ScheduleArg>,
    #[arg(long, value_enum)]
    em_unit: Option<UnitArg>,
    #[arg(long)]
    feature_threshold: Option<f64>,
    #[arg(long)]
    post_radius: Option<f64>,
    #[arg(long)]
    min_cluster: Option<usize>,
    /// Forbid matching masks to instances of another category.
    #[arg(long)]
    restrict_category: bool,
    /// Skip EM refinement.
    #[arg(long)]
    no_em: bool,
    /// Start EM from a single all-points instance.
    #[arg(long)]
    no_init: bool,
    /// Skip splitting instances into connected pieces.
    #[arg(long)]
    no_post: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Per-point semantic labels; defaults to the prediction's instance categories.
    #[arg(long)]
    pred_labels: Option<PathBuf>,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "hard")]
    difficulty: DifficultyArg,
    #[arg(long, value_parser = parse_corruption)]
    corrupt: Option<Corruption>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_corruption(s: &str) -> std::result::Result<Corruption, String> {
    s.parse().map_err(|e: partlift::Error| e.to_string())
}

/// A bad argument combination detected after parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            PipelineConfig::from_json(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    if a.views == 0 || a.size == 0 {
        return Err(UsageError("--views and --size must be positive".into()).into());
    }
    create_dir(&a.out)?;
    let spec = make_scene(stage_seed(a.seed, Stage::Generate), a.difficulty.into());
    let rig = partlift::geometry::generate_camera_rig(&RigParams {
        count: a.views,
        height: a.size,
        width: a.size,
        ..Default::default()
    })?;
    let config = PipelineConfig {
        seed: a.seed,
        ..Default::default()
    };
    let data = scene_data(&spec, &rig, None, &config.render, a.seed)?;
    write_ply(&a.out.join("cloud.ply"), &data.cloud, PlyFormat::BinaryLittleEndian)?;
    data.gt.write(&a.out.join("gt.json"))?;
    write_rig(&a.out.join("rig.json"), &rig)?;
    write_spec(&a.out.join("scene.json"), &spec)?;
    write_masks(&a.out, &data.masks)?;
    if let Some(c) = &a.corrupt {
        let dir = a.out.join("masks_corrupt");
        create_dir(&dir)?;
        let corrupted = partlift::masks::corrupt(&data.masks, c, stage_seed(a.seed, Stage::Corrupt));
        write_masks(&dir, &corrupted)?;
    }
    println!(
        "wrote {} points, {} instances, {} masks to {}",
        data.cloud.len(),
        data.gt.len(),
        data.masks.len(),
        a.out.display()
    );
    Ok(())
}

fn segment_config(a: &SegmentArgs) -> Result<PipelineConfig> {
    let mut c = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(v) = a.iterations {
        c.em.iterations = v;
    }
    if let Some(v) = a.lr {
        c.em.learning_rate = v;
    }
    if let Some(v) = a.grad_steps {
        c.em.grad_steps_per_m = v;
    }
    if let Some(v) = a.schedule {
        c.em.view_schedule = match v {
            ScheduleArg::Random => ViewSchedule::Random,
            ScheduleArg::RoundRobin => ViewSchedule::RoundRobin,
        };
    }
    if let Some(v) = a.em_unit {
        c.em_unit = match v {
            UnitArg::Superpoint => EmUnit::Superpoint,
            UnitArg::Point => EmUnit::Point,
        };
    }
    if let Some(v) = a.feature_threshold {
        c.grouping.feature_threshold = v;
    }
    if let Some(v) = a.post_radius {
        c.post.radius = v;
    }
    if let Some(v) = a.min_cluster {
        c.post.min_cluster = v;
    }
    c.em.restrict_to_category |= a.restrict_category;
    c.no_em |= a.no_em;
    c.no_init |= a.no_init;
    c.no_post |= a.no_post;
    c.validate()?;
    Ok(c)
}

fn cmd_segment(a: &SegmentArgs) -> Result<()> {
    let config = segment_config(a)?;
    let cloud = read_ply(&a.cloud)?;
    let rig = read_rig(&a.rig)?;
    let masks = read_masks(&a.masks)?;
    let partition = a
        .partition
        .as_deref()
        .map(|p| read_partition(p, &cloud, config.superpoints.spatial_knn.max(1)))
        .transpose()?;
    let gt = a.gt.as_deref().map(InstanceSegmentation::read).transpose()?;
    let out = run_pipeline(&cloud, &rig, &masks, partition, gt.as_ref(), &config)?;

    create_dir(&a.out)?;
    write(&a.out.join("config.json"), &config.to_json())?;
    write(&a.out.join("labels.txt"), &labels_to_text(&out.semantic_labels))?;
    out.instances.write(&a.out.join("instances.json"))?;
    partlift::em::write_trace(&a.out.join("trace.csv"), &out.trace)?;
    out.scores.write_csv(&a.out.join("scores.csv"))?;
    let report = serde_json::json!({
        "num_points": cloud.len(),
        "num_views": rig.len(),
        "num_masks": masks.len(),
        "num_instances": out.instances.len(),
        "eval": out.report,
    });
    write(&a.out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    match &out.report {
        Some(r) => print!("{}", r.to_table()),
        None => println!("{} instances written to {}", out.instances.len(), a.out.display()),
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let pred = InstanceSegmentation::read(&a.pred)?;
    let gt = InstanceSegmentation::read(&a.gt)?;
    let labels = match &a.pred_labels {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(labels_from_text(&text)?)
        }
        None => None,
    };
    let report = evaluate(&pred, labels.as_deref(), &gt)?;
    if let Some(out) = &a.out {
        report.write_json(out)?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let mut config = load_config(a.config.as_deref())?;
    config.seed = a.seed;
    let scenes = make_benchmark(a.count, a.seed, a.difficulty.into())?;
    let report = ablation_run(&scenes, a.corrupt, &Variant::ALL, &config)?;
    create_dir(&a.out)?;
    write(&a.out.join("config.json"), &config.to_json())?;
    write(&a.out.join("ablation.json"), &report.to_json())?;
    write(&a.out.join("scores.csv"), &report.to_csv())?;
    print!("{}", report.to_table());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let contract = err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some()
            || e.downcast_ref::<partlift::Error>()
                .is_some_and(|e| e.is_contract_violation())
    });
    if contract {
        2
    } else {
        1
    }
}

/// The error chain joined by ": ", skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let s = cause.to_string();
        if !msg.ends_with(&s) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&s);
        }
    }
    msg
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        #[cfg(feature = "parallel")]
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
