use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use image::{Luma, Rgb, RgbImage};

use nucleoseg::config::{parse_scene_spec, parse_size, PipelineConfig};
use nucleoseg::data::{
    load_rgb, touching_pairs_for, write_annotation_sidecar, EvalReport, Manifest, ManifestRecord, SceneSpec, Split,
};
use nucleoseg::enet::{build_enet, network_input, FusedMaps, FusedPipeline, Role};
use nucleoseg::experiment::{generate_scenes, split_indices};
use nucleoseg::nst::write_tensor;
use nucleoseg::optim::{read_checkpoint, train_fusion, train_stage, PipelineSample, TrainLog};
use nucleoseg::post::LabelMap;
use nucleoseg::{Dims, Error, Rng, Tensor};

type Result<T> = std::result::Result<T, Error>;

#[derive(Parser)]
#[command(name = "nucleoseg", version, about = "Nuclear segmentation with fused region/boundary networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic H&E dataset with instance annotations.
    Gen(GenArgs),
    /// Train the region, boundary and fusion networks.
    Train(TrainArgs),
    /// Segment images with trained checkpoints.
    Infer(InferArgs),
    /// Score predicted label maps against a manifest.
    Eval(EvalArgs),
    /// Model utilities.
    Model {
        #[command(subcommand)]
        command: ModelCommand,
    },
}

fn size_arg(v: &str) -> std::result::Result<(usize, usize), String> {
    parse_size(v).ok_or_else(|| format!("expected HxW such as 96x128, got {v:?}"))
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    images: usize,
    #[arg(long, value_parser = size_arg, default_value = "96x128")]
    size: (usize, usize),
    #[arg(long, env = "NUCLEOSEG_SEED", default_value_t = 0)]
    seed: u64,
    /// `scene.key = value` overrides for the generator.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Fraction of images assigned to the training split.
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Region,
    Boundary,
    Fusion,
    All,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    stage: Stage,
    /// Overrides `train.seed`.
    #[arg(long, env = "NUCLEOSEG_SEED")]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct InferArgs {
    /// Directory holding region.nst, boundary.nst and fusion.nst.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// An RGB PNG or a directory of them.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the region, boundary and fused probability maps.
    #[arg(long)]
    dump_intermediate: bool,
    /// Defaults to `config.txt` next to the checkpoints, if present.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Directory of `<stem>_labels.png` predictions.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth manifest, or the directory holding `manifest.tsv`.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Row label in the printed table.
    #[arg(long, default_value = "Fused-ENet+CD+Watershed")]
    method: String,
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Print every layer with its output shape.
    Describe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "region")]
        role: RoleArg,
        #[arg(long, default_value_t = 1.0)]
        width: f64,
        #[arg(long, value_parser = size_arg, default_value = "360x480")]
        size: (usize, usize),
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Region,
    Boundary,
    Fusion,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Image(_) => 1,
        Error::Config(_) | Error::Parameter(_) => 2,
        Error::Numeric(_) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Model { command } => cmd_model(command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Runs `f` over `items` on up to `jobs` threads, keeping input order.
fn parallel<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let d = SceneSpec::default();
    // Keep the default nucleus density when the canvas size changes.
    let area = (a.size.0 * a.size.1) as f64 / (d.height * d.width) as f64;
    let count = ((d.nucleus_count as f64 * area).round() as usize).max(1);
    let base = SceneSpec { height: a.size.0, width: a.size.1, nucleus_count: count, ..d };
    let spec = match &a.spec {
        Some(p) => parse_scene_spec(&fs::read_to_string(p)?, base)?,
        None => base,
    };
    spec.validate()?;
    fs::create_dir_all(&a.out)?;
    let cfg = PipelineConfig::default();
    let indices: Vec<usize> = (0..a.images).collect();
    let scenes = parallel(&indices, a.jobs, |&i| {
        let mut one = generate_scenes(&spec, &cfg.stain, i + 1, a.seed)?;
        Ok(one.pop().expect("one scene"))
    })?;
    let (train, _) = split_indices(a.images, a.ratio, a.seed);
    let mut manifest = Manifest { base: a.out.clone(), records: Vec::new() };
    for (i, (rgb, ann)) in scenes.iter().enumerate() {
        let stem = format!("scene_{i:03}");
        let (rgb_name, labels_name) = (format!("{stem}.png"), format!("{stem}_labels.png"));
        rgb.save(a.out.join(&rgb_name))?;
        ann.instances.save_png(&a.out.join(&labels_name))?;
        write_annotation_sidecar(ann, &a.out.join(format!("{stem}.ann.tsv")))?;
        let split = if train.binary_search(&i).is_ok() { Split::Train } else { Split::Test };
        manifest.records.push(ManifestRecord { rgb: rgb_name.into(), labels: labels_name.into(), split });
    }
    manifest.write(&a.out.join("manifest.tsv"))?;
    println!("wrote {} scenes of {}x{} to {}", a.images, a.size.0, a.size.1, a.out.display());
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn load_samples(m: &Manifest, split: Split, cfg: &PipelineConfig) -> Result<Vec<PipelineSample>> {
    m.split(split)
        .map(|r| {
            let rgb = load_rgb(&m.resolve(&r.rgb))?;
            let instances = LabelMap::load_png(&m.resolve(&r.labels))?;
            if (instances.height, instances.width) != (rgb.height() as usize, rgb.width() as usize) {
                return Err(Error::Data(format!("{} and its label map differ in size", r.rgb.display())));
            }
            Ok(PipelineSample { input: network_input(&rgb, cfg.input, &cfg.stain)?, instances })
        })
        .collect()
}

fn write_logs(out: &Path, role: Role, log: &TrainLog) -> Result<()> {
    fs::write(out.join(format!("{role}_log.csv")), log.to_csv())?;
    fs::write(out.join(format!("{role}_epochs.csv")), log.epochs_csv())?;
    let last = log.steps.last().map_or(f64::NAN, |s| s.loss);
    println!("{role}: {} steps, final loss {last:.4}, {:.1}s", log.steps.len(), log.seconds());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.train.seed = seed;
    }
    let manifest = Manifest::read(&a.manifest)?;
    manifest.check_paths()?;
    let train = load_samples(&manifest, Split::Train, &cfg)?;
    let test = load_samples(&manifest, Split::Test, &cfg)?;
    if train.is_empty() {
        return Err(Error::Data(format!("{} lists no training images", a.manifest.display())));
    }
    let ckpt = |role: Role| a.out.join(format!("{role}.nst"));
    if a.stage == Stage::Fusion {
        for role in [Role::Region, Role::Boundary] {
            if !ckpt(role).exists() {
                return Err(Error::Precondition(format!("stage fusion needs {} from an earlier run", ckpt(role).display())));
            }
        }
    }
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.txt"), cfg.to_text())?;
    for role in [Role::Region, Role::Boundary] {
        if a.stage == Stage::All || a.stage == Stage::from_role(role) {
            let (_, log) = train_stage(role, &train, &test, &cfg.train, Some(&ckpt(role)))?;
            write_logs(&a.out, role, &log)?;
        }
    }
    if matches!(a.stage, Stage::All | Stage::Fusion) {
        let region = read_checkpoint(&ckpt(Role::Region))?;
        let boundary = read_checkpoint(&ckpt(Role::Boundary))?;
        let (_, log) = train_fusion(&region, &boundary, &train, &test, &cfg.train, Some(&ckpt(Role::Fusion)))?;
        write_logs(&a.out, Role::Fusion, &log)?;
    }
    Ok(())
}

impl Stage {
    fn from_role(r: Role) -> Stage {
        match r {
            Role::Region => Stage::Region,
            Role::Boundary => Stage::Boundary,
            Role::Fusion => Stage::Fusion,
        }
    }
}

/// Distinct colours for instance outlines.
const PALETTE: [[u8; 3]; 6] = [[0, 255, 0], [255, 255, 0], [0, 255, 255], [255, 0, 255], [255, 128, 0], [128, 255, 128]];

fn overlay(rgb: &RgbImage, labels: &LabelMap) -> RgbImage {
    let mut out = rgb.clone();
    let edge = labels.contours();
    for y in 0..labels.height {
        for x in 0..labels.width {
            let id = labels.get(y, x);
            if id != 0 && edge.get(y, x) {
                out.put_pixel(x as u32, y as u32, Rgb(PALETTE[(id as usize - 1) % PALETTE.len()]));
            }
        }
    }
    out
}

fn prob_png(p: &[f32], h: usize, w: usize) -> image::GrayImage {
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(p[y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

fn dump(values: &[f32], h: usize, w: usize, path: &Path) -> Result<()> {
    let t = Tensor::from_vec(Dims::new(1, 1, h, w)?, values.to_vec())?;
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_tensor(&t, &mut f)
}

fn input_images(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        if !input.exists() {
            return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} not found", input.display()))));
        }
        return Ok(vec![input.to_path_buf()]);
    }
    let mut v: Vec<PathBuf> = fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            name.ends_with(".png") && !name.ends_with("_labels.png") && !name.ends_with("_overlay.png") && !name.ends_with("_prob.png")
        })
        .collect();
    v.sort();
    if v.is_empty() {
        return Err(Error::Data(format!("no PNG images in {}", input.display())));
    }
    Ok(v)
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let dir = match (&a.checkpoints, &a.config) {
        (Some(d), _) => d.clone(),
        (None, Some(c)) => PipelineConfig::load(c)?
            .checkpoints
            .ok_or_else(|| Error::Config("no --checkpoints and no paths.checkpoints in the config".into()))?,
        (None, None) => return Err(Error::Config("--checkpoints is required without a config".into())),
    };
    let cfg = match &a.config {
        Some(c) => PipelineConfig::load(c)?,
        None if dir.join("config.txt").exists() => PipelineConfig::load(&dir.join("config.txt"))?,
        None => PipelineConfig::default(),
    };
    let mut nets = Vec::new();
    for role in Role::ALL {
        let p = dir.join(format!("{role}.nst"));
        if !p.exists() {
            return Err(Error::Precondition(format!("checkpoint set incomplete: {} is missing", p.display())));
        }
        nets.push(read_checkpoint(&p)?);
    }
    let fusion = nets.pop().expect("three nets");
    let boundary = nets.pop().expect("three nets");
    let region = nets.pop().expect("three nets");
    let mut pipeline = FusedPipeline::new(region, boundary, fusion, cfg.stain.clone(), cfg.post.clone())?;
    pipeline.channel = cfg.input;
    let images = input_images(&a.input)?;
    fs::create_dir_all(&a.out)?;
    let reports = parallel(&images, a.jobs, |path| {
        let rgb = load_rgb(path)?;
        let started = Instant::now();
        let (maps, labels) = pipeline.segment(&rgb)?;
        let ms = started.elapsed().as_secs_f64() * 1e3;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        write_outputs(&a.out, &stem, &rgb, &maps, &labels, a.dump_intermediate)?;
        Ok(format!("{stem}: {}x{}, {} instances, {ms:.1} ms", maps.height, maps.width, labels.max_id()))
    })?;
    for r in reports {
        println!("{r}");
    }
    Ok(())
}

fn write_outputs(out: &Path, stem: &str, rgb: &RgbImage, maps: &FusedMaps, labels: &LabelMap, intermediate: bool) -> Result<()> {
    let (h, w) = (maps.height, maps.width);
    prob_png(&maps.fused, h, w).save(out.join(format!("{stem}_prob.png")))?;
    labels.save_png(&out.join(format!("{stem}_labels.png")))?;
    overlay(rgb, labels).save(out.join(format!("{stem}_overlay.png")))?;
    if intermediate {
        dump(&maps.region, h, w, &out.join(format!("{stem}_region.nst")))?;
        dump(&maps.boundary, h, w, &out.join(format!("{stem}_boundary.nst")))?;
        dump(&maps.fused, h, w, &out.join(format!("{stem}_fused.nst")))?;
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let truth_manifest = if a.truth.is_dir() { a.truth.join("manifest.tsv") } else { a.truth.clone() };
    let manifest = Manifest::read(&truth_manifest)?;
    let has_predictions = fs::read_dir(&a.pred)
        .map(|mut d| d.any(|e| e.is_ok_and(|e| e.file_name().to_string_lossy().ends_with("_labels.png"))))
        .unwrap_or(false);
    if !has_predictions {
        return Err(Error::Data(format!("no predicted label maps in {}", a.pred.display())));
    }
    let records: Vec<&ManifestRecord> = manifest
        .records
        .iter()
        .filter(|r| match a.split {
            SplitArg::Train => r.split == Split::Train,
            SplitArg::Test => r.split == Split::Test,
            SplitArg::All => true,
        })
        .collect();
    if records.is_empty() {
        return Err(Error::Data(format!("{} has no records in the requested split", a.truth.display())));
    }
    let pred_path = |r: &ManifestRecord| {
        let stem = r.rgb.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        (stem.clone(), a.pred.join(format!("{stem}_labels.png")))
    };
    let missing: Vec<String> = records.iter().map(|r| pred_path(r)).filter(|(_, p)| !p.exists()).map(|(s, _)| s).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("no prediction for: {}", missing.join(", "))));
    }
    let mut report = EvalReport::default();
    for r in records {
        let (stem, p) = pred_path(r);
        let truth_path = manifest.resolve(&r.labels);
        let truth = LabelMap::load_png(&truth_path)?;
        let pred = LabelMap::load_png(&p)?;
        let pairs = touching_pairs_for(&truth_path, &truth)?;
        report.evaluate(&stem, &pred, &truth, &pairs, cfg.iou_t)?;
    }
    fs::write(&a.out, report.to_csv())?;
    print!("{}", report.table(&a.method));
    Ok(())
}

fn cmd_model(c: ModelCommand) -> Result<()> {
    match c {
        ModelCommand::Describe { checkpoint, role, width, size } => {
            let model = match checkpoint {
                Some(p) => read_checkpoint(&p)?,
                None => {
                    let role = match role {
                        RoleArg::Region => Role::Region,
                        RoleArg::Boundary => Role::Boundary,
                        RoleArg::Fusion => Role::Fusion,
                    };
                    build_enet(role, width, role.input_channels(), &mut Rng::new(0))?
                }
            };
            print!("{}", model.describe(size.0, size.1));
            Ok(())
        }
    }
}
