use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use log::{info, warn};

use footprint_core::eval::{
    aggregate_sites, connected_components, evaluate_site, read_site_csv, strip_plot_svg, write_site_csv,
    write_summary_csv, Connectivity, InstanceConfig, MeanStat, SiteInput,
};
use footprint_core::fusion::{argmax_decision, fuse_equal, read_probmap, write_probmap, ProbMap};
use footprint_core::ingest::{
    augment_manifest, auto_align, extract_chips, filter_by_ndvi, load_chip, rasterize, ChipConfig, ChipManifest,
    FootprintSet, Split, DEFAULT_MAX_SHIFT,
};
use footprint_core::labels::{decode_labels, encode_labels, signed_distance_transform, LabelMap, LabelMode};
use footprint_core::net::{
    load_model, save_model, train_with_progress, write_loss_curve, DecoderKind, LossReduction, LossWeighting,
    NetworkSpec, TrainConfig, TrainingChip,
};
use footprint_core::raster::{
    band_statistics, ndvi, read_image, read_raster, write_image, write_raster, AnyRaster, ImageFormat,
    MultibandRaster, Raster,
};
use footprint_core::synth::{generate_scene, SceneKind};
use footprint_core::tiling::{tiled_infer, JobConfig};

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Dist,
    Bin,
}

impl From<ModeArg> for LabelMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Dist => LabelMode::Distance,
            ModeArg::Bin => LabelMode::Binary,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum DecoderArg {
    Unpool,
    Tconv,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum WeightingArg {
    Frequency,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ReductionArg {
    Mean,
    Sum,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PredKind {
    /// Any nonzero pixel is a building.
    Mask,
    /// Distance-mode label map (building where class >= 64).
    Dist,
    /// Binary label map (building where class = 2).
    Bin,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum KindArg {
    Random,
    Adjacent,
}

fn format_of(path: &Path) -> Result<ImageFormat> {
    ImageFormat::from_path(path).with_context(|| format!("{}: expected a .pgm, .ppm or .pfm file", path.display()))
}

/// Single-band mask; any nonzero value counts as 1.
fn read_mask(path: &Path) -> Result<Raster<u8>> {
    let r = read_raster(path, format_of(path)?)
        .with_context(|| format!("reading {}", path.display()))?
        .into_f32()?;
    if r.band_count() != 1 {
        bail!("{}: a mask must have one band", path.display());
    }
    Ok(r.band(0).map(|v| (v != 0.0) as u8))
}

fn write_mask(mask: &Raster<u8>, path: &Path) -> Result<()> {
    let visible = MultibandRaster::single(mask.map(|v| if v != 0 { 255 } else { 0 }));
    write_raster(&AnyRaster::U8(visible), path, ImageFormat::Pgm)?;
    Ok(())
}

fn read_labels(path: &Path, mode: LabelMode) -> Result<LabelMap> {
    let r = read_raster(path, format_of(path)?)
        .with_context(|| format!("reading {}", path.display()))?
        .into_i32()?;
    if r.band_count() != 1 {
        bail!("{}: a label map must have one band", path.display());
    }
    Ok(LabelMap::new(r.band(0).clone(), mode)?)
}

fn write_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    let r = MultibandRaster::single(labels.raster().map(|v| v as u8));
    write_raster(&AnyRaster::U8(r), path, ImageFormat::Pgm)?;
    Ok(())
}

fn to_f32(image: &MultibandRaster<u8>) -> Result<MultibandRaster<f32>> {
    let bands = image.bands().iter().map(|b| b.map(|v| v as f32)).collect();
    Ok(MultibandRaster::new(bands, image.band_names().to_vec())?)
}

fn band_list(s: &str) -> Vec<String> {
    s.split(',').map(|b| b.trim().to_string()).filter(|b| !b.is_empty()).collect()
}

// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct EncodeArgs {
    /// Building mask (nonzero = building).
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, value_enum, default_value = "dist")]
    mode: ModeArg,
    /// Label map output (.pgm, classes 1-128 or 1-2).
    #[arg(long)]
    out: PathBuf,
    /// Also write the signed distance field (.pfm).
    #[arg(long)]
    distance_out: Option<PathBuf>,
}

pub fn encode(a: EncodeArgs) -> Result<()> {
    let mask = read_mask(&a.mask)?;
    let labels = encode_labels(&mask, a.mode.into())?;
    write_labels(&labels, &a.out)?;
    if let Some(p) = a.distance_out {
        let field = signed_distance_transform(&mask)?.field;
        write_raster(&AnyRaster::F32(MultibandRaster::single(field)), &p, ImageFormat::Pfm)?;
    }
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    /// Chip manifest CSV.
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "dist")]
    mode: ModeArg,
    /// Bands to train on, by name (e.g. `NIR,G,B`). Defaults to all.
    #[arg(long)]
    bands: Option<String>,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    stages: usize,
    #[arg(long, value_enum, default_value = "unpool")]
    decoder: DecoderArg,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 0.9)]
    momentum: f32,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f32,
    #[arg(long, default_value_t = 3)]
    batch: usize,
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "frequency")]
    weighting: WeightingArg,
    #[arg(long, value_enum, default_value = "mean")]
    reduction: ReductionArg,
    /// Write `iteration,loss` rows here.
    #[arg(long)]
    loss_curve: Option<PathBuf>,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mode: LabelMode = a.mode.into();
    let manifest = ChipManifest::read(&a.manifest)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let split: Split = a.split.into();
    let mut chips = Vec::new();
    for r in manifest.records.iter().filter(|r| r.split == split) {
        let (image, labels) = load_chip(r, base, mode)?;
        let image = match &a.bands {
            Some(b) => image.select(&band_list(b))?,
            None => image,
        };
        chips.push(TrainingChip { image: to_f32(&image)?, labels });
    }
    if chips.is_empty() {
        bail!("manifest has no chips in the requested split");
    }
    let bands = chips[0].image.band_count();
    let decoder = match a.decoder {
        DecoderArg::Unpool => DecoderKind::IndexUnpool,
        DecoderArg::Tconv => DecoderKind::TransposedConv,
    };
    let spec = NetworkSpec::encoder_decoder(bands, a.width, a.stages, mode.classes(), decoder);
    let cfg = TrainConfig {
        learning_rate: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        batch_size: a.batch,
        iterations: a.iterations,
        seed: a.seed,
        loss_weighting: match a.weighting {
            WeightingArg::Frequency => LossWeighting::ClassFrequency,
            WeightingArg::None => LossWeighting::None,
        },
        reduction: match a.reduction {
            ReductionArg::Mean => LossReduction::Mean,
            ReductionArg::Sum => LossReduction::Sum,
        },
    };
    info!("training on {} chips, {} bands", chips.len(), bands);
    let every = (a.iterations / 20).max(1);
    let out = train_with_progress(spec, &chips, &cfg, |i, loss| {
        if i % every == 0 {
            info!("iteration {i}: loss {loss:.5}");
        }
    })?;
    save_model(&out.model, &a.out)?;
    if let Some(p) = a.loss_curve {
        write_loss_curve(p, &out.losses)?;
    }
    if out.clamped > 0 {
        warn!("{} labeled pixels hit the log clamp during training", out.clamped);
    }
    println!(
        "trained {} iterations, final loss {:.5}",
        out.losses.len(),
        out.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Args)]
pub struct InferArgs {
    /// Model checkpoint; give two together with --fuse.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    /// Average the two models' softmax outputs.
    #[arg(long)]
    fuse: bool,
    /// Input image (.ppm/.pgm, extra bands in sidecars).
    #[arg(long)]
    image: PathBuf,
    /// Label map output (.pgm).
    #[arg(long)]
    out: PathBuf,
    /// Building mask output (.pgm, 0/255).
    #[arg(long)]
    mask_out: Option<PathBuf>,
    /// Probability map output.
    #[arg(long)]
    probs: Option<PathBuf>,
    /// Worker threads (FORGE_WORKERS overrides).
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 512)]
    tile: usize,
    /// Context margin per tile; defaults to the receptive radius.
    #[arg(long)]
    halo: Option<usize>,
    /// Ground sample distance in meters, for throughput reporting.
    #[arg(long, default_value_t = 1.0)]
    pixel_size: f64,
}

pub fn infer(a: InferArgs) -> Result<()> {
    match (a.model.len(), a.fuse) {
        (1, false) | (2, true) => {}
        (2, false) => bail!(footprint_core::Error::Config("two models need --fuse".into())),
        (n, true) => bail!(footprint_core::Error::Config(format!("--fuse needs exactly two models, got {n}"))),
        (n, false) => bail!(footprint_core::Error::Config(format!("expected one model, got {n}"))),
    }
    let models = a
        .model
        .iter()
        .map(|p| load_model(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let image = read_image(&a.image).with_context(|| format!("reading {}", a.image.display()))?.with_pixel_size(a.pixel_size)?;
    let job = JobConfig { workers: a.workers, tile: a.tile, halo: a.halo }.with_env_override()?;
    let out = tiled_infer(&job, &models, &image)?;
    write_labels(&out.labels, &a.out)?;
    if let Some(p) = a.mask_out {
        write_mask(&out.labels.building_mask(), &p)?;
    }
    if let Some(p) = a.probs {
        write_probmap(&out.probs, p)?;
    }
    let t = out.throughput;
    println!(
        "{} tiles, {} workers, {:.0} pixels/s, {:.3} km2/min",
        out.plan.tiles.len(),
        job.workers,
        t.pixels_per_second,
        t.km2_per_minute
    );
    Ok(())
}

#[derive(Args)]
pub struct FuseArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Fused probability map.
    #[arg(long)]
    out: PathBuf,
    /// Label map from the fused probabilities.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    mask_out: Option<PathBuf>,
}

pub fn fuse(a: FuseArgs) -> Result<()> {
    let fused: ProbMap = fuse_equal(&read_probmap(&a.a)?, &read_probmap(&a.b)?)?;
    write_probmap(&fused, &a.out)?;
    if a.labels.is_some() || a.mask_out.is_some() {
        let labels = argmax_decision(&fused)?;
        if let Some(p) = a.labels {
            write_labels(&labels, &p)?;
        }
        if let Some(p) = a.mask_out {
            write_mask(&labels.building_mask(), &p)?;
        }
    }
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    /// Prediction raster.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, value_enum, default_value = "mask")]
    pred_kind: PredKind,
    /// Ground truth: footprint text file (.txt) or building mask image.
    #[arg(long)]
    gt: PathBuf,
    /// Optional validity mask; zero pixels are not scored.
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Site CSV output (columns in `forge report --help`).
    #[arg(long)]
    out: PathBuf,
    /// Site name; defaults to the prediction file stem.
    #[arg(long)]
    site: Option<String>,
    #[arg(long, default_value = "8", value_parser = ["4", "8"])]
    connectivity: String,
    /// Minimum overlap for a detection, as a fraction of the building's area.
    #[arg(long, default_value_t = 0.0)]
    min_overlap: f64,
    #[arg(long, default_value_t = 1.0)]
    pixel_size: f64,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let pred = match a.pred_kind {
        PredKind::Mask => read_mask(&a.pred)?,
        PredKind::Dist => decode_labels(&read_labels(&a.pred, LabelMode::Distance)?)?,
        PredKind::Bin => read_labels(&a.pred, LabelMode::Binary)?.building_mask(),
    };
    let connectivity: Connectivity = a.connectivity.parse()?;
    let gt = if a.gt.extension().is_some_and(|e| e == "txt") {
        rasterize(&FootprintSet::read(&a.gt)?, pred.width(), pred.height())
    } else {
        connected_components(&read_mask(&a.gt)?, connectivity).labels
    };
    let gt = gt.with_pixel_size(a.pixel_size)?;
    let valid = a.valid.as_deref().map(read_mask).transpose()?;
    let site = a
        .site
        .unwrap_or_else(|| a.pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let input = SiteInput { site, pred, gt_instances: gt, valid };
    let cfg = InstanceConfig { connectivity, min_overlap: a.min_overlap };
    let report = evaluate_site(&input, &cfg)?;
    write_site_csv(std::slice::from_ref(&report), fs::File::create(&a.out)?)?;
    let fmt = |v: Option<f64>| v.map_or("NA".into(), |v| format!("{v:.4}"));
    println!(
        "{}: P {} R {} F {} IoU {} detected {}/{}",
        report.site,
        fmt(report.pixel.precision),
        fmt(report.pixel.recall),
        fmt(report.pixel.f_score),
        fmt(report.pixel.iou),
        report.instances.detected_count,
        report.instances.gt_building_count
    );
    Ok(())
}

#[derive(Args)]
pub struct AlignArgs {
    /// Footprint text file (`id, x1 y1 x2 y2 ...` per line).
    #[arg(long)]
    footprints: PathBuf,
    /// Reference building mask the footprints should line up with.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_SHIFT)]
    max_shift: usize,
    /// Write the shifted footprints here.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn align(a: AlignArgs) -> Result<()> {
    let reference = read_mask(&a.reference)?;
    let fps = FootprintSet::read(&a.footprints)?;
    let mask = rasterize(&fps, reference.width(), reference.height()).map(|v| (v > 0) as u8);
    let r = auto_align(&mask, &reference, a.max_shift)?;
    println!("dx,dy,iou\n{},{},{:.6}", r.dx, r.dy, r.score);
    if let Some(p) = a.out {
        fps.translate(r.dx as f64, r.dy as f64).write(p)?;
    }
    Ok(())
}

#[derive(Args)]
pub struct ChipsArgs {
    #[arg(long)]
    image: PathBuf,
    /// Building footprints (text); alternative to --mask.
    #[arg(long, conflicts_with = "mask", required_unless_present = "mask")]
    footprints: Option<PathBuf>,
    /// Building mask image; alternative to --footprints.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "dist")]
    mode: ModeArg,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 500)]
    chip: usize,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Share of chips without any building pixel.
    #[arg(long)]
    negative_fraction: Option<f64>,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long, default_value = "chip")]
    stem: String,
    /// Drop footprints whose mean NDVI exceeds this (needs R and NIR bands).
    #[arg(long, num_args = 0..=1, default_missing_value = "0.3", requires = "footprints")]
    ndvi_threshold: Option<f32>,
    /// Existing manifest to extend with the new chips.
    #[arg(long)]
    augment: Option<PathBuf>,
}

pub fn chips(a: ChipsArgs) -> Result<()> {
    let image = read_image(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let mask = match (&a.footprints, &a.mask) {
        (Some(f), _) => {
            let mut fps = FootprintSet::read(f)?;
            if let Some(t) = a.ndvi_threshold {
                let (nir, red) = match (image.band_by_name("NIR"), image.band_by_name("R")) {
                    (Some(n), Some(r)) => (n, r),
                    _ => bail!(footprint_core::Error::Argument("NDVI filtering needs R and NIR bands".into())),
                };
                let filtered = filter_by_ndvi(&fps, &ndvi(nir, red)?, t)?;
                if !filtered.dropped.is_empty() {
                    info!("NDVI > {t}: dropped footprints {:?}", filtered.dropped);
                }
                fps = filtered.kept;
            }
            rasterize(&fps, image.width(), image.height()).map(|v| (v > 0) as u8)
        }
        (None, Some(m)) => read_mask(m)?,
        (None, None) => unreachable!("clap requires one of them"),
    };
    let labels = encode_labels(&mask, a.mode.into())?;
    let cfg = ChipConfig {
        chip: a.chip,
        count: a.count,
        seed: a.seed,
        negative_fraction: a.negative_fraction,
        split: a.split.into(),
        stem: a.stem,
    };
    let mut manifest = extract_chips(&image, &labels, &cfg, &a.out_dir)?;
    if let Some(base_path) = a.augment {
        let mut base = ChipManifest::read(&base_path)?;
        let base_dir = base_path.parent().unwrap_or(Path::new(".")).canonicalize()?;
        if base_dir != a.out_dir.canonicalize()? {
            for r in &mut base.records {
                r.image = base_dir.join(&r.image).to_string_lossy().into_owned();
                r.label = base_dir.join(&r.label).to_string_lossy().into_owned();
            }
        }
        manifest = augment_manifest(&base, &manifest)?;
    }
    let path = a.out_dir.join("manifest.csv");
    manifest.write(&path)?;
    let negatives = manifest
        .records
        .iter()
        .filter(|r| r.polarity == footprint_core::ingest::Polarity::Negative)
        .count();
    println!("{} chips ({negatives} negative) listed in {}", manifest.len(), path.display());
    Ok(())
}

#[derive(Args)]
pub struct StatsArgs {
    #[arg(long, required = true)]
    image: Vec<PathBuf>,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn stats(a: StatsArgs) -> Result<()> {
    let images = a.image.iter().map(read_image).collect::<footprint_core::Result<Vec<_>>>()?;
    let s = band_statistics(&images)?;
    let mut text = String::from("band,mean,min,max\n");
    for (name, b) in s.band_names.iter().zip(&s.bands) {
        text.push_str(&format!("{name},{:.6},{},{}\n", b.mean, b.min, b.max));
    }
    match a.out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

#[derive(Args)]
#[command(after_help = "Site CSV columns: site, tp, fp, tn, fn, precision, recall, f_score, iou, accuracy, \
gt_buildings, predicted, detected, detection_rate, precision_to_recall, then bin1_gt, bin1_detected ... bin5_detected \
for the size bins <=50, 50-150, 150-250, 250-450 and >450 m2. Undefined values are NA.")]
pub struct ReportArgs {
    /// Site CSVs written by `forge eval`.
    #[arg(long, required = true, num_args = 1..)]
    sites: Vec<PathBuf>,
    /// Writes sites.csv, summary.csv and strips.svg here.
    #[arg(long)]
    out_dir: PathBuf,
}

pub fn report(a: ReportArgs) -> Result<()> {
    let mut reports = Vec::new();
    for p in &a.sites {
        reports.extend(read_site_csv(fs::File::open(p).with_context(|| format!("opening {}", p.display()))?)?);
    }
    let summary = aggregate_sites(&reports)?;
    fs::create_dir_all(&a.out_dir)?;
    write_site_csv(&reports, fs::File::create(a.out_dir.join("sites.csv"))?)?;
    write_summary_csv(&summary, fs::File::create(a.out_dir.join("summary.csv"))?)?;
    fs::write(a.out_dir.join("strips.svg"), strip_plot_svg(&reports))?;
    let fmt = |s: MeanStat| s.mean.map_or("NA".into(), |v| format!("{v:.4}"));
    println!("sites      {}", summary.sites);
    println!("precision  {}", fmt(summary.precision));
    println!("recall     {}", fmt(summary.recall));
    println!("f-score    {}", fmt(summary.f_score));
    println!("iou        {}", fmt(summary.iou));
    println!("detection  {} ({}/{} buildings)", fmt(summary.detection_rate), summary.detected, summary.gt_buildings);
    Ok(())
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "random")]
    kind: KindArg,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Receives scene.ppm (+ scene.band3.pgm for NIR), mask.pgm and footprints.txt.
    #[arg(long)]
    out_dir: PathBuf,
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let kind = match a.kind {
        KindArg::Random => SceneKind::Random,
        KindArg::Adjacent => SceneKind::Adjacent,
    };
    let scene = generate_scene(kind, a.size, a.seed)?;
    fs::create_dir_all(&a.out_dir)?;
    write_image(&scene.image, a.out_dir.join("scene.ppm"))?;
    write_mask(&scene.mask, &a.out_dir.join("mask.pgm"))?;
    scene.footprints().write(a.out_dir.join("footprints.txt"))?;
    println!("{} buildings in a {}x{} scene", scene.buildings.len(), a.size, a.size);
    Ok(())
}
