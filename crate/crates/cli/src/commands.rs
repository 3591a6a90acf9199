use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};
use patho_client::PathoClient;
use patho_core::activation::{build_activation_net, ActivationNet, ActivationStack};
use patho_core::descriptor::{
    apply_edits, describe_image, load_descriptors, multiply, remove_all, sample_subset, save_descriptors, DescriptorSet,
    EditOp, LocateParams,
};
use patho_core::detector::{train_detector as fit_detector, Detector};
use patho_core::eval::{
    ablation_percept, severity_curve as run_curve, AblationSetup, CurveItem, Embedding, EvalReport,
    FeatureNetEmbedding, SeverityModel, StubSeverity, StubSynthesizer, Synthesizer, ThumbnailEmbedding, CURVE_SCALES,
};
use patho_core::imaging::{RetinalImage, VesselMask};
use patho_core::pathogan::{write_loss_csv, Discriminator, FeatureNet, FrozenNets, GanTrainer, Generator, NoiseCode};
use patho_core::preprocess::{crop_to_fov, ingest as run_ingest, DatasetManifest, Split, Store};

use crate::config::RunConfig;
use crate::data::{gan_samples, image_dir, labeled_images};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            Self::Train => Some(Split::Train),
            Self::Test => Some(Split::Test),
            Self::All => None,
        }
    }
}

/// A local checkpoint or a model served by a running service.
#[derive(Debug, Clone, Args)]
pub struct ModelSource {
    /// Local checkpoint.
    #[arg(long, conflicts_with = "server", required_unless_present = "server")]
    pub checkpoint: Option<PathBuf>,
    /// Base URL of a running service, e.g. http://127.0.0.1:8080.
    #[arg(long, requires = "model_id")]
    pub server: Option<String>,
    /// Model id on the server.
    #[arg(long)]
    pub model_id: Option<String>,
}

enum Remote {
    Local(PathBuf),
    Server {
        rt: tokio::runtime::Runtime,
        client: PathoClient,
        id: String,
    },
}

impl ModelSource {
    fn resolve(self) -> Result<Remote> {
        match (self.checkpoint, self.server) {
            (Some(p), _) => Ok(Remote::Local(p)),
            (None, Some(url)) => Ok(Remote::Server {
                rt: tokio::runtime::Runtime::new()?,
                client: PathoClient::new(&url),
                id: self.model_id.ok_or_else(|| anyhow!("--server needs --model-id"))?,
            }),
            (None, None) => bail!("pass --checkpoint or --server"),
        }
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn csv_file(path: &Path) -> Result<BufWriter<File>> {
    create_parent(path)?;
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn ingest(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<()> {
    let manifest = DatasetManifest::load(manifest)?;
    let report = run_ingest(&manifest, &cfg.preprocess(), out)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    log::info!("{} written, {} unchanged", report.written.len(), report.skipped.len());
    println!("{}", out.join(patho_core::preprocess::INDEX_FILE).display());
    Ok(())
}

pub fn train_detector(cfg: &RunConfig, store: &Path, out: &Path, steps: Option<usize>) -> Result<()> {
    let store = Store::open(store)?;
    let config = cfg.detector();
    let data = labeled_images(&store, Some(Split::Train), config.input_size)?;
    let mut schedule = cfg.detector_schedule.clone();
    if let Some(s) = steps {
        schedule.steps = s;
    }
    log::info!("training detector on {} images for {} steps", data.len(), schedule.steps);
    let (detector, losses) = fit_detector(&data, config, &schedule)?;
    fs::create_dir_all(out)?;
    let ckpt = out.join("detector.safetensors");
    detector.save(&ckpt)?;
    let loss_path = out.join("detector_losses.csv");
    let mut w = csv_file(&loss_path)?;
    writeln!(w, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    w.flush()?;
    println!("{}", ckpt.display());
    println!("{}", loss_path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// A single image.
    #[arg(long, conflicts_with = "store", required_unless_present = "store")]
    pub image: Option<PathBuf>,
    /// Image id recorded in the descriptor file; defaults to the file stem.
    #[arg(long)]
    pub image_id: Option<String>,
    /// Every image of a store split.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    /// Descriptor JSON path for one image, a directory for a store.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the first activation map as a heatmap PNG (local only).
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelSource,
}

enum Extractor {
    Local(Detector, ActivationNet),
    Remote(tokio::runtime::Runtime, PathoClient, String),
}

impl Extractor {
    fn extract(&self, id: &str, image: &RetinalImage) -> Result<(DescriptorSet, Vec<String>, Option<ActivationStack>)> {
        match self {
            Self::Local(detector, net) => {
                let size = detector.config().input_size;
                let ex = describe_image(detector, net, image, &LocateParams::for_size(size))?;
                Ok((ex.set, ex.warnings, Some(ex.stack)))
            }
            Self::Remote(rt, client, model) => {
                let (set, warnings) = rt.block_on(client.extract_image(model, id, image))?;
                Ok((set, warnings, None))
            }
        }
    }
}

pub fn extract(_cfg: &RunConfig, args: ExtractArgs) -> Result<()> {
    let extractor = match args.model.resolve()? {
        Remote::Local(p) => {
            let detector = Detector::load(&p).with_context(|| format!("loading detector {}", p.display()))?;
            let net = build_activation_net(&detector)?;
            Extractor::Local(detector, net)
        }
        Remote::Server { rt, client, id } => Extractor::Remote(rt, client, id),
    };
    let mut items = Vec::new();
    if let Some(path) = &args.image {
        let id = args
            .image_id
            .clone()
            .unwrap_or_else(|| path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string());
        items.push((id, RetinalImage::load(path)?, args.out.clone()));
    } else if let Some(root) = &args.store {
        let store = Store::open(root)?;
        fs::create_dir_all(&args.out)?;
        for e in store.entries(args.split.split()) {
            items.push((e.id.clone(), store.image(e)?, args.out.join(format!("{}.json", e.id))));
        }
    }
    let single = args.image.is_some();
    for (id, image, out) in items {
        let (set, warnings, stack) = extractor.extract(&id, &image)?;
        for w in &warnings {
            log::warn!("{id}: {w}");
        }
        create_parent(&out)?;
        save_descriptors(&out, &set, &id)?;
        log::info!("{id}: {} descriptors", set.len());
        println!("{}", out.display());
        if let (true, Some(path), Some(stack)) = (single, &args.heatmap, &stack) {
            create_parent(path)?;
            stack.save_heatmap(path)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainGanArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Frozen detector checkpoint; also the descriptor source.
    #[arg(long)]
    pub detector: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured epochs.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Initialisation seed of the generator and discriminator.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Save intermediate checkpoints every N steps (0 disables).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

pub fn train_gan(cfg: &RunConfig, args: TrainGanArgs) -> Result<()> {
    let store = Store::open(&args.store)?;
    let detector = Detector::load(&args.detector)?;
    let net = build_activation_net(&detector)?;
    let gen_cfg = cfg.generator().with_detector_taps(&detector);
    let size = gen_cfg.image_size;
    fs::create_dir_all(&args.out)?;
    let data = gan_samples(&store, Some(Split::Train), &detector, &net, size, Some(&args.out.join("descriptors")))?;
    let perceptual = cfg.perceptual_net()?;
    let mut schedule = cfg.gan.clone();
    if let Some(s) = args.steps {
        schedule.max_steps = Some(s);
    }
    let generator = Generator::new(gen_cfg, args.seed)?;
    let discriminator = Discriminator::new(cfg.discriminator(), args.seed.wrapping_add(1))?;
    let frozen = FrozenNets {
        perceptual: &perceptual,
        detector: &detector,
    };
    let mut trainer = GanTrainer::new(generator, discriminator, frozen, &data, schedule)?;
    log::info!("training on {} samples for {} steps", data.len(), trainer.total_steps());
    let ckpt_dir = args.out.join("checkpoints");
    let every = args.checkpoint_every;
    let outcome = trainer.run(|t, r| {
        if r.step % 100 == 0 {
            log::info!("step {}: L_adv {:.4} L_G {:?} L_D {:?}", r.step, r.l_adv, r.l_g, r.l_d);
        }
        let done = r.step + 1;
        if every > 0 && done % every == 0 {
            fs::create_dir_all(&ckpt_dir)?;
            t.generator().save(ckpt_dir.join(format!("generator-{done:06}.safetensors")))?;
            t.discriminator().save(ckpt_dir.join(format!("discriminator-{done:06}.safetensors")))?;
        }
        Ok(())
    });
    let (generator, discriminator, log) = trainer.into_models();
    let g_path = args.out.join("generator.safetensors");
    let d_path = args.out.join("discriminator.safetensors");
    let l_path = args.out.join("losses.csv");
    generator.save(&g_path)?;
    discriminator.save(&d_path)?;
    write_loss_csv(csv_file(&l_path)?, &log)?;
    for p in [&g_path, &d_path, &l_path] {
        println!("{}", p.display());
    }
    outcome.context("training stopped early; the last good state was saved")?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub vessel: PathBuf,
    #[arg(long)]
    pub descriptors: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Zero everything outside this field-of-view mask.
    #[arg(long)]
    pub fov: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelSource,
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let vessel = VesselMask::load(&args.vessel)?;
    let (_, set) = load_descriptors(&args.descriptors)?;
    let mut image = match args.model.resolve()? {
        Remote::Local(p) => {
            let g = Generator::load(&p)?;
            g.generate(&vessel, &set, &NoiseCode::for_seed(g.config().noise_dim, args.seed))?
        }
        Remote::Server { rt, client, id } => rt.block_on(client.generate_image(&id, &vessel, &set, args.seed))?,
    };
    if let Some(f) = &args.fov {
        let mask = VesselMask::load(f)?.data().mapv(|v| v > 0.5);
        image = crop_to_fov(&image, &mask)?;
    }
    create_parent(&args.out)?;
    image.save_png(&args.out)?;
    println!("{}", args.out.display());
    Ok(())
}

fn parse_placement(s: &str) -> Result<(u64, usize, usize), String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [id, left, top] = parts.as_slice() else {
        return Err("expected ID:LEFT:TOP".into());
    };
    let num = |v: &str| v.parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((id.parse::<u64>().map_err(|e| format!("`{id}`: {e}"))?, num(left)?, num(top)?))
}

#[derive(Debug, Args)]
pub struct ManipulateArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON array of edits, e.g. [{"op": "remove", "id": 3}].
    #[arg(long)]
    pub ops: Option<PathBuf>,
    /// Move a lesion: ID:LEFT:TOP in image pixels.
    #[arg(long = "move", value_parser = parse_placement)]
    pub moves: Vec<(u64, usize, usize)>,
    /// Copy a lesion to a new place: ID:LEFT:TOP.
    #[arg(long = "clone", value_parser = parse_placement)]
    pub clones: Vec<(u64, usize, usize)>,
    #[arg(long = "remove")]
    pub removes: Vec<u64>,
    #[arg(long)]
    pub remove_all: bool,
    /// Keep a random fraction of the lesions.
    #[arg(long)]
    pub keep_fraction: Option<f64>,
    /// Multiply the lesion count by an integer factor.
    #[arg(long)]
    pub multiply: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Field-of-view mask bounding new placements.
    #[arg(long)]
    pub fov: Option<PathBuf>,
}

pub fn manipulate(args: ManipulateArgs) -> Result<()> {
    let (image_id, mut set) = load_descriptors(&args.input)?;
    let mut ops: Vec<EditOp> = match &args.ops {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => Vec::new(),
    };
    ops.extend(args.moves.iter().map(|&(id, left, top)| EditOp::Move { id, left, top }));
    ops.extend(args.clones.iter().map(|&(id, left, top)| EditOp::Clone { id, left, top }));
    ops.extend(args.removes.iter().map(|&id| EditOp::Remove { id }));
    set = apply_edits(&set, &ops)?;
    if args.remove_all {
        set = remove_all(&set);
    }
    if let Some(f) = args.keep_fraction {
        set = sample_subset(&set, f, args.seed)?;
    }
    if let Some(k) = args.multiply {
        let fov = match &args.fov {
            Some(p) => Some(VesselMask::load(p)?.data().mapv(|v| v > 0.5)),
            None => None,
        };
        set = multiply(&set, k, args.seed, fov.as_ref())?;
    }
    create_parent(&args.out)?;
    save_descriptors(&args.out, &set, &image_id)?;
    log::info!("{} descriptors", set.len());
    println!("{}", args.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub synth: PathBuf,
    /// Match images by file stem and report MSE.
    #[arg(long)]
    pub paired: bool,
    /// Feature-net checkpoint for the embedding; without it a low-resolution
    /// thumbnail embedding is used.
    #[arg(long)]
    pub feature_net: Option<PathBuf>,
    /// Expected SHA-256 fingerprint of the feature-net weights.
    #[arg(long)]
    pub pin: Option<String>,
    #[arg(long, default_value_t = 16)]
    pub thumbnail: usize,
    #[arg(long, default_value = "custom")]
    pub dataset: String,
    #[arg(long, default_value = "patho-gan")]
    pub method: String,
    /// Directory for summary.toml and per_image.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let real = image_dir(&args.real)?;
    let synth = image_dir(&args.synth)?;
    let embedding: Box<dyn Embedding> = match &args.feature_net {
        Some(p) => Box::new(FeatureNetEmbedding::new(FeatureNet::load(p)?, args.pin.as_deref())?),
        None => {
            log::warn!("no --feature-net given; FID uses a {0}x{0} thumbnail embedding", args.thumbnail);
            Box::new(ThumbnailEmbedding { size: args.thumbnail })
        }
    };
    if args.paired && !real.keys().eq(synth.keys()) {
        bail!("paired evaluation needs the same file stems in both folders");
    }
    let real: Vec<_> = real.into_iter().collect();
    let synth: Vec<_> = synth.into_iter().collect();
    let report = EvalReport::compute(&args.dataset, &args.method, &real, &synth, embedding.as_ref(), args.paired)?;
    let summary = report.summary_toml()?;
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("summary.toml"), &summary)?;
            report.write_csv(csv_file(&dir.join("per_image.csv"))?)?;
            println!("{}", dir.join("summary.toml").display());
            println!("{}", dir.join("per_image.csv").display());
        }
        None => print!("{summary}"),
    }
    Ok(())
}

pub fn severity(image: &Path, model: ModelSource) -> Result<()> {
    let image = RetinalImage::load(image)?;
    let (score, grade) = match model.resolve()? {
        Remote::Local(p) => {
            let d = Detector::load(&p)?;
            let size = d.config().input_size;
            let s = d.predict_severity(&image.resized(size, size))?;
            (s.0, s.grade())
        }
        Remote::Server { rt, client, id } => {
            let r = rt.block_on(client.severity_image(&id, &image))?;
            (r.score, r.grade)
        }
    };
    println!("score = {score}\ngrade = {grade}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Detector checkpoint: scores images and extracts descriptors.
    #[arg(long)]
    pub detector: Option<PathBuf>,
    #[arg(long)]
    pub generator: Option<PathBuf>,
    /// Pre-extracted descriptors, `<dir>/<image id>.json`.
    #[arg(long)]
    pub descriptors: Option<PathBuf>,
    /// Analytic stand-ins for the generator and the severity model.
    #[arg(long)]
    pub stub: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn severity_curve(cfg: &RunConfig, args: CurveArgs) -> Result<()> {
    let store = Store::open(&args.store)?;
    let detector = args.detector.as_ref().map(Detector::load).transpose()?;
    let generator = args.generator.as_ref().map(Generator::load).transpose()?;
    let net = detector.as_ref().map(build_activation_net).transpose()?;
    let size = match (&generator, &detector) {
        (Some(g), _) => g.config().image_size,
        (None, Some(d)) => d.config().input_size,
        (None, None) => cfg.image_size(),
    };
    let mut items = Vec::new();
    for e in store.entries(args.split.split()) {
        if e.vessel.is_none() {
            continue;
        }
        let image = store.image(e)?.resized(size, size);
        let descriptors = match (&args.descriptors, &detector, &net) {
            (Some(dir), _, _) => load_descriptors(dir.join(format!("{}.json", e.id)))?.1,
            (None, Some(d), Some(n)) => {
                let input = d.config().input_size;
                describe_image(d, n, &image, &LocateParams::for_size(input))?.set
            }
            _ => bail!("pass --descriptors or --detector"),
        };
        let fov = store.image(e)?.fov.map(|f| {
            let m = VesselMask::new(f.mapv(|b| b as u8 as f64)).expect("binary mask");
            m.resized(size, size).data().mapv(|v| v > 0.5)
        });
        items.push(CurveItem {
            id: e.id.clone(),
            vessel: store.vessel(e)?.resized(size, size),
            descriptors,
            fov,
        });
    }
    if items.is_empty() {
        bail!("no images with vessel masks in the selected split");
    }
    let stub_synth;
    let synth: &dyn Synthesizer = match (&generator, args.stub) {
        (Some(g), false) => g,
        (_, true) => {
            let taps = match &detector {
                Some(d) => cfg.generator().with_detector_taps(d).tap_shapes(),
                None => cfg.generator().tap_shapes(),
            };
            stub_synth = StubSynthesizer { tap_shapes: taps, gain: 1.0 };
            &stub_synth
        }
        (None, false) => bail!("pass --generator or --stub"),
    };
    let model: &dyn SeverityModel = match (&detector, args.stub) {
        (_, true) => &StubSeverity,
        (Some(d), false) => d,
        (None, false) => bail!("pass --detector or --stub"),
    };
    let report = run_curve(&items, &CURVE_SCALES, synth, model, args.seed)?;
    fs::create_dir_all(&args.out)?;
    let table = args.out.join("severity_curve.csv");
    let records = args.out.join("severity_records.csv");
    report.write_csv(csv_file(&table)?)?;
    report.write_records_csv(csv_file(&records)?)?;
    println!("{}", table.display());
    println!("{}", records.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub detector: PathBuf,
    /// Perceptual weights, one model each.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 1.0])]
    pub weights: Vec<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Number of test images rendered per model.
    #[arg(long, default_value_t = 4)]
    pub preview: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn ablation(cfg: &RunConfig, args: AblationArgs) -> Result<()> {
    let store = Store::open(&args.store)?;
    let detector = Detector::load(&args.detector)?;
    let net = build_activation_net(&detector)?;
    let gen_cfg = cfg.generator().with_detector_taps(&detector);
    let size = gen_cfg.image_size;
    let train = gan_samples(&store, Some(Split::Train), &detector, &net, size, None)?;
    let preview = match gan_samples(&store, Some(Split::Test), &detector, &net, size, None) {
        Ok(p) => p,
        Err(_) => train.clone(),
    };
    let preview = &preview[..args.preview.min(preview.len())];
    let perceptual = cfg.perceptual_net()?;
    let mut schedule = cfg.gan.clone();
    if let Some(s) = args.steps {
        schedule.max_steps = Some(s);
    }
    let setup = AblationSetup {
        dataset: &train,
        preview,
        generator: gen_cfg,
        discriminator: cfg.discriminator(),
        frozen: FrozenNets {
            perceptual: &perceptual,
            detector: &detector,
        },
        schedule,
        model_seed: args.seed,
    };
    let report = ablation_percept(&setup, &args.weights)?;
    fs::create_dir_all(args.out.join("logs"))?;
    let gallery = args.out.join("gallery.png");
    let summary = args.out.join("summary.csv");
    report.save_gallery(&gallery)?;
    report.write_summary_csv(csv_file(&summary)?)?;
    for (i, run) in report.runs.iter().enumerate() {
        if let Some(e) = &run.error {
            log::warn!("{}: {e}", run.label);
        }
        write_loss_csv(csv_file(&args.out.join(format!("logs/run{i}.csv")))?, &run.log)?;
    }
    println!("{}", gallery.display());
    println!("{}", summary.display());
    Ok(())
}
