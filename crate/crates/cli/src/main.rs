use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mcforge_cli::config::PipelineConfig;
use mcforge_cli::iterate::{iterate, IterateOptions, Outcome};
use mcforge_cli::models::{
    classifier_metrics, segment_dataset, segment_image, segmenter_metrics, train_catalog_classifier, train_catalog_segmenter,
    SegStart,
};
use mcforge_cli::step1::{load_hrs, step1};
use mcforge_cli::step2::step2;
use mcforge_core::augment::{load_split, write_dataset, ManifestEntry, Split};
use mcforge_core::catalog::{Catalog, CatalogLock, Decision, ModelKind, PatchRef};
use mcforge_core::edlclassify::Classifier;
use mcforge_core::imagecore::{load_micrograph, Patch};
use mcforge_core::neuralnet::Checkpoint;
use mcforge_core::segnet::{train_segnet, SegNetConfig};

#[derive(Parser)]
#[command(name = "mcforge", version, about = "Iterative microstructure class discovery")]
struct Cli {
    /// Pipeline configuration (JSON); flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment a micrograph into homogeneous regions and harvest patches.
    Step1 {
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Step1Flags,
    },
    /// Classify step 1 regions against the catalog and queue novel ones.
    Step2 {
        /// Step 1 output or a directory of patch images.
        input: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        /// Classifier checkpoint; defaults to the catalog's latest.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Where to write the predictions JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        tau_u: Option<f64>,
        #[arg(long)]
        k_prime: Option<usize>,
        /// Classify without touching the catalog.
        #[arg(long)]
        dry_run: bool,
    },
    /// Train the evidential classifier on the catalog's exemplars.
    TrainClassifier {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Also write the checkpoint here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Do not register the model in the catalog.
        #[arg(long)]
        no_register: bool,
    },
    /// Generate a seeded collage dataset from the catalog's exemplars.
    Augment {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the segmenter on an augment dataset or on the catalog.
    TrainSegnet {
        /// Dataset written by `augment`.
        #[arg(long, conflicts_with = "catalog")]
        data: Option<PathBuf>,
        /// Build collages from this catalog and register the model.
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Start from this checkpoint (dataset mode).
        #[arg(long, requires = "data")]
        warm: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Segment a micrograph with a trained segmenter.
    Segment {
        image: PathBuf,
        #[arg(long, required_unless_present = "catalog")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one discovery iteration on a new micrograph.
    Iterate {
        #[arg(required_unless_present = "resume")]
        image: Option<PathBuf>,
        #[arg(long)]
        catalog: PathBuf,
        /// Working directory for this iteration's outputs.
        #[arg(long)]
        work: PathBuf,
        /// Decide reviews automatically (testing only).
        #[arg(long)]
        auto: bool,
        /// Finish an iteration whose reviews have been decided.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        opts: Step1Flags,
    },
    /// Serve the review API.
    Serve {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long, default_value = mcforge_service::DEFAULT_BIND)]
        bind: String,
        /// Static review console assets.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
    /// Inspect or edit the catalog.
    #[command(subcommand)]
    Catalog(CatalogCommand),
}

#[derive(Args, Default)]
struct Step1Flags {
    #[arg(long)]
    l_s: Option<usize>,
    #[arg(long)]
    l_w: Option<usize>,
    #[arg(long)]
    kernel_sigma: Option<f64>,
    /// Fit this K instead of the suggested one.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long, conflicts_with = "no_reduce")]
    reduce: Option<usize>,
    #[arg(long)]
    no_reduce: bool,
    #[arg(long)]
    fit_stride: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    patch_stride: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Step1Flags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        let s = &mut cfg.step1;
        macro_rules! set {
            ($($flag:ident => $field:expr),*) => {$(if let Some(v) = self.$flag { $field = v; })*};
        }
        set!(l_s => s.l_s, l_w => s.l_w, k_max => s.k_max, patch_size => s.patch_size, patch_stride => s.patch_stride, seed => cfg.seed);
        if self.kernel_sigma.is_some() {
            s.kernel_sigma = self.kernel_sigma;
        }
        if self.k.is_some() {
            s.k = self.k;
        }
        if self.fit_stride.is_some() {
            s.fit_stride = self.fit_stride;
        }
        if self.reduce.is_some() {
            s.reduce = self.reduce;
        }
        if self.no_reduce {
            s.reduce = None;
        }
    }
}

#[derive(Subcommand)]
enum CatalogCommand {
    /// Create an empty catalog.
    Init {
        root: PathBuf,
        #[arg(long, default_value_t = mcforge_core::catalog::DEFAULT_PATCH_SIZE)]
        patch_size: usize,
    },
    /// Add a class from patch images or from a step 1 region.
    AddMc {
        root: PathBuf,
        #[arg(long)]
        name: String,
        /// Step 1 output directory.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Region id within `--from`.
        #[arg(long, requires = "from")]
        region: Option<u32>,
        #[arg(required_unless_present = "from")]
        patches: Vec<PathBuf>,
    },
    /// List classes.
    List { root: PathBuf },
    /// List pending review items.
    Queue {
        root: PathBuf,
        #[arg(long)]
        by_uncertainty: bool,
    },
    /// Decide a review item.
    Decide {
        root: PathBuf,
        item: u64,
        #[arg(long, conflicts_with = "create", required_unless_present = "create")]
        assign: Option<u32>,
        #[arg(long)]
        create: Option<String>,
        #[arg(long, default_value = "cli")]
        by: String,
    },
    /// List registered models.
    Models { root: PathBuf },
    /// Load the catalog and verify hashes and audit replay.
    Check { root: PathBuf },
}

/// Loads, mutates and commits the catalog under its lock.
fn with_catalog<T>(root: &Path, f: impl FnOnce(&mut Catalog) -> Result<T>) -> Result<T> {
    let _lock = CatalogLock::acquire(root)?;
    let mut c = Catalog::load(root).with_context(|| format!("loading catalog {}", root.display()))?;
    let out = f(&mut c)?;
    c.commit(root)?;
    Ok(out)
}

fn load_catalog(root: &Path) -> Result<Catalog> {
    Catalog::load(root).with_context(|| format!("loading catalog {}", root.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Step1 { image, out, opts } => {
            opts.apply(&mut cfg);
            let res = step1(&image, &cfg, &out)?;
            let s = &res.summary;
            println!(
                "suggested K {}, fitted K {}, {} labels, {} regions, {} patches -> {}",
                s.suggested_k,
                s.fitted_k,
                s.significant.len(),
                s.regions.len(),
                s.regions.iter().map(|r| r.patches.len()).sum::<usize>(),
                out.display()
            );
        }
        Command::Step2 {
            input,
            catalog,
            checkpoint,
            out,
            tau_u,
            k_prime,
            dry_run,
        } => {
            if let Some(t) = tau_u {
                cfg.classify.tau_u = t;
            }
            if let Some(k) = k_prime {
                cfg.classify.k_prime = k;
            }
            let classify = |c: &mut Catalog| {
                let ck = match &checkpoint {
                    Some(p) => Checkpoint::load(p)?,
                    None => c
                        .latest_model(ModelKind::Classifier)
                        .map(|(_, ck)| ck.clone())
                        .context("the catalog has no classifier; run train-classifier")?,
                };
                let (source, hrs) = load_hrs(&input)?;
                step2(c, &source, &hrs, &Classifier::from_checkpoint(&ck)?, &cfg.classify)
            };
            let report = if dry_run {
                classify(&mut load_catalog(&catalog)?)?
            } else {
                with_catalog(&catalog, classify)?
            };
            let out = out.unwrap_or_else(|| input.join("predictions.json"));
            write_json(&out, &report)?;
            for hr in &report.hrs {
                println!(
                    "HR {}: {:?}, mean uncertainty {:.2}{}",
                    hr.hr,
                    hr.verdict.decision,
                    hr.verdict.mean_uncertainty,
                    hr.item.map(|i| format!(", review item {i}")).unwrap_or_default()
                );
            }
        }
        Command::TrainClassifier {
            catalog,
            epochs,
            out,
            no_register,
        } => {
            if let Some(e) = epochs {
                cfg.classify.train.epochs = e;
            }
            let train = |c: &mut Catalog| {
                let (ck, log) = train_catalog_classifier(c, &cfg.classify)?;
                if let Some(path) = &out {
                    ck.save(path)?;
                }
                let last = log.last().map(|m| m.val_accuracy).unwrap_or_default();
                if no_register {
                    println!("trained on {} classes, val accuracy {last:.3}", ck.classes.len());
                } else {
                    let entry = c.register_model(ModelKind::Classifier, ck, classifier_metrics(&log))?;
                    println!("registered classifier model {} (val accuracy {last:.3})", entry.id);
                }
                Ok(())
            };
            if no_register {
                train(&mut load_catalog(&catalog)?)?;
            } else {
                with_catalog(&catalog, train)?;
            }
        }
        Command::Augment { catalog, out, count, size } => {
            if let Some(n) = count {
                cfg.segment.count = n;
            }
            if let Some(s) = size {
                cfg.segment.collage.size = s;
            }
            let items = segment_dataset(&load_catalog(&catalog)?, &cfg.segment, cfg.seed)?;
            let manifest = write_dataset(&items, &out)?;
            cfg.save(&out.join("config.json"))?;
            println!("{} collages -> {}", manifest.len(), out.display());
        }
        Command::TrainSegnet {
            data,
            catalog,
            out,
            warm,
            epochs,
        } => {
            if let Some(e) = epochs {
                cfg.segment.train.epochs = e;
            }
            if let Some(dir) = data {
                let out = out.context("--out is required with --data")?;
                let manifest: Vec<ManifestEntry> = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
                let classes: Vec<u32> = manifest
                    .iter()
                    .flat_map(|e| e.classes.iter().copied())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                let warm = warm.as_deref().map(Checkpoint::load).transpose()?;
                let net = SegNetConfig {
                    classes: classes.len(),
                    ..cfg.segment.net.clone()
                };
                let (ck, log) = train_segnet(
                    &load_split(&dir, Split::Train)?,
                    &load_split(&dir, Split::Val)?,
                    &classes,
                    &net,
                    &cfg.segment.train,
                    warm.as_ref(),
                )?;
                ck.save(&out)?;
                cfg.save(&out.with_extension("config.json"))?;
                let start = if warm.is_some() { SegStart::FineTune } else { SegStart::Scratch };
                write_json(&out.with_extension("metrics.json"), &segmenter_metrics(&log, start))?;
                println!("trained {} epochs on {} classes -> {}", log.len(), classes.len(), out.display());
            } else {
                let root = catalog.context("give --data or --catalog")?;
                with_catalog(&root, |c| {
                    let (ck, log, start) = train_catalog_segmenter(c, &cfg.segment, cfg.seed)?;
                    if let Some(path) = &out {
                        ck.save(path)?;
                    }
                    let entry = c.register_model(ModelKind::Segmenter, ck, segmenter_metrics(&log, start))?;
                    println!("registered segmenter model {} ({start:?}, {} epochs)", entry.id, log.len());
                    Ok(())
                })?;
            }
        }
        Command::Segment {
            image,
            checkpoint,
            catalog,
            out,
        } => {
            let ck = match (checkpoint, catalog) {
                (Some(p), _) => Checkpoint::load(p)?,
                (None, Some(root)) => load_catalog(&root)?
                    .latest_model(ModelKind::Segmenter)
                    .map(|(_, ck)| ck.clone())
                    .context("the catalog has no segmenter")?,
                (None, None) => bail!("give --checkpoint or --catalog"),
            };
            let summary = segment_image(&ck, &load_micrograph(&image)?, &out)?;
            for (c, f) in summary.classes.iter().zip(&summary.fractions) {
                println!("class {c}: {:.1}%", 100.0 * f);
            }
        }
        Command::Iterate {
            image,
            catalog,
            work,
            auto,
            resume,
            opts,
        } => {
            opts.apply(&mut cfg);
            match iterate(image.as_deref(), &catalog, &work, &cfg, IterateOptions { auto, resume })? {
                Outcome::AwaitingReview { items } => println!(
                    "{} HR(s) queued for review (items {items:?}); decide them, then run iterate --resume",
                    items.len()
                ),
                Outcome::Completed(r) => println!(
                    "classes {} -> {}, {} exemplars added, catalog version {}",
                    r.classes_before, r.classes_after, r.exemplars_added, r.catalog_version
                ),
            }
        }
        Command::Serve {
            catalog,
            bind,
            static_dir,
        } => {
            let state = Arc::new(mcforge_service::AppState::open(&catalog)?);
            tokio::runtime::Runtime::new()?.block_on(mcforge_service::serve(state, &bind, static_dir))?;
        }
        Command::Catalog(cmd) => catalog_command(cmd)?,
    }
    Ok(())
}

fn catalog_command(cmd: CatalogCommand) -> Result<()> {
    match cmd {
        CatalogCommand::Init { root, patch_size } => {
            if root.join("catalog.json").exists() {
                bail!("{} already holds a catalog", root.display());
            }
            Catalog::new(patch_size).commit(&root)?;
            println!("initialized {} ({patch_size} px patches)", root.display());
        }
        CatalogCommand::AddMc {
            root,
            name,
            from,
            region,
            patches,
        } => {
            let rec = with_catalog(&root, |c| {
                let mut refs: Vec<PatchRef> = Vec::new();
                if let Some(dir) = &from {
                    let (source, hrs) = load_hrs(dir)?;
                    let hr = match region {
                        Some(id) => hrs.iter().find(|h| h.id == id).with_context(|| format!("no region {id}"))?,
                        None if hrs.len() == 1 => &hrs[0],
                        None => bail!("{} has {} regions; pick one with --region", dir.display(), hrs.len()),
                    };
                    for (e, m) in &hr.patches {
                        let p = Patch {
                            row: e.row,
                            col: e.col,
                            size: m.width,
                            pixels: m.pixels.clone(),
                        };
                        refs.push(c.store_patch(&p, &source, hr.id)?);
                    }
                }
                for path in &patches {
                    let m = load_micrograph(path)?;
                    if m.width != m.height {
                        bail!("{} is not square", path.display());
                    }
                    let p = Patch {
                        row: 0,
                        col: 0,
                        size: m.width,
                        pixels: m.pixels.clone(),
                    };
                    refs.push(c.store_patch(&p, &m.id, 0)?);
                }
                Ok(c.add_mc(&name, refs)?)
            })?;
            println!("class {} '{}' with {} exemplars", rec.id, rec.name, rec.exemplars.len());
        }
        CatalogCommand::List { root } => {
            let c = load_catalog(&root)?;
            println!("catalog version {}, {} classes", c.version(), c.records().len());
            for r in c.records() {
                println!("{:>3}  {:<24} {:?}  {} exemplars", r.id, r.name, r.status, r.exemplars.len());
            }
        }
        CatalogCommand::Queue { root, by_uncertainty } => {
            let c = load_catalog(&root)?;
            let items = if by_uncertainty { c.pending_by_uncertainty() } else { c.pending() };
            for i in items {
                let top: Vec<String> = i
                    .prediction
                    .candidates
                    .iter()
                    .take(3)
                    .map(|k| format!("{}:{:.2}", k.class, k.p))
                    .collect();
                println!("{:>4}  u={:.2}  {}  {}", i.id, i.prediction.uncertainty, top.join(" "), i.patch.source);
            }
        }
        CatalogCommand::Decide {
            root,
            item,
            assign,
            create,
            by,
        } => {
            let decision = match (assign, create) {
                (Some(class_id), None) => Decision::Assign { class_id },
                (None, Some(name)) => Decision::CreateNew { name },
                _ => bail!("give exactly one of --assign and --create"),
            };
            let (item, created) = with_catalog(&root, |c| Ok(c.decide_review(item, decision, &by)?))?;
            match created {
                Some(r) => println!("item {} created class {} '{}'", item.id, r.id, r.name),
                None => println!("item {} decided", item.id),
            }
        }
        CatalogCommand::Models { root } => {
            for m in load_catalog(&root)?.models() {
                println!("{:>3}  {:?}  classes {:?}  at version {}", m.id, m.kind, m.classes, m.class_version);
            }
        }
        CatalogCommand::Check { root } => {
            let c = load_catalog(&root)?;
            if c.replayed()? != c {
                bail!("audit replay does not reproduce the catalog");
            }
            println!("ok: version {}, {} classes, {} review items", c.version(), c.records().len(), c.items().len());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
