//! `incseg`: batch entry points for the class-incremental protocol.

mod plot;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use incseg::annotations::{BudgetSplit, CapMode};
use incseg::data::{generate_synthetic, load_manifest, DatasetManifest, Split, SyntheticSpec};
use incseg::experiment::{evaluate_model, named, run_increment, IncrementConfig, IncrementReport};
use incseg::inference::{DEFAULT_OVERLAP, DEFAULT_WINDOW};
use incseg::losses::{LossConfig, Regularizer};
use incseg::metrics::{mean_iou_imagewise, Summary};
use incseg::model::{checkpoint, ArchConfig, HeadInit, LabelSpace, SegModel};
use incseg::trainer::{pretrain, FinetuneConfig, PretrainConfig, SelectionMode};
use serde::Serialize;

use report::{file_hash, manifest_hash, Report};

#[derive(Parser)]
#[command(
    name = "incseg",
    version,
    about = "Class-incremental semantic segmentation from point clicks"
)]
struct Cli {
    /// Worker threads for window inference (1 = single-threaded).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic background/road/building dataset and its manifest.
    Synth(SynthArgs),
    /// Train a network on the pretrain split.
    Pretrain(PretrainArgs),
    /// Add a class from simulated clicks on every incremental image.
    Increment(IncrementArgs),
    /// Repeat the increment protocol over several annotation budgets.
    Sweep(SweepArgs),
    /// Score a checkpoint on a split without fine-tuning.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 20)]
    pretrain: usize,
    #[arg(long, default_value_t = 6)]
    incremental: usize,
    #[arg(long, default_value_t = 3.0)]
    line_density: f64,
    #[arg(long, default_value_t = 6.0)]
    rect_density: f64,
    #[arg(long, default_value_t = 0.06)]
    noise: f64,
    #[arg(long, default_value_t = 300)]
    min_new_class_pixels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Classes to train, comma-separated; others count as background.
    /// Defaults to every manifest class (the control network).
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    #[arg(long, default_value = "standard")]
    arch: String,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Crops per pseudo-epoch.
    #[arg(long, default_value_t = 10_000)]
    samples_per_epoch: usize,
    #[arg(long, default_value_t = 256)]
    crop: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path; defaults to `<out>.report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadInitArg {
    Zero,
    BackgroundCopy,
}

#[derive(Clone, Copy, ValueEnum)]
enum CapModeArg {
    Global,
    PerClass,
}

#[derive(Args)]
struct ProtocolArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Class to add; defaults to the one manifest class the checkpoint lacks.
    #[arg(long)]
    new_class: Option<String>,
    #[arg(long, default_value = "none")]
    regularizer: Regularizer,
    /// Optional JSON file with loss weights (`LossConfig` fields).
    #[arg(long)]
    loss_config: Option<PathBuf>,
    /// Number of seeds; runs use seeds `seed_base..seed_base + seeds`.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed_base: u64,
    /// Count the budget over both categories instead of per category.
    #[arg(long)]
    total_split: bool,
    #[arg(long)]
    exclude_background: bool,
    #[arg(long, default_value = "benchmark")]
    selection: SelectionMode,
    #[arg(long, value_enum, default_value = "zero")]
    head_init: HeadInitArg,
    #[arg(long, default_value_t = 2e-5)]
    lr: f64,
    #[arg(long, default_value_t = 30)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    #[arg(long, default_value_t = 15)]
    selection_window: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 256)]
    crop: usize,
    /// Pseudo-label cap; defaults to the number of new-class clicks.
    #[arg(long)]
    cap: Option<usize>,
    #[arg(long, value_enum, default_value = "global")]
    cap_mode: CapModeArg,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = DEFAULT_OVERLAP)]
    overlap: f64,
}

#[derive(Args)]
struct IncrementArgs {
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Clicks per category (new class and background).
    #[arg(long, default_value_t = 300)]
    budget: usize,
    /// JSON report.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-class table.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[arg(long, value_delimiter = ',', default_value = "25,50,100,300")]
    budgets: Vec<usize>,
    /// Curve CSV; the plot is written next to it with an `.svg` extension
    /// and the full report with `.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "incremental")]
    split: Split,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = DEFAULT_OVERLAP)]
    overlap: f64,
    #[arg(long)]
    exclude_background: bool,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Increment(a) => increment(a),
        Command::Sweep(a) => sweep(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn open_manifest(path: &Path) -> Result<DatasetManifest> {
    let m = load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))?;
    for w in &m.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(m)
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        image_size: a.size,
        n_pretrain: a.pretrain,
        n_incremental: a.incremental,
        line_density: a.line_density,
        rect_density: a.rect_density,
        noise: a.noise,
        min_new_class_pixels: a.min_new_class_pixels,
        seed: a.seed,
    };
    let manifest = generate_synthetic(&spec, &a.out)?;
    let path = a.out.join("manifest.json");
    let inputs = BTreeMap::from([("manifest".to_owned(), manifest_hash(&path, &manifest)?)]);
    Report::new("synth", &spec, inputs, json_count(&manifest))
        .write(&a.out.join("synth.report.json"))?;
    println!("{}", path.display());
    Ok(())
}

fn json_count(m: &DatasetManifest) -> BTreeMap<&'static str, usize> {
    BTreeMap::from([
        ("pretrain", m.entries(Split::Pretrain).count()),
        ("incremental", m.entries(Split::Incremental).count()),
    ])
}

#[derive(Serialize)]
struct PretrainEcho<'a> {
    arch: &'a ArchConfig,
    label_space: &'a LabelSpace,
    pretrain: &'a PretrainConfig,
}

#[derive(Serialize)]
struct PretrainResult {
    updates: usize,
    first_loss: f64,
    last_loss: f64,
    /// Mean loss over the final 10% of updates.
    tail_loss: f64,
    weights_hash: String,
    checkpoint: PathBuf,
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let manifest = open_manifest(&a.manifest)?;
    let full = manifest.label_space()?;
    let space = match &a.classes {
        None => full.clone(),
        Some(names) => {
            if let Some(bad) = names.iter().find(|n| full.id_of(n).is_none()) {
                bail!("class {bad:?} is not declared in the manifest");
            }
            let bg = full.name(full.background_id()).expect("background id");
            if !names.iter().any(|n| n == bg) {
                bail!("--classes must include the background class {bg:?}");
            }
            LabelSpace::new(names.iter().cloned(), bg)?
        }
    };
    let arch = ArchConfig::by_name(&a.arch)?.with_seed(a.seed);
    let cfg = PretrainConfig {
        learning_rate: a.lr,
        pseudo_epochs: a.epochs,
        samples_per_pseudo_epoch: a.samples_per_epoch,
        crop_size: a.crop,
        batch_size: a.batch,
        seed: a.seed,
    };
    cfg.validate()?;
    let data = manifest.load_split_in(Split::Pretrain, &space)?;
    let total = cfg.updates();
    let (model, trace) = pretrain(
        SegModel::new(arch.clone(), space.clone()),
        &data,
        &cfg,
        |p| {
            if p.step % 50 == 0 || p.step == p.total_steps {
                log::info!("update {}/{} loss {:.4}", p.step, p.total_steps, p.loss);
            }
        },
    )?;
    checkpoint::save(&model, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let losses: Vec<f64> = trace.steps.iter().map(|s| s.loss.total).collect();
    let tail = &losses[losses.len() - (losses.len() / 10).max(1)..];
    let result = PretrainResult {
        updates: total,
        first_loss: losses[0],
        last_loss: *losses.last().expect("at least one update"),
        tail_loss: tail.iter().sum::<f64>() / tail.len() as f64,
        weights_hash: model.weights_hash(),
        checkpoint: a.out.clone(),
    };
    let inputs = BTreeMap::from([(
        "manifest".to_owned(),
        manifest_hash(&a.manifest, &manifest)?,
    )]);
    let echo = PretrainEcho {
        arch: &arch,
        label_space: &space,
        pretrain: &cfg,
    };
    let report_path = a
        .report
        .unwrap_or_else(|| with_suffix(&a.out, ".report.json"));
    Report::new("pretrain", echo, inputs, result).write(&report_path)?;
    println!("{}", a.out.display());
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Everything the protocol commands share, loaded and checked.
struct Protocol {
    model: SegModel,
    full: LabelSpace,
    images: Vec<incseg::LabeledImage>,
    base: IncrementConfig,
    inputs: BTreeMap<String, String>,
}

impl ProtocolArgs {
    fn load(&self) -> Result<Protocol> {
        let manifest = open_manifest(&self.manifest)?;
        let model = checkpoint::load(&self.checkpoint)
            .with_context(|| format!("loading checkpoint {}", self.checkpoint.display()))?;
        let full = manifest.label_space()?;
        let old = model.label_space();
        if old.new_class_id().is_some() {
            bail!("checkpoint already contains an incremental class");
        }
        if let Some(missing) = old.names().iter().find(|n| full.id_of(n).is_none()) {
            bail!("checkpoint class {missing:?} is not declared in the manifest");
        }
        let new_class = match &self.new_class {
            Some(c) => c.clone(),
            None => {
                let candidates: Vec<&String> = full
                    .names()
                    .iter()
                    .filter(|n| old.id_of(n).is_none())
                    .collect();
                match candidates.as_slice() {
                    [one] => (*one).clone(),
                    [] => bail!("every manifest class is already known to the checkpoint"),
                    many => bail!("several candidate new classes {many:?}; pass --new-class"),
                }
            }
        };
        let mut loss = match &self.loss_config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str::<LossConfig>(&text)
                    .with_context(|| format!("parsing {}", p.display()))?
            }
            None => LossConfig::default(),
        };
        loss.regularizer = self.regularizer;
        loss.validate()?;
        if self.seeds == 0 {
            bail!("--seeds must be at least 1");
        }
        let base = IncrementConfig {
            new_class,
            budget: 0,
            budget_split: if self.total_split {
                BudgetSplit::Total
            } else {
                BudgetSplit::PerCategory
            },
            seeds: (self.seed_base..self.seed_base + self.seeds).collect(),
            head_init: match self.head_init {
                HeadInitArg::Zero => HeadInit::Zero,
                HeadInitArg::BackgroundCopy => HeadInit::BackgroundCopy,
            },
            finetune: FinetuneConfig {
                learning_rate: self.lr,
                steps: self.steps,
                iterations_per_step: self.iterations,
                selection_window: self.selection_window,
                loss,
                pseudo_label_cap: self.cap,
                cap_mode: match self.cap_mode {
                    CapModeArg::Global => CapMode::Global,
                    CapModeArg::PerClass => CapMode::PerClass,
                },
                batch_size: self.batch,
                crop_size: self.crop,
                selection_mode: self.selection,
                eval_window: self.window,
                pseudo_label_window: self.window,
                pseudo_label_overlap: self.overlap,
                exclude_background: self.exclude_background,
                ..FinetuneConfig::default()
            },
            eval_window: self.window,
            eval_overlap: self.overlap,
            exclude_background: self.exclude_background,
        };
        base.finetune.validate()?;
        let images = manifest.load_split(Split::Incremental)?;
        if images.is_empty() {
            bail!("manifest has no incremental images");
        }
        let inputs = BTreeMap::from([
            (
                "manifest".to_owned(),
                manifest_hash(&self.manifest, &manifest)?,
            ),
            ("checkpoint".to_owned(), file_hash(&self.checkpoint)?),
        ]);
        Ok(Protocol {
            model,
            full,
            images,
            base,
            inputs,
        })
    }
}

impl Protocol {
    fn run(&self, budget: usize) -> Result<IncrementReport> {
        let cfg = IncrementConfig {
            budget,
            ..self.base.clone()
        };
        let report = run_increment(
            &self.model,
            &self.images,
            &self.full,
            &cfg,
            |id, seed, p| {
                if p.step == p.total_steps || p.step % 10 == 0 {
                    log::info!(
                        "seed {seed} {id}: step {}/{} loss {:.4}",
                        p.step,
                        p.total_steps,
                        p.loss
                    );
                }
            },
        )?;
        Ok(report)
    }
}

#[derive(Serialize)]
struct ClassRow {
    class: String,
    iou: Option<Summary>,
}

#[derive(Serialize)]
struct ImageRow {
    image_id: String,
    seed: u64,
    mean_iou: Option<f64>,
    ious: BTreeMap<String, Option<f64>>,
    selected_step: usize,
    clicks: usize,
    pseudo_labels: usize,
}

#[derive(Serialize)]
struct IncrementResult {
    new_class: String,
    budget: usize,
    before: BeforeRow,
    mean_iou: Summary,
    per_seed_mean_iou: Vec<f64>,
    per_class: Vec<ClassRow>,
    images: Vec<ImageRow>,
}

#[derive(Serialize)]
struct BeforeRow {
    mean_iou: f64,
    per_class: BTreeMap<String, Option<f64>>,
}

fn summarize(r: &IncrementReport, old: &LabelSpace) -> IncrementResult {
    let space = &r.label_space;
    IncrementResult {
        new_class: r.config.new_class.clone(),
        budget: r.config.budget,
        before: BeforeRow {
            mean_iou: r.before.mean_iou,
            per_class: named(&r.before.per_class, old),
        },
        mean_iou: r.after.mean_iou,
        per_seed_mean_iou: r.after.runs.iter().map(|x| x.mean_iou).collect(),
        per_class: r
            .after
            .per_class
            .iter()
            .map(|(id, s)| ClassRow {
                class: space.name(*id).unwrap_or("?").to_owned(),
                iou: *s,
            })
            .collect(),
        images: r
            .images
            .iter()
            .map(|o| ImageRow {
                image_id: o.image_id.clone(),
                seed: o.seed,
                mean_iou: o.mean_iou,
                ious: named(&o.ious, space),
                selected_step: o.trace.selected_step,
                clicks: o.clicks,
                pseudo_labels: o.pseudo_labels,
            })
            .collect(),
    }
}

fn increment(a: IncrementArgs) -> Result<()> {
    let protocol = a.protocol.load()?;
    let report = protocol.run(a.budget)?;
    let result = summarize(&report, protocol.model.label_space());
    let config = IncrementConfig {
        budget: a.budget,
        ..protocol.base.clone()
    };
    Report::new("increment", &config, protocol.inputs.clone(), &result).write(&a.out)?;
    if let Some(csv_path) = &a.csv {
        let file = std::fs::File::create(csv_path)
            .with_context(|| format!("creating {}", csv_path.display()))?;
        report.after.write_csv(&report.label_space, file)?;
    }
    println!(
        "mIoU {} ({}: {})",
        result.mean_iou,
        result.new_class,
        result
            .per_class
            .iter()
            .find(|c| c.class == result.new_class)
            .and_then(|c| c.iou)
            .map_or("n/a".to_owned(), |s| s.to_string())
    );
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    budget: usize,
    miou_mean: f64,
    miou_std: f64,
    new_class_iou_mean: Option<f64>,
    new_class_iou_std: Option<f64>,
    seeds: usize,
}

fn sweep(a: SweepArgs) -> Result<()> {
    if a.budgets.is_empty() {
        bail!("--budgets is empty");
    }
    let protocol = a.protocol.load()?;
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for &budget in &a.budgets {
        log::info!("budget {budget}");
        let report = protocol.run(budget)?;
        let new_id = report
            .label_space
            .new_class_id()
            .ok_or_else(|| anyhow!("report lacks the new class"))?;
        let new_iou = report.class_summary(new_id);
        rows.push(SweepRow {
            budget,
            miou_mean: report.after.mean_iou.mean,
            miou_std: report.after.mean_iou.std,
            new_class_iou_mean: new_iou.map(|s| s.mean),
            new_class_iou_std: new_iou.map(|s| s.std),
            seeds: report.after.runs.len(),
        });
        results.push(summarize(&report, protocol.model.label_space()));
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w =
        csv::Writer::from_path(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let points: Vec<plot::CurvePoint> = rows
        .iter()
        .map(|r| (r.budget, r.miou_mean * 100.0, r.miou_std * 100.0))
        .collect();
    let title = format!(
        "{} ({})",
        protocol.base.new_class, protocol.base.finetune.loss.regularizer
    );
    plot::budget_curve(&a.out.with_extension("svg"), &title, &points)?;
    #[derive(Serialize)]
    struct SweepEcho<'a> {
        budgets: &'a [usize],
        increment: &'a IncrementConfig,
    }
    let echo = SweepEcho {
        budgets: &a.budgets,
        increment: &protocol.base,
    };
    Report::new("sweep", echo, protocol.inputs.clone(), &results)
        .write(&a.out.with_extension("json"))?;
    println!("{}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalEcho {
    split: Split,
    window: usize,
    overlap: f64,
    exclude_background: bool,
}

#[derive(Serialize)]
struct EvalResult {
    label_space: LabelSpace,
    mean_iou: f64,
    per_class: BTreeMap<String, Option<f64>>,
    per_image: BTreeMap<String, Option<f64>>,
}

fn eval(a: EvalArgs) -> Result<()> {
    let manifest = open_manifest(&a.manifest)?;
    let model = checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let space = model.label_space().clone();
    let images = manifest.load_split_in(a.split, &space)?;
    if images.is_empty() {
        bail!("split {} is empty", a.split);
    }
    let ious = evaluate_model(&model, &images, a.window, a.overlap)?;
    let run = mean_iou_imagewise(&ious, &space, a.exclude_background)?;
    let result = EvalResult {
        per_class: named(&run.per_class, &space),
        per_image: images
            .iter()
            .map(|li| li.id.clone())
            .zip(run.per_image.iter().copied())
            .collect(),
        mean_iou: run.mean_iou,
        label_space: space,
    };
    let inputs = BTreeMap::from([
        (
            "manifest".to_owned(),
            manifest_hash(&a.manifest, &manifest)?,
        ),
        ("checkpoint".to_owned(), file_hash(&a.checkpoint)?),
    ]);
    let echo = EvalEcho {
        split: a.split,
        window: a.window,
        overlap: a.overlap,
        exclude_background: a.exclude_background,
    };
    Report::new("eval", echo, inputs, &result).write(&a.out)?;
    println!("mIoU {:.1}", result.mean_iou * 100.0);
    Ok(())
}
