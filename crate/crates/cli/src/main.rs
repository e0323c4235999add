use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use calm_core::attribution::{export_map, GradientSettings, MapKind};
use calm_core::evaluation::{max_box_acc, mpxap_cue_localization, remove_and_classify, AnnotatedSample, RacConfig};
use calm_core::model::ModelParams;
use calm_core::pipeline::{self, MapTarget};
use calm_core::seed::named_seed;
use calm_core::synth::{self, Dataset, PatchCueSpec, Split};
use calm_core::training::{Objective, TrainConfig};
use calm_core::{axioms, checkpoint, Tensor};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "calm", version, about = "Latent-cue attribution maps: training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic patch-cue dataset.
    GenData(GenData),
    /// Train a model on a dataset's training split.
    Train(Train),
    /// Export score maps for one image.
    Attribute(Attribute),
    /// Cue localization (mPxAP over class pairs).
    EvalCueloc(EvalCueloc),
    /// Remove-and-classify curves.
    EvalRac(EvalRac),
    /// Box localization with MaxBoxAcc.
    EvalWsol(EvalWsol),
    /// Run the attribution axiom witnesses.
    CheckAxioms(CheckAxioms),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 5)]
    glyph_size: usize,
    /// Side of the window holding both glyphs.
    #[arg(long, default_value_t = 16)]
    object_size: usize,
    #[arg(long, default_value_t = 6)]
    vocabulary: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_std: f64,
    #[arg(long, default_value_t = 250)]
    train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    eval_per_class: usize,
}

#[derive(Args, Debug)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "calm_em")]
    objective: Objective,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Global gradient-norm limit; 0 disables clipping.
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Feature channels entering the head.
    #[arg(long, default_value_t = 16)]
    channels: usize,
}

#[derive(Args, Debug)]
struct ModelData {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory; defaults to a folder inside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradientArgs {
    #[arg(long, default_value_t = 32)]
    ig_steps: usize,
    #[arg(long, default_value_t = 0.15)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 16)]
    noise_samples: usize,
    /// Blur applied to gradient maps before normalization.
    #[arg(long, default_value_t = 2.0)]
    grad_blur: f64,
}

impl GradientArgs {
    fn settings(&self, seed: u64) -> GradientSettings {
        GradientSettings {
            ig_steps: self.ig_steps,
            noise_sigma: self.noise_sigma,
            noise_samples: self.noise_samples,
            blur_sigma: self.grad_blur,
            seed: named_seed(seed, "noise"),
        }
    }
}

#[derive(Args, Debug)]
struct Attribute {
    #[command(flatten)]
    io: ModelData,
    /// Dataset-relative image path, e.g. images/eval/02000.tnsr.
    #[arg(long, conflicts_with = "index")]
    image: Option<String>,
    /// Position of the image in the dataset's annotation order.
    #[arg(long)]
    index: Option<usize>,
    #[arg(long, default_value = "calm_attr")]
    kind: MapKind,
    /// Target class; defaults to the image's label.
    #[arg(long)]
    class: Option<usize>,
    /// Second class of a counterfactual map.
    #[arg(long)]
    class_b: Option<usize>,
    /// Comma-separated classes of a subset map.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    grad: GradientArgs,
}

#[derive(Args, Debug)]
struct EvalCueloc {
    #[command(flatten)]
    io: ModelData,
    /// Map kind; defaults to the checkpoint head's own map.
    #[arg(long)]
    kind: Option<MapKind>,
    /// Largest number of differing parts for a class pair to count.
    #[arg(long, default_value_t = 1)]
    pair_filter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    grad: GradientArgs,
}

#[derive(Args, Debug)]
struct EvalRac {
    #[command(flatten)]
    io: ModelData,
    #[arg(long)]
    kind: Option<MapKind>,
    /// Comma-separated erase percentages.
    #[arg(long, value_delimiter = ',', default_value = "0,10,20,30,40,50,60,70,80,90,100")]
    k_grid: Vec<f64>,
    /// Random-mask repetitions per k.
    #[arg(long, default_value_t = 5)]
    rac_seeds: usize,
    #[arg(long, default_value_t = 3.0)]
    blur_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    grad: GradientArgs,
}

#[derive(Args, Debug)]
struct EvalWsol {
    #[command(flatten)]
    io: ModelData,
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7")]
    deltas: Vec<f64>,
    /// Number of evenly spaced thresholds in [0, 1].
    #[arg(long, default_value_t = 128)]
    tau_grid: usize,
    /// Score the ground-truth class alone instead of its taxonomy superset.
    #[arg(long)]
    singleton: bool,
}

#[derive(Args, Debug)]
struct CheckAxioms {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 100)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
    Axiom,
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<calm_core::Error> for Failure {
    fn from(e: calm_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn write_config(dir: &Path, lines: &[(&str, String)]) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let text: String = lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    fs::write(dir.join("config.txt"), text).with_context(|| format!("writing config in {}", dir.display()))
}

fn load_inputs(io: &ModelData) -> Result<(Dataset, ModelParams), Failure> {
    require(&io.data, "dataset")?;
    require(&io.ckpt, "checkpoint")?;
    let data = synth::load_dataset(&io.data).with_context(|| format!("loading {}", io.data.display()))?;
    let params = checkpoint::load(&io.ckpt).with_context(|| format!("loading {}", io.ckpt.display()))?;
    Ok((data, params))
}

/// The evaluation split, or every sample if the dataset has none.
fn eval_samples(data: &Dataset) -> Vec<AnnotatedSample> {
    let eval = data.split(Split::Eval);
    if eval.is_empty() {
        data.samples.clone()
    } else {
        eval
    }
}

fn out_dir(io: &ModelData, name: &str) -> PathBuf {
    io.out.clone().unwrap_or_else(|| io.ckpt.join(name))
}

fn gen_data(a: &GenData) -> Result<(), Failure> {
    let spec = PatchCueSpec {
        n_classes: a.classes,
        image_size: a.image_size,
        glyph_size: a.glyph_size,
        object_size: a.object_size,
        vocabulary: a.vocabulary,
        glyphs_per_class: 2,
        noise_std: a.noise_std,
        train_per_class: a.train_per_class,
        eval_per_class: a.eval_per_class,
        seed: named_seed(a.seed, "data"),
    };
    if let Err(e) = spec.validate() {
        return Err(Failure::Usage(e.to_string()));
    }
    let data = synth::generate(&spec)?;
    synth::write_dataset(&a.out, &data)?;
    println!("wrote {} images to {}", data.samples.len(), a.out.display());
    Ok(())
}

fn train(a: &Train) -> Result<(), Failure> {
    require(&a.data, "dataset")?;
    let data = synth::load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let defaults = TrainConfig::for_objective(a.objective);
    let cfg = TrainConfig {
        learning_rate: a.lr.unwrap_or(defaults.learning_rate),
        momentum: a.momentum.unwrap_or(defaults.momentum),
        weight_decay: a.weight_decay.unwrap_or(defaults.weight_decay),
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        objective: a.objective,
        grad_clip: a.grad_clip.unwrap_or(defaults.grad_clip),
        seed: 0,
    };
    if let Err(e) = cfg.validate() {
        return Err(Failure::Usage(e.to_string()));
    }
    let mut train_set = data.split(Split::Train);
    if train_set.is_empty() {
        train_set = data.samples.clone();
    }
    let classes = pipeline::dataset_classes(&data)?;
    let state = pipeline::fit(&train_set, classes, a.channels, &cfg, a.seed)?;
    let mut extra = cfg.to_kv();
    extra.retain(|(k, _)| k != "shuffle_seed");
    extra.push(("run_seed".into(), a.seed.to_string()));
    checkpoint::save(&a.out, &state.params, &extra)?;
    state.write_log(a.out.join("train_log.tsv"))?;
    let eval = data.split(Split::Eval);
    if !eval.is_empty() {
        let acc = pipeline::accuracy(&state.params, &eval)?;
        fs::write(a.out.join("eval_accuracy.tsv"), format!("accuracy\t{acc:.6}\n")).context("writing accuracy")?;
        println!("eval accuracy {:.1}%", 100.0 * acc);
    }
    println!("saved checkpoint to {}", a.out.display());
    Ok(())
}

fn attribute(a: &Attribute) -> Result<(), Failure> {
    let (data, params) = load_inputs(&a.io)?;
    let sample = match (&a.image, a.index) {
        (Some(path), _) => data
            .samples
            .iter()
            .find(|s| &s.path == path)
            .ok_or_else(|| Failure::Usage(format!("image {path} is not in the dataset")))?,
        (None, Some(i)) => data
            .samples
            .get(i)
            .ok_or_else(|| Failure::Usage(format!("index {i} out of range for {} images", data.samples.len())))?,
        (None, None) => return Err(Failure::Usage("give --image or --index".into())),
    };
    let class = a.class.unwrap_or(sample.label);
    let (target, suffix) = match a.kind {
        MapKind::CalmCounterfactual => {
            let b = a
                .class_b
                .ok_or_else(|| Failure::Usage("calm_counterfactual needs --class-b".into()))?;
            (MapTarget::Pair(class, b), format!("c{class}_vs_c{b}"))
        }
        MapKind::CalmSubset => {
            if a.classes.is_empty() {
                return Err(Failure::Usage("calm_subset needs --classes".into()));
            }
            let names: Vec<String> = a.classes.iter().map(|c| c.to_string()).collect();
            (MapTarget::Subset(a.classes.clone()), format!("c{}", names.join("+")))
        }
        MapKind::CalmSaliency => (MapTarget::None, "all".to_string()),
        _ => (MapTarget::Class(class), format!("c{class}")),
    };
    let values = pipeline::image_map(&params, a.kind, &sample.image, &target, &a.grad.settings(a.seed))?;
    let out = out_dir(&a.io, "maps");
    let image_stem = Path::new(&sample.path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let stem = out.join(format!("{image_stem}_{}_{suffix}", a.kind));
    let signed = a.kind == MapKind::CalmCounterfactual;
    export_map(&stem, &values, signed)?;
    if signed {
        let abs_stem = out.join(format!("{image_stem}_{}_{suffix}_abs", a.kind));
        export_map(abs_stem, &values.map(f64::abs), false)?;
    }
    write_config(
        &out,
        &[
            ("image", sample.path.clone()),
            ("kind", a.kind.to_string()),
            ("target", format!("{target:?}")),
            ("seed", a.seed.to_string()),
        ],
    )?;
    println!("wrote {}.pgm and {}.tnsr", stem.display(), stem.display());
    Ok(())
}

fn eval_cueloc(a: &EvalCueloc) -> Result<(), Failure> {
    let (data, params) = load_inputs(&a.io)?;
    let kind = a.kind.unwrap_or_else(|| pipeline::default_kind(params.config().head));
    let samples = eval_samples(&data);
    let maps = pipeline::class_maps(&params, kind, &samples, &a.grad.settings(a.seed))?;
    let mut report = mpxap_cue_localization(&samples, &data.attrs, &maps, a.pair_filter)?;
    report.echo("kind", kind);
    report.echo("seed", a.seed);
    let out = out_dir(&a.io, "eval_cueloc");
    report.write(&out, "pairs.csv")?;
    match report.aggregate("mpxap") {
        Some(v) => println!("mPxAP {:.2}% over {} pairs", 100.0 * v, report.items.len()),
        None => println!("mPxAP undefined"),
    }
    Ok(())
}

fn eval_rac(a: &EvalRac) -> Result<(), Failure> {
    let (data, params) = load_inputs(&a.io)?;
    let kind = a.kind.unwrap_or_else(|| pipeline::default_kind(params.config().head));
    let samples = eval_samples(&data);
    let maps = pipeline::label_maps(&params, kind, &samples, &a.grad.settings(a.seed))?;
    let cfg = RacConfig {
        k_grid: a.k_grid.clone(),
        seeds: a.rac_seeds,
        seed: named_seed(a.seed, "rac"),
        blur_sigma: a.blur_sigma,
    };
    let mut report = remove_and_classify(|x: &Tensor| params.predict(x), &samples, &maps, &cfg)?;
    report.echo("kind", kind);
    report.echo("run_seed", a.seed);
    let out = out_dir(&a.io, "eval_rac");
    report.write(&out, "curves.csv")?;
    for row in &report.items {
        println!("k={:>5}  A_k={}  A_r_k={}  R_k={}", row[0], row[1], row[2], row[3]);
    }
    Ok(())
}

fn eval_wsol(a: &EvalWsol) -> Result<(), Failure> {
    let (data, params) = load_inputs(&a.io)?;
    let samples = eval_samples(&data);
    let maps = pipeline::wsol_maps(&params, &samples, &data.taxonomy, !a.singleton)?;
    let mut report = max_box_acc(&maps, &samples, &a.deltas, a.tau_grid)?;
    report.echo("aggregation", if a.singleton { "singleton" } else { "superset" });
    let out = out_dir(&a.io, "eval_wsol");
    report.write(&out, "images.csv")?;
    if let Some(v) = report.aggregate("maxboxacc") {
        println!("MaxBoxAcc {:.2}%", 100.0 * v);
    }
    Ok(())
}

fn check_axioms(a: &CheckAxioms) -> Result<(), Failure> {
    require(&a.ckpt, "checkpoint")?;
    let params = checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let checks = axioms::run_suite(&params, a.draws, a.seed)?;
    for c in &checks {
        println!("{} {}", c.name, c.status.label());
        log::info!("{}: {:e}", c.name, c.value);
    }
    if checks.iter().all(|c| c.status.is_expected()) {
        Ok(())
    } else {
        Err(Failure::Axiom)
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Attribute(a) => attribute(a),
        Command::EvalCueloc(a) => eval_cueloc(a),
        Command::EvalRac(a) => eval_rac(a),
        Command::EvalWsol(a) => eval_wsol(a),
        Command::CheckAxioms(a) => check_axioms(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Axiom) => {
            eprintln!("axiom check failed");
            ExitCode::from(3)
        }
    }
}
